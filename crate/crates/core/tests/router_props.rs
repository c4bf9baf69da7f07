use mixlora::moe::{aux_loss, DispatchCount, Router, RoutingStats};
use mixlora::numerics::{Graph, Tensor};
use proptest::prelude::*;

fn gates_for(logits: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![logits.len() / n, n], logits.to_vec()).unwrap());
    let p = g.softmax(x);
    let (gates, sel) = g.top_k_gates(p, k).unwrap();
    (g.value(gates).data().to_vec(), sel)
}

fn n_and_k() -> impl Strategy<Value = (usize, usize)> {
    (2usize..=16).prop_flat_map(|n| (Just(n), 1..=n))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gates_are_sparse_and_normalized(
        (n, k) in n_and_k(),
        rows in prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 16), 1..8),
    ) {
        let logits: Vec<f64> = rows.iter().flat_map(|r| r[..n].iter().copied()).collect();
        let (gates, sel) = gates_for(&logits, n, k);
        for (r, row) in gates.chunks(n).enumerate() {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            let chosen = &sel[r * k..(r + 1) * k];
            for (j, &v) in row.iter().enumerate() {
                prop_assert_eq!(v > 0.0 || chosen.contains(&j), chosen.contains(&j));
                prop_assert!(v >= 0.0);
            }
            // nothing left out beats anything chosen
            let lr = &logits[r * n..(r + 1) * n];
            let weakest = chosen.iter().map(|&j| lr[j]).fold(f64::INFINITY, f64::min);
            prop_assert!((0..n).filter(|j| !chosen.contains(j)).all(|j| lr[j] <= weakest));
        }
    }

    #[test]
    fn ties_go_to_the_lowest_index((n, k) in n_and_k(), value in -5.0f64..5.0) {
        let (gates, sel) = gates_for(&vec![value; n], n, k);
        prop_assert_eq!(sel, (0..k).collect::<Vec<_>>());
        for (j, &v) in gates.iter().enumerate() {
            if j < k {
                prop_assert!((v - 1.0 / k as f64).abs() < 1e-15);
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn aux_loss_is_minimal_at_uniform(n in 2usize..=16, coef in 1e-4f64..1.0, t in 1usize..50) {
        let uniform = RoutingStats {
            token_count: t * n,
            dispatch_counts: vec![t; n],
            prob_sums: vec![t as f64; n],
            per_token: 1,
        };
        prop_assert!((aux_loss(&uniform, n, coef).unwrap() - coef).abs() < 1e-12 * coef.max(1.0));
    }
}

#[test]
fn router_routes_every_row_to_k_experts() {
    use rand::SeedableRng;
    let mut rng = mixlora::DropoutRng::seed_from_u64(3);
    let router = Router::<f64>::new(8, 16, 2, &mut rng).unwrap();
    let h = Tensor::randn(vec![64, 16], 1.0, &mut rng);
    let routing = router.route(&h, DispatchCount::TopK).unwrap();
    assert_eq!(routing.stats.dispatch_counts.iter().sum::<usize>(), 128);
    assert_eq!(routing.selected.len(), 128);
    let again = router.route(&h, DispatchCount::TopK).unwrap();
    assert_eq!(routing.gates, again.gates);
}

#[test]
fn top_k_bounds_are_enforced() {
    let w = Tensor::<f64>::zeros(vec![4, 3]);
    assert!(Router::from_weight(w.clone(), 0).is_err());
    assert!(Router::from_weight(w.clone(), 5).is_err());
    assert!(Router::from_weight(w, 4).is_ok());
}
