use mixlora::model::{compute_gradients, AdapterSet, Model, ModelConfig, Sequence};
use mixlora::moe::ForwardMode;
use mixlora::numerics::Tensor;
use mixlora::optim::AdamWConfig;
use mixlora::DropoutRng;
use rand::SeedableRng;

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        n_layers: 1,
        n_experts: 2,
        top_k: 2,
        lora_rank: 2,
        lora_alpha: 4.0,
        dropout_p: 0.0,
        aux_coef: 0.05,
        max_seq_len: 16,
        ..Default::default()
    }
}

fn randomize(set: &mut AdapterSet<f64>, std: f64, seed: u64) {
    let mut rng = DropoutRng::seed_from_u64(seed);
    for p in set.params_mut() {
        *p = Tensor::randn(p.shape().to_vec(), std, &mut rng);
    }
}

fn batch() -> Vec<Sequence> {
    vec![
        Sequence {
            tokens: vec![1, 3, 4, 0, 3],
            targets: vec![None, None, Some(2), Some(3), Some(4)],
        },
        Sequence {
            tokens: vec![2, 5, 0],
            targets: vec![None, Some(7), Some(5)],
        },
    ]
}

/// Central differences of the total loss against every trainable scalar.
fn max_relative_error(cfg: ModelConfig, seed: u64) -> f64 {
    let mut model = Model::<f64>::init(cfg, 11, 12, AdamWConfig::default()).unwrap();
    randomize(&mut model.adapters, 0.4, seed);
    let batch = batch();
    let (_, grads) = compute_gradients(
        &model.config,
        &model.base,
        &mut model.adapters,
        &batch,
        ForwardMode::Optimized,
        false,
    )
    .unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let n_params = grads.len();
    for p in 0..n_params {
        let len = grads[p].numel();
        for i in 0..len {
            let orig = model.adapters.params_mut()[p].data()[i];
            model.adapters.params_mut()[p].data_mut()[i] = orig + eps;
            let up = model.evaluate_loss(&batch, ForwardMode::Optimized).unwrap().total;
            model.adapters.params_mut()[p].data_mut()[i] = orig - eps;
            let down = model.evaluate_loss(&batch, ForwardMode::Optimized).unwrap().total;
            model.adapters.params_mut()[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[p].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let worst = max_relative_error(small(10), 3);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn gradients_match_with_sparse_routing_and_two_layers() {
    let cfg = ModelConfig {
        n_layers: 2,
        n_experts: 3,
        top_k: 1,
        ..small(10)
    };
    let worst = max_relative_error(cfg, 5);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn vanilla_and_optimized_logits_agree_end_to_end() {
    for (n, k) in [(2, 1), (4, 2), (8, 3)] {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 16,
            n_heads: 4,
            d_ff: 24,
            n_layers: 2,
            n_experts: n,
            top_k: k,
            lora_rank: 4,
            max_seq_len: 32,
            ..Default::default()
        };
        let mut model = Model::<f64>::init(cfg, 1, 2, AdamWConfig::default()).unwrap();
        randomize(&mut model.adapters, 0.3, n as u64);
        let seqs: [&[u32]; 2] = [&[1, 2, 3, 4, 5, 6, 7], &[19, 18, 0, 4]];
        let (v, sv) = model.logits(&seqs, ForwardMode::Vanilla).unwrap();
        let (o, so) = model.logits(&seqs, ForwardMode::Optimized).unwrap();
        assert!(v.max_abs_diff(&o) < 1e-8, "N={n} K={k}: {}", v.max_abs_diff(&o));
        assert_eq!(sv, so);
    }
}

#[test]
fn untrained_cross_entropy_is_near_log_vocab() {
    for vocab in [16, 64, 512] {
        let cfg = ModelConfig {
            vocab_size: vocab,
            max_seq_len: 64,
            ..Default::default()
        };
        let model = Model::<f64>::init(cfg, 4, 5, AdamWConfig::default()).unwrap();
        let seq = Sequence {
            tokens: (0..20).map(|i| (i * 7 % vocab) as u32).collect(),
            targets: (0..20).map(|i| Some(((i * 3 + 1) % vocab) as u32)).collect(),
        };
        let r = model.evaluate_loss(&[seq], ForwardMode::Optimized).unwrap();
        let lnv = (vocab as f64).ln();
        assert!((r.task_loss - lnv).abs() < 0.1, "V={vocab}: {} vs {lnv}", r.task_loss);
    }
}

#[test]
fn default_trainable_census() {
    let cfg = ModelConfig::default();
    let (l, n, d, dff, r) = (2, 8, 64, 128, 16);
    let expected = l * (4 * r * (d + d) + n * 3 * r * (d + dff)) + l * n * d;
    assert_eq!(expected, 164_864);
    assert_eq!(cfg.trainable_param_count(), expected);
    let set = AdapterSet::<f32>::init(&cfg, 0, AdamWConfig::default()).unwrap();
    assert_eq!(set.param_count(), expected);
}

#[test]
fn numeric_blowup_names_the_layer() {
    let cfg = ModelConfig { n_layers: 2, ..small(10) };
    let mut model = Model::<f64>::init(cfg, 1, 2, AdamWConfig::default()).unwrap();
    // poison only the second layer's value adapter
    let set = &mut model.adapters;
    set.layers[1].attention.v.b = Tensor::full(vec![8, 2], f64::INFINITY);
    set.layers[1].attention.v.a = Tensor::full(vec![2, 8], 1.0);
    let err = model.logits(&[&[1, 2, 3]], ForwardMode::Optimized).unwrap_err();
    match err {
        mixlora::Error::Numeric { layer, .. } => assert_eq!(layer, Some(1)),
        other => panic!("unexpected error {other}"),
    }
}
