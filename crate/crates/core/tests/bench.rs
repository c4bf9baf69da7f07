use mixlora::bench::ledger::{capture, Source};
use mixlora::bench::{base_flop_ratio, block_flops, count_flops, measure_modes, BenchBlock, Phase};
use mixlora::model::{Model, ModelConfig};
use mixlora::moe::ForwardMode;
use mixlora::optim::AdamWConfig;

fn small() -> ModelConfig {
    ModelConfig {
        vocab_size: 32,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        n_layers: 2,
        n_experts: 4,
        top_k: 2,
        lora_rank: 4,
        max_seq_len: 32,
        ..Default::default()
    }
}

#[test]
fn analytic_counts_match_a_full_model_forward() {
    let cfg = small();
    let model = Model::<f64>::init(cfg.clone(), 1, 2, AdamWConfig::default()).unwrap();
    let tokens: Vec<u32> = (0..11).collect();
    for mode in [ForwardMode::Vanilla, ForwardMode::Optimized] {
        let (r, ledger) = capture(|| model.logits(&[&tokens], mode));
        r.unwrap();
        assert_eq!(ledger.moe_only(), count_flops(&cfg, 11, mode), "{mode}");
    }
}

#[test]
fn block_counts_and_ratio() {
    for k in 1..=4 {
        let cfg = ModelConfig { n_experts: 4, top_k: k, ..small() };
        let block = BenchBlock::<f64>::new(&cfg, 9, 5).unwrap();
        let v = block.measured_flops(ForwardMode::Vanilla).unwrap();
        let o = block.measured_flops(ForwardMode::Optimized).unwrap();
        assert_eq!(v, block_flops(&cfg, 9, ForwardMode::Vanilla, None));
        assert_eq!(o, block_flops(&cfg, 9, ForwardMode::Optimized, None));
        let (vb, ob) = (v.moe_totals().base, o.moe_totals().base);
        let (num, den) = base_flop_ratio(k);
        assert_eq!(ob * den, vb * num);
        assert_eq!(v.moe_totals().lora, o.moe_totals().lora);
        assert_eq!(v.moe_totals().router, o.moe_totals().router);
        assert!(v.iter().all(|(key, _)| key.source != Source::Activation));
    }
    assert_eq!(base_flop_ratio(2), (2, 3));
    assert_eq!(base_flop_ratio(1), (1, 1));
}

#[test]
fn latency_smoke() {
    let cfg = small();
    let reports = measure_modes(&cfg, &[ForwardMode::Vanilla, ForwardMode::Optimized], Phase::Forward, 16, 1, 3).unwrap();
    assert_eq!(reports.len(), 2);
    for r in &reports {
        assert_eq!(r.samples.len(), 3);
        assert!(r.us_per_token > 0.0);
        assert_eq!(r.tokens, 16);
    }
    assert!(measure_modes(&cfg, &[ForwardMode::Vanilla], Phase::Inference, 16, 0, 0).is_err());
}
