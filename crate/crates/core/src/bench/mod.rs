//! FLOP accounting, wall-clock latency of the two MixLoRA forward
//! paths, and side-by-side comparison tables.

pub mod ledger;

use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{FfnAdapterKind, ModelConfig};
use crate::moe::{mixlora_forward_on, ForwardMode, MixLoraAdapters, SharedFfn};
use crate::multitask::MemoryCensus;
use crate::numerics::{Graph, Scalar, Tensor};
use crate::DropoutRng;
use ledger::{FlopKey, FlopLedger, FlopTotals, Projection, Source};

/// Analytic FLOP counts (two per multiply-add) for one MoE block over `tokens` tokens,
/// recorded under `layer`.
pub fn block_flops(cfg: &ModelConfig, tokens: usize, mode: ForwardMode, layer: Option<usize>) -> FlopLedger {
    let (t, d, dff) = (tokens as u64, cfg.d_model as u64, cfg.d_ff as u64);
    let t2 = 2 * t;
    let mut ledger = FlopLedger::new();
    let key = |projection, source| FlopKey { layer, projection, source };
    let (routed, rank) = match cfg.ffn_adapter {
        FfnAdapterKind::MixLora => (cfg.top_k as u64, cfg.lora_rank as u64),
        FfnAdapterKind::Lora => (1, cfg.dense_rank() as u64),
    };
    // W1 and W3 are shared across experts on the optimized path
    let up_rows = match (cfg.ffn_adapter, mode) {
        (FfnAdapterKind::MixLora, ForwardMode::Optimized) => t2,
        _ => t2 * routed,
    };
    ledger.add(key(Projection::W1, Source::Base), up_rows * d * dff);
    ledger.add(key(Projection::W3, Source::Base), up_rows * d * dff);
    ledger.add(key(Projection::W2, Source::Base), t2 * routed * d * dff);
    for p in [Projection::W1, Projection::W3, Projection::W2] {
        ledger.add(key(p, Source::Lora), t2 * routed * rank * (d + dff));
    }
    if cfg.ffn_adapter == FfnAdapterKind::MixLora {
        ledger.add(key(Projection::Router, Source::Router), t2 * cfg.n_experts as u64 * d);
    }
    ledger
}

/// Analytic FLOP counts of every MoE block in the model.
pub fn count_flops(cfg: &ModelConfig, tokens: usize, mode: ForwardMode) -> FlopLedger {
    let mut out = FlopLedger::new();
    for l in 0..cfg.n_layers {
        for (k, v) in block_flops(cfg, tokens, mode, Some(l)).iter() {
            out.add(*k, *v);
        }
    }
    out
}

/// `optimized / vanilla` base FLOPs as a reduced fraction `(2+K, 3K)`.
pub fn base_flop_ratio(top_k: usize) -> (u64, u64) {
    let (num, den) = (2 + top_k as u64, 3 * top_k as u64);
    let g = gcd(num, den);
    (num / g, den / g)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// A standalone MoE block with randomly filled adapters, for timing and
/// instrumented counting.
pub struct BenchBlock<T> {
    pub ffn: SharedFfn<T>,
    pub adapters: MixLoraAdapters<T>,
    pub input: Tensor<T>,
    pub cfg: ModelConfig,
}

impl<T: Scalar> BenchBlock<T> {
    pub fn new(cfg: &ModelConfig, tokens: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tokens == 0 {
            return Err(Error::Config("tokens must be positive".into()));
        }
        let mut rng = DropoutRng::seed_from_u64(seed);
        let (d, dff) = (cfg.d_model, cfg.d_ff);
        let ffn = SharedFfn::randn(d, dff, 0.02, &mut rng);
        let mut adapters = MixLoraAdapters::new(
            d, dff, cfg.n_experts, cfg.top_k, cfg.lora_rank, cfg.lora_alpha, 0.0, &mut rng,
        )?;
        adapters.router.weight = Tensor::randn(vec![cfg.n_experts, d], 1.0, &mut rng);
        for e in &mut adapters.experts {
            for a in e.adapters_mut() {
                a.b = Tensor::randn(a.b.shape().to_vec(), 0.02, &mut rng);
            }
        }
        let input = Tensor::randn(vec![tokens, d], 1.0, &mut rng);
        Ok(Self {
            ffn,
            adapters,
            input,
            cfg: cfg.clone(),
        })
    }

    fn prepare(&self, g: &mut Graph<T>, trainable: bool) -> (crate::moe::BoundFfn, crate::moe::BoundMixLora, crate::numerics::Var) {
        let ffn = self.ffn.bind(g);
        let block = self.adapters.bind(g, trainable);
        let h = g.constant(self.input.clone());
        (ffn, block, h)
    }

    /// Block output for `mode`.
    pub fn run(&self, mode: ForwardMode) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let (ffn, block, h) = self.prepare(&mut g, false);
        let out = mixlora_forward_on(&mut g, &ffn, &block, h, mode, self.cfg.dispatch, &mut None)?;
        Ok(g.value(out.out).clone())
    }

    /// Instrumented FLOP counts of one forward.
    pub fn measured_flops(&self, mode: ForwardMode) -> Result<FlopLedger> {
        let (r, ledger) = ledger::capture(|| self.run(mode));
        r?;
        Ok(ledger)
    }

    /// Wall time in microseconds of one timed region.
    fn time_once(&self, mode: ForwardMode, phase: Phase) -> Result<f64> {
        let mut g = Graph::new();
        let (ffn, block, h) = self.prepare(&mut g, phase != Phase::Inference);
        let start = Instant::now();
        let out = mixlora_forward_on(&mut g, &ffn, &block, h, mode, self.cfg.dispatch, &mut None)?;
        if phase == Phase::Backward {
            let loss = g.sum(out.out);
            std::hint::black_box(g.backward(loss)?);
        }
        let elapsed = start.elapsed();
        std::hint::black_box(g.value(out.out));
        Ok(elapsed.as_secs_f64() * 1e6)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Forward,
    Backward,
    Inference,
}

impl std::str::FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Phase::Forward),
            "backward" => Ok(Phase::Backward),
            "inference" => Ok(Phase::Inference),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: ForwardMode,
    pub phase: Phase,
    pub tokens: usize,
    /// Median wall time of the timed iterations, microseconds.
    pub wall_time_us: f64,
    pub us_per_token: f64,
    /// Raw wall time of every timed iteration, microseconds.
    pub samples: Vec<f64>,
}

impl LatencyReport {
    pub fn from_samples(mode: ForwardMode, phase: Phase, tokens: usize, samples: Vec<f64>) -> Result<Self> {
        if tokens == 0 || samples.is_empty() {
            return Err(Error::Contract("latency report needs tokens > 0 and at least one sample".into()));
        }
        let wall_time_us = median(&samples);
        Ok(Self {
            mode,
            phase,
            tokens,
            wall_time_us,
            us_per_token: wall_time_us / tokens as f64,
            samples,
        })
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median latency of one block forward path in 32-bit precision.
pub fn measure_latency(
    cfg: &ModelConfig,
    mode: ForwardMode,
    phase: Phase,
    tokens: usize,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<LatencyReport> {
    let mut reports = measure_modes(cfg, &[mode], phase, tokens, warmup_iters, timed_iters)?;
    Ok(reports.remove(0))
}

/// Times several modes with interleaved iterations so slow drift in machine
/// load affects them alike. Outputs of all modes are checked to agree first.
pub fn measure_modes(
    cfg: &ModelConfig,
    modes: &[ForwardMode],
    phase: Phase,
    tokens: usize,
    warmup_iters: usize,
    timed_iters: usize,
) -> Result<Vec<LatencyReport>> {
    if timed_iters == 0 {
        return Err(Error::Config("timed_iters must be >= 1".into()));
    }
    if modes.is_empty() {
        return Err(Error::Config("no modes to measure".into()));
    }
    let block = BenchBlock::<f32>::new(cfg, tokens, 0x5eed)?;
    let outputs: Vec<Tensor<f32>> = modes.iter().map(|&m| block.run(m)).collect::<Result<_>>()?;
    for o in &outputs[1..] {
        let diff = o.max_abs_diff(&outputs[0]);
        if !(diff < 1e-3) {
            return Err(Error::Numeric {
                what: format!("forward modes disagree by {diff}"),
                layer: None,
            });
        }
    }
    for _ in 0..warmup_iters {
        for &m in modes {
            block.time_once(m, phase)?;
        }
    }
    let mut samples = vec![Vec::with_capacity(timed_iters); modes.len()];
    for i in 0..timed_iters {
        // alternate which mode goes first
        for j in 0..modes.len() {
            let j = if i % 2 == 0 { j } else { modes.len() - 1 - j };
            samples[j].push(block.time_once(modes[j], phase)?);
        }
    }
    modes
        .iter()
        .zip(samples)
        .map(|(&m, s)| LatencyReport::from_samples(m, phase, tokens, s))
        .collect()
}

/// Short content hash of a model configuration.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let digest = Sha256::digest(&json);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemorySummary {
    pub base_bytes: usize,
    pub per_set_bytes: Vec<usize>,
}

impl From<&MemoryCensus> for MemorySummary {
    fn from(c: &MemoryCensus) -> Self {
        Self {
            base_bytes: c.base_bytes,
            per_set_bytes: c.per_set_bytes.clone(),
        }
    }
}

impl MemorySummary {
    pub fn total(&self) -> usize {
        self.base_bytes + self.per_set_bytes.iter().sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flops {
    pub base: u64,
    pub lora: u64,
    pub router: u64,
}

impl From<FlopTotals> for Flops {
    fn from(t: FlopTotals) -> Self {
        Self {
            base: t.base,
            lora: t.lora,
            router: t.router,
        }
    }
}

impl Flops {
    pub fn total(&self) -> u64 {
        self.base + self.lora + self.router
    }
}

/// One measured configuration in the JSON report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub config_hash: String,
    pub mode: ForwardMode,
    pub phase: Phase,
    pub us_per_token: f64,
    pub samples: Vec<f64>,
    pub flops: Flops,
    pub memory: MemorySummary,
}

impl BenchEntry {
    /// FLOPs are those of one MoE block over the report's tokens.
    pub fn new(cfg: &ModelConfig, latency: &LatencyReport, census: &MemoryCensus) -> Self {
        Self {
            config_hash: config_hash(cfg),
            mode: latency.mode,
            phase: latency.phase,
            us_per_token: latency.us_per_token,
            samples: latency.samples.clone(),
            flops: block_flops(cfg, latency.tokens, latency.mode, None).moe_totals().into(),
            memory: census.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: ForwardMode,
    pub us_per_token: f64,
    pub latency_pct: f64,
    pub base_flops: u64,
    pub base_flops_pct: f64,
    pub total_flops: u64,
    pub total_flops_pct: f64,
    pub memory_bytes: usize,
    pub memory_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingSummary {
    pub models: usize,
    pub total_bytes: usize,
    pub standalone_bytes: usize,
    /// `total_bytes / (models · standalone_bytes)`.
    pub per_model_share: f64,
    pub memory_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub config_hash: String,
    pub phase: Phase,
    /// Mode of the row every percentage is relative to.
    pub baseline: ForwardMode,
    pub rows: Vec<ComparisonRow>,
    /// `optimized / vanilla` base FLOPs, when both modes are present.
    pub base_flop_ratio: Option<f64>,
    pub sharing: Option<SharingSummary>,
    pub entries: Vec<BenchEntry>,
}

fn pct(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        return 100.0;
    }
    (1000.0 * value / baseline).round() / 10.0
}

/// Percentage table relative to the first entry. `sharing` is the census of
/// a single model followed by the census of the multi-model engine.
pub fn compare_report(
    entries: &[BenchEntry],
    sharing: Option<(&MemoryCensus, &MemoryCensus)>,
) -> Result<ComparisonReport> {
    let first = entries
        .first()
        .ok_or_else(|| Error::ReportMismatch("no entries to compare".into()))?;
    for e in &entries[1..] {
        if e.config_hash != first.config_hash {
            return Err(Error::ReportMismatch(format!(
                "config {} vs {}",
                e.config_hash, first.config_hash
            )));
        }
        if e.phase != first.phase {
            return Err(Error::ReportMismatch(format!("phase {:?} vs {:?}", e.phase, first.phase)));
        }
    }
    let rows = entries
        .iter()
        .map(|e| ComparisonRow {
            mode: e.mode,
            us_per_token: e.us_per_token,
            latency_pct: pct(e.us_per_token, first.us_per_token),
            base_flops: e.flops.base,
            base_flops_pct: pct(e.flops.base as f64, first.flops.base as f64),
            total_flops: e.flops.total(),
            total_flops_pct: pct(e.flops.total() as f64, first.flops.total() as f64),
            memory_bytes: e.memory.total(),
            memory_pct: pct(e.memory.total() as f64, first.memory.total() as f64),
        })
        .collect();
    let find = |m| entries.iter().find(|e| e.mode == m);
    let base_flop_ratio = match (find(ForwardMode::Vanilla), find(ForwardMode::Optimized)) {
        (Some(v), Some(o)) if v.flops.base > 0 => Some(o.flops.base as f64 / v.flops.base as f64),
        _ => None,
    };
    let sharing = match sharing {
        None => None,
        Some((single, multi)) => {
            let models = multi.per_set_bytes.len();
            if single.per_set_bytes.len() != 1 || models == 0 {
                return Err(Error::ReportMismatch(
                    "sharing needs a one-set census and a non-empty multi-set census".into(),
                ));
            }
            if single.base_bytes != multi.base_bytes {
                return Err(Error::ReportMismatch("censuses describe different bases".into()));
            }
            let standalone = single.total;
            let share = multi.total as f64 / (models * standalone) as f64;
            Some(SharingSummary {
                models,
                total_bytes: multi.total,
                standalone_bytes: standalone,
                per_model_share: share,
                memory_pct: pct(multi.total as f64, (models * standalone) as f64),
            })
        }
    };
    Ok(ComparisonReport {
        config_hash: first.config_hash.clone(),
        phase: first.phase,
        baseline: first.mode,
        rows,
        base_flop_ratio,
        sharing,
        entries: entries.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(mode: ForwardMode, us: f64) -> BenchEntry {
        BenchEntry {
            config_hash: "abc".into(),
            mode,
            phase: Phase::Forward,
            us_per_token: us,
            samples: vec![us],
            flops: Flops { base: 30, lora: 6, router: 1 },
            memory: MemorySummary { base_bytes: 100, per_set_bytes: vec![10] },
        }
    }

    #[test]
    fn worked_flop_example() {
        let cfg = ModelConfig { n_layers: 1, ..Default::default() };
        let v = block_flops(&cfg, 10, ForwardMode::Vanilla, None).moe_totals();
        let o = block_flops(&cfg, 10, ForwardMode::Optimized, None).moe_totals();
        assert_eq!(v.base, 983_040);
        assert_eq!(o.base, 655_360);
        assert_eq!(v.lora, o.lora);
        assert_eq!(v.router, o.router);
        assert_eq!(base_flop_ratio(2), (2, 3));
    }

    #[test]
    fn all_experts_ratio() {
        let cfg = ModelConfig { n_experts: 3, top_k: 3, ..Default::default() };
        let unit = 2 * (cfg.d_model * cfg.d_ff) as u64;
        let v = block_flops(&cfg, 1, ForwardMode::Vanilla, None).moe_totals();
        let o = block_flops(&cfg, 1, ForwardMode::Optimized, None).moe_totals();
        assert_eq!((v.base / unit, o.base / unit), (9, 5));
        assert_eq!(base_flop_ratio(3), (5, 9));
    }

    #[test]
    fn analytic_matches_instrumented() {
        for (n, k) in [(2, 1), (4, 2), (8, 3)] {
            let cfg = ModelConfig {
                d_model: 16,
                d_ff: 24,
                n_experts: n,
                top_k: k,
                lora_rank: 4,
                ..Default::default()
            };
            let block = BenchBlock::<f64>::new(&cfg, 13, 1).unwrap();
            for mode in [ForwardMode::Vanilla, ForwardMode::Optimized] {
                assert_eq!(block.measured_flops(mode).unwrap(), block_flops(&cfg, 13, mode, None));
            }
        }
    }

    #[test]
    fn comparison_percentages() {
        let same = compare_report(&[entry(ForwardMode::Vanilla, 10.0), entry(ForwardMode::Vanilla, 10.0)], None).unwrap();
        for r in &same.rows {
            assert_eq!((r.latency_pct, r.base_flops_pct, r.memory_pct), (100.0, 100.0, 100.0));
        }
        let mut opt = entry(ForwardMode::Optimized, 7.0);
        opt.flops.base = 20;
        let rep = compare_report(&[entry(ForwardMode::Vanilla, 10.0), opt], None).unwrap();
        assert_eq!(rep.rows[1].latency_pct, 70.0);
        assert_eq!(rep.base_flop_ratio, Some(20.0 / 30.0));
        let json = serde_json::to_value(&rep).unwrap();
        assert!(json["rows"][1]["latency_pct"].is_number());
    }

    #[test]
    fn comparison_rejects_mismatched_configs() {
        let mut other = entry(ForwardMode::Optimized, 7.0);
        other.config_hash = "def".into();
        assert!(matches!(
            compare_report(&[entry(ForwardMode::Vanilla, 10.0), other], None),
            Err(Error::ReportMismatch(_))
        ));
        let mut other = entry(ForwardMode::Optimized, 7.0);
        other.phase = Phase::Backward;
        assert!(compare_report(&[entry(ForwardMode::Vanilla, 10.0), other], None).is_err());
    }

    #[test]
    fn median_and_report() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let r = LatencyReport::from_samples(ForwardMode::Vanilla, Phase::Forward, 4, vec![8.0, 4.0, 6.0]).unwrap();
        assert_eq!(r.us_per_token, 1.5);
        assert!(LatencyReport::from_samples(ForwardMode::Vanilla, Phase::Forward, 0, vec![1.0]).is_err());
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ModelConfig::default();
        let b = ModelConfig { top_k: 1, ..Default::default() };
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 16);
    }
}
