//! The MixLoRA block: a top-k router over `N` experts that all share one
//! frozen SwiGLU feed-forward network and differ only in their LoRA triples.
//!
//! Two forward paths produce the same output:
//!
//! * vanilla: every expert runs the full adapted FFN on its routed tokens, so
//!   the frozen `W1`/`W3` products are recomputed once per selected expert;
//! * optimized: `W1·h` and `W3·h` are computed once for all tokens and sliced
//!   per expert, which then only adds its LoRA deltas before the gate and `W2`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bench::ledger::{self, Projection, Source};
use crate::error::{Error, Result};
use crate::lora::{adapted_forward_on, BoundLora, FrozenLinear, LoraAdapter};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::DropoutRng;

pub const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    Vanilla,
    #[default]
    Optimized,
}

impl std::str::FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(ForwardMode::Vanilla),
            "optimized" => Ok(ForwardMode::Optimized),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ForwardMode::Vanilla => "vanilla",
            ForwardMode::Optimized => "optimized",
        })
    }
}

/// How tokens are counted towards the dispatch fractions `F_i`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DispatchCount {
    /// One count per token, for its highest-probability expert.
    #[default]
    Argmax,
    /// One count per selected expert; fractions are normalized by `T·K`.
    TopK,
}

/// Linear scorer `W_r ∈ R^{N×D}` followed by softmax and top-k selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Router<T> {
    pub weight: Tensor<T>,
    top_k: usize,
}

impl<T: Scalar> Router<T> {
    pub fn new<R: Rng + ?Sized>(n_experts: usize, d_model: usize, top_k: usize, rng: &mut R) -> Result<Self> {
        Self::from_weight(Tensor::randn(vec![n_experts, d_model], ROUTER_INIT_STD, rng), top_k)
    }

    pub fn from_weight(weight: Tensor<T>, top_k: usize) -> Result<Self> {
        let (n, _) = weight.as_matrix("router")?;
        if top_k == 0 || top_k > n {
            return Err(Error::Config(format!("top_k = {top_k} must lie in 1..={n}")));
        }
        Ok(Self { weight, top_k })
    }

    pub fn n_experts(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Probabilities, sparse renormalized gates and dispatch statistics for `h[T×D]`.
    pub fn route(&self, h: &Tensor<T>, dispatch: DispatchCount) -> Result<Routing<T>> {
        let mut g = Graph::new();
        let w = g.constant(self.weight.clone());
        let hv = g.constant(h.clone());
        let r = route_on(&mut g, w, self.top_k, hv, dispatch)?;
        Ok(Routing {
            gates: g.value(r.gates).clone(),
            probs: g.value(r.probs).clone(),
            selected: r.selected,
            stats: r.stats,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Routing<T> {
    pub gates: Tensor<T>,
    pub probs: Tensor<T>,
    /// Selected experts per token, `[T×K]` row-major, strongest first.
    pub selected: Vec<usize>,
    pub stats: RoutingStats,
}

/// Dispatch counts and summed router probabilities over a batch of tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub token_count: usize,
    pub dispatch_counts: Vec<usize>,
    pub prob_sums: Vec<f64>,
    /// Counts contributed per token (1 for argmax dispatch, K for top-k).
    pub per_token: usize,
}

impl RoutingStats {
    pub fn empty(n_experts: usize, per_token: usize) -> Self {
        Self {
            token_count: 0,
            dispatch_counts: vec![0; n_experts],
            prob_sums: vec![0.0; n_experts],
            per_token,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.dispatch_counts.len()
    }

    /// Dispatch fractions `F_i`.
    pub fn fractions(&self) -> Vec<f64> {
        let denom = (self.token_count * self.per_token) as f64;
        self.dispatch_counts.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Mean router probabilities `P_i`.
    pub fn mean_probs(&self) -> Vec<f64> {
        let t = self.token_count as f64;
        self.prob_sums.iter().map(|&p| p / t).collect()
    }

    pub fn merge(&mut self, other: &RoutingStats) -> Result<()> {
        if self.n_experts() != other.n_experts() || self.per_token != other.per_token {
            return Err(Error::Contract("cannot merge routing stats of different shapes".into()));
        }
        self.token_count += other.token_count;
        for (a, b) in self.dispatch_counts.iter_mut().zip(&other.dispatch_counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
        Ok(())
    }
}

/// `a·N·Σ F_i·P_i`
pub fn aux_loss(stats: &RoutingStats, n_experts: usize, coef: f64) -> Result<f64> {
    if stats.token_count == 0 {
        return Err(Error::Contract("aux loss over zero tokens".into()));
    }
    if stats.n_experts() != n_experts {
        return Err(Error::Shape {
            op: "aux_loss",
            lhs: vec![stats.n_experts()],
            rhs: vec![n_experts],
        });
    }
    let f = stats.fractions();
    let p = stats.mean_probs();
    let s: f64 = f.iter().zip(&p).map(|(a, b)| a * b).sum();
    Ok(coef * n_experts as f64 * s)
}

/// Differentiable aux loss: gradients reach the router through `P_i`; `F_i` is a constant.
pub fn aux_loss_on<T: Scalar>(g: &mut Graph<T>, probs: Var, stats: &RoutingStats, coef: f64) -> Result<Var> {
    if stats.token_count == 0 {
        return Err(Error::Contract("aux loss over zero tokens".into()));
    }
    let n = stats.n_experts() as f64;
    let weights: Vec<f64> = stats.fractions().iter().map(|f| coef * n * f).collect();
    let p = g.mean_rows(probs)?;
    g.dot_const(p, &weights)
}

pub struct RouteOutput {
    pub probs: Var,
    pub gates: Var,
    pub selected: Vec<usize>,
    pub stats: RoutingStats,
}

pub fn route_on<T: Scalar>(
    g: &mut Graph<T>,
    router: Var,
    top_k: usize,
    h: Var,
    dispatch: DispatchCount,
) -> Result<RouteOutput> {
    let logits = {
        let _t = ledger::tag_projection(Projection::Router, Source::Router);
        g.matmul_nt(h, router)?
    };
    let probs = g.softmax(logits);
    let (gates, selected) = g.top_k_gates(probs, top_k)?;

    let pv = g.value(probs);
    let (t, n) = (pv.rows(), pv.cols());
    let per_token = match dispatch {
        DispatchCount::Argmax => 1,
        DispatchCount::TopK => top_k,
    };
    let mut stats = RoutingStats::empty(n, per_token);
    stats.token_count = t;
    for (r, sel) in selected.chunks_exact(top_k).enumerate() {
        for &e in &sel[..per_token] {
            stats.dispatch_counts[e] += 1;
        }
        for (s, &p) in stats.prob_sums.iter_mut().zip(pv.row(r)) {
            *s += p.as_f64();
        }
    }
    Ok(RouteOutput { probs, gates, selected, stats })
}

/// Frozen SwiGLU feed-forward weights shared by all experts of a block.
#[derive(Clone, Debug)]
pub struct SharedFfn<T> {
    /// `[D'×D]`
    pub w1: FrozenLinear<T>,
    /// `[D×D']`
    pub w2: FrozenLinear<T>,
    /// `[D'×D]`
    pub w3: FrozenLinear<T>,
}

impl<T: Scalar> SharedFfn<T> {
    pub fn randn<R: Rng + ?Sized>(d_model: usize, d_ff: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w1: FrozenLinear::randn(d_ff, d_model, std, rng),
            w2: FrozenLinear::randn(d_model, d_ff, std, rng),
            w3: FrozenLinear::randn(d_ff, d_model, std, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.d_in()
    }

    pub fn d_ff(&self) -> usize {
        self.w1.d_out()
    }

    pub fn param_count(&self) -> usize {
        self.w1.weight().numel() + self.w2.weight().numel() + self.w3.weight().numel()
    }

    pub fn bind(&self, g: &mut Graph<T>) -> BoundFfn {
        BoundFfn {
            w1: self.w1.bind(g),
            w2: self.w2.bind(g),
            w3: self.w3.bind(g),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundFfn {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
}

/// One expert's LoRA triple over `W1`, `W3` and `W2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertLora<T> {
    pub w1: LoraAdapter<T>,
    pub w3: LoraAdapter<T>,
    pub w2: LoraAdapter<T>,
}

impl<T: Scalar> ExpertLora<T> {
    pub fn new<R: Rng + ?Sized>(
        d_model: usize,
        d_ff: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            w1: LoraAdapter::new(d_model, d_ff, rank, alpha, dropout_p, rng)?,
            w3: LoraAdapter::new(d_model, d_ff, rank, alpha, dropout_p, rng)?,
            w2: LoraAdapter::new(d_ff, d_model, rank, alpha, dropout_p, rng)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w3.param_count() + self.w2.param_count()
    }

    pub fn adapters(&self) -> [&LoraAdapter<T>; 3] {
        [&self.w1, &self.w3, &self.w2]
    }

    pub fn adapters_mut(&mut self) -> [&mut LoraAdapter<T>; 3] {
        [&mut self.w1, &mut self.w3, &mut self.w2]
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundExpert {
        BoundExpert {
            w1: self.w1.bind(g, trainable),
            w3: self.w3.bind(g, trainable),
            w2: self.w2.bind(g, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundExpert {
    pub w1: BoundLora,
    pub w3: BoundLora,
    pub w2: BoundLora,
}

/// Trainable state of one MixLoRA block: the router and the expert LoRA triples.
#[derive(Clone, Debug, PartialEq)]
pub struct MixLoraAdapters<T> {
    pub router: Router<T>,
    pub experts: Vec<ExpertLora<T>>,
}

impl<T: Scalar> MixLoraAdapters<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        d_model: usize,
        d_ff: usize,
        n_experts: usize,
        top_k: usize,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_experts < 2 {
            return Err(Error::Config(format!("n_experts = {n_experts} must be >= 2")));
        }
        let router = Router::new(n_experts, d_model, top_k, rng)?;
        let experts = (0..n_experts)
            .map(|_| ExpertLora::new(d_model, d_ff, rank, alpha, dropout_p, rng))
            .collect::<Result<_>>()?;
        Ok(Self { router, experts })
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn param_count(&self) -> usize {
        self.router.weight.numel() + self.experts.iter().map(ExpertLora::param_count).sum::<usize>()
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundMixLora {
        let router = if trainable {
            g.param(self.router.weight.clone())
        } else {
            g.constant(self.router.weight.clone())
        };
        BoundMixLora {
            router,
            experts: self.experts.iter().map(|e| e.bind(g, trainable)).collect(),
            top_k: self.router.top_k(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundMixLora {
    pub router: Var,
    pub experts: Vec<BoundExpert>,
    pub top_k: usize,
}

pub struct MoeOutput {
    pub out: Var,
    pub probs: Var,
    pub stats: RoutingStats,
}

/// `W2(SiLU(W1·x) ⊙ W3·x)` with each projection optionally adapted.
pub fn expert_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    ffn: &BoundFfn,
    expert: Option<&BoundExpert>,
    x: Var,
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<Var> {
    let h1 = {
        let _t = ledger::tag_projection(Projection::W1, Source::Base);
        adapted_forward_on(g, ffn.w1, expert.map(|e| &e.w1), x, dropout.as_deref_mut())?
    };
    let h3 = {
        let _t = ledger::tag_projection(Projection::W3, Source::Base);
        adapted_forward_on(g, ffn.w3, expert.map(|e| &e.w3), x, dropout.as_deref_mut())?
    };
    let gated = swiglu(g, h1, h3)?;
    let _t = ledger::tag_projection(Projection::W2, Source::Base);
    adapted_forward_on(g, ffn.w2, expert.map(|e| &e.w2), gated, dropout.as_deref_mut())
}

fn swiglu<T: Scalar>(g: &mut Graph<T>, h1: Var, h3: Var) -> Result<Var> {
    let act = g.silu(h1);
    g.mul(act, h3)
}

/// Token indices routed to each expert, ascending.
fn tokens_per_expert(selected: &[usize], top_k: usize, n_experts: usize) -> Vec<Vec<usize>> {
    let mut idx = vec![Vec::new(); n_experts];
    for (t, sel) in selected.chunks_exact(top_k).enumerate() {
        for &e in sel {
            idx[e].push(t);
        }
    }
    idx
}

/// Runs a MixLoRA block over `h[T×D]` and returns the gate-weighted expert mixture.
pub fn mixlora_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    ffn: &BoundFfn,
    block: &BoundMixLora,
    h: Var,
    mode: ForwardMode,
    dispatch: DispatchCount,
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<MoeOutput> {
    let (t, d) = (g.value(h).rows(), g.value(h).cols());
    let n = block.experts.len();
    let route = route_on(g, block.router, block.top_k, h, dispatch)?;
    let routed = tokens_per_expert(&route.selected, block.top_k, n);

    let mut out = g.constant(Tensor::zeros(vec![t, d]));
    match mode {
        ForwardMode::Vanilla => {
            for (k, idx) in routed.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let x = g.gather_rows(h, idx)?;
                let e = expert_forward_on(g, ffn, Some(&block.experts[k]), x, dropout)?;
                out = accumulate(g, out, e, route.gates, idx, k)?;
            }
        }
        ForwardMode::Optimized => {
            let (base1, base3) = {
                let _t = ledger::tag_source(Source::Base);
                let b1 = {
                    let _p = ledger::tag_projection(Projection::W1, Source::Base);
                    g.matmul_nt(h, ffn.w1)?
                };
                let b3 = {
                    let _p = ledger::tag_projection(Projection::W3, Source::Base);
                    g.matmul_nt(h, ffn.w3)?
                };
                (b1, b3)
            };
            for (k, idx) in routed.iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                let expert = &block.experts[k];
                let x = g.gather_rows(h, idx)?;
                let h1 = {
                    let _p = ledger::tag_projection(Projection::W1, Source::Lora);
                    let base = g.gather_rows(base1, idx)?;
                    let delta = expert.w1.delta(g, x, dropout.as_deref_mut())?;
                    g.add(base, delta)?
                };
                let h3 = {
                    let _p = ledger::tag_projection(Projection::W3, Source::Lora);
                    let base = g.gather_rows(base3, idx)?;
                    let delta = expert.w3.delta(g, x, dropout.as_deref_mut())?;
                    g.add(base, delta)?
                };
                let gated = swiglu(g, h1, h3)?;
                let e = {
                    let _p = ledger::tag_projection(Projection::W2, Source::Base);
                    adapted_forward_on(g, ffn.w2, Some(&expert.w2), gated, dropout.as_deref_mut())?
                };
                out = accumulate(g, out, e, route.gates, idx, k)?;
            }
        }
    }
    Ok(MoeOutput {
        out,
        probs: route.probs,
        stats: route.stats,
    })
}

fn accumulate<T: Scalar>(
    g: &mut Graph<T>,
    acc: Var,
    expert_out: Var,
    gates: Var,
    idx: &[usize],
    k: usize,
) -> Result<Var> {
    let gate = g.gather_col(gates, idx, k)?;
    let weighted = g.mul_col(expert_out, gate)?;
    g.index_add_rows(acc, weighted, idx)
}

/// Self-contained block: shared frozen FFN plus its router and experts.
#[derive(Clone, Debug)]
pub struct MixLoraBlock<T> {
    pub ffn: SharedFfn<T>,
    pub adapters: MixLoraAdapters<T>,
    pub aux_coef: f64,
    pub dispatch: DispatchCount,
}

impl<T: Scalar> MixLoraBlock<T> {
    pub fn new(ffn: SharedFfn<T>, adapters: MixLoraAdapters<T>, aux_coef: f64) -> Result<Self> {
        if adapters.router.weight.shape()[1] != ffn.d_model() {
            return Err(Error::Shape {
                op: "mixlora_block",
                lhs: adapters.router.weight.shape().to_vec(),
                rhs: vec![ffn.d_model()],
            });
        }
        if !(aux_coef >= 0.0) {
            return Err(Error::Config(format!("aux_coef must be >= 0, got {aux_coef}")));
        }
        Ok(Self {
            ffn,
            adapters,
            aux_coef,
            dispatch: DispatchCount::Argmax,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.adapters.n_experts()
    }

    pub fn top_k(&self) -> usize {
        self.adapters.router.top_k()
    }

    pub fn forward(
        &self,
        h: &Tensor<T>,
        mode: ForwardMode,
        mut dropout: Option<&mut DropoutRng>,
    ) -> Result<(Tensor<T>, RoutingStats)> {
        if h.cols() != self.ffn.d_model() {
            return Err(Error::Shape {
                op: "mixlora_forward",
                lhs: h.shape().to_vec(),
                rhs: vec![self.ffn.d_model()],
            });
        }
        let mut g = Graph::new();
        let ffn = self.ffn.bind(&mut g);
        let block = self.adapters.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let out = mixlora_forward_on(&mut g, &ffn, &block, hv, mode, self.dispatch, &mut dropout)?;
        Ok((g.value(out.out).clone(), out.stats))
    }
}

pub fn mixlora_forward_vanilla<T: Scalar>(
    block: &MixLoraBlock<T>,
    h: &Tensor<T>,
    dropout: Option<&mut DropoutRng>,
) -> Result<(Tensor<T>, RoutingStats)> {
    block.forward(h, ForwardMode::Vanilla, dropout)
}

pub fn mixlora_forward_optimized<T: Scalar>(
    block: &MixLoraBlock<T>,
    h: &Tensor<T>,
    dropout: Option<&mut DropoutRng>,
) -> Result<(Tensor<T>, RoutingStats)> {
    block.forward(h, ForwardMode::Optimized, dropout)
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Expert load of one task: dispatch fractions, mean probabilities and the
/// spread of the fractions across experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertLoad {
    pub task: String,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub std: f64,
}

pub fn expert_load_report(stats_per_task: &[(String, RoutingStats)]) -> Result<Vec<ExpertLoad>> {
    if stats_per_task.is_empty() {
        return Err(Error::Contract("expert load report needs at least one task".into()));
    }
    stats_per_task
        .iter()
        .map(|(task, s)| {
            if s.token_count == 0 {
                return Err(Error::Contract(format!("task {task} has no routed tokens")));
            }
            let f = s.fractions();
            Ok(ExpertLoad {
                task: task.clone(),
                std: population_std(&f),
                p: s.mean_probs(),
                f,
            })
        })
        .collect()
}

/// One line of the routing export.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub task: String,
    pub layer: usize,
    pub expert_id: usize,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "P")]
    pub p: f64,
    pub std: f64,
}

impl ExpertLoad {
    pub fn records(&self, layer: usize) -> Vec<RoutingRecord> {
        self.f
            .iter()
            .zip(&self.p)
            .enumerate()
            .map(|(expert_id, (&f, &p))| RoutingRecord {
                task: self.task.clone(),
                layer,
                expert_id,
                f,
                p,
                std: self.std,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> DropoutRng {
        DropoutRng::seed_from_u64(42)
    }

    fn random_block(d: usize, d_ff: usize, n: usize, k: usize, r: usize, rng: &mut DropoutRng) -> MixLoraBlock<f64> {
        let ffn = SharedFfn::randn(d, d_ff, 0.3, rng);
        let mut adapters = MixLoraAdapters::new(d, d_ff, n, k, r, 2.0 * r as f64, 0.0, rng).unwrap();
        adapters.router.weight = Tensor::randn(vec![n, d], 1.0, rng);
        for e in &mut adapters.experts {
            for a in e.adapters_mut() {
                a.a = Tensor::randn(a.a.shape().to_vec(), 0.3, rng);
                a.b = Tensor::randn(a.b.shape().to_vec(), 0.3, rng);
            }
        }
        MixLoraBlock::new(ffn, adapters, 0.01).unwrap()
    }

    /// Per-token scalar loops, written without the graph.
    fn naive_forward(block: &MixLoraBlock<f64>, h: &Tensor<f64>) -> Vec<f64> {
        fn matvec(w: &Tensor<f64>, x: &[f64]) -> Vec<f64> {
            (0..w.rows()).map(|i| w.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
        }
        fn adapted(w: &Tensor<f64>, l: &LoraAdapter<f64>, x: &[f64]) -> Vec<f64> {
            let base = matvec(w, x);
            let down = matvec(&l.a, x);
            let up = matvec(&l.b, &down);
            base.iter().zip(&up).map(|(b, u)| b + l.scale() * u).collect()
        }
        let n = block.n_experts();
        let k = block.top_k();
        let d = h.cols();
        let mut out = vec![0.0; h.rows() * d];
        for t in 0..h.rows() {
            let x = h.row(t);
            let logits = matvec(&block.adapters.router.weight, x);
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let s: f64 = ex.iter().sum();
            let probs: Vec<f64> = ex.iter().map(|e| e / s).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            let chosen = &order[..k];
            let total: f64 = chosen.iter().map(|&e| probs[e]).sum();
            for &e in chosen {
                let ex = &block.adapters.experts[e];
                let h1 = adapted(block.ffn.w1.weight(), &ex.w1, x);
                let h3 = adapted(block.ffn.w3.weight(), &ex.w3, x);
                let a: Vec<f64> = h1
                    .iter()
                    .zip(&h3)
                    .map(|(u, v)| u / (1.0 + (-u).exp()) * v)
                    .collect();
                let y = adapted(block.ffn.w2.weight(), &ex.w2, &a);
                for j in 0..d {
                    out[t * d + j] += probs[e] / total * y[j];
                }
            }
        }
        out
    }

    #[test]
    fn symmetric_logits_pick_lowest_indices() {
        let router = Router::<f64>::from_weight(Tensor::zeros(vec![4, 3]), 2).unwrap();
        let h = Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.0]]);
        let r = router.route(&h, DispatchCount::Argmax).unwrap();
        for t in 0..2 {
            assert_eq!(r.gates.row(t), &[0.5, 0.5, 0.0, 0.0]);
        }
        assert_eq!(r.stats.dispatch_counts, vec![2, 0, 0, 0]);
    }

    #[test]
    fn gates_renormalize_selected_probabilities() {
        // logits = ln p reproduce the probability row exactly up to rounding
        let p = [0.5f64, 0.3, 0.1, 0.1];
        let w = Tensor::<f64>::from_f64(vec![4, 1], &p.map(f64::ln)).unwrap();
        let router = Router::from_weight(w, 2).unwrap();
        let r = router.route(&Tensor::from_rows(&[&[1.0]]), DispatchCount::Argmax).unwrap();
        let gates = r.gates.row(0);
        assert!((gates[0] - 0.625).abs() < 1e-12);
        assert!((gates[1] - 0.375).abs() < 1e-12);
        assert_eq!(&gates[2..], &[0.0, 0.0]);
    }

    #[test]
    fn random_routing_preserves_simplex_invariants() {
        let mut r = rng();
        let router = Router::<f64>::from_weight(Tensor::randn(vec![8, 16], 1.0, &mut r), 2).unwrap();
        let h = Tensor::randn(vec![1000, 16], 1.0, &mut r);
        let out = router.route(&h, DispatchCount::Argmax).unwrap();
        assert_eq!(out.stats.dispatch_counts.iter().sum::<usize>(), 1000);
        assert!((out.stats.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((out.stats.mean_probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for t in 0..1000 {
            let row = out.gates.row(t);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 2);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let topk = router.route(&h, DispatchCount::TopK).unwrap();
        assert_eq!(topk.stats.dispatch_counts.iter().sum::<usize>(), 2000);
        assert!((topk.stats.fractions().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn router_rejects_bad_top_k_and_width() {
        assert!(Router::<f64>::from_weight(Tensor::zeros(vec![4, 3]), 5).is_err());
        assert!(Router::<f64>::from_weight(Tensor::zeros(vec![4, 3]), 0).is_err());
        let router = Router::<f64>::from_weight(Tensor::zeros(vec![4, 3]), 2).unwrap();
        assert!(router.route(&Tensor::zeros(vec![2, 5]), DispatchCount::Argmax).is_err());
    }

    #[test]
    fn aux_loss_closed_forms() {
        let uniform = RoutingStats {
            token_count: 8,
            dispatch_counts: vec![1; 8],
            prob_sums: vec![1.0; 8],
            per_token: 1,
        };
        assert!((aux_loss(&uniform, 8, 0.01).unwrap() - 0.01).abs() < 1e-15);
        let mut one_hot = RoutingStats::empty(8, 1);
        one_hot.token_count = 5;
        one_hot.dispatch_counts[0] = 5;
        one_hot.prob_sums[0] = 5.0;
        assert!((aux_loss(&one_hot, 8, 0.01).unwrap() - 0.08).abs() < 1e-15);
        assert!(aux_loss(&RoutingStats::empty(8, 1), 8, 0.01).is_err());
    }

    #[test]
    fn aux_loss_matches_recomputation_from_token_probabilities() {
        let mut r = rng();
        let router = Router::<f64>::from_weight(Tensor::randn(vec![6, 5], 1.0, &mut r), 2).unwrap();
        let h = Tensor::randn(vec![50, 5], 1.0, &mut r);
        let out = router.route(&h, DispatchCount::Argmax).unwrap();
        let mut f = vec![0.0; 6];
        let mut p = vec![0.0; 6];
        for t in 0..50 {
            let row = out.probs.row(t);
            let mut best = 0;
            for j in 1..6 {
                if row[j] > row[best] {
                    best = j;
                }
            }
            f[best] += 1.0 / 50.0;
            for j in 0..6 {
                p[j] += row[j] / 50.0;
            }
        }
        let expected = 0.01 * 6.0 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
        assert!((aux_loss(&out.stats, 6, 0.01).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_adapters_reduce_to_frozen_ffn() {
        let mut r = rng();
        let ffn = SharedFfn::<f64>::randn(6, 10, 0.5, &mut r);
        let mut adapters = MixLoraAdapters::new(6, 10, 4, 2, 2, 4.0, 0.0, &mut r).unwrap();
        adapters.router.weight = Tensor::randn(vec![4, 6], 1.0, &mut r);
        let block = MixLoraBlock::new(ffn, adapters, 0.01).unwrap();
        let h = Tensor::randn(vec![9, 6], 1.0, &mut r);

        let mut g = Graph::new();
        let f = block.ffn.bind(&mut g);
        let x = g.constant(h.clone());
        let y = expert_forward_on(&mut g, &f, None, x, &mut None).unwrap();
        let dense = g.value(y).clone();
        for mode in [ForwardMode::Vanilla, ForwardMode::Optimized] {
            let (out, _) = block.forward(&h, mode, None).unwrap();
            assert!(out.max_abs_diff(&dense) < 1e-12, "{mode}");
        }
    }

    #[test]
    fn two_experts_with_symmetric_logits_average() {
        let mut r = rng();
        let mut block = random_block(5, 7, 2, 2, 2, &mut r);
        block.adapters.router.weight = Tensor::zeros(vec![2, 5]);
        let h = Tensor::randn(vec![3, 5], 1.0, &mut r);
        let (out, _) = block.forward(&h, ForwardMode::Vanilla, None).unwrap();

        let mut g = Graph::new();
        let f = block.ffn.bind(&mut g);
        let x = g.constant(h.clone());
        let e0 = block.adapters.experts[0].bind(&mut g, false);
        let e1 = block.adapters.experts[1].bind(&mut g, false);
        let y0 = expert_forward_on(&mut g, &f, Some(&e0), x, &mut None).unwrap();
        let y1 = expert_forward_on(&mut g, &f, Some(&e1), x, &mut None).unwrap();
        let s = g.add(y0, y1).unwrap();
        let avg = g.scale(s, 0.5);
        assert!(out.max_abs_diff(g.value(avg)) < 1e-12);
    }

    #[test]
    fn both_paths_match_naive_loop() {
        let mut r = rng();
        for (n, k) in [(2, 1), (4, 2), (8, 2), (5, 3)] {
            let block = random_block(6, 12, n, k, 3, &mut r);
            let h = Tensor::randn(vec![17, 6], 1.0, &mut r);
            let naive = Tensor::new(vec![17, 6], naive_forward(&block, &h)).unwrap();
            let (v, sv) = mixlora_forward_vanilla(&block, &h, None).unwrap();
            let (o, so) = mixlora_forward_optimized(&block, &h, None).unwrap();
            assert!(v.max_abs_diff(&naive) < 1e-10);
            assert!(o.max_abs_diff(&v) < 1e-9);
            assert_eq!(sv, so);
        }
    }

    #[test]
    fn block_rejects_wrong_width() {
        let mut r = rng();
        let block = random_block(6, 12, 4, 2, 2, &mut r);
        assert!(block.forward(&Tensor::zeros(vec![3, 5]), ForwardMode::Optimized, None).is_err());
    }

    #[test]
    fn expert_load_std_cases() {
        let uniform = RoutingStats {
            token_count: 8,
            dispatch_counts: vec![1; 8],
            prob_sums: vec![1.0; 8],
            per_token: 1,
        };
        let mut one_hot = RoutingStats::empty(8, 1);
        one_hot.token_count = 3;
        one_hot.dispatch_counts[0] = 3;
        one_hot.prob_sums[0] = 3.0;
        let report = expert_load_report(&[("u".into(), uniform), ("h".into(), one_hot)]).unwrap();
        assert_eq!(report[0].std, 0.0);
        // population std of (1,0,…,0) over 8 entries: √7/8
        assert!((report[1].std - 7f64.sqrt() / 8.0).abs() < 1e-15);
        assert!((report[1].std - 0.3307).abs() < 1e-4);
        assert!(expert_load_report(&[]).is_err());
        let recs = report[1].records(0);
        assert_eq!(recs.len(), 8);
        let json = serde_json::to_value(&recs[0]).unwrap();
        for key in ["task", "expert_id", "F", "P", "std"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
