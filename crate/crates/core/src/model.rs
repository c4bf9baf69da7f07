//! A small decoder-only transformer whose feed-forward sublayers are MixLoRA
//! blocks. The base weights (embeddings, layer norms, attention projections,
//! shared FFNs, output head) are frozen; only LoRA adapters and routers train.
//!
//! Each layer computes `z = MSA(LN1(h)) + h` then `h' = MixLoRA(LN2(z)) + z`.

use std::sync::Arc;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::bench::ledger::{self, Projection, Source};
use crate::error::{Error, Result};
use crate::lora::{adapted_forward_on, BoundLora, FrozenLinear, LoraAdapter};
use crate::moe::{
    aux_loss_on, expert_forward_on, mixlora_forward_on, BoundExpert, BoundFfn, BoundMixLora, DispatchCount,
    ExpertLora, ForwardMode, MixLoraAdapters, RoutingStats, SharedFfn,
};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::DropoutRng;

/// Standard deviation of the frozen base weights.
pub const BASE_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnAdapterKind {
    /// Router plus `n_experts` LoRA triples over the shared FFN.
    #[default]
    MixLora,
    /// A single LoRA triple over the FFN (plain LoRA baseline).
    Lora,
}

/// Which adapters apply input dropout while training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DropoutScope {
    #[default]
    All,
    Attention,
    Experts,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub dropout_p: f64,
    pub aux_coef: f64,
    pub max_seq_len: usize,
    pub ffn_adapter: FfnAdapterKind,
    /// Rank of the single FFN LoRA triple when `ffn_adapter = lora`.
    /// Defaults to `n_experts · lora_rank`, which matches the expert budget.
    pub dense_lora_rank: Option<usize>,
    pub dispatch: DispatchCount,
    pub dropout_scope: DropoutScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            n_layers: 2,
            n_experts: 8,
            top_k: 2,
            lora_rank: 16,
            lora_alpha: 32.0,
            dropout_p: 0.05,
            aux_coef: 1e-2,
            max_seq_len: 512,
            ffn_adapter: FfnAdapterKind::MixLora,
            dense_lora_rank: None,
            dispatch: DispatchCount::Argmax,
            dropout_scope: DropoutScope::All,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("lora_rank", self.lora_rank),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model < 2 {
            return Err(Error::Config("d_model must be at least 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_adapter == FfnAdapterKind::MixLora && self.n_experts < 2 {
            return Err(Error::Config(format!("n_experts = {} must be >= 2", self.n_experts)));
        }
        if self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k = {} exceeds n_experts = {}",
                self.top_k, self.n_experts
            )));
        }
        let max_rank = self.d_model.min(self.d_ff);
        if self.lora_rank > max_rank {
            return Err(Error::Config(format!(
                "lora_rank = {} exceeds min(d_model, d_ff) = {max_rank}",
                self.lora_rank
            )));
        }
        if self.ffn_adapter == FfnAdapterKind::Lora && self.dense_rank() > max_rank {
            return Err(Error::Config(format!(
                "dense LoRA rank {} exceeds min(d_model, d_ff) = {max_rank}",
                self.dense_rank()
            )));
        }
        if !(self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p = {} must lie in [0, 1)", self.dropout_p)));
        }
        if !(self.aux_coef >= 0.0) || !self.aux_coef.is_finite() {
            return Err(Error::Config(format!("aux_coef = {} must be finite and >= 0", self.aux_coef)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn dense_rank(&self) -> usize {
        self.dense_lora_rank.unwrap_or(self.n_experts * self.lora_rank)
    }

    /// Closed-form count of trainable scalars.
    pub fn trainable_param_count(&self) -> usize {
        let (d, dff, r) = (self.d_model, self.d_ff, self.lora_rank);
        let attention = 4 * r * (d + d);
        let ffn = match self.ffn_adapter {
            FfnAdapterKind::MixLora => self.n_experts * 3 * r * (d + dff) + self.n_experts * d,
            FfnAdapterKind::Lora => 3 * self.dense_rank() * (d + dff),
        };
        self.n_layers * (attention + ffn)
    }

    /// Closed-form count of frozen scalars.
    pub fn frozen_param_count(&self) -> usize {
        let (v, d, dff) = (self.vocab_size, self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 3 * d * dff + 4 * d;
        v * d + self.max_seq_len * d + self.n_layers * per_layer + v * d
    }

    fn dropout_for(&self, attention: bool) -> f64 {
        let on = match self.dropout_scope {
            DropoutScope::All => true,
            DropoutScope::Attention => attention,
            DropoutScope::Experts => !attention,
            DropoutScope::None => false,
        };
        if on {
            self.dropout_p
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gain: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
}

impl<T: Scalar> LayerNormParams<T> {
    fn identity(d: usize) -> Self {
        Self {
            gain: Arc::new(Tensor::full(vec![d], T::one())),
            bias: Arc::new(Tensor::zeros(vec![d])),
        }
    }

    fn bind(&self, g: &mut Graph<T>) -> (Var, Var) {
        (g.constant_shared(&self.gain), g.constant_shared(&self.bias))
    }
}

/// Frozen attention projections, each `[D×D]`.
#[derive(Clone, Debug)]
pub struct FrozenAttention<T> {
    pub wq: FrozenLinear<T>,
    pub wk: FrozenLinear<T>,
    pub wv: FrozenLinear<T>,
    pub wo: FrozenLinear<T>,
}

#[derive(Clone, Debug)]
pub struct FrozenLayer<T> {
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
    pub attention: FrozenAttention<T>,
    pub ffn: SharedFfn<T>,
}

/// Pretrained-surrogate weights shared by every adapter set.
#[derive(Clone, Debug)]
pub struct FrozenBase<T> {
    pub embedding: Arc<Tensor<T>>,
    pub positions: Arc<Tensor<T>>,
    pub layers: Vec<FrozenLayer<T>>,
    pub head: FrozenLinear<T>,
}

impl<T: Scalar> FrozenBase<T> {
    /// Seeded Gaussian initialization; layer norms start as identity maps.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = DropoutRng::seed_from_u64(seed);
        let (v, d) = (cfg.vocab_size, cfg.d_model);
        let embedding = Arc::new(Tensor::randn(vec![v, d], BASE_INIT_STD, &mut rng));
        let positions = Arc::new(Tensor::randn(vec![cfg.max_seq_len, d], BASE_INIT_STD, &mut rng));
        let layers = (0..cfg.n_layers)
            .map(|_| FrozenLayer {
                ln1: LayerNormParams::identity(d),
                ln2: LayerNormParams::identity(d),
                attention: FrozenAttention {
                    wq: FrozenLinear::randn(d, d, BASE_INIT_STD, &mut rng),
                    wk: FrozenLinear::randn(d, d, BASE_INIT_STD, &mut rng),
                    wv: FrozenLinear::randn(d, d, BASE_INIT_STD, &mut rng),
                    wo: FrozenLinear::randn(d, d, BASE_INIT_STD, &mut rng),
                },
                ffn: SharedFfn::randn(d, cfg.d_ff, BASE_INIT_STD, &mut rng),
            })
            .collect();
        Ok(Self {
            embedding,
            positions,
            layers,
            head: FrozenLinear::randn(v, d, BASE_INIT_STD, &mut rng),
        })
    }

    /// Every frozen tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("base.embedding".into(), &self.embedding),
            ("base.positions".into(), &self.positions),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("base.layers.{l}");
            out.push((format!("{p}.ln1.gain"), &layer.ln1.gain));
            out.push((format!("{p}.ln1.bias"), &layer.ln1.bias));
            out.push((format!("{p}.ln2.gain"), &layer.ln2.gain));
            out.push((format!("{p}.ln2.bias"), &layer.ln2.bias));
            out.push((format!("{p}.attn.wq"), layer.attention.wq.weight()));
            out.push((format!("{p}.attn.wk"), layer.attention.wk.weight()));
            out.push((format!("{p}.attn.wv"), layer.attention.wv.weight()));
            out.push((format!("{p}.attn.wo"), layer.attention.wo.weight()));
            out.push((format!("{p}.ffn.w1"), layer.ffn.w1.weight()));
            out.push((format!("{p}.ffn.w2"), layer.ffn.w2.weight()));
            out.push((format!("{p}.ffn.w3"), layer.ffn.w3.weight()));
        }
        out.push(("base.head".into(), self.head.weight()));
        out
    }

    /// Rebuilds a base from tensors listed in [`named_tensors`](Self::named_tensors) order.
    pub fn from_named(cfg: &ModelConfig, mut take: impl FnMut(&str, &[usize]) -> Result<Tensor<T>>) -> Result<Self> {
        let (v, d, dff) = (cfg.vocab_size, cfg.d_model, cfg.d_ff);
        let embedding = Arc::new(take("base.embedding", &[v, d])?);
        let positions = Arc::new(take("base.positions", &[cfg.max_seq_len, d])?);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("base.layers.{l}");
            let mut arc = |name: &str, shape: &[usize]| take(&format!("{p}.{name}"), shape).map(Arc::new);
            let ln1 = LayerNormParams {
                gain: arc("ln1.gain", &[d])?,
                bias: arc("ln1.bias", &[d])?,
            };
            let ln2 = LayerNormParams {
                gain: arc("ln2.gain", &[d])?,
                bias: arc("ln2.bias", &[d])?,
            };
            let mut lin = |name: &str, shape: &[usize]| FrozenLinear::from_shared(arc(name, shape)?);
            let attention = FrozenAttention {
                wq: lin("attn.wq", &[d, d])?,
                wk: lin("attn.wk", &[d, d])?,
                wv: lin("attn.wv", &[d, d])?,
                wo: lin("attn.wo", &[d, d])?,
            };
            let ffn = SharedFfn {
                w1: lin("ffn.w1", &[dff, d])?,
                w2: lin("ffn.w2", &[d, dff])?,
                w3: lin("ffn.w3", &[dff, d])?,
            };
            layers.push(FrozenLayer { ln1, ln2, attention, ffn });
        }
        let head = FrozenLinear::new(take("base.head", &[v, d])?)?;
        Ok(Self { embedding, positions, layers, head })
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Byte image of every frozen tensor, for immutability checks.
    pub fn checksum_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.named_tensors() {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Constant graph leaves for the attention, FFN and head weights.
    pub fn bind(&self, g: &mut Graph<T>) -> BoundBase {
        BoundBase {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let (ln1_gain, ln1_bias) = l.ln1.bind(g);
                    let (ln2_gain, ln2_bias) = l.ln2.bind(g);
                    BoundFrozenLayer {
                        ln1: (ln1_gain, ln1_bias),
                        ln2: (ln2_gain, ln2_bias),
                        wq: l.attention.wq.bind(g),
                        wk: l.attention.wk.bind(g),
                        wv: l.attention.wv.bind(g),
                        wo: l.attention.wo.bind(g),
                        ffn: l.ffn.bind(g),
                    }
                })
                .collect(),
            head: self.head.bind(g),
        }
    }

    /// Token plus position embeddings for each sequence, stacked row-wise.
    pub fn embed(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        let d = self.embedding.cols();
        let vocab = self.embedding.rows();
        let max_len = self.positions.rows();
        let mut data = Vec::new();
        for seq in seqs {
            if seq.is_empty() {
                return Err(Error::Contract("empty sequence".into()));
            }
            if seq.len() > max_len {
                return Err(Error::SequenceTooLong { len: seq.len(), max: max_len });
            }
            for (p, &tok) in seq.iter().enumerate() {
                let tok = tok as usize;
                if tok >= vocab {
                    return Err(Error::Contract(format!("token {tok} outside vocabulary of {vocab}")));
                }
                data.extend(self.embedding.row(tok).iter().zip(self.positions.row(p)).map(|(&e, &q)| e + q));
            }
        }
        Tensor::new(vec![data.len() / d, d], data)
    }
}

pub struct BoundFrozenLayer {
    pub ln1: (Var, Var),
    pub ln2: (Var, Var),
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ffn: BoundFfn,
}

pub struct BoundBase {
    pub layers: Vec<BoundFrozenLayer>,
    pub head: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionAdapters<T> {
    pub q: LoraAdapter<T>,
    pub k: LoraAdapter<T>,
    pub v: LoraAdapter<T>,
    pub o: LoraAdapter<T>,
}

impl<T: Scalar> AttentionAdapters<T> {
    pub fn all(&self) -> [&LoraAdapter<T>; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }

    pub fn all_mut(&mut self) -> [&mut LoraAdapter<T>; 4] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum FfnAdapters<T> {
    MixLora(MixLoraAdapters<T>),
    Lora(ExpertLora<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerAdapters<T> {
    pub attention: AttentionAdapters<T>,
    pub ffn: FfnAdapters<T>,
}

/// All trainable state of one logical model: attention adapters, FFN
/// adapters and routers for every layer, plus its optimizer and dropout RNG.
#[derive(Clone, Debug)]
pub struct AdapterSet<T> {
    pub layers: Vec<LayerAdapters<T>>,
    pub aux_coef: f64,
    pub dispatch: DispatchCount,
    pub optimizer: AdamW<T>,
    pub rng: DropoutRng,
}

pub struct BoundAttention {
    pub q: BoundLora,
    pub k: BoundLora,
    pub v: BoundLora,
    pub o: BoundLora,
}

pub enum BoundFfnAdapters {
    MixLora(BoundMixLora),
    Lora(BoundExpert),
}

pub struct BoundLayer {
    pub attention: BoundAttention,
    pub ffn: BoundFfnAdapters,
}

pub struct BoundAdapterSet {
    pub layers: Vec<BoundLayer>,
    pub aux_coef: f64,
    pub dispatch: DispatchCount,
    /// Trainable leaves in [`AdapterSet::params_mut`] order.
    pub vars: Vec<Var>,
}

impl<T: Scalar> AdapterSet<T> {
    pub fn init(cfg: &ModelConfig, seed: u64, optim: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = DropoutRng::seed_from_u64(seed);
        let (d, dff, r, alpha) = (cfg.d_model, cfg.d_ff, cfg.lora_rank, cfg.lora_alpha);
        let p_attn = cfg.dropout_for(true);
        let p_ffn = cfg.dropout_for(false);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let mut lora = || LoraAdapter::new(d, d, r, alpha, p_attn, &mut rng);
            let attention = AttentionAdapters {
                q: lora()?,
                k: lora()?,
                v: lora()?,
                o: lora()?,
            };
            let ffn = match cfg.ffn_adapter {
                FfnAdapterKind::MixLora => FfnAdapters::MixLora(MixLoraAdapters::new(
                    d, dff, cfg.n_experts, cfg.top_k, r, alpha, p_ffn, &mut rng,
                )?),
                FfnAdapterKind::Lora => {
                    FfnAdapters::Lora(ExpertLora::new(d, dff, cfg.dense_rank(), alpha, p_ffn, &mut rng)?)
                }
            };
            layers.push(LayerAdapters { attention, ffn });
        }
        let mut set = Self {
            layers,
            aux_coef: cfg.aux_coef,
            dispatch: cfg.dispatch,
            optimizer: AdamW::new(optim, []),
            rng,
        };
        set.optimizer = AdamW::new(optim, set.named_params().iter().map(|(_, t)| t.numel()));
        Ok(set)
    }

    /// Trainable tensors with stable names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, a) in ["q", "k", "v", "o"].iter().zip(layer.attention.all()) {
                out.push((format!("layers.{l}.attn.{name}.a"), &a.a));
                out.push((format!("layers.{l}.attn.{name}.b"), &a.b));
            }
            match &layer.ffn {
                FfnAdapters::MixLora(m) => {
                    out.push((format!("layers.{l}.router"), &m.router.weight));
                    for (e, ex) in m.experts.iter().enumerate() {
                        push_expert(&mut out, &format!("layers.{l}.experts.{e}"), ex);
                    }
                }
                FfnAdapters::Lora(ex) => push_expert(&mut out, &format!("layers.{l}.ffn_lora"), ex),
            }
        }
        out
    }

    /// Mutable trainable tensors in the same order as [`named_params`](Self::named_params).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        layer_params_mut(&mut self.layers)
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Records every trainable tensor as a graph leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundAdapterSet {
        let mut vars = Vec::new();
        let track = |b: BoundLora, vars: &mut Vec<Var>| {
            vars.push(b.a);
            vars.push(b.b);
            b
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let at = &layer.attention;
            let attention = BoundAttention {
                q: track(at.q.bind(g, trainable), &mut vars),
                k: track(at.k.bind(g, trainable), &mut vars),
                v: track(at.v.bind(g, trainable), &mut vars),
                o: track(at.o.bind(g, trainable), &mut vars),
            };
            let ffn = match &layer.ffn {
                FfnAdapters::MixLora(m) => {
                    let bound = m.bind(g, trainable);
                    vars.push(bound.router);
                    for e in &bound.experts {
                        for b in [e.w1, e.w3, e.w2] {
                            track(b, &mut vars);
                        }
                    }
                    BoundFfnAdapters::MixLora(bound)
                }
                FfnAdapters::Lora(ex) => {
                    let e = ex.bind(g, trainable);
                    for b in [e.w1, e.w3, e.w2] {
                        track(b, &mut vars);
                    }
                    BoundFfnAdapters::Lora(e)
                }
            };
            layers.push(BoundLayer { attention, ffn });
        }
        BoundAdapterSet {
            layers,
            aux_coef: self.aux_coef,
            dispatch: self.dispatch,
            vars,
        }
    }

    /// One optimizer update from gradients in canonical order.
    pub fn apply_gradients(&mut self, grads: &[Tensor<T>]) -> Result<()> {
        self.optimizer.step(&mut layer_params_mut(&mut self.layers), grads)
    }
}

fn layer_params_mut<T: Scalar>(layers: &mut [LayerAdapters<T>]) -> Vec<&mut Tensor<T>> {
    let mut out = Vec::new();
    for layer in layers {
        for a in layer.attention.all_mut() {
            out.push(&mut a.a);
            out.push(&mut a.b);
        }
        match &mut layer.ffn {
            FfnAdapters::MixLora(m) => {
                out.push(&mut m.router.weight);
                for ex in &mut m.experts {
                    for a in ex.adapters_mut() {
                        out.push(&mut a.a);
                        out.push(&mut a.b);
                    }
                }
            }
            FfnAdapters::Lora(ex) => {
                for a in ex.adapters_mut() {
                    out.push(&mut a.a);
                    out.push(&mut a.b);
                }
            }
        }
    }
    out
}

fn push_expert<'a, T: Scalar>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: &str, ex: &'a ExpertLora<T>) {
    for (name, a) in ["w1", "w3", "w2"].iter().zip(ex.adapters()) {
        out.push((format!("{prefix}.{name}.a"), &a.a));
        out.push((format!("{prefix}.{name}.b"), &a.b));
    }
}

/// One training or evaluation example: input tokens and, per position, the
/// token that position should predict (if supervised).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

impl Sequence {
    pub fn supervised_positions(&self) -> impl Iterator<Item = (usize, u32)> + '_ {
        self.targets.iter().enumerate().filter_map(|(p, t)| t.map(|t| (p, t)))
    }
}

/// Multi-head causal self-attention over packed sequences with LoRA-adapted
/// q/k/v/o projections. `adapters = None` runs the frozen projections alone.
#[allow(clippy::too_many_arguments)]
pub fn attention_on<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    frozen: &BoundFrozenLayer,
    adapters: Option<&BoundAttention>,
    x: Var,
    seq_lens: &[usize],
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<Var> {
    let proj = |g: &mut Graph<T>, p, w, l: Option<&BoundLora>, x, dropout: &mut Option<&mut DropoutRng>| {
        let _t = ledger::tag_projection(p, Source::Base);
        adapted_forward_on(g, w, l, x, dropout.as_deref_mut())
    };
    let q = proj(g, Projection::Q, frozen.wq, adapters.map(|a| &a.q), x, dropout)?;
    let k = proj(g, Projection::K, frozen.wk, adapters.map(|a| &a.k), x, dropout)?;
    let v = proj(g, Projection::V, frozen.wv, adapters.map(|a| &a.v), x, dropout)?;

    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut per_seq = Vec::with_capacity(seq_lens.len());
    let mut offset = 0;
    for &len in seq_lens {
        let (qs, ks, vs) = if seq_lens.len() == 1 {
            (q, k, v)
        } else {
            (
                g.slice_rows(q, offset, len)?,
                g.slice_rows(k, offset, len)?,
                g.slice_rows(v, offset, len)?,
            )
        };
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (qh, kh, vh) = if cfg.n_heads == 1 {
                (qs, ks, vs)
            } else {
                (
                    g.slice_cols(qs, h * dh, dh)?,
                    g.slice_cols(ks, h * dh, dh)?,
                    g.slice_cols(vs, h * dh, dh)?,
                )
            };
            let scores = {
                let _t = ledger::tag_projection(Projection::Scores, Source::Activation);
                g.matmul_nt(qh, kh)?
            };
            let scores = g.scale(scores, scale);
            let masked = g.causal_mask(scores)?;
            let attn = g.softmax(masked);
            let ctx = {
                let _t = ledger::tag_projection(Projection::Context, Source::Activation);
                g.matmul(attn, vh)?
            };
            heads.push(ctx);
        }
        per_seq.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? });
        offset += len;
    }
    let ctx = if per_seq.len() == 1 { per_seq[0] } else { g.concat_rows(&per_seq)? };
    proj(g, Projection::O, frozen.wo, adapters.map(|a| &a.o), ctx, dropout)
}

pub struct LayerOutput {
    pub out: Var,
    /// Residual stream after attention, `z = MSA(LN1(h)) + h`.
    pub z: Var,
    /// Feed-forward sublayer output before the residual add.
    pub ffn_out: Var,
    pub probs: Option<Var>,
    pub stats: Option<RoutingStats>,
}

/// One transformer layer. With `adapters = None` this is the frozen dense layer.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward_on<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    layer_idx: usize,
    frozen: &BoundFrozenLayer,
    adapters: Option<&BoundLayer>,
    h: Var,
    seq_lens: &[usize],
    mode: ForwardMode,
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<LayerOutput> {
    let _l = ledger::tag_layer(layer_idx);
    let x = g.layer_norm(h, frozen.ln1.0, frozen.ln1.1)?;
    let attn = attention_on(g, cfg, frozen, adapters.map(|a| &a.attention), x, seq_lens, dropout)?;
    let z = g.add(attn, h)?;
    let y = g.layer_norm(z, frozen.ln2.0, frozen.ln2.1)?;
    let (ffn_out, probs, stats) = match adapters.map(|a| &a.ffn) {
        Some(BoundFfnAdapters::MixLora(block)) => {
            let o = mixlora_forward_on(g, &frozen.ffn, block, y, mode, cfg.dispatch, dropout)?;
            (o.out, Some(o.probs), Some(o.stats))
        }
        Some(BoundFfnAdapters::Lora(expert)) => (expert_forward_on(g, &frozen.ffn, Some(expert), y, dropout)?, None, None),
        None => (expert_forward_on(g, &frozen.ffn, None, y, dropout)?, None, None),
    };
    let out = g.add(ffn_out, z)?;
    if !g.value(out).is_finite() {
        return Err(Error::Numeric {
            what: "layer output".into(),
            layer: Some(layer_idx),
        });
    }
    Ok(LayerOutput { out, z, ffn_out, probs, stats })
}

/// Logits for the requested rows of the final hidden state.
pub fn head_on<T: Scalar>(g: &mut Graph<T>, base: &BoundBase, h: Var, rows: Option<&[usize]>) -> Result<Var> {
    let h = match rows {
        Some(r) => g.gather_rows(h, r)?,
        None => h,
    };
    let _t = ledger::tag_projection(Projection::Head, Source::Base);
    g.matmul_nt(h, base.head)
}

pub struct HiddenOutput {
    pub hidden: Var,
    pub probs: Vec<Var>,
    pub stats: Vec<RoutingStats>,
}

/// Embeds and runs every layer. Routing stats are returned per MixLoRA layer.
#[allow(clippy::too_many_arguments)]
pub fn hidden_on<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    base: &FrozenBase<T>,
    bound_base: &BoundBase,
    adapters: Option<&BoundAdapterSet>,
    seqs: &[&[u32]],
    mode: ForwardMode,
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<HiddenOutput> {
    let seq_lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let mut h = g.constant(base.embed(seqs)?);
    let mut probs = Vec::new();
    let mut stats = Vec::new();
    for (l, frozen) in bound_base.layers.iter().enumerate() {
        let layer = adapters.map(|a| &a.layers[l]);
        let o = layer_forward_on(g, cfg, l, frozen, layer, h, &seq_lens, mode, dropout)?;
        if let (Some(p), Some(s)) = (o.probs, o.stats) {
            probs.push(p);
            stats.push(s);
        }
        h = o.out;
    }
    Ok(HiddenOutput { hidden: h, probs, stats })
}

pub struct LossOutput {
    pub total: Var,
    pub task_loss: f64,
    pub aux_total: f64,
    pub stats: Vec<RoutingStats>,
}

/// Packed row indices and target ids of every supervised position.
pub fn supervision(batch: &[Sequence]) -> Result<(Vec<usize>, Vec<usize>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in batch {
        if s.targets.len() != s.tokens.len() {
            return Err(Error::Contract(format!(
                "{} targets for {} tokens",
                s.targets.len(),
                s.tokens.len()
            )));
        }
        for (p, t) in s.supervised_positions() {
            rows.push(offset + p);
            targets.push(t as usize);
        }
        offset += s.tokens.len();
    }
    if rows.is_empty() {
        return Err(Error::Contract("batch has no supervised positions".into()));
    }
    Ok((rows, targets))
}

/// Head, cross-entropy and aux terms on top of a finished hidden state.
pub fn finish_loss<T: Scalar>(
    g: &mut Graph<T>,
    bound_base: &BoundBase,
    hidden: HiddenOutput,
    rows: &[usize],
    targets: &[usize],
    aux_coef: f64,
) -> Result<LossOutput> {
    let logits = head_on(g, bound_base, hidden.hidden, Some(rows))?;
    let ce = g.cross_entropy(logits, targets)?;
    let task_loss = g.value(ce).data()[0].as_f64();

    let mut total = ce;
    let mut aux_total = 0.0;
    if aux_coef > 0.0 {
        for (p, s) in hidden.probs.iter().zip(&hidden.stats) {
            let aux = aux_loss_on(g, *p, s, aux_coef)?;
            aux_total += g.value(aux).data()[0].as_f64();
            total = g.add(total, aux)?;
        }
    }
    if !task_loss.is_finite() || !aux_total.is_finite() {
        return Err(Error::Numeric {
            what: "loss".into(),
            layer: None,
        });
    }
    Ok(LossOutput {
        total,
        task_loss,
        aux_total,
        stats: hidden.stats,
    })
}

/// Cross-entropy over supervised positions plus the per-layer aux losses.
#[allow(clippy::too_many_arguments)]
pub fn loss_on<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    base: &FrozenBase<T>,
    bound_base: &BoundBase,
    adapters: &BoundAdapterSet,
    batch: &[Sequence],
    mode: ForwardMode,
    dropout: &mut Option<&mut DropoutRng>,
) -> Result<LossOutput> {
    let (rows, targets) = supervision(batch)?;
    let seqs: Vec<&[u32]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let hidden = hidden_on(g, cfg, base, bound_base, Some(adapters), &seqs, mode, dropout)?;
    finish_loss(g, bound_base, hidden, &rows, &targets, adapters.aux_coef)
}

impl StepReport {
    pub fn from_loss<T: Scalar>(g: &Graph<T>, loss: LossOutput) -> Self {
        Self {
            total: g.value(loss.total).data()[0].as_f64(),
            task_loss: loss.task_loss,
            aux_loss: loss.aux_total,
            stats: loss.stats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub total: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub stats: Vec<RoutingStats>,
}

/// Forward, backward and gradient extraction for one adapter set.
pub fn compute_gradients<T: Scalar>(
    cfg: &ModelConfig,
    base: &FrozenBase<T>,
    set: &mut AdapterSet<T>,
    batch: &[Sequence],
    mode: ForwardMode,
    training: bool,
) -> Result<(StepReport, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let bound_base = base.bind(&mut g);
    let bound = set.bind(&mut g, true);
    let mut dropout = training.then_some(&mut set.rng);
    let loss = loss_on(&mut g, cfg, base, &bound_base, &bound, batch, mode, &mut dropout)?;
    let grads = g.backward(loss.total)?;
    let grads = bound.vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    Ok((
        StepReport::from_loss(&g, loss),
        grads,
    ))
}

/// Frozen base plus one adapter set.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub base: Arc<FrozenBase<T>>,
    pub adapters: AdapterSet<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig, base_seed: u64, adapter_seed: u64, optim: AdamWConfig) -> Result<Self> {
        let base = Arc::new(FrozenBase::init(&config, base_seed)?);
        let adapters = AdapterSet::init(&config, adapter_seed, optim)?;
        Ok(Self { config, base, adapters })
    }

    /// Logits `[Σ len × V]` for every position, plus routing stats per layer.
    pub fn logits(&self, seqs: &[&[u32]], mode: ForwardMode) -> Result<(Tensor<T>, Vec<RoutingStats>)> {
        self.logits_at(seqs, mode, None)
    }

    /// Logits for selected packed row indices (all rows when `None`).
    pub fn logits_at(
        &self,
        seqs: &[&[u32]],
        mode: ForwardMode,
        rows: Option<&[usize]>,
    ) -> Result<(Tensor<T>, Vec<RoutingStats>)> {
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let bound = self.adapters.bind(&mut g, false);
        let h = hidden_on(&mut g, &self.config, &self.base, &bb, Some(&bound), seqs, mode, &mut None)?;
        let logits = head_on(&mut g, &bb, h.hidden, rows)?;
        Ok((g.value(logits).clone(), h.stats))
    }

    /// Logits of the frozen dense model: no adapters, plain FFN in every layer.
    pub fn dense_logits(&self, seqs: &[&[u32]]) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let h = hidden_on(&mut g, &self.config, &self.base, &bb, None, seqs, ForwardMode::Optimized, &mut None)?;
        let logits = head_on(&mut g, &bb, h.hidden, None)?;
        Ok(g.value(logits).clone())
    }

    /// Loss values without a parameter update (dropout off).
    pub fn evaluate_loss(&self, batch: &[Sequence], mode: ForwardMode) -> Result<StepReport> {
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let bound = self.adapters.bind(&mut g, false);
        let loss = loss_on(&mut g, &self.config, &self.base, &bb, &bound, batch, mode, &mut None)?;
        Ok(StepReport::from_loss(&g, loss))
    }

    /// One optimizer step on `batch`. Only adapter and router tensors change.
    pub fn train_step(&mut self, batch: &[Sequence], mode: ForwardMode) -> Result<StepReport> {
        self.train_step_accumulated(&[batch], mode)
    }

    /// Averages gradients over micro-batches before a single update.
    pub fn train_step_accumulated(&mut self, micro: &[&[Sequence]], mode: ForwardMode) -> Result<StepReport> {
        if micro.is_empty() {
            return Err(Error::Contract("no micro-batches".into()));
        }
        let mut summed: Option<Vec<Tensor<T>>> = None;
        let mut report: Option<StepReport> = None;
        for batch in micro {
            let (r, grads) = compute_gradients(&self.config, &self.base, &mut self.adapters, batch, mode, true)?;
            match summed.as_mut() {
                None => summed = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                            *x += y;
                        }
                    }
                }
            }
            report = Some(match report {
                None => r,
                Some(mut prev) => {
                    prev.total += r.total;
                    prev.task_loss += r.task_loss;
                    prev.aux_loss += r.aux_loss;
                    for (a, b) in prev.stats.iter_mut().zip(&r.stats) {
                        a.merge(b)?;
                    }
                    prev
                }
            });
        }
        let mut grads = summed.expect("at least one micro-batch");
        let mut report = report.expect("at least one micro-batch");
        if micro.len() > 1 {
            let inv = T::from_f64(1.0 / micro.len() as f64);
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            let n = micro.len() as f64;
            report.total /= n;
            report.task_loss /= n;
            report.aux_loss /= n;
        }
        self.adapters.apply_gradients(&grads)?;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            n_layers: 2,
            n_experts: 3,
            top_k: 2,
            lora_rank: 2,
            lora_alpha: 4.0,
            dropout_p: 0.0,
            aux_coef: 0.01,
            max_seq_len: 10,
            ..Default::default()
        }
    }

    fn randomize(set: &mut AdapterSet<f64>, seed: u64) {
        let mut rng = DropoutRng::seed_from_u64(seed);
        for p in set.params_mut() {
            *p = Tensor::randn(p.shape().to_vec(), 0.3, &mut rng);
        }
    }

    #[test]
    fn default_config_census() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        // 2 · (4·16·128 + 8·3·16·192 + 8·64)
        assert_eq!(cfg.trainable_param_count(), 164_864);
        let set = AdapterSet::<f64>::init(&cfg, 0, AdamWConfig::default()).unwrap();
        assert_eq!(set.param_count(), 164_864);
        let base = FrozenBase::<f64>::init(&cfg, 0).unwrap();
        assert_eq!(base.param_count(), cfg.frozen_param_count());
    }

    #[test]
    fn config_rejects_invalid_values() {
        for bad in [
            ModelConfig { top_k: 9, ..Default::default() },
            ModelConfig { n_heads: 5, ..Default::default() },
            ModelConfig { lora_rank: 65, ..Default::default() },
            ModelConfig { n_experts: 1, top_k: 1, ..Default::default() },
            ModelConfig { dropout_p: 1.0, ..Default::default() },
            ModelConfig { aux_coef: -1.0, ..Default::default() },
            ModelConfig { vocab_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
        let lora = ModelConfig { ffn_adapter: FfnAdapterKind::Lora, ..Default::default() };
        // 8 · 16 = 128 > min(64, 128)
        assert!(lora.validate().is_err());
        assert!(ModelConfig { dense_lora_rank: Some(32), ..lora }.validate().is_ok());
    }

    #[test]
    fn names_and_params_align() {
        let mut set = AdapterSet::<f64>::init(&tiny(), 1, AdamWConfig::default()).unwrap();
        let shapes: Vec<Vec<usize>> = set.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut_shapes: Vec<Vec<usize>> = set.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, mut_shapes);
        let mut g = Graph::new();
        let bound = set.bind(&mut g, true);
        let bound_shapes: Vec<Vec<usize>> = bound.vars.iter().map(|&v| g.shape(v).to_vec()).collect();
        assert_eq!(shapes, bound_shapes);
    }

    #[test]
    fn single_token_attention_reduces_to_value_output_path() {
        let cfg = tiny();
        let model = Model::<f64>::init(cfg.clone(), 3, 4, AdamWConfig::default()).unwrap();
        let x = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut DropoutRng::seed_from_u64(9));
        let mut g = Graph::new();
        let bb = model.base.bind(&mut g);
        let bound = model.adapters.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let out = attention_on(&mut g, &cfg, &bb.layers[0], Some(&bound.layers[0].attention), xv, &[1], &mut None)
            .unwrap();
        let v = g.matmul_nt(xv, bb.layers[0].wv).unwrap();
        let o = g.matmul_nt(v, bb.layers[0].wo).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(o)) < 1e-15);
    }

    #[test]
    fn layer_residual_structure() {
        let cfg = tiny();
        let mut model = Model::<f64>::init(cfg.clone(), 3, 4, AdamWConfig::default()).unwrap();
        randomize(&mut model.adapters, 8);
        let mut g = Graph::new();
        let bb = model.base.bind(&mut g);
        let bound = model.adapters.bind(&mut g, false);
        let h = g.constant(model.base.embed(&[&[1, 2, 3, 4]]).unwrap());
        let o = layer_forward_on(&mut g, &cfg, 0, &bb.layers[0], Some(&bound.layers[0]), h, &[4], ForwardMode::Vanilla, &mut None)
            .unwrap();
        let (out, z, f) = (g.value(o.out), g.value(o.z), g.value(o.ffn_out));
        for i in 0..out.numel() {
            assert_eq!(out.data()[i], f.data()[i] + z.data()[i]);
        }
        let o2 = layer_forward_on(&mut g, &cfg, 0, &bb.layers[0], Some(&bound.layers[0]), h, &[4], ForwardMode::Optimized, &mut None)
            .unwrap();
        assert!(g.value(o.out).max_abs_diff(g.value(o2.out)) < 1e-9);
    }

    #[test]
    fn fresh_adapters_are_transparent() {
        let model = Model::<f64>::init(tiny(), 3, 4, AdamWConfig::default()).unwrap();
        let seqs: [&[u32]; 2] = [&[1, 5, 7, 2], &[3, 3, 9]];
        let (logits, _) = model.logits(&seqs, ForwardMode::Optimized).unwrap();
        let dense = model.dense_logits(&seqs).unwrap();
        assert!(logits.max_abs_diff(&dense) < 1e-12);
    }

    #[test]
    fn packed_sequences_do_not_attend_across_boundaries() {
        let mut model = Model::<f64>::init(tiny(), 3, 4, AdamWConfig::default()).unwrap();
        randomize(&mut model.adapters, 2);
        let a: &[u32] = &[1, 5, 7, 2];
        let b: &[u32] = &[3, 3, 9];
        // routing is per token, so packing must not change any row
        let (both, _) = model.logits(&[a, b], ForwardMode::Optimized).unwrap();
        let (only_a, _) = model.logits(&[a], ForwardMode::Optimized).unwrap();
        let (only_b, _) = model.logits(&[b], ForwardMode::Optimized).unwrap();
        let v = 12;
        assert!(both.data()[..4 * v].iter().zip(only_a.data()).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!(both.data()[4 * v..].iter().zip(only_b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn rejects_overlong_sequences() {
        let model = Model::<f64>::init(tiny(), 3, 4, AdamWConfig::default()).unwrap();
        let long = vec![1u32; 11];
        assert!(matches!(
            model.logits(&[&long], ForwardMode::Optimized),
            Err(Error::SequenceTooLong { len: 11, max: 10 })
        ));
    }

    fn batch() -> Vec<Sequence> {
        vec![
            Sequence {
                tokens: vec![1, 4, 5, 0, 4],
                targets: vec![None, None, None, Some(4), Some(5)],
            },
            Sequence {
                tokens: vec![2, 6, 6, 0],
                targets: vec![None, None, None, Some(6)],
            },
        ]
    }

    #[test]
    fn zero_aux_coefficient_gives_pure_task_loss() {
        let cfg = ModelConfig { aux_coef: 0.0, ..tiny() };
        let model = Model::<f64>::init(cfg, 3, 4, AdamWConfig::default()).unwrap();
        let r = model.evaluate_loss(&batch(), ForwardMode::Optimized).unwrap();
        assert_eq!(r.total, r.task_loss);
        assert_eq!(r.aux_loss, 0.0);
    }

    #[test]
    fn aux_total_respects_per_layer_floor() {
        let model = Model::<f64>::init(tiny(), 3, 4, AdamWConfig::default()).unwrap();
        let r = model.evaluate_loss(&batch(), ForwardMode::Optimized).unwrap();
        assert!(r.aux_loss >= 2.0 * 0.01 - 1e-12, "{}", r.aux_loss);
        assert!((r.total - r.task_loss - r.aux_loss).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_step_changes_nothing_and_base_stays_frozen() {
        let optim = AdamWConfig { lr: 0.0, ..Default::default() };
        let mut model = Model::<f64>::init(tiny(), 3, 4, optim).unwrap();
        let before: Vec<Tensor<f64>> = model.adapters.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        let base_before = model.base.checksum_bytes();
        model.train_step(&batch(), ForwardMode::Optimized).unwrap();
        let after: Vec<Tensor<f64>> = model.adapters.named_params().into_iter().map(|(_, t)| t.clone()).collect();
        assert_eq!(before, after);
        assert_eq!(base_before, model.base.checksum_bytes());
    }

    #[test]
    fn lora_baseline_variant_trains() {
        let cfg = ModelConfig {
            ffn_adapter: FfnAdapterKind::Lora,
            dense_lora_rank: Some(4),
            ..tiny()
        };
        assert_eq!(cfg.trainable_param_count(), 2 * (4 * 2 * 16 + 3 * 4 * 20));
        let mut model = Model::<f64>::init(cfg.clone(), 3, 4, AdamWConfig { lr: 1e-2, ..Default::default() }).unwrap();
        assert_eq!(model.adapters.param_count(), cfg.trainable_param_count());
        let r = model.train_step(&batch(), ForwardMode::Optimized).unwrap();
        assert!(r.stats.is_empty());
        assert_eq!(r.aux_loss, 0.0);
    }
}
