//! Several adapter sets over one shared frozen base, with multi-task batches
//! evaluated layer by layer and task by task inside a single graph.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{
    finish_loss, head_on, layer_forward_on, supervision, AdapterSet, BoundAdapterSet, FrozenBase, Model,
    ModelConfig, Sequence, StepReport,
};
use crate::moe::{ForwardMode, RoutingStats};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::DropoutRng;

/// The sequences of one task, routed to one adapter set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSlice {
    pub set_id: usize,
    pub sequences: Vec<Sequence>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MultiTaskBatch {
    pub slices: Vec<TaskSlice>,
}

impl MultiTaskBatch {
    pub fn new(slices: Vec<TaskSlice>) -> Self {
        Self { slices }
    }
}

#[derive(Clone, Debug)]
pub struct TaskOutput<T> {
    pub set_id: usize,
    /// Logits for every packed position of the slice.
    pub logits: Tensor<T>,
    pub stats: Vec<RoutingStats>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryCensus {
    pub base_bytes: usize,
    pub per_set_bytes: Vec<usize>,
    pub total: usize,
}

impl MemoryCensus {
    /// `total(M) / (M · standalone)` where a standalone model holds the base
    /// plus one set. `None` with no sets registered.
    pub fn sharing_ratio(&self) -> Option<f64> {
        let m = self.per_set_bytes.len();
        if m == 0 {
            return None;
        }
        let standalone: usize = self.per_set_bytes.iter().map(|s| self.base_bytes + s).sum();
        Some(self.total as f64 / standalone as f64)
    }
}

pub struct Engine<T> {
    config: ModelConfig,
    base: Arc<FrozenBase<T>>,
    sets: Vec<AdapterSet<T>>,
}

impl<T: Scalar> Engine<T> {
    pub fn new(config: ModelConfig, base: Arc<FrozenBase<T>>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            base,
            sets: Vec::new(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn base(&self) -> &Arc<FrozenBase<T>> {
        &self.base
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Registers an adapter set and returns its id.
    pub fn add_set(&mut self, set: AdapterSet<T>) -> usize {
        self.sets.push(set);
        self.sets.len() - 1
    }

    /// Takes over a model's adapters. The model must hold this engine's base
    /// by identity, not merely an equal copy.
    pub fn register(&mut self, model: Model<T>) -> Result<usize> {
        if !Arc::ptr_eq(&model.base, &self.base) {
            return Err(Error::ForeignBase);
        }
        if model.config != self.config {
            return Err(Error::Config("model config differs from engine config".into()));
        }
        Ok(self.add_set(model.adapters))
    }

    pub fn set(&self, id: usize) -> Result<&AdapterSet<T>> {
        self.sets.get(id).ok_or(Error::UnknownAdapterSet(id))
    }

    pub fn set_mut(&mut self, id: usize) -> Result<&mut AdapterSet<T>> {
        self.sets.get_mut(id).ok_or(Error::UnknownAdapterSet(id))
    }

    /// A standalone model view of one set, sharing the base.
    pub fn model(&self, id: usize) -> Result<Model<T>> {
        Ok(Model {
            config: self.config.clone(),
            base: Arc::clone(&self.base),
            adapters: self.set(id)?.clone(),
        })
    }

    fn check_ids(&self, batch: &MultiTaskBatch) -> Result<()> {
        if batch.slices.is_empty() {
            return Err(Error::Contract("multi-task batch has no slices".into()));
        }
        for s in &batch.slices {
            self.set(s.set_id)?;
        }
        Ok(())
    }

    /// Runs every slice through its own adapter set. Layers form the outer
    /// loop and tasks the inner loop; each slice only ever sees its own set.
    pub fn multi_forward(&self, batch: &MultiTaskBatch, mode: ForwardMode) -> Result<Vec<TaskOutput<T>>> {
        self.check_ids(batch)?;
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let bound: Vec<BoundAdapterSet> = self.sets.iter().map(|s| s.bind(&mut g, false)).collect();
        let (hidden, stats) = Self::hidden(&self.config, &self.base, &mut g, &bb, &bound, batch, mode, &mut nones(batch.slices.len()))?;
        let mut out = Vec::with_capacity(batch.slices.len());
        for ((slice, h), stats) in batch.slices.iter().zip(hidden).zip(stats) {
            let logits = head_on(&mut g, &bb, h, None)?;
            out.push(TaskOutput {
                set_id: slice.set_id,
                logits: g.value(logits).clone(),
                stats: stats.into_iter().map(|(_, s)| s).collect(),
            });
        }
        Ok(out)
    }

    #[allow(clippy::type_complexity, clippy::too_many_arguments)]
    fn hidden(
        cfg: &ModelConfig,
        base: &FrozenBase<T>,
        g: &mut Graph<T>,
        bb: &crate::model::BoundBase,
        bound: &[BoundAdapterSet],
        batch: &MultiTaskBatch,
        mode: ForwardMode,
        dropout: &mut [Option<&mut DropoutRng>],
    ) -> Result<(Vec<Var>, Vec<Vec<(Var, RoutingStats)>>)> {
        let lens: Vec<Vec<usize>> = batch
            .slices
            .iter()
            .map(|s| s.sequences.iter().map(|q| q.tokens.len()).collect())
            .collect();
        let mut h = Vec::with_capacity(batch.slices.len());
        for slice in &batch.slices {
            if slice.sequences.is_empty() {
                return Err(Error::Contract(format!("empty slice for adapter set {}", slice.set_id)));
            }
            let seqs: Vec<&[u32]> = slice.sequences.iter().map(|s| s.tokens.as_slice()).collect();
            h.push(g.constant(base.embed(&seqs)?));
        }
        let mut stats: Vec<Vec<(Var, RoutingStats)>> = vec![Vec::new(); batch.slices.len()];
        for (l, frozen) in bb.layers.iter().enumerate() {
            for (t, slice) in batch.slices.iter().enumerate() {
                let layer = &bound[slice.set_id].layers[l];
                let o = layer_forward_on(g, cfg, l, frozen, Some(layer), h[t], &lens[t], mode, &mut dropout[t])?;
                if let (Some(p), Some(s)) = (o.probs, o.stats) {
                    stats[t].push((p, s));
                }
                h[t] = o.out;
            }
        }
        Ok((h, stats))
    }

    /// Per-task losses and, for every task, the gradient of that task's loss
    /// alone with respect to every registered set (outer index: task, inner: set).
    pub fn per_task_gradients(
        &self,
        batch: &MultiTaskBatch,
        mode: ForwardMode,
    ) -> Result<(Vec<StepReport>, Vec<Vec<Vec<Tensor<T>>>>)> {
        self.check_ids(batch)?;
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let bound: Vec<BoundAdapterSet> = self.sets.iter().map(|s| s.bind(&mut g, true)).collect();
        let losses = Self::losses(&self.config, &self.base, &mut g, &bb, &bound, batch, mode, &mut nones(batch.slices.len()))?;
        let mut grads = Vec::with_capacity(losses.len());
        for (total, _) in &losses {
            let gr = g.backward(*total)?;
            grads.push(
                bound
                    .iter()
                    .map(|b| b.vars.iter().map(|&v| gr.wrt(&g, v)).collect())
                    .collect(),
            );
        }
        Ok((losses.into_iter().map(|(_, r)| r).collect(), grads))
    }

    #[allow(clippy::too_many_arguments)]
    fn losses(
        cfg: &ModelConfig,
        base: &FrozenBase<T>,
        g: &mut Graph<T>,
        bb: &crate::model::BoundBase,
        bound: &[BoundAdapterSet],
        batch: &MultiTaskBatch,
        mode: ForwardMode,
        dropout: &mut [Option<&mut DropoutRng>],
    ) -> Result<Vec<(Var, StepReport)>> {
        let sup: Vec<(Vec<usize>, Vec<usize>)> =
            batch.slices.iter().map(|s| supervision(&s.sequences)).collect::<Result<_>>()?;
        let (hidden, stats) = Self::hidden(cfg, base, g, bb, bound, batch, mode, dropout)?;
        let mut out = Vec::with_capacity(hidden.len());
        for (t, (h, st)) in hidden.into_iter().zip(stats).enumerate() {
            let (probs, stats): (Vec<Var>, Vec<RoutingStats>) = st.into_iter().unzip();
            let hidden = crate::model::HiddenOutput { hidden: h, probs, stats };
            let id = batch.slices[t].set_id;
            let loss = finish_loss(g, bb, hidden, &sup[t].0, &sup[t].1, bound[id].aux_coef)?;
            let total = loss.total;
            out.push((total, StepReport::from_loss(g, loss)));
        }
        Ok(out)
    }

    /// Gradients of the summed per-task loss for the set of every slice,
    /// in slice order. Each set may own at most one slice.
    pub fn multi_gradients(
        &mut self,
        batch: &MultiTaskBatch,
        mode: ForwardMode,
        training: bool,
    ) -> Result<(Vec<StepReport>, Vec<Vec<Tensor<T>>>)> {
        self.check_ids(batch)?;
        let mut seen = vec![false; self.sets.len()];
        for s in &batch.slices {
            if std::mem::replace(&mut seen[s.set_id], true) {
                return Err(Error::Contract(format!("adapter set {} owns two slices", s.set_id)));
            }
        }
        let mut g = Graph::new();
        let bb = self.base.bind(&mut g);
        let bound: Vec<BoundAdapterSet> = self.sets.iter().map(|s| s.bind(&mut g, true)).collect();

        // hand each slice the dropout stream of its own set
        let Self { config, base, sets } = self;
        let mut rngs: Vec<Option<&mut DropoutRng>> =
            sets.iter_mut().map(|s| training.then_some(&mut s.rng)).collect();
        let mut dropout: Vec<Option<&mut DropoutRng>> =
            batch.slices.iter().map(|s| rngs[s.set_id].take()).collect();
        let losses = Self::losses(config, base, &mut g, &bb, &bound, batch, mode, &mut dropout)?;
        drop(dropout);

        let mut total = losses[0].0;
        for (l, _) in &losses[1..] {
            total = g.add(total, *l)?;
        }
        let grads = g.backward(total)?;
        let per_slice = batch
            .slices
            .iter()
            .map(|s| bound[s.set_id].vars.iter().map(|&v| grads.wrt(&g, v)).collect())
            .collect();
        Ok((losses.into_iter().map(|(_, r)| r).collect(), per_slice))
    }

    /// One packed training step: the summed loss is differentiated once and
    /// every set is updated by its own optimizer.
    pub fn multi_train_step(&mut self, batch: &MultiTaskBatch, mode: ForwardMode) -> Result<Vec<StepReport>> {
        self.multi_train_step_accumulated(std::slice::from_ref(batch), mode)
    }

    /// Averages each set's gradients over several packed micro-batches
    /// before updating. Every micro-batch must list the same sets in the same order.
    pub fn multi_train_step_accumulated(
        &mut self,
        micro: &[MultiTaskBatch],
        mode: ForwardMode,
    ) -> Result<Vec<StepReport>> {
        let first = micro.first().ok_or_else(|| Error::Contract("no micro-batches".into()))?;
        let ids: Vec<usize> = first.slices.iter().map(|s| s.set_id).collect();
        let mut reports: Vec<StepReport> = Vec::new();
        let mut summed: Vec<Vec<Tensor<T>>> = Vec::new();
        for (m, batch) in micro.iter().enumerate() {
            if batch.slices.iter().map(|s| s.set_id).ne(ids.iter().copied()) {
                return Err(Error::Contract("micro-batches route to different sets".into()));
            }
            let (r, grads) = self.multi_gradients(batch, mode, true)?;
            if m == 0 {
                reports = r;
                summed = grads;
                continue;
            }
            for (acc, g) in summed.iter_mut().zip(&grads) {
                for (a, b) in acc.iter_mut().zip(g) {
                    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
            }
            for (acc, r) in reports.iter_mut().zip(r) {
                acc.total += r.total;
                acc.task_loss += r.task_loss;
                acc.aux_loss += r.aux_loss;
                for (a, b) in acc.stats.iter_mut().zip(&r.stats) {
                    a.merge(b)?;
                }
            }
        }
        if micro.len() > 1 {
            let n = micro.len() as f64;
            let inv = T::from_f64(1.0 / n);
            for g in summed.iter_mut().flatten() {
                g.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            for r in &mut reports {
                r.total /= n;
                r.task_loss /= n;
                r.aux_loss /= n;
            }
        }
        for (&id, grads) in ids.iter().zip(&summed) {
            self.sets[id].apply_gradients(grads)?;
        }
        Ok(reports)
    }

    /// Moves the registered sets out of the engine.
    pub fn into_sets(self) -> Vec<AdapterSet<T>> {
        self.sets
    }

    /// Byte accounting: one frozen base plus, per set, its trainable tensors
    /// and two Adam moment buffers of the same size.
    pub fn memory_census(&self) -> MemoryCensus {
        let elem = T::DTYPE.size();
        let base_bytes = self.base.param_count() * elem;
        let per_set_bytes: Vec<usize> = self.sets.iter().map(|s| 3 * s.param_count() * elem).collect();
        let total = base_bytes + per_set_bytes.iter().sum::<usize>();
        MemoryCensus {
            base_bytes,
            per_set_bytes,
            total,
        }
    }
}

fn nones<'a>(n: usize) -> Vec<Option<&'a mut DropoutRng>> {
    (0..n).map(|_| None).collect()
}
