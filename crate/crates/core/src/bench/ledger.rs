//! FLOP accounting for matrix products.
//!
//! Every forward matmul on a [`Graph`](crate::numerics::Graph) reports its
//! `m·k·n` multiply-adds here, counted as `2·m·k·n` FLOPs. Counting is off unless a capture is running on
//! the current thread, and the key it lands under is whatever tag is active.

use std::cell::RefCell;
use std::collections::BTreeMap;

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Q,
    K,
    V,
    O,
    W1,
    W2,
    W3,
    Router,
    Scores,
    Context,
    Head,
    Other,
}

impl Projection {
    /// Projections that live inside a MixLoRA block.
    pub fn in_moe_block(self) -> bool {
        matches!(self, Projection::W1 | Projection::W2 | Projection::W3 | Projection::Router)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Base,
    Lora,
    Router,
    Activation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct FlopKey {
    pub layer: Option<usize>,
    pub projection: Projection,
    pub source: Source,
}

impl Default for FlopKey {
    fn default() -> Self {
        Self {
            layer: None,
            projection: Projection::Other,
            source: Source::Activation,
        }
    }
}

/// FLOP totals split by where the work comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopTotals {
    pub base: u64,
    pub lora: u64,
    pub router: u64,
}

/// FLOP counters keyed by (layer, projection, source).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    counts: BTreeMap<FlopKey, u64>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, key: FlopKey, flops: u64) {
        *self.counts.entry(key).or_insert(0) += flops;
    }

    pub fn get(&self, key: &FlopKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    pub fn reset(&mut self) {
        self.counts.clear();
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FlopKey, &u64)> {
        self.counts.iter()
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn total_where(&self, pred: impl Fn(&FlopKey) -> bool) -> u64 {
        self.counts.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v).sum()
    }

    /// Base / LoRA / router totals restricted to MixLoRA blocks.
    pub fn moe_totals(&self) -> FlopTotals {
        let in_block = |k: &FlopKey| k.projection.in_moe_block();
        FlopTotals {
            base: self.total_where(|k| in_block(k) && k.source == Source::Base),
            lora: self.total_where(|k| in_block(k) && k.source == Source::Lora),
            router: self.total_where(|k| in_block(k) && k.source == Source::Router),
        }
    }

    /// Keeps only entries inside MixLoRA blocks.
    pub fn moe_only(&self) -> FlopLedger {
        FlopLedger {
            counts: self
                .counts
                .iter()
                .filter(|(k, _)| k.projection.in_moe_block())
                .map(|(k, v)| (*k, *v))
                .collect(),
        }
    }
}

#[derive(Default)]
struct State {
    active: Option<FlopLedger>,
    tag: FlopKey,
}

thread_local! {
    static STATE: RefCell<State> = RefCell::new(State::default());
}

pub(crate) fn record(mult_adds: usize) {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let key = s.tag;
        if let Some(ledger) = s.active.as_mut() {
            ledger.add(key, 2 * mult_adds as u64);
        }
    });
}

/// Restores the previous tag when dropped.
pub struct TagGuard {
    prev: FlopKey,
}

impl Drop for TagGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        STATE.with(|s| s.borrow_mut().tag = prev);
    }
}

fn retag(f: impl FnOnce(&mut FlopKey)) -> TagGuard {
    STATE.with(|s| {
        let mut s = s.borrow_mut();
        let prev = s.tag;
        f(&mut s.tag);
        TagGuard { prev }
    })
}

pub fn tag_layer(layer: usize) -> TagGuard {
    retag(|k| k.layer = Some(layer))
}

pub fn tag_projection(projection: Projection, source: Source) -> TagGuard {
    retag(|k| {
        k.projection = projection;
        k.source = source;
    })
}

pub fn tag_source(source: Source) -> TagGuard {
    retag(|k| k.source = source)
}

/// Runs `f` with counting enabled on this thread and returns what it counted.
pub fn capture<R>(f: impl FnOnce() -> R) -> (R, FlopLedger) {
    let outer = STATE.with(|s| s.borrow_mut().active.replace(FlopLedger::new()));
    let out = f();
    let ledger = STATE.with(|s| {
        let mut s = s.borrow_mut();
        let inner = s.active.take().unwrap_or_default();
        s.active = outer;
        inner
    });
    (out, ledger)
}
