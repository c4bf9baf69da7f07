//! Synthetic sequence tasks standing in for a real multi-task mixture.
//!
//! Token layout: `0` separator, `1..=4` task markers, `5`/`6` parity classes,
//! `8..16` content symbols. A sequence task reads
//! `[task, x1..xn, SEP, y1..y(n-1)]` and is supervised on `y1..yn`; parity
//! reads `[task, b1..bm, SEP]` and is supervised on the class token.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Sequence;
use crate::DropoutRng;

pub const SEP: u32 = 0;
pub const CLASS_EVEN: u32 = 5;
pub const CLASS_ODD: u32 = 6;
pub const SYMBOL_BASE: u32 = 8;
pub const ALPHABET: u32 = 8;
/// Smallest vocabulary that holds every task token.
pub const TASK_VOCAB: usize = (SYMBOL_BASE + ALPHABET) as usize;
pub const CONTENT_LEN: usize = 8;
pub const SHIFT_K: u32 = 3;
pub const PARITY_BITS: usize = 12;
/// One item in this many lands in the test split.
const TEST_EVERY: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Copy,
    Reverse,
    #[serde(alias = "shift-by-k")]
    Shift,
    Parity,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Shift, TaskKind::Parity];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Shift => "shift",
            TaskKind::Parity => "parity",
        }
    }

    pub fn marker(self) -> u32 {
        match self {
            TaskKind::Copy => 1,
            TaskKind::Reverse => 2,
            TaskKind::Shift => 3,
            TaskKind::Parity => 4,
        }
    }

    pub fn is_classification(self) -> bool {
        self == TaskKind::Parity
    }

    /// Token range the content is drawn from.
    pub fn vocab_slice(self) -> std::ops::Range<u32> {
        match self {
            TaskKind::Parity => SYMBOL_BASE..SYMBOL_BASE + 2,
            _ => SYMBOL_BASE..SYMBOL_BASE + ALPHABET,
        }
    }

    pub fn content_len(self) -> usize {
        match self {
            TaskKind::Parity => PARITY_BITS,
            _ => CONTENT_LEN,
        }
    }

    pub fn seq_len(self) -> usize {
        match self {
            TaskKind::Parity => PARITY_BITS + 2,
            _ => 2 * CONTENT_LEN + 1,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "shift" | "shift-by-k" => Ok(TaskKind::Shift),
            "parity" | "parity-classify" => Ok(TaskKind::Parity),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Whether `content` belongs to the test split. Depends only on the content,
/// so the two splits never share an item.
pub fn split_of(kind: TaskKind, content: &[u32]) -> Split {
    let mut h = Sha256::new();
    h.update([kind.marker() as u8]);
    for &c in content {
        h.update(c.to_le_bytes());
    }
    if h.finalize()[0] % TEST_EVERY == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Expected outputs for a content sequence. Parity yields one class token.
pub fn answer(kind: TaskKind, content: &[u32]) -> Vec<u32> {
    match kind {
        TaskKind::Copy => content.to_vec(),
        TaskKind::Reverse => content.iter().rev().copied().collect(),
        TaskKind::Shift => content
            .iter()
            .map(|&c| SYMBOL_BASE + (c - SYMBOL_BASE + SHIFT_K) % ALPHABET)
            .collect(),
        TaskKind::Parity => {
            let ones = content.iter().filter(|&&c| c != SYMBOL_BASE).count();
            vec![if ones % 2 == 0 { CLASS_EVEN } else { CLASS_ODD }]
        }
    }
}

/// Builds the supervised sequence for one content draw.
pub fn encode(kind: TaskKind, content: &[u32]) -> Sequence {
    let y = answer(kind, content);
    let mut tokens = Vec::with_capacity(kind.seq_len());
    tokens.push(kind.marker());
    tokens.extend_from_slice(content);
    tokens.push(SEP);
    tokens.extend_from_slice(&y[..y.len() - 1]);
    let prompt = content.len() + 1;
    let mut targets = vec![None; prompt];
    targets.extend(y.iter().map(|&t| Some(t)));
    Sequence { tokens, targets }
}

/// A seeded sampler over one task's split.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub split: Split,
    rng: DropoutRng,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, split: Split, seed: u64) -> Self {
        let stream = ((kind.marker() as u64) << 1) | (split == Split::Test) as u64;
        let mut rng = DropoutRng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { kind, split, rng }
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Draws content until it falls in this sampler's split.
    pub fn sample(&mut self) -> Sequence {
        let range = self.kind.vocab_slice();
        loop {
            let content: Vec<u32> = (0..self.kind.content_len())
                .map(|_| self.rng.random_range(range.clone()))
                .collect();
            if split_of(self.kind, &content) == self.split {
                return encode(self.kind, &content);
            }
        }
    }

    pub fn batch(&mut self, n: usize) -> Vec<Sequence> {
        (0..n).map(|_| self.sample()).collect()
    }
}

/// Round-robin mixture of tasks: every batch holds each task in turn.
#[derive(Clone, Debug)]
pub struct TaskMixture {
    tasks: Vec<SyntheticTask>,
    next: usize,
}

impl TaskMixture {
    pub fn new(kinds: &[TaskKind], split: Split, seed: u64) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        Ok(Self {
            tasks: kinds.iter().map(|&k| SyntheticTask::new(k, split, seed)).collect(),
            next: 0,
        })
    }

    pub fn batch(&mut self, n: usize) -> Vec<Sequence> {
        (0..n)
            .map(|_| {
                let i = self.next;
                self.next = (self.next + 1) % self.tasks.len();
                self.tasks[i].sample()
            })
            .collect()
    }
}

/// Accuracy over the supervised positions of `seq` given logits for its
/// positions. Parity only compares the two class tokens.
pub fn score(kind: TaskKind, seq: &Sequence, logits_rows: &[&[f64]]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (p, target) in seq.supervised_positions() {
        let row = logits_rows[p];
        let pred = if kind.is_classification() {
            if row[CLASS_ODD as usize] > row[CLASS_EVEN as usize] {
                CLASS_ODD
            } else {
                CLASS_EVEN
            }
        } else {
            argmax(row) as u32
        };
        correct += (pred == target) as usize;
        total += 1;
    }
    (correct, total)
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodings() {
        let x = [8, 9, 15, 10, 8, 8, 8, 9];
        let s = encode(TaskKind::Shift, &x);
        assert_eq!(&s.tokens[..10], &[3, 8, 9, 15, 10, 8, 8, 8, 9, 0]);
        assert_eq!(s.tokens.len(), TaskKind::Shift.seq_len());
        let y: Vec<u32> = s.targets.iter().flatten().copied().collect();
        assert_eq!(y, vec![11, 12, 10, 13, 11, 11, 11, 12]);
        assert_eq!(&s.tokens[10..], &y[..7]);

        let r = encode(TaskKind::Reverse, &x);
        assert_eq!(r.targets.iter().flatten().copied().collect::<Vec<_>>(), vec![9, 8, 8, 8, 10, 15, 9, 8]);

        let bits = [9, 8, 9, 8, 8, 8, 8, 8, 8, 8, 8, 9];
        let p = encode(TaskKind::Parity, &bits);
        assert_eq!(p.tokens.len(), 14);
        assert_eq!(p.targets[13], Some(CLASS_ODD));
        assert!(p.targets[..13].iter().all(Option::is_none));
    }

    #[test]
    fn deterministic_and_disjoint() {
        for kind in TaskKind::ALL {
            let a = SyntheticTask::new(kind, Split::Train, 7).batch(50);
            let b = SyntheticTask::new(kind, Split::Train, 7).batch(50);
            assert_eq!(a, b);
            let test = SyntheticTask::new(kind, Split::Test, 7).batch(50);
            for s in &test {
                let content = &s.tokens[1..1 + kind.content_len()];
                assert_eq!(split_of(kind, content), Split::Test);
            }
            for s in &a {
                let content = &s.tokens[1..1 + kind.content_len()];
                assert_eq!(split_of(kind, content), Split::Train);
            }
        }
    }

    #[test]
    fn every_token_fits_the_task_vocab() {
        let mut mix = TaskMixture::new(&TaskKind::ALL, Split::Train, 1).unwrap();
        for s in mix.batch(40) {
            assert!(s.tokens.iter().all(|&t| (t as usize) < TASK_VOCAB));
            assert!(s.targets.iter().flatten().all(|&t| (t as usize) < TASK_VOCAB));
        }
    }

    #[test]
    fn parity_scoring_ignores_other_tokens() {
        let s = encode(TaskKind::Parity, &[8; 12]);
        let mut row = vec![0.0; TASK_VOCAB];
        row[12] = 9.0;
        row[CLASS_EVEN as usize] = 0.5;
        let rows: Vec<&[f64]> = (0..14).map(|_| row.as_slice()).collect();
        assert_eq!(score(TaskKind::Parity, &s, &rows), (1, 1));
    }
}
