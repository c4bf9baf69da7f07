//! Run configuration, synthetic data, checkpoints and the drivers behind the
//! command-line tool.

pub mod checkpoint;
pub mod config;
pub mod data;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bench::{self, BenchEntry, ComparisonReport, Phase};
use crate::error::{Error, Result};
use crate::model::{AdapterSet, FrozenBase, Model, ModelConfig, Sequence};
use crate::moe::{expert_load_report, ExpertLoad, ForwardMode, RoutingRecord, RoutingStats};
use crate::multitask::{Engine, MultiTaskBatch, TaskSlice};
use crate::numerics::Scalar;
use checkpoint::{read_meta, Checkpoint, CheckpointMeta};
use config::{Precision, RunConfig};
use data::{score, Split, SyntheticTask, TaskKind, TaskMixture};

/// One line of the training metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub set: usize,
    pub tasks: Vec<TaskKind>,
    pub task_loss: f64,
    pub aux_loss: f64,
    pub total: f64,
    /// Dispatch fractions per MixLoRA layer.
    pub expert_f: Vec<Vec<f64>>,
}

/// Per-set loss trajectory summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub tasks: Vec<TaskKind>,
    pub initial_task_loss: f64,
    /// Mean task loss over the last (up to) ten steps.
    pub final_task_loss: f64,
}

/// A trained run in whichever precision it was configured for.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

macro_rules! dispatch {
    ($ck:expr, $c:ident => $body:expr) => {
        match $ck {
            AnyCheckpoint::F32($c) => $body,
            AnyCheckpoint::F64($c) => $body,
        }
    };
}

impl AnyCheckpoint {
    pub fn meta(&self) -> &CheckpointMeta {
        dispatch!(self, c => &c.meta)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        dispatch!(self, c => c.to_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        dispatch!(self, c => c.save(path))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(match read_meta(bytes)?.run.precision {
            Precision::F32 => AnyCheckpoint::F32(Checkpoint::from_bytes(bytes)?),
            Precision::F64 => AnyCheckpoint::F64(Checkpoint::from_bytes(bytes)?),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn evaluate(&self, task: TaskKind, samples: usize, seed: u64) -> Result<EvalReport> {
        dispatch!(self, c => evaluate(c, task, samples, seed))
    }
}

pub struct TrainOutcome {
    pub checkpoint: AnyCheckpoint,
    pub summaries: Vec<SetSummary>,
}

/// Trains per the config. Without `multitask` each task gets its own adapter
/// set and all sets train side by side in one packed batch over the shared
/// base; with it a single set trains on the round-robin task mixture.
/// Either way every task contributes `batch_size` sequences per micro-batch.
pub fn train(cfg: &RunConfig, metrics: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, metrics).map(|(c, s)| TrainOutcome {
            checkpoint: AnyCheckpoint::F32(c),
            summaries: s,
        }),
        Precision::F64 => train_typed::<f64>(cfg, metrics).map(|(c, s)| TrainOutcome {
            checkpoint: AnyCheckpoint::F64(c),
            summaries: s,
        }),
    }
}

fn set_groups(cfg: &RunConfig) -> Vec<Vec<TaskKind>> {
    if cfg.multitask {
        vec![cfg.tasks.clone()]
    } else {
        cfg.tasks.iter().map(|&t| vec![t]).collect()
    }
}

/// Seeds of the frozen base and of adapter set `i`.
pub fn base_seed(cfg: &RunConfig) -> u64 {
    cfg.seed
}

pub fn set_seed(cfg: &RunConfig, i: usize) -> u64 {
    cfg.seed.wrapping_add(1 + i as u64)
}

pub fn train_typed<T: Scalar>(cfg: &RunConfig, metrics: &mut dyn Write) -> Result<(Checkpoint<T>, Vec<SetSummary>)> {
    let groups = set_groups(cfg);
    let base = Arc::new(FrozenBase::<T>::init(&cfg.model, base_seed(cfg))?);
    let mut engine = Engine::new(cfg.model.clone(), Arc::clone(&base))?;
    for i in 0..groups.len() {
        engine.add_set(AdapterSet::init(&cfg.model, set_seed(cfg, i), cfg.optimizer())?);
    }
    let mut samplers: Vec<TaskMixture> = groups
        .iter()
        .map(|g| TaskMixture::new(g, Split::Train, cfg.seed))
        .collect::<Result<_>>()?;

    let mut history: Vec<Vec<f64>> = vec![Vec::new(); groups.len()];
    for step in 0..cfg.steps {
        let micro: Vec<MultiTaskBatch> = (0..cfg.grad_accum)
            .map(|_| {
                MultiTaskBatch::new(
                    samplers
                        .iter_mut()
                        .enumerate()
                        .map(|(set_id, s)| TaskSlice {
                            set_id,
                            sequences: s.batch(cfg.batch_size * groups[set_id].len()),
                        })
                        .collect(),
                )
            })
            .collect();
        let reports = engine.multi_train_step_accumulated(&micro, cfg.mode)?;
        for (set, r) in reports.iter().enumerate() {
            history[set].push(r.task_loss);
            let line = MetricsLine {
                step,
                set,
                tasks: groups[set].clone(),
                task_loss: r.task_loss,
                aux_loss: r.aux_loss,
                total: r.total,
                expert_f: r.stats.iter().map(RoutingStats::fractions).collect(),
            };
            serde_json::to_writer(&mut *metrics, &line)?;
            metrics.write_all(b"\n")?;
        }
    }
    metrics.flush()?;

    let summaries = groups
        .iter()
        .zip(&history)
        .map(|(g, h)| {
            let tail = &h[h.len().saturating_sub(10)..];
            SetSummary {
                tasks: g.clone(),
                initial_task_loss: h.first().copied().unwrap_or(f64::NAN),
                final_task_loss: if tail.is_empty() {
                    f64::NAN
                } else {
                    tail.iter().sum::<f64>() / tail.len() as f64
                },
            }
        })
        .collect();
    let checkpoint = Checkpoint {
        meta: CheckpointMeta {
            run: cfg.clone(),
            sets: groups,
            steps: cfg.steps,
        },
        base,
        sets: engine.into_sets(),
    };
    Ok((checkpoint, summaries))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub set: usize,
    pub samples: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
    /// Expert load per MixLoRA layer.
    pub expert_load: Vec<ExpertLoad>,
    /// Mean over layers of the spread of dispatch fractions across experts.
    pub load_std: Option<f64>,
    pub routing: Vec<RoutingRecord>,
}

const EVAL_CHUNK: usize = 64;

/// Held-out accuracy of the set trained on `task`, with routing statistics.
pub fn evaluate<T: Scalar>(ck: &Checkpoint<T>, task: TaskKind, samples: usize, seed: u64) -> Result<EvalReport> {
    let set = ck
        .meta
        .sets
        .iter()
        .position(|g| g.contains(&task))
        .ok_or_else(|| Error::Config(format!("checkpoint has no adapter set trained on task {task}")))?;
    let model = Model {
        config: ck.meta.run.model.clone(),
        base: Arc::clone(&ck.base),
        adapters: ck.sets[set].clone(),
    };
    evaluate_model(&model, set, task, samples, seed)
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    set: usize,
    task: TaskKind,
    samples: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples == 0 {
        return Err(Error::Config("eval needs at least one sample".into()));
    }
    let mut sampler = SyntheticTask::new(task, Split::Test, seed);
    let seqs: Vec<Sequence> = sampler.batch(samples);
    let mut correct = 0;
    let mut total = 0;
    let mut stats: Vec<RoutingStats> = Vec::new();
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let tokens: Vec<&[u32]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let (logits, chunk_stats) = model.logits(&tokens, ForwardMode::Optimized)?;
        let rows: Vec<Vec<f64>> = (0..logits.rows()).map(|i| logits.row(i).iter().map(|v| v.as_f64()).collect()).collect();
        let mut offset = 0;
        for s in chunk {
            let view: Vec<&[f64]> = rows[offset..offset + s.tokens.len()].iter().map(Vec::as_slice).collect();
            let (c, t) = score(task, s, &view);
            correct += c;
            total += t;
            offset += s.tokens.len();
        }
        if stats.is_empty() {
            stats = chunk_stats;
        } else {
            for (a, b) in stats.iter_mut().zip(&chunk_stats) {
                a.merge(b)?;
            }
        }
    }
    let per_layer: Vec<ExpertLoad> = stats
        .into_iter()
        .map(|s| expert_load_report(&[(task.name().to_string(), s)]).map(|mut v| v.remove(0)))
        .collect::<Result<_>>()?;
    let routing = per_layer.iter().enumerate().flat_map(|(l, e)| e.records(l)).collect();
    let load_std = if per_layer.is_empty() {
        None
    } else {
        Some(per_layer.iter().map(|e| e.std).sum::<f64>() / per_layer.len() as f64)
    };
    Ok(EvalReport {
        task,
        set,
        samples,
        correct,
        total,
        accuracy: correct as f64 / total as f64,
        expert_load: per_layer,
        load_std,
        routing,
    })
}

/// Seed of the held-out evaluation draw for a run.
pub fn eval_seed(cfg: &RunConfig) -> u64 {
    cfg.seed ^ 0x0e7a_1000
}

/// Benchmark defaults: sequence length, warmup and timed iterations.
pub const BENCH_TOKENS: usize = 512;
pub const BENCH_WARMUP: usize = 3;
pub const BENCH_ITERS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub modes: Vec<ForwardMode>,
    pub models: usize,
    pub phase: Phase,
    pub tokens: usize,
    pub warmup: usize,
    pub iters: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            modes: vec![ForwardMode::Vanilla, ForwardMode::Optimized],
            models: 1,
            phase: Phase::Forward,
            tokens: BENCH_TOKENS,
            warmup: BENCH_WARMUP,
            iters: BENCH_ITERS,
        }
    }
}

/// Latency, FLOP and memory comparison of the requested modes in 32-bit
/// precision. With `models ≥ 2` the memory census of a shared-base engine is
/// compared against that many standalone models.
pub fn bench_report(model: &ModelConfig, opts: &BenchOptions) -> Result<ComparisonReport> {
    if opts.models == 0 {
        return Err(Error::Config("models must be >= 1".into()));
    }
    let latencies = bench::measure_modes(model, &opts.modes, opts.phase, opts.tokens, opts.warmup, opts.iters)?;
    let census_for = |m: usize| -> Result<crate::multitask::MemoryCensus> {
        let base = Arc::new(FrozenBase::<f32>::init(model, 0)?);
        let mut engine = Engine::new(model.clone(), base)?;
        for i in 0..m {
            engine.add_set(AdapterSet::init(model, 1 + i as u64, Default::default())?);
        }
        Ok(engine.memory_census())
    };
    let single = census_for(1)?;
    let multi = if opts.models > 1 { Some(census_for(opts.models)?) } else { None };
    let shown = multi.as_ref().unwrap_or(&single);
    let entries: Vec<BenchEntry> = latencies.iter().map(|l| BenchEntry::new(model, l, shown)).collect();
    bench::compare_report(&entries, multi.as_ref().map(|m| (&single, m)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    AuxCoef,
    Rank,
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::AuxCoef => vec![0.0, 1e-3, 1e-2, 1e-1],
            SweepAxis::Rank => vec![2.0, 4.0, 8.0, 16.0, 32.0],
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig> {
        let mut out = cfg.clone();
        match self {
            SweepAxis::AuxCoef => out.model.aux_coef = value,
            SweepAxis::Rank => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("rank {value} is not a positive integer")));
                }
                let rank = value as usize;
                // hold α/r fixed while the rank moves
                out.model.lora_alpha = cfg.model.lora_alpha * rank as f64 / cfg.model.lora_rank as f64;
                out.model.lora_rank = rank;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aux_coef" | "aux-coef" => Ok(SweepAxis::AuxCoef),
            "rank" => Ok(SweepAxis::Rank),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskKind,
    pub accuracy: f64,
    pub load_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub mean_accuracy: f64,
    pub mean_load_std: Option<f64>,
    pub tasks: Vec<TaskResult>,
}

/// Trains and evaluates every task of a config, discarding metrics.
pub fn train_and_evaluate(cfg: &RunConfig) -> Result<Vec<TaskResult>> {
    let out = train(cfg, &mut std::io::sink())?;
    cfg.tasks
        .iter()
        .map(|&task| {
            let r = out.checkpoint.evaluate(task, cfg.eval_samples, eval_seed(cfg))?;
            Ok(TaskResult {
                task,
                accuracy: r.accuracy,
                load_std: r.load_std,
            })
        })
        .collect()
}

/// One training run per axis value, all from the same seed. `parallel` runs
/// points on the rayon pool; every point is independent, so rows match the
/// sequential ones exactly.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64], parallel: bool) -> Result<Vec<SweepRow>> {
    let point = |&value: &f64| -> Result<SweepRow> {
        let point_cfg = axis.apply(cfg, value)?;
        let tasks = train_and_evaluate(&point_cfg)?;
        let n = tasks.len() as f64;
        let stds: Vec<f64> = tasks.iter().filter_map(|t| t.load_std).collect();
        Ok(SweepRow {
            axis,
            value,
            mean_accuracy: tasks.iter().map(|t| t.accuracy).sum::<f64>() / n,
            mean_load_std: (!stds.is_empty()).then(|| stds.iter().sum::<f64>() / stds.len() as f64),
            tasks,
        })
    };
    // fail on bad values before any training starts
    for &v in values {
        axis.apply(cfg, v)?;
    }
    if parallel {
        values.par_iter().map(point).collect()
    } else {
        values.iter().map(point).collect()
    }
}
