//! Discrete-event simulation of workers feeding the aggregator, and the
//! single-threaded reference loop it must agree with.
//!
//! Time is an integer tick count. At equal times deliveries are processed
//! before starts, so a worker starting at the tick of an apply sees the
//! updated parameters.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::aggregator::{AggregationMode, AggregatorState, Apply, Outcome, TaskStats};
use super::checkpoint::Checkpoint;
use super::optimizer::{OptimizerConfig, OptimizerState};
use super::{worker_compute, Model, TrainError};
use crate::autodiff::Tensor;
use crate::params::ParamStore;
use crate::pretext::sample_task_batch;
use crate::rng::{stream, StreamRng};

/// How long each worker takes per packet, and when it starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TraceConfig {
    /// Worker `k` of `W` starts at `k * latency`, takes `latency` per packet
    /// and idles `(W - 1) * latency` before restarting, so workers take
    /// turns in a fixed cycle.
    RoundRobin {
        #[serde(default = "one")]
        latency: u64,
    },
    /// Every packet takes a latency drawn uniformly from `min..=max`.
    Random { min: u64, max: u64 },
    /// Worker `k` always takes `latencies[k]`.
    Fixed { latencies: Vec<u64> },
}

fn one() -> u64 {
    1
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig::RoundRobin { latency: 1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Latency {
    Constant(u64),
    Random { min: u64, max: u64, seed: u64 },
}

/// Task assignment and timing of one worker.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkerTrace {
    pub worker: usize,
    pub task: usize,
    pub first_start: u64,
    pub idle: u64,
    latency: Latency,
}

impl WorkerTrace {
    pub fn latency(&self, step: u64) -> u64 {
        match self.latency {
            Latency::Constant(l) => l,
            Latency::Random { min, max, seed } => {
                stream(seed, "latency", &[self.worker as u64, step]).random_range(min..=max)
            }
        }
    }
}

/// Workers and quota for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskPlan {
    pub workers: usize,
    /// Packets per apply; defaults to the worker count. Workers beyond the
    /// quota act as backups in sync mode.
    pub quota: Option<usize>,
}

impl Default for TaskPlan {
    fn default() -> Self {
        Self { workers: 1, quota: None }
    }
}

impl TaskPlan {
    pub fn quota(&self) -> usize {
        self.quota.unwrap_or(self.workers)
    }
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub model: Model,
    pub optimizer: OptimizerConfig,
    pub mode: AggregationMode,
    /// One entry per task in `model.tasks`.
    pub plans: Vec<TaskPlan>,
    pub trace: TraceConfig,
    pub seed: u64,
    /// Stop after this many task applies.
    pub max_steps: u64,
    /// Stop once accumulated simulated cost reaches this value.
    pub budget: Option<f64>,
    pub checkpoint_interval: f64,
}

impl RunPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        self.optimizer.validate().map_err(TrainError::Config)?;
        if self.plans.len() != self.model.tasks.len() {
            return Err(TrainError::Config(format!(
                "{} task plans for {} tasks",
                self.plans.len(),
                self.model.tasks.len()
            )));
        }
        for (p, t) in self.plans.iter().zip(&self.model.tasks) {
            if p.workers == 0 {
                return Err(TrainError::Config(format!("task {} has no workers", t.id())));
            }
            if p.quota() == 0 || p.quota() > p.workers {
                return Err(TrainError::Config(format!(
                    "task {}: quota {} must be in 1..={}",
                    t.id(),
                    p.quota(),
                    p.workers
                )));
            }
        }
        if !(self.checkpoint_interval > 0.0 && self.checkpoint_interval.is_finite()) {
            return Err(TrainError::Config(format!(
                "checkpoint interval must be > 0, got {}",
                self.checkpoint_interval
            )));
        }
        match &self.trace {
            TraceConfig::RoundRobin { latency } if *latency == 0 => {
                return Err(TrainError::Config("latencies must be > 0".into()))
            }
            TraceConfig::Random { min, max } if *min == 0 || min > max => {
                return Err(TrainError::Config(format!("random latency range {min}..={max} is invalid")))
            }
            TraceConfig::Fixed { latencies } => {
                let total = self.worker_count();
                if latencies.len() != total || latencies.contains(&0) {
                    return Err(TrainError::Config(format!(
                        "fixed trace needs {total} positive latencies, got {latencies:?}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.plans.iter().map(|p| p.workers).sum()
    }

    /// Workers in task order.
    pub fn workers(&self) -> Vec<WorkerTrace> {
        let total = self.worker_count() as u64;
        let mut out = Vec::new();
        for (task, plan) in self.plans.iter().enumerate() {
            for _ in 0..plan.workers {
                let worker = out.len();
                let (first_start, idle, latency) = match &self.trace {
                    TraceConfig::RoundRobin { latency } => {
                        (worker as u64 * latency, (total - 1) * latency, Latency::Constant(*latency))
                    }
                    TraceConfig::Random { min, max } => (
                        0,
                        0,
                        Latency::Random {
                            min: *min,
                            max: *max,
                            seed: self.seed,
                        },
                    ),
                    TraceConfig::Fixed { latencies } => (0, 0, Latency::Constant(latencies[worker])),
                };
                out.push(WorkerTrace {
                    worker,
                    task,
                    first_start,
                    idle,
                    latency,
                });
            }
        }
        out
    }
}

/// Batch stream for the `k`-th packet of a task.
pub fn batch_rng(seed: u64, task: &str, k: u64) -> StreamRng {
    stream(seed, &format!("batch/{task}"), &[k])
}

/// One optimizer step as seen by an observer.
#[derive(Clone, Copy, Debug)]
pub struct ApplyRecord<'a> {
    pub task: usize,
    /// Task version after the apply.
    pub version: u64,
    pub packets: usize,
    pub mean_loss: f64,
    pub deltas: &'a BTreeMap<String, Tensor>,
    /// Accumulated cost when the apply happened.
    pub cost: f64,
    /// Total applies so far, including this one.
    pub applies: u64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub mode: AggregationMode,
    pub task_ids: Vec<String>,
    pub checkpoints: Vec<Checkpoint>,
    pub stats: Vec<TaskStats>,
    pub params: ParamStore,
    pub applies: u64,
    pub cost: f64,
    /// Whether packet conservation held after every delivery.
    pub conserved: bool,
    /// `(task, version, cost, mean loss)` per apply.
    pub losses: Vec<(usize, u64, f64, f64)>,
}

/// Parameters, optimizers and bookkeeping shared by both drivers.
struct State<'p> {
    plan: &'p RunPlan,
    params: ParamStore,
    optimizers: Vec<OptimizerState>,
    counters: Vec<u64>,
    versions: Vec<u64>,
    applies: u64,
    cost: f64,
    emitted: u64,
    checkpoints: Vec<Checkpoint>,
    losses: Vec<(usize, u64, f64, f64)>,
}

impl<'p> State<'p> {
    fn new(plan: &'p RunPlan) -> Self {
        let n = plan.model.tasks.len();
        let mut s = Self {
            plan,
            params: plan.model.init_params(plan.seed),
            optimizers: vec![OptimizerState::new(plan.optimizer.clone()); n],
            counters: vec![0; n],
            versions: vec![0; n],
            applies: 0,
            cost: 0.0,
            emitted: 0,
            checkpoints: Vec::new(),
            losses: Vec::new(),
        };
        s.checkpoint();
        s
    }

    fn checkpoint(&mut self) {
        let ids = self.plan.model.tasks.iter().map(|t| t.id().to_string());
        self.checkpoints.push(Checkpoint {
            params: self.params.clone(),
            optimizers: ids.clone().zip(self.optimizers.iter().cloned()).collect(),
            seed: self.plan.seed,
            counters: ids
                .zip(self.counters.iter().zip(&self.versions))
                .map(|(id, (&c, &v))| (id, c, v))
                .collect(),
            applies: self.applies,
            cost: self.cost,
        });
    }

    fn next_batch_index(&mut self, task: usize) -> u64 {
        let k = self.counters[task];
        self.counters[task] += 1;
        k
    }

    fn compute(&self, task: usize, k: u64, worker: usize) -> Result<super::GradientPacket, TrainError> {
        let spec = &self.plan.model.tasks[task];
        let batch = sample_task_batch(spec, &self.plan.model.data, &mut batch_rng(self.plan.seed, spec.id(), k))?;
        worker_compute(&self.plan.model, &self.params, task, &batch, self.versions[task], worker, k)
    }

    fn accrue(&mut self, task: usize) {
        self.cost += self.plan.model.tasks[task].step_cost;
    }

    fn apply(&mut self, apply: &Apply, observer: &mut dyn FnMut(&ApplyRecord)) {
        let deltas = self.optimizers[apply.task].apply(&apply.mean);
        for (name, d) in &deltas {
            self.params.add_delta(name, d);
        }
        self.versions[apply.task] = apply.version;
        self.applies += 1;
        self.losses.push((apply.task, apply.version, self.cost, apply.mean_loss));
        observer(&ApplyRecord {
            task: apply.task,
            version: apply.version,
            packets: apply.packets,
            mean_loss: apply.mean_loss,
            deltas: &deltas,
            cost: self.cost,
            applies: self.applies,
        });
    }

    /// Emits a checkpoint when the cost has crossed a new interval multiple.
    fn maybe_checkpoint(&mut self) {
        let k = (self.cost / self.plan.checkpoint_interval).floor() as u64;
        if k > self.emitted {
            self.emitted = k;
            self.checkpoint();
        }
    }

    fn done(&self) -> bool {
        self.applies >= self.plan.max_steps || self.plan.budget.is_some_and(|b| self.cost >= b)
    }

    fn finish(mut self, stats: Vec<TaskStats>, conserved: bool) -> RunResult {
        if self.checkpoints.last().is_some_and(|c| c.applies != self.applies || c.cost != self.cost) {
            self.checkpoint();
        }
        RunResult {
            mode: self.plan.mode,
            task_ids: self.plan.model.tasks.iter().map(|t| t.id().to_string()).collect(),
            checkpoints: self.checkpoints,
            stats,
            params: self.params,
            applies: self.applies,
            cost: self.cost,
            conserved,
            losses: self.losses,
        }
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Phase {
    Deliver,
    Start,
}

/// Runs the event simulation described by `plan`, calling `observer` after
/// every optimizer step.
pub fn run_training(plan: &RunPlan, observer: &mut dyn FnMut(&ApplyRecord)) -> Result<RunResult, TrainError> {
    plan.validate()?;
    let workers = plan.workers();
    let quotas: Vec<usize> = plan.plans.iter().map(TaskPlan::quota).collect();
    let mut agg = AggregatorState::new(plan.mode, &quotas);
    let mut state = State::new(plan);
    let mut conserved = true;

    let mut heap = BinaryHeap::new();
    let mut in_flight: BTreeMap<u64, super::GradientPacket> = BTreeMap::new();
    let mut seq = 0u64;
    let mut worker_steps = vec![0u64; workers.len()];
    let mut waiting: Vec<Vec<usize>> = vec![Vec::new(); plan.model.tasks.len()];
    for w in &workers {
        heap.push(Reverse((w.first_start, Phase::Start, w.worker, seq)));
        seq += 1;
    }

    while let Some(Reverse((now, phase, w, id))) = heap.pop() {
        if state.done() {
            break;
        }
        let trace = &workers[w];
        match phase {
            Phase::Start => {
                let k = state.next_batch_index(trace.task);
                let packet = state.compute(trace.task, k, w)?;
                let latency = trace.latency(worker_steps[w]);
                worker_steps[w] += 1;
                in_flight.insert(seq, packet);
                heap.push(Reverse((now + latency, Phase::Deliver, w, seq)));
                seq += 1;
            }
            Phase::Deliver => {
                let packet = in_flight.remove(&id).expect("delivered packet was in flight");
                let task = packet.task;
                let computed_at = packet.version;
                state.accrue(task);
                let mut restart = vec![];
                match agg.aggregate(packet)? {
                    Outcome::Applied(applies) => {
                        restart.push(w);
                        for a in &applies {
                            state.apply(a, observer);
                            restart.append(&mut waiting[a.task]);
                        }
                    }
                    Outcome::Buffered => waiting[task].push(w),
                    // A backup whose round is still open waits for it to close;
                    // a stale packet's worker resnapshots right away.
                    Outcome::Discarded if computed_at == agg.version(task) => waiting[task].push(w),
                    Outcome::Discarded => restart.push(w),
                }
                conserved &= agg.packets_conserved();
                for r in restart {
                    heap.push(Reverse((now + workers[r].idle, Phase::Start, r, seq)));
                    seq += 1;
                }
                state.maybe_checkpoint();
            }
        }
    }
    let stats = (0..agg.task_count()).map(|t| agg.stats(t).clone()).collect();
    Ok(state.finish(stats, conserved))
}

/// Single-threaded ground truth: tasks take turns in configured order, one
/// batch each, and every gradient is applied immediately.
pub fn serial_reference(plan: &RunPlan, observer: &mut dyn FnMut(&ApplyRecord)) -> Result<RunResult, TrainError> {
    plan.model.validate()?;
    plan.optimizer.validate().map_err(TrainError::Config)?;
    let n = plan.model.tasks.len();
    let mut state = State::new(plan);
    let mut stats = vec![TaskStats::default(); n];
    let mut step = 0usize;
    while !state.done() {
        let task = step % n;
        step += 1;
        let k = state.next_batch_index(task);
        let packet = state.compute(task, k, 0)?;
        state.accrue(task);
        let version = state.versions[task] + 1;
        let apply = Apply {
            task,
            mean: packet.grads,
            packets: 1,
            mean_loss: packet.loss,
            version,
        };
        state.apply(&apply, observer);
        let s = &mut stats[task];
        s.produced += 1;
        s.applied_packets += 1;
        s.applies += 1;
        *s.staleness.entry(0).or_default() += 1;
        state.maybe_checkpoint();
    }
    Ok(state.finish(stats, true))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskStaleness {
    pub task: String,
    pub produced: u64,
    pub applied_packets: u64,
    pub applies: u64,
    pub discarded: u64,
    pub max: u64,
    pub mean: f64,
    /// `(staleness, packet count)` pairs.
    pub histogram: Vec<(u64, u64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StalenessReport {
    pub mode: AggregationMode,
    pub tasks: Vec<TaskStaleness>,
}

impl StalenessReport {
    pub fn max_staleness(&self) -> u64 {
        self.tasks.iter().map(|t| t.max).max().unwrap_or(0)
    }

    pub fn discarded(&self) -> u64 {
        self.tasks.iter().map(|t| t.discarded).sum()
    }
}

pub fn staleness_report(run: &RunResult) -> StalenessReport {
    StalenessReport {
        mode: run.mode,
        tasks: run
            .task_ids
            .iter()
            .zip(&run.stats)
            .map(|(id, s)| TaskStaleness {
                task: id.clone(),
                produced: s.produced,
                applied_packets: s.applied_packets,
                applies: s.applies,
                discarded: s.discarded,
                max: s.max_staleness(),
                mean: s.mean_staleness(),
                histogram: s.staleness.iter().map(|(&k, &v)| (k, v)).collect(),
            })
            .collect(),
    }
}
