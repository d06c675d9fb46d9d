use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::Tensor;

/// One worker's gradient for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientPacket {
    pub task: usize,
    pub worker: usize,
    /// The task's parameter version when the snapshot was taken.
    pub version: u64,
    /// Index of this packet among all packets started for the task.
    pub step: u64,
    pub grads: BTreeMap<String, Tensor>,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Every packet is applied on arrival.
    Async,
    /// All tasks accumulate to quota, then every task applies together.
    Sync,
    /// Each task applies as soon as its own quota is met.
    #[default]
    Hybrid,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 3] = [AggregationMode::Async, AggregationMode::Sync, AggregationMode::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::Async => "async",
            AggregationMode::Sync => "sync",
            AggregationMode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AggregationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AggregationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown aggregation mode `{s}` (expected async, sync or hybrid)"))
    }
}

/// Packet accounting for one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskStats {
    /// Packets delivered to the aggregator.
    pub produced: u64,
    /// Packets folded into an apply.
    pub applied_packets: u64,
    pub discarded: u64,
    pub applies: u64,
    /// Histogram of `apply version - compute version` over applied packets.
    pub staleness: BTreeMap<u64, u64>,
}

impl TaskStats {
    pub fn max_staleness(&self) -> u64 {
        self.staleness.keys().next_back().copied().unwrap_or(0)
    }

    pub fn mean_staleness(&self) -> f64 {
        let n: u64 = self.staleness.values().sum();
        if n == 0 {
            return 0.0;
        }
        self.staleness.iter().map(|(s, c)| (s * c) as f64).sum::<f64>() / n as f64
    }
}

#[derive(Clone, Debug, Default)]
struct TaskBuffer {
    quota: usize,
    sum: BTreeMap<String, Tensor>,
    loss_sum: f64,
    count: usize,
    /// Compute versions of the buffered packets.
    pending: Vec<u64>,
    version: u64,
    stats: TaskStats,
}

/// A task update ready for the optimizer: the mean of the buffered
/// gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Apply {
    pub task: usize,
    pub mean: BTreeMap<String, Tensor>,
    pub packets: usize,
    pub mean_loss: f64,
    /// Task version after this apply.
    pub version: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Outcome {
    Buffered,
    Discarded,
    Applied(Vec<Apply>),
}

/// Per-task accumulation buffers, quotas and version counters.
#[derive(Clone, Debug)]
pub struct AggregatorState {
    mode: AggregationMode,
    tasks: Vec<TaskBuffer>,
}

impl AggregatorState {
    pub fn new(mode: AggregationMode, quotas: &[usize]) -> Self {
        Self {
            mode,
            tasks: quotas
                .iter()
                .map(|&quota| TaskBuffer {
                    quota: quota.max(1),
                    ..TaskBuffer::default()
                })
                .collect(),
        }
    }

    pub fn mode(&self) -> AggregationMode {
        self.mode
    }

    pub fn version(&self, task: usize) -> u64 {
        self.tasks[task].version
    }

    pub fn buffered(&self, task: usize) -> usize {
        self.tasks[task].count
    }

    pub fn stats(&self, task: usize) -> &TaskStats {
        &self.tasks[task].stats
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// `produced == applied + buffered + discarded` for every task.
    pub fn packets_conserved(&self) -> bool {
        self.tasks
            .iter()
            .all(|t| t.stats.produced == t.stats.applied_packets + t.count as u64 + t.stats.discarded)
    }

    pub fn aggregate(&mut self, packet: GradientPacket) -> Result<Outcome, TrainError> {
        let n = packet.task;
        if n >= self.tasks.len() {
            return Err(TrainError::UnknownTask(n));
        }
        self.tasks[n].stats.produced += 1;
        match self.mode {
            AggregationMode::Async => {
                self.buffer(packet);
                Ok(Outcome::Applied(vec![self.flush(n)]))
            }
            AggregationMode::Hybrid => {
                let t = &mut self.tasks[n];
                if packet.version != t.version {
                    t.stats.discarded += 1;
                    return Ok(Outcome::Discarded);
                }
                self.buffer(packet);
                if self.tasks[n].count == self.tasks[n].quota {
                    Ok(Outcome::Applied(vec![self.flush(n)]))
                } else {
                    Ok(Outcome::Buffered)
                }
            }
            AggregationMode::Sync => {
                let t = &mut self.tasks[n];
                if packet.version != t.version || t.count == t.quota {
                    t.stats.discarded += 1;
                    return Ok(Outcome::Discarded);
                }
                self.buffer(packet);
                if self.tasks.iter().all(|t| t.count == t.quota) {
                    let applies = (0..self.tasks.len()).map(|i| self.flush(i)).collect();
                    Ok(Outcome::Applied(applies))
                } else {
                    Ok(Outcome::Buffered)
                }
            }
        }
    }

    fn buffer(&mut self, packet: GradientPacket) {
        let t = &mut self.tasks[packet.task];
        for (name, g) in packet.grads {
            match t.sum.get_mut(&name) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    t.sum.insert(name, g);
                }
            }
        }
        t.loss_sum += packet.loss;
        t.count += 1;
        t.pending.push(packet.version);
    }

    fn flush(&mut self, task: usize) -> Apply {
        let t = &mut self.tasks[task];
        assert!(t.count > 0, "apply from an empty buffer");
        let count = t.count;
        let mut mean = std::mem::take(&mut t.sum);
        if count > 1 {
            let inv = count as f64;
            for g in mean.values_mut() {
                for v in g.data_mut() {
                    *v /= inv;
                }
            }
        }
        for &v in &t.pending {
            *t.stats.staleness.entry(t.version - v).or_default() += 1;
        }
        t.pending.clear();
        t.version += 1;
        t.stats.applies += 1;
        t.stats.applied_packets += count as u64;
        let mean_loss = t.loss_sum / count as f64;
        t.loss_sum = 0.0;
        t.count = 0;
        Apply {
            task,
            mean,
            packets: count,
            mean_loss,
            version: t.version,
        }
    }
}
