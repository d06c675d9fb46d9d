//! Multi-task training: per-task RMSProp, gradient aggregation and a
//! deterministic event-driven simulation of a worker pool.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::autodiff::{Graph, Precision};
use crate::lasso::{init_row, AlphaRole};
use crate::params::{Bindings, ParamStore};
use crate::pretext::{init_head, task_loss, DataConfig, PretextError, TaskBatch, TaskSpec};
use crate::rng::stream;
use crate::trunk::Trunk;

mod aggregator;
mod checkpoint;
mod optimizer;
mod simulate;

pub use aggregator::{AggregationMode, AggregatorState, Apply, GradientPacket, Outcome, TaskStats};
pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optimizer::{rmsprop_apply, OptimizerConfig, OptimizerState};
pub use simulate::{
    batch_rng, run_training, serial_reference, staleness_report, ApplyRecord, RunPlan, RunResult, StalenessReport,
    TaskPlan, TaskStaleness, TraceConfig, WorkerTrace,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("packet for unknown task index {0}")]
    UnknownTask(usize),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Pretext(#[from] PretextError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Trunk, tasks and data settings shared by every worker.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub trunk: Trunk,
    pub data: DataConfig,
    pub tasks: Vec<TaskSpec>,
    /// L1 weight on lasso rows.
    pub lambda: f64,
    pub precision: Precision,
}

impl Model {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.tasks.is_empty() {
            return Err(TrainError::Config("at least one task is required".into()));
        }
        for (i, t) in self.tasks.iter().enumerate() {
            if self.tasks[..i].iter().any(|o| o.kind == t.kind) {
                return Err(TrainError::Config(format!("task {} listed twice", t.id())));
            }
            t.validate(&self.data, &self.trunk)?;
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.trunk.config.units == 0 || self.trunk.config.width == 0 {
            return Err(TrainError::Config("trunk needs at least one unit of nonzero width".into()));
        }
        Ok(())
    }

    pub fn task_index(&self, id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.id() == id)
    }

    /// Initial parameters: trunk, every head, and a pre-training lasso row
    /// for each task that uses one.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.trunk.init(&mut store, &mut stream(seed, "init/trunk", &[]));
        for spec in &self.tasks {
            let mut rng = stream(seed, &format!("init/head/{}", spec.id()), &[]);
            init_head(spec, &self.data, &self.trunk, &mut store, &mut rng);
            if spec.lasso {
                init_row(&mut store, AlphaRole::Pretrain, spec.id(), self.trunk.config.units, &mut rng);
            }
        }
        store
    }
}

/// Gradients of one task's objective at a parameter snapshot.
pub fn worker_compute(
    model: &Model,
    snapshot: &ParamStore,
    task: usize,
    batch: &TaskBatch,
    version: u64,
    worker: usize,
    step: u64,
) -> Result<GradientPacket, TrainError> {
    let spec = &model.tasks[task];
    let mut g = Graph::with_precision(model.precision);
    let mut binds = Bindings::new(snapshot);
    let out = task_loss(&mut g, &mut binds, &model.trunk, spec, batch, model.lambda)?;
    let grads: BTreeMap<String, _> = g
        .backward(out.objective)
        .map_err(|e| TrainError::Pretext(e.into()))?
        .by_name();
    Ok(GradientPacket {
        task,
        worker,
        version,
        step,
        grads,
        loss: g.value(out.loss).item(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pretext::exemplar::AugmentConfig;
    use crate::pretext::{sample_task_batch, TaskKind};
    use crate::trunk::TrunkConfig;

    fn model(kinds: &[TaskKind]) -> Model {
        Model {
            trunk: Trunk::new(TrunkConfig {
                units: 2,
                width: 3,
                dilated_units: 1,
                ..TrunkConfig::default()
            }),
            data: DataConfig {
                image_size: 16,
                patch: 4,
                grid: 3,
                jitter: 0,
                exemplar_pool: 3,
                ..DataConfig::default()
            },
            tasks: kinds
                .iter()
                .map(|&k| TaskSpec {
                    batch: 2,
                    bins: 3,
                    head_width: 4,
                    hidden: 4,
                    ..TaskSpec::new(k)
                })
                .collect(),
            lambda: 1e-3,
            precision: Precision::Double,
        }
    }

    #[test]
    fn packets_are_deterministic_and_scoped() {
        let m = model(&TaskKind::ALL);
        m.validate().unwrap();
        let store = m.init_params(3);
        let batch = sample_task_batch(&m.tasks[0], &m.data, &mut stream(1, "b", &[])).unwrap();
        let a = worker_compute(&m, &store, 0, &batch, 0, 0, 0).unwrap();
        let b = worker_compute(&m, &store, 0, &batch, 0, 1, 0).unwrap();
        assert_eq!(a.grads, b.grads);
        assert!(a.grads.keys().all(|k| k.starts_with("trunk.") || k.starts_with("head.rp.")));
        assert!(a.grads.keys().any(|k| k.starts_with("head.rp.")));
    }

    #[test]
    fn inactive_hinge_gives_zero_gradients() {
        let mut m = model(&[TaskKind::Exemplar]);
        m.tasks[0].margin = 1e-12;
        m.data.augment = AugmentConfig::identity(4);
        let store = m.init_params(5);
        let batch = sample_task_batch(&m.tasks[0], &m.data, &mut stream(2, "b", &[])).unwrap();
        let p = worker_compute(&m, &store, 0, &batch, 0, 0, 0).unwrap();
        assert_eq!(p.loss, 0.0);
        assert!(p.grads.values().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicate_tasks_are_rejected() {
        let m = model(&[TaskKind::Colorization, TaskKind::Colorization]);
        assert!(m.validate().is_err());
    }
}
