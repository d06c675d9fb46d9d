use rand::Rng;

use super::{ExperimentConfig, ExperimentError};
use crate::autodiff::{grad_check, GradReport, Graph, Precision};
use crate::params::{Bindings, ParamStore};
use crate::pretext::{sample_task_batch, task_loss, DataConfig, TaskSpec};
use crate::rng::stream;
use crate::trainer::Model;
use crate::trunk::{Trunk, TrunkConfig};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskGradReport {
    pub task: String,
    pub lasso: bool,
    pub report: GradReport,
}

/// Shrinks a model to a size where every scalar can be probed by central
/// differences, keeping each task's preprocessing and lasso setting.
fn toy_model(cfg: &ExperimentConfig) -> Model {
    let model = cfg.model();
    Model {
        trunk: Trunk::new(TrunkConfig {
            units: 2,
            width: 2,
            dilated_units: 1,
            in_channels: model.trunk.config.in_channels,
            ..TrunkConfig::default()
        }),
        data: DataConfig {
            image_size: 16,
            patch: 3,
            grid: 3,
            jitter: 1,
            exemplar_pool: 3,
            ..DataConfig::default()
        },
        tasks: model
            .tasks
            .iter()
            .map(|t| TaskSpec {
                batch: 2,
                bins: 2,
                label_stride: 4,
                motion_factor: 4,
                head_width: 3,
                hidden: 4,
                ..t.clone()
            })
            .collect(),
        lambda: model.lambda.max(1e-3),
        precision: Precision::Double,
    }
}

/// Zero-initialized biases put many ReLU inputs exactly on the kink, where
/// central differences disagree with any one-sided derivative.
fn offset_biases(store: &mut ParamStore, seed: u64) {
    let mut rng = stream(seed, "gradcheck/bias", &[]);
    let names: Vec<String> = store.names().filter(|n| n.ends_with(".b")).map(String::from).collect();
    for name in names {
        for v in store.get_mut(&name).expect("listed").data_mut() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
}

/// Checks analytic gradients of every configured task's objective on a
/// toy-sized copy of the model.
pub fn grad_check_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskGradReport>, ExperimentError> {
    if cfg.precision() != Precision::Double {
        return Err(ExperimentError::Usage("grad-check requires 64-bit precision".into()));
    }
    let model = toy_model(cfg);
    model.validate()?;
    let seed = cfg.experiment.seed;
    let mut store = model.init_params(seed);
    offset_biases(&mut store, seed);
    let mut out = Vec::new();
    for spec in &model.tasks {
        let batch = sample_task_batch(spec, &model.data, &mut stream(seed, "gradcheck/batch", &[]))
            .map_err(crate::trainer::TrainError::from)?;
        let mut g = Graph::new();
        let mut binds = Bindings::new(&store);
        let loss = task_loss(&mut g, &mut binds, &model.trunk, spec, &batch, model.lambda)
            .map_err(crate::trainer::TrainError::from)?;
        let report = grad_check(&mut g, loss.objective, GRAD_STEP, GRAD_TOLERANCE)
            .map_err(|e| crate::trainer::TrainError::from(crate::pretext::PretextError::from(e)))?;
        out.push(TaskGradReport {
            task: spec.id().to_string(),
            lasso: spec.lasso,
            report,
        });
    }
    Ok(out)
}
