//! Fixtures shared by the benchmarks.

use mtss_core::params::ParamStore;
use mtss_core::pretext::{sample_task_batch, DataConfig, TaskBatch, TaskKind, TaskSpec};
use mtss_core::rng::stream;
use mtss_core::trainer::Model;
use mtss_core::trunk::{Trunk, TrunkConfig};

/// The default-sized model with one task, its initial parameters and a batch.
pub fn task_fixture(kind: TaskKind) -> (Model, ParamStore, TaskBatch) {
    let model = Model {
        trunk: Trunk::new(TrunkConfig::default()),
        data: DataConfig::default(),
        tasks: vec![TaskSpec::new(kind)],
        lambda: 1e-3,
        precision: mtss_core::autodiff::Precision::Double,
    };
    let store = model.init_params(1);
    let batch = sample_task_batch(&model.tasks[0], &model.data, &mut stream(1, "bench", &[])).expect("valid fixture");
    (model, store, batch)
}
