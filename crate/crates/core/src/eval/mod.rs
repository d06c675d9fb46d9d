//! Transfer evaluation of trunk checkpoints: a frozen-feature linear probe,
//! full fine-tuning, and depth regression with its metric suite.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Precision, Primitive, Tensor};
use crate::lasso::LassoError;
use crate::params::{Bindings, ParamStore};
use crate::pretext::{stack, Image, PretextError};
use crate::trainer::OptimizerConfig;
use crate::trunk::{Trunk, UnitOutputs};

mod data;
mod depth;
mod finetune;
mod probe;

pub use data::{classification_set, depth_set, downsample_depth, jitter, random_shift, translate, ClassificationSet, DatasetConfig, DepthSet};
pub use depth::{depth_metrics, DepthMetricsReport, THRESHOLD};
pub use finetune::{finetune_classify, finetune_depth, DepthReport};
pub use probe::{frozen_linear_eval, ClassifyReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset has {got} classes, evaluation expects {expected}")]
    ClassMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("recall@{k} needs 1 <= k <= {classes}")]
    BadK { k: usize, classes: usize },
    #[error("length mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("depth must be positive and finite, found {value} at index {index}")]
    NonPositiveDepth { index: usize, value: f64 },
    #[error("checkpoint does not fit the trunk: {0}")]
    Checkpoint(String),
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Lasso(#[from] LassoError),
    #[error(transparent)]
    Pretext(#[from] PretextError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalKind {
    #[default]
    FrozenLinear,
    FinetuneClassify,
    DepthRegress,
}

impl EvalKind {
    pub const ALL: [EvalKind; 3] = [EvalKind::FrozenLinear, EvalKind::FinetuneClassify, EvalKind::DepthRegress];

    pub fn id(self) -> &'static str {
        match self {
            EvalKind::FrozenLinear => "frozen-linear",
            EvalKind::FinetuneClassify => "finetune-classify",
            EvalKind::DepthRegress => "depth-regress",
        }
    }
}

impl fmt::Display for EvalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for EvalKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EvalKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| format!("unknown evaluation `{s}`"))
    }
}

/// One downstream evaluation and its training budget.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalTaskSpec {
    pub kind: EvalKind,
    pub dataset: DatasetConfig,
    /// Feed the head a learned combination of all units instead of the last.
    pub lasso: bool,
    /// L1 weight on the evaluation lasso row.
    pub lambda: f64,
    /// Maximum optimizer steps.
    pub steps: usize,
    /// Minibatch size for fine-tuning; the probe trains full-batch.
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    /// Stop after this many steps without the smoothed loss improving by
    /// `min_improvement` (relative). Zero disables early stopping.
    pub patience: usize,
    pub min_improvement: f64,
    pub k: usize,
    /// Hidden channels of the depth head.
    pub hidden: usize,
}

impl Default for EvalTaskSpec {
    fn default() -> Self {
        Self {
            kind: EvalKind::FrozenLinear,
            dataset: DatasetConfig::default(),
            lasso: false,
            lambda: 0.0,
            steps: 1000,
            batch: 8,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..OptimizerConfig::default()
            },
            patience: 20,
            min_improvement: 1e-3,
            k: 2,
            hidden: 8,
        }
    }
}

impl EvalTaskSpec {
    pub fn new(kind: EvalKind) -> Self {
        let mut spec = Self {
            kind,
            ..Self::default()
        };
        if kind != EvalKind::FrozenLinear {
            spec.optimizer.lr = 1e-3;
            spec.steps = 60;
        }
        spec
    }

    pub fn validate(&self, trunk: &Trunk) -> Result<(), EvalError> {
        let d = &self.dataset;
        let bad = |msg: String| Err(EvalError::Config(msg));
        if d.classes == 0 || d.classes > 4 {
            return bad(format!("classes must be in 1..=4, got {}", d.classes));
        }
        if d.train == 0 || d.test == 0 {
            return bad("train and test splits must be non-empty".into());
        }
        let stride = trunk.config.stem_stride;
        if d.image_size < 8 || d.image_size % stride != 0 {
            return bad(format!("image size {} must be >= 8 and divisible by {stride}", d.image_size));
        }
        if self.batch == 0 || self.hidden == 0 {
            return bad("batch and hidden must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        self.optimizer.validate().map_err(EvalError::Config)?;
        if self.kind != EvalKind::DepthRegress && !(1..=d.classes).contains(&self.k) {
            return Err(EvalError::BadK { k: self.k, classes: d.classes });
        }
        Ok(())
    }
}

/// Fails unless `params` holds every trunk parameter with the right shape.
pub fn check_trunk(trunk: &Trunk, params: &ParamStore) -> Result<(), EvalError> {
    let mut reference = ParamStore::new();
    trunk.init(&mut reference, &mut crate::rng::stream(0, "shape-probe", &[]));
    for (name, t) in reference.iter() {
        match params.get(name) {
            None => return Err(EvalError::Checkpoint(format!("missing {name}"))),
            Some(p) if p.shape() != t.shape() => {
                return Err(EvalError::Checkpoint(format!(
                    "{name} has shape {:?}, trunk expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            Some(_) => {}
        }
    }
    Ok(())
}

/// Cells per side of the pooled probe feature.
pub const POOL_GRID: usize = 3;

/// `(kernel, stride, cells)` for max-pooling an `h x h` map onto a
/// `POOL_GRID x POOL_GRID` grid of slightly overlapping windows that cover
/// every pixel. Maps smaller than the grid pool to a single cell.
pub fn pool_geometry(h: usize) -> (usize, usize, usize) {
    if h < POOL_GRID {
        return (h, h, 1);
    }
    let stride = h / POOL_GRID;
    (h - (POOL_GRID - 1) * stride, stride, POOL_GRID)
}

/// Flattened feature length after grid pooling `c` channels of an `h x h` map.
pub fn pooled_len(c: usize, h: usize) -> usize {
    let cells = pool_geometry(h).2;
    c * cells * cells
}

/// Grid max-pool of a `[n, c, h, w]` map, flattened to `[n, c * cells^2]`.
pub(crate) fn grid_max_pool(g: &mut Graph, map: NodeId) -> Result<NodeId, AutodiffError> {
    let &[n, c, h, w] = g.shape(map) else {
        unreachable!("unit outputs are 4-d")
    };
    debug_assert_eq!(h, w);
    let (kernel, stride, _) = pool_geometry(h);
    let pooled = g.apply(Primitive::MaxPool2d { kernel, stride }, &[map])?;
    g.apply(Primitive::Reshape { shape: vec![n, pooled_len(c, h)] }, &[pooled])
}

/// Per-unit trunk outputs for `images`, computed in chunks with the trunk
/// held constant.
pub(crate) fn unit_values(
    trunk: &Trunk,
    params: &ParamStore,
    images: &[&Image],
    precision: Precision,
) -> Result<Vec<Tensor>, EvalError> {
    const CHUNK: usize = 32;
    let mut out: Vec<(Vec<usize>, Vec<f64>)> = Vec::new();
    for chunk in images.chunks(CHUNK) {
        let owned: Vec<Image> = chunk.iter().map(|&im| im.clone()).collect();
        let mut g = Graph::with_precision(precision);
        let mut binds = Bindings::new(params).freeze_prefix(format!("{}.", trunk.prefix()));
        let input = g.constant(stack(&owned));
        let units = trunk.forward(&mut g, &mut binds, input)?;
        if out.is_empty() {
            out = units.0.iter().map(|&u| (g.shape(u).to_vec(), Vec::new())).collect();
        }
        for (slot, &u) in out.iter_mut().zip(&units.0) {
            slot.1.extend_from_slice(g.value(u).data());
        }
    }
    out.into_iter()
        .map(|(mut shape, data)| {
            shape[0] = images.len();
            Tensor::new(shape, data).map_err(EvalError::from)
        })
        .collect()
}

/// Top-1 accuracy and recall@k from `[n, classes]` logits. Ties rank the
/// lower class index first.
pub fn rank_metrics(logits: &Tensor, labels: &[usize], k: usize) -> (f64, f64) {
    let classes = logits.shape()[1];
    let (mut top1, mut topk) = (0usize, 0usize);
    for (row, &label) in logits.data().chunks(classes).zip(labels) {
        let mine = row[label];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > mine || (v == mine && j < label))
            .count();
        top1 += usize::from(rank == 0);
        topk += usize::from(rank < k);
    }
    let n = labels.len() as f64;
    (top1 as f64 / n, topk as f64 / n)
}

/// Early stopping on an exponentially smoothed loss.
#[derive(Clone, Debug)]
pub(crate) struct Plateau {
    patience: usize,
    min_improvement: f64,
    decay: f64,
    smoothed: Option<f64>,
    best: f64,
    since: usize,
}

impl Plateau {
    pub(crate) fn new(patience: usize, min_improvement: f64, decay: f64) -> Self {
        Self {
            patience,
            min_improvement,
            decay,
            smoothed: None,
            best: f64::INFINITY,
            since: 0,
        }
    }

    /// Records a loss and reports whether training should stop.
    pub(crate) fn update(&mut self, loss: f64) -> bool {
        let s = match self.smoothed {
            None => loss,
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
        };
        self.smoothed = Some(s);
        if s < self.best * (1.0 - self.min_improvement) || self.best.is_infinite() {
            self.best = s;
            self.since = 0;
        } else {
            self.since += 1;
        }
        self.patience > 0 && self.since >= self.patience
    }
}

pub(crate) fn check_labels(set: &ClassificationSet, spec: &EvalTaskSpec) -> Result<(), EvalError> {
    if set.classes != spec.dataset.classes {
        return Err(EvalError::ClassMismatch {
            expected: spec.dataset.classes,
            got: set.classes,
        });
    }
    if !(1..=set.classes).contains(&spec.k) {
        return Err(EvalError::BadK { k: spec.k, classes: set.classes });
    }
    if set.train.is_empty() || set.test.is_empty() {
        return Err(EvalError::Config("train and test splits must be non-empty".into()));
    }
    for (_, label) in set.train.iter().chain(&set.test) {
        if *label >= set.classes {
            return Err(EvalError::LabelOutOfRange {
                label: *label,
                classes: set.classes,
            });
        }
    }
    Ok(())
}

/// The map a head sees: the lasso mix of all units or the last unit.
pub(crate) fn feature_map(g: &mut Graph, units: &UnitOutputs, alpha: Option<NodeId>) -> Result<NodeId, EvalError> {
    Ok(match alpha {
        Some(a) => crate::lasso::lasso_combine(g, a, units)?,
        None => units.last(),
    })
}
