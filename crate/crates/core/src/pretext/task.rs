//! Task definitions, batch sampling, heads and losses.
//!
//! Every task runs its whole batch through the trunk in one pass. Siamese
//! tasks stack their patches along the batch axis and regroup the features
//! with row slices afterwards.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::color::{lightness_input, preprocess_color_drop, AbQuantizer};
use super::colorization::make_colorization_targets;
use super::exemplar::{exemplar_triplet_batch, AugmentConfig};
use super::motion::{motion_mask, synth_motion_sequence, MotionConfig};
use super::relpos::{sample_relative_position_batch, GridGeometry};
use super::scenes::{render_scene, SceneConfig};
use super::{stack, Image, PretextError};
use crate::autodiff::{AutodiffError, Graph, NodeId, Primitive, Tensor};
use crate::lasso::{alpha_node, lasso_combine, lasso_penalty_node, AlphaRole};
use crate::params::{Bindings, ParamStore};
use crate::trunk::Trunk;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    RelativePosition,
    Colorization,
    Exemplar,
    MotionSegmentation,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::RelativePosition,
        TaskKind::Colorization,
        TaskKind::Exemplar,
        TaskKind::MotionSegmentation,
    ];

    /// Short id used in parameter names, configs and reports.
    pub fn id(self) -> &'static str {
        match self {
            TaskKind::RelativePosition => "rp",
            TaskKind::Colorization => "col",
            TaskKind::Exemplar => "ex",
            TaskKind::MotionSegmentation => "ms",
        }
    }

    /// Simulated cost of one step, proportional to per-epoch GPU-hours
    /// (350 : 90 : 60 : 400) divided by 100.
    pub fn default_step_cost(self) -> f64 {
        match self {
            TaskKind::RelativePosition => 3.5,
            TaskKind::Colorization => 0.9,
            TaskKind::Exemplar => 0.6,
            TaskKind::MotionSegmentation => 4.0,
        }
    }

    fn default_batch(self) -> usize {
        match self {
            TaskKind::RelativePosition => 8,
            TaskKind::Colorization => 4,
            TaskKind::Exemplar => 6,
            TaskKind::MotionSegmentation => 4,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| format!("unknown task `{s}` (expected rp, col, ex or ms)"))
    }
}

/// Image synthesis and patch geometry shared by all tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub image_size: usize,
    pub patch: usize,
    pub grid: usize,
    pub jitter: usize,
    /// Number of source images per exemplar batch.
    pub exemplar_pool: usize,
    pub augment: AugmentConfig,
    pub motion_frames: usize,
    pub motion_objects: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            grid: 3,
            jitter: 1,
            exemplar_pool: 6,
            augment: AugmentConfig::default(),
            motion_frames: 3,
            motion_objects: 2,
        }
    }
}

impl DataConfig {
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            size: self.image_size,
            ..SceneConfig::default()
        }
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            grid: self.grid,
            patch: self.patch,
            jitter: self.jitter,
        }
    }

    pub fn motion(&self) -> MotionConfig {
        let n = self.image_size;
        MotionConfig {
            height: n,
            width: n,
            frames: self.motion_frames,
            random_objects: self.motion_objects,
            min_size: (n / 5).max(1),
            max_size: (n / 3).max(1),
            ..MotionConfig::default()
        }
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            patch: self.patch,
            ..self.augment.clone()
        }
    }
}

/// One pretext task: kind, preprocessing, head sizes and loss settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Feed Lab lightness (replicated to three channels) instead of color.
    #[serde(default)]
    pub harmonized: bool,
    /// Head input is the lasso combination of all units rather than the last.
    #[serde(default)]
    pub lasso: bool,
    pub batch: usize,
    /// Exemplar triplet margin.
    pub margin: f64,
    /// Colorization ab grid bins per axis.
    pub bins: usize,
    /// Colorization label region size in input pixels.
    pub label_stride: usize,
    /// Motion mask downsampling factor.
    pub motion_factor: usize,
    pub head_width: usize,
    pub hidden: usize,
    pub step_cost: f64,
    /// Multiplier on this task's objective.
    pub loss_scale: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            harmonized: false,
            lasso: false,
            batch: kind.default_batch(),
            margin: 0.5,
            bins: 13,
            label_stride: 4,
            motion_factor: 4,
            head_width: 16,
            hidden: 32,
            step_cost: kind.default_step_cost(),
            loss_scale: 1.0,
        }
    }

    pub fn id(&self) -> &'static str {
        self.kind.id()
    }

    pub fn quantizer(&self) -> Result<AbQuantizer, PretextError> {
        AbQuantizer::grid(self.bins)
    }

    fn head_param(&self, name: &str) -> String {
        format!("head.{}.{name}", self.id())
    }

    /// Checks the spec against the data and trunk geometry.
    pub fn validate(&self, data: &DataConfig, trunk: &Trunk) -> Result<(), PretextError> {
        let bad = |msg: String| Err(PretextError::Config(format!("task {}: {msg}", self.id())));
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.loss_scale > 0.0 && self.loss_scale.is_finite()) {
            return bad(format!("loss_scale must be > 0, got {}", self.loss_scale));
        }
        if !(self.step_cost > 0.0 && self.step_cost.is_finite()) {
            return bad(format!("step_cost must be > 0, got {}", self.step_cost));
        }
        if self.head_width == 0 || self.hidden == 0 {
            return bad("head widths must be >= 1".into());
        }
        let stem = trunk.config.stem_stride;
        match self.kind {
            TaskKind::RelativePosition => {
                data.geometry().check_size(data.image_size, data.image_size)?;
            }
            TaskKind::Exemplar if self.margin <= 0.0 => return bad(format!("margin must be > 0, got {}", self.margin)),
            TaskKind::Exemplar if data.exemplar_pool < 2 => return bad("exemplar_pool must be >= 2".into()),
            TaskKind::Colorization | TaskKind::MotionSegmentation => {
                let stride = if self.kind == TaskKind::Colorization {
                    self.label_stride
                } else {
                    self.motion_factor
                };
                if stride == 0 || data.image_size % stride != 0 {
                    return Err(PretextError::Indivisible {
                        extent: data.image_size,
                        by: stride,
                    });
                }
                if stride % stem != 0 || data.image_size % stem != 0 {
                    return bad(format!("label stride {stride} must be a multiple of the stem stride {stem}"));
                }
                if self.kind == TaskKind::Colorization {
                    self.quantizer()?;
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Inputs and labels for one step of one task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskBatch {
    /// `input` holds all first patches, then all second patches.
    RelativePosition { input: Tensor, labels: Vec<usize> },
    /// Lightness input; targets are row-major per image.
    Colorization { input: Tensor, targets: Vec<usize> },
    /// `input` holds anchors, then positives, then negatives.
    Exemplar { input: Tensor },
    MotionSegmentation { input: Tensor, mask: Vec<f64> },
}

impl TaskBatch {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskBatch::RelativePosition { .. } => TaskKind::RelativePosition,
            TaskBatch::Colorization { .. } => TaskKind::Colorization,
            TaskBatch::Exemplar { .. } => TaskKind::Exemplar,
            TaskBatch::MotionSegmentation { .. } => TaskKind::MotionSegmentation,
        }
    }

    pub fn input(&self) -> &Tensor {
        match self {
            TaskBatch::RelativePosition { input, .. }
            | TaskBatch::Colorization { input, .. }
            | TaskBatch::Exemplar { input }
            | TaskBatch::MotionSegmentation { input, .. } => input,
        }
    }
}

fn preprocess(image: &Image, harmonized: bool) -> Result<Image, PretextError> {
    if harmonized {
        lightness_input(image)
    } else {
        Ok(image.clone())
    }
}

/// Draws a fresh batch for `spec` from procedurally generated data.
pub fn sample_task_batch(spec: &TaskSpec, data: &DataConfig, rng: &mut impl Rng) -> Result<TaskBatch, PretextError> {
    let scene = data.scene();
    match spec.kind {
        TaskKind::RelativePosition => {
            let mut first = Vec::with_capacity(spec.batch);
            let mut second = Vec::with_capacity(spec.batch);
            let mut labels = Vec::with_capacity(spec.batch);
            for _ in 0..spec.batch {
                let (image, _) = render_scene(&scene, rng);
                let image = preprocess(&image, spec.harmonized)?;
                let pair = sample_relative_position_batch(&image, data.geometry(), 1, rng)?;
                let (mut a, mut b) = (pair.first[0].clone(), pair.second[0].clone());
                if !spec.harmonized {
                    a = preprocess_color_drop(&a, rng)?.0;
                    b = preprocess_color_drop(&b, rng)?.0;
                }
                first.push(a);
                second.push(b);
                labels.push(pair.labels[0] as usize);
            }
            first.extend(second);
            Ok(TaskBatch::RelativePosition {
                input: stack(&first),
                labels,
            })
        }
        TaskKind::Colorization => {
            let q = spec.quantizer()?;
            let mut inputs = Vec::with_capacity(spec.batch);
            let mut targets = Vec::new();
            for _ in 0..spec.batch {
                let (image, _) = render_scene(&scene, rng);
                targets.extend(make_colorization_targets(&image, spec.label_stride, &q)?.labels);
                inputs.push(lightness_input(&image)?);
            }
            Ok(TaskBatch::Colorization {
                input: stack(&inputs),
                targets,
            })
        }
        TaskKind::Exemplar => {
            let pool = (0..data.exemplar_pool)
                .map(|_| preprocess(&render_scene(&scene, rng).0, spec.harmonized))
                .collect::<Result<Vec<_>, _>>()?;
            let augment = AugmentConfig {
                gray_shift: spec.harmonized,
                ..data.augment()
            };
            let t = exemplar_triplet_batch(&pool, &augment, spec.batch, rng)?;
            let mut all = t.anchor;
            all.extend(t.positive);
            all.extend(t.negative);
            Ok(TaskBatch::Exemplar { input: stack(&all) })
        }
        TaskKind::MotionSegmentation => {
            let cfg = data.motion();
            let mut frames = Vec::with_capacity(spec.batch);
            let mut mask = Vec::new();
            for _ in 0..spec.batch {
                let seq = synth_motion_sequence(&cfg, rng)?;
                let sample = motion_mask(&seq, spec.motion_factor)?;
                mask.extend(sample.mask.iter().map(|&m| f64::from(m)));
                frames.push(preprocess(&sample.frame, spec.harmonized)?);
            }
            Ok(TaskBatch::MotionSegmentation {
                input: stack(&frames),
                mask,
            })
        }
    }
}

/// Creates the head parameters for `spec`.
pub fn init_head(spec: &TaskSpec, data: &DataConfig, trunk: &Trunk, store: &mut ParamStore, rng: &mut impl Rng) {
    let w = trunk.config.width;
    let h = spec.head_width;
    let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    let p = |n: &str| spec.head_param(n);
    match spec.kind {
        TaskKind::RelativePosition => {
            let s = trunk.output_size(data.patch);
            let s2 = (s - 1) / 2 + 1;
            store.init_scaled(p("conv.w"), &[h, w, 3, 3], he(9 * w), rng);
            store.insert(p("conv.b"), Tensor::zeros(&[h, 1, 1]));
            let fan = 2 * h * s2 * s2;
            store.init_scaled(p("fc1.w"), &[fan, spec.hidden], he(fan), rng);
            store.insert(p("fc1.b"), Tensor::zeros(&[spec.hidden]));
            store.init_scaled(p("fc2.w"), &[spec.hidden, 8], (1.0 / spec.hidden as f64).sqrt(), rng);
            store.insert(p("fc2.b"), Tensor::zeros(&[8]));
        }
        TaskKind::Colorization | TaskKind::MotionSegmentation => {
            let (stride, out) = if spec.kind == TaskKind::Colorization {
                (spec.label_stride, spec.bins * spec.bins)
            } else {
                (spec.motion_factor, 1)
            };
            let k = stride / trunk.config.stem_stride;
            store.init_scaled(p("conv1.w"), &[h, w, k, k], he(k * k * w), rng);
            store.insert(p("conv1.b"), Tensor::zeros(&[h, 1, 1]));
            store.init_scaled(p("conv2.w"), &[h, h, 1, 1], he(h), rng);
            store.insert(p("conv2.b"), Tensor::zeros(&[h, 1, 1]));
            store.init_scaled(p("conv3.w"), &[out, h, 1, 1], (1.0 / h as f64).sqrt(), rng);
            store.insert(p("conv3.b"), Tensor::zeros(&[out, 1, 1]));
        }
        TaskKind::Exemplar => {
            store.init_scaled(p("proj.w"), &[w, w, 1, 1], he(w), rng);
            store.insert(p("proj.b"), Tensor::zeros(&[w, 1, 1]));
        }
    }
}

/// `mean(max(D(f1, f2) - D(f1, f3) + margin, 0))` with cosine distance `D`.
/// Embeddings are `[batch, dim]`.
pub fn triplet_loss(g: &mut Graph, f1: NodeId, f2: NodeId, f3: NodeId, margin: f64) -> Result<NodeId, AutodiffError> {
    let d12 = g.apply(Primitive::CosineDistance, &[f1, f2])?;
    let d13 = g.apply(Primitive::CosineDistance, &[f1, f3])?;
    let neg = g.apply(Primitive::Scale(-1.0), &[d13])?;
    let diff = g.apply(Primitive::Add, &[d12, neg])?;
    let m = g.constant(Tensor::scalar(margin));
    let shifted = g.apply(Primitive::Add, &[diff, m])?;
    let hinge = g.apply(Primitive::Relu, &[shifted])?;
    g.apply(Primitive::ReduceMean, &[hinge])
}

/// Graph nodes produced by [`task_loss`].
#[derive(Clone, Copy, Debug)]
pub struct TaskLoss {
    /// `loss_scale * (loss + lambda * |alpha|_1)`: what the optimizer sees.
    pub objective: NodeId,
    /// The unscaled task loss.
    pub loss: NodeId,
    /// Normalized lasso row when the task uses layer combination.
    pub alpha: Option<NodeId>,
}

fn conv_bias(g: &mut Graph, binds: &mut Bindings, spec: &TaskSpec, x: NodeId, name: &str, conv: Primitive) -> Result<NodeId, AutodiffError> {
    let w = binds.node(g, &spec.head_param(&format!("{name}.w")));
    let b = binds.node(g, &spec.head_param(&format!("{name}.b")));
    let y = g.apply(conv, &[x, w])?;
    g.apply(Primitive::Add, &[y, b])
}

fn linear(g: &mut Graph, binds: &mut Bindings, spec: &TaskSpec, x: NodeId, name: &str) -> Result<NodeId, AutodiffError> {
    let w = binds.node(g, &spec.head_param(&format!("{name}.w")));
    let b = binds.node(g, &spec.head_param(&format!("{name}.b")));
    let y = g.apply(Primitive::MatMul, &[x, w])?;
    g.apply(Primitive::Add, &[y, b])
}

fn pointwise() -> Primitive {
    Primitive::Conv2d {
        stride: 1,
        padding: 0,
        dilation: 1,
    }
}

/// Builds trunk, head and loss for one batch and returns the loss nodes.
pub fn task_loss(
    g: &mut Graph,
    binds: &mut Bindings,
    trunk: &Trunk,
    spec: &TaskSpec,
    batch: &TaskBatch,
    lambda: f64,
) -> Result<TaskLoss, PretextError> {
    if batch.kind() != spec.kind {
        return Err(PretextError::KindMismatch {
            expected: spec.kind.id(),
            got: batch.kind().id(),
        });
    }
    let input = g.constant(batch.input().clone());
    let units = trunk.forward(g, binds, input)?;
    let (features, alpha) = if spec.lasso {
        let a = alpha_node(g, binds, AlphaRole::Pretrain, spec.id())?;
        (lasso_combine(g, a, &units)?, Some(a))
    } else {
        (units.last(), None)
    };
    let loss = match batch {
        TaskBatch::RelativePosition { labels, .. } => {
            let n = labels.len();
            let x = conv_bias(
                g,
                binds,
                spec,
                features,
                "conv",
                Primitive::Conv2d {
                    stride: 2,
                    padding: 1,
                    dilation: 1,
                },
            )?;
            let x = g.apply(Primitive::Relu, &[x])?;
            let flat = g.apply(Primitive::Flatten, &[x])?;
            let a = g.apply(Primitive::SliceRows { start: 0, end: n }, &[flat])?;
            let b = g.apply(Primitive::SliceRows { start: n, end: 2 * n }, &[flat])?;
            let pair = g.apply(Primitive::Concat { axis: 1 }, &[a, b])?;
            let hidden = linear(g, binds, spec, pair, "fc1")?;
            let hidden = g.apply(Primitive::Relu, &[hidden])?;
            let logits = linear(g, binds, spec, hidden, "fc2")?;
            g.apply(Primitive::SoftmaxCrossEntropy { targets: labels.clone() }, &[logits])?
        }
        TaskBatch::Colorization { targets, .. } => {
            let logits = dense_head(g, binds, trunk, spec, features, spec.label_stride)?;
            g.apply(Primitive::SoftmaxCrossEntropy { targets: targets.clone() }, &[logits])?
        }
        TaskBatch::MotionSegmentation { mask, .. } => {
            let logits = dense_head(g, binds, trunk, spec, features, spec.motion_factor)?;
            g.apply(Primitive::SigmoidCrossEntropy { targets: mask.clone() }, &[logits])?
        }
        TaskBatch::Exemplar { .. } => {
            let n = g.shape(features)[0] / 3;
            let h = g.apply(Primitive::Relu, &[features])?;
            let h = conv_bias(g, binds, spec, h, "proj", pointwise())?;
            let h = g.apply(Primitive::Add, &[features, h])?;
            let flat = g.apply(Primitive::Flatten, &[h])?;
            let f1 = g.apply(Primitive::SliceRows { start: 0, end: n }, &[flat])?;
            let f2 = g.apply(Primitive::SliceRows { start: n, end: 2 * n }, &[flat])?;
            let f3 = g.apply(Primitive::SliceRows { start: 2 * n, end: 3 * n }, &[flat])?;
            triplet_loss(g, f1, f2, f3, spec.margin)?
        }
    };
    let mut objective = loss;
    if let Some(a) = alpha {
        let penalty = lasso_penalty_node(g, &[a], lambda)?;
        objective = g.apply(Primitive::Add, &[objective, penalty])?;
    }
    if spec.loss_scale != 1.0 {
        objective = g.apply(Primitive::Scale(spec.loss_scale), &[objective])?;
    }
    Ok(TaskLoss { objective, loss, alpha })
}

fn dense_head(
    g: &mut Graph,
    binds: &mut Bindings,
    trunk: &Trunk,
    spec: &TaskSpec,
    features: NodeId,
    stride: usize,
) -> Result<NodeId, AutodiffError> {
    let k = stride / trunk.config.stem_stride;
    let x = conv_bias(
        g,
        binds,
        spec,
        features,
        "conv1",
        Primitive::Conv2d {
            stride: k,
            padding: 0,
            dilation: 1,
        },
    )?;
    let x = g.apply(Primitive::Relu, &[x])?;
    let x = conv_bias(g, binds, spec, x, "conv2", pointwise())?;
    let x = g.apply(Primitive::Relu, &[x])?;
    conv_bias(g, binds, spec, x, "conv3", pointwise())
}
