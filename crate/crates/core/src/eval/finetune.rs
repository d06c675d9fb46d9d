use rand::Rng;
use serde::Serialize;

use super::{check_labels, check_trunk, depth_metrics, downsample_depth, feature_map, grid_max_pool, pooled_len, rank_metrics, random_shift, translate};
use super::{ClassificationSet, ClassifyReport, DepthMetricsReport, DepthSet, EvalError, EvalTaskSpec, Plateau};
use crate::autodiff::{Graph, NodeId, Precision, Primitive, Tensor};
use crate::lasso::{alpha_node, beta_name, init_row, lasso_penalty_node, normalize_row, AlphaRole};
use crate::params::{Bindings, ParamStore};
use crate::pretext::{stack, Image};
use crate::rng::{stream, StreamRng};
use crate::trainer::OptimizerState;
use crate::trunk::Trunk;

/// Smallest depth passed to the metrics; the head is unconstrained.
const MIN_DEPTH: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthReport {
    pub metrics: DepthMetricsReport,
    pub steps: usize,
    pub final_loss: f64,
    /// Per-image prediction shape.
    pub output_shape: Vec<usize>,
    /// Per-image target shape.
    pub label_shape: Vec<usize>,
}

/// Backbone features for a batch: trunk, optional eval lasso mix, and the
/// penalty node when it applies.
fn backbone(
    g: &mut Graph,
    binds: &mut Bindings,
    trunk: &Trunk,
    spec: &EvalTaskSpec,
    images: &[Image],
) -> Result<(NodeId, Option<NodeId>), EvalError> {
    let input = g.constant(stack(images));
    let units = trunk.forward(g, binds, input)?;
    let alpha = if spec.lasso {
        Some(alpha_node(g, binds, AlphaRole::Eval, spec.kind.id())?)
    } else {
        None
    };
    let map = feature_map(g, &units, alpha)?;
    let penalty = match alpha {
        Some(a) if spec.lambda > 0.0 => Some(lasso_penalty_node(g, &[a], spec.lambda)?),
        _ => None,
    };
    Ok((map, penalty))
}

fn with_penalty(g: &mut Graph, loss: NodeId, penalty: Option<NodeId>) -> Result<NodeId, EvalError> {
    Ok(match penalty {
        Some(p) => g.apply(Primitive::Add, &[loss, p])?,
        None => loss,
    })
}

/// Runs up to `spec.steps` RMSProp steps on every parameter the step
/// closure touches. Returns the step count and last loss.
fn train(
    store: &mut ParamStore,
    spec: &EvalTaskSpec,
    seed: u64,
    precision: Precision,
    mut step: impl FnMut(&mut Graph, &mut Bindings, &mut StreamRng) -> Result<(NodeId, NodeId), EvalError>,
) -> Result<(usize, f64), EvalError> {
    let mut opt = OptimizerState::new(spec.optimizer.clone());
    let mut plateau = Plateau::new(spec.patience, spec.min_improvement, 0.9);
    let mut last = f64::NAN;
    for k in 0..spec.steps {
        let grads = {
            let mut g = Graph::with_precision(precision);
            let mut binds = Bindings::new(store);
            let mut rng = stream(seed, "eval/finetune/batch", &[k as u64]);
            let (objective, loss) = step(&mut g, &mut binds, &mut rng)?;
            last = g.value(loss).item();
            g.backward(objective)?.by_name()
        };
        for (name, d) in opt.apply(&grads) {
            store.add_delta(&name, &d);
        }
        if plateau.update(last) {
            return Ok((k + 1, last));
        }
    }
    Ok((spec.steps, last))
}

fn eval_alpha(store: &ParamStore, spec: &EvalTaskSpec) -> Option<Vec<f64>> {
    spec.lasso
        .then(|| store.get(&beta_name(AlphaRole::Eval, spec.kind.id())))
        .flatten()
        .and_then(|b| normalize_row(b.data()))
}

/// Fine-tunes trunk and a new linear head on shape classification.
pub fn finetune_classify(
    trunk: &Trunk,
    params: &ParamStore,
    set: &ClassificationSet,
    spec: &EvalTaskSpec,
    seed: u64,
    precision: Precision,
) -> Result<ClassifyReport, EvalError> {
    spec.validate(trunk)?;
    check_labels(set, spec)?;
    check_trunk(trunk, params)?;
    let mut store = params.clone();
    let mut rng = stream(seed, "eval/finetune/init", &[]);
    let map_size = trunk.output_size(set.train[0].0.height);
    let features = pooled_len(trunk.config.width, map_size);
    store.init_scaled("eval.classify.w", &[features, set.classes], 0.01, &mut rng);
    store.insert("eval.classify.b", Tensor::zeros(&[set.classes]));
    if spec.lasso {
        init_row(&mut store, AlphaRole::Eval, spec.kind.id(), trunk.config.units, &mut rng);
    }
    let head = |g: &mut Graph, binds: &mut Bindings, map: NodeId| -> Result<NodeId, EvalError> {
        let pooled = grid_max_pool(g, map)?;
        let w = binds.node(g, "eval.classify.w");
        let b = binds.node(g, "eval.classify.b");
        let y = g.apply(Primitive::MatMul, &[pooled, w])?;
        Ok(g.apply(Primitive::Add, &[y, b])?)
    };

    let n = set.train.len();
    let (steps, final_loss) = train(&mut store, spec, seed, precision, |g, binds, rng| {
        let mut images = Vec::with_capacity(spec.batch);
        let mut labels = Vec::with_capacity(spec.batch);
        for _ in 0..spec.batch {
            let (im, label) = &set.train[rng.random_range(0..n)];
            let (dy, dx) = random_shift(spec.dataset.jitter, rng);
            images.push(translate(im, dy, dx));
            labels.push(*label);
        }
        let (map, penalty) = backbone(g, binds, trunk, spec, &images)?;
        let z = head(g, binds, map)?;
        let loss = g.apply(Primitive::SoftmaxCrossEntropy { targets: labels }, &[z])?;
        Ok((with_penalty(g, loss, penalty)?, loss))
    })?;

    let mut logits = Vec::new();
    for chunk in set.test.chunks(32) {
        let images: Vec<Image> = chunk.iter().map(|(im, _)| im.clone()).collect();
        let mut g = Graph::with_precision(precision);
        let mut binds = Bindings::new(&store);
        let (map, _) = backbone(&mut g, &mut binds, trunk, spec, &images)?;
        let z = head(&mut g, &mut binds, map)?;
        logits.extend_from_slice(g.value(z).data());
    }
    let logits = Tensor::new(vec![set.test.len(), set.classes], logits)?;
    let labels: Vec<usize> = set.test.iter().map(|(_, l)| *l).collect();
    let (accuracy, recall_at_k) = rank_metrics(&logits, &labels, spec.k);
    Ok(ClassifyReport {
        accuracy,
        recall_at_k,
        k: spec.k,
        steps,
        final_loss,
        alpha: eval_alpha(&store, spec),
    })
}

/// Fine-tunes trunk and a small convolutional head to regress depth at the
/// trunk's output resolution under the reverse Huber loss.
pub fn finetune_depth(
    trunk: &Trunk,
    params: &ParamStore,
    set: &DepthSet,
    spec: &EvalTaskSpec,
    seed: u64,
    precision: Precision,
) -> Result<DepthReport, EvalError> {
    spec.validate(trunk)?;
    check_trunk(trunk, params)?;
    if set.train.is_empty() || set.test.is_empty() {
        return Err(EvalError::Config("train and test splits must be non-empty".into()));
    }
    let size = spec.dataset.image_size;
    let factor = trunk.config.stem_stride;
    let out = trunk.output_size(size);
    for (im, depth) in set.train.iter().chain(&set.test) {
        if im.height != size || im.width != size || depth.len() != size * size {
            return Err(EvalError::ShapeMismatch {
                expected: size * size,
                got: depth.len(),
            });
        }
    }
    let targets = |d: &[f64]| downsample_depth(d, size, factor);
    let mean_depth = {
        let all: Vec<f64> = set.train.iter().flat_map(|(_, d)| targets(d)).collect();
        all.iter().sum::<f64>() / all.len() as f64
    };

    let mut store = params.clone();
    let mut rng = stream(seed, "eval/finetune/init", &[]);
    let (w, h) = (trunk.config.width, spec.hidden);
    store.init_scaled("eval.depth.conv1.w", &[h, w, 3, 3], (2.0 / (9 * w) as f64).sqrt(), &mut rng);
    store.insert("eval.depth.conv1.b", Tensor::zeros(&[h, 1, 1]));
    store.init_scaled("eval.depth.conv2.w", &[1, h, 1, 1], 0.01, &mut rng);
    store.insert("eval.depth.conv2.b", Tensor::filled(&[1, 1, 1], mean_depth));
    if spec.lasso {
        init_row(&mut store, AlphaRole::Eval, spec.kind.id(), trunk.config.units, &mut rng);
    }
    let head = |g: &mut Graph, binds: &mut Bindings, map: NodeId| -> Result<NodeId, EvalError> {
        let n = g.shape(map)[0];
        let mut x = map;
        for (layer, padding) in [("conv1", 1), ("conv2", 0)] {
            let wt = binds.node(g, &format!("eval.depth.{layer}.w"));
            let b = binds.node(g, &format!("eval.depth.{layer}.b"));
            let conv = Primitive::Conv2d {
                stride: 1,
                padding,
                dilation: 1,
            };
            x = g.apply(conv, &[x, wt])?;
            x = g.apply(Primitive::Add, &[x, b])?;
            if layer == "conv1" {
                x = g.apply(Primitive::Relu, &[x])?;
            }
        }
        Ok(g.apply(Primitive::Reshape { shape: vec![n, out * out] }, &[x])?)
    };

    let n = set.train.len();
    let (steps, final_loss) = train(&mut store, spec, seed, precision, |g, binds, rng| {
        let mut images = Vec::with_capacity(spec.batch);
        let mut neg_target = Vec::with_capacity(spec.batch * out * out);
        for _ in 0..spec.batch {
            let (im, depth) = &set.train[rng.random_range(0..n)];
            let (dy, dx) = random_shift(spec.dataset.jitter, rng);
            images.push(translate(im, dy, dx));
            let moved = translate(&Image::new(1, size, size, depth.clone()), dy, dx);
            neg_target.extend(targets(&moved.data).into_iter().map(|v| -v));
        }
        let (map, penalty) = backbone(g, binds, trunk, spec, &images)?;
        let pred = head(g, binds, map)?;
        let neg = g.constant(Tensor::new(vec![spec.batch, out * out], neg_target)?);
        let diff = g.apply(Primitive::Add, &[pred, neg])?;
        let elem = g.apply(Primitive::ReverseHuber { threshold: None }, &[diff])?;
        let loss = g.apply(Primitive::ReduceMean, &[elem])?;
        Ok((with_penalty(g, loss, penalty)?, loss))
    })?;

    let (mut gt, mut pred) = (Vec::new(), Vec::new());
    let mut output_shape = Vec::new();
    for chunk in set.test.chunks(32) {
        let images: Vec<Image> = chunk.iter().map(|(im, _)| im.clone()).collect();
        let mut g = Graph::with_precision(precision);
        let mut binds = Bindings::new(&store);
        let (map, _) = backbone(&mut g, &mut binds, trunk, spec, &images)?;
        let p = head(&mut g, &mut binds, map)?;
        let side = (g.shape(p)[1] as f64).sqrt() as usize;
        output_shape = vec![side, side];
        pred.extend(g.value(p).data().iter().map(|&v| v.max(MIN_DEPTH)));
        for (_, d) in chunk {
            gt.extend(targets(d));
        }
    }
    Ok(DepthReport {
        metrics: depth_metrics(&gt, &pred)?,
        steps,
        final_loss,
        output_shape,
        label_shape: vec![out, out],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{classification_set, depth_set, DatasetConfig, EvalKind};
    use crate::trunk::TrunkConfig;

    fn setup() -> (Trunk, ParamStore, DatasetConfig) {
        let trunk = Trunk::new(TrunkConfig {
            units: 2,
            width: 4,
            dilated_units: 1,
            ..TrunkConfig::default()
        });
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(8, "init", &[]));
        let data = DatasetConfig {
            image_size: 16,
            classes: 4,
            train: 8,
            test: 8,
            jitter: 1,
        };
        (trunk, store, data)
    }

    #[test]
    fn zero_steps_reports_the_initial_model() {
        let (trunk, store, dataset) = setup();
        let set = classification_set(&dataset, 1);
        let spec = EvalTaskSpec {
            dataset,
            steps: 0,
            ..EvalTaskSpec::new(EvalKind::FinetuneClassify)
        };
        let a = finetune_classify(&trunk, &store, &set, &spec, 5, Precision::Double).unwrap();
        let b = finetune_classify(&trunk, &store, &set, &spec, 5, Precision::Double).unwrap();
        assert_eq!(a.steps, 0);
        assert!(a.final_loss.is_nan());
        assert_eq!((a.accuracy, a.recall_at_k), (b.accuracy, b.recall_at_k));
    }

    #[test]
    fn finetune_changes_trunk_copy_only() {
        let (trunk, store, dataset) = setup();
        let before = store.to_le_bytes();
        let set = classification_set(&dataset, 1);
        let spec = EvalTaskSpec {
            dataset,
            steps: 3,
            patience: 0,
            lasso: true,
            ..EvalTaskSpec::new(EvalKind::FinetuneClassify)
        };
        let r = finetune_classify(&trunk, &store, &set, &spec, 5, Precision::Double).unwrap();
        assert_eq!(r.steps, 3);
        assert!(r.final_loss.is_finite());
        assert_eq!(store.to_le_bytes(), before);
        let norm: f64 = r.alpha.unwrap().iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn depth_output_matches_label_shape() {
        let (trunk, store, dataset) = setup();
        let set = depth_set(&dataset, 2);
        let spec = EvalTaskSpec {
            dataset,
            steps: 4,
            ..EvalTaskSpec::new(EvalKind::DepthRegress)
        };
        let r = finetune_depth(&trunk, &store, &set, &spec, 1, Precision::Double).unwrap();
        assert_eq!(r.output_shape, r.label_shape);
        assert_eq!(r.label_shape, vec![8, 8]);
        assert!(r.metrics.is_monotone());
        assert!(r.metrics.mean_absolute_error >= 0.0 && r.final_loss.is_finite());
    }
}
