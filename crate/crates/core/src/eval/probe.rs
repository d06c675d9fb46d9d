use serde::Serialize;

use super::{check_labels, check_trunk, feature_map, grid_max_pool, pooled_len, rank_metrics, unit_values, Plateau};
use super::{ClassificationSet, EvalError, EvalTaskSpec};
use crate::autodiff::{Graph, NodeId, Precision, Primitive, Tensor};
use crate::lasso::{alpha_node, init_row, lasso_penalty_node, normalize_row, beta_name, AlphaRole};
use crate::params::{Bindings, ParamStore};
use crate::rng::stream;
use crate::trainer::OptimizerState;
use crate::trunk::{Trunk, UnitOutputs};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub recall_at_k: f64,
    pub k: usize,
    pub steps: usize,
    pub final_loss: f64,
    /// Learned evaluation lasso coefficients, when lasso is on.
    pub alpha: Option<Vec<f64>>,
}

/// Probe inputs: pooled last-unit features, or every unit map when the
/// probe learns its own lasso row.
enum Features {
    Pooled(Tensor),
    Units(Vec<Tensor>),
}

impl Features {
    fn compute(trunk: &Trunk, params: &ParamStore, images: &[&crate::pretext::Image], lasso: bool, precision: Precision) -> Result<Self, EvalError> {
        let mut units = unit_values(trunk, params, images, precision)?;
        if lasso {
            return Ok(Features::Units(units));
        }
        let last = units.pop().expect("trunk has at least one unit");
        let mut g = Graph::with_precision(precision);
        let x = g.constant(last);
        let pooled = grid_max_pool(&mut g, x)?;
        Ok(Features::Pooled(g.value(pooled).clone()))
    }

    fn len(&self) -> usize {
        match self {
            Features::Pooled(t) => t.shape()[1],
            Features::Units(ts) => pooled_len(ts[0].shape()[1], ts[0].shape()[2]),
        }
    }

    fn node(&self, g: &mut Graph, binds: &mut Bindings, task: &str) -> Result<(NodeId, Option<NodeId>), EvalError> {
        match self {
            Features::Pooled(t) => Ok((g.constant(t.clone()), None)),
            Features::Units(ts) => {
                let units = UnitOutputs(ts.iter().map(|t| g.constant(t.clone())).collect());
                let alpha = alpha_node(g, binds, AlphaRole::Eval, task)?;
                let map = feature_map(g, &units, Some(alpha))?;
                Ok((grid_max_pool(g, map)?, Some(alpha)))
            }
        }
    }
}

fn logits(g: &mut Graph, binds: &mut Bindings, feats: NodeId) -> NodeId {
    let w = binds.node(g, "probe.w");
    let b = binds.node(g, "probe.b");
    let y = g.apply(Primitive::MatMul, &[feats, w]).expect("probe shapes agree");
    g.apply(Primitive::Add, &[y, b]).expect("bias broadcasts")
}

/// Trains a single softmax layer on frozen trunk features and reports
/// test accuracy and recall@k.
///
/// The trunk is only read; with lasso on, an evaluation lasso row is
/// trained alongside the layer.
pub fn frozen_linear_eval(
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
    let task = spec.kind.id();
    let train_images: Vec<_> = set.train.iter().map(|(im, _)| im).collect();
    let test_images: Vec<_> = set.test.iter().map(|(im, _)| im).collect();
    let train = Features::compute(trunk, params, &train_images, spec.lasso, precision)?;
    let test = Features::compute(trunk, params, &test_images, spec.lasso, precision)?;
    let train_labels: Vec<usize> = set.train.iter().map(|(_, l)| *l).collect();
    let test_labels: Vec<usize> = set.test.iter().map(|(_, l)| *l).collect();

    let mut probe = ParamStore::new();
    let mut rng = stream(seed, "eval/probe/init", &[]);
    probe.init_scaled("probe.w", &[train.len(), set.classes], 0.01, &mut rng);
    probe.insert("probe.b", Tensor::zeros(&[set.classes]));
    if spec.lasso {
        init_row(&mut probe, AlphaRole::Eval, task, trunk.config.units, &mut rng);
    }

    let mut opt = OptimizerState::new(spec.optimizer.clone());
    let mut plateau = Plateau::new(spec.patience, spec.min_improvement, 0.0);
    let mut steps = 0;
    let mut final_loss = f64::NAN;
    while steps < spec.steps {
        let mut g = Graph::with_precision(precision);
        let mut binds = Bindings::new(&probe);
        let (feats, alpha) = train.node(&mut g, &mut binds, task)?;
        let z = logits(&mut g, &mut binds, feats);
        let loss = g.apply(Primitive::SoftmaxCrossEntropy { targets: train_labels.clone() }, &[z])?;
        let mut objective = loss;
        if let Some(a) = alpha.filter(|_| spec.lambda > 0.0) {
            let penalty = lasso_penalty_node(&mut g, &[a], spec.lambda)?;
            objective = g.apply(Primitive::Add, &[loss, penalty])?;
        }
        final_loss = g.value(loss).item();
        let grads = g.backward(objective)?.by_name();
        for (name, d) in opt.apply(&grads) {
            probe.add_delta(&name, &d);
        }
        steps += 1;
        if plateau.update(final_loss) {
            break;
        }
    }

    let mut g = Graph::with_precision(precision);
    let mut binds = Bindings::new(&probe);
    let (feats, _) = test.node(&mut g, &mut binds, task)?;
    let z = logits(&mut g, &mut binds, feats);
    let (accuracy, recall_at_k) = rank_metrics(g.value(z), &test_labels, spec.k);
    let alpha = if spec.lasso {
        let beta = probe.get(&beta_name(AlphaRole::Eval, task)).expect("row initialized");
        Some(normalize_row(beta.data()).ok_or_else(|| crate::lasso::LassoError::ZeroRow(task.to_string()))?)
    } else {
        None
    };
    Ok(ClassifyReport {
        accuracy,
        recall_at_k,
        k: spec.k,
        steps,
        final_loss,
        alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{classification_set, DatasetConfig, EvalKind};
    use crate::pretext::Image;
    use crate::trunk::TrunkConfig;
    use rand::Rng;

    fn small_trunk() -> (Trunk, ParamStore) {
        let trunk = Trunk::new(TrunkConfig {
            units: 3,
            width: 6,
            dilated_units: 1,
            ..TrunkConfig::default()
        });
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(4, "init", &[]));
        (trunk, store)
    }

    /// Class 0 is dark, class 1 bright, both with pixel noise.
    fn separable(n: usize, seed: u64) -> Vec<(Image, usize)> {
        let mut rng = stream(seed, "separable", &[]);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { 0.2 } else { 0.7 };
                let data = (0..3 * 16 * 16).map(|_| base + rng.random_range(0.0..0.1)).collect();
                (Image::new(3, 16, 16, data), label)
            })
            .collect()
    }

    fn spec(classes: usize) -> EvalTaskSpec {
        EvalTaskSpec {
            dataset: DatasetConfig {
                image_size: 16,
                classes,
                train: 16,
                test: 16,
                jitter: 0,
            },
            ..EvalTaskSpec::new(EvalKind::FrozenLinear)
        }
    }

    /// Logistic regression on raw pixel means: the data is separable by a
    /// threshold on mean intensity.
    fn raw_pixel_oracle(set: &[(Image, usize)]) -> f64 {
        let correct = set
            .iter()
            .filter(|(im, l)| {
                let mean = im.data.iter().sum::<f64>() / im.data.len() as f64;
                usize::from(mean > 0.5) == *l
            })
            .count();
        correct as f64 / set.len() as f64
    }

    #[test]
    fn random_trunk_separates_easy_data() {
        let (trunk, store) = small_trunk();
        let set = ClassificationSet {
            classes: 2,
            train: separable(16, 1),
            test: separable(16, 2),
        };
        assert_eq!(raw_pixel_oracle(&set.test), 1.0);
        for lasso in [false, true] {
            let s = EvalTaskSpec { lasso, k: 1, ..spec(2) };
            let r = frozen_linear_eval(&trunk, &store, &set, &s, 3, Precision::Double).unwrap();
            assert!(r.accuracy >= 0.9, "lasso {lasso}: {r:?}");
        }
    }

    #[test]
    fn recall_at_class_count_is_total() {
        let (trunk, store) = small_trunk();
        let s = EvalTaskSpec { k: 4, steps: 5, ..spec(4) };
        let set = classification_set(&s.dataset, 2);
        let r = frozen_linear_eval(&trunk, &store, &set, &s, 1, Precision::Double).unwrap();
        assert_eq!(r.recall_at_k, 1.0);
    }

    #[test]
    fn trunk_bytes_untouched_and_alpha_row_normalized() {
        let (trunk, store) = small_trunk();
        let before = store.to_le_bytes();
        let s = EvalTaskSpec { lasso: true, lambda: 1e-2, steps: 10, ..spec(4) };
        let set = classification_set(&s.dataset, 3);
        let r = frozen_linear_eval(&trunk, &store, &set, &s, 1, Precision::Double).unwrap();
        assert_eq!(store.to_le_bytes(), before);
        let alpha = r.alpha.unwrap();
        assert_eq!(alpha.len(), 3);
        let norm = alpha.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mismatches_are_rejected() {
        let (trunk, store) = small_trunk();
        let s = spec(4);
        let set = classification_set(&spec(3).dataset, 1);
        assert!(matches!(
            frozen_linear_eval(&trunk, &store, &set, &s, 0, Precision::Double),
            Err(EvalError::ClassMismatch { .. })
        ));
        let bad_k = EvalTaskSpec { k: 5, ..spec(4) };
        let set = classification_set(&bad_k.dataset, 1);
        assert!(matches!(
            frozen_linear_eval(&trunk, &store, &set, &bad_k, 0, Precision::Double),
            Err(EvalError::BadK { .. })
        ));
        let mut partial = ParamStore::new();
        for (n, t) in store.iter().filter(|(n, _)| !n.contains("u01")) {
            partial.insert(n, t.clone());
        }
        assert!(matches!(
            frozen_linear_eval(&trunk, &partial, &set, &spec(4), 0, Precision::Double),
            Err(EvalError::Checkpoint(_))
        ));
    }
}
