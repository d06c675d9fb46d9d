//! Residual trunk producing one output per unit.
//!
//! Each unit is a pre-activation residual block,
//! `x + conv2(relu(conv1(relu(x))))`, so every unit output has the shape
//! of the stem output.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Graph, NodeId, Primitive};
use crate::params::{Bindings, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrunkConfig {
    /// Number of residual units (M).
    pub units: usize,
    /// Channel width shared by the stem and every unit.
    pub width: usize,
    pub in_channels: usize,
    pub stem_stride: usize,
    /// The last `dilated_units` units use dilation-2 convolutions.
    pub dilated_units: usize,
    /// Init scale of each unit's second convolution relative to He init.
    pub residual_scale: f64,
}

impl Default for TrunkConfig {
    fn default() -> Self {
        Self {
            units: 8,
            width: 8,
            in_channels: 3,
            stem_stride: 2,
            dilated_units: 4,
            residual_scale: 0.5,
        }
    }
}

/// `Unit_1 .. Unit_M`, all with identical shape.
#[derive(Clone, Debug)]
pub struct UnitOutputs(pub Vec<NodeId>);

impl UnitOutputs {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The final unit, which is the full trunk output.
    pub fn last(&self) -> NodeId {
        *self.0.last().expect("trunk has at least one unit")
    }
}

pub fn stem_weight(prefix: &str) -> String {
    format!("{prefix}.stem.w")
}

pub fn unit_param(prefix: &str, unit: usize, conv: usize, which: &str) -> String {
    format!("{prefix}.u{unit:02}.conv{conv}.{which}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub config: TrunkConfig,
    prefix: String,
}

impl Trunk {
    pub fn new(config: TrunkConfig) -> Self {
        Self {
            config,
            prefix: "trunk".into(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    fn dilation(&self, unit: usize) -> usize {
        if unit + self.config.dilated_units >= self.config.units {
            2
        } else {
            1
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.config;
        let p = &self.prefix;
        store.init_scaled(stem_weight(p), &[c.width, c.in_channels, 3, 3], (2.0 / (9 * c.in_channels) as f64).sqrt(), rng);
        store.insert(format!("{p}.stem.b"), crate::autodiff::Tensor::zeros(&[c.width, 1, 1]));
        let he = (2.0 / (9 * c.width) as f64).sqrt();
        for u in 0..c.units {
            for conv in 1..=2 {
                let std = if conv == 2 { he * c.residual_scale } else { he };
                store.init_scaled(unit_param(p, u, conv, "w"), &[c.width, c.width, 3, 3], std, rng);
                store.insert(unit_param(p, u, conv, "b"), crate::autodiff::Tensor::zeros(&[c.width, 1, 1]));
            }
        }
    }

    /// Spatial extent of the unit outputs for a `size`-pixel input.
    pub fn output_size(&self, size: usize) -> usize {
        (size - 1) / self.config.stem_stride + 1
    }

    pub fn forward(&self, g: &mut Graph, binds: &mut Bindings, input: NodeId) -> Result<UnitOutputs, AutodiffError> {
        let c = &self.config;
        let shape = g.shape(input);
        if shape.len() != 4 || shape[1] != c.in_channels {
            return Err(AutodiffError::ShapeMismatch {
                primitive: "trunk",
                detail: format!("input {shape:?} must be [n, {}, h, w]", c.in_channels),
            });
        }
        let p = self.prefix.clone();
        let w = binds.node(g, &stem_weight(&p));
        let b = binds.node(g, &format!("{p}.stem.b"));
        let stem = g.apply(
            Primitive::Conv2d {
                stride: c.stem_stride,
                padding: 1,
                dilation: 1,
            },
            &[input, w],
        )?;
        let mut x = g.apply(Primitive::Add, &[stem, b])?;
        let mut outputs = Vec::with_capacity(c.units);
        for u in 0..c.units {
            let d = self.dilation(u);
            let conv = Primitive::Conv2d {
                stride: 1,
                padding: d,
                dilation: d,
            };
            let mut h = g.apply(Primitive::Relu, &[x])?;
            for k in 1..=2 {
                let w = binds.node(g, &unit_param(&p, u, k, "w"));
                let b = binds.node(g, &unit_param(&p, u, k, "b"));
                h = g.apply(conv.clone(), &[h, w])?;
                h = g.apply(Primitive::Add, &[h, b])?;
                if k == 1 {
                    h = g.apply(Primitive::Relu, &[h])?;
                }
            }
            x = g.apply(Primitive::Add, &[x, h])?;
            outputs.push(x);
        }
        Ok(UnitOutputs(outputs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::rng::stream;

    fn small() -> TrunkConfig {
        TrunkConfig {
            units: 4,
            width: 3,
            dilated_units: 2,
            ..TrunkConfig::default()
        }
    }

    fn input(g: &mut Graph) -> NodeId {
        let data = (0..2 * 3 * 8 * 8).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
        g.constant(Tensor::new(vec![2, 3, 8, 8], data).unwrap())
    }

    fn run(trunk: &Trunk, store: &ParamStore) -> (Graph, UnitOutputs) {
        let mut g = Graph::new();
        let x = input(&mut g);
        let mut b = Bindings::new(store);
        let units = trunk.forward(&mut g, &mut b, x).unwrap();
        (g, units)
    }

    #[test]
    fn all_units_share_shape() {
        let trunk = Trunk::new(small());
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(1, "trunk", &[]));
        let (g, units) = run(&trunk, &store);
        assert_eq!(units.len(), 4);
        for &u in &units.0 {
            assert_eq!(g.shape(u), &[2, 3, 4, 4]);
            assert!(g.value(u).is_finite());
        }
    }

    #[test]
    fn zero_residual_branches_are_identity() {
        let trunk = Trunk::new(small());
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(1, "trunk", &[]));
        for u in 0..4 {
            for which in ["w", "b"] {
                let name = unit_param("trunk", u, 2, which);
                let shape = store.get(&name).unwrap().shape().to_vec();
                store.insert(name, Tensor::zeros(&shape));
            }
        }
        let (g, units) = run(&trunk, &store);
        let first = g.value(units.0[0]).clone();
        for &u in &units.0 {
            assert_eq!(g.value(u), &first);
        }
    }

    #[test]
    fn single_unit_output_is_trunk_output() {
        let trunk = Trunk::new(TrunkConfig { units: 1, dilated_units: 0, ..small() });
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(2, "trunk", &[]));
        let (_, units) = run(&trunk, &store);
        assert_eq!(units.len(), 1);
        assert_eq!(units.0[0], units.last());
    }

    #[test]
    fn perturbing_unit_k_changes_only_later_units() {
        let trunk = Trunk::new(small());
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(3, "trunk", &[]));
        let (g0, u0) = run(&trunk, &store);
        for k in 0..4 {
            let mut perturbed = store.clone();
            let name = unit_param("trunk", k, 1, "b");
            perturbed.get_mut(&name).unwrap().data_mut()[0] += 0.25;
            let (g1, u1) = run(&trunk, &perturbed);
            for j in 0..4 {
                let same = g0.value(u0.0[j]) == g1.value(u1.0[j]);
                assert_eq!(same, j < k, "unit {j} after perturbing unit {k}");
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let trunk = Trunk::new(small());
        let mut store = ParamStore::new();
        trunk.init(&mut store, &mut stream(1, "trunk", &[]));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(trunk.forward(&mut g, &mut Bindings::new(&store), x).is_err());
    }
}
