use std::collections::BTreeMap;

use super::ops::{self, AttrMap, Primitive};
use super::{AutodiffError, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Arithmetic mode for forward values.
///
/// `Single` rounds every stored value through `f32`. Gradient checks are
/// only meaningful in `Double`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    pub fn bits(self) -> u32 {
        match self {
            Precision::Single => 32,
            Precision::Double => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::Single),
            64 => Some(Precision::Double),
            _ => None,
        }
    }

    fn round(self, mut t: Tensor) -> Tensor {
        if self == Precision::Single {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        t
    }
}

#[derive(Clone, Debug)]
enum Origin {
    Parameter(String),
    Constant,
    Op(Primitive),
}

#[derive(Clone, Debug)]
struct Node {
    origin: Origin,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Append-only computation graph with eager forward evaluation.
///
/// Every node's inputs precede it, so append order is a topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, origin: Origin, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let value = self.precision.round(value);
        self.nodes.push(Node {
            origin,
            inputs,
            value,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A trainable leaf. Gradients are reported for parameters.
    pub fn parameter(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Origin::Parameter(name.into()), Vec::new(), value)
    }

    /// A leaf that receives no gradient report.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Origin::Constant, Vec::new(), value)
    }

    /// Appends a primitive node and evaluates it.
    pub fn apply(&mut self, mut primitive: Primitive, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        if let Some(bad) = inputs.iter().find(|id| id.0 >= self.nodes.len()) {
            return Err(AutodiffError::UnknownNode(bad.0));
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        primitive.resolve(&values);
        let value = ops::forward(&primitive, &values)?;
        Ok(self.push(Origin::Op(primitive), inputs.to_vec(), value))
    }

    /// String-keyed form of [`Graph::apply`].
    pub fn apply_named(&mut self, kind: &str, inputs: &[NodeId], attrs: &AttrMap) -> Result<NodeId, AutodiffError> {
        let primitive = Primitive::from_attrs(kind, attrs)?;
        self.apply(primitive, inputs)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Parameter leaves in creation order.
    pub fn parameters(&self) -> Vec<(&str, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.origin {
                Origin::Parameter(name) => Some((name.as_str(), NodeId(i))),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn set_leaf_value(&mut self, id: NodeId, value: Tensor) {
        debug_assert!(!matches!(self.nodes[id.0].origin, Origin::Op(_)));
        self.nodes[id.0].value = self.precision.round(value);
    }

    /// Re-evaluates every node at or after `from` in append order.
    pub(crate) fn replay_from(&mut self, from: NodeId) -> Result<(), AutodiffError> {
        for i in from.0..self.nodes.len() {
            let Origin::Op(p) = &self.nodes[i].origin else { continue };
            let values: Vec<&Tensor> = self.nodes[i].inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let value = ops::forward(p, &values)?;
            self.nodes[i].value = self.precision.round(value);
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, AutodiffError> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(loss_value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Origin::Op(p) = &node.origin {
                let values: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
                let gins = ops::backward(p, &values, &node.value, &gout)?;
                for (input, g) in node.inputs.iter().zip(gins) {
                    let g = self.precision.round(g);
                    match &mut grads[input.0] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
            }
            grads[i] = Some(gout);
        }
        let mut by_param = BTreeMap::new();
        for (name, id) in self.parameters() {
            let g = grads
                .get(id.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Tensor::zeros(self.shape(id)));
            by_param.insert(id, (name.to_string(), g));
        }
        Ok(Gradients { by_param })
    }
}

/// Gradients of a scalar with respect to every parameter leaf.
///
/// Parameters not on a path to the loss hold exact zeros.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<NodeId, (String, Tensor)>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_param.get(&id).map(|(_, g)| g)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        self.by_param.get_mut(&id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &str, &Tensor)> {
        self.by_param.iter().map(|(id, (n, g))| (*id, n.as_str(), g))
    }

    /// Gradients keyed by parameter name.
    pub fn by_name(&self) -> BTreeMap<String, Tensor> {
        self.by_param.values().map(|(n, g)| (n.clone(), g.clone())).collect()
    }
}
