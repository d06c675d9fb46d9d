//! Per-task sparse linear combination of trunk unit outputs.
//!
//! Each task owns an unconstrained row `beta`; the coefficients fed to the
//! head are `alpha = beta / ||beta||`, so every row has unit L2 norm at
//! every step. An L1 penalty on `alpha` encourages sparsity.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, NodeId, Primitive, Tensor};
use crate::params::{Bindings, ParamStore};
use crate::trunk::UnitOutputs;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LassoError {
    #[error("alpha row has {row} entries but the trunk has {units} units")]
    LengthMismatch { row: usize, units: usize },
    #[error("lasso penalty weight must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("alpha row for task `{0}` is all zeros")]
    ZeroRow(String),
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

/// Where layer combination is used.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LassoMode {
    #[default]
    None,
    EvalOnly,
    PretrainOnly,
    Both,
}

impl LassoMode {
    pub const ALL: [LassoMode; 4] = [LassoMode::None, LassoMode::EvalOnly, LassoMode::PretrainOnly, LassoMode::Both];

    pub fn pretrain(self) -> bool {
        matches!(self, LassoMode::PretrainOnly | LassoMode::Both)
    }

    pub fn eval(self) -> bool {
        matches!(self, LassoMode::EvalOnly | LassoMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            LassoMode::None => "none",
            LassoMode::EvalOnly => "eval-only",
            LassoMode::PretrainOnly => "pretrain-only",
            LassoMode::Both => "both",
        }
    }
}

impl fmt::Display for LassoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LassoMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LassoMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown lasso mode `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AlphaRole {
    Pretrain,
    Eval,
}

impl AlphaRole {
    pub fn name(self) -> &'static str {
        match self {
            AlphaRole::Pretrain => "pretrain",
            AlphaRole::Eval => "eval",
        }
    }
}

pub fn beta_name(role: AlphaRole, task: &str) -> String {
    format!("lasso.{}.{task}", role.name())
}

/// Adds a `beta ~ U(-1, 1)` row for `task`.
pub fn init_row(store: &mut ParamStore, role: AlphaRole, task: &str, units: usize, rng: &mut impl Rng) {
    let row: Vec<f64> = (0..units).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.insert(beta_name(role, task), Tensor::from_vec(row));
}

/// Row-normalized coefficients for `task` as a graph node.
pub fn alpha_node(g: &mut Graph, binds: &mut Bindings, role: AlphaRole, task: &str) -> Result<NodeId, LassoError> {
    let beta = binds.node(g, &beta_name(role, task));
    g.apply(Primitive::L2Normalize, &[beta]).map_err(|e| match e {
        AutodiffError::ZeroNorm { .. } => LassoError::ZeroRow(task.to_string()),
        other => other.into(),
    })
}

/// `sum_m alpha[m] * Unit_m`.
pub fn lasso_combine(g: &mut Graph, alpha: NodeId, units: &UnitOutputs) -> Result<NodeId, LassoError> {
    let m = units.len();
    let row = g.value(alpha).len();
    if row != m {
        return Err(LassoError::LengthMismatch { row, units: m });
    }
    let shape = g.shape(units.0[0]).to_vec();
    let numel: usize = shape.iter().product();
    let mut rows = Vec::with_capacity(m);
    for &u in &units.0 {
        rows.push(g.apply(Primitive::Reshape { shape: vec![1, numel] }, &[u])?);
    }
    let stacked = g.apply(Primitive::Concat { axis: 0 }, &rows)?;
    let coeffs = g.apply(Primitive::Reshape { shape: vec![1, m] }, &[alpha])?;
    let mixed = g.apply(Primitive::MatMul, &[coeffs, stacked])?;
    Ok(g.apply(Primitive::Reshape { shape }, &[mixed])?)
}

/// `lambda * sum |alpha|` over the given rows, as a graph node.
pub fn lasso_penalty_node(g: &mut Graph, alphas: &[NodeId], lambda: f64) -> Result<NodeId, LassoError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(LassoError::NegativeLambda(lambda));
    }
    let mut total: Option<NodeId> = None;
    for &a in alphas {
        let abs = g.apply(Primitive::Abs, &[a])?;
        let sum = g.apply(Primitive::ReduceSum, &[abs])?;
        total = Some(match total {
            Some(t) => g.apply(Primitive::Add, &[t, sum])?,
            None => sum,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok(g.apply(Primitive::Scale(lambda), &[total])?)
}

/// Row-normalizes a vector.
pub fn normalize_row(beta: &[f64]) -> Option<Vec<f64>> {
    let n = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    (n > 0.0).then(|| beta.iter().map(|v| v / n).collect())
}

/// Coefficient matrix for one role: one row per task, one column per unit.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatrix {
    pub role: AlphaRole,
    pub tasks: Vec<String>,
    pub beta: Vec<Vec<f64>>,
}

impl AlphaMatrix {
    /// Collects every `lasso.<role>.*` row from the store, in name order.
    pub fn from_store(store: &ParamStore, role: AlphaRole) -> Self {
        let prefix = format!("lasso.{}.", role.name());
        let mut tasks = Vec::new();
        let mut beta = Vec::new();
        for (name, t) in store.with_prefix(&prefix) {
            tasks.push(name[prefix.len()..].to_string());
            beta.push(t.data().to_vec());
        }
        Self { role, tasks, beta }
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// The constrained coefficients.
    pub fn alpha(&self) -> Result<Vec<Vec<f64>>, LassoError> {
        self.beta
            .iter()
            .zip(&self.tasks)
            .map(|(b, t)| normalize_row(b).ok_or_else(|| LassoError::ZeroRow(t.clone())))
            .collect()
    }

    pub fn row_norms(&self) -> Result<Vec<f64>, LassoError> {
        Ok(self
            .alpha()?
            .iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }

    pub fn penalty(&self, lambda: f64) -> Result<f64, LassoError> {
        if lambda < 0.0 || lambda.is_nan() {
            return Err(LassoError::NegativeLambda(lambda));
        }
        Ok(lambda * self.alpha()?.iter().flatten().map(|v| v.abs()).sum::<f64>())
    }

    /// `|alpha|` per task, shallowest unit first.
    pub fn sparsity_profile(&self, threshold: f64) -> Result<SparsityProfile, LassoError> {
        let alpha = self.alpha()?;
        let rows: Vec<SparsityRow> = alpha
            .iter()
            .zip(&self.tasks)
            .map(|(row, task)| {
                let abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
                let below = abs.iter().filter(|&&v| v < threshold).count();
                SparsityRow {
                    task: task.clone(),
                    fraction_below: below as f64 / abs.len() as f64,
                    abs_alpha: abs,
                }
            })
            .collect();
        let total: usize = rows.iter().map(|r| r.abs_alpha.len()).sum();
        let below: usize = rows
            .iter()
            .map(|r| r.abs_alpha.iter().filter(|&&v| v < threshold).count())
            .sum();
        Ok(SparsityProfile {
            threshold,
            fraction_below: if total == 0 { 0.0 } else { below as f64 / total as f64 },
            rows,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityRow {
    pub task: String,
    pub abs_alpha: Vec<f64>,
    pub fraction_below: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SparsityProfile {
    pub threshold: f64,
    pub rows: Vec<SparsityRow>,
    /// Fraction of all entries (every task) below the threshold.
    pub fraction_below: f64,
}

impl SparsityProfile {
    /// `(task-id, unit-index, abs-alpha)` triples for the metrics log.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, f64)> {
        self.rows
            .iter()
            .flat_map(|r| r.abs_alpha.iter().enumerate().map(move |(i, &a)| (r.task.as_str(), i, a)))
    }
}
