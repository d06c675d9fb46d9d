//! Experiment configuration: a closed-world TOML schema with defaults
//! filled in at parse time, so the canonical form round-trips.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::Precision;
use crate::eval::{DatasetConfig, EvalKind, EvalTaskSpec};
use crate::lasso::LassoMode;
use crate::pretext::{DataConfig, TaskKind, TaskSpec};
use crate::trainer::{AggregationMode, Model, OptimizerConfig, RunPlan, TaskPlan, TraceConfig};
use crate::trunk::{Trunk, TrunkConfig};

/// Checkpoints a run emits when no interval is configured.
pub const DEFAULT_CHECKPOINTS: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub trunk: TrunkConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskEntry>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    #[serde(default = "default_id")]
    pub id: String,
    pub seed: u64,
    #[serde(default)]
    pub mode: AggregationMode,
    #[serde(default)]
    pub lasso: LassoMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Float width, 32 or 64.
    #[serde(default = "default_precision")]
    pub precision: u32,
}

fn default_id() -> String {
    "experiment".into()
}

fn default_lambda() -> f64 {
    1e-3
}

fn default_precision() -> u32 {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    /// Total task applies.
    pub max_steps: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<f64>,
    /// Simulated cost between checkpoints. Derived when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_interval: Option<f64>,
    pub trace: TraceConfig,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            max_steps: 200,
            budget: None,
            checkpoint_interval: None,
            trace: TraceConfig::default(),
        }
    }
}

/// One `[[task]]` table. Unset fields take the kind's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub kind: TaskKind,
    #[serde(default)]
    pub harmonized: bool,
    /// Overrides the experiment-wide pre-training lasso setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lasso: Option<bool>,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion_factor: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

fn one() -> usize {
    1
}

impl TaskEntry {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            harmonized: false,
            lasso: None,
            workers: 1,
            quota: None,
            step_cost: None,
            batch: None,
            loss_scale: None,
            margin: None,
            bins: None,
            label_stride: None,
            motion_factor: None,
            head_width: None,
            hidden: None,
        }
    }

    /// Replaces every unset field with its default.
    fn fill(&mut self, lasso: LassoMode) {
        let d = TaskSpec::new(self.kind);
        self.lasso.get_or_insert(lasso.pretrain());
        self.quota.get_or_insert(self.workers);
        self.step_cost.get_or_insert(d.step_cost);
        self.batch.get_or_insert(d.batch);
        self.loss_scale.get_or_insert(d.loss_scale);
        self.margin.get_or_insert(d.margin);
        self.bins.get_or_insert(d.bins);
        self.label_stride.get_or_insert(d.label_stride);
        self.motion_factor.get_or_insert(d.motion_factor);
        self.head_width.get_or_insert(d.head_width);
        self.hidden.get_or_insert(d.hidden);
    }

    pub fn spec(&self, lasso: LassoMode) -> TaskSpec {
        let d = TaskSpec::new(self.kind);
        TaskSpec {
            kind: self.kind,
            harmonized: self.harmonized,
            lasso: self.lasso.unwrap_or(lasso.pretrain()),
            batch: self.batch.unwrap_or(d.batch),
            margin: self.margin.unwrap_or(d.margin),
            bins: self.bins.unwrap_or(d.bins),
            label_stride: self.label_stride.unwrap_or(d.label_stride),
            motion_factor: self.motion_factor.unwrap_or(d.motion_factor),
            head_width: self.head_width.unwrap_or(d.head_width),
            hidden: self.hidden.unwrap_or(d.hidden),
            step_cost: self.step_cost.unwrap_or(d.step_cost),
            loss_scale: self.loss_scale.unwrap_or(d.loss_scale),
        }
    }

    pub fn plan(&self) -> TaskPlan {
        TaskPlan {
            workers: self.workers,
            quota: self.quota,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub suite: Vec<EvalKind>,
    pub dataset: DatasetConfig,
    pub k: usize,
    pub probe_steps: usize,
    pub probe_lr: f64,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
    pub batch: usize,
    pub patience: usize,
    pub depth_hidden: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let probe = EvalTaskSpec::new(EvalKind::FrozenLinear);
        let ft = EvalTaskSpec::new(EvalKind::FinetuneClassify);
        Self {
            suite: EvalKind::ALL.to_vec(),
            dataset: DatasetConfig::default(),
            k: probe.k,
            probe_steps: probe.steps,
            probe_lr: probe.optimizer.lr,
            finetune_steps: ft.steps,
            finetune_lr: ft.optimizer.lr,
            batch: ft.batch,
            patience: ft.patience,
            depth_hidden: ft.hidden,
        }
    }
}

/// A config problem, with the 1-based line it was found on when known.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of the first `key = ...` assignment, for semantic errors.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key).is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
}

/// Parses, fills defaults and validates.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        message: e.message().to_string(),
    })?;
    cfg.normalize();
    cfg.validate().map_err(|(key, message)| ConfigError {
        line: key.and_then(|k| line_of_key(text, k)),
        message,
    })?;
    Ok(cfg)
}

impl ExperimentConfig {
    /// A config with defaults everywhere and the given tasks.
    pub fn new(id: &str, seed: u64, kinds: &[TaskKind]) -> Self {
        let mut cfg = Self {
            experiment: ExperimentSection {
                id: id.into(),
                seed,
                mode: AggregationMode::default(),
                lasso: LassoMode::default(),
                lambda: default_lambda(),
                precision: default_precision(),
            },
            trunk: TrunkConfig::default(),
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleSection::default(),
            data: DataConfig::default(),
            tasks: kinds.iter().map(|&k| TaskEntry::new(k)).collect(),
            eval: EvalSection::default(),
        };
        cfg.normalize();
        cfg
    }

    /// Fills every derived default. Parsing does this already.
    pub fn normalize(&mut self) {
        let lasso = self.experiment.lasso;
        for t in &mut self.tasks {
            t.fill(lasso);
        }
        if self.schedule.checkpoint_interval.is_none() {
            self.schedule.checkpoint_interval = Some(self.default_interval());
        }
    }

    /// Cost interval giving about [`DEFAULT_CHECKPOINTS`] checkpoints over
    /// the run.
    fn default_interval(&self) -> f64 {
        let mean_cost = if self.tasks.is_empty() {
            1.0
        } else {
            self.tasks.iter().map(|t| t.spec(self.experiment.lasso).step_cost).sum::<f64>() / self.tasks.len() as f64
        };
        let total = self.schedule.budget.unwrap_or(self.schedule.max_steps as f64 * mean_cost);
        if total > 0.0 {
            total / DEFAULT_CHECKPOINTS
        } else {
            1.0
        }
    }

    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.experiment.precision).expect("validated precision")
    }

    pub fn trunk(&self) -> Trunk {
        Trunk::new(self.trunk.clone())
    }

    pub fn model(&self) -> Model {
        Model {
            trunk: self.trunk(),
            data: self.data.clone(),
            tasks: self.tasks.iter().map(|t| t.spec(self.experiment.lasso)).collect(),
            lambda: self.experiment.lambda,
            precision: self.precision(),
        }
    }

    pub fn run_plan(&self) -> RunPlan {
        RunPlan {
            model: self.model(),
            optimizer: self.optimizer.clone(),
            mode: self.experiment.mode,
            plans: self.tasks.iter().map(TaskEntry::plan).collect(),
            trace: self.schedule.trace.clone(),
            seed: self.experiment.seed,
            max_steps: self.schedule.max_steps,
            budget: self.schedule.budget,
            checkpoint_interval: self.schedule.checkpoint_interval.unwrap_or_else(|| self.default_interval()),
        }
    }

    pub fn eval_spec(&self, kind: EvalKind) -> EvalTaskSpec {
        let e = &self.eval;
        let mut spec = EvalTaskSpec::new(kind);
        spec.dataset = e.dataset.clone();
        spec.lasso = self.experiment.lasso.eval();
        spec.lambda = if spec.lasso { self.experiment.lambda } else { 0.0 };
        spec.k = e.k;
        spec.batch = e.batch;
        spec.patience = e.patience;
        spec.hidden = e.depth_hidden;
        if kind == EvalKind::FrozenLinear {
            spec.steps = e.probe_steps;
            spec.optimizer.lr = e.probe_lr;
        } else {
            spec.steps = e.finetune_steps;
            spec.optimizer.lr = e.finetune_lr;
        }
        spec
    }

    /// Semantic checks; errors name the offending key when there is one.
    fn validate(&self) -> Result<(), (Option<&'static str>, String)> {
        let x = &self.experiment;
        if x.id.is_empty() || !x.id.chars().all(|c| c.is_ascii_alphanumeric() || "-_+.".contains(c)) {
            return Err((Some("id"), format!("id `{}` must be non-empty [A-Za-z0-9-_+.]", x.id)));
        }
        if Precision::from_bits(x.precision).is_none() {
            return Err((Some("precision"), format!("precision must be 32 or 64, got {}", x.precision)));
        }
        if self.tasks.is_empty() {
            return Err((None, "at least one [[task]] is required".into()));
        }
        for t in &self.tasks {
            if t.workers == 0 {
                return Err((Some("workers"), format!("task {}: workers must be >= 1", t.kind.id())));
            }
            if t.quota.is_some_and(|q| q == 0 || q > t.workers) {
                return Err((Some("quota"), format!("task {}: quota must be in 1..={}", t.kind.id(), t.workers)));
            }
        }
        if self.schedule.checkpoint_interval.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err((Some("checkpoint_interval"), "checkpoint_interval must be > 0".into()));
        }
        if self.schedule.budget.is_some_and(|b| !(b >= 0.0 && b.is_finite())) {
            return Err((Some("budget"), "budget must be >= 0".into()));
        }
        let plan = self.run_plan();
        if let Err(e) = plan.validate() {
            let key = match e.to_string() {
                s if s.contains("lambda") => Some("lambda"),
                s if s.contains("rho") => Some("rho"),
                s if s.contains("lr") => Some("lr"),
                s if s.contains("eps") => Some("eps"),
                s if s.contains("latenc") => Some("latency"),
                s if s.contains("batch") => Some("batch"),
                s if s.contains("stride") => Some("label_stride"),
                _ => None,
            };
            return Err((key, e.to_string()));
        }
        if self.eval.suite.is_empty() {
            return Err((Some("suite"), "eval suite must name at least one evaluation".into()));
        }
        for &kind in &self.eval.suite {
            if let Err(e) = self.eval_spec(kind).validate(&self.trunk()) {
                return Err((None, format!("eval {kind}: {e}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[experiment]\nid = \"rp\"\nseed = 7\n\n[[task]]\nkind = \"relative-position\"\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.experiment.seed, 7);
        assert_eq!(cfg.experiment.mode, AggregationMode::Hybrid);
        assert_eq!(cfg.tasks[0].step_cost, Some(3.5));
        assert_eq!(cfg.tasks[0].quota, Some(1));
        assert_eq!(cfg.tasks[0].lasso, Some(false));
        // 200 steps at cost 3.5 over 8 checkpoints.
        assert_eq!(cfg.schedule.checkpoint_interval, Some(87.5));
        assert_eq!(cfg, ExperimentConfig::new("rp", 7, &[TaskKind::RelativePosition]));
        let canonical = cfg.to_canonical();
        assert!(canonical.contains("step_cost = 3.5"), "{canonical}");
    }

    #[test]
    fn canonical_form_round_trips() {
        let text = "[experiment]\nid = \"all\"\nseed = 3\nmode = \"sync\"\nlasso = \"both\"\nlambda = 0.01\n\n\
                    [schedule]\nmax_steps = 12\nbudget = 40.0\ntrace = { kind = \"random\", min = 1, max = 3 }\n\n\
                    [[task]]\nkind = \"relative-position\"\nharmonized = true\nworkers = 2\nquota = 1\n\n\
                    [[task]]\nkind = \"colorization\"\nlasso = false\n";
        let a = parse_config(text).unwrap();
        let b = parse_config(&a.to_canonical()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_canonical(), b.to_canonical());
        assert_eq!(a.schedule.checkpoint_interval, Some(5.0));
        let model = a.model();
        assert!(model.tasks[0].lasso && !model.tasks[1].lasso);
        assert!(a.eval_spec(EvalKind::FrozenLinear).lasso);
    }

    #[test]
    fn unknown_key_names_its_line() {
        let text = "[experiment]\nseed = 1\nfoo = 2\n\n[[task]]\nkind = \"colorization\"\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.line, Some(3), "{err}");
        assert!(err.message.contains("foo"), "{err}");
    }

    #[test]
    fn missing_seed_is_an_error() {
        let err = parse_config("[experiment]\nid = \"x\"\n\n[[task]]\nkind = \"colorization\"\n").unwrap_err();
        assert!(err.message.contains("seed"), "{err}");
        assert!(err.line.is_some());
    }

    #[test]
    fn range_errors_name_the_key_line() {
        let text = "[experiment]\nseed = 1\n\n[optimizer]\nrho = 1.5\n\n[[task]]\nkind = \"colorization\"\n";
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.line, Some(5), "{err}");
        let text = "[experiment]\nseed = 1\nprecision = 16\n\n[[task]]\nkind = \"colorization\"\n";
        assert_eq!(parse_config(text).unwrap_err().line, Some(3));
        let text = "[experiment]\nseed = 1\n\n[[task]]\nkind = \"colorization\"\nworkers = 2\nquota = 3\n";
        assert_eq!(parse_config(text).unwrap_err().line, Some(7));
        let err = parse_config("[experiment]\nseed = 1\n").unwrap_err();
        assert!(err.message.contains("task"), "{err}");
    }

    #[test]
    fn every_experiment_family_is_expressible() {
        use TaskKind::*;
        let families: &[&[TaskKind]] = &[
            &[RelativePosition],
            &[Colorization],
            &[Exemplar],
            &[MotionSegmentation],
            &[RelativePosition, Colorization],
            &[RelativePosition, Exemplar],
            &[RelativePosition, MotionSegmentation],
            &[RelativePosition, Colorization, Exemplar],
            &[RelativePosition, Colorization, Exemplar, MotionSegmentation],
        ];
        for kinds in families {
            let cfg = ExperimentConfig::new("family", 1, kinds);
            assert_eq!(parse_config(&cfg.to_canonical()).unwrap(), cfg);
        }
        let mut harmonized = ExperimentConfig::new("rp-h", 1, &[RelativePosition, Colorization]);
        harmonized.tasks[0].harmonized = true;
        assert_eq!(parse_config(&harmonized.to_canonical()).unwrap(), harmonized);
        for mode in LassoMode::ALL {
            let mut cfg = ExperimentConfig::new("lasso", 1, &[RelativePosition]);
            cfg.experiment.lasso = mode;
            cfg.tasks[0].lasso = None;
            cfg.normalize();
            let back = parse_config(&cfg.to_canonical()).unwrap();
            assert_eq!(back.model().tasks[0].lasso, mode.pretrain());
            assert_eq!(back.eval_spec(EvalKind::FrozenLinear).lasso, mode.eval());
        }
    }
}
