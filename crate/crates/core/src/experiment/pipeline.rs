use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::metrics::{append_records, MetricsRecord};
use super::{io_err, parse_config, ExperimentConfig, ExperimentError};
use crate::eval::{
    classification_set, depth_set, finetune_classify, finetune_depth, frozen_linear_eval, ClassificationSet, DepthSet,
    EvalKind,
};
use crate::lasso::{AlphaMatrix, AlphaRole};
use crate::trainer::{run_training, staleness_report, Checkpoint, StalenessReport};

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const EVAL_DIR: &str = "eval";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";
/// Present in an output directory while a command is writing to it, and
/// left behind if the command fails.
pub const PARTIAL_MARKER: &str = "PARTIAL";

/// Threshold below which a lasso coefficient counts as switched off.
const SPARSITY_THRESHOLD: f64 = 0.01;

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text).map_err(|source| ExperimentError::Config {
        path: path.to_path_buf(),
        source,
    })
}

struct Partial(PathBuf);

impl Partial {
    fn begin(out: &Path) -> Result<Self, ExperimentError> {
        fs::create_dir_all(out).map_err(io_err(out))?;
        let marker = out.join(PARTIAL_MARKER);
        fs::write(&marker, b"incomplete output\n").map_err(io_err(&marker))?;
        Ok(Self(marker))
    }

    fn finish(self) -> Result<(), ExperimentError> {
        fs::remove_file(&self.0).map_err(io_err(&self.0))
    }
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub applies: u64,
    pub cost: f64,
    pub staleness: StalenessReport,
}

fn staleness_record(cfg: &ExperimentConfig, cost: f64, report: &StalenessReport) -> MetricsRecord {
    MetricsRecord::new(cost, &cfg.experiment.id, "staleness").with_fields(report)
}

/// Runs pre-training and writes checkpoints, the config echo and training
/// metrics under `out`. Existing checkpoints and metrics there are replaced.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainSummary, ExperimentError> {
    let partial = Partial::begin(out)?;
    let id = cfg.experiment.id.as_str();
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    if ckpt_dir.exists() {
        fs::remove_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    }
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let metrics = out.join(METRICS_FILE);
    fs::write(&metrics, b"").map_err(io_err(&metrics))?;
    let echo = out.join(CONFIG_ECHO);
    fs::write(&echo, cfg.to_canonical()).map_err(io_err(&echo))?;

    let plan = cfg.run_plan();
    let task_ids: Vec<String> = plan.model.tasks.iter().map(|t| t.id().to_string()).collect();
    let mut records = Vec::new();
    let run = run_training(&plan, &mut |r| {
        records.push(
            MetricsRecord::new(r.cost, id, "train")
                .with("task", task_ids[r.task].as_str())
                .with("version", r.version)
                .with("packets", r.packets as u64)
                .with("loss", r.mean_loss),
        );
    })?;

    let mut paths = Vec::new();
    for (i, ckpt) in run.checkpoints.iter().enumerate() {
        let name = format!("ckpt-{i:03}.mtss");
        let path = ckpt_dir.join(&name);
        ckpt.write(&path)?;
        records.push(
            MetricsRecord::new(ckpt.cost, id, "checkpoint")
                .with("index", i as u64)
                .with("applies", ckpt.applies)
                .with("file", name),
        );
        paths.push(path);
    }
    // Train records were produced in apply order; interleave checkpoints by cost.
    records.sort_by(|a, b| a.cost.total_cmp(&b.cost));
    let staleness = staleness_report(&run);
    records.push(staleness_record(cfg, run.cost, &staleness));
    let alpha = AlphaMatrix::from_store(&run.params, AlphaRole::Pretrain);
    if !alpha.is_empty() {
        let profile = alpha.sparsity_profile(SPARSITY_THRESHOLD).map_err(crate::eval::EvalError::from)?;
        records.push(
            MetricsRecord::new(run.cost, id, "sparsity")
                .with("lambda", cfg.experiment.lambda)
                .with_fields(&profile),
        );
    }
    append_records(&metrics, &records).map_err(io_err(&metrics))?;
    partial.finish()?;
    Ok(PretrainSummary {
        checkpoints: paths,
        applies: run.applies,
        cost: run.cost,
        staleness,
    })
}

/// Checkpoint files under `out`, in emission order.
pub fn checkpoint_paths(out: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    let dir = out.join(CHECKPOINT_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io_err(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mtss"))
        .collect();
    paths.sort();
    Ok(paths)
}

struct Datasets {
    classify: Option<ClassificationSet>,
    depth: Option<DepthSet>,
}

fn eval_job(
    cfg: &ExperimentConfig,
    data: &Datasets,
    path: &Path,
    index: usize,
    kind: EvalKind,
) -> Result<MetricsRecord, ExperimentError> {
    let ckpt = Checkpoint::read(path)?;
    let trunk = cfg.trunk();
    let spec = cfg.eval_spec(kind);
    let (seed, precision) = (cfg.experiment.seed, cfg.precision());
    let record = MetricsRecord::new(ckpt.cost, &cfg.experiment.id, "eval")
        .with("checkpoint", index as u64)
        .with("eval", kind.id());
    let set = data.classify.as_ref();
    Ok(match kind {
        EvalKind::FrozenLinear => {
            let r = frozen_linear_eval(&trunk, &ckpt.params, set.expect("built"), &spec, seed, precision)?;
            record.with_fields(&r)
        }
        EvalKind::FinetuneClassify => {
            let r = finetune_classify(&trunk, &ckpt.params, set.expect("built"), &spec, seed, precision)?;
            record.with_fields(&r)
        }
        EvalKind::DepthRegress => {
            let depth = data.depth.as_ref().expect("built");
            let r = finetune_depth(&trunk, &ckpt.params, depth, &spec, seed, precision)?;
            record
                .with_fields(&r.metrics)
                .with("steps", r.steps as u64)
                .with("final_loss", r.final_loss)
        }
    })
}

/// Runs the configured evaluation suite on every checkpoint under `out`.
///
/// Each job writes its own file under `eval/`; once all jobs finish their
/// records are appended to the metrics file in checkpoint, then suite,
/// order, so the result does not depend on `parallel`.
pub fn eval_checkpoints(cfg: &ExperimentConfig, out: &Path, parallel: usize) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let paths = checkpoint_paths(out)?;
    if paths.is_empty() {
        return Err(ExperimentError::Usage(format!("no checkpoints in {}", out.join(CHECKPOINT_DIR).display())));
    }
    let partial = Partial::begin(out)?;
    let eval_dir = out.join(EVAL_DIR);
    fs::create_dir_all(&eval_dir).map_err(io_err(&eval_dir))?;
    let suite = &cfg.eval.suite;
    let seed = cfg.experiment.seed;
    let data = Datasets {
        classify: suite
            .iter()
            .any(|k| *k != EvalKind::DepthRegress)
            .then(|| classification_set(&cfg.eval.dataset, seed)),
        depth: suite.contains(&EvalKind::DepthRegress).then(|| depth_set(&cfg.eval.dataset, seed)),
    };
    let jobs: Vec<(usize, &PathBuf, EvalKind)> = paths
        .iter()
        .enumerate()
        .flat_map(|(i, p)| suite.iter().map(move |&k| (i, p, k)))
        .collect();
    let results: Mutex<Vec<Option<Result<MetricsRecord, ExperimentError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let work = || loop {
        let j = next.fetch_add(1, Ordering::Relaxed);
        let Some(&(index, path, kind)) = jobs.get(j) else {
            break;
        };
        let result = eval_job(cfg, &data, path, index, kind).and_then(|rec| {
            let file = eval_dir.join(format!("ckpt-{index:03}.{}.jsonl", kind.id()));
            fs::write(&file, rec.to_line()).map_err(io_err(&file))?;
            Ok(rec)
        });
        results.lock().expect("no panics while held")[j] = Some(result);
    };
    std::thread::scope(|s| {
        for _ in 1..parallel.max(1) {
            s.spawn(work);
        }
        work();
    });
    let mut records = Vec::with_capacity(jobs.len());
    for r in results.into_inner().expect("threads joined") {
        records.push(r.expect("every job ran")?);
    }
    let metrics = out.join(METRICS_FILE);
    append_records(&metrics, &records).map_err(io_err(&metrics))?;
    partial.finish()?;
    Ok(records)
}

/// Runs the schedule simulation only and reports staleness and discards.
pub fn simulate_schedule(cfg: &ExperimentConfig, out: &Path) -> Result<StalenessReport, ExperimentError> {
    let partial = Partial::begin(out)?;
    let run = run_training(&cfg.run_plan(), &mut |_| {})?;
    let report = staleness_report(&run);
    let json = out.join("staleness.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
    fs::write(&json, text).map_err(io_err(&json))?;
    let metrics = out.join(METRICS_FILE);
    append_records(&metrics, &[staleness_record(cfg, run.cost, &report)]).map_err(io_err(&metrics))?;
    partial.finish()?;
    Ok(report)
}
