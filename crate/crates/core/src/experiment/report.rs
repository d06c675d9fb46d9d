//! Summary tables and per-checkpoint curves from finished output
//! directories.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::metrics::{read_records, MetricsRecord};
use super::pipeline::{load_config, CONFIG_ECHO, METRICS_FILE};
use super::{io_err, ExperimentConfig, ExperimentError};

pub const REPORT_FILE: &str = "report.md";
pub const CURVES_FILE: &str = "curves.csv";

const CURVE_METRICS: [&str; 7] = [
    "accuracy",
    "recall_at_k",
    "pct_below_1_25",
    "pct_below_1_25_sq",
    "pct_below_1_25_cube",
    "mean_absolute_error",
    "mean_relative_error",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub curves: PathBuf,
}

struct Run {
    cfg: ExperimentConfig,
    records: Vec<MetricsRecord>,
}

fn task_label(cfg: &ExperimentConfig) -> String {
    cfg.tasks
        .iter()
        .map(|t| {
            let id = t.kind.id().to_uppercase();
            if t.harmonized {
                format!("{id}/H")
            } else {
                id
            }
        })
        .collect::<Vec<_>>()
        .join("+")
}

fn fmt_opt(v: Option<f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.*}", digits, v * scale))
}

/// Eval record for `kind` at the latest checkpoint that has one.
fn final_eval<'a>(records: &'a [MetricsRecord], kind: &str) -> Option<&'a MetricsRecord> {
    records
        .iter()
        .filter(|r| r.kind == "eval" && r.get_str("eval") == Some(kind))
        .max_by(|a, b| a.get_f64("checkpoint").unwrap_or(0.0).total_cmp(&b.get_f64("checkpoint").unwrap_or(0.0)))
}

/// Writes a markdown report and a curve CSV for the given output
/// directories into `out`.
pub fn render_report(dirs: &[PathBuf], out: &Path) -> Result<ReportFiles, ExperimentError> {
    if dirs.is_empty() {
        return Err(ExperimentError::Usage("report needs at least one run directory".into()));
    }
    let mut runs = Vec::new();
    for d in dirs {
        let cfg = load_config(&d.join(CONFIG_ECHO))?;
        let path = d.join(METRICS_FILE);
        let records = read_records(&path).map_err(io_err(&path))?;
        runs.push(Run { cfg, records });
    }

    let mut md = String::from("# Results\n\n## Transfer\n\n");
    md.push_str("| experiment | tasks | mode | lasso | frozen acc % | recall@k % | fine-tune acc % | depth <1.25 % | MAE | MRE |\n");
    md.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for run in &runs {
        let x = &run.cfg.experiment;
        let frozen = final_eval(&run.records, "frozen-linear");
        let ft = final_eval(&run.records, "finetune-classify");
        let depth = final_eval(&run.records, "depth-regress");
        let get = |r: Option<&MetricsRecord>, k: &str| r.and_then(|r| r.get_f64(k));
        writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
            x.id,
            task_label(&run.cfg),
            x.mode,
            x.lasso,
            fmt_opt(get(frozen, "accuracy"), 100.0, 1),
            fmt_opt(get(frozen, "recall_at_k"), 100.0, 1),
            fmt_opt(get(ft, "accuracy"), 100.0, 1),
            fmt_opt(get(depth, "pct_below_1_25"), 1.0, 1),
            fmt_opt(get(depth, "mean_absolute_error"), 1.0, 3),
            fmt_opt(get(depth, "mean_relative_error"), 1.0, 3),
        )
        .expect("string write");
    }

    let sparsity: Vec<_> = runs
        .iter()
        .filter_map(|r| r.records.iter().find(|m| m.kind == "sparsity").map(|m| (&r.cfg, m)))
        .collect();
    if !sparsity.is_empty() {
        md.push_str("\n## Lasso sparsity\n\n| experiment | lambda | fraction of |alpha| below threshold | per-unit |alpha| |\n|---|---|---|---|\n");
        for (cfg, m) in sparsity {
            let rows = m.payload.get("rows").and_then(|v| v.as_array()).cloned().unwrap_or_default();
            let per_task: Vec<String> = rows
                .iter()
                .map(|row| {
                    let task = row.get("task").and_then(|t| t.as_str()).unwrap_or("?");
                    let vals: Vec<String> = row
                        .get("abs_alpha")
                        .and_then(|a| a.as_array())
                        .map(|a| a.iter().filter_map(|v| v.as_f64()).map(|v| format!("{v:.2}")).collect())
                        .unwrap_or_default();
                    format!("{task}: {}", vals.join(" "))
                })
                .collect();
            writeln!(
                md,
                "| {} | {} | {} | {} |",
                cfg.experiment.id,
                cfg.experiment.lambda,
                fmt_opt(m.get_f64("fraction_below"), 1.0, 3),
                per_task.join("; ")
            )
            .expect("string write");
        }
    }

    md.push_str("\n## Aggregation\n\n| experiment | mode | task | produced | applied | discarded | max staleness | mean staleness |\n|---|---|---|---|---|---|---|---|\n");
    for run in &runs {
        let Some(m) = run.records.iter().rev().find(|m| m.kind == "staleness") else {
            continue;
        };
        for t in m.payload.get("tasks").and_then(|v| v.as_array()).into_iter().flatten() {
            let num = |k: &str| t.get(k).and_then(|v| v.as_f64()).unwrap_or(0.0);
            writeln!(
                md,
                "| {} | {} | {} | {} | {} | {} | {} | {:.3} |",
                run.cfg.experiment.id,
                m.get_str("mode").unwrap_or("?"),
                t.get("task").and_then(|v| v.as_str()).unwrap_or("?"),
                num("produced"),
                num("applied_packets"),
                num("discarded"),
                num("max"),
                num("mean"),
            )
            .expect("string write");
        }
    }

    let mut csv = String::from("experiment,checkpoint,cost,eval,metric,value\n");
    for run in &runs {
        let mut evals: Vec<&MetricsRecord> = run.records.iter().filter(|r| r.kind == "eval").collect();
        evals.sort_by(|a, b| {
            let key = |r: &MetricsRecord| (r.get_f64("checkpoint").unwrap_or(0.0), r.get_str("eval").unwrap_or("").to_string());
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        for r in evals {
            for metric in CURVE_METRICS {
                if let Some(v) = r.get_f64(metric) {
                    writeln!(
                        csv,
                        "{},{},{},{},{metric},{v}",
                        run.cfg.experiment.id,
                        r.get_f64("checkpoint").unwrap_or(0.0),
                        r.cost,
                        r.get_str("eval").unwrap_or(""),
                    )
                    .expect("string write");
                }
            }
        }
    }

    fs::create_dir_all(out).map_err(io_err(out))?;
    let files = ReportFiles {
        report: out.join(REPORT_FILE),
        curves: out.join(CURVES_FILE),
    };
    fs::write(&files.report, md).map_err(io_err(&files.report))?;
    fs::write(&files.curves, csv).map_err(io_err(&files.curves))?;
    Ok(files)
}
