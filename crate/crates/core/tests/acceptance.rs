//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting, so `cargo test --test acceptance -- --nocapture`
//! doubles as a scorecard.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mtss_core::autodiff::probes::probe_graph;
use mtss_core::autodiff::{grad_check, Precision, PrimitiveKind, Tensor};
use mtss_core::eval::{classification_set, depth_metrics, frozen_linear_eval, DepthMetricsReport, EvalKind};
use mtss_core::experiment::{eval_checkpoints, grad_check_tasks, pretrain, ExperimentConfig, METRICS_FILE};
use mtss_core::lasso::{beta_name, AlphaRole, LassoMode};
use mtss_core::params::ParamStore;
use mtss_core::pretext::color::{lightness_input, AbQuantizer};
use mtss_core::pretext::motion::{motion_mask, synth_motion_sequence, MotionConfig};
use mtss_core::pretext::relpos::{sample_relative_position_batch, GridGeometry};
use mtss_core::pretext::scenes::{render_scene, SceneConfig};
use mtss_core::pretext::{sample_task_batch, DataConfig, TaskBatch, TaskKind, TaskSpec};
use mtss_core::rng::stream;
use mtss_core::trainer::{
    batch_rng, run_training, staleness_report, worker_compute, AggregationMode, Checkpoint, Model, OptimizerConfig,
    RunPlan, TaskPlan, TraceConfig,
};
use mtss_core::trunk::{Trunk, TrunkConfig};
use rand::Rng;

fn verdict(n: u32, pass: bool, detail: impl std::fmt::Display) -> bool {
    println!("criterion {n}: {} | {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn toy_model(kinds: &[TaskKind], units: usize, lasso: bool, lambda: f64) -> Model {
    Model {
        trunk: Trunk::new(TrunkConfig {
            units,
            width: 4,
            dilated_units: 1,
            ..TrunkConfig::default()
        }),
        data: DataConfig {
            image_size: 16,
            patch: 4,
            jitter: 0,
            exemplar_pool: 3,
            ..DataConfig::default()
        },
        tasks: kinds
            .iter()
            .map(|&k| TaskSpec {
                lasso,
                batch: 2,
                bins: 3,
                head_width: 4,
                hidden: 4,
                ..TaskSpec::new(k)
            })
            .collect(),
        lambda,
        precision: Precision::Double,
    }
}

type Deltas = BTreeMap<String, Tensor>;

/// Single-threaded ground truth written independently of the trainer: tasks
/// take turns in order and each gradient goes straight through RMSProp.
/// `hook` sees the step, task, deltas and the parameters after the update.
fn serial_oracle(
    model: &Model,
    opt: &OptimizerConfig,
    seed: u64,
    steps: usize,
    mut hook: impl FnMut(usize, usize, &Deltas, &ParamStore),
) -> ParamStore {
    let n = model.tasks.len();
    let mut store = model.init_params(seed);
    let mut mean_square: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); n];
    let mut counters = vec![0u64; n];
    for step in 0..steps {
        let task = step % n;
        let spec = &model.tasks[task];
        let k = counters[task];
        counters[task] += 1;
        let batch = sample_task_batch(spec, &model.data, &mut batch_rng(seed, spec.id(), k)).unwrap();
        let grads = worker_compute(model, &store, task, &batch, 0, 0, k).unwrap().grads;
        let mut deltas = Deltas::new();
        for (name, g) in &grads {
            let s = mean_square[task].entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let mut d = Tensor::zeros(g.shape());
            for ((sv, &gv), dv) in s.iter_mut().zip(g.data()).zip(d.data_mut()) {
                *sv = opt.rho * *sv + (1.0 - opt.rho) * gv * gv;
                let denom = sv.sqrt() + opt.eps;
                *dv = if denom == 0.0 { 0.0 } else { -opt.lr * gv / denom };
            }
            let p = store.get_mut(name).unwrap();
            for (pv, dv) in p.data_mut().iter_mut().zip(d.data()) {
                *pv += dv;
            }
            deltas.insert(name.clone(), d);
        }
        hook(step, task, &deltas, &store);
    }
    store
}

#[test]
fn criterion_1_gradient_integrity() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for kind in PrimitiveKind::ALL {
        for trial in 0..4 {
            let (mut g, loss) = probe_graph(kind, &mut stream(1, kind.name(), &[trial]));
            let r = grad_check(&mut g, loss, 1e-6, 1e-5).unwrap();
            worst = worst.max(r.max_relative_error);
            if !r.pass {
                failures.push(format!("{kind} trial {trial}: {:.2e}", r.max_relative_error));
            }
        }
    }
    for lasso in [LassoMode::None, LassoMode::PretrainOnly] {
        let mut cfg = ExperimentConfig::new("c1", 3, &TaskKind::ALL);
        cfg.experiment.lasso = lasso;
        cfg.tasks.iter_mut().for_each(|t| t.lasso = None);
        cfg.normalize();
        for r in grad_check_tasks(&cfg).unwrap() {
            worst = worst.max(r.report.max_relative_error);
            if !r.report.pass {
                failures.push(format!("task {} lasso {}: {:.2e}", r.task, r.lasso, r.report.max_relative_error));
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && elapsed < Duration::from_secs(120);
    assert!(verdict(
        1,
        pass,
        format!(
            "{} primitives x 4 probes + 4 task losses x lasso on/off, max rel err {worst:.2e} < 1e-5, {:.1}s < 120s {failures:?}",
            PrimitiveKind::ALL.len(),
            elapsed.as_secs_f64()
        )
    ));
}

#[test]
fn criterion_2_protocol_equivalence() {
    let start = Instant::now();
    let model = toy_model(&TaskKind::ALL, 3, true, 1e-3);
    let opt = OptimizerConfig::default();
    let steps = 200;
    let mut oracle = Vec::new();
    let oracle_final = serial_oracle(&model, &opt, 21, steps, |_, task, d, _| oracle.push((task, d.clone())));
    let plan = RunPlan {
        model: model.clone(),
        optimizer: opt,
        mode: AggregationMode::Hybrid,
        plans: vec![TaskPlan { workers: 1, quota: Some(1) }; 4],
        trace: TraceConfig::RoundRobin { latency: 1 },
        seed: 21,
        max_steps: steps as u64,
        budget: None,
        checkpoint_interval: 50.0,
    };
    let mut sim = Vec::new();
    let run = run_training(&plan, &mut |r| sim.push((r.task, r.deltas.clone()))).unwrap();

    let mut max_rel = 0.0f64;
    let mut bitwise = sim.len() == oracle.len();
    for ((ta, da), (tb, db)) in sim.iter().zip(&oracle) {
        bitwise &= ta == tb && da.keys().eq(db.keys());
        for (a, b) in da.values().zip(db.values()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                bitwise &= x.to_bits() == y.to_bits();
                max_rel = max_rel.max((x - y).abs() / y.abs().max(f64::MIN_POSITIVE));
            }
        }
    }
    let params_equal = run.params.to_le_bytes() == oracle_final.to_le_bytes();
    let elapsed = start.elapsed();
    let pass = (bitwise || max_rel <= 1e-12) && params_equal && elapsed < Duration::from_secs(60);
    assert!(verdict(
        2,
        pass,
        format!(
            "{} applies, all 4 tasks, bitwise {bitwise}, final params equal {params_equal}, max rel {max_rel:.1e}, {:.1}s < 60s",
            sim.len(),
            elapsed.as_secs_f64()
        )
    ));
}

#[test]
fn criterion_3_rmsprop_loss_scale_invariance() {
    let opt = OptimizerConfig {
        eps: 0.0,
        ..OptimizerConfig::default()
    };
    let base_model = toy_model(&TaskKind::ALL, 2, false, 0.0);
    let steps = 100;
    let mut base = Vec::new();
    serial_oracle(&base_model, &opt, 5, steps, |_, _, d, _| base.push(d.clone()));
    let mut worst = 0.0f64;
    let mut worst_tensor = 0.0f64;
    let mut zero_mismatch = 0usize;
    for task in 0..4 {
        for c in [0.1, 10.0] {
            let mut model = base_model.clone();
            model.tasks[task].loss_scale = c;
            let mut i = 0;
            serial_oracle(&model, &opt, 5, steps, |_, _, d, _| {
                for (a, b) in d.values().zip(base[i].values()) {
                    let diff: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                    let norm: f64 = b.data().iter().map(|y| y * y).sum();
                    if norm > 0.0 {
                        worst_tensor = worst_tensor.max((diff / norm).sqrt());
                    }
                    for (&x, &y) in a.data().iter().zip(b.data()) {
                        if y == 0.0 {
                            zero_mismatch += usize::from(x != 0.0);
                        } else {
                            worst = worst.max((x - y).abs() / y.abs());
                        }
                    }
                }
                i += 1;
            });
        }
    }
    let pass = worst <= 1e-12 && zero_mismatch == 0;
    assert!(verdict(
        3,
        pass,
        format!("eps=0, c in {{0.1, 10}} on each of 4 tasks, {steps} steps: max elementwise rel delta change {worst:.2e} <= 1e-12, zero mismatches {zero_mismatch} (per-tensor norm rel {worst_tensor:.2e})")
    ));
}

#[test]
fn criterion_4_staleness_contract() {
    let model = toy_model(&[TaskKind::Colorization, TaskKind::Exemplar], 2, false, 0.0);
    let plan = |mode, quota| RunPlan {
        model: model.clone(),
        optimizer: OptimizerConfig::default(),
        mode,
        plans: vec![TaskPlan { workers: 2, quota: Some(quota) }, TaskPlan { workers: 1, quota: None }],
        // Task 0 has a fast and a slow worker; task 1 one medium worker.
        trace: TraceConfig::Fixed { latencies: vec![1, 5, 2] },
        seed: 8,
        max_steps: 24,
        budget: None,
        checkpoint_interval: 10.0,
    };
    let run = |mode, quota| {
        let r = run_training(&plan(mode, quota), &mut |_| {}).unwrap();
        assert!(r.conserved);
        staleness_report(&r)
    };
    let asynchronous = run(AggregationMode::Async, 1).max_staleness();
    let hybrid = [1, 2].map(|q| {
        let r = run(AggregationMode::Hybrid, q);
        (r.max_staleness(), r.tasks.iter().all(|t| t.histogram.iter().all(|&(s, _)| s == 0)))
    });
    let sync_discards = run(AggregationMode::Sync, 1).discarded();
    let pass = asynchronous >= 1 && hybrid.iter().all(|&(m, only_zero)| m == 0 && only_zero) && sync_discards >= 1;
    assert!(verdict(
        4,
        pass,
        format!(
            "async max staleness {asynchronous} >= 1; hybrid max staleness (quota 1, 2) {:?} == 0; sync-with-backup discards {sync_discards} >= 1",
            hybrid.map(|h| h.0)
        )
    ));
}

#[test]
fn criterion_5_lasso_behavior() {
    // At larger learning rates RMSProp moves each coefficient by about lr
    // per step, so entries rattle around zero instead of settling below 0.01.
    let opt = OptimizerConfig {
        lr: 3e-3,
        ..OptimizerConfig::default()
    };
    let lambdas = [0.0, 1e-3, 1e-2];
    let mut medians = Vec::new();
    let mut worst_norm = 0.0f64;
    for &lambda in &lambdas {
        let mut fractions = Vec::new();
        for seed in 0..3 {
            let model = toy_model(&TaskKind::ALL, 8, true, lambda);
            let rows: Vec<String> = model.tasks.iter().map(|t| beta_name(AlphaRole::Pretrain, t.id())).collect();
            // Normalize each row here rather than through the lasso module.
            let alphas = |store: &ParamStore| -> Vec<Vec<f64>> {
                rows.iter()
                    .map(|r| {
                        let beta = store.get(r).unwrap().data();
                        let norm = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
                        beta.iter().map(|b| b / norm).collect()
                    })
                    .collect()
            };
            let final_store = serial_oracle(&model, &opt, seed, 1200, |_, _, _, store| {
                for a in alphas(store) {
                    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                    worst_norm = worst_norm.max((norm - 1.0).abs());
                }
            });
            let all: Vec<f64> = alphas(&final_store).concat();
            fractions.push(all.iter().filter(|a| a.abs() < 0.01).count() as f64 / all.len() as f64);
        }
        medians.push(median(fractions));
    }
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    let pass = monotone && worst_norm <= 1e-9;
    assert!(verdict(
        5,
        pass,
        format!(
            "median fraction |alpha|<0.01 over 3 seeds for lambda {lambdas:?}: {medians:?} non-decreasing {monotone}; max | ||alpha_row|| - 1 | = {worst_norm:.1e} <= 1e-9"
        )
    ));
}

#[test]
fn criterion_6_multi_task_transfer_direction() {
    use TaskKind::*;
    let start = Instant::now();
    let families: [(&str, &[TaskKind]); 6] = [
        ("rp", &[RelativePosition]),
        ("col", &[Colorization]),
        ("ex", &[Exemplar]),
        ("ms", &[MotionSegmentation]),
        ("rp+col", &[RelativePosition, Colorization]),
        ("all", &[RelativePosition, Colorization, Exemplar, MotionSegmentation]),
    ];
    let seeds = 0..5u64;
    let mut med = BTreeMap::new();
    for (name, kinds) in families {
        let mut accs = Vec::new();
        for seed in seeds.clone() {
            let mut cfg = ExperimentConfig::new(name, seed, kinds);
            cfg.schedule.max_steps = 480;
            cfg.normalize();
            let run = run_training(&cfg.run_plan(), &mut |_| {}).unwrap();
            let spec = cfg.eval_spec(EvalKind::FrozenLinear);
            let set = classification_set(&spec.dataset, 1000 + seed);
            let r = frozen_linear_eval(&cfg.trunk(), &run.params, &set, &spec, seed, Precision::Double).unwrap();
            accs.push(100.0 * r.accuracy);
        }
        med.insert(name, median(accs));
    }
    let best_single = ["rp", "col", "ex", "ms"].iter().map(|k| med[k]).fold(f64::MIN, f64::max);
    let pair_ok = med["rp+col"] >= med["rp"];
    let all_ok = med["all"] >= best_single - 0.5;
    let elapsed = start.elapsed();
    let pass = pair_ok && all_ok && elapsed < Duration::from_secs(30 * 60);
    assert!(verdict(
        6,
        pass,
        format!(
            "median frozen-linear accuracy % over 5 seeds {med:?}; RP+Col >= RP {pair_ok}; all >= best single ({best_single:.2}) - 0.5 {all_ok}; {:.0}s < 1800s",
            elapsed.as_secs_f64()
        )
    ));
}

/// Scalar reference for the depth metrics.
fn brute_force_depth(gt: &[f64], pred: &[f64]) -> DepthMetricsReport {
    let n = gt.len();
    let mut counts = [0usize; 3];
    let (mut abs, mut rel) = (0.0, 0.0);
    for i in 0..n {
        let r = if gt[i] / pred[i] > pred[i] / gt[i] {
            gt[i] / pred[i]
        } else {
            pred[i] / gt[i]
        };
        if r < 1.25 {
            counts[0] += 1;
        }
        if r < 1.5625 {
            counts[1] += 1;
        }
        if r < 1.953125 {
            counts[2] += 1;
        }
        abs += (pred[i] - gt[i]).abs();
        rel += (pred[i] - gt[i]).abs() / gt[i];
    }
    DepthMetricsReport {
        pct_below_1_25: 100.0 * counts[0] as f64 / n as f64,
        pct_below_1_25_sq: 100.0 * counts[1] as f64 / n as f64,
        pct_below_1_25_cube: 100.0 * counts[2] as f64 / n as f64,
        mean_absolute_error: abs / n as f64,
        mean_relative_error: rel / n as f64,
    }
}

#[test]
fn criterion_7_metric_oracles() {
    let mut exact = 0;
    let mut monotone = true;
    let mut rng = stream(7, "depth maps", &[]);
    for _ in 0..100 {
        let gt: Vec<f64> = (0..100).map(|_| rng.random_range(0.5..10.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|d| d * rng.random_range(0.4..2.5)).collect();
        let r = depth_metrics(&gt, &pred).unwrap();
        exact += usize::from(r == brute_force_depth(&gt, &pred));
        monotone &= r.pct_below_1_25 <= r.pct_below_1_25_sq && r.pct_below_1_25_sq <= r.pct_below_1_25_cube;
    }
    let w = depth_metrics(&[1.0, 2.0, 4.0], &[1.0, 2.6, 4.0]).unwrap();
    let worked = (w.pct_below_1_25 - 66.67).abs() < 0.005
        && w.pct_below_1_25_sq == 100.0
        && w.pct_below_1_25_cube == 100.0
        && (w.mean_absolute_error - 0.2).abs() < 1e-12
        && (w.mean_relative_error - 0.1).abs() < 1e-12;
    let pass = exact == 100 && worked && monotone;
    assert!(verdict(
        7,
        pass,
        format!(
            "brute force exact on {exact}/100 random 10x10 maps; worked example ({:.2}, {}, {}, {:.3}, {:.3}) ok {worked}; monotone {monotone}",
            w.pct_below_1_25, w.pct_below_1_25_sq, w.pct_below_1_25_cube, w.mean_absolute_error, w.mean_relative_error
        )
    ));
}

#[test]
fn criterion_8_pipeline_oracles() {
    // Bin centers quantize back to themselves.
    let q = AbQuantizer::grid(13).unwrap();
    let centers_ok = (0..q.classes()).all(|i| {
        let [a, b] = q.bin_center(i);
        q.quantize(a, b) == i
    });

    // Relative position encoding, written out here by hand.
    let encoding: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1)];
    let code = |from: (usize, usize), to: (usize, usize)| {
        let d = (to.0 as i64 - from.0 as i64, to.1 as i64 - from.1 as i64);
        encoding.iter().position(|&e| e == d).map(|p| p as u8)
    };
    let mut pairs = 0;
    let mut swap_ok = true;
    for i in 0..100u64 {
        let (image, _) = render_scene(&SceneConfig::default(), &mut stream(8, "rp scene", &[i]));
        let batch = sample_relative_position_batch(&image, GridGeometry::default(), 100, &mut stream(8, "rp", &[i])).unwrap();
        let swapped = batch.swapped();
        for j in 0..batch.len() {
            let (a, b) = batch.cells[j];
            let l = batch.labels[j];
            swap_ok &= code(a, b) == Some(l)
                && code(b, a) == Some((l + 4) % 8)
                && swapped.labels[j] == (l + 4) % 8
                && swapped.first[j] == batch.second[j]
                && swapped.second[j] == batch.first[j];
            pairs += 1;
        }
    }

    // Camera-only motion leaves no foreground.
    let camera_only = (0..20u64).all(|i| {
        let cfg = MotionConfig {
            random_objects: 0,
            camera_velocity: (1, -1),
            ..MotionConfig::default()
        };
        let seq = synth_motion_sequence(&cfg, &mut stream(8, "motion", &[i])).unwrap();
        motion_mask(&seq, 4).unwrap().mask.iter().all(|&m| m == 0)
    });

    // Harmonized task inputs carry the same lightness plane three times.
    let data = DataConfig::default();
    let mut identical = true;
    for kind in TaskKind::ALL {
        let spec = TaskSpec {
            harmonized: true,
            ..TaskSpec::new(kind)
        };
        let batch = sample_task_batch(&spec, &data, &mut stream(8, "harmonized", &[])).unwrap();
        let input = batch.input();
        let &[n, c, h, w] = input.shape() else { panic!("4-d input") };
        assert_eq!(c, 3);
        let plane = h * w;
        for s in 0..n {
            let base = s * 3 * plane;
            for p in 0..plane {
                let v = input.data()[base + p].to_bits();
                identical &= input.data()[base + plane + p].to_bits() == v && input.data()[base + 2 * plane + p].to_bits() == v;
            }
        }
        if let TaskBatch::Colorization { .. } = batch {
            let (scene, _) = render_scene(&data.scene(), &mut stream(1, "x", &[]));
            let li = lightness_input(&scene).unwrap();
            identical &= li.plane(0) == li.plane(1) && li.plane(1) == li.plane(2);
        }
    }

    let pass = centers_ok && pairs == 10_000 && swap_ok && camera_only && identical;
    assert!(verdict(
        8,
        pass,
        format!(
            "{} bin centers round-trip {centers_ok}; swap symmetry on {pairs} pairs {swap_ok}; camera-only masks empty {camera_only}; harmonized channels bit-identical {identical}",
            q.classes()
        )
    ));
}

#[test]
fn criterion_9_reproducibility() {
    let mut cfg = ExperimentConfig::new("repro", 42, &[TaskKind::RelativePosition, TaskKind::Colorization]);
    cfg.trunk.units = 2;
    cfg.trunk.width = 4;
    cfg.trunk.dilated_units = 1;
    cfg.data.image_size = 16;
    cfg.data.patch = 4;
    cfg.data.jitter = 0;
    cfg.schedule.max_steps = 8;
    cfg.eval.dataset.image_size = 16;
    cfg.eval.dataset.train = 8;
    cfg.eval.dataset.test = 8;
    cfg.eval.probe_steps = 5;
    cfg.eval.finetune_steps = 2;
    cfg.tasks.iter_mut().for_each(|t| t.batch = Some(2));
    cfg.schedule.checkpoint_interval = None;
    cfg.normalize();

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut ckpts = Vec::new();
    let mut metrics = Vec::new();
    for d in &dirs {
        let summary = pretrain(&cfg, d.path()).unwrap();
        eval_checkpoints(&cfg, d.path(), 2).unwrap();
        ckpts.push(summary.checkpoints.iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>());
        metrics.push(std::fs::read(d.path().join(METRICS_FILE)).unwrap());
    }
    let same_ckpts = ckpts[0] == ckpts[1] && !ckpts[0].is_empty();
    let same_metrics = metrics[0] == metrics[1];

    // Write/read round trip, compared value by value.
    let original = Checkpoint::from_bytes(&ckpts[0][ckpts[0].len() - 1]).unwrap();
    let path = dirs[0].path().join("roundtrip.mtss");
    original.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    let bits = |s: &ParamStore| -> Vec<(String, Vec<u64>)> {
        s.iter().map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect())).collect()
    };
    let round_trip = bits(&back.params) == bits(&original.params)
        && back.cost.to_bits() == original.cost.to_bits()
        && back.optimizers == original.optimizers
        && back.counters == original.counters
        && std::fs::read(&path).unwrap() == ckpts[0][ckpts[0].len() - 1];

    let pass = same_ckpts && same_metrics && round_trip;
    assert!(verdict(
        9,
        pass,
        format!(
            "{} checkpoints byte-identical {same_ckpts}; metrics byte-identical {same_metrics} ({} bytes); round trip bit-exact {round_trip}",
            ckpts[0].len(),
            metrics[0].len()
        )
    ));
}
