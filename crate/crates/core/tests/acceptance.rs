//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any fail.
//!
//! Built with `harness = false` so the lines are printed even when every
//! criterion passes. Criterion numbers given as arguments restrict the run,
//! e.g. `cargo test --test acceptance -- 7 8`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use minet_core::ablation::run_ablation;
use minet_core::backbone::{ImageBatch, LEVELS};
use minet_core::data::synth_generate;
use minet_core::gradcheck::{self, GradcheckOptions};
use minet_core::losses::{cel, cel_grad_analytic, CelMode, GroundTruthMask};
use minet_core::metrics::{evaluate_image, evaluate_pairs, write_report_files, MetricConfig, NamedImage};
use minet_core::model::{Ablation, MiNet, ModelConfig, SaliencyPrediction, EPS};
use minet_core::trainer::{evaluate_model, poly_lr, train, TrainConfig, TrainOptions};
use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn pred(values: &[f64], h: usize, w: usize) -> SaliencyPrediction {
    SaliencyPrediction::from_probabilities(Array4::from_shape_vec((1, h, w, 1), values.to_vec()).unwrap())
}

fn mask(values: &[f64], h: usize, w: usize) -> GroundTruthMask {
    GroundTruthMask::new(Array4::from_shape_vec((1, h, w, 1), values.to_vec()).unwrap()).unwrap()
}

fn c1_gradients() -> Outcome {
    let opts = GradcheckOptions::default();
    ensure!(opts.size == 8 && opts.cases == 20 && opts.step == 1e-5, "unexpected defaults {opts:?}");
    let t = Instant::now();
    let r = gradcheck::run(&opts).map_err(|e| e.to_string())?;
    let dt = t.elapsed();
    ensure!(r.cases == 20, "ran {} cases", r.cases);
    ensure!(r.bcel_max_rel_err < 1e-4, "bcel rel err {:e}", r.bcel_max_rel_err);
    ensure!(r.cel_max_rel_err < 1e-4, "cel rel err {:e}", r.cel_max_rel_err);
    ensure!(dt < Duration::from_secs(10), "took {dt:?}");
    Ok(format!(
        "bcel {:.2e}, cel {:.2e} over 20 8x8 cases in {dt:.2?}",
        r.bcel_max_rel_err, r.cel_max_rel_err
    ))
}

fn c2_cel_extremes() -> Outcome {
    let g = mask(&[1.0, 1.0, 0.0, 0.0, 0.0, 1.0], 2, 3);
    let disjoint = cel(&pred(&[0.0, 0.0, 1.0, 0.4, 0.7, 0.0], 2, 3), &g, CelMode::PerImageMean).unwrap();
    ensure!(disjoint == 1.0, "disjoint support gave {disjoint:e}");
    let clamped: Vec<f64> = [1.0, 1.0, 0.0, 0.0, 0.0, 1.0].iter().map(|&v: &f64| v.clamp(EPS, 1.0 - EPS)).collect();
    let perfect = cel(&pred(&clamped, 2, 3), &g, CelMode::PerImageMean).unwrap();
    ensure!(perfect < 4.0 * EPS, "clamped perfect gave {perfect:e}");
    let hand = cel(&pred(&[0.5; 4], 2, 2), &mask(&[1.0, 0.0, 0.0, 0.0], 2, 2), CelMode::PerImageMean).unwrap();
    ensure!((hand - 2.0 / 3.0).abs() <= 1e-12, "hand case gave {hand}");
    Ok(format!("disjoint = 1, perfect = {perfect:.1e} < 4 eps, hand = {hand:.15}"))
}

fn c3_intra_class() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut spread, mut gap) = (0.0f64, 0.0f64);
    for case in 0..50 {
        let (h, w) = (rng.random_range(2..12), rng.random_range(2..12));
        let n = h * w;
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mut g: Vec<f64> = (0..n).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
        g[case % n] = 1.0;
        g[(case + 1) % n] = 0.0;
        let grad = cel_grad_analytic(&pred(&p, h, w), &mask(&g, h, w), CelMode::PerImageMean).unwrap();
        let (mut fg, mut bg) = (Vec::new(), Vec::new());
        for (&d, &gv) in grad.iter().zip(&g) {
            if gv == 1.0 { fg.push(d) } else { bg.push(d) }
        }
        let range = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - v.iter().cloned().fold(f64::INFINITY, f64::min);
        spread = spread.max(range(&fg)).max(range(&bg));
        let s: f64 = p.iter().zip(&g).map(|(a, b)| a + b).sum();
        gap = gap.max(((bg[0] - fg[0]) - 2.0 / s).abs());
    }
    let r = gradcheck::run(&GradcheckOptions::default()).map_err(|e| e.to_string())?;
    spread = spread.max(r.fg_spread).max(r.bg_spread);
    gap = gap.max(r.gap_error);
    ensure!(spread < 1e-12, "within-class spread {spread:e}");
    ensure!(gap <= 1e-12, "gap error {gap:e}");
    Ok(format!("max spread {spread:.1e}, max gap error {gap:.1e} over 70 random cases"))
}

fn c4_topology() -> Outcome {
    let t = Instant::now();
    let (net, store) = MiNet::build(&ModelConfig::vgg16()).map_err(|e| e.to_string())?;
    let img = ImageBatch::new(Array4::from_shape_fn((1, 320, 320, 3), |(_, y, x, c)| {
        ((y * 7 + x * 3 + c * 11) % 97) as f64 / 96.0
    }))
    .unwrap();
    let (p, st) = net.predict_with_state(&store, &img).map_err(|e| e.to_string())?;
    let sizes: Vec<usize> = st.aim.iter().map(|a| a.shape()[2]).collect();
    ensure!(sizes == [320, 160, 80, 40, 20], "pyramid sizes {sizes:?}");
    ensure!(st.aim.iter().all(|a| a.shape()[3] == a.shape()[2]), "non-square level");
    let widths: Vec<usize> = st.aim.iter().map(|a| a.shape()[1]).collect();
    ensure!(widths == [32, 64, 64, 64, 64], "AIM channels {widths:?}");
    ensure!(st.add[LEVELS - 1].value() == st.aim[LEVELS - 1].value(), "f_add^4 differs from f_AIM^4");
    for i in 0..LEVELS {
        ensure!(st.sim[i].shape() == st.add[i].shape(), "SIM {i} changed shape");
    }
    ensure!(p.data().shape() == [1, 320, 320, 1], "output {:?}", p.data().shape());
    ensure!(p.data().iter().all(|&v| v > 0.0 && v < 1.0), "output leaves (0, 1)");
    let dt = t.elapsed();
    ensure!(dt < Duration::from_secs(60), "took {dt:?}");
    Ok(format!("vgg16-style 320x320 pyramid {sizes:?}, AIM {widths:?} in {dt:.2?}"))
}

/// Configuration of the overfit experiment shared by criteria 5 and 6.
fn overfit_setup() -> (ModelConfig, TrainConfig, minet_core::data::Dataset) {
    let data = synth_generate(16, 32, 7).unwrap();
    let tc = TrainConfig {
        epochs: 50,
        batch_size: 4,
        lr0: 0.05,
        seed: 7,
        ..TrainConfig::default()
    };
    (ModelConfig::default(), tc, data)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c5_overfit(full_f_avg: &mut Option<f64>) -> Outcome {
    let t = Instant::now();
    let (model, tc, data) = overfit_setup();
    let (net, mut store) = MiNet::build(&Ablation::parse("+aim+sim+cel").unwrap().apply(&model)).unwrap();
    let out = train(&net, &mut store, &data, &tc, None, &TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure!(out.log.len() == 200, "{} iterations", out.log.len());
    let first = mean(out.log[..20].iter().map(|r| r.total));
    let last = mean(out.log[180..].iter().map(|r| r.total));
    let rep = evaluate_model(&net, &store, &data, &MetricConfig::default(), None, tc.batch_size, 1)
        .map_err(|e| e.to_string())?;
    let s = rep.summary;
    *full_f_avg = Some(s.f_avg);
    ensure!(last < first, "loss did not drop: first {first:.4}, last {last:.4}");
    ensure!(s.f_avg >= 0.9, "F_avg {:.4}", s.f_avg);
    ensure!(s.mae <= 0.05, "MAE {:.4}", s.mae);
    Ok(format!(
        "F_avg {:.4}, MAE {:.4}, loss {first:.3} -> {last:.3} in {:.0?}",
        s.f_avg,
        s.mae,
        t.elapsed()
    ))
}

fn c6_ablation(full_f_avg: Option<f64>) -> Outcome {
    let full = full_f_avg.ok_or("criterion 5 did not produce a full-model score")?;
    let (model, tc, data) = overfit_setup();
    let rows = [Ablation::parse("baseline").unwrap()];
    let table = run_ablation(&rows, &model, &tc, &data, &MetricConfig::default(), &TrainOptions::default())
        .map_err(|e| e.to_string())?;
    let base = table[0].f_avg;
    ensure!(full >= base, "+aim+sim+cel F_avg {full:.4} < baseline {base:.4}");
    Ok(format!("+aim+sim+cel F_avg {full:.4} >= baseline {base:.4}"))
}

fn c7_metric_oracle() -> Outcome {
    let t = Instant::now();
    let cfg = MetricConfig::default();
    let k = cfg.threshold_count;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0usize;
    for bits in 0u32..512 {
        let gt = Array2::from_shape_fn((3, 3), |(y, x)| bits >> (y * 3 + x) & 1 == 1);
        for trial in 0..64 {
            // half the trials use 8-bit codes, as read back from PNG predictions
            let raw = Array2::from_shape_fn((3, 3), |_| {
                let v: f64 = rng.random_range(0.0..1.0);
                if trial % 2 == 0 { (v * 255.0).round() / 255.0 } else { v }
            });
            let m = evaluate_image(raw.view(), gt.view(), &cfg).map_err(|e| e.to_string())?;

            let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p: Vec<f64> = raw.iter().map(|&v| if hi > lo { (v - lo) / (hi - lo) } else { v }).collect();
            let g: Vec<bool> = gt.iter().copied().collect();
            let gt_pos = g.iter().filter(|&&b| b).count();
            let mae = p.iter().zip(&g).map(|(&v, &b)| (v - b as u8 as f64).abs()).sum::<f64>() / 9.0;
            ensure!(m.mae == mae, "mask {bits} trial {trial}: MAE {} vs {mae}", m.mae);
            for i in 0..k {
                let tau = (i as f64 + 0.5) / k as f64;
                let (mut tp, mut fp) = (0usize, 0usize);
                for (&v, &b) in p.iter().zip(&g) {
                    if v > tau {
                        if b { tp += 1 } else { fp += 1 }
                    }
                }
                let prec = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
                let rec = if gt_pos == 0 { 0.0 } else { tp as f64 / gt_pos as f64 };
                let f = if prec + rec == 0.0 {
                    0.0
                } else {
                    (1.0 + cfg.beta_sq) * prec * rec / (cfg.beta_sq * prec + rec)
                };
                ensure!(
                    m.precision[i] == prec && m.recall[i] == rec && m.fm[i] == f,
                    "mask {bits} trial {trial} threshold {i}: ({}, {}, {}) vs ({prec}, {rec}, {f})",
                    m.precision[i],
                    m.recall[i],
                    m.fm[i]
                );
            }
            checked += 1;
        }
    }

    let items: Vec<NamedImage> = (0..4)
        .map(|i| {
            let gt = Array2::from_shape_fn((24, 24), |(y, x)| (y + i) % 7 < 3 && x > 4 + i);
            NamedImage { name: format!("img{i}"), pred: gt.mapv(|b| b as u8 as f64), gt }
        })
        .collect();
    let s = evaluate_pairs(&items, &cfg, 1).map_err(|e| e.to_string())?.summary;
    ensure!(
        [s.f_max, s.f_avg, s.f_w, s.e_m, s.s_m] == [1.0; 5] && s.mae == 0.0,
        "perfect report {s:?}"
    );
    let dt = t.elapsed();
    ensure!(dt < Duration::from_secs(60), "took {dt:?}");
    Ok(format!("{checked} mask/prediction pairs match brute force; perfect report exact; {dt:.2?}"))
}

fn c8_poly_schedule() -> Outcome {
    let data = synth_generate(4, 32, 1).unwrap();
    let cfg = ModelConfig {
        channels: [8; LEVELS],
        aim_mid_channels: [4; LEVELS],
        sim_high_channels: [4; LEVELS],
        ..ModelConfig::default()
    };
    let tc = TrainConfig { epochs: 2, batch_size: 2, seed: 1, ..TrainConfig::default() };
    let total = tc.total_iterations(data.len());
    ensure!(total == 4, "T = {total}");
    let (net, mut store) = MiNet::build(&cfg).unwrap();
    let out = train(&net, &mut store, &data, &tc, None, &TrainOptions::default()).map_err(|e| e.to_string())?;
    let lr0 = tc.lr0;
    let half = out.log[total / 2].lr;
    ensure!((out.log[0].lr - lr0).abs() <= 1e-12, "lr(0) = {}", out.log[0].lr);
    ensure!((half - lr0 * 0.5f64.powf(0.9)).abs() <= 1e-12, "lr(T/2) = {half}");
    ensure!(out.state.global_iteration == total, "stopped at {}", out.state.global_iteration);
    ensure!(out.state.current_lr.abs() <= 1e-12, "lr(T) = {}", out.state.current_lr);
    for row in &out.log {
        let want = poly_lr(row.iteration, total, lr0, tc.poly_power).unwrap();
        ensure!(row.lr == want, "iteration {}: lr {} vs {want}", row.iteration, row.lr);
    }
    Ok(format!("lr(0) = {lr0:e}, lr(T/2) = {half:.6e}, lr(T) = {:e}", out.state.current_lr))
}

fn c9_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = synth_generate(6, 32, 9).unwrap();
    let cfg = ModelConfig { channels: [8; LEVELS], ..ModelConfig::default() };
    let tc = TrainConfig { epochs: 2, batch_size: 3, seed: 9, ..TrainConfig::default() };
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let (net, mut store) = MiNet::build(&cfg).unwrap();
        let opts = TrainOptions {
            augmentation: Some(Default::default()),
            out_dir: Some(dir.path().join(run)),
            keep_epoch_checkpoints: false,
        };
        train(&net, &mut store, &data, &tc, None, &opts).map_err(|e| e.to_string())?;
        logs.push(std::fs::read(dir.path().join(run).join("log.csv")).map_err(|e| e.to_string())?);
    }
    ensure!(logs[0] == logs[1], "loss logs differ");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let items: Vec<NamedImage> = (0..12)
        .map(|i| NamedImage {
            name: format!("s{i:02}"),
            pred: Array2::from_shape_fn((40, 40), |_| rng.random_range(0.0..1.0)),
            gt: Array2::from_shape_fn((40, 40), |(y, x)| (y as i64 - 20).pow(2) + (x as i64 - 20).pow(2) < (i as i64 + 3).pow(2)),
        })
        .collect();
    let mut reports = Vec::new();
    for threads in [1, 4] {
        let r = evaluate_pairs(&items, &MetricConfig::default(), threads).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("t{threads}/report.json"));
        let written = write_report_files(&r, &path).map_err(|e| e.to_string())?;
        let mut bytes = std::fs::read(&path).unwrap();
        for f in written {
            bytes.extend(std::fs::read(f).unwrap());
        }
        reports.push(bytes);
    }
    ensure!(reports[0] == reports[1], "reports differ between 1 and 4 workers");
    Ok(format!("{}-byte logs identical; reports identical with 1 and 4 workers", logs[0].len()))
}

fn main() {
    let mut full_f_avg = None;
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("1 gradient correctness", Box::new(c1_gradients)),
        ("2 CEL extremes", Box::new(c2_cel_extremes)),
        ("3 intra-class gradient constancy", Box::new(c3_intra_class)),
        ("4 shape/topology", Box::new(c4_topology)),
        ("5 overfit experiment", Box::new(|| c5_overfit(&mut full_f_avg))),
    ];
    let selected: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    let mut report = |name: &str, f: Box<dyn FnOnce() -> Outcome + '_>| {
        let number = name.split(' ').next().unwrap_or_default();
        if !selected.is_empty() && !selected.iter().any(|s| s == number) {
            return;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match result {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    };
    for (name, f) in criteria {
        report(name, f);
    }
    let rest: Vec<(&str, Box<dyn FnOnce() -> Outcome>)> = vec![
        ("6 ablation ordering", Box::new(move || c6_ablation(full_f_avg))),
        ("7 metric oracle equivalence", Box::new(c7_metric_oracle)),
        ("8 poly schedule", Box::new(c8_poly_schedule)),
        ("9 determinism", Box::new(c9_determinism)),
    ];
    for (name, f) in rest {
        report(name, f);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all selected acceptance criteria passed");
}
