use std::path::Path;

use minet_core::ablation::{parse_rows, run_ablation, write_ablation_csv};
use minet_core::backbone::ImageBatch;
use minet_core::checkpoint::Checkpoint;
use minet_core::config::RunConfigFile;
use minet_core::data::{load_manifest, load_pairs, synth_generate, Dataset};
use minet_core::gradcheck::{self, GradcheckOptions};
use minet_core::imageio::{dimensions, list_images, quantize, read_rgb, resize_gray, write_gray};
use minet_core::metrics::{evaluate_dataset, write_report_files};
use minet_core::model::MiNet;
use minet_core::nn::ParamStore;
use minet_core::trainer::{self, TrainOptions};
use minet_core::{Error, Result};

use crate::{AblateArgs, DataSource, EvalArgs, GradcheckArgs, PredictArgs, TrainArgs};

/// Inputs are resized to a multiple of this before inference so every
/// pyramid level, including the halved one inside the deepest SIM, is whole.
const INPUT_MULTIPLE: usize = 32;

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    match path {
        Some(p) => RunConfigFile::load(p).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
            other => other,
        }),
        None => Ok(RunConfigFile::default()),
    }
}

fn resize_target(cfg: &RunConfigFile) -> (usize, usize) {
    let [h, w] = cfg.augmentation.resize_to;
    (h, w)
}

fn synthetic(count: usize, cfg: &RunConfigFile, seed: u64) -> Result<Dataset> {
    let (h, w) = resize_target(cfg);
    if h != w {
        return Err(Error::Config(format!(
            "augmentation.resize_to must be square for synthetic data, got {h}x{w}"
        )));
    }
    synth_generate(count, h, seed)
}

fn dir_pairs(dir: &Path, size: (usize, usize)) -> Result<Dataset> {
    load_pairs(&dir.join("images"), &dir.join("masks"), Some(size))
}

fn load_source(src: &DataSource, cfg: &RunConfigFile, seed: u64) -> Result<Dataset> {
    let size = resize_target(cfg);
    let data = match (&src.data_dir, &src.manifest, src.synthetic) {
        (Some(d), _, _) => dir_pairs(d, size)?,
        (_, Some(m), _) => load_manifest(m, Some(size))?,
        (_, _, Some(n)) => synthetic(n, cfg, seed)?,
        _ => unreachable!("clap requires one data source"),
    };
    if data.is_empty() {
        return Err(Error::Data("no usable training samples".into()));
    }
    if !data.skipped.is_empty() || !data.missing.is_empty() {
        log::warn!(
            "{} files skipped, {} without a counterpart",
            data.skipped.len(),
            data.missing.len()
        );
    }
    Ok(data)
}

pub fn train(a: TrainArgs) -> Result<u8> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let data = load_source(&a.source, &cfg, cfg.train.seed)?;
    let validation = match &a.validation_dir {
        Some(d) => Some(dir_pairs(d, resize_target(&cfg))?),
        None => None,
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let cfg_path = a.out_dir.join("config.json");
    std::fs::write(&cfg_path, cfg.to_json()).map_err(|e| Error::Io { path: cfg_path, source: e })?;

    let (net, mut store) = MiNet::build(&cfg.model_config())?;
    log::info!(
        "training on {} samples, {} parameters, {} iterations",
        data.len(),
        store.num_scalars(),
        cfg.train.total_iterations(data.len())
    );
    let opts = TrainOptions {
        augmentation: Some(cfg.augmentation.clone()),
        out_dir: Some(a.out_dir.clone()),
        keep_epoch_checkpoints: a.keep_epoch_checkpoints,
    };
    let out = trainer::train(&net, &mut store, &data, &cfg.train, validation.as_ref(), &opts)?;
    if let Some(last) = out.log.last() {
        println!(
            "finished {} iterations; final loss {:.5} (bcel {:.5}, cel {:.5})",
            out.state.global_iteration, last.total, last.bcel, last.cel
        );
    }
    Ok(0)
}

fn round_to_multiple(v: usize) -> usize {
    (((v + INPUT_MULTIPLE / 2) / INPUT_MULTIPLE) * INPUT_MULTIPLE).max(INPUT_MULTIPLE)
}

fn predict_one(net: &MiNet, store: &ParamStore, input: &Path, output: &Path) -> Result<()> {
    let (h, w) = dimensions(input)?;
    let target = (round_to_multiple(h), round_to_multiple(w));
    let image = read_rgb(input, Some(target))?;
    let p = net.predict(store, &ImageBatch::stack(&[image])?)?;
    let codes = resize_gray(&quantize(&p.image(0)), h, w);
    write_gray(output, &codes)
}

pub fn predict(a: PredictArgs) -> Result<u8> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (net, store) = ck.restore(None)?;
    let inputs = list_images(&a.images)?;
    if inputs.is_empty() {
        return Err(Error::Data(format!("no images found in {}", a.images.display())));
    }
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::Io {
        path: a.out_dir.clone(),
        source: e,
    })?;
    let mut failed = 0;
    for (stem, path) in &inputs {
        if let Err(e) = predict_one(&net, &store, path, &a.out_dir.join(format!("{stem}.png"))) {
            eprintln!("failed: {}: {e}", path.display());
            failed += 1;
        }
    }
    println!("wrote {} of {} predictions", inputs.len() - failed, inputs.len());
    Ok(if failed > 0 { 2 } else { 0 })
}

pub fn eval(a: EvalArgs) -> Result<u8> {
    let cfg = load_config(a.config.as_deref())?;
    let report = evaluate_dataset(&a.pred_dir, &a.gt_dir, &cfg.metrics, 0)?;
    for (name, why) in &report.failures {
        eprintln!("failed: {name}: {why}");
    }
    if !report.unmatched_predictions.is_empty() || !report.unmatched_ground_truths.is_empty() {
        eprintln!(
            "unmatched: predictions [{}], ground truths [{}]",
            report.unmatched_predictions.join(", "),
            report.unmatched_ground_truths.join(", ")
        );
    }
    write_report_files(&report, &a.report)?;
    print!("{}", report.to_json());
    Ok(0)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<u8> {
    let opts = GradcheckOptions {
        size: a.size,
        seed: a.seed,
        cases: a.cases,
        tolerance: a.tolerance,
        corrupt_analytic: a.corrupt_gradient,
        ..GradcheckOptions::default()
    };
    let r = gradcheck::run(&opts)?;
    println!("cases: {} ({}x{}, seed {})", r.cases, a.size, a.size, a.seed);
    println!("bcel max relative error: {:.3e}", r.bcel_max_rel_err);
    println!("cel max relative error: {:.3e}", r.cel_max_rel_err);
    println!("cel foreground gradient spread: {:.3e}", r.fg_spread);
    println!("cel background gradient spread: {:.3e}", r.bg_spread);
    println!("cel background-foreground gap error: {:.3e}", r.gap_error);
    if r.passed {
        println!("PASS (tolerance {:e})", a.tolerance);
        Ok(0)
    } else {
        let w = &r.worst;
        eprintln!(
            "FAIL: worst {} pixel in case {} at ({}, {}): analytic {:e}, numeric {:e}, relative error {:.3e}",
            w.loss, w.case, w.row, w.col, w.analytic, w.numeric, w.rel_err
        );
        Ok(3)
    }
}

pub fn ablate(a: AblateArgs) -> Result<u8> {
    let rows = parse_rows(&a.rows)?;
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let data = synthetic(a.synthetic, &cfg, cfg.train.seed)?;
    let opts = TrainOptions {
        augmentation: Some(cfg.augmentation.clone()),
        ..TrainOptions::default()
    };
    let table = run_ablation(&rows, &cfg.model_config(), &cfg.train, &data, &cfg.metrics, &opts)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    write_ablation_csv(&table, &a.out)?;
    println!("{:<14} {:>7} {:>7} {:>7} {:>7} {:>7} {:>7}", "row", "F_max", "F_avg", "F_w", "E_m", "S_m", "MAE");
    for r in &table {
        println!(
            "{:<14} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.row, r.f_max, r.f_avg, r.f_w, r.e_m, r.s_m, r.mae
        );
    }
    Ok(0)
}
