use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate_image, ImageMetrics, MetricConfig};
use crate::imageio::{binarize_codes, list_images, read_gray};
use crate::{Error, Result};

/// One prediction paired with its mask.
#[derive(Debug, Clone)]
pub struct NamedImage {
    pub name: String,
    pub pred: Array2<f64>,
    pub gt: Array2<bool>,
}

/// The six headline numbers; this is exactly what the JSON report holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub f_max: f64,
    pub f_avg: f64,
    pub f_w: f64,
    pub e_m: f64,
    pub s_m: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerImageRow {
    pub name: String,
    pub f_max: f64,
    pub f_adaptive: f64,
    pub f_w: f64,
    pub e_mean: f64,
    pub e_max: f64,
    pub e_adaptive: f64,
    pub s_m: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub summary: MetricSummary,
    pub thresholds: Vec<f64>,
    pub pr_curve: Vec<(f64, f64)>,
    pub fm_curve: Vec<f64>,
    pub per_image: Vec<PerImageRow>,
    /// Predictions without a mask and masks without a prediction.
    pub unmatched_predictions: Vec<String>,
    pub unmatched_ground_truths: Vec<String>,
    /// Files that could not be read or evaluated, with the reason.
    pub failures: Vec<(String, String)>,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.sum::<f64>() / n as f64
}

fn with_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn aggregate(names: Vec<String>, metrics: Vec<ImageMetrics>, cfg: &MetricConfig) -> MetricReport {
    let n = metrics.len();
    let k = cfg.threshold_count;
    // sums run in name order so the result does not depend on scheduling
    let pr_curve: Vec<(f64, f64)> = (0..k)
        .map(|t| {
            (
                mean(metrics.iter().map(|m| m.precision[t]), n),
                mean(metrics.iter().map(|m| m.recall[t]), n),
            )
        })
        .collect();
    let fm_curve: Vec<f64> = (0..k).map(|t| mean(metrics.iter().map(|m| m.fm[t]), n)).collect();
    let summary = MetricSummary {
        f_max: fm_curve.iter().copied().fold(0.0, f64::max),
        f_avg: mean(metrics.iter().map(|m| m.f_adaptive), n),
        f_w: mean(metrics.iter().map(|m| m.weighted_f), n),
        e_m: mean(metrics.iter().map(|m| m.e_mean), n),
        s_m: mean(metrics.iter().map(|m| m.s_measure), n),
        mae: mean(metrics.iter().map(|m| m.mae), n),
    };
    let per_image = names
        .into_iter()
        .zip(&metrics)
        .map(|(name, m)| PerImageRow {
            name,
            f_max: m.fm.iter().copied().fold(0.0, f64::max),
            f_adaptive: m.f_adaptive,
            f_w: m.weighted_f,
            e_mean: m.e_mean,
            e_max: m.e_max,
            e_adaptive: m.e_adaptive,
            s_m: m.s_measure,
            mae: m.mae,
        })
        .collect();
    MetricReport {
        summary,
        thresholds: (0..k).map(|t| cfg.threshold(t)).collect(),
        pr_curve,
        fm_curve,
        per_image,
        unmatched_predictions: Vec::new(),
        unmatched_ground_truths: Vec::new(),
        failures: Vec::new(),
    }
}

/// Evaluates in-memory pairs. `threads = 0` uses the global rayon pool.
pub fn evaluate_pairs(items: &[NamedImage], cfg: &MetricConfig, threads: usize) -> Result<MetricReport> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let results: Vec<Result<ImageMetrics>> = with_pool(threads, || {
        items
            .par_iter()
            .map(|it| evaluate_image(it.pred.view(), it.gt.view(), cfg))
            .collect()
    })?;
    let mut metrics = Vec::with_capacity(items.len());
    for (it, r) in items.iter().zip(results) {
        metrics.push(r.map_err(|e| Error::Data(format!("{}: {e}", it.name)))?);
    }
    Ok(aggregate(items.iter().map(|i| i.name.clone()).collect(), metrics, cfg))
}

/// Evaluates a directory of 8-bit predictions against a directory of masks,
/// matching files by stem.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path, cfg: &MetricConfig, threads: usize) -> Result<MetricReport> {
    cfg.validate()?;
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let unmatched_predictions: Vec<String> = preds.keys().filter(|k| !gts.contains_key(*k)).cloned().collect();
    let unmatched_ground_truths: Vec<String> = gts.keys().filter(|k| !preds.contains_key(*k)).cloned().collect();
    let matched: Vec<(String, PathBuf, PathBuf)> = preds
        .iter()
        .filter_map(|(k, p)| gts.get(k).map(|g| (k.clone(), p.clone(), g.clone())))
        .collect();
    if matched.is_empty() {
        return Err(Error::Data(format!(
            "no matching file names between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    for name in &unmatched_predictions {
        log::warn!("prediction `{name}` has no ground truth");
    }
    for name in &unmatched_ground_truths {
        log::warn!("ground truth `{name}` has no prediction");
    }

    let evaluated: Vec<Result<ImageMetrics>> = with_pool(threads, || {
        matched
            .par_iter()
            .map(|(_, p, g)| {
                let gt = binarize_codes(&read_gray(g, None)?);
                let pred = read_gray(p, None)?.mapv(|c| c as f64 / 255.0);
                evaluate_image(pred.view(), gt.view(), cfg)
            })
            .collect()
    })?;

    let mut names = Vec::new();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for ((name, _, _), r) in matched.into_iter().zip(evaluated) {
        match r {
            Ok(m) => {
                names.push(name);
                metrics.push(m);
            }
            Err(e) => {
                log::warn!("{name}: {e}");
                failures.push((name, e.to_string()));
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::Data(format!("all {} matched files failed", failures.len())));
    }
    let mut report = aggregate(names, metrics, cfg);
    report.unmatched_predictions = unmatched_predictions;
    report.unmatched_ground_truths = unmatched_ground_truths;
    report.failures = failures;
    Ok(report)
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Writes the JSON summary at `json_path` and, next to it,
/// `<stem>_per_image.csv`, `<stem>_pr.csv` and `<stem>_fm.csv`.
/// Returns every path written.
pub fn write_report_files(report: &MetricReport, json_path: &Path) -> Result<Vec<PathBuf>> {
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;

    let per_image = sibling(json_path, "per_image");
    let mut w = csv::Writer::from_path(&per_image).map_err(|e| csv_err(&per_image, e))?;
    for row in &report.per_image {
        w.serialize(row).map_err(|e| csv_err(&per_image, e))?;
    }
    w.flush().map_err(|e| Error::io(&per_image, e))?;

    let pr = sibling(json_path, "pr");
    let mut w = csv::Writer::from_path(&pr).map_err(|e| csv_err(&pr, e))?;
    w.write_record(["threshold", "precision", "recall"]).map_err(|e| csv_err(&pr, e))?;
    for (t, (p, r)) in report.thresholds.iter().zip(&report.pr_curve) {
        w.write_record([t.to_string(), p.to_string(), r.to_string()])
            .map_err(|e| csv_err(&pr, e))?;
    }
    w.flush().map_err(|e| Error::io(&pr, e))?;

    let fm = sibling(json_path, "fm");
    let mut w = csv::Writer::from_path(&fm).map_err(|e| csv_err(&fm, e))?;
    w.write_record(["threshold", "f_measure"]).map_err(|e| csv_err(&fm, e))?;
    for (t, f) in report.thresholds.iter().zip(&report.fm_curve) {
        w.write_record([t.to_string(), f.to_string()]).map_err(|e| csv_err(&fm, e))?;
    }
    w.flush().map_err(|e| Error::io(&fm, e))?;

    Ok(vec![json_path.to_path_buf(), per_image, pr, fm])
}
