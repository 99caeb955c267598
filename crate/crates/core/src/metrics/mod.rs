//! Saliency evaluation: PR / F-measure curves, adaptive F-measure, MAE,
//! S-measure, E-measure and weighted F-measure.
//!
//! Predictions are `H x W` maps in `[0, 1]`, ground truths are boolean
//! masks. Unless disabled, each prediction is min-max normalized before
//! evaluation. Curve thresholds are `tau_k = (k + 0.5) / K` for
//! `k = 0..K`; a pixel is positive at `tau_k` when `p > tau_k`.

mod curves;
mod dataset;
mod edt;
mod enhanced;
mod structure;
mod weighted;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use curves::{f_measure, Counts};
pub use dataset::{
    evaluate_dataset, evaluate_pairs, write_report_files, MetricReport, MetricSummary, NamedImage, PerImageRow,
};
pub use edt::nearest_foreground;
pub use enhanced::{enhanced_alignment, EMeasure};
pub use structure::{object_similarity, region_similarity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// F-measure weight (beta squared).
    pub beta_sq: f64,
    /// S-measure blend between object and region similarity.
    pub alpha: f64,
    pub threshold_count: usize,
    /// Adaptive threshold is `adaptive_factor * mean(pred)`.
    pub adaptive_factor: f64,
    /// Beta squared of the weighted F-measure.
    pub weighted_beta_sq: f64,
    /// Min-max normalize each prediction first.
    pub normalize: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            beta_sq: 0.3,
            alpha: 0.5,
            threshold_count: 256,
            adaptive_factor: 2.0,
            weighted_beta_sq: 1.0,
            normalize: true,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_sq > 0.0) || !(self.weighted_beta_sq > 0.0) {
            return Err(Error::Config("beta_sq must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must lie in [0, 1]".into()));
        }
        if self.threshold_count < 2 {
            return Err(Error::Config("threshold_count must be at least 2".into()));
        }
        if !(self.adaptive_factor > 0.0) {
            return Err(Error::Config("adaptive_factor must be positive".into()));
        }
        Ok(())
    }

    /// Curve threshold `k`.
    pub fn threshold(&self, k: usize) -> f64 {
        (k as f64 + 0.5) / self.threshold_count as f64
    }
}

/// Keeps the adaptive threshold strictly below 1 so a constant-one map
/// still counts as all positive.
const ADAPTIVE_CEILING: f64 = 1.0 - 1e-6;

fn check_pair(pred: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

/// Min-max normalization (when enabled and the map is not constant).
pub fn prepare(pred: &ArrayView2<f64>, cfg: &MetricConfig) -> Array2<f64> {
    let p = pred.mapv(|v| v.clamp(0.0, 1.0));
    if !cfg.normalize {
        return p;
    }
    let lo = p.fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = p.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if hi > lo {
        p.mapv(|v| (v - lo) / (hi - lo))
    } else {
        p
    }
}

/// Every per-image quantity the dataset report aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMetrics {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub fm: Vec<f64>,
    pub f_adaptive: f64,
    pub mae: f64,
    pub s_measure: f64,
    pub e_mean: f64,
    pub e_max: f64,
    pub e_adaptive: f64,
    pub weighted_f: f64,
}

/// Evaluates one prediction against its mask.
pub fn evaluate_image(pred: ArrayView2<f64>, gt: ArrayView2<bool>, cfg: &MetricConfig) -> Result<ImageMetrics> {
    check_pair(&pred, &gt)?;
    let p = prepare(&pred, cfg);
    let counts = Counts::sweep(&p.view(), &gt, cfg);
    let precision: Vec<f64> = counts.iter().map(Counts::precision).collect();
    let recall: Vec<f64> = counts.iter().map(Counts::recall).collect();
    let fm: Vec<f64> = precision
        .iter()
        .zip(&recall)
        .map(|(&pr, &rc)| f_measure(pr, rc, cfg.beta_sq))
        .collect();
    let adaptive = Counts::at(&p.view(), &gt, adaptive_threshold(&p.view(), cfg));
    let em = EMeasure::from_counts(&counts, &adaptive);
    Ok(ImageMetrics {
        precision,
        recall,
        fm,
        f_adaptive: f_measure(adaptive.precision(), adaptive.recall(), cfg.beta_sq),
        mae: mae_prepared(&p.view(), &gt),
        s_measure: structure::s_measure_prepared(&p.view(), &gt, cfg.alpha),
        e_mean: em.mean,
        e_max: em.max,
        e_adaptive: em.adaptive,
        weighted_f: weighted::weighted_f_prepared(&p.view(), &gt, cfg.weighted_beta_sq),
    })
}

pub(crate) fn adaptive_threshold(p: &ArrayView2<f64>, cfg: &MetricConfig) -> f64 {
    let mean = p.mean().unwrap_or(0.0);
    (cfg.adaptive_factor * mean).min(ADAPTIVE_CEILING)
}

fn mae_prepared(p: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> f64 {
    let mut total = 0.0;
    Zip::from(p).and(gt).for_each(|&p, &g| total += (p - if g { 1.0 } else { 0.0 }).abs());
    total / p.len() as f64
}

fn check_all(preds: &[Array2<f64>], gts: &[Array2<bool>]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        check_pair(&p.view(), &g.view())?;
    }
    Ok(())
}

fn mean_over<T>(items: &[T], f: impl Fn(&T) -> f64) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    items.iter().map(f).sum::<f64>() / items.len() as f64
}

/// Dataset PR curve: per-threshold precision and recall averaged over images.
pub fn pr_curve(preds: &[Array2<f64>], gts: &[Array2<bool>], cfg: &MetricConfig) -> Result<Vec<(f64, f64)>> {
    check_all(preds, gts)?;
    let per_image: Vec<Vec<Counts>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| Counts::sweep(&prepare(&p.view(), cfg).view(), &g.view(), cfg))
        .collect();
    Ok((0..cfg.threshold_count)
        .map(|k| {
            (
                mean_over(&per_image, |c| c[k].precision()),
                mean_over(&per_image, |c| c[k].recall()),
            )
        })
        .collect())
}

/// Dataset F-measure curve (per-image F averaged per threshold).
pub fn fm_curve(preds: &[Array2<f64>], gts: &[Array2<bool>], cfg: &MetricConfig) -> Result<Vec<f64>> {
    check_all(preds, gts)?;
    let per_image: Vec<Vec<f64>> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            Counts::sweep(&prepare(&p.view(), cfg).view(), &g.view(), cfg)
                .iter()
                .map(|c| f_measure(c.precision(), c.recall(), cfg.beta_sq))
                .collect()
        })
        .collect();
    Ok((0..cfg.threshold_count)
        .map(|k| mean_over(&per_image, |f| f[k]))
        .collect())
}

/// Maximum of the dataset F-measure curve.
pub fn f_max(preds: &[Array2<f64>], gts: &[Array2<bool>], cfg: &MetricConfig) -> Result<f64> {
    Ok(fm_curve(preds, gts, cfg)?.into_iter().fold(0.0, f64::max))
}

/// F-measure at the adaptive threshold, averaged over images.
pub fn f_avg(preds: &[Array2<f64>], gts: &[Array2<bool>], cfg: &MetricConfig) -> Result<f64> {
    check_all(preds, gts)?;
    let scores: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| {
            let p = prepare(&p.view(), cfg);
            let c = Counts::at(&p.view(), &g.view(), adaptive_threshold(&p.view(), cfg));
            f_measure(c.precision(), c.recall(), cfg.beta_sq)
        })
        .collect();
    Ok(mean_over(&scores, |s| *s))
}

/// Mean absolute error, averaged over pixels then images.
pub fn mae(preds: &[Array2<f64>], gts: &[Array2<bool>], cfg: &MetricConfig) -> Result<f64> {
    check_all(preds, gts)?;
    let scores: Vec<f64> = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| mae_prepared(&prepare(&p.view(), cfg).view(), &g.view()))
        .collect();
    Ok(mean_over(&scores, |s| *s))
}

/// Structure measure of one image.
pub fn s_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>, cfg: &MetricConfig) -> Result<f64> {
    check_pair(&pred, &gt)?;
    Ok(structure::s_measure_prepared(&prepare(&pred, cfg).view(), &gt, cfg.alpha))
}

/// Enhanced-alignment measure of one image (mean over the threshold sweep).
pub fn e_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>, cfg: &MetricConfig) -> Result<f64> {
    Ok(e_measure_all(pred, gt, cfg)?.mean)
}

/// Mean, max and adaptive-threshold E-measure of one image.
pub fn e_measure_all(pred: ArrayView2<f64>, gt: ArrayView2<bool>, cfg: &MetricConfig) -> Result<EMeasure> {
    check_pair(&pred, &gt)?;
    let p = prepare(&pred, cfg);
    let counts = Counts::sweep(&p.view(), &gt, cfg);
    let adaptive = Counts::at(&p.view(), &gt, adaptive_threshold(&p.view(), cfg));
    Ok(EMeasure::from_counts(&counts, &adaptive))
}

/// Weighted F-measure of one image.
pub fn weighted_f_measure(pred: ArrayView2<f64>, gt: ArrayView2<bool>, cfg: &MetricConfig) -> Result<f64> {
    check_pair(&pred, &gt)?;
    Ok(weighted::weighted_f_prepared(&prepare(&pred, cfg).view(), &gt, cfg.weighted_beta_sq))
}

/// Binarizes a `[0, 1]` mask map at one half.
pub fn binarize(mask: &Array2<f64>) -> Array2<bool> {
    mask.mapv(|v| v >= 0.5)
}
