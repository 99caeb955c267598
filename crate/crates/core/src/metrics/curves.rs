use ndarray::{ArrayView2, Zip};

use super::MetricConfig;

/// Confusion counts of one binarized prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub gt_pos: usize,
    pub total: usize,
}

impl Counts {
    /// An empty positive set has precision 1.
    pub fn precision(&self) -> f64 {
        let pred = self.tp + self.fp;
        if pred == 0 {
            1.0
        } else {
            self.tp as f64 / pred as f64
        }
    }

    /// A mask without foreground has recall 0.
    pub fn recall(&self) -> f64 {
        if self.gt_pos == 0 {
            0.0
        } else {
            self.tp as f64 / self.gt_pos as f64
        }
    }

    pub fn pred_pos(&self) -> usize {
        self.tp + self.fp
    }

    /// Counts at a single threshold (positive iff `p > threshold`).
    pub fn at(p: &ArrayView2<f64>, gt: &ArrayView2<bool>, threshold: f64) -> Counts {
        let mut c = Counts { total: p.len(), ..Counts::default() };
        Zip::from(p).and(gt).for_each(|&p, &g| {
            c.gt_pos += g as usize;
            if p > threshold {
                if g {
                    c.tp += 1;
                } else {
                    c.fp += 1;
                }
            }
        });
        c
    }

    /// Counts at every curve threshold in one pass over the pixels.
    pub fn sweep(p: &ArrayView2<f64>, gt: &ArrayView2<bool>, cfg: &MetricConfig) -> Vec<Counts> {
        let k = cfg.threshold_count;
        // hist[m] = pixels exceeding exactly the first m thresholds
        let mut fg_hist = vec![0usize; k + 1];
        let mut bg_hist = vec![0usize; k + 1];
        let mut gt_pos = 0;
        Zip::from(p).and(gt).for_each(|&v, &g| {
            let m = thresholds_below(v, cfg);
            if g {
                fg_hist[m] += 1;
                gt_pos += 1;
            } else {
                bg_hist[m] += 1;
            }
        });
        // pixels positive at threshold j are those with m > j
        let mut out = vec![Counts::default(); k];
        let (mut tp, mut fp) = (0, 0);
        for j in (0..k).rev() {
            tp += fg_hist[j + 1];
            fp += bg_hist[j + 1];
            out[j] = Counts { tp, fp, gt_pos, total: p.len() };
        }
        out
    }
}

/// Number of curve thresholds strictly below `v`, using the same
/// comparisons as [`Counts::at`].
fn thresholds_below(v: f64, cfg: &MetricConfig) -> usize {
    let k = cfg.threshold_count;
    let guess = (v * k as f64 - 0.5).ceil();
    let mut m = if guess.is_nan() || guess < 0.0 { 0 } else { (guess as usize).min(k) };
    while m > 0 && !(cfg.threshold(m - 1) < v) {
        m -= 1;
    }
    while m < k && cfg.threshold(m) < v {
        m += 1;
    }
    m
}

/// `F_beta = (1 + b2) P R / (b2 P + R)`, zero when both vanish.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}
