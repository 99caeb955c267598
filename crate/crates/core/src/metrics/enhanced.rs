//! Enhanced-alignment measure, computed from confusion counts since the
//! alignment matrix of a binarized map only takes four values.

use super::curves::Counts;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EMeasure {
    pub mean: f64,
    pub max: f64,
    pub adaptive: f64,
}

impl EMeasure {
    pub(crate) fn from_counts(sweep: &[Counts], adaptive: &Counts) -> EMeasure {
        let scores: Vec<f64> = sweep.iter().map(enhanced_alignment).collect();
        EMeasure {
            mean: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            max: scores.iter().copied().fold(0.0, f64::max),
            adaptive: enhanced_alignment(adaptive),
        }
    }
}

/// Mean enhanced-alignment score of a binarized prediction.
pub fn enhanced_alignment(c: &Counts) -> f64 {
    let n = c.total as f64;
    if c.total == 0 {
        return 0.0;
    }
    let fn_ = c.gt_pos - c.tp;
    let tn = c.total - c.gt_pos - c.fp;
    let sum = if c.gt_pos == 0 {
        tn as f64
    } else if c.gt_pos == c.total {
        c.tp as f64
    } else {
        let mp = c.pred_pos() as f64 / n;
        let mg = c.gt_pos as f64 / n;
        let parts = [
            (1.0 - mp, 1.0 - mg, c.tp),
            (1.0 - mp, -mg, c.fp),
            (-mp, 1.0 - mg, fn_),
            (-mp, -mg, tn),
        ];
        parts
            .iter()
            .map(|&(a, b, count)| {
                let den = a * a + b * b;
                let align = if den > 0.0 { 2.0 * a * b / den } else { 0.0 };
                let enhanced = (align + 1.0).powi(2) / 4.0;
                enhanced * count as f64
            })
            .sum()
    };
    sum / n
}
