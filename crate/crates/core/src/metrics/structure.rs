//! Structure measure: object-aware and region-aware similarity.

use ndarray::{s, ArrayView2, Zip};

pub(crate) fn s_measure_prepared(p: &ArrayView2<f64>, gt: &ArrayView2<bool>, alpha: f64) -> f64 {
    let fg = gt.iter().filter(|&&g| g).count();
    let mean_pred = p.mean().unwrap_or(0.0);
    if fg == 0 {
        return 1.0 - mean_pred;
    }
    if fg == gt.len() {
        return mean_pred;
    }
    let q = alpha * object_similarity(p, gt) + (1.0 - alpha) * region_similarity(p, gt);
    q.max(0.0)
}

/// Object-aware similarity of foreground and background distributions.
pub fn object_similarity(p: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> f64 {
    let fg: Vec<f64> = Zip::from(p)
        .and(gt)
        .fold(Vec::new(), |mut v, &p, &g| {
            if g {
                v.push(p);
            }
            v
        });
    let bg: Vec<f64> = Zip::from(p)
        .and(gt)
        .fold(Vec::new(), |mut v, &p, &g| {
            if !g {
                v.push(1.0 - p);
            }
            v
        });
    let u = fg.len() as f64 / gt.len() as f64;
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sigma = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    // the denominator is at least 1, so no epsilon guard is needed
    2.0 * mean / (mean * mean + 1.0 + sigma)
}

/// Region-aware similarity over the four quadrants around the mask
/// centroid, weighted by quadrant area.
pub fn region_similarity(p: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> f64 {
    let (h, w) = gt.dim();
    let (cx, cy) = centroid(gt);
    let quads = [
        (s![0..cy, 0..cx], cx * cy),
        (s![0..cy, cx..w], (w - cx) * cy),
        (s![cy..h, 0..cx], cx * (h - cy)),
        (s![cy..h, cx..w], (w - cx) * (h - cy)),
    ];
    // weight by pixel count and divide once so perfect quadrants sum to exactly 1
    let weighted: f64 = quads
        .iter()
        .filter(|(_, count)| *count > 0)
        .map(|(sl, count)| *count as f64 * ssim(&p.slice(*sl), &gt.slice(*sl)))
        .sum();
    weighted / (h * w) as f64
}

/// Split point `(x, y)`: one past the rounded foreground centroid.
fn centroid(gt: &ArrayView2<bool>) -> (usize, usize) {
    let (h, w) = gt.dim();
    let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
    for ((y, x), &g) in gt.indexed_iter() {
        if g {
            sy += y as f64;
            sx += x as f64;
            n += 1;
        }
    }
    let (x, y) = if n == 0 {
        ((w as f64 / 2.0).round_ties_even(), (h as f64 / 2.0).round_ties_even())
    } else {
        ((sx / n as f64).round_ties_even() + 1.0, (sy / n as f64).round_ties_even() + 1.0)
    };
    ((x as usize).min(w), (y as usize).min(h))
}

fn ssim(p: &ArrayView2<f64>, gt: &ArrayView2<bool>) -> f64 {
    let n = p.len() as f64;
    let mx = p.sum() / n;
    let my = gt.iter().filter(|&&g| g).count() as f64 / n;
    let denom = (n - 1.0).max(1.0);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    Zip::from(p).and(gt).for_each(|&a, &g| {
        let dx = a - mx;
        let dy = g as u8 as f64 - my;
        vx += dx * dx;
        vy += dy * dy;
        cxy += dx * dy;
    });
    let (vx, vy, cxy) = (vx / denom, vy / denom, cxy / denom);
    let a = 4.0 * mx * my * cxy;
    let b = (mx * mx + my * my) * (vx + vy);
    // b == 0 forces a == 0: both regions are constant and agree
    if b > 0.0 {
        a / b
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn degenerate_masks() {
        let p = array![[0.2, 0.4], [0.6, 0.0]];
        let none = Array2::from_elem((2, 2), false);
        let all = Array2::from_elem((2, 2), true);
        assert!((s_measure_prepared(&p.view(), &none.view(), 0.5) - 0.7).abs() < 1e-12);
        assert!((s_measure_prepared(&p.view(), &all.view(), 0.5) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let gt = Array2::from_shape_fn((12, 10), |(y, x)| (3..8).contains(&y) && (2..6).contains(&x));
        let p = gt.mapv(|g| g as u8 as f64);
        let s = s_measure_prepared(&p.view(), &gt.view(), 0.5);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn inverted_prediction_scores_low() {
        let gt = Array2::from_shape_fn((12, 10), |(y, x)| (3..8).contains(&y) && (2..6).contains(&x));
        let p = gt.mapv(|g| if g { 0.0 } else { 1.0 });
        assert!(s_measure_prepared(&p.view(), &gt.view(), 0.5) < 0.1);
    }

    #[test]
    fn centroid_split() {
        // single foreground pixel at (row 1, col 2)
        let mut gt = Array2::from_elem((4, 5), false);
        gt[[1, 2]] = true;
        assert_eq!(centroid(&gt.view()), (3, 2));
        // half rounds to even like the reference toolbox
        let mut gt = Array2::from_elem((4, 4), false);
        gt[[0, 0]] = true;
        gt[[0, 1]] = true;
        assert_eq!(centroid(&gt.view()), (1, 1));
    }

    #[test]
    fn object_score_hand_value() {
        // mean 0.5, sample variance 0.5
        let want = 1.0 / (0.25 + 1.0 + 0.5f64.sqrt());
        assert!((object_score(&[0.0, 1.0]) - want).abs() < 1e-12);
    }

    #[test]
    fn ssim_branches() {
        let p = array![[0.0, 0.0]];
        let g = array![[false, false]];
        assert_eq!(ssim(&p.view(), &g.view()), 1.0);
        let p = array![[0.0, 1.0]];
        assert_eq!(ssim(&p.view(), &g.view()), 0.0);
    }
}
