//! Weighted F-measure: errors are spread by a Gaussian, background errors
//! are weighted up by their distance from the object.

use ndarray::{Array2, ArrayView2};

use super::edt::nearest_foreground;

const EPS: f64 = f64::EPSILON;
const KERNEL: usize = 7;
const SIGMA: f64 = 5.0;

fn gaussian_kernel() -> Array2<f64> {
    let r = (KERNEL / 2) as f64;
    let k = Array2::from_shape_fn((KERNEL, KERNEL), |(y, x)| {
        let (dy, dx) = (y as f64 - r, x as f64 - r);
        (-(dx * dx + dy * dy) / (2.0 * SIGMA * SIGMA)).exp()
    });
    let total = k.sum();
    k / total
}

/// Same-size correlation with zero padding.
fn filter_same(img: &Array2<f64>, kernel: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let r = (kernel.nrows() / 2) as isize;
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut acc = 0.0;
        for ((ky, kx), &kv) in kernel.indexed_iter() {
            let sy = y as isize + ky as isize - r;
            let sx = x as isize + kx as isize - r;
            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                acc += kv * img[[sy as usize, sx as usize]];
            }
        }
        acc
    })
}

pub(crate) fn weighted_f_prepared(p: &ArrayView2<f64>, gt: &ArrayView2<bool>, beta_sq: f64) -> f64 {
    let Some((dist, nearest)) = nearest_foreground(gt) else {
        return 0.0;
    };
    let err = Array2::from_shape_fn(p.dim(), |(y, x)| (p[[y, x]] - gt[[y, x]] as u8 as f64).abs());
    // background pixels inherit the error of their nearest object pixel
    let et = Array2::from_shape_fn(p.dim(), |ix| if gt[ix] { err[ix] } else { err[nearest[ix]] });
    let ea = filter_same(&et, &gaussian_kernel());

    let (mut fg, mut fg_err, mut bg_err) = (0usize, 0.0, 0.0);
    for ((ix, &g), &e) in gt.indexed_iter().zip(err.iter()) {
        if g {
            fg += 1;
            fg_err += ea[ix].min(e);
        } else {
            let b = 2.0 - ((0.5f64).ln() / 5.0 * dist[ix]).exp();
            bg_err += e * b;
        }
    }
    let tp = fg as f64 - fg_err;
    let recall = 1.0 - fg_err / fg as f64;
    let precision = tp / (tp + bg_err + EPS);
    (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision + EPS)
}
