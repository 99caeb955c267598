//! Stride-1 "same" convolution lowered to matrix products over row tiles.

use ndarray::{Array2, ArrayView2, IxDyn};

use super::ops::dims4;
use super::{Array, Var};

/// Upper bound on the number of elements in one unfolded tile.
const TILE_ELEMS: usize = 1 << 21;

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn rows_per_tile(&self) -> usize {
        (TILE_ELEMS / (self.patch() * self.w).max(1)).clamp(1, self.h)
    }

    /// Unfolds rows `r0..r1` of one image into a `(C*k*k, rows*W)` matrix.
    fn unfold(&self, img: &[f64], r0: usize, r1: usize) -> Array2<f64> {
        let Geometry { c, h, w, k, pad } = *self;
        let cols = (r1 - r0) * w;
        let mut out = vec![0.0; self.patch() * cols];
        for ch in 0..c {
            let plane = &img[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in r0..r1 {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let d = &mut dst[(oy - r0) * w..(oy - r0 + 1) * w];
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).min(w as isize) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((self.patch(), cols), out).unwrap()
    }

    /// Adds an unfolded-gradient tile back onto the image gradient.
    fn fold_add(&self, cols_grad: &Array2<f64>, dimg: &mut [f64], r0: usize, r1: usize) {
        let Geometry { c, h, w, k, pad } = *self;
        let cols = (r1 - r0) * w;
        let g = cols_grad.as_slice().expect("standard layout");
        for ch in 0..c {
            let plane = &mut dimg[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ch * k + ky) * k + kx;
                    let src = &g[row * cols..(row + 1) * cols];
                    for oy in r0..r1 {
                        let iy = oy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let s = &src[(oy - r0) * w..(oy - r0 + 1) * w];
                        let shift = kx as isize - pad as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = (w as isize - shift).min(w as isize) as usize;
                        for ox in lo..hi {
                            dst[(ox as isize + shift) as usize] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with stride 1 and zero padding `k / 2` (odd `k` keeps the
/// spatial size). `x` is `(N, C, H, W)`, `weight` is `(O, C, k, k)`, `bias` is `(O)`.
pub fn conv2d(x: &Var, weight: &Var, bias: Option<&Var>) -> Var {
    let (n, c, h, w) = dims4(x.value());
    let (o, wc, k, k2) = dims4(weight.value());
    assert_eq!(c, wc, "conv2d: input has {c} channels, weight expects {wc}");
    assert_eq!(k, k2, "conv2d: non-square kernel");
    assert_eq!(k % 2, 1, "conv2d: kernel size must be odd");
    let geo = Geometry { c, h, w, k, pad: k / 2 };
    let wmat = weight
        .value()
        .view()
        .into_shape_with_order((o, geo.patch()))
        .unwrap()
        .to_owned();
    let src = x.value().as_slice().expect("standard layout");
    let mut out = vec![0.0; n * o * h * w];
    let tile = geo.rows_per_tile();
    for b in 0..n {
        let img = &src[b * c * h * w..(b + 1) * c * h * w];
        let dst = &mut out[b * o * h * w..(b + 1) * o * h * w];
        let mut r0 = 0;
        while r0 < h {
            let r1 = (r0 + tile).min(h);
            let prod = if k == 1 {
                let view = ArrayView2::from_shape((c, h * w), img).unwrap();
                wmat.dot(&view.slice(ndarray::s![.., r0 * w..r1 * w]))
            } else {
                wmat.dot(&geo.unfold(img, r0, r1))
            };
            let cols = (r1 - r0) * w;
            for oc in 0..o {
                let row = prod.row(oc);
                let d = &mut dst[oc * h * w + r0 * w..oc * h * w + r1 * w];
                for (dv, pv) in d.iter_mut().zip(row.iter()) {
                    *dv = *pv;
                }
                debug_assert_eq!(d.len(), cols);
            }
            r0 = r1;
        }
    }
    if let Some(bias) = bias {
        let bs = bias.value().as_slice().expect("standard layout");
        assert_eq!(bs.len(), o, "conv2d: bias length");
        for b in 0..n {
            for oc in 0..o {
                let base = (b * o + oc) * h * w;
                out[base..base + h * w].iter_mut().for_each(|v| *v += bs[oc]);
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, o, h, w]), out).unwrap();

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(bias) = bias {
        parents.push(bias.clone());
    }
    Var::from_op(
        value,
        parents,
        Box::new(move |g, parents, _| {
            let gs = g.as_slice().expect("standard layout");
            let src = parents[0].value().as_slice().expect("standard layout");
            let need_dx = parents[0].requires_grad();
            let need_dw = parents[1].requires_grad();
            let mut dx = vec![0.0; if need_dx { n * c * h * w } else { 0 }];
            let mut dw = Array2::<f64>::zeros((o, geo.patch()));
            for b in 0..n {
                let img = &src[b * c * h * w..(b + 1) * c * h * w];
                let gimg = &gs[b * o * h * w..(b + 1) * o * h * w];
                let gfull = ArrayView2::from_shape((o, h * w), gimg).unwrap();
                let mut r0 = 0;
                while r0 < h {
                    let r1 = (r0 + tile).min(h);
                    let gtile = gfull.slice(ndarray::s![.., r0 * w..r1 * w]);
                    if k == 1 {
                        let view = ArrayView2::from_shape((c, h * w), img).unwrap();
                        let cols = view.slice(ndarray::s![.., r0 * w..r1 * w]);
                        if need_dw {
                            dw += &gtile.dot(&cols.t());
                        }
                        if need_dx {
                            let dcols = wmat.t().dot(&gtile);
                            let dimg = &mut dx[b * c * h * w..(b + 1) * c * h * w];
                            for ch in 0..c {
                                let d = &mut dimg[ch * h * w + r0 * w..ch * h * w + r1 * w];
                                for (dv, v) in d.iter_mut().zip(dcols.row(ch).iter()) {
                                    *dv += *v;
                                }
                            }
                        }
                    } else {
                        let cols = geo.unfold(img, r0, r1);
                        if need_dw {
                            dw += &gtile.dot(&cols.t());
                        }
                        if need_dx {
                            let dcols = wmat.t().dot(&gtile);
                            let dcols = dcols.as_standard_layout();
                            geo.fold_add(
                                &dcols.to_owned(),
                                &mut dx[b * c * h * w..(b + 1) * c * h * w],
                                r0,
                                r1,
                            );
                        }
                    }
                    r0 = r1;
                }
            }
            let mut grads = vec![
                need_dx.then(|| Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                need_dw.then(|| dw.into_shape_with_order(IxDyn(&[o, c, k, k])).unwrap()),
            ];
            if parents.len() == 3 {
                let mut db = vec![0.0; o];
                for b in 0..n {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let base = (b * o + oc) * h * w;
                        *acc += gs[base..base + h * w].iter().sum::<f64>();
                    }
                }
                grads.push(Some(Array::from_shape_vec(IxDyn(&[o]), db).unwrap()));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::{check_op, random};

    /// Direct 7-loop convolution.
    fn naive(x: &Array, wt: &Array, bias: Option<&Array>) -> Array {
        let (n, c, h, w) = dims4(x);
        let (o, _, k, _) = dims4(wt);
        let pad = (k / 2) as isize;
        let x4 = x.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let w4 = wt.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut out = ndarray::Array4::<f64>::zeros((n, o, h, w));
        for b in 0..n {
            for oc in 0..o {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.map(|b| b[[oc]]).unwrap_or(0.0);
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - pad;
                                    let ix = xx as isize + kx as isize - pad;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x4[[b, ic, iy as usize, ix as usize]] * w4[[oc, ic, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[b, oc, y, xx]] = acc;
                    }
                }
            }
        }
        out.into_dyn()
    }

    #[test]
    fn matches_direct_convolution() {
        for &(k, h, w) in &[(3, 5, 4), (1, 3, 3), (5, 4, 6)] {
            let x = random(&[2, 3, h, w], 11);
            let wt = random(&[4, 3, k, k], 12);
            let bias = random(&[4], 13);
            let fast = conv2d(
                &Var::constant(x.clone()),
                &Var::constant(wt.clone()),
                Some(&Var::constant(bias.clone())),
            );
            let slow = naive(&x, &wt, Some(&bias));
            let diff = (fast.value() - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-12, "k={k}: max diff {diff}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = random(&[2, 2, 4, 3], 14);
        let wt = random(&[3, 2, 3, 3], 15);
        let bias = random(&[3], 16);
        check_op(&[x.clone(), wt, bias], |v| conv2d(&v[0], &v[1], Some(&v[2])), 1e-6);
        let wt1 = random(&[2, 2, 1, 1], 17);
        check_op(&[x, wt1], |v| conv2d(&v[0], &v[1], None), 1e-6);
    }

    #[test]
    fn tiling_matches_single_tile() {
        // enough channels to force several row tiles
        let x = random(&[1, 300, 24, 80], 18);
        let wt = random(&[2, 300, 3, 3], 19);
        let geo = Geometry { c: 300, h: 24, w: 80, k: 3, pad: 1 };
        assert!(geo.rows_per_tile() < 24);
        let fast = conv2d(&Var::constant(x.clone()), &Var::constant(wt.clone()), None);
        let slow = naive(&x, &wt, None);
        let diff = (fast.value() - &slow).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-10);
    }
}
