use ndarray::{Axis, IxDyn, Slice};

use super::{Array, Var};

pub(crate) fn dims4(a: &Array) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected an NCHW tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn slice(a: &Array) -> &[f64] {
    a.as_slice().expect("standard layout")
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Var, b: &Var) -> Var {
    assert_eq!(a.shape(), b.shape(), "add: shape mismatch");
    let value = a.value() + b.value();
    Var::from_op(
        value,
        vec![a.clone(), b.clone()],
        Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
    )
}

pub fn relu(x: &Var) -> Var {
    let value = x.value().mapv(|v| v.max(0.0));
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(|g, parents, _| {
            let mut dx = g.clone();
            dx.zip_mut_with(parents[0].value(), |d, &v| {
                if v <= 0.0 {
                    *d = 0.0
                }
            });
            vec![Some(dx)]
        }),
    )
}

pub fn sigmoid(x: &Var) -> Var {
    let value = x.value().mapv(|v| 1.0 / (1.0 + (-v).exp()));
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(|g, _, out| {
            let mut dx = g.clone();
            dx.zip_mut_with(out, |d, &s| *d *= s * (1.0 - s));
            vec![Some(dx)]
        }),
    )
}

/// Scalar `sum(x * weights)`.
pub fn weighted_sum(x: &Var, weights: &Array) -> Var {
    assert_eq!(x.shape(), weights.shape(), "weighted_sum: shape mismatch");
    let total: f64 = slice(x.value())
        .iter()
        .zip(weights.iter())
        .map(|(a, b)| a * b)
        .sum();
    let weights = weights.clone();
    Var::from_op(
        Array::from_elem(IxDyn(&[]), total),
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let scale = g.iter().next().copied().unwrap_or(0.0);
            vec![Some(weights.mapv(|w| w * scale))]
        }),
    )
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[Var]) -> Var {
    assert!(!parts.is_empty(), "concat of nothing");
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::concatenate(Axis(1), &views).expect("concat: incompatible shapes");
    let widths: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
    Var::from_op(
        value,
        parts.to_vec(),
        Box::new(move |g, _, _| {
            let mut start = 0;
            widths
                .iter()
                .map(|&w| {
                    let part = g.slice_axis(Axis(1), Slice::from(start..start + w)).to_owned();
                    start += w;
                    Some(part)
                })
                .collect()
        }),
    )
}

fn check_even(h: usize, w: usize, op: &str) {
    assert!(
        h % 2 == 0 && w % 2 == 0,
        "{op}: spatial size {h}x{w} must be even"
    );
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x.value());
    check_even(h, w, "avg_pool2");
    let (oh, ow) = (h / 2, w / 2);
    let src = slice(x.value());
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                o[y * ow + xx] = 0.25 * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gs = slice(g);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                let gp = &gs[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        let v = 0.25 * gp[y * ow + xx];
                        let i = 2 * y * w + 2 * xx;
                        d[i] = v;
                        d[i + 1] = v;
                        d[i + w] = v;
                        d[i + w + 1] = v;
                    }
                }
            }
            vec![Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }),
    )
}

fn argmax_2x2(s: &[f64], i: usize, w: usize) -> usize {
    let mut best = i;
    for j in [i + 1, i + w, i + w + 1] {
        if s[j] > s[best] {
            best = j;
        }
    }
    best
}

/// 2x2 max pooling with stride 2. Ties route the gradient to the first maximum.
pub fn max_pool2(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x.value());
    check_even(h, w, "max_pool2");
    let (oh, ow) = (h / 2, w / 2);
    let src = slice(x.value());
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                o[y * ow + xx] = s[argmax_2x2(s, 2 * y * w + 2 * xx, w)];
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, parents, _| {
            let src = slice(parents[0].value());
            let gs = slice(g);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let s = &src[plane * h * w..(plane + 1) * h * w];
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let j = argmax_2x2(s, 2 * y * w + 2 * xx, w);
                        d[j] += gs[plane * oh * ow + y * ow + xx];
                    }
                }
            }
            vec![Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }),
    )
}

/// Nearest-neighbour upsampling by a factor of two.
pub fn upsample_nearest2(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x.value());
    let (oh, ow) = (2 * h, 2 * w);
    let src = slice(x.value());
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                o[y * ow + xx] = s[(y / 2) * w + xx / 2];
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gs = slice(g);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                let gp = &gs[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    for xx in 0..ow {
                        d[(y / 2) * w + xx / 2] += gp[y * ow + xx];
                    }
                }
            }
            vec![Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }),
    )
}

/// Source taps `(lo, hi, weight_of_hi)` for half-pixel-centred 2x upsampling.
fn bilinear_taps(len: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(len - 1);
            let hi = (lo + 1).min(len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear upsampling by a factor of two with half-pixel centres
/// (the `align_corners = false` convention).
pub fn upsample_bilinear2(x: &Var) -> Var {
    let (n, c, h, w) = dims4(x.value());
    let (oh, ow) = (2 * h, 2 * w);
    let rows = bilinear_taps(h);
    let cols = bilinear_taps(w);
    let src = slice(x.value());
    let mut out = vec![0.0; n * c * oh * ow];
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let o = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
            for (xx, &(x0, x1, lx)) in cols.iter().enumerate() {
                let top = s[y0 * w + x0] * (1.0 - lx) + s[y0 * w + x1] * lx;
                let bottom = s[y1 * w + x0] * (1.0 - lx) + s[y1 * w + x1] * lx;
                o[y * ow + xx] = top * (1.0 - ly) + bottom * ly;
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap();
    Var::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let gs = slice(g);
            let mut dx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let d = &mut dx[plane * h * w..(plane + 1) * h * w];
                let gp = &gs[plane * oh * ow..(plane + 1) * oh * ow];
                for (y, &(y0, y1, ly)) in rows.iter().enumerate() {
                    for (xx, &(x0, x1, lx)) in cols.iter().enumerate() {
                        let v = gp[y * ow + xx];
                        d[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        d[y0 * w + x1] += v * (1.0 - ly) * lx;
                        d[y1 * w + x0] += v * ly * (1.0 - lx);
                        d[y1 * w + x1] += v * ly * lx;
                    }
                }
            }
            vec![Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap())]
        }),
    )
}

/// Per-channel batch statistics observed by a training-mode normalization.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var_unbiased: Vec<f64>,
}

/// Batch normalization over (N, H, W) using batch statistics.
pub fn batch_norm_train(x: &Var, gamma: &Var, beta: &Var, eps: f64) -> (Var, BatchStats) {
    let (n, c, h, w) = dims4(x.value());
    let hw = h * w;
    let m = (n * hw) as f64;
    let src = slice(x.value());
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += src[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        mean[ch] = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += src[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|&t| (t - mean[ch]) * (t - mean[ch]))
                .sum::<f64>();
        }
        var[ch] = v / m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let gs = slice(gamma.value()).to_vec();
    let bs = slice(beta.value());
    let mut normed = vec![0.0; src.len()];
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (src[i] - mean[ch]) * inv_std[ch];
                normed[i] = xh;
                out[i] = gs[ch] * xh + bs[ch];
            }
        }
    }
    let stats = BatchStats {
        mean,
        var_unbiased: var
            .iter()
            .map(|v| if m > 1.0 { v * m / (m - 1.0) } else { *v })
            .collect(),
    };
    let value = Array::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
    let var = Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, _, _| {
            let gsl = slice(g);
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dbeta[ch] += gsl[i];
                        dgamma[ch] += gsl[i] * normed[i];
                    }
                }
            }
            let mut dx = vec![0.0; gsl.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let k = gs[ch] * inv_std[ch] / m;
                    for i in base..base + hw {
                        dx[i] = k * (m * gsl[i] - dbeta[ch] - normed[i] * dgamma[ch]);
                    }
                }
            }
            vec![
                Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                Some(Array::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                Some(Array::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        }),
    );
    (var, stats)
}

/// Batch normalization with fixed statistics.
pub fn batch_norm_eval(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Var {
    let (n, c, h, w) = dims4(x.value());
    let hw = h * w;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = mean.to_vec();
    let src = slice(x.value());
    let gs = slice(gamma.value());
    let bs = slice(beta.value());
    let mut out = vec![0.0; src.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gs[ch] * inv_std[ch];
            for i in base..base + hw {
                out[i] = (src[i] - mean[ch]) * scale + bs[ch];
            }
        }
    }
    let value = Array::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
    Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g, parents, _| {
            let gsl = slice(g);
            let src = slice(parents[0].value());
            let gamma = slice(parents[1].value());
            let mut dx = vec![0.0; gsl.len()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = gsl[i] * gamma[ch] * inv_std[ch];
                        dgamma[ch] += gsl[i] * (src[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gsl[i];
                    }
                }
            }
            vec![
                Some(Array::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()),
                Some(Array::from_shape_vec(IxDyn(&[c]), dgamma).unwrap()),
                Some(Array::from_shape_vec(IxDyn(&[c]), dbeta).unwrap()),
            ]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::testing::{check_op, random};

    #[test]
    fn relu_and_sigmoid_gradients() {
        // keep relu inputs away from the kink
        let x = random(&[2, 3, 2, 2], 1).mapv(|v| if v.abs() < 0.05 { 0.3 } else { v });
        check_op(&[x.clone()], |v| relu(&v[0]), 1e-6);
        check_op(&[x], |v| sigmoid(&v[0]), 1e-6);
    }

    #[test]
    fn add_and_concat_gradients() {
        let a = random(&[1, 2, 2, 2], 2);
        let b = random(&[1, 2, 2, 2], 3);
        let c = random(&[1, 3, 2, 2], 4);
        check_op(&[a.clone(), b], |v| add(&v[0], &v[1]), 1e-6);
        check_op(&[a, c], |v| concat_channels(v), 1e-6);
    }

    #[test]
    fn pooling_gradients() {
        let x = random(&[2, 2, 4, 6], 5);
        check_op(&[x.clone()], |v| avg_pool2(&v[0]), 1e-6);
        check_op(&[x], |v| max_pool2(&v[0]), 1e-6);
    }

    #[test]
    fn upsampling_gradients() {
        let x = random(&[1, 2, 3, 4], 6);
        check_op(&[x.clone()], |v| upsample_nearest2(&v[0]), 1e-6);
        check_op(&[x], |v| upsample_bilinear2(&v[0]), 1e-6);
    }

    #[test]
    fn batch_norm_gradients() {
        let x = random(&[2, 3, 2, 2], 7);
        let gamma = random(&[3], 8);
        let beta = random(&[3], 9);
        check_op(
            &[x.clone(), gamma.clone(), beta.clone()],
            |v| batch_norm_train(&v[0], &v[1], &v[2], 1e-5).0,
            1e-5,
        );
        let mean = [0.1, -0.2, 0.3];
        let var = [1.5, 0.5, 2.0];
        check_op(
            &[x, gamma, beta],
            |v| batch_norm_eval(&v[0], &v[1], &v[2], &mean, &var, 1e-5),
            1e-6,
        );
    }

    #[test]
    fn bilinear_matches_half_pixel_convention() {
        // 1x2 row [0, 1] upsampled to 4 samples: 0, 0.25, 0.75, 1
        let x = Var::constant(Array::from_shape_vec(IxDyn(&[1, 1, 1, 2]), vec![0.0, 1.0]).unwrap());
        let y = upsample_bilinear2(&x);
        let row: Vec<f64> = y.value().iter().take(4).copied().collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn batch_norm_normalizes() {
        let x = Var::constant(random(&[4, 2, 3, 3], 10));
        let ones = Var::constant(Array::ones(IxDyn(&[2])));
        let zeros = Var::constant(Array::zeros(IxDyn(&[2])));
        let (y, stats) = batch_norm_train(&x, &ones, &zeros, 0.0);
        for ch in 0..2 {
            let lane = y.value().index_axis(Axis(1), ch);
            assert!(lane.mean().unwrap().abs() < 1e-12);
            let var = lane.mapv(|v| v * v).mean().unwrap();
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(stats.mean.len(), 2);
    }
}
