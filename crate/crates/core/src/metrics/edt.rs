//! Exact Euclidean distance transform with nearest-foreground indices
//! (two-pass lower-envelope algorithm of Felzenszwalb and Huttenlocher).

use ndarray::{Array2, ArrayView2};

/// For every pixel, the Euclidean distance to the nearest `true` pixel and
/// that pixel's `(row, col)`. Returns `None` when the mask is all false.
///
/// Ties are broken towards the smaller column, then the smaller row.
pub fn nearest_foreground(mask: &ArrayView2<bool>) -> Option<(Array2<f64>, Array2<(usize, usize)>)> {
    let (h, w) = mask.dim();
    if !mask.iter().any(|&b| b) {
        return None;
    }
    // vertical pass: nearest foreground row within each column
    let mut col_row: Array2<Option<usize>> = Array2::from_elem((h, w), None);
    for x in 0..w {
        let mut last = None;
        for y in 0..h {
            if mask[[y, x]] {
                last = Some(y);
            }
            col_row[[y, x]] = last;
        }
        let mut next = None;
        for y in (0..h).rev() {
            if mask[[y, x]] {
                next = Some(y);
            }
            col_row[[y, x]] = match (col_row[[y, x]], next) {
                (Some(a), Some(b)) => Some(if y - a <= b - y { a } else { b }),
                (a, b) => a.or(b),
            };
        }
    }

    let mut dist = Array2::zeros((h, w));
    let mut idx = Array2::from_elem((h, w), (0, 0));
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    let mut f = vec![0.0; w];
    for y in 0..h {
        sites.clear();
        bounds.clear();
        for x in 0..w {
            let Some(r) = col_row[[y, x]] else { continue };
            let dy = r.abs_diff(y) as f64;
            f[x] = dy * dy;
            // intersection of parabola x with the last envelope parabola
            loop {
                let Some(&q) = sites.last() else {
                    sites.push(x);
                    bounds.push(f64::NEG_INFINITY);
                    break;
                };
                let s = ((f[x] + (x * x) as f64) - (f[q] + (q * q) as f64)) / (2.0 * (x - q) as f64);
                if s <= *bounds.last().unwrap() {
                    sites.pop();
                    bounds.pop();
                } else {
                    sites.push(x);
                    bounds.push(s);
                    break;
                }
            }
        }
        let mut j = 0;
        for x in 0..w {
            while j + 1 < sites.len() && bounds[j + 1] < x as f64 {
                j += 1;
            }
            let q = sites[j];
            let dx = x.abs_diff(q) as f64;
            dist[[y, x]] = (dx * dx + f[q]).sqrt();
            idx[[y, x]] = (col_row[[y, q]].unwrap(), q);
        }
    }
    Some((dist, idx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(mask: &Array2<bool>) -> Array2<f64> {
        let (h, w) = mask.dim();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut best = f64::INFINITY;
            for ((r, c), &m) in mask.indexed_iter() {
                if m {
                    let d = ((r as f64 - y as f64).powi(2) + (c as f64 - x as f64).powi(2)).sqrt();
                    best = best.min(d);
                }
            }
            best
        })
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..40 {
            let h = rng.random_range(1..14);
            let w = rng.random_range(1..14);
            let density = [0.02, 0.1, 0.5, 0.9][trial % 4];
            let mut mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(density));
            if !mask.iter().any(|&b| b) {
                mask[[rng.random_range(0..h), rng.random_range(0..w)]] = true;
            }
            let (dist, idx) = nearest_foreground(&mask.view()).unwrap();
            let want = brute(&mask);
            for ((y, x), &d) in dist.indexed_iter() {
                assert!((d - want[[y, x]]).abs() < 1e-9, "trial {trial} at ({y}, {x})");
                let (r, c) = idx[[y, x]];
                assert!(mask[[r, c]]);
                let via = ((r as f64 - y as f64).powi(2) + (c as f64 - x as f64).powi(2)).sqrt();
                assert!((via - d).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn empty_mask() {
        let mask = Array2::from_elem((3, 3), false);
        assert!(nearest_foreground(&mask.view()).is_none());
    }

    #[test]
    fn foreground_maps_to_itself() {
        let mask = Array2::from_shape_fn((5, 5), |(y, x)| (y + x) % 3 == 0);
        let (dist, idx) = nearest_foreground(&mask.view()).unwrap();
        for ((y, x), &m) in mask.indexed_iter() {
            if m {
                assert_eq!(dist[[y, x]], 0.0);
                assert_eq!(idx[[y, x]], (y, x));
            }
        }
    }
}
