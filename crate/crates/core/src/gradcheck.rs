//! Finite-difference verification of the closed-form BCE and CEL
//! derivatives on random single-image cases.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{bcel, bcel_grad_analytic, cel, cel_grad_analytic, CelMode, GroundTruthMask, Reduction};
use crate::model::SaliencyPrediction;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Images are `size x size`.
    pub size: usize,
    pub seed: u64,
    pub cases: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Negative control: perturbs one analytic CEL entry.
    pub corrupt_analytic: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            size: 8,
            seed: 0,
            cases: 20,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt_analytic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorstPixel {
    pub loss: &'static str,
    pub case: usize,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub bcel_max_rel_err: f64,
    pub cel_max_rel_err: f64,
    pub worst: WorstPixel,
    /// Largest `max - min` of the CEL gradient over foreground pixels.
    pub fg_spread: f64,
    /// Same over background pixels.
    pub bg_spread: f64,
    /// Largest `|(grad_bg - grad_fg) - 2 / sum(p + g)|`.
    pub gap_error: f64,
    pub passed: bool,
}

/// Relative error with a small absolute floor so near-zero gradients do
/// not blow up the ratio.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn random_case(rng: &mut ChaCha8Rng, size: usize) -> (Vec<f64>, Vec<f64>) {
    let n = size * size;
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let mut g: Vec<f64> = (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect();
    // both classes present
    g[0] = 1.0;
    g[n - 1] = 0.0;
    (p, g)
}

fn tensors(p: &[f64], g: &[f64], size: usize) -> (SaliencyPrediction, GroundTruthMask) {
    let p = SaliencyPrediction::from_probabilities(Array4::from_shape_vec((1, size, size, 1), p.to_vec()).unwrap());
    let g = GroundTruthMask::new(Array4::from_shape_vec((1, size, size, 1), g.to_vec()).unwrap()).unwrap();
    (p, g)
}

fn numeric(f: impl Fn(&[f64]) -> f64, p: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = p.to_vec();
    let mut minus = p.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn run(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.size == 0 || opts.cases == 0 || !(opts.step > 0.0) || !(opts.tolerance > 0.0) {
        return Err(Error::Config("gradcheck needs positive size, cases, step and tolerance".into()));
    }
    let s = opts.size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = WorstPixel {
        loss: "cel",
        case: 0,
        row: 0,
        col: 0,
        analytic: 0.0,
        numeric: 0.0,
        rel_err: -1.0,
    };
    let (mut bmax, mut cmax) = (0.0f64, 0.0f64);
    let (mut fg_spread, mut bg_spread, mut gap_error) = (0.0f64, 0.0f64, 0.0f64);

    for case in 0..opts.cases {
        let (p, g) = random_case(&mut rng, s);
        let (pt, gt) = tensors(&p, &g, s);
        let bce_a = bcel_grad_analytic(&pt, &gt)?.grad;
        let mut cel_a = cel_grad_analytic(&pt, &gt, CelMode::PerImageMean)?;
        if opts.corrupt_analytic {
            cel_a[[0, s / 2, s / 2, 0]] *= 1.5;
        }
        let bce_f = |q: &[f64]| {
            let (qt, gt) = tensors(q, &g, s);
            bcel(&qt, &gt, Reduction::Sum).unwrap()
        };
        let cel_f = |q: &[f64]| {
            let (qt, gt) = tensors(q, &g, s);
            cel(&qt, &gt, CelMode::PerImageMean).unwrap()
        };
        for i in 0..s * s {
            let (row, col) = (i / s, i % s);
            for (loss, a, f) in [
                ("bcel", bce_a[[0, row, col, 0]], &bce_f as &dyn Fn(&[f64]) -> f64),
                ("cel", cel_a[[0, row, col, 0]], &cel_f),
            ] {
                let n = numeric(f, &p, i, opts.step);
                let e = rel_err(a, n);
                if loss == "bcel" {
                    bmax = bmax.max(e);
                } else {
                    cmax = cmax.max(e);
                }
                if e > worst.rel_err {
                    worst = WorstPixel {
                        loss,
                        case,
                        row,
                        col,
                        analytic: a,
                        numeric: n,
                        rel_err: e,
                    };
                }
            }
        }

        // within a class the CEL gradient is a single value
        let class_values = |want: f64| -> Vec<f64> {
            cel_a.iter().zip(&g).filter(|(_, &gv)| gv == want).map(|(&d, _)| d).collect()
        };
        let spread = |v: &[f64]| {
            v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
        };
        let (fg, bg) = (class_values(1.0), class_values(0.0));
        fg_spread = fg_spread.max(spread(&fg));
        bg_spread = bg_spread.max(spread(&bg));
        let total: f64 = p.iter().zip(&g).map(|(a, b)| a + b).sum();
        gap_error = gap_error.max(((bg[0] - fg[0]) - 2.0 / total).abs());
    }
    Ok(GradcheckReport {
        cases: opts.cases,
        bcel_max_rel_err: bmax,
        cel_max_rel_err: cmax,
        passed: bmax.max(cmax) < opts.tolerance,
        worst,
        fg_spread,
        bg_spread,
        gap_error,
    })
}
