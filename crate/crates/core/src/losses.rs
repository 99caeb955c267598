//! Binary cross entropy and the consistency-enhanced loss (CEL), with their
//! closed-form derivatives and the combined training objective.
//!
//! CEL for one image is
//!
//! ```text
//!     sum(p - p*g) + sum(g - p*g)      |FP| + |FN|
//!     ---------------------------  =  ----------------------
//!          sum(p) + sum(g)             |FP| + 2|TP| + |FN|
//! ```
//!
//! and its derivative `(1 - 2g) / S - sum(p + g - 2pg) / S^2` with
//! `S = sum(p + g)` depends on the pixel only through `g`.

use ndarray::{Array4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Var};
use crate::model::{SaliencyPrediction, EPS};
use crate::{Error, Result};

/// Binary mask `N x H x W x 1` with values in {0, 1}.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    data: Array4<f64>,
}

impl GroundTruthMask {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        if data.shape()[3] != 1 {
            return Err(Error::Shape(format!(
                "mask must have one channel, got shape {:?}",
                data.shape()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::NonBinaryMask(v));
        }
        Ok(GroundTruthMask { data })
    }

    /// Stacks `H x W` binary masks.
    pub fn stack(masks: &[ndarray::Array2<f64>]) -> Result<Self> {
        let views: Vec<_> = masks
            .iter()
            .map(|m| m.view().insert_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(3)))
            .collect();
        let data = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot stack masks: {e}")))?;
        Self::new(data)
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CelMode {
    /// CEL per image, averaged over the batch.
    PerImageMean,
    /// One ratio over every pixel of the batch.
    GlobalSum,
}

fn check_shapes(p: &Array4<f64>, g: &Array4<f64>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

fn flat(a: &Array4<f64>) -> std::borrow::Cow<'_, [f64]> {
    match a.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(a.iter().copied().collect()),
    }
}

fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn bce_sum(p: &[f64], g: &[f64]) -> f64 {
    p.iter()
        .zip(g)
        .map(|(&p, &g)| {
            let p = clamp(p);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum()
}

/// CEL of one image, or `None` when it has no foreground. CEL has no
/// logarithm, so predictions are used unclamped.
fn cel_image(p: &[f64], g: &[f64]) -> Option<f64> {
    let (mut num, mut den, mut fg) = (0.0, 0.0, 0.0);
    for (&p, &g) in p.iter().zip(g) {
        num += p + g - 2.0 * p * g;
        den += p + g;
        fg += g;
    }
    (fg > 0.0 && den > 0.0).then(|| num / den)
}

/// Adds `scale * dCEL/dp` for one image into `out`. No-op for images
/// without foreground.
fn cel_image_grad(p: &[f64], g: &[f64], scale: f64, out: &mut [f64]) {
    let (mut num, mut den, mut fg) = (0.0, 0.0, 0.0);
    for (&p, &g) in p.iter().zip(g) {
        num += p + g - 2.0 * p * g;
        den += p + g;
        fg += g;
    }
    if fg <= 0.0 || den <= 0.0 {
        return;
    }
    let shared = num / (den * den);
    for (o, &g) in out.iter_mut().zip(g) {
        *o += scale * ((1.0 - 2.0 * g) / den - shared);
    }
}

/// Binary cross entropy over every pixel.
pub fn bcel(p: &SaliencyPrediction, g: &GroundTruthMask, reduction: Reduction) -> Result<f64> {
    check_shapes(p.data(), g.data())?;
    let total = bce_sum(&flat(p.data()), &flat(g.data()));
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => total / p.data().len() as f64,
    })
}

/// CEL value plus the images that had no foreground (scored 0).
#[derive(Debug, Clone, PartialEq)]
pub struct CelReport {
    pub value: f64,
    pub per_image: Vec<f64>,
    pub degenerate: Vec<usize>,
}

pub fn cel_report(p: &SaliencyPrediction, g: &GroundTruthMask, mode: CelMode) -> Result<CelReport> {
    check_shapes(p.data(), g.data())?;
    let (ps, gs) = (flat(p.data()), flat(g.data()));
    let n = p.data().shape()[0];
    let hw = ps.len() / n.max(1);
    let mut per_image = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let range = i * hw..(i + 1) * hw;
        match cel_image(&ps[range.clone()], &gs[range]) {
            Some(v) => per_image.push(v),
            None => {
                per_image.push(0.0);
                degenerate.push(i);
            }
        }
    }
    let value = match mode {
        CelMode::PerImageMean => per_image.iter().sum::<f64>() / n.max(1) as f64,
        CelMode::GlobalSum => cel_image(&ps, &gs).unwrap_or(0.0),
    };
    Ok(CelReport {
        value,
        per_image,
        degenerate,
    })
}

/// Consistency-enhanced loss, in `[0, 1]`.
pub fn cel(p: &SaliencyPrediction, g: &GroundTruthMask, mode: CelMode) -> Result<f64> {
    cel_report(p, g, mode).map(|r| r.value)
}

/// Closed-form `dCEL/dp` for every pixel.
pub fn cel_grad_analytic(p: &SaliencyPrediction, g: &GroundTruthMask, mode: CelMode) -> Result<Array4<f64>> {
    check_shapes(p.data(), g.data())?;
    let (ps, gs) = (flat(p.data()), flat(g.data()));
    let mut out = vec![0.0; ps.len()];
    add_cel_grad(&ps, &gs, p.data().shape()[0], mode, 1.0, &mut out);
    Ok(Array4::from_shape_vec(p.data().raw_dim(), out).unwrap())
}

fn add_cel_grad(ps: &[f64], gs: &[f64], n: usize, mode: CelMode, scale: f64, out: &mut [f64]) {
    match mode {
        CelMode::PerImageMean => {
            let hw = ps.len() / n.max(1);
            for i in 0..n {
                let r = i * hw..(i + 1) * hw;
                cel_image_grad(&ps[r.clone()], &gs[r.clone()], scale / n as f64, &mut out[r]);
            }
        }
        CelMode::GlobalSum => cel_image_grad(ps, gs, scale, out),
    }
}

/// `dBCE/dp` per pixel (sum reduction) and the number of pixels lying on
/// the clamp boundary, where the derivative of the clamped loss is zero.
#[derive(Debug, Clone)]
pub struct BcelGrad {
    pub grad: Array4<f64>,
    pub clamped: usize,
}

pub fn bcel_grad_analytic(p: &SaliencyPrediction, g: &GroundTruthMask) -> Result<BcelGrad> {
    check_shapes(p.data(), g.data())?;
    let mut clamped = 0;
    let mut grad = p.data().clone();
    ndarray::Zip::from(&mut grad).and(g.data()).for_each(|d, &g| {
        let p = *d;
        if p <= EPS || p >= 1.0 - EPS {
            clamped += 1;
        }
        *d = if p < EPS || p > 1.0 - EPS {
            0.0
        } else {
            -g / p + (1.0 - g) / (1.0 - p)
        };
    });
    Ok(BcelGrad { grad, clamped })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda: f64,
    pub bce_reduction: Reduction,
    pub cel_mode: CelMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 1.0,
            bce_reduction: Reduction::Mean,
            cel_mode: CelMode::PerImageMean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub bcel: f64,
    pub cel: f64,
    pub lambda: f64,
    pub total: f64,
    /// Images scored with the no-foreground fallback.
    pub degenerate_images: Vec<usize>,
}

/// `bcel + lambda * cel`.
pub fn total_loss(p: &SaliencyPrediction, g: &GroundTruthMask, cfg: &LossConfig) -> Result<LossBreakdown> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    let b = bcel(p, g, cfg.bce_reduction)?;
    let c = cel_report(p, g, cfg.cel_mode)?;
    Ok(LossBreakdown {
        bcel: b,
        cel: c.value,
        lambda: cfg.lambda,
        total: b + cfg.lambda * c.value,
        degenerate_images: c.degenerate,
    })
}

/// Total loss as a graph node over an `N x 1 x H x W` probability tensor.
///
/// The backward pass uses the closed-form derivatives above; pixels whose
/// probability lies outside the clamp range receive no BCE gradient.
pub fn loss_node(p: &Var, g: &GroundTruthMask, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    let shape = p.shape().to_vec();
    let gs = g.data().shape();
    if shape.len() != 4 || shape[1] != 1 || [shape[0], shape[2], shape[3]] != [gs[0], gs[1], gs[2]] {
        return Err(Error::Shape(format!(
            "prediction {shape:?} does not match ground truth {gs:?}"
        )));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be >= 0, got {}", cfg.lambda)));
    }
    // N x 1 x H x W and N x H x W x 1 share one memory order
    let pv: Vec<f64> = p.value().iter().copied().collect();
    let gv: Vec<f64> = flat(g.data()).into_owned();
    let n = shape[0];
    let count = pv.len() as f64;

    let bce_total = bce_sum(&pv, &gv);
    let bcel = match cfg.bce_reduction {
        Reduction::Sum => bce_total,
        Reduction::Mean => bce_total / count,
    };
    let hw = pv.len() / n.max(1);
    let mut per_image = Vec::with_capacity(n);
    let mut degenerate = Vec::new();
    for i in 0..n {
        let r = i * hw..(i + 1) * hw;
        match cel_image(&pv[r.clone()], &gv[r]) {
            Some(v) => per_image.push(v),
            None => {
                per_image.push(0.0);
                degenerate.push(i);
            }
        }
    }
    let cel = match cfg.cel_mode {
        CelMode::PerImageMean => per_image.iter().sum::<f64>() / n.max(1) as f64,
        CelMode::GlobalSum => cel_image(&pv, &gv).unwrap_or(0.0),
    };
    let total = bcel + cfg.lambda * cel;
    let breakdown = LossBreakdown {
        bcel,
        cel,
        lambda: cfg.lambda,
        total,
        degenerate_images: degenerate,
    };

    let cfg = *cfg;
    let node = Var::from_op(
        Array::from_elem(IxDyn(&[]), total),
        vec![p.clone()],
        Box::new(move |upstream, _, _| {
            let up = upstream.iter().next().copied().unwrap_or(0.0);
            let bce_scale = match cfg.bce_reduction {
                Reduction::Sum => 1.0,
                Reduction::Mean => 1.0 / count,
            };
            let mut grad: Vec<f64> = pv
                .iter()
                .zip(&gv)
                .map(|(&p, &g)| {
                    if p < EPS || p > 1.0 - EPS {
                        0.0
                    } else {
                        bce_scale * (-g / p + (1.0 - g) / (1.0 - p))
                    }
                })
                .collect();
            if cfg.lambda != 0.0 {
                add_cel_grad(&pv, &gv, n, cfg.cel_mode, cfg.lambda, &mut grad);
            }
            grad.iter_mut().for_each(|d| *d *= up);
            vec![Some(Array::from_shape_vec(IxDyn(&shape), grad).unwrap())]
        }),
    );
    Ok((node, breakdown))
}
