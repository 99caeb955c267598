//! Aggregate interaction (AIM), self interaction (SIM) and fusion units (FU).
//!
//! Both interaction modules follow the same three steps: per-branch
//! transformation, a cross-resolution exchange, and a fusion that is added
//! onto a residual path.

use serde::{Deserialize, Serialize};

use crate::autograd::{self, Var};
use crate::nn::{BatchNorm2d, Builder, Conv2d, ConvBlock, ParamId, ParamStore, Session};
use crate::{Error, Result};

/// Downsampling used inside the interaction modules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Avg,
    Max,
}

/// Upsampling mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleKind {
    Nearest,
    Bilinear,
}

pub(crate) fn down(x: &Var, kind: PoolKind) -> Var {
    match kind {
        PoolKind::Avg => autograd::avg_pool2(x),
        PoolKind::Max => autograd::max_pool2(x),
    }
}

pub(crate) fn up(x: &Var, kind: UpsampleKind) -> Var {
    match kind {
        UpsampleKind::Nearest => autograd::upsample_nearest2(x),
        UpsampleKind::Bilinear => autograd::upsample_bilinear2(x),
    }
}

fn spatial(x: &Var) -> (usize, usize) {
    (x.shape()[2], x.shape()[3])
}

/// Sum of 3x3 convolutions over several inputs, normalized and rectified.
#[derive(Debug, Clone)]
struct Exchange {
    convs: Vec<Conv2d>,
    norm: BatchNorm2d,
}

impl Exchange {
    fn new(b: &mut Builder, sources: &[(&str, usize)], out_c: usize, momentum: f64) -> Self {
        let convs = sources
            .iter()
            .map(|&(name, in_c)| b.scoped(format!("from_{name}"), |b| Conv2d::new(b, in_c, out_c, 3, false)))
            .collect();
        let norm = b.scoped("bn", |b| BatchNorm2d::new(b, out_c, momentum));
        Exchange { convs, norm }
    }

    fn forward(&self, s: &Session, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(inputs.len(), self.convs.len());
        let mut acc: Option<Var> = None;
        for (conv, x) in self.convs.iter().zip(inputs) {
            let y = conv.forward(s, x)?;
            acc = Some(match acc {
                Some(a) => autograd::add(&a, &y),
                None => y,
            });
        }
        let sum = acc.expect("exchange without inputs");
        Ok(autograd::relu(&self.norm.forward(s, &sum)))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.convs.iter().flat_map(Conv2d::param_ids).collect();
        ids.extend(self.norm.param_ids());
        ids
    }
}

/// Structural options shared by the interaction modules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InteractionOptions {
    pub pool: PoolKind,
    pub upsample: UpsampleKind,
    pub momentum: f64,
}

/// Aggregate interaction module for pyramid level `level`.
///
/// Branch `B^0` carries the finer neighbour, `B^1` the current level and
/// `B^2` the coarser neighbour. Level 0 has no finer neighbour and level 4
/// no coarser one.
#[derive(Debug, Clone)]
pub struct Aim {
    pub level: usize,
    pub out_channels: usize,
    identity: ConvBlock,
    transforms: [Option<ConvBlock>; 3],
    exchanges: [Option<Exchange>; 3],
    merge: ConvBlock,
    opts: InteractionOptions,
}

impl Aim {
    /// `in_channels` lists the encoder widths of (finer, current, coarser);
    /// absent neighbours are `None`.
    pub fn new(
        b: &mut Builder,
        level: usize,
        in_channels: [Option<usize>; 3],
        mid: usize,
        out: usize,
        opts: InteractionOptions,
    ) -> Self {
        let m = opts.momentum;
        let cur_in = in_channels[1].expect("current level input");
        let identity = b.scoped("identity", |b| ConvBlock::cbr(b, cur_in, out, 1, m));
        let transforms = [0, 1, 2].map(|j| {
            in_channels[j].map(|c| b.scoped(format!("transform{j}"), |b| ConvBlock::cbr(b, c, mid, 3, m)))
        });
        let present = [0, 1, 2].map(|j| in_channels[j].is_some());
        // every branch receives its own features plus those of the branches adjacent to it
        let exchanges = [0, 1, 2].map(|j| {
            if !present[j] {
                return None;
            }
            let sources: Vec<(&str, usize)> = [("b0", 0), ("b1", 1), ("b2", 2)]
                .into_iter()
                .filter(|&(_, k)| present[k] && (k == j || k == 1 || j == 1))
                .map(|(name, _)| (name, mid))
                .collect();
            Some(b.scoped(format!("exchange{j}"), |b| Exchange::new(b, &sources, mid, m)))
        });
        let branches = present.iter().filter(|&&p| p).count();
        let merge = b.scoped("merge", |b| ConvBlock::cb(b, branches * mid, out, 3, m));
        Aim {
            level,
            out_channels: out,
            identity,
            transforms,
            exchanges,
            merge,
            opts,
        }
    }

    pub fn branch_count(&self) -> usize {
        self.transforms.iter().filter(|t| t.is_some()).count()
    }

    /// Resamples branch `from` to the resolution of branch `to`.
    fn resample(&self, x: &Var, from: usize, to: usize) -> Var {
        match (from, to) {
            (0, 1) | (1, 2) => down(x, self.opts.pool),
            (2, 1) | (1, 0) => up(x, self.opts.upsample),
            _ => x.clone(),
        }
    }

    pub fn forward(
        &self,
        s: &Session,
        finer: Option<&Var>,
        current: &Var,
        coarser: Option<&Var>,
    ) -> Result<Var> {
        let inputs = [finer, Some(current), coarser];
        for j in [0, 2] {
            let expected = self.transforms[j].is_some();
            if inputs[j].is_some() != expected {
                let which = if j == 0 { "finer" } else { "coarser" };
                return Err(Error::Shape(format!(
                    "AIM{} {} {which} neighbour",
                    self.level,
                    if expected { "requires a" } else { "takes no" }
                )));
            }
        }
        let (h, w) = spatial(current);
        if let Some(f) = finer {
            if spatial(f) != (2 * h, 2 * w) {
                return Err(Error::Shape(format!(
                    "AIM{}: finer input is {:?}, expected {:?}",
                    self.level,
                    spatial(f),
                    (2 * h, 2 * w)
                )));
            }
        }
        if let Some(c) = coarser {
            if (2 * c.shape()[2], 2 * c.shape()[3]) != (h, w) {
                return Err(Error::Shape(format!(
                    "AIM{}: coarser input is {:?}, expected {:?}",
                    self.level,
                    spatial(c),
                    (h / 2, w / 2)
                )));
            }
        }

        let mut t: [Option<Var>; 3] = [None, None, None];
        for j in 0..3 {
            if let (Some(block), Some(x)) = (&self.transforms[j], inputs[j]) {
                t[j] = Some(block.forward(s, x)?);
            }
        }
        let mut exchanged: Vec<Var> = Vec::with_capacity(3);
        for j in 0..3 {
            let Some(ex) = &self.exchanges[j] else { continue };
            let sources: Vec<Var> = (0..3)
                .filter(|&k| t[k].is_some() && (k == j || k == 1 || j == 1))
                .map(|k| self.resample(t[k].as_ref().unwrap(), k, j))
                .collect();
            let y = ex.forward(s, &sources)?;
            exchanged.push(self.resample(&y, j, 1));
        }
        let fused = self.merge.forward(s, &autograd::concat_channels(&exchanged))?;
        let identity = self.identity.forward(s, current)?;
        Ok(autograd::add(&identity, &fused))
    }

    /// Output of the residual path alone.
    pub fn identity_path(&self, s: &Session, current: &Var) -> Result<Var> {
        self.identity.forward(s, current)
    }

    pub fn zero_merge(&self, store: &mut ParamStore) {
        self.merge.zero(store);
    }

    /// Parameter groups by role: `identity`, `branch{j}` and `merge`.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = vec![("identity".to_string(), self.identity.param_ids())];
        for j in 0..3 {
            let mut ids = Vec::new();
            if let Some(t) = &self.transforms[j] {
                ids.extend(t.param_ids());
            }
            if let Some(e) = &self.exchanges[j] {
                ids.extend(e.param_ids());
            }
            if !ids.is_empty() {
                groups.push((format!("branch{j}"), ids));
            }
        }
        groups.push(("merge".to_string(), self.merge.param_ids()));
        groups
    }
}

/// Self interaction module: a high-resolution/narrow branch and a
/// low-resolution/wide branch, merged onto a residual connection.
#[derive(Debug, Clone)]
pub struct Sim {
    pub channels: usize,
    high_in: ConvBlock,
    low_in: ConvBlock,
    high_exchange: Exchange,
    low_exchange: Exchange,
    high_out: ConvBlock,
    low_out: Conv2d,
    low_norm: BatchNorm2d,
    merge: ConvBlock,
    opts: InteractionOptions,
}

impl Sim {
    /// `high` is the width of the full-resolution branch; the half-resolution
    /// branch is twice as wide.
    pub fn new(b: &mut Builder, channels: usize, high: usize, opts: InteractionOptions) -> Self {
        let m = opts.momentum;
        let low = 2 * high;
        Sim {
            channels,
            high_in: b.scoped("high_in", |b| ConvBlock::cbr(b, channels, high, 3, m)),
            low_in: b.scoped("low_in", |b| ConvBlock::cbr(b, channels, low, 3, m)),
            high_exchange: b.scoped("high_exchange", |b| {
                Exchange::new(b, &[("high", high), ("low", low)], high, m)
            }),
            low_exchange: b.scoped("low_exchange", |b| {
                Exchange::new(b, &[("low", low), ("high", high)], low, m)
            }),
            high_out: b.scoped("high_out", |b| ConvBlock::cbr(b, high, high, 3, m)),
            low_out: b.scoped("low_out", |b| Conv2d::new(b, low, high, 3, false)),
            low_norm: b.scoped("low_bn", |b| BatchNorm2d::new(b, high, m)),
            merge: b.scoped("merge", |b| ConvBlock::cbr(b, high, channels, 3, m)),
            opts,
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let (h, w) = spatial(x);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("SIM input {h}x{w} has an odd spatial dimension")));
        }
        let ups = |v: &Var| up(v, self.opts.upsample);
        let t_high = self.high_in.forward(s, x)?;
        let t_low = self.low_in.forward(s, &down(x, self.opts.pool))?;
        let high = self.high_exchange.forward(s, &[t_high.clone(), ups(&t_low)])?;
        let low = self
            .low_exchange
            .forward(s, &[t_low, down(&t_high, self.opts.pool)])?;
        let branch0 = self.high_out.forward(s, &high)?;
        let branch1 = autograd::relu(&self.low_norm.forward(s, &ups(&self.low_out.forward(s, &low)?)));
        let merged = self.merge.forward(s, &autograd::add(&branch0, &branch1))?;
        Ok(autograd::add(x, &merged))
    }

    pub fn zero_merge(&self, store: &mut ParamStore) {
        self.merge.zero(store);
    }

    /// Parameter groups by role: `high` (B^0), `low` (B^1) and `merge`.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut high = self.high_in.param_ids();
        high.extend(self.high_exchange.param_ids());
        high.extend(self.high_out.param_ids());
        let mut low = self.low_in.param_ids();
        low.extend(self.low_exchange.param_ids());
        low.extend(self.low_out.param_ids());
        low.extend(self.low_norm.param_ids());
        vec![
            ("high".to_string(), high),
            ("low".to_string(), low),
            ("merge".to_string(), self.merge.param_ids()),
        ]
    }
}

/// Fusion unit: 3x3 convolution, batch normalization, ReLU.
#[derive(Debug, Clone)]
pub struct FusionUnit {
    block: ConvBlock,
}

impl FusionUnit {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, momentum: f64) -> Self {
        FusionUnit {
            block: ConvBlock::cbr(b, in_c, out_c, 3, momentum),
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        self.block.forward(s, x)
    }

    pub fn out_channels(&self) -> usize {
        self.block.out_channels()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.block.param_ids()
    }
}
