//! The full top-down network and its ablation variants.

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, no_grad, Var};
use crate::backbone::{Backbone, BackboneConfig, FeatureExtractor, ImageBatch, LEVELS};
use crate::interaction::{up, Aim, FusionUnit, InteractionOptions, PoolKind, Sim, UpsampleKind};
use crate::nn::{Builder, Conv2d, ConvBlock, ParamId, ParamStore, Session};
use crate::{Error, Result};

/// Lower clamp for probabilities; the upper clamp is `1 - EPS`.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Decoder width per level.
    pub channels: [usize; LEVELS],
    /// Width of the interaction branches inside each AIM.
    pub aim_mid_channels: [usize; LEVELS],
    /// Width of the full-resolution SIM branch; the half-resolution branch is twice as wide.
    pub sim_high_channels: [usize; LEVELS],
    pub use_aim: bool,
    pub use_sim: bool,
    pub pool: PoolKind,
    pub branch_upsample: UpsampleKind,
    pub decoder_upsample: UpsampleKind,
    pub head_kernel: usize,
    pub bn_momentum: f64,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::toy(),
            channels: [32, 64, 64, 64, 64],
            aim_mid_channels: [16, 32, 32, 32, 32],
            sim_high_channels: [16, 32, 32, 32, 32],
            use_aim: true,
            use_sim: true,
            pool: PoolKind::Avg,
            branch_upsample: UpsampleKind::Nearest,
            decoder_upsample: UpsampleKind::Bilinear,
            head_kernel: 3,
            bn_momentum: 0.1,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vgg16() -> Self {
        ModelConfig {
            backbone: BackboneConfig::vgg16(),
            ..Default::default()
        }
    }

    /// FPN-like reference: lateral 1x1 convolutions and FU-only decoder units.
    pub fn baseline(mut self) -> Self {
        self.use_aim = false;
        self.use_sim = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let all = self
            .channels
            .iter()
            .chain(&self.aim_mid_channels)
            .chain(&self.sim_high_channels);
        if all.clone().any(|&c| c == 0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Field-by-field differences against another configuration.
    pub fn diff(&self, other: &ModelConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_json("", &a, &b, &mut out);
        out
    }
}

fn diff_json(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, v) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(w) => diff_json(&p, v, w, out),
                    None => out.push(format!("{p}: {v} vs <missing>")),
                }
            }
        }
        _ if a != b => out.push(format!("{path}: {a} vs {b}")),
        _ => {}
    }
}

/// Probabilities `N x H x W x 1` in `[0, 1]`. Network outputs are further
/// clamped to `[EPS, 1 - EPS]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyPrediction {
    data: Array4<f64>,
}

impl SaliencyPrediction {
    /// Wraps raw probabilities, clamping them to `[0, 1]`.
    pub fn from_probabilities(data: Array4<f64>) -> Self {
        SaliencyPrediction {
            data: data.mapv(|p| p.clamp(0.0, 1.0)),
        }
    }

    /// Converts an `N x 1 x H x W` network output.
    pub(crate) fn from_nchw(p: &Var) -> Self {
        let a = p
            .value()
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("prediction is 4-D")
            .permuted_axes([0, 2, 3, 1])
            .mapv(|p| p.clamp(EPS, 1.0 - EPS));
        SaliencyPrediction { data: a }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    /// Probability map of image `i` as `H x W`.
    pub fn image(&self, i: usize) -> ndarray::Array2<f64> {
        self.data.index_axis(Axis(0), i).index_axis(Axis(2), 0).to_owned()
    }
}

/// Intermediate decoder tensors, finest level first.
#[derive(Debug, Clone)]
pub struct DecoderState {
    pub aim: Vec<Var>,
    pub add: Vec<Var>,
    pub sim: Vec<Var>,
}

enum Lateral {
    Aim(Aim),
    Plain(ConvBlock),
}

impl Lateral {
    fn forward(&self, s: &Session, feats: &[Var], i: usize) -> Result<Var> {
        match self {
            Lateral::Aim(aim) => aim.forward(
                s,
                i.checked_sub(1).map(|j| &feats[j]),
                &feats[i],
                feats.get(i + 1),
            ),
            Lateral::Plain(block) => block.forward(s, &feats[i]),
        }
    }
}

/// Encoder, lateral modules (AIMs or plain 1x1 projections), optional SIMs,
/// fusion units and the prediction head.
pub struct MiNet {
    pub config: ModelConfig,
    backbone: Backbone,
    laterals: Vec<Lateral>,
    sims: Vec<Sim>,
    fusion: Vec<FusionUnit>,
    head: Conv2d,
}

impl std::fmt::Debug for MiNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MiNet").field("config", &self.config).finish()
    }
}

impl MiNet {
    /// Builds the network with a built-in backbone, returning it with freshly
    /// initialized parameters.
    pub fn build(cfg: &ModelConfig) -> Result<(MiNet, ParamStore)> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.init_seed);
        let backbone = Backbone::build(&mut b, &cfg.backbone, cfg.bn_momentum)?;
        let net = Self::assemble(&mut b, cfg, backbone);
        Ok((net, b.finish()))
    }

    /// Builds the network on top of a caller-supplied encoder whose
    /// parameters are allocated from the same builder.
    pub fn build_with_extractor(
        cfg: &ModelConfig,
        make: impl FnOnce(&mut Builder) -> Box<dyn FeatureExtractor>,
    ) -> Result<(MiNet, ParamStore)> {
        cfg.validate()?;
        let mut b = Builder::new(cfg.init_seed);
        let extractor = b.scoped("backbone", make);
        let backbone = Backbone::external(&cfg.backbone, extractor);
        let mut cfg = cfg.clone();
        cfg.backbone = backbone.config.clone();
        let net = Self::assemble(&mut b, &cfg, backbone);
        Ok((net, b.finish()))
    }

    fn assemble(b: &mut Builder, cfg: &ModelConfig, backbone: Backbone) -> MiNet {
        let enc = backbone.channels();
        let m = cfg.bn_momentum;
        let opts = InteractionOptions {
            pool: cfg.pool,
            upsample: cfg.branch_upsample,
            momentum: m,
        };
        let laterals = (0..LEVELS)
            .map(|i| {
                if cfg.use_aim {
                    let ins = [
                        i.checked_sub(1).map(|j| enc[j]),
                        Some(enc[i]),
                        (i + 1 < LEVELS).then(|| enc[i + 1]),
                    ];
                    Lateral::Aim(b.scoped(format!("aim{i}"), |b| {
                        Aim::new(b, i, ins, cfg.aim_mid_channels[i], cfg.channels[i], opts)
                    }))
                } else {
                    Lateral::Plain(b.scoped(format!("lateral{i}"), |b| {
                        ConvBlock::cbr(b, enc[i], cfg.channels[i], 1, m)
                    }))
                }
            })
            .collect();
        let sims = if cfg.use_sim {
            (0..LEVELS)
                .map(|i| {
                    b.scoped(format!("sim{i}"), |b| {
                        Sim::new(b, cfg.channels[i], cfg.sim_high_channels[i], opts)
                    })
                })
                .collect()
        } else {
            Vec::new()
        };
        let fusion = (0..LEVELS)
            .map(|i| {
                let out = cfg.channels[i.saturating_sub(1)];
                b.scoped(format!("fu{i}"), |b| FusionUnit::new(b, cfg.channels[i], out, m))
            })
            .collect();
        let head = b.scoped("head", |b| Conv2d::new(b, cfg.channels[0], 1, cfg.head_kernel, true));
        MiNet {
            config: cfg.clone(),
            backbone,
            laterals,
            sims,
            fusion,
            head,
        }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn aims(&self) -> Vec<&Aim> {
        self.laterals
            .iter()
            .filter_map(|l| match l {
                Lateral::Aim(a) => Some(a),
                Lateral::Plain(_) => None,
            })
            .collect()
    }

    pub fn sims(&self) -> &[Sim] {
        &self.sims
    }

    pub fn fusion_units(&self) -> &[FusionUnit] {
        &self.fusion
    }

    pub fn head_params(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }

    /// Runs the network, returning the `N x 1 x H x W` probability node and
    /// every decoder intermediate.
    pub fn forward(&self, s: &Session, images: &ImageBatch) -> Result<(Var, DecoderState)> {
        let pyramid = self.backbone.extract(s, images)?;
        let feats = &pyramid.levels;
        let aim = (0..LEVELS)
            .map(|i| self.laterals[i].forward(s, feats, i))
            .collect::<Result<Vec<_>>>()?;

        let mut add: Vec<Option<Var>> = vec![None; LEVELS];
        let mut sim: Vec<Option<Var>> = vec![None; LEVELS];
        let mut carry = aim[LEVELS - 1].clone();
        for i in (0..LEVELS).rev() {
            let f_add = if i == LEVELS - 1 {
                carry.clone()
            } else {
                autograd::add(&aim[i], &carry)
            };
            let f_sim = match self.sims.get(i) {
                Some(m) => m.forward(s, &f_add)?,
                None => f_add.clone(),
            };
            let fused = self.fusion[i].forward(s, &f_sim)?;
            carry = if i > 0 {
                up(&fused, self.config.decoder_upsample)
            } else {
                fused
            };
            add[i] = Some(f_add);
            sim[i] = Some(f_sim);
        }
        let logits = self.head.forward(s, &carry)?;
        let p = autograd::sigmoid(&logits);
        let state = DecoderState {
            aim,
            add: add.into_iter().map(Option::unwrap).collect(),
            sim: sim.into_iter().map(Option::unwrap).collect(),
        };
        Ok((p, state))
    }

    /// Inference-mode prediction without graph recording.
    pub fn predict(&self, store: &ParamStore, images: &ImageBatch) -> Result<SaliencyPrediction> {
        let _g = no_grad();
        let (p, _) = self.forward(&Session::new(store, false), images)?;
        Ok(SaliencyPrediction::from_nchw(&p))
    }

    /// Inference-mode prediction plus decoder intermediates.
    pub fn predict_with_state(
        &self,
        store: &ParamStore,
        images: &ImageBatch,
    ) -> Result<(SaliencyPrediction, DecoderState)> {
        let _g = no_grad();
        let (p, state) = self.forward(&Session::new(store, false), images)?;
        Ok((SaliencyPrediction::from_nchw(&p), state))
    }
}

/// Rows of the ablation lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub aim: bool,
    pub sim: bool,
    pub cel: bool,
}

impl Ablation {
    pub const ROWS: [&'static str; 5] = ["baseline", "+aim", "+sim", "+aim+sim", "+aim+sim+cel"];

    pub fn parse(name: &str) -> Result<Self> {
        let row = match name.trim() {
            "baseline" => (false, false, false),
            "+aim" => (true, false, false),
            "+sim" => (false, true, false),
            "+aim+sim" => (true, true, false),
            "+aim+sim+cel" => (true, true, true),
            other => return Err(Error::Config(format!("unknown ablation row `{other}`"))),
        };
        Ok(Ablation {
            aim: row.0,
            sim: row.1,
            cel: row.2,
        })
    }

    pub fn name(&self) -> String {
        if !self.aim && !self.sim && !self.cel {
            return "baseline".into();
        }
        let mut s = String::new();
        for (on, tag) in [(self.aim, "+aim"), (self.sim, "+sim"), (self.cel, "+cel")] {
            if on {
                s.push_str(tag);
            }
        }
        s
    }

    pub fn apply(&self, cfg: &ModelConfig) -> ModelConfig {
        ModelConfig {
            use_aim: self.aim,
            use_sim: self.sim,
            ..cfg.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn images(n: usize, size: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_fn((n, size, size, 3), |(b, y, x, c)| {
            ((b * 13 + y * 7 + x * 3 + c * 5) % 17) as f64 / 16.0
        }))
        .unwrap()
    }

    #[test]
    fn forward_shapes_and_state_invariants() {
        let (net, store) = MiNet::build(&ModelConfig::default()).unwrap();
        let (p, st) = net.predict_with_state(&store, &images(2, 32)).unwrap();
        assert_eq!(p.data().shape(), [2, 32, 32, 1]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(st.add[4].value(), st.aim[4].value());
        assert_eq!(st.add[0].shape()[1], 32);
        for i in 0..LEVELS {
            assert_eq!(st.aim[i].shape()[1], if i == 0 { 32 } else { 64 });
            assert_eq!(st.sim[i].shape(), st.add[i].shape());
        }
    }

    #[test]
    fn constant_zero_image_stays_in_open_interval() {
        let (net, store) = MiNet::build(&ModelConfig::default()).unwrap();
        let zero = ImageBatch::new(Array4::zeros((1, 32, 32, 3))).unwrap();
        let p = net.predict(&store, &zero).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn baseline_is_smaller_and_keeps_io_contract() {
        let full = MiNet::build(&ModelConfig::default()).unwrap().1.num_scalars();
        let (net, store) = MiNet::build(&ModelConfig::default().baseline()).unwrap();
        assert!(store.num_scalars() < full);
        assert!(net.aims().is_empty() && net.sims().is_empty());
        let p = net.predict(&store, &images(1, 64)).unwrap();
        assert_eq!(p.data().shape(), [1, 64, 64, 1]);
    }

    #[test]
    fn ablation_rows_round_trip() {
        for row in Ablation::ROWS {
            let a = Ablation::parse(row).unwrap();
            assert_eq!(a.name(), row);
            let (net, _) = MiNet::build(&a.apply(&ModelConfig::default())).unwrap();
            assert_eq!(net.aims().len(), if a.aim { 5 } else { 0 });
            assert_eq!(net.sims().len(), if a.sim { 5 } else { 0 });
        }
        assert!(Ablation::parse("+ppm").is_err());
    }

    #[test]
    fn aim_only_variant_keeps_channel_invariant() {
        let cfg = Ablation::parse("+aim").unwrap().apply(&ModelConfig::default());
        let (net, store) = MiNet::build(&cfg).unwrap();
        let (_, st) = net.predict_with_state(&store, &images(1, 32)).unwrap();
        let widths: Vec<usize> = st.aim.iter().map(|a| a.shape()[1]).collect();
        assert_eq!(widths, [32, 64, 64, 64, 64]);
    }

    #[test]
    fn config_diff_names_fields() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.use_sim = false;
        b.backbone.channels[0] = 8;
        let d = a.diff(&b);
        assert_eq!(d.len(), 2);
        assert!(d.iter().any(|l| l.starts_with("use_sim")));
        assert!(d.iter().any(|l| l.starts_with("backbone.channels")));
    }
}
