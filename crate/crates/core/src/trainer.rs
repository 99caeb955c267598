//! Momentum SGD with the poly schedule, checkpointing and CSV loss logs.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Array, Gradients};
use crate::checkpoint::Checkpoint;
use crate::data::{augment, sample_rng, stack, AugmentationConfig, Dataset, SamplePair};
use crate::imageio::{quantize, write_gray};
use crate::losses::{loss_node, CelMode, LossBreakdown, LossConfig, Reduction};
use crate::metrics::{evaluate_pairs, MetricConfig, MetricReport, NamedImage};
use crate::model::{MiNet, ModelConfig};
use crate::nn::{ParamKind, ParamStore, Session};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    /// Applied to convolution kernels only.
    pub weight_decay: f64,
    pub poly_power: f64,
    pub lambda_cel: f64,
    pub seed: u64,
    /// Optional global gradient-norm ceiling.
    pub grad_clip: Option<f64>,
    pub bce_reduction: Reduction,
    pub cel_mode: CelMode,
    /// Keep backbone normalization layers on their running statistics.
    pub freeze_backbone_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr0: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            poly_power: 0.9,
            lambda_cel: 1.0,
            seed: 0,
            grad_clip: None,
            bce_reduction: Reduction::Mean,
            cel_mode: CelMode::PerImageMean,
            freeze_backbone_norm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.poly_power > 0.0) {
            return bad("poly_power must be positive");
        }
        if !(self.lambda_cel >= 0.0) {
            return bad("lambda_cel must be non-negative");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive");
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda_cel,
            bce_reduction: self.bce_reduction,
            cel_mode: self.cel_mode,
        }
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn total_iterations(&self, samples: usize) -> usize {
        self.epochs * self.steps_per_epoch(samples)
    }
}

/// `lr0 * (1 - t / total)^power` for `0 <= t <= total`.
pub fn poly_lr(t: usize, total: usize, lr0: f64, power: f64) -> Result<f64> {
    if t > total || total == 0 {
        return Err(Error::Config(format!("iteration {t} outside schedule of {total}")));
    }
    Ok(lr0 * (1.0 - t as f64 / total as f64).powf(power))
}

/// Progress of a run. Data order and augmentation are pure functions of
/// `(seed, sample id, epoch)`, so `seed` and `epoch` are the whole RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_iteration: usize,
    pub total_iterations: usize,
    pub current_lr: f64,
    pub seed: u64,
    pub best_validation_f_avg: Option<f64>,
    pub best_epoch_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub bcel: f64,
    pub cel: f64,
    pub total: f64,
}

/// PyTorch-style SGD: `v = mu v + (g + wd w)`, `w -= lr v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: Vec<Option<Array>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64, cfg: &TrainConfig) {
        let n = store.params().len();
        self.velocity.resize(n, None);
        let scale = match cfg.grad_clip {
            Some(c) => {
                let norm = (0..n)
                    .filter_map(|i| grads.get(i))
                    .map(|g| g.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let mut d = if scale == 1.0 { g.clone() } else { g * scale };
            if p.kind == ParamKind::ConvWeight && cfg.weight_decay > 0.0 {
                d.scaled_add(cfg.weight_decay, &p.value);
            }
            let v = match self.velocity[i].take() {
                Some(mut v) if cfg.momentum > 0.0 => {
                    v *= cfg.momentum;
                    v += &d;
                    v
                }
                _ => d,
            };
            p.value.scaled_add(-lr, &v);
            self.velocity[i] = Some(v);
        }
    }
}

/// Where and how a run writes its artefacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub augmentation: Option<AugmentationConfig>,
    /// `log.csv`, `last.ckpt` and `best.ckpt` go here when set.
    pub out_dir: Option<PathBuf>,
    /// Also keep `epoch_XXX.ckpt` for every epoch.
    pub keep_epoch_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

fn batch_hash(pairs: &[SamplePair]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in pairs {
        for v in p.image.iter().chain(p.mask.iter()) {
            for b in v.to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

struct LogWriter {
    inner: Option<(PathBuf, csv::Writer<std::fs::File>)>,
}

impl LogWriter {
    fn open(dir: Option<&Path>) -> Result<Self> {
        let Some(dir) = dir else { return Ok(LogWriter { inner: None }) };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("log.csv");
        let w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Ok(LogWriter { inner: Some((path, w)) })
    }

    fn push(&mut self, row: &LogRow) -> Result<()> {
        if let Some((path, w)) = &mut self.inner {
            w.serialize(row).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Trains `net` in place. Runs are bit-reproducible for a fixed seed.
pub fn train(
    net: &MiNet,
    store: &mut ParamStore,
    data: &Dataset,
    cfg: &TrainConfig,
    validation: Option<&Dataset>,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if let Some(a) = &opts.augmentation {
        a.validate()?;
    }
    let loss_cfg = cfg.loss_config();
    let steps = cfg.steps_per_epoch(data.len());
    let total = cfg.total_iterations(data.len());
    let mut log = LogWriter::open(opts.out_dir.as_deref())?;
    let mut rows = Vec::with_capacity(total);
    let mut sgd = Sgd::new();
    let mut state = TrainState {
        epoch: 0,
        global_iteration: 0,
        total_iterations: total,
        current_lr: cfg.lr0,
        seed: cfg.seed,
        best_validation_f_avg: None,
        best_epoch_loss: None,
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut sample_rng(cfg.seed, "__shuffle__", epoch));
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let t = state.global_iteration;
            let lr = poly_lr(t, total, cfg.lr0, cfg.poly_power)?;
            let pairs: Vec<SamplePair> = chunk
                .iter()
                .map(|&i| {
                    let p = &data.pairs[i];
                    match &opts.augmentation {
                        Some(a) if !a.is_identity() => augment(p, a, &mut sample_rng(cfg.seed, &p.id, epoch)),
                        _ => p.clone(),
                    }
                })
                .collect();
            let (images, gt) = stack(&pairs)?;

            let (grads, stats, br) = {
                let mut s = Session::new(store, true);
                if cfg.freeze_backbone_norm {
                    s = s.freeze_norm_under("backbone.");
                }
                let (p, _) = net.forward(&s, &images)?;
                let (loss, br) = loss_node(&p, &gt, &loss_cfg)?;
                if !br.total.is_finite() {
                    return Err(non_finite(t, epoch, lr, &br, &pairs));
                }
                (loss.backward(), s.take_stat_updates(), br)
            };
            sgd.step(store, &grads, lr, cfg);
            store.apply_stat_updates(stats);
            if let Some(p) = store.params().iter().find(|p| p.value.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite(format!(
                    "parameter {} became non-finite at iteration {t} (lr {lr:e}, bcel {}, cel {})",
                    p.name, br.bcel, br.cel
                )));
            }

            let row = LogRow {
                iteration: t,
                epoch,
                lr,
                bcel: br.bcel,
                cel: br.cel,
                total: br.total,
            };
            log.push(&row)?;
            rows.push(row);
            epoch_loss += br.total;
            state.global_iteration += 1;
            state.current_lr = poly_lr(state.global_iteration, total, cfg.lr0, cfg.poly_power)?;
        }
        state.epoch = epoch + 1;
        let epoch_loss = epoch_loss / steps as f64;
        log::info!("epoch {} mean loss {epoch_loss:.5}", epoch + 1);

        let improved = match validation {
            Some(v) => {
                let report = evaluate_model(net, store, v, &MetricConfig::default(), None, cfg.batch_size, 1)?;
                let f = report.summary.f_avg;
                let better = state.best_validation_f_avg.is_none_or(|b| f > b);
                if better {
                    state.best_validation_f_avg = Some(f);
                }
                better
            }
            None => {
                let better = state.best_epoch_loss.is_none_or(|b| epoch_loss < b);
                if better {
                    state.best_epoch_loss = Some(epoch_loss);
                }
                better
            }
        };
        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint::capture(&net.config, store, Some(state.clone()));
            ck.save(&dir.join("last.ckpt"))?;
            if improved {
                ck.save(&dir.join("best.ckpt"))?;
            }
            if opts.keep_epoch_checkpoints {
                ck.save(&dir.join(format!("epoch_{:03}.ckpt", epoch + 1)))?;
            }
        }
    }
    Ok(TrainOutcome { state, log: rows })
}

fn non_finite(t: usize, epoch: usize, lr: f64, br: &LossBreakdown, pairs: &[SamplePair]) -> Error {
    let ids: Vec<&str> = pairs.iter().map(|p| p.id.as_str()).collect();
    Error::NonFinite(format!(
        "iteration {t} (epoch {epoch}): lr {lr:e}, bcel {}, cel {}, total {}, samples [{}], inputs hash {:016x}",
        br.bcel,
        br.cel,
        br.total,
        ids.join(", "),
        batch_hash(pairs)
    ))
}

/// Inference over a dataset, one `H x W` probability map per sample.
pub fn predict_dataset(net: &MiNet, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<Vec<Array2<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.pairs.chunks(batch_size.max(1)) {
        let (images, _) = stack(chunk)?;
        let p = net.predict(store, &images)?;
        for m in p.data().axis_iter(Axis(0)) {
            out.push(m.index_axis(Axis(2), 0).to_owned());
        }
    }
    Ok(out)
}

/// Predicts every sample, quantizes to 8 bits (writing `<id>.png` into
/// `pred_dir` when given) and evaluates the quantized maps.
pub fn evaluate_model(
    net: &MiNet,
    store: &ParamStore,
    data: &Dataset,
    metric_cfg: &MetricConfig,
    pred_dir: Option<&Path>,
    batch_size: usize,
    threads: usize,
) -> Result<MetricReport> {
    if data.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    if let Some(dir) = pred_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let preds = predict_dataset(net, store, data, batch_size)?;
    let mut items = Vec::with_capacity(preds.len());
    for (pair, p) in data.pairs.iter().zip(preds) {
        let codes = quantize(&p);
        if let Some(dir) = pred_dir {
            write_gray(&dir.join(format!("{}.png", pair.id)), &codes)?;
        }
        items.push(NamedImage {
            name: pair.id.clone(),
            pred: codes.mapv(|c| c as f64 / 255.0),
            gt: pair.mask.mapv(|v| v > 0.5),
        });
    }
    evaluate_pairs(&items, metric_cfg, threads)
}

/// Restores a checkpoint (checking it against `expected` field by field)
/// and evaluates it on `data`.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    expected: Option<&ModelConfig>,
    data: &Dataset,
    metric_cfg: &MetricConfig,
    pred_dir: Option<&Path>,
    threads: usize,
) -> Result<MetricReport> {
    let (net, store) = checkpoint.restore(expected)?;
    evaluate_model(&net, &store, data, metric_cfg, pred_dir, 4, threads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::synth_generate;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_model() -> ModelConfig {
        ModelConfig {
            channels: [8, 8, 8, 8, 8],
            aim_mid_channels: [4; 5],
            sim_high_channels: [4; 5],
            backbone: BackboneConfig {
                channels: [8, 8, 8, 8, 8],
                depths: [1; 5],
                ..BackboneConfig::toy()
            },
            ..ModelConfig::default()
        }
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            lr0: 0.01,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn poly_examples() {
        assert_eq!(poly_lr(0, 100, 1e-3, 0.9).unwrap(), 1e-3);
        assert_eq!(poly_lr(100, 100, 1e-3, 0.9).unwrap(), 0.0);
        let half = poly_lr(50, 100, 1e-3, 0.9).unwrap();
        assert_eq!(half, 1e-3 * 0.5f64.powf(0.9));
        assert!((half - 5.359e-4).abs() < 1e-7);
        assert!(poly_lr(101, 100, 1e-3, 0.9).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { poly_power: 0.0, ..TrainConfig::default() },
            TrainConfig { lambda_cel: -1.0, ..TrainConfig::default() },
            TrainConfig { grad_clip: Some(0.0), ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }

    #[test]
    fn sgd_matches_hand_update_and_skips_decay_on_norm_params() {
        let cfg = tiny_model();
        let (net, store) = MiNet::build(&cfg).unwrap();
        let data = synth_generate(2, 32, 0).unwrap();
        let (images, gt) = data.batch(&[0, 1]).unwrap();
        let s = Session::new(&store, true);
        let (p, _) = net.forward(&s, &images).unwrap();
        let (loss, _) = loss_node(&p, &gt, &LossConfig::default()).unwrap();
        let grads = loss.backward();
        drop(s);

        let tc = TrainConfig { weight_decay: 0.1, ..TrainConfig::default() };
        let mut after = store.clone();
        let mut sgd = Sgd::new();
        sgd.step(&mut after, &grads, 0.5, &tc);
        for (i, (old, new)) in store.params().iter().zip(after.params()).enumerate() {
            let g = grads.get(i).unwrap();
            let decay = if old.kind == ParamKind::ConvWeight { 0.1 } else { 0.0 };
            let want = &old.value - &((g + &(&old.value * decay)) * 0.5);
            let err = (&want - &new.value).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(err < 1e-15, "{}", old.name);
        }
        // second step accumulates momentum
        let before = after.clone();
        sgd.step(&mut after, &grads, 0.5, &TrainConfig { weight_decay: 0.0, ..tc.clone() });
        let i = 0;
        let g = grads.get(i).unwrap();
        let v1 = g + &(&store.params()[i].value * 0.1);
        let v2 = &v1 * 0.9 + g;
        let want = &before.params()[i].value - &(v2 * 0.5);
        let err = (&want - &after.params()[i].value).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(err < 1e-15);
    }

    #[test]
    fn zero_gradient_step_only_decays_conv_weights() {
        let (_, store) = MiNet::build(&tiny_model()).unwrap();
        // a frozen-gradient step: gradients are all zero
        let zero_grads = {
            let leaves: Vec<_> = store
                .params()
                .iter()
                .enumerate()
                .map(|(i, p)| crate::autograd::Var::leaf(p.value.clone(), i))
                .collect();
            let zero = leaves.iter().fold(None, |acc: Option<crate::autograd::Var>, l| {
                let term = crate::autograd::weighted_sum(l, &Array::zeros(l.value().raw_dim()));
                Some(match acc {
                    Some(a) => crate::autograd::add(&a, &term),
                    None => term,
                })
            });
            zero.unwrap().backward()
        };
        let mut after = store.clone();
        Sgd::new().step(&mut after, &zero_grads, 0.1, &TrainConfig::default());
        for (old, new) in store.params().iter().zip(after.params()) {
            if old.kind == ParamKind::ConvWeight {
                assert_ne!(old.value, new.value, "{}", old.name);
            } else {
                assert_eq!(old.value, new.value, "{}", old.name);
            }
        }
    }

    #[test]
    fn lambda_zero_keeps_cel_column() {
        let (net, mut store) = MiNet::build(&tiny_model()).unwrap();
        let data = synth_generate(4, 32, 1).unwrap();
        let cfg = TrainConfig { lambda_cel: 0.0, ..quick(1) };
        let out = train(&net, &mut store, &data, &cfg, None, &TrainOptions::default()).unwrap();
        for r in &out.log {
            assert!(r.cel > 0.0);
            assert_eq!(r.total, r.bcel);
        }
    }

    #[test]
    fn runs_are_reproducible_and_write_artifacts() {
        let data = synth_generate(4, 32, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut logs = Vec::new();
        for run in 0..2 {
            let (net, mut store) = MiNet::build(&tiny_model()).unwrap();
            let opts = TrainOptions {
                augmentation: Some(AugmentationConfig::default()),
                out_dir: Some(dir.path().join(format!("run{run}"))),
                keep_epoch_checkpoints: true,
            };
            let out = train(&net, &mut store, &data, &quick(2), Some(&data), &opts).unwrap();
            assert_eq!(out.log.len(), 4);
            assert_eq!(out.state.global_iteration, 4);
            assert_eq!(out.state.current_lr, 0.0);
            assert!(out.state.best_validation_f_avg.is_some());
            logs.push(std::fs::read(dir.path().join(format!("run{run}/log.csv"))).unwrap());
            for f in ["last.ckpt", "best.ckpt", "epoch_001.ckpt", "epoch_002.ckpt"] {
                assert!(dir.path().join(format!("run{run}/{f}")).exists(), "{f}");
            }
        }
        assert_eq!(logs[0], logs[1]);
        let header = String::from_utf8(logs[0].clone()).unwrap();
        assert!(header.starts_with("iteration,epoch,lr,bcel,cel,total\n"));
    }

    #[test]
    fn logged_lr_follows_schedule() {
        let (net, mut store) = MiNet::build(&tiny_model()).unwrap();
        let data = synth_generate(3, 32, 3).unwrap();
        let cfg = quick(2); // 2 steps per epoch, last batch partial
        let out = train(&net, &mut store, &data, &cfg, None, &TrainOptions::default()).unwrap();
        assert_eq!(out.state.total_iterations, 4);
        for r in &out.log {
            assert_eq!(r.lr, poly_lr(r.iteration, 4, cfg.lr0, cfg.poly_power).unwrap());
        }
    }

    #[test]
    fn evaluation_is_well_formed_and_repeatable() {
        let cfg = tiny_model();
        let (_, store) = MiNet::build(&cfg).unwrap();
        let ck = Checkpoint::capture(&cfg, &store, None);
        let data = synth_generate(3, 32, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = evaluate_checkpoint(&ck, Some(&cfg), &data, &MetricConfig::default(), Some(dir.path()), 1).unwrap();
        let b = evaluate_checkpoint(&ck, None, &data, &MetricConfig::default(), None, 2).unwrap();
        assert_eq!(a, b);
        assert!((0.0..=1.0).contains(&a.summary.mae));
        assert_eq!(crate::imageio::list_images(dir.path()).unwrap().len(), 3);
        let other = ModelConfig { use_aim: false, ..cfg };
        assert!(matches!(
            evaluate_checkpoint(&ck, Some(&other), &data, &MetricConfig::default(), None, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn frozen_backbone_norm_keeps_running_stats() {
        let (net, mut store) = MiNet::build(&tiny_model()).unwrap();
        let before: Vec<_> = store.buffers().iter().map(|b| (b.name.clone(), b.value.clone())).collect();
        let data = synth_generate(2, 32, 5).unwrap();
        let cfg = TrainConfig { freeze_backbone_norm: true, ..quick(1) };
        train(&net, &mut store, &data, &cfg, None, &TrainOptions::default()).unwrap();
        for ((name, old), b) in before.iter().zip(store.buffers()) {
            if name.starts_with("backbone.") {
                assert_eq!(old, &b.value, "{name}");
            } else {
                assert_ne!(old, &b.value, "{name}");
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let (net, mut store) = MiNet::build(&tiny_model()).unwrap();
        let err = train(&net, &mut store, &Dataset::default(), &quick(1), None, &TrainOptions::default());
        assert!(matches!(err, Err(Error::Data(_))));
    }
}
