//! Parameter storage and the convolution / normalization building blocks.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Array, Var};
use crate::{Error, Result};

/// Role of a trainable tensor. Weight decay only touches `ConvWeight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array,
}

/// Non-trainable state such as running normalization statistics.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

/// Owns every parameter and buffer of a model, addressed by id or by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Vec<f64> {
        &mut self.buffers[id.0].value
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Every parameter and buffer as a name → tensor map. Buffers are
    /// exported as 1-D arrays.
    pub fn named_tensors(&self) -> BTreeMap<String, Array> {
        let mut map = BTreeMap::new();
        for p in &self.params {
            map.insert(p.name.clone(), p.value.clone());
        }
        for b in &self.buffers {
            map.insert(
                b.name.clone(),
                Array::from_shape_vec(IxDyn(&[b.value.len()]), b.value.clone()).unwrap(),
            );
        }
        map
    }

    /// Overwrites parameters and buffers from a named map.
    ///
    /// Names absent from the store are returned. When `strict`, every store
    /// entry must be present in the map. Shape disagreements are always errors.
    pub fn load_named(&mut self, map: &HashMap<String, Array>, strict: bool) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        let mut used = std::collections::HashSet::new();
        for p in &mut self.params {
            match map.get(&p.name) {
                Some(v) if v.shape() == p.value.shape() => {
                    p.value = v.as_standard_layout().into_owned();
                    used.insert(p.name.clone());
                }
                Some(v) => problems.push(format!(
                    "{}: expected shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )),
                None if strict => problems.push(format!("{}: missing", p.name)),
                None => {}
            }
        }
        for b in &mut self.buffers {
            match map.get(&b.name) {
                Some(v) if v.len() == b.value.len() => {
                    b.value = v.iter().copied().collect();
                    used.insert(b.name.clone());
                }
                Some(v) => problems.push(format!(
                    "{}: expected {} values, got {}",
                    b.name,
                    b.value.len(),
                    v.len()
                )),
                None if strict => problems.push(format!("{}: missing", b.name)),
                None => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        let mut unused: Vec<String> = map.keys().filter(|k| !used.contains(*k)).cloned().collect();
        unused.sort();
        Ok(unused)
    }

    pub(crate) fn apply_stat_updates(&mut self, updates: Vec<(BufferId, Vec<f64>)>) {
        for (id, value) in updates {
            self.buffers[id.0].value = value;
        }
    }
}

/// Allocates parameters with deterministic initialization while a model is built.
pub struct Builder {
    store: ParamStore,
    rng: ChaCha8Rng,
    scope: Vec<String>,
}

impl Builder {
    pub fn new(seed: u64) -> Self {
        Builder {
            store: ParamStore::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            scope: Vec::new(),
        }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    /// Runs `f` with `name` pushed onto the parameter-name prefix.
    pub fn scoped<T>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> T) -> T {
        self.scope.push(name.into());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut parts = self.scope.clone();
        parts.push(leaf.to_string());
        parts.join(".")
    }

    fn push(&mut self, leaf: &str, kind: ParamKind, value: Array) -> ParamId {
        let name = self.full_name(leaf);
        debug_assert!(self.store.find(&name).is_none(), "duplicate parameter {name}");
        self.store.params.push(Param { name, kind, value });
        ParamId(self.store.params.len() - 1)
    }

    fn buffer(&mut self, leaf: &str, value: Vec<f64>) -> BufferId {
        let name = self.full_name(leaf);
        self.store.buffers.push(Buffer { name, value });
        BufferId(self.store.buffers.len() - 1)
    }

    /// He-normal initialized convolution kernel.
    fn conv_weight(&mut self, out_c: usize, in_c: usize, k: usize) -> ParamId {
        let fan_in = (in_c * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let rng = &mut self.rng;
        let value = Array::from_shape_fn(IxDyn(&[out_c, in_c, k, k]), |_| normal.sample(rng));
        self.push("weight", ParamKind::ConvWeight, value)
    }
}

/// Per-forward view of a [`ParamStore`].
///
/// In training mode parameters become tracked leaves tagged with their index,
/// normalization layers use batch statistics, and running-statistic updates
/// are collected for [`Session::take_stat_updates`].
pub struct Session<'a> {
    store: &'a ParamStore,
    training: bool,
    leaves: RefCell<HashMap<usize, Var>>,
    stat_updates: RefCell<Vec<(BufferId, Vec<f64>)>>,
    frozen_norm: Option<String>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, training: bool) -> Self {
        Session {
            store,
            training,
            leaves: RefCell::new(HashMap::new()),
            stat_updates: RefCell::new(Vec::new()),
            frozen_norm: None,
        }
    }

    /// Normalization layers whose parameter names start with `prefix` keep
    /// using (and not updating) their running statistics while training.
    pub fn freeze_norm_under(mut self, prefix: impl Into<String>) -> Self {
        self.frozen_norm = Some(prefix.into());
        self
    }

    fn norm_uses_batch_stats(&self, gamma: ParamId) -> bool {
        self.training
            && !self
                .frozen_norm
                .as_deref()
                .is_some_and(|p| self.store.params[gamma.0].name.starts_with(p))
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        let mut leaves = self.leaves.borrow_mut();
        leaves
            .entry(id.0)
            .or_insert_with(|| Var::leaf(self.store.params[id.0].value.clone(), id.0))
            .clone()
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        self.store.buffer(id)
    }

    fn record_stats(&self, id: BufferId, value: Vec<f64>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates gathered during the forward pass.
    pub fn take_stat_updates(&self) -> Vec<(BufferId, Vec<f64>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}

/// Stride-1 same-padded convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, in_c: usize, out_c: usize, k: usize, bias: bool) -> Self {
        let weight = b.conv_weight(out_c, in_c, k);
        let bias = bias.then(|| b.push("bias", ParamKind::Bias, Array::zeros(IxDyn(&[out_c]))));
        Conv2d {
            weight,
            bias,
            in_channels: in_c,
            out_channels: out_c,
            kernel: k,
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if x.shape().len() != 4 || c != self.in_channels {
            return Err(Error::Shape(format!(
                "convolution expects {} input channels, got shape {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let bias = self.bias.map(|id| s.param(id));
        Ok(autograd::conv2d(x, &s.param(self.weight), bias.as_ref()))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Batch normalization with running estimates for inference.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, channels: usize, momentum: f64) -> Self {
        let gamma = b.push("weight", ParamKind::NormScale, Array::ones(IxDyn(&[channels])));
        let beta = b.push("bias", ParamKind::NormShift, Array::zeros(IxDyn(&[channels])));
        let running_mean = b.buffer("running_mean", vec![0.0; channels]);
        let running_var = b.buffer("running_var", vec![1.0; channels]);
        BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps: 1e-5,
            momentum,
        }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Var {
        let gamma = s.param(self.gamma);
        let beta = s.param(self.beta);
        if s.norm_uses_batch_stats(self.gamma) {
            let (y, stats) = autograd::batch_norm_train(x, &gamma, &beta, self.eps);
            let m = self.momentum;
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| (1.0 - m) * o + m * n).collect()
            };
            s.record_stats(self.running_mean, blend(s.buffer(self.running_mean), &stats.mean));
            s.record_stats(self.running_var, blend(s.buffer(self.running_var), &stats.var_unbiased));
            y
        } else {
            autograd::batch_norm_eval(
                x,
                &gamma,
                &beta,
                s.buffer(self.running_mean),
                s.buffer(self.running_var),
                self.eps,
            )
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Convolution, optional batch normalization, optional ReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: Option<BatchNorm2d>,
    pub relu: bool,
}

impl ConvBlock {
    /// Convolution + normalization + ReLU.
    pub fn cbr(b: &mut Builder, in_c: usize, out_c: usize, k: usize, momentum: f64) -> Self {
        Self::build(b, in_c, out_c, k, true, true, momentum)
    }

    /// Convolution + normalization, no nonlinearity.
    pub fn cb(b: &mut Builder, in_c: usize, out_c: usize, k: usize, momentum: f64) -> Self {
        Self::build(b, in_c, out_c, k, true, false, momentum)
    }

    pub fn build(
        b: &mut Builder,
        in_c: usize,
        out_c: usize,
        k: usize,
        norm: bool,
        relu: bool,
        momentum: f64,
    ) -> Self {
        let conv = b.scoped("conv", |b| Conv2d::new(b, in_c, out_c, k, !norm));
        let norm = norm.then(|| b.scoped("bn", |b| BatchNorm2d::new(b, out_c, momentum)));
        ConvBlock { conv, norm, relu }
    }

    pub fn forward(&self, s: &Session, x: &Var) -> Result<Var> {
        let mut y = self.conv.forward(s, x)?;
        if let Some(norm) = &self.norm {
            y = norm.forward(s, &y);
        }
        if self.relu {
            y = autograd::relu(&y);
        }
        Ok(y)
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.conv.param_ids();
        if let Some(n) = &self.norm {
            ids.extend(n.param_ids());
        }
        ids
    }

    /// Sets every parameter of the block to zero, making its output exactly
    /// zero (after normalization, with or without batch statistics).
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.param_mut(id).value.fill(0.0);
        }
    }
}
