//! State-dependent gating: a softmax MLP `π(x)` over polynomial experts,
//! trained on minibatches with Adam.
//!
//! Gradients are derived by hand. All trainable parameters live in one flat
//! vector (see [`GlobalModel::params`]) so the optimizer and the
//! finite-difference checks see the same layout: every gate layer `(W, b)`
//! in order, then every `Θ_k` row-major, then the `log σ_k`.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotDataset;
use crate::dynlib::{Normalization, PolyLibrary};
use crate::error::{check_dim, Error, Result};
use crate::eval::align_experts;
use crate::rng::{derive_seed, stream_rng};
use crate::scalar::{log_sum_exp, Scalar};

/// Floor on the per-coordinate input scale of the gate.
pub const INPUT_SCALE_FLOOR: f64 = 1e-8;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const INITIAL_SIGMA: f64 = 0.5;
const THETA_INIT_STD: f64 = 0.01;
/// Samples per parallel work unit when evaluating a batch.
const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply<F: Scalar>(self, a: F) -> F {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Silu => a / (F::one() + (-a).exp()),
        }
    }

    /// Derivative at pre-activation `a`.
    #[inline]
    fn derivative<F: Scalar>(self, a: F) -> F {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                F::one() - t * t
            }
            Activation::Silu => {
                let s = F::one() / (F::one() + (-a).exp());
                s * (F::one() + a * (F::one() - s))
            }
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            _ => Err(Error::InvalidConfig(format!("unknown activation '{s}' (expected tanh or silu)"))),
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<F> {
    pub w: Array2<F>,
    pub b: Vec<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatingNetwork<F> {
    pub input_mean: Vec<F>,
    pub input_scale: Vec<F>,
    pub layers: Vec<DenseLayer<F>>,
    pub activation: Activation,
}

impl<F: Scalar> GatingNetwork<F> {
    /// All-zero weights, giving the uniform gate.
    pub fn zeros(dim: usize, hidden: &[usize], k: usize, activation: Activation) -> Self {
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(k);
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                w: Array2::zeros((w[1], w[0])),
                b: vec![F::zero(); w[1]],
            })
            .collect();
        Self {
            input_mean: vec![F::zero(); dim],
            input_scale: vec![F::one(); dim],
            layers,
            activation,
        }
    }

    /// Uniform Glorot weights, zero biases.
    pub fn xavier<R: Rng>(dim: usize, hidden: &[usize], k: usize, activation: Activation, rng: &mut R) -> Self {
        let mut net = Self::zeros(dim, hidden, k, activation);
        for layer in &mut net.layers {
            let (fan_out, fan_in) = layer.w.dim();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.w.mapv_inplace(|_| F::of(rng.random_range(-a..a)));
        }
        net
    }

    pub fn dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.b.len())
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.b.len()).collect()
    }

    fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Unnormalized logits, keeping activations for backpropagation:
    /// `inputs[l]` is the input to layer `l`, `pre[l]` the pre-activation of
    /// hidden layer `l`.
    fn forward_cached(&self, x: &[F], inputs: &mut Vec<Vec<F>>, pre: &mut Vec<Vec<F>>) -> Vec<F> {
        inputs.clear();
        pre.clear();
        let mut h: Vec<F> = x
            .iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = layer.b.clone();
            for (o, row) in a.iter_mut().zip(layer.w.rows()) {
                *o += row.iter().zip(&h).map(|(&w, &x)| w * x).sum::<F>();
            }
            let next = if l == last {
                a.clone()
            } else {
                a.iter().map(|&v| self.activation.apply(v)).collect()
            };
            inputs.push(std::mem::replace(&mut h, next));
            if l != last {
                pre.push(a);
            }
        }
        h
    }

    pub fn logits(&self, x: &[F]) -> Vec<F> {
        self.forward_cached(x, &mut Vec::new(), &mut Vec::new())
    }

    pub fn log_probs(&self, x: &[F]) -> Vec<F> {
        log_softmax(&self.logits(x))
    }

    /// `π(x)`, a point on the simplex.
    pub fn forward(&self, x: &[F]) -> Vec<F> {
        softmax(&self.logits(x))
    }
}

/// Softmax after subtracting the largest logit.
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().copied().fold(F::neg_infinity(), F::max);
    let e: Vec<F> = logits.iter().map(|&u| (u - max).exp()).collect();
    let s: F = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&u| u - lse).collect()
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy<F: Scalar>(p: &[F]) -> F {
    p.iter()
        .filter(|&&v| v > F::zero())
        .map(|&v| -v * v.ln())
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub k: usize,
    pub lib_order: usize,
    pub gate_hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub lam_l1: f64,
    pub lam_ent: f64,
    pub lam_lb: f64,
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub n_restarts: usize,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            k: 3,
            lib_order: 2,
            gate_hidden: vec![64],
            activation: Activation::Tanh,
            lr: 2e-3,
            weight_decay: 0.0,
            epochs: 100,
            patience: 30,
            min_delta: 0.0,
            lam_l1: 1e-4,
            lam_ent: 1e-3,
            lam_lb: 5e-4,
            grad_clip: None,
            batch_size: 512,
            seed: 0,
            n_restarts: 1,
        }
    }
}

/// Names accepted by [`GlobalConfig::preset`].
pub const PRESET_NAMES: [&str; 4] = ["toy_branching", "goldbeter", "lineage", "fucci"];

impl GlobalConfig {
    /// Hyperparameter tables of the reference experiments. Dashed entries
    /// are 0 (or no clipping).
    pub fn preset(name: &str) -> Result<Self> {
        #[allow(clippy::too_many_arguments)]
        fn table(
            k: usize,
            lib_order: usize,
            activation: Activation,
            lr: f64,
            weight_decay: f64,
            epochs: usize,
            patience: usize,
            min_delta: f64,
            lams: [f64; 3],
            grad_clip: Option<f64>,
        ) -> GlobalConfig {
            GlobalConfig {
                k,
                lib_order,
                gate_hidden: vec![64],
                activation,
                lr,
                weight_decay,
                epochs,
                patience,
                min_delta,
                lam_l1: lams[0],
                lam_ent: lams[1],
                lam_lb: lams[2],
                grad_clip,
                batch_size: 512,
                seed: 0,
                n_restarts: 1,
            }
        }
        use Activation::*;
        Ok(match name {
            "toy_branching" => table(3, 0, Tanh, 2e-3, 1e-5, 500, 30, 0.0, [1e-4, 1e-3, 5e-4], None),
            "goldbeter" => table(2, 3, Silu, 1e-2, 1e-6, 10_000, 30, 1e-4, [1e-3, 1.0, 1.0], Some(5.0)),
            "lineage" => table(3, 1, Tanh, 1e-2, 1e-4, 2000, 30, 1e-4, [1e-3, 2e-3, 1e-1], Some(5.0)),
            "fucci" => table(2, 3, Silu, 1e-3, 1e-6, 5000, 100, 1e-4, [1e-3, 1.0, 1.0], Some(5.0)),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset '{name}' (expected one of {})",
                    PRESET_NAMES.join(", ")
                )))
            }
        })
    }

    /// Caption of the table a preset was copied from.
    pub fn preset_caption(name: &str) -> Option<&'static str> {
        match name {
            "toy_branching" => Some("Toy Branching hyperparameters"),
            "goldbeter" => Some("Goldbeter oscillator hyperparameters"),
            "lineage" => Some("Lineage branching hyperparameters"),
            "fucci" => Some("FUCCI hyperparameters"),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidConfig("n_restarts must be >= 1".into()));
        }
        if self.gate_hidden.contains(&0) {
            return Err(Error::InvalidConfig("gate_hidden sizes must be >= 1".into()));
        }
        let rates = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("min_delta", self.min_delta),
            ("lam_l1", self.lam_l1),
            ("lam_ent", self.lam_ent),
            ("lam_lb", self.lam_lb),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!("grad_clip must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel<F> {
    pub library: PolyLibrary,
    pub thetas: Vec<Array2<F>>,
    pub log_sigma: Vec<F>,
    pub gate: GatingNetwork<F>,
    pub config: GlobalConfig,
    /// Epoch 0 holds the losses of the initialization.
    pub train_log: Vec<EpochLog>,
    pub normalization: Option<Normalization>,
}

/// Loss terms of one batch; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub nll: f64,
    pub l1: f64,
    pub ent: f64,
    pub lb: f64,
}

impl<F: Scalar> GlobalModel<F> {
    /// Fresh model: Glorot gate, small Gaussian thetas, `σ_k = 0.5`.
    pub fn init(library: PolyLibrary, config: &GlobalConfig, seed: u64) -> Self {
        let d = library.dim();
        let mut rng = stream_rng(seed, 0);
        let gate = GatingNetwork::xavier(d, &config.gate_hidden, config.k, config.activation, &mut rng);
        let thetas = (0..config.k)
            .map(|_| {
                Array2::from_shape_fn((library.n_features(), d), |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    F::of(THETA_INIT_STD * z)
                })
            })
            .collect();
        Self {
            thetas,
            log_sigma: vec![F::of(INITIAL_SIGMA.ln()); config.k],
            gate,
            config: config.clone(),
            library,
            train_log: Vec::new(),
            normalization: None,
        }
    }

    /// Assembles a model from parts, checking that the shapes agree.
    pub fn from_parts(
        library: PolyLibrary,
        thetas: Vec<Array2<F>>,
        log_sigma: Vec<F>,
        gate: GatingNetwork<F>,
        config: GlobalConfig,
    ) -> Result<Self> {
        if thetas.is_empty() {
            return Err(Error::Empty("model needs at least one expert".into()));
        }
        check_dim("log_sigma length", thetas.len(), log_sigma.len())?;
        check_dim("gate outputs", thetas.len(), gate.n_outputs())?;
        check_dim("gate inputs", library.dim(), gate.dim())?;
        check_dim("gate scale length", library.dim(), gate.input_scale.len())?;
        let mut width = library.dim();
        for layer in &gate.layers {
            check_dim("gate layer input width", width, layer.w.ncols())?;
            check_dim("gate layer bias length", layer.w.nrows(), layer.b.len())?;
            width = layer.w.nrows();
        }
        for th in &thetas {
            check_dim("theta rows", library.n_features(), th.nrows())?;
            check_dim("theta columns", library.dim(), th.ncols())?;
        }
        if gate.input_scale.iter().any(|s| !(s.f64() >= INPUT_SCALE_FLOOR)) {
            return Err(Error::InvalidConfig("gate input scale below floor".into()));
        }
        let model = Self {
            library,
            thetas,
            log_sigma,
            gate,
            config,
            train_log: Vec::new(),
            normalization: None,
        };
        if model.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(model)
    }

    pub fn n_experts(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.library.dim()
    }

    pub fn sigma(&self, k: usize) -> F {
        self.log_sigma[k].exp()
    }

    pub fn gate_probs(&self, x: &[F]) -> Vec<F> {
        self.gate.forward(x)
    }

    /// Lowest validation loss in the log; the returned parameters realize it.
    pub fn best_val_loss(&self) -> f64 {
        self.train_log.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn n_params(&self) -> usize {
        self.gate.n_params() + self.thetas.iter().map(|t| t.len()).sum::<usize>() + self.log_sigma.len()
    }

    /// Flat copy of every trainable parameter.
    pub fn params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.gate.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
        for th in &self.thetas {
            out.extend(th.iter().copied());
        }
        out.extend(self.log_sigma.iter().copied());
        out
    }

    pub fn set_params(&mut self, flat: &[F]) -> Result<()> {
        check_dim("parameter vector", self.n_params(), flat.len())?;
        let mut it = flat.iter().copied();
        for l in &mut self.gate.layers {
            l.w.iter_mut().for_each(|v| *v = it.next().unwrap());
            l.b.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for th in &mut self.thetas {
            th.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.log_sigma.iter_mut().for_each(|v| *v = it.next().unwrap());
        Ok(())
    }

    /// True at the positions of gate weight matrices (the only entries that
    /// receive weight decay).
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.gate.layers {
            out.extend(std::iter::repeat_n(true, l.w.len()));
            out.extend(std::iter::repeat_n(false, l.b.len()));
        }
        out.resize(self.n_params(), false);
        out
    }

    fn theta_offset(&self) -> usize {
        self.gate.n_params()
    }

    pub fn l1_norm(&self) -> f64 {
        self.thetas.iter().flat_map(|t| t.iter()).map(|v| v.f64().abs()).sum()
    }
}

/// Features plus targets for a fixed dataset, shared by every batch.
struct Prepared<'a, F> {
    states: ArrayView2<'a, F>,
    velocities: ArrayView2<'a, F>,
    features: Array2<F>,
}

impl<'a, F: Scalar> Prepared<'a, F> {
    fn new(lib: &PolyLibrary, data: &'a SnapshotDataset<F>) -> Result<Self> {
        check_dim("dataset dimension", lib.dim(), data.dim())?;
        if data.is_empty() {
            return Err(Error::Empty("batch has no samples".into()));
        }
        Ok(Self {
            states: data.states.view(),
            velocities: data.velocities.view(),
            features: lib.design_matrix(data.states.view())?,
        })
    }
}

/// Per-sample quantities from the forward pass.
struct SampleCache<F> {
    inputs: Vec<Vec<F>>,
    pre: Vec<Vec<F>>,
    probs: Vec<F>,
    log_probs: Vec<F>,
    /// Posterior over experts.
    post: Vec<F>,
    residuals: Vec<Vec<F>>,
    nll: F,
}

fn half_ln_2pi() -> f64 {
    0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn forward_sample<F: Scalar>(model: &GlobalModel<F>, prep: &Prepared<F>, i: usize) -> SampleCache<F> {
    let d = model.dim();
    let x = prep.states.row(i);
    let x = x.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| x.to_vec());
    let mut inputs = Vec::new();
    let mut pre = Vec::new();
    let logits = model.gate.forward_cached(&x, &mut inputs, &mut pre);
    let log_probs = log_softmax(&logits);
    let probs: Vec<F> = log_probs.iter().map(|v| v.exp()).collect();
    let z = prep.features.row(i);
    let c = F::of(d as f64 * half_ln_2pi());
    let mut residuals = Vec::with_capacity(model.n_experts());
    let mut joint = Vec::with_capacity(model.n_experts());
    for (k, th) in model.thetas.iter().enumerate() {
        let mut r: Vec<F> = prep.velocities.row(i).to_vec();
        for (t, &zt) in z.iter().enumerate() {
            for (j, rj) in r.iter_mut().enumerate() {
                *rj -= zt * th[[t, j]];
            }
        }
        let s = model.log_sigma[k];
        let inv_var = (-(s + s)).exp();
        let sq: F = r.iter().map(|&v| v * v).sum();
        joint.push(log_probs[k] - F::of(d as f64) * s - c - F::of(0.5) * sq * inv_var);
        residuals.push(r);
    }
    let lse = log_sum_exp(&joint);
    let post = joint.iter().map(|&v| (v - lse).exp()).collect();
    SampleCache {
        inputs,
        pre,
        probs,
        log_probs,
        post,
        residuals,
        nll: -lse,
    }
}

fn l1_value<F: Scalar>(model: &GlobalModel<F>) -> f64 {
    model.config.lam_l1 * model.l1_norm()
}

fn lb_value(mean_gate: &[f64], lam_lb: f64) -> f64 {
    let k = mean_gate.len() as f64;
    lam_lb
        * mean_gate
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * (p.ln() + k.ln()))
            .sum::<f64>()
}

struct ForwardSums {
    nll: f64,
    ent: f64,
    mean_gate: Vec<f64>,
}

fn forward_sums<F: Scalar>(caches: &[SampleCache<F>], k: usize) -> ForwardSums {
    let b = caches.len() as f64;
    let mut mean_gate = vec![0.0; k];
    let (mut nll, mut ent) = (0.0, 0.0);
    for c in caches {
        nll += c.nll.f64();
        ent += entropy(&c.probs).f64();
        for (m, p) in mean_gate.iter_mut().zip(&c.probs) {
            *m += p.f64();
        }
    }
    mean_gate.iter_mut().for_each(|m| *m /= b);
    ForwardSums {
        nll: nll / b,
        ent: ent / b,
        mean_gate,
    }
}

fn components<F: Scalar>(model: &GlobalModel<F>, sums: &ForwardSums) -> LossComponents {
    let l1 = l1_value(model);
    let ent = model.config.lam_ent * sums.ent;
    let lb = lb_value(&sums.mean_gate, model.config.lam_lb);
    LossComponents {
        total: sums.nll + l1 + ent + lb,
        nll: sums.nll,
        l1,
        ent,
        lb,
    }
}

fn check_finite(c: &LossComponents) -> Result<()> {
    if c.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss (nll {}, l1 {}, ent {}, lb {})",
            c.nll, c.l1, c.ent, c.lb
        )))
    }
}

fn loss_on<F: Scalar>(model: &GlobalModel<F>, prep: &Prepared<F>, idx: &[usize]) -> LossComponents {
    let caches: Vec<SampleCache<F>> = idx.par_iter().map(|&i| forward_sample(model, prep, i)).collect();
    components(model, &forward_sums(&caches, model.n_experts()))
}

/// Accumulates the gradient of one sample into `g` (already scaled by the
/// batch size through `inv_b`).
fn backward_sample<F: Scalar>(
    model: &GlobalModel<F>,
    prep: &Prepared<F>,
    i: usize,
    c: &SampleCache<F>,
    lb_coef: &[F],
    inv_b: F,
    g: &mut [F],
) {
    let k = model.n_experts();
    let d = model.dim();
    let lam_ent = F::of(model.config.lam_ent);

    // gradient of the loss with respect to π_k, excluding the nll term
    let gp: Vec<F> = (0..k)
        .map(|j| -lam_ent * inv_b * (c.log_probs[j] + F::one()) + lb_coef[j] * inv_b)
        .collect();
    let centered: F = (0..k).map(|j| c.probs[j] * gp[j]).sum();
    let mut delta: Vec<F> = (0..k)
        .map(|j| (c.probs[j] - c.post[j]) * inv_b + c.probs[j] * (gp[j] - centered))
        .collect();

    // backpropagate through the gate, last layer first
    let mut offsets = Vec::with_capacity(model.gate.layers.len());
    let mut off = 0;
    for l in &model.gate.layers {
        offsets.push(off);
        off += l.w.len() + l.b.len();
    }
    for l in (0..model.gate.layers.len()).rev() {
        let layer = &model.gate.layers[l];
        let input = &c.inputs[l];
        let n_in = layer.w.ncols();
        let base = offsets[l];
        for (o, &dl) in delta.iter().enumerate() {
            let row = base + o * n_in;
            for (q, &h) in input.iter().enumerate() {
                g[row + q] += dl * h;
            }
            g[base + layer.w.len() + o] += dl;
        }
        if l > 0 {
            let pre = &c.pre[l - 1];
            let mut next = vec![F::zero(); n_in];
            for (o, &dl) in delta.iter().enumerate() {
                for (q, nq) in next.iter_mut().enumerate() {
                    *nq += layer.w[[o, q]] * dl;
                }
            }
            for (nq, &a) in next.iter_mut().zip(pre) {
                *nq *= model.gate.activation.derivative(a);
            }
            delta = next;
        }
    }

    // experts
    let z = prep.features.row(i);
    let p = model.library.n_features();
    let theta_base = model.theta_offset();
    let sigma_base = theta_base + k * p * d;
    for kk in 0..k {
        let r = c.post[kk];
        if r == F::zero() {
            continue;
        }
        let s = model.log_sigma[kk];
        let inv_var = (-(s + s)).exp();
        let res = &c.residuals[kk];
        let w = -r * inv_b * inv_var;
        let base = theta_base + kk * p * d;
        for (t, &zt) in z.iter().enumerate() {
            if zt == F::zero() {
                continue;
            }
            for (j, &e) in res.iter().enumerate() {
                g[base + t * d + j] += w * zt * e;
            }
        }
        let sq: F = res.iter().map(|&v| v * v).sum();
        g[sigma_base + kk] += -r * inv_b * (sq * inv_var - F::of(d as f64));
    }
}

#[inline]
fn sign0<F: Scalar>(v: F) -> F {
    if v > F::zero() {
        F::one()
    } else if v < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}

fn gradients_on<F: Scalar>(model: &GlobalModel<F>, prep: &Prepared<F>, idx: &[usize]) -> (LossComponents, Vec<F>) {
    let k = model.n_experts();
    let caches: Vec<SampleCache<F>> = idx.par_iter().map(|&i| forward_sample(model, prep, i)).collect();
    let sums = forward_sums(&caches, k);
    let comps = components(model, &sums);
    let kf = (k as f64).ln();
    let lb_coef: Vec<F> = sums
        .mean_gate
        .iter()
        .map(|&m| {
            let log_m = if m > 0.0 { m.ln() } else { f64::MIN_POSITIVE.ln() };
            F::of(model.config.lam_lb * (log_m + kf + 1.0))
        })
        .collect();
    let inv_b = F::of(1.0 / idx.len() as f64);
    let n = model.n_params();
    // fixed-size chunks summed in order keep the result independent of the
    // thread count
    let partial: Vec<Vec<F>> = idx
        .par_chunks(CHUNK)
        .zip(caches.par_chunks(CHUNK))
        .map(|(ids, cs)| {
            let mut g = vec![F::zero(); n];
            for (&i, c) in ids.iter().zip(cs) {
                backward_sample(model, prep, i, c, &lb_coef, inv_b, &mut g);
            }
            g
        })
        .collect();
    let mut grad = vec![F::zero(); n];
    for g in partial {
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    let lam = F::of(model.config.lam_l1);
    let base = model.theta_offset();
    for (gv, &th) in grad[base..].iter_mut().zip(model.thetas.iter().flat_map(|t| t.iter())) {
        *gv += lam * sign0(th);
    }
    (comps, grad)
}

/// Full regularized loss on `batch`.
pub fn batch_loss<F: Scalar>(model: &GlobalModel<F>, batch: &SnapshotDataset<F>) -> Result<LossComponents> {
    let prep = Prepared::new(&model.library, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(loss_on(model, &prep, &idx))
}

/// Loss and its exact gradient in the layout of [`GlobalModel::params`].
/// The L1 subgradient is 0 at 0.
pub fn loss_gradients<F: Scalar>(model: &GlobalModel<F>, batch: &SnapshotDataset<F>) -> Result<(LossComponents, Vec<F>)> {
    let prep = Prepared::new(&model.library, batch)?;
    let idx: Vec<usize> = (0..batch.len()).collect();
    Ok(gradients_on(model, &prep, &idx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }
}

/// One Adam update with global-norm clipping and decoupled weight decay on
/// the entries flagged in `decay_mask`. Returns the gradient norm before
/// clipping.
pub fn adam_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    decay_mask: &[bool],
    state: &mut AdamState<F>,
    lr: f64,
    weight_decay: f64,
    clip: Option<f64>,
) -> Result<f64> {
    check_dim("gradient length", params.len(), grads.len())?;
    check_dim("decay mask length", params.len(), decay_mask.len())?;
    check_dim("optimizer state", params.len(), state.m.len())?;
    let norm = grads.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (F::of(ADAM_BETA1), F::of(ADAM_BETA2));
    let decay = F::of(lr * weight_decay);
    for i in 0..params.len() {
        let g = grads[i] * F::of(scale);
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        if decay_mask[i] && weight_decay > 0.0 {
            params[i] -= decay * params[i];
        }
        let m_hat = state.m[i].f64() / bc1;
        let v_hat = state.v[i].f64() / bc2;
        params[i] -= F::of(lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
    }
    Ok(norm)
}

/// Per-coordinate mean and population standard deviation of the training
/// states, with the scale floored.
pub fn input_statistics<F: Scalar>(states: ArrayView2<F>) -> (Vec<F>, Vec<F>) {
    let n = states.nrows() as f64;
    let mut mean = Vec::with_capacity(states.ncols());
    let mut scale = Vec::with_capacity(states.ncols());
    for col in states.columns() {
        let m = col.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = col.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / n;
        mean.push(F::of(m));
        scale.push(F::of(var.sqrt().max(INPUT_SCALE_FLOOR)));
    }
    (mean, scale)
}

fn train_run<F: Scalar>(
    train: &Prepared<F>,
    val: &Prepared<F>,
    mut model: GlobalModel<F>,
    cfg: &GlobalConfig,
    run_seed: u64,
) -> Result<GlobalModel<F>> {
    let n = train.states.nrows();
    let all_train: Vec<usize> = (0..n).collect();
    let all_val: Vec<usize> = (0..val.states.nrows()).collect();
    let initial = loss_on(&model, train, &all_train);
    let initial_val = loss_on(&model, val, &all_val);
    check_finite(&initial).map_err(|e| Error::Divergence { step: 0, what: e.to_string() })?;
    check_finite(&initial_val).map_err(|e| Error::Divergence { step: 0, what: e.to_string() })?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: initial.total,
        val_loss: initial_val.total,
    }];
    let mut best = (initial_val.total, model.params());
    let mut reference = initial_val.total;
    let mut wait = 0;
    let mask = model.decay_mask();
    let mut params = model.params();
    let mut adam = AdamState::new(params.len());
    let mut order = all_train.clone();
    let mut rng = stream_rng(run_seed, 1);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (comps, grad) = gradients_on(&model, train, batch);
            check_finite(&comps).map_err(|e| Error::Divergence {
                step: epoch,
                what: e.to_string(),
            })?;
            train_sum += comps.total * batch.len() as f64;
            adam_step(&mut params, &grad, &mask, &mut adam, cfg.lr, cfg.weight_decay, cfg.grad_clip)?;
            model.set_params(&params)?;
        }
        let val_loss = loss_on(&model, val, &all_val).total;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                step: epoch,
                what: "non-finite validation loss".into(),
            });
        }
        log.push(EpochLog {
            epoch,
            train_loss: train_sum / n as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone());
        }
        if val_loss < reference - cfg.min_delta {
            reference = val_loss;
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                log::debug!("early stop at epoch {epoch}, best validation loss {}", best.0);
                break;
            }
        }
    }
    model.set_params(&best.1)?;
    model.train_log = log;
    Ok(model)
}

/// Minibatch training with early stopping on the validation loss; the
/// snapshot with the lowest validation loss is returned. Without a
/// validation split the training set is used. Restarts are seeded from
/// `cfg.seed` and the one with the lowest validation loss is kept.
pub fn fit_global<F: Scalar>(
    train: &SnapshotDataset<F>,
    val: Option<&SnapshotDataset<F>>,
    cfg: &GlobalConfig,
) -> Result<GlobalModel<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let library = PolyLibrary::new(train.dim(), cfg.lib_order)?;
    let prep_train = Prepared::new(&library, train)?;
    let prep_val = Prepared::new(&library, val.unwrap_or(train))?;
    let (mean, scale) = input_statistics(train.states.view());
    let mut best: Option<GlobalModel<F>> = None;
    let mut last_err = None;
    for r in 0..cfg.n_restarts {
        let run_seed = if r == 0 { cfg.seed } else { derive_seed(cfg.seed, r as u64) };
        let mut model = GlobalModel::init(library.clone(), cfg, run_seed);
        model.gate.input_mean = mean.clone();
        model.gate.input_scale = scale.clone();
        model.normalization = train.meta.normalization.clone();
        match train_run(&prep_train, &prep_val, model, cfg, run_seed) {
            Ok(m) => {
                if best.as_ref().is_none_or(|b| m.best_val_loss() < b.best_val_loss()) {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("restart {r} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    best.ok_or_else(|| last_err.expect("at least one restart ran"))
}

/// One seed of an ensemble; `permutation[k]` is the member's expert that
/// corresponds to ensemble expert `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember<F> {
    pub seed: u64,
    pub permutation: Vec<usize>,
    pub model: GlobalModel<F>,
}

/// Seed ensemble with experts aligned to the first member. Coefficients and
/// log-sigmas are averaged after alignment; the gate is the mean of the
/// aligned member gate outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<F> {
    pub library: PolyLibrary,
    pub thetas: Vec<Array2<F>>,
    pub log_sigma: Vec<F>,
    pub members: Vec<EnsembleMember<F>>,
    pub normalization: Option<Normalization>,
}

impl<F: Scalar> EnsembleModel<F> {
    /// Aligns every member to the first and averages.
    pub fn from_members(models: Vec<(u64, GlobalModel<F>)>) -> Result<Self> {
        let Some((_, first)) = models.first() else {
            return Err(Error::Empty("ensemble needs at least one member".into()));
        };
        let reference: Vec<Array2<f64>> = first.thetas.iter().map(|t| t.mapv(|v| v.f64())).collect();
        let library = first.library.clone();
        let normalization = first.normalization.clone();
        let k = first.n_experts();
        let mut members = Vec::with_capacity(models.len());
        for (seed, model) in models {
            if model.library != library {
                return Err(Error::InvalidConfig("ensemble members use different libraries".into()));
            }
            let est: Vec<Array2<f64>> = model.thetas.iter().map(|t| t.mapv(|v| v.f64())).collect();
            let permutation = align_experts(&est, &reference)?;
            members.push(EnsembleMember {
                seed,
                permutation,
                model,
            });
        }
        let inv = F::of(1.0 / members.len() as f64);
        let thetas = (0..k)
            .map(|kk| {
                let mut acc = Array2::zeros(members[0].model.thetas[0].dim());
                for m in &members {
                    acc += &m.model.thetas[m.permutation[kk]];
                }
                if members.len() > 1 {
                    acc.mapv_inplace(|v| v * inv);
                }
                acc
            })
            .collect();
        let log_sigma = (0..k)
            .map(|kk| {
                let s: F = members.iter().map(|m| m.model.log_sigma[m.permutation[kk]]).sum();
                if members.len() > 1 {
                    s * inv
                } else {
                    s
                }
            })
            .collect();
        Ok(Self {
            library,
            thetas,
            log_sigma,
            members,
            normalization,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.thetas.len()
    }

    pub fn dim(&self) -> usize {
        self.library.dim()
    }

    pub fn sigma(&self, k: usize) -> F {
        self.log_sigma[k].exp()
    }

    /// Mean of the aligned member gates.
    pub fn gate_probs(&self, x: &[F]) -> Vec<F> {
        let k = self.n_experts();
        if self.members.len() == 1 {
            let m = &self.members[0];
            let p = m.model.gate_probs(x);
            return m.permutation.iter().map(|&j| p[j]).collect();
        }
        let mut out = vec![F::zero(); k];
        for m in &self.members {
            let p = m.model.gate_probs(x);
            for (o, &j) in out.iter_mut().zip(&m.permutation) {
                *o += p[j];
            }
        }
        let inv = F::of(1.0 / self.members.len() as f64);
        out.iter_mut().for_each(|v| *v *= inv);
        out
    }
}

/// Fits `n_seeds` models (member `s > 0` uses a seed derived from
/// `cfg.seed`) and combines the survivors.
pub fn ensemble_fit<F: Scalar>(
    train: &SnapshotDataset<F>,
    val: Option<&SnapshotDataset<F>>,
    cfg: &GlobalConfig,
    n_seeds: usize,
) -> Result<EnsembleModel<F>> {
    if n_seeds == 0 {
        return Err(Error::InvalidConfig("n_seeds must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..n_seeds)
        .map(|s| if s == 0 { cfg.seed } else { derive_seed(cfg.seed, 0xe5e0 + s as u64) })
        .collect();
    let fits: Vec<(u64, Result<GlobalModel<F>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            (seed, fit_global(train, val, &c))
        })
        .collect();
    let mut survivors = Vec::new();
    let mut last_err = None;
    for (seed, fit) in fits {
        match fit {
            Ok(m) => survivors.push((seed, m)),
            Err(e) => {
                log::warn!("ensemble member with seed {seed} dropped: {e}");
                last_err = Some(e);
            }
        }
    }
    if survivors.is_empty() {
        return Err(last_err.expect("at least one member ran"));
    }
    EnsembleModel::from_members(survivors)
}

/// Gate entropy `H(π(x))` in nats at every row of `points`.
pub fn gate_entropy_map<F: Scalar>(gate: impl Fn(&[F]) -> Vec<F> + Sync, points: ArrayView2<F>) -> Vec<f64> {
    let rows: Vec<Vec<F>> = points.rows().into_iter().map(|r| r.to_vec()).collect();
    rows.par_iter().map(|x| entropy(&gate(x)).f64()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetMeta;
    use crate::mode_local::{fit_local, EmConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn tiny_model(seed: u64, d: usize, k: usize, hidden: &[usize], act: Activation, degree: usize) -> GlobalModel<f64> {
        let cfg = GlobalConfig {
            k,
            lib_order: degree,
            gate_hidden: hidden.to_vec(),
            activation: act,
            lam_l1: 0.01,
            lam_ent: 0.3,
            lam_lb: 0.2,
            ..GlobalConfig::default()
        };
        let lib = PolyLibrary::new(d, degree).unwrap();
        let mut m = GlobalModel::init(lib, &cfg, seed);
        // larger coefficients than the initializer so the L1 term is smooth
        // at the probe point
        let mut rng = stream_rng(seed, 9);
        for th in &mut m.thetas {
            th.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        for s in &mut m.log_sigma {
            *s = rng.random_range(-0.5..0.5);
        }
        m.gate.input_mean = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
        m.gate.input_scale = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
        m
    }

    fn random_data(seed: u64, n: usize, d: usize) -> SnapshotDataset<f64> {
        let mut rng = stream_rng(seed, 7);
        let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
        let v = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.5..1.5));
        SnapshotDataset::new(x, v, None, DatasetMeta::named("test", seed)).unwrap()
    }

    fn fd_check(model: &GlobalModel<f64>, data: &SnapshotDataset<f64>) -> f64 {
        let (_, grad) = loss_gradients(model, data).unwrap();
        let p0 = model.params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut m = model.clone();
        for i in 0..p0.len() {
            let mut p = p0.clone();
            p[i] = p0[i] + h;
            m.set_params(&p).unwrap();
            let up = batch_loss(&m, data).unwrap().total;
            p[i] = p0[i] - h;
            m.set_params(&p).unwrap();
            let down = batch_loss(&m, data).unwrap().total;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn zero_gate_is_uniform() {
        let g = GatingNetwork::<f64>::zeros(2, &[4], 3, Activation::Tanh);
        for p in g.forward(&[0.3, -7.0]) {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn large_logit_gap() {
        let p = softmax(&[5.0f64, 5.0 - 40.0, 5.0 - 41.0]);
        assert!((p[0] - 1.0).abs() < 1e-17);
    }

    #[test]
    fn gate_simplex_on_random_points() {
        let m = tiny_model(3, 3, 4, &[16, 8], Activation::Silu, 1);
        let mut rng = stream_rng(4, 0);
        for _ in 0..10_000 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = m.gate_probs(&x);
            assert!(p.iter().all(|&v| v > 0.0 || v == 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn uniform_gate_entropy_and_balance() {
        let lib = PolyLibrary::new(2, 1).unwrap();
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            lam_ent: 1.0,
            lam_lb: 1.0,
            lam_l1: 0.0,
            ..GlobalConfig::default()
        };
        let mut m = GlobalModel::<f64>::init(lib, &cfg, 0);
        m.gate = GatingNetwork::zeros(2, &[64], 2, Activation::Tanh);
        let c = batch_loss(&m, &random_data(0, 10, 2)).unwrap();
        assert_abs_diff_eq!(c.ent, 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(c.lb, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn one_hot_balanced_gates() {
        // a one-dimensional gate with huge slope sends x<0 to expert 0 and
        // x>0 to expert 1
        let lib = PolyLibrary::new(1, 1).unwrap();
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            gate_hidden: vec![],
            lam_ent: 1.0,
            lam_lb: 1.0,
            ..GlobalConfig::default()
        };
        let mut m = GlobalModel::<f64>::init(lib, &cfg, 0);
        m.gate.layers[0].w = ndarray::array![[-1e4], [1e4]];
        let x = ndarray::array![[-1.0], [1.0], [-2.0], [2.0]];
        let data = SnapshotDataset::new(x.clone(), x, None, DatasetMeta::named("t", 0)).unwrap();
        let c = batch_loss(&m, &data).unwrap();
        assert!(c.ent.abs() < 1e-12);
        assert!(c.lb.abs() < 1e-12);
    }

    #[test]
    fn single_expert_is_gaussian_regression() {
        let lib = PolyLibrary::new(2, 1).unwrap();
        let cfg = GlobalConfig {
            k: 1,
            lib_order: 1,
            lam_l1: 0.0,
            lam_ent: 1.0,
            lam_lb: 1.0,
            ..GlobalConfig::default()
        };
        let m = GlobalModel::<f64>::init(lib.clone(), &cfg, 5);
        let data = random_data(1, 30, 2);
        let c = batch_loss(&m, &data).unwrap();
        assert_eq!(c.ent, 0.0);
        assert_eq!(c.lb, 0.0);
        let s = m.sigma(0);
        let mut nll = 0.0;
        for i in 0..data.len() {
            let x = data.states.row(i).to_vec();
            let f = crate::dynlib::expert_velocity(&lib, &m.thetas[0], &x).unwrap();
            let sq: f64 = f.iter().zip(data.velocities.row(i)).map(|(a, b)| (a - b).powi(2)).sum();
            nll += sq / (2.0 * s * s) + 2.0 * s.ln() + (2.0 * std::f64::consts::PI).ln();
        }
        assert_abs_diff_eq!(c.nll, nll / data.len() as f64, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences_on_twenty_models() {
        for seed in 0..20u64 {
            let mut rng = stream_rng(seed, 11);
            let d = rng.random_range(1..=3);
            let k = rng.random_range(1..=3);
            let hidden: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=5)).collect();
            let act = if rng.random() { Activation::Tanh } else { Activation::Silu };
            let degree = rng.random_range(0..=2);
            let m = tiny_model(seed, d, k, &hidden, act, degree);
            let data = random_data(seed + 100, 17, d);
            let worst = fd_check(&m, &data);
            assert!(worst <= 1e-4, "seed {seed}: relative error {worst}");
        }
    }

    #[test]
    fn gradients_spec_tiny_model() {
        let m = tiny_model(42, 2, 2, &[4], Activation::Tanh, 2);
        assert!(fd_check(&m, &random_data(43, 25, 2)) <= 1e-4);
    }

    #[test]
    fn symmetric_model_has_equal_theta_gradients() {
        let mut m = tiny_model(1, 2, 2, &[4], Activation::Tanh, 1);
        m.thetas[1] = m.thetas[0].clone();
        m.log_sigma[1] = m.log_sigma[0];
        m.gate = GatingNetwork::zeros(2, &[4], 2, Activation::Tanh);
        let (_, g) = loss_gradients(&m, &random_data(2, 20, 2)).unwrap();
        let base = m.theta_offset();
        let len = m.thetas[0].len();
        for i in 0..len {
            assert_abs_diff_eq!(g[base + i], g[base + len + i], epsilon = 1e-15);
        }
    }

    #[test]
    fn l1_subgradient_zero_at_zero() {
        let mut m = tiny_model(1, 1, 1, &[], Activation::Tanh, 1);
        m.config.lam_l1 = 10.0;
        m.thetas[0].fill(0.0);
        let data = random_data(3, 10, 1);
        let (_, g) = loss_gradients(&m, &data).unwrap();
        m.config.lam_l1 = 0.0;
        let (_, g0) = loss_gradients(&m, &data).unwrap();
        assert_eq!(g, g0);
    }

    #[test]
    fn adam_first_step_and_trivial_cases() {
        let mut p = [0.0f64];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &[false], &mut st, 0.01, 0.0, None).unwrap();
        assert_abs_diff_eq!(p[0], -0.01, epsilon = 1e-9);

        let mut p = [1.5f64, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &[true, false], &mut st, 0.1, 0.0, None).unwrap();
        assert_eq!(p, [1.5, -2.0]);
    }

    #[test]
    fn adam_clipping_scales_gradient() {
        let mut a = [0.0f64, 0.0];
        let mut sa = AdamState::new(2);
        let norm = adam_step(&mut a, &[6.0, 8.0], &[false; 2], &mut sa, 0.01, 0.0, Some(5.0)).unwrap();
        assert_abs_diff_eq!(norm, 10.0, epsilon = 1e-12);
        let mut b = [0.0f64, 0.0];
        let mut sb = AdamState::new(2);
        adam_step(&mut b, &[3.0, 4.0], &[false; 2], &mut sb, 0.01, 0.0, None).unwrap();
        assert_eq!(sa, sb);
        assert_eq!(a, b);
    }

    #[test]
    fn weight_decay_only_on_masked_entries() {
        let mut p = [2.0f64, 2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &[true, false], &mut st, 0.1, 0.5, None).unwrap();
        assert_abs_diff_eq!(p[0], 2.0 * (1.0 - 0.05), epsilon = 1e-15);
        assert_eq!(p[1], 2.0);
    }

    #[test]
    fn entropy_map_examples() {
        let zero = GatingNetwork::<f64>::zeros(2, &[3], 4, Activation::Tanh);
        let pts = ndarray::array![[0.0, 1.0], [5.0, -3.0]];
        for h in gate_entropy_map(|x| zero.forward(x), pts.view()) {
            assert_abs_diff_eq!(h, 4f64.ln(), epsilon = 1e-12);
        }
        let hot = gate_entropy_map(|_: &[f64]| vec![1.0, 0.0], pts.view());
        assert_eq!(hot, vec![0.0, 0.0]);
        let h = gate_entropy_map(|_: &[f64]| vec![0.11, 0.89], pts.view());
        // -0.11 ln 0.11 - 0.89 ln 0.89
        assert_abs_diff_eq!(h[0], 0.346515, epsilon = 1e-6);
    }

    fn two_regime_data(seed: u64, n: usize) -> SnapshotDataset<f64> {
        // v = -x on the left half-line and v = +x on the right
        let mut rng = stream_rng(seed, 1);
        let x: Array2<f64> = Array2::from_shape_fn((n, 1), |_| rng.random_range(-2.0..2.0));
        let v = Array2::from_shape_fn((n, 1), |(i, _)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[[i, 0]].abs() + 0.05 * e
        });
        let labels = (0..n).map(|i| usize::from(x[[i, 0]] > 0.0)).collect();
        SnapshotDataset::new(x, v, Some(labels), DatasetMeta::named("test", seed)).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            epochs: 0,
            seed: 3,
            ..GlobalConfig::default()
        };
        let train = two_regime_data(1, 200);
        let val = two_regime_data(2, 50);
        let m = fit_global(&train, Some(&val), &cfg).unwrap();
        assert_eq!(m.train_log.len(), 1);
        let mut init = GlobalModel::init(m.library.clone(), &cfg, 3);
        let (mu, sc) = input_statistics(train.states.view());
        init.gate.input_mean = mu;
        init.gate.input_scale = sc;
        assert_eq!(m.params(), init.params());
        assert_abs_diff_eq!(m.train_log[0].val_loss, batch_loss(&m, &val).unwrap().total, epsilon = 1e-12);
    }

    #[test]
    fn fit_learns_two_regimes_and_keeps_best_snapshot() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            gate_hidden: vec![8],
            epochs: 300,
            patience: 40,
            lr: 2e-2,
            batch_size: 64,
            seed: 1,
            ..GlobalConfig::default()
        };
        let train = two_regime_data(3, 800);
        let val = two_regime_data(4, 200);
        let m = fit_global(&train, Some(&val), &cfg).unwrap();
        let best = m.best_val_loss();
        assert_abs_diff_eq!(batch_loss(&m, &val).unwrap().total, best, epsilon = 1e-9);
        let slopes: Vec<f64> = m.thetas.iter().map(|t| t[[1, 0]]).collect();
        let (lo, hi) = (slopes[0].min(slopes[1]), slopes[0].max(slopes[1]));
        assert!((lo + 1.0).abs() < 0.1 && (hi - 1.0).abs() < 0.1, "slopes {slopes:?}");
        let right = if slopes[0] > 0.0 { 0 } else { 1 };
        assert!(m.gate_probs(&[1.5])[right] > 0.9);
        assert!(m.gate_probs(&[-1.5])[right] < 0.1);
    }

    #[test]
    fn input_statistics_ignore_validation() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            epochs: 2,
            ..GlobalConfig::default()
        };
        let train = two_regime_data(5, 100);
        let a = fit_global(&train, Some(&two_regime_data(6, 40)), &cfg).unwrap();
        let b = fit_global(&train, Some(&two_regime_data(7, 90)), &cfg).unwrap();
        assert_eq!(a.gate.input_mean, b.gate.input_mean);
        assert_eq!(a.gate.input_scale, b.gate.input_scale);
    }

    #[test]
    fn single_flow_matches_local_fit() {
        let mut rng = stream_rng(8, 0);
        let n = 2000;
        let x = Array2::from_shape_fn((n, 2), |_| rng.random_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, 2), |(i, j)| {
            let e: f64 = StandardNormal.sample(&mut rng);
            let f = if j == 0 { -x[[i, 0]] + 0.5 * x[[i, 1]] } else { 0.3 - x[[i, 1]] };
            f + 0.2 * e
        });
        let data = SnapshotDataset::new(x, v, None, DatasetMeta::named("t", 0)).unwrap();
        let local = fit_local(
            &data,
            None,
            &EmConfig {
                n_clusters: 1,
                degree: 1,
                alpha: 0.0,
                n_restarts: 1,
                ..EmConfig::default()
            },
        )
        .unwrap();
        let local_nll = -crate::mode_local::penalized_loglik(&local, &data).unwrap() / n as f64;
        let cfg = GlobalConfig {
            k: 1,
            lib_order: 1,
            lam_l1: 0.0,
            lam_ent: 0.0,
            lam_lb: 0.0,
            epochs: 400,
            patience: 400,
            lr: 1e-2,
            batch_size: 256,
            ..GlobalConfig::default()
        };
        let global = fit_global(&data, None, &cfg).unwrap();
        let nll = batch_loss(&global, &data).unwrap().nll;
        assert!((nll - local_nll).abs() < 1e-2, "global {nll} local {local_nll}");
    }

    #[test]
    fn presets_are_verbatim() {
        let g = GlobalConfig::preset("goldbeter").unwrap();
        assert_eq!((g.k, g.lib_order, g.epochs, g.patience, g.batch_size), (2, 3, 10_000, 30, 512));
        assert_eq!((g.lr, g.grad_clip, g.activation), (1e-2, Some(5.0), Activation::Silu));
        let l = GlobalConfig::preset("lineage").unwrap();
        assert_eq!((l.k, l.lib_order, l.lam_lb, l.weight_decay), (3, 1, 1e-1, 1e-4));
        let t = GlobalConfig::preset("toy_branching").unwrap();
        assert_eq!((t.min_delta, t.grad_clip, t.lib_order), (0.0, None, 0));
        let f = GlobalConfig::preset("fucci").unwrap();
        assert_eq!((f.lr, f.patience, f.epochs), (1e-3, 100, 5000));
        assert!(GlobalConfig::preset("nope").is_err());
        for name in PRESET_NAMES {
            GlobalConfig::preset(name).unwrap().validate().unwrap();
            assert!(GlobalConfig::preset_caption(name).is_some());
        }
    }

    #[test]
    fn ensemble_properties() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            gate_hidden: vec![4],
            epochs: 5,
            seed: 9,
            ..GlobalConfig::default()
        };
        let train = two_regime_data(10, 200);
        let single = fit_global(&train, None, &cfg).unwrap();
        let ens = ensemble_fit(&train, None, &cfg, 1).unwrap();
        assert_eq!(ens.thetas, single.thetas);
        assert_eq!(ens.log_sigma, single.log_sigma);
        assert_eq!(ens.gate_probs(&[0.7]), single.gate_probs(&[0.7]));

        let twin = EnsembleModel::from_members(vec![(1, single.clone()), (2, single.clone())]).unwrap();
        for (a, b) in twin.thetas.iter().zip(&single.thetas) {
            for (x, y) in a.iter().zip(b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-15);
            }
        }

        let mut swapped = single.clone();
        swapped.thetas.swap(0, 1);
        swapped.log_sigma.swap(0, 1);
        let last = swapped.gate.layers.last_mut().unwrap();
        let w = last.w.clone();
        last.w.row_mut(0).assign(&w.row(1));
        last.w.row_mut(1).assign(&w.row(0));
        last.b.swap(0, 1);
        let e = EnsembleModel::from_members(vec![(1, single.clone()), (2, swapped)]).unwrap();
        assert_eq!(e.members[1].permutation, vec![1, 0]);
        for (a, b) in e.gate_probs(&[0.3]).iter().zip(single.gate_probs(&[0.3])) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            epochs: 3,
            batch_size: 50,
            ..GlobalConfig::default()
        };
        let train = two_regime_data(11, 300);
        let a = fit_global(&train, None, &cfg).unwrap();
        let b = fit_global(&train, None, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.train_log, b.train_log);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gate_outputs_are_simplex(seed in 0u64..1000, x in proptest::collection::vec(-1e3f64..1e3, 2)) {
            let m = tiny_model(seed, 2, 3, &[5], Activation::Tanh, 1);
            let p = m.gate_probs(&x);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn gradient_check_random_configs(seed in 0u64..10_000) {
            let m = tiny_model(seed, 2, 2, &[3], if seed % 2 == 0 { Activation::Silu } else { Activation::Tanh }, 1);
            prop_assert!(fd_check(&m, &random_data(seed, 9, 2)) <= 1e-4);
        }
    }
}
