//! Stochastic forward simulation of fitted mixtures: at each step draw an
//! expert from `π(x_t)`, take an Euler step with its field and add
//! `σ_B √Δt ξ`.
//!
//! Models fitted on normalized data are simulated in normalized state
//! coordinates; the per-output factors `s_v / s_x` make the learned field a
//! time derivative of those coordinates.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynlib::{velocity_from_features, Normalization, PolyLibrary};
use crate::error::{check_dim, Error, Result};
use crate::mode_global::{EnsembleModel, GlobalModel};
use crate::mode_local::LocalModel;
use crate::numfmt::sig12;
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Any component beyond this magnitude flags divergence.
pub const DIVERGENCE_BOUND: f64 = 1e6;

/// What the simulator needs from a fitted model.
pub trait MixtureDynamics<F: Scalar>: Sync {
    fn library(&self) -> &PolyLibrary;
    fn n_experts(&self) -> usize;
    fn theta(&self, k: usize) -> &Array2<F>;
    fn mixing_probs(&self, x: &[F]) -> Vec<F>;
    fn normalization(&self) -> Option<&Normalization>;

    fn dim(&self) -> usize {
        self.library().dim()
    }

    /// Whether `mixing_probs` depends on the state.
    fn state_dependent(&self) -> bool {
        true
    }
}

impl<F: Scalar> MixtureDynamics<F> for LocalModel<F> {
    fn library(&self) -> &PolyLibrary {
        &self.library
    }
    fn n_experts(&self) -> usize {
        self.experts.len()
    }
    fn theta(&self, k: usize) -> &Array2<F> {
        &self.experts[k].theta
    }
    fn mixing_probs(&self, _x: &[F]) -> Vec<F> {
        self.mixing.clone()
    }
    fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }
    fn state_dependent(&self) -> bool {
        false
    }
}

impl<F: Scalar> MixtureDynamics<F> for GlobalModel<F> {
    fn library(&self) -> &PolyLibrary {
        &self.library
    }
    fn n_experts(&self) -> usize {
        self.thetas.len()
    }
    fn theta(&self, k: usize) -> &Array2<F> {
        &self.thetas[k]
    }
    fn mixing_probs(&self, x: &[F]) -> Vec<F> {
        self.gate_probs(x)
    }
    fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }
}

impl<F: Scalar> MixtureDynamics<F> for EnsembleModel<F> {
    fn library(&self) -> &PolyLibrary {
        &self.library
    }
    fn n_experts(&self) -> usize {
        self.thetas.len()
    }
    fn theta(&self, k: usize) -> &Array2<F> {
        &self.thetas[k]
    }
    fn mixing_probs(&self, x: &[F]) -> Vec<F> {
        self.gate_probs(x)
    }
    fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExpertPolicy {
    #[default]
    Sample,
    /// Most probable expert, lowest index on ties.
    Argmax,
}

impl fmt::Display for ExpertPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertPolicy::Sample => "sample",
            ExpertPolicy::Argmax => "argmax",
        })
    }
}

impl FromStr for ExpertPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(ExpertPolicy::Sample),
            "argmax" => Ok(ExpertPolicy::Argmax),
            _ => Err(Error::InvalidConfig(format!("unknown expert policy '{s}' (expected sample or argmax)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub sigma_b: f64,
    pub seed: u64,
    pub expert_policy: ExpertPolicy,
    pub record_gates: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            dt: 0.01,
            n_steps: 100,
            sigma_b: 0.05,
            seed: 0,
            expert_policy: ExpertPolicy::Sample,
            record_gates: false,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.sigma_b >= 0.0 && self.sigma_b.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma_b must be >= 0, got {}", self.sigma_b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult<F> {
    /// `M x (n_steps + 1) x d`; rows after a divergence are NaN.
    pub trajectories: Array3<F>,
    /// `expert_draws[[p, t]]` drives the step from `t` to `t + 1`.
    pub expert_draws: Array2<usize>,
    /// `M x n_steps x K` gate probabilities at `x_t`, when recorded.
    pub gate_trace: Option<Array3<F>>,
    /// Step whose state first left the finite bounded region.
    pub diverged: Vec<Option<usize>>,
}

/// Categorical draw by inversion, or the lowest-index maximum.
fn choose<F: Scalar, R: Rng>(probs: &[F], policy: ExpertPolicy, rng: &mut R) -> usize {
    match policy {
        ExpertPolicy::Argmax => {
            let mut best = 0;
            for (k, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = k;
                }
            }
            best
        }
        ExpertPolicy::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (k, p) in probs.iter().enumerate() {
                acc += p.f64();
                if u < acc {
                    return k;
                }
            }
            // rounding left a sliver above the cumulative sum
            probs.iter().rposition(|p| *p > F::zero()).unwrap_or(0)
        }
    }
}

struct Stepper<'a, F, M: ?Sized> {
    model: &'a M,
    cfg: &'a RolloutConfig,
    factors: Vec<F>,
    constant_probs: Option<Vec<F>>,
}

impl<'a, F: Scalar, M: MixtureDynamics<F> + ?Sized> Stepper<'a, F, M> {
    fn new(model: &'a M, cfg: &'a RolloutConfig) -> Self {
        let d = model.dim();
        let factors = match model.normalization() {
            Some(n) => n.time_factors().into_iter().map(F::of).collect(),
            None => vec![F::one(); d],
        };
        let constant_probs = (!model.state_dependent()).then(|| model.mixing_probs(&vec![F::zero(); d]));
        Self {
            model,
            cfg,
            factors,
            constant_probs,
        }
    }

    /// Runs particle `p`, calling `observe(t, x_t, expert, π(x_t))` for every
    /// step and returning the final state or the step of divergence.
    fn run(&self, p: usize, x0: &[F], mut observe: impl FnMut(usize, &[F], usize, &[F])) -> std::result::Result<Vec<F>, usize> {
        let d = self.model.dim();
        let lib = self.model.library();
        let mut expert_rng = stream_rng(self.cfg.seed, 2 * p as u64);
        let mut noise_rng = stream_rng(self.cfg.seed, 2 * p as u64 + 1);
        let dt = F::of(self.cfg.dt);
        let amp = F::of(self.cfg.sigma_b * self.cfg.dt.sqrt());
        let mut x = x0.to_vec();
        let mut z = vec![F::zero(); lib.n_features()];
        let mut f = vec![F::zero(); d];
        for t in 0..self.cfg.n_steps {
            let probs = match &self.constant_probs {
                Some(p) => p.clone(),
                None => self.model.mixing_probs(&x),
            };
            let k = choose(&probs, self.cfg.expert_policy, &mut expert_rng);
            observe(t, &x, k, &probs);
            lib.featurize_into(&x, &mut z);
            velocity_from_features(&z, self.model.theta(k), &mut f);
            for j in 0..d {
                let xi: f64 = noise_rng.sample(StandardNormal);
                x[j] += dt * self.factors[j] * f[j] + amp * F::of(xi);
            }
            if x.iter().any(|v| !v.is_finite() || v.f64().abs() > DIVERGENCE_BOUND) {
                return Err(t + 1);
            }
        }
        Ok(x)
    }
}

fn check_inputs<F: Scalar, M: MixtureDynamics<F> + ?Sized>(model: &M, x0s: ArrayView2<F>, cfg: &RolloutConfig) -> Result<()> {
    cfg.validate()?;
    check_dim("initial state dimension", model.dim(), x0s.ncols())?;
    if x0s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial states".into()));
    }
    Ok(())
}

/// Full trajectories, expert draws and, optionally, gate traces.
pub fn rollout<F: Scalar, M: MixtureDynamics<F> + ?Sized>(model: &M, x0s: ArrayView2<F>, cfg: &RolloutConfig) -> Result<RolloutResult<F>> {
    check_inputs(model, x0s, cfg)?;
    let (m, d, n, k) = (x0s.nrows(), model.dim(), cfg.n_steps, model.n_experts());
    let stepper = Stepper::new(model, cfg);
    struct Particle<F> {
        traj: Vec<F>,
        draws: Vec<usize>,
        gates: Vec<F>,
        diverged: Option<usize>,
    }
    let particles: Vec<Particle<F>> = (0..m)
        .into_par_iter()
        .map(|p| {
            let x0 = x0s.row(p).to_vec();
            let mut traj = Vec::with_capacity((n + 1) * d);
            let mut draws = Vec::with_capacity(n);
            let mut gates = Vec::with_capacity(if cfg.record_gates { n * k } else { 0 });
            let result = stepper.run(p, &x0, |_, x, e, probs| {
                traj.extend_from_slice(x);
                draws.push(e);
                if cfg.record_gates {
                    gates.extend_from_slice(probs);
                }
            });
            let diverged = match result {
                Ok(last) => {
                    traj.extend(last);
                    None
                }
                Err(step) => {
                    let fill = *draws.last().unwrap_or(&0);
                    traj.resize((n + 1) * d, F::nan());
                    draws.resize(n, fill);
                    if cfg.record_gates {
                        gates.resize(n * k, F::nan());
                    }
                    Some(step)
                }
            };
            Particle {
                traj,
                draws,
                gates,
                diverged,
            }
        })
        .collect();

    let mut trajectories = Array3::zeros((m, n + 1, d));
    let mut expert_draws = Array2::zeros((m, n));
    let mut gate_trace = cfg.record_gates.then(|| Array3::zeros((m, n, k)));
    let mut diverged = Vec::with_capacity(m);
    for (p, part) in particles.into_iter().enumerate() {
        for (dst, src) in trajectories.slice_mut(ndarray::s![p, .., ..]).iter_mut().zip(&part.traj) {
            *dst = *src;
        }
        for (dst, src) in expert_draws.row_mut(p).iter_mut().zip(&part.draws) {
            *dst = *src;
        }
        if let Some(g) = gate_trace.as_mut() {
            for (dst, src) in g.slice_mut(ndarray::s![p, .., ..]).iter_mut().zip(&part.gates) {
                *dst = *src;
            }
        }
        diverged.push(part.diverged);
    }
    Ok(RolloutResult {
        trajectories,
        expert_draws,
        gate_trace,
        diverged,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pushforward<F> {
    /// Final states of the particles that stayed bounded, in particle order.
    pub finals: Array2<F>,
    /// Original index of every row of `finals`.
    pub survivors: Vec<usize>,
    pub n_diverged: usize,
}

/// Final states only; needs no trajectory storage.
pub fn pushforward<F: Scalar, M: MixtureDynamics<F> + ?Sized>(model: &M, x0s: ArrayView2<F>, cfg: &RolloutConfig) -> Result<Pushforward<F>> {
    check_inputs(model, x0s, cfg)?;
    let stepper = Stepper::new(model, cfg);
    let results: Vec<std::result::Result<Vec<F>, usize>> = (0..x0s.nrows())
        .into_par_iter()
        .map(|p| stepper.run(p, &x0s.row(p).to_vec(), |_, _, _, _| {}))
        .collect();
    let survivors: Vec<usize> = results.iter().enumerate().filter(|(_, r)| r.is_ok()).map(|(i, _)| i).collect();
    let n_diverged = x0s.nrows() - survivors.len();
    if survivors.is_empty() {
        let step = results.iter().filter_map(|r| r.as_ref().err()).min().copied().unwrap_or(0);
        return Err(Error::Divergence {
            step,
            what: format!("all {} particles diverged", x0s.nrows()),
        });
    }
    let mut finals = Array2::zeros((survivors.len(), model.dim()));
    for (row, &p) in survivors.iter().enumerate() {
        let x = results[p].as_ref().expect("survivor");
        for (dst, src) in finals.row_mut(row).iter_mut().zip(x) {
            *dst = *src;
        }
    }
    Ok(Pushforward {
        finals,
        survivors,
        n_diverged,
    })
}

/// First step at which the gate probability of `expert` exceeds
/// `threshold`, per particle. Requires `cfg.record_gates`; the simulation
/// is the one [`rollout`] would produce.
pub fn commitment_probe<F: Scalar, M: MixtureDynamics<F> + ?Sized>(
    model: &M,
    x0s: ArrayView2<F>,
    cfg: &RolloutConfig,
    expert: usize,
    threshold: f64,
) -> Result<Vec<Option<usize>>> {
    if !cfg.record_gates {
        return Err(Error::InvalidConfig("commitment probe needs record_gates".into()));
    }
    check_inputs(model, x0s, cfg)?;
    if expert >= model.n_experts() {
        return Err(Error::InvalidConfig(format!(
            "expert index {expert} out of range for {} experts",
            model.n_experts()
        )));
    }
    let stepper = Stepper::new(model, cfg);
    Ok((0..x0s.nrows())
        .into_par_iter()
        .map(|p| {
            let mut first = None;
            let _ = stepper.run(p, &x0s.row(p).to_vec(), |t, _, _, probs| {
                if first.is_none() && probs[expert].f64() > threshold {
                    first = Some(t);
                }
            });
            first
        })
        .collect())
}

/// First crossing per particle read off a recorded gate trace.
pub fn first_crossings<F: Scalar>(result: &RolloutResult<F>, expert: usize, threshold: f64) -> Result<Vec<Option<usize>>> {
    let trace = result
        .gate_trace
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("rollout has no gate trace".into()))?;
    Ok(trace
        .outer_iter()
        .map(|steps| steps.outer_iter().position(|g| g[expert].f64() > threshold))
        .collect())
}

/// Trajectory dump: `particle,step,x0..,expert[,pi_0..]`. Row `t` carries
/// the expert drawn at `x_t` (and its gate); the last row of each particle
/// leaves those fields empty.
pub fn write_trajectories<F: Scalar>(result: &RolloutResult<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let (m, steps, d) = result.trajectories.dim();
    let k = result.gate_trace.as_ref().map(|g| g.dim().2);
    let mut header: Vec<String> = vec!["particle".into(), "step".into()];
    header.extend((0..d).map(|j| format!("x{j}")));
    header.push("expert".into());
    if let Some(k) = k {
        header.extend((0..k).map(|j| format!("pi_{j}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for p in 0..m {
        for t in 0..steps {
            let mut row = vec![p.to_string(), t.to_string()];
            row.extend((0..d).map(|j| sig12(result.trajectories[[p, t, j]].f64())));
            let transition = t + 1 < steps;
            row.push(if transition { result.expert_draws[[p, t]].to_string() } else { String::new() });
            if let (Some(k), Some(g)) = (k, result.gate_trace.as_ref()) {
                row.extend((0..k).map(|j| if transition { sig12(g[[p, t, j]].f64()) } else { String::new() }));
            }
            writeln!(w, "{}", row.join(","))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Final states as `particle,x0..x{d-1}`.
pub fn write_finals<F: Scalar>(push: &Pushforward<F>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let d = push.finals.ncols();
    let mut header = vec!["particle".to_string()];
    header.extend((0..d).map(|j| format!("x{j}")));
    writeln!(w, "{}", header.join(","))?;
    for (row, &p) in push.finals.rows().into_iter().zip(&push.survivors) {
        let mut cells = vec![p.to_string()];
        cells.extend(row.iter().map(|v| sig12(v.f64())));
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a headered CSV of states, using every column whose name starts with
/// `x` followed by digits.
pub fn read_states(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Empty(format!("{} has no header", path.display())))?;
    let cols: Vec<usize> = header
        .split(',')
        .enumerate()
        .filter(|(_, name)| {
            let name = name.trim();
            name.len() > 1 && name.starts_with('x') && name[1..].chars().all(|c| c.is_ascii_digit())
        })
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::Parse(format!("{}: no x<j> columns in header", path.display())));
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (ln, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        for &c in &cols {
            let cell = cells
                .get(c)
                .ok_or_else(|| Error::Parse(format!("{} line {}: missing column", path.display(), ln + 2)))?;
            data.push(
                cell.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), ln + 2)))?,
            );
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Empty(format!("{} has no rows", path.display())));
    }
    Array2::from_shape_vec((rows, cols.len()), data).map_err(|e| Error::Parse(e.to_string()))
}
