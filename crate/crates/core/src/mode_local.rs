//! Constant-mixing experts fitted by expectation–maximization.
//!
//! Each iteration computes responsibilities in log space, refits every
//! expert by weighted Lasso on the shared design matrix, and updates mixing
//! weights and noise scales in closed form. The Lasso penalty handed to
//! expert `k` is `2 σ_k² α` so that the M-step maximizes the same MAP
//! objective that [`penalized_loglik`] reports.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::SnapshotDataset;
use crate::dynlib::{ExpertParams, Normalization, PolyLibrary};
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::stream_rng;
use crate::scalar::{log_sum_exp, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub n_clusters: usize,
    pub degree: usize,
    pub alpha: f64,
    pub max_iter: usize,
    /// Convergence threshold on the per-sample change of the objective.
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    pub sigma_floor: f64,
    pub responsibility_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            n_clusters: 3,
            degree: 2,
            alpha: 1e-4,
            max_iter: 150,
            tol: 1e-5,
            n_restarts: 10,
            seed: 0,
            sigma_floor: 1e-6,
            responsibility_floor: 1e-12,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::InvalidConfig("n_clusters must be >= 1".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("tol must be > 0".into()));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig("alpha must be >= 0".into()));
        }
        if self.n_restarts == 0 {
            return Err(Error::InvalidConfig("n_restarts must be >= 1".into()));
        }
        if !(self.sigma_floor > 0.0) || !(self.responsibility_floor >= 0.0) {
            return Err(Error::InvalidConfig("floors must be positive".into()));
        }
        Ok(())
    }
}

/// Row-stochastic `N x K` posterior over experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities<F> {
    pub matrix: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalModel<F> {
    pub library: PolyLibrary,
    pub experts: Vec<ExpertParams<F>>,
    pub mixing: Vec<F>,
    pub config: EmConfig,
    /// Penalized log-likelihood after every iteration of the selected run.
    pub train_log: Vec<f64>,
    /// Re-seeding and other notable events of the selected run.
    pub events: Vec<String>,
    pub converged: bool,
    /// Score used to pick the restart (validation objective when given).
    pub selection_score: f64,
    /// Scales of the data the model was fitted on, if it was normalized.
    pub normalization: Option<Normalization>,
}

impl<F: Scalar> LocalModel<F> {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.library.dim()
    }

    /// Assembles a model from parts, checking shapes and the simplex.
    pub fn from_parts(
        library: PolyLibrary,
        experts: Vec<ExpertParams<F>>,
        mixing: Vec<F>,
        config: EmConfig,
    ) -> Result<Self> {
        check_dim("mixing length", experts.len(), mixing.len())?;
        if experts.is_empty() {
            return Err(Error::Empty("model needs at least one expert".into()));
        }
        for e in &experts {
            check_dim("theta rows", library.n_features(), e.theta.nrows())?;
            check_dim("theta columns", library.dim(), e.theta.ncols())?;
        }
        let total: f64 = mixing.iter().map(|p| p.f64()).sum();
        if mixing.iter().any(|p| !(p.f64() >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("mixing weights must form a simplex".into()));
        }
        Ok(Self {
            library,
            experts,
            mixing,
            config,
            train_log: Vec::new(),
            events: Vec::new(),
            converged: false,
            selection_score: f64::NAN,
            normalization: None,
        })
    }

    /// Sum of absolute coefficients over all experts.
    pub fn l1_norm(&self) -> f64 {
        self.experts
            .iter()
            .map(|e| e.theta.iter().map(|v| v.f64().abs()).sum::<f64>())
            .sum()
    }
}

const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 10_000;
const EMPTY_MASS: f64 = 1e-8;

/// Minimizes `Σ_i w_i ‖y_i − z_i Θ‖² + λ ‖Θ‖₁` column by column.
///
/// Rows are weighted by `√w` and columns standardized by their weighted
/// RMS (no centering) before cyclic coordinate descent; the penalty is
/// carried through the standardization so the returned coefficients solve
/// the unscaled problem. Zero columns get coefficient 0.
pub fn weighted_lasso<F: Scalar>(
    features: ArrayView2<F>,
    targets: ArrayView2<F>,
    weights: ArrayView1<F>,
    lambda: F,
) -> Result<Array2<F>> {
    weighted_lasso_warm(features, targets, weights, lambda, None)
}

/// [`weighted_lasso`] started from `init` instead of zero.
pub fn weighted_lasso_warm<F: Scalar>(
    features: ArrayView2<F>,
    targets: ArrayView2<F>,
    weights: ArrayView1<F>,
    lambda: F,
    init: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    let n = features.nrows();
    check_dim("target rows", n, targets.nrows())?;
    check_dim("weight length", n, weights.len())?;
    if !(lambda >= F::zero()) {
        return Err(Error::InvalidConfig("lambda must be >= 0".into()));
    }
    if weights.iter().any(|w| !(*w >= F::zero()) || !w.is_finite()) {
        return Err(Error::InvalidConfig("weights must be finite and non-negative".into()));
    }
    let sw: F = weights.sum();
    if !(sw > F::zero()) {
        return Err(Error::Degenerate("all weights are zero".into()));
    }
    let zw = &features * &weights.insert_axis(Axis(1));
    let gram = zw.t().dot(&features);
    let rhs = zw.t().dot(&targets);
    let theta = lasso_gram(&gram, &rhs, sw, lambda, init)?;
    let fit = features.dot(&theta);
    if fit.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weighted Lasso residuals".into()));
    }
    Ok(theta)
}

/// Lasso on precomputed `G = Zᵀ W Z`, `B = Zᵀ W Y` with total weight `sw`.
fn lasso_gram<F: Scalar>(
    gram: &Array2<F>,
    rhs: &Array2<F>,
    sw: F,
    lambda: F,
    init: Option<&Array2<F>>,
) -> Result<Array2<F>> {
    let p = gram.nrows();
    let d = rhs.ncols();
    // Everything below is per unit weight, in the standardized basis where
    // every non-zero column has unit weighted RMS.
    let diag: Vec<f64> = (0..p).map(|t| gram[[t, t]].f64() / sw.f64()).collect();
    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    let scale: Vec<f64> = diag
        .iter()
        .map(|&g| if g > max_diag * 1e-28 && g > 0.0 { g.sqrt() } else { 0.0 })
        .collect();
    let gs = Array2::from_shape_fn((p, p), |(a, b)| {
        if scale[a] == 0.0 || scale[b] == 0.0 {
            0.0
        } else {
            gram[[a, b]].f64() / sw.f64() / (scale[a] * scale[b])
        }
    });
    let half_lambda = lambda.f64() / (2.0 * sw.f64());
    let tol = LASSO_TOL.max(F::epsilon().f64() * 10.0);
    let mut out = Array2::zeros((p, d));
    for j in 0..d {
        let bs: Vec<f64> = (0..p)
            .map(|t| if scale[t] == 0.0 { 0.0 } else { rhs[[t, j]].f64() / sw.f64() / scale[t] })
            .collect();
        // penalty on scaled coefficient u_t = s_t θ_t is (λ / s_t) |u_t|
        let pen: Vec<f64> = scale
            .iter()
            .map(|&s| if s == 0.0 { 0.0 } else { half_lambda / s })
            .collect();
        let mut u: Vec<f64> = (0..p)
            .map(|t| init.map_or(0.0, |th| th[[t, j]].f64() * scale[t]))
            .collect();
        cd_column(&gs, &bs, &pen, &scale, &mut u, tol);
        polish(&gs, &bs, &pen, &scale, &mut u);
        for t in 0..p {
            let th = if scale[t] == 0.0 { 0.0 } else { u[t] / scale[t] };
            if !th.is_finite() {
                return Err(Error::NonFinite("Lasso coefficient".into()));
            }
            out[[t, j]] = F::of(th);
        }
    }
    Ok(out)
}

#[inline]
fn soft(v: f64, h: f64) -> f64 {
    if v > h {
        v - h
    } else if v < -h {
        v + h
    } else {
        0.0
    }
}

fn cd_column(gs: &Array2<f64>, bs: &[f64], pen: &[f64], scale: &[f64], u: &mut [f64], tol: f64) {
    let p = bs.len();
    for t in 0..p {
        if scale[t] == 0.0 {
            u[t] = 0.0;
        }
    }
    // q = G u, maintained incrementally
    let mut q: Vec<f64> = (0..p).map(|a| (0..p).map(|b| gs[[a, b]] * u[b]).sum()).collect();
    for _ in 0..LASSO_MAX_SWEEPS {
        let mut max_delta = 0.0f64;
        for t in 0..p {
            if scale[t] == 0.0 {
                continue;
            }
            let g = gs[[t, t]];
            let rho = bs[t] - q[t] + g * u[t];
            let new = soft(rho, pen[t]) / g;
            let delta = new - u[t];
            if delta != 0.0 {
                for a in 0..p {
                    q[a] += gs[[a, t]] * delta;
                }
                u[t] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }
}

/// Solves the optimality conditions exactly on the current support and
/// keeps the result when it satisfies them; this removes the slow tail of
/// coordinate descent on strongly correlated (uncentered) features.
fn polish(gs: &Array2<f64>, bs: &[f64], pen: &[f64], scale: &[f64], u: &mut [f64]) {
    let p = bs.len();
    let support: Vec<usize> = (0..p).filter(|&t| u[t] != 0.0 && scale[t] != 0.0).collect();
    if support.is_empty() {
        return;
    }
    let m = support.len();
    let a: Vec<f64> = support
        .iter()
        .flat_map(|&r| support.iter().map(move |&c| gs[[r, c]]))
        .collect();
    let b: Vec<f64> = support.iter().map(|&t| bs[t] - pen[t] * u[t].signum()).collect();
    let Some(sol) = linalg::solve(a, b, m) else {
        return;
    };
    if support.iter().zip(&sol).any(|(&t, &v)| v.signum() != u[t].signum()) {
        return;
    }
    let mut cand = vec![0.0; p];
    for (&t, &v) in support.iter().zip(&sol) {
        cand[t] = v;
    }
    for t in 0..p {
        if cand[t] != 0.0 || scale[t] == 0.0 {
            continue;
        }
        let grad: f64 = bs[t] - (0..p).map(|b| gs[[t, b]] * cand[b]).sum::<f64>();
        if grad.abs() > pen[t] * (1.0 + 1e-9) + 1e-12 {
            return;
        }
    }
    u.copy_from_slice(&cand);
}

/// Design matrix plus targets, prepared once per fit.
struct Prepared<'a, F> {
    z: Array2<F>,
    v: ArrayView2<'a, F>,
}

impl<'a, F: Scalar> Prepared<'a, F> {
    fn new(lib: &PolyLibrary, data: &'a SnapshotDataset<F>) -> Result<Self> {
        check_dim("data dimension", lib.dim(), data.dim())?;
        Ok(Self {
            z: lib.design_matrix(data.states.view())?,
            v: data.velocities.view(),
        })
    }

    fn len(&self) -> usize {
        self.z.nrows()
    }

    /// Squared residual norms `‖v_i − z_i Θ‖²`.
    fn sq_residuals(&self, theta: &Array2<F>) -> Array1<F> {
        let pred = self.z.dot(theta);
        (&self.v - &pred).mapv(|r| r * r).sum_axis(Axis(1))
    }
}

fn log_gauss<F: Scalar>(sq: F, sigma: F, d: usize) -> F {
    let ln2pi = F::of((2.0 * std::f64::consts::PI).ln());
    let df = F::of(d as f64);
    -(df / F::of(2.0)) * ln2pi - df * sigma.ln() - sq / (F::of(2.0) * sigma * sigma)
}

/// `N x K` matrix of `log π_k + log N(v_i | z_i Θ_k, σ_k² I)`.
fn log_joint<F: Scalar>(model: &LocalModel<F>, prep: &Prepared<F>) -> Result<Array2<F>> {
    let floor = model.config.sigma_floor;
    let n = prep.len();
    let d = model.dim();
    let mut lj = Array2::zeros((n, model.n_experts()));
    for (k, e) in model.experts.iter().enumerate() {
        if !(e.sigma.f64() >= floor * (1.0 - 1e-12)) || !e.sigma.is_finite() {
            return Err(Error::NonFinite(format!(
                "expert {k} sigma {} is below the floor {floor}",
                e.sigma
            )));
        }
        let sq = prep.sq_residuals(&e.theta);
        let lp = model.mixing[k].ln();
        for i in 0..n {
            lj[[i, k]] = lp + log_gauss(sq[i], e.sigma, d);
        }
    }
    Ok(lj)
}

fn normalize_rows<F: Scalar>(lj: &Array2<F>, floor: F) -> Result<Array2<F>> {
    let mut r = lj.clone();
    for mut row in r.rows_mut() {
        let lse = log_sum_exp(row.as_slice().expect("standard layout"));
        if !lse.is_finite() {
            return Err(Error::NonFinite("mixture likelihood of a sample".into()));
        }
        row.mapv_inplace(|v| (v - lse).exp().max(floor));
        let s: F = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    Ok(r)
}

/// Posterior expert probabilities, floored at the responsibility floor.
pub fn e_step<F: Scalar>(model: &LocalModel<F>, data: &SnapshotDataset<F>) -> Result<Responsibilities<F>> {
    let prep = Prepared::new(&model.library, data)?;
    e_step_prepared(model, &prep)
}

fn e_step_prepared<F: Scalar>(model: &LocalModel<F>, prep: &Prepared<F>) -> Result<Responsibilities<F>> {
    let lj = log_joint(model, prep)?;
    Ok(Responsibilities {
        matrix: normalize_rows(&lj, F::of(model.config.responsibility_floor))?,
    })
}

/// `Σ_i log Σ_k π_k N(v_i | z_i Θ_k, σ_k² I) − α Σ_k ‖Θ_k‖₁`.
pub fn penalized_loglik<F: Scalar>(model: &LocalModel<F>, data: &SnapshotDataset<F>) -> Result<f64> {
    let prep = Prepared::new(&model.library, data)?;
    penalized_loglik_prepared(model, &prep)
}

fn penalized_loglik_prepared<F: Scalar>(model: &LocalModel<F>, prep: &Prepared<F>) -> Result<f64> {
    let lj = log_joint(model, prep)?;
    let data_term: f64 = lj
        .rows()
        .into_iter()
        .map(|row| log_sum_exp(&row.to_vec()).f64())
        .sum();
    Ok(data_term - model.config.alpha * model.l1_norm())
}

/// Closed-form and Lasso updates given responsibilities.
///
/// `previous` supplies warm starts and the noise scales that set each
/// expert's Lasso penalty; without it the penalty uses `σ = 1`.
pub fn m_step<F: Scalar>(
    data: &SnapshotDataset<F>,
    resp: &Responsibilities<F>,
    library: &PolyLibrary,
    cfg: &EmConfig,
    previous: Option<&[ExpertParams<F>]>,
) -> Result<(Vec<ExpertParams<F>>, Vec<F>, Vec<String>)> {
    let prep = Prepared::new(library, data)?;
    m_step_prepared(&prep, resp, cfg, previous)
}

fn m_step_prepared<F: Scalar>(
    prep: &Prepared<F>,
    resp: &Responsibilities<F>,
    cfg: &EmConfig,
    previous: Option<&[ExpertParams<F>]>,
) -> Result<(Vec<ExpertParams<F>>, Vec<F>, Vec<String>)> {
    let n = prep.len();
    let k_total = resp.matrix.ncols();
    check_dim("responsibility rows", n, resp.matrix.nrows())?;
    if let Some(prev) = previous {
        check_dim("previous experts", k_total, prev.len())?;
    }
    let d = prep.v.ncols();
    let mut events = Vec::new();
    let mut mass: Vec<f64> = (0..k_total)
        .map(|k| resp.matrix.column(k).iter().map(|v| v.f64()).sum())
        .collect();
    let mut weights: Vec<Array1<F>> = (0..k_total).map(|k| resp.matrix.column(k).to_owned()).collect();

    for k in 0..k_total {
        if mass[k] >= EMPTY_MASS {
            continue;
        }
        // Re-seed from the points the other experts explain worst.
        let worst = worst_fit_points(prep, previous, k, (n / k_total).max(1));
        let mut w = Array1::zeros(n);
        for &i in &worst {
            w[i] = F::one();
        }
        mass[k] = worst.len() as f64;
        weights[k] = w;
        events.push(format!("expert {k} had mass below {EMPTY_MASS:e}; re-seeded from {} worst-fit points", worst.len()));
    }

    let fits: Vec<Result<ExpertParams<F>>> = (0..k_total)
        .into_par_iter()
        .map(|k| {
            let sigma_prev = previous.map_or(1.0, |p| p[k].sigma.f64());
            let lambda = F::of(2.0 * sigma_prev * sigma_prev * cfg.alpha);
            let init = previous.map(|p| &p[k].theta);
            let theta = weighted_lasso_warm(prep.z.view(), prep.v, weights[k].view(), lambda, init)?;
            let sq = prep.sq_residuals(&theta);
            let num: f64 = sq.iter().zip(weights[k].iter()).map(|(s, w)| s.f64() * w.f64()).sum();
            let var = num / (d as f64 * mass[k]);
            let sigma = var.sqrt().max(cfg.sigma_floor);
            ExpertParams::new(theta, F::of(sigma))
        })
        .collect();
    let experts = fits.into_iter().collect::<Result<Vec<_>>>()?;
    let total: f64 = mass.iter().sum();
    let mixing = mass.iter().map(|m| F::of(m / total)).collect();
    Ok((experts, mixing, events))
}

fn worst_fit_points<F: Scalar>(
    prep: &Prepared<F>,
    previous: Option<&[ExpertParams<F>]>,
    skip: usize,
    count: usize,
) -> Vec<usize> {
    let n = prep.len();
    let score: Vec<f64> = match previous {
        Some(prev) => {
            let res: Vec<Array1<F>> = prev
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != skip)
                .map(|(_, e)| prep.sq_residuals(&e.theta))
                .collect();
            (0..n)
                .map(|i| res.iter().map(|r| r[i].f64()).fold(f64::INFINITY, f64::min))
                .collect()
        }
        None => prep.v.rows().into_iter().map(|r| r.iter().map(|v| v.f64() * v.f64()).sum()).collect(),
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// Dirichlet(1, ..., 1) rows.
pub fn random_responsibilities<F: Scalar>(n: usize, k: usize, seed: u64, stream: u64) -> Responsibilities<F> {
    let mut rng = stream_rng(seed, stream);
    let mut m = Array2::zeros((n, k));
    for mut row in m.rows_mut() {
        let draws: Vec<f64> = (0..k).map(|_| Exp1.sample(&mut rng)).collect();
        let s: f64 = draws.iter().sum();
        for (c, v) in row.iter_mut().zip(draws) {
            *c = F::of(v / s);
        }
    }
    Responsibilities { matrix: m }
}

/// One EM run from the given initial responsibilities.
pub fn fit_local_from<F: Scalar>(
    train: &SnapshotDataset<F>,
    cfg: &EmConfig,
    init: Responsibilities<F>,
) -> Result<LocalModel<F>> {
    cfg.validate()?;
    let library = PolyLibrary::new(train.dim(), cfg.degree)?;
    let prep = Prepared::new(&library, train)?;
    check_dim("initial responsibility columns", cfg.n_clusters, init.matrix.ncols())?;
    let n = prep.len() as f64;

    let (experts, mixing, mut events) = m_step_prepared(&prep, &init, cfg, None)?;
    let mut model = LocalModel::from_parts(library, experts, mixing, cfg.clone())?;
    model.normalization = train.meta.normalization.clone();
    let mut prev = penalized_loglik_prepared(&model, &prep)?;
    let mut log = vec![prev];
    let mut converged = false;
    for it in 0..cfg.max_iter {
        let resp = e_step_prepared(&model, &prep)?;
        let (experts, mixing, ev) = m_step_prepared(&prep, &resp, cfg, Some(&model.experts))?;
        events.extend(ev.into_iter().map(|e| format!("iteration {}: {e}", it + 1)));
        model.experts = experts;
        model.mixing = mixing;
        let cur = penalized_loglik_prepared(&model, &prep)?;
        log.push(cur);
        if ((cur - prev) / n).abs() < cfg.tol {
            converged = true;
            break;
        }
        prev = cur;
    }
    if !converged {
        events.push(format!("no convergence within {} iterations", cfg.max_iter));
    }
    model.train_log = log;
    model.events = events;
    model.converged = converged;
    Ok(model)
}

/// EM with `n_restarts` Dirichlet initializations; the restart with the
/// best validation objective (training objective when `val` is `None`)
/// is returned.
pub fn fit_local<F: Scalar>(
    train: &SnapshotDataset<F>,
    val: Option<&SnapshotDataset<F>>,
    cfg: &EmConfig,
) -> Result<LocalModel<F>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training data".into()));
    }
    if cfg.n_clusters > train.len() {
        return Err(Error::InvalidConfig(format!(
            "K = {} exceeds the {} training rows",
            cfg.n_clusters,
            train.len()
        )));
    }
    let runs: Vec<Result<LocalModel<F>>> = (0..cfg.n_restarts)
        .into_par_iter()
        .map(|r| {
            let init = random_responsibilities(train.len(), cfg.n_clusters, cfg.seed, r as u64);
            let mut m = fit_local_from(train, cfg, init)?;
            m.selection_score = match val {
                Some(v) => penalized_loglik(&m, v)?,
                None => *m.train_log.last().expect("non-empty log"),
            };
            Ok(m)
        })
        .collect();
    let mut best: Option<LocalModel<F>> = None;
    let mut first_err = None;
    for run in runs {
        match run {
            Ok(m) => {
                let better = best.as_ref().is_none_or(|b| m.selection_score > b.selection_score);
                if better && m.selection_score.is_finite() {
                    best = Some(m);
                }
            }
            Err(e) => {
                log::warn!("EM restart failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    best.ok_or_else(|| first_err.unwrap_or_else(|| Error::Degenerate("no restart produced a finite objective".into())))
}

/// Index of the most responsible expert per row; ties go to the lower index.
pub fn argmax_rows<F: Scalar>(m: &Array2<F>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict_assignments<F: Scalar>(model: &LocalModel<F>, data: &SnapshotDataset<F>) -> Result<Vec<usize>> {
    // unfloored posteriors so the floor cannot create ties
    let prep = Prepared::new(&model.library, data)?;
    let lj = log_joint(model, &prep)?;
    Ok(argmax_rows(&lj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, generate_raw, generate_split, DatasetMeta, GeneratorConfig, System};
    use proptest::prelude::*;
    use rand::Rng;

    fn dataset(states: Array2<f64>, velocities: Array2<f64>) -> SnapshotDataset<f64> {
        SnapshotDataset::new(states, velocities, None, DatasetMeta::named("test", 0)).unwrap()
    }

    fn local(lib: PolyLibrary, thetas: Vec<Array2<f64>>, sigmas: &[f64], pi: &[f64]) -> LocalModel<f64> {
        let experts = thetas
            .into_iter()
            .zip(sigmas)
            .map(|(t, &s)| ExpertParams::new(t, s).unwrap())
            .collect();
        let cfg = EmConfig { n_clusters: pi.len(), ..EmConfig::default() };
        LocalModel::from_parts(lib, experts, pi.to_vec(), cfg).unwrap()
    }

    /// Gauss–Jordan elimination with full pivoting on the normal equations.
    fn normal_equations_oracle(z: &Array2<f64>, y: &Array2<f64>, w: &Array1<f64>) -> Array2<f64> {
        let p = z.ncols();
        let d = y.ncols();
        let mut aug = Array2::<f64>::zeros((p, p + d));
        for i in 0..z.nrows() {
            for a in 0..p {
                for b in 0..p {
                    aug[[a, b]] += w[i] * z[[i, a]] * z[[i, b]];
                }
                for j in 0..d {
                    aug[[a, p + j]] += w[i] * z[[i, a]] * y[[i, j]];
                }
            }
        }
        let mut perm: Vec<usize> = (0..p).collect();
        for c in 0..p {
            let (mut br, mut bc) = (c, c);
            for r in c..p {
                for cc in c..p {
                    if aug[[r, cc]].abs() > aug[[br, bc]].abs() {
                        br = r;
                        bc = cc;
                    }
                }
            }
            for k in 0..p + d {
                aug.swap([c, k], [br, k]);
            }
            for r in 0..p {
                aug.swap([r, c], [r, bc]);
            }
            perm.swap(c, bc);
            let piv = aug[[c, c]];
            for k in 0..p + d {
                aug[[c, k]] /= piv;
            }
            for r in 0..p {
                if r != c {
                    let f = aug[[r, c]];
                    for k in 0..p + d {
                        aug[[r, k]] -= f * aug[[c, k]];
                    }
                }
            }
        }
        let mut out = Array2::zeros((p, d));
        for (row, &var) in perm.iter().enumerate() {
            for j in 0..d {
                out[[var, j]] = aug[[row, p + j]];
            }
        }
        out
    }

    #[test]
    fn identical_experts_give_uniform_responsibilities() {
        let lib = PolyLibrary::new(2, 1).unwrap();
        let th = Array2::from_elem((3, 2), 0.3);
        let m = local(lib, vec![th.clone(), th], &[0.5, 0.5], &[0.5, 0.5]);
        let ds = dataset(Array2::from_elem((4, 2), 1.0), Array2::from_elem((4, 2), 0.2));
        let r = e_step(&m, &ds).unwrap();
        for v in r.matrix.iter() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        assert_eq!(predict_assignments(&m, &ds).unwrap(), vec![0; 4]);
    }

    #[test]
    fn exact_fit_dominates_ten_sigma_residual() {
        // d = 1: expert 0 predicts v exactly, expert 1 is off by 10 σ
        let lib = PolyLibrary::new(1, 0).unwrap();
        let m = local(
            lib,
            vec![Array2::from_elem((1, 1), 1.0), Array2::from_elem((1, 1), 11.0)],
            &[1.0, 1.0],
            &[0.5, 0.5],
        );
        let ds = dataset(Array2::zeros((1, 1)), Array2::from_elem((1, 1), 1.0));
        let cfg_floor0 = LocalModel { config: EmConfig { responsibility_floor: 0.0, ..m.config.clone() }, ..m.clone() };
        let r = e_step(&cfg_floor0, &ds).unwrap();
        assert!((r.matrix[[0, 0]] - 1.0).abs() < 1e-20);
        assert!((r.matrix[[0, 1]] - (-50.0f64).exp()).abs() < 1e-30);
    }

    #[test]
    fn responsibility_floor_keeps_zero_prior_column_alive() {
        let lib = PolyLibrary::new(1, 0).unwrap();
        let m = local(
            lib,
            vec![Array2::zeros((1, 1)), Array2::zeros((1, 1))],
            &[1.0, 1.0],
            &[1.0, 0.0],
        );
        let ds = dataset(Array2::zeros((3, 1)), Array2::zeros((3, 1)));
        let r = e_step(&m, &ds).unwrap();
        for i in 0..3 {
            assert!(r.matrix[[i, 1]] > 0.0 && r.matrix[[i, 1]] < 1e-11);
            assert!((r.matrix.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_below_floor_is_an_error() {
        let lib = PolyLibrary::new(1, 0).unwrap();
        let mut m = local(lib, vec![Array2::zeros((1, 1))], &[1.0], &[1.0]);
        m.experts[0].sigma = 1e-9;
        let ds = dataset(Array2::zeros((2, 1)), Array2::zeros((2, 1)));
        assert!(matches!(e_step(&m, &ds), Err(Error::NonFinite(_))));
    }

    #[test]
    fn lasso_without_penalty_is_least_squares() {
        let z = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 + if j == 0 { 1.0 } else { 0.0 });
        let truth = ndarray::array![[0.5, -1.0], [2.0, 0.25], [-0.75, 1.5]];
        let y = z.dot(&truth) + Array2::from_shape_fn((50, 2), |(i, j)| ((i + j) % 3) as f64 * 0.01);
        let w = Array1::from_shape_fn(50, |i| 0.5 + (i % 4) as f64);
        let got = weighted_lasso(z.view(), y.view(), w.view(), 0.0).unwrap();
        let want = normal_equations_oracle(&z, &y, &w);
        for (g, o) in got.iter().zip(want.iter()) {
            assert!((g - o).abs() <= 1e-8 * o.abs().max(1.0), "{g} vs {o}");
        }
    }

    #[test]
    fn single_feature_soft_threshold_closed_form() {
        let z = ndarray::array![[1.0], [2.0], [-1.0]];
        let y = ndarray::array![[1.0], [3.0], [0.5]];
        let w = Array1::ones(3);
        let zty = 1.0 + 6.0 - 0.5;
        let zz = 6.0;
        for lambda in [0.0, 1.0, 5.0, 13.0, 20.0] {
            let got = weighted_lasso(z.view(), y.view(), w.view(), lambda).unwrap()[[0, 0]];
            let want = (zty - lambda / 2.0f64).max(0.0) / zz;
            assert!((got - want).abs() < 1e-12, "lambda {lambda}: {got} vs {want}");
        }
    }

    #[test]
    fn zero_feature_column_fixed_at_zero() {
        let z: Array2<f64> = ndarray::array![[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]];
        let y: Array2<f64> = ndarray::array![[2.0], [4.0], [6.0]];
        let th = weighted_lasso(z.view(), y.view(), Array1::ones(3).view(), 0.0).unwrap();
        assert!((th[[0, 0]] - 2.0).abs() < 1e-12);
        assert_eq!(th[[1, 0]], 0.0);
    }

    #[test]
    fn all_zero_weights_rejected() {
        let z = Array2::<f64>::ones((3, 1));
        let y = Array2::<f64>::ones((3, 1));
        assert!(weighted_lasso(z.view(), y.view(), Array1::zeros(3).view(), 0.0).is_err());
    }

    fn noiseless_bistable(n: usize) -> SnapshotDataset<f64> {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.n_samples = n;
        cfg.noise_sigma = 0.0;
        cfg.seed = 3;
        generate_raw(&cfg).unwrap()
    }

    #[test]
    fn mode0_rows_recover_bistable_coefficients() {
        let ds = noiseless_bistable(2000);
        let lib = PolyLibrary::new(2, 2).unwrap();
        let z = lib.design_matrix(ds.states.view()).unwrap();
        let w = Array1::from_iter(ds.labels.as_ref().unwrap().iter().map(|&l| if l == 0 { 1.0 } else { 0.0 }));
        let th = weighted_lasso(z.view(), ds.velocities.view(), w.view(), 1e-4).unwrap();
        let want = [-0.5, -1.0, 2.0];
        for (t, &v) in want.iter().enumerate() {
            assert!((th[[t, 0]] - v).abs() < 0.05);
        }
    }

    #[test]
    fn hard_labels_recover_truth_to_1e6() {
        let ds = noiseless_bistable(2000);
        let lib = PolyLibrary::new(2, 2).unwrap();
        let labels = ds.labels.clone().unwrap();
        let resp = Responsibilities {
            matrix: Array2::from_shape_fn((ds.len(), 2), |(i, k)| if labels[i] == k { 1.0 } else { 0.0 }),
        };
        let cfg = EmConfig { n_clusters: 2, alpha: 1e-8, ..EmConfig::default() };
        let (experts, pi, _) = m_step(&ds, &resp, &lib, &cfg, None).unwrap();
        assert_eq!(pi, vec![0.5, 0.5]);
        let truth = crate::datagen::true_thetas(System::Bistable, &lib).unwrap().unwrap();
        for k in 0..2 {
            for (a, b) in experts[k].theta.iter().zip(truth[k].iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
            assert_eq!(experts[k].sigma, cfg.sigma_floor);
        }
    }

    #[test]
    fn uniform_responsibilities_give_identical_experts() {
        let ds = noiseless_bistable(200);
        let lib = PolyLibrary::new(2, 2).unwrap();
        let resp = Responsibilities { matrix: Array2::from_elem((ds.len(), 3), 1.0 / 3.0) };
        let cfg = EmConfig { n_clusters: 3, ..EmConfig::default() };
        let (experts, pi, _) = m_step(&ds, &resp, &lib, &cfg, None).unwrap();
        for k in 1..3 {
            assert_eq!(experts[k].theta, experts[0].theta);
            assert!((pi[k] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_expert_is_reseeded() {
        let ds = noiseless_bistable(200);
        let lib = PolyLibrary::new(2, 2).unwrap();
        let resp = Responsibilities {
            matrix: Array2::from_shape_fn((ds.len(), 2), |(_, k)| if k == 0 { 1.0 } else { 0.0 }),
        };
        let cfg = EmConfig { n_clusters: 2, ..EmConfig::default() };
        let (experts, pi, events) = m_step(&ds, &resp, &lib, &cfg, None).unwrap();
        assert_eq!(experts.len(), 2);
        assert!(pi[1] > 0.0);
        assert_eq!(events.len(), 1);
    }

    #[test]
    fn loglik_of_exact_single_expert() {
        let lib = PolyLibrary::new(2, 1).unwrap();
        let th = ndarray::array![[0.1, 0.2], [1.0, 0.0], [0.0, -1.0]];
        let states = Array2::from_shape_fn((10, 2), |(i, j)| (i as f64) * 0.3 - j as f64);
        let vel = lib.design_matrix(states.view()).unwrap().dot(&th);
        let ds = dataset(states, vel);
        let s = 0.7;
        let mut m = local(lib, vec![th.clone()], &[s], &[1.0]);
        m.config.alpha = 0.0;
        let want = 10.0 * (-(2.0 / 2.0) * (2.0 * std::f64::consts::PI * s * s).ln());
        assert!((penalized_loglik(&m, &ds).unwrap() - want).abs() < 1e-10);
        // duplicating the data doubles the data term
        let doubled = ds.concat(&ds).unwrap();
        assert!((penalized_loglik(&m, &doubled).unwrap() - 2.0 * want).abs() < 1e-9);
    }

    #[test]
    fn loglik_invariant_to_expert_permutation() {
        let ds = noiseless_bistable(100);
        let lib = PolyLibrary::new(2, 2).unwrap();
        let a = Array2::from_shape_fn((6, 2), |(t, j)| (t + j) as f64 * 0.1);
        let b = Array2::from_shape_fn((6, 2), |(t, j)| (t as f64 - j as f64) * 0.2);
        let m1 = local(lib.clone(), vec![a.clone(), b.clone()], &[0.5, 1.5], &[0.3, 0.7]);
        let m2 = local(lib, vec![b, a], &[1.5, 0.5], &[0.7, 0.3]);
        let l1 = penalized_loglik(&m1, &ds).unwrap();
        let l2 = penalized_loglik(&m2, &ds).unwrap();
        assert!((l1 - l2).abs() < 1e-9 * l1.abs());
    }

    #[test]
    fn prior_breaks_residual_tie() {
        let lib = PolyLibrary::new(1, 0).unwrap();
        let m = local(
            lib,
            vec![Array2::zeros((1, 1)), Array2::from_elem((1, 1), 2.0)],
            &[1.0, 1.0],
            &[0.9, 0.1],
        );
        let ds = dataset(Array2::zeros((1, 1)), Array2::from_elem((1, 1), 1.0));
        assert_eq!(predict_assignments(&m, &ds).unwrap(), vec![0]);
    }

    #[test]
    fn single_expert_is_plain_sparse_regression() {
        let ds = noiseless_bistable(400);
        let cfg = EmConfig { n_clusters: 1, n_restarts: 2, ..EmConfig::default() };
        let m = fit_local(&ds, None, &cfg).unwrap();
        let lib = PolyLibrary::new(2, 2).unwrap();
        let z = lib.design_matrix(ds.states.view()).unwrap();
        let sigma = m.experts[0].sigma;
        let direct = weighted_lasso(
            z.view(),
            ds.velocities.view(),
            Array1::ones(ds.len()).view(),
            2.0 * sigma * sigma * cfg.alpha,
        )
        .unwrap();
        for (a, b) in m.experts[0].theta.iter().zip(direct.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(m.mixing, vec![1.0]);
    }

    #[test]
    fn em_is_monotone_and_rows_stay_stochastic() {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.n_samples = 2000;
        cfg.seed = 11;
        let ds = generate(&cfg).unwrap();
        let em = EmConfig { n_clusters: 2, max_iter: 60, tol: 1e-12, ..EmConfig::default() };
        for r in 0..3 {
            let init = random_responsibilities(ds.len(), 2, 5, r);
            let m = fit_local_from(&ds, &em, init).unwrap();
            for w in m.train_log.windows(2) {
                assert!(w[1] >= w[0] - 1e-6, "decrease {} -> {}", w[0], w[1]);
            }
            let resp = e_step(&m, &ds).unwrap();
            for row in resp.matrix.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuted_initialization_permutes_experts() {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.n_samples = 1000;
        let ds = generate(&cfg).unwrap();
        let em = EmConfig { n_clusters: 2, max_iter: 40, ..EmConfig::default() };
        let init = random_responsibilities::<f64>(ds.len(), 2, 9, 0);
        let mut swapped = init.clone();
        for mut row in swapped.matrix.rows_mut() {
            row.swap(0, 1);
        }
        let a = fit_local_from(&ds, &em, init).unwrap();
        let b = fit_local_from(&ds, &em, swapped).unwrap();
        for (x, y) in a.experts[0].theta.iter().zip(b.experts[1].theta.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        let la = predict_assignments(&a, &ds).unwrap();
        let lb = predict_assignments(&b, &ds).unwrap();
        assert!(la.iter().zip(&lb).all(|(x, y)| *x == 1 - *y));
    }

    #[test]
    fn bistable_fit_clusters_and_runs_in_f32() {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.seed = 1;
        let (tr, va) = generate_split(&cfg).unwrap();
        let em = EmConfig { n_clusters: 2, ..EmConfig::default() };
        let m = fit_local(&tr, Some(&va), &em).unwrap();
        let pred = predict_assignments(&m, &va).unwrap();
        let truth = va.labels.as_ref().unwrap();
        let agree = pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        assert!(agree.max(1.0 - agree) > 0.9, "agreement {agree}");
        let m32 = fit_local(&tr.cast::<f32>(), Some(&va.cast::<f32>()), &em).unwrap();
        assert_eq!(m32.n_experts(), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn lasso_lambda0_matches_normal_equations(
            seed in 0u64..10_000,
            n in 20usize..200,
            p in 1usize..10,
            d in 1usize..4,
        ) {
            let mut rng = stream_rng(seed, 0);
            let z = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
            let w = Array1::from_shape_fn(n, |_| rng.random_range(0.1..1.0));
            let got = weighted_lasso(z.view(), y.view(), w.view(), 0.0).unwrap();
            let want = normal_equations_oracle(&z, &y, &w);
            let scale = want.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for (g, o) in got.iter().zip(want.iter()) {
                prop_assert!((g - o).abs() <= 1e-8 * scale, "{} vs {}", g, o);
            }
        }
    }
}
