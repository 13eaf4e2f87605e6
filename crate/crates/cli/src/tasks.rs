//! Pipelines shared by the subcommands, the benchmark suites and the
//! acceptance harness.

use std::path::Path;

use mode_dyn::datagen::{
    forecast_task, generate_split, read_csv, true_thetas, write_csv, ForecastTask, GeneratorConfig, MetaSidecar,
    System,
};
use mode_dyn::dynlib::expert_velocity;
use mode_dyn::eval::{recovery_report, roc_auc, wasserstein_1d, wasserstein_joint, MetricReport, RecoveryReport};
use mode_dyn::mode_global::{batch_loss, ensemble_fit, fit_global, GlobalConfig};
use mode_dyn::mode_local::{fit_local, penalized_loglik, predict_assignments, EmConfig};
use mode_dyn::model_io::AnyModel;
use mode_dyn::rollout::{pushforward, MixtureDynamics, RolloutConfig};
use mode_dyn::{Dataset64, Error, Normalization};
use serde::Serialize;

use crate::config::EvalConfig;
use crate::error::{input, CliError, CliResult};

pub const TRAIN_FILE: &str = "train.csv";
pub const VAL_FILE: &str = "val.csv";
pub const META_FILE: &str = "meta.json";
pub const GENERATOR_FILE: &str = "generator.json";

/// Label of the exit branch in oscillator data.
pub const EXIT_LABEL: usize = 1;

/// A generated dataset directory: both splits, the sidecar and the
/// generator settings that produced it.
#[derive(Debug, Clone)]
pub struct DataDir {
    pub train: Dataset64,
    pub val: Dataset64,
    pub meta: MetaSidecar,
    pub generator: Option<GeneratorConfig>,
}

impl DataDir {
    pub fn generate(cfg: &GeneratorConfig) -> CliResult<Self> {
        let (train, val) = generate_split(cfg)?;
        let mut meta = MetaSidecar::from_dataset(&train, cfg.split_fraction);
        meta.n = train.len() + val.len();
        Ok(Self {
            train,
            val,
            meta,
            generator: Some(cfg.clone()),
        })
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        std::fs::create_dir_all(dir)?;
        write_csv(&self.train, &dir.join(TRAIN_FILE))?;
        write_csv(&self.val, &dir.join(VAL_FILE))?;
        std::fs::write(dir.join(META_FILE), pretty(&self.meta)?)?;
        if let Some(g) = &self.generator {
            std::fs::write(dir.join(GENERATOR_FILE), pretty(g)?)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("dataset directory {} does not exist", dir.display())));
        }
        let meta_path = dir.join(META_FILE);
        let meta: MetaSidecar = serde_json::from_str(
            &std::fs::read_to_string(&meta_path)
                .map_err(|e| CliError::usage(format!("cannot read {}: {e}", meta_path.display())))?,
        )
        .map_err(|e| CliError::usage(format!("malformed {}: {e}", meta_path.display())))?;
        let train_path = dir.join(TRAIN_FILE);
        let val_path = dir.join(VAL_FILE);
        let train = input("training data", &train_path, read_csv(&train_path, meta.to_meta("train")))?;
        let val = input("validation data", &val_path, read_csv(&val_path, meta.to_meta("validation")))?;
        let gen_path = dir.join(GENERATOR_FILE);
        let generator = if gen_path.exists() {
            let text = std::fs::read_to_string(&gen_path)?;
            Some(
                serde_json::from_str(&text)
                    .map_err(|e| CliError::usage(format!("malformed {}: {e}", gen_path.display())))?,
            )
        } else {
            None
        };
        Ok(Self {
            train,
            val,
            meta,
            generator,
        })
    }

    pub fn system(&self) -> CliResult<System> {
        self.meta
            .generator
            .parse()
            .map_err(|_| CliError::usage(format!("dataset was not made by a known generator ('{}')", self.meta.generator)))
    }

    /// Generator settings, needed to rebuild ground truth for forecasting.
    pub fn generator(&self) -> CliResult<&GeneratorConfig> {
        self.generator
            .as_ref()
            .ok_or_else(|| CliError::usage(format!("dataset directory lacks {GENERATOR_FILE}")))
    }

    pub fn all(&self) -> CliResult<Dataset64> {
        Ok(self.train.concat(&self.val)?)
    }
}

pub fn pretty<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

pub fn fit_local_model(train: &Dataset64, val: &Dataset64, cfg: &EmConfig, precision: Precision) -> CliResult<AnyModel> {
    Ok(match precision {
        Precision::F64 => AnyModel::from(&fit_local(train, Some(val), cfg)?),
        Precision::F32 => AnyModel::from(&fit_local(&train.cast::<f32>(), Some(&val.cast::<f32>()), cfg)?),
    })
}

/// MODE-Global fit, or a seed ensemble when `ensemble > 1`.
pub fn fit_global_model(
    train: &Dataset64,
    val: &Dataset64,
    cfg: &GlobalConfig,
    ensemble: usize,
    precision: Precision,
) -> CliResult<AnyModel> {
    Ok(match (precision, ensemble > 1) {
        (Precision::F64, false) => AnyModel::from(&fit_global(train, Some(val), cfg)?),
        (Precision::F64, true) => AnyModel::from(&ensemble_fit(train, Some(val), cfg, ensemble)?),
        (Precision::F32, false) => AnyModel::from(&fit_global(&train.cast::<f32>(), Some(&val.cast::<f32>()), cfg)?),
        (Precision::F32, true) => {
            AnyModel::from(&ensemble_fit(&train.cast::<f32>(), Some(&val.cast::<f32>()), cfg, ensemble)?)
        }
    })
}

/// Final objective on a split: the penalized log-likelihood for local
/// models, the regularized loss for gated ones (member mean for ensembles).
pub fn objective(model: &AnyModel, ds: &Dataset64) -> CliResult<f64> {
    Ok(match model {
        AnyModel::Local(m) => penalized_loglik(m, ds)?,
        AnyModel::Global(m) => batch_loss(m, ds)?.total,
        AnyModel::Ensemble(e) => {
            let mut total = 0.0;
            for mem in &e.members {
                total += batch_loss(&mem.model, ds)?.total;
            }
            total / e.members.len() as f64
        }
    })
}

fn check_model_dim(model: &AnyModel, ds: &Dataset64) -> CliResult<()> {
    let d = model.dynamics().dim();
    if d != ds.dim() {
        return Err(CliError::usage(format!("model is {d}-dimensional but the data is {}-dimensional", ds.dim())));
    }
    Ok(())
}

/// Most probable expert of each row under the posterior `π_k(x) N(v; f_k(x), σ_k²)`.
pub fn assignments(model: &AnyModel, ds: &Dataset64) -> CliResult<Vec<usize>> {
    check_model_dim(model, ds)?;
    if let AnyModel::Local(m) = model {
        return Ok(predict_assignments(m, ds)?);
    }
    let dynamics = model.dynamics();
    let sigmas = model.sigmas();
    let d = ds.dim() as f64;
    let mut out = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        let x = ds.states.row(i).to_vec();
        let probs = dynamics.mixing_probs(&x);
        let mut best = (f64::NEG_INFINITY, 0);
        for (k, (&p, &s)) in probs.iter().zip(&sigmas).enumerate() {
            let f = expert_velocity(dynamics.library(), dynamics.theta(k), &x)?;
            let r2: f64 = f.iter().zip(ds.velocities.row(i)).map(|(a, b)| (a - b) * (a - b)).sum();
            let lp = p.ln() - d * s.ln() - r2 / (2.0 * s * s);
            if lp > best.0 {
                best = (lp, k);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

pub fn labels(ds: &Dataset64, what: &str) -> CliResult<Vec<usize>> {
    ds.labels
        .clone()
        .ok_or_else(|| CliError::usage(format!("{what} needs labeled data")))
}

/// Expert with the largest mean gate probability over rows labeled
/// `positive`.
pub fn positive_expert(model: &AnyModel, ds: &Dataset64, positive: usize) -> CliResult<usize> {
    let lab = labels(ds, "choosing the exit expert")?;
    let dynamics = model.dynamics();
    let mut sums = vec![0.0; dynamics.n_experts()];
    let mut n = 0usize;
    for (i, &l) in lab.iter().enumerate() {
        if l == positive {
            n += 1;
            for (s, p) in sums.iter_mut().zip(dynamics.mixing_probs(&ds.states.row(i).to_vec())) {
                *s += p;
            }
        }
    }
    if n == 0 {
        return Err(CliError::usage(format!("no rows carry label {positive}")));
    }
    Ok(sums
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (k, &s)| if s > best.1 { (k, s) } else { best })
        .0)
}

fn check_expert(model: &AnyModel, expert: usize) -> CliResult<()> {
    let k = model.dynamics().n_experts();
    if expert >= k {
        return Err(CliError::usage(format!("expert {expert} out of range for a K={k} model")));
    }
    Ok(())
}

/// Mean gate probability of `expert` over the exit-zone rows.
pub fn zone_calibration(model: &AnyModel, ds: &Dataset64, expert: usize) -> CliResult<f64> {
    check_model_dim(model, ds)?;
    check_expert(model, expert)?;
    let zone = ds
        .zone
        .as_ref()
        .ok_or_else(|| CliError::usage("calibration needs exit-zone flags (oscillator data)"))?;
    let dynamics = model.dynamics();
    let probs: Vec<f64> = zone
        .iter()
        .enumerate()
        .filter(|(_, &z)| z)
        .map(|(i, _)| dynamics.mixing_probs(&ds.states.row(i).to_vec())[expert])
        .collect();
    if probs.is_empty() {
        return Err(CliError::usage("no rows lie in the exit zone"));
    }
    Ok(probs.iter().sum::<f64>() / probs.len() as f64)
}

/// ROC-AUC of the gate probability of `expert` for rows labeled `positive`.
pub fn regime_auc(model: &AnyModel, ds: &Dataset64, expert: usize, positive: usize) -> CliResult<f64> {
    check_model_dim(model, ds)?;
    check_expert(model, expert)?;
    let lab = labels(ds, "auc")?;
    let dynamics = model.dynamics();
    let scores: Vec<f64> = (0..ds.len())
        .map(|i| dynamics.mixing_probs(&ds.states.row(i).to_vec())[expert])
        .collect();
    let truth: Vec<bool> = lab.iter().map(|&l| l == positive).collect();
    roc_auc(&scores, &truth).map_err(|e| CliError::usage(format!("auc: {e}")))
}

/// Distances between a model pushforward and the reference finals. `None`
/// values mean every particle diverged (an infinite distance).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ForecastScores {
    pub n_particles: usize,
    pub n_diverged: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub sigma_b: f64,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub w1_marginal: Vec<Option<f64>>,
    pub w2_marginal: Vec<Option<f64>>,
    pub reports: Vec<MetricReport>,
}

impl ForecastScores {
    /// `W1` with divergence counted as infinitely far.
    pub fn w1_or_inf(&self) -> f64 {
        self.w1.unwrap_or(f64::INFINITY)
    }

    pub fn marginal_or_inf(&self, j: usize) -> f64 {
        self.w1_marginal[j].unwrap_or(f64::INFINITY)
    }
}

pub fn build_forecast_task(
    gen: &GeneratorConfig,
    norm: &Normalization,
    eval: &EvalConfig,
    rollout: &RolloutConfig,
) -> CliResult<ForecastTask> {
    if !matches!(gen.system, System::Branching | System::GoldbeterExit) {
        return Err(CliError::usage(format!(
            "forecasting needs a switching system (branching or goldbeter_exit), not {}",
            gen.system
        )));
    }
    Ok(forecast_task(gen, norm, eval.n_particles, rollout.sigma_b, rollout.seed)?)
}

pub fn forecast_scores(
    model: &dyn MixtureDynamics<f64>,
    task: &ForecastTask,
    rollout: &RolloutConfig,
    eval: &EvalConfig,
    coordinate_names: &[&str],
) -> CliResult<ForecastScores> {
    let cfg = RolloutConfig {
        dt: task.dt,
        n_steps: task.n_steps,
        sigma_b: task.sigma_b,
        record_gates: false,
        ..rollout.clone()
    };
    let d = task.starts.ncols();
    let mut scores = ForecastScores {
        n_particles: task.starts.nrows(),
        n_diverged: task.starts.nrows(),
        n_steps: task.n_steps,
        dt: task.dt,
        sigma_b: task.sigma_b,
        w1: None,
        w2: None,
        w1_marginal: vec![None; d],
        w2_marginal: vec![None; d],
        reports: Vec::new(),
    };
    let push = match pushforward(model, task.starts.view(), &cfg) {
        Ok(p) => p,
        Err(Error::Divergence { .. }) => return Ok(scores),
        Err(e) => return Err(e.into()),
    };
    scores.n_diverged = push.n_diverged;
    for p in [1, 2] {
        let joint = wasserstein_joint(push.finals.view(), task.truth_finals.view(), p, eval.w_cap, rollout.seed)?;
        if p == 1 {
            scores.w1 = Some(joint.value);
        } else {
            scores.w2 = Some(joint.value);
        }
        scores.reports.push(joint);
        for j in 0..d {
            let a = push.finals.column(j).to_vec();
            let b = task.truth_finals.column(j).to_vec();
            let v = wasserstein_1d(&a, &b, p)?;
            if p == 1 {
                scores.w1_marginal[j] = Some(v);
            } else {
                scores.w2_marginal[j] = Some(v);
            }
            scores.reports.push(MetricReport {
                metric: format!("W{p}_{}", coordinate_names.get(j).copied().unwrap_or("?")),
                value: v,
                p: Some(p),
                n_a: a.len(),
                n_b: b.len(),
                cap: None,
                seed: None,
            });
        }
    }
    Ok(scores)
}

/// Raw-unit coefficient recovery against the generator's own equations.
pub fn recovery(model: &AnyModel, system: System) -> CliResult<RecoveryReport> {
    let dynamics = model.dynamics();
    let lib = dynamics.library();
    let truth = true_thetas(system, lib)
        .map_err(|e| CliError::usage(format!("recovery: {e}")))?
        .ok_or_else(|| CliError::usage(format!("{system} has no polynomial ground truth")))?;
    if truth.len() != dynamics.n_experts() {
        return Err(CliError::usage(format!(
            "recovery: model has K={} but {system} has {} regimes",
            dynamics.n_experts(),
            truth.len()
        )));
    }
    let identity = Normalization::identity(lib.dim());
    let norm = model.normalization().unwrap_or(&identity);
    let raw: Vec<_> = model.thetas().iter().map(|th| norm.theta_to_raw(lib, th)).collect();
    Ok(recovery_report(lib, system.coordinate_names(), &raw, &truth)?)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mean and (population) variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}
