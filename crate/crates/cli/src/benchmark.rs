//! The four benchmark suites. Cells (system x seed x setting) run on a
//! worker pool of `jobs` threads; reports are assembled in cell order, so
//! their contents do not depend on completion order.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use mode_dyn::datagen::{GeneratorConfig, System};
use mode_dyn::eval::{partition_score, PartitionScore, RecoveryReport};
use mode_dyn::mode_global::GlobalConfig;
use mode_dyn::model_io::AnyModel;
use mode_dyn::numfmt::sig12;
use mode_dyn::rng::derive_seed;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::tasks::{
    assignments, build_forecast_task, fit_global_model, fit_local_model, forecast_scores, mean_var, median,
    positive_expert, pretty, recovery, regime_auc, zone_calibration, DataDir, ForecastScores, Precision, EXIT_LABEL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Clustering,
    Forecasting,
    Recovery,
    Robustness,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Clustering => "clustering",
            Suite::Forecasting => "forecasting",
            Suite::Recovery => "recovery",
            Suite::Robustness => "robustness",
        }
    }

    pub fn default_seeds(self) -> usize {
        match self {
            Suite::Clustering => 5,
            Suite::Forecasting => 3,
            Suite::Recovery => 10,
            Suite::Robustness => 1,
        }
    }
}

pub const CLUSTERING_SYSTEMS: [System; 3] = [System::Bistable, System::LotkaVolterra, System::Lorenz];

/// The forecasting systems and the hyperparameter preset each one uses.
pub const FORECAST_SYSTEMS: [(System, &str); 2] = [(System::Branching, "lineage"), (System::GoldbeterExit, "goldbeter")];

#[derive(Debug, Clone, Serialize)]
pub struct Failure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellTime {
    pub cell: String,
    pub seconds: f64,
}

/// Runs `f` over `cells` on `jobs` threads, keeping cell order.
fn run_cells<C: Sync, T: Send>(
    jobs: usize,
    cells: &[C],
    label: impl Fn(&C) -> String + Sync,
    f: impl Fn(&C) -> CliResult<T> + Sync,
) -> CliResult<(Vec<T>, Vec<Failure>, Vec<CellTime>)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(format!("cannot start {jobs} workers: {e}")))?;
    let outcomes: Vec<(CliResult<T>, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                let t = Instant::now();
                let r = f(c);
                log::info!("cell {} done in {:.1}s", label(c), t.elapsed().as_secs_f64());
                (r, t.elapsed().as_secs_f64())
            })
            .collect()
    });
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    let mut times = Vec::new();
    for (c, (r, secs)) in cells.iter().zip(outcomes) {
        times.push(CellTime {
            cell: label(c),
            seconds: secs,
        });
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(Failure {
                cell: label(c),
                error: e.to_string(),
            }),
        }
    }
    Ok((ok, failures, times))
}

fn seeds(cfg: &RunConfig, suite: Suite) -> Vec<u64> {
    let n = cfg.eval.seeds.unwrap_or(suite.default_seeds());
    (0..n as u64).map(|s| cfg.eval.seed + s).collect()
}

/// Settings of one MODE-Local clustering fit.
#[derive(Debug, Clone, Copy)]
pub struct LocalCellSpec {
    pub system: System,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl LocalCellSpec {
    fn label(&self) -> String {
        format!("{}/n={}/sigma={}/seed={}", self.system, self.n, sig12(self.sigma), self.seed)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusteringCell {
    pub system: System,
    pub n: usize,
    pub sigma: f64,
    pub dataset_seed: u64,
    pub model_seed: u64,
    pub test: PartitionScore,
    pub train: PartitionScore,
    pub converged: bool,
    #[serde(skip)]
    pub model: AnyModel,
}

fn local_cell(spec: &LocalCellSpec, cfg: &RunConfig) -> CliResult<ClusteringCell> {
    let gen = GeneratorConfig {
        n_samples: spec.n,
        noise_sigma: spec.sigma,
        seed: spec.seed,
        ..GeneratorConfig::defaults(spec.system)
    };
    let data = DataDir::generate(&gen)?;
    let mut em = cfg.local.clone();
    em.n_clusters = spec.system.n_regimes();
    em.seed = spec.seed;
    let model = fit_local_model(&data.train, &data.val, &em, Precision::F64)?;
    let score = |ds: &mode_dyn::Dataset64| -> CliResult<PartitionScore> {
        let truth = crate::tasks::labels(ds, "clustering")?;
        Ok(partition_score(&assignments(&model, ds)?, &truth)?)
    };
    let converged = matches!(&model, AnyModel::Local(m) if m.converged);
    Ok(ClusteringCell {
        system: spec.system,
        n: spec.n,
        sigma: spec.sigma,
        dataset_seed: spec.seed,
        model_seed: spec.seed,
        test: score(&data.val)?,
        train: score(&data.train)?,
        converged,
        model,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusteringRow {
    pub system: System,
    pub n_seeds: usize,
    pub ari_mean: f64,
    pub ari_std: f64,
    pub ari_median: f64,
    pub nmi_mean: f64,
    pub nmi_std: f64,
    pub nmi_median: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusteringReport {
    pub suite: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n: usize,
    pub sigma: f64,
    pub table: Vec<ClusteringRow>,
    pub cells: Vec<ClusteringCell>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub timing: Vec<CellTime>,
}

pub fn run_clustering(cfg: &RunConfig, jobs: usize) -> CliResult<ClusteringReport> {
    let seeds = seeds(cfg, Suite::Clustering);
    let (n, sigma) = (10_000, 0.1);
    let specs: Vec<LocalCellSpec> = CLUSTERING_SYSTEMS
        .iter()
        .flat_map(|&system| seeds.iter().map(move |&seed| LocalCellSpec { system, n, sigma, seed }))
        .collect();
    let (cells, failures, timing) = run_cells(jobs, &specs, LocalCellSpec::label, |s| local_cell(s, cfg))?;
    let table = CLUSTERING_SYSTEMS
        .iter()
        .filter_map(|&system| {
            let rows: Vec<&ClusteringCell> = cells.iter().filter(|c| c.system == system).collect();
            if rows.is_empty() {
                return None;
            }
            let ari: Vec<f64> = rows.iter().map(|c| c.test.ari).collect();
            let nmi: Vec<f64> = rows.iter().map(|c| c.test.nmi).collect();
            let (am, av) = mean_var(&ari);
            let (nm, nv) = mean_var(&nmi);
            Some(ClusteringRow {
                system,
                n_seeds: rows.len(),
                ari_mean: am,
                ari_std: av.sqrt(),
                ari_median: median(&ari),
                nmi_mean: nm,
                nmi_std: nv.sqrt(),
                nmi_median: median(&nmi),
            })
        })
        .collect();
    Ok(ClusteringReport {
        suite: "clustering",
        config_hash: cfg.hash(),
        seeds,
        n,
        sigma,
        table,
        cells,
        failures,
        timing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ExitScores {
    pub expert: usize,
    /// Mean exit-expert gate probability over exit-zone training rows.
    pub calibration: f64,
    pub auc_train: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastCell {
    pub system: System,
    pub preset: String,
    pub dataset_seed: u64,
    pub model_seed: u64,
    pub mode: ForecastScores,
    /// The same preset with a single expert.
    pub baseline: ForecastScores,
    pub mode_epochs: usize,
    pub baseline_epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exit: Option<ExitScores>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegimeCell {
    pub system: System,
    pub dataset_seed: u64,
    pub member_seeds: Vec<u64>,
    pub expert: usize,
    pub auc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastRow {
    pub system: System,
    pub model: &'static str,
    pub metric: String,
    /// Median over seeds; `null` when every seed diverged.
    pub median: Option<f64>,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastReport {
    pub suite: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub n_particles: usize,
    pub w_cap: usize,
    pub table: Vec<ForecastRow>,
    pub cells: Vec<ForecastCell>,
    pub regime: Vec<RegimeCell>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub timing: Vec<CellTime>,
}

fn benchmark_global(cfg: &RunConfig, preset: &str, seed: u64) -> CliResult<GlobalConfig> {
    let mut g = GlobalConfig::preset(preset)?;
    g.seed = seed;
    if let Some(cap) = cfg.eval.max_epochs {
        g.epochs = g.epochs.min(cap);
    }
    Ok(g)
}

fn epochs_run(model: &AnyModel) -> usize {
    match model {
        AnyModel::Global(m) => m.train_log.len().saturating_sub(1),
        _ => 0,
    }
}

fn forecast_cell(system: System, preset: &str, seed: u64, cfg: &RunConfig) -> CliResult<ForecastCell> {
    let gen = GeneratorConfig {
        seed,
        ..GeneratorConfig::defaults(system)
    };
    let data = DataDir::generate(&gen)?;
    let gcfg = benchmark_global(cfg, preset, seed)?;
    let mode = fit_global_model(&data.train, &data.val, &gcfg, 1, Precision::F64)?;
    let baseline = fit_global_model(
        &data.train,
        &data.val,
        &GlobalConfig { k: 1, ..gcfg.clone() },
        1,
        Precision::F64,
    )?;
    let rollout = mode_dyn::rollout::RolloutConfig {
        seed,
        ..cfg.rollout.clone()
    };
    let task = build_forecast_task(&gen, &data.meta.normalization, &cfg.eval, &rollout)?;
    let names = system.coordinate_names();
    let exit = if system == System::GoldbeterExit {
        let expert = positive_expert(&mode, &data.train, EXIT_LABEL)?;
        Some(ExitScores {
            expert,
            calibration: zone_calibration(&mode, &data.train, expert)?,
            auc_train: regime_auc(&mode, &data.train, expert, EXIT_LABEL)?,
        })
    } else {
        None
    };
    Ok(ForecastCell {
        system,
        preset: preset.to_string(),
        dataset_seed: seed,
        model_seed: seed,
        mode: forecast_scores(mode.dynamics(), &task, &rollout, &cfg.eval, names)?,
        baseline: forecast_scores(baseline.dynamics(), &task, &rollout, &cfg.eval, names)?,
        mode_epochs: epochs_run(&mode),
        baseline_epochs: epochs_run(&baseline),
        exit,
    })
}

/// Gate ensemble of `eval.ensemble` seeds on oscillator data, scored by
/// the ROC-AUC of its exit-expert probability on all labeled rows.
pub fn regime_cell(seed: u64, cfg: &RunConfig) -> CliResult<RegimeCell> {
    let gen = GeneratorConfig {
        seed,
        ..GeneratorConfig::defaults(System::GoldbeterExit)
    };
    let data = DataDir::generate(&gen)?;
    let gcfg = benchmark_global(cfg, "goldbeter", seed)?;
    let model = fit_global_model(&data.train, &data.val, &gcfg, cfg.eval.ensemble, Precision::F64)?;
    let member_seeds = match &model {
        AnyModel::Ensemble(e) => e.members.iter().map(|m| m.seed).collect(),
        _ => vec![seed],
    };
    let expert = positive_expert(&model, &data.train, EXIT_LABEL)?;
    Ok(RegimeCell {
        system: System::GoldbeterExit,
        dataset_seed: seed,
        member_seeds,
        expert,
        auc: regime_auc(&model, &data.all()?, expert, EXIT_LABEL)?,
    })
}

fn forecast_table(cells: &[ForecastCell]) -> Vec<ForecastRow> {
    let mut rows = Vec::new();
    for (system, _) in FORECAST_SYSTEMS {
        let mine: Vec<&ForecastCell> = cells.iter().filter(|c| c.system == system).collect();
        if mine.is_empty() {
            continue;
        }
        let names = system.coordinate_names();
        for (model, pick) in [
            ("MODE", (|c: &ForecastCell| c.mode.clone()) as fn(&ForecastCell) -> ForecastScores),
            ("K=1", |c: &ForecastCell| c.baseline.clone()),
        ] {
            let scores: Vec<ForecastScores> = mine.iter().map(|c| pick(c)).collect();
            let mut push = |metric: String, vals: Vec<Option<f64>>| {
                let v: Vec<f64> = vals.iter().map(|x| x.unwrap_or(f64::INFINITY)).collect();
                let m = median(&v);
                rows.push(ForecastRow {
                    system,
                    model,
                    metric,
                    median: m.is_finite().then_some(m),
                    n_seeds: v.len(),
                });
            };
            push("W1".into(), scores.iter().map(|s| s.w1).collect());
            push("W2".into(), scores.iter().map(|s| s.w2).collect());
            for (j, name) in names.iter().enumerate() {
                push(format!("W1_{name}"), scores.iter().map(|s| s.w1_marginal[j]).collect());
            }
            for (j, name) in names.iter().enumerate() {
                push(format!("W2_{name}"), scores.iter().map(|s| s.w2_marginal[j]).collect());
            }
        }
    }
    rows
}

enum ForecastJob {
    Cell(System, &'static str, u64),
    Regime(u64),
}

pub fn run_forecasting(cfg: &RunConfig, jobs: usize) -> CliResult<ForecastReport> {
    let seeds = seeds(cfg, Suite::Forecasting);
    let mut jobs_list: Vec<ForecastJob> = FORECAST_SYSTEMS
        .iter()
        .flat_map(|&(sys, preset)| seeds.iter().map(move |&s| ForecastJob::Cell(sys, preset, s)))
        .collect();
    jobs_list.push(ForecastJob::Regime(seeds[0]));
    enum Out {
        Cell(Box<ForecastCell>),
        Regime(RegimeCell),
    }
    let label = |j: &ForecastJob| match j {
        ForecastJob::Cell(sys, preset, s) => format!("{sys}/{preset}/seed={s}"),
        ForecastJob::Regime(s) => format!("goldbeter_exit/ensemble/seed={s}"),
    };
    let (outs, failures, timing) = run_cells(jobs, &jobs_list, label, |j| match j {
        ForecastJob::Cell(sys, preset, s) => forecast_cell(*sys, preset, *s, cfg).map(|c| Out::Cell(Box::new(c))),
        ForecastJob::Regime(s) => regime_cell(*s, cfg).map(Out::Regime),
    })?;
    let mut cells = Vec::new();
    let mut regime = Vec::new();
    for o in outs {
        match o {
            Out::Cell(c) => cells.push(*c),
            Out::Regime(r) => regime.push(r),
        }
    }
    Ok(ForecastReport {
        suite: "forecasting",
        config_hash: cfg.hash(),
        seeds,
        n_particles: cfg.eval.n_particles,
        w_cap: cfg.eval.w_cap,
        table: forecast_table(&cells),
        cells,
        regime,
        failures,
        timing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryCell {
    pub system: System,
    pub dataset_seed: u64,
    pub model_seed: u64,
    pub report: RecoveryReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryRow {
    pub system: System,
    pub expert: usize,
    pub output: usize,
    pub term: String,
    pub exponents: Vec<u32>,
    pub truth: f64,
    pub estimate_mean: f64,
    pub estimate_variance: f64,
    pub error_mean: f64,
    pub error_variance: f64,
    pub n_seeds: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoverySuiteReport {
    pub suite: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub table: Vec<RecoveryRow>,
    pub cells: Vec<RecoveryCell>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub timing: Vec<CellTime>,
}

impl RecoverySuiteReport {
    pub fn row(&self, system: System, expert: usize, output: usize, exponents: &[u32]) -> Option<&RecoveryRow> {
        self.table
            .iter()
            .find(|r| r.system == system && r.expert == expert && r.output == output && r.exponents == exponents)
    }
}

pub fn run_recovery(cfg: &RunConfig, jobs: usize) -> CliResult<RecoverySuiteReport> {
    let seeds = seeds(cfg, Suite::Recovery);
    let specs: Vec<LocalCellSpec> = CLUSTERING_SYSTEMS
        .iter()
        .flat_map(|&system| {
            seeds.iter().map(move |&seed| LocalCellSpec {
                system,
                n: 10_000,
                sigma: 0.1,
                seed,
            })
        })
        .collect();
    let (cells, failures, timing) = run_cells(jobs, &specs, LocalCellSpec::label, |s| {
        let c = local_cell(s, cfg)?;
        Ok(RecoveryCell {
            system: s.system,
            dataset_seed: s.seed,
            model_seed: s.seed,
            report: recovery(&c.model, s.system)?,
        })
    })?;
    let mut table = Vec::new();
    for system in CLUSTERING_SYSTEMS {
        let mine: Vec<&RecoveryCell> = cells.iter().filter(|c| c.system == system).collect();
        let Some(first) = mine.first() else { continue };
        for (i, t) in first.report.terms.iter().enumerate() {
            let est: Vec<f64> = mine.iter().map(|c| c.report.terms[i].estimate).collect();
            let err: Vec<f64> = mine.iter().map(|c| c.report.terms[i].abs_error).collect();
            let (em, ev) = mean_var(&est);
            let (rm, rv) = mean_var(&err);
            table.push(RecoveryRow {
                system,
                expert: t.expert,
                output: t.output,
                term: t.term.clone(),
                exponents: t.exponents.clone(),
                truth: t.truth,
                estimate_mean: em,
                estimate_variance: ev,
                error_mean: rm,
                error_variance: rv,
                n_seeds: mine.len(),
            });
        }
    }
    Ok(RecoverySuiteReport {
        suite: "recovery",
        config_hash: cfg.hash(),
        seeds,
        table,
        cells,
        failures,
        timing,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessRow {
    pub system: System,
    pub sigma: f64,
    pub n: usize,
    pub dataset_seed: u64,
    pub model_seed: u64,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RobustnessReport {
    pub suite: &'static str,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub sigmas: Vec<f64>,
    pub sizes: Vec<usize>,
    pub grid: Vec<RobustnessRow>,
    pub failures: Vec<Failure>,
    #[serde(skip)]
    pub timing: Vec<CellTime>,
}

impl RobustnessReport {
    pub fn value(&self, system: System, sigma: f64, n: usize, metric: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .grid
            .iter()
            .filter(|r| r.system == system && r.sigma == sigma && r.n == n && r.metric == metric)
            .map(|r| r.value)
            .collect();
        (!v.is_empty()).then(|| median(&v))
    }
}

pub fn run_robustness(cfg: &RunConfig, jobs: usize) -> CliResult<RobustnessReport> {
    let seeds = seeds(cfg, Suite::Robustness);
    let mut specs = Vec::new();
    for system in CLUSTERING_SYSTEMS {
        for &sigma in &cfg.eval.robustness_sigmas {
            for &n in &cfg.eval.robustness_sizes {
                for &seed in &seeds {
                    // every grid cell gets its own data draw
                    let cell_seed = derive_seed(seed, (n as u64) << 8 ^ (sigma.to_bits() >> 32));
                    specs.push(LocalCellSpec {
                        system,
                        n,
                        sigma,
                        seed: cell_seed,
                    });
                }
            }
        }
    }
    let (cells, failures, timing) = run_cells(jobs, &specs, LocalCellSpec::label, |s| local_cell(s, cfg))?;
    let mut grid = Vec::new();
    for c in cells {
        for (metric, value) in [("ARI", c.test.ari), ("NMI", c.test.nmi)] {
            grid.push(RobustnessRow {
                system: c.system,
                sigma: c.sigma,
                n: c.n,
                dataset_seed: c.dataset_seed,
                model_seed: c.model_seed,
                metric,
                value,
            });
        }
    }
    Ok(RobustnessReport {
        suite: "robustness",
        config_hash: cfg.hash(),
        seeds,
        sigmas: cfg.eval.robustness_sigmas.clone(),
        sizes: cfg.eval.robustness_sizes.clone(),
        grid,
        failures,
        timing,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(sig12).unwrap_or_else(|| "inf".into())
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for r in rows {
        writeln!(w, "{r}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_timing(dir: &Path, suite: Suite, timing: &[CellTime]) -> CliResult<()> {
    #[derive(Serialize)]
    struct Timing<'a> {
        suite: &'static str,
        total_cell_seconds: f64,
        cells: &'a [CellTime],
    }
    let t = Timing {
        suite: suite.name(),
        total_cell_seconds: timing.iter().map(|c| c.seconds).sum(),
        cells: timing,
    };
    std::fs::write(dir.join("timing.json"), pretty(&t)?)?;
    Ok(())
}

/// Runs `suite`, writes `report.json`, its CSV tables and `timing.json`
/// into `dir`, and returns the number of failed cells.
pub fn run_suite(suite: Suite, cfg: &RunConfig, jobs: usize, dir: &Path) -> CliResult<usize> {
    std::fs::create_dir_all(dir)?;
    let report_path = dir.join("report.json");
    let failures = match suite {
        Suite::Clustering => {
            let r = run_clustering(cfg, jobs)?;
            std::fs::write(&report_path, pretty(&r)?)?;
            write_csv(
                &dir.join("clustering.csv"),
                "system,dataset_seed,model_seed,split,ari,nmi",
                r.cells.iter().flat_map(|c| {
                    [("test", c.test), ("train", c.train)].map(|(split, s)| {
                        format!(
                            "{},{},{},{split},{},{}",
                            c.system,
                            c.dataset_seed,
                            c.model_seed,
                            sig12(s.ari),
                            sig12(s.nmi)
                        )
                    })
                }),
            )?;
            write_csv(
                &dir.join("clustering_table.csv"),
                "system,n_seeds,ari_mean,ari_std,ari_median,nmi_mean,nmi_std,nmi_median",
                r.table.iter().map(|t| {
                    format!(
                        "{},{},{},{},{},{},{},{}",
                        t.system,
                        t.n_seeds,
                        sig12(t.ari_mean),
                        sig12(t.ari_std),
                        sig12(t.ari_median),
                        sig12(t.nmi_mean),
                        sig12(t.nmi_std),
                        sig12(t.nmi_median)
                    )
                }),
            )?;
            write_timing(dir, suite, &r.timing)?;
            r.failures.len()
        }
        Suite::Forecasting => {
            let r = run_forecasting(cfg, jobs)?;
            std::fs::write(&report_path, pretty(&r)?)?;
            let mut rows = Vec::new();
            for c in &r.cells {
                let names = c.system.coordinate_names();
                for (model, s) in [("MODE", &c.mode), ("K=1", &c.baseline)] {
                    let prefix = format!("{},{},{},{model}", c.system, c.dataset_seed, c.model_seed);
                    rows.push(format!("{prefix},W1,{},{}", opt(s.w1), s.n_diverged));
                    rows.push(format!("{prefix},W2,{},{}", opt(s.w2), s.n_diverged));
                    for (j, name) in names.iter().enumerate() {
                        rows.push(format!("{prefix},W1_{name},{},{}", opt(s.w1_marginal[j]), s.n_diverged));
                    }
                    for (j, name) in names.iter().enumerate() {
                        rows.push(format!("{prefix},W2_{name},{},{}", opt(s.w2_marginal[j]), s.n_diverged));
                    }
                }
            }
            write_csv(
                &dir.join("forecasting.csv"),
                "system,dataset_seed,model_seed,model,metric,value,n_diverged",
                rows,
            )?;
            write_csv(
                &dir.join("forecasting_table.csv"),
                "system,model,metric,median,n_seeds",
                r.table
                    .iter()
                    .map(|t| format!("{},{},{},{},{}", t.system, t.model, t.metric, opt(t.median), t.n_seeds)),
            )?;
            write_csv(
                &dir.join("exit_calibration.csv"),
                "system,dataset_seed,model_seed,expert,calibration,auc_train",
                r.cells.iter().filter_map(|c| {
                    c.exit.as_ref().map(|e| {
                        format!(
                            "{},{},{},{},{},{}",
                            c.system,
                            c.dataset_seed,
                            c.model_seed,
                            e.expert,
                            sig12(e.calibration),
                            sig12(e.auc_train)
                        )
                    })
                }),
            )?;
            write_timing(dir, suite, &r.timing)?;
            r.failures.len()
        }
        Suite::Recovery => {
            let r = run_recovery(cfg, jobs)?;
            std::fs::write(&report_path, pretty(&r)?)?;
            write_csv(
                &dir.join("recovery.csv"),
                "system,expert,output,term,truth,estimate_mean,estimate_variance,error_mean,error_variance,n_seeds",
                r.table.iter().map(|t| {
                    format!(
                        "{},{},{},{},{},{},{},{},{},{}",
                        t.system,
                        t.expert,
                        t.output,
                        t.term,
                        sig12(t.truth),
                        sig12(t.estimate_mean),
                        sig12(t.estimate_variance),
                        sig12(t.error_mean),
                        sig12(t.error_variance),
                        t.n_seeds
                    )
                }),
            )?;
            write_timing(dir, suite, &r.timing)?;
            r.failures.len()
        }
        Suite::Robustness => {
            let r = run_robustness(cfg, jobs)?;
            std::fs::write(&report_path, pretty(&r)?)?;
            write_csv(
                &dir.join("robustness.csv"),
                "system,sigma,n,dataset_seed,model_seed,metric,value",
                r.grid.iter().map(|g| {
                    format!(
                        "{},{},{},{},{},{},{}",
                        g.system,
                        sig12(g.sigma),
                        g.n,
                        g.dataset_seed,
                        g.model_seed,
                        g.metric,
                        sig12(g.value)
                    )
                }),
            )?;
            write_timing(dir, suite, &r.timing)?;
            r.failures.len()
        }
    };
    Ok(failures)
}
