//! Subcommand bodies.

use std::io::Write;
use std::path::{Path, PathBuf};

use mode_dyn::datagen::System;
use mode_dyn::eval::{partition_score, MetricReport, RecoveryReport};
use mode_dyn::model_io::AnyModel;
use mode_dyn::numfmt::sig12;
use mode_dyn::rng::stream_rng;
use mode_dyn::rollout::{rollout, write_finals, write_trajectories, ExpertPolicy, Pushforward, read_states};
use ndarray::Array2;
use rand::seq::index::sample;
use serde::Serialize;

use crate::benchmark::run_suite;
use crate::config::{RunConfig, Sources, SEED_ENV};
use crate::error::{input, CliError, CliResult};
use crate::tasks::{
    assignments, build_forecast_task, fit_global_model, fit_local_model, forecast_scores, labels, objective,
    positive_expert, pretty, recovery, regime_auc, zone_calibration, DataDir, ForecastScores, Variant, EXIT_LABEL,
};
use crate::{BenchmarkArgs, Cli, Command, EvaluateArgs, FitArgs, GenerateArgs, RolloutArgs, Task};

pub const ECHO_FILE: &str = "resolved_config.json";

fn sources(cli: &Cli) -> Sources {
    Sources {
        file: cli.config.clone(),
        seed: cli.seed,
        env_seed: std::env::var(SEED_ENV).ok(),
        ..Sources::default()
    }
}

fn out_dir(cli: &Cli) -> CliResult<PathBuf> {
    cli.out
        .clone()
        .ok_or_else(|| CliError::usage("--out DIR is required for this command"))
}

/// `--out` naming a `.json` file, or a directory that receives `default`.
fn out_file(cli: &Cli, default: &str) -> CliResult<(PathBuf, PathBuf)> {
    let out = out_dir(cli)?;
    let file = if out.extension().is_some_and(|e| e == "json") {
        out
    } else {
        out.join(default)
    };
    let dir = file.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })?;
    Ok((file, dir))
}

pub fn dispatch(cli: Cli) -> CliResult<()> {
    let jobs = match cli.jobs {
        Some(0) => return Err(CliError::usage("--jobs must be >= 1")),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::runtime(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::Generate(a) => generate(&cli, a),
        Command::Fit(a) => fit(&cli, a),
        Command::Rollout(a) => rollout_cmd(&cli, a),
        Command::Evaluate(a) => evaluate(&cli, a),
        Command::Benchmark(a) => benchmark(&cli, a, jobs),
    })
}

fn generate(cli: &Cli, a: &GenerateArgs) -> CliResult<()> {
    let mut src = sources(cli);
    src.system = a.system.as_deref().map(str::parse::<System>).transpose()?;
    src.set("generator", "n_samples", a.n);
    src.set("generator", "noise_sigma", a.sigma);
    src.set("generator", "split_fraction", a.split);
    let cfg = RunConfig::resolve(&src)?;
    let gen = cfg.generator()?;
    let dir = out_dir(cli)?;
    let data = DataDir::generate(gen)?;
    data.write(&dir)?;
    cfg.write_echo(&dir.join(ECHO_FILE), "generate")?;
    println!(
        "{}: {} train + {} validation rows (d = {}) -> {}",
        gen.system,
        data.train.len(),
        data.val.len(),
        data.train.dim(),
        dir.display()
    );
    Ok(())
}

fn write_train_log(model: &AnyModel, path: &Path) -> CliResult<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    match model {
        AnyModel::Local(m) => {
            writeln!(w, "iteration,penalized_loglik")?;
            for (i, v) in m.train_log.iter().enumerate() {
                writeln!(w, "{},{}", i + 1, sig12(*v))?;
            }
        }
        AnyModel::Global(m) => {
            writeln!(w, "epoch,train_loss,val_loss")?;
            for e in &m.train_log {
                writeln!(w, "{},{},{}", e.epoch, sig12(e.train_loss), sig12(e.val_loss))?;
            }
        }
        AnyModel::Ensemble(m) => {
            writeln!(w, "member,seed,epoch,train_loss,val_loss")?;
            for (i, mem) in m.members.iter().enumerate() {
                for e in &mem.model.train_log {
                    writeln!(w, "{i},{},{},{},{}", mem.seed, e.epoch, sig12(e.train_loss), sig12(e.val_loss))?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn fit(cli: &Cli, a: &FitArgs) -> CliResult<()> {
    let mut src = sources(cli);
    src.preset = a.preset.clone();
    if a.preset.is_some() && a.variant == Variant::Local {
        return Err(CliError::usage("presets apply to --variant global"));
    }
    src.set("local", "n_clusters", a.k);
    src.set("local", "degree", a.degree);
    src.set("local", "alpha", a.alpha);
    src.set("local", "n_restarts", a.restarts);
    src.set("local", "max_iter", a.max_iter);
    src.set("global", "k", a.k);
    src.set("global", "lib_order", a.degree);
    src.set("global", "epochs", a.epochs);
    src.set("global", "lr", a.lr);
    let cfg = RunConfig::resolve(&src)?;
    if a.ensemble == 0 {
        return Err(CliError::usage("--ensemble must be >= 1"));
    }
    if a.ensemble > 1 && a.variant == Variant::Local {
        return Err(CliError::usage("--ensemble applies to --variant global"));
    }
    let data = DataDir::read(&a.data)?;
    let (file, dir) = out_file(cli, "model.json")?;
    let model = match a.variant {
        Variant::Local => fit_local_model(&data.train, &data.val, &cfg.local, a.precision)?,
        Variant::Global => fit_global_model(&data.train, &data.val, &cfg.global, a.ensemble, a.precision)?,
    };
    model.save(&file)?;
    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    write_train_log(&model, &dir.join(format!("{stem}_train_log.csv")))?;
    cfg.write_echo(&dir.join(format!("{stem}.config.json")), "fit")?;
    let (tr, va) = (objective(&model, &data.train)?, objective(&model, &data.val)?);
    let what = match a.variant {
        Variant::Local => "penalized log-likelihood",
        Variant::Global => "regularized loss",
    };
    println!(
        "{} model, K = {}: train {what} {}, validation {what} {} -> {}",
        model.variant(),
        model.dynamics().n_experts(),
        sig12(tr),
        sig12(va),
        file.display()
    );
    if let AnyModel::Local(m) = &model {
        if !m.converged {
            if a.strict {
                return Err(CliError::runtime(format!(
                    "EM did not converge within {} iterations",
                    cfg.local.max_iter
                )));
            }
            log::warn!("EM did not converge within {} iterations", cfg.local.max_iter);
        }
    }
    Ok(())
}

fn load_model(path: &Path) -> CliResult<AnyModel> {
    input("model", path, AnyModel::load(path))
}

fn rollout_cmd(cli: &Cli, a: &RolloutArgs) -> CliResult<()> {
    let mut src = sources(cli);
    src.set("rollout", "n_steps", a.steps);
    src.set("rollout", "dt", a.dt);
    src.set("rollout", "sigma_b", a.sigma_b);
    src.set("rollout", "expert_policy", a.policy.as_deref().map(str::parse::<ExpertPolicy>).transpose()?);
    if a.record_gates {
        src.set("rollout", "record_gates", Some(true));
    }
    src.set("eval", "n_particles", a.n_particles);
    let cfg = RunConfig::resolve(&src)?;
    let model = load_model(&a.model)?;
    let x0s: Array2<f64> = match (&a.init, &a.from_data) {
        (Some(p), None) => input("initial states", p, read_states(p))?,
        (None, Some(dir)) => {
            let data = DataDir::read(dir)?;
            let n = data.train.len();
            let m = cfg.eval.n_particles.min(n);
            let mut idx = sample(&mut stream_rng(cfg.rollout.seed, 0x5747), n, m).into_vec();
            idx.sort_unstable();
            data.train.states.select(ndarray::Axis(0), &idx)
        }
        _ => return Err(CliError::usage("give exactly one of --init CSV or --from-data DIR")),
    };
    let d = model.dynamics().dim();
    if x0s.ncols() != d {
        return Err(CliError::usage(format!(
            "initial states have {} columns but the model is {d}-dimensional",
            x0s.ncols()
        )));
    }
    let dir = out_dir(cli)?;
    std::fs::create_dir_all(&dir)?;
    let result = rollout(model.dynamics(), x0s.view(), &cfg.rollout)?;
    write_trajectories(&result, &dir.join("trajectories.csv"))?;
    let survivors: Vec<usize> = (0..x0s.nrows()).filter(|&p| result.diverged[p].is_none()).collect();
    let n = cfg.rollout.n_steps;
    let mut finals = Array2::zeros((survivors.len(), d));
    for (row, &p) in survivors.iter().enumerate() {
        finals.row_mut(row).assign(&result.trajectories.slice(ndarray::s![p, n, ..]));
    }
    let push = Pushforward {
        n_diverged: x0s.nrows() - survivors.len(),
        finals,
        survivors,
    };
    write_finals(&push, &dir.join("finals.csv"))?;
    cfg.write_echo(&dir.join(ECHO_FILE), "rollout")?;
    println!(
        "{} particles x {} steps, {} diverged -> {}",
        x0s.nrows(),
        n,
        push.n_diverged,
        dir.display()
    );
    if push.survivors.is_empty() {
        return Err(CliError::runtime(format!("all {} particles diverged", x0s.nrows())));
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ModelEvaluation {
    model: String,
    variant: &'static str,
    metrics: Vec<MetricReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    expert: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    forecast: Option<ForecastScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recovery: Option<RecoveryReport>,
}

#[derive(Debug, Serialize)]
struct Evaluation {
    task: &'static str,
    data: String,
    system: String,
    config_hash: String,
    results: Vec<ModelEvaluation>,
}

fn scalar_metric(metric: &str, value: f64, n: usize) -> MetricReport {
    MetricReport {
        metric: metric.to_string(),
        value,
        p: None,
        n_a: n,
        n_b: n,
        cap: None,
        seed: None,
    }
}

fn evaluate(cli: &Cli, a: &EvaluateArgs) -> CliResult<()> {
    let mut src = sources(cli);
    src.set("eval", "expert", a.expert);
    src.set("eval", "n_particles", a.n_particles);
    src.set("rollout", "sigma_b", a.sigma_b);
    let cfg = RunConfig::resolve(&src)?;
    let data = DataDir::read(&a.data)?;
    let models: Vec<(String, AnyModel)> = a
        .model
        .iter()
        .map(|p| Ok((p.display().to_string(), load_model(p)?)))
        .collect::<CliResult<_>>()?;
    let system_name = data.meta.generator.clone();
    let task_name = match a.task {
        Task::Clustering => "clustering",
        Task::Forecast => "forecast",
        Task::Recovery => "recovery",
        Task::Auc => "auc",
        Task::Calibration => "calibration",
    };
    let task = match a.task {
        Task::Forecast => {
            let gen = data.generator()?;
            Some(build_forecast_task(gen, &data.meta.normalization, &cfg.eval, &cfg.rollout)?)
        }
        _ => None,
    };
    let mut results = Vec::new();
    for (path, model) in &models {
        let mut r = ModelEvaluation {
            model: path.clone(),
            variant: model.variant(),
            metrics: Vec::new(),
            expert: None,
            forecast: None,
            recovery: None,
        };
        match a.task {
            Task::Clustering => {
                for (split, ds) in [("test", &data.val), ("train", &data.train)] {
                    let truth = labels(ds, "clustering")?;
                    let s = partition_score(&assignments(model, ds)?, &truth)?;
                    r.metrics.push(scalar_metric(&format!("ari_{split}"), s.ari, ds.len()));
                    r.metrics.push(scalar_metric(&format!("nmi_{split}"), s.nmi, ds.len()));
                }
            }
            Task::Forecast => {
                let task = task.as_ref().expect("built above");
                let system = data.system()?;
                let s = forecast_scores(model.dynamics(), task, &cfg.rollout, &cfg.eval, system.coordinate_names())?;
                r.metrics = s.reports.clone();
                if s.w1.is_none() {
                    log::warn!("{path}: every particle diverged");
                }
                r.forecast = Some(s);
            }
            Task::Recovery => {
                let rep = recovery(model, data.system()?)?;
                r.metrics.push(scalar_metric("max_true_term_error", rep.max_true_term_error, rep.terms.len()));
                r.metrics.push(scalar_metric("max_spurious_magnitude", rep.max_spurious_magnitude, rep.terms.len()));
                r.recovery = Some(rep);
            }
            Task::Auc | Task::Calibration => {
                let expert = match cfg.eval.expert {
                    Some(e) => e,
                    None => positive_expert(model, &data.train, EXIT_LABEL)?,
                };
                r.expert = Some(expert);
                if a.task == Task::Auc {
                    let all = data.all()?;
                    r.metrics.push(scalar_metric("auc", regime_auc(model, &all, expert, EXIT_LABEL)?, all.len()));
                } else {
                    let v = zone_calibration(model, &data.train, expert)?;
                    r.metrics.push(scalar_metric("zone_mean_gate", v, data.train.len()));
                }
            }
        }
        for m in &r.metrics {
            println!("{path}: {} = {}", m.metric, sig12(m.value));
        }
        results.push(r);
    }
    let (file, dir) = out_file(cli, "evaluation.json")?;
    let report = Evaluation {
        task: task_name,
        data: a.data.display().to_string(),
        system: system_name,
        config_hash: cfg.hash(),
        results,
    };
    std::fs::write(&file, pretty(&report)?)?;
    cfg.write_echo(&dir.join(ECHO_FILE), "evaluate")?;
    Ok(())
}

fn benchmark(cli: &Cli, a: &BenchmarkArgs, jobs: usize) -> CliResult<()> {
    let mut src = sources(cli);
    src.set("eval", "seeds", a.seeds);
    src.set("eval", "n_particles", a.n_particles);
    src.set("eval", "max_epochs", a.max_epochs);
    let cfg = RunConfig::resolve(&src)?;
    let dir = out_dir(cli)?;
    let failures = run_suite(a.suite, &cfg, jobs, &dir)?;
    cfg.write_echo(&dir.join(ECHO_FILE), "benchmark")?;
    if failures > 0 {
        log::warn!("{failures} benchmark cells failed; see report.json");
        eprintln!("{failures} cells failed (listed in report.json)");
    }
    println!("{} suite -> {}", a.suite.name(), dir.display());
    Ok(())
}
