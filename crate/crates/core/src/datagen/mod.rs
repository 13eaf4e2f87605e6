//! Synthetic benchmark generators, the normalization/noise protocol and
//! train/validation splitting.

mod branching;
mod dataset;
mod goldbeter;
mod integrate;
mod resample;
mod systems;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub use branching::{
    branching_field, branching_raw, sample_trunk_starts, simulate_branching, BRANCH_MINUS,
    BRANCH_PLUS, TRUNK,
};
pub use dataset::{
    normalize_and_noise, read_csv, split, write_csv, DatasetMeta, MetaSidecar, SnapshotDataset,
    ZoneBox,
};
pub use goldbeter::{
    exit_field, goldbeter_field, goldbeter_raw, GoldbeterParams, GoldbeterReference, TruthRun,
    EXIT_RATES, EXIT_TARGET,
};
pub use integrate::{integrate_rk4, rk4_step, Rk4Scratch};
pub use resample::{arc_length, arclength_resample};
pub use systems::{
    bistable_field, bistable_raw, lorenz_field, lorenz_raw, lotka_volterra_field,
    lotka_volterra_raw, BISTABLE_CENTERS, LORENZ_PARAMS, LV_PARAMS,
};

use crate::dynlib::{Normalization, PolyLibrary};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    Bistable,
    LotkaVolterra,
    Lorenz,
    GoldbeterExit,
    Branching,
}

impl System {
    pub const ALL: [System; 5] = [
        System::Bistable,
        System::LotkaVolterra,
        System::Lorenz,
        System::GoldbeterExit,
        System::Branching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Bistable => "bistable",
            System::LotkaVolterra => "lotka_volterra",
            System::Lorenz => "lorenz",
            System::GoldbeterExit => "goldbeter_exit",
            System::Branching => "branching",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            System::Lorenz | System::GoldbeterExit => 3,
            _ => 2,
        }
    }

    /// Number of ground-truth regimes.
    pub fn n_regimes(self) -> usize {
        match self {
            System::Branching => 3,
            _ => 2,
        }
    }

    pub fn coordinate_names(self) -> &'static [&'static str] {
        match self {
            System::Lorenz => &["x", "y", "z"],
            System::GoldbeterExit => &["C", "M", "X"],
            _ => &["x", "y"],
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = System::ALL.iter().map(|s| s.name()).collect();
                Error::InvalidConfig(format!("unknown system '{s}'; valid: {}", names.join(", ")))
            })
    }
}

/// Generator settings. Fields a system does not use are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub system: System,
    pub n_samples: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub dt: f64,
    /// Trajectories per mode (LV, Lorenz) or cells (branching).
    pub n_initial_conditions: usize,
    /// Recorded integration time (LV, Lorenz) or exit-flow horizon (Goldbeter).
    pub horizon: f64,
    /// Integration steps discarded before recording.
    pub transient_discard: usize,
    pub exit_probability: f64,
    pub split_fraction: f64,
    pub exit_paths: usize,
    pub trunk_steps: usize,
    pub branch_steps: usize,
}

impl GeneratorConfig {
    pub fn defaults(system: System) -> Self {
        let base = Self {
            system,
            n_samples: 10_000,
            noise_sigma: 0.1,
            seed: 0,
            dt: 0.01,
            n_initial_conditions: 20,
            horizon: 0.0,
            transient_discard: 0,
            exit_probability: 0.15,
            split_fraction: 0.8,
            exit_paths: 1,
            trunk_steps: 45,
            branch_steps: 30,
        };
        match system {
            System::Bistable => base,
            System::LotkaVolterra => Self { horizon: 100.0, ..base },
            System::Lorenz => Self {
                horizon: 10.0,
                transient_discard: 1000,
                ..base
            },
            System::GoldbeterExit => Self {
                n_samples: 6_320,
                horizon: 25.0,
                transient_discard: 50_000,
                ..base
            },
            System::Branching => Self {
                n_samples: 45_000,
                dt: 0.08,
                n_initial_conditions: 600,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split_fraction must be in (0,1), got {}",
                self.split_fraction
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Noise-free raw-unit snapshots.
pub fn generate_raw(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    cfg.validate()?;
    match cfg.system {
        System::Bistable => bistable_raw(cfg),
        System::LotkaVolterra => lotka_volterra_raw(cfg),
        System::Lorenz => lorenz_raw(cfg),
        System::GoldbeterExit => goldbeter_raw(cfg).map(|(ds, _)| ds),
        System::Branching => branching_raw(cfg),
    }
}

/// Snapshots after unit-variance normalization and `noise_sigma` noise.
pub fn generate(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    let raw = generate_raw(cfg)?;
    let mut ds = normalize_and_noise(&raw, cfg.noise_sigma, derive_seed(cfg.seed, 1))?;
    ds.meta.seed = cfg.seed;
    Ok(ds)
}

/// [`generate`] followed by the configured train/validation split.
pub fn generate_split(cfg: &GeneratorConfig) -> Result<(SnapshotDataset<f64>, SnapshotDataset<f64>)> {
    let ds = generate(cfg)?;
    split(&ds, cfg.split_fraction, derive_seed(cfg.seed, 2))
}

macro_rules! named_generator {
    ($name:ident, $sys:expr) => {
        pub fn $name(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
            if cfg.system != $sys {
                return Err(Error::InvalidConfig(format!(
                    "config is for {}, not {}",
                    cfg.system, $sys
                )));
            }
            generate(cfg)
        }
    };
}

named_generator!(generate_bistable, System::Bistable);
named_generator!(generate_lotka_volterra, System::LotkaVolterra);
named_generator!(generate_lorenz, System::Lorenz);
named_generator!(generate_goldbeter_exit, System::GoldbeterExit);
named_generator!(generate_branching_lineage, System::Branching);

/// Raw-unit ground-truth coefficient matrices on `lib`, one per regime, or
/// `None` when the system is not polynomial (Goldbeter). Errors when a true
/// term is missing from the library.
pub fn true_thetas(system: System, lib: &PolyLibrary) -> Result<Option<Vec<Array2<f64>>>> {
    if lib.dim() != system.dim() {
        return Err(Error::DimensionMismatch {
            what: "library dimension vs system",
            expected: system.dim(),
            got: lib.dim(),
        });
    }
    let entries: Vec<Vec<(usize, Vec<u32>, f64)>> = match system {
        System::Bistable => (0..2).map(systems::bistable_truth).collect(),
        System::LotkaVolterra => (0..2).map(systems::lotka_volterra_truth).collect(),
        System::Lorenz => (0..2).map(systems::lorenz_truth).collect(),
        System::Branching => (0..3).map(branching::branching_truth).collect(),
        System::GoldbeterExit => return Ok(None),
    };
    let mut out = Vec::with_capacity(entries.len());
    for regime in entries {
        let mut theta = Array2::zeros((lib.n_features(), lib.dim()));
        for (j, exps, v) in regime {
            let t = lib.term_index(&exps).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "true term {exps:?} of {system} is outside the degree-{} library",
                    lib.degree()
                ))
            })?;
            theta[[t, j]] = v;
        }
        out.push(theta);
    }
    Ok(Some(out))
}

/// Progenitor starts and ground-truth pushforward finals, both in the
/// normalized state coordinates of a dataset.
#[derive(Debug, Clone)]
pub struct ForecastTask {
    pub starts: Array2<f64>,
    pub truth_finals: Array2<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub sigma_b: f64,
    /// Per-particle exit step of the reference simulation (Goldbeter only).
    pub truth_exit_steps: Option<Vec<Option<usize>>>,
}

/// Builds the forecasting benchmark for the switching systems. `sigma_b` is
/// the rollout noise in normalized units; the reference process receives
/// the same noise mapped back to raw units.
pub fn forecast_task(
    cfg: &GeneratorConfig,
    norm: &Normalization,
    n_particles: usize,
    sigma_b: f64,
    seed: u64,
) -> Result<ForecastTask> {
    cfg.validate()?;
    if n_particles == 0 {
        return Err(Error::InvalidConfig("n_particles must be >= 1".into()));
    }
    let noise: Vec<f64> = norm.state_scale.iter().map(|s| sigma_b * s).collect();
    let scale = |raw: Array2<f64>| {
        let mut out = raw;
        for (j, s) in norm.state_scale.iter().enumerate() {
            out.column_mut(j).mapv_inplace(|v| v / s);
        }
        out
    };
    match cfg.system {
        System::Branching => {
            let starts = sample_trunk_starts(n_particles, derive_seed(seed, 10));
            let finals = simulate_branching(starts.view(), cfg, &noise, derive_seed(seed, 11));
            Ok(ForecastTask {
                starts: scale(starts),
                truth_finals: scale(finals),
                dt: cfg.dt,
                n_steps: cfg.trunk_steps + cfg.branch_steps,
                sigma_b,
                truth_exit_steps: None,
            })
        }
        System::GoldbeterExit => {
            let reference = GoldbeterReference::build(cfg)?;
            let starts = reference.sample_cycle_starts(n_particles, derive_seed(seed, 10));
            let n_steps = ((reference.period + cfg.horizon) / cfg.dt).round() as usize;
            let run = reference.simulate(starts.view(), n_steps, &noise, derive_seed(seed, 11));
            Ok(ForecastTask {
                starts: scale(starts),
                truth_finals: scale(run.finals),
                dt: cfg.dt,
                n_steps,
                sigma_b,
                truth_exit_steps: Some(run.exit_step),
            })
        }
        other => Err(Error::InvalidConfig(format!(
            "forecasting is defined for branching and goldbeter_exit, not {other}"
        ))),
    }
}
