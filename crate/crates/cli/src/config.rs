//! Layered run configuration: built-in defaults, then `MODE_DYN_SEED`, then
//! the config file (INI sections or JSON), then command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use mode_dyn::datagen::{GeneratorConfig, System};
use mode_dyn::mode_global::GlobalConfig;
use mode_dyn::mode_local::EmConfig;
use mode_dyn::rollout::RolloutConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "MODE_DYN_SEED";

const SECTIONS: [&str; 6] = ["generator", "local", "global", "rollout", "eval", "meta"];

/// Evaluation and benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Base seed of benchmark cells; cell `s` uses `seed + s` for both data
    /// and model.
    pub seed: u64,
    /// Particles in forecasting pushforwards.
    pub n_particles: usize,
    /// Subsample cap of the exact joint Wasserstein solver.
    pub w_cap: usize,
    /// Seeds per benchmark cell; each suite has its own default.
    pub seeds: Option<usize>,
    /// Gate ensemble size for the regime-detection score.
    pub ensemble: usize,
    /// Expert scored by `auc` and probed by rollouts; inferred when absent.
    pub expert: Option<usize>,
    pub threshold: f64,
    /// Cap on the training epochs of benchmark fits (quick runs).
    pub max_epochs: Option<usize>,
    pub robustness_sigmas: Vec<f64>,
    pub robustness_sizes: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_particles: 1000,
            w_cap: 1024,
            seeds: None,
            ensemble: 5,
            expert: None,
            threshold: 0.5,
            max_epochs: None,
            robustness_sigmas: vec![0.0, 1e-5, 1e-2, 1e-1, 2e-1],
            robustness_sizes: vec![100, 800, 8000],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.n_particles == 0 || self.w_cap == 0 || self.ensemble == 0 {
            return Err(CliError::usage("eval: n_particles, w_cap and ensemble must be >= 1"));
        }
        if self.seeds == Some(0) {
            return Err(CliError::usage("eval: seeds must be >= 1"));
        }
        if self.robustness_sigmas.iter().any(|s| !(*s >= 0.0)) || self.robustness_sizes.contains(&0) {
            return Err(CliError::usage("eval: robustness grid needs sigma >= 0 and sizes >= 1"));
        }
        Ok(())
    }
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub generator: Option<GeneratorConfig>,
    pub local: EmConfig,
    pub preset: Option<String>,
    pub global: GlobalConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

/// Everything a command contributes on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub file: Option<std::path::PathBuf>,
    pub seed: Option<u64>,
    pub env_seed: Option<String>,
    pub system: Option<System>,
    pub preset: Option<String>,
    /// `(section, key, value)` flag overrides.
    pub overrides: Vec<(&'static str, &'static str, Value)>,
}

impl Sources {
    pub fn set(&mut self, section: &'static str, key: &'static str, value: Option<impl Serialize>) {
        if let Some(v) = value {
            self.overrides
                .push((section, key, serde_json::to_value(v).expect("flag values serialize")));
        }
    }
}

type RawConfig = BTreeMap<String, Map<String, Value>>;

/// INI scalars are read as JSON where possible (numbers, booleans, arrays,
/// `null`) and as plain strings otherwise.
fn ini_value(s: &str) -> Value {
    serde_json::from_str(s.trim()).unwrap_or_else(|_| Value::String(s.trim().to_string()))
}

fn read_raw(path: &Path) -> CliResult<RawConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let raw: RawConfig = if text.trim_start().starts_with('{') {
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(top) = v else { unreachable!() };
        let mut out = RawConfig::new();
        for (name, body) in top {
            match body {
                Value::Object(m) => {
                    out.insert(name, m);
                }
                _ => return Err(CliError::usage(format!("config section '{name}' must be an object"))),
            }
        }
        out
    } else {
        let ini = ini::Ini::load_from_str(&text)
            .map_err(|e| CliError::usage(format!("config {} is not valid INI: {e}", path.display())))?;
        let mut out = RawConfig::new();
        for (section, props) in ini.iter() {
            let Some(name) = section else {
                if props.iter().next().is_some() {
                    return Err(CliError::usage("config keys must sit inside a [section]"));
                }
                continue;
            };
            let entry = out.entry(name.to_string()).or_default();
            for (k, v) in props.iter() {
                entry.insert(k.to_string(), ini_value(v));
            }
        }
        out
    };
    for name in raw.keys() {
        if !SECTIONS.contains(&name.as_str()) {
            return Err(CliError::usage(format!(
                "unknown config section '{name}' (expected one of {})",
                SECTIONS.join(", ")
            )));
        }
    }
    Ok(raw)
}

fn parse_env_seed(s: &str) -> CliResult<u64> {
    s.trim()
        .parse()
        .map_err(|_| CliError::usage(format!("{SEED_ENV} must be an unsigned integer, got '{s}'")))
}

fn section<T: DeserializeOwned + Serialize>(
    name: &str,
    base: T,
    env_seed: Option<u64>,
    file: Option<&Map<String, Value>>,
    seed: Option<u64>,
    overrides: &[(&'static str, &'static str, Value)],
) -> CliResult<T> {
    let Value::Object(mut obj) = serde_json::to_value(base)? else { unreachable!() };
    let has_seed = obj.contains_key("seed");
    if let (Some(s), true) = (env_seed, has_seed) {
        obj.insert("seed".into(), s.into());
    }
    if let Some(f) = file {
        for (k, v) in f {
            obj.insert(k.clone(), v.clone());
        }
    }
    if let (Some(s), true) = (seed, has_seed) {
        obj.insert("seed".into(), s.into());
    }
    for (sec, k, v) in overrides {
        if *sec == name {
            obj.insert(k.to_string(), v.clone());
        }
    }
    serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::usage(format!("config section [{name}]: {e}")))
}

impl RunConfig {
    pub fn resolve(src: &Sources) -> CliResult<Self> {
        let mut raw = match &src.file {
            Some(p) => read_raw(p)?,
            None => RawConfig::new(),
        };
        let env_seed = src.env_seed.as_deref().map(parse_env_seed).transpose()?;

        let mut gen_file = raw.remove("generator");
        let file_system = match gen_file.as_mut().and_then(|m| m.remove("system")) {
            Some(Value::String(s)) => Some(s.parse::<System>()?),
            Some(other) => return Err(CliError::usage(format!("generator.system must be a name, got {other}"))),
            None => None,
        };
        let system = src.system.or(file_system);
        let generator = match system {
            Some(sys) => {
                let mut g: GeneratorConfig = section(
                    "generator",
                    GeneratorConfig::defaults(sys),
                    env_seed,
                    gen_file.as_ref(),
                    src.seed,
                    &src.overrides,
                )?;
                g.system = sys;
                g.validate()?;
                Some(g)
            }
            None if gen_file.as_ref().is_some_and(|m| !m.is_empty()) => {
                return Err(CliError::usage("config section [generator] needs a system"));
            }
            None => None,
        };

        let mut global_file = raw.remove("global");
        let file_preset = match global_file.as_mut().and_then(|m| m.remove("preset")) {
            Some(Value::String(s)) => Some(s),
            Some(Value::Null) | None => None,
            Some(other) => return Err(CliError::usage(format!("global.preset must be a name, got {other}"))),
        };
        let preset = src.preset.clone().or(file_preset);
        let global_base = match &preset {
            Some(p) => GlobalConfig::preset(p)?,
            None => GlobalConfig::default(),
        };
        let global: GlobalConfig =
            section("global", global_base, env_seed, global_file.as_ref(), src.seed, &src.overrides)?;
        global.validate()?;

        let local: EmConfig = section(
            "local",
            EmConfig::default(),
            env_seed,
            raw.get("local"),
            src.seed,
            &src.overrides,
        )?;
        local.validate()?;
        let rollout: RolloutConfig = section(
            "rollout",
            RolloutConfig::default(),
            env_seed,
            raw.get("rollout"),
            src.seed,
            &src.overrides,
        )?;
        rollout.validate()?;
        let eval: EvalConfig = section("eval", EvalConfig::default(), env_seed, raw.get("eval"), src.seed, &src.overrides)?;
        eval.validate()?;

        Ok(Self {
            generator,
            local,
            preset,
            global,
            rollout,
            eval,
        })
    }

    /// The resolved configuration as a JSON tree that [`RunConfig::resolve`]
    /// accepts back unchanged.
    pub fn to_value(&self) -> Value {
        let mut top = Map::new();
        if let Some(g) = &self.generator {
            top.insert("generator".into(), serde_json::to_value(g).expect("config serializes"));
        }
        top.insert("local".into(), serde_json::to_value(&self.local).expect("config serializes"));
        let mut global = serde_json::to_value(&self.global).expect("config serializes");
        if let (Some(p), Value::Object(m)) = (&self.preset, &mut global) {
            m.insert("preset".into(), Value::String(p.clone()));
        }
        top.insert("global".into(), global);
        top.insert("rollout".into(), serde_json::to_value(&self.rollout).expect("config serializes"));
        top.insert("eval".into(), serde_json::to_value(&self.eval).expect("config serializes"));
        Value::Object(top)
    }

    /// First 16 hex digits of the SHA-256 of the canonical resolved config.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_value().to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Echo file contents: the resolved config plus a `meta` section.
    pub fn echo(&self, command: &str) -> String {
        let Value::Object(mut top) = self.to_value() else { unreachable!() };
        let mut meta = Map::new();
        meta.insert("command".into(), command.into());
        meta.insert("config_hash".into(), self.hash().into());
        if let Some(caption) = self.preset.as_deref().and_then(GlobalConfig::preset_caption) {
            meta.insert("preset_caption".into(), caption.into());
        }
        top.insert("meta".into(), Value::Object(meta));
        let mut s = serde_json::to_string_pretty(&Value::Object(top)).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn write_echo(&self, path: &Path, command: &str) -> CliResult<()> {
        std::fs::write(path, self.echo(command))?;
        Ok(())
    }

    pub fn generator(&self) -> CliResult<&GeneratorConfig> {
        self.generator
            .as_ref()
            .ok_or_else(|| CliError::usage("no generator system given (use --system or generator.system)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(name: &str, body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        std::fs::File::create(&path).unwrap().write_all(body.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn layering_order() {
        let (_d, path) = write(
            "c.ini",
            "# comment\n[generator]\nsystem = lorenz\nnoise_sigma = 0.2\n\n[local]\nn_clusters = 2\nseed = 4\n[global]\npreset = goldbeter\nlr = 0.05\n",
        );
        let mut src = Sources {
            file: Some(path),
            env_seed: Some("9".into()),
            ..Sources::default()
        };
        let cfg = RunConfig::resolve(&src).unwrap();
        let g = cfg.generator.as_ref().unwrap();
        assert_eq!(g.system, System::Lorenz);
        assert_eq!(g.noise_sigma, 0.2);
        assert_eq!(g.seed, 9);
        assert_eq!(cfg.local.seed, 4);
        assert_eq!(cfg.local.n_clusters, 2);
        assert_eq!(cfg.global.lr, 0.05);
        assert_eq!(cfg.global.epochs, 10_000);
        assert_eq!(cfg.rollout.seed, 9);

        src.seed = Some(1);
        src.set("local", "n_clusters", Some(5usize));
        let cfg = RunConfig::resolve(&src).unwrap();
        assert_eq!(cfg.local.seed, 1);
        assert_eq!(cfg.local.n_clusters, 5);
        assert_eq!(cfg.generator.unwrap().seed, 1);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let (_d, path) = write("c.ini", "[local]\nn_clusterz = 2\n");
        let err = RunConfig::resolve(&Sources {
            file: Some(path),
            ..Sources::default()
        })
        .unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
        assert!(err.to_string().contains("n_clusterz"));

        let (_d, path) = write("c.ini", "[lokal]\nn_clusters = 2\n");
        assert!(RunConfig::resolve(&Sources {
            file: Some(path),
            ..Sources::default()
        })
        .is_err());

        let err = RunConfig::resolve(&Sources {
            env_seed: Some("abc".into()),
            ..Sources::default()
        })
        .unwrap_err();
        assert!(matches!(err, CliError::Usage(_)));
    }

    #[test]
    fn echo_round_trip() {
        let mut src = Sources {
            system: Some(System::GoldbeterExit),
            preset: Some("goldbeter".into()),
            seed: Some(3),
            ..Sources::default()
        };
        src.set("rollout", "record_gates", Some(true));
        let cfg = RunConfig::resolve(&src).unwrap();
        let echo = cfg.echo("fit");
        assert!(echo.contains("Goldbeter oscillator hyperparameters"));
        let (_d, path) = write("echo.json", &echo);
        let back = RunConfig::resolve(&Sources {
            file: Some(path),
            ..Sources::default()
        })
        .unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(back.echo("fit"), echo);
    }

    #[test]
    fn ini_scalars() {
        assert_eq!(ini_value("1e-4"), Value::from(1e-4));
        assert_eq!(ini_value(" [64, 32] "), serde_json::json!([64, 32]));
        assert_eq!(ini_value("tanh"), Value::from("tanh"));
        assert_eq!(ini_value("true"), Value::from(true));
    }
}
