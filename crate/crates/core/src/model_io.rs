//! JSON model files for all three model kinds, tagged by `variant`.
//!
//! Numbers are written as shortest round-trip decimals, so loading a saved
//! model reproduces it bit for bit.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dynlib::{ExpertParams, Normalization, PolyLibrary};
use crate::error::{check_dim, Error, Result};
use crate::mode_global::{
    Activation, DenseLayer, EnsembleMember, EnsembleModel, EpochLog, GatingNetwork, GlobalConfig, GlobalModel,
};
use crate::mode_local::{EmConfig, LocalModel};
use crate::rollout::MixtureDynamics;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpertJson {
    theta: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_sigma: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerJson {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GateJson {
    mu: Vec<f64>,
    scale: Vec<f64>,
    activation: Activation,
    layers: Vec<LayerJson>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalJson {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    degree: usize,
    terms: Vec<Vec<u32>>,
    experts: Vec<ExpertJson>,
    pi: Vec<f64>,
    config: EmConfig,
    train_log: Vec<f64>,
    #[serde(default)]
    events: Vec<String>,
    #[serde(default)]
    converged: bool,
    #[serde(default)]
    selection_score: Option<f64>,
    #[serde(default)]
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlobalJson {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    degree: usize,
    terms: Vec<Vec<u32>>,
    experts: Vec<ExpertJson>,
    gate: GateJson,
    config: GlobalConfig,
    train_log: Vec<EpochLog>,
    #[serde(default)]
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MemberJson {
    seed: u64,
    permutation: Vec<usize>,
    model: GlobalJson,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleJson {
    d: usize,
    #[serde(rename = "K")]
    k: usize,
    degree: usize,
    terms: Vec<Vec<u32>>,
    experts: Vec<ExpertJson>,
    members: Vec<MemberJson>,
    #[serde(default)]
    normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
enum ModelJson {
    Local(LocalJson),
    Global(GlobalJson),
    Ensemble(EnsembleJson),
}

/// A model file of any kind, in double precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Local(LocalModel<f64>),
    Global(GlobalModel<f64>),
    Ensemble(EnsembleModel<f64>),
}

impl AnyModel {
    pub fn variant(&self) -> &'static str {
        match self {
            AnyModel::Local(_) => "local",
            AnyModel::Global(_) => "global",
            AnyModel::Ensemble(_) => "ensemble",
        }
    }

    pub fn dynamics(&self) -> &dyn MixtureDynamics<f64> {
        match self {
            AnyModel::Local(m) => m,
            AnyModel::Global(m) => m,
            AnyModel::Ensemble(m) => m,
        }
    }

    pub fn thetas(&self) -> Vec<Array2<f64>> {
        let d = self.dynamics();
        (0..d.n_experts()).map(|k| d.theta(k).clone()).collect()
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.dynamics().normalization()
    }

    /// Per-expert noise scales.
    pub fn sigmas(&self) -> Vec<f64> {
        match self {
            AnyModel::Local(m) => m.experts.iter().map(|e| e.sigma).collect(),
            AnyModel::Global(m) => (0..m.n_experts()).map(|k| m.sigma(k)).collect(),
            AnyModel::Ensemble(m) => (0..m.n_experts()).map(|k| m.sigma(k)).collect(),
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        let json = match self {
            AnyModel::Local(m) => ModelJson::Local(local_json(m)),
            AnyModel::Global(m) => ModelJson::Global(global_json(m)),
            AnyModel::Ensemble(m) => ModelJson::Ensemble(ensemble_json(m)),
        };
        let mut s = serde_json::to_string_pretty(&json)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        match serde_json::from_str::<ModelJson>(s)? {
            ModelJson::Local(j) => Ok(AnyModel::Local(local_from(j)?)),
            ModelJson::Global(j) => Ok(AnyModel::Global(global_from(j)?)),
            ModelJson::Ensemble(j) => Ok(AnyModel::Ensemble(ensemble_from(j)?)),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

impl<F: Scalar> From<&LocalModel<F>> for AnyModel {
    fn from(m: &LocalModel<F>) -> Self {
        AnyModel::Local(LocalModel {
            library: m.library.clone(),
            experts: m
                .experts
                .iter()
                .map(|e| ExpertParams {
                    theta: cast(&e.theta),
                    sigma: e.sigma.f64(),
                })
                .collect(),
            mixing: m.mixing.iter().map(|p| p.f64()).collect(),
            config: m.config.clone(),
            train_log: m.train_log.clone(),
            events: m.events.clone(),
            converged: m.converged,
            selection_score: m.selection_score,
            normalization: m.normalization.clone(),
        })
    }
}

impl<F: Scalar> From<&GlobalModel<F>> for AnyModel {
    fn from(m: &GlobalModel<F>) -> Self {
        AnyModel::Global(cast_global(m))
    }
}

impl<F: Scalar> From<&EnsembleModel<F>> for AnyModel {
    fn from(m: &EnsembleModel<F>) -> Self {
        AnyModel::Ensemble(EnsembleModel {
            library: m.library.clone(),
            thetas: m.thetas.iter().map(cast).collect(),
            log_sigma: m.log_sigma.iter().map(|v| v.f64()).collect(),
            members: m
                .members
                .iter()
                .map(|mem| EnsembleMember {
                    seed: mem.seed,
                    permutation: mem.permutation.clone(),
                    model: cast_global(&mem.model),
                })
                .collect(),
            normalization: m.normalization.clone(),
        })
    }
}

fn cast<F: Scalar>(a: &Array2<F>) -> Array2<f64> {
    a.mapv(|v| v.f64())
}

fn cast_global<F: Scalar>(m: &GlobalModel<F>) -> GlobalModel<f64> {
    GlobalModel {
        library: m.library.clone(),
        thetas: m.thetas.iter().map(cast).collect(),
        log_sigma: m.log_sigma.iter().map(|v| v.f64()).collect(),
        gate: GatingNetwork {
            input_mean: m.gate.input_mean.iter().map(|v| v.f64()).collect(),
            input_scale: m.gate.input_scale.iter().map(|v| v.f64()).collect(),
            layers: m
                .gate
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: cast(&l.w),
                    b: l.b.iter().map(|v| v.f64()).collect(),
                })
                .collect(),
            activation: m.gate.activation,
        },
        config: m.config.clone(),
        train_log: m.train_log.clone(),
        normalization: m.normalization.clone(),
    }
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matrix(v: &[Vec<f64>], what: &'static str, nrows: usize, ncols: usize) -> Result<Array2<f64>> {
    check_dim(what, nrows, v.len())?;
    let mut out = Array2::zeros((nrows, ncols));
    for (i, row) in v.iter().enumerate() {
        check_dim(what, ncols, row.len())?;
        for (j, &x) in row.iter().enumerate() {
            out[[i, j]] = x;
        }
    }
    Ok(out)
}

fn library_from(d: usize, degree: usize, terms: Vec<Vec<u32>>) -> Result<PolyLibrary> {
    let lib = PolyLibrary::from_terms(d, terms)?;
    if lib.degree() > degree {
        return Err(Error::Parse(format!(
            "terms reach degree {} but the file declares degree {degree}",
            lib.degree()
        )));
    }
    Ok(lib)
}

fn local_json(m: &LocalModel<f64>) -> LocalJson {
    LocalJson {
        d: m.library.dim(),
        k: m.experts.len(),
        degree: m.library.degree(),
        terms: m.library.terms().to_vec(),
        experts: m
            .experts
            .iter()
            .map(|e| ExpertJson {
                theta: rows(&e.theta),
                sigma: Some(e.sigma),
                log_sigma: None,
            })
            .collect(),
        pi: m.mixing.clone(),
        config: m.config.clone(),
        train_log: m.train_log.clone(),
        events: m.events.clone(),
        converged: m.converged,
        selection_score: m.selection_score.is_finite().then_some(m.selection_score),
        normalization: m.normalization.clone(),
    }
}

fn local_from(j: LocalJson) -> Result<LocalModel<f64>> {
    let lib = library_from(j.d, j.degree, j.terms)?;
    check_dim("expert count", j.k, j.experts.len())?;
    let experts = j
        .experts
        .iter()
        .map(|e| {
            let sigma = e
                .sigma
                .or(e.log_sigma.map(f64::exp))
                .ok_or_else(|| Error::Parse("local expert needs sigma".into()))?;
            ExpertParams::new(matrix(&e.theta, "theta", lib.n_features(), lib.dim())?, sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = LocalModel::from_parts(lib, experts, j.pi, j.config)?;
    m.train_log = j.train_log;
    m.events = j.events;
    m.converged = j.converged;
    m.selection_score = j.selection_score.unwrap_or(f64::NAN);
    m.normalization = j.normalization;
    Ok(m)
}

fn global_json(m: &GlobalModel<f64>) -> GlobalJson {
    GlobalJson {
        d: m.library.dim(),
        k: m.thetas.len(),
        degree: m.library.degree(),
        terms: m.library.terms().to_vec(),
        experts: m
            .thetas
            .iter()
            .zip(&m.log_sigma)
            .map(|(t, &s)| ExpertJson {
                theta: rows(t),
                sigma: None,
                log_sigma: Some(s),
            })
            .collect(),
        gate: GateJson {
            mu: m.gate.input_mean.clone(),
            scale: m.gate.input_scale.clone(),
            activation: m.gate.activation,
            layers: m
                .gate
                .layers
                .iter()
                .map(|l| LayerJson {
                    w: rows(&l.w),
                    b: l.b.clone(),
                })
                .collect(),
        },
        config: m.config.clone(),
        train_log: m.train_log.clone(),
        normalization: m.normalization.clone(),
    }
}

fn expert_parts(experts: &[ExpertJson], lib: &PolyLibrary) -> Result<(Vec<Array2<f64>>, Vec<f64>)> {
    let mut thetas = Vec::with_capacity(experts.len());
    let mut log_sigma = Vec::with_capacity(experts.len());
    for e in experts {
        thetas.push(matrix(&e.theta, "theta", lib.n_features(), lib.dim())?);
        log_sigma.push(
            e.log_sigma
                .or(e.sigma.map(f64::ln))
                .ok_or_else(|| Error::Parse("expert needs log_sigma".into()))?,
        );
    }
    Ok((thetas, log_sigma))
}

fn global_from(j: GlobalJson) -> Result<GlobalModel<f64>> {
    let lib = library_from(j.d, j.degree, j.terms)?;
    check_dim("expert count", j.k, j.experts.len())?;
    let (thetas, log_sigma) = expert_parts(&j.experts, &lib)?;
    let mut layers = Vec::with_capacity(j.gate.layers.len());
    let mut width = j.d;
    for l in &j.gate.layers {
        let out = l.b.len();
        layers.push(DenseLayer {
            w: matrix(&l.w, "gate layer", out, width)?,
            b: l.b.clone(),
        });
        width = out;
    }
    if layers.is_empty() {
        return Err(Error::Parse("gate has no layers".into()));
    }
    let gate = GatingNetwork {
        input_mean: j.gate.mu,
        input_scale: j.gate.scale,
        layers,
        activation: j.gate.activation,
    };
    let mut m = GlobalModel::from_parts(lib, thetas, log_sigma, gate, j.config)?;
    m.train_log = j.train_log;
    m.normalization = j.normalization;
    Ok(m)
}

fn ensemble_json(m: &EnsembleModel<f64>) -> EnsembleJson {
    EnsembleJson {
        d: m.library.dim(),
        k: m.thetas.len(),
        degree: m.library.degree(),
        terms: m.library.terms().to_vec(),
        experts: m
            .thetas
            .iter()
            .zip(&m.log_sigma)
            .map(|(t, &s)| ExpertJson {
                theta: rows(t),
                sigma: None,
                log_sigma: Some(s),
            })
            .collect(),
        members: m
            .members
            .iter()
            .map(|mem| MemberJson {
                seed: mem.seed,
                permutation: mem.permutation.clone(),
                model: global_json(&mem.model),
            })
            .collect(),
        normalization: m.normalization.clone(),
    }
}

fn ensemble_from(j: EnsembleJson) -> Result<EnsembleModel<f64>> {
    let lib = library_from(j.d, j.degree, j.terms)?;
    check_dim("expert count", j.k, j.experts.len())?;
    let (thetas, log_sigma) = expert_parts(&j.experts, &lib)?;
    if j.members.is_empty() {
        return Err(Error::Parse("ensemble has no members".into()));
    }
    let members = j
        .members
        .into_iter()
        .map(|mem| {
            let mut sorted = mem.permutation.clone();
            sorted.sort_unstable();
            if sorted != (0..j.k).collect::<Vec<_>>() {
                return Err(Error::Parse("member permutation is not a bijection".into()));
            }
            Ok(EnsembleMember {
                seed: mem.seed,
                permutation: mem.permutation,
                model: global_from(mem.model)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EnsembleModel {
        library: lib,
        thetas,
        log_sigma,
        members,
        normalization: j.normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{DatasetMeta, SnapshotDataset};
    use crate::mode_global::{fit_global, EnsembleModel};
    use crate::rng::stream_rng;
    use rand::Rng;

    fn data() -> SnapshotDataset<f64> {
        let mut rng = stream_rng(1, 0);
        let x = Array2::from_shape_fn((120, 2), |_| rng.random_range(-1.0..1.0));
        let v = x.mapv(|a: f64| -a + 0.1);
        let mut ds = SnapshotDataset::new(x, v, None, DatasetMeta::named("t", 1)).unwrap();
        ds.meta.normalization = Some(Normalization {
            state_scale: vec![2.0, 3.0],
            velocity_scale: vec![0.5, 0.25],
        });
        ds
    }

    #[test]
    fn local_round_trip() {
        let lib = PolyLibrary::new(2, 2).unwrap();
        let mut rng = stream_rng(2, 0);
        let experts = (0..2)
            .map(|_| {
                ExpertParams::new(Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0) / 3.0), 0.123456789).unwrap()
            })
            .collect();
        let mut m = LocalModel::from_parts(lib, experts, vec![0.3, 0.7], EmConfig::default()).unwrap();
        m.train_log = vec![-1.5, -1.25];
        m.normalization = Some(Normalization::identity(2));
        m.selection_score = -2.5;
        let any = AnyModel::from(&m);
        let text = any.to_json_string().unwrap();
        assert!(text.contains("\"variant\": \"local\""));
        assert!(text.contains("\"K\": 2"));
        let back = AnyModel::from_json_str(&text).unwrap();
        assert_eq!(back, any);
    }

    #[test]
    fn global_and_ensemble_round_trip() {
        let cfg = GlobalConfig {
            k: 2,
            lib_order: 1,
            gate_hidden: vec![3],
            epochs: 2,
            ..GlobalConfig::default()
        };
        let m = fit_global(&data(), None, &cfg).unwrap();
        let any = AnyModel::from(&m);
        let text = any.to_json_string().unwrap();
        assert_eq!(AnyModel::from_json_str(&text).unwrap(), any);
        let ens = EnsembleModel::from_members(vec![(0, m.clone()), (5, m)]).unwrap();
        let any = AnyModel::from(&ens);
        assert_eq!(AnyModel::from_json_str(&any.to_json_string().unwrap()).unwrap(), any);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(AnyModel::from_json_str("{\"variant\":\"other\"}").is_err());
        let lib = PolyLibrary::new(1, 1).unwrap();
        let m = LocalModel::from_parts(
            lib,
            vec![ExpertParams::new(Array2::zeros((2, 1)), 1.0).unwrap()],
            vec![1.0],
            EmConfig::default(),
        )
        .unwrap();
        let text = AnyModel::from(&m).to_json_string().unwrap();
        let back = AnyModel::from_json_str(&text).unwrap();
        match back {
            AnyModel::Local(b) => assert!(b.selection_score.is_nan()),
            _ => panic!("wrong variant"),
        }
        let broken = text.replace("\"pi\"", "\"pie\"");
        assert!(AnyModel::from_json_str(&broken).is_err());
    }
}
