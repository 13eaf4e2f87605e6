//! Two-dimensional lineage: a linear trunk that splits 50/50 into two
//! linear branches.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::{DatasetMeta, SnapshotDataset};
use super::GeneratorConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const TRUNK_A: [[f64; 2]; 2] = [[0.15, -0.05], [0.05, 0.10]];
pub const DRIFT_C: [f64; 2] = [0.6, 0.0];
pub const BRANCH_S: f64 = 0.6;
pub const INITIAL_VARIANCE: f64 = 0.08;

pub const TRUNK: usize = 0;
pub const BRANCH_PLUS: usize = 1;
pub const BRANCH_MINUS: usize = 2;

/// Field of regime `TRUNK`, `BRANCH_PLUS` or `BRANCH_MINUS`.
pub fn branching_field(regime: usize, x: &[f64], out: &mut [f64]) {
    match regime {
        TRUNK => {
            out[0] = TRUNK_A[0][0] * x[0] + TRUNK_A[0][1] * x[1] + DRIFT_C[0];
            out[1] = TRUNK_A[1][0] * x[0] + TRUNK_A[1][1] * x[1] + DRIFT_C[1];
        }
        _ => {
            let s = if regime == BRANCH_PLUS { BRANCH_S } else { -BRANCH_S };
            out[0] = DRIFT_C[0];
            out[1] = s * x[0] + DRIFT_C[1];
        }
    }
}

pub fn sample_trunk_starts(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 0x7e11);
    let sd = INITIAL_VARIANCE.sqrt();
    Array2::from_shape_fn((n, 2), |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        sd * z
    })
}

/// Per-cell Euler trajectories. Row order is cell-major, then step.
pub fn branching_raw(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    let cells = cfg.n_initial_conditions;
    if cells < 2 {
        return Err(Error::InvalidConfig("branching needs at least 2 cells".into()));
    }
    let total_steps = cfg.trunk_steps + cfg.branch_steps;
    if total_steps == 0 {
        return Err(Error::InvalidConfig("branching needs at least one step".into()));
    }
    let x0 = sample_trunk_starts(cells, cfg.seed);
    let mut order: Vec<usize> = (0..cells).collect();
    order.shuffle(&mut stream_rng(cfg.seed, 0xb7a2));
    let mut fate = vec![BRANCH_MINUS; cells];
    for &c in &order[..cells / 2] {
        fate[c] = BRANCH_PLUS;
    }

    let n_full = cells * total_steps;
    let mut states = Array2::zeros((n_full, 2));
    let mut velocities = Array2::zeros((n_full, 2));
    let mut labels = vec![0usize; n_full];
    let mut x = [0.0; 2];
    let mut v = [0.0; 2];
    for c in 0..cells {
        x.copy_from_slice(x0.row(c).as_slice().expect("contiguous"));
        for t in 0..total_steps {
            let regime = if t < cfg.trunk_steps { TRUNK } else { fate[c] };
            branching_field(regime, &x, &mut v);
            let r = c * total_steps + t;
            states.row_mut(r).assign(&ArrayView1::from(&x[..]));
            velocities.row_mut(r).assign(&ArrayView1::from(&v[..]));
            labels[r] = regime;
            for j in 0..2 {
                x[j] += cfg.dt * v[j];
            }
        }
    }
    let mut ds = SnapshotDataset::new(
        states,
        velocities,
        Some(labels),
        DatasetMeta::named("branching", cfg.seed),
    )?;
    if cfg.n_samples < n_full {
        let mut idx = sample(&mut stream_rng(cfg.seed, 0x5b5), n_full, cfg.n_samples).into_vec();
        idx.sort_unstable();
        ds = ds.select(&idx);
    } else if cfg.n_samples > n_full {
        return Err(Error::InvalidConfig(format!(
            "branching produces {n_full} rows; n_samples {} is larger",
            cfg.n_samples
        )));
    }
    Ok(ds)
}

/// Ground-truth pushforward: `trunk_steps` trunk steps, a fair coin per
/// particle, then `branch_steps` branch steps, with Euler–Maruyama noise of
/// raw amplitude `noise[j]`.
pub fn simulate_branching(
    starts: ArrayView2<f64>,
    cfg: &GeneratorConfig,
    noise: &[f64],
    seed: u64,
) -> Array2<f64> {
    let sq = cfg.dt.sqrt();
    let rows: Vec<[f64; 2]> = (0..starts.nrows())
        .into_par_iter()
        .map(|p| {
            let mut rng = stream_rng(seed, p as u64);
            let fate = if rng.random::<bool>() { BRANCH_PLUS } else { BRANCH_MINUS };
            let mut x = [starts[[p, 0]], starts[[p, 1]]];
            let mut v = [0.0; 2];
            for t in 0..cfg.trunk_steps + cfg.branch_steps {
                let regime = if t < cfg.trunk_steps { TRUNK } else { fate };
                branching_field(regime, &x, &mut v);
                for j in 0..2 {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[j] += cfg.dt * v[j] + noise[j] * sq * z;
                }
            }
            x
        })
        .collect();
    let mut out = Array2::zeros((rows.len(), 2));
    for (i, r) in rows.iter().enumerate() {
        out[[i, 0]] = r[0];
        out[[i, 1]] = r[1];
    }
    out
}

pub(crate) fn branching_truth(regime: usize) -> Vec<(usize, Vec<u32>, f64)> {
    match regime {
        TRUNK => vec![
            (0, vec![0, 0], DRIFT_C[0]),
            (0, vec![1, 0], TRUNK_A[0][0]),
            (0, vec![0, 1], TRUNK_A[0][1]),
            (1, vec![1, 0], TRUNK_A[1][0]),
            (1, vec![0, 1], TRUNK_A[1][1]),
        ],
        _ => {
            let s = if regime == BRANCH_PLUS { BRANCH_S } else { -BRANCH_S };
            vec![(0, vec![0, 0], DRIFT_C[0]), (1, vec![1, 0], s)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::System;

    #[test]
    fn hand_values() {
        let mut o = [0.0; 2];
        branching_field(TRUNK, &[0.0, 0.0], &mut o);
        assert_eq!(o, [0.6, 0.0]);
        branching_field(BRANCH_PLUS, &[1.0, 0.0], &mut o);
        assert_eq!(o, [0.6, 0.6]);
        branching_field(BRANCH_MINUS, &[1.0, 0.0], &mut o);
        assert_eq!(o, [0.6, -0.6]);
    }

    #[test]
    fn default_size_and_balance() {
        let cfg = GeneratorConfig::defaults(System::Branching);
        let ds = branching_raw(&cfg).unwrap();
        assert_eq!(ds.len(), 45_000);
        let labels = ds.labels.as_ref().unwrap();
        let count = |k| labels.iter().filter(|&&l| l == k).count();
        assert_eq!(count(TRUNK), 600 * 45);
        assert_eq!(count(BRANCH_PLUS), 300 * 30);
        assert_eq!(count(BRANCH_MINUS), 300 * 30);
        let mut v = [0.0; 2];
        for i in 0..ds.len() {
            branching_field(labels[i], &[ds.states[[i, 0]], ds.states[[i, 1]]], &mut v);
            assert!((v[0] - ds.velocities[[i, 0]]).abs() < 1e-10);
            assert!((v[1] - ds.velocities[[i, 1]]).abs() < 1e-10);
        }
    }

    #[test]
    fn subsample_option() {
        let mut cfg = GeneratorConfig::defaults(System::Branching);
        cfg.n_samples = 7_500;
        assert_eq!(branching_raw(&cfg).unwrap().len(), 7_500);
    }

    #[test]
    fn truth_pushforward_splits_evenly() {
        let cfg = GeneratorConfig::defaults(System::Branching);
        let starts = sample_trunk_starts(600, 11);
        let out = simulate_branching(starts.view(), &cfg, &[0.01, 0.01], 4);
        // branch sign is read off y relative to the trunk's end
        let trunk_end = simulate_branching(
            starts.view(),
            &GeneratorConfig { branch_steps: 0, ..cfg.clone() },
            &[0.0, 0.0],
            4,
        );
        let y_mid = trunk_end.column(1).mean().unwrap();
        let plus = out.column(1).iter().filter(|&&y| y > y_mid).count() as f64;
        let sd = (600.0f64 * 0.25).sqrt();
        assert!((plus - 300.0).abs() <= 3.0 * sd, "plus = {plus}");
    }
}
