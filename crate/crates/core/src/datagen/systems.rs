//! Bistable, Lotka–Volterra and Lorenz benchmark systems.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::{DatasetMeta, SnapshotDataset};
use super::integrate::integrate_rk4;
use super::GeneratorConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

pub const BISTABLE_CENTERS: [[f64; 2]; 2] = [[-0.5, 0.0], [0.5, 0.0]];

/// Bistable field of `mode` at an absolute position (the equations are
/// written in coordinates relative to that mode's center).
pub fn bistable_field(mode: usize, x: &[f64], out: &mut [f64]) {
    let u = x[0] - BISTABLE_CENTERS[mode][0];
    let v = x[1] - BISTABLE_CENTERS[mode][1];
    if mode == 0 {
        out[0] = -u + 2.0 * v;
        out[1] = -0.5 * u - v - u * v;
    } else {
        out[0] = -u - 2.0 * v;
        out[1] = 0.5 * u - v + u * v;
    }
}

/// `(a, b, c, d)` in `x' = a x - b x y`, `y' = -c y + d x y`.
pub const LV_PARAMS: [[f64; 4]; 2] = [[0.5, 0.02, 0.5, 0.01], [0.5, 0.04, 0.6, 0.01]];

pub fn lotka_volterra_field(mode: usize, x: &[f64], out: &mut [f64]) {
    let [a, b, c, d] = LV_PARAMS[mode];
    out[0] = a * x[0] - b * x[0] * x[1];
    out[1] = -c * x[1] + d * x[0] * x[1];
}

/// `(sigma, rho, beta)` per mode.
pub const LORENZ_PARAMS: [[f64; 3]; 2] = [[12.0, 28.0, 4.0], [10.0, 35.65, 8.0 / 3.0]];

pub fn lorenz_field(mode: usize, x: &[f64], out: &mut [f64]) {
    let [s, r, b] = LORENZ_PARAMS[mode];
    out[0] = s * (x[1] - x[0]);
    out[1] = x[0] * (r - x[2]) - x[1];
    out[2] = x[0] * x[1] - b * x[2];
}

fn half_n(cfg: &GeneratorConfig) -> Result<usize> {
    if cfg.n_samples == 0 || !cfg.n_samples.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!(
            "n_samples must be even and positive for two balanced modes, got {}",
            cfg.n_samples
        )));
    }
    Ok(cfg.n_samples / 2)
}

/// Assembles mode-major rows with analytic velocities.
fn assemble(
    name: &str,
    cfg: &GeneratorConfig,
    per_mode: Vec<Array2<f64>>,
    field: fn(usize, &[f64], &mut [f64]),
) -> Result<SnapshotDataset<f64>> {
    let d = per_mode[0].ncols();
    let n: usize = per_mode.iter().map(|m| m.nrows()).sum();
    let mut states = Array2::zeros((n, d));
    let mut velocities = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    let mut v = vec![0.0; d];
    for (mode, pts) in per_mode.iter().enumerate() {
        for p in pts.rows() {
            let x = p.to_vec();
            field(mode, &x, &mut v);
            states.row_mut(row).assign(&p);
            velocities.row_mut(row).assign(&ndarray::ArrayView1::from(&v));
            labels.push(mode);
            row += 1;
        }
    }
    SnapshotDataset::new(states, velocities, Some(labels), DatasetMeta::named(name, cfg.seed))
}

/// Gaussian clouds (unit spread) around each center.
pub fn bistable_raw(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    let half = half_n(cfg)?;
    let per_mode = (0..2)
        .map(|mode| {
            let mut rng = stream_rng(cfg.seed, 0xb1_0000 + mode as u64);
            Array2::from_shape_fn((half, 2), |(_, j)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                BISTABLE_CENTERS[mode][j] + z
            })
        })
        .collect();
    assemble("bistable", cfg, per_mode, bistable_field)
}

/// Pools RK4 trajectories from uniformly drawn initial conditions for each
/// mode and draws `n/2` rows per mode without replacement.
fn trajectory_pool(
    cfg: &GeneratorConfig,
    lo: &[f64],
    hi: &[f64],
    field: fn(usize, &[f64], &mut [f64]),
    tag: u64,
) -> Result<Vec<Array2<f64>>> {
    let half = half_n(cfg)?;
    if cfg.n_initial_conditions == 0 {
        return Err(Error::InvalidConfig("n_initial_conditions must be >= 1".into()));
    }
    let record = (cfg.horizon / cfg.dt).round() as usize;
    let d = lo.len();
    let mut per_mode = Vec::with_capacity(2);
    for mode in 0..2 {
        let mut ic_rng = stream_rng(cfg.seed, tag + 2 * mode as u64);
        let ics: Vec<Vec<f64>> = (0..cfg.n_initial_conditions)
            .map(|_| (0..d).map(|j| ic_rng.random_range(lo[j]..hi[j])).collect())
            .collect();
        let trajs: Vec<Array2<f64>> = ics
            .par_iter()
            .map(|x0| {
                let f = |x: &[f64], o: &mut [f64]| field(mode, x, o);
                let tr = integrate_rk4(f, x0, cfg.dt, cfg.transient_discard + record)?;
                if tr.iter().any(|v| v.abs() > 1e8) {
                    return Err(Error::Divergence {
                        step: 0,
                        what: format!("mode {mode} trajectory left the bounded region"),
                    });
                }
                Ok(tr.slice(ndarray::s![cfg.transient_discard.., ..]).to_owned())
            })
            .collect::<Result<_>>()?;
        let pool_len: usize = trajs.iter().map(|t| t.nrows()).sum();
        if pool_len < half {
            return Err(Error::InvalidConfig(format!(
                "trajectory pool of {pool_len} rows cannot supply {half} samples"
            )));
        }
        let views: Vec<_> = trajs.iter().map(|t| t.view()).collect();
        let pool = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
        let mut pick_rng = stream_rng(cfg.seed, tag + 2 * mode as u64 + 1);
        let mut idx = sample(&mut pick_rng, pool_len, half).into_vec();
        idx.sort_unstable();
        per_mode.push(pool.select(ndarray::Axis(0), &idx));
    }
    Ok(per_mode)
}

pub fn lotka_volterra_raw(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    let per_mode = trajectory_pool(cfg, &[10.0, 10.0], &[50.0, 50.0], lotka_volterra_field, 0x1f_0000)?;
    if per_mode.iter().any(|m| m.iter().any(|&v| v < -1e-6)) {
        return Err(Error::Divergence {
            step: 0,
            what: "Lotka-Volterra populations went negative".into(),
        });
    }
    assemble("lotka_volterra", cfg, per_mode, lotka_volterra_field)
}

pub fn lorenz_raw(cfg: &GeneratorConfig) -> Result<SnapshotDataset<f64>> {
    let per_mode = trajectory_pool(
        cfg,
        &[-15.0, -15.0, 0.0],
        &[15.0, 15.0, 40.0],
        lorenz_field,
        0x10_0000,
    )?;
    assemble("lorenz", cfg, per_mode, lorenz_field)
}

/// Raw-unit truth coefficients as `(output, exponents, value)` triples.
pub(crate) fn bistable_truth(mode: usize) -> Vec<(usize, Vec<u32>, f64)> {
    let s = if mode == 0 { 1.0 } else { -1.0 };
    vec![
        (0, vec![0, 0], -0.5 * s),
        (0, vec![1, 0], -1.0),
        (0, vec![0, 1], 2.0 * s),
        (1, vec![0, 0], -0.25),
        (1, vec![1, 0], -0.5 * s),
        (1, vec![0, 1], -1.5),
        (1, vec![1, 1], -s),
    ]
}

pub(crate) fn lotka_volterra_truth(mode: usize) -> Vec<(usize, Vec<u32>, f64)> {
    let [a, b, c, d] = LV_PARAMS[mode];
    vec![
        (0, vec![1, 0], a),
        (0, vec![1, 1], -b),
        (1, vec![0, 1], -c),
        (1, vec![1, 1], d),
    ]
}

pub(crate) fn lorenz_truth(mode: usize) -> Vec<(usize, Vec<u32>, f64)> {
    let [s, r, b] = LORENZ_PARAMS[mode];
    vec![
        (0, vec![1, 0, 0], -s),
        (0, vec![0, 1, 0], s),
        (1, vec![1, 0, 0], r),
        (1, vec![0, 1, 0], -1.0),
        (1, vec![1, 0, 1], -1.0),
        (2, vec![1, 1, 0], 1.0),
        (2, vec![0, 0, 1], -b),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::System;

    fn field_at(f: fn(usize, &[f64], &mut [f64]), mode: usize, x: &[f64]) -> Vec<f64> {
        let mut o = vec![0.0; x.len()];
        f(mode, x, &mut o);
        o
    }

    #[test]
    fn bistable_fixed_points_and_hand_values() {
        assert_eq!(field_at(bistable_field, 0, &[-0.5, 0.0]), vec![0.0, 0.0]);
        assert_eq!(field_at(bistable_field, 1, &[0.5, 0.0]), vec![0.0, 0.0]);
        // relative point (1, 0) under mode 1
        assert_eq!(field_at(bistable_field, 1, &[1.5, 0.0]), vec![-1.0, 0.5]);
    }

    #[test]
    fn lotka_volterra_equilibria() {
        assert_eq!(field_at(lotka_volterra_field, 0, &[50.0, 25.0]), vec![0.0, 0.0]);
        let v = field_at(lotka_volterra_field, 1, &[60.0, 12.5]);
        assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12);
    }

    #[test]
    fn lorenz_hand_values() {
        assert_eq!(field_at(lorenz_field, 0, &[2.0, 2.0, 1.0])[2], 0.0);
        assert!(field_at(lorenz_field, 1, &[2.0, 4.0, 3.0])[2].abs() < 1e-12);
    }

    #[test]
    fn bistable_balanced_and_analytic() {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.n_samples = 1000;
        let ds = bistable_raw(&cfg).unwrap();
        assert_eq!(ds.len(), 1000);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 500);
        for i in 0..ds.len() {
            let v = field_at(bistable_field, labels[i], &ds.states.row(i).to_vec());
            for j in 0..2 {
                assert!((v[j] - ds.velocities[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn odd_sample_count_rejected() {
        let mut cfg = GeneratorConfig::defaults(System::Bistable);
        cfg.n_samples = 11;
        assert!(bistable_raw(&cfg).is_err());
    }

    #[test]
    fn lorenz_shape_and_analytic_velocity() {
        let mut cfg = GeneratorConfig::defaults(System::Lorenz);
        cfg.n_samples = 400;
        cfg.n_initial_conditions = 3;
        let ds = lorenz_raw(&cfg).unwrap();
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.len(), 400);
        let labels = ds.labels.as_ref().unwrap();
        for i in 0..ds.len() {
            let v = field_at(lorenz_field, labels[i], &ds.states.row(i).to_vec());
            for j in 0..3 {
                assert!((v[j] - ds.velocities[[i, j]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn lotka_volterra_deterministic() {
        let mut cfg = GeneratorConfig::defaults(System::LotkaVolterra);
        cfg.n_samples = 200;
        cfg.n_initial_conditions = 2;
        cfg.horizon = 10.0;
        let a = lotka_volterra_raw(&cfg).unwrap();
        let b = lotka_volterra_raw(&cfg).unwrap();
        assert_eq!(a.states, b.states);
        assert_eq!(a.velocities, b.velocities);
        assert!(a.states.iter().all(|&v| v > 0.0));
    }
}
