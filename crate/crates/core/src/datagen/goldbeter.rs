//! Goldbeter mitotic oscillator with a stochastic exit to a stable node.

use ndarray::{s, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::dataset::{DatasetMeta, SnapshotDataset, ZoneBox};
use super::integrate::{integrate_rk4, rk4_step, Rk4Scratch};
use super::resample::{arc_length, arclength_resample};
use super::GeneratorConfig;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, PartialEq)]
pub struct GoldbeterParams {
    pub vi: f64,
    pub kd: f64,
    pub vd: f64,
    pub big_kd: f64,
    pub vm1: f64,
    pub kc: f64,
    pub k1: f64,
    pub v2: f64,
    pub k2: f64,
    pub vm3: f64,
    pub k3: f64,
    pub v4: f64,
    pub k4: f64,
}

impl Default for GoldbeterParams {
    fn default() -> Self {
        Self {
            vi: 0.0335,
            kd: 0.0,
            vd: 0.25,
            big_kd: 0.02,
            vm1: 3.2523,
            kc: 0.5,
            k1: 0.005,
            v2: 0.8158,
            k2: 0.005,
            vm3: 1.7020,
            k3: 0.005,
            v4: 1.1580,
            k4: 0.005,
        }
    }
}

/// Right-hand side for state `(C, M, X)`.
pub fn goldbeter_field(p: &GoldbeterParams, x: &[f64], out: &mut [f64]) {
    let (c, m, xx) = (x[0], x[1], x[2]);
    let v1 = p.vm1 * c / (p.kc + c);
    let v3 = p.vm3 * m;
    out[0] = p.vi - p.kd * c - p.vd * xx * c / (p.big_kd + c);
    out[1] = v1 * (1.0 - m) / (p.k1 + 1.0 - m) - p.v2 * m / (p.k2 + m);
    out[2] = v3 * (1.0 - xx) / (p.k3 + 1.0 - xx) - p.v4 * xx / (p.k4 + xx);
}

pub const EXIT_TARGET: [f64; 3] = [-0.3461, 0.1481, 0.1468];
pub const EXIT_RATES: [f64; 3] = [0.6, 0.8, 0.9];

/// Linear exit flow `-K (y - x*)`.
pub fn exit_field(x: &[f64], out: &mut [f64]) {
    for j in 0..3 {
        out[j] = -EXIT_RATES[j] * (x[j] - EXIT_TARGET[j]);
    }
}

const INITIAL_STATE: [f64; 3] = [0.1, 0.1, 0.1];
const RETURN_TOLERANCE: f64 = 1e-2;
const ZONE_PERCENTILE: f64 = 0.10;
const EXIT_ARRIVAL: f64 = 1e-3;

/// Linear-interpolated quantile of unsorted data (`q` in `[0, 1]`).
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// The detected limit cycle with its exit zone, plus a ground-truth
/// simulator of the cycle-with-exit process.
#[derive(Debug, Clone)]
pub struct GoldbeterReference {
    pub params: GoldbeterParams,
    /// One period of RK4 states; the last row is the detected return point.
    pub cycle: Array2<f64>,
    pub period: f64,
    pub dt: f64,
    /// Cyclin level below which the cycle is inside the exit zone.
    pub threshold: f64,
    pub zone: ZoneBox,
    pub exit_probability: f64,
    entry: usize,
}

/// Ground-truth pushforward of the switching process.
#[derive(Debug, Clone)]
pub struct TruthRun {
    pub finals: Array2<f64>,
    /// Step at which each particle switched to the exit flow.
    pub exit_step: Vec<Option<usize>>,
}

impl GoldbeterReference {
    pub fn build(cfg: &GeneratorConfig) -> Result<Self> {
        let params = GoldbeterParams::default();
        let field = |x: &[f64], o: &mut [f64]| goldbeter_field(&params, x, o);
        let warm = integrate_rk4(field, &INITIAL_STATE, cfg.dt, cfg.transient_discard)?;
        let start = warm.row(warm.nrows() - 1).to_vec();
        let window = (200.0 / cfg.dt).ceil() as usize;
        let tr = integrate_rk4(field, &start, cfg.dt, window)?;
        let c = tr.column(0);
        let mean = c.mean().unwrap();
        let ups: Vec<usize> = (0..tr.nrows() - 1)
            .filter(|&i| c[i] < mean && c[i + 1] >= mean)
            .collect();
        if ups.len() < 2 {
            return Err(Error::CycleDetection(format!(
                "found {} upward crossings of the mean cyclin level",
                ups.len()
            )));
        }
        let (i0, i1) = (ups[0], ups[1]);
        let gap = (&tr.row(i1) - &tr.row(i0)).mapv(|v| v * v).sum().sqrt();
        if gap > RETURN_TOLERANCE {
            return Err(Error::CycleDetection(format!(
                "orbit does not close: return distance {gap:.3e} exceeds {RETURN_TOLERANCE}"
            )));
        }
        let cycle = tr.slice(s![i0..=i1, ..]).to_owned();
        let n = cycle.nrows() - 1;
        let cs: Vec<f64> = (0..n).map(|i| cycle[[i, 0]]).collect();
        let threshold = quantile(&cs, ZONE_PERCENTILE);
        let inside: Vec<usize> = (0..n).filter(|&i| cs[i] < threshold).collect();
        if inside.is_empty() {
            return Err(Error::CycleDetection("empty exit zone".into()));
        }
        let mut lo = vec![f64::INFINITY; 3];
        let mut hi = vec![f64::NEG_INFINITY; 3];
        for &i in &inside {
            for j in 0..3 {
                lo[j] = lo[j].min(cycle[[i, j]]);
                hi[j] = hi[j].max(cycle[[i, j]]);
            }
        }
        let entry = (0..n)
            .find(|&i| cs[i] < threshold && cs[(i + n - 1) % n] >= threshold)
            .unwrap_or(inside[0]);
        Ok(Self {
            params,
            cycle,
            period: (i1 - i0) as f64 * cfg.dt,
            dt: cfg.dt,
            threshold,
            zone: ZoneBox { lo, hi },
            exit_probability: cfg.exit_probability,
            entry,
        })
    }

    pub fn in_zone(&self, x: &[f64]) -> bool {
        self.zone.contains(x)
    }

    /// Uniformly random phases on the detected cycle.
    pub fn sample_cycle_starts(&self, n: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream_rng(seed, 0xc1c1e);
        let rows = self.cycle.nrows() - 1;
        let mut out = Array2::zeros((n, 3));
        for i in 0..n {
            out.row_mut(i).assign(&self.cycle.row(rng.random_range(0..rows)));
        }
        out
    }

    /// Runs one exit path: follow the cycle from the zone entry, draw the
    /// exit event every step spent in the zone, then integrate the exit flow
    /// until it reaches the node or `horizon` elapses. Returns the post-exit
    /// states (the exit point itself is excluded).
    fn exit_path(&self, horizon: f64, seed: u64, path: usize) -> Result<Array2<f64>> {
        let mut rng = stream_rng(seed, 0xe1_0000 + path as u64);
        let mut x = self.cycle.row(self.entry).to_vec();
        let mut scratch = Rk4Scratch::default();
        let field = |x: &[f64], o: &mut [f64]| goldbeter_field(&self.params, x, o);
        let max_cycle_steps = 100 * (self.cycle.nrows() - 1);
        let mut exited = false;
        for _ in 0..max_cycle_steps {
            if self.in_zone(&x) && rng.random::<f64>() < self.exit_probability {
                exited = true;
                break;
            }
            rk4_step(&field, &mut x, self.dt, &mut scratch);
        }
        if !exited {
            return Err(Error::Degenerate("no exit event within 100 cycle periods".into()));
        }
        let max_steps = (horizon / self.dt).round() as usize;
        let mut rows = Vec::new();
        for _ in 0..max_steps {
            rk4_step(&exit_field, &mut x, self.dt, &mut scratch);
            rows.extend_from_slice(&x);
            let dist: f64 = (0..3).map(|j| (x[j] - EXIT_TARGET[j]).powi(2)).sum::<f64>().sqrt();
            if dist < EXIT_ARRIVAL {
                break;
            }
        }
        Ok(Array2::from_shape_vec((rows.len() / 3, 3), rows).expect("row-major triples"))
    }

    /// Ground-truth pushforward from `starts` (raw units). Each step a
    /// cycling particle inside the zone switches with the exit probability;
    /// switched particles follow the exit flow for good. Drift is an RK4
    /// step and `noise[j] * sqrt(dt)` Gaussian increments are added per
    /// coordinate. Cycling particles have their concentrations clipped to
    /// the physical range before the field is evaluated.
    pub fn simulate(
        &self,
        starts: ArrayView2<f64>,
        n_steps: usize,
        noise: &[f64],
        seed: u64,
    ) -> TruthRun {
        let sq = self.dt.sqrt();
        let results: Vec<(Vec<f64>, Option<usize>)> = (0..starts.nrows())
            .into_par_iter()
            .map(|p| {
                let mut rng = stream_rng(seed, p as u64);
                let mut x = starts.row(p).to_vec();
                let mut scratch = Rk4Scratch::default();
                let mut exit_step = None;
                let cyc = |y: &[f64], o: &mut [f64]| {
                    let c = [y[0].max(0.0), y[1].clamp(0.0, 1.0), y[2].clamp(0.0, 1.0)];
                    goldbeter_field(&self.params, &c, o)
                };
                for t in 0..n_steps {
                    if exit_step.is_none() && self.in_zone(&x) && rng.random::<f64>() < self.exit_probability {
                        exit_step = Some(t);
                    }
                    if exit_step.is_some() {
                        rk4_step(&exit_field, &mut x, self.dt, &mut scratch);
                    } else {
                        rk4_step(&cyc, &mut x, self.dt, &mut scratch);
                    }
                    for j in 0..3 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        x[j] += noise[j] * sq * z;
                    }
                }
                (x, exit_step)
            })
            .collect();
        let mut finals = Array2::zeros((results.len(), 3));
        let mut exit_step = Vec::with_capacity(results.len());
        for (i, (x, e)) in results.into_iter().enumerate() {
            finals.row_mut(i).assign(&ArrayView1::from(&x));
            exit_step.push(e);
        }
        TruthRun { finals, exit_step }
    }
}

/// Raw cycle-plus-exit snapshots: half the rows uniformly in arc length on
/// one cycle period ("cycle" = 0), half uniformly in arc length along the
/// exit paths ("exit" = 1), with analytic velocities and exit-zone flags.
pub fn goldbeter_raw(cfg: &GeneratorConfig) -> Result<(SnapshotDataset<f64>, GoldbeterReference)> {
    if cfg.n_samples < 4 {
        return Err(Error::InvalidConfig("goldbeter_exit needs n_samples >= 4".into()));
    }
    if cfg.exit_paths == 0 {
        return Err(Error::InvalidConfig("exit_paths must be >= 1".into()));
    }
    if !(cfg.exit_probability > 0.0 && cfg.exit_probability <= 1.0) {
        return Err(Error::InvalidConfig("exit_probability must be in (0, 1]".into()));
    }
    let reference = GoldbeterReference::build(cfg)?;
    let n_cycle = cfg.n_samples / 2;
    let n_exit = cfg.n_samples - n_cycle;
    let cycle_pts = arclength_resample(reference.cycle.view(), n_cycle + 1)?
        .slice(s![..n_cycle, ..])
        .to_owned();

    let paths: Vec<Array2<f64>> = (0..cfg.exit_paths)
        .map(|p| reference.exit_path(cfg.horizon, cfg.seed, p))
        .collect::<Result<_>>()?;
    let lengths: Vec<f64> = paths.iter().map(|p| arc_length(p.view())).collect();
    let alloc = largest_remainder(&lengths, n_exit);
    let mut exit_chunks = Vec::new();
    for (path, &k) in paths.iter().zip(&alloc) {
        if k > 0 {
            exit_chunks.push(arclength_resample(path.view(), k)?);
        }
    }
    let exit_views: Vec<_> = exit_chunks.iter().map(|a| a.view()).collect();
    let exit_pts = ndarray::concatenate(ndarray::Axis(0), &exit_views).expect("3 columns");

    let n = n_cycle + n_exit;
    let mut states = Array2::zeros((n, 3));
    let mut velocities = Array2::zeros((n, 3));
    let mut labels = Vec::with_capacity(n);
    let mut zone = Vec::with_capacity(n);
    let mut v = [0.0; 3];
    for (i, row) in cycle_pts.rows().into_iter().chain(exit_pts.rows()).enumerate() {
        let x = row.to_vec();
        let label = usize::from(i >= n_cycle);
        if label == 0 {
            goldbeter_field(&reference.params, &x, &mut v);
        } else {
            exit_field(&x, &mut v);
        }
        states.row_mut(i).assign(&row);
        velocities.row_mut(i).assign(&ArrayView1::from(&v[..]));
        labels.push(label);
        zone.push(reference.in_zone(&x));
    }
    let mut meta = DatasetMeta::named("goldbeter_exit", cfg.seed);
    meta.exit_threshold = Some(reference.threshold);
    meta.exit_zone = Some(reference.zone.clone());
    let mut ds = SnapshotDataset::new(states, velocities, Some(labels), meta)?;
    ds.zone = Some(zone);
    Ok((ds, reference))
}

/// Splits `total` into integer parts proportional to `weights`.
fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut out: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let missing = total - out.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        out[i] += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::System;

    fn reference() -> GoldbeterReference {
        GoldbeterReference::build(&GeneratorConfig::defaults(System::GoldbeterExit)).unwrap()
    }

    #[test]
    fn exit_field_hand_values() {
        let mut o = [0.0; 3];
        exit_field(&EXIT_TARGET, &mut o);
        assert_eq!(o, [0.0; 3]);
        let x = [EXIT_TARGET[0] + 1.0, EXIT_TARGET[1], EXIT_TARGET[2]];
        exit_field(&x, &mut o);
        assert!((o[0] + 0.6).abs() < 1e-15 && o[1] == 0.0 && o[2] == 0.0);
    }

    #[test]
    fn cycle_closes_and_has_expected_period() {
        let r = reference();
        let first = r.cycle.row(0);
        let last = r.cycle.row(r.cycle.nrows() - 1);
        let gap = (&last - &first).mapv(|v| v * v).sum().sqrt();
        assert!(gap < 1e-2);
        assert!(r.period > 5.0 && r.period < 30.0, "period {}", r.period);
        let resampled = arclength_resample(r.cycle.view(), 200).unwrap();
        let ends = (&resampled.row(199) - &resampled.row(0)).mapv(|v| v * v).sum().sqrt();
        assert!(ends < 1e-2);
        let frac = (0..r.cycle.nrows() - 1).filter(|&i| r.cycle[[i, 0]] < r.threshold).count() as f64
            / (r.cycle.nrows() - 1) as f64;
        assert!((frac - 0.1).abs() < 0.01);
    }

    #[test]
    fn defaults_shape_labels_and_analytic_velocity() {
        let mut cfg = GeneratorConfig::defaults(System::GoldbeterExit);
        cfg.n_samples = 600;
        let (ds, r) = goldbeter_raw(&cfg).unwrap();
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.dim(), 3);
        let labels = ds.labels.as_ref().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 300);
        let zone = ds.zone.as_ref().unwrap();
        assert!(zone.iter().any(|&z| z));
        let mut v = [0.0; 3];
        for i in 0..ds.len() {
            let x = ds.states.row(i).to_vec();
            if labels[i] == 0 {
                goldbeter_field(&r.params, &x, &mut v);
            } else {
                exit_field(&x, &mut v);
            }
            for j in 0..3 {
                assert!((v[j] - ds.velocities[[i, j]]).abs() < 1e-10);
            }
        }
        assert_eq!(ds.meta.exit_threshold, Some(r.threshold));
    }

    #[test]
    fn truth_simulation_exits_from_the_zone() {
        let r = reference();
        let starts = r.sample_cycle_starts(64, 3);
        let steps = (r.period / r.dt).round() as usize + 10;
        let run = r.simulate(starts.view(), steps, &[0.0; 3], 5);
        // one full period crosses the zone for every start
        assert!(run.exit_step.iter().all(|e| e.is_some()));
        let again = r.simulate(starts.view(), steps, &[0.0; 3], 5);
        assert_eq!(run.finals, again.finals);
    }

    #[test]
    fn remainder_allocation_sums() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10).iter().sum::<usize>(), 10);
        assert_eq!(largest_remainder(&[3.0, 1.0], 4), vec![3, 1]);
    }
}
