//! Snapshot datasets, normalization, splitting, and the CSV/JSON file formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynlib::Normalization;
use crate::error::{Error, Result};
use crate::numfmt::sig12;
use crate::rng::stream_rng;
use crate::scalar::Scalar;

/// Axis-aligned box marking the exit zone of the oscillator data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ZoneBox {
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub noise_sigma: f64,
    pub seed: u64,
    /// `full`, `train`, or `validation`.
    pub split: String,
    pub normalization: Option<Normalization>,
    /// Raw-unit cyclin threshold of the exit zone.
    pub exit_threshold: Option<f64>,
    /// Raw-unit exit-zone box.
    pub exit_zone: Option<ZoneBox>,
}

impl DatasetMeta {
    pub fn named(generator: &str, seed: u64) -> Self {
        Self {
            generator: generator.to_string(),
            noise_sigma: 0.0,
            seed,
            split: "full".into(),
            normalization: None,
            exit_threshold: None,
            exit_zone: None,
        }
    }
}

/// `N` paired `(x, xdot)` rows in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotDataset<F> {
    pub states: Array2<F>,
    pub velocities: Array2<F>,
    pub labels: Option<Vec<usize>>,
    /// Per-row exit-zone membership (oscillator data only).
    pub zone: Option<Vec<bool>>,
    pub meta: DatasetMeta,
}

impl<F: Scalar> SnapshotDataset<F> {
    pub fn new(
        states: Array2<F>,
        velocities: Array2<F>,
        labels: Option<Vec<usize>>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        if states.dim() != velocities.dim() {
            return Err(Error::DimensionMismatch {
                what: "velocity matrix rows",
                expected: states.nrows(),
                got: velocities.nrows(),
            });
        }
        if states.ncols() == 0 {
            return Err(Error::Empty("dataset has zero dimensions".into()));
        }
        if let Some(l) = &labels {
            if l.len() != states.nrows() {
                return Err(Error::DimensionMismatch {
                    what: "labels",
                    expected: states.nrows(),
                    got: l.len(),
                });
            }
        }
        if states.iter().chain(velocities.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset entries".into()));
        }
        Ok(Self {
            states,
            velocities,
            labels,
            zone: None,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    /// Number of distinct ground-truth regimes, if labeled.
    pub fn n_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            states: self.states.select(Axis(0), indices),
            velocities: self.velocities.select(Axis(0), indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            zone: self
                .zone
                .as_ref()
                .map(|z| indices.iter().map(|&i| z[i]).collect()),
            meta: self.meta.clone(),
        }
    }

    pub fn cast<G: Scalar>(&self) -> SnapshotDataset<G> {
        SnapshotDataset {
            states: self.states.mapv(|v| G::of(v.f64())),
            velocities: self.velocities.mapv(|v| G::of(v.f64())),
            labels: self.labels.clone(),
            zone: self.zone.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Concatenates rows of `other` after `self`, keeping `self`'s metadata.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let states = ndarray::concatenate(Axis(0), &[self.states.view(), other.states.view()])
            .map_err(|e| Error::Degenerate(e.to_string()))?;
        let velocities =
            ndarray::concatenate(Axis(0), &[self.velocities.view(), other.velocities.view()])
                .map_err(|e| Error::Degenerate(e.to_string()))?;
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        let zone = match (&self.zone, &other.zone) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        Ok(Self {
            states,
            velocities,
            labels,
            zone,
            meta: self.meta.clone(),
        })
    }
}

fn column_std(m: &Array2<f64>, j: usize) -> f64 {
    let col = m.column(j);
    let n = col.len() as f64;
    let mean = col.sum() / n;
    (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Rescales every state and velocity coordinate to unit variance (no
/// centering), then adds i.i.d. `N(0, sigma^2)` noise to both.
pub fn normalize_and_noise(
    dataset: &SnapshotDataset<f64>,
    sigma: f64,
    seed: u64,
) -> Result<SnapshotDataset<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("noise sigma must be >= 0, got {sigma}")));
    }
    if dataset.len() < 2 {
        return Err(Error::Empty("normalization needs at least two rows".into()));
    }
    let d = dataset.dim();
    let mut state_scale = Vec::with_capacity(d);
    let mut velocity_scale = Vec::with_capacity(d);
    for j in 0..d {
        let sx = column_std(&dataset.states, j);
        let sv = column_std(&dataset.velocities, j);
        if !(sx > 0.0 && sv > 0.0) {
            return Err(Error::Degenerate(format!("coordinate {j} has zero variance")));
        }
        state_scale.push(sx);
        velocity_scale.push(sv);
    }
    let mut out = dataset.clone();
    let mut rng = stream_rng(seed, 0x6e6f697365);
    for i in 0..out.len() {
        for j in 0..d {
            let nx: f64 = StandardNormal.sample(&mut rng);
            let nv: f64 = StandardNormal.sample(&mut rng);
            out.states[[i, j]] = out.states[[i, j]] / state_scale[j] + sigma * nx;
            out.velocities[[i, j]] = out.velocities[[i, j]] / velocity_scale[j] + sigma * nv;
        }
    }
    out.meta.noise_sigma = sigma;
    out.meta.normalization = Some(Normalization {
        state_scale,
        velocity_scale,
    });
    Ok(out)
}

/// Uniformly random disjoint split; `fraction` of rows go to the first part.
pub fn split<F: Scalar>(
    dataset: &SnapshotDataset<F>,
    fraction: f64,
    seed: u64,
) -> Result<(SnapshotDataset<F>, SnapshotDataset<F>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction must be in (0,1), got {fraction}")));
    }
    let n = dataset.len();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Empty(format!("split of {n} rows at {fraction} leaves an empty side")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 0x73706c6974));
    let (a, b) = idx.split_at(n_train);
    let mut train = dataset.select(a);
    let mut val = dataset.select(b);
    train.meta.split = "train".into();
    val.meta.split = "validation".into();
    Ok((train, val))
}

/// Writes `x0..x{d-1}, v0..v{d-1}, label` rows (12 significant digits). A
/// trailing `zone` column is written when exit-zone flags are present.
pub fn write_csv<F: Scalar>(dataset: &SnapshotDataset<F>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let d = dataset.dim();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend((0..d).map(|j| format!("v{j}")));
    header.push("label".into());
    if dataset.zone.is_some() {
        header.push("zone".into());
    }
    writeln!(w, "{}", header.join(","))?;
    let mut line = String::new();
    for i in 0..dataset.len() {
        line.clear();
        for j in 0..d {
            line.push_str(&sig12(dataset.states[[i, j]].f64()));
            line.push(',');
        }
        for j in 0..d {
            line.push_str(&sig12(dataset.velocities[[i, j]].f64()));
            line.push(',');
        }
        match &dataset.labels {
            Some(l) => line.push_str(&l[i].to_string()),
            None => line.push_str("-1"),
        }
        if let Some(z) = &dataset.zone {
            line.push_str(if z[i] { ",1" } else { ",0" });
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the CSV layout written by [`write_csv`]. The `label` column is
/// optional; an all-`-1` label column is read as unlabeled.
pub fn read_csv<F: Scalar>(path: &Path, meta: DatasetMeta) -> Result<SnapshotDataset<F>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Empty(format!("{} has no header", path.display())))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let d = cols.iter().filter(|c| c.starts_with('x')).count();
    if d == 0 || cols.iter().filter(|c| c.starts_with('v')).count() != d {
        return Err(Error::Parse(format!("bad dataset header: {header}")));
    }
    for j in 0..d {
        if cols[j] != format!("x{j}") || cols[d + j] != format!("v{j}") {
            return Err(Error::Parse(format!("bad dataset header: {header}")));
        }
    }
    let label_col = cols.iter().position(|c| *c == "label");
    let zone_col = cols.iter().position(|c| *c == "zone");
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut zone = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse(format!("row {} has {} fields", lineno + 2, fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))
        };
        for f in &fields[..d] {
            states.push(F::of(num(f)?));
        }
        for f in &fields[d..2 * d] {
            velocities.push(F::of(num(f)?));
        }
        if let Some(c) = label_col {
            labels.push(
                fields[c]
                    .trim()
                    .parse()
                    .map_err(|e| Error::Parse(format!("row {}: label {e}", lineno + 2)))?,
            );
        }
        if let Some(c) = zone_col {
            zone.push(fields[c].trim() == "1");
        }
    }
    let n = states.len() / d;
    let states = Array2::from_shape_vec((n, d), states).expect("row-major shape");
    let velocities = Array2::from_shape_vec((n, d), velocities).expect("row-major shape");
    let labels = if label_col.is_some() && labels.iter().any(|&l| l >= 0) {
        if labels.iter().any(|&l| l < 0) {
            return Err(Error::Parse("mixed missing and present labels".into()));
        }
        Some(labels.into_iter().map(|l| l as usize).collect())
    } else {
        None
    };
    let mut ds = SnapshotDataset::new(states, velocities, labels, meta)?;
    if zone_col.is_some() {
        ds.zone = Some(zone);
    }
    Ok(ds)
}

/// Sidecar JSON describing a generated dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaSidecar {
    pub generator: String,
    pub d: usize,
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub split: f64,
    pub normalization: Normalization,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_zone: Option<ZoneBox>,
}

impl MetaSidecar {
    pub fn from_dataset<F: Scalar>(ds: &SnapshotDataset<F>, split: f64) -> Self {
        Self {
            generator: ds.meta.generator.clone(),
            d: ds.dim(),
            n: ds.len(),
            sigma: ds.meta.noise_sigma,
            seed: ds.meta.seed,
            split,
            normalization: ds
                .meta
                .normalization
                .clone()
                .unwrap_or_else(|| Normalization::identity(ds.dim())),
            exit_threshold: ds.meta.exit_threshold,
            exit_zone: ds.meta.exit_zone.clone(),
        }
    }

    pub fn to_meta(&self, split: &str) -> DatasetMeta {
        DatasetMeta {
            generator: self.generator.clone(),
            noise_sigma: self.sigma,
            seed: self.seed,
            split: split.to_string(),
            normalization: Some(self.normalization.clone()),
            exit_threshold: self.exit_threshold,
            exit_zone: self.exit_zone.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_dataset(n: usize, seed: u64) -> SnapshotDataset<f64> {
        let mut rng = stream_rng(seed, 1);
        let states = Array2::from_shape_fn((n, 2), |(_, j)| rng.random::<f64>() * (j + 1) as f64);
        let velocities = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * 5.0 - 1.0);
        let labels = (0..n).map(|i| i % 2).collect();
        SnapshotDataset::new(states, velocities, Some(labels), DatasetMeta::named("test", seed)).unwrap()
    }

    fn var(col: ndarray::ArrayView1<f64>) -> f64 {
        let n = col.len() as f64;
        let m = col.sum() / n;
        col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn normalization_gives_unit_variance() {
        let ds = random_dataset(500, 3);
        let out = normalize_and_noise(&ds, 0.0, 1).unwrap();
        for j in 0..2 {
            assert!((var(out.states.column(j)) - 1.0).abs() < 1e-12);
            assert!((var(out.velocities.column(j)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_adds_sigma_squared_variance() {
        let ds = random_dataset(200_000, 4);
        let out = normalize_and_noise(&ds, 0.1, 9).unwrap();
        for j in 0..2 {
            assert!((var(out.states.column(j)) - 1.01).abs() < 2e-3);
            assert!((var(out.velocities.column(j)) - 1.01).abs() < 2e-3);
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let ds = random_dataset(100, 5);
        let a = normalize_and_noise(&ds, 0.1, 42).unwrap();
        let b = normalize_and_noise(&ds, 0.1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_variance_rejected() {
        let mut ds = random_dataset(10, 6);
        ds.states.column_mut(1).fill(2.0);
        assert!(matches!(normalize_and_noise(&ds, 0.1, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = random_dataset(10_000, 7);
        let (tr, va) = split(&ds, 0.8, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (8000, 2000));
        let (tr2, _) = split(&ds, 0.8, 3).unwrap();
        assert_eq!(tr, tr2);
        let small = random_dataset(10, 7);
        let (a, b) = split(&small, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert!(split(&small, 1.0, 1).is_err());
        assert!(split(&random_dataset(2, 1), 0.99, 1).is_err());
    }

    #[test]
    fn split_is_disjoint_and_carries_labels() {
        let mut ds = random_dataset(50, 8);
        // tag rows so we can track them
        for i in 0..50 {
            ds.states[[i, 0]] = i as f64;
        }
        let (a, b) = split(&ds, 0.6, 2).unwrap();
        let mut seen: Vec<usize> = a
            .states
            .column(0)
            .iter()
            .chain(b.states.column(0).iter())
            .map(|v| *v as usize)
            .collect();
        for (row, &orig) in a.states.column(0).iter().zip(a.labels.as_ref().unwrap()) {
            assert_eq!(*row as usize % 2, orig);
        }
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("mode_dyn_csv_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("d.csv");
        let mut ds = random_dataset(20, 10);
        ds.zone = Some((0..20).map(|i| i % 3 == 0).collect());
        write_csv(&ds, &path).unwrap();
        let back: SnapshotDataset<f64> = read_csv(&path, ds.meta.clone()).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.zone, ds.zone);
        for (a, b) in back.states.iter().zip(ds.states.iter()) {
            assert!((a - b).abs() <= 1e-11 * b.abs().max(1.0));
        }
        ds.labels = None;
        ds.zone = None;
        write_csv(&ds, &path).unwrap();
        let back: SnapshotDataset<f64> = read_csv(&path, ds.meta.clone()).unwrap();
        assert!(back.labels.is_none());
        std::fs::remove_dir_all(&dir).ok();
    }
}
