//! Partition agreement, Wasserstein distances, ROC-AUC and coefficient
//! recovery scoring.

use std::collections::HashMap;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::dynlib::PolyLibrary;
use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionScore {
    pub ari: f64,
    pub nmi: f64,
}

/// Default subsample cap for [`wasserstein_joint`].
pub const JOINT_CAP: usize = 1024;

fn contingency(a: &[usize], b: &[usize]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    // sorted so floating-point sums do not depend on hash order
    let mut keys: Vec<_> = cells.keys().copied().collect();
    keys.sort_unstable();
    let cv = keys.into_iter().map(|k| cells[&k]).collect();
    (cv, sorted_values(&ra), sorted_values(&rb))
}

fn comb2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    check_dim("partition lengths", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::Empty("ARI needs at least two samples".into()));
    }
    let (cells, ra, rb) = contingency(a, b);
    let index: f64 = cells.iter().map(|&c| comb2(c)).sum();
    let sa: f64 = ra.iter().map(|&c| comb2(c)).sum();
    let sb: f64 = rb.iter().map(|&c| comb2(c)).sum();
    let expected = sa * sb / comb2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies; 0 when
/// either partition has a single class.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    check_dim("partition lengths", a.len(), b.len())?;
    if a.is_empty() {
        return Err(Error::Empty("NMI needs at least one sample".into()));
    }
    let n = a.len() as f64;
    let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
    let mut ra: HashMap<usize, f64> = HashMap::new();
    let mut rb: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *cells.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let ca: Vec<f64> = sorted_values(&ra);
    let cb: Vec<f64> = sorted_values(&rb);
    let ha = entropy(&ca, n);
    let hb = entropy(&cb, n);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut keys: Vec<_> = cells.keys().copied().collect();
    keys.sort_unstable();
    let mi: f64 = keys
        .into_iter()
        .map(|(x, y)| {
            let c = cells[&(x, y)];
            c / n * (c * n / (ra[&x] * rb[&y])).ln()
        })
        .sum();
    Ok((mi / (0.5 * (ha + hb))).clamp(0.0, 1.0))
}

fn sorted_values(m: &HashMap<usize, f64>) -> Vec<f64> {
    let mut keys: Vec<_> = m.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter().map(|k| m[&k]).collect()
}

pub fn partition_score(a: &[usize], b: &[usize]) -> Result<PartitionScore> {
    Ok(PartitionScore {
        ari: ari(a, b)?,
        nmi: nmi(a, b)?,
    })
}

fn check_p(p: u32) -> Result<()> {
    if p == 1 || p == 2 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("Wasserstein order must be 1 or 2, got {p}")))
    }
}

fn quantile_sorted(s: &[f64], q: f64) -> f64 {
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Order-statistic coupling of two samples. Unequal sizes are padded to the
/// larger size by interpolating the empirical quantile function.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: u32) -> Result<f64> {
    check_p(p)?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("Wasserstein needs non-empty samples".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let m = sa.len().max(sb.len());
    let resize = |s: Vec<f64>| -> Vec<f64> {
        if s.len() == m {
            s
        } else if m == 1 {
            vec![s[0]]
        } else {
            (0..m).map(|i| quantile_sorted(&s, i as f64 / (m - 1) as f64)).collect()
        }
    };
    let (sa, sb) = (resize(sa), resize(sb));
    let mean: f64 = sa
        .iter()
        .zip(&sb)
        .map(|(x, y)| (x - y).abs().powi(p as i32))
        .sum::<f64>()
        / m as f64;
    Ok(if p == 2 { mean.sqrt() } else { mean })
}

/// Minimum-cost perfect matching on a square cost matrix (shortest
/// augmenting paths with potentials, `O(n³)`). Returns `assignment[row] =
/// column`.
pub fn min_cost_assignment(cost: ArrayView2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    // 1-based arrays with a virtual column 0
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Metric record serialized into reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<u32>,
    pub n_a: usize,
    pub n_b: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn subsample(a: ArrayView2<f64>, m: usize, seed: u64, stream: u64) -> Array2<f64> {
    if a.nrows() == m {
        return a.to_owned();
    }
    let mut idx = sample(&mut stream_rng(seed, stream), a.nrows(), m).into_vec();
    idx.sort_unstable();
    a.select(ndarray::Axis(0), &idx)
}

/// Exact optimal-transport distance between equal-weight point clouds after
/// seeded subsampling of both to `min(M, M', cap)` points.
pub fn wasserstein_joint(a: ArrayView2<f64>, b: ArrayView2<f64>, p: u32, cap: usize, seed: u64) -> Result<MetricReport> {
    check_p(p)?;
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::Empty("Wasserstein needs non-empty samples".into()));
    }
    check_dim("point dimension", a.ncols(), b.ncols())?;
    if cap == 0 {
        return Err(Error::InvalidConfig("cap must be >= 1".into()));
    }
    let m = a.nrows().min(b.nrows()).min(cap);
    let sa = subsample(a, m, seed, 0);
    let sb = subsample(b, m, seed, 1);
    let cost = Array2::from_shape_fn((m, m), |(i, j)| {
        let d2: f64 = sa
            .row(i)
            .iter()
            .zip(sb.row(j).iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if p == 2 {
            d2
        } else {
            d2.sqrt()
        }
    });
    let assign = min_cost_assignment(cost.view());
    let mean = assign.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum::<f64>() / m as f64;
    Ok(MetricReport {
        metric: format!("W{p}_joint"),
        value: if p == 2 { mean.sqrt() } else { mean },
        p: Some(p),
        n_a: a.nrows(),
        n_b: b.nrows(),
        cap: Some(cap),
        seed: Some(seed),
    })
}

/// Mann–Whitney AUC with midranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_dim("score/label lengths", scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("ROC-AUC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("ROC-AUC score".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            if labels[i] {
                rank_sum += midrank;
            }
        }
        start = end;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermError {
    /// Index of the true regime.
    pub expert: usize,
    pub output: usize,
    pub term: String,
    pub exponents: Vec<u32>,
    pub truth: f64,
    pub estimate: f64,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    /// `alignment[true_regime] = fitted expert`.
    pub alignment: Vec<usize>,
    pub terms: Vec<TermError>,
    pub max_true_term_error: f64,
    pub max_spurious_magnitude: f64,
}

impl RecoveryReport {
    /// Entry for a true regime, output and exponent vector.
    pub fn term(&self, expert: usize, output: usize, exponents: &[u32]) -> Option<&TermError> {
        self.terms
            .iter()
            .find(|t| t.expert == expert && t.output == output && t.exponents == exponents)
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for perm in permutations(k - 1) {
        for pos in 0..=perm.len() {
            let mut p = perm.clone();
            p.insert(pos, k - 1);
            out.push(p);
        }
    }
    out
}

/// Best bijection `alignment[true] = fitted` under summed Frobenius
/// distance. Brute force for `K <= 6`, exact assignment beyond.
pub fn align_experts(estimated: &[Array2<f64>], truth: &[Array2<f64>]) -> Result<Vec<usize>> {
    check_dim("expert count", truth.len(), estimated.len())?;
    let k = truth.len();
    let cost = Array2::from_shape_fn((k, k), |(t, e)| {
        if truth[t].dim() != estimated[e].dim() {
            return f64::INFINITY;
        }
        (&truth[t] - &estimated[e]).mapv(|v| v * v).sum().sqrt()
    });
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidConfig("coefficient shapes differ between model and truth".into()));
    }
    if k <= 6 {
        let mut best = (f64::INFINITY, Vec::new());
        for perm in permutations(k) {
            let c: f64 = perm.iter().enumerate().map(|(t, &e)| cost[[t, e]]).sum();
            if c < best.0 {
                best = (c, perm);
            }
        }
        Ok(best.1)
    } else {
        Ok(min_cost_assignment(cost.view()))
    }
}

/// Aligns fitted coefficient matrices to the truth and tabulates every
/// entry in library order. All matrices must be in the same units.
pub fn recovery_report(
    lib: &PolyLibrary,
    coordinate_names: &[&str],
    estimated: &[Array2<f64>],
    truth: &[Array2<f64>],
) -> Result<RecoveryReport> {
    for th in estimated.iter().chain(truth) {
        check_dim("coefficient rows vs library", lib.n_features(), th.nrows())?;
        check_dim("coefficient columns vs library", lib.dim(), th.ncols())?;
    }
    let alignment = align_experts(estimated, truth)?;
    let mut terms = Vec::new();
    let mut max_true = 0.0f64;
    let mut max_spur = 0.0f64;
    for (k, &e) in alignment.iter().enumerate() {
        for j in 0..lib.dim() {
            for (t, exps) in lib.terms().iter().enumerate() {
                let truth_v = truth[k][[t, j]];
                let est = estimated[e][[t, j]];
                let err = (est - truth_v).abs();
                if truth_v != 0.0 {
                    max_true = max_true.max(err);
                } else {
                    max_spur = max_spur.max(est.abs());
                }
                terms.push(TermError {
                    expert: k,
                    output: j,
                    term: lib.term_name(t, coordinate_names),
                    exponents: exps.clone(),
                    truth: truth_v,
                    estimate: est,
                    abs_error: err,
                });
            }
        }
    }
    Ok(RecoveryReport {
        alignment,
        terms,
        max_true_term_error: max_true,
        max_spurious_magnitude: max_spur,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_ari(a: &[usize], b: &[usize]) -> f64 {
        // pair counting straight from the definition
        let n = a.len();
        let (mut ss, mut sd, mut ds, mut dd) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                match (a[i] == a[j], b[i] == b[j]) {
                    (true, true) => ss += 1.0,
                    (true, false) => sd += 1.0,
                    (false, true) => ds += 1.0,
                    (false, false) => dd += 1.0,
                }
            }
        }
        let total = ss + sd + ds + dd;
        let expected = (ss + sd) * (ss + ds) / total;
        let max = 0.5 * ((ss + sd) + (ss + ds));
        if max == expected {
            1.0
        } else {
            (ss - expected) / (max - expected)
        }
    }

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[0, 0, 1, 1, 2], &[0, 0, 1, 1, 2]).unwrap(), 1.0);
        assert!(ari(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap().abs() < 1e-15);
        assert!((ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap() + 0.5).abs() < 1e-12);
        assert!(ari(&[0], &[0]).is_err());
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 2]).unwrap(), 0.0);
        let mut rng = stream_rng(1, 0);
        let a: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = (0..100_000).map(|_| rng.random_range(0..3)).collect();
        assert!(nmi(&a, &b).unwrap() <= 0.01);
        let renamed: Vec<usize> = a.iter().map(|&x| [7, 3, 5][x]).collect();
        assert!((nmi(&a, &b).unwrap() - nmi(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn wasserstein_1d_examples() {
        let a = [0.3, -1.0, 2.0];
        assert_eq!(wasserstein_1d(&a, &a, 1).unwrap(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|x| x + 0.7).collect();
        assert!((wasserstein_1d(&a, &shifted, 1).unwrap() - 0.7).abs() < 1e-12);
        assert!((wasserstein_1d(&a, &shifted, 2).unwrap() - 0.7).abs() < 1e-12);
        let u1: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let u2: Vec<f64> = (0..1000).map(|i| 2.0 * i as f64 / 999.0).collect();
        assert!((wasserstein_1d(&u1, &u2, 1).unwrap() - 0.5).abs() < 0.01);
        // unequal sizes via quantile interpolation
        let u3: Vec<f64> = (0..501).map(|i| 2.0 * i as f64 / 500.0).collect();
        assert!((wasserstein_1d(&u1, &u3, 1).unwrap() - 0.5).abs() < 0.01);
        assert!(wasserstein_1d(&[], &a, 1).is_err());
    }

    #[test]
    fn joint_examples() {
        let a = ndarray::array![[0.0, 0.0], [1.0, 0.0], [0.5, 2.0]];
        assert_eq!(wasserstein_joint(a.view(), a.view(), 1, JOINT_CAP, 0).unwrap().value, 0.0);
        let shifted = &a + &ndarray::array![[3.0, 4.0]];
        let r = wasserstein_joint(a.view(), shifted.view(), 1, JOINT_CAP, 0).unwrap();
        assert!((r.value - 5.0).abs() < 1e-12);
        let b1 = ndarray::array![[0.0, 0.0], [1.0, 0.0]];
        let b2 = ndarray::array![[1.0, 0.0], [0.0, 0.0]];
        assert_eq!(wasserstein_joint(b1.view(), b2.view(), 2, JOINT_CAP, 0).unwrap().value, 0.0);
    }

    #[test]
    fn roc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        let mut rng = stream_rng(2, 0);
        let s: Vec<f64> = (0..10_000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..10_000).map(|_| rng.random()).collect();
        assert!((roc_auc(&s, &l).unwrap() - 0.5).abs() < 0.02);
        assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn recovery_examples() {
        let lib = PolyLibrary::new(2, 1).unwrap();
        let t0 = ndarray::array![[1.0, 0.0], [0.0, -1.0], [0.5, 0.0]];
        let t1 = ndarray::array![[0.0, 2.0], [0.3, 0.0], [0.0, 0.0]];
        let truth = vec![t0.clone(), t1.clone()];
        let r = recovery_report(&lib, &["x", "y"], &truth, &truth).unwrap();
        assert_eq!(r.alignment, vec![0, 1]);
        assert_eq!(r.max_true_term_error, 0.0);
        assert_eq!(r.max_spurious_magnitude, 0.0);
        let swapped = vec![t1, t0];
        let r = recovery_report(&lib, &["x", "y"], &swapped, &truth).unwrap();
        assert_eq!(r.alignment, vec![1, 0]);
        assert_eq!(r.max_true_term_error, 0.0);
        assert_eq!(r.term(0, 1, &[1, 0]).unwrap().truth, -1.0);
        let other = PolyLibrary::new(2, 2).unwrap();
        assert!(recovery_report(&other, &["x", "y"], &swapped, &truth).is_err());
    }

    fn brute_force_ot(a: &Array2<f64>, b: &Array2<f64>, p: u32) -> f64 {
        let m = a.nrows();
        let mut best = f64::INFINITY;
        for perm in permutations(m) {
            let c: f64 = (0..m)
                .map(|i| {
                    let d2: f64 = (&a.row(i) - &b.row(perm[i])).mapv(|v| v * v).sum();
                    if p == 2 {
                        d2
                    } else {
                        d2.sqrt()
                    }
                })
                .sum::<f64>()
                / m as f64;
            best = best.min(c);
        }
        if p == 2 {
            best.sqrt()
        } else {
            best
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn ari_nmi_symmetric_renaming_invariant_and_match_pair_counting(
            a in proptest::collection::vec(0usize..4, 2..50),
            seed in 0u64..1000,
        ) {
            let mut rng = stream_rng(seed, 0);
            let b: Vec<usize> = a.iter().map(|&x| if rng.random::<f64>() < 0.3 { rng.random_range(0..4) } else { x }).collect();
            let ab = ari(&a, &b).unwrap();
            prop_assert!((ab - ari(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ab - brute_ari(&a, &b)).abs() < 1e-12);
            let renamed: Vec<usize> = b.iter().map(|&x| (x + 2) % 4 + 10).collect();
            prop_assert!((ab - ari(&a, &renamed).unwrap()).abs() < 1e-12);
            let n = nmi(&a, &b).unwrap();
            prop_assert!((n - nmi(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((n - nmi(&a, &renamed).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&n));
        }

        #[test]
        fn joint_matches_brute_force(m in 1usize..8, d in 1usize..4, p in 1u32..3, seed in 0u64..1000) {
            let mut rng = stream_rng(seed, 3);
            let a = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
            let b = Array2::from_shape_fn((m, d), |_| rng.random_range(-2.0..2.0));
            let got = wasserstein_joint(a.view(), b.view(), p, JOINT_CAP, seed).unwrap().value;
            prop_assert!((got - brute_force_ot(&a, &b, p)).abs() < 1e-9);
        }

        #[test]
        fn one_dim_equals_joint_for_equal_sizes(v in proptest::collection::vec(-5.0f64..5.0, 1..60), seed in 0u64..100) {
            let mut rng = stream_rng(seed, 4);
            let w: Vec<f64> = v.iter().map(|_| rng.random_range(-5.0..5.0)).collect();
            let a = Array2::from_shape_vec((v.len(), 1), v.clone()).unwrap();
            let b = Array2::from_shape_vec((w.len(), 1), w.clone()).unwrap();
            let joint = wasserstein_joint(a.view(), b.view(), 1, JOINT_CAP, 0).unwrap().value;
            let one = wasserstein_1d(&v, &w, 1).unwrap();
            prop_assert!(one <= joint + 1e-9);
            prop_assert!((one - joint).abs() < 1e-9);
        }

        #[test]
        fn auc_complement(s in proptest::collection::vec(-3.0f64..3.0, 2..80), seed in 0u64..100) {
            let mut rng = stream_rng(seed, 5);
            let mut l: Vec<bool> = s.iter().map(|_| rng.random()).collect();
            l[0] = true;
            l[1] = false;
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let sum = roc_auc(&s, &l).unwrap() + roc_auc(&neg, &l).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
