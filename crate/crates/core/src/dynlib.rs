//! Polynomial feature libraries and expert vector fields `f(x) = Z(x) Θ`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::scalar::Scalar;

/// Ordered monomial basis of total degree `<= degree` in `dim` variables.
///
/// Terms are in graded lexicographic order: increasing total degree, and
/// within one degree by descending exponent vector, so for two variables the
/// degree-2 basis reads `1, x, y, x^2, xy, y^2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolyLibrary {
    dim: usize,
    degree: usize,
    terms: Vec<Vec<u32>>,
}

fn push_compositions(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if parts == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        push_compositions(total - first, parts - 1, prefix, out);
        prefix.pop();
    }
}

/// Binomial coefficient `C(n, k)` in `u64`.
pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

impl PolyLibrary {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("library dimension must be >= 1".into()));
        }
        let mut terms = Vec::new();
        let mut prefix = Vec::with_capacity(dim);
        for total in 0..=degree as u32 {
            push_compositions(total, dim, &mut prefix, &mut terms);
        }
        Ok(Self { dim, degree, terms })
    }

    /// Rebuilds a library from a serialized term list, checking that it is the
    /// canonical basis for its dimension and degree.
    pub fn from_terms(dim: usize, terms: Vec<Vec<u32>>) -> Result<Self> {
        let degree = terms
            .iter()
            .map(|t| t.iter().sum::<u32>() as usize)
            .max()
            .unwrap_or(0);
        let canonical = Self::new(dim, degree)?;
        if canonical.terms != terms {
            return Err(Error::Parse(format!(
                "term list is not the graded-lex basis for dim={dim}, degree={degree}"
            )));
        }
        Ok(canonical)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn terms(&self) -> &[Vec<u32>] {
        &self.terms
    }

    pub fn n_features(&self) -> usize {
        self.terms.len()
    }

    /// Index of the term with the given exponents, if present.
    pub fn term_index(&self, exponents: &[u32]) -> Option<usize> {
        self.terms.iter().position(|t| t.as_slice() == exponents)
    }

    /// Human-readable monomial, e.g. `x0 x1^2`; the constant term is `1`.
    pub fn term_name(&self, t: usize, names: &[&str]) -> String {
        let parts: Vec<String> = self.terms[t]
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(j, &e)| {
                let name = names.get(j).map(|s| s.to_string()).unwrap_or(format!("x{j}"));
                if e == 1 {
                    name
                } else {
                    format!("{name}^{e}")
                }
            })
            .collect();
        if parts.is_empty() {
            "1".to_string()
        } else {
            parts.join(" ")
        }
    }

    pub fn featurize<F: Scalar>(&self, x: &[F]) -> Result<Vec<F>> {
        check_dim("featurize input", self.dim, x.len())?;
        let mut out = vec![F::zero(); self.n_features()];
        self.featurize_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked hot-path variant of [`featurize`](Self::featurize).
    pub fn featurize_into<F: Scalar>(&self, x: &[F], out: &mut [F]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.terms.len());
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            let mut v = F::one();
            for (&xi, &e) in x.iter().zip(term) {
                if e > 0 {
                    v *= xi.powi(e as i32);
                }
            }
            *slot = v;
        }
    }

    /// Feature matrix with one row `Z(x_i)` per state row.
    pub fn design_matrix<F: Scalar>(&self, states: ArrayView2<F>) -> Result<Array2<F>> {
        check_dim("design matrix columns", self.dim, states.ncols())?;
        let mut z = Array2::zeros((states.nrows(), self.n_features()));
        let mut row_buf = vec![F::zero(); self.dim];
        for (i, row) in states.rows().into_iter().enumerate() {
            for (b, v) in row_buf.iter_mut().zip(row.iter()) {
                *b = *v;
            }
            let out = z.row_mut(i).into_slice().expect("standard layout");
            self.featurize_into(&row_buf, out);
        }
        Ok(z)
    }

    /// Builds a `P x d` coefficient matrix from `(output, exponents, value)`
    /// triples. Panics if an exponent vector is not in the library.
    pub fn theta_from_terms<F: Scalar>(&self, entries: &[(usize, &[u32], f64)]) -> Array2<F> {
        let mut theta = Array2::zeros((self.n_features(), self.dim));
        for &(j, exps, v) in entries {
            let t = self
                .term_index(exps)
                .unwrap_or_else(|| panic!("term {exps:?} not in library"));
            theta[[t, j]] = F::of(v);
        }
        theta
    }
}

/// One expert: coefficients `theta` (`P x d`, column `j` drives output `j`)
/// and isotropic noise scale `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams<F> {
    pub theta: Array2<F>,
    pub sigma: F,
}

impl<F: Scalar> ExpertParams<F> {
    pub fn new(theta: Array2<F>, sigma: F) -> Result<Self> {
        if !(sigma > F::zero() && sigma.is_finite()) {
            return Err(Error::InvalidConfig(format!("expert sigma must be positive, got {sigma}")));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("expert coefficients".into()));
        }
        Ok(Self { theta, sigma })
    }
}

fn check_theta<F>(lib: &PolyLibrary, theta: &Array2<F>) -> Result<()> {
    check_dim("theta rows", lib.n_features(), theta.nrows())?;
    check_dim("theta columns", lib.dim(), theta.ncols())
}

/// Evaluates `Z(x)^T Θ`.
pub fn expert_velocity<F: Scalar>(lib: &PolyLibrary, theta: &Array2<F>, x: &[F]) -> Result<Vec<F>> {
    check_theta(lib, theta)?;
    let z = lib.featurize(x)?;
    let mut out = vec![F::zero(); lib.dim()];
    velocity_from_features(&z, theta, &mut out);
    Ok(out)
}

/// `out = z^T Θ` for precomputed features.
#[inline]
pub fn velocity_from_features<F: Scalar>(z: &[F], theta: &Array2<F>, out: &mut [F]) {
    for v in out.iter_mut() {
        *v = F::zero();
    }
    for (t, &zt) in z.iter().enumerate() {
        if zt == F::zero() {
            continue;
        }
        for (j, o) in out.iter_mut().enumerate() {
            *o += zt * theta[[t, j]];
        }
    }
}

/// Per-coordinate scales applied to states and velocities (`x' = x / s_x`,
/// `v' = v / s_v`), with the coefficient maps between raw and scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state_scale: Vec<f64>,
    pub velocity_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            state_scale: vec![1.0; dim],
            velocity_scale: vec![1.0; dim],
        }
    }

    fn monomial_scale(&self, term: &[u32]) -> f64 {
        term.iter()
            .zip(&self.state_scale)
            .map(|(&e, &s)| s.powi(e as i32))
            .product()
    }

    /// Maps coefficients fitted in scaled coordinates back to raw units.
    pub fn theta_to_raw<F: Scalar>(&self, lib: &PolyLibrary, theta: &Array2<F>) -> Array2<F> {
        let mut out = theta.clone();
        for (t, term) in lib.terms().iter().enumerate() {
            let m = self.monomial_scale(term);
            for j in 0..lib.dim() {
                out[[t, j]] = F::of(theta[[t, j]].f64() * self.velocity_scale[j] / m);
            }
        }
        out
    }

    /// Inverse of [`theta_to_raw`](Self::theta_to_raw).
    pub fn theta_from_raw<F: Scalar>(&self, lib: &PolyLibrary, theta: &Array2<F>) -> Array2<F> {
        let mut out = theta.clone();
        for (t, term) in lib.terms().iter().enumerate() {
            let m = self.monomial_scale(term);
            for j in 0..lib.dim() {
                out[[t, j]] = F::of(theta[[t, j]].f64() * m / self.velocity_scale[j]);
            }
        }
        out
    }

    /// Per-output factor `s_v / s_x` turning a scaled-velocity field into the
    /// time derivative of the scaled state.
    pub fn time_factors(&self) -> Vec<f64> {
        self.velocity_scale
            .iter()
            .zip(&self.state_scale)
            .map(|(v, s)| v / s)
            .collect()
    }

    /// Rescales coefficient columns so that `Z(x') Θ` is `dx'/dt`.
    pub fn theta_time_consistent<F: Scalar>(&self, theta: &Array2<F>) -> Array2<F> {
        let mut out = theta.clone();
        for (j, f) in self.time_factors().into_iter().enumerate() {
            out.column_mut(j).mapv_inplace(|v| F::of(v.f64() * f));
        }
        out
    }

    pub fn to_scaled_state(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.state_scale).map(|(x, s)| x / s).collect()
    }

    pub fn to_raw_state(&self, scaled: &[f64]) -> Vec<f64> {
        scaled.iter().zip(&self.state_scale).map(|(x, s)| x * s).collect()
    }
}
