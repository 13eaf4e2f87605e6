//! Fixed-step integrators for trajectory generation.

use ndarray::Array2;

use crate::error::{Error, Result};

/// One classic fourth-order Runge–Kutta step of `x' = field(x)`, in place.
pub fn rk4_step<V>(field: &V, x: &mut [f64], dt: f64, scratch: &mut Rk4Scratch)
where
    V: Fn(&[f64], &mut [f64]),
{
    let d = x.len();
    scratch.resize(d);
    let Rk4Scratch { k1, k2, k3, k4, tmp } = scratch;
    field(x, k1);
    for j in 0..d {
        tmp[j] = x[j] + 0.5 * dt * k1[j];
    }
    field(tmp, k2);
    for j in 0..d {
        tmp[j] = x[j] + 0.5 * dt * k2[j];
    }
    field(tmp, k3);
    for j in 0..d {
        tmp[j] = x[j] + dt * k3[j];
    }
    field(tmp, k4);
    for j in 0..d {
        x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
}

#[derive(Debug, Default, Clone)]
pub struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn resize(&mut self, d: usize) {
        if self.k1.len() != d {
            for v in [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4, &mut self.tmp] {
                v.resize(d, 0.0);
            }
        }
    }
}

/// Integrates `steps` RK4 steps from `x0`; row 0 of the result is `x0`.
pub fn integrate_rk4<V>(field: V, x0: &[f64], dt: f64, steps: usize) -> Result<Array2<f64>>
where
    V: Fn(&[f64], &mut [f64]),
{
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
    }
    let d = x0.len();
    let mut out = Array2::zeros((steps + 1, d));
    let mut x = x0.to_vec();
    let mut scratch = Rk4Scratch::default();
    out.row_mut(0).assign(&ndarray::ArrayView1::from(&x));
    for s in 1..=steps {
        rk4_step(&field, &mut x, dt, &mut scratch);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step: s,
                what: "non-finite state during RK4 integration".into(),
            });
        }
        out.row_mut(s).assign(&ndarray::ArrayView1::from(&x));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let tr = integrate_rk4(|x: &[f64], o: &mut [f64]| o[0] = -x[0], &[1.0], 0.01, 100).unwrap();
        assert_eq!(tr.nrows(), 101);
        assert_eq!(tr[[0, 0]], 1.0);
        assert!((tr[[100, 0]] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn zero_field_is_constant() {
        let tr = integrate_rk4(|_: &[f64], o: &mut [f64]| o.fill(0.0), &[0.3, -2.0], 0.5, 7).unwrap();
        for row in tr.rows() {
            assert_eq!(row.to_vec(), vec![0.3, -2.0]);
        }
    }

    #[test]
    fn constant_field_is_exact() {
        let tr = integrate_rk4(|_: &[f64], o: &mut [f64]| o[0] = 1.0, &[2.0], 0.1, 10).unwrap();
        assert!((tr[[10, 0]] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn divergence_reported() {
        let r = integrate_rk4(|x: &[f64], o: &mut [f64]| o[0] = x[0] * x[0], &[1.0], 0.5, 100);
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }
}
