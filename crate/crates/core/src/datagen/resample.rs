use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Resamples a polyline at `n_out` points equally spaced in cumulative chord
/// length, interpolating linearly between rows. Both endpoints are kept.
pub fn arclength_resample(trajectory: ArrayView2<f64>, n_out: usize) -> Result<Array2<f64>> {
    let n = trajectory.nrows();
    if n < 2 {
        return Err(Error::Degenerate("arc-length resampling needs >= 2 rows".into()));
    }
    if n_out == 0 {
        return Err(Error::InvalidConfig("n_out must be >= 1".into()));
    }
    let d = trajectory.ncols();
    let mut cum = Vec::with_capacity(n);
    cum.push(0.0);
    for i in 1..n {
        let seg: f64 = (0..d)
            .map(|j| (trajectory[[i, j]] - trajectory[[i - 1, j]]).powi(2))
            .sum::<f64>()
            .sqrt();
        cum.push(cum[i - 1] + seg);
    }
    let total = cum[n - 1];
    if !(total > 0.0) {
        return Err(Error::Degenerate("zero-length trajectory".into()));
    }
    let mut out = Array2::zeros((n_out, d));
    let mut seg = 0usize;
    for k in 0..n_out {
        let target = if n_out == 1 {
            0.0
        } else {
            total * k as f64 / (n_out - 1) as f64
        };
        while seg + 2 < n && cum[seg + 1] < target {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let t = if len > 0.0 {
            ((target - cum[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        for j in 0..d {
            out[[k, j]] = trajectory[[seg, j]] + t * (trajectory[[seg + 1, j]] - trajectory[[seg, j]]);
        }
    }
    Ok(out)
}

/// Total chord length of a polyline.
pub fn arc_length(trajectory: ArrayView2<f64>) -> f64 {
    (1..trajectory.nrows())
        .map(|i| {
            (&trajectory.row(i) - &trajectory.row(i - 1))
                .mapv(|v| v * v)
                .sum()
                .sqrt()
        })
        .sum()
}
