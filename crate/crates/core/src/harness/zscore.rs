use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Per-feature mean and population standard deviation of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZscoreStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl ZscoreStats {
    pub fn fit(train: &Matrix) -> Result<Self> {
        let (n, d) = train.shape();
        if n == 0 {
            return Err(Error::precondition(
                "cannot fit z-score statistics on zero rows",
            ));
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(train.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(train.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sd = var.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(ZscoreStats { mean, sd })
    }

    /// Zero-variance features map to 0.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.mean.len() {
            return Err(Error::Shape {
                op: "zscore apply",
                left: x.shape(),
                right: (1, self.mean.len()),
            });
        }
        Ok(Matrix::from_fn(x.rows(), x.cols(), |i, j| {
            if self.sd[j] > 0.0 {
                (x[(i, j)] - self.mean[j]) / self.sd[j]
            } else {
                0.0
            }
        }))
    }
}

/// Fits on `train` and transforms `train` plus every matrix in `others`.
pub fn zscore_fit_apply(
    train: &Matrix,
    others: &[&Matrix],
) -> Result<(Matrix, Vec<Matrix>, ZscoreStats)> {
    let stats = ZscoreStats::fit(train)?;
    let t = stats.apply(train)?;
    let rest = others
        .iter()
        .map(|m| stats.apply(m))
        .collect::<Result<_>>()?;
    Ok((t, rest, stats))
}
