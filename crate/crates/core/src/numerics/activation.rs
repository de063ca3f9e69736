use serde::{Deserialize, Serialize};

use super::Matrix;
use crate::error::{Error, Result};

/// Negative slope used by every LeakyReLU in the crate.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Tanh,
    Sigmoid,
    SoftmaxRows,
}

pub fn leaky_relu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        LEAKY_RELU_SLOPE * x
    }
}

/// Hyperbolic tangent through a single `exp`, which is several times
/// faster than the libm routine. Relative error stays below 1e-13.
pub fn tanh(x: f64) -> f64 {
    let ax = x.abs();
    if ax < 1e-3 {
        let x2 = x * x;
        return x * (1.0 - x2 / 3.0 + 2.0 * x2 * x2 / 15.0);
    }
    let e = (-2.0 * ax).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Applies `kind` to `x`, elementwise or (for softmax) per row.
pub fn activation(kind: Activation, x: &Matrix) -> Result<Matrix> {
    if !x.is_finite() {
        let pos = x
            .as_slice()
            .iter()
            .position(|v| !v.is_finite())
            .unwrap_or(0);
        return Err(Error::NonFinite {
            row: pos / x.cols().max(1),
            col: pos % x.cols().max(1),
        });
    }
    Ok(match kind {
        Activation::LeakyRelu => x.map(leaky_relu),
        Activation::Tanh => x.map(tanh),
        Activation::Sigmoid => x.map(sigmoid),
        Activation::SoftmaxRows => {
            if x.cols() == 0 {
                return Err(Error::precondition("softmax over zero columns"));
            }
            softmax_rows(x)
        }
    })
}
