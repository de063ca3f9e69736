use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Entries of W and H never drop below this, so multiplicative updates
/// cannot get stuck at exactly zero.
pub const NMF_FLOOR: f64 = 1e-12;

pub const DEFAULT_NMF_ITERATIONS: usize = 1000;

#[derive(Clone, Debug)]
pub struct NmfFactors {
    /// `N × k`
    pub w: Matrix,
    /// `k × D`; column `j` is the embedding of feature `j`.
    pub h: Matrix,
    /// `‖X − WH‖_F` after the last iteration.
    pub final_frobenius_error: f64,
    /// Error after each iteration, when requested.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct NmfOptions {
    pub iterations: usize,
    pub record_history: bool,
}

impl Default for NmfOptions {
    fn default() -> Self {
        NmfOptions {
            iterations: DEFAULT_NMF_ITERATIONS,
            record_history: false,
        }
    }
}

pub fn frobenius_error(x: &Matrix, w: &Matrix, h: &Matrix) -> Result<f64> {
    let approx = w.matmul(h)?;
    Ok(x.zip_map(&approx, |a, b| a - b)?.frobenius_norm())
}

/// Rank-`k` factorisation `X ≈ WH` by Lee–Seung multiplicative updates for
/// the Frobenius loss.
pub fn nmf_fit(x: &Matrix, k: usize, options: NmfOptions, rng: &mut Rng) -> Result<NmfFactors> {
    if k == 0 {
        return Err(Error::precondition("NMF rank must be at least 1"));
    }
    if let Some(pos) = x.as_slice().iter().position(|&v| v < 0.0) {
        return Err(Error::precondition(format!(
            "NMF input must be non-negative; found {} at ({}, {})",
            x.as_slice()[pos],
            pos / x.cols(),
            pos % x.cols()
        )));
    }
    let (n, d) = x.shape();
    let scale = (x.mean() / k as f64).sqrt();
    // (0, 1] uniform draws scaled by sqrt(mean/k)
    let mut init = |rows, cols| {
        Matrix::from_fn(rows, cols, |_, _| {
            ((1.0 - rng.uniform()) * scale).max(NMF_FLOOR)
        })
    };
    let mut w = init(n, k);
    let mut h = init(k, d);

    let mut history = Vec::new();
    for _ in 0..options.iterations {
        // H ← H ⊙ (WᵀX) / (WᵀW H)
        let num = w.matmul_tn(x)?;
        let den = w.matmul_tn(&w)?.matmul(&h)?;
        multiplicative_update(&mut h, &num, &den);
        // W ← W ⊙ (XHᵀ) / (W HHᵀ)
        let num = x.matmul_nt(&h)?;
        let den = w.matmul(&h.matmul_nt(&h)?)?;
        multiplicative_update(&mut w, &num, &den);
        if options.record_history {
            history.push(frobenius_error(x, &w, &h)?);
        }
    }
    let final_frobenius_error = match history.last() {
        Some(&e) => e,
        None => frobenius_error(x, &w, &h)?,
    };
    Ok(NmfFactors {
        w,
        h,
        final_frobenius_error,
        history,
    })
}

fn multiplicative_update(target: &mut Matrix, num: &Matrix, den: &Matrix) {
    for ((t, &a), &b) in target
        .as_mut_slice()
        .iter_mut()
        .zip(num.as_slice())
        .zip(den.as_slice())
    {
        if b > 0.0 {
            *t *= a / b;
        }
        *t = t.max(NMF_FLOOR);
    }
}
