use crate::error::{Error, Result};
use crate::numerics::Matrix;

const MAX_SWEEPS: usize = 60;

/// Thin singular value decomposition `X = U diag(σ) Vᵀ`.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `N × r`, orthonormal columns (zero columns for zero singular values).
    pub u: Matrix,
    /// `r` values, descending.
    pub sigma: Vec<f64>,
    /// `D × r`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    /// `U_k diag(σ_k) V_kᵀ`.
    pub fn reconstruct(&self, k: usize) -> Matrix {
        let (n, d) = (self.u.rows(), self.v.rows());
        Matrix::from_fn(n, d, |i, j| {
            (0..k)
                .map(|t| self.u[(i, t)] * self.sigma[t] * self.v[(j, t)])
                .sum()
        })
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Orthogonalises the columns of whichever of `X`, `Xᵀ` has fewer columns,
/// so the work is `O(min(N,D)² · max(N,D))` per sweep. Deterministic. Each
/// right singular vector is signed so that its largest-magnitude entry is
/// positive.
pub fn thin_svd(x: &Matrix) -> Svd {
    let (n, d) = x.shape();
    let transposed = n < d;
    // columns of A, each of length `len`
    let (len, count) = if transposed { (d, n) } else { (n, d) };
    let mut cols: Vec<Vec<f64>> = (0..count)
        .map(|c| {
            if transposed {
                x.row(c).to_vec()
            } else {
                x.column(c)
            }
        })
        .collect();
    let mut rot: Vec<Vec<f64>> = (0..count)
        .map(|c| {
            let mut e = vec![0.0; count];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..count {
            for q in p + 1..count {
                let (alpha, beta, gamma) = {
                    let (a, b) = (&cols[p], &cols[q]);
                    let mut s = (0.0, 0.0, 0.0);
                    for (x, y) in a.iter().zip(b) {
                        s.0 += x * x;
                        s.1 += y * y;
                        s.2 += x * y;
                    }
                    s
                };
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut rot, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..count).collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let sigma: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    // A = B Rᵀ with B = A·R having orthogonal columns of norm σ.
    // Untransposed: X = (B/σ) σ Rᵀ → U = B/σ, V = R.
    // Transposed:   Xᵀ = (B/σ) σ Rᵀ → X = R σ (B/σ)ᵀ → U = R, V = B/σ.
    let normalized = |i: usize| -> Vec<f64> {
        if norms[i] > 0.0 {
            cols[i].iter().map(|v| v / norms[i]).collect()
        } else {
            vec![0.0; len]
        }
    };
    let mut u = Matrix::zeros(n, count);
    let mut v = Matrix::zeros(d, count);
    for (t, &i) in order.iter().enumerate() {
        let (ucol, vcol) = if transposed {
            (rot[i].clone(), normalized(i))
        } else {
            (normalized(i), rot[i].clone())
        };
        let pivot = vcol.iter().copied().fold(
            0.0f64,
            |best, x| if x.abs() > best.abs() { x } else { best },
        );
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, val) in ucol.iter().enumerate() {
            u[(r, t)] = sign * val;
        }
        for (r, val) in vcol.iter().enumerate() {
            v[(r, t)] = sign * val;
        }
    }
    Svd { u, sigma, v }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (a, b) = (&mut left[p], &mut right[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Feature coordinates in the top-`k` singular subspace: row `j` is
/// `(diag(σ_k) V_kᵀ)[:, j]`.
pub fn svd_feature_coordinates(x: &Matrix, k: usize) -> Result<Matrix> {
    let (n, d) = x.shape();
    if k == 0 || k > n.min(d) {
        return Err(Error::precondition(format!(
            "SVD embedding size {k} must be in 1..={}",
            n.min(d)
        )));
    }
    let svd = thin_svd(x);
    Ok(Matrix::from_fn(d, k, |j, t| svd.sigma[t] * svd.v[(j, t)]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_fn(n, d, |_, _| rng.uniform())
    }

    fn assert_orthonormal(m: &Matrix, tol: f64) {
        let g = m.matmul_tn(m).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(m.cols())).unwrap() < tol);
    }

    #[test]
    fn diagonal_matrix() {
        let x = Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let e = svd_feature_coordinates(&x, 2).unwrap();
        assert!(
            e.max_abs_diff(&Matrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap())
                .unwrap()
                < 1e-12
        );
    }

    #[test]
    fn reconstruction_wide_and_tall() {
        for (n, d) in [(6, 15), (15, 6), (7, 7)] {
            let x = random(n, d, (n * d) as u64);
            let svd = thin_svd(&x);
            assert!(svd.sigma.windows(2).all(|w| w[0] >= w[1]));
            let r = x.zip_map(&svd.reconstruct(n.min(d)), |a, b| a - b).unwrap();
            assert!(r.frobenius_norm() < 1e-8);
            assert_orthonormal(&svd.u, 1e-10);
            assert_orthonormal(&svd.v, 1e-10);
        }
    }

    #[test]
    fn exact_low_rank_recovered_with_k_equal_rank() {
        let a = random(10, 3, 1);
        let b = random(3, 25, 2);
        let x = a.matmul(&b).unwrap();
        let svd = thin_svd(&x);
        assert!(svd.sigma[3] < 1e-10);
        let r = x.zip_map(&svd.reconstruct(3), |a, b| a - b).unwrap();
        assert!(r.frobenius_norm() < 1e-8);
    }

    #[test]
    fn embedding_norms_equal_projected_columns() {
        let x = random(8, 20, 9);
        let k = 4;
        let e = svd_feature_coordinates(&x, k).unwrap();
        let svd = thin_svd(&x);
        let mut uk = Matrix::zeros(8, k);
        for i in 0..8 {
            for t in 0..k {
                uk[(i, t)] = svd.u[(i, t)];
            }
        }
        let proj = uk.matmul_tn(&x).unwrap();
        for j in 0..20 {
            let a = e.row(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            let b = proj.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn largest_entry_of_each_right_vector_is_positive() {
        let x = random(5, 9, 3).map(|v| v - 0.5);
        let svd = thin_svd(&x);
        for t in 0..svd.v.cols() {
            let col = svd.v.column(t);
            let pivot = col
                .iter()
                .copied()
                .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn k_out_of_range() {
        let x = random(3, 5, 0);
        assert!(svd_feature_coordinates(&x, 0).is_err());
        assert!(svd_feature_coordinates(&x, 4).is_err());
    }
}
