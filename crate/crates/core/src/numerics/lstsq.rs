//! Householder QR factorizations and the least-squares solver built on them.

use super::{Matrix, RandomSource};
use crate::error::{CbmError, Result};

/// Designs whose estimated `cond(XᵀX)` exceeds this are rejected.
pub const CONDITION_THRESHOLD: f64 = 1e12;

/// Computes a Householder reflector for `x` in place.
///
/// On return `x[0]` holds the signed norm `alpha` and `x[1..]` the tail of `v`
/// (with an implicit leading 1). Returns `beta` with `H = I - beta·v·vᵀ`,
/// or 0 when no reflection is needed.
fn householder(x: &mut [f64]) -> f64 {
    let tail: f64 = x[1..].iter().map(|v| v * v).sum();
    if tail == 0.0 {
        return 0.0;
    }
    let norm = (x[0] * x[0] + tail).sqrt();
    let alpha = if x[0] > 0.0 { -norm } else { norm };
    let v0 = x[0] - alpha;
    for v in &mut x[1..] {
        *v /= v0;
    }
    x[0] = alpha;
    // beta = 2 / (vᵀv) with v = (1, x[1..])
    let vtv = 1.0 + tail / (v0 * v0);
    2.0 / vtv
}

/// Column-major working copy used by the factorizations.
struct ColumnMajor {
    cols: Vec<Vec<f64>>,
}

impl ColumnMajor {
    fn from(m: &Matrix) -> Self {
        Self {
            cols: (0..m.cols()).map(|j| m.column(j)).collect(),
        }
    }

    /// Applies the reflector stored in rows `k..` of `reflector` to `target`.
    fn reflect(reflector: &[f64], beta: f64, k: usize, target: &mut [f64]) {
        if beta == 0.0 {
            return;
        }
        let mut dot = target[k];
        for i in k + 1..target.len() {
            dot += reflector[i] * target[i];
        }
        let s = beta * dot;
        target[k] -= s;
        for i in k + 1..target.len() {
            target[i] -= s * reflector[i];
        }
    }
}

/// Least-squares coefficients minimizing `‖X·W − Y‖²`.
///
/// Uses Householder QR with column pivoting. The condition number of `XᵀX` is
/// estimated as `(|r₁₁| / |r_pp|)²` from the pivoted triangular factor, and
/// anything above [`CONDITION_THRESHOLD`] fails with `SingularDesign`.
pub fn least_squares_fit(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let (n, p) = x.shape();
    if y.rows() != n {
        return Err(CbmError::InvalidShape(format!(
            "design has {n} rows but response has {}",
            y.rows()
        )));
    }
    if p == 0 || n < p {
        return Err(CbmError::InvalidShape(format!(
            "least squares needs n >= p >= 1, got n={n}, p={p}"
        )));
    }
    let q = y.cols();
    let mut a = ColumnMajor::from(x);
    let mut rhs = ColumnMajor::from(y);
    let mut perm: Vec<usize> = (0..p).collect();
    let mut betas = vec![0.0; p];

    for k in 0..p {
        // pivot: remaining column with the largest trailing norm
        let mut best = k;
        let mut best_norm = -1.0;
        for j in k..p {
            let s: f64 = a.cols[j][k..].iter().map(|v| v * v).sum();
            if s > best_norm {
                best_norm = s;
                best = j;
            }
        }
        a.cols.swap(k, best);
        perm.swap(k, best);

        let beta = householder(&mut a.cols[k][k..]);
        betas[k] = beta;
        let (head, tail) = a.cols.split_at_mut(k + 1);
        let reflector = &head[k];
        for col in tail.iter_mut() {
            ColumnMajor::reflect(reflector, beta, k, col);
        }
        for col in rhs.cols.iter_mut() {
            ColumnMajor::reflect(reflector, beta, k, col);
        }
    }

    let r_max = a.cols[0][0].abs();
    let r_min = a.cols[p - 1][p - 1].abs();
    let ratio = r_max / r_min;
    let condition = ratio * ratio;
    if !condition.is_finite() || condition > CONDITION_THRESHOLD {
        return Err(CbmError::SingularDesign {
            condition: if condition.is_nan() { f64::INFINITY } else { condition },
            threshold: CONDITION_THRESHOLD,
        });
    }

    let mut w = Matrix::zeros(p, q);
    for (c, b) in rhs.cols.iter().enumerate() {
        let mut z = vec![0.0; p];
        for i in (0..p).rev() {
            let mut s = b[i];
            for j in i + 1..p {
                s -= a.cols[j][i] * z[j];
            }
            z[i] = s / a.cols[i][i];
        }
        for (i, &zi) in z.iter().enumerate() {
            w[(perm[i], c)] = zi;
        }
    }
    Ok(w)
}

/// Thin QR of a tall matrix: returns `(Q, R)` with `Q` of shape `n×p` having
/// orthonormal columns and `R` upper triangular with a non-negative diagonal.
pub fn thin_qr(m: &Matrix) -> Result<(Matrix, Matrix)> {
    let (n, p) = m.shape();
    if p > n {
        return Err(CbmError::InvalidShape(format!(
            "thin QR needs rows >= cols, got {n}x{p}"
        )));
    }
    let mut a = ColumnMajor::from(m);
    let mut betas = vec![0.0; p];
    for k in 0..p {
        let beta = householder(&mut a.cols[k][k..]);
        betas[k] = beta;
        let (head, tail) = a.cols.split_at_mut(k + 1);
        for col in tail.iter_mut() {
            ColumnMajor::reflect(&head[k], beta, k, col);
        }
    }
    let mut r = Matrix::zeros(p, p);
    for j in 0..p {
        for i in 0..=j {
            r[(i, j)] = a.cols[j][i];
        }
    }
    // Q = H_0 H_1 ... H_{p-1} applied to the first p unit vectors.
    let mut q = Matrix::zeros(n, p);
    for j in 0..p {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        for k in (0..p).rev() {
            ColumnMajor::reflect(&a.cols[k], betas[k], k, &mut e);
        }
        for i in 0..n {
            q[(i, j)] = e[i];
        }
    }
    // non-negative diagonal of R
    for j in 0..p {
        if r[(j, j)] < 0.0 {
            for i in 0..n {
                q[(i, j)] = -q[(i, j)];
            }
            for c in j..p {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    Ok((q, r))
}

/// A `d×k` matrix with orthonormal columns, drawn uniformly (Haar) by
/// orthonormalizing a Gaussian matrix.
pub fn random_orthonormal_columns(d: usize, k: usize, rng: &mut RandomSource) -> Result<Matrix> {
    if k > d || k == 0 {
        return Err(CbmError::InvalidShape(format!(
            "orthonormal columns need 1 <= k <= d, got d={d}, k={k}"
        )));
    }
    loop {
        let g = super::sample_gaussian_matrix(d, k, 1.0, rng);
        let (q, r) = thin_qr(&g)?;
        // a Gaussian draw is rank-deficient with probability zero; redraw if it happens
        if (0..k).all(|j| r[(j, j)] > 1e-12) {
            return Ok(q);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_design_returns_response() {
        let y = Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0], [7.0, 0.0]]).unwrap();
        let w = least_squares_fit(&Matrix::identity(3), &y).unwrap();
        for (a, b) in w.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn noiseless_recovery() {
        let mut rng = RandomSource::new(11);
        let x = super::super::sample_gaussian_matrix(30, 4, 1.0, &mut rng);
        let w = Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0], [-3.0, 0.0], [0.0, 0.125]]).unwrap();
        let y = x.matmul(&w).unwrap();
        let fit = least_squares_fit(&x, &y).unwrap();
        assert!(fit.sub(&w).unwrap().max_abs() < 1e-9);
    }

    #[test]
    fn collinear_design_is_singular() {
        let x = Matrix::from_rows(&[[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]).unwrap();
        let y = Matrix::column_vector(&[1.0, 2.0, 3.0]);
        assert!(matches!(
            least_squares_fit(&x, &y),
            Err(CbmError::SingularDesign { .. })
        ));
    }

    #[test]
    fn zero_design_is_singular() {
        let x = Matrix::zeros(4, 2);
        let y = Matrix::column_vector(&[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(
            least_squares_fit(&x, &y),
            Err(CbmError::SingularDesign { .. })
        ));
    }

    #[test]
    fn underdetermined_rejected() {
        let x = Matrix::zeros(2, 3);
        let y = Matrix::zeros(2, 1);
        assert!(matches!(least_squares_fit(&x, &y), Err(CbmError::InvalidShape(_))));
    }

    #[test]
    fn orthonormal_one_by_one() {
        let mut rng = RandomSource::new(5);
        let b = random_orthonormal_columns(1, 1, &mut rng).unwrap();
        assert!((b[(0, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthonormal_gram_is_identity() {
        let mut rng = RandomSource::new(9);
        let b = random_orthonormal_columns(5, 2, &mut rng).unwrap();
        assert!(b.gram().sub(&Matrix::identity(2)).unwrap().max_abs() < 1e-10);
        assert!(matches!(
            random_orthonormal_columns(2, 3, &mut rng),
            Err(CbmError::InvalidShape(_))
        ));
    }

    #[test]
    fn thin_qr_reconstructs() {
        let mut rng = RandomSource::new(1);
        let m = super::super::sample_gaussian_matrix(7, 3, 1.0, &mut rng);
        let (q, r) = thin_qr(&m).unwrap();
        assert!(q.matmul(&r).unwrap().sub(&m).unwrap().max_abs() < 1e-12);
    }
}
