//! Dense linear algebra, seeded sampling, least squares and gradient checking.
//!
//! Everything here is `f64` and allocation-light; the matrices involved are at
//! most a few thousand rows by a few dozen columns.

mod lstsq;
mod matrix;
mod rng;

pub use lstsq::{least_squares_fit, random_orthonormal_columns, thin_qr, CONDITION_THRESHOLD};
pub use matrix::Matrix;
pub use rng::{RandomSource, RNG_ALGORITHM};

/// Matrix of i.i.d. `N(0, stddev²)` entries, filled row by row.
pub fn sample_gaussian_matrix(rows: usize, cols: usize, stddev: f64, rng: &mut RandomSource) -> Matrix {
    assert!(stddev >= 0.0, "stddev must be non-negative");
    let data = (0..rows * cols).map(|_| stddev * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape is consistent by construction")
}

/// Central-difference gradient of `f` at `point`.
pub fn finite_difference_gradient<F>(f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(step > 0.0, "step must be positive");
    let mut probe = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the usual gradient-check metric.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for fewer than two values.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}
