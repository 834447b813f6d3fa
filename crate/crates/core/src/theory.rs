//! Closed-form risks of least-squares independent-bottleneck and standard
//! estimators in the well-specified linear-Gaussian model
//!
//! ```text
//! X ~ N(0, σX² I_d),   C = XB + ε₁,  ε₁ ~ N(0, σC² I_k),   Y = C·b + ε₂,  ε₂ ~ N(0, σY²)
//! ```
//!
//! with `BᵀB = I_k` and `‖b‖ = 1`, plus a Monte Carlo oracle that checks them.
//!
//! The independent bottleneck fits `B̂` by regressing C on X (dataset 1) and
//! `b̂` by regressing Y on C (dataset 2), predicting `X·B̂·b̂`. The standard
//! model regresses Y on X directly (`v̂`), targeting `v = B·b`. For any fitted
//! coefficient vector `w` the exact risk is `σC² + σY² + σX²·‖v − w‖²`.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::generate::linear_gaussian_arrays;
use crate::error::{CbmError, Result};
use crate::numerics::{least_squares_fit, mean, random_orthonormal_columns, sample_sd, Matrix, RandomSource};

const CONSTRAINT_TOLERANCE: f64 = 1e-10;

/// Parameters of the linear-Gaussian generative model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSetting {
    d: usize,
    k: usize,
    sigma_x2: f64,
    sigma_c2: f64,
    sigma_y2: f64,
    /// `B`, `d×k` with orthonormal columns.
    concept_map: Matrix,
    /// `b`, unit norm.
    concept_weights: Vec<f64>,
}

impl LinearSetting {
    pub fn new(
        sigma_x2: f64,
        sigma_c2: f64,
        sigma_y2: f64,
        concept_map: Matrix,
        concept_weights: Vec<f64>,
    ) -> Result<Self> {
        let s = Self {
            d: concept_map.rows(),
            k: concept_map.cols(),
            sigma_x2,
            sigma_c2,
            sigma_y2,
            concept_map,
            concept_weights,
        };
        s.validate()?;
        Ok(s)
    }

    /// Draws `B` uniformly among `d×k` orthonormal frames and `b` uniformly on
    /// the unit sphere. Noise levels are given as standard deviations.
    pub fn random(
        d: usize,
        k: usize,
        sigma_x: f64,
        sigma_c: f64,
        sigma_y: f64,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let concept_map = random_orthonormal_columns(d, k, rng)?;
        let raw: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let concept_weights = raw.into_iter().map(|v| v / norm).collect();
        Self::new(
            sigma_x * sigma_x,
            sigma_c * sigma_c,
            sigma_y * sigma_y,
            concept_map,
            concept_weights,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CbmError::InvalidShape(m));
        if self.k == 0 || self.k > self.d {
            return bad(format!("need 1 <= k <= d, got d={}, k={}", self.d, self.k));
        }
        if self.concept_map.shape() != (self.d, self.k) || self.concept_weights.len() != self.k {
            return bad("B must be d×k and b length k".into());
        }
        for v in [self.sigma_x2, self.sigma_c2, self.sigma_y2] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("variances must be finite and non-negative, got {v}"));
            }
        }
        let gram_err = self
            .concept_map
            .gram()
            .sub(&Matrix::identity(self.k))?
            .max_abs();
        if gram_err > CONSTRAINT_TOLERANCE {
            return bad(format!("BᵀB deviates from I by {gram_err:.2e}"));
        }
        let norm2: f64 = self.concept_weights.iter().map(|v| v * v).sum();
        if (norm2 - 1.0).abs() > CONSTRAINT_TOLERANCE {
            return bad(format!("‖b‖² = {norm2}, expected 1"));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sigma_x2(&self) -> f64 {
        self.sigma_x2
    }

    pub fn sigma_c2(&self) -> f64 {
        self.sigma_c2
    }

    pub fn sigma_y2(&self) -> f64 {
        self.sigma_y2
    }

    pub fn concept_map(&self) -> &Matrix {
        &self.concept_map
    }

    pub fn concept_weights(&self) -> &[f64] {
        &self.concept_weights
    }

    /// `v = B·b`, the coefficients of `E[Y | X]`.
    pub fn v(&self) -> Vec<f64> {
        self.concept_map
            .matvec(&self.concept_weights)
            .expect("validated shapes")
    }
}

/// Bayes risk `E[(Y − E[Y|X])²] = σC² + σY²`.
pub fn optimal_risk(s: &LinearSetting) -> f64 {
    s.sigma_c2 + s.sigma_y2
}

/// Expected squared error of least squares of Y on X from `n` points:
/// `σC² + σY² + d(σC² + σY²)/(n − d − 1)`.
pub fn risk_standard(s: &LinearSetting, n: usize) -> Result<f64> {
    if n <= s.d + 1 {
        return Err(CbmError::DegenerateSampleSize(format!(
            "standard risk needs n > d + 1 = {}, got {n}",
            s.d + 1
        )));
    }
    let opt = optimal_risk(s);
    Ok(opt + s.d as f64 * opt / (n - s.d - 1) as f64)
}

/// Expected squared error of the two-stage least-squares bottleneck with `n1`
/// points for X→C and `n2` points for C→Y:
///
/// ```text
/// σC² + σY² + σY²·σX²/(σX²+σC²)·k/(n₂−k−1) + σC²·d/(n₁−d−1)
///           + k·σY²·σC²/(σX²+σC²) · 1/(n₂−k−1) · d/(n₁−d−1)
/// ```
///
/// The last term is the expectation of `‖(X̲ᵀX̲)⁻¹X̲ᵀε̲₁ · (C̄ᵀC̄)⁻¹C̄ᵀε̄₂‖²`; the
/// inner `ε̲₁ᵀM ε̲₁` is `σC²·tr(M)·I_k`, whose trace against `E[(C̄ᵀC̄)⁻¹]`
/// contributes the factor `k`.
pub fn risk_independent(s: &LinearSetting, n1: usize, n2: usize) -> Result<f64> {
    if n1 <= s.d + 1 || n2 <= s.k + 1 {
        return Err(CbmError::DegenerateSampleSize(format!(
            "independent risk needs n1 > d + 1 = {} and n2 > k + 1 = {}, got n1={n1}, n2={n2}",
            s.d + 1,
            s.k + 1
        )));
    }
    let concept_var = s.sigma_x2 + s.sigma_c2;
    if concept_var == 0.0 {
        return Err(CbmError::InvalidConfig("σX² + σC² = 0: concepts are identically zero".into()));
    }
    let (d, k) = (s.d as f64, s.k as f64);
    let stage2 = 1.0 / (n2 - s.k - 1) as f64;
    let stage1 = d / (n1 - s.d - 1) as f64;
    Ok(optimal_risk(s)
        + s.sigma_y2 * s.sigma_x2 / concept_var * k * stage2
        + s.sigma_c2 * stage1
        + k * s.sigma_y2 * s.sigma_c2 / concept_var * stage2 * stage1)
}

/// Ratio of excess risks (independent over standard) with `n₁ = n₂ = n`.
pub fn excess_error_ratio(s: &LinearSetting, n: usize) -> Result<f64> {
    let opt = optimal_risk(s);
    let std_excess = risk_standard(s, n)? - opt;
    if std_excess == 0.0 {
        return Err(CbmError::InvalidConfig("σC² + σY² = 0: no excess error to compare".into()));
    }
    Ok((risk_independent(s, n, n)? - opt) / std_excess)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioLimit {
    /// `σY²/(σC²+σY²) · σX²/(σX²+σC²) · k/d + σC²/(σC²+σY²)`
    pub exact: f64,
    /// `((k/d)·σY² + σC²) / (σY² + σC²)`
    pub bound: f64,
}

/// Large-sample limit of [`excess_error_ratio`] and its simpler upper bound.
pub fn excess_error_ratio_limit(s: &LinearSetting) -> Result<RatioLimit> {
    let noise = s.sigma_c2 + s.sigma_y2;
    let concept_var = s.sigma_x2 + s.sigma_c2;
    if noise == 0.0 || concept_var == 0.0 {
        return Err(CbmError::InvalidConfig(
            "ratio limit undefined when σC² + σY² = 0 or σX² + σC² = 0".into(),
        ));
    }
    let kd = s.k as f64 / s.d as f64;
    Ok(RatioLimit {
        exact: s.sigma_y2 / noise * (s.sigma_x2 / concept_var) * kd + s.sigma_c2 / noise,
        bound: (kd * s.sigma_y2 + s.sigma_c2) / noise,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RiskEstimator {
    /// `σC² + σY² + σX²‖v − ŵ‖²` from the fitted coefficients.
    Exact,
    /// Mean squared error on a fresh draw of `n_eval ≥ 10·d` points.
    HoldOut { n_eval: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

impl Estimate {
    fn from_samples(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            std_error: sample_sd(values) / (values.len() as f64).sqrt(),
        }
    }

    /// `|mean − target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        if self.std_error == 0.0 {
            return if self.mean == target { 0.0 } else { f64::INFINITY };
        }
        (self.mean - target).abs() / self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    pub n1: usize,
    pub n2: usize,
    pub n_std: usize,
    pub trials: usize,
    pub seed: u64,
    pub estimator: RiskEstimator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub independent: Estimate,
    pub standard: Estimate,
    /// Risk of the true-coefficient predictor `x·v`.
    pub optimal: Estimate,
    pub completed_trials: usize,
    /// Trials skipped because a least-squares design was singular.
    pub failed_trials: Vec<usize>,
}

impl MonteCarloReport {
    /// Empirical `(indep − optimal)/(standard − optimal)` using the closed-form optimum.
    pub fn excess_ratio(&self, optimal: f64) -> f64 {
        (self.independent.mean - optimal) / (self.standard.mean - optimal)
    }
}

struct TrialRisks {
    independent: f64,
    standard: f64,
    optimal: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn run_trial(s: &LinearSetting, cfg: &MonteCarloConfig, trial: usize) -> Result<TrialRisks> {
    let mut rng = RandomSource::with_stream(cfg.seed, trial as u64);
    let (x1, c1, _) = linear_gaussian_arrays(s, cfg.n1, &mut rng)?;
    let (_, c2, y2) = linear_gaussian_arrays(s, cfg.n2, &mut rng)?;
    let (x3, _, y3) = linear_gaussian_arrays(s, cfg.n_std, &mut rng)?;

    let b_hat = least_squares_fit(&x1, &c1)?;
    let w_hat = least_squares_fit(&c2, &Matrix::column_vector(&y2))?;
    let w_indep = b_hat.matvec(w_hat.as_slice())?;
    let v_hat = least_squares_fit(&x3, &Matrix::column_vector(&y3))?.into_vec();
    let v = s.v();

    match cfg.estimator {
        RiskEstimator::Exact => {
            let opt = optimal_risk(s);
            Ok(TrialRisks {
                independent: opt + s.sigma_x2 * squared_distance(&v, &w_indep),
                standard: opt + s.sigma_x2 * squared_distance(&v, &v_hat),
                optimal: opt,
            })
        }
        RiskEstimator::HoldOut { n_eval } => {
            let (xe, _, ye) = linear_gaussian_arrays(s, n_eval, &mut rng)?;
            let mse = |w: &[f64]| -> Result<f64> {
                let pred = xe.matvec(w)?;
                Ok(pred.iter().zip(&ye).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n_eval as f64)
            };
            Ok(TrialRisks {
                independent: mse(&w_indep)?,
                standard: mse(&v_hat)?,
                optimal: mse(&v)?,
            })
        }
    }
}

/// Monte Carlo estimates of the risks of both estimators.
///
/// Trial `t` draws from `RandomSource::with_stream(seed, t)`, so the result
/// does not depend on how trials are scheduled across threads. Trials whose
/// designs are singular are skipped and listed; if every trial fails the
/// first error is returned.
pub fn monte_carlo_risks(s: &LinearSetting, cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    s.validate()?;
    if cfg.trials == 0 {
        return Err(CbmError::InvalidConfig("trials must be positive".into()));
    }
    if cfg.n1 < s.d || cfg.n2 < s.k || cfg.n_std < s.d {
        return Err(CbmError::DegenerateSampleSize(format!(
            "need n1, n_std >= d = {} and n2 >= k = {}",
            s.d, s.k
        )));
    }
    if let RiskEstimator::HoldOut { n_eval } = cfg.estimator {
        if n_eval < 10 * s.d {
            return Err(CbmError::InvalidConfig(format!(
                "hold-out evaluation needs at least 10·d = {} points",
                10 * s.d
            )));
        }
    }
    let outcomes: Vec<Result<TrialRisks>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(s, cfg, t))
        .collect();

    let mut indep = Vec::with_capacity(cfg.trials);
    let mut stand = Vec::with_capacity(cfg.trials);
    let mut opt = Vec::with_capacity(cfg.trials);
    let mut failed = Vec::new();
    let mut first_err = None;
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => {
                indep.push(r.independent);
                stand.push(r.standard);
                opt.push(r.optimal);
            }
            Err(e @ CbmError::SingularDesign { .. }) => {
                failed.push(t);
                first_err.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    if indep.is_empty() {
        return Err(first_err.expect("at least one trial ran"));
    }
    Ok(MonteCarloReport {
        independent: Estimate::from_samples(&indep),
        standard: Estimate::from_samples(&stand),
        optimal: Estimate::from_samples(&opt),
        completed_trials: indep.len(),
        failed_trials: failed,
    })
}

/// One line of a theory sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub k: usize,
    pub sigma_x2: f64,
    pub sigma_c2: f64,
    pub sigma_y2: f64,
    pub n: usize,
    pub risk_optimal: f64,
    pub risk_standard: f64,
    pub risk_independent: f64,
    pub mc_standard: f64,
    pub mc_standard_se: f64,
    pub mc_independent: f64,
    pub mc_independent_se: f64,
    pub ratio_closed_form: f64,
    pub ratio_mc: f64,
    pub ratio_limit: f64,
    pub ratio_bound: f64,
    pub failed_trials: usize,
}

/// Closed forms and exact-estimator Monte Carlo at `n₁ = n₂ = n_std = n`.
pub fn sweep_row(s: &LinearSetting, n: usize, trials: usize, seed: u64) -> Result<SweepRow> {
    let opt = optimal_risk(s);
    let limit = excess_error_ratio_limit(s)?;
    let mc = monte_carlo_risks(
        s,
        &MonteCarloConfig {
            n1: n,
            n2: n,
            n_std: n,
            trials,
            seed,
            estimator: RiskEstimator::Exact,
        },
    )?;
    Ok(SweepRow {
        d: s.d,
        k: s.k,
        sigma_x2: s.sigma_x2,
        sigma_c2: s.sigma_c2,
        sigma_y2: s.sigma_y2,
        n,
        risk_optimal: opt,
        risk_standard: risk_standard(s, n)?,
        risk_independent: risk_independent(s, n, n)?,
        mc_standard: mc.standard.mean,
        mc_standard_se: mc.standard.std_error,
        mc_independent: mc.independent.mean,
        mc_independent_se: mc.independent.std_error,
        ratio_closed_form: excess_error_ratio(s, n)?,
        ratio_mc: mc.excess_ratio(opt),
        ratio_limit: limit.exact,
        ratio_bound: limit.bound,
        failed_trials: mc.failed_trials.len(),
    })
}

pub const SWEEP_HEADER: &str = "d,k,sigma_x2,sigma_c2,sigma_y2,n,risk_optimal,risk_standard,\
risk_independent,mc_standard,mc_standard_se,mc_independent,mc_independent_se,ratio_closed_form,\
ratio_mc,ratio_limit,ratio_bound,failed_trials";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    use crate::data::io::format_real as f;
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.d,
            r.k,
            f(r.sigma_x2),
            f(r.sigma_c2),
            f(r.sigma_y2),
            r.n,
            f(r.risk_optimal),
            f(r.risk_standard),
            f(r.risk_independent),
            f(r.mc_standard),
            f(r.mc_standard_se),
            f(r.mc_independent),
            f(r.mc_independent_se),
            f(r.ratio_closed_form),
            f(r.ratio_mc),
            f(r.ratio_limit),
            f(r.ratio_bound),
            r.failed_trials
        )?;
    }
    Ok(())
}

pub fn save_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_sweep_csv(rows, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setting(d: usize, k: usize, sx: f64, sc: f64, sy: f64) -> LinearSetting {
        LinearSetting::random(d, k, sx, sc, sy, &mut RandomSource::new(7)).unwrap()
    }

    #[test]
    fn optimal_risk_sums_noise() {
        assert_eq!(optimal_risk(&setting(3, 1, 1.0, 0.0, 0.0)), 0.0);
        assert!((optimal_risk(&setting(3, 1, 1.0, 0.5, 0.75f64.sqrt())) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn standard_risk_hand_value() {
        // d=2, n=13, σC²=σY²=0.5 → 1 + 2/10
        let s = setting(2, 1, 1.0, 0.5f64.sqrt(), 0.5f64.sqrt());
        assert!((risk_standard(&s, 13).unwrap() - 1.2).abs() < 1e-12);
        assert!(matches!(risk_standard(&s, 3), Err(CbmError::DegenerateSampleSize(_))));
    }

    #[test]
    fn independent_risk_without_concept_noise() {
        let s = setting(6, 2, 1.3, 0.0, 0.8);
        let (n1, n2) = (40, 25);
        let sy2 = 0.64;
        let expected = sy2 + sy2 * 2.0 / (n2 - 2 - 1) as f64;
        assert!((risk_independent(&s, n1, n2).unwrap() - expected).abs() < 1e-12);
        assert!(risk_independent(&s, 7, 25).is_err());
        assert!(risk_independent(&s, 40, 3).is_err());
    }

    #[test]
    fn risks_tend_to_optimal() {
        let s = setting(10, 3, 1.0, 0.4, 0.9);
        let opt = optimal_risk(&s);
        assert!((risk_standard(&s, 100_000_000).unwrap() - opt).abs() < 1e-6);
        assert!((risk_independent(&s, 100_000_000, 100_000_000).unwrap() - opt).abs() < 1e-6);
    }

    #[test]
    fn ratio_limit_special_cases() {
        let r = excess_error_ratio_limit(&setting(8, 4, 1.0, 0.0, 1.0)).unwrap();
        assert!((r.exact - 0.5).abs() < 1e-15 && (r.bound - 0.5).abs() < 1e-15);
        let r = excess_error_ratio_limit(&setting(5, 5, 1.0, 0.0, 2.0)).unwrap();
        assert!((r.exact - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ratio_tends_to_limit() {
        let s = setting(20, 3, 1.0, 0.3, 1.0);
        let lim = excess_error_ratio_limit(&s).unwrap().exact;
        assert!((excess_error_ratio(&s, 10_000_000).unwrap() - lim).abs() < 1e-5);
    }

    #[test]
    fn noiseless_monte_carlo_is_zero() {
        let s = setting(5, 2, 1.0, 0.0, 0.0);
        let cfg = MonteCarloConfig {
            n1: 20,
            n2: 20,
            n_std: 20,
            trials: 10,
            seed: 1,
            estimator: RiskEstimator::HoldOut { n_eval: 50 },
        };
        let r = monte_carlo_risks(&s, &cfg).unwrap();
        assert!(r.independent.mean.abs() < 1e-12);
        assert!(r.standard.mean.abs() < 1e-12);
        assert!(r.optimal.mean.abs() < 1e-12);
    }

    #[test]
    fn holdout_needs_ten_d_points() {
        let s = setting(5, 2, 1.0, 0.1, 0.1);
        let cfg = MonteCarloConfig {
            n1: 20,
            n2: 20,
            n_std: 20,
            trials: 2,
            seed: 1,
            estimator: RiskEstimator::HoldOut { n_eval: 49 },
        };
        assert!(matches!(monte_carlo_risks(&s, &cfg), Err(CbmError::InvalidConfig(_))));
    }

    #[test]
    fn rejects_non_orthonormal_map() {
        let b = Matrix::from_rows(&[[1.0, 0.0], [0.0, 2.0], [0.0, 0.0]]).unwrap();
        assert!(LinearSetting::new(1.0, 0.1, 0.1, b, vec![1.0, 0.0]).is_err());
    }
}
