//! Linear probes on a representation matrix.
//!
//! Continuous targets get ridge least squares, binary targets get
//! ridge-penalized logistic regression fit by Newton/IRLS. Intercepts are
//! never penalized and the reported weights always live in the raw
//! representation coordinates.
//!
//! Internally the columns are centered and divided by one global scale factor
//! before solving. A single isotropic scale keeps the ridge penalty isotropic in
//! raw coordinates (the penalty is rescaled by `1/s^2`), so the fit stays
//! equivariant under orthogonal maps of the representation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ridge penalty used for logistic probes unless overridden.
pub const DEFAULT_LOGISTIC_RIDGE: f64 = 1e-4;
/// Relative factor for the default least-squares stabilizer.
pub const OLS_RIDGE_FACTOR: f64 = 1e-8;
pub const LOGISTIC_MAX_ITERATIONS: usize = 100;
/// Gradient tolerance per sample: converged means `|grad|_inf < 1e-6 * n`.
pub const LOGISTIC_GRADIENT_TOLERANCE: f64 = 1e-6;

/// Error variance of the standard logistic distribution.
const LOGISTIC_LATENT_VARIANCE: f64 = PI * PI / 3.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProbeError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("at least 2 samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("target is constant")]
    ConstantTarget,
    #[error("binary target must contain both classes")]
    SingleClass,
    #[error("binary target must hold only 0 and 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("invalid ridge penalty {0}")]
    InvalidRidge(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    Ols,
    Logistic,
}

/// A fitted linear probe `t ~ h . weights + intercept`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    /// R^2 for least squares, McKelvey-Zavoina pseudo-R^2 for logistic.
    pub fit_score: f64,
    pub kind: ProbeKind,
    pub solver_iterations: usize,
    pub converged: bool,
}

/// `1e-8 * trace(H^T H) / d`.
pub fn default_ols_ridge(h: &DMatrix<f64>) -> f64 {
    if h.ncols() == 0 {
        return 0.0;
    }
    OLS_RIDGE_FACTOR * h.norm_squared() / h.ncols() as f64
}

/// Centered, globally scaled copy of `h`.
struct Standardized {
    x: DMatrix<f64>,
    mean: DVector<f64>,
    scale: f64,
}

impl Standardized {
    fn new(h: &DMatrix<f64>) -> Self {
        let (n, d) = h.shape();
        let mean = h.row_mean().transpose();
        let mut x = h.clone();
        for mut row in x.row_iter_mut() {
            row -= mean.transpose();
        }
        let scale = (x.norm_squared() / (n * d) as f64).sqrt();
        if scale > 0.0 {
            x /= scale;
        }
        Standardized { x, mean, scale }
    }

    /// Maps scaled-space weights and centered intercept back to raw coordinates.
    fn to_raw(&self, w_scaled: &DVector<f64>, intercept_centered: f64) -> (DVector<f64>, f64) {
        let w = if self.scale > 0.0 {
            w_scaled / self.scale
        } else {
            DVector::zeros(w_scaled.len())
        };
        let b = intercept_centered - w.dot(&self.mean);
        (w, b)
    }
}

fn check_inputs(h: &DMatrix<f64>, t: &[f64]) -> Result<(), ProbeError> {
    if h.nrows() != t.len() {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} representation rows vs {} targets",
            h.nrows(),
            t.len()
        )));
    }
    if h.ncols() == 0 {
        return Err(ProbeError::DimensionMismatch(
            "representation has no columns".into(),
        ));
    }
    if t.len() < 2 {
        return Err(ProbeError::TooFewSamples(t.len()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("representation"));
    }
    if t.iter().any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("targets"));
    }
    Ok(())
}

fn linear_predictors(h: &DMatrix<f64>, w: &DVector<f64>, b: f64) -> Vec<f64> {
    (h * w).iter().map(|v| v + b).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Ridge least squares: minimizes `|t - (H w + b)|^2 + ridge |w|^2`.
///
/// `fit_score` is the in-sample coefficient of multiple determination.
pub fn fit_ols_probe(h: &DMatrix<f64>, t: &[f64], ridge: f64) -> Result<ProbeFit, ProbeError> {
    check_inputs(h, t)?;
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(ProbeError::InvalidRidge(ridge));
    }
    let t_mean = mean(t);
    if t.iter().all(|&v| v == t[0]) {
        return Err(ProbeError::ConstantTarget);
    }
    let std = Standardized::new(h);
    let d = h.ncols();
    let tc = DVector::from_iterator(t.len(), t.iter().map(|v| v - t_mean));

    let (w_scaled, converged) = if std.scale > 0.0 {
        let lambda = ridge / (std.scale * std.scale);
        let svd = std.x.clone().svd(true, true);
        let u = svd.u.as_ref().expect("requested U");
        let v_t = svd.v_t.as_ref().expect("requested V^T");
        let sigma_max = svd.singular_values.max();
        let cutoff = sigma_max * f64::EPSILON * h.nrows().max(d) as f64;
        let ut_t = u.transpose() * &tc;
        let mut coef = DVector::zeros(svd.singular_values.len());
        for (k, &s) in svd.singular_values.iter().enumerate() {
            let denom = s * s + lambda;
            if lambda > 0.0 || s > cutoff {
                coef[k] = s * ut_t[k] / denom;
            }
        }
        let w = v_t.transpose() * coef;
        // normal equations: X^T (t - X w) - lambda w = 0
        let resid = &tc - &std.x * &w;
        let ne = std.x.transpose() * resid - &w * lambda;
        let reference = (std.x.transpose() * &tc).amax().max(f64::MIN_POSITIVE);
        (w, ne.amax() <= 1e-8 * reference)
    } else {
        (DVector::zeros(d), true)
    };

    let (w, b) = std.to_raw(&w_scaled, t_mean);
    let fitted = linear_predictors(h, &w, b);
    let fit_score = r_squared(t, &fitted)?;
    Ok(ProbeFit {
        weights: w.iter().copied().collect(),
        intercept: b,
        fit_score,
        kind: ProbeKind::Ols,
        solver_iterations: 1,
        converged,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Ridge-penalized logistic regression by Newton/IRLS with step halving.
///
/// Maximizes `sum_i [t_i eta_i - log(1 + e^eta_i)] - ridge/2 |w|^2` with
/// `eta = H w + b`. Hitting the iteration cap is not an error: the fit is
/// returned with `converged = false`.
pub fn fit_logistic_probe(h: &DMatrix<f64>, t: &[f64], ridge: f64) -> Result<ProbeFit, ProbeError> {
    check_inputs(h, t)?;
    if !(ridge > 0.0 && ridge.is_finite()) {
        return Err(ProbeError::InvalidRidge(ridge));
    }
    if let Some(&bad) = t.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(ProbeError::NonBinaryTarget(bad));
    }
    let positives = t.iter().filter(|&&v| v == 1.0).count();
    if positives == 0 || positives == t.len() {
        return Err(ProbeError::SingleClass);
    }

    let n = t.len();
    let d = h.ncols();
    let tolerance = LOGISTIC_GRADIENT_TOLERANCE * n as f64;
    let std = Standardized::new(h);
    let lambda = if std.scale > 0.0 {
        ridge / (std.scale * std.scale)
    } else {
        ridge
    };
    let target = DVector::from_column_slice(t);

    // design [X_s | 1]
    let mut x = DMatrix::zeros(n, d + 1);
    x.view_mut((0, 0), (n, d)).copy_from(&std.x);
    x.column_mut(d).fill(1.0);

    let objective = |beta: &DVector<f64>| -> f64 {
        let eta = &x * beta;
        let ll: f64 = eta
            .iter()
            .zip(t)
            .map(|(&e, &ti)| ti * e - softplus(e))
            .sum();
        ll - 0.5 * lambda * beta.rows(0, d).norm_squared()
    };

    let p_bar = positives as f64 / n as f64;
    let mut beta = DVector::zeros(d + 1);
    beta[d] = (p_bar / (1.0 - p_bar)).ln();
    let mut current = objective(&beta);
    let mut iterations = 0;
    let mut raw_gradient = f64::INFINITY;

    for iter in 0..=LOGISTIC_MAX_ITERATIONS {
        let eta = &x * &beta;
        let prob = eta.map(sigmoid);
        let resid = &target - &prob;

        let (w_raw, _) = std.to_raw(&beta.rows(0, d).into_owned(), beta[d]);
        raw_gradient = (h.transpose() * &resid - &w_raw * ridge)
            .amax()
            .max(resid.sum().abs());
        if raw_gradient <= 1e-4 * tolerance || iter == LOGISTIC_MAX_ITERATIONS {
            break;
        }

        let mut grad = x.transpose() * &resid;
        for j in 0..d {
            grad[j] -= lambda * beta[j];
        }
        let mut weighted = x.clone();
        for (i, mut row) in weighted.row_iter_mut().enumerate() {
            row *= prob[i] * (1.0 - prob[i]);
        }
        let mut hess = x.transpose() * weighted;
        for j in 0..d {
            hess[(j, j)] += lambda;
        }
        let step = match hess.clone().cholesky() {
            Some(chol) => chol.solve(&grad),
            None => match hess.lu().solve(&grad) {
                Some(s) => s,
                None => break,
            },
        };
        iterations = iter + 1;

        let slack = 1e-12 * (1.0 + current.abs());
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = &beta + &step * scale;
            let value = objective(&trial);
            if value >= current - slack {
                beta = trial;
                current = value.max(current);
                accepted = true;
                break;
            }
            scale *= 0.5;
        }
        if !accepted || (&step * scale).amax() <= 1e-15 * (1.0 + beta.amax()) {
            // Stalled at floating-point resolution; report what the gradient says.
            let eta = &x * &beta;
            let resid = &target - &eta.map(sigmoid);
            let (w_raw, _) = std.to_raw(&beta.rows(0, d).into_owned(), beta[d]);
            raw_gradient = (h.transpose() * &resid - &w_raw * ridge)
                .amax()
                .max(resid.sum().abs());
            break;
        }
    }

    let (w, b) = std.to_raw(&beta.rows(0, d).into_owned(), beta[d]);
    let eta = linear_predictors(h, &w, b);
    Ok(ProbeFit {
        weights: w.iter().copied().collect(),
        intercept: b,
        fit_score: mz_pseudo_r2(&eta),
        kind: ProbeKind::Logistic,
        solver_iterations: iterations,
        converged: raw_gradient < tolerance,
    })
}

/// Coefficient of determination `1 - SSE/SST`, clamped to `[0, 1]`.
pub fn r_squared(t: &[f64], t_hat: &[f64]) -> Result<f64, ProbeError> {
    if t.len() != t_hat.len() {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} targets vs {} predictions",
            t.len(),
            t_hat.len()
        )));
    }
    if t.len() < 2 {
        return Err(ProbeError::TooFewSamples(t.len()));
    }
    if t.iter().chain(t_hat).any(|v| !v.is_finite()) {
        return Err(ProbeError::NonFinite("r_squared input"));
    }
    let m = mean(t);
    let sst: f64 = t.iter().map(|v| (v - m) * (v - m)).sum();
    if sst <= 0.0 {
        return Err(ProbeError::ConstantTarget);
    }
    let sse: f64 = t.iter().zip(t_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 - sse / sst).clamp(0.0, 1.0))
}

/// McKelvey-Zavoina pseudo-R^2 of logistic linear predictors:
/// `Var(eta) / (Var(eta) + pi^2/3)` with the population variance.
pub fn mz_pseudo_r2(linear_predictors: &[f64]) -> f64 {
    if linear_predictors.len() < 2 || linear_predictors.iter().all(|&v| v == linear_predictors[0]) {
        return 0.0;
    }
    let m = mean(linear_predictors);
    let var = linear_predictors
        .iter()
        .map(|v| (v - m) * (v - m))
        .sum::<f64>()
        / linear_predictors.len() as f64;
    var / (var + LOGISTIC_LATENT_VARIANCE)
}

/// Raw linear predictors `H w + b` (no link applied).
pub fn predict_linear(fit: &ProbeFit, h: &DMatrix<f64>) -> Result<Vec<f64>, ProbeError> {
    if h.ncols() != fit.weights.len() {
        return Err(ProbeError::DimensionMismatch(format!(
            "{} columns vs {} weights",
            h.ncols(),
            fit.weights.len()
        )));
    }
    let w = DVector::from_column_slice(&fit.weights);
    Ok(linear_predictors(h, &w, fit.intercept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use conscope_oracles as oracle;

    fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn exact_line() {
        let h = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let fit = fit_ols_probe(&h, &[0.0, 1.0, 2.0], 0.0).unwrap();
        assert!((fit.weights[0] - 1.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert_eq!(fit.fit_score, 1.0);
        assert!(fit.converged);
        let pred = predict_linear(&fit, &h).unwrap();
        for (p, t) in pred.iter().zip([0.0, 1.0, 2.0]) {
            assert!((p - t).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_ridge_gives_null_model() {
        let h = DMatrix::from_column_slice(4, 1, &[0.0, 1.0, 2.0, 5.0]);
        let fit = fit_ols_probe(&h, &[1.0, 3.0, 2.0, 4.0], 1e18).unwrap();
        assert!(fit.weights[0].abs() < 1e-12);
        assert!(fit.fit_score < 1e-12);
    }

    #[test]
    fn random_5x2_matches_normal_equations() {
        let mut rng = oracle::FixtureRng::new(5);
        let rows = rng.matrix(5, 2);
        let t: Vec<f64> = (0..5).map(|_| rng.normal()).collect();
        let (w_ref, b_ref) = oracle::normal_equations(&rows, &t, 0.0);
        let fit = fit_ols_probe(&to_matrix(&rows), &t, 0.0).unwrap();
        for (a, b) in fit.weights.iter().zip(&w_ref) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
        assert!((fit.intercept - b_ref).abs() <= 1e-8 * b_ref.abs().max(1.0));
    }

    #[test]
    fn rank_deficient_ols_still_solves() {
        // duplicated column, no ridge
        let h = DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
        let fit = fit_ols_probe(&h, &[1.0, 3.0, 5.0, 7.0], 0.0).unwrap();
        assert!((fit.weights[0] - 1.0).abs() < 1e-10 && (fit.weights[1] - 1.0).abs() < 1e-10);
        assert!((fit.fit_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ols_rejects_bad_input() {
        let h = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert_eq!(
            fit_ols_probe(&h, &[1.0; 3], 0.0),
            Err(ProbeError::ConstantTarget)
        );
        assert!(matches!(
            fit_ols_probe(&h, &[1.0, f64::NAN, 0.0], 0.0),
            Err(ProbeError::NonFinite(_))
        ));
        assert!(matches!(
            fit_ols_probe(&h, &[1.0, 2.0], 0.0),
            Err(ProbeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn r_squared_cases() {
        let t = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(r_squared(&t, &t).unwrap(), 1.0);
        assert_eq!(r_squared(&t, &[2.5; 4]).unwrap(), 0.0);
        // SSE = 0.01 + 0.01 + 0.04 + 0.04 = 0.10, SST = 5.0
        let r2 = r_squared(&t, &[1.1, 1.9, 3.2, 3.8]).unwrap();
        assert!((r2 - 0.98).abs() < 1e-12);
        assert_eq!(
            r_squared(&[2.0; 3], &[1.0, 2.0, 3.0]),
            Err(ProbeError::ConstantTarget)
        );
        // worse than the mean clamps to 0
        assert_eq!(r_squared(&t, &[4.0, 3.0, 2.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn mz_reference_points() {
        assert_eq!(mz_pseudo_r2(&[0.0; 10]), 0.0);
        // population variance of (-a, a) is a^2
        let a = (PI * PI / 3.0).sqrt();
        assert!((mz_pseudo_r2(&[-a, a]) - 0.5).abs() < 1e-12);
        assert!((mz_pseudo_r2(&[-PI, PI]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn symmetric_logistic_is_null() {
        let h = DMatrix::from_column_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let fit = fit_logistic_probe(&h, &[0.0, 0.0, 1.0, 1.0], DEFAULT_LOGISTIC_RIDGE).unwrap();
        assert!(fit.weights[0].abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
        assert!(fit.fit_score < 1e-20);
        assert!(fit.converged);
    }

    #[test]
    fn separable_logistic_is_capped_by_ridge() {
        let mut vals = Vec::new();
        let mut t = Vec::new();
        for _ in 0..100 {
            vals.push(-1.0);
            t.push(0.0);
            vals.push(1.0);
            t.push(1.0);
        }
        let h = DMatrix::from_column_slice(200, 1, &vals);
        let fit = fit_logistic_probe(&h, &t, 1e-4).unwrap();
        assert!(fit.converged, "{fit:?}");
        assert!(fit.weights[0].is_finite());
        assert!(fit.fit_score > 0.9, "{}", fit.fit_score);
        let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
        let (w_ref, b_ref) = oracle::penalized_logistic_newton(&rows, &t, 1e-4);
        assert!((fit.weights[0] - w_ref[0]).abs() < 1e-6 * w_ref[0].abs().max(1.0));
        assert!((fit.intercept - b_ref).abs() < 1e-6);
    }

    #[test]
    fn logistic_matches_oracle_on_overlapping_2d() {
        let mut rng = oracle::FixtureRng::new(11);
        let rows: Vec<Vec<f64>> = rng.matrix(300, 2);
        let t: Vec<f64> = rows
            .iter()
            .map(|r| {
                let p = 1.0 / (1.0 + (-(0.8 * r[0] - 1.3 * r[1] + 0.2)).exp());
                if rng.uniform() < p {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let fit = fit_logistic_probe(&to_matrix(&rows), &t, 1e-4).unwrap();
        let (w_ref, b_ref) = oracle::penalized_logistic_newton(&rows, &t, 1e-4);
        for (a, b) in fit.weights.iter().zip(&w_ref) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((fit.intercept - b_ref).abs() < 1e-6);
        let g = oracle::penalized_logistic_gradient(&rows, &t, &fit.weights, fit.intercept, 1e-4);
        assert!(g.iter().all(|v| v.abs() < 1e-6 * 300.0));
    }

    #[test]
    fn logistic_rejects_bad_targets() {
        let h = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        assert_eq!(
            fit_logistic_probe(&h, &[1.0; 3], 1e-4),
            Err(ProbeError::SingleClass)
        );
        assert_eq!(
            fit_logistic_probe(&h, &[0.0, 2.0, 1.0], 1e-4),
            Err(ProbeError::NonBinaryTarget(2.0))
        );
        assert_eq!(
            fit_logistic_probe(&h, &[0.0, 1.0, 1.0], 0.0),
            Err(ProbeError::InvalidRidge(0.0))
        );
    }

    #[test]
    fn predict_linear_basics() {
        let fit = ProbeFit {
            weights: vec![1.0, 0.0],
            intercept: 0.0,
            fit_score: 0.0,
            kind: ProbeKind::Ols,
            solver_iterations: 0,
            converged: true,
        };
        let h = DMatrix::from_row_slice(1, 2, &[3.0, 7.0]);
        assert_eq!(predict_linear(&fit, &h).unwrap(), vec![3.0]);
        let flat = ProbeFit {
            weights: vec![0.0, 0.0],
            intercept: 2.0,
            ..fit.clone()
        };
        let h2 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(predict_linear(&flat, &h2).unwrap(), vec![2.0, 2.0]);
        assert!(predict_linear(&fit, &DMatrix::zeros(1, 3)).is_err());
    }
}
