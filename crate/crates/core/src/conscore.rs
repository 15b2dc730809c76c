//! Con-score: probe fit quality times the absolute cosine between the probe
//! direction and the final layer's weight vector.
//!
//! For each candidate covariate a linear probe is fit from the representation
//! to the covariate (least squares for continuous, logistic for categorical).
//! A high score needs both: the covariate is linearly decodable, and the
//! direction that decodes it is the one the model's last layer reads out.

use std::collections::HashSet;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{
    Checkpoint, CovariateColumn, CovariateDescriptor, CovariateKind, LoadedRun, Task,
};
use crate::probes::{
    self, default_ols_ridge, fit_logistic_probe, fit_ols_probe, ProbeError, ProbeFit, ProbeKind,
    DEFAULT_LOGISTIC_RIDGE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConScoreError {
    #[error("unknown checkpoint '{0}'")]
    UnknownCheckpoint(String),
    #[error("unknown covariate '{0}'")]
    UnknownCovariate(String),
    #[error("no covariates selected")]
    EmptySelection,
    #[error("covariate '{name}' is degenerate: {reason}")]
    DegenerateCovariate { name: String, reason: String },
    #[error("final layer weights have zero norm")]
    ZeroNormFinalLayer,
    #[error("zero-norm vector in cosine")]
    ZeroNorm,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("permutation count must be at least 1")]
    ZeroPermutations,
    #[error("covariate '{name}': {source}")]
    Probe {
        name: String,
        #[source]
        source: ProbeError,
    },
    #[error("model fit: {0}")]
    ModelFit(#[source] ProbeError),
}

/// One-vs-rest detail for a categorical covariate with more than two levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: String,
    pub r2: f64,
    pub cos_abs: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConScoreEntry {
    pub covariate: String,
    pub r2: f64,
    pub cos_abs: f64,
    /// Always exactly `r2 * cos_abs`.
    pub score: f64,
    pub probe_kind: ProbeKind,
    pub n_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_category: Option<Vec<CategoryScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permutation_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConScoreOptions {
    /// `None` selects `1e-8 * trace(H^T H) / d` per probe.
    pub ridge_ols: Option<f64>,
    pub ridge_logistic: f64,
    /// 0 disables the permutation test.
    pub permutations: usize,
    pub seed: u64,
}

impl Default for ConScoreOptions {
    fn default() -> Self {
        ConScoreOptions {
            ridge_ols: None,
            ridge_logistic: DEFAULT_LOGISTIC_RIDGE,
            permutations: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConScoreReport {
    pub run_id: String,
    pub checkpoint: String,
    pub model_fit: f64,
    pub options: ConScoreOptions,
    /// Sorted by descending score.
    pub entries: Vec<ConScoreEntry>,
}

impl ConScoreReport {
    /// Canonical JSON rendering shared by the CLI and the HTTP API.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn entry(&self, covariate: &str) -> Option<&ConScoreEntry> {
        self.entries.iter().find(|e| e.covariate == covariate)
    }
}

/// `|a . b| / (|a| |b|)`, in `[0, 1]`.
pub fn cosine_alignment(a: &[f64], b: &[f64]) -> Result<f64, ConScoreError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(ConScoreError::DimensionMismatch(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(ConScoreError::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot.abs() / (na * nb)).min(1.0))
}

struct Scored {
    r2: f64,
    cos_abs: f64,
    score: f64,
    warnings: Vec<String>,
}

fn score_probe(name: &str, fit: &ProbeFit, final_weights: &[f64]) -> Scored {
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!(
            "{:?} probe did not converge after {} iterations",
            fit.kind, fit.solver_iterations
        ));
    }
    let cos_abs = match cosine_alignment(&fit.weights, final_weights) {
        Ok(c) => c,
        Err(_) => {
            warnings.push("probe weights are zero; cosine set to 0".into());
            0.0
        }
    };
    for w in &warnings {
        log::warn!("covariate '{name}': {w}");
    }
    Scored {
        r2: fit.fit_score,
        cos_abs,
        score: fit.fit_score * cos_abs,
        warnings,
    }
}

fn probe_error(name: &str) -> impl FnOnce(ProbeError) -> ConScoreError + '_ {
    move |source| ConScoreError::Probe {
        name: name.to_string(),
        source,
    }
}

/// Con-score of one covariate against one checkpoint's representation and
/// final layer. Rows with a missing covariate value are dropped first.
pub fn compute_con_score(
    h: &DMatrix<f64>,
    descriptor: &CovariateDescriptor,
    column: &CovariateColumn,
    final_weights: &[f64],
    options: &ConScoreOptions,
) -> Result<ConScoreEntry, ConScoreError> {
    let name = descriptor.name.as_str();
    if column.len() != h.nrows() {
        return Err(ConScoreError::DimensionMismatch(format!(
            "covariate '{name}' has {} rows, representation has {}",
            column.len(),
            h.nrows()
        )));
    }
    if final_weights.len() != h.ncols() {
        return Err(ConScoreError::DimensionMismatch(format!(
            "final layer has {} weights, representation has {} columns",
            final_weights.len(),
            h.ncols()
        )));
    }
    if final_weights.iter().all(|&w| w == 0.0) {
        return Err(ConScoreError::ZeroNormFinalLayer);
    }
    let rows: Vec<usize> = (0..column.len())
        .filter(|&i| !column.is_missing(i))
        .collect();
    let used = column.select(&rows);
    if used.distinct_count() < 2 {
        return Err(ConScoreError::DegenerateCovariate {
            name: name.to_string(),
            reason: "fewer than 2 distinct non-missing values".into(),
        });
    }
    let h_used = h.select_rows(&rows);

    match (descriptor.kind, &used) {
        (CovariateKind::Continuous, CovariateColumn::Continuous(values)) => {
            let t: Vec<f64> = values
                .iter()
                .map(|v| v.expect("missing rows removed"))
                .collect();
            let ridge = options
                .ridge_ols
                .unwrap_or_else(|| default_ols_ridge(&h_used));
            let fit = fit_ols_probe(&h_used, &t, ridge).map_err(probe_error(name))?;
            let s = score_probe(name, &fit, final_weights);
            Ok(ConScoreEntry {
                covariate: name.to_string(),
                r2: s.r2,
                cos_abs: s.cos_abs,
                score: s.score,
                probe_kind: ProbeKind::Ols,
                n_used: rows.len(),
                per_category: None,
                permutation_p: None,
                warnings: s.warnings,
            })
        }
        (CovariateKind::Categorical, CovariateColumn::Categorical(codes)) => {
            let codes: Vec<usize> = codes
                .iter()
                .map(|c| c.expect("missing rows removed"))
                .collect();
            let categories = descriptor.categories();
            if categories.len() <= 2 {
                let t: Vec<f64> = codes
                    .iter()
                    .map(|&c| if c == 1 { 1.0 } else { 0.0 })
                    .collect();
                let fit = fit_logistic_probe(&h_used, &t, options.ridge_logistic)
                    .map_err(probe_error(name))?;
                let s = score_probe(name, &fit, final_weights);
                return Ok(ConScoreEntry {
                    covariate: name.to_string(),
                    r2: s.r2,
                    cos_abs: s.cos_abs,
                    score: s.score,
                    probe_kind: ProbeKind::Logistic,
                    n_used: rows.len(),
                    per_category: None,
                    permutation_p: None,
                    warnings: s.warnings,
                });
            }
            // one-vs-rest over every category actually observed
            let observed: HashSet<usize> = codes.iter().copied().collect();
            let mut per_category = Vec::new();
            let mut headline: Option<(usize, Scored)> = None;
            let mut warnings = Vec::new();
            for (k, category) in categories.iter().enumerate() {
                if !observed.contains(&k) {
                    continue;
                }
                let t: Vec<f64> = codes
                    .iter()
                    .map(|&c| if c == k { 1.0 } else { 0.0 })
                    .collect();
                let fit = fit_logistic_probe(&h_used, &t, options.ridge_logistic)
                    .map_err(probe_error(name))?;
                let s = score_probe(name, &fit, final_weights);
                warnings.extend(s.warnings.iter().map(|w| format!("{category}: {w}")));
                per_category.push(CategoryScore {
                    category: category.clone(),
                    r2: s.r2,
                    cos_abs: s.cos_abs,
                    score: s.score,
                });
                if headline
                    .as_ref()
                    .is_none_or(|(_, best)| s.score > best.score)
                {
                    headline = Some((k, s));
                }
            }
            let (_, best) = headline.expect("at least two observed categories");
            Ok(ConScoreEntry {
                covariate: name.to_string(),
                r2: best.r2,
                cos_abs: best.cos_abs,
                score: best.score,
                probe_kind: ProbeKind::Logistic,
                n_used: rows.len(),
                per_category: Some(per_category),
                permutation_p: None,
                warnings,
            })
        }
        _ => Err(ConScoreError::DegenerateCovariate {
            name: name.to_string(),
            reason: format!("column data does not match kind {}", descriptor.kind),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationNull {
    pub observed: f64,
    pub p_value: f64,
    pub n_perm: usize,
    pub null_mean: f64,
    pub null_sd: f64,
    pub null_max: f64,
}

/// Seed for replicate `stream` of a master seed. Replicates use separate
/// ChaCha streams so the result does not depend on evaluation order.
fn replicate_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed for the covariate at position `index` in the run's metadata.
pub fn covariate_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

/// Permutation test of the Con-score: the covariate column (missing markers
/// included) is shuffled `n_perm` times and rescored.
/// `p = (1 + #{null >= observed}) / (n_perm + 1)`.
pub fn permutation_null(
    h: &DMatrix<f64>,
    descriptor: &CovariateDescriptor,
    column: &CovariateColumn,
    final_weights: &[f64],
    options: &ConScoreOptions,
    n_perm: usize,
    seed: u64,
) -> Result<PermutationNull, ConScoreError> {
    if n_perm == 0 {
        return Err(ConScoreError::ZeroPermutations);
    }
    let observed = compute_con_score(h, descriptor, column, final_weights, options)?.score;
    let n = column.len();
    let null_scores: Vec<f64> = (0..n_perm)
        .into_par_iter()
        .map(|rep| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut replicate_rng(seed, rep as u64));
            let permuted = column.select(&order);
            compute_con_score(h, descriptor, &permuted, final_weights, options).map(|e| e.score)
        })
        .collect::<Result<_, _>>()?;

    let exceed = null_scores.iter().filter(|&&s| s >= observed).count();
    let m = null_scores.len() as f64;
    let null_mean = null_scores.iter().sum::<f64>() / m;
    let null_sd = (null_scores
        .iter()
        .map(|s| (s - null_mean).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok(PermutationNull {
        observed,
        p_value: (1 + exceed) as f64 / (n_perm + 1) as f64,
        n_perm,
        null_mean,
        null_sd,
        null_max: null_scores
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

fn resolve_checkpoint<'a>(
    run: &'a LoadedRun,
    checkpoint: Option<&str>,
) -> Result<&'a Checkpoint, ConScoreError> {
    match checkpoint {
        None => Ok(run.last_checkpoint()),
        Some(label) => run
            .checkpoint(label)
            .ok_or_else(|| ConScoreError::UnknownCheckpoint(label.to_string())),
    }
}

/// Fit of the model's own final layer: MZ pseudo-R^2 of `H w + b` for
/// classification, R^2 of `H w + b` against `y_true` for regression.
pub fn model_fit_metric(run: &LoadedRun, checkpoint: Option<&str>) -> Result<f64, ConScoreError> {
    let ckpt = resolve_checkpoint(run, checkpoint)?;
    let h = &ckpt.representations.values;
    let fl = &ckpt.final_layer;
    let eta: Vec<f64> = (0..h.nrows())
        .map(|i| {
            h.row(i)
                .iter()
                .zip(&fl.weights)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                + fl.bias
        })
        .collect();
    match run.meta.task {
        Task::BinaryClassification => Ok(probes::mz_pseudo_r2(&eta)),
        Task::Regression => {
            probes::r_squared(&run.labels.y_true, &eta).map_err(ConScoreError::ModelFit)
        }
    }
}

/// Scores the selected covariates (all of them when `selection` is `None`)
/// against one checkpoint (the last one when `checkpoint` is `None`).
pub fn compute_report(
    run: &LoadedRun,
    checkpoint: Option<&str>,
    selection: Option<&[String]>,
    options: &ConScoreOptions,
) -> Result<ConScoreReport, ConScoreError> {
    let ckpt = resolve_checkpoint(run, checkpoint)?;
    let names: Vec<String> = match selection {
        None => run.meta.covariates.iter().map(|c| c.name.clone()).collect(),
        Some(sel) => {
            let mut seen = HashSet::new();
            sel.iter().filter(|s| seen.insert(*s)).cloned().collect()
        }
    };
    if names.is_empty() {
        return Err(ConScoreError::EmptySelection);
    }
    let indices: Vec<usize> = names
        .iter()
        .map(|name| {
            run.meta
                .covariates
                .iter()
                .position(|c| &c.name == name)
                .ok_or_else(|| ConScoreError::UnknownCovariate(name.clone()))
        })
        .collect::<Result<_, _>>()?;

    let h = &ckpt.representations.values;
    let weights = &ckpt.final_layer.weights;
    let mut entries: Vec<ConScoreEntry> = indices
        .par_iter()
        .map(|&idx| {
            let desc = &run.meta.covariates[idx];
            let column = &run.covariates.columns[idx];
            let mut entry = compute_con_score(h, desc, column, weights, options)?;
            if options.permutations > 0 {
                let null = permutation_null(
                    h,
                    desc,
                    column,
                    weights,
                    options,
                    options.permutations,
                    covariate_seed(options.seed, idx),
                )?;
                entry.permutation_p = Some(null.p_value);
            }
            Ok(entry)
        })
        .collect::<Result<_, ConScoreError>>()?;
    entries.sort_by(|a, b| b.score.total_cmp(&a.score));

    Ok(ConScoreReport {
        run_id: run.meta.run_id.clone(),
        checkpoint: ckpt.label().to_string(),
        model_fit: model_fit_metric(run, Some(ckpt.label()))?,
        options: *options,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_reference_values() {
        assert_eq!(cosine_alignment(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_alignment(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        // (12 + 12) / (5 * 5)
        let c = cosine_alignment(&[3.0, 4.0], &[4.0, 3.0]).unwrap();
        assert!((c - 0.96).abs() < 1e-15);
        assert_eq!(cosine_alignment(&[-3.0, -4.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert_eq!(
            cosine_alignment(&[0.0, 0.0], &[1.0, 0.0]),
            Err(ConScoreError::ZeroNorm)
        );
        assert!(cosine_alignment(&[1.0], &[1.0, 0.0]).is_err());
    }

    fn line_fixture() -> (DMatrix<f64>, CovariateDescriptor, CovariateColumn) {
        let h = DMatrix::from_row_slice(5, 2, &[0.0, 1.0, 1.0, 0.0, 2.0, 1.0, 3.0, 0.5, 4.0, 0.2]);
        let col =
            CovariateColumn::Continuous(vec![Some(0.1), Some(1.2), None, Some(2.9), Some(4.1)]);
        (h, CovariateDescriptor::continuous("age"), col)
    }

    #[test]
    fn missing_rows_are_excluded() {
        let (h, desc, col) = line_fixture();
        let e =
            compute_con_score(&h, &desc, &col, &[1.0, 0.0], &ConScoreOptions::default()).unwrap();
        assert_eq!(e.n_used, 4);
        assert_eq!(e.score, e.r2 * e.cos_abs);
        assert!(e.score <= e.r2.min(e.cos_abs));
    }

    #[test]
    fn zero_final_layer_is_an_error() {
        let (h, desc, col) = line_fixture();
        assert_eq!(
            compute_con_score(&h, &desc, &col, &[0.0, 0.0], &ConScoreOptions::default()),
            Err(ConScoreError::ZeroNormFinalLayer)
        );
    }

    #[test]
    fn degenerate_after_exclusion() {
        let (h, desc, _) = line_fixture();
        let col = CovariateColumn::Continuous(vec![Some(1.0), None, None, Some(1.0), None]);
        assert!(matches!(
            compute_con_score(&h, &desc, &col, &[1.0, 0.0], &ConScoreOptions::default()),
            Err(ConScoreError::DegenerateCovariate { .. })
        ));
    }

    #[test]
    fn zero_probe_weights_give_zero_score_with_warning() {
        // covariate uncorrelated with both columns by symmetry
        let h = DMatrix::from_row_slice(4, 1, &[-1.0, 1.0, -1.0, 1.0]);
        let desc = CovariateDescriptor::categorical("site", ["a", "b"]);
        let col = CovariateColumn::Categorical(vec![Some(0), Some(0), Some(1), Some(1)]);
        let e = compute_con_score(&h, &desc, &col, &[1.0], &ConScoreOptions::default()).unwrap();
        assert_eq!(e.cos_abs, 0.0);
        assert_eq!(e.score, 0.0);
        assert!(!e.warnings.is_empty());
    }

    #[test]
    fn multi_level_categorical_uses_best_category() {
        let h = DMatrix::from_row_slice(
            9,
            2,
            &[
                2.0, 0.1, 2.2, -0.1, 1.9, 0.0, -1.0, 1.5, -1.1, 1.4, -0.9, 1.7, -1.0, -1.5, -1.2,
                -1.6, -0.8, -1.4,
            ],
        );
        let desc = CovariateDescriptor::categorical("scanner", ["x", "y", "z", "unused"]);
        let col = CovariateColumn::Categorical(
            [0, 0, 0, 1, 1, 1, 2, 2, 2]
                .iter()
                .map(|&c| Some(c))
                .collect(),
        );
        let e =
            compute_con_score(&h, &desc, &col, &[1.0, 0.0], &ConScoreOptions::default()).unwrap();
        let per = e.per_category.as_ref().unwrap();
        assert_eq!(per.len(), 3);
        let best = per.iter().map(|c| c.score).fold(0.0, f64::max);
        assert_eq!(e.score, best);
        assert_eq!(per.iter().find(|c| c.score == best).unwrap().category, "x");
    }

    #[test]
    fn permutation_rejects_zero() {
        let (h, desc, col) = line_fixture();
        assert_eq!(
            permutation_null(
                &h,
                &desc,
                &col,
                &[1.0, 0.0],
                &ConScoreOptions::default(),
                0,
                1
            ),
            Err(ConScoreError::ZeroPermutations)
        );
    }

    #[test]
    fn permutation_is_deterministic() {
        let (h, desc, col) = line_fixture();
        let opts = ConScoreOptions::default();
        let a = permutation_null(&h, &desc, &col, &[1.0, 0.0], &opts, 20, 9).unwrap();
        let b = permutation_null(&h, &desc, &col, &[1.0, 0.0], &opts, 20, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.p_value > 0.0 && a.p_value <= 1.0);
    }
}
