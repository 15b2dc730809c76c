//! Exact PCA for projecting representations to a few display dimensions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReduceError {
    #[error("requested {k} components from {d}-dimensional data")]
    TooManyComponents { k: usize, d: usize },
    #[error("at least 2 samples (and at least k) are required, got {0}")]
    TooFewSamples(usize),
    #[error("k must be at least 1")]
    ZeroComponents,
    #[error("dimension mismatch: expected {expected} columns, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFinite,
}

/// Principal axes of a data matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub mean: DVector<f64>,
    /// `k x d`, rows are orthonormal principal axes in descending variance order.
    pub components: DMatrix<f64>,
    /// Sample variance (divisor `n - 1`) along each axis.
    pub explained_variance: Vec<f64>,
    pub explained_ratio: Vec<f64>,
}

impl Projection {
    pub fn k(&self) -> usize {
        self.components.nrows()
    }

    pub fn d(&self) -> usize {
        self.components.ncols()
    }

    /// True when the projection drops dimensions, so a projected boundary
    /// normal only approximates the full-dimensional boundary.
    pub fn is_approximate(&self) -> bool {
        self.k() < self.d()
    }
}

/// Fits the top-`k` principal axes by SVD of the centered data. Each axis is
/// signed so that its largest-magnitude entry is positive.
pub fn pca_fit(h: &DMatrix<f64>, k: usize) -> Result<Projection, ReduceError> {
    let (n, d) = h.shape();
    if k == 0 {
        return Err(ReduceError::ZeroComponents);
    }
    if k > d {
        return Err(ReduceError::TooManyComponents { k, d });
    }
    if n < 2 || n < k {
        return Err(ReduceError::TooFewSamples(n));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(ReduceError::NonFinite);
    }
    let mean = h.row_mean().transpose();
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let total_ss = centered.norm_squared();
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .total_cmp(&svd.singular_values[a])
            .then(a.cmp(&b))
    });

    let mut components = DMatrix::zeros(k, d);
    let mut explained_variance = Vec::with_capacity(k);
    let mut explained_ratio = Vec::with_capacity(k);
    for (r, &idx) in order.iter().take(k).enumerate() {
        let mut axis = v_t.row(idx).into_owned();
        let lead = (0..d).fold(0, |best, j| {
            if axis[j].abs() > axis[best].abs() {
                j
            } else {
                best
            }
        });
        if axis[lead] < 0.0 {
            axis = -axis;
        }
        components.row_mut(r).copy_from(&axis);
        let s = svd.singular_values[idx];
        explained_variance.push(s * s / (n - 1) as f64);
        explained_ratio.push(if total_ss > 0.0 {
            s * s / total_ss
        } else {
            0.0
        });
    }
    Ok(Projection {
        mean,
        components,
        explained_variance,
        explained_ratio,
    })
}

/// `(H - mean) C^T`, an `n x k` coordinate matrix.
pub fn project_points(p: &Projection, h: &DMatrix<f64>) -> Result<DMatrix<f64>, ReduceError> {
    if h.ncols() != p.d() {
        return Err(ReduceError::DimensionMismatch {
            expected: p.d(),
            got: h.ncols(),
        });
    }
    let mut centered = h.clone();
    for mut row in centered.row_iter_mut() {
        row -= p.mean.transpose();
    }
    Ok(centered * p.components.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedDirection {
    /// Unit length, or all zeros when the direction is orthogonal to every axis.
    pub vector: Vec<f64>,
    pub warning: Option<String>,
}

/// Maps a direction (e.g. the final-layer weights) into the projection and
/// normalizes it.
pub fn project_direction(p: &Projection, w: &[f64]) -> Result<ProjectedDirection, ReduceError> {
    if w.len() != p.d() {
        return Err(ReduceError::DimensionMismatch {
            expected: p.d(),
            got: w.len(),
        });
    }
    let projected = &p.components * DVector::from_column_slice(w);
    let norm = projected.norm();
    let scale = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if norm <= 1e-12 * scale || norm == 0.0 {
        return Ok(ProjectedDirection {
            vector: vec![0.0; p.k()],
            warning: Some("direction is orthogonal to the projection; shown as zero".into()),
        });
    }
    Ok(ProjectedDirection {
        vector: (projected / norm).iter().copied().collect(),
        warning: None,
    })
}

/// Projected representation of one checkpoint, ready for display.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedView {
    pub checkpoint: String,
    pub coords: Vec<Vec<f64>>,
    pub boundary_normal: Vec<f64>,
    pub explained_ratio: Vec<f64>,
    /// Set when `k < d`.
    pub approximate: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

pub fn project_view(
    checkpoint: &str,
    h: &DMatrix<f64>,
    boundary: &[f64],
    k: usize,
) -> Result<ProjectedView, ReduceError> {
    let p = pca_fit(h, k)?;
    view_from_projection(checkpoint, &p, h, boundary)
}

pub fn view_from_projection(
    checkpoint: &str,
    p: &Projection,
    h: &DMatrix<f64>,
    boundary: &[f64],
) -> Result<ProjectedView, ReduceError> {
    let coords = project_points(p, h)?;
    let normal = project_direction(p, boundary)?;
    Ok(ProjectedView {
        checkpoint: checkpoint.to_string(),
        coords: coords
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
        boundary_normal: normal.vector,
        explained_ratio: p.explained_ratio.clone(),
        approximate: p.is_approximate(),
        warning: normal.warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_rank_2d_ratios_sum_to_one() {
        let h = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 2.0, 0.5, -1.0, 3.0, 4.0, -2.0]);
        let p = pca_fit(&h, 2).unwrap();
        assert!((p.explained_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(p.explained_variance[0] >= p.explained_variance[1]);
        assert!(!p.is_approximate());
    }

    #[test]
    fn collinear_points_have_one_axis() {
        let h = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0, 0.5, 1.0, 1.5,
            ],
        );
        let p = pca_fit(&h, 1).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-12);
        // largest entry positive
        assert!(p.components[(0, 2)] > 0.0);
        assert!(p.is_approximate());
    }

    #[test]
    fn mean_maps_to_origin() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 5.0, 6.0, 0.0]);
        let p = pca_fit(&h, 2).unwrap();
        let m = DMatrix::from_row_slice(1, 2, p.mean.as_slice());
        let c = project_points(&p, &m).unwrap();
        assert!(c.amax() < 1e-12);
    }

    #[test]
    fn direction_cases() {
        let p = Projection {
            mean: DVector::zeros(2),
            components: DMatrix::identity(2, 2),
            explained_variance: vec![1.0, 1.0],
            explained_ratio: vec![0.5, 0.5],
        };
        let v = project_direction(&p, &[0.0, 1.0]).unwrap();
        assert_eq!(v.vector, vec![0.0, 1.0]);
        assert!(v.warning.is_none());

        let p1 = Projection {
            mean: DVector::zeros(2),
            components: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            explained_variance: vec![1.0],
            explained_ratio: vec![1.0],
        };
        let z = project_direction(&p1, &[0.0, 3.0]).unwrap();
        assert_eq!(z.vector, vec![0.0]);
        assert!(z.warning.is_some());
        assert!(project_direction(&p1, &[1.0]).is_err());
    }

    #[test]
    fn errors() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 2.0, 5.0, 6.0, 0.0]);
        assert_eq!(
            pca_fit(&h, 3),
            Err(ReduceError::TooManyComponents { k: 3, d: 2 })
        );
        let p = pca_fit(&h, 2).unwrap();
        assert!(project_points(&p, &DMatrix::zeros(2, 3)).is_err());
    }
}
