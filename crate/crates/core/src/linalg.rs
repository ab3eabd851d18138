//! Dense helpers plus a structured solver for `between·AAᵀ + within·I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::ClusterMap;

/// Relative singular-value threshold below which a design is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Covariance `between·AAᵀ + within·I` for the incidence `A` of a cluster map.
///
/// Each cluster block is `within·I + between·J`, whose inverse is
/// `(I - between/(within + between·n_j)·J) / within`, so solves cost O(N).
#[derive(Debug, Clone, Copy)]
pub struct ClusterCompound<'a> {
    clusters: &'a ClusterMap,
    between: f64,
    within: f64,
}

impl<'a> ClusterCompound<'a> {
    pub fn new(clusters: &'a ClusterMap, between: f64, within: f64) -> Result<Self> {
        if !(within > 0.0) || between < 0.0 || !between.is_finite() || !within.is_finite() {
            return Err(Error::NotPositiveDefinite(format!(
                "cluster covariance with between={between}, within={within}"
            )));
        }
        Ok(Self {
            clusters,
            between,
            within,
        })
    }

    pub fn dim(&self) -> usize {
        self.clusters.n_units()
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &[f64]) -> Vec<f64> {
        let sums = self.clusters.cluster_sums(v);
        let shrink: Vec<f64> = sums
            .iter()
            .zip(self.clusters.sizes())
            .map(|(&s, &n)| self.between / (self.within + self.between * n as f64) * s)
            .collect();
        v.iter()
            .zip(self.clusters.assignment())
            .map(|(&x, &j)| (x - shrink[j]) / self.within)
            .collect()
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for c in 0..b.ncols() {
            let col: Vec<f64> = b.column(c).iter().copied().collect();
            out.set_column(c, &DVector::from_vec(self.solve(&col)));
        }
        out
    }

    /// `Σ v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let sums = self.clusters.cluster_sums(v);
        v.iter()
            .zip(self.clusters.assignment())
            .map(|(&x, &j)| self.within * x + self.between * sums[j])
            .collect()
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let a = self.clusters.assignment();
        DMatrix::from_fn(n, n, |i, k| {
            let mut v = if a[i] == a[k] { self.between } else { 0.0 };
            if i == k {
                v += self.within;
            }
            v
        })
    }
}

/// Errors when the smallest singular value is below `RANK_TOLERANCE` times the
/// largest.
pub fn check_full_rank(h: &DMatrix<f64>) -> Result<()> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("design matrix".into()));
    }
    if h.nrows() < h.ncols() {
        return Err(Error::RankDeficient { ratio: 0.0 });
    }
    let sv = h.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if ratio < RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(())
}

/// `(HᵀH)⁻¹Hᵀ`, the k×N OLS projection.
pub fn ols_projection(h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_rank(h)?;
    let gram = h.transpose() * h;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("OLS normal equations".into()))?;
    Ok(chol.solve(&h.transpose()))
}

/// `(HᵀΣ⁻¹H)⁻¹HᵀΣ⁻¹` for a structured cluster covariance.
pub fn gls_projection(h: &DMatrix<f64>, cov: &ClusterCompound<'_>) -> Result<DMatrix<f64>> {
    check_full_rank(h)?;
    if cov.dim() != h.nrows() {
        return Err(Error::dims(format!(
            "design has {} rows, covariance is {}x{}",
            h.nrows(),
            cov.dim(),
            cov.dim()
        )));
    }
    let sinv_h = cov.solve_matrix(h);
    let gram = h.transpose() * &sinv_h;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("GLS normal equations".into()))?;
    Ok(chol.solve(&sinv_h.transpose()))
}

/// `(HᵀΣ⁻¹H)⁻¹HᵀΣ⁻¹` for a dense covariance, via Cholesky of Σ.
pub fn gls_projection_dense(h: &DMatrix<f64>, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_full_rank(h)?;
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("GLS covariance".into()))?;
    let sinv_h = chol.solve(h);
    let gram = h.transpose() * &sinv_h;
    let gchol = gram
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("GLS normal equations".into()))?;
    Ok(gchol.solve(&sinv_h.transpose()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
