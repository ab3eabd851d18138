//! Shared domain types: datasets, cluster bookkeeping, the exponential
//! correlation kernel and prior specifications.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagonal jitter added to spatial correlation matrices before factorization.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Correlation at the practical range of the exponential kernel.
pub const PRACTICAL_RANGE_CORRELATION: f64 = 0.05;

/// Unit-to-cluster incidence, stored sparsely.
///
/// Clusters are relabelled to `0..m` in ascending order of their original
/// ids; [`ClusterMap::relabeled_ids`] reports the 1-based labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
    labels: Vec<i64>,
    members: Vec<Vec<usize>>,
}

impl ClusterMap {
    pub fn from_ids(ids: &[i64]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Empty("cluster ids"));
        }
        let mut index: BTreeMap<i64, usize> = ids.iter().map(|&id| (id, 0)).collect();
        for (k, slot) in index.values_mut().enumerate() {
            *slot = k;
        }
        let labels: Vec<i64> = index.keys().copied().collect();
        let assignment: Vec<usize> = ids.iter().map(|id| index[id]).collect();
        let mut members = vec![Vec::new(); labels.len()];
        for (i, &j) in assignment.iter().enumerate() {
            members[j].push(i);
        }
        let sizes = members.iter().map(Vec::len).collect();
        Ok(Self {
            assignment,
            sizes,
            labels,
            members,
        })
    }

    pub fn n_units(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.sizes.len()
    }

    /// 0-based cluster index of unit `i`.
    #[inline]
    pub fn cluster_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Original id of each cluster, indexed by the relabelled position.
    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn members(&self, j: usize) -> &[usize] {
        &self.members[j]
    }

    /// Contiguous 1-based labels, one per unit.
    pub fn relabeled_ids(&self) -> Vec<i64> {
        self.assignment.iter().map(|&j| j as i64 + 1).collect()
    }

    /// Dense N×m incidence matrix.
    pub fn incidence(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_units(), self.n_clusters());
        for (i, &j) in self.assignment.iter().enumerate() {
            a[(i, j)] = 1.0;
        }
        a
    }

    /// Per-cluster sums of a unit-level vector.
    pub fn cluster_sums(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_clusters()];
        for (&j, &x) in self.assignment.iter().zip(v) {
            out[j] += x;
        }
        out
    }

    /// Broadcasts a cluster-level vector to units.
    pub fn expand(&self, u: &[f64]) -> Vec<f64> {
        self.assignment.iter().map(|&j| u[j]).collect()
    }

    /// Restriction to a subset of units, relabelling the clusters that remain.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let ids: Vec<i64> = rows
            .iter()
            .map(|&i| self.labels[self.assignment[i]])
            .collect();
        Self::from_ids(&ids)
    }
}

/// Cluster-indexed observations.
///
/// `exposure` is real-valued so the same type serves the linear-Gaussian
/// study; binary analyses check [`Dataset::exposure_is_binary`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub outcome: Vec<f64>,
    pub exposure: Vec<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub clusters: ClusterMap,
    /// m×2 planar coordinates, one row per relabelled cluster.
    pub centroids: Option<DMatrix<f64>>,
}

impl Dataset {
    pub fn new(
        outcome: Vec<f64>,
        exposure: Vec<f64>,
        covariates: DMatrix<f64>,
        covariate_names: Vec<String>,
        cluster_ids: &[i64],
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if exposure.len() != n || cluster_ids.len() != n || covariates.nrows() != n {
            return Err(Error::dims(format!(
                "outcome {n}, exposure {}, covariates {}, cluster ids {}",
                exposure.len(),
                covariates.nrows(),
                cluster_ids.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::dims(format!(
                "{} covariate names for {} columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        let clusters = ClusterMap::from_ids(cluster_ids)?;
        Ok(Self {
            outcome,
            exposure,
            covariates,
            covariate_names,
            clusters,
            centroids: None,
        })
    }

    pub fn with_centroids(mut self, centroids: DMatrix<f64>) -> Result<Self> {
        if centroids.nrows() != self.clusters.n_clusters() || centroids.ncols() != 2 {
            return Err(Error::dims(format!(
                "centroids are {}x{}, expected {}x2",
                centroids.nrows(),
                centroids.ncols(),
                self.clusters.n_clusters()
            )));
        }
        if centroids.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("centroids".into()));
        }
        self.centroids = Some(centroids);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn m(&self) -> usize {
        self.clusters.n_clusters()
    }

    pub fn exposure_is_binary(&self) -> bool {
        self.exposure.iter().all(|&z| z == 0.0 || z == 1.0)
    }

    pub fn covariate(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.covariate_names.iter().position(|c| c == name)?;
        Some(self.covariates.column(k).iter().copied().collect())
    }

    /// Largest pairwise Euclidean distance between centroids.
    pub fn max_centroid_distance(&self) -> Option<f64> {
        self.centroids.as_ref().map(max_pairwise_distance)
    }

    /// Rows `rows` in the given order; clusters are relabelled and centroids
    /// restricted to the clusters that remain.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("row subset"));
        }
        let pick = |v: &[f64]| rows.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let covariates = DMatrix::from_fn(rows.len(), self.covariates.ncols(), |r, c| {
            self.covariates[(rows[r], c)]
        });
        let clusters = self.clusters.subset(rows)?;
        let centroids = self.centroids.as_ref().map(|cent| {
            let old_index: BTreeMap<i64, usize> = self
                .clusters
                .labels()
                .iter()
                .enumerate()
                .map(|(j, &l)| (l, j))
                .collect();
            DMatrix::from_fn(clusters.n_clusters(), 2, |j, c| {
                cent[(old_index[&clusters.labels()[j]], c)]
            })
        });
        Ok(Self {
            outcome: pick(&self.outcome),
            exposure: pick(&self.exposure),
            covariates,
            covariate_names: self.covariate_names.clone(),
            clusters,
            centroids,
        })
    }
}

pub fn max_pairwise_distance(points: &DMatrix<f64>) -> f64 {
    let m = points.nrows();
    let mut best = 0.0f64;
    for i in 0..m {
        for j in (i + 1)..m {
            best = best.max(distance(points, i, j));
        }
    }
    best
}

#[inline]
fn distance(points: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    let dx = points[(i, 0)] - points[(j, 0)];
    let dy = points[(i, 1)] - points[(j, 1)];
    dx.hypot(dy)
}

/// Correlation structure of a cluster-level random effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrelationModel {
    Independent,
    Exponential { decay: f64 },
}

impl CorrelationModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CorrelationModel::Exponential { decay } if !(decay > 0.0 && decay.is_finite()) => Err(
                Error::invalid(format!("exponential decay must be positive, got {decay}")),
            ),
            _ => Ok(()),
        }
    }

    /// m×m correlation matrix. `Independent` ignores the coordinates beyond
    /// their row count.
    pub fn matrix(&self, centroids: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match *self {
            CorrelationModel::Independent => {
                Ok(DMatrix::identity(centroids.nrows(), centroids.nrows()))
            }
            CorrelationModel::Exponential { decay } => exponential_correlation(centroids, decay),
        }
    }
}

/// `R_ij = exp(-decay * ||s_i - s_j||)` on planar coordinates, without jitter.
pub fn exponential_correlation(centroids: &DMatrix<f64>, decay: f64) -> Result<DMatrix<f64>> {
    if !(decay > 0.0 && decay.is_finite()) {
        return Err(Error::invalid(format!(
            "decay must be positive and finite, got {decay}"
        )));
    }
    if centroids.ncols() != 2 {
        return Err(Error::dims(format!(
            "centroids have {} columns, expected 2",
            centroids.ncols()
        )));
    }
    if centroids.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("centroids".into()));
    }
    let m = centroids.nrows();
    let mut r = DMatrix::identity(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let v = (-decay * distance(centroids, i, j)).exp();
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    Ok(r)
}

/// Adds `jitter` to the diagonal.
pub fn with_jitter(mut r: DMatrix<f64>, jitter: f64) -> DMatrix<f64> {
    for i in 0..r.nrows() {
        r[(i, i)] += jitter;
    }
    r
}

/// Folded-normal prior on the exponential decay parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayPrior {
    pub location: f64,
    pub sd: f64,
}

impl DecayPrior {
    pub fn ln_pdf(&self, decay: f64) -> f64 {
        folded_normal_ln_pdf(decay, self.location, self.sd)
    }
}

/// Decay prior whose location puts the practical range (correlation 0.05) at
/// half the maximum observed distance.
pub fn folded_normal_decay_prior(max_distance: f64, sd: f64) -> Result<DecayPrior> {
    if !(max_distance > 0.0 && max_distance.is_finite()) {
        return Err(Error::invalid(format!(
            "max distance must be positive, got {max_distance}"
        )));
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::invalid(format!(
            "prior sd must be positive, got {sd}"
        )));
    }
    Ok(DecayPrior {
        location: -PRACTICAL_RANGE_CORRELATION.ln() / (max_distance / 2.0),
        sd,
    })
}

/// Decay prior with the default spread: sd equal to half the location, which
/// keeps the folded density's mode away from zero.
pub fn default_decay_prior(max_distance: f64) -> Result<DecayPrior> {
    let location = -PRACTICAL_RANGE_CORRELATION.ln() / (max_distance / 2.0);
    folded_normal_decay_prior(max_distance, 0.5 * location)
}

/// Prior scales shared by the propensity and outcome models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Normal(0, sd²) on every fixed effect.
    pub fixed_effect_sd: f64,
    /// Half-Cauchy(0, scale) on random-effect standard deviations.
    pub re_scale_prior: f64,
    /// Required for spatial random effects.
    pub decay: Option<DecayPrior>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            fixed_effect_sd: 10.0,
            re_scale_prior: 1.0,
            decay: None,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.fixed_effect_sd) || !positive(self.re_scale_prior) {
            return Err(Error::invalid("prior scales must be strictly positive"));
        }
        if let Some(d) = self.decay {
            if !positive(d.location) || !positive(d.sd) {
                return Err(Error::invalid(
                    "decay prior location and sd must be strictly positive",
                ));
            }
        }
        Ok(())
    }

    pub fn with_decay(mut self, decay: DecayPrior) -> Self {
        self.decay = Some(decay);
        self
    }
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

#[inline]
pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - LN_SQRT_2PI
}

#[inline]
pub fn half_cauchy_ln_pdf(x: f64, scale: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let r = x / scale;
    (2.0 / (PI * scale)).ln() - r.mul_add(r, 1.0).ln()
}

/// Density of |X| for X ~ Normal(location, sd²).
pub fn folded_normal_ln_pdf(x: f64, location: f64, sd: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    let a = normal_ln_pdf(x, location, sd);
    let b = normal_ln_pdf(x, -location, sd);
    let hi = a.max(b);
    hi + ((a - hi).exp() + (b - hi).exp()).ln()
}
