//! Linear-Gaussian exposure and outcome with cluster-level confounders.
//!
//! Data follow
//!
//! ```text
//! Z = α0 + αX·X + A·T + ε,      ε ~ N(0, ϱ²I)
//! Y = βZ·Z + βX·X + A·W + ε',   ε' ~ N(0, κ²I)
//! (T_j, W_j) ~ N((μT, μW), [[σT², ρσTσW], [ρσTσW, σW²]])  iid over clusters
//! ```
//!
//! Because every variance is known, the outcome estimators are linear in `Y`
//! (`β̂ = G·Y`), and their conditional bias and variance given `(Z, X)` follow
//! from the conditional Gaussian moments of `Y`. Four fitted models cross a
//! balancing score with or without a cluster random effect against an outcome
//! regression with or without one (MD1..MD4).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, ClusterCompound};
use crate::model::Dataset;
use crate::rng::stream_rng;

/// Generative parameters of the linear study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSimConfig {
    pub m: usize,
    pub n: usize,
    pub alpha0: f64,
    pub alpha_x: f64,
    pub beta_z: f64,
    pub beta_x: f64,
    /// Outcome noise SD.
    pub kappa: f64,
    /// Exposure noise SD.
    pub varrho: f64,
    pub sigma_t: f64,
    pub sigma_w: f64,
    pub rho_tw: f64,
    pub mu_t: f64,
    pub mu_w: f64,
    /// Fit the outcome regression without an intercept.
    pub zero_intercept_outcome: bool,
}

impl Default for LinearSimConfig {
    fn default() -> Self {
        Self {
            m: 50,
            n: 2,
            alpha0: 1.0,
            alpha_x: 1.0,
            beta_z: 1.0,
            beta_x: 1.0,
            kappa: 1.0,
            varrho: 1.0,
            sigma_t: 1.0,
            sigma_w: 1.0,
            rho_tw: 0.0,
            mu_t: 0.0,
            mu_w: 0.0,
            zero_intercept_outcome: false,
        }
    }
}

impl LinearSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n < 1 {
            return Err(Error::invalid(format!(
                "need m >= 2 and n >= 1, got m={} n={}",
                self.m, self.n
            )));
        }
        if !(self.rho_tw.abs() <= 1.0) {
            return Err(Error::invalid(format!(
                "|rho_TW| must be <= 1, got {}",
                self.rho_tw
            )));
        }
        for (name, v) in [
            ("kappa", self.kappa),
            ("varrho", self.varrho),
            ("sigma_T", self.sigma_t),
            ("sigma_W", self.sigma_w),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        let all = [
            self.alpha0,
            self.alpha_x,
            self.beta_z,
            self.beta_x,
            self.mu_t,
            self.mu_w,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear simulation config".into()));
        }
        Ok(())
    }
}

/// A simulated dataset together with the latent cluster confounders.
#[derive(Debug, Clone)]
pub struct LinearSample {
    pub dataset: Dataset,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
}

pub fn generate_linear(cfg: &LinearSimConfig, seed: u64) -> Result<LinearSample> {
    generate_linear_with(cfg, &mut stream_rng(seed, 0))
}

/// Draw order: X (N), two standard normals per cluster for (T, W), exposure
/// noise (N), outcome noise (N). `W` is built as `ρ·e1 + sqrt(1-ρ²)·e2` on the
/// same `e1` as `T`, so replicates sharing a stream differ across `ρ` only
/// through `W`.
pub fn generate_linear_with<R: Rng + ?Sized>(
    cfg: &LinearSimConfig,
    rng: &mut R,
) -> Result<LinearSample> {
    cfg.validate()?;
    let (m, n) = (cfg.m, cfg.n);
    let big_n = m * n;
    let mut normal = || -> f64 { StandardNormal.sample(rng) };
    let x: Vec<f64> = (0..big_n).map(|_| normal()).collect();
    let mut t = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    let rho = cfg.rho_tw;
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    for _ in 0..m {
        let e1 = normal();
        let e2 = normal();
        t.push(cfg.mu_t + cfg.sigma_t * e1);
        w.push(cfg.mu_w + cfg.sigma_w * (rho * e1 + tail * e2));
    }
    let ids: Vec<i64> = (0..big_n).map(|i| (i / n) as i64 + 1).collect();
    let z: Vec<f64> = (0..big_n)
        .map(|i| cfg.alpha0 + cfg.alpha_x * x[i] + t[i / n] + cfg.varrho * normal())
        .collect();
    let y: Vec<f64> = (0..big_n)
        .map(|i| cfg.beta_z * z[i] + cfg.beta_x * x[i] + w[i / n] + cfg.kappa * normal())
        .collect();
    let dataset = Dataset::new(y, z, DMatrix::from_vec(big_n, 1, x), vec!["x".into()], &ids)?;
    Ok(LinearSample { dataset, t, w })
}

/// `[1 | covariates]`.
fn exposure_design(ds: &Dataset) -> DMatrix<f64> {
    let p = ds.covariates.ncols();
    DMatrix::from_fn(ds.n(), p + 1, |i, c| {
        if c == 0 {
            1.0
        } else {
            ds.covariates[(i, c - 1)]
        }
    })
}

/// OLS fitted values of the exposure on an intercept plus covariates.
pub fn balancing_score_fixed(ds: &Dataset) -> Result<Vec<f64>> {
    let xt = exposure_design(ds);
    let g = linalg::ols_projection(&xt)?;
    let alpha = &g * DVector::from_column_slice(&ds.exposure);
    Ok((&xt * alpha).iter().copied().collect())
}

#[derive(Debug, Clone)]
pub struct MixedBalancingScore {
    pub score: Vec<f64>,
    /// GLS coefficients `(α̂0, α̂X..)`.
    pub alpha_hat: Vec<f64>,
    /// BLUP of the cluster effects.
    pub nu_hat: Vec<f64>,
}

/// Balancing score from the exposure mixed model with known `σT` and noise SD:
/// GLS fixed effects under `σT²AAᵀ + ϱ²I` plus the BLUP
/// `ν̂ = σT²Aᵀ(σT²AAᵀ + ϱ²I)⁻¹(Z - X̃α̂)`.
pub fn balancing_score_mixed(
    ds: &Dataset,
    sigma_t: f64,
    noise_sd: f64,
) -> Result<MixedBalancingScore> {
    if !(sigma_t >= 0.0) || !(noise_sd > 0.0) {
        return Err(Error::invalid(format!(
            "sigma_T must be >= 0 and the noise SD positive, got {sigma_t}, {noise_sd}"
        )));
    }
    let xt = exposure_design(ds);
    let cov = ClusterCompound::new(&ds.clusters, sigma_t * sigma_t, noise_sd * noise_sd)?;
    let g = linalg::gls_projection(&xt, &cov)?;
    let alpha = &g * DVector::from_column_slice(&ds.exposure);
    let fixed = &xt * &alpha;
    let resid: Vec<f64> = ds
        .exposure
        .iter()
        .zip(fixed.iter())
        .map(|(z, f)| z - f)
        .collect();
    let nu_hat: Vec<f64> = ds
        .clusters
        .cluster_sums(&cov.solve(&resid))
        .into_iter()
        .map(|s| sigma_t * sigma_t * s)
        .collect();
    let score = fixed
        .iter()
        .zip(ds.clusters.assignment())
        .map(|(f, &j)| f + nu_hat[j])
        .collect();
    Ok(MixedBalancingScore {
        score,
        alpha_hat: alpha.iter().copied().collect(),
        nu_hat,
    })
}

/// Which of the two balancing scores feeds the outcome model, and whether the
/// outcome model carries a cluster random effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinearModelVariant {
    pub exposure_re: bool,
    pub outcome_re: bool,
}

impl LinearModelVariant {
    pub const MD1: Self = Self {
        exposure_re: false,
        outcome_re: false,
    };
    pub const MD2: Self = Self {
        exposure_re: true,
        outcome_re: false,
    };
    pub const MD3: Self = Self {
        exposure_re: false,
        outcome_re: true,
    };
    pub const MD4: Self = Self {
        exposure_re: true,
        outcome_re: true,
    };
    pub const ALL: [Self; 4] = [Self::MD1, Self::MD2, Self::MD3, Self::MD4];

    pub fn label(&self) -> &'static str {
        match (self.exposure_re, self.outcome_re) {
            (false, false) => "MD1",
            (true, false) => "MD2",
            (false, true) => "MD3",
            (true, true) => "MD4",
        }
    }
}

/// A fitted linear outcome regression, `β̂ = G·Y`.
#[derive(Debug, Clone)]
pub struct EstimatorReport {
    pub variant: LinearModelVariant,
    /// k×N projection; k = 3 with an intercept, 2 without.
    pub g: DMatrix<f64>,
    pub beta_hat: DVector<f64>,
    /// Row of `g` (and entry of `beta_hat`) for the exposure coefficient.
    pub z_index: usize,
    pub intercept: bool,
}

impl EstimatorReport {
    pub fn beta_z(&self) -> f64 {
        self.beta_hat[self.z_index]
    }

    pub fn z_row(&self) -> Vec<f64> {
        self.g.row(self.z_index).iter().copied().collect()
    }
}

/// Regresses the outcome on `[1 | Z | BS]` (or `[Z | BS]` for the zero-intercept
/// variant): OLS without an outcome random effect, GLS under the known
/// `σW²AAᵀ + κ²I` with one.
pub fn fit_linear_outcome(
    ds: &Dataset,
    bs: &[f64],
    variant: LinearModelVariant,
    cfg: &LinearSimConfig,
) -> Result<EstimatorReport> {
    if bs.len() != ds.n() {
        return Err(Error::dims(format!(
            "balancing score has {} entries for {} units",
            bs.len(),
            ds.n()
        )));
    }
    let intercept = !cfg.zero_intercept_outcome;
    let offset = usize::from(intercept);
    let h = DMatrix::from_fn(ds.n(), 2 + offset, |i, c| match c + 1 - offset {
        0 => 1.0,
        1 => ds.exposure[i],
        _ => bs[i],
    });
    let g = if variant.outcome_re {
        let cov = ClusterCompound::new(
            &ds.clusters,
            cfg.sigma_w * cfg.sigma_w,
            cfg.kappa * cfg.kappa,
        )?;
        linalg::gls_projection(&h, &cov)?
    } else {
        linalg::ols_projection(&h)?
    };
    let beta_hat = &g * DVector::from_column_slice(&ds.outcome);
    Ok(EstimatorReport {
        variant,
        g,
        beta_hat,
        z_index: offset,
        intercept,
    })
}

fn check_dims(cfg: &LinearSimConfig, ds: &Dataset) -> Result<()> {
    if ds.covariates.ncols() != 1 {
        return Err(Error::dims(format!(
            "linear study expects one covariate, dataset has {}",
            ds.covariates.ncols()
        )));
    }
    if ds.n() != cfg.m * cfg.n && cfg.m * cfg.n != 0 {
        // Unbalanced data are allowed; only warn through the error path when
        // the cluster count disagrees.
        if ds.m() != cfg.m {
            return Err(Error::dims(format!(
                "config has m={}, dataset has {} clusters",
                cfg.m,
                ds.m()
            )));
        }
    }
    Ok(())
}

/// `ρσTσW·AAᵀΣ_{Z|X}⁻¹(Z - (α0+μT)1 - αX·X)`, the confounding shift in `E(Y|Z,X)`.
fn confounding_shift(cfg: &LinearSimConfig, ds: &Dataset) -> Result<Vec<f64>> {
    let cov = ClusterCompound::new(
        &ds.clusters,
        cfg.sigma_t * cfg.sigma_t,
        cfg.varrho * cfg.varrho,
    )?;
    let resid: Vec<f64> = ds
        .exposure
        .iter()
        .zip(ds.covariates.column(0).iter())
        .map(|(z, x)| z - (cfg.alpha0 + cfg.mu_t) - cfg.alpha_x * x)
        .collect();
    let per_cluster = ds.clusters.cluster_sums(&cov.solve(&resid));
    let k = cfg.rho_tw * cfg.sigma_t * cfg.sigma_w;
    Ok(ds
        .clusters
        .expand(&per_cluster)
        .into_iter()
        .map(|v| k * v)
        .collect())
}

/// `E(Y | Z, X)` in O(N).
pub fn conditional_mean_y(cfg: &LinearSimConfig, ds: &Dataset) -> Result<Vec<f64>> {
    check_dims(cfg, ds)?;
    let shift = confounding_shift(cfg, ds)?;
    Ok((0..ds.n())
        .map(|i| {
            cfg.beta_z * ds.exposure[i] + cfg.beta_x * ds.covariates[(i, 0)] + cfg.mu_w + shift[i]
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Mean and dense covariance of `Y | Z, X`:
/// `κ²I + σW²A(I - ρ²σT²AᵀΣ_{Z|X}⁻¹A)Aᵀ`.
pub fn conditional_moments_y(cfg: &LinearSimConfig, ds: &Dataset) -> Result<ConditionalMoments> {
    let mean = DVector::from_vec(conditional_mean_y(cfg, ds)?);
    let a = ds.clusters.incidence();
    let cov_z = ClusterCompound::new(
        &ds.clusters,
        cfg.sigma_t * cfg.sigma_t,
        cfg.varrho * cfg.varrho,
    )?;
    let at_sinv_a = a.transpose() * cov_z.solve_matrix(&a);
    let m = ds.m();
    let rho2s2 = cfg.rho_tw * cfg.rho_tw * cfg.sigma_t * cfg.sigma_t;
    let inner = DMatrix::<f64>::identity(m, m) - at_sinv_a * rho2s2;
    let mut cov = &a * inner * a.transpose() * (cfg.sigma_w * cfg.sigma_w);
    for i in 0..ds.n() {
        cov[(i, i)] += cfg.kappa * cfg.kappa;
    }
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(ConditionalMoments { mean, cov })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    pub bias_z: f64,
    pub var_z: f64,
}

impl BiasVariance {
    pub fn rmse(&self) -> f64 {
        (self.var_z + self.bias_z * self.bias_z).sqrt()
    }
}

/// Exact conditional bias and variance of `β̂Z` given `(Z, X)`.
///
/// With an intercept, `G·1` and `G·Z` are unit vectors, so only `βX·X` and the
/// confounding shift contribute to the bias. Without one, the `μW·1` term of
/// the conditional mean is projected as well.
pub fn theoretical_bias_variance(
    report: &EstimatorReport,
    cfg: &LinearSimConfig,
    ds: &Dataset,
) -> Result<BiasVariance> {
    check_dims(cfg, ds)?;
    if report.g.ncols() != ds.n() {
        return Err(Error::dims(format!(
            "projection has {} columns for {} units",
            report.g.ncols(),
            ds.n()
        )));
    }
    let g = report.z_row();
    let shift = confounding_shift(cfg, ds)?;
    let mut bias = (0..ds.n())
        .map(|i| g[i] * (cfg.beta_x * ds.covariates[(i, 0)] + shift[i]))
        .sum::<f64>();
    if !report.intercept {
        bias += cfg.mu_w * g.iter().sum::<f64>();
    }

    // gᵀ Var(Y|Z,X) g = κ²‖g‖² + σW²(‖Aᵀg‖² - ρ²σT²·(AAᵀg)ᵀΣ⁻¹(AAᵀg))
    let u = ds.clusters.cluster_sums(&g);
    let au = ds.clusters.expand(&u);
    let cov_z = ClusterCompound::new(
        &ds.clusters,
        cfg.sigma_t * cfg.sigma_t,
        cfg.varrho * cfg.varrho,
    )?;
    let quad = linalg::dot(&au, &cov_z.solve(&au));
    let var = cfg.kappa * cfg.kappa * linalg::dot(&g, &g)
        + cfg.sigma_w
            * cfg.sigma_w
            * (linalg::dot(&u, &u) - cfg.rho_tw * cfg.rho_tw * cfg.sigma_t * cfg.sigma_t * quad);
    Ok(BiasVariance {
        bias_z: bias,
        var_z: var,
    })
}

/// Fits MD1..MD4 on one dataset and returns their exact bias and variance in
/// that order.
pub fn analyze_all_variants(cfg: &LinearSimConfig, ds: &Dataset) -> Result<[BiasVariance; 4]> {
    let bs_hat = balancing_score_fixed(ds)?;
    let bs_tilde = balancing_score_mixed(ds, cfg.sigma_t, cfg.varrho)?.score;
    let mut out = [BiasVariance {
        bias_z: 0.0,
        var_z: 0.0,
    }; 4];
    for (slot, variant) in out.iter_mut().zip(LinearModelVariant::ALL) {
        let bs = if variant.exposure_re {
            &bs_tilde
        } else {
            &bs_hat
        };
        let report = fit_linear_outcome(ds, bs, variant, cfg)?;
        *slot = theoretical_bias_variance(&report, cfg, ds)?;
    }
    Ok(out)
}
