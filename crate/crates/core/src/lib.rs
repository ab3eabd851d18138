//! Bayesian multilevel propensity-score regression for average treatment
//! effects under unmeasured cluster-level confounding.
//!
//! The crate is organised around the plug-in two-step procedure: a
//! propensity model (optionally with iid or spatially structured cluster
//! random effects) is fitted first, a point estimate of the propensity score
//! is frozen, and the outcome model is fitted treating that score as a known
//! covariate. The average treatment effect posterior is then obtained by
//! averaging the outcome regression over the observed units for every
//! posterior draw.
//!
//! Modules:
//! - [`model`]: datasets, cluster bookkeeping, correlation kernels, priors.
//! - [`gaussian`]: the linear-Gaussian case with exact bias and variance of
//!   the treatment coefficient.
//! - [`mcmc`]: Pólya-Gamma Gibbs sampling for logistic mixed models and
//!   convergence diagnostics.
//! - [`pipeline`]: the two-step causal procedure and ATE posteriors.
//! - [`diagnostics`]: SMD balance tables, positivity, WAIC and PSIS-LOO.
//! - [`sim`]: reproducible Monte Carlo drivers for both simulation studies.
//! - [`tb`]: ingestion of the tuberculosis cohort file.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod gaussian;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod pipeline;
pub mod polya_gamma;
pub mod rng;
pub mod sim;
pub mod tb;

pub use error::{Error, Result};
pub use model::{ClusterMap, CorrelationModel, Dataset, PriorSpec};

/// Logistic function `1 / (1 + exp(-a))`, evaluated without overflow.
#[inline]
pub fn expit(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(a))`, evaluated without overflow.
#[inline]
pub fn log1p_exp(a: f64) -> f64 {
    if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expit_is_stable_at_extremes() {
        assert_eq!(expit(0.0), 0.5);
        assert!((expit(800.0) - 1.0).abs() < 1e-300);
        assert!(expit(-800.0) >= 0.0);
        assert!((expit(2.0) + expit(-2.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log1p_exp_matches_naive_in_safe_range() {
        for a in [-30.0, -2.0, 0.0, 1.5, 30.0] {
            let naive = (1.0f64 + f64::exp(a)).ln();
            assert!((log1p_exp(a) - naive).abs() < 1e-12);
        }
        assert!((log1p_exp(1000.0) - 1000.0).abs() < 1e-12);
    }
}
