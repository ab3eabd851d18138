//! Posterior sampling for Bayesian logistic regression with optional cluster
//! random effects, plus convergence diagnostics.
//!
//! The model is
//!
//! ```text
//! y_i ~ Bernoulli(expit(x_iᵀβ + η_{j(i)}))
//! β_k ~ N(0, s_k²)
//! η ~ N(0, φ²I)  or  N(0, φ²R(λ)),  R_jk = exp(-λ‖s_j - s_k‖)
//! φ ~ Half-Cauchy(0, c),  λ ~ folded normal
//! ```
//!
//! Each iteration draws Pólya-Gamma weights for every observation, which makes
//! the conditional of `(β, η)` Gaussian; β and η are then drawn jointly. The
//! scale φ takes a random-walk step with η integrated out given the weights
//! and, after the joint draw, a conjugate update through the inverse-gamma
//! mixture form of the half-Cauchy prior and a joint rescale of `(η, φ)`. The decay λ takes an adaptive random-walk step on `log λ`.

use std::io::Write;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::{
    default_decay_prior, exponential_correlation, half_cauchy_ln_pdf, max_pairwise_distance,
    normal_ln_pdf, with_jitter, ClusterMap, DecayPrior, PriorSpec, DEFAULT_JITTER,
};
use crate::polya_gamma::sample_pg1;
use crate::rng::{stream_id, stream_rng};
use crate::{expit, log1p_exp};

/// R-hat threshold used as the convergence gate.
pub const RHAT_THRESHOLD: f64 = 1.06;

pub const INTERCEPT: &str = "(Intercept)";

/// Random-effect structure of a logistic model.
#[derive(Debug, Clone, PartialEq)]
pub enum RandomEffect {
    None,
    Iid(ClusterMap),
    /// Cluster map plus m×2 centroids in cluster order.
    Spatial(ClusterMap, DMatrix<f64>),
}

impl RandomEffect {
    pub fn clusters(&self) -> Option<&ClusterMap> {
        match self {
            RandomEffect::None => None,
            RandomEffect::Iid(c) | RandomEffect::Spatial(c, _) => Some(c),
        }
    }

    pub fn is_spatial(&self) -> bool {
        matches!(self, RandomEffect::Spatial(..))
    }
}

#[derive(Debug, Clone)]
pub struct LogisticMixedSpec {
    pub design: DMatrix<f64>,
    pub names: Vec<String>,
    pub response: Vec<f64>,
    pub random_effect: RandomEffect,
    pub priors: PriorSpec,
    /// Per-coefficient prior SD overriding `priors.fixed_effect_sd`. A value of
    /// 0 pins the coefficient at 0.
    pub coef_prior_sd: Vec<Option<f64>>,
    /// Holds the random-effect SD at this value instead of sampling it.
    pub fixed_re_sd: Option<f64>,
    pub jitter: f64,
}

impl LogisticMixedSpec {
    pub fn new(design: DMatrix<f64>, names: Vec<String>, response: Vec<f64>) -> Result<Self> {
        let spec = Self {
            coef_prior_sd: vec![None; design.ncols()],
            design,
            names,
            response,
            random_effect: RandomEffect::None,
            priors: PriorSpec::default(),
            fixed_re_sd: None,
            jitter: DEFAULT_JITTER,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_random_effect(mut self, re: RandomEffect) -> Result<Self> {
        self.random_effect = re;
        self.validate()?;
        Ok(self)
    }

    pub fn with_priors(mut self, priors: PriorSpec) -> Result<Self> {
        self.priors = priors;
        self.validate()?;
        Ok(self)
    }

    pub fn with_coef_prior_sd(mut self, name: &str, sd: f64) -> Result<Self> {
        let k = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if !(sd >= 0.0 && sd.is_finite()) {
            return Err(Error::invalid(format!(
                "prior sd for {name} must be >= 0, got {sd}"
            )));
        }
        self.coef_prior_sd[k] = Some(sd);
        Ok(self)
    }

    pub fn with_fixed_re_sd(mut self, sd: f64) -> Result<Self> {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(Error::invalid(format!(
                "fixed random-effect sd must be positive, got {sd}"
            )));
        }
        self.fixed_re_sd = Some(sd);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, q) = self.design.shape();
        if q == 0 {
            return Err(Error::invalid("design needs at least one column"));
        }
        if n == 0 {
            return Err(Error::Empty("design rows"));
        }
        if self.names.len() != q || self.response.len() != n || self.coef_prior_sd.len() != q {
            return Err(Error::dims(format!(
                "design {n}x{q}, {} names, {} responses",
                self.names.len(),
                self.response.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.names.iter().all(|s| seen.insert(s.as_str())) {
            return Err(Error::invalid("coefficient names must be unique"));
        }
        if self.response.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::invalid("response must be 0/1"));
        }
        if self.design.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("design".into()));
        }
        self.priors.validate()?;
        if let Some(c) = self.random_effect.clusters() {
            if c.n_units() != n {
                return Err(Error::dims(format!(
                    "cluster map covers {} units, design has {n}",
                    c.n_units()
                )));
            }
        }
        if let RandomEffect::Spatial(c, s) = &self.random_effect {
            if s.nrows() != c.n_clusters() || s.ncols() != 2 {
                return Err(Error::dims(format!(
                    "centroids are {}x{}, expected {}x2",
                    s.nrows(),
                    s.ncols(),
                    c.n_clusters()
                )));
            }
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.random_effect.clusters().map_or(0, |c| c.n_clusters())
    }

    fn prior_sd(&self, k: usize) -> f64 {
        self.coef_prior_sd[k].unwrap_or(self.priors.fixed_effect_sd)
    }

    fn decay_prior(&self) -> Result<Option<DecayPrior>> {
        match &self.random_effect {
            RandomEffect::Spatial(_, s) => match self.priors.decay {
                Some(d) => Ok(Some(d)),
                None => {
                    let dmax = max_pairwise_distance(s);
                    if !(dmax > 0.0) {
                        return Err(Error::invalid(
                            "all centroids coincide; supply a decay prior explicitly",
                        ));
                    }
                    default_decay_prior(dmax).map(Some)
                }
            },
            _ => Ok(None),
        }
    }

    /// Names of the parameter vector used by [`log_posterior`]:
    /// coefficients, `re[label]`, then `log_re_sd` and `log_decay` when present.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = self.names.clone();
        if let Some(c) = self.random_effect.clusters() {
            out.extend(c.labels().iter().map(|l| format!("re[{l}]")));
            if self.fixed_re_sd.is_none() {
                out.push("log_re_sd".into());
            }
        }
        if self.random_effect.is_spatial() {
            out.push("log_decay".into());
        }
        out
    }

    /// Names of the columns of a [`PosteriorSample`], with scales on their
    /// natural scale.
    pub fn draw_names(&self) -> Vec<String> {
        let mut out = self.names.clone();
        if let Some(c) = self.random_effect.clusters() {
            out.extend(c.labels().iter().map(|l| format!("re[{l}]")));
            out.push("re_sd".into());
        }
        if self.random_effect.is_spatial() {
            out.push("decay".into());
        }
        out
    }
}

/// Terms of the log posterior, each including its normalising constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogPosteriorTerms {
    pub loglik: f64,
    pub fixed_prior: f64,
    pub re_prior: f64,
    /// Half-Cauchy log density plus the log-scale Jacobian.
    pub scale_prior: f64,
    /// Folded-normal log density plus the log-scale Jacobian.
    pub decay_prior: f64,
}

impl LogPosteriorTerms {
    pub fn total(&self) -> f64 {
        self.loglik + self.fixed_prior + self.re_prior + self.scale_prior + self.decay_prior
    }
}

struct SpatialFactor {
    decay: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl SpatialFactor {
    fn new(centroids: &DMatrix<f64>, decay: f64, jitter: f64) -> Result<Self> {
        let r = with_jitter(exponential_correlation(centroids, decay)?, jitter);
        let chol = r.cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite(format!("spatial correlation at decay {decay}"))
        })?;
        let log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        Ok(Self {
            decay,
            chol,
            log_det,
        })
    }

    /// `ηᵀR⁻¹η`.
    fn quad(&self, eta: &[f64]) -> f64 {
        let v = DVector::from_column_slice(eta);
        let w = self.chol.solve(&v);
        v.dot(&w)
    }

    fn precision(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

fn loglik_from_eta(spec: &LogisticMixedSpec, xb: &[f64], eta: &[f64]) -> f64 {
    let asg = spec.random_effect.clusters().map(|c| c.assignment());
    spec.response
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let a = xb[i] + asg.map_or(0.0, |a| eta[a[i]]);
            y * a - log1p_exp(a)
        })
        .sum()
}

fn fixed_prior(spec: &LogisticMixedSpec, beta: &[f64]) -> f64 {
    beta.iter()
        .enumerate()
        .filter_map(|(k, &b)| {
            let sd = spec.prior_sd(k);
            (sd > 0.0).then(|| normal_ln_pdf(b, 0.0, sd))
        })
        .sum()
}

fn iid_re_prior(eta: &[f64], phi: f64) -> f64 {
    eta.iter().map(|&e| normal_ln_pdf(e, 0.0, phi)).sum()
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn spatial_re_prior(quad: f64, log_det: f64, m: usize, phi: f64) -> f64 {
    -0.5 * m as f64 * LN_2PI - m as f64 * phi.ln() - 0.5 * log_det - 0.5 * quad / (phi * phi)
}

/// Fixed effects, random effects, log scale, log decay.
type Blocks<'a> = (&'a [f64], &'a [f64], f64, Option<f64>);

/// Splits an unconstrained parameter vector into its blocks.
fn unpack<'a>(spec: &LogisticMixedSpec, theta: &'a [f64]) -> Result<Blocks<'a>> {
    let q = spec.design.ncols();
    let m = spec.n_clusters();
    let has_re = spec.random_effect.clusters().is_some();
    let n_scale = usize::from(has_re && spec.fixed_re_sd.is_none());
    let n_decay = usize::from(spec.random_effect.is_spatial());
    let d = q + m + n_scale + n_decay;
    if theta.len() != d {
        return Err(Error::dims(format!(
            "parameter vector has {} entries, expected {d}",
            theta.len()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameter vector".into()));
    }
    let phi = match spec.fixed_re_sd {
        Some(s) => s,
        None if has_re => theta[q + m].exp(),
        None => f64::NAN,
    };
    let decay = (n_decay == 1).then(|| theta[d - 1].exp());
    Ok((&theta[..q], &theta[q..q + m], phi, decay))
}

/// Log posterior terms at an unconstrained parameter vector laid out as in
/// [`LogisticMixedSpec::parameter_names`].
pub fn log_posterior_terms(spec: &LogisticMixedSpec, theta: &[f64]) -> Result<LogPosteriorTerms> {
    spec.validate()?;
    let (beta, eta, phi, decay) = unpack(spec, theta)?;
    let xb: Vec<f64> = (&spec.design * DVector::from_column_slice(beta))
        .iter()
        .copied()
        .collect();
    let loglik = loglik_from_eta(spec, &xb, eta);
    let mut terms = LogPosteriorTerms {
        loglik,
        fixed_prior: fixed_prior(spec, beta),
        re_prior: 0.0,
        scale_prior: 0.0,
        decay_prior: 0.0,
    };
    match &spec.random_effect {
        RandomEffect::None => {}
        RandomEffect::Iid(_) => terms.re_prior = iid_re_prior(eta, phi),
        RandomEffect::Spatial(_, s) => {
            let lambda = decay.expect("spatial layout has a decay slot");
            let f = SpatialFactor::new(s, lambda, spec.jitter)?;
            terms.re_prior = spatial_re_prior(f.quad(eta), f.log_det, eta.len(), phi);
            let prior = spec.decay_prior()?.expect("spatial spec has a decay prior");
            terms.decay_prior = prior.ln_pdf(lambda) + lambda.ln();
        }
    }
    if spec.random_effect.clusters().is_some() && spec.fixed_re_sd.is_none() {
        terms.scale_prior = half_cauchy_ln_pdf(phi, spec.priors.re_scale_prior) + phi.ln();
    }
    Ok(terms)
}

pub fn log_posterior(spec: &LogisticMixedSpec, theta: &[f64]) -> Result<f64> {
    Ok(log_posterior_terms(spec, theta)?.total())
}

/// Penalised maximum-likelihood fit of the fixed effects (random effects at
/// zero) by Newton's method. Returns the mode and the inverse negative Hessian
/// restricted to the free coefficients.
pub fn fixed_effect_mode(spec: &LogisticMixedSpec) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let q = spec.design.ncols();
    let free: Vec<usize> = (0..q).filter(|&k| spec.prior_sd(k) > 0.0).collect();
    let x = &spec.design;
    let mut beta = vec![0.0; q];
    let zeros = vec![0.0; spec.n_clusters()];
    let objective = |b: &[f64]| {
        let xb: Vec<f64> = (x * DVector::from_column_slice(b))
            .iter()
            .copied()
            .collect();
        loglik_from_eta(spec, &xb, &zeros) + fixed_prior(spec, b)
    };
    let hessian = |b: &[f64]| -> (DVector<f64>, DMatrix<f64>) {
        let xb = x * DVector::from_column_slice(b);
        let f = free.len();
        let mut grad = DVector::zeros(f);
        let mut h = DMatrix::zeros(f, f);
        for i in 0..x.nrows() {
            let p = expit(xb[i]);
            let w = p * (1.0 - p);
            let r = spec.response[i] - p;
            for (a, &ka) in free.iter().enumerate() {
                let xa = x[(i, ka)];
                grad[a] += r * xa;
                for (c, &kc) in free.iter().enumerate().skip(a) {
                    h[(a, c)] += w * xa * x[(i, kc)];
                }
            }
        }
        for (a, &ka) in free.iter().enumerate() {
            let sd = spec.prior_sd(ka);
            grad[a] -= b[ka] / (sd * sd);
            h[(a, a)] += 1.0 / (sd * sd);
            for c in 0..a {
                h[(a, c)] = h[(c, a)];
            }
        }
        (grad, h)
    };
    let mut current = objective(&beta);
    for _ in 0..100 {
        let (grad, h) = hessian(&beta);
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("logistic information matrix".into()))?;
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let mut trial = beta.clone();
            for (a, &k) in free.iter().enumerate() {
                trial[k] += t * step[a];
            }
            let val = objective(&trial);
            if val >= current - 1e-12 {
                beta = trial;
                let delta = val - current;
                current = val;
                improved = delta.abs() > 1e-10;
                break;
            }
            t *= 0.5;
        }
        if !improved || step.amax() * t < 1e-10 {
            break;
        }
    }
    let (_, h) = hessian(&beta);
    let cov = h
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("logistic information matrix".into()))?
        .inverse();
    Ok((beta, cov))
}

/// MCMC budget and reproducibility settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub chains: usize,
    /// Iterations per chain, warmup included.
    pub iterations: usize,
    pub warmup: usize,
    pub seed: u64,
    pub rhat_threshold: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            chains: 2,
            iterations: 1500,
            warmup: 500,
            seed: 1,
            rhat_threshold: RHAT_THRESHOLD,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.chains < 1 || self.warmup < 1 || self.iterations <= self.warmup {
            return Err(Error::invalid(format!(
                "need chains >= 1 and iterations > warmup >= 1, got {} chains, {} iterations, {} warmup",
                self.chains, self.iterations, self.warmup
            )));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        self.iterations - self.warmup
    }
}

/// Post-warmup draws, one row per draw, ordered by chain then iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSample {
    pub draws: DMatrix<f64>,
    pub names: Vec<String>,
    pub chain_id: Vec<usize>,
    pub iteration: Vec<usize>,
    pub warmup_dropped: usize,
    /// Columns that were sampled (pinned coefficients and fixed scales are not).
    pub monitored: Vec<bool>,
}

impl PosteriorSample {
    pub fn new(
        draws: DMatrix<f64>,
        names: Vec<String>,
        chain_id: Vec<usize>,
        warmup_dropped: usize,
    ) -> Result<Self> {
        let (l, d) = draws.shape();
        if l == 0 {
            return Err(Error::Empty("posterior draws"));
        }
        if names.len() != d || chain_id.len() != l {
            return Err(Error::dims(format!(
                "{l}x{d} draws, {} names, {} chain ids",
                names.len(),
                chain_id.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if !names.iter().all(|s| seen.insert(s.as_str())) {
            return Err(Error::invalid("parameter names must be unique"));
        }
        let mut counter = std::collections::HashMap::new();
        let iteration = chain_id
            .iter()
            .map(|c| {
                let e = counter.entry(*c).or_insert(0usize);
                *e += 1;
                warmup_dropped + *e
            })
            .collect();
        let sizes: std::collections::BTreeSet<usize> = counter.values().copied().collect();
        if sizes.len() > 1 {
            return Err(Error::invalid("chains must have equal length"));
        }
        Ok(Self {
            draws,
            names,
            chain_id,
            iteration,
            warmup_dropped,
            monitored: vec![true; d],
        })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.nrows()
    }

    pub fn n_chains(&self) -> usize {
        let mut ids: Vec<usize> = self.chain_id.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let k = self.index_of(name)?;
        Ok(self.draws.column(k).iter().copied().collect())
    }

    /// Draws of column `k` split by chain, in chain-id order.
    pub fn by_chain(&self, k: usize) -> Vec<Vec<f64>> {
        let mut ids: Vec<usize> = self.chain_id.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.iter()
            .map(|&c| {
                (0..self.n_draws())
                    .filter(|&r| self.chain_id[r] == c)
                    .map(|r| self.draws[(r, k)])
                    .collect()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = self.names.clone();
        header.push("chain".into());
        header.push("iter".into());
        w.write_record(&header)?;
        for r in 0..self.n_draws() {
            let mut rec: Vec<String> = self.draws.row(r).iter().map(|v| format!("{v}")).collect();
            rec.push(self.chain_id[r].to_string());
            rec.push(self.iteration[r].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Posterior means of the named parameters.
pub fn posterior_point(sample: &PosteriorSample, names: &[&str]) -> Result<Vec<f64>> {
    names
        .iter()
        .map(|n| {
            let col = sample.column(n)?;
            Ok(col.iter().sum::<f64>() / col.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub threshold: f64,
    pub pass: bool,
}

impl ConvergenceReport {
    /// Largest R-hat, with NaN ranked above everything.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.names
            .iter()
            .zip(&self.rhat)
            .max_by(|a, b| {
                let ka = if a.1.is_nan() { f64::INFINITY } else { *a.1 };
                let kb = if b.1.is_nan() { f64::INFINITY } else { *b.1 };
                ka.total_cmp(&kb)
            })
            .map(|(n, r)| (n.as_str(), *r))
    }

    pub fn gate(&self) -> Result<()> {
        if self.pass {
            return Ok(());
        }
        let (parameter, rhat) = self
            .worst()
            .map_or(("<none>".to_string(), f64::NAN), |(n, r)| {
                (n.to_string(), r)
            });
        Err(Error::Convergence {
            parameter,
            rhat,
            threshold: self.threshold,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Classic potential scale reduction over the given chains.
fn basic_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_var(c)).sum::<f64>() / chains.len() as f64;
    let b = n * sample_var(&means);
    let var_plus = (n - 1.0) / n * w + b / n;
    if !(w > 0.0) {
        return f64::NAN;
    }
    (var_plus / w).sqrt()
}

/// Normal scores of pooled draws using average ranks for ties.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let flat: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = flat.len();
    let mut idx: Vec<usize> = (0..s).collect();
    idx.sort_by(|&a, &b| flat[a].total_cmp(&flat[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && flat[idx[j + 1]] == flat[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let z: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut pos = 0;
    for c in chains {
        out.push(z[pos..pos + c.len()].to_vec());
        pos += c.len();
    }
    out
}

fn split_halves(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let half = chains[0].len() / 2;
    chains
        .iter()
        .flat_map(|c| {
            let off = c.len() - 2 * half;
            // drop the middle draw of odd-length chains
            [c[..half].to_vec(), c[half + off..].to_vec()]
        })
        .collect()
}

/// Rank-normalised split R-hat: the larger of the bulk and folded values.
/// NaN when a split chain has zero variance or there are too few draws.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    if chains.is_empty() || chains[0].len() < 4 || chains.iter().any(|c| c.len() != chains[0].len())
    {
        return f64::NAN;
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return f64::NAN;
    }
    let split = split_halves(chains);
    if split.iter().any(|c| sample_var(c) <= 0.0) {
        return f64::NAN;
    }
    let bulk = basic_rhat(&rank_normalize(&split));
    let mut flat: Vec<f64> = split.iter().flatten().copied().collect();
    flat.sort_by(|a, b| a.total_cmp(b));
    let s = flat.len();
    let median = if s % 2 == 1 {
        flat[s / 2]
    } else {
        0.5 * (flat[s / 2 - 1] + flat[s / 2])
    };
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|v| (v - median).abs()).collect())
        .collect();
    let tail = basic_rhat(&rank_normalize(&folded));
    if bulk.is_nan() || tail.is_nan() {
        return f64::NAN;
    }
    bulk.max(tail)
}

/// Multi-chain effective sample size with Geyer's initial monotone sequence.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m == 0 || chains[0].len() < 4 || chains.iter().any(|c| c.len() != chains[0].len()) {
        return f64::NAN;
    }
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let autocov = |c: &[f64], mu: f64, t: usize| -> f64 {
        (0..n - t)
            .map(|i| (c[i] - mu) * (c[i + t] - mu))
            .sum::<f64>()
            / n as f64
    };
    let var_c: Vec<f64> = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| autocov(c, mu, 0) * n as f64 / (n as f64 - 1.0))
        .collect();
    let w = mean(&var_c);
    let b_over_n = if m > 1 { sample_var(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |t: usize| -> f64 {
        let ac = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocov(c, mu, t))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - ac) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let mut p = rho(t) + rho(t + 1);
        if p < 0.0 {
            break;
        }
        if p > prev {
            p = prev;
        }
        sum_pairs += p;
        prev = p;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / ((m * n) as f64).log10().max(1.0));
    (m * n) as f64 / tau
}

/// R-hat and ESS for every monitored column.
pub fn rhat(sample: &PosteriorSample, threshold: f64) -> ConvergenceReport {
    let cols: Vec<usize> = (0..sample.names.len())
        .filter(|&k| sample.monitored[k])
        .collect();
    let stats: Vec<(f64, f64)> = cols
        .par_iter()
        .map(|&k| {
            let chains = sample.by_chain(k);
            (split_rhat(&chains), ess(&chains))
        })
        .collect();
    let rh: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let pass = !rh.is_empty() && rh.iter().all(|r| *r < threshold);
    ConvergenceReport {
        names: cols.iter().map(|&k| sample.names[k].clone()).collect(),
        rhat: rh,
        ess: stats.iter().map(|s| s.1).collect(),
        threshold,
        pass,
    }
}

/// Linear predictor for every unit at one draw (a row of the sample laid out
/// as [`LogisticMixedSpec::draw_names`]).
pub fn linear_predictor(spec: &LogisticMixedSpec, row: &[f64]) -> Vec<f64> {
    let q = spec.design.ncols();
    let xb = &spec.design * DVector::from_column_slice(&row[..q]);
    match spec.random_effect.clusters() {
        None => xb.iter().copied().collect(),
        Some(c) => xb
            .iter()
            .zip(c.assignment())
            .map(|(v, &j)| v + row[q + j])
            .collect(),
    }
}

/// Pointwise log-likelihood of unit `i` at every draw.
pub fn pointwise_loglik_column(
    spec: &LogisticMixedSpec,
    sample: &PosteriorSample,
    i: usize,
    out: &mut [f64],
) {
    let q = spec.design.ncols();
    let x = spec.design.row(i);
    let re_col = spec.random_effect.clusters().map(|c| q + c.cluster_of(i));
    let y = spec.response[i];
    for (r, o) in out.iter_mut().enumerate() {
        let mut a = 0.0;
        for k in 0..q {
            a += x[k] * sample.draws[(r, k)];
        }
        if let Some(c) = re_col {
            a += sample.draws[(r, c)];
        }
        *o = y * a - log1p_exp(a);
    }
}

struct Adapt {
    log_step: f64,
    target: f64,
}

impl Adapt {
    fn new(step: f64, target: f64) -> Self {
        Self {
            log_step: step.ln(),
            target,
        }
    }

    fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, accepted: bool, iter: usize, adapting: bool) {
        if adapting {
            let gain = 1.0 / ((iter + 1) as f64).powf(0.6);
            self.log_step += gain * (f64::from(u8::from(accepted)) - self.target);
            self.log_step = self.log_step.clamp(-12.0, 5.0);
        }
    }
}

struct Spatial {
    centroids: DMatrix<f64>,
    factor: SpatialFactor,
    /// `R⁻¹`.
    precision: DMatrix<f64>,
    prior: DecayPrior,
}

impl Spatial {
    fn quad(&self, eta: &[f64]) -> f64 {
        let v = DVector::from_column_slice(eta);
        v.dot(&(&self.precision * &v))
    }
}

/// Draws `N(S⁻¹r, S⁻¹)` given the precision `S`.
fn gaussian_from_precision<R: Rng>(
    s: DMatrix<f64>,
    r: &DVector<f64>,
    rng: &mut R,
) -> Option<DVector<f64>> {
    let s = (&s + s.transpose()) * 0.5;
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => {
            let ridge = 1e-10 * s.diagonal().amax().max(1e-300);
            (s + DMatrix::identity(r.len(), r.len()) * ridge).cholesky()?
        }
    };
    let mean = chol.solve(r);
    let z = DVector::from_fn(r.len(), |_, _| StandardNormal.sample(rng));
    let dev = chol.l_dirty().tr_solve_lower_triangular(&z)?;
    Some(mean + dev)
}

struct Chain<'a, R: Rng> {
    spec: &'a LogisticMixedSpec,
    rng: R,
    chain: usize,
    free: Vec<usize>,
    /// Linear predictor contribution of the pinned coefficients.
    offset: Vec<f64>,
    beta: Vec<f64>,
    xb: Vec<f64>,
    eta: Vec<f64>,
    omega: Vec<f64>,
    log_phi: f64,
    sample_phi: bool,
    spatial: Option<Spatial>,
    collapsed_adapt: Adapt,
    rescale_adapt: Adapt,
    decay_adapt: Adapt,
}

impl<'a, R: Rng> Chain<'a, R> {
    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn uniform_log(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        u.ln()
    }

    fn phi(&self) -> f64 {
        self.spec.fixed_re_sd.unwrap_or_else(|| self.log_phi.exp())
    }

    fn err(&self, iteration: usize, message: impl Into<String>) -> Error {
        Error::Sampler {
            chain: self.chain,
            iteration,
            message: message.into(),
        }
    }

    fn new(
        spec: &'a LogisticMixedSpec,
        mode: &[f64],
        mode_cov: &DMatrix<f64>,
        chain: usize,
        mut rng: R,
    ) -> Result<Self> {
        let q = spec.design.ncols();
        let n = spec.response.len();
        let free: Vec<usize> = (0..q).filter(|&k| spec.prior_sd(k) > 0.0).collect();
        let pinned: Vec<usize> = (0..q).filter(|&k| spec.prior_sd(k) <= 0.0).collect();
        let mut beta = mode.to_vec();
        for &k in &pinned {
            beta[k] = 0.0;
        }
        if let Some(l) = mode_cov.clone().cholesky().map(|c| c.l()) {
            let z: DVector<f64> =
                DVector::from_fn(free.len(), |_, _| StandardNormal.sample(&mut rng));
            let jump = l * z;
            for (a, &k) in free.iter().enumerate() {
                beta[k] += jump[a];
            }
        }
        let offset: Vec<f64> = (0..n)
            .map(|i| pinned.iter().map(|&k| spec.design[(i, k)] * beta[k]).sum())
            .collect();
        let m = spec.n_clusters();
        let eta: Vec<f64> = (0..m)
            .map(|_| 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        let z0: f64 = StandardNormal.sample(&mut rng);
        let log_phi = (0.5f64).ln() + 0.3 * z0;
        let spatial = match &spec.random_effect {
            RandomEffect::Spatial(_, s) => {
                let prior = spec.decay_prior()?.expect("spatial spec has a decay prior");
                let z: f64 = StandardNormal.sample(&mut rng);
                let decay = prior.location.max(prior.sd) * (0.3 * z).exp();
                let factor = SpatialFactor::new(s, decay, spec.jitter)?;
                Some(Spatial {
                    centroids: s.clone(),
                    precision: factor.precision(),
                    factor,
                    prior,
                })
            }
            _ => None,
        };
        let xb = (&spec.design * DVector::from_column_slice(&beta))
            .iter()
            .copied()
            .collect();
        Ok(Self {
            spec,
            rng,
            chain,
            free,
            offset,
            beta,
            xb,
            eta,
            omega: vec![0.0; n],
            log_phi,
            sample_phi: spec.random_effect.clusters().is_some() && spec.fixed_re_sd.is_none(),
            spatial,
            collapsed_adapt: Adapt::new(0.5, 0.44),
            rescale_adapt: Adapt::new(0.1, 0.44),
            decay_adapt: Adapt::new(0.3, 0.44),
        })
    }

    fn loglik(&self, xb: &[f64], eta: &[f64]) -> f64 {
        loglik_from_eta(self.spec, xb, eta)
    }

    fn scale_prior(&self, log_phi: f64) -> f64 {
        half_cauchy_ln_pdf(log_phi.exp(), self.spec.priors.re_scale_prior) + log_phi
    }

    fn update_omega(&mut self) {
        let asg = self.spec.random_effect.clusters().map(|c| c.assignment());
        for i in 0..self.omega.len() {
            let a = self.xb[i] + asg.map_or(0.0, |a| self.eta[a[i]]);
            self.omega[i] = sample_pg1(a, &mut self.rng);
        }
    }

    /// Joint Gaussian draw of the free coefficients and the random effects
    /// given the Pólya-Gamma weights, with the random effects eliminated by a
    /// Schur complement.
    fn update_effects(&mut self, iter: usize) -> Result<()> {
        let spec = self.spec;
        let x = &spec.design;
        let f = self.free.len();
        let n = self.omega.len();
        let r: Vec<f64> = (0..n)
            .map(|i| spec.response[i] - 0.5 - self.omega[i] * self.offset[i])
            .collect();
        let mut q_bb = DMatrix::zeros(f, f);
        let mut b_b = DVector::zeros(f);
        for i in 0..n {
            let w = self.omega[i];
            for (a, &ka) in self.free.iter().enumerate() {
                let xa = x[(i, ka)];
                b_b[a] += xa * r[i];
                let wx = w * xa;
                for (c, &kc) in self.free.iter().enumerate().take(a + 1) {
                    q_bb[(a, c)] += wx * x[(i, kc)];
                }
            }
        }
        for (a, &ka) in self.free.iter().enumerate() {
            let sd = spec.prior_sd(ka);
            q_bb[(a, a)] += 1.0 / (sd * sd);
            for c in 0..a {
                q_bb[(c, a)] = q_bb[(a, c)];
            }
        }

        let Some(clusters) = spec.random_effect.clusters() else {
            let beta_f = gaussian_from_precision(q_bb, &b_b, &mut self.rng).ok_or_else(|| {
                self.err(iter, "fixed-effect conditional is not positive definite")
            })?;
            self.set_beta(&beta_f);
            return Ok(());
        };

        let m = clusters.n_clusters();
        let asg = clusters.assignment();
        let mut b_mat = DMatrix::zeros(f, m);
        let mut d = vec![0.0; m];
        let mut b_e = DVector::zeros(m);
        for i in 0..n {
            let j = asg[i];
            let w = self.omega[i];
            d[j] += w;
            b_e[j] += r[i];
            for (a, &ka) in self.free.iter().enumerate() {
                b_mat[(a, j)] += w * x[(i, ka)];
            }
        }
        let tau = 1.0 / (self.phi() * self.phi());
        let z_eta = DVector::from_fn(m, |_, _| StandardNormal.sample(&mut self.rng));
        let (w_mat, v, dev) = match &self.spatial {
            None => {
                let p_inv: Vec<f64> = d.iter().map(|dj| 1.0 / (dj + tau)).collect();
                let w_mat = DMatrix::from_fn(m, f, |j, a| p_inv[j] * b_mat[(a, j)]);
                let v = DVector::from_fn(m, |j, _| p_inv[j] * b_e[j]);
                let dev = DVector::from_fn(m, |j, _| p_inv[j].sqrt() * z_eta[j]);
                (w_mat, v, dev)
            }
            Some(sp) => {
                let mut p = &sp.precision * tau;
                for j in 0..m {
                    p[(j, j)] += d[j];
                }
                let chol = p.cholesky().ok_or_else(|| {
                    self.err(iter, "random-effect conditional is not positive definite")
                })?;
                let w_mat = chol.solve(&b_mat.transpose());
                let v = chol.solve(&b_e);
                let dev = chol
                    .l_dirty()
                    .tr_solve_lower_triangular(&z_eta)
                    .ok_or_else(|| self.err(iter, "singular random-effect factor"))?;
                (w_mat, v, dev)
            }
        };
        let beta_f = if f > 0 {
            let s = q_bb - &b_mat * &w_mat;
            let rr = b_b - &b_mat * &v;
            gaussian_from_precision(s, &rr, &mut self.rng).ok_or_else(|| {
                self.err(iter, "fixed-effect conditional is not positive definite")
            })?
        } else {
            DVector::zeros(0)
        };
        let eta = v - &w_mat * &beta_f + dev;
        if eta.iter().chain(beta_f.iter()).any(|e| !e.is_finite()) {
            return Err(self.err(iter, "non-finite draw of the effects"));
        }
        self.eta = eta.iter().copied().collect();
        self.set_beta(&beta_f);
        Ok(())
    }

    fn set_beta(&mut self, beta_f: &DVector<f64>) {
        for (a, &k) in self.free.iter().enumerate() {
            self.beta[k] = beta_f[a];
        }
        self.xb = (&self.spec.design * DVector::from_column_slice(&self.beta))
            .iter()
            .copied()
            .collect();
    }

    fn re_quad(&self) -> f64 {
        match &self.spatial {
            None => self.eta.iter().map(|e| e * e).sum(),
            Some(sp) => sp.quad(&self.eta),
        }
    }

    /// `log p(κ | ω, β, φ)` with η integrated out, up to terms free of φ.
    fn collapsed_scale_target(&self, log_phi: f64, c: &DVector<f64>, d: &[f64]) -> Option<f64> {
        let tau = (-2.0 * log_phi).exp();
        let m = d.len() as f64;
        let marg = match &self.spatial {
            None => d
                .iter()
                .zip(c.iter())
                .map(|(dj, cj)| 0.5 * tau.ln() - 0.5 * (dj + tau).ln() + 0.5 * cj * cj / (dj + tau))
                .sum::<f64>(),
            Some(sp) => {
                let mut p = &sp.precision * tau;
                for (j, dj) in d.iter().enumerate() {
                    p[(j, j)] += dj;
                }
                let chol = p.cholesky()?;
                let log_det = 2.0
                    * chol
                        .l_dirty()
                        .diagonal()
                        .iter()
                        .map(|v| v.ln())
                        .sum::<f64>();
                0.5 * m * tau.ln() - 0.5 * log_det + 0.5 * c.dot(&chol.solve(c))
            }
        };
        Some(marg + self.scale_prior(log_phi))
    }

    /// Random-walk step on `log φ` given the Pólya-Gamma weights and β, with
    /// η marginalised; η is redrawn immediately afterwards.
    fn update_phi_collapsed(&mut self, iter: usize, adapting: bool) -> Result<()> {
        if !self.sample_phi {
            return Ok(());
        }
        let clusters = self
            .spec
            .random_effect
            .clusters()
            .expect("sampled scale implies clusters");
        let m = clusters.n_clusters();
        let mut d = vec![0.0; m];
        let mut c = DVector::zeros(m);
        for (i, &j) in clusters.assignment().iter().enumerate() {
            d[j] += self.omega[i];
            c[j] += self.spec.response[i] - 0.5 - self.omega[i] * self.xb[i];
        }
        let prop = self.log_phi + self.collapsed_adapt.step() * self.normal();
        let cur_v = self
            .collapsed_scale_target(self.log_phi, &c, &d)
            .ok_or_else(|| self.err(iter, "collapsed scale target is not finite"))?;
        let accept = match self.collapsed_scale_target(prop, &c, &d) {
            Some(new_v) if new_v.is_finite() => self.uniform_log() < new_v - cur_v,
            _ => false,
        };
        if accept {
            self.log_phi = prop;
        }
        self.collapsed_adapt.record(accept, iter, adapting);
        Ok(())
    }

    /// Conjugate update of φ² through the inverse-gamma mixture form of the
    /// half-Cauchy prior, then a joint rescale `(η, φ) → (cη, cφ)`.
    fn update_phi(&mut self, iter: usize, adapting: bool) -> Result<()> {
        if !self.sample_phi {
            return Ok(());
        }
        let c = self.spec.priors.re_scale_prior;
        let m = self.eta.len() as f64;
        let phi2 = self.phi() * self.phi();
        let g1: f64 = Gamma::new(1.0, 1.0)
            .expect("valid gamma")
            .sample(&mut self.rng);
        let aux = (1.0 / phi2 + 1.0 / (c * c)) / g1;
        let g2: f64 = Gamma::new(0.5 * (m + 1.0), 1.0)
            .expect("valid gamma")
            .sample(&mut self.rng);
        let new_phi2 = (0.5 * self.re_quad() + 1.0 / aux) / g2;
        if !(new_phi2 > 0.0 && new_phi2.is_finite()) {
            return Err(self.err(iter, "non-finite draw of the random-effect scale"));
        }
        self.log_phi = 0.5 * new_phi2.ln();

        let log_c = self.rescale_adapt.step() * self.normal();
        let cs = log_c.exp();
        let eta_prop: Vec<f64> = self.eta.iter().map(|e| cs * e).collect();
        let dll = self.loglik(&self.xb, &eta_prop) - self.loglik(&self.xb, &self.eta);
        let dscale = self.scale_prior(self.log_phi + log_c) - self.scale_prior(self.log_phi);
        let log_a = dll + dscale;
        if log_a.is_nan() {
            return Err(self.err(iter, "non-finite log posterior in rescale move"));
        }
        let accept = self.uniform_log() < log_a;
        if accept {
            self.eta = eta_prop;
            self.log_phi += log_c;
        }
        self.rescale_adapt.record(accept, iter, adapting);
        Ok(())
    }

    fn update_decay(&mut self, iter: usize, adapting: bool) -> Result<()> {
        if self.spatial.is_none() {
            return Ok(());
        }
        let z = self.normal();
        let sp = self.spatial.as_ref().expect("checked above");
        let phi = self.phi();
        let cur_log = sp.factor.decay.ln();
        let prop_log = cur_log + self.decay_adapt.step() * z;
        let prop_factor = match SpatialFactor::new(&sp.centroids, prop_log.exp(), self.spec.jitter)
        {
            Ok(f) => f,
            Err(_) => {
                self.decay_adapt.record(false, iter, adapting);
                return Ok(());
            }
        };
        let quad_cur = sp.quad(&self.eta);
        let quad_new = prop_factor.quad(&self.eta);
        let prior = sp.prior;
        let cur_v = -0.5 * sp.factor.log_det - 0.5 * quad_cur / (phi * phi)
            + prior.ln_pdf(cur_log.exp())
            + cur_log;
        let new_v = -0.5 * prop_factor.log_det - 0.5 * quad_new / (phi * phi)
            + prior.ln_pdf(prop_log.exp())
            + prop_log;
        if new_v.is_nan() {
            return Err(self.err(iter, "non-finite log posterior in decay update"));
        }
        let accept = self.uniform_log() < new_v - cur_v;
        if accept {
            let sp = self.spatial.as_mut().expect("checked above");
            sp.precision = prop_factor.precision();
            sp.factor = prop_factor;
        }
        self.decay_adapt.record(accept, iter, adapting);
        Ok(())
    }

    fn row(&self) -> Vec<f64> {
        let mut r = self.beta.clone();
        r.extend_from_slice(&self.eta);
        if self.spec.random_effect.clusters().is_some() {
            r.push(self.phi());
        }
        if let Some(sp) = &self.spatial {
            r.push(sp.factor.decay);
        }
        r
    }

    fn run(mut self, settings: &SamplerSettings) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(settings.draws_per_chain());
        for iter in 0..settings.iterations {
            let adapting = iter < settings.warmup;
            self.update_omega();
            self.update_phi_collapsed(iter, adapting)?;
            self.update_effects(iter)?;
            self.update_phi(iter, adapting)?;
            self.update_decay(iter, adapting)?;
            if !adapting {
                out.push(self.row());
            }
        }
        Ok(out)
    }
}

/// Runs `settings.chains` chains in parallel and returns the pooled
/// post-warmup draws with their convergence report. Chain `c` uses RNG stream
/// `stream_id(&[c])` under `settings.seed`.
pub fn sample(
    spec: &LogisticMixedSpec,
    settings: &SamplerSettings,
) -> Result<(PosteriorSample, ConvergenceReport)> {
    spec.validate()?;
    settings.validate()?;
    let (mode, cov) = fixed_effect_mode(spec)?;
    let chains: Vec<Result<Vec<Vec<f64>>>> = (0..settings.chains)
        .into_par_iter()
        .map(|c| {
            let rng = stream_rng(settings.seed, stream_id(&[c as u64]));
            Chain::new(spec, &mode, &cov, c, rng)?.run(settings)
        })
        .collect();
    let names = spec.draw_names();
    let d = names.len();
    let per = settings.draws_per_chain();
    let mut draws = DMatrix::zeros(per * settings.chains, d);
    let mut chain_id = Vec::with_capacity(per * settings.chains);
    for (c, res) in chains.into_iter().enumerate() {
        let rows = res?;
        for (r, row) in rows.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                draws[(c * per + r, k)] = *v;
            }
            chain_id.push(c);
        }
    }
    let mut sample = PosteriorSample::new(draws, names, chain_id, settings.warmup)?;
    let q = spec.design.ncols();
    for k in 0..q {
        sample.monitored[k] = spec.prior_sd(k) > 0.0;
    }
    if spec.fixed_re_sd.is_some() {
        let k = sample.index_of("re_sd")?;
        sample.monitored[k] = false;
    }
    let report = rhat(&sample, settings.rhat_threshold);
    Ok((sample, report))
}

/// Draws standard normals from a stream; shared by tests that need
/// reproducible synthetic chains.
pub fn normal_draws<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
