//! The plug-in two-step procedure.
//!
//! Stage one fits a logistic propensity model (fixed effects only, with an iid
//! cluster effect, or with a spatial cluster effect) and freezes a point
//! estimate of the propensity score. Stage two fits a logistic outcome model
//! that adjusts for nothing, for the covariates, or for a frozen propensity
//! score, optionally with its own cluster effect. The ATE posterior averages
//! the fitted outcome probabilities over the observed units with the exposure
//! set to 1 and to 0, once per posterior draw.
//!
//! The odds ratio reported is `exp(β_Z)`, the conditional odds ratio of the
//! exposure coefficient. Because of non-collapsibility it need not agree with
//! the marginal odds ratio implied by the ATE.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, FitReport, PositivitySummary, SmdReport};
use crate::error::{Error, Result};
use crate::expit;
use crate::mcmc::{
    self, ConvergenceReport, LogisticMixedSpec, PosteriorSample, RandomEffect, SamplerSettings,
    INTERCEPT,
};
use crate::model::{Dataset, PriorSpec};
use crate::rng::stream_id;

pub const EXPOSURE: &str = "Z";
pub const PS_COLUMN: &str = "PS";

/// Fitted propensities closer than this to 0 or 1 raise a separation warning.
pub const SEPARATION_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PropensityModelKind {
    PS1,
    PS2,
    PS3,
}

impl PropensityModelKind {
    pub const ALL: [Self; 3] = [Self::PS1, Self::PS2, Self::PS3];

    pub fn label(&self) -> &'static str {
        match self {
            Self::PS1 => "PS1",
            Self::PS2 => "PS2",
            Self::PS3 => "PS3",
        }
    }

    fn effect(&self) -> ReKind {
        match self {
            Self::PS1 => ReKind::None,
            Self::PS2 => ReKind::Iid,
            Self::PS3 => ReKind::Spatial,
        }
    }
}

impl fmt::Display for PropensityModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PropensityModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PS1" => Ok(Self::PS1),
            "PS2" => Ok(Self::PS2),
            "PS3" => Ok(Self::PS3),
            other => Err(Error::invalid(format!(
                "unknown propensity model `{other}`; valid: PS1, PS2, PS3"
            ))),
        }
    }
}

/// Cluster random-effect structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReKind {
    None,
    Iid,
    Spatial,
}

impl ReKind {
    fn build(&self, ds: &Dataset) -> Result<RandomEffect> {
        match self {
            ReKind::None => Ok(RandomEffect::None),
            ReKind::Iid => Ok(RandomEffect::Iid(ds.clusters.clone())),
            ReKind::Spatial => {
                let c = ds.centroids.clone().ok_or_else(|| {
                    Error::invalid("spatial random effect requires cluster centroids")
                })?;
                Ok(RandomEffect::Spatial(ds.clusters.clone(), c))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Adjustment {
    None,
    Covariates,
    Propensity(PropensityModelKind),
}

/// An outcome model: what it adjusts for and which cluster effect it carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OutcomeModelKind {
    pub adjustment: Adjustment,
    pub random_effect: ReKind,
}

const RE_ORDER: [ReKind; 3] = [ReKind::None, ReKind::Iid, ReKind::Spatial];

impl OutcomeModelKind {
    /// Models M1..M15: adjustment cycles through none, covariates, PS1, PS2,
    /// PS3 in blocks of three; within a block the random effect is none, iid,
    /// spatial.
    pub fn table4(k: usize) -> Result<Self> {
        if !(1..=15).contains(&k) {
            return Err(Error::invalid(format!(
                "outcome model M{k} does not exist; valid: M1..M15"
            )));
        }
        let block = (k - 1) / 3;
        let adjustment = match block {
            0 => Adjustment::None,
            1 => Adjustment::Covariates,
            2 => Adjustment::Propensity(PropensityModelKind::PS1),
            3 => Adjustment::Propensity(PropensityModelKind::PS2),
            _ => Adjustment::Propensity(PropensityModelKind::PS3),
        };
        Ok(Self {
            adjustment,
            random_effect: RE_ORDER[(k - 1) % 3],
        })
    }

    /// Models MD1..MD4 of the binary simulation study.
    pub fn md(k: usize) -> Result<Self> {
        let (ps, re) = match k {
            1 => (PropensityModelKind::PS1, ReKind::None),
            2 => (PropensityModelKind::PS2, ReKind::None),
            3 => (PropensityModelKind::PS1, ReKind::Iid),
            4 => (PropensityModelKind::PS2, ReKind::Iid),
            _ => {
                return Err(Error::invalid(format!(
                    "outcome model MD{k} does not exist; valid: MD1..MD4"
                )))
            }
        };
        Ok(Self {
            adjustment: Adjustment::Propensity(ps),
            random_effect: re,
        })
    }

    /// Index in M1..M15.
    pub fn table4_index(&self) -> usize {
        let block = match self.adjustment {
            Adjustment::None => 0,
            Adjustment::Covariates => 1,
            Adjustment::Propensity(PropensityModelKind::PS1) => 2,
            Adjustment::Propensity(PropensityModelKind::PS2) => 3,
            Adjustment::Propensity(PropensityModelKind::PS3) => 4,
        };
        let re = RE_ORDER
            .iter()
            .position(|r| *r == self.random_effect)
            .unwrap_or(0);
        3 * block + re + 1
    }

    pub fn label(&self) -> String {
        format!("M{}", self.table4_index())
    }

    pub fn propensity(&self) -> Option<PropensityModelKind> {
        match self.adjustment {
            Adjustment::Propensity(k) => Some(k),
            _ => None,
        }
    }
}

impl fmt::Display for OutcomeModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for OutcomeModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        let bad = || {
            Error::invalid(format!(
                "unknown outcome model `{s}`; valid: M1..M15, MD1..MD4"
            ))
        };
        if let Some(rest) = t.strip_prefix("MD") {
            return Self::md(rest.parse().map_err(|_| bad())?).map_err(|_| bad());
        }
        if let Some(rest) = t.strip_prefix('M') {
            return Self::table4(rest.parse().map_err(|_| bad())?).map_err(|_| bad());
        }
        Err(bad())
    }
}

/// How the frozen propensity score is formed from the stage-one posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PsPoint {
    /// `expit` of the linear predictor at posterior-mean parameters.
    #[default]
    ParameterMean,
    /// Posterior mean of `expit` of the linear predictor.
    ScoreMean,
}

/// What to do when a fit fails the R-hat gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GatePolicy {
    #[default]
    Enforce,
    /// Keep the fit and leave the verdict in its convergence report.
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub mcmc: SamplerSettings,
    pub priors: PriorSpec,
    pub gate: GatePolicy,
    pub ps_point: PsPoint,
    /// Per-coefficient prior SD overrides for the outcome model (0 pins at 0).
    pub outcome_prior_overrides: Vec<(String, f64)>,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            mcmc: SamplerSettings::default(),
            priors: PriorSpec::default(),
            gate: GatePolicy::Enforce,
            ps_point: PsPoint::ParameterMean,
            outcome_prior_overrides: Vec::new(),
        }
    }
}

impl PipelineSettings {
    fn stage(&self, stage: u64) -> SamplerSettings {
        SamplerSettings {
            seed: stream_id(&[self.mcmc.seed, stage]),
            ..self.mcmc
        }
    }

    fn gate(&self, report: &ConvergenceReport) -> Result<()> {
        match self.gate {
            GatePolicy::Enforce => report.gate(),
            GatePolicy::Report => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityEstimate {
    pub ps: Vec<f64>,
    pub kind: PropensityModelKind,
    /// Posterior means of the coefficients, random effects and scales.
    pub point_estimates: Vec<(String, f64)>,
    pub warnings: Vec<String>,
    pub converged: bool,
}

impl PropensityEstimate {
    /// A frozen score built directly from values, e.g. a known truth.
    pub fn from_values(ps: Vec<f64>, kind: PropensityModelKind) -> Result<Self> {
        if ps.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::invalid(
                "propensity scores must lie strictly in (0,1)",
            ));
        }
        Ok(Self {
            ps,
            kind,
            point_estimates: Vec::new(),
            warnings: Vec::new(),
            converged: true,
        })
    }
}

fn design_with_intercept(n: usize, blocks: &[(&str, Vec<f64>)]) -> (DMatrix<f64>, Vec<String>) {
    let q = blocks.len() + 1;
    let x = DMatrix::from_fn(n, q, |i, c| if c == 0 { 1.0 } else { blocks[c - 1].1[i] });
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(blocks.iter().map(|(n, _)| n.to_string()));
    (x, names)
}

fn covariate_blocks(ds: &Dataset) -> Vec<(&str, Vec<f64>)> {
    ds.covariate_names
        .iter()
        .enumerate()
        .map(|(c, n)| {
            (
                n.as_str(),
                ds.covariates.column(c).iter().copied().collect(),
            )
        })
        .collect()
}

/// Exposure model `logit P(Z=1) = γ0 + Xᵀγ (+ ν_j)`.
pub fn propensity_spec(
    ds: &Dataset,
    kind: PropensityModelKind,
    priors: &PriorSpec,
) -> Result<LogisticMixedSpec> {
    if !ds.exposure_is_binary() {
        return Err(Error::invalid("propensity models need a 0/1 exposure"));
    }
    let (x, names) = design_with_intercept(ds.n(), &covariate_blocks(ds));
    LogisticMixedSpec::new(x, names, ds.exposure.clone())?
        .with_priors(*priors)?
        .with_random_effect(kind.effect().build(ds)?)
}

/// Freezes a propensity estimate from a stage-one posterior.
pub fn propensity_from_sample(
    spec: &LogisticMixedSpec,
    sample: &PosteriorSample,
    kind: PropensityModelKind,
    point: PsPoint,
    converged: bool,
) -> Result<PropensityEstimate> {
    let names: Vec<&str> = sample.names.iter().map(String::as_str).collect();
    let means = mcmc::posterior_point(sample, &names)?;
    let raw: Vec<f64> = match point {
        PsPoint::ParameterMean => mcmc::linear_predictor(spec, &means)
            .into_iter()
            .map(expit)
            .collect(),
        PsPoint::ScoreMean => {
            let l = sample.n_draws();
            let sums = (0..l)
                .into_par_iter()
                .map(|r| {
                    let row: Vec<f64> = sample.draws.row(r).iter().copied().collect();
                    mcmc::linear_predictor(spec, &row)
                        .into_iter()
                        .map(expit)
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>();
            let n = spec.response.len();
            (0..n)
                .map(|i| sums.iter().map(|s| s[i]).sum::<f64>() / l as f64)
                .collect()
        }
    };
    let mut warnings = Vec::new();
    let extreme = raw
        .iter()
        .filter(|&&p| !(SEPARATION_EPS..=1.0 - SEPARATION_EPS).contains(&p))
        .count();
    if extreme > 0 {
        warnings.push(format!(
            "possible separation: {extreme} fitted propensities within {SEPARATION_EPS} of 0 or 1"
        ));
    }
    let ps = raw
        .into_iter()
        .map(|p| p.clamp(1e-12, 1.0 - 1e-12))
        .collect();
    Ok(PropensityEstimate {
        ps,
        kind,
        point_estimates: sample.names.iter().cloned().zip(means).collect(),
        warnings,
        converged,
    })
}

#[derive(Debug, Clone)]
pub struct StageFit {
    pub spec: LogisticMixedSpec,
    pub sample: PosteriorSample,
    pub convergence: ConvergenceReport,
}

impl StageFit {
    /// WAIC and PSIS-LOO from the pointwise Bernoulli log-likelihood.
    pub fn fit_report(&self) -> Result<FitReport> {
        let n = self.spec.response.len();
        diagnostics::fit_report_columns(n, self.sample.n_draws(), |i, out| {
            mcmc::pointwise_loglik_column(&self.spec, &self.sample, i, out)
        })
    }
}

/// Fits the exposure model and freezes its point-estimate propensity score.
pub fn estimate_propensity(
    ds: &Dataset,
    kind: PropensityModelKind,
    settings: &PipelineSettings,
) -> Result<(PropensityEstimate, StageFit)> {
    let spec = propensity_spec(ds, kind, &settings.priors)?;
    let (sample, convergence) = mcmc::sample(&spec, &settings.stage(0))?;
    settings.gate(&convergence)?;
    let est = propensity_from_sample(&spec, &sample, kind, settings.ps_point, convergence.pass)?;
    Ok((
        est,
        StageFit {
            spec,
            sample,
            convergence,
        },
    ))
}

/// Outcome model `logit P(Y=1) = β + Zβ_Z + B (+ η_j)`.
pub fn outcome_spec(
    ds: &Dataset,
    kind: OutcomeModelKind,
    ps: Option<&PropensityEstimate>,
    settings: &PipelineSettings,
) -> Result<LogisticMixedSpec> {
    if ds.outcome.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("outcome models need a 0/1 outcome"));
    }
    let mut blocks: Vec<(&str, Vec<f64>)> = vec![(EXPOSURE, ds.exposure.clone())];
    match kind.adjustment {
        Adjustment::None => {}
        Adjustment::Covariates => blocks.extend(covariate_blocks(ds)),
        Adjustment::Propensity(k) => {
            let est = ps
                .ok_or_else(|| Error::invalid(format!("{kind} needs a {k} propensity estimate")))?;
            if est.kind != k {
                return Err(Error::invalid(format!(
                    "{kind} needs {k}, got {}",
                    est.kind
                )));
            }
            if est.ps.len() != ds.n() {
                return Err(Error::dims(format!(
                    "propensity has {} entries for {} units",
                    est.ps.len(),
                    ds.n()
                )));
            }
            blocks.push((PS_COLUMN, est.ps.clone()));
        }
    }
    let (x, names) = design_with_intercept(ds.n(), &blocks);
    let mut spec = LogisticMixedSpec::new(x, names, ds.outcome.clone())?
        .with_priors(settings.priors)?
        .with_random_effect(kind.random_effect.build(ds)?)?;
    for (name, sd) in &settings.outcome_prior_overrides {
        spec = spec.with_coef_prior_sd(name, *sd)?;
    }
    Ok(spec)
}

/// Stage two. The propensity estimate is only read.
pub fn fit_outcome(
    ds: &Dataset,
    kind: OutcomeModelKind,
    ps: Option<&PropensityEstimate>,
    settings: &PipelineSettings,
) -> Result<StageFit> {
    let spec = outcome_spec(ds, kind, ps, settings)?;
    let (sample, convergence) = mcmc::sample(&spec, &settings.stage(1))?;
    settings.gate(&convergence)?;
    Ok(StageFit {
        spec,
        sample,
        convergence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

impl Summary {
    pub fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            sd,
            q025: diagnostics::quantile(v, 0.025),
            q975: diagnostics::quantile(v, 0.975),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtePosterior {
    pub tau_draws: Vec<f64>,
    pub or_draws: Vec<f64>,
    pub tau: Summary,
    pub odds_ratio: Summary,
}

/// Per draw: `θ_z = N⁻¹ Σ expit(η_i(z))` with every unit's own adjustment and
/// random-effect terms, `τ = θ1 - θ0`, and `OR = exp(β_Z)`.
pub fn ate_posterior(spec: &LogisticMixedSpec, sample: &PosteriorSample) -> Result<AtePosterior> {
    let zk = spec
        .names
        .iter()
        .position(|n| n == EXPOSURE)
        .ok_or_else(|| Error::UnknownParameter(EXPOSURE.into()))?;
    if sample.names[..spec.names.len()] != spec.names[..] {
        return Err(Error::dims(
            "posterior sample does not match the outcome design",
        ));
    }
    let n = spec.response.len() as f64;
    let pairs: Vec<(f64, f64)> = (0..sample.n_draws())
        .into_par_iter()
        .map(|r| {
            let row: Vec<f64> = sample.draws.row(r).iter().copied().collect();
            let bz = row[zk];
            let eta = mcmc::linear_predictor(spec, &row);
            let (mut t1, mut t0) = (0.0, 0.0);
            for (i, a) in eta.iter().enumerate() {
                let base = a - spec.design[(i, zk)] * bz;
                t1 += expit(base + bz);
                t0 += expit(base);
            }
            ((t1 - t0) / n, bz.exp())
        })
        .collect();
    let tau_draws: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let or_draws: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(AtePosterior {
        tau: Summary::of(&tau_draws),
        odds_ratio: Summary::of(&or_draws),
        tau_draws,
        or_draws,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub elpd_loo: f64,
    pub p_loo: f64,
    pub loo: f64,
    pub n_high_k: usize,
}

impl From<&FitReport> for FitSummary {
    fn from(r: &FitReport) -> Self {
        Self {
            elpd_waic: r.elpd_waic,
            p_waic: r.p_waic,
            waic: r.waic,
            elpd_loo: r.elpd_loo,
            p_loo: r.p_loo,
            loo: r.loo,
            n_high_k: r.n_high_k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub model: String,
    pub converged: bool,
    pub max_rhat: f64,
    pub worst_parameter: String,
    pub min_ess: f64,
    pub fit: FitSummary,
}

impl StageSummary {
    fn of(model: String, fit: &StageFit) -> Result<Self> {
        let (worst, rhat) = fit
            .convergence
            .worst()
            .map_or((String::new(), f64::NAN), |(n, r)| (n.to_string(), r));
        let min_ess = fit
            .convergence
            .ess
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            model,
            converged: fit.convergence.pass,
            max_rhat: rhat,
            worst_parameter: worst,
            min_ess,
            fit: FitSummary::from(&fit.fit_report()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStepReport {
    pub outcome_model: String,
    pub propensity_model: Option<String>,
    pub ate: Summary,
    pub odds_ratio: Summary,
    pub beta_z: Summary,
    pub outcome: StageSummary,
    pub propensity: Option<StageSummary>,
    pub propensity_warnings: Vec<String>,
    pub balance: Option<SmdReport>,
    pub positivity: Option<PositivitySummary>,
    pub settings: PipelineSettings,
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub report: TwoStepReport,
    pub propensity: Option<PropensityEstimate>,
    pub propensity_fit: Option<StageFit>,
    pub outcome_fit: StageFit,
    pub ate: AtePosterior,
}

/// Runs both stages for one outcome model and attaches balance, positivity and
/// predictive-fit diagnostics.
pub fn two_step(
    ds: &Dataset,
    kind: OutcomeModelKind,
    settings: &PipelineSettings,
) -> Result<TwoStepResult> {
    let (est, ps_fit) = match kind.propensity() {
        Some(k) => {
            let (e, f) = estimate_propensity(ds, k, settings)?;
            (Some(e), Some(f))
        }
        None => (None, None),
    };
    two_step_with(ds, kind, est, ps_fit, settings)
}

/// As [`two_step`] with a propensity estimate fitted elsewhere (so several
/// outcome models can share one frozen score).
pub fn two_step_with(
    ds: &Dataset,
    kind: OutcomeModelKind,
    est: Option<PropensityEstimate>,
    ps_fit: Option<StageFit>,
    settings: &PipelineSettings,
) -> Result<TwoStepResult> {
    let outcome_fit = fit_outcome(ds, kind, est.as_ref(), settings)?;
    let ate = ate_posterior(&outcome_fit.spec, &outcome_fit.sample)?;
    let beta_z = Summary::of(&outcome_fit.sample.column(EXPOSURE)?);
    let (balance, positivity) = match &est {
        Some(e) if ds.covariates.ncols() > 0 => (
            Some(diagnostics::balance_table(ds, &[(e.kind.label(), &e.ps)])?),
            Some(diagnostics::positivity_summary(&e.ps, &ds.exposure)?),
        ),
        _ => (None, None),
    };
    let propensity = match (&est, &ps_fit) {
        (Some(e), Some(f)) => Some(StageSummary::of(e.kind.label().to_string(), f)?),
        _ => None,
    };
    let report = TwoStepReport {
        outcome_model: kind.label(),
        propensity_model: est.as_ref().map(|e| e.kind.label().to_string()),
        ate: ate.tau,
        odds_ratio: ate.odds_ratio,
        beta_z,
        outcome: StageSummary::of(kind.label(), &outcome_fit)?,
        propensity,
        propensity_warnings: est.as_ref().map(|e| e.warnings.clone()).unwrap_or_default(),
        balance,
        positivity,
        settings: settings.clone(),
    };
    Ok(TwoStepResult {
        report,
        propensity: est,
        propensity_fit: ps_fit,
        outcome_fit,
        ate,
    })
}
