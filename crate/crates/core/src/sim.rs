//! Monte Carlo drivers: the linear analytic-bias grid and the binary
//! exposure/outcome replicate study.
//!
//! Every replicate draws from its own split stream keyed by its grid position,
//! so results do not depend on scheduling or the number of worker threads. In
//! the linear grid the key omits `ρ`, which gives common random numbers across
//! the correlation axis. In the binary study the key omits the scenario and the
//! case, so the cells share their underlying normal draws.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, SMD_THRESHOLD};
use crate::error::{Error, Result};
use crate::expit;
use crate::gaussian::{
    analyze_all_variants, generate_linear_with, LinearModelVariant, LinearSimConfig,
};
use crate::mcmc::SamplerSettings;
use crate::model::{Dataset, PriorSpec};
use crate::pipeline::{
    self, GatePolicy, OutcomeModelKind, PipelineSettings, PropensityModelKind, PsPoint,
};
use crate::rng::{stream_id, stream_rng};

pub const CSV_HEADER: &str = "n,rho,sigma2_T,sigma2_W,model,metric,value";

/// Fraction of replicates a model may lose to non-convergence before the
/// binary study aborts.
pub const MAX_FAILURE_FRACTION: f64 = 0.20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGridSpec {
    pub m: usize,
    pub n_set: Vec<usize>,
    /// Values of σ², used for both σT² and σW².
    pub sigma_grid: Vec<f64>,
    pub rho_set: Vec<f64>,
    pub replicates: usize,
    pub mu_t: f64,
    pub mu_w: f64,
    pub zero_intercept: bool,
    pub seed: u64,
}

impl Default for LinearGridSpec {
    fn default() -> Self {
        Self::paper()
    }
}

impl LinearGridSpec {
    /// m = 50, n ∈ {2,5,10,20}, σ² ∈ {0.3, 0.6, …, 3.0}, ρ ∈ {0, 0.3, 0.5}, 1000 replicates.
    pub fn paper() -> Self {
        Self {
            m: 50,
            n_set: vec![2, 5, 10, 20],
            sigma_grid: (1..=10)
                .map(|k| (k as f64 * 0.3 * 10.0).round() / 10.0)
                .collect(),
            rho_set: vec![0.0, 0.3, 0.5],
            replicates: 1000,
            mu_t: 0.0,
            mu_w: 0.0,
            zero_intercept: false,
            seed: 1,
        }
    }

    /// The full grid coarsened to σ² ∈ {0.3, 1.2, 2.1, 3.0} with 200 replicates.
    pub fn desk() -> Self {
        Self {
            sigma_grid: vec![0.3, 1.2, 2.1, 3.0],
            replicates: 200,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_set.is_empty() || self.sigma_grid.is_empty() || self.rho_set.is_empty() {
            return Err(Error::invalid("linear grid axes must be non-empty"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.sigma_grid.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid("sigma grid values must be positive"));
        }
        for &n in &self.n_set {
            self.cell_config(n, 1.0, 1.0, 0.0).validate()?;
        }
        for &rho in &self.rho_set {
            self.cell_config(self.n_set[0], 1.0, 1.0, rho).validate()?;
        }
        if !(self.mu_t.is_finite() && self.mu_w.is_finite()) {
            return Err(Error::NonFinite("mu_T / mu_W".into()));
        }
        Ok(())
    }

    pub fn cell_config(&self, n: usize, sigma2_t: f64, sigma2_w: f64, rho: f64) -> LinearSimConfig {
        LinearSimConfig {
            m: self.m,
            n,
            sigma_t: sigma2_t.sqrt(),
            sigma_w: sigma2_w.sqrt(),
            rho_tw: rho,
            mu_t: self.mu_t,
            mu_w: self.mu_w,
            zero_intercept_outcome: self.zero_intercept,
            ..LinearSimConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGridRow {
    pub n: usize,
    pub rho: f64,
    pub sigma2_t: f64,
    pub sigma2_w: f64,
    pub model: String,
    pub mean_abs_bias: f64,
    pub mean_rmse: f64,
    /// Replicates whose analysis failed numerically; excluded from the means.
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGridTable {
    pub spec: LinearGridSpec,
    pub rows: Vec<LinearGridRow>,
}

impl LinearGridTable {
    pub fn get(
        &self,
        n: usize,
        rho: f64,
        sigma2_t: f64,
        sigma2_w: f64,
        model: &str,
    ) -> Option<&LinearGridRow> {
        self.rows.iter().find(|r| {
            r.n == n
                && r.rho == rho
                && r.sigma2_t == sigma2_t
                && r.sigma2_w == sigma2_w
                && r.model == model
        })
    }

    /// Long format, three metric rows per (cell, model).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER.split(','))?;
        for r in &self.rows {
            for (metric, value) in [
                ("abs_bias", r.mean_abs_bias.to_string()),
                ("rmse", r.mean_rmse.to_string()),
                ("failed", r.failed.to_string()),
            ] {
                w.write_record([
                    r.n.to_string(),
                    r.rho.to_string(),
                    r.sigma2_t.to_string(),
                    r.sigma2_w.to_string(),
                    r.model.clone(),
                    metric.to_string(),
                    value,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact conditional |bias| and RMSE of MD1..MD4, averaged over replicates
/// for every `(n, ρ, σT², σW²)` cell.
pub fn run_linear_grid(spec: &LinearGridSpec) -> Result<LinearGridTable> {
    spec.validate()?;
    let mut cells = Vec::new();
    for (ni, &n) in spec.n_set.iter().enumerate() {
        for &rho in &spec.rho_set {
            for (ti, &s2t) in spec.sigma_grid.iter().enumerate() {
                for (wi, &s2w) in spec.sigma_grid.iter().enumerate() {
                    cells.push((ni, n, rho, ti, s2t, wi, s2w));
                }
            }
        }
    }
    let reps = spec.replicates;
    let results: Vec<Option<[(f64, f64); 4]>> = (0..cells.len() * reps)
        .into_par_iter()
        .map(|k| {
            let (ni, n, rho, ti, s2t, wi, s2w) = cells[k / reps];
            let r = k % reps;
            let cfg = spec.cell_config(n, s2t, s2w, rho);
            let mut rng = stream_rng(
                spec.seed,
                stream_id(&[ni as u64, ti as u64, wi as u64, r as u64]),
            );
            let sample = generate_linear_with(&cfg, &mut rng).ok()?;
            let bv = analyze_all_variants(&cfg, &sample.dataset).ok()?;
            let out = bv.map(|b| (b.bias_z.abs(), b.rmse()));
            out.iter()
                .all(|(a, b)| a.is_finite() && b.is_finite())
                .then_some(out)
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len() * 4);
    for (c, &(_, n, rho, _, s2t, _, s2w)) in cells.iter().enumerate() {
        let chunk = &results[c * reps..(c + 1) * reps];
        for (v, variant) in LinearModelVariant::ALL.iter().enumerate() {
            let (mut sb, mut sr, mut ok) = (0.0, 0.0, 0usize);
            for rep in chunk.iter().flatten() {
                sb += rep[v].0;
                sr += rep[v].1;
                ok += 1;
            }
            rows.push(LinearGridRow {
                n,
                rho,
                sigma2_t: s2t,
                sigma2_w: s2w,
                model: variant.label().to_string(),
                mean_abs_bias: if ok > 0 { sb / ok as f64 } else { f64::NAN },
                mean_rmse: if ok > 0 { sr / ok as f64 } else { f64::NAN },
                failed: reps - ok,
            });
        }
    }
    Ok(LinearGridTable {
        spec: spec.clone(),
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinarySimConfig {
    pub m: usize,
    pub n: usize,
    /// 1: SDs (0.1, 0.4) for the unit and cluster parts of X; 2: (0.25, 1.0).
    pub x_scenario: u8,
    /// 1: T, W independent; 2: corr 0.5; 3: T = W.
    pub tw_case: u8,
    pub alpha: [f64; 3],
    pub beta: [f64; 4],
    pub sigma_t: f64,
    pub sigma_w: f64,
    pub mu_t: f64,
    pub mu_w: f64,
    pub replicates: usize,
    pub seed: u64,
    pub mcmc: SamplerSettings,
}

impl Default for BinarySimConfig {
    fn default() -> Self {
        Self {
            m: 50,
            n: 4,
            x_scenario: 1,
            tw_case: 1,
            alpha: [1.0, 1.0, 1.0],
            beta: [0.0, 0.5, -0.5, 0.25],
            sigma_t: 1.0,
            sigma_w: 1.0,
            mu_t: 0.0,
            mu_w: 0.0,
            replicates: 1000,
            seed: 1,
            mcmc: SamplerSettings::default(),
        }
    }
}

impl BinarySimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.x_scenario) {
            return Err(Error::invalid(format!(
                "x scenario must be 1 or 2, got {}",
                self.x_scenario
            )));
        }
        if !(1..=3).contains(&self.tw_case) {
            return Err(Error::invalid(format!(
                "T/W case must be 1, 2 or 3, got {}",
                self.tw_case
            )));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be >= 1"));
        }
        if self.m < 2 || self.n < 1 {
            return Err(Error::invalid("need m >= 2 and n >= 1"));
        }
        if !(self.sigma_t > 0.0 && self.sigma_w > 0.0) {
            return Err(Error::invalid("sigma_T and sigma_W must be positive"));
        }
        self.mcmc.validate()
    }

    /// Unit-level and cluster-level SDs of each covariate.
    pub fn x_sds(&self) -> (f64, f64) {
        if self.x_scenario == 2 {
            (0.25, 1.0)
        } else {
            (0.1, 0.4)
        }
    }

    pub fn rho(&self) -> f64 {
        match self.tw_case {
            1 => 0.0,
            2 => 0.5,
            _ => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BinarySample {
    pub dataset: Dataset,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
}

/// Draw order: per cluster the two cluster parts of X and the two normals
/// behind (T, W); then per unit the two unit parts of X and the exposure and
/// outcome uniforms.
pub fn generate_binary<R: Rng + ?Sized>(
    cfg: &BinarySimConfig,
    rng: &mut R,
) -> Result<BinarySample> {
    cfg.validate()?;
    let (m, n) = (cfg.m, cfg.n);
    let (sd_unit, sd_cluster) = cfg.x_sds();
    let rho = cfg.rho();
    let tail = (1.0 - rho * rho).max(0.0).sqrt();
    let mut cx = Vec::with_capacity(m);
    let (mut t, mut w) = (Vec::with_capacity(m), Vec::with_capacity(m));
    for _ in 0..m {
        let c1: f64 = StandardNormal.sample(rng);
        let c2: f64 = StandardNormal.sample(rng);
        let e1: f64 = StandardNormal.sample(rng);
        let e2: f64 = StandardNormal.sample(rng);
        cx.push((sd_cluster * c1, sd_cluster * c2));
        t.push(cfg.mu_t + cfg.sigma_t * e1);
        w.push(cfg.mu_w + cfg.sigma_w * (rho * e1 + tail * e2));
    }
    let big_n = m * n;
    let mut x = DMatrix::zeros(big_n, 2);
    let (mut z, mut y) = (Vec::with_capacity(big_n), Vec::with_capacity(big_n));
    let [a0, a1, a2] = cfg.alpha;
    let [b0, b1, b2, b3] = cfg.beta;
    for i in 0..big_n {
        let j = i / n;
        let u1: f64 = StandardNormal.sample(rng);
        let u2: f64 = StandardNormal.sample(rng);
        let x1 = sd_unit * u1 + cx[j].0;
        let x2 = sd_unit * u2 + cx[j].1;
        x[(i, 0)] = x1;
        x[(i, 1)] = x2;
        let pz = expit(a0 + a1 * x1 + a2 * x2 + t[j]);
        let py = expit(b0 + b1 * x1 + b2 * x2 + b3 * x1 * x2 + w[j]);
        z.push(f64::from(u8::from(rng.random::<f64>() < pz)));
        y.push(f64::from(u8::from(rng.random::<f64>() < py)));
    }
    let ids: Vec<i64> = (0..big_n).map(|i| (i / n) as i64 + 1).collect();
    let dataset = Dataset::new(y, z, x, vec!["X1".into(), "X2".into()], &ids)?;
    Ok(BinarySample { dataset, t, w })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    /// |posterior mean of τ|; the true ATE is 0.
    pub abs_bias: f64,
    /// sqrt(posterior Var(τ) + bias²).
    pub rmse: f64,
    /// Weighted SMD per covariate under the propensity model feeding this fit.
    pub smd_by_covariate: BTreeMap<String, f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub replicate: usize,
    /// Keyed by MD1..MD4; `None` when the model or its propensity stage failed.
    pub models: BTreeMap<String, Option<ReplicateSummary>>,
    /// Weighted SMDs keyed by PS1/PS2 then covariate.
    pub smd: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelAggregate {
    pub model: String,
    pub median_abs_bias: f64,
    pub median_rmse: f64,
    pub included: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryStudyResult {
    pub config: BinarySimConfig,
    pub replicates: Vec<ReplicateResult>,
    pub models: Vec<ModelAggregate>,
    /// Replicate-covariate pairs with |weighted SMD| above the threshold, per PS model.
    pub smd_exceedances: BTreeMap<String, usize>,
}

impl BinaryStudyResult {
    pub fn model(&self, label: &str) -> Option<&ModelAggregate> {
        self.models.iter().find(|m| m.model == label)
    }

    /// Long format with the linear-grid columns plus a trailing replicate
    /// index. `rho` is 1 for the T = W case; `n` is units per cluster.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = CSV_HEADER.split(',').collect();
        header.push("replicate");
        w.write_record(&header)?;
        let c = &self.config;
        let fixed = [
            c.n.to_string(),
            c.rho().to_string(),
            (c.sigma_t * c.sigma_t).to_string(),
            (c.sigma_w * c.sigma_w).to_string(),
        ];
        let mut row = |model: &str, metric: &str, value: String, rep: usize| -> Result<()> {
            let mut rec: Vec<String> = fixed.to_vec();
            rec.extend([
                model.to_string(),
                metric.to_string(),
                value,
                rep.to_string(),
            ]);
            w.write_record(&rec)?;
            Ok(())
        };
        for r in &self.replicates {
            for (label, s) in &r.models {
                match s {
                    Some(s) => {
                        row(label, "abs_bias", s.abs_bias.to_string(), r.replicate)?;
                        row(label, "rmse", s.rmse.to_string(), r.replicate)?;
                    }
                    None => row(label, "excluded", "1".into(), r.replicate)?,
                }
            }
            for (ps, smds) in &r.smd {
                for (cov, v) in smds {
                    row(ps, &format!("smd_{cov}"), v.to_string(), r.replicate)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    diagnostics::quantile(v, 0.5)
}

fn run_replicate(cfg: &BinarySimConfig, r: usize) -> Result<ReplicateResult> {
    let mut rng = stream_rng(cfg.seed, stream_id(&[0, r as u64]));
    let sample = generate_binary(cfg, &mut rng)?;
    let ds = &sample.dataset;
    let settings = PipelineSettings {
        mcmc: SamplerSettings {
            seed: stream_id(&[cfg.seed, 1, r as u64]),
            ..cfg.mcmc
        },
        priors: PriorSpec::default(),
        gate: GatePolicy::Report,
        ps_point: PsPoint::ParameterMean,
        outcome_prior_overrides: Vec::new(),
    };

    let mut smd = BTreeMap::new();
    let mut estimates = BTreeMap::new();
    for kind in [PropensityModelKind::PS1, PropensityModelKind::PS2] {
        let est = match pipeline::estimate_propensity(ds, kind, &settings) {
            Ok((e, _)) if e.converged => e,
            _ => continue,
        };
        let table = diagnostics::balance_table(ds, &[(kind.label(), &est.ps)])?;
        let by_cov: BTreeMap<String, f64> = table
            .rows
            .iter()
            .map(|r| (r.covariate.clone(), r.weighted[0]))
            .collect();
        smd.insert(kind.label().to_string(), by_cov);
        estimates.insert(kind, est);
    }

    let mut models = BTreeMap::new();
    for k in 1..=4 {
        let kind = OutcomeModelKind::md(k)?;
        let label = format!("MD{k}");
        let ps_kind = kind
            .propensity()
            .expect("MD models adjust for a propensity score");
        let summary = estimates.get(&ps_kind).and_then(|est| {
            let fit = pipeline::fit_outcome(ds, kind, Some(est), &settings).ok()?;
            if !fit.convergence.pass {
                return None;
            }
            let ate = pipeline::ate_posterior(&fit.spec, &fit.sample).ok()?;
            let bias = ate.tau.mean;
            Some(ReplicateSummary {
                abs_bias: bias.abs(),
                rmse: (ate.tau.sd * ate.tau.sd + bias * bias).sqrt(),
                smd_by_covariate: smd.get(ps_kind.label()).cloned().unwrap_or_default(),
                converged: true,
            })
        });
        models.insert(label, summary);
    }
    Ok(ReplicateResult {
        replicate: r,
        models,
        smd,
    })
}

/// Fits PS1 and PS2 and then MD1..MD4 on each replicate. A propensity fit that
/// fails the R-hat gate excludes the two outcome models built on it; an outcome
/// fit that fails excludes only itself.
pub fn run_binary_study(cfg: &BinarySimConfig) -> Result<BinaryStudyResult> {
    cfg.validate()?;
    let replicates: Vec<ReplicateResult> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<_>>()?;

    let mut models = Vec::new();
    for k in 1..=4 {
        let label = format!("MD{k}");
        let kept: Vec<&ReplicateSummary> = replicates
            .iter()
            .filter_map(|r| r.models[&label].as_ref())
            .collect();
        let excluded = replicates.len() - kept.len();
        if excluded as f64 > MAX_FAILURE_FRACTION * replicates.len() as f64 {
            return Err(Error::ExcessiveNonConvergence {
                model: label,
                failed: excluded,
                total: replicates.len(),
            });
        }
        let mut bias: Vec<f64> = kept.iter().map(|s| s.abs_bias).collect();
        let mut rmse: Vec<f64> = kept.iter().map(|s| s.rmse).collect();
        models.push(ModelAggregate {
            model: label,
            median_abs_bias: median(&mut bias),
            median_rmse: median(&mut rmse),
            included: kept.len(),
            excluded,
        });
    }
    let mut smd_exceedances = BTreeMap::new();
    for ps in ["PS1", "PS2"] {
        let count = replicates
            .iter()
            .filter_map(|r| r.smd.get(ps))
            .flat_map(|m| m.values())
            .filter(|v| v.abs() > SMD_THRESHOLD)
            .count();
        smd_exceedances.insert(ps.to_string(), count);
    }
    Ok(BinaryStudyResult {
        config: cfg.clone(),
        replicates,
        models,
        smd_exceedances,
    })
}
