//! Covariate balance, propensity overlap, and predictive fit criteria.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;

/// SMD magnitude above which a covariate is flagged as imbalanced.
pub const SMD_THRESHOLD: f64 = 0.10;

/// Pareto shape above which a PSIS estimate is flagged as unreliable.
pub const PARETO_K_THRESHOLD: f64 = 0.7;

/// `Σwx / Σw`.
pub fn weighted_mean(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw
}

/// Frequency-weights variance `Σw / ((Σw)² - Σw²) · Σw(x - x̄w)²`.
pub fn weighted_variance(x: &[f64], w: &[f64]) -> f64 {
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|v| v * v).sum();
    let mu = weighted_mean(x, w);
    let ss: f64 = x.iter().zip(w).map(|(a, b)| b * (a - mu) * (a - mu)).sum();
    sw / (sw * sw - sw2) * ss
}

/// Inverse-probability weight `z/ps + (1-z)/(1-ps)`.
pub fn ate_weight(z: f64, ps: f64) -> f64 {
    z / ps + (1.0 - z) / (1.0 - ps)
}

/// Standardised mean difference between treated (`exposure == 1`) and control
/// units. Binary covariates use `p(1-p)` in place of the sample variance.
/// Returns NaN when the pooled variance is zero.
pub fn smd(
    values: &[f64],
    exposure: &[f64],
    weights: Option<&[f64]>,
    binary_covariate: bool,
) -> Result<f64> {
    if values.len() != exposure.len() || weights.is_some_and(|w| w.len() != values.len()) {
        return Err(Error::dims(
            "covariate, exposure and weights must have equal length",
        ));
    }
    if exposure.iter().any(|&z| z != 0.0 && z != 1.0) {
        return Err(Error::invalid("exposure must be 0/1"));
    }
    if let Some(w) = weights {
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("weights must be positive and finite"));
        }
    }
    let split = |t: f64| -> (Vec<f64>, Vec<f64>) {
        let idx: Vec<usize> = (0..values.len()).filter(|&i| exposure[i] == t).collect();
        let x = idx.iter().map(|&i| values[i]).collect();
        let w = match weights {
            Some(w) => idx.iter().map(|&i| w[i]).collect(),
            None => vec![1.0; idx.len()],
        };
        (x, w)
    };
    let (xt, wt) = split(1.0);
    let (xc, wc) = split(0.0);
    if xt.is_empty() || xc.is_empty() {
        return Err(Error::Empty("exposure group"));
    }
    let moments = |x: &[f64], w: &[f64]| -> (f64, f64) {
        let mu = weighted_mean(x, w);
        let var = if binary_covariate {
            mu * (1.0 - mu)
        } else if x.len() < 2 {
            f64::NAN
        } else {
            weighted_variance(x, w)
        };
        (mu, var)
    };
    let (mt, vt) = moments(&xt, &wt);
    let (mc, vc) = moments(&xc, &wc);
    let pooled = ((vt + vc) / 2.0).sqrt();
    if !(pooled > 0.0) {
        return Ok(f64::NAN);
    }
    Ok((mt - mc) / pooled)
}

fn is_binary(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 0.0 || v == 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdRow {
    pub covariate: String,
    pub binary: bool,
    pub unweighted: f64,
    /// One entry per propensity model, in the order supplied.
    pub weighted: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmdReport {
    pub ps_labels: Vec<String>,
    pub rows: Vec<SmdRow>,
    pub threshold: f64,
}

impl SmdReport {
    /// `(covariate, column)` pairs whose |SMD| exceeds the threshold or is NaN.
    /// Column is `None` for the unweighted value.
    pub fn flags(&self) -> Vec<(String, Option<String>)> {
        let bad = |d: f64| d.is_nan() || d.abs() > self.threshold;
        let mut out = Vec::new();
        for r in &self.rows {
            if bad(r.unweighted) {
                out.push((r.covariate.clone(), None));
            }
            for (d, l) in r.weighted.iter().zip(&self.ps_labels) {
                if bad(*d) {
                    out.push((r.covariate.clone(), Some(l.clone())));
                }
            }
        }
        out
    }

    pub fn weighted_column(&self, label: &str) -> Option<Vec<f64>> {
        let k = self.ps_labels.iter().position(|l| l == label)?;
        Some(self.rows.iter().map(|r| r.weighted[k]).collect())
    }

    /// One row per covariate: `covariate,Unweighted,Weighted-<label>..`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["covariate".to_string(), "Unweighted".to_string()];
        header.extend(self.ps_labels.iter().map(|l| format!("Weighted-{l}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.covariate.clone(), format!("{:.4}", r.unweighted)];
            rec.extend(r.weighted.iter().map(|d| format!("{d:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unweighted SMDs for every covariate plus one weighted column per
/// propensity score vector.
pub fn balance_table(ds: &Dataset, ps: &[(&str, &[f64])]) -> Result<SmdReport> {
    let mut weights = Vec::with_capacity(ps.len());
    for (label, p) in ps {
        if p.len() != ds.n() {
            return Err(Error::dims(format!(
                "propensity `{label}` has {} entries for {} units",
                p.len(),
                ds.n()
            )));
        }
        if p.iter().any(|&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::invalid(format!(
                "propensity `{label}` must lie strictly in (0,1)"
            )));
        }
        let w: Vec<f64> = ds
            .exposure
            .iter()
            .zip(p.iter())
            .map(|(&z, &e)| ate_weight(z, e))
            .collect();
        weights.push(w);
    }
    let mut rows = Vec::with_capacity(ds.covariate_names.len());
    for (c, name) in ds.covariate_names.iter().enumerate() {
        let x: Vec<f64> = ds.covariates.column(c).iter().copied().collect();
        let binary = is_binary(&x);
        let unweighted = smd(&x, &ds.exposure, None, binary)?;
        let weighted = weights
            .iter()
            .map(|w| smd(&x, &ds.exposure, Some(w), binary))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SmdRow {
            covariate: name.clone(),
            binary,
            unweighted,
            weighted,
        });
    }
    Ok(SmdReport {
        ps_labels: ps.iter().map(|(l, _)| l.to_string()).collect(),
        rows,
        threshold: SMD_THRESHOLD,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quantile at probability `p` using linear interpolation between order
/// statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&v, p)
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("five-number summary"));
        }
        let mut v = values.to_vec();
        v.sort_by(|a, b| a.total_cmp(b));
        Ok(Self {
            min: v[0],
            q1: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q3: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositivitySummary {
    pub treated: FiveNumber,
    pub control: FiveNumber,
    /// `[max of group minima, min of group maxima]`.
    pub overlap: (f64, f64),
    pub empty_overlap: bool,
}

pub fn positivity_summary(ps: &[f64], exposure: &[f64]) -> Result<PositivitySummary> {
    if ps.len() != exposure.len() {
        return Err(Error::dims("propensity and exposure lengths differ"));
    }
    let group = |t: f64| -> Vec<f64> {
        ps.iter()
            .zip(exposure)
            .filter(|(_, &z)| z == t)
            .map(|(&p, _)| p)
            .collect()
    };
    let treated = FiveNumber::of(&group(1.0))?;
    let control = FiveNumber::of(&group(0.0))?;
    let overlap = (treated.min.max(control.min), treated.max.min(control.max));
    Ok(PositivitySummary {
        treated,
        control,
        overlap,
        empty_overlap: overlap.0 > overlap.1,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseFit {
    /// Log pointwise predictive density.
    pub lppd: f64,
    pub p_waic: f64,
    pub elpd_loo: f64,
    pub pareto_k: f64,
    /// The Pareto fit was degenerate and truncated importance sampling was used.
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
    pub elpd_loo: f64,
    pub p_loo: f64,
    pub loo: f64,
    /// Points with Pareto k̂ above 0.7.
    pub n_high_k: usize,
    pub pointwise: Vec<PointwiseFit>,
}

/// Generalised Pareto fit after Zhang and Stephens, with the shape shrunk
/// toward 0.5 as a weak prior. `x` must be sorted ascending and positive.
/// Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x[n - 1] + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar)
        .collect();
    let profile = |t: f64| -> f64 {
        let b = -t;
        let k = x.iter().map(|&v| (b * v).ln_1p()).sum::<f64>() / n as f64;
        n as f64 * ((b / k).ln() - k - 1.0)
    };
    let l: Vec<f64> = theta.iter().map(|&t| profile(t)).collect();
    let w: Vec<f64> = (0..m)
        .map(|j| 1.0 / l.iter().map(|&lk| (lk - l[j]).exp()).sum::<f64>())
        .collect();
    let wsum: f64 = w.iter().filter(|v| v.is_finite()).sum();
    let theta_hat: f64 = theta
        .iter()
        .zip(&w)
        .filter(|(_, w)| w.is_finite())
        .map(|(t, w)| t * w)
        .sum::<f64>()
        / wsum;
    let k = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let k_adj = (k * n as f64 + 0.5 * 10.0) / (n as f64 + 10.0);
    (k_adj, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Pareto-smoothed log weights from raw log ratios. Returns
/// `(log weights, k̂, truncated)`.
pub fn psis_smooth(log_ratios: &[f64]) -> (Vec<f64>, f64, bool) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let tail = (0.2 * s as f64).floor() as usize;
    let truncate = |lw: &mut Vec<f64>| {
        let lse = log_sum_exp(lw);
        let cap = lse - (s as f64).ln() + 0.5 * (s as f64).ln();
        lw.iter_mut().for_each(|v| *v = v.min(cap));
    };
    if tail < 5 || s <= tail {
        truncate(&mut lw);
        return (lw, f64::NAN, true);
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
    let cutoff = lw[order[s - tail - 1]];
    let tail_idx = &order[s - tail..];
    let exceed: Vec<f64> = tail_idx
        .iter()
        .map(|&i| lw[i].exp() - cutoff.exp())
        .collect();
    if exceed.iter().any(|v| !(*v > 0.0)) || exceed.iter().all(|v| *v == exceed[0]) {
        truncate(&mut lw);
        return (lw, f64::NAN, true);
    }
    let (k, sigma) = gpd_fit(&exceed);
    if !k.is_finite() || !(sigma > 0.0) {
        truncate(&mut lw);
        return (lw, f64::NAN, true);
    }
    for (z, &i) in tail_idx.iter().enumerate() {
        let p = (z as f64 + 0.5) / tail as f64;
        let v = (cutoff.exp() + gpd_quantile(p, k, sigma)).ln();
        lw[i] = v.min(0.0);
    }
    (lw, k, false)
}

fn pointwise(ll: &[f64]) -> PointwiseFit {
    let s = ll.len() as f64;
    let lppd = log_sum_exp(ll) - s.ln();
    // deviations from the first draw keep constant columns at exactly zero
    let shift = ll[0];
    let mean = ll.iter().map(|v| v - shift).sum::<f64>() / s;
    let p_waic = if ll.len() > 1 {
        ll.iter().map(|v| (v - shift - mean).powi(2)).sum::<f64>() / (s - 1.0)
    } else {
        0.0
    };
    let log_ratios: Vec<f64> = ll.iter().map(|v| -v).collect();
    let (lw, pareto_k, truncated) = psis_smooth(&log_ratios);
    let num: Vec<f64> = lw.iter().zip(ll).map(|(w, l)| w + l).collect();
    let elpd_loo = log_sum_exp(&num) - log_sum_exp(&lw);
    PointwiseFit {
        lppd,
        p_waic,
        elpd_loo,
        pareto_k,
        truncated,
    }
}

fn aggregate(points: Vec<PointwiseFit>) -> FitReport {
    let lppd: f64 = points.iter().map(|p| p.lppd).sum();
    let p_waic: f64 = points.iter().map(|p| p.p_waic).sum();
    let elpd_loo: f64 = points.iter().map(|p| p.elpd_loo).sum();
    let elpd_waic = lppd - p_waic;
    FitReport {
        elpd_waic,
        p_waic,
        waic: -2.0 * elpd_waic,
        elpd_loo,
        p_loo: lppd - elpd_loo,
        loo: -2.0 * elpd_loo,
        n_high_k: points
            .iter()
            .filter(|p| p.pareto_k > PARETO_K_THRESHOLD)
            .count(),
        pointwise: points,
    }
}

fn check_finite(ll: &[f64]) -> Result<()> {
    if ll.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pointwise log-likelihood".into()));
    }
    Ok(())
}

/// WAIC and PSIS-LOO from an L×N pointwise log-likelihood matrix.
pub fn fit_report(loglik: &DMatrix<f64>) -> Result<FitReport> {
    let (l, n) = loglik.shape();
    fit_report_columns(n, l, |i, out| {
        out.copy_from_slice(loglik.column(i).as_slice())
    })
}

/// As [`fit_report`], with column `i` (all draws for point `i`) produced by
/// `column(i, out)` so the full matrix need not be held in memory.
pub fn fit_report_columns<F>(n_points: usize, n_draws: usize, column: F) -> Result<FitReport>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    if n_points == 0 || n_draws == 0 {
        return Err(Error::Empty("log-likelihood matrix"));
    }
    let points: Vec<Result<PointwiseFit>> = (0..n_points)
        .into_par_iter()
        .map_init(
            || vec![0.0; n_draws],
            |buf, i| {
                column(i, buf);
                check_finite(buf)?;
                Ok(pointwise(buf))
            },
        )
        .collect();
    Ok(aggregate(points.into_iter().collect::<Result<Vec<_>>>()?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaicReport {
    pub elpd_waic: f64,
    pub p_waic: f64,
    pub waic: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LooReport {
    pub elpd_loo: f64,
    pub p_loo: f64,
    pub loo: f64,
    pub n_high_k: usize,
}

pub fn waic(loglik: &DMatrix<f64>) -> Result<WaicReport> {
    let r = fit_report(loglik)?;
    Ok(WaicReport {
        elpd_waic: r.elpd_waic,
        p_waic: r.p_waic,
        waic: r.waic,
    })
}

pub fn loo(loglik: &DMatrix<f64>) -> Result<LooReport> {
    let r = fit_report(loglik)?;
    Ok(LooReport {
        elpd_loo: r.elpd_loo,
        p_loo: r.p_loo,
        loo: r.loo,
        n_high_k: r.n_high_k,
    })
}
