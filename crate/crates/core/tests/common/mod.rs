use mlcausal::gaussian::LinearSimConfig;
use mlcausal::Dataset;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws `Y | Z, X` by sampling `T` from its cluster-wise posterior, then
/// `W | T`, then the outcome noise.
pub fn forward_y<R: Rng>(cfg: &LinearSimConfig, ds: &Dataset, rng: &mut R) -> Vec<f64> {
    let (s2t, v2) = (cfg.sigma_t * cfg.sigma_t, cfg.varrho * cfg.varrho);
    let m = ds.m();
    let mut w = vec![0.0; m];
    for (j, wj) in w.iter_mut().enumerate() {
        let members = ds.clusters.members(j);
        let prec = 1.0 / s2t + members.len() as f64 / v2;
        let r: f64 = members
            .iter()
            .map(|&i| ds.exposure[i] - cfg.alpha0 - cfg.alpha_x * ds.covariates[(i, 0)])
            .sum();
        let t = (cfg.mu_t / s2t + r / v2) / prec + normal(rng) / prec.sqrt();
        let cond_sd = cfg.sigma_w * (1.0 - cfg.rho_tw * cfg.rho_tw).sqrt();
        *wj = cfg.mu_w
            + cfg.rho_tw * cfg.sigma_w / cfg.sigma_t * (t - cfg.mu_t)
            + cond_sd * normal(rng);
    }
    (0..ds.n())
        .map(|i| {
            cfg.beta_z * ds.exposure[i]
                + cfg.beta_x * ds.covariates[(i, 0)]
                + w[ds.clusters.cluster_of(i)]
                + cfg.kappa * normal(rng)
        })
        .collect()
}
