//! Exact draws from the Pólya-Gamma distribution `PG(1, c)` by the
//! alternating-series rejection sampler with truncation point 0.64.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

const TRUNC: f64 = 0.64;

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// n-th coefficient of the alternating series for the `J*(1, z)` density.
fn series_coef(n: usize, x: f64) -> f64 {
    let k = (n as f64 + 0.5) * PI;
    if x > TRUNC {
        k * (-0.5 * k * k * x).exp()
    } else if x > 0.0 {
        let h = n as f64 + 0.5;
        (-1.5 * ((0.5 * PI).ln() + x.ln()) + k.ln() - 2.0 * h * h / x).exp()
    } else {
        0.0
    }
}

/// Probability that the proposal comes from the exponential tail.
fn tail_mass(z: f64) -> f64 {
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let rt = (1.0 / TRUNC).sqrt();
    let b = rt * (TRUNC * z - 1.0);
    let a = -rt * (TRUNC * z + 1.0);
    let nd = std_normal();
    let x0 = fz.ln() + fz * TRUNC;
    let xb = x0 - z + nd.cdf(b).ln();
    let xa = x0 + z + nd.cdf(a).ln();
    let q_over_p = 4.0 / PI * (xb.exp() + xa.exp());
    1.0 / (1.0 + q_over_p)
}

/// Inverse Gaussian with mean `1/z` and unit shape, truncated to `(0, TRUNC)`.
fn truncated_inverse_gaussian<R: Rng + ?Sized>(z: f64, rng: &mut R) -> f64 {
    let mu = 1.0 / z;
    if mu > TRUNC {
        loop {
            let (mut e1, mut e2): (f64, f64) = (Exp1.sample(rng), Exp1.sample(rng));
            while e1 * e1 > 2.0 * e2 / TRUNC {
                e1 = Exp1.sample(rng);
                e2 = Exp1.sample(rng);
            }
            let x = TRUNC / ((1.0 + TRUNC * e1) * (1.0 + TRUNC * e1));
            let alpha = (-0.5 * z * z * x).exp();
            if rng.random::<f64>() <= alpha {
                return x;
            }
        }
    }
    loop {
        let n: f64 = StandardNormal.sample(rng);
        let y = n * n;
        let mut x = mu + 0.5 * mu * mu * y - 0.5 * mu * (4.0 * mu * y + (mu * y) * (mu * y)).sqrt();
        if rng.random::<f64>() > mu / (mu + x) {
            x = mu * mu / x;
        }
        if x <= TRUNC {
            return x;
        }
    }
}

/// One draw from `PG(1, c)`.
pub fn sample_pg1<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    let z = 0.5 * c.abs();
    let fz = 0.125 * PI * PI + 0.5 * z * z;
    let p_tail = tail_mass(z);
    loop {
        let x = if rng.random::<f64>() < p_tail {
            let e: f64 = Exp1.sample(rng);
            TRUNC + e / fz
        } else {
            truncated_inverse_gaussian(z, rng)
        };
        let mut s = series_coef(0, x);
        let y = rng.random::<f64>() * s;
        let mut n = 0;
        loop {
            n += 1;
            if n % 2 == 1 {
                s -= series_coef(n, x);
                if y <= s {
                    return 0.25 * x;
                }
            } else {
                s += series_coef(n, x);
                if y > s {
                    break;
                }
            }
        }
    }
}

/// `E[PG(1, c)] = tanh(c/2) / (2c)`.
pub fn pg1_mean(c: f64) -> f64 {
    if c.abs() < 1e-6 {
        0.25 - c * c / 48.0
    } else {
        (0.5 * c).tanh() / (2.0 * c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    /// `Var[PG(1,c)] = (sinh c - c) / (4 c³ cosh²(c/2))`, `1/24` at 0.
    fn pg1_var(c: f64) -> f64 {
        if c.abs() < 1e-4 {
            1.0 / 24.0
        } else {
            (c.sinh() - c) / (4.0 * c.powi(3) * (0.5 * c).cosh().powi(2))
        }
    }

    #[test]
    fn moments_match_closed_form() {
        let mut rng = stream_rng(11, 0);
        let n = 200_000;
        for &c in &[0.0, 0.3, 1.0, 2.5, 7.0, -4.0, 25.0] {
            let draws: Vec<f64> = (0..n).map(|_| sample_pg1(c, &mut rng)).collect();
            let mean = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (pg1_var(c) / n as f64).sqrt();
            assert!(
                (mean - pg1_mean(c)).abs() < 4.0 * se,
                "c={c}: {mean} vs {}",
                pg1_mean(c)
            );
            assert!(
                (var / pg1_var(c) - 1.0).abs() < 0.03,
                "c={c}: {var} vs {}",
                pg1_var(c)
            );
            assert!(draws.iter().all(|&d| d > 0.0 && d.is_finite()));
        }
    }
}
