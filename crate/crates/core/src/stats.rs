//! Small numerical helpers: normal densities, truncated-normal moments,
//! empirical quantiles and MCMC convergence diagnostics.

use statrs::function::erf::erfc;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - 0.5 * LN_2PI).exp()
}

/// Normal log-density with mean `mean` and variance `var`.
#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -0.5 * (LN_2PI + var.ln() + d * d / var)
}

/// `Phi(b) - Phi(a)` for `a < b`, evaluated on the side with smaller tails.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        std_normal_cdf(-a) - std_normal_cdf(-b)
    } else {
        std_normal_cdf(b) - std_normal_cdf(a)
    }
}

/// Mean and variance of `N(mean, sd^2)` truncated to `[lo, hi]`.
pub fn truncated_normal_moments(mean: f64, sd: f64, lo: f64, hi: f64) -> (f64, f64) {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = normal_mass(a, b);
    let (pa, pb) = (std_normal_pdf(a), std_normal_pdf(b));
    let m = mean + sd * (pa - pb) / z;
    let ratio = (pa - pb) / z;
    let var = sd * sd * (1.0 + (a * pa - b * pb) / z - ratio * ratio);
    (m, var)
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(p)
}

/// Linear-interpolation quantile (type 7) of already sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Pointwise summary with central 80% and 95% intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Band {
    pub median: f64,
    pub lo80: f64,
    pub hi80: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl Band {
    /// Summarizes `values`, sorting them in place.
    pub fn from_values(values: &mut [f64]) -> Band {
        values.sort_by(f64::total_cmp);
        Band {
            median: quantile_sorted(values, 0.5),
            lo80: quantile_sorted(values, 0.1),
            hi80: quantile_sorted(values, 0.9),
            lo95: quantile_sorted(values, 0.025),
            hi95: quantile_sorted(values, 0.975),
        }
    }

    pub fn point(v: f64) -> Band {
        Band {
            median: v,
            lo80: v,
            hi80: v,
            lo95: v,
            hi95: v,
        }
    }

    pub fn contains80(&self, v: f64) -> bool {
        self.lo80 <= v && v <= self.hi80
    }

    pub fn contains95(&self, v: f64) -> bool {
        self.lo95 <= v && v <= self.hi95
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Split R-hat over equal-length chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let half = chains.iter().map(Vec::len).min().unwrap_or(0) / 2;
    if half < 2 {
        return f64::NAN;
    }
    let splits: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..half], &c[half..2 * half]])
        .collect();
    let n = half as f64;
    let means: Vec<f64> = splits.iter().map(|s| mean(s)).collect();
    let w = splits.iter().map(|s| sample_variance(s)).sum::<f64>() / splits.len() as f64;
    let b = n * sample_variance(&means);
    if w <= 0.0 {
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Multi-chain effective sample size using Geyer's initial monotone
/// sequence on the combined autocorrelation estimate. Capped at the total
/// number of draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let total = (m * n) as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_variance(&c[..n])).collect();
    let w = mean(&vars);
    let b = if m > 1 { nf * sample_variance(&means) } else { 0.0 };
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if var_plus <= 0.0 {
        return total;
    }
    let autocov = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| {
                (0..n - lag)
                    .map(|i| (c[i] - mu) * (c[i + lag] - mu))
                    .sum::<f64>()
                    / nf
            })
            .sum::<f64>()
            / m as f64
    };
    let rho = |lag: usize| 1.0 - (w - autocov(lag)) / var_plus;

    let mut tau = -1.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        pair = pair.min(prev_pair);
        tau += 2.0 * pair;
        prev_pair = pair;
        lag += 2;
    }
    let tau = tau.max(1.0 / total.log10().max(1.0));
    (total / tau).min(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normal_basics() {
        assert_relative_eq!(std_normal_cdf(0.0), 0.5, epsilon = 1e-15);
        assert_relative_eq!(std_normal_cdf(1.959963984540054), 0.975, epsilon = 1e-10);
        assert_relative_eq!(std_normal_quantile(0.975), 1.959963984540054, epsilon = 1e-9);
        assert_relative_eq!(
            normal_logpdf(0.0, 0.0, 1.0),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn truncated_moments_match_quadrature() {
        for &(mu, sd, lo, hi) in &[
            (0.0, 0.3, 0.0, 1.0),
            (25.0, 2.0, 0.0, 55.0),
            (63.0, 2.0, 55.0, 70.0),
            (0.0, 0.005, 0.0, 0.01),
            (0.0, 1.0, 0.3, 2.0),
        ] {
            // Midpoint rule on a fine grid as the oracle.
            let steps = 200_000;
            let h = (hi - lo) / steps as f64;
            let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for k in 0..steps {
                let x = lo + (k as f64 + 0.5) * h;
                let d = std_normal_pdf((x - mu) / sd) * h;
                z += d;
                m1 += x * d;
                m2 += x * x * d;
            }
            let mean_q = m1 / z;
            let var_q = m2 / z - mean_q * mean_q;
            let (m, v) = truncated_normal_moments(mu, sd, lo, hi);
            assert_relative_eq!(m, mean_q, max_relative = 1e-6);
            assert_relative_eq!(v, var_q, max_relative = 1e-5);
        }
    }

    #[test]
    fn quantiles_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.5);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert_relative_eq!(quantile_sorted(&v, 0.1), 1.3, epsilon = 1e-12);
        let b = Band::from_values(&mut [3.0, 3.0, 3.0]);
        assert_eq!(b, Band::point(3.0));
    }

    #[test]
    fn diagnostics_on_iid_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..2000).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.01, "rhat {r}");
        let ess = effective_sample_size(&chains);
        assert!(ess > 4000.0 && ess <= 6000.0, "ess {ess}");
    }

    #[test]
    fn diagnostics_flag_disagreeing_chains() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..1000)
                    .map(|_| c as f64 * 3.0 + { let z: f64 = StandardNormal.sample(&mut rng); z })
                    .collect()
            })
            .collect();
        assert!(split_rhat(&chains) > 1.5);
        // Strongly autocorrelated AR(1) chain has small ESS.
        let mut x = 0.0f64;
        let ar: Vec<f64> = (0..4000)
            .map(|_| {
                x = 0.95 * x + { let z: f64 = StandardNormal.sample(&mut rng); z };
                x
            })
            .collect();
        let ess = effective_sample_size(&[ar]);
        assert!(ess < 400.0, "ess {ess}");
    }
}
