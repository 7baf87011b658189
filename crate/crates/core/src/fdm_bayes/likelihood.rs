//! Normal approximation to the difference of in- and out-flows.

use crate::decompose::FlowDecomposition;
use crate::error::{Error, Result};
use crate::ingest::MigrationPanel;
use crate::schedule::RcParams;
use crate::stats::normal_logpdf;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

use super::PosteriorSample;

/// Smallest cell variance, in persons squared.
pub(crate) const VARIANCE_FLOOR: f64 = 1e-8;

/// Observations for one period of one location.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodData {
    pub period: String,
    pub net: Vec<f64>,
    /// Total in-migration `A`.
    pub inflow: f64,
    /// Total out-migration `B`.
    pub outflow: f64,
    pub pop_local: Vec<f64>,
    /// Population of the wider region, weights the in-schedule.
    pub pop_region: Vec<f64>,
}

/// Everything the likelihood needs for one location.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationData {
    pub location: String,
    /// Representative age of each group.
    pub ages: Vec<f64>,
    pub periods: Vec<PeriodData>,
}

impl LocationData {
    /// Builds the location slice from the panel and flow decomposition.
    /// `regional[t]` is the regional population for panel period `t`; when
    /// absent the sum over all panel locations is used.
    pub fn from_panel(
        panel: &MigrationPanel,
        location: &str,
        decomp: &FlowDecomposition,
        regional: Option<&[Vec<f64>]>,
    ) -> Result<Self> {
        let i = panel
            .location_index(location)
            .ok_or_else(|| Error::UnknownLocation(location.to_string()))?;
        if let Some(r) = regional {
            if r.len() != panel.periods().len() {
                return Err(Error::Schema(format!(
                    "regional population covers {} periods, panel has {}",
                    r.len(),
                    panel.periods().len()
                )));
            }
        }
        let mut periods = Vec::with_capacity(panel.periods().len());
        for (t, name) in panel.periods().iter().enumerate() {
            let split = decomp.require(location, name)?;
            let pop_region = match regional {
                Some(r) => r[t].clone(),
                None => panel.aggregate_population(t),
            };
            periods.push(PeriodData {
                period: name.clone(),
                net: panel.net(i, t).to_vec(),
                inflow: split.inflow,
                outflow: split.outflow,
                pop_local: panel.population(i, t).to_vec(),
                pop_region,
            });
        }
        let data = LocationData {
            location: location.to_string(),
            ages: panel.grid().representative_ages(),
            periods,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.ages.len();
        if self.periods.is_empty() {
            return Err(Error::Consistency(format!(
                "no periods of data for `{}`",
                self.location
            )));
        }
        for p in &self.periods {
            if p.net.len() != k || p.pop_local.len() != k || p.pop_region.len() != k {
                return Err(Error::Schema(format!(
                    "period {} of `{}` does not match the {k}-group grid",
                    p.period, self.location
                )));
            }
            for pop in [&p.pop_local, &p.pop_region] {
                if pop.iter().any(|x| !(x.is_finite() && *x >= 0.0))
                    || !pop.iter().any(|x| *x > 0.0)
                {
                    return Err(Error::Consistency(format!(
                        "population for `{}` period {} must be nonnegative and not all zero",
                        self.location, p.period
                    )));
                }
            }
            if !(p.inflow >= 0.0 && p.outflow >= 0.0) {
                return Err(Error::Consistency(format!(
                    "negative flow totals for `{}` period {}",
                    self.location, p.period
                )));
            }
        }
        Ok(())
    }

    pub fn n_ages(&self) -> usize {
        self.ages.len()
    }

    pub fn n_cells(&self) -> usize {
        self.ages.len() * self.periods.len()
    }
}

/// Which population weights a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Side {
    In,
    Out,
}

/// Expected age-specific flows, period-major, into `out`. Returns false when
/// some period's normalizing constant is not positive and finite.
pub(crate) fn expected_flows(
    theta: &RcParams,
    data: &LocationData,
    side: Side,
    rates: &mut [f64],
    out: &mut [f64],
) -> bool {
    let k = data.ages.len();
    fill_rates(theta, &data.ages, rates);
    for (t, p) in data.periods.iter().enumerate() {
        let (pop, total) = match side {
            Side::In => (&p.pop_region, p.inflow),
            Side::Out => (&p.pop_local, p.outflow),
        };
        let cells = &mut out[t * k..(t + 1) * k];
        let mut sum = 0.0;
        for ((c, r), w) in cells.iter_mut().zip(rates.iter()).zip(pop) {
            *c = r * w;
            sum += *c;
        }
        if !(sum > 0.0 && sum.is_finite()) {
            return false;
        }
        let scale = total / sum;
        cells.iter_mut().for_each(|c| *c *= scale);
    }
    true
}

/// `theta.eval` at every age. On equally spaced ages the exponentials in
/// `age` are built up by repeated multiplication, which roughly halves the
/// number of `exp` calls.
pub(crate) fn fill_rates(theta: &RcParams, ages: &[f64], rates: &mut [f64]) {
    let n = ages.len();
    let h = if n > 1 { ages[1] - ages[0] } else { 0.0 };
    let uniform = n > 2 && h > 0.0 && ages.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h);
    if !uniform || !fill_uniform(theta, ages[0], h, rates) {
        for (r, age) in rates.iter_mut().zip(ages) {
            *r = theta.eval(*age);
        }
    }
}

fn fill_uniform(theta: &RcParams, x0: f64, h: f64, rates: &mut [f64]) -> bool {
    rates.iter_mut().for_each(|r| *r = theta.c);
    if theta.a1 != 0.0 {
        let (mut term, step) = (theta.a1 * (-theta.alpha1 * x0).exp(), (-theta.alpha1 * h).exp());
        for r in rates.iter_mut() {
            *r += term;
            term *= step;
        }
    }
    for (a, alpha, mu, lambda) in [
        (theta.a2, theta.alpha2, theta.mu2, theta.lambda2),
        (theta.a3, theta.alpha3, theta.mu3, theta.lambda3),
    ] {
        if a == 0.0 {
            continue;
        }
        let u0 = x0 - mu;
        let (mut outer, outer_step) = ((-alpha * u0).exp(), (-alpha * h).exp());
        let (mut inner, inner_step) = ((-lambda * u0).exp(), (-lambda * h).exp());
        if !(outer.is_finite() && inner.is_finite() && outer < 1e150 && inner < 1e150) {
            return false;
        }
        for r in rates.iter_mut() {
            *r += a * outer * (-inner).exp();
            outer *= outer_step;
            inner *= inner_step;
        }
    }
    true
}

#[inline]
pub(crate) fn cell_logpdf(g: f64, iota: f64, o: f64, v: f64) -> f64 {
    let var = ((iota + o) / v).max(VARIANCE_FLOOR);
    normal_logpdf(g, iota - o, var)
}

/// Sum of cell log-densities given cached expected flows. Logarithms of
/// the variances are taken of products over blocks of eight cells, which
/// keeps the products well inside the range of `f64`.
pub(crate) fn loglik_from_flows(data: &LocationData, inflows: &[f64], outflows: &[f64], v: f64) -> f64 {
    let k = data.ages.len();
    let floor = VARIANCE_FLOOR * v;
    let mut log_sum = 0.0;
    let mut quad = 0.0;
    let mut prod = 1.0;
    let mut in_prod = 0;
    for (t, p) in data.periods.iter().enumerate() {
        let base = t * k;
        for x in 0..k {
            let (i, o) = (inflows[base + x], outflows[base + x]);
            let s = (i + o).max(floor);
            let d = p.net[x] - (i - o);
            quad += d * d / s;
            prod *= s;
            in_prod += 1;
            if in_prod == 8 {
                log_sum += prod.ln();
                prod = 1.0;
                in_prod = 0;
            }
        }
    }
    log_sum += prod.ln();
    let n = inflows.len() as f64;
    -0.5 * (n * (LN_2PI - v.ln()) + log_sum + v * quad)
}

fn ordered_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Order-independent expected flows for one schedule.
fn flows_exact(theta: &RcParams, data: &LocationData, side: Side) -> Result<Vec<f64>> {
    let rates: Vec<f64> = data.ages.iter().map(|a| theta.eval(*a)).collect();
    let mut out = Vec::with_capacity(data.n_cells());
    for p in &data.periods {
        let (pop, total) = match side {
            Side::In => (&p.pop_region, p.inflow),
            Side::Out => (&p.pop_local, p.outflow),
        };
        let mut w: Vec<f64> = rates.iter().zip(pop).map(|(r, q)| r * q).collect();
        let sum = ordered_sum(&mut w.clone());
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::DegenerateSchedule(format!(
                "{} schedule has zero weight in period {}",
                if side == Side::In { "in" } else { "out" },
                p.period
            )));
        }
        w.iter_mut().for_each(|c| *c = *c / sum * total);
        out.extend(w);
    }
    Ok(out)
}

/// Log-likelihood of the observed age-specific net migration of one
/// location. Summation is order independent, so permuting cells leaves the
/// value bit-for-bit unchanged.
pub fn log_likelihood(sample: &PosteriorSample, data: &LocationData) -> Result<f64> {
    if !(sample.v > 0.0 && sample.v < 1.0) {
        return Err(Error::InvalidParameter(format!("v = {} must be in (0, 1)", sample.v)));
    }
    sample.theta_in.validate()?;
    sample.theta_out.validate()?;
    data.validate()?;
    let inflows = flows_exact(&sample.theta_in, data, Side::In)?;
    let outflows = flows_exact(&sample.theta_out, data, Side::Out)?;
    let k = data.n_ages();
    let mut terms = Vec::with_capacity(data.n_cells());
    for (t, p) in data.periods.iter().enumerate() {
        for x in 0..k {
            terms.push(cell_logpdf(
                p.net[x],
                inflows[t * k + x],
                outflows[t * k + x],
                sample.v,
            ));
        }
    }
    let ll = ordered_sum(&mut terms);
    if !ll.is_finite() {
        return Err(Error::NumericGuard(format!(
            "log-likelihood for `{}` is {ll}",
            data.location
        )));
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdm_det::model_schedule;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn one_cell(net: f64, inflow: f64, outflow: f64) -> LocationData {
        LocationData {
            location: "x".into(),
            ages: vec![20.0],
            periods: vec![PeriodData {
                period: "p".into(),
                net: vec![net],
                inflow,
                outflow,
                pop_local: vec![1000.0],
                pop_region: vec![5000.0],
            }],
        }
    }

    fn sample(v: f64) -> PosteriorSample {
        PosteriorSample {
            theta_in: model_schedule(),
            theta_out: model_schedule(),
            v,
            chain: 0,
            iter: 0,
        }
    }

    #[test]
    fn single_cell_peak() {
        // One age group: iota = A, o = B, variance (A + B) / v.
        let data = one_cell(50.0, 100.0, 50.0);
        let ll = log_likelihood(&sample(0.5), &data).unwrap();
        assert_relative_eq!(
            ll,
            -0.5 * (2.0 * std::f64::consts::PI * 300.0).ln(),
            epsilon = 1e-12
        );
        let off = log_likelihood(&sample(0.5), &one_cell(60.0, 100.0, 50.0)).unwrap();
        assert_relative_eq!(ll - off, 100.0 / 600.0, epsilon = 1e-12);
    }

    #[test]
    fn doubling_v() {
        let data = one_cell(30.0, 100.0, 50.0);
        let l1 = log_likelihood(&sample(0.2), &data).unwrap();
        let l2 = log_likelihood(&sample(0.4), &data).unwrap();
        // var 750 -> 375; quadratic term doubles.
        let expect = 0.5 * 2f64.ln() - 0.5 * 400.0 / 750.0;
        assert_relative_eq!(l2 - l1, expect, epsilon = 1e-12);
    }

    #[test]
    fn zero_residual_is_sum_of_log_normalizers() {
        let theta = model_schedule();
        let ages: Vec<f64> = (0..18).map(|k| 5.0 * k as f64 + 2.5).collect();
        let pop: Vec<f64> = (0..18).map(|k| 1000.0 + 50.0 * k as f64).collect();
        let mut data = LocationData {
            location: "x".into(),
            ages,
            periods: vec![PeriodData {
                period: "p".into(),
                net: vec![0.0; 18],
                inflow: 900.0,
                outflow: 700.0,
                pop_local: pop.clone(),
                pop_region: pop.iter().map(|p| p * 3.0).collect(),
            }],
        };
        let iota = flows_exact(&theta, &data, Side::In).unwrap();
        let o = flows_exact(&theta, &data, Side::Out).unwrap();
        data.periods[0].net = iota.iter().zip(&o).map(|(a, b)| a - b).collect();
        let v = 0.3;
        let expect: f64 = iota
            .iter()
            .zip(&o)
            .map(|(a, b)| -0.5 * (2.0 * std::f64::consts::PI * (a + b) / v).ln())
            .sum();
        let ll = log_likelihood(&sample(v), &data).unwrap();
        assert_relative_eq!(ll, expect, max_relative = 1e-12);
    }

    #[test]
    fn fast_path_agrees() {
        for data in [
            one_cell(10.0, 100.0, 80.0),
            crate::synthetic::bayes_location(&crate::synthetic::BayesTruth::default(), 7, 1),
        ] {
            let s = sample(0.7);
            let mut rates = vec![0.0; data.n_ages()];
            let mut a = vec![0.0; data.n_cells()];
            let mut b = vec![0.0; data.n_cells()];
            assert!(expected_flows(&s.theta_in, &data, Side::In, &mut rates, &mut a));
            assert!(expected_flows(&s.theta_out, &data, Side::Out, &mut rates, &mut b));
            assert_relative_eq!(
                loglik_from_flows(&data, &a, &b, s.v),
                log_likelihood(&s, &data).unwrap(),
                max_relative = 1e-12
            );
        }
    }

    proptest! {
        #[test]
        fn fast_rates_match_direct(
            a1 in 0.0..1.0f64, alpha1 in 0.0..1.0f64, a2 in 0.0..1.0f64, alpha2 in 0.0..1.0f64,
            mu2 in 0.0..55.0f64, lambda2 in 0.0..2.0f64, a3 in 0.0..1.0f64, alpha3 in 0.0..1.0f64,
            mu3 in 55.0..70.0f64, lambda3 in 0.0..2.0f64, c in 0.0..0.01f64,
        ) {
            let theta = RcParams { a1, alpha1, a2, alpha2, mu2, lambda2, a3, alpha3, mu3, lambda3, c };
            let ages: Vec<f64> = (0..18).map(|k| 2.5 + 5.0 * k as f64).collect();
            let mut fast = vec![0.0; 18];
            fill_rates(&theta, &ages, &mut fast);
            for (f, age) in fast.iter().zip(&ages) {
                let d = theta.eval(*age);
                prop_assert!((f - d).abs() <= 1e-12 * d.abs().max(1e-300) + 1e-300, "{} vs {}", f, d);
            }
        }
    }

    #[test]
    fn rejects_bad_v() {
        assert!(log_likelihood(&sample(1.0), &one_cell(0.0, 1.0, 1.0)).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(seed in 0u64..1000, shift in 0usize..18) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let k = 18;
            let ages: Vec<f64> = (0..k).map(|x| 5.0 * x as f64 + 2.5).collect();
            let periods: Vec<PeriodData> = (0..3).map(|t| PeriodData {
                period: format!("p{t}"),
                net: (0..k).map(|_| rng.random_range(-200.0..200.0)).collect(),
                inflow: rng.random_range(1000.0..3000.0),
                outflow: rng.random_range(1000.0..3000.0),
                pop_local: (0..k).map(|_| rng.random_range(500.0..5000.0)).collect(),
                pop_region: (0..k).map(|_| rng.random_range(5e4..5e5)).collect(),
            }).collect();
            let data = LocationData { location: "x".into(), ages, periods };
            let perm: Vec<usize> = (0..k).map(|x| (x * 7 + shift) % k).collect();
            let pick = |v: &[f64]| perm.iter().map(|&j| v[j]).collect::<Vec<f64>>();
            let mut permuted = LocationData {
                location: "x".into(),
                ages: pick(&data.ages),
                periods: data.periods.iter().rev().map(|p| PeriodData {
                    period: p.period.clone(),
                    net: pick(&p.net),
                    inflow: p.inflow,
                    outflow: p.outflow,
                    pop_local: pick(&p.pop_local),
                    pop_region: pick(&p.pop_region),
                }).collect(),
            };
            permuted.periods.rotate_left(1);
            let s = sample(0.35);
            let a = log_likelihood(&s, &data).unwrap();
            let b = log_likelihood(&s, &permuted).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
