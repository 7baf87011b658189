//! Generators for synthetic panels with known truth. Used by the test
//! suites and the bundled fixture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::decompose::{FlowDecomposition, FlowSplit, RateObservation, RatePanel, SplitMethod};
use crate::fdm_bayes::{LocationData, PeriodData};
use crate::fdm_det::{flow_difference, model_schedule, model_shares};
use crate::ingest::MigrationPanel;
use crate::schedule::{AgeGrid, RcParams};
use crate::validate::{Estimate, ScoreCell};

/// Smooth population-by-age profile summing to `total`. `tilt > 0` ages
/// the population.
pub fn population_profile(ages: &[f64], total: f64, tilt: f64) -> Vec<f64> {
    let mut w: Vec<f64> = ages
        .iter()
        .map(|a| {
            let base = (-0.012 * a).exp() * (1.0 + 0.35 * (-((a - 30.0) / 15.0).powi(2)).exp());
            let old = if *a >= 85.0 { 0.6 } else { 1.0 };
            base * old * (tilt * (a - 40.0) / 40.0).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x *= total / s);
    w
}

/// Random-intercept rate panel: `IMR = 0.07 + b_i + 0.52 NMR + e` with
/// `b_i ~ N(0, sd_between^2)`, `e ~ N(0, 0.01^2)`, `NMR ~ N(0.01, 0.04^2)`;
/// 39 locations by 3 periods.
pub fn rate_panel(seed: u64, sd_between: f64) -> RatePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let between = Normal::new(0.0, sd_between.max(1e-300)).unwrap();
    let within = Normal::new(0.0, 0.01).unwrap();
    let nmr = Normal::new(0.01, 0.04).unwrap();
    let mut rows = Vec::new();
    for i in 0..39 {
        let b = if sd_between > 0.0 { between.sample(&mut rng) } else { 0.0 };
        for t in 0..3 {
            let x = nmr.sample(&mut rng);
            let y = 0.07 + b + 0.52 * x + within.sample(&mut rng);
            rows.push(RateObservation {
                location: format!("loc{i}"),
                period: format!("p{t}"),
                in_rate: y.max(0.0),
                net_rate: x,
            });
        }
    }
    RatePanel::new(rows).expect("simulated rate panel is valid")
}

/// Panel whose net migration is generated exactly by the deterministic
/// flow-difference model from random totals and ratios.
pub fn deterministic_panel(
    seed: u64,
    n_locations: usize,
    n_periods: usize,
) -> (MigrationPanel, FlowDecomposition) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = AgeGrid::five_year(85);
    let ages = grid.representative_ages();
    let shares = model_shares(&model_schedule(), &grid).expect("model schedule is positive");
    let log_ratio = Normal::new(0.0, 0.4).unwrap();
    let locations: Vec<String> = (0..n_locations).map(|i| format!("loc{i}")).collect();
    let periods: Vec<String> = (0..n_periods).map(|t| format!("p{t}")).collect();
    let mut net = Vec::new();
    let mut pop = Vec::new();
    let mut decomp = FlowDecomposition::new();
    for loc in &locations {
        let size = rng.random_range(2e4..5e5);
        let tilt = rng.random_range(-0.3..0.3);
        for period in &periods {
            let p = population_profile(&ages, size, tilt);
            let inflow = size * rng.random_range(0.3..0.8);
            let outflow = size * rng.random_range(0.3..0.8);
            let ratios: Vec<f64> = (0..grid.len())
                .map(|_| { let z: f64 = log_ratio.sample(&mut rng); z.exp() })
                .collect();
            let g = flow_difference(inflow, outflow, &shares, &ratios).expect("positive shares");
            decomp.push(
                loc,
                period,
                FlowSplit {
                    net: inflow - outflow,
                    inflow,
                    outflow,
                    method: SplitMethod::Heuristic,
                },
            );
            net.extend(g);
            pop.extend(p);
        }
    }
    let panel = MigrationPanel::new(locations, periods, grid, net, pop).expect("valid panel");
    (panel, decomp)
}

/// Generating parameters for one location under the Bayesian model.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesTruth {
    pub theta_in: RcParams,
    pub theta_out: RcParams,
    pub v: f64,
    /// Local population total.
    pub population: f64,
    /// Regional population total, weights the in-schedule.
    pub region_population: f64,
    /// In- and out-migration totals as fractions of the local population.
    pub in_fraction: f64,
    pub out_fraction: f64,
}

impl Default for BayesTruth {
    /// A mid-sized county with retirement in-migration only.
    fn default() -> Self {
        BayesTruth {
            theta_in: RcParams {
                a1: 0.02,
                alpha1: 0.1,
                a2: 0.06,
                alpha2: 0.12,
                mu2: 22.0,
                lambda2: 0.4,
                a3: 0.003,
                alpha3: 0.5,
                mu3: 64.0,
                lambda3: 0.5,
                c: 0.003,
            },
            theta_out: RcParams {
                a1: 0.015,
                alpha1: 0.09,
                a2: 0.05,
                alpha2: 0.1,
                mu2: 24.0,
                lambda2: 0.35,
                c: 0.003,
                ..RcParams::default()
            },
            v: 0.35,
            population: 60_000.0,
            region_population: 7.0e6,
            in_fraction: 0.45,
            out_fraction: 0.4,
        }
    }
}

fn normalized(theta: &RcParams, ages: &[f64], pop: &[f64]) -> Vec<f64> {
    let mut w: Vec<f64> = ages.iter().zip(pop).map(|(a, p)| theta.eval(*a) * p).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Mean in- and out-flows of one period.
pub fn expected_cells(truth: &BayesTruth, ages: &[f64], p: &PeriodData) -> (Vec<f64>, Vec<f64>) {
    let iota = normalized(&truth.theta_in, ages, &p.pop_region)
        .into_iter()
        .map(|s| s * p.inflow)
        .collect();
    let o = normalized(&truth.theta_out, ages, &p.pop_local)
        .into_iter()
        .map(|s| s * p.outflow)
        .collect();
    (iota, o)
}

fn draw_net(truth: &BayesTruth, ages: &[f64], p: &mut PeriodData, rng: &mut ChaCha8Rng) {
    let (iota, o) = expected_cells(truth, ages, p);
    p.net = iota
        .iter()
        .zip(&o)
        .map(|(i, o)| {
            let sd = ((i + o) / truth.v).sqrt();
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            i - o + sd * z
        })
        .collect();
}

/// One location on the five-year grid to 85+, drawn from the Bayesian
/// model with totals jittered by up to 10% per period.
pub fn bayes_location(truth: &BayesTruth, n_periods: usize, seed: u64) -> LocationData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ages = AgeGrid::five_year(85).representative_ages();
    let mut periods = Vec::with_capacity(n_periods);
    for t in 0..n_periods {
        let growth = 1.0 + 0.05 * t as f64;
        let pop_local = population_profile(&ages, truth.population * growth, 0.1 * t as f64);
        let pop_region = population_profile(&ages, truth.region_population * growth, -0.1);
        let total = truth.population * growth;
        let mut p = PeriodData {
            period: format!("p{t}"),
            net: Vec::new(),
            inflow: total * truth.in_fraction * rng.random_range(0.9..1.1),
            outflow: total * truth.out_fraction * rng.random_range(0.9..1.1),
            pop_local,
            pop_region,
        };
        draw_net(truth, &ages, &mut p, &mut rng);
        periods.push(p);
    }
    LocationData {
        location: "synthetic".into(),
        ages,
        periods,
    }
}

/// Multi-location panel drawn from the Bayesian model. The in-schedule is
/// weighted by the panel's aggregate population, matching the default
/// regional fallback. Returns the panel and the true flow totals.
pub fn bayes_panel(
    truths: &[(String, BayesTruth)],
    n_periods: usize,
    seed: u64,
) -> (MigrationPanel, FlowDecomposition) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = AgeGrid::five_year(85);
    let ages = grid.representative_ages();
    let periods: Vec<String> = (0..n_periods).map(|t| format!("{}", 1970 + 10 * t)).collect();
    let pops: Vec<Vec<Vec<f64>>> = truths
        .iter()
        .enumerate()
        .map(|(i, (_, tr))| {
            (0..n_periods)
                .map(|t| {
                    let growth = 1.0 + 0.05 * t as f64;
                    let tilt = 0.15 * (i % 5) as f64 - 0.3 + 0.05 * t as f64;
                    population_profile(&ages, tr.population * growth, tilt)
                })
                .collect()
        })
        .collect();
    let region: Vec<Vec<f64>> = (0..n_periods)
        .map(|t| {
            (0..ages.len())
                .map(|x| pops.iter().map(|p| p[t][x]).sum())
                .collect()
        })
        .collect();
    let mut net = Vec::new();
    let mut pop = Vec::new();
    let mut decomp = FlowDecomposition::new();
    for (i, (loc, tr)) in truths.iter().enumerate() {
        for (t, period) in periods.iter().enumerate() {
            let total: f64 = pops[i][t].iter().sum();
            let mut p = PeriodData {
                period: period.clone(),
                net: Vec::new(),
                inflow: total * tr.in_fraction * rng.random_range(0.9..1.1),
                outflow: total * tr.out_fraction * rng.random_range(0.9..1.1),
                pop_local: pops[i][t].clone(),
                pop_region: region[t].clone(),
            };
            draw_net(tr, &ages, &mut p, &mut rng);
            decomp.push(
                loc,
                period,
                FlowSplit {
                    net: p.inflow - p.outflow,
                    inflow: p.inflow,
                    outflow: p.outflow,
                    method: SplitMethod::Heuristic,
                },
            );
            net.extend(p.net);
            pop.extend(p.pop_local);
        }
    }
    let locations = truths.iter().map(|(l, _)| l.clone()).collect();
    let panel = MigrationPanel::new(locations, periods, grid, net, pop).expect("valid panel");
    (panel, decomp)
}

/// Cells whose truth is drawn from the same normal distribution as their
/// `n_draws` ensemble members, so nominal intervals are exactly calibrated.
pub fn calibrated_ensemble(seed: u64, n_cells: usize, n_draws: usize) -> Vec<ScoreCell> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_cells)
        .map(|c| {
            let mean = rng.random_range(-500.0..500.0);
            let sd = rng.random_range(1.0..200.0);
            let mut draw = || -> f64 {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean + sd * z
            };
            let truth = draw();
            let draws = (0..n_draws).map(|_| draw()).collect();
            ScoreCell {
                location: format!("loc{}", c / 20),
                period: "p0".into(),
                age: c % 20,
                truth,
                estimate: Estimate::Draws(draws),
                population: Some(1000.0),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn profile_sums_to_total() {
        let ages = AgeGrid::five_year(85).representative_ages();
        let p = population_profile(&ages, 1234.0, 0.2);
        assert_relative_eq!(p.iter().sum::<f64>(), 1234.0, max_relative = 1e-12);
        assert!(p.iter().all(|x| *x > 0.0));
    }

    #[test]
    fn deterministic_panel_is_consistent() {
        let (panel, decomp) = deterministic_panel(3, 4, 2);
        for (i, loc) in panel.locations().iter().enumerate() {
            for (t, period) in panel.periods().iter().enumerate() {
                let s = decomp.require(loc, period).unwrap();
                assert_relative_eq!(panel.total(i, t), s.inflow - s.outflow, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn bayes_truth_is_in_prior_support() {
        let t = BayesTruth::default();
        let prior = crate::fdm_bayes::configure_retirement("x", crate::fdm_bayes::RetirementMode::InOnly);
        let s = crate::fdm_bayes::PosteriorSample {
            theta_in: t.theta_in,
            theta_out: t.theta_out,
            v: t.v,
            chain: 0,
            iter: 0,
        };
        assert!(prior.log_density(&s.state()).is_finite());
    }
}
