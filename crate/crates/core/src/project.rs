//! Disaggregation of projected net migration totals by sex and age.
//!
//! Each trajectory carries a total `G`. Sex `s` receives `share_s * G` and
//! the age distribution comes from one of three methods. Whatever the
//! method, the age-specific values of a sex sum to its share of `G`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::decompose::{heuristic_decompose, predict_a, MixedEffectsFit};
use crate::error::{Error, Result};
use crate::fdm_bayes::PosteriorSample;
use crate::fdm_det::{det_fdm_net, RatioProfile};
use crate::ingest::{check_header, parse_number, record_line, MigrationPanel};
use crate::schedule::{normalize_in_place, rc_schedule, AgeGrid, RcParams};
use crate::stats::Band;

pub const TRAJECTORY_HEADER: [&str; 4] = ["location", "period", "trajectory", "net_total"];
pub const PROJECTION_HEADER: [&str; 6] = [
    "location",
    "period",
    "trajectory",
    "sex",
    "age_group",
    "net_migration",
];
pub const PROJECTION_SUMMARY_HEADER: [&str; 9] = [
    "location", "period", "sex", "age_group", "median", "lo80", "hi80", "lo95", "hi95",
];

/// Tolerance on `sum_x g_x = G` after disaggregation, in persons.
pub const TOTAL_TOLERANCE: f64 = 1e-6;

/// Sampled totals per (location, period), each with the same number of
/// trajectories indexed `0..L`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    groups: Vec<(String, String, Vec<f64>)>,
    n_trajectories: usize,
}

impl TrajectorySet {
    /// Rows are `(location, period, trajectory, net_total)` in any order.
    pub fn new(rows: Vec<(String, String, usize, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Schema("trajectory set is empty".into()));
        }
        let mut order: Vec<(String, String)> = Vec::new();
        let mut by_key: HashMap<(String, String), BTreeMap<usize, f64>> = HashMap::new();
        for (loc, period, l, g) in rows {
            if !g.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite total for {loc}/{period} trajectory {l}"
                )));
            }
            let key = (loc, period);
            let entry = by_key.entry(key.clone()).or_insert_with(|| {
                order.push(key.clone());
                BTreeMap::new()
            });
            if entry.insert(l, g).is_some() {
                return Err(Error::Schema(format!(
                    "duplicate trajectory {l} for {}/{}",
                    key.0, key.1
                )));
            }
        }
        let mut groups = Vec::with_capacity(order.len());
        let mut n = None;
        for key in order {
            let map = by_key.remove(&key).expect("key recorded");
            let len = map.len();
            if map.keys().copied().ne(0..len) {
                return Err(Error::Schema(format!(
                    "trajectories for {}/{} are not numbered 0..{len}",
                    key.0, key.1
                )));
            }
            match n {
                None => n = Some(len),
                Some(m) if m != len => {
                    return Err(Error::Schema(format!(
                        "{}/{} has {len} trajectories, expected {m}",
                        key.0, key.1
                    )))
                }
                _ => {}
            }
            groups.push((key.0, key.1, map.into_values().collect()));
        }
        Ok(TrajectorySet {
            groups,
            n_trajectories: n.unwrap_or(0),
        })
    }

    pub fn n_trajectories(&self) -> usize {
        self.n_trajectories
    }

    /// (location, period, totals by trajectory), in first-appearance order.
    pub fn groups(&self) -> &[(String, String, Vec<f64>)] {
        &self.groups
    }

    pub fn totals(&self, location: &str, period: &str) -> Option<&[f64]> {
        self.groups
            .iter()
            .find(|(l, p, _)| l == location && p == period)
            .map(|(_, _, g)| g.as_slice())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        check_header(rdr.headers()?, &TRAJECTORY_HEADER)?;
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = record_line(&rec);
            let l: usize = rec[2].parse().map_err(|_| Error::Parse {
                line,
                message: format!("bad trajectory index `{}`", &rec[2]),
            })?;
            rows.push((
                rec[0].to_string(),
                rec[1].to_string(),
                l,
                parse_number(&rec[3], "net_total", line)?,
            ));
        }
        Self::new(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(TRAJECTORY_HEADER)?;
        for (loc, period, totals) in &self.groups {
            for (l, g) in totals.iter().enumerate() {
                w.write_record([loc.as_str(), period.as_str(), &l.to_string(), &g.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io("<trajectory writer>", e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Female, Sex::Male];

    pub fn as_str(&self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }
}

/// Fraction of each total assigned to each sex. The default is an even split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SexShare {
    pub female: f64,
}

impl Default for SexShare {
    fn default() -> Self {
        SexShare { female: 0.5 }
    }
}

impl SexShare {
    pub fn new(female: f64) -> Result<Self> {
        if !(female > 0.0 && female < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "female share {female} must lie in (0, 1)"
            )));
        }
        Ok(SexShare { female })
    }

    pub fn of(&self, sex: Sex) -> f64 {
        match sex {
            Sex::Female => self.female,
            Sex::Male => 1.0 - self.female,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionMethod {
    BasicRc,
    DetFdm,
    BayesFdm,
}

impl ProjectionMethod {
    pub const ALL: [ProjectionMethod; 3] = [
        ProjectionMethod::BasicRc,
        ProjectionMethod::DetFdm,
        ProjectionMethod::BayesFdm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectionMethod::BasicRc => "basic-rc",
            ProjectionMethod::DetFdm => "det-fdm",
            ProjectionMethod::BayesFdm => "bayes-fdm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "basic-rc" | "rc" => Ok(ProjectionMethod::BasicRc),
            "det-fdm" | "det" => Ok(ProjectionMethod::DetFdm),
            "bayes-fdm" | "bayes" => Ok(ProjectionMethod::BayesFdm),
            other => Err(Error::Config(format!(
                "unknown projection method `{other}` (basic-rc, det-fdm, bayes-fdm)"
            ))),
        }
    }
}

/// Age-specific net migration of one sex in one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SexSeries {
    pub location: String,
    pub period: String,
    pub trajectory: usize,
    pub sex: Sex,
    /// Sex-specific total this series sums to.
    pub target: f64,
    pub net: Vec<f64>,
    /// Cell variances of the predictive draw (Bayesian method only).
    pub variance: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgeSexNetMigration {
    pub method: ProjectionMethod,
    pub grid: AgeGrid,
    pub series: Vec<SexSeries>,
}

impl AgeSexNetMigration {
    /// Sum over ages and sexes for one trajectory.
    pub fn total(&self, location: &str, period: &str, trajectory: usize) -> f64 {
        self.series
            .iter()
            .filter(|s| s.location == location && s.period == period && s.trajectory == trajectory)
            .flat_map(|s| s.net.iter())
            .sum()
    }

    /// Largest `|sum_x g_x - target|` over all series.
    pub fn max_total_error(&self) -> f64 {
        self.series
            .iter()
            .map(|s| (s.net.iter().sum::<f64>() - s.target).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PROJECTION_HEADER)?;
        for s in &self.series {
            let l = s.trajectory.to_string();
            for (label, g) in self.grid.labels().zip(&s.net) {
                w.write_record([
                    s.location.as_str(),
                    s.period.as_str(),
                    &l,
                    s.sex.as_str(),
                    label,
                    &g.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<projection writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    /// Bands across trajectories per (location, period, sex, age), with
    /// `both` for the sum over sexes.
    pub fn summary(&self) -> Vec<(String, String, &'static str, Vec<Band>)> {
        let k = self.grid.len();
        let mut keys: Vec<(String, String)> = Vec::new();
        let mut cells: HashMap<(String, String, &'static str), Vec<Vec<f64>>> = HashMap::new();
        let mut both: HashMap<(String, String, usize), Vec<f64>> = HashMap::new();
        for s in &self.series {
            let key = (s.location.clone(), s.period.clone());
            if !keys.contains(&key) {
                keys.push(key.clone());
            }
            let per_age = cells
                .entry((key.0.clone(), key.1.clone(), s.sex.as_str()))
                .or_insert_with(|| vec![Vec::new(); k]);
            for (x, g) in s.net.iter().enumerate() {
                per_age[x].push(*g);
            }
            let sum = both
                .entry((key.0, key.1, s.trajectory))
                .or_insert_with(|| vec![0.0; k]);
            sum.iter_mut().zip(&s.net).for_each(|(a, g)| *a += g);
        }
        let mut out = Vec::new();
        for (loc, period) in keys {
            for sex in Sex::ALL {
                if let Some(per_age) = cells.get_mut(&(loc.clone(), period.clone(), sex.as_str())) {
                    let bands = per_age.iter_mut().map(|v| Band::from_values(v)).collect();
                    out.push((loc.clone(), period.clone(), sex.as_str(), bands));
                }
            }
            let mut per_age = vec![Vec::new(); k];
            let mut ls: Vec<usize> = both
                .keys()
                .filter(|(l, p, _)| *l == loc && *p == period)
                .map(|(_, _, t)| *t)
                .collect();
            ls.sort_unstable();
            for t in ls {
                for (x, g) in both[&(loc.clone(), period.clone(), t)].iter().enumerate() {
                    per_age[x].push(*g);
                }
            }
            let bands = per_age.iter_mut().map(|v| Band::from_values(v)).collect();
            out.push((loc, period, "both", bands));
        }
        out
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PROJECTION_SUMMARY_HEADER)?;
        for (loc, period, sex, bands) in self.summary() {
            for (label, b) in self.grid.labels().zip(&bands) {
                w.write_record([
                    loc.as_str(),
                    period.as_str(),
                    sex,
                    label,
                    &b.median.to_string(),
                    &b.lo80.to_string(),
                    &b.hi80.to_string(),
                    &b.lo95.to_string(),
                    &b.hi95.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<projection summary writer>", e))?;
        Ok(())
    }
}

/// Jump-off populations (both sexes) by location, and the regional
/// population that weights in-migration. Held fixed over future periods
/// and trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPopulation {
    pub local: BTreeMap<String, Vec<f64>>,
    pub regional: Vec<f64>,
}

impl ProjectionPopulation {
    /// Last observed period of `panel`; the region is the panel aggregate.
    pub fn from_panel_last(panel: &MigrationPanel) -> Self {
        let t = panel.periods().len() - 1;
        let local = panel
            .locations()
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), panel.population(i, t).to_vec()))
            .collect();
        ProjectionPopulation {
            local,
            regional: panel.aggregate_population(t),
        }
    }

    pub fn local(&self, location: &str) -> Result<&[f64]> {
        self.local
            .get(location)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownLocation(location.to_string()))
    }
}

fn flat_jobs(trajectories: &TrajectorySet) -> Vec<(usize, usize, f64)> {
    trajectories
        .groups()
        .iter()
        .enumerate()
        .flat_map(|(gi, (_, _, totals))| totals.iter().enumerate().map(move |(l, g)| (gi, l, *g)))
        .collect()
}

fn collect(
    method: ProjectionMethod,
    grid: &AgeGrid,
    results: Vec<Result<Vec<SexSeries>>>,
) -> Result<AgeSexNetMigration> {
    let mut series = Vec::with_capacity(2 * results.len());
    for r in results {
        series.extend(r?);
    }
    Ok(AgeSexNetMigration {
        method,
        grid: grid.clone(),
        series,
    })
}

/// `g^s_x = share_s G r_x / sum_y r_y`.
pub fn project_basic_rc(
    trajectories: &TrajectorySet,
    theta: &RcParams,
    grid: &AgeGrid,
    share: SexShare,
) -> Result<AgeSexNetMigration> {
    let mut shares = rc_schedule(theta, grid)?;
    normalize_in_place(&mut shares)?;
    let results = flat_jobs(trajectories)
        .into_par_iter()
        .map(|(gi, l, g)| {
            let (loc, period, _) = &trajectories.groups()[gi];
            Ok(Sex::ALL
                .iter()
                .map(|&sex| {
                    let target = share.of(sex) * g;
                    SexSeries {
                        location: loc.clone(),
                        period: period.clone(),
                        trajectory: l,
                        sex,
                        target,
                        net: shares.iter().map(|r| target * r).collect(),
                        variance: None,
                    }
                })
                .collect())
        })
        .collect();
    collect(ProjectionMethod::BasicRc, grid, results)
}

/// Deterministic flow-difference projection: each sex's total is split
/// heuristically with multiplier `m` against that sex's population, then
/// distributed with the location's ratios.
pub fn project_det_fdm(
    trajectories: &TrajectorySet,
    ratios: &[RatioProfile],
    theta_m: &RcParams,
    grid: &AgeGrid,
    m: f64,
    population: &ProjectionPopulation,
    share: SexShare,
) -> Result<AgeSexNetMigration> {
    let results = flat_jobs(trajectories)
        .into_par_iter()
        .map(|(gi, l, g)| {
            let (loc, period, _) = &trajectories.groups()[gi];
            let ctx = || format!("location `{loc}`, period `{period}`, trajectory {l}");
            let profile = ratios
                .iter()
                .find(|r| &r.location == loc)
                .ok_or_else(|| Error::UnknownLocation(loc.clone()))?;
            let pop_total: f64 = population.local(loc)?.iter().sum();
            let mut out = Vec::with_capacity(2);
            for sex in Sex::ALL {
                let target = share.of(sex) * g;
                let split = heuristic_decompose(target, share.of(sex) * pop_total, m)
                    .map_err(|e| e.with_context(ctx()))?;
                let net = det_fdm_net(split.inflow, split.outflow, theta_m, grid, &profile.ratios)
                    .map_err(|e| e.with_context(ctx()))?;
                out.push(SexSeries {
                    location: loc.clone(),
                    period: period.clone(),
                    trajectory: l,
                    sex,
                    target,
                    net,
                    variance: None,
                });
            }
            Ok(out)
        })
        .collect();
    collect(ProjectionMethod::DetFdm, grid, results)
}

/// Picks exactly `n` of `draws` by index `floor(l N / n)`, `l = 0..n`.
pub fn even_draws(draws: &[PosteriorSample], n: usize) -> Result<Vec<PosteriorSample>> {
    if draws.is_empty() {
        return Err(Error::InsufficientSample { needed: 1, got: 0 });
    }
    let big = draws.len();
    Ok((0..n).map(|l| draws[l * big / n]).collect())
}

/// Settings of the Bayesian projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesProjection {
    /// Converts the fitted annual rates to the period length.
    pub horizon_scale: f64,
    pub share: SexShare,
    pub seed: u64,
}

/// Inputs of one sex in one trajectory.
struct BayesCell<'a> {
    theta_in: &'a RcParams,
    theta_out: &'a RcParams,
    v: f64,
    inflow: f64,
    outflow: f64,
    pop_local: &'a [f64],
    pop_region: &'a [f64],
}

fn weighted_shares(theta: &RcParams, ages: &[f64], pop: &[f64]) -> Result<Vec<f64>> {
    let mut w: Vec<f64> = ages.iter().zip(pop).map(|(a, p)| theta.eval(*a) * p).collect();
    normalize_in_place(&mut w)?;
    Ok(w)
}

/// Draw `g~ ~ N(iota - o, sigma^2)` with `sigma^2 = min((iota + o) / v,
/// (P_x / 2)^2)`, then shift by `sigma_x / sum sigma` times the excess so
/// the sum is exactly `A - B`. Returns `(g, sigma^2)`.
fn bayes_cell(cell: &BayesCell, ages: &[f64], rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let iota = weighted_shares(cell.theta_in, ages, cell.pop_region)?;
    let o = weighted_shares(cell.theta_out, ages, cell.pop_local)?;
    let k = ages.len();
    let mut g = Vec::with_capacity(k);
    let mut var = Vec::with_capacity(k);
    for x in 0..k {
        let (i, out) = (cell.inflow * iota[x], cell.outflow * o[x]);
        let cap = (cell.pop_local[x] / 2.0).powi(2);
        let s2 = ((i + out) / cell.v).min(cap);
        let z: f64 = StandardNormal.sample(rng);
        g.push(i - out + s2.sqrt() * z);
        var.push(s2);
    }
    let sd: Vec<f64> = var.iter().map(|s| s.sqrt()).collect();
    let sd_total: f64 = sd.iter().sum();
    let excess = g.iter().sum::<f64>() + cell.outflow - cell.inflow;
    for x in 0..k {
        let w = if sd_total > 0.0 { sd[x] / sd_total } else { 1.0 / k as f64 };
        g[x] -= w * excess;
    }
    Ok((g, var))
}

/// Bayesian flow-difference projection. Trajectory `l` of a location is
/// paired with draw `l` of its evened posterior. Each (location, period,
/// trajectory) uses its own stream of the seeded generator, so the result
/// does not depend on the thread count.
pub fn project_bayes_fdm(
    trajectories: &TrajectorySet,
    posteriors: &BTreeMap<String, Vec<PosteriorSample>>,
    fit: &MixedEffectsFit,
    grid: &AgeGrid,
    population: &ProjectionPopulation,
    settings: BayesProjection,
) -> Result<AgeSexNetMigration> {
    let n = trajectories.n_trajectories();
    let mut paired: BTreeMap<&str, Vec<PosteriorSample>> = BTreeMap::new();
    for (loc, _, _) in trajectories.groups() {
        if !paired.contains_key(loc.as_str()) {
            let draws = posteriors.get(loc).ok_or_else(|| Error::MissingArtifact {
                path: format!("posterior draws for `{loc}`").into(),
                producer: "fit-bayes",
            })?;
            paired.insert(loc, even_draws(draws, n)?);
        }
    }
    let ages = grid.representative_ages();
    let share = settings.share;
    let results = flat_jobs(trajectories)
        .into_par_iter()
        .map(|(gi, l, g)| {
            let (loc, period, _) = &trajectories.groups()[gi];
            let ctx = || format!("location `{loc}`, period `{period}`, trajectory {l}");
            let draw = &paired[loc.as_str()][l];
            let local = population.local(loc)?;
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(((gi as u64) << 32) | l as u64);
            let mut out = Vec::with_capacity(2);
            for sex in Sex::ALL {
                let f = share.of(sex);
                let target = f * g;
                let pop_local: Vec<f64> = local.iter().map(|p| f * p).collect();
                let pop_region: Vec<f64> = population.regional.iter().map(|p| f * p).collect();
                let split = predict_a(fit, loc, target, pop_local.iter().sum(), settings.horizon_scale)
                    .map_err(|e| e.with_context(ctx()))?;
                let cell = BayesCell {
                    theta_in: &draw.theta_in,
                    theta_out: &draw.theta_out,
                    v: draw.v,
                    inflow: split.inflow,
                    outflow: split.outflow,
                    pop_local: &pop_local,
                    pop_region: &pop_region,
                };
                let (net, var) = bayes_cell(&cell, &ages, &mut rng).map_err(|e| e.with_context(ctx()))?;
                out.push(SexSeries {
                    location: loc.clone(),
                    period: period.clone(),
                    trajectory: l,
                    sex,
                    target,
                    net,
                    variance: Some(var),
                });
            }
            Ok(out)
        })
        .collect();
    collect(ProjectionMethod::BayesFdm, grid, results)
}

/// Result of one cohort-component step.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortStep {
    pub population: Vec<f64>,
    /// Number of age groups floored at zero.
    pub floored: usize,
}

/// One step of a single-sex cohort-component projection on a grid whose
/// step equals the group width:
///
/// ```text
/// P'_0   = births s_birth + g_0
/// P'_x   = P_{x-1} s_{x-1} + g_x                  0 < x < K-1
/// P'_K-1 = (P_{K-2} + P_{K-1}) s_{K-2} + g_{K-1}  (open group)
/// ```
///
/// `survival` has `K - 1` entries. Negative results are set to zero with a
/// warning.
pub fn cohort_component_step(
    population: &[f64],
    survival: &[f64],
    birth_survival: f64,
    births: f64,
    migration: &[f64],
) -> Result<CohortStep> {
    let k = population.len();
    if k < 2 || survival.len() != k - 1 || migration.len() != k {
        return Err(Error::Schema(format!(
            "cohort step needs K >= 2 groups, K - 1 survival ratios and K migration values; got {k}, {}, {}",
            survival.len(),
            migration.len()
        )));
    }
    if let Some(s) = survival
        .iter()
        .chain(std::iter::once(&birth_survival))
        .find(|s| !(0.0..=1.0).contains(*s))
    {
        return Err(Error::InvalidParameter(format!("survival ratio {s} outside [0, 1]")));
    }
    if !(births >= 0.0) {
        return Err(Error::InvalidParameter(format!("births {births} must be >= 0")));
    }
    let mut next = vec![0.0; k];
    next[0] = births * birth_survival + migration[0];
    for x in 1..k - 1 {
        next[x] = population[x - 1] * survival[x - 1] + migration[x];
    }
    next[k - 1] = (population[k - 2] + population[k - 1]) * survival[k - 2] + migration[k - 1];
    let mut floored = 0;
    for p in next.iter_mut() {
        if *p < 0.0 {
            *p = 0.0;
            floored += 1;
        }
    }
    if floored > 0 {
        log::warn!("cohort step floored {floored} negative age groups at zero");
    }
    Ok(CohortStep {
        population: next,
        floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdm_det::model_schedule;
    use crate::synthetic::{population_profile, BayesTruth};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn set(totals: &[f64]) -> TrajectorySet {
        TrajectorySet::new(
            totals
                .iter()
                .enumerate()
                .map(|(l, g)| ("a".to_string(), "2020".to_string(), l, *g))
                .collect(),
        )
        .unwrap()
    }

    fn population(grid: &AgeGrid) -> ProjectionPopulation {
        let ages = grid.representative_ages();
        ProjectionPopulation {
            local: [("a".to_string(), population_profile(&ages, 80_000.0, 0.0))].into(),
            regional: population_profile(&ages, 6.0e6, -0.1),
        }
    }

    fn posterior(n: usize) -> BTreeMap<String, Vec<PosteriorSample>> {
        let t = BayesTruth::default();
        let draws = (0..n)
            .map(|i| PosteriorSample {
                theta_in: t.theta_in,
                theta_out: t.theta_out,
                v: t.v,
                chain: 0,
                iter: i,
            })
            .collect();
        [("a".to_string(), draws)].into()
    }

    fn fit() -> MixedEffectsFit {
        MixedEffectsFit {
            beta0: 0.07,
            beta1: 0.52,
            var_between: 1e-4,
            var_within: 1e-4,
            imr_min: 0.02,
            intercepts: vec![("a".into(), 0.07)],
        }
    }

    fn bayes(totals: &[f64], seed: u64) -> AgeSexNetMigration {
        let grid = AgeGrid::five_year(85);
        let settings = BayesProjection {
            horizon_scale: 10.0,
            share: SexShare::default(),
            seed,
        };
        project_bayes_fdm(&set(totals), &posterior(totals.len()), &fit(), &grid, &population(&grid), settings).unwrap()
    }

    #[test]
    fn trajectory_set_checks_indexing() {
        let rows = vec![
            ("a".to_string(), "p".to_string(), 0, 1.0),
            ("a".to_string(), "p".to_string(), 2, 1.0),
        ];
        assert!(matches!(TrajectorySet::new(rows), Err(Error::Schema(_))));
        let rows = vec![
            ("a".to_string(), "p".to_string(), 0, 1.0),
            ("b".to_string(), "p".to_string(), 0, 1.0),
            ("b".to_string(), "p".to_string(), 1, 1.0),
        ];
        assert!(matches!(TrajectorySet::new(rows), Err(Error::Schema(_))));
        assert!(TrajectorySet::new(vec![]).is_err());
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let s = set(&[1.5, -20.0, 300.25]);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("location,period,trajectory,net_total"));
        assert_eq!(TrajectorySet::read_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn basic_rc_zero_total() {
        let grid = AgeGrid::five_year(85);
        let out = project_basic_rc(&set(&[0.0]), &model_schedule(), &grid, SexShare::default()).unwrap();
        assert!(out.series.iter().all(|s| s.net.iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn basic_rc_uniform_schedule() {
        let grid = AgeGrid::five_year(95);
        assert_eq!(grid.len(), 20);
        let theta = RcParams {
            c: 0.01,
            ..Default::default()
        };
        let out = project_basic_rc(&set(&[1000.0]), &theta, &grid, SexShare::default()).unwrap();
        assert_eq!(out.series.len(), 2);
        for s in &out.series {
            for g in &s.net {
                assert_relative_eq!(*g, 25.0, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn basic_rc_rejects_zero_schedule() {
        let grid = AgeGrid::five_year(85);
        let r = project_basic_rc(&set(&[10.0]), &RcParams::default(), &grid, SexShare::default());
        assert!(matches!(r, Err(Error::DegenerateSchedule(_))));
    }

    #[test]
    fn det_fdm_zero_total_unit_ratios() {
        let grid = AgeGrid::five_year(85);
        let ratios = vec![RatioProfile::new("a", vec![1.0; grid.len()]).unwrap()];
        let out = project_det_fdm(&set(&[0.0]), &ratios, &model_schedule(), &grid, 0.7, &population(&grid), SexShare::default()).unwrap();
        for s in &out.series {
            for g in &s.net {
                assert!(g.abs() < 1e-9, "{g}");
            }
        }
    }

    #[test]
    fn det_fdm_toy_three_ages() {
        // Grid 0-4, 5-9, 10+ with a constant schedule: r = (1/3, 1/3, 1/3).
        let grid = AgeGrid::from_labels(&["0-4", "5-9", "10+"]).unwrap();
        let theta = RcParams {
            c: 0.2,
            ..Default::default()
        };
        let ratios = vec![RatioProfile::new("a", vec![1.0, 2.0, 0.5]).unwrap()];
        let pop = ProjectionPopulation {
            local: [("a".to_string(), vec![100.0, 100.0, 200.0])].into(),
            regional: vec![1.0, 1.0, 1.0],
        };
        let out = project_det_fdm(&set(&[40.0]), &ratios, &theta, &grid, 0.5, &pop, SexShare::default()).unwrap();
        // Per sex: G = 20, P = 200, A = 110, B = 90.
        // in shares R / sum R = (1, 2, .5) / 3.5; out shares (1/R) / sum = (1, .5, 2) / 3.5.
        let expect = [
            110.0 / 3.5 - 90.0 / 3.5,
            220.0 / 3.5 - 45.0 / 3.5,
            55.0 / 3.5 - 180.0 / 3.5,
        ];
        for s in &out.series {
            for (g, e) in s.net.iter().zip(expect) {
                assert_relative_eq!(*g, e, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn det_fdm_is_deterministic_across_trajectories() {
        let grid = AgeGrid::five_year(85);
        let ratios = vec![RatioProfile::new("a", (0..grid.len()).map(|x| 0.8 + 0.02 * x as f64).collect()).unwrap()];
        let out = project_det_fdm(&set(&[500.0, 500.0]), &ratios, &model_schedule(), &grid, 0.7, &population(&grid), SexShare::default()).unwrap();
        assert_eq!(out.series[0].net, out.series[2].net);
        assert_eq!(out.series[1].net, out.series[3].net);
    }

    #[test]
    fn det_fdm_unknown_location() {
        let grid = AgeGrid::five_year(85);
        let ratios = vec![RatioProfile::new("b", vec![1.0; grid.len()]).unwrap()];
        let r = project_det_fdm(&set(&[1.0]), &ratios, &model_schedule(), &grid, 0.7, &population(&grid), SexShare::default());
        assert!(matches!(r, Err(Error::UnknownLocation(_))));
    }

    #[test]
    fn variance_cap_applies() {
        // (iota + o) / v = 100 against a cell of 4 people: cap (4/2)^2 = 4.
        let theta = RcParams {
            c: 0.01,
            ..Default::default()
        };
        let ages = [2.5];
        let cell = BayesCell {
            theta_in: &theta,
            theta_out: &theta,
            v: 0.5,
            inflow: 30.0,
            outflow: 20.0,
            pop_local: &[4.0],
            pop_region: &[1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (g, var) = bayes_cell(&cell, &ages, &mut rng).unwrap();
        assert_eq!(var, vec![4.0]);
        assert_relative_eq!(g[0], 10.0, max_relative = 1e-12);
    }

    #[test]
    fn bayes_zero_noise_limit() {
        let theta_in = BayesTruth::default().theta_in;
        let theta_out = BayesTruth::default().theta_out;
        let ages = AgeGrid::five_year(85).representative_ages();
        let pop = population_profile(&ages, 50_000.0, 0.0);
        let region = population_profile(&ages, 2.0e6, 0.1);
        let cell = BayesCell {
            theta_in: &theta_in,
            theta_out: &theta_out,
            v: 1e30,
            inflow: 9000.0,
            outflow: 7000.0,
            pop_local: &pop,
            pop_region: &region,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (g, _) = bayes_cell(&cell, &ages, &mut rng).unwrap();
        let iota = weighted_shares(&theta_in, &ages, &region).unwrap();
        let o = weighted_shares(&theta_out, &ages, &pop).unwrap();
        for x in 0..ages.len() {
            let mean = 9000.0 * iota[x] - 7000.0 * o[x];
            assert!((g[x] - mean).abs() < 1e-9, "{} vs {}", g[x], mean);
        }
    }

    #[test]
    fn bayes_reproducible_and_capped() {
        let a = bayes(&[300.0, -150.0, 800.0], 11);
        let b = bayes(&[300.0, -150.0, 800.0], 11);
        assert_eq!(a, b);
        let pop = population(&AgeGrid::five_year(85));
        for s in &a.series {
            let var = s.variance.as_ref().unwrap();
            for (v, p) in var.iter().zip(pop.local("a").unwrap()) {
                assert!(*v <= (0.5 * p / 2.0).powi(2) * (1.0 + 1e-12));
            }
        }
        assert!(a.max_total_error() <= TOTAL_TOLERANCE);
    }

    #[test]
    fn bayes_adds_spread_for_fixed_total() {
        let totals = vec![400.0; 200];
        let grid = AgeGrid::five_year(85);
        let bayes = bayes(&totals, 5);
        let ratios = vec![RatioProfile::new("a", vec![1.0; grid.len()]).unwrap()];
        let det = project_det_fdm(&set(&totals), &ratios, &model_schedule(), &grid, 0.7, &population(&grid), SexShare::default()).unwrap();
        let spread = |p: &AgeSexNetMigration, x: usize| {
            let v: Vec<f64> = p.series.iter().filter(|s| s.sex == Sex::Female).map(|s| s.net[x]).collect();
            crate::stats::sample_variance(&v)
        };
        let female = |p: &AgeSexNetMigration| -> Vec<Vec<f64>> {
            p.series.iter().filter(|s| s.sex == Sex::Female).map(|s| s.net.clone()).collect()
        };
        assert!(female(&det).windows(2).all(|w| w[0] == w[1]));
        for x in 0..grid.len() {
            assert!(spread(&bayes, x) > 0.0);
        }
    }

    #[test]
    fn missing_posterior_names_producer() {
        let grid = AgeGrid::five_year(85);
        let settings = BayesProjection {
            horizon_scale: 10.0,
            share: SexShare::default(),
            seed: 1,
        };
        let r = project_bayes_fdm(&set(&[1.0]), &BTreeMap::new(), &fit(), &grid, &population(&grid), settings);
        assert!(matches!(r, Err(Error::MissingArtifact { producer: "fit-bayes", .. })));
    }

    #[test]
    fn even_draws_picks_by_floor() {
        let draws = posterior(10).remove("a").unwrap();
        let picked = even_draws(&draws, 4).unwrap();
        let iters: Vec<usize> = picked.iter().map(|d| d.iter).collect();
        assert_eq!(iters, vec![0, 2, 5, 7]);
        assert_eq!(even_draws(&draws, 25).unwrap().len(), 25);
    }

    #[test]
    fn summary_bands_over_trajectories() {
        let grid = AgeGrid::five_year(85);
        let out = project_basic_rc(&set(&[0.0, 100.0, 200.0]), &model_schedule(), &grid, SexShare::default()).unwrap();
        let summary = out.summary();
        assert_eq!(summary.len(), 3);
        let both = summary.iter().find(|s| s.2 == "both").unwrap();
        let shares = {
            let mut r = rc_schedule(&model_schedule(), &grid).unwrap();
            normalize_in_place(&mut r).unwrap();
            r
        };
        for (b, r) in both.3.iter().zip(&shares) {
            assert_relative_eq!(b.median, 100.0 * r, max_relative = 1e-12);
        }
        let mut buf = Vec::new();
        out.write_summary_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 3 * grid.len());
    }

    #[test]
    fn cohort_pure_shift() {
        let step = cohort_component_step(&[10.0, 20.0, 30.0, 40.0], &[1.0; 3], 1.0, 0.0, &[0.0; 4]).unwrap();
        assert_eq!(step.population, vec![0.0, 10.0, 20.0, 70.0]);
        assert_eq!(step.floored, 0);
    }

    #[test]
    fn cohort_zero_survival_keeps_migration() {
        let step = cohort_component_step(&[10.0, 20.0, 30.0], &[0.0; 2], 0.0, 5.0, &[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(step.population, vec![1.0, 0.0, 3.0]);
        assert_eq!(step.floored, 1);
    }

    #[test]
    fn cohort_toy_three_ages() {
        let step = cohort_component_step(&[100.0, 50.0, 20.0], &[0.9, 0.8], 0.95, 10.0, &[1.0, 2.0, -3.0]).unwrap();
        let expect = [10.0 * 0.95 + 1.0, 100.0 * 0.9 + 2.0, (50.0 + 20.0) * 0.8 - 3.0];
        for (p, e) in step.population.iter().zip(expect) {
            assert_relative_eq!(*p, e, max_relative = 1e-12);
        }
    }

    #[test]
    fn cohort_rejects_bad_input() {
        assert!(matches!(cohort_component_step(&[1.0, 2.0], &[0.5], 1.0, 0.0, &[0.0]), Err(Error::Schema(_))));
        assert!(matches!(cohort_component_step(&[1.0, 2.0], &[1.5], 1.0, 0.0, &[0.0; 2]), Err(Error::InvalidParameter(_))));
    }

    proptest! {
        #[test]
        fn cohort_conserves_without_flows(pop in proptest::collection::vec(0.0..1e5f64, 2..20)) {
            let k = pop.len();
            let step = cohort_component_step(&pop, &vec![1.0; k - 1], 1.0, 0.0, &vec![0.0; k]).unwrap();
            let before: f64 = pop.iter().sum();
            let after: f64 = step.population.iter().sum();
            prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        }

        #[test]
        fn all_methods_conserve_totals(totals in proptest::collection::vec(-3000.0..3000.0f64, 1..6)) {
            let grid = AgeGrid::five_year(85);
            let pop = population(&grid);
            let ratios = vec![RatioProfile::new("a", (0..grid.len()).map(|x| 1.2 - 0.03 * x as f64).collect()).unwrap()];
            let s = set(&totals);
            let outs = [
                project_basic_rc(&s, &model_schedule(), &grid, SexShare::default()).unwrap(),
                project_det_fdm(&s, &ratios, &model_schedule(), &grid, 0.7, &pop, SexShare::default()).unwrap(),
                bayes(&totals, 9),
            ];
            for out in &outs {
                for (l, g) in totals.iter().enumerate() {
                    prop_assert!((out.total("a", "2020", l) - g).abs() <= TOTAL_TOLERANCE);
                }
            }
        }
    }
}
