//! Error and coverage metrics for age-specific estimates against observed
//! values.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::decompose::FlowDecomposition;
use crate::error::{Error, Result};
use crate::fdm_bayes::PosteriorSummary;
use crate::fdm_det::{det_fdm_net, RatioProfile};
use crate::ingest::MigrationPanel;
use crate::schedule::{normalize_in_place, rc_schedule, RcParams};
use crate::stats::Band;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scale {
    Counts,
    /// Migrants per 100 people of the cell's population.
    Rates,
    /// Percent of the (location, period) total across ages.
    Shares,
}

impl Scale {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scale::Counts => "counts",
            Scale::Rates => "rates",
            Scale::Shares => "shares",
        }
    }
}

/// An estimate of one cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimate {
    Point(f64),
    /// Pre-computed bands. Valid on the counts and rates scales only.
    Band(Band),
    /// Ensemble values; draw `d` of all cells in one (location, period)
    /// belong to the same realization.
    Draws(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCell {
    pub location: String,
    pub period: String,
    pub age: usize,
    pub truth: f64,
    pub estimate: Estimate,
    /// Population of the cell, needed on the rates scale.
    pub population: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub n: usize,
    pub mae: f64,
    pub rmse: f64,
    pub bias: f64,
    /// Percent of cells inside the central interval; `None` for point
    /// estimates.
    pub cov80: Option<f64>,
    pub cov95: Option<f64>,
}

/// Cell on the requested scale: (truth, band or point).
struct Scored {
    age: usize,
    truth: f64,
    point: f64,
    band: Option<Band>,
}

fn check_alignment(cells: &[ScoreCell]) -> Result<()> {
    if cells.is_empty() {
        return Err(Error::Schema("no cells to score".into()));
    }
    let mut seen = HashMap::new();
    let mut draws: HashMap<(&str, &str), usize> = HashMap::new();
    let point = matches!(cells[0].estimate, Estimate::Point(_));
    for c in cells {
        if seen.insert((c.location.as_str(), c.period.as_str(), c.age), ()).is_some() {
            return Err(Error::Schema(format!(
                "duplicate cell {}/{}/age {}",
                c.location, c.period, c.age
            )));
        }
        if matches!(c.estimate, Estimate::Point(_)) != point {
            return Err(Error::Schema("point and distributional estimates mixed".into()));
        }
        if let Estimate::Draws(d) = &c.estimate {
            if d.is_empty() {
                return Err(Error::Schema(format!("no draws for {}/{}", c.location, c.period)));
            }
            let n = *draws.entry((&c.location, &c.period)).or_insert(d.len());
            if n != d.len() {
                return Err(Error::Schema(format!(
                    "{}/{} mixes ensembles of {n} and {} draws",
                    c.location,
                    c.period,
                    d.len()
                )));
            }
        }
        if !c.truth.is_finite() {
            return Err(Error::Schema(format!("non-finite truth at {}/{}", c.location, c.period)));
        }
    }
    Ok(())
}

fn rate_factor(c: &ScoreCell) -> Result<f64> {
    match c.population {
        Some(p) if p > 0.0 => Ok(100.0 / p),
        _ => Err(Error::Schema(format!(
            "rates need a positive population at {}/{}/age {}",
            c.location, c.period, c.age
        ))),
    }
}

fn summarize(estimate: &Estimate, factor: f64) -> (f64, Option<Band>) {
    match estimate {
        Estimate::Point(v) => (v * factor, None),
        Estimate::Band(b) => {
            let b = Band {
                median: b.median * factor,
                lo80: b.lo80 * factor,
                hi80: b.hi80 * factor,
                lo95: b.lo95 * factor,
                hi95: b.hi95 * factor,
            };
            (b.median, Some(b))
        }
        Estimate::Draws(d) => {
            let mut v: Vec<f64> = d.iter().map(|x| x * factor).collect();
            let b = Band::from_values(&mut v);
            (b.median, Some(b))
        }
    }
}

fn to_scale(cells: &[ScoreCell], scale: Scale) -> Result<Vec<Scored>> {
    check_alignment(cells)?;
    match scale {
        Scale::Counts | Scale::Rates => cells
            .iter()
            .map(|c| {
                let factor = if scale == Scale::Rates { rate_factor(c)? } else { 1.0 };
                let (point, band) = summarize(&c.estimate, factor);
                Ok(Scored {
                    age: c.age,
                    truth: c.truth * factor,
                    point,
                    band,
                })
            })
            .collect(),
        Scale::Shares => shares(cells),
    }
}

fn shares(cells: &[ScoreCell]) -> Result<Vec<Scored>> {
    let mut groups: HashMap<(&str, &str), Vec<usize>> = HashMap::new();
    for (n, c) in cells.iter().enumerate() {
        groups.entry((&c.location, &c.period)).or_default().push(n);
    }
    let mixed = || Error::Schema("shares need one kind of estimate per location and period".into());
    let mut out: Vec<Option<Scored>> = (0..cells.len()).map(|_| None).collect();
    for ((loc, period), members) in groups {
        let truth_total: f64 = members.iter().map(|&n| cells[n].truth).sum();
        if truth_total == 0.0 {
            return Err(Error::Division(format!("zero observed total at {loc}/{period}")));
        }
        match &cells[members[0]].estimate {
            Estimate::Band(_) => {
                return Err(Error::Schema("shares need point or ensemble estimates, not bands".into()))
            }
            Estimate::Point(_) => {
                let total: f64 = members
                    .iter()
                    .map(|&n| match cells[n].estimate {
                        Estimate::Point(v) => v,
                        _ => 0.0,
                    })
                    .sum();
                for &n in &members {
                    let Estimate::Point(v) = cells[n].estimate else { return Err(mixed()) };
                    out[n] = Some(Scored {
                        age: cells[n].age,
                        truth: 100.0 * cells[n].truth / truth_total,
                        point: 100.0 * v / total,
                        band: None,
                    });
                }
            }
            Estimate::Draws(first) => {
                let mut totals = vec![0.0; first.len()];
                for &n in &members {
                    let Estimate::Draws(d) = &cells[n].estimate else { return Err(mixed()) };
                    totals.iter_mut().zip(d).for_each(|(t, x)| *t += x);
                }
                for &n in &members {
                    let Estimate::Draws(d) = &cells[n].estimate else { return Err(mixed()) };
                    let mut v: Vec<f64> = d.iter().zip(&totals).map(|(x, t)| 100.0 * x / t).collect();
                    let b = Band::from_values(&mut v);
                    out[n] = Some(Scored {
                        age: cells[n].age,
                        truth: 100.0 * cells[n].truth / truth_total,
                        point: b.median,
                        band: Some(b),
                    });
                }
            }
        }
    }
    Ok(out.into_iter().map(|s| s.expect("every cell grouped")).collect())
}

fn metrics(scored: &[&Scored]) -> Metrics {
    let n = scored.len();
    let nf = n as f64;
    let errs: Vec<f64> = scored.iter().map(|s| s.point - s.truth).collect();
    let mae = errs.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / nf).sqrt();
    let bias = errs.iter().sum::<f64>() / nf;
    let probabilistic = scored.iter().all(|s| s.band.is_some());
    let cov = |inside: fn(&Band, f64) -> bool| {
        probabilistic.then(|| {
            let hits = scored
                .iter()
                .filter(|s| inside(s.band.as_ref().expect("probabilistic"), s.truth))
                .count();
            100.0 * hits as f64 / nf
        })
    };
    Metrics {
        n,
        mae,
        rmse,
        bias,
        cov80: cov(Band::contains80),
        cov95: cov(Band::contains95),
    }
}

/// MAE, RMSE, bias (estimate minus truth) and interval coverage over all
/// cells. Distributions are scored at their median.
pub fn score_point(cells: &[ScoreCell], scale: Scale) -> Result<Metrics> {
    let scored = to_scale(cells, scale)?;
    let refs: Vec<&Scored> = scored.iter().collect();
    Ok(metrics(&refs))
}

/// Metrics for each age index, averaged over locations and periods.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeProfile {
    pub mae: Vec<f64>,
    pub bias: Vec<f64>,
    pub n: Vec<usize>,
}

pub fn by_age_profile(cells: &[ScoreCell], scale: Scale, n_ages: usize) -> Result<AgeProfile> {
    let scored = to_scale(cells, scale)?;
    let mut per_age: Vec<Vec<&Scored>> = vec![Vec::new(); n_ages];
    for s in &scored {
        per_age
            .get_mut(s.age)
            .ok_or_else(|| Error::Schema(format!("age index {} outside a grid of {n_ages}", s.age)))?
            .push(s);
    }
    let mut profile = AgeProfile {
        mae: Vec::with_capacity(n_ages),
        bias: Vec::with_capacity(n_ages),
        n: Vec::with_capacity(n_ages),
    };
    for cells in per_age {
        if cells.is_empty() {
            profile.mae.push(f64::NAN);
            profile.bias.push(f64::NAN);
            profile.n.push(0);
        } else {
            let m = metrics(&cells);
            profile.mae.push(m.mae);
            profile.bias.push(m.bias);
            profile.n.push(m.n);
        }
    }
    Ok(profile)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scale: Scale,
    pub method: String,
    pub metrics: Metrics,
    pub by_age: AgeProfile,
}

/// Metrics per method and scale, with age profiles.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub age_labels: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl ValidationReport {
    pub fn new(age_labels: Vec<String>) -> Self {
        ValidationReport {
            age_labels,
            rows: Vec::new(),
        }
    }

    pub fn add(&mut self, method: &str, scale: Scale, cells: &[ScoreCell]) -> Result<()> {
        let metrics = score_point(cells, scale)?;
        let by_age = by_age_profile(cells, scale, self.age_labels.len())?;
        self.rows.push(ReportRow {
            scale,
            method: method.to_string(),
            metrics,
            by_age,
        });
        Ok(())
    }

    pub fn get(&self, method: &str, scale: Scale) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.scale == scale)
            .map(|r| &r.metrics)
    }

    /// Checks `RMSE >= MAE >= 0`, coverage within `[0, 100]` and
    /// `cov95 >= cov80` on every row.
    pub fn check_invariants(&self) -> Result<()> {
        for r in &self.rows {
            let m = &r.metrics;
            let tol = 1e-9 * m.rmse.abs().max(1.0);
            let mut ok = m.mae >= 0.0 && m.rmse + tol >= m.mae;
            if let (Some(c80), Some(c95)) = (m.cov80, m.cov95) {
                ok &= (0.0..=100.0).contains(&c80) && (0.0..=100.0).contains(&c95) && c95 >= c80;
            }
            if !ok {
                return Err(Error::Consistency(format!(
                    "report row {}/{} violates metric ordering: {m:?}",
                    r.scale.as_str(),
                    r.method
                )));
            }
        }
        Ok(())
    }

    /// Aligned text table: Scale, Method, MAE, RMSE, Bias, cov80, cov95.
    pub fn to_table(&self) -> String {
        let cov = |c: Option<f64>| c.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into());
        let mut lines = vec![[
            "Scale".to_string(),
            "Method".to_string(),
            "MAE".to_string(),
            "RMSE".to_string(),
            "Bias".to_string(),
            "cov80".to_string(),
            "cov95".to_string(),
        ]];
        for r in &self.rows {
            let m = &r.metrics;
            let digits = if r.scale == Scale::Counts { 1 } else { 3 };
            lines.push([
                r.scale.as_str().to_string(),
                r.method.clone(),
                format!("{:.*}", digits, m.mae),
                format!("{:.*}", digits, m.rmse),
                format!("{:.*}", digits, m.bias),
                cov(m.cov80),
                cov(m.cov95),
            ]);
        }
        let widths: Vec<usize> = (0..7).map(|j| lines.iter().map(|l| l[j].len()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for l in &lines {
            let cols: Vec<String> = l
                .iter()
                .enumerate()
                .map(|(j, c)| if j < 2 { format!("{c:<w$}", w = widths[j]) } else { format!("{c:>w$}", w = widths[j]) })
                .collect();
            let _ = writeln!(s, "{}", cols.join("  ").trim_end());
        }
        s
    }

    /// `scale, method, mae, rmse, bias, cov80, cov95, n`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scale", "method", "mae", "rmse", "bias", "cov80", "cov95", "n"])?;
        let opt = |c: Option<f64>| c.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let m = &r.metrics;
            w.write_record([
                r.scale.as_str(),
                &r.method,
                &m.mae.to_string(),
                &m.rmse.to_string(),
                &m.bias.to_string(),
                &opt(m.cov80),
                &opt(m.cov95),
                &m.n.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<report writer>", e))?;
        Ok(())
    }

    /// `scale, method, age_group, mae, bias, n`.
    pub fn write_by_age_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scale", "method", "age_group", "mae", "bias", "n"])?;
        for r in &self.rows {
            for (x, label) in self.age_labels.iter().enumerate() {
                w.write_record([
                    r.scale.as_str(),
                    &r.method,
                    label,
                    &r.by_age.mae[x].to_string(),
                    &r.by_age.bias[x].to_string(),
                    &r.by_age.n[x].to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<report writer>", e))?;
        Ok(())
    }

    /// Writes `report.csv`, `report_by_age.csv` and `report.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map(std::io::BufWriter::new).map_err(|e| Error::io(&p, e))
        };
        self.write_csv(create("report.csv")?)?;
        self.write_by_age_csv(create("report_by_age.csv")?)?;
        let p = dir.join("report.txt");
        std::fs::write(&p, self.to_table()).map_err(|e| Error::io(&p, e))
    }
}

/// Cells of `panel` with estimates from `estimate(location, period)`,
/// which returns one estimate per age group.
pub fn panel_cells<F>(panel: &MigrationPanel, mut estimate: F) -> Result<Vec<ScoreCell>>
where
    F: FnMut(usize, usize) -> Result<Vec<Estimate>>,
{
    let k = panel.n_ages();
    let mut cells = Vec::with_capacity(panel.locations().len() * panel.periods().len() * k);
    for (i, loc) in panel.locations().iter().enumerate() {
        for (t, period) in panel.periods().iter().enumerate() {
            let est = estimate(i, t)?;
            if est.len() != k {
                return Err(Error::Schema(format!(
                    "{} estimates for {k} age groups at {loc}/{period}",
                    est.len()
                )));
            }
            for (x, e) in est.into_iter().enumerate() {
                cells.push(ScoreCell {
                    location: loc.clone(),
                    period: period.clone(),
                    age: x,
                    truth: panel.net(i, t)[x],
                    estimate: e,
                    population: Some(panel.population(i, t)[x]),
                });
            }
        }
    }
    Ok(cells)
}

/// In-sample basic Rogers-Castro: each observed total spread by the
/// normalized schedule.
pub fn basic_rc_cells(panel: &MigrationPanel, theta: &RcParams) -> Result<Vec<ScoreCell>> {
    let mut shares = rc_schedule(theta, panel.grid())?;
    normalize_in_place(&mut shares)?;
    panel_cells(panel, |i, t| {
        let g = panel.total(i, t);
        Ok(shares.iter().map(|r| Estimate::Point(g * r)).collect())
    })
}

/// In-sample deterministic FDM with the stored flow totals and the
/// time-averaged ratios of each location.
pub fn det_fdm_cells(
    panel: &MigrationPanel,
    decomp: &FlowDecomposition,
    ratios: &[RatioProfile],
    theta_m: &RcParams,
) -> Result<Vec<ScoreCell>> {
    panel_cells(panel, |i, t| {
        let loc = &panel.locations()[i];
        let period = &panel.periods()[t];
        let split = decomp.require(loc, period)?;
        let profile = ratios
            .iter()
            .find(|r| &r.location == loc)
            .ok_or_else(|| Error::UnknownLocation(loc.clone()))?;
        let g = det_fdm_net(split.inflow, split.outflow, theta_m, panel.grid(), &profile.ratios)
            .map_err(|e| e.with_context(format!("{loc}/{period}")))?;
        Ok(g.into_iter().map(Estimate::Point).collect())
    })
}

/// In-sample Bayesian FDM from the posterior predictive `net` bands.
pub fn bayes_fdm_cells(panel: &MigrationPanel, summaries: &[PosteriorSummary]) -> Result<Vec<ScoreCell>> {
    panel_cells(panel, |i, t| {
        let loc = &panel.locations()[i];
        let period = &panel.periods()[t];
        let summary = summaries
            .iter()
            .find(|s| &s.location == loc)
            .ok_or_else(|| Error::MissingArtifact {
                path: format!("posterior summary for `{loc}`").into(),
                producer: "fit-bayes",
            })?;
        let bands = summary.get("net", Some(period)).ok_or_else(|| {
            Error::Schema(format!("posterior summary of `{loc}` has no period `{period}`"))
        })?;
        Ok(bands.bands.iter().map(|b| Estimate::Band(*b)).collect())
    })
}
