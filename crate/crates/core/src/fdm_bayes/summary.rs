//! Pointwise posterior bands per age.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::schedule::AgeGrid;
use crate::stats::Band;

use super::likelihood::{expected_flows, LocationData, Side, VARIANCE_FLOOR};
use super::PosteriorSample;

pub const MIN_SUMMARY_DRAWS: usize = 100;

/// Bands for one quantity, indexed by age group.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeBands {
    /// `r_in`, `r_out`, `rstar_in`, `rstar_out`, `in`, `out` or `net`.
    pub quantity: &'static str,
    /// `None` for period-free quantities (the raw curves).
    pub period: Option<String>,
    pub bands: Vec<Band>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub location: String,
    pub n_draws: usize,
    pub series: Vec<AgeBands>,
}

pub const SUMMARY_HEADER: [&str; 9] = [
    "location", "quantity", "period", "age_group", "median", "lo80", "hi80", "lo95", "hi95",
];

impl PosteriorSummary {
    pub fn get(&self, quantity: &str, period: Option<&str>) -> Option<&AgeBands> {
        self.series
            .iter()
            .find(|s| s.quantity == quantity && s.period.as_deref() == period)
    }

    pub fn write_csv<W: Write>(&self, grid: &AgeGrid, writer: W, header: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        if header {
            w.write_record(SUMMARY_HEADER)?;
        }
        for s in &self.series {
            for (g, b) in grid.groups().iter().zip(&s.bands) {
                w.write_record([
                    self.location.as_str(),
                    s.quantity,
                    s.period.as_deref().unwrap_or(""),
                    g.label.as_str(),
                    &b.median.to_string(),
                    &b.lo80.to_string(),
                    &b.hi80.to_string(),
                    &b.lo95.to_string(),
                    &b.hi95.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<summary>", e))?;
        Ok(())
    }

    pub fn save(summaries: &[PosteriorSummary], grid: &AgeGrid, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for (k, s) in summaries.iter().enumerate() {
            s.write_csv(grid, &mut out, k == 0)?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

fn bands(mut columns: Vec<Vec<f64>>) -> Vec<Band> {
    columns.iter_mut().map(|c| Band::from_values(c)).collect()
}

/// Median and 80/95% bands per age of the raw curves, the normalized
/// schedules, expected flows and the posterior predictive net migration
/// (including observation noise). `seed` drives the predictive noise.
pub fn posterior_summaries(
    samples: &[PosteriorSample],
    data: &LocationData,
    seed: u64,
) -> Result<PosteriorSummary> {
    if samples.len() < MIN_SUMMARY_DRAWS {
        return Err(Error::InsufficientSample {
            needed: MIN_SUMMARY_DRAWS,
            got: samples.len(),
        });
    }
    data.validate()?;
    let k = data.n_ages();
    let n_t = data.periods.len();
    let n = samples.len();
    let col = || vec![Vec::with_capacity(n); k];
    let mut r_in = col();
    let mut r_out = col();
    let mut per_period: Vec<[Vec<Vec<f64>>; 5]> =
        (0..n_t).map(|_| [col(), col(), col(), col(), col()]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rates = vec![0.0; k];
    let mut inflows = vec![0.0; data.n_cells()];
    let mut outflows = vec![0.0; data.n_cells()];
    for s in samples {
        for (x, age) in data.ages.iter().enumerate() {
            r_in[x].push(s.theta_in.eval(*age));
            r_out[x].push(s.theta_out.eval(*age));
        }
        let ok = expected_flows(&s.theta_in, data, Side::In, &mut rates, &mut inflows)
            && expected_flows(&s.theta_out, data, Side::Out, &mut rates, &mut outflows);
        if !ok {
            return Err(Error::DegenerateSchedule(format!(
                "draw {} of chain {} has a zero-weight schedule",
                s.iter, s.chain
            )));
        }
        for (t, p) in data.periods.iter().enumerate() {
            let [rs_in, rs_out, iota, out, net] = &mut per_period[t];
            for x in 0..k {
                let i = inflows[t * k + x];
                let o = outflows[t * k + x];
                rs_in[x].push(if p.inflow > 0.0 { i / p.inflow } else { 0.0 });
                rs_out[x].push(if p.outflow > 0.0 { o / p.outflow } else { 0.0 });
                iota[x].push(i);
                out[x].push(o);
                let z: f64 = rng.sample(StandardNormal);
                let sd = ((i + o) / s.v).max(VARIANCE_FLOOR).sqrt();
                net[x].push(i - o + sd * z);
            }
        }
    }
    let mut series = vec![
        AgeBands {
            quantity: "r_in",
            period: None,
            bands: bands(r_in),
        },
        AgeBands {
            quantity: "r_out",
            period: None,
            bands: bands(r_out),
        },
    ];
    for (p, cols) in data.periods.iter().zip(per_period) {
        for (name, c) in ["rstar_in", "rstar_out", "in", "out", "net"].into_iter().zip(cols) {
            series.push(AgeBands {
                quantity: name,
                period: Some(p.period.clone()),
                bands: bands(c),
            });
        }
    }
    Ok(PosteriorSummary {
        location: data.location.clone(),
        n_draws: n,
        series,
    })
}
