//! Truncated-normal priors on the Rogers-Castro parameters and the
//! retirement-component configuration.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::{idx, N_PARAMS};
use crate::stats::{normal_mass, std_normal_cdf, std_normal_quantile};

use super::{N_STATE, OUT_OFFSET, V_INDEX};

/// Lower truncation bound, possibly another parameter of the same schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LowerBound {
    Fixed(f64),
    /// Bounded below by the current value of the parameter at this index.
    Param(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamPrior {
    pub mean: f64,
    pub sd: f64,
    pub lo: LowerBound,
    pub hi: f64,
}

impl ParamPrior {
    const fn fixed(mean: f64, sd: f64, lo: f64, hi: f64) -> Self {
        ParamPrior {
            mean,
            sd,
            lo: LowerBound::Fixed(lo),
            hi,
        }
    }

    pub fn lower(&self, theta: &[f64]) -> f64 {
        match self.lo {
            LowerBound::Fixed(v) => v,
            LowerBound::Param(j) => theta[j],
        }
    }

    /// Log density up to the `-ln sqrt(2 pi)` constant, `-inf` off support.
    fn log_density(&self, value: f64, theta: &[f64]) -> f64 {
        let lo = self.lower(theta);
        if !(value >= lo && value <= self.hi) || lo >= self.hi {
            return f64::NEG_INFINITY;
        }
        let z = (value - self.mean) / self.sd;
        let mass = normal_mass((lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd);
        -0.5 * z * z - self.sd.ln() - mass.ln()
    }

    fn median(&self, theta: &[f64]) -> f64 {
        let lo = self.lower(theta);
        let a = std_normal_cdf((lo - self.mean) / self.sd);
        let b = std_normal_cdf((self.hi - self.mean) / self.sd);
        (self.mean + self.sd * std_normal_quantile(0.5 * (a + b))).clamp(lo, self.hi)
    }
}

/// Where the retirement component is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetirementMode {
    InOnly,
    OutOnly,
    Neither,
}

impl RetirementMode {
    pub fn includes_in(&self) -> bool {
        matches!(self, RetirementMode::InOnly)
    }

    pub fn includes_out(&self) -> bool {
        matches!(self, RetirementMode::OutOnly)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RetirementMode::InOnly => "in-only",
            RetirementMode::OutOnly => "out-only",
            RetirementMode::Neither => "neither",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in-only" | "in" => Ok(RetirementMode::InOnly),
            "out-only" | "out" => Ok(RetirementMode::OutOnly),
            "neither" | "none" => Ok(RetirementMode::Neither),
            other => Err(Error::Config(format!("unknown retirement mode `{other}`"))),
        }
    }
}

/// Prior on `(Theta_in, Theta_out, v)`. The same Rogers-Castro priors apply
/// to both schedules; `v` is uniform on `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub location: Option<String>,
    pub params: [ParamPrior; N_PARAMS],
    pub mode: RetirementMode,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            location: None,
            params: [
                ParamPrior::fixed(0.0, 0.3, 0.0, 1.0),  // a1
                ParamPrior::fixed(0.0, 1.0, 0.0, 1.0),  // alpha1
                ParamPrior {
                    mean: 0.0,
                    sd: 0.3,
                    lo: LowerBound::Param(idx::A1),
                    hi: 1.0,
                }, // a2
                ParamPrior::fixed(0.0, 1.0, 0.0, 1.0),   // alpha2
                ParamPrior::fixed(25.0, 2.0, 0.0, 55.0), // mu2
                ParamPrior {
                    mean: 0.0,
                    sd: 1.0,
                    lo: LowerBound::Param(idx::ALPHA2),
                    hi: 2.0,
                }, // lambda2
                ParamPrior::fixed(0.0, 0.3, 0.0, 1.0),    // a3
                ParamPrior::fixed(0.0, 1.0, 0.0, 1.0),    // alpha3
                ParamPrior::fixed(63.0, 2.0, 55.0, 70.0), // mu3
                ParamPrior::fixed(0.0, 1.0, 0.0, 2.0),    // lambda3
                ParamPrior::fixed(0.0, 0.005, 0.0, 0.01), // c
            ],
            mode: RetirementMode::InOnly,
        }
    }
}

/// Prior for one location with the given retirement placement.
pub fn configure_retirement(location: &str, mode: RetirementMode) -> PriorSpec {
    PriorSpec {
        location: Some(location.to_string()),
        mode,
        ..PriorSpec::default()
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<()> {
        for (j, p) in self.params.iter().enumerate() {
            let ok = p.sd > 0.0
                && p.sd.is_finite()
                && match p.lo {
                    LowerBound::Fixed(lo) => lo < p.hi,
                    LowerBound::Param(k) => k < j,
                };
            if !ok {
                return Err(Error::Config(format!("invalid prior for parameter {j}")));
            }
        }
        Ok(())
    }

    /// Whether state entry `j` (0..23) is sampled rather than pinned to 0.
    pub fn is_free(&self, j: usize) -> bool {
        match j {
            V_INDEX => true,
            j if j < OUT_OFFSET => self.mode.includes_in() || !idx::RETIREMENT.contains(&j),
            j => {
                self.mode.includes_out() || !idx::RETIREMENT.contains(&(j - OUT_OFFSET))
            }
        }
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..N_STATE).filter(|j| self.is_free(*j)).collect()
    }

    pub fn n_sampled(&self) -> usize {
        self.free_indices().len()
    }

    fn schedule_log_density(&self, theta: &[f64], offset: usize) -> f64 {
        let mut lp = 0.0;
        for (j, prior) in self.params.iter().enumerate() {
            if self.is_free(offset + j) {
                lp += prior.log_density(theta[j], theta);
            } else if theta[j] != 0.0 {
                return f64::NEG_INFINITY;
            }
            if lp == f64::NEG_INFINITY {
                return lp;
            }
        }
        lp
    }

    /// Log prior density of a full state vector, `-inf` outside the support.
    pub fn log_density(&self, state: &[f64; N_STATE]) -> f64 {
        let v = state[V_INDEX];
        if !(v > 0.0 && v < 1.0) {
            return f64::NEG_INFINITY;
        }
        let lp_in = self.schedule_log_density(&state[..OUT_OFFSET], 0);
        if lp_in == f64::NEG_INFINITY {
            return lp_in;
        }
        lp_in + self.schedule_log_density(&state[OUT_OFFSET..V_INDEX], OUT_OFFSET)
    }

    /// State with every free parameter at its (conditional) prior median.
    pub fn median_state(&self) -> [f64; N_STATE] {
        let mut state = [0.0; N_STATE];
        for offset in [0, OUT_OFFSET] {
            for j in 0..N_PARAMS {
                if self.is_free(offset + j) {
                    let median = self.params[j].median(&state[offset..offset + N_PARAMS]);
                    state[offset + j] = median;
                }
            }
        }
        state[V_INDEX] = 0.5;
        state
    }

    /// Independent draw from the prior, sampling parameters in index order
    /// so that dynamic bounds see their already drawn lower limits.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> [f64; N_STATE] {
        let mut state = [0.0; N_STATE];
        for offset in [0, OUT_OFFSET] {
            for j in 0..N_PARAMS {
                if !self.is_free(offset + j) {
                    continue;
                }
                let p = &self.params[j];
                let lo = p.lower(&state[offset..offset + N_PARAMS]);
                let a = std_normal_cdf((lo - p.mean) / p.sd);
                let b = std_normal_cdf((p.hi - p.mean) / p.sd);
                let u: f64 = rng.random();
                let x = p.mean + p.sd * std_normal_quantile(a + u * (b - a));
                state[offset + j] = x.clamp(lo, p.hi);
            }
        }
        let u: f64 = rng.random();
        state[V_INDEX] = u.max(f64::MIN_POSITIVE);
        state
    }

    /// Marginal mean and variance of parameter `j` for priors with fixed bounds.
    pub fn fixed_bound_moments(&self, j: usize) -> Option<(f64, f64)> {
        let p = &self.params[j];
        match p.lo {
            LowerBound::Fixed(lo) => Some(crate::stats::truncated_normal_moments(
                p.mean, p.sd, lo, p.hi,
            )),
            LowerBound::Param(_) => None,
        }
    }
}

/// Retirement placement per location.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetirementTable {
    entries: Vec<(String, RetirementMode)>,
}

pub const RETIREMENT_HEADER: [&str; 3] = ["location", "retirement_in", "retirement_out"];

fn parse_flag(s: &str, line: u64) -> Result<bool> {
    match s.to_ascii_lowercase().as_str() {
        "1" | "yes" | "true" | "x" => Ok(true),
        "0" | "no" | "false" | "" => Ok(false),
        other => Err(Error::Parse {
            line,
            message: format!("expected a 0/1 flag, got `{other}`"),
        }),
    }
}

impl RetirementTable {
    pub fn insert(&mut self, location: &str, mode: RetirementMode) {
        self.entries.push((location.to_string(), mode));
    }

    pub fn mode(&self, location: &str) -> Option<RetirementMode> {
        self.entries
            .iter()
            .find(|(l, _)| l == location)
            .map(|(_, m)| *m)
    }

    /// Prior for `location`; locations absent from the table use `fallback`.
    pub fn prior_for(&self, location: &str, fallback: RetirementMode) -> PriorSpec {
        configure_retirement(location, self.mode(location).unwrap_or(fallback))
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if headers != RETIREMENT_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", RETIREMENT_HEADER.join(",")),
            });
        }
        let mut table = RetirementTable::default();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let mode = match (parse_flag(&rec[1], line)?, parse_flag(&rec[2], line)?) {
                (true, false) => RetirementMode::InOnly,
                (false, true) => RetirementMode::OutOnly,
                (false, false) => RetirementMode::Neither,
                (true, true) => {
                    return Err(Error::Config(format!(
                        "line {line}: location `{}` includes retirement in both schedules, \
                         which is not identifiable",
                        &rec[0]
                    )))
                }
            };
            table.insert(&rec[0], mode);
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_published_priors() {
        let p = PriorSpec::default();
        p.validate().unwrap();
        let expect = [
            (0.0, 0.3, 1.0),
            (0.0, 1.0, 1.0),
            (0.0, 0.3, 1.0),
            (0.0, 1.0, 1.0),
            (25.0, 2.0, 55.0),
            (0.0, 1.0, 2.0),
            (0.0, 0.3, 1.0),
            (0.0, 1.0, 1.0),
            (63.0, 2.0, 70.0),
            (0.0, 1.0, 2.0),
            (0.0, 0.005, 0.01),
        ];
        for (prior, (m, s, hi)) in p.params.iter().zip(expect) {
            assert_eq!((prior.mean, prior.sd, prior.hi), (m, s, hi));
        }
        assert_eq!(p.params[idx::A2].lo, LowerBound::Param(idx::A1));
        assert_eq!(p.params[idx::LAMBDA2].lo, LowerBound::Param(idx::ALPHA2));
        assert_eq!(p.params[idx::MU3].lo, LowerBound::Fixed(55.0));
    }

    #[test]
    fn parameter_counts_by_mode() {
        assert_eq!(configure_retirement("x", RetirementMode::InOnly).n_sampled(), 19);
        assert_eq!(configure_retirement("x", RetirementMode::OutOnly).n_sampled(), 19);
        assert_eq!(configure_retirement("x", RetirementMode::Neither).n_sampled(), 15);
        let p = configure_retirement("x", RetirementMode::InOnly);
        assert!(p.is_free(idx::MU3));
        assert!(!p.is_free(OUT_OFFSET + idx::MU3));
    }

    #[test]
    fn dynamic_bounds_enforced() {
        let p = PriorSpec::default();
        let mut s = p.median_state();
        assert!(p.log_density(&s).is_finite());
        assert!(s[idx::A2] >= s[idx::A1]);
        assert!(s[idx::LAMBDA2] >= s[idx::ALPHA2]);
        s[idx::A2] = s[idx::A1] - 1e-6;
        assert_eq!(p.log_density(&s), f64::NEG_INFINITY);
        let mut s = p.median_state();
        s[OUT_OFFSET + idx::LAMBDA2] = s[OUT_OFFSET + idx::ALPHA2] * 0.5;
        assert_eq!(p.log_density(&s), f64::NEG_INFINITY);
        let mut s = p.median_state();
        s[OUT_OFFSET + idx::A3] = 0.1;
        assert_eq!(p.log_density(&s), f64::NEG_INFINITY, "pinned parameter moved");
        let mut s = p.median_state();
        s[V_INDEX] = 1.0;
        assert_eq!(p.log_density(&s), f64::NEG_INFINITY);
    }

    #[test]
    fn conditional_normalization() {
        // Density of a2 given a1 integrates to one over [a1, 1].
        let p = PriorSpec::default();
        let mut theta = [0.0; N_PARAMS];
        theta[idx::A1] = 0.4;
        let steps = 100_000;
        let h = 0.6 / steps as f64;
        let total: f64 = (0..steps)
            .map(|k| {
                let a2 = 0.4 + (k as f64 + 0.5) * h;
                let lp = p.params[idx::A2].log_density(a2, &theta);
                (lp - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp() * h
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }

    #[test]
    fn retirement_table_csv() {
        let text = "location,retirement_in,retirement_out\nStevens,1,0\nAdams,0,1\nKing,0,0\n";
        let t = RetirementTable::read_csv(text.as_bytes()).unwrap();
        assert_eq!(t.mode("Stevens"), Some(RetirementMode::InOnly));
        assert_eq!(t.mode("Adams"), Some(RetirementMode::OutOnly));
        assert_eq!(t.mode("King"), Some(RetirementMode::Neither));
        assert_eq!(
            t.prior_for("Other", RetirementMode::InOnly).mode,
            RetirementMode::InOnly
        );
        let both = "location,retirement_in,retirement_out\nX,1,1\n";
        assert!(matches!(
            RetirementTable::read_csv(both.as_bytes()),
            Err(Error::Config(_))
        ));
    }
}
