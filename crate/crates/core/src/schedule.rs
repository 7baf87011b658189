//! Rogers-Castro multiexponential migration schedules.
//!
//! The full curve has four additive components:
//!
//! ```text
//! r(x) = a1 exp(-alpha1 x)
//!      + a2 exp(-alpha2 (x - mu2) - exp(-lambda2 (x - mu2)))
//!      + a3 exp(-alpha3 (x - mu3) - exp(-lambda3 (x - mu3)))
//!      + c
//! ```
//!
//! A component is absent when all of its parameters are zero. Grouped age
//! data are evaluated at the representative age of each group (the interval
//! midpoint; open groups use lower bound + 2.5).

use std::fmt;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Number of Rogers-Castro parameters.
pub const N_PARAMS: usize = 11;

/// Canonical parameter names, in vector order.
pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "a1", "alpha1", "a2", "alpha2", "mu2", "lambda2", "a3", "alpha3", "mu3", "lambda3", "c",
];

/// Index of each parameter in [`RcParams::to_array`] order.
pub mod idx {
    pub const A1: usize = 0;
    pub const ALPHA1: usize = 1;
    pub const A2: usize = 2;
    pub const ALPHA2: usize = 3;
    pub const MU2: usize = 4;
    pub const LAMBDA2: usize = 5;
    pub const A3: usize = 6;
    pub const ALPHA3: usize = 7;
    pub const MU3: usize = 8;
    pub const LAMBDA3: usize = 9;
    pub const C: usize = 10;

    /// Parameters of the retirement component.
    pub const RETIREMENT: [usize; 4] = [A3, ALPHA3, MU3, LAMBDA3];
    /// Level parameters; the normalized schedule is invariant to scaling these jointly.
    pub const LEVELS: [usize; 4] = [A1, A2, A3, C];
}

/// The 11-parameter Rogers-Castro vector.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RcParams {
    pub a1: f64,
    pub alpha1: f64,
    pub a2: f64,
    pub alpha2: f64,
    pub mu2: f64,
    pub lambda2: f64,
    pub a3: f64,
    pub alpha3: f64,
    pub mu3: f64,
    pub lambda3: f64,
    pub c: f64,
}

impl RcParams {
    pub fn from_array(v: [f64; N_PARAMS]) -> Self {
        RcParams {
            a1: v[0],
            alpha1: v[1],
            a2: v[2],
            alpha2: v[3],
            mu2: v[4],
            lambda2: v[5],
            a3: v[6],
            alpha3: v[7],
            mu3: v[8],
            lambda3: v[9],
            c: v[10],
        }
    }

    pub fn to_array(&self) -> [f64; N_PARAMS] {
        [
            self.a1,
            self.alpha1,
            self.a2,
            self.alpha2,
            self.mu2,
            self.lambda2,
            self.a3,
            self.alpha3,
            self.mu3,
            self.lambda3,
            self.c,
        ]
    }

    /// Checks that every parameter is finite and nonnegative.
    pub fn validate(&self) -> Result<()> {
        for (name, value) in PARAM_NAMES.iter().zip(self.to_array()) {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "Rogers-Castro parameter {name} = {value} must be finite and >= 0"
                )));
            }
        }
        Ok(())
    }

    pub fn has_child(&self) -> bool {
        self.a1 != 0.0 || self.alpha1 != 0.0
    }

    pub fn has_labor(&self) -> bool {
        self.a2 != 0.0 || self.alpha2 != 0.0 || self.mu2 != 0.0 || self.lambda2 != 0.0
    }

    pub fn has_retirement(&self) -> bool {
        self.a3 != 0.0 || self.alpha3 != 0.0 || self.mu3 != 0.0 || self.lambda3 != 0.0
    }

    pub fn has_constant(&self) -> bool {
        self.c != 0.0
    }

    /// Curve value at `age` without validation. Absent components contribute 0.
    #[inline]
    pub fn eval(&self, age: f64) -> f64 {
        let mut r = self.c;
        if self.a1 != 0.0 {
            r += self.a1 * (-self.alpha1 * age).exp();
        }
        if self.a2 != 0.0 {
            let u = age - self.mu2;
            r += self.a2 * (-self.alpha2 * u - (-self.lambda2 * u).exp()).exp();
        }
        if self.a3 != 0.0 {
            let u = age - self.mu3;
            r += self.a3 * (-self.alpha3 * u - (-self.lambda3 * u).exp()).exp();
        }
        r
    }

    /// Serializes to the flat `name = value` text format.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (name, value) in PARAM_NAMES.iter().zip(self.to_array()) {
            let _ = writeln!(out, "{name} = {value}");
        }
        out
    }

    /// Parses the flat `name = value` format. Blank lines and `#` comments are
    /// ignored; parameters that are not listed default to 0.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut values = [0.0; N_PARAMS];
        let mut seen = [false; N_PARAMS];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let line_no = lineno as u64 + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("expected `name = value`, got `{line}`"),
            })?;
            let key = key.trim();
            let pos = PARAM_NAMES
                .iter()
                .position(|n| *n == key)
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unknown Rogers-Castro parameter `{key}`"),
                })?;
            if seen[pos] {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("duplicate parameter `{key}`"),
                });
            }
            seen[pos] = true;
            values[pos] = value.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: line_no,
                message: format!("bad value for `{key}`: {e}"),
            })?;
        }
        let theta = RcParams::from_array(values);
        theta.validate()?;
        Ok(theta)
    }
}

impl fmt::Display for RcParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_kv_string())
    }
}

/// One age group: `[lower, lower + width)` or open-ended when `width` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGroup {
    pub label: String,
    pub lower: f64,
    pub width: Option<f64>,
}

impl AgeGroup {
    /// Parses `"0-4"` (inclusive upper bound) or `"95+"`.
    pub fn parse(label: &str) -> Result<Self> {
        let s = label.trim();
        let bad = |why: &str| Error::Schema(format!("bad age group label `{label}`: {why}"));
        if let Some(lower) = s.strip_suffix('+') {
            let lower: u32 = lower.trim().parse().map_err(|_| bad("lower bound"))?;
            return Ok(AgeGroup {
                label: s.to_string(),
                lower: lower as f64,
                width: None,
            });
        }
        let (lo, hi) = s.split_once('-').ok_or_else(|| bad("expected `lo-hi` or `lo+`"))?;
        let lo: u32 = lo.trim().parse().map_err(|_| bad("lower bound"))?;
        let hi: u32 = hi.trim().parse().map_err(|_| bad("upper bound"))?;
        if hi < lo {
            return Err(bad("upper bound below lower bound"));
        }
        Ok(AgeGroup {
            label: s.to_string(),
            lower: lo as f64,
            width: Some((hi - lo + 1) as f64),
        })
    }

    pub fn is_open(&self) -> bool {
        self.width.is_none()
    }

    /// Abscissa used for curve evaluation.
    pub fn representative_age(&self) -> f64 {
        match self.width {
            Some(w) => self.lower + 0.5 * w,
            None => self.lower + 2.5,
        }
    }
}

/// Ordered, contiguous age groups ending in exactly one open group.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    groups: Vec<AgeGroup>,
}

impl AgeGrid {
    pub fn new(groups: Vec<AgeGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::Schema("age grid is empty".into()));
        }
        for (k, g) in groups.iter().enumerate() {
            let last = k + 1 == groups.len();
            if g.is_open() != last {
                return Err(Error::Schema(format!(
                    "age group `{}`: exactly the terminal group must be open-ended",
                    g.label
                )));
            }
            if let (Some(w), Some(next)) = (g.width, groups.get(k + 1)) {
                if next.lower != g.lower + w {
                    return Err(Error::Schema(format!(
                        "age groups `{}` and `{}` are not contiguous",
                        g.label, next.label
                    )));
                }
            }
        }
        Ok(AgeGrid { groups })
    }

    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let groups = labels
            .iter()
            .map(|l| AgeGroup::parse(l.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        AgeGrid::new(groups)
    }

    /// Five-year groups `0-4, 5-9, ...` closed by `terminal_lower+`.
    pub fn five_year(terminal_lower: u32) -> Self {
        assert!(
            terminal_lower % 5 == 0 && terminal_lower > 0,
            "terminal lower bound must be a positive multiple of 5"
        );
        let mut groups: Vec<AgeGroup> = (0..terminal_lower)
            .step_by(5)
            .map(|lo| AgeGroup {
                label: format!("{}-{}", lo, lo + 4),
                lower: lo as f64,
                width: Some(5.0),
            })
            .collect();
        groups.push(AgeGroup {
            label: format!("{terminal_lower}+"),
            lower: terminal_lower as f64,
            width: None,
        });
        AgeGrid { groups }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn groups(&self) -> &[AgeGroup] {
        &self.groups
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|g| g.label.as_str())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.label == label)
    }

    pub fn representative_ages(&self) -> Vec<f64> {
        self.groups.iter().map(AgeGroup::representative_age).collect()
    }

    pub fn terminal(&self) -> &AgeGroup {
        self.groups.last().expect("grid is non-empty")
    }
}

/// Per-age multiplicative factors applied to a schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationVector(Vec<f64>);

impl PerturbationVector {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        if let Some((k, f)) = factors
            .iter()
            .enumerate()
            .find(|(_, f)| !(f.is_finite() && **f > 0.0))
        {
            return Err(Error::InvalidParameter(format!(
                "perturbation factor {k} = {f} must be finite and > 0"
            )));
        }
        Ok(PerturbationVector(factors))
    }

    pub fn ones(k: usize) -> Self {
        PerturbationVector(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-age population counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationVector(Vec<f64>);

impl PopulationVector {
    pub fn new(counts: Vec<f64>) -> Result<Self> {
        if counts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidParameter(
                "population counts must be finite and >= 0".into(),
            ));
        }
        if !counts.iter().any(|p| *p > 0.0) {
            return Err(Error::InvalidParameter(
                "population vector has no positive entry".into(),
            ));
        }
        Ok(PopulationVector(counts))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Validated curve evaluation.
pub fn rc_curve(theta: &RcParams, age: f64) -> Result<f64> {
    theta.validate()?;
    if !(age.is_finite() && age >= 0.0) {
        return Err(Error::InvalidParameter(format!("age {age} must be >= 0")));
    }
    Ok(theta.eval(age))
}

/// Curve evaluated at each group's representative age.
pub fn rc_schedule(theta: &RcParams, grid: &AgeGrid) -> Result<Vec<f64>> {
    theta.validate()?;
    Ok(grid
        .groups()
        .iter()
        .map(|g| theta.eval(g.representative_age()))
        .collect())
}

/// Scales `weights` in place to sum to one.
pub(crate) fn normalize_in_place(weights: &mut [f64]) -> Result<()> {
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateSchedule(format!(
            "normalizing constant is {total}"
        )));
    }
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(())
}

/// Population-weighted, perturbed schedule normalized to a probability
/// vector: `r_x f_x P_x / sum_y r_y f_y P_y`.
pub fn normalized_schedule(
    theta: &RcParams,
    grid: &AgeGrid,
    factors: &PerturbationVector,
    population: &PopulationVector,
) -> Result<Vec<f64>> {
    let k = grid.len();
    if factors.len() != k || population.len() != k {
        return Err(Error::Schema(format!(
            "grid has {k} groups but factors/population have {}/{}",
            factors.len(),
            population.len()
        )));
    }
    let mut out: Vec<f64> = rc_schedule(theta, grid)?
        .into_iter()
        .zip(factors.as_slice())
        .zip(population.as_slice())
        .map(|((r, f), p)| r * f * p)
        .collect();
    normalize_in_place(&mut out)?;
    Ok(out)
}
