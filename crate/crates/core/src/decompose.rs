//! Splitting total net migration into in- and out-migration totals.
//!
//! Two routes are provided: a fixed crude-rate heuristic and a
//! random-intercept linear model of the in-migration rate fitted to observed
//! (in-rate, net-rate) pairs.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Default 10-year crude migration multiplier for the heuristic split.
pub const DEFAULT_DECADAL_MULTIPLIER: f64 = 0.7;
/// Annualized counterpart of [`DEFAULT_DECADAL_MULTIPLIER`].
pub const DEFAULT_ANNUAL_MULTIPLIER: f64 = 0.07;
/// Default floor on the annual in-migration rate.
pub const DEFAULT_IMR_MIN: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitMethod {
    Heuristic,
    MixedEffects,
}

impl SplitMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitMethod::Heuristic => "heuristic",
            SplitMethod::MixedEffects => "mixed-effects",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(SplitMethod::Heuristic),
            "mixed-effects" => Ok(SplitMethod::MixedEffects),
            other => Err(Error::Config(format!("unknown split method `{other}`"))),
        }
    }
}

/// Net, in- and out-migration totals for one location and period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowSplit {
    pub net: f64,
    pub inflow: f64,
    pub outflow: f64,
    pub method: SplitMethod,
}

/// Decomposition of every (location, period) total of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDecomposition {
    entries: Vec<(String, String, FlowSplit)>,
}

pub const DECOMPOSITION_HEADER: [&str; 6] = [
    "location",
    "period",
    "net_total",
    "in_total",
    "out_total",
    "method",
];

impl FlowDecomposition {
    pub fn new() -> Self {
        FlowDecomposition {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, location: &str, period: &str, split: FlowSplit) {
        self.entries
            .push((location.to_string(), period.to_string(), split));
    }

    pub fn get(&self, location: &str, period: &str) -> Option<&FlowSplit> {
        self.entries
            .iter()
            .find(|(l, p, _)| l == location && p == period)
            .map(|(_, _, s)| s)
    }

    /// Like [`get`](Self::get) but failing with a lookup error.
    pub fn require(&self, location: &str, period: &str) -> Result<&FlowSplit> {
        self.get(location, period).ok_or_else(|| {
            Error::Schema(format!(
                "decomposition has no entry for location `{location}` period `{period}`"
            ))
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &FlowSplit)> {
        self.entries
            .iter()
            .map(|(l, p, s)| (l.as_str(), p.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(DECOMPOSITION_HEADER)?;
        for (l, p, s) in &self.entries {
            w.write_record([
                l.as_str(),
                p.as_str(),
                &s.net.to_string(),
                &s.inflow.to_string(),
                &s.outflow.to_string(),
                s.method.as_str(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<decomposition writer>", e))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if headers != DECOMPOSITION_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", DECOMPOSITION_HEADER.join(",")),
            });
        }
        let mut out = FlowDecomposition::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad number `{}`", &rec[k]),
                })
            };
            out.push(
                &rec[0],
                &rec[1],
                FlowSplit {
                    net: num(2)?,
                    inflow: num(3)?,
                    outflow: num(4)?,
                    method: SplitMethod::parse(&rec[5])?,
                },
            );
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

impl Default for FlowDecomposition {
    fn default() -> Self {
        Self::new()
    }
}

/// `A = P m + G/2`, `B = P m - G/2`. Negative flows are an error, never clamped.
pub fn heuristic_decompose(net: f64, population: f64, m: f64) -> Result<FlowSplit> {
    if !(population > 0.0 && population.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "population {population} must be > 0"
        )));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::InvalidParameter(format!("multiplier m = {m} must be > 0")));
    }
    let inflow = population * m + 0.5 * net;
    let outflow = inflow - net;
    if inflow < 0.0 || outflow < 0.0 {
        return Err(Error::InfeasibleSplit {
            context: format!("net {net}, population {population}, m {m}"),
            inflow,
            outflow,
            advice: "choose a larger multiplier m",
        });
    }
    Ok(FlowSplit {
        net,
        inflow,
        outflow,
        method: SplitMethod::Heuristic,
    })
}

/// One observed (in-migration rate, net migration rate) pair, annual scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RateObservation {
    pub location: String,
    pub period: String,
    pub in_rate: f64,
    pub net_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RatePanel {
    rows: Vec<RateObservation>,
}

pub const RATE_HEADER: [&str; 4] = ["location", "period", "in_rate", "net_rate"];

impl RatePanel {
    pub fn new(rows: Vec<RateObservation>) -> Result<Self> {
        for r in &rows {
            if !(r.in_rate.is_finite() && r.in_rate >= 0.0) || !r.net_rate.is_finite() {
                return Err(Error::Schema(format!(
                    "rate observation for `{}` `{}` has in_rate {} / net_rate {}",
                    r.location, r.period, r.in_rate, r.net_rate
                )));
            }
        }
        Ok(RatePanel { rows })
    }

    pub fn rows(&self) -> &[RateObservation] {
        &self.rows
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if headers != RATE_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", RATE_HEADER.join(",")),
            });
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            let num = |k: usize| -> Result<f64> {
                rec[k].parse().map_err(|_| Error::Parse {
                    line,
                    message: format!("bad rate `{}`", &rec[k]),
                })
            };
            rows.push(RateObservation {
                location: rec[0].to_string(),
                period: rec[1].to_string(),
                in_rate: num(2)?,
                net_rate: num(3)?,
            });
        }
        RatePanel::new(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(RATE_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.location.as_str(),
                r.period.as_str(),
                &r.in_rate.to_string(),
                &r.net_rate.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<rate writer>", e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}

/// Fitted random-intercept model `IMR = beta0_i + beta1 * NMR + e`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedEffectsFit {
    pub beta0: f64,
    pub beta1: f64,
    pub var_between: f64,
    pub var_within: f64,
    pub imr_min: f64,
    /// Location-specific intercepts (shrunken), in first-appearance order.
    pub intercepts: Vec<(String, f64)>,
}

impl MixedEffectsFit {
    pub fn intercept(&self, location: &str) -> Result<f64> {
        self.intercepts
            .iter()
            .find(|(l, _)| l == location)
            .map(|(_, b)| *b)
            .ok_or_else(|| Error::UnknownLocation(location.to_string()))
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "beta0 = {}", self.beta0);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "var_between = {}", self.var_between);
        let _ = writeln!(s, "var_within = {}", self.var_within);
        let _ = writeln!(s, "imr_min = {}", self.imr_min);
        for (loc, b) in &self.intercepts {
            let _ = writeln!(s, "intercept.{loc} = {b}");
        }
        s
    }

    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut fit = MixedEffectsFit {
            beta0: f64::NAN,
            beta1: f64::NAN,
            var_between: f64::NAN,
            var_within: f64::NAN,
            imr_min: f64::NAN,
            intercepts: Vec::new(),
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Parse {
                line: n as u64 + 1,
                message: m,
            };
            let (key, value) = line
                .rsplit_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| err(format!("bad value for `{key}`")))?;
            match key {
                "beta0" => fit.beta0 = value,
                "beta1" => fit.beta1 = value,
                "var_between" => fit.var_between = value,
                "var_within" => fit.var_within = value,
                "imr_min" => fit.imr_min = value,
                k => match k.strip_prefix("intercept.") {
                    Some(loc) => fit.intercepts.push((loc.to_string(), value)),
                    None => return Err(err(format!("unknown key `{k}`"))),
                },
            }
        }
        for (name, v) in [
            ("beta0", fit.beta0),
            ("beta1", fit.beta1),
            ("var_between", fit.var_between),
            ("var_within", fit.var_within),
            ("imr_min", fit.imr_min),
        ] {
            if v.is_nan() {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("missing key `{name}`"),
                });
            }
        }
        if fit.var_between < 0.0 || fit.var_within < 0.0 || fit.imr_min < 0.0 {
            return Err(Error::Schema(
                "variances and imr_min must be nonnegative".into(),
            ));
        }
        Ok(fit)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_kv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_str(&text)
    }
}

struct Group {
    name: String,
    x: Vec<f64>,
    y: Vec<f64>,
}

/// GLS estimate and profiled quantities for a fixed variance ratio
/// `gamma = var_between / var_within`.
struct Profile {
    beta: [f64; 2],
    var_within: f64,
    loglik: f64,
}

fn profile_at(groups: &[Group], n_total: usize, gamma: f64) -> Option<Profile> {
    // Normal equations for (intercept, slope) with V_i^{-1} ∝ I - c_i J.
    let mut xtx = [[0.0; 2]; 2];
    let mut xty = [0.0; 2];
    for g in groups {
        let n = g.x.len() as f64;
        let c = gamma / (1.0 + n * gamma);
        let sx: f64 = g.x.iter().sum();
        let sy: f64 = g.y.iter().sum();
        let sxx: f64 = g.x.iter().map(|v| v * v).sum();
        let sxy: f64 = g.x.iter().zip(&g.y).map(|(a, b)| a * b).sum();
        xtx[0][0] += n - c * n * n;
        xtx[0][1] += sx - c * n * sx;
        xtx[1][1] += sxx - c * sx * sx;
        xty[0] += sy - c * n * sy;
        xty[1] += sxy - c * sx * sy;
    }
    xtx[1][0] = xtx[0][1];
    let det = xtx[0][0] * xtx[1][1] - xtx[0][1] * xtx[1][0];
    let scale = xtx[0][0].abs() * xtx[1][1].abs();
    if !(det.is_finite() && det > 1e-12 * scale && scale > 0.0) {
        return None;
    }
    let b0 = (xtx[1][1] * xty[0] - xtx[0][1] * xty[1]) / det;
    let b1 = (xtx[0][0] * xty[1] - xtx[1][0] * xty[0]) / det;

    let mut quad = 0.0;
    let mut logdet = 0.0;
    for g in groups {
        let n = g.x.len() as f64;
        let c = gamma / (1.0 + n * gamma);
        let (mut ss, mut s) = (0.0, 0.0);
        for (x, y) in g.x.iter().zip(&g.y) {
            let r = y - b0 - b1 * x;
            ss += r * r;
            s += r;
        }
        quad += ss - c * s * s;
        logdet += (1.0 + n * gamma).ln();
    }
    let nt = n_total as f64;
    let var_within = quad / nt;
    if !(var_within > 0.0) {
        return None;
    }
    let loglik =
        -0.5 * nt * ((2.0 * std::f64::consts::PI * var_within).ln() + 1.0) - 0.5 * logdet;
    Some(Profile {
        beta: [b0, b1],
        var_within,
        loglik,
    })
}

/// Maximum-likelihood fit of the random-intercept model by profiling out
/// the fixed effects and the within variance, then maximizing over the
/// variance ratio on a log grid refined by golden-section search.
pub fn fit_mixed_effects(data: &RatePanel, imr_min: f64) -> Result<MixedEffectsFit> {
    if !(imr_min >= 0.0 && imr_min.is_finite()) {
        return Err(Error::InvalidParameter(format!("imr_min {imr_min} must be >= 0")));
    }
    let mut groups: Vec<Group> = Vec::new();
    for row in data.rows() {
        match groups.iter_mut().find(|g| g.name == row.location) {
            Some(g) => {
                g.x.push(row.net_rate);
                g.y.push(row.in_rate);
            }
            None => groups.push(Group {
                name: row.location.clone(),
                x: vec![row.net_rate],
                y: vec![row.in_rate],
            }),
        }
    }
    if groups.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 locations, got {}",
            groups.len()
        )));
    }
    if !groups.iter().any(|g| g.x.len() >= 2) {
        return Err(Error::DegenerateFit(
            "need at least one location with 2 or more observations".into(),
        ));
    }
    let n_total = data.rows().len();
    let xs = data.rows().iter().map(|r| r.net_rate);
    let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
        (lo.min(x), hi.max(x))
    });
    if hi - lo <= 1e-14 * hi.abs().max(1.0) {
        return Err(Error::DegenerateFit(
            "all net migration rates are identical; slope is not identifiable".into(),
        ));
    }

    let eval = |log_gamma: f64| profile_at(&groups, n_total, log_gamma.exp());
    let objective = |log_gamma: f64| eval(log_gamma).map_or(f64::NEG_INFINITY, |p| p.loglik);

    const LO: f64 = -30.0;
    const HI: f64 = 15.0;
    const STEPS: usize = 180;
    let step = (HI - LO) / STEPS as f64;
    let (mut best_t, mut best) = (LO, objective(LO));
    for k in 1..=STEPS {
        let t = LO + step * k as f64;
        let v = objective(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    // Golden-section refinement on the bracketing interval.
    let (mut a, mut b) = ((best_t - step).max(LO), (best_t + step).min(HI));
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    for _ in 0..100 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = objective(d);
        }
        if (b - a).abs() < 1e-10 {
            break;
        }
    }
    let t_opt = 0.5 * (a + b);
    let mut gamma = t_opt.exp();
    let mut profile = eval(t_opt);
    // Boundary: no between-location variance.
    if let Some(p0) = profile_at(&groups, n_total, 0.0) {
        if profile.as_ref().is_none_or(|p| p0.loglik >= p.loglik) {
            gamma = 0.0;
            profile = Some(p0);
        }
    }
    let profile = profile.ok_or_else(|| {
        Error::DegenerateFit("normal equations are singular for every variance ratio".into())
    })?;
    let [beta0, beta1] = profile.beta;
    let intercepts = groups
        .iter()
        .map(|g| {
            let n = g.x.len() as f64;
            let resid: f64 = g
                .x
                .iter()
                .zip(&g.y)
                .map(|(x, y)| y - beta0 - beta1 * x)
                .sum();
            (g.name.clone(), beta0 + gamma / (1.0 + n * gamma) * resid)
        })
        .collect();
    Ok(MixedEffectsFit {
        beta0,
        beta1,
        var_between: gamma * profile.var_within,
        var_within: profile.var_within,
        imr_min,
        intercepts,
    })
}

/// Replaces the intercepts of the listed locations with the global mean.
pub fn apply_outlier_policy<S: AsRef<str>>(
    fit: &MixedEffectsFit,
    outliers: &[S],
) -> Result<MixedEffectsFit> {
    let mut out = fit.clone();
    for name in outliers {
        let name = name.as_ref();
        let entry = out
            .intercepts
            .iter_mut()
            .find(|(l, _)| l == name)
            .ok_or_else(|| Error::UnknownLocation(name.to_string()))?;
        entry.1 = fit.beta0;
    }
    Ok(out)
}

/// Count-scale split from the fitted model:
/// `A = max(beta0_i h P + beta1 G, imr_min h P)`, `B = A - G`, where `h`
/// converts annual rates to the period length (10 for decadal data).
pub fn predict_a(
    fit: &MixedEffectsFit,
    location: &str,
    net: f64,
    population: f64,
    horizon_scale: f64,
) -> Result<FlowSplit> {
    let intercept = fit.intercept(location)?;
    predict_with_intercept(fit, intercept, net, population, horizon_scale)
        .map_err(|e| e.with_context(format!("location `{location}`")))
}

pub(crate) fn predict_with_intercept(
    fit: &MixedEffectsFit,
    intercept: f64,
    net: f64,
    population: f64,
    horizon_scale: f64,
) -> Result<FlowSplit> {
    if !(population > 0.0 && population.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "population {population} must be > 0"
        )));
    }
    if !(horizon_scale >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "horizon scale {horizon_scale} must be >= 1"
        )));
    }
    let linear = intercept * horizon_scale * population + fit.beta1 * net;
    let floor = fit.imr_min * horizon_scale * population;
    let inflow = linear.max(floor);
    let outflow = inflow - net;
    if inflow < 0.0 || outflow < 0.0 {
        return Err(Error::InfeasibleSplit {
            context: format!("net {net}, population {population}"),
            inflow,
            outflow,
            advice: "the fitted in-migration rate is too low for this net total",
        });
    }
    Ok(FlowSplit {
        net,
        inflow,
        outflow,
        method: SplitMethod::MixedEffects,
    })
}
