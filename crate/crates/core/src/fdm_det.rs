//! Deterministic flow-difference method.
//!
//! In- and out-migration share the model schedule `r(Theta^M)`; locations
//! differ only through per-age ratios `R_x`, applied as `R_x` to the
//! in-schedule and `1/R_x` to the out-schedule. Population weights are not
//! used on this route.

use std::io::{Read, Write};
use std::path::Path;

use crate::decompose::FlowDecomposition;
use crate::error::{Error, Result};
use crate::ingest::MigrationPanel;
use crate::schedule::{normalize_in_place, rc_schedule, AgeGrid, RcParams};

const THETA_M: RcParams = RcParams {
    a1: 0.01,
    alpha1: 0.09,
    a2: 0.05,
    alpha2: 0.077,
    mu2: 16.5,
    lambda2: 0.374,
    a3: 0.0,
    alpha3: 0.0,
    mu3: 0.0,
    lambda3: 0.0,
    c: 0.0003,
};

/// Seven-parameter model schedule shared by all locations.
pub fn model_schedule() -> RcParams {
    THETA_M
}

/// Model schedule on `grid`, normalized to sum to one.
pub fn model_shares(theta_m: &RcParams, grid: &AgeGrid) -> Result<Vec<f64>> {
    let mut r = rc_schedule(theta_m, grid)?;
    normalize_in_place(&mut r)?;
    if let Some(x) = r.iter().position(|v| *v <= 0.0) {
        return Err(Error::Division(format!(
            "model schedule is zero at age group {}",
            grid.groups()[x].label
        )));
    }
    Ok(r)
}

/// Per-location perturbation ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioProfile {
    pub location: String,
    /// Time-averaged ratios, one per age group.
    pub ratios: Vec<f64>,
    /// Per-period ratios before averaging, when requested.
    pub per_period: Option<Vec<Vec<f64>>>,
}

impl RatioProfile {
    pub fn new(location: impl Into<String>, ratios: Vec<f64>) -> Result<Self> {
        check_ratios(&ratios)?;
        Ok(RatioProfile {
            location: location.into(),
            ratios,
            per_period: None,
        })
    }
}

fn check_ratios(r: &[f64]) -> Result<()> {
    match r.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        Some(x) => Err(Error::InvalidParameter(format!(
            "ratio at age index {x} is {}; ratios must be finite and > 0",
            r[x]
        ))),
        None => Ok(()),
    }
}

pub const RATIO_HEADER: [&str; 3] = ["location", "age_group", "ratio"];

pub fn write_ratios<W: Write>(profiles: &[RatioProfile], grid: &AgeGrid, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RATIO_HEADER)?;
    for p in profiles {
        for (label, r) in grid.labels().zip(&p.ratios) {
            w.write_record([p.location.as_str(), label, &r.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<ratio writer>", e))?;
    Ok(())
}

pub fn read_ratios<R: Read>(reader: R, grid: &AgeGrid) -> Result<Vec<RatioProfile>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if headers != RATIO_HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", RATIO_HEADER.join(",")),
        });
    }
    let mut raw: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let x = grid.index_of(&rec[1]).ok_or_else(|| {
            Error::Schema(format!("line {line}: age group `{}` not in grid", &rec[1]))
        })?;
        let value: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad ratio `{}`", &rec[2]),
        })?;
        let slot = match raw.iter().position(|(l, _)| l == &rec[0]) {
            Some(i) => i,
            None => {
                raw.push((rec[0].to_string(), vec![None; grid.len()]));
                raw.len() - 1
            }
        };
        raw[slot].1[x] = Some(value);
    }
    raw.into_iter()
        .map(|(loc, values)| {
            let ratios = values
                .into_iter()
                .enumerate()
                .map(|(x, v)| {
                    v.ok_or_else(|| Error::Parse {
                        line: 0,
                        message: format!(
                            "missing ratio for location `{loc}` age group `{}`",
                            grid.groups()[x].label
                        ),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            RatioProfile::new(loc, ratios)
        })
        .collect()
}

pub fn save_ratios(profiles: &[RatioProfile], grid: &AgeGrid, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ratios(profiles, grid, std::io::BufWriter::new(file))
}

pub fn load_ratios(path: &Path, grid: &AgeGrid) -> Result<Vec<RatioProfile>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_ratios(std::io::BufReader::new(file), grid)
}

/// Derives ratios from observed panels:
///
/// ```text
/// iota_{x,t} = A_t r_x + g_bar_x / 2,   g_bar_x = mean_t g_{x,t}
/// R_x        = mean_t (iota_{x,t} / A_t) / r_x
/// ```
///
/// `r_x` is the model schedule normalized over the grid. When
/// `keep_per_period` is set, per-period ratios built from `g_{x,t}` itself
/// (no averaging anywhere) are retained as well.
pub fn estimate_ratios(
    panel: &MigrationPanel,
    decomp: &FlowDecomposition,
    theta_m: &RcParams,
    keep_per_period: bool,
) -> Result<Vec<RatioProfile>> {
    let shares = model_shares(theta_m, panel.grid())?;
    let k = panel.n_ages();
    let n_t = panel.periods().len() as f64;
    let mut out = Vec::with_capacity(panel.locations().len());
    for (i, loc) in panel.locations().iter().enumerate() {
        let mut mean_net = vec![0.0; k];
        for t in 0..panel.periods().len() {
            for (m, g) in mean_net.iter_mut().zip(panel.net(i, t)) {
                *m += g / n_t;
            }
        }
        let mut ratios = vec![0.0; k];
        let mut per_period = Vec::new();
        for (t, period) in panel.periods().iter().enumerate() {
            let inflow = decomp.require(loc, period)?.inflow;
            if !(inflow > 0.0) {
                return Err(Error::NegativeInflow {
                    context: format!("location `{loc}` period `{period}`"),
                    message: format!("total in-migration is {inflow}"),
                });
            }
            for x in 0..k {
                let iota = inflow * shares[x] + 0.5 * mean_net[x];
                if iota <= 0.0 {
                    return Err(Error::NegativeInflow {
                        context: format!(
                            "location `{loc}` period `{period}` age group `{}`",
                            panel.grid().groups()[x].label
                        ),
                        message: format!("age-specific in-migration estimate is {iota}"),
                    });
                }
                ratios[x] += iota / inflow / shares[x] / n_t;
            }
            if keep_per_period {
                let g = panel.net(i, t);
                let r_t: Vec<f64> = (0..k)
                    .map(|x| (inflow * shares[x] + 0.5 * g[x]) / inflow / shares[x])
                    .collect();
                check_ratios(&r_t).map_err(|e| {
                    e.with_context(format!("per-period ratios for `{loc}` `{period}`"))
                })?;
                per_period.push(r_t);
            }
        }
        let mut profile = RatioProfile::new(loc.clone(), ratios)?;
        if keep_per_period {
            profile.per_period = Some(per_period);
        }
        out.push(profile);
    }
    Ok(out)
}

/// Age-specific net migration from totals and ratios:
///
/// ```text
/// iota_x = A r_x R_x / sum_y r_y R_y
/// o_x    = B (r_x / R_x) / sum_y (r_y / R_y)
/// g_x    = iota_x - o_x
/// ```
pub fn det_fdm_net(
    inflow: f64,
    outflow: f64,
    theta_m: &RcParams,
    grid: &AgeGrid,
    ratios: &[f64],
) -> Result<Vec<f64>> {
    if !(inflow >= 0.0 && outflow >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "flows must be nonnegative, got A = {inflow}, B = {outflow}"
        )));
    }
    if ratios.len() != grid.len() {
        return Err(Error::Schema(format!(
            "{} ratios for a grid of {} groups",
            ratios.len(),
            grid.len()
        )));
    }
    check_ratios(ratios)?;
    let r = rc_schedule(theta_m, grid)?;
    flow_difference(inflow, outflow, &r, ratios)
}

pub(crate) fn flow_difference(
    inflow: f64,
    outflow: f64,
    schedule: &[f64],
    ratios: &[f64],
) -> Result<Vec<f64>> {
    let mut ins: Vec<f64> = schedule.iter().zip(ratios).map(|(r, q)| r * q).collect();
    let mut outs: Vec<f64> = schedule.iter().zip(ratios).map(|(r, q)| r / q).collect();
    normalize_in_place(&mut ins)?;
    normalize_in_place(&mut outs)?;
    Ok(ins
        .iter()
        .zip(&outs)
        .map(|(i, o)| inflow * i - outflow * o)
        .collect())
}

/// Solves for time-specific ratios that reproduce `net` exactly under
/// [`det_fdm_net`] with totals `(inflow, outflow)`.
///
/// With normalized in/out shares `p_x`, `q_x`, the ratio parametrization
/// forces `p_x q_x = kappa r_x^2` for a common `kappa`. Each `p_x` is then
/// the positive root of `A p^2 - g p - B kappa r^2 = 0`, and `kappa` is the
/// unique root of `sum_x p_x(kappa) = 1`. A solution exists iff the positive
/// part of `net` sums to less than `A`. Ratios are returned scaled so that
/// `R = p / r`.
pub fn invert_flow_difference(
    net: &[f64],
    inflow: f64,
    outflow: f64,
    shares: &[f64],
) -> Result<Vec<f64>> {
    let k = net.len();
    if shares.len() != k {
        return Err(Error::Schema("shares and net vectors differ in length".into()));
    }
    if !(inflow > 0.0) {
        return Err(Error::NegativeInflow {
            context: "ratio recovery".into(),
            message: format!("total in-migration is {inflow}"),
        });
    }
    let positive: f64 = net.iter().filter(|g| **g > 0.0).sum();
    if outflow <= 0.0 {
        let p: Vec<f64> = net.iter().map(|g| g / inflow).collect();
        let r: Vec<f64> = p.iter().zip(shares).map(|(p, s)| p / s).collect();
        check_ratios(&r).map_err(|_| Error::NegativeInflow {
            context: "ratio recovery".into(),
            message: "zero out-migration requires strictly positive net migration at every age"
                .into(),
        })?;
        return Ok(r);
    }
    if positive >= inflow {
        return Err(Error::NegativeInflow {
            context: "ratio recovery".into(),
            message: format!(
                "positive net migration ({positive}) is not below total in-migration ({inflow})"
            ),
        });
    }

    let ab4 = 4.0 * inflow * outflow;
    let share_at = |kappa: f64| -> Vec<f64> {
        net.iter()
            .zip(shares)
            .map(|(&g, &s)| {
                let c = ab4 * kappa * s * s;
                let root = (g * g + c).sqrt();
                if g >= 0.0 {
                    (g + root) / (2.0 * inflow)
                } else {
                    2.0 * outflow * kappa * s * s / (root - g)
                }
            })
            .collect()
    };
    let excess = |log_kappa: f64| share_at(log_kappa.exp()).iter().sum::<f64>() - 1.0;

    let mut lo = (inflow / outflow).ln();
    let mut hi = lo;
    while excess(lo) > 0.0 {
        lo -= 2.0;
        if lo < -1400.0 {
            return Err(Error::NumericGuard("cannot bracket ratio scale".into()));
        }
    }
    while excess(hi) < 0.0 {
        hi += 2.0;
        if hi > 1400.0 {
            return Err(Error::NumericGuard("cannot bracket ratio scale".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let p = share_at((0.5 * (lo + hi)).exp());
    let ratios: Vec<f64> = p.iter().zip(shares).map(|(p, s)| p / s).collect();
    check_ratios(&ratios)?;
    Ok(ratios)
}

/// Time-specific reconstruction of an observed panel.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `[location][period][age]` ratios solving the flow-difference identity.
    pub ratios: Vec<Vec<Vec<f64>>>,
    /// `[location][period][age]` reconstructed net migration.
    pub net: Vec<Vec<Vec<f64>>>,
}

/// Recovers every observed `g_{x,i,t}` by using time-specific ratios.
pub fn det_fdm_recover(
    panel: &MigrationPanel,
    decomp: &FlowDecomposition,
    theta_m: &RcParams,
) -> Result<Reconstruction> {
    let grid = panel.grid();
    let shares = model_shares(theta_m, grid)?;
    let mut ratios = Vec::with_capacity(panel.locations().len());
    let mut net = Vec::with_capacity(panel.locations().len());
    for (i, loc) in panel.locations().iter().enumerate() {
        let mut loc_ratios = Vec::new();
        let mut loc_net = Vec::new();
        for (t, period) in panel.periods().iter().enumerate() {
            let ctx = || format!("location `{loc}` period `{period}`");
            let split = decomp.require(loc, period)?;
            let r_t = invert_flow_difference(panel.net(i, t), split.inflow, split.outflow, &shares)
                .map_err(|e| e.with_context(ctx()))?;
            let g = det_fdm_net(split.inflow, split.outflow, theta_m, grid, &r_t)
                .map_err(|e| e.with_context(ctx()))?;
            loc_ratios.push(r_t);
            loc_net.push(g);
        }
        ratios.push(loc_ratios);
        net.push(loc_net);
    }
    Ok(Reconstruction { ratios, net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::{FlowSplit, SplitMethod};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn model_schedule_constants() {
        let m = model_schedule();
        assert_eq!(m.a1, 0.01);
        assert_eq!(m.alpha1, 0.09);
        assert_eq!(m.a2, 0.05);
        assert_eq!(m.alpha2, 0.077);
        assert_eq!(m.mu2, 16.5);
        assert_eq!(m.lambda2, 0.374);
        assert_eq!(m.c, 0.0003);
        assert!(!m.has_retirement());
        assert_eq!(model_schedule(), model_schedule());
    }

    fn one_location_panel(net: Vec<Vec<f64>>, grid: AgeGrid) -> MigrationPanel {
        let periods: Vec<String> = (0..net.len()).map(|t| format!("p{t}")).collect();
        let k = grid.len();
        let flat: Vec<f64> = net.into_iter().flatten().collect();
        let pop = vec![1000.0; flat.len()];
        assert_eq!(flat.len() % k, 0);
        MigrationPanel::new(vec!["loc".into()], periods, grid, flat, pop).unwrap()
    }

    fn decomposition(panel: &MigrationPanel, flows: &[(f64, f64)]) -> FlowDecomposition {
        let mut d = FlowDecomposition::new();
        for (t, period) in panel.periods().iter().enumerate() {
            let (a, b) = flows[t];
            d.push(
                "loc",
                period,
                FlowSplit {
                    net: a - b,
                    inflow: a,
                    outflow: b,
                    method: SplitMethod::Heuristic,
                },
            );
        }
        d
    }

    #[test]
    fn balanced_history_gives_unit_ratios() {
        let grid = AgeGrid::five_year(95);
        let panel = one_location_panel(vec![vec![0.0; 20]; 3], grid);
        let d = decomposition(&panel, &[(5000.0, 5000.0); 3]);
        let r = estimate_ratios(&panel, &d, &model_schedule(), true).unwrap();
        assert!(r[0].ratios.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert_eq!(r[0].per_period.as_ref().unwrap().len(), 3);
    }

    #[test]
    fn single_period_ratio_one_and_a_half() {
        let grid = AgeGrid::five_year(95);
        let shares = model_shares(&model_schedule(), &grid).unwrap();
        let a = 4000.0;
        let mut g = vec![0.0; 20];
        g[5] = a * shares[5];
        let panel = one_location_panel(vec![g], grid);
        let d = decomposition(&panel, &[(a, a - panel.total(0, 0))]);
        let r = estimate_ratios(&panel, &d, &model_schedule(), false).unwrap();
        assert_relative_eq!(r[0].ratios[5], 1.5, max_relative = 1e-12);
        assert_relative_eq!(r[0].ratios[4], 1.0, max_relative = 1e-12);
    }

    #[test]
    fn retirement_inflow_raises_ratios() {
        let grid = AgeGrid::five_year(95);
        let mut g = vec![-20.0; 20];
        for v in &mut g[12..15] {
            *v = 150.0;
        }
        let panel = one_location_panel(vec![g.clone(), g], grid);
        let d = decomposition(&panel, &[(8000.0, 7910.0); 2]);
        let r = estimate_ratios(&panel, &d, &model_schedule(), false).unwrap();
        assert!(r[0].ratios[12..15].iter().all(|v| *v > 1.0));
        assert!(r[0].ratios[..12].iter().all(|v| *v < 1.0));
    }

    #[test]
    fn very_negative_history_is_an_error() {
        let grid = AgeGrid::five_year(95);
        let mut g = vec![0.0; 20];
        g[19] = -5000.0;
        let panel = one_location_panel(vec![g], grid);
        let d = decomposition(&panel, &[(1000.0, 6000.0)]);
        assert!(matches!(
            estimate_ratios(&panel, &d, &model_schedule(), false),
            Err(Error::NegativeInflow { .. })
        ));
    }

    #[test]
    fn equal_flows_unit_ratios_cancel() {
        let grid = AgeGrid::five_year(95);
        let g = det_fdm_net(1234.0, 1234.0, &model_schedule(), &grid, &[1.0; 20]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn one_sided_flow() {
        let grid = AgeGrid::five_year(95);
        let ratios: Vec<f64> = (0..20).map(|x| 0.5 + 0.05 * x as f64).collect();
        let g = det_fdm_net(900.0, 0.0, &model_schedule(), &grid, &ratios).unwrap();
        assert!(g.iter().all(|v| *v > 0.0));
        assert_relative_eq!(g.iter().sum::<f64>(), 900.0, max_relative = 1e-12);
    }

    #[test]
    fn toy_three_group_instance() {
        // Hand arithmetic with r = (0.2, 0.5, 0.3) and R = (2, 1, 0.5):
        //   in  ∝ (0.4, 0.5, 0.15) / 1.05
        //   out ∝ (0.1, 0.5, 0.6)  / 1.2
        let r = [0.2, 0.5, 0.3];
        let ratios = [2.0, 1.0, 0.5];
        let g = flow_difference(210.0, 120.0, &r, &ratios).unwrap();
        let expected = [80.0 - 10.0, 100.0 - 50.0, 30.0 - 60.0];
        for (a, b) in g.iter().zip(expected) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn inversion_rejects_infeasible() {
        let shares = [0.25; 4];
        assert!(invert_flow_difference(&[60.0, 50.0, -10.0, 0.0], 100.0, 0.0, &shares).is_err());
        assert!(invert_flow_difference(&[60.0, 50.0, -20.0, -10.0], 100.0, 20.0, &shares).is_err());
        assert!(invert_flow_difference(&[30.0, 20.0, -20.0, -10.0], 100.0, 80.0, &shares).is_ok());
    }

    #[test]
    fn ratios_csv_round_trip() {
        let grid = AgeGrid::from_labels(&["0-4", "5-9", "10+"]).unwrap();
        let p = vec![
            RatioProfile::new("a", vec![1.0, 0.5, 2.25]).unwrap(),
            RatioProfile::new("b", vec![0.9, 1.1, 1.0]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_ratios(&p, &grid, &mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("location,age_group,ratio\na,0-4,1\n"));
        assert_eq!(read_ratios(buf.as_slice(), &grid).unwrap(), p);
        let missing = "location,age_group,ratio\na,0-4,1\na,5-9,1\n";
        assert!(read_ratios(missing.as_bytes(), &grid).is_err());
    }

    fn arb_ratios() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.2..5.0f64, 20)
    }

    proptest! {
        #[test]
        fn net_sums_to_flow_difference(a in 0.0..1e5f64, b in 0.0..1e5f64, r in arb_ratios()) {
            let grid = AgeGrid::five_year(95);
            let g = det_fdm_net(a, b, &model_schedule(), &grid, &r).unwrap();
            prop_assert!((g.iter().sum::<f64>() - (a - b)).abs() < 1e-9);
        }

        #[test]
        fn homogeneous_of_degree_one(a in 0.0..1e5f64, b in 0.0..1e5f64, lam in 0.01..100.0f64, r in arb_ratios()) {
            let grid = AgeGrid::five_year(95);
            let g = det_fdm_net(a, b, &model_schedule(), &grid, &r).unwrap();
            let h = det_fdm_net(lam * a, lam * b, &model_schedule(), &grid, &r).unwrap();
            for (x, y) in g.iter().zip(&h) {
                prop_assert!((lam * x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn unit_ratios_follow_model_shape(a in 0.0..1e5f64, b in 0.0..1e5f64) {
            let grid = AgeGrid::five_year(95);
            let shares = model_shares(&model_schedule(), &grid).unwrap();
            let g = det_fdm_net(a, b, &model_schedule(), &grid, &[1.0; 20]).unwrap();
            for (x, s) in g.iter().zip(&shares) {
                prop_assert!((x - (a - b) * s).abs() < 1e-9);
            }
        }

        #[test]
        fn inversion_recovers_generating_ratios(
            a in 1e3..1e5f64,
            frac in 0.2..1.8f64,
            r in arb_ratios(),
        ) {
            let grid = AgeGrid::five_year(95);
            let shares = model_shares(&model_schedule(), &grid).unwrap();
            let b = a * frac;
            let g = det_fdm_net(a, b, &model_schedule(), &grid, &r).unwrap();
            let back = invert_flow_difference(&g, a, b, &shares).unwrap();
            // Ratios are identified up to a common factor.
            let scale = back[0] / r[0];
            for (x, y) in back.iter().zip(&r) {
                prop_assert!((x / y / scale - 1.0).abs() < 1e-8);
            }
            let again = det_fdm_net(a, b, &model_schedule(), &grid, &back).unwrap();
            for (x, y) in again.iter().zip(&g) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
