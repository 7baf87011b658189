//! Observed net migration panels: CSV ingestion, validation and
//! open-age-group redistribution.
//!
//! Panel CSV columns: `location, period, age_group, net_migration, population`.
//! Rows must cover every location x period x age group. The age grid is taken
//! from the first (location, period) block in file order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::{AgeGroup, AgeGrid};

pub const PANEL_HEADER: [&str; 5] = [
    "location",
    "period",
    "age_group",
    "net_migration",
    "population",
];

pub const TOTALS_HEADER: [&str; 3] = ["location", "period", "net_total"];

/// Tolerance (persons) between summed age-specific net migration and a
/// stored total.
pub const TOTAL_TOLERANCE: f64 = 0.5;

/// Dense location x period x age panel of net migration and population.
#[derive(Debug, Clone, PartialEq)]
pub struct MigrationPanel {
    locations: Vec<String>,
    periods: Vec<String>,
    grid: AgeGrid,
    net: Vec<f64>,
    population: Vec<f64>,
}

impl MigrationPanel {
    /// `net` and `population` are laid out as `[location][period][age]`.
    pub fn new(
        locations: Vec<String>,
        periods: Vec<String>,
        grid: AgeGrid,
        net: Vec<f64>,
        population: Vec<f64>,
    ) -> Result<Self> {
        let n = locations.len() * periods.len() * grid.len();
        if locations.is_empty() || periods.is_empty() {
            return Err(Error::Schema("panel needs at least one location and period".into()));
        }
        if net.len() != n || population.len() != n {
            return Err(Error::Schema(format!(
                "panel expects {n} cells, got {} net / {} population",
                net.len(),
                population.len()
            )));
        }
        if let Some(v) = net.iter().find(|v| !v.is_finite()) {
            return Err(Error::Schema(format!("non-finite net migration value {v}")));
        }
        if let Some(p) = population.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::Schema(format!("invalid population value {p}")));
        }
        Ok(MigrationPanel {
            locations,
            periods,
            grid,
            net,
            population,
        })
    }

    pub fn locations(&self) -> &[String] {
        &self.locations
    }

    pub fn periods(&self) -> &[String] {
        &self.periods
    }

    pub fn grid(&self) -> &AgeGrid {
        &self.grid
    }

    pub fn n_ages(&self) -> usize {
        self.grid.len()
    }

    fn offset(&self, loc: usize, period: usize) -> usize {
        (loc * self.periods.len() + period) * self.grid.len()
    }

    pub fn net(&self, loc: usize, period: usize) -> &[f64] {
        let o = self.offset(loc, period);
        &self.net[o..o + self.grid.len()]
    }

    pub fn population(&self, loc: usize, period: usize) -> &[f64] {
        let o = self.offset(loc, period);
        &self.population[o..o + self.grid.len()]
    }

    /// Total net migration: the sum over ages.
    pub fn total(&self, loc: usize, period: usize) -> f64 {
        self.net(loc, period).iter().sum()
    }

    pub fn total_population(&self, loc: usize, period: usize) -> f64 {
        self.population(loc, period).iter().sum()
    }

    pub fn location_index(&self, name: &str) -> Option<usize> {
        self.locations.iter().position(|l| l == name)
    }

    pub fn period_index(&self, name: &str) -> Option<usize> {
        self.periods.iter().position(|p| p == name)
    }

    /// Sum of population over all locations, per period and age.
    pub fn aggregate_population(&self, period: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.len()];
        for loc in 0..self.locations.len() {
            for (o, p) in out.iter_mut().zip(self.population(loc, period)) {
                *o += p;
            }
        }
        out
    }

    /// Restricts the panel to a subset of periods (by index, kept in order).
    pub fn select_periods(&self, keep: &[usize]) -> Result<Self> {
        let k = self.grid.len();
        let mut net = Vec::with_capacity(self.locations.len() * keep.len() * k);
        let mut pop = Vec::with_capacity(net.capacity());
        for loc in 0..self.locations.len() {
            for &t in keep {
                if t >= self.periods.len() {
                    return Err(Error::Schema(format!("period index {t} out of range")));
                }
                net.extend_from_slice(self.net(loc, t));
                pop.extend_from_slice(self.population(loc, t));
            }
        }
        MigrationPanel::new(
            self.locations.clone(),
            keep.iter().map(|&t| self.periods[t].clone()).collect(),
            self.grid.clone(),
            net,
            pop,
        )
    }

    /// Checks stored totals against the age sums.
    pub fn check_totals(&self, totals: &TotalsTable) -> Result<()> {
        for (loc, name) in self.locations.iter().enumerate() {
            for (t, period) in self.periods.iter().enumerate() {
                let Some(stored) = totals.get(name, period) else {
                    continue;
                };
                let summed = self.total(loc, t);
                if (summed - stored).abs() > TOTAL_TOLERANCE {
                    return Err(Error::Consistency(format!(
                        "location `{name}` period `{period}`: age-specific net migration sums to \
                         {summed} but the stored total is {stored}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical CSV serialization.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(PANEL_HEADER)?;
        for (i, loc) in self.locations.iter().enumerate() {
            for (t, period) in self.periods.iter().enumerate() {
                for (x, group) in self.grid.groups().iter().enumerate() {
                    let o = self.offset(i, t) + x;
                    w.write_record([
                        loc.as_str(),
                        period.as_str(),
                        group.label.as_str(),
                        &self.net[o].to_string(),
                        &self.population[o].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("<panel writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

pub(crate) fn check_header(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`, got `{}`", expected.join(","), got.join(",")),
        });
    }
    Ok(())
}

pub(crate) fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

pub(crate) fn parse_number(field: &str, what: &str, line: u64) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} `{field}`"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            line,
            message: format!("non-finite {what} `{field}`"),
        });
    }
    Ok(v)
}

struct Row {
    label: String,
    net: Option<f64>,
    population: Option<f64>,
    line: u64,
}

/// Reads and validates a panel from CSV.
pub fn read_panel<R: Read>(reader: R) -> Result<MigrationPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &PANEL_HEADER)?;

    let mut locations: Vec<String> = Vec::new();
    let mut periods: Vec<String> = Vec::new();
    let mut blocks: HashMap<(usize, usize), Vec<Row>> = HashMap::new();
    let mut first_block: Option<(usize, usize)> = None;

    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                line,
                message: e.to_string(),
            }
        })?;
        let line = record_line(&rec);
        if rec.len() != PANEL_HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, got {}", PANEL_HEADER.len(), rec.len()),
            });
        }
        let loc = intern(&mut locations, &rec[0]);
        let period = intern(&mut periods, &rec[1]);
        let optional = |field: &str, what: &str| -> Result<Option<f64>> {
            if field.is_empty() {
                Ok(None)
            } else {
                parse_number(field, what, line).map(Some)
            }
        };
        let row = Row {
            label: rec[2].to_string(),
            net: optional(&rec[3], "net_migration")?,
            population: optional(&rec[4], "population")?,
            line,
        };
        first_block.get_or_insert((loc, period));
        blocks.entry((loc, period)).or_default().push(row);
    }

    let first = first_block.ok_or_else(|| Error::Parse {
        line: 1,
        message: "panel has no data rows".into(),
    })?;
    let labels: Vec<&str> = blocks[&first].iter().map(|r| r.label.as_str()).collect();
    let grid = AgeGrid::from_labels(&labels)?;
    let k = grid.len();

    let n = locations.len() * periods.len() * k;
    let mut net = vec![f64::NAN; n];
    let mut pop = vec![f64::NAN; n];
    for (i, loc) in locations.iter().enumerate() {
        for (t, period) in periods.iter().enumerate() {
            let rows = blocks.get(&(i, t)).ok_or_else(|| Error::Parse {
                line: 0,
                message: format!("missing all cells for location `{loc}` period `{period}`"),
            })?;
            let base = (i * periods.len() + t) * k;
            let mut seen = vec![false; k];
            for row in rows {
                let x = grid.index_of(&row.label).ok_or_else(|| {
                    Error::Schema(format!(
                        "line {}: age group `{}` for location `{loc}` is not in the grid \
                         established by the first block",
                        row.line, row.label
                    ))
                })?;
                if seen[x] {
                    return Err(Error::Parse {
                        line: row.line,
                        message: format!(
                            "duplicate cell location `{loc}` period `{period}` age_group `{}`",
                            row.label
                        ),
                    });
                }
                seen[x] = true;
                let missing = |what: &str| Error::Parse {
                    line: row.line,
                    message: format!(
                        "missing {what} for cell location `{loc}` period `{period}` age_group `{}`",
                        row.label
                    ),
                };
                net[base + x] = row.net.ok_or_else(|| missing("net_migration"))?;
                pop[base + x] = row.population.ok_or_else(|| missing("population"))?;
            }
            if let Some(x) = seen.iter().position(|s| !s) {
                return Err(Error::Parse {
                    line: rows.last().map(|r| r.line).unwrap_or(0),
                    message: format!(
                        "missing cell location `{loc}` period `{period}` age_group `{}`",
                        grid.groups()[x].label
                    ),
                });
            }
        }
    }
    MigrationPanel::new(locations, periods, grid, net, pop)
}

fn intern(names: &mut Vec<String>, name: &str) -> usize {
    match names.iter().position(|n| n == name) {
        Some(i) => i,
        None => {
            names.push(name.to_string());
            names.len() - 1
        }
    }
}

/// Loads a panel and, when given, cross-checks it against a totals file.
pub fn load_panel(path: &Path, totals: Option<&Path>) -> Result<MigrationPanel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let panel = read_panel(std::io::BufReader::new(file))
        .map_err(|e| e.with_context(format!("reading {}", path.display())))?;
    if let Some(tp) = totals {
        let table = load_totals(tp)?;
        panel.check_totals(&table)?;
    }
    Ok(panel)
}

/// Stored net migration totals keyed by (location, period).
#[derive(Debug, Clone, Default)]
pub struct TotalsTable {
    values: HashMap<(String, String), f64>,
}

impl TotalsTable {
    pub fn insert(&mut self, location: &str, period: &str, total: f64) {
        self.values
            .insert((location.to_string(), period.to_string()), total);
    }

    pub fn get(&self, location: &str, period: &str) -> Option<f64> {
        self.values
            .get(&(location.to_string(), period.to_string()))
            .copied()
    }
}

pub fn read_totals<R: Read>(reader: R) -> Result<TotalsTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &TOTALS_HEADER)?;
    let mut table = TotalsTable::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        table.insert(&rec[0], &rec[1], parse_number(&rec[2], "net_total", line)?);
    }
    Ok(table)
}

pub fn load_totals(path: &Path) -> Result<TotalsTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_totals(std::io::BufReader::new(file))
}

/// Population counts keyed by (location, period, age group), used to fill
/// the population of age groups created by [`redistribute_open_age`].
#[derive(Debug, Clone, Default)]
pub struct PopulationTable {
    values: HashMap<(String, String, String), f64>,
}

impl PopulationTable {
    pub fn insert(&mut self, location: &str, period: &str, age_group: &str, population: f64) {
        self.values.insert(
            (location.into(), period.into(), age_group.into()),
            population,
        );
    }

    pub fn get(&self, location: &str, period: &str, age_group: &str) -> Option<f64> {
        self.values
            .get(&(location.into(), period.into(), age_group.into()))
            .copied()
    }
}

pub const POPULATION_HEADER: [&str; 4] = ["location", "period", "age_group", "population"];

pub fn read_population_table<R: Read>(reader: R) -> Result<PopulationTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    check_header(rdr.headers()?, &POPULATION_HEADER)?;
    let mut table = PopulationTable::default();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let p = parse_number(&rec[3], "population", line)?;
        if p < 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("negative population {p}"),
            });
        }
        table.insert(&rec[0], &rec[1], &rec[2], p);
    }
    Ok(table)
}

pub fn load_population_table(path: &Path) -> Result<PopulationTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_population_table(std::io::BufReader::new(file))
}

/// Geometric weights `ratio^k / sum_j ratio^j` for `n` groups.
pub fn geometric_weights(n: usize, ratio: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|k| ratio.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Splits the open terminal group into five-year groups ending at
/// `new_terminal` (e.g. `75+` into `75-79, ..., 90-94, 95+`), with absolute
/// net migration decaying geometrically by `ratio` per group.
///
/// Population for the created groups comes from `old_age_population`.
pub fn redistribute_open_age(
    panel: &MigrationPanel,
    new_terminal: &str,
    ratio: f64,
    old_age_population: &PopulationTable,
) -> Result<MigrationPanel> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "decay ratio {ratio} must lie in (0, 1)"
        )));
    }
    let target = AgeGroup::parse(new_terminal)?;
    if !target.is_open() {
        return Err(Error::InvalidParameter(format!(
            "new terminal group `{new_terminal}` must be open-ended"
        )));
    }
    let old_terminal = panel.grid().terminal().clone();
    let span = target.lower - old_terminal.lower;
    if span <= 0.0 || span % 5.0 != 0.0 {
        return Err(Error::InvalidParameter(format!(
            "new terminal `{new_terminal}` must lie a positive multiple of 5 years above `{}`",
            old_terminal.label
        )));
    }
    let n_new = (span / 5.0) as usize + 1;
    let mut groups: Vec<AgeGroup> = panel.grid().groups()[..panel.n_ages() - 1].to_vec();
    for k in 0..n_new - 1 {
        let lo = old_terminal.lower as u32 + 5 * k as u32;
        groups.push(AgeGroup {
            label: format!("{}-{}", lo, lo + 4),
            lower: lo as f64,
            width: Some(5.0),
        });
    }
    groups.push(target);
    let grid = AgeGrid::new(groups)?;
    let created: Vec<String> = grid.groups()[panel.n_ages() - 1..]
        .iter()
        .map(|g| g.label.clone())
        .collect();

    let weights = geometric_weights(n_new, ratio);
    let k_old = panel.n_ages();
    let mut net = Vec::with_capacity(panel.locations().len() * panel.periods().len() * grid.len());
    let mut pop = Vec::with_capacity(net.capacity());
    for (i, loc) in panel.locations().iter().enumerate() {
        for (t, period) in panel.periods().iter().enumerate() {
            let g = panel.net(i, t);
            let p = panel.population(i, t);
            net.extend_from_slice(&g[..k_old - 1]);
            pop.extend_from_slice(&p[..k_old - 1]);
            let open = g[k_old - 1];
            net.extend(weights.iter().map(|w| w * open));
            for label in &created {
                let value = old_age_population.get(loc, period, label).ok_or_else(|| {
                    Error::Schema(format!(
                        "no population supplied for location `{loc}` period `{period}` \
                         age_group `{label}`"
                    ))
                })?;
                pop.push(value);
            }
        }
    }
    MigrationPanel::new(
        panel.locations().to_vec(),
        panel.periods().to_vec(),
        grid,
        net,
        pop,
    )
}
