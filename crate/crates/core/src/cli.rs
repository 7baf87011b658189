//! Batch command-line front end.
//!
//! Every subcommand reads its settings from flags, then from the matching
//! section of the `--config` file, then from defaults. Artifacts go to
//! `--out-dir` with a manifest per subcommand under `manifests/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decompose::{
    apply_outlier_policy, fit_mixed_effects, heuristic_decompose, predict_a, FlowDecomposition, MixedEffectsFit,
    RatePanel, DEFAULT_DECADAL_MULTIPLIER, DEFAULT_IMR_MIN,
};
use crate::error::{Error, ErrorClass, Result};
use crate::fdm_bayes::{
    load_posterior, posterior_summaries, regional_population, sample_posterior, save_posterior, LocationData,
    McmcConfig, RetirementMode, RetirementTable,
};
use crate::fdm_det::{estimate_ratios, load_ratios, model_schedule, save_ratios};
use crate::ingest::{load_panel, load_population_table, redistribute_open_age, MigrationPanel};
use crate::project::{
    project_basic_rc, project_bayes_fdm, project_det_fdm, AgeSexNetMigration, BayesProjection, ProjectionMethod,
    ProjectionPopulation, SexShare, TrajectorySet,
};
use crate::validate::{basic_rc_cells, bayes_fdm_cells, det_fdm_cells, Scale, ValidationReport};

pub const PANEL_FILE: &str = "panel.csv";
pub const DECOMPOSITION_FILE: &str = "decomposition.csv";
pub const MIXED_EFFECTS_FILE: &str = "mixed_effects.txt";
pub const RATIOS_FILE: &str = "ratios.csv";
pub const POSTERIOR_DIR: &str = "posterior";
pub const PROJECTION_DIR: &str = "projection";
pub const VALIDATION_DIR: &str = "validation";
pub const MANIFEST_DIR: &str = "manifests";

const DEFAULT_OPEN_AGE_RATIO: f64 = 0.5;
const DEFAULT_HORIZON: f64 = 10.0;

#[derive(Debug, Parser)]
#[command(name = "netmig", version, about = "Age-specific net migration estimation and projection")]
pub struct Cli {
    /// TOML file with one section per subcommand.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read and check an observed panel; optionally split its open age group.
    Ingest(IngestConfig),
    /// Split net totals into in- and out-migration totals.
    Decompose(DecomposeConfig),
    /// Estimate per-location ratios for the deterministic method.
    FitDet(FitDetConfig),
    /// Sample the Bayesian posterior of each location.
    FitBayes(FitBayesConfig),
    /// Disaggregate projected totals by sex and age.
    Project(ProjectConfig),
    /// In-sample validation of the fitted methods.
    Validate(ValidateConfig),
    /// Summarize the artifacts of a run.
    Report,
}

/// Merges flag values over file values, field by field.
macro_rules! overlay {
    ($flags:expr, $file:expr, [$($f:ident),*]) => {{
        let (a, b) = ($flags, $file);
        Self { $($f: a.$f.or(b.$f)),* }
    }};
}

/// Makes relative paths of a file section relative to the file's directory.
macro_rules! rebase {
    ($s:expr, $dir:expr, [$($f:ident),*]) => {{
        $( if let Some(p) = $s.$f.take() { $s.$f = Some(rebase_path($dir, p)); } )*
    }};
}

fn cwd() -> PathBuf {
    std::env::current_dir().unwrap_or_default()
}

fn rebase_path(dir: &Path, p: PathBuf) -> PathBuf {
    if p.is_relative() {
        dir.join(p)
    } else {
        p
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestConfig {
    /// Panel CSV: location, period, age_group, net_migration, population.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub panel: Option<PathBuf>,
    /// Optional stored totals to cross-check: location, period, net_total.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub totals: Option<PathBuf>,
    /// New terminal group (e.g. 95+) for splitting the open age group.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub open_age: Option<String>,
    /// Decay of absolute net migration per created group.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_ratio: Option<f64>,
    /// Population of the created groups: location, period, age_group, population.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_age_population: Option<PathBuf>,
}

impl IngestConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(self, file, [panel, totals, open_age, decay_ratio, old_age_population])
    }

    fn rebase(&mut self, dir: &Path) {
        rebase!(self, dir, [panel, totals, old_age_population]);
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    /// `heuristic` (default) or `mixed`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// Migration multiplier of the heuristic split.
    #[arg(long = "m")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    /// Rate panel for the mixed-effects split: location, period, in_rate, net_rate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rate_panel: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imr_min: Option<f64>,
    /// Period length in years (annual rates times this).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    /// Locations whose intercept is replaced by the global mean.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outliers: Option<Vec<String>>,
}

impl DecomposeConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(self, file, [method, m, rate_panel, imr_min, horizon, outliers])
    }

    fn rebase(&mut self, dir: &Path) {
        rebase!(self, dir, [rate_panel]);
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitDetConfig {
    /// Also write the per-period ratios.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_period: Option<bool>,
}

impl FitDetConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(self, file, [per_period])
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitBayesConfig {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chains: Option<usize>,
    /// Post burn-in iterations per chain.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub thin: Option<usize>,
    /// Retirement table: location, retirement_in, retirement_out.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retirement: Option<PathBuf>,
    /// Mode for locations missing from the table: in-only, out-only or neither.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default_mode: Option<String>,
    /// Regional population table; defaults to the panel aggregate.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regional_population: Option<PathBuf>,
    /// Location name of the region in the regional table.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
    /// Restrict to these locations.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub locations: Option<Vec<String>>,
}

impl FitBayesConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(
            self,
            file,
            [chains, iterations, burn_in, thin, retirement, default_mode, regional_population, region, locations]
        )
    }

    fn rebase(&mut self, dir: &Path) {
        rebase!(self, dir, [retirement, regional_population]);
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectConfig {
    /// Trajectories CSV: location, period, trajectory, net_total.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<PathBuf>,
    /// Any of basic-rc, det-fdm, bayes-fdm.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub female_share: Option<f64>,
    #[arg(long = "m")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
}

impl ProjectConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(self, file, [trajectories, methods, female_share, m, horizon])
    }

    fn rebase(&mut self, dir: &Path) {
        rebase!(self, dir, [trajectories]);
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Any of basic-rc, det-fdm, bayes-fdm.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,
}

impl ValidateConfig {
    fn overlay(self, file: Self) -> Self {
        overlay!(self, file, [methods])
    }
}

/// Contents of a `--config` file. Relative paths are taken relative to
/// the file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub ingest: IngestConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default, rename = "fit-det")]
    pub fit_det: FitDetConfig,
    #[serde(default, rename = "fit-bayes")]
    pub fit_bayes: FitBayesConfig,
    #[serde(default)]
    pub project: ProjectConfig,
    #[serde(default)]
    pub validate: ValidateConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let dir = rebase_path(&cwd(), path.parent().unwrap_or(Path::new(".")).to_path_buf());
        let dir = dir.as_path();
        if let Some(p) = cfg.out_dir.take() {
            cfg.out_dir = Some(rebase_path(dir, p));
        }
        cfg.ingest.rebase(dir);
        cfg.decompose.rebase(dir);
        cfg.fit_bayes.rebase(dir);
        cfg.project.rebase(dir);
        Ok(cfg)
    }
}

/// Run state shared by the subcommands.
struct Run {
    name: &'static str,
    seed: Option<u64>,
    threads: Option<usize>,
    out: PathBuf,
    file: RunConfig,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn input(&mut self, path: &Path) -> Result<PathBuf> {
        if !path.exists() {
            return Err(Error::Config(format!("input {} does not exist", path.display())));
        }
        self.inputs.push(path.to_path_buf());
        Ok(path.to_path_buf())
    }

    /// An artifact of an earlier subcommand.
    fn artifact(&mut self, name: &str, producer: &'static str) -> Result<PathBuf> {
        let path = self.path(name);
        if !path.exists() {
            return Err(Error::MissingArtifact { path, producer });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| {
            Error::Config(format!("`{}` is stochastic and needs --seed (or `seed` in the config)", self.name))
        })
    }

    fn panel(&mut self) -> Result<MigrationPanel> {
        let p = self.artifact(PANEL_FILE, "ingest")?;
        load_panel(&p, None)
    }

    fn decomposition(&mut self) -> Result<FlowDecomposition> {
        let p = self.artifact(DECOMPOSITION_FILE, "decompose")?;
        FlowDecomposition::load(&p)
    }

    fn mkdir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
    }

    /// Writes `manifests/<name>.json` and a re-runnable `manifests/<name>.toml`.
    fn finish<T: Serialize>(mut self, section: &str, resolved: &T) -> Result<()> {
        let dir = self.out.join(MANIFEST_DIR);
        self.mkdir(&dir)?;
        self.inputs.sort();
        self.inputs.dedup();
        self.outputs.sort();
        self.outputs.dedup();
        let digest = |p: &PathBuf| -> Result<serde_json::Value> {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::json!({
                "path": p.display().to_string(),
                "sha256": hex::encode(Sha256::digest(&bytes)),
            }))
        };
        let inputs = self.inputs.iter().map(digest).collect::<Result<Vec<_>>>()?;
        let outputs = self.outputs.iter().map(digest).collect::<Result<Vec<_>>>()?;
        let manifest = serde_json::json!({
            "command": self.name,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "threads": self.threads,
            "out_dir": self.out.display().to_string(),
            "config": resolved,
            "inputs": inputs,
            "outputs": outputs,
        });
        let json = dir.join(format!("{}.json", self.name));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;

        let mut table = toml::Table::new();
        if let Some(s) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        table.insert("out_dir".into(), toml::Value::String(self.out.display().to_string()));
        if !section.is_empty() {
            let value = toml::Value::try_from(resolved).map_err(|e| Error::Config(e.to_string()))?;
            table.insert(section.into(), value);
        }
        let rerun = dir.join(format!("{}.toml", self.name));
        let text = toml::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&rerun, text).map_err(|e| Error::io(&rerun, e))
    }
}

fn parse_methods(names: &[String]) -> Result<Vec<ProjectionMethod>> {
    let mut out = Vec::new();
    for n in names {
        let m = ProjectionMethod::parse(n.trim())?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    Ok(out)
}

fn all_methods() -> Vec<String> {
    ProjectionMethod::ALL.iter().map(|m| m.as_str().to_string()).collect()
}

fn cmd_ingest(mut run: Run, flags: IngestConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.ingest.clone());
    cfg.rebase(&cwd());
    let panel_path = cfg
        .panel
        .clone()
        .ok_or_else(|| Error::Config("ingest needs --panel".into()))?;
    run.input(&panel_path)?;
    if let Some(t) = &cfg.totals {
        run.input(t)?;
    }
    let mut panel = load_panel(&panel_path, cfg.totals.as_deref())?;
    if let Some(open) = &cfg.open_age {
        let ratio = *cfg.decay_ratio.get_or_insert(DEFAULT_OPEN_AGE_RATIO);
        let pop_path = cfg
            .old_age_population
            .clone()
            .ok_or_else(|| Error::Config("--open-age needs --old-age-population".into()))?;
        run.input(&pop_path)?;
        let table = load_population_table(&pop_path)?;
        panel = redistribute_open_age(&panel, open, ratio, &table)?;
    }
    run.mkdir(&run.out.clone())?;
    let out = run.path(PANEL_FILE);
    panel.save(&out)?;
    run.outputs.push(out);
    log::info!(
        "ingested {} locations x {} periods x {} age groups",
        panel.locations().len(),
        panel.periods().len(),
        panel.n_ages()
    );
    run.finish("ingest", &cfg)
}

fn cmd_decompose(mut run: Run, flags: DecomposeConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.decompose.clone());
    cfg.rebase(&cwd());
    let panel = run.panel()?;
    let method = cfg.method.get_or_insert_with(|| "heuristic".into()).clone();
    let mut decomp = FlowDecomposition::new();
    match method.as_str() {
        "heuristic" => {
            let m = *cfg.m.get_or_insert(DEFAULT_DECADAL_MULTIPLIER);
            for (i, loc) in panel.locations().iter().enumerate() {
                for (t, period) in panel.periods().iter().enumerate() {
                    let split = heuristic_decompose(panel.total(i, t), panel.total_population(i, t), m)
                        .map_err(|e| e.with_context(format!("location `{loc}` period `{period}`")))?;
                    decomp.push(loc, period, split);
                }
            }
        }
        "mixed" => {
            let rp = cfg
                .rate_panel
                .clone()
                .ok_or_else(|| Error::Config("decompose --method mixed needs --rate-panel".into()))?;
            run.input(&rp)?;
            let rates = RatePanel::load(&rp)?;
            let imr_min = *cfg.imr_min.get_or_insert(DEFAULT_IMR_MIN);
            let horizon = *cfg.horizon.get_or_insert(DEFAULT_HORIZON);
            let mut fit = fit_mixed_effects(&rates, imr_min)?;
            if let Some(o) = &cfg.outliers {
                fit = apply_outlier_policy(&fit, o)?;
            }
            for (i, loc) in panel.locations().iter().enumerate() {
                for (t, period) in panel.periods().iter().enumerate() {
                    let split = predict_a(&fit, loc, panel.total(i, t), panel.total_population(i, t), horizon)
                        .map_err(|e| e.with_context(format!("period `{period}`")))?;
                    decomp.push(loc, period, split);
                }
            }
            let out = run.path(MIXED_EFFECTS_FILE);
            fit.save(&out)?;
            run.outputs.push(out);
        }
        other => {
            return Err(Error::Config(format!(
                "unknown decomposition method `{other}` (heuristic, mixed)"
            )))
        }
    }
    let out = run.path(DECOMPOSITION_FILE);
    decomp.save(&out)?;
    run.outputs.push(out);
    run.finish("decompose", &cfg)
}

fn cmd_fit_det(mut run: Run, flags: FitDetConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.fit_det.clone());
    let panel = run.panel()?;
    let decomp = run.decomposition()?;
    let per_period = *cfg.per_period.get_or_insert(false);
    let ratios = estimate_ratios(&panel, &decomp, &model_schedule(), per_period)?;
    let out = run.path(RATIOS_FILE);
    save_ratios(&ratios, panel.grid(), &out)?;
    run.outputs.push(out);
    if per_period {
        let path = run.path("ratios_by_period.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["location", "period", "age_group", "ratio"])?;
        for r in &ratios {
            for (t, row) in r.per_period.iter().flatten().enumerate() {
                for (label, v) in panel.grid().labels().zip(row) {
                    w.write_record([r.location.as_str(), panel.periods()[t].as_str(), label, &v.to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        run.outputs.push(path);
    }
    run.finish("fit-det", &cfg)
}

/// Per-location estimation data, with the regional population chosen by
/// the fit-bayes settings.
fn location_data(
    run: &mut Run,
    cfg: &FitBayesConfig,
    panel: &MigrationPanel,
    decomp: &FlowDecomposition,
    loc: &str,
) -> Result<LocationData> {
    let regional = match &cfg.regional_population {
        Some(p) => {
            run.input(p)?;
            let region = cfg
                .region
                .as_deref()
                .ok_or_else(|| Error::Config("--regional-population needs --region".into()))?;
            Some(regional_population(&load_population_table(p)?, region, panel)?)
        }
        None => None,
    };
    LocationData::from_panel(panel, loc, decomp, regional.as_deref())
}

fn selected_locations(panel: &MigrationPanel, cfg: &FitBayesConfig) -> Result<Vec<String>> {
    match &cfg.locations {
        Some(list) => {
            for l in list {
                if panel.location_index(l).is_none() {
                    return Err(Error::UnknownLocation(l.clone()));
                }
            }
            Ok(list.clone())
        }
        None => Ok(panel.locations().to_vec()),
    }
}

fn cmd_fit_bayes(mut run: Run, flags: FitBayesConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.fit_bayes.clone());
    cfg.rebase(&cwd());
    let seed = run.seed()?;
    let panel = run.panel()?;
    let decomp = run.decomposition()?;
    let defaults = McmcConfig::default();
    let mcmc = McmcConfig {
        chains: *cfg.chains.get_or_insert(defaults.chains),
        iterations: *cfg.iterations.get_or_insert(defaults.iterations),
        burn_in: *cfg.burn_in.get_or_insert(defaults.burn_in),
        thin: *cfg.thin.get_or_insert(defaults.thin),
        seed,
        use_likelihood: true,
    };
    mcmc.validate()?;
    let mode = RetirementMode::parse(cfg.default_mode.get_or_insert_with(|| "in-only".into()))?;
    let table = match &cfg.retirement {
        Some(p) => {
            run.input(p)?;
            RetirementTable::load(p)?
        }
        None => RetirementTable::default(),
    };
    let dir = run.path(POSTERIOR_DIR);
    run.mkdir(&dir)?;
    let mut diag = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    diag.write_record(["location", "param", "rhat", "ess"])?;
    let mut acc = csv::Writer::from_path(dir.join("acceptance.csv"))?;
    acc.write_record(["location", "move", "rate"])?;
    let summary_path = dir.join("summary.csv");
    let mut summary_file = std::io::BufWriter::new(
        std::fs::File::create(&summary_path).map_err(|e| Error::io(&summary_path, e))?,
    );
    for (n, loc) in selected_locations(&panel, &cfg)?.iter().enumerate() {
        let data = location_data(&mut run, &cfg, &panel, &decomp, loc)?;
        let prior = table.prior_for(loc, mode);
        let posterior = sample_posterior(&data, &prior, &mcmc)?;
        let d = &posterior.diagnostics;
        for ((p, r), e) in d.params.iter().zip(&d.rhat).zip(&d.ess) {
            diag.write_record([loc.as_str(), p.as_str(), &r.to_string(), &e.to_string()])?;
        }
        for (m, a) in &d.acceptance {
            acc.write_record([loc.as_str(), m.as_str(), &a.to_string()])?;
        }
        save_posterior(&dir, loc, &posterior.samples)?;
        let summary = posterior_summaries(&posterior.samples, &data, seed)?;
        summary.write_csv(panel.grid(), &mut summary_file, n == 0)?;
        log::info!("{loc}: {} draws, max R-hat {:.3}", posterior.samples.len(), d.max_rhat());
    }
    diag.flush().map_err(|e| Error::io(&dir, e))?;
    acc.flush().map_err(|e| Error::io(&dir, e))?;
    std::io::Write::flush(&mut summary_file).map_err(|e| Error::io(&summary_path, e))?;
    drop(summary_file);
    for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
        run.outputs.push(entry.map_err(|e| Error::io(&dir, e))?.path());
    }
    run.finish("fit-bayes", &cfg)
}

fn write_figure4(path: &Path, outputs: &[AgeSexNetMigration]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "location", "period", "method", "sex", "age_group", "median", "lo80", "hi80", "lo95", "hi95",
    ])?;
    for out in outputs {
        for (loc, period, sex, bands) in out.summary() {
            for (label, b) in out.grid.labels().zip(&bands) {
                w.write_record([
                    loc.as_str(),
                    period.as_str(),
                    out.method.as_str(),
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
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn cmd_project(mut run: Run, flags: ProjectConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.project.clone());
    cfg.rebase(&cwd());
    let methods = parse_methods(cfg.methods.get_or_insert_with(all_methods))?;
    let tp = cfg
        .trajectories
        .clone()
        .ok_or_else(|| Error::Config("project needs --trajectories".into()))?;
    run.input(&tp)?;
    let trajectories = TrajectorySet::load(&tp)?;
    let share = SexShare::new(*cfg.female_share.get_or_insert(0.5))?;
    let m = *cfg.m.get_or_insert(DEFAULT_DECADAL_MULTIPLIER);
    let horizon = *cfg.horizon.get_or_insert(DEFAULT_HORIZON);
    let panel = run.panel()?;
    let grid = panel.grid().clone();
    let population = ProjectionPopulation::from_panel_last(&panel);

    let mut outputs = Vec::new();
    for method in &methods {
        let out = match method {
            ProjectionMethod::BasicRc => project_basic_rc(&trajectories, &model_schedule(), &grid, share)?,
            ProjectionMethod::DetFdm => {
                let p = run.artifact(RATIOS_FILE, "fit-det")?;
                let ratios = load_ratios(&p, &grid)?;
                project_det_fdm(&trajectories, &ratios, &model_schedule(), &grid, m, &population, share)?
            }
            ProjectionMethod::BayesFdm => {
                let seed = run.seed()?;
                let fit_path = run.artifact(MIXED_EFFECTS_FILE, "decompose --method mixed")?;
                let fit = MixedEffectsFit::load(&fit_path)?;
                let dir = run.path(POSTERIOR_DIR);
                let mut posteriors = BTreeMap::new();
                for (loc, _, _) in trajectories.groups() {
                    if !posteriors.contains_key(loc) {
                        let draws = load_posterior(&dir, loc)?;
                        posteriors.insert(loc.clone(), draws);
                    }
                }
                let settings = BayesProjection {
                    horizon_scale: horizon,
                    share,
                    seed,
                };
                project_bayes_fdm(&trajectories, &posteriors, &fit, &grid, &population, settings)?
            }
        };
        let err = out.max_total_error();
        if err > crate::project::TOTAL_TOLERANCE {
            return Err(Error::NumericGuard(format!(
                "{} projection misses its totals by {err}",
                method.as_str()
            )));
        }
        outputs.push(out);
    }
    let dir = run.path(PROJECTION_DIR);
    run.mkdir(&dir)?;
    for out in &outputs {
        let p = dir.join(format!("{}.csv", out.method.as_str()));
        out.save(&p)?;
        run.outputs.push(p);
        let p = dir.join(format!("{}_summary.csv", out.method.as_str()));
        let f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
        out.write_summary_csv(std::io::BufWriter::new(f))?;
        run.outputs.push(p);
    }
    let p = dir.join("figure4.csv");
    write_figure4(&p, &outputs)?;
    run.outputs.push(p);
    run.finish("project", &cfg)
}

fn cmd_validate(mut run: Run, flags: ValidateConfig) -> Result<()> {
    let mut cfg = flags.overlay(run.file.validate.clone());
    let methods = parse_methods(cfg.methods.get_or_insert_with(all_methods))?;
    let panel = run.panel()?;
    let labels: Vec<String> = panel.grid().labels().map(String::from).collect();
    let mut report = ValidationReport::new(labels);
    for method in &methods {
        let cells = match method {
            ProjectionMethod::BasicRc => basic_rc_cells(&panel, &model_schedule())?,
            ProjectionMethod::DetFdm => {
                let decomp = run.decomposition()?;
                let p = run.artifact(RATIOS_FILE, "fit-det")?;
                let ratios = load_ratios(&p, panel.grid())?;
                det_fdm_cells(&panel, &decomp, &ratios, &model_schedule())?
            }
            ProjectionMethod::BayesFdm => {
                let seed = run.seed()?;
                let decomp = run.decomposition()?;
                let bayes_cfg = run.file.fit_bayes.clone();
                let dir = run.path(POSTERIOR_DIR);
                let mut summaries = Vec::new();
                for loc in panel.locations() {
                    let draws = load_posterior(&dir, loc)?;
                    let data = location_data(&mut run, &bayes_cfg, &panel, &decomp, loc)?;
                    summaries.push(posterior_summaries(&draws, &data, seed)?);
                }
                bayes_fdm_cells(&panel, &summaries)?
            }
        };
        for scale in [Scale::Counts, Scale::Rates] {
            report.add(method.as_str(), scale, &cells)?;
        }
    }
    report.check_invariants()?;
    let dir = run.path(VALIDATION_DIR);
    report.save(&dir)?;
    for f in ["report.csv", "report_by_age.csv", "report.txt"] {
        run.outputs.push(dir.join(f));
    }
    print!("{}", report.to_table());
    run.finish("validate", &cfg)
}

fn cmd_report(mut run: Run) -> Result<()> {
    let mut text = String::new();
    let table = run.artifact(&format!("{VALIDATION_DIR}/report.txt"), "validate")?;
    text.push_str("In-sample validation\n\n");
    text.push_str(&std::fs::read_to_string(&table).map_err(|e| Error::io(&table, e))?);
    let diag = run.path(&format!("{POSTERIOR_DIR}/diagnostics.csv"));
    if diag.exists() {
        run.inputs.push(diag.clone());
        let mut worst: BTreeMap<String, (f64, f64)> = BTreeMap::new();
        let mut rdr = csv::Reader::from_path(&diag)?;
        for rec in rdr.records() {
            let rec = rec?;
            let r: f64 = rec[2].parse().unwrap_or(f64::NAN);
            let e: f64 = rec[3].parse().unwrap_or(f64::NAN);
            let w = worst.entry(rec[0].to_string()).or_insert((f64::NEG_INFINITY, f64::INFINITY));
            w.0 = w.0.max(r);
            w.1 = w.1.min(e);
        }
        text.push_str("\nMCMC diagnostics\n\nlocation  max_rhat  min_ess\n");
        for (loc, (r, e)) in worst {
            text.push_str(&format!("{loc}  {r:.3}  {e:.0}\n"));
        }
    }
    let by_age = run.path(&format!("{VALIDATION_DIR}/report_by_age.csv"));
    if by_age.exists() {
        let fig = run.path(&format!("{VALIDATION_DIR}/figure5.csv"));
        std::fs::copy(&by_age, &fig).map_err(|e| Error::io(&fig, e))?;
        run.outputs.push(fig);
    }
    let out = run.path("report.txt");
    std::fs::write(&out, &text).map_err(|e| Error::io(&out, e))?;
    run.outputs.push(out);
    print!("{text}");
    run.finish("", &serde_json::Value::Null)
}

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let threads = cli.threads.or(file.threads);
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let name = match &cli.command {
        Command::Ingest(_) => "ingest",
        Command::Decompose(_) => "decompose",
        Command::FitDet(_) => "fit-det",
        Command::FitBayes(_) => "fit-bayes",
        Command::Project(_) => "project",
        Command::Validate(_) => "validate",
        Command::Report => "report",
    };
    let run = Run {
        name,
        seed: cli.seed.or(file.seed),
        threads,
        out: rebase_path(&cwd(), cli.out_dir.or(file.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"))),
        file,
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(run, a),
        Command::Decompose(a) => cmd_decompose(run, a),
        Command::FitDet(a) => cmd_fit_det(run, a),
        Command::FitBayes(a) => cmd_fit_bayes(run, a),
        Command::Project(a) => cmd_project(run, a),
        Command::Validate(a) => cmd_validate(run, a),
        Command::Report => cmd_report(run),
    };
    result.map_err(|e| e.with_context(name))
}

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}
