//! Adaptive random-walk Metropolis over `(Theta_in, Theta_out, v)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::schedule::{idx, RcParams, N_PARAMS};
use crate::stats::{effective_sample_size, split_rhat};

use super::likelihood::{expected_flows, loglik_from_flows, LocationData, Side};
use super::prior::PriorSpec;
use super::{state_name, PosteriorSample, N_STATE, OUT_OFFSET, V_INDEX};

/// Consecutive all-rejected sweeps after which a chain is declared stuck.
pub const STUCK_ITERATIONS: usize = 10_000;
/// R-hat above this attaches a warning to the posterior.
pub const RHAT_WARN: f64 = 1.1;

const TARGET_ACCEPT: f64 = 0.3;
/// Tempered replicas per chain and the inverse temperature of the hottest.
const N_TEMPS: usize = 8;
const BETA_MIN: f64 = 0.1;
/// Block proposals per sweep once a block covariance is available.
const BLOCK_REPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub chains: usize,
    /// Post burn-in iterations per chain.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Set to false to sample from the prior.
    pub use_likelihood: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 3,
            iterations: 20_000,
            burn_in: 2_000,
            thin: 10,
            seed: 1,
            use_likelihood: true,
        }
    }
}

impl McmcConfig {
    /// Three chains of 100,000 iterations after 10,000 burn-in.
    pub fn paper_scale() -> Self {
        McmcConfig {
            iterations: 100_000,
            burn_in: 10_000,
            ..McmcConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.thin == 0 || self.iterations < self.thin {
            return Err(Error::Config(format!(
                "need chains >= 1, thin >= 1 and iterations >= thin (got {}, {}, {})",
                self.chains, self.thin, self.iterations
            )));
        }
        Ok(())
    }

    pub fn draws_per_chain(&self) -> usize {
        self.iterations / self.thin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDiagnostics {
    /// Names of the sampled parameters, in state order.
    pub params: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    /// Post burn-in acceptance rate of each move type.
    pub acceptance: Vec<(String, f64)>,
}

impl ChainDiagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().copied().fold(f64::NAN, f64::min)
    }
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub location: String,
    pub prior: PriorSpec,
    /// Retained draws ordered by chain, then iteration.
    pub samples: Vec<PosteriorSample>,
    pub diagnostics: ChainDiagnostics,
    pub warnings: Vec<String>,
}

impl Posterior {
    /// Retained values of state entry `j`, one vector per chain.
    pub fn chain_values(&self, j: usize) -> Vec<Vec<f64>> {
        let n_chains = self.samples.iter().map(|s| s.chain + 1).max().unwrap_or(0);
        let mut out = vec![Vec::new(); n_chains];
        for s in &self.samples {
            out[s.chain].push(s.state()[j]);
        }
        out
    }

    pub fn values(&self, j: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s.state()[j]).collect()
    }

    pub fn median(&self, j: usize) -> f64 {
        let mut v = self.values(j);
        v.sort_by(f64::total_cmp);
        crate::stats::quantile_sorted(&v, 0.5)
    }
}

/// Move types: one random walk per free parameter, a joint rescaling of
/// each schedule's level parameters, and multivariate random walks whose
/// covariance is learned during burn-in.
#[derive(Debug, Clone)]
enum Move {
    Single(usize),
    Levels(usize),
    Block(&'static str, Vec<usize>),
}

impl Move {
    fn name(&self) -> String {
        match self {
            Move::Single(j) => state_name(*j),
            Move::Levels(0) => "in.levels".to_string(),
            Move::Levels(_) => "out.levels".to_string(),
            Move::Block(name, _) => format!("{name}.block"),
        }
    }

    fn touches(&self) -> (bool, bool) {
        let on = |j: usize| (j < OUT_OFFSET, (OUT_OFFSET..V_INDEX).contains(&j));
        match self {
            Move::Single(j) => on(*j),
            Move::Levels(o) => on(*o),
            Move::Block(_, js) => js.iter().fold((false, false), |(a, b), j| {
                let (x, y) = on(*j);
                (a || x, b || y)
            }),
        }
    }
}

struct Chain<'a> {
    data: &'a LocationData,
    prior: &'a PriorSpec,
    use_likelihood: bool,
    /// Likelihood exponent; below one while annealing in burn-in.
    beta: f64,
    x: [f64; N_STATE],
    lp: f64,
    ll: f64,
    inflows: Vec<f64>,
    outflows: Vec<f64>,
    prop_in: Vec<f64>,
    prop_out: Vec<f64>,
    rates: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(
        data: &'a LocationData,
        prior: &'a PriorSpec,
        use_likelihood: bool,
        x: [f64; N_STATE],
    ) -> Result<Self> {
        let n = data.n_cells();
        let mut chain = Chain {
            data,
            prior,
            use_likelihood,
            beta: 1.0,
            x,
            lp: prior.log_density(&x),
            ll: 0.0,
            inflows: vec![0.0; n],
            outflows: vec![0.0; n],
            prop_in: vec![0.0; n],
            prop_out: vec![0.0; n],
            rates: vec![0.0; data.n_ages()],
        };
        if use_likelihood {
            let (a, b) = thetas(&x);
            let ok = expected_flows(&a, data, Side::In, &mut chain.rates, &mut chain.inflows)
                && expected_flows(&b, data, Side::Out, &mut chain.rates, &mut chain.outflows);
            if !ok {
                return Err(Error::DegenerateSchedule(format!(
                    "initial schedules for `{}` have zero weight",
                    data.location
                )));
            }
            chain.ll = loglik_from_flows(data, &chain.inflows, &chain.outflows, x[V_INDEX]);
        }
        if !(chain.lp.is_finite() && chain.ll.is_finite()) {
            return Err(Error::NumericGuard(format!(
                "initial log posterior for `{}` is not finite",
                data.location
            )));
        }
        Ok(chain)
    }

    /// Metropolis-Hastings step to `y`, which differs from the current state
    /// in the in- and/or out-schedule as flagged. Returns the acceptance
    /// probability and whether the move was taken.
    fn step(
        &mut self,
        y: &[f64; N_STATE],
        (new_in, new_out): (bool, bool),
        log_q: f64,
        rng: &mut ChaCha8Rng,
    ) -> (f64, bool) {
        let lp = self.prior.log_density(y);
        if lp == f64::NEG_INFINITY {
            return (0.0, false);
        }
        let mut ll = 0.0;
        if self.use_likelihood {
            if new_in
                && !expected_flows(&slice_params(y, 0), self.data, Side::In, &mut self.rates, &mut self.prop_in)
            {
                return (0.0, false);
            }
            if new_out
                && !expected_flows(
                    &slice_params(y, OUT_OFFSET),
                    self.data,
                    Side::Out,
                    &mut self.rates,
                    &mut self.prop_out,
                )
            {
                return (0.0, false);
            }
            let inflows = if new_in { &self.prop_in } else { &self.inflows };
            let outflows = if new_out { &self.prop_out } else { &self.outflows };
            ll = loglik_from_flows(self.data, inflows, outflows, y[V_INDEX]);
            if !ll.is_finite() {
                return (0.0, false);
            }
        }
        let log_alpha = lp - self.lp + self.beta * (ll - self.ll) + log_q;
        let alpha = log_alpha.min(0.0).exp();
        let u: f64 = rng.random();
        if u < alpha {
            self.x = *y;
            self.lp = lp;
            self.ll = ll;
            if new_in {
                std::mem::swap(&mut self.inflows, &mut self.prop_in);
            }
            if new_out {
                std::mem::swap(&mut self.outflows, &mut self.prop_out);
            }
            (alpha, true)
        } else {
            (alpha, false)
        }
    }
}

fn slice_params(state: &[f64; N_STATE], offset: usize) -> RcParams {
    let mut a = [0.0; N_PARAMS];
    a.copy_from_slice(&state[offset..offset + N_PARAMS]);
    RcParams::from_array(a)
}

fn thetas(state: &[f64; N_STATE]) -> (RcParams, RcParams) {
    (slice_params(state, 0), slice_params(state, OUT_OFFSET))
}

struct ChainOutput {
    draws: Vec<PosteriorSample>,
    accepted: Vec<usize>,
    attempted: Vec<usize>,
}

/// Random walks act on `ln x` for the positive parameters, `logit v`, and
/// the raw location parameters `mu2`, `mu3`.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Scale {
    Log,
    Logit,
    Raw,
}

fn scale_of(j: usize) -> Scale {
    if j == V_INDEX {
        Scale::Logit
    } else if matches!(j % OUT_OFFSET, idx::MU2 | idx::MU3) {
        Scale::Raw
    } else {
        Scale::Log
    }
}

fn to_walk(j: usize, x: f64) -> f64 {
    match scale_of(j) {
        Scale::Log => x.ln(),
        Scale::Logit => (x / (1.0 - x)).ln(),
        Scale::Raw => x,
    }
}

fn from_walk(j: usize, u: f64) -> f64 {
    match scale_of(j) {
        Scale::Log => u.exp(),
        Scale::Logit => 1.0 / (1.0 + (-u).exp()),
        Scale::Raw => u,
    }
}

/// `ln |dx/du|` at `x`.
fn log_jacobian(j: usize, x: f64) -> f64 {
    match scale_of(j) {
        Scale::Log => x.ln(),
        Scale::Logit => (x * (1.0 - x)).ln(),
        Scale::Raw => 0.0,
    }
}

/// Moves `x[j]` by `du` on the walk scale; returns the Hastings term.
fn walk(y: &mut [f64; N_STATE], j: usize, du: f64) -> f64 {
    let old = y[j];
    y[j] = from_walk(j, to_walk(j, old) + du);
    log_jacobian(j, y[j]) - log_jacobian(j, old)
}

fn initial_scale(j: usize) -> f64 {
    match scale_of(j) {
        Scale::Raw => 0.5,
        _ => 0.1,
    }
}

fn walk_state(x: &[f64; N_STATE]) -> [f64; N_STATE] {
    std::array::from_fn(|j| if x[j] > 0.0 || j == V_INDEX { to_walk(j, x[j]) } else { 0.0 })
}

/// Lower-triangular Cholesky factor of a symmetric positive definite
/// matrix stored row-major, or `None` if it is not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Cholesky factor of the sample covariance of `history` restricted to `js`,
/// with a small ridge so that flat directions stay proposable.
fn block_factor(history: &[[f64; N_STATE]], js: &[usize]) -> Option<Vec<f64>> {
    let d = js.len();
    let n = history.len();
    if n < 2 * d + 2 {
        return None;
    }
    let mut mean = vec![0.0; d];
    for h in history {
        for (m, &j) in mean.iter_mut().zip(js) {
            *m += h[j] / n as f64;
        }
    }
    let mut cov = vec![0.0; d * d];
    for h in history {
        for a in 0..d {
            let da = h[js[a]] - mean[a];
            for b in 0..=a {
                cov[a * d + b] += da * (h[js[b]] - mean[b]) / (n - 1) as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[b * d + a] = cov[a * d + b];
        }
        let diag = cov[a * d + a];
        cov[a * d + a] = diag * (1.0 + 1e-6) + 1e-14;
    }
    cholesky(&cov, d)
}

/// Unnormalized log posterior; `-inf` off support or for degenerate schedules.
fn log_posterior(data: &LocationData, prior: &PriorSpec, x: &[f64; N_STATE]) -> f64 {
    let lp = prior.log_density(x);
    if lp == f64::NEG_INFINITY {
        return lp;
    }
    let mut rates = vec![0.0; data.n_ages()];
    let mut inflows = vec![0.0; data.n_cells()];
    let mut outflows = vec![0.0; data.n_cells()];
    let (a, b) = thetas(x);
    if !(expected_flows(&a, data, Side::In, &mut rates, &mut inflows)
        && expected_flows(&b, data, Side::Out, &mut rates, &mut outflows))
    {
        return f64::NEG_INFINITY;
    }
    lp + loglik_from_flows(data, &inflows, &outflows, x[V_INDEX])
}

const N_STARTS: usize = 8;
const START_EVALS: usize = 3_000;

/// Starting point of a chain: the best of several short Nelder-Mead searches
/// begun at the prior median and at prior draws from the chain's stream.
fn initial_state(data: &LocationData, prior: &PriorSpec, rng: &mut ChaCha8Rng) -> [f64; N_STATE] {
    let free = prior.free_indices();
    let median = prior.median_state();
    let embed = |u: &[f64]| {
        let mut x = median;
        for (&j, &uj) in free.iter().zip(u) {
            x[j] = from_walk(j, uj);
        }
        x
    };
    let objective = |u: &[f64]| -log_posterior(data, prior, &embed(u));
    let steps: Vec<f64> = free.iter().map(|&j| initial_scale(j)).collect();
    let mut best = (median, -objective(&walk_state(&median).iter().enumerate().filter(|(j, _)| free.contains(j)).map(|(_, u)| *u).collect::<Vec<_>>()));
    for k in 0..N_STARTS {
        let x0 = if k == 0 { median } else { prior.sample(rng) };
        let w = walk_state(&x0);
        let u0: Vec<f64> = free.iter().map(|&j| w[j]).collect();
        let (u, val) = crate::optim::nelder_mead(objective, &u0, &steps, START_EVALS, 1e-10);
        if -val > best.1 {
            best = (embed(&u), -val);
        }
    }
    best.0
}

/// One tempered copy of the chain with its own adaptive proposal state.
struct Replica<'a> {
    chain: Chain<'a>,
    log_scale: Vec<f64>,
    factors: Vec<Option<Vec<f64>>>,
    block_start: Vec<usize>,
    history: Vec<[f64; N_STATE]>,
    accepted: Vec<usize>,
    attempted: Vec<usize>,
}

impl<'a> Replica<'a> {
    fn new(chain: Chain<'a>, moves: &[Move], capacity: usize) -> Self {
        let log_scale = moves
            .iter()
            .map(|m| match m {
                Move::Single(j) => initial_scale(*j).ln(),
                Move::Levels(_) => 0.05f64.ln(),
                Move::Block(_, js) => (2.38 / (js.len() as f64).sqrt()).ln(),
            })
            .collect();
        Replica {
            chain,
            log_scale,
            factors: vec![None; moves.len()],
            block_start: vec![0; moves.len()],
            history: Vec::with_capacity(capacity),
            accepted: vec![0; moves.len()],
            attempted: vec![0; moves.len()],
        }
    }

    /// One sweep over all moves; returns whether anything was accepted.
    fn sweep(
        &mut self,
        moves: &[Move],
        prior: &PriorSpec,
        it: usize,
        adapting: bool,
        rng: &mut ChaCha8Rng,
    ) -> bool {
        let mut any = false;
        let mut z = [0.0; N_STATE];
        for (m, mv) in moves.iter().enumerate() {
            let reps = match mv {
                Move::Block(..) if self.factors[m].is_some() => BLOCK_REPS,
                Move::Block(..) => 0,
                _ => 1,
            };
            for _ in 0..reps {
                let scale = self.log_scale[m].exp();
                let mut y = self.chain.x;
                let log_q = match mv {
                    Move::Single(j) => {
                        let e: f64 = rng.sample(StandardNormal);
                        walk(&mut y, *j, scale * e)
                    }
                    Move::Levels(offset) => {
                        let e: f64 = rng.sample(StandardNormal);
                        let eps = scale * e;
                        let factor = eps.exp();
                        let mut k = 0usize;
                        for &l in &idx::LEVELS {
                            if prior.is_free(offset + l) {
                                y[offset + l] *= factor;
                                k += 1;
                            }
                        }
                        k as f64 * eps
                    }
                    Move::Block(_, js) => {
                        let l = self.factors[m].as_ref().expect("active block");
                        let d = js.len();
                        for zi in z.iter_mut().take(d) {
                            *zi = rng.sample(StandardNormal);
                        }
                        let mut log_q = 0.0;
                        for a in 0..d {
                            let step: f64 = (0..=a).map(|b| l[a * d + b] * z[b]).sum();
                            log_q += walk(&mut y, js[a], scale * step);
                        }
                        log_q
                    }
                };
                let (alpha, ok) = self.chain.step(&y, mv.touches(), log_q, rng);
                if !adapting {
                    self.attempted[m] += 1;
                }
                if ok {
                    any = true;
                    if !adapting {
                        self.accepted[m] += 1;
                    }
                }
                if adapting {
                    let n = (it - self.block_start[m]) as f64;
                    self.log_scale[m] += n.powf(-0.6) * (alpha - TARGET_ACCEPT);
                }
            }
        }
        any
    }

    /// Refits the block covariances from the second half of the history.
    fn refit_blocks(&mut self, moves: &[Move], it: usize) {
        let from = (self.history.len() / 2).min(self.history.len());
        for (m, mv) in moves.iter().enumerate() {
            if let Move::Block(_, js) = mv {
                if let Some(f) = block_factor(&self.history[from..], js) {
                    if self.factors[m].is_none() {
                        self.block_start[m] = it;
                    }
                    self.factors[m] = Some(f);
                }
            }
        }
    }
}

/// Inverse temperatures of the replicas, coldest first.
fn temperature_ladder(n: usize, beta_min: f64) -> Vec<f64> {
    if n <= 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|k| beta_min.powf(k as f64 / (n - 1) as f64))
        .collect()
}

fn run_chain(
    data: &LocationData,
    prior: &PriorSpec,
    config: &McmcConfig,
    chain_id: usize,
    moves: &[Move],
) -> Result<ChainOutput> {
    let n_temps = if config.use_likelihood { N_TEMPS } else { 1 };
    let betas = temperature_ladder(n_temps, BETA_MIN);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain_id as u64);
    let start = if config.use_likelihood {
        initial_state(data, prior, &mut rng)
    } else {
        prior.median_state()
    };
    let mut replicas: Vec<Replica> = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let mut chain = Chain::new(data, prior, config.use_likelihood, start)?;
        chain.beta = beta;
        replicas.push(Replica::new(chain, moves, config.burn_in));
    }
    let checkpoints: Vec<usize> = (2..10).map(|k| config.burn_in * k / 10).collect();
    let mut swaps = 0usize;

    let mut draws = Vec::with_capacity(config.draws_per_chain());
    let mut idle = 0usize;
    let total = config.burn_in + config.iterations;

    for it in 1..=total {
        let adapting = it <= config.burn_in;
        let mut cold_moved = false;
        for (r, rep) in replicas.iter_mut().enumerate() {
            let moved = rep.sweep(moves, prior, it, adapting, &mut rng);
            if r == 0 {
                cold_moved = moved;
            }
        }
        // Exchange states between neighbouring temperatures.
        for r in 0..replicas.len().saturating_sub(1) {
            let (lo, hi) = replicas.split_at_mut(r + 1);
            let (a, b) = (&mut lo[r].chain, &mut hi[0].chain);
            let log_alpha = (a.beta - b.beta) * (b.ll - a.ll);
            let u: f64 = rng.random();
            if u.ln() < log_alpha {
                std::mem::swap(&mut a.x, &mut b.x);
                std::mem::swap(&mut a.lp, &mut b.lp);
                std::mem::swap(&mut a.ll, &mut b.ll);
                std::mem::swap(&mut a.inflows, &mut b.inflows);
                std::mem::swap(&mut a.outflows, &mut b.outflows);
                if r == 0 {
                    cold_moved = true;
                    if !adapting {
                        swaps += 1;
                    }
                }
            }
        }
        idle = if cold_moved { 0 } else { idle + 1 };
        if idle >= STUCK_ITERATIONS {
            return Err(Error::StuckChain {
                chain: chain_id,
                iterations: idle,
            });
        }
        if adapting {
            for rep in replicas.iter_mut() {
                rep.history.push(walk_state(&rep.chain.x));
                if checkpoints.contains(&it) {
                    rep.refit_blocks(moves, it);
                }
            }
        }
        if !adapting && (it - config.burn_in) % config.thin == 0 {
            draws.push(PosteriorSample::from_state(&replicas[0].chain.x, chain_id, it));
        }
    }
    let mut accepted = std::mem::take(&mut replicas[0].accepted);
    let mut attempted = std::mem::take(&mut replicas[0].attempted);
    accepted.push(swaps);
    attempted.push(if n_temps > 1 { config.iterations } else { 0 });
    Ok(ChainOutput {
        draws,
        accepted,
        attempted,
    })
}

/// Samples the posterior of one location. Chains run in parallel, each on
/// its own stream of the seeded generator, so output is reproducible.
pub fn sample_posterior(data: &LocationData, prior: &PriorSpec, config: &McmcConfig) -> Result<Posterior> {
    config.validate()?;
    prior.validate()?;
    data.validate()?;
    let free = prior.free_indices();
    let mut moves: Vec<Move> = free.iter().map(|&j| Move::Single(j)).collect();
    moves.push(Move::Levels(0));
    moves.push(Move::Levels(OUT_OFFSET));
    let ins: Vec<usize> = free.iter().copied().filter(|j| *j < OUT_OFFSET).collect();
    let outs: Vec<usize> = free.iter().copied().filter(|j| (OUT_OFFSET..V_INDEX).contains(j)).collect();
    moves.push(Move::Block("in", ins));
    moves.push(Move::Block("out", outs));
    moves.push(Move::Block("all", free.clone()));

    let outputs: Vec<ChainOutput> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(data, prior, config, c, &moves))
        .collect::<Result<_>>()
        .map_err(|e| e.with_context(format!("sampling `{}`", data.location)))?;

    let mut names: Vec<String> = moves.iter().map(Move::name).collect();
    names.push("swap".to_string());
    let acceptance = names
        .into_iter()
        .enumerate()
        .map(|(m, name)| {
            let acc: usize = outputs.iter().map(|o| o.accepted[m]).sum();
            let att: usize = outputs.iter().map(|o| o.attempted[m]).sum();
            (name, if att > 0 { acc as f64 / att as f64 } else { 0.0 })
        })
        .collect();
    let samples: Vec<PosteriorSample> = outputs.into_iter().flat_map(|o| o.draws).collect();

    let mut posterior = Posterior {
        location: data.location.clone(),
        prior: prior.clone(),
        samples,
        diagnostics: ChainDiagnostics {
            params: Vec::new(),
            rhat: Vec::new(),
            ess: Vec::new(),
            acceptance,
        },
        warnings: Vec::new(),
    };
    for &j in &free {
        let chains = posterior.chain_values(j);
        let diag = &mut posterior.diagnostics;
        diag.params.push(state_name(j));
        diag.rhat.push(split_rhat(&chains));
        diag.ess.push(effective_sample_size(&chains));
    }
    let bad: Vec<String> = posterior
        .diagnostics
        .params
        .iter()
        .zip(&posterior.diagnostics.rhat)
        .filter(|(_, r)| **r > RHAT_WARN)
        .map(|(p, r)| format!("{p} ({r:.3})"))
        .collect();
    if !bad.is_empty() {
        let msg = format!(
            "`{}`: split R-hat above {RHAT_WARN} for {}",
            data.location,
            bad.join(", ")
        );
        log::warn!("{msg}");
        posterior.warnings.push(msg);
    }
    Ok(posterior)
}
