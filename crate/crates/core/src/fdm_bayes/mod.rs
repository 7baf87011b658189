//! Bayesian flow-difference estimation of in- and out-migration schedules.

mod io;
mod likelihood;
mod prior;
mod sampler;
mod summary;

pub use io::{
    load_posterior, read_draws_binary, read_draws_csv, regional_population, save_posterior,
    write_draws_binary, write_draws_csv, DRAWS_HEADER,
};
pub use likelihood::{log_likelihood, LocationData, PeriodData};
pub use prior::{
    configure_retirement, LowerBound, ParamPrior, PriorSpec, RetirementMode, RetirementTable,
    RETIREMENT_HEADER,
};
pub use sampler::{sample_posterior, ChainDiagnostics, McmcConfig, Posterior};
pub use summary::{posterior_summaries, AgeBands, PosteriorSummary, MIN_SUMMARY_DRAWS};

use crate::schedule::{RcParams, N_PARAMS, PARAM_NAMES};

/// Length of the full state `(Theta_in, Theta_out, v)`.
pub const N_STATE: usize = 2 * N_PARAMS + 1;
pub(crate) const OUT_OFFSET: usize = N_PARAMS;
pub(crate) const V_INDEX: usize = 2 * N_PARAMS;

/// Name of state entry `j`: `in.mu2`, `out.a1`, `v`.
pub fn state_name(j: usize) -> String {
    match j {
        V_INDEX => "v".to_string(),
        j if j < OUT_OFFSET => format!("in.{}", PARAM_NAMES[j]),
        j => format!("out.{}", PARAM_NAMES[j - OUT_OFFSET]),
    }
}

pub fn state_index(name: &str) -> Option<usize> {
    (0..N_STATE).find(|j| state_name(*j) == name)
}

/// One retained posterior draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorSample {
    pub theta_in: RcParams,
    pub theta_out: RcParams,
    pub v: f64,
    pub chain: usize,
    pub iter: usize,
}

impl PosteriorSample {
    pub fn from_state(state: &[f64; N_STATE], chain: usize, iter: usize) -> Self {
        let mut a = [0.0; N_PARAMS];
        let mut b = [0.0; N_PARAMS];
        a.copy_from_slice(&state[..OUT_OFFSET]);
        b.copy_from_slice(&state[OUT_OFFSET..V_INDEX]);
        PosteriorSample {
            theta_in: RcParams::from_array(a),
            theta_out: RcParams::from_array(b),
            v: state[V_INDEX],
            chain,
            iter,
        }
    }

    pub fn state(&self) -> [f64; N_STATE] {
        let mut s = [0.0; N_STATE];
        s[..OUT_OFFSET].copy_from_slice(&self.theta_in.to_array());
        s[OUT_OFFSET..V_INDEX].copy_from_slice(&self.theta_out.to_array());
        s[V_INDEX] = self.v;
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_names_round_trip() {
        assert_eq!(state_name(4), "in.mu2");
        assert_eq!(state_name(OUT_OFFSET + 4), "out.mu2");
        assert_eq!(state_name(V_INDEX), "v");
        for j in 0..N_STATE {
            assert_eq!(state_index(&state_name(j)), Some(j));
        }
        let s: [f64; N_STATE] = std::array::from_fn(|j| j as f64 * 0.01);
        assert_eq!(PosteriorSample::from_state(&s, 1, 2).state(), s);
    }
}
