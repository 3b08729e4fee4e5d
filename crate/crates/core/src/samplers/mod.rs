//! SG-MCMC samplers.
//!
//! | kind        | update from            | metric                                   |
//! |-------------|------------------------|------------------------------------------|
//! | `sgld`      | `θ_{t-1}`              | `I`                                      |
//! | `psgld`     | `θ_{t-1}`              | RMSprop-style diagonal, no correction    |
//! | `sgrld`     | `θ_{t-1}`              | constant inverse expected Fisher         |
//! | `naive_qn`  | `θ_{t-1}`              | L-BFGS over `θ_{t-M..t-1}` (biased)      |
//! | `hamcmc`    | `θ_{t-M}`              | L-BFGS over `θ_{t-2M+1..t-1}` minus base |
//!
//! Every update has the form `θ_t = base - ε_t H ∇Ũ(base) + √(2ε_t) S z_t`
//! with `S Sᵀ = H` and `z_t ~ N(0, I)`.

mod chain;
mod env;
mod schedule;
#[cfg(test)]
mod tests;

use nalgebra::DVector;
use thiserror::Error;

pub use chain::{mirror, run_chain, run_chain_observed, run_chain_with_env, ChainState, StepInfo};
pub use env::{BatchSize, SerialEnv, StepEnv};
pub use schedule::{StepSchedule, DEFAULT_EXPONENT};

use crate::lbfgs::LbfgsError;
use crate::models::ModelError;

pub const DEFAULT_MEMORY: usize = 3;
pub const MIN_MEMORY: usize = 2;
pub const MAX_MEMORY: usize = 20;
/// Attempts at doubling the damping before a degenerate metric aborts the chain.
pub const MAX_DAMPING_ATTEMPTS: u32 = 10;
/// Starting damping for escalation when the configured `λ` is zero.
pub const DAMPING_FALLBACK: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lbfgs(#[from] LbfgsError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("degenerate metric at iteration {iteration} after {attempts} damping escalations")]
    DegenerateMetric { iteration: usize, attempts: u32 },
    #[error("non-finite sample at iteration {0}")]
    NonFinite(usize),
    #[error("distributed simulation: {0}")]
    Distributed(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplerKind {
    Sgld,
    /// `alpha` is the moving-average weight, `lambda_p` the diagonal offset.
    Psgld {
        alpha: f64,
        lambda_p: f64,
    },
    Sgrld,
    NaiveQn,
    Hamcmc,
}

impl SamplerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sgld => "sgld",
            Self::Psgld { .. } => "psgld",
            Self::Sgrld => "sgrld",
            Self::NaiveQn => "naive_qn",
            Self::Hamcmc => "hamcmc",
        }
    }

    pub fn is_quasi_newton(&self) -> bool {
        matches!(self, Self::NaiveQn | Self::Hamcmc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub sampler: SamplerKind,
    /// Number of samples `T`, warm-up included.
    pub iterations: usize,
    pub burn_in: usize,
    pub schedule: StepSchedule,
    /// L-BFGS memory `M`; `M - 1` pairs are stored.
    pub memory: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub batch: BatchSize,
    pub seed: u64,
    pub mirror: bool,
    /// Starting point; zero when absent.
    pub init: Option<DVector<f64>>,
    /// When false, traces carry step sizes and diagnostics but no samples.
    pub keep_samples: bool,
}

impl ChainConfig {
    pub fn new(sampler: SamplerKind, iterations: usize, schedule: StepSchedule) -> Self {
        Self {
            sampler,
            iterations,
            burn_in: 0,
            schedule,
            memory: DEFAULT_MEMORY,
            gamma: 1.0,
            lambda: 0.0,
            batch: BatchSize::Full,
            seed: 0,
            mirror: false,
            init: None,
            keep_samples: true,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        self.schedule.validate()?;
        if self.burn_in > self.iterations {
            return bad(format!("burn_in {} exceeds T {}", self.burn_in, self.iterations));
        }
        if !(MIN_MEMORY..=MAX_MEMORY).contains(&self.memory) {
            return bad(format!(
                "M must be chosen at least {MIN_MEMORY} and at most {MAX_MEMORY}, got {}",
                self.memory
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be nonnegative, got {}", self.lambda));
        }
        if let BatchSize::WithReplacement(0) = self.batch {
            return bad("N_omega must be positive".into());
        }
        if let SamplerKind::Psgld { alpha, lambda_p } = self.sampler {
            if !(0.0..=1.0).contains(&alpha) {
                return bad(format!("alpha must lie in [0, 1], got {alpha}"));
            }
            if !(lambda_p > 0.0 && lambda_p.is_finite()) {
                return bad(format!("lambda_p must be positive, got {lambda_p}"));
            }
        }
        if let Some(init) = &self.init {
            if init.len() != dim {
                return bad(format!("init has dimension {}, model has {dim}", init.len()));
            }
        }
        Ok(())
    }
}
