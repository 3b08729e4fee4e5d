use std::collections::VecDeque;

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{
    ChainConfig, SamplerError, SamplerKind, SerialEnv, StepEnv, StepSchedule, DAMPING_FALLBACK, MAX_DAMPING_ATTEMPTS,
};
use crate::diagnostics::{Trace, TraceMeta};
use crate::lbfgs::{LbfgsError, LbfgsMemory};
use crate::models::Model;

/// Per-step record kept in a [`Trace`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub t: usize,
    pub eps: f64,
    /// Whether the step's curvature pair was stored; `None` when no pair was formed.
    pub pair_accepted: Option<bool>,
    /// Number of damping doublings needed to factor the metric.
    pub lambda_escalations: u32,
    pub warmup: bool,
}

/// Elementwise absolute value.
pub fn mirror(theta: &DVector<f64>) -> DVector<f64> {
    theta.map(f64::abs)
}

/// Mutable state of one chain.
///
/// The history ring keeps the most recent `2M - 1` samples (one for samplers
/// without memory), newest last; the newest entry is the current sample.
#[derive(Debug, Clone)]
pub struct ChainState {
    sampler: SamplerKind,
    memory_size: usize,
    t: usize,
    history: VecDeque<DVector<f64>>,
    history_cap: usize,
    lbfgs: LbfgsMemory,
    precond_v: DVector<f64>,
    /// Constant metric and its Cholesky factor, for `sgrld`.
    fixed_metric: Option<(DMatrix<f64>, DMatrix<f64>)>,
    mirror: bool,
}

impl ChainState {
    pub fn new(config: &ChainConfig, env: &dyn StepEnv) -> Result<Self, SamplerError> {
        let dim = env.dim();
        config.validate(dim)?;
        let init = config.init.clone().unwrap_or_else(|| DVector::zeros(dim));
        let history_cap = if config.sampler.is_quasi_newton() {
            2 * config.memory - 1
        } else {
            1
        };
        let fixed_metric = match config.sampler {
            SamplerKind::Sgrld => {
                let g_inv = env.expected_fim_inverse().ok_or_else(|| {
                    SamplerError::Unsupported("sgrld needs a model with a constant expected Fisher metric".into())
                })?;
                let chol = g_inv.clone().cholesky().ok_or_else(|| {
                    SamplerError::Unsupported("expected Fisher inverse is not positive definite".into())
                })?;
                Some((g_inv, chol.l()))
            }
            _ => None,
        };
        let mut history = VecDeque::with_capacity(history_cap + 1);
        history.push_back(init);
        Ok(Self {
            sampler: config.sampler,
            memory_size: config.memory,
            t: 0,
            history,
            history_cap,
            lbfgs: LbfgsMemory::new(dim, config.memory - 1, config.gamma, config.lambda)?,
            precond_v: DVector::zeros(dim),
            fixed_metric,
            mirror: config.mirror,
        })
    }

    /// Index of the most recent sample.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn current(&self) -> &DVector<f64> {
        self.history.back().expect("history is never empty")
    }

    /// Oldest first.
    pub fn history(&self) -> &VecDeque<DVector<f64>> {
        &self.history
    }

    pub fn lbfgs(&self) -> &LbfgsMemory {
        &self.lbfgs
    }

    pub fn precond_v(&self) -> &DVector<f64> {
        &self.precond_v
    }

    /// `θ_{t-lag}` relative to the current sample `θ_t`.
    fn lagged(&self, lag: usize) -> &DVector<f64> {
        &self.history[self.history.len() - lag]
    }

    /// The point the next `hamcmc` step moves from, `θ_{t+1-M}`.
    pub fn hamcmc_base(&self) -> &DVector<f64> {
        self.lagged(self.memory_size)
    }

    pub fn hamcmc_base_mut(&mut self) -> &mut DVector<f64> {
        let idx = self.history.len() - self.memory_size;
        &mut self.history[idx]
    }

    fn in_warmup(&self) -> bool {
        self.sampler.is_quasi_newton() && self.t < 2 * self.memory_size
    }

    fn push_history(&mut self, theta: DVector<f64>) {
        self.history.push_back(theta);
        while self.history.len() > self.history_cap {
            self.history.pop_front();
        }
        self.t += 1;
    }

    fn finish(&self, env: &dyn StepEnv, mut theta: DVector<f64>) -> Result<DVector<f64>, SamplerError> {
        if self.mirror {
            theta = mirror(&theta);
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(SamplerError::NonFinite(self.t + 1));
        }
        debug_assert_eq!(theta.len(), env.dim());
        Ok(theta)
    }

    /// Advances by one iteration with the configured sampler.
    pub fn step(&mut self, env: &mut dyn StepEnv, schedule: &StepSchedule) -> Result<StepInfo, SamplerError> {
        match self.sampler {
            SamplerKind::Sgld => self.sgld_step(env, schedule),
            SamplerKind::Psgld { alpha, lambda_p } => self.psgld_step(env, schedule, alpha, lambda_p),
            SamplerKind::Sgrld => self.sgrld_step(env, schedule),
            SamplerKind::NaiveQn => self.naive_qn_step(env, schedule),
            SamplerKind::Hamcmc => self.hamcmc_step(env, schedule),
        }
    }

    fn info(&self, eps: f64) -> StepInfo {
        StepInfo {
            t: self.t + 1,
            eps,
            pair_accepted: None,
            lambda_escalations: 0,
            warmup: false,
        }
    }

    /// `θ_t = θ_{t-1} - ε_t ∇Ũ(θ_{t-1}) + N(0, 2ε_t I)`.
    pub fn sgld_step(&mut self, env: &mut dyn StepEnv, schedule: &StepSchedule) -> Result<StepInfo, SamplerError> {
        let eps = schedule.step(self.t + 1);
        let batch = env.draw_batch()?;
        let z = env.standard_normal();
        let prev = self.current();
        let g = env.gradient(prev, &batch)?.grad;
        let root = (2.0 * eps).sqrt();
        let theta = DVector::from_fn(prev.len(), |i, _| prev[i] - eps * g[i] + root * z[i]);
        let theta = self.finish(env, theta)?;
        let info = self.info(eps);
        self.push_history(theta);
        Ok(info)
    }

    /// Diagonal RMSprop-style preconditioning without the correction drift:
    /// `v ← αv + (1-α) ḡ∘ḡ`, `H = diag(1/(λ_p + √v))`.
    pub fn psgld_step(
        &mut self,
        env: &mut dyn StepEnv,
        schedule: &StepSchedule,
        alpha: f64,
        lambda_p: f64,
    ) -> Result<StepInfo, SamplerError> {
        let eps = schedule.step(self.t + 1);
        let batch = env.draw_batch()?;
        let z = env.standard_normal();
        let prev = self.history.back().expect("history is never empty");
        let parts = env.gradient(prev, &batch)?;
        for (v, g) in self.precond_v.iter_mut().zip(parts.lik_mean.iter()) {
            *v = alpha * *v + (1.0 - alpha) * g * g;
        }
        let root = (2.0 * eps).sqrt();
        let v = &self.precond_v;
        let theta = DVector::from_fn(prev.len(), |i, _| {
            let h = 1.0 / (lambda_p + v[i].sqrt());
            prev[i] - eps * (h * parts.grad[i]) + root * (h.sqrt() * z[i])
        });
        let theta = self.finish(env, theta)?;
        let info = self.info(eps);
        self.push_history(theta);
        Ok(info)
    }

    /// Constant metric `G⁻¹`: `θ_t = θ_{t-1} - ε_t G⁻¹∇Ũ + √(2ε_t) L z`, `L Lᵀ = G⁻¹`.
    pub fn sgrld_step(&mut self, env: &mut dyn StepEnv, schedule: &StepSchedule) -> Result<StepInfo, SamplerError> {
        let (g_inv, chol) = self
            .fixed_metric
            .as_ref()
            .ok_or_else(|| SamplerError::Unsupported("sgrld state was built for another sampler".into()))?;
        let eps = schedule.step(self.t + 1);
        let batch = env.draw_batch()?;
        let z = env.standard_normal();
        let prev = self.current();
        let g = env.gradient(prev, &batch)?.grad;
        let drift = g_inv * g;
        let noise = chol * z;
        let root = (2.0 * eps).sqrt();
        let theta = DVector::from_fn(prev.len(), |i, _| prev[i] - eps * drift[i] + root * noise[i]);
        let theta = self.finish(env, theta)?;
        let info = self.info(eps);
        self.push_history(theta);
        Ok(info)
    }

    /// Quasi-Newton Langevin step from `θ_{t-1}` with a metric built from
    /// `θ_{t-M..t-1}`. The metric depends on the point being moved, so the
    /// chain does not target the posterior; kept for comparison.
    pub fn naive_qn_step(&mut self, env: &mut dyn StepEnv, schedule: &StepSchedule) -> Result<StepInfo, SamplerError> {
        self.quasi_newton_step(env, schedule, 1)
    }

    /// Hessian-approximated step: moves `θ_{t-M}` with a metric built only
    /// from the pairs formed at iterations `t-M+1..t-1`, none of which involve
    /// `θ_{t-M}`. Afterwards the pair `s = θ_t - θ_{t-M}`,
    /// `y = ∇Ũ_Ω(θ_t) - ∇Ũ_Ω(θ_{t-M}) + λs` is formed on the same batch `Ω`.
    pub fn hamcmc_step(&mut self, env: &mut dyn StepEnv, schedule: &StepSchedule) -> Result<StepInfo, SamplerError> {
        self.quasi_newton_step(env, schedule, self.memory_size)
    }

    fn quasi_newton_step(
        &mut self,
        env: &mut dyn StepEnv,
        schedule: &StepSchedule,
        lag: usize,
    ) -> Result<StepInfo, SamplerError> {
        if self.in_warmup() {
            return self.warmup_step(env, schedule, lag);
        }
        let t = self.t + 1;
        let eps = schedule.step(t);
        self.lbfgs.retain_since(self.oldest_valid_tag(t));
        let batch = env.draw_batch()?;
        let z = env.standard_normal();
        let base = self.lagged(lag).clone();
        let g_base = env.gradient(&base, &batch)?.grad;
        let (xi, eta, escalations) = self.metric_products(env, &g_base, &z, t)?;
        let root = (2.0 * eps).sqrt();
        let theta = DVector::from_fn(base.len(), |i, _| base[i] - eps * xi[i] + root * eta[i]);
        let theta = self.finish(env, theta)?;
        let accepted = self.form_pair(env, &theta, &base, &batch, &g_base, t)?;
        let mut info = self.info(eps);
        info.pair_accepted = accepted;
        info.lambda_escalations = escalations;
        self.push_history(theta);
        Ok(info)
    }

    /// Pairs usable at iteration `t` were formed at `t-M+1..t-1`.
    fn oldest_valid_tag(&self, t: usize) -> u64 {
        (t + 1).saturating_sub(self.memory_size) as u64
    }

    /// The first `2M` samples: Langevin steps preconditioned by the initial
    /// metric `γI`, forming pairs once they are needed by the main loop.
    fn warmup_step(
        &mut self,
        env: &mut dyn StepEnv,
        schedule: &StepSchedule,
        lag: usize,
    ) -> Result<StepInfo, SamplerError> {
        let t = self.t + 1;
        let eps = schedule.step(t);
        let gamma = self.lbfgs.gamma();
        let sqrt_gamma = gamma.sqrt();
        let batch = env.draw_batch()?;
        let z = env.standard_normal();
        let prev = self.current().clone();
        let g = env.gradient(&prev, &batch)?.grad;
        let root = (2.0 * eps).sqrt();
        let theta = DVector::from_fn(prev.len(), |i, _| {
            prev[i] - eps * (g[i] * gamma) + root * (z[i] * sqrt_gamma)
        });
        let theta = self.finish(env, theta)?;
        let mut info = self.info(eps);
        info.warmup = true;
        // Pairs from before iteration M + 2 would be stale when the main loop starts.
        if t >= self.memory_size + 2 {
            let base = self.lagged(lag).clone();
            let g_base = if lag == 1 { g } else { env.gradient(&base, &batch)?.grad };
            info.pair_accepted = self.form_pair(env, &theta, &base, &batch, &g_base, t)?;
        }
        self.push_history(theta);
        Ok(info)
    }

    fn form_pair(
        &mut self,
        env: &mut dyn StepEnv,
        theta: &DVector<f64>,
        base: &DVector<f64>,
        batch: &crate::models::Minibatch,
        g_base: &DVector<f64>,
        t: usize,
    ) -> Result<Option<bool>, SamplerError> {
        let s = theta - base;
        if s.iter().all(|&v| v == 0.0) {
            return Ok(Some(false));
        }
        let g_new = env.gradient(theta, batch)?.grad;
        let y_raw = g_new - g_base;
        Ok(Some(self.lbfgs.push_pair_with(env.inner(), &s, &y_raw, t as u64)?))
    }

    /// `(H g, S z, escalations)` for the current memory, doubling the damping
    /// when the square-root factorization degenerates.
    fn metric_products(
        &self,
        env: &dyn StepEnv,
        g: &DVector<f64>,
        z: &DVector<f64>,
        t: usize,
    ) -> Result<(DVector<f64>, DVector<f64>, u32), SamplerError> {
        let ip = env.inner();
        let attempt = |mem: &LbfgsMemory| -> Result<(DVector<f64>, DVector<f64>), LbfgsError> {
            let factor = mem.sqrt_factor_with(ip)?;
            let eta = factor.apply(ip, z);
            let xi = mem.apply_h_with(ip, g)?;
            if eta.iter().chain(xi.iter()).any(|x| !x.is_finite()) {
                return Err(LbfgsError::DegenerateMetric {
                    pair: mem.len(),
                    value: f64::NAN,
                });
            }
            Ok((xi, eta))
        };
        match attempt(&self.lbfgs) {
            Ok((xi, eta)) => return Ok((xi, eta, 0)),
            Err(LbfgsError::DegenerateMetric { .. } | LbfgsError::NonPositiveCurvature { .. }) => {}
            Err(e) => return Err(e.into()),
        }
        let lambda = self.lbfgs.lambda();
        let start = if lambda > 0.0 { lambda } else { DAMPING_FALLBACK };
        for k in 1..=MAX_DAMPING_ATTEMPTS {
            let extra = start * 2f64.powi(k as i32) - lambda;
            warn!(
                "iteration {t}: degenerate metric, retrying with damping {}",
                lambda + extra
            );
            let damped = self.lbfgs.with_extra_damping(ip, extra);
            match attempt(&damped) {
                Ok((xi, eta)) => return Ok((xi, eta, k)),
                Err(LbfgsError::DegenerateMetric { .. } | LbfgsError::NonPositiveCurvature { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Err(SamplerError::DegenerateMetric {
            iteration: t,
            attempts: MAX_DAMPING_ATTEMPTS,
        })
    }

    /// `(H v, S z)` with the metric the next quasi-Newton step would use.
    pub fn preview_metric(
        &self,
        env: &dyn StepEnv,
        v: &DVector<f64>,
        z: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), SamplerError> {
        let mut mem = self.lbfgs.clone();
        mem.retain_since(self.oldest_valid_tag(self.t + 1));
        let scratch = Self {
            lbfgs: mem,
            ..self.clone()
        };
        let (xi, eta, _) = scratch.metric_products(env, v, z, self.t + 1)?;
        Ok((xi, eta))
    }
}

/// Runs a serial chain of `config.iterations` samples over `model`.
pub fn run_chain(config: &ChainConfig, model: &dyn Model) -> Result<Trace, SamplerError> {
    let mut env = SerialEnv::new(model, config.batch, config.seed);
    run_chain_with_env(config, &mut env)
}

pub fn run_chain_with_env(config: &ChainConfig, env: &mut dyn StepEnv) -> Result<Trace, SamplerError> {
    run_chain_observed(config, env, &mut |_, _| {})
}

/// Like [`run_chain_with_env`], calling `observer` after every step.
pub fn run_chain_observed(
    config: &ChainConfig,
    env: &mut dyn StepEnv,
    observer: &mut dyn FnMut(&DVector<f64>, &StepInfo),
) -> Result<Trace, SamplerError> {
    let mut state = ChainState::new(config, env)?;
    let t_total = config.iterations;
    let mut trace = Trace {
        samples: Vec::with_capacity(if config.keep_samples { t_total } else { 0 }),
        eps: Vec::with_capacity(t_total),
        burn_in: config.burn_in,
        steps: Vec::with_capacity(t_total),
        telemetry: Vec::new(),
        meta: TraceMeta {
            sampler: config.sampler.name().to_string(),
            config: format!("{config:?}"),
        },
    };
    for _ in 0..t_total {
        let info = state.step(env, &config.schedule)?;
        observer(state.current(), &info);
        if config.keep_samples {
            trace.samples.push(state.current().clone());
        }
        trace.eps.push(info.eps);
        trace.steps.push(info);
    }
    Ok(trace)
}
