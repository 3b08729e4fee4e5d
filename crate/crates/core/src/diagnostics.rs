//! Step-size weighted Monte Carlo estimators over traces.
//!
//! Post-burn-in samples are averaged with their step sizes as weights,
//! `ĥ = Σ ε_t h(θ_t) / Σ ε_t`, which is the estimator whose bias and MSE vanish
//! for decreasing step sizes.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::dist_sim::RoundTelemetry;
use crate::models::{GaussianMfModel, LinearGaussianModel, ModelError, Observation};
use crate::samplers::{SamplerError, StepInfo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("no samples after burn-in")]
    EmptyTrace,
    #[error("need at least {needed} samples after burn-in, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceMeta {
    pub sampler: String,
    /// Debug rendering of the chain configuration.
    pub config: String,
}

/// Output of a chain: samples with their step sizes and per-step records.
///
/// `samples` is either empty (samples were streamed, not stored) or has the
/// same length as `eps`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub samples: Vec<DVector<f64>>,
    pub eps: Vec<f64>,
    pub burn_in: usize,
    pub steps: Vec<StepInfo>,
    /// Round-level records of distributed runs.
    pub telemetry: Vec<RoundTelemetry>,
    pub meta: TraceMeta,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    /// `(θ_t, ε_t)` after burn-in.
    pub fn retained(&self) -> impl Iterator<Item = (&DVector<f64>, f64)> {
        self.samples.iter().zip(self.eps.iter().copied()).skip(self.burn_in)
    }

    pub fn retained_len(&self) -> usize {
        self.samples.len().saturating_sub(self.burn_in)
    }

    /// The first `t` samples with burn-in set to `burn_in`.
    pub fn prefix(&self, t: usize, burn_in: usize) -> Trace {
        Trace {
            samples: self.samples[..t].to_vec(),
            eps: self.eps[..t].to_vec(),
            burn_in,
            steps: self.steps.get(..t).map(<[_]>::to_vec).unwrap_or_default(),
            telemetry: Vec::new(),
            meta: self.meta.clone(),
        }
    }

    /// Number of stored curvature pairs that were rejected.
    pub fn rejected_pairs(&self) -> usize {
        self.steps.iter().filter(|s| s.pair_accepted == Some(false)).count()
    }

    pub fn lambda_escalations(&self) -> u64 {
        self.steps.iter().map(|s| s.lambda_escalations as u64).sum()
    }
}

/// `Σ ε_t h(θ_t) / Σ ε_t` over post-burn-in samples.
pub fn weighted_mean<F>(trace: &Trace, h: F) -> Result<f64, DiagnosticsError>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if trace.retained_len() == 0 {
        return Err(DiagnosticsError::EmptyTrace);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (theta, eps) in trace.retained() {
        num += eps * h(theta);
        den += eps;
    }
    Ok(num / den)
}

/// Weighted mean of the samples themselves.
pub fn weighted_mean_vector(trace: &Trace) -> Result<DVector<f64>, DiagnosticsError> {
    let mut it = trace.retained().peekable();
    let dim = it.peek().ok_or(DiagnosticsError::EmptyTrace)?.0.len();
    let mut acc = DVector::zeros(dim);
    let mut den = 0.0;
    for (theta, eps) in it {
        acc.axpy(eps, theta, 1.0);
        den += eps;
    }
    Ok(acc / den)
}

/// `‖θ̄ - θ̂‖²` against the closed-form posterior mean.
pub fn posterior_mean_error(trace: &Trace, model: &LinearGaussianModel) -> Result<f64, DiagnosticsError> {
    let (mean, _) = model.analytic_posterior();
    squared_error(trace, &mean)
}

pub fn squared_error(trace: &Trace, truth: &DVector<f64>) -> Result<f64, DiagnosticsError> {
    let est = weighted_mean_vector(trace)?;
    if est.len() != truth.len() {
        return Err(ModelError::DimensionMismatch {
            expected: truth.len(),
            got: est.len(),
        }
        .into());
    }
    Ok((est - truth).norm_squared())
}

/// Step-weighted covariance `Σ ε_t (θ_t - m)(θ_t - m)ᵀ / Σ ε_t`.
pub fn empirical_cov(trace: &Trace) -> Result<DMatrix<f64>, DiagnosticsError> {
    let n = trace.retained_len();
    if n < 2 {
        return Err(DiagnosticsError::TooFewSamples { needed: 2, got: n });
    }
    let mean = weighted_mean_vector(trace)?;
    let d = mean.len();
    let mut cov = DMatrix::zeros(d, d);
    let mut den = 0.0;
    for (theta, eps) in trace.retained() {
        let c = theta - &mean;
        for j in 0..d {
            for i in 0..=j {
                cov[(i, j)] += eps * c[i] * c[j];
            }
        }
        den += eps;
    }
    for j in 0..d {
        for i in 0..=j {
            let v = cov[(i, j)] / den;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(cov)
}

/// Replicated estimates at one chain length.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasMseRow {
    pub iterations: usize,
    /// `E[θ̂] - θ̄` estimated over replicates, per coordinate.
    pub bias_per_coord: DVector<f64>,
    /// `‖E[θ̂] - θ̄‖`.
    pub bias: f64,
    /// `E‖θ̂ - θ̄‖²`.
    pub mse: f64,
    /// `‖θ̂ - θ̄‖²` of each replicate, in replicate order.
    pub sq_errors: Vec<f64>,
}

/// Runs `replicates` chains per chain length and summarizes the estimator's
/// bias and mean squared error against `truth`.
///
/// `run(T, replicate)` must produce a trace of length `T`. Replicates run in
/// parallel and are merged by replicate index.
pub fn bias_mse_curve<F>(
    truth: &DVector<f64>,
    lengths: &[usize],
    replicates: usize,
    run: F,
) -> Result<Vec<BiasMseRow>, DiagnosticsError>
where
    F: Fn(usize, usize) -> Result<Trace, SamplerError> + Sync,
{
    if replicates == 0 {
        return Err(DiagnosticsError::InvalidArgument("replicates must be positive".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DiagnosticsError::InvalidArgument(
            "chain lengths must be increasing".into(),
        ));
    }
    lengths
        .iter()
        .map(|&iterations| {
            let estimates: Vec<DVector<f64>> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let trace = run(iterations, r)?;
                    weighted_mean_vector(&trace)
                })
                .collect::<Result<_, DiagnosticsError>>()?;
            let mut mean_dev = DVector::zeros(truth.len());
            let mut sq_errors = Vec::with_capacity(replicates);
            for est in &estimates {
                let dev = est - truth;
                sq_errors.push(dev.norm_squared());
                mean_dev += dev;
            }
            mean_dev /= replicates as f64;
            Ok(BiasMseRow {
                iterations,
                bias: mean_dev.norm(),
                bias_per_coord: mean_dev,
                mse: sq_errors.iter().sum::<f64>() / replicates as f64,
                sq_errors,
            })
        })
        .collect()
}

fn rmse_of(pred: &[f64], test: &[Observation]) -> Result<f64, DiagnosticsError> {
    if test.is_empty() {
        return Err(DiagnosticsError::EmptyTestSet);
    }
    let sse: f64 = pred.iter().zip(test).map(|(p, o)| (p - o.value).powi(2)).sum();
    Ok((sse / test.len() as f64).sqrt())
}

/// RMSE of the step-weighted posterior predictive mean on held-out entries.
pub fn rmse(model: &GaussianMfModel, trace: &Trace, test: &[Observation]) -> Result<f64, DiagnosticsError> {
    if test.is_empty() {
        return Err(DiagnosticsError::EmptyTestSet);
    }
    let mut running = RunningPrediction::new(model, test)?;
    for (theta, eps) in trace.retained() {
        running.add(theta, eps)?;
    }
    running.rmse()
}

/// RMSE of the predictions of a single sample.
pub fn point_rmse(
    model: &GaussianMfModel,
    theta: &DVector<f64>,
    test: &[Observation],
) -> Result<f64, DiagnosticsError> {
    if test.is_empty() {
        return Err(DiagnosticsError::EmptyTestSet);
    }
    let pairs: Vec<_> = test.iter().map(|o| (o.row, o.col)).collect();
    rmse_of(model.predict(theta, &pairs)?.as_slice(), test)
}

/// Streaming step-weighted predictive mean over a fixed test set, for runs
/// too large to keep every sample.
#[derive(Debug, Clone)]
pub struct RunningPrediction<'a> {
    model: &'a GaussianMfModel,
    test: &'a [Observation],
    pairs: Vec<(usize, usize)>,
    sum: DVector<f64>,
    weight: f64,
}

impl<'a> RunningPrediction<'a> {
    pub fn new(model: &'a GaussianMfModel, test: &'a [Observation]) -> Result<Self, DiagnosticsError> {
        let pairs: Vec<_> = test.iter().map(|o| (o.row, o.col)).collect();
        // Validates indices once up front.
        model.predict(&DVector::zeros(crate::models::Model::dim(model)), &pairs)?;
        Ok(Self {
            model,
            test,
            sum: DVector::zeros(pairs.len()),
            pairs,
            weight: 0.0,
        })
    }

    pub fn add(&mut self, theta: &DVector<f64>, eps: f64) -> Result<(), DiagnosticsError> {
        let p = self.model.predict(theta, &self.pairs)?;
        self.sum.axpy(eps, &p, 1.0);
        self.weight += eps;
        Ok(())
    }

    pub fn rmse(&self) -> Result<f64, DiagnosticsError> {
        if self.weight == 0.0 {
            return Err(DiagnosticsError::EmptyTrace);
        }
        let mean = &self.sum / self.weight;
        rmse_of(mean.as_slice(), self.test)
    }
}
