//! Target posteriors.
//!
//! Every model exposes its potential `U(θ) = -[log p(θ) + Σ log p(x_n | θ)]`
//! split into a prior gradient and per-datum likelihood gradients, so that
//! samplers (and the distributed simulator) can assemble unbiased minibatch
//! estimates of `∇U` themselves.
//!
//! Additive constants that do not depend on `θ` are dropped from every
//! potential: the `log 2π` and `log σ²` normalizers of each Gaussian factor.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty minibatch")]
    EmptyBatch,
    #[error("index {index} out of bounds ({bound})")]
    IndexOutOfBounds { index: usize, bound: usize },
    #[error("duplicate observation at ({0}, {1})")]
    DuplicateEntry(usize, usize),
    #[error("invalid model parameter: {0}")]
    InvalidParameter(String),
}

/// Data indices drawn uniformly with replacement (0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
}

impl Minibatch {
    pub fn new(indices: Vec<usize>) -> Self {
        Self { indices }
    }

    /// Every index exactly once, in order.
    pub fn full(n: usize) -> Self {
        Self {
            indices: (0..n).collect(),
        }
    }

    pub fn draw<R: Rng + ?Sized>(n: usize, size: usize, rng: &mut R) -> Self {
        let indices = if n == 0 {
            Vec::new()
        } else {
            (0..size).map(|_| rng.random_range(0..n)).collect()
        };
        Self { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// A stochastic gradient together with the batch-mean likelihood gradient
/// that diagonal preconditioners consume.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientParts {
    /// `∇Ũ(θ) = ∇(-log p(θ)) + (N / N_Ω) Σ_{n∈Ω} ∇(-log p(x_n | θ))`.
    pub grad: DVector<f64>,
    /// `(1 / N_Ω) Σ_{n∈Ω} ∇(-log p(x_n | θ))`; zero for an empty batch.
    pub lik_mean: DVector<f64>,
}

impl GradientParts {
    /// Combines a prior gradient with a summed likelihood gradient over a
    /// batch of `batch_len` data out of `num_data`.
    ///
    /// Serial and distributed gradient paths both go through here, so the
    /// arithmetic is identical bit for bit.
    pub fn assemble(prior: DVector<f64>, lik_sum: DVector<f64>, num_data: usize, batch_len: usize) -> Self {
        if batch_len == 0 {
            let lik_mean = DVector::zeros(prior.len());
            return Self { grad: prior, lik_mean };
        }
        let scale = num_data as f64 / batch_len as f64;
        let inv = 1.0 / batch_len as f64;
        let mut grad = prior;
        for (g, l) in grad.iter_mut().zip(lik_sum.iter()) {
            *g += scale * l;
        }
        let lik_mean = lik_sum.map(|l| l * inv);
        Self { grad, lik_mean }
    }
}

pub trait Model: Send + Sync {
    fn dim(&self) -> usize;

    fn num_data(&self) -> usize;

    fn potential(&self, theta: &DVector<f64>) -> Result<f64, ModelError>;

    /// `∇(-log p(θ))`.
    fn prior_grad(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Adds `∇(-log p(x_n | θ))` into `out`. Callers validate `index`.
    fn accumulate_lik_grad(&self, theta: &DVector<f64>, index: usize, out: &mut DVector<f64>);

    /// Constant inverse expected Fisher information, for models that have one.
    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        None
    }

    fn check_dim(&self, theta: &DVector<f64>) -> Result<(), ModelError> {
        if theta.len() != self.dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.dim(),
                got: theta.len(),
            });
        }
        Ok(())
    }

    fn gradient_parts(&self, theta: &DVector<f64>, batch: &Minibatch) -> Result<GradientParts, ModelError> {
        self.check_dim(theta)?;
        let n = self.num_data();
        if batch.is_empty() && n > 0 {
            return Err(ModelError::EmptyBatch);
        }
        if let Some(&bad) = batch.indices.iter().find(|&&i| i >= n) {
            return Err(ModelError::IndexOutOfBounds { index: bad, bound: n });
        }
        let mut lik = DVector::zeros(self.dim());
        for &i in &batch.indices {
            self.accumulate_lik_grad(theta, i, &mut lik);
        }
        Ok(GradientParts::assemble(self.prior_grad(theta), lik, n, batch.len()))
    }

    /// Unbiased minibatch estimate of `∇U(θ)`.
    fn stoch_grad(&self, theta: &DVector<f64>, batch: &Minibatch) -> Result<DVector<f64>, ModelError> {
        self.gradient_parts(theta, batch).map(|p| p.grad)
    }

    fn full_grad(&self, theta: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
        self.stoch_grad(theta, &Minibatch::full(self.num_data()))
    }
}

fn check_variance(name: &str, v: f64) -> Result<(), ModelError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(ModelError::InvalidParameter(format!(
            "{name} must be positive and finite, got {v}"
        )));
    }
    Ok(())
}

/// `θ ~ N(0, I)`, `x_n | θ ~ N(a_nᵀθ, σ²)`.
///
/// Potential: `θᵀθ/2 + Σ_n (x_n - a_nᵀθ)² / (2σ²)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    dim: usize,
    /// Row-major `N × D`.
    design: Vec<f64>,
    obs: Vec<f64>,
    sigma_x2: f64,
}

/// Parameters of the synthetic linear-Gaussian generator.
///
/// Rows are `a_n = √c · g_n · u + √(1-c) · e_n` with `u = (1,…,1)/√D`,
/// `g_n ~ N(0,1)` and `e_n ~ N(0, I)`, so `E[a aᵀ] = c·uuᵀ + (1-c)·I`.
/// Larger `correlation` (`c`) concentrates the data along `u`, which makes the
/// posterior both correlated and badly scaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearGaussianSpec {
    pub dim: usize,
    pub num_data: usize,
    pub sigma_x2: f64,
    pub correlation: f64,
}

/// A generated instance together with the parameter that produced its data.
#[derive(Debug, Clone)]
pub struct SyntheticLinearGaussian {
    pub model: LinearGaussianModel,
    pub theta_true: DVector<f64>,
}

impl LinearGaussianModel {
    pub fn new(design: DMatrix<f64>, obs: DVector<f64>, sigma_x2: f64) -> Result<Self, ModelError> {
        check_variance("sigma_x2", sigma_x2)?;
        if design.nrows() != obs.len() {
            return Err(ModelError::DimensionMismatch {
                expected: design.nrows(),
                got: obs.len(),
            });
        }
        if design.ncols() == 0 {
            return Err(ModelError::InvalidParameter("dimension must be positive".into()));
        }
        let dim = design.ncols();
        let mut rows = Vec::with_capacity(design.nrows() * dim);
        for r in design.row_iter() {
            rows.extend(r.iter().copied());
        }
        Ok(Self {
            dim,
            design: rows,
            obs: obs.iter().copied().collect(),
            sigma_x2,
        })
    }

    pub fn generate<R: Rng + ?Sized>(
        spec: &LinearGaussianSpec,
        rng: &mut R,
    ) -> Result<SyntheticLinearGaussian, ModelError> {
        let LinearGaussianSpec {
            dim,
            num_data,
            sigma_x2,
            correlation,
        } = *spec;
        if dim == 0 {
            return Err(ModelError::InvalidParameter("dimension must be positive".into()));
        }
        check_variance("sigma_x2", sigma_x2)?;
        if !(0.0..=1.0).contains(&correlation) {
            return Err(ModelError::InvalidParameter(format!(
                "correlation must lie in [0, 1], got {correlation}"
            )));
        }
        let theta_true = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let u = 1.0 / (dim as f64).sqrt();
        let shared = correlation.sqrt();
        let own = (1.0 - correlation).sqrt();
        let noise = sigma_x2.sqrt();
        let mut design = DMatrix::zeros(num_data, dim);
        let mut obs = DVector::zeros(num_data);
        for n in 0..num_data {
            let g: f64 = rng.sample(StandardNormal);
            for d in 0..dim {
                let e: f64 = rng.sample(StandardNormal);
                design[(n, d)] = shared * g * u + own * e;
            }
            let mean = design.row(n).transpose().dot(&theta_true);
            obs[n] = mean + noise * rng.sample::<f64, _>(StandardNormal);
        }
        Ok(SyntheticLinearGaussian {
            model: Self::new(design, obs, sigma_x2)?,
            theta_true,
        })
    }

    pub fn sigma_x2(&self) -> f64 {
        self.sigma_x2
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.design[n * self.dim..(n + 1) * self.dim]
    }

    pub fn observations(&self) -> &[f64] {
        &self.obs
    }

    pub fn design_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.obs.len(), self.dim, &self.design)
    }

    fn precision(&self) -> DMatrix<f64> {
        let a = self.design_matrix();
        let mut p = a.transpose() * &a / self.sigma_x2;
        for d in 0..self.dim {
            p[(d, d)] += 1.0;
        }
        p
    }

    /// Closed-form posterior `N(mean, cov)` with `cov = (AᵀA/σ² + I)⁻¹` and
    /// `mean = cov · Aᵀx / σ²`.
    pub fn analytic_posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        let cov = self.expected_fim_inverse_matrix();
        let a = self.design_matrix();
        let x = DVector::from_column_slice(&self.obs);
        let rhs = a.transpose() * x / self.sigma_x2;
        let mean = &cov * rhs;
        (mean, cov)
    }

    /// The inverse expected Fisher information of the full problem. For this
    /// model it is constant and equal to the posterior covariance.
    pub fn expected_fim_inverse_matrix(&self) -> DMatrix<f64> {
        // The precision is I plus a Gram matrix, so Cholesky cannot fail.
        let chol = self
            .precision()
            .cholesky()
            .expect("identity-shifted Gram matrix is positive definite");
        let inv = chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }
}

impl Model for LinearGaussianModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_data(&self) -> usize {
        self.obs.len()
    }

    fn potential(&self, theta: &DVector<f64>) -> Result<f64, ModelError> {
        self.check_dim(theta)?;
        let mut u = 0.5 * theta.dot(theta);
        for (n, &x) in self.obs.iter().enumerate() {
            let r = x - dot(self.row(n), theta.as_slice());
            u += r * r / (2.0 * self.sigma_x2);
        }
        Ok(u)
    }

    fn prior_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        theta.clone()
    }

    fn accumulate_lik_grad(&self, theta: &DVector<f64>, index: usize, out: &mut DVector<f64>) {
        let a = self.row(index);
        let r = (dot(a, theta.as_slice()) - self.obs[index]) / self.sigma_x2;
        for (o, &ad) in out.iter_mut().zip(a) {
            *o += r * ad;
        }
    }

    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        Some(self.expected_fim_inverse_matrix())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One observed matrix entry (0-based indices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `W_ik ~ N(0, σ_w²)`, `H_kj ~ N(0, σ_h²)`, `X_ij ~ N(Σ_k W_ik H_kj, σ_x²)`
/// over the observed entries only.
///
/// `θ` is `W` flattened row-major (`I × K`) followed by `H` flattened row-major
/// (`K × J`). Potential: `‖W‖²/(2σ_w²) + ‖H‖²/(2σ_h²) + Σ_obs (x - ŵ·ĥ)²/(2σ_x²)`.
#[derive(Debug, Clone)]
pub struct GaussianMfModel {
    rows: usize,
    cols: usize,
    rank: usize,
    observed: Vec<Observation>,
    sigma_w2: f64,
    sigma_h2: f64,
    sigma_x2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfPriors {
    pub sigma_w2: f64,
    pub sigma_h2: f64,
    pub sigma_x2: f64,
}

impl Default for MfPriors {
    fn default() -> Self {
        Self {
            sigma_w2: 1.0,
            sigma_h2: 1.0,
            sigma_x2: 1.0,
        }
    }
}

impl GaussianMfModel {
    pub fn new(
        rows: usize,
        cols: usize,
        rank: usize,
        observed: Vec<Observation>,
        priors: MfPriors,
    ) -> Result<Self, ModelError> {
        if rows == 0 || cols == 0 || rank == 0 {
            return Err(ModelError::InvalidParameter(
                "rows, cols and rank must be positive".into(),
            ));
        }
        check_variance("sigma_w2", priors.sigma_w2)?;
        check_variance("sigma_h2", priors.sigma_h2)?;
        check_variance("sigma_x2", priors.sigma_x2)?;
        let mut seen = HashSet::with_capacity(observed.len());
        for o in &observed {
            if o.row >= rows {
                return Err(ModelError::IndexOutOfBounds {
                    index: o.row,
                    bound: rows,
                });
            }
            if o.col >= cols {
                return Err(ModelError::IndexOutOfBounds {
                    index: o.col,
                    bound: cols,
                });
            }
            if !seen.insert((o.row, o.col)) {
                return Err(ModelError::DuplicateEntry(o.row, o.col));
            }
        }
        Ok(Self {
            rows,
            cols,
            rank,
            observed,
            sigma_w2: priors.sigma_w2,
            sigma_h2: priors.sigma_h2,
            sigma_x2: priors.sigma_x2,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn observed(&self) -> &[Observation] {
        &self.observed
    }

    #[inline]
    pub fn w_index(&self, i: usize, k: usize) -> usize {
        i * self.rank + k
    }

    #[inline]
    pub fn h_index(&self, k: usize, j: usize) -> usize {
        self.rows * self.rank + k * self.cols + j
    }

    #[inline]
    fn predict_unchecked(&self, theta: &[f64], i: usize, j: usize) -> f64 {
        (0..self.rank)
            .map(|k| theta[self.w_index(i, k)] * theta[self.h_index(k, j)])
            .sum()
    }

    /// `Σ_k W_ik H_kj` for each `(i, j)`.
    pub fn predict(&self, theta: &DVector<f64>, pairs: &[(usize, usize)]) -> Result<DVector<f64>, ModelError> {
        self.check_dim(theta)?;
        let mut out = DVector::zeros(pairs.len());
        for (o, &(i, j)) in out.iter_mut().zip(pairs) {
            if i >= self.rows {
                return Err(ModelError::IndexOutOfBounds {
                    index: i,
                    bound: self.rows,
                });
            }
            if j >= self.cols {
                return Err(ModelError::IndexOutOfBounds {
                    index: j,
                    bound: self.cols,
                });
            }
            *o = self.predict_unchecked(theta.as_slice(), i, j);
        }
        Ok(out)
    }
}

impl Model for GaussianMfModel {
    fn dim(&self) -> usize {
        (self.rows + self.cols) * self.rank
    }

    fn num_data(&self) -> usize {
        self.observed.len()
    }

    fn potential(&self, theta: &DVector<f64>) -> Result<f64, ModelError> {
        self.check_dim(theta)?;
        let split = self.rows * self.rank;
        let (w, h) = theta.as_slice().split_at(split);
        let mut u = dot(w, w) / (2.0 * self.sigma_w2) + dot(h, h) / (2.0 * self.sigma_h2);
        for o in &self.observed {
            let r = o.value - self.predict_unchecked(theta.as_slice(), o.row, o.col);
            u += r * r / (2.0 * self.sigma_x2);
        }
        Ok(u)
    }

    fn prior_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        let split = self.rows * self.rank;
        DVector::from_fn(theta.len(), |d, _| {
            if d < split {
                theta[d] / self.sigma_w2
            } else {
                theta[d] / self.sigma_h2
            }
        })
    }

    fn accumulate_lik_grad(&self, theta: &DVector<f64>, index: usize, out: &mut DVector<f64>) {
        let o = self.observed[index];
        let th = theta.as_slice();
        let r = (self.predict_unchecked(th, o.row, o.col) - o.value) / self.sigma_x2;
        for k in 0..self.rank {
            let wi = self.w_index(o.row, k);
            let hi = self.h_index(k, o.col);
            out[wi] += r * th[hi];
            out[hi] += r * th[wi];
        }
    }
}
