use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::SamplerError;
use crate::lbfgs::{Euclidean, InnerProduct};
use crate::models::{GradientParts, Minibatch, Model};
use crate::rng::{stream_rng, BATCH_STREAM, NOISE_STREAM};

/// Everything a sampler step needs from the outside world: data batches,
/// gradients, Gaussian noise and inner products.
///
/// A serial chain uses [`SerialEnv`]; the distributed simulator provides an
/// environment whose gradients are computed block-wise by workers and whose
/// inner products are reductions over worker shards.
pub trait StepEnv {
    fn dim(&self) -> usize;

    /// Draws the data subsample for the next iteration.
    fn draw_batch(&mut self) -> Result<Minibatch, SamplerError>;

    fn gradient(&mut self, theta: &DVector<f64>, batch: &Minibatch) -> Result<GradientParts, SamplerError>;

    /// A fresh `N(0, I)` vector.
    fn standard_normal(&mut self) -> DVector<f64>;

    fn inner(&self) -> &dyn InnerProduct;

    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// Every datum once per iteration; consumes no randomness.
    Full,
    /// `N_Ω` indices drawn uniformly with replacement.
    WithReplacement(usize),
}

/// Single-process environment over a [`Model`], with separate batch and noise
/// streams derived from one seed.
#[derive(Clone)]
pub struct SerialEnv<'m> {
    model: &'m dyn Model,
    batch: BatchSize,
    rng_batch: ChaCha8Rng,
    rng_noise: ChaCha8Rng,
}

impl<'m> SerialEnv<'m> {
    pub fn new(model: &'m dyn Model, batch: BatchSize, seed: u64) -> Self {
        Self {
            model,
            batch,
            rng_batch: stream_rng(seed, BATCH_STREAM, 0),
            rng_noise: stream_rng(seed, NOISE_STREAM, 0),
        }
    }

    pub fn model(&self) -> &'m dyn Model {
        self.model
    }
}

impl StepEnv for SerialEnv<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn draw_batch(&mut self) -> Result<Minibatch, SamplerError> {
        let n = self.model.num_data();
        Ok(match self.batch {
            BatchSize::Full => Minibatch::full(n),
            BatchSize::WithReplacement(size) => Minibatch::draw(n, size, &mut self.rng_batch),
        })
    }

    fn gradient(&mut self, theta: &DVector<f64>, batch: &Minibatch) -> Result<GradientParts, SamplerError> {
        Ok(self.model.gradient_parts(theta, batch)?)
    }

    fn standard_normal(&mut self) -> DVector<f64> {
        let rng = &mut self.rng_noise;
        DVector::from_fn(self.model.dim(), |_, _| rng.sample(StandardNormal))
    }

    fn inner(&self) -> &dyn InnerProduct {
        &Euclidean
    }

    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        self.model.expected_fim_inverse()
    }
}
