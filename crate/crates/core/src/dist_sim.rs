//! In-process simulation of block-partitioned distributed sampling for
//! matrix factorization.
//!
//! The observation matrix is cut into a `P × P` grid. Subset `k` holds the
//! blocks `(b, (b + k) mod P)`, which share no row block and no column block,
//! so `P` workers can process one subset in parallel. Worker `b` keeps the `W`
//! rows of row block `b` for the whole run; the `H` column blocks travel
//! between workers so that at subset `k` worker `b` holds column block
//! `(b + k) mod P`.
//!
//! Rounds are synchronous and run the workers in index order. Every vector
//! reduction of the samplers, including all L-BFGS scalars, goes through
//! [`ShardMap`], which sums per-worker partial dot products in worker order.
//! With `P = 1` the simulation reproduces the serial full-batch chain bit for
//! bit.

use std::cell::Cell;
use std::collections::HashSet;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::diagnostics::Trace;
use crate::lbfgs::{seq_dot, InnerProduct};
use crate::models::{GaussianMfModel, GradientParts, Minibatch, Model, Observation};
use crate::rng::{stream_rng, BATCH_STREAM, NOISE_STREAM};
use crate::samplers::{run_chain_observed, ChainConfig, SamplerError, SamplerKind, StepEnv, StepInfo};

/// Tolerance of the spot-audited reduce against a single-owner dot product,
/// relative to `‖a‖‖b‖`.
pub const DOT_AUDIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("invalid worker count {workers} for a {rows} x {cols} matrix")]
    InvalidWorkers { workers: usize, rows: usize, cols: usize },
    #[error("all subsets are empty")]
    EmptySubsets,
    #[error("shard dimension mismatch: expected {expected}, got {got}")]
    ShardMismatch { expected: usize, got: usize },
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
}

impl From<DistError> for SamplerError {
    fn from(e: DistError) -> Self {
        match e {
            DistError::Sampler(s) => s,
            other => SamplerError::Distributed(other.to_string()),
        }
    }
}

/// Block grid, strata and ownership of a partitioned observation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    pub workers: usize,
    pub rows: usize,
    pub cols: usize,
    /// `P + 1` increasing boundaries; row block `b` is `row_bounds[b]..row_bounds[b + 1]`.
    pub row_bounds: Vec<usize>,
    pub col_bounds: Vec<usize>,
    /// `subsets[k]` lists the `(row block, col block)` pairs of stratum `k`.
    pub subsets: Vec<Vec<(usize, usize)>>,
    /// Worker owning block `(b, c)`, stored at `b * P + c`.
    pub block_owner: Vec<usize>,
    /// Observation indices of block `(b, c)` in input order, stored at `b * P + c`.
    pub block_obs: Vec<Vec<usize>>,
    /// Observed entries per subset.
    pub subset_sizes: Vec<usize>,
}

fn balanced_bounds(n: usize, parts: usize) -> Vec<usize> {
    (0..=parts).map(|b| b * n / parts).collect()
}

fn block_of(bounds: &[usize], x: usize) -> usize {
    bounds.partition_point(|&b| b <= x) - 1
}

/// Cuts an `rows × cols` matrix into a `P × P` grid of near-equal blocks and
/// groups them into `P` diagonal strata.
pub fn build_partition(
    rows: usize,
    cols: usize,
    workers: usize,
    observed: &[Observation],
) -> Result<PartitionPlan, DistError> {
    if workers == 0 || workers > rows.min(cols) {
        return Err(DistError::InvalidWorkers { workers, rows, cols });
    }
    let p = workers;
    let row_bounds = balanced_bounds(rows, p);
    let col_bounds = balanced_bounds(cols, p);
    let subsets: Vec<Vec<(usize, usize)>> = (0..p).map(|k| (0..p).map(|b| (b, (b + k) % p)).collect()).collect();
    let block_owner = (0..p * p).map(|idx| idx / p).collect();
    let mut block_obs = vec![Vec::new(); p * p];
    for (n, o) in observed.iter().enumerate() {
        if o.row >= rows || o.col >= cols {
            return Err(DistError::PlanMismatch(format!(
                "observation ({}, {}) outside {rows} x {cols}",
                o.row, o.col
            )));
        }
        block_obs[block_of(&row_bounds, o.row) * p + block_of(&col_bounds, o.col)].push(n);
    }
    let subset_sizes = subsets
        .iter()
        .map(|blocks| blocks.iter().map(|&(b, c)| block_obs[b * p + c].len()).sum())
        .collect();
    Ok(PartitionPlan {
        workers: p,
        rows,
        cols,
        row_bounds,
        col_bounds,
        subsets,
        block_owner,
        block_obs,
        subset_sizes,
    })
}

impl PartitionPlan {
    pub fn row_block(&self, b: usize) -> std::ops::Range<usize> {
        self.row_bounds[b]..self.row_bounds[b + 1]
    }

    pub fn col_block(&self, c: usize) -> std::ops::Range<usize> {
        self.col_bounds[c]..self.col_bounds[c + 1]
    }

    pub fn block_at(&self, row: usize, col: usize) -> (usize, usize) {
        (block_of(&self.row_bounds, row), block_of(&self.col_bounds, col))
    }

    /// Checks by exhaustive cell scan that every cell lies in exactly one
    /// block, every block in exactly one subset, and that no subset repeats a
    /// row or column block.
    pub fn validate(&self) -> Result<(), DistError> {
        let p = self.workers;
        let fail = |m: String| Err(DistError::Audit(m));
        for bounds in [&self.row_bounds, &self.col_bounds] {
            if bounds.len() != p + 1 || bounds.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("bad block boundaries {bounds:?}"));
            }
        }
        if self.row_bounds[0] != 0
            || self.row_bounds[p] != self.rows
            || self.col_bounds[0] != 0
            || self.col_bounds[p] != self.cols
        {
            return fail("boundaries do not cover the matrix".into());
        }
        let mut cover = vec![0u32; self.rows * self.cols];
        for b in 0..p {
            for c in 0..p {
                for i in self.row_block(b) {
                    for j in self.col_block(c) {
                        cover[i * self.cols + j] += 1;
                    }
                }
            }
        }
        if let Some(cell) = cover.iter().position(|&n| n != 1) {
            return fail(format!(
                "cell ({}, {}) lies in {} blocks",
                cell / self.cols,
                cell % self.cols,
                cover[cell]
            ));
        }
        let mut in_subset = vec![0u32; p * p];
        for (k, blocks) in self.subsets.iter().enumerate() {
            let rows: HashSet<_> = blocks.iter().map(|b| b.0).collect();
            let cols: HashSet<_> = blocks.iter().map(|b| b.1).collect();
            if rows.len() != blocks.len() || cols.len() != blocks.len() {
                return fail(format!("subset {k} repeats a row or column block"));
            }
            for &(b, c) in blocks {
                in_subset[b * p + c] += 1;
            }
        }
        if let Some(idx) = in_subset.iter().position(|&n| n != 1) {
            return fail(format!(
                "block ({}, {}) lies in {} subsets",
                idx / p,
                idx % p,
                in_subset[idx]
            ));
        }
        Ok(())
    }

    fn check_model(&self, model: &GaussianMfModel) -> Result<(), DistError> {
        if model.rows() != self.rows || model.cols() != self.cols {
            return Err(DistError::PlanMismatch(format!(
                "plan is {} x {}, model is {} x {}",
                self.rows,
                self.cols,
                model.rows(),
                model.cols()
            )));
        }
        let total: usize = self.block_obs.iter().map(Vec::len).sum();
        if total != model.num_data() {
            return Err(DistError::PlanMismatch(format!(
                "plan has {total} observations, model has {}",
                model.num_data()
            )));
        }
        Ok(())
    }
}

fn subset_weights(plan: &PartitionPlan) -> Result<WeightedIndex<usize>, DistError> {
    WeightedIndex::new(&plan.subset_sizes).map_err(|_| DistError::EmptySubsets)
}

/// Draws a subset with probability proportional to its number of observed entries.
pub fn select_subset<R: Rng + ?Sized>(plan: &PartitionPlan, rng: &mut R) -> Result<usize, DistError> {
    Ok(subset_weights(plan)?.sample(rng))
}

/// Assignment of global coordinates to workers, used to compute dot
/// products as a reduce of per-worker partial sums.
///
/// Shards hold ascending global indices. Partial dots are left-to-right sums
/// and partials are added in worker order, so a single shard reproduces the
/// serial dot product exactly.
#[derive(Debug)]
pub struct ShardMap {
    dim: usize,
    shards: Vec<Vec<usize>>,
    reduces: Cell<u64>,
    audit: Cell<bool>,
    audited: Cell<u64>,
    max_deviation: Cell<f64>,
}

impl ShardMap {
    pub fn new(dim: usize, mut shards: Vec<Vec<usize>>) -> Result<Self, DistError> {
        let mut seen = vec![false; dim];
        for shard in &mut shards {
            shard.sort_unstable();
            for &i in shard.iter() {
                if i >= dim || seen[i] {
                    return Err(DistError::Audit(format!(
                        "coordinate {i} is not owned by exactly one shard"
                    )));
                }
                seen[i] = true;
            }
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(DistError::Audit(format!("coordinate {i} has no owner")));
        }
        Ok(Self {
            dim,
            shards,
            reduces: Cell::new(0),
            audit: Cell::new(false),
            audited: Cell::new(0),
            max_deviation: Cell::new(0.0),
        })
    }

    pub fn shards(&self) -> &[Vec<usize>] {
        &self.shards
    }

    /// Per-worker partial dot products.
    pub fn partials(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        self.shards
            .iter()
            .map(|shard| shard.iter().fold(0.0, |acc, &i| acc + a[i] * b[i]))
            .collect()
    }

    fn reduce(&self, a: &[f64], b: &[f64]) -> f64 {
        self.reduces.set(self.reduces.get() + 1);
        let partials = self.partials(a, b);
        let total = partials[1..].iter().fold(partials[0], |acc, x| acc + x);
        if self.audit.get() {
            let single = seq_dot(a, b);
            let scale = (seq_dot(a, a) * seq_dot(b, b)).sqrt().max(f64::MIN_POSITIVE);
            let dev = (total - single).abs() / scale;
            self.audited.set(self.audited.get() + 1);
            if dev > self.max_deviation.get() {
                self.max_deviation.set(dev);
            }
        }
        total
    }

    /// Global dot products of the named vector pairs.
    pub fn reduce_dots(&self, pairs: &[(&DVector<f64>, &DVector<f64>)]) -> Result<Vec<f64>, DistError> {
        pairs
            .iter()
            .map(|(a, b)| {
                for v in [a, b] {
                    if v.len() != self.dim {
                        return Err(DistError::ShardMismatch {
                            expected: self.dim,
                            got: v.len(),
                        });
                    }
                }
                Ok(self.reduce(a.as_slice(), b.as_slice()))
            })
            .collect()
    }

    /// Number of reduces performed.
    pub fn reduces(&self) -> u64 {
        self.reduces.get()
    }

    /// Starts or stops comparing every reduce against a single-owner dot product.
    pub fn set_audit(&self, on: bool) {
        self.audit.set(on);
    }

    pub fn audited(&self) -> u64 {
        self.audited.get()
    }

    /// Largest relative deviation seen by the audit.
    pub fn max_deviation(&self) -> f64 {
        self.max_deviation.get()
    }
}

impl InnerProduct for ShardMap {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.reduce(a, b)
    }
}

/// Samplers with a distributed counterpart.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DistSampler {
    Dsgld,
    Dpsgld { alpha: f64, lambda_p: f64 },
    Dhamcmc,
}

impl DistSampler {
    pub fn kind(&self) -> SamplerKind {
        match *self {
            Self::Dsgld => SamplerKind::Sgld,
            Self::Dpsgld { alpha, lambda_p } => SamplerKind::Psgld { alpha, lambda_p },
            Self::Dhamcmc => SamplerKind::Hamcmc,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dsgld => "dsgld",
            Self::Dpsgld { .. } => "dpsgld",
            Self::Dhamcmc => "dhamcmc",
        }
    }

    /// Vectors whose `H` block travels with a migrating column block: the
    /// sample itself, the diagonal preconditioner, or the sample history plus
    /// the stored `s` and `y` shards.
    pub fn payload_vectors(&self, memory: usize) -> usize {
        match self {
            Self::Dsgld => 1,
            Self::Dpsgld { .. } => 2,
            Self::Dhamcmc => (2 * memory - 1) + 2 * (memory - 1),
        }
    }
}

/// One row per worker per round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundTelemetry {
    pub round: usize,
    pub subset: usize,
    pub worker: usize,
    /// Observed cells in the worker's block.
    pub cells_processed: usize,
    /// Bytes of `H` state the worker received at the start of the round.
    pub bytes_transferred: usize,
}

#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    /// Persistent `W` row block.
    pub row_block: usize,
    /// Currently held `H` column block.
    pub col_block: usize,
    rng_noise: ChaCha8Rng,
}

/// [`StepEnv`] whose batches are subsets, whose gradients are assembled from
/// per-worker block gradients, and whose noise and inner products are sharded.
pub struct DistributedEnv<'a> {
    plan: &'a PartitionPlan,
    model: &'a GaussianMfModel,
    workers: Vec<WorkerState>,
    shards: ShardMap,
    weights: WeightedIndex<usize>,
    rng_subset: ChaCha8Rng,
    payload: usize,
    round: usize,
    subset: Option<usize>,
    audit_every: usize,
    telemetry: Vec<RoundTelemetry>,
}

impl<'a> DistributedEnv<'a> {
    /// `payload` counts the vectors carried by a migrating `H` block;
    /// `audit_every > 0` spot-checks the reduces of every `audit_every`-th round.
    pub fn new(
        plan: &'a PartitionPlan,
        model: &'a GaussianMfModel,
        seed: u64,
        payload: usize,
        audit_every: usize,
    ) -> Result<Self, DistError> {
        plan.check_model(model)?;
        let workers: Vec<_> = (0..plan.workers)
            .map(|p| WorkerState {
                id: p,
                row_block: p,
                col_block: p,
                rng_noise: stream_rng(seed, NOISE_STREAM, p as u64),
            })
            .collect();
        let shards = ShardMap::new(model.dim(), Self::shard_indices(plan, model, &workers))?;
        Ok(Self {
            plan,
            model,
            workers,
            shards,
            weights: subset_weights(plan)?,
            rng_subset: stream_rng(seed, BATCH_STREAM, 0),
            payload,
            round: 0,
            subset: None,
            audit_every,
            telemetry: Vec::new(),
        })
    }

    fn shard_indices(plan: &PartitionPlan, model: &GaussianMfModel, workers: &[WorkerState]) -> Vec<Vec<usize>> {
        let k_rank = model.rank();
        workers
            .iter()
            .map(|w| {
                let mut idx = Vec::new();
                for i in plan.row_block(w.row_block) {
                    idx.extend((0..k_rank).map(|k| model.w_index(i, k)));
                }
                for k in 0..k_rank {
                    idx.extend(plan.col_block(w.col_block).map(|j| model.h_index(k, j)));
                }
                idx
            })
            .collect()
    }

    pub fn workers(&self) -> &[WorkerState] {
        &self.workers
    }

    pub fn shard_map(&self) -> &ShardMap {
        &self.shards
    }

    pub fn telemetry(&self) -> &[RoundTelemetry] {
        &self.telemetry
    }

    pub fn rounds(&self) -> usize {
        self.round
    }

    /// Moves every `H` column block to the worker that needs it for `subset`
    /// and records telemetry for the new round.
    fn begin_round(&mut self, subset: usize) -> Result<(), DistError> {
        let p = self.plan.workers;
        let k_rank = self.model.rank();
        let mut received = vec![0usize; p];
        for w in &mut self.workers {
            let target = (w.row_block + subset) % p;
            if w.col_block != target {
                received[w.id] = k_rank * self.plan.col_block(target).len() * 8 * self.payload;
                w.col_block = target;
            }
        }
        let holders: HashSet<_> = self.workers.iter().map(|w| w.col_block).collect();
        if holders.len() != p {
            return Err(DistError::Audit(format!(
                "round {}: column blocks are not uniquely held",
                self.round + 1
            )));
        }
        if received.iter().any(|&b| b > 0) {
            let fresh = ShardMap::new(
                self.model.dim(),
                Self::shard_indices(self.plan, self.model, &self.workers),
            )?;
            fresh.reduces.set(self.shards.reduces());
            fresh.audited.set(self.shards.audited());
            fresh.max_deviation.set(self.shards.max_deviation());
            self.shards = fresh;
        }
        self.round += 1;
        self.subset = Some(subset);
        self.touch_audit(subset)?;
        self.shards
            .set_audit(self.audit_every > 0 && self.round.is_multiple_of(self.audit_every));
        for w in &self.workers {
            let block = w.row_block * p + w.col_block;
            self.telemetry.push(RoundTelemetry {
                round: self.round,
                subset,
                worker: w.id,
                cells_processed: self.plan.block_obs[block].len(),
                bytes_transferred: received[w.id],
            });
        }
        Ok(())
    }

    /// Every worker reads and writes only its own block; the `W` rows and `H`
    /// columns written by different workers are disjoint.
    fn touch_audit(&self, subset: usize) -> Result<(), DistError> {
        let p = self.plan.workers;
        let obs = self.model.observed();
        let mut rows_written = HashSet::new();
        let mut cols_written = HashSet::new();
        for w in &self.workers {
            if !self.plan.subsets[subset].contains(&(w.row_block, w.col_block)) {
                return Err(DistError::Audit(format!(
                    "round {}: worker {} holds block ({}, {}) outside subset {subset}",
                    self.round, w.id, w.row_block, w.col_block
                )));
            }
            let rows = self.plan.row_block(w.row_block);
            let cols = self.plan.col_block(w.col_block);
            let mut mine_rows = HashSet::new();
            let mut mine_cols = HashSet::new();
            for &n in &self.plan.block_obs[w.row_block * p + w.col_block] {
                let o = obs[n];
                if !rows.contains(&o.row) || !cols.contains(&o.col) {
                    return Err(DistError::Audit(format!(
                        "round {}: worker {} touched cell ({}, {}) outside its block",
                        self.round, w.id, o.row, o.col
                    )));
                }
                mine_rows.insert(o.row);
                mine_cols.insert(o.col);
            }
            if !rows_written.is_disjoint(&mine_rows) || !cols_written.is_disjoint(&mine_cols) {
                return Err(DistError::Audit(format!(
                    "round {}: worker {} writes entries another worker writes",
                    self.round, w.id
                )));
            }
            rows_written.extend(mine_rows);
            cols_written.extend(mine_cols);
        }
        Ok(())
    }

    fn check_reduce_audit(&self) -> Result<(), DistError> {
        let dev = self.shards.max_deviation();
        if dev > DOT_AUDIT_TOL {
            return Err(DistError::Audit(format!(
                "reduce deviates from single-owner dot by {dev:e}"
            )));
        }
        Ok(())
    }
}

impl StepEnv for DistributedEnv<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn draw_batch(&mut self) -> Result<Minibatch, SamplerError> {
        self.check_reduce_audit()?;
        let subset = self.weights.sample(&mut self.rng_subset);
        self.begin_round(subset)?;
        let p = self.plan.workers;
        let mut indices = Vec::with_capacity(self.plan.subset_sizes[subset]);
        for w in &self.workers {
            indices.extend_from_slice(&self.plan.block_obs[w.row_block * p + w.col_block]);
        }
        debug!("round {}: subset {subset}, {} cells", self.round, indices.len());
        Ok(Minibatch::new(indices))
    }

    /// Each worker adds the likelihood gradients of its block's cells into the
    /// `W` rows and `H` columns it holds; the prior gradient and scaling by
    /// `N / |Ω⁽ᵏ⁾|` are applied per coordinate.
    fn gradient(&mut self, theta: &DVector<f64>, batch: &Minibatch) -> Result<GradientParts, SamplerError> {
        self.model.check_dim(theta)?;
        let subset = self
            .subset
            .ok_or_else(|| SamplerError::Distributed("gradient requested before the first round".into()))?;
        let p = self.plan.workers;
        let mut lik = DVector::zeros(self.model.dim());
        let mut count = 0;
        for w in &self.workers {
            for &n in &self.plan.block_obs[w.row_block * p + w.col_block] {
                self.model.accumulate_lik_grad(theta, n, &mut lik);
                count += 1;
            }
        }
        if count != batch.len() || count != self.plan.subset_sizes[subset] {
            return Err(SamplerError::Distributed(format!(
                "batch of {} cells does not match subset {subset} of {count}",
                batch.len()
            )));
        }
        Ok(GradientParts::assemble(
            self.model.prior_grad(theta),
            lik,
            self.model.num_data(),
            count,
        ))
    }

    fn standard_normal(&mut self) -> DVector<f64> {
        let mut z = DVector::zeros(self.model.dim());
        for (w, shard) in self.workers.iter_mut().zip(self.shards.shards()) {
            for &i in shard {
                z[i] = w.rng_noise.sample(StandardNormal);
            }
        }
        z
    }

    fn inner(&self) -> &dyn InnerProduct {
        &self.shards
    }

    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        None
    }
}

/// Distributed run options beyond the chain configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DistOptions {
    /// Spot-audit the reduces of every n-th round; 0 disables the audit.
    pub audit_every: usize,
}

/// Runs `config.iterations` synchronous rounds of `sampler` over the plan.
/// `config.sampler` and `config.batch` are ignored; subsets replace batches.
pub fn run_distributed_chain(
    plan: &PartitionPlan,
    model: &GaussianMfModel,
    sampler: DistSampler,
    config: &ChainConfig,
) -> Result<Trace, DistError> {
    run_distributed_chain_observed(plan, model, sampler, config, DistOptions::default(), &mut |_, _| {})
}

pub fn run_distributed_chain_observed(
    plan: &PartitionPlan,
    model: &GaussianMfModel,
    sampler: DistSampler,
    config: &ChainConfig,
    options: DistOptions,
    observer: &mut dyn FnMut(&DVector<f64>, &StepInfo),
) -> Result<Trace, DistError> {
    let config = ChainConfig {
        sampler: sampler.kind(),
        ..config.clone()
    };
    let mut env = DistributedEnv::new(
        plan,
        model,
        config.seed,
        sampler.payload_vectors(config.memory),
        options.audit_every,
    )?;
    let mut trace = run_chain_observed(&config, &mut env, observer)?;
    env.check_reduce_audit()?;
    trace.meta.sampler = sampler.name().to_string();
    trace.telemetry = std::mem::take(&mut env.telemetry);
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::MfPriors;
    use crate::samplers::{run_chain, BatchSize, StepSchedule};
    use rand::SeedableRng;

    fn dense_obs(rows: usize, cols: usize) -> Vec<Observation> {
        let mut v = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                v.push(Observation {
                    row: i,
                    col: j,
                    value: (i as f64 - j as f64) * 0.1,
                });
            }
        }
        v
    }

    fn sparse_obs(seed: u64, rows: usize, cols: usize, density: f64) -> Vec<Observation> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                if rng.random::<f64>() < density {
                    v.push(Observation {
                        row: i,
                        col: j,
                        value: rng.sample(StandardNormal),
                    });
                }
            }
        }
        v
    }

    #[test]
    fn single_worker_plan_is_one_block() {
        let obs = dense_obs(3, 5);
        let plan = build_partition(3, 5, 1, &obs).unwrap();
        assert_eq!(plan.subsets, vec![vec![(0, 0)]]);
        assert_eq!(plan.block_obs[0], (0..15).collect::<Vec<_>>());
        assert_eq!(plan.subset_sizes, vec![15]);
        plan.validate().unwrap();
    }

    #[test]
    fn four_workers_on_eight_by_eight() {
        let plan = build_partition(8, 8, 4, &dense_obs(8, 8)).unwrap();
        assert_eq!(plan.row_bounds, vec![0, 2, 4, 6, 8]);
        assert_eq!(plan.col_bounds, vec![0, 2, 4, 6, 8]);
        assert_eq!(plan.subsets[0], vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(plan.subsets[1], vec![(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!(plan.block_obs.iter().all(|b| b.len() == 4));
        assert_eq!(plan.subset_sizes, vec![16; 4]);
        for b in 0..4 {
            for c in 0..4 {
                assert_eq!(plan.block_owner[b * 4 + c], b);
            }
        }
        plan.validate().unwrap();
    }

    #[test]
    fn random_plans_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let p = rng.random_range(2..=4);
            let rows = rng.random_range(p..20);
            let cols = rng.random_range(p..20);
            let obs = sparse_obs(rng.random(), rows, cols, 0.3);
            let plan = build_partition(rows, cols, p, &obs).unwrap();
            plan.validate().unwrap();
            for w in [&plan.row_bounds, &plan.col_bounds] {
                let sizes: Vec<_> = w.windows(2).map(|x| x[1] - x[0]).collect();
                assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            }
            for (b, block) in plan.block_obs.iter().enumerate() {
                for &n in block {
                    assert_eq!(plan.block_at(obs[n].row, obs[n].col), (b / p, b % p));
                }
            }
        }
    }

    #[test]
    fn validator_catches_broken_plans() {
        let mut plan = build_partition(6, 6, 3, &[]).unwrap();
        plan.subsets[1][0] = (0, 0);
        assert!(matches!(plan.validate(), Err(DistError::Audit(_))));
        let mut plan = build_partition(6, 6, 3, &[]).unwrap();
        plan.row_bounds[1] = 1;
        plan.row_bounds[2] = 1;
        assert!(plan.validate().is_err());
    }

    #[test]
    fn invalid_worker_counts() {
        assert!(matches!(
            build_partition(3, 5, 0, &[]),
            Err(DistError::InvalidWorkers { .. })
        ));
        assert!(matches!(
            build_partition(3, 5, 4, &[]),
            Err(DistError::InvalidWorkers { .. })
        ));
    }

    fn plan_with_sizes(sizes: &[usize]) -> PartitionPlan {
        let mut plan = build_partition(4, 4, sizes.len(), &[]).unwrap();
        plan.subset_sizes = sizes.to_vec();
        plan
    }

    fn frequencies(plan: &PartitionPlan, draws: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = vec![0usize; plan.workers];
        for _ in 0..draws {
            counts[select_subset(plan, &mut rng).unwrap()] += 1;
        }
        counts.iter().map(|&c| c as f64 / draws as f64).collect()
    }

    #[test]
    fn subset_selection_frequencies() {
        let f = frequencies(&plan_with_sizes(&[0, 7]), 1000);
        assert_eq!(f, vec![0.0, 1.0]);
        let f = frequencies(&plan_with_sizes(&[5, 5, 5, 5]), 100_000);
        assert!(f.iter().all(|x| (x - 0.25).abs() < 0.02), "{f:?}");
        let f = frequencies(&plan_with_sizes(&[3, 1]), 100_000);
        assert!((f[0] - 0.75).abs() < 0.02 && (f[1] - 0.25).abs() < 0.02, "{f:?}");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_subset(&plan_with_sizes(&[0, 0]), &mut rng),
            Err(DistError::EmptySubsets)
        );
    }

    #[test]
    fn reduce_matches_concatenated_dot() {
        let map = ShardMap::new(5, vec![vec![3, 0, 4], vec![1, 2]]).unwrap();
        let z = DVector::zeros(5);
        assert_eq!(map.reduce_dots(&[(&z, &z)]).unwrap(), vec![0.0]);
        let a = DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0, 4.0]);
        let b = DVector::from_vec(vec![0.25, 1.0, 8.0, -1.0, 2.0]);
        // Shard 0 = {0, 3, 4}: 0.25 - 3 + 8 = 5.25; shard 1 = {1, 2}: -2 + 4 = 2.
        assert_eq!(map.partials(a.as_slice(), b.as_slice()), vec![5.25, 2.0]);
        let got = map.reduce_dots(&[(&a, &b), (&a, &a)]).unwrap();
        let concat = |x: &DVector<f64>, y: &DVector<f64>| x.iter().zip(y.iter()).map(|(p, q)| p * q).sum::<f64>();
        assert!((got[0] - concat(&a, &b)).abs() < 1e-12);
        assert!((got[1] - concat(&a, &a)).abs() < 1e-12);
        assert_eq!(map.reduces(), 3);
        let short = DVector::zeros(4);
        assert!(matches!(
            map.reduce_dots(&[(&a, &short)]),
            Err(DistError::ShardMismatch { .. })
        ));
    }

    #[test]
    fn reduce_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let b = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let shards = vec![(0..20).collect(), (20..35).collect(), (35..50).collect()];
        let first = ShardMap::new(50, shards.clone())
            .unwrap()
            .reduce_dots(&[(&a, &b)])
            .unwrap();
        let second = ShardMap::new(50, shards).unwrap().reduce_dots(&[(&a, &b)]).unwrap();
        assert_eq!(first[0].to_bits(), second[0].to_bits());
    }

    #[test]
    fn shard_map_rejects_overlap_and_gaps() {
        assert!(ShardMap::new(3, vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(ShardMap::new(3, vec![vec![0], vec![2]]).is_err());
    }

    fn mf_model(rows: usize, cols: usize, rank: usize, seed: u64) -> GaussianMfModel {
        GaussianMfModel::new(rows, cols, rank, sparse_obs(seed, rows, cols, 0.5), MfPriors::default()).unwrap()
    }

    #[test]
    fn single_worker_matches_serial_bitwise() {
        let model = mf_model(6, 7, 2, 3);
        let plan = build_partition(6, 7, 1, model.observed()).unwrap();
        for sampler in [
            DistSampler::Dsgld,
            DistSampler::Dpsgld {
                alpha: 0.99,
                lambda_p: 1e-3,
            },
            DistSampler::Dhamcmc,
        ] {
            let mut cfg = ChainConfig::new(sampler.kind(), 40, StepSchedule::polynomial(1e-3));
            cfg.seed = 17;
            cfg.lambda = 0.1;
            cfg.init = Some(DVector::from_element(model.dim(), 0.1));
            cfg.batch = BatchSize::Full;
            let serial = run_chain(&cfg, &model).unwrap();
            let dist = run_distributed_chain(&plan, &model, sampler, &cfg).unwrap();
            assert_eq!(serial.eps, dist.eps);
            for (a, b) in serial.samples.iter().zip(&dist.samples) {
                assert!(
                    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
                    "{}",
                    sampler.name()
                );
            }
            assert_eq!(dist.telemetry.len(), 40);
            assert!(dist.telemetry.iter().all(|r| r.bytes_transferred == 0));
        }
    }

    #[test]
    fn four_workers_telemetry_and_audits() {
        let model = mf_model(12, 12, 2, 5);
        let plan = build_partition(12, 12, 4, model.observed()).unwrap();
        let mut cfg = ChainConfig::new(SamplerKind::Hamcmc, 30, StepSchedule::polynomial(1e-3));
        cfg.lambda = 0.1;
        cfg.seed = 2;
        cfg.init = Some(DVector::from_element(model.dim(), 0.1));
        let options = DistOptions { audit_every: 1 };
        let trace =
            run_distributed_chain_observed(&plan, &model, DistSampler::Dhamcmc, &cfg, options, &mut |_, _| {}).unwrap();
        assert_eq!(trace.telemetry.len(), 30 * 4);
        for round in trace.telemetry.chunks(4) {
            let subset = round[0].subset;
            for (p, row) in round.iter().enumerate() {
                assert_eq!(row.worker, p);
                assert_eq!(row.subset, subset);
                assert_eq!(row.cells_processed, plan.block_obs[p * 4 + (p + subset) % 4].len());
            }
            let cells: usize = round.iter().map(|r| r.cells_processed).sum();
            assert_eq!(cells, plan.subset_sizes[subset]);
        }
        // A block of 3 columns with K = 2 and M = 3 carries 5 + 4 vectors.
        assert!(trace
            .telemetry
            .iter()
            .all(|r| r.bytes_transferred == 0 || r.bytes_transferred == 2 * 3 * 8 * 9));
        assert!(trace.samples.iter().all(|s| s.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn reduce_audit_agrees_with_single_owner_dots() {
        let model = mf_model(10, 10, 3, 8);
        let plan = build_partition(10, 10, 3, model.observed()).unwrap();
        let mut env = DistributedEnv::new(&plan, &model, 0, 1, 1).unwrap();
        let mut cfg = ChainConfig::new(SamplerKind::Hamcmc, 25, StepSchedule::polynomial(1e-3));
        cfg.lambda = 0.1;
        cfg.init = Some(DVector::from_element(model.dim(), 0.2));
        crate::samplers::run_chain_with_env(&cfg, &mut env).unwrap();
        assert!(env.shard_map().audited() > 0);
        assert!(env.shard_map().max_deviation() <= DOT_AUDIT_TOL);
        assert_eq!(env.rounds(), 25);
    }

    #[test]
    fn ownership_is_conserved() {
        let model = mf_model(9, 9, 1, 2);
        let plan = build_partition(9, 9, 3, model.observed()).unwrap();
        let mut env = DistributedEnv::new(&plan, &model, 4, 1, 0).unwrap();
        for _ in 0..20 {
            env.draw_batch().unwrap();
            let mut held: Vec<_> = env.workers().iter().map(|w| w.col_block).collect();
            held.sort_unstable();
            assert_eq!(held, vec![0, 1, 2]);
            let covered: usize = env.shard_map().shards().iter().map(Vec::len).sum();
            assert_eq!(covered, model.dim());
        }
    }

    #[test]
    fn plan_model_mismatch() {
        let model = mf_model(6, 6, 1, 1);
        let plan = build_partition(6, 7, 2, &[]).unwrap();
        assert!(matches!(
            DistributedEnv::new(&plan, &model, 0, 1, 0),
            Err(DistError::PlanMismatch(_))
        ));
    }
}
