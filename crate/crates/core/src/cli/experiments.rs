//! Experiment orchestration and CSV output.
//!
//! Every CSV starts with the effective config as `# key = value` comment
//! lines, followed by a header row. Chains run in parallel; rows are written
//! by a single writer ordered by sampler, then replicate, then iteration.
//! Wall-clock measurements only ever go to `timing.csv`, so all other files
//! are byte-identical across reruns with the same config and seed.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use super::config::{ExperimentConfig, ExperimentKind, MfParams, SamplerParams};
use super::movielens::{ingest_movielens, split_train_test, IngestError, SplitError};
use crate::diagnostics::{
    bias_mse_curve, empirical_cov, point_rmse, weighted_mean_vector, DiagnosticsError, RunningPrediction,
};
use crate::dist_sim::{build_partition, run_distributed_chain_observed, DistError, DistOptions, DistSampler};
use crate::models::{GaussianMfModel, LinearGaussianModel, LinearGaussianSpec, MfPriors, ModelError, Observation};
use crate::rng::{stream_rng, stream_seed, DATA_STREAM, REPLICATE_STREAM};
use crate::samplers::{run_chain, run_chain_observed, BatchSize, ChainConfig, SamplerError, SamplerKind, SerialEnv};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{file}: non-finite value in row {row}, column `{column}`")]
    NonFinite { file: String, row: usize, column: String },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl ExperimentError {
    /// Process exit status: 2 for configuration problems, 3 for everything
    /// that fails while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// A CSV cell; numbers must be finite.
#[derive(Debug, Clone, Copy)]
pub enum Cell<'a> {
    Text(&'a str),
    Int(usize),
    Num(f64),
}

struct CsvOut {
    path: PathBuf,
    header: Vec<String>,
    writer: csv::Writer<File>,
    rows: usize,
}

impl CsvOut {
    fn create(dir: &Path, name: &str, echo: &str, header: &[String]) -> Result<Self, ExperimentError> {
        let path = dir.join(name);
        let mut file = File::create(&path).map_err(|e| io_err(&path, e))?;
        for line in echo.lines() {
            writeln!(file, "# {line}").map_err(|e| io_err(&path, e))?;
        }
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(|e| io_err(&path, e))?;
        Ok(Self {
            path,
            header: header.to_vec(),
            writer,
            rows: 0,
        })
    }

    fn row(&mut self, cells: &[Cell]) -> Result<(), ExperimentError> {
        self.rows += 1;
        let mut record = Vec::with_capacity(cells.len());
        for (c, cell) in cells.iter().enumerate() {
            record.push(match *cell {
                Cell::Text(s) => s.to_string(),
                Cell::Int(n) => n.to_string(),
                Cell::Num(x) if x.is_finite() => x.to_string(),
                Cell::Num(_) => {
                    return Err(ExperimentError::NonFinite {
                        file: self.path.display().to_string(),
                        row: self.rows,
                        column: self.header.get(c).cloned().unwrap_or_default(),
                    })
                }
            });
        }
        self.writer.write_record(&record).map_err(|e| io_err(&self.path, e))
    }

    fn finish(mut self) -> Result<PathBuf, ExperimentError> {
        self.writer.flush().map_err(|e| io_err(&self.path, e))?;
        Ok(self.path)
    }
}

fn header(fixed: &[&str], extra: impl IntoIterator<Item = String>) -> Vec<String> {
    fixed.iter().map(|s| s.to_string()).chain(extra).collect()
}

/// Files written by a run, in creation order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
}

pub fn serial_kind(name: &str, p: &SamplerParams) -> Result<SamplerKind, ExperimentError> {
    Ok(match name {
        "sgld" => SamplerKind::Sgld,
        "psgld" => SamplerKind::Psgld {
            alpha: p.alpha,
            lambda_p: p.lambda_p,
        },
        "sgrld" => SamplerKind::Sgrld,
        "naive_qn" => SamplerKind::NaiveQn,
        "hamcmc" => SamplerKind::Hamcmc,
        other => return Err(ExperimentError::Config(format!("`{other}` is not a serial sampler"))),
    })
}

pub fn dist_kind(name: &str, p: &SamplerParams) -> Result<DistSampler, ExperimentError> {
    Ok(match name {
        "dsgld" => DistSampler::Dsgld,
        "dpsgld" => DistSampler::Dpsgld {
            alpha: p.alpha,
            lambda_p: p.lambda_p,
        },
        "dhamcmc" => DistSampler::Dhamcmc,
        other => {
            return Err(ExperimentError::Config(format!(
                "`{other}` is not a distributed sampler"
            )))
        }
    })
}

/// Chain configuration for `iterations` samples of a sampler over `num_data` data.
pub fn chain_config(
    kind: SamplerKind,
    p: &SamplerParams,
    num_data: usize,
    iterations: usize,
    seed: u64,
) -> ChainConfig {
    ChainConfig {
        sampler: kind,
        iterations,
        burn_in: p.burn_in.resolve(iterations),
        schedule: p.schedule,
        memory: p.memory,
        gamma: p.gamma,
        lambda: p.lambda,
        batch: match p.batch.resolve(num_data) {
            Some(n) => BatchSize::WithReplacement(n),
            None => BatchSize::Full,
        },
        seed,
        mirror: p.mirror,
        init: None,
        keep_samples: true,
    }
}

/// The linear-Gaussian data set of a config, generated from the master seed.
pub fn linear_gaussian(cfg: &ExperimentConfig) -> Result<LinearGaussianModel, ExperimentError> {
    let spec = LinearGaussianSpec {
        dim: cfg.model.dim,
        num_data: cfg.model.num_data,
        sigma_x2: cfg.model.sigma_x2,
        correlation: cfg.model.correlation,
    };
    Ok(LinearGaussianModel::generate(&spec, &mut stream_rng(cfg.seed, DATA_STREAM, 0))?.model)
}

pub fn replicate_seed(master: u64, replicate: usize) -> u64 {
    stream_seed(master, REPLICATE_STREAM, replicate as u64)
}

/// Runs the configured experiment, writing CSV files into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    info!("running {} with seed {}", cfg.kind.name(), cfg.seed);
    match cfg.kind {
        ExperimentKind::Synthetic2d => synthetic_2d(cfg, out),
        ExperimentKind::PosteriorMeanError => posterior_mean_error(cfg, out),
        ExperimentKind::BiasMse => bias_mse(cfg, out),
        ExperimentKind::MfDistributed => mf_distributed(cfg, out),
    }
}

fn coord_names(prefix: &str, d: usize) -> impl Iterator<Item = String> + '_ {
    (0..d).map(move |i| format!("{prefix}_{i}"))
}

/// Retained samples of each sampler and a mean/covariance comparison with
/// the closed-form posterior.
fn synthetic_2d(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    let model = linear_gaussian(cfg)?;
    let (mean, cov) = model.analytic_posterior();
    let d = mean.len();
    let n = model.observations().len();
    let seed = replicate_seed(cfg.seed, 0);
    let runs: Vec<_> = cfg
        .samplers
        .par_iter()
        .map(|(name, p)| -> Result<_, ExperimentError> {
            let config = chain_config(serial_kind(name, p)?, p, n, p.iterations, seed);
            let start = Instant::now();
            let trace = run_chain(&config, &model)?;
            Ok((trace, start.elapsed().as_secs_f64()))
        })
        .collect::<Result<_, _>>()?;
    let echo = cfg.to_text();
    let mut samples = CsvOut::create(
        out,
        "samples.csv",
        &echo,
        &header(&["sampler", "t"], coord_names("theta", d)),
    )?;
    let cov_names = (0..d).flat_map(|i| (0..d).map(move |j| format!("cov_{i}_{j}")));
    let mut summary = CsvOut::create(
        out,
        "summary.csv",
        &echo,
        &header(
            &["source"],
            coord_names("mean", d)
                .chain(cov_names)
                .chain(["cov_rel_error".to_string()]),
        ),
    )?;
    let mut row = vec![Cell::Text("analytic")];
    row.extend(mean.iter().map(|&x| Cell::Num(x)));
    row.extend(cov.transpose().iter().map(|&x| Cell::Num(x)));
    row.push(Cell::Num(0.0));
    summary.row(&row)?;
    for ((name, _), (trace, _)) in cfg.samplers.iter().zip(&runs) {
        for (k, (theta, _)) in trace.retained().enumerate() {
            let mut row = vec![Cell::Text(name), Cell::Int(trace.burn_in + k + 1)];
            row.extend(theta.iter().map(|&x| Cell::Num(x)));
            samples.row(&row)?;
        }
        let m = weighted_mean_vector(trace)?;
        let c = empirical_cov(trace)?;
        let mut row = vec![Cell::Text(name)];
        row.extend(m.iter().map(|&x| Cell::Num(x)));
        row.extend(c.transpose().iter().map(|&x| Cell::Num(x)));
        row.push(Cell::Num((&c - &cov).norm() / cov.norm()));
        summary.row(&row)?;
    }
    let mut files = vec![samples.finish()?, summary.finish()?];
    if cfg.timing {
        let mut t = CsvOut::create(
            out,
            "timing.csv",
            &echo,
            &header(&["sampler", "replicate", "seconds"], []),
        )?;
        for ((name, _), (_, secs)) in cfg.samplers.iter().zip(&runs) {
            t.row(&[Cell::Text(name), Cell::Int(0), Cell::Num(*secs)])?;
        }
        files.push(t.finish()?);
    }
    Ok(RunSummary { files })
}

/// Squared error of the running step-weighted posterior mean estimate,
/// recorded every `sweep.record_every` iterations.
fn posterior_mean_error(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    let model = linear_gaussian(cfg)?;
    let (truth, _) = model.analytic_posterior();
    let n = model.observations().len();
    let every = cfg.sweep.record_every;
    let jobs: Vec<(usize, usize)> = (0..cfg.samplers.len())
        .flat_map(|s| (0..cfg.sweep.replicates).map(move |r| (s, r)))
        .collect();
    type Curve = Vec<(usize, f64, f64)>;
    let curves: Vec<Curve> = jobs
        .par_iter()
        .map(|&(s, r)| -> Result<Curve, ExperimentError> {
            let (name, p) = &cfg.samplers[s];
            let mut config = chain_config(serial_kind(name, p)?, p, n, p.iterations, replicate_seed(cfg.seed, r));
            config.keep_samples = false;
            let mut env = SerialEnv::new(&model, config.batch, config.seed);
            let start = Instant::now();
            let mut acc = DVector::zeros(truth.len());
            let mut weight = 0.0;
            let mut curve = Vec::new();
            run_chain_observed(&config, &mut env, &mut |theta, info| {
                if info.t > config.burn_in {
                    acc.axpy(info.eps, theta, 1.0);
                    weight += info.eps;
                }
                if info.t % every == 0 && weight > 0.0 {
                    let err = (&acc / weight - &truth).norm_squared();
                    curve.push((info.t, err, start.elapsed().as_secs_f64()));
                }
            })?;
            Ok(curve)
        })
        .collect::<Result<_, _>>()?;
    let echo = cfg.to_text();
    let mut errors = CsvOut::create(
        out,
        "errors.csv",
        &echo,
        &header(&["sampler", "replicate", "iteration", "error"], []),
    )?;
    let mut summary = CsvOut::create(
        out,
        "summary.csv",
        &echo,
        &header(&["sampler", "iteration", "median_error", "mean_error"], []),
    )?;
    let mut timing = if cfg.timing {
        Some(CsvOut::create(
            out,
            "timing.csv",
            &echo,
            &header(&["sampler", "replicate", "iteration", "seconds"], []),
        )?)
    } else {
        None
    };
    for (s, (name, _)) in cfg.samplers.iter().enumerate() {
        let mine: Vec<&Curve> = jobs
            .iter()
            .zip(&curves)
            .filter(|((js, _), _)| *js == s)
            .map(|(_, c)| c)
            .collect();
        for (r, curve) in mine.iter().enumerate() {
            for &(t, err, secs) in curve.iter() {
                errors.row(&[Cell::Text(name), Cell::Int(r), Cell::Int(t), Cell::Num(err)])?;
                if let Some(tw) = timing.as_mut() {
                    tw.row(&[Cell::Text(name), Cell::Int(r), Cell::Int(t), Cell::Num(secs)])?;
                }
            }
        }
        if let Some(last) = mine.first().and_then(|c| c.last()) {
            let finals: Vec<f64> = mine.iter().filter_map(|c| c.last().map(|x| x.1)).collect();
            summary.row(&[
                Cell::Text(name),
                Cell::Int(last.0),
                Cell::Num(median(&finals)),
                Cell::Num(finals.iter().sum::<f64>() / finals.len() as f64),
            ])?;
        }
    }
    let mut files = vec![errors.finish()?, summary.finish()?];
    if let Some(t) = timing {
        files.push(t.finish()?);
    }
    Ok(RunSummary { files })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Replicated bias and MSE of the posterior mean estimate for each chain length.
fn bias_mse(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    let model = linear_gaussian(cfg)?;
    let (truth, _) = model.analytic_posterior();
    let n = model.observations().len();
    let echo = cfg.to_text();
    let mut tables = Vec::new();
    for (name, p) in &cfg.samplers {
        let kind = serial_kind(name, p)?;
        let rows = bias_mse_curve(&truth, &cfg.sweep.lengths, cfg.sweep.replicates, |t, r| {
            run_chain(&chain_config(kind, p, n, t, replicate_seed(cfg.seed, r)), &model)
        })?;
        tables.push((name, rows));
    }
    let mut results = CsvOut::create(
        out,
        "bias_mse.csv",
        &echo,
        &header(&["sampler", "replicate", "iterations", "sq_error", "bias", "mse"], []),
    )?;
    for (name, rows) in &tables {
        for r in 0..cfg.sweep.replicates {
            for row in rows {
                results.row(&[
                    Cell::Text(name),
                    Cell::Int(r),
                    Cell::Int(row.iterations),
                    Cell::Num(row.sq_errors[r]),
                    Cell::Num(row.bias),
                    Cell::Num(row.mse),
                ])?;
            }
        }
    }
    let mut summary = CsvOut::create(
        out,
        "bias_mse_summary.csv",
        &echo,
        &header(
            &["sampler", "iterations", "bias", "mse"],
            coord_names("bias", truth.len()),
        ),
    )?;
    for (name, rows) in &tables {
        for row in rows {
            let mut cells = vec![
                Cell::Text(name),
                Cell::Int(row.iterations),
                Cell::Num(row.bias),
                Cell::Num(row.mse),
            ];
            cells.extend(row.bias_per_coord.iter().map(|&x| Cell::Num(x)));
            summary.row(&cells)?;
        }
    }
    Ok(RunSummary {
        files: vec![results.finish()?, summary.finish()?],
    })
}

/// A synthetic rank-`true_rank` matrix with standard normal factors, each cell
/// observed with probability `density` under Gaussian noise.
pub fn synthetic_mf(mf: &MfParams, seed: u64) -> Vec<Observation> {
    let mut rng = stream_rng(seed, DATA_STREAM, 0);
    let r = mf.true_rank;
    let w: Vec<f64> = (0..mf.rows * r).map(|_| rng.sample(StandardNormal)).collect();
    let h: Vec<f64> = (0..r * mf.cols).map(|_| rng.sample(StandardNormal)).collect();
    let noise = mf.noise_var.sqrt();
    let mut obs = Vec::new();
    for i in 0..mf.rows {
        for j in 0..mf.cols {
            if rng.random::<f64>() < mf.density {
                let mean: f64 = (0..r).map(|k| w[i * r + k] * h[k * mf.cols + j]).sum();
                let e: f64 = rng.sample(StandardNormal);
                obs.push(Observation {
                    row: i,
                    col: j,
                    value: mean + noise * e,
                });
            }
        }
    }
    obs
}

/// Train/test data and matrix shape for the matrix-factorization experiment.
pub struct MfData {
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<Observation>,
    pub test: Vec<Observation>,
}

pub fn mf_data(cfg: &ExperimentConfig) -> Result<MfData, ExperimentError> {
    let mf = &cfg.mf;
    let movielens = mf.movielens.as_deref().map(Path::new).filter(|p| {
        let exists = p.exists();
        if !exists {
            warn!("{} not found, using synthetic data", p.display());
        }
        exists
    });
    let (rows, cols, triples) = match movielens {
        Some(path) => {
            let ratings = ingest_movielens(path)?;
            info!(
                "MovieLens: {} ratings, I = {}, J = {}, density {:.2}%",
                ratings.triples.len(),
                ratings.rows(),
                ratings.cols(),
                100.0 * ratings.density()
            );
            (ratings.rows(), ratings.cols(), ratings.triples)
        }
        None => (mf.rows, mf.cols, synthetic_mf(mf, cfg.seed)),
    };
    let (train, test) = split_train_test(&triples, mf.test_fraction, cfg.seed)?;
    Ok(MfData {
        rows,
        cols,
        train,
        test,
    })
}

pub fn mf_init(dim: usize, scale: f64, seed: u64) -> DVector<f64> {
    let mut rng = stream_rng(seed, DATA_STREAM, 1);
    DVector::from_fn(dim, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// `(round, rmse)` curve of one distributed chain plus its telemetry.
pub struct MfRun {
    pub curve: Vec<(usize, f64, f64)>,
    pub telemetry: Vec<crate::dist_sim::RoundTelemetry>,
}

/// Runs one distributed chain and tracks test RMSE of the step-weighted
/// predictive mean after `mf.burn_in` rounds (of the current sample before).
pub fn run_mf_chain(
    cfg: &ExperimentConfig,
    data: &MfData,
    model: &GaussianMfModel,
    plan: &crate::dist_sim::PartitionPlan,
    name: &str,
    p: &SamplerParams,
    replicate: usize,
) -> Result<MfRun, ExperimentError> {
    let sampler = dist_kind(name, p)?;
    let mut config = chain_config(
        sampler.kind(),
        p,
        data.train.len(),
        p.iterations,
        replicate_seed(cfg.seed, replicate),
    );
    config.keep_samples = false;
    config.init = Some(mf_init(crate::models::Model::dim(model), cfg.mf.init_scale, cfg.seed));
    let mut running = RunningPrediction::new(model, &data.test)?;
    let mut curve = Vec::new();
    let mut failure = None;
    let start = Instant::now();
    let options = DistOptions {
        audit_every: cfg.mf.audit_every,
    };
    let trace = run_distributed_chain_observed(plan, model, sampler, &config, options, &mut |theta, info| {
        if failure.is_some() {
            return;
        }
        let result = (|| -> Result<(), DiagnosticsError> {
            if info.t > cfg.mf.burn_in {
                running.add(theta, info.eps)?;
            }
            if info.t == 1 || info.t % cfg.mf.eval_every == 0 {
                let rmse = if info.t > cfg.mf.burn_in {
                    running.rmse()?
                } else {
                    point_rmse(model, theta, &data.test)?
                };
                curve.push((info.t, rmse, start.elapsed().as_secs_f64()));
            }
            Ok(())
        })();
        if let Err(e) = result {
            failure = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(MfRun {
        curve,
        telemetry: trace.telemetry,
    })
}

/// Test RMSE per round and round telemetry for each distributed sampler.
fn mf_distributed(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    let data = mf_data(cfg)?;
    let mf = &cfg.mf;
    let priors = MfPriors {
        sigma_w2: mf.sigma_w2,
        sigma_h2: mf.sigma_h2,
        sigma_x2: mf.sigma_x2,
    };
    let model = GaussianMfModel::new(data.rows, data.cols, mf.rank, data.train.clone(), priors)?;
    let plan = build_partition(data.rows, data.cols, mf.workers, model.observed())?;
    let jobs: Vec<(usize, usize)> = (0..cfg.samplers.len())
        .flat_map(|s| (0..cfg.sweep.replicates).map(move |r| (s, r)))
        .collect();
    let runs: Vec<MfRun> = jobs
        .par_iter()
        .map(|&(s, r)| {
            let (name, p) = &cfg.samplers[s];
            run_mf_chain(cfg, &data, &model, &plan, name, p, r)
        })
        .collect::<Result<_, _>>()?;
    let echo = cfg.to_text();
    let mut rmse = CsvOut::create(
        out,
        "rmse.csv",
        &echo,
        &header(&["sampler", "replicate", "round", "rmse"], []),
    )?;
    let mut telemetry = CsvOut::create(
        out,
        "telemetry.csv",
        &echo,
        &header(
            &[
                "sampler",
                "replicate",
                "round",
                "subset",
                "worker",
                "cells_processed",
                "bytes_transferred",
            ],
            [],
        ),
    )?;
    let mut timing = if cfg.timing {
        Some(CsvOut::create(
            out,
            "timing.csv",
            &echo,
            &header(&["sampler", "replicate", "round", "seconds"], []),
        )?)
    } else {
        None
    };
    for (&(s, r), run) in jobs.iter().zip(&runs) {
        let name = cfg.samplers[s].0.as_str();
        for &(t, e, secs) in &run.curve {
            rmse.row(&[Cell::Text(name), Cell::Int(r), Cell::Int(t), Cell::Num(e)])?;
            if let Some(tw) = timing.as_mut() {
                tw.row(&[Cell::Text(name), Cell::Int(r), Cell::Int(t), Cell::Num(secs)])?;
            }
        }
        for row in &run.telemetry {
            telemetry.row(&[
                Cell::Text(name),
                Cell::Int(r),
                Cell::Int(row.round),
                Cell::Int(row.subset),
                Cell::Int(row.worker),
                Cell::Int(row.cells_processed),
                Cell::Int(row.bytes_transferred),
            ])?;
        }
    }
    let mut files = vec![rmse.finish()?, telemetry.finish()?];
    if let Some(t) = timing {
        files.push(t.finish()?);
    }
    Ok(RunSummary { files })
}

/// Recovers the config echoed at the top of a CSV file.
pub fn echoed_config(csv_text: &str) -> String {
    csv_text
        .lines()
        .take_while(|l| l.starts_with("# "))
        .map(|l| format!("{}\n", &l[2..]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::parse_config;

    fn run(text: &str) -> (tempfile::TempDir, RunSummary) {
        let cfg = parse_config(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiment(&cfg, dir.path()).unwrap();
        (dir, summary)
    }

    fn data_rows(path: &Path) -> Vec<String> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with('#'))
            .skip(1)
            .map(String::from)
            .collect()
    }

    #[test]
    fn synthetic_2d_writes_retained_samples() {
        let text = "experiment = synthetic_2d\nseed = 1\nsampler.T = 200\nsampler.a_eps = 1e-5\nsweep.samplers = sgld, hamcmc\n";
        let (_dir, s) = run(text);
        let rows = data_rows(&s.files[0]);
        assert_eq!(rows.len(), 2 * 100);
        assert!(rows[0].starts_with("sgld,101,"));
        assert!(rows[100].starts_with("hamcmc,101,"));
        assert_eq!(data_rows(&s.files[1]).len(), 3);
    }

    #[test]
    fn bias_mse_row_count() {
        let text = "experiment = bias_mse\nseed = 2\nsweep.lengths = 100, 1000\nsweep.replicates = 2\n\
                    sweep.samplers = sgld, hamcmc\nsampler.a_eps = 1e-5\n";
        let (_dir, s) = run(text);
        assert_eq!(data_rows(&s.files[0]).len(), 2 * 2 * 2);
        assert_eq!(data_rows(&s.files[1]).len(), 2 * 2);
    }

    #[test]
    fn reruns_are_byte_identical() {
        let text = "experiment = posterior_mean_error\nseed = 3\nsampler.T = 300\nsweep.replicates = 3\n\
                    sweep.record_every = 50\nsampler.a_eps = 1e-5\n";
        let (_a, first) = run(text);
        let (_b, second) = run(text);
        for (x, y) in first.files.iter().zip(&second.files) {
            assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
        }
    }

    #[test]
    fn echo_reproduces_config() {
        let text = "experiment = mf_distributed\nseed = 4\nmf.rows = 12\nmf.cols = 10\nmf.workers = 2\n\
                    sampler.T = 20\nsweep.replicates = 2\nsampler.a_eps = 1e-6\nmf.eval_every = 5\n";
        let cfg = parse_config(text).unwrap();
        let (_dir, s) = run(text);
        let csv = fs::read_to_string(&s.files[0]).unwrap();
        assert_eq!(parse_config(&echoed_config(&csv)).unwrap(), cfg);
        // Rounds 1, 5, 10, 15, 20 for two samplers and two replicates.
        assert_eq!(data_rows(&s.files[0]).len(), 2 * 2 * 5);
        assert_eq!(data_rows(&s.files[1]).len(), 2 * 2 * 20 * 2);
    }

    #[test]
    fn timing_is_optional() {
        let base = "experiment = synthetic_2d\nseed = 5\nsampler.T = 50\nsampler.a_eps = 1e-5\n";
        let (_a, plain) = run(base);
        assert!(plain.files.iter().all(|f| !f.ends_with("timing.csv")));
        let (_b, timed) = run(&format!("{base}timing = true\n"));
        assert!(timed.files.iter().any(|f| f.ends_with("timing.csv")));
    }

    #[test]
    fn divergent_chain_is_a_runtime_error() {
        let cfg = parse_config("experiment = synthetic_2d\nseed = 6\nsampler.T = 500\nsampler.a_eps = 50\n").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_experiment(&cfg, dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 3, "{err}");
    }

    #[test]
    fn non_finite_cells_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = CsvOut::create(dir.path(), "x.csv", "", &["a".to_string(), "b".to_string()]).unwrap();
        out.row(&[Cell::Num(1.0), Cell::Int(2)]).unwrap();
        let err = out.row(&[Cell::Num(1.0), Cell::Num(f64::NAN)]).unwrap_err();
        assert!(matches!(err, ExperimentError::NonFinite { row: 2, ref column, .. } if column == "b"));
    }

    #[test]
    fn median_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
