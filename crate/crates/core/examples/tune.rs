//! Grid search behind the step sizes and metric settings used by the
//! acceptance suite.
//!
//! Every sampler gets the same step-size grid and is scored by the median of
//! its error over tuning seeds that are disjoint from the seeds the acceptance
//! suite evaluates on. Quasi-Newton samplers additionally search `gamma` and
//! `lambda` (and `M` for the distributed sampler).
//!
//! ```text
//! cargo run --release --example tune -- cov2d     # 2-D covariance recovery
//! cargo run --release --example tune -- mean10    # 10-D posterior mean error
//! cargo run --release --example tune -- mf        # 40 x 40 matrix factorization
//! ```

use hamcmc::cli::config::parse_config_with_seed;
use hamcmc::cli::experiments::{median, mf_data, run_mf_chain};
use hamcmc::diagnostics::{empirical_cov, posterior_mean_error};
use hamcmc::dist_sim::build_partition;
use hamcmc::models::{GaussianMfModel, LinearGaussianModel, LinearGaussianSpec, MfPriors};
use hamcmc::rng::{stream_rng, DATA_STREAM};
use hamcmc::samplers::BatchSize;
use hamcmc::{run_chain, ChainConfig, SamplerKind, StepSchedule};
use rayon::prelude::*;

const TUNING_SEEDS: std::ops::Range<u64> = 1000..1040;
const A_EPS: [f64; 11] = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0, 10.0];
const GAMMA: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
const LAMBDA: [f64; 2] = [0.0, 1.0];

#[derive(Clone, Copy)]
enum Score {
    Covariance,
    Mean,
}

fn model(dim: usize, correlation: f64, seed: u64) -> LinearGaussianModel {
    let spec = LinearGaussianSpec {
        dim,
        num_data: 1000,
        sigma_x2: 10.0,
        correlation,
    };
    LinearGaussianModel::generate(&spec, &mut stream_rng(seed, DATA_STREAM, 0))
        .expect("valid spec")
        .model
}

fn score(dim: usize, correlation: f64, score: Score, base: &ChainConfig) -> f64 {
    let errors: Vec<f64> = TUNING_SEEDS
        .into_par_iter()
        .map(|seed| {
            let model = model(dim, correlation, seed);
            let cfg = ChainConfig { seed, ..base.clone() };
            let Ok(trace) = run_chain(&cfg, &model) else {
                return f64::INFINITY;
            };
            let err = match score {
                Score::Covariance => {
                    let (_, cov) = model.analytic_posterior();
                    empirical_cov(&trace).map(|est| (&est - &cov).norm() / cov.norm())
                }
                Score::Mean => posterior_mean_error(&trace, &model),
            };
            err.ok().filter(|e| e.is_finite()).unwrap_or(f64::INFINITY)
        })
        .collect();
    median(&errors)
}

fn linear_gaussian(dim: usize, correlation: f64, memory: usize, kinds: &[SamplerKind], metric: Score) {
    for &kind in kinds {
        let metric_grid: Vec<(f64, f64)> = if kind.is_quasi_newton() {
            GAMMA
                .iter()
                .flat_map(|&g| LAMBDA.iter().map(move |&l| (g, l)))
                .collect()
        } else {
            vec![(1.0, 0.0)]
        };
        let mut best = (f64::INFINITY, 0.0, 0.0, 0.0);
        for &(gamma, lambda) in &metric_grid {
            for a_eps in A_EPS {
                let mut cfg = ChainConfig::new(kind, 20_000, StepSchedule::polynomial(a_eps));
                cfg.burn_in = 10_000;
                cfg.memory = memory;
                cfg.gamma = gamma;
                cfg.lambda = lambda;
                cfg.batch = BatchSize::WithReplacement(10);
                cfg.keep_samples = true;
                let s = score(dim, correlation, metric, &cfg);
                println!("{} gamma={gamma} lambda={lambda} a_eps={a_eps}: {s:.4}", kind.name());
                if s < best.0 {
                    best = (s, gamma, lambda, a_eps);
                }
            }
        }
        println!(
            "best {}: gamma={} lambda={} a_eps={} median {:.4}",
            kind.name(),
            best.1,
            best.2,
            best.3,
            best.0
        );
    }
}

fn mf_score(lines: &str, name: &str) -> f64 {
    let text = format!("experiment = mf_distributed\nmf.burn_in = 50\nsweep.samplers = {name}\n{lines}");
    let rmse: Vec<f64> = (1000..1020u64)
        .into_par_iter()
        .map(|seed| {
            let cfg = parse_config_with_seed(&text, Some(seed)).expect("valid config");
            let p = &cfg.samplers[0].1;
            let mf = &cfg.mf;
            let data = mf_data(&cfg).expect("synthetic data");
            let priors = MfPriors {
                sigma_w2: mf.sigma_w2,
                sigma_h2: mf.sigma_h2,
                sigma_x2: mf.sigma_x2,
            };
            let model = GaussianMfModel::new(data.rows, data.cols, mf.rank, data.train.clone(), priors).expect("model");
            let plan = build_partition(data.rows, data.cols, mf.workers, model.observed()).expect("plan");
            match run_mf_chain(&cfg, &data, &model, &plan, name, p, 0) {
                Ok(run) => run.curve.last().map_or(f64::INFINITY, |c| c.1),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    median(&rmse)
}

fn matrix_factorization() {
    let eps = [1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0];
    let mut best = (f64::INFINITY, String::new());
    for e in eps {
        let lines = format!("sampler.schedule_kind = constant\nsampler.eps_const = {e}\n");
        let s = mf_score(&lines, "dsgld");
        println!("dsgld eps={e}: {s:.4}");
        if s < best.0 {
            best = (s, lines);
        }
    }
    println!("best dsgld: {:?} median {:.4}", best.1, best.0);
    let mut best = (f64::INFINITY, String::new());
    for m in [2, 3] {
        for gamma in [1e-3, 1e-2, 1e-1, 1.0] {
            for lambda in [1.0, 10.0, 100.0, 1000.0] {
                for e in eps {
                    let lines = format!(
                        "sampler.schedule_kind = constant\nsampler.eps_const = {e}\nsampler.M = {m}\nsampler.gamma = {gamma}\nsampler.lambda = {lambda}\n"
                    );
                    let s = mf_score(&lines, "dhamcmc");
                    println!("dhamcmc M={m} gamma={gamma} lambda={lambda} eps={e}: {s:.4}");
                    if s < best.0 {
                        best = (s, lines);
                    }
                }
            }
        }
    }
    println!("best dhamcmc: {:?} median {:.4}", best.1, best.0);
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_default();
    match which.as_str() {
        "cov2d" => linear_gaussian(
            2,
            0.999,
            2,
            &[SamplerKind::Sgld, SamplerKind::Hamcmc],
            Score::Covariance,
        ),
        "mean10" => linear_gaussian(
            10,
            0.99,
            3,
            &[SamplerKind::Sgld, SamplerKind::Sgrld, SamplerKind::Hamcmc],
            Score::Mean,
        ),
        "mf" => matrix_factorization(),
        _ => eprintln!("usage: tune <cov2d|mean10|mf>"),
    }
}
