use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::lbfgs::{InnerProduct, LbfgsMemory};
use crate::models::{GradientParts, LinearGaussianModel, LinearGaussianSpec, Minibatch, Model, ModelError};
use crate::rng::{stream_rng, BATCH_STREAM, NOISE_STREAM};

/// `U ≡ 0`.
struct FlatModel(usize);

impl Model for FlatModel {
    fn dim(&self) -> usize {
        self.0
    }
    fn num_data(&self) -> usize {
        0
    }
    fn potential(&self, _: &DVector<f64>) -> Result<f64, ModelError> {
        Ok(0.0)
    }
    fn prior_grad(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(theta.len())
    }
    fn accumulate_lik_grad(&self, _: &DVector<f64>, _: usize, _: &mut DVector<f64>) {}
}

/// Serial environment with the noise switched off.
struct QuietEnv<'m>(SerialEnv<'m>);

impl StepEnv for QuietEnv<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }
    fn draw_batch(&mut self) -> Result<Minibatch, SamplerError> {
        self.0.draw_batch()
    }
    fn gradient(&mut self, theta: &DVector<f64>, batch: &Minibatch) -> Result<GradientParts, SamplerError> {
        self.0.gradient(theta, batch)
    }
    fn standard_normal(&mut self) -> DVector<f64> {
        DVector::zeros(self.0.dim())
    }
    fn inner(&self) -> &dyn InnerProduct {
        self.0.inner()
    }
    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        self.0.expected_fim_inverse()
    }
}

/// Returns scripted gradients and noise vectors in order.
struct ScriptEnv {
    dim: usize,
    grads: Vec<GradientParts>,
    noise: Vec<DVector<f64>>,
}

impl StepEnv for ScriptEnv {
    fn dim(&self) -> usize {
        self.dim
    }
    fn draw_batch(&mut self) -> Result<Minibatch, SamplerError> {
        Ok(Minibatch::new(vec![0]))
    }
    fn gradient(&mut self, _: &DVector<f64>, _: &Minibatch) -> Result<GradientParts, SamplerError> {
        Ok(self.grads.remove(0))
    }
    fn standard_normal(&mut self) -> DVector<f64> {
        self.noise.remove(0)
    }
    fn inner(&self) -> &dyn InnerProduct {
        &crate::lbfgs::Euclidean
    }
    fn expected_fim_inverse(&self) -> Option<DMatrix<f64>> {
        None
    }
}

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn lg_model(seed: u64, dim: usize, n: usize, sigma_x2: f64) -> LinearGaussianModel {
    let spec = LinearGaussianSpec {
        dim,
        num_data: n,
        sigma_x2,
        correlation: 0.9,
    };
    LinearGaussianModel::generate(&spec, &mut ChaCha8Rng::seed_from_u64(seed))
        .unwrap()
        .model
}

fn prior_only(dim: usize) -> LinearGaussianModel {
    LinearGaussianModel::new(DMatrix::zeros(0, dim), DVector::zeros(0), 1.0).unwrap()
}

fn bits_equal(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    a.len() == b.len() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn sgld_fixed_point_without_gradient_or_noise() {
    let model = FlatModel(3);
    let mut env = QuietEnv(SerialEnv::new(&model, BatchSize::Full, 1));
    let mut cfg = ChainConfig::new(SamplerKind::Sgld, 10, StepSchedule::polynomial(0.1));
    cfg.init = Some(v(&[1.0, -2.0, 0.5]));
    let trace = run_chain_with_env(&cfg, &mut env).unwrap();
    assert!(trace.samples.iter().all(|s| s == &v(&[1.0, -2.0, 0.5])));
}

#[test]
fn sgld_matches_scripted_reference() {
    let model = lg_model(3, 1, 50, 2.0);
    let (seed, n_omega, a_eps, steps) = (11, 5, 0.01, 40);
    let mut cfg = ChainConfig::new(SamplerKind::Sgld, steps, StepSchedule::polynomial(a_eps));
    cfg.batch = BatchSize::WithReplacement(n_omega);
    cfg.seed = seed;
    cfg.init = Some(v(&[0.3]));
    let trace = run_chain(&cfg, &model).unwrap();

    let a: Vec<f64> = (0..50).map(|n| model.row(n)[0]).collect();
    let x = model.observations();
    let mut rb = stream_rng(seed, BATCH_STREAM, 0);
    let mut rn = stream_rng(seed, NOISE_STREAM, 0);
    let mut theta = 0.3f64;
    for t in 1..=steps {
        let eps = (a_eps / t as f64).powf(0.51);
        let idx: Vec<usize> = (0..n_omega).map(|_| rb.random_range(0..50)).collect();
        let lik: f64 = idx.iter().map(|&i| (a[i] * theta - x[i]) * a[i] / 2.0).sum();
        let grad = theta + 50.0 / n_omega as f64 * lik;
        let z: f64 = rn.sample(StandardNormal);
        theta = theta - eps * grad + (2.0 * eps).sqrt() * z;
        assert!((trace.samples[t - 1][0] - theta).abs() < 1e-12, "step {t}");
        assert_eq!(trace.eps[t - 1], eps);
    }
}

#[test]
fn sgld_increment_variance() {
    let model = FlatModel(1);
    let eps = 0.01;
    let n = 100_000;
    let cfg = ChainConfig::new(SamplerKind::Sgld, n, StepSchedule::constant(eps));
    let trace = run_chain(&cfg, &model).unwrap();
    let mut prev = 0.0;
    let mut sum2 = 0.0;
    for s in &trace.samples {
        sum2 += (s[0] - prev).powi(2);
        prev = s[0];
    }
    let var = sum2 / n as f64;
    assert!((var / (2.0 * eps) - 1.0).abs() < 0.05, "{var}");
}

#[test]
fn zero_iterations_give_empty_trace() {
    let model = prior_only(2);
    let trace = run_chain(
        &ChainConfig::new(SamplerKind::Hamcmc, 0, StepSchedule::polynomial(0.1)),
        &model,
    )
    .unwrap();
    assert!(trace.is_empty());
    assert!(trace.samples.is_empty());
}

#[test]
fn runs_are_deterministic() {
    let model = lg_model(1, 3, 200, 1.0);
    for kind in [
        SamplerKind::Sgld,
        SamplerKind::Psgld {
            alpha: 0.9,
            lambda_p: 1e-3,
        },
        SamplerKind::Sgrld,
        SamplerKind::NaiveQn,
        SamplerKind::Hamcmc,
    ] {
        let mut cfg = ChainConfig::new(kind, 60, StepSchedule::polynomial(1e-3));
        cfg.batch = BatchSize::WithReplacement(4);
        cfg.lambda = 0.1;
        cfg.seed = 5;
        assert_eq!(
            run_chain(&cfg, &model).unwrap(),
            run_chain(&cfg, &model).unwrap(),
            "{}",
            kind.name()
        );
    }
}

#[test]
fn psgld_with_unit_offset_and_frozen_zero_state_is_sgld() {
    let model = lg_model(2, 2, 100, 1.0);
    let mut cfg = ChainConfig::new(SamplerKind::Sgld, 30, StepSchedule::polynomial(1e-3));
    cfg.batch = BatchSize::WithReplacement(10);
    cfg.seed = 8;
    let sgld = run_chain(&cfg, &model).unwrap();
    cfg.sampler = SamplerKind::Psgld {
        alpha: 1.0,
        lambda_p: 1.0,
    };
    let psgld = run_chain(&cfg, &model).unwrap();
    for (a, b) in sgld.samples.iter().zip(&psgld.samples) {
        assert!(bits_equal(a, b));
    }
}

#[test]
fn psgld_with_alpha_one_keeps_v() {
    let model = lg_model(2, 2, 100, 1.0);
    let cfg = ChainConfig::new(
        SamplerKind::Psgld {
            alpha: 1.0,
            lambda_p: 0.5,
        },
        1,
        StepSchedule::polynomial(1e-3),
    );
    let mut env = SerialEnv::new(&model, BatchSize::WithReplacement(3), 0);
    let mut state = ChainState::new(&cfg, &env).unwrap();
    for _ in 0..20 {
        state.step(&mut env, &cfg.schedule).unwrap();
        assert_eq!(state.precond_v(), &DVector::zeros(2));
    }
}

#[test]
fn psgld_two_step_hand_trace() {
    let (alpha, lambda_p) = (0.5, 0.1);
    let grads = vec![
        GradientParts {
            grad: v(&[1.0, -2.0]),
            lik_mean: v(&[0.4, 0.2]),
        },
        GradientParts {
            grad: v(&[0.5, 0.25]),
            lik_mean: v(&[-0.6, 0.0]),
        },
    ];
    let noise = vec![v(&[0.3, -0.1]), v(&[-1.0, 2.0])];
    let mut env = ScriptEnv { dim: 2, grads, noise };
    let cfg = ChainConfig::new(SamplerKind::Psgld { alpha, lambda_p }, 2, StepSchedule::constant(0.02));
    let trace = run_chain_with_env(&cfg, &mut env).unwrap();
    // v1 = 0.5·(0.16, 0.04) = (0.08, 0.02); v2 = 0.5·v1 + 0.5·(0.36, 0) = (0.22, 0.01).
    let step = |theta: [f64; 2], v: [f64; 2], g: [f64; 2], z: [f64; 2]| -> [f64; 2] {
        let mut out = [0.0; 2];
        for i in 0..2 {
            let h = 1.0 / (lambda_p + v[i].sqrt());
            out[i] = theta[i] - 0.02 * h * g[i] + (0.04f64).sqrt() * h.sqrt() * z[i];
        }
        out
    };
    let t1 = step([0.0, 0.0], [0.08, 0.02], [1.0, -2.0], [0.3, -0.1]);
    let t2 = step(t1, [0.22, 0.01], [0.5, 0.25], [-1.0, 2.0]);
    for i in 0..2 {
        assert!((trace.samples[0][i] - t1[i]).abs() < 1e-14);
        assert!((trace.samples[1][i] - t2[i]).abs() < 1e-14);
    }
}

#[test]
fn sgrld_without_data_is_sgld() {
    let model = prior_only(3);
    let mut cfg = ChainConfig::new(SamplerKind::Sgld, 25, StepSchedule::polynomial(1e-2));
    cfg.init = Some(v(&[1.0, 2.0, -1.0]));
    let sgld = run_chain(&cfg, &model).unwrap();
    cfg.sampler = SamplerKind::Sgrld;
    let sgrld = run_chain(&cfg, &model).unwrap();
    for (a, b) in sgld.samples.iter().zip(&sgrld.samples) {
        assert!((a - b).amax() < 1e-15);
    }
}

#[test]
fn sgrld_requires_constant_metric() {
    let model = FlatModel(2);
    let cfg = ChainConfig::new(SamplerKind::Sgrld, 5, StepSchedule::polynomial(1e-2));
    assert!(matches!(run_chain(&cfg, &model), Err(SamplerError::Unsupported(_))));
}

#[test]
fn sgrld_stationary_covariance() {
    let model = lg_model(21, 2, 1000, 10.0);
    let (_, cov) = model.analytic_posterior();
    let mut cfg = ChainConfig::new(SamplerKind::Sgrld, 100_000, StepSchedule::constant(0.05));
    cfg.burn_in = 1000;
    cfg.seed = 3;
    cfg.init = Some(model.analytic_posterior().0);
    let trace = run_chain(&cfg, &model).unwrap();
    let est = crate::diagnostics::empirical_cov(&trace).unwrap();
    let rel = (&est - &cov).norm() / cov.norm();
    assert!(rel < 0.10, "relative covariance error {rel}");
}

#[test]
fn quasi_newton_warmup_is_sgld() {
    let model = lg_model(4, 2, 100, 1.0);
    let mut cfg = ChainConfig::new(SamplerKind::Sgld, 6, StepSchedule::polynomial(1e-3));
    cfg.batch = BatchSize::WithReplacement(10);
    cfg.memory = 3;
    cfg.lambda = 0.1;
    let sgld = run_chain(&cfg, &model).unwrap();
    for kind in [SamplerKind::Hamcmc, SamplerKind::NaiveQn] {
        cfg.sampler = kind;
        let qn = run_chain(&cfg, &model).unwrap();
        for (a, b) in sgld.samples.iter().zip(&qn.samples) {
            assert!(bits_equal(a, b), "{}", kind.name());
        }
        assert!(qn.steps.iter().all(|s| s.warmup));
        // Pairs are formed from iteration M + 2 = 5 on.
        let formed: Vec<_> = qn.steps.iter().map(|s| s.pair_accepted.is_some()).collect();
        assert_eq!(formed, vec![false, false, false, false, true, true]);
    }
}

#[test]
fn empty_memory_metric_is_identity() {
    let model = lg_model(4, 3, 100, 1.0);
    let cfg = ChainConfig::new(SamplerKind::Hamcmc, 1, StepSchedule::polynomial(1e-3));
    let env = SerialEnv::new(&model, BatchSize::Full, 0);
    let state = ChainState::new(&cfg, &env).unwrap();
    let g = v(&[0.1, -4.0, 2.5]);
    let z = v(&[1.5, 0.2, -0.7]);
    let (xi, eta) = state.preview_metric(&env, &g, &z).unwrap();
    assert!(bits_equal(&xi, &g));
    assert!(bits_equal(&eta, &z));
}

#[test]
fn metric_ignores_the_base_point() {
    let model = lg_model(6, 4, 200, 1.0);
    let mut cfg = ChainConfig::new(SamplerKind::Hamcmc, 1, StepSchedule::polynomial(1e-3));
    cfg.batch = BatchSize::WithReplacement(20);
    cfg.lambda = 0.5;
    cfg.memory = 3;
    let mut env = SerialEnv::new(&model, cfg.batch, 2);
    let mut state = ChainState::new(&cfg, &env).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        state.step(&mut env, &cfg.schedule).unwrap();
        let g = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
        let before = state.preview_metric(&env, &g, &z).unwrap();
        if state.history().len() < cfg.memory {
            continue;
        }
        let mut perturbed = state.clone();
        perturbed.hamcmc_base_mut().iter_mut().for_each(|x| *x += 3.0);
        let after = perturbed.preview_metric(&env, &g, &z).unwrap();
        assert!(bits_equal(&before.0, &after.0) && bits_equal(&before.1, &after.1));
    }
}

/// With zero noise and a prior-only target, each step is
/// `θ_t = base - ε H base` with `H` read off the state before the step.
#[test]
fn update_reads_the_expected_base_point() {
    let model = prior_only(3);
    for (kind, lag) in [(SamplerKind::Hamcmc, 3), (SamplerKind::NaiveQn, 1)] {
        let mut cfg = ChainConfig::new(kind, 1, StepSchedule::constant(0.05));
        cfg.memory = 3;
        cfg.lambda = 0.0;
        cfg.init = Some(v(&[1.0, -0.5, 2.0]));
        let mut env = QuietEnv(SerialEnv::new(&model, BatchSize::Full, 0));
        let mut state = ChainState::new(&cfg, &env).unwrap();
        for t in 1..=12usize {
            let history: Vec<_> = state.history().iter().cloned().collect();
            let mut mem = state.lbfgs().clone();
            mem.retain_since((t + 1).saturating_sub(cfg.memory) as u64);
            state.step(&mut env, &cfg.schedule).unwrap();
            if t > 2 * cfg.memory {
                let base = &history[history.len() - lag];
                let expected = base - mem.dense_h() * base * 0.05;
                assert!((state.current() - expected).amax() < 1e-12, "{} step {t}", kind.name());
            }
        }
    }
}

/// Straight-line dense reimplementation of the Hessian-approximated sampler
/// for `M = 2`: `2M` warm-up steps, then the main loop.
#[test]
fn hamcmc_matches_straight_line_reference() {
    let model = lg_model(9, 2, 40, 1.0);
    let (seed, n_omega, lambda, gamma, iters) = (13, 4, 0.5, 1.0, 7);
    let schedule = StepSchedule::polynomial(1e-2);
    let mut cfg = ChainConfig::new(SamplerKind::Hamcmc, 1, schedule);
    cfg.memory = 2;
    cfg.lambda = lambda;
    cfg.gamma = gamma;
    cfg.seed = seed;
    cfg.batch = BatchSize::WithReplacement(n_omega);
    cfg.init = Some(v(&[0.5, -0.5]));
    let mut env = SerialEnv::new(&model, cfg.batch, seed);
    let mut state = ChainState::new(&cfg, &env).unwrap();

    let n = 40;
    let rows: Vec<DVector<f64>> = (0..n).map(|i| v(model.row(i))).collect();
    let x = model.observations().to_vec();
    let grad = |theta: &DVector<f64>, idx: &[usize]| -> DVector<f64> {
        let mut g = theta.clone();
        for &i in idx {
            g += &rows[i] * ((rows[i].dot(theta) - x[i]) * n as f64 / idx.len() as f64);
        }
        g
    };
    let mut rb = stream_rng(seed, BATCH_STREAM, 0);
    let mut rn = stream_rng(seed, NOISE_STREAM, 0);
    let mut thetas = vec![v(&[0.5, -0.5])];
    let mut pair: Option<(DVector<f64>, DVector<f64>)> = None;
    let m = 2;
    for t in 1..=iters {
        let eps = (1e-2 / t as f64).powf(0.51);
        let idx: Vec<usize> = (0..n_omega).map(|_| rb.random_range(0..n)).collect();
        let z = DVector::from_fn(2, |_, _| rn.sample::<f64, _>(StandardNormal));
        let (base, h, s_mat) = if t <= 2 * m {
            (
                thetas[t - 1].clone(),
                DMatrix::identity(2, 2) * gamma,
                DMatrix::identity(2, 2) * gamma.sqrt(),
            )
        } else {
            let (s, y) = pair.clone().expect("pair from the previous iteration");
            let rho = 1.0 / s.dot(&y);
            let id = DMatrix::<f64>::identity(2, 2);
            let vmat = &id - &s * y.transpose() * rho;
            let h = &vmat * (&id * gamma) * vmat.transpose() + &s * s.transpose() * rho;
            let b0 = &id / gamma;
            let bs = &b0 * &s;
            let sbs = s.dot(&bs);
            let q = &y - &bs * (s.dot(&y) / sbs).sqrt();
            let s_mat = (&id - &s * q.transpose() * rho) * gamma.sqrt();
            (thetas[t - m].clone(), h, s_mat)
        };
        let g_base = grad(&base, &idx);
        let theta = &base - &h * &g_base * eps + &s_mat * &z * (2.0 * eps).sqrt();
        if t >= m + 2 {
            let pbase = &thetas[t - m];
            let s = &theta - pbase;
            let y = grad(&theta, &idx) - grad(pbase, &idx) + &s * lambda;
            pair = Some((s, y));
        }
        thetas.push(theta);

        let info = state.step(&mut env, &schedule).unwrap();
        assert!((state.current() - &thetas[t]).amax() < 1e-12, "theta at {t}");
        if let Some((s, y)) = &pair {
            if t >= m + 2 {
                assert_eq!(info.pair_accepted, Some(true));
                let stored = state.lbfgs().pairs().last().unwrap();
                assert!(
                    (&stored.s - s).amax() < 1e-12 && (&stored.y - y).amax() < 1e-10,
                    "pair at {t}"
                );
                assert_eq!(stored.tag, t as u64);
            }
        }
    }
}

#[test]
fn noise_covariance_matches_metric() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let dim = 4;
    let a = {
        let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        &g * g.transpose() / dim as f64 + DMatrix::identity(dim, dim) * 0.2
    };
    let mut mem = LbfgsMemory::new(dim, 3, 0.7, 0.1).unwrap();
    while mem.len() < 3 {
        let s = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        mem.push_pair(&s, &(&a * &s)).unwrap();
    }
    let eps: f64 = 0.01;
    let draws = 100_000;
    let mut cov = DMatrix::zeros(dim, dim);
    for _ in 0..draws {
        let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let eta = mem.apply_sqrt(&z).unwrap() * (2.0 * eps).sqrt();
        cov += &eta * eta.transpose();
    }
    cov /= draws as f64;
    let target = mem.dense_h() * (2.0 * eps);
    let rel = (&cov - &target).norm() / target.norm();
    assert!(rel < 0.05, "{rel}");
}

#[test]
fn mirror_cases() {
    assert_eq!(mirror(&v(&[-1.0, 2.0])), v(&[1.0, 2.0]));
    assert_eq!(mirror(&v(&[0.0, 0.0])), v(&[0.0, 0.0]));
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let x = DVector::from_fn(5, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert_eq!(mirror(&mirror(&x)), mirror(&x));
    }
}

#[test]
fn mirrored_chains_stay_nonnegative() {
    let model = lg_model(2, 3, 100, 1.0);
    for kind in [SamplerKind::Sgld, SamplerKind::Hamcmc] {
        let mut cfg = ChainConfig::new(kind, 200, StepSchedule::polynomial(1e-2));
        cfg.mirror = true;
        cfg.lambda = 0.5;
        cfg.batch = BatchSize::WithReplacement(5);
        let trace = run_chain(&cfg, &model).unwrap();
        assert!(trace.samples.iter().all(|s| s.iter().all(|&x| x >= 0.0)));
    }
}

#[test]
fn config_validation() {
    let model = prior_only(2);
    let base = ChainConfig::new(SamplerKind::Hamcmc, 10, StepSchedule::polynomial(0.1));
    let bad = [
        ChainConfig {
            memory: 1,
            ..base.clone()
        },
        ChainConfig {
            memory: 21,
            ..base.clone()
        },
        ChainConfig {
            gamma: 0.0,
            ..base.clone()
        },
        ChainConfig {
            lambda: -1.0,
            ..base.clone()
        },
        ChainConfig {
            burn_in: 11,
            ..base.clone()
        },
        ChainConfig {
            batch: BatchSize::WithReplacement(0),
            ..base.clone()
        },
        ChainConfig {
            init: Some(v(&[1.0])),
            ..base.clone()
        },
        ChainConfig {
            sampler: SamplerKind::Psgld {
                alpha: 1.5,
                lambda_p: 1.0,
            },
            ..base.clone()
        },
        ChainConfig {
            sampler: SamplerKind::Psgld {
                alpha: 0.5,
                lambda_p: 0.0,
            },
            ..base.clone()
        },
        ChainConfig {
            schedule: StepSchedule::constant(-1.0),
            ..base.clone()
        },
    ];
    for cfg in bad {
        assert!(
            matches!(run_chain(&cfg, &model), Err(SamplerError::InvalidConfig(_))),
            "{cfg:?}"
        );
    }
    let err = ChainConfig { memory: 1, ..base }.validate(2).unwrap_err();
    assert!(err.to_string().contains("M must be chosen at least 2"));
}

#[test]
fn divergence_is_reported() {
    let model = lg_model(2, 2, 100, 0.01);
    let cfg = ChainConfig::new(SamplerKind::Sgld, 500, StepSchedule::constant(10.0));
    assert!(matches!(run_chain(&cfg, &model), Err(SamplerError::NonFinite(_))));
}
