//! `key = value` experiment configuration.
//!
//! One assignment per line; blank lines and lines starting with `#` are
//! ignored. Keys are grouped by prefix:
//!
//! ```text
//! experiment = bias_mse            # synthetic_2d | posterior_mean_error | bias_mse | mf_distributed
//! seed = 42
//! timing = false                   # also write wall-clock timing.csv
//!
//! model.dim = 2                    # linear-Gaussian experiments
//! model.num_data = 1000
//! model.sigma_x2 = 10
//! model.correlation = 0.999
//!
//! sampler.T = 20000                # defaults shared by every sampler ...
//! sampler.a_eps = 1e-4
//! hamcmc.a_eps = 5e-4              # ... overridden per sampler kind
//!
//! sweep.samplers = sgld, hamcmc
//! sweep.lengths = 1000, 5000, 20000
//! sweep.replicates = 30
//! sweep.record_every = 100
//!
//! mf.rows = 40                     # matrix-factorization experiment
//! mf.workers = 4
//! ```
//!
//! Sampler fields (under `sampler.` or a kind prefix such as `hamcmc.`):
//! `T`, `burn_in` or `burn_in_fraction`, `M`, `gamma`, `lambda`, `N_omega`
//! (`auto` = N/100, `full`, or a count), `schedule_kind` (`polynomial` or
//! `constant`), `a_eps`, `exponent`, `eps_const`, `alpha`, `lambda_p`,
//! `mirror`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::samplers::{StepSchedule, DEFAULT_EXPONENT, DEFAULT_MEMORY, MAX_MEMORY, MIN_MEMORY};

/// One problem with a config, tied to the key it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Every violation found in a config.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, issue) in self.0.iter().enumerate() {
            if n > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl ConfigErrors {
    pub fn mentions(&self, needle: &str) -> bool {
        self.0
            .iter()
            .any(|i| i.key.contains(needle) || i.message.contains(needle))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Synthetic2d,
    PosteriorMeanError,
    BiasMse,
    MfDistributed,
}

impl ExperimentKind {
    pub const ALL: [Self; 4] = [
        Self::Synthetic2d,
        Self::PosteriorMeanError,
        Self::BiasMse,
        Self::MfDistributed,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Synthetic2d => "synthetic_2d",
            Self::PosteriorMeanError => "posterior_mean_error",
            Self::BiasMse => "bias_mse",
            Self::MfDistributed => "mf_distributed",
        }
    }
}

/// Sampler kinds accepted in `sweep.samplers`.
pub const SERIAL_SAMPLERS: [&str; 5] = ["sgld", "psgld", "sgrld", "naive_qn", "hamcmc"];
pub const DIST_SAMPLERS: [&str; 3] = ["dsgld", "dpsgld", "dhamcmc"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BurnIn {
    Count(usize),
    Fraction(f64),
}

impl BurnIn {
    pub fn resolve(&self, iterations: usize) -> usize {
        match *self {
            Self::Count(n) => n,
            Self::Fraction(f) => (f * iterations as f64).floor() as usize,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    /// `max(1, round(N / 100))`.
    Auto,
    Full,
    Size(usize),
}

impl BatchSpec {
    pub fn resolve(&self, num_data: usize) -> Option<usize> {
        match *self {
            Self::Auto => Some(((num_data as f64 / 100.0).round() as usize).max(1)),
            Self::Full => None,
            Self::Size(n) => Some(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerParams {
    pub iterations: usize,
    pub burn_in: BurnIn,
    pub memory: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub batch: BatchSpec,
    pub schedule: StepSchedule,
    pub alpha: f64,
    pub lambda_p: f64,
    pub mirror: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub num_data: usize,
    pub sigma_x2: f64,
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepParams {
    pub samplers: Vec<String>,
    pub lengths: Vec<usize>,
    pub replicates: usize,
    pub record_every: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfParams {
    pub rows: usize,
    pub cols: usize,
    pub true_rank: usize,
    pub rank: usize,
    pub density: f64,
    pub noise_var: f64,
    pub sigma_w2: f64,
    pub sigma_h2: f64,
    pub sigma_x2: f64,
    pub workers: usize,
    pub test_fraction: f64,
    pub burn_in: usize,
    pub eval_every: usize,
    pub init_scale: f64,
    pub audit_every: usize,
    /// MovieLens `ratings.dat`; used instead of synthetic data when the file exists.
    pub movielens: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub timing: bool,
    pub model: ModelParams,
    pub sweep: SweepParams,
    pub mf: MfParams,
    /// Resolved parameters of each sampler in `sweep.samplers`, same order.
    pub samplers: Vec<(String, SamplerParams)>,
}

impl ExperimentConfig {
    pub fn sampler(&self, name: &str) -> Option<&SamplerParams> {
        self.samplers.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    /// Canonical text with every default made explicit; parsing it yields
    /// this config again.
    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        let mut put = |k: &str, v: String| out.push(format!("{k} = {v}"));
        put("experiment", self.kind.name().into());
        put("seed", self.seed.to_string());
        put("timing", self.timing.to_string());
        let m = &self.model;
        put("model.dim", m.dim.to_string());
        put("model.num_data", m.num_data.to_string());
        put("model.sigma_x2", m.sigma_x2.to_string());
        put("model.correlation", m.correlation.to_string());
        let s = &self.sweep;
        put("sweep.samplers", s.samplers.join(", "));
        put("sweep.lengths", join(&s.lengths));
        put("sweep.replicates", s.replicates.to_string());
        put("sweep.record_every", s.record_every.to_string());
        let f = &self.mf;
        put("mf.rows", f.rows.to_string());
        put("mf.cols", f.cols.to_string());
        put("mf.true_rank", f.true_rank.to_string());
        put("mf.rank", f.rank.to_string());
        put("mf.density", f.density.to_string());
        put("mf.noise_var", f.noise_var.to_string());
        put("mf.sigma_w2", f.sigma_w2.to_string());
        put("mf.sigma_h2", f.sigma_h2.to_string());
        put("mf.sigma_x2", f.sigma_x2.to_string());
        put("mf.workers", f.workers.to_string());
        put("mf.test_fraction", f.test_fraction.to_string());
        put("mf.burn_in", f.burn_in.to_string());
        put("mf.eval_every", f.eval_every.to_string());
        put("mf.init_scale", f.init_scale.to_string());
        put("mf.audit_every", f.audit_every.to_string());
        if let Some(path) = &f.movielens {
            put("mf.movielens", path.clone());
        }
        for (name, p) in &self.samplers {
            let mut put = |k: &str, v: String| put(&format!("{name}.{k}"), v);
            put("T", p.iterations.to_string());
            match p.burn_in {
                BurnIn::Count(n) => put("burn_in", n.to_string()),
                BurnIn::Fraction(x) => put("burn_in_fraction", x.to_string()),
            }
            put("M", p.memory.to_string());
            put("gamma", p.gamma.to_string());
            put("lambda", p.lambda.to_string());
            put(
                "N_omega",
                match p.batch {
                    BatchSpec::Auto => "auto".into(),
                    BatchSpec::Full => "full".into(),
                    BatchSpec::Size(n) => n.to_string(),
                },
            );
            match p.schedule {
                StepSchedule::Polynomial { a_eps, exponent } => {
                    put("schedule_kind", "polynomial".into());
                    put("a_eps", a_eps.to_string());
                    put("exponent", exponent.to_string());
                }
                StepSchedule::Constant { eps } => {
                    put("schedule_kind", "constant".into());
                    put("eps_const", eps.to_string());
                }
            }
            put("alpha", p.alpha.to_string());
            put("lambda_p", p.lambda_p.to_string());
            put("mirror", p.mirror.to_string());
        }
        out.join("\n") + "\n"
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ")
}

/// Raw assignments with use tracking, so leftovers can be reported as unknown.
struct Fields {
    values: BTreeMap<String, String>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
    issues: std::cell::RefCell<Vec<ConfigIssue>>,
}

trait ParseValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
}

macro_rules! parse_via_fromstr {
    ($t:ty, $what:expr) => {
        impl ParseValue for $t {
            const EXPECTED: &'static str = $what;
            fn parse_value(s: &str) -> Option<Self> {
                <$t>::from_str(s).ok()
            }
        }
    };
}

parse_via_fromstr!(usize, "a nonnegative integer");
parse_via_fromstr!(u64, "a nonnegative integer");
parse_via_fromstr!(bool, "true or false");

impl ParseValue for f64 {
    const EXPECTED: &'static str = "a finite number";
    fn parse_value(s: &str) -> Option<Self> {
        f64::from_str(s).ok().filter(|x| x.is_finite())
    }
}

impl Fields {
    fn issue(&self, key: &str, message: impl Into<String>) {
        self.issues.borrow_mut().push(ConfigIssue {
            key: key.to_string(),
            message: message.into(),
        });
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key)?;
        self.used.borrow_mut().insert(key.to_string());
        Some(v.as_str())
    }

    fn get<T: ParseValue>(&self, key: &str) -> Option<T> {
        let raw = self.raw(key)?;
        match T::parse_value(raw) {
            Some(v) => Some(v),
            None => {
                self.issue(key, format!("expected {}, got `{raw}`", T::EXPECTED));
                None
            }
        }
    }

    fn or<T: ParseValue>(&self, key: &str, default: T) -> T {
        self.get(key).unwrap_or(default)
    }

    fn list<T: ParseValue>(&self, key: &str) -> Option<Vec<T>> {
        let raw = self.raw(key)?;
        let mut out = Vec::new();
        for item in raw.split(',').map(str::trim) {
            match T::parse_value(item) {
                Some(v) => out.push(v),
                None => {
                    self.issue(
                        key,
                        format!("expected a comma-separated list of {}, got `{item}`", T::EXPECTED),
                    );
                    return None;
                }
            }
        }
        Some(out)
    }

    fn check(&self, key: &str, ok: bool, message: impl FnOnce() -> String) {
        if !ok {
            self.issue(key, message());
        }
    }

    fn positive(&self, key: &str, v: f64) {
        self.check(key, v > 0.0, || format!("must be positive, got {v}"));
    }

    fn at_least(&self, key: &str, v: usize, min: usize) {
        self.check(key, v >= min, || format!("must be at least {min}, got {v}"));
    }
}

fn tokenize(text: &str) -> (BTreeMap<String, String>, Vec<ConfigIssue>) {
    let mut values = BTreeMap::new();
    let mut issues = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            issues.push(ConfigIssue {
                key: format!("line {}", n + 1),
                message: format!("expected `key = value`, got `{line}`"),
            });
            continue;
        };
        let key = key.trim().to_string();
        let value = value.split(" #").next().unwrap_or("").trim().to_string();
        if values.insert(key.clone(), value).is_some() {
            issues.push(ConfigIssue {
                key,
                message: format!("assigned more than once (line {})", n + 1),
            });
        }
    }
    (values, issues)
}

fn parse_kind(f: &Fields) -> Option<ExperimentKind> {
    let Some(raw) = f.raw("experiment") else {
        f.issue("experiment", "missing required key");
        return None;
    };
    let kind = ExperimentKind::ALL.into_iter().find(|k| k.name() == raw);
    if kind.is_none() {
        let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
        f.issue(
            "experiment",
            format!("unknown experiment `{raw}`, expected one of {}", names.join(", ")),
        );
    }
    kind
}

fn parse_model(f: &Fields, kind: ExperimentKind) -> ModelParams {
    // The two-dimensional experiments use a more strongly coupled posterior.
    let (default_dim, default_correlation) = if kind == ExperimentKind::PosteriorMeanError {
        (10, 0.99)
    } else {
        (2, 0.999)
    };
    let m = ModelParams {
        dim: f.or("model.dim", default_dim),
        num_data: f.or("model.num_data", 1000),
        sigma_x2: f.or("model.sigma_x2", 10.0),
        correlation: f.or("model.correlation", default_correlation),
    };
    f.at_least("model.dim", m.dim, 1);
    f.at_least("model.num_data", m.num_data, 1);
    f.positive("model.sigma_x2", m.sigma_x2);
    f.check("model.correlation", (0.0..1.0).contains(&m.correlation), || {
        format!("must lie in [0, 1), got {}", m.correlation)
    });
    m
}

fn default_samplers(kind: ExperimentKind) -> Vec<&'static str> {
    match kind {
        ExperimentKind::Synthetic2d => vec!["sgld", "hamcmc"],
        ExperimentKind::PosteriorMeanError => vec!["sgld", "sgrld", "hamcmc"],
        ExperimentKind::BiasMse => vec!["hamcmc"],
        ExperimentKind::MfDistributed => vec!["dsgld", "dhamcmc"],
    }
}

fn parse_sweep(f: &Fields, kind: ExperimentKind) -> SweepParams {
    let samplers: Vec<String> = match f.raw("sweep.samplers") {
        Some(raw) => raw.split(',').map(|s| s.trim().to_string()).collect(),
        None => default_samplers(kind).into_iter().map(String::from).collect(),
    };
    let allowed: &[&str] = if kind == ExperimentKind::MfDistributed {
        &DIST_SAMPLERS
    } else {
        &SERIAL_SAMPLERS
    };
    if samplers.is_empty() || samplers.iter().any(|s| s.is_empty()) {
        f.issue("sweep.samplers", "must list at least one sampler");
    }
    for s in &samplers {
        if !s.is_empty() && !allowed.contains(&s.as_str()) {
            f.issue(
                "sweep.samplers",
                format!(
                    "`{s}` is not available for {}, expected one of {}",
                    kind.name(),
                    allowed.join(", ")
                ),
            );
        }
    }
    for (n, s) in samplers.iter().enumerate() {
        if samplers[..n].contains(s) {
            f.issue("sweep.samplers", format!("`{s}` listed twice"));
        }
    }
    let lengths = f.list("sweep.lengths").unwrap_or_else(|| vec![1000, 5000, 20000]);
    f.check("sweep.lengths", !lengths.is_empty() && lengths[0] >= 1, || {
        "must list positive chain lengths".into()
    });
    f.check("sweep.lengths", lengths.windows(2).all(|w| w[0] < w[1]), || {
        "must be strictly increasing".into()
    });
    let s = SweepParams {
        samplers,
        lengths,
        replicates: f.or(
            "sweep.replicates",
            if kind == ExperimentKind::BiasMse { 30 } else { 10 },
        ),
        record_every: f.or("sweep.record_every", 100),
    };
    f.at_least("sweep.replicates", s.replicates, 1);
    f.at_least("sweep.record_every", s.record_every, 1);
    s
}

fn parse_mf(f: &Fields) -> MfParams {
    let m = MfParams {
        rows: f.or("mf.rows", 40),
        cols: f.or("mf.cols", 40),
        true_rank: f.or("mf.true_rank", 3),
        rank: f.or("mf.rank", 3),
        density: f.or("mf.density", 0.5),
        noise_var: f.or("mf.noise_var", 0.1),
        sigma_w2: f.or("mf.sigma_w2", 1.0),
        sigma_h2: f.or("mf.sigma_h2", 1.0),
        sigma_x2: f.or("mf.sigma_x2", 0.1),
        workers: f.or("mf.workers", 4),
        test_fraction: f.or("mf.test_fraction", 0.1),
        burn_in: f.or("mf.burn_in", 50),
        eval_every: f.or("mf.eval_every", 10),
        init_scale: f.or("mf.init_scale", 0.1),
        audit_every: f.or("mf.audit_every", 0),
        movielens: f.raw("mf.movielens").map(String::from),
    };
    for (k, v) in [
        ("mf.rows", m.rows),
        ("mf.cols", m.cols),
        ("mf.true_rank", m.true_rank),
        ("mf.rank", m.rank),
    ] {
        f.at_least(k, v, 1);
    }
    f.check("mf.density", m.density > 0.0 && m.density <= 1.0, || {
        format!("must lie in (0, 1], got {}", m.density)
    });
    for (k, v) in [
        ("mf.noise_var", m.noise_var),
        ("mf.sigma_w2", m.sigma_w2),
        ("mf.sigma_h2", m.sigma_h2),
        ("mf.sigma_x2", m.sigma_x2),
    ] {
        f.positive(k, v);
    }
    f.at_least("mf.workers", m.workers, 1);
    f.check(
        "mf.test_fraction",
        m.test_fraction > 0.0 && m.test_fraction < 1.0,
        || format!("must lie in (0, 1), got {}", m.test_fraction),
    );
    f.at_least("mf.eval_every", m.eval_every, 1);
    f.check("mf.init_scale", m.init_scale >= 0.0, || {
        format!("must be nonnegative, got {}", m.init_scale)
    });
    m
}

/// Resolves `<prefix>.<field>`, falling back to `sampler.<field>`.
fn parse_sampler(f: &Fields, prefix: &str, kind: ExperimentKind) -> SamplerParams {
    let key_of = |field: &str| {
        let own = format!("{prefix}.{field}");
        if f.values.contains_key(&own) {
            own
        } else {
            format!("sampler.{field}")
        }
    };
    let get = |field: &str| key_of(field);
    let iterations = f.or(
        &get("T"),
        if kind == ExperimentKind::MfDistributed {
            500
        } else {
            20000
        },
    );
    let burn_in = [prefix, "sampler"]
        .into_iter()
        .find_map(|p| {
            let (bk, fk) = (format!("{p}.burn_in"), format!("{p}.burn_in_fraction"));
            match (f.get::<usize>(&bk), f.get::<f64>(&fk)) {
                (Some(_), Some(_)) => {
                    f.issue(&bk, format!("conflicts with {fk}"));
                    None
                }
                (Some(n), None) => {
                    f.check(&bk, n <= iterations, || format!("burn_in {n} exceeds T {iterations}"));
                    Some(BurnIn::Count(n))
                }
                (None, Some(x)) => {
                    f.check(&fk, (0.0..1.0).contains(&x), || format!("must lie in [0, 1), got {x}"));
                    Some(BurnIn::Fraction(x))
                }
                (None, None) => None,
            }
        })
        .unwrap_or(BurnIn::Fraction(if kind == ExperimentKind::MfDistributed {
            0.0
        } else {
            0.5
        }));
    f.at_least(&get("T"), iterations, 1);
    // Matrix factorization runs at a constant step; the quasi-Newton sampler
    // needs heavy damping there to keep the metric well conditioned.
    let mf = kind == ExperimentKind::MfDistributed;
    let mf_qn = mf && prefix == "dhamcmc";
    let memory = f.or(&get("M"), if mf_qn { 2 } else { DEFAULT_MEMORY });
    f.check(&get("M"), (MIN_MEMORY..=MAX_MEMORY).contains(&memory), || {
        format!("M must be chosen at least {MIN_MEMORY} and at most {MAX_MEMORY}, got {memory}")
    });
    let gamma = f.or(&get("gamma"), if mf_qn { 1e-3 } else { 1.0 });
    f.positive(&get("gamma"), gamma);
    let lambda = f.or(&get("lambda"), if mf_qn { 1000.0 } else { 0.0 });
    f.check(&get("lambda"), lambda >= 0.0, || {
        format!("must be nonnegative, got {lambda}")
    });
    let batch = match f.raw(&get("N_omega")) {
        None | Some("auto") => BatchSpec::Auto,
        Some("full") => BatchSpec::Full,
        Some(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => BatchSpec::Size(n),
            _ => {
                f.issue(
                    &get("N_omega"),
                    format!("expected auto, full or a positive count, got `{raw}`"),
                );
                BatchSpec::Auto
            }
        },
    };
    let schedule = match f
        .raw(&get("schedule_kind"))
        .unwrap_or(if mf { "constant" } else { "polynomial" })
    {
        "polynomial" => {
            let a_eps = f.or(&get("a_eps"), 1e-4);
            let exponent = f.or(&get("exponent"), DEFAULT_EXPONENT);
            f.positive(&get("a_eps"), a_eps);
            f.check(&get("exponent"), exponent > 0.0 && exponent <= 1.0, || {
                format!("must lie in (0, 1], got {exponent}")
            });
            StepSchedule::Polynomial { a_eps, exponent }
        }
        "constant" => {
            let eps = f.or(&get("eps_const"), if mf_qn { 1.0 } else { 1e-3 });
            f.positive(&get("eps_const"), eps);
            StepSchedule::Constant { eps }
        }
        other => {
            f.issue(
                &get("schedule_kind"),
                format!("expected polynomial or constant, got `{other}`"),
            );
            StepSchedule::polynomial(1e-4)
        }
    };
    // Fields of the schedule kind not in use still count as known keys.
    for field in ["a_eps", "exponent", "eps_const"] {
        f.raw(&get(field));
    }
    let alpha = f.or(&get("alpha"), 0.99);
    f.check(&get("alpha"), (0.0..=1.0).contains(&alpha), || {
        format!("must lie in [0, 1], got {alpha}")
    });
    let lambda_p = f.or(&get("lambda_p"), 1e-5);
    f.positive(&get("lambda_p"), lambda_p);
    SamplerParams {
        iterations,
        burn_in,
        memory,
        gamma,
        lambda,
        batch,
        schedule,
        alpha,
        lambda_p,
        mirror: f.or(&get("mirror"), false),
    }
}

/// Parses and validates a config, reporting every violation at once.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigErrors> {
    parse_config_with_seed(text, None)
}

/// Like [`parse_config`]; `seed_override` replaces (or supplies) `seed`.
pub fn parse_config_with_seed(text: &str, seed_override: Option<u64>) -> Result<ExperimentConfig, ConfigErrors> {
    let (values, issues) = tokenize(text);
    let f = Fields {
        values,
        used: Default::default(),
        issues: std::cell::RefCell::new(issues),
    };
    let kind = parse_kind(&f);
    let seed = f.get::<u64>("seed");
    let seed = match (seed_override, seed) {
        (Some(s), _) => Some(s),
        (None, Some(s)) => Some(s),
        (None, None) => {
            if !f.values.contains_key("seed") {
                f.issue("seed", "missing required key");
            }
            None
        }
    };
    let timing = f.or("timing", false);
    let k = kind.unwrap_or(ExperimentKind::Synthetic2d);
    let model = parse_model(&f, k);
    let sweep = parse_sweep(&f, k);
    let mf = parse_mf(&f);
    if kind == Some(ExperimentKind::MfDistributed) {
        f.check("mf.workers", mf.workers <= mf.rows.min(mf.cols), || {
            format!("must not exceed min(mf.rows, mf.cols), got {}", mf.workers)
        });
    }
    let mut samplers = Vec::new();
    for name in SERIAL_SAMPLERS.iter().chain(DIST_SAMPLERS.iter()) {
        let listed = sweep.samplers.iter().any(|s| s == name);
        let mentioned = f.values.keys().any(|key| key.starts_with(&format!("{name}.")));
        if listed || mentioned {
            let params = parse_sampler(&f, name, k);
            if listed {
                samplers.push((name.to_string(), params));
            }
        }
    }
    if samplers.is_empty() {
        // Validate shared sampler keys even when no sampler resolved.
        parse_sampler(&f, "sampler", k);
    }
    samplers.sort_by_key(|(n, _)| sweep.samplers.iter().position(|s| s == n));
    for key in f.values.keys() {
        if !f.used.borrow().contains(key) {
            f.issue(key, format!("unknown key `{key}`"));
        }
    }
    let mut issues = f.issues.into_inner();
    let mut seen = std::collections::HashSet::new();
    issues.retain(|i| seen.insert(i.clone()));
    match (kind, seed) {
        (Some(kind), Some(seed)) if issues.is_empty() => Ok(ExperimentConfig {
            kind,
            seed,
            timing,
            model,
            sweep,
            mf,
            samplers,
        }),
        _ => Err(ConfigErrors(issues)),
    }
}
