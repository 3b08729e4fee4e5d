//! Limited-memory BFGS inverse-Hessian approximations.
//!
//! [`LbfgsMemory`] stores up to `M - 1` damped `(s, y)` pairs over an initial
//! approximation `γI` and exposes the resulting matrix `H` only through
//! products:
//!
//! * [`LbfgsMemory::apply_h`] computes `H v` with the two-loop recursion in
//!   `O(MD)`,
//! * [`LbfgsMemory::apply_sqrt`] computes `S z` for a factor with `S Sᵀ = H`
//!   in `O(M²D)`, using product-form rank-one factor updates for both `H` and
//!   its inverse `B`,
//! * [`LbfgsMemory::dense_h`] materializes `H` for tests and small problems.
//!
//! All vector reductions go through an [`InnerProduct`], so the same code runs
//! on plain vectors and on vectors sharded across simulated workers.

use std::cell::Cell;
use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Pairs with `sᵀy < CURVATURE_FLOOR · ‖s‖‖y‖` are rejected.
pub const CURVATURE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LbfgsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero displacement")]
    ZeroDisplacement,
    #[error("non-positive curvature sᵀy = {value} in pair {pair}")]
    NonPositiveCurvature { pair: usize, value: f64 },
    #[error("degenerate metric: sᵀBs = {value} in pair {pair}")]
    DegenerateMetric { pair: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Reductions and vector updates used by the quasi-Newton recursions.
///
/// `dot` is the only operation that needs communication when vectors are
/// sharded; `axpy` and `scale` are elementwise.
pub trait InnerProduct {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64;

    fn axpy(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += alpha * xi;
        }
    }

    fn scale(&self, alpha: f64, x: &mut [f64]) {
        for xi in x.iter_mut() {
            *xi *= alpha;
        }
    }
}

/// Left-to-right sequential dot product.
pub fn seq_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl InnerProduct for Euclidean {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        seq_dot(a, b)
    }
}

/// Wraps another inner product and counts elementwise work: every `dot`,
/// `axpy` or `scale` over `n` entries adds `n`.
pub struct OpCounter<'a> {
    inner: &'a dyn InnerProduct,
    ops: Cell<u64>,
    dots: Cell<u64>,
}

impl<'a> OpCounter<'a> {
    pub fn new(inner: &'a dyn InnerProduct) -> Self {
        Self {
            inner,
            ops: Cell::new(0),
            dots: Cell::new(0),
        }
    }

    pub fn ops(&self) -> u64 {
        self.ops.get()
    }

    pub fn dots(&self) -> u64 {
        self.dots.get()
    }
}

impl InnerProduct for OpCounter<'_> {
    fn dot(&self, a: &[f64], b: &[f64]) -> f64 {
        self.ops.set(self.ops.get() + a.len() as u64);
        self.dots.set(self.dots.get() + 1);
        self.inner.dot(a, b)
    }

    fn axpy(&self, alpha: f64, x: &[f64], y: &mut [f64]) {
        self.ops.set(self.ops.get() + x.len() as u64);
        self.inner.axpy(alpha, x, y)
    }

    fn scale(&self, alpha: f64, x: &mut [f64]) {
        self.ops.set(self.ops.get() + x.len() as u64);
        self.inner.scale(alpha, x)
    }
}

/// A stored displacement / damped gradient-difference pair.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvaturePair {
    pub s: DVector<f64>,
    pub y: DVector<f64>,
    /// Cached `sᵀy`.
    pub sy: f64,
    /// Caller-supplied label, e.g. the iteration that produced the pair.
    pub tag: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsMemory {
    dim: usize,
    capacity: usize,
    gamma: f64,
    lambda: f64,
    pairs: VecDeque<CurvaturePair>,
}

/// Precomputed product-form factor `S = (I - p_m q_mᵀ)…(I - p_1 q_1ᵀ)·√γ`.
#[derive(Debug, Clone)]
pub struct SqrtFactor {
    sqrt_gamma: f64,
    p: Vec<DVector<f64>>,
    q: Vec<DVector<f64>>,
}

impl SqrtFactor {
    pub fn apply(&self, ip: &dyn InnerProduct, z: &DVector<f64>) -> DVector<f64> {
        let mut x = z.clone();
        ip.scale(self.sqrt_gamma, x.as_mut_slice());
        for (p, q) in self.p.iter().zip(&self.q) {
            let c = ip.dot(q.as_slice(), x.as_slice());
            ip.axpy(-c, p.as_slice(), x.as_mut_slice());
        }
        x
    }
}

impl LbfgsMemory {
    /// `capacity` is the number of stored pairs, `M - 1`.
    pub fn new(dim: usize, capacity: usize, gamma: f64, lambda: f64) -> Result<Self, LbfgsError> {
        if dim == 0 {
            return Err(LbfgsError::InvalidParameter("dimension must be positive".into()));
        }
        if capacity == 0 {
            return Err(LbfgsError::InvalidParameter("capacity must be positive".into()));
        }
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(LbfgsError::InvalidParameter(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(LbfgsError::InvalidParameter(format!(
                "lambda must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            capacity,
            gamma,
            lambda,
            pairs: VecDeque::with_capacity(capacity + 1),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = &CurvaturePair> {
        self.pairs.iter()
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Drops every pair whose tag is below `min_tag`.
    pub fn retain_since(&mut self, min_tag: u64) {
        self.pairs.retain(|p| p.tag >= min_tag);
    }

    fn check(&self, v: &DVector<f64>) -> Result<(), LbfgsError> {
        if v.len() != self.dim {
            return Err(LbfgsError::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Damps `y = y_raw + λs` and stores the pair if it passes the curvature
    /// floor, evicting the oldest pair when full. Returns whether the pair was
    /// stored.
    pub fn push_pair(&mut self, s: &DVector<f64>, y_raw: &DVector<f64>) -> Result<bool, LbfgsError> {
        self.push_pair_with(&Euclidean, s, y_raw, 0)
    }

    pub fn push_pair_with(
        &mut self,
        ip: &dyn InnerProduct,
        s: &DVector<f64>,
        y_raw: &DVector<f64>,
        tag: u64,
    ) -> Result<bool, LbfgsError> {
        self.check(s)?;
        self.check(y_raw)?;
        if s.iter().all(|&v| v == 0.0) {
            return Err(LbfgsError::ZeroDisplacement);
        }
        let mut y = y_raw.clone();
        ip.axpy(self.lambda, s.as_slice(), y.as_mut_slice());
        let sy = ip.dot(s.as_slice(), y.as_slice());
        let ss = ip.dot(s.as_slice(), s.as_slice());
        let yy = ip.dot(y.as_slice(), y.as_slice());
        let floor = CURVATURE_FLOOR * (ss * yy).sqrt();
        if !(sy > 0.0 && sy >= floor && sy.is_finite()) {
            return Ok(false);
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(CurvaturePair {
            s: s.clone(),
            y,
            sy,
            tag,
        });
        Ok(true)
    }

    /// Copy of this memory with every `y` shifted by `extra · s`, i.e. the
    /// approximation for damping `λ + extra`.
    pub fn with_extra_damping(&self, ip: &dyn InnerProduct, extra: f64) -> Self {
        let mut out = self.clone();
        out.lambda += extra;
        for p in out.pairs.iter_mut() {
            ip.axpy(extra, p.s.as_slice(), p.y.as_mut_slice());
            p.sy = ip.dot(p.s.as_slice(), p.y.as_slice());
        }
        out
    }

    pub fn apply_h(&self, v: &DVector<f64>) -> Result<DVector<f64>, LbfgsError> {
        self.apply_h_with(&Euclidean, v)
    }

    /// Two-loop recursion: `H v` in `O(MD)`.
    pub fn apply_h_with(&self, ip: &dyn InnerProduct, v: &DVector<f64>) -> Result<DVector<f64>, LbfgsError> {
        self.check(v)?;
        let mut q = v.clone();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for p in self.pairs.iter().rev() {
            let a = ip.dot(p.s.as_slice(), q.as_slice()) / p.sy;
            ip.axpy(-a, p.y.as_slice(), q.as_mut_slice());
            alphas.push(a);
        }
        ip.scale(self.gamma, q.as_mut_slice());
        for (p, a) in self.pairs.iter().zip(alphas.iter().rev()) {
            let b = ip.dot(p.y.as_slice(), q.as_slice()) / p.sy;
            ip.axpy(a - b, p.s.as_slice(), q.as_mut_slice());
        }
        Ok(q)
    }

    /// Builds the factor `S` with `S Sᵀ = H`.
    ///
    /// Pair `m` (oldest first) contributes `S^m = (I - p qᵀ) S^{m-1}` with
    /// `p = s/(sᵀy)` and `q = y - √(sᵀy / sᵀBs) · Bs`, where `B = B^{m-1}` is
    /// the inverse of the approximation built from the older pairs. `Bs` is
    /// obtained from the companion factor `B^m = C^m C^mᵀ`,
    /// `C^m = (I - u vᵀ) C^{m-1}` with `v = s/(sᵀBs)` and
    /// `u = √(sᵀBs / sᵀy) · y + Bs`, starting from `C^0 = γ^{-1/2} I`.
    pub fn sqrt_factor_with(&self, ip: &dyn InnerProduct) -> Result<SqrtFactor, LbfgsError> {
        let inv_sqrt_gamma = 1.0 / self.gamma.sqrt();
        let n = self.pairs.len();
        let mut u: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut v: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut p_out = Vec::with_capacity(n);
        let mut q_out = Vec::with_capacity(n);
        for (m, pair) in self.pairs.iter().enumerate() {
            if pair.sy <= 0.0 || pair.sy.is_nan() {
                return Err(LbfgsError::NonPositiveCurvature {
                    pair: m,
                    value: pair.sy,
                });
            }
            // c = Cᵀ s, with Cᵀ = C⁰ (I - v_0 u_0ᵀ) ⋯ (I - v_{m-1} u_{m-1}ᵀ).
            let mut c = pair.s.clone();
            for (uj, vj) in u.iter().zip(&v).rev() {
                let k = ip.dot(uj.as_slice(), c.as_slice());
                ip.axpy(-k, vj.as_slice(), c.as_mut_slice());
            }
            ip.scale(inv_sqrt_gamma, c.as_mut_slice());
            let sbs = ip.dot(c.as_slice(), c.as_slice());
            if !(sbs > 0.0 && sbs.is_finite()) {
                return Err(LbfgsError::DegenerateMetric { pair: m, value: sbs });
            }
            // w = C c = B s.
            let mut w = c;
            ip.scale(inv_sqrt_gamma, w.as_mut_slice());
            for (uj, vj) in u.iter().zip(&v) {
                let k = ip.dot(vj.as_slice(), w.as_slice());
                ip.axpy(-k, uj.as_slice(), w.as_mut_slice());
            }

            let mut vm = pair.s.clone();
            ip.scale(1.0 / sbs, vm.as_mut_slice());
            let mut um = pair.y.clone();
            ip.scale((sbs / pair.sy).sqrt(), um.as_mut_slice());
            ip.axpy(1.0, w.as_slice(), um.as_mut_slice());

            let mut pm = pair.s.clone();
            ip.scale(1.0 / pair.sy, pm.as_mut_slice());
            let mut qm = pair.y.clone();
            ip.axpy(-(pair.sy / sbs).sqrt(), w.as_slice(), qm.as_mut_slice());

            u.push(um);
            v.push(vm);
            p_out.push(pm);
            q_out.push(qm);
        }
        Ok(SqrtFactor {
            sqrt_gamma: self.gamma.sqrt(),
            p: p_out,
            q: q_out,
        })
    }

    pub fn apply_sqrt(&self, z: &DVector<f64>) -> Result<DVector<f64>, LbfgsError> {
        self.apply_sqrt_with(&Euclidean, z)
    }

    /// `S z` with `S Sᵀ = H`, in `O(M²D)`.
    pub fn apply_sqrt_with(&self, ip: &dyn InnerProduct, z: &DVector<f64>) -> Result<DVector<f64>, LbfgsError> {
        self.check(z)?;
        let out = self.sqrt_factor_with(ip)?.apply(ip, z);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(LbfgsError::DegenerateMetric {
                pair: self.pairs.len(),
                value: f64::NAN,
            });
        }
        Ok(out)
    }

    /// Dense `H` from the literal recursion
    /// `H^m = (I - ρ s yᵀ) H^{m-1} (I - ρ y sᵀ) + ρ s sᵀ`, `ρ = 1/(sᵀy)`,
    /// `H^0 = γI`.
    pub fn dense_h(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut h = DMatrix::identity(d, d) * self.gamma;
        for p in &self.pairs {
            let rho = 1.0 / p.sy;
            let v = DMatrix::identity(d, d) - &p.s * p.y.transpose() * rho;
            h = &v * h * v.transpose() + &p.s * p.s.transpose() * rho;
        }
        h
    }
}
