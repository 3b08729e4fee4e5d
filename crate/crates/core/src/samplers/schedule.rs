use super::SamplerError;

pub const DEFAULT_EXPONENT: f64 = 0.51;

/// Deterministic step sizes `t ↦ ε_t`, `t ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    /// `ε_t = (a_eps / t)^exponent`.
    Polynomial {
        a_eps: f64,
        exponent: f64,
    },
    Constant {
        eps: f64,
    },
}

impl StepSchedule {
    pub fn polynomial(a_eps: f64) -> Self {
        Self::Polynomial {
            a_eps,
            exponent: DEFAULT_EXPONENT,
        }
    }

    pub fn constant(eps: f64) -> Self {
        Self::Constant { eps }
    }

    pub fn step(&self, t: usize) -> f64 {
        match *self {
            Self::Polynomial { a_eps, exponent } => (a_eps / t.max(1) as f64).powf(exponent),
            Self::Constant { eps } => eps,
        }
    }

    pub fn validate(&self) -> Result<(), SamplerError> {
        match *self {
            Self::Polynomial { a_eps, exponent } => {
                if !(a_eps > 0.0 && a_eps.is_finite()) {
                    return Err(SamplerError::InvalidConfig(format!(
                        "a_eps must be positive, got {a_eps}"
                    )));
                }
                if !(exponent >= 0.0 && exponent.is_finite()) {
                    return Err(SamplerError::InvalidConfig(format!(
                        "exponent must be nonnegative, got {exponent}"
                    )));
                }
            }
            Self::Constant { eps } => {
                if !(eps > 0.0 && eps.is_finite()) {
                    return Err(SamplerError::InvalidConfig(format!(
                        "eps_const must be positive, got {eps}"
                    )));
                }
            }
        }
        Ok(())
    }
}
