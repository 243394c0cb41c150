//! Csiszár entropy functions, their convex conjugates and α-scaling.
//!
//! An [`EntropyFunction`] with scale `α` stands for the entropy `αΨ`, whose
//! conjugate is `(αΨ)*(x) = α Ψ*(x / α)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{sigmoid, softplus, AutodiffError, Graph, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyKind {
    /// `Ψ(t) = t log t − t + 1`, `Ψ*(x) = eˣ − 1`.
    Kl,
    /// `Ψ(t) = (t − 1)²`, `Ψ*(x) = x²/4 + x` for `x ≥ −2`, else `−1`.
    ChiSquared,
    /// `Ψ(t) = t log t + (1 − t) log(1 − t)` on `[0, 1]`, `Ψ*(x) = log(1 + eˣ)`.
    Softplus,
    /// Hard marginal constraint: `Ψ*(x) = x`. Not a Csiszár entropy; it turns
    /// the unbalanced problem back into the balanced one.
    Identity,
}

impl EntropyKind {
    pub const CSISZAR: [EntropyKind; 3] = [
        EntropyKind::Kl,
        EntropyKind::ChiSquared,
        EntropyKind::Softplus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EntropyKind::Kl => "kl",
            EntropyKind::ChiSquared => "chi_squared",
            EntropyKind::Softplus => "softplus",
            EntropyKind::Identity => "identity",
        }
    }

    /// Strict convexity of Ψ, which makes the discrete problem's optimum unique.
    pub fn is_strictly_convex(self) -> bool {
        matches!(self, EntropyKind::Kl | EntropyKind::ChiSquared)
    }

    /// Closed domain of Ψ as `(lo, hi)`.
    pub fn domain(self) -> (f64, f64) {
        match self {
            EntropyKind::Kl | EntropyKind::ChiSquared => (0.0, f64::INFINITY),
            EntropyKind::Softplus => (0.0, 1.0),
            EntropyKind::Identity => (1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DivergenceError {
    #[error("entropy argument must be non-negative, got {0}")]
    NegativeArgument(f64),
    #[error("t = {t} lies outside the domain of the {kind} entropy")]
    OutsideDomain { kind: &'static str, t: f64 },
    #[error("divergence needs equal-length weight vectors ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyFunction {
    pub kind: EntropyKind,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl EntropyFunction {
    pub fn new(kind: EntropyKind) -> Self {
        EntropyFunction { kind, alpha: 1.0 }
    }

    pub fn with_alpha(kind: EntropyKind, alpha: f64) -> Self {
        EntropyFunction { kind, alpha }
    }

    /// `αΨ(t)`; `+∞` outside the domain.
    pub fn psi(&self, t: f64) -> Result<f64, DivergenceError> {
        if t < 0.0 || t.is_nan() {
            return Err(DivergenceError::NegativeArgument(t));
        }
        let base = match self.kind {
            EntropyKind::Kl => {
                if t == 0.0 {
                    1.0
                } else {
                    t * t.ln() - t + 1.0
                }
            }
            EntropyKind::ChiSquared => (t - 1.0) * (t - 1.0),
            EntropyKind::Softplus => {
                if t > 1.0 {
                    f64::INFINITY
                } else {
                    xlogx(t) + xlogx(1.0 - t)
                }
            }
            EntropyKind::Identity => {
                if t == 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
        };
        Ok(self.alpha * base)
    }

    /// Derivative of `αΨ` at an interior point of the domain.
    pub fn psi_deriv(&self, t: f64) -> f64 {
        let base = match self.kind {
            EntropyKind::Kl => t.ln(),
            EntropyKind::ChiSquared => 2.0 * (t - 1.0),
            EntropyKind::Softplus => (t / (1.0 - t)).ln(),
            EntropyKind::Identity => f64::NAN,
        };
        self.alpha * base
    }

    /// Second derivative of `αΨ` at an interior point of the domain.
    pub fn psi_second(&self, t: f64) -> f64 {
        let base = match self.kind {
            EntropyKind::Kl => 1.0 / t,
            EntropyKind::ChiSquared => 2.0,
            EntropyKind::Softplus => 1.0 / (t * (1.0 - t)),
            EntropyKind::Identity => f64::NAN,
        };
        self.alpha * base
    }

    /// `(αΨ)*(x) = α Ψ*(x / α)`.
    pub fn psi_star(&self, x: f64) -> f64 {
        let a = self.alpha;
        let s = x / a;
        let base = match self.kind {
            EntropyKind::Kl => s.exp_m1(),
            EntropyKind::ChiSquared => {
                if s >= -2.0 {
                    0.25 * s * s + s
                } else {
                    -1.0
                }
            }
            EntropyKind::Softplus => softplus(s),
            EntropyKind::Identity => s,
        };
        a * base
    }

    /// `((αΨ)*)′(x) = Ψ*′(x / α)`.
    pub fn psi_star_deriv(&self, x: f64) -> f64 {
        let s = x / self.alpha;
        match self.kind {
            EntropyKind::Kl => s.exp(),
            EntropyKind::ChiSquared => (0.5 * s + 1.0).max(0.0),
            EntropyKind::Softplus => sigmoid(s),
            EntropyKind::Identity => 1.0,
        }
    }

    /// Fenchel–Young gap `αΨ(t) + (αΨ)*(x) − t x`, non-negative everywhere.
    pub fn conjugate_gap(&self, t: f64, x: f64) -> Result<f64, DivergenceError> {
        let p = self.psi(t)?;
        if p.is_infinite() {
            return Err(DivergenceError::OutsideDomain {
                kind: self.kind.name(),
                t,
            });
        }
        Ok(p + self.psi_star(x) - t * x)
    }

    /// `D(a ‖ b) = Σᵢ bᵢ αΨ(aᵢ / bᵢ)` for discrete measures with `b > 0`.
    pub fn divergence(&self, a: &[f64], b: &[f64]) -> Result<f64, DivergenceError> {
        if a.len() != b.len() {
            return Err(DivergenceError::LengthMismatch(a.len(), b.len()));
        }
        let mut total = 0.0;
        for (&ai, &bi) in a.iter().zip(b) {
            total += bi * self.psi(ai.max(0.0) / bi)?;
        }
        Ok(total)
    }
}

impl EntropyFunction {
    /// Records `(αΨ)*` elementwise on `g`.
    ///
    /// For KL the scaled argument `x/α` is capped at `kl_clamp` so `exp` cannot
    /// overflow; the second value counts capped entries.
    pub fn psi_star_node(
        &self,
        g: &mut Graph,
        x: Var,
        kl_clamp: f64,
    ) -> Result<(Var, usize), AutodiffError> {
        let a = self.alpha;
        if self.kind == EntropyKind::Identity {
            return Ok((x, 0));
        }
        let s = g.scale(x, 1.0 / a)?;
        let mut clamped = 0;
        let base = match self.kind {
            EntropyKind::Kl => {
                clamped = g.value(s).data().iter().filter(|&&v| v > kl_clamp).count();
                let capped = g.min_scalar(s, kl_clamp)?;
                let e = g.exp(capped)?;
                g.add_scalar(e, -1.0)?
            }
            EntropyKind::ChiSquared => g.unary(s, Unary::ChiConj)?,
            EntropyKind::Softplus => g.softplus(s)?,
            EntropyKind::Identity => unreachable!(),
        };
        Ok((g.scale(base, a)?, clamped))
    }
}

/// `x log x` with `0 log 0 = 0`.
fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}
