//! Ground-truth physics: analytic Hamiltonians, gradients, equations of motion.
//!
//! Three separable benchmark systems, all with kinetic energy K = |p|²/2:
//!
//! * Henon-Heiles: two oscillators coupled by a cubic perturbation,
//!   V = (q₁² + q₂²)/2 + α q₁² q₂ − (β/3) q₂³.
//! * Morse: a non-polynomial bond potential, V = (1 − e^{−α(q−1)})² − 1,
//!   with a known power series around the minimum q = 1.
//! * Double well: V = (α/2) q² + q⁴/4, where α < 0 splits the well in two.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical coordinates of one instant, with equal-length q and p.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl PhaseState {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::DimMismatch {
                expected: q.len(),
                actual: p.len(),
            });
        }
        Ok(Self { q, p })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    /// Flatten to (q₁..q_d, p₁..p_d).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut z = self.q.clone();
        z.extend_from_slice(&self.p);
        z
    }

    pub fn from_flat(z: &[f64]) -> Result<Self> {
        if z.len() % 2 != 0 {
            return Err(Error::BadSpec(format!(
                "flat phase vector must have even length, got {}",
                z.len()
            )));
        }
        let d = z.len() / 2;
        Ok(Self {
            q: z[..d].to_vec(),
            p: z[d..].to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

/// Which potential family a spec belongs to, independent of parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemFamily {
    HenonHeiles,
    Morse,
    DoubleWell,
}

impl SystemFamily {
    pub fn dim(&self) -> usize {
        match self {
            SystemFamily::HenonHeiles => 2,
            SystemFamily::Morse | SystemFamily::DoubleWell => 1,
        }
    }

    pub fn lambda_dim(&self) -> usize {
        match self {
            SystemFamily::HenonHeiles => 2,
            SystemFamily::Morse | SystemFamily::DoubleWell => 1,
        }
    }

    /// Build a concrete spec from a parameter vector.
    pub fn spec(&self, lambda: &[f64]) -> Result<SystemSpec> {
        if lambda.len() != self.lambda_dim() {
            return Err(Error::DimMismatch {
                expected: self.lambda_dim(),
                actual: lambda.len(),
            });
        }
        Ok(match self {
            SystemFamily::HenonHeiles => SystemSpec::HenonHeiles {
                alpha: lambda[0],
                beta: lambda[1],
            },
            SystemFamily::Morse => SystemSpec::Morse { alpha: lambda[0] },
            SystemFamily::DoubleWell => SystemSpec::DoubleWell { alpha: lambda[0] },
        })
    }
}

/// A potential family with concrete parameter values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemSpec {
    HenonHeiles { alpha: f64, beta: f64 },
    Morse { alpha: f64 },
    DoubleWell { alpha: f64 },
}

impl SystemSpec {
    pub fn family(&self) -> SystemFamily {
        match self {
            SystemSpec::HenonHeiles { .. } => SystemFamily::HenonHeiles,
            SystemSpec::Morse { .. } => SystemFamily::Morse,
            SystemSpec::DoubleWell { .. } => SystemFamily::DoubleWell,
        }
    }

    /// Configuration-space dimension.
    pub fn dim(&self) -> usize {
        self.family().dim()
    }

    /// The system's parameter vector (α, β) or (α,).
    pub fn lambda(&self) -> Vec<f64> {
        match *self {
            SystemSpec::HenonHeiles { alpha, beta } => vec![alpha, beta],
            SystemSpec::Morse { alpha } | SystemSpec::DoubleWell { alpha } => vec![alpha],
        }
    }

    fn check_dim(&self, actual: usize) -> Result<()> {
        if actual != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual,
            });
        }
        Ok(())
    }

    /// Potential energy V(q; λ).
    pub fn potential(&self, q: &[f64]) -> Result<f64> {
        self.check_dim(q.len())?;
        Ok(match *self {
            SystemSpec::HenonHeiles { alpha, beta } => {
                let (q1, q2) = (q[0], q[1]);
                0.5 * (q1 * q1 + q2 * q2) + alpha * q1 * q1 * q2 - beta / 3.0 * q2 * q2 * q2
            }
            SystemSpec::Morse { alpha } => {
                let u = 1.0 - (-alpha * (q[0] - 1.0)).exp();
                u * u - 1.0
            }
            SystemSpec::DoubleWell { alpha } => {
                let x = q[0];
                0.5 * alpha * x * x + 0.25 * x * x * x * x
            }
        })
    }

    /// Total energy H = |p|²/2 + V(q; λ).
    pub fn hamiltonian(&self, s: &PhaseState) -> Result<f64> {
        self.check_dim(s.q.len())?;
        self.check_dim(s.p.len())?;
        let k: f64 = s.p.iter().map(|p| 0.5 * p * p).sum();
        Ok(k + self.potential(&s.q)?)
    }

    /// Analytic ∂V/∂q.
    pub fn potential_gradient(&self, q: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(q.len())?;
        Ok(match *self {
            SystemSpec::HenonHeiles { alpha, beta } => {
                let (q1, q2) = (q[0], q[1]);
                vec![
                    q1 + 2.0 * alpha * q1 * q2,
                    q2 + alpha * q1 * q1 - beta * q2 * q2,
                ]
            }
            SystemSpec::Morse { alpha } => {
                let e = (-alpha * (q[0] - 1.0)).exp();
                vec![2.0 * alpha * e * (1.0 - e)]
            }
            SystemSpec::DoubleWell { alpha } => {
                let x = q[0];
                vec![alpha * x + x * x * x]
            }
        })
    }

    /// Analytic ∂K/∂p = p.
    pub fn kinetic_gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(p.len())?;
        Ok(p.to_vec())
    }

    /// Time derivative (q̇, ṗ) = (∂K/∂p, −∂V/∂q).
    pub fn eom(&self, s: &PhaseState) -> Result<PhaseState> {
        let qdot = self.kinetic_gradient(&s.p)?;
        let pdot: Vec<f64> = self
            .potential_gradient(&s.q)?
            .into_iter()
            .map(|g| -g)
            .collect();
        PhaseState::new(qdot, pdot)
    }
}

/// Coefficient c_n of the Morse potential's power series in q̃ = q − 1:
/// c_n = 2 (−1)ⁿ (2^{n−1} − 1) αⁿ / n!.
pub fn morse_series_coefficient(n: u32, alpha: f64) -> f64 {
    let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
    let pow2 = 2.0_f64.powi(n as i32 - 1) - 1.0;
    let mut factorial = 1.0;
    for k in 2..=n {
        factorial *= k as f64;
    }
    2.0 * sign * pow2 * alpha.powi(n as i32) / factorial
}
