//! Störmer-Verlet (leapfrog) stepping, generic over force providers.
//!
//! The same kick-drift-kick update serves the analytic ground truth and the
//! learned model; only the source of ∂V/∂q and ∂K/∂p differs. The plain path
//! here mirrors the arithmetic of the taped model rollout operation for
//! operation, so the two produce bit-identical states for identical forces.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::systems::{PhaseState, SystemFamily, SystemSpec};

/// Source of the two gradient fields that drive a leapfrog step.
pub trait ForceProvider {
    /// ∂V/∂q at configuration q with system parameters λ.
    fn dvdq(&self, q: &[f64], lambda: &[f64]) -> Result<Vec<f64>>;
    /// ∂K/∂p at momentum p.
    fn dkdp(&self, p: &[f64]) -> Result<Vec<f64>>;
}

/// Analytic forces for one system family; λ is applied per call.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticForces {
    pub family: SystemFamily,
}

impl ForceProvider for AnalyticForces {
    fn dvdq(&self, q: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.family.spec(lambda)?.potential_gradient(q)
    }

    fn dkdp(&self, p: &[f64]) -> Result<Vec<f64>> {
        if p.len() != self.family.dim() {
            return Err(Error::DimMismatch {
                expected: self.family.dim(),
                actual: p.len(),
            });
        }
        Ok(p.to_vec())
    }
}

/// Forces from plain closures, for synthetic systems in tests and studies.
pub struct FnForces<F, G>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    pub dvdq: F,
    pub dkdp: G,
}

impl<F, G> ForceProvider for FnForces<F, G>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn dvdq(&self, q: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        Ok((self.dvdq)(q, lambda))
    }

    fn dkdp(&self, p: &[f64]) -> Result<Vec<f64>> {
        Ok((self.dkdp)(p))
    }
}

/// A uniformly spaced sequence of phase states.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<PhaseState>,
    pub dt: f64,
    pub lambda: Vec<f64>,
    pub t0: f64,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.states.first().map(|s| s.dim()).unwrap_or(0)
    }

    pub fn time_at(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    /// Write as CSV with header `t,q1..qd,p1..pd` and exact-round-trip floats.
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let d = self.dim();
        let mut header: Vec<String> = vec!["t".into()];
        for i in 1..=d {
            header.push(format!("q{i}"));
        }
        for i in 1..=d {
            header.push(format!("p{i}"));
        }
        let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
        let rows: Vec<Vec<String>> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut row = vec![io::fmt_f64(self.time_at(i))];
                row.extend(s.q.iter().map(|&v| io::fmt_f64(v)));
                row.extend(s.p.iter().map(|&v| io::fmt_f64(v)));
                row
            })
            .collect();
        io::write_csv(path, &header_refs, &rows)
    }

    /// Read a CSV written by [`Trajectory::to_csv`]. The parameter vector is
    /// not stored in the file and comes back empty.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let (header, rows) = io::read_csv_f64(path)?;
        if header.len() < 3 || header.len() % 2 == 0 || header[0] != "t" {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unexpected trajectory header {header:?}"),
            });
        }
        let d = (header.len() - 1) / 2;
        if rows.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: "trajectory has no states".into(),
            });
        }
        let states = rows
            .iter()
            .map(|row| PhaseState {
                q: row[1..1 + d].to_vec(),
                p: row[1 + d..1 + 2 * d].to_vec(),
            })
            .collect::<Vec<_>>();
        let t0 = rows[0][0];
        let dt = if rows.len() > 1 {
            (rows[rows.len() - 1][0] - t0) / (rows.len() - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            states,
            dt,
            lambda: Vec::new(),
            t0,
        })
    }
}

/// One kick-drift-kick step:
/// p½ = p − (dt/2)·∂V/∂q(q), q' = q + dt·∂K/∂p(p½), p' = p½ − (dt/2)·∂V/∂q(q').
///
/// Negative dt is accepted (it is the exact inverse step, used by the
/// reversibility checks).
pub fn verlet_step<F: ForceProvider + ?Sized>(
    f: &F,
    s: &PhaseState,
    lambda: &[f64],
    dt: f64,
) -> Result<PhaseState> {
    let half = -0.5 * dt;
    let g0 = f.dvdq(&s.q, lambda)?;
    let p_half: Vec<f64> = s.p.iter().zip(&g0).map(|(p, g)| p + half * g).collect();
    let k = f.dkdp(&p_half)?;
    let q_next: Vec<f64> = s.q.iter().zip(&k).map(|(q, v)| q + dt * v).collect();
    let g1 = f.dvdq(&q_next, lambda)?;
    let p_next: Vec<f64> = p_half.iter().zip(&g1).map(|(p, g)| p + half * g).collect();
    let out = PhaseState {
        q: q_next,
        p: p_next,
    };
    if !out.is_finite() {
        return Err(Error::Blowup { step: 0 });
    }
    Ok(out)
}

/// Integrate n steps from s0, returning all n+1 states.
pub fn rollout<F: ForceProvider + ?Sized>(
    f: &F,
    s0: &PhaseState,
    lambda: &[f64],
    dt: f64,
    n: usize,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(n + 1);
    states.push(s0.clone());
    for i in 1..=n {
        let next =
            verlet_step(f, states.last().expect("non-empty"), lambda, dt).map_err(|e| match e {
                Error::Blowup { .. } => Error::Blowup { step: i },
                other => other,
            })?;
        states.push(next);
    }
    Ok(Trajectory {
        states,
        dt,
        lambda: lambda.to_vec(),
        t0: 0.0,
    })
}

/// Ground-truth observation series: integrate at a fine step, keep every r-th
/// state where r = obs_dt / fine_dt (an exact subsample, not a re-integration).
pub fn fine_then_coarsen(
    spec: &SystemSpec,
    s0: &PhaseState,
    fine_dt: f64,
    obs_dt: f64,
    n_obs: usize,
) -> Result<Trajectory> {
    if !(fine_dt > 0.0) || !(obs_dt > 0.0) {
        return Err(Error::Config(format!(
            "steps must be positive: fine_dt={fine_dt}, obs_dt={obs_dt}"
        )));
    }
    let ratio = obs_dt / fine_dt;
    let r = ratio.round();
    if r < 1.0 || (ratio - r).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "obs_dt/fine_dt must be a positive integer, got {ratio}"
        )));
    }
    let r = r as usize;
    let forces = AnalyticForces {
        family: spec.family(),
    };
    let lambda = spec.lambda();
    let mut states = Vec::with_capacity(n_obs + 1);
    let mut cur = s0.clone();
    states.push(cur.clone());
    for obs in 1..=n_obs {
        for sub in 0..r {
            cur = verlet_step(&forces, &cur, &lambda, fine_dt).map_err(|e| match e {
                Error::Blowup { .. } => Error::Blowup {
                    step: (obs - 1) * r + sub + 1,
                },
                other => other,
            })?;
        }
        states.push(cur.clone());
    }
    Ok(Trajectory {
        states,
        dt: obs_dt,
        lambda,
        t0: 0.0,
    })
}
