//! Prediction-quality metrics for trained models.
//!
//! The central quantity is the fractional energy error ε = |(H − H_pred)/H|,
//! where both energies come from the analytic Hamiltonian: H at the shared
//! initial state, H_pred along the predicted states. Learned energies H_θ
//! carry an arbitrary constant offset, so they are never used inside ε;
//! comparisons against learned potentials go through [`align_offset`] instead.
//!
//! Sweeps aggregate per-trajectory mean errors over ensembles, parameter
//! grids, and noise conditions, and emit CSV tables.

use serde::{Deserialize, Serialize};

use crate::datagen::sample_initial_condition;
use crate::error::{Error, Result};
use crate::integrate::{fine_then_coarsen, Trajectory};
use crate::io::fmt_f64;
use crate::model::AsrnnModel;
use crate::par;
use crate::rng::{self, tag};
use crate::systems::{PhaseState, SystemFamily, SystemSpec};

/// Anything that can roll a predicted trajectory out of an initial state.
///
/// Trained models implement this; evaluation code is written against the
/// trait so exact-dynamics stand-ins can calibrate the metrics themselves.
pub trait Predictor: Sync {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory>;
}

impl Predictor for AsrnnModel {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory> {
        AsrnnModel::predict(self, z0, lambda, n)
    }
}

/// Exact-dynamics predictor: integrates the analytic equations of motion with
/// `substeps` fine Verlet steps per observation step, then keeps only the
/// observation grid. With enough substeps its energy error is pure
/// integrator drift, orders of magnitude below any learned model's, which
/// makes it the reference point for sweep plumbing.
#[derive(Clone, Copy, Debug)]
pub struct OraclePredictor {
    pub family: SystemFamily,
    pub dt: f64,
    pub substeps: usize,
}

impl Predictor for OraclePredictor {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory> {
        if self.substeps == 0 {
            return Err(Error::Config("oracle substeps must be >= 1".into()));
        }
        let spec = self.family.spec(lambda)?;
        fine_then_coarsen(&spec, z0, self.dt / self.substeps as f64, self.dt, n)
    }
}

/// Fractional energy error series along a predicted trajectory.
///
/// `H` is the analytic Hamiltonian at the trajectory's initial state (the
/// conserved energy of the ground truth sharing that state); each entry is
/// |(H − H_pred)/H| with `H_pred` evaluated on the corresponding predicted
/// state. Entries are returned per step, including step 0 (always 0).
pub fn fractional_energy_error(spec: &SystemSpec, pred: &Trajectory) -> Result<Vec<f64>> {
    let z0 = pred
        .states
        .first()
        .ok_or_else(|| Error::DegenerateData("empty trajectory".into()))?;
    let h = spec.hamiltonian(z0)?;
    if h.abs() < 1e-12 {
        return Err(Error::UndefinedRatio { h_abs: h.abs() });
    }
    pred.states
        .iter()
        .map(|s| Ok(((h - spec.hamiltonian(s)?) / h).abs()))
        .collect()
}

/// Mean of an ε series, or `None` when any entry is non-finite (diverged).
fn finite_mean(series: &[f64]) -> Option<f64> {
    if series.iter().any(|e| !e.is_finite()) {
        return None;
    }
    Some(series.iter().sum::<f64>() / series.len() as f64)
}

/// Linear-interpolation percentile of an ascending-sorted slice, `frac` in [0, 1].
fn percentile_sorted(sorted: &[f64], frac: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * frac;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Distribution of per-trajectory mean energy errors under one evaluation
/// condition, reported in percent.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyErrorSummary {
    pub lambda: Vec<f64>,
    pub n_trajectories: usize,
    pub horizon: usize,
    /// Mean ε over the horizon, one entry per (member, initial condition).
    pub per_trajectory: Vec<f64>,
    pub mean_pct: f64,
    pub median_pct: f64,
    pub p25_pct: f64,
    pub p75_pct: f64,
}

impl EnergyErrorSummary {
    pub fn new(lambda: Vec<f64>, horizon: usize, per_trajectory: Vec<f64>) -> Result<Self> {
        if per_trajectory.is_empty() {
            return Err(Error::DegenerateData(
                "energy-error summary needs at least one trajectory".into(),
            ));
        }
        let mut sorted = per_trajectory.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite errors"));
        let n = per_trajectory.len();
        Ok(EnergyErrorSummary {
            lambda,
            n_trajectories: n,
            horizon,
            mean_pct: 100.0 * per_trajectory.iter().sum::<f64>() / n as f64,
            median_pct: 100.0 * percentile_sorted(&sorted, 0.5),
            p25_pct: 100.0 * percentile_sorted(&sorted, 0.25),
            p75_pct: 100.0 * percentile_sorted(&sorted, 0.75),
            per_trajectory,
        })
    }
}

/// Learned energy K_θ1 + V_θ2 evaluated along a predicted trajectory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyDrift {
    pub series: Vec<f64>,
    pub std: f64,
    pub range: f64,
}

/// How tightly the model conserves its own learned energy along a prediction.
/// `std` is the population standard deviation of the series, `range` its
/// max − min.
pub fn learned_energy_drift(m: &AsrnnModel, pred: &Trajectory) -> Result<EnergyDrift> {
    if pred.states.is_empty() {
        return Err(Error::DegenerateData("empty trajectory".into()));
    }
    let series: Vec<f64> = pred
        .states
        .iter()
        .map(|s| m.energy(s, &pred.lambda))
        .collect::<Result<_>>()?;
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|h| (h - mean) * (h - mean)).sum::<f64>() / n;
    let max = series.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = series.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(EnergyDrift {
        series,
        std: var.sqrt(),
        range: max - min,
    })
}

/// Mean percent energy error over a rectangular (α, β) parameter grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major `[i_alpha][i_beta]`; NaN when every trajectory diverged.
    pub mean_pct_err: Vec<Vec<f64>>,
    /// Diverged (member, initial condition) pairs per cell, excluded from means.
    pub n_diverged: Vec<Vec<usize>>,
    /// Parameter points that appeared in training, for downstream plots.
    pub training_lambdas: Vec<Vec<f64>>,
}

impl SweepGrid {
    /// Mean of the finite cell values over the whole grid.
    pub fn mean_over_cells(&self) -> f64 {
        let vals: Vec<f64> = self
            .mean_pct_err
            .iter()
            .flatten()
            .copied()
            .filter(|v| v.is_finite())
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// CSV with header `alpha,beta,mean_pct_err,n_diverged`, rows in
    /// alpha-major order.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("alpha,beta,mean_pct_err,n_diverged\n");
        for (i, &a) in self.alphas.iter().enumerate() {
            for (j, &b) in self.betas.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt_f64(a),
                    fmt_f64(b),
                    fmt_f64(self.mean_pct_err[i][j]),
                    self.n_diverged[i][j]
                ));
            }
        }
        out
    }
}

/// Evaluate an ensemble over a rectangular parameter grid.
///
/// Per cell: `n_traj` initial conditions are drawn at exactly the requested
/// energy (shared by all members, from a stream keyed on the cell and the
/// trajectory index, so the grid is reproducible regardless of scheduling),
/// each member predicts `horizon` steps, and the cell value is the mean over
/// members × trajectories of the per-trajectory mean ε, in percent. Diverged
/// predictions are counted and excluded rather than failing the sweep.
pub fn parameter_sweep<P: Predictor>(
    ensemble: &[P],
    family: SystemFamily,
    alphas: &[f64],
    betas: &[f64],
    energy: f64,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<SweepGrid> {
    if family.lambda_dim() != 2 {
        return Err(Error::Config(format!(
            "parameter sweep needs a two-parameter family, {family:?} has {}",
            family.lambda_dim()
        )));
    }
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Config("parameter grid must be non-empty".into()));
    }
    if ensemble.is_empty() || n_traj == 0 || horizon == 0 {
        return Err(Error::Config(
            "sweep needs at least one member, trajectory, and step".into(),
        ));
    }
    let cells: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|i| (0..betas.len()).map(move |j| (i, j)))
        .collect();
    let results: Vec<Result<(f64, usize)>> = par::map_collect(&cells, |&(i, j)| {
        let lambda = [alphas[i], betas[j]];
        let spec = family.spec(&lambda)?;
        let mut sum = 0.0;
        let mut kept = 0usize;
        let mut diverged = 0usize;
        for t in 0..n_traj {
            let mut ic_rng = rng::stream(seed, &[tag::EVAL, i as u64, j as u64, t as u64]);
            let z0 = sample_initial_condition(&spec, energy, Some(energy), &mut ic_rng)?;
            for member in ensemble {
                match member.predict(&z0, &lambda, horizon) {
                    Ok(pred) => match finite_mean(&fractional_energy_error(&spec, &pred)?) {
                        Some(m) => {
                            sum += m;
                            kept += 1;
                        }
                        None => diverged += 1,
                    },
                    Err(Error::Blowup { .. }) => diverged += 1,
                    Err(e) => return Err(e),
                }
            }
        }
        let mean = if kept > 0 {
            100.0 * sum / kept as f64
        } else {
            f64::NAN
        };
        Ok((mean, diverged))
    });
    let mut mean_pct_err = vec![vec![0.0; betas.len()]; alphas.len()];
    let mut n_diverged = vec![vec![0usize; betas.len()]; alphas.len()];
    for (&(i, j), res) in cells.iter().zip(results) {
        let (mean, div) = res?;
        mean_pct_err[i][j] = mean;
        n_diverged[i][j] = div;
    }
    Ok(SweepGrid {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        mean_pct_err,
        n_diverged,
        training_lambdas: Vec::new(),
    })
}

/// One trained noise condition to be summarised.
pub struct NoiseCondition<'a, P> {
    pub nsr: f64,
    pub tau: f64,
    pub ensemble: &'a [P],
}

/// One row of the noise-sweep table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NoiseSummaryRow {
    pub nsr: f64,
    pub tau: f64,
    pub summary: EnergyErrorSummary,
}

/// Compare ensembles trained under different noise conditions on common
/// ground: every condition is evaluated on the same initial conditions
/// (streams keyed only by trajectory index), at one parameter point.
/// Diverged predictions are dropped from the per-condition population.
pub fn noise_sweep_summary<P: Predictor>(
    conditions: &[NoiseCondition<'_, P>],
    family: SystemFamily,
    lambda_eval: &[f64],
    energy: f64,
    n_traj: usize,
    horizon: usize,
    seed: u64,
) -> Result<Vec<NoiseSummaryRow>> {
    if n_traj == 0 || horizon == 0 {
        return Err(Error::Config(
            "noise sweep needs at least one trajectory and step".into(),
        ));
    }
    let spec = family.spec(lambda_eval)?;
    let z0s: Vec<PhaseState> = (0..n_traj)
        .map(|t| {
            let mut ic_rng = rng::stream(seed, &[tag::EVAL, t as u64]);
            sample_initial_condition(&spec, energy, Some(energy), &mut ic_rng)
        })
        .collect::<Result<_>>()?;
    conditions
        .iter()
        .map(|cond| {
            let jobs: Vec<(usize, usize)> = (0..cond.ensemble.len())
                .flat_map(|m| (0..n_traj).map(move |t| (m, t)))
                .collect();
            let errs: Vec<Result<Option<f64>>> = par::map_collect(&jobs, |&(m, t)| {
                match cond.ensemble[m].predict(&z0s[t], lambda_eval, horizon) {
                    Ok(pred) => Ok(finite_mean(&fractional_energy_error(&spec, &pred)?)),
                    Err(Error::Blowup { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            });
            let mut per_trajectory = Vec::with_capacity(jobs.len());
            for e in errs {
                if let Some(m) = e? {
                    per_trajectory.push(m);
                }
            }
            Ok(NoiseSummaryRow {
                nsr: cond.nsr,
                tau: cond.tau,
                summary: EnergyErrorSummary::new(lambda_eval.to_vec(), horizon, per_trajectory)?,
            })
        })
        .collect()
}

/// CSV with header `nsr,tau,median,p25,p75` (percent values).
pub fn noise_rows_to_csv_string(rows: &[NoiseSummaryRow]) -> String {
    let mut out = String::from("nsr,tau,median,p25,p75\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_f64(r.nsr),
            fmt_f64(r.tau),
            fmt_f64(r.summary.median_pct),
            fmt_f64(r.summary.p25_pct),
            fmt_f64(r.summary.p75_pct)
        ));
    }
    out
}

/// Best constant shift of `learned` onto `reference` and the residuals after
/// shifting. The mean difference minimises the squared residual norm over
/// all constant shifts, so the residuals sum to zero.
pub fn align_offset(learned: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if learned.len() != reference.len() {
        return Err(Error::DimMismatch {
            expected: reference.len(),
            actual: learned.len(),
        });
    }
    if learned.is_empty() {
        return Err(Error::DegenerateData("empty curves".into()));
    }
    let offset = reference
        .iter()
        .zip(learned)
        .map(|(r, l)| r - l)
        .sum::<f64>()
        / learned.len() as f64;
    let residuals = learned
        .iter()
        .zip(reference)
        .map(|(l, r)| l + offset - r)
        .collect();
    Ok((offset, residuals))
}

/// Strict local minima of a sampled curve: interior points below both
/// neighbours. Endpoints are never counted.
pub fn count_strict_minima(values: &[f64]) -> usize {
    values
        .windows(3)
        .filter(|w| w[1] < w[0] && w[1] < w[2])
        .count()
}

/// Anything exposing a learned potential curve over a 1-d grid.
pub trait PotentialSource {
    fn potential_curve(&self, q_grid: &[Vec<f64>], lambda: &[f64]) -> Result<Vec<f64>>;
}

impl PotentialSource for AsrnnModel {
    fn potential_curve(&self, q_grid: &[Vec<f64>], lambda: &[f64]) -> Result<Vec<f64>> {
        AsrnnModel::potential_curve(self, q_grid, lambda)
    }
}

/// One member's learned potential at one parameter value, aligned to the
/// analytic double-well curve.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DoubleWellCurve {
    pub member: usize,
    pub alpha: f64,
    pub offset: f64,
    /// Learned curve after the constant shift, on the shared grid.
    pub aligned: Vec<f64>,
    /// Largest |aligned − analytic| over the grid.
    pub max_abs_residual: f64,
    /// Strict local minima of the learned curve (shape is offset-invariant).
    pub n_minima: usize,
}

/// Compare each member's learned potential against the analytic double well
/// over a shared `q_grid`, for every parameter in `alphas`. Minima counts
/// are the symmetry-breaking diagnostic: one well for α ≥ 0, two for α < 0.
pub fn double_well_diagnostic<P: PotentialSource>(
    ensemble: &[P],
    alphas: &[f64],
    q_grid: &[f64],
) -> Result<Vec<DoubleWellCurve>> {
    if q_grid.len() < 3 {
        return Err(Error::Config(
            "potential grid needs at least three points".into(),
        ));
    }
    let grid_vecs: Vec<Vec<f64>> = q_grid.iter().map(|&q| vec![q]).collect();
    let mut out = Vec::with_capacity(ensemble.len() * alphas.len());
    for (member, model) in ensemble.iter().enumerate() {
        for &alpha in alphas {
            let spec = SystemFamily::DoubleWell.spec(&[alpha])?;
            let analytic: Vec<f64> = q_grid
                .iter()
                .map(|&q| spec.potential(&[q]))
                .collect::<Result<_>>()?;
            let learned = model.potential_curve(&grid_vecs, &[alpha])?;
            let (offset, residuals) = align_offset(&learned, &analytic)?;
            let aligned: Vec<f64> = learned.iter().map(|v| v + offset).collect();
            let max_abs_residual = residuals.iter().fold(0.0f64, |m, r| m.max(r.abs()));
            out.push(DoubleWellCurve {
                member,
                alpha,
                offset,
                n_minima: count_strict_minima(&aligned),
                aligned,
                max_abs_residual,
            });
        }
    }
    Ok(out)
}
