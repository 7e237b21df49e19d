//! Symbolic recovery from trained models.
//!
//! Sequentially thresholded least squares (STLSQ) over a polynomial monomial
//! library, applied two ways: to equations of motion, where the regression
//! targets are the model's own force evaluations (q̇ = ∂K/∂p, ṗ = −∂V/∂q,
//! never numerical differentiation of trajectories), and to the learned
//! energies K and V directly, including extraction of the Morse width from
//! the curvature coefficient. The basis is deliberately polynomial-only; no
//! exponential terms are offered.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::sample_initial_condition;
use crate::error::{Error, Result};
use crate::integrate::{fine_then_coarsen, rollout, ForceProvider, Trajectory};
use crate::model::AsrnnModel;
use crate::par;
use crate::rng::{self, tag};
use crate::systems::{PhaseState, SystemFamily};

/// Monomial basis over named variables, every total degree up to a bound,
/// in graded-lexicographic order (degree first, then earlier variables take
/// higher exponents first).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PolyLibrary {
    pub var_names: Vec<String>,
    pub max_degree: usize,
    pub include_constant: bool,
    /// One exponent vector per monomial, aligned with `var_names`.
    pub monomials: Vec<Vec<usize>>,
}

impl PolyLibrary {
    pub fn new(var_names: Vec<String>, max_degree: usize, include_constant: bool) -> Self {
        let n_vars = var_names.len();
        let mut monomials = Vec::new();
        let start = if include_constant { 0 } else { 1 };
        for deg in start..=max_degree {
            push_degree(n_vars, deg, &mut Vec::new(), &mut monomials);
        }
        PolyLibrary {
            var_names,
            max_degree,
            include_constant,
            monomials,
        }
    }

    pub fn n_terms(&self) -> usize {
        self.monomials.len()
    }

    /// Index of the monomial with exactly these exponents, if present.
    pub fn index_of(&self, exponents: &[usize]) -> Option<usize> {
        self.monomials.iter().position(|m| m == exponents)
    }

    /// Human-readable monomial, e.g. `q1^2*q2` or `1` for the constant.
    pub fn monomial_name(&self, idx: usize) -> String {
        let exps = &self.monomials[idx];
        let mut parts = Vec::new();
        for (name, &e) in self.var_names.iter().zip(exps) {
            match e {
                0 => {}
                1 => parts.push(name.clone()),
                _ => parts.push(format!("{name}^{e}")),
            }
        }
        if parts.is_empty() {
            "1".into()
        } else {
            parts.join("*")
        }
    }

    /// One design-matrix row: every monomial evaluated at `x`.
    pub fn eval_row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.var_names.len() {
            return Err(Error::DimMismatch {
                expected: self.var_names.len(),
                actual: x.len(),
            });
        }
        Ok(self
            .monomials
            .iter()
            .map(|exps| {
                exps.iter()
                    .zip(x)
                    .map(|(&e, &xi)| xi.powi(e as i32))
                    .product()
            })
            .collect())
    }
}

/// All exponent vectors of one total degree, earlier variables greedy first.
fn push_degree(n_vars: usize, deg_left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if n_vars == 1 {
        prefix.push(deg_left);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for e in (0..=deg_left).rev() {
        prefix.push(e);
        push_degree(n_vars - 1, deg_left - e, prefix, out);
        prefix.pop();
    }
}

/// Monomial-evaluation matrix: one row per sample, one column per library term.
pub fn build_design(samples: &[Vec<f64>], lib: &PolyLibrary) -> Result<DMatrix<f64>> {
    if samples.is_empty() {
        return Err(Error::DegenerateData("no samples for the design".into()));
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        rows.push(lib.eval_row(s)?);
    }
    Ok(DMatrix::from_fn(samples.len(), lib.n_terms(), |i, j| {
        rows[i][j]
    }))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StlsqOptions {
    pub threshold: f64,
    pub ridge: f64,
    pub max_iters: usize,
}

impl Default for StlsqOptions {
    fn default() -> Self {
        StlsqOptions {
            threshold: 0.05,
            ridge: 1e-8,
            max_iters: 20,
        }
    }
}

/// One target's sparse regression result over a library.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SparseFit {
    /// Full-length coefficient vector; entries off the support are exactly 0.
    pub coefficients: Vec<f64>,
    pub threshold: f64,
    pub residual_rms: f64,
    /// True when the surviving support was rank-deficient and the solve fell
    /// back to the minimum-norm solution.
    pub rank_deficient: bool,
    /// Downstream-extracted quantities (e.g. `alpha_hat`).
    pub params: BTreeMap<String, f64>,
}

impl SparseFit {
    pub fn support(&self) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Surviving terms by name, for JSON artifacts.
    pub fn support_map(&self, lib: &PolyLibrary) -> BTreeMap<String, f64> {
        self.support()
            .into_iter()
            .map(|i| (lib.monomial_name(i), self.coefficients[i]))
            .collect()
    }
}

/// Ridge least squares on the given columns; falls back to the minimum-norm
/// SVD solution (flagged) when the normal equations are not positive
/// definite or no ridge is requested.
fn ridge_solve(a: &DMatrix<f64>, y: &DVector<f64>, ridge: f64) -> Result<(DVector<f64>, bool)> {
    let k = a.ncols();
    if ridge > 0.0 {
        let mut ata = a.transpose() * a;
        for i in 0..k {
            ata[(i, i)] += ridge;
        }
        if let Some(ch) = ata.cholesky() {
            return Ok((ch.solve(&(a.transpose() * y)), false));
        }
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = (1e-12 * max_sv).max(f64::MIN_POSITIVE);
    let rank = svd.rank(tol);
    let sol = svd
        .solve(y, tol)
        .map_err(|e| Error::Extraction(format!("svd solve failed: {e}")))?;
    Ok((sol.column(0).into_owned(), rank < k))
}

/// Sequentially thresholded least squares, one fit per target column.
///
/// Iterates ridge least squares, zeroes coefficients with |c| < threshold,
/// and refits on the surviving support until the support stops changing.
/// Deterministic; a rank-deficient support is solved minimum-norm and
/// flagged rather than failing.
pub fn stlsq(
    design: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    opts: &StlsqOptions,
) -> Result<Vec<SparseFit>> {
    if design.nrows() != targets.nrows() {
        return Err(Error::DimMismatch {
            expected: design.nrows(),
            actual: targets.nrows(),
        });
    }
    if !(opts.threshold >= 0.0) || !(opts.ridge >= 0.0) || opts.max_iters == 0 {
        return Err(Error::Config(
            "stlsq needs threshold >= 0, ridge >= 0, max_iters >= 1".into(),
        ));
    }
    (0..targets.ncols())
        .map(|t| {
            let y = targets.column(t).into_owned();
            stlsq_single(design, &y, opts)
        })
        .collect()
}

fn stlsq_single(design: &DMatrix<f64>, y: &DVector<f64>, opts: &StlsqOptions) -> Result<SparseFit> {
    let n_cols = design.ncols();
    let mut support: Vec<usize> = (0..n_cols).collect();
    let mut coefs = DVector::zeros(0);
    let mut rank_deficient = false;
    for _ in 0..opts.max_iters {
        if support.is_empty() {
            break;
        }
        let sub = design.select_columns(support.iter());
        let (c, flagged) = ridge_solve(&sub, y, opts.ridge)?;
        rank_deficient |= flagged;
        let keep: Vec<usize> = support
            .iter()
            .enumerate()
            .filter(|(i, _)| c[*i].abs() >= opts.threshold)
            .map(|(_, &col)| col)
            .collect();
        coefs = c;
        if keep == support {
            break;
        }
        support = keep;
        coefs = DVector::zeros(0);
    }
    let mut full = vec![0.0; n_cols];
    if coefs.len() == support.len() {
        for (slot, &col) in support.iter().enumerate() {
            if coefs[slot].abs() >= opts.threshold {
                full[col] = coefs[slot];
            }
        }
    } else if !support.is_empty() {
        // Support still changing at the iteration cap: refit once on the
        // final support so reported coefficients match it.
        let sub = design.select_columns(support.iter());
        let (c, flagged) = ridge_solve(&sub, y, opts.ridge)?;
        rank_deficient |= flagged;
        for (slot, &col) in support.iter().enumerate() {
            if c[slot].abs() >= opts.threshold {
                full[col] = c[slot];
            }
        }
    }
    let full_vec = DVector::from_column_slice(&full);
    let resid = design * &full_vec - y;
    let residual_rms = (resid.norm_squared() / design.nrows() as f64).sqrt();
    Ok(SparseFit {
        coefficients: full,
        threshold: opts.threshold,
        residual_rms,
        rank_deficient,
        params: BTreeMap::new(),
    })
}

/// Readable rendering of one fitted equation, terms in library order.
pub fn render_equation(target: &str, lib: &PolyLibrary, fit: &SparseFit) -> String {
    let mut terms = String::new();
    for (i, &c) in fit.coefficients.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let name = lib.monomial_name(i);
        let mag = format!("{:.6}", c.abs());
        let term = if name == "1" {
            mag
        } else {
            format!("{mag}*{name}")
        };
        if terms.is_empty() {
            terms = if c < 0.0 { format!("-{term}") } else { term };
        } else {
            terms.push_str(if c < 0.0 { " - " } else { " + " });
            terms.push_str(&term);
        }
    }
    if terms.is_empty() {
        terms = "0".into();
    }
    format!("{target} = {terms}")
}

/// Result of equation-of-motion recovery for the two-parameter family.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EomRecovery {
    pub library: PolyLibrary,
    /// Fits for the targets `q1_dot, q2_dot, p1_dot, p2_dot` in that order.
    pub fits: Vec<SparseFit>,
    pub alpha_hat: f64,
    /// Second, independent read of α from the other force component.
    pub alpha_hat_cross: f64,
    pub beta_hat: f64,
    /// Structure mismatches and skipped trajectories, empty on clean runs.
    pub warnings: Vec<String>,
    pub n_diverged: usize,
}

const EOM_TARGETS: [&str; 4] = ["q1_dot", "q2_dot", "p1_dot", "p2_dot"];

/// Recover the cubic-potential equations of motion from a force field.
///
/// Trajectories are rolled out from fixed-energy initial conditions, then the
/// force field's own evaluations q̇ = ∂K/∂p and ṗ = −∂V/∂q at the visited
/// states are regressed on a degree-3 library over (q₁, q₂, p₁, p₂) —
/// derivative targets come from the field, never from differencing states.
/// α̂ is read from the q₁q₂ force term (cross-checked against q₁²), β̂ from
/// the q₂² term.
pub fn recover_eom<F: ForceProvider + Sync + ?Sized>(
    forces: &F,
    lambda: &[f64],
    energy: f64,
    n_traj: usize,
    horizon: usize,
    dt: f64,
    threshold: f64,
    seed: u64,
) -> Result<EomRecovery> {
    let family = SystemFamily::HenonHeiles;
    let spec = family.spec(lambda)?;
    if n_traj == 0 || horizon == 0 {
        return Err(Error::Config(
            "eom recovery needs at least one trajectory and step".into(),
        ));
    }
    let mut warnings = Vec::new();
    let mut n_diverged = 0usize;
    let mut states: Vec<PhaseState> = Vec::new();
    let rollouts: Vec<Result<Trajectory>> = par::map_range(n_traj, |t| {
        let mut ic_rng = rng::stream(seed, &[tag::INIT_COND, t as u64]);
        let z0 = sample_initial_condition(&spec, energy, Some(energy), &mut ic_rng)?;
        rollout(forces, &z0, lambda, dt, horizon)
    });
    for (t, r) in rollouts.into_iter().enumerate() {
        match r {
            Ok(traj) => states.extend(traj.states),
            Err(Error::Blowup { step }) => {
                n_diverged += 1;
                warnings.push(format!("trajectory {t} diverged at step {step}; skipped"));
            }
            Err(e) => return Err(e),
        }
    }
    if states.is_empty() {
        return Err(Error::DegenerateData(
            "every recovery trajectory diverged".into(),
        ));
    }

    let lib = PolyLibrary::new(
        vec!["q1".into(), "q2".into(), "p1".into(), "p2".into()],
        3,
        true,
    );
    let samples: Vec<Vec<f64>> = states.iter().map(PhaseState::to_flat).collect();
    let design = build_design(&samples, &lib)?;
    let mut targets = DMatrix::zeros(states.len(), 4);
    for (i, s) in states.iter().enumerate() {
        let qdot = forces.dkdp(&s.p)?;
        let pdot = forces.dvdq(&s.q, lambda)?;
        targets[(i, 0)] = qdot[0];
        targets[(i, 1)] = qdot[1];
        targets[(i, 2)] = -pdot[0];
        targets[(i, 3)] = -pdot[1];
    }
    let opts = StlsqOptions {
        threshold,
        ..StlsqOptions::default()
    };
    let mut fits = stlsq(&design, &targets, &opts)?;

    let idx = |exps: &[usize]| lib.index_of(exps).expect("degree-3 library term");
    let i_p1 = idx(&[0, 0, 1, 0]);
    let i_p2 = idx(&[0, 0, 0, 1]);
    let i_q1 = idx(&[1, 0, 0, 0]);
    let i_q2 = idx(&[0, 1, 0, 0]);
    let i_q1q2 = idx(&[1, 1, 0, 0]);
    let i_q1sq = idx(&[2, 0, 0, 0]);
    let i_q2sq = idx(&[0, 2, 0, 0]);

    let expected: [Vec<usize>; 4] = [
        vec![i_p1],
        vec![i_p2],
        vec![i_q1, i_q1q2],
        vec![i_q2, i_q1sq, i_q2sq],
    ];
    for (t, want) in EOM_TARGETS.iter().zip(&expected) {
        let fit = &fits[EOM_TARGETS.iter().position(|x| x == t).expect("fixed list")];
        let got = fit.support();
        let mut want_sorted = want.clone();
        want_sorted.sort_unstable();
        if got != want_sorted {
            let names = |ix: &[usize]| {
                ix.iter()
                    .map(|&i| lib.monomial_name(i))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            warnings.push(format!(
                "{t}: support {{{}}} differs from expected {{{}}}",
                names(&got),
                names(&want_sorted)
            ));
        }
    }

    let alpha_hat = -fits[2].coefficients[i_q1q2] / 2.0;
    let alpha_hat_cross = -fits[3].coefficients[i_q1sq];
    let beta_hat = fits[3].coefficients[i_q2sq];
    fits[2].params.insert("alpha_hat".into(), alpha_hat);
    fits[3]
        .params
        .insert("alpha_hat_cross".into(), alpha_hat_cross);
    fits[3].params.insert("beta_hat".into(), beta_hat);

    Ok(EomRecovery {
        library: lib,
        fits,
        alpha_hat,
        alpha_hat_cross,
        beta_hat,
        warnings,
        n_diverged,
    })
}

/// A model exposing its energy split, used as the data generator for direct
/// polynomial fits of K and V.
pub trait EnergyModel: Sync {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory>;
    fn kinetic(&self, p: &[f64]) -> Result<f64>;
    fn potential(&self, q: &[f64], lambda: &[f64]) -> Result<f64>;
}

impl EnergyModel for AsrnnModel {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory> {
        AsrnnModel::predict(self, z0, lambda, n)
    }

    fn kinetic(&self, p: &[f64]) -> Result<f64> {
        AsrnnModel::kinetic(self, p)
    }

    fn potential(&self, q: &[f64], lambda: &[f64]) -> Result<f64> {
        AsrnnModel::potential(self, q, lambda)
    }
}

/// Exact-dynamics stand-in: analytic energies, finely integrated trajectories.
#[derive(Clone, Copy, Debug)]
pub struct AnalyticEnergyModel {
    pub family: SystemFamily,
    pub dt: f64,
    pub substeps: usize,
}

impl EnergyModel for AnalyticEnergyModel {
    fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory> {
        let spec = self.family.spec(lambda)?;
        fine_then_coarsen(&spec, z0, self.dt / self.substeps.max(1) as f64, self.dt, n)
    }

    fn kinetic(&self, p: &[f64]) -> Result<f64> {
        Ok(p.iter().map(|x| 0.5 * x * x).sum())
    }

    fn potential(&self, q: &[f64], lambda: &[f64]) -> Result<f64> {
        self.family.spec(lambda)?.potential(q)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HamiltonianFitOptions {
    /// Time-shuffled states kept for the regression.
    pub sample_count: usize,
    /// Library degree for both the kinetic and potential fits.
    pub degree: usize,
    pub threshold: f64,
    pub n_traj: usize,
    pub horizon: usize,
    /// Energy cap for the varying-energy initial conditions; must leave the
    /// relevant family's orbits bounded.
    pub e_max: f64,
}

impl Default for HamiltonianFitOptions {
    fn default() -> Self {
        HamiltonianFitOptions {
            sample_count: 2000,
            degree: 6,
            threshold: 0.05,
            n_traj: 40,
            horizon: 500,
            e_max: 0.125,
        }
    }
}

/// Direct polynomial fits of the learned energies.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HamiltonianFits {
    pub k_lib: PolyLibrary,
    pub k_fit: SparseFit,
    pub v_lib: PolyLibrary,
    pub v_fit: SparseFit,
    pub n_diverged: usize,
}

/// Fit polynomials to a model's kinetic and potential parts.
///
/// States are pooled from `n_traj` predicted trajectories started at varying
/// energies (≤ `e_max`), shuffled in time, and truncated to `sample_count`.
/// K is fit over momenta; V over configurations, with the Morse family
/// re-centred to q̃ = q − 1 so coefficients line up with the exponential's
/// power series. The constant term stays in the library but carries no
/// structural meaning (learned energies have a free offset).
pub fn fit_hamiltonian_polys<M: EnergyModel + ?Sized>(
    m: &M,
    family: SystemFamily,
    lambda: &[f64],
    opts: &HamiltonianFitOptions,
    seed: u64,
) -> Result<HamiltonianFits> {
    if opts.degree < 2 {
        return Err(Error::Config(
            "energy fits need a library of degree >= 2".into(),
        ));
    }
    if opts.n_traj == 0 || opts.horizon == 0 || opts.sample_count == 0 {
        return Err(Error::Config(
            "energy fits need trajectories, steps, and samples".into(),
        ));
    }
    let spec = family.spec(lambda)?;
    let rollouts: Vec<Result<Trajectory>> = par::map_range(opts.n_traj, |t| {
        let mut ic_rng = rng::stream(seed, &[tag::INIT_COND, t as u64]);
        let z0 = sample_initial_condition(&spec, opts.e_max, None, &mut ic_rng)?;
        m.predict(&z0, lambda, opts.horizon)
    });
    let mut pool: Vec<PhaseState> = Vec::new();
    let mut n_diverged = 0usize;
    for r in rollouts {
        match r {
            Ok(traj) => pool.extend(traj.states),
            Err(Error::Blowup { .. }) => n_diverged += 1,
            Err(e) => return Err(e),
        }
    }
    if pool.len() < opts.sample_count {
        return Err(Error::DegenerateData(format!(
            "only {} states survived for {} requested samples",
            pool.len(),
            opts.sample_count
        )));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[tag::EVAL]));
    order.truncate(opts.sample_count);

    let d = family.dim();
    let p_names = (1..=d).map(|i| format!("p{i}")).collect::<Vec<_>>();
    let q_names = match family {
        SystemFamily::Morse => vec!["qt".to_string()],
        _ => (1..=d).map(|i| format!("q{i}")).collect(),
    };
    let k_lib = PolyLibrary::new(p_names, opts.degree, true);
    let v_lib = PolyLibrary::new(q_names, opts.degree, true);

    let mut p_samples = Vec::with_capacity(order.len());
    let mut q_samples = Vec::with_capacity(order.len());
    let mut k_vals = DVector::zeros(order.len());
    let mut v_vals = DVector::zeros(order.len());
    for (row, &i) in order.iter().enumerate() {
        let s = &pool[i];
        k_vals[row] = m.kinetic(&s.p)?;
        v_vals[row] = m.potential(&s.q, lambda)?;
        p_samples.push(s.p.clone());
        let q = match family {
            SystemFamily::Morse => s.q.iter().map(|x| x - 1.0).collect(),
            _ => s.q.clone(),
        };
        q_samples.push(q);
    }

    let stlsq_opts = StlsqOptions {
        threshold: opts.threshold,
        ..StlsqOptions::default()
    };
    let k_design = build_design(&p_samples, &k_lib)?;
    let k_fit = stlsq(
        &k_design,
        &DMatrix::from_column_slice(order.len(), 1, k_vals.as_slice()),
        &stlsq_opts,
    )?
    .pop()
    .expect("one target");
    let v_design = build_design(&q_samples, &v_lib)?;
    let v_fit = stlsq(
        &v_design,
        &DMatrix::from_column_slice(order.len(), 1, v_vals.as_slice()),
        &stlsq_opts,
    )?
    .pop()
    .expect("one target");

    Ok(HamiltonianFits {
        k_lib,
        k_fit,
        v_lib,
        v_fit,
        n_diverged,
    })
}

/// Read the Morse width out of a potential fit over q̃: α̂ = √c₂.
pub fn extract_morse_alpha(fit: &SparseFit, lib: &PolyLibrary) -> Result<f64> {
    let idx = lib
        .index_of(&[2])
        .ok_or_else(|| Error::Extraction("library has no q̃² term".into()))?;
    let c2 = fit.coefficients[idx];
    if c2 < 0.0 {
        return Err(Error::Extraction(format!(
            "curvature coefficient is negative ({c2:.3e}); fit failed"
        )));
    }
    Ok(c2.sqrt())
}
