//! The learned separable Hamiltonian: K and V networks, the differentiable
//! recurrent Verlet rollout, trajectory-matching loss, and the
//! finite-difference baseline loss.
//!
//! Two evaluation paths exist for every loss. The plain path rolls the model
//! forward through [`integrate::rollout`] on raw slices; the taped path
//! records the identical arithmetic on a [`Tape`] so one reverse sweep yields
//! exact parameter gradients through all recurrent steps, including the
//! second-order terms introduced by using network input-gradients as forces.
//! Both paths share the same kernels and produce bit-identical loss values.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::autodiff::{init_gaussian, MlpParams, MlpSpec, NodeId, Tape, TapeNet};
use crate::datagen::SparseSample;
use crate::error::{Error, Result};
use crate::integrate::{self, ForceProvider, Trajectory};
use crate::io;
use crate::par;
use crate::rng;
use crate::systems::PhaseState;

/// Per-sample mismatch: squared L2 (smooth at zero, the default) or the plain
/// L2 norm.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Squared,
    Unsquared,
}

/// A separable learned Hamiltonian H(q,p;λ) = K(p) + V(q;λ).
///
/// The kinetic network takes p (d inputs); the potential network takes q with
/// the parameter channels λ appended (d + λdim inputs). Parameter dependence
/// enters only through V, so the same K serves the whole system family.
#[derive(Clone, Debug, PartialEq)]
pub struct AsrnnModel {
    pub k_params: MlpParams,
    pub v_params: MlpParams,
    /// Integrator step used for every rollout of this model.
    pub dt: f64,
}

impl AsrnnModel {
    pub fn new(k_params: MlpParams, v_params: MlpParams, dt: f64) -> Result<Self> {
        k_params.validate()?;
        v_params.validate()?;
        if v_params.input_dim() < k_params.input_dim() {
            return Err(Error::BadSpec(format!(
                "potential net takes {} inputs but the phase-space dimension is {}",
                v_params.input_dim(),
                k_params.input_dim()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::BadSpec(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            k_params,
            v_params,
            dt,
        })
    }

    /// Gaussian-initialize both networks from sub-streams of `seed`, so one
    /// seed fixes the whole model.
    pub fn init(k_spec: &MlpSpec, v_spec: &MlpSpec, dt: f64, seed: u64) -> Result<Self> {
        let k = init_gaussian(k_spec, rng::derive(seed, &[rng::tag::WEIGHTS, 0]));
        let v = init_gaussian(v_spec, rng::derive(seed, &[rng::tag::WEIGHTS, 1]));
        Self::new(k, v, dt)
    }

    /// Phase-space degrees of freedom d.
    pub fn dim(&self) -> usize {
        self.k_params.input_dim()
    }

    /// Number of parameter channels appended to the potential input.
    pub fn lambda_dim(&self) -> usize {
        self.v_params.input_dim() - self.k_params.input_dim()
    }

    pub fn n_params(&self) -> usize {
        self.k_params.to_flat().len() + self.v_params.to_flat().len()
    }

    /// Force-provider view: learned ∂V/∂q and ∂K/∂p.
    pub fn forces(&self) -> ModelForces<'_> {
        ModelForces { model: self }
    }

    /// Learned kinetic energy K(p).
    pub fn kinetic(&self, p: &[f64]) -> Result<f64> {
        self.k_params.eval(p)
    }

    /// Learned potential energy V(q;λ).
    pub fn potential(&self, q: &[f64], lambda: &[f64]) -> Result<f64> {
        self.v_params.eval(&join(q, lambda))
    }

    /// Learned energy K(p) + V(q;λ) at one state.
    pub fn energy(&self, z: &PhaseState, lambda: &[f64]) -> Result<f64> {
        Ok(self.kinetic(&z.p)? + self.potential(&z.q, lambda)?)
    }

    /// Evaluate the potential network on a list of configurations. Learned
    /// potentials carry an arbitrary additive constant; align offsets before
    /// comparing curves.
    pub fn potential_curve(&self, q_grid: &[Vec<f64>], lambda: &[f64]) -> Result<Vec<f64>> {
        q_grid
            .iter()
            .map(|q| self.v_params.eval(&join(q, lambda)))
            .collect()
    }

    /// Roll the learned dynamics n steps forward from z0.
    pub fn predict(&self, z0: &PhaseState, lambda: &[f64], n: usize) -> Result<Trajectory> {
        integrate::rollout(&self.forces(), z0, lambda, self.dt, n)
    }

    /// All parameters as one vector: kinetic net first, then potential net.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.k_params.to_flat();
        flat.extend(self.v_params.to_flat());
        flat
    }

    /// Overwrite all parameters from a [`AsrnnModel::to_flat`] vector.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let nk = self.k_params.to_flat().len();
        let total = nk + self.v_params.to_flat().len();
        if flat.len() != total {
            return Err(Error::DimMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        self.k_params.set_from_flat(&flat[..nk])?;
        self.v_params.set_from_flat(&flat[nk..])
    }

    pub fn save(&self, path: &Path, metadata: CheckpointMeta) -> Result<()> {
        let bundle = ModelCheckpoint {
            k_params: self.k_params.clone(),
            v_params: self.v_params.clone(),
            dt: self.dt,
            metadata,
        };
        io::write_json(path, &bundle)
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let bundle: ModelCheckpoint = io::read_json(path)?;
        let model = Self::new(bundle.k_params, bundle.v_params, bundle.dt)?;
        Ok((model, bundle.metadata))
    }
}

/// Provenance block stored inside a model checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Hash of the training configuration that produced the model.
    pub config_hash: String,
    /// Seed the member was initialized and sliced with.
    pub seed: u64,
}

/// On-disk model bundle.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub k_params: MlpParams,
    pub v_params: MlpParams,
    pub dt: f64,
    pub metadata: CheckpointMeta,
}

/// [`ForceProvider`] backed by a model: ∂V/∂q from the potential net with λ
/// appended to the input and the λ-gradient components dropped, ∂K/∂p from
/// the kinetic net.
pub struct ModelForces<'a> {
    model: &'a AsrnnModel,
}

impl ForceProvider for ModelForces<'_> {
    fn dvdq(&self, q: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        let d = self.model.dim();
        if q.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                actual: q.len(),
            });
        }
        if lambda.len() != self.model.lambda_dim() {
            return Err(Error::DimMismatch {
                expected: self.model.lambda_dim(),
                actual: lambda.len(),
            });
        }
        let mut g = self.model.v_params.input_gradient(&join(q, lambda))?;
        g.truncate(d);
        Ok(g)
    }

    fn dkdp(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.model.k_params.input_gradient(p)
    }
}

fn join(q: &[f64], lambda: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(q.len() + lambda.len());
    input.extend_from_slice(q);
    input.extend_from_slice(lambda);
    input
}

/// Record k Verlet steps of the model on a tape and return the final (q, p)
/// nodes. The arithmetic mirrors [`integrate::verlet_step`] operation for
/// operation, so the values agree bitwise with the plain rollout.
fn taped_rollout(
    tape: &mut Tape,
    k_net: &TapeNet,
    v_net: &TapeNet,
    z0: &PhaseState,
    lambda: &[f64],
    dt: f64,
    k: usize,
) -> Result<(NodeId, NodeId)> {
    let d = z0.dim();
    let half = -0.5 * dt;
    let mut q = tape.leaf(&z0.q);
    let mut p = tape.leaf(&z0.p);
    let lam = tape.leaf(lambda);
    for step in 1..=k {
        let vin = tape.concat(q, lam);
        let g_full = v_net.input_gradient(tape, vin);
        let g0 = tape.slice(g_full, 0, d);
        let p_half = tape.add_scaled(p, g0, half);
        let kg = k_net.input_gradient(tape, p_half);
        let q_next = tape.add_scaled(q, kg, dt);
        let vin2 = tape.concat(q_next, lam);
        let g_full2 = v_net.input_gradient(tape, vin2);
        let g1 = tape.slice(g_full2, 0, d);
        let p_next = tape.add_scaled(p_half, g1, half);
        let finite = tape.value(q_next).iter().all(|v| v.is_finite())
            && tape.value(p_next).iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Blowup { step });
        }
        q = q_next;
        p = p_next;
    }
    Ok((q, p))
}

fn check_sample(m: &AsrnnModel, s: &SparseSample) -> Result<()> {
    for dim in [s.z0.dim(), s.z_obs.dim()] {
        if dim != m.dim() {
            return Err(Error::DimMismatch {
                expected: m.dim(),
                actual: dim,
            });
        }
    }
    if s.lambda.len() != m.lambda_dim() {
        return Err(Error::DimMismatch {
            expected: m.lambda_dim(),
            actual: s.lambda.len(),
        });
    }
    Ok(())
}

/// Squared mismatch between a rollout endpoint and the observation,
/// accumulated q components first, then p, matching the taped order.
fn endpoint_mismatch(end: &PhaseState, target: &PhaseState, kind: LossKind) -> f64 {
    let mut acc = 0.0;
    for (a, b) in end.q.iter().zip(&target.q) {
        let d = a - b;
        acc += d * d;
    }
    for (a, b) in end.p.iter().zip(&target.p) {
        let d = a - b;
        acc += d * d;
    }
    match kind {
        LossKind::Squared => acc,
        LossKind::Unsquared => acc.sqrt(),
    }
}

fn sample_loss_plain(m: &AsrnnModel, s: &SparseSample, kind: LossKind) -> Result<f64> {
    check_sample(m, s)?;
    let traj = integrate::rollout(&m.forces(), &s.z0, &s.lambda, m.dt, s.k)?;
    let end = traj.states.last().expect("rollout returns k+1 states");
    Ok(endpoint_mismatch(end, &s.z_obs, kind))
}

/// Build one sample's loss node on a tape holding both registered nets.
fn sample_loss_node(
    tape: &mut Tape,
    k_net: &TapeNet,
    v_net: &TapeNet,
    s: &SparseSample,
    dt: f64,
    kind: LossKind,
) -> Result<NodeId> {
    let (q, p) = taped_rollout(tape, k_net, v_net, &s.z0, &s.lambda, dt, s.k)?;
    let z_hat = tape.concat(q, p);
    let target = tape.leaf(&s.z_obs.to_flat());
    let diff = tape.sub(z_hat, target);
    let ss = tape.sum_sq(diff);
    Ok(match kind {
        LossKind::Squared => ss,
        LossKind::Unsquared => tape.sqrt_scalar(ss),
    })
}

fn sample_loss_grad(
    m: &AsrnnModel,
    s: &SparseSample,
    kind: LossKind,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_sample(m, s)?;
    let mut tape = Tape::new();
    let k_net = TapeNet::register(&mut tape, &m.k_params);
    let v_net = TapeNet::register(&mut tape, &m.v_params);
    let loss = sample_loss_node(&mut tape, &k_net, &v_net, s, m.dt, kind)?;
    tape.backward(loss)?;
    Ok((
        tape.value(loss)[0],
        k_net.grad_flat(&tape),
        v_net.grad_flat(&tape),
    ))
}

/// Batch-mean loss and its exact parameter gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad_k: Vec<f64>,
    pub grad_v: Vec<f64>,
}

impl BatchGrad {
    /// Gradient in [`AsrnnModel::to_flat`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = self.grad_k.clone();
        flat.extend_from_slice(&self.grad_v);
        flat
    }

    pub fn norm(&self) -> f64 {
        self.grad_k
            .iter()
            .chain(&self.grad_v)
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

fn require_nonempty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::DegenerateData("empty batch".into()));
    }
    Ok(())
}

/// Trajectory-matching loss: roll each sample k steps from z0 and average the
/// endpoint mismatch against z_obs over the batch.
pub fn asrnn_loss(m: &AsrnnModel, batch: &[SparseSample], kind: LossKind) -> Result<f64> {
    require_nonempty(batch)?;
    let per = par::map_collect(batch, |s| sample_loss_plain(m, s, kind));
    let mut acc = 0.0;
    for r in per {
        acc += r?;
    }
    Ok(acc / batch.len() as f64)
}

/// Loss plus its exact reverse-mode gradient through every recurrent step.
///
/// Samples are differentiated independently (in parallel) and merged in batch
/// order, so the result is identical across thread counts.
pub fn asrnn_loss_gradient(
    m: &AsrnnModel,
    batch: &[SparseSample],
    kind: LossKind,
) -> Result<BatchGrad> {
    require_nonempty(batch)?;
    let per = par::map_collect(batch, |s| sample_loss_grad(m, s, kind));
    reduce_batch(per, batch.len(), m)
}

fn reduce_batch(
    per: Vec<Result<(f64, Vec<f64>, Vec<f64>)>>,
    n: usize,
    m: &AsrnnModel,
) -> Result<BatchGrad> {
    let mut loss = 0.0;
    let mut grad_k = vec![0.0; m.k_params.to_flat().len()];
    let mut grad_v = vec![0.0; m.v_params.to_flat().len()];
    for r in per {
        let (l, gk, gv) = r?;
        loss += l;
        for (acc, g) in grad_k.iter_mut().zip(&gk) {
            *acc += g;
        }
        for (acc, g) in grad_v.iter_mut().zip(&gv) {
            *acc += g;
        }
    }
    let scale = n as f64;
    loss /= scale;
    for g in grad_k.iter_mut().chain(grad_v.iter_mut()) {
        *g /= scale;
    }
    Ok(BatchGrad {
        loss,
        grad_k,
        grad_v,
    })
}

/// One observation pair for the finite-difference baseline loss.
#[derive(Clone, Debug)]
pub struct FdPair {
    pub z_t: PhaseState,
    pub z_next: PhaseState,
    pub lambda: Vec<f64>,
}

fn check_pair(m: &AsrnnModel, pair: &FdPair) -> Result<()> {
    for dim in [pair.z_t.dim(), pair.z_next.dim()] {
        if dim != m.dim() {
            return Err(Error::DimMismatch {
                expected: m.dim(),
                actual: dim,
            });
        }
    }
    if pair.lambda.len() != m.lambda_dim() {
        return Err(Error::DimMismatch {
            expected: m.lambda_dim(),
            actual: pair.lambda.len(),
        });
    }
    Ok(())
}

/// Forward-difference velocity targets for one pair: ((q'−q)/Δs, (p'−p)/Δs).
fn pair_targets(pair: &FdPair, ds: f64) -> (Vec<f64>, Vec<f64>) {
    let dq = pair
        .z_t
        .q
        .iter()
        .zip(&pair.z_next.q)
        .map(|(a, b)| (b - a) / ds)
        .collect();
    let dp = pair
        .z_t
        .p
        .iter()
        .zip(&pair.z_next.p)
        .map(|(a, b)| (b - a) / ds)
        .collect();
    (dq, dp)
}

fn pair_loss_plain(m: &AsrnnModel, pair: &FdPair, ds: f64) -> Result<f64> {
    check_pair(m, pair)?;
    let (dq, dp) = pair_targets(pair, ds);
    let kg = m.k_params.input_gradient(&pair.z_t.p)?;
    let mut vg = m
        .v_params
        .input_gradient(&join(&pair.z_t.q, &pair.lambda))?;
    vg.truncate(m.dim());
    let mut acc_k = 0.0;
    for (g, t) in kg.iter().zip(&dq) {
        let d = g - t;
        acc_k += d * d;
    }
    let mut acc_v = 0.0;
    for (g, t) in vg.iter().zip(&dp) {
        let d = g + t;
        acc_v += d * d;
    }
    Ok(acc_k + acc_v)
}

fn pair_loss_grad(m: &AsrnnModel, pair: &FdPair, ds: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(m, pair)?;
    let (dq, dp) = pair_targets(pair, ds);
    let mut tape = Tape::new();
    let k_net = TapeNet::register(&mut tape, &m.k_params);
    let v_net = TapeNet::register(&mut tape, &m.v_params);

    let p_in = tape.leaf(&pair.z_t.p);
    let kg = k_net.input_gradient(&mut tape, p_in);
    let tq = tape.leaf(&dq);
    let diff_k = tape.sub(kg, tq);
    let ss_k = tape.sum_sq(diff_k);

    let v_in = tape.leaf(&join(&pair.z_t.q, &pair.lambda));
    let vg_full = v_net.input_gradient(&mut tape, v_in);
    let vg = tape.slice(vg_full, 0, m.dim());
    let tp = tape.leaf(&dp);
    let diff_v = tape.add(vg, tp);
    let ss_v = tape.sum_sq(diff_v);

    let loss = tape.add(ss_k, ss_v);
    tape.backward(loss)?;
    Ok((
        tape.value(loss)[0],
        k_net.grad_flat(&tape),
        v_net.grad_flat(&tape),
    ))
}

/// Hamilton's-equations residual loss with forward finite-difference
/// derivative estimates: mean over pairs of
/// ‖∂K/∂p(p_t) − (q_{t+Δs}−q_t)/Δs‖² + ‖∂V/∂q(q_t;λ) + (p_{t+Δs}−p_t)/Δs‖².
pub fn ahnn_fd_loss(m: &AsrnnModel, pairs: &[FdPair], ds: f64) -> Result<f64> {
    require_nonempty(pairs)?;
    if !(ds > 0.0) {
        return Err(Error::Config(format!("Δs must be positive, got {ds}")));
    }
    let per = par::map_collect(pairs, |p| pair_loss_plain(m, p, ds));
    let mut acc = 0.0;
    for r in per {
        acc += r?;
    }
    Ok(acc / pairs.len() as f64)
}

/// Exact parameter gradient of [`ahnn_fd_loss`].
pub fn ahnn_fd_loss_gradient(m: &AsrnnModel, pairs: &[FdPair], ds: f64) -> Result<BatchGrad> {
    require_nonempty(pairs)?;
    if !(ds > 0.0) {
        return Err(Error::Config(format!("Δs must be positive, got {ds}")));
    }
    let per = par::map_collect(pairs, |p| pair_loss_grad(m, p, ds));
    reduce_batch(per, pairs.len(), m)
}
