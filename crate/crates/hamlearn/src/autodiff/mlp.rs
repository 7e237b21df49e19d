//! Scalar-output tanh MLPs: parameters, evaluation, input gradients.
//!
//! Two evaluation paths share the same matrix kernels and therefore produce
//! bit-identical values: a plain path on raw slices (cheap, for prediction and
//! finite-difference oracles) and a taped path whose input-gradient is built
//! from primitive ops so it can itself be differentiated w.r.t. parameters.
//!
//! The input-gradient of y = W_L a_{L-1} + b_L with a_l = tanh(W_l a_{l-1} + b_l)
//! is the closed-form chain
//!   g_{L-1} = W_Lᵀ · 1,   g_{l-1} = W_lᵀ (g_l ⊙ (1 − a_l²)),
//! evaluated down to g_0 = ∇ₓy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::tape::{matvec, matvec_t, NodeId, ParamId, Tape};
use crate::error::{Error, Result};
use crate::io;

/// Layer-size list for one scalar-output network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

impl MlpSpec {
    /// Validate and wrap a layer-size list: input dim first, then at least one
    /// hidden layer, then an output dim of exactly 1.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 3 {
            return Err(Error::BadSpec(format!(
                "need input, at least one hidden, and output layer; got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::BadSpec(format!(
                "zero-width layer in {layer_sizes:?}"
            )));
        }
        if *layer_sizes.last().expect("non-empty") != 1 {
            return Err(Error::BadSpec(format!(
                "output dimension must be 1 (scalar energy), got {layer_sizes:?}"
            )));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    /// Number of weight matrices (= number of affine layers).
    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total scalar parameter count (weights + biases).
    pub fn n_params(&self) -> usize {
        (0..self.n_layers())
            .map(|l| self.layer_sizes[l + 1] * (self.layer_sizes[l] + 1))
            .sum()
    }
}

/// Weights and biases of one network, plus the seed that initialized it.
///
/// `weights[l]` is row-major with shape (layer_sizes[l+1], layer_sizes[l]).
/// Serializes to a JSON checkpoint that round-trips finite doubles bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Gaussian-initialized parameters: weights ~ N(0, 1/fan_in), biases zero.
///
/// Draws are made layer by layer in row-major order from a stream seeded only
/// by `seed`, so the result is a pure function of (spec, seed).
pub fn init_gaussian(spec: &MlpSpec, seed: u64) -> MlpParams {
    let sizes = spec.layer_sizes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(spec.n_layers());
    let mut biases = Vec::with_capacity(spec.n_layers());
    for l in 0..spec.n_layers() {
        let (rows, cols) = (sizes[l + 1], sizes[l]);
        let dist = Normal::new(0.0, (1.0 / cols as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
        weights.push(w);
        biases.push(vec![0.0; rows]);
    }
    MlpParams {
        layer_sizes: sizes.to_vec(),
        weights,
        biases,
        seed,
    }
}

impl MlpParams {
    pub fn spec(&self) -> Result<MlpSpec> {
        MlpSpec::new(self.layer_sizes.clone())
    }

    /// Check shape consistency and finiteness of every entry.
    pub fn validate(&self) -> Result<()> {
        let spec = self.spec()?;
        let sizes = spec.layer_sizes();
        if self.weights.len() != spec.n_layers() || self.biases.len() != spec.n_layers() {
            return Err(Error::BadSpec(format!(
                "expected {} weight/bias layers, got {}/{}",
                spec.n_layers(),
                self.weights.len(),
                self.biases.len()
            )));
        }
        for l in 0..spec.n_layers() {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            if self.weights[l].len() != rows * cols {
                return Err(Error::BadSpec(format!(
                    "layer {l} weight length {} != {rows}x{cols}",
                    self.weights[l].len()
                )));
            }
            if self.biases[l].len() != rows {
                return Err(Error::BadSpec(format!(
                    "layer {l} bias length {} != {rows}",
                    self.biases[l].len()
                )));
            }
            if self.weights[l]
                .iter()
                .chain(&self.biases[l])
                .any(|v| !v.is_finite())
            {
                return Err(Error::BadSpec(format!("non-finite parameter in layer {l}")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Hidden-layer activations a_1..a_{L-1} (post-tanh).
    fn hidden_acts(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let sizes = &self.layer_sizes;
        let mut acts = Vec::with_capacity(self.n_layers() - 1);
        let mut cur = x.to_vec();
        for l in 0..self.n_layers() - 1 {
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let mut y = vec![0.0; rows];
            matvec(&self.weights[l], rows, cols, &cur, &mut y);
            for (yi, bi) in y.iter_mut().zip(&self.biases[l]) {
                *yi += bi;
            }
            for yi in y.iter_mut() {
                *yi = yi.tanh();
            }
            acts.push(y.clone());
            cur = y;
        }
        acts
    }

    /// Forward pass: x through tanh hidden layers and a linear output neuron.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        let acts = self.hidden_acts(x);
        let last = self.n_layers() - 1;
        let input = acts.last().map(|a| a.as_slice()).unwrap_or(x);
        let mut y = vec![0.0];
        matvec(
            &self.weights[last],
            1,
            self.layer_sizes[last],
            input,
            &mut y,
        );
        Ok(y[0] + self.biases[last][0])
    }

    /// Analytic ∇ₓ eval via the tanh derivative chain.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let sizes = &self.layer_sizes;
        let acts = self.hidden_acts(x);
        let last = self.n_layers() - 1;
        let mut g = vec![0.0; sizes[last]];
        matvec_t(&self.weights[last], 1, sizes[last], &[1.0], &mut g);
        for l in (0..last).rev() {
            let a = &acts[l];
            let mut h = vec![0.0; a.len()];
            for i in 0..a.len() {
                let d = 1.0 - a[i] * a[i];
                h[i] = g[i] * d;
            }
            let (rows, cols) = (sizes[l + 1], sizes[l]);
            let mut g_prev = vec![0.0; cols];
            matvec_t(&self.weights[l], rows, cols, &h, &mut g_prev);
            g = g_prev;
        }
        Ok(g)
    }

    /// Flatten parameters layer by layer: weights (row-major), then biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in 0..self.n_layers() {
            flat.extend_from_slice(&self.weights[l]);
            flat.extend_from_slice(&self.biases[l]);
        }
        flat
    }

    /// Overwrite parameters from a flat vector in `to_flat` order.
    pub fn set_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected: usize = self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>();
        if flat.len() != expected {
            return Err(Error::DimMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut i = 0;
        for l in 0..self.n_layers() {
            let nw = self.weights[l].len();
            self.weights[l].copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = self.biases[l].len();
            self.biases[l].copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let params: MlpParams = io::read_json(path)?;
        params.validate()?;
        Ok(params)
    }
}

/// One network registered on a tape: parameter ids plus builders for the
/// forward pass and the differentiable input-gradient.
pub struct TapeNet {
    w: Vec<ParamId>,
    b: Vec<ParamId>,
    sizes: Vec<usize>,
}

impl TapeNet {
    pub fn register(tape: &mut Tape, params: &MlpParams) -> Self {
        let sizes = params.layer_sizes.clone();
        let mut w = Vec::with_capacity(params.n_layers());
        let mut b = Vec::with_capacity(params.n_layers());
        for l in 0..params.n_layers() {
            w.push(tape.param(sizes[l + 1], sizes[l], &params.weights[l]));
            b.push(tape.param(sizes[l + 1], 1, &params.biases[l]));
        }
        Self { w, b, sizes }
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Hidden activations a_1..a_{L-1} as tape nodes.
    fn hidden_forward(&self, tape: &mut Tape, x: NodeId) -> Vec<NodeId> {
        let mut acts = Vec::with_capacity(self.n_layers() - 1);
        let mut cur = x;
        for l in 0..self.n_layers() - 1 {
            let pre = tape.affine(self.w[l], self.b[l], cur);
            let act = tape.tanh(pre);
            acts.push(act);
            cur = act;
        }
        acts
    }

    fn output_layer(&self, tape: &mut Tape, x: NodeId, acts: &[NodeId]) -> NodeId {
        let last = self.n_layers() - 1;
        let input = acts.last().copied().unwrap_or(x);
        tape.affine(self.w[last], self.b[last], input)
    }

    fn gradient_chain(&self, tape: &mut Tape, x: NodeId, acts: &[NodeId]) -> NodeId {
        let _ = x;
        let last = self.n_layers() - 1;
        let one = tape.leaf(&[1.0]);
        let mut g = tape.matvec_t_op(self.w[last], one);
        for l in (0..last).rev() {
            let d = tape.one_minus_sq(acts[l]);
            let h = tape.hadamard(g, d);
            g = tape.matvec_t_op(self.w[l], h);
        }
        g
    }

    /// Scalar network output node.
    pub fn eval(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let acts = self.hidden_forward(tape, x);
        self.output_layer(tape, x, &acts)
    }

    /// Input-gradient node (length = input dim), differentiable w.r.t. the
    /// registered parameters.
    pub fn input_gradient(&self, tape: &mut Tape, x: NodeId) -> NodeId {
        let acts = self.hidden_forward(tape, x);
        self.gradient_chain(tape, x, &acts)
    }

    /// Output and input-gradient sharing one forward pass.
    pub fn eval_and_input_gradient(&self, tape: &mut Tape, x: NodeId) -> (NodeId, NodeId) {
        let acts = self.hidden_forward(tape, x);
        let y = self.output_layer(tape, x, &acts);
        let g = self.gradient_chain(tape, x, &acts);
        (y, g)
    }

    /// Harvest parameter adjoints after `Tape::backward`, in `to_flat` order.
    pub fn grad_flat(&self, tape: &Tape) -> Vec<f64> {
        let mut flat = Vec::new();
        for l in 0..self.n_layers() {
            flat.extend_from_slice(tape.param_adjoint(self.w[l]));
            flat.extend_from_slice(tape.param_adjoint(self.b[l]));
        }
        flat
    }
}
