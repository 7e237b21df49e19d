//! The recording tape: primitive ops, forward evaluation, reverse sweep.
//!
//! Nodes hold vectors (a scalar is a length-1 vector). Matrices appear only as
//! registered parameters, never as node values, which keeps the op set small.
//! Every op's forward rule lives in one place ([`Tape::eval_op`]) so a recorded
//! tape can be replayed bit-exactly.

use crate::error::{Error, Result};

/// Index of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Index of a registered parameter matrix or vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    /// Externally supplied value; untouched by replay.
    Leaf,
    /// y = W x + b.
    Affine {
        w: ParamId,
        b: ParamId,
        x: NodeId,
    },
    /// y = Wᵀ x.
    MatVecT {
        w: ParamId,
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Hadamard {
        a: NodeId,
        b: NodeId,
    },
    /// y = 1 − a² elementwise.
    OneMinusSq {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    /// y = a + c·b.
    AddScaled {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    /// Scalar ⟨a, b⟩.
    Dot {
        a: NodeId,
        b: NodeId,
    },
    /// Scalar Σᵢ aᵢ².
    SumSq {
        a: NodeId,
    },
    Slice {
        a: NodeId,
        start: usize,
        len: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    /// Scalar √a; caller must keep a > 0 for a finite derivative.
    SqrtScalar {
        a: NodeId,
    },
}

struct Node {
    op: Op,
    val: Vec<f64>,
    adj: Vec<f64>,
}

struct Param {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    adj: Vec<f64>,
}

/// y = W x with W row-major (rows × cols).
pub(crate) fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(y.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        y[r] = acc;
    }
}

/// y = Wᵀ x with W row-major (rows × cols).
pub(crate) fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    debug_assert_eq!(y.len(), cols);
    y.fill(0.0);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let xr = x[r];
        for c in 0..cols {
            y[c] += row[c] * xr;
        }
    }
}

/// Single-use recording of one differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Param>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a row-major parameter matrix (a vector is rows × 1).
    pub fn param(&mut self, rows: usize, cols: usize, data: &[f64]) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data length mismatch");
        self.params.push(Param {
            rows,
            cols,
            data: data.to_vec(),
            adj: vec![0.0; data.len()],
        });
        ParamId(self.params.len() - 1)
    }

    /// Record an input/constant vector.
    pub fn leaf(&mut self, values: &[f64]) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            val: values.to_vec(),
            adj: vec![0.0; values.len()],
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.leaf(&[value])
    }

    fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id.0].val.len()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let val = self.eval_op(&op);
        let adj = vec![0.0; val.len()];
        self.nodes.push(Node { op, val, adj });
        NodeId(self.nodes.len() - 1)
    }

    fn eval_op(&self, op: &Op) -> Vec<f64> {
        let v = |id: NodeId| &self.nodes[id.0].val;
        match *op {
            Op::Leaf => unreachable!("leaves are evaluated externally"),
            Op::Affine { w, b, x } => {
                let p = &self.params[w.0];
                let bias = &self.params[b.0];
                let mut y = vec![0.0; p.rows];
                matvec(&p.data, p.rows, p.cols, v(x), &mut y);
                for (yi, bi) in y.iter_mut().zip(&bias.data) {
                    *yi += bi;
                }
                y
            }
            Op::MatVecT { w, x } => {
                let p = &self.params[w.0];
                let mut y = vec![0.0; p.cols];
                matvec_t(&p.data, p.rows, p.cols, v(x), &mut y);
                y
            }
            Op::Add { a, b } => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
            Op::Sub { a, b } => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
            Op::Hadamard { a, b } => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
            Op::OneMinusSq { a } => v(a).iter().map(|x| 1.0 - x * x).collect(),
            Op::Tanh { a } => v(a).iter().map(|x| x.tanh()).collect(),
            Op::AddScaled { a, b, c } => v(a).iter().zip(v(b)).map(|(x, y)| x + c * y).collect(),
            Op::Scale { a, c } => v(a).iter().map(|x| c * x).collect(),
            Op::Dot { a, b } => {
                let mut acc = 0.0;
                for (x, y) in v(a).iter().zip(v(b)) {
                    acc += x * y;
                }
                vec![acc]
            }
            Op::SumSq { a } => {
                let mut acc = 0.0;
                for x in v(a) {
                    acc += x * x;
                }
                vec![acc]
            }
            Op::Slice { a, start, len } => v(a)[start..start + len].to_vec(),
            Op::Concat { a, b } => {
                let mut y = v(a).clone();
                y.extend_from_slice(v(b));
                y
            }
            Op::SqrtScalar { a } => vec![v(a)[0].sqrt()],
        }
    }

    pub fn affine(&mut self, w: ParamId, b: ParamId, x: NodeId) -> NodeId {
        let p = &self.params[w.0];
        assert_eq!(p.cols, self.len_of(x), "affine input length mismatch");
        assert_eq!(p.rows, self.params[b.0].rows, "affine bias length mismatch");
        self.push(Op::Affine { w, b, x })
    }

    pub fn matvec_t_op(&mut self, w: ParamId, x: NodeId) -> NodeId {
        assert_eq!(
            self.params[w.0].rows,
            self.len_of(x),
            "matvec_t length mismatch"
        );
        self.push(Op::MatVecT { w, x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "add length mismatch");
        self.push(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "sub length mismatch");
        self.push(Op::Sub { a, b })
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "hadamard length mismatch");
        self.push(Op::Hadamard { a, b })
    }

    pub fn one_minus_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::OneMinusSq { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Tanh { a })
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "add_scaled length mismatch");
        self.push(Op::AddScaled { a, b, c })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale { a, c })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), self.len_of(b), "dot length mismatch");
        self.push(Op::Dot { a, b })
    }

    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SumSq { a })
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        assert!(start + len <= self.len_of(a), "slice out of bounds");
        self.push(Op::Slice { a, start, len })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Concat { a, b })
    }

    pub fn sqrt_scalar(&mut self, a: NodeId) -> NodeId {
        assert_eq!(self.len_of(a), 1, "sqrt_scalar expects a scalar");
        self.push(Op::SqrtScalar { a })
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].val
    }

    /// Adjoint of a leaf after `backward` (gradient of the output w.r.t. it).
    pub fn leaf_adjoint(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].adj
    }

    /// Adjoint of a registered parameter after `backward`, row-major.
    pub fn param_adjoint(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].adj
    }

    /// Recompute every non-leaf node from its inputs in recording order.
    pub fn replay_all(&mut self) {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op;
            let val = self.eval_op(&op);
            self.nodes[i].val = val;
        }
    }

    /// Run the reverse sweep from a scalar output node, filling node and
    /// parameter adjoints. Resets all adjoints first, so each call stands
    /// alone.
    pub fn backward(&mut self, output: NodeId) -> Result<()> {
        let n_out = self.len_of(output);
        if n_out != 1 {
            return Err(Error::TapeContract(format!(
                "backward requires a scalar output node, got length {n_out}"
            )));
        }
        for node in &mut self.nodes {
            node.adj.fill(0.0);
        }
        for param in &mut self.params {
            param.adj.fill(0.0);
        }
        self.nodes[output.0].adj[0] = 1.0;

        for i in (0..=output.0).rev() {
            // Inputs always precede their consumer, so splitting at i gives
            // disjoint borrows: this node's adjoint/value (read-only) and the
            // earlier nodes' adjoints (written). Parameters live in a separate
            // field and never alias nodes.
            let (before, rest) = self.nodes.split_at_mut(i);
            let op = rest[0].op;
            let adj = &rest[0].adj;
            let val = &rest[0].val;
            match op {
                Op::Leaf => {}
                Op::Affine { w, b, x } => {
                    let (rows, cols) = (self.params[w.0].rows, self.params[w.0].cols);
                    let mut xbar = vec![0.0; cols];
                    matvec_t(&self.params[w.0].data, rows, cols, adj, &mut xbar);
                    for (t, g) in before[x.0].adj.iter_mut().zip(&xbar) {
                        *t += g;
                    }
                    let xval = &before[x.0].val;
                    let wadj = &mut self.params[w.0].adj;
                    for r in 0..rows {
                        let yr = adj[r];
                        let row = &mut wadj[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            row[c] += yr * xval[c];
                        }
                    }
                    for (t, y) in self.params[b.0].adj.iter_mut().zip(adj) {
                        *t += y;
                    }
                }
                Op::MatVecT { w, x } => {
                    let (rows, cols) = (self.params[w.0].rows, self.params[w.0].cols);
                    let mut xbar = vec![0.0; rows];
                    matvec(&self.params[w.0].data, rows, cols, adj, &mut xbar);
                    for (t, g) in before[x.0].adj.iter_mut().zip(&xbar) {
                        *t += g;
                    }
                    let xval = &before[x.0].val;
                    let wadj = &mut self.params[w.0].adj;
                    for r in 0..rows {
                        let xr = xval[r];
                        let row = &mut wadj[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            row[c] += xr * adj[c];
                        }
                    }
                }
                Op::Add { a, b } => {
                    for (t, y) in before[a.0].adj.iter_mut().zip(adj) {
                        *t += y;
                    }
                    for (t, y) in before[b.0].adj.iter_mut().zip(adj) {
                        *t += y;
                    }
                }
                Op::Sub { a, b } => {
                    for (t, y) in before[a.0].adj.iter_mut().zip(adj) {
                        *t += y;
                    }
                    for (t, y) in before[b.0].adj.iter_mut().zip(adj) {
                        *t -= y;
                    }
                }
                Op::Hadamard { a, b } => {
                    let bval = before[b.0].val.clone();
                    for ((t, y), bv) in before[a.0].adj.iter_mut().zip(adj).zip(&bval) {
                        *t += y * bv;
                    }
                    let aval = before[a.0].val.clone();
                    for ((t, y), av) in before[b.0].adj.iter_mut().zip(adj).zip(&aval) {
                        *t += y * av;
                    }
                }
                Op::OneMinusSq { a } => {
                    let node_a = &mut before[a.0];
                    for ((t, y), x) in node_a.adj.iter_mut().zip(adj).zip(&node_a.val) {
                        *t += -2.0 * x * y;
                    }
                }
                Op::Tanh { a } => {
                    for ((t, y), v) in before[a.0].adj.iter_mut().zip(adj).zip(val) {
                        *t += (1.0 - v * v) * y;
                    }
                }
                Op::AddScaled { a, b, c } => {
                    for (t, y) in before[a.0].adj.iter_mut().zip(adj) {
                        *t += y;
                    }
                    for (t, y) in before[b.0].adj.iter_mut().zip(adj) {
                        *t += c * y;
                    }
                }
                Op::Scale { a, c } => {
                    for (t, y) in before[a.0].adj.iter_mut().zip(adj) {
                        *t += c * y;
                    }
                }
                Op::Dot { a, b } => {
                    let y = adj[0];
                    let bval = before[b.0].val.clone();
                    for (t, bv) in before[a.0].adj.iter_mut().zip(&bval) {
                        *t += y * bv;
                    }
                    let aval = before[a.0].val.clone();
                    for (t, av) in before[b.0].adj.iter_mut().zip(&aval) {
                        *t += y * av;
                    }
                }
                Op::SumSq { a } => {
                    let y = adj[0];
                    let node_a = &mut before[a.0];
                    for (t, x) in node_a.adj.iter_mut().zip(&node_a.val) {
                        *t += 2.0 * y * x;
                    }
                }
                Op::Slice { a, start, len } => {
                    let t = &mut before[a.0].adj;
                    for j in 0..len {
                        t[start + j] += adj[j];
                    }
                }
                Op::Concat { a, b } => {
                    let la = before[a.0].val.len();
                    for (t, y) in before[a.0].adj.iter_mut().zip(&adj[..la]) {
                        *t += y;
                    }
                    for (t, y) in before[b.0].adj.iter_mut().zip(&adj[la..]) {
                        *t += y;
                    }
                }
                Op::SqrtScalar { a } => {
                    before[a.0].adj[0] += adj[0] / (2.0 * val[0]);
                }
            }
        }
        Ok(())
    }
}
