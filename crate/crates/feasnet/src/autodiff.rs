//! Tape-based reverse-mode automatic differentiation over `f64` vectors.
//!
//! A [`Tape`] is an append-only record of vector-valued operations. Nodes are
//! topologically ordered by construction: an operation can only reference
//! already-recorded inputs, so cycles cannot be expressed. Scalars are
//! length-1 vectors. Forward values are cached in one arena and every op
//! computes them through the kernels in [`crate::kernels`], which means
//! replaying a tape, or evaluating the same formula without a tape,
//! reproduces values bit for bit.
//!
//! [`Tape::backward`] runs reverse accumulation from a scalar root and
//! returns adjoints for every gradient-tracked leaf. [`Tape::stop_gradient`]
//! inserts a barrier whose forward value is an exact copy but which
//! contributes nothing to any adjoint. [`Tape::pass_through`] is the
//! complement used by truncated unrolling: it injects an externally computed
//! value while routing the adjoint, unchanged, to a designated carrier node.
//!
//! Shape violations are programmer errors and panic; they cannot be caused
//! by run-time data.

use crate::kernels as k;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf { tracked: bool },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Constant times vector.
    Scale(NodeId, f64),
    /// Scalar node times vector.
    ScaleBy { s: NodeId, v: NodeId },
    /// Elementwise product.
    Mul(NodeId, NodeId),
    MatVec { m: NodeId, v: NodeId, rows: usize, cols: usize, transpose: bool },
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    /// max(x, 0) componentwise; backward uses subgradient 0 at the kink.
    Relu(NodeId),
    Softplus { x: NodeId, beta: f64 },
    L2Norm(NodeId),
    Silu(NodeId),
    Square(NodeId),
    StopGradient(NodeId),
    /// Value injected from outside the tape; adjoint flows to `carrier`.
    PassThrough { carrier: NodeId },
}

struct NodeRec {
    op: Op,
    off: usize,
    len: usize,
    /// Whether any adjoint can reach a tracked leaf through this node.
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<NodeRec>,
    vals: Vec<f64>,
}

/// Adjoints produced by [`Tape::backward`], indexable by `NodeId`.
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `root` with respect to the node, if one was accumulated.
    /// Untracked nodes and nodes the root does not depend on return `None`.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.adj.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.adj.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Drops all nodes and cached values, keeping allocations for reuse.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.vals.clear();
    }

    pub fn val(&self, id: NodeId) -> &[f64] {
        let n = &self.nodes[id];
        &self.vals[n.off..n.off + n.len]
    }

    pub fn len_of(&self, id: NodeId) -> usize {
        self.nodes[id].len
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.val(id);
        assert_eq!(v.len(), 1, "scalar() on a node of length {}", v.len());
        v[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        let tracked = match &op {
            Op::Leaf { tracked } => *tracked,
            Op::StopGradient(_) => false,
            Op::PassThrough { carrier } => self.nodes[*carrier].tracked,
            other => self.inputs_of(other).iter().any(|&i| self.nodes[i].tracked),
        };
        let off = self.vals.len();
        let len = value.len();
        self.vals.extend_from_slice(&value);
        self.nodes.push(NodeRec { op, off, len, tracked });
        self.nodes.len() - 1
    }

    fn inputs_of(&self, op: &Op) -> Vec<NodeId> {
        match *op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::ScaleBy { s: a, v: b }
            | Op::MatVec { m: a, v: b, .. } => vec![a, b],
            Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Sin(x)
            | Op::Cos(x)
            | Op::Exp(x)
            | Op::Log(x)
            | Op::Sqrt(x)
            | Op::Relu(x)
            | Op::Softplus { x, .. }
            | Op::L2Norm(x)
            | Op::Silu(x)
            | Op::Square(x)
            | Op::StopGradient(x)
            | Op::PassThrough { carrier: x } => vec![x],
        }
    }

    /// Forward evaluation of one op from its inputs' cached values.
    /// `None` for nodes whose value is injected (leaves, pass-throughs).
    fn eval(&self, op: &Op) -> Option<Vec<f64>> {
        Some(match *op {
            Op::Leaf { .. } | Op::PassThrough { .. } => return None,
            Op::Add(a, b) => k::add(self.val(a), self.val(b)),
            Op::Sub(a, b) => k::sub(self.val(a), self.val(b)),
            Op::Scale(v, c) => k::scale(c, self.val(v)),
            Op::ScaleBy { s, v } => k::scale(self.scalar(s), self.val(v)),
            Op::Mul(a, b) => k::emul(self.val(a), self.val(b)),
            Op::MatVec { m, v, rows, cols, transpose } => {
                k::matvec(self.val(m), rows, cols, transpose, self.val(v))
            }
            Op::Dot(a, b) => vec![k::dot(self.val(a), self.val(b))],
            Op::Sum(x) => vec![k::sum(self.val(x))],
            Op::Sin(x) => k::map_sin(self.val(x)),
            Op::Cos(x) => k::map_cos(self.val(x)),
            Op::Exp(x) => k::map_exp(self.val(x)),
            Op::Log(x) => k::map_log(self.val(x)),
            Op::Sqrt(x) => k::map_sqrt(self.val(x)),
            Op::Relu(x) => k::map_relu(self.val(x)),
            Op::Softplus { x, beta } => k::map_softplus(self.val(x), beta),
            Op::L2Norm(x) => vec![k::l2_norm(self.val(x))],
            Op::Silu(x) => k::map_silu(self.val(x)),
            Op::Square(x) => k::map_square(self.val(x)),
            Op::StopGradient(x) => self.val(x).to_vec(),
        })
    }

    fn record(&mut self, op: Op) -> NodeId {
        let v = self.eval(&op).expect("record() needs a computable op");
        self.push(op, v)
    }

    // ── Builders ────────────────────────────────────────────────────────

    /// Gradient-tracked input.
    pub fn leaf(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf { tracked: true }, data.to_vec())
    }

    /// Input that never receives an adjoint (problem data, detached scalars).
    pub fn constant(&mut self, data: &[f64]) -> NodeId {
        self.push(Op::Leaf { tracked: false }, data.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.record(Op::Sub(a, b))
    }

    pub fn scale(&mut self, c: f64, v: NodeId) -> NodeId {
        self.record(Op::Scale(v, c))
    }

    /// Multiply vector `v` by the length-1 node `s`.
    pub fn scale_by(&mut self, s: NodeId, v: NodeId) -> NodeId {
        assert_eq!(self.len_of(s), 1, "scale_by: scalar operand must have length 1");
        self.record(Op::ScaleBy { s, v })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.record(Op::Mul(a, b))
    }

    /// `m` is a flat `rows x cols` row-major matrix node. With
    /// `transpose = false` maps length `cols` to `rows`, otherwise the
    /// reverse. Gradients flow to both the matrix and the vector.
    pub fn matvec(&mut self, m: NodeId, rows: usize, cols: usize, transpose: bool, v: NodeId) -> NodeId {
        self.record(Op::MatVec { m, v, rows, cols, transpose })
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.record(Op::Dot(a, b))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sum(x))
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sin(x))
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Cos(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Exp(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Log(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sqrt(x))
    }

    /// Componentwise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId, beta: f64) -> NodeId {
        self.record(Op::Softplus { x, beta })
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        self.record(Op::L2Norm(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Silu(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Square(x))
    }

    /// Identical forward value; all upstream adjoints are zeroed.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let v = self.val(x).to_vec();
        self.push(Op::StopGradient(x), v)
    }

    /// Records `value` while the backward pass forwards the adjoint to
    /// `carrier` unchanged. Equivalent to `carrier + stop(value - carrier)`
    /// but without perturbing the forward bits. Used to splice untracked
    /// solver iterations onto a tracked prefix.
    pub fn pass_through(&mut self, carrier: NodeId, value: &[f64]) -> NodeId {
        assert_eq!(
            self.len_of(carrier),
            value.len(),
            "pass_through: carrier length {} != value length {}",
            self.len_of(carrier),
            value.len()
        );
        self.push(Op::PassThrough { carrier }, value.to_vec())
    }

    // ── Reverse accumulation ────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Panics if `root` is not a
    /// length-1 node. Adjoints are only materialized for nodes on a tracked
    /// path, everything else stays `None`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.len_of(root), 1, "backward: root must be scalar");
        let mut adj: Vec<Option<Vec<f64>>> = Vec::with_capacity(root + 1);
        adj.resize_with(root + 1, || None);
        if self.nodes[root].tracked {
            adj[root] = Some(vec![1.0]);
        }

        for id in (0..=root).rev() {
            let dz = match adj[id].take() {
                Some(d) => d,
                None => continue,
            };
            let rec = &self.nodes[id];
            match rec.op {
                Op::Leaf { tracked } => {
                    if tracked {
                        adj[id] = Some(dz); // keep for the caller
                    }
                    continue;
                }
                Op::Add(a, b) => {
                    self.acc_slice(&mut adj, a, &dz);
                    self.acc_slice(&mut adj, b, &dz);
                }
                Op::Sub(a, b) => {
                    self.acc_slice(&mut adj, a, &dz);
                    self.acc_with(&mut adj, b, |out| {
                        for (o, d) in out.iter_mut().zip(&dz) {
                            *o -= d;
                        }
                    });
                }
                Op::Scale(v, c) => {
                    self.acc_with(&mut adj, v, |out| {
                        for (o, d) in out.iter_mut().zip(&dz) {
                            *o += c * d;
                        }
                    });
                }
                Op::ScaleBy { s, v } => {
                    let s0 = self.scalar(s);
                    let vv = self.val(v);
                    self.acc_with(&mut adj, s, |out| out[0] += k::dot(&dz, vv));
                    self.acc_with(&mut adj, v, |out| {
                        for (o, d) in out.iter_mut().zip(&dz) {
                            *o += s0 * d;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.val(a), self.val(b));
                    self.acc_with(&mut adj, a, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * vb[i];
                        }
                    });
                    self.acc_with(&mut adj, b, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * va[i];
                        }
                    });
                }
                Op::MatVec { m, v, rows, cols, transpose } => {
                    let (vm, vv) = (self.val(m), self.val(v));
                    if transpose {
                        // z = m^T v, z_j = Σ_i m_ij v_i
                        self.acc_with(&mut adj, m, |out| {
                            for i in 0..rows {
                                let vi = vv[i];
                                let row = &mut out[i * cols..(i + 1) * cols];
                                for j in 0..cols {
                                    row[j] += vi * dz[j];
                                }
                            }
                        });
                        self.acc_with(&mut adj, v, |out| {
                            for i in 0..rows {
                                out[i] += k::dot(&vm[i * cols..(i + 1) * cols], &dz);
                            }
                        });
                    } else {
                        // z = m v, z_i = Σ_j m_ij v_j
                        self.acc_with(&mut adj, m, |out| {
                            for i in 0..rows {
                                let di = dz[i];
                                let row = &mut out[i * cols..(i + 1) * cols];
                                for j in 0..cols {
                                    row[j] += di * vv[j];
                                }
                            }
                        });
                        self.acc_with(&mut adj, v, |out| {
                            for i in 0..rows {
                                let di = dz[i];
                                let row = &vm[i * cols..(i + 1) * cols];
                                for j in 0..cols {
                                    out[j] += row[j] * di;
                                }
                            }
                        });
                    }
                }
                Op::Dot(a, b) => {
                    let d0 = dz[0];
                    let (va, vb) = (self.val(a), self.val(b));
                    self.acc_with(&mut adj, a, |out| {
                        for i in 0..out.len() {
                            out[i] += d0 * vb[i];
                        }
                    });
                    self.acc_with(&mut adj, b, |out| {
                        for i in 0..out.len() {
                            out[i] += d0 * va[i];
                        }
                    });
                }
                Op::Sum(x) => {
                    let d0 = dz[0];
                    self.acc_with(&mut adj, x, |out| {
                        for o in out.iter_mut() {
                            *o += d0;
                        }
                    });
                }
                Op::Sin(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * vx[i].cos();
                        }
                    });
                }
                Op::Cos(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] -= dz[i] * vx[i].sin();
                        }
                    });
                }
                Op::Exp(x) => {
                    let vz = self.val(id);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * vz[i];
                        }
                    });
                }
                Op::Log(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] / vx[i];
                        }
                    });
                }
                Op::Sqrt(x) => {
                    let vz = self.val(id);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] / (2.0 * vz[i]);
                        }
                    });
                }
                Op::Relu(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            if vx[i] > 0.0 {
                                out[i] += dz[i];
                            }
                        }
                    });
                }
                Op::Softplus { x, beta } => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * k::softplus_deriv(vx[i], beta);
                        }
                    });
                }
                Op::L2Norm(x) => {
                    let d0 = dz[0];
                    let norm = self.scalar(id).max(k::EPS_NORM);
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += d0 * vx[i] / norm;
                        }
                    });
                }
                Op::Silu(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * k::silu_deriv(vx[i]);
                        }
                    });
                }
                Op::Square(x) => {
                    let vx = self.val(x);
                    self.acc_with(&mut adj, x, |out| {
                        for i in 0..out.len() {
                            out[i] += dz[i] * 2.0 * vx[i];
                        }
                    });
                }
                Op::StopGradient(_) => {}
                Op::PassThrough { carrier } => {
                    self.acc_slice(&mut adj, carrier, &dz);
                }
            }
        }
        Gradients { adj }
    }

    fn acc_slice(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]) {
        self.acc_with(adj, id, |out| {
            for (o, c) in out.iter_mut().zip(contrib) {
                *o += c;
            }
        });
    }

    fn acc_with(&self, adj: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].tracked {
            return;
        }
        let slot = adj[id].get_or_insert_with(|| vec![0.0; self.nodes[id].len]);
        f(slot);
    }

    /// Recomputes every derived node from its inputs and checks the cached
    /// values bit for bit. `true` when the whole tape reproduces.
    pub fn replay_matches(&self) -> bool {
        for (id, rec) in self.nodes.iter().enumerate() {
            if let Some(v) = self.eval(&rec.op) {
                let cached = self.val(id);
                if v.len() != cached.len() {
                    return false;
                }
                if v.iter().zip(cached).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return false;
                }
            }
        }
        true
    }
}

/// Maximum relative error between the tape gradient of `f` and central
/// finite differences with step `fd_step`, taken over components. The
/// denominator is floored at 1 so near-zero components compare absolutely.
pub fn grad_check<F>(f: F, point: &[f64], fd_step: f64) -> f64
where
    F: Fn(&mut Tape, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point);
    let root = f(&mut tape, x);
    assert_eq!(tape.len_of(root), 1, "grad_check: function must be scalar-valued");
    let grads = tape.backward(root);
    let g_ad = grads.wrt(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(p);
        let r = f(&mut t, x);
        t.scalar(r)
    };

    let mut worst: f64 = 0.0;
    let mut p = point.to_vec();
    for i in 0..point.len() {
        let orig = p[i];
        p[i] = orig + fd_step;
        let fp = eval(&p);
        p[i] = orig - fd_step;
        let fm = eval(&p);
        p[i] = orig;
        let g_fd = (fp - fm) / (2.0 * fd_step);
        assert!(g_fd.is_finite(), "grad_check: non-finite finite-difference value");
        let denom = g_ad[i].abs().max(g_fd.abs()).max(1.0);
        worst = worst.max((g_ad[i] - g_fd).abs() / denom);
    }
    worst
}
