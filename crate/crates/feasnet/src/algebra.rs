//! One formula, two evaluation modes.
//!
//! Numeric formulas in this crate (objectives, violations, solver steps,
//! network layers) are written once, generically over [`Algebra`]. The
//! [`Plain`] carrier evaluates on bare `Vec<f64>` with no recording; the
//! [`Taped`] carrier records the same kernel calls on a [`Tape`] so the
//! result can be differentiated. Because both route through
//! [`crate::kernels`] with the same call sequence, forward values agree
//! bit for bit between the two modes.

use crate::autodiff::{NodeId, Tape};
use crate::kernels as k;

pub trait Algebra {
    type V: Clone;

    /// Introduce data the gradient never flows into.
    fn lift(&mut self, data: &[f64]) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a [f64];
    fn scalar(&self, v: &Self::V) -> f64 {
        let s = self.value(v);
        assert_eq!(s.len(), 1, "scalar carrier of length {}", s.len());
        s[0]
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn scale(&mut self, c: f64, v: &Self::V) -> Self::V;
    /// Multiply by a length-1 carrier.
    fn scale_by(&mut self, s: &Self::V, v: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn matvec(&mut self, m: &Self::V, rows: usize, cols: usize, transpose: bool, v: &Self::V) -> Self::V;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sum(&mut self, v: &Self::V) -> Self::V;
    fn sin(&mut self, v: &Self::V) -> Self::V;
    fn cos(&mut self, v: &Self::V) -> Self::V;
    fn exp(&mut self, v: &Self::V) -> Self::V;
    fn log(&mut self, v: &Self::V) -> Self::V;
    fn relu(&mut self, v: &Self::V) -> Self::V;
    fn softplus(&mut self, v: &Self::V, beta: f64) -> Self::V;
    fn l2_norm(&mut self, v: &Self::V) -> Self::V;
    fn silu(&mut self, v: &Self::V) -> Self::V;
    fn square(&mut self, v: &Self::V) -> Self::V;
    fn stop_gradient(&mut self, v: &Self::V) -> Self::V;
}

/// Direct evaluation; carriers are plain vectors.
#[derive(Default)]
pub struct Plain;

impl Algebra for Plain {
    type V = Vec<f64>;

    fn lift(&mut self, data: &[f64]) -> Vec<f64> {
        data.to_vec()
    }

    fn value<'a>(&'a self, v: &'a Vec<f64>) -> &'a [f64] {
        v
    }

    fn add(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        k::add(a, b)
    }

    fn sub(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        k::sub(a, b)
    }

    fn scale(&mut self, c: f64, v: &Vec<f64>) -> Vec<f64> {
        k::scale(c, v)
    }

    fn scale_by(&mut self, s: &Vec<f64>, v: &Vec<f64>) -> Vec<f64> {
        assert_eq!(s.len(), 1, "scale_by: scalar operand must have length 1");
        k::scale(s[0], v)
    }

    fn mul(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        k::emul(a, b)
    }

    fn matvec(&mut self, m: &Vec<f64>, rows: usize, cols: usize, transpose: bool, v: &Vec<f64>) -> Vec<f64> {
        k::matvec(m, rows, cols, transpose, v)
    }

    fn dot(&mut self, a: &Vec<f64>, b: &Vec<f64>) -> Vec<f64> {
        vec![k::dot(a, b)]
    }

    fn sum(&mut self, v: &Vec<f64>) -> Vec<f64> {
        vec![k::sum(v)]
    }

    fn sin(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_sin(v)
    }

    fn cos(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_cos(v)
    }

    fn exp(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_exp(v)
    }

    fn log(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_log(v)
    }

    fn relu(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_relu(v)
    }

    fn softplus(&mut self, v: &Vec<f64>, beta: f64) -> Vec<f64> {
        k::map_softplus(v, beta)
    }

    fn l2_norm(&mut self, v: &Vec<f64>) -> Vec<f64> {
        vec![k::l2_norm(v)]
    }

    fn silu(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_silu(v)
    }

    fn square(&mut self, v: &Vec<f64>) -> Vec<f64> {
        k::map_square(v)
    }

    fn stop_gradient(&mut self, v: &Vec<f64>) -> Vec<f64> {
        v.clone()
    }
}

/// Recording evaluation; carriers are tape nodes.
pub struct Taped<'a> {
    pub tape: &'a mut Tape,
}

impl<'a> Taped<'a> {
    pub fn new(tape: &'a mut Tape) -> Self {
        Taped { tape }
    }

    /// Introduce a gradient-tracked input.
    pub fn leaf(&mut self, data: &[f64]) -> NodeId {
        self.tape.leaf(data)
    }
}

impl Algebra for Taped<'_> {
    type V = NodeId;

    fn lift(&mut self, data: &[f64]) -> NodeId {
        self.tape.constant(data)
    }

    fn value<'b>(&'b self, v: &'b NodeId) -> &'b [f64] {
        self.tape.val(*v)
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.add(*a, *b)
    }

    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.sub(*a, *b)
    }

    fn scale(&mut self, c: f64, v: &NodeId) -> NodeId {
        self.tape.scale(c, *v)
    }

    fn scale_by(&mut self, s: &NodeId, v: &NodeId) -> NodeId {
        self.tape.scale_by(*s, *v)
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.mul(*a, *b)
    }

    fn matvec(&mut self, m: &NodeId, rows: usize, cols: usize, transpose: bool, v: &NodeId) -> NodeId {
        self.tape.matvec(*m, rows, cols, transpose, *v)
    }

    fn dot(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        self.tape.dot(*a, *b)
    }

    fn sum(&mut self, v: &NodeId) -> NodeId {
        self.tape.sum(*v)
    }

    fn sin(&mut self, v: &NodeId) -> NodeId {
        self.tape.sin(*v)
    }

    fn cos(&mut self, v: &NodeId) -> NodeId {
        self.tape.cos(*v)
    }

    fn exp(&mut self, v: &NodeId) -> NodeId {
        self.tape.exp(*v)
    }

    fn log(&mut self, v: &NodeId) -> NodeId {
        self.tape.log(*v)
    }

    fn relu(&mut self, v: &NodeId) -> NodeId {
        self.tape.relu(*v)
    }

    fn softplus(&mut self, v: &NodeId, beta: f64) -> NodeId {
        self.tape.softplus(*v, beta)
    }

    fn l2_norm(&mut self, v: &NodeId) -> NodeId {
        self.tape.l2_norm(*v)
    }

    fn silu(&mut self, v: &NodeId) -> NodeId {
        self.tape.silu(*v)
    }

    fn square(&mut self, v: &NodeId) -> NodeId {
        self.tape.square(*v)
    }

    fn stop_gradient(&mut self, v: &NodeId) -> NodeId {
        self.tape.stop_gradient(*v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A formula written once against the trait must produce the same bits
    /// in both modes.
    fn formula<A: Algebra>(alg: &mut A, x: &A::V) -> A::V {
        let m = alg.lift(&[0.3, -0.8, 1.7, 0.2, 0.05, -1.2]);
        let mv = alg.matvec(&m, 2, 3, false, x);
        let s = alg.silu(&mv);
        let n = alg.l2_norm(&s);
        let sp = alg.softplus(&n, 50.0);
        alg.scale(3.5, &sp)
    }

    #[test]
    fn plain_and_taped_agree_bit_for_bit() {
        let x = vec![0.9, -1.4, 0.33];

        let mut plain = Plain;
        let xv = x.clone();
        let out_plain = formula(&mut plain, &xv);

        let mut tape = Tape::new();
        let mut taped = Taped::new(&mut tape);
        let xn = taped.leaf(&x);
        let out_node = formula(&mut taped, &xn);
        let out_taped = tape.val(out_node);

        assert_eq!(out_plain.len(), out_taped.len());
        for (a, b) in out_plain.iter().zip(out_taped) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
