//! Shared numeric kernels.
//!
//! Both evaluation paths, the plain `Vec<f64>` path and the recording tape,
//! call these exact functions. Keeping a single source of arithmetic is what
//! makes the "unrolled forward equals plain forward bit for bit" guarantee
//! hold by construction instead of by accident: same kernels, same order,
//! same rounding.

/// Guard for norm denominators; gradients of `‖v‖` use `max(‖v‖, EPS_NORM)`.
pub const EPS_NORM: f64 = 1e-12;

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "add: length mismatch {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "sub: length mismatch {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(c: f64, v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| c * x).collect()
}

pub fn emul(a: &[f64], b: &[f64]) -> Vec<f64> {
    assert_eq!(a.len(), b.len(), "emul: length mismatch {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// `m` is `rows x cols` row-major. Plain form maps `v` of length `cols` to
/// length `rows`; the transposed form maps length `rows` to length `cols`.
pub fn matvec(m: &[f64], rows: usize, cols: usize, transpose: bool, v: &[f64]) -> Vec<f64> {
    assert_eq!(m.len(), rows * cols, "matvec: matrix storage is not rows*cols");
    if transpose {
        assert_eq!(v.len(), rows, "matvec^T: vector length {} != rows {}", v.len(), rows);
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            let vi = v[i];
            let row = &m[i * cols..(i + 1) * cols];
            for j in 0..cols {
                out[j] += row[j] * vi;
            }
        }
        out
    } else {
        assert_eq!(v.len(), cols, "matvec: vector length {} != cols {}", v.len(), cols);
        let mut out = vec![0.0; rows];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &m[i * cols..(i + 1) * cols];
            let mut acc = 0.0;
            for j in 0..cols {
                acc += row[j] * v[j];
            }
            *o = acc;
        }
        out
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot: length mismatch {} vs {}", a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn sum(v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for x in v {
        acc += x;
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn map_sin(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.sin()).collect()
}

pub fn map_cos(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.cos()).collect()
}

pub fn map_exp(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.exp()).collect()
}

pub fn map_log(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.ln()).collect()
}

pub fn map_sqrt(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.sqrt()).collect()
}

/// `max(x, 0)` componentwise.
pub fn map_relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

pub fn map_square(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * x).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn map_silu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x * sigmoid(*x)).collect()
}

/// Derivative of SiLU: `σ(x) (1 + x (1 - σ(x)))`.
pub fn silu_deriv(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable `log(1 + exp(beta x)) / beta`.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let t = beta * x;
    (t.max(0.0) + (-t.abs()).exp().ln_1p()) / beta
}

pub fn map_softplus(v: &[f64], beta: f64) -> Vec<f64> {
    v.iter().map(|x| softplus(*x, beta)).collect()
}

/// Derivative of `softplus(x, beta)` with respect to `x`, i.e. `σ(beta x)`.
pub fn softplus_deriv(x: f64, beta: f64) -> f64 {
    sigmoid(beta * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_plain_and_transposed() {
        // m = [[1,2,3],[4,5,6]]
        let m = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(matvec(&m, 2, 3, false, &[1.0, 1.0, 1.0]), vec![6.0, 15.0]);
        assert_eq!(matvec(&m, 2, 3, true, &[1.0, 1.0]), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn softplus_is_stable_far_from_zero() {
        assert!((softplus(100.0, 50.0) - 100.0).abs() < 1e-12);
        assert!(softplus(-100.0, 50.0).abs() < 1e-12);
        assert!((softplus(0.0, 50.0) - (2.0f64).ln() / 50.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry() {
        for x in [-30.0, -2.0, -0.5, 0.0, 0.5, 2.0, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
