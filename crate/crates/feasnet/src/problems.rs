//! Problem families and instances.
//!
//! A family fixes the objective and constraint structure; an instance is a
//! right-hand side `x` for the equality system `A y = x`. Three constraint
//! kinds (linear, quadratic, second-order cone) cross three variants
//! (convex, nonconvex, nonsmooth nonconvex):
//!
//! - objective: `0.5 y'Qy + p'y`, nonconvex variants replace `p'y` with
//!   `p' sin(y)`, the nonsmooth variant adds `lambda * |y|_2`;
//! - equalities: `h(y; x) = A y - x`;
//! - inequalities per kind, folded into one row vector `g(y; x)` together
//!   with the box rows `L - y` and `y - U`:
//!   - linear: `G y <= h` (nonconvex: `G sin(y) <= h o cos(x)`),
//!   - quadratic: `y'H_i y + g_i'y <= r_i` (nonconvex: `g_i'cos(y)`),
//!   - second-order: `|G_i y + h_i| <= c_i'y + d_i` (nonconvex:
//!     `G_i cos(y)`).
//!
//! The violation is `phi(y; x) = w_eq |h|^2 + w_ineq |g^+|^2` with the
//! weights stored on the family. Every instance carries a strictly
//! feasible interior point, found by shrinking a box draw toward the box
//! center; the inequality right-hand sides are set at family creation so
//! the center is strictly feasible, which makes that shrink terminate for
//! every draw.
//!
//! Evaluations come in two routes. The generic `*_of` functions run over
//! any [`Algebra`] carrier, so the same arithmetic serves plain solves and
//! tape recording. The plain helpers ([`constraints`], [`objective_grad`],
//! [`jac_tvec`]) are independent straight-line loops used by the reference
//! solvers and by cross-checks.
//!
//! On disk a family is a directory: `family.json` plus row-major
//! little-endian payloads `Q.f64`, `p.f64`, `A.f64`, `L.f64`, `U.f64`, and
//! `ineq_*.f64` files that depend on the kind.

use crate::algebra::{Algebra, Plain};
use crate::kernels as k;
use crate::rawio;
use crate::{Error, Result};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Strict margin an interior point must hold on every inequality row.
pub const INTERIOR_MARGIN: f64 = 1e-3;
/// Margin added to the inequality right-hand sides at family creation.
const RHS_MARGIN: f64 = 1.0;
/// Box inset for instance draws.
const DRAW_INSET: f64 = 0.5;
const SHRINK_FACTOR: f64 = 0.8;
const MAX_SHRINK_STEPS: usize = 200;
/// Rows per second-order cone.
pub const SOCP_CONE_ROWS: usize = 10;
/// Objective weight of the `|y|_2` term in the nonsmooth variant.
pub const NONSMOOTH_LAMBDA: f64 = 1.0;

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Qp,
    Qcqp,
    Socp,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Convex,
    Nonconvex,
    NonsmoothNonconvex,
}

pub const ALL_KINDS: [Kind; 3] = [Kind::Qp, Kind::Qcqp, Kind::Socp];
pub const ALL_VARIANTS: [Variant; 3] = [
    Variant::Convex,
    Variant::Nonconvex,
    Variant::NonsmoothNonconvex,
];

impl Variant {
    /// Trigonometric inequality forms and `p'sin(y)` objective.
    pub fn trig(self) -> bool {
        self != Variant::Convex
    }
}

/// Violation weights `(w_eq, w_ineq)`; both strictly positive.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Weights {
    pub eq: f64,
    pub ineq: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { eq: 10.0, ineq: 10.0 }
    }
}

/// How `g^+` enters the violation. `Exact` squares `max(g, 0)`;
/// `Softplus` replaces the kink with a twice-differentiable ramp so
/// curvature-based analyses have something to chew on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    #[default]
    Exact,
    Softplus { beta: f64 },
}

/// Kind-specific inequality data. Matrices are row-major; stacked
/// per-row blocks are contiguous.
#[derive(Clone, Debug)]
pub enum IneqData {
    /// `n_ineq x n` matrix `g`, right-hand side `h`.
    Linear { g: Vec<f64>, h: Vec<f64> },
    /// Per row: `n x n` SPD `h_mats[i]`, vector `g_vecs[i]`, scalar `rhs[i]`.
    Quadratic {
        h_mats: Vec<f64>,
        g_vecs: Vec<f64>,
        rhs: Vec<f64>,
    },
    /// Per cone: `m x n` matrix, offset `h`, affine `c`, scalar `d`.
    SecondOrder {
        g_mats: Vec<f64>,
        h_vecs: Vec<f64>,
        c_vecs: Vec<f64>,
        d: Vec<f64>,
        m: usize,
    },
}

#[derive(Clone, Debug)]
pub struct ProblemFamily {
    pub kind: Kind,
    pub variant: Variant,
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    /// `n x n` SPD with unit spectral norm.
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// `n_eq x n`, full row rank.
    pub a: Vec<f64>,
    pub ineq: IneqData,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Weight of the `|y|_2` objective term (0 outside the nonsmooth variant).
    pub lambda: f64,
    pub weights: Weights,
    pub seed: u64,
}

/// One instance: equality right-hand side plus a strictly feasible witness.
#[derive(Clone, Debug)]
pub struct Instance {
    pub x: Vec<f64>,
    pub interior: Vec<f64>,
}

impl ProblemFamily {
    /// Total inequality rows: kind-specific rows plus `2n` box rows,
    /// ordered `[general; L - y; y - U]`.
    pub fn g_rows(&self) -> usize {
        self.n_ineq + 2 * self.n
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Structural and numeric sanity: dimensions, `L < U`, positive
    /// weights, SPD quadratic blocks, full-row-rank `A`.
    pub fn validate(&self) -> Result<()> {
        let (n, n_eq, n_ineq) = (self.n, self.n_eq, self.n_ineq);
        if n == 0 || n_eq == 0 || n_eq > n {
            return Err(Error::Dim(format!("need 1 <= n_eq <= n, got n={n}, n_eq={n_eq}")));
        }
        let dims_ok = self.q.len() == n * n
            && self.p.len() == n
            && self.a.len() == n_eq * n
            && self.lower.len() == n
            && self.upper.len() == n;
        if !dims_ok {
            return Err(Error::Dim("family payload lengths do not match declared dims".into()));
        }
        match &self.ineq {
            IneqData::Linear { g, h } => {
                if g.len() != n_ineq * n || h.len() != n_ineq {
                    return Err(Error::Dim("linear inequality payload mismatch".into()));
                }
                if self.kind != Kind::Qp {
                    return Err(Error::Dim("linear rows on a non-qp family".into()));
                }
                if self.variant.trig() && n_ineq > 0 && n_ineq != n_eq {
                    return Err(Error::Dim(
                        "trig linear rows pair with cos(x), so n_ineq must equal n_eq".into(),
                    ));
                }
            }
            IneqData::Quadratic { h_mats, g_vecs, rhs } => {
                if h_mats.len() != n_ineq * n * n || g_vecs.len() != n_ineq * n || rhs.len() != n_ineq {
                    return Err(Error::Dim("quadratic inequality payload mismatch".into()));
                }
                if self.kind != Kind::Qcqp {
                    return Err(Error::Dim("quadratic rows on a non-qcqp family".into()));
                }
            }
            IneqData::SecondOrder { g_mats, h_vecs, c_vecs, d, m } => {
                if g_mats.len() != n_ineq * m * n
                    || h_vecs.len() != n_ineq * m
                    || c_vecs.len() != n_ineq * n
                    || d.len() != n_ineq
                {
                    return Err(Error::Dim("second-order inequality payload mismatch".into()));
                }
                if self.kind != Kind::Socp {
                    return Err(Error::Dim("cone rows on a non-socp family".into()));
                }
            }
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l >= u) {
            return Err(Error::Dim("box requires L < U componentwise".into()));
        }
        if !(self.weights.eq > 0.0 && self.weights.ineq > 0.0) {
            return Err(Error::Dim("violation weights must be strictly positive".into()));
        }
        if !spd(&self.q, n) {
            return Err(Error::Dim("Q is not symmetric positive definite".into()));
        }
        if let IneqData::Quadratic { h_mats, .. } = &self.ineq {
            for i in 0..n_ineq {
                if !spd(&h_mats[i * n * n..(i + 1) * n * n], n) {
                    return Err(Error::Dim(format!("quadratic row {i} matrix is not SPD")));
                }
            }
        }
        if rank(&self.a, n_eq, n) < n_eq {
            return Err(Error::Dim("A does not have full row rank".into()));
        }
        Ok(())
    }
}

fn spd(m: &[f64], n: usize) -> bool {
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[i * n + j] - m[j * n + i]).abs() > 1e-9 * scale {
                return false;
            }
        }
    }
    nalgebra::DMatrix::from_row_slice(n, n, m).cholesky().is_some()
}

fn rank(m: &[f64], rows: usize, cols: usize) -> usize {
    let sv = nalgebra::DMatrix::from_row_slice(rows, cols, m)
        .svd(false, false)
        .singular_values;
    let tol = 1e-10 * sv.iter().cloned().fold(1.0f64, f64::max);
    sv.iter().filter(|s| **s > tol).count()
}

// ---------------------------------------------------------------------------
// Generation and sampling
// ---------------------------------------------------------------------------

fn gauss(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = rand_distr::StandardNormal.sample(rng);
            z * std
        })
        .collect()
}

/// `(D'D + nI) / lambda_max`, SPD with unit spectral norm.
fn spd_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let d = gauss(rng, n * n, 1.0);
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for r in 0..n {
                s += d[r * n + i] * d[r * n + j];
            }
            q[i * n + j] = s + if i == j { n as f64 } else { 0.0 };
        }
    }
    let lmax = nalgebra::DMatrix::from_row_slice(n, n, &q)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    k::scale(1.0 / lmax, &q)
}

/// Deterministic family construction. Entry scales follow a `1/sqrt(n)`
/// convention so row norms stay O(1) as the dimension grows.
pub fn generate_family(
    kind: Kind,
    variant: Variant,
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    seed: u64,
) -> Result<ProblemFamily> {
    if n == 0 || n_eq == 0 || n_eq > n {
        return Err(Error::Dim(format!(
            "generate_family needs 1 <= n_eq <= n, got n={n}, n_eq={n_eq}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sqrt_n = 1.0 / (n as f64).sqrt();

    let q = spd_unit(&mut rng, n);
    let mut a = gauss(&mut rng, n_eq * n, inv_sqrt_n);
    for _ in 0..16 {
        if rank(&a, n_eq, n) == n_eq {
            break;
        }
        a = gauss(&mut rng, n_eq * n, inv_sqrt_n);
    }
    let p = gauss(&mut rng, n, inv_sqrt_n);
    let lower = vec![-5.0; n];
    let upper = vec![5.0; n];

    // Inequality payloads with zero right-hand sides; the row values at the
    // anchor and the box center then equal the left-hand sides, and the
    // final right-hand sides clear both by RHS_MARGIN. A feasible center
    // guarantees instance sampling terminates; the trig forms additionally
    // rely on the box being symmetric (center 0, so cos(A*center) = 1).
    let ineq = match kind {
        Kind::Qp => IneqData::Linear {
            g: gauss(&mut rng, n_ineq * n, inv_sqrt_n),
            h: vec![0.0; n_ineq],
        },
        Kind::Qcqp => {
            let mut h_mats = Vec::with_capacity(n_ineq * n * n);
            for _ in 0..n_ineq {
                h_mats.extend_from_slice(&spd_unit(&mut rng, n));
            }
            IneqData::Quadratic {
                h_mats,
                g_vecs: gauss(&mut rng, n_ineq * n, inv_sqrt_n),
                rhs: vec![0.0; n_ineq],
            }
        }
        Kind::Socp => {
            let m = SOCP_CONE_ROWS;
            IneqData::SecondOrder {
                g_mats: gauss(&mut rng, n_ineq * m * n, inv_sqrt_n),
                h_vecs: gauss(&mut rng, n_ineq * m, inv_sqrt_n),
                c_vecs: gauss(&mut rng, n_ineq * n, inv_sqrt_n),
                d: vec![0.0; n_ineq],
                m,
            }
        }
    };

    let mut fam = ProblemFamily {
        kind,
        variant,
        n,
        n_eq,
        n_ineq,
        q,
        p,
        a,
        ineq,
        lower,
        upper,
        lambda: if variant == Variant::NonsmoothNonconvex { NONSMOOTH_LAMBDA } else { 0.0 },
        weights: Weights::default(),
        seed,
    };

    // Validate the shape before the RHS calibration below evaluates any rows.
    fam.validate()?;

    if n_ineq > 0 {
        let anchor: Vec<f64> = fam
            .lower
            .iter()
            .zip(&fam.upper)
            .map(|(l, u)| rng.random_range(l + DRAW_INSET..u - DRAW_INSET))
            .collect();
        let center = fam.center();
        let lhs_anchor = general_rows(&fam, &anchor);
        let lhs_center = general_rows(&fam, &center);
        let rhs: Vec<f64> = lhs_anchor
            .iter()
            .zip(&lhs_center)
            .map(|(a, c)| a.max(*c) + RHS_MARGIN)
            .collect();
        match &mut fam.ineq {
            IneqData::Linear { h, .. } => *h = rhs,
            IneqData::Quadratic { rhs: r, .. } => *r = rhs,
            IneqData::SecondOrder { d, .. } => *d = rhs,
        }
    }

    Ok(fam)
}

/// Kind-specific row values at `y` with `x = A y`, excluding box rows.
/// With zero right-hand sides these are the row left-hand sides.
fn general_rows(fam: &ProblemFamily, y: &[f64]) -> Vec<f64> {
    let x = k::matvec(&fam.a, fam.n_eq, fam.n, false, y);
    let (_, g) = constraints(fam, y, &x);
    g[..fam.n_ineq].to_vec()
}

/// A linear-equality family with no active inequalities: a convex QP with
/// `n_ineq = 0` and a box so wide its rows never matter, so the violation
/// reduces to `w_eq |A y - x|^2`. Instances for it are best built
/// directly as `x = A z`.
pub fn equality_only(n: usize, n_eq: usize, seed: u64) -> Result<ProblemFamily> {
    let mut fam = generate_family(Kind::Qp, Variant::Convex, n, n_eq, 0, seed)?;
    fam.lower = vec![-1e6; n];
    fam.upper = vec![1e6; n];
    Ok(fam)
}

/// Draw an interior point, then shrink toward the box center until every
/// inequality row clears [`INTERIOR_MARGIN`]; the instance is `x = A y`.
/// The equality rows hold exactly by construction.
pub fn sample_instance(fam: &ProblemFamily, seed: u64) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y: Vec<f64> = fam
        .lower
        .iter()
        .zip(&fam.upper)
        .map(|(l, u)| rng.random_range(l + DRAW_INSET..u - DRAW_INSET))
        .collect();
    let center = fam.center();
    for _ in 0..=MAX_SHRINK_STEPS {
        let x = k::matvec(&fam.a, fam.n_eq, fam.n, false, &y);
        let (_, g) = constraints(fam, &y, &x);
        let worst = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if worst <= -INTERIOR_MARGIN {
            return Ok(Instance { x, interior: y });
        }
        y = center
            .iter()
            .zip(&y)
            .map(|(c, yi)| c + SHRINK_FACTOR * (yi - c))
            .collect();
    }
    Err(Error::Sampling(format!(
        "no interior point after {MAX_SHRINK_STEPS} shrink steps (seed {seed})"
    )))
}

// ---------------------------------------------------------------------------
// Plain evaluation: independent straight-line loops
// ---------------------------------------------------------------------------

/// Equality and inequality row values `(h, g)`; `g` is
/// `[general rows; L - y; y - U]`.
pub fn constraints(fam: &ProblemFamily, y: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = fam.n;
    assert_eq!(y.len(), n, "constraints: y has wrong length");
    assert_eq!(x.len(), fam.n_eq, "constraints: x has wrong length");
    let mut h = vec![0.0; fam.n_eq];
    for r in 0..fam.n_eq {
        let mut s = 0.0;
        for c in 0..n {
            s += fam.a[r * n + c] * y[c];
        }
        h[r] = s - x[r];
    }

    let trig = fam.variant.trig();
    let mut g = Vec::with_capacity(fam.g_rows());
    match &fam.ineq {
        IneqData::Linear { g: gm, h: rhs } => {
            for i in 0..fam.n_ineq {
                let mut s = 0.0;
                for c in 0..n {
                    s += gm[i * n + c] * if trig { y[c].sin() } else { y[c] };
                }
                let r = if trig { rhs[i] * x[i].cos() } else { rhs[i] };
                g.push(s - r);
            }
        }
        IneqData::Quadratic { h_mats, g_vecs, rhs } => {
            for i in 0..fam.n_ineq {
                let hm = &h_mats[i * n * n..(i + 1) * n * n];
                let mut quad = 0.0;
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += hm[r * n + c] * y[c];
                    }
                    quad += y[r] * s;
                }
                let mut lin = 0.0;
                for c in 0..n {
                    lin += g_vecs[i * n + c] * if trig { y[c].cos() } else { y[c] };
                }
                g.push(quad + lin - rhs[i]);
            }
        }
        IneqData::SecondOrder { g_mats, h_vecs, c_vecs, d, m } => {
            for i in 0..fam.n_ineq {
                let gm = &g_mats[i * m * n..(i + 1) * m * n];
                let mut sq = 0.0;
                for r in 0..*m {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += gm[r * n + c] * if trig { y[c].cos() } else { y[c] };
                    }
                    let z = s + h_vecs[i * m + r];
                    sq += z * z;
                }
                let mut aff = d[i];
                for c in 0..n {
                    aff += c_vecs[i * n + c] * y[c];
                }
                g.push(sq.sqrt() - aff);
            }
        }
    }
    for c in 0..n {
        g.push(fam.lower[c] - y[c]);
    }
    for c in 0..n {
        g.push(y[c] - fam.upper[c]);
    }
    (h, g)
}

/// `(sum |h_i|, sum max(g_j, 0))`, the reporting metric.
pub fn violation_l1(fam: &ProblemFamily, y: &[f64], x: &[f64]) -> (f64, f64) {
    let (h, g) = constraints(fam, y, x);
    let eq = h.iter().map(|v| v.abs()).sum();
    let ineq = g.iter().map(|v| v.max(0.0)).sum();
    (eq, ineq)
}

/// Objective value by direct index loops, independent of the tape route.
pub fn objective_value(fam: &ProblemFamily, y: &[f64]) -> f64 {
    let n = fam.n;
    assert_eq!(y.len(), n, "objective_value: y has wrong length");
    let mut quad = 0.0;
    for r in 0..n {
        for c in 0..n {
            quad += y[r] * fam.q[r * n + c] * y[c];
        }
    }
    let lin: f64 = if fam.variant.trig() {
        y.iter().zip(&fam.p).map(|(v, pc)| pc * v.sin()).sum()
    } else {
        y.iter().zip(&fam.p).map(|(v, pc)| pc * v).sum()
    };
    0.5 * quad + lin + fam.lambda * k::l2_norm(y)
}

/// Objective gradient, independent of the tape route. The nonsmooth term
/// uses the subgradient `lambda * y / max(|y|, 1e-12)`.
pub fn objective_grad(fam: &ProblemFamily, y: &[f64]) -> Vec<f64> {
    let n = fam.n;
    assert_eq!(y.len(), n, "objective_grad: y has wrong length");
    let mut out = vec![0.0; n];
    for r in 0..n {
        let mut s = 0.0;
        for c in 0..n {
            s += fam.q[r * n + c] * y[c];
        }
        out[r] = s;
    }
    if fam.variant.trig() {
        for c in 0..n {
            out[c] += fam.p[c] * y[c].cos();
        }
    } else {
        for c in 0..n {
            out[c] += fam.p[c];
        }
    }
    if fam.lambda != 0.0 {
        let norm = k::l2_norm(y).max(k::EPS_NORM);
        for c in 0..n {
            out[c] += fam.lambda * y[c] / norm;
        }
    }
    out
}

/// `J_h(y)' u_eq + J_g(y)' u_ineq` where `J_h`, `J_g` are the constraint
/// Jacobians; `u_ineq` covers all [`ProblemFamily::g_rows`] rows. This is
/// the reference-solver route; the tape never touches it.
pub fn jac_tvec(fam: &ProblemFamily, y: &[f64], x: &[f64], u_eq: &[f64], u_ineq: &[f64]) -> Vec<f64> {
    let n = fam.n;
    assert_eq!(u_eq.len(), fam.n_eq, "jac_tvec: u_eq has wrong length");
    assert_eq!(u_ineq.len(), fam.g_rows(), "jac_tvec: u_ineq has wrong length");
    assert_eq!(x.len(), fam.n_eq, "jac_tvec: x has wrong length");
    let trig = fam.variant.trig();
    let mut out = vec![0.0; n];
    for r in 0..fam.n_eq {
        for c in 0..n {
            out[c] += fam.a[r * n + c] * u_eq[r];
        }
    }
    match &fam.ineq {
        IneqData::Linear { g: gm, .. } => {
            for c in 0..n {
                let mut t = 0.0;
                for i in 0..fam.n_ineq {
                    t += gm[i * n + c] * u_ineq[i];
                }
                out[c] += if trig { y[c].cos() * t } else { t };
            }
        }
        IneqData::Quadratic { h_mats, g_vecs, .. } => {
            for i in 0..fam.n_ineq {
                let hm = &h_mats[i * n * n..(i + 1) * n * n];
                for r in 0..n {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += hm[r * n + c] * y[c];
                    }
                    let lin = if trig {
                        -y[r].sin() * g_vecs[i * n + r]
                    } else {
                        g_vecs[i * n + r]
                    };
                    out[r] += u_ineq[i] * (2.0 * s + lin);
                }
            }
        }
        IneqData::SecondOrder { g_mats, h_vecs, c_vecs, m, .. } => {
            for i in 0..fam.n_ineq {
                let gm = &g_mats[i * m * n..(i + 1) * m * n];
                let mut z = vec![0.0; *m];
                for r in 0..*m {
                    let mut s = 0.0;
                    for c in 0..n {
                        s += gm[r * n + c] * if trig { y[c].cos() } else { y[c] };
                    }
                    z[r] = s + h_vecs[i * m + r];
                }
                let norm = k::l2_norm(&z).max(k::EPS_NORM);
                for c in 0..n {
                    let mut gtw = 0.0;
                    for r in 0..*m {
                        gtw += gm[r * n + c] * z[r] / norm;
                    }
                    let row = if trig { -y[c].sin() * gtw } else { gtw } - c_vecs[i * n + c];
                    out[c] += u_ineq[i] * row;
                }
            }
        }
    }
    for c in 0..n {
        out[c] -= u_ineq[fam.n_ineq + c];
        out[c] += u_ineq[fam.n_ineq + n + c];
    }
    out
}

// ---------------------------------------------------------------------------
// Generic evaluation over an Algebra carrier
// ---------------------------------------------------------------------------

/// Family data bound to one instance `x`, expressed in carrier space so
/// the evaluators below run plainly or on a tape.
pub struct LiftedFamily<V> {
    pub n: usize,
    pub n_eq: usize,
    pub n_ineq: usize,
    pub variant: Variant,
    pub lambda: f64,
    pub weights: Weights,
    q: V,
    p: V,
    a: V,
    x: V,
    lower: V,
    upper: V,
    ineq: LiftedIneq<V>,
}

enum LiftedIneq<V> {
    /// `rhs` already folds the nonconvex `cos(x)` factor (x is constant).
    Linear { g: V, rhs: V },
    Quadratic { h_mats: Vec<V>, g_vecs: Vec<V>, rhs: Vec<V> },
    SecondOrder { g_mats: Vec<V>, h_vecs: Vec<V>, c_vecs: Vec<V>, d: Vec<V>, m: usize },
}

pub fn lift_family<A: Algebra>(alg: &mut A, fam: &ProblemFamily, x: &[f64]) -> LiftedFamily<A::V> {
    assert_eq!(x.len(), fam.n_eq, "lift_family: x has wrong length");
    let (n, n_ineq) = (fam.n, fam.n_ineq);
    let ineq = match &fam.ineq {
        IneqData::Linear { g, h } => {
            // trig rows pair row j with cos(x_j); validate() pins n_ineq = n_eq
            let rhs = if fam.variant.trig() {
                k::emul(h, &k::map_cos(&x[..fam.n_ineq]))
            } else {
                h.clone()
            };
            LiftedIneq::Linear { g: alg.lift(g), rhs: alg.lift(&rhs) }
        }
        IneqData::Quadratic { h_mats, g_vecs, rhs } => LiftedIneq::Quadratic {
            h_mats: (0..n_ineq)
                .map(|i| alg.lift(&h_mats[i * n * n..(i + 1) * n * n]))
                .collect(),
            g_vecs: (0..n_ineq)
                .map(|i| alg.lift(&g_vecs[i * n..(i + 1) * n]))
                .collect(),
            rhs: rhs.iter().map(|r| alg.lift(&[*r])).collect(),
        },
        IneqData::SecondOrder { g_mats, h_vecs, c_vecs, d, m } => LiftedIneq::SecondOrder {
            g_mats: (0..n_ineq)
                .map(|i| alg.lift(&g_mats[i * m * n..(i + 1) * m * n]))
                .collect(),
            h_vecs: (0..n_ineq)
                .map(|i| alg.lift(&h_vecs[i * m..(i + 1) * m]))
                .collect(),
            c_vecs: (0..n_ineq)
                .map(|i| alg.lift(&c_vecs[i * n..(i + 1) * n]))
                .collect(),
            d: d.iter().map(|v| alg.lift(&[*v])).collect(),
            m: *m,
        },
    };
    LiftedFamily {
        n,
        n_eq: fam.n_eq,
        n_ineq,
        variant: fam.variant,
        lambda: fam.lambda,
        weights: fam.weights,
        q: alg.lift(&fam.q),
        p: alg.lift(&fam.p),
        a: alg.lift(&fam.a),
        x: alg.lift(x),
        lower: alg.lift(&fam.lower),
        upper: alg.lift(&fam.upper),
        ineq,
    }
}

/// `0.5 y'Qy + p'y` (trig variants: `p'sin(y)`), plus `lambda |y|_2`
/// when the family carries a nonsmooth term.
pub fn objective_of<A: Algebra>(alg: &mut A, lf: &LiftedFamily<A::V>, y: &A::V) -> A::V {
    let qy = alg.matvec(&lf.q, lf.n, lf.n, false, y);
    let yqy = alg.dot(y, &qy);
    let quad = alg.scale(0.5, &yqy);
    let lin = if lf.variant.trig() {
        let sy = alg.sin(y);
        alg.dot(&lf.p, &sy)
    } else {
        alg.dot(&lf.p, y)
    };
    let f = alg.add(&quad, &lin);
    if lf.lambda != 0.0 {
        let norm = alg.l2_norm(y);
        let reg = alg.scale(lf.lambda, &norm);
        alg.add(&f, &reg)
    } else {
        f
    }
}

fn weigh<A: Algebra>(alg: &mut A, lf: &LiftedFamily<A::V>, eq_sum: &A::V, ineq_sum: &A::V) -> A::V {
    let phi_eq = alg.scale(lf.weights.eq, eq_sum);
    let phi_in = alg.scale(lf.weights.ineq, ineq_sum);
    alg.add(&phi_eq, &phi_in)
}

/// Violation `phi(y; x)`.
pub fn violation_of<A: Algebra>(alg: &mut A, lf: &LiftedFamily<A::V>, y: &A::V, smoothing: Smoothing) -> A::V {
    let (eq_sum, ineq_sum, _) = violation_core(alg, lf, y, smoothing, false);
    weigh(alg, lf, &eq_sum, &ineq_sum)
}

/// The unweighted pieces `(sum h^2, sum pos^2)` of the violation, for
/// callers that apply their own weights.
pub fn violation_terms_of<A: Algebra>(
    alg: &mut A,
    lf: &LiftedFamily<A::V>,
    y: &A::V,
    smoothing: Smoothing,
) -> (A::V, A::V) {
    let (eq_sum, ineq_sum, _) = violation_core(alg, lf, y, smoothing, false);
    (eq_sum, ineq_sum)
}

/// Violation gradient as an explicit forward formula (so a tape records it
/// as ordinary arithmetic and can differentiate through it).
pub fn violation_grad_of<A: Algebra>(alg: &mut A, lf: &LiftedFamily<A::V>, y: &A::V, smoothing: Smoothing) -> A::V {
    violation_core(alg, lf, y, smoothing, true).2.unwrap()
}

/// Violation and its gradient in one pass over the rows.
pub fn violation_with_grad_of<A: Algebra>(
    alg: &mut A,
    lf: &LiftedFamily<A::V>,
    y: &A::V,
    smoothing: Smoothing,
) -> (A::V, A::V) {
    let (eq_sum, ineq_sum, grad) = violation_core(alg, lf, y, smoothing, true);
    let phi = weigh(alg, lf, &eq_sum, &ineq_sum);
    (phi, grad.unwrap())
}

/// `sum(pos(r)^2)` and, when asked, `u = w2 * pos(r)` (exact) or
/// `u = w2 * softplus(r) * sigmoid(beta r)` (smoothed), the per-row factor
/// of the violation gradient.
fn pos_block<A: Algebra>(
    alg: &mut A,
    r: &A::V,
    smoothing: Smoothing,
    w2: f64,
    want_u: bool,
) -> (A::V, Option<A::V>) {
    match smoothing {
        Smoothing::Exact => {
            let p = alg.relu(r);
            let sq = alg.square(&p);
            let s = alg.sum(&sq);
            let u = if want_u { Some(alg.scale(w2, &p)) } else { None };
            (s, u)
        }
        Smoothing::Softplus { beta } => {
            let p = alg.softplus(r, beta);
            let sq = alg.square(&p);
            let s = alg.sum(&sq);
            let u = if want_u {
                // sigmoid(beta r) = exp(-beta * softplus(-r))
                let nr = alg.scale(-1.0, r);
                let spn = alg.softplus(&nr, beta);
                let e = alg.scale(-beta, &spn);
                let sg = alg.exp(&e);
                let pw = alg.mul(&p, &sg);
                Some(alg.scale(w2, &pw))
            } else {
                None
            };
            (s, u)
        }
    }
}

/// One canonical arithmetic order for the violation and its gradient:
/// equality block, general rows in index order, lower box rows, upper box
/// rows. Both evaluation modes follow it, so their values agree bitwise.
fn violation_core<A: Algebra>(
    alg: &mut A,
    lf: &LiftedFamily<A::V>,
    y: &A::V,
    smoothing: Smoothing,
    want_grad: bool,
) -> (A::V, A::V, Option<A::V>) {
    let ay = alg.matvec(&lf.a, lf.n_eq, lf.n, false, y);
    let h = alg.sub(&ay, &lf.x);
    let hsq = alg.square(&h);
    let eq_sum = alg.sum(&hsq);
    let mut grad = if want_grad {
        let u = alg.scale(2.0 * lf.weights.eq, &h);
        Some(alg.matvec(&lf.a, lf.n_eq, lf.n, true, &u))
    } else {
        None
    };

    let mut ineq_sum = alg.lift(&[0.0]);
    let w2 = 2.0 * lf.weights.ineq;
    let trig = lf.variant.trig();

    match &lf.ineq {
        LiftedIneq::Linear { g, rhs } if lf.n_ineq > 0 => {
            let lhs = if trig {
                let sy = alg.sin(y);
                alg.matvec(g, lf.n_ineq, lf.n, false, &sy)
            } else {
                alg.matvec(g, lf.n_ineq, lf.n, false, y)
            };
            let r = alg.sub(&lhs, rhs);
            let (s, u) = pos_block(alg, &r, smoothing, w2, want_grad);
            ineq_sum = alg.add(&ineq_sum, &s);
            if let Some(acc) = grad.as_mut() {
                let gt = alg.matvec(g, lf.n_ineq, lf.n, true, &u.unwrap());
                let term = if trig {
                    let cy = alg.cos(y);
                    alg.mul(&cy, &gt)
                } else {
                    gt
                };
                *acc = alg.add(acc, &term);
            }
        }
        LiftedIneq::Quadratic { h_mats, g_vecs, rhs } => {
            let cy = if trig { Some(alg.cos(y)) } else { None };
            let sy = if trig && want_grad { Some(alg.sin(y)) } else { None };
            for i in 0..lf.n_ineq {
                let hy = alg.matvec(&h_mats[i], lf.n, lf.n, false, y);
                let quad = alg.dot(y, &hy);
                let lin = match &cy {
                    Some(c) => alg.dot(&g_vecs[i], c),
                    None => alg.dot(&g_vecs[i], y),
                };
                let lhs = alg.add(&quad, &lin);
                let r = alg.sub(&lhs, &rhs[i]);
                let (s, u) = pos_block(alg, &r, smoothing, w2, want_grad);
                ineq_sum = alg.add(&ineq_sum, &s);
                if let Some(acc) = grad.as_mut() {
                    let two_hy = alg.scale(2.0, &hy);
                    let row_g = match &sy {
                        Some(s) => {
                            let sg = alg.mul(s, &g_vecs[i]);
                            alg.sub(&two_hy, &sg)
                        }
                        None => alg.add(&two_hy, &g_vecs[i]),
                    };
                    let term = alg.scale_by(&u.unwrap(), &row_g);
                    *acc = alg.add(acc, &term);
                }
            }
        }
        LiftedIneq::SecondOrder { g_mats, h_vecs, c_vecs, d, m } => {
            let yin = if trig { alg.cos(y) } else { y.clone() };
            let sy = if trig && want_grad { Some(alg.sin(y)) } else { None };
            let eps = alg.lift(&[k::EPS_NORM]);
            for i in 0..lf.n_ineq {
                let gy = alg.matvec(&g_mats[i], *m, lf.n, false, &yin);
                let z = alg.add(&gy, &h_vecs[i]);
                let norm = alg.l2_norm(&z);
                let cdot = alg.dot(&c_vecs[i], y);
                let aff = alg.add(&cdot, &d[i]);
                let r = alg.sub(&norm, &aff);
                let (s, u) = pos_block(alg, &r, smoothing, w2, want_grad);
                ineq_sum = alg.add(&ineq_sum, &s);
                if let Some(acc) = grad.as_mut() {
                    // z / max(norm, eps), the eps floor written with relu so
                    // both modes share it
                    let nme = alg.sub(&norm, &eps);
                    let rel = alg.relu(&nme);
                    let ng = alg.add(&rel, &eps);
                    let lg = alg.log(&ng);
                    let nlg = alg.scale(-1.0, &lg);
                    let inv = alg.exp(&nlg);
                    let w = alg.scale_by(&inv, &z);
                    let gtw = alg.matvec(&g_mats[i], *m, lf.n, true, &w);
                    let dz = match &sy {
                        Some(s) => {
                            let t = alg.mul(s, &gtw);
                            alg.scale(-1.0, &t)
                        }
                        None => gtw,
                    };
                    let row_g = alg.sub(&dz, &c_vecs[i]);
                    let term = alg.scale_by(&u.unwrap(), &row_g);
                    *acc = alg.add(acc, &term);
                }
            }
        }
        LiftedIneq::Linear { .. } => {}
    }

    let lo_r = alg.sub(&lf.lower, y);
    let (s_lo, u_lo) = pos_block(alg, &lo_r, smoothing, w2, want_grad);
    ineq_sum = alg.add(&ineq_sum, &s_lo);
    let up_r = alg.sub(y, &lf.upper);
    let (s_up, u_up) = pos_block(alg, &up_r, smoothing, w2, want_grad);
    ineq_sum = alg.add(&ineq_sum, &s_up);
    if let Some(acc) = grad.as_mut() {
        *acc = alg.sub(acc, &u_lo.unwrap());
        *acc = alg.add(acc, &u_up.unwrap());
    }

    (eq_sum, ineq_sum, grad)
}

// ---------------------------------------------------------------------------
// Plain convenience wrappers
// ---------------------------------------------------------------------------

pub fn objective(fam: &ProblemFamily, y: &[f64], x: &[f64]) -> f64 {
    let mut alg = Plain;
    let lf = lift_family(&mut alg, fam, x);
    let f = objective_of(&mut alg, &lf, &y.to_vec());
    alg.scalar(&f)
}

pub fn violation(fam: &ProblemFamily, y: &[f64], x: &[f64]) -> f64 {
    let mut alg = Plain;
    let lf = lift_family(&mut alg, fam, x);
    let v = violation_of(&mut alg, &lf, &y.to_vec(), Smoothing::Exact);
    alg.scalar(&v)
}

pub fn violation_grad(fam: &ProblemFamily, y: &[f64], x: &[f64], smoothing: Smoothing) -> Vec<f64> {
    let mut alg = Plain;
    let lf = lift_family(&mut alg, fam, x);
    violation_grad_of(&mut alg, &lf, &y.to_vec(), smoothing)
}

// ---------------------------------------------------------------------------
// Family files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FamilyManifest {
    kind: Kind,
    variant: Variant,
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cone_rows: Option<usize>,
    seed: u64,
    lambda: f64,
    weights: Weights,
}

pub fn save_family(fam: &ProblemFamily, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cone_rows = match &fam.ineq {
        IneqData::SecondOrder { m, .. } => Some(*m),
        _ => None,
    };
    let manifest = FamilyManifest {
        kind: fam.kind,
        variant: fam.variant,
        n: fam.n,
        n_eq: fam.n_eq,
        n_ineq: fam.n_ineq,
        cone_rows,
        seed: fam.seed,
        lambda: fam.lambda,
        weights: fam.weights,
    };
    std::fs::write(dir.join("family.json"), serde_json::to_string_pretty(&manifest)?)?;
    rawio::write_f64(&dir.join("Q.f64"), &fam.q)?;
    rawio::write_f64(&dir.join("p.f64"), &fam.p)?;
    rawio::write_f64(&dir.join("A.f64"), &fam.a)?;
    rawio::write_f64(&dir.join("L.f64"), &fam.lower)?;
    rawio::write_f64(&dir.join("U.f64"), &fam.upper)?;
    match &fam.ineq {
        IneqData::Linear { g, h } => {
            rawio::write_f64(&dir.join("ineq_G.f64"), g)?;
            rawio::write_f64(&dir.join("ineq_h.f64"), h)?;
        }
        IneqData::Quadratic { h_mats, g_vecs, rhs } => {
            rawio::write_f64(&dir.join("ineq_H.f64"), h_mats)?;
            rawio::write_f64(&dir.join("ineq_g.f64"), g_vecs)?;
            rawio::write_f64(&dir.join("ineq_r.f64"), rhs)?;
        }
        IneqData::SecondOrder { g_mats, h_vecs, c_vecs, d, .. } => {
            rawio::write_f64(&dir.join("ineq_G.f64"), g_mats)?;
            rawio::write_f64(&dir.join("ineq_h.f64"), h_vecs)?;
            rawio::write_f64(&dir.join("ineq_c.f64"), c_vecs)?;
            rawio::write_f64(&dir.join("ineq_d.f64"), d)?;
        }
    }
    Ok(())
}

pub fn load_family(dir: &Path) -> Result<ProblemFamily> {
    let mpath = dir.join("family.json");
    let text = std::fs::read_to_string(&mpath).map_err(|_| Error::Missing(mpath.clone()))?;
    let m: FamilyManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        why: e.to_string(),
    })?;
    let (n, n_eq, n_ineq) = (m.n, m.n_eq, m.n_ineq);
    let ineq = match m.kind {
        Kind::Qp => IneqData::Linear {
            g: rawio::read_f64(&dir.join("ineq_G.f64"), n_ineq * n)?,
            h: rawio::read_f64(&dir.join("ineq_h.f64"), n_ineq)?,
        },
        Kind::Qcqp => IneqData::Quadratic {
            h_mats: rawio::read_f64(&dir.join("ineq_H.f64"), n_ineq * n * n)?,
            g_vecs: rawio::read_f64(&dir.join("ineq_g.f64"), n_ineq * n)?,
            rhs: rawio::read_f64(&dir.join("ineq_r.f64"), n_ineq)?,
        },
        Kind::Socp => {
            let mm = m.cone_rows.ok_or_else(|| Error::Corrupt {
                path: mpath.clone(),
                why: "socp manifest lacks cone_rows".into(),
            })?;
            IneqData::SecondOrder {
                g_mats: rawio::read_f64(&dir.join("ineq_G.f64"), n_ineq * mm * n)?,
                h_vecs: rawio::read_f64(&dir.join("ineq_h.f64"), n_ineq * mm)?,
                c_vecs: rawio::read_f64(&dir.join("ineq_c.f64"), n_ineq * n)?,
                d: rawio::read_f64(&dir.join("ineq_d.f64"), n_ineq)?,
                m: mm,
            }
        }
    };
    let fam = ProblemFamily {
        kind: m.kind,
        variant: m.variant,
        n,
        n_eq,
        n_ineq,
        q: rawio::read_f64(&dir.join("Q.f64"), n * n)?,
        p: rawio::read_f64(&dir.join("p.f64"), n)?,
        a: rawio::read_f64(&dir.join("A.f64"), n_eq * n)?,
        ineq,
        lower: rawio::read_f64(&dir.join("L.f64"), n)?,
        upper: rawio::read_f64(&dir.join("U.f64"), n)?,
        lambda: m.lambda,
        weights: m.weights,
        seed: m.seed,
    };
    fam.validate()?;
    Ok(fam)
}
