//! Feasibility seeking: minimize the violation `phi(s; x)` from a warm
//! start, by fixed-step gradient descent or by L-BFGS with Armijo
//! backtracking, plus differentiable unrolled forms of the same runs.
//!
//! One engine, generic over [`Algebra`], drives every mode. Control flow
//! (stopping rules, line-search acceptance) reads carrier values; the
//! arithmetic itself is carrier ops, so a plain run and a taped run of the
//! same configuration produce bit-identical iterates. Unrolling truncates
//! gradient tracking after `tracked_iters` steps: the remaining
//! iterations run off-tape and re-enter through a pass-through node whose
//! adjoint is the identity onto the last tracked iterate. The L-BFGS
//! ablation (`unroll_lbfgs`) records the full two-loop recursion for all
//! iterations instead, with the line-search step length held constant
//! during backward.

use crate::algebra::{Algebra, Plain, Taped};
use crate::autodiff::{NodeId, Tape};
use crate::kernels as k;
use crate::problems::{
    lift_family, violation_of, violation_with_grad_of, IneqData, LiftedFamily, ProblemFamily,
    Smoothing,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FsMethod {
    Gd,
    Lbfgs,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FsConfig {
    pub method: FsMethod,
    /// Gradient-descent step size; `None` picks a conservative
    /// `1 / L` bound from the family via [`default_eta`].
    pub eta: Option<f64>,
    /// K, the iteration budget.
    pub max_iters: usize,
    /// K', how many leading iterations carry gradients when unrolling.
    pub tracked_iters: usize,
    pub memory: usize,
    pub tol_phi: f64,
    pub tol_grad: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub max_backtracks: usize,
    pub smoothing: Smoothing,
    /// Record the full L-BFGS recursion when unrolling (every iteration
    /// tracked) instead of the default truncated gradient descent.
    pub unroll_lbfgs: bool,
}

impl Default for FsConfig {
    fn default() -> Self {
        FsConfig {
            method: FsMethod::Lbfgs,
            eta: None,
            max_iters: 50,
            tracked_iters: 10,
            memory: 30,
            tol_phi: 1e-10,
            tol_grad: 1e-8,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            max_backtracks: 30,
            smoothing: Smoothing::Exact,
            unroll_lbfgs: false,
        }
    }
}

impl FsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tracked_iters > self.max_iters {
            return Err(Error::Config(format!(
                "tracked_iters {} exceeds max_iters {}",
                self.tracked_iters, self.max_iters
            )));
        }
        if self.memory == 0 {
            return Err(Error::Config("lbfgs memory must be at least 1".into()));
        }
        let pos = self.tol_phi > 0.0
            && self.tol_grad > 0.0
            && self.armijo_c > 0.0
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0;
        if !pos {
            return Err(Error::Config("tolerances and line-search constants must be positive".into()));
        }
        if let Some(e) = self.eta {
            if !(e > 0.0 && e.is_finite()) {
                return Err(Error::Config("eta must be positive and finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FsResult {
    pub point: Vec<f64>,
    pub iters: usize,
    pub phi: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// Line searches that gave up on the quasi-Newton direction and took a
    /// steepest-descent step instead.
    pub ls_fallbacks: usize,
    /// `phi` at the start and after every accepted step.
    pub trajectory: Vec<f64>,
}

/// Curvature constants of the equality-only violation
/// `w_eq |A s - x|^2`, the one case with a closed form.
#[derive(Clone, Copy, Debug)]
pub struct PlConstants {
    pub mu: f64,
    pub l: f64,
    pub gamma: f64,
}

/// `mu = 2 w_eq sigma_min(A)^2`, `L = 2 w_eq sigma_max(A)^2`,
/// `gamma = 1 - mu / L`.
pub fn pl_constants(fam: &ProblemFamily) -> Result<PlConstants> {
    let sv = nalgebra::DMatrix::from_row_slice(fam.n_eq, fam.n, &fam.a)
        .svd(false, false)
        .singular_values;
    let smax = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= 1e-10 * smax {
        return Err(Error::Dim("pl_constants: A is rank deficient".into()));
    }
    let mu = 2.0 * fam.weights.eq * smin * smin;
    let l = 2.0 * fam.weights.eq * smax * smax;
    Ok(PlConstants { mu, l, gamma: 1.0 - mu / l })
}

/// Conservative `1 / L` step size with
/// `L = 2 w_eq smax(A)^2 + 2 w_ineq (B^2 + 1)`, where `B` bounds the general
/// inequality row gradients over the box and the `+1` covers the box rows.
/// For linear rows this is a true curvature bound; curved rows add a
/// `residual * row-Hessian` term it ignores, so treat it as a safe default
/// near the box rather than a guarantee.
pub fn default_eta(fam: &ProblemFamily) -> f64 {
    let smax = |m: &[f64], r: usize, c: usize| -> f64 {
        if r == 0 || c == 0 {
            return 0.0;
        }
        nalgebra::DMatrix::from_row_slice(r, c, m)
            .svd(false, false)
            .singular_values
            .iter()
            .cloned()
            .fold(0.0, f64::max)
    };
    let box_radius = {
        let s: f64 = fam
            .lower
            .iter()
            .zip(&fam.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum();
        s.sqrt()
    };
    let b = match &fam.ineq {
        IneqData::Linear { g, .. } => smax(g, fam.n_ineq, fam.n),
        IneqData::Quadratic { h_mats, g_vecs, .. } => (0..fam.n_ineq)
            .map(|i| {
                let hn = smax(&h_mats[i * fam.n * fam.n..(i + 1) * fam.n * fam.n], fam.n, fam.n);
                2.0 * box_radius * hn + k::l2_norm(&g_vecs[i * fam.n..(i + 1) * fam.n])
            })
            .fold(0.0, f64::max),
        IneqData::SecondOrder { g_mats, c_vecs, m, .. } => (0..fam.n_ineq)
            .map(|i| {
                smax(&g_mats[i * m * fam.n..(i + 1) * m * fam.n], *m, fam.n)
                    + k::l2_norm(&c_vecs[i * fam.n..(i + 1) * fam.n])
            })
            .fold(0.0, f64::max),
    };
    let smax_a = smax(&fam.a, fam.n_eq, fam.n);
    let l = 2.0 * fam.weights.eq * smax_a * smax_a + 2.0 * fam.weights.ineq * (b * b + 1.0);
    1.0 / l
}

enum Method {
    Gd { eta: f64 },
    Lbfgs { memory: usize },
}

struct EngineOut<V> {
    s: V,
    iters: usize,
    phi: f64,
    grad_norm: f64,
    converged: bool,
    ls_fallbacks: usize,
    trajectory: Vec<f64>,
}

/// Reciprocal of a strictly positive scalar carrier, written with ops the
/// tape can differentiate.
fn recip<A: Algebra>(alg: &mut A, v: &A::V) -> A::V {
    let lg = alg.log(v);
    let nlg = alg.scale(-1.0, &lg);
    alg.exp(&nlg)
}

/// Backtracking from a unit step; the accepted step length is a plain
/// constant in the recorded arithmetic. Returns the accepted point and
/// its violation value.
fn line_search<A: Algebra>(
    alg: &mut A,
    lf: &LiftedFamily<A::V>,
    s: &A::V,
    phi_val: f64,
    d: &A::V,
    gd_dot: f64,
    cfg: &FsConfig,
) -> Option<(A::V, f64)> {
    let mut alpha = 1.0;
    for _ in 0..=cfg.max_backtracks {
        let step = alg.scale(alpha, d);
        let trial = alg.add(s, &step);
        let phi_t = {
            let v = violation_of(alg, lf, &trial, cfg.smoothing);
            alg.scalar(&v)
        };
        if phi_t <= phi_val + cfg.armijo_c * alpha * gd_dot {
            return Some((trial, phi_t));
        }
        alpha *= cfg.backtrack_factor;
    }
    None
}

fn run_engine<A: Algebra>(
    alg: &mut A,
    lf: &LiftedFamily<A::V>,
    s0: A::V,
    method: &Method,
    cfg: &FsConfig,
    max_steps: usize,
) -> Result<EngineOut<A::V>> {
    let mut s = s0;
    let (mut phi, mut grad) = violation_with_grad_of(alg, lf, &s, cfg.smoothing);
    let mut phi_val = alg.scalar(&phi);
    let mut grad_norm = k::l2_norm(alg.value(&grad));
    let mut trajectory = vec![phi_val];
    let mut ls_fallbacks = 0;
    let mut iters = 0;
    // (step difference, gradient difference, 1 / s'y) carriers
    let mut history: VecDeque<(A::V, A::V, A::V)> = VecDeque::new();

    for _ in 0..max_steps {
        if !phi_val.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "feasibility solve produced phi {phi_val}, grad norm {grad_norm}"
            )));
        }
        if phi_val <= cfg.tol_phi || grad_norm <= cfg.tol_grad {
            break;
        }
        let next = match method {
            Method::Gd { eta } => {
                let step = alg.scale(-eta, &grad);
                let trial = alg.add(&s, &step);
                let v = violation_of(alg, lf, &trial, cfg.smoothing);
                Some((trial, alg.scalar(&v)))
            }
            Method::Lbfgs { memory } => {
                let mut d = if history.is_empty() {
                    alg.scale(-1.0, &grad)
                } else {
                    // two-loop recursion
                    let mut q = grad.clone();
                    let mut alphas = Vec::with_capacity(history.len());
                    for (sv, yv, rho) in history.iter().rev() {
                        let sq = alg.dot(sv, &q);
                        let a = alg.mul(rho, &sq);
                        let ay = alg.scale_by(&a, yv);
                        q = alg.sub(&q, &ay);
                        alphas.push(a);
                    }
                    let (sl, yl, _) = history.back().unwrap();
                    let sy = alg.dot(sl, yl);
                    let yy = alg.dot(yl, yl);
                    let ryy = recip(alg, &yy);
                    let gamma = alg.mul(&sy, &ryy);
                    let mut r = alg.scale_by(&gamma, &q);
                    for ((sv, yv, rho), a) in history.iter().zip(alphas.iter().rev()) {
                        let yr = alg.dot(yv, &r);
                        let b = alg.mul(rho, &yr);
                        let amb = alg.sub(a, &b);
                        let term = alg.scale_by(&amb, sv);
                        r = alg.add(&r, &term);
                    }
                    alg.scale(-1.0, &r)
                };
                let mut gd_dot = k::dot(alg.value(&grad), alg.value(&d));
                if gd_dot >= 0.0 {
                    // curvature information pointed uphill; discard it
                    ls_fallbacks += 1;
                    d = alg.scale(-1.0, &grad);
                    gd_dot = -grad_norm * grad_norm;
                }
                let mut accepted = line_search(alg, lf, &s, phi_val, &d, gd_dot, cfg);
                if accepted.is_none() {
                    ls_fallbacks += 1;
                    let d_fb = alg.scale(-1.0, &grad);
                    accepted = line_search(alg, lf, &s, phi_val, &d_fb, -grad_norm * grad_norm, cfg);
                }
                let _ = memory;
                accepted
            }
        };
        let Some((s_next, _)) = next else {
            // no step of any length made progress; report honestly
            break;
        };
        let (phi_n, grad_n) = violation_with_grad_of(alg, lf, &s_next, cfg.smoothing);
        if let Method::Lbfgs { memory } = method {
            let sv = alg.sub(&s_next, &s);
            let yv = alg.sub(&grad_n, &grad);
            let sy = alg.dot(&sv, &yv);
            // skip pairs without usable curvature
            if alg.scalar(&sy) > 1e-10 {
                let rho = recip(alg, &sy);
                if history.len() == *memory {
                    history.pop_front();
                }
                history.push_back((sv, yv, rho));
            }
        }
        s = s_next;
        phi = phi_n;
        grad = grad_n;
        phi_val = alg.scalar(&phi);
        grad_norm = k::l2_norm(alg.value(&grad));
        trajectory.push(phi_val);
        iters += 1;
    }
    if !phi_val.is_finite() || !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!(
            "feasibility solve produced phi {phi_val}, grad norm {grad_norm}"
        )));
    }
    let converged = phi_val <= cfg.tol_phi || grad_norm <= cfg.tol_grad;
    Ok(EngineOut {
        s,
        iters,
        phi: phi_val,
        grad_norm,
        converged,
        ls_fallbacks,
        trajectory,
    })
}

fn out_to_result(out: EngineOut<Vec<f64>>) -> FsResult {
    FsResult {
        point: out.s,
        iters: out.iters,
        phi: out.phi,
        grad_norm: out.grad_norm,
        converged: out.converged,
        ls_fallbacks: out.ls_fallbacks,
        trajectory: out.trajectory,
    }
}

fn run_plain(fam: &ProblemFamily, x: &[f64], y0: &[f64], cfg: &FsConfig, method: &Method) -> Result<FsResult> {
    cfg.validate()?;
    assert_eq!(y0.len(), fam.n, "feasibility seeking: y0 has wrong length");
    let mut alg = Plain;
    let lf = lift_family(&mut alg, fam, x);
    let out = run_engine(&mut alg, &lf, y0.to_vec(), method, cfg, cfg.max_iters)?;
    Ok(out_to_result(out))
}

/// Fixed-step gradient descent `s <- s - eta grad phi(s)`.
pub fn fs_gd(fam: &ProblemFamily, x: &[f64], y0: &[f64], cfg: &FsConfig) -> Result<FsResult> {
    let eta = cfg.eta.unwrap_or_else(|| default_eta(fam));
    run_plain(fam, x, y0, cfg, &Method::Gd { eta })
}

/// L-BFGS with Armijo backtracking; the violation never increases along
/// the accepted iterates.
pub fn fs_lbfgs(fam: &ProblemFamily, x: &[f64], y0: &[f64], cfg: &FsConfig) -> Result<FsResult> {
    run_plain(fam, x, y0, cfg, &Method::Lbfgs { memory: cfg.memory })
}

/// Dispatch on `cfg.method`.
pub fn fs_run(fam: &ProblemFamily, x: &[f64], y0: &[f64], cfg: &FsConfig) -> Result<FsResult> {
    match cfg.method {
        FsMethod::Gd => fs_gd(fam, x, y0, cfg),
        FsMethod::Lbfgs => fs_lbfgs(fam, x, y0, cfg),
    }
}

/// Record a feasibility-seeking run on `tape` starting from the tracked
/// node `y0`. The default form takes `tracked_iters` gradient-descent
/// steps on the tape, finishes the remaining budget off-tape, and splices
/// the final value back with a pass-through node, so the forward value
/// matches the plain run bitwise while adjoints only traverse the tracked
/// prefix. `tracked_iters = 0` returns a constant (no gradient path at
/// all). With `unroll_lbfgs` the full L-BFGS recursion is recorded and
/// every iteration is tracked.
pub fn unroll_fs(
    fam: &ProblemFamily,
    x: &[f64],
    y0: NodeId,
    cfg: &FsConfig,
    tape: &mut Tape,
) -> Result<(NodeId, FsResult)> {
    cfg.validate()?;
    assert_eq!(tape.len_of(y0), fam.n, "unroll_fs: y0 has wrong length");

    if cfg.unroll_lbfgs {
        let mut alg = Taped::new(tape);
        let lf = lift_family(&mut alg, fam, x);
        let out = run_engine(&mut alg, &lf, y0, &Method::Lbfgs { memory: cfg.memory }, cfg, cfg.max_iters)?;
        let point = tape.val(out.s).to_vec();
        return Ok((
            out.s,
            FsResult {
                point,
                iters: out.iters,
                phi: out.phi,
                grad_norm: out.grad_norm,
                converged: out.converged,
                ls_fallbacks: out.ls_fallbacks,
                trajectory: out.trajectory,
            },
        ));
    }

    let eta = cfg.eta.unwrap_or_else(|| default_eta(fam));
    let method = Method::Gd { eta };

    // tracked prefix
    let (node_kp, tracked) = if cfg.tracked_iters > 0 {
        let mut alg = Taped::new(tape);
        let lf = lift_family(&mut alg, fam, x);
        let out = run_engine(&mut alg, &lf, y0, &method, cfg, cfg.tracked_iters)?;
        (out.s, Some(out))
    } else {
        (y0, None)
    };

    let (start, mut iters, mut trajectory, prefix_converged) = match &tracked {
        Some(out) => (
            tape.val(out.s).to_vec(),
            out.iters,
            out.trajectory.clone(),
            out.converged,
        ),
        None => (tape.val(y0).to_vec(), 0, Vec::new(), false),
    };

    if prefix_converged {
        let out = tracked.unwrap();
        let point = tape.val(out.s).to_vec();
        return Ok((
            out.s,
            FsResult {
                point,
                iters: out.iters,
                phi: out.phi,
                grad_norm: out.grad_norm,
                converged: true,
                ls_fallbacks: out.ls_fallbacks,
                trajectory: out.trajectory,
            },
        ));
    }

    // off-tape tail
    let mut alg = Plain;
    let lf = lift_family(&mut alg, fam, x);
    let tail = run_engine(
        &mut alg,
        &lf,
        start,
        &method,
        cfg,
        cfg.max_iters - cfg.tracked_iters,
    )?;
    iters += tail.iters;
    if trajectory.is_empty() {
        trajectory = tail.trajectory.clone();
    } else {
        trajectory.extend_from_slice(&tail.trajectory[1..]);
    }

    let node = if cfg.tracked_iters > 0 {
        tape.pass_through(node_kp, &tail.s)
    } else {
        tape.constant(&tail.s)
    };
    Ok((
        node,
        FsResult {
            point: tail.s,
            iters,
            phi: tail.phi,
            grad_norm: tail.grad_norm,
            converged: tail.converged,
            ls_fallbacks: tail.ls_fallbacks + tracked.map_or(0, |t| t.ls_fallbacks),
            trajectory,
        },
    ))
}

/// Dense Jacobian `d yhat / d y0` of the unrolled run, built row by row
/// with one backward pass per output component.
pub fn unroll_jacobian(fam: &ProblemFamily, x: &[f64], y0: &[f64], cfg: &FsConfig) -> Result<Vec<f64>> {
    let n = fam.n;
    let mut tape = Tape::new();
    let y0n = tape.leaf(y0);
    let (yhat, _) = unroll_fs(fam, x, y0n, cfg, &mut tape)?;
    let mut roots = Vec::with_capacity(n);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        let en = tape.constant(&e);
        roots.push(tape.dot(yhat, en));
    }
    let mut jac = vec![0.0; n * n];
    for (i, root) in roots.into_iter().enumerate() {
        let grads = tape.backward(root);
        if let Some(row) = grads.wrt(y0n) {
            jac[i * n..(i + 1) * n].copy_from_slice(row);
        }
    }
    Ok(jac)
}
