//! Self-diagnostics behind `feasnet check`.
//!
//! Three suites, each cheap enough to run on every install: unrolled-solver
//! Jacobians against finite differences, the linear violation decay rate on
//! equality-constrained families, and the geometric decay of the bias
//! introduced by truncating the unrolled gradient.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::fs::{fs_run, pl_constants, unroll_fs, unroll_jacobian, FsConfig, FsMethod};
use crate::kernels as k;
use crate::problems::{
    equality_only, generate_family, sample_instance, Kind, ProblemFamily, Variant,
};
use crate::seeds;

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn interior_draw(fam: &ProblemFamily, rng: &mut ChaCha8Rng) -> Vec<f64> {
    fam.lower
        .iter()
        .zip(&fam.upper)
        .map(|(l, u)| {
            let mid = 0.5 * (l + u);
            let r = 0.25 * (u - l).min(20.0);
            rng.random_range(mid - r..mid + r)
        })
        .collect()
}

/// Right-hand side from a bounded anchor point, so descent trajectories on
/// the equality-only families stay far from the (huge) box bounds and the
/// pure-equality decay theory applies exactly.
fn bounded_rhs(fam: &ProblemFamily, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..fam.n).map(|_| rng.random_range(-5.0..5.0)).collect();
    k::matvec(&fam.a, fam.n_eq, fam.n, false, &z)
}

/// Differentiates the unrolled solver at random starts on one family of
/// every kind and compares against central finite differences of the plain
/// solver. The two share every code path except the tape, so disagreement
/// beyond FD noise means a broken adjoint.
pub fn gradient_check(seed: u64) -> Result<CheckOutcome> {
    const TOL: f64 = 1e-5;
    let combos = [
        (Kind::Qp, Variant::Convex),
        (Kind::Qcqp, Variant::Nonconvex),
        (Kind::Socp, Variant::NonsmoothNonconvex),
    ];
    let mut worst = 0.0f64;
    for (i, (kind, variant)) in combos.iter().enumerate() {
        let fam = generate_family(*kind, *variant, 4, 2, 2, seeds::child_n(seed, "gc-fam", i as u64))?;
        let inst = sample_instance(&fam, seeds::child_n(seed, "gc-inst", i as u64))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::child_n(seed, "gc-start", i as u64));
        let y0 = interior_draw(&fam, &mut rng);
        let cfg = FsConfig {
            method: FsMethod::Gd,
            max_iters: 10,
            tracked_iters: 10,
            tol_phi: 1e-300,
            tol_grad: 1e-300,
            ..FsConfig::default()
        };
        let jac = unroll_jacobian(&fam, &inst.x, &y0, &cfg)?;
        let n = fam.n;
        for j in 0..n {
            let h = 1e-6 * y0[j].abs().max(1.0);
            let mut up = y0.clone();
            up[j] += h;
            let mut dn = y0.clone();
            dn[j] -= h;
            let fu = fs_run(&fam, &inst.x, &up, &cfg)?.point;
            let fd = fs_run(&fam, &inst.x, &dn, &cfg)?.point;
            for r in 0..n {
                let fd_val = (fu[r] - fd[r]) / (2.0 * h);
                let got = jac[r * n + j];
                let denom = got.abs().max(fd_val.abs()).max(1.0);
                worst = worst.max((got - fd_val).abs() / denom);
            }
        }
    }
    Ok(CheckOutcome {
        name: "solver-jacobian-fd",
        pass: worst <= TOL,
        detail: format!("worst rel err {worst:.2e} across {} families (tol {TOL:.0e})", combos.len()),
    })
}

/// Fixed-step gradient descent on the equality-only violation contracts
/// like `phi_k <= gamma^k phi_0` with `gamma = 1 - mu / L`. Verifies the
/// bound pointwise along 50 trajectories.
pub fn pl_rate_check(seed: u64) -> Result<CheckOutcome> {
    const RUNS: usize = 50;
    const STEPS: usize = 200;
    const SLACK: f64 = 1e-9;
    let fam = equality_only(20, 10, seeds::child(seed, "pl-fam"))?;
    let pl = pl_constants(&fam)?;
    let cfg = FsConfig {
        method: FsMethod::Gd,
        eta: Some(1.0 / pl.l),
        max_iters: STEPS,
        tracked_iters: 0,
        tol_phi: 1e-300,
        tol_grad: 1e-300,
        ..FsConfig::default()
    };
    let mut worst = f64::NEG_INFINITY;
    for run in 0..RUNS {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::child_n(seed, "pl-start", run as u64));
        let x = bounded_rhs(&fam, &mut rng);
        let y0: Vec<f64> = (0..fam.n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let res = fs_run(&fam, &x, &y0, &cfg)?;
        let phi0 = res.trajectory[0];
        let mut bound = phi0;
        for phi in &res.trajectory[1..] {
            bound *= pl.gamma;
            worst = worst.max(phi / bound);
        }
    }
    Ok(CheckOutcome {
        name: "violation-decay-rate",
        pass: worst <= 1.0 + SLACK,
        detail: format!(
            "worst phi_k / (gamma^k phi_0) = {worst:.12} over {RUNS} runs, gamma {:.6}",
            pl.gamma
        ),
    })
}

fn tracked_gradient(
    fam: &ProblemFamily,
    x: &[f64],
    y0: &[f64],
    c: &[f64],
    cfg: &FsConfig,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let y0n = tape.leaf(y0);
    let (yhat, _) = unroll_fs(fam, x, y0n, cfg, &mut tape)?;
    let cn = tape.constant(c);
    let root = tape.dot(yhat, cn);
    let mut grads = tape.backward(root);
    Ok(grads.take(y0n).expect("y0 has no adjoint"))
}

/// Tracking only the first k' of K solver steps biases the gradient by a
/// factor that shrinks like `delta^k'`, `delta = 1 - eta mu`. Fits the
/// decay slope over k' in {5, 10, 15, 20, 25} and compares it to `ln delta`.
pub fn truncation_bias_check(seed: u64) -> Result<CheckOutcome> {
    const FULL: usize = 60;
    const TRACKED: [usize; 5] = [5, 10, 15, 20, 25];
    const MARGIN: f64 = 0.05;
    let fam = equality_only(10, 5, seeds::child(seed, "tb-fam"))?;
    let pl = pl_constants(&fam)?;
    let eta = 1.0 / pl.l;
    let delta = 1.0 - eta * pl.mu;
    let base = FsConfig {
        method: FsMethod::Gd,
        eta: Some(eta),
        max_iters: FULL,
        tracked_iters: FULL,
        tol_phi: 1e-300,
        tol_grad: 1e-300,
        ..FsConfig::default()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seeds::child(seed, "tb-start"));
    let x = bounded_rhs(&fam, &mut rng);
    let y0: Vec<f64> = (0..fam.n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let c: Vec<f64> = (0..fam.n).map(|_| rng.random_range(-1.0..1.0)).collect();

    let full_grad = tracked_gradient(&fam, &x, &y0, &c, &base)?;
    let mut logs = Vec::with_capacity(TRACKED.len());
    for k in TRACKED {
        let cfg = FsConfig { tracked_iters: k, ..base };
        let g = tracked_gradient(&fam, &x, &y0, &c, &cfg)?;
        let err: f64 = g
            .iter()
            .zip(&full_grad)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(err > 0.0, "truncation bias vanished at k' = {k}");
        logs.push((k as f64, err.ln()));
    }
    // least-squares slope of ln err against k'
    let m = logs.len() as f64;
    let sx: f64 = logs.iter().map(|(x, _)| x).sum();
    let sy: f64 = logs.iter().map(|(_, y)| y).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = logs.iter().map(|(x, y)| x * y).sum();
    let slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    let bound = delta.ln() + MARGIN;
    Ok(CheckOutcome {
        name: "truncation-bias-decay",
        pass: slope <= bound,
        detail: format!("fitted slope {slope:.4} vs bound ln(delta) + {MARGIN} = {bound:.4}"),
    })
}

pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        gradient_check(seeds::child(seed, "gradient"))?,
        pl_rate_check(seeds::child(seed, "pl-rate"))?,
        truncation_bias_check(seeds::child(seed, "truncation"))?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_check_passes() {
        let out = gradient_check(3).unwrap();
        assert!(out.pass, "{}", out.detail);
    }

    #[test]
    fn pl_rate_check_passes() {
        let out = pl_rate_check(4).unwrap();
        assert!(out.pass, "{}", out.detail);
    }

    #[test]
    fn truncation_bias_check_passes() {
        let out = truncation_bias_check(5).unwrap();
        assert!(out.pass, "{}", out.detail);
    }

    #[test]
    fn run_all_reports_three_suites() {
        let outs = run_all(7).unwrap();
        assert_eq!(outs.len(), 3);
        assert!(outs.iter().all(|o| o.pass));
        let names: Vec<_> = outs.iter().map(|o| o.name).collect();
        assert_eq!(names, ["solver-jacobian-fd", "violation-decay-rate", "truncation-bias-decay"]);
    }
}
