//! Training: a predictor network plus differentiable feasibility seeking,
//! optimized end to end under the projection-inspired loss, with plain
//! penalty-method baselines for comparison.
//!
//! Each minibatch is recorded on one tape: the parameters enter as tracked
//! leaves shared by every sample, so a single backward pass yields the
//! batch-mean gradient. The optimizer, the learning-rate schedule, and the
//! adaptive penalty weights all run on plain values outside the tape.

use std::path::Path;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::algebra::{Algebra, Taped};
use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::fs::{fs_run, unroll_fs, FsConfig};
use crate::net::{forward_of, forward_plain, init_mlp, leaf_params, LayerCarriers, ModelParams, DEFAULT_HIDDEN};
use crate::oracle::{optimality_gap, OracleCache};
use crate::problems::{
    lift_family, objective_of, objective_value, violation, violation_l1, violation_of,
    violation_terms_of, Instance, ProblemFamily, Smoothing,
};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    None,
    Penalty,
    AdaptivePenalty,
}

/// Penalty-weight growth for the adaptive baseline: a weight multiplies by
/// `rate` whenever its mean epoch violation fails to decrease, capped at
/// `max`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdaptiveSchedule {
    pub init: f64,
    pub max: f64,
    pub rate: f64,
}

impl Default for AdaptiveSchedule {
    fn default() -> Self {
        Self { init: 30.0, max: 500.0, rate: 2.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the prediction-to-solution distance term.
    pub rho: f64,
    /// Weight of the stabilizer violation term.
    pub rho_phi: f64,
    /// Violation level beyond which the stabilizer term switches on.
    pub q_threshold: f64,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    /// Learning-rate multiplier applied every `lr_decay_steps` optimizer steps.
    pub lr_decay: f64,
    pub lr_decay_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fs: FsConfig,
    pub baseline: Baseline,
    /// `(eq, ineq)` weights for the fixed penalty baseline.
    pub penalty_weights: (f64, f64),
    pub adaptive: AdaptiveSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rho: 5.0,
            rho_phi: 1.0,
            q_threshold: 1e3,
            optimizer: Optimizer::Adam,
            learning_rate: 5e-4,
            lr_decay: 0.5,
            lr_decay_steps: 400,
            epochs: 40,
            batch_size: 64,
            seed: 0,
            fs: FsConfig::default(),
            baseline: Baseline::None,
            penalty_weights: (30.0, 30.0),
            adaptive: AdaptiveSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 || self.rho_phi < 0.0 {
            return Err(Error::Config("rho and rho_phi must be nonnegative".into()));
        }
        if self.q_threshold <= 0.0 {
            return Err(Error::Config("q_threshold must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.lr_decay_steps == 0 {
            return Err(Error::Config("lr_decay_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.penalty_weights.0 <= 0.0 || self.penalty_weights.1 <= 0.0 {
            return Err(Error::Config("penalty weights must be positive".into()));
        }
        let ad = &self.adaptive;
        if ad.init <= 0.0 || ad.max < ad.init || ad.rate < 1.0 {
            return Err(Error::Config(
                "adaptive schedule needs init > 0, max >= init, rate >= 1".into(),
            ));
        }
        self.fs.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub train_loss: f64,
    pub val_eq_l1: f64,
    pub val_ineq_l1: f64,
    pub val_objective: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub params: ModelParams,
}

impl TrainReport {
    /// One CSV row per epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_eq_l1,val_ineq_l1,val_objective,wall_s\n");
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i, e.train_loss, e.val_eq_l1, e.val_ineq_l1, e.val_objective, e.wall_s
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// The projection-inspired loss for one sample:
/// `F = f(yhat; x) + (rho/2) |y - yhat|^2`, plus `rho_phi * phi(y; x)` when
/// the prediction's violation reaches `q_threshold`. The branch is decided
/// on the forward value of `phi`; the added term itself is differentiable.
#[allow(clippy::too_many_arguments)]
pub fn loss_f(
    fam: &ProblemFamily,
    x: &[f64],
    y: NodeId,
    yhat: NodeId,
    rho: f64,
    rho_phi: f64,
    q_threshold: f64,
    tape: &mut Tape,
) -> NodeId {
    let phi_now = violation(fam, tape.val(y), x);
    let mut alg = Taped::new(tape);
    let lf = lift_family(&mut alg, fam, x);
    let f_hat = objective_of(&mut alg, &lf, &yhat);
    let diff = alg.sub(&y, &yhat);
    let sq = alg.square(&diff);
    let d2 = alg.sum(&sq);
    let dist = alg.scale(0.5 * rho, &d2);
    let mut loss = alg.add(&f_hat, &dist);
    if phi_now >= q_threshold {
        let phi = violation_of(&mut alg, &lf, &y, Smoothing::Exact);
        let pen = alg.scale(rho_phi, &phi);
        loss = alg.add(&loss, &pen);
    }
    loss
}

/// Loss node, parameter leaf carriers (for gradient extraction), and each
/// sample's prediction violations `(eq_l1, ineq_l1)`.
type BatchParts = (NodeId, LayerCarriers<NodeId>, Vec<(f64, f64)>);

/// Batch-mean loss with the parameters recorded once as shared leaves.
fn batch_parts(
    fam: &ProblemFamily,
    batch: &[&Instance],
    params: &ModelParams,
    cfg: &TrainConfig,
    penalty_now: (f64, f64),
    tape: &mut Tape,
) -> Result<BatchParts> {
    assert!(!batch.is_empty(), "batch_parts: empty batch");
    let carriers = {
        let mut alg = Taped::new(tape);
        leaf_params(&mut alg, params)
    };
    let mut pred_viol = Vec::with_capacity(batch.len());
    let mut acc: Option<NodeId> = None;
    for inst in batch {
        let y = {
            let mut alg = Taped::new(tape);
            let xn = alg.lift(&inst.x);
            forward_of(&mut alg, &params.sizes, &carriers, &xn)
        };
        pred_viol.push(violation_l1(fam, tape.val(y), &inst.x));
        let loss_i = match cfg.baseline {
            Baseline::None => {
                let (yhat, _) = unroll_fs(fam, &inst.x, y, &cfg.fs, tape)?;
                loss_f(fam, &inst.x, y, yhat, cfg.rho, cfg.rho_phi, cfg.q_threshold, tape)
            }
            Baseline::Penalty | Baseline::AdaptivePenalty => {
                let mut alg = Taped::new(tape);
                let lf = lift_family(&mut alg, fam, &inst.x);
                let f = objective_of(&mut alg, &lf, &y);
                let (eq_t, ineq_t) = violation_terms_of(&mut alg, &lf, &y, Smoothing::Exact);
                let pe = alg.scale(penalty_now.0, &eq_t);
                let pi = alg.scale(penalty_now.1, &ineq_t);
                let fp = alg.add(&f, &pe);
                alg.add(&fp, &pi)
            }
        };
        acc = Some(match acc {
            Some(a) => {
                let mut alg = Taped::new(tape);
                alg.add(&a, &loss_i)
            }
            None => loss_i,
        });
    }
    let total = acc.unwrap();
    let mean = {
        let mut alg = Taped::new(tape);
        alg.scale(1.0 / batch.len() as f64, &total)
    };
    Ok((mean, carriers, pred_viol))
}

/// Batch-mean training loss as a single tape node. Baselines swap the
/// feasibility-seeking pipeline for a fixed penalty objective.
pub fn batch_loss(
    fam: &ProblemFamily,
    batch: &[&Instance],
    params: &ModelParams,
    cfg: &TrainConfig,
    tape: &mut Tape,
) -> Result<NodeId> {
    let (node, _, _) = batch_parts(fam, batch, params, cfg, cfg.penalty_weights, tape)?;
    Ok(node)
}

/// Loss value and its gradient with respect to every parameter, flattened
/// in [`ModelParams`] layout. One tape, one backward pass.
pub fn batch_gradient(
    fam: &ProblemFamily,
    batch: &[&Instance],
    params: &ModelParams,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let (loss, carriers, _) = batch_parts(fam, batch, params, cfg, cfg.penalty_weights, &mut tape)?;
    let value = tape.scalar(loss);
    let grad = flat_gradient(&tape, loss, &carriers, params);
    Ok((value, grad))
}

fn flat_gradient(
    tape: &Tape,
    root: NodeId,
    carriers: &LayerCarriers<NodeId>,
    params: &ModelParams,
) -> Vec<f64> {
    let grads = tape.backward(root);
    let mut flat = vec![0.0; params.param_count()];
    for (i, (w, b)) in carriers.iter().enumerate() {
        let (wr, br) = params.layer_ranges(i);
        if let Some(g) = grads.wrt(*w) {
            flat[wr].copy_from_slice(g);
        }
        if let Some(g) = grads.wrt(*b) {
            flat[br].copy_from_slice(g);
        }
    }
    flat
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

fn apply_update(
    params: &mut ModelParams,
    grad: &[f64],
    optimizer: Optimizer,
    lr: f64,
    adam: &mut AdamState,
) {
    match optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.flat.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            const B1: f64 = 0.9;
            const B2: f64 = 0.999;
            const EPS: f64 = 1e-8;
            adam.t += 1;
            let c1 = 1.0 - B1.powi(adam.t as i32);
            let c2 = 1.0 - B2.powi(adam.t as i32);
            for i in 0..grad.len() {
                adam.m[i] = B1 * adam.m[i] + (1.0 - B1) * grad[i];
                adam.v[i] = B2 * adam.v[i] + (1.0 - B2) * grad[i] * grad[i];
                let mh = adam.m[i] / c1;
                let vh = adam.v[i] / c2;
                params.flat[i] -= lr * mh / (vh.sqrt() + EPS);
            }
        }
    }
}

fn shuffled_indices(count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Post-training inference for one instance: predict, then feasibility-seek
/// unless the model was trained as a raw penalty baseline.
pub fn infer(
    fam: &ProblemFamily,
    params: &ModelParams,
    x: &[f64],
    baseline: Baseline,
    fs_cfg: &FsConfig,
) -> Result<Vec<f64>> {
    let y = forward_plain(params, x);
    match baseline {
        Baseline::None => Ok(fs_run(fam, x, &y, fs_cfg)?.point),
        Baseline::Penalty | Baseline::AdaptivePenalty => Ok(y),
    }
}

/// Minibatch training, deterministic per seed. Validation statistics are
/// measured on the full inference pipeline each epoch.
pub fn train(
    fam: &ProblemFamily,
    train_set: &[Instance],
    val_set: &[Instance],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("train: empty training set".into()));
    }
    let mut params = init_mlp(fam.n_eq, &DEFAULT_HIDDEN, fam.n, seeds::child(cfg.seed, "init"))?;
    let mut adam = AdamState {
        m: vec![0.0; params.param_count()],
        v: vec![0.0; params.param_count()],
        t: 0,
    };
    let mut penalty_now = match cfg.baseline {
        Baseline::AdaptivePenalty => (cfg.adaptive.init, cfg.adaptive.init),
        _ => cfg.penalty_weights,
    };
    let mut prev_viol = (f64::INFINITY, f64::INFINITY);
    let mut steps = 0usize;
    let mut report = Vec::with_capacity(cfg.epochs);
    let mut tape = Tape::new();

    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::child_n(cfg.seed, "shuffle", epoch as u64));
        let order = shuffled_indices(train_set.len(), &mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut viol_sum = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|i| &train_set[*i]).collect();
            tape.reset();
            let (loss, carriers, pred_viol) =
                batch_parts(fam, &batch, &params, cfg, penalty_now, &mut tape)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "train loss diverged at epoch {epoch}, batch {batches}"
                )));
            }
            for (e, i) in &pred_viol {
                viol_sum.0 += e;
                viol_sum.1 += i;
            }
            let grad = flat_gradient(&tape, loss, &carriers, &params);
            let lr = cfg.learning_rate * cfg.lr_decay.powi((steps / cfg.lr_decay_steps) as i32);
            apply_update(&mut params, &grad, cfg.optimizer, lr, &mut adam);
            steps += 1;
            loss_sum += value;
            batches += 1;
        }

        if cfg.baseline == Baseline::AdaptivePenalty {
            let mean_viol =
                (viol_sum.0 / train_set.len() as f64, viol_sum.1 / train_set.len() as f64);
            if mean_viol.0 >= prev_viol.0 {
                penalty_now.0 = (penalty_now.0 * cfg.adaptive.rate).min(cfg.adaptive.max);
            }
            if mean_viol.1 >= prev_viol.1 {
                penalty_now.1 = (penalty_now.1 * cfg.adaptive.rate).min(cfg.adaptive.max);
            }
            prev_viol = mean_viol;
        }

        let mut val = (0.0, 0.0, 0.0);
        for inst in val_set {
            let point = infer(fam, &params, &inst.x, cfg.baseline, &cfg.fs)?;
            let (e, i) = violation_l1(fam, &point, &inst.x);
            val.0 += e;
            val.1 += i;
            val.2 += objective_value(fam, &point);
        }
        let vn = val_set.len().max(1) as f64;
        report.push(EpochStats {
            train_loss: loss_sum / batches.max(1) as f64,
            val_eq_l1: val.0 / vn,
            val_ineq_l1: val.1 / vn,
            val_objective: val.2 / vn,
            wall_s: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainReport { epochs: report, params })
}

#[derive(Debug, Clone, Serialize)]
pub struct RhoRow {
    pub rho: f64,
    pub mean_dist: f64,
    pub mean_gap: f64,
    pub mean_viol: f64,
}

/// Trains one model per listed `rho` and reports validation-set quality:
/// mean prediction-to-solution distance, mean optimality gap against the
/// cache when one is supplied (NaN otherwise), and mean total violation.
pub fn rho_sweep(
    fam: &ProblemFamily,
    train_set: &[Instance],
    val_set: &[Instance],
    val_seeds: &[u64],
    base_cfg: &TrainConfig,
    rho_list: &[f64],
    cache: Option<&OracleCache>,
) -> Result<Vec<RhoRow>> {
    if rho_list.is_empty() {
        return Err(Error::Config("rho_sweep: empty rho list".into()));
    }
    assert_eq!(val_seeds.len(), val_set.len(), "rho_sweep: seed/instance mismatch");
    let mut rows = Vec::with_capacity(rho_list.len());
    for &rho in rho_list {
        let cfg = TrainConfig { rho, ..base_cfg.clone() };
        let rep = train(fam, train_set, val_set, &cfg)?;
        let mut dist_sum = 0.0;
        let mut viol_sum = 0.0;
        let mut gap_sum = 0.0;
        let mut gap_n = 0usize;
        for (inst, inst_seed) in val_set.iter().zip(val_seeds) {
            let y = forward_plain(&rep.params, &inst.x);
            let point = fs_run(fam, &inst.x, &y, &cfg.fs)?.point;
            dist_sum += y
                .iter()
                .zip(&point)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let (e, i) = violation_l1(fam, &point, &inst.x);
            viol_sum += e + i;
            if let Some(entry) = cache.and_then(|c| c.get(*inst_seed)) {
                gap_sum += optimality_gap(objective_value(fam, &point), entry.f_star);
                gap_n += 1;
            }
        }
        let vn = val_set.len().max(1) as f64;
        rows.push(RhoRow {
            rho,
            mean_dist: dist_sum / vn,
            mean_gap: if gap_n > 0 { gap_sum / gap_n as f64 } else { f64::NAN },
            mean_viol: viol_sum / vn,
        });
    }
    Ok(rows)
}
