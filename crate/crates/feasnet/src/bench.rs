//! Datasets on disk, trained-model evaluation, and timing.
//!
//! A dataset is a family-specific list of sampled instances plus a fixed
//! train/val/test split, persisted as a JSON manifest next to raw `f64`
//! files. Instance seeds are stored so oracle results can be cached per
//! instance and joined back at evaluation time.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fs::FsConfig;
use crate::net::ModelParams;
use crate::oracle::{best_local_solve, optimality_gap, OracleCache};
use crate::problems::{objective_value, violation_l1, Instance, ProblemFamily};
use crate::rawio;
use crate::seeds;
use crate::train::{infer, Baseline};

pub const DEFAULT_ORACLE_STARTS: usize = 4;
pub const DEFAULT_ORACLE_TOL: f64 = 1e-8;
pub const DEFAULT_ORACLE_OUTER: usize = 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    /// Per-instance sampling seeds, the join key for oracle caches.
    pub instance_seeds: Vec<u64>,
    pub splits: Splits,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    count: usize,
    n: usize,
    n_eq: usize,
    instance_seeds: Vec<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn split_view(&self, idx: &[usize]) -> (Vec<&Instance>, Vec<u64>) {
        let insts = idx.iter().map(|&i| &self.instances[i]).collect();
        let seeds = idx.iter().map(|&i| self.instance_seeds[i]).collect();
        (insts, seeds)
    }

    pub fn train_view(&self) -> (Vec<&Instance>, Vec<u64>) {
        self.split_view(&self.splits.train)
    }

    pub fn val_view(&self) -> (Vec<&Instance>, Vec<u64>) {
        self.split_view(&self.splits.val)
    }

    pub fn test_view(&self) -> (Vec<&Instance>, Vec<u64>) {
        self.split_view(&self.splits.test)
    }

    /// Owned instances for a split, in split order.
    pub fn owned_split(&self, idx: &[usize]) -> Vec<Instance> {
        idx.iter().map(|&i| self.instances[i].clone()).collect()
    }
}

fn check_splits(splits: &Splits, count: usize) -> Result<()> {
    let mut seen = vec![false; count];
    for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        if i >= count {
            return Err(Error::Config(format!("split index {i} out of range for {count} instances")));
        }
        if seen[i] {
            return Err(Error::Config(format!("split index {i} appears twice")));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Config("splits do not cover every instance".into()));
    }
    Ok(())
}

/// Samples `train + val + test` instances with per-index child seeds and a
/// contiguous split. Same `(family, counts, seed)` always reproduces the
/// same bytes.
pub fn generate_dataset(
    fam: &ProblemFamily,
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<Dataset> {
    let total = counts.0 + counts.1 + counts.2;
    if total == 0 {
        return Err(Error::Config("dataset needs at least one instance".into()));
    }
    let mut instances = Vec::with_capacity(total);
    let mut instance_seeds = Vec::with_capacity(total);
    for i in 0..total {
        let s = seeds::child_n(seed, "instance", i as u64);
        instances.push(crate::problems::sample_instance(fam, s)?);
        instance_seeds.push(s);
    }
    let splits = Splits {
        train: (0..counts.0).collect(),
        val: (counts.0..counts.0 + counts.1).collect(),
        test: (counts.0 + counts.1..total).collect(),
    };
    Ok(Dataset { instances, instance_seeds, splits })
}

pub fn save_dataset(ds: &Dataset, fam: &ProblemFamily, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        count: ds.len(),
        n: fam.n,
        n_eq: fam.n_eq,
        instance_seeds: ds.instance_seeds.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    std::fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&ds.splits)?)?;
    let mut xs = Vec::with_capacity(ds.len() * fam.n_eq);
    let mut interiors = Vec::with_capacity(ds.len() * fam.n);
    for inst in &ds.instances {
        xs.extend_from_slice(&inst.x);
        interiors.extend_from_slice(&inst.interior);
    }
    rawio::write_f64(&dir.join("x.f64"), &xs)?;
    rawio::write_f64(&dir.join("interior.f64"), &interiors)?;
    Ok(())
}

pub fn load_dataset(dir: &Path, fam: &ProblemFamily) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|_| Error::Missing(mpath.clone()))?;
    let m: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Corrupt { path: mpath.clone(), why: e.to_string() })?;
    if m.n != fam.n || m.n_eq != fam.n_eq {
        return Err(Error::Corrupt {
            path: mpath.clone(),
            why: format!(
                "dataset shaped for n={}, n_eq={} but family has n={}, n_eq={}",
                m.n, m.n_eq, fam.n, fam.n_eq
            ),
        });
    }
    if m.instance_seeds.len() != m.count {
        return Err(Error::Corrupt {
            path: mpath,
            why: format!("{} seeds for {} instances", m.instance_seeds.len(), m.count),
        });
    }
    let spath = dir.join("splits.json");
    let stext = std::fs::read_to_string(&spath).map_err(|_| Error::Missing(spath.clone()))?;
    let splits: Splits = serde_json::from_str(&stext)
        .map_err(|e| Error::Corrupt { path: spath.clone(), why: e.to_string() })?;
    check_splits(&splits, m.count)
        .map_err(|e| Error::Corrupt { path: spath, why: e.to_string() })?;
    let xs = rawio::read_f64(&dir.join("x.f64"), m.count * fam.n_eq)?;
    let interiors = rawio::read_f64(&dir.join("interior.f64"), m.count * fam.n)?;
    let instances = (0..m.count)
        .map(|i| Instance {
            x: xs[i * fam.n_eq..(i + 1) * fam.n_eq].to_vec(),
            interior: interiors[i * fam.n..(i + 1) * fam.n].to_vec(),
        })
        .collect();
    Ok(Dataset { instances, instance_seeds: m.instance_seeds, splits })
}

/// Solves every listed instance to reference quality and caches the results
/// keyed by instance seed. Fails if any solve does not converge.
pub fn build_cache(
    fam: &ProblemFamily,
    instances: &[&Instance],
    instance_seeds: &[u64],
    seed: u64,
) -> Result<OracleCache> {
    assert_eq!(instances.len(), instance_seeds.len(), "build_cache: seed count mismatch");
    let solved: Vec<Result<_>> = instances
        .par_iter()
        .zip(instance_seeds)
        .map(|(inst, &s)| {
            let r = best_local_solve(
                fam,
                &inst.x,
                &inst.interior,
                DEFAULT_ORACLE_STARTS,
                DEFAULT_ORACLE_TOL,
                DEFAULT_ORACLE_OUTER,
                seeds::child_n(seed, "oracle", s),
            )?;
            if !r.converged {
                return Err(Error::Config(format!(
                    "reference solve for instance seed {s} did not converge \
                     (kkt {:.2e}, violation {:.2e})",
                    r.kkt_residual,
                    r.eq_l1 + r.ineq_l1
                )));
            }
            Ok((s, r))
        })
        .collect();
    let mut cache = OracleCache::new(fam.seed, fam.n);
    for item in solved {
        let (s, r) = item?;
        cache.insert(s, r);
    }
    Ok(cache)
}

pub const METRICS_HEADER: &str =
    "method,seed,eq_mean,eq_max,ineq_mean,ineq_max,gap_mean,gap_min,gap_max,batch_s,sequential_s";

/// One summary line of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub seed: u64,
    pub eq_mean: f64,
    pub eq_max: f64,
    pub ineq_mean: f64,
    pub ineq_max: f64,
    pub gap_mean: f64,
    pub gap_min: f64,
    pub gap_max: f64,
    /// Wall time for solving the whole split at once.
    pub batch_s: f64,
    /// Summed wall times of one-instance-at-a-time solves.
    pub sequential_s: f64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.method,
            self.seed,
            self.eq_mean,
            self.eq_max,
            self.ineq_mean,
            self.ineq_max,
            self.gap_mean,
            self.gap_min,
            self.gap_max,
            self.batch_s,
            self.sequential_s
        )
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-instance evaluation record.
#[derive(Debug, Clone, Serialize)]
pub struct InstanceEval {
    pub index: usize,
    pub eq_l1: f64,
    pub ineq_l1: f64,
    pub gap: f64,
    pub objective: f64,
    pub solve_s: f64,
}

pub fn write_instance_csv(evals: &[InstanceEval], path: &Path) -> Result<()> {
    let mut out = String::from("index,eq_l1,ineq_l1,gap,objective,solve_s\n");
    for e in evals {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.index, e.eq_l1, e.ineq_l1, e.gap, e.objective, e.solve_s
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Aggregates per-instance records into one summary row.
pub fn summarize(
    method: &str,
    seed: u64,
    evals: &[InstanceEval],
    batch_s: f64,
    sequential_s: f64,
) -> MetricsRow {
    assert!(!evals.is_empty(), "summarize: no records");
    let count = evals.len() as f64;
    let mut row = MetricsRow {
        method: method.to_string(),
        seed,
        eq_mean: 0.0,
        eq_max: f64::NEG_INFINITY,
        ineq_mean: 0.0,
        ineq_max: f64::NEG_INFINITY,
        gap_mean: 0.0,
        gap_min: f64::INFINITY,
        gap_max: f64::NEG_INFINITY,
        batch_s,
        sequential_s,
    };
    for e in evals {
        row.eq_mean += e.eq_l1;
        row.eq_max = row.eq_max.max(e.eq_l1);
        row.ineq_mean += e.ineq_l1;
        row.ineq_max = row.ineq_max.max(e.ineq_l1);
        row.gap_mean += e.gap;
        row.gap_min = row.gap_min.min(e.gap);
        row.gap_max = row.gap_max.max(e.gap);
    }
    row.eq_mean /= count;
    row.ineq_mean /= count;
    row.gap_mean /= count;
    row
}

/// Runs the full inference pipeline over a split and reports violation,
/// optimality-gap, and timing statistics. The split is solved twice: once
/// instance by instance (summed as `sequential_s`) and once as a single
/// parallel batch (`batch_s`); a warm-up solve before either pass keeps
/// one-time costs out of both. Every instance must have a cache entry.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    fam: &ProblemFamily,
    params: &ModelParams,
    baseline: Baseline,
    instances: &[&Instance],
    instance_seeds: &[u64],
    fs_cfg: &FsConfig,
    cache: &OracleCache,
    method: &str,
    seed: u64,
) -> Result<(MetricsRow, Vec<InstanceEval>)> {
    assert_eq!(instances.len(), instance_seeds.len(), "evaluate: seed count mismatch");
    if instances.is_empty() {
        return Err(Error::Config("evaluate: empty split".into()));
    }
    for s in instance_seeds {
        if cache.get(*s).is_none() {
            return Err(Error::Config(format!(
                "oracle cache has no entry for instance seed {s}; run the oracle step first"
            )));
        }
    }

    infer(fam, params, &instances[0].x, baseline, fs_cfg)?;

    let mut points = Vec::with_capacity(instances.len());
    let mut solve_times = Vec::with_capacity(instances.len());
    for inst in instances {
        let t = Instant::now();
        let point = infer(fam, params, &inst.x, baseline, fs_cfg)?;
        solve_times.push(t.elapsed().as_secs_f64());
        points.push(point);
    }
    let sequential_s: f64 = solve_times.iter().sum();

    let t_batch = Instant::now();
    let batch_points: Vec<Result<Vec<f64>>> = instances
        .par_iter()
        .map(|inst| infer(fam, params, &inst.x, baseline, fs_cfg))
        .collect();
    let batch_s = t_batch.elapsed().as_secs_f64();
    for (a, b) in points.iter().zip(&batch_points) {
        let b = b.as_ref().expect("batch solve failed where sequential succeeded");
        // deterministic solver: parallel and sequential answers are the same bits
        assert_eq!(a.len(), b.len());
        for (va, vb) in a.iter().zip(b) {
            assert_eq!(va.to_bits(), vb.to_bits(), "batch and sequential solves disagree");
        }
    }

    let evals: Vec<InstanceEval> = points
        .iter()
        .enumerate()
        .map(|(i, point)| {
            let (eq_l1, ineq_l1) = violation_l1(fam, point, &instances[i].x);
            let f_hat = objective_value(fam, point);
            let entry = cache.get(instance_seeds[i]).unwrap();
            InstanceEval {
                index: i,
                eq_l1,
                ineq_l1,
                gap: optimality_gap(f_hat, entry.f_star),
                objective: f_hat,
                solve_s: solve_times[i],
            }
        })
        .collect();
    Ok((summarize(method, seed, &evals, batch_s, sequential_s), evals))
}
