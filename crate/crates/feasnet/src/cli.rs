//! Command line around the pipeline: generate data, cache reference
//! optima, train, evaluate, sweep, self-check. Exit codes: 0 success,
//! 1 run failure, 2 configuration or missing-artifact error.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::bench::{
    build_cache, evaluate, generate_dataset, load_dataset, save_dataset, write_instance_csv,
    write_metrics_csv, Dataset, MetricsRow, METRICS_HEADER,
};
use crate::checks::run_all;
use crate::config::{RunConfig, SplitName};
use crate::error::{Error, Result};
use crate::net::{load_model, save_model};
use crate::oracle::OracleCache;
use crate::problems::{generate_family, load_family, save_family, ProblemFamily};
use crate::seeds;
use crate::train::{rho_sweep, train, Baseline};

#[derive(Parser, Debug)]
#[command(name = "feasnet", version, about = "Learned warm starts with feasibility seeking for parametric constrained optimization")]
pub struct Cli {
    /// JSON run configuration; omitted means built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the family, dataset, and training seeds together.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory all artifacts are read from and written to.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out_dir: PathBuf,

    /// Worker threads for parallel solves; 0 keeps the default pool.
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Sample the problem family and dataset onto disk.
    Generate,
    /// Solve reference optima for the configured splits and cache them.
    Oracle,
    /// Train a model on the train split.
    Train,
    /// Score the trained model on the configured split.
    Eval,
    /// Train and evaluate once per tracked-iteration count.
    SweepK,
    /// Train and evaluate once per distance weight.
    SweepRho,
    /// Run the built-in diagnostic suites.
    Check,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.family.seed = seeds::child(seed, "family");
        cfg.dataset.seed = seeds::child(seed, "dataset");
        cfg.train.seed = seeds::child(seed, "train");
    }
    Ok(cfg)
}

fn split_name(split: SplitName) -> &'static str {
    match split {
        SplitName::Train => "train",
        SplitName::Val => "val",
        SplitName::Test => "test",
    }
}

fn split_view(ds: &Dataset, split: SplitName) -> (Vec<&crate::problems::Instance>, Vec<u64>) {
    match split {
        SplitName::Train => ds.train_view(),
        SplitName::Val => ds.val_view(),
        SplitName::Test => ds.test_view(),
    }
}

fn method_label(baseline: Baseline) -> &'static str {
    match baseline {
        Baseline::None => "fsnet",
        Baseline::Penalty => "penalty",
        Baseline::AdaptivePenalty => "adaptive-penalty",
    }
}

fn load_artifacts(cfg: &RunConfig, out_dir: &Path) -> Result<(ProblemFamily, Dataset)> {
    let fam = load_family(&out_dir.join("family"))?;
    let ds = load_dataset(&out_dir.join("dataset"), &fam)?;
    let expected = cfg.dataset.train + cfg.dataset.val + cfg.dataset.test;
    if ds.len() != expected {
        return Err(Error::Config(format!(
            "dataset on disk holds {} instances but the config asks for {expected}; regenerate",
            ds.len()
        )));
    }
    Ok((fam, ds))
}

fn cmd_generate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let f = &cfg.family;
    let fam = generate_family(f.kind, f.variant, f.n, f.n_eq, f.n_ineq, f.seed)?;
    save_family(&fam, &out_dir.join("family"))?;
    let d = &cfg.dataset;
    let ds = generate_dataset(&fam, (d.train, d.val, d.test), d.seed)?;
    save_dataset(&ds, &fam, &out_dir.join("dataset"))?;
    println!(
        "generated family {:?}/{:?} n={} n_eq={} n_ineq={} and {} instances ({}/{}/{})",
        f.kind, f.variant, f.n, f.n_eq, f.n_ineq, ds.len(), d.train, d.val, d.test
    );
    Ok(())
}

fn cmd_oracle(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (fam, ds) = load_artifacts(cfg, out_dir)?;
    for &split in &cfg.eval.oracle_splits {
        let (insts, inst_seeds) = split_view(&ds, split);
        if insts.is_empty() {
            println!("oracle {}: split is empty, skipped", split_name(split));
            continue;
        }
        let t = Instant::now();
        let cache = build_cache(&fam, &insts, &inst_seeds, seeds::child(cfg.dataset.seed, "oracle"))?;
        let dir = out_dir.join("oracle").join(split_name(split));
        std::fs::create_dir_all(&dir)?;
        cache.save(&dir)?;
        println!(
            "oracle {}: solved {} instances in {:.1}s",
            split_name(split),
            cache.len(),
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (fam, ds) = load_artifacts(cfg, out_dir)?;
    let train_set = ds.owned_split(&ds.splits.train);
    let val_set = ds.owned_split(&ds.splits.val);
    let tcfg = cfg.train_config();
    let t = Instant::now();
    let report = train(&fam, &train_set, &val_set, &tcfg)?;
    save_model(&report.params, &out_dir.join("model"))?;
    report.write_csv(&out_dir.join("report.csv"))?;
    if let Some(last) = report.epochs.last() {
        println!(
            "trained {} epochs in {:.1}s; val eq {:.2e}, ineq {:.2e}, objective {:.4}",
            report.epochs.len(),
            t.elapsed().as_secs_f64(),
            last.val_eq_l1,
            last.val_ineq_l1,
            last.val_objective
        );
    } else {
        println!("trained 0 epochs; saved initial parameters");
    }
    Ok(())
}

fn load_cache(out_dir: &Path, split: SplitName) -> Result<OracleCache> {
    OracleCache::load(&out_dir.join("oracle").join(split_name(split)))
}

fn cmd_eval(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (fam, ds) = load_artifacts(cfg, out_dir)?;
    let params = load_model(&out_dir.join("model"))?;
    let cache = load_cache(out_dir, cfg.eval.split)?;
    let (insts, inst_seeds) = split_view(&ds, cfg.eval.split);
    let (row, evals) = evaluate(
        &fam,
        &params,
        cfg.train.baseline,
        &insts,
        &inst_seeds,
        &cfg.fs,
        &cache,
        method_label(cfg.train.baseline),
        cfg.train.seed,
    )?;
    write_metrics_csv(std::slice::from_ref(&row), &out_dir.join("metrics.csv"))?;
    write_instance_csv(&evals, &out_dir.join("per_instance.csv"))?;
    println!("{METRICS_HEADER}");
    println!("{}", row.csv_line());
    Ok(())
}

fn sweep_eval(
    cfg: &RunConfig,
    out_dir: &Path,
    fam: &ProblemFamily,
    ds: &Dataset,
    tcfg: &crate::train::TrainConfig,
    method: &str,
) -> Result<MetricsRow> {
    let train_set = ds.owned_split(&ds.splits.train);
    let val_set = ds.owned_split(&ds.splits.val);
    let report = train(fam, &train_set, &val_set, tcfg)?;
    let cache = load_cache(out_dir, cfg.eval.split)?;
    let (insts, inst_seeds) = split_view(ds, cfg.eval.split);
    let (row, _) = evaluate(
        fam,
        &report.params,
        tcfg.baseline,
        &insts,
        &inst_seeds,
        &tcfg.fs,
        &cache,
        method,
        tcfg.seed,
    )?;
    Ok(row)
}

fn cmd_sweep_k(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (fam, ds) = load_artifacts(cfg, out_dir)?;
    let base = cfg.train_config();
    let mut rows = Vec::with_capacity(cfg.eval.k_list.len());
    for &k in &cfg.eval.k_list {
        if k > base.fs.max_iters {
            return Err(Error::Config(format!(
                "sweep-k: tracked count {k} exceeds the solver budget {}",
                base.fs.max_iters
            )));
        }
        let mut tcfg = base.clone();
        tcfg.fs.tracked_iters = k;
        let label = format!("k{k}");
        let row = sweep_eval(cfg, out_dir, &fam, &ds, &tcfg, &label)?;
        println!("{}", row.csv_line());
        rows.push(row);
    }
    write_metrics_csv(&rows, &out_dir.join("sweep_k.csv"))?;
    println!("wrote {} rows to sweep_k.csv", rows.len());
    Ok(())
}

fn cmd_sweep_rho(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let (fam, ds) = load_artifacts(cfg, out_dir)?;
    let train_set = ds.owned_split(&ds.splits.train);
    let val_set = ds.owned_split(&ds.splits.val);
    let (_, val_seeds) = ds.val_view();
    // the gap column needs reference optima; run without them if absent
    let cache = load_cache(out_dir, SplitName::Val).ok();
    let rows = rho_sweep(
        &fam,
        &train_set,
        &val_set,
        &val_seeds,
        &cfg.train_config(),
        &cfg.eval.rho_list,
        cache.as_ref(),
    )?;
    let mut out = String::from("rho,mean_dist,mean_gap,mean_viol\n");
    for r in &rows {
        out.push_str(&format!("{},{},{},{}\n", r.rho, r.mean_dist, r.mean_gap, r.mean_viol));
    }
    std::fs::write(out_dir.join("sweep_rho.csv"), out)?;
    for r in &rows {
        println!(
            "rho {}: mean dist {:.4}, mean gap {:.4}, mean violation {:.2e}",
            r.rho, r.mean_dist, r.mean_gap, r.mean_viol
        );
    }
    Ok(())
}

fn cmd_check(cli: &Cli) -> Result<()> {
    let outcomes = run_all(cli.seed.unwrap_or(0))?;
    let mut failures = 0;
    for o in &outcomes {
        let status = if o.pass { "pass" } else { "FAIL" };
        println!("check {}: {status} ({})", o.name, o.detail);
        if !o.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Failed(format!("{failures} diagnostic suite(s) failed")));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // later calls cannot resize an existing global pool; that is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    if let Command::Check = cli.command {
        return cmd_check(cli);
    }
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    match cli.command {
        Command::Generate => cmd_generate(&cfg, &cli.out_dir),
        Command::Oracle => cmd_oracle(&cfg, &cli.out_dir),
        Command::Train => cmd_train(&cfg, &cli.out_dir),
        Command::Eval => cmd_eval(&cfg, &cli.out_dir),
        Command::SweepK => cmd_sweep_k(&cfg, &cli.out_dir),
        Command::SweepRho => cmd_sweep_rho(&cfg, &cli.out_dir),
        Command::Check => unreachable!("handled above"),
    }
}

/// Runs a parsed command line and maps the outcome to a process exit code.
pub fn run_to_exit(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
