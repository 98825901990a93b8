//! `vsdet`: synthetic pools, active-learning runs, strategy comparisons and diagnostics.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use vsdet::eval::MetricKind;
use vsdet::experiment::{
    compare_strategies, full_supervision, query_traces, reduction_trace, run_experiment, ClassPool, Experiment,
    ExperimentConfig, RunRecord, SeedRun, SCHEMA_VERSION,
};
use vsdet::io;
use vsdet::mssvm::{SgdParams, Trainer};
use vsdet::pool::Pool;
use vsdet::strategies::Strategy;
use vsdet::synth::{generate_synthetic, SyntheticConfig};
use vsdet::versionspace::{random_thm2_instances, thm1_report, thm2_check};
use vsdet::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vsdet",
    version,
    about = "Version-space active learning for object localization"
)]
struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pool file.
    Gen(GenArgs),
    /// Run one strategy for one or more seeds.
    Run(RunArgs),
    /// Compare strategies as a percentage of full supervision.
    Compare(CompareArgs),
    /// Version-space reduction of the first queries of a run.
    Vspace(VspaceArgs),
    /// Warm-start gap bound and single-step argmin agreement of SGD.
    Thm(ThmArgs),
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Feature dimension of a generated pool.
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
    #[arg(long, default_value_t = 50)]
    proposals: usize,
    #[arg(long, default_value_t = SyntheticConfig::default().noise_level)]
    noise: f64,
    /// Median scale of the per-image nuisance component.
    #[arg(long, default_value_t = SyntheticConfig::default().clutter)]
    clutter: f64,
    #[arg(long, default_value_t = 1.0)]
    positive_fraction: f64,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            dim: self.dim,
            n_train: self.n_train,
            n_test: self.n_test,
            proposals_per_image: self.proposals,
            planted_weight_seed: seed,
            noise_level: self.noise,
            positive_fraction: self.positive_fraction,
            clutter: self.clutter,
            ..SyntheticConfig::default()
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory; the pool is written to `pool.jsonl`.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Store features in a binary sidecar next to the pool file.
    #[arg(long)]
    sidecar: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainerArg {
    Sgd,
    Cp,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    Ap,
}

#[derive(Args, Clone)]
struct ExperimentArgs {
    /// Pool file; a synthetic pool is generated from --seed when omitted.
    #[arg(long)]
    pool: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value = "apt")]
    strategy: Strategy,
    #[arg(long, value_enum, default_value_t = TrainerArg::Sgd)]
    trainer: TrainerArg,
    /// Annotated images at which a run stops (seed set included).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, default_value_t = 2)]
    seed_size: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    repeats: u64,
    #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
    metric: MetricArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

impl ExperimentArgs {
    fn load_pool(&self) -> Result<Pool> {
        match &self.pool {
            Some(p) => io::load_pool(p),
            None => generate_synthetic(&self.synth.config(self.seed)),
        }
    }

    fn config(&self, pool: &Pool) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.query.strategy = self.strategy;
        cfg.trainer.trainer = match self.trainer {
            TrainerArg::Sgd => Trainer::Sgd,
            TrainerArg::Cp => Trainer::Cp,
        };
        if let Some(l) = self.lambda {
            cfg.trainer.lambda = l;
            cfg.query.inner_sgd.lambda = l;
        }
        if let Some(e) = self.epochs {
            cfg.trainer.epochs = e;
        }
        cfg.budget = self
            .budget
            .unwrap_or_else(|| (pool.train_ids().len() * 3 / 10).max(self.seed_size));
        cfg.seed_size = self.seed_size;
        cfg.batch = self.batch;
        cfg.metric = match self.metric {
            MetricArg::Accuracy => MetricKind::Accuracy,
            MetricArg::Ap => MetricKind::Ap,
        };
        cfg.seeds = (self.seed..self.seed + self.repeats.max(1)).collect();
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Write a checkpoint after every round (single seed only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Continue from a checkpoint instead of starting fresh.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many rounds (with --checkpoint, to resume later).
    #[arg(long)]
    max_rounds: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Extra pool files, one class each (named by file stem).
    #[arg(long = "class-pool")]
    class_pools: Vec<PathBuf>,
    /// Synthetic classes to generate when no pool is given.
    #[arg(long, default_value_t = 1)]
    classes: u64,
    #[arg(long, value_delimiter = ',', default_value = "apt,sm,msm,ent,mm,ms")]
    strategies: Vec<Strategy>,
    #[arg(long, default_value_t = 0.2)]
    budget_fraction: f64,
}

#[derive(Args)]
struct VspaceArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    #[arg(long, default_value_t = 15)]
    steps: usize,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Args)]
struct ThmArgs {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Random instances for the argmin-agreement check.
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_timings(runs: &[SeedRun], path: &Path) -> Result<()> {
    let rows: Vec<_> = runs
        .iter()
        .map(|r| {
            json!({
                "seed": r.seed,
                "train_s": r.timings.train.as_secs_f64(),
                "eval_s": r.timings.eval.as_secs_f64(),
                "query_s": r.timings.query.as_secs_f64(),
            })
        })
        .collect();
    io::write_json_file(&json!({ "version": SCHEMA_VERSION, "runs": rows }), path)
}

fn write_run_outputs(record: &RunRecord, out: &Path) -> Result<()> {
    let mut curves: Vec<_> = record.runs.iter().map(|r| r.curve.clone()).collect();
    if record.runs.len() > 1 {
        let mut mean = record.mean_curve.clone();
        mean.strategy = format!("{}-mean", mean.strategy);
        curves.push(mean);
    }
    io::write_curves(&curves, out)?;
    io::write_run_record(record, out.join("run.json"))?;
    write_timings(&record.runs, &out.join("timing.json"))
}

fn gen(args: GenArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let cfg = args.synth.config(args.seed);
    let pool = generate_synthetic(&cfg)?;
    let path = args.out.join("pool.jsonl");
    if args.sidecar {
        io::save_pool_with_sidecar(&pool, &path)?;
    } else {
        io::save_pool(&pool, &path)?;
    }
    io::write_json_file(&cfg, args.out.join("synth.json"))?;
    println!("wrote {} ({} images, D={})", path.display(), pool.len(), pool.dim());
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let exp = &args.exp;
    ensure_dir(&exp.out)?;
    let pool = exp.load_pool()?;
    let stepwise = args.checkpoint.is_some() || args.resume.is_some() || args.max_rounds.is_some();
    let record = if stepwise {
        let mut e = match &args.resume {
            Some(p) => Experiment::from_state(&pool, io::resume(p)?)?,
            None => {
                let cfg = exp.config(&pool);
                if cfg.seeds.len() != 1 {
                    return Err(Error::Config("checkpointing supports a single seed".into()));
                }
                Experiment::new(&cfg, &pool, cfg.seeds[0])?
            }
        };
        let mut rounds = 0;
        while !e.is_finished() && args.max_rounds.is_none_or(|m| rounds < m) {
            e.step()?;
            rounds += 1;
            if let Some(p) = &args.checkpoint {
                io::checkpoint(e.state(), p)?;
            }
        }
        if !e.is_finished() {
            println!("stopped after {rounds} rounds; {} annotated", e.state().annotated.len());
            return Ok(());
        }
        let cfg = e.state().config.clone();
        let run = e.into_seed_run();
        RunRecord {
            version: SCHEMA_VERSION,
            config: cfg,
            mean_curve: run.curve.clone(),
            runs: vec![run],
        }
    } else {
        run_experiment(&exp.config(&pool), &pool)?
    };
    for r in &record.runs {
        r.audit()?;
    }
    write_run_outputs(&record, &exp.out)?;
    for p in &record.mean_curve.points {
        println!("{:>4} {:>6.3} {:.4}", p.n_annotated, p.pct_of_train, p.metric_value);
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Result<()> {
    let exp = &args.exp;
    ensure_dir(&exp.out)?;
    let mut pools: Vec<(String, Pool)> = Vec::new();
    let stem = |p: &Path| {
        p.file_stem()
            .map_or("pool".to_string(), |s| s.to_string_lossy().into_owned())
    };
    if let Some(p) = &exp.pool {
        pools.push((stem(p), io::load_pool(p)?));
    }
    for p in &args.class_pools {
        pools.push((stem(p), io::load_pool(p)?));
    }
    if pools.is_empty() {
        for k in 0..args.classes.max(1) {
            let pool = generate_synthetic(&exp.synth.config(exp.seed + k))?;
            pools.push((format!("class{k}"), pool));
        }
    }
    let cfg = exp.config(&pools[0].1);
    let classes: Vec<ClassPool<'_>> = pools
        .iter()
        .map(|(name, pool)| ClassPool {
            name: name.clone(),
            pool,
        })
        .collect();
    let cmp = compare_strategies(&cfg, &args.strategies, &classes, args.budget_fraction)?;
    io::write_table(&cmp.table, exp.out.join("table.csv"))?;
    fs::write(exp.out.join("table.txt"), cmp.table.render())?;
    let curves: Vec<_> = cmp
        .records
        .iter()
        .flat_map(|(name, r)| {
            r.runs.iter().map(move |run| {
                let mut c = run.curve.clone();
                c.strategy = name.clone();
                c
            })
        })
        .collect();
    io::write_curves(&curves, &exp.out)?;
    io::write_json_file(&cmp, exp.out.join("compare.json"))?;
    print!("{}", cmp.table.render());
    Ok(())
}

fn vspace(args: VspaceArgs) -> Result<()> {
    let exp = &args.exp;
    ensure_dir(&exp.out)?;
    let pool = match &exp.pool {
        Some(p) => io::load_pool(p)?,
        None => generate_synthetic(&SyntheticConfig {
            dim: exp.synth.dim.min(vsdet::versionspace::MAX_DIM),
            ..exp.synth.config(exp.seed)
        })?,
    };
    let mut cfg = exp.config(&pool);
    cfg.budget = exp
        .budget
        .unwrap_or(cfg.seed_size + args.steps)
        .min(pool.train_ids().len());
    let mut report = Vec::new();
    let (mut hits, mut total) = (0usize, 0usize);
    for &seed in &cfg.seeds {
        let steps = reduction_trace(&cfg, &pool, seed, args.steps, args.samples)?;
        hits += steps.iter().filter(|s| s.at_least_median).count();
        total += steps.len();
        report.push(json!({ "seed": seed, "steps": steps }));
    }
    let rate = hits as f64 / total.max(1) as f64;
    io::write_json_file(
        &json!({ "version": SCHEMA_VERSION, "strategy": cfg.query.strategy, "at_least_median_rate": rate, "seeds": report }),
        exp.out.join("vspace.json"),
    )?;
    println!(
        "{}: chosen reduction >= median in {hits}/{total} steps ({:.1}%)",
        cfg.query.strategy,
        100.0 * rate
    );
    Ok(())
}

fn thm(args: ThmArgs) -> Result<()> {
    let exp = &args.exp;
    ensure_dir(&exp.out)?;
    let pool = exp.load_pool()?;
    let mut cfg = exp.config(&pool);
    cfg.query.strategy = Strategy::Apt;
    let sgd = SgdParams {
        lambda: cfg.trainer.lambda,
        epochs: cfg.query.inner_sgd.epochs,
        seed: exp.seed,
        eta0: cfg.trainer.eta0,
    };
    let traces = query_traces(&cfg, &pool, exp.seed)?;
    let thm1: Vec<_> = thm1_report(&pool, &traces, &sgd, exp.repeats.max(1) as usize)?;
    let violations = thm1
        .iter()
        .filter(|r| r.measured_gap.unwrap_or(0.0) > r.bound_value.unwrap_or(f64::INFINITY))
        .count();
    let thm2 = thm2_check(
        &random_thm2_instances(args.instances, pool.dim().min(8), 8, exp.seed),
        &sgd,
    )?;
    let c1 = thm2.iter().filter(|r| r.argmin_match == Some(true)).count();
    let c2 = thm2.iter().filter(|r| r.clause2_match == Some(true)).count();
    let full = full_supervision(&cfg, &pool, exp.seed)?;
    io::write_json_file(
        &json!({ "version": SCHEMA_VERSION, "full_supervision": full, "thm1": thm1, "thm2": thm2 }),
        exp.out.join("thm.json"),
    )?;
    println!(
        "gap bound: {} steps, measured gap above the bound in {violations}",
        thm1.len()
    );
    println!(
        "argmin agreement: clause 1 holds in {c1}/{}, clause 2 in {c2}/{}",
        thm2.len(),
        thm2.len()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Vspace(a) => vspace(a),
        Command::Thm(a) => thm(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
