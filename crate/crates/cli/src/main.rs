//! `acae`: generate scenarios, train the head, evaluate, sweep, check gradients
//! and time the head.

mod config;

use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;

use acae::eval::{
    compute_components, evaluate_table, render_rows, render_side_by_side, render_table,
    sweep_lambda, sweep_subsets, EvalReport,
};
use acae::exec::Execution;
use acae::format::{load_model, save_checkpoint, save_model, Checkpoint};
use acae::grad::{grad_check_suite, merge_reports};
use acae::head::AcaeParams;
use acae::oim::OimState;
use acae::seed::named_seed;
use acae::similarity::FusionConfig;
use acae::synth::{generate, SyntheticDataset};
use acae::train::Trainer;

use crate::config::{ConfigError, Settings};

const OUT_ENV: &str = "ACAE_OUT_DIR";

#[derive(Parser)]
#[command(name = "acae", version, about = "Context-aware person retrieval with an attention head")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set fusion.lambda=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: $ACAE_OUT_DIR, then ./acae-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct Inputs {
    /// Dataset file (default: <out>/dataset.jsonl).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model or checkpoint file (default: <out>/model.acae).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic co-traveler dataset.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the head on a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Baseline and ACAE retrieval side by side.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Lambda, feature-subset and k-reciprocal sweeps.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Analytic versus finite-difference gradients on seeded instances.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Per-pair cost of appearance scoring with and without the head.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inputs: Inputs,
    },
}

struct Run {
    settings: Settings,
    out: PathBuf,
    seed: u64,
    exec: Execution,
}

impl Run {
    fn new(name: &str, common: &Common) -> Result<Self> {
        let settings = Settings::load(common.config.as_deref(), &common.overrides)?;
        let out = common
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("acae-out"));
        std::fs::create_dir_all(&out)
            .with_context(|| format!("creating output directory {}", out.display()))?;
        let seed = settings.u64("seed")?;
        let exec = if settings.bool("exec.parallel")? {
            Execution::Parallel
        } else {
            Execution::Sequential
        };
        let run = Self {
            settings,
            out,
            seed,
            exec,
        };
        run.write(&format!("{name}.config.txt"), &run.settings.snapshot())?;
        Ok(run)
    }

    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn write(&self, file: &str, text: &str) -> Result<()> {
        let p = self.path(file);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn dataset(&self, given: &Option<PathBuf>) -> Result<SyntheticDataset> {
        let p = given.clone().unwrap_or_else(|| self.path("dataset.jsonl"));
        SyntheticDataset::import(&p).with_context(|| format!("loading dataset {}", p.display()))
    }

    fn model(&self, given: &Option<PathBuf>) -> Result<AcaeParams> {
        let p = given.clone().unwrap_or_else(|| self.path("model.acae"));
        load_model(&p).with_context(|| format!("loading model {}", p.display()))
    }
}

fn cmd_gen(common: &Common) -> Result<()> {
    let run = Run::new("gen", common)?;
    let cfg = run.settings.scenario(named_seed(run.seed, "data"))?;
    let ds = generate(&cfg)?;
    let path = run.path("dataset.jsonl");
    ds.export(&path)?;
    let mut s = String::new();
    writeln!(s, "images      {}", ds.images.len())?;
    writeln!(s, "identities  {}", ds.n_identities)?;
    writeln!(s, "persons     {}", ds.images.iter().map(|i| i.len()).sum::<usize>())?;
    writeln!(s, "labeled     {}", ds.labeled_count())?;
    writeln!(s, "groups      {}", ds.groups.len())?;
    writeln!(s, "twin pairs  {}", ds.confusable_pairs.len())?;
    run.write("gen_report.txt", &s)?;
    print!("{s}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_train(common: &Common, data: &Option<PathBuf>) -> Result<()> {
    let run = Run::new("train", common)?;
    let ds = run.dataset(data)?;
    let head = run.settings.head(ds.dim)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(named_seed(run.seed, "init"));
    let params = AcaeParams::init(head, &mut rng)?;
    let mut oim_rng = rand_chacha::ChaCha8Rng::seed_from_u64(named_seed(run.seed, "oim"));
    let mut oim = OimState::random(ds.n_identities.max(1), ds.dim, &mut oim_rng)
        .with_capacity(run.settings.usize("oim.queue_per_identity")? * ds.n_identities.max(1));
    oim.temperature = run.settings.f64("oim.temperature")?;
    oim.momentum = run.settings.f64("oim.momentum")?;
    if !(oim.temperature > 0.0) || !(0.0..=1.0).contains(&oim.momentum) {
        bail!(ConfigError(
            "`oim.temperature` must be positive and `oim.momentum` in [0, 1]".into()
        ));
    }
    let schedule = run.settings.schedule()?;
    let mut trainer = Trainer::new(
        params,
        &ds.images,
        oim,
        schedule,
        named_seed(run.seed, "train"),
    )?
    .with_execution(run.exec);
    trainer.bank = trainer.bank.clone().with_momentum(run.settings.bank_momentum()?);

    let t = Instant::now();
    let stats = trainer.train(&ds.images)?;
    let secs = t.elapsed().as_secs_f64();

    let mut s = String::new();
    writeln!(s, "{:>5}  {:>8}  {:>10}  {:>5}  {:>4}  frozen", "epoch", "lr", "loss", "steps", "cold")?;
    for e in &stats {
        writeln!(
            s,
            "{:>5}  {:>8.4}  {:>10.6}  {:>5}  {:>4}  {}",
            e.epoch, e.lr, e.mean_loss, e.steps, e.cold_pairs, e.frozen
        )?;
    }
    run.write("train_report.txt", &s)?;
    run.write("train_timings.txt", &format!("train_seconds={secs:.3}\n"))?;
    save_model(&run.path("model.acae"), &trainer.params)?;
    save_checkpoint(
        &run.path("checkpoint.acae"),
        &Checkpoint {
            params: trainer.params.clone(),
            bank: trainer.bank.clone(),
            oim: trainer.oim.clone(),
        },
    )?;
    print!("{s}");
    println!("wrote {}", run.path("model.acae").display());
    Ok(())
}

fn cmd_eval(common: &Common, inputs: &Inputs) -> Result<()> {
    let run = Run::new("eval", common)?;
    let ds = run.dataset(&inputs.data)?;
    let params = run.model(&inputs.model)?;
    let fusion = run.settings.fusion()?;
    let protocol = run.settings.protocol(named_seed(run.seed, "eval"))?;
    let t = Instant::now();
    let table = compute_components(&ds.images, Some(&params), &protocol, run.exec)?;
    let secs = t.elapsed().as_secs_f64();
    let baseline = evaluate_table(&table, &FusionConfig::baseline(), "baseline")?;
    let acae = evaluate_table(&table, &fusion, "acae")?;
    let text = format!(
        "queries {}  gallery images per query {}\n\n{}",
        baseline.metrics.queries,
        protocol.gallery_size,
        render_side_by_side(&baseline, &acae)
    );
    run.write("eval_report.txt", &text)?;
    run.write("eval_rows.jsonl", &render_rows(&[baseline, acae]))?;
    run.write("eval_timings.txt", &format!("score_seconds={secs:.3}\n"))?;
    print!("{text}");
    Ok(())
}

fn cmd_sweep(common: &Common, inputs: &Inputs) -> Result<()> {
    let run = Run::new("sweep", common)?;
    let ds = run.dataset(&inputs.data)?;
    let params = run.model(&inputs.model)?;
    let fusion = run.settings.fusion()?;
    let protocol = run.settings.protocol(named_seed(run.seed, "eval"))?;
    let table = compute_components(&ds.images, Some(&params), &protocol, run.exec)?;

    let lambdas = run.settings.f64_list("eval.lambdas")?;
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        bail!(ConfigError(format!("`eval.lambdas` entry {l} outside [0, 1]")));
    }
    let by_lambda = sweep_lambda(&table, &lambdas, &fusion)?;
    let subsets = sweep_subsets(&table, &fusion)?;
    let grid = run.settings.rerank_grid()?;
    let mut rerank: Vec<EvalReport> = vec![subsets[0].clone()];
    rerank.extend(acae::rerank::search_rerank(&ds.images, &table, &grid, run.exec)?);
    rerank.push(evaluate_table(&table, &fusion, "acae")?);

    let mut text = String::new();
    for (title, file, rows) in [
        ("lambda sweep", "sweep_lambda", &by_lambda),
        ("feature subsets", "sweep_subsets", &subsets),
        ("k-reciprocal vs acae", "sweep_rerank", &rerank),
    ] {
        let table = render_table(rows);
        run.write(&format!("{file}.txt"), &table)?;
        run.write(&format!("{file}.jsonl"), &render_rows(rows))?;
        writeln!(text, "{title}\n{table}")?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_gradcheck(common: &Common) -> Result<bool> {
    let run = Run::new("gradcheck", common)?;
    let count = run.settings.usize("gradcheck.instances")?;
    let tol = run.settings.f64("gradcheck.tolerance")?;
    let step = run.settings.f64("gradcheck.step")?;
    if count == 0 || !(tol > 0.0) || !(step > 0.0) {
        bail!(ConfigError(
            "gradcheck needs instances >= 1 and positive tolerance and step".into()
        ));
    }
    let reports = grad_check_suite(named_seed(run.seed, "gradcheck"), count, tol, step, run.exec)?;
    let merged = merge_reports(&reports);
    let width = merged.blocks.iter().map(|b| b.name.len()).max().unwrap_or(5).max(5);
    let mut text = String::new();
    let mut rows = String::new();
    writeln!(text, "{:<width$}  {:>12}  result", "block", "max rel err")?;
    for b in &merged.blocks {
        writeln!(
            text,
            "{:<width$}  {:>12.3e}  {}",
            b.name,
            b.max_rel_error,
            if b.pass { "PASS" } else { "FAIL" }
        )?;
        writeln!(
            rows,
            "{}",
            serde_json::json!({"block": b.name, "max_rel_error": b.max_rel_error, "pass": b.pass})
        )?;
    }
    writeln!(
        text,
        "\n{} instances, tolerance {tol:e}: {}",
        reports.len(),
        if merged.pass { "PASS" } else { "FAIL" }
    )?;
    run.write("gradcheck.txt", &text)?;
    run.write("gradcheck.jsonl", &rows)?;
    print!("{text}");
    Ok(merged.pass)
}

fn cmd_bench(common: &Common, inputs: &Inputs) -> Result<()> {
    let run = Run::new("bench", common)?;
    let ds = run.dataset(&inputs.data)?;
    let params = run.model(&inputs.model)?;
    let report = acae::bench::bench_overhead(
        &ds.images,
        &params,
        run.settings.usize("bench.repeats")?,
        run.settings.usize("bench.max_pairs")?,
    )?;
    let text = format!(
        "pairs {}  repeats {}\n\n{}",
        report.pairs,
        report.repeats,
        report.render()
    );
    // timings by nature; kept out of the deterministic reports
    run.write("bench_timings.txt", &text)?;
    run.write("bench_timings.json", &serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<acae::Error>() {
            return match e {
                acae::Error::NonFinite(_) => 3,
                acae::Error::Config(_) | acae::Error::Parse { .. } | acae::Error::Format(_) => 2,
                acae::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 1,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Gen { common } => cmd_gen(common)?,
        Command::Train { common, data } => cmd_train(common, data)?,
        Command::Eval { common, inputs } => cmd_eval(common, inputs)?,
        Command::Sweep { common, inputs } => cmd_sweep(common, inputs)?,
        Command::Gradcheck { common } => return cmd_gradcheck(common),
        Command::Bench { common, inputs } => cmd_bench(common, inputs)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
