use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use droplab::checkpoint::Checkpoint;
use droplab::config::{ExperimentMatrix, RunConfig};
use droplab::data::Corpus;
use droplab::dropout::{DropoutSchedule, ScheduleSpec};
use droplab::gdv::{append_jsonl, gdv_probe, gdv_sweep, sweep_csv};
use droplab::model::param_count;
use droplab::sweep::{run_sweep, summary_table, write_summary};
use droplab::train::{evaluate, train, val_batches, TrainOptions};
use droplab::{Error, Result};

fn keys_help() -> String {
    let keys = RunConfig::documented_keys();
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (TOML sections model, train, schedule, data, instrumentation):\n");
    for (k, v) in keys {
        out.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    out.push_str("\nEnvironment: DROPLAB_SEED overrides train.seed (--seed takes precedence).\n");
    out.push_str("Exit codes: 0 ok, 2 config error, 3 numeric abort, 4 I/O error, 1 other.");
    out
}

#[derive(Parser)]
#[command(name = "droplab", version, about = "Dropout-scheduling lab for small transformer language models")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run from a config file.
    #[command(after_help = keys_help())]
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: runs/<config file stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Run every cell x seed of an experiment matrix and summarize.
    Sweep {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Validation loss of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Corpus to evaluate on (default: the checkpoint's configured corpus).
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Gradient Direction Variance of a checkpoint, or of every checkpoint
    /// of a run with `gdv sweep`.
    Gdv(GdvArgs),
    /// Corpus preparation.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    /// Dropout schedule tools.
    Schedule {
        #[command(subcommand)]
        cmd: ScheduleCmd,
    },
    /// Print the default config as TOML.
    DefaultConfig,
}

#[derive(Args)]
#[command(args_conflicts_with_subcommands = true)]
struct GdvArgs {
    #[command(subcommand)]
    cmd: Option<GdvCmd>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    minibatches: usize,
    /// `off` or a dropout ratio such as 0.1.
    #[arg(long, default_value = "off")]
    dropout: String,
}

#[derive(Subcommand)]
enum GdvCmd {
    /// GDV with and without dropout at every checkpoint of a run, as CSV
    /// (step, gdv_off, gdv_on).
    Sweep {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        dropout: f64,
        /// CSV path (default: <run>/gdv_sweep.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    /// Tokenize a directory of UTF-8 text files into a corpus cache.
    Prepare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScheduleCmd {
    /// CSV of (t, p) at evenly spaced iterations.
    Preview(PreviewArgs),
}

#[derive(Args)]
struct PreviewArgs {
    /// Take the schedule and iteration budget from a run config.
    #[arg(long, conflicts_with_all = ["kind", "p_base", "direction", "cutoff_iter", "cycles", "total_iters"])]
    config: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    p_base: Option<f64>,
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    cutoff_iter: Option<u64>,
    #[arg(long)]
    cycles: Option<u32>,
    #[arg(long)]
    total_iters: Option<u64>,
    #[arg(long, default_value_t = 1000)]
    points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("DROPLAB_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("DROPLAB_SEED: `{s}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_ratio(s: &str) -> Result<f64> {
    if s == "off" {
        return Ok(0.0);
    }
    match s.parse::<f64>() {
        Ok(p) if (0.0..1.0).contains(&p) => Ok(p),
        _ => Err(Error::Config(format!("--dropout: expected `off` or a ratio in [0, 1), got `{s}`"))),
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>, resume: bool, seed: Option<u64>, quiet: bool) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed_override(seed)? {
        cfg.train.seed = s;
    }
    let out = out.unwrap_or_else(|| {
        let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned());
        PathBuf::from("runs").join(stem.unwrap_or_else(|| "run".into()))
    });
    let corpus = cfg.data.load()?;
    eprintln!(
        "droplab: {} parameters, schedule {}, {} iterations, seed {}",
        param_count(&cfg.model),
        cfg.schedule.describe(),
        cfg.train.total_iters,
        cfg.train.seed
    );
    eprintln!(
        "corpus {}: {} tokens (train {}, val {}), sha256 {}",
        corpus.name,
        corpus.tokens().len(),
        corpus.train().len(),
        corpus.val().len(),
        corpus.hash()
    );
    let summary = train(
        &cfg,
        &corpus,
        &out,
        &TrainOptions {
            resume,
            stop_after: None,
            verbose: !quiet,
        },
    )?;
    if summary.already_complete {
        println!(
            "run in {} already complete at step {}; nothing to do",
            out.display(),
            summary.final_step
        );
    } else {
        println!(
            "finished {} steps in {}; final val loss {}",
            summary.steps_run,
            out.display(),
            summary.final_val_loss.map_or("n/a".into(), |v| format!("{v:.6}"))
        );
    }
    Ok(())
}

fn cmd_sweep(matrix: &Path, out: &Path, parallel: usize) -> Result<()> {
    let m = ExperimentMatrix::load(matrix)?;
    let rows = run_sweep(&m, out, parallel, true)?;
    write_summary(out, &rows)?;
    print!("{}", summary_table(&rows));
    let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
    for r in &failed {
        eprintln!("FAILED {}: {}", r.run, r.error.as_deref().unwrap_or(""));
    }
    Ok(())
}

fn load_corpus(explicit: Option<&Path>, cfg: &RunConfig) -> Result<Corpus> {
    match explicit {
        Some(p) => Corpus::open(p),
        None => cfg.data.load(),
    }
}

fn cmd_eval(ckpt: &Path, corpus: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let corpus = load_corpus(corpus, &ck.config)?;
    let batches = val_batches(&ck.config, &corpus)?;
    let loss = evaluate(&ck.params, &batches)?;
    let out = serde_json::json!({
        "step": ck.step,
        "val_loss": loss,
        "val_ppl": loss.exp(),
        "windows": batches.iter().map(|b| b.batch).sum::<usize>(),
    });
    println!("{out}");
    Ok(())
}

fn run_dir_of(ckpt: &Path) -> PathBuf {
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "ckpt") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn cmd_gdv(args: GdvArgs) -> Result<()> {
    if let Some(GdvCmd::Sweep { run, corpus, dropout, out }) = args.cmd {
        let cfg = RunConfig::load(&run.join("config.snapshot"))?;
        let corpus = load_corpus(corpus.as_deref(), &cfg)?;
        let rows = gdv_sweep(&run, &corpus, dropout)?;
        let csv = sweep_csv(&rows);
        let path = out.unwrap_or_else(|| run.join("gdv_sweep.csv"));
        fs::write(&path, &csv).map_err(|e| Error::io(&path, e))?;
        print!("{csv}");
        return Ok(());
    }
    let ckpt = args
        .ckpt
        .ok_or_else(|| Error::Config("gdv: --ckpt is required".into()))?;
    let p = parse_ratio(&args.dropout)?;
    let ck = Checkpoint::load(&ckpt)?;
    let corpus = load_corpus(args.corpus.as_deref(), &ck.config)?;
    let snap = gdv_probe(&ck, &corpus, args.minibatches, p)?;
    println!("{}", serde_json::to_string(&snap).expect("snapshot serializes"));
    append_jsonl(&run_dir_of(&ckpt).join("gdv.jsonl"), &snap)
}

fn cmd_prepare(input: &Path, out: &Path) -> Result<()> {
    let corpus = Corpus::open(input)?;
    corpus.save(out)?;
    println!(
        "{}: {} tokens (train {}, val {}), sha256 {}",
        out.display(),
        corpus.tokens().len(),
        corpus.train().len(),
        corpus.val().len(),
        corpus.hash()
    );
    Ok(())
}

fn enum_field<T: serde::de::DeserializeOwned>(field: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|e| Error::Config(format!("schedule.{field}: {e}")))
}

fn cmd_preview(a: PreviewArgs) -> Result<()> {
    let (spec, total) = match &a.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            (cfg.schedule, cfg.train.total_iters)
        }
        None => {
            let kind = a
                .kind
                .as_deref()
                .ok_or_else(|| Error::Config("schedule.kind: required (or pass --config)".into()))?;
            let spec = ScheduleSpec {
                kind: enum_field("kind", kind)?,
                p_base: a.p_base.unwrap_or(0.1),
                direction: a.direction.as_deref().map(|d| enum_field("direction", d)).transpose()?,
                cutoff_iter: a.cutoff_iter,
                cycles: a.cycles,
            };
            (spec, a.total_iters.unwrap_or(30000))
        }
    };
    if a.points < 2 {
        return Err(Error::Config("--points: need at least 2".into()));
    }
    let schedule = DropoutSchedule::new(&spec, total)?;
    let mut csv = String::from("t,p\n");
    for (t, p) in schedule.preview(a.points) {
        csv.push_str(&format!("{t},{p}\n"));
    }
    write_out(a.out.as_deref(), &csv)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            config,
            out,
            resume,
            seed,
            quiet,
        } => cmd_train(&config, out, resume, seed, quiet),
        Cmd::Sweep {
            matrix,
            out,
            parallel,
        } => cmd_sweep(&matrix, &out, parallel),
        Cmd::Eval { ckpt, corpus } => cmd_eval(&ckpt, corpus.as_deref()),
        Cmd::Gdv(args) => cmd_gdv(args),
        Cmd::Data {
            cmd: DataCmd::Prepare { input, out },
        } => cmd_prepare(&input, &out),
        Cmd::Schedule {
            cmd: ScheduleCmd::Preview(a),
        } => cmd_preview(a),
        Cmd::DefaultConfig => {
            print!("{}", RunConfig::default().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
