//! `focused-kv` command-line front end.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 validation (malformed or
//! inconsistent input files), 5 configuration, 6 internal integrity failure,
//! 7 a `verify` suite failed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{RunConfig, CONFIG_ENV};
use crate::cost::memory_overhead;
use crate::error::{Error, Result};
use crate::importance::{estimate_importance, histogram, HeadBudgetTable};
use crate::model::{make_synthetic_stream, ModelShape};
use crate::rollout::{chunk_divergence, dense_baseline, Policy, RolloutEngine};
use crate::rope::RopeSpec;
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_CONFIG: i32 = 5;
pub const EXIT_INTERNAL: i32 = 6;
pub const EXIT_VERIFY_FAILED: i32 = 7;

#[derive(Debug, Parser)]
#[command(name = "focused-kv", version, about = "Per-head KV history selection for chunked attention")]
pub struct Cli {
    /// Overrides the configuration seed everywhere.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Run configuration (JSON). Falls back to $FOCUSED_KV_CONFIG, then to
    /// the built-in small configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate head importance and write the frozen budget table.
    EstimateHeads {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated prompt ids; defaults to the configured prompts.
        #[arg(long, value_delimiter = ',')]
        prompts: Option<Vec<u64>>,
    },
    /// Run a synthetic rollout and write its trace.
    Rollout {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, default_value = "focused")]
        policy: String,
        #[arg(long)]
        budgets: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        chunks: usize,
        /// Trace CSV; printed to stdout when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        dump_masks: Option<PathBuf>,
    },
    /// Run the equivalence and property self-checks.
    Verify {
        #[arg(long, default_value_t = 1000)]
        cases: usize,
    },
    /// Print the frame-level cost and packing-memory report.
    Cost {
        #[arg(long)]
        budgets: PathBuf,
        /// Model shape as a JSON file, inline JSON, or `reference`.
        #[arg(long, default_value = "reference")]
        shape: String,
        #[arg(long, default_value_t = 2)]
        bytes_per_element: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Emit the temporal logit as a function of frame distance (CSV).
    RopeProbe {
        #[arg(long, default_value_t = 8)]
        head_dim: usize,
        /// Comma-separated 0-based temporal block indices; all blocks by default.
        #[arg(long, value_delimiter = ',')]
        blocks: Option<Vec<usize>>,
        /// Explicit per-block frequencies (radians per frame).
        #[arg(long, value_delimiter = ',')]
        frequencies: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10_000.0)]
        base: f64,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        from: i64,
        #[arg(long, default_value_t = 32, allow_hyphen_values = true)]
        to: i64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summaries of a budget table.
    Report {
        /// Histogram of importance scores as CSV.
        #[arg(long)]
        hist: PathBuf,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => EXIT_IO,
        Error::Validation(_) | Error::Json(_) => EXIT_VALIDATION,
        Error::Config(_) => EXIT_CONFIG,
        Error::Shape(_) | Error::Integrity(_) => EXIT_INTERNAL,
    }
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig> {
    let path = arg
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None => RunConfig::desk_default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_shape(arg: &str) -> Result<ModelShape> {
    let text = match arg.trim() {
        "reference" => return Ok(ModelShape::reference_backbone()),
        s if s.starts_with('{') => s.to_string(),
        s => fs::read_to_string(s)?,
    };
    let shape: ModelShape = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("shape: {e}")))?;
    shape.validate()?;
    Ok(shape)
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::EstimateHeads { config, out, prompts } => {
            let cfg = load_config(&config, cli.seed)?;
            let prompts = prompts.unwrap_or_else(|| cfg.prompts.clone());
            let importance = estimate_importance(&prompts, &cfg)?;
            let table = HeadBudgetTable::from_importance(&importance, &cfg.budget, cfg.epsilon)?;
            fs::write(&out, table.to_json()?)?;
            println!(
                "wrote {} ({}x{} heads, total budget {})",
                out.display(),
                table.layers,
                table.heads,
                table.total()
            );
        }
        Command::Rollout {
            config,
            policy,
            budgets,
            chunks,
            trace,
            dump_masks,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let policy = Policy::parse(&policy, &cfg.shape)?;
            let table = budgets.as_deref().map(HeadBudgetTable::load).transpose()?;
            let engine = RolloutEngine::new(&cfg)?;
            let stream = make_synthetic_stream(&cfg, chunks)?;
            let mut out = engine.run(&stream, &policy, table.as_ref(), None)?;
            let dense = engine.run(&stream, &dense_baseline(&cfg.shape), None, None)?;
            let div = chunk_divergence(&out.trajectory, &dense.trajectory, cfg.shape.chunk_frames);
            for (c, d) in out.trace.chunks.iter_mut().zip(div) {
                c.divergence_vs_dense = Some(d);
            }
            emit(trace.as_deref(), &out.trace.to_csv())?;
            if let Some(p) = dump_masks {
                fs::write(p, out.masks.to_json()?)?;
            }
        }
        Command::Verify { cases } => {
            let report = verify::run_all(cli.seed.unwrap_or(0), cases)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(EXIT_VERIFY_FAILED);
            }
        }
        Command::Cost {
            budgets,
            shape,
            bytes_per_element,
            json,
        } => {
            let table = HeadBudgetTable::load(&budgets)?;
            let shape = parse_shape(&shape)?;
            let report = memory_overhead(&table, &shape, bytes_per_element)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            print!("{}", report.to_table());
            if let Some(p) = json {
                fs::write(p, text)?;
            }
        }
        Command::RopeProbe {
            head_dim,
            blocks,
            frequencies,
            base,
            from,
            to,
            out,
        } => {
            let blocks = blocks.unwrap_or_else(|| (0..head_dim / 2).collect());
            let spec = match frequencies {
                Some(f) => RopeSpec::new(head_dim, blocks, f)?,
                None => RopeSpec::with_base(head_dim, blocks, base)?,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(0));
            let q: Vec<f64> = (0..head_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let k: Vec<f64> = (0..head_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut csv = String::from("delta_t,logit\n");
            for (dt, l) in spec.logit_series(&q, &k, from, to)? {
                csv.push_str(&format!("{dt},{l:.12e}\n"));
            }
            emit(out.as_deref(), &csv)?;
        }
        Command::Report { hist, bins, out } => {
            let table = HeadBudgetTable::load(&hist)?;
            let values: Vec<f64> = table.importance.iter().flatten().copied().collect();
            emit(out.as_deref(), &histogram(&values, bins)?.to_csv())?;
        }
    }
    Ok(EXIT_OK)
}
