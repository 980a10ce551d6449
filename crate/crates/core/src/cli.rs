//! Command-line front end: `synth-data`, `train`, `eval`, `gradcheck` and
//! `dump-attn`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data, I/O or configuration
//! error, 3 numeric failure (non-finite values or a failed gradient check).

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{Config, ModelConfig};
use crate::data::{load_dataset, synth_generate, Image};
use crate::error::{Error, Result};
use crate::gradsuite::{self, DEFAULT_STEP, DEFAULT_TOL, SUITE_SEED};
use crate::metrics::{plcc, srcc};
use crate::params::Graph;
use crate::train::run_protocol;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "csfiqa",
    version,
    about = "Two-scale transformer image quality assessment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write procedural distorted images and a `path,mos` manifest.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the repeated-split protocol and save the repeat-0 model.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the finite-difference gradient suite; exits 0 iff every check passes.
    Gradcheck {
        /// Config file; defaults to the smallest gradcheck layout.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = SUITE_SEED)]
        seed: u64,
    },
    /// Write the focus-attention weights and survivor sets for one image.
    DumpAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Manifest of the dataset to split into train/test.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Also write the metrics report to this file.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Label-distance threshold, or `auto`.
    #[arg(long)]
    beta_pair: Option<String>,
    #[arg(long)]
    alpha_k: Option<f64>,
    #[arg(long)]
    beta_k: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    quiet: bool,
}

/// Parses `args` (including the program name) and runs the command,
/// writing results to `out` and diagnostics to stderr. Returns the exit
/// code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

fn execute(cmd: Command, out: &mut dyn std::io::Write) -> Result<i32> {
    let write = |out: &mut dyn std::io::Write, text: &str| -> Result<()> {
        out.write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e))
    };
    match cmd {
        Command::SynthData { n, seed, out: dir } => {
            let manifest = synth_generate(n, seed, &dir)?;
            write(
                out,
                &format!(
                    "wrote {} images to {}\n",
                    manifest.rows.len(),
                    dir.display()
                ),
            )?;
        }
        Command::Train(args) => {
            let text = train(&args)?;
            write(out, &text)?;
        }
        Command::Eval { checkpoint, data } => {
            let (cfg, model) = checkpoint::load(&checkpoint)?;
            let samples = load_dataset(&data, &cfg.model)?;
            let mut preds = Vec::with_capacity(samples.len());
            for s in &samples {
                preds.push(model.predict(&model.prepare(&s.small, &s.large)?)?);
            }
            let labels: Vec<f64> = samples.iter().map(|s| s.mos).collect();
            let s = srcc(&preds, &labels)?;
            let p = plcc(&preds, &labels)?;
            write(out, &format!("n,srcc,plcc\n{},{s},{p}\n", samples.len()))?;
        }
        Command::Gradcheck { config, seed } => {
            let cfg = match config {
                Some(path) => Config::load(&path)?,
                None => Config {
                    model: ModelConfig::gradcheck(),
                    ..Config::default()
                },
            };
            let outcomes = gradsuite::run_suite(&cfg, seed, DEFAULT_STEP)?;
            let mut text = String::new();
            let mut all = true;
            for o in &outcomes {
                let ok = o.passes(DEFAULT_TOL);
                all &= ok;
                let _ = writeln!(
                    text,
                    "{} {:<26} max_rel_err={:.3e} checked={}{}",
                    if ok { "PASS" } else { "FAIL" },
                    o.name,
                    o.report.max_rel_err,
                    o.report.checked,
                    if o.worst_param.is_empty() {
                        String::new()
                    } else {
                        format!(" worst={}", o.worst_param)
                    }
                );
            }
            let _ = writeln!(
                text,
                "{} (tolerance {DEFAULT_TOL:e}, step {DEFAULT_STEP:e})",
                if all {
                    "all checks passed"
                } else {
                    "gradient check FAILED"
                }
            );
            write(out, &text)?;
            if !all {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::DumpAttn {
            checkpoint,
            image,
            out: path,
        } => {
            let (_, model) = checkpoint::load(&checkpoint)?;
            let img = Image::read_pnm(&image)?;
            let text = dump_attention(&model, &img)?;
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
            write(
                out,
                &format!("wrote attention dump to {}\n", path.display()),
            )?;
        }
    }
    Ok(EXIT_OK)
}

fn train(args: &TrainArgs) -> Result<String> {
    let mut cfg = Config::load(&args.config)?;
    let overrides = [
        ("lambda", args.lambda.map(|v| v.to_string())),
        ("tau", args.tau.map(|v| v.to_string())),
        ("beta_pair", args.beta_pair.clone()),
        ("alpha_k", args.alpha_k.map(|v| v.to_string())),
        ("beta_k", args.beta_k.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("repeats", args.repeats.map(|v| v.to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    cfg.validate()?;
    let samples = load_dataset(&args.data, &cfg.model)?;
    let quiet = args.quiet;
    let run = run_protocol(&samples, &cfg, |r, e| {
        if !quiet {
            eprintln!(
                "repeat {r} epoch {} lr {:.1e} loss {:.5} l1 {:.5}",
                e.epoch, e.lr, e.mean_total, e.mean_l1
            );
        }
    })?;
    checkpoint::save(&args.out_checkpoint, &cfg, &run.model)?;
    let report = run.report.to_csv();
    if let Some(path) = &args.metrics {
        fs::write(path, &report).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

/// Text dump of every focus-attention call in one forward pass.
///
/// ```text
/// attention <label>
/// mask <m> keep <k>
/// weights <w_1> ... <w_n>
/// survivors <0|1> ... <0|1>
/// ```
///
/// One `attention` block per direction and head; dense attention appears
/// as a single mask keeping every key.
pub fn dump_attention(model: &crate::model::Csfiqa, image: &Image) -> Result<String> {
    let patches = model.prepare_image(image)?;
    let mut g = Graph::new(&model.params);
    g.trace = Some(Vec::new());
    let fwd = model.forward_image(&mut g, &patches)?;
    let score = g.value(fwd.y_hat).item();
    let mut text = format!("score {score}\n");
    for t in g.trace.take().unwrap_or_default() {
        let _ = writeln!(text, "attention {}", t.label);
        for (m, (w, keep)) in t.weights.iter().zip(&t.survivors).enumerate() {
            let kept = keep.iter().filter(|&&k| k).count();
            let _ = writeln!(text, "mask {m} keep {kept}");
            let ws: Vec<String> = w.data().iter().map(|v| v.to_string()).collect();
            let _ = writeln!(text, "weights {}", ws.join(" "));
            let ss: Vec<&str> = keep.iter().map(|&k| if k { "1" } else { "0" }).collect();
            let _ = writeln!(text, "survivors {}", ss.join(" "));
        }
    }
    Ok(text)
}

/// Entry point used by the binary.
pub fn main_exit_code() -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let code = run(std::env::args_os(), &mut lock);
    let _ = lock.flush();
    code
}
