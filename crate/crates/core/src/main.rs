//! `guidance-lab` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use guidance_lab::mixture::Preset;
use guidance_lab::runner::config::{key_help, Config};
use guidance_lab::runner::{self, manifest, RunnerError};

#[derive(Parser, Debug)]
#[command(name = "guidance-lab", version, about = "Weak-to-strong guidance laboratory on 2D toy mixtures")]
#[command(after_help = key_help())]
struct Cli {
    /// Verify the digests recorded in a run manifest and exit.
    #[arg(long, value_name = "MANIFEST")]
    check: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines (a run manifest also works).
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Master seed (`seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw ground-truth points as CSV (x, y, class).
    Dataset {
        #[command(flatten)]
        common: Common,
        /// Toy regime (`data.preset`).
        #[arg(long)]
        preset: Option<String>,
        /// Number of points (`data.n`).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the mixture spec text here.
        #[arg(long)]
        spec_out: Option<PathBuf>,
    },
    /// Train a velocity net; writes strong.bin, weak.bin (ag), train_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        /// Mixture spec file; defaults to the preset geometry.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// `train.variant`.
        #[arg(long)]
        variant: Option<String>,
        /// `train.w`.
        #[arg(long)]
        w: Option<f64>,
        /// `train.iters`.
        #[arg(long)]
        iters: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample with guidance; writes CSV (x, y, class, guidance_label) and an SVG.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Strong checkpoint; omit to sample the exact mixture oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Weak checkpoint for ag and sgg.
        #[arg(long)]
        weak: Option<PathBuf>,
        /// `guidance.kind`.
        #[arg(long)]
        guidance: Option<String>,
        /// `guidance.w`.
        #[arg(long)]
        w: Option<f64>,
        /// `sampler.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Prompt every chain with the null condition.
        #[arg(long)]
        unconditional: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a sample CSV against a mixture spec.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guided-velocity error against the oracle per t.
    ErrorCurve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        weak: Option<PathBuf>,
        /// `error.n_states`.
        #[arg(long)]
        n_states: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate one guidance kind over a grid of scales.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        weak: Option<PathBuf>,
        #[arg(long)]
        guidance: Option<String>,
        /// `sweep.ws`, comma separated.
        #[arg(long)]
        ws: Option<String>,
        #[arg(long)]
        unconditional: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// End-to-end reproduction of one toy regime.
    Repro {
        #[command(flatten)]
        common: Common,
        /// A, B or C.
        preset: String,
        /// Output directory (default `repro_<preset>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(
    common: &Common,
    layer: &[(&str, String)],
    flags: Vec<(&str, Option<String>)>,
) -> Result<Config, RunnerError> {
    let mut cli = Vec::new();
    for s in &common.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| RunnerError::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        cli.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        cli.push(("seed".into(), seed.to_string()));
    }
    cli.extend(flags.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v))));
    Config::resolve(layer, common.config.as_deref(), std::env::vars(), &cli)
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

fn run(cli: Cli) -> Result<String, RunnerError> {
    if let Some(path) = &cli.check {
        let n = manifest::check_file(path)?;
        return Ok(format!("{}: {n} digests match", path.display()));
    }
    let Some(cmd) = cli.command else {
        return Err(RunnerError::Config("no subcommand given (see --help)".into()));
    };
    let done = |p: PathBuf| format!("wrote {}", p.display());
    match cmd {
        Command::Dataset { common, preset, n, out, spec_out } => {
            let cfg = resolve(&common, &[], vec![("data.preset", preset), ("data.n", s(&n))])?;
            runner::cmd_dataset(&cfg, &out, spec_out.as_deref()).map(done)
        }
        Command::Train { common, preset, spec, variant, w, iters, out } => {
            let cfg = resolve(
                &common,
                &[],
                vec![("data.preset", preset), ("train.variant", variant), ("train.w", s(&w)), ("train.iters", s(&iters))],
            )?;
            runner::cmd_train(&cfg, spec.as_deref(), &out).map(done)
        }
        Command::Sample { common, preset, spec, checkpoint, weak, guidance, w, n, unconditional, out } => {
            let cfg = resolve(
                &common,
                &[],
                vec![("data.preset", preset), ("guidance.kind", guidance), ("guidance.w", s(&w)), ("sampler.n", s(&n))],
            )?;
            runner::cmd_sample(&cfg, spec.as_deref(), checkpoint.as_deref(), weak.as_deref(), unconditional, &out)
                .map(done)
        }
        Command::Eval { common, preset, spec, samples, out } => {
            let cfg = resolve(&common, &[], vec![("data.preset", preset)])?;
            let (m, report) = runner::cmd_eval(&cfg, spec.as_deref(), &samples, &out)?;
            Ok(format!("{}{}", report.pretty(), done(m)))
        }
        Command::ErrorCurve { common, preset, spec, checkpoint, weak, n_states, out } => {
            let cfg = resolve(&common, &[], vec![("data.preset", preset), ("error.n_states", s(&n_states))])?;
            runner::cmd_error_curve(&cfg, spec.as_deref(), &checkpoint, weak.as_deref(), &out).map(done)
        }
        Command::Sweep { common, preset, spec, checkpoint, weak, guidance, ws, unconditional, out } => {
            let cfg =
                resolve(&common, &[], vec![("data.preset", preset), ("guidance.kind", guidance), ("sweep.ws", ws)])?;
            runner::cmd_sweep(&cfg, spec.as_deref(), checkpoint.as_deref(), weak.as_deref(), unconditional, &out)
                .map(done)
        }
        Command::Repro { common, preset, out } => {
            let p: Preset = preset.parse()?;
            let cfg = resolve(&common, &runner::repro_layer(p), vec![])?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("repro_{p}")));
            runner::cmd_repro(&cfg, &out).map(done)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
