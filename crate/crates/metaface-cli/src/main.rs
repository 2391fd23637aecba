//! `metaface`: workbench for few-shot speaking-style adaptation.
//!
//! Commands share one flat configuration namespace. Values come from
//! defaults, then an optional `--config` file, then flags (flags win).
//! Exit codes: 0 success, 2 configuration error, 3 data or I/O error,
//! 4 numeric failure.

use std::fmt::Display;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use metaface_core::Error;

use metaface_cli::commands::{self, AdaptArgs, EvalArgs, EvalBaseline};
use metaface_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "metaface",
    version,
    about = "Few-shot speaking-style adaptation workbench"
)]
struct Cli {
    /// Flat key=value config file; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output root (default: $METAFACE_RUN_DIR, else ./runs).
    #[arg(long, global = true, value_name = "DIR")]
    run_dir: Option<PathBuf>,

    /// Corpus directory (default: <run dir>/corpus).
    #[arg(long, global = true, value_name = "DIR")]
    corpus_dir: Option<PathBuf>,

    /// Base seed; corpus, training, and evaluation randomness derive from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic speaking-style corpus.
    GenData {
        /// Number of speakers (at least 2).
        #[arg(long)]
        speakers: Option<usize>,
        /// Clips per speaker.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        t_min: Option<usize>,
        #[arg(long)]
        t_max: Option<usize>,
        #[arg(long)]
        feature_dim: Option<usize>,
        #[arg(long)]
        vertex_count: Option<usize>,
        #[arg(long)]
        frame_rate: Option<f64>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
    /// Meta-train an initialization on the training speakers.
    MetaTrain {
        #[arg(long)]
        outer_steps: Option<usize>,
        /// Meta-gradient order: second or first.
        #[arg(long)]
        order: Option<String>,
        #[arg(long)]
        inner_steps: Option<usize>,
        #[arg(long)]
        inner_lr: Option<f64>,
        #[arg(long)]
        outer_lr: Option<f64>,
        #[arg(long)]
        n_way: Option<usize>,
        /// Inner-loop scope: all or lora-only.
        #[arg(long)]
        scope: Option<String>,
        /// Enable the relation encoder: true or false.
        #[arg(long)]
        relation: Option<String>,
        /// Style-code source during training: query or support.
        #[arg(long)]
        z_source: Option<String>,
        /// Comma-separated held-out speakers (default: the last one).
        #[arg(long)]
        held_out: Option<String>,
    },
    /// Personalize a checkpoint to one held-out speaker.
    Adapt {
        /// Checkpoint to start from (default: <run dir>/checkpoint.bin).
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Held-out speaker, as an index or id like spk11.
        #[arg(long)]
        speaker: Option<String>,
        /// Adaptation clips to use.
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        adapt_steps: Option<usize>,
        /// Adaptation scope: all or lora-only.
        #[arg(long)]
        scope: Option<String>,
        /// Where to write the delta checkpoint.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on a held-out speaker's evaluation clips.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Delta checkpoint from `adapt` to apply first.
        #[arg(long, value_name = "FILE")]
        delta: Option<PathBuf>,
        #[arg(long)]
        speaker: Option<String>,
        /// Adaptation clips reserved before evaluation.
        #[arg(long)]
        clips: Option<usize>,
        /// Evaluate a reference instead: none, zero, or oracle.
        #[arg(long, default_value = "none")]
        baseline: String,
    },
    /// Train and score the ablation matrix plus the clip-count sweep.
    Ablate {
        #[arg(long)]
        outer_steps: Option<usize>,
        /// Seeds per cell.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        adapt_steps: Option<usize>,
        #[arg(long)]
        held_out: Option<String>,
        #[arg(long)]
        order: Option<String>,
    },
    /// Summarize a run directory and export plot-ready tables.
    Report,
}

fn push<T: Display>(overrides: &mut Vec<(&'static str, String)>, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        overrides.push((key, v.to_string()));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Sizing(_) => 2,
        Error::Corpus(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::ShapeMismatch { .. }
        | Error::NonFinite { .. }
        | Error::NonScalarOutput { .. }
        | Error::UnknownVar(_)
        | Error::Numeric { .. } => 4,
    }
}

fn run(cli: &Cli) -> metaface_core::Result<()> {
    let mut o: Vec<(&'static str, String)> = Vec::new();
    if let Some(dir) = &cli.run_dir {
        o.push(("run_dir", dir.display().to_string()));
    }
    if let Some(dir) = &cli.corpus_dir {
        o.push(("corpus_dir", dir.display().to_string()));
    }
    push(&mut o, "seed", &cli.seed);

    match &cli.command {
        Command::GenData {
            speakers,
            clips,
            t_min,
            t_max,
            feature_dim,
            vertex_count,
            frame_rate,
            noise_std,
        } => {
            push(&mut o, "speakers", speakers);
            push(&mut o, "clips", clips);
            push(&mut o, "t_min", t_min);
            push(&mut o, "t_max", t_max);
            push(&mut o, "feature_dim", feature_dim);
            push(&mut o, "vertex_count", vertex_count);
            push(&mut o, "frame_rate", frame_rate);
            push(&mut o, "noise_std", noise_std);
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::gen_data(&cfg)
        }
        Command::MetaTrain {
            outer_steps,
            order,
            inner_steps,
            inner_lr,
            outer_lr,
            n_way,
            scope,
            relation,
            z_source,
            held_out,
        } => {
            push(&mut o, "outer_steps", outer_steps);
            push(&mut o, "order", order);
            push(&mut o, "inner_steps", inner_steps);
            push(&mut o, "inner_lr", inner_lr);
            push(&mut o, "outer_lr", outer_lr);
            push(&mut o, "n_way", n_way);
            push(&mut o, "adapt_scope", scope);
            push(&mut o, "use_relation", relation);
            push(&mut o, "z_source", z_source);
            push(&mut o, "held_out", held_out);
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::run_meta_train(&cfg)
        }
        Command::Adapt {
            checkpoint,
            speaker,
            clips,
            adapt_steps,
            scope,
            out,
        } => {
            push(&mut o, "adapt_clips", clips);
            push(&mut o, "adapt_steps", adapt_steps);
            push(&mut o, "adapt_scope", scope);
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::run_adapt(
                &cfg,
                &AdaptArgs {
                    checkpoint: checkpoint.as_deref(),
                    speaker: speaker.as_deref(),
                    out: out.as_deref(),
                },
            )
        }
        Command::Eval {
            checkpoint,
            delta,
            speaker,
            clips,
            baseline,
        } => {
            push(&mut o, "adapt_clips", clips);
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::run_eval(
                &cfg,
                &EvalArgs {
                    checkpoint: checkpoint.as_deref(),
                    delta: delta.as_deref(),
                    speaker: speaker.as_deref(),
                    baseline: EvalBaseline::parse(baseline)?,
                },
            )
        }
        Command::Ablate {
            outer_steps,
            seeds,
            adapt_steps,
            held_out,
            order,
        } => {
            push(&mut o, "outer_steps", outer_steps);
            push(&mut o, "ablate_seeds", seeds);
            push(&mut o, "adapt_steps", adapt_steps);
            push(&mut o, "held_out", held_out);
            push(&mut o, "order", order);
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::run_ablate(&cfg)
        }
        Command::Report => {
            let cfg = RunConfig::from_sources(cli.config.as_deref(), &o)?;
            commands::run_report(&cfg)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
