//! `eyetrack`: the calibration-and-evaluation pipeline as subcommands.
//!
//! Every run prints exactly one JSON record on stdout: the [`RunRecord`] on
//! success, or an [`ErrorRecord`] (exit code 1, or 2 for usage errors).

mod commands;
mod config;
mod record;
mod svg;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;
use record::{ErrorRecord, RunRecord};

#[derive(Parser, Debug)]
#[command(name = "eyetrack", version, about = "Metric head pose, gaze training and few-shot calibration")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set stage1.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Also write the run record here.
    #[arg(long, global = true)]
    record: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset and write its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve the metric head translation of every frame.
    Pose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage-1 training of encoder, decoder and gaze head.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// First-order meta-training of the gaze head on frozen embeddings.
    Metatrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Embedding cache, created if missing or stale.
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Personalize a gaze head to one user's calibration frames.
    Adapt {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Meta-trained head; defaults to the model's own head.
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        user: String,
        /// Calibration frames to use (default: `meta.k`).
        #[arg(long)]
        k: Option<usize>,
        /// Index of the first calibration frame among the user's open-eye frames.
        #[arg(long, default_value_t = 0)]
        from: usize,
        /// Grow the support of this personalized head instead of starting over.
        #[arg(long)]
        append: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Per-user point-of-gaze and depth errors, blink-gated.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Meta or personalized head; defaults to the model's own head.
        #[arg(long)]
        head: Option<PathBuf>,
        /// Translations from `pose`, used instead of re-solving.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        cache: Option<PathBuf>,
    },
    /// Parameter count, FLOPs and single-sample latency.
    Bench {
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot a CSV column as an SVG chart.
    Report {
        #[arg(long, required = true, num_args = 1..)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        x: String,
        #[arg(long, required = true, num_args = 1..)]
        y: Vec<String>,
        /// Keep only rows where `column=value`; repeatable.
        #[arg(long)]
        filter: Vec<String>,
        #[arg(long, value_enum, default_value_t = svg::ChartKind::Line)]
        kind: svg::ChartKind,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pose { .. } => "pose",
            Command::Pretrain { .. } => "pretrain",
            Command::Metatrain { .. } => "metatrain",
            Command::Adapt { .. } => "adapt",
            Command::Eval { .. } => "eval",
            Command::Bench { .. } => "bench",
            Command::Report { .. } => "report",
        }
    }

    /// Directory that receives `run.json`, for commands that write one.
    fn out_dir(&self) -> Option<&PathBuf> {
        match self {
            Command::Synth { out } | Command::Pretrain { out, .. } | Command::Metatrain { out, .. } | Command::Eval { out, .. } => {
                Some(out)
            }
            _ => None,
        }
    }
}

/// Writes one line to stdout; a closed pipe is not an error.
fn print_line(line: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{line}");
}

fn emit_error(command: &str, kind: &'static str, err: &anyhow::Error, partial: Vec<String>) {
    let rec = ErrorRecord {
        command: command.to_string(),
        kind,
        message: err.to_string(),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
        partial_outputs: partial,
    };
    print_line(&serde_json::to_string(&serde_json::json!({ "error": rec })).expect("error record serializes"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            emit_error("", "usage", &anyhow::anyhow!(e.render().to_string().trim().to_string()), Vec::new());
            return ExitCode::from(2);
        }
    };
    let name = cli.command.name();
    let config = match Config::load(cli.common.config.as_deref(), &cli.common.overrides) {
        Ok(c) => c,
        Err(e) => {
            emit_error(name, "config", &e, Vec::new());
            return ExitCode::from(2);
        }
    };
    let mut record = RunRecord::new(name, &config);
    if let Some(p) = &cli.common.config {
        let _ = record.input(p);
    }
    let result = match &cli.command {
        Command::Synth { out } => commands::synth(&config, out, &mut record),
        Command::Pose { data, out } => commands::pose(&config, data, out, &mut record),
        Command::Pretrain { data, out } => commands::pretrain(&config, data, out, &mut record),
        Command::Metatrain { data, model, out, cache } => {
            commands::metatrain(&config, data, model, out, cache.as_deref(), &mut record)
        }
        Command::Adapt { data, model, head, user, k, from, append, out, cache } => commands::adapt(
            &config,
            &commands::AdaptArgs {
                data,
                model,
                head: head.as_deref(),
                user,
                k: k.unwrap_or(config.meta.k),
                from: *from,
                append: append.as_deref(),
                out,
                cache: cache.as_deref(),
            },
            &mut record,
        ),
        Command::Eval { data, model, head, poses, out, cache } => commands::eval(
            &config,
            &commands::EvalArgs {
                data,
                model: model.as_deref(),
                head: head.as_deref(),
                poses: poses.as_deref(),
                out,
                cache: cache.as_deref(),
            },
            &mut record,
        ),
        Command::Bench { out } => commands::bench(&config, out, &mut record),
        Command::Report { csv, x, y, filter, kind, title, out } => commands::report(
            &commands::ReportArgs { csv, x, y, filter, kind: *kind, title, out },
            &mut record,
        ),
    };
    if let Err(e) = result {
        emit_error(name, "runtime", &e, record.outputs.keys().cloned().collect());
        return ExitCode::from(1);
    }
    let json = serde_json::to_string_pretty(&record).expect("run record serializes");
    let mut targets: Vec<PathBuf> = cli.command.out_dir().map(|d| d.join("run.json")).into_iter().collect();
    targets.extend(cli.common.record.clone());
    for t in targets {
        if let Err(e) = std::fs::write(&t, &json) {
            emit_error(name, "io", &anyhow::anyhow!("writing {}: {e}", t.display()), record.outputs.keys().cloned().collect());
            return ExitCode::from(1);
        }
    }
    print_line(&serde_json::to_string(&record).expect("run record serializes"));
    ExitCode::SUCCESS
}
