//! `tcmkd` — ingest vibration recordings, train baseline/teacher/student
//! models, transfer to a target domain and score anomalies.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Settings;

/// Bad invocation: reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "tcmkd", version, about = "Temporal cross-modal knowledge distillation for vibration fault diagnosis")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    Traw,
    Csv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Baseline,
    Teacher,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TransferMode {
    NoKd,
    Tcmkd,
}

#[derive(Subcommand)]
enum Command {
    /// Segment, split, normalise and window recordings into a dataset directory.
    Ingest {
        /// TRAW/CSV files, or directories containing them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Domain::Source)]
        domain: Domain,
        #[arg(long, value_enum, default_value_t = InputFormat::Traw)]
        format: InputFormat,
        /// Sample rate for CSV inputs.
        #[arg(long)]
        sample_rate: Option<u32>,
        /// Class label for CSV inputs.
        #[arg(long)]
        label: Option<usize>,
        /// Number of classes; inferred from labels when omitted.
        #[arg(long)]
        num_classes: Option<usize>,
    },
    /// Train a baseline (segment) or teacher (window) model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a student against a frozen teacher checkpoint.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        kd_weight: Option<f64>,
    },
    /// Embed a target dataset, optionally adapting a fresh student first.
    Transfer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: TransferMode,
        /// Source teacher (tcmkd mode).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Source student (no-kd mode).
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Adaptation epochs (tcmkd mode).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Mahalanobis anomaly scores against a reference embedding set.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        ridge: Option<f64>,
    },
    /// Summarise the runs under a directory.
    Report { run_dir: PathBuf },
    /// Generate synthetic temporal-context recordings as TRAW files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 10)]
        recordings_per_class: usize,
        #[arg(long, default_value_t = 32_768)]
        length: usize,
        /// Carrier multiplier; values other than 1 emulate a shifted domain.
        #[arg(long, default_value_t = 1.0)]
        carrier_shift: f64,
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value = "syn")]
        prefix: String,
    },
    /// Convert a header-row CSV recording to TRAW.
    Convert {
        input: PathBuf,
        output: PathBuf,
        #[arg(long)]
        sample_rate: u32,
        #[arg(long)]
        label: Option<usize>,
    },
}

fn resolve(global: &Global) -> anyhow::Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &global.config {
        s.apply_file(path)?;
    }
    s.apply_overrides(&global.set)?;
    if let Some(seed) = global.seed {
        s.seed = seed;
    }
    Ok(s)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut settings = resolve(&cli.global)?;
    let Some(command) = cli.command else {
        if cli.global.print_config {
            print!("{}", settings.render());
            return Ok(());
        }
        return Err(UsageError("no subcommand given (see --help)".into()).into());
    };
    // dedicated flags win over file and --set
    match &command {
        Command::Train { epochs: Some(e), .. } => settings.epochs = *e,
        Command::Distill { epochs, kd_weight, .. } => {
            if let Some(e) = epochs {
                settings.epochs = *e;
            }
            if let Some(k) = kd_weight {
                settings.kd_weight = *k;
            }
        }
        Command::Transfer { epochs: Some(e), .. } => settings.adapt_epochs = *e,
        Command::Score { quantile, ridge, .. } => {
            if let Some(q) = quantile {
                settings.quantile = *q;
            }
            if let Some(r) = ridge {
                settings.ridge = *r;
            }
        }
        _ => {}
    }
    if cli.global.print_config {
        print!("{}", settings.render());
        return Ok(());
    }
    match command {
        Command::Ingest {
            inputs,
            out,
            domain,
            format,
            sample_rate,
            label,
            num_classes,
        } => commands::ingest(&settings, &inputs, &out, domain, format, sample_rate, label, num_classes),
        Command::Train { data, model, out, .. } => commands::train(&settings, &data, model, &out),
        Command::Distill { data, teacher, out, .. } => commands::distill(&settings, &data, &teacher, &out),
        Command::Transfer {
            data,
            mode,
            teacher,
            student,
            out,
            ..
        } => commands::transfer(&settings, &data, mode, teacher.as_deref(), student.as_deref(), &out),
        Command::Score {
            embeddings,
            reference,
            out,
            ..
        } => commands::score(&settings, &embeddings, &reference, &out),
        Command::Report { run_dir } => commands::report(&run_dir),
        Command::Synth {
            out,
            classes,
            recordings_per_class,
            length,
            carrier_shift,
            noise,
            prefix,
        } => commands::synth(&settings, &out, classes, recordings_per_class, length, carrier_shift, noise, prefix),
        Command::Convert {
            input,
            output,
            sample_rate,
            label,
        } => commands::convert(&input, &output, sample_rate, label),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
