//! `advnas`: search, train, attack, evaluate and report from the command line.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage or configuration error,
//! 3 data error (missing or malformed inputs), 4 numeric divergence.
//!
//! Output directory layout:
//!
//! ```text
//! <out>/config.resolved.toml     every run
//! <out>/report.txt, report.json  every run
//! <out>/metrics.csv              search: one row per epoch
//! <out>/genotypes/epoch_NNN.txt  search: genotype after epoch NNN
//! <out>/genotype_final.txt       search
//! <out>/curves.csv               train: one row per epoch
//! <out>/checkpoints/last.ckpt    train: rewritten after every epoch
//! ```

use std::ffi::OsString;
use std::path::PathBuf;

use advnas_core::attack::AttackKind;
use advnas_core::{Error, ErrorCategory};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
pub mod report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "advnas", version, about = "Adversarially robust differentiable architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub(crate) struct Common {
    /// TOML experiment config; built-in desk-scale defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for search and training (sets search.seed and train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override any config field, e.g. `--set search.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub(crate) enum Kind {
    Fgsm,
    Pgd,
}

/// Attack settings; unset fields come from `train.attack`.
#[derive(Debug, Clone, Args)]
pub(crate) struct AttackArgs {
    #[arg(long, value_enum)]
    kind: Option<Kind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    attack_seed: Option<u64>,
}

impl AttackArgs {
    fn apply(&self, mut a: advnas_core::attack::AttackConfig) -> advnas_core::attack::AttackConfig {
        if let Some(k) = self.kind {
            a.kind = match k {
                Kind::Fgsm => AttackKind::Fgsm,
                Kind::Pgd => AttackKind::Pgd,
            };
            if a.kind == AttackKind::Fgsm {
                a.steps = 1;
                a.random_init = false;
            }
        }
        if let Some(e) = self.epsilon {
            a.epsilon = e;
        }
        if let Some(s) = self.step_size {
            a.step_size = s;
        }
        if let Some(n) = self.steps {
            a.steps = n;
        }
        if let Some(s) = self.attack_seed {
            a.seed = s;
        }
        a
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the two-stage architecture search on the training split.
    Search {
        #[command(flatten)]
        common: Common,
    },
    /// Adversarially train the network described by a genotype file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        genotype: PathBuf,
        /// Continue from <out>/checkpoints/last.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// White-box accuracy of a checkpoint under one attack.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Natural accuracy and every `evaluation.attacks` entry for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Craft examples against `--source` and evaluate `--target` on them.
    Transfer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Re-render the report of an earlier search or train run.
    Report {
        /// Output directory of the earlier run.
        #[arg(long)]
        run: PathBuf,
        /// Also write report.txt and report.json here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => EXIT_USAGE,
        ErrorCategory::Data => EXIT_DATA,
        ErrorCategory::Divergence => EXIT_DIVERGENCE,
        ErrorCategory::Other => EXIT_OTHER,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Search { common } => commands::search(&common),
        Command::Train {
            common,
            genotype,
            resume,
        } => commands::train(&common, &genotype, resume),
        Command::Attack {
            common,
            checkpoint,
            attack,
        } => commands::attack(&common, &checkpoint, &attack),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::Transfer {
            common,
            source,
            target,
            attack,
        } => commands::transfer(&common, &source, &target, &attack),
        Command::Report { run, out } => commands::report(&run, out.as_deref()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
