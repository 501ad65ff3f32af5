use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sta::gateway::classifier::MemorizingClassifier;
use sta::gateway::mock::MockBackend;
use sta::gateway::protocol::serve;
use sta::runner::{ExperimentConfig, FamilyChoice, Overrides, Runner};
use sta::Result;

#[derive(Parser)]
#[command(name = "sta", version, about = "Self-controlled text augmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `mock` or `external:<command>`.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Convert the training data into prompt pairs.
    Convert {
        #[command(flatten)]
        common: Common,
        /// `full` or `two-prompt`.
        #[arg(long)]
        family: Option<FamilyChoice>,
    },
    /// Fine-tune the generator on the converted pairs.
    Finetune {
        #[command(flatten)]
        common: Common,
    },
    /// Generate and select augmentation data for every configured method.
    Augment {
        #[command(flatten)]
        common: Common,
    },
    /// Train classifiers on existing augmentation outputs and write reports.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
    /// All stages end to end; resumes from existing stage outputs.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the mock backend over the adapter protocol on stdin/stdout.
    #[command(hide = true)]
    ServeMock,
}

fn runner(common: &Common, family: Option<FamilyChoice>, needs_eval: bool) -> Result<Runner> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    Overrides::from_env().apply(&mut cfg);
    Overrides {
        out: common.out.clone(),
        backend: common.backend.clone(),
        seed: common.seed,
        family,
        ..Default::default()
    }
    .apply(&mut cfg);
    Runner::new(cfg, needs_eval)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { common, family } => {
            let summary = runner(&common, family, false)?.convert()?;
            for (t, n) in &summary.counts {
                println!("{t}\t{n}");
            }
            for (t, n) in &summary.skipped {
                println!("{t}\tskipped {n}");
            }
            println!("total\t{}", summary.total());
        }
        Command::Finetune { common } => {
            for fp in runner(&common, None, false)?.finetune()? {
                println!("{fp}");
            }
        }
        Command::Augment { common } => {
            for path in runner(&common, None, false)?.augment()? {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { common } => {
            let r = runner(&common, None, true)?;
            r.evaluate()?;
            print!("{}", std::fs::read_to_string(r.out_dir().join("report.txt")).unwrap_or_default());
        }
        Command::Pipeline { common } => {
            let r = runner(&common, None, true)?;
            r.pipeline()?;
            print!("{}", std::fs::read_to_string(r.out_dir().join("report.txt")).unwrap_or_default());
        }
        Command::ServeMock => {
            let stdin = io::stdin();
            serve(stdin.lock(), io::stdout().lock(), &MockBackend::new(), &MemorizingClassifier)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
