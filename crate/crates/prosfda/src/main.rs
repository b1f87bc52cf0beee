//! Command-line driver for the adaptation pipeline.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 data/checkpoint/compute
//! error (including a failed gradient check).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prosfda::config::RunConfig;
use prosfda::data::{generate_domain, save_dataset, DomainSpec};
use prosfda::error::Error;
use prosfda::gradcheck;
use prosfda::train::{run_adapt, run_eval, run_pretrain, state_path_for, RunLog};

#[derive(Parser)]
#[command(
    name = "prosfda",
    about = "Prototype-guided source-free domain adaptation for pixel classifiers",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired source/target dataset from a domain spec file.
    #[command(name = "gen-data")]
    GenData {
        /// Domain spec (key = value text).
        spec_file: PathBuf,
        /// Output prefix; writes <prefix>.src.bin and <prefix>.tgt.bin.
        out_prefix: String,
    },
    /// Stage 1: supervised source pretraining from a run config.
    Pretrain {
        config: PathBuf,
    },
    /// Stage 2: source-free adaptation on the unlabeled target set.
    Adapt {
        config: PathBuf,
        /// Resume from a saved run-state bundle instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a model checkpoint on a dataset: per-class IoU + overall.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        /// Emit CSV instead of the aligned text table.
        #[arg(long)]
        csv: bool,
    },
    /// Run the finite-difference gradient verification suite.
    Gradcheck {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Random instances per check family.
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
    },
    /// Dump a run log as CSV (loss and case-fraction curves).
    Report {
        runlog: PathBuf,
    },
    /// Write the default benchmark domain spec and run config into a
    /// directory, ready for gen-data / pretrain / adapt / eval.
    Init {
        dir: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints help/version through the error path too.
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

/// Writes to stdout, exiting quietly if the reader closed the pipe
/// (e.g. `prosfda report ... | head`).
macro_rules! emit {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if write!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

macro_rules! emitln {
    ($($arg:tt)*) => {{
        use std::io::Write;
        if writeln!(std::io::stdout(), $($arg)*).is_err() {
            std::process::exit(0);
        }
    }};
}

fn run(cli: Cli) -> prosfda::Result<ExitCode> {
    match cli.command {
        Command::GenData { spec_file, out_prefix } => {
            let spec = DomainSpec::load(&spec_file)?;
            let src_path = PathBuf::from(format!("{out_prefix}.src.bin"));
            let tgt_path = PathBuf::from(format!("{out_prefix}.tgt.bin"));
            let source = generate_domain(&spec, false)?;
            save_dataset(&src_path, &source)?;
            let target = generate_domain(&spec, true)?;
            save_dataset(&tgt_path, &target)?;
            emitln!(
                "wrote {} and {} ({} images each, {}x{}, {} classes)",
                src_path.display(),
                tgt_path.display(),
                spec.num_images,
                spec.height,
                spec.width,
                spec.num_classes
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Pretrain { config } => {
            let config = RunConfig::load(&config)?;
            let report = run_pretrain(&config)?;
            emitln!("source checkpoint written to {}", config.source_checkpoint.display());
            emitln!("source-domain training IoU:");
            emit!("{}", report.text_table());
            Ok(ExitCode::SUCCESS)
        }
        Command::Adapt { config, resume } => {
            let config = RunConfig::load(&config)?;
            let (state, log) = run_adapt(&config, resume.as_deref())?;
            emitln!(
                "adapted checkpoint written to {} ({} steps)",
                config.adapted_checkpoint.display(),
                state.step
            );
            emitln!("resumable state: {}", state_path_for(&config.adapted_checkpoint).display());
            emitln!("run log: {} ({} records)", config.runlog.display(), log.records.len());
            if let Some(last) = log.records.last() {
                emitln!(
                    "final step: loss_st {:.6}, loss_contrast {:.6}, agree {:.3}",
                    last.loss_st, last.loss_contrast, last.frac_agree
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { checkpoint, dataset, csv } => {
            let report = run_eval(&checkpoint, &dataset)?;
            if csv {
                emit!("{}", report.to_csv());
            } else {
                emit!("{}", report.text_table());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck { seed, instances } => {
            if instances == 0 {
                return Err(Error::InvalidArgument("--instances must be >= 1".into()));
            }
            let results = gradcheck::run_suite(seed, instances)?;
            let mut all_ok = true;
            for r in &results {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                emitln!(
                    "{:<28} instances {:>3}  max_rel_err {:>12.3e}  tol {:.1e}  {status}",
                    r.name, r.instances, r.max_rel_err, r.tolerance
                );
                all_ok &= r.passed();
            }
            if all_ok {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Format("gradient check failed".into()))
            }
        }
        Command::Report { runlog } => {
            let log = RunLog::load(&runlog)?;
            emit!("{}", log.to_csv());
            Ok(ExitCode::SUCCESS)
        }
        Command::Init { dir } => {
            std::fs::create_dir_all(&dir)?;
            let domain = DomainSpec::default_benchmark();
            let domain_path = dir.join("benchmark.domain");
            domain.save(&domain_path)?;
            let config = RunConfig::default_benchmark(&dir);
            let config_path = dir.join("run.config");
            config.save(&config_path)?;
            emitln!("wrote {}", domain_path.display());
            emitln!("wrote {}", config_path.display());
            emitln!("next: prosfda gen-data {} {}", domain_path.display(), dir.join("bench").display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
