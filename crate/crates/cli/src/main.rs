use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vsod_cli::ablate::{run_study, Study};
use vsod_cli::error::{EXIT_NUMERIC, EXIT_OK, EXIT_USAGE};
use vsod_cli::eval::{cmd_eval, cmd_infer};
use vsod_cli::gradcheck::{render, run_gradcheck};
use vsod_cli::train::cmd_train;
use vsod_cli::{Result, RunConfig, RunError};
use vsod_data::{generate_suite, SuiteSpec};

#[derive(Parser)]
#[command(name = "vsod", version, about = "Prompt-free RGB-D video salient object detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
        /// Fail unless the checkpoint's architecture matches this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write one mask per frame of a sequence.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seq: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients of every op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate each setting of one ablation axis.
    Ablate {
        /// topk, cliplen, feature-level, pseudo-depth or memory.
        #[arg(long)]
        study: String,
        #[arg(long)]
        config: PathBuf,
        /// Override the number of training steps per setting.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Render a synthetic train/val suite.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        val: usize,
        #[arg(long, default_value_t = 8)]
        length: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Train { config, resume, quiet } => {
            let config = RunConfig::load(&config)?;
            cmd_train(config, resume.as_deref(), quiet)?;
        }
        Command::Eval { ckpt, data, out, config } => {
            let expected = config.map(|p| RunConfig::load(&p)).transpose()?;
            let report = cmd_eval(&ckpt, &data, &out, expected.as_ref())?;
            print!("{}", report.table());
        }
        Command::Infer { ckpt, seq, out } => {
            let written = cmd_infer(&ckpt, &seq, &out)?;
            println!("wrote {} masks to {}", written.len(), out.display());
        }
        Command::Gradcheck { seed } => {
            let reports = run_gradcheck(seed)?;
            print!("{}", render(&reports));
            if !reports.iter().all(|r| r.passed()) {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Ablate { study, config, steps } => {
            let study: Study = study.parse().map_err(RunError::Usage)?;
            let mut config = RunConfig::load(&config)?;
            if let Some(steps) = steps {
                config.steps = steps;
            }
            let table = run_study(&config, study, |row| eprintln!("finished {}", row.label))?;
            print!("{}", table.render());
        }
        Command::Generate {
            out,
            train,
            val,
            length,
            size,
            seed,
        } => {
            let suite = SuiteSpec {
                train,
                val,
                length,
                size,
                seed,
            };
            generate_suite(&out, &suite)?;
            println!("wrote {train} train and {val} val sequences to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
