use clap::{Parser, Subcommand};
use flowlab_cli::commands::{
    cmd_gradcheck, cmd_sample, cmd_train_dpo, cmd_train_fm, cmd_train_grpo_from, SampleMode,
};
use flowlab_core::config::RunConfig;
use flowlab_core::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

/// Desk-scale rectified-flow experiments: flow-matching training, ODE/SDE
/// sampling, preference optimization, and gradient audits.
#[derive(Parser)]
#[command(name = "flowlab", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a velocity model with the flow-matching objective.
    TrainFm {
        #[command(flatten)]
        common: Common,
    },
    /// Sample generations from a trained checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to sample from.
        #[arg(long)]
        ckpt: PathBuf,
        /// Deterministic ODE or stochastic SDE rollout.
        #[arg(long, value_enum, default_value = "ode")]
        mode: SampleMode,
        /// Number of samples.
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Preference-optimize a checkpoint against a JSON-lines pairs file.
    TrainDpo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// JSON-lines file of {prompt, win, lose} records.
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Group-relative policy optimization from a frozen reference checkpoint.
    TrainGrpo {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Audit analytic gradients of all three losses with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negative control: perturb analytic gradients by this amount.
        #[arg(long, default_value_t = 0.0, hide = true)]
        corrupt: f64,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::TrainFm { common } => {
            let cfg = common.load()?;
            let ckpt = cmd_train_fm(&cfg)?;
            println!("checkpoint written to {}", ckpt.display());
            Ok(0)
        }
        Cmd::Sample {
            common,
            ckpt,
            mode,
            n,
        } => {
            let cfg = common.load()?;
            let summary = cmd_sample(&cfg, &ckpt, mode, n)?;
            match summary.mean_reward {
                Some(r) => println!("{} samples, mean reward {r:.4}", summary.n),
                None => println!("{} samples", summary.n),
            }
            Ok(0)
        }
        Cmd::TrainDpo {
            common,
            ckpt,
            pairs,
        } => {
            let cfg = common.load()?;
            let out = cmd_train_dpo(&cfg, &ckpt, &pairs)?;
            println!("checkpoint written to {}", out.display());
            Ok(0)
        }
        Cmd::TrainGrpo { common, ckpt } => {
            let cfg = common.load()?;
            let out = cmd_train_grpo_from(&cfg, &ckpt)?;
            println!("checkpoint written to {}", out.display());
            Ok(0)
        }
        Cmd::Gradcheck { common, corrupt } => {
            let cfg = common.load()?;
            let report = cmd_gradcheck(&cfg, corrupt)?;
            println!(
                "fm {:.3e}  dpo {:.3e}  grpo {:.3e}  (threshold {:.0e})",
                report.fm, report.dpo, report.grpo, report.threshold
            );
            if report.pass {
                Ok(0)
            } else {
                eprintln!("gradient check failed");
                Ok(3)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
