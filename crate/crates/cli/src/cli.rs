//! Argument definitions and dispatch.

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};
use qpmil_core::data::DatasetOrder;
use qpmil_core::eval::Method;

use crate::commands::{cmd_ablate, cmd_eval, cmd_generate, cmd_sweep, cmd_train, Preset, Variant};
use crate::config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "qpmil", version, about = "Incremental bag classification with a queryable prototype pool")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by the commands that read a run configuration.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long, env = "QPMIL_CONFIG")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, env = "QPMIL_SEED")]
    pub seed: Option<u64>,
    #[arg(long, env = "QPMIL_OUT")]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `generate`; without it data is generated in memory.
    #[arg(long, env = "QPMIL_DATA")]
    pub data: Option<PathBuf>,
    #[arg(long, env = "QPMIL_ORDER", value_enum)]
    pub order: Option<OrderArg>,
    /// Folds run in parallel on this many threads.
    #[arg(long, env = "QPMIL_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, env = "QPMIL_FOLDS")]
    pub folds: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Train one run on the stored train/test split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "QPMIL_MODE", value_enum)]
        mode: Option<ModeArg>,
    },
    /// Evaluate a trained run directory.
    Eval {
        run: PathBuf,
        /// Also write the task-incremental (masked) matrix.
        #[arg(long)]
        masked: bool,
        /// Where to write metrics; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validate the ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Subset of variants; all when omitted.
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
    },
    /// Cross-validate a grid of pool shapes; resumes from an existing sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Pool sizes, comma separated; replaces the config grid.
        #[arg(long, value_delimiter = ',')]
        size: Vec<usize>,
        /// Keys matched per bag, comma separated.
        #[arg(long, value_delimiter = ',')]
        top_n: Vec<usize>,
        /// Prompt lengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        prompt_len: Vec<usize>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum OrderArg {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Qpmil,
    Joint,
    Finetune,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PresetArg {
    Tcga,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Finetune,
    Pool,
    PoolTv,
    PoolTvCe,
    Full,
    NoKey,
    NoPenalty,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Finetune => Variant::Finetune,
            VariantArg::Pool => Variant::Pool,
            VariantArg::PoolTv => Variant::PoolTv,
            VariantArg::PoolTvCe => Variant::PoolTvCe,
            VariantArg::Full => Variant::Full,
            VariantArg::NoKey => Variant::NoKey,
            VariantArg::NoPenalty => Variant::NoPenalty,
        }
    }
}

impl Common {
    fn load(&self, mode: Option<ModeArg>) -> Result<RunConfig> {
        let overrides = Overrides {
            seed: self.seed,
            mode: mode.map(|m| match m {
                ModeArg::Qpmil => Method::Qpmil,
                ModeArg::Joint => Method::Joint,
                ModeArg::Finetune => Method::Finetune,
            }),
            order: self.order.map(|o| match o {
                OrderArg::Forward => DatasetOrder::Forward,
                OrderArg::Reverse => DatasetOrder::Reverse,
            }),
            folds: self.folds,
            workers: self.workers,
            data: self.data.clone(),
            out: self.out.clone(),
        };
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Executes a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, preset } => {
            let dir = cmd_generate(&common.load(None)?, preset.map(|PresetArg::Tcga| Preset::Tcga))?;
            println!("{}", dir.display());
        }
        Command::Train { common, mode } => {
            let dir = cmd_train(&common.load(mode)?)?;
            println!("{}", dir.display());
        }
        Command::Eval { run, masked, out } => {
            let r = cmd_eval(&run, masked, out.as_deref())?;
            let opt = |s: Option<qpmil_core::eval::Summary>| s.map_or("-".to_string(), |s| format!("{:.4}", s.mean));
            print!("ACC {:.4}  ratio {}  forgetting {}  BWT {}", r.acc.mean, opt(r.upper_bound_ratio), opt(r.forgetting), opt(r.bwt));
            if masked {
                print!("  masked ACC {:.4}", r.masked_acc.mean);
            }
            println!();
        }
        Command::Ablate { common, variants } => {
            let config = common.load(None)?;
            let variants: Vec<Variant> = variants.into_iter().map(Variant::from).collect();
            println!("{:<12} {:>8} {:>8} {:>11} {:>8}", "variant", "ACC", "std", "forgetting", "std");
            for (v, r) in cmd_ablate(&config, &variants)? {
                let (f, fs) = r.forgetting.map_or((f64::NAN, f64::NAN), |s| (s.mean, s.std));
                println!("{:<12} {:>8.4} {:>8.4} {:>11.4} {:>8.4}", v.name(), r.acc.mean, r.acc.std, f, fs);
            }
        }
        Command::Sweep { common, size, top_n, prompt_len } => {
            let mut config = common.load(None)?;
            for (target, given) in [(&mut config.sweep.size, size), (&mut config.sweep.top_n, top_n), (&mut config.sweep.prompt_len, prompt_len)] {
                if !given.is_empty() {
                    *target = given;
                }
            }
            let path = cmd_sweep(&config)?;
            print!("{}", std::fs::read_to_string(path)?);
        }
    }
    Ok(())
}
