use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use paser_core::pipeline::{
    eval, finetune_stage, finetune_tvd_stage, gen_data, pretrain, train_rl_stage, write_report, ExperimentConfig,
    Stage, METHODS,
};
use paser_core::tensorkit::Scalar;
use paser_core::{Error, Result};

#[derive(Parser)]
#[command(name = "paser", version, about = "Cost-aware patch routing among segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits.
    GenData(Common),
    /// Pretrain every segmentation model.
    Pretrain(Common),
    /// Train the routing policy on the frozen models.
    TrainRl(Common),
    /// Jointly fine-tune the large models and the policy.
    Finetune(Common),
    /// Raise λ until routing drifts past the TVD threshold.
    FinetuneTvd(Common),
    /// Evaluate one inference method on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "paser")]
        method: String,
    },
    /// Summarize the reports of one or more runs.
    Report {
        /// Run directories (or report directories).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// `key=value`, applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn print_warnings(st: &Stage<'_>) {
    for w in &st.warnings {
        eprintln!("warning: {w}");
    }
}

fn run_stage<T: Scalar>(command: &Command) -> Result<()> {
    let (common, method) = match command {
        Command::Report { runs, out } => {
            print!("{}", write_report(runs, out)?);
            return Ok(());
        }
        Command::Eval { common, method } => (common, Some(method.as_str())),
        Command::GenData(c)
        | Command::Pretrain(c)
        | Command::TrainRl(c)
        | Command::Finetune(c)
        | Command::FinetuneTvd(c) => (c, None),
    };
    let cfg = common.config()?;
    let mut st = Stage::new(&cfg, &common.out);
    match command {
        Command::GenData(_) => {
            for (name, n) in gen_data(&mut st)? {
                println!("{name}: {n}");
            }
            let path = common.out.join("config.txt");
            std::fs::write(&path, cfg.to_text()).map_err(|source| Error::Io { path: path.clone(), source })?;
        }
        Command::Pretrain(_) => {
            let suite = pretrain::<T>(&mut st)?;
            println!("costs: {:?}", suite.costs());
        }
        Command::TrainRl(_) => {
            train_rl_stage::<T>(&mut st)?;
            println!("policy written to {}", st.dir.checkpoint("rl", "policy").display());
        }
        Command::Finetune(_) => {
            finetune_stage::<T>(&mut st)?;
            println!("checkpoints written to {}", common.out.join("checkpoints/finetune").display());
        }
        Command::FinetuneTvd(_) => {
            let o = finetune_tvd_stage::<T>(&mut st)?;
            println!("λ = {} after {} epochs, TVD {:.4} (threshold reached: {})", o.lambda, o.epochs, o.tvd, o.reached);
        }
        Command::Eval { .. } => {
            let m = method.expect("eval has a method");
            if !METHODS.contains(&m) {
                return Err(Error::InvalidArgument(format!(
                    "unknown method {m:?}; expected one of {}",
                    METHODS.join(", ")
                )));
            }
            let r = eval::<T>(&mut st, m)?;
            println!(
                "{}: IoU {:.4}, flops {:.4e}, IoU/GigaFlop {:.4e}, mean cost {:.4}",
                r.method, r.mean_iou, r.total_flops, r.iou_per_gigaflop, r.mean_cost
            );
        }
        Command::Report { .. } => unreachable!(),
    }
    print_warnings(&st);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match std::env::var("PASER_FLOAT_MODE").as_deref() {
        Ok("f64") => run_stage::<f64>(&cli.command),
        Ok("f32") | Err(_) => run_stage::<f32>(&cli.command),
        Ok(other) => Err(Error::InvalidArgument(format!("PASER_FLOAT_MODE must be f32 or f64, not {other:?}"))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
