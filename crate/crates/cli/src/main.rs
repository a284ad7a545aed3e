//! `fedssl`: command-line driver for the federated self-supervised learning
//! simulator.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on configuration or
//! usage errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedssl_core::config::FinetuneInit;
use fedssl_core::data::{self, Partition};
use fedssl_core::experiment::{self, MetricsRow};
use fedssl_core::nets::checkpoint;
use fedssl_core::tensor::gradcheck;
use fedssl_core::tensor::OpKind;
use fedssl_core::{Error, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedssl", version, about = "Federated self-supervised pretraining and fine-tuning on synthetic data")]
struct Cli {
    /// Print the default config file and exit.
    #[arg(long)]
    dump_defaults: bool,

    /// Train clients on this many threads. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args)]
struct Common {
    /// Config file; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set fedclf.bank_mode=with_local`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic client datasets and their manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Federated pretraining; writes checkpoint, transcript and round log.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
        /// Dataset written by `gen-data`; generated from the config if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint with a fraction of the labels and evaluate.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
        /// Pretrained checkpoint; required unless `finetune.init = random`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run every `ablate.variants` entry over `ablate.seeds` seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Finite-difference check of every op and both losses.
    Gradcheck {
        /// Random instances per case.
        #[arg(long, default_value_t = 10)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only run cases whose name is listed (comma-separated).
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Flip the sign of one op's backward rule, to see the suite catch it.
        #[arg(long, value_name = "OP")]
        inject_fault: Option<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = if cli.dump_defaults {
        print!("{}", ExperimentConfig::default().dump());
        Ok(())
    } else {
        match cli.command {
            Some(cmd) => dispatch(cmd, cli.workers),
            None => Err(Failure::Usage("no subcommand given; see --help".into())),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn dispatch(cmd: Command, workers: Option<usize>) -> Outcome {
    match cmd {
        Command::GenData { common, out, force } => gen_data(&load(&common, workers)?, &out, force),
        Command::Pretrain { common, out, data } => pretrain(&load(&common, workers)?, &out, data.as_deref()),
        Command::Finetune {
            common,
            out,
            checkpoint,
            data,
        } => finetune(&load(&common, workers)?, &out, checkpoint.as_deref(), data.as_deref()),
        Command::Ablate { common, out } => ablate(&load(&common, workers)?, &out),
        Command::Gradcheck {
            instances,
            seed,
            only,
            inject_fault,
        } => grad_check(instances, seed, only, inject_fault),
    }
}

fn load(common: &Common, workers: Option<usize>) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(common.overrides.iter().map(String::as_str))?;
    if let Some(w) = workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    Ok(cfg)
}

fn partition(cfg: &ExperimentConfig, dir: Option<&Path>) -> std::result::Result<Partition, Failure> {
    match dir {
        Some(d) => {
            let p = data::import(d)?;
            experiment::check_dataset(cfg, &p)?;
            Ok(p)
        }
        None => Ok(experiment::dataset(cfg)?),
    }
}

fn gen_data(cfg: &ExperimentConfig, out: &Path, force: bool) -> Outcome {
    if out.join(data::MANIFEST_FILE).exists() && !force {
        return Err(Failure::Runtime(format!(
            "{} already holds a dataset; pass --force to overwrite",
            out.display()
        )));
    }
    let part = experiment::dataset(cfg)?;
    let m = data::export(&part, out)?;
    experiment::write_config(out, cfg)?;
    println!(
        "wrote {} clients to {} (digest {})",
        m.clients.len(),
        out.display(),
        m.digest
    );
    Ok(())
}

fn pretrain(cfg: &ExperimentConfig, out: &Path, data: Option<&Path>) -> Outcome {
    let part = partition(cfg, data)?;
    let res = experiment::pretrain(cfg, &part)?;
    experiment::write_pretrain(out, cfg, &res)?;
    for r in &res.reports {
        let log = experiment::RoundLog::from(r);
        println!("round {:>3}  loss {:.4}  global {}", log.round, log.mean_loss, log.global_digest);
    }
    println!(
        "checkpoint {} ({} parameters, digest {})",
        out.join(experiment::CHECKPOINT_FILE).display(),
        res.params.num_scalars(),
        fedssl_core::digest::hex(res.params.digest())
    );
    Ok(())
}

fn finetune(cfg: &ExperimentConfig, out: &Path, ckpt: Option<&Path>, data: Option<&Path>) -> Outcome {
    let start = match (cfg.finetune.init, ckpt) {
        (FinetuneInit::Pretrained, Some(p)) => Some(checkpoint::load(p)?),
        (FinetuneInit::Pretrained, None) => {
            return Err(Failure::Usage(
                "--checkpoint is required unless finetune.init = random".into(),
            ))
        }
        (FinetuneInit::Random, _) => None,
    };
    let part = partition(cfg, data)?;
    let res = experiment::finetune(cfg, &part, start.as_ref())?;
    let row = MetricsRow::new(cfg, "finetune", cfg.finetune.init.name(), &res);
    experiment::write_config(out, cfg)?;
    experiment::write_metrics(out, "metrics", std::slice::from_ref(&row))?;
    println!("{}", serde_json::to_string(&row).map_err(|e| Failure::Runtime(e.to_string()))?);
    Ok(())
}

fn ablate(cfg: &ExperimentConfig, out: &Path) -> Outcome {
    let rows = experiment::ablate(cfg)?;
    let summary = experiment::summarize(&rows);
    experiment::write_config(out, cfg)?;
    experiment::write_metrics(out, "ablation", &rows)?;
    experiment::write_csv(&out.join("ablation_summary.csv"), &summary)?;
    println!("{:<24} {:>5} {:>8} {:>8} {:>8} {:>8}", "variant", "seeds", "recall", "prec", "f1", "auc");
    for s in &summary {
        let auc = s.macro_auc.map_or("-".to_string(), |a| format!("{a:.4}"));
        println!(
            "{:<24} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8}",
            s.label, s.seeds, s.macro_recall, s.macro_precision, s.macro_f1, auc
        );
    }
    Ok(())
}

fn grad_check(instances: usize, seed: u64, only: Option<Vec<String>>, fault: Option<String>) -> Outcome {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(&name).ok_or_else(|| {
            let known: Vec<&str> = OpKind::ALL.iter().map(|k| k.name()).collect();
            Failure::Usage(format!("unknown op `{name}`; expected one of {}", known.join(", ")))
        })?),
        None => None,
    };
    let mut cases = experiment::all_grad_cases();
    if let Some(names) = only {
        cases.retain(|c| names.iter().any(|n| n == c.name));
    }
    let report = gradcheck::run_suite(&cases, instances, seed, fault)?;
    for c in &report.cases {
        println!(
            "{:<16} {:>3} instances  max rel err {:.3e}  {:>8.1?}  {}",
            c.name,
            c.instances,
            c.max_rel_err,
            c.elapsed,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name).collect();
    if failed.is_empty() {
        println!("all {} cases passed (tol {:e})", report.cases.len(), report.tol);
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradient check failed: {}", failed.join(", "))))
    }
}
