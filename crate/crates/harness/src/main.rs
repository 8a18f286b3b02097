use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adaanchor::tasks::write_jsonl;
use adaanchor::Vocabulary;
use adaanchor_harness::data::build_splits;
use adaanchor_harness::eval::{load_model, save_model, sweep_csv};
use adaanchor_harness::report::{load_report, write_atomic};
use adaanchor_harness::{compare_methods, emit_outputs, run_eval, sweep_k, train_model, ExperimentConfig, HarnessError, Method, Overrides, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adaanchor", version, about = "Latent anchor refinement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON experiment config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct MethodFlags {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    freeze_backbone: bool,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/validation/test JSONL splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the model a method needs and save its checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodFlags,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodFlags,
    },
    /// Fixed-K accuracy for several K on one checkpoint.
    SweepK {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        method: MethodFlags,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        ks: Vec<usize>,
    },
    /// Compare report.json files from runs on the same test split.
    Compare {
        #[command(flatten)]
        common: Common,
        reports: Vec<PathBuf>,
    },
}

fn resolve(common: &Common, flags: &MethodFlags) -> Result<ExperimentConfig> {
    let overrides = Overrides {
        seed: common.seed,
        out: common.out.clone(),
        method: flags.method.as_deref().map(str::parse::<Method>).transpose()?,
        k: flags.k,
        k_max: flags.k_max,
        tau: flags.tau,
        patience: flags.patience,
        beta: flags.beta,
        m: flags.m,
        freeze_backbone: flags.freeze_backbone,
        checkpoint: flags.checkpoint.clone(),
    };
    ExperimentConfig::resolve(common.config.as_deref(), &overrides)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
        path: dir.display().to_string(),
        source: e,
    })
}

fn checkpoint_path(config: &ExperimentConfig) -> Result<&Path> {
    config
        .checkpoint
        .as_deref()
        .ok_or_else(|| HarnessError::Argument("--checkpoint is required".into()))
}

fn run(cli: Cli) -> Result<()> {
    let vocab = Vocabulary::new();
    match cli.command {
        Command::GenData { common } => {
            let config = resolve(&common, &MethodFlags::default())?;
            let splits = build_splits(&config.data, config.seed, &vocab)?;
            create_dir(&config.out)?;
            for (name, part) in [("train", &splits.train), ("validation", &splits.validation), ("test", &splits.test)] {
                write_jsonl(&config.out.join(format!("{name}.jsonl")), part)?;
            }
            println!(
                "wrote {} / {} / {} examples to {}",
                splits.train.len(),
                splits.validation.len(),
                splits.test.len(),
                config.out.display()
            );
        }
        Command::Train { common, method } => {
            let config = resolve(&common, &method)?;
            let splits = build_splits(&config.data, config.seed, &vocab)?;
            create_dir(&config.out)?;
            let init = match &config.checkpoint {
                Some(p) => Some(load_model(p)?.0),
                None => None,
            };
            let (model, outcome) = train_model(
                &config,
                &splits.train,
                &splits.validation,
                init,
                Some(&config.out.join("train_log.jsonl")),
            )?;
            let ckpt = config.out.join("model.ckpt");
            save_model(&model, outcome.best_validation_accuracy, &ckpt)?;
            let summary = serde_json::to_string_pretty(&outcome).expect("outcome serializes");
            write_atomic(&config.out.join("training.json"), &(summary + "\n"))?;
            println!(
                "best epoch {} with validation accuracy {:.4}; checkpoint {}",
                outcome.best_epoch,
                outcome.best_validation_accuracy,
                ckpt.display()
            );
        }
        Command::Eval { common, method } => {
            let config = resolve(&common, &method)?;
            let (model, _) = load_model(checkpoint_path(&config)?)?;
            let splits = build_splits(&config.data, config.seed, &vocab)?;
            let report = run_eval(&config, &model, &splits.test)?;
            emit_outputs(&report, &config.out)?;
            println!(
                "{}: accuracy {:.2}%, avg tokens {:.2}{}",
                report.method,
                report.accuracy,
                report.avg_tokens,
                report.avg_steps.map(|s| format!(", avg steps {s:.2}")).unwrap_or_default()
            );
        }
        Command::SweepK { common, method, ks } => {
            let config = resolve(&common, &method)?;
            let (model, _) = load_model(checkpoint_path(&config)?)?;
            let splits = build_splits(&config.data, config.seed, &vocab)?;
            let entries = sweep_k(&config, &model, &splits.test, &ks)?;
            create_dir(&config.out)?;
            for e in &entries {
                match (&e.report, &e.error) {
                    (Some(r), _) => emit_outputs(r, &config.out.join(format!("k{}", e.k)))?,
                    (None, Some(err)) => eprintln!("K = {}: {err}", e.k),
                    (None, None) => {}
                }
            }
            let table = sweep_csv(&entries);
            write_atomic(&config.out.join("sweep.csv"), &table)?;
            print!("{table}");
        }
        Command::Compare { common, reports } => {
            let loaded = reports.iter().map(|p| load_report(p)).collect::<Result<Vec<_>>>()?;
            let table = compare_methods(&loaded)?.to_csv();
            if let Some(out) = &common.out {
                create_dir(out)?;
                write_atomic(&out.join("comparison.csv"), &table)?;
            }
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
