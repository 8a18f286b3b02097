//! Evaluation, the K sweep, and training runs.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use adaanchor::checkpoint::{load_checkpoint, save_checkpoint, CheckpointRecord};
use adaanchor::decoding::predict;
use adaanchor::tasks::canonical_answer;
use adaanchor::training::{train, TrainingOutcome};
use adaanchor::{Model32, ProblemInstance, StepPolicy, Trainer, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::data::fingerprint;
use crate::error::{HarnessError, Result};
use crate::report::{ExampleRecord, RunReport};

/// Refuses to evaluate `model` under a config it was not built for.
pub fn check_compatibility(config: &ExperimentConfig, model: &Model32) -> Result<()> {
    let want = config.method.model_kind();
    if model.kind != want {
        return Err(HarnessError::Compatibility(format!(
            "method {} needs a {} model, checkpoint holds {}",
            config.method,
            want.name(),
            model.kind.name()
        )));
    }
    let expected = config.backbone_config();
    if model.config() != &expected {
        return Err(HarnessError::Compatibility(format!(
            "backbone {:?} vs configured {:?}",
            model.config(),
            expected
        )));
    }
    if config.method.is_anchored() && model.anchor_count() != config.refinement.m {
        return Err(HarnessError::Compatibility(format!(
            "checkpoint has m = {}, configuration has m = {}",
            model.anchor_count(),
            config.refinement.m
        )));
    }
    Ok(())
}

fn evaluate_one(
    config: &ExperimentConfig,
    model: &Model32,
    policy: Option<&StepPolicy>,
    id: usize,
    inst: &ProblemInstance,
    vocab: &Vocabulary,
) -> Result<ExampleRecord> {
    let p = predict(model, &inst.question_tokens, policy, &config.decode_config(), vocab)?;
    Ok(ExampleRecord {
        id,
        difficulty: inst.difficulty,
        correct: canonical_answer(&p.answer) == canonical_answer(&inst.answer),
        prediction: p.answer,
        gold: inst.answer.clone(),
        tokens: p.generated_tokens,
        halt_step: p.trace.as_ref().map(|t| t.halt_step),
        deltas: p.trace.map(|t| t.deltas),
    })
}

/// Evaluates every instance with `config.workers` threads. Results are
/// merged in input order, so the report does not depend on the worker count.
pub fn run_eval(config: &ExperimentConfig, model: &Model32, test: &[ProblemInstance]) -> Result<RunReport> {
    config.validate()?;
    check_compatibility(config, model)?;
    let vocab = Vocabulary::new();
    let policy = config.policy();
    let workers = config.workers.min(test.len()).max(1);
    let chunk = test.len().div_ceil(workers).max(1);
    let records: Vec<ExampleRecord> = std::thread::scope(|s| {
        let handles: Vec<_> = test
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let (vocab, policy) = (&vocab, policy.as_ref());
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(i, inst)| evaluate_one(config, model, policy, c * chunk + i, inst, vocab))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(test.len());
        for h in handles {
            out.extend(h.join().expect("evaluation worker panicked")?);
        }
        Ok::<_, HarnessError>(out)
    })?;
    let budget = policy.map(|p| p.budget());
    Ok(RunReport::from_examples(config.method, config.seed, fingerprint(test), budget, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RunReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Fixed-K evaluation for every `k` in `ks`. A failing entry keeps its error
/// message and the sweep continues.
pub fn sweep_k(config: &ExperimentConfig, model: &Model32, test: &[ProblemInstance], ks: &[usize]) -> Result<Vec<SweepEntry>> {
    if ks.is_empty() {
        return Err(HarnessError::Argument("sweep-k needs at least one K".into()));
    }
    Ok(ks
        .iter()
        .map(|&k| {
            let c = ExperimentConfig {
                method: Method::AdaanchorFixed,
                k: Some(k),
                ..config.clone()
            };
            match run_eval(&c, model, test) {
                Ok(r) => SweepEntry {
                    k,
                    report: Some(r),
                    error: None,
                },
                Err(e) => SweepEntry {
                    k,
                    report: None,
                    error: Some(format!("error[{}]: {e}", e.category())),
                },
            }
        })
        .collect())
}

pub fn sweep_csv(entries: &[SweepEntry]) -> String {
    let mut s = String::from("k,accuracy,avg_steps,status\n");
    for e in entries {
        match &e.report {
            Some(r) => s.push_str(&format!("{},{:.4},{:.4},ok\n", e.k, r.accuracy, r.avg_steps.unwrap_or(0.0))),
            None => s.push_str(&format!("{},,,failed\n", e.k)),
        }
    }
    s
}

/// Trains the model `config.method` needs, restoring the best validation
/// epoch. The per-step log goes to `log_path` when given.
pub fn train_model(
    config: &ExperimentConfig,
    train_set: &[ProblemInstance],
    validation: &[ProblemInstance],
    init: Option<Model32>,
    log_path: Option<&Path>,
) -> Result<(Model32, TrainingOutcome)> {
    config.validate()?;
    let vocab = Vocabulary::new();
    let kind = config.method.model_kind();
    let model = match init {
        Some(m) => {
            check_compatibility(config, &m)?;
            m
        }
        None => Model32::new(kind, &config.backbone_config(), config.refinement.clone(), config.init_seed())?,
    };
    let mut training = config.training.clone();
    training.seed = config.seed;
    let mut trainer = Trainer::new(model, training, vocab)?;
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| HarnessError::io(p, e))?)),
        None => None,
    };
    let policy = config.policy();
    let outcome = train(
        &mut trainer,
        train_set,
        validation,
        policy.as_ref(),
        &config.decode_config(),
        log.as_mut().map(|w| w as &mut dyn std::io::Write),
    )?;
    let mut model = trainer.model;
    model.set_backbone_trainable(true);
    Ok((model, outcome))
}

pub fn save_model(model: &Model32, validation_accuracy: f64, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    save_checkpoint(&CheckpointRecord::from_model(model, validation_accuracy), path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(Model32, f64)> {
    let record = load_checkpoint::<f32>(path)?;
    let acc = record.validation_accuracy;
    Ok((record.into_model()?, acc))
}
