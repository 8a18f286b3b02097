//! Experiment configuration: one JSON document, every field overridable
//! from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use adaanchor::{BackboneConfig, DecodeConfig, HaltingConfig, ModelKind, RefinementConfig, StepPolicy, TrainingConfig, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NoCot,
    Cot,
    AdaanchorFixed,
    AdaanchorAdaptive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::NoCot, Method::Cot, Method::AdaanchorFixed, Method::AdaanchorAdaptive];

    pub fn name(self) -> &'static str {
        match self {
            Method::NoCot => "no_cot",
            Method::Cot => "cot",
            Method::AdaanchorFixed => "adaanchor_fixed",
            Method::AdaanchorAdaptive => "adaanchor_adaptive",
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            Method::NoCot => ModelKind::AnswerOnly,
            Method::Cot => ModelKind::Rationale,
            Method::AdaanchorFixed | Method::AdaanchorAdaptive => ModelKind::Anchored,
        }
    }

    pub fn is_anchored(self) -> bool {
        self.model_kind() == ModelKind::Anchored
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| HarnessError::Argument(format!("unknown method `{s}` (expected no_cot, cot, adaanchor_fixed or adaanchor_adaptive)")))
    }
}

/// Backbone shape without the vocabulary size, which the tokenizer fixes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSettings {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for BackboneSettings {
    fn default() -> Self {
        let toy = BackboneConfig::toy(0);
        BackboneSettings {
            d_model: toy.d_model,
            n_layers: toy.n_layers,
            n_heads: toy.n_heads,
            d_ff: toy.d_ff,
            max_seq_len: toy.max_seq_len,
        }
    }
}

impl BackboneSettings {
    pub fn with_vocab(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub min_difficulty: usize,
    pub max_difficulty: usize,
    /// JSONL test split to evaluate on instead of the generated one.
    pub test_path: Option<PathBuf>,
    /// JSONL training split to use instead of the generated one.
    pub train_path: Option<PathBuf>,
    pub validation_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_size: 8000,
            validation_size: 500,
            test_size: 1000,
            min_difficulty: 1,
            max_difficulty: 5,
            test_path: None,
            train_path: None,
            validation_path: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub backbone: BackboneSettings,
    pub refinement: RefinementConfig,
    pub halting: HaltingConfig,
    /// Step count for `adaanchor_fixed`.
    pub k: Option<usize>,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub max_answer_tokens: usize,
    pub max_rationale_tokens: usize,
    pub checkpoint: Option<PathBuf>,
    pub out: PathBuf,
    /// Evaluation worker threads.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::AdaanchorAdaptive,
            seed: 0,
            backbone: BackboneSettings::default(),
            refinement: RefinementConfig::default(),
            halting: HaltingConfig::default(),
            k: None,
            training: TrainingConfig::default(),
            data: DataConfig::default(),
            max_answer_tokens: 4,
            max_rationale_tokens: 64,
            checkpoint: None,
            out: PathBuf::from("out"),
            workers: 1,
        }
    }
}

/// Command-line values that replace config fields when present.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub method: Option<Method>,
    pub k: Option<usize>,
    pub k_max: Option<usize>,
    pub tau: Option<f64>,
    pub patience: Option<usize>,
    pub beta: Option<f64>,
    pub m: Option<usize>,
    pub freeze_backbone: bool,
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Default config, or the file at `path`, with overrides applied and the
    /// result validated.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut c = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        c.apply(overrides);
        c.validate()?;
        Ok(c)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = &o.out {
            self.out = p.clone();
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(k) = o.k {
            self.k = Some(k);
        }
        if let Some(k) = o.k_max {
            self.halting.k_max = k;
            self.refinement.k_max = k;
        }
        if let Some(t) = o.tau {
            self.halting.tau = t;
        }
        if let Some(p) = o.patience {
            self.halting.patience = p;
        }
        if let Some(b) = o.beta {
            self.refinement.beta = b;
            self.training.beta = b;
        }
        if let Some(m) = o.m {
            self.refinement.m = m;
        }
        if o.freeze_backbone {
            self.training.freeze_backbone = true;
        }
        if let Some(c) = &o.checkpoint {
            self.checkpoint = Some(c.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone_config().validate()?;
        self.refinement.validate()?;
        self.training.validate()?;
        if self.workers == 0 {
            return Err(HarnessError::Argument("workers must be at least 1".into()));
        }
        let d = &self.data;
        if d.min_difficulty == 0 || d.min_difficulty > d.max_difficulty {
            return Err(HarnessError::Argument(format!(
                "difficulty range {}..={} is empty",
                d.min_difficulty, d.max_difficulty
            )));
        }
        match self.method {
            Method::AdaanchorFixed => match self.k {
                None => return Err(HarnessError::Argument("adaanchor_fixed requires --k".into())),
                Some(k) => StepPolicy::Fixed { k }.validate()?,
            },
            Method::AdaanchorAdaptive => self.halting.validate()?,
            Method::NoCot | Method::Cot => {}
        }
        self.decode_config().validate(Vocabulary::new().len())?;
        Ok(())
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        self.backbone.with_vocab(Vocabulary::new().len())
    }

    pub fn decode_config(&self) -> DecodeConfig {
        let mut d = DecodeConfig::for_vocab(&Vocabulary::new());
        d.max_answer_tokens = self.max_answer_tokens;
        d.max_rationale_tokens = self.max_rationale_tokens;
        d
    }

    /// Refinement policy for anchored methods.
    pub fn policy(&self) -> Option<StepPolicy> {
        match self.method {
            Method::AdaanchorFixed => Some(StepPolicy::Fixed { k: self.k.unwrap_or(self.refinement.k_max) }),
            Method::AdaanchorAdaptive => Some(StepPolicy::Adaptive(self.halting)),
            Method::NoCot | Method::Cot => None,
        }
    }

    /// Seed for parameter initialization, distinct from the data seed.
    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(1)
    }
}
