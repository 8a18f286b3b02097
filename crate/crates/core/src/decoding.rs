//! Greedy decoding and generated-token accounting.
//!
//! Each generated token recomputes the full prefix; at desk scale this is
//! cheap enough and keeps decoding a pure function of its inputs.

use serde::{Deserialize, Serialize};

use crate::anchor::AnchorState;
use crate::error::{Error, Result};
use crate::halting::{HaltingTrace, StepPolicy};
use crate::model::{Model, ModelKind};
use crate::scalar::Scalar;
use crate::tape::Graph;
use crate::tasks::Vocabulary;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_answer_tokens: usize,
    pub eos_id: usize,
    pub answer_sep_id: usize,
    /// Upper bound on rationale-model output (rationale plus answer).
    #[serde(default = "default_rationale_cap")]
    pub max_rationale_tokens: usize,
}

fn default_rationale_cap() -> usize {
    64
}

impl DecodeConfig {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        DecodeConfig {
            max_answer_tokens: 4,
            eos_id: vocab.eos_id(),
            answer_sep_id: vocab.answer_sep_id(),
            max_rationale_tokens: default_rationale_cap(),
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.max_answer_tokens == 0 || self.max_rationale_tokens == 0 {
            return Err(Error::Config("decode caps must be at least 1".into()));
        }
        for id in [self.eos_id, self.answer_sep_id] {
            if id >= vocab_size {
                return Err(Error::TokenOutOfRange { id, vocab_size });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    AnswerOnly,
    WithRationale,
}

/// Greedy continuation of `prompt`, stopping at eos (not returned) or after
/// `cap` tokens. Candidates are limited to ids accepted by `allowed`; ties go
/// to the lowest id.
fn greedy<T: Scalar>(
    model: &Model<T>,
    anchors: Option<&AnchorState<T>>,
    prompt: &[usize],
    question_len: usize,
    cap: usize,
    eos: usize,
    allowed: impl Fn(usize) -> bool,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    let unembed = model.params.get(model.backbone.weights().unembed);
    let vocab = unembed.cols();
    let mut g = Graph::inference();
    for _ in 0..cap {
        g.clear();
        let a = anchors.map(|s| g.constant(s.anchors.clone()));
        let h = model.hidden_with_anchors(&mut g, a, &seq, question_len)?;
        let last = g.value(h).rows() - 1;
        let h_last = g.slice_rows(h, last, 1)?;
        let logits = model.backbone.logits(&mut g, &model.params, h_last)?;
        let row = g.value(logits).values();
        let mut best: Option<(usize, T)> = None;
        for (id, &v) in row.iter().enumerate().take(vocab) {
            if allowed(id) && best.is_none_or(|(_, b)| v > b) {
                best = Some((id, v));
            }
        }
        let (next, _) = best.ok_or(Error::DegenerateInput("no decodable token"))?;
        if next == eos {
            break;
        }
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// Answer-only greedy decoding after `[P(A); x; answer_sep]` (or `[x;
/// answer_sep]` for a model without anchors). Only answer-alphabet ids
/// (those after the separator) can be produced. Returns the answer tokens.
pub fn decode_answer<T: Scalar>(
    model: &Model<T>,
    anchor_state: Option<&AnchorState<T>>,
    question: &[usize],
    config: &DecodeConfig,
) -> Result<Vec<usize>> {
    if model.kind == ModelKind::Anchored && anchor_state.is_none() {
        return Err(Error::Config("anchored decoding needs a refined anchor state".into()));
    }
    let mut prompt = question.to_vec();
    prompt.push(config.answer_sep_id);
    let sep = config.answer_sep_id;
    greedy(
        model,
        anchor_state,
        &prompt,
        question.len(),
        config.max_answer_tokens,
        config.eos_id,
        |id| id > sep,
    )
}

/// Output of a rationale model: everything it generated, split at the last
/// answer separator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RationaleOutput {
    pub rationale: Vec<usize>,
    pub answer: Vec<usize>,
    pub raw: Vec<usize>,
}

pub fn decode_with_rationale<T: Scalar>(
    model: &Model<T>,
    question: &[usize],
    config: &DecodeConfig,
) -> Result<RationaleOutput> {
    let raw = greedy(
        model,
        None,
        question,
        question.len(),
        config.max_rationale_tokens,
        config.eos_id,
        |id| id != 0,
    )?;
    let (rationale, answer) = match raw.iter().rposition(|&t| t == config.answer_sep_id) {
        Some(p) => (raw[..p].to_vec(), raw[p + 1..].to_vec()),
        None => (raw.clone(), Vec::new()),
    };
    Ok(RationaleOutput { rationale, answer, raw })
}

/// Generated-token count. Eos and answer separators never count;
/// `AnswerOnly` counts only what follows the last separator.
pub fn count_generated_tokens(output: &[usize], mode: CountMode, config: &DecodeConfig) -> usize {
    let body = |s: &[usize]| s.iter().filter(|&&t| t != config.eos_id && t != config.answer_sep_id).count();
    match mode {
        CountMode::WithRationale => body(output),
        CountMode::AnswerOnly => match output.iter().rposition(|&t| t == config.answer_sep_id) {
            Some(p) => body(&output[p + 1..]),
            None => body(output),
        },
    }
}

/// One model prediction with everything the reports need.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub answer: String,
    pub answer_tokens: Vec<usize>,
    pub generated_tokens: usize,
    pub trace: Option<HaltingTrace>,
}

/// Refines (for anchored models, under `policy`) and decodes one question.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    question: &[usize],
    policy: Option<&StepPolicy>,
    config: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<Prediction> {
    let (answer_tokens, generated_tokens, trace) = match model.kind {
        ModelKind::Anchored => {
            let policy = policy.ok_or_else(|| Error::Config("anchored prediction needs a step policy".into()))?;
            let (state, trace) = model.refine(question, policy)?;
            let a = decode_answer(model, Some(&state), question, config)?;
            let n = count_generated_tokens(&a, CountMode::AnswerOnly, config);
            (a, n, Some(trace))
        }
        ModelKind::AnswerOnly => {
            let a = decode_answer(model, None, question, config)?;
            let n = count_generated_tokens(&a, CountMode::AnswerOnly, config);
            (a, n, None)
        }
        ModelKind::Rationale => {
            let out = decode_with_rationale(model, question, config)?;
            let n = count_generated_tokens(&out.raw, CountMode::WithRationale, config);
            (out.answer, n, None)
        }
    };
    let answer = vocab.detokenize(&answer_tokens)?;
    Ok(Prediction {
        answer,
        answer_tokens,
        generated_tokens,
        trace,
    })
}
