//! A backbone plus (optionally) anchor parameters, sharing one parameter set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{self, AnchorParams, AnchorState, BoundBackbone, RefinementConfig, ANCHOR_INIT_STD};
use crate::backbone::{normal_tensor, Backbone, BackboneConfig, SequenceLayout};
use crate::error::{Error, Result};
use crate::halting::{run_policy, HaltingTrace, StepPolicy};
use crate::scalar::Scalar;
use crate::tape::{Graph, ParamId, ParamSet, Var};

/// What a model is trained to emit after the question.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Anchor refinement, then the answer.
    Anchored,
    /// The answer directly, no anchors.
    AnswerOnly,
    /// Rationale, answer separator, answer; no anchors.
    Rationale,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Anchored => "anchored",
            ModelKind::AnswerOnly => "answer_only",
            ModelKind::Rationale => "rationale",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "anchored" => Some(ModelKind::Anchored),
            "answer_only" => Some(ModelKind::AnswerOnly),
            "rationale" => Some(ModelKind::Rationale),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub params: ParamSet<T>,
    pub backbone: Backbone,
    pub anchors: Option<AnchorParams>,
    pub refinement: RefinementConfig,
}

impl<T: Scalar> Model<T> {
    pub fn new(kind: ModelKind, config: &BackboneConfig, refinement: RefinementConfig, seed: u64) -> Result<Self> {
        refinement.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbone = Backbone::init(config, &mut params, &mut rng)?;
        let anchors = if kind == ModelKind::Anchored {
            let learned = normal_tensor(&[refinement.m, config.d_model], ANCHOR_INIT_STD, &mut rng);
            Some(AnchorParams::init(&mut params, learned)?)
        } else {
            None
        };
        Ok(Model {
            kind,
            params,
            backbone,
            anchors,
            refinement,
        })
    }

    /// Rebuilds a model around an existing parameter set (e.g. a checkpoint).
    pub fn from_params(
        kind: ModelKind,
        config: &BackboneConfig,
        refinement: RefinementConfig,
        params: ParamSet<T>,
    ) -> Result<Self> {
        refinement.validate()?;
        let backbone = Backbone::bind(config, &params)?;
        let anchors = if kind == ModelKind::Anchored {
            let a = AnchorParams::bind(&params)?;
            if a.m() != refinement.m || a.d() != config.d_model {
                return Err(Error::Config(format!(
                    "anchor tensor is {}x{}, configuration expects {}x{}",
                    a.m(),
                    a.d(),
                    refinement.m,
                    config.d_model
                )));
            }
            Some(a)
        } else {
            None
        };
        let expected = backbone.weights().all().len() + if anchors.is_some() { 3 } else { 0 };
        if params.len() != expected {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, model expects {expected}",
                params.len()
            )));
        }
        Ok(Model {
            kind,
            params,
            backbone,
            anchors,
            refinement,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        self.backbone.config()
    }

    pub fn bound(&self) -> BoundBackbone<'_, T> {
        BoundBackbone {
            backbone: &self.backbone,
            params: &self.params,
        }
    }

    pub fn anchor_params(&self) -> Result<&AnchorParams> {
        self.anchors
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} model has no anchors", self.kind.name())))
    }

    /// Number of anchor slots prepended to every sequence.
    pub fn anchor_count(&self) -> usize {
        self.anchors.as_ref().map_or(0, |a| a.m())
    }

    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.backbone.weights().all()
    }

    /// Freezes (or unfreezes) every backbone tensor.
    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for id in self.backbone.weights().all() {
            self.params.set_trainable(id, trainable);
        }
    }

    /// Hidden states of `[P(anchors); Emb(tokens)]` (or `Emb(tokens)` for
    /// models without anchors). `question_len` tokens form the context that
    /// anchor rows may read.
    pub fn hidden_with_anchors(
        &self,
        g: &mut Graph<T>,
        anchors: Option<Var>,
        tokens: &[usize],
        question_len: usize,
    ) -> Result<Var> {
        let emb = self.backbone.embed(g, &self.params, tokens)?;
        self.hidden_from_embeddings(g, anchors, emb, question_len)
    }

    pub fn hidden_from_embeddings(
        &self,
        g: &mut Graph<T>,
        anchors: Option<Var>,
        emb: Var,
        question_len: usize,
    ) -> Result<Var> {
        let n = g.value(emb).rows();
        match (anchors, self.anchors.as_ref()) {
            (Some(a), Some(ap)) => {
                let m = g.value(a).rows();
                let proj = anchor::project(g, ap, &self.params, a)?;
                let e = anchor::assemble_input(g, proj, emb)?;
                let layout = SequenceLayout::anchored(m, m + question_len, self.refinement.anchor_attention);
                self.backbone
                    .forward_hidden(g, &self.params, e, &anchor::anchored_positions(m, n), &layout)
            }
            (None, _) => {
                let positions: Vec<usize> = (0..n).collect();
                self.backbone
                    .forward_hidden(g, &self.params, emb, &positions, &SequenceLayout::causal())
            }
            (Some(_), None) => Err(Error::Config("anchors passed to a model without anchor parameters".into())),
        }
    }

    /// Runs anchor refinement on `question` under `policy` and returns the
    /// final state with its halting trace.
    pub fn refine(&self, question: &[usize], policy: &StepPolicy) -> Result<(AnchorState<T>, HaltingTrace)> {
        policy.validate()?;
        let ap = self.anchor_params()?;
        let mut config = self.refinement.clone();
        config.k_max = policy.budget();
        let mut g = Graph::inference();
        let x_emb = self.backbone.embed(&mut g, &self.params, question)?;
        let dynamics = self.bound();
        let mut state = anchor::init_anchors(ap, &self.params);
        let trace = run_policy(policy, |_| {
            let (next, delta) = anchor::refine_step(&mut g, &state, x_emb, &dynamics, ap, &self.params, &config)?;
            state = next;
            Ok::<f64, Error>(delta.as_f64())
        })
        .map_err(|e| e.error)?;
        Ok((state, trace))
    }
}
