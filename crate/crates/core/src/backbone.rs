//! Small pre-norm decoder-only transformer.
//!
//! Position encodings are added inside [`Backbone::forward_hidden`] rather than
//! in [`Backbone::embed`], because the anchor prefix shifts where question
//! tokens sit in the sequence.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Graph, ParamId, ParamSet, Var};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl BackboneConfig {
    /// The default desk-scale configuration.
    pub fn toy(vocab_size: usize) -> Self {
        BackboneConfig {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            d_ff: 256,
            vocab_size,
            max_seq_len: 160,
        }
    }

    /// `n_layers = 0` is accepted: the stack is then just the final norm.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// How anchor rows attend within the augmented sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAttention {
    /// Plain causal mask everywhere: anchors see only earlier anchors.
    Causal,
    /// Anchor rows see the whole conditioning context (all anchors and the
    /// question); every later row stays causal.
    #[default]
    Context,
}

/// Describes the sequence passed to the backbone: the first `anchors` rows are
/// anchor slots, the first `context_len` rows are anchors plus question.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub anchors: usize,
    pub context_len: usize,
    pub anchor_attention: AnchorAttention,
}

impl SequenceLayout {
    pub fn causal() -> Self {
        SequenceLayout {
            anchors: 0,
            context_len: 0,
            anchor_attention: AnchorAttention::Causal,
        }
    }

    pub fn anchored(anchors: usize, context_len: usize, anchor_attention: AnchorAttention) -> Self {
        SequenceLayout {
            anchors,
            context_len,
            anchor_attention,
        }
    }

    pub fn allows(&self, row: usize, col: usize) -> bool {
        col <= row
            || (self.anchor_attention == AnchorAttention::Context
                && row < self.anchors
                && col < self.context_len)
    }

    pub fn mask(&self, len: usize) -> Vec<bool> {
        (0..len * len).map(|i| self.allows(i / len, i % len)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerWeights {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub mlp_norm: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Handles to the backbone tensors inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct BackboneWeights {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerWeights>,
    pub final_norm: ParamId,
    pub unembed: ParamId,
}

impl BackboneWeights {
    pub fn all(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            ids.extend([l.attn_norm, l.wq, l.wk, l.wv, l.wo, l.mlp_norm, l.w1, l.b1, l.w2, l.b2]);
        }
        ids.extend([self.final_norm, self.unembed]);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    weights: BackboneWeights,
}

/// Parameter-name shapes for one config, in registration order.
fn manifest(config: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (config.d_model, config.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![config.vocab_size, d], Init::Normal),
        ("pos_emb".to_string(), vec![config.max_seq_len, d], Init::Normal),
    ];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.extend([
            (p("attn_norm"), vec![d], Init::Ones),
            (p("wq"), vec![d, d], Init::Normal),
            (p("wk"), vec![d, d], Init::Normal),
            (p("wv"), vec![d, d], Init::Normal),
            (p("wo"), vec![d, d], Init::Normal),
            (p("mlp_norm"), vec![d], Init::Ones),
            (p("w1"), vec![d, f], Init::Normal),
            (p("b1"), vec![f], Init::Zeros),
            (p("w2"), vec![f, d], Init::Normal),
            (p("b2"), vec![d], Init::Zeros),
        ]);
    }
    out.push(("final_norm".to_string(), vec![d], Init::Ones));
    out.push(("unembed".to_string(), vec![d, config.vocab_size], Init::Normal));
    out
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Ones,
    Zeros,
}

pub(crate) fn normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let values = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
    Tensor::new(shape, values).expect("shape from manifest")
}

impl Backbone {
    /// Registers freshly initialized backbone tensors in `params`.
    pub fn init<T: Scalar>(config: &BackboneConfig, params: &mut ParamSet<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        for (name, shape, init) in manifest(config) {
            let t = match init {
                Init::Normal => normal_tensor(&shape, INIT_STD, rng),
                Init::Ones => Tensor::full(&shape, T::one()),
                Init::Zeros => Tensor::zeros(&shape),
            };
            params.insert(name, t)?;
        }
        Self::bind(config, params)
    }

    /// Looks up existing backbone tensors by name, checking shapes.
    pub fn bind<T: Scalar>(config: &BackboneConfig, params: &ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let lookup = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Config(format!("missing backbone tensor {name:?}")))?;
            if params.get(id).shape() != shape {
                return Err(Error::dim("bind", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let m = manifest(config);
        let mut ids = Vec::with_capacity(m.len());
        for (name, shape, _) in &m {
            ids.push(lookup(name, shape)?);
        }
        let mut it = ids.into_iter();
        let mut next = || it.next().expect("manifest length");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                mlp_norm: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let final_norm = next();
        let unembed = next();
        Ok(Backbone {
            config: config.clone(),
            weights: BackboneWeights {
                tok_emb,
                pos_emb,
                layers,
                final_norm,
                unembed,
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BackboneWeights {
        &self.weights
    }

    /// Token embedding rows, without position encodings.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, tokens: &[usize]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::DegenerateInput("embed needs at least one token"));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        let table = g.param(params, self.weights.tok_emb);
        g.gather_rows(table, tokens)
    }

    /// Final-layer hidden states for every row of `input`.
    pub fn forward_hidden<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        input: Var,
        positions: &[usize],
        layout: &SequenceLayout,
    ) -> Result<Var> {
        let cfg = &self.config;
        let len = g.value(input).rows();
        if g.value(input).cols() != cfg.d_model {
            return Err(Error::dim("forward_hidden", g.shape(input), &[len, cfg.d_model]));
        }
        if len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: cfg.max_seq_len,
            });
        }
        if positions.len() != len {
            return Err(Error::dim("forward_hidden positions", g.shape(input), &[positions.len()]));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("positions must be strictly increasing".into()));
        }
        if let Some(&p) = positions.last() {
            if p >= cfg.max_seq_len {
                return Err(Error::SequenceTooLong {
                    len: p + 1,
                    max: cfg.max_seq_len,
                });
            }
        }
        let pos_table = g.param(params, self.weights.pos_emb);
        let pos = g.gather_rows(pos_table, positions)?;
        let mut x = g.add(input, pos)?;
        let mask: Rc<[bool]> = layout.mask(len).into();
        let dh = cfg.head_dim();
        let scale = T::one() / T::lit(dh as f64).sqrt();

        for lw in &self.weights.layers {
            let gain = g.param(params, lw.attn_norm);
            let xn = g.rms_norm(x, gain)?;
            let wq = g.param(params, lw.wq);
            let wk = g.param(params, lw.wk);
            let wv = g.param(params, lw.wv);
            let q = g.matmul(xn, wq)?;
            let k = g.matmul(xn, wk)?;
            let v = g.matmul(xn, wv)?;
            let kt = g.transpose(k)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let qh = g.slice_cols(q, h * dh, dh)?;
                let kh = g.slice_rows(kt, h * dh, dh)?;
                let vh = g.slice_cols(v, h * dh, dh)?;
                let scores = g.matmul(qh, kh)?;
                let scores = g.scale(scores, scale);
                let probs = g.softmax_rows_masked(scores, Some(mask.clone()));
                heads.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat_cols(&heads)?;
            let wo = g.param(params, lw.wo);
            let attn = g.matmul(attn, wo)?;
            x = g.add(x, attn)?;

            let gain = g.param(params, lw.mlp_norm);
            let xn = g.rms_norm(x, gain)?;
            let w1 = g.param(params, lw.w1);
            let b1 = g.param(params, lw.b1);
            let w2 = g.param(params, lw.w2);
            let b2 = g.param(params, lw.b2);
            let h = g.matmul(xn, w1)?;
            let h = g.add_row(h, b1)?;
            let h = g.gelu(h);
            let h = g.matmul(h, w2)?;
            let h = g.add_row(h, b2)?;
            x = g.add(x, h)?;
        }
        let gain = g.param(params, self.weights.final_norm);
        g.rms_norm(x, gain)
    }

    /// Next-token logits for each row of `hidden`.
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, params: &ParamSet<T>, hidden: Var) -> Result<Var> {
        let w = g.param(params, self.weights.unembed);
        g.matmul(hidden, w)
    }
}

/// Convenience: a fresh parameter set holding only backbone weights.
pub fn init_weights<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<(Backbone, ParamSet<T>)> {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = Backbone::init(config, &mut params, &mut rng)?;
    Ok((backbone, params))
}
