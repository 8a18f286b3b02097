//! Losses, AdamW and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchor::{self, refine_var};
use crate::decoding::{predict, DecodeConfig};
use crate::error::{Error, Result};
use crate::halting::StepPolicy;
use crate::model::{Model, ModelKind};
use crate::scalar::Scalar;
use crate::tape::{Graph, ParamSet, Var};
use crate::tasks::{canonical_answer, ProblemInstance, Vocabulary};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub k_train: usize,
    pub beta: f64,
    pub aux_weight: f64,
    pub detach_between_steps: bool,
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            epochs: 1,
            batch_size: 1,
            grad_accumulation: 16,
            k_train: 4,
            beta: 0.5,
            aux_weight: 0.1,
            detach_between_steps: false,
            freeze_backbone: false,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be > 0", self.learning_rate)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        if self.k_train == 0 {
            return Err(Error::Config("k_train must be at least 1".into()));
        }
        if self.aux_weight.is_nan() || self.aux_weight < 0.0 {
            return Err(Error::Config(format!("aux_weight {} must be >= 0", self.aux_weight)));
        }
        if self.batch_size == 0 || self.grad_accumulation == 0 {
            return Err(Error::Config("batch_size and grad_accumulation must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta {} must be in (0, 1]", self.beta)));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn answer_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, targets)
}

/// Mean token embedding of every chunk, read without gradient, padded by
/// repeating the last chunk or truncated to `k` entries. `None` when the
/// instance has no rationale.
pub fn chunk_embeddings<T: Scalar>(
    tok_emb: &Tensor<T>,
    chunks: &[Vec<usize>],
    k: usize,
) -> Result<Option<Vec<Tensor<T>>>> {
    let chunks: Vec<&Vec<usize>> = chunks.iter().filter(|c| !c.is_empty()).collect();
    let Some(last) = chunks.last() else {
        return Ok(None);
    };
    let d = tok_emb.cols();
    let vocab = tok_emb.rows();
    let mut out = Vec::with_capacity(k);
    for t in 0..k {
        let chunk = chunks.get(t).unwrap_or(last);
        let mut acc = vec![T::zero(); d];
        for &id in chunk.iter() {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab_size: vocab });
            }
            for (a, &v) in acc.iter_mut().zip(tok_emb.row(id)) {
                *a += v;
            }
        }
        let inv = T::one() / T::lit(chunk.len() as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        out.push(Tensor::vector(acc));
    }
    Ok(Some(out))
}

/// Mean over steps of `1 - cos(mean anchor, chunk embedding)`.
pub fn anchor_alignment_loss<T: Scalar>(g: &mut Graph<T>, anchor_means: &[Var], chunks: &[Tensor<T>]) -> Result<Var> {
    if anchor_means.len() != chunks.len() || anchor_means.is_empty() {
        return Err(Error::Alignment {
            logits: anchor_means.len(),
            targets: chunks.len(),
        });
    }
    let mut terms = Vec::with_capacity(chunks.len());
    for (&mean, chunk) in anchor_means.iter().zip(chunks) {
        let c = g.constant(chunk.clone());
        let cos = g.cosine(mean, c)?;
        terms.push(cos);
    }
    let stacked = g.concat_rows(&terms)?;
    let mean_cos = g.mean_rows(stacked)?;
    let s = g.sum(mean_cos);
    // 1 - mean cos, built as a graph constant minus the node
    let neg = g.scale(s, -T::one());
    let one = g.constant(Tensor::scalar(T::one()));
    g.add(one, neg)
}

/// Loss of one instance, split into its parts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub answer: f64,
    pub aux: f64,
    pub aux_skipped: bool,
}

/// Teacher-forced token stream, the row where predictions start, and the
/// targets read from that row onward.
fn teacher_forcing(model_kind: ModelKind, inst: &ProblemInstance, vocab: &Vocabulary) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    let q = &inst.question_tokens;
    if q.is_empty() {
        return Err(Error::DegenerateInput("empty question"));
    }
    let sep = vocab.answer_sep_id();
    let mut targets = Vec::new();
    let start = if model_kind == ModelKind::Rationale {
        for chunk in inst.rationale_tokens(vocab)? {
            targets.extend(chunk);
        }
        q.len() - 1
    } else {
        q.len()
    };
    if model_kind == ModelKind::Rationale {
        targets.push(sep);
    }
    targets.extend(&inst.answer_tokens);
    targets.push(vocab.eos_id());
    let mut seq = q.clone();
    if model_kind != ModelKind::Rationale {
        seq.push(sep);
    }
    seq.extend(&targets[..targets.len() - 1]);
    Ok((seq, start, targets))
}

/// Alignment targets of `inst` under the current token embeddings, or
/// `None` when it has no rationale.
pub fn alignment_targets<T: Scalar>(
    model: &Model<T>,
    inst: &ProblemInstance,
    k: usize,
    vocab: &Vocabulary,
) -> Result<Option<Vec<Tensor<T>>>> {
    let tok_emb = model.params.get(model.backbone.weights().tok_emb);
    chunk_embeddings(tok_emb, &inst.rationale_tokens(vocab)?, k)
}

/// Builds the full training loss of one instance on `g`.
pub fn instance_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    inst: &ProblemInstance,
    config: &TrainingConfig,
    vocab: &Vocabulary,
) -> Result<(Var, LossParts)> {
    let targets = if model.kind == ModelKind::Anchored && config.aux_weight > 0.0 {
        alignment_targets(model, inst, config.k_train, vocab)?
    } else {
        None
    };
    instance_loss_with_targets(g, model, inst, config, vocab, targets)
}

/// [`instance_loss`] with the alignment targets supplied by the caller.
pub fn instance_loss_with_targets<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    inst: &ProblemInstance,
    config: &TrainingConfig,
    vocab: &Vocabulary,
    alignment: Option<Vec<Tensor<T>>>,
) -> Result<(Var, LossParts)> {
    let (seq, start, targets) = teacher_forcing(model.kind, inst, vocab)?;
    let q_len = inst.question_tokens.len();
    let mut aux = None;
    let mut skipped = false;
    let hidden = if model.kind == ModelKind::Anchored {
        let ap = model.anchor_params()?;
        let refinement = anchor::RefinementConfig {
            beta: config.beta,
            k_max: config.k_train,
            ..model.refinement.clone()
        };
        let x_emb = model.backbone.embed(g, &model.params, &inst.question_tokens)?;
        let dynamics = model.bound();
        let mut a = g.param(&model.params, ap.learned);
        let mut means = Vec::with_capacity(config.k_train);
        for t in 0..config.k_train {
            if t > 0 && config.detach_between_steps {
                a = g.detach(a);
            }
            a = refine_var(g, a, x_emb, &dynamics, ap, &model.params, &refinement)?;
            means.push(g.mean_rows(a)?);
        }
        if config.aux_weight > 0.0 {
            match alignment {
                Some(chunks) => aux = Some(anchor_alignment_loss(g, &means, &chunks)?),
                None => skipped = true,
            }
        }
        model.hidden_with_anchors(g, Some(a), &seq, q_len)?
    } else {
        model.hidden_with_anchors(g, None, &seq, q_len)?
    };
    let offset = model.anchor_count();
    let rows = g.slice_rows(hidden, offset + start, targets.len())?;
    let logits = model.backbone.logits(g, &model.params, rows)?;
    let ans = answer_loss(g, logits, &targets)?;
    let answer = g.value(ans).item().as_f64();
    let (total, aux_value) = match aux {
        Some(al) => {
            let w = g.scale(al, T::lit(config.aux_weight));
            (g.add(ans, w)?, g.value(al).item().as_f64())
        }
        None => (ans, 0.0),
    };
    let parts = LossParts {
        total: g.value(total).item().as_f64(),
        answer,
        aux: aux_value,
        aux_skipped: skipped,
    };
    Ok((total, parts))
}

/// Decoupled weight-decay Adam with bias correction.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every trainable parameter from its accumulated gradient times
    /// `grad_scale`. Gradients are left in place.
    pub fn step(&mut self, params: &mut ParamSet<T>, grad_scale: f64) {
        if self.m.is_empty() {
            for (_, _, t) in params.iter() {
                self.m.push(vec![T::zero(); t.len()]);
                self.v.push(vec![T::zero(); t.len()]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
        let c1 = T::one() - T::lit(ADAM_BETA1.powi(t));
        let c2 = T::one() - T::lit(ADAM_BETA2.powi(t));
        let lr = T::lit(self.lr);
        let decay = T::one() - T::lit(self.lr * self.weight_decay);
        let eps = T::lit(ADAM_EPS);
        let scale = T::lit(grad_scale);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let tensor = params.get_mut(id);
            let grad: Vec<T> = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); tensor.len()],
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[k] * scale;
                m[k] = b1 * m[k] + (T::one() - b1) * g;
                v[k] = b2 * v[k] + (T::one() - b2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *p = *p * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub answer_loss: f64,
    pub aux_loss: f64,
    pub lr: f64,
}

/// Owns the optimizer state; [`Trainer::train_step`] accumulates gradients
/// and steps the optimizer every `grad_accumulation` calls.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub config: TrainingConfig,
    pub optimizer: AdamW<T>,
    vocab: Vocabulary,
    calls: usize,
    pending: usize,
    pub aux_skips: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: TrainingConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        if config.freeze_backbone {
            if model.kind != ModelKind::Anchored {
                return Err(Error::Config("freezing the backbone leaves nothing to train without anchors".into()));
            }
            model.set_backbone_trainable(false);
        }
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay);
        Ok(Trainer {
            model,
            config,
            optimizer,
            vocab,
            calls: 0,
            pending: 0,
            aux_skips: 0,
        })
    }

    /// Number of `train_step` calls so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    /// Loss and parameter gradients of a batch without touching optimizer
    /// state. Gradients of the batch mean are added to the parameters.
    pub fn accumulate(&mut self, batch: &[ProblemInstance]) -> Result<LossParts> {
        if batch.is_empty() {
            return Err(Error::DegenerateInput("empty batch"));
        }
        let mut sum = LossParts {
            total: 0.0,
            answer: 0.0,
            aux: 0.0,
            aux_skipped: false,
        };
        let inv = 1.0 / batch.len() as f64;
        for inst in batch {
            let mut g = Graph::new();
            let (loss, parts) = instance_loss(&mut g, &self.model, inst, &self.config, &self.vocab)?;
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.calls });
            }
            let scaled = if batch.len() > 1 { g.scale(loss, T::lit(inv)) } else { loss };
            g.backward(scaled, &mut self.model.params)?;
            sum.total += parts.total * inv;
            sum.answer += parts.answer * inv;
            sum.aux += parts.aux * inv;
            if parts.aux_skipped {
                self.aux_skips += 1;
                sum.aux_skipped = true;
            }
        }
        Ok(sum)
    }

    pub fn train_step(&mut self, batch: &[ProblemInstance]) -> Result<LossParts> {
        let parts = self.accumulate(batch)?;
        self.calls += 1;
        self.pending += 1;
        if self.pending == self.config.grad_accumulation {
            self.flush();
        }
        Ok(parts)
    }

    /// Applies any pending accumulated gradient.
    pub fn flush(&mut self) {
        if self.pending == 0 {
            return;
        }
        self.optimizer.step(&mut self.model.params, 1.0 / self.pending as f64);
        self.model.params.zero_grad();
        self.pending = 0;
    }
}

/// Fraction of `instances` answered exactly, in `[0, 1]`.
pub fn accuracy<T: Scalar>(
    model: &Model<T>,
    instances: &[ProblemInstance],
    policy: Option<&StepPolicy>,
    decode: &DecodeConfig,
    vocab: &Vocabulary,
) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::DegenerateInput("accuracy over an empty split"));
    }
    let mut correct = 0usize;
    for inst in instances {
        let p = predict(model, &inst.question_tokens, policy, decode, vocab)?;
        if canonical_answer(&p.answer) == inst.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingOutcome {
    pub epochs: Vec<EpochSummary>,
    pub best_epoch: usize,
    pub best_validation_accuracy: f64,
    pub optimizer_steps: u64,
    pub aux_skips: usize,
}

/// Index of the largest accuracy; earliest wins ties.
pub fn select_best(accuracies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &a) in accuracies.iter().enumerate() {
        if best.is_none_or(|b| a > accuracies[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains for `config.epochs` epochs (or until `max_steps` optimizer steps),
/// validating after each epoch and restoring the parameters of the best one.
/// Every `train_step` call is logged as one JSON line to `log`.
pub fn train<T: Scalar>(
    trainer: &mut Trainer<T>,
    train_set: &[ProblemInstance],
    validation: &[ProblemInstance],
    validation_policy: Option<&StepPolicy>,
    decode: &DecodeConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainingOutcome> {
    if train_set.is_empty() {
        return Err(Error::DegenerateInput("empty training split"));
    }
    let vocab = trainer.vocab.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut snapshots: Vec<ParamSet<T>> = Vec::new();
    let bs = trainer.config.batch_size;
    'outer: for epoch in 0..trainer.config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(trainer.config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        let mut stop = false;
        for idx in order.chunks(bs) {
            let batch: Vec<ProblemInstance> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let parts = trainer.train_step(&batch)?;
            loss_sum += parts.total;
            n += 1;
            if let Some(w) = log.as_deref_mut() {
                let rec = LogRecord {
                    step: trainer.calls(),
                    loss: parts.total,
                    answer_loss: parts.answer,
                    aux_loss: parts.aux,
                    lr: trainer.config.learning_rate,
                };
                let line = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
                writeln!(w, "{line}")?;
            }
            if trainer
                .config
                .max_steps
                .is_some_and(|cap| trainer.optimizer.steps_taken() as usize >= cap)
            {
                stop = true;
                break;
            }
        }
        trainer.flush();
        let validation_accuracy = if validation.is_empty() {
            0.0
        } else {
            accuracy(&trainer.model, validation, validation_policy, decode, &vocab)?
        };
        epochs.push(EpochSummary {
            epoch,
            mean_loss: loss_sum / n.max(1) as f64,
            validation_accuracy,
        });
        snapshots.push(trainer.model.params.clone());
        if stop {
            break 'outer;
        }
    }
    let accs: Vec<f64> = epochs.iter().map(|e| e.validation_accuracy).collect();
    let best = select_best(&accs).ok_or(Error::Config("no epochs were run".into()))?;
    trainer.model.params = snapshots.swap_remove(best);
    trainer.model.params.zero_grad();
    Ok(TrainingOutcome {
        best_validation_accuracy: accs[best],
        best_epoch: best,
        epochs,
        optimizer_steps: trainer.optimizer.steps_taken(),
        aux_skips: trainer.aux_skips,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::RefinementConfig;
    use crate::backbone::BackboneConfig;
    use crate::tasks::generate_problem;

    fn tiny(vocab: usize) -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            vocab_size: vocab,
            max_seq_len: 80,
        }
    }

    fn model(kind: ModelKind) -> (Model<f64>, Vocabulary) {
        let v = Vocabulary::new();
        let r = RefinementConfig {
            m: 2,
            ..Default::default()
        };
        (Model::new(kind, &tiny(v.len()), r, 5).unwrap(), v)
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[3, 7]));
        let loss = answer_loss(&mut g, l, &[0, 3, 6]).unwrap();
        assert!((g.value(loss).item() - 7f64.ln()).abs() < 1e-12);
        assert!(answer_loss(&mut g, l, &[0, 1]).is_err());
    }

    #[test]
    fn alignment_loss_extremes() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::vector(vec![1.0, 0.0]));
        let same = anchor_alignment_loss(&mut g, &[a, a], &vec![Tensor::vector(vec![2.0, 0.0]); 2]).unwrap();
        assert!(g.value(same).item().abs() < 1e-12);
        let orth = anchor_alignment_loss(&mut g, &[a], &[Tensor::vector(vec![0.0, 3.0])]).unwrap();
        assert!((g.value(orth).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chunks_pad_and_truncate() {
        let emb = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[3.0, 3.0]]).unwrap();
        let c = chunk_embeddings(&emb, &[vec![0, 1], vec![2]], 4).unwrap().unwrap();
        assert_eq!(c.len(), 4);
        assert_eq!(c[0].values(), &[0.5, 0.5]);
        assert_eq!(c[3].values(), &[3.0, 3.0]);
        assert_eq!(chunk_embeddings(&emb, &[vec![0], vec![1], vec![2]], 1).unwrap().unwrap().len(), 1);
        assert!(chunk_embeddings(&emb, &[], 2).unwrap().is_none());
    }

    #[test]
    fn total_is_answer_plus_weighted_aux() {
        let (m, v) = model(ModelKind::Anchored);
        let inst = generate_problem(3, 1, &v).unwrap();
        for lambda in [0.0, 0.1, 0.5] {
            let cfg = TrainingConfig {
                aux_weight: lambda,
                k_train: 2,
                ..Default::default()
            };
            let mut g = Graph::new();
            let (_, p) = instance_loss(&mut g, &m, &inst, &cfg, &v).unwrap();
            assert!((p.total - (p.answer + lambda * p.aux)).abs() < 1e-12);
            if lambda == 0.0 {
                assert_eq!(p.total, p.answer);
            }
        }
    }

    #[test]
    fn missing_rationale_is_skipped() {
        let (m, v) = model(ModelKind::Anchored);
        let mut inst = generate_problem(2, 4, &v).unwrap();
        inst.rationale_chunks.clear();
        let mut t = Trainer::new(m, TrainingConfig::default(), v).unwrap();
        let p = t.train_step(&[inst]).unwrap();
        assert!(p.aux_skipped);
        assert_eq!(p.aux, 0.0);
        assert_eq!(t.aux_skips, 1);
    }

    #[test]
    fn teacher_forcing_targets() {
        let v = Vocabulary::new();
        let inst = generate_problem(2, 9, &v).unwrap();
        let (seq, start, targets) = teacher_forcing(ModelKind::AnswerOnly, &inst, &v).unwrap();
        assert_eq!(start, inst.question_tokens.len());
        assert_eq!(seq.len() - start, targets.len());
        assert_eq!(*targets.last().unwrap(), v.eos_id());
        let (seq, start, targets) = teacher_forcing(ModelKind::Rationale, &inst, &v).unwrap();
        assert_eq!(seq.len() - start, targets.len());
        assert_eq!(&seq[start + 1..], &targets[..targets.len() - 1]);
    }

    #[test]
    fn adamw_decay_only() {
        let mut p = ParamSet::<f64>::new();
        let id = p.insert("w", Tensor::vector(vec![2.0, -4.0])).unwrap();
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(&mut p, 1.0);
        assert_eq!(p.get(id).values(), &[2.0, -4.0]);
        let mut opt = AdamW::new(0.1, 1e-2);
        opt.step(&mut p, 1.0);
        assert_eq!(p.get(id).values(), &[2.0 * (1.0 - 1e-3), -4.0 * (1.0 - 1e-3)]);
    }

    #[test]
    fn adamw_matches_scalar_simulation() {
        let (lr, wd, g) = (0.05, 0.01, 0.3);
        let mut p = ParamSet::<f64>::new();
        let id = p.insert("w", Tensor::vector(vec![1.0])).unwrap();
        p.get_mut(id).accumulate_grad(&[g]);
        let mut opt = AdamW::new(lr, wd);
        // hand simulation
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=5 {
            opt.step(&mut p, 1.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w = w * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            assert!((p.get(id).values()[0] - w).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_backbone_is_untouched() {
        let (m, v) = model(ModelKind::Anchored);
        let before = m.params.get(m.backbone.weights().unembed).clone();
        let anchors_before = m.params.get(m.anchors.as_ref().unwrap().learned).clone();
        let cfg = TrainingConfig {
            freeze_backbone: true,
            grad_accumulation: 1,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let mut t = Trainer::new(m, cfg, v.clone()).unwrap();
        t.train_step(&[generate_problem(2, 3, &v).unwrap()]).unwrap();
        let w = t.model.backbone.weights().unembed;
        assert_eq!(t.model.params.get(w).values(), before.values());
        let a = t.model.anchors.as_ref().unwrap().learned;
        assert_ne!(t.model.params.get(a).values(), anchors_before.values());
    }

    #[test]
    fn detached_unroll_cuts_anchor_gradient() {
        let (m, v) = model(ModelKind::Anchored);
        let inst = generate_problem(3, 2, &v).unwrap();
        let learned = m.anchors.as_ref().unwrap().learned;
        let grad_for = |detach: bool, k: usize| {
            let cfg = TrainingConfig {
                aux_weight: 0.0,
                k_train: k,
                detach_between_steps: detach,
                ..Default::default()
            };
            let mut g = Graph::new();
            let (loss, _) = instance_loss(&mut g, &m, &inst, &cfg, &v).unwrap();
            let mut params = m.params.clone();
            g.backward(loss, &mut params).unwrap();
            params.get(learned).grad().map(|g| g.to_vec()).unwrap_or_default()
        };
        let detached = grad_for(true, 2);
        assert!(detached.iter().all(|&x| x == 0.0));
        assert!(grad_for(false, 2).iter().any(|&x| x != 0.0));
        assert!(grad_for(true, 1).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn best_selection_prefers_earliest_tie() {
        assert_eq!(select_best(&[0.2, 0.5, 0.5, 0.1]), Some(1));
        assert_eq!(select_best(&[]), None);
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let (mut m, v) = model(ModelKind::AnswerOnly);
        let w = m.backbone.weights().unembed;
        m.params.get_mut(w).values_mut()[0] = f64::NAN;
        let mut t = Trainer::new(m, TrainingConfig::default(), v.clone()).unwrap();
        let err = t.train_step(&[generate_problem(1, 0, &v).unwrap()]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 0 }));
    }

    #[test]
    fn identical_seeds_give_identical_first_loss() {
        let v = Vocabulary::new();
        let inst = generate_problem(4, 11, &v).unwrap();
        let run = || {
            let (m, v) = model(ModelKind::Anchored);
            let mut t = Trainer::new(m, TrainingConfig::default(), v).unwrap();
            t.train_step(std::slice::from_ref(&inst)).unwrap().total
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
