//! Tape gradients against central finite differences.

use std::rc::Rc;

use adaanchor::backbone::{BackboneConfig, SequenceLayout};
use adaanchor::gradcheck::check_gradients;
use adaanchor::tape::{Graph, ParamId, ParamSet, Var};
use adaanchor::tasks::generate_problem;
use adaanchor::training::{alignment_targets, instance_loss_with_targets, TrainingConfig};
use adaanchor::{Model, ModelKind, RefinementConfig, Result, Tensor, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any matrix or vector to a scalar with fixed random weights on
/// both sides, so every entry carries a distinct weight.
fn bilinear_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = match g.shape(x) {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        other => panic!("unexpected shape {other:?}"),
    };
    let left = g.constant(random(&[1, r], &mut rng));
    let right = g.constant(random(&[c, 1], &mut rng));
    let xr = g.matmul(x, right)?;
    let y = g.matmul(left, xr)?;
    Ok(g.sum(y))
}

struct Case {
    params: ParamSet<f64>,
    ids: Vec<ParamId>,
}

fn case(shapes: &[&[usize]], seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| params.insert(format!("p{i}"), random(s, &mut rng)).unwrap())
        .collect();
    Case { params, ids }
}

fn assert_op(name: &str, shapes: &[&[usize]], op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let c = case(shapes, name.len() as u64);
    let ids = c.ids.clone();
    let report = check_gradients(&c.params, &c.ids, H, FLOOR, |g, p| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(p, id)).collect();
        let out = op(g, &vars)?;
        if g.value(out).len() == 1 {
            Ok(g.sum(out))
        } else {
            bilinear_sum(g, out, 99)
        }
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{name}: {report:?}");
}

#[test]
fn matmul_and_transpose() {
    assert_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    assert_op("transpose", &[&[3, 4]], |g, v| g.transpose(v[0]));
}

#[test]
fn elementwise_ops() {
    assert_op("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1]));
    assert_op("add_row", &[&[3, 4], &[4]], |g, v| g.add_row(v[0], v[1]));
    assert_op("scale", &[&[2, 5]], |g, v| Ok(g.scale(v[0], -1.7)));
    assert_op("lerp", &[&[3, 4], &[3, 4]], |g, v| g.lerp(v[0], v[1], 0.3));
    assert_op("gelu", &[&[3, 5]], |g, v| Ok(g.gelu(v[0])));
}

#[test]
fn softmax_plain_and_masked() {
    assert_op("softmax", &[&[3, 5]], |g, v| Ok(g.softmax_rows(v[0])));
    let mask: Rc<[bool]> = SequenceLayout::causal().mask(4).into();
    assert_op("masked softmax", &[&[4, 4]], move |g, v| Ok(g.softmax_rows_masked(v[0], Some(mask.clone()))));
}

#[test]
fn rms_norm() {
    assert_op("rms_norm", &[&[3, 6], &[6]], |g, v| g.rms_norm(v[0], v[1]));
}

#[test]
fn structural_ops() {
    assert_op("concat_rows", &[&[2, 3], &[4, 3]], |g, v| g.concat_rows(&[v[0], v[1]]));
    assert_op("slice_rows", &[&[5, 3]], |g, v| g.slice_rows(v[0], 1, 3));
    assert_op("concat_cols", &[&[3, 2], &[3, 4]], |g, v| g.concat_cols(&[v[0], v[1]]));
    assert_op("slice_cols", &[&[3, 6]], |g, v| g.slice_cols(v[0], 2, 3));
    assert_op("gather_rows", &[&[5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]));
    assert_op("mean_rows", &[&[4, 3]], |g, v| g.mean_rows(v[0]));
}

#[test]
fn cosine_and_cross_entropy() {
    assert_op("cosine", &[&[5], &[5]], |g, v| g.cosine(v[0], v[1]));
    assert_op("cross_entropy", &[&[4, 6]], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2]));
}

#[test]
fn attention_block_composite() {
    // one masked attention head built from primitives
    assert_op("attention", &[&[4, 6], &[6, 3], &[6, 3], &[6, 3]], |g, v| {
        let q = g.matmul(v[0], v[1])?;
        let k = g.matmul(v[0], v[2])?;
        let val = g.matmul(v[0], v[3])?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / 3f64.sqrt());
        let mask: Rc<[bool]> = SequenceLayout::anchored(2, 3, Default::default()).mask(4).into();
        let p = g.softmax_rows_masked(s, Some(mask));
        g.matmul(p, val)
    });
}

fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ff: 32,
        vocab_size: Vocabulary::new().len(),
        max_seq_len: 48,
    }
}

/// Perturbs every parameter so that no tensor sits at a special point
/// (unit gains, identity projection, zero biases).
fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id).values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
}

fn full_loss_check(kind: ModelKind, aux_weight: f64) {
    let vocab = Vocabulary::new();
    let refinement = RefinementConfig {
        m: 3,
        ..Default::default()
    };
    let mut model = Model::<f64>::new(kind, &tiny_config(), refinement, 21).unwrap();
    jitter(&mut model, 22);
    let inst = generate_problem(3, 17, &vocab).unwrap();
    let cfg = TrainingConfig {
        k_train: 2,
        aux_weight,
        ..Default::default()
    };
    let ids: Vec<ParamId> = model.params.ids().collect();
    // chunk embeddings enter the loss as constants, so they stay frozen
    // while the embedding table is perturbed
    let targets = alignment_targets(&model, &inst, cfg.k_train, &vocab).unwrap();
    let template = model.clone();
    let report = check_gradients(&model.params, &ids, 1e-5, 1e-6, |g, p| {
        let mut m = template.clone();
        m.params = p.clone();
        instance_loss_with_targets(g, &m, &inst, &cfg, &vocab, targets.clone()).map(|(l, _)| l)
    })
    .unwrap();
    assert!(report.checked > 5000);
    assert!(report.max_rel_error < 1e-4, "{kind:?}: {report:?}");
}

#[test]
fn anchored_training_loss_matches_finite_differences() {
    full_loss_check(ModelKind::Anchored, 0.1);
}

#[test]
fn rationale_model_loss_matches_finite_differences() {
    full_loss_check(ModelKind::Rationale, 0.0);
}
