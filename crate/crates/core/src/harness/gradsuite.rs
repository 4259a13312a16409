//! Finite-difference checks for every differentiable operation and for one
//! complete GenerativeAware training objective.

use rand::Rng;
use serde::Serialize;

use crate::losses::{combined_loss, context_l2, cross_entropy, ctc_loss, ContextNorm, LossConfig};
use crate::models::{ContextInput, ContextModel, EmbeddingMode, ModelConfig, SystemSpec, Task, Variant};
use crate::nn::{
    check_param_grads, embed_tokens, finite_diff_grad_check, linear, mean_pool, multi_head_attention, named_rng,
    AttentionConfig, AttentionParams, GradCheckReport, Tape, Tensor, TensorError, Var,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Upper bound on the size of the checked GenerativeAware system.
pub const MAX_SYSTEM_PARAMS: usize = 20_000;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub params: usize,
    pub report: GradCheckReport,
}

type Op = fn(&mut Tape, Var, &Inputs) -> Result<Var, TensorError>;

/// Fixed operands shared by the checks.
struct Inputs {
    other: Tensor,
    square: Tensor,
    row: Tensor,
    gamma: Tensor,
    beta: Tensor,
    weights: Tensor,
}

fn random(shape: &[usize], seed: u64, name: &str, lo: f64, hi: f64) -> Tensor {
    let mut rng = named_rng(seed, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// `Σ w ⊙ y` with fixed random weights, so that every output coordinate
/// contributes to the checked gradient.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.value(y).shape().to_vec();
    let w = tape.constant(random(&shape, seed, "projection", -1.0, 1.0));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn op_checks() -> Vec<(&'static str, Vec<usize>, Op)> {
    vec![
        ("add", vec![3, 4], |t, x, i| {
            let b = t.constant(i.other.clone());
            t.add(x, b)
        }),
        ("sub", vec![3, 4], |t, x, i| {
            let b = t.constant(i.other.clone());
            let y = t.sub(b, x)?;
            t.mul(y, y)
        }),
        ("mul", vec![3, 4], |t, x, i| {
            let b = t.constant(i.other.clone());
            let y = t.mul(x, b)?;
            t.mul(y, x)
        }),
        ("add_scalar", vec![3, 4], |t, x, _| {
            let y = t.add_scalar(x, 0.7);
            t.mul(y, y)
        }),
        ("scale", vec![3, 4], |t, x, _| Ok(t.scale(x, -1.3))),
        ("neg", vec![3, 4], |t, x, _| {
            let y = t.neg(x);
            t.mul(y, x)
        }),
        ("exp", vec![3, 4], |t, x, _| Ok(t.exp(x))),
        ("ln", vec![3, 4], |t, x, _| {
            // keep the argument positive
            let y = t.exp(x);
            let y = t.add_scalar(y, 0.5);
            Ok(t.ln(y))
        }),
        ("gelu", vec![3, 4], |t, x, _| Ok(t.gelu(x))),
        ("matmul", vec![3, 4], |t, x, i| {
            let b = t.constant(i.square.clone());
            let y = t.matmul(x, b)?;
            t.matmul_nt(y, x)
        }),
        ("matmul_nt", vec![3, 4], |t, x, i| {
            let b = t.constant(i.other.clone());
            t.matmul_nt(x, b)
        }),
        ("add_row_bias", vec![4], |t, x, i| {
            let a = t.constant(i.other.clone());
            t.add_row_bias(a, x)
        }),
        ("softmax", vec![3, 4], |t, x, _| Ok(t.softmax(x))),
        ("log_softmax", vec![3, 4], |t, x, _| Ok(t.log_softmax(x))),
        ("layer_norm", vec![3, 4], |t, x, i| {
            let g = t.constant(i.gamma.clone());
            let b = t.constant(i.beta.clone());
            t.layer_norm(x, g, b, 1e-5)
        }),
        ("layer_norm_affine", vec![4], |t, x, i| {
            let a = t.constant(i.other.clone());
            let b = t.constant(i.beta.clone());
            t.layer_norm(a, x, b, 1e-5)
        }),
        ("mean_rows", vec![3, 4], |t, x, _| t.mean_rows(x)),
        ("sum", vec![3, 4], |t, x, _| {
            let s = t.sum(x);
            t.mul(s, s)
        }),
        ("gather", vec![5, 4], |t, x, _| t.gather(x, &[4, 0, 4, 2])),
        ("slice_cols", vec![3, 4], |t, x, _| t.slice_cols(x, 1, 2)),
        ("concat_cols", vec![3, 4], |t, x, i| {
            let b = t.constant(i.other.clone());
            let e = t.exp(x);
            t.concat_cols(&[x, b, e])
        }),
        ("reshape", vec![3, 4], |t, x, _| {
            let y = t.reshape(x, &[2, 6])?;
            Ok(t.softmax(y))
        }),
        ("linear", vec![3, 4], |t, x, i| {
            let w = t.constant(i.square.clone());
            let b = t.constant(i.row.clone());
            linear(t, x, w, Some(b))
        }),
        ("linear_weight", vec![4, 4], |t, w, i| {
            let x = t.constant(i.other.clone());
            linear(t, x, w, None)
        }),
        ("mean_pool", vec![3, 4], |t, x, _| mean_pool(t, x)),
        ("embed_tokens", vec![5, 4], |t, x, _| embed_tokens(t, &[1, 3, 3, 0], x)),
        ("attention", vec![3, 4], |t, x, i| {
            let cfg = AttentionConfig {
                num_heads: 2,
                head_dim: 2,
                query_dim: 4,
                kv_dim: 4,
                out_dim: 4,
                window: None,
            };
            let kv = t.constant(i.other.clone());
            let kv = t.add(kv, x)?;
            let w = |t: &mut Tape, k: u64| t.constant(random(&[4, 4], k, "attention", -0.8, 0.8));
            let params = AttentionParams {
                query: w(t, 1),
                key: w(t, 2),
                value: w(t, 3),
                out: w(t, 4),
            };
            multi_head_attention(t, x, kv, &cfg, params)
        }),
        ("attention_windowed", vec![4, 4], |t, x, _| {
            let cfg = AttentionConfig {
                num_heads: 2,
                head_dim: 2,
                query_dim: 4,
                kv_dim: 4,
                out_dim: 4,
                window: Some(1),
            };
            let w = |t: &mut Tape, k: u64| t.constant(random(&[4, 4], k, "attention", -0.8, 0.8));
            let params = AttentionParams {
                query: w(t, 1),
                key: w(t, 2),
                value: w(t, 3),
                out: w(t, 4),
            };
            multi_head_attention(t, x, x, &cfg, params)
        }),
        ("ctc", vec![6, 4], |t, x, _| {
            let lp = t.log_softmax(x);
            ctc_loss(t, lp, &[1, 2, 2], 0).map_err(loss_err)
        }),
        ("cross_entropy", vec![3], |t, x, _| cross_entropy(t, x, 2).map_err(loss_err)),
        ("context_l2", vec![4], |t, x, i| {
            context_l2(t, &i.weights, x, ContextNorm::Norm).map_err(loss_err)
        }),
        ("context_l2_squared", vec![4], |t, x, i| {
            context_l2(t, &i.weights, x, ContextNorm::Squared).map_err(loss_err)
        }),
        ("combined_loss", vec![4], |t, x, i| {
            let task = t.sum(x);
            let task = t.mul(task, task)?;
            let ctx = context_l2(t, &i.weights, x, ContextNorm::Norm).map_err(loss_err)?;
            let cfg = LossConfig {
                alpha: 0.7,
                ..LossConfig::default()
            };
            combined_loss(t, task, Some(ctx), &cfg).map_err(loss_err)
        }),
    ]
}

fn loss_err(e: crate::losses::LossError) -> TensorError {
    match e {
        crate::losses::LossError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "loss",
            msg: other.to_string(),
        },
    }
}

/// One check per differentiable operation.
pub fn check_operations(seed: u64) -> Result<Vec<GradCheckEntry>, TensorError> {
    let inputs = Inputs {
        other: random(&[3, 4], seed, "other", -1.0, 1.0),
        square: random(&[4, 4], seed, "square", -1.0, 1.0),
        row: random(&[4], seed, "row", -1.0, 1.0),
        gamma: random(&[4], seed, "gamma", 0.5, 1.5),
        beta: random(&[4], seed, "beta", -0.5, 0.5),
        weights: random(&[4], seed, "teacher", -1.0, 1.0),
    };
    let mut out = Vec::new();
    for (name, shape, op) in op_checks() {
        let x = random(&shape, seed, name, -1.0, 1.0);
        let report = finite_diff_grad_check(
            |t, x| {
                let y = op(t, x, &inputs)?;
                if t.value(y).numel() == 1 {
                    Ok(y)
                } else {
                    project(t, y, seed)
                }
            },
            &x,
            STEP,
            TOLERANCE,
        )?;
        out.push(GradCheckEntry {
            name: name.to_string(),
            params: x.numel(),
            report,
        });
    }
    Ok(out)
}

/// The model configuration of the checked GenerativeAware system.
pub fn small_system_config() -> ModelConfig {
    ModelConfig {
        d_feat: 16,
        d_model: 32,
        d_text: 16,
        acoustic_layers: 1,
        text_layers: 1,
        acoustic_heads: 2,
        text_heads: 2,
        ffn_mult: 2,
        ..ModelConfig::default()
    }
}

/// Checks every parameter of a GenerativeAware system under the combined
/// CTC + context objective. All parameters are redrawn at random first so no
/// coordinate sits at a zero initialization.
pub fn check_generative_aware(seed: u64) -> Result<GradCheckEntry, crate::models::ModelError> {
    let spec = SystemSpec {
        variant: Variant::GenerativeAware,
        mode: EmbeddingMode::Fixed,
        task: Task::Asr,
        model: small_system_config(),
        output_vocab: 6,
        text_vocab: 0,
        seed,
    };
    let mut model = ContextModel::new(spec)?;
    let names: Vec<String> = model.params.names().map(str::to_string).collect();
    for name in &names {
        let t = model.params.get_mut(name).expect("listed");
        // at ±0.5 the output head saturates the softmax and some of its
        // gradients drop below what central differences can resolve
        let r = match t.shape() {
            [_, fan_in] if name.starts_with("head.") => 1.0 / (*fan_in as f64).sqrt(),
            _ => 0.5,
        };
        *t = random(t.shape(), seed, name, -r, r);
    }
    let d_feat = model.spec.model.d_feat;
    let d_text = model.spec.model.d_text;
    let features = random(&[7, d_feat], seed, "features", -1.0, 1.0);
    let teacher = random(&[d_text], seed, "teacher", -1.0, 1.0);
    let target = [1usize, 3, 2, 5];
    let cfg = LossConfig::default();
    let params = model.params.num_scalars();
    let report = check_param_grads(
        &model.params,
        |g| {
            let out = model.forward(g, &features, ContextInput::None).map_err(model_err)?;
            let lp = g.tape.log_softmax(out.logits);
            let task = ctc_loss(&mut g.tape, lp, &target, cfg.blank).map_err(loss_err)?;
            let student = out.student.expect("GenerativeAware has a student");
            let ctx = context_l2(&mut g.tape, &teacher, student, cfg.context_norm).map_err(loss_err)?;
            combined_loss(&mut g.tape, task, Some(ctx), &cfg).map_err(loss_err)
        },
        STEP,
        TOLERANCE,
        None,
    )?;
    Ok(GradCheckEntry {
        name: "generative_aware_system".into(),
        params,
        report,
    })
}

fn model_err(e: crate::models::ModelError) -> TensorError {
    match e {
        crate::models::ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Operation checks followed by the full-system check.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckEntry>, super::HarnessError> {
    let mut entries = check_operations(seed).map_err(crate::models::ModelError::from)?;
    entries.push(check_generative_aware(seed)?);
    Ok(entries)
}
