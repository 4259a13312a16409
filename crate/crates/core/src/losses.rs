//! Task and context objectives: CTC (forward–backward in log space), greedy
//! CTC decoding, 3-way cross-entropy, the L2 context-distillation loss and
//! the weighted combination of task and context terms.

use serde::{Deserialize, Serialize};

use crate::nn::tensor::log_add;
use crate::nn::{log_sum_exp, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("target contains the blank id {blank} at position {position}")]
    TargetContainsBlank { blank: usize, position: usize },
    #[error("target needs at least {required} frames but only {frames} are available")]
    InfeasibleLength { frames: usize, required: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// How the distance between teacher and student context embeddings is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContextNorm {
    /// `‖e − ê‖₂`
    #[default]
    Norm,
    /// `‖e − ê‖₂²`
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the context loss.
    pub alpha: f64,
    pub blank: usize,
    #[serde(default)]
    pub context_norm: ContextNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            blank: 0,
            context_norm: ContextNorm::Norm,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(LossError::Config(format!(
                "alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.blank >= vocab_size {
            return Err(LossError::Config(format!(
                "blank id {} outside vocabulary of size {vocab_size}",
                self.blank
            )));
        }
        Ok(())
    }
}

/// Smallest frame count able to emit `target`: one frame per label plus a
/// separating blank between each pair of equal neighbours.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Negative log-likelihood of `target` under `log_probs[T×V]` and its
/// gradient with respect to every entry of `log_probs`.
#[derive(Debug, Clone)]
pub struct CtcOutput {
    pub nll: f64,
    pub grad: Tensor,
}

/// Forward–backward CTC over the blank-interleaved target, in log space.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<CtcOutput> {
    let (frames, vocab) = match log_probs.shape() {
        [t, v] => (*t, *v),
        other => {
            return Err(TensorError::Invalid {
                op: "ctc_loss",
                msg: format!("expected T×V log-probabilities, got {other:?}"),
            }
            .into())
        }
    };
    if blank >= vocab {
        return Err(LossError::LabelOutOfRange {
            label: blank,
            classes: vocab,
        });
    }
    for (position, &y) in target.iter().enumerate() {
        if y == blank {
            return Err(LossError::TargetContainsBlank { blank, position });
        }
        if y >= vocab {
            return Err(LossError::LabelOutOfRange {
                label: y,
                classes: vocab,
            });
        }
    }
    let required = ctc_min_frames(target).max(1);
    if frames < required {
        return Err(LossError::InfeasibleLength { frames, required });
    }

    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &y in target {
        ext.push(y);
        ext.push(blank);
    }
    let s_len = ext.len();
    let lp = |t: usize, k: usize| log_probs.data()[t * vocab + k];
    let ninf = f64::NEG_INFINITY;
    // label at s may be reached directly from s − 2
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            cur[s] = if acc == ninf { ninf } else { acc + lp(t, ext[s]) };
        }
    }

    let log_p = if s_len > 1 {
        log_add(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(TensorError::NonFinite(format!("CTC log-likelihood {log_p}")).into());
    }

    let mut grad = vec![0.0; frames * vocab];
    let mut occupancy = vec![ninf; vocab];
    for t in 0..frames {
        occupancy.fill(ninf);
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab > ninf {
                occupancy[ext[s]] = log_add(occupancy[ext[s]], ab);
            }
        }
        for k in 0..vocab {
            if occupancy[k] > ninf {
                grad[t * vocab + k] = -(occupancy[k] - lp(t, k) - log_p).exp();
            }
        }
    }
    Ok(CtcOutput {
        nll: -log_p,
        grad: Tensor::new(vec![frames, vocab], grad)?,
    })
}

/// Differentiable CTC loss on a tape. `log_probs` should already be
/// log-normalized per frame.
pub fn ctc_loss(tape: &mut Tape, log_probs: Var, target: &[usize], blank: usize) -> Result<Var> {
    let out = ctc_forward_backward(tape.value(log_probs), target, blank)?;
    Ok(tape.objective(log_probs, out.nll, out.grad)?)
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(log_probs: &Tensor, blank: usize) -> Vec<usize> {
    let vocab = log_probs.last_dim();
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let row = log_probs.row(t);
        let mut best = 0;
        for k in 1..vocab {
            if row[k] > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != blank {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

/// `−log softmax(logits)[label]` with its gradient `softmax − onehot`.
pub fn cross_entropy_value(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.numel();
    if label >= n {
        return Err(LossError::LabelOutOfRange { label, classes: n });
    }
    let lse = log_sum_exp(logits.data());
    let loss = lse - logits.data()[label];
    let mut grad: Vec<f64> = logits.data().iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let (loss, grad) = cross_entropy_value(tape.value(logits), label)?;
    Ok(tape.objective(logits, loss, grad)?)
}

/// Below this distance the norm's gradient is taken to be zero.
pub const L2_GRAD_FLOOR: f64 = 1e-12;

/// Distance between a constant teacher embedding and the student embedding,
/// with its gradient with respect to the student.
pub fn context_l2_value(teacher: &Tensor, student: &Tensor, norm: ContextNorm) -> Result<(f64, Tensor)> {
    if teacher.numel() != student.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "context_l2",
            left: teacher.shape().to_vec(),
            right: student.shape().to_vec(),
        }
        .into());
    }
    let diff: Vec<f64> = student
        .data()
        .iter()
        .zip(teacher.data())
        .map(|(s, t)| s - t)
        .collect();
    let sq: f64 = diff.iter().map(|d| d * d).sum();
    let (value, grad) = match norm {
        ContextNorm::Norm => {
            let dist = sq.sqrt();
            let grad = if dist < L2_GRAD_FLOOR {
                vec![0.0; diff.len()]
            } else {
                diff.iter().map(|d| d / dist).collect()
            };
            (dist, grad)
        }
        ContextNorm::Squared => (sq, diff.iter().map(|d| 2.0 * d).collect()),
    };
    Ok((value, Tensor::new(student.shape().to_vec(), grad)?))
}

/// `‖e_teacher − ê‖`; the teacher enters as a constant, so only `student`
/// receives gradient.
pub fn context_l2(tape: &mut Tape, teacher: &Tensor, student: Var, norm: ContextNorm) -> Result<Var> {
    let (value, grad) = context_l2_value(teacher, tape.value(student), norm)?;
    Ok(tape.objective(student, value, grad)?)
}

/// `task + α·context`. With `α = 0` or no context term the task loss is
/// returned unchanged.
pub fn combined_loss(tape: &mut Tape, task: Var, context: Option<Var>, cfg: &LossConfig) -> Result<Var> {
    match context {
        Some(c) if cfg.alpha != 0.0 => {
            let weighted = tape.scale(c, cfg.alpha);
            Ok(tape.add(task, weighted)?)
        }
        _ => Ok(task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_diff_grad_check;

    fn uniform(frames: usize, vocab: usize) -> Tensor {
        Tensor::filled(&[frames, vocab], -(vocab as f64).ln())
    }

    #[test]
    fn single_frame_single_label() {
        let lp = Tensor::new(vec![1, 3], vec![0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]).unwrap();
        let out = ctc_forward_backward(&lp, &[2], 0).unwrap();
        assert!((out.nll + 0.3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn uniform_three_frames_two_labels() {
        // blank = 2, labels a = 0, b = 1
        let out = ctc_forward_backward(&uniform(3, 3), &[0, 1], 2).unwrap();
        let expect = -(5.0f64 / 27.0).ln();
        assert!((out.nll - expect).abs() < 1e-12);
        assert_eq!(format!("{:.4}", out.nll), "1.6864");
    }

    #[test]
    fn infeasible_and_invalid_targets() {
        assert_eq!(
            ctc_forward_backward(&uniform(1, 3), &[0, 1], 2).unwrap_err(),
            LossError::InfeasibleLength {
                frames: 1,
                required: 2
            }
        );
        assert_eq!(
            ctc_forward_backward(&uniform(2, 3), &[1, 1], 2).unwrap_err(),
            LossError::InfeasibleLength {
                frames: 2,
                required: 3
            }
        );
        assert!(matches!(
            ctc_forward_backward(&uniform(4, 3), &[0, 2], 2),
            Err(LossError::TargetContainsBlank { position: 1, .. })
        ));
    }

    #[test]
    fn empty_target_is_all_blank_path() {
        let out = ctc_forward_backward(&uniform(4, 3), &[], 0).unwrap();
        assert!((out.nll - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_gradient_matches_finite_differences() {
        let raw = Tensor::new(
            vec![4, 3],
            vec![0.1, -0.3, 0.8, 1.2, 0.0, -0.5, 0.3, 0.3, 0.9, -1.0, 0.4, 0.2],
        )
        .unwrap();
        let r = finite_diff_grad_check(
            |tape, x| {
                let lp = tape.log_softmax(x);
                Ok(ctc_loss(tape, lp, &[1, 2], 0).unwrap())
            },
            &raw,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn degenerate_probabilities_stay_finite() {
        let mut data = vec![(1e-30f64).ln(); 5 * 3];
        for t in 0..5 {
            data[t * 3] = 0.0; // blank nearly certain
        }
        let lp = Tensor::new(vec![5, 3], data).unwrap();
        let out = ctc_forward_backward(&lp, &[1, 2], 0).unwrap();
        assert!(out.nll.is_finite());
        assert!(out.grad.all_finite());
    }

    #[test]
    fn greedy_decode_collapses_and_drops_blanks() {
        let mk = |path: &[usize]| {
            let mut t = Tensor::filled(&[path.len(), 3], -5.0);
            for (i, &k) in path.iter().enumerate() {
                t.data_mut()[i * 3 + k] = 0.0;
            }
            t
        };
        assert_eq!(ctc_greedy_decode(&mk(&[1, 1, 0, 2]), 0), vec![1, 2]);
        assert_eq!(ctc_greedy_decode(&mk(&[0, 0, 0]), 0), Vec::<usize>::new());
        assert_eq!(ctc_greedy_decode(&mk(&[1, 0, 1]), 0), vec![1, 1]);
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, _) = cross_entropy_value(&Tensor::vector(vec![0.0; 3]), 1).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        let (l, _) = cross_entropy_value(&Tensor::vector(vec![0.0, 20.0, 0.0]), 1).unwrap();
        assert!(l < 1e-8);
        let (l, _) = cross_entropy_value(&Tensor::vector(vec![1.0, 2.0, 3.0]), 2).unwrap();
        let direct = -(3f64.exp() / (1f64.exp() + 2f64.exp() + 3f64.exp())).ln();
        assert!((l - direct).abs() < 1e-15);
        assert!((l - 0.40761).abs() < 1e-5);
        assert!(matches!(
            cross_entropy_value(&Tensor::vector(vec![0.0; 3]), 3),
            Err(LossError::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn context_l2_examples() {
        let e = Tensor::vector(vec![0.3, -1.0, 2.0]);
        let (d, g) = context_l2_value(&e, &e, ContextNorm::Norm).unwrap();
        assert_eq!(d, 0.0);
        assert!(g.data().iter().all(|v| *v == 0.0));

        let unit = Tensor::vector(vec![1.0, 0.0, 0.0]);
        let zero = Tensor::vector(vec![0.0; 3]);
        assert_eq!(context_l2_value(&unit, &zero, ContextNorm::Norm).unwrap().0, 1.0);
        assert!(context_l2_value(&unit, &Tensor::vector(vec![0.0; 2]), ContextNorm::Norm).is_err());

        let (s, _) = context_l2_value(&e, &zero, ContextNorm::Squared).unwrap();
        assert!((s - 5.09).abs() < 1e-12);
    }

    #[test]
    fn context_l2_gradient_reaches_student_only() {
        let mut tape = Tape::new();
        let student = tape.leaf(Tensor::vector(vec![0.5, 0.5]), true);
        let teacher = Tensor::vector(vec![0.5, -0.5]);
        let l = context_l2(&mut tape, &teacher, student, ContextNorm::Norm).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(student).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn combined_loss_examples() {
        let mut tape = Tape::new();
        let task = tape.constant(Tensor::scalar(2.0));
        let ctx = tape.constant(Tensor::scalar(0.5));
        let zero_alpha = LossConfig {
            alpha: 0.0,
            ..LossConfig::default()
        };
        let l = combined_loss(&mut tape, task, Some(ctx), &zero_alpha).unwrap();
        assert_eq!(tape.value(l).item(), 2.0);
        let l = combined_loss(&mut tape, task, Some(ctx), &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 2.5);
        assert!(LossConfig {
            alpha: -1.0,
            ..LossConfig::default()
        }
        .validate(4)
        .is_err());
        assert!(LossConfig::default().validate(1).is_ok());
        assert!(LossConfig {
            blank: 4,
            ..LossConfig::default()
        }
        .validate(4)
        .is_err());
    }

    #[test]
    fn combined_gradient_is_sum_of_gradients() {
        let x0 = Tensor::new(vec![2, 3], vec![0.2, -0.1, 0.4, 0.9, 0.0, -0.7]).unwrap();
        let teacher = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let cfg = LossConfig {
            alpha: 0.7,
            ..LossConfig::default()
        };
        let r = finite_diff_grad_check(
            |tape, x| {
                let lp = tape.log_softmax(x);
                let task = ctc_loss(tape, lp, &[1], 0).unwrap();
                let pooled = tape.mean_rows(x)?;
                let ctx = context_l2(tape, &teacher, pooled, ContextNorm::Norm).unwrap();
                Ok(combined_loss(tape, task, Some(ctx), &cfg).unwrap())
            },
            &x0,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");

        // analytic: grad(sum) == grad(task) + α·grad(ctx)
        let grad_of = |which: u8| {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone(), true);
            let lp = tape.log_softmax(x);
            let task = ctc_loss(&mut tape, lp, &[1], 0).unwrap();
            let pooled = tape.mean_rows(x).unwrap();
            let ctx = context_l2(&mut tape, &teacher, pooled, ContextNorm::Norm).unwrap();
            let root = match which {
                0 => task,
                1 => tape.scale(ctx, cfg.alpha),
                _ => combined_loss(&mut tape, task, Some(ctx), &cfg).unwrap(),
            };
            tape.backward(root).unwrap().get(x).unwrap().clone()
        };
        let (a, b, sum) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..sum.numel() {
            assert!((a.data()[i] + b.data()[i] - sum.data()[i]).abs() < 1e-14);
        }
    }
}
