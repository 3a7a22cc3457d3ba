//! Task, generation and label-consistency losses over a soft prompt.
//!
//! Task and generation losses sum token negative log-likelihoods (EOS
//! included) within a sample and average over samples. The consistency
//! loss sums `KL(previous ‖ current)` over every output position and
//! vocabulary entry, divided by the number of pseudo samples.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::format::{format_gen_target, format_task, DomainSchema, Sample, TaskType};
use crate::prompt::{PromptGrads, PromptView, TaskPrompt};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::vocab::{TokenId, Vocabulary};

/// Token ids of one training pair; `domain_id` selects the generation token
/// of GEN-format pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub domain_id: String,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
}

impl Encoded {
    /// `"tag X" → Y`.
    pub fn task(sample: &Sample, schema: &DomainSchema, vocab: &Vocabulary) -> Result<Self> {
        let (x, y) = format_task(sample, schema)?;
        Ok(Self { domain_id: sample.domain_id.clone(), input_ids: vocab.encode(&x), output_ids: vocab.encode(&y) })
    }

    /// Empty input → `"X __split__ Y"`; the prefix carries `[G, P]`.
    pub fn gen(sample: &Sample, schema: &DomainSchema, vocab: &Vocabulary) -> Result<Self> {
        let target = format_gen_target(sample, schema)?;
        Ok(Self { domain_id: sample.domain_id.clone(), input_ids: vocab.encode(""), output_ids: vocab.encode(&target) })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_lm: f64,
    pub lambda_kl: f64,
}

impl LossWeights {
    pub fn new(lambda_lm: f64, lambda_kl: f64) -> Result<Self> {
        let w = Self { lambda_lm, lambda_kl };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_lm", self.lambda_lm), ("lambda_kl", self.lambda_kl)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Defaults per task type.
    pub fn for_task(t: TaskType) -> Self {
        match t {
            TaskType::Ner => Self { lambda_lm: 0.10, lambda_kl: 0.03 },
            TaskType::Classification => Self { lambda_lm: 0.25, lambda_kl: 0.01 },
            TaskType::Summarization => Self { lambda_lm: 0.10, lambda_kl: 0.04 },
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub lm: f64,
    pub kl: f64,
    pub total: f64,
}

pub fn combined_loss(w: &LossWeights, task: f64, lm: f64, kl: f64) -> LossBreakdown {
    LossBreakdown { task, lm, kl, total: task + w.lambda_lm * lm + w.lambda_kl * kl }
}

fn finite(v: f64, context: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { context: context.to_string(), value: v })
    }
}

/// Summed NLL of `ids` under `log_probs`, and its gradient with respect to
/// `log_probs` scaled by `weight`.
pub fn nll_with_grad<T: Scalar>(log_probs: &Matrix<T>, ids: &[TokenId], weight: f64) -> (f64, Matrix<T>) {
    let mut d = Matrix::zeros(log_probs.rows(), log_probs.cols());
    let mut nll = 0.0;
    for (r, &y) in ids.iter().enumerate() {
        nll -= log_probs.get(r, y as usize).as_f64();
        d.set(r, y as usize, T::of(-weight));
    }
    (nll, d)
}

/// `Σ_positions Σ_v p′_v (ln p′_v − ln p_v)` and its gradient with respect to
/// the current log-probabilities (`−weight·p′`).
pub fn kl_with_grad<T: Scalar>(prev: &Matrix<T>, cur: &Matrix<T>, weight: f64) -> (f64, Matrix<T>) {
    let mut d = Matrix::zeros(cur.rows(), cur.cols());
    let mut kl = 0.0;
    for r in 0..cur.rows() {
        let (pr, cr, dr) = (prev.row(r), cur.row(r), d.row_mut(r));
        for v in 0..cr.len() {
            let lp_prev = pr[v].as_f64();
            let p_prev = lp_prev.exp();
            if p_prev > 0.0 {
                kl += p_prev * (lp_prev - cr[v].as_f64());
            }
            dr[v] = T::of(-weight * p_prev);
        }
    }
    (kl, d)
}

fn require_nonempty(batch: &[Encoded], what: &str) -> Result<()> {
    if batch.is_empty() {
        Err(Error::Insufficient(format!("empty {what} batch")))
    } else {
        Ok(())
    }
}

pub fn task_loss<T: Scalar>(backbone: &Backbone<T>, prompt: &impl PromptView<T>, batch: &[Encoded]) -> Result<f64> {
    require_nonempty(batch, "task")?;
    let prefix = prompt.task_prefix();
    let mut total = 0.0;
    for e in batch {
        let trace = backbone.forward(&prefix, &e.input_ids, &e.output_ids)?;
        total += nll_with_grad(trace.log_probs(), &e.output_ids, 0.0).0;
    }
    finite(total / batch.len() as f64, "task loss")
}

pub fn task_loss_grad<T: Scalar>(
    backbone: &Backbone<T>,
    prompt: &TaskPrompt<T>,
    batch: &[Encoded],
) -> Result<(f64, PromptGrads<T>)> {
    require_nonempty(batch, "task")?;
    let prefix = prompt.task_prefix();
    let w = 1.0 / batch.len() as f64;
    let mut grads = PromptGrads::zeros_like(prompt);
    let mut total = 0.0;
    for e in batch {
        let trace = backbone.forward(&prefix, &e.input_ids, &e.output_ids)?;
        let (nll, d) = nll_with_grad(trace.log_probs(), &e.output_ids, w);
        total += nll;
        grads.add_task_prefix(&backbone.backward_to_prompts(&trace, &d)?);
    }
    Ok((finite(total * w, "task loss")?, grads))
}

/// Generation loss of GEN-format pairs; empty batches give 0.
pub fn lm_loss<T: Scalar>(backbone: &Backbone<T>, prompt: &impl PromptView<T>, batch: &[Encoded]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for e in batch {
        let prefix = prompt.gen_prefix(&e.domain_id)?;
        let trace = backbone.forward(&prefix, &e.input_ids, &e.output_ids)?;
        total += nll_with_grad(trace.log_probs(), &e.output_ids, 0.0).0;
    }
    finite(total / batch.len() as f64, "lm loss")
}

pub fn lm_loss_grad<T: Scalar>(
    backbone: &Backbone<T>,
    prompt: &TaskPrompt<T>,
    batch: &[Encoded],
) -> Result<(f64, PromptGrads<T>)> {
    let mut grads = PromptGrads::zeros_like(prompt);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for e in batch {
        let prefix = prompt.gen_prefix(&e.domain_id)?;
        let trace = backbone.forward(&prefix, &e.input_ids, &e.output_ids)?;
        let (nll, d) = nll_with_grad(trace.log_probs(), &e.output_ids, w);
        total += nll;
        grads.add_gen_prefix(&e.domain_id, &backbone.backward_to_prompts(&trace, &d)?)?;
    }
    Ok((finite(total * w, "lm loss")?, grads))
}

/// Label-consistency loss on TASK-format pseudo pairs, teacher-forced on
/// their outputs; empty batches give 0.
pub fn kl_loss<T: Scalar>(
    backbone: &Backbone<T>,
    previous: &impl PromptView<T>,
    current: &impl PromptView<T>,
    batch: &[Encoded],
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let (pp, cp) = (previous.task_prefix(), current.task_prefix());
    let mut total = 0.0;
    for e in batch {
        let prev = backbone.forward(&pp, &e.input_ids, &e.output_ids)?;
        let cur = backbone.forward(&cp, &e.input_ids, &e.output_ids)?;
        total += kl_with_grad(prev.log_probs(), cur.log_probs(), 0.0).0;
    }
    finite(total / batch.len() as f64, "kl loss")
}

pub fn kl_loss_grad<T: Scalar>(
    backbone: &Backbone<T>,
    previous: &impl PromptView<T>,
    current: &TaskPrompt<T>,
    batch: &[Encoded],
) -> Result<(f64, PromptGrads<T>)> {
    let mut grads = PromptGrads::zeros_like(current);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let (pp, cp) = (previous.task_prefix(), current.task_prefix());
    let w = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for e in batch {
        let prev = backbone.forward(&pp, &e.input_ids, &e.output_ids)?;
        let cur = backbone.forward(&cp, &e.input_ids, &e.output_ids)?;
        let (kl, d) = kl_with_grad(prev.log_probs(), cur.log_probs(), w);
        total += kl;
        grads.add_task_prefix(&backbone.backward_to_prompts(&cur, &d)?);
    }
    Ok((finite(total * w, "kl loss")?, grads))
}
