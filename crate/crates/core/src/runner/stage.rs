//! Optimization of one stage: mixed batches, periodic validation, and
//! best-checkpoint restoration.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, Slot};
use crate::error::{Error, Result};
use crate::format::TaskType;
use crate::losses::{
    combined_loss, kl_loss_grad, lm_loss_grad, nll_with_grad, task_loss, task_loss_grad, Encoded, LossBreakdown, LossWeights,
};
use crate::optim::{clip_global_norm, OptimizerKind, OptimizerState};
use crate::prompt::{PromptGrads, PromptSnapshot, TaskPrompt};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

use super::eval::StepRecord;
use super::regularize::{flat_params, full_sample_grad, regularizer_grad, regularizer_penalty, ImportanceMap};

/// One training example: its TASK pair, its GEN pair when the generation
/// loss applies, and whether it is a pseudo sample (consistency loss).
#[derive(Clone, Debug)]
pub(crate) struct TrainItem {
    pub task_type: TaskType,
    pub task: Encoded,
    pub gen: Option<Encoded>,
    pub pseudo: bool,
}

pub(crate) struct StageOutcome {
    pub losses: Vec<StepRecord>,
    pub best_step: usize,
    pub best_valid_loss: f64,
}

pub(crate) struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub validations: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Schedule {
    fn is_check(&self, step: usize) -> bool {
        let every = (self.steps / self.validations.max(1)).max(1);
        step == self.steps || step.is_multiple_of(every)
    }

    /// Batches of item indices: shuffled passes over the items.
    fn batches(&self, n: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut order: Vec<usize> = Vec::new();
        let mut out = Vec::with_capacity(self.steps);
        while out.len() < self.steps {
            if order.len() < self.batch_size {
                let mut pass: Vec<usize> = (0..n).collect();
                pass.shuffle(&mut rng);
                order.extend(pass);
            }
            let take = self.batch_size.min(order.len());
            out.push(order.drain(..take).collect());
        }
        out
    }
}

pub(crate) struct PromptStage<'a, T> {
    pub backbone: &'a Backbone<T>,
    pub items: &'a [TrainItem],
    pub valid: &'a [Encoded],
    pub snapshot: Option<&'a PromptSnapshot<T>>,
    pub weights: LossWeights,
    pub reg: Option<(&'a ImportanceMap, f64)>,
}

fn non_finite(context: &str, v: f64) -> Error {
    Error::NonFinite { context: context.to_string(), value: v }
}

pub(crate) fn train_prompt<T: Scalar>(st: &PromptStage<'_, T>, prompt: &mut TaskPrompt<T>, sched: &Schedule) -> Result<StageOutcome> {
    if st.items.is_empty() {
        return Err(Error::Insufficient("no training items".into()));
    }
    let mut opt = OptimizerState::new(OptimizerKind::default(), sched.lr);
    let mut best = (task_loss(st.backbone, prompt, st.valid)?, 0usize, prompt.snapshot());
    let mut losses = Vec::with_capacity(sched.steps);
    for (i, batch) in sched.batches(st.items.len()).into_iter().enumerate() {
        let step = i + 1;
        let items: Vec<&TrainItem> = batch.iter().map(|&j| &st.items[j]).collect();
        let task: Vec<Encoded> = items.iter().map(|it| it.task.clone()).collect();
        let (lt, mut grads) = task_loss_grad(st.backbone, prompt, &task)?;
        let (mut ll, mut lk, mut reg) = (0.0, 0.0, 0.0);
        if st.weights.lambda_lm > 0.0 {
            let gen: Vec<Encoded> = items.iter().filter_map(|it| it.gen.clone()).collect();
            let (l, g) = lm_loss_grad(st.backbone, prompt, &gen)?;
            ll = l;
            grads.add_scaled(&g, T::of(st.weights.lambda_lm))?;
        }
        if let (Some(snap), true) = (st.snapshot, st.weights.lambda_kl > 0.0) {
            let pseudo: Vec<Encoded> = items.iter().filter(|it| it.pseudo).map(|it| it.task.clone()).collect();
            let (l, g) = kl_loss_grad(st.backbone, snap, prompt, &pseudo)?;
            lk = l;
            grads.add_scaled(&g, T::of(st.weights.lambda_kl))?;
        }
        if let Some((map, strength)) = st.reg {
            let flat = prompt.flat();
            reg = regularizer_penalty(map, &flat, strength)?;
            let rg = regularizer_grad(map, &flat, strength)?;
            add_flat(&mut grads, &rg);
        }
        let mut rec = StepRecord { step, loss: combined_loss(&st.weights, lt, ll, lk), reg };
        rec.loss.total += reg;
        if !rec.loss.total.is_finite() {
            return Err(non_finite(&format!("stage loss at step {step}"), rec.loss.total));
        }
        losses.push(rec);
        prompt.step(&grads, &mut opt, sched.clip_norm)?;
        if sched.is_check(step) {
            let v = task_loss(st.backbone, prompt, st.valid)?;
            if v < best.0 {
                best = (v, step, prompt.snapshot());
            }
        }
    }
    prompt.restore(&best.2)?;
    Ok(StageOutcome { losses, best_step: best.1, best_valid_loss: best.0 })
}

fn add_flat<T: Scalar>(grads: &mut PromptGrads<T>, flat: &[T]) {
    let n = grads.embeds.data().len();
    for (a, &b) in grads.embeds.data_mut().iter_mut().zip(flat) {
        *a += b;
    }
    let mut at = n;
    for (_, g) in &mut grads.gen {
        for (a, &b) in g.iter_mut().zip(&flat[at.min(flat.len())..]) {
            *a += b;
        }
        at += g.len();
    }
}

/// The fixed textual prefix that replaces the prompt for full-model
/// methods: the task tag word.
pub(crate) fn text_prefix<T: Scalar>(model: &Backbone<T>, t: TaskType) -> Result<Vec<Slot>> {
    let id = model.vocab().id(t.tag()).ok_or_else(|| Error::Config(format!("task tag {:?} missing from vocabulary", t.tag())))?;
    Ok(vec![Slot::token(id)])
}

pub(crate) fn full_prefix<T: Scalar>(model: &Backbone<T>, t: TaskType) -> Result<Matrix<T>> {
    Ok(model.prefix_rows(&text_prefix(model, t)?))
}

fn full_valid_loss<T: Scalar>(model: &Backbone<T>, valid: &[(TaskType, Encoded)]) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Insufficient("empty validation set".into()));
    }
    let mut total = 0.0;
    for (t, e) in valid {
        let trace = model.forward(&full_prefix(model, *t)?, &e.input_ids, &e.output_ids)?;
        total += nll_with_grad(trace.log_probs(), &e.output_ids, 0.0).0;
    }
    Ok(total / valid.len() as f64)
}

pub(crate) fn train_full<T: Scalar>(
    model: &mut Backbone<T>,
    items: &[TrainItem],
    valid: &[(TaskType, Encoded)],
    reg: Option<(&ImportanceMap, f64)>,
    sched: &Schedule,
) -> Result<StageOutcome> {
    if items.is_empty() {
        return Err(Error::Insufficient("no training items".into()));
    }
    let mut opt = OptimizerState::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, sched.lr);
    let mut grads = crate::backbone::Params::zeros(model.dims(), model.vocab().len());
    let mut best = (full_valid_loss(model, valid)?, 0usize, model.params().clone());
    let mut losses = Vec::with_capacity(sched.steps);
    for (i, batch) in sched.batches(items.len()).into_iter().enumerate() {
        let step = i + 1;
        grads.fill_zero();
        let w = 1.0 / batch.len() as f64;
        let mut lt = 0.0;
        for &j in &batch {
            let it = &items[j];
            let slots = text_prefix(model, it.task_type)?;
            lt += w * full_sample_grad(model, &slots, &it.task, |lp| nll_with_grad(lp, &it.task.output_ids, w).1, &mut grads)?;
        }
        let mut reg_value = 0.0;
        if let Some((map, strength)) = reg {
            let flat = flat_params(model.params());
            reg_value = regularizer_penalty(map, &flat, strength)?;
            let rg = regularizer_grad(map, &flat, strength)?;
            let mut at = 0;
            for t in grads.tensors_mut() {
                for (a, &b) in t.iter_mut().zip(&rg[at..]) {
                    *a += b;
                }
                at += t.len();
            }
        }
        let loss = LossBreakdown { task: lt, lm: 0.0, kl: 0.0, total: lt + reg_value };
        if !loss.total.is_finite() {
            return Err(non_finite(&format!("fine-tuning loss at step {step}"), loss.total));
        }
        losses.push(StepRecord { step, loss, reg: reg_value });
        let mut g = grads.tensors_mut();
        clip_global_norm(&mut g, sched.clip_norm);
        let g: Vec<&[T]> = g.into_iter().map(|s| &*s).collect();
        let mut p = model.params_mut()?.tensors_mut();
        opt.update(&mut p, &g, 1.0);
        if sched.is_check(step) {
            let v = full_valid_loss(model, valid)?;
            if v < best.0 {
                best = (v, step, model.params().clone());
            }
        }
    }
    *model.params_mut()? = best.2;
    Ok(StageOutcome { losses, best_step: best.1, best_valid_loss: best.0 })
}
