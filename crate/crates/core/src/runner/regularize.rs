//! Quadratic importance-weighted penalties (EWC and MAS).

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, Params, Slot};
use crate::error::{Error, Result};
use crate::losses::{nll_with_grad, Encoded};
use crate::prompt::{PromptGrads, PromptView, TaskPrompt};
use crate::scalar::Scalar;
use crate::tensor::{axpy, Matrix};

/// Importances `Ω ≥ 0` and anchor values `θ*` over a flat parameter layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub omega: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl ImportanceMap {
    pub fn new(omega: Vec<f64>, anchor: Vec<f64>) -> Result<Self> {
        if omega.len() != anchor.len() {
            return Err(Error::Shape(format!("{} importances for {} anchors", omega.len(), anchor.len())));
        }
        if omega.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("importances must be nonnegative".into()));
        }
        Ok(Self { omega, anchor })
    }

    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }

    /// Adds a later stage's importances and moves the anchor to its values.
    pub fn merge(&mut self, later: ImportanceMap) -> Result<()> {
        if later.len() != self.len() {
            return Err(Error::Shape("importance maps over different parameter sets".into()));
        }
        for (a, b) in self.omega.iter_mut().zip(&later.omega) {
            *a += b;
        }
        self.anchor = later.anchor;
        Ok(())
    }
}

fn check<T: Scalar>(map: &ImportanceMap, params: &[T]) -> Result<()> {
    if map.len() != params.len() {
        return Err(Error::Shape(format!("importance map covers {} values, model has {}", map.len(), params.len())));
    }
    Ok(())
}

/// `strength · Σ Ω_i (θ_i − θ*_i)²`.
pub fn regularizer_penalty<T: Scalar>(map: &ImportanceMap, params: &[T], strength: f64) -> Result<f64> {
    check(map, params)?;
    let s: f64 = map
        .omega
        .iter()
        .zip(&map.anchor)
        .zip(params)
        .map(|((w, a), p)| {
            let d = p.as_f64() - a;
            w * d * d
        })
        .sum();
    Ok(strength * s)
}

/// `2 · strength · Ω (θ − θ*)`.
pub fn regularizer_grad<T: Scalar>(map: &ImportanceMap, params: &[T], strength: f64) -> Result<Vec<T>> {
    check(map, params)?;
    Ok(map
        .omega
        .iter()
        .zip(&map.anchor)
        .zip(params)
        .map(|((w, a), p)| T::of(2.0 * strength * w * (p.as_f64() - a)))
        .collect())
}

fn mean_map<T: Scalar>(sum: Vec<f64>, n: usize, anchor: Vec<T>) -> Result<ImportanceMap> {
    let inv = 1.0 / n as f64;
    ImportanceMap::new(sum.into_iter().map(|v| v * inv).collect(), anchor.iter().map(|x| x.as_f64()).collect())
}

fn empty_data() -> Error {
    Error::Insufficient("importance needs a nonempty dataset".into())
}

/// Diagonal Fisher of a prompt: mean squared per-sample task-loss gradient.
pub fn ewc_importance_prompt<T: Scalar>(backbone: &Backbone<T>, prompt: &TaskPrompt<T>, data: &[Encoded]) -> Result<ImportanceMap> {
    prompt_importance(backbone, prompt, data, |lp, ids| nll_with_grad(lp, ids, 1.0).1, |g| g * g)
}

/// Mean absolute gradient of the squared L2 norm of the output
/// log-probabilities with respect to the prompt.
pub fn mas_importance_prompt<T: Scalar>(backbone: &Backbone<T>, prompt: &TaskPrompt<T>, data: &[Encoded]) -> Result<ImportanceMap> {
    prompt_importance(backbone, prompt, data, sq_norm_grad, f64::abs)
}

fn sq_norm_grad<T: Scalar>(lp: &Matrix<T>, _ids: &[crate::vocab::TokenId]) -> Matrix<T> {
    let mut d = lp.clone();
    d.scale(T::of(2.0));
    d
}

fn prompt_importance<T: Scalar>(
    backbone: &Backbone<T>,
    prompt: &TaskPrompt<T>,
    data: &[Encoded],
    d_out: impl Fn(&Matrix<T>, &[crate::vocab::TokenId]) -> Matrix<T>,
    reduce: impl Fn(f64) -> f64,
) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(empty_data());
    }
    let prefix = prompt.task_prefix();
    let mut sum = vec![0.0; prompt.num_params()];
    for e in data {
        let trace = backbone.forward(&prefix, &e.input_ids, &e.output_ids)?;
        let d = d_out(trace.log_probs(), &e.output_ids);
        let mut g = PromptGrads::zeros_like(prompt);
        g.add_task_prefix(&backbone.backward_to_prompts(&trace, &d)?);
        for (s, v) in sum.iter_mut().zip(g.flat()) {
            *s += reduce(v.as_f64());
        }
    }
    mean_map(sum, data.len(), prompt.flat())
}

/// Flat view of every backbone parameter in canonical order.
pub fn flat_params<T: Scalar>(p: &Params<T>) -> Vec<T> {
    p.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
}

/// Per-sample parameter gradient of a full model whose prefix is the given
/// slots; the prefix gradient is routed into the embedding rows.
pub(crate) fn full_sample_grad<T: Scalar>(
    model: &Backbone<T>,
    slots: &[Slot],
    e: &Encoded,
    d_out: impl Fn(&Matrix<T>) -> Matrix<T>,
    grads: &mut Params<T>,
) -> Result<f64> {
    let prefix = model.prefix_rows(slots);
    let trace = model.forward(&prefix, &e.input_ids, &e.output_ids)?;
    let nll = nll_with_grad(trace.log_probs(), &e.output_ids, 0.0).0;
    let d = d_out(trace.log_probs());
    let dprefix = model.backward_full(&trace, &d, grads)?;
    for (r, s) in slots.iter().enumerate() {
        for &(id, w) in &s.terms {
            axpy(grads.embed.row_mut(id as usize), T::of(w), dprefix.row(r));
        }
    }
    Ok(nll)
}

fn full_importance<T: Scalar>(
    model: &Backbone<T>,
    slots: &[Slot],
    data: &[Encoded],
    d_out: impl Fn(&Matrix<T>, &Encoded) -> Matrix<T>,
    reduce: impl Fn(f64) -> f64,
) -> Result<ImportanceMap> {
    if data.is_empty() {
        return Err(empty_data());
    }
    let mut grads = Params::zeros(model.dims(), model.vocab().len());
    let mut sum = vec![0.0; grads.num_params()];
    for e in data {
        grads.fill_zero();
        full_sample_grad(model, slots, e, |lp| d_out(lp, e), &mut grads)?;
        for (s, v) in sum.iter_mut().zip(grads.tensors().into_iter().flat_map(|t| t.iter())) {
            *s += reduce(v.as_f64());
        }
    }
    mean_map(sum, data.len(), flat_params(model.params()))
}

pub fn ewc_importance_full<T: Scalar>(model: &Backbone<T>, slots: &[Slot], data: &[Encoded]) -> Result<ImportanceMap> {
    full_importance(model, slots, data, |lp, e| nll_with_grad(lp, &e.output_ids, 1.0).1, |g| g * g)
}

pub fn mas_importance_full<T: Scalar>(model: &Backbone<T>, slots: &[Slot], data: &[Encoded]) -> Result<ImportanceMap> {
    full_importance(model, slots, data, |lp, e| sq_norm_grad(lp, &e.output_ids), f64::abs)
}
