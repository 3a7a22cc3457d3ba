//! Full-parameter training of a fresh backbone on a synthetic corpus.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{clip_global_norm, OptimizerKind, OptimizerState};
use crate::scalar::Scalar;
use crate::tensor::{axpy, Matrix};
use crate::vocab::TokenId;

use super::{Backbone, Params};

/// One prefix row: a weighted sum of embedding-table rows. An empty slot is
/// the zero vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub terms: Vec<(TokenId, f64)>,
}

impl Slot {
    pub fn token(id: TokenId) -> Self {
        Self { terms: vec![(id, 1.0)] }
    }
}

/// A training pair together with the prefix rows it is read under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub prefix: Vec<Slot>,
    pub input_ids: Vec<TokenId>,
    pub output_ids: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 16, lr: 2e-3, warmup_steps: 200, clip_norm: 1.0, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PretrainLog {
    /// Mean per-token negative log-likelihood of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

impl<T: Scalar> Backbone<T> {
    /// Materializes summed slots against the current embedding table.
    pub fn prefix_rows(&self, slots: &[Slot]) -> Matrix<T> {
        let d = self.dims.d_model;
        let mut m = Matrix::zeros(slots.len(), d);
        for (r, s) in slots.iter().enumerate() {
            for &(id, w) in &s.terms {
                axpy(m.row_mut(r), T::of(w), self.params.embed.row(id as usize));
            }
        }
        m
    }

    /// Trains every parameter on `corpus`, then freezes the model.
    /// `on_epoch(epoch, mean_token_nll)` is called after each epoch.
    pub fn pretrain(
        mut self,
        corpus: &[PretrainExample],
        cfg: &PretrainConfig,
        mut on_epoch: impl FnMut(usize, f64),
    ) -> Result<(Self, PretrainLog)> {
        if self.frozen {
            return Err(Error::Frozen("pretrain on a frozen backbone"));
        }
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = OptimizerState::<T>::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.98, eps: 1e-9 }, cfg.lr);
        let mut grads = Params::<T>::zeros(&self.dims, self.vocab.len());
        let batch = cfg.batch_size.max(1);
        let total_steps = cfg.epochs * corpus.len().div_ceil(batch);
        let mut log = PretrainLog::default();
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut epoch_nll, mut epoch_tokens) = (0.0, 0usize);
            for chunk in order.chunks(batch) {
                grads.fill_zero();
                let tokens: usize = chunk.iter().map(|&i| corpus[i].output_ids.len()).sum();
                if tokens == 0 {
                    continue;
                }
                let w = T::one() / T::of(tokens as f64);
                let mut batch_nll = 0.0;
                for &i in chunk {
                    let ex = &corpus[i];
                    let prefix = self.prefix_rows(&ex.prefix);
                    let trace = self.forward(&prefix, &ex.input_ids, &ex.output_ids)?;
                    let lp = trace.log_probs();
                    let mut d = Matrix::zeros(lp.rows(), lp.cols());
                    for (r, &y) in ex.output_ids.iter().enumerate() {
                        batch_nll -= lp.get(r, y as usize).as_f64();
                        d.set(r, y as usize, -w);
                    }
                    let dprefix = self.backward_full(&trace, &d, &mut grads)?;
                    for (r, s) in ex.prefix.iter().enumerate() {
                        for &(id, wt) in &s.terms {
                            axpy(grads.embed.row_mut(id as usize), T::of(wt), dprefix.row(r));
                        }
                    }
                }
                if !batch_nll.is_finite() {
                    return Err(Error::NonFinite { context: format!("pretrain epoch {epoch} step {}", log.steps), value: batch_nll });
                }
                epoch_nll += batch_nll;
                epoch_tokens += tokens;
                let step = log.steps;
                let scale = if step < cfg.warmup_steps {
                    (step + 1) as f64 / cfg.warmup_steps as f64
                } else {
                    let progress = (step - cfg.warmup_steps) as f64 / (total_steps.saturating_sub(cfg.warmup_steps).max(1)) as f64;
                    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
                };
                let mut g = grads.tensors_mut();
                clip_global_norm(&mut g, cfg.clip_norm);
                let g: Vec<&[T]> = g.into_iter().map(|s| &*s).collect();
                let mut p = self.params.tensors_mut();
                opt.update(&mut p, &g, scale);
                log.steps += 1;
            }
            let mean = epoch_nll / epoch_tokens.max(1) as f64;
            log.epoch_loss.push(mean);
            on_epoch(epoch, mean);
        }
        self.freeze();
        Ok((self, log))
    }
}
