//! First-order optimizers over lists of flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Per-parameter second-moment scaling without momentum (RMSProp-style,
    /// bias corrected).
    Adaptive { beta2: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adaptive { beta2: 0.999, eps: 1e-8 }
    }
}

/// Accumulators for exactly the parameter slices handed to [`update`].
///
/// [`update`]: OptimizerState::update
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub step: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, first: Vec::new(), second: Vec::new() }
    }

    /// Number of parameter values the state currently tracks.
    pub fn tracked(&self) -> usize {
        self.second.iter().map(Vec::len).sum()
    }

    /// One update. `params[i]` and `grads[i]` must keep the same lengths
    /// across calls; new trailing tensors get fresh accumulators.
    pub fn update(&mut self, params: &mut [&mut [T]], grads: &[&[T]], lr_scale: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        while self.second.len() < params.len() {
            let n = params[self.second.len()].len();
            self.first.push(vec![T::zero(); n]);
            self.second.push(vec![T::zero(); n]);
        }
        self.step += 1;
        let t = self.step as i32;
        let lr = self.lr * lr_scale;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.len(), g.len(), "tensor {i}: parameter/gradient length mismatch");
            let v = &mut self.second[i];
            let m = &mut self.first[i];
            match self.kind {
                OptimizerKind::Adaptive { beta2, eps } => {
                    let b2 = T::of(beta2);
                    let corr = 1.0 - beta2.powi(t);
                    for ((pj, &gj), vj) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                        *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                        let denom = (*vj / T::of(corr)).sqrt() + T::of(eps);
                        *pj -= T::of(lr) * gj / denom;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::of(1.0 - beta1.powi(t));
                    let c2 = T::of(1.0 - beta2.powi(t));
                    for (((pj, &gj), vj), mj) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()).zip(m.iter_mut()) {
                        *mj = b1 * *mj + (T::one() - b1) * gj;
                        *vj = b2 * *vj + (T::one() - b2) * gj * gj;
                        let denom = (*vj / c2).sqrt() + T::of(eps);
                        *pj -= T::of(lr) * (*mj / c1) / denom;
                    }
                }
            }
        }
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm<T: Scalar>(grads: &[&[T]]) -> f64 {
    grads.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut [T]], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
