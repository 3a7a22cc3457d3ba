use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Transformer dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
}

impl Default for BackboneDims {
    fn default() -> Self {
        Self { d_model: 64, n_heads: 4, d_ff: 128, n_enc_layers: 2, n_dec_layers: 2 }
    }
}

impl BackboneDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(crate::Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ff == 0 {
            return Err(crate::Error::Config("d_ff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttnParams<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FfParams<T> {
    pub w1: Matrix<T>,
    pub w2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncLayer<T> {
    pub ln_attn: Vec<T>,
    pub attn: AttnParams<T>,
    pub ln_ff: Vec<T>,
    pub ff: FfParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecLayer<T> {
    pub ln_self: Vec<T>,
    pub self_attn: AttnParams<T>,
    pub ln_cross: Vec<T>,
    pub cross_attn: AttnParams<T>,
    pub ln_ff: Vec<T>,
    pub ff: FfParams<T>,
}

/// Every backbone parameter. The embedding table is tied to the output
/// projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub embed: Matrix<T>,
    pub enc: Vec<EncLayer<T>>,
    pub enc_ln: Vec<T>,
    pub dec: Vec<DecLayer<T>>,
    pub dec_ln: Vec<T>,
}

fn normal<T: Scalar, R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::of(z * std)
        })
        .collect();
    Matrix::from_vec(rows, cols, data)
}

impl<T: Scalar> AttnParams<T> {
    fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            wq: normal(d, d, s, rng),
            wk: normal(d, d, s, rng),
            wv: normal(d, d, s, rng),
            wo: normal(d, d, s, rng),
        }
    }

    fn zeros(d: usize) -> Self {
        Self { wq: Matrix::zeros(d, d), wk: Matrix::zeros(d, d), wv: Matrix::zeros(d, d), wo: Matrix::zeros(d, d) }
    }
}

impl<T: Scalar> FfParams<T> {
    fn init<R: Rng>(d: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            w1: normal(d, d_ff, 1.0 / (d as f64).sqrt(), rng),
            w2: normal(d_ff, d, 1.0 / (d_ff as f64).sqrt(), rng),
        }
    }

    fn zeros(d: usize, d_ff: usize) -> Self {
        Self { w1: Matrix::zeros(d, d_ff), w2: Matrix::zeros(d_ff, d) }
    }
}

impl<T: Scalar> Params<T> {
    pub fn init<R: Rng>(dims: &BackboneDims, vocab_size: usize, rng: &mut R) -> Self {
        let d = dims.d_model;
        let ones = || vec![T::one(); d];
        Self {
            embed: normal(vocab_size, d, 1.0, rng),
            enc: (0..dims.n_enc_layers)
                .map(|_| EncLayer {
                    ln_attn: ones(),
                    attn: AttnParams::init(d, rng),
                    ln_ff: ones(),
                    ff: FfParams::init(d, dims.d_ff, rng),
                })
                .collect(),
            enc_ln: ones(),
            dec: (0..dims.n_dec_layers)
                .map(|_| DecLayer {
                    ln_self: ones(),
                    self_attn: AttnParams::init(d, rng),
                    ln_cross: ones(),
                    cross_attn: AttnParams::init(d, rng),
                    ln_ff: ones(),
                    ff: FfParams::init(d, dims.d_ff, rng),
                })
                .collect(),
            dec_ln: ones(),
        }
    }

    pub fn zeros(dims: &BackboneDims, vocab_size: usize) -> Self {
        let d = dims.d_model;
        let zeros = || vec![T::zero(); d];
        Self {
            embed: Matrix::zeros(vocab_size, d),
            enc: (0..dims.n_enc_layers)
                .map(|_| EncLayer {
                    ln_attn: zeros(),
                    attn: AttnParams::zeros(d),
                    ln_ff: zeros(),
                    ff: FfParams::zeros(d, dims.d_ff),
                })
                .collect(),
            enc_ln: zeros(),
            dec: (0..dims.n_dec_layers)
                .map(|_| DecLayer {
                    ln_self: zeros(),
                    self_attn: AttnParams::zeros(d),
                    ln_cross: zeros(),
                    cross_attn: AttnParams::zeros(d),
                    ln_ff: zeros(),
                    ff: FfParams::zeros(d, dims.d_ff),
                })
                .collect(),
            dec_ln: zeros(),
        }
    }

    /// All tensors in a fixed canonical order (used for digests, files and
    /// optimizers).
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![self.embed.data()];
        for l in &self.enc {
            out.push(&l.ln_attn);
            push_attn(&mut out, &l.attn);
            out.push(&l.ln_ff);
            out.push(l.ff.w1.data());
            out.push(l.ff.w2.data());
        }
        out.push(&self.enc_ln);
        for l in &self.dec {
            out.push(&l.ln_self);
            push_attn(&mut out, &l.self_attn);
            out.push(&l.ln_cross);
            push_attn(&mut out, &l.cross_attn);
            out.push(&l.ln_ff);
            out.push(l.ff.w1.data());
            out.push(l.ff.w2.data());
        }
        out.push(&self.dec_ln);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![self.embed.data_mut()];
        for l in &mut self.enc {
            out.push(&mut l.ln_attn);
            push_attn_mut(&mut out, &mut l.attn);
            out.push(&mut l.ln_ff);
            out.push(l.ff.w1.data_mut());
            out.push(l.ff.w2.data_mut());
        }
        out.push(&mut self.enc_ln);
        for l in &mut self.dec {
            out.push(&mut l.ln_self);
            push_attn_mut(&mut out, &mut l.self_attn);
            out.push(&mut l.ln_cross);
            push_attn_mut(&mut out, &mut l.cross_attn);
            out.push(&mut l.ln_ff);
            out.push(l.ff.w1.data_mut());
            out.push(l.ff.w2.data_mut());
        }
        out.push(&mut self.dec_ln);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn convert<U: Scalar>(&self, dims: &BackboneDims) -> Params<U> {
        let mut out = Params::<U>::zeros(dims, self.embed.rows());
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.as_f64());
            }
        }
        out
    }
}

fn push_attn<'a, T: Scalar>(out: &mut Vec<&'a [T]>, a: &'a AttnParams<T>) {
    out.push(a.wq.data());
    out.push(a.wk.data());
    out.push(a.wv.data());
    out.push(a.wo.data());
}

fn push_attn_mut<'a, T: Scalar>(out: &mut Vec<&'a mut [T]>, a: &'a mut AttnParams<T>) {
    out.push(a.wq.data_mut());
    out.push(a.wk.data_mut());
    out.push(a.wv.data_mut());
    out.push(a.wo.data_mut());
}
