//! Teacher-forced forward pass, reverse-mode gradients and incremental
//! decoding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, log_softmax, softmax_in_place, Matrix};
use crate::vocab::TokenId;

use super::layers::{
    add_positions, attn_bwd, attn_fwd, ff_bwd, ff_fwd, gelu, positions, rms_norm_bwd, rms_norm_fwd,
    rms_norm_row, AttnCache, FfCache, NormCache,
};
use super::params::{AttnParams, Params};
use super::Backbone;

#[derive(Clone, Debug)]
struct EncCache<T> {
    n1: NormCache<T>,
    attn: AttnCache<T>,
    n2: NormCache<T>,
    ff: FfCache<T>,
}

#[derive(Clone, Debug)]
struct DecCache<T> {
    n1: NormCache<T>,
    self_attn: AttnCache<T>,
    n2: NormCache<T>,
    cross: AttnCache<T>,
    n3: NormCache<T>,
    ff: FfCache<T>,
}

/// Everything recorded by one teacher-forced forward pass; the only way to
/// obtain gradients.
#[derive(Clone, Debug)]
pub struct Trace<T> {
    n_prefix: usize,
    input_ids: Vec<TokenId>,
    dec_ids: Vec<TokenId>,
    enc: Vec<EncCache<T>>,
    enc_final: NormCache<T>,
    dec: Vec<DecCache<T>>,
    dec_final: NormCache<T>,
    hidden: Matrix<T>,
    log_probs: Matrix<T>,
}

impl<T: Scalar> Trace<T> {
    /// `t × |V|` log-probabilities, one row per output position.
    pub fn log_probs(&self) -> &Matrix<T> {
        &self.log_probs
    }

    pub fn n_prefix(&self) -> usize {
        self.n_prefix
    }

    pub fn output_len(&self) -> usize {
        self.log_probs.rows()
    }
}

/// Log-probability tensors for a batch of samples. Samples are kept at
/// their own lengths, so there are no padded positions to mask.
#[derive(Clone, Debug)]
pub struct BatchLogits<T> {
    pub samples: Vec<Matrix<T>>,
}

impl<T: Scalar> BatchLogits<T> {
    pub fn from_traces(traces: &[Trace<T>]) -> Self {
        Self { samples: traces.iter().map(|t| t.log_probs.clone()).collect() }
    }

    /// Per-position validity mask of the padded `batch × max_len` layout.
    pub fn mask(&self) -> Vec<Vec<bool>> {
        let max = self.samples.iter().map(Matrix::rows).max().unwrap_or(0);
        self.samples.iter().map(|s| (0..max).map(|p| p < s.rows()).collect()).collect()
    }
}

/// Decoding strategy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    Sample { temperature: f64, top_k: usize },
}

impl<T: Scalar> Backbone<T> {
    fn logit_scale(&self) -> T {
        T::one() / T::of(self.dims.d_model as f64).sqrt()
    }

    fn check_prefix(&self, prefix: &Matrix<T>) -> Result<()> {
        if prefix.cols() != self.dims.d_model {
            return Err(Error::Shape(format!(
                "prompt width {} but model width {}",
                prefix.cols(),
                self.dims.d_model
            )));
        }
        if prefix.rows() == 0 {
            return Err(Error::Shape("prompt must have at least one row".into()));
        }
        Ok(())
    }

    fn check_ids(&self, ids: &[TokenId]) -> Result<()> {
        let v = self.vocab.len() as TokenId;
        match ids.iter().find(|&&i| i >= v) {
            Some(bad) => Err(Error::Shape(format!("token id {bad} outside vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn embed_ids(&self, ids: &[TokenId]) -> Matrix<T> {
        let d = self.dims.d_model;
        let mut m = Matrix::zeros(0, d);
        for &id in ids {
            m.push_row(self.params.embed.row(id as usize));
        }
        m
    }

    fn encode(&self, prefix: &Matrix<T>, input_ids: &[TokenId]) -> (Matrix<T>, Vec<EncCache<T>>, NormCache<T>) {
        let p = &self.params;
        let h = self.dims.n_heads;
        let mut x = prefix.vstack(&self.embed_ids(input_ids));
        add_positions(&mut x, 0);
        let mut caches = Vec::with_capacity(p.enc.len());
        for layer in &p.enc {
            let (n1, c1) = rms_norm_fwd(&x, &layer.ln_attn);
            let (a, ca) = attn_fwd(&layer.attn, &n1, &n1, h, false);
            x.add_assign(&a);
            let (n2, c2) = rms_norm_fwd(&x, &layer.ln_ff);
            let (f, cf) = ff_fwd(&layer.ff, &n2);
            x.add_assign(&f);
            caches.push(EncCache { n1: c1, attn: ca, n2: c2, ff: cf });
        }
        let (out, cfin) = rms_norm_fwd(&x, &p.enc_ln);
        (out, caches, cfin)
    }

    /// Teacher-forced forward pass. `prefix` rows are prepended to the
    /// embedded input before positions are added; the decoder reads
    /// `[PAD, output_ids[..t-1]]` and predicts `output_ids`.
    pub fn forward(&self, prefix: &Matrix<T>, input_ids: &[TokenId], output_ids: &[TokenId]) -> Result<Trace<T>> {
        self.check_prefix(prefix)?;
        self.check_ids(input_ids)?;
        self.check_ids(output_ids)?;
        let p = &self.params;
        let h = self.dims.n_heads;
        let (enc_out, enc, enc_final) = self.encode(prefix, input_ids);

        let mut dec_ids = Vec::with_capacity(output_ids.len());
        if !output_ids.is_empty() {
            dec_ids.push(self.vocab.special().pad);
            dec_ids.extend_from_slice(&output_ids[..output_ids.len() - 1]);
        }
        let mut y = self.embed_ids(&dec_ids);
        add_positions(&mut y, 0);
        let mut dec = Vec::with_capacity(p.dec.len());
        for layer in &p.dec {
            let (n1, c1) = rms_norm_fwd(&y, &layer.ln_self);
            let (a, ca) = attn_fwd(&layer.self_attn, &n1, &n1, h, true);
            y.add_assign(&a);
            let (n2, c2) = rms_norm_fwd(&y, &layer.ln_cross);
            let (c, cc) = attn_fwd(&layer.cross_attn, &n2, &enc_out, h, false);
            y.add_assign(&c);
            let (n3, c3) = rms_norm_fwd(&y, &layer.ln_ff);
            let (f, cf) = ff_fwd(&layer.ff, &n3);
            y.add_assign(&f);
            dec.push(DecCache { n1: c1, self_attn: ca, n2: c2, cross: cc, n3: c3, ff: cf });
        }
        let (hidden, dec_final) = rms_norm_fwd(&y, &p.dec_ln);
        let mut logits = hidden.matmul_t(&p.embed);
        logits.scale(self.logit_scale());
        let mut log_probs = Matrix::zeros(0, self.vocab.len());
        for r in 0..logits.rows() {
            log_probs.push_row(&log_softmax(logits.row(r)));
        }
        Ok(Trace {
            n_prefix: prefix.rows(),
            input_ids: input_ids.to_vec(),
            dec_ids,
            enc,
            enc_final,
            dec,
            dec_final,
            hidden,
            log_probs,
        })
    }

    /// Gradient of a loss with respect to the prompt rows of a recorded
    /// forward pass, given `∂loss/∂log_probs`. Backbone parameters receive
    /// nothing.
    pub fn backward_to_prompts(&self, trace: &Trace<T>, d_log_probs: &Matrix<T>) -> Result<Matrix<T>> {
        self.backward_impl(trace, d_log_probs, None)
    }

    /// Full backward pass accumulating parameter gradients into `grads`.
    /// Only legal while the backbone is trainable.
    pub fn backward_full(
        &self,
        trace: &Trace<T>,
        d_log_probs: &Matrix<T>,
        grads: &mut Params<T>,
    ) -> Result<Matrix<T>> {
        if self.frozen {
            return Err(Error::Frozen("parameter gradients requested"));
        }
        self.backward_impl(trace, d_log_probs, Some(grads))
    }

    fn backward_impl(
        &self,
        trace: &Trace<T>,
        d_log_probs: &Matrix<T>,
        mut grads: Option<&mut Params<T>>,
    ) -> Result<Matrix<T>> {
        if d_log_probs.shape() != trace.log_probs.shape() {
            return Err(Error::Shape(format!(
                "loss gradient {:?} vs log-probs {:?}",
                d_log_probs.shape(),
                trace.log_probs.shape()
            )));
        }
        let p = &self.params;
        let h = self.dims.n_heads;
        let d = self.dims.d_model;
        let t = trace.log_probs.rows();
        let n_enc = trace.n_prefix + trace.input_ids.len();
        if t == 0 {
            return Ok(Matrix::zeros(trace.n_prefix, d));
        }

        // log-softmax, then the tied output projection.
        let mut dz = Matrix::zeros(t, self.vocab.len());
        for r in 0..t {
            let g = d_log_probs.row(r);
            let total: T = g.iter().copied().sum();
            for ((o, &gi), &lp) in dz.row_mut(r).iter_mut().zip(g).zip(trace.log_probs.row(r)) {
                *o = gi - lp.exp() * total;
            }
        }
        dz.scale(self.logit_scale());
        let dh = dz.matmul(&p.embed);
        if let Some(g) = grads.as_deref_mut() {
            dz.t_matmul_acc(&trace.hidden, &mut g.embed);
        }

        let mut dy = rms_norm_bwd(&trace.dec_final, &p.dec_ln, &dh, grads.as_deref_mut().map(|g| &mut g.dec_ln[..]));
        let mut d_enc_out = Matrix::zeros(n_enc, d);
        for (li, (layer, c)) in p.dec.iter().zip(&trace.dec).enumerate().rev() {
            let mut gl = grads.as_deref_mut().map(|g| &mut g.dec[li]);
            // feed-forward
            let df = ff_bwd(&layer.ff, &c.ff, &dy, gl.as_deref_mut().map(|g| &mut g.ff));
            dy.add_assign(&rms_norm_bwd(&c.n3, &layer.ln_ff, &df, gl.as_deref_mut().map(|g| &mut g.ln_ff[..])));
            // cross-attention
            let (dq, dkv) = attn_bwd(&layer.cross_attn, &c.cross, &dy, h, gl.as_deref_mut().map(|g| &mut g.cross_attn));
            d_enc_out.add_assign(&dkv);
            dy.add_assign(&rms_norm_bwd(&c.n2, &layer.ln_cross, &dq, gl.as_deref_mut().map(|g| &mut g.ln_cross[..])));
            // causal self-attention
            let (mut dq, dkv) = attn_bwd(&layer.self_attn, &c.self_attn, &dy, h, gl.as_deref_mut().map(|g| &mut g.self_attn));
            dq.add_assign(&dkv);
            dy.add_assign(&rms_norm_bwd(&c.n1, &layer.ln_self, &dq, gl.map(|g| &mut g.ln_self[..])));
        }
        if let Some(g) = grads.as_deref_mut() {
            for (r, &id) in trace.dec_ids.iter().enumerate() {
                axpy(g.embed.row_mut(id as usize), T::one(), dy.row(r));
            }
        }

        let mut dx = rms_norm_bwd(&trace.enc_final, &p.enc_ln, &d_enc_out, grads.as_deref_mut().map(|g| &mut g.enc_ln[..]));
        for (li, (layer, c)) in p.enc.iter().zip(&trace.enc).enumerate().rev() {
            let mut gl = grads.as_deref_mut().map(|g| &mut g.enc[li]);
            let df = ff_bwd(&layer.ff, &c.ff, &dx, gl.as_deref_mut().map(|g| &mut g.ff));
            dx.add_assign(&rms_norm_bwd(&c.n2, &layer.ln_ff, &df, gl.as_deref_mut().map(|g| &mut g.ln_ff[..])));
            let (mut dq, dkv) = attn_bwd(&layer.attn, &c.attn, &dx, h, gl.as_deref_mut().map(|g| &mut g.attn));
            dq.add_assign(&dkv);
            dx.add_assign(&rms_norm_bwd(&c.n1, &layer.ln_attn, &dq, gl.map(|g| &mut g.ln_attn[..])));
        }
        if let Some(g) = grads {
            for (r, &id) in trace.input_ids.iter().enumerate() {
                axpy(g.embed.row_mut(id as usize), T::one(), dx.row(trace.n_prefix + r));
            }
        }
        Ok(dx.slice_rows(0, trace.n_prefix))
    }

    /// Autoregressive decoding from `[PAD]`. Stops after emitting EOS or
    /// `max_len` tokens; the returned sequence includes the EOS if one was
    /// emitted.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        prefix: &Matrix<T>,
        input_ids: &[TokenId],
        max_len: usize,
        strategy: Strategy,
        rng: &mut R,
    ) -> Result<Vec<TokenId>> {
        let mut session = self.start_decode(prefix, input_ids)?;
        let eos = self.vocab.special().eos;
        let mut out = Vec::new();
        let mut tok = self.vocab.special().pad;
        for _ in 0..max_len.max(1) {
            let logp = session.step(tok);
            tok = pick(&logp, strategy, rng);
            out.push(tok);
            if tok == eos {
                break;
            }
        }
        Ok(out)
    }

    /// Starts an incremental decoding session over an encoded input.
    pub fn start_decode(&self, prefix: &Matrix<T>, input_ids: &[TokenId]) -> Result<DecodeSession<'_, T>> {
        self.check_prefix(prefix)?;
        self.check_ids(input_ids)?;
        let (enc_out, _, _) = self.encode(prefix, input_ids);
        let layers = self
            .params
            .dec
            .iter()
            .map(|l| LayerState {
                self_k: Matrix::zeros(0, self.dims.d_model),
                self_v: Matrix::zeros(0, self.dims.d_model),
                cross_k: enc_out.matmul(&l.cross_attn.wk),
                cross_v: enc_out.matmul(&l.cross_attn.wv),
            })
            .collect();
        Ok(DecodeSession { model: self, layers, pos: 0 })
    }
}

struct LayerState<T> {
    self_k: Matrix<T>,
    self_v: Matrix<T>,
    cross_k: Matrix<T>,
    cross_v: Matrix<T>,
}

/// Key/value-cached decoder state for one encoded input.
pub struct DecodeSession<'a, T> {
    model: &'a Backbone<T>,
    layers: Vec<LayerState<T>>,
    pos: usize,
}

fn attend<T: Scalar>(q: &[T], k: &Matrix<T>, v: &Matrix<T>, n_heads: usize, out: &mut [T]) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let m = k.rows();
    let mut w = vec![T::zero(); m];
    out.iter_mut().for_each(|o| *o = T::zero());
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(&q[cols.clone()], &k.row(j)[cols.clone()]) * scale;
        }
        softmax_in_place(&mut w);
        for (j, &wj) in w.iter().enumerate() {
            axpy(&mut out[cols.clone()], wj, &v.row(j)[cols.clone()]);
        }
    }
}

fn project<T: Scalar>(x: &[T], w: &Matrix<T>) -> Vec<T> {
    let mut out = vec![T::zero(); w.cols()];
    for (p, &xp) in x.iter().enumerate() {
        axpy(&mut out, xp, w.row(p));
    }
    out
}

fn attn_out<T: Scalar>(x: &mut [T], o: &[T], a: &AttnParams<T>) {
    let y = project(o, &a.wo);
    axpy(x, T::one(), &y);
}

impl<T: Scalar> DecodeSession<'_, T> {
    /// Feeds `token` at the next position and returns the log-probabilities
    /// of the following token.
    pub fn step(&mut self, token: TokenId) -> Vec<T> {
        let m = self.model;
        let d = m.dims.d_model;
        let h = m.dims.n_heads;
        let mut x = m.params.embed.row(token as usize).to_vec();
        let pe = positions::<T>(self.pos + 1, d);
        axpy(&mut x, T::one(), pe.row(self.pos));
        let mut n = vec![T::zero(); d];
        let mut o = vec![T::zero(); d];
        for (layer, st) in m.params.dec.iter().zip(&mut self.layers) {
            rms_norm_row(&x, &layer.ln_self, &mut n);
            let q = project(&n, &layer.self_attn.wq);
            st.self_k.push_row(&project(&n, &layer.self_attn.wk));
            st.self_v.push_row(&project(&n, &layer.self_attn.wv));
            attend(&q, &st.self_k, &st.self_v, h, &mut o);
            attn_out(&mut x, &o, &layer.self_attn);

            rms_norm_row(&x, &layer.ln_cross, &mut n);
            let q = project(&n, &layer.cross_attn.wq);
            attend(&q, &st.cross_k, &st.cross_v, h, &mut o);
            attn_out(&mut x, &o, &layer.cross_attn);

            rms_norm_row(&x, &layer.ln_ff, &mut n);
            let mut act = project(&n, &layer.ff.w1);
            act.iter_mut().for_each(|v| *v = gelu(*v));
            let f = project(&act, &layer.ff.w2);
            axpy(&mut x, T::one(), &f);
        }
        rms_norm_row(&x, &m.params.dec_ln, &mut n);
        let scale = m.logit_scale();
        let logits: Vec<T> = (0..m.vocab.len()).map(|v| dot(&n, m.params.embed.row(v)) * scale).collect();
        self.pos += 1;
        log_softmax(&logits)
    }
}

/// Chooses the next token from a log-probability vector.
pub fn pick<T: Scalar, R: Rng + ?Sized>(logp: &[T], strategy: Strategy, rng: &mut R) -> TokenId {
    match strategy {
        Strategy::Greedy => argmax(logp),
        Strategy::Sample { temperature, top_k } => {
            let mut idx: Vec<usize> = (0..logp.len()).collect();
            // Stable ordering keeps ties deterministic.
            idx.sort_by(|&a, &b| logp[b].partial_cmp(&logp[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
            let k = if top_k == 0 { idx.len() } else { top_k.min(idx.len()) };
            let temp = temperature.max(1e-12);
            let top = logp[idx[0]].as_f64();
            let weights: Vec<f64> = idx[..k].iter().map(|&i| ((logp[i].as_f64() - top) / temp).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (&i, &w) in idx[..k].iter().zip(&weights) {
                if u < w {
                    return i as TokenId;
                }
                u -= w;
            }
            idx[k - 1] as TokenId
        }
    }
}

pub fn argmax<T: Scalar>(v: &[T]) -> TokenId {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as TokenId
}
