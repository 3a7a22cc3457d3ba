//! Forward and backward kernels for the transformer sublayers.
//!
//! Every `*_fwd` returns its output plus a cache; the matching `*_bwd`
//! consumes the cache and an upstream gradient, optionally accumulating
//! parameter gradients.

use crate::scalar::Scalar;
use crate::tensor::{axpy, dot, Matrix};

use super::params::{AttnParams, FfParams};

pub(crate) const NORM_EPS: f64 = 1e-6;

/// Sinusoidal position table, `n × d`.
pub(crate) fn positions<T: Scalar>(n: usize, d: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            pe.set(pos, 2 * i, T::of(a.sin()));
            pe.set(pos, 2 * i + 1, T::of(a.cos()));
        }
    }
    pe
}

pub(crate) fn add_positions<T: Scalar>(x: &mut Matrix<T>, offset: usize) {
    let pe = positions::<T>(offset + x.rows(), x.cols());
    for r in 0..x.rows() {
        axpy(x.row_mut(r), T::one(), pe.row(offset + r));
    }
}

#[derive(Clone, Debug)]
pub(crate) struct NormCache<T> {
    xhat: Matrix<T>,
    inv_rms: Vec<T>,
}

pub(crate) fn rms_norm_row<T: Scalar>(x: &[T], g: &[T], out: &mut [T]) -> T {
    let ms = dot(x, x) / T::of(x.len() as f64);
    let inv = T::one() / (ms + T::of(NORM_EPS)).sqrt();
    for ((o, &xi), &gi) in out.iter_mut().zip(x).zip(g) {
        *o = xi * inv * gi;
    }
    inv
}

pub(crate) fn rms_norm_fwd<T: Scalar>(x: &Matrix<T>, g: &[T]) -> (Matrix<T>, NormCache<T>) {
    let (n, d) = x.shape();
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_rms = Vec::with_capacity(n);
    for r in 0..n {
        let inv = rms_norm_row(x.row(r), g, y.row_mut(r));
        for (h, &xi) in xhat.row_mut(r).iter_mut().zip(x.row(r)) {
            *h = xi * inv;
        }
        inv_rms.push(inv);
    }
    (y, NormCache { xhat, inv_rms })
}

pub(crate) fn rms_norm_bwd<T: Scalar>(
    cache: &NormCache<T>,
    g: &[T],
    dy: &Matrix<T>,
    dg: Option<&mut [T]>,
) -> Matrix<T> {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let dn = T::of(d as f64);
    if let Some(dg) = dg {
        for r in 0..n {
            for ((a, &dyi), &h) in dg.iter_mut().zip(dy.row(r)).zip(cache.xhat.row(r)) {
                *a += dyi * h;
            }
        }
    }
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        for ((o, &dyi), &gi) in dxhat.iter_mut().zip(dy.row(r)).zip(g) {
            *o = dyi * gi;
        }
        let xh = cache.xhat.row(r);
        let m = dot(&dxhat, xh) / dn;
        let inv = cache.inv_rms[r];
        for ((o, &dh), &h) in dx.row_mut(r).iter_mut().zip(&dxhat).zip(xh) {
            *o = (dh - h * m) * inv;
        }
    }
    dx
}

#[derive(Clone, Debug)]
pub(crate) struct AttnCache<T> {
    xq: Matrix<T>,
    xkv: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// `heads × n × m`, row-major.
    probs: Vec<T>,
    o: Matrix<T>,
    causal: bool,
}

pub(crate) fn attn_fwd<T: Scalar>(
    p: &AttnParams<T>,
    xq: &Matrix<T>,
    xkv: &Matrix<T>,
    n_heads: usize,
    causal: bool,
) -> (Matrix<T>, AttnCache<T>) {
    let q = xq.matmul(&p.wq);
    let k = xkv.matmul(&p.wk);
    let v = xkv.matmul(&p.wv);
    let (n, d) = q.shape();
    let m = k.rows();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut probs = vec![T::zero(); n_heads * n * m];
    let mut o = Matrix::zeros(n, d);
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let limit = if causal { (i + 1).min(m) } else { m };
            let pr = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
            for j in 0..limit {
                pr[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            crate::tensor::softmax_in_place(&mut pr[..limit]);
            let oi = &mut o.row_mut(i)[cols.clone()];
            for j in 0..limit {
                axpy(oi, pr[j], &v.row(j)[cols.clone()]);
            }
        }
    }
    let y = o.matmul(&p.wo);
    let cache = AttnCache { xq: xq.clone(), xkv: xkv.clone(), q, k, v, probs, o, causal };
    (y, cache)
}

/// Returns `(dxq, dxkv)`.
pub(crate) fn attn_bwd<T: Scalar>(
    p: &AttnParams<T>,
    c: &AttnCache<T>,
    dy: &Matrix<T>,
    n_heads: usize,
    grads: Option<&mut AttnParams<T>>,
) -> (Matrix<T>, Matrix<T>) {
    let (n, d) = c.q.shape();
    let m = c.k.rows();
    let dh = d / n_heads;
    let scale = T::one() / T::of(dh as f64).sqrt();
    let d_o = dy.matmul_t(&p.wo);
    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(m, d);
    let mut dv = Matrix::zeros(m, d);
    let mut da = vec![T::zero(); m];
    for h in 0..n_heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let limit = if c.causal { (i + 1).min(m) } else { m };
            let pr = &c.probs[(h * n + i) * m..(h * n + i + 1) * m];
            let doi = &d_o.row(i)[cols.clone()];
            let mut weighted = T::zero();
            for j in 0..limit {
                da[j] = dot(doi, &c.v.row(j)[cols.clone()]);
                weighted += pr[j] * da[j];
                axpy(&mut dv.row_mut(j)[cols.clone()], pr[j], doi);
            }
            let qi = &c.q.row(i)[cols.clone()];
            for j in 0..limit {
                let ds = pr[j] * (da[j] - weighted) * scale;
                if ds == T::zero() {
                    continue;
                }
                axpy(&mut dq.row_mut(i)[cols.clone()], ds, &c.k.row(j)[cols.clone()]);
                axpy(&mut dk.row_mut(j)[cols.clone()], ds, qi);
            }
        }
    }
    let dxq = dq.matmul_t(&p.wq);
    let mut dxkv = dk.matmul_t(&p.wk);
    dxkv.add_assign(&dv.matmul_t(&p.wv));
    if let Some(g) = grads {
        c.o.t_matmul_acc(dy, &mut g.wo);
        c.xq.t_matmul_acc(&dq, &mut g.wq);
        c.xkv.t_matmul_acc(&dk, &mut g.wk);
        c.xkv.t_matmul_acc(&dv, &mut g.wv);
    }
    (dxq, dxkv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

#[derive(Clone, Debug)]
pub(crate) struct FfCache<T> {
    x: Matrix<T>,
    pre: Matrix<T>,
    act: Matrix<T>,
}

pub(crate) fn ff_fwd<T: Scalar>(p: &FfParams<T>, x: &Matrix<T>) -> (Matrix<T>, FfCache<T>) {
    let pre = x.matmul(&p.w1);
    let mut act = pre.clone();
    act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    let y = act.matmul(&p.w2);
    (y, FfCache { x: x.clone(), pre, act })
}

pub(crate) fn ff_bwd<T: Scalar>(
    p: &FfParams<T>,
    c: &FfCache<T>,
    dy: &Matrix<T>,
    grads: Option<&mut FfParams<T>>,
) -> Matrix<T> {
    let mut dpre = dy.matmul_t(&p.w2);
    for (g, &x) in dpre.data_mut().iter_mut().zip(c.pre.data()) {
        *g *= gelu_grad(x);
    }
    if let Some(g) = grads {
        c.act.t_matmul_acc(dy, &mut g.w2);
        c.x.t_matmul_acc(&dpre, &mut g.w1);
    }
    dpre.matmul_t(&p.w1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn positions_are_bounded() {
        let pe = positions::<f64>(50, 16);
        assert!(pe.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(pe.get(0, 1), 1.0);
    }
}
