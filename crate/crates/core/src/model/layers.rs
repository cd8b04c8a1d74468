//! Forward/backward primitives over row-major `[rows, cols]` activations.
//! Backward functions accumulate into the gradient buffers they are given.

use rand::Rng;

use super::params::{Attention, FeedForward, Linear, Norm};
use super::tensor::{gemm, Scalar, View};

const LN_EPS: f64 = 1e-5;

pub fn linear_fwd<T: Scalar>(x: &[T], rows: usize, lin: &Linear<T>) -> Vec<T> {
    let (i, o) = (lin.w.shape[0], lin.w.shape[1]);
    let mut y = vec![T::zero(); rows * o];
    gemm(
        rows,
        i,
        o,
        T::one(),
        x,
        View::rows(0, i),
        &lin.w.data,
        View::rows(0, o),
        T::zero(),
        &mut y,
        View::rows(0, o),
    );
    for r in 0..rows {
        for (yv, b) in y[r * o..(r + 1) * o].iter_mut().zip(&lin.b.data) {
            *yv += *b;
        }
    }
    y
}

pub fn linear_bwd<T: Scalar>(
    x: &[T],
    rows: usize,
    dy: &[T],
    lin: &Linear<T>,
    grad: &mut Linear<T>,
    dx: Option<&mut [T]>,
) {
    let (i, o) = (lin.w.shape[0], lin.w.shape[1]);
    gemm(
        i,
        rows,
        o,
        T::one(),
        x,
        View::rows(0, i).t(),
        dy,
        View::rows(0, o),
        T::one(),
        &mut grad.w.data,
        View::rows(0, o),
    );
    for r in 0..rows {
        for (gb, d) in grad.b.data.iter_mut().zip(&dy[r * o..(r + 1) * o]) {
            *gb += *d;
        }
    }
    if let Some(dx) = dx {
        gemm(
            rows,
            o,
            i,
            T::one(),
            dy,
            View::rows(0, o),
            &lin.w.data,
            View::rows(0, o).t(),
            T::one(),
            dx,
            View::rows(0, i),
        );
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

pub fn layer_norm_fwd<T: Scalar>(x: &[T], rows: usize, norm: &Norm<T>) -> (Vec<T>, NormCache<T>) {
    let d = norm.g.len();
    let mut y = vec![T::zero(); rows * d];
    let mut xhat = vec![T::zero(); rows * d];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::c(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * norm.g.data[j] + norm.b.data[j];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_bwd<T: Scalar>(dy: &[T], cache: &NormCache<T>, norm: &Norm<T>, grad: &mut Norm<T>, dx: &mut [T]) {
    let d = norm.g.len();
    let rows = cache.rstd.len();
    let inv_d = T::c(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            grad.g.data[j] += dyr[j] * xh[j];
            grad.b.data[j] += dyr[j];
            dxhat[j] = dyr[j] * norm.g.data[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
        }
        let rs = cache.rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - inv_d * sum_dxhat - xh[j] * inv_d * sum_dxhat_xhat);
        }
    }
}

/// Scale factors (`0` or `1/(1-p)`) for inverted dropout.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<T> {
    let keep = T::c(1.0 / (1.0 - p));
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect()
}

/// Batch geometry shared by an attention block's queries and keys.
#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub d: usize,
}

impl AttnShape {
    fn dh(&self) -> usize {
        self.d / self.heads
    }

    fn q_view(&self, b: usize, h: usize) -> View {
        View::rows(b * self.lq * self.d + h * self.dh(), self.d)
    }

    fn k_view(&self, b: usize, h: usize) -> View {
        View::rows(b * self.lk * self.d + h * self.dh(), self.d)
    }

    fn p_off(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.lq * self.lk
    }

    /// Number of keys query `i` of example `b` may attend to. Valid keys are
    /// always a prefix because padding sits at the end.
    fn n_valid(&self, klens: &[usize], causal: bool, b: usize, i: usize) -> usize {
        let n = klens[b].min(self.lk);
        let n = if causal { n.min(i + 1) } else { n };
        n.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights before dropout, `[batch, heads, lq, lk]`.
    pub probs: Vec<T>,
    drop: Option<Vec<T>>,
    o: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_fwd<T: Scalar, R: Rng + ?Sized>(
    p: &Attention<T>,
    xq: &[T],
    xkv: &[T],
    shape: AttnShape,
    klens: &[usize],
    causal: bool,
    dropout: Option<(f64, &mut R)>,
) -> (Vec<T>, AttnCache<T>) {
    let AttnShape {
        batch,
        lq,
        lk,
        heads,
        d,
    } = shape;
    let dh = shape.dh();
    let q = linear_fwd(xq, batch * lq, &p.q);
    let k = linear_fwd(xkv, batch * lk, &p.k);
    let v = linear_fwd(xkv, batch * lk, &p.v);
    let mut probs = vec![T::zero(); batch * heads * lq * lk];
    let scale = T::c(1.0 / (dh as f64).sqrt());
    for b in 0..batch {
        for h in 0..heads {
            let off = shape.p_off(b, h);
            gemm(
                lq,
                dh,
                lk,
                scale,
                &q,
                shape.q_view(b, h),
                &k,
                shape.k_view(b, h).t(),
                T::zero(),
                &mut probs,
                View::rows(off, lk),
            );
            for i in 0..lq {
                let n = shape.n_valid(klens, causal, b, i);
                let row = &mut probs[off + i * lk..off + (i + 1) * lk];
                let m = row[..n].iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row[..n].iter_mut() {
                    *x = (*x - m).exp();
                    sum += *x;
                }
                for x in row[..n].iter_mut() {
                    *x /= sum;
                }
                row[n..].iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }
    let drop = match dropout {
        Some((rate, rng)) if rate > 0.0 => Some(dropout_mask::<T, R>(probs.len(), rate, rng)),
        _ => None,
    };
    let mut o = vec![T::zero(); batch * lq * d];
    let dropped: Option<Vec<T>> = drop
        .as_ref()
        .map(|m| probs.iter().zip(m).map(|(a, b)| *a * *b).collect());
    let weights = dropped.as_deref().unwrap_or(&probs);
    for b in 0..batch {
        for h in 0..heads {
            gemm(
                lq,
                lk,
                dh,
                T::one(),
                weights,
                View::rows(shape.p_off(b, h), lk),
                &v,
                shape.k_view(b, h),
                T::zero(),
                &mut o,
                shape.q_view(b, h),
            );
        }
    }
    let out = linear_fwd(&o, batch * lq, &p.o);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            drop,
            o,
        },
    )
}

/// Backpropagates through an attention block. `dxq` and `dxkv` may be the
/// same logical input (self-attention); the caller adds them as needed.
#[allow(clippy::too_many_arguments)]
pub fn attention_bwd<T: Scalar>(
    p: &Attention<T>,
    grad: &mut Attention<T>,
    xq: &[T],
    xkv: &[T],
    shape: AttnShape,
    cache: &AttnCache<T>,
    dout: &[T],
    dxq: &mut [T],
    dxkv: &mut [T],
) {
    let AttnShape {
        batch,
        lq,
        lk,
        heads,
        d,
    } = shape;
    let dh = shape.dh();
    let mut d_o = vec![T::zero(); batch * lq * d];
    linear_bwd(&cache.o, batch * lq, dout, &p.o, &mut grad.o, Some(&mut d_o));

    let mut dq = vec![T::zero(); batch * lq * d];
    let mut dk = vec![T::zero(); batch * lk * d];
    let mut dv = vec![T::zero(); batch * lk * d];
    let mut dp = vec![T::zero(); lq * lk];
    let mut pd = vec![T::zero(); lq * lk];
    let scale = T::c(1.0 / (dh as f64).sqrt());
    for b in 0..batch {
        for h in 0..heads {
            let off = shape.p_off(b, h);
            let probs = &cache.probs[off..off + lq * lk];
            gemm(
                lq,
                dh,
                lk,
                T::one(),
                &d_o,
                shape.q_view(b, h),
                &cache.v,
                shape.k_view(b, h).t(),
                T::zero(),
                &mut dp,
                View::rows(0, lk),
            );
            let weights: &[T] = match &cache.drop {
                Some(m) => {
                    for ((w, pr), mk) in pd.iter_mut().zip(probs).zip(&m[off..off + lq * lk]) {
                        *w = *pr * *mk;
                    }
                    for (g, mk) in dp.iter_mut().zip(&m[off..off + lq * lk]) {
                        *g *= *mk;
                    }
                    &pd
                }
                None => probs,
            };
            gemm(
                lk,
                lq,
                dh,
                T::one(),
                weights,
                View::rows(0, lk).t(),
                &d_o,
                shape.q_view(b, h),
                T::zero(),
                &mut dv,
                shape.k_view(b, h),
            );
            // dp becomes dS in place.
            for i in 0..lq {
                let pr = &probs[i * lk..(i + 1) * lk];
                let g = &mut dp[i * lk..(i + 1) * lk];
                let dot: T = pr.iter().zip(g.iter()).map(|(a, b)| *a * *b).sum();
                for (gv, pv) in g.iter_mut().zip(pr) {
                    *gv = *pv * (*gv - dot) * scale;
                }
            }
            gemm(
                lq,
                lk,
                dh,
                T::one(),
                &dp,
                View::rows(0, lk),
                &cache.k,
                shape.k_view(b, h),
                T::zero(),
                &mut dq,
                shape.q_view(b, h),
            );
            gemm(
                lk,
                lq,
                dh,
                T::one(),
                &dp,
                View::rows(0, lk).t(),
                &cache.q,
                shape.q_view(b, h),
                T::zero(),
                &mut dk,
                shape.k_view(b, h),
            );
        }
    }
    linear_bwd(xq, batch * lq, &dq, &p.q, &mut grad.q, Some(dxq));
    linear_bwd(xkv, batch * lk, &dk, &p.k, &mut grad.k, Some(&mut *dxkv));
    linear_bwd(xkv, batch * lk, &dv, &p.v, &mut grad.v, Some(dxkv));
}

#[derive(Debug, Clone)]
pub struct FfnCache<T> {
    pre: Vec<T>,
    act: Vec<T>,
    drop: Option<Vec<T>>,
}

pub fn ffn_fwd<T: Scalar, R: Rng + ?Sized>(
    p: &FeedForward<T>,
    x: &[T],
    rows: usize,
    dropout: Option<(f64, &mut R)>,
) -> (Vec<T>, FfnCache<T>) {
    let pre = linear_fwd(x, rows, &p.l1);
    let mut act: Vec<T> = pre.iter().map(|&v| v.max(T::zero())).collect();
    let drop = match dropout {
        Some((rate, rng)) if rate > 0.0 => {
            let m = dropout_mask::<T, R>(act.len(), rate, rng);
            act.iter_mut().zip(&m).for_each(|(a, k)| *a *= *k);
            Some(m)
        }
        _ => None,
    };
    let out = linear_fwd(&act, rows, &p.l2);
    (out, FfnCache { pre, act, drop })
}

pub fn ffn_bwd<T: Scalar>(
    p: &FeedForward<T>,
    grad: &mut FeedForward<T>,
    x: &[T],
    rows: usize,
    cache: &FfnCache<T>,
    dout: &[T],
    dx: &mut [T],
) {
    let mut dact = vec![T::zero(); cache.act.len()];
    linear_bwd(&cache.act, rows, dout, &p.l2, &mut grad.l2, Some(&mut dact));
    if let Some(m) = &cache.drop {
        dact.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
    }
    for (g, pre) in dact.iter_mut().zip(&cache.pre) {
        if *pre <= T::zero() {
            *g = T::zero();
        }
    }
    linear_bwd(x, rows, &dact, &p.l1, &mut grad.l1, Some(dx));
}
