//! Batched forward and reverse passes.
//!
//! Layers are pre-norm: `x + Attn(LN(x))`, `x + FFN(LN(x))`, with a final
//! layer norm on both stacks. Encoder input is
//! `sqrt(d)·tok + type + sinusoid(pos)`; decoder input is
//! `sqrt(d)·tok + type + hard_pos (+ soft_pos)`. Logits use the token table
//! transposed plus `out_bias`.

use rand_chacha::ChaCha8Rng;

use super::layers::{
    attention_bwd, attention_fwd, dropout_mask, ffn_bwd, ffn_fwd, layer_norm_bwd, layer_norm_fwd, AttnCache, AttnShape,
    FfnCache, NormCache,
};
use super::params::ModelParams;
use super::tensor::{gemm, Scalar, View};
use super::{sinusoidal_pe, Example, ModelConfig, ModelError};
use crate::tokenizer::PAD;

/// Padded batch; every sequence is laid out row-major `[size, len]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub enc_len: usize,
    pub dec_len: usize,
    pub enc_tokens: Vec<u32>,
    pub enc_types: Vec<u32>,
    pub enc_lens: Vec<usize>,
    pub dec_tokens: Vec<u32>,
    pub dec_types: Vec<u32>,
    pub dec_hard: Vec<u32>,
    pub dec_soft: Vec<u32>,
    pub dec_lens: Vec<usize>,
    /// `PAD` marks positions excluded from the loss.
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(examples: &[&Example]) -> Batch {
        Self::padded(examples, 0, 0)
    }

    /// Like [`Batch::new`] but pads to at least the given lengths.
    pub fn padded(examples: &[&Example], min_enc: usize, min_dec: usize) -> Batch {
        let size = examples.len();
        let enc_len = examples
            .iter()
            .map(|e| e.enc_tokens.len())
            .max()
            .unwrap_or(0)
            .max(min_enc);
        let dec_len = examples
            .iter()
            .map(|e| e.dec_tokens.len())
            .max()
            .unwrap_or(0)
            .max(min_dec);
        let pad = |v: &[u32], len: usize, fill: u32, out: &mut Vec<u32>| {
            out.extend_from_slice(v);
            out.extend(std::iter::repeat_n(fill, len - v.len()));
        };
        let mut b = Batch {
            size,
            enc_len,
            dec_len,
            enc_tokens: Vec::with_capacity(size * enc_len),
            enc_types: Vec::with_capacity(size * enc_len),
            enc_lens: Vec::with_capacity(size),
            dec_tokens: Vec::with_capacity(size * dec_len),
            dec_types: Vec::with_capacity(size * dec_len),
            dec_hard: Vec::with_capacity(size * dec_len),
            dec_soft: Vec::with_capacity(size * dec_len),
            dec_lens: Vec::with_capacity(size),
            targets: Vec::with_capacity(size * dec_len),
        };
        for e in examples {
            pad(&e.enc_tokens, enc_len, PAD, &mut b.enc_tokens);
            pad(&e.enc_types, enc_len, 0, &mut b.enc_types);
            b.enc_lens.push(e.enc_tokens.len());
            pad(&e.dec_tokens, dec_len, PAD, &mut b.dec_tokens);
            pad(&e.dec_types, dec_len, 0, &mut b.dec_types);
            pad(&e.dec_hard_pos, dec_len, 0, &mut b.dec_hard);
            pad(&e.dec_soft_pos, dec_len, 0, &mut b.dec_soft);
            pad(&e.targets, dec_len, PAD, &mut b.targets);
            b.dec_lens.push(e.dec_tokens.len());
        }
        b
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        if self.size == 0 {
            return Err(ModelError::EmptyBatch);
        }
        for len in [self.enc_len, self.dec_len] {
            if len > cfg.max_len {
                return Err(ModelError::SequenceTooLong { len, max: cfg.max_len });
            }
        }
        let tokens = self.enc_tokens.iter().chain(&self.dec_tokens).chain(&self.targets);
        if let Some(&t) = tokens.into_iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange(t));
        }
        if let Some(&t) = self
            .enc_types
            .iter()
            .chain(&self.dec_types)
            .find(|&&t| t as usize >= cfg.n_types)
        {
            return Err(ModelError::TypeOutOfRange(t));
        }
        for b in 0..self.size {
            for t in 0..self.dec_lens[b] {
                let i = b * self.dec_len + t;
                if self.dec_hard[i] as usize >= cfg.max_len {
                    return Err(ModelError::SequenceTooLong {
                        len: self.dec_hard[i] as usize + 1,
                        max: cfg.max_len,
                    });
                }
                let soft = self.dec_soft[i] as usize;
                if soft >= self.enc_lens[b].max(1) {
                    return Err(ModelError::SoftPositionOutOfRange {
                        pos: soft,
                        len: self.enc_lens[b],
                    });
                }
            }
        }
        Ok(())
    }
}

/// Forward-pass options: soft positions on/off, dropout RNG (`None` = eval).
pub struct RunMode<'r> {
    pub use_soft: bool,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl<'r> RunMode<'r> {
    pub fn eval(use_soft: bool) -> Self {
        RunMode { use_soft, rng: None }
    }

    pub fn train(use_soft: bool, rng: &'r mut ChaCha8Rng) -> Self {
        RunMode {
            use_soft,
            rng: Some(rng),
        }
    }
}

#[derive(Debug, Clone)]
struct EncLayerCache<T> {
    n1: NormCache<T>,
    a: Vec<T>,
    attn: AttnCache<T>,
    n2: NormCache<T>,
    b: Vec<T>,
    ffn: FfnCache<T>,
}

#[derive(Debug, Clone)]
pub struct EncCache<T> {
    drop: Option<Vec<T>>,
    layers: Vec<EncLayerCache<T>>,
    norm: NormCache<T>,
    /// Encoder states, `[batch·enc_len, d_model]`.
    pub out: Vec<T>,
}

#[derive(Debug, Clone)]
struct DecLayerCache<T> {
    n1: NormCache<T>,
    a: Vec<T>,
    self_attn: AttnCache<T>,
    n2: NormCache<T>,
    b: Vec<T>,
    cross: AttnCache<T>,
    n3: NormCache<T>,
    c: Vec<T>,
    ffn: FfnCache<T>,
}

#[derive(Debug, Clone)]
pub struct DecCache<T> {
    drop: Option<Vec<T>>,
    layers: Vec<DecLayerCache<T>>,
    norm: NormCache<T>,
    y: Vec<T>,
    /// `[batch·dec_len, vocab]`.
    pub logits: Vec<T>,
}

impl<T: Scalar> DecCache<T> {
    /// Cross-attention weights of one layer/head for example `b`,
    /// `[dec_len, enc_len]` row-major.
    pub fn cross_attention(&self, layer: usize, head: usize, heads: usize, b: usize, lq: usize, lk: usize) -> &[T] {
        let off = (b * heads + head) * lq * lk;
        &self.layers[layer].cross.probs[off..off + lq * lk]
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    pub enc: EncCache<T>,
    pub dec: DecCache<T>,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn logits(&self) -> &[T] {
        &self.dec.logits
    }
}

fn add_row<T: Scalar>(dst: &mut [T], src: &[T], scale: T) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * *s;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn apply_dropout<T: Scalar>(x: &mut [T], rate: f64, rng: Option<&mut ChaCha8Rng>) -> Option<Vec<T>> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let m = dropout_mask::<T, _>(x.len(), rate, rng);
            x.iter_mut().zip(&m).for_each(|(v, k)| *v *= *k);
            Some(m)
        }
        _ => None,
    }
}

pub fn encode_forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut rng: Option<&mut ChaCha8Rng>,
) -> EncCache<T> {
    let d = cfg.d_model;
    let (bsz, len) = (batch.size, batch.enc_len);
    let rows = bsz * len;
    let emb_scale = T::c((d as f64).sqrt());
    let pe: Vec<Vec<T>> = (0..len)
        .map(|p| sinusoidal_pe(p, d).into_iter().map(T::c).collect())
        .collect();
    let mut x = vec![T::zero(); rows * d];
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        add_row(row, params.tok_emb.row(batch.enc_tokens[r] as usize), emb_scale);
        add_row(row, params.type_emb.row(batch.enc_types[r] as usize), T::one());
        add_row(row, &pe[r % len], T::one());
    }
    let drop = apply_dropout(&mut x, cfg.dropout, rng.as_deref_mut());
    let shape = AttnShape {
        batch: bsz,
        lq: len,
        lk: len,
        heads: cfg.n_heads,
        d,
    };
    let mut layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (a, n1) = layer_norm_fwd(&x, rows, &layer.norm1);
        let (att, attn) = attention_fwd(
            &layer.attn,
            &a,
            &a,
            shape,
            &batch.enc_lens,
            false,
            rng.as_deref_mut().map(|r| (cfg.dropout, r)),
        );
        add_into(&mut x, &att);
        let (b, n2) = layer_norm_fwd(&x, rows, &layer.norm2);
        let (f, ffn) = ffn_fwd(&layer.ffn, &b, rows, rng.as_deref_mut().map(|r| (cfg.dropout, r)));
        add_into(&mut x, &f);
        layers.push(EncLayerCache {
            n1,
            a,
            attn,
            n2,
            b,
            ffn,
        });
    }
    let (out, norm) = layer_norm_fwd(&x, rows, &params.enc_norm);
    EncCache {
        drop,
        layers,
        norm,
        out,
    }
}

pub fn decode_forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    enc: &EncCache<T>,
    use_soft: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> DecCache<T> {
    let d = cfg.d_model;
    let (bsz, len) = (batch.size, batch.dec_len);
    let rows = bsz * len;
    let emb_scale = T::c((d as f64).sqrt());
    let mut x = vec![T::zero(); rows * d];
    for r in 0..rows {
        let row = &mut x[r * d..(r + 1) * d];
        add_row(row, params.tok_emb.row(batch.dec_tokens[r] as usize), emb_scale);
        add_row(row, params.type_emb.row(batch.dec_types[r] as usize), T::one());
        add_row(row, params.hard_pos.row(batch.dec_hard[r] as usize), T::one());
        if use_soft {
            add_row(row, params.soft_pos.row(batch.dec_soft[r] as usize), T::one());
        }
    }
    let drop = apply_dropout(&mut x, cfg.dropout, rng.as_deref_mut());
    let self_shape = AttnShape {
        batch: bsz,
        lq: len,
        lk: len,
        heads: cfg.n_heads,
        d,
    };
    let cross_shape = AttnShape {
        lk: batch.enc_len,
        ..self_shape
    };
    let mut layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (a, n1) = layer_norm_fwd(&x, rows, &layer.norm1);
        let (att, self_attn) = attention_fwd(
            &layer.self_attn,
            &a,
            &a,
            self_shape,
            &batch.dec_lens,
            true,
            rng.as_deref_mut().map(|r| (cfg.dropout, r)),
        );
        add_into(&mut x, &att);
        let (b, n2) = layer_norm_fwd(&x, rows, &layer.norm2);
        let (catt, cross) = attention_fwd(
            &layer.cross_attn,
            &b,
            &enc.out,
            cross_shape,
            &batch.enc_lens,
            false,
            rng.as_deref_mut().map(|r| (cfg.dropout, r)),
        );
        add_into(&mut x, &catt);
        let (c, n3) = layer_norm_fwd(&x, rows, &layer.norm3);
        let (f, ffn) = ffn_fwd(&layer.ffn, &c, rows, rng.as_deref_mut().map(|r| (cfg.dropout, r)));
        add_into(&mut x, &f);
        layers.push(DecLayerCache {
            n1,
            a,
            self_attn,
            n2,
            b,
            cross,
            n3,
            c,
            ffn,
        });
    }
    let (y, norm) = layer_norm_fwd(&x, rows, &params.dec_norm);
    let v = cfg.vocab_size;
    let mut logits = vec![T::zero(); rows * v];
    gemm(
        rows,
        d,
        v,
        T::one(),
        &y,
        View::rows(0, d),
        &params.tok_emb.data,
        View::rows(0, d).t(),
        T::zero(),
        &mut logits,
        View::rows(0, v),
    );
    for r in 0..rows {
        add_row(&mut logits[r * v..(r + 1) * v], &params.out_bias.data, T::one());
    }
    DecCache {
        drop,
        layers,
        norm,
        y,
        logits,
    }
}

/// Full forward pass. Validates the batch against the config first.
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    mode: RunMode<'_>,
) -> Result<ForwardCache<T>, ModelError> {
    batch.validate(cfg)?;
    let RunMode { use_soft, mut rng } = mode;
    let enc = encode_forward(params, cfg, batch, rng.as_deref_mut());
    let dec = decode_forward(params, cfg, batch, &enc, use_soft, rng);
    Ok(ForwardCache { enc, dec })
}

/// Gradients of `sum(dlogits ⊙ logits)` with respect to every parameter,
/// for the computation recorded in `cache`.
pub fn backward<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &Batch,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    use_soft: bool,
) -> ModelParams<T> {
    let mut g = ModelParams::<T>::zeros(cfg);
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let emb_scale = T::c((d as f64).sqrt());
    let (bsz, tl, sl) = (batch.size, batch.dec_len, batch.enc_len);
    let drows = bsz * tl;
    let erows = bsz * sl;
    let dec = &cache.dec;
    let enc = &cache.enc;

    // Output projection (tied to the token table).
    let mut dy = vec![T::zero(); drows * d];
    gemm(
        drows,
        v,
        d,
        T::one(),
        dlogits,
        View::rows(0, v),
        &params.tok_emb.data,
        View::rows(0, d),
        T::zero(),
        &mut dy,
        View::rows(0, d),
    );
    gemm(
        v,
        drows,
        d,
        T::one(),
        dlogits,
        View::rows(0, v).t(),
        &dec.y,
        View::rows(0, d),
        T::one(),
        &mut g.tok_emb.data,
        View::rows(0, d),
    );
    for r in 0..drows {
        add_into(&mut g.out_bias.data, &dlogits[r * v..(r + 1) * v]);
    }

    let mut dx = vec![T::zero(); drows * d];
    layer_norm_bwd(&dy, &dec.norm, &params.dec_norm, &mut g.dec_norm, &mut dx);

    let self_shape = AttnShape {
        batch: bsz,
        lq: tl,
        lk: tl,
        heads: cfg.n_heads,
        d,
    };
    let cross_shape = AttnShape { lk: sl, ..self_shape };
    let mut d_enc = vec![T::zero(); erows * d];
    for (li, lc) in dec.layers.iter().enumerate().rev() {
        let p = &params.decoder[li];
        let gl = &mut g.decoder[li];

        let mut dc = vec![T::zero(); drows * d];
        ffn_bwd(&p.ffn, &mut gl.ffn, &lc.c, drows, &lc.ffn, &dx, &mut dc);
        layer_norm_bwd(&dc, &lc.n3, &p.norm3, &mut gl.norm3, &mut dx);

        let mut db = vec![T::zero(); drows * d];
        attention_bwd(
            &p.cross_attn,
            &mut gl.cross_attn,
            &lc.b,
            &enc.out,
            cross_shape,
            &lc.cross,
            &dx,
            &mut db,
            &mut d_enc,
        );
        layer_norm_bwd(&db, &lc.n2, &p.norm2, &mut gl.norm2, &mut dx);

        let mut da = vec![T::zero(); drows * d];
        let mut da_kv = vec![T::zero(); drows * d];
        attention_bwd(
            &p.self_attn,
            &mut gl.self_attn,
            &lc.a,
            &lc.a,
            self_shape,
            &lc.self_attn,
            &dx,
            &mut da,
            &mut da_kv,
        );
        add_into(&mut da, &da_kv);
        layer_norm_bwd(&da, &lc.n1, &p.norm1, &mut gl.norm1, &mut dx);
    }
    if let Some(m) = &dec.drop {
        dx.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
    }
    for b in 0..bsz {
        for t in 0..batch.dec_lens[b] {
            let r = b * tl + t;
            let row = &dx[r * d..(r + 1) * d];
            add_row(g.tok_emb.row_mut(batch.dec_tokens[r] as usize), row, emb_scale);
            add_row(g.type_emb.row_mut(batch.dec_types[r] as usize), row, T::one());
            add_row(g.hard_pos.row_mut(batch.dec_hard[r] as usize), row, T::one());
            if use_soft {
                add_row(g.soft_pos.row_mut(batch.dec_soft[r] as usize), row, T::one());
            }
        }
    }

    let mut ex = vec![T::zero(); erows * d];
    layer_norm_bwd(&d_enc, &enc.norm, &params.enc_norm, &mut g.enc_norm, &mut ex);
    let enc_shape = AttnShape {
        batch: bsz,
        lq: sl,
        lk: sl,
        heads: cfg.n_heads,
        d,
    };
    for (li, lc) in enc.layers.iter().enumerate().rev() {
        let p = &params.encoder[li];
        let gl = &mut g.encoder[li];
        let mut db = vec![T::zero(); erows * d];
        ffn_bwd(&p.ffn, &mut gl.ffn, &lc.b, erows, &lc.ffn, &ex, &mut db);
        layer_norm_bwd(&db, &lc.n2, &p.norm2, &mut gl.norm2, &mut ex);

        let mut da = vec![T::zero(); erows * d];
        let mut da_kv = vec![T::zero(); erows * d];
        attention_bwd(
            &p.attn,
            &mut gl.attn,
            &lc.a,
            &lc.a,
            enc_shape,
            &lc.attn,
            &ex,
            &mut da,
            &mut da_kv,
        );
        add_into(&mut da, &da_kv);
        layer_norm_bwd(&da, &lc.n1, &p.norm1, &mut gl.norm1, &mut ex);
    }
    if let Some(m) = &enc.drop {
        ex.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
    }
    for b in 0..bsz {
        for s in 0..batch.enc_lens[b] {
            let r = b * sl + s;
            let row = &ex[r * d..(r + 1) * d];
            add_row(g.tok_emb.row_mut(batch.enc_tokens[r] as usize), row, emb_scale);
            add_row(g.type_emb.row_mut(batch.enc_types[r] as usize), row, T::one());
        }
    }
    g
}
