//! Greedy autoregressive decoding.

use super::params::ModelParams;
use super::tensor::Scalar;
use super::transformer::{decode_forward, encode_forward, Batch};
use super::{Example, ModelConfig, ModelError};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Output ids without `[bos]` and `[eos]`.
    pub tokens: Vec<u32>,
    /// No `[eos]` was produced within the length limit.
    pub truncated: bool,
}

pub fn greedy_decode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    src: &[u32],
    src_type: u32,
    tgt_type: u32,
    max_len: usize,
) -> Result<Decoded, ModelError> {
    let mut out = greedy_decode_batch(params, cfg, &[src.to_vec()], src_type, tgt_type, max_len)?;
    Ok(out.remove(0))
}

/// Decodes every source in one padded batch, re-running the decoder over the
/// whole prefix at each step. Ties in the argmax go to the lowest id.
pub fn greedy_decode_batch<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    srcs: &[Vec<u32>],
    src_type: u32,
    tgt_type: u32,
    max_len: usize,
) -> Result<Vec<Decoded>, ModelError> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let steps = max_len.min(cfg.max_len);
    let mut examples: Vec<Example> = srcs
        .iter()
        .map(|s| Example::translation(s, src_type, &[], tgt_type))
        .collect();
    let refs: Vec<&Example> = examples.iter().collect();
    let mut batch = Batch::new(&refs);
    batch.validate(cfg)?;
    let enc = encode_forward(params, cfg, &batch, None);
    let n = srcs.len();
    let mut done = vec![false; n];
    let mut out: Vec<Decoded> = (0..n)
        .map(|_| Decoded {
            tokens: Vec::new(),
            truncated: true,
        })
        .collect();
    let v = cfg.vocab_size;
    for t in 0..steps {
        let dec = decode_forward(params, cfg, &batch, &enc, false, None);
        for b in 0..n {
            if done[b] {
                continue;
            }
            let row = &dec.logits[(b * batch.dec_len + t) * v..(b * batch.dec_len + t + 1) * v];
            let mut best = 0;
            for (j, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = j;
                }
            }
            if best as u32 == EOS {
                done[b] = true;
                out[b].truncated = false;
            } else {
                out[b].tokens.push(best as u32);
            }
        }
        if done.iter().all(|&d| d) || t + 1 == steps {
            break;
        }
        for (b, ex) in examples.iter_mut().enumerate() {
            let next = out[b].tokens.last().copied().filter(|_| !done[b]).unwrap_or(EOS);
            ex.dec_tokens.push(next);
            ex.dec_types.push(tgt_type);
            ex.dec_hard_pos.push(t as u32 + 1);
            ex.dec_soft_pos.push(0);
            ex.targets.push(0);
        }
        let refs: Vec<&Example> = examples.iter().collect();
        batch = Batch::new(&refs);
    }
    debug_assert!(examples.iter().all(|e| e.dec_tokens[0] == BOS));
    Ok(out)
}
