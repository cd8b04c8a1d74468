//! Label-smoothed cross-entropy over padded target rows.

use super::tensor::Scalar;
use super::ModelError;
use crate::tokenizer::PAD;

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    /// Mean smoothed loss over non-pad positions.
    pub loss: f64,
    pub n_tokens: usize,
    /// Unsmoothed negative log-likelihood summed over non-pad positions.
    pub nll_sum: f64,
    /// Positions whose argmax equals the target.
    pub correct: usize,
    /// Gradient of `loss` with respect to the logits.
    pub dlogits: Vec<T>,
}

/// Target distribution is `(1-eps)·onehot + eps/V`. Positions whose target
/// is `PAD` contribute nothing.
pub fn label_smoothed_loss<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    eps: f64,
) -> Result<LossOutput<T>, ModelError> {
    assert_eq!(logits.len(), targets.len() * vocab, "logit/target shape mismatch");
    let n = targets.iter().filter(|&&t| t != PAD).count();
    if n == 0 {
        return Err(ModelError::AllPositionsPadded);
    }
    let mut dlogits = vec![T::zero(); logits.len()];
    let (mut total, mut nll_sum, mut correct) = (0.0, 0.0, 0usize);
    let off_mass = eps / vocab as f64;
    let inv_n = 1.0 / n as f64;
    let mut probs = vec![0.0f64; vocab];
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let t = t as usize;
        let row = &logits[r * vocab..(r + 1) * vocab];
        let mut best = 0;
        let mut max = f64::NEG_INFINITY;
        for (j, x) in row.iter().enumerate() {
            let x = x.f64();
            if x > max {
                max = x;
                best = j;
            }
        }
        let mut sum = 0.0;
        for (p, x) in probs.iter_mut().zip(row) {
            *p = (x.f64() - max).exp();
            sum += *p;
        }
        let lse = max + sum.ln();
        let mean_logit = row.iter().map(|x| x.f64()).sum::<f64>() / vocab as f64;
        let nll = lse - row[t].f64();
        // -Σ q·log p = (1-eps)·nll + eps·(lse - mean logit)
        total += (1.0 - eps) * nll + eps * (lse - mean_logit);
        nll_sum += nll;
        if best == t {
            correct += 1;
        }
        let d = &mut dlogits[r * vocab..(r + 1) * vocab];
        for (j, (g, p)) in d.iter_mut().zip(&probs).enumerate() {
            let q = off_mass + if j == t { 1.0 - eps } else { 0.0 };
            *g = T::c((p / sum - q) * inv_n);
        }
    }
    Ok(LossOutput {
        loss: total * inv_n,
        n_tokens: n,
        nll_sum,
        correct,
        dlogits,
    })
}
