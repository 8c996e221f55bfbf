//! Label-smoothed cross-entropy with a fused gradient.

use super::scalar::Scalar;
use crate::subword::TokenId;

/// Summed loss over the counted target positions.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    /// Sum of the smoothed loss.
    pub loss_sum: f64,
    /// Sum of the plain negative log-likelihood of the gold token.
    pub nll_sum: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.loss_sum / self.tokens as f64
        }
    }

    pub fn mean_nll(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.nll_sum / self.tokens as f64
        }
    }

    pub fn merge(&mut self, other: LossStats) {
        self.loss_sum += other.loss_sum;
        self.nll_sum += other.nll_sum;
        self.tokens += other.tokens;
    }
}

/// Smoothed target: `(1 - eps)` on the gold token plus `eps` spread evenly
/// over every token except `pad`. With `pad = None` the spread covers the
/// whole vocabulary.
///
/// Positions whose gold token is `pad` are skipped. When `want_grad` is set
/// `logits` is overwritten with the gradient of the mean loss with respect
/// to the logits.
pub fn smoothed_loss_and_grad<T: Scalar>(
    logits: &mut [T],
    targets: &[TokenId],
    vocab: usize,
    epsilon: f64,
    pad: Option<TokenId>,
    want_grad: bool,
) -> LossStats {
    assert_eq!(logits.len(), targets.len() * vocab, "logit buffer does not match targets");
    let support = match pad {
        Some(_) => vocab - 1,
        None => vocab,
    };
    let spread = if support > 0 { epsilon / support as f64 } else { 0.0 };
    let tokens = targets.iter().filter(|&&t| Some(t) != pad).count();
    let inv = if tokens > 0 { 1.0 / tokens as f64 } else { 0.0 };
    let mut stats = LossStats {
        tokens,
        ..LossStats::default()
    };
    let pad_idx = pad.map(|p| p as usize);
    for (row, &gold) in logits.chunks_exact_mut(vocab).zip(targets) {
        if Some(gold) == pad {
            if want_grad {
                row.iter_mut().for_each(|x| *x = T::zero());
            }
            continue;
        }
        let gold = gold as usize;
        let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
        let sum: f64 = row.iter().map(|x| (x.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        let mut loss = 0.0;
        for (j, x) in row.iter_mut().enumerate() {
            let logp = x.f64() - lse;
            let q = if Some(j) == pad_idx {
                0.0
            } else if j == gold {
                1.0 - epsilon + spread
            } else {
                spread
            };
            if q > 0.0 {
                loss -= q * logp;
            }
            if j == gold {
                stats.nll_sum -= logp;
            }
            if want_grad {
                *x = T::of((logp.exp() - q) * inv);
            }
        }
        stats.loss_sum += loss;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut logits = vec![0.0f64; 8];
        let s = smoothed_loss_and_grad(&mut logits, &[3], 8, 0.0, None, false);
        assert!((s.mean() - 8f64.ln()).abs() < 1e-12);
        assert!((s.mean_nll() - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pad_rows_are_ignored() {
        let mut logits = vec![0.5f64, -1.0, 2.0, 0.0, 1.0, 1.0];
        let s = smoothed_loss_and_grad(&mut logits, &[0, 2], 3, 0.1, Some(0), true);
        assert_eq!(s.tokens, 1);
        assert!(logits[..3].iter().all(|&g| g == 0.0));
        let row_sum: f64 = logits[3..].iter().sum();
        assert!(row_sum.abs() < 1e-12);
    }

    #[test]
    fn smoothed_loss_has_positive_floor() {
        // Even a perfectly confident model pays for the smoothing mass.
        let mut logits = vec![0.0f64, 0.0, 50.0, 0.0];
        let s = smoothed_loss_and_grad(&mut logits, &[2], 4, 0.1, Some(0), false);
        assert!(s.mean() > 1.0);
        assert!(s.mean_nll() < 1e-10);
    }
}
