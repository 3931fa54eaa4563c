//! Logits tables and the token-level distributions built on them.

use super::Head;
use crate::error::{Error, Result};
use crate::tokenizer::{allowed_tokens, Direction, GrammarState, TokenId, TokenMask, VOCAB_SIZE};

/// One row of vocabulary scores per target position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsTable {
    /// Target position each row predicts.
    pub positions: Vec<usize>,
    pub heads: Vec<Head>,
    /// Token at each target position.
    pub targets: Vec<TokenId>,
    /// Row-major `rows x VOCAB_SIZE`.
    pub data: Vec<f64>,
}

impl LogitsTable {
    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE]
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mean negative log-likelihood over masked rows (full-vocabulary softmax)
/// and its gradient with respect to every logit.
pub fn cross_entropy(rows: &[f64], targets: &[TokenId], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    let n = targets.len();
    if rows.len() != n * VOCAB_SIZE || mask.len() != n {
        return Err(Error::Contract("logits, targets and mask disagree in length".into()));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract("cross-entropy mask selects no position".into()));
    }
    let inv = 1.0 / count as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; rows.len()];
    for r in 0..n {
        if !mask[r] {
            continue;
        }
        let row = &rows[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
        let lse = log_sum_exp(row.iter().copied());
        let y = targets[r] as usize;
        total += lse - row[y];
        let g = &mut grad[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE];
        for v in 0..VOCAB_SIZE {
            g[v] = (row[v] - lse).exp() * inv;
        }
        g[y] -= inv;
    }
    Ok((total * inv, grad))
}

/// `log softmax(row / temperature)` over the allowed set; `-inf` elsewhere.
pub fn restricted_log_softmax(row: &[f64], mask: &TokenMask, temperature: f64) -> [f64; VOCAB_SIZE] {
    let mut out = [f64::NEG_INFINITY; VOCAB_SIZE];
    let allowed = (0..VOCAB_SIZE).filter(|&v| mask[v]).map(|v| row[v] / temperature);
    let lse = log_sum_exp(allowed);
    for v in 0..VOCAB_SIZE {
        if mask[v] {
            out[v] = row[v] / temperature - lse;
        }
    }
    out
}

/// Exact `KL(p || r)` over the allowed set from log-probabilities.
pub fn kl_restricted(logp: &[f64; VOCAB_SIZE], logr: &[f64; VOCAB_SIZE], mask: &TokenMask) -> f64 {
    (0..VOCAB_SIZE)
        .filter(|&v| mask[v])
        .map(|v| logp[v].exp() * (logp[v] - logr[v]))
        .sum()
}

/// Grammar masks in force at each target token of a direction.
pub fn target_masks(direction: Direction, targets: &[TokenId]) -> Result<Vec<TokenMask>> {
    let mut state = GrammarState::start(direction);
    let mut masks = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        let mask = allowed_tokens(state);
        if !mask[t as usize] {
            return Err(Error::Grammar {
                position: i,
                message: format!("target token {t} outside the grammar in state {state:?}"),
            });
        }
        masks.push(mask);
        state = state.advance(t);
    }
    Ok(masks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct softmax then log, no max-shift; fine for the small logits used here.
    fn brute_nll(row: &[f64], y: usize) -> f64 {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[y].exp() / z).ln()
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let rows = vec![0.0; 3 * VOCAB_SIZE];
        let (loss, _) = cross_entropy(&rows, &[3, 9, 30], &[true; 3]).unwrap();
        assert!((loss - (VOCAB_SIZE as f64).ln()).abs() < 1e-15);
        assert!((loss - 3.6109).abs() < 1e-4);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mut rows = vec![0.0; VOCAB_SIZE];
        rows[5] = 60.0;
        let (loss, _) = cross_entropy(&rows, &[5], &[true]).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let rows: Vec<f64> = (0..5 * VOCAB_SIZE).map(|_| rng.random_range(-3.0..3.0)).collect();
            let targets: Vec<TokenId> = (0..5).map(|_| rng.random_range(0..VOCAB_SIZE as u8)).collect();
            let mask: Vec<bool> = (0..5).map(|i| i == 0 || rng.random_bool(0.6)).collect();
            let (loss, _) = cross_entropy(&rows, &targets, &mask).unwrap();
            let picked: Vec<f64> = (0..5)
                .filter(|&r| mask[r])
                .map(|r| brute_nll(&rows[r * VOCAB_SIZE..(r + 1) * VOCAB_SIZE], targets[r] as usize))
                .collect();
            let want = picked.iter().sum::<f64>() / picked.len() as f64;
            assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        }
    }

    #[test]
    fn empty_mask_is_rejected() {
        let rows = vec![0.0; VOCAB_SIZE];
        assert!(matches!(cross_entropy(&rows, &[1], &[false]), Err(Error::Contract(_))));
    }

    #[test]
    fn restricted_distribution_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let row: Vec<f64> = (0..VOCAB_SIZE).map(|_| rng.random_range(-4.0..4.0)).collect();
        let mask = allowed_tokens(GrammarState::layout_start());
        let lp = restricted_log_softmax(&row, &mask, 0.7);
        let total: f64 = lp.iter().filter(|v| v.is_finite()).map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert_eq!(lp.iter().filter(|v| v.is_finite()).count(), 7);
        assert_eq!(kl_restricted(&lp, &lp, &mask), 0.0);
    }

    #[test]
    fn single_allowed_token_has_zero_logprob() {
        let mut mask = [false; VOCAB_SIZE];
        mask[6] = true;
        let row: Vec<f64> = (0..VOCAB_SIZE).map(|v| v as f64 * 0.3).collect();
        assert_eq!(restricted_log_softmax(&row, &mask, 1.0)[6], 0.0);
    }
}
