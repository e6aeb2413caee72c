use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// exp of the mean token negative log-likelihood (natural log, non-pad
/// tokens only).
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Corpus-level n-gram counts backing a BLEU score: clipped matches and
/// totals per order plus the reference/hypothesis token counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub ref_len: u64,
    pub hyp_len: u64,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

/// Accumulate modified (clipped) n-gram precision counts over a corpus.
pub fn bleu_stats<T: Eq + Hash + Clone>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    max_n: usize,
) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        ref_len: 0,
        hyp_len: 0,
    };
    for (hyp, reference) in hypotheses.iter().zip(references) {
        stats.hyp_len += hyp.len() as u64;
        stats.ref_len += reference.len() as u64;
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                stats.totals[n - 1] += count;
                let clip = ref_counts.get(&gram).copied().unwrap_or(0);
                stats.matches[n - 1] += count.min(clip);
            }
        }
    }
    Ok(stats)
}

/// Score in [0, 100] from accumulated counts: geometric mean of the
/// modified precisions times the brevity penalty exp(1 - r/c) when the
/// hypothesis corpus is shorter than the reference corpus. Any zero
/// precision (or an order with no n-grams at all) gives 0; no smoothing.
pub fn bleu_from_stats(stats: &BleuStats) -> f64 {
    if stats.hyp_len == 0 {
        return 0.0;
    }
    let max_n = stats.matches.len();
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if stats.matches[n] == 0 || stats.totals[n] == 0 {
            return 0.0;
        }
        log_sum += (stats.matches[n] as f64 / stats.totals[n] as f64).ln();
    }
    let bp = if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    100.0 * bp * (log_sum / max_n as f64).exp()
}

/// Corpus BLEU with the standard four n-gram orders and uniform weights.
pub fn bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    Ok(bleu_from_stats(&bleu_stats(hypotheses, references, 4)?))
}

/// Position-aligned token accuracy; length mismatches count against the
/// longer sequence.
pub fn token_accuracy<T: Eq>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        total += hyp.len().max(reference.len());
        correct += hyp.iter().zip(reference).filter(|(h, r)| h == r).count();
    }
    if total == 0 {
        1.0
    } else {
        correct as f64 / total as f64
    }
}
