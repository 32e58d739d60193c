//! Corpus-level BLEU with clipped n-gram precisions and a brevity penalty, unsmoothed.

use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    /// Clipped matches and candidate counts per order 1..=max_n.
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self) -> Vec<f64> {
        self.matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
            .collect()
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// Score in `[0, 100]`.
    pub fn score(&self) -> f64 {
        let precisions = self.precisions();
        if precisions.iter().any(|&p| p == 0.0) {
            return 0.0;
        }
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64;
        100.0 * self.brevity_penalty() * log_mean.exp()
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn corpus_stats<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuStats> {
    if hypotheses.is_empty() {
        return Err(Error::Input("BLEU over an empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Input(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Contract("BLEU order must be at least 1".into()));
    }
    let mut stats = BleuStats {
        matches: vec![0; max_n],
        totals: vec![0; max_n],
        hyp_len: 0,
        ref_len: 0,
    };
    for (hyp, reference) in hypotheses.iter().zip(references) {
        stats.hyp_len += hyp.len();
        stats.ref_len += reference.len();
        for n in 1..=max_n {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                stats.matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                stats.totals[n - 1] += count;
            }
        }
    }
    Ok(stats)
}

/// Corpus BLEU of order `max_n` (4 for the standard metric). Tokens are
/// compared exactly, so string tokens are case-sensitive.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    Ok(corpus_stats(hypotheses, references, max_n)?.score())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_scores_100() {
        let refs = vec![words("the cat sat on the mat"), words("a b c d e")];
        assert!((bleu(&refs, &refs, 4).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn no_four_gram_match_scores_zero() {
        let hyp = vec![words("the cat sat on mat")];
        let reference = vec![words("the cat sat under the mat")];
        assert_eq!(bleu(&hyp, &reference, 4).unwrap(), 0.0);
    }

    #[test]
    fn case_sensitive() {
        let hyp = vec![words("The cat sat on")];
        let reference = vec![words("the cat sat on")];
        assert_eq!(bleu(&hyp, &reference, 4).unwrap(), 0.0);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: Vec<Vec<u32>> = vec![];
        assert!(matches!(bleu(&empty, &empty, 4), Err(Error::Input(_))));
    }
}
