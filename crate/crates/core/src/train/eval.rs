use std::fmt;

use crate::error::{Error, Result};
use crate::model::Seq2SeqModel;

use super::bleu::bleu;
use super::data::Dataset;

/// Anything that maps a source sequence to an output sequence.
pub trait Translate {
    fn translate(&self, src: &[usize]) -> Result<Vec<usize>>;
}

impl Translate for Seq2SeqModel {
    fn translate(&self, src: &[usize]) -> Result<Vec<usize>> {
        self.greedy_decode(src)
    }
}

impl<F: Fn(&[usize]) -> Vec<usize>> Translate for F {
    fn translate(&self, src: &[usize]) -> Result<Vec<usize>> {
        Ok(self(src))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Fraction of reference positions whose token the hypothesis reproduces.
    pub token_accuracy: f64,
    /// Fraction of examples reproduced exactly.
    pub sequence_accuracy: f64,
    /// Corpus BLEU-4 in `[0, 100]`.
    pub bleu: f64,
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "token_accuracy={:.6} sequence_accuracy={:.6} bleu={:.4}",
            self.token_accuracy, self.sequence_accuracy, self.bleu
        )
    }
}

pub fn score(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<Metrics> {
    if hypotheses.len() != references.len() || hypotheses.is_empty() {
        return Err(Error::Input(format!(
            "cannot score {} hypotheses against {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut exact = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        correct += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += r.len();
        exact += usize::from(h == r);
    }
    Ok(Metrics {
        token_accuracy: if total == 0 { 1.0 } else { correct as f64 / total as f64 },
        sequence_accuracy: exact as f64 / references.len() as f64,
        bleu: bleu(hypotheses, references, 4)?,
    })
}

pub fn evaluate(model: &impl Translate, data: &Dataset) -> Result<Metrics> {
    let hyps = data
        .examples
        .iter()
        .map(|e| model.translate(&e.src))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<Vec<usize>> = data.examples.iter().map(|e| e.tgt.clone()).collect();
    score(&hyps, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::data::Example;

    #[test]
    fn oracle_translator_is_perfect() {
        let data = Dataset {
            examples: vec![
                Example { src: vec![3, 4, 5, 6], tgt: vec![6, 5, 4, 3] },
                Example { src: vec![7, 8, 9, 10, 11], tgt: vec![11, 10, 9, 8, 7] },
            ],
        };
        let reverse = |s: &[usize]| s.iter().rev().copied().collect::<Vec<_>>();
        let m = evaluate(&reverse, &data).unwrap();
        assert_eq!(m.token_accuracy, 1.0);
        assert_eq!(m.sequence_accuracy, 1.0);
        assert!((m.bleu - 100.0).abs() < 1e-9);
    }

    #[test]
    fn token_accuracy_counts_reference_positions() {
        let m = score(&[vec![3, 4]], &[vec![3, 5, 6, 7]]).unwrap();
        assert_eq!(m.token_accuracy, 0.25);
        assert_eq!(m.sequence_accuracy, 0.0);
    }
}
