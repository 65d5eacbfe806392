use std::collections::HashMap;

use super::vocab::strip_special;
use crate::error::{Error, Result};

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU-4 with one reference per candidate, uniform weights, clipped
/// n-gram precision, brevity penalty and no smoothing.
pub fn bleu4(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::contract("bleu4 needs at least one candidate"));
    }
    if candidates.len() != references.len() {
        return Err(Error::contract(format!(
            "bleu4: {} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if references.iter().any(|r| r.is_empty()) {
        return Err(Error::contract("bleu4: empty reference"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c += cand.len();
        r += refr.len();
        for n in 1..=4 {
            let rc = ngram_counts(refr, n);
            for (gram, k) in ngram_counts(cand, n) {
                matched[n - 1] += k.min(rc.get(gram).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if c == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..4).map(|i| (matched[i] as f64 / total[i] as f64).ln()).sum::<f64>() / 4.0;
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * log_p.exp())
}

/// Fraction of predictions equal to their answer after dropping pad/start/end.
pub fn exact_match_accuracy(predictions: &[Vec<usize>], answers: &[Vec<usize>]) -> Result<f64> {
    if predictions.len() != answers.len() {
        return Err(Error::contract(format!(
            "exact match: {} predictions but {} answers",
            predictions.len(),
            answers.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(answers).filter(|(p, a)| strip_special(p) == strip_special(a)).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_disjoint() {
        let a = vec![vec![4, 5, 6, 7, 8]];
        assert_eq!(bleu4(&a, &a).unwrap(), 1.0);
        assert_eq!(bleu4(&[vec![9, 10, 11, 12]], &a).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
    }

    #[test]
    fn exact_match_counts() {
        let p = vec![vec![1, 5, 2], vec![6], vec![7], vec![8]];
        let a = vec![vec![5], vec![6], vec![7], vec![9]];
        assert_eq!(exact_match_accuracy(&p, &a).unwrap(), 0.75);
        assert!(exact_match_accuracy(&p, &a[..2]).is_err());
    }
}
