//! Sentence-level BLEU and ROUGE-L, and the combined caption score.
//!
//! Both metrics are generic over the token type so they work on word strings
//! and on raw vocabulary indices alike.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor substituted for a zero clipped n-gram count.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Recall weight of the ROUGE-L F-measure.
pub const ROUGE_BETA: f64 = 1.2;

/// Largest supported BLEU order.
pub const MAX_BLEU_ORDER: usize = 4;

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Raw n-gram statistics behind a sentence BLEU value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped matches per order, index 0 holding unigrams.
    pub clipped: Vec<usize>,
    /// Candidate n-gram totals per order.
    pub totals: Vec<usize>,
    pub candidate_len: usize,
    /// Length of the reference closest to the candidate (shorter wins ties).
    pub reference_len: usize,
}

impl BleuStats {
    pub fn score(&self) -> f64 {
        if self.candidate_len == 0 {
            return 0.0;
        }
        let order = self.clipped.len() as f64;
        let log_sum: f64 = self
            .clipped
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| {
                let p = if m == 0 {
                    BLEU_EPSILON / t.max(1) as f64
                } else {
                    m as f64 / t as f64
                };
                p.ln()
            })
            .sum();
        let c = self.candidate_len as f64;
        let r = self.reference_len as f64;
        let bp = (1.0 - r / c).exp().min(1.0);
        bp * (log_sum / order).exp()
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

fn check_references<R>(references: &[R]) -> Result<()> {
    if references.is_empty() {
        return Err(Error::EmptyInput("reference list"));
    }
    Ok(())
}

/// Clipped n-gram matches and lengths for orders `1..=max_n`.
pub fn bleu_stats<T, R>(candidate: &[T], references: &[R], max_n: usize) -> Result<BleuStats>
where
    T: Eq + Hash,
    R: AsRef<[T]>,
{
    check_references(references)?;
    if !(1..=MAX_BLEU_ORDER).contains(&max_n) {
        return Err(Error::InvalidArgument(format!(
            "BLEU order must be in 1..={MAX_BLEU_ORDER}, got {max_n}"
        )));
    }
    let mut clipped = Vec::with_capacity(max_n);
    let mut totals = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[T], usize> = HashMap::new();
        for r in references {
            for (gram, count) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(gram).or_insert(0);
                *e = (*e).max(count);
            }
        }
        let matched = cand
            .iter()
            .map(|(gram, &count)| count.min(max_ref.get(gram).copied().unwrap_or(0)))
            .sum();
        clipped.push(matched);
        totals.push(candidate.len().saturating_sub(n - 1));
    }
    let c = candidate.len();
    let reference_len = references
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap_or(0);
    Ok(BleuStats {
        clipped,
        totals,
        candidate_len: c,
        reference_len,
    })
}

/// Smoothed sentence BLEU with uniform weights over orders `1..=max_n`.
pub fn bleu_n<T, R>(candidate: &[T], references: &[R], max_n: usize) -> Result<f64>
where
    T: Eq + Hash,
    R: AsRef<[T]>,
{
    Ok(bleu_stats(candidate, references, max_n)?.score())
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_f(lcs: usize, cand_len: usize, ref_len: usize) -> f64 {
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand_len as f64;
    let r = lcs as f64 / ref_len as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// ROUGE-L F-measure, maximised over references.
pub fn rouge_l<T, R>(candidate: &[T], references: &[R]) -> Result<f64>
where
    T: Eq,
    R: AsRef<[T]>,
{
    check_references(references)?;
    Ok(references
        .iter()
        .map(|r| {
            let r = r.as_ref();
            rouge_f(lcs_len(candidate, r), candidate.len(), r.len())
        })
        .fold(0.0, f64::max))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu4: f64,
    pub rouge: f64,
    pub score: f64,
}

/// BLEU-4 plus ROUGE-L. Used both as the fine-tuning gate and as the reward.
pub fn evaluated_score<T, R>(candidate: &[T], references: &[R]) -> Result<ScoreReport>
where
    T: Eq + Hash,
    R: AsRef<[T]>,
{
    let bleu4 = bleu_n(candidate, references, 4)?;
    let rouge = rouge_l(candidate, references)?;
    Ok(ScoreReport {
        bleu4,
        rouge,
        score: bleu4 + rouge,
    })
}

/// Sentence-level metrics averaged over a set of captions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// BLEU-1 through BLEU-4.
    pub bleu: [f64; MAX_BLEU_ORDER],
    pub rouge_l: f64,
    /// Mean of BLEU-4 + ROUGE-L.
    pub score: f64,
}

impl MetricSummary {
    pub fn bleu4(&self) -> f64 {
        self.bleu[MAX_BLEU_ORDER - 1]
    }
}

/// Averages sentence BLEU-1..4, ROUGE-L and the combined score over
/// candidate/reference-set pairs.
pub fn summarize<T, C, R>(pairs: &[(C, Vec<R>)]) -> Result<MetricSummary>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    if pairs.is_empty() {
        return Err(Error::EmptyInput("caption set"));
    }
    let mut sum = MetricSummary::default();
    for (cand, refs) in pairs {
        let cand = cand.as_ref();
        let bleu: Vec<f64> = (1..=MAX_BLEU_ORDER)
            .map(|n| bleu_n(cand, refs, n))
            .collect::<Result<_>>()?;
        let rouge = rouge_l(cand, refs)?;
        for (acc, b) in sum.bleu.iter_mut().zip(&bleu) {
            *acc += b;
        }
        sum.rouge_l += rouge;
        sum.score += bleu[MAX_BLEU_ORDER - 1] + rouge;
    }
    let k = pairs.len() as f64;
    sum.bleu.iter_mut().for_each(|b| *b /= k);
    sum.rouge_l /= k;
    sum.score /= k;
    Ok(sum)
}
