//! ROUGE-1, ROUGE-2 and ROUGE-L F1.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    fn from_counts(hits: usize, candidate: usize, reference: usize) -> Self {
        let precision = if candidate == 0 {
            0.0
        } else {
            hits as f64 / candidate as f64
        };
        let recall = if reference == 0 {
            0.0
        } else {
            hits as f64 / reference as f64
        };
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

/// Harmonic mean, zero when both inputs are zero.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub rouge1: PrecisionRecall,
    pub rouge2: PrecisionRecall,
    pub rouge_l: PrecisionRecall,
}

impl RougeScore {
    pub fn r1_f1(&self) -> f64 {
        self.rouge1.f1
    }

    pub fn r2_f1(&self) -> f64 {
        self.rouge2.f1
    }

    pub fn rl_f1(&self) -> f64 {
        self.rouge_l.f1
    }

    /// `[R1, R2, RL]` F1 values.
    pub fn f1_triple(&self) -> [f64; 3] {
        [self.rouge1.f1, self.rouge2.f1, self.rouge_l.f1]
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram overlap.
pub fn rouge_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> PrecisionRecall {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let hits = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    let total = |len: usize| len.saturating_sub(n - 1);
    PrecisionRecall::from_counts(hits, total(candidate.len()), total(reference.len()))
}

/// Length of the longest common subsequence, O(|a|·|b|) time and O(|b|) space.
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

pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> PrecisionRecall {
    PrecisionRecall::from_counts(
        lcs_len(candidate, reference),
        candidate.len(),
        reference.len(),
    )
}

pub fn rouge<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> RougeScore {
    RougeScore {
        rouge1: rouge_n(candidate, reference, 1),
        rouge2: rouge_n(candidate, reference, 2),
        rouge_l: rouge_l(candidate, reference),
    }
}

fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n => pairwise_sum(&values[..n / 2]) + pairwise_sum(&values[n / 2..]),
    }
}

fn mean_pr(items: &[PrecisionRecall]) -> PrecisionRecall {
    let n = items.len() as f64;
    let col =
        |f: fn(&PrecisionRecall) -> f64| pairwise_sum(&items.iter().map(f).collect::<Vec<_>>()) / n;
    PrecisionRecall {
        precision: col(|p| p.precision),
        recall: col(|p| p.recall),
        f1: col(|p| p.f1),
    }
}

/// Mean of already computed per-pair scores.
pub fn mean_score(scores: &[RougeScore]) -> Result<RougeScore> {
    ensure!(!scores.is_empty(), Contract, "no scores to average");
    let pick =
        |f: fn(&RougeScore) -> PrecisionRecall| mean_pr(&scores.iter().map(f).collect::<Vec<_>>());
    Ok(RougeScore {
        rouge1: pick(|s| s.rouge1),
        rouge2: pick(|s| s.rouge2),
        rouge_l: pick(|s| s.rouge_l),
    })
}

/// Mean of per-pair scores over `(candidate, reference)` pairs.
pub fn corpus_rouge<T, C, R>(pairs: &[(C, R)]) -> Result<RougeScore>
where
    T: Eq + Hash,
    C: AsRef<[T]>,
    R: AsRef<[T]>,
{
    ensure!(
        !pairs.is_empty(),
        Contract,
        "corpus_rouge needs at least one pair"
    );
    let scores: Vec<RougeScore> = pairs
        .iter()
        .map(|(c, r)| rouge(c.as_ref(), r.as_ref()))
        .collect();
    mean_score(&scores)
}

/// `(new - base) / base`. A zero baseline gives zero for an unchanged
/// score and an infinite change otherwise.
pub fn relative_change(new: f64, base: f64) -> f64 {
    if base == 0.0 {
        if new == 0.0 {
            0.0
        } else {
            f64::INFINITY.copysign(new)
        }
    } else {
        (new - base) / base
    }
}

/// Percentage with one decimal and an explicit sign, e.g. `-0.5%`.
pub fn format_relative(change: f64) -> String {
    let pct = format!("{:.1}", change * 100.0);
    match pct.as_str() {
        "0.0" | "-0.0" => "0.0%".into(),
        p if p.starts_with('-') => format!("{p}%"),
        p => format!("+{p}%"),
    }
}

/// Lowercased alphanumeric word tokens.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}
