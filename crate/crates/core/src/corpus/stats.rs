use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{Corpus, Split};
use crate::error::{ensure, Result};

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        ensure!(!values.is_empty(), Contract, "mean of an empty sample");
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub count: usize,
    pub turns: MeanStd,
    pub dialogue_length: MeanStd,
    pub summary_length: MeanStd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub splits: Vec<SplitStats>,
}

fn split_title(split: Split) -> &'static str {
    match split {
        Split::Train => "Training Set",
        Split::Validation => "Validation Set",
        Split::Test => "Test Set",
    }
}

const ROWS: [&str; 3] = [
    "Mean/Std. of Dialogue Turns",
    "Mean/Std. of Dialogue Length",
    "Mean/Std. of Summary Length",
];

impl SplitStats {
    fn rows(&self) -> [MeanStd; 3] {
        [self.turns, self.dialogue_length, self.summary_length]
    }
}

impl CorpusStats {
    /// Three statistic rows per split, values as `mean (std)`.
    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Split | Statistic | Value |\n|---|---|---|\n");
        for s in &self.splits {
            for (i, (label, v)) in ROWS.iter().zip(s.rows()).enumerate() {
                let head = if i == 0 {
                    format!("{} ({} Samples)", split_title(s.split), s.count)
                } else {
                    String::new()
                };
                let _ = writeln!(out, "| {head} | {label} | {:.2} ({:.2}) |", v.mean, v.std);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,count,statistic,mean,std\n");
        let keys = ["turns", "dialogue_length", "summary_length"];
        for s in &self.splits {
            for (key, v) in keys.iter().zip(s.rows()) {
                let _ = writeln!(
                    out,
                    "{},{},{key},{:.6},{:.6}",
                    s.split, s.count, v.mean, v.std
                );
            }
        }
        out
    }
}

/// Per-split statistics with token lengths under the corpus tokenizer.
pub fn stats(corpus: &Corpus) -> Result<CorpusStats> {
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = corpus.split_vec(split);
        ensure!(!samples.is_empty(), Contract, "split {split} is empty");
        let col = |f: &dyn Fn(&super::DialogueSample) -> usize| {
            MeanStd::of(&samples.iter().map(|s| f(s) as f64).collect::<Vec<_>>())
        };
        splits.push(SplitStats {
            split,
            count: samples.len(),
            turns: col(&|s| s.turns.len())?,
            dialogue_length: col(&|s| s.dialogue_tokens().len())?,
            summary_length: col(&|s| s.summary_tokens().len())?,
        });
    }
    Ok(CorpusStats { splits })
}
