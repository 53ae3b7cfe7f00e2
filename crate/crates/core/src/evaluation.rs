//! Test-set scoring of generated summaries.

use crate::corpus::Vocab;
use crate::error::{ensure, Result};
use crate::metrics::{mean_score, rouge, rouge_tokens, RougeScore};
use crate::model::Seq2SeqModel;
use crate::training::Example;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecodeSettings {
    pub beam_size: usize,
    pub max_len: usize,
}

/// Decoded summary text for each example.
pub fn summarize(
    model: &Seq2SeqModel,
    examples: &[Example],
    vocab: &Vocab,
    decode: DecodeSettings,
) -> Result<Vec<String>> {
    examples
        .iter()
        .map(|ex| {
            let hyp = model.generate(
                &ex.source,
                decode.beam_size,
                decode.max_len,
                ex.overrides.as_ref(),
            )?;
            Ok(vocab.decode(&hyp.tokens).join(" "))
        })
        .collect()
}

/// Mean ROUGE of beam-searched summaries against reference texts, both
/// reduced to lowercased word tokens.
pub fn evaluate(
    model: &Seq2SeqModel,
    examples: &[Example],
    references: &[String],
    vocab: &Vocab,
    decode: DecodeSettings,
) -> Result<RougeScore> {
    ensure!(
        examples.len() == references.len(),
        Contract,
        "{} examples for {} references",
        examples.len(),
        references.len()
    );
    ensure!(!examples.is_empty(), Contract, "nothing to evaluate");
    let outputs = summarize(model, examples, vocab, decode)?;
    let scores: Vec<RougeScore> = outputs
        .iter()
        .zip(references)
        .map(|(c, r)| rouge(&rouge_tokens(c), &rouge_tokens(r)))
        .collect();
    mean_score(&scores)
}
