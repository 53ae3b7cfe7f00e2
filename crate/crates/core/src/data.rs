//! Corpus samples encoded for the model.

use crate::coref::{ClusterDocument, CorefClusters};
use crate::corpus::{Corpus, DialogueSample, Split, Vocab};
use crate::error::Result;
use crate::training::Example;

/// Dialogue ids, summary ids and gold clusters aligned to dialogue tokens.
#[derive(Clone, Debug)]
pub struct EncodedSample {
    pub id: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    /// Lowercased summary tokens, the ROUGE reference.
    pub reference: Vec<String>,
    pub clusters: CorefClusters,
}

impl EncodedSample {
    pub fn new(sample: &DialogueSample, vocab: &Vocab) -> Result<Self> {
        let doc = ClusterDocument::from_sample(sample);
        let tokens = doc.tokens();
        let source = tokens.iter().map(|t| vocab.id(&t.text)).collect();
        let reference: Vec<String> = sample
            .summary_tokens()
            .into_iter()
            .map(|t| t.text)
            .collect();
        Ok(Self {
            id: sample.id.clone(),
            source,
            target: vocab.encode(&reference),
            reference,
            clusters: doc.token_clusters()?,
        })
    }

    pub fn example(&self) -> Example {
        Example {
            id: self.id.clone(),
            source: self.source.clone(),
            target: self.target.clone(),
            overrides: None,
        }
    }
}

pub fn encode_split(corpus: &Corpus, split: Split, vocab: &Vocab) -> Result<Vec<EncodedSample>> {
    corpus
        .split(split)
        .map(|s| EncodedSample::new(s, vocab))
        .collect()
}

pub fn plain_examples(samples: &[EncodedSample]) -> Vec<Example> {
    samples.iter().map(EncodedSample::example).collect()
}
