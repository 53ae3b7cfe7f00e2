//! Synthetic coreference-annotated dialogue summarization corpus.
//!
//! JSONL schema, one sample per line:
//!
//! ```json
//! {"id": "train-0000",
//!  "turns": [{"speaker": "amy", "text": "i bought a lamp."}, ...],
//!  "summary": "amy bought a lamp.",
//!  "clusters": [[{"start_char": 15, "end_char": 19}, ...], ...],
//!  "split": "train"}
//! ```
//!
//! Offsets index characters of the rendered dialogue: each turn rendered as
//! `speaker: text`, lines joined with `\n`.

mod generate;
mod stats;
mod tokenize;
mod vocab;

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use generate::{generate, GeneratorConfig, Lexicon, SplitSizes, PRONOUNS};
pub use stats::{stats, CorpusStats, MeanStd, SplitStats};
pub use tokenize::{token_texts, tokenize, tokenize_dialogue, Token};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Turn {
    pub speaker: String,
    pub text: String,
}

/// Half-open char range `[start_char, end_char)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CharSpan {
    pub start_char: usize,
    pub end_char: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueSample {
    pub id: String,
    pub turns: Vec<Turn>,
    pub summary: String,
    pub clusters: Vec<Vec<CharSpan>>,
    pub split: Split,
}

impl DialogueSample {
    /// `speaker: text` lines joined with `\n`.
    pub fn render(&self) -> String {
        render_turns(&self.turns)
    }

    pub fn dialogue_tokens(&self) -> Vec<Token> {
        tokenize_dialogue(&self.render())
    }

    pub fn summary_tokens(&self) -> Vec<Token> {
        tokenize(&self.summary)
    }

    pub fn speakers(&self) -> BTreeSet<&str> {
        self.turns.iter().map(|t| t.speaker.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.id.is_empty(), Validation, "sample has an empty id");
        ensure!(
            self.turns.len() >= 2,
            Validation,
            "sample {} has {} turns, need at least 2",
            self.id,
            self.turns.len()
        );
        ensure!(
            self.speakers().len() >= 2,
            Validation,
            "sample {} has fewer than 2 distinct speakers",
            self.id
        );
        for t in &self.turns {
            ensure!(
                !t.speaker.trim().is_empty() && !t.speaker.contains([':', '\n']),
                Validation,
                "sample {} has an invalid speaker name {:?}",
                self.id,
                t.speaker
            );
            ensure!(
                !t.text.contains('\n'),
                Validation,
                "sample {} has a turn spanning several lines",
                self.id
            );
        }
        ensure!(
            !self.summary.trim().is_empty(),
            Validation,
            "sample {} has an empty summary",
            self.id
        );
        let len = self.render().chars().count();
        for (c, cluster) in self.clusters.iter().enumerate() {
            ensure!(
                cluster.len() >= 2,
                Validation,
                "sample {} cluster {c} has {} mention(s), need at least 2",
                self.id,
                cluster.len()
            );
            for span in cluster {
                ensure!(
                    span.start_char < span.end_char && span.end_char <= len,
                    Validation,
                    "sample {} cluster {c} span [{}, {}) is outside the {len}-char dialogue",
                    self.id,
                    span.start_char,
                    span.end_char
                );
            }
        }
        Ok(())
    }
}

pub fn render_turns(turns: &[Turn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.speaker, t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<DialogueSample>,
}

impl Corpus {
    pub fn new(samples: Vec<DialogueSample>) -> Result<Self> {
        let corpus = Self { samples };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DialogueSample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    pub fn split_vec(&self, split: Split) -> Vec<&DialogueSample> {
        self.split(split).collect()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for s in &self.samples {
            s.validate()?;
            ensure!(
                ids.insert(s.id.as_str()),
                Validation,
                "duplicate sample id {}",
                s.id
            );
        }
        Ok(())
    }

    /// Vocabulary over training dialogues and summaries.
    pub fn build_vocab(&self) -> Vocab {
        Vocab::build(self.split(Split::Train).flat_map(|s| {
            s.dialogue_tokens()
                .into_iter()
                .chain(s.summary_tokens())
                .map(|t| t.text)
        }))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
        for s in &self.samples {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    /// Loads and validates a JSONL file. Errors carry the 1-based line number.
    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file), path)
    }

    pub fn read_jsonl<R: BufRead>(reader: R, path: &Path) -> Result<Self> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut samples = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let sample: DialogueSample =
                serde_json::from_str(&line).map_err(|e| parse_err(line_no, e.to_string()))?;
            sample.validate().map_err(|e| match e {
                Error::Validation(msg) => {
                    Error::Validation(format!("{}:{line_no}: {msg}", path.display()))
                }
                other => other,
            })?;
            if !ids.insert(sample.id.clone()) {
                return Err(parse_err(
                    line_no,
                    format!("duplicate sample id {}", sample.id),
                ));
            }
            samples.push(sample);
        }
        Ok(Self { samples })
    }
}
