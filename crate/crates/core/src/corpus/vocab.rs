use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::model::{BOS_ID, EOS_ID, FIRST_FREE_ID, PAD_ID, UNK_ID};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Token to id table. Ids below [`FIRST_FREE_ID`] are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Sorted, deduplicated vocabulary over the given tokens.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let distinct: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_string())
            .filter(|t| ![PAD, BOS, EOS, UNK].contains(&t.as_str()))
            .collect();
        let mut all: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
        all.extend(distinct);
        Self::try_from(all).expect("reserved prefix is present")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == FIRST_FREE_ID
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Token strings for `ids`, skipping pad, bos and eos.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| id != PAD_ID && id != BOS_ID && id != EOS_ID)
            .map(|&id| self.token(id).unwrap_or(UNK).to_string())
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = crate::Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        ensure!(
            tokens.len() >= FIRST_FREE_ID
                && tokens[PAD_ID] == PAD
                && tokens[BOS_ID] == BOS
                && tokens[EOS_ID] == EOS
                && tokens[UNK_ID] == UNK,
            Validation,
            "vocabulary must start with {PAD}, {BOS}, {EOS}, {UNK}"
        );
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            ensure!(
                index.insert(t.clone(), i).is_none(),
                Validation,
                "duplicate vocabulary entry {t:?}"
            );
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}
