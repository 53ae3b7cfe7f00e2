//! Coreference structure matrices built from token-aligned mention clusters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{tokenize_dialogue, CharSpan, DialogueSample, Token};
use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

/// Token span `[start, end)` of one mention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub cluster_id: usize,
    pub start: usize,
    pub end: usize,
}

impl Mention {
    pub fn first_token(&self) -> usize {
        self.start
    }
}

/// Clusters of at least two mentions each, mentions sorted by start.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorefClusters {
    clusters: BTreeMap<usize, Vec<Mention>>,
}

impl CorefClusters {
    pub fn new(mentions: impl IntoIterator<Item = Mention>) -> Result<Self> {
        let mut clusters: BTreeMap<usize, Vec<Mention>> = BTreeMap::new();
        for m in mentions {
            ensure!(
                m.start < m.end,
                Contract,
                "mention [{}, {}) is empty",
                m.start,
                m.end
            );
            clusters.entry(m.cluster_id).or_default().push(m);
        }
        for (id, ms) in clusters.iter_mut() {
            ms.sort();
            ensure!(
                ms.len() >= 2,
                Contract,
                "cluster {id} has {} mention(s), need at least 2",
                ms.len()
            );
            ensure!(
                ms.windows(2).all(|p| p[0].start != p[1].start),
                Contract,
                "cluster {id} has two mentions starting at the same token"
            );
        }
        Ok(Self { clusters })
    }

    /// Builds clusters from lists of `(start, end)` spans; cluster ids follow
    /// list order.
    pub fn from_spans(spans: &[Vec<(usize, usize)>]) -> Result<Self> {
        Self::new(spans.iter().enumerate().flat_map(|(c, ms)| {
            ms.iter().map(move |&(start, end)| Mention {
                cluster_id: c,
                start,
                end,
            })
        }))
    }

    pub fn clusters(&self) -> &BTreeMap<usize, Vec<Mention>> {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn mentions(&self) -> impl Iterator<Item = &Mention> {
        self.clusters.values().flatten()
    }

    fn check_range(&self, n: usize) -> Result<()> {
        for m in self.mentions() {
            ensure!(
                m.end <= n,
                Contract,
                "mention [{}, {}) of cluster {} exceeds sequence length {n}",
                m.start,
                m.end,
                m.cluster_id
            );
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkMode {
    #[default]
    Full,
    Adjacent,
}

impl LinkMode {
    pub const ALL: [LinkMode; 2] = [LinkMode::Full, LinkMode::Adjacent];

    pub fn name(self) -> &'static str {
        match self {
            LinkMode::Full => "full",
            LinkMode::Adjacent => "adjacent",
        }
    }
}

impl fmt::Display for LinkMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LinkMode::Full),
            "adjacent" => Ok(LinkMode::Adjacent),
            _ => Err(Error::Validation(format!(
                "unknown link mode {s:?}, expected full or adjacent"
            ))),
        }
    }
}

/// Edge set of the full-link matrix. Both carry weight `1/m`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FullLinkEdges {
    /// Every pair of distinct mentions.
    #[default]
    AllPairs,
    /// Each mention with its preceding mention only.
    Chain,
}

/// Symmetric nonnegative `n×n` coreference weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureMatrix {
    pub link_mode: LinkMode,
    matrix: Tensor,
}

impl StructureMatrix {
    fn zeros(n: usize, link_mode: LinkMode) -> Result<Self> {
        ensure!(n > 0, Contract, "structure matrix needs n > 0");
        Ok(Self {
            link_mode,
            matrix: Tensor::zeros(&[n, n]),
        })
    }

    fn link(&mut self, i: usize, j: usize, w: f64) {
        let n = self.n();
        let d = self.matrix.data_mut();
        d[i * n + j] += w;
        d[j * n + i] += w;
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.at(i, j)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.matrix.row(i).iter().sum()
    }
}

/// Links every pair of distinct mentions in a cluster of `m` mentions with
/// weight `1/m`. Contributions from different clusters add.
pub fn build_full_link(clusters: &CorefClusters, n: usize) -> Result<StructureMatrix> {
    build_full_link_with(clusters, n, FullLinkEdges::AllPairs)
}

pub fn build_full_link_with(
    clusters: &CorefClusters,
    n: usize,
    edges: FullLinkEdges,
) -> Result<StructureMatrix> {
    clusters.check_range(n)?;
    let mut a = StructureMatrix::zeros(n, LinkMode::Full)?;
    for ms in clusters.clusters().values() {
        let w = 1.0 / ms.len() as f64;
        for (p, mp) in ms.iter().enumerate() {
            let partners = match edges {
                FullLinkEdges::AllPairs => &ms[p + 1..],
                FullLinkEdges::Chain => &ms[p + 1..(p + 2).min(ms.len())],
            };
            for mq in partners {
                a.link(mp.first_token(), mq.first_token(), w);
            }
        }
    }
    Ok(a)
}

/// Links consecutive mentions of each cluster with weight 1.
pub fn build_adjacent_link(clusters: &CorefClusters, n: usize) -> Result<StructureMatrix> {
    clusters.check_range(n)?;
    let mut a = StructureMatrix::zeros(n, LinkMode::Adjacent)?;
    for ms in clusters.clusters().values() {
        for pair in ms.windows(2) {
            a.link(pair[0].first_token(), pair[1].first_token(), 1.0);
        }
    }
    Ok(a)
}

pub fn build_structure(
    clusters: &CorefClusters,
    n: usize,
    mode: LinkMode,
    edges: FullLinkEdges,
) -> Result<StructureMatrix> {
    match mode {
        LinkMode::Full => build_full_link_with(clusters, n, edges),
        LinkMode::Adjacent => build_adjacent_link(clusters, n),
    }
}

/// Divides rows with positive mass by their sum and turns all-zero rows into
/// one-hot self-attention.
pub fn row_normalize_with_fallback(a: &Tensor) -> Result<Tensor> {
    ensure!(
        a.shape().len() == 2 && a.rows() == a.cols(),
        Shape,
        "expected a square matrix, got {:?}",
        a.shape()
    );
    let n = a.rows();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let row = a.row(i);
        ensure!(
            row.iter().all(|&v| v >= 0.0 && v.is_finite()),
            Contract,
            "row {i} has a negative or non-finite entry"
        );
        let sum: f64 = row.iter().sum();
        let dst = &mut out.data_mut()[i * n..(i + 1) * n];
        if sum > 0.0 {
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = v / sum;
            }
        } else {
            dst[i] = 1.0;
        }
    }
    Ok(out)
}

/// Maps char-offset clusters onto token spans. A mention covers every token
/// overlapping its char range. Mentions of one cluster that land on the same
/// first token are merged.
pub fn align_clusters_to_tokens(raw: &[Vec<CharSpan>], tokens: &[Token]) -> Result<CorefClusters> {
    let mut mentions = Vec::new();
    for (c, cluster) in raw.iter().enumerate() {
        let mut spans: BTreeMap<usize, usize> = BTreeMap::new();
        for span in cluster {
            let covering: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.start < span.end_char && span.start_char < t.end)
                .map(|(i, _)| i)
                .collect();
            let (Some(&first), Some(&last)) = (covering.first(), covering.last()) else {
                return Err(Error::Alignment(format!(
                    "cluster {c} span [{}, {}) covers no token",
                    span.start_char, span.end_char
                )));
            };
            let end = spans.entry(first).or_insert(last + 1);
            *end = (*end).max(last + 1);
        }
        if spans.len() < 2 {
            return Err(Error::Alignment(format!(
                "cluster {c} collapses to fewer than 2 distinct mentions after alignment"
            )));
        }
        mentions.extend(spans.into_iter().map(|(start, end)| Mention {
            cluster_id: c,
            start,
            end,
        }));
    }
    CorefClusters::new(mentions)
}

/// Per-dialogue cluster annotation over character offsets.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterDocument {
    pub text: String,
    pub clusters: Vec<Vec<CharSpan>>,
}

impl ClusterDocument {
    pub fn from_sample(sample: &DialogueSample) -> Self {
        Self {
            text: sample.render(),
            clusters: sample.clusters.clone(),
        }
    }

    pub fn tokens(&self) -> Vec<Token> {
        tokenize_dialogue(&self.text)
    }

    pub fn token_clusters(&self) -> Result<CorefClusters> {
        align_clusters_to_tokens(&self.clusters, &self.tokens())
    }
}

/// Row-normalized structure matrix for a dialogue of `n` tokens.
pub fn normalized_structure(
    clusters: &CorefClusters,
    n: usize,
    mode: LinkMode,
    edges: FullLinkEdges,
) -> Result<Tensor> {
    row_normalize_with_fallback(build_structure(clusters, n, mode, edges)?.as_tensor())
}
