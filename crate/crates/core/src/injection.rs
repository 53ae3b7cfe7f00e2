//! Parameter-free coreference injection: selected encoder heads attend
//! with each sample's row-normalized structure matrix instead of softmax
//! scores.

use std::collections::BTreeSet;
use std::fmt::Write;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coref::{normalized_structure, FullLinkEdges, LinkMode};
use crate::data::EncodedSample;
use crate::error::{ensure, Error, Result};
use crate::head_analysis::{pairwise_sum, rank_layer, select_extremes, RunEnsemble, SelectionMode};
use crate::model::{
    AttentionOverrides, Bank, HeadSlot, LayerKey, PassOptions, Seq2SeqModel, PAD_ID,
};
use crate::numerics::Tensor;
use crate::training::{train, Example, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSelection {
    /// Lowest mean importance per layer.
    Importance,
    /// Highest attention similarity to the structure matrix per layer.
    Probing,
}

impl HeadSelection {
    pub const ALL: [HeadSelection; 2] = [HeadSelection::Importance, HeadSelection::Probing];

    pub fn name(self) -> &'static str {
        match self {
            HeadSelection::Importance => "importance",
            HeadSelection::Probing => "probing",
        }
    }
}

impl FromStr for HeadSelection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "importance" => Ok(HeadSelection::Importance),
            "probing" => Ok(HeadSelection::Probing),
            _ => Err(Error::Validation(format!(
                "unknown head selection {s:?} (expected importance or probing)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EncoderSlot {
    pub layer: usize,
    pub head: usize,
}

impl EncoderSlot {
    pub fn head_slot(self) -> HeadSlot {
        HeadSlot::new(Bank::EncoderSelf, self.layer, self.head)
    }
}

/// Encoder heads whose attention is replaced, all inside `layer_range`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectionPlan {
    pub selection: HeadSelection,
    pub link_mode: LinkMode,
    /// Half-open `[lo, hi)` span of encoder layers.
    pub layer_range: (usize, usize),
    pub slots: Vec<EncoderSlot>,
}

/// Upper half of an encoder with `layers` layers.
pub fn upper_half(layers: usize) -> (usize, usize) {
    (layers / 2, layers)
}

fn check_range(range: (usize, usize), encoder_layers: usize) -> Result<()> {
    ensure!(
        range.0 < range.1 && range.1 <= encoder_layers,
        Contract,
        "layer range [{}, {}) is not a non-empty span of {encoder_layers} encoder layers",
        range.0,
        range.1
    );
    Ok(())
}

impl InjectionPlan {
    pub fn validate(&self, model: &Seq2SeqModel) -> Result<()> {
        let cfg = model.config();
        check_range(self.layer_range, cfg.encoder_layers)?;
        let mut seen = BTreeSet::new();
        for s in &self.slots {
            ensure!(seen.insert(*s), Contract, "slot {s:?} listed twice");
            ensure!(
                (self.layer_range.0..self.layer_range.1).contains(&s.layer),
                Contract,
                "slot {s:?} outside layer range {:?}",
                self.layer_range
            );
            ensure!(
                s.head < cfg.heads,
                Contract,
                "slot {s:?} exceeds {} heads",
                cfg.heads
            );
        }
        Ok(())
    }

    pub fn head_slots(&self) -> Vec<HeadSlot> {
        self.slots.iter().map(|s| s.head_slot()).collect()
    }

    fn targets(&self) -> Vec<LayerKey> {
        (self.layer_range.0..self.layer_range.1)
            .map(|layer| LayerKey {
                bank: Bank::EncoderSelf,
                layer,
            })
            .collect()
    }
}

/// The `k` lowest-importance eligible heads in each layer of `layer_range`.
pub fn plan_by_importance(
    ensemble: &RunEnsemble,
    link_mode: LinkMode,
    layer_range: (usize, usize),
    k: usize,
) -> Result<InjectionPlan> {
    let encoder_layers = ensemble
        .keys()
        .iter()
        .filter(|key| key.bank == Bank::EncoderSelf)
        .count();
    check_range(layer_range, encoder_layers)?;
    let mut plan = InjectionPlan {
        selection: HeadSelection::Importance,
        link_mode,
        layer_range,
        slots: Vec::new(),
    };
    plan.slots = select_extremes(ensemble, SelectionMode::Lowest, k, &plan.targets())?
        .slots
        .into_iter()
        .map(|s| EncoderSlot {
            layer: s.layer,
            head: s.head,
        })
        .collect();
    Ok(plan)
}

/// A sample's source tokens with its row-normalized structure matrix.
#[derive(Clone, Debug)]
pub struct ProbeSample {
    pub source: Vec<usize>,
    pub structure: Arc<Tensor>,
}

/// Mean cosine similarity of each encoder head's attention to the
/// structure matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbingReport {
    pub heads: usize,
    /// `similarity[layer][head]`.
    pub similarity: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl ProbingReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,head,mean_cosine\n");
        for (layer, row) in self.similarity.iter().enumerate() {
            for (head, v) in row.iter().enumerate() {
                let _ = writeln!(out, "{layer},{head},{v:.6}");
            }
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    ensure!(
        na > 0.0 && nb > 0.0,
        Contract,
        "cosine similarity of a zero matrix"
    );
    Ok(dot / (na * nb))
}

/// Entries of an `n×n` matrix whose row and column are both non-pad.
fn non_pad_entries(m: &Tensor, keep: &[bool]) -> Vec<f64> {
    let n = keep.len();
    let mut out = Vec::new();
    for i in (0..n).filter(|&i| keep[i]) {
        out.extend((0..n).filter(|&j| keep[j]).map(|j| m.at(i, j)));
    }
    out
}

/// Per-head similarity, computed per sample and then averaged.
pub fn probe_heads(
    model: &Seq2SeqModel,
    probes: &[ProbeSample],
    overrides: Option<&AttentionOverrides>,
) -> Result<ProbingReport> {
    ensure!(!probes.is_empty(), Contract, "probe set is empty");
    let cfg = model.config();
    let (layers, heads) = (cfg.encoder_layers, cfg.heads);
    let mut per_sample = Vec::with_capacity(probes.len());
    for p in probes {
        let n = p.source.len();
        ensure!(
            p.structure.shape() == [n, n],
            Shape,
            "structure matrix {:?} for {n} tokens",
            p.structure.shape()
        );
        let keep: Vec<bool> = p.source.iter().map(|&t| t != PAD_ID).collect();
        let target = non_pad_entries(&p.structure, &keep);
        let mut pass = model.pass(PassOptions {
            record_attention: true,
            ..PassOptions::default()
        });
        pass.encode(&p.source, None, overrides)?;
        let mut sims = vec![0.0; layers * heads];
        for (slot, attn) in pass.attention_maps() {
            if slot.bank == Bank::EncoderSelf {
                sims[slot.layer * heads + slot.head] =
                    cosine(&non_pad_entries(attn, &keep), &target)?;
            }
        }
        per_sample.push(sims);
    }
    let n = probes.len() as f64;
    let similarity = pairwise_sum(&per_sample)
        .chunks(heads)
        .map(|row| row.iter().map(|v| v / n).collect())
        .collect();
    Ok(ProbingReport {
        heads,
        similarity,
        sample_count: probes.len(),
    })
}

/// The `k` heads per layer of `layer_range` whose attention is most similar
/// to the structure matrix.
pub fn plan_by_probing(
    model: &Seq2SeqModel,
    probes: &[ProbeSample],
    link_mode: LinkMode,
    layer_range: (usize, usize),
    k: usize,
) -> Result<(InjectionPlan, ProbingReport)> {
    check_range(layer_range, model.config().encoder_layers)?;
    let report = probe_heads(model, probes, None)?;
    let plan = plan_from_report(&report, link_mode, layer_range, k)?;
    Ok((plan, report))
}

pub fn plan_from_report(
    report: &ProbingReport,
    link_mode: LinkMode,
    layer_range: (usize, usize),
    k: usize,
) -> Result<InjectionPlan> {
    check_range(layer_range, report.similarity.len())?;
    let mut slots = Vec::new();
    for layer in layer_range.0..layer_range.1 {
        let row = &report.similarity[layer];
        let picked = rank_layer(row, &vec![false; row.len()], SelectionMode::Highest, k)?;
        slots.extend(picked.into_iter().map(|head| EncoderSlot { layer, head }));
    }
    Ok(InjectionPlan {
        selection: HeadSelection::Probing,
        link_mode,
        layer_range,
        slots,
    })
}

/// Row-normalized structure matrix of an encoded sample.
pub fn sample_structure(
    sample: &EncodedSample,
    mode: LinkMode,
    edges: FullLinkEdges,
) -> Result<Arc<Tensor>> {
    ensure!(
        !sample.clusters.is_empty(),
        Contract,
        "sample {} has no coreference clusters",
        sample.id
    );
    Ok(Arc::new(normalized_structure(
        &sample.clusters,
        sample.source.len(),
        mode,
        edges,
    )?))
}

pub fn probe_samples(
    samples: &[EncodedSample],
    mode: LinkMode,
    edges: FullLinkEdges,
) -> Result<Vec<ProbeSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(ProbeSample {
                source: s.source.clone(),
                structure: sample_structure(s, mode, edges)?,
            })
        })
        .collect()
}

/// The same structure matrix installed on every planned slot.
pub fn overrides_for(plan: &InjectionPlan, structure: &Arc<Tensor>) -> Result<AttentionOverrides> {
    let mut o = AttentionOverrides::new();
    for s in &plan.slots {
        o.insert(s.head_slot(), Arc::clone(structure))?;
    }
    Ok(o)
}

/// Training or evaluation examples carrying the plan's per-sample
/// overrides. An empty plan yields plain examples.
pub fn injected_examples(
    samples: &[EncodedSample],
    plan: &InjectionPlan,
    edges: FullLinkEdges,
) -> Result<Vec<Example>> {
    samples
        .iter()
        .map(|s| {
            let mut ex = s.example();
            if !plan.slots.is_empty() {
                let structure = sample_structure(s, plan.link_mode, edges)?;
                ex.overrides = Some(overrides_for(plan, &structure)?);
            }
            Ok(ex)
        })
        .collect()
}

/// Trains `model` with the planned heads overridden on every pass.
pub fn fine_tune_with_injection(
    model: Seq2SeqModel,
    plan: &InjectionPlan,
    train_set: &[EncodedSample],
    validation: &[EncodedSample],
    cfg: &TrainConfig,
    seed: u64,
    edges: FullLinkEdges,
) -> Result<TrainOutcome> {
    plan.validate(&model)?;
    let tr = injected_examples(train_set, plan, edges)?;
    let va = injected_examples(validation, plan, edges)?;
    train(model, &tr, &va, cfg, seed, None)
}

/// A copy of `model` with the planned heads' gates at zero.
pub fn ablate_injected_heads(model: &Seq2SeqModel, plan: &InjectionPlan) -> Result<Seq2SeqModel> {
    plan.validate(model)?;
    let mut ablated = model.clone();
    for s in plan.head_slots() {
        ablated.gates_mut().prune(s)?;
    }
    Ok(ablated)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotImportance {
    pub layer: usize,
    pub head: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerChange {
    pub layer: usize,
    /// Summed change of the layer's planned slots.
    pub delta: f64,
}

impl LayerChange {
    pub fn increased(&self) -> bool {
        self.delta > 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceComparison {
    pub slots: Vec<SlotImportance>,
    pub layers: Vec<LayerChange>,
}

impl ImportanceComparison {
    pub fn layers_increased(&self) -> usize {
        self.layers.iter().filter(|l| l.increased()).count()
    }
}

/// Normalized importance of every planned slot before and after injection.
pub fn importance_before_after(
    before: &RunEnsemble,
    after: &RunEnsemble,
    plan: &InjectionPlan,
) -> Result<ImportanceComparison> {
    ensure!(
        before.keys() == after.keys() && before.heads() == after.heads(),
        Contract,
        "importance ensembles have different shapes"
    );
    let mut slots = Vec::with_capacity(plan.slots.len());
    let mut layers: Vec<LayerChange> = Vec::new();
    for s in &plan.slots {
        let key = LayerKey {
            bank: Bank::EncoderSelf,
            layer: s.layer,
        };
        let row = before
            .row_of(key)
            .ok_or_else(|| Error::Contract(format!("layer {key} missing from ensemble")))?;
        ensure!(
            s.head < before.heads(),
            Contract,
            "slot {s:?} exceeds the ensemble"
        );
        let (b, a) = (before.mean[row][s.head], after.mean[row][s.head]);
        slots.push(SlotImportance {
            layer: s.layer,
            head: s.head,
            before: b,
            after: a,
        });
        match layers.iter_mut().find(|l| l.layer == s.layer) {
            Some(l) => l.delta += a - b,
            None => layers.push(LayerChange {
                layer: s.layer,
                delta: a - b,
            }),
        }
    }
    layers.sort_by_key(|l| l.layer);
    Ok(ImportanceComparison { slots, layers })
}

/// Slots chosen by both plans.
pub fn plan_overlap(a: &InjectionPlan, b: &InjectionPlan) -> Vec<EncoderSlot> {
    let other: BTreeSet<_> = b.slots.iter().collect();
    a.slots
        .iter()
        .filter(|s| other.contains(s))
        .copied()
        .collect()
}
