//! Gradient-based head importance, cross-run aggregation and pruning plans.

mod heatmap;

use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use heatmap::{export_heatmap, parse_heatmap_csv, render_heatmap_svg, Heatmap};

use crate::error::{ensure, Error, Result};
use crate::model::{layer_keys, HeadGates, HeadSlot, LayerKey, PassOptions, Seq2SeqModel};
use crate::training::Example;

/// Raw and per-layer normalized importance of every head, one row per
/// [`LayerKey`] in gate order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub keys: Vec<LayerKey>,
    pub heads: usize,
    pub raw: Vec<Vec<f64>>,
    pub normalized: Vec<Vec<f64>>,
    pub sample_count: usize,
}

impl ImportanceMap {
    /// Builds a map from raw scores and fills in the normalized rows.
    pub fn from_raw(keys: Vec<LayerKey>, raw: Vec<Vec<f64>>, sample_count: usize) -> Result<Self> {
        ensure!(
            keys.len() == raw.len() && !raw.is_empty(),
            Shape,
            "{} layer keys for {} score rows",
            keys.len(),
            raw.len()
        );
        let heads = raw[0].len();
        ensure!(heads > 0, Shape, "score rows are empty");
        for (k, row) in keys.iter().zip(&raw) {
            ensure!(
                row.len() == heads,
                Shape,
                "row {k} has {} heads, expected {heads}",
                row.len()
            );
            ensure!(
                row.iter().all(|&v| v >= 0.0 && v.is_finite()),
                Contract,
                "row {k} has a negative or non-finite score"
            );
        }
        let mut map = Self {
            keys,
            heads,
            normalized: raw.clone(),
            raw,
            sample_count,
        };
        map.normalized = map.raw.iter().map(|r| l2_normalize(r)).collect();
        Ok(map)
    }

    pub fn row_of(&self, key: LayerKey) -> Option<usize> {
        self.keys.iter().position(|&k| k == key)
    }

    fn same_shape(&self, other: &ImportanceMap) -> bool {
        self.keys == other.keys && self.heads == other.heads
    }
}

fn l2_normalize(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return row.to_vec();
    }
    row.iter().map(|v| v / norm).collect()
}

/// Recomputes the normalized rows from the raw scores.
pub fn normalize_per_layer(map: ImportanceMap) -> ImportanceMap {
    let normalized = map.raw.iter().map(|r| l2_normalize(r)).collect();
    ImportanceMap { normalized, ..map }
}

/// Sum of equal-length vectors by recursive halving; duplicating the input
/// list exactly doubles the result.
pub fn pairwise_sum(items: &[Vec<f64>]) -> Vec<f64> {
    match items {
        [] => Vec::new(),
        [one] => one.clone(),
        _ => {
            let (a, b) = items.split_at(items.len() / 2);
            let (a, b) = (pairwise_sum(a), pairwise_sum(b));
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        }
    }
}

/// Absolute gate gradient of one example's loss, flattened in gate order.
pub fn sample_gate_sensitivity(model: &Seq2SeqModel, ex: &Example) -> Result<Vec<f64>> {
    let opts = PassOptions {
        gate_grads: true,
        ..PassOptions::default()
    };
    let (mut pass, loss) =
        model.forward_loss(&ex.source, &ex.target, ex.overrides.as_ref(), opts)?;
    let value = pass.tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {value} on example {}",
            ex.id
        )));
    }
    pass.tape.backward(loss)?;
    let grads = pass
        .gate_grads()
        .ok_or_else(|| Error::Contract("gate gradients were not recorded".into()))?;
    Ok(grads.data().iter().map(|g| g.abs()).collect())
}

/// Mean absolute gradient of the loss with respect to each head gate.
pub fn score_heads(model: &Seq2SeqModel, examples: &[Example]) -> Result<ImportanceMap> {
    ensure!(
        !examples.is_empty(),
        Contract,
        "cannot score heads on an empty dataset"
    );
    ensure!(
        model.gates().as_tensor().data().iter().all(|&g| g == 1.0),
        Contract,
        "head scoring requires all gates at 1.0"
    );
    let per_sample = examples
        .iter()
        .map(|ex| sample_gate_sensitivity(model, ex))
        .collect::<Result<Vec<_>>>()?;
    let n = examples.len() as f64;
    let heads = model.config().heads;
    let raw = pairwise_sum(&per_sample)
        .chunks(heads)
        .map(|row| row.iter().map(|v| v / n).collect())
        .collect();
    ImportanceMap::from_raw(layer_keys(model.config()), raw, examples.len())
}

/// Importance maps from independent runs with their elementwise statistics
/// over normalized scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEnsemble {
    pub maps: Vec<ImportanceMap>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    /// `std / mean`; zero where both vanish, infinite where only the mean does.
    pub cov: Vec<Vec<f64>>,
    pub excluded: Vec<Vec<bool>>,
    pub cov_threshold: f64,
}

impl RunEnsemble {
    pub fn keys(&self) -> &[LayerKey] {
        &self.maps[0].keys
    }

    pub fn heads(&self) -> usize {
        self.maps[0].heads
    }

    pub fn row_of(&self, key: LayerKey) -> Option<usize> {
        self.maps[0].row_of(key)
    }
}

pub const DEFAULT_COV_THRESHOLD: f64 = 0.5;

/// Averages per-run normalized scores and flags heads whose coefficient of
/// variation exceeds `cov_threshold`.
pub fn aggregate_runs(maps: Vec<ImportanceMap>, cov_threshold: f64) -> Result<RunEnsemble> {
    ensure!(
        !maps.is_empty(),
        Contract,
        "need at least one importance map"
    );
    ensure!(cov_threshold >= 0.0, Contract, "cov_threshold must be >= 0");
    ensure!(
        maps.iter().all(|m| m.same_shape(&maps[0])),
        Contract,
        "importance maps have different shapes"
    );
    let r = maps.len() as f64;
    let (rows, heads) = (maps[0].keys.len(), maps[0].heads);
    let mut mean = vec![vec![0.0; heads]; rows];
    let mut std = vec![vec![0.0; heads]; rows];
    let mut cov = vec![vec![0.0; heads]; rows];
    let mut excluded = vec![vec![false; heads]; rows];
    for i in 0..rows {
        for h in 0..heads {
            let m = maps.iter().map(|x| x.normalized[i][h]).sum::<f64>() / r;
            let var = maps
                .iter()
                .map(|x| (x.normalized[i][h] - m).powi(2))
                .sum::<f64>()
                / r;
            let s = var.sqrt();
            let c = match (m == 0.0, s == 0.0) {
                (_, true) => 0.0,
                (true, false) => f64::INFINITY,
                (false, false) => s / m,
            };
            mean[i][h] = m;
            std[i][h] = s;
            cov[i][h] = c;
            excluded[i][h] = c > cov_threshold;
        }
    }
    Ok(RunEnsemble {
        maps,
        mean,
        std,
        cov,
        excluded,
        cov_threshold,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Highest,
    Lowest,
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highest" => Ok(SelectionMode::Highest),
            "lowest" => Ok(SelectionMode::Lowest),
            _ => Err(Error::Validation(format!(
                "unknown selection mode {s:?} (expected highest or lowest)"
            ))),
        }
    }
}

/// Heads to mask: exactly `k` per targeted layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningPlan {
    pub mode: SelectionMode,
    pub k: usize,
    pub slots: Vec<HeadSlot>,
}

impl PruningPlan {
    pub fn empty(mode: SelectionMode) -> Self {
        Self {
            mode,
            k: 0,
            slots: Vec::new(),
        }
    }

    /// Gates of `model` with every planned slot set to zero.
    pub fn gates_for(&self, model: &Seq2SeqModel) -> Result<HeadGates> {
        let mut gates = model.gates().clone();
        for &slot in &self.slots {
            gates.prune(slot)?;
        }
        Ok(gates)
    }
}

/// Per-layer ranking of `k` heads among those not excluded. Ties go to the
/// lower head index.
pub fn rank_layer(
    means: &[f64],
    excluded: &[bool],
    mode: SelectionMode,
    k: usize,
) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..means.len()).filter(|&h| !excluded[h]).collect();
    ensure!(
        k <= candidates.len(),
        Contract,
        "cannot select {k} heads from {} eligible",
        candidates.len()
    );
    candidates.sort_by(|&a, &b| {
        let ord = means[a].total_cmp(&means[b]);
        let ord = match mode {
            SelectionMode::Lowest => ord,
            SelectionMode::Highest => ord.reverse(),
        };
        ord.then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates.sort_unstable();
    Ok(candidates)
}

/// Picks the `k` highest or lowest mean-importance heads in each of
/// `targets`.
pub fn select_extremes(
    ensemble: &RunEnsemble,
    mode: SelectionMode,
    k: usize,
    targets: &[LayerKey],
) -> Result<PruningPlan> {
    let mut slots = Vec::new();
    for (n, &key) in targets.iter().enumerate() {
        ensure!(
            !targets[..n].contains(&key),
            Contract,
            "layer {key} targeted twice"
        );
        let row = ensemble
            .row_of(key)
            .ok_or_else(|| Error::Contract(format!("layer {key} is not in the ensemble")))?;
        let picked = rank_layer(&ensemble.mean[row], &ensemble.excluded[row], mode, k)
            .map_err(|e| Error::Contract(format!("layer {key}: {e}")))?;
        slots.extend(
            picked
                .into_iter()
                .map(|h| HeadSlot::new(key.bank, key.layer, h)),
        );
    }
    Ok(PruningPlan { mode, k, slots })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruningStage {
    /// Mask heads of an already trained model.
    Inference,
    /// Mask heads before training and keep them masked throughout.
    Training,
}

impl FromStr for PruningStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inference" => Ok(PruningStage::Inference),
            "training" => Ok(PruningStage::Training),
            _ => Err(Error::Validation(format!(
                "unknown pruning stage {s:?} (expected inference or training)"
            ))),
        }
    }
}

/// Zeroes the planned gates. For [`PruningStage::Training`] the returned
/// model is meant to be passed to training, which never updates gates.
pub fn apply_pruning(mut model: Seq2SeqModel, plan: &PruningPlan) -> Result<Seq2SeqModel> {
    let mut seen = std::collections::HashSet::new();
    for slot in &plan.slots {
        ensure!(seen.insert(*slot), Contract, "slot {slot:?} listed twice");
    }
    let gates = plan.gates_for(&model)?;
    model.set_gates(gates)?;
    Ok(model)
}
