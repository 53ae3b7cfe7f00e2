use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Tensor;

use super::ModelConfig;

/// One of the three families of attention layers in the encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bank {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl Bank {
    pub const ALL: [Bank; 3] = [Bank::EncoderSelf, Bank::DecoderSelf, Bank::DecoderCross];

    pub fn short_name(self) -> &'static str {
        match self {
            Bank::EncoderSelf => "enc",
            Bank::DecoderSelf => "dec_self",
            Bank::DecoderCross => "dec_cross",
        }
    }

    pub fn from_short_name(name: &str) -> Option<Bank> {
        Bank::ALL.into_iter().find(|b| b.short_name() == name)
    }

    pub fn layers(self, config: &ModelConfig) -> usize {
        match self {
            Bank::EncoderSelf => config.encoder_layers,
            Bank::DecoderSelf | Bank::DecoderCross => config.decoder_layers,
        }
    }
}

impl fmt::Display for Bank {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

/// A single attention head position in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadSlot {
    pub bank: Bank,
    pub layer: usize,
    pub head: usize,
}

impl HeadSlot {
    pub fn new(bank: Bank, layer: usize, head: usize) -> Self {
        Self { bank, layer, head }
    }
}

/// A (bank, layer) pair, i.e. one row of gates or importance scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerKey {
    pub bank: Bank,
    pub layer: usize,
}

impl fmt::Display for LayerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.bank, self.layer)
    }
}

impl std::str::FromStr for LayerKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (bank, layer) = s
            .rsplit_once('.')
            .ok_or_else(|| Error::Validation(format!("bad layer key {s:?}")))?;
        let bank = Bank::from_short_name(bank)
            .ok_or_else(|| Error::Validation(format!("unknown bank {bank:?}")))?;
        let layer = layer
            .parse()
            .map_err(|_| Error::Validation(format!("bad layer index in {s:?}")))?;
        Ok(LayerKey { bank, layer })
    }
}

/// Row order shared by gates and importance maps: encoder self-attention,
/// then decoder self-attention, then decoder cross-attention.
pub fn layer_keys(config: &ModelConfig) -> Vec<LayerKey> {
    Bank::ALL
        .into_iter()
        .flat_map(|bank| (0..bank.layers(config)).map(move |layer| LayerKey { bank, layer }))
        .collect()
}

/// Multiplicative per-head gates. `1.0` leaves a head untouched, `0.0`
/// prunes it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadGates {
    encoder_layers: usize,
    decoder_layers: usize,
    heads: usize,
    values: Tensor,
}

impl HeadGates {
    pub fn new(config: &ModelConfig) -> Self {
        let rows = config.encoder_layers + 2 * config.decoder_layers;
        Self {
            encoder_layers: config.encoder_layers,
            decoder_layers: config.decoder_layers,
            heads: config.heads,
            values: Tensor::filled(&[rows, config.heads], 1.0),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn row_index(&self, bank: Bank, layer: usize) -> Result<usize> {
        let (offset, count) = match bank {
            Bank::EncoderSelf => (0, self.encoder_layers),
            Bank::DecoderSelf => (self.encoder_layers, self.decoder_layers),
            Bank::DecoderCross => (
                self.encoder_layers + self.decoder_layers,
                self.decoder_layers,
            ),
        };
        ensure!(
            layer < count,
            Contract,
            "layer {layer} out of range for {bank} ({count} layers)"
        );
        Ok(offset + layer)
    }

    fn check(&self, slot: HeadSlot) -> Result<usize> {
        let row = self.row_index(slot.bank, slot.layer)?;
        ensure!(
            slot.head < self.heads,
            Contract,
            "head {} out of range ({} heads)",
            slot.head,
            self.heads
        );
        Ok(row * self.heads + slot.head)
    }

    pub fn get(&self, slot: HeadSlot) -> Result<f64> {
        Ok(self.values.data()[self.check(slot)?])
    }

    pub fn set(&mut self, slot: HeadSlot, value: f64) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&value),
            Contract,
            "gate value {value} outside [0, 1]"
        );
        let k = self.check(slot)?;
        self.values.data_mut()[k] = value;
        Ok(())
    }

    pub fn prune(&mut self, slot: HeadSlot) -> Result<()> {
        self.set(slot, 0.0)
    }

    pub fn pruned(&self) -> Vec<HeadSlot> {
        self.slots()
            .into_iter()
            .filter(|&s| self.get(s).unwrap_or(1.0) == 0.0)
            .collect()
    }

    pub fn slots(&self) -> Vec<HeadSlot> {
        let cfg = ModelConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            heads: self.heads,
            ..Default::default()
        };
        layer_keys(&cfg)
            .into_iter()
            .flat_map(|k| (0..self.heads).map(move |h| HeadSlot::new(k.bank, k.layer, h)))
            .collect()
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.encoder_layers == config.encoder_layers
            && self.decoder_layers == config.decoder_layers
            && self.heads == config.heads
    }
}

/// Replacement attention distributions for individual encoder heads.
///
/// Each matrix must be square and row-stochastic; its size is checked
/// against the sequence length when the forward pass uses it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionOverrides {
    slots: BTreeMap<(usize, usize), Arc<Tensor>>,
}

impl AttentionOverrides {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: HeadSlot, matrix: Arc<Tensor>) -> Result<()> {
        ensure!(
            slot.bank == Bank::EncoderSelf,
            Contract,
            "attention overrides apply to encoder self-attention only, got {}",
            slot.bank
        );
        let shape = matrix.shape();
        ensure!(
            shape.len() == 2 && shape[0] == shape[1],
            Shape,
            "override must be square, got {shape:?}"
        );
        for r in 0..shape[0] {
            let row = matrix.row(r);
            ensure!(
                row.iter().all(|&v| v >= 0.0),
                Contract,
                "override row {r} has a negative entry"
            );
            let total: f64 = row.iter().sum();
            ensure!(
                (total - 1.0).abs() <= 1e-9,
                Contract,
                "override row {r} sums to {total}"
            );
        }
        self.slots.insert((slot.layer, slot.head), matrix);
        Ok(())
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&Arc<Tensor>> {
        self.slots.get(&(layer, head))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn slots(&self) -> impl Iterator<Item = HeadSlot> + '_ {
        self.slots
            .keys()
            .map(|&(layer, head)| HeadSlot::new(Bank::EncoderSelf, layer, head))
    }
}
