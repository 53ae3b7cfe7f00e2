//! Encoder-decoder transformer with gated heads and encoder attention
//! overrides.

mod checkpoint;
mod config;
mod forward;
mod gates;
mod generate;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{Activation, ModelConfig, NormPlacement};
pub use forward::{Pass, PassOptions};
pub use gates::{layer_keys, AttentionOverrides, Bank, HeadGates, HeadSlot, LayerKey};
pub use generate::Hypothesis;

use crate::error::{ensure, Result};
use crate::numerics::Tensor;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Smallest id available to ordinary tokens.
pub const FIRST_FREE_ID: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnParams {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct FfnParams {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct NormParams {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct EncoderLayerParams {
    pub attn: AttnParams,
    pub norm1: NormParams,
    pub ffn: FfnParams,
    pub norm2: NormParams,
}

#[derive(Clone, Debug)]
pub(crate) struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub norm1: NormParams,
    pub cross_attn: AttnParams,
    pub norm2: NormParams,
    pub ffn: FfnParams,
    pub norm3: NormParams,
}

/// Indices into the flat parameter list.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub encoder: Vec<EncoderLayerParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub encoder_norm: Option<NormParams>,
    pub decoder_norm: Option<NormParams>,
    /// `None` when logits reuse `tok_emb`.
    pub out_w: Option<usize>,
    pub out_b: usize,
}

struct Builder {
    params: Vec<Parameter>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter { name, value });
        self.params.len() - 1
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> usize {
        let dist = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(rows, cols, |_, _| dist.sample(rng));
        self.push(name, t)
    }

    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> usize {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(name, fan_in, fan_out, std)
    }

    fn zeros(&mut self, name: String, n: usize) -> usize {
        self.push(name, Tensor::zeros(&[n]))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> NormParams {
        let gain = self.push(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0));
        let bias = self.zeros(format!("{prefix}.bias"), d);
        NormParams { gain, bias }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnParams {
        AttnParams {
            wq: self.weight(format!("{prefix}.wq"), d, d),
            bq: self.zeros(format!("{prefix}.bq"), d),
            wk: self.weight(format!("{prefix}.wk"), d, d),
            bk: self.zeros(format!("{prefix}.bk"), d),
            wv: self.weight(format!("{prefix}.wv"), d, d),
            bv: self.zeros(format!("{prefix}.bv"), d),
            wo: self.weight(format!("{prefix}.wo"), d, d),
            bo: self.zeros(format!("{prefix}.bo"), d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize) -> FfnParams {
        FfnParams {
            w1: self.weight(format!("{prefix}.w1"), d, f),
            b1: self.zeros(format!("{prefix}.b1"), f),
            w2: self.weight(format!("{prefix}.w2"), f, d),
            b2: self.zeros(format!("{prefix}.b2"), d),
        }
    }
}

/// Sinusoidal position table rescaled to entry standard deviation `std`.
/// It only seeds the learned positional embedding.
fn sinusoid_table(rows: usize, d: usize, std: f64) -> Tensor {
    let amp = std * std::f64::consts::SQRT_2;
    Tensor::from_fn(rows, d, |p, i| {
        let freq = 1.0 / 10000f64.powf((i / 2 * 2) as f64 / d as f64);
        let angle = p as f64 * freq;
        amp * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

fn build(config: &ModelConfig, seed: u64) -> (Vec<Parameter>, Layout) {
    let d = config.model_dim;
    let mut b = Builder {
        params: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    // A tied table doubles as the output projection, so it starts small to
    // keep initial logits near uniform.
    let emb_std = if config.tie_embeddings { 0.1 } else { 0.3 };
    let tok_emb = b.normal("tok_emb".into(), config.vocab_size, d, emb_std);
    let pos_emb = b.push(
        "pos_emb".into(),
        sinusoid_table(config.max_seq_len, d, emb_std),
    );
    let encoder = (0..config.encoder_layers)
        .map(|l| EncoderLayerParams {
            attn: b.attn(&format!("enc.{l}.attn"), d),
            norm1: b.norm(&format!("enc.{l}.norm1"), d),
            ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.ffn_dim),
            norm2: b.norm(&format!("enc.{l}.norm2"), d),
        })
        .collect();
    let decoder = (0..config.decoder_layers)
        .map(|l| DecoderLayerParams {
            self_attn: b.attn(&format!("dec.{l}.self_attn"), d),
            norm1: b.norm(&format!("dec.{l}.norm1"), d),
            cross_attn: b.attn(&format!("dec.{l}.cross_attn"), d),
            norm2: b.norm(&format!("dec.{l}.norm2"), d),
            ffn: b.ffn(&format!("dec.{l}.ffn"), d, config.ffn_dim),
            norm3: b.norm(&format!("dec.{l}.norm3"), d),
        })
        .collect();
    let (encoder_norm, decoder_norm) = match config.norm {
        NormPlacement::Pre => (
            Some(b.norm("enc.final_norm", d)),
            Some(b.norm("dec.final_norm", d)),
        ),
        NormPlacement::Post => (None, None),
    };
    let out_w =
        (!config.tie_embeddings).then(|| b.normal("out.w".into(), d, config.vocab_size, 0.02));
    let out_b = b.zeros("out.b".into(), config.vocab_size);
    let layout = Layout {
        tok_emb,
        pos_emb,
        encoder,
        decoder,
        encoder_norm,
        decoder_norm,
        out_w,
        out_b,
    };
    (b.params, layout)
}

/// Sequence-to-sequence transformer.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: Vec<Parameter>,
    layout: Layout,
    gates: HeadGates,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = build(&config, seed);
        let gates = HeadGates::new(&config);
        Ok(Self {
            config,
            params,
            layout,
            gates,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    /// Number of trainable scalars. Gates are not counted.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn gates(&self) -> &HeadGates {
        &self.gates
    }

    pub fn gates_mut(&mut self) -> &mut HeadGates {
        &mut self.gates
    }

    pub fn set_gates(&mut self, gates: HeadGates) -> Result<()> {
        ensure!(
            gates.matches(&self.config),
            Contract,
            "gate layout does not match the model"
        );
        self.gates = gates;
        Ok(())
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Replaces every parameter value, keeping names and order.
    pub fn load_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        ensure!(
            values.len() == self.params.len(),
            Contract,
            "expected {} parameter tensors, got {}",
            self.params.len(),
            values.len()
        );
        for (p, v) in self.params.iter().zip(&values) {
            ensure!(
                p.value.shape() == v.shape(),
                Shape,
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                v.shape()
            );
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }
}
