//! Mini-batch AdamW training with validation ROUGE-2 checkpoint selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::metrics::{mean_score, rouge, RougeScore};
use crate::model::{AttentionOverrides, HeadGates, Parameter, PassOptions, Seq2SeqModel};
use crate::numerics::Tensor;

/// One training or evaluation pair. `target` excludes BOS and EOS.
#[derive(Clone, Debug)]
pub struct Example {
    pub id: String,
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub overrides: Option<AttentionOverrides>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Stop after this many epochs without a validation ROUGE-2 gain.
    pub patience: Option<usize>,
    /// Greedy decode cap used for validation.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            epochs: 15,
            batch_size: 16,
            weight_decay: 0.01,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: Some(5),
            max_decode_len: 48,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            Validation,
            "learning_rate must be positive"
        );
        ensure!(self.epochs >= 1, Validation, "epochs must be >= 1");
        ensure!(self.batch_size >= 1, Validation, "batch_size must be >= 1");
        ensure!(
            self.weight_decay >= 0.0,
            Validation,
            "weight_decay must be >= 0"
        );
        ensure!(self.clip_norm >= 0.0, Validation, "clip_norm must be >= 0");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Validation,
            "beta1 and beta2 must lie in [0, 1)"
        );
        ensure!(
            self.max_decode_len >= 1,
            Validation,
            "max_decode_len must be >= 1"
        );
        Ok(())
    }
}

/// Decoupled-weight-decay Adam. Decay applies to matrices only.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &[Parameter]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Parameter], grads: &[Vec<f64>], cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate;
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if p.value.shape().len() == 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.adam_eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: RougeScore,
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation ROUGE-2.
    pub model: Seq2SeqModel,
    pub history: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Per-example loss and parameter gradients.
pub fn example_gradients(
    model: &Seq2SeqModel,
    ex: &Example,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let opts = PassOptions {
        param_grads: true,
        dropout_rng,
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
        .param_vars()
        .iter()
        .zip(model.params())
        .map(|(&v, p)| {
            pass.tape
                .grad_slice(v)
                .map_or_else(|| vec![0.0; p.value.len()], <[f64]>::to_vec)
        })
        .collect();
    Ok((value, grads))
}

fn clip(grads: &mut [Vec<f64>], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Greedy-decoded ROUGE over id sequences, the checkpoint-selection metric.
pub fn validation_rouge(
    model: &Seq2SeqModel,
    examples: &[Example],
    max_len: usize,
) -> Result<RougeScore> {
    ensure!(!examples.is_empty(), Contract, "validation set is empty");
    let scores = examples
        .iter()
        .map(|ex| {
            let hyp = model.greedy(&ex.source, max_len, ex.overrides.as_ref())?;
            Ok(rouge(&hyp.tokens, &ex.target))
        })
        .collect::<Result<Vec<_>>>()?;
    mean_score(&scores)
}

/// Runs one optimizer step per batch and returns the mean example loss.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Seq2SeqModel,
    opt: &mut AdamW,
    train: &[Example],
    order: &[usize],
    cfg: &TrainConfig,
    dropout_rng: &mut ChaCha8Rng,
    epoch: usize,
    on_step: &mut dyn FnMut(&Seq2SeqModel, f64),
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        let mut acc: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.value.len()])
            .collect();
        let mut batch_loss = 0.0;
        for &i in batch {
            let (loss, grads) = example_gradients(model, &train[i], Some(&mut *dropout_rng))
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            batch_loss += loss;
            for (a, g) in acc.iter_mut().zip(&grads) {
                a.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
        }
        let scale = 1.0 / batch.len() as f64;
        acc.iter_mut().flatten().for_each(|g| *g *= scale);
        clip(&mut acc, cfg.clip_norm);
        opt.step(model.params_mut(), &acc, cfg);
        total += batch_loss;
        on_step(model, batch_loss * scale);
    }
    Ok(total / order.len() as f64)
}

/// Trains `model` and returns the checkpoint with the best validation
/// ROUGE-2, or the final one when `validation` is empty. Gates are never updated, so a pruning mask set on the model
/// stays in force; `gate_mask` installs one before the first step.
pub fn train(
    model: Seq2SeqModel,
    train_set: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    gate_mask: Option<&HeadGates>,
) -> Result<TrainOutcome> {
    train_with_observer(
        model,
        train_set,
        validation,
        cfg,
        seed,
        gate_mask,
        &mut |_, _| {},
    )
}

/// [`train`] with a callback after every optimizer step receiving the model
/// and the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn train_with_observer(
    mut model: Seq2SeqModel,
    train_set: &[Example],
    validation: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    gate_mask: Option<&HeadGates>,
    on_step: &mut dyn FnMut(&Seq2SeqModel, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train_set.is_empty(), Contract, "training set is empty");
    if let Some(mask) = gate_mask {
        model.set_gates(mask.clone())?;
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);
    let mut opt = AdamW::new(model.params());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut counted = |m: &Seq2SeqModel, l: f64| {
            steps += 1;
            on_step(m, l);
        };
        let train_loss = run_epoch(
            &mut model,
            &mut opt,
            train_set,
            &order,
            cfg,
            &mut dropout_rng,
            epoch,
            &mut counted,
        )?;
        let val = if validation.is_empty() {
            RougeScore::default()
        } else {
            validation_rouge(&model, validation, cfg.max_decode_len)?
        };
        history.push(EpochMetrics {
            epoch,
            train_loss,
            validation: val,
        });
        // Without a validation set the latest parameters win.
        let improved =
            validation.is_empty() || best.as_ref().is_none_or(|(r2, _, _)| val.r2_f1() > *r2);
        if improved {
            let snapshot = model.params().iter().map(|p| p.value.clone()).collect();
            best = Some((val.r2_f1(), epoch, snapshot));
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.1);
        if cfg.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
    }
    let (_, best_epoch, values) = best.expect("at least one epoch ran");
    model.load_values(values)?;
    Ok(TrainOutcome {
        model,
        history,
        best_epoch,
        steps,
    })
}
