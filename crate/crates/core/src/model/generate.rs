use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::Var;

use super::forward::KvCache;
use super::{AttentionOverrides, Pass, PassOptions, Seq2SeqModel, BOS_ID, EOS_ID, PAD_ID};

/// A decoded sequence. `tokens` excludes BOS and EOS.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities, EOS included when emitted.
    pub log_prob: f64,
    /// Number of scored steps.
    pub steps: usize,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score: mean log-probability per decoding step.
    pub fn score(&self) -> f64 {
        if self.steps == 0 {
            return f64::NEG_INFINITY;
        }
        self.log_prob / self.steps as f64
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

struct Decoder<'a> {
    pass: Pass<'a>,
    cross: Vec<(Var, Var)>,
    mask: Option<Vec<bool>>,
    mark: usize,
}

impl<'a> Decoder<'a> {
    fn new(
        model: &'a Seq2SeqModel,
        source: &[usize],
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Self> {
        let mut pass = model.pass(PassOptions::inference());
        let memory = pass.encode(source, None, overrides)?;
        let cross = pass.cross_memory(memory)?;
        let mask = source
            .contains(&PAD_ID)
            .then(|| source.iter().map(|&t| t != PAD_ID).collect());
        let mark = pass.tape.len();
        Ok(Self {
            pass,
            cross,
            mask,
            mark,
        })
    }

    /// Feeds the newest token of `prefix` (BOS when empty) and returns the
    /// next-token log-probabilities. `cache` must hold the rest of the prefix.
    fn next(&mut self, prefix: &[usize], cache: &mut KvCache) -> Result<Vec<f64>> {
        let token = prefix.last().copied().unwrap_or(BOS_ID);
        let logits = self
            .pass
            .decode_step(token, cache, &self.cross, self.mask.as_deref())?;
        let out = log_softmax(self.pass.tape.value(logits).data());
        self.pass.tape.truncate(self.mark);
        Ok(out)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Seq2SeqModel {
    fn decode_limit(&self, max_len: usize) -> usize {
        // BOS occupies one decoder position
        max_len.min(self.config().max_seq_len - 1)
    }

    /// Argmax rollout until EOS or `max_len` steps.
    pub fn greedy(
        &self,
        source: &[usize],
        max_len: usize,
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Hypothesis> {
        let mut dec = Decoder::new(self, source, overrides)?;
        let mut cache = KvCache::default();
        let mut hyp = Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            steps: 0,
            finished: false,
        };
        for _ in 0..self.decode_limit(max_len) {
            let lp = dec.next(&hyp.tokens, &mut cache)?;
            let tok = argmax(&lp);
            hyp.log_prob += lp[tok];
            hyp.steps += 1;
            if tok == EOS_ID {
                hyp.finished = true;
                break;
            }
            hyp.tokens.push(tok);
        }
        Ok(hyp)
    }

    /// Length-normalized beam search.
    ///
    /// Each step keeps the `beam_size` best extensions by cumulative
    /// log-probability; extensions ending in EOS retire. The greedy rollout
    /// competes in the final selection, so the result never scores below it.
    pub fn generate(
        &self,
        source: &[usize],
        beam_size: usize,
        max_len: usize,
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Hypothesis> {
        ensure!(beam_size >= 1, Contract, "beam_size must be >= 1");
        let greedy = self.greedy(source, max_len, overrides)?;
        if beam_size == 1 {
            return Ok(greedy);
        }
        let mut dec = Decoder::new(self, source, overrides)?;
        let mut live = vec![(
            Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
                steps: 0,
                finished: false,
            },
            KvCache::default(),
        )];
        let mut done: Vec<Hypothesis> = Vec::new();
        for _ in 0..self.decode_limit(max_len) {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (h, (hyp, cache)) in live.iter_mut().enumerate() {
                let lp = dec.next(&hyp.tokens, cache)?;
                candidates.extend(
                    lp.iter()
                        .enumerate()
                        .map(|(t, &l)| (hyp.log_prob + l, h, t)),
                );
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut next = Vec::with_capacity(beam_size);
            for &(score, h, tok) in candidates.iter().take(beam_size) {
                let (parent, cache) = &live[h];
                let mut tokens = parent.tokens.clone();
                let finished = tok == EOS_ID;
                if !finished {
                    tokens.push(tok);
                }
                let hyp = Hypothesis {
                    tokens,
                    log_prob: score,
                    steps: parent.steps + 1,
                    finished,
                };
                if finished {
                    done.push(hyp);
                } else {
                    next.push((hyp, cache.clone()));
                }
            }
            live = next;
            if live.is_empty() || done.len() >= beam_size {
                break;
            }
        }
        done.extend(live.into_iter().map(|(h, _)| h));
        done.push(greedy);
        let mut best = 0;
        for (i, h) in done.iter().enumerate() {
            if h.score() > done[best].score() {
                best = i;
            }
        }
        Ok(done.swap_remove(best))
    }
}
