use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::numerics::{Tape, Tensor, Var};

use super::{
    Activation, AttentionOverrides, AttnParams, Bank, FfnParams, HeadSlot, NormParams,
    NormPlacement, Seq2SeqModel, BOS_ID, EOS_ID, PAD_ID,
};

/// What a [`Pass`] records besides values.
#[derive(Default)]
pub struct PassOptions<'a> {
    /// Track gradients for model parameters.
    pub param_grads: bool,
    /// Track gradients for head gates.
    pub gate_grads: bool,
    /// Enables dropout when present.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Keep a handle to every head's attention distribution.
    pub record_attention: bool,
}

impl<'a> PassOptions<'a> {
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn training(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            param_grads: true,
            dropout_rng: Some(rng),
            ..Self::default()
        }
    }
}

/// One forward computation over a model, recorded on its own tape.
pub struct Pass<'a> {
    model: &'a Seq2SeqModel,
    pub tape: Tape,
    params: Vec<Var>,
    gates: Var,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
    record_attention: bool,
    attention: Vec<(HeadSlot, Var)>,
}

/// Self-attention keys and values of a decoded prefix, per decoder layer.
#[derive(Clone, Debug, Default)]
pub(crate) struct KvCache {
    layers: Vec<(Vec<f64>, Vec<f64>)>,
    len: usize,
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k % n <= k / n).collect()
}

fn key_mask_grid(rows: usize, key_mask: &[bool]) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * key_mask.len());
    for _ in 0..rows {
        out.extend_from_slice(key_mask);
    }
    out
}

impl<'a> Pass<'a> {
    pub(crate) fn new(model: &'a Seq2SeqModel, opts: PassOptions<'a>) -> Self {
        let mut tape = Tape::new();
        let params = model
            .params()
            .iter()
            .map(|p| tape.leaf(p.value.clone(), opts.param_grads))
            .collect();
        let gates = tape.leaf(model.gates().as_tensor().clone(), opts.gate_grads);
        Self {
            model,
            tape,
            params,
            gates,
            dropout_rng: opts.dropout_rng,
            record_attention: opts.record_attention,
            attention: Vec::new(),
        }
    }

    pub fn model(&self) -> &Seq2SeqModel {
        self.model
    }

    fn p(&self, idx: usize) -> Var {
        self.params[idx]
    }

    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn gate_var(&self) -> Var {
        self.gates
    }

    /// Gradient of the last backward target with respect to the gates.
    pub fn gate_grads(&self) -> Option<Tensor> {
        self.tape.grad(self.gates)
    }

    /// Recorded attention distributions, in execution order.
    pub fn attention_maps(&self) -> impl Iterator<Item = (HeadSlot, &Tensor)> + '_ {
        self.attention
            .iter()
            .map(|&(slot, v)| (slot, self.tape.value(v)))
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.model.config().dropout;
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let shape = self.tape.value(x).shape().to_vec();
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask)?);
        self.tape.mul(x, m)
    }

    fn norm(&mut self, x: Var, np: NormParams) -> Result<Var> {
        let eps = self.model.config().layer_norm_eps;
        let (g, b) = (self.p(np.gain), self.p(np.bias));
        self.tape.layer_norm(x, g, b, eps)
    }

    fn ffn(&mut self, x: Var, fp: FfnParams) -> Result<Var> {
        let (w1, b1, w2, b2) = (self.p(fp.w1), self.p(fp.b1), self.p(fp.w2), self.p(fp.b2));
        let h = self.tape.affine(x, w1, b1)?;
        let h = match self.model.config().activation {
            Activation::Gelu => self.tape.gelu(h),
            Activation::Relu => self.tape.relu(h),
        };
        self.tape.affine(h, w2, b2)
    }

    /// Gated multi-head attention.
    ///
    /// Head `h` attends with `softmax(Q_h K_hᵀ / sqrt(d_h))` unless `overrides`
    /// holds a matrix for `(layer, h)`, in which case that matrix is used as
    /// the distribution. Head outputs are scaled by their gate, concatenated,
    /// then projected back to the model dimension.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn attention(
        &mut self,
        ap: AttnParams,
        bank: Bank,
        layer: usize,
        q_in: Var,
        kv_in: Var,
        overrides: Option<&AttentionOverrides>,
        key_mask: Option<&[bool]>,
        causal: bool,
    ) -> Result<Var> {
        let nq = self.tape.value(q_in).rows();
        let nk = self.tape.value(kv_in).rows();
        if let Some(o) = overrides.filter(|o| !o.is_empty()) {
            ensure!(
                bank == Bank::EncoderSelf,
                Contract,
                "attention overrides on {bank} are not allowed"
            );
            for slot in o.slots().filter(|s| s.layer == layer) {
                let m = o.get(slot.layer, slot.head).expect("listed slot");
                ensure!(
                    m.shape() == [nq, nk],
                    Shape,
                    "override for layer {layer} head {} is {:?}, sequence needs {nq}x{nk}",
                    slot.head,
                    m.shape()
                );
            }
        }
        let mask = match (key_mask, causal) {
            (None, false) => None,
            (Some(km), false) => Some(key_mask_grid(nq, km)),
            (None, true) => Some(causal_mask(nq)),
            (Some(km), true) => Some(
                causal_mask(nq)
                    .into_iter()
                    .zip(key_mask_grid(nq, km))
                    .map(|(a, b)| a && b)
                    .collect(),
            ),
        };
        let q = self
            .tape
            .affine(q_in, self.params[ap.wq], self.params[ap.bq])?;
        let k = self
            .tape
            .affine(kv_in, self.params[ap.wk], self.params[ap.bk])?;
        let v = self
            .tape
            .affine(kv_in, self.params[ap.wv], self.params[ap.bv])?;
        self.mix_heads(ap, bank, layer, q, k, v, overrides, mask.as_deref())
    }

    /// Per-head attention over projected `q`, `k`, `v`, then gating and the
    /// output projection.
    #[allow(clippy::too_many_arguments)]
    fn mix_heads(
        &mut self,
        ap: AttnParams,
        bank: Bank,
        layer: usize,
        q: Var,
        k: Var,
        v: Var,
        overrides: Option<&AttentionOverrides>,
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let cfg = self.model.config();
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let probs = match overrides.and_then(|o| o.get(layer, h)) {
                Some(m) => self.tape.constant(Tensor::clone(m)),
                None => {
                    let qh = self.tape.slice_cols(q, h * dh, dh)?;
                    let kh = self.tape.slice_cols(k, h * dh, dh)?;
                    let scores = self.tape.matmul_t(qh, kh, false, true)?;
                    let scores = self.tape.scale(scores, scale);
                    self.tape.softmax_rows(scores, mask)?
                }
            };
            if self.record_attention {
                self.attention.push((HeadSlot::new(bank, layer, h), probs));
            }
            outputs.push(self.tape.matmul(probs, vh)?);
        }
        let concat = self.tape.concat_cols(&outputs)?;
        let row = self.model.gates().row_index(bank, layer)?;
        let gated = self.tape.gate_cols(concat, self.gates, row)?;
        self.tape
            .affine(gated, self.params[ap.wo], self.params[ap.bo])
    }

    /// Cross-attention keys and values of `memory` for every decoder layer.
    pub(crate) fn cross_memory(&mut self, memory: Var) -> Result<Vec<(Var, Var)>> {
        let layout = self.model.layout().clone();
        layout
            .decoder
            .iter()
            .map(|lp| {
                let ap = lp.cross_attn;
                let k = self
                    .tape
                    .affine(memory, self.params[ap.wk], self.params[ap.bk])?;
                let v = self
                    .tape
                    .affine(memory, self.params[ap.wv], self.params[ap.bv])?;
                Ok((k, v))
            })
            .collect()
    }

    /// Logits `[1 × V]` for the next position after feeding `token`, which
    /// sits at position `cache.len()`. Self-attention keys and values of the
    /// prefix come from `cache`, which gains this token's rows.
    pub(crate) fn decode_step(
        &mut self,
        token: usize,
        cache: &mut KvCache,
        cross: &[(Var, Var)],
        memory_mask: Option<&[bool]>,
    ) -> Result<Var> {
        let layout = self.model.layout().clone();
        let d = self.model.config().model_dim;
        let pos = cache.len;
        ensure!(
            pos < self.model.config().max_seq_len,
            Contract,
            "decoder position {pos} exceeds max_seq_len"
        );
        if cache.layers.is_empty() {
            cache.layers = vec![(Vec::new(), Vec::new()); layout.decoder.len()];
        }
        let te = self.tape.gather_rows(self.p(layout.tok_emb), &[token])?;
        let pe = self.tape.gather_rows(self.p(layout.pos_emb), &[pos])?;
        let mut y = self.tape.add(te, pe)?;
        for (l, lp) in layout.decoder.iter().enumerate() {
            let entry = &mut cache.layers[l];
            y = self.residual(y, lp.norm1, |pass, h| {
                let ap = lp.self_attn;
                let q = pass
                    .tape
                    .affine(h, pass.params[ap.wq], pass.params[ap.bq])?;
                let k = pass
                    .tape
                    .affine(h, pass.params[ap.wk], pass.params[ap.bk])?;
                let v = pass
                    .tape
                    .affine(h, pass.params[ap.wv], pass.params[ap.bv])?;
                entry.0.extend_from_slice(pass.tape.value(k).data());
                entry.1.extend_from_slice(pass.tape.value(v).data());
                let k_all = pass
                    .tape
                    .constant(Tensor::matrix(pos + 1, d, entry.0.clone())?);
                let v_all = pass
                    .tape
                    .constant(Tensor::matrix(pos + 1, d, entry.1.clone())?);
                pass.mix_heads(ap, Bank::DecoderSelf, l, q, k_all, v_all, None, None)
            })?;
            let (ck, cv) = cross[l];
            y = self.residual(y, lp.norm2, |pass, h| {
                let ap = lp.cross_attn;
                let q = pass
                    .tape
                    .affine(h, pass.params[ap.wq], pass.params[ap.bq])?;
                pass.mix_heads(ap, Bank::DecoderCross, l, q, ck, cv, None, memory_mask)
            })?;
            y = self.residual(y, lp.norm3, |pass, h| pass.ffn(h, lp.ffn))?;
        }
        cache.len += 1;
        if let Some(np) = layout.decoder_norm {
            y = self.norm(y, np)?;
        }
        self.project(y)
    }

    fn embed(&mut self, tokens: &[usize]) -> Result<Var> {
        let n_max = self.model.config().max_seq_len;
        ensure!(!tokens.is_empty(), Contract, "empty token sequence");
        ensure!(
            tokens.len() <= n_max,
            Contract,
            "sequence of {} tokens exceeds max_seq_len {n_max}",
            tokens.len()
        );
        let layout = self.model.layout();
        let (tok, pos) = (self.p(layout.tok_emb), self.p(layout.pos_emb));
        let te = self.tape.gather_rows(tok, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = self.tape.gather_rows(pos, &positions)?;
        let x = self.tape.add(te, pe)?;
        self.dropout(x)
    }

    /// Residual block `x + f(x)` with the configured norm placement.
    fn residual(
        &mut self,
        x: Var,
        np: NormParams,
        f: impl FnOnce(&mut Self, Var) -> Result<Var>,
    ) -> Result<Var> {
        match self.model.config().norm {
            NormPlacement::Pre => {
                let h = self.norm(x, np)?;
                let y = f(self, h)?;
                let y = self.dropout(y)?;
                self.tape.add(x, y)
            }
            NormPlacement::Post => {
                let y = f(self, x)?;
                let y = self.dropout(y)?;
                let s = self.tape.add(x, y)?;
                self.norm(s, np)
            }
        }
    }

    /// Encoder stack output `[n × d]`. `key_mask[j] == false` hides source
    /// position `j` from every query; by default positions holding
    /// [`PAD_ID`] are hidden.
    pub fn encode(
        &mut self,
        source: &[usize],
        key_mask: Option<&[bool]>,
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Var> {
        let default_mask;
        let key_mask = match key_mask {
            Some(m) => {
                ensure!(
                    m.len() == source.len(),
                    Shape,
                    "key mask of {} for {} tokens",
                    m.len(),
                    source.len()
                );
                Some(m)
            }
            None if source.contains(&PAD_ID) => {
                default_mask = source.iter().map(|&t| t != PAD_ID).collect::<Vec<_>>();
                Some(default_mask.as_slice())
            }
            None => None,
        };
        let layout = self.model.layout().clone();
        let mut x = self.embed(source)?;
        for (l, lp) in layout.encoder.iter().enumerate() {
            x = self.residual(x, lp.norm1, |pass, h| {
                pass.attention(
                    lp.attn,
                    Bank::EncoderSelf,
                    l,
                    h,
                    h,
                    overrides,
                    key_mask,
                    false,
                )
            })?;
            x = self.residual(x, lp.norm2, |pass, h| pass.ffn(h, lp.ffn))?;
        }
        if let Some(np) = layout.encoder_norm {
            x = self.norm(x, np)?;
        }
        Ok(x)
    }

    /// Decoder logits `[t × V]` for teacher-forced input `decoder_input`.
    pub fn decode(
        &mut self,
        memory: Var,
        memory_mask: Option<&[bool]>,
        decoder_input: &[usize],
    ) -> Result<Var> {
        let hidden = self.decode_hidden(memory, memory_mask, decoder_input)?;
        self.project(hidden)
    }

    pub(crate) fn decode_hidden(
        &mut self,
        memory: Var,
        memory_mask: Option<&[bool]>,
        decoder_input: &[usize],
    ) -> Result<Var> {
        let layout = self.model.layout().clone();
        let mut y = self.embed(decoder_input)?;
        for (l, lp) in layout.decoder.iter().enumerate() {
            y = self.residual(y, lp.norm1, |pass, h| {
                pass.attention(lp.self_attn, Bank::DecoderSelf, l, h, h, None, None, true)
            })?;
            y = self.residual(y, lp.norm2, |pass, h| {
                pass.attention(
                    lp.cross_attn,
                    Bank::DecoderCross,
                    l,
                    h,
                    memory,
                    None,
                    memory_mask,
                    false,
                )
            })?;
            y = self.residual(y, lp.norm3, |pass, h| pass.ffn(h, lp.ffn))?;
        }
        if let Some(np) = layout.decoder_norm {
            y = self.norm(y, np)?;
        }
        Ok(y)
    }

    pub(crate) fn project(&mut self, hidden: Var) -> Result<Var> {
        let layout = self.model.layout();
        let b = self.p(layout.out_b);
        match layout.out_w {
            Some(w) => {
                let w = self.p(w);
                self.tape.affine(hidden, w, b)
            }
            None => {
                let table = self.p(layout.tok_emb);
                let logits = self.tape.matmul_t(hidden, table, false, true)?;
                self.tape.add_row(logits, b)
            }
        }
    }

    /// Teacher-forced cross-entropy of `target` (without specials) given
    /// `source`: the decoder reads `BOS target` and predicts `target EOS`.
    pub fn loss(
        &mut self,
        source: &[usize],
        target: &[usize],
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Var> {
        ensure!(!target.is_empty(), Contract, "empty target sequence");
        let memory = self.encode(source, None, overrides)?;
        let mask: Option<Vec<bool>> = source
            .contains(&PAD_ID)
            .then(|| source.iter().map(|&t| t != PAD_ID).collect());
        let mut input = Vec::with_capacity(target.len() + 1);
        input.push(BOS_ID);
        input.extend_from_slice(target);
        let mut gold = target.to_vec();
        gold.push(EOS_ID);
        let logits = self.decode(memory, mask.as_deref(), &input)?;
        self.tape.cross_entropy(logits, &gold, PAD_ID)
    }
}

impl Seq2SeqModel {
    pub fn pass<'a>(&'a self, opts: PassOptions<'a>) -> Pass<'a> {
        Pass::new(self, opts)
    }

    /// Builds the loss on a fresh pass and returns both.
    pub fn forward_loss<'a>(
        &'a self,
        source: &[usize],
        target: &[usize],
        overrides: Option<&AttentionOverrides>,
        opts: PassOptions<'a>,
    ) -> Result<(Pass<'a>, Var)> {
        let mut pass = self.pass(opts);
        let loss = pass.loss(source, target, overrides)?;
        Ok((pass, loss))
    }

    /// Loss value without dropout or gradient tracking.
    pub fn loss_value(
        &self,
        source: &[usize],
        target: &[usize],
        overrides: Option<&AttentionOverrides>,
    ) -> Result<f64> {
        let (pass, loss) =
            self.forward_loss(source, target, overrides, PassOptions::inference())?;
        Ok(pass.tape.value(loss).item())
    }

    pub fn encoder_output(
        &self,
        source: &[usize],
        key_mask: Option<&[bool]>,
        overrides: Option<&AttentionOverrides>,
    ) -> Result<Tensor> {
        let mut pass = self.pass(PassOptions::inference());
        let out = pass.encode(source, key_mask, overrides)?;
        Ok(pass.tape.value(out).clone())
    }

    /// Teacher-forced decoder logits for `BOS target`.
    pub fn decoder_logits(&self, source: &[usize], target: &[usize]) -> Result<Tensor> {
        let mut pass = self.pass(PassOptions::inference());
        let memory = pass.encode(source, None, None)?;
        let mut input = vec![BOS_ID];
        input.extend_from_slice(target);
        let out = pass.decode(memory, None, &input)?;
        Ok(pass.tape.value(out).clone())
    }
}
