//! The shared sequence-to-sequence translation model.
//!
//! One bidirectional recurrent encoder and one attentional recurrent decoder
//! serve both languages; only the embedding lookup tables and the output
//! projections are language-specific, and the start symbol is embedded
//! through the per-language table, which is what steers the shared decoder
//! toward one language or the other. The encoder's per-position outputs
//! (both directions concatenated, dim 2n) are the latent sequence the
//! discriminator inspects and the attention reads; PAD positions are zeroed
//! there and masked out of attention, so batch composition never changes a
//! sentence's result.
//!
//! Also here: the word-by-word bootstrap translator built from a bilingual
//! lexicon, and the identity translator, both behind the same [`Translator`]
//! interface as the neural model so training can start from any of them.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Lang, SeqBatch, Vocabulary, EOS, PAD, SOS, UNK};
use crate::error::UnmtError;
use crate::tensor::{
    attn_context, attn_scores, concat_cols, embedding_lookup, stack_positions, Element, Tensor,
};

/// Named-tensor source for rebuilding modules from checkpoint records:
/// given a record name and the shape it must have, produce the tensor.
pub type TensorLookup<'a, T> = dyn FnMut(&str, &[usize]) -> Result<Tensor<T>, UnmtError> + 'a;

/// Architecture knobs: recurrent depth and width. The embedding dim and the
/// per-direction hidden size share one value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arch {
    pub layers: usize,
    pub dim: usize,
}

impl Arch {
    /// Desk-scale preset: single layer, width 64.
    pub fn desk() -> Arch {
        Arch { layers: 1, dim: 64 }
    }

    /// The reference configuration: 3 layers of width 300.
    pub fn paper() -> Arch {
        Arch {
            layers: 3,
            dim: 300,
        }
    }
}

/// Attention mask value for PAD positions; exp(−1e9 + finite) underflows to
/// exactly 0 in both f32 and f64, so masked positions get weight 0 exactly.
const MASK_BIAS: f64 = -1e9;

pub(crate) struct LstmCell<T: Element> {
    pub w: Tensor<T>, // (input_dim + n) × 4n, gate order [input | forget | cell | output]
    pub b: Tensor<T>, // 4n
    pub n: usize,
}

impl<T: Element> LstmCell<T> {
    pub(crate) fn new(input_dim: usize, n: usize, rng: &mut ChaCha8Rng) -> LstmCell<T> {
        LstmCell {
            w: uniform_param(&[input_dim + n, 4 * n], rng),
            b: Tensor::param(vec![T::zero(); 4 * n], &[4 * n]),
            n,
        }
    }

    fn from_tensors(w: Tensor<T>, b: Tensor<T>) -> LstmCell<T> {
        let n = b.numel() / 4;
        LstmCell { w, b, n }
    }

    /// One recurrence step: returns the new (h, c).
    pub fn step(
        &self,
        x: &Tensor<T>,
        h: &Tensor<T>,
        c: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>), UnmtError> {
        let n = self.n;
        let gates = concat_cols(&[x.clone(), h.clone()])?
            .matmul(&self.w)?
            .add_bias(&self.b)?;
        let i = gates.slice_cols(0, n)?.sigmoid();
        let f = gates.slice_cols(n, 2 * n)?.sigmoid();
        let g = gates.slice_cols(2 * n, 3 * n)?.tanh();
        let o = gates.slice_cols(3 * n, 4 * n)?.sigmoid();
        let c_new = f.mul(c)?.add(&i.mul(&g)?)?;
        let h_new = o.mul(&c_new.tanh())?;
        Ok((h_new, c_new))
    }
}

pub(crate) fn uniform_param<T: Element>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n)
        .map(|_| crate::tensor::elem::<T>(rng.gen_range(-0.1..0.1)))
        .collect();
    Tensor::param(data, shape)
}

/// All trainable tensors of the translation model. The encoder and decoder
/// stacks, attention, and state projections are the same objects regardless
/// of which language flows through them; `emb_*` and `out_*` are per-language.
pub struct ModelParams<T: Element = f32> {
    pub arch: Arch,
    pub v_src: usize,
    pub v_tgt: usize,
    emb_src: Tensor<T>,
    emb_tgt: Tensor<T>,
    enc_fwd: Vec<LstmCell<T>>,
    enc_bwd: Vec<LstmCell<T>>,
    dec: Vec<LstmCell<T>>,
    /// Query projection n → 2n; keys are the raw latent vectors.
    attn_q: Tensor<T>,
    /// Per decoder layer: (2n × n, n) projecting the final encoder state.
    dec_init: Vec<(Tensor<T>, Tensor<T>)>,
    /// Output combiner (h_top ++ context): 3n × n plus bias.
    comb_w: Tensor<T>,
    comb_b: Tensor<T>,
    out_src: (Tensor<T>, Tensor<T>),
    out_tgt: (Tensor<T>, Tensor<T>),
}

impl<T: Element> ModelParams<T> {
    /// Fresh random parameters: weights uniform in [−0.1, 0.1], biases zero.
    /// The draw order is fixed, so (seed, arch, vocab sizes) pins every value.
    pub fn init(arch: Arch, v_src: usize, v_tgt: usize, rng: &mut ChaCha8Rng) -> ModelParams<T> {
        let (l, d) = (arch.layers, arch.dim);
        let n = d;
        let emb_src = uniform_param(&[v_src, d], rng);
        let emb_tgt = uniform_param(&[v_tgt, d], rng);
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        for layer in 0..l {
            let input = if layer == 0 { d } else { 2 * n };
            enc_fwd.push(LstmCell::new(input, n, rng));
            enc_bwd.push(LstmCell::new(input, n, rng));
        }
        let mut dec = Vec::new();
        for layer in 0..l {
            let input = if layer == 0 { d + 2 * n } else { n };
            dec.push(LstmCell::new(input, n, rng));
        }
        let attn_q = uniform_param(&[n, 2 * n], rng);
        let dec_init = (0..l)
            .map(|_| {
                (
                    uniform_param(&[2 * n, n], rng),
                    Tensor::param(vec![T::zero(); n], &[n]),
                )
            })
            .collect();
        let comb_w = uniform_param(&[3 * n, n], rng);
        let comb_b = Tensor::param(vec![T::zero(); n], &[n]);
        let out_src = (
            uniform_param(&[n, v_src], rng),
            Tensor::param(vec![T::zero(); v_src], &[v_src]),
        );
        let out_tgt = (
            uniform_param(&[n, v_tgt], rng),
            Tensor::param(vec![T::zero(); v_tgt], &[v_tgt]),
        );
        ModelParams {
            arch,
            v_src,
            v_tgt,
            emb_src,
            emb_tgt,
            enc_fwd,
            enc_bwd,
            dec,
            attn_q,
            dec_init,
            comb_w,
            comb_b,
            out_src,
            out_tgt,
        }
    }

    pub fn emb(&self, lang: Lang) -> &Tensor<T> {
        match lang {
            Lang::Src => &self.emb_src,
            Lang::Tgt => &self.emb_tgt,
        }
    }

    pub fn out(&self, lang: Lang) -> &(Tensor<T>, Tensor<T>) {
        match lang {
            Lang::Src => &self.out_src,
            Lang::Tgt => &self.out_tgt,
        }
    }

    pub fn vocab_size(&self, lang: Lang) -> usize {
        match lang {
            Lang::Src => self.v_src,
            Lang::Tgt => self.v_tgt,
        }
    }

    /// Overwrite one language's embedding table (pretrained initialization).
    pub fn set_embedding(&mut self, lang: Lang, matrix: &[T]) {
        let t = match lang {
            Lang::Src => &self.emb_src,
            Lang::Tgt => &self.emb_tgt,
        };
        t.set_value(matrix);
    }

    /// Stable (name, tensor) listing; the optimizer and checkpoint formats
    /// both key off this order.
    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("emb.src".into(), self.emb_src.clone()),
            ("emb.tgt".into(), self.emb_tgt.clone()),
        ];
        for (l, cell) in self.enc_fwd.iter().enumerate() {
            out.push((format!("enc.l{l}.fwd.w"), cell.w.clone()));
            out.push((format!("enc.l{l}.fwd.b"), cell.b.clone()));
        }
        for (l, cell) in self.enc_bwd.iter().enumerate() {
            out.push((format!("enc.l{l}.bwd.w"), cell.w.clone()));
            out.push((format!("enc.l{l}.bwd.b"), cell.b.clone()));
        }
        for (l, cell) in self.dec.iter().enumerate() {
            out.push((format!("dec.l{l}.w"), cell.w.clone()));
            out.push((format!("dec.l{l}.b"), cell.b.clone()));
        }
        out.push(("attn.q".into(), self.attn_q.clone()));
        for (l, (w, b)) in self.dec_init.iter().enumerate() {
            out.push((format!("dec_init.l{l}.w"), w.clone()));
            out.push((format!("dec_init.l{l}.b"), b.clone()));
        }
        out.push(("comb.w".into(), self.comb_w.clone()));
        out.push(("comb.b".into(), self.comb_b.clone()));
        out.push(("out.src.w".into(), self.out_src.0.clone()));
        out.push(("out.src.b".into(), self.out_src.1.clone()));
        out.push(("out.tgt.w".into(), self.out_tgt.0.clone()));
        out.push(("out.tgt.b".into(), self.out_tgt.1.clone()));
        out
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn zero_grads(&self) {
        for t in self.tensors() {
            t.zero_grad();
        }
    }

    /// Gradient-free deep copy: a snapshot for back-translation or inference.
    pub fn frozen(&self) -> ModelParams<T> {
        self.map_tensors(&mut |t| t.detach())
    }

    /// Trainable deep copy (same values, fresh leaves).
    pub fn trainable_copy(&self) -> ModelParams<T> {
        self.map_tensors(&mut |t| t.detach_param())
    }

    fn map_tensors(&self, f: &mut dyn FnMut(&Tensor<T>) -> Tensor<T>) -> ModelParams<T> {
        ModelParams {
            arch: self.arch,
            v_src: self.v_src,
            v_tgt: self.v_tgt,
            emb_src: f(&self.emb_src),
            emb_tgt: f(&self.emb_tgt),
            enc_fwd: self
                .enc_fwd
                .iter()
                .map(|c| LstmCell::from_tensors(f(&c.w), f(&c.b)))
                .collect(),
            enc_bwd: self
                .enc_bwd
                .iter()
                .map(|c| LstmCell::from_tensors(f(&c.w), f(&c.b)))
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|c| LstmCell::from_tensors(f(&c.w), f(&c.b)))
                .collect(),
            attn_q: f(&self.attn_q),
            dec_init: self
                .dec_init
                .iter()
                .map(|(w, b)| (f(w), f(b)))
                .collect(),
            comb_w: f(&self.comb_w),
            comb_b: f(&self.comb_b),
            out_src: (f(&self.out_src.0), f(&self.out_src.1)),
            out_tgt: (f(&self.out_tgt.0), f(&self.out_tgt.1)),
        }
    }

    /// Rebuild from checkpoint records. Every expected name must be present
    /// with the exact shape implied by (arch, vocab sizes).
    pub fn from_named(
        arch: Arch,
        v_src: usize,
        v_tgt: usize,
        lookup: &mut TensorLookup<'_, T>,
    ) -> Result<ModelParams<T>, UnmtError> {
        let (l, d) = (arch.layers, arch.dim);
        let n = d;
        let mut enc_fwd = Vec::new();
        let mut enc_bwd = Vec::new();
        let mut dec = Vec::new();
        let emb_src = lookup("emb.src", &[v_src, d])?;
        let emb_tgt = lookup("emb.tgt", &[v_tgt, d])?;
        for layer in 0..l {
            let input = if layer == 0 { d } else { 2 * n };
            enc_fwd.push(LstmCell::from_tensors(
                lookup(&format!("enc.l{layer}.fwd.w"), &[input + n, 4 * n])?,
                lookup(&format!("enc.l{layer}.fwd.b"), &[4 * n])?,
            ));
            enc_bwd.push(LstmCell::from_tensors(
                lookup(&format!("enc.l{layer}.bwd.w"), &[input + n, 4 * n])?,
                lookup(&format!("enc.l{layer}.bwd.b"), &[4 * n])?,
            ));
        }
        for layer in 0..l {
            let input = if layer == 0 { d + 2 * n } else { n };
            dec.push(LstmCell::from_tensors(
                lookup(&format!("dec.l{layer}.w"), &[input + n, 4 * n])?,
                lookup(&format!("dec.l{layer}.b"), &[4 * n])?,
            ));
        }
        let attn_q = lookup("attn.q", &[n, 2 * n])?;
        let mut dec_init = Vec::new();
        for layer in 0..l {
            dec_init.push((
                lookup(&format!("dec_init.l{layer}.w"), &[2 * n, n])?,
                lookup(&format!("dec_init.l{layer}.b"), &[n])?,
            ));
        }
        let comb_w = lookup("comb.w", &[3 * n, n])?;
        let comb_b = lookup("comb.b", &[n])?;
        let out_src = (lookup("out.src.w", &[n, v_src])?, lookup("out.src.b", &[v_src])?);
        let out_tgt = (lookup("out.tgt.w", &[n, v_tgt])?, lookup("out.tgt.b", &[v_tgt])?);
        Ok(ModelParams {
            arch,
            v_src,
            v_tgt,
            emb_src,
            emb_tgt,
            enc_fwd,
            enc_bwd,
            dec,
            attn_q,
            dec_init,
            comb_w,
            comb_b,
            out_src,
            out_tgt,
        })
    }
}

/// Latent encoding of one batch: position vectors, final states, and the
/// masking companions everything downstream needs.
pub struct Encoded<T: Element> {
    pub lang: Lang,
    /// (B·m) × 2n in [`stack_positions`] layout; PAD rows are exactly zero.
    pub z: Tensor<T>,
    /// B × 2n: each row's last forward state concatenated with its first
    /// backward state (both taken at the row's true boundary).
    pub final_state: Tensor<T>,
    pub batch: usize,
    pub positions: usize,
    pub lens: Vec<usize>,
    /// B × m constant: 0 on real positions, −1e9 on PAD.
    pub attn_bias: Tensor<T>,
    /// Flat B·m mask: 1 on real positions, 0 on PAD.
    pub mask_flat: Vec<T>,
}

/// Append EOS to each sentence — the encoder-side framing.
pub fn append_eos(sentences: &[Vec<u32>]) -> Vec<Vec<u32>> {
    sentences
        .iter()
        .map(|s| {
            let mut v = Vec::with_capacity(s.len() + 1);
            v.extend_from_slice(s);
            v.push(EOS);
            v
        })
        .collect()
}

/// Run the shared bidirectional encoder over a batch in language `lang`.
pub fn encode<T: Element>(
    params: &ModelParams<T>,
    batch: &SeqBatch,
    lang: Lang,
) -> Result<Encoded<T>, UnmtError> {
    if batch.lang != lang {
        return Err(UnmtError::Contract(format!(
            "encode called with a {} batch but language tag {}",
            batch.lang, lang
        )));
    }
    let b = batch.batch_size();
    let m = batch.max_len;
    if b == 0 || m == 0 {
        return Err(UnmtError::Contract("encode requires a nonempty batch".into()));
    }
    let n = params.arch.dim;
    let emb = params.emb(lang);
    let min_len = batch.lens.iter().copied().min().unwrap_or(0);

    // Per-step masks (only needed where some row has already ended).
    let masks: Vec<Option<Tensor<T>>> = (0..m)
        .map(|t| {
            if t < min_len {
                None
            } else {
                Some(Tensor::constant(batch.mask_at_step::<T>(t), &[b]))
            }
        })
        .collect();

    let mut inputs: Vec<Tensor<T>> = (0..m)
        .map(|t| embedding_lookup(emb, &batch.ids_at_step(t)))
        .collect::<Result<_, _>>()?;

    let mut final_fwd = None;
    let mut final_bwd = None;
    for (layer, (fwd, bwd)) in params.enc_fwd.iter().zip(&params.enc_bwd).enumerate() {
        let mut h = Tensor::zeros(&[b, n]);
        let mut c = Tensor::zeros(&[b, n]);
        let mut fwd_states = Vec::with_capacity(m);
        for t in 0..m {
            let (h2, c2) = fwd.step(&inputs[t], &h, &c)?;
            (h, c) = match &masks[t] {
                Some(mask) => (h2.blend_rows(&h, mask)?, c2.blend_rows(&c, mask)?),
                None => (h2, c2),
            };
            fwd_states.push(h.clone());
        }
        if layer == params.enc_fwd.len() - 1 {
            final_fwd = Some(h.clone());
        }

        let mut hb = Tensor::zeros(&[b, n]);
        let mut cb = Tensor::zeros(&[b, n]);
        let mut bwd_states = vec![None; m];
        for t in (0..m).rev() {
            let (h2, c2) = bwd.step(&inputs[t], &hb, &cb)?;
            (hb, cb) = match &masks[t] {
                Some(mask) => (h2.blend_rows(&hb, mask)?, c2.blend_rows(&cb, mask)?),
                None => (h2, c2),
            };
            bwd_states[t] = Some(hb.clone());
        }
        if layer == params.enc_bwd.len() - 1 {
            final_bwd = Some(hb.clone());
        }

        inputs = fwd_states
            .into_iter()
            .zip(bwd_states)
            .map(|(f, bk)| concat_cols(&[f, bk.expect("backward state filled")]))
            .collect::<Result<_, _>>()?;
    }

    // Zero PAD rows of the latent sequence, then flatten position-major.
    let steps: Vec<Tensor<T>> = inputs
        .into_iter()
        .enumerate()
        .map(|(t, z)| match &masks[t] {
            Some(mask) => z.scale_rows(mask),
            None => Ok(z),
        })
        .collect::<Result<_, _>>()?;
    let z = stack_positions(&steps)?;

    let final_state = concat_cols(&[
        final_fwd.expect("at least one encoder layer"),
        final_bwd.expect("at least one encoder layer"),
    ])?;

    let mut bias = vec![T::zero(); b * m];
    let mut mask_flat = vec![T::one(); b * m];
    for (i, &len) in batch.lens.iter().enumerate() {
        for t in len..m {
            bias[i * m + t] = crate::tensor::elem::<T>(MASK_BIAS);
            mask_flat[i * m + t] = T::zero();
        }
    }
    Ok(Encoded {
        lang,
        z,
        final_state,
        batch: b,
        positions: m,
        lens: batch.lens.clone(),
        attn_bias: Tensor::constant(bias, &[b, m]),
        mask_flat,
    })
}

/// Decoder state shared by teacher forcing and greedy decoding.
struct DecoderRun<'a, T: Element> {
    params: &'a ModelParams<T>,
    enc: &'a Encoded<T>,
    lang: Lang,
    h: Vec<Tensor<T>>,
    c: Vec<Tensor<T>>,
}

impl<'a, T: Element> DecoderRun<'a, T> {
    fn new(
        params: &'a ModelParams<T>,
        enc: &'a Encoded<T>,
        lang: Lang,
    ) -> Result<DecoderRun<'a, T>, UnmtError> {
        let b = enc.batch;
        let n = params.arch.dim;
        let mut h = Vec::new();
        let mut c = Vec::new();
        for (w, bias) in &params.dec_init {
            h.push(enc.final_state.matmul(w)?.add_bias(bias)?.tanh());
            c.push(Tensor::zeros(&[b, n]));
        }
        Ok(DecoderRun {
            params,
            enc,
            lang,
            h,
            c,
        })
    }

    /// Feed one batch of token ids; returns this step's logits (B × |W_ℓ|).
    fn step(&mut self, ids: &[u32]) -> Result<Tensor<T>, UnmtError> {
        let p = self.params;
        // Attend with the top layer's previous state.
        let query = self.h.last().expect("decoder has layers").matmul(&p.attn_q)?;
        let scores = attn_scores(&query, &self.enc.z, self.enc.positions)?
            .add(&self.enc.attn_bias)?;
        let weights = scores.softmax_rows()?;
        let ctx = attn_context(&weights, &self.enc.z)?;

        let x = embedding_lookup(p.emb(self.lang), ids)?;
        let mut input = concat_cols(&[x, ctx.clone()])?;
        for (layer, cell) in p.dec.iter().enumerate() {
            let (h2, c2) = cell.step(&input, &self.h[layer], &self.c[layer])?;
            self.h[layer] = h2.clone();
            self.c[layer] = c2;
            input = h2;
        }
        let combined = concat_cols(&[input, ctx])?
            .matmul(&p.comb_w)?
            .add_bias(&p.comb_b)?
            .tanh();
        let (ow, ob) = p.out(self.lang);
        Ok(combined.matmul(ow)?.add_bias(ob)?)
    }
}

/// Teacher-forced decoding output, flattened position-major like
/// [`stack_positions`]: row `b·L + i` scores step `i` of sentence `b`.
pub struct TeacherForced<T: Element> {
    pub logits: Tensor<T>,
    pub targets: Vec<u32>,
    /// 1/B on real tokens and the terminating EOS, 0 on padding — so the
    /// cross-entropy sum is "per-sentence token sum, averaged over the batch".
    pub weights: Vec<T>,
    pub steps: usize,
}

/// Run the decoder with the reference `targets` as inputs (SOS-prefixed) and
/// produce logits aligned with `targets + EOS`.
pub fn decode_teacher_forced<T: Element>(
    params: &ModelParams<T>,
    enc: &Encoded<T>,
    lang: Lang,
    targets: &[Vec<u32>],
) -> Result<TeacherForced<T>, UnmtError> {
    let b = enc.batch;
    if targets.len() != b {
        return Err(UnmtError::Contract(format!(
            "decode_teacher_forced: {} target sentences for a batch of {b}",
            targets.len()
        )));
    }
    if targets.iter().any(|t| t.is_empty()) {
        return Err(UnmtError::Contract(
            "decode_teacher_forced: empty target sentence".into(),
        ));
    }
    let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
    let mut run = DecoderRun::new(params, enc, lang)?;
    let inv_b = T::one() / crate::tensor::elem::<T>(b as f64);

    let mut logit_steps = Vec::with_capacity(steps);
    let mut flat_targets = vec![PAD; b * steps];
    let mut flat_weights = vec![T::zero(); b * steps];
    for (i, t) in targets.iter().enumerate() {
        for (j, &id) in t.iter().enumerate() {
            flat_targets[i * steps + j] = id;
        }
        flat_targets[i * steps + t.len()] = EOS;
        for j in 0..=t.len() {
            flat_weights[i * steps + j] = inv_b;
        }
    }
    for step in 0..steps {
        let ids: Vec<u32> = targets
            .iter()
            .map(|t| {
                if step == 0 {
                    SOS
                } else {
                    t.get(step - 1).copied().unwrap_or(PAD)
                }
            })
            .collect();
        logit_steps.push(run.step(&ids)?);
    }
    Ok(TeacherForced {
        logits: stack_positions(&logit_steps)?,
        targets: flat_targets,
        weights: flat_weights,
        steps,
    })
}

/// Greedy argmax over one logits row; ties resolve to the lowest id.
fn argmax_row<T: Element>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    best as u32
}

/// Decode greedily from SOS until EOS or the per-row cap; EOS is stripped.
pub fn decode_greedy<T: Element>(
    params: &ModelParams<T>,
    enc: &Encoded<T>,
    lang: Lang,
    max_lens: &[usize],
) -> Result<Vec<Vec<u32>>, UnmtError> {
    let b = enc.batch;
    if max_lens.len() != b || max_lens.contains(&0) {
        return Err(UnmtError::Contract(
            "decode_greedy: need a positive length cap per row".into(),
        ));
    }
    let mut run = DecoderRun::new(params, enc, lang)?;
    let mut out: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut prev = vec![SOS; b];
    let horizon = max_lens.iter().copied().max().unwrap_or(1);
    for _ in 0..horizon {
        let logits = run.step(&prev)?;
        let v = logits.value();
        let width = logits.cols();
        let mut all_done = true;
        for i in 0..b {
            if done[i] {
                continue;
            }
            let tok = argmax_row(&v[i * width..(i + 1) * width]);
            if tok == EOS || out[i].len() >= max_lens[i] {
                done[i] = true;
            } else {
                out[i].push(tok);
                if out[i].len() >= max_lens[i] {
                    done[i] = true;
                } else {
                    all_done = false;
                }
            }
            prev[i] = tok;
        }
        if all_done {
            break;
        }
    }
    Ok(out)
}

/// Default decode budget for a source of `src_len` tokens.
pub fn decode_cap(src_len: usize) -> usize {
    (src_len * 3) / 2 + 5
}

/// Anything that can map sentences of one id space into another. Implemented
/// by the neural model, the word-by-word bootstrap, and the identity
/// baseline, so back-translation can start from any of them.
pub trait Translator {
    fn translate_batch(&self, sentences: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, UnmtError>;
}

/// A frozen model pointed in one direction.
pub struct TranslationModel<T: Element = f32> {
    params: ModelParams<T>,
    pub from: Lang,
    pub to: Lang,
}

impl<T: Element> TranslationModel<T> {
    /// Snapshot `params` (detached) as a `from → to` translator.
    pub fn new(params: &ModelParams<T>, from: Lang) -> TranslationModel<T> {
        TranslationModel {
            params: params.frozen(),
            from,
            to: from.other(),
        }
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }
}

/// Inference batch cap: translation chunks inputs so memory stays flat.
const TRANSLATE_CHUNK: usize = 32;

impl<T: Element> Translator for TranslationModel<T> {
    fn translate_batch(&self, sentences: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, UnmtError> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(TRANSLATE_CHUNK) {
            let framed = append_eos(chunk);
            let batch = SeqBatch::from_sentences(&framed, self.from);
            let enc = encode(&self.params, &batch, self.from)?;
            let caps: Vec<usize> = chunk.iter().map(|s| decode_cap(s.len())).collect();
            out.extend(decode_greedy(&self.params, &enc, self.to, &caps)?);
        }
        Ok(out)
    }
}

/// Word→word mapping between surface forms.
#[derive(Clone)]
pub struct Lexicon {
    map: HashMap<String, String>,
    /// Insertion order of keys, so inversion is deterministic.
    order: Vec<String>,
}

impl Lexicon {
    pub fn new() -> Lexicon {
        Lexicon {
            map: HashMap::new(),
            order: Vec::new(),
        }
    }

    pub fn insert(&mut self, from: String, to: String) {
        if self.map.insert(from.clone(), to).is_none() {
            self.order.push(from);
        }
    }

    /// Load a TSV of `source_word<TAB>target_word` lines.
    pub fn load(path: &Path) -> Result<Lexicon, UnmtError> {
        let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
        let mut lex = Lexicon::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (from, to) = line.split_once('\t').ok_or_else(|| UnmtError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected source<TAB>target".into(),
            })?;
            lex.insert(from.trim().to_string(), to.trim().to_string());
        }
        Ok(lex)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.map.get(word).map(|s| s.as_str())
    }

    /// Swap mapping direction; on duplicate targets the earliest pair wins.
    pub fn invert(&self) -> Lexicon {
        let mut inv = Lexicon::new();
        for k in &self.order {
            let v = &self.map[k];
            if !inv.map.contains_key(v) {
                inv.insert(v.clone(), k.clone());
            }
        }
        inv
    }

    /// Word-by-word translation: mapped words swapped, others copied through.
    pub fn translate_words(&self, words: &[String]) -> Vec<String> {
        words
            .iter()
            .map(|w| self.get(w).unwrap_or(w).to_string())
            .collect()
    }
}

impl Default for Lexicon {
    fn default() -> Self {
        Lexicon::new()
    }
}

/// The word-by-word bootstrap model M⁽¹⁾: lexicon substitution with
/// copy-through for unknown words, lifted to id space.
pub struct WbwTranslator {
    lex: Lexicon,
    from_vocab: Vocabulary,
    to_vocab: Vocabulary,
}

impl WbwTranslator {
    pub fn new(lex: Lexicon, from_vocab: Vocabulary, to_vocab: Vocabulary) -> WbwTranslator {
        WbwTranslator {
            lex,
            from_vocab,
            to_vocab,
        }
    }

    /// The no-model floor: copy every word through unchanged (an empty
    /// lexicon), re-encoding in the other language's vocabulary. On languages
    /// with disjoint vocabularies this maps everything to UNK, which is
    /// exactly what copying the input verbatim means on the other side.
    pub fn identity(from_vocab: Vocabulary, to_vocab: Vocabulary) -> WbwTranslator {
        WbwTranslator::new(Lexicon::new(), from_vocab, to_vocab)
    }
}

impl Translator for WbwTranslator {
    fn translate_batch(&self, sentences: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, UnmtError> {
        sentences
            .iter()
            .map(|s| {
                s.iter()
                    .map(|&id| {
                        if id == UNK {
                            return Ok(UNK);
                        }
                        let w = self.from_vocab.word_of(id)?;
                        Ok(self.to_vocab.id_of(self.lex.get(w).unwrap_or(w)))
                    })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tiny_params(seed: u64) -> ModelParams<f32> {
        let arch = Arch { layers: 2, dim: 8 };
        ModelParams::init(arch, 12, 14, &mut stream(seed, "init.params"))
    }

    fn batch_of(sents: &[Vec<u32>], lang: Lang) -> SeqBatch {
        SeqBatch::from_sentences(&append_eos(sents), lang)
    }

    #[test]
    fn encode_produces_one_latent_per_position_and_zeroes_pad() {
        let p = tiny_params(1);
        let b = batch_of(&[vec![4, 5, 6], vec![7]], Lang::Src);
        let enc = encode(&p, &b, Lang::Src).unwrap();
        assert_eq!(enc.positions, 4); // 3+EOS
        assert_eq!(enc.z.shape(), &[8, 16]); // (B·m) × 2n
        let z = enc.z.to_vec();
        // Row 1 has length 2 (token + EOS); its positions 2..4 must be zero.
        for t in 2..4 {
            let r = 4 + t;
            assert!(z[r * 16..(r + 1) * 16].iter().all(|&x| x == 0.0));
        }
        // Real positions are not all zero.
        assert!(z[0..16].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn encode_differs_by_language_lookup_table() {
        let p = ModelParams::<f32>::init(Arch { layers: 1, dim: 8 }, 12, 12, &mut stream(2, "init.params"));
        let sents = vec![vec![4, 5]];
        let src = encode(&p, &batch_of(&sents, Lang::Src), Lang::Src).unwrap();
        let tgt = encode(&p, &batch_of(&sents, Lang::Tgt), Lang::Tgt).unwrap();
        assert_ne!(src.z.to_vec(), tgt.z.to_vec());
    }

    #[test]
    fn encode_rejects_language_mismatch() {
        let p = tiny_params(3);
        let b = batch_of(&[vec![4]], Lang::Src);
        assert!(matches!(
            encode(&p, &b, Lang::Tgt),
            Err(UnmtError::Contract(_))
        ));
    }

    #[test]
    fn shared_stack_receives_gradients_from_both_languages() {
        let p = tiny_params(4);
        let sents = vec![vec![4, 5, 6]];
        let b = batch_of(&sents, Lang::Src);
        let enc = encode(&p, &b, Lang::Src).unwrap();
        let tf = decode_teacher_forced(&p, &enc, Lang::Src, &sents).unwrap();
        let loss =
            crate::tensor::cross_entropy_logits(&tf.logits, &tf.targets, &tf.weights).unwrap();
        crate::tensor::backward(&loss).unwrap();
        // The src pass reaches the shared encoder/decoder and the src tables,
        // but never the tgt lookup tables.
        assert!(p.enc_fwd[0].w.grad().is_some());
        assert!(p.dec[0].w.grad().is_some());
        assert!(p.attn_q.grad().is_some());
        assert!(p.emb(Lang::Src).grad().is_some());
        assert!(p.emb(Lang::Tgt).grad().is_none());
        assert!(p.out(Lang::Tgt).0.grad().is_none());
    }

    #[test]
    fn teacher_forced_layout_and_weights() {
        let p = tiny_params(5);
        let sents = vec![vec![4, 5], vec![6]];
        let enc = encode(&p, &batch_of(&sents, Lang::Tgt), Lang::Tgt).unwrap();
        let tf = decode_teacher_forced(&p, &enc, Lang::Tgt, &sents).unwrap();
        assert_eq!(tf.steps, 3);
        assert_eq!(tf.logits.shape(), &[6, 14]);
        assert_eq!(tf.targets, vec![4, 5, EOS, 6, EOS, PAD]);
        let w = tf.weights.clone();
        assert_eq!(w[0], 0.5);
        assert_eq!(w[4], 0.5);
        assert_eq!(w[5], 0.0); // padding after row 1's EOS
    }

    #[test]
    fn attention_weights_normalize_over_real_positions() {
        let p = tiny_params(6);
        let sents = vec![vec![4, 5, 6], vec![7]];
        let enc = encode(&p, &batch_of(&sents, Lang::Src), Lang::Src).unwrap();
        // Recompute the first decoder step's attention by hand.
        let mut run = DecoderRun::new(&p, &enc, Lang::Tgt).unwrap();
        let query = run.h.last().unwrap().matmul(&p.attn_q).unwrap();
        let scores = attn_scores(&query, &enc.z, enc.positions)
            .unwrap()
            .add(&enc.attn_bias)
            .unwrap();
        let a = scores.softmax_rows().unwrap().to_vec();
        // Row 1 (length 2): mass on positions 0..2 sums to 1, none beyond.
        let row1 = &a[4..8];
        assert!((row1[0] + row1[1] - 1.0).abs() < 1e-5);
        assert!(row1[2] == 0.0 && row1[3] == 0.0);
        let _ = run.step(&[SOS, SOS]).unwrap();
    }

    #[test]
    fn greedy_decode_is_deterministic_and_capped() {
        let p = tiny_params(7);
        let sents = vec![vec![4, 5, 6, 7]];
        let enc = encode(&p, &batch_of(&sents, Lang::Src), Lang::Src).unwrap();
        let a = decode_greedy(&p, &enc, Lang::Tgt, &[6]).unwrap();
        let enc2 = encode(&p, &batch_of(&sents, Lang::Src), Lang::Src).unwrap();
        let b = decode_greedy(&p, &enc2, Lang::Tgt, &[6]).unwrap();
        assert_eq!(a, b);
        assert!(a[0].len() <= 6);
        assert!(a[0].iter().all(|&t| t != EOS));
    }

    #[test]
    fn greedy_decode_is_batch_composition_invariant() {
        let p = tiny_params(8);
        let model = TranslationModel::new(&p, Lang::Src);
        let s1 = vec![4, 5, 6, 7, 8];
        let s2 = vec![9, 10];
        let s3 = vec![6, 6, 6, 11, 5, 4];
        let alone: Vec<Vec<u32>> = [&s1, &s2, &s3]
            .iter()
            .map(|s| model.translate_batch(&[(*s).clone()]).unwrap().remove(0))
            .collect();
        let together = model
            .translate_batch(&[s1.clone(), s2.clone(), s3.clone()])
            .unwrap();
        assert_eq!(alone, together);
    }

    #[test]
    fn wbw_substitutes_and_copies_through() {
        let src = Vocabulary::from_words(["a", "b"].map(String::from), Lang::Src);
        let tgt = Vocabulary::from_words(["x", "b"].map(String::from), Lang::Tgt);
        let mut lex = Lexicon::new();
        lex.insert("a".into(), "x".into());
        let wbw = WbwTranslator::new(lex, src.clone(), tgt.clone());
        // "a b" → "x b": a mapped, b copied through (present in tgt vocab).
        let out = wbw.translate_batch(&[vec![src.id_of("a"), src.id_of("b")]]).unwrap();
        assert_eq!(out[0], vec![tgt.id_of("x"), tgt.id_of("b")]);
        // UNK passes through as UNK.
        let out = wbw.translate_batch(&[vec![UNK]]).unwrap();
        assert_eq!(out[0], vec![UNK]);
    }

    #[test]
    fn empty_lexicon_wbw_is_identity_on_shared_words() {
        let src = Vocabulary::from_words(["a", "b"].map(String::from), Lang::Src);
        let tgt = Vocabulary::from_words(["b", "a"].map(String::from), Lang::Tgt);
        let wbw = WbwTranslator::new(Lexicon::new(), src.clone(), tgt.clone());
        let out = wbw
            .translate_batch(&[vec![src.id_of("a"), src.id_of("b")]])
            .unwrap();
        assert_eq!(out[0], vec![tgt.id_of("a"), tgt.id_of("b")]);
    }

    #[test]
    fn lexicon_loads_and_inverts() {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "a\tx").unwrap();
        writeln!(f, "b\ty").unwrap();
        f.flush().unwrap();
        let lex = Lexicon::load(f.path()).unwrap();
        assert_eq!(lex.len(), 2);
        assert_eq!(lex.get("a"), Some("x"));
        let inv = lex.invert();
        assert_eq!(inv.get("x"), Some("a"));
        assert_eq!(inv.get("y"), Some("b"));

        let mut bad = tempfile::NamedTempFile::new().unwrap();
        writeln!(bad, "no tab here").unwrap();
        bad.flush().unwrap();
        assert!(matches!(
            Lexicon::load(bad.path()),
            Err(UnmtError::Format { line: 1, .. })
        ));
    }

    /// Trainability: overfit a copy task until loss < 0.1 nats per token.
    #[test]
    fn copy_task_overfits_below_point_one_nats() {
        let arch = Arch { layers: 1, dim: 16 };
        let p = ModelParams::<f32>::init(arch, 12, 12, &mut stream(11, "init.params"));
        let mut rng = stream(11, "copytask.data");
        let sents: Vec<Vec<u32>> = (0..50)
            .map(|_| {
                let len = rand::Rng::gen_range(&mut rng, 2..6);
                (0..len)
                    .map(|_| rand::Rng::gen_range(&mut rng, 4u32..12))
                    .collect()
            })
            .collect();
        // A deliberately hot learning rate: this is an overfitting probe on
        // 50 sentences, not a training recipe.
        let tensors = p.tensors();
        let mut adam = crate::tensor::AdamState::new(&tensors, 3e-3, 0.5, 0.999, 1e-8);
        let mut per_token = f32::INFINITY;
        for _ in 0..800 {
            let batch = batch_of(&sents, Lang::Src);
            let enc = encode(&p, &batch, Lang::Src).unwrap();
            let tf = decode_teacher_forced(&p, &enc, Lang::Src, &sents).unwrap();
            let loss =
                crate::tensor::cross_entropy_logits(&tf.logits, &tf.targets, &tf.weights).unwrap();
            let tokens: f32 =
                sents.iter().map(|s| s.len() + 1).sum::<usize>() as f32 / sents.len() as f32;
            per_token = loss.item() / tokens;
            if per_token < 0.1 {
                break;
            }
            crate::tensor::backward(&loss).unwrap();
            crate::tensor::clip_grad_norm(&tensors, 5.0);
            adam.step(&tensors).unwrap();
            p.zero_grads();
        }
        assert!(
            per_token < 0.1,
            "copy task stuck at {per_token} nats/token after 800 steps"
        );
    }
}
