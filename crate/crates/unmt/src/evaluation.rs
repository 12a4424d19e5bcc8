//! Translation quality measurement and the reordering baselines.
//!
//! Three layers live here:
//!
//! * corpus BLEU ([`bleu`]) and rank correlation ([`spearman`]) — the raw
//!   metrics;
//! * the unsupervised model-selection score ([`model_selection_score`]),
//!   which needs no parallel data: translate held-out text to the other
//!   language and back, then measure BLEU against the original;
//! * the word-reordering baselines: a small recurrent [`LanguageModel`]
//!   drives [`word_reorder`] (hill-climbing over adjacent swaps), and
//!   [`oracle_reorder`] bounds what any reordering could achieve given the
//!   reference.
//!
//! Everything score-like is `f64`; BLEU is reported on the 0–100 scale.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use rand_chacha::ChaCha8Rng;

use crate::corpus::{batch_indices, SeqBatch, EOS, SOS};
use crate::error::UnmtError;
use crate::model::{LstmCell, Translator};
use crate::tensor::{
    backward, clip_grad_norm, cross_entropy_logits, embedding_lookup, stack_positions, AdamState,
    Tensor,
};

/// Highest n-gram order entering the BLEU geometric mean.
pub const BLEU_MAX_N: usize = 4;

/// How the zero-count precisions are smoothed, quoted in reports.
pub const BLEU_SMOOTHING: &str =
    "add-1 on numerator and denominator of p_n for n >= 2 when the clipped match count is 0";

/// Rounds of adjacent-swap hill climbing in [`word_reorder`].
pub const WR_ROUNDS: usize = 10;

/// [`oracle_reorder`] searches all distinct permutations when there are no
/// more than this many of them (8! — every sentence of up to eight tokens
/// qualifies); beyond that it falls back to a greedy construction.
pub const ORACLE_EXHAUSTIVE_LIMIT: u64 = 40_320;

/// Corpus BLEU with its parts, so reports can show where a score comes from.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// The headline score on the 0–100 scale.
    pub bleu: f64,
    /// Modified n-gram precisions p_1..p_4, after smoothing.
    pub precisions: [f64; BLEU_MAX_N],
    /// Which precisions the smoothing rule touched.
    pub smoothed: [bool; BLEU_MAX_N],
    pub brevity_penalty: f64,
    /// Total candidate tokens across the corpus.
    pub candidate_len: usize,
    /// Total reference tokens across the corpus.
    pub reference_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2} ({:.3}/{:.3}/{:.3}/{:.3}, bp = {:.3}, len {}/{}; smoothing: {})",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.candidate_len,
            self.reference_len,
            BLEU_SMOOTHING,
        )
    }
}

fn clipped_matches<Tok: Eq + Hash + Clone>(cand: &[Tok], reference: &[Tok], n: usize) -> usize {
    if cand.len() < n {
        return 0;
    }
    let mut ref_counts: HashMap<&[Tok], usize> = HashMap::new();
    for g in reference.windows(n) {
        *ref_counts.entry(g).or_insert(0) += 1;
    }
    let mut cand_counts: HashMap<&[Tok], usize> = HashMap::new();
    for g in cand.windows(n) {
        *cand_counts.entry(g).or_insert(0) += 1;
    }
    cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(*g).copied().unwrap_or(0)))
        .sum()
}

/// Corpus-level BLEU of `candidates` against single `references`.
///
/// Modified (clipped) n-gram precisions up to order four, geometric mean,
/// exponential brevity penalty on corpus totals. p_1 is never smoothed — a
/// corpus with no unigram match scores exactly 0 — while zero-count higher
/// orders get add-1 smoothing on both sides so short-sentence corpora remain
/// scoreable. Tokens are compared by equality, so the same function serves
/// id sequences and surface words.
pub fn bleu<Tok: Eq + Hash + Clone>(
    candidates: &[Vec<Tok>],
    references: &[Vec<Tok>],
) -> Result<BleuReport, UnmtError> {
    if candidates.is_empty() {
        return Err(UnmtError::Contract(
            "bleu: empty candidate set has no defined score".into(),
        ));
    }
    if candidates.len() != references.len() {
        return Err(UnmtError::Contract(format!(
            "bleu: {} candidates against {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    let mut candidate_len = 0usize;
    let mut reference_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        candidate_len += cand.len();
        reference_len += reference.len();
        for n in 1..=BLEU_MAX_N {
            matches[n - 1] += clipped_matches(cand, reference, n);
            totals[n - 1] += (cand.len() + 1).saturating_sub(n);
        }
    }

    let mut precisions = [0.0f64; BLEU_MAX_N];
    let mut smoothed = [false; BLEU_MAX_N];
    for n in 1..=BLEU_MAX_N {
        let (m, t) = (matches[n - 1], totals[n - 1]);
        precisions[n - 1] = if n >= 2 && m == 0 {
            smoothed[n - 1] = true;
            1.0 / (t as f64 + 1.0)
        } else if t == 0 {
            0.0
        } else {
            m as f64 / t as f64
        };
    }

    let brevity_penalty = if candidate_len == 0 {
        0.0
    } else if candidate_len >= reference_len {
        1.0
    } else {
        (1.0 - reference_len as f64 / candidate_len as f64).exp()
    };
    let bleu = if precisions[0] == 0.0 {
        0.0
    } else {
        let mean_log: f64 = precisions.iter().map(|p| p.ln()).sum::<f64>() / BLEU_MAX_N as f64;
        brevity_penalty * mean_log.exp() * 100.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        smoothed,
        brevity_penalty,
        candidate_len,
        reference_len,
    })
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("checked finite"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // Tied values share the average of the ranks they span (1-based).
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
///
/// Errors when the sequences differ in length, are shorter than two, contain
/// non-finite values, or when either is constant (the correlation is
/// undefined there — refusing loudly beats returning a quiet 0).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, UnmtError> {
    if xs.len() != ys.len() {
        return Err(UnmtError::Contract(format!(
            "spearman: {} values against {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(UnmtError::Contract(
            "spearman: need at least two observations".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(UnmtError::Contract(
            "spearman: non-finite observation".into(),
        ));
    }
    for (name, s) in [("first", xs), ("second", ys)] {
        if s.iter().all(|&v| v == s[0]) {
            return Err(UnmtError::Contract(format!(
                "spearman: {name} sequence is constant, correlation undefined"
            )));
        }
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    Ok(cov / (vx * vy).sqrt())
}

/// Unsupervised model-selection score: the mean of the two round-trip corpus
/// BLEUs on held-out monolingual text.
///
/// `val_src` is translated to the target language and back, then scored
/// against itself; `val_tgt` symmetrically. Needs no parallel data, and
/// correlates with test BLEU well enough to pick checkpoints and tune by.
pub fn model_selection_score(
    src_to_tgt: &dyn Translator,
    tgt_to_src: &dyn Translator,
    val_src: &[Vec<u32>],
    val_tgt: &[Vec<u32>],
) -> Result<f64, UnmtError> {
    let there = src_to_tgt.translate_batch(val_src)?;
    let back = tgt_to_src.translate_batch(&there)?;
    let src_side = bleu(&back, val_src)?.bleu;

    let there = tgt_to_src.translate_batch(val_tgt)?;
    let back = src_to_tgt.translate_batch(&there)?;
    let tgt_side = bleu(&back, val_tgt)?.bleu;

    Ok((src_side + tgt_side) / 2.0)
}

/// Recipe for [`train_lm`].
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl LmConfig {
    /// Desk-scale defaults, matched to the translation model's optimizer
    /// settings (Adam, β₁ = 0.5, gradient clipping at 5).
    pub fn desk() -> LmConfig {
        LmConfig {
            dim: 64,
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

/// A single-layer recurrent language model over one vocabulary.
///
/// Scores sentences left to right from a start-of-sentence state and includes
/// the end-of-sentence prediction, so two permutations of the same words get
/// genuinely different scores. Every sentence over the vocabulary receives a
/// finite log-probability. Parameters are frozen once training finishes; this
/// type only scores.
pub struct LanguageModel {
    emb: Tensor<f32>,
    cell: LstmCell<f32>,
    out_w: Tensor<f32>,
    out_b: Tensor<f32>,
    vocab_size: usize,
}

/// One forward pass over a padded batch; returns per-step `B×V` logits.
fn lm_step_logits(
    emb: &Tensor<f32>,
    cell: &LstmCell<f32>,
    out_w: &Tensor<f32>,
    out_b: &Tensor<f32>,
    inputs: &SeqBatch,
) -> Result<Vec<Tensor<f32>>, UnmtError> {
    let b = inputs.batch_size();
    let n = cell.n;
    let mut h = Tensor::zeros(&[b, n]);
    let mut c = Tensor::zeros(&[b, n]);
    let mut logits = Vec::with_capacity(inputs.max_len);
    for t in 0..inputs.max_len {
        let x = embedding_lookup(emb, &inputs.ids_at_step(t))?;
        let (nh, nc) = cell.step(&x, &h, &c)?;
        h = nh;
        c = nc;
        // Rows past their length produce garbage states here, but every
        // position that reads them carries weight 0 downstream.
        logits.push(h.matmul(out_w)?.add_bias(out_b)?);
    }
    Ok(logits)
}

/// Shift a batch of sentences into LM (input, target) form:
/// inputs `SOS x₁..x_L`, targets `x₁..x_L EOS` — equal lengths row by row.
fn lm_frames(sentences: &[Vec<u32>]) -> (SeqBatch, SeqBatch) {
    let inputs: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| std::iter::once(SOS).chain(s.iter().copied()).collect())
        .collect();
    let targets: Vec<Vec<u32>> = sentences
        .iter()
        .map(|s| s.iter().copied().chain(std::iter::once(EOS)).collect())
        .collect();
    (
        SeqBatch::from_sentences(&inputs, crate::corpus::Lang::Src),
        SeqBatch::from_sentences(&targets, crate::corpus::Lang::Src),
    )
}

/// Train a [`LanguageModel`] on monolingual id sentences.
///
/// Teacher-forced cross-entropy, token-sum per sentence averaged over the
/// batch, Adam with β₁ = 0.5 and clipping at norm 5 — the same optimizer
/// discipline as the translation model. Ids must lie below `vocab_size`.
pub fn train_lm(
    sentences: &[Vec<u32>],
    vocab_size: usize,
    cfg: &LmConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LanguageModel, UnmtError> {
    if sentences.is_empty() {
        return Err(UnmtError::Contract(
            "train_lm: no sentences to train on".into(),
        ));
    }
    let emb = crate::model::uniform_param::<f32>(&[vocab_size, cfg.dim], rng);
    let cell = LstmCell::<f32>::new(cfg.dim, cfg.dim, rng);
    let out_w = crate::model::uniform_param::<f32>(&[cfg.dim, vocab_size], rng);
    let out_b = Tensor::param(vec![0.0; vocab_size], &[vocab_size]);
    let params = vec![
        emb.clone(),
        cell.w.clone(),
        cell.b.clone(),
        out_w.clone(),
        out_b.clone(),
    ];
    let mut adam = AdamState::new(&params, cfg.lr, 0.5, 0.999, 1e-8);

    for _ in 0..cfg.epochs {
        for batch in batch_indices(sentences.len(), cfg.batch_size, rng) {
            let picked: Vec<Vec<u32>> = batch.iter().map(|&i| sentences[i].clone()).collect();
            let (inputs, targets) = lm_frames(&picked);
            let logits = lm_step_logits(&emb, &cell, &out_w, &out_b, &inputs)?;
            let flat = stack_positions(&logits)?;
            let b = inputs.batch_size();
            let mut weights = vec![0.0f32; b * inputs.max_len];
            for (row, &len) in inputs.lens.iter().enumerate() {
                for t in 0..len {
                    weights[row * inputs.max_len + t] = 1.0 / b as f32;
                }
            }
            let loss = cross_entropy_logits(&flat, &targets.ids, &weights)?;
            backward(&loss)?;
            clip_grad_norm(&params, 5.0);
            adam.step(&params)?;
            for p in &params {
                p.zero_grad();
            }
        }
    }
    Ok(LanguageModel {
        emb: emb.detach(),
        cell: LstmCell {
            w: cell.w.detach(),
            b: cell.b.detach(),
            n: cell.n,
        },
        out_w: out_w.detach(),
        out_b: out_b.detach(),
        vocab_size,
    })
}

impl LanguageModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Natural-log probability of each sentence, end-of-sentence included.
    pub fn log_probs(&self, sentences: &[Vec<u32>]) -> Result<Vec<f64>, UnmtError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(CHUNK) {
            let (inputs, targets) = lm_frames(chunk);
            let logits = lm_step_logits(&self.emb, &self.cell, &self.out_w, &self.out_b, &inputs)?;
            let mut scores = vec![0.0f64; chunk.len()];
            for (t, step) in logits.iter().enumerate() {
                let vals = step.value();
                let v = self.vocab_size;
                for (row, &len) in inputs.lens.iter().enumerate() {
                    if t >= len {
                        continue;
                    }
                    let logit_row = &vals[row * v..(row + 1) * v];
                    let max = logit_row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
                    let lse = max
                        + logit_row
                            .iter()
                            .map(|&x| (x as f64 - max).exp())
                            .sum::<f64>()
                            .ln();
                    let target = targets.ids[row * targets.max_len + t] as usize;
                    scores[row] += logit_row[target] as f64 - lse;
                }
            }
            out.extend(scores);
        }
        Ok(out)
    }
}

/// Hill-climb over adjacent transpositions to raise LM log-probability.
///
/// Each round scores every adjacent swap of distinct tokens; the best one is
/// applied only if it strictly improves, so the returned sentence never
/// scores below the input. At most `rounds` swaps are applied ([`WR_ROUNDS`]
/// is the standard budget).
pub fn word_reorder(
    sentence: &[u32],
    lm: &LanguageModel,
    rounds: usize,
) -> Result<Vec<u32>, UnmtError> {
    let mut cur = sentence.to_vec();
    if cur.len() < 2 {
        return Ok(cur);
    }
    let mut cur_score = lm.log_probs(std::slice::from_ref(&cur))?[0];
    for _ in 0..rounds {
        let mut variants = Vec::with_capacity(cur.len() - 1);
        for i in 0..cur.len() - 1 {
            if cur[i] != cur[i + 1] {
                let mut v = cur.clone();
                v.swap(i, i + 1);
                variants.push(v);
            }
        }
        if variants.is_empty() {
            break;
        }
        let scores = lm.log_probs(&variants)?;
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        if scores[best] > cur_score {
            cur_score = scores[best];
            cur = variants.swap_remove(best);
        } else {
            break;
        }
    }
    Ok(cur)
}

/// Fixed-width n-gram key: `n ≤ 4` tokens padded with a sentinel.
type NgramKey = [u32; BLEU_MAX_N];

const KEY_PAD: u32 = u32::MAX;

fn ngram_key(g: &[u32]) -> NgramKey {
    let mut k = [KEY_PAD; BLEU_MAX_N];
    k[..g.len()].copy_from_slice(g);
    k
}

struct RefCounts {
    counts: [HashMap<NgramKey, usize>; BLEU_MAX_N],
    len: usize,
}

impl RefCounts {
    fn of(reference: &[u32]) -> RefCounts {
        let mut counts: [HashMap<NgramKey, usize>; BLEU_MAX_N] = Default::default();
        for n in 1..=BLEU_MAX_N {
            for g in reference.windows(n) {
                *counts[n - 1].entry(ngram_key(g)).or_insert(0) += 1;
            }
        }
        RefCounts {
            counts,
            len: reference.len(),
        }
    }

    /// Sentence-level BLEU of `cand` against this reference, same smoothing
    /// rule as [`bleu`].
    fn score(&self, cand: &[u32]) -> f64 {
        let mut mean_log = 0.0;
        for n in 1..=BLEU_MAX_N {
            let total = (cand.len() + 1).saturating_sub(n);
            let mut cand_counts: HashMap<NgramKey, usize> = HashMap::new();
            for g in cand.windows(n) {
                *cand_counts.entry(ngram_key(g)).or_insert(0) += 1;
            }
            let matched: usize = cand_counts
                .iter()
                .map(|(g, &c)| c.min(self.counts[n - 1].get(g).copied().unwrap_or(0)))
                .sum();
            let p = if n >= 2 && matched == 0 {
                1.0 / (total as f64 + 1.0)
            } else if total == 0 || matched == 0 {
                return 0.0;
            } else {
                matched as f64 / total as f64
            };
            mean_log += p.ln() / BLEU_MAX_N as f64;
        }
        let bp = if cand.is_empty() {
            0.0
        } else if cand.len() >= self.len {
            1.0
        } else {
            (1.0 - self.len as f64 / cand.len() as f64).exp()
        };
        bp * mean_log.exp() * 100.0
    }
}

/// Number of distinct permutations of a multiset, or `None` once it exceeds
/// `limit` (computed as a product of binomials to dodge factorial overflow).
fn distinct_permutations(counts: &[usize], limit: u64) -> Option<u64> {
    let mut remaining: u64 = counts.iter().map(|&c| c as u64).sum();
    let mut total: u64 = 1;
    for &c in counts {
        // total *= C(remaining, c)
        let mut binom: u64 = 1;
        for i in 0..c as u64 {
            binom = binom.checked_mul(remaining - i)? / (i + 1);
        }
        total = total.checked_mul(binom)?;
        if total > limit {
            return None;
        }
        remaining -= c as u64;
    }
    Some(total)
}

fn permute_best(
    tokens: &mut Vec<u32>,
    pool: &mut Vec<(u32, usize)>,
    target_len: usize,
    refc: &RefCounts,
    best: &mut (f64, Vec<u32>),
) {
    if tokens.len() == target_len {
        let s = refc.score(tokens);
        if s > best.0 {
            *best = (s, tokens.clone());
        }
        return;
    }
    for i in 0..pool.len() {
        if pool[i].1 == 0 {
            continue;
        }
        pool[i].1 -= 1;
        tokens.push(pool[i].0);
        permute_best(tokens, pool, target_len, refc, best);
        tokens.pop();
        pool[i].1 += 1;
    }
}

/// The reordering ceiling: the best sentence BLEU reachable by permuting
/// `tokens`, given the reference.
///
/// Exact (exhaustive over distinct permutations, enumerated in ascending
/// token order so ties resolve deterministically) whenever there are at most
/// [`ORACLE_EXHAUSTIVE_LIMIT`] of them — which covers every sentence of up
/// to eight tokens. Beyond that, a greedy construction walks the reference
/// emitting each still-available token, appends the leftovers in input
/// order, and keeps whichever of {greedy, input order} scores higher — so
/// the result never scores below the input order.
pub fn oracle_reorder(tokens: &[u32], reference: &[u32]) -> Vec<u32> {
    if tokens.len() < 2 {
        return tokens.to_vec();
    }
    let refc = RefCounts::of(reference);

    let mut pool: Vec<(u32, usize)> = Vec::new();
    let mut sorted = tokens.to_vec();
    sorted.sort_unstable();
    for &t in &sorted {
        match pool.last_mut() {
            Some(last) if last.0 == t => last.1 += 1,
            _ => pool.push((t, 1)),
        }
    }
    let counts: Vec<usize> = pool.iter().map(|&(_, c)| c).collect();

    if distinct_permutations(&counts, ORACLE_EXHAUSTIVE_LIMIT).is_some() {
        let mut best = (refc.score(tokens), tokens.to_vec());
        let mut scratch = Vec::with_capacity(tokens.len());
        permute_best(&mut scratch, &mut pool, tokens.len(), &refc, &mut best);
        return best.1;
    }

    let mut available: HashMap<u32, usize> = HashMap::new();
    for &t in tokens {
        *available.entry(t).or_insert(0) += 1;
    }
    let mut greedy = Vec::with_capacity(tokens.len());
    for &r in reference {
        if let Some(c) = available.get_mut(&r) {
            if *c > 0 {
                *c -= 1;
                greedy.push(r);
            }
        }
    }
    for &t in tokens {
        let c = available.get_mut(&t).expect("token came from this multiset");
        if *c > 0 {
            *c -= 1;
            greedy.push(t);
        }
    }
    if refc.score(&greedy) > refc.score(tokens) {
        greedy
    } else {
        tokens.to_vec()
    }
}
