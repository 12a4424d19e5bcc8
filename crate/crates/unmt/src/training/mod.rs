//! The training loop: the three loss terms, their weighted combination, the
//! alternating discriminator/model update, the outer back-translation
//! iteration, and checkpointing.
//!
//! One *outer iteration* freezes the previous model, translates both
//! monolingual corpora with it once, then runs a fixed number of epochs of
//! paired updates. Each paired update is one RMSProp step on the
//! discriminator loss followed by one Adam step on the combined objective
//!
//! ```text
//! λ_auto·[L_auto(src) + L_auto(tgt)]
//!   + λ_cd·[L_cd(src) + L_cd(tgt)]
//!   + λ_adv·L_adv
//! ```
//!
//! where `L_cd(src)` reconstructs source sentences from their stored
//! translations and `L_adv` is the encoder's fooling loss against the frozen
//! discriminator.
//!
//! Every random draw comes from an RNG stream labeled by purpose and
//! position — `noise.t{t}.e{e}.k{k}`, `shuffle.src.t{t}.e{e}`, and so on —
//! so any (iteration, epoch) boundary is a clean resume point and a reloaded
//! checkpoint continues the run bitwise.

pub mod checkpoint;

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::adversary::{adv_loss, disc_loss, Discriminator};
use crate::config::{ExperimentConfig, InitModel};
use crate::corpus::{
    batch_indices, load_embeddings, AlignedIds, Lang, MonolingualDataset, SeqBatch, Vocabulary,
};
use crate::error::UnmtError;
use crate::evaluation::{bleu, model_selection_score};
use crate::model::{
    append_eos, decode_teacher_forced, encode, Encoded, Lexicon, ModelParams, TranslationModel,
    Translator, WbwTranslator,
};
use crate::noise::{corrupt, NoiseConfig};
use crate::rng::stream;
use crate::tensor::{
    backward, clip_grad_norm, cross_entropy_logits, elem, AdamState, Element, RmsPropState,
    Tensor,
};

pub use checkpoint::{BtSource, Checkpoint};

/// Adam second-moment decay and epsilon; β1 and the learning rates live in
/// the config because ablations touch them.
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// RMSProp decay and epsilon for the discriminator.
const RMS_DECAY: f64 = 0.99;
const RMS_EPS: f64 = 1e-8;

pub const METRICS_HEADER: &str = "iter,epoch,step,loss_total,loss_auto_src,loss_auto_tgt,\
loss_cd_src,loss_cd_tgt,loss_adv,loss_disc,ms_score,bleu_src_tgt,bleu_tgt_src";

/// Worker count for the back-translation pass: the `UNMT_THREADS`
/// environment variable, else 1. Unparsable or zero values mean 1.
pub fn thread_count() -> usize {
    std::env::var("UNMT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

// --------------------------------------------------------------------------
// Data directory

/// Everything a run reads from its data directory. File names are fixed:
/// `train.src`/`train.tgt` (training corpora), `valid.src`/`valid.tgt`
/// (held-out monolingual text for the selection score), optionally
/// `test.src`/`test.tgt` (parallel, line-aligned, for reported BLEU), and
/// `lexicon.tsv` when the initial model is word-by-word.
pub struct TrainingData {
    pub dir: PathBuf,
    pub src: MonolingualDataset,
    pub tgt: MonolingualDataset,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub val_src: Vec<Vec<u32>>,
    pub val_tgt: Vec<Vec<u32>>,
    /// Aligned (source ids, target ids) test pairs, when present.
    pub test: Option<AlignedIds>,
    pub lexicon: Option<Lexicon>,
}

/// Load aligned parallel text, skipping pairs where either side exceeds the
/// length cap (alignment survives, unlike independent monolingual loading).
fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    max_len: usize,
) -> Result<AlignedIds, UnmtError> {
    let src_text = fs::read_to_string(src_path).map_err(|e| UnmtError::io(src_path, e))?;
    let tgt_text = fs::read_to_string(tgt_path).map_err(|e| UnmtError::io(tgt_path, e))?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(UnmtError::Corpus(format!(
            "parallel files disagree: {} has {} lines, {} has {}",
            src_path.display(),
            src_lines.len(),
            tgt_path.display(),
            tgt_lines.len()
        )));
    }
    let mut src_ids = Vec::new();
    let mut tgt_ids = Vec::new();
    for (s, t) in src_lines.iter().zip(&tgt_lines) {
        let si = src_vocab.encode(s)?;
        let ti = tgt_vocab.encode(t)?;
        if si.len() > max_len || ti.len() > max_len {
            continue;
        }
        src_ids.push(si);
        tgt_ids.push(ti);
    }
    if src_ids.is_empty() {
        return Err(UnmtError::Corpus(format!(
            "no usable parallel pairs in {} (cap {max_len})",
            src_path.display()
        )));
    }
    Ok((src_ids, tgt_ids))
}

impl TrainingData {
    pub fn load(cfg: &ExperimentConfig) -> Result<TrainingData, UnmtError> {
        let dir = cfg.data_dir.clone();
        let src_vocab = Vocabulary::build(&dir.join("train.src"), cfg.min_count, Lang::Src)?;
        let tgt_vocab = Vocabulary::build(&dir.join("train.tgt"), cfg.min_count, Lang::Tgt)?;
        let src = MonolingualDataset::load(&dir.join("train.src"), &src_vocab, cfg.max_len)?;
        let tgt = MonolingualDataset::load(&dir.join("train.tgt"), &tgt_vocab, cfg.max_len)?;
        let val_src =
            MonolingualDataset::load(&dir.join("valid.src"), &src_vocab, cfg.max_len)?.sentences;
        let val_tgt =
            MonolingualDataset::load(&dir.join("valid.tgt"), &tgt_vocab, cfg.max_len)?.sentences;
        let test_src = dir.join("test.src");
        let test_tgt = dir.join("test.tgt");
        let test = match (test_src.exists(), test_tgt.exists()) {
            (true, true) => Some(load_parallel(
                &test_src,
                &test_tgt,
                &src_vocab,
                &tgt_vocab,
                cfg.max_len,
            )?),
            (false, false) => None,
            _ => {
                return Err(UnmtError::Corpus(
                    "test.src and test.tgt must both exist or both be absent".into(),
                ))
            }
        };
        let lexicon = if cfg.init_model == InitModel::Wbw {
            Some(Lexicon::load(&dir.join("lexicon.tsv"))?)
        } else {
            None
        };
        Ok(TrainingData {
            dir,
            src,
            tgt,
            src_vocab,
            tgt_vocab,
            val_src,
            val_tgt,
            test,
            lexicon,
        })
    }
}

// --------------------------------------------------------------------------
// Loss terms

/// Corrupt each sentence and encode the corrupted batch in `lang`.
fn corrupted_encode<T: Element>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    lang: Lang,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Encoded<T>, UnmtError> {
    let corrupted: Vec<Vec<u32>> = sentences.iter().map(|s| corrupt(s, noise, rng)).collect();
    let batch = SeqBatch::from_sentences(&append_eos(&corrupted), lang);
    encode(params, &batch, lang)
}

/// Denoising auto-encoding loss: encode a corrupted sentence, teacher-force
/// decode in the same language against the uncorrupted original. Token-level
/// cross-entropy, summed per sentence, averaged over the batch. Also returns
/// the encoding so the adversarial terms can reuse the same latents.
pub fn loss_auto<T: Element>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    lang: Lang,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Encoded<T>), UnmtError> {
    let enc = corrupted_encode(params, sentences, lang, noise, rng)?;
    let tf = decode_teacher_forced(params, &enc, lang, sentences)?;
    let loss = cross_entropy_logits(&tf.logits, &tf.targets, &tf.weights)?;
    Ok((loss, enc))
}

/// Cross-domain loss: reconstruct each original from a corrupted version of
/// its stored back-translation. `translations[i]` must be `originals[i]`
/// rendered in `translation_lang` by the frozen previous model; only ids flow
/// in, so no gradient can reach the model that produced them. Pairs whose
/// translation is empty are skipped and counted.
pub fn loss_cd<T: Element>(
    params: &ModelParams<T>,
    originals: &[Vec<u32>],
    translations: &[Vec<u32>],
    translation_lang: Lang,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Option<Tensor<T>>, usize), UnmtError> {
    if originals.len() != translations.len() {
        return Err(UnmtError::Contract(format!(
            "loss_cd: {} originals vs {} translations",
            originals.len(),
            translations.len()
        )));
    }
    let mut xs: Vec<Vec<u32>> = Vec::with_capacity(originals.len());
    let mut ys: Vec<Vec<u32>> = Vec::with_capacity(translations.len());
    let mut skipped = 0usize;
    for (x, y) in originals.iter().zip(translations) {
        if y.is_empty() {
            skipped += 1;
            continue;
        }
        xs.push(x.clone());
        ys.push(corrupt(y, noise, rng));
    }
    if xs.is_empty() {
        return Ok((None, skipped));
    }
    let batch = SeqBatch::from_sentences(&append_eos(&ys), translation_lang);
    let enc = encode(params, &batch, translation_lang)?;
    let tf = decode_teacher_forced(params, &enc, translation_lang.other(), &xs)?;
    let loss = cross_entropy_logits(&tf.logits, &tf.targets, &tf.weights)?;
    Ok((Some(loss), skipped))
}

/// One update's worth of sampled data: a batch per monolingual corpus and,
/// when back-translations exist, an (original, translation) batch per
/// direction. `cd_src` reconstructs source sentences (its translations are in
/// the target language) and vice versa.
pub struct StepBatch {
    pub auto_src: Vec<Vec<u32>>,
    pub auto_tgt: Vec<Vec<u32>>,
    pub cd_src: Option<AlignedIds>,
    pub cd_tgt: Option<AlignedIds>,
}

/// Scalar values of everything a step computed, for logging. `None` means
/// the term was not computed this step (its λ is zero or it had no data) —
/// distinct from a genuine zero loss.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub total: Option<f64>,
    pub auto_src: Option<f64>,
    pub auto_tgt: Option<f64>,
    pub cd_src: Option<f64>,
    pub cd_tgt: Option<f64>,
    pub adv: Option<f64>,
    pub disc: Option<f64>,
    pub cd_skipped: usize,
}

/// The combined objective as a graph tensor plus its logged decomposition.
pub struct TotalLoss<T: Element> {
    pub tensor: Option<Tensor<T>>,
    pub parts: LossParts,
}

/// Forward results shared between the discriminator step and the model step.
struct Forward<T: Element> {
    enc_src: Option<Encoded<T>>,
    enc_tgt: Option<Encoded<T>>,
    auto_src: Option<Tensor<T>>,
    auto_tgt: Option<Tensor<T>>,
    cd_src: Option<Tensor<T>>,
    cd_tgt: Option<Tensor<T>>,
    cd_skipped: usize,
}

/// What one side's encode pass yields: the latent states (when anything
/// downstream needs them) and the auto loss (when that term is on).
type SideForward<T> = (Option<Encoded<T>>, Option<Tensor<T>>);

/// Encode one language's batch, with the auto loss when λ_auto > 0. When the
/// auto term is ablated but the adversary still runs, the same corrupted
/// encode happens without a decode, so the discriminator sees the identical
/// latent distribution either way.
fn encode_side<T: Element>(
    params: &ModelParams<T>,
    sentences: &[Vec<u32>],
    lang: Lang,
    auto_on: bool,
    z_needed: bool,
    noise: &NoiseConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SideForward<T>, UnmtError> {
    if auto_on {
        let (loss, enc) = loss_auto(params, sentences, lang, noise, rng)?;
        Ok((Some(enc), Some(loss)))
    } else if z_needed {
        Ok((
            Some(corrupted_encode(params, sentences, lang, noise, rng)?),
            None,
        ))
    } else {
        Ok((None, None))
    }
}

/// All non-adversarial forwards, in a pinned draw order: src auto, tgt auto,
/// src cross-domain, tgt cross-domain.
fn forward_losses<T: Element>(
    params: &ModelParams<T>,
    cfg: &ExperimentConfig,
    batch: &StepBatch,
    rng: &mut ChaCha8Rng,
) -> Result<Forward<T>, UnmtError> {
    let noise = cfg.noise();
    let auto_on = cfg.lambda_auto > 0.0;
    let z_needed = cfg.lambda_adv > 0.0;
    let (enc_src, auto_src) =
        encode_side(params, &batch.auto_src, Lang::Src, auto_on, z_needed, &noise, rng)?;
    let (enc_tgt, auto_tgt) =
        encode_side(params, &batch.auto_tgt, Lang::Tgt, auto_on, z_needed, &noise, rng)?;
    let mut cd_skipped = 0usize;
    let mut cd = |pairs: &Option<AlignedIds>,
                  y_lang: Lang,
                  rng: &mut ChaCha8Rng|
     -> Result<Option<Tensor<T>>, UnmtError> {
        if cfg.lambda_cd <= 0.0 {
            return Ok(None);
        }
        match pairs {
            Some((xs, ys)) => {
                let (loss, skipped) = loss_cd(params, xs, ys, y_lang, &noise, rng)?;
                cd_skipped += skipped;
                Ok(loss)
            }
            None => Ok(None),
        }
    };
    let cd_src = cd(&batch.cd_src, Lang::Tgt, rng)?;
    let cd_tgt = cd(&batch.cd_tgt, Lang::Src, rng)?;
    Ok(Forward {
        enc_src,
        enc_tgt,
        auto_src,
        auto_tgt,
        cd_src,
        cd_tgt,
        cd_skipped,
    })
}

fn add_term<T: Element>(
    total: Option<Tensor<T>>,
    term: &Tensor<T>,
    weight: f64,
) -> Result<Option<Tensor<T>>, UnmtError> {
    let w = term.scale_const(elem::<T>(weight));
    Ok(Some(match total {
        Some(t) => t.add(&w)?,
        None => w,
    }))
}

/// Weight and sum the forward terms, adding the encoder's fooling loss
/// against the current discriminator (mean of the two directions).
fn assemble<T: Element>(
    disc: &Discriminator<T>,
    cfg: &ExperimentConfig,
    fwd: &Forward<T>,
) -> Result<TotalLoss<T>, UnmtError> {
    let adv = if cfg.lambda_adv > 0.0 {
        let s = if cfg.smooth_adv_loss {
            cfg.adv_smoothing
        } else {
            0.0
        };
        let enc_src = fwd.enc_src.as_ref().expect("z encoded when λ_adv > 0");
        let enc_tgt = fwd.enc_tgt.as_ref().expect("z encoded when λ_adv > 0");
        let a = adv_loss(disc, enc_src, s)?;
        let b = adv_loss(disc, enc_tgt, s)?;
        Some(a.add(&b)?.scale_const(elem::<T>(0.5)))
    } else {
        None
    };

    let value = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.item().to_f64_exact());
    let mut total: Option<Tensor<T>> = None;
    for t in [&fwd.auto_src, &fwd.auto_tgt].into_iter().flatten() {
        total = add_term(total, t, cfg.lambda_auto)?;
    }
    for t in [&fwd.cd_src, &fwd.cd_tgt].into_iter().flatten() {
        total = add_term(total, t, cfg.lambda_cd)?;
    }
    if let Some(t) = &adv {
        total = add_term(total, t, cfg.lambda_adv)?;
    }
    let parts = LossParts {
        total: value(&total),
        auto_src: value(&fwd.auto_src),
        auto_tgt: value(&fwd.auto_tgt),
        cd_src: value(&fwd.cd_src),
        cd_tgt: value(&fwd.cd_tgt),
        adv: value(&adv),
        disc: None,
        cd_skipped: fwd.cd_skipped,
    };
    Ok(TotalLoss {
        tensor: total,
        parts,
    })
}

/// The combined objective for one step's batches, evaluated against the
/// current discriminator. Terms with zero λ (or no data) are skipped
/// entirely; with every λ zero the result is an empty tensor and total 0.
pub fn total_loss<T: Element>(
    params: &ModelParams<T>,
    disc: &Discriminator<T>,
    cfg: &ExperimentConfig,
    batch: &StepBatch,
    rng: &mut ChaCha8Rng,
) -> Result<TotalLoss<T>, UnmtError> {
    let fwd = forward_losses(params, cfg, batch, rng)?;
    assemble(disc, cfg, &fwd)
}

fn batch_dump(batch: &StepBatch) -> String {
    let lens = |s: &[Vec<u32>]| {
        let min = s.iter().map(Vec::len).min().unwrap_or(0);
        let max = s.iter().map(Vec::len).max().unwrap_or(0);
        format!("{} sentences, lens {min}..{max}", s.len())
    };
    let first = batch
        .auto_src
        .first()
        .map(|s| format!("{s:?}"))
        .unwrap_or_default();
    format!(
        "auto_src [{}], auto_tgt [{}], cd_src {}, cd_tgt {}, first src ids {first}",
        lens(&batch.auto_src),
        lens(&batch.auto_tgt),
        batch.cd_src.as_ref().map_or(0, |(x, _)| x.len()),
        batch.cd_tgt.as_ref().map_or(0, |(x, _)| x.len()),
    )
}

fn ensure_finite(
    value: f64,
    which: &str,
    at: (usize, usize, u64),
    batch: &StepBatch,
) -> Result<(), UnmtError> {
    if value.is_finite() {
        return Ok(());
    }
    Err(UnmtError::NonFiniteLoss {
        iter: at.0,
        epoch: at.1,
        step: at.2 as usize,
        dump: format!("{which} = {value}; {}", batch_dump(batch)),
    })
}

/// One alternating update: an RMSProp step on the discriminator loss (the
/// latents detached), then an Adam step on the combined objective against
/// the freshly updated, frozen discriminator. When λ_adv is zero the
/// discriminator is not trained either — there is no adversarial game.
/// `at` = (iteration, epoch, global step), for diagnostics only.
#[allow(clippy::too_many_arguments)]
pub fn paired_step<T: Element>(
    params: &ModelParams<T>,
    disc: &Discriminator<T>,
    adam: &mut AdamState<T>,
    rms: &mut RmsPropState<T>,
    cfg: &ExperimentConfig,
    batch: &StepBatch,
    rng: &mut ChaCha8Rng,
    at: (usize, usize, u64),
) -> Result<LossParts, UnmtError> {
    let fwd = forward_losses(params, cfg, batch, rng)?;
    let mut disc_value = None;
    if cfg.lambda_adv > 0.0 {
        let enc_src = fwd.enc_src.as_ref().expect("z encoded when λ_adv > 0");
        let enc_tgt = fwd.enc_tgt.as_ref().expect("z encoded when λ_adv > 0");
        let ld = disc_loss(disc, enc_src, enc_tgt, cfg.adv_smoothing)?;
        let v = ld.item().to_f64_exact();
        ensure_finite(v, "discriminator loss", at, batch)?;
        backward(&ld)?;
        rms.step(&disc.tensors())?;
        disc.zero_grads();
        disc_value = Some(v);
    }
    let mut out = assemble(disc, cfg, &fwd)?;
    out.parts.disc = disc_value;
    if let Some(total) = &out.tensor {
        ensure_finite(out.parts.total.unwrap_or(0.0), "total loss", at, batch)?;
        backward(total)?;
        let model_tensors = params.tensors();
        clip_grad_norm(&model_tensors, elem::<T>(cfg.clip_norm));
        adam.step(&model_tensors)?;
        for t in &model_tensors {
            t.zero_grad();
        }
    }
    Ok(out.parts)
}

// --------------------------------------------------------------------------
// Back-translation pass

/// The synthetic pairs one outer iteration trains on: originals and their
/// frozen-model translations, per direction. `from_src` holds (src original,
/// tgt translation) pairs for the cross-domain loss that reconstructs src.
pub struct BtData {
    pub from_src: Option<AlignedIds>,
    pub from_tgt: Option<AlignedIds>,
}

impl BtData {
    pub fn empty() -> BtData {
        BtData {
            from_src: None,
            from_tgt: None,
        }
    }
}

/// Translate `sentences` with a frozen neural model, fanning out across
/// `threads` workers. Each worker rebuilds the model from its raw values
/// (the graph tensors are not shareable across threads); chunk boundaries
/// cannot change any output byte because decoding never mixes rows across
/// the internal chunk size, so this equals the single-threaded pass exactly.
pub fn translate_with_threads(
    model: &TranslationModel<f32>,
    sentences: &[Vec<u32>],
    threads: usize,
) -> Result<Vec<Vec<u32>>, UnmtError> {
    if threads <= 1 || sentences.len() < 2 {
        return model.translate_batch(sentences);
    }
    let p = model.params();
    let blueprint: Vec<(String, Vec<usize>, Vec<f32>)> = p
        .named()
        .iter()
        .map(|(name, t)| (name.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    let (arch, v_src, v_tgt, from) = (p.arch, p.v_src, p.v_tgt, model.from);
    let chunk = sentences.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for piece in sentences.chunks(chunk) {
            let bp = &blueprint;
            handles.push(scope.spawn(move || -> Result<Vec<Vec<u32>>, UnmtError> {
                let params = ModelParams::from_named(arch, v_src, v_tgt, &mut |name, shape| {
                    bp.iter()
                        .find(|(n, s, _)| n == name && s == shape)
                        .map(|(_, s, v)| Tensor::constant(v.clone(), s))
                        .ok_or_else(|| {
                            UnmtError::Contract(format!("model blueprint missing {name}"))
                        })
                })?;
                TranslationModel::new(&params, from).translate_batch(piece)
            }));
        }
        let mut out = Vec::with_capacity(sentences.len());
        for h in handles {
            out.extend(h.join().map_err(|_| {
                UnmtError::Contract("back-translation worker panicked".into())
            })??);
        }
        Ok(out)
    })
}

// --------------------------------------------------------------------------
// Metrics and evaluation records

/// One evaluation point: the unsupervised selection score and, when a
/// parallel test set exists, test BLEU per direction.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub iter: usize,
    pub epoch: usize,
    pub step: u64,
    pub ms: f64,
    pub bleu_src_tgt: Option<f64>,
    pub bleu_tgt_src: Option<f64>,
}

struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

fn csv_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsWriter {
    fn new(path: &Path) -> Result<MetricsWriter, UnmtError> {
        let file = File::create(path).map_err(|e| UnmtError::io(path, e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{METRICS_HEADER}").map_err(|e| UnmtError::io(path, e))?;
        Ok(MetricsWriter {
            out,
            path: path.to_path_buf(),
        })
    }

    fn row(
        &mut self,
        iter: usize,
        epoch: usize,
        step: u64,
        parts: &LossParts,
        eval: Option<&EvalRecord>,
    ) -> Result<(), UnmtError> {
        let line = format!(
            "{iter},{epoch},{step},{},{},{},{},{},{},{},{},{},{}",
            csv_opt(parts.total),
            csv_opt(parts.auto_src),
            csv_opt(parts.auto_tgt),
            csv_opt(parts.cd_src),
            csv_opt(parts.cd_tgt),
            csv_opt(parts.adv),
            csv_opt(parts.disc),
            csv_opt(eval.map(|e| e.ms)),
            csv_opt(eval.and_then(|e| e.bleu_src_tgt)),
            csv_opt(eval.and_then(|e| e.bleu_tgt_src)),
        );
        writeln!(self.out, "{line}").map_err(|e| UnmtError::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<(), UnmtError> {
        self.out.flush().map_err(|e| UnmtError::io(&self.path, e))
    }
}

// --------------------------------------------------------------------------
// The outer loop

/// Artifacts and results of a completed run.
pub struct RunOutcome {
    pub run_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    /// The epoch-end checkpoint with the highest selection score, also
    /// copied to `best.bin` in the run directory.
    pub best_checkpoint: Option<PathBuf>,
    pub best_ms: f64,
    pub history: Vec<EvalRecord>,
    pub src_to_tgt: TranslationModel<f32>,
    pub tgt_to_src: TranslationModel<f32>,
    pub cd_skipped: usize,
    /// Pretrained-embedding coverage per side, when embeddings were loaded.
    pub emb_coverage: Option<(f64, f64)>,
}

/// Run artifacts being accumulated (metrics stream, checkpoint list, best
/// tracking) — separated from the mutable model state to keep borrows sane.
struct RunSink {
    out_dir: PathBuf,
    metrics: MetricsWriter,
    history: Vec<EvalRecord>,
    checkpoints: Vec<PathBuf>,
    best_ckpt: Option<PathBuf>,
    best_ckpt_ms: f64,
}

/// Live training state: the model, the discriminator, both optimizers, and
/// the run position. Create one with [`Trainer::new`] (fresh) or
/// [`Trainer::from_checkpoint`] (resume), then call [`Trainer::run`].
pub struct Trainer {
    cfg: ExperimentConfig,
    data: TrainingData,
    params: ModelParams<f32>,
    disc: Discriminator<f32>,
    adam: AdamState<f32>,
    rms: RmsPropState<f32>,
    /// Outer iteration in progress, 1-based.
    iter: usize,
    /// Completed epochs within `iter`.
    epochs_done: usize,
    global_step: u64,
    best_ms: f64,
    bt: BtSource,
    /// True when `bt` already holds this iteration's source (resume path).
    bt_ready: bool,
    threads: usize,
    cd_skipped: usize,
    emb_coverage: Option<(f64, f64)>,
}

impl Trainer {
    pub fn new(
        cfg: ExperimentConfig,
        data: TrainingData,
        threads: usize,
    ) -> Result<Trainer, UnmtError> {
        cfg.validate()?;
        let arch = cfg.arch.arch();
        let mut rng = stream(cfg.seed, "init.params");
        let mut params: ModelParams<f32> =
            ModelParams::init(arch, data.src_vocab.size(), data.tgt_vocab.size(), &mut rng);
        let mut emb_coverage = None;
        if cfg.pretrained_embeddings {
            let mut er = stream(cfg.seed, "init.emb.src");
            let (m_src, c_src) =
                load_embeddings(&data.src_vocab, &data.dir.join("emb.src.vec"), arch.dim, &mut er)?;
            params.set_embedding(Lang::Src, &m_src);
            let mut er = stream(cfg.seed, "init.emb.tgt");
            let (m_tgt, c_tgt) =
                load_embeddings(&data.tgt_vocab, &data.dir.join("emb.tgt.vec"), arch.dim, &mut er)?;
            params.set_embedding(Lang::Tgt, &m_tgt);
            emb_coverage = Some((c_src, c_tgt));
        }
        let disc = Discriminator::init(
            2 * arch.dim,
            cfg.disc_hidden,
            &mut stream(cfg.seed, "init.disc"),
        );
        let adam = AdamState::new(
            &params.tensors(),
            cfg.lr_model as f32,
            cfg.adam_beta1 as f32,
            ADAM_BETA2 as f32,
            ADAM_EPS as f32,
        );
        let rms = RmsPropState::new(
            &disc.tensors(),
            cfg.lr_disc as f32,
            RMS_DECAY as f32,
            RMS_EPS as f32,
        );
        Ok(Trainer {
            cfg,
            data,
            params,
            disc,
            adam,
            rms,
            iter: 1,
            epochs_done: 0,
            global_step: 0,
            best_ms: f64::NEG_INFINITY,
            bt: BtSource::None,
            bt_ready: false,
            threads,
            cd_skipped: 0,
            emb_coverage,
        })
    }

    /// Restore a checkpoint and reload its data directory. The rebuilt
    /// vocabularies must agree with the stored ones word for word.
    pub fn from_checkpoint(path: &Path, threads: usize) -> Result<Trainer, UnmtError> {
        let ckpt = Checkpoint::load(path)?;
        let cfg = ckpt.config.clone();
        let data = TrainingData::load(&cfg)?;
        if data.src_vocab.words() != &ckpt.src_words[..]
            || data.tgt_vocab.words() != &ckpt.tgt_words[..]
        {
            return Err(UnmtError::Checkpoint(format!(
                "vocabulary rebuilt from {} disagrees with the checkpoint",
                cfg.data_dir.display()
            )));
        }
        let mut adam = AdamState::new(
            &ckpt.params.tensors(),
            cfg.lr_model as f32,
            cfg.adam_beta1 as f32,
            ADAM_BETA2 as f32,
            ADAM_EPS as f32,
        );
        let (m, v, step) = ckpt.adam;
        adam.restore(m, v, step)?;
        let mut rms = RmsPropState::new(
            &ckpt.disc.tensors(),
            cfg.lr_disc as f32,
            RMS_DECAY as f32,
            RMS_EPS as f32,
        );
        let (rv, rstep) = ckpt.rms;
        rms.restore(rv, rstep)?;
        Ok(Trainer {
            cfg,
            data,
            params: ckpt.params,
            disc: ckpt.disc,
            adam,
            rms,
            iter: ckpt.iter,
            epochs_done: ckpt.epochs_done,
            global_step: ckpt.global_step,
            best_ms: ckpt.best_ms,
            bt: ckpt.bt,
            bt_ready: true,
            threads,
            cd_skipped: 0,
            emb_coverage: None,
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn disc(&self) -> &Discriminator<f32> {
        &self.disc
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    fn bt_snapshot(&self) -> BtSource {
        match &self.bt {
            BtSource::None => BtSource::None,
            BtSource::Wbw => BtSource::Wbw,
            BtSource::Identity => BtSource::Identity,
            BtSource::Neural(p) => BtSource::Neural(p.frozen()),
        }
    }

    fn write_checkpoint(&self, path: &Path) -> Result<(), UnmtError> {
        let (m, v, step) = self.adam.state();
        let (rv, rstep) = self.rms.state();
        let ckpt = Checkpoint {
            config: self.cfg.clone(),
            iter: self.iter,
            epochs_done: self.epochs_done,
            global_step: self.global_step,
            best_ms: self.best_ms,
            src_words: self.data.src_vocab.words().to_vec(),
            tgt_words: self.data.tgt_vocab.words().to_vec(),
            params: self.params.frozen(),
            disc: self.disc.frozen(),
            adam: (m.to_vec(), v.to_vec(), step),
            rms: (rv.to_vec(), rstep),
            bt: self.bt_snapshot(),
        };
        ckpt.save(path)
    }

    /// Both corpora translated by this iteration's frozen model, truncated
    /// to `bt_limit` sentences per side when that is nonzero.
    fn compute_bt(&self) -> Result<BtData, UnmtError> {
        let take = |v: &Vec<Vec<u32>>| -> Vec<Vec<u32>> {
            if self.cfg.bt_limit == 0 {
                v.clone()
            } else {
                v[..self.cfg.bt_limit.min(v.len())].to_vec()
            }
        };
        let xs_src = take(&self.data.src.sentences);
        let xs_tgt = take(&self.data.tgt.sentences);
        let (ys_src, ys_tgt) = match &self.bt {
            BtSource::None => return Ok(BtData::empty()),
            BtSource::Wbw => {
                let lex = self.data.lexicon.as_ref().ok_or_else(|| {
                    UnmtError::Contract("word-by-word bootstrap requires a lexicon".into())
                })?;
                let st = WbwTranslator::new(
                    lex.clone(),
                    self.data.src_vocab.clone(),
                    self.data.tgt_vocab.clone(),
                );
                let ts = WbwTranslator::new(
                    lex.invert(),
                    self.data.tgt_vocab.clone(),
                    self.data.src_vocab.clone(),
                );
                (st.translate_batch(&xs_src)?, ts.translate_batch(&xs_tgt)?)
            }
            BtSource::Identity => {
                let st = WbwTranslator::identity(
                    self.data.src_vocab.clone(),
                    self.data.tgt_vocab.clone(),
                );
                let ts = WbwTranslator::identity(
                    self.data.tgt_vocab.clone(),
                    self.data.src_vocab.clone(),
                );
                (st.translate_batch(&xs_src)?, ts.translate_batch(&xs_tgt)?)
            }
            BtSource::Neural(p) => {
                let st = TranslationModel::new(p, Lang::Src);
                let ts = TranslationModel::new(p, Lang::Tgt);
                (
                    translate_with_threads(&st, &xs_src, self.threads)?,
                    translate_with_threads(&ts, &xs_tgt, self.threads)?,
                )
            }
        };
        Ok(BtData {
            from_src: Some((xs_src, ys_src)),
            from_tgt: Some((xs_tgt, ys_tgt)),
        })
    }

    /// Score the current model: selection score on held-out monolingual
    /// text, plus test BLEU per direction when a parallel set exists.
    pub fn evaluate(&self) -> Result<EvalRecord, UnmtError> {
        let st = TranslationModel::new(&self.params, Lang::Src);
        let ts = TranslationModel::new(&self.params, Lang::Tgt);
        let ms = model_selection_score(&st, &ts, &self.data.val_src, &self.data.val_tgt)?;
        let (bleu_src_tgt, bleu_tgt_src) = match &self.data.test {
            Some((test_src, test_tgt)) => {
                let hyp_tgt = st.translate_batch(test_src)?;
                let hyp_src = ts.translate_batch(test_tgt)?;
                (
                    Some(bleu(&hyp_tgt, test_tgt)?.bleu),
                    Some(bleu(&hyp_src, test_src)?.bleu),
                )
            }
            None => (None, None),
        };
        Ok(EvalRecord {
            iter: self.iter,
            epoch: self.epochs_done,
            step: self.global_step,
            ms,
            bleu_src_tgt,
            bleu_tgt_src,
        })
    }

    /// One epoch of paired steps over the source corpus (the other corpus
    /// and the back-translation pairs cycle through their own shuffles).
    fn run_epoch(&mut self, t: usize, e: usize, bt: &BtData, sink: &mut RunSink) -> Result<(), UnmtError> {
        let seed = self.cfg.seed;
        let b = self.cfg.batch_size;
        let src_batches = batch_indices(
            self.data.src.sentences.len(),
            b,
            &mut stream(seed, &format!("shuffle.src.t{t}.e{e}")),
        );
        let full_perm = |n: usize, label: String| -> Vec<usize> {
            batch_indices(n, n, &mut stream(seed, &label))
                .pop()
                .expect("nonempty corpus")
        };
        let tgt_perm = full_perm(
            self.data.tgt.sentences.len(),
            format!("shuffle.tgt.t{t}.e{e}"),
        );
        let cd_src_perm = bt
            .from_src
            .as_ref()
            .map(|(xs, _)| full_perm(xs.len(), format!("shuffle.btsrc.t{t}.e{e}")));
        let cd_tgt_perm = bt
            .from_tgt
            .as_ref()
            .map(|(xs, _)| full_perm(xs.len(), format!("shuffle.bttgt.t{t}.e{e}")));

        let mut tgt_cursor = 0usize;
        let mut cd_src_cursor = 0usize;
        let mut cd_tgt_cursor = 0usize;
        let cycle = |perm: &[usize], cursor: &mut usize, count: usize| -> Vec<usize> {
            (0..count)
                .map(|_| {
                    let i = perm[*cursor % perm.len()];
                    *cursor += 1;
                    i
                })
                .collect()
        };

        let steps = src_batches.len();
        for (k, src_idx) in src_batches.iter().enumerate() {
            let count = src_idx.len();
            let pick = |sents: &[Vec<u32>], idx: &[usize]| -> Vec<Vec<u32>> {
                idx.iter().map(|&i| sents[i].clone()).collect()
            };
            let auto_src = pick(&self.data.src.sentences, src_idx);
            let auto_tgt = pick(
                &self.data.tgt.sentences,
                &cycle(&tgt_perm, &mut tgt_cursor, count),
            );
            let cd_pick = |pairs: &Option<AlignedIds>,
                           perm: &Option<Vec<usize>>,
                           cursor: &mut usize| {
                pairs.as_ref().zip(perm.as_ref()).map(|((xs, ys), p)| {
                    let idx = cycle(p, cursor, count);
                    (pick(xs, &idx), pick(ys, &idx))
                })
            };
            let batch = StepBatch {
                auto_src,
                auto_tgt,
                cd_src: cd_pick(&bt.from_src, &cd_src_perm, &mut cd_src_cursor),
                cd_tgt: cd_pick(&bt.from_tgt, &cd_tgt_perm, &mut cd_tgt_cursor),
            };
            let mut rng = stream(seed, &format!("noise.t{t}.e{e}.k{k}"));
            let parts = paired_step(
                &self.params,
                &self.disc,
                &mut self.adam,
                &mut self.rms,
                &self.cfg,
                &batch,
                &mut rng,
                (t, e, self.global_step + 1),
            )?;
            self.global_step += 1;
            self.cd_skipped += parts.cd_skipped;

            let is_last = k + 1 == steps;
            let cadence = self.cfg.eval_every as u64;
            let eval = if is_last || (cadence > 0 && self.global_step.is_multiple_of(cadence)) {
                let mut rec = self.evaluate()?;
                rec.epoch = e;
                if rec.ms > self.best_ms {
                    self.best_ms = rec.ms;
                }
                sink.history.push(rec.clone());
                Some(rec)
            } else {
                None
            };
            sink.metrics.row(t, e, self.global_step, &parts, eval.as_ref())?;
        }
        Ok(())
    }

    /// The inner loop of one outer iteration: the remaining epochs against a
    /// fixed set of back-translations, with an evaluation and a checkpoint
    /// at every epoch end.
    fn train_inner(&mut self, t: usize, bt: &BtData, sink: &mut RunSink) -> Result<(), UnmtError> {
        for e in (self.epochs_done + 1)..=self.cfg.epochs_per_iter {
            self.run_epoch(t, e, bt, sink)?;
            self.epochs_done = e;
            let end_ms = sink.history.last().map(|r| r.ms).unwrap_or(f64::NEG_INFINITY);
            let path = sink.out_dir.join(format!("ckpt-t{t}-e{e}.bin"));
            self.write_checkpoint(&path)?;
            if end_ms > sink.best_ckpt_ms {
                sink.best_ckpt_ms = end_ms;
                sink.best_ckpt = Some(path.clone());
            }
            sink.checkpoints.push(path);
            sink.metrics.flush()?;
        }
        Ok(())
    }

    /// Run the outer iteration loop to completion and collect artifacts in
    /// `out_dir`. Resumable: a trainer restored from any checkpoint written
    /// here continues exactly where that checkpoint was taken.
    pub fn run(mut self, out_dir: &Path) -> Result<RunOutcome, UnmtError> {
        fs::create_dir_all(out_dir).map_err(|e| UnmtError::io(out_dir, e))?;
        let metrics_path = out_dir.join("metrics.csv");
        let mut sink = RunSink {
            out_dir: out_dir.to_path_buf(),
            metrics: MetricsWriter::new(&metrics_path)?,
            history: Vec::new(),
            checkpoints: Vec::new(),
            best_ckpt: None,
            best_ckpt_ms: f64::NEG_INFINITY,
        };
        while self.iter <= self.cfg.iterations {
            let t = self.iter;
            if !self.bt_ready {
                self.bt = if t == 1 {
                    match self.cfg.init_model {
                        InitModel::Wbw => BtSource::Wbw,
                        InitModel::Identity => BtSource::Identity,
                        InitModel::None => BtSource::None,
                    }
                } else {
                    BtSource::Neural(self.params.frozen())
                };
                self.bt_ready = true;
                let path = sink.out_dir.join(format!("ckpt-t{t}-start.bin"));
                self.write_checkpoint(&path)?;
                sink.checkpoints.push(path);
            }
            let bt_data = if self.epochs_done < self.cfg.epochs_per_iter {
                self.compute_bt()?
            } else {
                BtData::empty()
            };
            self.train_inner(t, &bt_data, &mut sink)?;
            self.iter = t + 1;
            self.epochs_done = 0;
            self.bt_ready = false;
        }
        sink.metrics.flush()?;
        if let Some(best) = &sink.best_ckpt {
            fs::copy(best, out_dir.join("best.bin")).map_err(|e| UnmtError::io(best, e))?;
        }
        Ok(RunOutcome {
            run_dir: out_dir.to_path_buf(),
            metrics_path,
            checkpoints: sink.checkpoints,
            best_checkpoint: sink.best_ckpt,
            best_ms: self.best_ms,
            history: sink.history,
            src_to_tgt: TranslationModel::new(&self.params, Lang::Src),
            tgt_to_src: TranslationModel::new(&self.params, Lang::Tgt),
            cd_skipped: self.cd_skipped,
            emb_coverage: self.emb_coverage,
        })
    }
}

/// Full unsupervised training from a config: load the data directory, build
/// the initial model, and run every outer iteration. The primary entry point.
pub fn iterate(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<RunOutcome, UnmtError> {
    let data = TrainingData::load(cfg)?;
    Trainer::new(cfg.clone(), data, threads)?.run(out_dir)
}

/// Continue a checkpointed run, writing new artifacts into `out_dir`.
pub fn resume(ckpt: &Path, out_dir: &Path, threads: usize) -> Result<RunOutcome, UnmtError> {
    Trainer::from_checkpoint(ckpt, threads)?.run(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::synth::{ReorderRule, SynthLangPair, SynthSpec};
    use crate::tensor::TensorError;

    fn tiny_arch() -> Arch {
        Arch { layers: 1, dim: 16 }
    }

    fn tiny_params(seed: u64, v_src: usize, v_tgt: usize) -> ModelParams<f32> {
        ModelParams::init(tiny_arch(), v_src, v_tgt, &mut stream(seed, "test.params"))
    }

    fn sents(raw: &[&[u32]]) -> Vec<Vec<u32>> {
        raw.iter().map(|s| s.to_vec()).collect()
    }

    /// A config with every λ on and no data directory dependence, for the
    /// loss-level tests that never touch the Trainer.
    fn loss_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::desk();
        cfg.noise_drop = 0.2;
        cfg.noise_k = 2;
        cfg
    }

    fn to_tensor_err(e: UnmtError) -> TensorError {
        TensorError::Invalid {
            op: "loss closure",
            msg: e.to_string(),
        }
    }

    /// Generate a small language pair on disk and a config pointing at it.
    fn tiny_run_setup(dir: &Path, seed: u64) -> ExperimentConfig {
        let spec = SynthSpec {
            vocab_size: 30,
            len_range: (3, 7),
            train_count: 48,
            valid_count: 12,
            test_count: 10,
            reorder: ReorderRule::AdjacentSwap,
            zipf_exponent: 1.1,
            emb_dim: 8,
            seed,
        };
        SynthLangPair::new(spec).unwrap().generate(dir).unwrap();
        let mut cfg = ExperimentConfig::desk();
        cfg.data_dir = dir.to_path_buf();
        cfg.max_len = 10;
        cfg.min_count = 0;
        cfg.pretrained_embeddings = false;
        cfg.batch_size = 8;
        cfg.iterations = 2;
        cfg.epochs_per_iter = 1;
        cfg.eval_every = 0;
        cfg.seed = seed;
        cfg
    }

    #[test]
    fn noiseless_overfit_drives_auto_loss_toward_zero() {
        let params = tiny_params(3, 12, 12);
        let data = sents(&[
            &[4, 5, 6],
            &[7, 8],
            &[9, 10, 11, 4],
            &[5, 9, 7],
        ]);
        let noise = NoiseConfig::disabled();
        let mut adam = AdamState::new(&params.tensors(), 3e-3, 0.5, 0.999, 1e-8);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..800 {
            let mut rng = stream(3, &format!("test.overfit.{step}"));
            let (loss, _) = loss_auto(&params, &data, Lang::Src, &noise, &mut rng).unwrap();
            last = loss.item() as f64;
            if step == 0 {
                first = last;
            }
            backward(&loss).unwrap();
            adam.step(&params.tensors()).unwrap();
            for t in params.tensors() {
                t.zero_grad();
            }
        }
        assert!(
            last < 0.05,
            "copy task should be driven to ~0, got {last} (start {first})"
        );
    }

    #[test]
    fn cd_with_ground_truth_pairs_reduces_to_supervised_cross_entropy() {
        let params = tiny_params(4, 14, 14);
        let xs = sents(&[&[4, 5, 6], &[7, 8], &[9, 10, 11]]);
        let ys = sents(&[&[6, 5, 4, 4], &[8, 7], &[11, 10]]);
        let noise = NoiseConfig::disabled();
        let mut rng = stream(4, "test.cd");
        let (loss, skipped) =
            loss_cd(&params, &xs, &ys, Lang::Tgt, &noise, &mut rng).unwrap();
        assert_eq!(skipped, 0);

        let batch = SeqBatch::from_sentences(&append_eos(&ys), Lang::Tgt);
        let enc = encode(&params, &batch, Lang::Tgt).unwrap();
        let tf = decode_teacher_forced(&params, &enc, Lang::Src, &xs).unwrap();
        let manual = cross_entropy_logits(&tf.logits, &tf.targets, &tf.weights).unwrap();
        let a = loss.unwrap().item();
        let b = manual.item();
        assert!(
            (a - b).abs() <= 1e-6 * b.abs().max(1.0),
            "cd loss {a} vs supervised CE {b}"
        );
    }

    #[test]
    fn empty_translations_are_skipped_with_a_count() {
        let params = tiny_params(5, 14, 14);
        let xs = sents(&[&[4, 5], &[6, 7], &[8, 9]]);
        let ys = vec![vec![5, 4], Vec::new(), Vec::new()];
        let noise = NoiseConfig::disabled();
        let mut rng = stream(5, "test.cd.skip");
        let (loss, skipped) =
            loss_cd(&params, &xs, &ys, Lang::Tgt, &noise, &mut rng).unwrap();
        assert!(loss.is_some());
        assert_eq!(skipped, 2);

        let all_empty = vec![Vec::new(), Vec::new(), Vec::new()];
        let (loss, skipped) =
            loss_cd(&params, &xs, &all_empty, Lang::Tgt, &noise, &mut rng).unwrap();
        assert!(loss.is_none());
        assert_eq!(skipped, 3);
    }

    #[test]
    fn auto_loss_gradient_passes_finite_difference_check() {
        let params: ModelParams<f64> =
            ModelParams::init(Arch { layers: 1, dim: 4 }, 8, 8, &mut stream(6, "test.gc"));
        let data = sents(&[&[4, 5], &[6, 7, 5]]);
        let noise = NoiseConfig::new(0.3, 2);
        let rng0 = stream(6, "test.gc.noise");
        let build = || {
            let mut rng = rng0.clone();
            loss_auto(&params, &data, Lang::Src, &noise, &mut rng)
                .map(|(loss, _)| loss)
                .map_err(to_tensor_err)
        };
        let err = crate::tensor::grad_check(build, &params.tensors(), 1e-5).unwrap();
        assert!(err < 1e-6, "max gradient error {err:.3e}");
    }

    #[test]
    fn all_lambdas_zero_yields_no_loss_and_single_terms_stand_alone() {
        let params = tiny_params(7, 14, 14);
        let disc = Discriminator::init(32, 8, &mut stream(7, "test.disc"));
        let batch = StepBatch {
            auto_src: sents(&[&[4, 5, 6], &[7, 8]]),
            auto_tgt: sents(&[&[4, 9], &[10, 11, 6]]),
            cd_src: Some((sents(&[&[4, 5]]), sents(&[&[5, 4]]))),
            cd_tgt: Some((sents(&[&[9, 10]]), sents(&[&[10, 9]]))),
        };
        let mut cfg = loss_cfg();
        cfg.lambda_auto = 0.0;
        cfg.lambda_cd = 0.0;
        cfg.lambda_adv = 0.0;
        let mut rng = stream(7, "test.zero");
        let out = total_loss(&params, &disc, &cfg, &batch, &mut rng).unwrap();
        assert!(out.tensor.is_none());
        assert!(out.parts.total.is_none());
        assert!(out.parts.auto_src.is_none() && out.parts.adv.is_none());

        let mut cfg = loss_cfg();
        cfg.lambda_auto = 0.0;
        cfg.lambda_adv = 0.0;
        cfg.lambda_cd = 2.0;
        let mut rng = stream(7, "test.cdonly");
        let out = total_loss(&params, &disc, &cfg, &batch, &mut rng).unwrap();
        assert!(out.parts.auto_src.is_none() && out.parts.auto_tgt.is_none());
        assert!(out.parts.cd_src.is_some() && out.parts.cd_tgt.is_some());
        let expected = 2.0 * (out.parts.cd_src.unwrap() + out.parts.cd_tgt.unwrap());
        let got = out.parts.total.unwrap();
        assert!((got - expected).abs() <= 1e-6 * got.abs().max(1.0));
    }

    #[test]
    fn doubling_lambda_auto_doubles_term_and_gradient() {
        let params = tiny_params(8, 14, 14);
        let disc = Discriminator::init(32, 8, &mut stream(8, "test.disc"));
        let batch = StepBatch {
            auto_src: sents(&[&[4, 5, 6], &[7, 8]]),
            auto_tgt: sents(&[&[4, 9], &[10, 11, 6]]),
            cd_src: None,
            cd_tgt: None,
        };
        let mut cfg = loss_cfg();
        cfg.lambda_cd = 0.0;
        cfg.lambda_adv = 0.0;
        let rng0 = stream(8, "test.double");

        cfg.lambda_auto = 1.0;
        let out1 = total_loss(&params, &disc, &cfg, &batch, &mut rng0.clone()).unwrap();
        backward(out1.tensor.as_ref().unwrap()).unwrap();
        let g1: Vec<Vec<f32>> = params
            .tensors()
            .iter()
            .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        for t in params.tensors() {
            t.zero_grad();
        }

        cfg.lambda_auto = 2.0;
        let out2 = total_loss(&params, &disc, &cfg, &batch, &mut rng0.clone()).unwrap();
        backward(out2.tensor.as_ref().unwrap()).unwrap();
        let t1 = out1.parts.total.unwrap();
        let t2 = out2.parts.total.unwrap();
        assert!((t2 - 2.0 * t1).abs() <= 1e-6 * t2.abs().max(1.0), "{t1} {t2}");
        for (t, g1t) in params.tensors().iter().zip(&g1) {
            let g2 = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
            for (a, b) in g1t.iter().zip(&g2) {
                assert!(
                    (2.0 * a - b).abs() <= 1e-5 * b.abs().max(1e-3),
                    "gradient not doubled: {a} vs {b}"
                );
            }
            t.zero_grad();
        }
    }

    /// Eq. 4: the combined objective must equal the λ-weighted sum of
    /// component losses computed independently (same RNG stream replayed).
    #[test]
    fn total_loss_decomposes_into_weighted_components() {
        let params = tiny_params(9, 14, 13);
        let disc = Discriminator::init(32, 8, &mut stream(9, "test.disc"));
        let batch = StepBatch {
            auto_src: sents(&[&[4, 5, 6], &[7, 8], &[9, 4]]),
            auto_tgt: sents(&[&[4, 9], &[10, 11, 6], &[5, 5]]),
            cd_src: Some((sents(&[&[4, 5], &[6, 7]]), sents(&[&[5, 4], &[7, 6, 6]]))),
            cd_tgt: Some((sents(&[&[9, 10], &[11, 4]]), sents(&[&[10, 9], &[4, 11]]))),
        };
        let mut cfg = loss_cfg();
        cfg.lambda_auto = 0.7;
        cfg.lambda_cd = 1.3;
        cfg.lambda_adv = 0.4;
        let rng0 = stream(9, "test.decompose");

        let total = total_loss(&params, &disc, &cfg, &batch, &mut rng0.clone())
            .unwrap()
            .parts
            .total
            .unwrap();

        // Replay the pinned draw order: src auto, tgt auto, cd src, cd tgt.
        let noise = cfg.noise();
        let mut rng = rng0.clone();
        let (a_src, enc_src) =
            loss_auto(&params, &batch.auto_src, Lang::Src, &noise, &mut rng).unwrap();
        let (a_tgt, enc_tgt) =
            loss_auto(&params, &batch.auto_tgt, Lang::Tgt, &noise, &mut rng).unwrap();
        let (xs, ys) = batch.cd_src.as_ref().unwrap();
        let (c_src, _) = loss_cd(&params, xs, ys, Lang::Tgt, &noise, &mut rng).unwrap();
        let (xs, ys) = batch.cd_tgt.as_ref().unwrap();
        let (c_tgt, _) = loss_cd(&params, xs, ys, Lang::Src, &noise, &mut rng).unwrap();
        let s = if cfg.smooth_adv_loss { cfg.adv_smoothing } else { 0.0 };
        let adv = 0.5
            * (adv_loss(&disc, &enc_src, s).unwrap().item() as f64
                + adv_loss(&disc, &enc_tgt, s).unwrap().item() as f64);
        let expected = cfg.lambda_auto * (a_src.item() as f64 + a_tgt.item() as f64)
            + cfg.lambda_cd
                * (c_src.unwrap().item() as f64 + c_tgt.unwrap().item() as f64)
            + cfg.lambda_adv * adv;
        assert!(
            (total - expected).abs() <= 1e-6 * total.abs().max(1.0),
            "total {total} vs weighted sum {expected}"
        );
    }

    #[test]
    fn paired_steps_advance_both_optimizers_and_leave_grads_clear() {
        let params = tiny_params(10, 14, 14);
        let disc = Discriminator::init(32, 8, &mut stream(10, "test.disc"));
        let mut cfg = loss_cfg();
        cfg.lr_model = 1e-3;
        let mut adam = AdamState::new(
            &params.tensors(),
            cfg.lr_model as f32,
            cfg.adam_beta1 as f32,
            0.999,
            1e-8,
        );
        let mut rms = RmsPropState::new(&disc.tensors(), cfg.lr_disc as f32, 0.99, 1e-8);
        let bt_src = sents(&[&[5, 4], &[7, 6]]);
        let before_bt = bt_src.clone();
        let batch = StepBatch {
            auto_src: sents(&[&[4, 5, 6], &[7, 8]]),
            auto_tgt: sents(&[&[4, 9], &[10, 11, 6]]),
            cd_src: Some((sents(&[&[4, 5], &[6, 7]]), bt_src)),
            cd_tgt: None,
        };
        for k in 0..3 {
            let mut rng = stream(10, &format!("test.paired.{k}"));
            let parts = paired_step(
                &params, &disc, &mut adam, &mut rms, &cfg, &batch, &mut rng, (1, 1, k),
            )
            .unwrap();
            assert!(parts.total.is_some() && parts.disc.is_some());
        }
        assert_eq!(adam.step_count(), 3);
        assert_eq!(rms.step_count(), 3);
        for t in params.tensors().iter().chain(disc.tensors().iter()) {
            assert!(t.grad().is_none(), "gradients must be cleared after a step");
        }
        // Freezing contract: the stored back-translations are plain ids and
        // cannot have been touched by three updates.
        assert_eq!(batch.cd_src.as_ref().unwrap().1, before_bt);
    }

    #[test]
    fn lambda_adv_zero_skips_discriminator_training() {
        let params = tiny_params(11, 14, 14);
        let disc = Discriminator::init(32, 8, &mut stream(11, "test.disc"));
        let before: Vec<Vec<f32>> = disc.tensors().iter().map(|t| t.to_vec()).collect();
        let mut cfg = loss_cfg();
        cfg.lambda_adv = 0.0;
        let mut adam = AdamState::new(&params.tensors(), 1e-3, 0.5, 0.999, 1e-8);
        let mut rms = RmsPropState::new(&disc.tensors(), 5e-4, 0.99, 1e-8);
        let batch = StepBatch {
            auto_src: sents(&[&[4, 5, 6]]),
            auto_tgt: sents(&[&[7, 8]]),
            cd_src: None,
            cd_tgt: None,
        };
        let mut rng = stream(11, "test.noadv");
        let parts = paired_step(
            &params, &disc, &mut adam, &mut rms, &cfg, &batch, &mut rng, (1, 1, 1),
        )
        .unwrap();
        assert!(parts.disc.is_none() && parts.adv.is_none());
        assert_eq!(rms.step_count(), 0, "no adversarial game when λ_adv = 0");
        assert_eq!(adam.step_count(), 1);
        for (t, b) in disc.tensors().iter().zip(&before) {
            assert_eq!(&t.to_vec(), b, "discriminator must be untouched");
        }
    }

    #[test]
    fn threaded_translation_matches_single_threaded_bytes() {
        let params = tiny_params(12, 20, 20);
        let model = TranslationModel::new(&params, Lang::Src);
        let sentences: Vec<Vec<u32>> = (0..9)
            .map(|i| (0..(3 + i % 4)).map(|j| 4 + ((i * 5 + j * 3) % 16) as u32).collect())
            .collect();
        let one = translate_with_threads(&model, &sentences, 1).unwrap();
        let three = translate_with_threads(&model, &sentences, 3).unwrap();
        assert_eq!(one, three);
    }

    #[test]
    fn zero_epochs_leaves_parameters_unchanged() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let mut cfg = tiny_run_setup(&data_dir, 21);
        cfg.epochs_per_iter = 0;
        cfg.iterations = 1;

        let fresh = Trainer::new(cfg.clone(), TrainingData::load(&cfg).unwrap(), 1).unwrap();
        let before: Vec<Vec<f32>> = fresh.params().tensors().iter().map(|t| t.to_vec()).collect();

        let out = iterate(&cfg, &tmp.path().join("run"), 1).unwrap();
        let after: Vec<Vec<f32>> = out
            .src_to_tgt
            .params()
            .tensors()
            .iter()
            .map(|t| t.to_vec())
            .collect();
        assert_eq!(before, after);
        let metrics = fs::read_to_string(&out.metrics_path).unwrap();
        assert_eq!(metrics.trim(), METRICS_HEADER, "no steps, no data rows");
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let cfg = tiny_run_setup(&data_dir, 22);
        let mut trainer =
            Trainer::new(cfg.clone(), TrainingData::load(&cfg).unwrap(), 1).unwrap();
        // Exercise the neural-source branch too.
        trainer.bt = BtSource::Neural(trainer.params.frozen());
        trainer.iter = 2;
        trainer.global_step = 17;
        trainer.best_ms = 3.25;

        let p1 = tmp.path().join("a.bin");
        let p2 = tmp.path().join("b.bin");
        trainer.write_checkpoint(&p1).unwrap();
        let restored = Trainer::from_checkpoint(&p1, 1).unwrap();
        restored.write_checkpoint(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());

        let ckpt = Checkpoint::load(&p1).unwrap();
        assert_eq!(ckpt.iter, 2);
        assert_eq!(ckpt.global_step, 17);
        assert_eq!(ckpt.best_ms, 3.25);
        assert!(matches!(ckpt.bt, BtSource::Neural(_)));
        assert_eq!(ckpt.config, cfg);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let cfg = tiny_run_setup(&data_dir, 23);
        let trainer = Trainer::new(cfg.clone(), TrainingData::load(&cfg).unwrap(), 1).unwrap();
        let path = tmp.path().join("ckpt.bin");
        trainer.write_checkpoint(&path).unwrap();

        let good = fs::read(&path).unwrap();
        let truncated = &good[..good.len() / 2];
        fs::write(tmp.path().join("trunc.bin"), truncated).unwrap();
        assert!(Checkpoint::load(&tmp.path().join("trunc.bin")).is_err());

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        fs::write(tmp.path().join("magic.bin"), &bad_magic).unwrap();
        assert!(Checkpoint::load(&tmp.path().join("magic.bin")).is_err());
    }

    /// The determinism replay: resume from the checkpoint written at the
    /// start of iteration 2 and compare against the uninterrupted run —
    /// both the epoch-end checkpoint bytes and the metrics rows must match.
    #[test]
    fn resume_mid_run_reproduces_uninterrupted_bytes() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let cfg = tiny_run_setup(&data_dir, 24);

        let dir_a = tmp.path().join("a");
        let out_a = iterate(&cfg, &dir_a, 1).unwrap();
        assert!(out_a.history.len() >= 2);

        let dir_b = tmp.path().join("b");
        let out_b = resume(&dir_a.join("ckpt-t2-start.bin"), &dir_b, 1).unwrap();

        let final_a = fs::read(dir_a.join("ckpt-t2-e1.bin")).unwrap();
        let final_b = fs::read(dir_b.join("ckpt-t2-e1.bin")).unwrap();
        assert_eq!(final_a, final_b, "resumed run diverged from the original");

        let rows = |p: &Path| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .filter(|l| l.starts_with("2,"))
                .map(str::to_string)
                .collect()
        };
        let a_rows = rows(&out_a.metrics_path);
        let b_rows = rows(&out_b.metrics_path);
        assert!(!a_rows.is_empty());
        assert_eq!(a_rows, b_rows, "iteration-2 metrics rows must be identical");
    }

    #[test]
    fn full_run_emits_metrics_checkpoints_and_history() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let mut cfg = tiny_run_setup(&data_dir, 25);
        cfg.iterations = 1;
        let out = iterate(&cfg, &tmp.path().join("run"), 1).unwrap();

        let metrics = fs::read_to_string(&out.metrics_path).unwrap();
        let mut lines = metrics.lines();
        assert_eq!(lines.next().unwrap(), METRICS_HEADER);
        let data_rows: Vec<&str> = lines.collect();
        assert_eq!(data_rows.len(), 48_usize.div_ceil(8));
        // Epoch end: the last row carries the evaluation columns.
        let last: Vec<&str> = data_rows.last().unwrap().split(',').collect();
        assert_eq!(last.len(), 13);
        assert!(!last[10].is_empty(), "ms_score filled at epoch end");
        assert!(!last[11].is_empty() && !last[12].is_empty(), "test BLEU filled");
        // Mid-epoch rows carry losses but no evaluation.
        let first: Vec<&str> = data_rows[0].split(',').collect();
        assert!(!first[3].is_empty() && first[10].is_empty());

        assert!(out.run_dir.join("ckpt-t1-start.bin").exists());
        assert!(out.run_dir.join("ckpt-t1-e1.bin").exists());
        assert!(out.run_dir.join("best.bin").exists());
        assert_eq!(out.history.len(), 1);
        assert!(out.best_ms.is_finite());
        assert_eq!(out.best_checkpoint.as_deref(), Some(out.run_dir.join("ckpt-t1-e1.bin").as_path()));
    }

    #[test]
    fn init_model_none_trains_without_cross_domain_terms() {
        let tmp = tempfile::tempdir().unwrap();
        let data_dir = tmp.path().join("data");
        let mut cfg = tiny_run_setup(&data_dir, 26);
        cfg.iterations = 1;
        cfg.init_model = InitModel::None;
        let out = iterate(&cfg, &tmp.path().join("run"), 1).unwrap();
        let metrics = fs::read_to_string(&out.metrics_path).unwrap();
        for row in metrics.lines().skip(1) {
            let cols: Vec<&str> = row.split(',').collect();
            assert!(cols[6].is_empty() && cols[7].is_empty(), "no cd terms: {row}");
            assert!(!cols[4].is_empty(), "auto terms still present: {row}");
        }
    }
}
