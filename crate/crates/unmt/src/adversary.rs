//! The language discriminator and the two adversarial losses.
//!
//! The discriminator is a position-wise MLP: it sees each latent vector z_j
//! independently and predicts which language produced it (0 = source,
//! 1 = target, matching the sequence-level product form of its objective).
//! Training alternates two views of the same encodings:
//!
//! * [`disc_loss`] — teach the discriminator to tell the languages apart.
//!   The latents are detached here by construction, so this loss can never
//!   move the encoder.
//! * [`adv_loss`] — teach the encoder to fool the discriminator, scoring the
//!   same latents against the flipped label through a frozen copy of the
//!   discriminator, so this loss can never move θ_D.
//!
//! Both use label smoothing s: the "true" class target is 1−s rather than 1.
//! Whether smoothing also applies to the encoder-side loss is a config
//! switch (`adv.smooth_adv_loss`); passing s = 0 recovers plain cross-entropy.

use rand_chacha::ChaCha8Rng;

use crate::corpus::Lang;
use crate::error::UnmtError;
use crate::model::{Encoded, TensorLookup};
use crate::tensor::{bce_with_logits, elem, Element, Tensor};

/// Negative-side slope of the hidden activations.
pub const LEAK: f64 = 0.2;
/// Hidden depth is architectural, not configurable: "three hidden layers".
pub const HIDDEN_LAYERS: usize = 3;

/// Clamp for reported probabilities so they stay strictly inside (0, 1).
const PROB_EPS: f64 = 1e-7;

pub struct Discriminator<T: Element = f32> {
    /// Three hidden (w, b) pairs followed by the scalar output pair.
    pub(crate) layers: Vec<(Tensor<T>, Tensor<T>)>,
    pub input_dim: usize,
    pub hidden: usize,
}

impl<T: Element> Discriminator<T> {
    pub fn init(input_dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Discriminator<T> {
        let mut layers = Vec::with_capacity(HIDDEN_LAYERS + 1);
        let mut prev = input_dim;
        for _ in 0..HIDDEN_LAYERS {
            layers.push((
                super::model::uniform_param(&[prev, hidden], rng),
                Tensor::param(vec![T::zero(); hidden], &[hidden]),
            ));
            prev = hidden;
        }
        layers.push((
            super::model::uniform_param(&[prev, 1], rng),
            Tensor::param(vec![T::zero(); 1], &[1]),
        ));
        Discriminator {
            layers,
            input_dim,
            hidden,
        }
    }

    /// Raw per-position logits, shape (positions × 1).
    pub fn logits(&self, z: &Tensor<T>) -> Result<Tensor<T>, UnmtError> {
        let mut h = z.clone();
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?.add_bias(b)?;
            if i < last {
                h = h.leaky_relu(elem(LEAK));
            }
        }
        Ok(h)
    }

    pub fn named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let name = if i < HIDDEN_LAYERS { format!("l{i}") } else { "out".into() };
            out.push((format!("disc.{name}.w"), w.clone()));
            out.push((format!("disc.{name}.b"), b.clone()));
        }
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

    /// Gradient-free copy: the adversarial loss runs through this so encoder
    /// updates can never leak into θ_D.
    pub fn frozen(&self) -> Discriminator<T> {
        Discriminator {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.detach(), b.detach()))
                .collect(),
            input_dim: self.input_dim,
            hidden: self.hidden,
        }
    }

    pub fn from_named(
        input_dim: usize,
        hidden: usize,
        lookup: &mut TensorLookup<'_, T>,
    ) -> Result<Discriminator<T>, UnmtError> {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for i in 0..HIDDEN_LAYERS {
            layers.push((
                lookup(&format!("disc.l{i}.w"), &[prev, hidden])?,
                lookup(&format!("disc.l{i}.b"), &[hidden])?,
            ));
            prev = hidden;
        }
        layers.push((lookup("disc.out.w", &[prev, 1])?, lookup("disc.out.b", &[1])?));
        Ok(Discriminator {
            layers,
            input_dim,
            hidden,
        })
    }
}

/// Per-position probability that each latent came from the target language,
/// clamped strictly inside (0, 1). PAD rows of `z` are zero vectors; their
/// entries are meaningless and excluded downstream by the encoding's mask.
pub fn disc_predict<T: Element>(
    disc: &Discriminator<T>,
    z: &Tensor<T>,
) -> Result<Vec<T>, UnmtError> {
    let logits = disc.logits(&z.detach())?;
    let lo = elem::<T>(PROB_EPS);
    let hi = T::one() - lo;
    Ok(logits
        .to_vec()
        .into_iter()
        .map(|u| {
            let p = T::one() / (T::one() + (-u).exp());
            p.max(lo).min(hi)
        })
        .collect())
}

/// Sequence-level log-probabilities: the mean of per-position ln p over each
/// sentence's real positions (the paper's product form, rescaled so the
/// score does not shrink with sentence length).
pub fn sequence_log_scores<T: Element>(probs: &[T], enc: &Encoded<T>) -> Vec<T> {
    let m = enc.positions;
    enc.lens
        .iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut s = T::zero();
            for t in 0..len {
                s = s + probs[b * m + t].ln();
            }
            s / elem::<T>(len as f64)
        })
        .collect()
}

/// Per-position weights that average the loss over real positions within a
/// sentence and over `total` sentences.
fn position_weights<T: Element>(enc: &Encoded<T>, total: usize) -> Vec<T> {
    let m = enc.positions;
    let mut w = vec![T::zero(); enc.batch * m];
    for (b, &len) in enc.lens.iter().enumerate() {
        let per = T::one() / elem::<T>((len * total) as f64);
        for t in 0..len {
            w[b * m + t] = per;
        }
    }
    w
}

/// Discriminator training loss on one src batch and one tgt batch, with
/// smoothed targets (1−s for the true class). The latents are detached, so
/// the gradient exists only on θ_D.
pub fn disc_loss<T: Element>(
    disc: &Discriminator<T>,
    src: &Encoded<T>,
    tgt: &Encoded<T>,
    smoothing: f64,
) -> Result<Tensor<T>, UnmtError> {
    debug_assert_eq!(src.lang, Lang::Src);
    debug_assert_eq!(tgt.lang, Lang::Tgt);
    let total = src.batch + tgt.batch;
    let s = elem::<T>(smoothing);
    let l_src = {
        let logits = disc.logits(&src.z.detach())?;
        let targets = vec![s; src.batch * src.positions]; // true class 0
        bce_with_logits(&logits, &targets, &position_weights(src, total))?
    };
    let l_tgt = {
        let logits = disc.logits(&tgt.z.detach())?;
        let targets = vec![T::one() - s; tgt.batch * tgt.positions]; // true class 1
        bce_with_logits(&logits, &targets, &position_weights(tgt, total))?
    };
    Ok(l_src.add(&l_tgt)?)
}

/// Encoder-side adversarial loss: score the live latents against the flipped
/// label through a frozen copy of the discriminator. The gradient reaches the
/// encoder stack and embeddings, never θ_D.
pub fn adv_loss<T: Element>(
    disc: &Discriminator<T>,
    enc: &Encoded<T>,
    smoothing: f64,
) -> Result<Tensor<T>, UnmtError> {
    let s = elem::<T>(smoothing);
    let flipped = match enc.lang {
        Lang::Src => T::one() - s, // pretend these were target-language latents
        Lang::Tgt => s,
    };
    let logits = disc.frozen().logits(&enc.z)?;
    let targets = vec![flipped; enc.batch * enc.positions];
    Ok(bce_with_logits(
        &logits,
        &targets,
        &position_weights(enc, enc.batch),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SeqBatch;
    use crate::model::{append_eos, encode, Arch, ModelParams};
    use crate::rng::stream;
    use crate::tensor::backward;

    fn disc_of(input_dim: usize, hidden: usize, seed: u64) -> Discriminator<f64> {
        Discriminator::init(input_dim, hidden, &mut stream(seed, "init.disc"))
    }

    fn zeroed(disc: &Discriminator<f64>) {
        for t in disc.tensors() {
            t.set_value(&vec![0.0; t.numel()]);
        }
    }

    /// Wrap raw latent rows in an Encoded so the loss helpers can be driven
    /// directly, lens all equal to 1 (one position per "sentence").
    fn enc_from_rows(rows: Vec<Vec<f64>>, lang: Lang) -> Encoded<f64> {
        let b = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Encoded {
            lang,
            z: Tensor::param(flat, &[b, d]),
            final_state: Tensor::zeros(&[b, d]),
            batch: b,
            positions: 1,
            lens: vec![1; b],
            attn_bias: Tensor::zeros(&[b, 1]),
            mask_flat: vec![1.0; b],
        }
    }

    #[test]
    fn zero_discriminator_predicts_half_and_ln2_losses() {
        let disc = disc_of(4, 8, 1);
        zeroed(&disc);
        let src = enc_from_rows(vec![vec![1.0, -2.0, 0.5, 3.0]], Lang::Src);
        let tgt = enc_from_rows(vec![vec![-1.0, 2.0, 5.0, -0.5]], Lang::Tgt);
        let p = disc_predict(&disc, &src.z).unwrap();
        assert!(p.iter().all(|&x| x == 0.5));
        // At p = 0.5 the smoothed target is irrelevant: loss is ln 2.
        let ld = disc_loss(&disc, &src, &tgt, 0.1).unwrap().item();
        assert!((ld - std::f64::consts::LN_2).abs() < 1e-12);
        let la = adv_loss(&disc, &src, 0.1).unwrap().item();
        assert!((la - std::f64::consts::LN_2).abs() < 1e-12);
    }

    /// Drive the discriminator to its smoothing-optimal outputs
    /// (p = 0.1 on src, p = 0.9 on tgt): L_D = −[0.9·ln 0.9 + 0.1·ln 0.1].
    #[test]
    fn optimally_separated_loss_matches_closed_form() {
        let disc = disc_of(1, 1, 2);
        // All weights 1, biases 0: logits(z) = z for z ≥ 0, LEAK³·z for z < 0.
        for t in disc.tensors() {
            t.set_value(&vec![1.0; t.numel()]);
        }
        for (_, b) in disc.named().iter().filter(|(n, _)| n.ends_with(".b")) {
            b.set_value(&vec![0.0; b.numel()]);
        }
        let want = (0.9f64 / 0.1).ln(); // logit whose sigmoid is 0.9
        let src = enc_from_rows(vec![vec![-want / LEAK.powi(3)]], Lang::Src);
        let tgt = enc_from_rows(vec![vec![want]], Lang::Tgt);
        let p_src = disc_predict(&disc, &src.z).unwrap()[0];
        let p_tgt = disc_predict(&disc, &tgt.z).unwrap()[0];
        assert!((p_src - 0.1).abs() < 1e-9);
        assert!((p_tgt - 0.9).abs() < 1e-9);
        let ld = disc_loss(&disc, &src, &tgt, 0.1).unwrap().item();
        let closed = -(0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((ld - closed).abs() < 1e-9, "{ld} vs {closed}");
        assert!((closed - 0.3251).abs() < 1e-4);
    }

    #[test]
    fn zero_smoothing_is_plain_cross_entropy() {
        let disc = disc_of(3, 8, 3);
        let src = enc_from_rows(vec![vec![0.3, -0.2, 0.9], vec![1.0, 0.1, -0.4]], Lang::Src);
        let tgt = enc_from_rows(vec![vec![-0.7, 0.4, 0.2]], Lang::Tgt);
        let ld = disc_loss(&disc, &src, &tgt, 0.0).unwrap().item();
        // Manual: −mean over the three positions of ln p(true class).
        let ps = disc_predict(&disc, &src.z).unwrap();
        let pt = disc_predict(&disc, &tgt.z).unwrap();
        let manual =
            (-(1.0 - ps[0]).ln() - (1.0 - ps[1]).ln() - pt[0].ln()) / 3.0;
        assert!((ld - manual).abs() < 1e-9);
    }

    /// adv_loss must equal the discriminator-style loss evaluated with
    /// swapped labels on the same latents.
    #[test]
    fn label_flip_identity() {
        let disc = disc_of(3, 8, 4);
        let rows = vec![vec![0.5, -1.0, 0.25], vec![-0.3, 0.8, 0.0]];
        let src = enc_from_rows(rows.clone(), Lang::Src);
        let s = 0.1;
        let la = adv_loss(&disc, &src, s).unwrap().item();
        let ps = disc_predict(&disc, &src.z).unwrap();
        // Flipped target for src is 1−s: −[(1−s)·ln p + s·ln(1−p)] per position.
        let manual: f64 = rows
            .iter()
            .enumerate()
            .map(|(i, _)| -((1.0 - s) * ps[i].ln() + s * (1.0 - ps[i]).ln()))
            .sum::<f64>()
            / rows.len() as f64;
        assert!((la - manual).abs() < 1e-9);
    }

    #[test]
    fn gradient_isolation_between_losses() {
        let arch = Arch { layers: 1, dim: 6 };
        let params = ModelParams::<f64>::init(arch, 10, 10, &mut stream(5, "init.params"));
        let disc = disc_of(12, 8, 5);
        let sents = vec![vec![4u32, 5, 6], vec![7, 8]];
        let framed = append_eos(&sents);
        let src = encode(
            &params,
            &SeqBatch::from_sentences(&framed, Lang::Src),
            Lang::Src,
        )
        .unwrap();
        let tgt = encode(
            &params,
            &SeqBatch::from_sentences(&framed, Lang::Tgt),
            Lang::Tgt,
        )
        .unwrap();

        // Discriminator update direction: only θ_D receives gradient.
        let ld = disc_loss(&disc, &src, &tgt, 0.1).unwrap();
        backward(&ld).unwrap();
        assert!(disc.tensors().iter().all(|t| t.grad().is_some()));
        assert!(params.tensors().iter().all(|t| t.grad().is_none()));
        disc.zero_grads();

        // Encoder update direction: θ_D untouched, encoder side populated.
        let la = adv_loss(&disc, &src, 0.1).unwrap();
        backward(&la).unwrap();
        assert!(disc.tensors().iter().all(|t| t.grad().is_none()));
        assert!(params.emb(Lang::Src).grad().is_some());
        assert!(params.named().iter().any(|(n, t)| n.starts_with("enc.") && t.grad().is_some()));
        // Decoder-side parameters are not on the adversarial path.
        assert!(params
            .named()
            .iter()
            .filter(|(n, _)| n.starts_with("dec.") || n.starts_with("out."))
            .all(|(_, t)| t.grad().is_none()));
    }

    #[test]
    fn pad_positions_do_not_change_sequence_scores() {
        let arch = Arch { layers: 1, dim: 6 };
        let params = ModelParams::<f64>::init(arch, 10, 10, &mut stream(6, "init.params"));
        let disc = disc_of(12, 8, 6);
        let short = vec![4u32, 5];
        // Encode the sentence alone, then padded next to a longer one.
        let alone = encode(
            &params,
            &SeqBatch::from_sentences(&append_eos(std::slice::from_ref(&short)), Lang::Src),
            Lang::Src,
        )
        .unwrap();
        let padded = encode(
            &params,
            &SeqBatch::from_sentences(
                &append_eos(&[short, vec![6, 7, 8, 9, 6, 7]]),
                Lang::Src,
            ),
            Lang::Src,
        )
        .unwrap();
        let sa = sequence_log_scores(&disc_predict(&disc, &alone.z).unwrap(), &alone);
        let sp = sequence_log_scores(&disc_predict(&disc, &padded.z).unwrap(), &padded);
        assert!((sa[0] - sp[0]).abs() < 1e-12);
        // Single-position sequence: score equals the position's ln p.
        let single = enc_from_rows(vec![vec![0.1; 12]], Lang::Src);
        let p = disc_predict(&disc, &single.z).unwrap();
        let s = sequence_log_scores(&p, &single);
        assert!((s[0] - p[0].ln()).abs() < 1e-12);
    }
}
