//! The adversarial game that aligns the two languages' latent spaces. A
//! position-wise discriminator is trained to tell which language an encoder
//! state came from; the encoder is simultaneously trained to fool it. At
//! the start the two latent distributions are distinguishable; as the
//! encoder wins, discriminator accuracy falls toward coin-flipping, which
//! is exactly the "shared latent space" the translation losses rely on.
//!
//!     cargo run --release --example adversarial_alignment

use unmt::adversary::{adv_loss, disc_loss, disc_predict, Discriminator};
use unmt::corpus::{Lang, SeqBatch};
use unmt::error::UnmtError;
use unmt::model::{append_eos, encode, Arch, ModelParams};
use unmt::rng::stream;
use unmt::tensor::{backward, AdamState, RmsPropState};

fn main() -> Result<(), UnmtError> {
    let arch = Arch { layers: 1, dim: 32 };
    let vocab = 40u32;
    let mut rng = stream(3, "adversary-demo");
    let params = ModelParams::<f32>::init(arch, vocab as usize, vocab as usize, &mut rng);
    // Latents are 2·dim wide (bidirectional encoder).
    let disc = Discriminator::<f32>::init(2 * arch.dim, 64, &mut rng);

    // Two synthetic "languages": ids drawn from disjoint halves of each
    // vocabulary, so the untrained encoders produce separable latents.
    let sample = |lo: u32, hi: u32, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<u32>> {
        (0..24)
            .map(|_| {
                let len = rand::Rng::gen_range(rng, 3..8);
                (0..len).map(|_| rand::Rng::gen_range(rng, lo..hi)).collect()
            })
            .collect()
    };
    let src_ids = sample(4, 20, &mut rng);
    let tgt_ids = sample(20, 36, &mut rng);
    let src_batch = SeqBatch::from_sentences(&append_eos(&src_ids), Lang::Src);
    let tgt_batch = SeqBatch::from_sentences(&append_eos(&tgt_ids), Lang::Tgt);

    let mut disc_opt = RmsPropState::new(&disc.tensors(), 1e-3, 0.99, 1e-8);
    let enc_params = params.tensors();
    let mut enc_opt = AdamState::new(&enc_params, 1e-3, 0.5, 0.999, 1e-8);

    // Accuracy of the discriminator on the two latent clouds: fraction of
    // positions whose language it calls correctly at threshold 0.5.
    let accuracy = |disc: &Discriminator<f32>| -> Result<f64, UnmtError> {
        let src_enc = encode(&params, &src_batch, Lang::Src)?;
        let tgt_enc = encode(&params, &tgt_batch, Lang::Tgt)?;
        let ps = disc_predict(disc, &src_enc.z)?; // p(tgt | z); src is class 0
        let pt = disc_predict(disc, &tgt_enc.z)?;
        let hits = ps.iter().filter(|&&p| p < 0.5).count()
            + pt.iter().filter(|&&p| p > 0.5).count();
        Ok(hits as f64 / (ps.len() + pt.len()) as f64)
    };

    // Warm-up: let the discriminator learn the initial separation, to show
    // how distinguishable the untrained encoders' latents are.
    for _ in 0..40 {
        let src_enc = encode(&params, &src_batch, Lang::Src)?;
        let tgt_enc = encode(&params, &tgt_batch, Lang::Tgt)?;
        let d = disc_loss(&disc, &src_enc, &tgt_enc, 0.0)?;
        backward(&d)?;
        disc_opt.step(&disc.tensors())?;
        disc.zero_grads();
    }
    println!("discriminator accuracy before alignment: {:.3}\n", accuracy(&disc)?);

    // Then the game proper, one step each per round — the same cadence the
    // training loop uses on every batch.
    println!("{:>5} {:>10} {:>10} {:>9}", "round", "disc loss", "enc loss", "disc acc");
    for round in 1..=200 {
        let src_enc = encode(&params, &src_batch, Lang::Src)?;
        let tgt_enc = encode(&params, &tgt_batch, Lang::Tgt)?;
        // Discriminator turn: learn to separate the (detached) latents.
        let d = disc_loss(&disc, &src_enc, &tgt_enc, 0.0)?;
        let d_val = d.item() as f64;
        backward(&d)?;
        disc_opt.step(&disc.tensors())?;
        disc.zero_grads();
        // Encoder turn: move the latents so the freshly updated but frozen
        // discriminator mislabels them (label-flipped objective).
        let a = adv_loss(&disc, &src_enc, 0.0)?
            .add(&adv_loss(&disc, &tgt_enc, 0.0)?)?
            .scale_const(0.5);
        let a_val = a.item() as f64;
        backward(&a)?;
        enc_opt.step(&enc_params)?;
        params.zero_grads();
        if round % 20 == 0 {
            println!("{round:>5} {d_val:>10.4} {a_val:>10.4} {:>9.3}", accuracy(&disc)?);
        }
    }
    println!("\nchance level is 0.5; binary cross-entropy at chance is ln 2 = 0.693");
    println!("the two players orbit that equilibrium rather than sitting on it —");
    println!("standard adversarial dynamics, kept in check during real training");
    println!("by the reconstruction losses sharing the encoder");
    Ok(())
}
