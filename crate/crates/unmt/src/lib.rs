//! Unsupervised machine translation from monolingual corpora only.
//!
//! The crate trains a single shared encoder-decoder to translate between two
//! languages without any parallel sentences. Three signals hold the system up:
//!
//! * **Denoising auto-encoding** — reconstruct a sentence from a corrupted
//!   version of itself, so the latent space cannot degenerate into a copy.
//! * **Back-translation** — translate each corpus with the previous model,
//!   then train to reconstruct the original from that synthetic translation.
//! * **Adversarial alignment** — a discriminator tries to tell the two
//!   languages apart from encoder states; the encoder is trained to fool it,
//!   pulling both languages into one shared latent space.
//!
//! The whole loop, including the reverse-mode autodiff underneath the model,
//! is implemented here with no machine-learning dependencies, and every run is
//! bitwise reproducible from a seed. Start with [`synth`] to generate a toy
//! language pair, then [`training::iterate`] to run the full loop, and
//! [`evaluation`] to score it. The `examples/` directory exercises each stage.

pub mod adversary;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod noise;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::UnmtError;
