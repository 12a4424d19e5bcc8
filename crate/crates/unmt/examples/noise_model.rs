//! The corruption process behind denoising auto-encoding: independent word
//! drops plus a bounded local shuffle. Shows corrupted samples of one
//! sentence, then measures the two statistical laws the process obeys —
//! no token moves more than k positions, and the drop rate matches p_wd.
//!
//!     cargo run --release --example noise_model

use unmt::noise::{corrupt, sample_permutation, NoiseConfig};
use unmt::rng::stream;

fn main() {
    let words = [
        "the", "committee", "approved", "the", "proposal", "after", "lengthy", "debate",
    ];
    let ids: Vec<u32> = (0..words.len() as u32).collect();
    let render = |ids: &[u32]| {
        ids.iter()
            .map(|&i| words[i as usize])
            .collect::<Vec<_>>()
            .join(" ")
    };

    let cfg = NoiseConfig::standard(); // p_wd = 0.1, k = 3
    let mut rng = stream(7, "noise-demo");
    println!("clean:     {}", render(&ids));
    for i in 0..5 {
        println!("corrupt {i}: {}", render(&corrupt(&ids, &cfg, &mut rng)));
    }

    // Law 1: with alpha = k + 1 no token is displaced by more than k.
    let k = cfg.k;
    let mut worst = 0usize;
    let mut samples = 0u64;
    for len in 2..=50 {
        for _ in 0..2_000 {
            let perm = sample_permutation(len, cfg.alpha, &mut rng);
            for (pos, &orig) in perm.iter().enumerate() {
                worst = worst.max(pos.abs_diff(orig));
            }
            samples += 1;
        }
    }
    println!("\n{samples} permutations, lengths 2..=50: max displacement {worst} (bound {k})");

    // Law 2: alpha < 1 always yields the identity permutation.
    let identity = (0..10_000).all(|_| {
        let perm = sample_permutation(12, 0.5, &mut rng);
        perm.iter().enumerate().all(|(i, &p)| i == p)
    });
    println!("alpha = 0.5: identity in 10000/10000 trials: {identity}");

    // Law 3: the empirical drop rate converges to p_wd.
    let long: Vec<u32> = (0..100_000).map(|i| i % 50).collect();
    let no_shuffle = NoiseConfig {
        p_wd: cfg.p_wd,
        k: 0,
        alpha: 0.0,
    };
    let kept = corrupt(&long, &no_shuffle, &mut rng).len();
    let rate = 1.0 - kept as f64 / long.len() as f64;
    println!("drop rate over {} tokens: {rate:.4} (configured {})", long.len(), cfg.p_wd);

    // Corruption never erases a sentence outright: even a one-word input
    // survives, so the auto-encoding loss always has a target.
    let harsh = NoiseConfig {
        p_wd: 0.99,
        k: 3,
        alpha: 4.0,
    };
    let survivors = (0..1_000).filter(|_| !corrupt(&[3], &harsh, &mut rng).is_empty()).count();
    println!("one-word sentences surviving p_wd = 0.99: {survivors}/1000");
}
