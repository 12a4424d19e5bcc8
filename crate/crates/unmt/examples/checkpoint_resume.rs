//! Checkpoints capture the complete experiment state: model and
//! discriminator weights, both optimizers' moments, the back-translation
//! source, vocabularies, config, and the position in the training schedule.
//! Randomness comes from labeled streams keyed by (seed, iteration, epoch),
//! not from a stateful generator, so resuming from a checkpoint replays the
//! exact run that would have happened — bit for bit.
//!
//!     cargo run --release --example checkpoint_resume

use unmt::config::ExperimentConfig;
use unmt::error::UnmtError;
use unmt::synth::{ReorderRule, SynthLangPair, SynthSpec};
use unmt::training::{self, Checkpoint};

fn main() -> Result<(), UnmtError> {
    let root = std::env::temp_dir().join("unmt-resume-demo");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| UnmtError::io(&root, e))?;
    }
    let data_dir = root.join("data");
    let spec = SynthSpec {
        vocab_size: 40,
        len_range: (3, 7),
        train_count: 600,
        valid_count: 80,
        test_count: 60,
        reorder: ReorderRule::AdjacentSwap,
        zipf_exponent: 1.1,
        emb_dim: 64,
        seed: 17,
    };
    SynthLangPair::new(spec)?.generate(&data_dir)?;

    let mut cfg = ExperimentConfig::desk();
    cfg.data_dir = data_dir;
    cfg.min_count = 0;
    cfg.iterations = 2;
    cfg.epochs_per_iter = 2;
    cfg.seed = 17;

    // Uninterrupted run: two outer iterations in one process.
    let full = training::iterate(&cfg, &root.join("run-a"), 1)?;
    println!("uninterrupted run finished: {} checkpoints", full.checkpoints.len());

    // Interrupted run: load the checkpoint written at the start of
    // iteration 2 — as if the process had died there — and train the rest
    // in a fresh directory.
    let ckpt_path = root.join("run-a").join("ckpt-t2-start.bin");
    let ckpt = Checkpoint::load(&ckpt_path)?;
    println!(
        "resuming from {} (iteration {}, {} epochs done, step {})",
        ckpt_path.file_name().unwrap().to_string_lossy(),
        ckpt.iter,
        ckpt.epochs_done,
        ckpt.global_step
    );
    let resumed = training::resume(&ckpt_path, &root.join("run-b"), 1)?;

    // The resumed run's final checkpoint must equal the uninterrupted one
    // byte for byte.
    let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| UnmtError::io(p, e));
    let a = read(&root.join("run-a").join("ckpt-t2-e2.bin"))?;
    let b = read(&root.join("run-b").join("ckpt-t2-e2.bin"))?;
    println!(
        "final checkpoints identical: {} ({} bytes)",
        a == b,
        a.len()
    );
    assert_eq!(a, b, "resume diverged from the uninterrupted run");

    // Metrics rows for iteration 2 agree as well (the resumed run only
    // contains iteration 2, so compare that suffix).
    let text = |p: &std::path::Path| std::fs::read_to_string(p).map_err(|e| UnmtError::io(p, e));
    let full_rows = text(&full.metrics_path)?;
    let resumed_rows = text(&resumed.metrics_path)?;
    let tail: Vec<&str> = full_rows
        .lines()
        .filter(|l| l.starts_with("2,"))
        .collect();
    let resumed_tail: Vec<&str> = resumed_rows
        .lines()
        .filter(|l| l.starts_with("2,"))
        .collect();
    println!(
        "iteration-2 metrics rows identical: {} ({} rows)",
        tail == resumed_tail,
        tail.len()
    );
    assert_eq!(tail, resumed_tail);
    Ok(())
}
