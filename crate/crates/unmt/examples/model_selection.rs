//! Unsupervised model selection: with no parallel validation data, rank
//! checkpoints by the round-trip criterion — translate monolingual
//! validation text to the other language and back, score the reconstruction
//! against the original with BLEU, and average the two directions. This
//! example trains briefly, then re-loads every saved checkpoint, computes
//! the selection score (monolingual only) and the true test BLEU (parallel,
//! for reporting only), and shows how well the first ranks the second.
//!
//!     cargo run --release --example model_selection

use unmt::config::ExperimentConfig;
use unmt::corpus::{Lang, MonolingualDataset, Vocabulary};
use unmt::error::UnmtError;
use unmt::evaluation::{bleu, model_selection_score, spearman};
use unmt::model::TranslationModel;
use unmt::synth::{ReorderRule, SynthLangPair, SynthSpec};
use unmt::training::{self, Checkpoint};

fn main() -> Result<(), UnmtError> {
    let root = std::env::temp_dir().join("unmt-selection-demo");
    if root.exists() {
        std::fs::remove_dir_all(&root).map_err(|e| UnmtError::io(&root, e))?;
    }
    let data_dir = root.join("data");
    let spec = SynthSpec {
        vocab_size: 50,
        len_range: (3, 8),
        train_count: 1600,
        valid_count: 120,
        test_count: 120,
        reorder: ReorderRule::AdjacentSwap,
        zipf_exponent: 1.1,
        emb_dim: 64,
        seed: 23,
    };
    let artifacts = SynthLangPair::new(spec)?.generate(&data_dir)?;

    let mut cfg = ExperimentConfig::desk();
    cfg.data_dir = data_dir.clone();
    cfg.min_count = 0;
    cfg.iterations = 2;
    cfg.epochs_per_iter = 2;
    cfg.seed = 23;
    let out = training::iterate(&cfg, &root.join("run"), training::thread_count())?;

    // Reload the corpora through the same vocabularies the run used.
    let src_vocab = Vocabulary::build(&artifacts.train_src, cfg.min_count, Lang::Src)?;
    let tgt_vocab = Vocabulary::build(&artifacts.train_tgt, cfg.min_count, Lang::Tgt)?;
    let load = |p: &std::path::Path, v: &Vocabulary| -> Result<Vec<Vec<u32>>, UnmtError> {
        Ok(MonolingualDataset::load(p, v, cfg.max_len)?.sentences)
    };
    let val_src = load(&artifacts.valid_src, &src_vocab)?;
    let val_tgt = load(&artifacts.valid_tgt, &tgt_vocab)?;
    let test_src = load(&artifacts.test_src, &src_vocab)?;
    let test_tgt = load(&artifacts.test_tgt, &tgt_vocab)?;

    println!(
        "\n{:<18} {:>14} {:>12}",
        "checkpoint", "selection (ms)", "test bleu"
    );
    let mut ms_points = Vec::new();
    let mut bleu_points = Vec::new();
    for path in &out.checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let st = TranslationModel::new(&ckpt.params, Lang::Src);
        let ts = TranslationModel::new(&ckpt.params, Lang::Tgt);
        // Selection sees only monolingual validation text.
        let ms = model_selection_score(&st, &ts, &val_src, &val_tgt)?;
        // The parallel test set plays no role in selection; it is the
        // ground truth we check the ranking against.
        let hyp_tgt = training::translate_with_threads(&st, &test_src, 1)?;
        let hyp_src = training::translate_with_threads(&ts, &test_tgt, 1)?;
        let test =
            (bleu(&hyp_tgt, &test_tgt)?.bleu + bleu(&hyp_src, &test_src)?.bleu) / 2.0;
        let name = path.file_name().unwrap().to_string_lossy();
        println!("{name:<18} {ms:>14.2} {test:>12.2}");
        ms_points.push(ms);
        bleu_points.push(test);
    }

    let rho = spearman(&ms_points, &bleu_points)?;
    println!("\nspearman(selection score, test bleu) over {} checkpoints: {rho:.3}", ms_points.len());
    println!(
        "selected checkpoint: {}",
        out.best_checkpoint
            .as_deref()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .unwrap_or_else(|| "none".into())
    );
    Ok(())
}
