//! The three reference points every unsupervised run is judged against:
//!
//!   identity — copy the source through unchanged (the no-model floor),
//!   WBW      — word-by-word lexicon substitution, order preserved,
//!   WR       — WBW followed by language-model-guided local reordering,
//!   OWR      — WBW followed by the reference-aware best reordering, an
//!              upper bound on what reordering alone can recover.
//!
//! On a language pair whose only structural divergence is word order, these
//! four scores should come out identity <= WBW <= WR <= OWR.
//!
//!     cargo run --release --example wbw_baselines

use unmt::corpus::{Lang, MonolingualDataset, Vocabulary};
use unmt::error::UnmtError;
use unmt::evaluation::{bleu, oracle_reorder, train_lm, word_reorder, LmConfig, WR_ROUNDS};
use unmt::model::{Lexicon, Translator, WbwTranslator};
use unmt::rng::stream;
use unmt::synth::{ReorderRule, SynthLangPair, SynthSpec};

fn main() -> Result<(), UnmtError> {
    let dir = std::env::temp_dir().join("unmt-baselines-demo");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| UnmtError::io(&dir, e))?;
    }
    let spec = SynthSpec {
        vocab_size: 60,
        len_range: (3, 9),
        train_count: 1500,
        valid_count: 100,
        test_count: 150,
        reorder: ReorderRule::AdjacentSwap,
        zipf_exponent: 1.1,
        emb_dim: 16,
        seed: 5,
    };
    let artifacts = SynthLangPair::new(spec)?.generate(&dir)?;

    let src_vocab = Vocabulary::build(&artifacts.train_src, 0, Lang::Src)?;
    let tgt_vocab = Vocabulary::build(&artifacts.train_tgt, 0, Lang::Tgt)?;
    let max_len = 20;
    let test_src = MonolingualDataset::load(&artifacts.test_src, &src_vocab, max_len)?.sentences;
    let test_tgt = MonolingualDataset::load(&artifacts.test_tgt, &tgt_vocab, max_len)?.sentences;
    let train_tgt = MonolingualDataset::load(&artifacts.train_tgt, &tgt_vocab, max_len)?.sentences;

    // Identity and WBW need no training data at all (beyond the lexicon).
    let identity = WbwTranslator::identity(src_vocab.clone(), tgt_vocab.clone());
    let lex = Lexicon::load(&artifacts.lexicon)?;
    let wbw = WbwTranslator::new(lex, src_vocab.clone(), tgt_vocab.clone());
    let id_out = identity.translate_batch(&test_src)?;
    let wbw_out = wbw.translate_batch(&test_src)?;

    // WR reorders WBW output toward a target-side language model trained on
    // monolingual text only — still zero parallel supervision.
    let lm = train_lm(
        &train_tgt,
        tgt_vocab.size(),
        &LmConfig::desk(),
        &mut stream(5, "baseline.lm"),
    )?;
    let mut wr_out = Vec::with_capacity(wbw_out.len());
    for s in &wbw_out {
        wr_out.push(word_reorder(s, &lm, WR_ROUNDS)?);
    }

    // OWR peeks at the reference to pick the best permutation; no real
    // system gets this, which is what makes it an upper bound.
    let owr_out: Vec<Vec<u32>> = wbw_out
        .iter()
        .zip(&test_tgt)
        .map(|(s, r)| oracle_reorder(s, r))
        .collect();

    println!("src -> tgt corpus BLEU on {} test pairs:", test_src.len());
    for (name, out) in [
        ("identity", &id_out),
        ("wbw", &wbw_out),
        ("wr", &wr_out),
        ("owr", &owr_out),
    ] {
        let report = bleu(out, &test_tgt)?;
        println!(
            "  {name:<8} {:>6.2}  (p1 {:.3}, bp {:.3})",
            report.bleu, report.precisions[0], report.brevity_penalty
        );
    }

    // A sample, decoded back to words.
    let show = |ids: &[u32]| tgt_vocab.decode(ids).unwrap_or_default();
    println!("\nexample sentence:");
    println!("  source        {}", src_vocab.decode(&test_src[0])?);
    println!("  wbw           {}", show(&wbw_out[0]));
    println!("  wr            {}", show(&wr_out[0]));
    println!("  owr           {}", show(&owr_out[0]));
    println!("  reference     {}", show(&test_tgt[0]));
    Ok(())
}
