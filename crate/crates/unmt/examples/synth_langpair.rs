//! Generate a synthetic language pair with known ground truth: two surface
//! vocabularies over a shared concept space, a word-order divergence rule,
//! disjoint monolingual training corpora, parallel validation/test sets, the
//! true lexicon, and aligned embeddings for bootstrapping.
//!
//!     cargo run --release --example synth_langpair

use unmt::error::UnmtError;
use unmt::synth::{ReorderRule, SynthLangPair, SynthSpec};

fn main() -> Result<(), UnmtError> {
    let spec = SynthSpec {
        vocab_size: 60,
        len_range: (3, 9),
        train_count: 400,
        valid_count: 60,
        test_count: 40,
        reorder: ReorderRule::AdjacentSwap,
        zipf_exponent: 1.1,
        emb_dim: 16,
        seed: 2024,
    };
    let dir = std::env::temp_dir().join("unmt-synth-demo");
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| UnmtError::io(&dir, e))?;
    }
    let pair = SynthLangPair::new(spec.clone())?;
    let artifacts = pair.generate(&dir)?;

    println!("wrote {}", artifacts.dir.display());
    println!(
        "train/valid/test: {}/{}/{} sentences per side",
        spec.train_count, spec.valid_count, spec.test_count
    );
    println!(
        "monolingual sides share {} sentences; unigram shape divergence {:.4}\n",
        artifacts.overlap, artifacts.unigram_tv
    );

    // The test set is parallel: line i of test.src translates line i of
    // test.tgt under the true lexicon plus the reorder rule.
    let read = |p: &std::path::Path| -> Result<Vec<String>, UnmtError> {
        Ok(std::fs::read_to_string(p)
            .map_err(|e| UnmtError::io(p, e))?
            .lines()
            .map(str::to_string)
            .collect())
    };
    let src = read(&artifacts.test_src)?;
    let tgt = read(&artifacts.test_tgt)?;
    println!("parallel test pairs:");
    for (s, t) in src.iter().zip(&tgt).take(4) {
        println!("  src: {s}");
        println!("  tgt: {t}\n");
    }

    println!("lexicon entries (true word-for-word dictionary):");
    let lex = read(&artifacts.lexicon)?;
    for line in lex.iter().take(5) {
        println!("  {line}");
    }
    println!("  ... {} entries total", lex.len());

    // Aligned embeddings: one vector per word, same concept -> same vector
    // across languages, which is what seeds word-by-word bootstrapping.
    let emb = read(&artifacts.emb_src)?;
    let (word, rest) = emb[0].split_once(' ').unwrap();
    println!(
        "\nembedding file: {} rows of dim {}; first word {word:?}",
        emb.len(),
        rest.split_whitespace().count()
    );
    Ok(())
}
