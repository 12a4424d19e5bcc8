//! Deterministic synthetic language pairs with a known ground truth.
//!
//! Two artificial languages share a generating process — Zipf-weighted
//! unigrams blended with per-word successor templates — but use disjoint
//! surface vocabularies. A bijective lexicon plus a fixed reordering rule
//! maps one to the other exactly, so for any generated sentence the true
//! translation is computable: unsupervised claims become checkable with real
//! BLEU, no human data involved.
//!
//! The monolingual training sides are drawn from independent RNG streams
//! (the same process, different draws), so the two corpora match in
//! distribution while sharing no sentence content. Validation and test sets
//! are drawn separately and emitted with aligned references.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Lang, Vocabulary, UNK};
use crate::error::UnmtError;
use crate::model::{Lexicon, Translator};
use crate::rng::stream;

/// Fan-out of the per-word successor templates.
const SUCCESSORS: usize = 3;

/// Probability that the next token follows the previous token's template
/// rather than being a fresh Zipf draw.
const BIGRAM_P: f64 = 0.6;

/// Syllable inventories for the two surface vocabularies. Source words are
/// built from two-letter syllables and target words from three-letter ones,
/// so no string can belong to both languages.
const SRC_SYLLABLES: [&str; 10] = ["ka", "ro", "mi", "tu", "se", "na", "lo", "vi", "pa", "du"];
const TGT_SYLLABLES: [&str; 10] = ["zun", "pel", "gri", "daf", "bor", "hew", "yat", "kof", "ceb", "qis"];

/// How the target side permutes word order relative to the source.
///
/// Every rule is an involution — applying it twice restores the input — so
/// it serves as its own inverse for the reverse translation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorderRule {
    /// Word order carries over unchanged.
    None,
    /// Swap positions (2i, 2i+1); a lone trailing token stays put.
    AdjacentSwap,
    /// Reverse each consecutive block of `w` tokens (the final partial block
    /// included).
    BlockReverse(usize),
}

impl ReorderRule {
    pub fn apply<T>(&self, xs: &mut [T]) {
        match *self {
            ReorderRule::None => {}
            ReorderRule::AdjacentSwap => {
                for pair in xs.chunks_mut(2) {
                    if pair.len() == 2 {
                        pair.swap(0, 1);
                    }
                }
            }
            ReorderRule::BlockReverse(w) => {
                for block in xs.chunks_mut(w) {
                    block.reverse();
                }
            }
        }
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::None => write!(f, "none"),
            ReorderRule::AdjacentSwap => write!(f, "adjacent-swap"),
            ReorderRule::BlockReverse(w) => write!(f, "block-reverse({w})"),
        }
    }
}

impl std::str::FromStr for ReorderRule {
    type Err = UnmtError;

    fn from_str(s: &str) -> Result<ReorderRule, UnmtError> {
        if s == "none" {
            return Ok(ReorderRule::None);
        }
        if s == "adjacent-swap" {
            return Ok(ReorderRule::AdjacentSwap);
        }
        if let Some(w) = s
            .strip_prefix("block-reverse(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let w: usize = w
                .parse()
                .map_err(|_| UnmtError::Config(format!("bad block width in {s:?}")))?;
            if w == 0 {
                return Err(UnmtError::Config("block width must be at least 1".into()));
            }
            return Ok(ReorderRule::BlockReverse(w));
        }
        Err(UnmtError::Config(format!(
            "unknown reorder rule {s:?} (none | adjacent-swap | block-reverse(W))"
        )))
    }
}

/// Everything needed to regenerate one language pair deterministically.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    /// Words per language.
    pub vocab_size: usize,
    /// Inclusive sentence-length bounds.
    pub len_range: (usize, usize),
    /// Monolingual training sentences per side.
    pub train_count: usize,
    /// Held-out aligned validation pairs (used unpaired during training).
    pub valid_count: usize,
    /// Held-out aligned test pairs.
    pub test_count: usize,
    pub reorder: ReorderRule,
    /// Zipf exponent for the unigram weights.
    pub zipf_exponent: f64,
    /// Width of the emitted embedding vectors.
    pub emb_dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// The desk-scale pair the end-to-end runs use.
    pub fn desk(seed: u64) -> SynthSpec {
        SynthSpec {
            vocab_size: 100,
            len_range: (3, 10),
            train_count: 5_000,
            valid_count: 400,
            test_count: 500,
            reorder: ReorderRule::AdjacentSwap,
            zipf_exponent: 1.1,
            emb_dim: 64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), UnmtError> {
        if self.vocab_size < 10 {
            return Err(UnmtError::Config(format!(
                "vocab_size {} below the minimum of 10",
                self.vocab_size
            )));
        }
        if self.len_range.0 < 1 || self.len_range.0 > self.len_range.1 {
            return Err(UnmtError::Config(format!(
                "bad sentence length range {:?}",
                self.len_range
            )));
        }
        if self.train_count < 1 || self.valid_count < 1 || self.test_count < 1 {
            return Err(UnmtError::Config("all sentence counts must be ≥ 1".into()));
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent <= 0.0 {
            return Err(UnmtError::Config(format!(
                "zipf exponent must be positive, got {}",
                self.zipf_exponent
            )));
        }
        if self.emb_dim == 0 {
            return Err(UnmtError::Config("emb_dim must be ≥ 1".into()));
        }
        if let ReorderRule::BlockReverse(0) = self.reorder {
            return Err(UnmtError::Config("block width must be at least 1".into()));
        }
        Ok(())
    }
}

/// File paths written by [`SynthLangPair::generate`].
#[derive(Debug, Clone)]
pub struct SynthArtifacts {
    pub dir: PathBuf,
    pub train_src: PathBuf,
    pub train_tgt: PathBuf,
    pub valid_src: PathBuf,
    pub valid_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
    pub lexicon: PathBuf,
    pub emb_src: PathBuf,
    pub emb_tgt: PathBuf,
    /// Sentences appearing verbatim in both monolingual sides (always 0 —
    /// checked at generation time).
    pub overlap: usize,
    /// Total-variation distance between the two sides' unigram
    /// distributions, compared through the lexicon.
    pub unigram_tv: f64,
}

impl SynthArtifacts {
    /// The artifact layout inside `dir`, without generating anything.
    pub fn layout(dir: &Path) -> SynthArtifacts {
        SynthArtifacts {
            dir: dir.to_path_buf(),
            train_src: dir.join("train.src"),
            train_tgt: dir.join("train.tgt"),
            valid_src: dir.join("valid.src"),
            valid_tgt: dir.join("valid.tgt"),
            test_src: dir.join("test.src"),
            test_tgt: dir.join("test.tgt"),
            lexicon: dir.join("lexicon.tsv"),
            emb_src: dir.join("emb.src.vec"),
            emb_tgt: dir.join("emb.tgt.vec"),
            overlap: 0,
            unigram_tv: f64::NAN,
        }
    }
}

/// A fully materialized language pair: vocabularies, lexicon, templates.
#[derive(Debug, Clone)]
pub struct SynthLangPair {
    pub spec: SynthSpec,
    src_words: Vec<String>,
    tgt_words: Vec<String>,
    /// src index → tgt index (a permutation) and its inverse.
    src_to_tgt: Vec<usize>,
    tgt_to_src: Vec<usize>,
    src_index: HashMap<String, usize>,
    tgt_index: HashMap<String, usize>,
    /// Per-word successor templates, in source index space.
    successors: Vec<[usize; SUCCESSORS]>,
    /// Unnormalized Zipf CDF over ranks.
    zipf_cdf: Vec<f64>,
}

fn make_words(syllables: &[&str], count: usize) -> Vec<String> {
    (0..count)
        .map(|i| {
            if count <= 100 {
                format!("{}{}", syllables[i / 10], syllables[i % 10])
            } else {
                format!(
                    "{}{}{}",
                    syllables[i / 100 % 10],
                    syllables[i / 10 % 10],
                    syllables[i % 10]
                )
            }
        })
        .collect()
}

impl SynthLangPair {
    pub fn new(spec: SynthSpec) -> Result<SynthLangPair, UnmtError> {
        spec.validate()?;
        let v = spec.vocab_size;
        if v > 1000 {
            return Err(UnmtError::Config(format!(
                "vocab_size {v} exceeds the synthesizable maximum of 1000"
            )));
        }
        let src_words = make_words(&SRC_SYLLABLES, v);
        let tgt_words = make_words(&TGT_SYLLABLES, v);
        let shared: Vec<&String> = src_words.iter().filter(|w| tgt_words.contains(w)).collect();
        if !shared.is_empty() {
            return Err(UnmtError::Contract(format!(
                "surface vocabularies overlap: {shared:?}"
            )));
        }

        // The lexicon pairs src rank i with a seeded permutation of tgt
        // ranks, so alignment is not positional.
        let mut src_to_tgt: Vec<usize> = (0..v).collect();
        let mut rng = stream(spec.seed, "synth.lexicon");
        for i in (1..v).rev() {
            let j = rng.gen_range(0..=i);
            src_to_tgt.swap(i, j);
        }
        let mut tgt_to_src = vec![0usize; v];
        for (s, &t) in src_to_tgt.iter().enumerate() {
            tgt_to_src[t] = s;
        }

        let zipf_cdf: Vec<f64> = (1..=v)
            .scan(0.0, |acc, r| {
                *acc += (r as f64).powf(-spec.zipf_exponent);
                Some(*acc)
            })
            .collect();

        let mut tmpl_rng = stream(spec.seed, "synth.templates");
        let mut successors = Vec::with_capacity(v);
        let mut pair = SynthLangPair {
            src_index: src_words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i))
                .collect(),
            tgt_index: tgt_words
                .iter()
                .enumerate()
                .map(|(i, w)| (w.clone(), i))
                .collect(),
            spec,
            src_words,
            tgt_words,
            src_to_tgt,
            tgt_to_src,
            successors: Vec::new(),
            zipf_cdf,
        };
        for _ in 0..v {
            let mut s = [0usize; SUCCESSORS];
            for slot in &mut s {
                *slot = pair.sample_zipf(&mut tmpl_rng);
            }
            successors.push(s);
        }
        pair.successors = successors;
        Ok(pair)
    }

    pub fn src_words(&self) -> &[String] {
        &self.src_words
    }

    pub fn tgt_words(&self) -> &[String] {
        &self.tgt_words
    }

    /// The ground-truth lexicon, source → target, in source rank order.
    pub fn lexicon(&self) -> Lexicon {
        let mut lex = Lexicon::new();
        for (i, w) in self.src_words.iter().enumerate() {
            lex.insert(w.clone(), self.tgt_words[self.src_to_tgt[i]].clone());
        }
        lex
    }

    fn sample_zipf(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.zipf_cdf.last().expect("vocab is non-empty");
        let u = rng.gen_range(0.0..total);
        self.zipf_cdf
            .partition_point(|&c| c <= u)
            .min(self.zipf_cdf.len() - 1)
    }

    /// One sentence in source index space.
    fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let (lo, hi) = self.spec.len_range;
        let len = rng.gen_range(lo..=hi);
        let mut toks: Vec<usize> = Vec::with_capacity(len);
        for k in 0..len {
            let pick_template = k > 0 && rng.gen_bool(BIGRAM_P);
            let t = if pick_template {
                self.successors[toks[k - 1]][rng.gen_range(0..SUCCESSORS)]
            } else {
                self.sample_zipf(rng)
            };
            toks.push(t);
        }
        toks
    }

    fn src_surface(&self, idxs: &[usize]) -> Vec<String> {
        idxs.iter().map(|&i| self.src_words[i].clone()).collect()
    }

    /// Map a sentence in source index space to target surface words:
    /// lexicon substitution, then the reorder rule.
    fn tgt_surface(&self, idxs: &[usize]) -> Vec<String> {
        let mut out: Vec<String> = idxs
            .iter()
            .map(|&i| self.tgt_words[self.src_to_tgt[i]].clone())
            .collect();
        self.spec.reorder.apply(&mut out);
        out
    }

    /// The exact reference translation of `words`, which must all belong to
    /// the side named by `from`.
    ///
    /// Substitution and reordering commute (one acts on tokens, the other on
    /// positions), and the reorder rule is an involution, so the same
    /// substitute-then-reorder recipe is exact in both directions and the
    /// round trip is the identity.
    pub fn ground_truth_translate(
        &self,
        words: &[String],
        from: Lang,
    ) -> Result<Vec<String>, UnmtError> {
        let (index, out_words, map): (_, _, &[usize]) = match from {
            Lang::Src => (&self.src_index, &self.tgt_words, &self.src_to_tgt),
            Lang::Tgt => (&self.tgt_index, &self.src_words, &self.tgt_to_src),
        };
        let mut out = Vec::with_capacity(words.len());
        for w in words {
            let &i = index.get(w.as_str()).ok_or_else(|| {
                UnmtError::Contract(format!("word {w:?} is not in the {from:?} vocabulary"))
            })?;
            out.push(out_words[map[i]].clone());
        }
        self.spec.reorder.apply(&mut out);
        Ok(out)
    }

    /// Write every artifact under `dir` (creating it if needed) and run the
    /// generation-time checks.
    pub fn generate(&self, dir: &Path) -> Result<SynthArtifacts, UnmtError> {
        fs::create_dir_all(dir).map_err(|e| UnmtError::io(dir, e))?;
        let mut art = SynthArtifacts::layout(dir);

        let mut src_counts = vec![0u64; self.spec.vocab_size];
        let mut tgt_counts = vec![0u64; self.spec.vocab_size];

        // Monolingual training sides: independent streams of the same
        // process, so distributions match but sentences do not.
        let mut rng = stream(self.spec.seed, "synth.train.src");
        let mut src_lines = Vec::with_capacity(self.spec.train_count);
        for _ in 0..self.spec.train_count {
            let s = self.sample_sentence(&mut rng);
            for &i in &s {
                src_counts[i] += 1;
            }
            src_lines.push(self.src_surface(&s).join(" "));
        }

        let mut rng = stream(self.spec.seed, "synth.train.tgt");
        let mut tgt_lines = Vec::with_capacity(self.spec.train_count);
        for _ in 0..self.spec.train_count {
            let s = self.sample_sentence(&mut rng);
            for &i in &s {
                tgt_counts[i] += 1;
            }
            tgt_lines.push(self.tgt_surface(&s).join(" "));
        }

        let src_set: HashSet<&str> = src_lines.iter().map(String::as_str).collect();
        art.overlap = tgt_lines
            .iter()
            .filter(|l| src_set.contains(l.as_str()))
            .count();
        if art.overlap > 0 {
            return Err(UnmtError::Contract(format!(
                "{} sentences appear verbatim in both monolingual sides",
                art.overlap
            )));
        }
        art.unigram_tv = total_variation(&src_counts, &tgt_counts);

        write_lines(&art.train_src, &src_lines)?;
        write_lines(&art.train_tgt, &tgt_lines)?;

        // Validation and test: fresh draws, emitted with exact references.
        for (label, count, src_path, tgt_path) in [
            ("synth.valid", self.spec.valid_count, &art.valid_src, &art.valid_tgt),
            ("synth.test", self.spec.test_count, &art.test_src, &art.test_tgt),
        ] {
            let mut rng = stream(self.spec.seed, label);
            let mut src = Vec::with_capacity(count);
            let mut tgt = Vec::with_capacity(count);
            for _ in 0..count {
                let s = self.sample_sentence(&mut rng);
                src.push(self.src_surface(&s).join(" "));
                tgt.push(self.tgt_surface(&s).join(" "));
            }
            write_lines(src_path, &src)?;
            write_lines(tgt_path, &tgt)?;
        }

        let lex_lines: Vec<String> = self
            .src_words
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{w}\t{}", self.tgt_words[self.src_to_tgt[i]]))
            .collect();
        write_lines(&art.lexicon, &lex_lines)?;

        self.write_embeddings(&art.emb_src, &art.emb_tgt)?;
        Ok(art)
    }

    /// Aligned embeddings: translation pairs share a base vector plus small
    /// independent jitter, standing in for pretrained cross-lingual vectors.
    fn write_embeddings(&self, src_path: &Path, tgt_path: &Path) -> Result<(), UnmtError> {
        let d = self.spec.emb_dim;
        let mut base_rng = stream(self.spec.seed, "synth.emb.base");
        let bases: Vec<Vec<f64>> = (0..self.spec.vocab_size)
            .map(|_| (0..d).map(|_| base_rng.gen_range(-0.1..0.1)).collect())
            .collect();
        for (path, words, to_base, label) in [
            (src_path, &self.src_words, None, "synth.emb.src"),
            (tgt_path, &self.tgt_words, Some(&self.tgt_to_src), "synth.emb.tgt"),
        ] {
            let mut jitter = stream(self.spec.seed, label);
            let lines: Vec<String> = words
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let base = &bases[to_base.map_or(i, |m| m[i])];
                    let comps: Vec<String> = base
                        .iter()
                        .map(|b| format!("{:.6}", b + jitter.gen_range(-0.02..0.02)))
                        .collect();
                    format!("{w} {}", comps.join(" "))
                })
                .collect();
            write_lines(path, &lines)?;
        }
        Ok(())
    }

    /// The ground truth lifted to id space, for scoring real models against
    /// a perfect one. UNK maps to UNK (an id-level sentence may contain it);
    /// any other reserved id is a contract error.
    pub fn oracle_translator(
        &self,
        from: Lang,
        from_vocab: &Vocabulary,
        to_vocab: &Vocabulary,
    ) -> GroundTruthTranslator {
        GroundTruthTranslator {
            pair: self.clone(),
            from,
            from_vocab: from_vocab.clone(),
            to_vocab: to_vocab.clone(),
        }
    }
}

/// [`Translator`] adapter over [`SynthLangPair::ground_truth_translate`].
pub struct GroundTruthTranslator {
    pair: SynthLangPair,
    from: Lang,
    from_vocab: Vocabulary,
    to_vocab: Vocabulary,
}

impl Translator for GroundTruthTranslator {
    fn translate_batch(&self, sentences: &[Vec<u32>]) -> Result<Vec<Vec<u32>>, UnmtError> {
        let (index, out_words, map): (_, _, &[usize]) = match self.from {
            Lang::Src => (&self.pair.src_index, &self.pair.tgt_words, &self.pair.src_to_tgt),
            Lang::Tgt => (&self.pair.tgt_index, &self.pair.src_words, &self.pair.tgt_to_src),
        };
        let mut out = Vec::with_capacity(sentences.len());
        for s in sentences {
            // Substitute ids word-by-word (UNK passes through), then apply
            // the reorder rule — same recipe as the surface form.
            let mut ids = Vec::with_capacity(s.len());
            for &id in s {
                if id == UNK {
                    ids.push(UNK);
                    continue;
                }
                let w = self.from_vocab.word_of(id)?;
                let &i = index.get(w).ok_or_else(|| {
                    UnmtError::Contract(format!(
                        "word {w:?} is not in the {:?} vocabulary",
                        self.from
                    ))
                })?;
                ids.push(self.to_vocab.id_of(&out_words[map[i]]));
            }
            self.pair.spec.reorder.apply(&mut ids);
            out.push(ids);
        }
        Ok(out)
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), UnmtError> {
    let mut text = lines.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| UnmtError::io(path, e))
}

/// Total-variation distance between two empirical unigram distributions,
/// index-aligned.
fn total_variation(a: &[u64], b: &[u64]) -> f64 {
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / ta - y as f64 / tb).abs())
        .sum::<f64>()
        / 2.0
}
