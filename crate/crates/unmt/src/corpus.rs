//! Vocabulary construction, tokenization, batching, and file ingestion for
//! the two monolingual datasets.
//!
//! Input is pre-tokenized text, one sentence per line; tokenization here is
//! lowercasing plus whitespace splitting, nothing more. Each language gets
//! its own vocabulary with four reserved ids — padding, unknown, a
//! language-dependent start symbol, and end-of-sentence — ahead of corpus
//! words ordered by descending count.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::UnmtError;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
/// Start symbol. The id is shared, but each language embeds it through its
/// own lookup table, which is what makes the start symbol language-dependent.
pub const SOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<sos>", "<eos>"];

/// Default load-time cap: longer sentences are dropped, not truncated.
pub const DEFAULT_MAX_LEN: usize = 50;

/// A corpus encoded as vocabulary ids, one vector per sentence.
pub type IdCorpus = Vec<Vec<u32>>;

/// Two id corpora aligned line by line (originals and their counterparts).
pub type AlignedIds = (IdCorpus, IdCorpus);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lang {
    Src,
    Tgt,
}

impl Lang {
    pub fn other(self) -> Lang {
        match self {
            Lang::Src => Lang::Tgt,
            Lang::Tgt => Lang::Src,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Lang::Src => "src",
            Lang::Tgt => "tgt",
        }
    }
}

impl fmt::Display for Lang {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Lowercase and whitespace-split one line.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect()
}

#[derive(Clone)]
pub struct Vocabulary {
    pub lang: Lang,
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
}

impl Vocabulary {
    /// Build from a corpus file: words occurring strictly more than
    /// `min_count` times get ids from 4 upward, ordered by descending count
    /// and then lexicographically.
    pub fn build(path: &Path, min_count: usize, lang: Lang) -> Result<Vocabulary, UnmtError> {
        let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in text.lines() {
            for w in tokenize(line) {
                any = true;
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(UnmtError::Corpus(format!(
                "empty corpus: {} has no tokens",
                path.display()
            )));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            // A literal reserved surface form in the corpus cannot take a
            // regular id; it will encode to UNK like any other OOV word.
            .filter(|(w, c)| *c > min_count && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|(wa, ca), (wb, cb)| cb.cmp(ca).then_with(|| wa.cmp(wb)));
        Ok(Vocabulary::from_words(
            words.into_iter().map(|(w, _)| w),
            lang,
        ))
    }

    /// Assemble a vocabulary from an already-ordered word list (ids assigned
    /// from 4 in iteration order). Used by `build` and by checkpoint loading.
    pub fn from_words(words: impl IntoIterator<Item = String>, lang: Lang) -> Vocabulary {
        let mut id_to_word: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut word_to_id = HashMap::new();
        for w in words {
            word_to_id.insert(w.clone(), id_to_word.len() as u32);
            id_to_word.push(w);
        }
        Vocabulary {
            lang,
            word_to_id,
            id_to_word,
        }
    }

    pub fn size(&self) -> usize {
        self.id_to_word.len()
    }

    /// Id of a word, or UNK if out of vocabulary.
    pub fn id_of(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK)
    }

    pub fn word_of(&self, id: u32) -> Result<&str, UnmtError> {
        self.id_to_word
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or_else(|| {
                UnmtError::Corpus(format!(
                    "id {id} out of range for {} vocabulary of size {}",
                    self.lang,
                    self.size()
                ))
            })
    }

    /// Words in id order, reserved ids excluded. Inverse of `from_words`.
    pub fn words(&self) -> &[String] {
        &self.id_to_word[RESERVED.len()..]
    }

    /// Encode one line; OOV words become UNK, empty lines are an error.
    pub fn encode(&self, line: &str) -> Result<Vec<u32>, UnmtError> {
        let toks = tokenize(line);
        if toks.is_empty() {
            return Err(UnmtError::Corpus(format!(
                "cannot encode an empty line ({} side)",
                self.lang
            )));
        }
        Ok(toks.iter().map(|w| self.id_of(w)).collect())
    }

    /// Decode ids back to text; reserved ids render as their surface forms.
    pub fn decode(&self, ids: &[u32]) -> Result<String, UnmtError> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            words.push(self.word_of(id)?);
        }
        Ok(words.join(" "))
    }
}

pub struct MonolingualDataset {
    pub lang: Lang,
    pub sentences: Vec<Vec<u32>>,
    pub path: PathBuf,
    /// Sentences dropped at load time for exceeding the length cap.
    pub excluded: usize,
}

impl MonolingualDataset {
    /// Load and encode a corpus file, excluding sentences longer than
    /// `max_len` tokens.
    pub fn load(
        path: &Path,
        vocab: &Vocabulary,
        max_len: usize,
    ) -> Result<MonolingualDataset, UnmtError> {
        let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
        let mut sentences = Vec::new();
        let mut excluded = 0;
        for (i, line) in text.lines().enumerate() {
            let ids = vocab.encode(line).map_err(|_| UnmtError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty sentence".into(),
            })?;
            if ids.len() > max_len {
                excluded += 1;
                continue;
            }
            sentences.push(ids);
        }
        if sentences.is_empty() {
            return Err(UnmtError::Corpus(format!(
                "no usable sentences in {} (cap {max_len})",
                path.display()
            )));
        }
        Ok(MonolingualDataset {
            lang: vocab.lang,
            sentences,
            path: path.to_path_buf(),
            excluded,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

/// A padded batch: `ids[b·max_len + t]` is token `t` of row `b`, PAD beyond
/// each row's true length. All rows share one language.
pub struct SeqBatch {
    pub lang: Lang,
    pub ids: Vec<u32>,
    pub lens: Vec<usize>,
    pub max_len: usize,
}

impl SeqBatch {
    pub fn from_sentences(sentences: &[Vec<u32>], lang: Lang) -> SeqBatch {
        let max_len = sentences.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = vec![PAD; sentences.len() * max_len];
        let mut lens = Vec::with_capacity(sentences.len());
        for (b, s) in sentences.iter().enumerate() {
            ids[b * max_len..b * max_len + s.len()].copy_from_slice(s);
            lens.push(s.len());
        }
        SeqBatch {
            lang,
            ids,
            lens,
            max_len,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    /// Token ids at time step `t`, one per row (PAD past the row's length).
    pub fn ids_at_step(&self, t: usize) -> Vec<u32> {
        (0..self.batch_size())
            .map(|b| self.ids[b * self.max_len + t])
            .collect()
    }

    /// 1 where step `t` is a real token, 0 where it is padding.
    pub fn mask_at_step<T: crate::tensor::Element>(&self, t: usize) -> Vec<T> {
        self.lens
            .iter()
            .map(|&l| if t < l { T::one() } else { T::zero() })
            .collect()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.max_len..b * self.max_len + self.lens[b]]
    }
}

/// Shuffle `0..n` into batches of `batch_size` (last batch may be short).
pub fn batch_indices(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates, explicit so the draw sequence is pinned by this crate
    // rather than by rand's slice-shuffle internals.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// One epoch of padded batches in a seeded shuffle order.
pub fn make_batches(
    dataset: &MonolingualDataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<SeqBatch> {
    batch_indices(dataset.len(), batch_size, rng)
        .into_iter()
        .map(|batch| {
            let sents: Vec<Vec<u32>> = batch
                .iter()
                .map(|&i| dataset.sentences[i].clone())
                .collect();
            SeqBatch::from_sentences(&sents, dataset.lang)
        })
        .collect()
}

/// Read a plain-text embedding file ("word v1 v2 ... vdim" per line) into a
/// `size×dim` row-major matrix. Words absent from the file — and the four
/// reserved rows — keep their uniform [−0.1, 0.1] initialization. Returns the
/// matrix and the fraction of non-reserved vocabulary words covered.
pub fn load_embeddings(
    vocab: &Vocabulary,
    path: &Path,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, f64), UnmtError> {
    let mut matrix: Vec<f32> = (0..vocab.size() * dim)
        .map(|_| rng.gen_range(-0.1..0.1))
        .collect();
    let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
    let mut covered = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let word = parts.next().expect("non-empty line has a first field");
        let vals: Vec<&str> = parts.collect();
        if vals.len() != dim {
            return Err(UnmtError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {dim} components, found {}", vals.len()),
            });
        }
        let id = vocab.id_of(word);
        if id == UNK {
            continue; // not in vocabulary; ignore the row
        }
        for (j, v) in vals.iter().enumerate() {
            matrix[id as usize * dim + j] = v.parse().map_err(|_| UnmtError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("bad float {v:?}"),
            })?;
        }
        covered += 1;
    }
    let vocab_words = vocab.size() - RESERVED.len();
    let coverage = if vocab_words == 0 {
        0.0
    } else {
        covered as f64 / vocab_words as f64
    };
    Ok((matrix, coverage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_corpus(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn build_vocab_orders_by_count_then_word() {
        let f = write_corpus(&["a b a", "a c"]);
        let v = Vocabulary::build(f.path(), 0, Lang::Src).unwrap();
        // a:3, then b and c tie at 1 and sort lexicographically.
        assert_eq!(v.size(), 7);
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), 5);
        assert_eq!(v.id_of("c"), 6);
    }

    #[test]
    fn min_count_is_strict() {
        let f = write_corpus(&["a b a", "a c"]);
        let v = Vocabulary::build(f.path(), 1, Lang::Src).unwrap();
        assert_eq!(v.size(), 5); // reserved + "a"
        assert_eq!(v.id_of("a"), 4);
        assert_eq!(v.id_of("b"), UNK);
        assert_eq!(v.id_of("c"), UNK);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let f = write_corpus(&[]);
        assert!(Vocabulary::build(f.path(), 0, Lang::Src).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_and_unk() {
        let f = write_corpus(&["the cat sat", "the dog sat"]);
        let v = Vocabulary::build(f.path(), 0, Lang::Src).unwrap();
        let ids = v.encode("The cat sat").unwrap(); // lowercased on the way in
        assert_eq!(v.decode(&ids).unwrap(), "the cat sat");
        let ids = v.encode("the wolf sat").unwrap();
        assert_eq!(ids[1], UNK);
        assert_eq!(v.decode(&ids).unwrap(), "the <unk> sat");
        assert!(v.encode("   ").is_err());
        assert!(v.decode(&[v.size() as u32]).is_err());
    }

    #[test]
    fn vocabulary_bijection_over_non_reserved_ids() {
        let f = write_corpus(&["e d c b a", "a b c d e f g"]);
        let v = Vocabulary::build(f.path(), 0, Lang::Tgt).unwrap();
        for id in 4..v.size() as u32 {
            let w = v.word_of(id).unwrap().to_string();
            assert_eq!(v.id_of(&w), id);
        }
    }

    #[test]
    fn load_excludes_over_cap_sentences() {
        let f = write_corpus(&["a a a a a a", "a a"]);
        let v = Vocabulary::build(f.path(), 0, Lang::Src).unwrap();
        let ds = MonolingualDataset::load(f.path(), &v, 5).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.excluded, 1);
        assert_eq!(ds.sentences[0].len(), 2);
    }

    #[test]
    fn batches_partition_the_dataset() {
        let f = write_corpus(&["a"; 10]);
        let v = Vocabulary::build(f.path(), 0, Lang::Src).unwrap();
        let ds = MonolingualDataset::load(f.path(), &v, 50).unwrap();
        let mut rng = crate::rng::stream(3, "test.batches");
        let batches = make_batches(&ds, 3, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(|b| b.batch_size()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let total: usize = sizes.iter().sum();
        assert_eq!(total, 10);
    }

    #[test]
    fn same_seed_same_batch_order() {
        let a = batch_indices(100, 7, &mut crate::rng::stream(9, "shuffle"));
        let b = batch_indices(100, 7, &mut crate::rng::stream(9, "shuffle"));
        let c = batch_indices(100, 7, &mut crate::rng::stream(10, "shuffle"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Every index exactly once.
        let mut flat: Vec<usize> = a.into_iter().flatten().collect();
        flat.sort_unstable();
        assert_eq!(flat, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn seq_batch_pads_and_masks() {
        let sents = vec![vec![4, 5, 6], vec![7]];
        let b = SeqBatch::from_sentences(&sents, Lang::Src);
        assert_eq!(b.max_len, 3);
        assert_eq!(b.ids_at_step(0), vec![4, 7]);
        assert_eq!(b.ids_at_step(1), vec![5, PAD]);
        assert_eq!(b.mask_at_step::<f32>(1), vec![1.0, 0.0]);
        assert_eq!(b.row(1), &[7]);
    }

    #[test]
    fn embeddings_cover_and_reject_bad_dims() {
        let f = write_corpus(&["a b", "a"]);
        let v = Vocabulary::build(f.path(), 0, Lang::Src).unwrap();
        let emb = write_corpus(&["a 1.0 2.0", "b 3.0 4.0", "zzz 9.0 9.0"]);
        let mut rng = crate::rng::stream(1, "emb");
        let (m, cov) = load_embeddings(&v, emb.path(), 2, &mut rng).unwrap();
        assert_eq!(cov, 1.0);
        assert_eq!(&m[4 * 2..5 * 2], &[1.0, 2.0]);
        assert_eq!(&m[5 * 2..6 * 2], &[3.0, 4.0]);
        // Reserved rows keep their random init within [-0.1, 0.1].
        assert!(m[..4 * 2].iter().all(|x| x.abs() <= 0.1));

        let bad = write_corpus(&["a 1.0"]);
        match load_embeddings(&v, bad.path(), 2, &mut rng) {
            Err(UnmtError::Format { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected format error, got {other:?}"),
        }

        let empty = write_corpus(&[]);
        let (_, cov) = load_embeddings(&v, empty.path(), 2, &mut rng).unwrap();
        assert_eq!(cov, 0.0);
    }
}
