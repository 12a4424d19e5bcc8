//! Checkpoint serialization.
//!
//! Binary layout: magic `"UNMT"`, format version (u32 LE), record count
//! (u64 LE), then one record per tensor — name (u32 LE length + UTF-8),
//! dtype tag (u8, 0 = f32), rank (u64 LE), dims (u64 LE each), row-major
//! f32 LE payload. After the records come two length-prefixed (u64 LE)
//! UTF-8 blocks: the canonical config snapshot and the run-state text
//! (iteration/epoch/step counters, RNG scheme, optimizer step counts,
//! best score so far, back-translation source tag, and both vocabularies).
//!
//! Because every RNG draw in training comes from a stream labeled by
//! (purpose, iteration, epoch, step-within-epoch), the "RNG state" needed to
//! resume is just the seed plus those counters; no generator positions are
//! stored. Reloading a checkpoint and continuing reproduces the uninterrupted
//! run bitwise.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::adversary::Discriminator;
use crate::config::ExperimentConfig;
use crate::error::UnmtError;
use crate::model::ModelParams;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"UNMT";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// What produced the back-translations for the iteration in progress.
/// `Neural` carries the frozen previous-iteration parameters so a resumed run
/// can regenerate exactly the same synthetic pairs.
pub enum BtSource {
    /// No back-translation this iteration (cold start without a lexicon).
    None,
    /// Word-by-word lexicon bootstrap (the data directory's lexicon).
    Wbw,
    /// Surface-copy bootstrap (synthetic debugging).
    Identity,
    /// The previous outer iteration's frozen model.
    Neural(ModelParams<f32>),
}

impl BtSource {
    fn tag(&self) -> &'static str {
        match self {
            BtSource::None => "none",
            BtSource::Wbw => "wbw",
            BtSource::Identity => "identity",
            BtSource::Neural(_) => "neural",
        }
    }
}

/// A full training snapshot, sufficient to continue the run bitwise.
pub struct Checkpoint {
    pub config: ExperimentConfig,
    /// Outer iteration in progress (1-based).
    pub iter: usize,
    /// Epochs already completed within `iter`.
    pub epochs_done: usize,
    pub global_step: u64,
    /// Best model-selection score seen so far (NEG_INFINITY before any eval).
    pub best_ms: f64,
    /// Vocabulary words in id order, reserved entries excluded.
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
    pub params: ModelParams<f32>,
    pub disc: Discriminator<f32>,
    /// Adam first/second moments per model tensor, plus the step count.
    pub adam: (Vec<Vec<f32>>, Vec<Vec<f32>>, u64),
    /// RMSProp second moments per discriminator tensor, plus the step count.
    pub rms: (Vec<Vec<f32>>, u64),
    pub bt: BtSource,
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u64).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_record(buf: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(shape.len() as u64).to_le_bytes());
    for &d in shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn corrupt_err(path: &Path, msg: impl Into<String>) -> UnmtError {
    UnmtError::Checkpoint(format!("{}: {}", path.display(), msg.into()))
}

/// Byte cursor with length checks; every failure names the file.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], UnmtError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt_err(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, UnmtError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, UnmtError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, UnmtError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, len: usize) -> Result<String, UnmtError> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| corrupt_err(self.path, "non-UTF-8 string"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, UnmtError> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Tensor payloads keyed by record name, consumed as the model is rebuilt so
/// leftovers (or absences) are detectable.
struct RecordMap {
    records: HashMap<String, (Vec<usize>, Vec<f32>)>,
}

impl RecordMap {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<(Vec<usize>, Vec<f32>), UnmtError> {
        let (got_shape, values) = self
            .records
            .remove(name)
            .ok_or_else(|| UnmtError::Checkpoint(format!("missing record {name}")))?;
        if got_shape != shape {
            return Err(UnmtError::Checkpoint(format!(
                "record {name} has shape {got_shape:?}, expected {shape:?}"
            )));
        }
        Ok((got_shape, values))
    }

    fn take_tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor<f32>, UnmtError> {
        let (s, values) = self.take(name, shape)?;
        Ok(Tensor::param(values, &s))
    }
}

/// Ordered `key = value` run-state lines; order is part of the byte format.
fn state_text(ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    out.push_str(&format!("iter = {}\n", ckpt.iter));
    out.push_str(&format!("epochs_done = {}\n", ckpt.epochs_done));
    out.push_str(&format!("global_step = {}\n", ckpt.global_step));
    out.push_str(&format!("best_ms = {}\n", ckpt.best_ms));
    out.push_str(&format!("adam_step = {}\n", ckpt.adam.2));
    out.push_str(&format!("rms_step = {}\n", ckpt.rms.1));
    out.push_str(&format!("rng = labeled-streams-v1 seed={}\n", ckpt.config.seed));
    out.push_str(&format!("bt_source = {}\n", ckpt.bt.tag()));
    out.push_str(&format!("vocab.src = {}\n", ckpt.src_words.join(" ")));
    out.push_str(&format!("vocab.tgt = {}\n", ckpt.tgt_words.join(" ")));
    out
}

fn parse_state(text: &str, path: &Path) -> Result<HashMap<String, String>, UnmtError> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once(" = ")
            .ok_or_else(|| corrupt_err(path, format!("bad state line: {line}")))?;
        map.insert(k.to_string(), v.to_string());
    }
    Ok(map)
}

fn state_get<'m>(
    map: &'m HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<&'m str, UnmtError> {
    map.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| corrupt_err(path, format!("state key {key} missing")))
}

fn state_parse<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
    path: &Path,
) -> Result<T, UnmtError> {
    state_get(map, key, path)?
        .parse::<T>()
        .map_err(|_| corrupt_err(path, format!("state key {key} unparsable")))
}

impl Checkpoint {
    /// Serialize to `path`. The byte stream is a pure function of the
    /// checkpoint contents, so identical states produce identical files.
    pub fn save(&self, path: &Path) -> Result<(), UnmtError> {
        let named = self.params.named();
        let (adam_m, adam_v, _) = &self.adam;
        let (rms_v, _) = &self.rms;
        if adam_m.len() != named.len() || adam_v.len() != named.len() {
            return Err(UnmtError::Checkpoint(format!(
                "adam moments cover {} tensors, model has {}",
                adam_m.len(),
                named.len()
            )));
        }
        let disc_named = self.disc.named();
        if rms_v.len() != disc_named.len() {
            return Err(UnmtError::Checkpoint(format!(
                "rmsprop moments cover {} tensors, discriminator has {}",
                rms_v.len(),
                disc_named.len()
            )));
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());

        let bt_records = match &self.bt {
            BtSource::Neural(p) => p.named().len(),
            _ => 0,
        };
        let count = 3 * named.len() + 2 * disc_named.len() + bt_records;
        buf.extend_from_slice(&(count as u64).to_le_bytes());

        for (i, (name, t)) in named.iter().enumerate() {
            let shape = t.shape().to_vec();
            push_record(&mut buf, &format!("model.{name}"), &shape, &t.to_vec());
            push_record(&mut buf, &format!("opt.model.m.{name}"), &shape, &adam_m[i]);
            push_record(&mut buf, &format!("opt.model.v.{name}"), &shape, &adam_v[i]);
        }
        for (i, (name, t)) in disc_named.iter().enumerate() {
            push_record(&mut buf, name, t.shape(), &t.to_vec());
            push_record(&mut buf, &format!("opt.disc.v.{name}"), t.shape(), &rms_v[i]);
        }
        if let BtSource::Neural(p) = &self.bt {
            for (name, t) in p.named() {
                push_record(&mut buf, &format!("btmodel.{name}"), t.shape(), &t.to_vec());
            }
        }

        push_str(&mut buf, &self.config.to_canonical_text());
        push_str(&mut buf, &state_text(self));
        fs::write(path, &buf).map_err(|e| UnmtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint, UnmtError> {
        let bytes = fs::read(path).map_err(|e| UnmtError::io(path, e))?;
        let mut r = Reader {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != MAGIC {
            return Err(corrupt_err(path, "bad magic (not a checkpoint file)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt_err(path, format!("unsupported version {version}")));
        }
        let count = r.u64()? as usize;
        let mut records = HashMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let dtype = r.u8()?;
            if dtype != DTYPE_F32 {
                return Err(corrupt_err(path, format!("record {name}: dtype {dtype}")));
            }
            let rank = r.u64()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let values = r.f32s(numel)?;
            if records.insert(name.clone(), (shape, values)).is_some() {
                return Err(corrupt_err(path, format!("duplicate record {name}")));
            }
        }
        let config_len = r.u64()? as usize;
        let config_text = r.string(config_len)?;
        let state_len = r.u64()? as usize;
        let state_text = r.string(state_len)?;
        if r.pos != bytes.len() {
            return Err(corrupt_err(path, "trailing bytes after state block"));
        }

        let mut config = ExperimentConfig::paper();
        config
            .apply_text(&config_text)
            .map_err(|e| corrupt_err(path, format!("embedded config: {e}")))?;
        let state = parse_state(&state_text, path)?;

        let rng_scheme = state_get(&state, "rng", path)?;
        let expected_rng = format!("labeled-streams-v1 seed={}", config.seed);
        if rng_scheme != expected_rng {
            return Err(corrupt_err(
                path,
                format!("rng scheme {rng_scheme:?} does not match config ({expected_rng:?})"),
            ));
        }

        let src_words: Vec<String> = state_get(&state, "vocab.src", path)?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let tgt_words: Vec<String> = state_get(&state, "vocab.tgt", path)?
            .split_whitespace()
            .map(str::to_string)
            .collect();
        let v_src = src_words.len() + crate::corpus::RESERVED.len();
        let v_tgt = tgt_words.len() + crate::corpus::RESERVED.len();
        let arch = config.arch.arch();

        let mut map = RecordMap { records };
        let params = ModelParams::from_named(arch, v_src, v_tgt, &mut |name, shape| {
            map.take_tensor(&format!("model.{name}"), shape)
        })?;
        let named = params.named();
        let mut adam_m = Vec::with_capacity(named.len());
        let mut adam_v = Vec::with_capacity(named.len());
        for (name, t) in &named {
            adam_m.push(map.take(&format!("opt.model.m.{name}"), t.shape())?.1);
            adam_v.push(map.take(&format!("opt.model.v.{name}"), t.shape())?.1);
        }
        let disc = Discriminator::from_named(2 * arch.dim, config.disc_hidden, &mut |name,
                                                                                     shape| {
            map.take_tensor(name, shape)
        })?;
        let mut rms_v = Vec::new();
        for (name, t) in &disc.named() {
            rms_v.push(map.take(&format!("opt.disc.v.{name}"), t.shape())?.1);
        }
        let bt = match state_get(&state, "bt_source", path)? {
            "none" => BtSource::None,
            "wbw" => BtSource::Wbw,
            "identity" => BtSource::Identity,
            "neural" => BtSource::Neural(ModelParams::from_named(
                arch,
                v_src,
                v_tgt,
                &mut |name, shape| map.take_tensor(&format!("btmodel.{name}"), shape),
            )?),
            other => return Err(corrupt_err(path, format!("bt_source {other:?}"))),
        };
        if let Some(name) = map.records.keys().next() {
            return Err(corrupt_err(path, format!("unexpected record {name}")));
        }

        Ok(Checkpoint {
            config,
            iter: state_parse(&state, "iter", path)?,
            epochs_done: state_parse(&state, "epochs_done", path)?,
            global_step: state_parse(&state, "global_step", path)?,
            best_ms: state_parse(&state, "best_ms", path)?,
            src_words,
            tgt_words,
            params,
            disc,
            adam: (
                adam_m,
                adam_v,
                state_parse(&state, "adam_step", path)?,
            ),
            rms: (rms_v, state_parse(&state, "rms_step", path)?),
            bt,
        })
    }
}
