//! Experiment configuration: a flat `key = value` file format, validation,
//! presets, and the canonical serialization that run ids and checkpoint
//! snapshots hash against.
//!
//! Every training choice — loss weights, noise, optimizer settings, schedule,
//! ablation switches — lives here, so an experiment is reproducible from its
//! config text and nothing else. Unknown keys are hard errors: a typo in an
//! ablation switch must fail loudly, not silently run the full model.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::UnmtError;
use crate::model::Arch;
use crate::noise::NoiseConfig;

/// Network size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchPreset {
    /// Single-layer, 64-wide: minutes on one core.
    Desk,
    /// Three-layer, 300-wide: the reference architecture.
    Paper,
}

impl ArchPreset {
    pub fn arch(self) -> Arch {
        match self {
            ArchPreset::Desk => Arch::desk(),
            ArchPreset::Paper => Arch::paper(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ArchPreset::Desk => "desk",
            ArchPreset::Paper => "paper",
        }
    }
}

/// What stands in for the first translation model M⁽¹⁾ before the first
/// training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitModel {
    /// Word-by-word translation through the provided lexicon.
    Wbw,
    /// Verbatim copy re-encoded in the other vocabulary.
    Identity,
    /// No initial model: the first iteration trains without the
    /// cross-domain term, which kicks in once a real model exists.
    None,
}

impl InitModel {
    fn name(self) -> &'static str {
        match self {
            InitModel::Wbw => "wbw",
            InitModel::Identity => "identity",
            InitModel::None => "none",
        }
    }
}

/// The complete recipe for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Directory holding train/valid/test corpora, lexicon, embeddings.
    pub data_dir: PathBuf,
    /// Sentences longer than this are excluded at load time.
    pub max_len: usize,
    /// Words must occur strictly more often than this to enter a vocabulary.
    pub min_count: usize,
    pub arch: ArchPreset,
    /// Initialize embedding tables from the data directory's aligned
    /// embedding files (the "pretraining" ablation switch).
    pub pretrained_embeddings: bool,
    pub init_model: InitModel,
    pub lambda_auto: f64,
    pub lambda_cd: f64,
    pub lambda_adv: f64,
    /// Word-drop probability of the noise model.
    pub noise_drop: f64,
    /// Maximum local displacement of the noise model's permutations.
    pub noise_k: usize,
    /// Adam learning rate for encoder, decoder, and embeddings.
    pub lr_model: f64,
    /// RMSProp learning rate for the discriminator (key `adv.lr`).
    pub lr_disc: f64,
    /// Discriminator hidden width (key `adv.hidden`).
    pub disc_hidden: usize,
    /// Label smoothing for the discriminator objective (key `adv.smoothing`).
    pub adv_smoothing: f64,
    /// Whether the encoder-side adversarial loss uses the same smoothing
    /// (key `adv.smooth_adv_loss`); off means plain cross-entropy there.
    pub smooth_adv_loss: bool,
    pub adam_beta1: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Number of outer iterations (back-translation refreshes).
    pub iterations: usize,
    pub epochs_per_iter: usize,
    /// Cap on back-translated sentences per side each iteration; 0 = all.
    pub bt_limit: usize,
    /// Extra evaluation cadence in optimizer steps; 0 = epoch ends only.
    pub eval_every: usize,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Reference settings: full-width architecture, the published loss
    /// weights and optimizer values.
    pub fn paper() -> ExperimentConfig {
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            max_len: 50,
            min_count: 1,
            arch: ArchPreset::Paper,
            pretrained_embeddings: true,
            init_model: InitModel::Wbw,
            lambda_auto: 1.0,
            lambda_cd: 1.0,
            lambda_adv: 1.0,
            noise_drop: 0.1,
            noise_k: 3,
            lr_model: 3e-4,
            lr_disc: 5e-4,
            disc_hidden: 1024,
            adv_smoothing: 0.1,
            smooth_adv_loss: true,
            adam_beta1: 0.5,
            clip_norm: 5.0,
            batch_size: 32,
            iterations: 3,
            epochs_per_iter: 1,
            bt_limit: 0,
            eval_every: 0,
            seed: 42,
        }
    }

    /// Desk-scale settings: small network, hotter learning rate (small nets
    /// on small corpora need it), same objective.
    pub fn desk() -> ExperimentConfig {
        ExperimentConfig {
            arch: ArchPreset::Desk,
            lr_model: 3e-3,
            lr_disc: 1e-3,
            disc_hidden: 128,
            epochs_per_iter: 2,
            ..ExperimentConfig::paper()
        }
    }

    pub fn preset(name: &str) -> Result<ExperimentConfig, UnmtError> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "paper" => Ok(ExperimentConfig::paper()),
            other => Err(UnmtError::Config(format!(
                "unknown preset {other:?} (desk | paper)"
            ))),
        }
    }

    /// Set one key from its textual value. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), UnmtError> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, UnmtError> {
            value.parse().map_err(|_| {
                UnmtError::Config(format!("bad value {value:?} for key {key:?}"))
            })
        }
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "max_len" => self.max_len = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "arch" => {
                self.arch = match value {
                    "desk" => ArchPreset::Desk,
                    "paper" => ArchPreset::Paper,
                    _ => {
                        return Err(UnmtError::Config(format!(
                            "bad value {value:?} for key \"arch\" (desk | paper)"
                        )))
                    }
                }
            }
            "pretrained_embeddings" => self.pretrained_embeddings = num(key, value)?,
            "init_model" => {
                self.init_model = match value {
                    "wbw" => InitModel::Wbw,
                    "identity" => InitModel::Identity,
                    "none" => InitModel::None,
                    _ => {
                        return Err(UnmtError::Config(format!(
                            "bad value {value:?} for key \"init_model\" (wbw | identity | none)"
                        )))
                    }
                }
            }
            "lambda_auto" => self.lambda_auto = num(key, value)?,
            "lambda_cd" => self.lambda_cd = num(key, value)?,
            "lambda_adv" => self.lambda_adv = num(key, value)?,
            "noise_drop" => self.noise_drop = num(key, value)?,
            "noise_k" => self.noise_k = num(key, value)?,
            "lr_model" => self.lr_model = num(key, value)?,
            "adv.lr" => self.lr_disc = num(key, value)?,
            "adv.hidden" => self.disc_hidden = num(key, value)?,
            "adv.smoothing" => self.adv_smoothing = num(key, value)?,
            "adv.smooth_adv_loss" => self.smooth_adv_loss = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "epochs_per_iter" => self.epochs_per_iter = num(key, value)?,
            "bt_limit" => self.bt_limit = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            unknown => {
                return Err(UnmtError::Config(format!(
                    "unknown config key {unknown:?}"
                )))
            }
        }
        Ok(())
    }

    /// Apply `key = value` lines over the current values. `#` starts a
    /// comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), UnmtError> {
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                UnmtError::Config(format!("line {}: expected `key = value`, got {raw:?}", i + 1))
            })?;
            self.set(key.trim(), value.trim())
                .map_err(|e| UnmtError::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), UnmtError> {
        let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
        self.apply_text(&text)
            .map_err(|e| UnmtError::Config(format!("{}: {e}", path.display())))
    }

    /// Every key in fixed declaration order — the form that is hashed for
    /// run ids, embedded in checkpoints, and reparsable by [`apply_text`].
    pub fn to_canonical_text(&self) -> String {
        let mut s = String::new();
        let kv: &[(&str, String)] = &[
            ("data_dir", self.data_dir.display().to_string()),
            ("max_len", self.max_len.to_string()),
            ("min_count", self.min_count.to_string()),
            ("arch", self.arch.name().into()),
            ("pretrained_embeddings", self.pretrained_embeddings.to_string()),
            ("init_model", self.init_model.name().into()),
            ("lambda_auto", self.lambda_auto.to_string()),
            ("lambda_cd", self.lambda_cd.to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("noise_drop", self.noise_drop.to_string()),
            ("noise_k", self.noise_k.to_string()),
            ("lr_model", self.lr_model.to_string()),
            ("adv.lr", self.lr_disc.to_string()),
            ("adv.hidden", self.disc_hidden.to_string()),
            ("adv.smoothing", self.adv_smoothing.to_string()),
            ("adv.smooth_adv_loss", self.smooth_adv_loss.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("iterations", self.iterations.to_string()),
            ("epochs_per_iter", self.epochs_per_iter.to_string()),
            ("bt_limit", self.bt_limit.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("seed", self.seed.to_string()),
        ];
        for (k, v) in kv {
            writeln!(s, "{k} = {v}").expect("writing to String cannot fail");
        }
        s
    }

    /// Short content hash of the canonical text (seed included), used as the
    /// run directory name.
    pub fn run_id(&self) -> String {
        let digest = Sha256::digest(self.to_canonical_text().as_bytes());
        let mut id = String::with_capacity(12);
        for b in &digest[..6] {
            write!(id, "{b:02x}").expect("writing to String cannot fail");
        }
        id
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig::new(self.noise_drop, self.noise_k)
    }

    pub fn validate(&self) -> Result<(), UnmtError> {
        for (name, v) in [
            ("lambda_auto", self.lambda_auto),
            ("lambda_cd", self.lambda_cd),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(UnmtError::Config(format!(
                    "{name} must be a nonnegative finite number, got {v}"
                )));
            }
        }
        if self.iterations < 1 {
            return Err(UnmtError::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(UnmtError::Config("batch_size must be at least 1".into()));
        }
        if self.max_len < 1 {
            return Err(UnmtError::Config("max_len must be at least 1".into()));
        }
        for (name, v) in [("lr_model", self.lr_model), ("lr_disc", self.lr_disc)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(UnmtError::Config(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if !(0.0..0.5).contains(&self.adv_smoothing) {
            return Err(UnmtError::Config(format!(
                "adv.smoothing must lie in [0, 0.5), got {}",
                self.adv_smoothing
            )));
        }
        if self.disc_hidden < 1 {
            return Err(UnmtError::Config("adv.hidden must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return Err(UnmtError::Config(format!(
                "adam_beta1 must lie in [0, 1), got {}",
                self.adam_beta1
            )));
        }
        // +inf is a legitimate "no clipping" setting; NaN and ≤ 0 are not.
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(UnmtError::Config(format!(
                "clip_norm must be positive, got {}",
                self.clip_norm
            )));
        }
        self.noise().validate().map_err(UnmtError::Config)?;
        Ok(())
    }
}

/// The ablation grid: the full model plus the six single- and double-switch
/// rows, in the fixed order reports use. Row names are filesystem-safe.
pub fn ablation_rows(base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut rows = Vec::new();
    rows.push(("full".to_string(), base.clone()));

    let mut c = base.clone();
    c.lambda_cd = 0.0;
    rows.push(("no-cd".to_string(), c));

    let mut c = base.clone();
    c.pretrained_embeddings = false;
    rows.push(("no-pretrain".to_string(), c));

    // The double ablation: no cross-domain loss, random embeddings, and no
    // lexicon bootstrap at all (without L_cd the initial translator is never
    // consumed, so `None` states that outright and skips dead work).
    let mut c = base.clone();
    c.lambda_cd = 0.0;
    c.pretrained_embeddings = false;
    c.init_model = InitModel::None;
    rows.push(("no-cd-no-pretrain".to_string(), c));

    let mut c = base.clone();
    c.noise_drop = 0.0;
    c.noise_k = 0;
    rows.push(("no-noise".to_string(), c));

    let mut c = base.clone();
    c.lambda_auto = 0.0;
    rows.push(("no-auto".to_string(), c));

    let mut c = base.clone();
    c.lambda_adv = 0.0;
    rows.push(("no-adv".to_string(), c));

    rows
}
