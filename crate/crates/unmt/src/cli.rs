//! Batch-experiment front door: dataset preparation, training, translation,
//! evaluation, and ablation sweeps.
//!
//! Five subcommands: `synth` (generate a synthetic language pair), `train`
//! (run the full unsupervised loop from a config), `translate` (apply a
//! checkpoint to a text file), `evaluate` (score a checkpoint or a
//! pre-translated candidate file), and `ablate` (one run per ablation row
//! plus a comparison table). Every run directory is named by the config's
//! run id and records a manifest, so re-running identical inputs overwrites
//! nothing unless `--force` is passed. Errors print as a single
//! `error: ...` line on stderr with a nonzero exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ablation_rows, ExperimentConfig};
use crate::corpus::{tokenize, Lang, Vocabulary};
use crate::error::UnmtError;
use crate::evaluation::{bleu, model_selection_score, BleuReport};
use crate::model::TranslationModel;
use crate::synth::{ReorderRule, SynthLangPair, SynthSpec};
use crate::training::{self, thread_count, Checkpoint};

#[derive(Parser)]
#[command(
    name = "unmt",
    version,
    about = "Unsupervised machine translation from monolingual corpora"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic language pair with known ground truth.
    Synth(SynthArgs),
    /// Train the unsupervised model; artifacts land in a run directory.
    Train(TrainArgs),
    /// Translate a text file with a trained checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint (or a pre-translated file) against parallel text.
    Evaluate(EvaluateArgs),
    /// Train every ablation row and print a comparison table.
    Ablate(AblateArgs),
}

/// Base settings a config file overrides.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Full-width architecture with the published hyperparameters.
    Paper,
    /// Small architecture tuned for minutes-scale CPU runs.
    Desk,
}

impl Preset {
    fn base(self) -> ExperimentConfig {
        match self {
            Preset::Paper => ExperimentConfig::paper(),
            Preset::Desk => ExperimentConfig::desk(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Direction {
    /// Source language into target language.
    SrcTgt,
    /// Target language into source language.
    TgtSrc,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Words per language.
    #[arg(long, default_value_t = 100)]
    pub vocab: usize,
    /// Training sentences per side.
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    /// Validation sentences per side.
    #[arg(long, default_value_t = 400)]
    pub valid: usize,
    /// Parallel test pairs.
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    /// Word-order divergence: none, adjacent-swap, or block-reverse(W).
    #[arg(long, default_value = "adjacent-swap")]
    pub reorder: String,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 10)]
    pub max_len: usize,
    /// Unigram Zipf exponent.
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    /// Dimension of the emitted aligned embeddings.
    #[arg(long, default_value_t = 64)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Overwrite an existing non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Config file of `key = value` lines layered over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Root directory for run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Seed override (applied after the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Data directory override.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Re-run even if this config's run directory already exists.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input text, one sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::SrcTgt)]
    pub direction: Direction,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint to score (translates the test files itself).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pre-translated target-side text to score directly instead.
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    /// Source side of the parallel test set.
    #[arg(long)]
    pub test_src: PathBuf,
    /// Target side of the parallel test set.
    #[arg(long)]
    pub test_tgt: PathBuf,
    /// Held-out monolingual text for the selection score; defaults to the
    /// test sides.
    #[arg(long)]
    pub valid_src: Option<PathBuf>,
    #[arg(long)]
    pub valid_tgt: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Independent rows trained concurrently (capped by UNMT_THREADS).
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[arg(long)]
    pub force: bool,
}

/// Parse command-line arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: Cli) -> Result<(), UnmtError> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Translate(a) => cmd_translate(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

// --------------------------------------------------------------------------
// Manifests

/// What a run directory contains, written as `manifest.txt`. Paths are
/// relative to the run directory so the whole directory can be moved.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub run_dir: PathBuf,
    pub config: String,
    pub metrics: String,
    pub checkpoints: Vec<String>,
}

impl RunManifest {
    pub fn write(&self) -> Result<(), UnmtError> {
        let mut text = String::new();
        text.push_str(&format!("run_id = {}\n", self.run_id));
        text.push_str(&format!("config = {}\n", self.config));
        text.push_str(&format!("metrics = {}\n", self.metrics));
        for c in &self.checkpoints {
            text.push_str(&format!("checkpoint = {c}\n"));
        }
        let path = self.run_dir.join("manifest.txt");
        fs::write(&path, text).map_err(|e| UnmtError::io(&path, e))
    }

    pub fn load(run_dir: &Path) -> Result<RunManifest, UnmtError> {
        let path = run_dir.join("manifest.txt");
        let text = fs::read_to_string(&path).map_err(|e| UnmtError::io(&path, e))?;
        let mut run_id = None;
        let mut config = None;
        let mut metrics = None;
        let mut checkpoints = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (k, v) = line.split_once(" = ").ok_or_else(|| UnmtError::Format {
                path: path.clone(),
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            match k {
                "run_id" => run_id = Some(v.to_string()),
                "config" => config = Some(v.to_string()),
                "metrics" => metrics = Some(v.to_string()),
                "checkpoint" => checkpoints.push(v.to_string()),
                other => {
                    return Err(UnmtError::Format {
                        path: path.clone(),
                        line: i + 1,
                        msg: format!("unknown manifest key {other}"),
                    })
                }
            }
        }
        let missing = |what: &str| UnmtError::Format {
            path: path.clone(),
            line: 0,
            msg: format!("missing {what}"),
        };
        Ok(RunManifest {
            run_id: run_id.ok_or_else(|| missing("run_id"))?,
            run_dir: run_dir.to_path_buf(),
            config: config.ok_or_else(|| missing("config"))?,
            metrics: metrics.ok_or_else(|| missing("metrics"))?,
            checkpoints,
        })
    }
}

/// Results a training run reports upward (everything else is on disk).
pub struct RunSummary {
    pub manifest: RunManifest,
    pub best_ms: f64,
    pub final_bleu_src_tgt: Option<f64>,
    pub final_bleu_tgt_src: Option<f64>,
}

// --------------------------------------------------------------------------
// Shared helpers

fn load_config(
    preset: Preset,
    config: Option<&Path>,
    seed: Option<u64>,
    data: Option<&Path>,
) -> Result<ExperimentConfig, UnmtError> {
    let mut cfg = preset.base();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = data {
        cfg.data_dir = d.to_path_buf();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Refuse to write into an existing non-empty directory unless forced;
/// with `--force` the old directory is removed first so no stale artifacts
/// survive into the new run.
fn claim_dir(dir: &Path, force: bool) -> Result<(), UnmtError> {
    let occupied = dir.is_dir()
        && fs::read_dir(dir)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
    if occupied {
        if !force {
            return Err(UnmtError::Contract(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| UnmtError::io(dir, e))?;
    }
    Ok(())
}

fn claim_file(path: &Path, force: bool) -> Result<(), UnmtError> {
    if path.exists() && !force {
        return Err(UnmtError::Contract(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

/// Train one config into `run_dir` and record its snapshot and manifest.
fn execute_run(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    threads: usize,
    force: bool,
) -> Result<RunSummary, UnmtError> {
    claim_dir(run_dir, force)?;
    let outcome = training::iterate(cfg, run_dir, threads)?;
    let config_path = run_dir.join("config.txt");
    fs::write(&config_path, cfg.to_canonical_text())
        .map_err(|e| UnmtError::io(&config_path, e))?;
    let rel = |p: &Path| -> String {
        p.strip_prefix(run_dir)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let manifest = RunManifest {
        run_id: cfg.run_id(),
        run_dir: run_dir.to_path_buf(),
        config: "config.txt".into(),
        metrics: rel(&outcome.metrics_path),
        checkpoints: outcome.checkpoints.iter().map(|p| rel(p)).collect(),
    };
    manifest.write()?;
    let last = outcome.history.last();
    Ok(RunSummary {
        manifest,
        best_ms: outcome.best_ms,
        final_bleu_src_tgt: last.and_then(|r| r.bleu_src_tgt),
        final_bleu_tgt_src: last.and_then(|r| r.bleu_tgt_src),
    })
}

fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>, UnmtError> {
    let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
    Ok(text.lines().map(tokenize).collect())
}

/// Encode lines for BLEU scoring; empty lines are format errors here
/// because they cannot carry a sentence of either side of a test pair.
fn encode_lines(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<u32>>, UnmtError> {
    let text = fs::read_to_string(path).map_err(|e| UnmtError::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            vocab.encode(l).map_err(|_| UnmtError::Format {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty sentence".into(),
            })
        })
        .collect()
}

fn vocabs_from_checkpoint(ckpt: &Checkpoint) -> (Vocabulary, Vocabulary) {
    (
        Vocabulary::from_words(ckpt.src_words.iter().cloned(), Lang::Src),
        Vocabulary::from_words(ckpt.tgt_words.iter().cloned(), Lang::Tgt),
    )
}

// --------------------------------------------------------------------------
// Subcommands

pub fn cmd_synth(args: &SynthArgs) -> Result<crate::synth::SynthArtifacts, UnmtError> {
    let reorder: ReorderRule = args.reorder.parse()?;
    let spec = SynthSpec {
        vocab_size: args.vocab,
        len_range: (args.min_len, args.max_len),
        train_count: args.train,
        valid_count: args.valid,
        test_count: args.test,
        reorder,
        zipf_exponent: args.zipf,
        emb_dim: args.emb_dim,
        seed: args.seed,
    };
    claim_dir(&args.out, args.force)?;
    let pair = SynthLangPair::new(spec)?;
    let artifacts = pair.generate(&args.out)?;
    println!("dataset: {}", artifacts.dir.display());
    println!(
        "vocab {} per side, reorder {}, unigram total variation {:.4}, overlap {}",
        args.vocab, reorder, artifacts.unigram_tv, artifacts.overlap
    );
    Ok(artifacts)
}

pub fn cmd_train(args: &TrainArgs) -> Result<RunSummary, UnmtError> {
    let cfg = load_config(
        args.preset,
        args.config.as_deref(),
        args.seed,
        args.data.as_deref(),
    )?;
    let run_dir = args.out.join(cfg.run_id());
    let summary = execute_run(&cfg, &run_dir, thread_count(), args.force)?;
    println!("run: {}", summary.manifest.run_dir.display());
    println!("best selection score: {:.4}", summary.best_ms);
    if let (Some(st), Some(ts)) = (summary.final_bleu_src_tgt, summary.final_bleu_tgt_src) {
        println!("final test bleu: src->tgt {st:.2}, tgt->src {ts:.2}");
    }
    Ok(summary)
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<usize, UnmtError> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (src_vocab, tgt_vocab) = vocabs_from_checkpoint(&ckpt);
    let (from_vocab, to_vocab, from_lang) = match args.direction {
        Direction::SrcTgt => (&src_vocab, &tgt_vocab, Lang::Src),
        Direction::TgtSrc => (&tgt_vocab, &src_vocab, Lang::Tgt),
    };
    let model = TranslationModel::new(&ckpt.params, from_lang);

    let text = fs::read_to_string(&args.input).map_err(|e| UnmtError::io(&args.input, e))?;
    let lines: Vec<&str> = text.lines().collect();
    // Blank lines pass through blank, so output lines align with input lines.
    let mut slots = Vec::new();
    let mut ids = Vec::new();
    for (i, line) in lines.iter().enumerate() {
        let toks = tokenize(line);
        if !toks.is_empty() {
            slots.push(i);
            ids.push(toks.iter().map(|w| from_vocab.id_of(w)).collect::<Vec<u32>>());
        }
    }
    let outputs = training::translate_with_threads(&model, &ids, thread_count())?;
    let mut rendered = vec![String::new(); lines.len()];
    for (slot, out) in slots.into_iter().zip(&outputs) {
        rendered[slot] = to_vocab.decode(out)?;
    }
    match &args.out {
        Some(path) => {
            claim_file(path, args.force)?;
            let mut body = rendered.join("\n");
            body.push('\n');
            fs::write(path, body).map_err(|e| UnmtError::io(path, e))?;
        }
        None => {
            for line in &rendered {
                println!("{line}");
            }
        }
    }
    Ok(lines.len())
}

/// Scores from `evaluate`: per-direction reports when a checkpoint was
/// scored, a single report when a candidate file was scored directly.
pub struct EvalOutput {
    pub bleu_src_tgt: Option<BleuReport>,
    pub bleu_tgt_src: Option<BleuReport>,
    pub candidate: Option<BleuReport>,
    pub ms: Option<f64>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<EvalOutput, UnmtError> {
    match (&args.checkpoint, &args.candidate) {
        (Some(_), Some(_)) | (None, None) => Err(UnmtError::Config(
            "pass exactly one of --checkpoint and --candidate".into(),
        )),
        (None, Some(cand)) => {
            let candidates = read_token_lines(cand)?;
            let references = read_token_lines(&args.test_tgt)?;
            let report = bleu(&candidates, &references)?;
            println!("bleu candidate vs {}: {report}", args.test_tgt.display());
            Ok(EvalOutput {
                bleu_src_tgt: None,
                bleu_tgt_src: None,
                candidate: Some(report),
                ms: None,
            })
        }
        (Some(ckpt_path), None) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            let (src_vocab, tgt_vocab) = vocabs_from_checkpoint(&ckpt);
            let st = TranslationModel::new(&ckpt.params, Lang::Src);
            let ts = TranslationModel::new(&ckpt.params, Lang::Tgt);
            let test_src = encode_lines(&args.test_src, &src_vocab)?;
            let test_tgt = encode_lines(&args.test_tgt, &tgt_vocab)?;
            if test_src.len() != test_tgt.len() {
                return Err(UnmtError::Corpus(format!(
                    "test files disagree: {} vs {} lines",
                    test_src.len(),
                    test_tgt.len()
                )));
            }
            let threads = thread_count();
            let hyp_tgt = training::translate_with_threads(&st, &test_src, threads)?;
            let hyp_src = training::translate_with_threads(&ts, &test_tgt, threads)?;
            let report_st = bleu(&hyp_tgt, &test_tgt)?;
            let report_ts = bleu(&hyp_src, &test_src)?;
            let val_src = match &args.valid_src {
                Some(p) => encode_lines(p, &src_vocab)?,
                None => test_src.clone(),
            };
            let val_tgt = match &args.valid_tgt {
                Some(p) => encode_lines(p, &tgt_vocab)?,
                None => test_tgt.clone(),
            };
            let ms = model_selection_score(&st, &ts, &val_src, &val_tgt)?;
            println!("bleu src->tgt: {report_st}");
            println!("bleu tgt->src: {report_ts}");
            println!("ms_score: {ms:.4}");
            Ok(EvalOutput {
                bleu_src_tgt: Some(report_st),
                bleu_tgt_src: Some(report_ts),
                candidate: None,
                ms: Some(ms),
            })
        }
    }
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<(String, RunSummary)>, UnmtError> {
    let base = load_config(
        args.preset,
        args.config.as_deref(),
        args.seed,
        args.data.as_deref(),
    )?;
    let rows = ablation_rows(&base);
    let env_cap = std::env::var("UNMT_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&n| n >= 1);
    let workers = match env_cap {
        Some(cap) => args.parallel.clamp(1, cap),
        None => args.parallel.max(1),
    };

    let out_root = args.out.clone();
    let force = args.force;
    let mut results: Vec<Option<Result<RunSummary, UnmtError>>> =
        (0..rows.len()).map(|_| None).collect();
    for wave in rows.chunks(workers) {
        let offset = rows
            .iter()
            .position(|(l, _)| l == &wave[0].0)
            .expect("wave comes from rows");
        let wave_results: Vec<Result<RunSummary, UnmtError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = wave
                .iter()
                .map(|(label, cfg)| {
                    let out_root = out_root.clone();
                    let label = label.clone();
                    let cfg = cfg.clone();
                    scope.spawn(move || {
                        // Rows are keyed by label, not run id: when the base
                        // config already disables a feature, two rows share a
                        // config and would otherwise collide on one directory.
                        let run_dir = out_root.join(format!("{label}-{}", cfg.run_id()));
                        execute_run(&cfg, &run_dir, 1, force)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join().unwrap_or_else(|_| {
                        Err(UnmtError::Contract("ablation worker panicked".into()))
                    })
                })
                .collect()
        });
        for (i, r) in wave_results.into_iter().enumerate() {
            results[offset + i] = Some(r);
        }
    }

    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<22} {:>14} {:>14} {:>10}",
        "row", "bleu src->tgt", "bleu tgt->src", "best ms"
    );
    let mut out = Vec::with_capacity(rows.len());
    for ((label, _), result) in rows.iter().zip(results) {
        let summary = result.expect("every row ran")?;
        println!(
            "{label:<22} {:>14} {:>14} {:>10}",
            fmt(summary.final_bleu_src_tgt),
            fmt(summary.final_bleu_tgt_src),
            fmt(Some(summary.best_ms)),
        );
        out.push((label.clone(), summary));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SynthLangPair, SynthSpec};

    fn synth_args(out: &Path, seed: u64) -> SynthArgs {
        SynthArgs {
            out: out.to_path_buf(),
            vocab: 30,
            train: 48,
            valid: 12,
            test: 10,
            reorder: "adjacent-swap".into(),
            min_len: 3,
            max_len: 7,
            zipf: 1.1,
            emb_dim: 8,
            seed,
            force: false,
        }
    }

    fn quick_config_text(data_dir: &Path, seed: u64) -> String {
        format!(
            "data_dir = {}\nmax_len = 10\nmin_count = 0\npretrained_embeddings = false\n\
             batch_size = 8\niterations = 1\nepochs_per_iter = 1\neval_every = 0\nseed = {seed}\n",
            data_dir.display()
        )
    }

    #[test]
    fn train_then_translate_round_trips_line_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        cmd_synth(&synth_args(&data, 31)).unwrap();

        let cfg_path = tmp.path().join("quick.cfg");
        fs::write(&cfg_path, quick_config_text(&data, 31)).unwrap();
        let train = TrainArgs {
            config: Some(cfg_path),
            preset: Preset::Desk,
            out: tmp.path().join("runs"),
            seed: None,
            data: None,
            force: false,
        };
        let summary = cmd_train(&train).unwrap();
        assert!(summary.manifest.run_dir.join("manifest.txt").exists());
        assert!(summary.manifest.run_dir.join("config.txt").exists());
        let reloaded = RunManifest::load(&summary.manifest.run_dir).unwrap();
        assert_eq!(reloaded, summary.manifest);

        // Input with a blank line in the middle: counts must be preserved.
        let input = tmp.path().join("input.txt");
        let src_line = fs::read_to_string(data.join("test.src"))
            .unwrap()
            .lines()
            .next()
            .unwrap()
            .to_string();
        fs::write(&input, format!("{src_line}\n\n{src_line}\n")).unwrap();
        let out_file = tmp.path().join("out.txt");
        let translate = TranslateArgs {
            checkpoint: summary.manifest.run_dir.join("best.bin"),
            input: input.clone(),
            direction: Direction::SrcTgt,
            out: Some(out_file.clone()),
            force: false,
        };
        let n = cmd_translate(&translate).unwrap();
        assert_eq!(n, 3);
        let rendered = fs::read_to_string(&out_file).unwrap();
        assert_eq!(rendered.lines().count(), 3);
        assert!(rendered.lines().nth(1).unwrap().is_empty());

        let eval = EvaluateArgs {
            checkpoint: Some(summary.manifest.run_dir.join("best.bin")),
            candidate: None,
            test_src: data.join("test.src"),
            test_tgt: data.join("test.tgt"),
            valid_src: Some(data.join("valid.src")),
            valid_tgt: Some(data.join("valid.tgt")),
        };
        let scores = cmd_evaluate(&eval).unwrap();
        assert!(scores.ms.unwrap().is_finite());
        assert!(scores.bleu_src_tgt.unwrap().bleu >= 0.0);
    }

    #[test]
    fn evaluate_candidate_equal_to_reference_scores_one_hundred() {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        let spec = SynthSpec {
            vocab_size: 30,
            len_range: (3, 7),
            train_count: 20,
            valid_count: 5,
            test_count: 8,
            reorder: crate::synth::ReorderRule::None,
            zipf_exponent: 1.1,
            emb_dim: 8,
            seed: 32,
        };
        SynthLangPair::new(spec).unwrap().generate(&data).unwrap();
        let eval = EvaluateArgs {
            checkpoint: None,
            candidate: Some(data.join("test.tgt")),
            test_src: data.join("test.src"),
            test_tgt: data.join("test.tgt"),
            valid_src: None,
            valid_tgt: None,
        };
        let out = cmd_evaluate(&eval).unwrap();
        let report = out.candidate.unwrap();
        assert!((report.bleu - 100.0).abs() < 1e-9, "{report}");
    }

    #[test]
    fn existing_run_directory_is_refused_without_force() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("dataset");
        cmd_synth(&synth_args(&dir, 33)).unwrap();
        let again = cmd_synth(&synth_args(&dir, 33));
        assert!(matches!(again, Err(UnmtError::Contract(_))));
        let mut forced = synth_args(&dir, 33);
        forced.force = true;
        cmd_synth(&forced).unwrap();
    }

    #[test]
    fn cli_parses_every_subcommand() {
        let cases: Vec<Vec<&str>> = vec![
            vec!["unmt", "synth", "--out", "d", "--vocab", "50"],
            vec!["unmt", "train", "--config", "c.cfg", "--preset", "desk"],
            vec![
                "unmt",
                "translate",
                "--checkpoint",
                "x.bin",
                "--input",
                "in.txt",
                "--direction",
                "tgt-src",
            ],
            vec![
                "unmt",
                "evaluate",
                "--checkpoint",
                "x.bin",
                "--test-src",
                "a",
                "--test-tgt",
                "b",
            ],
            vec!["unmt", "ablate", "--parallel", "2", "--out", "runs"],
        ];
        for argv in cases {
            use clap::Parser as _;
            Cli::try_parse_from(&argv).unwrap_or_else(|e| panic!("{argv:?}: {e}"));
        }
    }
}
