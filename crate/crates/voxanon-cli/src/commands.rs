//! Implementations of the `voxanon` subcommands.
//!
//! Each command is a plain function over a resolved [`RunConfig`] and
//! filesystem paths, shared by the binary and the integration tests.
//! All artifacts are written atomically (temp + rename) and embed the
//! config hash and seed that produced them, so re-running a command
//! with identical inputs yields identical files, and any report can be
//! traced back to its exact configuration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxanon_core::anonymizer::{
    anonymize_utterance, build_pool, AnonConfig, AnonMode, SpeakerPool,
};
use voxanon_core::checkpoint::Checkpoint;
use voxanon_core::config::RunConfig;
use voxanon_core::encoders::OracleTeacher;
use voxanon_core::eval::{
    probe_layers, run_protocol, run_protocol_with_pool, AblationReport, AblationRow,
    LayerProbeReport, LayerSubset, MetricsReport, ProtocolConfig,
};
use voxanon_core::model::Model;
use voxanon_core::signal::{load_wav, mel_spectrogram, save_wav, StereoPolicy};
use voxanon_core::synthdata::{
    build_corpus, load_corpus, save_corpus, write_atomic, Corpus, ManifestRecord,
};
use voxanon_core::train::{TrainReport, Trainer};
use voxanon_core::{Error, Result};

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "VOXANON_CONFIG";

// Artifact file names within command output directories.
pub const CONFIG_FILE: &str = "run-config.toml";
pub const SYNTH_SUMMARY_FILE: &str = "synth-summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const POOL_FILE: &str = "pool.json";
pub const TRAIN_LOG_FILE: &str = "train-log.jsonl";
pub const TRAIN_SUMMARY_FILE: &str = "train-summary.json";
pub const ANON_SUMMARY_FILE: &str = "anonymize-summary.json";

/// Resolve the active config: explicit flag, then `$VOXANON_CONFIG`,
/// then built-in defaults.
pub fn resolve_config(flag: Option<&Path>) -> Result<RunConfig> {
    if let Some(path) = flag {
        return RunConfig::load(path);
    }
    match std::env::var(CONFIG_ENV) {
        Ok(path) if !path.is_empty() => RunConfig::load(Path::new(&path)),
        _ => Ok(RunConfig::default()),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

// ---------------------------------------------------------------------
// synth-data
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub config_hash: String,
    pub seed: u64,
    pub train_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
}

/// Generate the synthetic corpus and save it (WAVs + manifest) along
/// with the config that produced it.
pub fn cmd_synth_data(cfg: &RunConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let corpus = build_corpus(&cfg.corpus, cfg.seed)?;
    ensure_dir(out_dir)?;
    save_corpus(&corpus, out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let summary = SynthSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        train_utterances: corpus.train.len(),
        dev_utterances: corpus.dev.len(),
        test_utterances: corpus.test.len(),
    };
    write_json(&out_dir.join(SYNTH_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub rejected_steps: usize,
    /// Reconstruction loss at the first and last accepted steps.
    pub rec_first: f64,
    pub rec_last: f64,
}

fn load_matching_corpus(cfg: &RunConfig, corpus_dir: &Path) -> Result<Corpus> {
    let corpus = load_corpus(corpus_dir)?;
    if corpus.cfg != cfg.corpus {
        return Err(Error::Config(format!(
            "corpus at {} was generated under a different corpus config than the \
             active one — regenerate it or point --config at the corpus's {}",
            corpus_dir.display(),
            CONFIG_FILE
        )));
    }
    Ok(corpus)
}

/// Build, initialize, and train a model on a loaded corpus. Shared by
/// `cmd_train` and `cmd_ablate`.
fn fit(
    cfg: &RunConfig,
    corpus: &Corpus,
    log: Option<&mut dyn std::io::Write>,
) -> Result<(Trainer, TrainReport)> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mels = corpus
        .train
        .iter()
        .map(|u| mel_spectrogram(&u.waveform, cfg.mel()).map(|m| m.frames))
        .collect::<Result<Vec<_>>>()?;
    model.init_codebooks(&mels, cfg.seed)?;
    let mut trainer = Trainer::new(model, cfg.mel().clone(), cfg.train.clone())?;
    let teacher = OracleTeacher { n_emotions: cfg.corpus.n_emotions };
    let report = trainer.train(&corpus.train, &teacher, log)?;
    Ok((trainer, report))
}

/// Train on a saved corpus; writes the checkpoint, the speaker pool
/// (train-split speaker means), a step log, and a summary.
pub fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let corpus = load_matching_corpus(cfg, corpus_dir)?;
    ensure_dir(out_dir)?;

    let log_path = out_dir.join(TRAIN_LOG_FILE);
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?,
    );
    let (trainer, report) = fit(cfg, &corpus, Some(&mut log))?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let hash = cfg.hash();
    let pool = build_pool(&trainer.model, cfg.mel(), &corpus.train, "train split")?;
    pool.save(&out_dir.join(POOL_FILE))?;
    Checkpoint::capture(&trainer, &hash).save(&out_dir.join(CHECKPOINT_FILE))?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;

    let first = report
        .records
        .first()
        .ok_or_else(|| Error::Train("training accepted no steps".into()))?;
    let last = report.records.last().expect("non-empty records");
    let summary = TrainSummary {
        config_hash: hash,
        seed: cfg.seed,
        steps: report.records.len(),
        rejected_steps: report.rejected_steps,
        rec_first: first.losses.rec,
        rec_last: last.losses.rec,
    };
    write_json(&out_dir.join(TRAIN_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------
// anonymize
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnonSummary {
    /// Hash of the config the checkpoint was trained under.
    pub config_hash: String,
    pub seed: u64,
    pub alpha: f64,
    pub m: usize,
    pub mode: AnonMode,
    pub files: usize,
}

/// Map WAV file stems to speaker labels using a corpus manifest
/// (`manifest.jsonl`); needed for per-speaker anonymization.
fn load_label_map(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("label manifest line {}: {e}", lineno + 1)))?;
        map.insert(rec.id, rec.speaker_id.to_string());
    }
    if map.is_empty() {
        return Err(Error::Data(format!("label manifest {} is empty", path.display())));
    }
    Ok(map)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("wav") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

/// Anonymize every WAV in a directory into a mirrored directory.
///
/// Without a label manifest each file stem doubles as its speaker
/// label, so per-speaker mode degenerates to per-utterance; pass the
/// corpus `manifest.jsonl` as `labels` to group utterances by their
/// true speaker.
pub fn cmd_anonymize(
    checkpoint: &Path,
    pool_path: &Path,
    in_dir: &Path,
    out_dir: &Path,
    anon: &AnonConfig,
    labels: Option<&Path>,
) -> Result<AnonSummary> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.restore_model()?;
    let pool = SpeakerPool::load(pool_path)?;
    anon.validate(pool.len())?;
    let label_map = labels.map(load_label_map).transpose()?;

    let files = wav_files(in_dir)?;
    ensure_dir(out_dir)?;
    for path in &files {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?;
        let label = match &label_map {
            Some(map) => map.get(stem).cloned().ok_or_else(|| {
                Error::Data(format!("no speaker label for '{stem}' in the label manifest"))
            })?,
            None => stem.to_string(),
        };
        let wave = load_wav(path, StereoPolicy::Reject)?;
        let out = anonymize_utterance(&model, &ckpt.mel, &pool, anon, &wave, stem, Some(&label))?;
        save_wav(&out, out_dir.join(format!("{stem}.wav")))?;
    }

    let summary = AnonSummary {
        config_hash: ckpt.config_hash.clone(),
        seed: anon.seed,
        alpha: anon.alpha,
        m: anon.m,
        mode: anon.mode,
        files: files.len(),
    };
    write_json(&out_dir.join(ANON_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------

fn check_mel_matches(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.mel != *cfg.mel() {
        return Err(Error::Config(
            "checkpoint was trained under a different mel geometry than the active config"
                .into(),
        ));
    }
    Ok(())
}

/// Score a trained model on a saved corpus: EER original/anonymized,
/// VQ-1 token error rate, and emotion UAR under both conditions.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    pool_path: &Path,
    corpus_dir: &Path,
    out: &Path,
) -> Result<MetricsReport> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_mel_matches(cfg, &ckpt)?;
    let model = ckpt.restore_model()?;
    let pool = SpeakerPool::load(pool_path)?;
    let corpus = load_matching_corpus(cfg, corpus_dir)?;
    let protocol = ProtocolConfig {
        anon: cfg.anon.clone(),
        probe: cfg.probe.clone(),
        enroll_per_speaker: cfg.enroll_per_speaker,
        config_hash: cfg.hash(),
    };
    let report = run_protocol_with_pool(&model, &ckpt.mel, &corpus, &protocol, &pool)?;
    report.save(out)?;
    Ok(report)
}

// ---------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------

fn parse_knob_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("variant '{key}={value}': expected a number")))
}

fn parse_knob_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("variant '{key}={value}': expected an integer")))
}

/// Derive a variant config from a spec string. Recognized specs:
/// `full`, `no_spk`, `no_lin`, `no_emo` (loss-term ablations), and
/// `alpha=X`, `m=N`, `k=N`, `grl=X` (knob sweeps: mixing weight, pool
/// draw size, codebook size, gradient-reversal strength). The seed is
/// threaded into corpus/model, shuffle, and anonymization streams.
pub fn apply_variant(base: &RunConfig, spec: &str, seed: u64) -> Result<RunConfig> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.train.seed = seed;
    cfg.anon.seed = seed;
    match spec {
        "full" => {}
        "no_spk" => cfg.train.w_spk = 0.0,
        "no_lin" => cfg.train.w_lin = 0.0,
        "no_emo" => cfg.train.w_emo = 0.0,
        other => {
            let (key, value) = other.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "unknown ablation variant '{other}' (expected full, no_spk, no_lin, \
                     no_emo, alpha=X, m=N, k=N, or grl=X)"
                ))
            })?;
            match key {
                "alpha" => cfg.anon.alpha = parse_knob_f64(key, value)?,
                "m" => cfg.anon.m = parse_knob_usize(key, value)?,
                "k" => cfg.model.codebook_size = parse_knob_usize(key, value)?,
                "grl" => cfg.train.grl_scale = parse_knob_f64(key, value)?,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown ablation knob '{key}' (expected alpha, m, k, or grl)"
                    )))
                }
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Train every (variant, seed) pair on the same corpus and run the full
/// protocol on each; rows are named `<variant>@seed<N>`.
pub fn cmd_ablate(
    cfg: &RunConfig,
    corpus_dir: &Path,
    variants: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationReport> {
    cfg.validate()?;
    if variants.is_empty() {
        return Err(Error::Config("no ablation variants given".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("no ablation seeds given".into()));
    }
    let corpus = load_matching_corpus(cfg, corpus_dir)?;
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for &seed in seeds {
        for spec in variants {
            let vcfg = apply_variant(cfg, spec, seed)?;
            let (trainer, _) = fit(&vcfg, &corpus, None)?;
            let protocol = ProtocolConfig {
                anon: vcfg.anon.clone(),
                probe: vcfg.probe.clone(),
                enroll_per_speaker: vcfg.enroll_per_speaker,
                config_hash: vcfg.hash(),
            };
            let metrics = run_protocol(&trainer.model, vcfg.mel(), &corpus, &protocol)?;
            rows.push(AblationRow { name: format!("{spec}@seed{seed}"), metrics });
        }
    }
    let report = AblationReport { rows };
    report.save(out)?;
    Ok(report)
}

// ---------------------------------------------------------------------
// probe-layers
// ---------------------------------------------------------------------

fn parse_layer(token: &str) -> Result<usize> {
    token
        .trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("'{token}' is not a layer number")))
}

/// Parse comma-separated layer subsets: `1` is a single 1-based layer,
/// `2:8` an inclusive range, and a `+s` suffix appends the pooled
/// speaker vector to the probed features.
pub fn parse_layer_specs(spec: &str, n_layers: usize) -> Result<Vec<LayerSubset>> {
    let mut subsets = Vec::new();
    for part in spec.split(',') {
        let part = part.trim();
        if part.is_empty() {
            return Err(Error::Config(format!("empty layer subset in '{spec}'")));
        }
        let (body, with_speaker) = match part.strip_suffix("+s") {
            Some(body) => (body, true),
            None => (part, false),
        };
        let (lo, hi) = match body.split_once(':') {
            Some((a, b)) => (parse_layer(a)?, parse_layer(b)?),
            None => {
                let l = parse_layer(body)?;
                (l, l)
            }
        };
        if lo < 1 || hi > n_layers || lo > hi {
            return Err(Error::Config(format!(
                "layer subset '{part}' out of range 1..={n_layers}"
            )));
        }
        subsets.push(LayerSubset {
            name: part.to_string(),
            layers: (lo..=hi).collect(),
            with_speaker,
        });
    }
    Ok(subsets)
}

/// Probe quantizer-layer subsets of a trained model for speaker,
/// content, and emotion information; writes one JSON record per subset.
pub fn cmd_probe_layers(
    cfg: &RunConfig,
    checkpoint: &Path,
    corpus_dir: &Path,
    layer_spec: Option<&str>,
    out: &Path,
) -> Result<Vec<LayerProbeReport>> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    check_mel_matches(cfg, &ckpt)?;
    let model = ckpt.restore_model()?;
    let corpus = load_matching_corpus(cfg, corpus_dir)?;
    let subsets = match layer_spec {
        Some(spec) => parse_layer_specs(spec, model.cfg.n_quantizers)?,
        None => LayerSubset::standard(model.cfg.n_quantizers),
    };
    let reports = probe_layers(&model, &ckpt.mel, &corpus, &subsets, &cfg.probe)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(out, text.as_bytes())?;
    Ok(reports)
}
