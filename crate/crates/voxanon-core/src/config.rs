//! One config file for a whole run.
//!
//! Every tunable — corpus geometry, model dims, optimizer schedule,
//! anonymization strategy, probe settings — lives in a single TOML
//! document so a run is reproducible from one artifact. Loading
//! validates ranges and cross-module consistency (the model must agree
//! with the corpus on mel bins, hop, and label spaces), rejects unknown
//! keys, and exposes a content hash that downstream artifacts embed so
//! any report can be traced back to the exact configuration.

use crate::anonymizer::AnonConfig;
use crate::eval::ProbeConfig;
use crate::model::ModelConfig;
use crate::signal::MelConfig;
use crate::synthdata::{write_atomic, CorpusConfig};
use crate::train::TrainConfig;
use crate::{Error, Result};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Everything a run needs, grouped by module.
///
/// Parsing accepts partial documents: any omitted section falls back to
/// its default, and an omitted `[model]` is derived from the corpus so
/// the two always agree on mel bins, hop, and label spaces. A present
/// section, however, must be complete — saved configs are always fully
/// spelled out, so editing one never relies on implicit fields.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RunConfig {
    /// Master seed: corpus synthesis and codebook initialization derive
    /// their streams from it (training and anonymization carry their
    /// own seeds in their sections).
    pub seed: u64,
    /// Corpus geometry; its `mel` block is the mel geometry for the
    /// whole run.
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub anon: AnonConfig,
    pub probe: ProbeConfig,
    /// Enrollment utterances reserved per speaker when building
    /// verification trials.
    pub enroll_per_speaker: usize,
}

/// The default model for a corpus: standard widths, label spaces and
/// frame geometry taken from the corpus.
fn model_for(corpus: &CorpusConfig) -> ModelConfig {
    ModelConfig {
        n_mels: corpus.mel.n_mels,
        hop: corpus.mel.hop,
        n_speakers: corpus.n_speakers,
        vocab_size: corpus.vocab_size,
        emotion_dim: corpus.n_emotions,
        ..ModelConfig::default()
    }
}

fn default_enroll() -> usize {
    2
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    corpus: CorpusConfig,
    model: Option<ModelConfig>,
    #[serde(default)]
    train: TrainConfig,
    #[serde(default)]
    anon: AnonConfig,
    #[serde(default)]
    probe: ProbeConfig,
    #[serde(default = "default_enroll")]
    enroll_per_speaker: usize,
}

impl<'de> serde::Deserialize<'de> for RunConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawRunConfig::deserialize(d)?;
        let model = raw.model.unwrap_or_else(|| model_for(&raw.corpus));
        Ok(RunConfig {
            seed: raw.seed,
            corpus: raw.corpus,
            model,
            train: raw.train,
            anon: raw.anon,
            probe: raw.probe,
            enroll_per_speaker: raw.enroll_per_speaker,
        })
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model = model_for(&corpus);
        RunConfig {
            seed: 0,
            corpus,
            model,
            train: TrainConfig::default(),
            anon: AnonConfig::default(),
            probe: ProbeConfig::default(),
            enroll_per_speaker: 2,
        }
    }
}

impl RunConfig {
    /// Reduced preset sized for minutes-scale smoke runs on a laptop
    /// CPU: a small corpus at a short hop and a narrow model.
    pub fn smoke() -> Self {
        let mel = MelConfig { n_fft: 256, win: 256, hop: 64, ..MelConfig::default() };
        let corpus = CorpusConfig {
            n_speakers: 8,
            vocab_size: 16,
            n_utterances: 200,
            tokens_min: 2,
            tokens_max: 3,
            dev_speakers: 1,
            test_speakers: 1,
            mel,
            ..CorpusConfig::default()
        };
        let model = ModelConfig::smoke(
            corpus.n_speakers,
            corpus.vocab_size,
            corpus.mel.n_mels,
            corpus.mel.hop,
        );
        RunConfig {
            seed: 0,
            corpus,
            model,
            train: TrainConfig::default(),
            anon: AnonConfig::default(),
            probe: ProbeConfig::default(),
            enroll_per_speaker: 2,
        }
    }

    /// The run's mel geometry (owned by the corpus section).
    pub fn mel(&self) -> &MelConfig {
        &self.corpus.mel
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        // The anonymizer's pool-size bound is checked once the pool
        // exists; everything else is checkable now.
        self.anon.validate(usize::MAX)?;
        if self.probe.epochs == 0 {
            return Err(Error::Config("probe.epochs must be at least 1".into()));
        }
        if !(self.probe.lr.is_finite() && self.probe.lr > 0.0) {
            return Err(Error::Config(format!("probe.lr must be positive, got {}", self.probe.lr)));
        }
        if self.enroll_per_speaker == 0 {
            return Err(Error::Config("enroll_per_speaker must be at least 1".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.train.lr0.is_finite() && self.train.lr0 > 0.0) {
            return Err(Error::Config(format!("train.lr0 must be positive, got {}", self.train.lr0)));
        }
        for (name, w) in [
            ("train.w_spk", self.train.w_spk),
            ("train.w_lin", self.train.w_lin),
            ("train.w_emo", self.train.w_emo),
            ("train.grl_scale", self.train.grl_scale),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        // Cross-module consistency: the model is built for exactly this
        // corpus and mel geometry.
        let mel = self.mel();
        if self.model.n_mels != mel.n_mels {
            return Err(Error::Config(format!(
                "model.n_mels {} does not match corpus mel bins {}",
                self.model.n_mels, mel.n_mels
            )));
        }
        if self.model.hop != mel.hop {
            return Err(Error::Config(format!(
                "model.hop {} does not match mel hop {}",
                self.model.hop, mel.hop
            )));
        }
        if self.model.n_speakers != self.corpus.n_speakers {
            return Err(Error::Config(format!(
                "model.n_speakers {} does not match corpus speakers {}",
                self.model.n_speakers, self.corpus.n_speakers
            )));
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::Config(format!(
                "model.vocab_size {} does not match corpus vocab {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.model.emotion_dim != self.corpus.n_emotions {
            return Err(Error::Config(format!(
                "model.emotion_dim {} does not match corpus emotion families {}",
                self.model.emotion_dim, self.corpus.n_emotions
            )));
        }
        Ok(())
    }

    /// Content hash over the canonical serialized form; embedded in
    /// every artifact this config produces.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }
}
