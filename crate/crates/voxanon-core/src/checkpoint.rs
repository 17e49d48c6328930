//! Versioned training snapshots.
//!
//! A checkpoint is a single JSON document holding everything needed to
//! reproduce the model bit-for-bit: both parameter sets, the codebooks
//! with their EMA statistics, optimizer moments, step counters, and the
//! configs the run was built from. Restoring and re-running a forward
//! pass yields outputs identical to the captured model — serialization
//! round-trips every `f64` exactly — and the embedded configs make a
//! checkpoint self-describing, so inference commands need no separate
//! config file. The format is tagged and versioned; loading anything
//! unrecognized fails loudly instead of misinterpreting bytes.
//!
//! Bit-exactness depends on `serde_json`'s `float_roundtrip` feature
//! (enabled in the workspace manifest): floats are written in shortest
//! round-trip form and parsed back to the identical bit pattern.

use crate::bottleneck::{RvqCodebooks, SerializedCodebooks};
use crate::model::{Model, ModelConfig};
use crate::signal::MelConfig;
use crate::synthdata::write_atomic;
use crate::train::{TrainConfig, Trainer};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

pub const FORMAT_TAG: &str = "voxanon-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

type ParamMap = BTreeMap<String, (Vec<usize>, Vec<f64>)>;
type MomentMap = BTreeMap<String, (Vec<f64>, Vec<f64>)>;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Hash of the run config that produced this snapshot.
    pub config_hash: String,
    pub step: u64,
    pub total_steps: u64,
    pub model: ModelConfig,
    pub mel: MelConfig,
    pub train: TrainConfig,
    pub gen_params: ParamMap,
    pub disc_params: ParamMap,
    pub books: SerializedCodebooks,
    pub opt_gen_t: u64,
    pub opt_gen_moments: MomentMap,
    pub opt_disc_t: u64,
    pub opt_disc_moments: MomentMap,
}

impl Checkpoint {
    /// Snapshot a trainer's full state.
    pub fn capture(trainer: &Trainer, config_hash: &str) -> Checkpoint {
        let (opt_gen, opt_disc) = trainer.optimizers();
        let (opt_gen_t, opt_gen_moments) = opt_gen.to_map(&trainer.model.gen_params);
        let (opt_disc_t, opt_disc_moments) = opt_disc.to_map(&trainer.model.disc_params);
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            version: FORMAT_VERSION,
            config_hash: config_hash.to_string(),
            step: trainer.step,
            total_steps: trainer.total_steps,
            model: trainer.model.cfg.clone(),
            mel: trainer.mel_cfg.clone(),
            train: trainer.cfg.clone(),
            gen_params: trainer.model.gen_params.to_map(),
            disc_params: trainer.model.disc_params.to_map(),
            books: trainer.model.books.to_serialized(),
            opt_gen_t,
            opt_gen_moments,
            opt_disc_t,
            opt_disc_moments,
        }
    }

    fn check_format(&self) -> Result<()> {
        if self.format != FORMAT_TAG {
            return Err(Error::Checkpoint(format!(
                "unrecognized checkpoint format tag {:?}",
                self.format
            )));
        }
        if self.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                self.version
            )));
        }
        Ok(())
    }

    /// Rebuild just the model — the inference path used by
    /// anonymization and evaluation.
    pub fn restore_model(&self) -> Result<Model> {
        self.check_format()?;
        // The init seed is irrelevant: every parameter is overwritten.
        let mut model = Model::new(self.model.clone(), 0)?;
        model.set_mel(&self.mel)?;
        model.gen_params.load_map(&self.gen_params)?;
        model.disc_params.load_map(&self.disc_params)?;
        let books = RvqCodebooks::from_serialized(&self.books)?;
        if self.books.n_layers != self.model.n_quantizers
            || self.books.dim != self.model.frame_dim
            || self.books.codebook_size != self.model.codebook_size
        {
            return Err(Error::Checkpoint(format!(
                "codebooks ({} layers, {} entries, dim {}) do not match the model \
                 ({} layers, {} entries, dim {})",
                self.books.n_layers,
                self.books.codebook_size,
                self.books.dim,
                self.model.n_quantizers,
                self.model.codebook_size,
                self.model.frame_dim
            )));
        }
        model.books = books;
        Ok(model)
    }

    /// Rebuild the full trainer — model, optimizer moments, and step
    /// counters — for resuming training.
    pub fn restore_trainer(&self) -> Result<Trainer> {
        let model = self.restore_model()?;
        let mut trainer = Trainer::new(model, self.mel.clone(), self.train.clone())?;
        trainer.load_optimizer_state(
            self.opt_gen_t,
            &self.opt_gen_moments,
            self.opt_disc_t,
            &self.opt_disc_moments,
        )?;
        trainer.step = self.step;
        trainer.total_steps = self.total_steps;
        Ok(trainer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("parse {}: {e}", path.display())))?;
        ckpt.check_format()?;
        Ok(ckpt)
    }
}
