//! Full model assembly: encoders, quantizer, distillation heads,
//! decoder, and discriminator behind one configuration.
//!
//! Generator-side parameters (everything the reconstruction objective
//! trains) and discriminator parameters live in two separate parameter
//! sets so the alternating GAN updates never leak optimizer state across
//! sides. Codebooks sit outside both: they learn by EMA, not gradients.

use crate::bottleneck::{
    reconstruct_layers, rvq_quantize, straight_through, QuantizerState, RvqCodebooks,
};
use crate::decoder::{Decoder, DecoderInput, Discriminator};
use crate::distill::DistillHeads;
use crate::encoders::{subtract_speaker, SpeakerEncoder, SpeechEncoder};
use crate::nn::tape::{Tape, Var};
use crate::nn::{DifferentiableMel, ParamSet};
use crate::rng::derive_rng;
use crate::signal::{mel_spectrogram, MelConfig, Waveform};
use crate::{Error, Result};
use ndarray::Array2;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Mel bins consumed by both encoders.
    pub n_mels: usize,
    /// Width of the frame representation (and of the speaker vector,
    /// which is subtracted from it frame-wise).
    pub frame_dim: usize,
    pub enc_width: usize,
    pub enc_layers: usize,
    pub enc_kernel: usize,
    pub spk_blocks: usize,
    pub spk_kernel: usize,
    pub spk_attn_layers: usize,
    pub spk_heads: usize,
    /// Quantizer layers (first = linguistic content).
    pub n_quantizers: usize,
    pub codebook_size: usize,
    pub rvq_decay: f64,
    pub n_speakers: usize,
    pub vocab_size: usize,
    pub emotion_dim: usize,
    pub dec_width: usize,
    pub disc_width: usize,
    /// Upsampling factor from frames to samples; must match the mel hop.
    pub hop: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_mels: 80,
            frame_dim: 32,
            enc_width: 64,
            enc_layers: 3,
            enc_kernel: 5,
            spk_blocks: 2,
            spk_kernel: 5,
            spk_attn_layers: 1,
            spk_heads: 4,
            n_quantizers: 8,
            codebook_size: 256,
            rvq_decay: 0.99,
            n_speakers: 20,
            vocab_size: 32,
            emotion_dim: 4,
            dec_width: 64,
            disc_width: 16,
            hop: 256,
        }
    }
}

impl ModelConfig {
    /// Reduced preset for fast smoke training in tests; sized against a
    /// corpus built with the same speaker/vocab counts.
    pub fn smoke(n_speakers: usize, vocab_size: usize, n_mels: usize, hop: usize) -> Self {
        ModelConfig {
            n_mels,
            frame_dim: 8,
            enc_width: 16,
            enc_layers: 2,
            enc_kernel: 5,
            spk_blocks: 1,
            spk_kernel: 5,
            spk_attn_layers: 1,
            spk_heads: 2,
            n_quantizers: 4,
            codebook_size: 32,
            rvq_decay: 0.95,
            n_speakers,
            vocab_size,
            emotion_dim: 4,
            dec_width: 16,
            disc_width: 6,
            hop,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_quantizers < 2 {
            return Err(Error::Config(format!(
                "need at least 2 quantizer layers, got {}",
                self.n_quantizers
            )));
        }
        if self.frame_dim == 0 || self.enc_width == 0 || self.dec_width == 0 {
            return Err(Error::Config("zero-width layer".into()));
        }
        if self.n_speakers < 2 || self.vocab_size < 2 || self.emotion_dim < 2 {
            return Err(Error::Config("degenerate label spaces".into()));
        }
        crate::decoder::factor_strides(self.hop)?;
        Ok(())
    }
}

/// The trainable system.
pub struct Model {
    pub cfg: ModelConfig,
    pub gen_params: ParamSet,
    pub disc_params: ParamSet,
    pub speech_enc: SpeechEncoder,
    pub speaker_enc: SpeakerEncoder,
    pub books: RvqCodebooks,
    pub heads: DistillHeads,
    pub decoder: Decoder,
    pub disc: Discriminator,
    pub mel_loss: DifferentiableMel,
}

/// Tape handles produced by one training-mode forward pass.
pub struct TrainForward {
    /// Differentiable speaker-subtracted representation (`T x d`).
    pub r1: Var,
    /// Pooled speaker vector (`1 x d`).
    pub speaker: Var,
    /// Off-tape quantization of the current `r1` value.
    pub st: QuantizerState,
    /// Content layer with straight-through gradient into `r1`.
    pub q1_st: Var,
    /// Aggregate of layers 2..N with straight-through gradient.
    pub qres_st: Var,
    /// Full reconstruction (all layers) with straight-through gradient.
    pub full_st: Var,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = derive_rng(seed, "model-init", &[]);
        let mut gen_params = ParamSet::new();
        let speech_enc = SpeechEncoder::new(
            &mut gen_params,
            &mut rng,
            "speech_enc",
            cfg.n_mels,
            cfg.enc_width,
            cfg.frame_dim,
            cfg.enc_layers,
            cfg.enc_kernel,
        );
        let speaker_enc = SpeakerEncoder::new(
            &mut gen_params,
            &mut rng,
            "speaker_enc",
            cfg.n_mels,
            cfg.frame_dim,
            cfg.spk_blocks,
            cfg.spk_kernel,
            cfg.spk_attn_layers,
            cfg.spk_heads,
        );
        let heads = DistillHeads::new(
            &mut gen_params,
            &mut rng,
            cfg.frame_dim,
            cfg.frame_dim,
            cfg.n_speakers,
            cfg.vocab_size,
            cfg.emotion_dim,
        );
        let decoder = Decoder::new(
            &mut gen_params,
            &mut rng,
            cfg.frame_dim,
            cfg.frame_dim,
            cfg.hop,
            cfg.dec_width,
        )?;
        let mut disc_params = ParamSet::new();
        let disc = Discriminator::new(&mut disc_params, &mut rng, cfg.disc_width);
        let books = RvqCodebooks::new(
            cfg.n_quantizers,
            cfg.codebook_size,
            cfg.frame_dim,
            cfg.rvq_decay,
        );
        let mel_cfg = MelConfig { n_mels: cfg.n_mels, ..MelConfig::default() };
        Ok(Model {
            mel_loss: DifferentiableMel::new(&MelConfig { hop: cfg.hop, ..mel_cfg }),
            cfg,
            gen_params,
            disc_params,
            speech_enc,
            speaker_enc,
            books,
            heads,
            decoder,
            disc,
        })
    }

    /// Replace the loss-path mel config (e.g. when the corpus uses a
    /// reduced front end). The hop must match the decoder's.
    pub fn set_mel(&mut self, mel: &MelConfig) -> Result<()> {
        if mel.hop != self.cfg.hop {
            return Err(Error::Config(format!(
                "mel hop {} does not match decoder hop {}",
                mel.hop, self.cfg.hop
            )));
        }
        if mel.n_mels != self.cfg.n_mels {
            return Err(Error::Config(format!(
                "mel bins {} do not match encoder input {}",
                mel.n_mels, self.cfg.n_mels
            )));
        }
        self.mel_loss = DifferentiableMel::new(mel);
        Ok(())
    }

    /// Differentiable encode: mel frames to (`r1`, speaker vector).
    pub fn encode(&self, tape: &mut Tape, bound: &[Var], mel: Var) -> Result<(Var, Var)> {
        let fr = self.speech_enc.forward(tape, bound, mel);
        let s = self.speaker_enc.forward(tape, bound, mel)?;
        let r1 = subtract_speaker(tape, fr, s);
        Ok((r1, s))
    }

    /// Training-mode forward: encode, quantize the current value, and
    /// build straight-through views for every loss consumer.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        mel: &Array2<f64>,
    ) -> Result<TrainForward> {
        let mel_var = tape.constant(mel.clone());
        let (r1, speaker) = self.encode(tape, bound, mel_var)?;
        let r1_val = tape.value(r1).clone();
        let st = rvq_quantize(&r1_val, &self.books)?;

        // Content layer: forward q_1, backward identity into r1.
        let q1_const = tape.constant(st.quantized[0].clone());
        let q1_st = tape.straight_through(r1, q1_const);

        // Residual aggregate: forward sum(q_2..q_N), backward identity
        // into x_2 = r1 - q_1.
        let q1_const2 = tape.constant(st.quantized[0].clone());
        let x2 = tape.sub(r1, q1_const2);
        let rest: Vec<usize> = (2..=self.books.n_layers).collect();
        let qres_const = tape.constant(reconstruct_layers(&st, &rest)?);
        let qres_st = tape.straight_through(x2, qres_const);

        let full_st = straight_through(tape, r1, &st);
        Ok(TrainForward { r1, speaker, st, q1_st, qres_st, full_st })
    }

    /// Value-level encode of a waveform (inference path): returns
    /// (quantizer state, speaker vector, mel frame count).
    pub fn encode_waveform(&self, wave: &Waveform, mel_cfg: &MelConfig) -> Result<(QuantizerState, Array2<f64>)> {
        let mel = mel_spectrogram(wave, mel_cfg)?;
        let mut tape = Tape::new();
        let bound = self.gen_params.bind_all_const(&mut tape);
        let mel_var = tape.constant(mel.frames);
        let (r1, s) = self.encode(&mut tape, &bound, mel_var)?;
        let r1_val = tape.value(r1).clone();
        let s_val = tape.value(s).clone();
        let st = rvq_quantize(&r1_val, &self.books)?;
        Ok((st, s_val))
    }

    /// Value-level decode: full quantized reconstruction plus a caller
    /// supplied speaker vector (the anonymizer swaps this out).
    pub fn decode_with_speaker(
        &self,
        st: &QuantizerState,
        speaker: &Array2<f64>,
    ) -> Result<Vec<f64>> {
        let full = reconstruct_layers(st, &(1..=st.n_layers()).collect::<Vec<_>>())?;
        let mut tape = Tape::new();
        let bound = self.gen_params.bind_all_const(&mut tape);
        let q = tape.constant(full);
        let s = tape.constant(speaker.clone());
        let wave = self.decoder.decode(&mut tape, &bound, DecoderInput { speaker: s, quantized: q })?;
        Ok(tape.value(wave).column(0).to_vec())
    }

    /// Pooled speaker vector of a waveform (inference path).
    pub fn speaker_vector(&self, wave: &Waveform, mel_cfg: &MelConfig) -> Result<Array2<f64>> {
        let mel = mel_spectrogram(wave, mel_cfg)?;
        let mut tape = Tape::new();
        let bound = self.gen_params.bind_all_const(&mut tape);
        let mel_var = tape.constant(mel.frames);
        let s = self.speaker_enc.forward(&mut tape, &bound, mel_var)?;
        Ok(tape.value(s).clone())
    }

    /// Initialize codebooks from encoder outputs over sample mels,
    /// sequentially through the residual cascade.
    pub fn init_codebooks(&mut self, mels: &[Array2<f64>], seed: u64) -> Result<()> {
        let mut rows: Vec<Array2<f64>> = Vec::new();
        for mel in mels {
            let mut tape = Tape::new();
            let bound = self.gen_params.bind_all_const(&mut tape);
            let mel_var = tape.constant(mel.clone());
            let (r1, _) = self.encode(&mut tape, &bound, mel_var)?;
            rows.push(tape.value(r1).clone());
        }
        if rows.is_empty() {
            return Err(Error::Train("no mels supplied for codebook init".into()));
        }
        let total: usize = rows.iter().map(|r| r.nrows()).sum();
        let mut all = Array2::zeros((total, self.cfg.frame_dim));
        let mut at = 0;
        for r in rows {
            all.slice_mut(ndarray::s![at..at + r.nrows(), ..]).assign(&r);
            at += r.nrows();
        }
        let mut rng = derive_rng(seed, "codebook-init", &[]);
        self.books.init_from_frames(&all, &mut rng)
    }
}
