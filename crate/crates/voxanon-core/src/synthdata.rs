//! Synthetic corpus with known speaker / content / emotion factors.
//!
//! Real speech gives no ground truth for "did the residual layers drop
//! speaker identity?". This generator does: every utterance is additive
//! harmonic synthesis plus formant-shaped aspiration noise, where
//! - the **speaker** controls a fixed spectral envelope and base pitch,
//! - each **content token** controls a two-formant mask over a fixed
//!   16-mel-frame duration (the mask shapes a fixed-frequency carrier
//!   comb, so the token stays legible at any pitch), and
//! - the **emotion** controls the pitch contour and energy modulation
//!   (flat / rising / falling / vibrato-with-tremolo).
//!
//! The three factors are sampled independently, so any statistical
//! dependence a probe finds in learned representations was put there by
//! the model, not the data. Oracle teachers return the ground-truth
//! factors behind the same interface a pretrained semantic/emotion
//! teacher would occupy.

use crate::rng::{derive_rng, derive_rng_str};
use crate::signal::{mel_spectrogram, MelConfig, MelSpectrogram, Waveform};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// Mel frames per content token (fixed; keeps token-to-frame alignment
/// trivial, mirroring frame-level k-means token targets).
pub const FRAMES_PER_TOKEN: usize = 16;

/// Emotion families implemented by the contour generator.
pub const N_EMOTIONS: usize = 4;

/// Ground-truth factors of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub speaker_id: usize,
    pub content: Vec<usize>,
    pub emotion_id: usize,
}

impl FactorSpec {
    pub fn validate(&self, s: usize, v: usize, e: usize) -> Result<()> {
        if self.content.is_empty() {
            return Err(Error::Data("empty content token sequence".into()));
        }
        if self.speaker_id >= s {
            return Err(Error::Data(format!("speaker_id {} out of range {s}", self.speaker_id)));
        }
        if self.emotion_id >= e {
            return Err(Error::Data(format!("emotion_id {} out of range {e}", self.emotion_id)));
        }
        if let Some(&t) = self.content.iter().find(|&&t| t >= v) {
            return Err(Error::Data(format!("token {t} out of range {v}")));
        }
        Ok(())
    }
}

/// A generated waveform with its factors and frame-aligned token labels.
#[derive(Debug, Clone)]
pub struct LabeledUtterance {
    pub id: String,
    pub waveform: Waveform,
    pub spec: FactorSpec,
    /// Per-mel-frame token id; length equals the mel frame count T.
    pub frame_tokens: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Corpus shape: factor cardinalities, utterance sizing, and the
/// speaker-disjoint split counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// S: number of speakers (≥ 8).
    pub n_speakers: usize,
    /// V: content vocabulary size (16 ..= 64 distinct formant patterns).
    pub vocab_size: usize,
    /// E: emotion classes (exactly 4 contour families are implemented).
    pub n_emotions: usize,
    pub n_utterances: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Speakers reserved for the dev split (taken from the top of the
    /// speaker range; train gets the remainder).
    pub dev_speakers: usize,
    /// Speakers reserved for the test split.
    pub test_speakers: usize,
    pub mel: MelConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_speakers: 20,
            vocab_size: 32,
            n_emotions: 4,
            n_utterances: 200,
            tokens_min: 3,
            tokens_max: 8,
            dev_speakers: 4,
            test_speakers: 4,
            mel: MelConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        if self.n_speakers < 8 {
            return Err(Error::Config(format!("need at least 8 speakers, got {}", self.n_speakers)));
        }
        if self.vocab_size < 16 {
            return Err(Error::Config(format!("need vocab of at least 16, got {}", self.vocab_size)));
        }
        if self.vocab_size > TOKEN_GRID * TOKEN_GRID {
            return Err(Error::Config(format!(
                "vocab is capped at {} distinct formant patterns, got {}",
                TOKEN_GRID * TOKEN_GRID,
                self.vocab_size
            )));
        }
        if self.n_emotions != N_EMOTIONS {
            return Err(Error::Config(format!(
                "exactly {N_EMOTIONS} emotion contour families are implemented, got {}",
                self.n_emotions
            )));
        }
        if self.tokens_min == 0 || self.tokens_min > self.tokens_max {
            return Err(Error::Config(format!(
                "need 1 <= tokens_min <= tokens_max, got {}..{}",
                self.tokens_min, self.tokens_max
            )));
        }
        if self.dev_speakers + self.test_speakers >= self.n_speakers {
            return Err(Error::Config(format!(
                "dev ({}) + test ({}) speakers must leave at least one train speaker of {}",
                self.dev_speakers, self.test_speakers, self.n_speakers
            )));
        }
        if self.n_utterances == 0 {
            return Err(Error::Config("n_utterances must be positive".into()));
        }
        if FRAMES_PER_TOKEN * self.mel.hop < self.mel.hop {
            return Err(Error::Config("token duration shorter than one hop".into()));
        }
        Ok(())
    }

    pub fn split_of(&self, speaker_id: usize) -> Split {
        let train = self.n_speakers - self.dev_speakers - self.test_speakers;
        if speaker_id < train {
            Split::Train
        } else if speaker_id < train + self.dev_speakers {
            Split::Dev
        } else {
            Split::Test
        }
    }

    pub fn train_speaker_count(&self) -> usize {
        self.n_speakers - self.dev_speakers - self.test_speakers
    }
}

/// The full generated corpus, split speaker-disjointly.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub cfg: CorpusConfig,
    pub seed: u64,
    pub train: Vec<LabeledUtterance>,
    pub dev: Vec<LabeledUtterance>,
    pub test: Vec<LabeledUtterance>,
}

impl Corpus {
    pub fn split(&self, s: Split) -> &[LabeledUtterance] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &LabeledUtterance> {
        self.train.iter().chain(self.dev.iter()).chain(self.test.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// --- speaker / token / emotion character ---

/// Per-speaker voice: base pitch plus a smooth spectral envelope.
/// Derived from the speaker id alone (fixed salt), so a speaker sounds
/// the same in every corpus and utterance.
struct SpeakerVoice {
    f0_base: f64,
    /// Cosine-series log-envelope coefficients (amplitude, phase) pairs.
    env: Vec<(f64, f64)>,
}

const VOICE_SALT: u64 = 0x5eaf_c0de;
impl SpeakerVoice {
    fn new(speaker_id: usize, n_speakers: usize) -> Self {
        // Base pitch spread geometrically over [110, 250] Hz.
        let frac = if n_speakers > 1 {
            speaker_id as f64 / (n_speakers - 1) as f64
        } else {
            0.0
        };
        let f0_base = 110.0 * (250.0f64 / 110.0).powf(frac);
        let mut rng = derive_rng(VOICE_SALT, "speaker-voice", &[speaker_id as u64]);
        let env = (0..6)
            .map(|_| {
                let a = rng.gen::<f64>() * 1.8 - 0.9;
                let p = rng.gen::<f64>() * 2.0 * std::f64::consts::PI;
                (a, p)
            })
            .collect();
        SpeakerVoice { f0_base, env }
    }

    /// Smooth positive envelope over frequency.
    fn envelope(&self, f: f64, fmax: f64) -> f64 {
        let mut log_e = 0.0;
        for (j, &(a, p)) in self.env.iter().enumerate() {
            log_e += a * ((j + 1) as f64 * std::f64::consts::PI * f / fmax + p).cos();
        }
        log_e.exp()
    }
}

/// Two-formant Gaussian mask for a content token, derived from the token
/// id alone. Formant centers sit on a fixed 8x8 frequency grid indexed
/// by the token id, so any two tokens differ by at least one grid step
/// in f1 or f2; randomly drawn centers can land arbitrarily close
/// together and make two tokens acoustically indistinguishable, which
/// would break the corpus's probe-identifiability contract. Both axes
/// live in the aspiration band (above `NOISE_FLOOR_HZ`), where the
/// fixed carrier comb samples them independently of pitch.
struct TokenMask {
    f1: f64,
    b1: f64,
    f2: f64,
    b2: f64,
}

/// Grid points per formant axis; caps the usable vocabulary at
/// `TOKEN_GRID`^2 distinct patterns.
const TOKEN_GRID: usize = 8;

impl TokenMask {
    fn new(token: usize) -> Self {
        // Diagonal interleave: token -> (i, j) is a bijection on the
        // 8x8 grid in which consecutive token ids move along BOTH
        // axes, so a small vocabulary (e.g. 16) still spreads over the
        // full f1 and f2 ranges instead of exhausting one axis first.
        let i = token % TOKEN_GRID;
        let j = (i + token / TOKEN_GRID) % TOKEN_GRID;
        let step = 1.0 / (TOKEN_GRID - 1) as f64;
        TokenMask {
            f1: 1700.0 + 1400.0 * i as f64 * step,
            b1: 130.0,
            f2: 3400.0 + 3600.0 * j as f64 * step,
            b2: 220.0,
        }
    }

    fn mask(&self, f: f64) -> f64 {
        let g1 = (-(f - self.f1).powi(2) / (2.0 * self.b1 * self.b1)).exp();
        let g2 = (-(f - self.f2).powi(2) / (2.0 * self.b2 * self.b2)).exp();
        0.05 + g1 + 0.85 * g2
    }
}

/// The voiced and aspiration stacks occupy disjoint frequency lanes.
///
/// Harmonics move with the pitch contour, so anything they carry is
/// smeared along the frequency axis; worse, a moving harmonic passing
/// near a fixed carrier beats at the (arbitrarily small) difference
/// frequency — a slow loudness wobble that no analysis window can
/// remove and that masks the emotion's energy contour. Keeping all
/// harmonics below `VOICED_FMAX_HZ` and all carriers above
/// `NOISE_FLOOR_HZ` removes such collisions: pitch and voice live in
/// the low lane, the token formant pattern is sampled at fixed carrier
/// frequencies in the high lane (as fricative/aspiration noise is
/// shaped in real speech), and every residual beat is at least as fast
/// as the carrier spacing, so it averages out within a few frames. The
/// voiced and aspiration lanes are given equal power, and each token's
/// comb is power-normalized so content changes spectral shape, never
/// loudness.
const VOICED_FMAX_HZ: f64 = 1500.0;
const NOISE_SPACING_HZ: f64 = 125.0;
const NOISE_FLOOR_HZ: f64 = 1550.0;

/// Per-sample pitch multiplier and amplitude for an emotion family.
/// `pos` is position in [0, 1); `t_sec` is absolute time.
fn emotion_contour(emotion_id: usize, pos: f64, t_sec: f64) -> (f64, f64) {
    match emotion_id {
        // Flat.
        0 => (1.0, 1.0),
        // Rising pitch and energy.
        1 => (0.85 + 0.40 * pos, 0.75 + 0.60 * pos),
        // Falling pitch and energy.
        2 => (1.25 - 0.40 * pos, 1.35 - 0.60 * pos),
        // Vibrato + tremolo.
        3 => (
            1.0 + 0.08 * (2.0 * std::f64::consts::PI * 5.5 * t_sec).sin(),
            1.0 + 0.45 * (2.0 * std::f64::consts::PI * 3.1 * t_sec).sin(),
        ),
        _ => unreachable!("emotion families are validated to [0, {N_EMOTIONS})"),
    }
}

/// Deterministic additive synthesis of one utterance.
///
/// The waveform has exactly `(T - 1) * hop` samples where
/// `T = FRAMES_PER_TOKEN * content.len()`, so its mel spectrogram has
/// exactly T frames and `frame_tokens` aligns one-to-one.
pub fn synth_utterance(
    spec: &FactorSpec,
    seed: u64,
    cfg: &CorpusConfig,
) -> Result<LabeledUtterance> {
    cfg.validate()?;
    spec.validate(cfg.n_speakers, cfg.vocab_size, cfg.n_emotions)?;
    let sr = cfg.mel.sample_rate as f64;
    let hop = cfg.mel.hop;
    let total_frames = FRAMES_PER_TOKEN * spec.content.len();
    let len = (total_frames - 1) * hop;
    if len == 0 {
        return Err(Error::Data("utterance shorter than one hop".into()));
    }

    let voice = SpeakerVoice::new(spec.speaker_id, cfg.n_speakers);
    let fmax = cfg.mel.fmax;
    // Highest pitch multiplier across families is 1.25; keep all
    // harmonics inside the voiced lane at peak pitch.
    let n_harm = ((VOICED_FMAX_HZ / (voice.f0_base * 1.25)) as usize).clamp(3, 48);

    // Voiced lane: the speaker's envelope over harmonics of the base
    // pitch, the same for every token, normalized to unit power.
    let mut amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let f = h as f64 * voice.f0_base;
            voice.envelope(f, fmax) / (1.0 + 0.05 * h as f64)
        })
        .collect();
    let p: f64 = amps.iter().map(|x| x * x).sum();
    let k = 1.0 / p.sqrt().max(1e-12);
    for x in &mut amps {
        *x *= k;
    }

    // Aspiration lane: fixed carrier comb sampling the token mask,
    // power-normalized per token.
    let carrier_freqs: Vec<f64> = {
        let mut fs = Vec::new();
        let mut f = NOISE_FLOOR_HZ;
        while f <= 0.975 * fmax {
            fs.push(f);
            f += NOISE_SPACING_HZ;
        }
        fs
    };
    let noise_amps: Vec<Vec<f64>> = spec
        .content
        .iter()
        .map(|&tok| {
            let mask = TokenMask::new(tok);
            let mut na: Vec<f64> = carrier_freqs
                .iter()
                .map(|&f| voice.envelope(f, fmax) * mask.mask(f))
                .collect();
            let p: f64 = na.iter().map(|x| x * x).sum();
            let k = 1.0 / p.sqrt().max(1e-12);
            for x in &mut na {
                *x *= k;
            }
            na
        })
        .collect();

    // Utterance-specific phases keep different takes distinct while
    // identical (spec, seed) stays bit-identical.
    let mut rng = derive_rng(seed, "utterance-phase", &[
        spec.speaker_id as u64,
        spec.emotion_id as u64,
    ]);
    let mut phases: Vec<f64> = (0..n_harm)
        .map(|_| rng.gen::<f64>() * 2.0 * std::f64::consts::PI)
        .collect();
    let mut noise_rng = derive_rng(seed, "utterance-noise", &[
        spec.speaker_id as u64,
        spec.emotion_id as u64,
    ]);
    let mut noise_phases: Vec<f64> = (0..carrier_freqs.len())
        .map(|_| noise_rng.gen::<f64>() * 2.0 * std::f64::consts::PI)
        .collect();
    let carrier_steps: Vec<f64> = carrier_freqs
        .iter()
        .map(|&f| 2.0 * std::f64::consts::PI * f / sr)
        .collect();

    let mut samples = vec![0.0f64; len];
    for (n, out) in samples.iter_mut().enumerate() {
        let pos = n as f64 / len as f64;
        let t_sec = n as f64 / sr;
        let (pitch_mul, amp) = emotion_contour(spec.emotion_id, pos, t_sec);
        let f0 = voice.f0_base * pitch_mul;
        let token_idx = ((n / hop) / FRAMES_PER_TOKEN).min(spec.content.len() - 1);
        let mut s = 0.0;
        for h in 0..n_harm {
            s += amps[h] * phases[h].sin();
            phases[h] += 2.0 * std::f64::consts::PI * (h + 1) as f64 * f0 / sr;
        }
        let na = &noise_amps[token_idx];
        for c in 0..carrier_steps.len() {
            s += na[c] * noise_phases[c].sin();
            noise_phases[c] += carrier_steps[c];
        }
        *out = amp * s;
    }
    // Peak-normalize to 0.7: keeps within-utterance modulation (the
    // emotion cue) while standardizing loudness across utterances.
    let peak = samples.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if peak > 0.0 {
        let k = 0.7 / peak;
        for s in &mut samples {
            *s *= k;
        }
    }

    let frame_tokens: Vec<usize> = (0..total_frames)
        .map(|f| spec.content[(f / FRAMES_PER_TOKEN).min(spec.content.len() - 1)])
        .collect();
    Ok(LabeledUtterance {
        id: String::new(),
        waveform: Waveform::new(samples, cfg.mel.sample_rate),
        spec: spec.clone(),
        frame_tokens,
    })
}

/// Factor assignment for utterance `i`: speakers round-robin (balanced),
/// content and emotion independent uniform draws from a per-utterance
/// stream.
pub fn sample_factors(cfg: &CorpusConfig, seed: u64, i: usize) -> FactorSpec {
    let mut rng = derive_rng(seed, "factors", &[i as u64]);
    let n_tokens = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
    let content = (0..n_tokens).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let emotion_id = rng.gen_range(0..cfg.n_emotions);
    FactorSpec {
        speaker_id: i % cfg.n_speakers,
        content,
        emotion_id,
    }
}

/// Generates the full corpus: balanced speakers, independent factors,
/// speaker-disjoint train/dev/test splits.
pub fn build_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let mut corpus = Corpus {
        cfg: cfg.clone(),
        seed,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for i in 0..cfg.n_utterances {
        let spec = sample_factors(cfg, seed, i);
        let utt_seed = derive_rng(seed, "utterance-seed", &[i as u64]).gen::<u64>();
        let mut utt = synth_utterance(&spec, utt_seed, cfg)?;
        utt.id = format!("utt{i:05}");
        match cfg.split_of(spec.speaker_id) {
            Split::Train => corpus.train.push(utt),
            Split::Dev => corpus.dev.push(utt),
            Split::Test => corpus.test.push(utt),
        }
    }
    Ok(corpus)
}

// --- oracle teachers ---

/// Ground-truth semantic teacher: per-frame content token ids. Stands in
/// for a pretrained feature extractor plus k-means tokenizer.
pub fn oracle_semantic_teacher(u: &LabeledUtterance) -> Vec<usize> {
    u.frame_tokens.clone()
}

/// Ground-truth emotion teacher: `T x E` logits, one-hot on the true
/// class plus small fixed noise (deterministic per utterance), so the
/// per-frame argmax is always `emotion_id` and distillation targets are
/// not degenerate delta functions.
pub fn oracle_emotion_teacher(u: &LabeledUtterance, n_emotions: usize) -> Array2<f64> {
    let t = u.frame_tokens.len();
    let mut rng = derive_rng_str(VOICE_SALT, "emotion-teacher", &format!(
        "{}-{}-{}",
        u.spec.speaker_id, u.spec.emotion_id, u.id
    ));
    let mut out = Array2::zeros((t, n_emotions));
    for f in 0..t {
        for e in 0..n_emotions {
            out[[f, e]] = rng.gen::<f64>() * 0.05;
        }
        out[[f, u.spec.emotion_id]] += 1.0;
    }
    out
}

// --- oracle probe features ---

/// Utterance-level oracle features from a mel spectrogram: per-bin mean,
/// per-bin standard deviation, and first-half-minus-second-half mean
/// (`1 x 3*n_mels`). Mean captures spectral envelope (speaker), std and
/// half-difference capture modulation and contour direction (emotion).
pub fn oracle_utterance_features(mel: &MelSpectrogram) -> Array2<f64> {
    let t = mel.n_frames();
    let m = mel.n_mels();
    let mut out = Array2::zeros((1, 3 * m));
    let half = t / 2;
    for j in 0..m {
        let col = mel.frames.column(j);
        let mean = col.sum() / t as f64;
        let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        let first: f64 = col.iter().take(half).sum::<f64>() / half.max(1) as f64;
        let second: f64 = col.iter().skip(half).sum::<f64>() / (t - half).max(1) as f64;
        out[[0, j]] = mean;
        out[[0, m + j]] = var.sqrt();
        out[[0, 2 * m + j]] = first - second;
    }
    out
}

/// Frame-level oracle features: mel frames with the per-utterance mean
/// removed per bin. In the log domain the speaker envelope is additive,
/// so mean subtraction mostly cancels it and leaves the token pattern.
pub fn oracle_frame_features(mel: &MelSpectrogram) -> Array2<f64> {
    let t = mel.n_frames();
    let m = mel.n_mels();
    let mut out = mel.frames.clone();
    for j in 0..m {
        let mean = out.column(j).sum() / t as f64;
        for i in 0..t {
            out[[i, j]] -= mean;
        }
    }
    out
}

/// Convenience: mel under the corpus config.
pub fn corpus_mel(u: &LabeledUtterance, cfg: &CorpusConfig) -> Result<MelSpectrogram> {
    mel_spectrogram(&u.waveform, &cfg.mel)
}

// --- persistence ---

/// One manifest line per utterance.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub speaker_id: usize,
    pub emotion_id: usize,
    pub tokens: Vec<usize>,
    pub split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusMeta {
    cfg: CorpusConfig,
    seed: u64,
}

/// Writes `corpus.json`, `manifest.jsonl`, and a `wav/` directory.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let meta = CorpusMeta { cfg: corpus.cfg.clone(), seed: corpus.seed };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    write_atomic(&dir.join("corpus.json"), meta_json.as_bytes())?;

    let mut manifest = String::new();
    for (split, utts) in [
        (Split::Train, &corpus.train),
        (Split::Dev, &corpus.dev),
        (Split::Test, &corpus.test),
    ] {
        for u in utts.iter() {
            let rel = format!("wav/{}.wav", u.id);
            crate::signal::save_wav(&u.waveform, dir.join(&rel))?;
            let rec = ManifestRecord {
                id: u.id.clone(),
                path: rel,
                speaker_id: u.spec.speaker_id,
                emotion_id: u.spec.emotion_id,
                tokens: u.spec.content.clone(),
                split,
            };
            manifest.push_str(&serde_json::to_string(&rec)?);
            manifest.push('\n');
        }
    }
    write_atomic(&dir.join("manifest.jsonl"), manifest.as_bytes())
}

/// Reads a corpus saved by [`save_corpus`], validating frame alignment.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let meta_path = dir.join("corpus.json");
    let meta_bytes = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CorpusMeta = serde_json::from_slice(&meta_bytes)?;
    meta.cfg.validate()?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = std::fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut corpus = Corpus {
        cfg: meta.cfg.clone(),
        seed: meta.seed,
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| {
            Error::Data(format!("manifest line {}: {e}", lineno + 1))
        })?;
        let waveform = crate::signal::load_wav(dir.join(&rec.path), crate::signal::StereoPolicy::Reject)?;
        let spec = FactorSpec {
            speaker_id: rec.speaker_id,
            content: rec.tokens.clone(),
            emotion_id: rec.emotion_id,
        };
        spec.validate(meta.cfg.n_speakers, meta.cfg.vocab_size, meta.cfg.n_emotions)?;
        let expect_frames = FRAMES_PER_TOKEN * spec.content.len();
        let got_frames = meta.cfg.mel.n_frames(waveform.len());
        if got_frames != expect_frames {
            return Err(Error::Data(format!(
                "{}: {} mel frames but {} token-aligned frames expected",
                rec.id, got_frames, expect_frames
            )));
        }
        let frame_tokens = (0..expect_frames)
            .map(|f| spec.content[(f / FRAMES_PER_TOKEN).min(spec.content.len() - 1)])
            .collect();
        let utt = LabeledUtterance { id: rec.id, waveform, spec, frame_tokens };
        match rec.split {
            Split::Train => corpus.train.push(utt),
            Split::Dev => corpus.dev.push(utt),
            Split::Test => corpus.test.push(utt),
        }
    }
    if corpus.is_empty() {
        return Err(Error::Data(format!("empty manifest at {}", manifest_path.display())));
    }
    Ok(corpus)
}

/// Write a file via temp-and-rename so readers never observe a partial
/// artifact. Shared by every artifact writer in the workspace.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
