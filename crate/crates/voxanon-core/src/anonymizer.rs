//! Speaker anonymization over the trained codec.
//!
//! The anonymizer only needs the content encoder, the speaker encoder,
//! the quantizer stack, and the decoder: an utterance is encoded, its
//! own speaker vector is subtracted as usual, and the decoder is then
//! driven with a *pseudo* identity instead of the original one:
//!
//! `s_anon = alpha * s_bar + (1 - alpha) * s_hat`
//!
//! where `s_bar` averages `m` distinct vectors drawn uniformly from a
//! pre-built pool of speaker vectors and `s_hat` is a zero-mean
//! Gaussian draw whose per-dimension scale defaults to the pool's own
//! standard deviation (keeping the mix in-distribution for the
//! decoder). Randomness is streamed per utterance by default so two
//! utterances of the same speaker get unrelated pseudo identities; a
//! per-speaker mode keys the stream on the speaker label instead for
//! protocols that require a consistent pseudo speaker.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::rng::{derive_rng_str, standard_normal};
use crate::signal::{MelConfig, Waveform};
use crate::synthdata::{write_atomic, LabeledUtterance};
use crate::{Error, Result};

/// Default minimum pool size for real runs; tests and smoke configs may
/// validate against a smaller floor.
pub const POOL_MIN_ENTRIES: usize = 20;

/// Format tag written into serialized pools.
const POOL_FORMAT: &str = "voxanon-pool-v1";

/// One pooled speaker: a label and the mean speaker vector over that
/// speaker's utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolEntry {
    pub label: String,
    pub vector: Vec<f64>,
}

/// Pool of speaker identity vectors the anonymizer mixes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeakerPool {
    format: String,
    /// Dimension of every vector in `entries`.
    dim: usize,
    /// Free-form provenance note (corpus subset, model seed, ...).
    pub source: String,
    entries: Vec<PoolEntry>,
}

impl SpeakerPool {
    /// Assemble a pool from labeled vectors, checking shape and
    /// finiteness. Labels must be unique.
    pub fn new(entries: Vec<PoolEntry>, source: impl Into<String>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Data("speaker pool has no entries".into()));
        }
        let dim = entries[0].vector.len();
        if dim == 0 {
            return Err(Error::Shape("speaker pool vectors are zero-dimensional".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "pool entry '{}' has dim {}, expected {}",
                    e.label,
                    e.vector.len(),
                    dim
                )));
            }
            if e.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("pool entry '{}' is not finite", e.label)));
            }
            if !seen.insert(e.label.clone()) {
                return Err(Error::Data(format!("duplicate pool label '{}'", e.label)));
            }
        }
        Ok(SpeakerPool { format: POOL_FORMAT.into(), dim, source: source.into(), entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    /// Enforce a minimum entry count (e.g. `POOL_MIN_ENTRIES` for real
    /// protocols).
    pub fn require_min(&self, min_entries: usize) -> Result<()> {
        if self.entries.len() < min_entries {
            return Err(Error::Data(format!(
                "speaker pool has {} entries, need at least {}",
                self.entries.len(),
                min_entries
            )));
        }
        Ok(())
    }

    /// Mean vector over the whole pool (1 x d).
    pub fn mean_vector(&self) -> Array2<f64> {
        let mut acc = Array2::zeros((1, self.dim));
        for e in &self.entries {
            for (j, v) in e.vector.iter().enumerate() {
                acc[[0, j]] += v;
            }
        }
        acc.mapv_into(|v| v / self.entries.len() as f64)
    }

    /// Per-dimension population standard deviation over the pool; the
    /// default Gaussian scale for `sample_identity`.
    pub fn std_per_dim(&self) -> Vec<f64> {
        let n = self.entries.len() as f64;
        let mean = self.mean_vector();
        let mut var = vec![0.0; self.dim];
        for e in &self.entries {
            for (j, v) in e.vector.iter().enumerate() {
                let d = v - mean[[0, j]];
                var[j] += d * d;
            }
        }
        var.iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Write the pool to its own JSON file (atomic rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("pool serialization failed: {e}")))?;
        write_atomic(path, text.as_bytes())
    }

    /// Read a pool back, re-running the structural checks.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: SpeakerPool = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("pool parse failed at {}: {e}", path.display())))?;
        if raw.format != POOL_FORMAT {
            return Err(Error::Data(format!(
                "unsupported pool format '{}' (expected '{POOL_FORMAT}')",
                raw.format
            )));
        }
        if raw.dim != raw.entries.first().map_or(0, |e| e.vector.len()) {
            return Err(Error::Shape(format!(
                "pool header dim {} disagrees with entries at {}",
                raw.dim,
                path.display()
            )));
        }
        let source = raw.source.clone();
        SpeakerPool::new(raw.entries, source)
    }
}

/// How pseudo-identity randomness is keyed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnonMode {
    /// Fresh rng stream per utterance id (strongest privacy default).
    PerUtterance,
    /// Rng stream keyed on the speaker label, so every utterance of a
    /// speaker maps to the same pseudo speaker.
    PerSpeaker,
    /// Keep the original speaker vector: plain reconstruction, used as
    /// the identity configuration in checks.
    Bypass,
}

/// Pseudo-identity mixing parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnonConfig {
    /// Weight on the pooled average; `1 - alpha` goes to the Gaussian
    /// draw.
    pub alpha: f64,
    /// Number of distinct pool entries averaged into `s_bar`.
    pub m: usize,
    /// Per-dimension Gaussian scale; `None` uses the pool's
    /// per-dimension standard deviation.
    pub sigma: Option<Vec<f64>>,
    pub seed: u64,
    pub mode: AnonMode,
}

impl Default for AnonConfig {
    fn default() -> Self {
        AnonConfig { alpha: 0.5, m: 10, sigma: None, seed: 0, mode: AnonMode::PerUtterance }
    }
}

impl AnonConfig {
    /// Check the mixing parameters against a concrete pool size.
    pub fn validate(&self, pool_len: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if self.m > pool_len {
            return Err(Error::Config(format!(
                "m = {} exceeds pool size {}",
                self.m, pool_len
            )));
        }
        if let Some(sigma) = &self.sigma {
            check_sigma(sigma)?;
        }
        Ok(())
    }
}

fn check_sigma(sigma: &[f64]) -> Result<()> {
    if sigma.is_empty() {
        return Err(Error::Config("sigma is empty".into()));
    }
    for (j, s) in sigma.iter().enumerate() {
        if !(s.is_finite() && *s > 0.0) {
            return Err(Error::Config(format!("sigma[{j}] must be positive and finite, got {s}")));
        }
    }
    Ok(())
}

/// Mean of `m` distinct pool entries drawn uniformly at random.
///
/// The chosen indices are summed in ascending index order, so `m ==
/// pool.len()` returns the global pool mean bit-identically no matter
/// what the rng produced.
pub fn average_identity(
    pool: &SpeakerPool,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if m == 0 {
        return Err(Error::Config("m must be at least 1".into()));
    }
    if m > pool.len() {
        return Err(Error::Config(format!("m = {} exceeds pool size {}", m, pool.len())));
    }
    // Partial Fisher-Yates: the first m slots end up holding a uniform
    // draw of m distinct indices.
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    for i in 0..m {
        let j = rng.gen_range(i..idx.len());
        idx.swap(i, j);
    }
    let mut chosen: Vec<usize> = idx[..m].to_vec();
    chosen.sort_unstable();

    let d = pool.dim();
    let mut acc = Array2::zeros((1, d));
    for &i in &chosen {
        for (j, v) in pool.entries[i].vector.iter().enumerate() {
            acc[[0, j]] += v;
        }
    }
    Ok(acc.mapv_into(|v| v / m as f64))
}

/// Zero-mean Gaussian identity draw with per-dimension scale `sigma`.
pub fn sample_identity(sigma: &[f64], rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    check_sigma(sigma)?;
    let mut out = Array2::zeros((1, sigma.len()));
    for (j, s) in sigma.iter().enumerate() {
        out[[0, j]] = s * standard_normal(rng);
    }
    Ok(out)
}

/// Elementwise convex combination `alpha * s_bar + (1 - alpha) * s_hat`.
pub fn anonymize_vector(
    alpha: f64,
    s_bar: &Array2<f64>,
    s_hat: &Array2<f64>,
) -> Result<Array2<f64>> {
    if s_bar.dim() != s_hat.dim() {
        return Err(Error::Shape(format!(
            "identity dims differ: {:?} vs {:?}",
            s_bar.dim(),
            s_hat.dim()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) || !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be in [0, 1], got {alpha}")));
    }
    // Endpoints return the input verbatim so alpha = 1 / alpha = 0 are
    // exact even where `0.0 * x` would perturb signed zeros.
    if alpha == 1.0 {
        return Ok(s_bar.clone());
    }
    if alpha == 0.0 {
        return Ok(s_hat.clone());
    }
    Ok(s_bar * alpha + s_hat * (1.0 - alpha))
}

/// Draw the pseudo identity `s_anon` for one utterance: the rng stream
/// is keyed per utterance or per speaker according to `cfg.mode`.
///
/// `Bypass` mode has no pseudo identity and is rejected here; callers
/// handle it by reusing the original vector.
pub fn pseudo_identity(
    pool: &SpeakerPool,
    cfg: &AnonConfig,
    utterance_id: &str,
    speaker_label: Option<&str>,
) -> Result<Array2<f64>> {
    cfg.validate(pool.len())?;
    let mut rng = match cfg.mode {
        AnonMode::PerUtterance => derive_rng_str(cfg.seed, "anon-utt", utterance_id),
        AnonMode::PerSpeaker => {
            let label = speaker_label.ok_or_else(|| {
                Error::Config("per-speaker anonymization needs a speaker label".into())
            })?;
            derive_rng_str(cfg.seed, "anon-spk", label)
        }
        AnonMode::Bypass => {
            return Err(Error::Config("bypass mode has no pseudo identity".into()));
        }
    };
    let s_bar = average_identity(pool, cfg.m, &mut rng)?;
    let sigma = match &cfg.sigma {
        Some(s) => s.clone(),
        None => pool.std_per_dim(),
    };
    if sigma.len() != pool.dim() {
        return Err(Error::Shape(format!(
            "sigma has dim {}, pool has dim {}",
            sigma.len(),
            pool.dim()
        )));
    }
    let s_hat = sample_identity(&sigma, &mut rng)?;
    anonymize_vector(cfg.alpha, &s_bar, &s_hat)
}

/// Build a pool from a corpus subset: one entry per speaker, the mean
/// of the model's speaker vector over that speaker's utterances.
/// Grouping uses an ordered map, so the result is deterministic in the
/// input multiset.
pub fn build_pool(
    model: &Model,
    mel_cfg: &MelConfig,
    utterances: &[LabeledUtterance],
    source: impl Into<String>,
) -> Result<SpeakerPool> {
    if utterances.is_empty() {
        return Err(Error::Data("cannot build a speaker pool from zero utterances".into()));
    }
    let mut by_speaker: BTreeMap<usize, Vec<&LabeledUtterance>> = BTreeMap::new();
    for u in utterances {
        by_speaker.entry(u.spec.speaker_id).or_default().push(u);
    }
    let mut entries = Vec::with_capacity(by_speaker.len());
    for (speaker, utts) in &by_speaker {
        let mut acc = Array2::zeros((1, model.cfg.frame_dim));
        for u in utts {
            acc = acc + model.speaker_vector(&u.waveform, mel_cfg)?;
        }
        let mean = acc.mapv_into(|v| v / utts.len() as f64);
        entries.push(PoolEntry { label: speaker.to_string(), vector: mean.row(0).to_vec() });
    }
    SpeakerPool::new(entries, source)
}

/// Anonymize one waveform: encode, quantize every layer, and decode
/// with the pseudo identity in place of the original speaker vector.
///
/// `speaker_label` is only consulted in `PerSpeaker` mode. The output
/// keeps the input sample rate; its length is frames x hop per the
/// decode contract.
pub fn anonymize_utterance(
    model: &Model,
    mel_cfg: &MelConfig,
    pool: &SpeakerPool,
    cfg: &AnonConfig,
    wave: &Waveform,
    utterance_id: &str,
    speaker_label: Option<&str>,
) -> Result<Waveform> {
    if pool.dim() != model.cfg.frame_dim {
        return Err(Error::Shape(format!(
            "pool dim {} does not match model speaker dim {}",
            pool.dim(),
            model.cfg.frame_dim
        )));
    }
    cfg.validate(pool.len())?;
    let (st, s_orig) = model.encode_waveform(wave, mel_cfg)?;
    let s_anon = match cfg.mode {
        AnonMode::Bypass => s_orig,
        _ => pseudo_identity(pool, cfg, utterance_id, speaker_label)?,
    };
    let samples = model.decode_with_speaker(&st, &s_anon)?;
    Ok(Waveform { samples, sample_rate: wave.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::derive_rng;
    use crate::signal::mel_spectrogram;
    use crate::synthdata::{build_corpus, Corpus, CorpusConfig};
    use proptest::prelude::*;

    fn pool_from_rows(rows: &[Vec<f64>]) -> SpeakerPool {
        let entries = rows
            .iter()
            .enumerate()
            .map(|(i, v)| PoolEntry { label: format!("p{i}"), vector: v.clone() })
            .collect();
        SpeakerPool::new(entries, "test").unwrap()
    }

    fn tiny_setup() -> (Corpus, MelConfig, Model) {
        let mel = MelConfig { n_fft: 256, win: 256, hop: 64, ..MelConfig::default() };
        let ccfg = CorpusConfig {
            n_speakers: 8,
            vocab_size: 16,
            n_utterances: 12,
            tokens_min: 2,
            tokens_max: 3,
            dev_speakers: 1,
            test_speakers: 1,
            mel: mel.clone(),
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&ccfg, 77).unwrap();
        let mut model = Model::new(ModelConfig::smoke(8, 16, 80, 64), 5).unwrap();
        let mels: Vec<_> = corpus
            .train
            .iter()
            .take(6)
            .map(|u| mel_spectrogram(&u.waveform, &mel).unwrap().frames)
            .collect();
        model.init_codebooks(&mels, 9).unwrap();
        (corpus, mel, model)
    }

    #[test]
    fn pool_rejects_bad_entries() {
        assert!(SpeakerPool::new(vec![], "x").is_err());
        let uneven = vec![
            PoolEntry { label: "a".into(), vector: vec![1.0, 2.0] },
            PoolEntry { label: "b".into(), vector: vec![1.0] },
        ];
        assert!(SpeakerPool::new(uneven, "x").is_err());
        let nan = vec![PoolEntry { label: "a".into(), vector: vec![f64::NAN] }];
        assert!(SpeakerPool::new(nan, "x").is_err());
        let dup = vec![
            PoolEntry { label: "a".into(), vector: vec![1.0] },
            PoolEntry { label: "a".into(), vector: vec![2.0] },
        ];
        assert!(SpeakerPool::new(dup, "x").is_err());
    }

    #[test]
    fn pool_stats_match_hand_values() {
        let pool = pool_from_rows(&[vec![1.0, 0.0], vec![3.0, 0.0]]);
        let mean = pool.mean_vector();
        assert_eq!(mean[[0, 0]], 2.0);
        assert_eq!(mean[[0, 1]], 0.0);
        // Population std: sqrt(((1-2)^2 + (3-2)^2) / 2) = 1.
        let std = pool.std_per_dim();
        assert!((std[0] - 1.0).abs() < 1e-15);
        assert_eq!(std[1], 0.0);
    }

    #[test]
    fn pool_min_gate() {
        let pool = pool_from_rows(&[vec![1.0], vec![2.0]]);
        assert!(pool.require_min(2).is_ok());
        assert!(pool.require_min(3).is_err());
    }

    #[test]
    fn average_full_pool_is_rng_independent() {
        let pool = pool_from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0], vec![5.0, 2.0]]);
        let mut rng_a = derive_rng(1, "t", &[]);
        let mut rng_b = derive_rng(999, "t", &[]);
        let a = average_identity(&pool, 3, &mut rng_a).unwrap();
        let b = average_identity(&pool, 3, &mut rng_b).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, pool.mean_vector());
        assert_eq!(a[[0, 0]], 3.0);
        assert_eq!(a[[0, 1]], 2.0);
    }

    #[test]
    fn average_m1_returns_some_entry_verbatim() {
        let pool = pool_from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0], vec![5.0, 2.0]]);
        for seed in 0..20 {
            let mut rng = derive_rng(seed, "t", &[]);
            let v = average_identity(&pool, 1, &mut rng).unwrap();
            let hit = pool
                .entries()
                .iter()
                .any(|e| e.vector.iter().enumerate().all(|(j, x)| v[[0, j]] == *x));
            assert!(hit, "m=1 draw is not a pool entry: {v:?}");
        }
    }

    #[test]
    fn average_samples_distinct_entries() {
        // One-hot pool: m * mean recovers the chosen multiset, so any
        // coordinate equal to 2 would expose a duplicate draw.
        let n = 6;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let pool = pool_from_rows(&rows);
        for seed in 0..50 {
            let mut rng = derive_rng(seed, "distinct", &[]);
            let mean = average_identity(&pool, 4, &mut rng).unwrap();
            let mut ones = 0;
            for j in 0..n {
                let c = mean[[0, j]] * 4.0;
                assert!(
                    (c - 0.0).abs() < 1e-12 || (c - 1.0).abs() < 1e-12,
                    "coordinate {j} drawn {c} times"
                );
                if (c - 1.0).abs() < 1e-12 {
                    ones += 1;
                }
            }
            assert_eq!(ones, 4);
        }
    }

    #[test]
    fn average_selection_is_uniformish() {
        // Each entry should be hit roughly m/n of the time across many
        // seeds; with one-hot entries the mean exposes the counts.
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let pool = pool_from_rows(&rows);
        let trials = 2000;
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            let mut rng = derive_rng(seed as u64, "unif", &[]);
            let mean = average_identity(&pool, 2, &mut rng).unwrap();
            for j in 0..n {
                if mean[[0, j]] > 0.0 {
                    counts[j] += 1;
                }
            }
        }
        // Expected hits per entry: trials * m / n = 800. A binomial
        // std is ~sqrt(2000 * 0.4 * 0.6) ~ 22; allow 5 sigma.
        for (j, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - 800.0).abs() < 110.0,
                "entry {j} selected {c} times, expected ~800"
            );
        }
    }

    #[test]
    fn average_rejects_bad_m() {
        let pool = pool_from_rows(&[vec![1.0], vec![2.0]]);
        let mut rng = derive_rng(0, "t", &[]);
        assert!(average_identity(&pool, 0, &mut rng).is_err());
        assert!(average_identity(&pool, 3, &mut rng).is_err());
    }

    #[test]
    fn average_reproducible_for_fixed_seed() {
        let pool = pool_from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let a = average_identity(&pool, 2, &mut derive_rng(7, "t", &[])).unwrap();
        let b = average_identity(&pool, 2, &mut derive_rng(7, "t", &[])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sample_mean_is_near_zero() {
        // CLT bound from the spec of the draw: with 10^4 samples the
        // per-dimension mean of N(0, sigma^2) lies within 4 sigma / 100
        // with probability ~0.99994.
        let sigma = [0.5, 1.0, 2.0];
        let n = 10_000;
        let mut rng = derive_rng(3, "clt", &[]);
        let mut sums = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        for _ in 0..n {
            let v = sample_identity(&sigma, &mut rng).unwrap();
            for j in 0..3 {
                sums[j] += v[[0, j]];
                sq[j] += v[[0, j]] * v[[0, j]];
            }
        }
        for j in 0..3 {
            let mean = sums[j] / n as f64;
            assert!(
                mean.abs() < 4.0 * sigma[j] / 100.0,
                "dim {j}: mean {mean} outside CLT bound"
            );
            let std = (sq[j] / n as f64 - mean * mean).sqrt();
            assert!(
                (std - sigma[j]).abs() / sigma[j] < 0.05,
                "dim {j}: sample std {std} far from {}",
                sigma[j]
            );
        }
    }

    #[test]
    fn gaussian_sample_is_seed_deterministic() {
        let sigma = [1.0, 2.0];
        let a = sample_identity(&sigma, &mut derive_rng(11, "g", &[])).unwrap();
        let b = sample_identity(&sigma, &mut derive_rng(11, "g", &[])).unwrap();
        let c = sample_identity(&sigma, &mut derive_rng(12, "g", &[])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_rejects_nonpositive_sigma() {
        let mut rng = derive_rng(0, "g", &[]);
        assert!(sample_identity(&[1.0, 0.0], &mut rng).is_err());
        assert!(sample_identity(&[-1.0], &mut rng).is_err());
        assert!(sample_identity(&[], &mut rng).is_err());
    }

    #[test]
    fn gaussian_tiny_sigma_gives_tiny_values() {
        let mut rng = derive_rng(4, "g", &[]);
        let v = sample_identity(&[1e-12, 1e-12], &mut rng).unwrap();
        for x in v.iter() {
            assert!(x.abs() < 1e-10);
        }
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let s_bar = Array2::from_shape_vec((1, 2), vec![1.0, 1.0]).unwrap();
        let s_hat = Array2::from_shape_vec((1, 2), vec![0.0, 0.0]).unwrap();
        assert_eq!(anonymize_vector(1.0, &s_bar, &s_hat).unwrap(), s_bar);
        assert_eq!(anonymize_vector(0.0, &s_bar, &s_hat).unwrap(), s_hat);
        let mid = anonymize_vector(0.5, &s_bar, &s_hat).unwrap();
        assert_eq!(mid[[0, 0]], 0.5);
        assert_eq!(mid[[0, 1]], 0.5);
    }

    #[test]
    fn mix_rejects_mismatch_and_bad_alpha() {
        let a = Array2::zeros((1, 2));
        let b = Array2::zeros((1, 3));
        assert!(anonymize_vector(0.5, &a, &b).is_err());
        let c = Array2::zeros((1, 2));
        assert!(anonymize_vector(1.5, &a, &c).is_err());
        assert!(anonymize_vector(f64::NAN, &a, &c).is_err());
    }

    proptest! {
        /// The mix is linear in each argument and stays inside the
        /// per-coordinate interval spanned by its endpoints.
        #[test]
        fn mix_is_linear_and_bounded(
            alpha in 0.0f64..=1.0,
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            scale in -3.0f64..3.0,
        ) {
            let av = Array2::from_shape_vec((1, 3), a.clone()).unwrap();
            let bv = Array2::from_shape_vec((1, 3), b.clone()).unwrap();
            let mix = anonymize_vector(alpha, &av, &bv).unwrap();
            for j in 0..3 {
                let lo = a[j].min(b[j]);
                let hi = a[j].max(b[j]);
                prop_assert!(mix[[0, j]] >= lo - 1e-12 && mix[[0, j]] <= hi + 1e-12);
            }
            // Linearity in s_bar: f(a + t*e_j, b) - f(a, b) = alpha * t * e_j.
            let mut shifted = av.clone();
            shifted[[0, 1]] += scale;
            let mix2 = anonymize_vector(alpha, &shifted, &bv).unwrap();
            prop_assert!((mix2[[0, 1]] - mix[[0, 1]] - alpha * scale).abs() < 1e-12);
            prop_assert!((mix2[[0, 0]] - mix[[0, 0]]).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_build_counts_and_determinism() {
        let (corpus, mel, model) = tiny_setup();
        let pool = build_pool(&model, &mel, &corpus.train, "train subset").unwrap();
        let speakers: std::collections::BTreeSet<_> =
            corpus.train.iter().map(|u| u.spec.speaker_id).collect();
        assert_eq!(pool.len(), speakers.len());
        assert_eq!(pool.dim(), model.cfg.frame_dim);
        let again = build_pool(&model, &mel, &corpus.train, "train subset").unwrap();
        assert_eq!(pool, again);
        assert!(build_pool(&model, &mel, &[], "x").is_err());
    }

    #[test]
    fn pool_single_utterance_speaker_matches_vector() {
        let (corpus, mel, model) = tiny_setup();
        let u = &corpus.train[0];
        let pool = build_pool(&model, &mel, std::slice::from_ref(u), "one").unwrap();
        assert_eq!(pool.len(), 1);
        let direct = model.speaker_vector(&u.waveform, &mel).unwrap();
        for (j, v) in pool.entries()[0].vector.iter().enumerate() {
            // Mean over one utterance divides by 1.0, which is exact.
            assert_eq!(*v, direct[[0, j]]);
        }
    }

    #[test]
    fn pool_save_load_round_trip() {
        let pool = pool_from_rows(&[vec![1.0, -2.5], vec![0.25, 3.0]]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.json");
        pool.save(&path).unwrap();
        let back = SpeakerPool::load(&path).unwrap();
        assert_eq!(pool, back);
        // Corrupt the header dim and reload.
        let text = std::fs::read_to_string(&path).unwrap().replace("\"dim\": 2", "\"dim\": 7");
        std::fs::write(&path, text).unwrap();
        assert!(SpeakerPool::load(&path).is_err());
    }

    #[test]
    fn pseudo_identity_modes_and_streams() {
        let pool = pool_from_rows(&[
            vec![1.0, 4.0],
            vec![3.0, 0.0],
            vec![5.0, 2.0],
            vec![2.0, 6.0],
        ]);
        let cfg = AnonConfig { m: 2, ..AnonConfig::default() };
        // Per-utterance: same id reproduces, different ids differ.
        let a = pseudo_identity(&pool, &cfg, "utt-1", None).unwrap();
        let b = pseudo_identity(&pool, &cfg, "utt-1", None).unwrap();
        let c = pseudo_identity(&pool, &cfg, "utt-2", None).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        // Per-speaker: keyed on the label, utterance id irrelevant.
        let cfg_spk = AnonConfig { mode: AnonMode::PerSpeaker, ..cfg.clone() };
        let d = pseudo_identity(&pool, &cfg_spk, "utt-1", Some("s0")).unwrap();
        let e = pseudo_identity(&pool, &cfg_spk, "utt-2", Some("s0")).unwrap();
        let f = pseudo_identity(&pool, &cfg_spk, "utt-1", Some("s1")).unwrap();
        assert_eq!(d, e);
        assert_ne!(d, f);
        assert!(pseudo_identity(&pool, &cfg_spk, "utt-1", None).is_err());
        // Bypass mode has no pseudo identity.
        let cfg_by = AnonConfig { mode: AnonMode::Bypass, ..cfg.clone() };
        assert!(pseudo_identity(&pool, &cfg_by, "utt-1", None).is_err());
    }

    #[test]
    fn pseudo_identity_seed_sensitivity_and_degenerate_case() {
        let pool = pool_from_rows(&[
            vec![1.0, 4.0],
            vec![3.0, 0.0],
            vec![5.0, 2.0],
            vec![2.0, 6.0],
        ]);
        // Different seeds give different s_anon...
        let c1 = AnonConfig { seed: 1, ..AnonConfig { m: 2, ..AnonConfig::default() } };
        let c2 = AnonConfig { seed: 2, ..c1.clone() };
        let a = pseudo_identity(&pool, &c1, "u", None).unwrap();
        let b = pseudo_identity(&pool, &c2, "u", None).unwrap();
        assert_ne!(a, b);
        // ...except when alpha = 1 and m = pool size: no Gaussian term,
        // and the full-pool mean ignores the selection order.
        let d1 = AnonConfig { alpha: 1.0, m: pool.len(), seed: 1, ..AnonConfig::default() };
        let d2 = AnonConfig { seed: 2, ..d1.clone() };
        let x = pseudo_identity(&pool, &d1, "u", None).unwrap();
        let y = pseudo_identity(&pool, &d2, "u", None).unwrap();
        assert_eq!(x, y);
        assert_eq!(x, pool.mean_vector());
    }

    #[test]
    fn anonymize_bypass_equals_plain_reconstruction() {
        let (corpus, mel, model) = tiny_setup();
        let u = &corpus.train[0];
        let pool = build_pool(&model, &mel, &corpus.train, "train").unwrap();
        let cfg = AnonConfig { mode: AnonMode::Bypass, m: 2, ..AnonConfig::default() };
        let out = anonymize_utterance(&model, &mel, &pool, &cfg, &u.waveform, &u.id, None).unwrap();
        let (st, s) = model.encode_waveform(&u.waveform, &mel).unwrap();
        let plain = model.decode_with_speaker(&st, &s).unwrap();
        assert_eq!(out.samples, plain);
        assert_eq!(out.sample_rate, u.waveform.sample_rate);
        assert_eq!(out.samples.len(), st.n_frames() * model.cfg.hop);
    }

    #[test]
    fn anonymize_is_bit_reproducible_and_seed_sensitive() {
        let (corpus, mel, model) = tiny_setup();
        let u = &corpus.train[1];
        let pool = build_pool(&model, &mel, &corpus.train, "train").unwrap();
        let cfg = AnonConfig { m: 3, seed: 42, ..AnonConfig::default() };
        let a = anonymize_utterance(&model, &mel, &pool, &cfg, &u.waveform, &u.id, None).unwrap();
        let b = anonymize_utterance(&model, &mel, &pool, &cfg, &u.waveform, &u.id, None).unwrap();
        assert_eq!(a.samples, b.samples);
        let cfg2 = AnonConfig { seed: 43, ..cfg };
        let c = anonymize_utterance(&model, &mel, &pool, &cfg2, &u.waveform, &u.id, None).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn anonymize_rejects_untrained_model_and_bad_pool() {
        let mel = MelConfig { n_fft: 256, win: 256, hop: 64, ..MelConfig::default() };
        let ccfg = CorpusConfig {
            n_speakers: 8,
            vocab_size: 16,
            n_utterances: 8,
            tokens_min: 2,
            tokens_max: 2,
            dev_speakers: 1,
            test_speakers: 1,
            mel: mel.clone(),
            ..CorpusConfig::default()
        };
        let corpus = build_corpus(&ccfg, 1).unwrap();
        let u = &corpus.train[0];
        // Codebooks never initialized: quantization must fail.
        let model = Model::new(ModelConfig::smoke(8, 16, 80, 64), 5).unwrap();
        let pool = build_pool(&model, &mel, &corpus.train, "t").unwrap();
        let cfg = AnonConfig { m: 1, ..AnonConfig::default() };
        assert!(
            anonymize_utterance(&model, &mel, &pool, &cfg, &u.waveform, &u.id, None).is_err()
        );
        // m larger than the pool.
        let cfg_big = AnonConfig { m: pool.len() + 1, ..AnonConfig::default() };
        assert!(
            anonymize_utterance(&model, &mel, &pool, &cfg_big, &u.waveform, &u.id, None).is_err()
        );
        // Pool dim disagreeing with the model.
        let bad_pool = pool_from_rows(&[vec![0.0; 3]]);
        let cfg_one = AnonConfig { m: 1, ..AnonConfig::default() };
        assert!(
            anonymize_utterance(&model, &mel, &bad_pool, &cfg_one, &u.waveform, &u.id, None)
                .is_err()
        );
    }
}
