//! Speech encoder (frame-level), speaker encoder (utterance-level),
//! speaker subtraction, teacher interfaces, and k-means tokenization.
//!
//! The speech encoder `E_c` maps a `T x n_mels` log-mel matrix to a
//! frame-rate-preserving `T x D` representation. The speaker encoder
//! `E_p` maps the same input to a single `1 x d` speaker vector through
//! fully-connected spectral layers, residual gated convolutions,
//! multi-head attention, and mean pooling over time. The model width `D`
//! equals the speaker dimension `d` so that the speaker vector can be
//! subtracted from every frame of the speech representation — the
//! subtraction is only well-typed under that equality.
//!
//! Teachers provide per-frame distillation targets. The oracle teacher
//! reads ground truth from the synthetic corpus; the external teacher
//! reads precomputed per-utterance matrices from files, so pretrained
//! extractors can be plugged in without any framework dependency here.

use crate::nn::layers::{Conv1d, GatedConvBlock, Linear, MultiHeadAttention};
use crate::nn::params::ParamSet;
use crate::nn::tape::{PadKind, Tape, Var};
use crate::synthdata::LabeledUtterance;
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Frame-level speech encoder: a small convolutional stack (stride 1,
/// same padding) with GELU between layers and a linear final layer.
#[derive(Debug, Clone)]
pub struct SpeechEncoder {
    convs: Vec<Conv1d>,
    pub n_mels: usize,
    pub width: usize,
    pub out_dim: usize,
}

impl SpeechEncoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        n_mels: usize,
        width: usize,
        out_dim: usize,
        n_layers: usize,
        kernel: usize,
    ) -> Self {
        assert!(n_layers >= 1, "speech encoder needs at least one layer");
        let mut convs = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let c_in = if i == 0 { n_mels } else { width };
            let c_out = if i == n_layers - 1 { out_dim } else { width };
            convs.push(Conv1d::same(
                params,
                rng,
                &format!("{name}.conv{i}"),
                c_in,
                c_out,
                kernel,
                PadKind::Zero,
            ));
        }
        SpeechEncoder { convs, n_mels, width, out_dim }
    }

    /// `T x n_mels -> T x D`; the last layer has no activation, so
    /// zeroing its weights zeroes the output.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], mel: Var) -> Var {
        assert_eq!(
            tape.value(mel).ncols(),
            self.n_mels,
            "speech encoder expects {} mel bins",
            self.n_mels
        );
        let mut x = mel;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(tape, bound, x);
            if i != last {
                x = tape.gelu(x);
            }
        }
        x
    }
}

/// Utterance-level speaker encoder.
///
/// Architecture order (fixed): fully-connected spectral layers → residual
/// gated convolution blocks → multi-head attention layers (no positional
/// encoding) → mean pooling over time. Every stage maps a
/// constant-in-time input to a constant-in-time output (replicate-padded
/// convolutions, row-wise FC, permutation-equivariant attention), so
/// duplicating a stationary utterance leaves the embedding unchanged up
/// to rounding.
#[derive(Debug, Clone)]
pub struct SpeakerEncoder {
    fc: Vec<Linear>,
    blocks: Vec<GatedConvBlock>,
    attn: Vec<MultiHeadAttention>,
    pub n_mels: usize,
    pub dim: usize,
    pub kernel: usize,
}

impl SpeakerEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        n_mels: usize,
        dim: usize,
        n_gated_blocks: usize,
        kernel: usize,
        n_attn_layers: usize,
        n_heads: usize,
    ) -> Self {
        let fc = vec![
            Linear::new(params, rng, &format!("{name}.fc0"), n_mels, dim, true),
            Linear::new(params, rng, &format!("{name}.fc1"), dim, dim, true),
        ];
        let blocks = (0..n_gated_blocks)
            .map(|i| GatedConvBlock::new(params, rng, &format!("{name}.gated{i}"), dim, kernel))
            .collect();
        let attn = (0..n_attn_layers)
            .map(|i| {
                MultiHeadAttention::new(params, rng, &format!("{name}.attn{i}"), dim, n_heads)
            })
            .collect();
        SpeakerEncoder { fc, blocks, attn, n_mels, dim, kernel }
    }

    /// Smallest frame count the encoder accepts (the gated-conv kernel
    /// must see at least one full window of real frames).
    pub fn min_frames(&self) -> usize {
        self.kernel
    }

    /// `T x n_mels -> 1 x d`.
    pub fn forward(&self, tape: &mut Tape, bound: &[Var], mel: Var) -> Result<Var> {
        let (t, c) = tape.value(mel).dim();
        if c != self.n_mels {
            return Err(Error::Shape(format!(
                "speaker encoder expects {} mel bins, got {c}",
                self.n_mels
            )));
        }
        if t < self.min_frames() {
            return Err(Error::Shape(format!(
                "speaker encoder needs at least {} frames, got {t}",
                self.min_frames()
            )));
        }
        let mut x = mel;
        for lin in &self.fc {
            x = lin.forward(tape, bound, x);
            x = tape.gelu(x);
        }
        for block in &self.blocks {
            x = block.forward(tape, bound, x);
        }
        for attn in &self.attn {
            let a = attn.forward(tape, bound, x);
            x = tape.add(x, a);
        }
        Ok(tape.mean_rows(x))
    }
}

/// `r_1[t] = fr[t] - s` for every frame: the utterance-level speaker
/// vector is broadcast over time and subtracted. Exactly invertible by
/// re-adding the broadcast vector.
pub fn subtract_speaker(tape: &mut Tape, fr: Var, s: Var) -> Var {
    let (t, d) = tape.value(fr).dim();
    let (rs, ds) = tape.value(s).dim();
    assert_eq!((rs, ds), (1, d), "speaker vector must be 1x{d}, got {rs}x{ds}");
    let sb = tape.broadcast_row(s, t);
    tape.sub(fr, sb)
}

// --- teachers ---

/// Per-frame distillation targets, aligned to the model's mel frame rate.
pub trait Teacher {
    /// Ground-truth-tokenized content: one token id per mel frame.
    fn semantic_targets(&self, u: &LabeledUtterance) -> Result<Vec<usize>>;
    /// Emotion embedding, `T x D_e`.
    fn emotion_targets(&self, u: &LabeledUtterance) -> Result<Array2<f64>>;
    /// Width of the emotion embedding.
    fn emotion_dim(&self) -> usize;
}

/// Ground-truth teacher for the synthetic corpus.
#[derive(Debug, Clone)]
pub struct OracleTeacher {
    pub n_emotions: usize,
}

impl Teacher for OracleTeacher {
    fn semantic_targets(&self, u: &LabeledUtterance) -> Result<Vec<usize>> {
        Ok(crate::synthdata::oracle_semantic_teacher(u))
    }

    fn emotion_targets(&self, u: &LabeledUtterance) -> Result<Array2<f64>> {
        Ok(crate::synthdata::oracle_emotion_teacher(u, self.n_emotions))
    }

    fn emotion_dim(&self) -> usize {
        self.n_emotions
    }
}

/// Serialized external emotion matrix: row-major `shape[0] x shape[1]`.
#[derive(Debug, Serialize, Deserialize)]
struct ExternalMatrix {
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Serialized external token sequence.
#[derive(Debug, Serialize, Deserialize)]
struct ExternalTokens {
    tokens: Vec<usize>,
}

/// Teacher that reads precomputed features from
/// `{dir}/{utterance id}.sem.json` and `{dir}/{utterance id}.emo.json`,
/// nearest-neighbor resampling along time to the utterance's mel frame
/// count when the stored frame rate differs.
#[derive(Debug, Clone)]
pub struct ExternalTeacher {
    dir: PathBuf,
    emotion_dim: usize,
}

impl ExternalTeacher {
    pub fn new(dir: impl AsRef<Path>, emotion_dim: usize) -> Self {
        ExternalTeacher { dir: dir.as_ref().to_path_buf(), emotion_dim }
    }

    fn read_json<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<T> {
        let path = self.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Nearest-index time resampling: target frame `t` reads source frame
/// `floor(t * src_len / dst_len)`.
fn resample_index(t: usize, dst_len: usize, src_len: usize) -> usize {
    ((t * src_len) / dst_len).min(src_len - 1)
}

impl Teacher for ExternalTeacher {
    fn semantic_targets(&self, u: &LabeledUtterance) -> Result<Vec<usize>> {
        let raw: ExternalTokens = self.read_json(&format!("{}.sem.json", u.id))?;
        if raw.tokens.is_empty() {
            return Err(Error::Data(format!("{}: empty semantic targets", u.id)));
        }
        let t_model = u.frame_tokens.len();
        Ok((0..t_model)
            .map(|t| raw.tokens[resample_index(t, t_model, raw.tokens.len())])
            .collect())
    }

    fn emotion_targets(&self, u: &LabeledUtterance) -> Result<Array2<f64>> {
        let raw: ExternalMatrix = self.read_json(&format!("{}.emo.json", u.id))?;
        let [t_src, d] = raw.shape;
        if t_src == 0 || d != self.emotion_dim || raw.data.len() != t_src * d {
            return Err(Error::Data(format!(
                "{}: malformed emotion matrix (shape {:?}, {} values, want width {})",
                u.id,
                raw.shape,
                raw.data.len(),
                self.emotion_dim
            )));
        }
        let src = Array2::from_shape_vec((t_src, d), raw.data).expect("size checked");
        let t_model = u.frame_tokens.len();
        Ok(Array2::from_shape_fn((t_model, d), |(t, j)| {
            src[[resample_index(t, t_model, t_src), j]]
        }))
    }

    fn emotion_dim(&self) -> usize {
        self.emotion_dim
    }
}

// --- k-means ---

/// Centroid table for tokenizing teacher features in external mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansCodebook {
    /// `K x F`, rows are centroids.
    pub centroids_shape: [usize; 2],
    pub centroids_data: Vec<f64>,
}

impl KMeansCodebook {
    pub fn centroids(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.centroids_shape[0], self.centroids_shape[1]),
            self.centroids_data.clone(),
        )
        .expect("consistent by construction")
    }

    pub fn k(&self) -> usize {
        self.centroids_shape[0]
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given `seed`.
/// Empty clusters are reseeded to the point farthest from its assigned
/// centroid.
pub fn fit_kmeans(features: &Array2<f64>, k: usize, seed: u64) -> Result<KMeansCodebook> {
    let (m, f) = features.dim();
    if k == 0 {
        return Err(Error::Quantizer("k must be positive".into()));
    }
    if m == 0 {
        return Err(Error::Quantizer("cannot fit k-means on empty features".into()));
    }
    if m < k {
        return Err(Error::Quantizer(format!("{m} points cannot support {k} clusters")));
    }

    // k-means++ seeding.
    let mut rng = crate::rng::derive_rng(seed, "kmeans-init", &[k as u64]);
    let mut centroids = Array2::zeros((k, f));
    let first = rng.gen_range(0..m);
    centroids.row_mut(0).assign(&features.row(first));
    let mut d2: Vec<f64> = (0..m).map(|i| sq_dist(features.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with chosen centroids; any
            // unpicked point works — take the first with max distance.
            d2.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        centroids.row_mut(c).assign(&features.row(next));
        for i in 0..m {
            d2[i] = d2[i].min(sq_dist(features.row(i), centroids.row(c)));
        }
    }

    // Lloyd iterations to convergence (assignment fixpoint) or cap.
    let mut assign = vec![0usize; m];
    const MAX_ITERS: usize = 100;
    for _ in 0..MAX_ITERS {
        let mut changed = false;
        for i in 0..m {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(features.row(i), centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = Array2::<f64>::zeros((k, f));
        for i in 0..m {
            counts[assign[i]] += 1;
            let mut row = sums.row_mut(assign[i]);
            row += &features.row(i);
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut row = centroids.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Reseed to the globally worst-represented point.
                let far = (0..m)
                    .max_by(|&a, &b| {
                        sq_dist(features.row(a), centroids.row(assign[a]))
                            .partial_cmp(&sq_dist(features.row(b), centroids.row(assign[b])))
                            .unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).assign(&features.row(far));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    Ok(KMeansCodebook {
        centroids_shape: [k, f],
        centroids_data: centroids.iter().copied().collect(),
    })
}

/// Nearest-centroid assignment; ties break to the lowest centroid index.
pub fn kmeans_assign(codebook: &KMeansCodebook, features: &Array2<f64>) -> Vec<usize> {
    let centroids = codebook.centroids();
    features
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = (0usize, f64::INFINITY);
            for (c, cent) in centroids.rows().into_iter().enumerate() {
                let d = sq_dist(row, cent);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::check::fd_param_check;
    use crate::synthdata::FactorSpec;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random_mel(t: usize, bins: usize, seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((t, bins), |_| r.gen::<f64>() * 4.0 - 6.0)
    }

    #[test]
    fn speech_encoder_preserves_frame_rate() {
        let mut params = ParamSet::new();
        let enc = SpeechEncoder::new(&mut params, &mut rng(), "ec", 80, 16, 12, 4, 5);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let mel = tape.constant(random_mel(63, 80, 1));
        let out = enc.forward(&mut tape, &bound, mel);
        assert_eq!(tape.value(out).dim(), (63, 12));
    }

    #[test]
    fn speech_encoder_zero_final_layer_gives_zero_output() {
        let mut params = ParamSet::new();
        let enc = SpeechEncoder::new(&mut params, &mut rng(), "ec", 20, 8, 8, 3, 5);
        let last_w = params.id("ec.conv2.w").unwrap();
        let last_b = params.id("ec.conv2.b").unwrap();
        params.get_mut(last_w).fill(0.0);
        params.get_mut(last_b).fill(0.0);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let mel = tape.constant(random_mel(12, 20, 2));
        let out = enc.forward(&mut tape, &bound, mel);
        assert!(tape.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn speech_encoder_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let enc = SpeechEncoder::new(&mut params, &mut rng(), "ec", 6, 5, 4, 2, 3);
        let mel = random_mel(7, 6, 3);
        let report = fd_param_check(
            &mut params,
            |tape, bound| {
                let m = tape.constant(mel.clone());
                let out = enc.forward(tape, bound, m);
                tape.sum_all(out)
            },
            4,
            7,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn speaker_encoder_output_shape_for_any_length() {
        let mut params = ParamSet::new();
        let enc = SpeakerEncoder::new(&mut params, &mut rng(), "ep", 20, 8, 2, 3, 1, 2);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        for t in [3usize, 17, 40] {
            let mel = tape.constant(random_mel(t, 20, t as u64));
            let s = enc.forward(&mut tape, &bound, mel).unwrap();
            assert_eq!(tape.value(s).dim(), (1, 8));
        }
    }

    #[test]
    fn speaker_encoder_rejects_short_or_misshaped_input() {
        let mut params = ParamSet::new();
        let enc = SpeakerEncoder::new(&mut params, &mut rng(), "ep", 20, 8, 1, 5, 1, 2);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let too_short = tape.constant(random_mel(3, 20, 1));
        assert!(enc.forward(&mut tape, &bound, too_short).is_err());
        let wrong_bins = tape.constant(random_mel(10, 19, 2));
        assert!(enc.forward(&mut tape, &bound, wrong_bins).is_err());
    }

    #[test]
    fn duplicated_stationary_utterance_keeps_embedding() {
        let mut params = ParamSet::new();
        let enc = SpeakerEncoder::new(&mut params, &mut rng(), "ep", 10, 6, 2, 3, 1, 2);
        // Stationary input: every frame identical.
        let row: Vec<f64> = (0..10).map(|j| -3.0 + 0.4 * j as f64).collect();
        let single = Array2::from_shape_fn((9, 10), |(_, j)| row[j]);
        let doubled = Array2::from_shape_fn((18, 10), |(_, j)| row[j]);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let a = tape.constant(single);
        let b = tape.constant(doubled);
        let sa = enc.forward(&mut tape, &bound, a).unwrap();
        let sb = enc.forward(&mut tape, &bound, b).unwrap();
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb).iter()) {
            assert!((x - y).abs() < 1e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn stationary_permutation_invariance_without_attention() {
        // Attention-off configuration: permuting the frames of a
        // stationary input is a no-op end to end.
        let mut params = ParamSet::new();
        let enc = SpeakerEncoder::new(&mut params, &mut rng(), "ep", 8, 4, 1, 3, 0, 1);
        let stationary = Array2::from_shape_fn((11, 8), |(_, j)| 0.3 * j as f64 - 1.0);
        let mut tape = Tape::new();
        let bound = params.bind_all(&mut tape);
        let a = tape.constant(stationary.clone());
        let b = tape.constant(stationary); // any permutation of equal rows is itself
        let sa = enc.forward(&mut tape, &bound, a).unwrap();
        let sb = enc.forward(&mut tape, &bound, b).unwrap();
        for (x, y) in tape.value(sa).iter().zip(tape.value(sb).iter()) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn speaker_encoder_gradients_match_finite_differences() {
        let mut params = ParamSet::new();
        let enc = SpeakerEncoder::new(&mut params, &mut rng(), "ep", 5, 4, 1, 3, 1, 2);
        let mel = random_mel(6, 5, 8);
        let report = fd_param_check(
            &mut params,
            |tape, bound| {
                let m = tape.constant(mel.clone());
                let s = enc.forward(tape, bound, m).unwrap();
                let sq = tape.mul(s, s);
                tape.sum_all(sq)
            },
            3,
            9,
        );
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn subtract_speaker_contracts() {
        let mut tape = Tape::new();
        // All-zero frames minus s: every frame equals -s.
        let zeros = tape.constant(Array2::zeros((4, 3)));
        let s = tape.constant(array![[1.0, -2.0, 0.5]]);
        let r = subtract_speaker(&mut tape, zeros, s);
        for row in tape.value(r).rows() {
            assert_eq!(row.to_vec(), vec![-1.0, 2.0, -0.5]);
        }
        // s = 0 is the identity.
        let fr = tape.constant(random_mel(5, 3, 4));
        let zero_s = tape.constant(Array2::zeros((1, 3)));
        let same = subtract_speaker(&mut tape, fr, zero_s);
        assert_eq!(tape.value(same), tape.value(fr));
        // Re-adding the broadcast vector reconstructs to machine precision.
        let fr2 = tape.constant(random_mel(6, 3, 5));
        let s2 = tape.constant(array![[0.7, 0.1, -0.9]]);
        let sub = subtract_speaker(&mut tape, fr2, s2);
        let sb = tape.broadcast_row(s2, 6);
        let back = tape.add(sub, sb);
        for (a, b) in tape.value(back).iter().zip(tape.value(fr2).iter()) {
            assert!((a - b).abs() <= 4.0 * f64::EPSILON * b.abs().max(1.0));
        }
    }

    fn mini_corpus_cfg() -> crate::synthdata::CorpusConfig {
        crate::synthdata::CorpusConfig {
            n_utterances: 4,
            tokens_min: 2,
            tokens_max: 2,
            mel: crate::signal::MelConfig {
                n_fft: 256,
                win: 256,
                hop: 64,
                ..crate::signal::MelConfig::default()
            },
            ..crate::synthdata::CorpusConfig::default()
        }
    }

    #[test]
    fn oracle_teacher_passes_through_ground_truth() {
        let cfg = mini_corpus_cfg();
        let u = crate::synthdata::synth_utterance(
            &FactorSpec { speaker_id: 1, content: vec![3, 8], emotion_id: 1 },
            11,
            &cfg,
        )
        .unwrap();
        let teacher = OracleTeacher { n_emotions: 4 };
        assert_eq!(teacher.semantic_targets(&u).unwrap(), u.frame_tokens);
        let emo = teacher.emotion_targets(&u).unwrap();
        assert_eq!(emo.dim(), (u.frame_tokens.len(), 4));
        assert_eq!(teacher.emotion_dim(), 4);
    }

    #[test]
    fn external_teacher_reads_and_resamples() {
        let cfg = mini_corpus_cfg();
        let mut u = crate::synthdata::synth_utterance(
            &FactorSpec { speaker_id: 0, content: vec![1, 2], emotion_id: 0 },
            3,
            &cfg,
        )
        .unwrap();
        u.id = "utt00000".into();
        let t_model = u.frame_tokens.len(); // 32

        let dir = tempfile::tempdir().unwrap();
        // Half-rate teacher: 16 frames for 32 model frames.
        let sem = ExternalTokens { tokens: (0..16).map(|i| i % 5).collect() };
        std::fs::write(
            dir.path().join("utt00000.sem.json"),
            serde_json::to_string(&sem).unwrap(),
        )
        .unwrap();
        let emo = ExternalMatrix {
            shape: [16, 3],
            data: (0..48).map(|i| i as f64).collect(),
        };
        std::fs::write(
            dir.path().join("utt00000.emo.json"),
            serde_json::to_string(&emo).unwrap(),
        )
        .unwrap();

        let teacher = ExternalTeacher::new(dir.path(), 3);
        let tokens = teacher.semantic_targets(&u).unwrap();
        assert_eq!(tokens.len(), t_model);
        // Nearest-index upsampling doubles each source frame.
        assert_eq!(tokens[0], sem.tokens[0]);
        assert_eq!(tokens[1], sem.tokens[0]);
        assert_eq!(tokens[2], sem.tokens[1]);
        let e = teacher.emotion_targets(&u).unwrap();
        assert_eq!(e.dim(), (t_model, 3));
        assert_eq!(e[[0, 0]], 0.0);
        assert_eq!(e[[2, 0]], 3.0);

        // Missing files and malformed widths are errors.
        let mut u2 = u.clone();
        u2.id = "missing".into();
        assert!(teacher.semantic_targets(&u2).is_err());
        let wrong_width = ExternalTeacher::new(dir.path(), 7);
        assert!(wrong_width.emotion_targets(&u).is_err());
    }

    /// Exhaustive 2-cluster oracle: best SSE over all 2^M assignments.
    fn best_two_cluster_sse(points: &Array2<f64>) -> (f64, Vec<usize>) {
        let m = points.nrows();
        assert!(m <= 16);
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << m) - 1 {
            let groups: Vec<usize> = (0..m).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut sse = 0.0;
            for g in 0..2 {
                let members: Vec<usize> =
                    (0..m).filter(|&i| groups[i] == g).collect();
                if members.is_empty() {
                    continue;
                }
                let mut mean = vec![0.0; points.ncols()];
                for &i in &members {
                    for j in 0..points.ncols() {
                        mean[j] += points[[i, j]] / members.len() as f64;
                    }
                }
                for &i in &members {
                    for j in 0..points.ncols() {
                        sse += (points[[i, j]] - mean[j]).powi(2);
                    }
                }
            }
            if sse < best.0 {
                best = (sse, groups);
            }
        }
        best
    }

    #[test]
    fn kmeans_two_cluster_matches_exhaustive_oracle() {
        let points = array![[0.0], [0.1], [10.0], [10.1]];
        let cb = fit_kmeans(&points, 2, 42).unwrap();
        let assign = kmeans_assign(&cb, &points);
        // Same partition up to label permutation.
        assert_eq!(assign[0], assign[1]);
        assert_eq!(assign[2], assign[3]);
        assert_ne!(assign[0], assign[2]);
        // Centroids are the cluster means {0.05, 10.05}.
        let c = cb.centroids();
        let mut vals = [c[[0, 0]], c[[1, 0]]];
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((vals[0] - 0.05).abs() < 1e-12);
        assert!((vals[1] - 10.05).abs() < 1e-12);
        // SSE matches the exhaustive optimum.
        let (oracle_sse, _) = best_two_cluster_sse(&points);
        let sse: f64 = points
            .rows()
            .into_iter()
            .zip(&assign)
            .map(|(p, &a)| sq_dist(p, c.row(a)))
            .sum();
        assert!((sse - oracle_sse).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k_equals_m_is_lossless() {
        let points = random_mel(6, 3, 12);
        let cb = fit_kmeans(&points, 6, 1).unwrap();
        let assign = kmeans_assign(&cb, &points);
        let c = cb.centroids();
        for (row, &a) in points.rows().into_iter().zip(&assign) {
            assert!(sq_dist(row, c.row(a)) < 1e-20);
        }
    }

    #[test]
    fn kmeans_assigning_centroids_returns_their_indices() {
        let points = random_mel(10, 4, 13);
        let cb = fit_kmeans(&points, 3, 7).unwrap();
        let c = cb.centroids();
        let assign = kmeans_assign(&cb, &c);
        assert_eq!(assign, vec![0, 1, 2]);
    }

    #[test]
    fn kmeans_errors_and_determinism() {
        let points = random_mel(5, 2, 14);
        assert!(fit_kmeans(&points, 0, 0).is_err());
        assert!(fit_kmeans(&points, 6, 0).is_err());
        assert!(fit_kmeans(&Array2::zeros((0, 2)), 1, 0).is_err());
        let a = fit_kmeans(&points, 3, 5).unwrap();
        let b = fit_kmeans(&points, 3, 5).unwrap();
        assert_eq!(a, b);
        let ids = kmeans_assign(&a, &random_mel(30, 2, 15));
        assert!(ids.iter().all(|&i| i < 3));
    }
}
