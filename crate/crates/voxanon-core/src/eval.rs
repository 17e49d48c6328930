//! Privacy/utility metrics and representation probes.
//!
//! The evaluation protocol mirrors voice-privacy-challenge practice at
//! desk scale: equal error rate of a speaker verifier for privacy,
//! unweighted average recall of an emotion classifier for emotional
//! preservation, and a token error rate over first-layer VQ codes as
//! the linguistic-content proxy (no external ASR/ASV models are used).
//!
//! The attacker is deliberately *lazy-informed*: a linear probe trained
//! on original (non-anonymized) audio features, scoring trials by
//! cosine similarity between averaged enrollment embeddings and test
//! embeddings. A semi-informed attacker retrained on anonymized audio
//! would be stronger; absolute numbers here are only meaningful as
//! within-run comparisons (original vs. anonymized, variant vs. full).

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::anonymizer::{anonymize_utterance, build_pool, AnonConfig, SpeakerPool};
use crate::bottleneck::reconstruct_layers;
use crate::model::Model;
use crate::rng::{derive_rng, standard_normal};
use crate::signal::{mel_spectrogram, MelConfig};
use crate::synthdata::{write_atomic, Corpus, LabeledUtterance};
use crate::{Error, Result};

// ---------------------------------------------------------------------
// Scalar metrics
// ---------------------------------------------------------------------

/// Equal error rate of a score-based verifier.
///
/// Trials are accepted when `score >= threshold`. Thresholds sweep all
/// midpoints between adjacent distinct scores plus the two infinities;
/// along that sweep the false-acceptance rate falls monotonically while
/// the false-rejection rate rises, and the EER is read off where they
/// cross, linearly interpolating between the bracketing thresholds when
/// no sweep point hits the crossing exactly.
pub fn eer(genuine: &[f64], impostor: &[f64]) -> Result<f64> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Eval("eer needs non-empty genuine and impostor score lists".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) {
        return Err(Error::Eval("eer scores must be finite".into()));
    }
    let mut gen_sorted = genuine.to_vec();
    let mut imp_sorted = impostor.to_vec();
    gen_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    imp_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut all: Vec<f64> = gen_sorted.iter().chain(&imp_sorted).copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();

    let mut thresholds = Vec::with_capacity(all.len() + 1);
    thresholds.push(f64::NEG_INFINITY);
    for w in all.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(f64::INFINITY);

    // Error rates at a threshold, via counts of scores below it.
    let rates = |theta: f64| -> (f64, f64) {
        let below_imp = imp_sorted.partition_point(|s| *s < theta);
        let below_gen = gen_sorted.partition_point(|s| *s < theta);
        let far = (imp_sorted.len() - below_imp) as f64 / imp_sorted.len() as f64;
        let frr = below_gen as f64 / gen_sorted.len() as f64;
        (far, frr)
    };

    let (mut prev_far, mut prev_frr) = rates(thresholds[0]);
    for &theta in &thresholds[1..] {
        let (far, frr) = rates(theta);
        let d_prev = prev_far - prev_frr;
        let d = far - frr;
        if d == 0.0 {
            return Ok(far);
        }
        if d < 0.0 {
            // d_prev > 0 >= d: interpolate the crossing linearly.
            let t = d_prev / (d_prev - d);
            return Ok(prev_far + t * (far - prev_far));
        }
        prev_far = far;
        prev_frr = frr;
    }
    // far - frr walks from +1 to -1, so a crossing always exists.
    unreachable!("eer sweep found no crossing");
}

/// Count matrix from aligned truth/prediction label sequences.
pub fn confusion_matrix(
    n_classes: usize,
    truths: &[usize],
    preds: &[usize],
) -> Result<Array2<u64>> {
    if truths.len() != preds.len() {
        return Err(Error::Eval(format!(
            "confusion needs aligned labels: {} truths vs {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let mut m = Array2::zeros((n_classes, n_classes));
    for (&t, &p) in truths.iter().zip(preds) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Eval(format!(
                "label out of range: ({t}, {p}) with {n_classes} classes"
            )));
        }
        m[[t, p]] += 1;
    }
    Ok(m)
}

/// Unweighted average recall: the mean over true classes of per-class
/// recall. Every class must have at least one sample.
pub fn uar(confusion: &Array2<u64>) -> Result<f64> {
    let (r, c) = confusion.dim();
    if r != c || r == 0 {
        return Err(Error::Eval(format!("confusion matrix must be square and non-empty, got {r}x{c}")));
    }
    let mut total = 0.0;
    for i in 0..r {
        let row: u64 = confusion.row(i).sum();
        if row == 0 {
            return Err(Error::Eval(format!("class {i} has no samples")));
        }
        total += confusion[[i, i]] as f64 / row as f64;
    }
    Ok(total / r as f64)
}

/// Mean recall over the classes that actually appear. Small evaluation
/// splits can miss a class entirely; the protocol uses this variant so
/// a missing class shrinks the average's support instead of erroring.
pub fn uar_over_present(confusion: &Array2<u64>) -> Result<f64> {
    let (r, c) = confusion.dim();
    if r != c || r == 0 {
        return Err(Error::Eval(format!("confusion matrix must be square and non-empty, got {r}x{c}")));
    }
    let mut total = 0.0;
    let mut present = 0;
    for i in 0..r {
        let row: u64 = confusion.row(i).sum();
        if row > 0 {
            total += confusion[[i, i]] as f64 / row as f64;
            present += 1;
        }
    }
    if present == 0 {
        return Err(Error::Eval("confusion matrix is all zeros".into()));
    }
    Ok(total / present as f64)
}

/// Levenshtein distance with unit costs for substitution, insertion,
/// and deletion.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance normalized by reference length; can exceed 1 when the
/// hypothesis is much longer than the reference.
pub fn token_error_rate(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Eval("token error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level token error rate: total edit distance over total
/// reference length (the WER pooling convention).
pub fn pooled_token_error_rate(pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
    let mut dist = 0usize;
    let mut len = 0usize;
    for (reference, hypothesis) in pairs {
        if reference.is_empty() {
            return Err(Error::Eval("pooled token error rate hit an empty reference".into()));
        }
        dist += edit_distance(reference, hypothesis);
        len += reference.len();
    }
    if len == 0 {
        return Err(Error::Eval("pooled token error rate needs at least one pair".into()));
    }
    Ok(dist as f64 / len as f64)
}

/// Cosine similarity; zero vectors score 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

// ---------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------

/// Full-batch softmax-regression training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    /// L2 penalty on the weights.
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 300, lr: 0.5, l2: 1e-4, seed: 0 }
    }
}

/// Linear softmax classifier over standardized features. Used both as
/// a representation probe and as the lazy-informed attack model (its
/// class-posterior vector is the trial embedding).
#[derive(Debug, Clone)]
pub struct LinearProbe {
    w: Array2<f64>,
    b: Array2<f64>,
    feat_mean: Array2<f64>,
    feat_scale: Array2<f64>,
    n_classes: usize,
}

fn softmax_rows_inplace(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Train a probe on frozen features (rows) and integer labels.
pub fn train_probe(
    features: &Array2<f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let n = features.nrows();
    let d = features.ncols();
    if n == 0 || d == 0 {
        return Err(Error::Eval(format!("probe needs non-empty features, got {n}x{d}")));
    }
    if labels.len() != n {
        return Err(Error::Eval(format!("{} labels for {} feature rows", labels.len(), n)));
    }
    if n_classes < 2 {
        return Err(Error::Eval(format!("probe needs at least 2 classes, got {n_classes}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Eval(format!("label {bad} out of range for {n_classes} classes")));
    }
    let distinct: std::collections::BTreeSet<_> = labels.iter().collect();
    if distinct.len() < 2 {
        return Err(Error::Eval("probe training split contains a single class".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eval("probe features must be finite".into()));
    }

    // Standardize with train statistics; constant columns pass through
    // centered (scale clamped away from zero).
    let feat_mean = features.mean_axis(Axis(0)).expect("n > 0").insert_axis(Axis(0));
    let mut var = Array2::<f64>::zeros((1, d));
    for row in features.rows() {
        for j in 0..d {
            let del = row[j] - feat_mean[[0, j]];
            var[[0, j]] += del * del;
        }
    }
    let feat_scale = var.mapv(|v| (v / n as f64).sqrt().max(1e-8));
    let xs = standardize(features, &feat_mean, &feat_scale);

    let mut rng = derive_rng(cfg.seed, "probe-init", &[]);
    let mut w = Array2::zeros((d, n_classes));
    for v in w.iter_mut() {
        *v = 0.01 * standard_normal(&mut rng);
    }
    let mut b = Array2::zeros((1, n_classes));

    // One-hot targets.
    let mut y = Array2::<f64>::zeros((n, n_classes));
    for (i, &l) in labels.iter().enumerate() {
        y[[i, l]] = 1.0;
    }

    let inv_n = 1.0 / n as f64;
    for _ in 0..cfg.epochs {
        let mut p = xs.dot(&w) + &b;
        softmax_rows_inplace(&mut p);
        let resid = (p - &y) * inv_n;
        let gw = xs.t().dot(&resid) + &(cfg.l2 * &w);
        let gb = resid.sum_axis(Axis(0)).insert_axis(Axis(0));
        w = w - cfg.lr * &gw;
        b = b - cfg.lr * &gb;
    }
    Ok(LinearProbe { w, b, feat_mean, feat_scale, n_classes })
}

fn standardize(x: &Array2<f64>, mean: &Array2<f64>, scale: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        for j in 0..row.len() {
            row[j] = (row[j] - mean[[0, j]]) / scale[[0, j]];
        }
    }
    out
}

impl LinearProbe {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn check_dim(&self, features: &Array2<f64>) -> Result<()> {
        if features.ncols() != self.w.nrows() {
            return Err(Error::Shape(format!(
                "probe expects {} feature columns, got {}",
                self.w.nrows(),
                features.ncols()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_dim(features)?;
        let xs = standardize(features, &self.feat_mean, &self.feat_scale);
        Ok(xs.dot(&self.w) + &self.b)
    }

    /// Class posteriors per row: the embedding used for trial scoring.
    pub fn posteriors(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        let mut p = self.logits(features)?;
        softmax_rows_inplace(&mut p);
        Ok(p)
    }

    /// Argmax class per row; ties resolve to the lowest index.
    pub fn predict(&self, features: &Array2<f64>) -> Result<Vec<usize>> {
        let logits = self.logits(features)?;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }

    pub fn accuracy(&self, features: &Array2<f64>, labels: &[usize]) -> Result<f64> {
        if labels.len() != features.nrows() {
            return Err(Error::Eval(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Eval("accuracy needs at least one sample".into()));
        }
        let preds = self.predict(features)?;
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}

// ---------------------------------------------------------------------
// Trials
// ---------------------------------------------------------------------

/// One verification trial: enrollment utterances vs. a test utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trial {
    pub enroll: Vec<String>,
    pub test: String,
    pub genuine: bool,
}

/// All trials of a protocol run; both kinds must be present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn n_genuine(&self) -> usize {
        self.trials.iter().filter(|t| t.genuine).count()
    }

    pub fn n_impostor(&self) -> usize {
        self.trials.len() - self.n_genuine()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_genuine() == 0 || self.n_impostor() == 0 {
            return Err(Error::Eval(format!(
                "trial list needs both kinds: {} genuine, {} impostor",
                self.n_genuine(),
                self.n_impostor()
            )));
        }
        Ok(())
    }

    /// Line format: `enroll1,enroll2|test|genuine` (or `impostor`).
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for t in &self.trials {
            out.push_str(&t.enroll.join(","));
            out.push('|');
            out.push_str(&t.test);
            out.push('|');
            out.push_str(if t.genuine { "genuine" } else { "impostor" });
            out.push('\n');
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 3 {
                return Err(Error::Eval(format!("trial line {} is malformed: {line:?}", i + 1)));
            }
            let genuine = match parts[2].trim() {
                "genuine" => true,
                "impostor" => false,
                other => {
                    return Err(Error::Eval(format!("trial line {}: unknown label {other:?}", i + 1)))
                }
            };
            let enroll: Vec<String> =
                parts[0].split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if enroll.is_empty() {
                return Err(Error::Eval(format!("trial line {} has no enrollment ids", i + 1)));
            }
            trials.push(Trial { enroll, test: parts[1].trim().to_string(), genuine });
        }
        let list = TrialList { trials };
        list.validate()?;
        Ok(list)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_lines().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }
}

/// Enrollment/test split of an evaluation set, grouped by speaker.
/// Holds indices into the utterance slice it was built from.
#[derive(Debug, Clone)]
pub struct SpeakerTrials {
    pub list: TrialList,
    /// speaker id -> enrollment utterance indices.
    pub enroll: BTreeMap<usize, Vec<usize>>,
    /// Test utterance indices, in corpus order.
    pub tests: Vec<usize>,
}

/// Deterministic trial construction: the first `enroll_per_speaker`
/// utterances of each speaker enroll that speaker; every remaining
/// utterance is scored against every enrolled speaker (genuine against
/// its own, impostor against the rest).
pub fn build_trials(utts: &[LabeledUtterance], enroll_per_speaker: usize) -> Result<SpeakerTrials> {
    if enroll_per_speaker == 0 {
        return Err(Error::Eval("need at least one enrollment utterance per speaker".into()));
    }
    let mut by_speaker: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, u) in utts.iter().enumerate() {
        by_speaker.entry(u.spec.speaker_id).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Eval(format!(
            "verification trials need at least 2 speakers, got {}",
            by_speaker.len()
        )));
    }
    let mut enroll = BTreeMap::new();
    let mut tests = Vec::new();
    for (&spk, idxs) in &by_speaker {
        if idxs.len() <= enroll_per_speaker {
            return Err(Error::Eval(format!(
                "speaker {spk} has {} utterances; needs more than {enroll_per_speaker} \
                 to enroll and test",
                idxs.len()
            )));
        }
        enroll.insert(spk, idxs[..enroll_per_speaker].to_vec());
        tests.extend_from_slice(&idxs[enroll_per_speaker..]);
    }
    tests.sort_unstable();

    let mut trials = Vec::new();
    for &ti in &tests {
        let test_spk = utts[ti].spec.speaker_id;
        for (&spk, idxs) in &enroll {
            trials.push(Trial {
                enroll: idxs.iter().map(|&i| utts[i].id.clone()).collect(),
                test: utts[ti].id.clone(),
                genuine: spk == test_spk,
            });
        }
    }
    let list = TrialList { trials };
    list.validate()?;
    Ok(SpeakerTrials { list, enroll, tests })
}

// ---------------------------------------------------------------------
// Utterance features
// ---------------------------------------------------------------------

/// Utterance-level feature vector from a frame matrix: per-column mean
/// concatenated with per-column standard deviation.
pub fn mean_std_features(frames: &Array2<f64>) -> Result<Vec<f64>> {
    let (t, d) = frames.dim();
    if t == 0 || d == 0 {
        return Err(Error::Shape(format!("cannot summarize an empty {t}x{d} frame matrix")));
    }
    let mut out = Vec::with_capacity(2 * d);
    for j in 0..d {
        let col = frames.column(j);
        let mean = col.sum() / t as f64;
        out.push(mean);
    }
    for j in 0..d {
        let col = frames.column(j);
        let mean = out[j];
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t as f64;
        out.push(var.sqrt());
    }
    Ok(out)
}

fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::Shape("no feature rows".into()));
    }
    let d = rows[0].len();
    let mut out = Array2::zeros((rows.len(), d));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != d {
            return Err(Error::Shape(format!("feature row {i} has dim {}, expected {d}", r.len())));
        }
        for (j, v) in r.iter().enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

/// Alternate each speaker's utterances between two probe splits, so
/// both sides contain every speaker. (A plain even/odd index split can
/// alias with the corpus's round-robin speaker order and produce
/// disjoint speaker sets.)
pub fn stratified_split(
    utts: &[LabeledUtterance],
) -> (Vec<&LabeledUtterance>, Vec<&LabeledUtterance>) {
    let mut seen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut fit = Vec::new();
    let mut held = Vec::new();
    for u in utts {
        let k = seen.entry(u.spec.speaker_id).or_insert(0);
        if *k % 2 == 0 {
            fit.push(u);
        } else {
            held.push(u);
        }
        *k += 1;
    }
    (fit, held)
}

/// Mel-statistics features for a batch of waveform utterances.
fn waveform_features(utts: &[&LabeledUtterance], mel_cfg: &MelConfig) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(utts.len());
    for u in utts {
        let mel = mel_spectrogram(&u.waveform, mel_cfg)?;
        rows.push(mean_std_features(&mel.frames)?);
    }
    stack_rows(&rows)
}

// ---------------------------------------------------------------------
// Protocol
// ---------------------------------------------------------------------

/// Settings for one end-to-end evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub anon: AnonConfig,
    pub probe: ProbeConfig,
    /// Original-audio utterances per speaker used for enrollment.
    pub enroll_per_speaker: usize,
    /// Hash of the run configuration, echoed into the report.
    pub config_hash: String,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            anon: AnonConfig::default(),
            probe: ProbeConfig::default(),
            enroll_per_speaker: 2,
            config_hash: String::new(),
        }
    }
}

/// Results of one protocol run. EER and UAR are fractions in [0, 1];
/// the token error rate is >= 0 and can exceed 1 when re-encoded audio
/// yields far more frames than the original.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    /// Verifier EER scoring the original test audio.
    pub eer_original: f64,
    /// Verifier EER scoring the anonymized test audio (higher = more
    /// private).
    pub eer_anonymized: f64,
    /// Pooled token error rate between VQ-1 codes of the original and
    /// the re-encoded anonymized audio (lower = better content
    /// preservation).
    pub ter_vq1: f64,
    /// Emotion-probe unweighted average recall on original test audio.
    pub uar_original: f64,
    /// Emotion-probe unweighted average recall on anonymized test audio.
    pub uar_anonymized: f64,
    pub n_genuine: usize,
    pub n_impostor: usize,
    /// Speakers contributing to the anonymization pool.
    pub n_pool: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eer_original", self.eer_original),
            ("eer_anonymized", self.eer_anonymized),
            ("uar_original", self.uar_original),
            ("uar_anonymized", self.uar_anonymized),
        ] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::Eval(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !self.ter_vq1.is_finite() || self.ter_vq1 < 0.0 {
            return Err(Error::Eval(format!("ter_vq1 = {} is not a valid rate", self.ter_vq1)));
        }
        if self.n_genuine == 0 || self.n_impostor == 0 {
            return Err(Error::Eval("report lacks genuine or impostor trials".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Eval(format!("report serialization failed: {e}")))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Eval(format!("report parse failed at {}: {e}", path.display())))
    }
}

/// Run the privacy/utility protocol for one model.
///
/// The speaker-verifier and emotion probes train on original train
/// audio; the anonymization pool is built from train speakers (disjoint
/// from the evaluated test speakers by corpus construction). Test
/// utterances are scored twice — original and anonymized — against
/// enrollment embeddings computed from original audio.
pub fn run_protocol(
    model: &Model,
    mel_cfg: &MelConfig,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
) -> Result<MetricsReport> {
    if corpus.train.is_empty() {
        return Err(Error::Eval("protocol needs a non-empty train split".into()));
    }
    let pool = build_pool(model, mel_cfg, &corpus.train, "train split")?;
    run_protocol_with_pool(model, mel_cfg, corpus, cfg, &pool)
}

/// [`run_protocol`] with a caller-supplied anonymization pool instead
/// of one built from the train split (e.g. a pool artifact saved at
/// training time).
pub fn run_protocol_with_pool(
    model: &Model,
    mel_cfg: &MelConfig,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
    pool: &SpeakerPool,
) -> Result<MetricsReport> {
    if corpus.train.is_empty() || corpus.test.is_empty() {
        return Err(Error::Eval("protocol needs non-empty train and test splits".into()));
    }
    cfg.anon.validate(pool.len())?;

    // Attack + emotion probes on original train audio features.
    let train_refs: Vec<&LabeledUtterance> = corpus.train.iter().collect();
    let train_feats = waveform_features(&train_refs, mel_cfg)?;
    let speaker_ids: std::collections::BTreeSet<usize> =
        corpus.train.iter().map(|u| u.spec.speaker_id).collect();
    let spk_index: BTreeMap<usize, usize> =
        speaker_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let spk_labels: Vec<usize> =
        corpus.train.iter().map(|u| spk_index[&u.spec.speaker_id]).collect();
    let emo_labels: Vec<usize> = corpus.train.iter().map(|u| u.spec.emotion_id).collect();

    let spk_probe = train_probe(&train_feats, &spk_labels, spk_index.len(), &cfg.probe)?;
    let emo_probe_cfg = ProbeConfig { seed: cfg.probe.seed.wrapping_add(1), ..cfg.probe.clone() };
    let n_emotions = corpus.cfg.n_emotions;
    let emo_probe = train_probe(&train_feats, &emo_labels, n_emotions, &emo_probe_cfg)?;

    // Enrollment embeddings from original test-speaker audio.
    let split = build_trials(&corpus.test, cfg.enroll_per_speaker)?;
    let mut enroll_emb: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (&spk, idxs) in &split.enroll {
        let utts: Vec<&LabeledUtterance> = idxs.iter().map(|&i| &corpus.test[i]).collect();
        let feats = waveform_features(&utts, mel_cfg)?;
        let emb = spk_probe.posteriors(&feats)?;
        let mean = emb.mean_axis(Axis(0)).expect("non-empty enrollment");
        enroll_emb.insert(spk, mean.to_vec());
    }

    // Anonymize every test utterance once.
    let mut anon_utts: Vec<LabeledUtterance> = Vec::with_capacity(split.tests.len());
    for &ti in &split.tests {
        let u = &corpus.test[ti];
        let wave = anonymize_utterance(
            model,
            mel_cfg,
            pool,
            &cfg.anon,
            &u.waveform,
            &u.id,
            Some(&u.spec.speaker_id.to_string()),
        )?;
        let mut anon = u.clone();
        anon.waveform = wave;
        anon_utts.push(anon);
    }

    // Test embeddings under both conditions.
    let orig_refs: Vec<&LabeledUtterance> = split.tests.iter().map(|&i| &corpus.test[i]).collect();
    let orig_feats = waveform_features(&orig_refs, mel_cfg)?;
    let orig_emb = spk_probe.posteriors(&orig_feats)?;
    let anon_refs: Vec<&LabeledUtterance> = anon_utts.iter().collect();
    let anon_feats = waveform_features(&anon_refs, mel_cfg)?;
    let anon_emb = spk_probe.posteriors(&anon_feats)?;

    let score_condition = |emb: &Array2<f64>| -> (Vec<f64>, Vec<f64>) {
        let mut genuine = Vec::new();
        let mut impostor = Vec::new();
        for (k, &ti) in split.tests.iter().enumerate() {
            let test_spk = corpus.test[ti].spec.speaker_id;
            let row: Vec<f64> = emb.row(k).to_vec();
            for (&spk, e) in &enroll_emb {
                let s = cosine(e, &row);
                if spk == test_spk {
                    genuine.push(s);
                } else {
                    impostor.push(s);
                }
            }
        }
        (genuine, impostor)
    };
    let (gen_o, imp_o) = score_condition(&orig_emb);
    let (gen_a, imp_a) = score_condition(&anon_emb);
    let eer_original = eer(&gen_o, &imp_o)?;
    let eer_anonymized = eer(&gen_a, &imp_a)?;

    // VQ-1 content preservation: codes of the original vs. the
    // re-encoded anonymized audio.
    let mut code_pairs = Vec::with_capacity(split.tests.len());
    for (k, &ti) in split.tests.iter().enumerate() {
        let (st_orig, _) = model.encode_waveform(&corpus.test[ti].waveform, mel_cfg)?;
        let (st_anon, _) = model.encode_waveform(&anon_utts[k].waveform, mel_cfg)?;
        code_pairs.push((st_orig.codes[0].clone(), st_anon.codes[0].clone()));
    }
    let ter_vq1 = pooled_token_error_rate(&code_pairs)?;

    // Emotion preservation under both conditions.
    let emo_truth: Vec<usize> =
        split.tests.iter().map(|&i| corpus.test[i].spec.emotion_id).collect();
    let uar_original = uar_over_present(&confusion_matrix(
        n_emotions,
        &emo_truth,
        &emo_probe.predict(&orig_feats)?,
    )?)?;
    let uar_anonymized = uar_over_present(&confusion_matrix(
        n_emotions,
        &emo_truth,
        &emo_probe.predict(&anon_feats)?,
    )?)?;

    let report = MetricsReport {
        eer_original,
        eer_anonymized,
        ter_vq1,
        uar_original,
        uar_anonymized,
        n_genuine: split.list.n_genuine(),
        n_impostor: split.list.n_impostor(),
        n_pool: pool.len(),
        config_hash: cfg.config_hash.clone(),
        seed: cfg.anon.seed,
    };
    report.validate()?;
    Ok(report)
}

// ---------------------------------------------------------------------
// Layer probes
// ---------------------------------------------------------------------

/// A named quantizer-layer subset to probe (layers are 1-based), with
/// or without the pooled speaker vector appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSubset {
    pub name: String,
    pub layers: Vec<usize>,
    pub with_speaker: bool,
}

impl LayerSubset {
    /// The standard probe rows: content layer alone, residual layers
    /// alone, the full stack, and the full stack plus speaker vector.
    pub fn standard(n_layers: usize) -> Vec<LayerSubset> {
        vec![
            LayerSubset { name: "vq1".into(), layers: vec![1], with_speaker: false },
            LayerSubset {
                name: format!("vq2:{n_layers}"),
                layers: (2..=n_layers).collect(),
                with_speaker: false,
            },
            LayerSubset {
                name: format!("vq1:{n_layers}"),
                layers: (1..=n_layers).collect(),
                with_speaker: false,
            },
            LayerSubset {
                name: format!("vq1:{n_layers}+s"),
                layers: (1..=n_layers).collect(),
                with_speaker: true,
            },
        ]
    }
}

/// What a linear probe recovers from one layer subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerProbeReport {
    pub name: String,
    /// Utterance-level speaker classification accuracy.
    pub speaker_accuracy: f64,
    /// Frame-level content-token classification accuracy.
    pub token_accuracy: f64,
    /// Utterance-level emotion UAR.
    pub emotion_uar: f64,
}

struct UttRep {
    frames: Array2<f64>,
    speaker_vec: Vec<f64>,
    speaker: usize,
    emotion: usize,
    tokens: Vec<usize>,
}

fn encode_reps(
    model: &Model,
    mel_cfg: &MelConfig,
    utts: &[&LabeledUtterance],
    layers: &[usize],
) -> Result<Vec<UttRep>> {
    let mut reps = Vec::with_capacity(utts.len());
    for u in utts {
        let (st, s) = model.encode_waveform(&u.waveform, mel_cfg)?;
        let frames = if layers.is_empty() {
            Array2::zeros((st.n_frames(), model.cfg.frame_dim))
        } else {
            reconstruct_layers(&st, layers)?
        };
        if frames.nrows() != u.frame_tokens.len() {
            return Err(Error::Shape(format!(
                "utterance {}: {} frames vs {} frame tokens",
                u.id,
                frames.nrows(),
                u.frame_tokens.len()
            )));
        }
        reps.push(UttRep {
            frames,
            speaker_vec: s.row(0).to_vec(),
            speaker: u.spec.speaker_id,
            emotion: u.spec.emotion_id,
            tokens: u.frame_tokens.clone(),
        });
    }
    Ok(reps)
}

fn utterance_rows(reps: &[UttRep], with_speaker: bool) -> Result<Array2<f64>> {
    let mut rows = Vec::with_capacity(reps.len());
    for r in reps {
        let mut f = mean_std_features(&r.frames)?;
        if with_speaker {
            f.extend_from_slice(&r.speaker_vec);
        }
        rows.push(f);
    }
    stack_rows(&rows)
}

fn frame_rows(reps: &[UttRep], with_speaker: bool) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in reps {
        for (t, row) in r.frames.rows().into_iter().enumerate() {
            let mut f: Vec<f64> = row.to_vec();
            if with_speaker {
                f.extend_from_slice(&r.speaker_vec);
            }
            rows.push(f);
            labels.push(r.tokens[t]);
        }
    }
    Ok((stack_rows(&rows)?, labels))
}

/// Probe each layer subset for speaker, content, and emotion
/// information. Probes train on half of each speaker's train
/// utterances and are scored on the other half (speaker labels do not
/// transfer across splits with disjoint speakers, so the probe split
/// is made within the training split, stratified by speaker).
pub fn probe_layers(
    model: &Model,
    mel_cfg: &MelConfig,
    corpus: &Corpus,
    subsets: &[LayerSubset],
    probe_cfg: &ProbeConfig,
) -> Result<Vec<LayerProbeReport>> {
    if corpus.train.len() < 4 {
        return Err(Error::Eval(format!(
            "layer probing needs at least 4 train utterances, got {}",
            corpus.train.len()
        )));
    }
    if subsets.is_empty() {
        return Err(Error::Eval("no layer subsets given".into()));
    }
    let (fit, held) = stratified_split(&corpus.train);

    let spk_ids: std::collections::BTreeSet<usize> =
        corpus.train.iter().map(|u| u.spec.speaker_id).collect();
    let spk_index: BTreeMap<usize, usize> =
        spk_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let n_emotions = corpus.cfg.n_emotions;
    let vocab = corpus.cfg.vocab_size;

    let mut out = Vec::with_capacity(subsets.len());
    for subset in subsets {
        let fit_reps = encode_reps(model, mel_cfg, &fit, &subset.layers)?;
        let held_reps = encode_reps(model, mel_cfg, &held, &subset.layers)?;

        // Utterance-level speaker and emotion probes.
        let fit_utt = utterance_rows(&fit_reps, subset.with_speaker)?;
        let held_utt = utterance_rows(&held_reps, subset.with_speaker)?;
        let fit_spk: Vec<usize> = fit_reps.iter().map(|r| spk_index[&r.speaker]).collect();
        let held_spk: Vec<usize> = held_reps.iter().map(|r| spk_index[&r.speaker]).collect();
        let spk_probe = train_probe(&fit_utt, &fit_spk, spk_index.len(), probe_cfg)?;
        let speaker_accuracy = spk_probe.accuracy(&held_utt, &held_spk)?;

        let fit_emo: Vec<usize> = fit_reps.iter().map(|r| r.emotion).collect();
        let held_emo: Vec<usize> = held_reps.iter().map(|r| r.emotion).collect();
        let emo_cfg = ProbeConfig { seed: probe_cfg.seed.wrapping_add(1), ..probe_cfg.clone() };
        let emo_probe = train_probe(&fit_utt, &fit_emo, n_emotions, &emo_cfg)?;
        let emo_conf =
            confusion_matrix(n_emotions, &held_emo, &emo_probe.predict(&held_utt)?)?;
        let emotion_uar = uar_over_present(&emo_conf)?;

        // Frame-level content-token probe.
        let (fit_frames, fit_tok) = frame_rows(&fit_reps, subset.with_speaker)?;
        let (held_frames, held_tok) = frame_rows(&held_reps, subset.with_speaker)?;
        let tok_cfg = ProbeConfig { seed: probe_cfg.seed.wrapping_add(2), ..probe_cfg.clone() };
        let tok_probe = train_probe(&fit_frames, &fit_tok, vocab, &tok_cfg)?;
        let token_accuracy = tok_probe.accuracy(&held_frames, &held_tok)?;

        out.push(LayerProbeReport {
            name: subset.name.clone(),
            speaker_accuracy,
            token_accuracy,
            emotion_uar,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------

/// One ablation variant's metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricsReport,
}

/// Per-variant metrics with directional deltas against a base variant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Result<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.metrics)
            .ok_or_else(|| Error::Eval(format!("ablation variant '{name}' missing from report")))
    }

    /// (variant - base) deltas for the three headline metrics:
    /// anonymized EER, VQ-1 TER, anonymized UAR.
    pub fn delta(&self, name: &str, base: &str) -> Result<(f64, f64, f64)> {
        let v = self.get(name)?;
        let b = self.get(base)?;
        Ok((
            v.eer_anonymized - b.eer_anonymized,
            v.ter_vq1 - b.ter_vq1,
            v.uar_anonymized - b.uar_anonymized,
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Eval(format!("ablation serialization failed: {e}")))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Eval(format!("ablation parse failed at {}: {e}", path.display())))
    }
}

/// Run the protocol for each named model variant on the same corpus.
pub fn ablate(
    variants: &[(String, &Model)],
    mel_cfg: &MelConfig,
    corpus: &Corpus,
    cfg: &ProtocolConfig,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Eval("no ablation variants given".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (name, model) in variants {
        let metrics = run_protocol(model, mel_cfg, corpus, cfg)?;
        rows.push(AblationRow { name: name.clone(), metrics });
    }
    Ok(AblationReport { rows })
}
