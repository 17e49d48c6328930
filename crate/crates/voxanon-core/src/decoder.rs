//! Waveform decoder, discriminator, and the reconstruction/adversarial
//! objectives.
//!
//! The decoder consumes the quantized frame representation with the
//! speaker vector concatenated onto every frame and upsamples by the mel
//! hop length through a stack of transposed convolutions, so `T` frames
//! always come back as exactly `T * hop` samples. Reconstruction quality
//! is scored in the mel domain (per-element L1 plus RMS L2); realism by a
//! least-squares GAN over a three-scale waveform discriminator with L1
//! feature matching, and the full objective is the weighted sum with the
//! reconstruction term dominating.

use crate::nn::layers::{Conv1d, ConvT1d, Linear};
use crate::nn::tape::{PadKind, Tape, Var};
use crate::nn::{DifferentiableMel, ParamSet};
use crate::{Error, Result};
use rand::Rng;

/// Reconstruction weight in the total objective.
pub const LAMBDA_REC: f64 = 45.0;
/// Feature-matching weight inside the generator's adversarial objective.
pub const LAMBDA_FEAT: f64 = 2.0;
/// Negative-side slope for the decoder/discriminator activations.
const LEAKY_SLOPE: f64 = 0.1;
/// Epsilon under the RMS square root (keeps the gradient finite at zero
/// mel difference; adds at most 1e-6 to the loss value).
const RMS_EPS: f64 = 1e-12;

/// Per-frame decoder conditioning.
#[derive(Debug, Clone, Copy)]
pub struct DecoderInput {
    /// `1 x speaker_dim` pooled speaker vector.
    pub speaker: Var,
    /// `T x frame_dim` quantized representation (selected-layer sum).
    pub quantized: Var,
}

/// Split an upsampling factor into transposed-convolution strides drawn
/// from {8, 4, 2}, largest first.
pub fn factor_strides(hop: usize) -> Result<Vec<usize>> {
    let mut rest = hop;
    let mut strides = Vec::new();
    for s in [8usize, 4, 2] {
        while rest % s == 0 && rest > 1 {
            strides.push(s);
            rest /= s;
        }
    }
    if rest != 1 || strides.is_empty() {
        return Err(Error::Config(format!(
            "hop {hop} does not factor into upsampling strides of 2/4/8"
        )));
    }
    Ok(strides)
}

/// Transposed-convolution upsampling stack: frames to waveform.
#[derive(Debug, Clone)]
pub struct Decoder {
    pre: Linear,
    ups: Vec<ConvT1d>,
    post: Conv1d,
    pub frame_dim: usize,
    pub speaker_dim: usize,
    pub hop: usize,
}

impl Decoder {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        frame_dim: usize,
        speaker_dim: usize,
        hop: usize,
        width: usize,
    ) -> Result<Self> {
        let strides = factor_strides(hop)?;
        let pre = Linear::new(params, rng, "decoder.pre", frame_dim + speaker_dim, width, true);
        let mut ups = Vec::new();
        let mut w = width;
        for (i, &s) in strides.iter().enumerate() {
            let w_out = (w / 2).max(4);
            ups.push(ConvT1d::new(params, rng, &format!("decoder.up{i}"), w, w_out, s));
            w = w_out;
        }
        let post = Conv1d::same(params, rng, "decoder.post", w, 1, 5, PadKind::Zero);
        Ok(Decoder { pre, ups, post, frame_dim, speaker_dim, hop })
    }

    /// Decode to a `(T * hop) x 1` waveform column.
    pub fn decode(&self, tape: &mut Tape, bound: &[Var], inp: DecoderInput) -> Result<Var> {
        let (t, d) = tape.value(inp.quantized).dim();
        let sdim = tape.value(inp.speaker).dim();
        if d != self.frame_dim {
            return Err(Error::Shape(format!(
                "decoder expects frame width {}, got {d}",
                self.frame_dim
            )));
        }
        if sdim != (1, self.speaker_dim) {
            return Err(Error::Shape(format!(
                "decoder expects speaker vector (1, {}), got {sdim:?}",
                self.speaker_dim
            )));
        }
        let s_rows = tape.broadcast_row(inp.speaker, t);
        let x = tape.concat_cols(inp.quantized, s_rows);
        let mut h = self.pre.forward(tape, bound, x);
        h = tape.leaky_relu(h, LEAKY_SLOPE);
        for up in &self.ups {
            h = up.forward(tape, bound, h);
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
        let y = self.post.forward(tape, bound, h);
        Ok(tape.tanh(y))
    }
}

/// One discriminator scale: strided convolutions with leaky activations;
/// every intermediate activation doubles as a feature-matching tap.
#[derive(Debug, Clone)]
struct DiscScale {
    convs: Vec<Conv1d>,
}

impl DiscScale {
    fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, name: &str, width: usize) -> Self {
        let convs = vec![
            Conv1d::with_stride(params, rng, &format!("{name}.c0"), 1, width, 15, 4, PadKind::Zero),
            Conv1d::with_stride(params, rng, &format!("{name}.c1"), width, width, 7, 4, PadKind::Zero),
            Conv1d::with_stride(params, rng, &format!("{name}.c2"), width, 1, 3, 1, PadKind::Zero),
        ];
        DiscScale { convs }
    }

    /// Returns (per-position logits, feature taps).
    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> (Var, Vec<Var>) {
        let mut h = x;
        let mut feats = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, bound, h);
            if i + 1 < self.convs.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
                feats.push(h);
            }
        }
        (h, feats)
    }
}

/// Three-scale waveform discriminator (input, 2x, and 4x average-pooled).
#[derive(Debug, Clone)]
pub struct Discriminator {
    scales: Vec<DiscScale>,
}

/// Downsampling factor per scale.
const SCALE_FACTORS: [usize; 3] = [1, 2, 4];

impl Discriminator {
    pub fn new<R: Rng>(params: &mut ParamSet, rng: &mut R, width: usize) -> Self {
        let scales = SCALE_FACTORS
            .iter()
            .enumerate()
            .map(|(i, _)| DiscScale::new(params, rng, &format!("disc.s{i}"), width))
            .collect();
        Discriminator { scales }
    }

    /// Minimum waveform length the deepest scale can digest.
    pub fn min_samples(&self) -> usize {
        // Largest pooling factor times the first kernel span.
        4 * 15
    }

    fn forward_all(&self, tape: &mut Tape, bound: &[Var], wave: Var) -> Vec<(Var, Vec<Var>)> {
        self.scales
            .iter()
            .zip(SCALE_FACTORS)
            .map(|(scale, factor)| {
                let x = if factor == 1 { wave } else { tape.avg_pool_rows(wave, factor) };
                scale.forward(tape, bound, x)
            })
            .collect()
    }
}

/// Mel-domain reconstruction distance: per-element mean L1 plus RMS L2,
/// computed on the overlapping prefix of the two waveforms.
pub fn recon_loss(
    tape: &mut Tape,
    mel: &DifferentiableMel,
    reference: Var,
    generated: Var,
) -> Result<Var> {
    let n_ref = tape.value(reference).nrows();
    let n_gen = tape.value(generated).nrows();
    let n = n_ref.min(n_gen);
    if n == 0 {
        return Err(Error::Train("reconstruction loss on empty overlap".into()));
    }
    let a = if n_ref == n { reference } else { tape.slice_rows(reference, 0, n) };
    let b = if n_gen == n { generated } else { tape.slice_rows(generated, 0, n) };
    let mel_a = mel.apply(tape, a);
    let mel_b = mel.apply(tape, b);
    let diff = tape.sub(mel_a, mel_b);
    let l1 = {
        let abs = tape.abs(diff);
        tape.mean_all(abs)
    };
    let l2 = {
        let sq = tape.mul(diff, diff);
        let msq = tape.mean_all(sq);
        tape.sqrt_eps(msq, RMS_EPS)
    };
    Ok(tape.add(l1, l2))
}

/// The three GAN quantities for one (real, fake) waveform pair.
#[derive(Debug, Clone, Copy)]
pub struct AdversarialLosses {
    /// Generator term: fake should score 1 at every scale.
    pub gen_adv: Var,
    /// Discriminator term: real to 1, fake to 0.
    pub disc: Var,
    /// L1 feature matching across discriminator taps.
    pub feat_match: Var,
}

/// Least-squares GAN losses plus feature matching over all scales.
///
/// `real` enters the discriminator as a constant for the generator-side
/// terms by construction of the caller's tape (the reference waveform is
/// data); the split between generator and discriminator *parameter*
/// updates is the trainer's responsibility — this function only builds
/// the graph.
pub fn adversarial_losses(
    tape: &mut Tape,
    bound: &[Var],
    disc: &Discriminator,
    real: Var,
    fake: Var,
) -> Result<AdversarialLosses> {
    let n_real = tape.value(real).nrows();
    let n_fake = tape.value(fake).nrows();
    let n = n_real.min(n_fake);
    if n < disc.min_samples() {
        return Err(Error::Train(format!(
            "waveform overlap {n} too short for the discriminator (needs {})",
            disc.min_samples()
        )));
    }
    let real = if n_real == n { real } else { tape.slice_rows(real, 0, n) };
    let fake = if n_fake == n { fake } else { tape.slice_rows(fake, 0, n) };

    let real_out = disc.forward_all(tape, bound, real);
    let fake_out = disc.forward_all(tape, bound, fake);

    let mut gen_adv: Option<Var> = None;
    let mut disc_loss: Option<Var> = None;
    let mut feat: Option<Var> = None;
    let add_to = |tape: &mut Tape, acc: &mut Option<Var>, term: Var| {
        *acc = Some(match *acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    };

    for ((r_logit, r_feats), (f_logit, f_feats)) in real_out.iter().zip(&fake_out) {
        // LSGAN: mean((D(real) - 1)^2) + mean(D(fake)^2) for the critic,
        // mean((D(fake) - 1)^2) for the generator.
        let one_r = tape.constant(ndarray::Array2::ones(tape.value(*r_logit).dim()));
        let r_err = tape.sub(*r_logit, one_r);
        let r_sq = tape.mul(r_err, r_err);
        let d_real = tape.mean_all(r_sq);
        let f_sq = tape.mul(*f_logit, *f_logit);
        let d_fake = tape.mean_all(f_sq);
        let d_term = tape.add(d_real, d_fake);
        add_to(tape, &mut disc_loss, d_term);

        let one_f = tape.constant(ndarray::Array2::ones(tape.value(*f_logit).dim()));
        let g_err = tape.sub(*f_logit, one_f);
        let g_sq = tape.mul(g_err, g_err);
        let g_term = tape.mean_all(g_sq);
        add_to(tape, &mut gen_adv, g_term);

        for (rf, ff) in r_feats.iter().zip(f_feats) {
            let d = tape.sub(*rf, *ff);
            let a = tape.abs(d);
            let m = tape.mean_all(a);
            add_to(tape, &mut feat, m);
        }
    }
    Ok(AdversarialLosses {
        gen_adv: gen_adv.expect("at least one scale"),
        disc: disc_loss.expect("at least one scale"),
        feat_match: feat.expect("at least one tap"),
    })
}

/// Scalar loss terms entering the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub rec: f64,
    pub adv: f64,
    pub com: f64,
    pub spk: f64,
    pub lin: f64,
    pub emo: f64,
}

/// The weighted total with its ingredients, one record per step.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub rec: f64,
    pub adv: f64,
    pub com: f64,
    pub spk: f64,
    pub lin: f64,
    pub emo: f64,
    pub lambda_r: f64,
    pub total: f64,
}

/// Compose the total objective; rejects non-finite parts by name so a
/// bad step can be reported and skipped.
pub fn total_loss(parts: LossParts, lambda_r: f64) -> Result<LossBreakdown> {
    let named = [
        ("rec", parts.rec),
        ("adv", parts.adv),
        ("com", parts.com),
        ("spk", parts.spk),
        ("lin", parts.lin),
        ("emo", parts.emo),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Train(format!("non-finite loss term {name} = {v}")));
        }
    }
    let total = lambda_r * parts.rec + parts.adv + parts.com + parts.spk + parts.lin + parts.emo;
    Ok(LossBreakdown {
        rec: parts.rec,
        adv: parts.adv,
        com: parts.com,
        spk: parts.spk,
        lin: parts.lin,
        emo: parts.emo,
        lambda_r,
        total,
    })
}
