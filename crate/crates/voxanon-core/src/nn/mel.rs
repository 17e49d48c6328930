//! Differentiable log-mel extraction for the reconstruction loss.
//!
//! The signal-path extractor in [`crate::signal`] uses an FFT and is not
//! differentiable; this one expresses the identical computation as tape
//! operations — reflect-padded unfold, windowed DFT as two matrix
//! products, power, mel filterbank, log floor — so gradients flow from a
//! spectral loss back into generated samples. A unit test pins the two
//! paths to each other to ~1e-9.

use crate::nn::tape::{PadKind, Tape, Var};
use crate::signal::{hann_window, mel_filterbank, MelConfig, LOG_FLOOR};
use ndarray::Array2;

/// Precomputed DFT and filterbank matrices for one [`MelConfig`].
#[derive(Debug, Clone)]
pub struct DifferentiableMel {
    cfg: MelConfig,
    /// `win x n_freqs`, window folded in: `w[n] * cos(2*pi*k*n/n_fft)`.
    dft_cos: Array2<f64>,
    /// `win x n_freqs`, window folded in: `w[n] * sin(2*pi*k*n/n_fft)`.
    dft_sin: Array2<f64>,
    /// `n_freqs x n_mels` (transposed filterbank).
    fb_t: Array2<f64>,
}

impl DifferentiableMel {
    pub fn new(cfg: &MelConfig) -> Self {
        let window = hann_window(cfg.win);
        let n_freqs = cfg.n_freqs();
        let mut dft_cos = Array2::zeros((cfg.win, n_freqs));
        let mut dft_sin = Array2::zeros((cfg.win, n_freqs));
        for n in 0..cfg.win {
            for k in 0..n_freqs {
                let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / cfg.n_fft as f64;
                dft_cos[[n, k]] = window[n] * ang.cos();
                dft_sin[[n, k]] = window[n] * ang.sin();
            }
        }
        let fb_t = mel_filterbank(cfg).t().to_owned();
        DifferentiableMel { cfg: *cfg, dft_cos, dft_sin, fb_t }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Log-mel of a waveform var (`N x 1` rows of samples), producing
    /// `T x n_mels` with the same frame count as the signal-path
    /// extractor: `T = 1 + N / hop`.
    pub fn apply(&self, tape: &mut Tape, wave: Var) -> Var {
        assert_eq!(tape.value(wave).ncols(), 1, "waveform var must be N x 1");
        let pad_left = self.cfg.win / 2;
        let pad_right = self.cfg.win - pad_left;
        let frames = tape.unfold(
            wave,
            self.cfg.win,
            self.cfg.hop,
            pad_left,
            pad_right,
            PadKind::Reflect,
        );
        let cos = tape.constant(self.dft_cos.clone());
        let sin = tape.constant(self.dft_sin.clone());
        let re = tape.matmul(frames, cos);
        let im = tape.matmul(frames, sin);
        let re2 = tape.mul(re, re);
        let im2 = tape.mul(im, im);
        let power = tape.add(re2, im2);
        let fb = tape.constant(self.fb_t.clone());
        let mel = tape.matmul(power, fb);
        tape.log_floor(mel, LOG_FLOOR)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{mel_spectrogram, Waveform};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen::<f64>() * 1.6 - 0.8).collect()
    }

    fn as_column(samples: &[f64]) -> Array2<f64> {
        Array2::from_shape_vec((samples.len(), 1), samples.to_vec()).unwrap()
    }

    #[test]
    fn matches_signal_path_extractor() {
        let cfg = MelConfig::default();
        let samples = noise(2048, 3);
        let reference = mel_spectrogram(&Waveform::new(samples.clone(), 16000), &cfg).unwrap();

        let dmel = DifferentiableMel::new(&cfg);
        let mut tape = Tape::new();
        let w = tape.constant(as_column(&samples));
        let m = dmel.apply(&mut tape, w);

        assert_eq!(tape.value(m).dim(), reference.frames.dim());
        let mut max_diff = 0.0f64;
        for (a, b) in tape.value(m).iter().zip(reference.frames.iter()) {
            max_diff = max_diff.max((a - b).abs());
        }
        assert!(max_diff < 1e-9, "paths diverge by {max_diff}");
    }

    #[test]
    fn silence_hits_log_floor() {
        let cfg = MelConfig {
            n_fft: 256,
            win: 256,
            hop: 64,
            ..MelConfig::default()
        };
        let dmel = DifferentiableMel::new(&cfg);
        let mut tape = Tape::new();
        let w = tape.constant(Array2::zeros((512, 1)));
        let m = dmel.apply(&mut tape, w);
        for &v in tape.value(m).iter() {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn gradient_matches_finite_differences_on_sampled_coords() {
        let cfg = MelConfig {
            n_fft: 256,
            win: 256,
            hop: 64,
            ..MelConfig::default()
        };
        let dmel = DifferentiableMel::new(&cfg);
        let samples = noise(512, 9);

        let eval = |s: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let w = tape.constant(as_column(s));
            let m = dmel.apply(&mut tape, w);
            let sq = tape.mul(m, m);
            let mean = tape.mean_all(sq);
            tape.value(mean)[[0, 0]]
        };

        let mut tape = Tape::new();
        let w = tape.leaf(as_column(&samples));
        let m = dmel.apply(&mut tape, w);
        let sq = tape.mul(m, m);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        let g = tape.grad(w).unwrap().clone();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let i = rng.gen_range(0..samples.len());
            let h = 1e-6;
            let mut hi = samples.clone();
            hi[i] += h;
            let mut lo = samples.clone();
            lo[i] -= h;
            let numeric = (eval(&hi) - eval(&lo)) / (2.0 * h);
            let analytic = g[[i, 0]];
            let mag = numeric.abs().max(analytic.abs());
            if mag > 1e-6 {
                let rel = (numeric - analytic).abs() / mag;
                assert!(rel < 1e-3, "sample {i}: analytic {analytic}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn frame_count_matches_signal_formula() {
        let cfg = MelConfig {
            n_fft: 256,
            win: 256,
            hop: 64,
            ..MelConfig::default()
        };
        let dmel = DifferentiableMel::new(&cfg);
        for len in [256usize, 320, 577, 1024] {
            let mut tape = Tape::new();
            let w = tape.constant(as_column(&noise(len, len as u64)));
            let m = dmel.apply(&mut tape, w);
            assert_eq!(tape.value(m).nrows(), cfg.n_frames(len), "len {len}");
        }
    }
}
