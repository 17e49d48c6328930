//! Audio I/O and the mel-spectrogram front-end.
//!
//! Every encoder and the reconstruction loss consume the same 80-bin
//! log-mel representation computed here: Hann window, reflect ("center")
//! padding, STFT power spectrum, triangular mel filterbank, and a
//! `ln(max(e, 1e-5))` floor. All operations are pure and reentrant.

use crate::{Error, Result};
use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};
use std::io::{Read, Write};
use std::path::Path;

/// Energy floor applied before log compression.
pub const LOG_FLOOR: f64 = 1e-5;

/// Mono waveform with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Linear resampling to a new rate. Identity when rates match.
    pub fn resample(&self, target_rate: u32) -> Waveform {
        if target_rate == self.sample_rate || self.samples.is_empty() {
            return Waveform::new(self.samples.clone(), target_rate);
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let out_len = ((self.samples.len() as f64) / ratio).floor() as usize;
        let n = self.samples.len();
        let samples = (0..out_len)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = pos.floor() as usize;
                let frac = pos - j as f64;
                let a = self.samples[j.min(n - 1)];
                let b = self.samples[(j + 1).min(n - 1)];
                a + (b - a) * frac
            })
            .collect();
        Waveform::new(samples, target_rate)
    }
}

/// How to handle multi-channel WAV input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StereoPolicy {
    /// Average all channels into one.
    Downmix,
    /// Reject anything that is not mono.
    Reject,
}

/// STFT/mel extraction parameters.
///
/// `hop <= win <= n_fft`, `n_mels` is fixed at 80, and
/// `0 <= fmin < fmax <= sample_rate / 2`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        // Standard 16 kHz vocoder front-end settings.
        MelConfig {
            sample_rate: 16000,
            n_fft: 1024,
            win: 1024,
            hop: 256,
            n_mels: 80,
            fmin: 0.0,
            fmax: 8000.0,
        }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels != 80 {
            return Err(Error::Config(format!(
                "n_mels must be 80, got {}",
                self.n_mels
            )));
        }
        if self.hop == 0 || self.hop > self.win || self.win > self.n_fft {
            return Err(Error::Config(format!(
                "require 0 < hop <= win <= n_fft, got hop={} win={} n_fft={}",
                self.hop, self.win, self.n_fft
            )));
        }
        if !(self.fmin >= 0.0 && self.fmin < self.fmax) {
            return Err(Error::Config(format!(
                "require 0 <= fmin < fmax, got fmin={} fmax={}",
                self.fmin, self.fmax
            )));
        }
        if self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "fmax {} exceeds Nyquist {}",
                self.fmax,
                self.sample_rate as f64 / 2.0
            )));
        }
        Ok(())
    }

    /// Number of frequency bins in the one-sided spectrum.
    pub fn n_freqs(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a waveform of `len` samples under center padding:
    /// the signal is padded by `win/2` on the left and `win - win/2` on the
    /// right, so `T = 1 + (len + win - win) / hop = 1 + len / hop` rounded
    /// down relative to the padded length.
    pub fn n_frames(&self, len: usize) -> usize {
        let padded = len + self.win;
        if padded < self.win {
            return 0;
        }
        1 + (padded - self.win) / self.hop
    }
}

/// `T x 80` log-mel matrix plus the timing metadata needed to map frames
/// back to samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Array2<f64>,
    pub hop: usize,
    pub sample_rate: u32,
}

impl MelSpectrogram {
    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.frames.ncols()
    }
}

/// Periodic Hann window of length `size`.
pub fn hann_window(size: usize) -> Vec<f64> {
    (0..size)
        .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / size as f64).cos()))
        .collect()
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank, `n_mels x n_freqs`, evaluated on continuous
/// bin center frequencies.
pub fn mel_filterbank(cfg: &MelConfig) -> Array2<f64> {
    let n_freqs = cfg.n_freqs();
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut fb = Array2::zeros((cfg.n_mels, n_freqs));
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * bin_hz;
            let rise = if mid > lo { (f - lo) / (mid - lo) } else { 0.0 };
            let fall = if hi > mid { (hi - f) / (hi - mid) } else { 0.0 };
            let w = rise.min(fall).max(0.0);
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Source index for each padded position under reflect padding (no edge
/// repetition), for a signal of `len` samples padded by `pad_left` and
/// `pad_right`.
pub fn reflect_indices(len: usize, pad_left: usize, pad_right: usize) -> Vec<usize> {
    assert!(len >= 1, "cannot reflect-pad an empty signal");
    if len == 1 {
        return vec![0; 1 + pad_left + pad_right];
    }
    let mut idx = Vec::with_capacity(len + pad_left + pad_right);
    for i in 0..(len + pad_left + pad_right) {
        let mut j = i as i64 - pad_left as i64;
        // Fold back into [0, len) by reflecting at both ends.
        loop {
            if j < 0 {
                j = -j;
            } else if j >= len as i64 {
                j = 2 * (len as i64 - 1) - j;
            } else {
                break;
            }
        }
        idx.push(j as usize);
    }
    idx
}

/// Log-mel spectrogram with reflect-padded centered frames.
///
/// Deterministic for a fixed input and config. Doubling the input
/// amplitude never decreases any output bin.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if w.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "waveform rate {} does not match mel config rate {}",
            w.sample_rate, cfg.sample_rate
        )));
    }
    if w.len() < cfg.win {
        return Err(Error::Audio(format!(
            "waveform of {} samples is shorter than one window ({})",
            w.len(),
            cfg.win
        )));
    }
    let pad_left = cfg.win / 2;
    let pad_right = cfg.win - pad_left;
    let idx = reflect_indices(w.len(), pad_left, pad_right);
    let window = hann_window(cfg.win);
    let fb = mel_filterbank(cfg);
    let n_frames = cfg.n_frames(w.len());
    let n_freqs = cfg.n_freqs();

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(cfg.n_fft);
    let mut frames = Array2::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0f64, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.win {
                Complex::new(w.samples[idx[start + i]] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for m in 0..cfg.n_mels {
            let mut e = 0.0;
            for k in 0..n_freqs {
                e += fb[[m, k]] * buf[k].norm_sqr();
            }
            frames[[t, m]] = e.max(LOG_FLOOR).ln();
        }
    }
    Ok(MelSpectrogram {
        frames,
        hop: cfg.hop,
        sample_rate: cfg.sample_rate,
    })
}

// --- WAV I/O (PCM-16) ---

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn read_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

/// Load a PCM-16 WAV file. Samples are scaled to [-1, 1] by `1/32768`.
/// Multi-channel input is handled per `stereo`. The stored sample rate is
/// preserved; callers resample to the pipeline rate if needed.
pub fn load_wav(path: impl AsRef<Path>, stereo: StereoPolicy) -> Result<Waveform> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 44 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Audio(format!("{}: not a RIFF/WAVE file", path.display())));
    }

    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<(usize, usize)> = None; // (offset, byte len)
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(&bytes, pos + 4) as usize;
        let body = pos + 8;
        if body + size > bytes.len() {
            return Err(Error::Audio(format!(
                "{}: truncated chunk {:?}",
                path.display(),
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Audio(format!("{}: malformed fmt chunk", path.display())));
                }
                fmt = Some((
                    read_u16(&bytes, body),
                    read_u16(&bytes, body + 2),
                    read_u32(&bytes, body + 4),
                    read_u16(&bytes, body + 14),
                ));
            }
            b"data" => data = Some((body, size)),
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }

    let (format, channels, rate, bits) = fmt
        .ok_or_else(|| Error::Audio(format!("{}: missing fmt chunk", path.display())))?;
    let (off, len) =
        data.ok_or_else(|| Error::Audio(format!("{}: missing data chunk", path.display())))?;
    if format != 1 || bits != 16 {
        return Err(Error::Audio(format!(
            "{}: unsupported encoding (format {}, {} bits); only PCM-16 is supported",
            path.display(),
            format,
            bits
        )));
    }
    if channels == 0 {
        return Err(Error::Audio(format!("{}: zero channels", path.display())));
    }
    if channels > 1 && stereo == StereoPolicy::Reject {
        return Err(Error::Audio(format!(
            "{}: {} channels but stereo policy is reject",
            path.display(),
            channels
        )));
    }
    let ch = channels as usize;
    let n_frames = len / (2 * ch);
    if n_frames == 0 {
        return Err(Error::Audio(format!("{}: zero-length audio", path.display())));
    }
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..ch {
            let at = off + 2 * (f * ch + c);
            let v = i16::from_le_bytes([bytes[at], bytes[at + 1]]);
            acc += v as f64 / 32768.0;
        }
        samples.push(acc / ch as f64);
    }
    Ok(Waveform::new(samples, rate))
}

/// Write a waveform as mono PCM-16. Amplitudes are clipped to [-1, 1]
/// before quantization; a save/load round trip changes each sample by at
/// most 1/32768.
pub fn save_wav(w: &Waveform, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if w.is_empty() {
        return Err(Error::Audio("cannot save an empty waveform".into()));
    }
    for (i, &s) in w.samples.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::Audio(format!("non-finite sample at index {i}")));
        }
    }
    let data_len = (w.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + w.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &w.samples {
        let clipped = s.clamp(-1.0, 1.0);
        let q = (clipped * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    let tmp = path.with_extension("wav.tmp");
    std::fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
