//! Network building blocks: linear, 1-D convolutions (plain, gated, and
//! transposed), and multi-head self-attention.
//!
//! Layers register their weights in a [`ParamSet`] at construction and
//! keep only [`ParamId`]s; `forward` takes the tape plus the bound
//! parameter vars, so the same layer object serves training, inference,
//! and finite-difference checking.
//!
//! Convolutions operate on `T x C` matrices (rows = time). Kernels are
//! stored as `(k*Cin) x Cout` matching the column layout of
//! [`Tape::unfold`], so a convolution is unfold + matmul + bias.

use crate::nn::params::{ParamId, ParamSet};
use crate::nn::tape::{PadKind, Tape, Var};
use ndarray::Array2;
use rand::Rng;

/// Uniform init in `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
fn uniform_init<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let s = (1.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.gen::<f64>() * 2.0 - 1.0) * s)
}

/// Affine map `x @ w + b` applied row-wise: `T x In -> T x Out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = params.register(&format!("{name}.w"), uniform_init(rng, d_in, d_out, d_in));
        let b = bias.then(|| params.register(&format!("{name}.b"), Array2::zeros((1, d_out))));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let y = tape.matmul(x, bound[self.w.index()]);
        match self.b {
            Some(b) => tape.add_row(y, bound[b.index()]),
            None => y,
        }
    }
}

/// 1-D convolution over the row (time) axis.
#[derive(Debug, Clone)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub pad: PadKind,
}

impl Conv1d {
    /// Stride-1 convolution with odd kernel and symmetric padding, so the
    /// output has exactly the input's row count.
    pub fn same<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        pad: PadKind,
    ) -> Self {
        assert!(k % 2 == 1, "same-padded conv requires an odd kernel, got {k}");
        Conv1d::with_stride(params, rng, name, c_in, c_out, k, 1, pad)
    }

    /// Strided convolution with symmetric `(k-1)/2` padding; output rows
    /// are `(T + 2*((k-1)/2) - k)/stride + 1`.
    pub fn with_stride<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: PadKind,
    ) -> Self {
        let w = params.register(
            &format!("{name}.w"),
            uniform_init(rng, k * c_in, c_out, k * c_in),
        );
        let b = params.register(&format!("{name}.b"), Array2::zeros((1, c_out)));
        let pad_left = (k - 1) / 2;
        Conv1d {
            w,
            b,
            c_in,
            c_out,
            k,
            stride,
            pad_left,
            pad_right: k - 1 - pad_left,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        assert_eq!(tape.value(x).ncols(), self.c_in, "conv1d: channel mismatch");
        let u = tape.unfold(x, self.k, self.stride, self.pad_left, self.pad_right, self.pad);
        let y = tape.matmul(u, bound[self.w.index()]);
        tape.add_row(y, bound[self.b.index()])
    }
}

/// Transposed 1-D convolution that upsamples rows by exactly `stride`.
///
/// Kernel size is fixed at `2*stride` with effective padding `stride/2`,
/// which makes the output row count exactly `T * stride` — the decoder
/// relies on this to hit a sample count of `frames * hop` with no
/// trimming. Implemented as zero-stuffing followed by a stride-1
/// convolution with compensating asymmetric padding.
#[derive(Debug, Clone)]
pub struct ConvT1d {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl ConvT1d {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        assert!(stride >= 2 && stride % 2 == 0, "upsample stride must be even, got {stride}");
        let k = 2 * stride;
        let w = params.register(
            &format!("{name}.w"),
            uniform_init(rng, k * c_in, c_out, k * c_in),
        );
        let b = params.register(&format!("{name}.b"), Array2::zeros((1, c_out)));
        ConvT1d { w, b, c_in, c_out, stride }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        assert_eq!(tape.value(x).ncols(), self.c_in, "conv_t1d: channel mismatch");
        let s = self.stride;
        let k = 2 * s;
        let p = s / 2;
        let stuffed = tape.zero_stuff(x, s);
        // Padding chosen so the output has exactly T*s rows:
        // ((T-1)*s + 1) + (k-1-p) + (s-1+p) - k + 1 = T*s.
        let u = tape.unfold(stuffed, k, 1, k - 1 - p, s - 1 + p, PadKind::Zero);
        let y = tape.matmul(u, bound[self.w.index()]);
        tape.add_row(y, bound[self.b.index()])
    }
}

/// Residual gated convolution block: `x + a(x) * sigmoid(g(x))` where `a`
/// and `g` are same-padded stride-1 convolutions.
///
/// Replicate padding keeps a constant-in-time input exactly constant in
/// time through the block, so a stationary signal produces a stationary
/// feature map — the speaker embedding downstream is then invariant to
/// duplicating an utterance.
#[derive(Debug, Clone)]
pub struct GatedConvBlock {
    pub conv: Conv1d,
    pub gate: Conv1d,
}

impl GatedConvBlock {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        GatedConvBlock {
            conv: Conv1d::same(
                params,
                rng,
                &format!("{name}.conv"),
                channels,
                channels,
                k,
                PadKind::Replicate,
            ),
            gate: Conv1d::same(
                params,
                rng,
                &format!("{name}.gate"),
                channels,
                channels,
                k,
                PadKind::Replicate,
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let a = self.conv.forward(tape, bound, x);
        let g = self.gate.forward(tape, bound, x);
        let sg = tape.sigmoid(g);
        let gated = tape.mul(a, sg);
        tape.add(x, gated)
    }
}

/// Multi-head self-attention without positional encoding.
///
/// Omitting positions makes the layer permutation-equivariant over
/// frames; combined with mean pooling this yields an utterance embedding
/// that depends on the multiset of frames, not their order — appropriate
/// for a time-invariant speaker summary.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Vec<Linear>,
    pub k: Vec<Linear>,
    pub v: Vec<Linear>,
    pub out: Linear,
    pub d_head: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut ParamSet,
        rng: &mut R,
        name: &str,
        d_model: usize,
        n_heads: usize,
    ) -> Self {
        assert!(n_heads >= 1 && d_model % n_heads == 0, "d_model must divide by n_heads");
        let d_head = d_model / n_heads;
        let mk = |params: &mut ParamSet, rng: &mut R, role: &str, h: usize| {
            Linear::new(params, rng, &format!("{name}.h{h}.{role}"), d_model, d_head, false)
        };
        let q = (0..n_heads).map(|h| mk(params, rng, "q", h)).collect();
        let k = (0..n_heads).map(|h| mk(params, rng, "k", h)).collect();
        let v = (0..n_heads).map(|h| mk(params, rng, "v", h)).collect();
        let out = Linear::new(params, rng, &format!("{name}.out"), d_model, d_model, true);
        MultiHeadAttention { q, k, v, out, d_head }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut heads: Option<Var> = None;
        for h in 0..self.q.len() {
            let q = self.q[h].forward(tape, bound, x);
            let k = self.k[h].forward(tape, bound, x);
            let v = self.v[h].forward(tape, bound, x);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scaled = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scaled);
            let ctx = tape.matmul(attn, v);
            heads = Some(match heads {
                None => ctx,
                Some(prev) => tape.concat_cols(prev, ctx),
            });
        }
        self.out.forward(tape, bound, heads.expect("at least one head"))
    }
}
