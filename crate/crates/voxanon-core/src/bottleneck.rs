//! Residual vector quantization over the speaker-subtracted
//! representation.
//!
//! N cascaded quantizers, each consuming the previous layer's residual:
//! `x_1 = r_1`, `q_i = nearest centroid to x_i`, `x_{i+1} = x_i - q_i`.
//! The first layer is where linguistic content is distilled; the
//! remaining layers carry what the first dropped (prosody/emotion).
//! Training uses a straight-through estimator (forward emits `sum q_i`,
//! backward is the identity into `r_1`) plus a commitment loss pulling
//! each `x_i` toward its chosen centroid, with codebooks themselves
//! learned by exponential moving averages rather than gradients.
//!
//! Layer indices in the public API are 1-based (`VQ-1` is the content
//! layer), matching how probe subsets like "VQ-2:8" are written.

use crate::nn::tape::{Tape, Var};
use crate::{Error, Result};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Codebooks plus EMA learning state for all N layers.
#[derive(Debug, Clone)]
pub struct RvqCodebooks {
    pub n_layers: usize,
    pub codebook_size: usize,
    pub dim: usize,
    /// EMA decay for codebook updates.
    pub decay: f64,
    /// Updates a code may go unassigned before it is reseeded.
    pub reseed_after: u64,
    books: Vec<Array2<f64>>,
    ema_count: Vec<Vec<f64>>,
    ema_sum: Vec<Array2<f64>>,
    unused_steps: Vec<Vec<u64>>,
    initialized: bool,
}

/// One quantization pass: per-layer codes, centroids, and the residual
/// each layer consumed.
#[derive(Debug, Clone)]
pub struct QuantizerState {
    /// `codes[i][t]`: centroid index chosen by layer `i` (0-based) at
    /// frame `t`.
    pub codes: Vec<Vec<usize>>,
    /// `quantized[i]`: `T x d` centroid rows emitted by layer `i`.
    pub quantized: Vec<Array2<f64>>,
    /// `residual_in[i]`: `T x d` input to layer `i` (`x_1 = r_1`,
    /// `x_{i+1} = x_i - q_i` stored exactly as computed).
    pub residual_in: Vec<Array2<f64>>,
}

impl QuantizerState {
    pub fn n_layers(&self) -> usize {
        self.codes.len()
    }

    pub fn n_frames(&self) -> usize {
        self.residual_in.first().map_or(0, |x| x.nrows())
    }

    /// Residual left after the last layer.
    pub fn final_residual(&self) -> Array2<f64> {
        let last = self.n_layers() - 1;
        &self.residual_in[last] - &self.quantized[last]
    }
}

fn nearest_centroid(book: &Array2<f64>, frame: ndarray::ArrayView1<f64>) -> usize {
    let mut best = (0usize, f64::INFINITY);
    for (c, row) in book.rows().into_iter().enumerate() {
        let d: f64 = row.iter().zip(frame.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        // Strict less-than keeps the lowest index on ties.
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

impl RvqCodebooks {
    /// Uninitialized books; `rvq_quantize` refuses to run until
    /// [`RvqCodebooks::init_from_frames`] (or `from_centroids`) fills
    /// them.
    pub fn new(n_layers: usize, codebook_size: usize, dim: usize, decay: f64) -> Self {
        assert!(n_layers >= 2, "need at least two layers (content + residual), got {n_layers}");
        assert!(codebook_size >= 1 && dim >= 1);
        assert!((0.0..1.0).contains(&decay), "decay must be in [0, 1)");
        RvqCodebooks {
            n_layers,
            codebook_size,
            dim,
            decay,
            reseed_after: 20,
            books: vec![Array2::zeros((codebook_size, dim)); n_layers],
            ema_count: vec![vec![0.0; codebook_size]; n_layers],
            ema_sum: vec![Array2::zeros((codebook_size, dim)); n_layers],
            unused_steps: vec![vec![0; codebook_size]; n_layers],
            initialized: false,
        }
    }

    /// Test/checkpoint constructor from explicit centroids.
    pub fn from_centroids(books: Vec<Array2<f64>>, decay: f64) -> Self {
        assert!(books.len() >= 2, "need at least two layers");
        let codebook_size = books[0].nrows();
        let dim = books[0].ncols();
        assert!(books.iter().all(|b| b.dim() == (codebook_size, dim)));
        let ema_count = books.iter().map(|_| vec![1.0; codebook_size]).collect();
        let ema_sum = books.clone();
        RvqCodebooks {
            n_layers: books.len(),
            codebook_size,
            dim,
            decay,
            reseed_after: 20,
            unused_steps: vec![vec![0; codebook_size]; books.len()],
            books,
            ema_count,
            ema_sum,
            initialized: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn book(&self, layer0: usize) -> &Array2<f64> {
        &self.books[layer0]
    }

    /// Sequential data-driven init: layer i's book is sampled from the
    /// residuals left by layers 1..i, so every layer starts inside its
    /// actual input distribution.
    pub fn init_from_frames(&mut self, frames: &Array2<f64>, rng: &mut ChaCha8Rng) -> Result<()> {
        let (m, d) = frames.dim();
        if d != self.dim {
            return Err(Error::Quantizer(format!(
                "init frames have width {d}, books expect {}",
                self.dim
            )));
        }
        if m == 0 {
            return Err(Error::Quantizer("cannot init codebooks from zero frames".into()));
        }
        let mut residual = frames.clone();
        for layer in 0..self.n_layers {
            let c = self.codebook_size;
            let mut book = Array2::zeros((c, d));
            if m >= c {
                // Distinct rows via partial Fisher-Yates.
                let mut idx: Vec<usize> = (0..m).collect();
                for i in 0..c {
                    let j = i + rng.gen_range(0..m - i);
                    idx.swap(i, j);
                }
                for i in 0..c {
                    book.row_mut(i).assign(&residual.row(idx[i]));
                }
            } else {
                // Sample with replacement plus jitter so centroids stay
                // pairwise distinct.
                for i in 0..c {
                    let src = rng.gen_range(0..m);
                    for j in 0..d {
                        book[[i, j]] = residual[[src, j]] + (rng.gen::<f64>() - 0.5) * 1e-4;
                    }
                }
            }
            self.ema_count[layer] = vec![1.0; c];
            self.ema_sum[layer] = book.clone();
            self.books[layer] = book;
            // Advance residuals through the freshly initialized layer.
            for t in 0..m {
                let code = nearest_centroid(&self.books[layer], residual.row(t));
                let centroid = self.books[layer].row(code).to_owned();
                let mut row = residual.row_mut(t);
                row -= &centroid;
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// EMA update from one quantization pass, with dead-code reseeding.
    /// Codes unassigned for `reseed_after` consecutive updates jump to
    /// the frame their layer currently represents worst.
    pub fn update_codebooks(&mut self, st: &QuantizerState, rng: &mut ChaCha8Rng) {
        assert_eq!(st.n_layers(), self.n_layers, "state/books layer mismatch");
        let t_frames = st.n_frames();
        let decay = self.decay;
        for layer in 0..self.n_layers {
            let x = &st.residual_in[layer];
            let mut count = vec![0.0f64; self.codebook_size];
            let mut sum = Array2::<f64>::zeros((self.codebook_size, self.dim));
            for t in 0..t_frames {
                let c = st.codes[layer][t];
                count[c] += 1.0;
                let mut row = sum.row_mut(c);
                row += &x.row(t);
            }
            for c in 0..self.codebook_size {
                self.ema_count[layer][c] = decay * self.ema_count[layer][c] + (1.0 - decay) * count[c];
                let blended = &self.ema_sum[layer].row(c) * decay + &sum.row(c) * (1.0 - decay);
                self.ema_sum[layer].row_mut(c).assign(&blended);
                if count[c] > 0.0 {
                    self.unused_steps[layer][c] = 0;
                } else {
                    self.unused_steps[layer][c] += 1;
                }
                if self.ema_count[layer][c] > 1e-3 {
                    let centroid = &self.ema_sum[layer].row(c) / self.ema_count[layer][c];
                    self.books[layer].row_mut(c).assign(&centroid);
                }
            }
            // Reseed dead codes to the worst-quantized frame.
            for c in 0..self.codebook_size {
                if self.unused_steps[layer][c] >= self.reseed_after {
                    let worst = (0..t_frames)
                        .max_by(|&a, &b| {
                            let qa = st.codes[layer][a];
                            let qb = st.codes[layer][b];
                            let da: f64 = (&x.row(a) - &self.books[layer].row(qa))
                                .iter()
                                .map(|v| v * v)
                                .sum();
                            let db: f64 = (&x.row(b) - &self.books[layer].row(qb))
                                .iter()
                                .map(|v| v * v)
                                .sum();
                            da.partial_cmp(&db).unwrap()
                        })
                        .unwrap_or(0);
                    // Small jitter keeps reseeded centroids distinct even
                    // if several die in the same step.
                    let mut row = x.row(worst).to_owned();
                    for v in row.iter_mut() {
                        *v += (rng.gen::<f64>() - 0.5) * 1e-6;
                    }
                    self.books[layer].row_mut(c).assign(&row);
                    self.ema_sum[layer].row_mut(c).assign(&row);
                    self.ema_count[layer][c] = 1.0;
                    self.unused_steps[layer][c] = 0;
                }
            }
        }
    }

    /// Flat serialization (books + EMA state) for checkpoints.
    pub fn to_serialized(&self) -> SerializedCodebooks {
        SerializedCodebooks {
            n_layers: self.n_layers,
            codebook_size: self.codebook_size,
            dim: self.dim,
            decay: self.decay,
            reseed_after: self.reseed_after,
            books: self.books.iter().map(|b| b.iter().copied().collect()).collect(),
            ema_count: self.ema_count.clone(),
            ema_sum: self.ema_sum.iter().map(|b| b.iter().copied().collect()).collect(),
            unused_steps: self.unused_steps.clone(),
            initialized: self.initialized,
        }
    }

    pub fn from_serialized(s: &SerializedCodebooks) -> Result<Self> {
        let expect = s.codebook_size * s.dim;
        if s.books.len() != s.n_layers
            || s.books.iter().any(|b| b.len() != expect)
            || s.ema_sum.len() != s.n_layers
            || s.ema_sum.iter().any(|b| b.len() != expect)
            || s.ema_count.len() != s.n_layers
            || s.ema_count.iter().any(|c| c.len() != s.codebook_size)
            || s.unused_steps.len() != s.n_layers
        {
            return Err(Error::Checkpoint("malformed codebook serialization".into()));
        }
        let shape = (s.codebook_size, s.dim);
        Ok(RvqCodebooks {
            n_layers: s.n_layers,
            codebook_size: s.codebook_size,
            dim: s.dim,
            decay: s.decay,
            reseed_after: s.reseed_after,
            books: s
                .books
                .iter()
                .map(|b| Array2::from_shape_vec(shape, b.clone()).expect("size checked"))
                .collect(),
            ema_count: s.ema_count.clone(),
            ema_sum: s
                .ema_sum
                .iter()
                .map(|b| Array2::from_shape_vec(shape, b.clone()).expect("size checked"))
                .collect(),
            unused_steps: s.unused_steps.clone(),
            initialized: s.initialized,
        })
    }
}

/// Checkpoint-friendly mirror of [`RvqCodebooks`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SerializedCodebooks {
    pub n_layers: usize,
    pub codebook_size: usize,
    pub dim: usize,
    pub decay: f64,
    pub reseed_after: u64,
    pub books: Vec<Vec<f64>>,
    pub ema_count: Vec<Vec<f64>>,
    pub ema_sum: Vec<Vec<f64>>,
    pub unused_steps: Vec<Vec<u64>>,
    pub initialized: bool,
}

/// Cascaded nearest-centroid quantization of `r1` (`T x d`).
pub fn rvq_quantize(r1: &Array2<f64>, books: &RvqCodebooks) -> Result<QuantizerState> {
    if !books.is_initialized() {
        return Err(Error::Quantizer("codebooks are uninitialized".into()));
    }
    let (t_frames, d) = r1.dim();
    if d != books.dim {
        return Err(Error::Quantizer(format!(
            "input width {d} does not match codebook width {}",
            books.dim
        )));
    }
    if t_frames == 0 {
        return Err(Error::Quantizer("cannot quantize zero frames".into()));
    }
    let mut codes = Vec::with_capacity(books.n_layers);
    let mut quantized = Vec::with_capacity(books.n_layers);
    let mut residual_in = Vec::with_capacity(books.n_layers);
    let mut x = r1.clone();
    for layer in 0..books.n_layers {
        let book = &books.books[layer];
        let mut layer_codes = Vec::with_capacity(t_frames);
        let mut q = Array2::zeros((t_frames, d));
        for t in 0..t_frames {
            let c = nearest_centroid(book, x.row(t));
            layer_codes.push(c);
            q.row_mut(t).assign(&book.row(c));
        }
        residual_in.push(x.clone());
        let next = &x - &q;
        codes.push(layer_codes);
        quantized.push(q);
        x = next;
    }
    Ok(QuantizerState { codes, quantized, residual_in })
}

/// Sum of `q_i` over a 1-based layer subset (e.g. `&[1]` for the content
/// layer, `&(2..=8)` collected for the residual stack).
///
/// Summation runs in descending layer order, so splitting off layer 1
/// (`{1}` + `{2..N}`) re-associates to bit-identical results with the
/// full reconstruction — the exact split the probes use.
pub fn reconstruct_layers(st: &QuantizerState, layers: &[usize]) -> Result<Array2<f64>> {
    if layers.is_empty() {
        return Err(Error::Quantizer("empty layer subset".into()));
    }
    let n = st.n_layers();
    let mut sorted: Vec<usize> = layers.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != layers.len() {
        return Err(Error::Quantizer("duplicate layer in subset".into()));
    }
    if sorted[0] < 1 || *sorted.last().unwrap() > n {
        return Err(Error::Quantizer(format!(
            "layer subset {layers:?} out of range 1..={n}"
        )));
    }
    let (t, d) = st.quantized[0].dim();
    let mut out = Array2::zeros((t, d));
    for &layer in sorted.iter().rev() {
        out += &st.quantized[layer - 1];
    }
    Ok(out)
}

/// Eq.-5-style commitment: `sum_i mean_t ||x_i[t] - q_i[t]||^2` as a
/// plain value.
pub fn commitment_loss_value(st: &QuantizerState) -> f64 {
    let t = st.n_frames() as f64;
    let mut total = 0.0;
    for layer in 0..st.n_layers() {
        let diff = &st.residual_in[layer] - &st.quantized[layer];
        total += diff.iter().map(|v| v * v).sum::<f64>() / t;
    }
    total
}

/// Commitment loss on the tape: rebuilds the residual chain from the
/// differentiable `r1` with each `q_i` held constant, so gradients flow
/// into the encoder only.
pub fn commitment_loss(tape: &mut Tape, r1: Var, st: &QuantizerState) -> Var {
    let t = st.n_frames() as f64;
    let mut x = r1;
    let mut acc: Option<Var> = None;
    for layer in 0..st.n_layers() {
        let q = tape.constant(st.quantized[layer].clone());
        let diff = tape.sub(x, q);
        let sq = tape.mul(diff, diff);
        let sum = tape.sum_all(sq);
        let term = tape.scale(sum, 1.0 / t);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
        x = diff;
    }
    acc.expect("at least one layer")
}

/// Training-path output: forward value is the full reconstruction
/// `sum_i q_i`, backward gradient passes through to `r1` unchanged.
pub fn straight_through(tape: &mut Tape, r1: Var, st: &QuantizerState) -> Var {
    let recon = reconstruct_layers(st, &(1..=st.n_layers()).collect::<Vec<_>>())
        .expect("full subset is always valid");
    let q = tape.constant(recon);
    tape.straight_through(r1, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn hand_books() -> RvqCodebooks {
        RvqCodebooks::from_centroids(
            vec![
                array![[0.0, 0.0], [1.0, 1.0]],
                array![[0.0, 0.0], [0.5, 0.5]],
            ],
            0.99,
        )
    }

    /// Independent nearest-neighbor oracle: exhaustive scan.
    fn oracle_nearest(book: &Array2<f64>, frame: &[f64]) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for c in 0..book.nrows() {
            let d: f64 = (0..book.ncols())
                .map(|j| (book[[c, j]] - frame[j]).powi(2))
                .sum();
            if d < best.1 || (d == best.1 && c < best.0) {
                best = (c, d);
            }
        }
        best.0
    }

    #[test]
    fn two_layer_hand_example() {
        let books = hand_books();
        let r1 = array![[1.4, 1.4]];
        let st = rvq_quantize(&r1, &books).unwrap();
        assert_eq!(st.codes, vec![vec![1], vec![1]]);
        assert_eq!(st.quantized[0], array![[1.0, 1.0]]);
        assert_eq!(st.quantized[1], array![[0.5, 0.5]]);
        let recon = reconstruct_layers(&st, &[1, 2]).unwrap();
        assert_eq!(recon, array![[1.5, 1.5]]);
        // Layer-1-only reconstruction.
        assert_eq!(reconstruct_layers(&st, &[1]).unwrap(), array![[1.0, 1.0]]);
        // Commitment: ||(0.4,0.4)||^2 + ||(-0.1,-0.1)||^2 = 0.32 + 0.02.
        assert!((commitment_loss_value(&st) - 0.34).abs() < 1e-12);
        // Oracle agreement layer by layer.
        assert_eq!(oracle_nearest(books.book(0), &[1.4, 1.4]), 1);
        assert_eq!(oracle_nearest(books.book(1), &[0.4, 0.4]), 1);
    }

    #[test]
    fn centroid_input_with_zero_second_layer_is_lossless() {
        let books = hand_books(); // layer 2 contains (0, 0)
        let r1 = array![[1.0, 1.0]]; // exactly a layer-1 centroid
        let st = rvq_quantize(&r1, &books).unwrap();
        assert_eq!(st.codes[0], vec![1]);
        assert_eq!(st.codes[1], vec![0]); // zero vector
        assert_eq!(st.final_residual(), array![[0.0, 0.0]]);
        assert_eq!(commitment_loss_value(&st), 0.0);
        assert_eq!(reconstruct_layers(&st, &[1, 2]).unwrap(), r1);
    }

    #[test]
    fn extra_layer_with_zero_code_never_hurts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let r1 = Array2::from_shape_fn((5, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
            let book1 = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
            let book2 = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
            let mut book3 = Array2::from_shape_fn((4, 3), |_| rng.gen::<f64>() * 2.0 - 1.0);
            book3.row_mut(0).fill(0.0); // zero vector available
            let two = RvqCodebooks::from_centroids(vec![book1.clone(), book2.clone()], 0.99);
            let three = RvqCodebooks::from_centroids(vec![book1, book2, book3], 0.99);
            let err2: f64 = rvq_quantize(&r1, &two)
                .unwrap()
                .final_residual()
                .iter()
                .map(|v| v * v)
                .sum();
            let err3: f64 = rvq_quantize(&r1, &three)
                .unwrap()
                .final_residual()
                .iter()
                .map(|v| v * v)
                .sum();
            assert!(err3 <= err2 + 1e-12, "trial {trial}: {err3} > {err2}");
        }
    }

    #[test]
    fn uninitialized_books_are_rejected() {
        let books = RvqCodebooks::new(2, 4, 3, 0.99);
        let r1 = Array2::zeros((2, 3));
        assert!(rvq_quantize(&r1, &books).is_err());
    }

    #[test]
    fn width_mismatch_and_bad_subsets_are_rejected() {
        let books = hand_books();
        assert!(rvq_quantize(&Array2::zeros((2, 3)), &books).is_err());
        let st = rvq_quantize(&array![[0.2, 0.2]], &books).unwrap();
        assert!(reconstruct_layers(&st, &[]).is_err());
        assert!(reconstruct_layers(&st, &[0]).is_err());
        assert!(reconstruct_layers(&st, &[3]).is_err());
        assert!(reconstruct_layers(&st, &[1, 1]).is_err());
    }

    #[test]
    fn content_plus_residual_split_is_bit_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let books = RvqCodebooks::from_centroids(
            (0..4)
                .map(|_| Array2::from_shape_fn((6, 4), |_| rng.gen::<f64>() * 2.0 - 1.0))
                .collect(),
            0.99,
        );
        let r1 = Array2::from_shape_fn((7, 4), |_| rng.gen::<f64>() * 3.0 - 1.5);
        let st = rvq_quantize(&r1, &books).unwrap();
        let full = reconstruct_layers(&st, &[1, 2, 3, 4]).unwrap();
        let content = reconstruct_layers(&st, &[1]).unwrap();
        let rest = reconstruct_layers(&st, &[2, 3, 4]).unwrap();
        // Descending-order summation makes this particular split exact.
        assert_eq!(full, content + rest);
    }

    #[test]
    fn straight_through_forward_and_gradient() {
        let books = hand_books();
        let r1_val = array![[1.4, 1.4], [0.3, 0.1]];
        let st = rvq_quantize(&r1_val, &books).unwrap();

        let mut tape = Tape::new();
        let r1 = tape.leaf(r1_val.clone());
        let out = straight_through(&mut tape, r1, &st);
        // Forward equals the full reconstruction.
        let recon = reconstruct_layers(&st, &[1, 2]).unwrap();
        assert_eq!(tape.value(out), &recon);

        // Backward: gradient of any downstream loss w.r.t. r1 equals the
        // gradient with quantization replaced by identity.
        let w = tape.constant(array![[2.0, -1.0], [0.5, 3.0]]);
        let m = tape.mul(out, w);
        let loss = tape.sum_all(m);
        tape.backward(loss);
        assert_eq!(tape.grad(r1).unwrap(), &array![[2.0, -1.0], [0.5, 3.0]]);
    }

    #[test]
    fn straight_through_matches_identity_path_finite_difference() {
        // The estimator's contract: d(loss)/d(r1) equals the gradient of
        // the loss with quantization replaced by the identity map that
        // lands at the same output point (forward itself is piecewise
        // constant, so FD runs on that identity-path surrogate).
        let books = hand_books();
        let r1_val = array![[1.4, 1.4], [0.3, 0.1]];
        let st = rvq_quantize(&r1_val, &books).unwrap();
        let recon = reconstruct_layers(&st, &[1, 2]).unwrap();
        let offset = &recon - &r1_val;

        // Analytic gradient through the straight-through node, with a
        // nonlinear downstream loss sum(out^2).
        let mut tape = Tape::new();
        let leaf = tape.leaf(r1_val.clone());
        let out = straight_through(&mut tape, leaf, &st);
        let sq = tape.mul(out, out);
        let s = tape.sum_all(sq);
        tape.backward(s);
        let g = tape.grad(leaf).unwrap().clone();

        // Identity-path surrogate: out = r + (recon - r0).
        let eval = |r: &Array2<f64>| -> f64 {
            let shifted = r + &offset;
            shifted.iter().map(|v| v * v).sum()
        };
        for r in 0..2 {
            for c in 0..2 {
                let h = 1e-5;
                let mut hi = r1_val.clone();
                hi[[r, c]] += h;
                let mut lo = r1_val.clone();
                lo[[r, c]] -= h;
                let numeric = (eval(&hi) - eval(&lo)) / (2.0 * h);
                let analytic = g[[r, c]];
                let rel =
                    (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-12);
                assert!(rel < 1e-3, "({r},{c}): analytic {analytic}, numeric {numeric}");
            }
        }
    }

    #[test]
    fn commitment_loss_tape_matches_value_and_reaches_encoder() {
        let books = hand_books();
        let r1_val = array![[1.4, 1.4], [0.2, 0.6]];
        let st = rvq_quantize(&r1_val, &books).unwrap();

        let mut tape = Tape::new();
        let r1 = tape.leaf(r1_val.clone());
        let loss = commitment_loss(&mut tape, r1, &st);
        assert!((tape.value(loss)[[0, 0]] - commitment_loss_value(&st)).abs() < 1e-12);
        tape.backward(loss);
        let g = tape.grad(r1).unwrap();
        // d/dx_1 of sum_i mean_t ||x_i - q_i||^2 with fixed q:
        // every layer's residual difference contributes 2*(x_i - q_i)/T.
        let t = st.n_frames() as f64;
        let expect = (&st.residual_in[0] - &st.quantized[0]) * (2.0 / t)
            + (&st.residual_in[1] - &st.quantized[1]) * (2.0 / t);
        for (a, b) in g.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_with_zero_decay_jumps_to_assigned_mean() {
        let mut books = RvqCodebooks::from_centroids(
            vec![
                array![[0.0, 0.0], [10.0, 10.0]],
                array![[0.0, 0.0], [99.0, 99.0]],
            ],
            0.0,
        );
        // Both frames pick code 0 on layer 1.
        let r1 = array![[1.0, 0.0], [3.0, 0.0]];
        let st = rvq_quantize(&r1, &books).unwrap();
        assert_eq!(st.codes[0], vec![0, 0]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        books.update_codebooks(&st, &mut rng);
        // decay = 0: centroid equals the mean of currently assigned rows.
        assert_eq!(books.book(0).row(0).to_vec(), vec![2.0, 0.0]);
        // Unassigned code mass decays to zero and the centroid freezes
        // (count falls below the update threshold).
        assert_eq!(books.book(0).row(1).to_vec(), vec![10.0, 10.0]);
    }

    #[test]
    fn dead_codes_get_reseeded_after_the_configured_window() {
        let mut books = RvqCodebooks::from_centroids(
            vec![
                array![[0.0, 0.0], [1000.0, 1000.0]],
                array![[0.0, 0.0], [2000.0, 2000.0]],
            ],
            0.9,
        );
        books.reseed_after = 3;
        let r1 = array![[1.0, 1.0], [1.2, 0.8]];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for step in 0..3 {
            let st = rvq_quantize(&r1, &books).unwrap();
            assert!(st.codes[0].iter().all(|&c| c == 0), "far code chosen at step {step}");
            books.update_codebooks(&st, &mut rng);
            if step < 2 {
                assert!(books.book(0)[[1, 0]] > 100.0, "reseeded too early at step {step}");
            }
        }
        // The third unassigned update trips the policy: the dead centroid
        // now sits near the data and wins assignments again.
        assert!(books.book(0)[[1, 0]] < 10.0, "dead code was not reseeded");
        let st = rvq_quantize(&r1, &books).unwrap();
        assert!(st.codes[0].iter().any(|&c| c == 1), "reseeded code still unused");
    }

    #[test]
    fn repeated_updates_shrink_quantization_error() {
        let mut rng_data = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // Stationary input distribution: a fixed batch. Layer updates
        // shift the next layer's input distribution, so the trend is
        // checked on block averages rather than per step.
        let frames = Array2::from_shape_fn((64, 4), |_| rng_data.gen::<f64>() * 2.0 - 1.0);
        let mut books = RvqCodebooks::new(2, 8, 4, 0.99);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        books.init_from_frames(&frames, &mut rng).unwrap();
        let mut errs = Vec::new();
        for _ in 0..100 {
            let st = rvq_quantize(&frames, &books).unwrap();
            errs.push(st.final_residual().iter().map(|v| v * v).sum::<f64>());
            books.update_codebooks(&st, &mut rng);
        }
        let block_means: Vec<f64> = errs
            .chunks(10)
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect();
        for w in block_means.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trend increased: {block_means:?}");
        }
        assert!(
            *errs.last().unwrap() < errs[0] * 0.95,
            "no material improvement over 100 updates: first {} last {}",
            errs[0],
            errs.last().unwrap()
        );
    }

    #[test]
    fn serialization_round_trip() {
        let mut books = RvqCodebooks::new(3, 5, 2, 0.99);
        let frames = Array2::from_shape_fn((20, 2), |(i, j)| (i * 2 + j) as f64 * 0.1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        books.init_from_frames(&frames, &mut rng).unwrap();
        let warm = rvq_quantize(&frames, &books).unwrap();
        books.update_codebooks(&warm, &mut rng);

        let ser = books.to_serialized();
        let json = serde_json::to_string(&ser).unwrap();
        let back: SerializedCodebooks = serde_json::from_str(&json).unwrap();
        let restored = RvqCodebooks::from_serialized(&back).unwrap();
        let st = rvq_quantize(&frames, &books).unwrap();
        let st2 = rvq_quantize(&frames, &restored).unwrap();
        assert_eq!(st.codes, st2.codes);
        for l in 0..3 {
            assert_eq!(books.book(l), restored.book(l));
        }
    }

    proptest! {
        #[test]
        fn telescoping_and_code_range(seed in 0u64..200) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n_layers = 2 + (seed as usize % 3);
            let c = 3 + (seed as usize % 4);
            let books = RvqCodebooks::from_centroids(
                (0..n_layers)
                    .map(|_| Array2::from_shape_fn((c, 3), |_| rng.gen::<f64>() * 2.0 - 1.0))
                    .collect(),
                0.99,
            );
            let r1 = Array2::from_shape_fn((6, 3), |_| rng.gen::<f64>() * 4.0 - 2.0);
            let st = rvq_quantize(&r1, &books).unwrap();
            prop_assert_eq!(&st.residual_in[0], &r1);
            for i in 0..n_layers {
                // Codes in range.
                prop_assert!(st.codes[i].iter().all(|&code| code < c));
                // Telescoping, exactly as stored.
                if i + 1 < n_layers {
                    let recomputed = &st.residual_in[i] - &st.quantized[i];
                    prop_assert_eq!(&recomputed, &st.residual_in[i + 1]);
                }
            }
            // Note: error is only guaranteed non-increasing in layer count
            // when the next book can represent zero; that conditioned
            // claim is covered by `extra_layer_with_zero_code_never_hurts`.
        }

        #[test]
        fn quantizing_book_rows_is_lossless_at_layer_one(seed in 0u64..50) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let book1 = Array2::from_shape_fn((5, 2), |_| rng.gen::<f64>() * 4.0 - 2.0);
            let mut book2 = Array2::from_shape_fn((5, 2), |_| rng.gen::<f64>() * 2.0 - 1.0);
            book2.row_mut(0).fill(0.0);
            let books = RvqCodebooks::from_centroids(vec![book1.clone(), book2], 0.99);
            let st = rvq_quantize(&book1, &books).unwrap();
            // Every row quantizes to itself at layer 1 (distance 0).
            for (t, &code) in st.codes[0].iter().enumerate() {
                prop_assert_eq!(book1.row(t).to_vec(), books.book(0).row(code).to_vec());
            }
            prop_assert_eq!(st.codes[1].clone(), vec![0; 5]);
        }
    }
}
