//! Reverse-mode autodiff tape.
//!
//! A [`Tape`] records a DAG of matrix operations as they execute. Every
//! node holds its forward value; [`Tape::backward`] walks the recording in
//! reverse and accumulates gradients. Matrices are `T x C` with rows as
//! the time axis, scalars are `1 x 1`, and vectors are `1 x C` rows.
//!
//! Two deliberately non-standard gradients live here:
//! - [`Tape::straight_through`]: forward emits the quantized value,
//!   backward passes the incoming gradient unchanged to the
//!   pre-quantization input.
//! - [`Tape::grl`]: forward is the identity, backward multiplies the
//!   incoming gradient by `-lambda`.

use ndarray::{s, Array2};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Padding semantics for [`Tape::unfold`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    /// Out-of-range positions read as zero.
    Zero,
    /// Out-of-range positions clamp to the nearest edge row.
    Replicate,
    /// Out-of-range positions mirror around the edges (no edge repeat).
    Reflect,
}

/// Maps a padded row position to a source row, or `None` for zero fill.
fn pad_source(pos: i64, len: usize, pad: PadKind) -> Option<usize> {
    let n = len as i64;
    if pos >= 0 && pos < n {
        return Some(pos as usize);
    }
    match pad {
        PadKind::Zero => None,
        PadKind::Replicate => Some(pos.clamp(0, n - 1) as usize),
        PadKind::Reflect => {
            if len == 1 {
                return Some(0);
            }
            let mut j = pos;
            loop {
                if j < 0 {
                    j = -j;
                } else if j >= n {
                    j = 2 * (n - 1) - j;
                } else {
                    return Some(j as usize);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    ConcatCols(usize, usize),
    BroadcastRow(usize),
    MeanRows(usize),
    SumAll(usize),
    MeanAll(usize),
    Abs(usize),
    SqrtEps(usize),
    LogFloor(usize, f64),
    Gelu(usize),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, f64),
    Grl(usize, f64),
    StraightThrough { input: usize },
    SoftmaxRows(usize),
    CeRows { logits: usize, targets: Vec<usize> },
    KlRows { teacher: usize, student: usize, tau: f64 },
    Unfold { input: usize, k: usize, stride: usize, pad_left: usize, pad: PadKind },
    ZeroStuff { input: usize, stride: usize },
    AvgPoolRows { input: usize, factor: usize },
    SliceRows { input: usize, start: usize },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Growable recording of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Array2<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, x: Var) -> bool {
        self.nodes[x.0].requires_grad
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input node; backward never propagates into it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Const, false)
    }

    /// 1x1 constant.
    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, x: Var) -> &Array2<f64> {
        &self.nodes[x.0].value
    }

    /// Gradient of the last `backward` target with respect to `x`, if any
    /// reached it.
    pub fn grad(&self, x: Var) -> Option<&Array2<f64>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    // --- arithmetic ---

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a.0, b.0), rg)
    }

    /// Elementwise product (same shape).
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a.0, c), rg)
    }

    /// `a + b` where `b` is a `1 x C` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!((rb, cb), (1, ca), "add_row: expected 1x{ca}, got {rb}x{cb}");
        let v = self.value(a) + &self.value(b).row(0);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::AddRow(a.0, b.0), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, ka) = self.value(a).dim();
        let (kb, _) = self.value(b).dim();
        assert_eq!(ka, kb, "matmul: inner dims {ka} vs {kb}");
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a.0, b.0), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Transpose(a.0), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.value(a).dim();
        let (rb, cb) = self.value(b).dim();
        assert_eq!(ra, rb, "concat_cols: row mismatch {ra} vs {rb}");
        let mut v = Array2::zeros((ra, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(self.value(a));
        v.slice_mut(s![.., ca..]).assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::ConcatCols(a.0, b.0), rg)
    }

    /// Repeat a `1 x C` row `rows` times into a `rows x C` matrix.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let (ra, ca) = self.value(a).dim();
        assert_eq!(ra, 1, "broadcast_row: expected a 1-row input, got {ra}");
        let row = self.value(a).row(0).to_owned();
        let v = Array2::from_shape_fn((rows, ca), |(_, j)| row[j]);
        let rg = self.rg(a);
        self.push(v, Op::BroadcastRow(a.0), rg)
    }

    /// Mean over rows: `T x C -> 1 x C`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dim();
        assert!(r > 0, "mean_rows: empty input");
        let mut v = Array2::zeros((1, c));
        for j in 0..c {
            v[[0, j]] = self.value(a).column(j).sum() / r as f64;
        }
        let rg = self.rg(a);
        self.push(v, Op::MeanRows(a.0), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a.0), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean_all: empty input");
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n as f64);
        let rg = self.rg(a);
        self.push(v, Op::MeanAll(a.0), rg)
    }

    // --- elementwise nonlinearities ---

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a.0), rg)
    }

    /// Elementwise `sqrt(x + eps)`; `eps > 0` keeps the gradient finite at
    /// zero.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "sqrt_eps: eps must be positive");
        let v = self.value(a).mapv(|x| (x + eps).sqrt());
        let rg = self.rg(a);
        self.push(v, Op::SqrtEps(a.0), rg)
    }

    /// Elementwise `ln(max(x, floor))`; gradient is zero where the floor
    /// is active.
    pub fn log_floor(&mut self, a: Var, floor: f64) -> Var {
        assert!(floor > 0.0, "log_floor: floor must be positive");
        let v = self.value(a).mapv(|x| x.max(floor).ln());
        let rg = self.rg(a);
        self.push(v, Op::LogFloor(a.0, floor), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu_fwd);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a.0), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a.0, slope), rg)
    }

    // --- special gradient semantics ---

    /// Gradient reversal: forward identity, backward scales the incoming
    /// gradient by `-lambda`.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Var {
        let v = self.value(a).clone();
        let rg = self.rg(a);
        self.push(v, Op::Grl(a.0, lambda), rg)
    }

    /// Straight-through estimator: forward emits `quantized`'s value,
    /// backward passes the gradient unchanged into `input`. Nothing flows
    /// into `quantized`.
    pub fn straight_through(&mut self, input: Var, quantized: Var) -> Var {
        assert_eq!(
            self.value(input).dim(),
            self.value(quantized).dim(),
            "straight_through: shape mismatch"
        );
        let v = self.value(quantized).clone();
        let rg = self.rg(input);
        self.push(v, Op::StraightThrough { input: input.0 }, rg)
    }

    // --- softmax-family ---

    /// Row-wise softmax (stable).
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows_value(self.value(a));
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a.0), rg)
    }

    /// Mean cross-entropy over rows against integer targets: for logits
    /// `T x C` and `targets.len() == T`, the value is
    /// `mean_t (logsumexp(logits_t) - logits_t[target_t])`.
    pub fn ce_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (t, c) = self.value(logits).dim();
        assert_eq!(targets.len(), t, "ce_rows: {} targets for {t} rows", targets.len());
        assert!(targets.iter().all(|&y| y < c), "ce_rows: target out of range");
        let mut total = 0.0;
        for (row, &y) in self.value(logits).rows().into_iter().zip(targets) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Array2::from_elem((1, 1), total / t as f64);
        let rg = self.rg(logits);
        self.push(v, Op::CeRows { logits: logits.0, targets: targets.to_vec() }, rg)
    }

    /// Mean row-wise KL divergence between tempered softmaxes:
    /// `mean_t KL(softmax(teacher_t / tau) || softmax(student_t / tau))`.
    pub fn kl_rows(&mut self, teacher: Var, student: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "kl_rows: tau must be positive");
        assert_eq!(
            self.value(teacher).dim(),
            self.value(student).dim(),
            "kl_rows: shape mismatch"
        );
        let t = self.value(teacher).nrows();
        assert!(t > 0, "kl_rows: empty input");
        let lp = log_softmax_rows_value(&(self.value(teacher) / tau));
        let lq = log_softmax_rows_value(&(self.value(student) / tau));
        let mut total = 0.0;
        for i in 0..t {
            for j in 0..lp.ncols() {
                total += lp[[i, j]].exp() * (lp[[i, j]] - lq[[i, j]]);
            }
        }
        let v = Array2::from_elem((1, 1), total / t as f64);
        let rg = self.rg(teacher) || self.rg(student);
        self.push(v, Op::KlRows { teacher: teacher.0, student: student.0, tau }, rg)
    }

    // --- structural ops ---

    /// Sliding-window extraction along rows: input `N x C` becomes
    /// `T x (k*C)` where `T = (N + pad_left + pad_right - k) / stride + 1`
    /// and output column `j*C + c` holds channel `c` at window offset `j`.
    pub fn unfold(
        &mut self,
        a: Var,
        k: usize,
        stride: usize,
        pad_left: usize,
        pad_right: usize,
        pad: PadKind,
    ) -> Var {
        let (n, c) = self.value(a).dim();
        assert!(k >= 1 && stride >= 1, "unfold: k and stride must be >= 1");
        let padded = n + pad_left + pad_right;
        assert!(padded >= k, "unfold: padded length {padded} shorter than window {k}");
        let t_out = (padded - k) / stride + 1;
        let mut v = Array2::zeros((t_out, k * c));
        for t in 0..t_out {
            for j in 0..k {
                let pos = (t * stride + j) as i64 - pad_left as i64;
                if let Some(src) = pad_source(pos, n, pad) {
                    for ch in 0..c {
                        v[[t, j * c + ch]] = self.value(a)[[src, ch]];
                    }
                }
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::Unfold { input: a.0, k, stride, pad_left, pad }, rg)
    }

    /// Insert `stride - 1` zero rows between consecutive rows:
    /// `T x C -> ((T-1)*stride + 1) x C`. Used to express transposed
    /// convolution as zero-stuffing followed by an ordinary convolution.
    pub fn zero_stuff(&mut self, a: Var, stride: usize) -> Var {
        assert!(stride >= 1, "zero_stuff: stride must be >= 1");
        let (t, c) = self.value(a).dim();
        assert!(t > 0, "zero_stuff: empty input");
        let mut v = Array2::zeros(((t - 1) * stride + 1, c));
        for i in 0..t {
            for ch in 0..c {
                v[[i * stride, ch]] = self.value(a)[[i, ch]];
            }
        }
        let rg = self.rg(a);
        self.push(v, Op::ZeroStuff { input: a.0, stride }, rg)
    }

    /// Non-overlapping mean over groups of `factor` rows; trailing rows
    /// that do not fill a group are dropped.
    pub fn avg_pool_rows(&mut self, a: Var, factor: usize) -> Var {
        assert!(factor >= 1, "avg_pool_rows: factor must be >= 1");
        let (t, c) = self.value(a).dim();
        let t_out = t / factor;
        assert!(t_out > 0, "avg_pool_rows: input of {t} rows too short for factor {factor}");
        let mut v = Array2::zeros((t_out, c));
        for i in 0..t_out {
            for j in 0..factor {
                for ch in 0..c {
                    v[[i, ch]] += self.value(a)[[i * factor + j, ch]];
                }
            }
        }
        v /= factor as f64;
        let rg = self.rg(a);
        self.push(v, Op::AvgPoolRows { input: a.0, factor }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (t, _) = self.value(a).dim();
        assert!(start + len <= t, "slice_rows: {start}+{len} out of {t} rows");
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceRows { input: a.0, start }, rg)
    }

    // --- backward ---

    /// Backpropagate from a `1 x 1` loss node. Gradients from any earlier
    /// `backward` call are discarded.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward: loss must be 1x1");
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    fn acc(&mut self, parent: usize, delta: Array2<f64>) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        match &mut self.grads[parent] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &Array2<f64>) {
        // Clone the op descriptor so `self` stays free for `acc` calls.
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(a, g.clone());
                self.acc(b, -g);
            }
            Op::Mul(a, b) => {
                let da = g * &self.nodes[b].value;
                let db = g * &self.nodes[a].value;
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Scale(a, c) => self.acc(a, g * c),
            Op::AddRow(a, b) => {
                self.acc(a, g.clone());
                let mut db = Array2::zeros((1, g.ncols()));
                for j in 0..g.ncols() {
                    db[[0, j]] = g.column(j).sum();
                }
                self.acc(b, db);
            }
            Op::MatMul(a, b) => {
                let da = g.dot(&self.nodes[b].value.t());
                let db = self.nodes[a].value.t().dot(g);
                self.acc(a, da);
                self.acc(b, db);
            }
            Op::Transpose(a) => self.acc(a, g.t().to_owned()),
            Op::ConcatCols(a, b) => {
                let ca = self.nodes[a].value.ncols();
                self.acc(a, g.slice(s![.., ..ca]).to_owned());
                self.acc(b, g.slice(s![.., ca..]).to_owned());
            }
            Op::BroadcastRow(a) => {
                let mut da = Array2::zeros((1, g.ncols()));
                for j in 0..g.ncols() {
                    da[[0, j]] = g.column(j).sum();
                }
                self.acc(a, da);
            }
            Op::MeanRows(a) => {
                let t = self.nodes[a].value.nrows();
                let row = g.row(0).to_owned();
                let da = Array2::from_shape_fn((t, g.ncols()), |(_, j)| row[j] / t as f64);
                self.acc(a, da);
            }
            Op::SumAll(a) => {
                let da = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]]);
                self.acc(a, da);
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len() as f64;
                let da = Array2::from_elem(self.nodes[a].value.dim(), g[[0, 0]] / n);
                self.acc(a, da);
            }
            Op::Abs(a) => {
                let da = g * &self.nodes[a].value.mapv(|x| {
                    if x > 0.0 {
                        1.0
                    } else if x < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                self.acc(a, da);
            }
            Op::SqrtEps(a) => {
                // value = sqrt(x + eps) -> d/dx = 0.5 / value.
                let da = g * &self.nodes[i].value.mapv(|v| 0.5 / v);
                self.acc(a, da);
            }
            Op::LogFloor(a, floor) => {
                let da = g * &self.nodes[a].value.mapv(|x| if x > floor { 1.0 / x } else { 0.0 });
                self.acc(a, da);
            }
            Op::Gelu(a) => {
                let da = g * &self.nodes[a].value.mapv(gelu_bwd);
                self.acc(a, da);
            }
            Op::Tanh(a) => {
                let da = g * &self.nodes[i].value.mapv(|v| 1.0 - v * v);
                self.acc(a, da);
            }
            Op::Sigmoid(a) => {
                let da = g * &self.nodes[i].value.mapv(|v| v * (1.0 - v));
                self.acc(a, da);
            }
            Op::LeakyRelu(a, slope) => {
                let da = g * &self.nodes[a].value.mapv(|x| if x > 0.0 { 1.0 } else { slope });
                self.acc(a, da);
            }
            Op::Grl(a, lambda) => self.acc(a, g * (-lambda)),
            Op::StraightThrough { input } => self.acc(input, g.clone()),
            Op::SoftmaxRows(a) => {
                let sm = &self.nodes[i].value;
                let mut da = Array2::zeros(sm.dim());
                for r in 0..sm.nrows() {
                    let dot: f64 = (0..sm.ncols()).map(|j| g[[r, j]] * sm[[r, j]]).sum();
                    for j in 0..sm.ncols() {
                        da[[r, j]] = sm[[r, j]] * (g[[r, j]] - dot);
                    }
                }
                self.acc(a, da);
            }
            Op::CeRows { logits, targets } => {
                let up = g[[0, 0]];
                let sm = softmax_rows_value(&self.nodes[logits].value);
                let t = sm.nrows() as f64;
                let mut da = sm;
                for (r, &y) in targets.iter().enumerate() {
                    da[[r, y]] -= 1.0;
                }
                da *= up / t;
                self.acc(logits, da);
            }
            Op::KlRows { teacher, student, tau } => {
                let up = g[[0, 0]];
                let lp = log_softmax_rows_value(&(&self.nodes[teacher].value / tau));
                let lq = log_softmax_rows_value(&(&self.nodes[student].value / tau));
                let t = lp.nrows();
                let c = lp.ncols();
                let scale = up / (t as f64 * tau);
                if self.nodes[student].requires_grad {
                    // d/ds KL = (q - p) / (T * tau) per row.
                    let mut ds = Array2::zeros((t, c));
                    for r in 0..t {
                        for j in 0..c {
                            ds[[r, j]] = (lq[[r, j]].exp() - lp[[r, j]].exp()) * scale;
                        }
                    }
                    self.acc(student, ds);
                }
                if self.nodes[teacher].requires_grad {
                    // d/dt KL = p * ((ln p - ln q) - KL_row) / (T * tau).
                    let mut dt = Array2::zeros((t, c));
                    for r in 0..t {
                        let klr: f64 = (0..c)
                            .map(|j| lp[[r, j]].exp() * (lp[[r, j]] - lq[[r, j]]))
                            .sum();
                        for j in 0..c {
                            dt[[r, j]] =
                                lp[[r, j]].exp() * ((lp[[r, j]] - lq[[r, j]]) - klr) * scale;
                        }
                    }
                    self.acc(teacher, dt);
                }
            }
            Op::Unfold { input, k, stride, pad_left, pad } => {
                let (n, c) = self.nodes[input].value.dim();
                let mut da = Array2::zeros((n, c));
                for t in 0..g.nrows() {
                    for j in 0..k {
                        let pos = (t * stride + j) as i64 - pad_left as i64;
                        if let Some(src) = pad_source(pos, n, pad) {
                            for ch in 0..c {
                                da[[src, ch]] += g[[t, j * c + ch]];
                            }
                        }
                    }
                }
                self.acc(input, da);
            }
            Op::ZeroStuff { input, stride } => {
                let (t, c) = self.nodes[input].value.dim();
                let mut da = Array2::zeros((t, c));
                for i2 in 0..t {
                    for ch in 0..c {
                        da[[i2, ch]] = g[[i2 * stride, ch]];
                    }
                }
                self.acc(input, da);
            }
            Op::AvgPoolRows { input, factor } => {
                let (t, c) = self.nodes[input].value.dim();
                let mut da = Array2::zeros((t, c));
                for i2 in 0..g.nrows() {
                    for j in 0..factor {
                        for ch in 0..c {
                            da[[i2 * factor + j, ch]] = g[[i2, ch]] / factor as f64;
                        }
                    }
                }
                self.acc(input, da);
            }
            Op::SliceRows { input, start } => {
                let (t, c) = self.nodes[input].value.dim();
                let mut da = Array2::zeros((t, c));
                for r in 0..g.nrows() {
                    for ch in 0..c {
                        da[[start + r, ch]] = g[[r, ch]];
                    }
                }
                self.acc(input, da);
            }
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[[r, j]] = e;
            z += e;
        }
        for j in 0..row.len() {
            out[[r, j]] /= z;
        }
    }
    out
}

pub(crate) fn log_softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    for (r, row) in x.rows().into_iter().enumerate() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (j, &v) in row.iter().enumerate() {
            out[[r, j]] = v - lse;
        }
    }
    out
}
