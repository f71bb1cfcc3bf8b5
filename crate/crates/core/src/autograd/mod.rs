//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is an `Array2<T>`; sequences are stored time-major with
//! channels as columns, and batches of equal-length sequences are stacked
//! along the rows (see [`ConvSpec::n_seq`]). Operations are evaluated
//! eagerly as they are recorded, so a graph doubles as an inference engine
//! when `backward` is never called.

mod conv;
mod signal;

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::scalar::Scalar;

pub use conv::ConvSpec;
pub use signal::{pitch_grid, HarmonicBank, StftSpec};

pub type Mat<T> = Array2<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T: Scalar> {
    value: Mat<T>,
    op: Op<T>,
    tracked: bool,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    LnClamp(Var, T),
    LeakyRelu(Var, T),
    Softplus(Var),
    Square(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Reshape(Var),
    PadRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    SegmentMean(Var, Vec<(usize, usize)>),
    SoftmaxRows(Var),
    LayerNormRows(Var, Mat<T>),
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
        cols: Mat<T>,
    },
    ConvTranspose1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    StftMagnitude {
        x: Var,
        spec: StftSpec,
        re: Mat<T>,
        im: Mat<T>,
    },
    UpsampleLinear {
        x: Var,
        taps: Vec<(usize, usize, T, T)>,
    },
    HarmonicMix {
        probs: Var,
        amps: Var,
        bank: Arc<HarmonicBank<T>>,
        offset: usize,
    },
}

/// Recorded computation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T: Scalar> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar_mat<T: Scalar>(v: T) -> Mat<T> {
    Array2::from_elem((1, 1), v)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that is treated as a constant.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a new untracked leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary_shape_check(&self, a: Var, b: Var, name: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{name}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "add");
        let v = self.value(a) + self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_shape_check(a, b, "mul");
        let v = self.value(a) * self.value(b);
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    /// `x` (R×C) plus a broadcast row `b` (1×C).
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "add_row: bias must be 1×{c}");
        let v = self.value(x) + self.value(b);
        let t = self.tracked(x) || self.tracked(b);
        self.push(v, Op::AddRow(x, b), t)
    }

    /// `x` (R×C) times a broadcast row `g` (1×C).
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (_, c) = self.shape(x);
        assert_eq!(self.shape(g), (1, c), "mul_row: gain must be 1×{c}");
        let v = self.value(x) * self.value(g);
        let t = self.tracked(x) || self.tracked(g);
        self.push(v, Op::MulRow(x, g), t)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x) * s;
        let t = self.tracked(x);
        self.push(v, Op::Scale(x, s), t)
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).mapv(|e| e + s);
        let t = self.tracked(x);
        self.push(v, Op::AddScalar(x), t)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).mapv(f);
        let t = self.tracked(x);
        self.push(v, op, t)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.exp(), Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.ln(), Op::Ln(x))
    }

    /// `ln(max(x, floor))`; the gradient is zero below the floor.
    pub fn ln_clamp(&mut self, x: Var, floor: T) -> Var {
        self.unary(x, move |e| e.max(floor).ln(), Op::LnClamp(x, floor))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |e| if e > T::zero() { e } else { e * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |e| e * e, Op::Square(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |e| e.abs(), Op::Abs(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = scalar_mat(self.value(x).sum());
        let t = self.tracked(x);
        self.push(v, Op::SumAll(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let v = scalar_mat(self.value(x).sum() / T::c(n as f64));
        let t = self.tracked(x);
        self.push(v, Op::MeanAll(x), t)
    }

    /// Column means, R×C → 1×C.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let v = if r == 0 {
            Array2::zeros((1, c))
        } else {
            self.value(x)
                .sum_axis(Axis(0))
                .insert_axis(Axis(0))
                .mapv(|e| e / T::c(r as f64))
        };
        let t = self.tracked(x);
        self.push(v, Op::MeanRows(x), t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (_, k) = self.shape(a);
        let (k2, _) = self.shape(b);
        assert_eq!(k, k2, "matmul: inner dimensions differ ({k} vs {k2})");
        let v = self.value(a).dot(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        let t = self.tracked(x);
        self.push(v, Op::Transpose(x), t)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let t = xs.iter().any(|&x| self.tracked(x));
        self.push(v, Op::ConcatCols(xs.to_vec()), t)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|&x| self.value(x).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        let t = xs.iter().any(|&x| self.tracked(x));
        self.push(v, Op::ConcatRows(xs.to_vec()), t)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let t = self.tracked(x);
        self.push(v, Op::SliceRows(x, start), t)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let t = self.tracked(x);
        self.push(v, Op::SliceCols(x, start), t)
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<T> = self.value(x).iter().copied().collect();
        assert_eq!(flat.len(), rows * cols, "reshape: element count differs");
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        let t = self.tracked(x);
        self.push(v, Op::Reshape(x), t)
    }

    /// Zero rows before and after.
    pub fn pad_rows(&mut self, x: Var, before: usize, after: usize) -> Var {
        let (r, c) = self.shape(x);
        let mut v = Array2::zeros((before + r + after, c));
        v.slice_mut(s![before..before + r, ..])
            .assign(self.value(x));
        let t = self.tracked(x);
        self.push(v, Op::PadRows(x, before), t)
    }

    /// `out[i] = x[idx[i]]`.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        let mut v = Array2::zeros((idx.len(), c));
        for (i, &j) in idx.iter().enumerate() {
            v.row_mut(i).assign(&src.row(j));
        }
        let t = self.tracked(x);
        self.push(v, Op::GatherRows(x, idx), t)
    }

    /// Mean of each half-open row span; empty spans give zero rows.
    pub fn segment_mean(&mut self, x: Var, spans: Vec<(usize, usize)>) -> Var {
        let src = self.value(x);
        let c = src.ncols();
        let mut v = Array2::zeros((spans.len(), c));
        for (i, &(a, b)) in spans.iter().enumerate() {
            if b > a {
                let m = src
                    .slice(s![a..b, ..])
                    .sum_axis(Axis(0))
                    .mapv(|e| e / T::c((b - a) as f64));
                v.row_mut(i).assign(&m);
            }
        }
        let t = self.tracked(x);
        self.push(v, Op::SegmentMean(x, spans), t)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            row.mapv_inplace(|e| (e - m).exp());
            let z = row.sum();
            row.mapv_inplace(|e| e / z);
        }
        let t = self.tracked(x);
        self.push(v, Op::SoftmaxRows(x), t)
    }

    /// Per-row standardisation without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var, eps: T) -> Var {
        let src = self.value(x);
        let (r, c) = src.dim();
        let n = T::c(c as f64);
        let mut v = Array2::zeros((r, c));
        let mut inv_std = Array2::zeros((r, 1));
        for i in 0..r {
            let row = src.row(i);
            let mean = row.sum() / n;
            let var = row.fold(T::zero(), |a, &e| a + (e - mean) * (e - mean)) / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[[i, 0]] = is;
            for j in 0..c {
                v[[i, j]] = (row[j] - mean) * is;
            }
        }
        let t = self.tracked(x);
        self.push(v, Op::LayerNormRows(x, inv_std), t)
    }

    /// 1-D convolution over time. `w` is `(kernel·c_in) × c_out`, `b` is `1 × c_out`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let (out, cols) = conv::conv1d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        );
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(
            out,
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols,
            },
            t,
        )
    }

    /// Transposed 1-D convolution. `w` is `c_in × (kernel·c_out)`.
    pub fn conv_transpose1d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = conv::conv_transpose1d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            &spec,
        );
        let t = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(out, Op::ConvTranspose1d { x, w, b, spec }, t)
    }

    /// Magnitude STFT of a `T × 1` signal, giving `ceil(T/hop) × (n_fft/2+1)`.
    pub fn stft_magnitude(&mut self, x: Var, spec: StftSpec) -> Var {
        let (mag, re, im) = signal::stft_forward(self.value(x), &spec);
        let t = self.tracked(x);
        self.push(mag, Op::StftMagnitude { x, spec, re, im }, t)
    }

    /// Linear interpolation from frame rate to `out_len` rows at `factor` rows per frame.
    pub fn upsample_linear(&mut self, x: Var, factor: usize, out_len: usize) -> Var {
        let frames = self.shape(x).0;
        let taps = signal::linear_taps::<T>(frames, factor, out_len);
        let src = self.value(x);
        let c = src.ncols();
        let mut v = Array2::zeros((out_len, c));
        for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            for j in 0..c {
                v[[t, j]] = src[[i0, j]] * w0 + src[[i1, j]] * w1;
            }
        }
        let tr = self.tracked(x);
        self.push(v, Op::UpsampleLinear { x, taps }, tr)
    }

    /// `Σ_g Σ_b probs[t,g]·amps[t,b]·bank[offset+t, g, b]`, a `T × 1` waveform.
    pub fn harmonic_mix(
        &mut self,
        probs: Var,
        amps: Var,
        bank: Arc<HarmonicBank<T>>,
        offset: usize,
    ) -> Var {
        let v = signal::harmonic_mix_forward(self.value(probs), self.value(amps), &bank, offset);
        let t = self.tracked(probs) || self.tracked(amps);
        self.push(
            v,
            Op::HarmonicMix {
                probs,
                amps,
                bank,
                offset,
            },
            t,
        )
    }

    // Composite helpers.

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    /// `x·w + b` with `w` of shape `in × out` and `b` of shape `1 × out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        self.mean(sq)
    }

    /// Which side of its kink every element of every piecewise op landed on.
    /// Two evaluations with equal patterns lie in one smooth region.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let (x, at) = match n.op {
                Op::LnClamp(x, floor) => (x, floor),
                Op::LeakyRelu(x, _) | Op::Abs(x) => (x, T::zero()),
                _ => continue,
            };
            out.extend(self.value(x).iter().map(|&e| e > at));
        }
        out
    }

    /// Reverse pass from a 1×1 output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(scalar_mat(T::one()));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, delta: Mat<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.tracked(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.tracked(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(x, gain) => {
                if self.tracked(*x) {
                    self.acc(grads, *x, g * self.value(*gain));
                }
                if self.tracked(*gain) {
                    let d = (g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(grads, *gain, d);
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g * *s),
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Tanh(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d = *d * (T::one() - y * y));
                self.acc(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d = *d * y * (T::one() - y));
                self.acc(grads, *x, d);
            }
            Op::Exp(x) => self.acc(grads, *x, g * out),
            Op::Ln(x) => self.acc(grads, *x, g / self.value(*x)),
            Op::LnClamp(x, floor) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    *d = if v > *floor { *d / v } else { T::zero() };
                });
                self.acc(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    if v <= T::zero() {
                        *d = *d * *slope;
                    }
                });
                self.acc(grads, *x, d);
            }
            Op::Softplus(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| *d = *d * sigmoid(v));
                self.acc(grads, *x, d);
            }
            Op::Square(x) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(self.value(*x))
                    .for_each(|d, &v| *d = *d * (v + v));
                self.acc(grads, *x, d);
            }
            Op::Abs(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                    *d = if v > T::zero() {
                        *d
                    } else if v < T::zero() {
                        -*d
                    } else {
                        T::zero()
                    };
                });
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gs = g[[0, 0]];
                self.acc(grads, *x, Array2::from_elem(self.shape(*x), gs));
            }
            Op::MeanAll(x) => {
                let shape = self.shape(*x);
                let n = T::c((shape.0 * shape.1).max(1) as f64);
                self.acc(grads, *x, Array2::from_elem(shape, g[[0, 0]] / n));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.shape(*x);
                if r > 0 {
                    let row = g.mapv(|e| e / T::c(r as f64));
                    let d = row.broadcast((r, c)).expect("broadcast").to_owned();
                    self.acc(grads, *x, d);
                }
            }
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.tracked(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(x) => self.acc(grads, *x, g.t().to_owned()),
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let c = self.shape(x).1;
                    if self.tracked(x) {
                        self.acc(grads, x, g.slice(s![.., off..off + c]).to_owned());
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let r = self.shape(x).0;
                    if self.tracked(x) {
                        self.acc(grads, x, g.slice(s![off..off + r, ..]).to_owned());
                    }
                    off += r;
                }
            }
            Op::SliceRows(x, start) => {
                let mut d = Array2::zeros(self.shape(*x));
                let r = g.nrows();
                d.slice_mut(s![*start..*start + r, ..]).assign(g);
                self.acc(grads, *x, d);
            }
            Op::SliceCols(x, start) => {
                let mut d = Array2::zeros(self.shape(*x));
                let c = g.ncols();
                d.slice_mut(s![.., *start..*start + c]).assign(g);
                self.acc(grads, *x, d);
            }
            Op::Reshape(x) => {
                let flat: Vec<T> = g.iter().copied().collect();
                let d = Array2::from_shape_vec(self.shape(*x), flat).expect("reshape grad");
                self.acc(grads, *x, d);
            }
            Op::PadRows(x, before) => {
                let (r, _) = self.shape(*x);
                self.acc(grads, *x, g.slice(s![*before..*before + r, ..]).to_owned());
            }
            Op::GatherRows(x, idx) => {
                let mut d = Array2::zeros(self.shape(*x));
                for (i, &j) in idx.iter().enumerate() {
                    let mut row = d.row_mut(j);
                    row += &g.row(i);
                }
                self.acc(grads, *x, d);
            }
            Op::SegmentMean(x, spans) => {
                let mut d = Array2::zeros(self.shape(*x));
                for (i, &(a, b)) in spans.iter().enumerate() {
                    if b > a {
                        let row = g.row(i).mapv(|e| e / T::c((b - a) as f64));
                        for r in a..b {
                            let mut dr = d.row_mut(r);
                            dr += &row;
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::SoftmaxRows(x) => {
                let mut d = Array2::zeros(out.dim());
                for ((y, gy), mut dr) in out.rows().into_iter().zip(g.rows()).zip(d.rows_mut()) {
                    let dot = y.iter().zip(gy.iter()).fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for j in 0..y.len() {
                        dr[j] = y[j] * (gy[j] - dot);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::LayerNormRows(x, inv_std) => {
                let (r, c) = out.dim();
                let n = T::c(c as f64);
                let mut d = Array2::zeros((r, c));
                for i in 0..r {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let mean_g = gy.sum() / n;
                    let mean_gy = y.iter().zip(gy.iter()).fold(T::zero(), |a, (&p, &q)| a + p * q) / n;
                    for j in 0..c {
                        d[[i, j]] = inv_std[[i, 0]] * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::Conv1d {
                x,
                w,
                b,
                spec,
                cols,
            } => {
                if self.tracked(*w) {
                    self.acc(grads, *w, cols.t().dot(g));
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                if self.tracked(*x) {
                    let dcols = g.dot(&self.value(*w).t());
                    let (rows, cin) = self.shape(*x);
                    self.acc(grads, *x, conv::col2im(&dcols, rows, cin, spec));
                }
            }
            Op::ConvTranspose1d { x, w, b, spec } => {
                let (rows_in, _) = self.shape(*x);
                let cout = out.ncols();
                let dy = conv::transpose_gather(g, rows_in, cout, spec);
                if self.tracked(*w) {
                    self.acc(grads, *w, self.value(*x).t().dot(&dy));
                }
                if let Some(b) = b {
                    if self.tracked(*b) {
                        self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                if self.tracked(*x) {
                    self.acc(grads, *x, dy.dot(&self.value(*w).t()));
                }
            }
            Op::StftMagnitude { x, spec, re, im } => {
                let len = self.shape(*x).0;
                self.acc(grads, *x, signal::stft_backward(g, out, re, im, spec, len));
            }
            Op::UpsampleLinear { x, taps } => {
                let mut d = Array2::zeros(self.shape(*x));
                let c = g.ncols();
                for (t, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
                    for j in 0..c {
                        d[[i0, j]] = d[[i0, j]] + g[[t, j]] * w0;
                        d[[i1, j]] = d[[i1, j]] + g[[t, j]] * w1;
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::HarmonicMix {
                probs,
                amps,
                bank,
                offset,
            } => {
                let (dp, da) = signal::harmonic_mix_backward(
                    g,
                    self.value(*probs),
                    self.value(*amps),
                    bank,
                    *offset,
                );
                self.acc(grads, *probs, dp);
                self.acc(grads, *amps, da);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(v: T) -> T {
    if v > T::c(20.0) {
        v
    } else {
        v.exp().ln_1p()
    }
}
