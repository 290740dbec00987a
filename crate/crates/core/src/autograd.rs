//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation eagerly: values are computed when the op
//! is pushed and the tape keeps whatever the backward pass needs. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the tape in reverse once.
//!
//! Scalar-valued fused ops (the detection losses) store their input
//! gradients at forward time through [`Tape::scalar_fn`], which keeps the
//! loss kernels in one place next to their closed-form derivatives.

use crate::tensor::{gemm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AffineCols { a: Var, scale: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Identity(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    BatchNormTrain { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    BatchNormEval { x: Var, gain: Var, bias: Var, xhat: Matrix, rstd: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SegmentMax { a: Var, argmax: Vec<usize> },
    Reshape(Var),
    Sum(Var),
    ScalarFn { inputs: Vec<Var>, grads: Vec<Matrix> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let m = if ta { av.cols() } else { av.rows() };
        let n = if tb { bv.rows() } else { bv.cols() };
        let mut out = Matrix::zeros(m, n);
        gemm(1.0, av, ta, bv, tb, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.shape(b), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let mut out = self.value(a).clone();
        let r = self.value(row);
        assert_eq!((1, out.cols()), r.shape(), "add_row shape mismatch");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Element-wise product with a constant mask (dropout).
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Var {
        let av = self.value(a);
        assert_eq!(av.shape(), mask.shape(), "mul_const shape mismatch");
        let data = av.data().iter().zip(mask.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        let ng = self.ng(a);
        self.push(out, Op::MulConst(a, mask), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Column-wise affine map `y[:, j] = scale[j] * x[:, j] + shift[j]`.
    pub fn affine_cols(&mut self, a: Var, scale: &[f64], shift: &[f64]) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.cols(), scale.len());
        assert_eq!(out.cols(), shift.len());
        for i in 0..out.rows() {
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = *o * scale[j] + shift[j];
            }
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::AffineCols {
                a,
                scale: scale.to_vec(),
            },
            ng,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(silu);
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let ng = self.ng(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Value-level map with identity gradient. Used for angle wrapping,
    /// which is piecewise a shift by a multiple of 2π.
    pub fn map_identity_grad(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(out, Op::Identity(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let ng = self.ng(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise layer normalisation with learned gain and bias (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut xhat = Matrix::zeros(m, n);
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * r;
            }
            rstd.push(r);
        }
        let out = scale_shift(&xhat, self.value(gain), self.value(bias));
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Batch normalisation over rows using the statistics of this batch.
    /// Returns the output together with the per-column mean and biased
    /// variance so callers can maintain running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> (Var, Vec<f64>, Vec<f64>) {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let mut mean = vec![0.0; n];
        for i in 0..m {
            for (s, v) in mean.iter_mut().zip(xv.row(i)) {
                *s += v;
            }
        }
        for s in &mut mean {
            *s /= m as f64;
        }
        let mut var = vec![0.0; n];
        for i in 0..m {
            for ((s, v), mu) in var.iter_mut().zip(xv.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        for s in &mut var {
            *s /= m as f64;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(m, n);
        for i in 0..m {
            let src = xv.row(i);
            for (j, o) in xhat.row_mut(i).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * rstd[j];
            }
        }
        let out = scale_shift(&xhat, self.value(gain), self.value(bias));
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Var {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Matrix::zeros(m, n);
        for i in 0..m {
            let src = xv.row(i);
            for (j, o) in xhat.row_mut(i).iter_mut().enumerate() {
                *o = (src[j] - mean[j]) * rstd[j];
            }
        }
        let out = scale_shift(&xhat, self.value(gain), self.value(bias));
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols height mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
            }
            off += v.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of bounds");
        let cols = av.cols();
        let out = Matrix::from_vec(len, cols, av.data()[start * cols..(start + len) * cols].to_vec());
        let ng = self.ng(a);
        self.push(out, Op::SliceRows { a, start }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of bounds");
        let mut out = Matrix::zeros(av.rows(), len);
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    /// `out[i] = a[idx[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(idx.len(), av.cols());
        for (i, &k) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(av.row(k));
        }
        let ng = self.ng(a);
        self.push(
            out,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    /// Column-wise maximum over contiguous row segments `(start, len)`.
    /// Ties resolve to the first row of the segment.
    pub fn segment_max(&mut self, a: Var, segments: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Matrix::zeros(segments.len(), n);
        let mut argmax = vec![0usize; segments.len() * n];
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_max over an empty segment");
            let row = out.row_mut(s);
            row.copy_from_slice(av.row(start));
            for j in 0..n {
                argmax[s * n + j] = start;
            }
            for r in start + 1..start + len {
                for (j, &v) in av.row(r).iter().enumerate() {
                    if v > row[j] {
                        row[j] = v;
                        argmax[s * n + j] = r;
                    }
                }
            }
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentMax { a, argmax }, ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let out = self.value(a).clone().reshaped(rows, cols);
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    /// Records a scalar function whose gradients with respect to `inputs`
    /// were computed by the caller. `grads[i]` must match the shape of
    /// `inputs[i]`.
    pub fn scalar_fn(&mut self, value: f64, inputs: &[Var], grads: Vec<Matrix>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.shape(v), g.shape(), "scalar_fn gradient shape mismatch");
        }
        let ng = inputs.iter().any(|&p| self.ng(p));
        self.push(
            Matrix::scalar(value),
            Op::ScalarFn {
                inputs: inputs.to_vec(),
                grads,
            },
            ng,
        )
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> Option<&'g mut Matrix> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let (r, c) = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c)))
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    if ta {
                        gemm(1.0, bv, tb, g, true, 1.0, ga);
                    } else {
                        gemm(1.0, g, false, bv, !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if tb {
                        gemm(1.0, g, true, av, ta, 1.0, gb);
                    } else {
                        gemm(1.0, av, !ta, g, false, 1.0, gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.add_assign(g);
                    }
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.add_assign(g);
                }
                if let Some(gr) = self.acc(grads, row) {
                    let acc = gr.data_mut();
                    for i in 0..g.rows() {
                        for (o, v) in acc.iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, gv), y) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, gv), x) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::MulConst(a, mask) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gv), m) in ga.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                        *o += gv * m;
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, gv) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += gv * s;
                    }
                }
            }
            Op::AffineCols { a, scale } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = scale.len();
                    for (k, (o, gv)) in ga.data_mut().iter_mut().zip(g.data()).enumerate() {
                        *o += gv * scale[k % n];
                    }
                }
            }
            &Op::Gelu(a) => self.unary(grads, a, g, |x, _| gelu_grad(x), &node.value),
            &Op::Silu(a) => self.unary(grads, a, g, |x, _| silu_grad(x), &node.value),
            &Op::Exp(a) => self.unary(grads, a, g, |_, y| y, &node.value),
            &Op::Identity(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.add_assign(g);
                }
            }
            &Op::Softmax(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let y = &node.value;
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((o, p), q) in ga.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o += p * (q - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gainv = self.value(*gain).data();
                self.affine_param_grads(grads, *gain, *bias, xhat, g);
                if let Some(gx) = self.acc(grads, *x) {
                    let n = xhat.cols() as f64;
                    for i in 0..xhat.rows() {
                        let dxh: Vec<f64> = g.row(i).iter().zip(gainv).map(|(a, b)| a * b).collect();
                        let xr = xhat.row(i);
                        let m1 = dxh.iter().sum::<f64>() / n;
                        let m2 = dxh.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                        for ((o, d), xh) in gx.row_mut(i).iter_mut().zip(&dxh).zip(xr) {
                            *o += rstd[i] * (d - m1 - xh * m2);
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gainv = self.value(*gain).data();
                self.affine_param_grads(grads, *gain, *bias, xhat, g);
                if let Some(gx) = self.acc(grads, *x) {
                    let (m, n) = xhat.shape();
                    let mut m1 = vec![0.0; n];
                    let mut m2 = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            let d = g.get(i, j) * gainv[j];
                            m1[j] += d;
                            m2[j] += d * xhat.get(i, j);
                        }
                    }
                    for j in 0..n {
                        m1[j] /= m as f64;
                        m2[j] /= m as f64;
                    }
                    for i in 0..m {
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            let d = g.get(i, j) * gainv[j];
                            *o += rstd[j] * (d - m1[j] - xhat.get(i, j) * m2[j]);
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gainv = self.value(*gain).data();
                self.affine_param_grads(grads, *gain, *bias, xhat, g);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..xhat.rows() {
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o += g.get(i, j) * gainv[j] * rstd[j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if let Some(gp) = self.acc(grads, p) {
                        for (o, v) in gp.data_mut().iter_mut().zip(&g.data()[off * c..(off + r) * c]) {
                            *o += v;
                        }
                    }
                    off += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            for (o, v) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + c]) {
                                *o += v;
                            }
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceRows { a, start } => {
                if let Some(ga) = self.acc(grads, a) {
                    let c = g.cols();
                    for (o, v) in ga.data_mut()[start * c..(start + g.rows()) * c]
                        .iter_mut()
                        .zip(g.data())
                    {
                        *o += v;
                    }
                }
            }
            &Op::SliceCols { a, start } => {
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.rows() {
                        for (o, v) in ga.row_mut(i)[start..start + g.cols()].iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, &k) in idx.iter().enumerate() {
                        for (o, v) in ga.row_mut(k).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::SegmentMax { a, argmax } => {
                if let Some(ga) = self.acc(grads, *a) {
                    let n = g.cols();
                    for s in 0..g.rows() {
                        for j in 0..n {
                            let r = argmax[s * n + j];
                            ga.data_mut()[r * n + j] += g.get(s, j);
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                        *o += v;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    let s = g.item();
                    for o in ga.data_mut() {
                        *o += s;
                    }
                }
            }
            Op::ScalarFn { inputs, grads: local } => {
                let s = g.item();
                for (&v, lg) in inputs.iter().zip(local) {
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, d) in gv.data_mut().iter_mut().zip(lg.data()) {
                            *o += s * d;
                        }
                    }
                }
            }
        }
    }

    fn unary(
        &self,
        grads: &mut [Option<Matrix>],
        a: Var,
        g: &Matrix,
        d: impl Fn(f64, f64) -> f64,
        out: &Matrix,
    ) {
        let x = self.value(a);
        if let Some(ga) = self.acc(grads, a) {
            for (((o, gv), xv), yv) in ga
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(x.data())
                .zip(out.data())
            {
                *o += gv * d(*xv, *yv);
            }
        }
    }

    fn affine_param_grads(
        &self,
        grads: &mut [Option<Matrix>],
        gain: Var,
        bias: Var,
        xhat: &Matrix,
        g: &Matrix,
    ) {
        if let Some(gg) = self.acc(grads, gain) {
            let acc = gg.data_mut();
            for i in 0..g.rows() {
                for ((o, gv), xh) in acc.iter_mut().zip(g.row(i)).zip(xhat.row(i)) {
                    *o += gv * xh;
                }
            }
        }
        if let Some(gb) = self.acc(grads, bias) {
            let acc = gb.data_mut();
            for i in 0..g.rows() {
                for (o, gv) in acc.iter_mut().zip(g.row(i)) {
                    *o += gv;
                }
            }
        }
    }
}

fn scale_shift(xhat: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = xhat.clone();
    let (gv, bv) = (gain.data(), bias.data());
    for i in 0..out.rows() {
        for ((o, a), b) in out.row_mut(i).iter_mut().zip(gv).zip(bv) {
            *o = *o * a + b;
        }
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of `build` with respect to every entry of
    /// every input.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.leaf(m.clone(), false)).collect();
            let o = build(&mut t, &vs);
            t.value(o).item()
        };
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or(Matrix::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(rel < 1e-5, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Weighted sum so that every output entry gets a distinct upstream grad.
    fn weighted(tape: &mut Tape, v: Var, seed: u64) -> Var {
        let (r, c) = tape.shape(v);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, r, c));
        let p = tape.mul(v, w);
        tape.sum(p)
    }

    #[test]
    fn matmul_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { random(&mut rng, 4, 3) } else { random(&mut rng, 3, 4) };
            let b = if tb { random(&mut rng, 2, 4) } else { random(&mut rng, 4, 2) };
            check(vec![a, b], |t, v| {
                let m = t.matmul_t(v[0], v[1], ta, tb);
                weighted(t, m, 9)
            });
        }
    }

    #[test]
    fn normalisations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 4);
        let g = random(&mut rng, 1, 4);
        let b = random(&mut rng, 1, 4);
        check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            weighted(t, y, 3)
        });
        check(vec![x.clone(), g.clone(), b.clone()], |t, v| {
            let (y, _, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5);
            weighted(t, y, 4)
        });
        check(vec![x, g, b], |t, v| {
            let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.0, 0.3], &[1.0, 0.5, 2.0, 0.7], 1e-5);
            weighted(t, y, 5)
        });
    }

    #[test]
    fn pointwise_and_structural() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 6, 3);
        let r = random(&mut rng, 1, 3);
        check(vec![x.clone(), r.clone()], |t, v| {
            let a = t.add_row(v[0], v[1]);
            let b = t.gelu(a);
            let c = t.silu(b);
            let d = t.exp(c);
            let e = t.softmax(d);
            let f = t.affine_cols(e, &[2.0, -1.0, 0.5], &[0.0, 1.0, 2.0]);
            let g = t.scale(f, 1.5);
            let h = t.mul(g, a);
            weighted(t, h, 6)
        });
        check(vec![x.clone(), r.clone()], |t, v| {
            let s = t.slice_rows(v[0], 1, 3);
            let c = t.slice_cols(s, 1, 2);
            let cat = t.concat_cols(&[c, s]);
            let rows = t.concat_rows(&[v[1], v[1]]);
            let rows = t.reshape(rows, 3, 2);
            let cat2 = t.concat_cols(&[cat, rows]);
            let gth = t.gather_rows(cat2, &[2, 0, 0, 1]);
            let mx = t.segment_max(gth, &[(0, 1), (1, 3)]);
            weighted(t, mx, 7)
        });
    }

    #[test]
    fn segment_max_routes_gradient_to_argmax() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(3, 2, vec![1.0, 5.0, 3.0, 2.0, 0.0, 4.0]), true);
        let m = t.segment_max(x, &[(0, 3)]);
        assert_eq!(t.value(m).data(), &[3.0, 5.0]);
        let s = t.sum(m);
        let g = t.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
