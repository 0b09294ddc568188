//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! The optimization loop rebuilds the graph on every step and drops it after
//! the backward pass, so nodes own their values outright and no retained-state
//! bookkeeping is needed. Values are flat `f64` buffers with explicit shapes;
//! a rank-0 tensor acts as a scalar and broadcasts against any shape in the
//! elementwise ops. Everything runs in `f64` so the finite-difference checks
//! in the test suites are meaningful at tight tolerances.

use std::sync::Arc;

use crate::error::{Result, TinoError};

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TinoError::ShapeMismatch(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {:?}", self.shape);
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self
            .data
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.data.len() as f64;
        var.sqrt()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Tanh(Var),
    Sin(Var),
    Cos(Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    MatVec {
        matrix: Var,
        vector: Var,
    },
    AvgPool {
        input: Var,
        window_y: usize,
        window_x: usize,
    },
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    ChannelLinear {
        input: Var,
        matrix: Arc<Vec<f64>>,
        out_channels: usize,
    },
    Blend {
        edit: Var,
        orig: Var,
        mask: Arc<Vec<f64>>,
    },
    InterpTable {
        t: Var,
        table: Arc<Vec<f64>>,
    },
    StackScalars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly-evaluated computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    value_bytes: usize,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients(Vec<Tensor>);

impl Gradients {
    pub fn get(&self, var: Var) -> &Tensor {
        &self.0[var.0]
    }
}

/// Summation over blocks by recursive halving. Exact for blocks of identical
/// values whenever the block size is a power of two, which the pooling round
/// trips in the toy autoencoder rely on.
fn pairwise_sum(values: &mut dyn Iterator<Item = f64>, n: usize) -> f64 {
    debug_assert!(n > 0);
    if n == 1 {
        return values.next().unwrap();
    }
    let half = n / 2;
    pairwise_sum(values, half) + pairwise_sum(values, n - half)
}

fn shape3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(TinoError::ShapeMismatch(format!(
            "{what} expects a (channels, height, width) tensor, got shape {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2]))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total bytes held by node values; a proxy for the tape's memory cost.
    pub fn value_bytes(&self) -> usize {
        self.value_bytes
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.value_bytes += value.numel() * std::mem::size_of::<f64>();
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a graph input. Gradients are accumulated for every
    /// node, so "constant" and "parameter" differ only in whether the caller
    /// reads the gradient back.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.input(Tensor::scalar(value))
    }

    fn binary_shape(&self, a: Var, b: Var, op: &str) -> Result<Vec<usize>> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa == sb {
            Ok(sa.to_vec())
        } else if sa.is_empty() {
            Ok(sb.to_vec())
        } else if sb.is_empty() {
            Ok(sa.to_vec())
        } else {
            Err(TinoError::ShapeMismatch(format!(
                "{op}: incompatible shapes {sa:?} and {sb:?}"
            )))
        }
    }

    fn elementwise2(
        &mut self,
        a: Var,
        b: Var,
        op_name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let shape = self.binary_shape(a, b, op_name)?;
        let numel: usize = shape.iter().product();
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = va.data[if va.data.len() == 1 { 0 } else { i }];
            let y = vb.data[if vb.data.len() == 1 { 0 } else { i }];
            out.push(f(x, y));
        }
        Ok(self.push(Tensor { shape, data: out }, op))
    }

    fn elementwise1(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let out = Tensor {
            shape: va.shape.clone(),
            data: va.data.iter().map(|&x| f(x)).collect(),
        };
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise2(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.elementwise1(a, |x| -x, Op::Neg(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.elementwise1(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.elementwise1(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.elementwise1(a, |x| x * x, Op::Square(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.elementwise1(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.elementwise1(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.elementwise1(a, f64::cos, Op::Cos(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.elementwise1(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.elementwise1(a, |x| x + c, Op::Offset(a))
    }

    /// Elementwise clamp; gradient is zero wherever the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.elementwise1(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = self.value(a);
        let mean = value.data.iter().sum::<f64>() / value.numel() as f64;
        self.push(Tensor::scalar(mean), Op::Mean(a))
    }

    /// Flattened inner product of two same-size tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.numel() != vb.numel() {
            return Err(TinoError::ShapeMismatch(format!(
                "dot: {} vs {} elements",
                va.numel(),
                vb.numel()
            )));
        }
        let total: f64 = va.data.iter().zip(&vb.data).map(|(x, y)| x * y).sum();
        Ok(self.push(Tensor::scalar(total), Op::Dot(a, b)))
    }

    /// `matrix` is `[rows, cols]`, `vector` is any tensor with `cols`
    /// elements (flattened). Output is `[rows]`.
    pub fn matvec(&mut self, matrix: Var, vector: Var) -> Result<Var> {
        let m = self.value(matrix);
        let x = self.value(vector);
        if m.rank() != 2 {
            return Err(TinoError::ShapeMismatch(format!(
                "matvec: matrix must be rank 2, got {:?}",
                m.shape()
            )));
        }
        let (rows, cols) = (m.shape[0], m.shape[1]);
        if x.numel() != cols {
            return Err(TinoError::ShapeMismatch(format!(
                "matvec: matrix {:?} vs vector with {} elements",
                m.shape(),
                x.numel()
            )));
        }
        let mut out = vec![0.0; rows];
        for (r, slot) in out.iter_mut().enumerate() {
            let row = &m.data[r * cols..(r + 1) * cols];
            *slot = row.iter().zip(&x.data).map(|(w, v)| w * v).sum();
        }
        Ok(self.push(
            Tensor {
                shape: vec![rows],
                data: out,
            },
            Op::MatVec { matrix, vector },
        ))
    }

    /// Average pooling over `(channels, height, width)` with a
    /// `window_y`×`window_x` window; dimensions must divide exactly.
    pub fn avg_pool2d(&mut self, input: Var, window_y: usize, window_x: usize) -> Result<Var> {
        let v = self.value(input);
        let (c, h, w) = shape3(v.shape(), "avg_pool2d")?;
        if window_y == 0 || window_x == 0 || h % window_y != 0 || w % window_x != 0 {
            return Err(TinoError::ShapeMismatch(format!(
                "avg_pool2d: window {window_y}x{window_x} does not divide {h}x{w}"
            )));
        }
        let (oh, ow) = (h / window_y, w / window_x);
        let inv = 1.0 / (window_y * window_x) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut it = (0..window_y).flat_map(|dy| {
                        let base = ch * h * w + (oy * window_y + dy) * w + ox * window_x;
                        v.data[base..base + window_x].iter().copied()
                    });
                    let total = pairwise_sum(&mut it, window_y * window_x);
                    out[ch * oh * ow + oy * ow + ox] = total * inv;
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data: out,
            },
            Op::AvgPool {
                input,
                window_y,
                window_x,
            },
        ))
    }

    /// Nearest-neighbour upsampling of `(channels, height, width)` by `factor`.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        let v = self.value(input);
        let (c, h, w) = shape3(v.shape(), "upsample_nearest")?;
        if factor == 0 {
            return Err(TinoError::Domain("upsample factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[ch * oh * ow + y * ow + x] = v.data[ch * h * w + (y / factor) * w + x / factor];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![c, oh, ow],
                data: out,
            },
            Op::UpsampleNearest { input, factor },
        ))
    }

    /// Apply a fixed `out_channels`×`in_channels` matrix across the channel
    /// axis of a `(in_channels, height, width)` tensor.
    pub fn channel_linear(
        &mut self,
        input: Var,
        matrix: Arc<Vec<f64>>,
        out_channels: usize,
    ) -> Result<Var> {
        let v = self.value(input);
        let (c, h, w) = shape3(v.shape(), "channel_linear")?;
        if matrix.len() != out_channels * c {
            return Err(TinoError::ShapeMismatch(format!(
                "channel_linear: matrix of {} entries vs {out_channels}x{c}",
                matrix.len()
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; out_channels * plane];
        for co in 0..out_channels {
            for ci in 0..c {
                let coeff = matrix[co * c + ci];
                if coeff == 0.0 {
                    continue;
                }
                for p in 0..plane {
                    out[co * plane + p] += coeff * v.data[ci * plane + p];
                }
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![out_channels, h, w],
                data: out,
            },
            Op::ChannelLinear {
                input,
                matrix,
                out_channels,
            },
        ))
    }

    /// `edit·m + orig·(1−m)` with the mask broadcast over the channel axis.
    /// Cells where the mask is exactly 0 or 1 copy the corresponding source
    /// bit-for-bit.
    pub fn blend(&mut self, edit: Var, orig: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let ve = self.value(edit);
        let vo = self.value(orig);
        if ve.shape() != vo.shape() {
            return Err(TinoError::ShapeMismatch(format!(
                "blend: {:?} vs {:?}",
                ve.shape(),
                vo.shape()
            )));
        }
        let (c, h, w) = shape3(ve.shape(), "blend")?;
        if mask.len() != h * w {
            return Err(TinoError::ShapeMismatch(format!(
                "blend: mask of {} cells vs {h}x{w} tensor",
                mask.len()
            )));
        }
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                let m = mask[p];
                let idx = ch * plane + p;
                out[idx] = if m == 0.0 {
                    vo.data[idx]
                } else if m == 1.0 {
                    ve.data[idx]
                } else {
                    ve.data[idx] * m + vo.data[idx] * (1.0 - m)
                };
            }
        }
        Ok(self.push(
            Tensor {
                shape: ve.shape.clone(),
                data: out,
            },
            Op::Blend { edit, orig, mask },
        ))
    }

    /// Piecewise-linear interpolation of a table over uniform knots on
    /// [0, 1]. Queries exactly at a knot take the right-hand slope.
    pub fn interp_table(&mut self, t: Var, table: Arc<Vec<f64>>) -> Result<Var> {
        if self.value(t).numel() != 1 {
            return Err(TinoError::ShapeMismatch(
                "interp_table expects a scalar query".into(),
            ));
        }
        if table.len() < 2 {
            return Err(TinoError::Config("interpolation table needs >= 2 entries".into()));
        }
        let x = self.value(t).item();
        let (value, _) = interp_with_slope(&table, x);
        Ok(self.push(Tensor::scalar(value), Op::InterpTable { t, table }))
    }

    /// Pack rank-0 vars into a rank-1 tensor.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).numel() != 1 {
                return Err(TinoError::ShapeMismatch(
                    "stack_scalars expects rank-0 inputs".into(),
                ));
            }
            data.push(self.value(p).item());
        }
        Ok(self.push(
            Tensor {
                shape: vec![parts.len()],
                data,
            },
            Op::StackScalars(parts.to_vec()),
        ))
    }

    /// x / ‖x‖₂.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sq = self.dot(x, x)?;
        let norm = self.sqrt(sq);
        self.div(x, norm)
    }

    /// Cosine similarity of two flattened tensors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let num = self.dot(a, b)?;
        let aa = self.dot(a, a)?;
        let bb = self.dot(b, b)?;
        let na = self.sqrt(aa);
        let nb = self.sqrt(bb);
        let denom = self.mul(na, nb)?;
        self.div(num, denom)
    }

    /// Reverse pass from a rank-0 loss node; returns one gradient tensor per
    /// node, shaped like that node's value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TinoError::Domain(
                "backward expects a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let grad = grads[idx].clone();
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &grad.data, |g, _| g);
                    self.accumulate(&mut grads, *b, &grad.data, |g, _| g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, &grad.data, |g, _| g);
                    self.accumulate(&mut grads, *b, &grad.data, |g, _| -g);
                }
                Op::Mul(a, b) => {
                    let va = broadcast_read(self.value(*a), grad.numel());
                    let vb = broadcast_read(self.value(*b), grad.numel());
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g * vb(i));
                    self.accumulate(&mut grads, *b, &grad.data, |g, i| g * va(i));
                }
                Op::Div(a, b) => {
                    let va = broadcast_read(self.value(*a), grad.numel());
                    let vb = broadcast_read(self.value(*b), grad.numel());
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g / vb(i));
                    self.accumulate(&mut grads, *b, &grad.data, |g, i| {
                        -g * va(i) / (vb(i) * vb(i))
                    });
                }
                Op::Neg(a) => self.accumulate(&mut grads, *a, &grad.data, |g, _| -g),
                Op::Sqrt(a) => {
                    let out = &self.nodes[idx].value;
                    let outv = out.data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g * 0.5 / outv[i]);
                }
                Op::Abs(a) => {
                    let va = self.value(*a).data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| {
                        g * if va[i] > 0.0 {
                            1.0
                        } else if va[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                }
                Op::Square(a) => {
                    let va = self.value(*a).data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g * 2.0 * va[i]);
                }
                Op::Tanh(a) => {
                    let out = self.nodes[idx].value.data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g * (1.0 - out[i] * out[i]));
                }
                Op::Sin(a) => {
                    let va = self.value(*a).data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| g * va[i].cos());
                }
                Op::Cos(a) => {
                    let va = self.value(*a).data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, |g, i| -g * va[i].sin());
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    self.accumulate(&mut grads, *a, &grad.data, move |g, _| g * c);
                }
                Op::Offset(a) => self.accumulate(&mut grads, *a, &grad.data, |g, _| g),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let va = self.value(*a).data.clone();
                    self.accumulate(&mut grads, *a, &grad.data, move |g, i| {
                        if va[i] >= lo && va[i] <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                }
                Op::Sum(a) => {
                    let g = grad.item();
                    for slot in grads[a.0].data.iter_mut() {
                        *slot += g;
                    }
                }
                Op::Mean(a) => {
                    let g = grad.item() / self.value(*a).numel() as f64;
                    for slot in grads[a.0].data.iter_mut() {
                        *slot += g;
                    }
                }
                Op::Dot(a, b) => {
                    let g = grad.item();
                    let va = self.value(*a).data.clone();
                    let vb = self.value(*b).data.clone();
                    for (slot, y) in grads[a.0].data.iter_mut().zip(&vb) {
                        *slot += g * y;
                    }
                    for (slot, x) in grads[b.0].data.iter_mut().zip(&va) {
                        *slot += g * x;
                    }
                }
                Op::MatVec { matrix, vector } => {
                    let m = self.value(*matrix);
                    let cols = m.shape[1];
                    let rows = m.shape[0];
                    let mdata = m.data.clone();
                    let x = self.value(*vector).data.clone();
                    {
                        let gm = &mut grads[matrix.0];
                        for r in 0..rows {
                            let g = grad.data[r];
                            if g == 0.0 {
                                continue;
                            }
                            for (cslot, xv) in gm.data[r * cols..(r + 1) * cols].iter_mut().zip(&x)
                            {
                                *cslot += g * xv;
                            }
                        }
                    }
                    let gx = &mut grads[vector.0];
                    for r in 0..rows {
                        let g = grad.data[r];
                        if g == 0.0 {
                            continue;
                        }
                        for (slot, wv) in gx.data.iter_mut().zip(&mdata[r * cols..(r + 1) * cols]) {
                            *slot += g * wv;
                        }
                    }
                }
                Op::AvgPool {
                    input,
                    window_y,
                    window_x,
                } => {
                    let v = self.value(*input);
                    let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
                    let (oh, ow) = (h / window_y, w / window_x);
                    let inv = 1.0 / (window_y * window_x) as f64;
                    let gi = &mut grads[input.0];
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let o = ch * oh * ow + (y / window_y) * ow + x / window_x;
                                gi.data[ch * h * w + y * w + x] += grad.data[o] * inv;
                            }
                        }
                    }
                }
                Op::UpsampleNearest { input, factor } => {
                    let v = self.value(*input);
                    let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let gi = &mut grads[input.0];
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                gi.data[ch * h * w + (y / factor) * w + x / factor] +=
                                    grad.data[ch * oh * ow + y * ow + x];
                            }
                        }
                    }
                }
                Op::ChannelLinear {
                    input,
                    matrix,
                    out_channels,
                } => {
                    let v = self.value(*input);
                    let (c, h, w) = (v.shape[0], v.shape[1], v.shape[2]);
                    let plane = h * w;
                    let gi = &mut grads[input.0];
                    for co in 0..*out_channels {
                        for ci in 0..c {
                            let coeff = matrix[co * c + ci];
                            if coeff == 0.0 {
                                continue;
                            }
                            for p in 0..plane {
                                gi.data[ci * plane + p] += coeff * grad.data[co * plane + p];
                            }
                        }
                    }
                }
                Op::Blend { edit, orig, mask } => {
                    let shape = self.nodes[idx].value.shape.clone();
                    let plane = shape[1] * shape[2];
                    {
                        let ge = &mut grads[edit.0];
                        for ch in 0..shape[0] {
                            for p in 0..plane {
                                ge.data[ch * plane + p] += grad.data[ch * plane + p] * mask[p];
                            }
                        }
                    }
                    let go = &mut grads[orig.0];
                    for ch in 0..shape[0] {
                        for p in 0..plane {
                            go.data[ch * plane + p] += grad.data[ch * plane + p] * (1.0 - mask[p]);
                        }
                    }
                }
                Op::InterpTable { t, table } => {
                    let x = self.value(*t).item();
                    let (_, slope) = interp_with_slope(table, x);
                    grads[t.0].data[0] += grad.item() * slope;
                }
                Op::StackScalars(parts) => {
                    for (i, p) in parts.iter().enumerate() {
                        grads[p.0].data[0] += grad.data[i];
                    }
                }
            }
        }
        Ok(Gradients(grads))
    }

    /// Add `f(grad, index)` into the gradient slot of `target`, reducing to a
    /// scalar when the target is rank 0 but the gradient is not.
    fn accumulate(
        &self,
        grads: &mut [Tensor],
        target: Var,
        grad: &[f64],
        f: impl Fn(f64, usize) -> f64,
    ) {
        let slot = &mut grads[target.0];
        if slot.data.len() == grad.len() {
            for (i, s) in slot.data.iter_mut().enumerate() {
                *s += f(grad[i], i);
            }
        } else {
            debug_assert_eq!(slot.data.len(), 1);
            let mut total = 0.0;
            for (i, &g) in grad.iter().enumerate() {
                total += f(g, i);
            }
            slot.data[0] += total;
        }
    }
}

/// Read with rank-0 broadcast: a single-element tensor repeats.
fn broadcast_read(t: &Tensor, _target_len: usize) -> impl Fn(usize) -> f64 + '_ {
    let single = t.data.len() == 1;
    move |i| t.data[if single { 0 } else { i }]
}

/// Value and right-hand slope of the uniform-knot piecewise-linear table at
/// `x` in [0, 1].
fn interp_with_slope(table: &[f64], x: f64) -> (f64, f64) {
    let segments = table.len() - 1;
    let u = x.clamp(0.0, 1.0) * segments as f64;
    let mut i = u.floor() as usize;
    if i >= segments {
        i = segments - 1;
    }
    let frac = u - i as f64;
    let slope = (table[i + 1] - table[i]) * segments as f64;
    (table[i] + frac * (table[i + 1] - table[i]), slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on one input entry of a rebuilt graph.
    pub(crate) fn finite_diff(
        build: impl Fn(&[f64]) -> f64,
        inputs: &[f64],
        index: usize,
        h: f64,
    ) -> f64 {
        let mut plus = inputs.to_vec();
        plus[index] += h;
        let mut minus = inputs.to_vec();
        minus[index] -= h;
        (build(&plus) - build(&minus)) / (2.0 * h)
    }

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!(
            (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs())),
            "{a} vs {b}"
        );
    }

    #[test]
    fn elementwise_chain_values_and_gradients() {
        let inputs = [0.7, -1.2, 2.3];
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![3], inputs.to_vec()).unwrap());
        let sq = g.square(x);
        let t = g.tanh(sq);
        let s = g.scale(t, 1.5);
        let loss = g.sum(s);
        let expect: f64 = inputs.iter().map(|v| 1.5 * (v * v).tanh()).sum();
        assert_close(g.value(loss).item(), expect, 1e-12);

        let grads = g.backward(loss).unwrap();
        for i in 0..3 {
            let fd = finite_diff(
                |vals| {
                    let mut g = Graph::new();
                    let x = g.input(Tensor::new(vec![3], vals.to_vec()).unwrap());
                    let sq = g.square(x);
                    let t = g.tanh(sq);
                    let s = g.scale(t, 1.5);
                    let l = g.sum(s);
                    g.value(l).item()
                },
                &inputs,
                i,
                1e-5,
            );
            assert_close(grads.get(x).data()[i], fd, 1e-6);
        }
    }

    #[test]
    fn scalar_broadcast_mul_div() {
        let mut g = Graph::new();
        let s = g.scalar(3.0);
        let x = g.input(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let prod = g.mul(s, x).unwrap();
        assert_eq!(g.value(prod).data(), &[3.0, -6.0]);
        let q = g.div(x, s).unwrap();
        let loss0 = g.sum(prod);
        let loss1 = g.sum(q);
        let loss = g.add(loss0, loss1).unwrap();
        let grads = g.backward(loss).unwrap();
        // d/ds [s*(x0+x1) + (x0+x1)/s] = (x0+x1)(1 - 1/s^2)
        assert_close(grads.get(s).item(), -1.0 * (1.0 - 1.0 / 9.0), 1e-12);
        assert_close(grads.get(x).data()[0], 3.0 + 1.0 / 3.0, 1e-12);
    }

    #[test]
    fn matvec_gradients_match_finite_differences() {
        let w = vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.75];
        let x = vec![1.2, -0.4, 0.9];
        let build = |wv: &[f64], xv: &[f64]| {
            let mut g = Graph::new();
            let m = g.input(Tensor::new(vec![2, 3], wv.to_vec()).unwrap());
            let v = g.input(Tensor::new(vec![3], xv.to_vec()).unwrap());
            let y = g.matvec(m, v).unwrap();
            let sq = g.square(y);
            let l = g.sum(sq);
            (g, m, v, l)
        };
        let (g, m, v, l) = build(&w, &x);
        let grads = g.backward(l).unwrap();
        for i in 0..w.len() {
            let fd = finite_diff(
                |wv| {
                    let (g, _, _, l) = build(wv, &x);
                    g.value(l).item()
                },
                &w,
                i,
                1e-5,
            );
            assert_close(grads.get(m).data()[i], fd, 1e-6);
        }
        for i in 0..x.len() {
            let fd = finite_diff(
                |xv| {
                    let (g, _, _, l) = build(&w, xv);
                    g.value(l).item()
                },
                &x,
                i,
                1e-5,
            );
            assert_close(grads.get(v).data()[i], fd, 1e-6);
        }
    }

    #[test]
    fn pool_and_upsample_roundtrip_gradients() {
        // mean(upsample(pool(x))) gradient is uniform 1/n
        let data: Vec<f64> = (0..16).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 4, 4], data.clone()).unwrap());
        let p = g.avg_pool2d(x, 2, 2).unwrap();
        let u = g.upsample_nearest(p, 2).unwrap();
        let l = g.mean(u);
        let grads = g.backward(l).unwrap();
        for &gv in grads.get(x).data() {
            assert_close(gv, 1.0 / 16.0, 1e-12);
        }
        // pooling of block-constant input is exact
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2, 2], vec![0.3, 0.3, 0.3, 0.3]).unwrap());
        let p = g.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data()[0], 0.3);
    }

    #[test]
    fn blend_is_exact_at_mask_extremes() {
        let mut g = Graph::new();
        let edit = g.input(Tensor::new(vec![1, 1, 2], vec![10.0, 20.0]).unwrap());
        let orig = g.input(Tensor::new(vec![1, 1, 2], vec![0.125, 0.25]).unwrap());
        let out = g
            .blend(edit, orig, Arc::new(vec![1.0, 0.0]))
            .unwrap();
        assert_eq!(g.value(out).data(), &[10.0, 0.25]);
        let l = g.sum(out);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(edit).data(), &[1.0, 0.0]);
        assert_eq!(grads.get(orig).data(), &[0.0, 1.0]);
    }

    #[test]
    fn interp_table_right_hand_slope_at_knots() {
        let table = Arc::new(vec![1.0, 0.5, 0.0]);
        let mut g = Graph::new();
        let t = g.scalar(0.25);
        let v = g.interp_table(t, table.clone()).unwrap();
        assert_close(g.value(v).item(), 0.75, 1e-12);
        let grads = g.backward(v).unwrap();
        assert_close(grads.get(t).item(), -1.0, 1e-12);

        // exactly at the middle knot the right-hand segment's slope applies
        let mut g = Graph::new();
        let t = g.scalar(0.5);
        let v = g.interp_table(t, table).unwrap();
        assert_close(g.value(v).item(), 0.5, 1e-12);
        let grads = g.backward(v).unwrap();
        assert_close(grads.get(t).item(), -1.0, 1e-12);
    }

    #[test]
    fn l2_normalize_and_cosine() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let n = g.l2_normalize(a).unwrap();
        assert_close(g.value(n).data()[0], 0.6, 1e-12);
        assert_close(g.value(n).data()[1], 0.8, 1e-12);

        let b = g.input(Tensor::new(vec![2], vec![-4.0, 3.0]).unwrap());
        let c = g.cosine(a, b).unwrap();
        assert_close(g.value(c).item(), 0.0, 1e-12);
        let d = g.cosine(a, a).unwrap();
        assert_close(g.value(d).item(), 1.0, 1e-12);
    }

    #[test]
    fn stack_scalars_routes_gradients() {
        let mut g = Graph::new();
        let a = g.scalar(2.0);
        let b = g.scalar(-1.0);
        let s = g.stack_scalars(&[a, b]).unwrap();
        let sq = g.square(s);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_close(grads.get(a).item(), 4.0, 1e-12);
        assert_close(grads.get(b).item(), -2.0, 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        assert!(g.add(a, b).is_err());
        assert!(g.dot(a, b).is_err());
    }
}
