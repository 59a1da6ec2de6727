//! Reverse-mode automatic differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built while the forward pass runs: every op appends a node
//! holding its output value and enough saved state to compute its
//! vector-Jacobian product. Nodes are appended in execution order, so the
//! node list is already topologically sorted and [`Graph::backward`] is a
//! single reverse sweep. A graph is discarded after its backward pass.
//!
//! Parameters enter through [`Graph::param`]. A parameter whose tensor is not
//! marked `requires_grad` in the store becomes a constant node, so frozen
//! parameters never receive a gradient buffer at all.

use std::collections::BTreeSet;

use crate::ctc;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    ChannelNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        input: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Columns {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    CollapseHeight(Var),
    Ctc {
        input: Var,
        dloss: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params_read: BTreeSet<ParamId>,
    inference: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only: every parameter is loaded as a
    /// constant regardless of its trainable flag.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf. It participates in differentiation iff
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        if self.inference {
            tensor.requires_grad = false;
        }
        self.push_raw(tensor, Op::Leaf, None)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.params_read.insert(id);
        let src = store.tensor(id);
        let mut t = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("param tensor is well-formed");
        t.requires_grad = src.requires_grad && !self.inference;
        let param = t.requires_grad.then_some(id);
        self.push_raw(t, Op::Leaf, param)
    }

    /// Every parameter loaded into this graph so far.
    pub fn params_read(&self) -> &BTreeSet<ParamId> {
        &self.params_read
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// requires grad.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut value = Tensor::new(shape, data)?;
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("output of {}", op_name(&op))));
        }
        value.requires_grad = inputs.iter().any(|v| self.requires_grad(*v));
        // Ops with no differentiable input are recorded as constants, which
        // also drops any saved backward state.
        let op = if value.requires_grad { op } else { Op::Leaf };
        Ok(self.push_raw(value, op, None))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = tensor::matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; m * n];
        tensor::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(Error::Shape(format!("transpose expects a matrix, got {:?}", self.shape(a))));
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.value(a).rows_cols()?;
        if self.value(bias).len() != n {
            return Err(Error::Shape(format!(
                "bias {:?} does not match rows of width {n}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::AddRowBias(a, bias), &[a, bias])
    }

    /// Adds a per-channel bias to a `[C, H, W]` feature map.
    pub fn add_channel_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(a) else {
            return Err(Error::Shape(format!("expected [C,H,W], got {:?}", self.shape(a))));
        };
        if self.value(bias).len() != c {
            return Err(Error::Shape(format!("channel bias {:?} for {c} channels", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let out = self
            .value(a)
            .data()
            .chunks(h * w)
            .zip(b)
            .flat_map(|(plane, bc)| plane.iter().map(move |x| x + bc))
            .collect();
        self.push(vec![c, h, w], out, Op::AddChannelBias(a, bias), &[a, bias])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push(self.shape(a).to_vec(), out, Op::Relu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Shape("mean of an empty tensor".into()));
        }
        let s = self.value(a).data().iter().sum::<f64>() / n as f64;
        self.push(vec![], vec![s], Op::Mean(a), &[a])
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let cols = if geom.is_pointwise() {
            self.value(input).data().to_vec()
        } else {
            let mut cols = vec![0.0; geom.col_rows() * geom.out_spatial()];
            tensor::im2col(&geom, self.value(input).data(), &mut cols);
            cols
        };
        let mut out = vec![0.0; geom.c_out * geom.out_spatial()];
        tensor::conv_forward(&geom, self.value(kernel).data(), &cols, &mut out);
        // Columns are only needed to form the kernel gradient.
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        self.push(
            vec![geom.c_out, geom.h_out, geom.w_out],
            out,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
            &[input, kernel],
        )
    }

    /// Per-channel normalization of a `[C, H, W]` map over its spatial
    /// positions (population variance), then a per-channel affine.
    pub fn channel_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(Error::Shape(format!("channel norm expects [C,H,W], got {:?}", self.shape(input))));
        };
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Shape(format!("channel norm affine does not match {c} channels")));
        }
        let n = h * w;
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * n];
        let x = self.value(input).data();
        let (gd, bd) = (self.value(gain).data(), self.value(bias).data());
        for ch in 0..c {
            let plane = &x[ch * n..(ch + 1) * n];
            let (mean, var) = tensor::mean_var(plane);
            let is = 1.0 / (var + eps).sqrt();
            inv_std[ch] = is;
            for j in 0..n {
                let v = (plane[j] - mean) * is;
                xhat[ch * n + j] = v;
                out[ch * n + j] = gd[ch] * v + bd[ch];
            }
        }
        self.push(
            vec![c, h, w],
            out,
            Op::ChannelNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[input, gain, bias],
        )
    }

    pub fn layer_norm(&mut self, input: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, n) = self.value(input).rows_cols()?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::Shape(format!("layer norm affine does not match width {n}")));
        }
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        tensor::layer_norm_forward(
            self.value(input).data(),
            rows,
            n,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut xhat,
            &mut inv_std,
            &mut out,
        );
        self.push(
            self.shape(input).to_vec(),
            out,
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[input, gain, bias],
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?.into_data();
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.value(a).rows_cols()?;
        if n == 0 {
            return Err(Error::Shape("log-softmax over an empty dimension".into()));
        }
        let mut out = self.value(a).data().to_vec();
        for r in 0..rows {
            tensor::log_softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let &[r, c] = self.shape(a) else {
            return Err(Error::Shape(format!("column slice expects a matrix, got {:?}", self.shape(a))));
        };
        if start + len > c {
            return Err(Error::Shape(format!("columns {start}..{} out of {c}", start + len)));
        }
        let src = self.value(a).data();
        let out = (0..r).flat_map(|i| src[i * c + start..i * c + start + len].iter().copied()).collect();
        self.push(vec![r, len], out, Op::Columns { input: a, start }, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concatenation of nothing".into()));
        };
        let rows = self.shape(first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match self.shape(p) {
                &[r, c] if r == rows => widths.push(c),
                s => return Err(Error::Shape(format!("cannot concatenate {s:?} with {rows} rows"))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Averages a `[C, H, W]` map over its height and lays the result out as a
    /// `[W, C]` sequence.
    pub fn collapse_height(&mut self, a: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(a) else {
            return Err(Error::Shape(format!("expected [C,H,W], got {:?}", self.shape(a))));
        };
        let src = self.value(a).data();
        let mut out = vec![0.0; w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[x * c + ch] += src[(ch * h + y) * w + x];
                }
            }
        }
        let inv = 1.0 / h as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        self.push(vec![w, c], out, Op::CollapseHeight(a), &[a])
    }

    /// Negative log-likelihood of `label` under per-timestep log-probabilities
    /// `log_probs` of shape `[T, classes]`, class 0 being the blank.
    pub fn ctc_loss(&mut self, log_probs: Var, label: &[u32]) -> Result<Var> {
        let &[t, k] = self.shape(log_probs) else {
            return Err(Error::Shape(format!("ctc expects [T, classes], got {:?}", self.shape(log_probs))));
        };
        let (loss, dloss) = ctc::forward_backward(self.value(log_probs).data(), t, k, label)?;
        self.push(
            vec![],
            vec![loss],
            Op::Ctc {
                input: log_probs,
                dloss,
            },
            &[log_probs],
        )
    }

    /// Populates the gradient of every differentiable node with respect to
    /// the scalar `loss`. Differentiable nodes that `loss` does not depend on
    /// end up with an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract("loss does not depend on any differentiable input".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                node.value.grad = Some(g.unwrap_or_else(|| vec![0.0; node.value.len()]));
            } else {
                node.value.grad = None;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = tensor::matmul_dims(self.shape(*a), self.shape(*b)).expect("checked in forward");
                if self.requires_grad(*a) {
                    let buf = self.grad_buf(*a, grads);
                    tensor::gemm(m, n, k, g, false, self.value(*b).data(), true, buf, true);
                }
                if self.requires_grad(*b) {
                    let buf = self.grad_buf(*b, grads);
                    tensor::gemm(k, m, n, self.value(*a).data(), true, g, false, buf, true);
                }
            }
            Op::Transpose(a) => {
                let &[r, c] = self.shape(*a) else { unreachable!() };
                let buf = self.grad_buf(*a, grads);
                for i in 0..r {
                    for j in 0..c {
                        buf[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |buf| add_into(buf, g));
                self.accumulate(*b, grads, |buf| add_into(buf, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(*a, grads, |buf| {
                    for ((d, gi), bi) in buf.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(*b, grads, |buf| {
                    for ((d, gi), ai) in buf.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(*a, grads, |buf| {
                for (d, gi) in buf.iter_mut().zip(g) {
                    *d += gi * c;
                }
            }),
            Op::AddRowBias(a, bias) => {
                self.accumulate(*a, grads, |buf| add_into(buf, g));
                let n = self.value(*bias).len();
                self.accumulate(*bias, grads, |buf| {
                    for row in g.chunks(n) {
                        add_into(buf, row);
                    }
                });
            }
            Op::AddChannelBias(a, bias) => {
                self.accumulate(*a, grads, |buf| add_into(buf, g));
                let plane = g.len() / self.value(*bias).len();
                self.accumulate(*bias, grads, |buf| {
                    for (d, p) in buf.iter_mut().zip(g.chunks(plane)) {
                        *d += p.iter().sum::<f64>();
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(*a, grads, |buf| {
                    for ((d, gi), xi) in buf.iter_mut().zip(g).zip(x) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => self.accumulate(*a, grads, |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let s = g[0] / self.value(*a).len() as f64;
                self.accumulate(*a, grads, |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (co, kk, sp) = (geom.c_out, geom.col_rows(), geom.out_spatial());
                if self.requires_grad(*kernel) {
                    let buf = self.grad_buf(*kernel, grads);
                    tensor::gemm(co, sp, kk, g, false, cols, true, buf, true);
                }
                if self.requires_grad(*input) {
                    let w = self.value(*kernel).data();
                    if geom.is_pointwise() {
                        let buf = self.grad_buf(*input, grads);
                        tensor::gemm(kk, co, sp, w, true, g, false, buf, true);
                    } else {
                        let mut dcols = vec![0.0; kk * sp];
                        tensor::gemm(kk, co, sp, w, true, g, false, &mut dcols, false);
                        let buf = self.grad_buf(*input, grads);
                        tensor::col2im(geom, &dcols, buf);
                    }
                }
            }
            Op::ChannelNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = inv_std.len();
                let n = xhat.len() / c;
                self.norm_backward(*input, *gain, *bias, xhat, inv_std, c, n, g, grads, true);
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let rows = inv_std.len();
                let n = xhat.len() / rows;
                self.norm_backward(*input, *gain, *bias, xhat, inv_std, rows, n, g, grads, false);
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                self.accumulate(*a, grads, |buf| {
                    for ((d, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                self.accumulate(*a, grads, |buf| {
                    for ((d, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let total: f64 = gr.iter().sum();
                        for j in 0..n {
                            d[j] += gr[j] - yr[j].exp() * total;
                        }
                    }
                });
            }
            Op::Columns { input, start } => {
                let c = self.shape(*input)[1];
                let len = node.value.shape()[1];
                self.accumulate(*input, grads, |buf| {
                    for (i, gr) in g.chunks(len).enumerate() {
                        add_into(&mut buf[i * c + start..i * c + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(p, grads, |buf| {
                        for (i, d) in buf.chunks_mut(w).enumerate() {
                            add_into(d, &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::CollapseHeight(a) => {
                let &[c, h, w] = self.shape(*a) else { unreachable!() };
                let inv = 1.0 / h as f64;
                self.accumulate(*a, grads, |buf| {
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                buf[(ch * h + y) * w + x] += g[x * c + ch] * inv;
                            }
                        }
                    }
                });
            }
            Op::Ctc { input, dloss } => self.accumulate(*input, grads, |buf| {
                for (d, v) in buf.iter_mut().zip(dloss) {
                    *d += g[0] * v;
                }
            }),
        }
    }

    /// Shared VJP for channel and layer normalization. `groups` rows of `n`
    /// values were normalized independently. Channel norm has one affine slot
    /// per row, layer norm one per column.
    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        input: Var,
        gain: Var,
        bias: Var,
        xhat: &[f64],
        inv_std: &[f64],
        groups: usize,
        n: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        per_row_affine: bool,
    ) {
        let gv = self.value(gain).data();
        let gain_at = |r: usize, j: usize| if per_row_affine { gv[r] } else { gv[j] };
        self.accumulate(gain, grads, |buf| {
            for r in 0..groups {
                for j in 0..n {
                    let k = r * n + j;
                    let slot = if per_row_affine { r } else { j };
                    buf[slot] += g[k] * xhat[k];
                }
            }
        });
        self.accumulate(bias, grads, |buf| {
            for r in 0..groups {
                for j in 0..n {
                    let slot = if per_row_affine { r } else { j };
                    buf[slot] += g[r * n + j];
                }
            }
        });
        self.accumulate(input, grads, |buf| {
            let nf = n as f64;
            let mut dxhat = vec![0.0; n];
            for r in 0..groups {
                let (mut s1, mut s2) = (0.0, 0.0);
                for j in 0..n {
                    let k = r * n + j;
                    dxhat[j] = g[k] * gain_at(r, j);
                    s1 += dxhat[j];
                    s2 += dxhat[j] * xhat[k];
                }
                let is = inv_std[r];
                for j in 0..n {
                    let k = r * n + j;
                    buf[k] += is / nf * (nf * dxhat[j] - s1 - xhat[k] * s2);
                }
            }
        });
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> &'g mut [f64] {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if self.requires_grad(v) {
            f(self.grad_buf(v, grads));
        }
    }

    /// Adds `scale * grad` of every trainable parameter leaf into the store's
    /// gradient buffers. A parameter loaded more than once contributes once
    /// per load.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore, scale: f64) -> Result<()> {
        for node in &self.nodes {
            let Some(id) = node.param else { continue };
            let g = node
                .value
                .grad
                .as_ref()
                .ok_or_else(|| Error::Contract("accumulating parameter grads before backward".into()))?;
            store.accumulate_grad(id, g, scale)?;
        }
        Ok(())
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddChannelBias(..) => "add_channel_bias",
        Op::Relu(_) => "relu",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Conv2d { .. } => "conv2d",
        Op::ChannelNorm { .. } => "channel_norm",
        Op::LayerNorm { .. } => "layer_norm",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::LogSoftmaxRows(_) => "log_softmax_rows",
        Op::Columns { .. } => "columns",
        Op::ConcatCols(_) => "concat_cols",
        Op::CollapseHeight(_) => "collapse_height",
        Op::Ctc { .. } => "ctc_loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0).with_grad());
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new([2, 3], vec![0.3, -1.0, 2.0, 0.0, 0.5, 4.0]).unwrap().with_grad());
        let s = g.softmax_rows(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_grad());
        let unused = g.leaf(Tensor::zeros([3]).with_grad());
        let l = g.scale(x, 4.0).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0]);
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn constants_are_not_recorded_for_grad() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let c = g.add(a, b).unwrap();
        assert!(!g.requires_grad(c));
        assert!(matches!(g.backward(c), Err(Error::Contract(_))));
    }

    #[test]
    fn inference_graph_ignores_grad_flags() {
        let mut g = Graph::inference();
        let x = g.leaf(Tensor::scalar(1.0).with_grad());
        assert!(!g.requires_grad(x));
    }
}
