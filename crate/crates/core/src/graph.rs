//! Reverse-mode automatic differentiation on [`Tensor`] values.
//!
//! A `Graph` is a flat tape of nodes. Forward construction stores every
//! intermediate value; [`Graph::backward`] sweeps the tape once and returns
//! accumulated gradients for all nodes. The op set is exactly what the
//! radiance field, volume renderer, discriminator and losses need; nothing
//! here is generic machinery beyond that.
//!
//! Determinism: every backward rule is sequential tensor math except matmul,
//! whose row-parallel kernel is bit-deterministic by construction.

use std::sync::Arc;

use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    /// Elementwise product with a frozen tensor. Used to replay activation
    /// masks as constants in the R1 double-backward pass.
    MulConst(Var, Arc<Tensor>),
    SumAll(Var),
    MeanAll(Var),
    SumAxis1(Var),
    CumsumAxis1(Var),
    ConcatCols(Vec<Var>),
    BroadcastRow(Var),
    AddBiasRow(Var, Var),
    AddBiasCol(Var, Var),
    /// out[i] = idx[i] < 0 ? 0 : in[idx[i]]. Backward scatter-adds.
    Gather(Var, Arc<Vec<i64>>),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexable by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not
    /// depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Like `get` but materializes zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0] {
            Some(ref g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Insert a tensor that participates in forward computation only.
    /// Structurally identical to `leaf`; the name records intent.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(Tensor::scalar(x), Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).mul(self.value(b));
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).scale(-1.0);
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { alpha * x });
        self.push(v, Op::LeakyRelu(a, alpha))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let v = self.value(a).mul(&c);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a))
    }

    /// `[R, S] -> [R]`, summing each row.
    pub fn sum_axis1(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let (r, s) = (t.shape()[0], t.shape()[1]);
        let out: Vec<f64> = t
            .data()
            .chunks_exact(s)
            .map(|row| row.iter().sum())
            .collect();
        debug_assert_eq!(out.len(), r);
        self.push(Tensor::new(vec![r], out), Op::SumAxis1(a))
    }

    /// Inclusive prefix sums along each row of `[R, S]`.
    pub fn cumsum_axis1(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2);
        let (r, s) = (t.shape()[0], t.shape()[1]);
        let mut out = vec![0.0; r * s];
        for i in 0..r {
            let mut acc = 0.0;
            for j in 0..s {
                acc += t.data()[i * s + j];
                out[i * s + j] = acc;
            }
        }
        self.push(Tensor::new(vec![r, s], out), Op::CumsumAxis1(a))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; n * total];
        let mut col0 = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), n, "concat_cols row mismatch");
            let c = t.cols();
            for i in 0..n {
                out[i * total + col0..i * total + col0 + c]
                    .copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            col0 += c;
        }
        self.push(
            Tensor::new(vec![n, total], out),
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// `[D] -> [N, D]`, repeating the row.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 1);
        let d = t.len();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(t.data());
        }
        self.push(Tensor::new(vec![n, d], out), Op::BroadcastRow(a))
    }

    /// `[N, D] + [D]` broadcast over rows.
    pub fn add_bias_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, d) = (ta.rows(), ta.cols());
        assert_eq!(tb.len(), d, "bias length mismatch");
        let mut out = ta.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += tb.data()[j];
            }
        }
        self.push(Tensor::new(vec![n, d], out), Op::AddBiasRow(a, b))
    }

    /// `[C, M] + [C]`: adds `b[c]` to every element of row `c`.
    pub fn add_bias_col(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let (c, m) = (ta.rows(), ta.cols());
        assert_eq!(tb.len(), c, "bias length mismatch");
        let mut out = ta.data().to_vec();
        for i in 0..c {
            for j in 0..m {
                out[i * m + j] += tb.data()[i];
            }
        }
        self.push(Tensor::new(vec![c, m], out), Op::AddBiasCol(a, b))
    }

    /// Generic structural gather. `idx[i] < 0` reads as zero (used for conv
    /// zero-padding). `shape` is the output shape.
    pub fn gather(&mut self, a: Var, idx: Arc<Vec<i64>>, shape: Vec<usize>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), idx.len());
        let src = self.value(a).data();
        let out: Vec<f64> = idx
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        self.push(Tensor::new(shape, out), Op::Gather(a, idx))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshaped(shape);
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every node
    /// the loss depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.value(loss).len(),
            1,
            "backward seed must be a scalar node"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                accum(grads, *a, g.mul(self.value(*b)));
                accum(grads, *b, g.mul(self.value(*a)));
            }
            Op::Neg(a) => accum(grads, *a, g.scale(-1.0)),
            Op::Scale(a, c) => accum(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => accum(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let bt = self.value(*b).transposed();
                accum(grads, *a, g.matmul(&bt));
                let at = self.value(*a).transposed();
                accum(grads, *b, at.matmul(g));
            }
            Op::Sin(a) => accum(grads, *a, g.mul(&self.value(*a).map(f64::cos))),
            Op::Cos(a) => accum(grads, *a, g.mul(&self.value(*a).map(|x| -x.sin()))),
            Op::Exp(a) => accum(grads, *a, g.mul(&node.value)),
            Op::Ln(a) => accum(grads, *a, g.zip(self.value(*a), |gg, x| gg / x)),
            Op::Sqrt(a) => accum(grads, *a, g.zip(&node.value, |gg, y| gg / (2.0 * y))),
            Op::Square(a) => accum(grads, *a, g.zip(self.value(*a), |gg, x| gg * 2.0 * x)),
            Op::Sigmoid(a) => {
                accum(grads, *a, g.zip(&node.value, |gg, y| gg * y * (1.0 - y)));
            }
            Op::Softplus(a) => {
                accum(grads, *a, g.zip(self.value(*a), |gg, x| gg * sigmoid(x)));
            }
            Op::LeakyRelu(a, alpha) => {
                let alpha = *alpha;
                accum(
                    grads,
                    *a,
                    g.zip(
                        self.value(*a),
                        |gg, x| if x > 0.0 { gg } else { gg * alpha },
                    ),
                );
            }
            Op::MulConst(a, c) => accum(grads, *a, g.mul(c)),
            Op::SumAll(a) => {
                let gv = g.item();
                accum(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), gv));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                accum(
                    grads,
                    *a,
                    Tensor::full(self.value(*a).shape().to_vec(), g.item() / n),
                );
            }
            Op::SumAxis1(a) => {
                let t = self.value(*a);
                let (r, s) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; r * s];
                for i in 0..r {
                    let gi = g.data()[i];
                    out[i * s..(i + 1) * s].fill(gi);
                }
                accum(grads, *a, Tensor::new(vec![r, s], out));
            }
            Op::CumsumAxis1(a) => {
                // d/dx_j sum over outputs k>=j: suffix sums of the gradient
                let t = self.value(*a);
                let (r, s) = (t.shape()[0], t.shape()[1]);
                let mut out = vec![0.0; r * s];
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in (0..s).rev() {
                        acc += g.data()[i * s + j];
                        out[i * s + j] = acc;
                    }
                }
                accum(grads, *a, Tensor::new(vec![r, s], out));
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let total = node.value.cols();
                let mut col0 = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let mut part = vec![0.0; n * c];
                    for i in 0..n {
                        part[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + col0..i * total + col0 + c]);
                    }
                    accum(grads, p, Tensor::new(vec![n, c], part));
                    col0 += c;
                }
            }
            Op::BroadcastRow(a) => {
                let d = self.value(*a).len();
                let mut out = vec![0.0; d];
                for row in g.data().chunks_exact(d) {
                    for (o, &gv) in out.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
                accum(grads, *a, Tensor::new(vec![d], out));
            }
            Op::AddBiasRow(a, b) => {
                accum(grads, *a, g.clone());
                let d = g.cols();
                let mut out = vec![0.0; d];
                for row in g.data().chunks_exact(d) {
                    for (o, &gv) in out.iter_mut().zip(row) {
                        *o += gv;
                    }
                }
                accum(grads, *b, Tensor::new(vec![d], out));
            }
            Op::AddBiasCol(a, b) => {
                accum(grads, *a, g.clone());
                let m = g.cols();
                let out: Vec<f64> = g
                    .data()
                    .chunks_exact(m)
                    .map(|row| row.iter().sum())
                    .collect();
                accum(grads, *b, Tensor::new(vec![g.rows()], out));
            }
            Op::Gather(a, idx) => {
                let mut out = vec![0.0; self.value(*a).len()];
                for (k, &i) in idx.iter().enumerate() {
                    if i >= 0 {
                        out[i as usize] += g.data()[k];
                    }
                }
                accum(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), out));
            }
            Op::Reshape(a) => {
                let v = g.clone().reshaped(self.value(*a).shape().to_vec());
                accum(grads, *a, v);
            }
        }
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.axpy(1.0, &t),
        slot @ None => *slot = Some(t),
    }
}

/// 2D convolution over a CHW feature map, built from an im2col gather and
/// a matmul so it inherits exact gradients from the primitive ops.
///
/// `x`: `[C, H, W]`, `kernel`: `[C_out, C*kh*kw]`, `bias`: `[C_out]`.
/// Zero padding `pad`, square kernel `kh = kw = ksize`.
pub fn conv2d(
    g: &mut Graph,
    x: Var,
    kernel: Var,
    bias: Var,
    ksize: usize,
    stride: usize,
    pad: usize,
) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "conv2d input must be CHW");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let kshape = g.value(kernel).shape().to_vec();
    assert_eq!(kshape[1], c * ksize * ksize, "kernel fan-in mismatch");
    let c_out = kshape[0];

    let ho = (h + 2 * pad - ksize) / stride + 1;
    let wo = (w + 2 * pad - ksize) / stride + 1;

    let mut idx = Vec::with_capacity(c * ksize * ksize * ho * wo);
    for ci in 0..c {
        for ki in 0..ksize {
            for kj in 0..ksize {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let ii = (oi * stride + ki) as i64 - pad as i64;
                        let jj = (oj * stride + kj) as i64 - pad as i64;
                        if ii < 0 || jj < 0 || ii >= h as i64 || jj >= w as i64 {
                            idx.push(-1);
                        } else {
                            idx.push((ci * h * w) as i64 + ii * w as i64 + jj);
                        }
                    }
                }
            }
        }
    }
    let cols = g.gather(x, Arc::new(idx), vec![c * ksize * ksize, ho * wo]);
    let out = g.matmul(kernel, cols);
    let out = g.add_bias_col(out, bias);
    g.reshape(out, vec![c_out, ho, wo])
}

/// Nearest-neighbor 2x upsampling of a CHW map.
pub fn upsample2x(g: &mut Graph, x: Var) -> Var {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "upsample2x input must be CHW");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut idx = Vec::with_capacity(c * 4 * h * w);
    for ci in 0..c {
        for i in 0..2 * h {
            for j in 0..2 * w {
                idx.push((ci * h * w + (i / 2) * w + j / 2) as i64);
            }
        }
    }
    g.gather(x, Arc::new(idx), vec![c, 2 * h, 2 * w])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable for large |x|
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
