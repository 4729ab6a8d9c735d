//! Minimal reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] is a vector of nodes; every operation evaluates eagerly at
//! construction time and records what it needs for the backward pass. Node
//! ids are indices into the tape, and since an operation's inputs must exist
//! before the operation itself, ascending id order *is* a topological order:
//! [`Graph::backward`] is a single reverse sweep that visits each node once.
//!
//! Gradients only flow where they matter. A node `needs_grad` iff it is a
//! trainable leaf or has one upstream; everything else (target-branch
//! activations, constants, masks) is skipped entirely during the sweep, which
//! is how the stop-gradient on the EMA target branch is expressed.
//!
//! The op set is exactly what the models here use — notably 2-D convolution,
//! batch normalization in both batch-statistics and fixed-statistics forms,
//! and the matrix exponential, whose backward is the Fréchet derivative
//! identity `grad_A = L(A^T, grad_out)`.

use crate::error::NumericsError;
use crate::linalg::{expm, expm_frechet};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Tape entry: the operation, its eagerly computed value, and any forward
/// byproducts the backward pass (or the trainer, for batch-norm statistics)
/// wants to reuse.
pub struct Node {
    op: Op,
    value: Tensor,
    saved: Vec<Tensor>,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize, len: usize },
    Square(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAbsDiff(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId, stride: usize, pad: usize },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    BatchNormFixed { x: NodeId, gamma: NodeId, beta: NodeId, mean: Tensor, var: Tensor, eps: f64 },
    GlobalAvgPool(NodeId),
    SampleStandardize { x: NodeId },
    RowL2Normalize { x: NodeId },
    DimAffine { x: NodeId, gamma: NodeId, beta: NodeId },
    AddRowVec { x: NodeId, b: NodeId },
    Expm(NodeId),
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to the node's value, if the node
    /// participates in the differentiated subgraph.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Forward byproducts saved by the node (batch-norm batch statistics).
    pub fn saved(&self, id: NodeId) -> &[Tensor] {
        &self.nodes[id].saved
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<Tensor>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, saved, needs_grad });
        self.nodes.len() - 1
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// Non-trainable leaf: inputs, masks, actions, EMA parameters.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, vec![], false)
    }

    /// Trainable leaf: gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, vec![], true)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.add(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, vec![], g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.sub(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, vec![], g)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.mul(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Mul(a, b), v, vec![], g)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.scale(s);
        let g = self.ng(a);
        self.push(Op::Scale(a, s), v, vec![], g)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.nodes[a].value.map(|x| x + s);
        let g = self.ng(a);
        self.push(Op::AddScalar(a), v, vec![], g)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, vec![], g)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.transpose2();
        let g = self.ng(a);
        self.push(Op::Transpose(a), v, vec![], g)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a].value.reshaped(shape);
        let g = self.ng(a);
        self.push(Op::Reshape(a), v, vec![], g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p].value).collect();
        let v = Tensor::concat_rows(&tensors);
        let g = parts.iter().any(|&p| self.ng(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, vec![], g)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x].value.slice_rows(start, len);
        let g = self.ng(x);
        self.push(Op::SliceRows { x, start, len }, v, vec![], g)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x * x);
        let g = self.ng(a);
        self.push(Op::Square(a), v, vec![], g)
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::sqrt);
        let g = self.ng(a);
        self.push(Op::Sqrt(a), v, vec![], g)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(|x| x.max(0.0));
        let g = self.ng(a);
        self.push(Op::Relu(a), v, vec![], g)
    }

    /// GeLU in its tanh parameterization
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`,
    /// which has a closed-form derivative (no erf in the standard library).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(gelu_scalar);
        let g = self.ng(a);
        self.push(Op::Gelu(a), v, vec![], g)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(sigmoid_scalar);
        let g = self.ng(a);
        self.push(Op::Sigmoid(a), v, vec![], g)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.map(f64::tanh);
        let g = self.ng(a);
        self.push(Op::Tanh(a), v, vec![], g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a].value.sum());
        let g = self.ng(a);
        self.push(Op::Sum(a), v, vec![], g)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.numel() as f64;
        let v = Tensor::scalar(self.nodes[a].value.sum() / n);
        let g = self.ng(a);
        self.push(Op::Mean(a), v, vec![], g)
    }

    /// Scalar `sum |a - b|` — the elementwise L1 distance used by the
    /// prediction losses. Subgradient 0 at ties.
    pub fn sum_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let g = self.ng(a) || self.ng(b);
        self.push(Op::SumAbsDiff(a, b), Tensor::scalar(s), vec![], g)
    }

    /// 2-D convolution: `x` is (N, Cin, H, W), `w` is (Cout, Cin, kh, kw),
    /// zero padding `pad` on both spatial axes.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> NodeId {
        let v = conv2d_forward(&self.nodes[x].value, &self.nodes[w].value, stride, pad);
        let g = self.ng(x) || self.ng(w);
        self.push(Op::Conv2d { x, w, stride, pad }, v, vec![], g)
    }

    /// Batch normalization over (N, H, W) per channel, using *batch*
    /// statistics. Saves `[mean, biased_var]` for the backward pass and for
    /// the trainer's running-statistics update.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let (v, mean, var) = batch_norm_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        );
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::BatchNorm { x, gamma, beta, eps }, v, vec![mean, var], g)
    }

    /// Batch normalization with *fixed* (running) statistics — evaluation
    /// mode. `mean`/`var` are plain tensors, not graph nodes: they are
    /// buffers, never differentiated.
    pub fn batch_norm_fixed(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor,
        var: Tensor,
        eps: f64,
    ) -> NodeId {
        let v = batch_norm_fixed_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            &mean,
            &var,
            eps,
        );
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::BatchNormFixed { x, gamma, beta, mean, var, eps }, v, vec![], g)
    }

    /// Mean over the spatial axes: (N, C, H, W) -> (N, C).
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[x].value.dims4();
        let xd = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[n, c]);
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                out.data_mut()[i * c + ch] = xd[base..base + hw].iter().sum::<f64>() / hw as f64;
            }
        }
        let g = self.ng(x);
        self.push(Op::GlobalAvgPool(x), out, vec![], g)
    }

    /// Standardize each row of (N, D) to mean 0, variance 1 (biased), with
    /// `eps` inside the square root. Saves per-row `inv_std`.
    pub fn sample_standardize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (n, d) = self.nodes[x].value.dims2();
        let xd = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[n, d]);
        let mut inv_std = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.data_mut()[i] = inv;
            for j in 0..d {
                out.data_mut()[i * d + j] = (row[j] - mu) * inv;
            }
        }
        let g = self.ng(x);
        self.push(Op::SampleStandardize { x }, out, vec![inv_std], g)
    }

    /// Scale each row of (N, D) to (soft) unit Euclidean norm:
    /// `x / sqrt(||x||^2 + eps)`.
    pub fn row_l2_normalize(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (n, d) = self.nodes[x].value.dims2();
        let xd = self.nodes[x].value.data();
        let mut out = Tensor::zeros(&[n, d]);
        let mut inv_norm = Tensor::zeros(&[n]);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let inv = 1.0 / (row.iter().map(|&v| v * v).sum::<f64>() + eps).sqrt();
            inv_norm.data_mut()[i] = inv;
            for j in 0..d {
                out.data_mut()[i * d + j] = row[j] * inv;
            }
        }
        let g = self.ng(x);
        self.push(Op::RowL2Normalize { x }, out, vec![inv_norm], g)
    }

    /// Per-column affine on (N, D): `out[i, j] = x[i, j] * gamma[j] + beta[j]`.
    pub fn dim_affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let (n, d) = self.nodes[x].value.dims2();
        let gm = &self.nodes[gamma].value;
        let bt = &self.nodes[beta].value;
        assert_eq!(gm.numel(), d, "dim_affine gamma length");
        assert_eq!(bt.numel(), d, "dim_affine beta length");
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] =
                    self.nodes[x].value.data()[i * d + j] * gm.data()[j] + bt.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::DimAffine { x, gamma, beta }, out, vec![], g)
    }

    /// Broadcast row-vector addition on (N, D): `out[i, j] = x[i, j] + b[j]`.
    pub fn add_row_vec(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let (n, d) = self.nodes[x].value.dims2();
        let bv = &self.nodes[b].value;
        assert_eq!(bv.numel(), d, "add_row_vec bias length");
        let mut out = Tensor::zeros(&[n, d]);
        for i in 0..n {
            for j in 0..d {
                out.data_mut()[i * d + j] = self.nodes[x].value.data()[i * d + j] + bv.data()[j];
            }
        }
        let g = self.ng(x) || self.ng(b);
        self.push(Op::AddRowVec { x, b }, out, vec![], g)
    }

    /// Matrix exponential of a square matrix node. Backward is the Fréchet
    /// derivative in the upstream direction, transposed appropriately:
    /// `grad_A = L(A^T, grad_out)`.
    ///
    /// Panics if the exponential fails (non-square or non-finite input) —
    /// by the time a generator matrix reaches the graph its shape is fixed
    /// and finiteness is enforced by the trainer's loss checks.
    pub fn expm(&mut self, a: NodeId) -> NodeId {
        let v = expm(&self.nodes[a].value).expect("matrix exponential in graph");
        let g = self.ng(a);
        self.push(Op::Expm(a), v, vec![], g)
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients; only
    /// nodes with `needs_grad` receive one.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, NumericsError> {
        let rv = &self.nodes[root].value;
        if rv.numel() != 1 {
            return Err(NumericsError::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None; // constants never expose gradients
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Accumulate `delta` into the pending gradient of `id` (skipped when the
    /// node does not participate in differentiation).
    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut grads[id] {
            Some(t) => t.axpy(1.0, &delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, id: NodeId, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.mul(&self.nodes[*b].value));
                self.acc(grads, *b, g.mul(&self.nodes[*a].value));
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.ng(*a) {
                    self.acc(grads, *a, g.matmul(&bv.transpose2()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, av.transpose2().matmul(g));
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose2()),
            Op::Reshape(a) => {
                self.acc(grads, *a, g.reshaped(self.nodes[*a].value.shape()));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = self.nodes[p].value.dims2().0;
                    if self.ng(p) {
                        self.acc(grads, p, g.slice_rows(start, rows));
                    }
                    start += rows;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.nodes[*x].value.dims2();
                let mut dx = Tensor::zeros(&[r, c]);
                dx.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                self.acc(grads, *x, dx);
            }
            Op::Square(a) => {
                let d = self.nodes[*a].value.zip_map(g, |x, gg| 2.0 * x * gg);
                self.acc(grads, *a, d);
            }
            Op::Sqrt(a) => {
                // d sqrt(x) = g / (2 sqrt(x)); node value is sqrt(x).
                let d = self.nodes[id].value.zip_map(g, |s, gg| gg / (2.0 * s));
                self.acc(grads, *a, d);
            }
            Op::Relu(a) => {
                let d = self.nodes[*a].value.zip_map(g, |x, gg| if x > 0.0 { gg } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let d = self.nodes[*a].value.zip_map(g, |x, gg| gg * gelu_deriv(x));
                self.acc(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = self.nodes[id].value.zip_map(g, |s, gg| gg * s * (1.0 - s));
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = self.nodes[id].value.zip_map(g, |t, gg| gg * (1.0 - t * t));
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let gs = g.item();
                self.acc(grads, *a, Tensor::full(self.nodes[*a].value.shape(), gs));
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.numel() as f64;
                self.acc(grads, *a, Tensor::full(self.nodes[*a].value.shape(), g.item() / n));
            }
            Op::SumAbsDiff(a, b) => {
                let gs = g.item();
                let d = self.nodes[*a].value.zip_map(&self.nodes[*b].value, |x, y| {
                    gs * (x - y).signum() * if x == y { 0.0 } else { 1.0 }
                });
                if self.ng(*a) {
                    self.acc(grads, *a, d.clone());
                }
                if self.ng(*b) {
                    self.acc(grads, *b, d.scale(-1.0));
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (dx, dw) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, eps } => {
                let (dx, dgamma, dbeta) = batch_norm_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*gamma].value,
                    &self.nodes[id].saved[0],
                    &self.nodes[id].saved[1],
                    *eps,
                    g,
                );
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::BatchNormFixed { x, gamma, beta, mean, var, eps } => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let xd = self.nodes[*x].value.data();
                let gm = self.nodes[*gamma].value.data();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let mut dgamma = Tensor::zeros(&[c]);
                let mut dbeta = Tensor::zeros(&[c]);
                let hw = h * w;
                for i in 0..n {
                    for ch in 0..c {
                        let inv = 1.0 / (var.data()[ch] + eps).sqrt();
                        let mu = mean.data()[ch];
                        let base = (i * c + ch) * hw;
                        for k in 0..hw {
                            let gg = g.data()[base + k];
                            let xhat = (xd[base + k] - mu) * inv;
                            dx.data_mut()[base + k] = gg * gm[ch] * inv;
                            dgamma.data_mut()[ch] += gg * xhat;
                            dbeta.data_mut()[ch] += gg;
                        }
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.nodes[*x].value.dims4();
                let hw = (h * w) as f64;
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for i in 0..n {
                    for ch in 0..c {
                        let gg = g.data()[i * c + ch] / hw;
                        let base = (i * c + ch) * h * w;
                        for k in 0..h * w {
                            dx.data_mut()[base + k] = gg;
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::SampleStandardize { x, .. } => {
                let (n, d) = self.nodes[*x].value.dims2();
                let xhat = self.nodes[id].value.data();
                let inv_std = self.nodes[id].saved[0].data();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let xr = &xhat[i * d..(i + 1) * d];
                    let mg = gr.iter().sum::<f64>() / d as f64;
                    let mgx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = inv_std[i] * (gr[j] - mg - xr[j] * mgx);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::RowL2Normalize { x, .. } => {
                let (n, d) = self.nodes[*x].value.dims2();
                let xd = self.nodes[*x].value.data();
                let inv_norm = self.nodes[id].saved[0].data();
                let mut dx = Tensor::zeros(&[n, d]);
                for i in 0..n {
                    let gr = &g.data()[i * d..(i + 1) * d];
                    let xr = &xd[i * d..(i + 1) * d];
                    let inv = inv_norm[i];
                    let dot = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<f64>();
                    for j in 0..d {
                        dx.data_mut()[i * d + j] = inv * gr[j] - xr[j] * dot * inv * inv * inv;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::DimAffine { x, gamma, beta } => {
                let (n, d) = self.nodes[*x].value.dims2();
                let gm = self.nodes[*gamma].value.data();
                let xd = self.nodes[*x].value.data();
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, d]);
                    for i in 0..n {
                        for j in 0..d {
                            dx.data_mut()[i * d + j] = g.data()[i * d + j] * gm[j];
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                let mut dgamma = Tensor::zeros(self.nodes[*gamma].value.shape());
                let mut dbeta = Tensor::zeros(self.nodes[*beta].value.shape());
                for i in 0..n {
                    for j in 0..d {
                        dgamma.data_mut()[j] += g.data()[i * d + j] * xd[i * d + j];
                        dbeta.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                self.acc(grads, *gamma, dgamma);
                self.acc(grads, *beta, dbeta);
            }
            Op::AddRowVec { x, b } => {
                let (n, d) = self.nodes[*x].value.dims2();
                self.acc(grads, *x, g.clone());
                // The bias may be a [d] vector or a (1, d) matrix; its
                // gradient must come back in the same shape.
                let mut db = Tensor::zeros(self.nodes[*b].value.shape());
                for i in 0..n {
                    for j in 0..d {
                        db.data_mut()[j] += g.data()[i * d + j];
                    }
                }
                self.acc(grads, *b, db);
            }
            Op::Expm(a) => {
                let at = self.nodes[*a].value.transpose2();
                let da = expm_frechet(&at, g).expect("Frechet derivative in expm backward");
                self.acc(grads, *a, da);
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Inclusive output range `[lo, hi)` over which `o*stride + k - pad` stays in
/// `[0, extent)`, clamped to `[0, out_extent)`.
fn valid_range(extent: usize, out_extent: usize, k: usize, pad: usize, stride: usize) -> (usize, usize) {
    let lo_num = pad as i64 - k as i64;
    let lo = if lo_num <= 0 { 0 } else { (lo_num as usize).div_ceil(stride) };
    let hi_num = extent as i64 - 1 - k as i64 + pad as i64;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out_extent);
    (lo.min(hi), hi)
}

fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv2d channel mismatch: input {cin}, kernel {wcin}");
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let xd = x.data();
    let wdat = w.data();
    let od = out.data_mut();
    for ni in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    let (ho_lo, ho_hi) = valid_range(h, ho, ki, pad, stride);
                    for kj in 0..kw {
                        let (wo_lo, wo_hi) = valid_range(wd, wo, kj, pad, stride);
                        let wv = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                        for oi in ho_lo..ho_hi {
                            let ii = oi * stride + ki - pad;
                            let xbase = ((ni * cin + ci) * h + ii) * wd;
                            let obase = ((ni * cout + co) * ho + oi) * wo;
                            for oj in wo_lo..wo_hi {
                                od[obase + oj] += wv * xd[xbase + oj * stride + kj - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, cin, h, wd) = x.dims4();
    let (cout, _, kh, kw) = w.dims4();
    let (_, _, ho, wo) = g.dims4();
    let xd = x.data();
    let wdat = w.data();
    let gd = g.data();
    let mut dx = if want_dx { Some(Tensor::zeros(&[n, cin, h, wd])) } else { None };
    let mut dw = if want_dw { Some(Tensor::zeros(&[cout, cin, kh, kw])) } else { None };
    for ni in 0..n {
        for co in 0..cout {
            for ci in 0..cin {
                for ki in 0..kh {
                    let (ho_lo, ho_hi) = valid_range(h, ho, ki, pad, stride);
                    for kj in 0..kw {
                        let (wo_lo, wo_hi) = valid_range(wd, wo, kj, pad, stride);
                        let widx = ((co * cin + ci) * kh + ki) * kw + kj;
                        let wv = wdat[widx];
                        let mut wacc = 0.0;
                        for oi in ho_lo..ho_hi {
                            let ii = oi * stride + ki - pad;
                            let xbase = ((ni * cin + ci) * h + ii) * wd;
                            let gbase = ((ni * cout + co) * ho + oi) * wo;
                            if let Some(dx) = dx.as_mut() {
                                let dxd = dx.data_mut();
                                for oj in wo_lo..wo_hi {
                                    dxd[xbase + oj * stride + kj - pad] += wv * gd[gbase + oj];
                                }
                            }
                            if want_dw {
                                for oj in wo_lo..wo_hi {
                                    wacc += gd[gbase + oj] * xd[xbase + oj * stride + kj - pad];
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw.data_mut()[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

fn batch_norm_forward(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(gamma.numel(), c, "batch_norm gamma length");
    assert_eq!(beta.numel(), c, "batch_norm beta length");
    let m = (n * h * w) as f64;
    let hw = h * w;
    let xd = x.data();
    let mut mean = Tensor::zeros(&[c]);
    let mut var = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mut s = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            s += xd[base..base + hw].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            v += xd[base..base + hw].iter().map(|&t| (t - mu) * (t - mu)).sum::<f64>();
        }
        mean.data_mut()[ch] = mu;
        var.data_mut()[ch] = v / m;
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let mu = mean.data()[ch];
            let gm = gamma.data()[ch];
            let bt = beta.data()[ch];
            let base = (i * c + ch) * hw;
            for k in 0..hw {
                out.data_mut()[base + k] = (xd[base + k] - mu) * inv * gm + bt;
            }
        }
    }
    (out, mean, var)
}

fn batch_norm_fixed_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
) -> Tensor {
    let (n, c, h, w) = x.dims4();
    assert_eq!(mean.numel(), c, "batch_norm_fixed mean length");
    assert_eq!(var.numel(), c, "batch_norm_fixed var length");
    let hw = h * w;
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let inv = 1.0 / (var.data()[ch] + eps).sqrt();
            let scale = gamma.data()[ch] * inv;
            let shift = beta.data()[ch] - mean.data()[ch] * scale;
            let base = (i * c + ch) * hw;
            for k in 0..hw {
                out.data_mut()[base + k] = xd[base + k] * scale + shift;
            }
        }
    }
    out
}

fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f64,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = x.dims4();
    let m = (n * h * w) as f64;
    let hw = h * w;
    let xd = x.data();
    let gd = g.data();
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ch in 0..c {
        let mu = mean.data()[ch];
        let inv = 1.0 / (var.data()[ch] + eps).sqrt();
        let gm = gamma.data()[ch];
        // First pass: sums of g and g * xhat over the channel.
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for k in 0..hw {
                let xhat = (xd[base + k] - mu) * inv;
                sum_g += gd[base + k];
                sum_gx += gd[base + k] * xhat;
            }
        }
        dgamma.data_mut()[ch] = sum_gx;
        dbeta.data_mut()[ch] = sum_g;
        // dx = gamma * inv / m * (m g - sum_g - xhat * sum_gx)
        let a = gm * inv / m;
        for i in 0..n {
            let base = (i * c + ch) * hw;
            for k in 0..hw {
                let xhat = (xd[base + k] - mu) * inv;
                dx.data_mut()[base + k] = a * (m * gd[base + k] - sum_g - xhat * sum_gx);
            }
        }
    }
    (dx, dgamma, dbeta)
}
