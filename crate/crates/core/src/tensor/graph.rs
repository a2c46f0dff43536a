//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every value produced through a [`Graph`] is a node addressed by a [`Var`].
//! A node carries an op record only when at least one of its inputs requires
//! a gradient; otherwise it is stored as a constant. Insertion order is a
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::gemm::gemm;
use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::ssm::{self, ScanCache, ScanDims};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Which axes a normalization layer pools its statistics over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per channel over (batch, height, width).
    Batch,
    /// Per (sample, channel) over (height, width).
    Instance,
}

#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a> {
    /// Use statistics of the current input.
    Train,
    /// Use stored per-channel running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

enum Op {
    Leaf,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    Div(Bcast),
    AddScalar,
    MulScalar(f64),
    Neg,
    Exp,
    Log,
    Sigmoid,
    Relu,
    Silu,
    Softplus,
    Square,
    Clamp { lo: f64, hi: f64 },
    SumAll,
    MeanAll,
    RowSum,
    Reshape,
    Permute { perm: Vec<usize> },
    Concat { axis: usize, sizes: Vec<usize> },
    GatherLast { index: Rc<[usize]> },
    MatMul { m: usize, k: usize, n: usize },
    Conv2d { geom: ConvGeom, has_bias: bool },
    DwConv1d { dims: (usize, usize, usize), k: usize, has_bias: bool },
    Norm(NormCache),
    Resize { planes: usize, hw: (usize, usize), ohw: (usize, usize) },
    SelectiveScan { dims: ScanDims, cache: ScanCache },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Div(_) => "div",
            Op::AddScalar => "add_scalar",
            Op::MulScalar(_) => "mul_scalar",
            Op::Neg => "neg",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Silu => "silu",
            Op::Softplus => "softplus",
            Op::Square => "square",
            Op::Clamp { .. } => "clamp",
            Op::SumAll => "sum",
            Op::MeanAll => "mean",
            Op::RowSum => "row_sum",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Concat { .. } => "concat",
            Op::GatherLast { .. } => "gather",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::DwConv1d { .. } => "depthwise_conv1d",
            Op::Norm(_) => "norm",
            Op::Resize { .. } => "resize_bilinear",
            Op::SelectiveScan { .. } => "selective_scan",
        }
    }
}

/// Broadcast index maps; `None` means the operand already has the output shape.
struct Bcast {
    a: Option<Vec<usize>>,
    b: Option<Vec<usize>>,
}

struct NormCache {
    kind: NormKind,
    train: bool,
    dims: (usize, usize, usize), // batch, channels, spatial
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl NormCache {
    fn group(&self, b: usize, c: usize) -> usize {
        match self.kind {
            NormKind::Batch => c,
            NormKind::Instance => b * self.dims.1 + c,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes carrying an op record (i.e. reachable by backward).
    pub fn recorded_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let grad = requires_grad.then(|| Tensor::zeros(value.shape()));
        self.push_node(Node {
            value,
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
            grad,
        })
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.node(v).grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.data_mut().fill(0.0);
            }
        }
    }

    /// Whether `v` belongs to this graph.
    pub fn owns(&self, v: Var) -> bool {
        v.graph == self.id && v.index < self.nodes.len()
    }

    fn node(&self, v: Var) -> &Node {
        assert!(self.owns(v), "variable from a different graph");
        &self.nodes[v.index]
    }

    fn check(&self, v: Var) -> Result<usize> {
        if self.owns(v) {
            Ok(v.index)
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn push_node(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push_op(&mut self, op: Op, inputs: &[usize], value: Tensor) -> Result<Var> {
        if cfg!(debug_assertions)
            && !value.is_finite()
            && inputs.iter().all(|&i| self.nodes[i].value.is_finite())
        {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let (op, inputs) = if requires_grad {
            (op, inputs.to_vec())
        } else {
            (Op::Leaf, Vec::new())
        };
        Ok(self.push_node(Node {
            value,
            op,
            inputs,
            requires_grad,
            grad: None,
        }))
    }

    // ---------------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------------

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Bcast) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (value, bc) = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            (
                Tensor::from_parts(va.shape().to_vec(), data),
                Bcast { a: None, b: None },
            )
        } else {
            let out = kernels::broadcast_shape(va.shape(), vb.shape())
                .ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
            let ma = kernels::broadcast_map(va.shape(), &out);
            let mb = kernels::broadcast_map(vb.shape(), &out);
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect();
            let ma = (va.shape() != out.as_slice()).then_some(ma);
            let mb = (vb.shape() != out.as_slice()).then_some(mb);
            (Tensor::from_parts(out, data), Bcast { a: ma, b: mb })
        };
        self.push_op(make(bc), &[ia, ib], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, op: Op, x: Var, f: impl Fn(f64) -> f64) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let value = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&t| f(t)).collect());
        self.push_op(op, &[i], value)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Op::AddScalar, x, |t| t + s)
    }

    pub fn mul_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(Op::MulScalar(s), x, |t| t * s)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Neg, x, |t| -t)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Exp, x, f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Log, x, f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, x, sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Relu, x, |t| t.max(0.0))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Silu, x, |t| t * sigmoid(t))
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Softplus, x, softplus)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Op::Square, x, |t| t * t)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::invalid("clamp", format!("lo {lo} > hi {hi}")));
        }
        self.unary(Op::Clamp { lo, hi }, x, |t| t.clamp(lo, hi))
    }

    // ---------------------------------------------------------------------
    // Reductions and layout
    // ---------------------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let s = self.nodes[i].value.data().iter().sum();
        self.push_op(Op::SumAll, &[i], Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push_op(Op::MeanAll, &[i], Tensor::scalar(s))
    }

    /// Sums all axes but the leading one: `[r, ...] -> [r]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let rows = v.shape()[0];
        let width = v.len() / rows;
        let data = v.data().chunks_exact(width).map(|c| c.iter().sum()).collect();
        self.push_op(Op::RowSum, &[i], Tensor::from_parts(vec![rows], data))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.nodes[i].value.clone().reshape(shape)?;
        self.push_op(Op::Reshape, &[i], v)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let rank = v.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", v.shape(), perm));
        }
        let (shape, data) = permute_data(v.shape(), v.data(), perm);
        self.push_op(Op::Permute { perm: perm.to_vec() }, &[i], Tensor::from_parts(shape, data))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let first = self.nodes[idx[0]].value.shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut sizes = Vec::with_capacity(xs.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &sz) in idx.iter().zip(&sizes) {
                let src = self.nodes[i].value.data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push_op(Op::Concat { axis, sizes }, &idx, Tensor::from_parts(shape, data))
    }

    /// `out[..., j] = x[..., index[j]]` along the last axis.
    pub fn gather_last(&mut self, x: Var, index: Rc<[usize]>) -> Result<Var> {
        let i = self.check(x)?;
        let v = &self.nodes[i].value;
        let len = *v.shape().last().unwrap();
        if let Some(&bad) = index.iter().find(|&&j| j >= len) {
            return Err(Error::invalid("gather", format!("index {bad} out of range {len}")));
        }
        let rows = v.len() / len;
        let mut data = Vec::with_capacity(rows * index.len());
        for r in 0..rows {
            let src = &v.data()[r * len..(r + 1) * len];
            data.extend(index.iter().map(|&j| src[j]));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = index.len();
        self.push_op(Op::GatherLast { index }, &[i], Tensor::from_parts(shape, data))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.nodes[ia].value.data(),
            false,
            self.nodes[ib].value.data(),
            false,
            0.0,
            &mut out,
        );
        self.push_op(Op::MatMul { m, k, n }, &[ia, ib], Tensor::from_parts(vec![m, n], out))
    }

    // ---------------------------------------------------------------------
    // Network ops
    // ---------------------------------------------------------------------

    /// 2-D convolution of `(B, Cin, H, W)` by `(Cout, Cin, k, k)` with optional `(Cout)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2] != sw[3] || stride == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let k = sw[2];
        if sx[2] + 2 * pad < k || sx[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", sx, sw));
        }
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [sw[0]] {
                return Err(Error::shape("conv2d", sw, sb));
            }
        }
        let geom = ConvGeom {
            batch: sx[0],
            cin: sx[1],
            h: sx[2],
            w: sx[3],
            cout: sw[0],
            k,
            stride,
            pad,
            oh: (sx[2] + 2 * pad - k) / stride + 1,
            ow: (sx[3] + 2 * pad - k) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[ix].value.data(),
            self.nodes[iw].value.data(),
            ib.map(|i| self.nodes[i].value.data()),
        );
        let value = Tensor::from_parts(vec![geom.batch, geom.cout, geom.oh, geom.ow], out);
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        self.push_op(
            Op::Conv2d {
                geom,
                has_bias: ib.is_some(),
            },
            &inputs,
            value,
        )
    }

    /// Depthwise "same" convolution of `(B, C, L)` along `L` by `(C, k)`, `k` odd.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let ib = bias.map(|b| self.check(b)).transpose()?;
        let (sx, sw) = (self.nodes[ix].value.shape(), self.nodes[iw].value.shape());
        if sx.len() != 3 || sw.len() != 2 || sx[1] != sw[0] || sw[1] % 2 == 0 {
            return Err(Error::shape("depthwise_conv1d", sx, sw));
        }
        if let Some(ib) = ib {
            let sb = self.nodes[ib].value.shape();
            if sb != [sw[0]] {
                return Err(Error::shape("depthwise_conv1d", sw, sb));
            }
        }
        let dims = (sx[0], sx[1], sx[2]);
        let k = sw[1];
        let out = kernels::depthwise_conv1d_forward(
            self.nodes[ix].value.data(),
            dims,
            self.nodes[iw].value.data(),
            k,
            ib.map(|i| self.nodes[i].value.data()),
        );
        let value = Tensor::from_parts(sx.to_vec(), out);
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        self.push_op(
            Op::DwConv1d {
                dims,
                k,
                has_bias: ib.is_some(),
            },
            &inputs,
            value,
        )
    }

    /// Normalizes `(B, C, H, W)` and applies the per-channel affine `gamma`, `beta`.
    ///
    /// In training mode with [`NormKind::Batch`] also returns the batch mean and
    /// unbiased variance so the caller can fold them into running statistics.
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let (ix, ig, ib) = (self.check(x)?, self.check(gamma)?, self.check(beta)?);
        let sx = self.nodes[ix].value.shape();
        if sx.len() != 4 {
            return Err(Error::shape("norm", sx, &[]));
        }
        let (b, c, s) = (sx[0], sx[1], sx[2] * sx[3]);
        for i in [ig, ib] {
            let sp = self.nodes[i].value.shape();
            if sp != [c] {
                return Err(Error::shape("norm", sx, sp));
            }
        }
        let xd = self.nodes[ix].value.data();
        let groups = match kind {
            NormKind::Batch => c,
            NormKind::Instance => b * c,
        };
        let train = matches!(mode, NormMode::Train) || kind == NormKind::Instance;
        let mut cache = NormCache {
            kind,
            train,
            dims: (b, c, s),
            xhat: vec![0.0; xd.len()],
            inv_std: vec![0.0; groups],
        };
        let mut stats = None;
        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut sum = vec![0.0; groups];
            let mut count = vec![0usize; groups];
            for bi in 0..b {
                for ci in 0..c {
                    let g = cache.group(bi, ci);
                    let off = (bi * c + ci) * s;
                    sum[g] += xd[off..off + s].iter().sum::<f64>();
                    count[g] += s;
                }
            }
            let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
            let mut sq = vec![0.0; groups];
            for bi in 0..b {
                for ci in 0..c {
                    let g = cache.group(bi, ci);
                    let off = (bi * c + ci) * s;
                    sq[g] += xd[off..off + s].iter().map(|v| (v - mean[g]).powi(2)).sum::<f64>();
                }
            }
            let var: Vec<f64> = sq.iter().zip(&count).map(|(q, &n)| q / n as f64).collect();
            if kind == NormKind::Batch {
                let unbiased = sq
                    .iter()
                    .zip(&count)
                    .map(|(q, &n)| if n > 1 { q / (n - 1) as f64 } else { 0.0 })
                    .collect();
                stats = Some((mean.clone(), unbiased));
            }
            (mean, var)
        } else {
            let NormMode::Eval { mean, var } = mode else { unreachable!() };
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("norm", &[c], &[mean.len(), var.len()]));
            }
            (mean.to_vec(), var.to_vec())
        };
        for (g, inv) in cache.inv_std.iter_mut().enumerate() {
            *inv = 1.0 / (var[g] + eps).sqrt();
        }
        let (gd, bd) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let g = cache.group(bi, ci);
                let off = (bi * c + ci) * s;
                for j in off..off + s {
                    let h = (xd[j] - mean[g]) * cache.inv_std[g];
                    cache.xhat[j] = h;
                    out[j] = gd[ci] * h + bd[ci];
                }
            }
        }
        let value = Tensor::from_parts(sx.to_vec(), out);
        let v = self.push_op(Op::Norm(cache), &[ix, ig, ib], value)?;
        Ok((v, stats))
    }

    /// Bilinear (half-pixel, align-corners = false) resampling of `(B, C, H, W)` to `(oh, ow)`.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let i = self.check(x)?;
        let sx = self.nodes[i].value.shape();
        if sx.len() != 4 || oh == 0 || ow == 0 {
            return Err(Error::shape("resize_bilinear", sx, &[oh, ow]));
        }
        let planes = sx[0] * sx[1];
        let hw = (sx[2], sx[3]);
        let out = kernels::bilinear_forward(self.nodes[i].value.data(), planes, hw, (oh, ow));
        let value = Tensor::from_parts(vec![sx[0], sx[1], oh, ow], out);
        self.push_op(
            Op::Resize {
                planes,
                hw,
                ohw: (oh, ow),
            },
            &[i],
            value,
        )
    }

    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_bilinear", &s, &[factor]));
        }
        self.resize_bilinear(x, s[2] * factor, s[3] * factor)
    }

    /// Selective state-space scan over `(B, D, L)` sequences.
    ///
    /// `delta` is `(B, D, L)` and positive, `a` is `(D, N)` and negative,
    /// `b` and `c` are per-token `(B, N, L)` projections.
    pub fn selective_scan(&mut self, x: Var, delta: Var, a: Var, b: Var, c: Var) -> Result<Var> {
        let idx = [x, delta, a, b, c].map(|v| self.check(v));
        let idx: Vec<usize> = idx.into_iter().collect::<Result<_>>()?;
        let shapes: Vec<&[usize]> = idx.iter().map(|&i| self.nodes[i].value.shape()).collect();
        let dims = ScanDims::from_shapes(shapes[0], shapes[1], shapes[2], shapes[3], shapes[4])?;
        let vals: Vec<&[f64]> = idx.iter().map(|&i| self.nodes[i].value.data()).collect();
        let (y, cache) = ssm::scan_forward(&dims, vals[0], vals[1], vals[2], vals[3], vals[4])?;
        let value = Tensor::from_parts(vec![dims.batch, dims.channels, dims.len], y);
        self.push_op(Op::SelectiveScan { dims, cache }, &idx, value)
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        let shape = self.nodes[r].value.shape();
        if !self.nodes[r].value.is_scalar() {
            return Err(Error::NonScalarRoot(shape.to_vec()));
        }
        if !self.nodes[r].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(r + 1, || None);
        grads[r] = Some(vec![1.0]);
        for i in (0..=r).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                if let Some(g) = self.nodes[i].grad.as_mut() {
                    for (a, b) in g.data_mut().iter_mut().zip(&gout) {
                        *a += b;
                    }
                }
                continue;
            }
            let mut ins: Vec<Option<Vec<f64>>> = node
                .inputs
                .iter()
                .map(|&j| {
                    self.nodes[j]
                        .requires_grad
                        .then(|| grads[j].take().unwrap_or_else(|| vec![0.0; self.nodes[j].value.len()]))
                })
                .collect();
            self.backward_op(node, &gout, &mut ins);
            for (&j, g) in node.inputs.iter().zip(ins) {
                let Some(g) = g else { continue };
                match grads[j].as_mut() {
                    None => grads[j] = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, node: &Node, gout: &[f64], ins: &mut [Option<Vec<f64>>]) {
        let input = |k: usize| &self.nodes[node.inputs[k]].value;
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(bc) | Op::Sub(bc) | Op::Mul(bc) | Op::Div(bc) => {
                let (a, b) = (input(0).data(), input(1).data());
                let ai = |i: usize| bc.a.as_ref().map_or(i, |m| m[i]);
                let bi = |i: usize| bc.b.as_ref().map_or(i, |m| m[i]);
                let (ga, gb) = ins.split_at_mut(1);
                let (ga, gb) = (ga[0].as_deref_mut(), gb[0].as_deref_mut());
                match &node.op {
                    Op::Add(_) => {
                        scatter(ga, gout, |i| (ai(i), 1.0));
                        scatter(gb, gout, |i| (bi(i), 1.0));
                    }
                    Op::Sub(_) => {
                        scatter(ga, gout, |i| (ai(i), 1.0));
                        scatter(gb, gout, |i| (bi(i), -1.0));
                    }
                    Op::Mul(_) => {
                        scatter(ga, gout, |i| (ai(i), b[bi(i)]));
                        scatter(gb, gout, |i| (bi(i), a[ai(i)]));
                    }
                    _ => {
                        scatter(ga, gout, |i| (ai(i), 1.0 / b[bi(i)]));
                        scatter(gb, gout, |i| {
                            let d = b[bi(i)];
                            (bi(i), -a[ai(i)] / (d * d))
                        });
                    }
                }
            }
            Op::AddScalar | Op::Reshape => elementwise(ins, gout, |_| 1.0),
            Op::MulScalar(s) => elementwise(ins, gout, |_| *s),
            Op::Neg => elementwise(ins, gout, |_| -1.0),
            Op::Exp => elementwise(ins, gout, |i| out[i]),
            Op::Log => {
                let x = input(0).data();
                elementwise(ins, gout, |i| 1.0 / x[i])
            }
            Op::Sigmoid => elementwise(ins, gout, |i| out[i] * (1.0 - out[i])),
            Op::Relu => {
                let x = input(0).data();
                elementwise(ins, gout, |i| if x[i] > 0.0 { 1.0 } else { 0.0 })
            }
            Op::Silu => {
                let x = input(0).data();
                elementwise(ins, gout, |i| {
                    let s = sigmoid(x[i]);
                    s * (1.0 + x[i] * (1.0 - s))
                })
            }
            Op::Softplus => {
                let x = input(0).data();
                elementwise(ins, gout, |i| sigmoid(x[i]))
            }
            Op::Square => {
                let x = input(0).data();
                elementwise(ins, gout, |i| 2.0 * x[i])
            }
            Op::Clamp { lo, hi } => {
                let x = input(0).data();
                elementwise(ins, gout, |i| if x[i] >= *lo && x[i] <= *hi { 1.0 } else { 0.0 })
            }
            Op::SumAll => {
                if let Some(g) = ins[0].as_deref_mut() {
                    g.iter_mut().for_each(|v| *v += gout[0]);
                }
            }
            Op::MeanAll => {
                if let Some(g) = ins[0].as_deref_mut() {
                    let s = gout[0] / g.len() as f64;
                    g.iter_mut().for_each(|v| *v += s);
                }
            }
            Op::RowSum => {
                if let Some(g) = ins[0].as_deref_mut() {
                    let width = g.len() / gout.len();
                    for (chunk, &go) in g.chunks_exact_mut(width).zip(gout) {
                        chunk.iter_mut().for_each(|v| *v += go);
                    }
                }
            }
            Op::Permute { perm } => {
                if let Some(g) = ins[0].as_deref_mut() {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (_, back) = permute_data(node.value.shape(), gout, &inv);
                    g.iter_mut().zip(back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Concat { axis, sizes } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total: usize = sizes.iter().sum();
                let mut start = 0;
                for (k, &sz) in sizes.iter().enumerate() {
                    if let Some(g) = ins[k].as_deref_mut() {
                        for o in 0..outer {
                            let src = &gout[(o * total + start) * inner..(o * total + start + sz) * inner];
                            let dst = &mut g[o * sz * inner..(o + 1) * sz * inner];
                            dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    start += sz;
                }
            }
            Op::GatherLast { index } => {
                if let Some(g) = ins[0].as_deref_mut() {
                    let len = *input(0).shape().last().unwrap();
                    let m = index.len();
                    for (r, go) in gout.chunks_exact(m).enumerate() {
                        let dst = &mut g[r * len..(r + 1) * len];
                        for (&j, &v) in index.iter().zip(go) {
                            dst[j] += v;
                        }
                    }
                }
            }
            Op::MatMul { m, k, n } => {
                let (a, b) = (input(0).data(), input(1).data());
                if let Some(ga) = ins[0].as_deref_mut() {
                    gemm(*m, *n, *k, 1.0, gout, false, b, true, 1.0, ga);
                }
                if let Some(gb) = ins[1].as_deref_mut() {
                    gemm(*k, *m, *n, 1.0, a, true, gout, false, 1.0, gb);
                }
            }
            Op::Conv2d { geom, has_bias } => {
                let (x, w) = (input(0).data(), input(1).data());
                let (gx, rest) = ins.split_at_mut(1);
                let (gw, gb) = rest.split_at_mut(1);
                let gb = if *has_bias { gb[0].as_deref_mut() } else { None };
                kernels::conv2d_backward(geom, x, w, gout, gx[0].as_deref_mut(), gw[0].as_deref_mut(), gb);
            }
            Op::DwConv1d { dims, k, has_bias } => {
                let (x, w) = (input(0).data(), input(1).data());
                let (gx, rest) = ins.split_at_mut(1);
                let (gw, gb) = rest.split_at_mut(1);
                let gb = if *has_bias { gb[0].as_deref_mut() } else { None };
                kernels::depthwise_conv1d_backward(
                    x,
                    *dims,
                    w,
                    *k,
                    gout,
                    gx[0].as_deref_mut(),
                    gw[0].as_deref_mut(),
                    gb,
                );
            }
            Op::Norm(cache) => norm_backward(cache, input(1).data(), gout, ins),
            Op::Resize { planes, hw, ohw } => {
                if let Some(g) = ins[0].as_deref_mut() {
                    kernels::bilinear_backward(gout, *planes, *hw, *ohw, g);
                }
            }
            Op::SelectiveScan { dims, cache } => {
                let vals: Vec<&[f64]> = (0..5).map(|k| input(k).data()).collect();
                let grads = ssm::scan_backward(dims, vals[0], vals[1], vals[2], vals[3], vals[4], cache, gout);
                for (slot, g) in ins.iter_mut().zip(grads) {
                    if let Some(acc) = slot.as_deref_mut() {
                        acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }

    /// Hash of the branch taken by every non-smooth op (ReLU sign, clamp range).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    for &x in self.nodes[node.inputs[0]].value.data() {
                        h.write_u8((x > 0.0) as u8);
                    }
                }
                Op::Clamp { lo, hi } => {
                    for &x in self.nodes[node.inputs[0]].value.data() {
                        h.write_u8(if x < lo { 0 } else if x > hi { 2 } else { 1 });
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}

fn elementwise(ins: &mut [Option<Vec<f64>>], gout: &[f64], d: impl Fn(usize) -> f64) {
    if let Some(g) = ins[0].as_deref_mut() {
        for (i, (a, &go)) in g.iter_mut().zip(gout).enumerate() {
            *a += go * d(i);
        }
    }
}

fn scatter(g: Option<&mut [f64]>, gout: &[f64], f: impl Fn(usize) -> (usize, f64)) {
    if let Some(g) = g {
        for (i, &go) in gout.iter().enumerate() {
            let (j, d) = f(i);
            g[j] += go * d;
        }
    }
}

fn norm_backward(cache: &NormCache, gamma: &[f64], gout: &[f64], ins: &mut [Option<Vec<f64>>]) {
    let (b, c, s) = cache.dims;
    if let Some(gg) = ins[1].as_deref_mut() {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                gg[ci] += (off..off + s).map(|j| gout[j] * cache.xhat[j]).sum::<f64>();
            }
        }
    }
    if let Some(gb) = ins[2].as_deref_mut() {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                gb[ci] += gout[off..off + s].iter().sum::<f64>();
            }
        }
    }
    let Some(gx) = ins[0].as_deref_mut() else { return };
    if !cache.train {
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let scale = gamma[ci] * cache.inv_std[cache.group(bi, ci)];
                for j in off..off + s {
                    gx[j] += gout[j] * scale;
                }
            }
        }
        return;
    }
    let groups = cache.inv_std.len();
    let mut sum_d = vec![0.0; groups];
    let mut sum_dx = vec![0.0; groups];
    let mut count = vec![0usize; groups];
    for bi in 0..b {
        for ci in 0..c {
            let g = cache.group(bi, ci);
            let off = (bi * c + ci) * s;
            for j in off..off + s {
                let d = gout[j] * gamma[ci];
                sum_d[g] += d;
                sum_dx[g] += d * cache.xhat[j];
            }
            count[g] += s;
        }
    }
    for bi in 0..b {
        for ci in 0..c {
            let g = cache.group(bi, ci);
            let n = count[g] as f64;
            let off = (bi * c + ci) * s;
            for j in off..off + s {
                let d = gout[j] * gamma[ci];
                gx[j] += cache.inv_std[g] / n * (n * d - sum_d[g] - cache.xhat[j] * sum_dx[g]);
            }
        }
    }
}

fn permute_data(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
