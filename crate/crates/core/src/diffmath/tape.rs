//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. Because a
//! node can only reference nodes created before it, the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.

use super::tensor::{numel, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryOp {
    Exp,
    Log,
    Relu,
    Square,
    Abs,
    Neg,
    ClampMin(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    ScalarLeft,
    ScalarRight,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Shift {
        a: Var,
    },
    Unary {
        op: UnaryOp,
        a: Var,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Reduce {
        op: ReduceOp,
        a: Var,
        /// Output flat index for every input element (sum/mean) or the
        /// selected input flat index for every output element (max).
        map: Vec<usize>,
        group: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    LogSoftmax {
        a: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        outer: usize,
        channels: usize,
        inner: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape {
        a: Var,
    },
    Gather {
        a: Var,
        /// Source flat index for every output element.
        src: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation tape recording differentiable operations.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// Odometer walk producing, for every element of `out_shape` in row-major
/// order, `offset + Σ index[i] * src_strides[i]`.
fn strided_indices(out_shape: &[usize], src_strides: &[usize], offset: usize) -> Vec<usize> {
    let total = numel(out_shape);
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.push(offset);
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut cur = offset;
    let last = rank - 1;
    for _ in 0..total {
        out.push(cur);
        let mut ax = last;
        loop {
            idx[ax] += 1;
            cur += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            cur -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
            if ax == 0 {
                break;
            }
            ax -= 1;
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Gradients are tracked when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(T::of(x)))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the most recent [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (numel(sa), numel(sb));
        let bcast = if sa == sb {
            Broadcast::None
        } else if nb == 1 {
            Broadcast::ScalarRight
        } else if na == 1 {
            Broadcast::ScalarLeft
        } else {
            return Err(Error::ShapeMismatch {
                op: match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                    BinaryOp::Div => "div",
                },
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let f = |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let value = match bcast {
            Broadcast::None => Tensor::new(
                va.shape().to_vec(),
                va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect(),
            )?,
            Broadcast::ScalarRight => {
                let y = vb.data()[0];
                va.map(|x| f(x, y))
            }
            Broadcast::ScalarLeft => {
                let x = va.data()[0];
                vb.map(|y| f(x, y))
            }
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { op, a, b, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    /// Multiplies by a fixed scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let k = T::of(factor);
        let value = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg)
    }

    /// Adds a fixed scalar.
    pub fn shift(&mut self, a: Var, offset: f64) -> Var {
        let k = T::of(offset);
        let value = self.value(a).map(|x| x + k);
        let rg = self.rg(a);
        self.push(value, Op::Shift { a }, rg)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Var {
        let value = self.value(a).map(|x| match op {
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Relu => x.max(T::zero()),
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
            UnaryOp::Neg => -x,
            UnaryOp::ClampMin(c) => x.max(T::of(c)),
        });
        let rg = self.rg(a);
        self.push(value, Op::Unary { op, a }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Log, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(UnaryOp::ClampMin(floor), a)
    }

    /// Adds `bias` (shape `[n]`) to every row of `a` (shape `[..., n]`).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(bias);
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let n = sb[0];
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, &y) in row.iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(value, Op::AddBias { a, bias }, rg))
    }

    // ---- reductions --------------------------------------------------

    /// Reduces `a` over `axes`. With `keep` the reduced axes remain with
    /// extent 1. Max backpropagates into the first maximal element of each
    /// group (lowest flat index).
    pub fn reduce(&mut self, op: ReduceOp, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() {
            return Err(Error::invalid("reduce", "empty axis group"));
        }
        for &ax in &axes {
            check_axis("reduce", ax, rank)?;
        }
        let kept_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out_shape: Vec<usize> = if keep {
            kept_shape.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let group: usize = axes.iter().map(|&ax| shape[ax]).product();
        // Output index of every input element: walk the input in order with
        // strides that are zero along reduced axes.
        let out_strides = strides(&kept_shape);
        let walk: Vec<usize> = (0..rank)
            .map(|i| if axes.contains(&i) { 0 } else { out_strides[i] })
            .collect();
        let in_to_out = strided_indices(&shape, &walk, 0);
        let src = self.value(a).data();
        let n_out = numel(&out_shape);
        let (data, map) = match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                let mut acc = vec![T::zero(); n_out];
                for (i, &o) in in_to_out.iter().enumerate() {
                    acc[o] = acc[o] + src[i];
                }
                if op == ReduceOp::Mean {
                    let g = T::of(group as f64);
                    acc.iter_mut().for_each(|x| *x = *x / g);
                }
                (acc, in_to_out)
            }
            ReduceOp::Max => {
                let mut best = vec![T::neg_infinity(); n_out];
                let mut arg = vec![usize::MAX; n_out];
                for (i, &o) in in_to_out.iter().enumerate() {
                    if arg[o] == usize::MAX || src[i] > best[o] {
                        best[o] = src[i];
                        arg[o] = i;
                    }
                }
                (best, arg)
            }
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reduce { op, a, map, group }, rg))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, a, axes, keep)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, a, axes, keep)
    }

    pub fn max(&mut self, a: Var, axes: &[usize], keep: bool) -> Result<Var> {
        self.reduce(ReduceOp::Max, a, axes, keep)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return a;
        }
        self.reduce(ReduceOp::Sum, a, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        if axes.is_empty() {
            return a;
        }
        self.reduce(ReduceOp::Mean, a, &axes, false).expect("valid axes")
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product. Accepts `[m,k]·[k,n]`, `[b,m,k]·[b,k,n]` and
    /// `[b,m,k]·[k,n]` (right operand shared across the batch).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let (batch, m, k, n, shared_rhs) = match (sa.len(), sb.len()) {
            (2, 2) => (1, sa[0], sa[1], sb[1], true),
            (3, 3) if sa[0] == sb[0] => (sa[0], sa[1], sa[2], sb[2], false),
            (3, 2) => (sa[0], sa[1], sa[2], sb[1], true),
            _ => return Err(mismatch()),
        };
        let kb = if sb.len() == 3 { sb[1] } else { sb[0] };
        if kb != k {
            return Err(mismatch());
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let a_off = bi * m * k;
            let b_off = if shared_rhs { 0 } else { bi * k * n };
            matmul_kernel(
                &ad[a_off..a_off + m * k],
                &bd[b_off..b_off + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out_shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis, computed with a max shift.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::invalid("log_softmax", "scalar input"))?;
        let mut value = self.value(a).clone();
        // accumulate in f64 so f32 rows still exponentiate to a simplex
        for row in value.data_mut().chunks_mut(cols) {
            let mx = row.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&x| (x.as_f64() - mx).exp()).sum::<f64>().ln() + mx;
            row.iter_mut().for_each(|x| *x = T::of(x.as_f64() - lse));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { a, cols }, rg))
    }

    /// Normalizes `x` to zero mean and unit variance along `axis`, then
    /// applies the per-channel affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, axis: usize, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("layer_norm", axis, shape.len())?;
        let channels = shape[axis];
        for p in [gain, bias] {
            if self.shape(p) != [channels] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); outer * inner];
        let c_t = T::of(channels as f64);
        let eps = T::of(eps);
        for o in 0..outer {
            for i in 0..inner {
                let at = |c: usize| (o * channels + c) * inner + i;
                let mean = (0..channels).fold(T::zero(), |s, c| s + xd[at(c)]) / c_t;
                let var = (0..channels).fold(T::zero(), |s, c| {
                    let d = xd[at(c)] - mean;
                    s + d * d
                }) / c_t;
                let is = T::one() / (var + eps).sqrt();
                inv_std[o * inner + i] = is;
                for c in 0..channels {
                    let h = (xd[at(c)] - mean) * is;
                    xhat[at(c)] = h;
                    out[at(c)] = h * gd[c] + bd[c];
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a }, rg))
    }

    fn gather(&mut self, a: Var, out_shape: Vec<usize>, src: Vec<usize>) -> Result<Var> {
        let d = self.value(a).data();
        let data = src.iter().map(|&i| d[i]).collect();
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gather { a, src }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let st = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
        let src = strided_indices(&out_shape, &src_strides, 0);
        self.gather(a, out_shape, src)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::invalid("transpose", "rank below 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} outside extent {} of axis {axis}", start + len, shape[axis]),
            ));
        }
        let st = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = strided_indices(&out_shape, &st, start * st[axis]);
        self.gather(a, out_shape, src)
    }

    /// Selects one index along `axis`, dropping that axis.
    pub fn select(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let n = self.narrow(a, axis, index, 1)?;
        let mut shape = self.shape(n).to_vec();
        shape.remove(axis);
        self.reshape(n, &shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Populates gradients of the scalar `root` for every node that
    /// requires them. Earlier gradients are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = match g {
                Some(g) if node.requires_grad => Some(Tensor::new(node.value.shape().to_vec(), g)?),
                _ => None,
            };
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        fn acc<'g, T: Real>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.numel();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary { op, a, b, bcast } => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let idx = |j: usize| match bcast {
                    Broadcast::None => (j, j),
                    Broadcast::ScalarRight => (j, 0),
                    Broadcast::ScalarLeft => (0, j),
                };
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (j, &gj) in g.iter().enumerate() {
                        let (xa, xb) = idx(j);
                        let d = match op {
                            BinaryOp::Add | BinaryOp::Sub => gj,
                            BinaryOp::Mul => gj * vb[xb],
                            BinaryOp::Div => gj / vb[xb],
                        };
                        ga[xa] = ga[xa] + d;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for (j, &gj) in g.iter().enumerate() {
                        let (xa, xb) = idx(j);
                        let d = match op {
                            BinaryOp::Add => gj,
                            BinaryOp::Sub => -gj,
                            BinaryOp::Mul => gj * va[xa],
                            BinaryOp::Div => -gj * va[xa] / (vb[xb] * vb[xb]),
                        };
                        gb[xb] = gb[xb] + d;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let k = T::of(*factor);
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gj)| *x = *x + gj * k);
                }
            }
            Op::Shift { a } | Op::Reshape { a } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gj)| *x = *x + gj);
                }
            }
            Op::Unary { op, a } => {
                let x = nodes[a.0].value.data();
                let y = nodes[i].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for j in 0..g.len() {
                        let d = match op {
                            UnaryOp::Exp => g[j] * y[j],
                            UnaryOp::Log => g[j] / x[j],
                            UnaryOp::Relu => {
                                if x[j] > T::zero() {
                                    g[j]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Square => g[j] * (x[j] + x[j]),
                            UnaryOp::Abs => {
                                if x[j] > T::zero() {
                                    g[j]
                                } else if x[j] < T::zero() {
                                    -g[j]
                                } else {
                                    T::zero()
                                }
                            }
                            UnaryOp::Neg => -g[j],
                            UnaryOp::ClampMin(c) => {
                                if x[j] >= T::of(*c) {
                                    g[j]
                                } else {
                                    T::zero()
                                }
                            }
                        };
                        ga[j] = ga[j] + d;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &gj)| *x = *x + gj);
                }
                if let Some(gb) = acc(nodes, grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &gj)| *x = *x + gj);
                    }
                }
            }
            Op::Reduce { op, a, map, group } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    match op {
                        ReduceOp::Sum => {
                            for (j, &o) in map.iter().enumerate() {
                                ga[j] = ga[j] + g[o];
                            }
                        }
                        ReduceOp::Mean => {
                            let inv = T::one() / T::of(*group as f64);
                            for (j, &o) in map.iter().enumerate() {
                                ga[j] = ga[j] + g[o] * inv;
                            }
                        }
                        ReduceOp::Max => {
                            for (o, &src) in map.iter().enumerate() {
                                ga[src] = ga[src] + g[o];
                            }
                        }
                    }
                }
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = nodes[a.0].value.data();
                let bd = nodes[b.0].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA = G · Bᵀ
                    for bi in 0..*batch {
                        let b_off = if *shared_rhs { 0 } else { bi * k * n };
                        let bm = &bd[b_off..b_off + k * n];
                        let gm = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        for r in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for c in 0..n {
                                    s = s + gm[r * n + c] * bm[p * n + c];
                                }
                                out[r * k + p] = out[r * k + p] + s;
                            }
                        }
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    // dB = Aᵀ · G, summed over the batch when B is shared
                    for bi in 0..*batch {
                        let am = &ad[bi * m * k..(bi + 1) * m * k];
                        let gm = &g[bi * m * n..(bi + 1) * m * n];
                        let b_off = if *shared_rhs { 0 } else { bi * k * n };
                        let out = &mut gb[b_off..b_off + k * n];
                        for r in 0..m {
                            for p in 0..k {
                                let x = am[r * k + p];
                                let row = &gm[r * n..(r + 1) * n];
                                let dst = &mut out[p * n..(p + 1) * n];
                                for (d, &gv) in dst.iter_mut().zip(row) {
                                    *d = *d + x * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { a, cols } => {
                let y = nodes[i].value.data();
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((gr, yr), out) in g.chunks(*cols).zip(y.chunks(*cols)).zip(ga.chunks_mut(*cols)) {
                        let total = gr.iter().fold(T::zero(), |s, &x| s + x);
                        for c in 0..*cols {
                            out[c] = out[c] + gr[c] - yr[c].exp() * total;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
            } => {
                let (outer, channels, inner) = (*outer, *channels, *inner);
                let gd = nodes[gain.0].value.data();
                let at = |o: usize, c: usize, i: usize| (o * channels + c) * inner + i;
                if let Some(gg) = acc(nodes, grads, *gain) {
                    for o in 0..outer {
                        for c in 0..channels {
                            for i in 0..inner {
                                gg[c] = gg[c] + g[at(o, c, i)] * xhat[at(o, c, i)];
                            }
                        }
                    }
                }
                if let Some(gbias) = acc(nodes, grads, *bias) {
                    for o in 0..outer {
                        for c in 0..channels {
                            for i in 0..inner {
                                gbias[c] = gbias[c] + g[at(o, c, i)];
                            }
                        }
                    }
                }
                if let Some(gx) = acc(nodes, grads, *x) {
                    let c_t = T::of(channels as f64);
                    for o in 0..outer {
                        for i in 0..inner {
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for c in 0..channels {
                                let d = g[at(o, c, i)] * gd[c];
                                sum_d = sum_d + d;
                                sum_dx = sum_dx + d * xhat[at(o, c, i)];
                            }
                            let is = inv_std[o * inner + i];
                            for c in 0..channels {
                                let j = at(o, c, i);
                                let d = g[j] * gd[c];
                                gx[j] = gx[j] + is / c_t * (c_t * d - sum_d - xhat[j] * sum_dx);
                            }
                        }
                    }
                }
            }
            Op::Gather { a, src } => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (&s, &gj) in src.iter().zip(g) {
                        ga[s] = ga[s] + gj;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = nodes[i].value.shape();
                let outer = numel(&out_shape[..*axis]);
                let inner = numel(&out_shape[axis + 1..]);
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = nodes[p.0].value.shape()[*axis] * inner;
                    if let Some(gp) = acc(nodes, grads, p) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &gj)| *x = *x + gj);
                        }
                    }
                    offset += chunk;
                }
            }
        }
    }
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let x = a[r * k + p];
            let row = &b[p * n..(p + 1) * n];
            for (d, &y) in dst.iter_mut().zip(row) {
                *d = *d + x * y;
            }
        }
    }
}
