//! Operation tape: forward recording and reverse-mode gradient accumulation.

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Position snapshot used to drop the activations of a finished pass while
/// keeping earlier nodes (typically parameters) alive.
#[derive(Debug, Clone, Copy)]
pub struct TapeMark(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ReduceKind {
    Max,
    Min,
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// scale * a + offset, elementwise with scalar constants; only the
    /// scale matters to the gradient.
    Affine {
        a: Var,
        scale: f64,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Exp {
        a: Var,
    },
    Ln {
        a: Var,
    },
    Rsqrt {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: f64,
        hi: f64,
    },
    Reduce {
        a: Var,
        axis: usize,
        kind: ReduceKind,
        /// For max/min: winning index along the axis, per output element.
        arg: Vec<usize>,
    },
    SumAll {
        a: Var,
    },
    Conv2d {
        x: Var,
        kernel: Var,
    },
    MaxPool2d {
        x: Var,
        arg: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Wengert list recording every primitive of a forward pass.
///
/// Gradients accumulate: repeated [`Tape::backward`] calls without an
/// intervening [`Tape::zero_grads`] (or [`Tape::reset_to`]) sum their
/// contributions, so two identical backward passes yield exactly doubled
/// leaf gradients.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf tensor; its `requires_grad` flag decides whether
    /// backward assigns it a gradient.
    pub fn leaf(&mut self, value: Tensor<E>) -> Var {
        let needs = value.requires_grad;
        self.push(value, Op::Leaf, needs)
    }

    /// Leaf that never receives gradients (inputs, targets, running stats).
    pub fn constant(&mut self, value: Tensor<E>) -> Var {
        let mut value = value;
        value.requires_grad = false;
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: E) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Mutable access to a leaf's storage (parameter updates).
    pub fn value_mut(&mut self, v: Var) -> &mut Tensor<E> {
        debug_assert!(
            matches!(self.nodes[v.0].op, Op::Leaf),
            "only leaves may be mutated in place"
        );
        &mut self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of a `requires_grad` tensor as a full tensor; zeros when no
    /// backward pass has touched it.
    pub fn grad_tensor(&self, v: Var) -> Tensor<E> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shaped like its tensor"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Drop every node recorded after `mark` and clear all gradients.
    pub fn reset_to(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.0);
        self.grads.truncate(mark.0);
        self.zero_grads();
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Elementwise and broadcast primitives ────────────────────────────

    fn binary_shapes(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Vec<usize>, usize), TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if !is_suffix(sb, sa) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let nb = self.nodes[b.0].value.numel();
        Ok((sa.to_vec(), nb))
    }

    fn binary<F>(&mut self, op: &'static str, a: Var, b: Var, f: F) -> Result<Var, TensorError>
    where
        F: Fn(E, E) -> E,
    {
        let (shape, nb) = self.binary_shapes(op, a, b)?;
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let out: Vec<E> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let node_op = match op {
            "add" => Op::Add { a, b },
            "sub" => Op::Sub { a, b },
            "mul" => Op::Mul { a, b },
            _ => unreachable!(),
        };
        Ok(self.push(Tensor::new(shape, out)?, node_op, needs))
    }

    /// `a + b`, broadcasting `b` over the leading axes of `a` (the shape of
    /// `b` must be a suffix of the shape of `a`).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    /// `scale * a + offset` with scalar constants.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Var {
        let (s, o) = (E::from_f64(scale), E::from_f64(offset));
        let out: Vec<E> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| s * x + o)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Affine { a, scale },
            needs,
        )
    }

    fn unary<F>(&mut self, a: Var, f: F, op: Op) -> Var
    where
        F: Fn(E) -> E,
    {
        let out: Vec<E> = self.nodes[a.0].value.data().iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::new(shape, out).expect("same shape"), op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.maximum(E::ZERO), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sigmoid(), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln { a })
    }

    /// `1 / sqrt(a)`, elementwise.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| E::ONE / x.sqrt(), Op::Rsqrt { a })
    }

    /// Clamp into `[lo, hi]`; the subgradient is 1 inside the interval and 0
    /// outside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (E::from_f64(lo), E::from_f64(hi));
        self.unary(a, |x| x.maximum(l).minimum(h), Op::Clamp { a, lo, hi })
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        kernels::matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Matmul { a, b }, needs))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    fn reduce(&mut self, a: Var, axis: usize, kind: ReduceKind) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let data = self.nodes[a.0].value.data();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut out = vec![E::ZERO; outer * inner];
        let mut arg = Vec::new();
        match kind {
            ReduceKind::Max | ReduceKind::Min => {
                arg = vec![0usize; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * len * inner + i];
                        let mut best_j = 0usize;
                        for j in 1..len {
                            let v = data[(o * len + j) * inner + i];
                            let better = match kind {
                                ReduceKind::Max => v > best,
                                _ => v < best,
                            };
                            if better {
                                best = v;
                                best_j = j;
                            }
                        }
                        out[o * inner + i] = best;
                        arg[o * inner + i] = best_j;
                    }
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            out[o * inner + i] += data[(o * len + j) * inner + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = E::ONE / E::from_f64(len as f64);
                    for v in &mut out {
                        *v *= inv;
                    }
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce { a, axis, kind, arg },
            needs,
        ))
    }

    /// Maximum over one axis; ties route the gradient to the lowest index.
    pub fn reduce_max(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, ReduceKind::Max)
    }

    pub fn reduce_min(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, ReduceKind::Min)
    }

    pub fn reduce_mean(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, ReduceKind::Mean)
    }

    pub fn reduce_sum(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.reduce(a, axis, ReduceKind::Sum)
    }

    /// Sum of every element, producing a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = E::ZERO;
        for &v in self.nodes[a.0].value.data() {
            acc += v;
        }
        let needs = self.needs(a);
        self.push(Tensor::scalar(acc), Op::SumAll { a }, needs)
    }

    // ── Convolution and pooling ─────────────────────────────────────────

    /// Same-padded stride-1 2-D convolution, channels last:
    /// `[B,H,W,Cin] * [KH,KW,Cin,Cout] -> [B,H,W,Cout]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var) -> Result<Var, TensorError> {
        let (sx, sk) = (self.shape(x), self.shape(kernel));
        if sx.len() != 4 || sk.len() != 4 || sx[3] != sk[2] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let g = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            in_channels: sx[3],
            out_channels: sk[3],
            kernel_h: sk[0],
            kernel_w: sk[1],
        };
        let patches = kernels::im2col(self.nodes[x.0].value.data(), &g);
        let mut out = vec![E::ZERO; g.positions() * g.out_channels];
        kernels::matmul_acc(
            &patches,
            self.nodes[kernel.0].value.data(),
            g.positions(),
            g.patch_len(),
            g.out_channels,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(kernel);
        Ok(self.push(
            Tensor::new(vec![g.batch, g.height, g.width, g.out_channels], out)?,
            Op::Conv2d { x, kernel },
            needs,
        ))
    }

    /// Non-overlapping max pooling with the given `(time, freq)` window over
    /// `[B,H,W,C]`; partial trailing windows are dropped.
    pub fn maxpool2d(&mut self, x: Var, window: (usize, usize)) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "maxpool2d",
                lhs: sx,
                rhs: vec![window.0, window.1],
            });
        }
        let (oh, ow) = (sx[1] / window.0, sx[2] / window.1);
        if window.0 == 0 || window.1 == 0 || oh == 0 || ow == 0 {
            return Err(TensorError::ZeroDim { op: "maxpool2d" });
        }
        let (out, arg) = kernels::maxpool2d(
            self.nodes[x.0].value.data(),
            sx[0],
            sx[1],
            sx[2],
            sx[3],
            window.0,
            window.1,
        );
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![sx[0], oh, ow, sx[3]], out)?,
            Op::MaxPool2d { x, arg },
            needs,
        ))
    }

    // ── Shape manipulation ──────────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(TensorError::ShapeData {
                op: "reshape",
                shape,
                len: self.nodes[a.0].value.numel(),
            });
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let needs = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a }, needs))
    }

    /// Concatenate along `axis`; all other dimensions must match.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = *inputs.first().ok_or(TensorError::EmptyConcat)?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (d, bd))| i == axis || d == bd);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        let mut needs = false;
        for o in 0..outer {
            let mut dst = o * axis_total * inner;
            for &v in inputs {
                let len = self.shape(v)[axis];
                let block = len * inner;
                let src = &self.nodes[v.0].value.data()[o * block..(o + 1) * block];
                out[dst..dst + block].copy_from_slice(src);
                dst += block;
            }
        }
        for &v in inputs {
            needs |= self.needs(v);
        }
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Take `start..end` along `axis`.
    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start >= end || end > shape[axis] {
            return Err(TensorError::InvalidRange {
                op: "slice",
                start,
                end,
                len: shape[axis],
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let take = end - start;
        let mut out = vec![E::ZERO; outer * take * inner];
        let data = self.nodes[a.0].value.data();
        for o in 0..outer {
            let src = (o * len + start) * inner;
            let dst = o * take * inner;
            out[dst..dst + take * inner].copy_from_slice(&data[src..src + take * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = take;
        let needs = self.needs(a);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Slice {
                a,
                axis,
                start,
                end,
            },
            needs,
        ))
    }

    // ── Backward pass ───────────────────────────────────────────────────

    /// Accumulate `d loss / d leaf` into every `requires_grad` leaf reachable
    /// from `loss`. The loss must be scalar (one element).
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        if !self.nodes[loss.0].needs_grad {
            // Nothing differentiable feeds the loss; all gradients are zero.
            return Ok(());
        }
        {
            let g = self.grads[loss.0].get_or_insert_with(|| vec![E::ZERO; 1]);
            g[0] += E::ONE;
        }
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].needs_grad {
                continue;
            }
            // Interior gradients are consumed as they are propagated; leaf
            // gradients persist and accumulate across backward calls.
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, idx, &gout);
        }
        Ok(())
    }
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc<'g, E: Element>(
    grads: &'g mut [Option<Vec<E>>],
    nodes: &[Node<E>],
    v: Var,
) -> &'g mut [E] {
    let n = nodes[v.0].value.numel();
    grads[v.0].get_or_insert_with(|| vec![E::ZERO; n])
}

fn backprop<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Vec<E>>],
    idx: usize,
    gout: &[E],
) {
    let node = &nodes[idx];
    let needs = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => unreachable!("leaves are never propagated"),
        Op::Add { a, b } => {
            if needs(*a) {
                let ga = acc(grads, nodes, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            if needs(*b) {
                let nb = nodes[b.0].value.numel();
                let gb = acc(grads, nodes, *b);
                for (i, &go) in gout.iter().enumerate() {
                    gb[i % nb] += go;
                }
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                let ga = acc(grads, nodes, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go;
                }
            }
            if needs(*b) {
                let nb = nodes[b.0].value.numel();
                let gb = acc(grads, nodes, *b);
                for (i, &go) in gout.iter().enumerate() {
                    gb[i % nb] -= go;
                }
            }
        }
        Op::Mul { a, b } => {
            let (da, db) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            let nb = db.len();
            if needs(*a) {
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go * db[i % nb];
                }
            }
            if needs(*b) {
                let gb = acc(grads, nodes, *b);
                for (i, &go) in gout.iter().enumerate() {
                    gb[i % nb] += go * da[i];
                }
            }
        }
        Op::Affine { a, scale } => {
            if needs(*a) {
                let s = E::from_f64(*scale);
                let ga = acc(grads, nodes, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += s * go;
                }
            }
        }
        Op::Relu { a } => {
            if needs(*a) {
                let x = nodes[a.0].value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    if x[i] > E::ZERO {
                        ga[i] += go;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if needs(*a) {
                let y = node.value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go * y[i] * (E::ONE - y[i]);
                }
            }
        }
        Op::Tanh { a } => {
            if needs(*a) {
                let y = node.value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go * (E::ONE - y[i] * y[i]);
                }
            }
        }
        Op::Exp { a } => {
            if needs(*a) {
                let y = node.value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go * y[i];
                }
            }
        }
        Op::Ln { a } => {
            if needs(*a) {
                let x = nodes[a.0].value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go / x[i];
                }
            }
        }
        Op::Rsqrt { a } => {
            if needs(*a) {
                let y = node.value.data();
                let half = E::from_f64(-0.5);
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    ga[i] += go * half * y[i] * y[i] * y[i];
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            if needs(*a) {
                let (l, h) = (E::from_f64(*lo), E::from_f64(*hi));
                let x = nodes[a.0].value.data();
                let ga = acc(grads, nodes, *a);
                for (i, &go) in gout.iter().enumerate() {
                    if x[i] >= l && x[i] <= h {
                        ga[i] += go;
                    }
                }
            }
        }
        Op::Matmul { a, b } => {
            let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if needs(*a) {
                let ga = acc(grads, nodes, *a);
                kernels::matmul_nt_acc(gout, nodes[b.0].value.data(), m, n, k, ga);
            }
            if needs(*b) {
                let gb = acc(grads, nodes, *b);
                kernels::matmul_tn_acc(nodes[a.0].value.data(), gout, m, k, n, gb);
            }
        }
        Op::Reduce { a, axis, kind, arg } => {
            if needs(*a) {
                let shape = nodes[a.0].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let ga = acc(grads, nodes, *a);
                match kind {
                    ReduceKind::Max | ReduceKind::Min => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let j = arg[o * inner + i];
                                ga[(o * len + j) * inner + i] += gout[o * inner + i];
                            }
                        }
                    }
                    ReduceKind::Sum => {
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    ga[(o * len + j) * inner + i] += gout[o * inner + i];
                                }
                            }
                        }
                    }
                    ReduceKind::Mean => {
                        let inv = E::ONE / E::from_f64(len as f64);
                        for o in 0..outer {
                            for j in 0..len {
                                for i in 0..inner {
                                    ga[(o * len + j) * inner + i] += gout[o * inner + i] * inv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::SumAll { a } => {
            if needs(*a) {
                let go = gout[0];
                let ga = acc(grads, nodes, *a);
                for g in ga.iter_mut() {
                    *g += go;
                }
            }
        }
        Op::Conv2d { x, kernel } => {
            let (sx, sk) = (nodes[x.0].value.shape(), nodes[kernel.0].value.shape());
            let g = ConvGeom {
                batch: sx[0],
                height: sx[1],
                width: sx[2],
                in_channels: sx[3],
                out_channels: sk[3],
                kernel_h: sk[0],
                kernel_w: sk[1],
            };
            if needs(*kernel) {
                // Recompute the patch matrix rather than saving it; the
                // matmul dominates either way.
                let patches = kernels::im2col(nodes[x.0].value.data(), &g);
                let gk = acc(grads, nodes, *kernel);
                kernels::matmul_tn_acc(
                    &patches,
                    gout,
                    g.positions(),
                    g.patch_len(),
                    g.out_channels,
                    gk,
                );
            }
            if needs(*x) {
                let mut dpatches = vec![E::ZERO; g.positions() * g.patch_len()];
                kernels::matmul_nt_acc(
                    gout,
                    nodes[kernel.0].value.data(),
                    g.positions(),
                    g.out_channels,
                    g.patch_len(),
                    &mut dpatches,
                );
                let gx = acc(grads, nodes, *x);
                kernels::col2im_acc(&dpatches, &g, gx);
            }
        }
        Op::MaxPool2d { x, arg, .. } => {
            if needs(*x) {
                let gx = acc(grads, nodes, *x);
                for (o, &src) in arg.iter().enumerate() {
                    gx[src] += gout[o];
                }
            }
        }
        Op::Reshape { a } => {
            if needs(*a) {
                let ga = acc(grads, nodes, *a);
                for (g, &go) in ga.iter_mut().zip(gout) {
                    *g += go;
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let out_shape = node.value.shape();
            let (outer, total, inner) = axis_split(out_shape, *axis);
            let mut offset = 0usize;
            for &v in inputs {
                let len = nodes[v.0].value.shape()[*axis];
                if needs(v) {
                    let gv = acc(grads, nodes, v);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * len * inner;
                        for t in 0..len * inner {
                            gv[dst + t] += gout[src + t];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice {
            a,
            axis,
            start,
            end,
        } => {
            if needs(*a) {
                let shape = nodes[a.0].value.shape();
                let (outer, len, inner) = axis_split(shape, *axis);
                let take = end - start;
                let ga = acc(grads, nodes, *a);
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * take * inner;
                    for t in 0..take * inner {
                        ga[dst + t] += gout[src + t];
                    }
                }
            }
        }
    }
}
