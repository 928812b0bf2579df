//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are recorded in execution order, so the node list is topologically sorted
//! by construction and [`Tape::backward`] simply walks it in reverse.
//!
//! Parameters are bound by reference ([`Tape::param`]), which keeps binding
//! cheap enough to build a fresh tape per training step or per sampling call.
//!
//! ```
//! use flowcast::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.square(x);
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
//! ```

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Attention-style mask for [`Tape::softmax_masked`]: row `i` may see
/// columns `0..=i + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub offset: usize,
}

impl CausalMask {
    pub fn new(offset: usize) -> Self {
        Self { offset }
    }

    #[inline]
    fn visible(&self, row: usize, col: usize) -> bool {
        col <= row + self.offset
    }
}

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Softmax(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    RmsNorm { src: Var, gain: Var, inv_rms: Vec<f64> },
    Gelu(Var),
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Mean(Var),
    Sum(Var),
    Square(Var),
    Ln(Var),
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread; create one per forward pass.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf that required grad, if any flowed into it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn dims2(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

/// `c (+)= op(a) * op(b)` where `a` is `m x k` after optional transpose.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    // Stored a is m x k (row-major) or k x m when transposed.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are validated by the callers against m, k, n and
    // the strides above address only elements inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Vars created past
    /// that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an owned input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Binds a parameter by reference.
    pub fn param(&mut self, value: &'p Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value into a new constant node (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av).ok_or_else(|| Error::shape("matmul", av.shape(), bv.shape()))?;
        let (k2, n) = dims2(bv).ok_or_else(|| Error::shape("matmul", av.shape(), bv.shape()))?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, false);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op_name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// `a + bias` where `bias` has the size of `a`'s last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let c = av.last_dim();
        if bv.len() != c {
            return Err(Error::shape("add_bias", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2(av).ok_or_else(|| Error::shape("transpose", av.shape(), &[]))?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av.data()[i * c + j];
            }
        }
        Ok(self.push(Tensor::matrix(c, r, data)?, Op::Transpose(a), &[a]))
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::InvalidArgument(format!(
                "concat: need at least one part and axis in {{0,1}}, got {} parts, axis {axis}",
                parts.len()
            )));
        }
        let first = self.value(parts[0]);
        let (_, c0) = dims2(first).ok_or_else(|| Error::shape("concat", first.shape(), &[]))?;
        let r0 = first.shape()[0];
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = dims2(pv).ok_or_else(|| Error::shape("concat", first.shape(), pv.shape()))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok {
                return Err(Error::shape("concat", first.shape(), pv.shape()));
            }
            total += if axis == 0 { r } else { c };
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(total * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(total, c0, data)?
        } else {
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(r0, total, data)?
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// `a[start..end]` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = dims2(av).ok_or_else(|| Error::shape("slice", av.shape(), &[]))?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > extent {
            return Err(Error::shape("slice", av.shape(), &[axis, start, end]));
        }
        let out = if axis == 0 {
            av.slice_rows(start, end)?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&av.row(i)[start..end]);
            }
            Tensor::matrix(r, w, data)?
        };
        Ok(self.push(out, Op::Slice { src: a, axis, start }, &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis with masked entries forced to exactly zero.
    pub fn softmax_masked(&mut self, a: Var, mask: CausalMask) -> Var {
        self.softmax_impl(a, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, mask: Option<CausalMask>) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut data = vec![0.0; av.len()];
        for (i, (src, dst)) in av.data().chunks(c).zip(data.chunks_mut(c)).enumerate() {
            let visible = |j: usize| mask.map_or(true, |m| m.visible(i, j));
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in src.iter().enumerate() {
                if visible(j) && x > max {
                    max = x;
                }
            }
            let mut total = 0.0;
            for (j, (&x, y)) in src.iter().zip(dst.iter_mut()).enumerate() {
                if visible(j) {
                    *y = (x - max).exp();
                    total += *y;
                }
            }
            if total > 0.0 {
                dst.iter_mut().for_each(|y| *y /= total);
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalizes each row over the last axis to zero mean and unit variance
    /// (no affine). A constant row maps to zeros.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.last_dim();
        let mut data = vec![0.0; av.len()];
        let mut inv_std = Vec::with_capacity(av.rows());
        for (src, dst) in av.data().chunks(c).zip(data.chunks_mut(c)) {
            let mean = src.iter().sum::<f64>() / c as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (x, y) in src.iter().zip(dst.iter_mut()) {
                *y = (x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LayerNorm { src: a, inv_std }, &[a])
    }

    /// RMS normalization over the last axis followed by a learned gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (av, gv) = (self.value(a), self.value(gain));
        let c = av.last_dim();
        if gv.len() != c {
            return Err(Error::shape("rms_norm", av.shape(), gv.shape()));
        }
        let mut data = vec![0.0; av.len()];
        let mut inv_rms = Vec::with_capacity(av.rows());
        for (src, dst) in av.data().chunks(c).zip(data.chunks_mut(c)) {
            let ms = src.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + NORM_EPS).sqrt();
            for ((x, y), g) in src.iter().zip(dst.iter_mut()).zip(gv.data()) {
                *y = x * inv * g;
            }
            inv_rms.push(inv);
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RmsNorm { src: a, gain, inv_rms }, &[a, gain]))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(out, op, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a))
    }

    /// Natural logarithm, elementwise.
    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Ln(a))
    }

    /// Gathers rows of `table` (`vocab x dim`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, dim) = dims2(tv).ok_or_else(|| Error::shape("embedding", tv.shape(), &[]))?;
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::InvalidArgument(format!(
                    "embedding: id {id} out of vocabulary of size {vocab}"
                )));
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), dim, data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let m = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Runs reverse accumulation from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if nodes[$v.0].requires_grad {
                    let len = nodes[$v.0].value.len();
                    let $buf: &mut Vec<f64> = grads[$v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body
                }
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = dims2(av).unwrap();
                let n = bv.shape()[1];
                with_grad!(*a, |ga| {
                    gemm(m, n, k, g, false, bv.data(), true, ga, true);
                });
                with_grad!(*b, |gb| {
                    gemm(k, m, n, av.data(), true, g, false, gb, true);
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*b, |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                with_grad!(*a, |ga| {
                    for ((x, y), bb) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *x += y * bb;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((x, y), aa) in gb.iter_mut().zip(g).zip(av.data()) {
                        *x += y * aa;
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                });
            }
            Op::AddBias(a, bias) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                });
                with_grad!(*bias, |gb| {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(&nodes[a.0].value).unwrap();
                with_grad!(*a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.len();
                        with_grad!(p, |gp| {
                            gp.iter_mut()
                                .zip(&g[offset..offset + len])
                                .for_each(|(x, y)| *x += y);
                        });
                        offset += len;
                    }
                } else {
                    let total: usize = node.value.shape()[1];
                    let mut col = 0;
                    for &p in parts {
                        let (r, c) = dims2(&nodes[p.0].value).unwrap();
                        with_grad!(p, |gp| {
                            for i in 0..r {
                                let src = &g[i * total + col..i * total + col + c];
                                gp[i * c..(i + 1) * c]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(x, y)| *x += y);
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Slice { src, axis, start } => {
                let (_, c) = dims2(&nodes[src.0].value).unwrap();
                let (orow, ocol) = dims2(&node.value).unwrap();
                with_grad!(*src, |gs| {
                    if *axis == 0 {
                        let base = start * c;
                        gs[base..base + g.len()]
                            .iter_mut()
                            .zip(g)
                            .for_each(|(x, y)| *x += y);
                    } else {
                        for i in 0..orow {
                            let dst = &mut gs[i * c + start..i * c + start + ocol];
                            dst.iter_mut()
                                .zip(&g[i * ocol..(i + 1) * ocol])
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let c = node.value.last_dim();
                with_grad!(*a, |ga| {
                    for ((y, gy), gx) in node
                        .value
                        .data()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(ga.chunks_mut(c))
                    {
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for ((x, yy), gg) in gx.iter_mut().zip(y).zip(gy) {
                            *x += yy * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { src, inv_std } => {
                let c = node.value.last_dim();
                let cf = c as f64;
                with_grad!(*src, |gs| {
                    for (((y, gy), gx), inv) in node
                        .value
                        .data()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gs.chunks_mut(c))
                        .zip(inv_std)
                    {
                        let mean_g = gy.iter().sum::<f64>() / cf;
                        let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cf;
                        for ((x, yy), gg) in gx.iter_mut().zip(y).zip(gy) {
                            *x += inv * (gg - mean_g - yy * mean_gy);
                        }
                    }
                });
            }
            Op::RmsNorm { src, gain, inv_rms } => {
                let xv = &nodes[src.0].value;
                let gv = &nodes[gain.0].value;
                let c = xv.last_dim();
                let cf = c as f64;
                with_grad!(*gain, |gg| {
                    for ((x, gy), inv) in xv.data().chunks(c).zip(g.chunks(c)).zip(inv_rms) {
                        for j in 0..c {
                            gg[j] += gy[j] * x[j] * inv;
                        }
                    }
                });
                with_grad!(*src, |gs| {
                    let mut dn = vec![0.0; c];
                    for (((x, gy), gx), inv) in xv
                        .data()
                        .chunks(c)
                        .zip(g.chunks(c))
                        .zip(gs.chunks_mut(c))
                        .zip(inv_rms)
                    {
                        let mut dot = 0.0;
                        for j in 0..c {
                            dn[j] = gy[j] * gv.data()[j];
                            dot += dn[j] * x[j] * inv;
                        }
                        dot /= cf;
                        for j in 0..c {
                            gx[j] += inv * (dn[j] - x[j] * inv * dot);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((x, gg), xx) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += gg * gelu_grad(*xx);
                    }
                });
            }
            Op::Silu(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((x, gg), xx) in ga.iter_mut().zip(g).zip(av.data()) {
                        let s = sigmoid(*xx);
                        *x += gg * s * (1.0 + xx * (1.0 - s));
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let dim = nodes[table.0].value.last_dim();
                with_grad!(*table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        gt[id * dim..(id + 1) * dim]
                            .iter_mut()
                            .zip(&g[row * dim..(row + 1) * dim])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len().max(1) as f64;
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                });
            }
            Op::Ln(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((x, gg), xx) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += gg / xx;
                    }
                });
            }
            Op::Square(a) => {
                let av = &nodes[a.0].value;
                with_grad!(*a, |ga| {
                    for ((x, gg), xx) in ga.iter_mut().zip(g).zip(av.data()) {
                        *x += 2.0 * xx * gg;
                    }
                });
            }
        }
    }
}
