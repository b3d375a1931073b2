//! Define-by-run tape. Nodes are appended in construction order and the
//! backward pass walks them in exact reverse order.

use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Sum(Var),
    SumAxis(Var, usize),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    ClampMin(Var, f64),
    Concat(Vec<Var>, usize),
    Gather(Var, Vec<usize>),
    Broadcast(Var),
    Reshape(Var),
    CumsumExclusive(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let needs = self.nodes[x.0].needs_grad;
        self.push(value, op, needs)
    }

    fn binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, needs)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, value, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| -v);
        self.unary(x, value, Op::Neg(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.unary(x, value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.unary(x, value, Op::AddScalar(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch {:?} x {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
            0.0,
        );
        self.binary(a, b, Tensor::new([m, n], out), Op::MatMul(a, b))
    }

    /// `x . w + b` with `x: [m, k]`, `w: [k, n]` and `b: [n]` added to
    /// every row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        assert!(
            sx.len() == 2 && sw.len() == 2 && sx[1] == sw[0] && sb == [sw[1]],
            "affine shape mismatch {:?} x {:?} + {:?}",
            sx,
            sw,
            sb
        );
        let (m, k, n) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bias);
        }
        gemm(
            m,
            k,
            n,
            self.value(x).data(),
            (k, 1),
            self.value(w).data(),
            (n, 1),
            &mut out,
            1.0,
        );
        let needs = [x, w, b].iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(Tensor::new([m, n], out), Op::Affine(x, w, b), needs)
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.unary(x, value, Op::Sum(x))
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(
            axis < shape.len(),
            "sum_axis axis {} out of range for {:?}",
            axis,
            shape
        );
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        if inner == 1 {
            for (o, row) in out.iter_mut().zip(src.chunks_exact(len.max(1))) {
                *o = row.iter().sum();
            }
            let mut out_shape = shape;
            out_shape.remove(axis);
            return self.unary(x, Tensor::new(out_shape, out), Op::SumAxis(x, axis));
        }
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let base = (o * len + l) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.unary(x, Tensor::new(out_shape, out), Op::SumAxis(x, axis))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.unary(x, value, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::ln);
        self.unary(x, value, Op::Log(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::sin);
        self.unary(x, value, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::cos);
        self.unary(x, value, Op::Cos(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary(x, value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.unary(x, value, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(softplus);
        self.unary(x, value, Op::Softplus(x))
    }

    /// `max(x, lo)`; the gradient passes only where `x > lo`.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let value = self.value(x).map(|v| v.max(lo));
        self.unary(x, value, Op::ClampMin(x, lo))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let first = self.shape(parts[0]).to_vec();
        assert!(
            axis < first.len(),
            "concat axis {} out of range for {:?}",
            axis,
            first
        );
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(
                s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat shape mismatch {:?} vs {:?}",
                s,
                first
            );
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = parts.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(
            Tensor::new(shape, out),
            Op::Concat(parts.to_vec(), axis),
            needs,
        )
    }

    /// `out.flat[i] = x.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>, shape: impl Into<Vec<usize>>) -> Var {
        let src = self.value(x).data();
        let data = indices
            .iter()
            .map(|&i| {
                assert!(
                    i < src.len(),
                    "gather index {} out of bounds ({})",
                    i,
                    src.len()
                );
                src[i]
            })
            .collect();
        let value = Tensor::new(shape, data);
        self.unary(x, value, Op::Gather(x, indices))
    }

    /// Expand to `shape` with numpy rules: leading axes may be added and
    /// unit axes stretched.
    pub fn broadcast_to(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let shape = shape.into();
        let src_shape = self.shape(x).to_vec();
        let src_strides = broadcast_strides(&src_shape, &shape);
        let mut out = vec![0.0; shape.iter().product()];
        expand(self.value(x).data(), &shape, &src_strides, &mut out);
        self.unary(x, Tensor::new(shape, out), Op::Broadcast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Var {
        let value = self.value(x).clone().reshaped(shape);
        self.unary(x, value, Op::Reshape(x))
    }

    /// Exclusive prefix sum along the last axis: `out[..., j] = sum_{k<j} x[..., k]`.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().expect("cumsum of a scalar");
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        if len > 0 {
            for (row_in, row_out) in src.chunks(len).zip(out.chunks_mut(len)) {
                let mut acc = 0.0;
                for (o, &v) in row_out.iter_mut().zip(row_in) {
                    *o = acc;
                    acc += v;
                }
            }
        }
        self.unary(x, Tensor::new(shape, out), Op::CumsumExclusive(x))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every leaf
    /// that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        // Only leaves keep their gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if wants(*a) {
                    send(*a, g.clone(), grads);
                }
                if wants(*b) {
                    send(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                send(*a, g.clone(), grads);
                if wants(*b) {
                    send(*b, g.map(|v| -v), grads);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |gv, bv| gv * bv), grads);
                }
                if wants(*b) {
                    send(*b, g.zip_map(val(*a), |gv, av| gv * av), grads);
                }
            }
            Op::Div(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(val(*b), |gv, bv| gv / bv), grads);
                }
                if wants(*b) {
                    let num = val(*a);
                    let den = val(*b);
                    let data = g
                        .data()
                        .iter()
                        .zip(num.data())
                        .zip(den.data())
                        .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                        .collect();
                    send(*b, Tensor::new(den.shape().to_vec(), data), grads);
                }
            }
            Op::Neg(x) => send(*x, g.map(|v| -v), grads),
            Op::Scale(x, c) => send(*x, g.map(|v| v * c), grads),
            Op::AddScalar(x) => send(*x, g.clone(), grads),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if wants(*a) {
                    // dA = dC . B^T
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut out, 0.0);
                    send(*a, Tensor::new([m, k], out), grads);
                }
                if wants(*b) {
                    // dB = A^T . dC
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut out, 0.0);
                    send(*b, Tensor::new([k, n], out), grads);
                }
            }
            Op::Affine(x, w, b) => {
                let (xv, wv) = (val(*x), val(*w));
                let (m, k, n) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                if wants(*x) {
                    let mut out = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), (n, 1), wv.data(), (1, n), &mut out, 0.0);
                    send(*x, Tensor::new([m, k], out), grads);
                }
                if wants(*w) {
                    let mut out = vec![0.0; k * n];
                    gemm(k, m, n, xv.data(), (1, k), g.data(), (n, 1), &mut out, 0.0);
                    send(*w, Tensor::new([k, n], out), grads);
                }
                if wants(*b) {
                    let mut out = vec![0.0; n];
                    for row in g.data().chunks_exact(n.max(1)) {
                        for (o, v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    send(*b, Tensor::new([n], out), grads);
                }
            }
            Op::Sum(x) => {
                let gv = g.item();
                send(*x, Tensor::full(val(*x).shape().to_vec(), gv), grads);
            }
            Op::SumAxis(x, axis) => {
                let shape = val(*x).shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        out[base..base + inner].copy_from_slice(src);
                    }
                }
                send(*x, Tensor::new(shape, out), grads);
            }
            Op::Exp(x) => send(*x, g.zip_map(&node.value, |gv, y| gv * y), grads),
            Op::Log(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv / xv), grads),
            Op::Sin(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv * xv.cos()), grads),
            Op::Cos(x) => send(*x, g.zip_map(val(*x), |gv, xv| -gv * xv.sin()), grads),
            Op::Relu(x) => send(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
                grads,
            ),
            Op::Sigmoid(x) => send(
                *x,
                g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)),
                grads,
            ),
            Op::Softplus(x) => send(*x, g.zip_map(val(*x), |gv, xv| gv * sigmoid(xv)), grads),
            Op::ClampMin(x, lo) => {
                let lo = *lo;
                send(
                    *x,
                    g.zip_map(val(*x), |gv, xv| if xv > lo { gv } else { 0.0 }),
                    grads,
                )
            }
            Op::Concat(parts, axis) => {
                let out_shape = node.value.shape();
                let total = out_shape[*axis];
                let (outer, _, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).shape()[*axis];
                    if wants(p) {
                        let mut out = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        send(p, Tensor::new(val(p).shape().to_vec(), out), grads);
                    }
                    offset += len;
                }
            }
            Op::Gather(x, indices) => {
                let src = val(*x);
                let mut out = vec![0.0; src.numel()];
                for (&i, &gv) in indices.iter().zip(g.data()) {
                    out[i] += gv;
                }
                send(*x, Tensor::new(src.shape().to_vec(), out), grads);
            }
            Op::Broadcast(x) => {
                let src_shape = val(*x).shape().to_vec();
                let src_strides = broadcast_strides(&src_shape, node.value.shape());
                let mut out = vec![0.0; src_shape.iter().product()];
                reduce_into(g.data(), node.value.shape(), &src_strides, &mut out);
                send(*x, Tensor::new(src_shape, out), grads);
            }
            Op::Reshape(x) => send(*x, g.clone().reshaped(val(*x).shape().to_vec()), grads),
            Op::CumsumExclusive(x) => {
                let shape = val(*x).shape().to_vec();
                let len = *shape.last().unwrap();
                let mut out = vec![0.0; g.numel()];
                if len > 0 {
                    for (row_g, row_out) in g.data().chunks(len).zip(out.chunks_mut(len)) {
                        let mut acc = 0.0;
                        for j in (0..len).rev() {
                            row_out[j] = acc;
                            acc += row_g[j];
                        }
                    }
                }
                send(*x, Tensor::new(shape, out), grads);
            }
        }
    }
}

/// Gradients of the leaves of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` is not a grad-requiring leaf reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v).to_vec()))
    }
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
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// `c[m, n] = a[m, k] . b[k, n]` where `a`/`b` are given with (row, col) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller supplies buffers whose extents match the dimensions
    // and strides; every index touched lies within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source strides aligned to `target`; stretched axes get stride 0.
fn broadcast_strides(src: &[usize], target: &[usize]) -> Vec<usize> {
    assert!(
        src.len() <= target.len(),
        "cannot broadcast {:?} to {:?}",
        src,
        target
    );
    let pad = target.len() - src.len();
    let natural = strides(src);
    (0..target.len())
        .map(|i| {
            if i < pad {
                return 0;
            }
            let s = src[i - pad];
            if s == target[i] {
                natural[i - pad]
            } else if s == 1 {
                0
            } else {
                panic!("cannot broadcast {:?} to {:?}", src, target)
            }
        })
        .collect()
}

fn expand(src: &[f64], shape: &[usize], src_strides: &[usize], out: &mut [f64]) {
    fn rec(src: &[f64], shape: &[usize], st: &[usize], out: &mut [f64], base: usize) {
        if shape.is_empty() {
            out[0] = src[base];
            return;
        }
        if shape.len() == 1 {
            if st[0] == 0 {
                out.fill(src[base]);
            } else {
                out.copy_from_slice(&src[base..base + shape[0]]);
            }
            return;
        }
        let chunk: usize = shape[1..].iter().product();
        for i in 0..shape[0] {
            rec(
                src,
                &shape[1..],
                &st[1..],
                &mut out[i * chunk..(i + 1) * chunk],
                base + i * st[0],
            );
        }
    }
    if !out.is_empty() {
        rec(src, shape, src_strides, out, 0);
    }
}

fn reduce_into(g: &[f64], shape: &[usize], src_strides: &[usize], out: &mut [f64]) {
    fn rec(g: &[f64], shape: &[usize], st: &[usize], out: &mut [f64], base: usize) {
        if shape.is_empty() {
            out[base] += g[0];
            return;
        }
        if shape.len() == 1 {
            if st[0] == 0 {
                out[base] += g.iter().sum::<f64>();
            } else {
                for (o, v) in out[base..base + shape[0]].iter_mut().zip(g) {
                    *o += v;
                }
            }
            return;
        }
        let chunk: usize = shape[1..].iter().product();
        for i in 0..shape[0] {
            rec(
                &g[i * chunk..(i + 1) * chunk],
                &shape[1..],
                &st[1..],
                out,
                base + i * st[0],
            );
        }
    }
    if !g.is_empty() {
        rec(g, shape, src_strides, out, 0);
    }
}
