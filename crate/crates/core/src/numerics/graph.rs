//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and enough context to
//! run its vector-Jacobian product. Node indices are a topological order by
//! construction, so the backward pass is a single reverse sweep.

use super::kernels;
use super::tensor::Tensor;
use crate::error::{EnkiError, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Gather {
        x: Var,
        index: Vec<usize>,
        rows_in: usize,
        rows_out: usize,
    },
    Scatter {
        x: Var,
        index: Vec<usize>,
        rows_in: usize,
        rows_out: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    /// A leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(g.clone(), node.value.shape()).expect("gradient shape"))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(g, &shape).expect("gradient shape"))
    }

    /// Drop all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---- elementwise ------------------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (long, short) = if sa.len() >= sb.len() { (sa, sb) } else { (sb, sa) };
        if long[long.len() - short.len()..] != *short {
            return Err(EnkiError::shape(op, sa, sb));
        }
        let la: usize = sa.iter().product();
        let lb: usize = sb.iter().product();
        if la >= lb {
            Ok(sa.to_vec())
        } else {
            Ok(sb.to_vec())
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let da = self.value(a).data();
        let db = self.value(b).data();
        let n = da.len().max(db.len());
        if da.len() == db.len() {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if da.len() == n {
            let m = db.len();
            da.chunks(m).flat_map(|ch| ch.iter().zip(db).map(|(&x, &y)| f(x, y))).collect()
        } else {
            let m = da.len();
            db.chunks(m).flat_map(|ch| da.iter().zip(ch).map(|(&x, &y)| f(x, y))).collect()
        }
    }

    /// Elementwise sum; the smaller operand's shape must be a suffix of the larger's.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast("add", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast("sub", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast("mul", a, b)?;
        let data = self.zip_broadcast(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(data, t.shape()).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Exact-erf GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * kernels::normal_cdf(v)).collect();
        let value = Tensor::new(data, t.shape()).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    // ---- linear algebra ---------------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(EnkiError::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != kb || !(batch_b.is_empty() || batch_a == batch_b) {
            return Err(EnkiError::shape("matmul", &sa, &sb));
        }
        let batch: usize = batch_a.iter().product();
        let mut out_shape = batch_a.to_vec();
        out_shape.extend([m, n]);
        let b_stride = if batch_b.is_empty() { 0 } else { k * n };
        let out = kernels::gemm_batched_new(
            batch,
            m,
            k,
            n,
            self.value(a).data(),
            false,
            m * k,
            self.value(b).data(),
            false,
            b_stride,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(out, &out_shape)?, Op::MatMul(a, b), rg))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(EnkiError::shape("transpose", self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        let t = self.value(x);
        let (data, shape) = kernels::permute(t.data(), t.shape(), &axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Transpose(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(EnkiError::shape("permute", self.shape(x), axes));
        }
        let t = self.value(x);
        let (data, shape) = kernels::permute(t.data(), t.shape(), axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(data, &shape)?, Op::Permute(x, axes.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| EnkiError::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(EnkiError::shape("concat", &base, &[axis]));
        }
        let mut total_axis = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(EnkiError::shape("concat", &base, s));
            }
            total_axis += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let mut out = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor::new(out, &out_shape)?, Op::Concat(inputs.to_vec(), axis), rg))
    }

    fn check_seq(&self, op: &'static str, x: Var, index: &[usize], rows: usize, bound: usize) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 3 {
            return Err(EnkiError::shape(op, s, &[]));
        }
        let (batch, d) = (s[0], s[2]);
        if index.len() != batch * rows {
            return Err(EnkiError::shape(op, s, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= bound) {
            return Err(EnkiError::invalid(format!("{op}: index {bad} out of range {bound}")));
        }
        Ok((batch, d))
    }

    /// Select rows along the sequence axis: `x` is `[B, N, D]`, `index` holds
    /// `B·rows_out` entries in `0..N`, result is `[B, rows_out, D]`.
    pub fn gather(&mut self, x: Var, index: &[usize], rows_out: usize) -> Result<Var> {
        let rows_in = self.shape(x).get(1).copied().unwrap_or(0);
        let (batch, d) = self.check_seq("gather", x, index, rows_out, rows_in)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(batch * rows_out * d);
        for b in 0..batch {
            for r in 0..rows_out {
                let row = b * rows_in + index[b * rows_out + r];
                out.extend_from_slice(&src[row * d..(row + 1) * d]);
            }
        }
        let rg = self.any_grad(&[x]);
        let op = Op::Gather {
            x,
            index: index.to_vec(),
            rows_in,
            rows_out,
        };
        Ok(self.push(Tensor::new(out, &[batch, rows_out, d])?, op, rg))
    }

    /// Inverse of [`Graph::gather`]: row `r` of `x` lands at `index[r]` of a
    /// zero `[B, rows_out, D]` tensor (duplicates accumulate).
    pub fn scatter(&mut self, x: Var, index: &[usize], rows_out: usize) -> Result<Var> {
        let rows_in = self.shape(x).get(1).copied().unwrap_or(0);
        let (batch, d) = self.check_seq("scatter", x, index, rows_in, rows_out)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * rows_out * d];
        for b in 0..batch {
            for r in 0..rows_in {
                let dst = b * rows_out + index[b * rows_in + r];
                let s = (b * rows_in + r) * d;
                for c in 0..d {
                    out[dst * d + c] += src[s + c];
                }
            }
        }
        let rg = self.any_grad(&[x]);
        let op = Op::Scatter {
            x,
            index: index.to_vec(),
            rows_in,
            rows_out,
        };
        Ok(self.push(Tensor::new(out, &[batch, rows_out, d])?, op, rg))
    }

    // ---- reductions & normalisation ---------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(EnkiError::invalid("mean of an empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| EnkiError::shape("softmax", &[], &[]))?;
        let mut out = t.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    z += *v;
                }
                let inv = 1.0 / z;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let value = Tensor::new(out, t.shape())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Normalise over the last axis, then apply `gain` and `shift`.
    /// `eps` sits inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| EnkiError::shape("layer_norm", &[], &[]))?;
        if d == 0 || self.shape(gain) != [d] || self.shape(shift) != [d] {
            return Err(EnkiError::shape("layer_norm", t.shape(), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(EnkiError::invalid("layer_norm eps must be positive"));
        }
        let g = self.value(gain).data();
        let s = self.value(shift).data();
        let rows = t.len() / d;
        let mut xhat = Vec::with_capacity(t.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (c, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[c] + s[c]);
            }
        }
        let value = Tensor::new(out, t.shape())?;
        let rg = self.any_grad(&[x, gain, shift]);
        let op = Op::LayerNorm {
            x,
            gain,
            shift,
            xhat,
            rstd,
        };
        Ok(self.push(value, op, rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Propagate gradients of a scalar `loss` to every reachable node that
    /// requires one. Leaf gradients are kept; interior ones are freed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(EnkiError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(EnkiError::shape("backward", self.shape(loss), &[]));
        }
        if !self.requires_grad(loss) {
            return Err(EnkiError::DetachedGraph);
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
        }
        Ok(())
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` does
    /// not take gradients.
    fn slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    /// Add a freshly computed gradient, adopting the buffer when `v` has none yet.
    fn acc_owned(&mut self, v: Var, dv: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(slot) => slot.iter_mut().zip(&dv).for_each(|(s, d)| *s += d),
            empty => *empty = Some(dv),
        }
    }

    /// Accumulate `factor·g` into `v`, summing over broadcast repeats.
    fn acc_scaled(&mut self, v: Var, g: &[f64], factor: f64) {
        if let Some(slot) = self.slot(v) {
            let m = slot.len();
            for ch in g.chunks(m) {
                slot.iter_mut().zip(ch).for_each(|(s, gi)| *s += gi * factor);
            }
        }
    }

    /// Accumulate `g ∘ other` into `v`; any of the three may be the smaller,
    /// repeated operand.
    fn acc_mul(&mut self, v: Var, g: &[f64], other: &[f64]) {
        if let Some(slot) = self.slot(v) {
            let m = slot.len();
            let o = other.len();
            if o == g.len() {
                for (ch, och) in g.chunks(m).zip(other.chunks(m)) {
                    for ((s, gi), oi) in slot.iter_mut().zip(ch).zip(och) {
                        *s += gi * oi;
                    }
                }
            } else {
                for (ch, sch) in g.chunks(o).zip(slot.chunks_mut(o)) {
                    for ((s, gi), oi) in sch.iter_mut().zip(ch).zip(other) {
                        *s += gi * oi;
                    }
                }
            }
        }
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        // Temporarily move the op out so the arms can borrow `self` freely.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_scaled(*a, g, 1.0);
                self.acc_scaled(*b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(*a, g, 1.0);
                self.acc_scaled(*b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let vb = self.nodes[b.0].value.data().to_vec();
                    self.acc_mul(*a, g, &vb);
                }
                if self.nodes[b.0].requires_grad {
                    let va = self.nodes[a.0].value.data().to_vec();
                    self.acc_mul(*b, g, &va);
                }
            }
            Op::Scale(x, f) => {
                let f = *f;
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().zip(g).for_each(|(s, gi)| *s += gi * f);
                }
            }
            Op::Gelu(x) => {
                let xs = self.nodes[x.0].value.data().to_vec();
                if let Some(slot) = self.slot(*x) {
                    for ((s, gi), &v) in slot.iter_mut().zip(g).zip(&xs) {
                        *s += gi * (kernels::normal_cdf(v) + v * kernels::normal_pdf(v));
                    }
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g),
            Op::Transpose(x) => {
                let nd = self.nodes[id].value.ndim();
                let mut axes: Vec<usize> = (0..nd).collect();
                axes.swap(nd - 2, nd - 1);
                let shape = self.nodes[id].value.shape().to_vec();
                let (back, _) = kernels::permute(g, &shape, &axes);
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().zip(&back).for_each(|(s, v)| *s += v);
                }
            }
            Op::Permute(x, axes) => {
                let shape = self.nodes[id].value.shape().to_vec();
                let (back, _) = kernels::permute(g, &shape, &kernels::inverse_axes(axes));
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().zip(&back).for_each(|(s, v)| *s += v);
                }
            }
            Op::Reshape(x) => {
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::Concat(inputs, axis) => {
                let shape = self.nodes[id].value.shape().to_vec();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.nodes[v.0].value.shape()[*axis] * inner;
                    if let Some(slot) = self.slot(v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            slot[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, v)| *s += v);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather {
                x,
                index,
                rows_in,
                rows_out,
            } => {
                let d = *self.nodes[id].value.shape().last().unwrap_or(&0);
                let (rows_in, rows_out) = (*rows_in, *rows_out);
                if let Some(slot) = self.slot(*x) {
                    let batch = index.len() / rows_out.max(1);
                    for b in 0..batch {
                        for r in 0..rows_out {
                            let dst = (b * rows_in + index[b * rows_out + r]) * d;
                            let src = (b * rows_out + r) * d;
                            for c in 0..d {
                                slot[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            Op::Scatter {
                x,
                index,
                rows_in,
                rows_out,
            } => {
                let d = *self.nodes[id].value.shape().last().unwrap_or(&0);
                let (rows_in, rows_out) = (*rows_in, *rows_out);
                if let Some(slot) = self.slot(*x) {
                    let batch = index.len() / rows_in.max(1);
                    for b in 0..batch {
                        for r in 0..rows_in {
                            let src = (b * rows_out + index[b * rows_in + r]) * d;
                            let dst = (b * rows_in + r) * d;
                            for c in 0..d {
                                slot[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().for_each(|s| *s += g0);
                }
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len() as f64;
                let g0 = g[0] / n;
                if let Some(slot) = self.slot(*x) {
                    slot.iter_mut().for_each(|s| *s += g0);
                }
            }
            Op::Softmax(x) => {
                let y = std::mem::take(&mut self.nodes[id].value);
                let n = (*y.shape().last().unwrap_or(&1)).max(1);
                if self.nodes[x.0].requires_grad {
                    let mut dx = Vec::with_capacity(y.len());
                    for (grow, yrow) in g.chunks(n).zip(y.data().chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        dx.extend(grow.iter().zip(yrow).map(|(gi, yi)| yi * (gi - dot)));
                    }
                    self.acc_owned(*x, dx);
                }
                self.nodes[id].value = y;
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                rstd,
            } => {
                let d = self.nodes[gain.0].value.len();
                let gv = self.nodes[gain.0].value.data().to_vec();
                if let Some(slot) = self.slot(*shift) {
                    for grow in g.chunks(d) {
                        slot.iter_mut().zip(grow).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(slot) = self.slot(*gain) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((s, gi), h) in slot.iter_mut().zip(grow).zip(hrow) {
                            *s += gi * h;
                        }
                    }
                }
                if let Some(slot) = self.slot(*x) {
                    let mut dh = vec![0.0; d];
                    for (((srow, grow), hrow), &r) in slot
                        .chunks_mut(d)
                        .zip(g.chunks(d))
                        .zip(xhat.chunks(d))
                        .zip(rstd.iter())
                    {
                        for c in 0..d {
                            dh[c] = grow[c] * gv[c];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            srow[c] += r * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
                        }
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn matmul_backward(&mut self, a: Var, b: Var, g: &[f64]) {
        let sa = self.nodes[a.0].value.shape().to_vec();
        let sb = self.nodes[b.0].value.shape().to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if self.nodes[a.0].requires_grad {
            // dA = dC · Bᵀ
            let vb = self.nodes[b.0].value.data();
            let b_stride = if shared_b { 0 } else { k * n };
            let da = kernels::gemm_batched_new(batch, m, n, k, g, false, m * n, vb, true, b_stride);
            self.acc_owned(a, da);
        }
        if self.nodes[b.0].requires_grad {
            // dB = Aᵀ · dC, summed over the batch when B is shared
            let va = self.nodes[a.0].value.data();
            let db = if shared_b {
                kernels::gemm_batched_new(1, k, batch * m, n, va, true, 0, g, false, 0)
            } else {
                kernels::gemm_batched_new(batch, k, m, n, va, true, m * k, g, false, m * n)
            };
            self.acc_owned(b, db);
        }
    }
}
