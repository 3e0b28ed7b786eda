use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{self, axis_split, gemm, inverse_perm, permute, transpose2};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedFill {
        x: Var,
        mask: Arc<Vec<bool>>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    SmoothL1 {
        a: Var,
        b: Var,
        beta: T,
    },
    Cosine {
        a: Var,
        b: Var,
        na: Vec<T>,
        nb: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation record. Nodes are stored in creation order, which
/// is a topological order, so backward is a single reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    flops: BTreeMap<&'static str, u64>,
    scope: &'static str,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            flops: BTreeMap::new(),
            scope: "other",
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets the label under which subsequent matmul FLOPs are counted and
    /// returns the previous label.
    pub fn set_scope(&mut self, scope: &'static str) -> &'static str {
        std::mem::replace(&mut self.scope, scope)
    }

    /// Matmul FLOPs (2 per multiply-add) recorded so far, per scope label.
    pub fn flops(&self) -> &BTreeMap<&'static str, u64> {
        &self.flops
    }

    pub fn total_flops(&self) -> u64 {
        self.flops.values().sum()
    }

    /// Bytes held by every recorded node value.
    pub fn bytes(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len() * T::BYTES).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Same value as `x`, no gradient flows back through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    // ---- forward ops -------------------------------------------------------

    /// `[.., m, k] x [.., k, n]` with matching leading dims, or
    /// `[.., m, k] x [k, n]` with a shared right operand.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let lead_a = &sa[..sa.len() - 2];
        let batch: usize = lead_a.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && lead_a != &sb[..sb.len() - 2] {
            return Err(bad());
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if shared_rhs {
                gemm(av, bv, &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm(
                        &av[bi * m * k..(bi + 1) * m * k],
                        &bv[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        *self.flops.entry(self.scope).or_insert(0) += 2 * (batch * m * k * n) as u64;
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b), rg))
    }

    /// Adds a `[n]` bias along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let n = *sx.last().unwrap_or(&0);
        if sb != [n] {
            return Err(Error::shape("add_bias", format!("{sx:?} + {sb:?}")));
        }
        let bv = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&v, &b)| v + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(sx, data)?, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Scale(x, c),
            rg,
        )
    }

    /// `linear(x, w, b) = x w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// General axis permutation.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{shape:?} by {perm:?}")));
        }
        let (data, out_shape) = permute(self.value(x).data(), &shape, perm);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute(x, perm.to_vec()),
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(x))));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(&p) => self.shape(p).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ax = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ax * inner..(o + 1) * ax * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{shape:?} axis {axis} [{start}, {})", start + len),
            ));
        }
        let (outer, ax, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ax * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Slice {
                src: x,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape("split", format!("{shape:?} axis {axis} into {sizes:?}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, ax, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * ax + j) * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..ax {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = T::zero();
                for j in 0..ax {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..ax {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax { x, axis }, rg))
    }

    /// Replaces entries whose mask bit is false with `-inf`. The mask covers
    /// the trailing `[q, k]` block and is repeated over leading axes.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || mask.len() != shape[r - 2] * shape[r - 1] {
            return Err(Error::shape(
                "masked_fill",
                format!("mask of {} over {shape:?}", mask.len()),
            ));
        }
        let ml = mask.len();
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % ml] { v } else { T::neg_infinity() })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::MaskedFill { x, mask }, rg))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{shape:?} with gamma {:?} beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d;
        let dn = T::of(d as f64);
        let eps = T::of(eps);
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / dn;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Gelu(x),
            rg,
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kernels::sigmoid(v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, data).expect("same shape"),
            Op::Sigmoid(x),
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().fold(T::zero(), |a, &v| a + v) / T::of(t.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s = av
            .iter()
            .zip(bv)
            .fold(T::zero(), |s, (&x, &y)| s + (x - y) * (x - y));
        let v = s / T::of(av.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), rg))
    }

    /// Mean Huber-style smooth L1: `0.5 d^2 / beta` below `beta`, `|d| - beta/2` above.
    pub fn smooth_l1_loss(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.same_shape("smooth_l1_loss", a, b)?;
        if beta <= 0.0 {
            return Err(Error::contract("smooth_l1 beta must be positive"));
        }
        let beta = T::of(beta);
        let half = T::of(0.5);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let s = av.iter().zip(bv).fold(T::zero(), |s, (&x, &y)| {
            let d = (x - y).abs();
            s + if d < beta { half * d * d / beta } else { d - half * beta }
        });
        let v = s / T::of(av.len() as f64);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(v), Op::SmoothL1 { a, b, beta }, rg))
    }

    /// Row-wise cosine similarity along the last axis; output has one entry per row.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let rows = av.len() / d;
        let eps = T::of(1e-8);
        let mut na = Vec::with_capacity(rows);
        let mut nb = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let ar = &av[r * d..(r + 1) * d];
            let br = &bv[r * d..(r + 1) * d];
            let dot = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
            let la = ar.iter().fold(T::zero(), |s, &x| s + x * x).sqrt().max(eps);
            let lb = br.iter().fold(T::zero(), |s, &x| s + x * x).sqrt().max(eps);
            na.push(la);
            nb.push(lb);
            out.push(dot / (la * lb));
        }
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Cosine { a, b, na, nb },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of all `requires_grad`
    /// leaves are retained; intermediate gradients are dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let is_leaf = matches!(self.nodes[i].op, Op::Leaf);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]; `None` if nothing reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Like [`Graph::grad`] but materializes zeros for untouched leaves.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        self.grad(v)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); self.value(v).len()])
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if self.requires_grad(a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    if shared_rhs {
                        let bt = transpose2(bv, k, n);
                        gemm(g, &bt, &mut da, batch * m, n, k);
                    } else {
                        for bi in 0..batch {
                            let bt = transpose2(&bv[bi * k * n..(bi + 1) * k * n], k, n);
                            gemm(
                                &g[bi * m * n..(bi + 1) * m * n],
                                &bt,
                                &mut da[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    self.acc(grads, a, |s| add_into(s, &da));
                }
                if self.requires_grad(b) {
                    let mut db = vec![T::zero(); if shared_rhs { k * n } else { batch * k * n }];
                    if shared_rhs {
                        let at = transpose2(av, batch * m, k);
                        gemm(&at, g, &mut db, k, batch * m, n);
                    } else {
                        for bi in 0..batch {
                            let at = transpose2(&av[bi * m * k..(bi + 1) * m * k], m, k);
                            gemm(
                                &at,
                                &g[bi * m * n..(bi + 1) * m * n],
                                &mut db[bi * k * n..(bi + 1) * k * n],
                                k,
                                m,
                                n,
                            );
                        }
                    }
                    self.acc(grads, b, |s| add_into(s, &db));
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, |s| add_into(s, g));
                self.acc(grads, b, |s| add_into(s, g));
            }
            &Op::AddBias(x, bias) => {
                self.acc(grads, x, |s| add_into(s, g));
                let n = self.value(bias).len();
                self.acc(grads, bias, |s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.acc(grads, a, |s| {
                    for ((d, &gi), &y) in s.iter_mut().zip(g).zip(bv) {
                        *d = *d + gi * y;
                    }
                });
                self.acc(grads, b, |s| {
                    for ((d, &gi), &x) in s.iter_mut().zip(g).zip(av) {
                        *d = *d + gi * x;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.acc(grads, x, |s| {
                    for (d, &gi) in s.iter_mut().zip(g) {
                        *d = *d + gi * c;
                    }
                });
            }
            Op::Permute(x, perm) => {
                let x = *x;
                let out_shape = node.value.shape();
                let (back, _) = permute(g, out_shape, &inverse_perm(perm));
                self.acc(grads, x, |s| add_into(s, &back));
            }
            &Op::Reshape(x) => {
                self.acc(grads, x, |s| add_into(s, g));
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, axis);
                let mut offset = 0;
                for &p in parts {
                    let ax = self.shape(p)[axis];
                    self.acc(grads, p, |s| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ax) * inner];
                            add_into(&mut s[o * ax * inner..(o + 1) * ax * inner], src);
                        }
                    });
                    offset += ax;
                }
            }
            &Op::Slice { src, axis, start } => {
                let src_shape = self.shape(src).to_vec();
                let len = node.value.shape()[axis];
                let (outer, ax, inner) = axis_split(&src_shape, axis);
                self.acc(grads, src, |s| {
                    for o in 0..outer {
                        let base = o * ax * inner + start * inner;
                        add_into(
                            &mut s[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                });
            }
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, ax, inner) = axis_split(node.value.shape(), axis);
                self.acc(grads, x, |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * ax + j) * inner + i;
                            let mut dot = T::zero();
                            for j in 0..ax {
                                dot = dot + g[at(j)] * y[at(j)];
                            }
                            for j in 0..ax {
                                s[at(j)] = s[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                let ml = mask.len();
                self.acc(grads, *x, |s| {
                    for (idx, (d, &gi)) in s.iter_mut().zip(g).enumerate() {
                        if mask[idx % ml] {
                            *d = *d + gi;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                let rows = xhat.len() / d;
                let dn = T::of(d as f64);
                self.acc(grads, *x, |s| {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            m1 = m1 + dxh;
                            m2 = m2 + dxh * xr[j];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            s[r * d + j] = s[r * d + j] + rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gamma, |s| {
                    for r in 0..rows {
                        for j in 0..d {
                            s[j] = s[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |s| {
                    for row in g.chunks(d) {
                        add_into(s, row);
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data();
                self.acc(grads, x, |s| {
                    for ((d, &gi), &v) in s.iter_mut().zip(g).zip(xv) {
                        *d = *d + gi * kernels::gelu_grad(v);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = node.value.data();
                self.acc(grads, x, |s| {
                    for ((d, &gi), &yv) in s.iter_mut().zip(g).zip(y) {
                        *d = *d + gi * yv * (T::one() - yv);
                    }
                });
            }
            &Op::Sum(x) => {
                self.acc(grads, x, |s| {
                    for d in s.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            &Op::Mean(x) => {
                let scale = g[0] / T::of(self.value(x).len() as f64);
                self.acc(grads, x, |s| {
                    for d in s.iter_mut() {
                        *d = *d + scale;
                    }
                });
            }
            &Op::Mse(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let c = T::of(2.0) * g[0] / T::of(av.len() as f64);
                self.acc(grads, a, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d + c * (x - y);
                    }
                });
                self.acc(grads, b, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d - c * (x - y);
                    }
                });
            }
            &Op::SmoothL1 { a, b, beta } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let c = g[0] / T::of(av.len() as f64);
                let dl = |x: T, y: T| {
                    let diff = x - y;
                    if diff.abs() < beta {
                        diff / beta
                    } else if diff > T::zero() {
                        T::one()
                    } else {
                        -T::one()
                    }
                };
                self.acc(grads, a, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d + c * dl(x, y);
                    }
                });
                self.acc(grads, b, |s| {
                    for ((d, &x), &y) in s.iter_mut().zip(av).zip(bv) {
                        *d = *d - c * dl(x, y);
                    }
                });
            }
            Op::Cosine { a, b, na, nb } => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let cos = node.value.data();
                let d = av.len() / na.len();
                // d cos / d a = b / (|a||b|) - cos * a / |a|^2
                self.acc(grads, a, |s| {
                    for r in 0..na.len() {
                        let inv = T::one() / (na[r] * nb[r]);
                        let ca = cos[r] / (na[r] * na[r]);
                        for j in 0..d {
                            let idx = r * d + j;
                            s[idx] = s[idx] + g[r] * (bv[idx] * inv - ca * av[idx]);
                        }
                    }
                });
                self.acc(grads, b, |s| {
                    for r in 0..na.len() {
                        let inv = T::one() / (na[r] * nb[r]);
                        let cb = cos[r] / (nb[r] * nb[r]);
                        for j in 0..d {
                            let idx = r * d + j;
                            s[idx] = s[idx] + g[r] * (av[idx] * inv - cb * bv[idx]);
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
