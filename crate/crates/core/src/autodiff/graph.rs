use std::collections::HashMap;

use super::kernels::{self, gemm};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Result, StatError};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    MulLast(Var, Var),
    Scale(Var, f32),
    Shift(Var),
    Sigmoid(Var),
    Gelu(Var),
    Square(Var),
    Log(Var),
    Pow(Var, f32),
    Clamp {
        a: Var,
        lo: f32,
        hi: f32,
    },
    MaxConst(Var, f32),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(f32, f32)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanLast(Var),
    StraightThrough(Var),
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Every op appends one node; [`Graph::backward`] replays
/// the tape in reverse.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    surrogate_forward: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros when no gradient reached it.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(StatError::shape(op, a, b));
    }
    Ok(())
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    /// Graph whose parameters require gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            surrogate_forward: false,
        }
    }

    /// Graph for evaluation only: parameters enter as constants.
    pub fn inference() -> Self {
        Graph {
            track_params: false,
            ..Self::new()
        }
    }

    /// When set, `straight_through` forwards its surrogate instead of the
    /// hard value. The backward pass is unchanged, so the recorded gradient
    /// is then the exact gradient of the forward function, which is what
    /// finite-difference checks need.
    pub fn set_surrogate_forward(&mut self, on: bool) {
        self.surrogate_forward = on;
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

    pub fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_data(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, rg: bool) -> Var {
        let value = Tensor::new(shape, data).expect("op output shape");
        self.push(value, op, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that requires gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Parameter leaf, recorded once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.tensor(id).clone(), Op::Leaf, self.track_params);
        self.params.insert(id, v);
        v
    }

    /// Parameters used by this graph, in id order.
    pub fn param_vars(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort();
        out
    }

    // ---- linear algebra ----

    /// `a [.., M, K] · b [K, N] -> [.., M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(StatError::shape("matmul", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = self.value(a).numel() / k.max(1);
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(out_shape, out, Op::MatMul(a, b), rg))
    }

    /// Batched product over identical leading dims:
    /// `a [.., M, K] · b [.., K, N]`, or `b [.., N, K]` transposed when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] {
            return Err(StatError::shape("bmm", &sa, &sb));
        }
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if k != kb {
            return Err(StatError::shape("bmm", &sa, &sb));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a);
            let db = self.data(b);
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let mut out_shape = sa[..r - 2].to_vec();
        out_shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(out_shape, out, Op::Bmm { a, b, trans_b }, rg))
    }

    /// `x · w + b` with `b` broadcast over leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bcast(y, b)
    }

    // ---- elementwise ----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var> {
        check_same(name, self.shape(a), self.shape(b))?;
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(shape, out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (a scalar `b` broadcasts everywhere).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(StatError::shape("add_bcast", sa, sb));
        }
        let inner = self.value(b).numel();
        let db = self.data(b);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(inner) {
            add_into(chunk, db);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(shape, out, Op::AddBcast(a, b), rg))
    }

    /// `a [.., X] * b [..]`: `b` broadcast along the last axis of `a`.
    pub fn mul_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sa[..sa.len() - 1] != *sb {
            return Err(StatError::shape("mul_last", sa, sb));
        }
        let inner = sa[sa.len() - 1];
        let db = self.data(b);
        let mut out = self.data(a).to_vec();
        if inner > 0 {
            for (chunk, &s) in out.chunks_mut(inner).zip(db) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push_data(shape, out, Op::MulLast(a, b), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let out: Vec<f32> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push_data(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f32::ln, Op::Log(a))
    }

    pub fn powf(&mut self, a: Var, e: f32) -> Var {
        self.unary(a, |x| x.powf(e), Op::Pow(a, e))
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi })
    }

    /// `max(a, c)` elementwise (hinge).
    pub fn max_const(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x.max(c), Op::MaxConst(a, c))
    }

    /// Forward identity, no gradient flows back.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    /// Forwards `value`; the backward pass sends the incoming gradient to
    /// `surrogate` unchanged and nothing to `value`.
    pub fn straight_through(&mut self, value: Var, surrogate: Var) -> Result<Var> {
        check_same("straight_through", self.shape(value), self.shape(surrogate))?;
        let src = if self.surrogate_forward {
            surrogate
        } else {
            value
        };
        let t = self.value(src).clone();
        let rg = self.rg(surrogate);
        Ok(self.push(t, Op::StraightThrough(surrogate), rg))
    }

    // ---- normalisation ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.data(a).to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum += *v as f64;
                }
                let inv = (1.0 / sum) as f32;
                row.iter_mut().for_each(|v| *v *= inv);
            }
        }
        let rg = self.rg(a);
        self.push_data(shape, out, Op::Softmax(a), rg)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        check_same("layer_norm", &[d], self.shape(gamma))?;
        check_same("layer_norm", &[d], self.shape(beta))?;
        let mut out = self.data(x).to_vec();
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut stats = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            let (mean, rstd) = (mean as f32, rstd as f32);
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[i] + b[i];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push_data(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            rg,
        ))
    }

    // ---- indexing and layout ----

    /// Rows of `table [V, D]` selected by `ids`, shaped `out_shape ++ [D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(StatError::shape("gather", st, out_shape));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(StatError::InvalidArgument(format!(
                "gather: id {bad} out of range for table of {v} rows"
            )));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push_data(
            shape,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(StatError::shape("concat", &first, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(StatError::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let run = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * run..(o + 1) * run]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push_data(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(StatError::shape("slice", &shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push_data(out_shape, out, Op::Slice { a, axis, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len()) {
            return Err(StatError::shape("permute", shape, perm));
        }
        for &p in perm {
            if std::mem::replace(&mut seen[p], true) {
                return Err(StatError::shape("permute", shape, perm));
            }
        }
        let (out, out_shape) = kernels::permute(self.data(a), shape, perm);
        let rg = self.rg(a);
        Ok(self.push_data(
            out_shape,
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s as f32), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s: f64 = self.data(a).iter().map(|&v| v as f64).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(a), rg)
    }

    fn reduce_last(&mut self, a: Var, mean: bool) -> Var {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().unwrap_or(&1);
        let div = if mean { n.max(1) as f64 } else { 1.0 };
        let out: Vec<f32> = if n == 0 {
            vec![0.0; shape[..shape.len() - 1].iter().product()]
        } else {
            self.data(a)
                .chunks(n)
                .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / div) as f32)
                .collect()
        };
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let rg = self.rg(a);
        let op = if mean {
            Op::MeanLast(a)
        } else {
            Op::SumLast(a)
        };
        self.push_data(out_shape, out, op, rg)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, false)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        self.reduce_last(a, true)
    }

    /// Mean next-token cross-entropy over rows of `logits [N, V]` whose
    /// target is `Some`. Rows with `None` contribute neither loss nor gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(StatError::shape("cross_entropy", shape, &[targets.len()]));
        }
        let v = shape[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(StatError::InvalidArgument(format!(
                "cross_entropy: target {bad} out of vocabulary of {v}"
            )));
        }
        let data = self.data(logits);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (row, t) in data.chunks(v).zip(targets) {
            let Some(t) = *t else { continue };
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row
                .iter()
                .map(|&x| ((x - max) as f64).exp())
                .sum::<f64>()
                .ln()
                + max as f64;
            total += lse - row[t] as f64;
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss as f32),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    // ---- backward ----

    /// Reverse-mode gradients of a scalar `loss` with respect to every node
    /// that requires gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(StatError::shape("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.rg(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let acc = |v: Var, grads: &mut [Option<Vec<f32>>], f: &mut dyn FnMut(&mut [f32])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = self.shape(*b)[0];
                let n = self.shape(*b)[1];
                let rows = self.value(*a).numel() / k.max(1);
                acc(*a, grads, &mut |da| {
                    gemm(rows, n, k, g, false, self.data(*b), true, da, 1.0)
                });
                acc(*b, grads, &mut |db| {
                    gemm(k, rows, n, self.data(*a), true, g, false, db, 1.0)
                });
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let r = sa.len();
                let (m, k) = (sa[r - 2], sa[r - 1]);
                let n = node.value.shape()[r - 1];
                let batch: usize = sa[..r - 2].iter().product();
                let (da_src, db_src) = (self.data(*a), self.data(*b));
                acc(*a, grads, &mut |da| {
                    for i in 0..batch {
                        // dA = dC · B^T  (or dC · B when b is stored transposed)
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &db_src[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut da[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, grads, &mut |db| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da_src[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = dC^T · A
                            gemm(n, m, k, gi, true, ai, false, dbi, 1.0);
                        } else {
                            // dB = A^T · dC
                            gemm(k, m, n, ai, true, gi, false, dbi, 1.0);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, grads, &mut |d| add_into(d, g));
                acc(*b, grads, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, grads, &mut |d| add_into(d, g));
                acc(*b, grads, &mut |d| {
                    d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += g * y;
                    }
                });
                acc(*b, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(va) {
                        *d += g * x;
                    }
                });
            }
            Op::AddBcast(a, b) => {
                acc(*a, grads, &mut |d| add_into(d, g));
                let inner = self.value(*b).numel();
                acc(*b, grads, &mut |d| {
                    for chunk in g.chunks(inner) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MulLast(a, b) => {
                let inner = *node.value.shape().last().unwrap();
                let (va, vb) = (self.data(*a), self.data(*b));
                acc(*a, grads, &mut |d| {
                    for ((dc, gc), &s) in d.chunks_mut(inner).zip(g.chunks(inner)).zip(vb) {
                        for (d, g) in dc.iter_mut().zip(gc) {
                            *d += g * s;
                        }
                    }
                });
                acc(*b, grads, &mut |d| {
                    for ((ds, gc), ac) in d.iter_mut().zip(g.chunks(inner)).zip(va.chunks(inner)) {
                        *ds += gc.iter().zip(ac).map(|(g, x)| (g * x) as f64).sum::<f64>() as f32;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, grads, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * c)
            }),
            Op::Shift(a) => acc(*a, grads, &mut |d| add_into(d, g)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, grads, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                        *d += g * y * (1.0 - y);
                    }
                })
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), &x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * kernels::gelu_grad(x);
                    }
                })
            }
            Op::Square(a) => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * g * x;
                    }
                })
            }
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g / x;
                    }
                })
            }
            Op::Pow(a, e) => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        *d += g * e * x.powf(e - 1.0);
                    }
                })
            }
            Op::Clamp { a, lo, hi } => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x >= *lo && *x <= *hi {
                            *d += g;
                        }
                    }
                })
            }
            Op::MaxConst(a, c) => {
                let x = self.data(*a);
                acc(*a, grads, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(x) {
                        if *x > *c {
                            *d += g;
                        }
                    }
                })
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap();
                acc(*a, grads, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| (g * y) as f64).sum();
                        let dot = dot as f32;
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (g - dot);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let n = self.shape(*gamma)[0];
                let xv = self.data(*x);
                let gv = self.data(*gamma);
                acc(*x, grads, &mut |d| {
                    let mut dxhat = vec![0.0f32; n];
                    for (r, (&(mean, rstd), (dr, gr))) in stats
                        .iter()
                        .zip(d.chunks_mut(n).zip(g.chunks(n)))
                        .enumerate()
                    {
                        let xr = &xv[r * n..(r + 1) * n];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for i in 0..n {
                            dxhat[i] = gr[i] * gv[i];
                            let xh = (xr[i] - mean) * rstd;
                            m1 += dxhat[i] as f64;
                            m2 += (dxhat[i] * xh) as f64;
                        }
                        let m1 = (m1 / n as f64) as f32;
                        let m2 = (m2 / n as f64) as f32;
                        for i in 0..n {
                            let xh = (xr[i] - mean) * rstd;
                            dr[i] += rstd * (dxhat[i] - m1 - xh * m2);
                        }
                    }
                });
                acc(*gamma, grads, &mut |d| {
                    for (r, &(mean, rstd)) in stats.iter().enumerate() {
                        let xr = &xv[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        for i in 0..n {
                            d[i] += gr[i] * (xr[i] - mean) * rstd;
                        }
                    }
                });
                acc(*beta, grads, &mut |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let dim = self.shape(*table)[1];
                acc(*table, grads, &mut |d| {
                    for (&i, gr) in ids.iter().zip(g.chunks(dim)) {
                        add_into(&mut d[i * dim..(i + 1) * dim], gr);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let run = self.shape(p)[*axis] * inner;
                    acc(p, grads, &mut |d| {
                        for o in 0..outer {
                            add_into(
                                &mut d[o * run..(o + 1) * run],
                                &g[o * total + offset..o * total + offset + run],
                            );
                        }
                    });
                    offset += run;
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.shape(*a);
                let outer: usize = src_shape[..*axis].iter().product();
                let inner: usize = src_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                let full = src_shape[*axis];
                acc(*a, grads, &mut |d| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        add_into(
                            &mut d[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                })
            }
            Op::Sum(a) => acc(*a, grads, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f32;
                acc(*a, grads, &mut |d| {
                    d.iter_mut().for_each(|d| *d += g[0] / n)
                })
            }
            Op::SumLast(a) | Op::MeanLast(a) => {
                let n = *self.shape(*a).last().unwrap();
                let div = if matches!(node.op, Op::MeanLast(_)) {
                    n.max(1) as f32
                } else {
                    1.0
                };
                if n > 0 {
                    acc(*a, grads, &mut |d| {
                        for (dr, &gv) in d.chunks_mut(n).zip(g) {
                            dr.iter_mut().for_each(|d| *d += gv / div);
                        }
                    })
                }
            }
            Op::StraightThrough(s) => acc(*s, grads, &mut |d| add_into(d, g)),
            Op::Reshape(a) => acc(*a, grads, &mut |d| add_into(d, g)),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (back, _) = kernels::permute(g, node.value.shape(), &inv);
                acc(*a, grads, &mut |d| add_into(d, &back));
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.shape(*logits)[1];
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return;
                }
                let scale = g[0] / count as f32;
                let x = self.data(*logits);
                acc(*logits, grads, &mut |d| {
                    for ((dr, xr), t) in d.chunks_mut(v).zip(x.chunks(v)).zip(targets) {
                        let Some(t) = *t else { continue };
                        let max = xr.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let z: f64 = xr.iter().map(|&x| ((x - max) as f64).exp()).sum();
                        for (j, (d, &x)) in dr.iter_mut().zip(xr).enumerate() {
                            let p = (((x - max) as f64).exp() / z) as f32;
                            let y = if j == t { 1.0 } else { 0.0 };
                            *d += scale * (p - y);
                        }
                    }
                })
            }
        }
    }
}
