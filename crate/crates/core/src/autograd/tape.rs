//! Define-by-run reverse-mode tape.
//!
//! Every op appends one node holding its output value and the ids of its
//! parents, so node order is a topological order. `backward` walks the nodes
//! once in reverse, accumulating gradients only into nodes reachable from the
//! loss.

use std::collections::BTreeMap;

use super::tensor::{numel, ParamStore, Tensor};
use crate::error::{DpmnError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Expand(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Records a forward computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: BTreeMap<String, Var>,
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// c[m×n] += a[m×k] · b[k×n]
fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

// c[k×n] += aᵀ · g, a[m×k], g[m×n]
fn mm_at_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

// c[m×k] += g · bᵀ, g[m×n], b[k×n]
fn mm_bt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reachable from it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, name: &str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DpmnError::NonFinite(name.to_string()));
        }
        self.nodes.push(Node { shape, value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient (masks, one-hot targets).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, "constant")
    }

    /// A differentiable input not tied to a named parameter.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, "leaf")
    }

    /// Loads a named parameter; repeated loads of one name share a node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.require(name)?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
            "param",
        )?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DpmnError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        mm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), "matmul")
    }

    /// Batched `a[b×m×k] · b[b×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(DpmnError::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bs {
            mm_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), "bmm")
    }

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(DpmnError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(numel(sb))
    }

    /// Element-wise sum; `b` may have a shape equal to a suffix of `a`'s, in
    /// which case it is repeated over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("add", a, b)?;
        let vb = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb[i % nb])
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), "add")
    }

    /// Element-wise product with the same suffix broadcasting as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.check_suffix("mul", a, b)?;
        let vb = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * vb[i % nb])
            .collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), "scale")
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), out, op, name)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a), "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a), "tanh")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu, Op::Gelu(a), "gelu")
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() || s[axis] == 0 {
            return Err(DpmnError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    fn check_input_finite(&self, x: Var, name: &str) -> Result<()> {
        if self.value(x).iter().any(|v| !v.is_finite()) {
            return Err(DpmnError::NonFinite(format!("{name} input")));
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        self.check_input_finite(x, "softmax")?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (v[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[idx(j)] /= sum;
                }
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x, axis }, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        self.check_input_finite(x, "log_softmax")?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| v[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (v[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] = v[idx(j)] - lse;
                }
            }
        }
        self.push(
            self.shape(x).to_vec(),
            out,
            Op::LogSoftmax { x, axis },
            "log_softmax",
        )
    }

    /// Layer normalisation over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(DpmnError::contract("layer_norm eps must be positive"));
        }
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [n] {
                return Err(DpmnError::Shape {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = numel(&s) / n.max(1);
        let v = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut normalized = vec![0.0; v.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; v.len()];
        for r in 0..rows {
            let row = &v[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                normalized[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        self.push(
            s,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            "layer_norm",
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| DpmnError::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(DpmnError::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(DpmnError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p)[o * w..(o + 1) * w]);
            }
        }
        self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(DpmnError::Shape {
                op: "slice",
                lhs: s,
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let v = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(shape, out, Op::Slice { x, axis, start }, "slice")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(DpmnError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        self.push(shape.to_vec(), out, Op::Reshape(x), "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(DpmnError::Shape {
                op: "permute",
                lhs: s,
                rhs: perm.to_vec(),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let out = permute_data(self.value(x), &s, perm);
        self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            "permute",
        )
    }

    /// Rows of `table[V×d]` selected by `ids`, giving `[ids.len()×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(DpmnError::Shape {
                op: "embedding",
                lhs: s,
                rhs: vec![],
            });
        }
        let (rows, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(DpmnError::Index {
                what: "embedding table",
                id: bad,
                size: rows,
            });
        }
        let v = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&v[id * d..(id + 1) * d]);
        }
        self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(x));
        let v = self.value(x);
        let out = v.iter().copied().cycle().take(v.len() * n).collect();
        self.push(shape, out, Op::Expand(x), "expand")
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), "sum")
    }

    /// Reverse pass from a scalar `loss`. Gradients for every node reachable
    /// from `loss` become available through [`Tape::grad`]; named parameters
    /// can then be exported with [`Tape::accumulate_param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DpmnError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds the gradient of every reachable parameter node into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (name, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                store
                    .get_mut(name)
                    .ok_or_else(|| DpmnError::contract(format!("unknown parameter `{name}`")))?
                    .accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        // Borrow-friendly accumulator: `f` writes into the parent's gradient.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if matches!(nodes[v.0].op, Op::Constant) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| mm_bt_acc(g, vb, da, m, k, n));
                acc(*b, &mut |db| mm_at_acc(va, g, db, m, k, n));
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    for i in 0..bs {
                        mm_bt_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..bs {
                        mm_at_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                let nb = nodes[b.0].value.len();
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(*b, &mut |db| {
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let nb = vb.len();
                acc(*a, &mut |da| {
                    for (i, x) in g.iter().enumerate() {
                        da[i] += x * vb[i % nb];
                    }
                });
                acc(*b, &mut |db| {
                    for (i, x) in g.iter().enumerate() {
                        db[i % nb] += x * va[i];
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x)),
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        if va[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Gelu(a) => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_grad(va[i]);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| o * n * inner + j * inner + i;
                            let gsum: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                dx[idx(j)] += g[idx(j)] - y[idx(j)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let n = *node.shape.last().unwrap();
                let rows = inv_std.len();
                let gv = &nodes[gain.0].value;
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * normalized[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let xh = &normalized[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = (0..n).map(|j| gr[j] * gv[j]).collect();
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].shape[*axis];
                    acc(p, &mut |dp| {
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..w * inner];
                            dp[o * w * inner..(o + 1) * w * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = axis_split(&nodes[x.0].shape, *axis);
                let len = node.shape[*axis];
                acc(*x, &mut |dx| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        dx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, s)| *d += s);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, s)| *d += s)),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let back = permute_data(g, &node.shape, &inverse);
                acc(*x, &mut |dx| dx.iter_mut().zip(&back).for_each(|(d, s)| *d += s));
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::Expand(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, &mut |dx| {
                    for (i, s) in g.iter().enumerate() {
                        dx[i % n] += s;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
        }
    }
}

fn permute_data(v: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Input stride seen by each output axis.
    let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(v.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..v.len() {
        out.push(v[src]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            src += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `sum(f(inputs) * weights)`; returns the
    /// worst relative error over every input coordinate.
    fn fd_max_rel_error(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let eval = |xs: &[Tensor], weights: Option<&Tensor>| -> (Tape, Vec<Var>, Var, Tensor) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone()).unwrap()).collect();
            let out = f(&mut tape, &vars);
            let w = weights.cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(out)));
            let wv = tape.constant(w.clone()).unwrap();
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod).unwrap();
            (tape, vars, loss, w)
        };
        let (probe, _, _, _) = eval(inputs, None);
        let out_shape = probe.nodes.iter().rev().nth(3).unwrap().shape.clone();
        let weights = random(&out_shape, &mut rng);
        let (mut tape, vars, loss, _) = eval(inputs, Some(&weights));
        tape.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = tape.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; x.numel()]);
            for i in 0..x.numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let (tp, _, lp, _) = eval(&plus, Some(&weights));
                let (tm, _, lm, _) = eval(&minus, Some(&weights));
                let numeric = (tp.value(lp)[0] - tm.value(lm)[0]) / (2.0 * h);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-3);
                worst = worst.max((analytic[i] - numeric).abs() / denom);
            }
        }
        worst
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let z = tape.leaf(t(&[2, 1], &[0.0, 0.0])).unwrap();
        let out = tape.matmul(a, z).unwrap();
        assert_eq!(tape.shape(out), &[1, 1]);
        assert_eq!(tape.value(out), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)];
        let err = fd_max_rel_error(&inputs, |tp, v| tp.matmul(v[0], v[1]).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y), &[0.5, 0.5]);

        let x = tape.leaf(t(&[2], &[1000.0, 0.0])).unwrap();
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-12);
        assert!(tape.value(y)[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[f64::NAN, 0.0]));
        // Leaves refuse non-finite data outright.
        assert!(matches!(x, Err(DpmnError::NonFinite(_))));
    }

    #[test]
    fn softmax_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = fd_max_rel_error(&[random(&[5], &mut rng)], |tp, v| tp.softmax(v[0], 0).unwrap());
        assert!(err < 1e-6, "{err}");
        let err = fd_max_rel_error(&[random(&[3, 4], &mut rng)], |tp, v| tp.softmax(v[0], 0).unwrap());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn relu_and_shapes() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[-1.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), &[0.0, 2.0]);

        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[2, 5])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 8]);
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[1, 4], 3.5)).unwrap();
        let g = tape.leaf(Tensor::filled(&[4], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(&[4])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embedding_out_of_range_reports_id() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[4, 2])).unwrap();
        match tape.embedding(table, &[1, 9]) {
            Err(DpmnError::Index { id, size, .. }) => assert_eq!((id, size), (9, 4)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn embedding_scatter_adds() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[3, 2])).unwrap();
        let rows = tape.embedding(table, &[1, 1, 2]).unwrap();
        let loss = tape.sum(rows).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_grad_is_ones_and_reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| *g == 1.0));

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3])).unwrap();
        let twice = tape.add(x, x).unwrap();
        let s = tape.sum(twice).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|g| *g == 2.0));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.backward(x), Err(DpmnError::Contract(_))));
    }

    #[test]
    fn params_share_one_node_and_export_grads() {
        let mut store = ParamStore::new();
        store.insert("w", t(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, "w").unwrap();
        let b = tape.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        tape.accumulate_param_grads(&mut store).unwrap();
        assert_eq!(store.get("w").unwrap().grad().unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 4], &mut rng);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone()).unwrap();
        let p = tape.permute(v, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(p), &[4, 2, 3]);
        // out[k, i, j] == in[i, j, k]
        assert_eq!(tape.value(p)[1 * 6 + 1 * 3 + 2], x.data()[1 * 12 + 2 * 4 + 1]);
        let back = tape.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(back), x.data());
    }

    #[test]
    fn composite_ops_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[2, 3, 4], &mut rng);
        let gain = random(&[4], &mut rng);
        let bias = random(&[4], &mut rng);
        let err = fd_max_rel_error(&[x.clone(), gain, bias], |tp, v| {
            let ln = tp.layer_norm(v[0], v[1], v[2], 1e-12).unwrap();
            let p = tp.permute(ln, &[1, 0, 2]).unwrap();
            let s = tp.slice(p, 0, 1, 2).unwrap();
            let e = tp.log_softmax(s, 2).unwrap();
            tp.gelu(e).unwrap()
        });
        assert!(err < 1e-6, "{err}");

        let y = random(&[4], &mut rng);
        let err = fd_max_rel_error(&[x, y], |tp, v| {
            let m = tp.mul(v[0], v[1]).unwrap();
            let a = tp.add(m, v[1]).unwrap();
            let e = tp.expand(v[1], 2).unwrap();
            let th = tp.tanh(a).unwrap();
            let sg = tp.sigmoid(e).unwrap();
            let r = tp.reshape(sg, &[2, 1, 4]).unwrap();
            let c = tp.concat(&[th, r], 1).unwrap();
            tp.scale(c, 0.5).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[2, 4, 3], &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let va = tape.leaf(a.clone()).unwrap();
            let vb = tape.leaf(b.clone()).unwrap();
            let e = tape.expand(va, 2).unwrap();
            let m = tape.bmm(e, vb).unwrap();
            let s = tape.softmax(m, 2).unwrap();
            let l = tape.sum(s).unwrap();
            tape.backward(l).unwrap();
            (tape.grad(va).unwrap().to_vec(), tape.grad(vb).unwrap().to_vec())
        };
        let (x, y) = (run(), run());
        assert!(x.0.iter().zip(&y.0).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(x.1.iter().zip(&y.1).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
