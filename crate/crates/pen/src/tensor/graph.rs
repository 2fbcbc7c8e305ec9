//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Values are computed eagerly as ops are recorded; `backward` replays the
//! tape in reverse and accumulates gradients into every node that needs
//! them. Tensors are rank 0 (scalar, stored as shape `[]`), rank 1, or
//! rank 2, which covers the whole head.

use super::{Scalar, COSINE_EPS};
use crate::error::{PenError, Result};

/// Handle into a [`Graph`]. Cheap to copy; only valid for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorRef(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<F: Scalar> {
    Leaf,
    /// Elementwise add of equal shapes.
    Add(usize, usize),
    /// `[m,k] + [k]`: bias broadcast over rows.
    BiasAdd(usize, usize),
    AddScalar(usize, F),
    Scale(usize, F),
    Mul(usize, usize),
    Matmul(usize, usize),
    Concat(Vec<usize>, usize),
    /// Stack rank-1 tensors of equal length into a rank-2 tensor.
    Stack(Vec<usize>),
    Slice { parent: usize, axis: usize, start: usize, len: usize },
    /// Row `i` of a rank-2 tensor, as rank 1.
    Row(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Log(usize),
    Exp(usize),
    /// Softmax over the last axis.
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    /// Cosine similarity of two rank-1 tensors, with a denominator guard.
    Cosine(usize, usize),
    /// Gather rows of an embedding table.
    Lookup(usize, Vec<usize>),
    /// Identity forward, no gradient flow to the parent. The parent index
    /// is kept for debugging even though backward never visits it.
    Detach(#[allow(dead_code)] usize),
}

impl<F: Scalar> Op<F> {
    /// Parents that receive gradient from this node.
    fn grad_parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Detach(_) => vec![],
            Op::Add(a, b) | Op::BiasAdd(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) | Op::Cosine(a, b) => {
                vec![*a, *b]
            }
            Op::AddScalar(a, _)
            | Op::Scale(a, _)
            | Op::Slice { parent: a, .. }
            | Op::Row(a, _)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Lookup(a, _) => vec![*a],
            Op::Concat(ps, _) | Op::Stack(ps) => ps.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

impl<F: Scalar> Node<F> {
    fn placeholder() -> Self {
        Node { shape: vec![], data: vec![], grad: vec![], op: Op::Leaf, needs_grad: false }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Tape of recorded operations. Confined to one thread; separate graphs
/// may run in parallel.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> TensorRef {
        debug_assert_eq!(data.len(), numel(&shape));
        let grad = vec![F::zero(); data.len()];
        self.nodes.push(Node { shape, data, grad, op, needs_grad });
        TensorRef(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> TensorRef {
        let needs = op.grad_parents().iter().any(|&p| self.nodes[p].needs_grad);
        self.push(shape, data, op, needs)
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn leaf(&mut self, shape: &[usize], data: Vec<F>, requires_grad: bool) -> TensorRef {
        assert_eq!(data.len(), numel(shape), "leaf data length must match shape");
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> TensorRef {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: F) -> TensorRef {
        self.constant(&[], vec![v])
    }

    pub fn zeros(&mut self, shape: &[usize]) -> TensorRef {
        self.constant(shape, vec![F::zero(); numel(shape)])
    }

    // ── Accessors ───────────────────────────────────────────────────────

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn value(&self, t: TensorRef) -> &[F] {
        &self.nodes[t.0].data
    }

    pub fn grad(&self, t: TensorRef) -> &[F] {
        &self.nodes[t.0].grad
    }

    pub fn scalar_value(&self, t: TensorRef) -> F {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    fn rank2(&self, t: TensorRef, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(PenError::Shape { op, detail: format!("expected rank 2, got {s:?}") }),
        }
    }

    // ── Elementwise and arithmetic ops ──────────────────────────────────

    /// Add. Accepts equal shapes, or `[m,k] + [k]` (bias broadcast).
    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let data = self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x + y)
                .collect();
            Ok(self.derived(sa, data, Op::Add(a.0, b.0)))
        } else if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            let (m, k) = (sa[0], sa[1]);
            let mut data = self.nodes[a.0].data.clone();
            for i in 0..m {
                for j in 0..k {
                    data[i * k + j] += self.nodes[b.0].data[j];
                }
            }
            Ok(self.derived(sa, data, Op::BiasAdd(a.0, b.0)))
        } else {
            Err(PenError::Shape { op: "add", detail: format!("{sa:?} vs {sb:?}") })
        }
    }

    pub fn add_scalar(&mut self, a: TensorRef, c: F) -> TensorRef {
        let data = self.nodes[a.0].data.iter().map(|&x| x + c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, Op::AddScalar(a.0, c))
    }

    pub fn scale(&mut self, a: TensorRef, c: F) -> TensorRef {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.derived(shape, data, Op::Scale(a.0, c))
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let nb = self.scale(b, -F::one());
        self.add(a, nb)
    }

    /// `a*t + b`, elementwise with scalar coefficients.
    pub fn affine(&mut self, t: TensorRef, a: F, b: F) -> TensorRef {
        let s = self.scale(t, a);
        self.add_scalar(s, b)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(PenError::Shape { op: "mul", detail: format!("{sa:?} vs {sb:?}") });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.derived(sa, data, Op::Mul(a.0, b.0)))
    }

    /// Matrix product. `[m,k] x [k,n] -> [m,n]`, or `[k] x [k,n] -> [n]`.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (kb, n) = self.rank2(b, "matmul")?;
        let (vector, m, k) = match self.shape(a) {
            [k] => (true, 1usize, *k),
            [m, k] => (false, *m, *k),
            s => {
                return Err(PenError::Shape { op: "matmul", detail: format!("lhs rank {s:?}") });
            }
        };
        if k != kb {
            return Err(PenError::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            });
        }
        let mut out = vec![F::zero(); m * n];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    let brow = &bd[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let shape = if vector { vec![n] } else { vec![m, n] };
        Ok(self.derived(shape, out, Op::Matmul(a.0, b.0)))
    }

    // ── Structure ops ───────────────────────────────────────────────────

    /// Concatenate along `axis`. Rank-1 tensors concat along axis 0;
    /// rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(PenError::Shape { op: "concat", detail: "no inputs".into() });
        }
        let rank = self.shape(parts[0]).len();
        for &p in parts {
            if self.shape(p).len() != rank {
                return Err(PenError::Shape { op: "concat", detail: "mixed ranks".into() });
            }
        }
        match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(&self.nodes[p.0].data);
                }
                let total = data.len();
                let ids = parts.iter().map(|p| p.0).collect();
                Ok(self.derived(vec![total], data, Op::Concat(ids, 0)))
            }
            (2, 0) => {
                let cols = self.shape(parts[0])[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (r, c) = self.rank2(p, "concat")?;
                    if c != cols {
                        return Err(PenError::Shape { op: "concat", detail: "column mismatch".into() });
                    }
                    rows += r;
                    data.extend_from_slice(&self.nodes[p.0].data);
                }
                let ids = parts.iter().map(|p| p.0).collect();
                Ok(self.derived(vec![rows, cols], data, Op::Concat(ids, 0)))
            }
            (2, 1) => {
                let rows = self.shape(parts[0])[0];
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.rank2(p, "concat")?;
                    if r != rows {
                        return Err(PenError::Shape { op: "concat", detail: "row mismatch".into() });
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        let c = self.shape(p)[1];
                        data.extend_from_slice(&self.nodes[p.0].data[r * c..(r + 1) * c]);
                    }
                }
                let ids = parts.iter().map(|p| p.0).collect();
                Ok(self.derived(vec![rows, cols], data, Op::Concat(ids, 1)))
            }
            _ => Err(PenError::Shape { op: "concat", detail: format!("rank {rank}, axis {axis}") }),
        }
    }

    /// Stack rank-1 tensors of equal length into `[r, len]`.
    pub fn stack_rows(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(PenError::Shape { op: "stack", detail: "no inputs".into() });
        }
        let len = match self.shape(parts[0]) {
            [l] => *l,
            s => return Err(PenError::Shape { op: "stack", detail: format!("rank {s:?}") }),
        };
        let mut data = Vec::with_capacity(parts.len() * len);
        for &p in parts {
            if self.shape(p) != [len] {
                return Err(PenError::Shape { op: "stack", detail: "length mismatch".into() });
            }
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(vec![parts.len(), len], data, Op::Stack(ids)))
    }

    pub fn slice(&mut self, t: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let shape = self.shape(t).to_vec();
        let bad = |detail: String| PenError::Shape { op: "slice", detail };
        match (shape.as_slice(), axis) {
            ([l], 0) => {
                if start + len > *l {
                    return Err(bad(format!("[{start}..{}] of [{l}]", start + len)));
                }
                let data = self.nodes[t.0].data[start..start + len].to_vec();
                Ok(self.derived(vec![len], data, Op::Slice { parent: t.0, axis, start, len }))
            }
            ([r, c], 0) => {
                if start + len > *r {
                    return Err(bad(format!("rows {start}..{} of {r}", start + len)));
                }
                let data = self.nodes[t.0].data[start * c..(start + len) * c].to_vec();
                Ok(self.derived(vec![len, *c], data, Op::Slice { parent: t.0, axis, start, len }))
            }
            ([r, c], 1) => {
                if start + len > *c {
                    return Err(bad(format!("cols {start}..{} of {c}", start + len)));
                }
                let mut data = Vec::with_capacity(r * len);
                for i in 0..*r {
                    data.extend_from_slice(&self.nodes[t.0].data[i * c + start..i * c + start + len]);
                }
                Ok(self.derived(vec![*r, len], data, Op::Slice { parent: t.0, axis, start, len }))
            }
            (s, a) => Err(bad(format!("rank {s:?}, axis {a}"))),
        }
    }

    /// Row `i` of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, t: TensorRef, i: usize) -> Result<TensorRef> {
        let (r, c) = self.rank2(t, "row")?;
        if i >= r {
            return Err(PenError::Shape { op: "row", detail: format!("row {i} of {r}") });
        }
        let data = self.nodes[t.0].data[i * c..(i + 1) * c].to_vec();
        Ok(self.derived(vec![c], data, Op::Row(t.0, i)))
    }

    // ── Nonlinearities and reductions ───────────────────────────────────

    pub fn sigmoid(&mut self, t: TensorRef) -> TensorRef {
        let data = self.nodes[t.0]
            .data
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        let shape = self.shape(t).to_vec();
        self.derived(shape, data, Op::Sigmoid(t.0))
    }

    pub fn tanh(&mut self, t: TensorRef) -> TensorRef {
        let data = self.nodes[t.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(t).to_vec();
        self.derived(shape, data, Op::Tanh(t.0))
    }

    pub fn log(&mut self, t: TensorRef) -> TensorRef {
        let data = self.nodes[t.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.shape(t).to_vec();
        self.derived(shape, data, Op::Log(t.0))
    }

    pub fn exp(&mut self, t: TensorRef) -> TensorRef {
        let data = self.nodes[t.0].data.iter().map(|&x| x.exp()).collect();
        let shape = self.shape(t).to_vec();
        self.derived(shape, data, Op::Exp(t.0))
    }

    /// Softmax over the last axis, with max subtraction for stability.
    pub fn softmax(&mut self, t: TensorRef) -> Result<TensorRef> {
        let shape = self.shape(t).to_vec();
        let c = *shape
            .last()
            .ok_or_else(|| PenError::Shape { op: "softmax", detail: "rank 0".into() })?;
        let rows = numel(&shape) / c;
        let mut data = self.nodes[t.0].data.clone();
        for r in 0..rows {
            let row = &mut data[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        Ok(self.derived(shape, data, Op::Softmax(t.0)))
    }

    pub fn sum(&mut self, t: TensorRef) -> TensorRef {
        let mut s = F::zero();
        for &v in &self.nodes[t.0].data {
            s += v;
        }
        self.derived(vec![], vec![s], Op::Sum(t.0))
    }

    pub fn mean(&mut self, t: TensorRef) -> TensorRef {
        let n = self.nodes[t.0].data.len();
        let mut s = F::zero();
        for &v in &self.nodes[t.0].data {
            s += v;
        }
        let m = s / F::from_f64c(n as f64);
        self.derived(vec![], vec![m], Op::Mean(t.0))
    }

    /// Sum a list of same-shape tensors.
    pub fn add_many(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        let mut it = parts.iter();
        let first = *it
            .next()
            .ok_or_else(|| PenError::Shape { op: "add", detail: "no inputs".into() })?;
        let mut acc = first;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// `a·b / max(‖a‖‖b‖, ε)` for rank-1 tensors of equal length.
    pub fn cosine_similarity(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb {
            return Err(PenError::Shape { op: "cosine_similarity", detail: format!("{sa:?} vs {sb:?}") });
        }
        let (dot, na2, nb2) = {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            let mut dot = F::zero();
            let mut na2 = F::zero();
            let mut nb2 = F::zero();
            for (&x, &y) in ad.iter().zip(bd) {
                dot += x * y;
                na2 += x * x;
                nb2 += y * y;
            }
            (dot, na2, nb2)
        };
        let denom = (na2.sqrt() * nb2.sqrt()).max(F::from_f64c(COSINE_EPS));
        let s = dot / denom;
        Ok(self.derived(vec![], vec![s], Op::Cosine(a.0, b.0)))
    }

    /// Gather rows of `table` (`[vocab, d]`) at `indices`, yielding `[len, d]`.
    pub fn lookup(&mut self, table: TensorRef, indices: &[usize]) -> Result<TensorRef> {
        let (v, d) = self.rank2(table, "lookup")?;
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(PenError::Shape { op: "lookup", detail: format!("index {i} of {v}") });
            }
            data.extend_from_slice(&self.nodes[table.0].data[i * d..(i + 1) * d]);
        }
        Ok(self.derived(vec![indices.len(), d], data, Op::Lookup(table.0, indices.to_vec())))
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, t: TensorRef) -> TensorRef {
        let data = self.nodes[t.0].data.clone();
        let shape = self.shape(t).to_vec();
        self.push(shape, data, Op::Detach(t.0), false)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Accumulate gradients of `loss` into every reachable node with
    /// `needs_grad`. `loss` must be a scalar.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(PenError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got {:?}", self.shape(loss)),
            });
        }
        let mut active = vec![false; loss.0 + 1];
        active[loss.0] = self.nodes[loss.0].needs_grad;
        for idx in (0..=loss.0).rev() {
            if !active[idx] {
                continue;
            }
            for p in self.nodes[idx].op.grad_parents() {
                if self.nodes[p].needs_grad {
                    active[p] = true;
                }
            }
        }
        self.nodes[loss.0].grad[0] += F::one();
        for idx in (0..=loss.0).rev() {
            if !active[idx] {
                continue;
            }
            self.backprop_node(idx);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize) {
        let node = std::mem::replace(&mut self.nodes[idx], Node::placeholder());
        {
            let parents = &mut self.nodes[..idx];
            let go = &node.grad;
            match &node.op {
                Op::Leaf | Op::Detach(_) => {}
                Op::Add(a, b) => {
                    for (i, &g) in go.iter().enumerate() {
                        if parents[*a].needs_grad {
                            parents[*a].grad[i] += g;
                        }
                        if parents[*b].needs_grad {
                            parents[*b].grad[i] += g;
                        }
                    }
                }
                Op::BiasAdd(a, b) => {
                    let k = parents[*b].data.len();
                    for (i, &g) in go.iter().enumerate() {
                        if parents[*a].needs_grad {
                            parents[*a].grad[i] += g;
                        }
                        if parents[*b].needs_grad {
                            parents[*b].grad[i % k] += g;
                        }
                    }
                }
                Op::AddScalar(a, _) => {
                    if parents[*a].needs_grad {
                        for (i, &g) in go.iter().enumerate() {
                            parents[*a].grad[i] += g;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if parents[*a].needs_grad {
                        for (i, &g) in go.iter().enumerate() {
                            parents[*a].grad[i] += g * *c;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let ad = parents[*a].data.clone();
                    let bd = parents[*b].data.clone();
                    for (i, &g) in go.iter().enumerate() {
                        if parents[*a].needs_grad {
                            parents[*a].grad[i] += g * bd[i];
                        }
                        if parents[*b].needs_grad {
                            parents[*b].grad[i] += g * ad[i];
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = match parents[*a].shape.as_slice() {
                        [k] => (1, *k),
                        [m, k] => (*m, *k),
                        _ => unreachable!(),
                    };
                    let n = parents[*b].shape[1];
                    let ad = parents[*a].data.clone();
                    let bd = parents[*b].data.clone();
                    if parents[*a].needs_grad {
                        let ga = &mut parents[*a].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = F::zero();
                                let grow = &go[i * n..(i + 1) * n];
                                let brow = &bd[p * n..(p + 1) * n];
                                for j in 0..n {
                                    s += grow[j] * brow[j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    }
                    if parents[*b].needs_grad {
                        let gb = &mut parents[*b].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                let grow = &go[i * n..(i + 1) * n];
                                let gbrow = &mut gb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    gbrow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::Concat(ps, axis) => match (node.shape.len(), *axis) {
                    (1, 0) | (2, 0) => {
                        let mut off = 0;
                        for &p in ps {
                            let len = parents[p].data.len();
                            if parents[p].needs_grad {
                                for i in 0..len {
                                    parents[p].grad[i] += go[off + i];
                                }
                            }
                            off += len;
                        }
                    }
                    (2, 1) => {
                        let rows = node.shape[0];
                        let cols = node.shape[1];
                        for r in 0..rows {
                            let mut off = 0;
                            for &p in ps {
                                let c = parents[p].shape[1];
                                if parents[p].needs_grad {
                                    for j in 0..c {
                                        parents[p].grad[r * c + j] += go[r * cols + off + j];
                                    }
                                }
                                off += c;
                            }
                        }
                    }
                    _ => unreachable!(),
                },
                Op::Stack(ps) => {
                    let len = node.shape[1];
                    for (r, &p) in ps.iter().enumerate() {
                        if parents[p].needs_grad {
                            for i in 0..len {
                                parents[p].grad[i] += go[r * len + i];
                            }
                        }
                    }
                }
                Op::Slice { parent, axis, start, len } => {
                    let (parent, axis, start, len) = (*parent, *axis, *start, *len);
                    if parents[parent].needs_grad {
                        let pshape = parents[parent].shape.clone();
                        match (pshape.as_slice(), axis) {
                            ([_], 0) => {
                                for i in 0..len {
                                    parents[parent].grad[start + i] += go[i];
                                }
                            }
                            ([_, c], 0) => {
                                for i in 0..len * *c {
                                    parents[parent].grad[start * *c + i] += go[i];
                                }
                            }
                            ([r, c], 1) => {
                                for i in 0..*r {
                                    for j in 0..len {
                                        parents[parent].grad[i * *c + start + j] += go[i * len + j];
                                    }
                                }
                            }
                            _ => unreachable!(),
                        }
                    }
                }
                Op::Row(parent, i) => {
                    let (parent, i) = (*parent, *i);
                    if parents[parent].needs_grad {
                        let c = parents[parent].shape[1];
                        for j in 0..c {
                            parents[parent].grad[i * c + j] += go[j];
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    if parents[*a].needs_grad {
                        for (i, &g) in go.iter().enumerate() {
                            let y = node.data[i];
                            parents[*a].grad[i] += g * y * (F::one() - y);
                        }
                    }
                }
                Op::Tanh(a) => {
                    if parents[*a].needs_grad {
                        for (i, &g) in go.iter().enumerate() {
                            let y = node.data[i];
                            parents[*a].grad[i] += g * (F::one() - y * y);
                        }
                    }
                }
                Op::Log(a) => {
                    if parents[*a].needs_grad {
                        let ad = parents[*a].data.clone();
                        for (i, &g) in go.iter().enumerate() {
                            parents[*a].grad[i] += g / ad[i];
                        }
                    }
                }
                Op::Exp(a) => {
                    if parents[*a].needs_grad {
                        for (i, &g) in go.iter().enumerate() {
                            parents[*a].grad[i] += g * node.data[i];
                        }
                    }
                }
                Op::Softmax(a) => {
                    if parents[*a].needs_grad {
                        let c = *node.shape.last().unwrap();
                        let rows = node.data.len() / c;
                        for r in 0..rows {
                            let y = &node.data[r * c..(r + 1) * c];
                            let gy = &go[r * c..(r + 1) * c];
                            let mut dot = F::zero();
                            for j in 0..c {
                                dot += gy[j] * y[j];
                            }
                            for j in 0..c {
                                parents[*a].grad[r * c + j] += y[j] * (gy[j] - dot);
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if parents[*a].needs_grad {
                        let g = go[0];
                        for v in parents[*a].grad.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::Mean(a) => {
                    if parents[*a].needs_grad {
                        let n = parents[*a].data.len();
                        let g = go[0] / F::from_f64c(n as f64);
                        for v in parents[*a].grad.iter_mut() {
                            *v += g;
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let ad = parents[*a].data.clone();
                    let bd = parents[*b].data.clone();
                    let mut dot = F::zero();
                    let mut na2 = F::zero();
                    let mut nb2 = F::zero();
                    for (&x, &y) in ad.iter().zip(&bd) {
                        dot += x * y;
                        na2 += x * x;
                        nb2 += y * y;
                    }
                    let eps = F::from_f64c(COSINE_EPS);
                    let prod = na2.sqrt() * nb2.sqrt();
                    let clamped = prod <= eps;
                    let denom = prod.max(eps);
                    let s = dot / denom;
                    let g = go[0];
                    for i in 0..ad.len() {
                        if parents[*a].needs_grad {
                            let mut da = bd[i] / denom;
                            if !clamped {
                                da -= s * ad[i] / na2;
                            }
                            parents[*a].grad[i] += g * da;
                        }
                        if parents[*b].needs_grad {
                            let mut db = ad[i] / denom;
                            if !clamped {
                                db -= s * bd[i] / nb2;
                            }
                            parents[*b].grad[i] += g * db;
                        }
                    }
                }
                Op::Lookup(table, indices) => {
                    if parents[*table].needs_grad {
                        let d = parents[*table].shape[1];
                        for (r, &tok) in indices.iter().enumerate() {
                            for j in 0..d {
                                parents[*table].grad[tok * d + j] += go[r * d + j];
                            }
                        }
                    }
                }
            }
        }
        self.nodes[idx] = node;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() < tol
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(&[3], vec![1.0, -2.0, 0.5]);
        let c = g.cosine_similarity(v, v).unwrap();
        assert!(close(g.scalar_value(c), 1.0, 1e-12));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let v = g.constant(&[2], vec![0.0, 0.0]);
        let s = g.softmax(v).unwrap();
        assert_eq!(g.value(s), &[0.5, 0.5]);
    }

    #[test]
    fn concat_last_axis_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[2, 5]);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(&[4], vec![1.0, 2.0, 3.0, 4.0], true);
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), &[1.0; 4]);
    }

    #[test]
    fn cosine_backward_orthogonal_unit_vectors() {
        // For unit-norm u ⟂ v, d(cos)/du = v.
        let mut g: Graph<f64> = Graph::new();
        let u = g.leaf(&[2], vec![1.0, 0.0], true);
        let v = g.constant(&[2], vec![0.0, 1.0]);
        let c = g.cosine_similarity(u, v).unwrap();
        g.backward(c).unwrap();
        assert!(close(g.grad(u)[0], 0.0, 1e-12));
        assert!(close(g.grad(u)[1], 1.0, 1e-12));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true);
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[4, 2]);
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let w = g.leaf(&[2], vec![1.0, 2.0], true);
        let d = g.detach(w);
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w), &[0.0, 0.0]);
    }

    #[test]
    fn finite_difference_spot_check() {
        // Composite: mean(sigmoid(x W) * tanh(x W)) over a small matmul.
        let xs = vec![0.3, -0.7, 1.1];
        let ws = vec![0.5, -0.2, 0.8, 0.1, -0.4, 0.9];
        let eval = |xs: &[f64], ws: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(&[3], xs.to_vec(), true);
            let w = g.leaf(&[3, 2], ws.to_vec(), true);
            let y = g.matmul(x, w).unwrap();
            let a = g.sigmoid(y);
            let b = g.tanh(y);
            let p = g.mul(a, b).unwrap();
            let m = g.mean(p);
            g.scalar_value(m)
        };
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(&[3], xs.clone(), true);
        let w = g.leaf(&[3, 2], ws.clone(), true);
        let y = g.matmul(x, w).unwrap();
        let a = g.sigmoid(y);
        let b = g.tanh(y);
        let p = g.mul(a, b).unwrap();
        let m = g.mean(p);
        g.backward(m).unwrap();
        let h = 1e-6;
        for i in 0..ws.len() {
            let mut wp = ws.clone();
            wp[i] += h;
            let mut wm = ws.clone();
            wm[i] -= h;
            let fd = (eval(&xs, &wp) - eval(&xs, &wm)) / (2.0 * h);
            assert!(close(g.grad(w)[i], fd, 1e-7), "param {i}: {} vs {}", g.grad(w)[i], fd);
        }
    }
}
