//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Nodes are appended in execution order, so the tape is already a topological
//! order; `backward` walks it once in reverse. Values are computed eagerly at
//! recording time. A graph is confined to one thread; tensors inside it are
//! immutable once recorded.

use crate::tensor::{softmax_rows, KernelError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// C = A * B
    MatMul { a: NodeId, b: NodeId },
    /// C = A * B^T
    MatMulNT { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    /// y[i, :] = x[i, :] + v
    AddRowBroadcast { x: NodeId, v: NodeId },
    /// y[i, j] = x[i, j] * v[j]
    MulRowBroadcast { x: NodeId, v: NodeId },
    /// y[i, j] = x[i, j] * w[i]
    MulColBroadcast { x: NodeId, w: NodeId },
    Silu { x: NodeId },
    Square { x: NodeId },
    /// Per-row x / sqrt(mean(x^2) + eps); gain handled separately.
    RmsNorm { x: NodeId, eps: f64 },
    /// Pairwise rotation by position-dependent angles.
    Rope { x: NodeId, positions: Vec<usize>, base: f64 },
    /// Row softmax over the causal support j <= i of a square matrix.
    SoftmaxCausal { x: NodeId },
    /// Full row softmax.
    SoftmaxRows { x: NodeId },
    /// y[i] = log sum_j exp(x[i, j])
    LogSumExpRows { x: NodeId },
    /// y[t, :] = table[ids[t], :]
    EmbedLookup { table: NodeId, ids: Vec<u32> },
    SliceRows { x: NodeId, start: usize, len: usize },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    /// y[r, :] = x[idx[r], :]
    GatherRows { x: NodeId, idx: Vec<usize> },
    /// y[p] = x[pairs[p].0, pairs[p].1]
    GatherElems { x: NodeId, pairs: Vec<(usize, usize)> },
    /// y[i] = sum_j x[i, j]
    RowSum { x: NodeId },
    /// y[j] = mean_i x[i, j]
    ColMean { x: NodeId },
    /// y = base; y[idx[r], :] += w[r] * src[r, :]
    ScatterAddWeighted { base: NodeId, src: NodeId, w: NodeId, idx: Vec<usize> },
    SumAll { x: NodeId },
    /// Same data, new shape.
    Reshape { x: NodeId },
    /// y = sum_i x_i * weights_i with constant weights.
    WeightedSumConst { x: NodeId, weights: Tensor },
    /// Mean next-token cross-entropy of logits rows against integer targets.
    CrossEntropy { logits: NodeId, targets: Vec<u32> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per node after a backward pass. Only nodes on a path to the
/// seeded node carry a gradient.
pub struct Grads {
    by_node: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.by_node[id.0].take()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, v))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(Op::MatMulNT { a, b }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, v))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, KernelError> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "div",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x / y).collect();
        let v = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Div { a, b }, v))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x).scale(c);
        self.push(Op::Scale { x, c }, v)
    }

    pub fn add_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let vv = self.value(v);
        let (n, d) = (xv.rows(), xv.cols());
        if vv.numel() != d {
            return Err(KernelError::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..n {
            for (o, b) in out.row_mut(i).iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddRowBroadcast { x, v }, out))
    }

    pub fn mul_row_broadcast(&mut self, x: NodeId, v: NodeId) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let vv = self.value(v);
        let (n, d) = (xv.rows(), xv.cols());
        if vv.numel() != d {
            return Err(KernelError::ShapeMismatch {
                op: "mul_row_broadcast",
                lhs: xv.shape().to_vec(),
                rhs: vv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..n {
            for (o, b) in out.row_mut(i).iter_mut().zip(vv.data()) {
                *o *= b;
            }
        }
        Ok(self.push(Op::MulRowBroadcast { x, v }, out))
    }

    pub fn mul_col_broadcast(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let wv = self.value(w);
        let n = xv.rows();
        if wv.numel() != n {
            return Err(KernelError::ShapeMismatch {
                op: "mul_col_broadcast",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = xv.clone();
        for i in 0..n {
            let wi = wv.data()[i];
            for o in out.row_mut(i) {
                *o *= wi;
            }
        }
        Ok(self.push(Op::MulColBroadcast { x, w }, out))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * sigmoid(a));
        self.push(Op::Silu { x }, v)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a * a);
        self.push(Op::Square { x }, v)
    }

    pub fn rmsnorm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = xv.clone();
        for i in 0..n {
            let row = out.row_mut(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for v in row {
                *v *= inv;
            }
        }
        self.push(Op::RmsNorm { x, eps }, out)
    }

    /// Rotary embedding: even/odd pairs of each row rotate by
    /// `positions[row] / base^(2i/d)`. Column count must be even.
    pub fn rope(&mut self, x: NodeId, positions: &[usize], base: f64) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if d % 2 != 0 || positions.len() != n {
            return Err(KernelError::ShapeMismatch {
                op: "rope",
                lhs: xv.shape().to_vec(),
                rhs: vec![positions.len()],
            });
        }
        let mut out = xv.clone();
        apply_rope(&mut out, positions, base, false);
        Ok(self.push(Op::Rope { x, positions: positions.to_vec(), base }, out))
    }

    /// Softmax over the causal support j <= i of a square score matrix.
    /// Position 0 always attends to itself, so no row can be fully masked.
    pub fn softmax_causal(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let t = xv.rows();
        if xv.cols() != t {
            return Err(KernelError::ShapeMismatch {
                op: "softmax_causal",
                lhs: xv.shape().to_vec(),
                rhs: vec![t, t],
            });
        }
        let mask = causal_mask(t);
        let v = softmax_rows(xv, Some(&mask))?;
        Ok(self.push(Op::SoftmaxCausal { x }, v))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, KernelError> {
        let v = softmax_rows(self.value(x), None)?;
        Ok(self.push(Op::SoftmaxRows { x }, v))
    }

    pub fn logsumexp_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.rows();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            out.push(logsumexp(xv.row(i)));
        }
        let v = Tensor::new(vec![n], out).expect("shape");
        self.push(Op::LogSumExpRows { x }, v)
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId, KernelError> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(KernelError::Domain { what: "token id", value: bad as f64 });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &t in ids {
            data.extend_from_slice(tv.row(t as usize));
        }
        let v = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(Op::EmbedLookup { table, ids: ids.to_vec() }, v))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(KernelError::ShapeMismatch {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let data = xv.data()[start * d..(start + len) * d].to_vec();
        let v = Tensor::new(vec![len, d], data)?;
        Ok(self.push(Op::SliceRows { x, start, len }, v))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if start + len > d {
            return Err(KernelError::ShapeMismatch {
                op: "slice_cols",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let v = Tensor::new(vec![n, len], data)?;
        Ok(self.push(Op::SliceCols { x, start, len }, v))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, KernelError> {
        let d = self.value(xs[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &x in xs {
            let xv = self.value(x);
            if xv.cols() != d {
                return Err(KernelError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![d],
                    rhs: xv.shape().to_vec(),
                });
            }
            n += xv.rows();
            data.extend_from_slice(xv.data());
        }
        let v = Tensor::new(vec![n, d], data)?;
        Ok(self.push(Op::ConcatRows { xs: xs.to_vec() }, v))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, KernelError> {
        let n = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let d: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for &x in xs {
                let xv = self.value(x);
                if xv.rows() != n {
                    return Err(KernelError::ShapeMismatch {
                        op: "concat_cols",
                        lhs: vec![n],
                        rhs: xv.shape().to_vec(),
                    });
                }
                data.extend_from_slice(xv.row(i));
            }
        }
        let v = Tensor::new(vec![n, d], data)?;
        Ok(self.push(Op::ConcatCols { xs: xs.to_vec() }, v))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(KernelError::Domain { what: "gather row index", value: bad as f64 });
        }
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(Op::GatherRows { x, idx: idx.to_vec() }, v))
    }

    pub fn gather_elems(&mut self, x: NodeId, pairs: &[(usize, usize)]) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if pairs.iter().any(|&(i, j)| i >= n || j >= d) {
            return Err(KernelError::Domain { what: "gather elem index", value: -1.0 });
        }
        let data: Vec<f64> = pairs.iter().map(|&(i, j)| xv.at(i, j)).collect();
        let v = Tensor::new(vec![pairs.len()], data)?;
        Ok(self.push(Op::GatherElems { x, pairs: pairs.to_vec() }, v))
    }

    pub fn row_sum(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.rows();
        let data: Vec<f64> = (0..n).map(|i| xv.row(i).iter().sum()).collect();
        let v = Tensor::new(vec![n], data).expect("shape");
        self.push(Op::RowSum { x }, v)
    }

    pub fn col_mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (acc, v) in data.iter_mut().zip(xv.row(i)) {
                *acc += v;
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let v = Tensor::new(vec![d], data).expect("shape");
        self.push(Op::ColMean { x }, v)
    }

    pub fn scatter_add_weighted(
        &mut self,
        base: NodeId,
        src: NodeId,
        w: NodeId,
        idx: &[usize],
    ) -> Result<NodeId, KernelError> {
        let bv = self.value(base);
        let sv = self.value(src);
        let wv = self.value(w);
        let (n, d) = (bv.rows(), bv.cols());
        if sv.cols() != d || sv.rows() != idx.len() || wv.numel() != idx.len() {
            return Err(KernelError::ShapeMismatch {
                op: "scatter_add_weighted",
                lhs: bv.shape().to_vec(),
                rhs: sv.shape().to_vec(),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(KernelError::Domain { what: "scatter row index", value: bad as f64 });
        }
        let mut out = bv.clone();
        for (r, &i) in idx.iter().enumerate() {
            let wr = wv.data()[r];
            let src_row = sv.row(r);
            for (o, s) in out.row_mut(i).iter_mut().zip(src_row) {
                *o += wr * s;
            }
        }
        Ok(self.push(Op::ScatterAddWeighted { base, src, w, idx: idx.to_vec() }, out))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId, KernelError> {
        let v = Tensor::new(shape, self.value(x).data().to_vec())?;
        Ok(self.push(Op::Reshape { x }, v))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(Op::SumAll { x }, v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn weighted_sum_const(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId, KernelError> {
        let xv = self.value(x);
        if xv.numel() != weights.numel() {
            return Err(KernelError::ShapeMismatch {
                op: "weighted_sum_const",
                lhs: xv.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        let s: f64 = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Op::WeightedSumConst { x, weights: weights.clone() },
            Tensor::scalar(s),
        ))
    }

    /// Mean cross-entropy over rows: (1/n) sum_i [lse(logits_i) - logits_i[target_i]].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId, KernelError> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(KernelError::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(KernelError::Domain { what: "target id", value: bad as f64 });
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            total += logsumexp(row) - row[t as usize];
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec() }, v))
    }

    /// Reverse pass from a scalar loss node; gradient seed 1.
    pub fn backward(&self, loss: NodeId) -> Result<Grads, KernelError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(KernelError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Reverse pass with an arbitrary seed (vector-Jacobian product).
    pub fn backward_seeded(&self, at: NodeId, seed: &Tensor) -> Result<Grads, KernelError> {
        if self.value(at).shape() != seed.shape() {
            return Err(KernelError::ShapeMismatch {
                op: "backward_seeded",
                lhs: self.value(at).shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[at.0] = Some(seed.clone());
        for id in (0..=at.0).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads)?;
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<(), KernelError> {
        let add_to = |grads: &mut [Option<Tensor>], target: NodeId, delta: Tensor| {
            match &mut grads[target.0] {
                Some(acc) => {
                    acc.axpy(1.0, &delta).expect("gradient shape");
                }
                slot => *slot = Some(delta),
            }
        };
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let da = g.matmul_nt(self.value(*b))?;
                let db = self.value(*a).matmul_tn(g)?;
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::MatMulNT { a, b } => {
                let da = g.matmul(self.value(*b))?;
                let db = g.matmul_tn(self.value(*a))?;
                add_to(grads, *a, da);
                add_to(grads, *b, db);
            }
            Op::Add { a, b } => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Mul { a, b } => {
                add_to(grads, *a, g.hadamard(self.value(*b))?);
                add_to(grads, *b, g.hadamard(self.value(*a))?);
            }
            Op::Div { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da: Vec<f64> = g.data().iter().zip(bv.data()).map(|(gv, b)| gv / b).collect();
                let db: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gv, (a, b))| -gv * a / (b * b))
                    .collect();
                add_to(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                add_to(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
            }
            Op::Scale { x, c } => add_to(grads, *x, g.scale(*c)),
            Op::AddRowBroadcast { x, v } => {
                add_to(grads, *x, g.clone());
                let d = self.value(*v).numel();
                let mut dv = vec![0.0; d];
                for i in 0..g.rows() {
                    for (acc, gv) in dv.iter_mut().zip(g.row(i)) {
                        *acc += gv;
                    }
                }
                add_to(grads, *v, Tensor::new(self.value(*v).shape().to_vec(), dv)?);
            }
            Op::MulRowBroadcast { x, v } => {
                let xv = self.value(*x);
                let vv = self.value(*v);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = g.clone();
                for i in 0..n {
                    for (o, b) in dx.row_mut(i).iter_mut().zip(vv.data()) {
                        *o *= b;
                    }
                }
                let mut dv = vec![0.0; d];
                for i in 0..n {
                    for ((acc, gv), xvij) in dv.iter_mut().zip(g.row(i)).zip(xv.row(i)) {
                        *acc += gv * xvij;
                    }
                }
                add_to(grads, *x, dx);
                add_to(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
            }
            Op::MulColBroadcast { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.rows();
                let mut dx = g.clone();
                let mut dw = vec![0.0; n];
                for i in 0..n {
                    let wi = wv.data()[i];
                    let mut acc = 0.0;
                    for (o, xvij) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        acc += *o * xvij;
                        *o *= wi;
                    }
                    dw[i] = acc;
                }
                add_to(grads, *x, dx);
                add_to(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let data: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(gv, &a)| {
                        let s = sigmoid(a);
                        gv * (s * (1.0 + a * (1.0 - s)))
                    })
                    .collect();
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Square { x } => {
                let xv = self.value(*x);
                let data: Vec<f64> =
                    g.data().iter().zip(xv.data()).map(|(gv, a)| 2.0 * a * gv).collect();
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::RmsNorm { x, eps } => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..n {
                    let row = xv.row(i);
                    let grow = g.row(i);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r2 = ms + eps;
                    let r = r2.sqrt();
                    let s: f64 = grow.iter().zip(row).map(|(gv, x)| gv * x).sum();
                    let coef = s / (d as f64 * r2 * r);
                    for ((o, gv), x) in dx.row_mut(i).iter_mut().zip(grow).zip(row) {
                        *o = gv / r - x * coef;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::Rope { x, positions, base } => {
                let mut dx = g.clone();
                apply_rope(&mut dx, positions, *base, true);
                add_to(grads, *x, dx);
            }
            Op::SoftmaxCausal { x } | Op::SoftmaxRows { x } => {
                let a = &self.nodes[id].value;
                let (n, _) = (a.rows(), a.cols());
                let mut dx = Tensor::zeros(a.shape().to_vec());
                for i in 0..n {
                    let arow = a.row(i);
                    let grow = g.row(i);
                    let dot: f64 = arow.iter().zip(grow).map(|(av, gv)| av * gv).sum();
                    for ((o, av), gv) in dx.row_mut(i).iter_mut().zip(arow).zip(grow) {
                        *o = av * (gv - dot);
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::LogSumExpRows { x } => {
                let xv = self.value(*x);
                let y = &self.nodes[id].value;
                let n = xv.rows();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..n {
                    let gi = g.data()[i];
                    let yi = y.data()[i];
                    for (o, &xij) in dx.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *o = gi * (xij - yi).exp();
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::EmbedLookup { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.shape().to_vec());
                for (r, &t) in ids.iter().enumerate() {
                    let grow = g.row(r);
                    for (o, gv) in dt.row_mut(t as usize).iter_mut().zip(grow) {
                        *o += gv;
                    }
                }
                add_to(grads, *table, dt);
            }
            Op::SliceRows { x, start, len } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                dx.data_mut()[start * d..(start + len) * d].copy_from_slice(g.data());
                add_to(grads, *x, dx);
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let n = xv.rows();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..n {
                    dx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                add_to(grads, *x, dx);
            }
            Op::ConcatRows { xs } => {
                let mut offset = 0;
                for &xk in xs {
                    let rows = self.value(xk).rows();
                    let d = self.value(xk).cols();
                    let part = Tensor::new(
                        vec![rows, d],
                        g.data()[offset * d..(offset + rows) * d].to_vec(),
                    )?;
                    add_to(grads, xk, part);
                    offset += rows;
                }
            }
            Op::ConcatCols { xs } => {
                let n = g.rows();
                let mut offset = 0;
                for &xk in xs {
                    let w = self.value(xk).cols();
                    let mut part = Tensor::zeros(vec![n, w]);
                    for i in 0..n {
                        part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + w]);
                    }
                    add_to(grads, xk, part);
                    offset += w;
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, gv) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::GatherElems { x, pairs } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (p, &(i, j)) in pairs.iter().enumerate() {
                    dx.data_mut()[i * d + j] += g.data()[p];
                }
                add_to(grads, *x, dx);
            }
            Op::RowSum { x } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..xv.rows() {
                    let gi = g.data()[i];
                    for o in dx.row_mut(i) {
                        *o = gi;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::ColMean { x } => {
                let xv = self.value(*x);
                let n = xv.rows();
                let inv = 1.0 / n as f64;
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for i in 0..n {
                    for (o, gv) in dx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = gv * inv;
                    }
                }
                add_to(grads, *x, dx);
            }
            Op::ScatterAddWeighted { base, src, w, idx } => {
                add_to(grads, *base, g.clone());
                let sv = self.value(*src);
                let wv = self.value(*w);
                let mut dsrc = Tensor::zeros(sv.shape().to_vec());
                let mut dw = vec![0.0; idx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    let wr = wv.data()[r];
                    let grow = g.row(i);
                    let mut acc = 0.0;
                    for ((o, gv), s) in dsrc.row_mut(r).iter_mut().zip(grow).zip(sv.row(r)) {
                        *o = wr * gv;
                        acc += gv * s;
                    }
                    dw[r] = acc;
                }
                add_to(grads, *src, dsrc);
                add_to(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                add_to(grads, *x, Tensor::new(xv.shape().to_vec(), g.data().to_vec())?);
            }
            Op::SumAll { x } => {
                let xv = self.value(*x);
                add_to(grads, *x, Tensor::filled(xv.shape().to_vec(), g.scalar_value()));
            }
            Op::WeightedSumConst { x, weights } => {
                add_to(grads, *x, weights.scale(g.scalar_value()));
            }
            Op::CrossEntropy { logits, targets } => {
                let lv = self.value(*logits);
                let (n, _) = (lv.rows(), lv.cols());
                let scale = g.scalar_value() / n as f64;
                let mut dl = Tensor::zeros(lv.shape().to_vec());
                for (i, &t) in targets.iter().enumerate() {
                    let row = lv.row(i);
                    let lse = logsumexp(row);
                    for ((o, &l), j) in dl.row_mut(i).iter_mut().zip(row).zip(0u32..) {
                        let p = (l - lse).exp();
                        *o = scale * (p - f64::from(j == t));
                    }
                }
                add_to(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

/// Causal keep-mask for a t x t score matrix: row i keeps columns j <= i.
pub fn causal_mask(t: usize) -> Vec<bool> {
    let mut mask = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            mask[i * t + j] = true;
        }
    }
    mask
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

fn apply_rope(x: &mut Tensor, positions: &[usize], base: f64, inverse: bool) {
    let d = x.cols();
    let half = d / 2;
    for (i, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(i);
        for k in 0..half {
            let theta = pos as f64 / base.powf(2.0 * k as f64 / d as f64);
            let (sin, cos) = if inverse { (-theta).sin_cos() } else { theta.sin_cos() };
            let a = row[2 * k];
            let b = row[2 * k + 1];
            row[2 * k] = a * cos - b * sin;
            row[2 * k + 1] = a * sin + b * cos;
        }
    }
}

/// Exact Jacobian of the map `x_leaf -> out` restricted to one row of each,
/// holding all other rows of the leaf fixed: J[j][i] = d out[row, j] / d x[row, i].
/// Computed as `d` reverse-mode passes seeded with unit vectors.
pub fn jacobian_at_row(
    graph: &Graph,
    out: NodeId,
    x_leaf: NodeId,
    row: usize,
) -> Result<Tensor, KernelError> {
    let out_v = graph.value(out);
    let d_out = out_v.cols();
    let d_in = graph.value(x_leaf).cols();
    let mut jac = Tensor::zeros(vec![d_out, d_in]);
    for j in 0..d_out {
        let mut seed = Tensor::zeros(out_v.shape().to_vec());
        seed.row_mut(row)[j] = 1.0;
        let mut grads = graph.backward_seeded(out, &seed)?;
        if let Some(gx) = grads.take(x_leaf) {
            jac.row_mut(j).copy_from_slice(gx.row(row));
        }
    }
    Ok(jac)
}

/// Max relative error between an autodiff gradient and central finite
/// differences: max_i |g_ad[i] - g_fd[i]| / max(1e-12, |g_fd[i]|), with
/// per-coordinate step `step * max(1, |theta_i|)`.
///
/// `coords` restricts the check to a coordinate subset; `None` checks all.
pub fn finite_diff_check<F>(
    theta: &Tensor,
    autodiff_grad: &Tensor,
    step: f64,
    coords: Option<&[usize]>,
    mut f: F,
) -> Result<f64, KernelError>
where
    F: FnMut(&Tensor) -> Result<f64, KernelError>,
{
    if theta.shape() != autodiff_grad.shape() {
        return Err(KernelError::ShapeMismatch {
            op: "finite_diff_check",
            lhs: theta.shape().to_vec(),
            rhs: autodiff_grad.shape().to_vec(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.numel()).collect();
            &all
        }
    };
    let mut worst = 0.0f64;
    let mut probe = theta.clone();
    for &i in coords {
        let orig = theta.data()[i];
        let h = step * orig.abs().max(1.0);
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(KernelError::NonFinite {
                context: format!("finite difference probe at coordinate {i}"),
            });
        }
        let g_fd = (fp - fm) / (2.0 * h);
        let g_ad = autodiff_grad.data()[i];
        let rel = (g_ad - g_fd).abs() / g_fd.abs().max(1e-12);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let mut rng = Rng::new(1);
        let w = g.leaf(rng.gaussian(vec![3, 4], 0.0, 1.0).unwrap());
        let loss = g.sum_all(w);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(w).unwrap();
        assert!(gw.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_quadratic_matches_closed_form() {
        // loss = |W x|^2, grad_W = 2 (W x) x^T
        let mut g = Graph::new();
        let mut rng = Rng::new(2);
        let wt = rng.gaussian(vec![3, 3], 0.0, 1.0).unwrap();
        let xt = rng.gaussian(vec![3, 1], 0.0, 1.0).unwrap();
        let w = g.leaf(wt.clone());
        let x = g.leaf(xt.clone());
        let y = g.matmul(w, x).unwrap();
        let y2 = g.square(y);
        let loss = g.sum_all(y2);
        let grads = g.backward(loss).unwrap();
        let wx = wt.matmul(&xt).unwrap();
        let expected = wx.matmul(&xt.transpose()).unwrap().scale(2.0);
        let gw = grads.get(w).unwrap();
        for (a, b) in gw.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::zeros(vec![2, 2]));
        assert!(matches!(g.backward(w), Err(KernelError::NonScalarLoss { .. })));
    }

    #[test]
    fn finite_diff_exact_for_coordinate_pick() {
        // f(theta) = theta_0 at theta = 0 with a power-of-two step: both the
        // analytic and the central-difference derivative are exactly 1.
        let theta = Tensor::zeros(vec![4]);
        let grad = Tensor::new(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let err = finite_diff_check(&theta, &grad, 2f64.powi(-20), Some(&[0]), |t| {
            Ok(t.data()[0])
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn finite_diff_error_scales_like_step_squared() {
        // f(theta) = theta_0^3: central differences have O(step^2) truncation.
        let theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let grad = Tensor::new(vec![1], vec![3.0]).unwrap();
        let f = |t: &Tensor| Ok(t.data()[0].powi(3));
        let err_big = finite_diff_check(&theta, &grad, 1e-4, None, f).unwrap();
        let err_small = finite_diff_check(&theta, &grad, 1e-6, None, f).unwrap();
        assert!(err_big < 1e-7 && err_big > 1e-10, "err_big = {err_big}");
        assert!(err_small < 1e-9, "err_small = {err_small}");
    }

    /// Composite chain touching most ops, checked against finite differences.
    fn composite_loss(g: &mut Graph, w1: NodeId, w2: NodeId, x: NodeId) -> NodeId {
        let h = g.matmul(x, w1).unwrap();
        let hn = g.rmsnorm(h, 1e-5);
        let hs = g.silu(hn);
        let y = g.matmul_nt(hs, w2).unwrap();
        let sm = g.softmax_rows(y).unwrap();
        let lse = g.logsumexp_rows(y);
        let l2 = g.square(lse);
        let a = g.sum_all(sm);
        let b = g.mean_all(l2);
        g.add(a, b).unwrap()
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let w1t = rng.gaussian(vec![5, 6], 0.0, 0.5).unwrap();
        let w2t = rng.gaussian(vec![7, 6], 0.0, 0.5).unwrap();
        let xt = rng.gaussian(vec![4, 5], 0.0, 1.0).unwrap();

        let mut g = Graph::new();
        let w1 = g.leaf(w1t.clone());
        let w2 = g.leaf(w2t.clone());
        let x = g.leaf(xt.clone());
        let loss = composite_loss(&mut g, w1, w2, x);
        let grads = g.backward(loss).unwrap();

        for (theta, grad, which) in [
            (&w1t, grads.get(w1).unwrap(), 0usize),
            (&w2t, grads.get(w2).unwrap(), 1),
        ] {
            let err = finite_diff_check(theta, grad, 1e-6, None, |t| {
                let mut g = Graph::new();
                let w1 = g.leaf(if which == 0 { t.clone() } else { w1t.clone() });
                let w2 = g.leaf(if which == 1 { t.clone() } else { w2t.clone() });
                let x = g.leaf(xt.clone());
                let loss = composite_loss(&mut g, w1, w2, x);
                Ok(g.value(loss).scalar_value())
            })
            .unwrap();
            assert!(err < 1e-5, "max relative error {err} for tensor {which}");
        }
    }

    #[test]
    fn attention_shaped_graph_matches_finite_differences() {
        // Causal softmax + rope + slices, the pieces a transformer layer uses.
        let mut rng = Rng::new(13);
        let t = 5;
        let dh = 4;
        let xt = rng.gaussian(vec![t, 2 * dh], 0.0, 1.0).unwrap();
        let positions: Vec<usize> = (0..t).collect();

        let build = |g: &mut Graph, x: NodeId| -> NodeId {
            let q = g.slice_cols(x, 0, dh).unwrap();
            let k = g.slice_cols(x, dh, dh).unwrap();
            let qr = g.rope(q, &positions, 10_000.0).unwrap();
            let kr = g.rope(k, &positions, 10_000.0).unwrap();
            let scores = g.matmul_nt(qr, kr).unwrap();
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax_causal(scaled).unwrap();
            let ctx = g.matmul(attn, kr).unwrap();
            let both = g.concat_cols(&[ctx, qr]).unwrap();
            let gathered = g.gather_rows(both, &[0, 2, 4, 4]).unwrap();
            let picked = g.gather_elems(gathered, &[(0, 0), (3, 5)]).unwrap();
            let s1 = g.sum_all(picked);
            let rs = g.row_sum(ctx);
            let cm = g.col_mean(both);
            let s2 = g.sum_all(rs);
            let s3 = g.sum_all(cm);
            let s12 = g.add(s1, s2).unwrap();
            g.add(s12, s3).unwrap()
        };

        let mut g = Graph::new();
        let x = g.leaf(xt.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let err = finite_diff_check(&xt, grads.get(x).unwrap(), 1e-6, None, |t| {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let loss = build(&mut g, x);
            Ok(g.value(loss).scalar_value())
        })
        .unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn routing_shaped_graph_matches_finite_differences() {
        // Gather/scatter/div/broadcast ops as a mixture layer wires them.
        let mut rng = Rng::new(17);
        let n = 6;
        let d = 4;
        let xt = rng.gaussian(vec![n, d], 0.0, 1.0).unwrap();
        let rt = rng.gaussian(vec![d, 3], 0.0, 1.0).unwrap();
        let idx = [0usize, 2, 3, 5];

        let build = |g: &mut Graph, x: NodeId, r: NodeId| -> NodeId {
            let logits = g.matmul(x, r).unwrap();
            let probs = g.softmax_rows(logits).unwrap();
            let picked = g.gather_elems(probs, &[(0, 1), (2, 0), (3, 2), (5, 1)]).unwrap();
            let denom = g.gather_elems(probs, &[(0, 0), (2, 2), (3, 0), (5, 0)]).unwrap();
            let summed = g.add(picked, denom).unwrap();
            let gate = g.div(picked, summed).unwrap();
            let src = g.gather_rows(x, &idx).unwrap();
            let src2 = g.silu(src);
            let base = g.leaf(Tensor::zeros(vec![n, d]));
            let out = g.scatter_add_weighted(base, src2, gate, &idx).unwrap();
            let ce = g.cross_entropy(logits, &[0, 1, 2, 0, 1, 2]).unwrap();
            let s = g.sum_all(out);
            let embed_table = g.leaf(Tensor::new(vec![3, 1], vec![0.5, -0.25, 1.5]).unwrap());
            let emb = g.embed_lookup(embed_table, &[2, 0, 1]).unwrap();
            let se = g.sum_all(emb);
            let wsum = g
                .weighted_sum_const(ce, &Tensor::scalar(0.7))
                .unwrap();
            let t1 = g.add(s, wsum).unwrap();
            g.add(t1, se).unwrap()
        };

        let mut g = Graph::new();
        let x = g.leaf(xt.clone());
        let r = g.leaf(rt.clone());
        let loss = build(&mut g, x, r);
        let grads = g.backward(loss).unwrap();

        for (theta, grad, which) in [
            (&xt, grads.get(x).unwrap(), 0usize),
            (&rt, grads.get(r).unwrap(), 1),
        ] {
            let err = finite_diff_check(theta, grad, 1e-6, None, |t| {
                let mut g = Graph::new();
                let x = g.leaf(if which == 0 { t.clone() } else { xt.clone() });
                let r = g.leaf(if which == 1 { t.clone() } else { rt.clone() });
                let loss = build(&mut g, x, r);
                Ok(g.value(loss).scalar_value())
            })
            .unwrap();
            assert!(err < 1e-5, "max relative error {err} for tensor {which}");
        }
    }

    #[test]
    fn jacobian_of_synthetic_residual_block_is_identity_plus_a() {
        // y = x + x A^T per row, so the per-row Jacobian is I + A.
        let mut rng = Rng::new(23);
        let d = 6;
        let at = rng.gaussian(vec![d, d], 0.0, 0.3).unwrap();
        let xt = rng.gaussian(vec![3, d], 0.0, 1.0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(xt);
        let a = g.leaf(at.clone());
        let ax = g.matmul_nt(x, a).unwrap();
        let y = g.add(x, ax).unwrap();
        let jac = jacobian_at_row(&g, y, x, 1).unwrap();
        let expected = Tensor::identity(d).add(&at).unwrap();
        for (got, want) in jac.data().iter().zip(expected.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn reshape_routes_gradients_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let r = g.reshape(x, vec![3, 2]).unwrap();
        let sq = g.square(r);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.shape(), &[2, 3]);
        for (gv, xv) in gx.data().iter().zip([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.leaf(Tensor::zeros(vec![3, 11]));
        let ce = g.cross_entropy(logits, &[0, 5, 10]).unwrap();
        assert!((g.value(ce).scalar_value() - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn rmsnorm_unit_gain_has_unit_rms() {
        let mut rng = Rng::new(3);
        let xt = rng.gaussian(vec![4, 8], 1.0, 2.0).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(xt);
        let y = g.rmsnorm(x, 0.0);
        for i in 0..4 {
            let row = g.value(y).row(i);
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-12);
        }
    }
}
