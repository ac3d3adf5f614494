//! Operation tape and the backward sweep.
//!
//! Nodes are appended in forward order and identified by [`NodeId`]. The
//! backward pass walks the tape in reverse, so every node's gradient is
//! complete before its inputs receive contributions. Discrete choices made
//! during the forward pass (row selections, argmax sets) are baked into the
//! recorded ops and treated as constants by differentiation.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    GatherRows(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    MeanRows(NodeId),
    SumAll(NodeId),
    SumList(Vec<NodeId>),
    SoftmaxRows(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    LogSumExpRows(NodeId),
    Get(NodeId, usize, usize),
    NormalizeRows(NodeId, f64),
    RowSumNormalize(NodeId),
    Reshape(NodeId),
    GradReverse(NodeId),
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`. Nodes the root
    /// does not depend on get an all-zero gradient.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Record an input tensor. Gradients flow to it like any other node;
    /// whether it is a trainable parameter is the caller's bookkeeping.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape mismatch");
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shape mismatch");
        let bv = self.value(b);
        let av = self.value(a);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(Op::Sub(a, b), value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a, factor), value)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "hadamard shape mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows(), av.cols(), data);
        self.push(Op::Hadamard(a, b), value)
    }

    /// Output row k is input row `idx[k]`; repeats are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let av = self.value(a);
        let mut value = Tensor::zeros(idx.len(), av.cols());
        for (k, &r) in idx.iter().enumerate() {
            assert!(r < av.rows(), "gather row {r} out of bounds for {} rows", av.rows());
            value.row_mut(k).copy_from_slice(av.row(r));
        }
        self.push(Op::GatherRows(a, idx.to_vec()), value)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), value)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of bounds");
        let mut value = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start, len), value)
    }

    /// Column-wise mean over rows, yielding a 1xC tensor.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        assert!(av.rows() > 0, "mean_rows on empty tensor");
        let mut value = Tensor::zeros(1, av.cols());
        for r in 0..av.rows() {
            for c in 0..av.cols() {
                value.data_mut()[c] += av.get(r, c);
            }
        }
        value.scale_in_place(1.0 / av.rows() as f64);
        self.push(Op::MeanRows(a), value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::scalar(total))
    }

    /// Elementwise sum of same-shaped tensors.
    pub fn sum_list(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "sum_list needs at least one part");
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.add_assign(self.value(p));
        }
        self.push(Op::SumList(parts.to_vec()), value)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = Tensor::zeros(av.rows(), av.cols());
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                value.row_mut(r)[c] = e;
                denom += e;
            }
            for c in 0..av.cols() {
                value.row_mut(r)[c] /= denom;
            }
        }
        self.push(Op::SoftmaxRows(a), value)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(softplus);
        self.push(Op::Softplus(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    /// Row-wise log-sum-exp, yielding an Rx1 tensor.
    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let row = av.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            value.set(r, 0, m + s.ln());
        }
        self.push(Op::LogSumExpRows(a), value)
    }

    /// Extract one element as a 1x1 tensor.
    pub fn get(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = self.value(a).get(r, c);
        self.push(Op::Get(a, r, c), Tensor::scalar(v))
    }

    /// Rescale each row to unit Euclidean norm, with norms floored at `eps`
    /// so all-zero rows stay zero and stay differentiable.
    pub fn normalize_rows(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows() {
            let n = av.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            for x in value.row_mut(r) {
                *x /= n;
            }
        }
        self.push(Op::NormalizeRows(a, eps), value)
    }

    /// Divide each row by its element sum (no absolute value, no floor);
    /// callers must guarantee nonzero row sums.
    pub fn row_sum_normalize(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..av.rows() {
            let s: f64 = av.row(r).iter().sum();
            assert!(s != 0.0, "row_sum_normalize: row {r} sums to zero");
            for x in value.row_mut(r) {
                *x /= s;
            }
        }
        self.push(Op::RowSumNormalize(a), value)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape element count mismatch");
        let value = Tensor::from_vec(rows, cols, av.data().to_vec());
        self.push(Op::Reshape(a), value)
    }

    /// Identity in the forward pass; negates the gradient in the backward
    /// pass. Used to train adversarial objectives with a single sweep.
    pub fn grad_reverse(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(Op::GradReverse(a), value)
    }

    /// Backpropagate from a scalar root through every recorded node.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(
            self.value(root).shape(),
            (1, 1),
            "backward root must be a 1x1 scalar"
        );
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.value(*b).transpose());
                    let db = self.value(*a).transpose().matmul(&g);
                    acc(&mut grads, self, *a, da);
                    acc(&mut grads, self, *b, db);
                }
                Op::Transpose(a) => {
                    acc(&mut grads, self, *a, g.transpose());
                }
                Op::Add(a, b) => {
                    acc(&mut grads, self, *a, g.clone());
                    acc(&mut grads, self, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, self, *a, g.clone());
                    acc(&mut grads, self, *b, g.map(|x| -x));
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    acc(&mut grads, self, *a, g.map(|x| x * f));
                }
                Op::Hadamard(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let da = elementwise(&g, bv, |gx, y| gx * y);
                    let db = elementwise(&g, av, |gx, x| gx * x);
                    acc(&mut grads, self, *a, da);
                    acc(&mut grads, self, *b, db);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for (k, &r) in idx.iter().enumerate() {
                        let dst = da.row_mut(r);
                        for (d, s) in dst.iter_mut().zip(g.row(k)) {
                            *d += s;
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r).copy_from_slice(g.row(offset + r));
                        }
                        offset += pv.rows();
                        acc(&mut grads, self, p, dp);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let pv = self.value(p);
                        let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                        for r in 0..pv.rows() {
                            dp.row_mut(r)
                                .copy_from_slice(&g.row(r)[offset..offset + pv.cols()]);
                        }
                        offset += pv.cols();
                        acc(&mut grads, self, p, dp);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        da.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows() as f64;
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        for (d, s) in da.row_mut(r).iter_mut().zip(g.row(0)) {
                            *d = s * inv;
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let da = Tensor::filled(av.rows(), av.cols(), g.item());
                    acc(&mut grads, self, *a, da);
                }
                Op::SumList(parts) => {
                    for &p in parts {
                        acc(&mut grads, self, p, g.clone());
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gx, yx)| gx * yx).sum();
                        for c in 0..y.cols() {
                            da.row_mut(r)[c] = y.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = elementwise(&g, y, |gx, yx| gx * yx * (1.0 - yx));
                    acc(&mut grads, self, *a, da);
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    let da = elementwise(&g, x, |gx, xv| gx * sigmoid(xv));
                    acc(&mut grads, self, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = elementwise(&g, x, |gx, xv| if xv > 0.0 { gx } else { 0.0 });
                    acc(&mut grads, self, *a, da);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let row = x.row(r);
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        let gr = g.get(r, 0);
                        for c in 0..x.cols() {
                            da.row_mut(r)[c] = gr * (row[c] - m).exp() / denom;
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::Get(a, r, c) => {
                    let av = self.value(*a);
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    da.set(*r, *c, g.item());
                    acc(&mut grads, self, *a, da);
                }
                Op::NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let raw = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                        if raw > *eps {
                            let dot: f64 =
                                g.row(r).iter().zip(y.row(r)).map(|(gx, yx)| gx * yx).sum();
                            for c in 0..x.cols() {
                                da.row_mut(r)[c] = (g.get(r, c) - y.get(r, c) * dot) / raw;
                            }
                        } else {
                            for c in 0..x.cols() {
                                da.row_mut(r)[c] = g.get(r, c) / eps;
                            }
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::RowSumNormalize(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut da = Tensor::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let s: f64 = x.row(r).iter().sum();
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(gx, yx)| gx * yx).sum();
                        for c in 0..x.cols() {
                            da.row_mut(r)[c] = (g.get(r, c) - dot) / s;
                        }
                    }
                    acc(&mut grads, self, *a, da);
                }
                Op::Reshape(a) => {
                    let av = self.value(*a);
                    let da = Tensor::from_vec(av.rows(), av.cols(), g.data().to_vec());
                    acc(&mut grads, self, *a, da);
                }
                Op::GradReverse(a) => {
                    acc(&mut grads, self, *a, g.map(|x| -x));
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(g.shape(), other.shape());
    let data = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::from_vec(g.rows(), g.cols(), data)
}

fn acc(grads: &mut [Option<Tensor>], tape: &Tape, id: NodeId, delta: Tensor) {
    debug_assert_eq!(tape.value(id).shape(), delta.shape(), "gradient shape mismatch");
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on every element of every input, compared
    /// against the tape gradient with a relative tolerance.
    fn fd_check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[NodeId]) -> NodeId) {
        let eval = |ins: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = ins.iter().map(|t| tape.leaf(t.clone())).collect();
            let root = build(&mut tape, &ids);
            let value = tape.value(root).item();
            let grads = tape.backward(root);
            (value, ids.iter().map(|&id| grads.wrt(id)).collect())
        };
        let (_, analytic) = eval(inputs);
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[e] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic[i].data()[e];
                let tol = 1e-5 * a.abs().max(fd.abs()) + 1e-9;
                assert!(
                    (a - fd).abs() <= tol.max(1e-7),
                    "input {i} elem {e}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(rows, cols, data.to_vec())
    }

    #[test]
    fn matmul_gradient() {
        fd_check(
            &[
                t(2, 3, &[0.5, -1.2, 0.3, 0.7, 0.1, -0.4]),
                t(3, 2, &[1.0, -0.5, 0.2, 0.8, -0.3, 0.6]),
            ],
            |tape, ids| {
                let m = tape.matmul(ids[0], ids[1]);
                tape.sum_all(m)
            },
        );
    }

    #[test]
    fn transpose_and_hadamard_gradient() {
        fd_check(
            &[t(2, 3, &[0.5, -1.2, 0.3, 0.7, 0.1, -0.4]), t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0])],
            |tape, ids| {
                let tr = tape.transpose(ids[0]);
                let h = tape.hadamard(tr, ids[1]);
                tape.sum_all(h)
            },
        );
    }

    #[test]
    fn add_sub_scale_gradient() {
        fd_check(
            &[t(2, 2, &[0.3, -0.7, 1.1, 0.2]), t(2, 2, &[0.9, 0.4, -0.6, 0.5])],
            |tape, ids| {
                let a = tape.add(ids[0], ids[1]);
                let s = tape.sub(a, ids[1]);
                let sc = tape.scale(s, -2.5);
                tape.sum_all(sc)
            },
        );
    }

    #[test]
    fn gather_rows_gradient_accumulates_repeats() {
        fd_check(&[t(3, 2, &[0.1, 0.9, -0.4, 0.6, 1.3, -0.2])], |tape, ids| {
            let g = tape.gather_rows(ids[0], &[2, 0, 2]);
            let w = tape.leaf(t(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
            let h = tape.hadamard(g, w);
            tape.sum_all(h)
        });
    }

    #[test]
    fn concat_and_slice_gradient() {
        fd_check(
            &[t(2, 2, &[0.4, -0.3, 0.8, 0.1]), t(2, 3, &[0.2, 0.5, -0.9, 1.0, -0.1, 0.7])],
            |tape, ids| {
                let cc = tape.concat_cols(&[ids[0], ids[1]]);
                let s1 = tape.slice_cols(cc, 1, 3);
                let rows = tape.concat_rows(&[s1, s1]);
                let sm = tape.softmax_rows(rows);
                tape.sum_all(sm)
            },
        );
    }

    #[test]
    fn mean_rows_and_sum_list_gradient() {
        fd_check(
            &[t(3, 2, &[0.4, -0.3, 0.8, 0.1, -0.5, 0.9]), t(1, 2, &[0.6, -0.2])],
            |tape, ids| {
                let m = tape.mean_rows(ids[0]);
                let s = tape.sum_list(&[m, ids[1], m]);
                let q = tape.hadamard(s, s);
                tape.sum_all(q)
            },
        );
    }

    #[test]
    fn softmax_rows_gradient() {
        fd_check(&[t(2, 4, &[0.3, -1.1, 0.7, 0.0, 2.0, 1.5, -0.4, 0.9])], |tape, ids| {
            let sm = tape.softmax_rows(ids[0]);
            let w = tape.leaf(t(2, 4, &[1.0, -2.0, 0.5, 3.0, -1.0, 0.8, 2.2, -0.6]));
            let h = tape.hadamard(sm, w);
            tape.sum_all(h)
        });
    }

    #[test]
    fn sigmoid_softplus_relu_gradient() {
        fd_check(&[t(1, 4, &[0.6, -1.4, 2.3, -0.2])], |tape, ids| {
            let s = tape.sigmoid(ids[0]);
            let p = tape.softplus(ids[0]);
            let r = tape.relu(ids[0]);
            let sp = tape.add(s, p);
            let all = tape.add(sp, r);
            tape.sum_all(all)
        });
    }

    #[test]
    fn log_sum_exp_and_get_gradient() {
        fd_check(&[t(2, 3, &[0.3, -0.8, 1.2, 2.0, 0.1, -1.5])], |tape, ids| {
            let lse = tape.log_sum_exp_rows(ids[0]);
            let g0 = tape.get(ids[0], 0, 1);
            let s = tape.sum_all(lse);
            tape.sub(s, g0)
        });
    }

    #[test]
    fn normalize_rows_gradient() {
        fd_check(&[t(2, 3, &[0.5, -0.9, 0.4, 1.2, 0.3, -0.7])], |tape, ids| {
            let n = tape.normalize_rows(ids[0], 1e-12);
            let w = tape.leaf(t(2, 3, &[1.0, 0.5, -0.7, 0.2, -1.3, 0.9]));
            let h = tape.hadamard(n, w);
            tape.sum_all(h)
        });
    }

    #[test]
    fn normalize_rows_below_floor_is_linear() {
        let eps = 1e-3;
        fd_check(&[t(1, 2, &[1e-5, -2e-5])], move |tape, ids| {
            let n = tape.normalize_rows(ids[0], eps);
            tape.sum_all(n)
        });
        let mut tape = Tape::new();
        let zero = tape.leaf(Tensor::zeros(1, 3));
        let n = tape.normalize_rows(zero, 1e-12);
        assert_eq!(tape.value(n).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn row_sum_normalize_gradient() {
        fd_check(&[t(2, 3, &[0.5, 0.9, 0.4, 1.2, 0.3, 0.7])], |tape, ids| {
            let n = tape.row_sum_normalize(ids[0]);
            let w = tape.leaf(t(2, 3, &[1.0, 0.5, -0.7, 0.2, -1.3, 0.9]));
            let h = tape.hadamard(n, w);
            tape.sum_all(h)
        });
    }

    #[test]
    fn reshape_gradient() {
        fd_check(&[t(2, 3, &[0.5, -0.9, 0.4, 1.2, 0.3, -0.7])], |tape, ids| {
            let r = tape.reshape(ids[0], 1, 6);
            let w = tape.leaf(t(1, 6, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
            let h = tape.hadamard(r, w);
            tape.sum_all(h)
        });
    }

    #[test]
    fn grad_reverse_negates_gradient_only() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.4, -0.9]));
        let r = tape.grad_reverse(x);
        assert_eq!(tape.value(r), tape.value(x));
        let s = tape.sum_all(r);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(x).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn unreachable_nodes_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[0.4, -0.9]));
        let y = tape.leaf(t(1, 2, &[1.0, 1.0]));
        let s = tape.sum_all(x);
        let grads = tape.backward(s);
        assert_eq!(grads.wrt(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = sum(x*x) + sum(x) uses x twice.
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[3.0, -2.0]));
        let sq = tape.hadamard(x, x);
        let s1 = tape.sum_all(sq);
        let s2 = tape.sum_all(x);
        let root = tape.add(s1, s2);
        let grads = tape.backward(root);
        assert_eq!(grads.wrt(x).data(), &[7.0, -3.0]);
    }
}
