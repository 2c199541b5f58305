//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! result tensor plus the bookkeeping needed to replay the chain rule in
//! reverse. Node ids are indices into the tape, so walking ids in descending
//! order visits consumers before producers. The tape is rebuilt for every
//! forward pass; persistent parameters live outside it and are bound as
//! leaves each step.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Dense row-major tensor. Gradients are materialized only on leaves
/// inserted with `requires_grad` set.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "tensor shape must have positive dimensions, got {shape:?}"
        );
        assert_eq!(
            data.len(),
            numel,
            "tensor data length {} does not fill shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data, grad: None, requires_grad: false }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-d tensor; a 1-d tensor counts as a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a 2-d tensor, or the length of a 1-d tensor.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Deterministic generator for all randomness in the crate, keyed by an
/// explicit 64-bit seed.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Weight matrix of shape `[fan_in, fan_out]` drawn uniformly from
/// ±√(6 / (fan_in + fan_out)).
pub fn uniform_init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(vec![fan_in, fan_out], data)
}

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    AddBias { x: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    Relu { x: TensorId },
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    SoftmaxRows { x: TensorId },
    CumsumRows { x: TensorId },
    ConcatLastDim { xs: Vec<TensorId> },
    ConcatRows { xs: Vec<TensorId> },
    SliceRows { x: TensorId, start: usize },
    MaxOverAxis { x: TensorId, axis: usize, argmax: Vec<usize> },
    MeanOverAxis { x: TensorId, axis: usize },
    SumAll { x: TensorId },
    EmbeddingLookup { table: TensorId, ids: Vec<usize> },
    CrossEntropyFromLogits { logits: TensorId, targets: Vec<usize> },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// Reverse-mode computation tape. Every op validates input shapes and panics
/// with both shapes in the message on a mismatch; shape errors are contract
/// violations, not recoverable states.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].tensor.data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.tensor.grad.as_mut() {
                g.fill(0.0);
            }
        }
    }

    fn push(&mut self, tensor: Tensor, op: Op) -> TensorId {
        debug_assert!(
            tensor.data.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op:?}"
        );
        self.nodes.push(Node { tensor, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf; its `requires_grad` flag decides whether
    /// backward accumulates into it.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push(tensor, Op::Leaf)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.leaf(Tensor::new(shape, data))
    }

    // ── Forward ops ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.elementwise_pair("add", a, b, |x, y| x + y);
        self.push(out, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.elementwise_pair("sub", a, b, |x, y| x - y);
        self.push(out, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let out = self.elementwise_pair("mul", a, b, |x, y| x * y);
        self.push(out, Op::Mul { a, b })
    }

    fn elementwise_pair(
        &self,
        name: &str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Tensor {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert_eq!(
            ta.shape, tb.shape,
            "{name} shape mismatch: lhs {:?} rhs {:?}",
            ta.shape, tb.shape
        );
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape.clone(), data)
    }

    /// Adds a 1-d bias of length `n` to every row of an `[m, n]` tensor.
    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> TensorId {
        let (tx, tb) = (self.tensor(x), self.tensor(b));
        let n = tx.cols();
        assert_eq!(
            tb.shape,
            vec![n],
            "add_bias shape mismatch: input {:?} bias {:?}",
            tx.shape,
            tb.shape
        );
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&tb.data) {
                *v += bv;
            }
        }
        let out = Tensor::new(tx.shape.clone(), data);
        self.push(out, Op::AddBias { x, b })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let tx = self.tensor(x);
        let out = Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| c * v).collect());
        self.push(out, Op::Scale { x, c })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out = self.map_unary(x, |v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out = self.map_unary(x, f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out = self.map_unary(x, |v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    fn map_unary(&self, x: TensorId, f: impl Fn(f64) -> f64) -> Tensor {
        let tx = self.tensor(x);
        Tensor::new(tx.shape.clone(), tx.data.iter().map(|&v| f(v)).collect())
    }

    /// Matrix product of `[m, k]` and `[k, n]` tensors.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        assert!(
            ta.shape.len() == 2 && tb.shape.len() == 2 && ta.shape[1] == tb.shape[0],
            "matmul shape mismatch: lhs {:?} rhs {:?}",
            ta.shape,
            tb.shape
        );
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        self.push(Tensor::new(vec![m, n], data), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> TensorId {
        let tx = self.tensor(x);
        assert_eq!(tx.shape.len(), 2, "transpose expects a 2-d tensor, got {:?}", tx.shape);
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = tx.data[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], data), Op::Transpose { x })
    }

    /// Row-wise softmax of an `[m, n]` tensor, stabilized by subtracting the
    /// row maximum before exponentiation.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let tx = self.tensor(x);
        assert_eq!(tx.shape.len(), 2, "softmax_rows expects a 2-d tensor, got {:?}", tx.shape);
        let n = tx.shape[1];
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push(Tensor::new(tx.shape.clone(), data), Op::SoftmaxRows { x })
    }

    /// Running sum along each row; together with `softmax_rows` this forms
    /// the cumulative-softmax used by ordered-neurons master gates.
    pub fn cumsum_rows(&mut self, x: TensorId) -> TensorId {
        let tx = self.tensor(x);
        assert_eq!(tx.shape.len(), 2, "cumsum_rows expects a 2-d tensor, got {:?}", tx.shape);
        let n = tx.shape[1];
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            let mut acc = 0.0;
            for v in row.iter_mut() {
                acc += *v;
                *v = acc;
            }
        }
        self.push(Tensor::new(tx.shape.clone(), data), Op::CumsumRows { x })
    }

    /// Concatenates `[m, d_i]` tensors along the last dimension.
    pub fn concat_last_dim(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty(), "concat_last_dim requires at least one input");
        let m = self.tensor(xs[0]).rows();
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.tensor(x);
            assert_eq!(
                t.rows(),
                m,
                "concat_last_dim row mismatch: expected {m} rows, got {:?}",
                t.shape
            );
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let t = self.tensor(x);
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&t.data[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        self.push(Tensor::new(vec![m, total], data), Op::ConcatLastDim { xs: xs.to_vec() })
    }

    /// Stacks `[m_i, n]` tensors on top of each other.
    pub fn concat_rows(&mut self, xs: &[TensorId]) -> TensorId {
        assert!(!xs.is_empty(), "concat_rows requires at least one input");
        let n = self.tensor(xs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let t = self.tensor(x);
            assert_eq!(
                t.cols(),
                n,
                "concat_rows column mismatch: expected {n} columns, got {:?}",
                t.shape
            );
            rows += t.rows();
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::new(vec![rows, n], data), Op::ConcatRows { xs: xs.to_vec() })
    }

    /// Copies rows `start..end` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: TensorId, start: usize, end: usize) -> TensorId {
        let tx = self.tensor(x);
        let (m, n) = (tx.rows(), tx.cols());
        assert!(
            start < end && end <= m,
            "slice_rows range {start}..{end} out of bounds for shape {:?}",
            tx.shape
        );
        let data = tx.data[start * n..end * n].to_vec();
        self.push(Tensor::new(vec![end - start, n], data), Op::SliceRows { x, start })
    }

    /// Maximum along `axis` of an `[m, n]` tensor: axis 0 gives `[1, n]`
    /// column maxima, axis 1 gives `[m, 1]` row maxima. Gradient is routed to
    /// the argmax; ties resolve to the lowest index.
    pub fn max_over_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let (out, argmax) = self.reduce_max(x, axis);
        self.push(out, Op::MaxOverAxis { x, axis, argmax })
    }

    fn reduce_max(&self, x: TensorId, axis: usize) -> (Tensor, Vec<usize>) {
        let tx = self.tensor(x);
        assert_eq!(tx.shape.len(), 2, "max_over_axis expects a 2-d tensor, got {:?}", tx.shape);
        assert!(axis < 2, "max_over_axis axis must be 0 or 1, got {axis}");
        let (m, n) = (tx.shape[0], tx.shape[1]);
        if axis == 0 {
            let mut best = tx.data[..n].to_vec();
            let mut arg = vec![0usize; n];
            for i in 1..m {
                for j in 0..n {
                    let v = tx.data[i * n + j];
                    if v > best[j] {
                        best[j] = v;
                        arg[j] = i;
                    }
                }
            }
            (Tensor::new(vec![1, n], best), arg)
        } else {
            let mut best = Vec::with_capacity(m);
            let mut arg = Vec::with_capacity(m);
            for row in tx.data.chunks(n) {
                let (mut bj, mut bv) = (0, row[0]);
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > bv {
                        bv = v;
                        bj = j;
                    }
                }
                best.push(bv);
                arg.push(bj);
            }
            (Tensor::new(vec![m, 1], best), arg)
        }
    }

    /// Mean along `axis` of an `[m, n]` tensor, shaped like `max_over_axis`.
    pub fn mean_over_axis(&mut self, x: TensorId, axis: usize) -> TensorId {
        let tx = self.tensor(x);
        assert_eq!(tx.shape.len(), 2, "mean_over_axis expects a 2-d tensor, got {:?}", tx.shape);
        assert!(axis < 2, "mean_over_axis axis must be 0 or 1, got {axis}");
        let (m, n) = (tx.shape[0], tx.shape[1]);
        let out = if axis == 0 {
            let mut sums = vec![0.0; n];
            for row in tx.data.chunks(n) {
                for (s, v) in sums.iter_mut().zip(row) {
                    *s += v;
                }
            }
            for s in &mut sums {
                *s /= m as f64;
            }
            Tensor::new(vec![1, n], sums)
        } else {
            let data = tx.data.chunks(n).map(|row| row.iter().sum::<f64>() / n as f64).collect();
            Tensor::new(vec![m, 1], data)
        };
        self.push(out, Op::MeanOverAxis { x, axis })
    }

    /// Sum of all entries, as a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let total = self.tensor(x).data.iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll { x })
    }

    /// Gathers rows of a `[vocab, d]` table; gradient scatter-adds back, so
    /// repeated ids accumulate.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let tt = self.tensor(table);
        assert_eq!(tt.shape.len(), 2, "embedding_lookup expects a 2-d table, got {:?}", tt.shape);
        assert!(!ids.is_empty(), "embedding_lookup requires at least one index");
        let (vocab, d) = (tt.shape[0], tt.shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding index {id} out of range for table with {vocab} rows");
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data);
        self.push(out, Op::EmbeddingLookup { table, ids: ids.to_vec() })
    }

    /// Total negative log-likelihood of `targets` under row-wise softmax of
    /// `[m, classes]` logits, summed over rows.
    pub fn cross_entropy_from_logits(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let tl = self.tensor(logits);
        assert_eq!(tl.shape.len(), 2, "cross_entropy expects 2-d logits, got {:?}", tl.shape);
        let (m, c) = (tl.shape[0], tl.shape[1]);
        assert_eq!(
            targets.len(),
            m,
            "cross_entropy target count {} does not match {} logit rows",
            targets.len(),
            m
        );
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < c, "class index {t} out of range for {c} classes");
            let row = &tl.data[i * c..(i + 1) * c];
            total += log_sum_exp(row) - row[t];
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropyFromLogits { logits, targets: targets.to_vec() },
        )
    }

    /// Row-wise layer normalization with affine output: each row is centered,
    /// divided by √(variance + eps), then scaled by `gamma` and shifted by
    /// `beta` (both 1-d of the row width).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (tx, tg, tb) = (self.tensor(x), self.tensor(gamma), self.tensor(beta));
        let n = tx.cols();
        assert!(
            tg.shape == vec![n] && tb.shape == vec![n],
            "layer_norm parameter shapes {:?}/{:?} do not match row width {n}",
            tg.shape,
            tb.shape
        );
        let eps = LAYER_NORM_EPS;
        let mut data = tx.data.clone();
        for row in data.chunks_mut(n) {
            let (mean, var) = mean_var(row);
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * tg.data[j] + tb.data[j];
            }
        }
        let out = Tensor::new(tx.shape.clone(), data);
        self.push(out, Op::LayerNorm { x, gamma, beta, eps })
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Accumulates d`loss`/d`leaf` into every `requires_grad` leaf. `loss`
    /// must be a scalar. Repeated calls without `zero_grad` keep
    /// accumulating.
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.tensor(loss).numel(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.tensor(loss).shape
        );
        let mut adj: Vec<Vec<f64>> =
            self.nodes.iter().map(|n| vec![0.0; n.tensor.numel()]).collect();
        adj[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if adj[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            match &self.nodes[i].op {
                Op::Leaf => {
                    adj[i] = g;
                    continue;
                }
                Op::Add { a, b } => {
                    axpy(&mut adj[a.0], &g, 1.0);
                    axpy(&mut adj[b.0], &g, 1.0);
                }
                Op::Sub { a, b } => {
                    axpy(&mut adj[a.0], &g, 1.0);
                    axpy(&mut adj[b.0], &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for (k, &gv) in g.iter().enumerate() {
                        adj[a.0][k] += gv * self.nodes[b.0].tensor.data[k];
                    }
                    for (k, &gv) in g.iter().enumerate() {
                        adj[b.0][k] += gv * self.nodes[a.0].tensor.data[k];
                    }
                }
                Op::AddBias { x, b } => {
                    let n = self.nodes[b.0].tensor.numel();
                    axpy(&mut adj[x.0], &g, 1.0);
                    for (k, &gv) in g.iter().enumerate() {
                        adj[b.0][k % n] += gv;
                    }
                }
                Op::Scale { x, c } => axpy(&mut adj[x.0], &g, *c),
                Op::Sigmoid { x } => {
                    let x = *x;
                    let out = &self.nodes[i].tensor.data;
                    for (k, &gv) in g.iter().enumerate() {
                        adj[x.0][k] += gv * out[k] * (1.0 - out[k]);
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let out = &self.nodes[i].tensor.data;
                    for (k, &gv) in g.iter().enumerate() {
                        adj[x.0][k] += gv * (1.0 - out[k] * out[k]);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    for (k, &gv) in g.iter().enumerate() {
                        if self.nodes[x.0].tensor.data[k] > 0.0 {
                            adj[x.0][k] += gv;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = &self.nodes[a.0].tensor.shape;
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].tensor.shape[1];
                    let da = matmul_nt_raw(&g, &self.nodes[b.0].tensor.data, m, n, k);
                    let db = matmul_tn_raw(&self.nodes[a.0].tensor.data, &g, m, k, n);
                    axpy(&mut adj[a.0], &da, 1.0);
                    axpy(&mut adj[b.0], &db, 1.0);
                }
                Op::Transpose { x } => {
                    let x = *x;
                    let (n, m) = {
                        let s = &self.nodes[i].tensor.shape;
                        (s[0], s[1])
                    };
                    for r in 0..n {
                        for c in 0..m {
                            adj[x.0][c * n + r] += g[r * m + c];
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let n = self.nodes[i].tensor.shape[1];
                    let out = &self.nodes[i].tensor.data;
                    for (r, grow) in g.chunks(n).enumerate() {
                        let srow = &out[r * n..(r + 1) * n];
                        let dot: f64 = grow.iter().zip(srow).map(|(&gv, &sv)| gv * sv).sum();
                        for j in 0..n {
                            adj[x.0][r * n + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
                Op::CumsumRows { x } => {
                    let x = *x;
                    let n = self.nodes[i].tensor.shape[1];
                    for (r, grow) in g.chunks(n).enumerate() {
                        let mut acc = 0.0;
                        for j in (0..n).rev() {
                            acc += grow[j];
                            adj[x.0][r * n + j] += acc;
                        }
                    }
                }
                Op::ConcatLastDim { xs } => {
                    let xs = xs.clone();
                    let total = self.nodes[i].tensor.cols();
                    let m = self.nodes[i].tensor.rows();
                    let mut offset = 0;
                    for x in xs {
                        let w = self.nodes[x.0].tensor.cols();
                        for r in 0..m {
                            for j in 0..w {
                                adj[x.0][r * w + j] += g[r * total + offset + j];
                            }
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows { xs } => {
                    let xs = xs.clone();
                    let mut offset = 0;
                    for x in xs {
                        let len = self.nodes[x.0].tensor.numel();
                        axpy(&mut adj[x.0], &g[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    let (x, start) = (*x, *start);
                    let n = self.nodes[i].tensor.cols();
                    axpy(&mut adj[x.0][start * n..start * n + g.len()], &g, 1.0);
                }
                Op::MaxOverAxis { x, axis, argmax } => {
                    let x = *x;
                    let n = self.nodes[x.0].tensor.shape[1];
                    if *axis == 0 {
                        for (j, (&row, &gv)) in argmax.iter().zip(&g).enumerate() {
                            adj[x.0][row * n + j] += gv;
                        }
                    } else {
                        for (r, (&col, &gv)) in argmax.iter().zip(&g).enumerate() {
                            adj[x.0][r * n + col] += gv;
                        }
                    }
                }
                Op::MeanOverAxis { x, axis } => {
                    let x = *x;
                    let (m, n) = {
                        let s = &self.nodes[x.0].tensor.shape;
                        (s[0], s[1])
                    };
                    if *axis == 0 {
                        for r in 0..m {
                            for j in 0..n {
                                adj[x.0][r * n + j] += g[j] / m as f64;
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..n {
                                adj[x.0][r * n + j] += g[r] / n as f64;
                            }
                        }
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    for v in adj[x.0].iter_mut() {
                        *v += g[0];
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let d = self.nodes[table.0].tensor.shape[1];
                    for (t, &id) in ids.iter().enumerate() {
                        axpy(&mut adj[table.0][id * d..(id + 1) * d], &g[t * d..(t + 1) * d], 1.0);
                    }
                }
                Op::CrossEntropyFromLogits { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let c = self.nodes[logits.0].tensor.shape[1];
                    let gv = g[0];
                    for (r, &t) in targets.iter().enumerate() {
                        let mut probs =
                            self.nodes[logits.0].tensor.data[r * c..(r + 1) * c].to_vec();
                        softmax_in_place(&mut probs);
                        for (j, &p) in probs.iter().enumerate() {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            adj[logits.0][r * c + j] += gv * (p - indicator);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let n = self.nodes[x.0].tensor.cols();
                    let m = self.nodes[x.0].tensor.numel() / n;
                    for r in 0..m {
                        let xrow = &self.nodes[x.0].tensor.data[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let (mean, var) = mean_var(xrow);
                        let inv = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xrow.iter().map(|&v| (v - mean) * inv).collect();
                        let gam = &self.nodes[gamma.0].tensor.data;
                        let dxhat: Vec<f64> =
                            grow.iter().zip(gam).map(|(&gv, &gm)| gv * gm).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(&d, &h)| d * h).sum::<f64>() / n as f64;
                        for j in 0..n {
                            adj[x.0][r * n + j] +=
                                inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            adj[gamma.0][j] += grow[j] * xhat[j];
                            adj[beta.0][j] += grow[j];
                        }
                    }
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if matches!(node.op, Op::Leaf) && node.tensor.requires_grad {
                let grad = node.tensor.grad.get_or_insert_with(|| vec![0.0; a.len()]);
                axpy(grad, &a, 1.0);
            }
        }
    }
}

/// `dst += c * src`, the accumulation primitive of the backward pass.
fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m, k] · b[n, k]ᵀ` without materializing the transpose.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `a[m, k]ᵀ · g[m, n]` without materializing the transpose.
fn matmul_tn_raw(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let grow = &g[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "entry {i}: actual {a} expected {e} (tol {tol})");
        }
    }

    #[test]
    fn matmul_forward_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_close(tape.data(c), &[58.0, 64.0, 139.0, 154.0], 1e-12);
    }

    #[test]
    fn matmul_gradient_of_sum_matches_analytic_and_finite_differences() {
        let run = |a_data: &[f64]| {
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![2, 2], a_data.to_vec()).with_grad());
            let b = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
            let c = tape.matmul(a, b);
            let loss = tape.sum_all(c);
            (tape, a, loss)
        };
        let (mut tape, a, loss) = run(&[1.0; 4]);
        tape.backward(loss);
        // d(sum(A·I))/dA is all ones.
        assert_close(tape.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0], 1e-12);

        let numeric = finite_difference(&[1.0; 4], 1e-5, |a_data| {
            let (tape, _, loss) = run(a_data);
            tape.data(loss)[0]
        });
        assert!(relative_error(tape.grad(a).unwrap(), &numeric) < 1e-6);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        let s = tape.softmax_rows(x);
        assert_close(tape.data(s), &[0.5, 0.5], 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_large_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1000.0, 1001.0, 999.0, -500.0, -500.0, -503.0]);
        let s = tape.softmax_rows(x);
        for row in tape.data(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_class_count() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 4], vec![0.0; 4]);
        let loss = tape.cross_entropy_from_logits(logits, &[2]);
        assert!((tape.data(loss)[0] - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.4]).with_grad());
        let loss = tape.cross_entropy_from_logits(logits, &[1]);
        tape.backward(loss);
        let mut expected = vec![0.2, -0.1, 0.4];
        softmax_in_place(&mut expected);
        expected[1] -= 1.0;
        assert_close(tape.grad(logits).unwrap(), &expected, 1e-12);
    }

    #[test]
    fn layer_norm_of_constant_row_is_beta() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 4], vec![3.0; 4]);
        let gamma = tape.constant(vec![4], vec![1.0; 4]);
        let beta = tape.constant(vec![4], vec![0.25; 4]);
        let y = tape.layer_norm(x, gamma, beta);
        assert_close(tape.data(y), &[0.25; 4], 1e-12);
    }

    #[test]
    fn max_over_axis_ties_route_gradient_to_lowest_index() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 3.0, 3.0, 1.0]).with_grad());
        let m = tape.max_over_axis(x, 0);
        assert_close(tape.data(m), &[3.0, 3.0], 0.0);
        let loss = tape.sum_all(m);
        tape.backward(loss);
        // Column 0 ties between rows 0 and 1; the gradient must go to row 0.
        assert_close(tape.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0], 0.0);
    }

    #[test]
    fn embedding_lookup_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::new(vec![3, 2], vec![0.0; 6]).with_grad());
        let e = tape.embedding_lookup(table, &[1, 1, 2]);
        let loss = tape.sum_all(e);
        tape.backward(loss);
        assert_close(tape.grad(table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0], 0.0);
    }

    #[test]
    fn reused_node_sums_both_gradient_contributions() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.5, -2.0]).with_grad());
        let y = tape.add(x, x);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        assert_close(tape.grad(x).unwrap(), &[2.0, 2.0], 0.0);
    }

    #[test]
    fn repeated_backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.5, 0.5]).with_grad());
        let loss = tape.sum_all(x);
        tape.backward(loss);
        tape.backward(loss);
        assert_close(tape.grad(x).unwrap(), &[2.0, 2.0], 0.0);
        tape.zero_grad();
        tape.backward(loss);
        assert_close(tape.grad(x).unwrap(), &[1.0, 1.0], 0.0);
    }

    #[test]
    fn cumsum_rows_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.5, 0.25, 0.25]).with_grad());
        let y = tape.cumsum_rows(x);
        assert_close(tape.data(y), &[0.5, 0.75, 1.0], 1e-15);
        let loss = tape.sum_all(y);
        tape.backward(loss);
        // Position j feeds every prefix sum at or after j.
        assert_close(tape.grad(x).unwrap(), &[3.0, 2.0, 1.0], 0.0);
    }

    #[test]
    fn slice_and_concat_round_trip_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_grad());
        let top = tape.slice_rows(x, 0, 1);
        let rest = tape.slice_rows(x, 1, 3);
        let back = tape.concat_rows(&[top, rest]);
        assert_close(tape.data(back), tape.data(x), 0.0);
        let doubled = tape.scale(back, 2.0);
        let loss = tape.sum_all(doubled);
        tape.backward(loss);
        assert_close(tape.grad(x).unwrap(), &[2.0; 6], 0.0);
    }

    #[test]
    #[should_panic(expected = "matmul shape mismatch")]
    fn matmul_rejects_mismatched_inner_dimensions() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.constant(vec![4, 2], vec![0.0; 8]);
        tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "add shape mismatch")]
    fn add_rejects_mismatched_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![0.0; 4]);
        let b = tape.constant(vec![1, 4], vec![0.0; 4]);
        tape.add(a, b);
    }

    #[test]
    #[should_panic(expected = "backward requires a scalar loss")]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]);
        tape.backward(x);
    }

    #[test]
    fn seeded_init_is_bit_identical_across_runs() {
        let draw = || {
            let mut rng = seeded_rng(42);
            uniform_init(8, 4, &mut rng).data
        };
        let (a, b) = (draw(), draw());
        assert_eq!(a, b);
        let limit = (6.0 / 12.0f64).sqrt();
        assert!(a.iter().all(|&v| v.abs() < limit));
    }
}
