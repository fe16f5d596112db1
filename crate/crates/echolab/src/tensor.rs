//! Dense-tensor tape with reverse-mode automatic differentiation.
//!
//! The op set is the minimum a small video transformer needs: matmul,
//! elementwise arithmetic, layer norm, softmax, GELU, fused multi-head
//! attention with an optional key-padding mask, row gather/concat/broadcast,
//! and scalar reductions (mean, L1, squared error, cross-entropy).
//!
//! Graphs are per-sample and single-threaded; parallelism happens across
//! samples, with gradients reduced in a fixed order outside the tape.
//! Shape violations are programming errors and panic with a message naming
//! the op and both shapes. Reduction order inside every op is fixed, so
//! identical inputs give bit-identical outputs and gradients.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Element type of the engine: `f32` for training, `f64` for verification.
pub trait Scalar:
    Float + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for writing literals in generic code.
#[inline]
pub fn lit<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal not representable")
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: F },
    AddBias { x: TensorId, bias: TensorId },
    BroadcastRow { row: TensorId, n: usize },
    GatherRows { x: TensorId, idx: Vec<usize> },
    ConcatRows { a: TensorId, b: TensorId },
    AddRowsFromTable { x: TensorId, table: TensorId, rows: Vec<usize> },
    MulRows { x: TensorId, scale: Vec<F> },
    Gelu { x: TensorId },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: F },
    Attention(Box<AttnOp<F>>),
    MeanAll { x: TensorId },
    L1 { a: TensorId, b: TensorId, w: F },
    MseMean { a: TensorId, b: TensorId },
    CrossEntropy { logits: TensorId, target: usize },
}

#[derive(Debug)]
struct AttnOp<F> {
    q: TensorId,
    k: TensorId,
    v: TensorId,
    heads: usize,
    /// Key indices that participate; identity when no mask was given.
    keep: Vec<usize>,
    /// Saved attention probabilities, laid out `[heads][n_q][keep.len()]`.
    probs: Vec<F>,
}

struct Node<F> {
    data: Vec<F>,
    shape: Vec<usize>,
    grad: Option<Vec<F>>,
    needs_grad: bool,
    op: Op<F>,
}

/// Reverse-mode computation tape. Node ids are topologically ordered by
/// construction, so backward is a single reverse sweep.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<F>, shape: Vec<usize>, needs_grad: bool, op: Op<F>) -> TensorId {
        debug_assert_eq!(data.len(), numel(&shape));
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { data, shape, grad: None, needs_grad, op });
        id
    }

    /// Creates a leaf. `requires_grad` leaves receive gradients in backward.
    pub fn leaf(&mut self, data: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            numel(&shape),
            "leaf: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    /// Creates a constant leaf (never receives gradients).
    pub fn constant(&mut self, data: Vec<F>, shape: Vec<usize>) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a scalar (shape `[1]`) node.
    pub fn scalar(&self, id: TensorId) -> F {
        assert_eq!(self.nodes[id.0].shape, [1], "scalar: node has shape {:?}", self.nodes[id.0].shape);
        self.nodes[id.0].data[0]
    }

    pub fn needs_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn rows_cols(&self, id: TensorId, op: &str) -> (usize, usize) {
        let s = &self.nodes[id.0].shape;
        assert_eq!(s.len(), 2, "{op}: expected a 2-d tensor, got shape {s:?}");
        (s[0], s[1])
    }

    // ── forward ops ────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.rows_cols(a, "matmul");
        let (kb, n) = self.rows_cols(b, "matmul");
        assert_eq!(
            ka, kb,
            "matmul: inner dimensions differ, lhs shape {:?}, rhs shape {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = vec![F::zero(); m * n];
        matmul_acc(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut out);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(out, vec![m, n], needs, Op::MatMul { a, b })
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, op_name: &str) -> (Vec<F>, Vec<usize>, bool) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op_name}: shape mismatch, lhs shape {:?}, rhs shape {:?}",
            self.shape(a),
            self.shape(b)
        );
        let shape = self.nodes[a.0].shape.clone();
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        (Vec::with_capacity(numel(&shape)), shape, needs)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, needs) = self.binary_same_shape(a, b, "add");
        out.extend(
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x + y),
        );
        self.push(out, shape, needs, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, needs) = self.binary_same_shape(a, b, "sub");
        out.extend(
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x - y),
        );
        self.push(out, shape, needs, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (mut out, shape, needs) = self.binary_same_shape(a, b, "mul");
        out.extend(
            self.nodes[a.0]
                .data
                .iter()
                .zip(&self.nodes[b.0].data)
                .map(|(&x, &y)| x * y),
        );
        self.push(out, shape, needs, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: TensorId, c: F) -> TensorId {
        let data: Vec<F> = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, needs, Op::Scale { x, c })
    }

    /// Adds a `[d]` bias row to every row of `[n,d]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> TensorId {
        let (n, d) = self.rows_cols(x, "add_bias");
        assert_eq!(
            self.shape(bias),
            [d],
            "add_bias: bias shape {:?} does not match input shape {:?}",
            self.shape(bias),
            self.shape(x)
        );
        let mut out = Vec::with_capacity(n * d);
        for row in self.nodes[x.0].data.chunks_exact(d) {
            out.extend(row.iter().zip(&self.nodes[bias.0].data).map(|(&x, &b)| x + b));
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[bias.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::AddBias { x, bias })
    }

    /// Repeats a `[d]` row `n` times into `[n,d]`.
    pub fn broadcast_row(&mut self, row: TensorId, n: usize) -> TensorId {
        let s = self.nodes[row.0].shape.clone();
        assert_eq!(s.len(), 1, "broadcast_row: expected a 1-d row, got shape {s:?}");
        let d = s[0];
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&self.nodes[row.0].data);
        }
        let needs = self.nodes[row.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::BroadcastRow { row, n })
    }

    /// Selects rows of `[n,d]` by index; duplicates allowed.
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (n, d) = self.rows_cols(x, "gather_rows");
        assert!(!idx.is_empty(), "gather_rows: empty index set");
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of bounds for shape {:?}", self.shape(x));
            out.extend_from_slice(&self.nodes[x.0].data[i * d..(i + 1) * d]);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, vec![idx.len(), d], needs, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Concatenates two row blocks along axis 0.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (na, da) = self.rows_cols(a, "concat_rows");
        let (nb, db) = self.rows_cols(b, "concat_rows");
        assert_eq!(
            da, db,
            "concat_rows: column counts differ, lhs shape {:?}, rhs shape {:?}",
            self.shape(a),
            self.shape(b)
        );
        let mut out = Vec::with_capacity((na + nb) * da);
        out.extend_from_slice(&self.nodes[a.0].data);
        out.extend_from_slice(&self.nodes[b.0].data);
        let needs = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(out, vec![na + nb, da], needs, Op::ConcatRows { a, b })
    }

    /// `out[i,:] = x[i,:] + table[rows[i],:]` — per-row lookup into a
    /// learnable embedding table.
    pub fn add_rows_from_table(&mut self, x: TensorId, table: TensorId, rows: &[usize]) -> TensorId {
        let (n, d) = self.rows_cols(x, "add_rows_from_table");
        let (r, dt) = self.rows_cols(table, "add_rows_from_table");
        assert_eq!(
            d, dt,
            "add_rows_from_table: width mismatch, input shape {:?}, table shape {:?}",
            self.shape(x),
            self.shape(table)
        );
        assert_eq!(rows.len(), n, "add_rows_from_table: {} row indices for {} rows", rows.len(), n);
        let mut out = Vec::with_capacity(n * d);
        for (i, &ri) in rows.iter().enumerate() {
            assert!(ri < r, "add_rows_from_table: row index {ri} out of bounds for table shape {:?}", self.shape(table));
            let x_row = &self.nodes[x.0].data[i * d..(i + 1) * d];
            let t_row = &self.nodes[table.0].data[ri * d..(ri + 1) * d];
            out.extend(x_row.iter().zip(t_row).map(|(&a, &b)| a + b));
        }
        let needs = self.nodes[x.0].needs_grad || self.nodes[table.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::AddRowsFromTable { x, table, rows: rows.to_vec() })
    }

    /// Multiplies each row of `[n,d]` by a constant per-row factor.
    pub fn mul_rows(&mut self, x: TensorId, scale: &[F]) -> TensorId {
        let (n, d) = self.rows_cols(x, "mul_rows");
        assert_eq!(scale.len(), n, "mul_rows: {} factors for {} rows", scale.len(), n);
        let mut out = Vec::with_capacity(n * d);
        for (row, &s) in self.nodes[x.0].data.chunks_exact(d).zip(scale) {
            out.extend(row.iter().map(|&v| v * s));
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::MulRows { x, scale: scale.to_vec() })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<F> = self.nodes[x.0].data.iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let needs = self.nodes[x.0].needs_grad;
        self.push(data, shape, needs, Op::Gelu { x })
    }

    /// Row-wise softmax over the last axis of `[n,d]`.
    pub fn softmax(&mut self, x: TensorId) -> TensorId {
        let (n, d) = self.rows_cols(x, "softmax");
        let mut out = Vec::with_capacity(n * d);
        for row in self.nodes[x.0].data.chunks_exact(d) {
            softmax_row(row, &mut out);
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::Softmax { x })
    }

    /// Layer norm over the last axis with learnable affine.
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, eps: F) -> TensorId {
        let (n, d) = self.rows_cols(x, "layer_norm");
        assert_eq!(
            self.shape(gamma),
            [d],
            "layer_norm: gamma shape {:?} does not match input shape {:?}",
            self.shape(gamma),
            self.shape(x)
        );
        assert_eq!(
            self.shape(beta),
            [d],
            "layer_norm: beta shape {:?} does not match input shape {:?}",
            self.shape(beta),
            self.shape(x)
        );
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = Vec::with_capacity(n * d);
        for row in self.nodes[x.0].data.chunks_exact(d) {
            let (mean, var) = row_mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for (j, &v) in row.iter().enumerate() {
                out.push((v - mean) * inv * g[j] + b[j]);
            }
        }
        let needs =
            self.nodes[x.0].needs_grad || self.nodes[gamma.0].needs_grad || self.nodes[beta.0].needs_grad;
        self.push(out, vec![n, d], needs, Op::LayerNorm { x, gamma, beta, eps })
    }

    /// Fused multi-head scaled-dot-product attention.
    ///
    /// `q: [n_q, d]`, `k, v: [n_k, d]`, `d` divisible by `heads`. When
    /// `key_keep` is given, only keys with `true` participate: excluded
    /// keys are never read, so the output is bit-independent of their
    /// contents.
    pub fn attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        key_keep: Option<&[bool]>,
    ) -> TensorId {
        let (n_q, d) = self.rows_cols(q, "attention");
        let (n_k, dk) = self.rows_cols(k, "attention");
        let (n_v, dv) = self.rows_cols(v, "attention");
        assert_eq!(
            d, dk,
            "attention: query/key width mismatch, q shape {:?}, k shape {:?}",
            self.shape(q),
            self.shape(k)
        );
        assert_eq!(
            (n_k, d),
            (n_v, dv),
            "attention: key/value shape mismatch, k shape {:?}, v shape {:?}",
            self.shape(k),
            self.shape(v)
        );
        assert!(d % heads == 0, "attention: width {d} not divisible by {heads} heads");
        let keep: Vec<usize> = match key_keep {
            Some(mask) => {
                assert_eq!(mask.len(), n_k, "attention: key mask length {} for {} keys", mask.len(), n_k);
                let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
                assert!(!keep.is_empty(), "attention: key mask excludes every key");
                keep
            }
            None => (0..n_k).collect(),
        };
        let dh = d / heads;
        let scale = lit::<F>(1.0) / lit::<F>(dh as f64).sqrt();
        let nk_keep = keep.len();
        let qd = &self.nodes[q.0].data;
        let kd = &self.nodes[k.0].data;
        let vd = &self.nodes[v.0].data;
        let mut probs = vec![F::zero(); heads * n_q * nk_keep];
        let mut out = vec![F::zero(); n_q * d];
        let mut logits = vec![F::zero(); nk_keep];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n_q {
                let q_row = &qd[i * d + off..i * d + off + dh];
                for (jj, &j) in keep.iter().enumerate() {
                    let k_row = &kd[j * d + off..j * d + off + dh];
                    let mut s = F::zero();
                    for (&a, &b) in q_row.iter().zip(k_row) {
                        s = a.mul_add(b, s);
                    }
                    logits[jj] = s * scale;
                }
                let p = &mut probs[(h * n_q + i) * nk_keep..(h * n_q + i + 1) * nk_keep];
                softmax_into(&logits, p);
                let o_row = &mut out[i * d + off..i * d + off + dh];
                for (jj, &j) in keep.iter().enumerate() {
                    let w = p[jj];
                    let v_row = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in o_row.iter_mut().zip(v_row) {
                        *o = w.mul_add(vv, *o);
                    }
                }
            }
        }
        let needs =
            self.nodes[q.0].needs_grad || self.nodes[k.0].needs_grad || self.nodes[v.0].needs_grad;
        self.push(
            out,
            vec![n_q, d],
            needs,
            Op::Attention(Box::new(AttnOp { q, k, v, heads, keep, probs })),
        )
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let data = &self.nodes[x.0].data;
        let n = lit::<F>(data.len() as f64);
        let mut s = F::zero();
        for &v in data {
            s += v;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(vec![s / n], vec![1], needs, Op::MeanAll { x })
    }

    fn l1_weighted(&mut self, a: TensorId, b: TensorId, w: F) -> TensorId {
        let (_, _, needs) = self.binary_same_shape(a, b, "l1");
        let mut s = F::zero();
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            s += (x - y).abs();
        }
        self.push(vec![s * w], vec![1], needs, Op::L1 { a, b, w })
    }

    /// Mean absolute difference (L1 distance normalized by element count).
    pub fn l1_mean(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let n = lit::<F>(self.nodes[a.0].data.len() as f64);
        self.l1_weighted(a, b, n.recip())
    }

    /// Unnormalized L1 distance `sum |a - b|`.
    pub fn l1_dist(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.l1_weighted(a, b, F::one())
    }

    /// Mean squared difference.
    pub fn mse_mean(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (_, _, needs) = self.binary_same_shape(a, b, "mse_mean");
        let n = lit::<F>(self.nodes[a.0].data.len() as f64);
        let mut s = F::zero();
        for (&x, &y) in self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data) {
            let d = x - y;
            s += d * d;
        }
        self.push(vec![s / n], vec![1], needs, Op::MseMean { a, b })
    }

    /// Softmax cross-entropy of a `[1,k]` logit row against a class index.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> TensorId {
        let (n, k) = self.rows_cols(logits, "cross_entropy");
        assert_eq!(n, 1, "cross_entropy: expected a single logit row, got shape {:?}", self.shape(logits));
        assert!(target < k, "cross_entropy: target {target} out of range for {k} classes");
        let row = &self.nodes[logits.0].data;
        let mut probs = Vec::with_capacity(k);
        softmax_row(row, &mut probs);
        let loss = -probs[target].max(F::min_positive_value()).ln();
        let needs = self.nodes[logits.0].needs_grad;
        self.push(vec![loss], vec![1], needs, Op::CrossEntropy { logits, target })
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse accumulation from a scalar root. Repeated calls without
    /// clearing accumulate into existing gradient buffers.
    pub fn backward(&mut self, root: TensorId) {
        assert_eq!(
            self.nodes[root.0].shape,
            [1],
            "backward: root must be scalar, got shape {:?}",
            self.nodes[root.0].shape
        );
        {
            let node = &mut self.nodes[root.0];
            let g = node.grad.get_or_insert_with(|| vec![F::zero(); 1]);
            g[0] += F::one();
        }
        for id in (0..=root.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            // Ops only reference earlier ids, so split at `id` to borrow the
            // current node and its inputs disjointly.
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &mut rest[0];
            let grad = node.grad.as_ref().expect("checked above");
            propagate(&node.op, grad, &node.data, before);
        }
    }

    /// Drops all gradient buffers (the graph itself is retained).
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

fn ensure_grad<F: Scalar>(nodes: &mut [Node<F>], id: TensorId) -> &mut [F] {
    let node = &mut nodes[id.0];
    // Size by shape, not data: some backward paths temporarily take the data.
    let len = numel(&node.shape);
    node.grad.get_or_insert_with(|| vec![F::zero(); len])
}

fn propagate<F: Scalar>(op: &Op<F>, g: &[F], out_data: &[F], nodes: &mut [Node<F>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let m = nodes[a.0].shape[0];
            let k = nodes[a.0].shape[1];
            let n = nodes[b.0].shape[1];
            if nodes[a.0].needs_grad {
                // dA = dC * B^T
                let b_data = std::mem::take(&mut nodes[b.0].data);
                {
                    let da = ensure_grad(nodes, *a);
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let da_row = &mut da[i * k..(i + 1) * k];
                        for (p, dv) in da_row.iter_mut().enumerate() {
                            let b_row = &b_data[p * n..(p + 1) * n];
                            let mut s = F::zero();
                            for (&gv, &bv) in g_row.iter().zip(b_row) {
                                s = gv.mul_add(bv, s);
                            }
                            *dv += s;
                        }
                    }
                }
                nodes[b.0].data = b_data;
            }
            if nodes[b.0].needs_grad {
                // dB = A^T * dC
                let a_data = std::mem::take(&mut nodes[a.0].data);
                {
                    let db = ensure_grad(nodes, *b);
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        let a_row = &a_data[i * k..(i + 1) * k];
                        for (p, &av) in a_row.iter().enumerate() {
                            let db_row = &mut db[p * n..(p + 1) * n];
                            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                                *dv = av.mul_add(gv, *dv);
                            }
                        }
                    }
                }
                nodes[a.0].data = a_data;
            }
        }
        Op::Add { a, b } => {
            if nodes[a.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *a).iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[b.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *b).iter_mut().zip(g) {
                    *dv += gv;
                }
            }
        }
        Op::Sub { a, b } => {
            if nodes[a.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *a).iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[b.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *b).iter_mut().zip(g) {
                    *dv -= gv;
                }
            }
        }
        Op::Mul { a, b } => {
            if nodes[a.0].needs_grad {
                let b_data = std::mem::take(&mut nodes[b.0].data);
                for ((dv, &gv), &bv) in ensure_grad(nodes, *a).iter_mut().zip(g).zip(&b_data) {
                    *dv = gv.mul_add(bv, *dv);
                }
                nodes[b.0].data = b_data;
            }
            if nodes[b.0].needs_grad {
                let a_data = std::mem::take(&mut nodes[a.0].data);
                for ((dv, &gv), &av) in ensure_grad(nodes, *b).iter_mut().zip(g).zip(&a_data) {
                    *dv = gv.mul_add(av, *dv);
                }
                nodes[a.0].data = a_data;
            }
        }
        Op::Scale { x, c } => {
            if nodes[x.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *x).iter_mut().zip(g) {
                    *dv = gv.mul_add(*c, *dv);
                }
            }
        }
        Op::AddBias { x, bias } => {
            let d = nodes[bias.0].shape[0];
            if nodes[x.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *x).iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[bias.0].needs_grad {
                let db = ensure_grad(nodes, *bias);
                for g_row in g.chunks_exact(d) {
                    for (dv, &gv) in db.iter_mut().zip(g_row) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::BroadcastRow { row, n } => {
            if nodes[row.0].needs_grad {
                let d = nodes[row.0].shape[0];
                let dr = ensure_grad(nodes, *row);
                for i in 0..*n {
                    for (dv, &gv) in dr.iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            if nodes[x.0].needs_grad {
                let d = nodes[x.0].shape[1];
                let dx = ensure_grad(nodes, *x);
                for (i, &src) in idx.iter().enumerate() {
                    let g_row = &g[i * d..(i + 1) * d];
                    for (dv, &gv) in dx[src * d..(src + 1) * d].iter_mut().zip(g_row) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::ConcatRows { a, b } => {
            let na = nodes[a.0].shape[0] * nodes[a.0].shape[1];
            if nodes[a.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *a).iter_mut().zip(&g[..na]) {
                    *dv += gv;
                }
            }
            if nodes[b.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *b).iter_mut().zip(&g[na..]) {
                    *dv += gv;
                }
            }
        }
        Op::AddRowsFromTable { x, table, rows } => {
            let d = nodes[x.0].shape[1];
            if nodes[x.0].needs_grad {
                for (dv, &gv) in ensure_grad(nodes, *x).iter_mut().zip(g) {
                    *dv += gv;
                }
            }
            if nodes[table.0].needs_grad {
                let dt = ensure_grad(nodes, *table);
                for (i, &ri) in rows.iter().enumerate() {
                    let g_row = &g[i * d..(i + 1) * d];
                    for (dv, &gv) in dt[ri * d..(ri + 1) * d].iter_mut().zip(g_row) {
                        *dv += gv;
                    }
                }
            }
        }
        Op::MulRows { x, scale } => {
            if nodes[x.0].needs_grad {
                let d = nodes[x.0].shape[1];
                let dx = ensure_grad(nodes, *x);
                for (i, &s) in scale.iter().enumerate() {
                    for (dv, &gv) in dx[i * d..(i + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dv = gv.mul_add(s, *dv);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if nodes[x.0].needs_grad {
                let x_data = std::mem::take(&mut nodes[x.0].data);
                for ((dv, &gv), &xv) in ensure_grad(nodes, *x).iter_mut().zip(g).zip(&x_data) {
                    *dv = gv.mul_add(gelu_bwd(xv), *dv);
                }
                nodes[x.0].data = x_data;
            }
        }
        Op::Softmax { x } => {
            if nodes[x.0].needs_grad {
                let d = nodes[x.0].shape[1];
                let dx = ensure_grad(nodes, *x);
                for ((dx_row, g_row), y_row) in
                    dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(out_data.chunks_exact(d))
                {
                    let mut dot = F::zero();
                    for (&gv, &yv) in g_row.iter().zip(y_row) {
                        dot = gv.mul_add(yv, dot);
                    }
                    for ((dv, &gv), &yv) in dx_row.iter_mut().zip(g_row).zip(y_row) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = nodes[x.0].shape[1];
            let x_data = std::mem::take(&mut nodes[x.0].data);
            let g_data = std::mem::take(&mut nodes[gamma.0].data);
            let inv_d = lit::<F>(1.0) / lit::<F>(d as f64);
            if nodes[beta.0].needs_grad {
                let db = ensure_grad(nodes, *beta);
                for g_row in g.chunks_exact(d) {
                    for (dv, &gv) in db.iter_mut().zip(g_row) {
                        *dv += gv;
                    }
                }
            }
            if nodes[gamma.0].needs_grad {
                let dg = ensure_grad(nodes, *gamma);
                for (g_row, x_row) in g.chunks_exact(d).zip(x_data.chunks_exact(d)) {
                    let (mean, var) = row_mean_var(x_row);
                    let inv = (var + *eps).sqrt().recip();
                    for ((dv, &gv), &xv) in dg.iter_mut().zip(g_row).zip(x_row) {
                        *dv = gv.mul_add((xv - mean) * inv, *dv);
                    }
                }
            }
            if nodes[x.0].needs_grad {
                let dx = ensure_grad(nodes, *x);
                for ((dx_row, g_row), x_row) in
                    dx.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(x_data.chunks_exact(d))
                {
                    let (mean, var) = row_mean_var(x_row);
                    let inv = (var + *eps).sqrt().recip();
                    // dxhat, then the standard two-correction form.
                    let mut sum_dxh = F::zero();
                    let mut sum_dxh_xh = F::zero();
                    for (j, (&gv, &xv)) in g_row.iter().zip(x_row).enumerate() {
                        let dxh = gv * g_data[j];
                        let xh = (xv - mean) * inv;
                        sum_dxh += dxh;
                        sum_dxh_xh = dxh.mul_add(xh, sum_dxh_xh);
                    }
                    let mean_dxh = sum_dxh * inv_d;
                    let mean_dxh_xh = sum_dxh_xh * inv_d;
                    for (j, (dv, (&gv, &xv))) in dx_row.iter_mut().zip(g_row.iter().zip(x_row)).enumerate() {
                        let dxh = gv * g_data[j];
                        let xh = (xv - mean) * inv;
                        *dv += inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
            }
            nodes[x.0].data = x_data;
            nodes[gamma.0].data = g_data;
        }
        Op::Attention(attn) => {
            let AttnOp { q, k, v, heads, keep, probs } = attn.as_ref();
            let d = nodes[q.0].shape[1];
            let n_q = nodes[q.0].shape[0];
            let dh = d / heads;
            let scale = lit::<F>(1.0) / lit::<F>(dh as f64).sqrt();
            let nk_keep = keep.len();
            // Clones keep this path correct even when q, k, v alias.
            let q_data = nodes[q.0].data.clone();
            let k_data = nodes[k.0].data.clone();
            let v_data = nodes[v.0].data.clone();
            let needs_q = nodes[q.0].needs_grad;
            let needs_k = nodes[k.0].needs_grad;
            let needs_v = nodes[v.0].needs_grad;
            let mut dq_acc = if needs_q { vec![F::zero(); n_q * d] } else { Vec::new() };
            let mut dk_acc = if needs_k { vec![F::zero(); nodes[k.0].shape[0] * d] } else { Vec::new() };
            let mut dv_acc = if needs_v { vec![F::zero(); nodes[v.0].shape[0] * d] } else { Vec::new() };
            let mut ds = vec![F::zero(); nk_keep];
            for h in 0..*heads {
                let off = h * dh;
                for i in 0..n_q {
                    let p = &probs[(h * n_q + i) * nk_keep..(h * n_q + i + 1) * nk_keep];
                    let g_row = &g[i * d + off..i * d + off + dh];
                    // dA[jj] = dO . V_j ; dS = P o (dA - sum(dA o P))
                    let mut dot_sum = F::zero();
                    for (jj, &j) in keep.iter().enumerate() {
                        let v_row = &v_data[j * d + off..j * d + off + dh];
                        let mut s = F::zero();
                        for (&gv, &vv) in g_row.iter().zip(v_row) {
                            s = gv.mul_add(vv, s);
                        }
                        ds[jj] = s;
                        dot_sum = s.mul_add(p[jj], dot_sum);
                    }
                    for jj in 0..nk_keep {
                        ds[jj] = p[jj] * (ds[jj] - dot_sum) * scale;
                    }
                    if needs_v {
                        for (jj, &j) in keep.iter().enumerate() {
                            let w = p[jj];
                            let dv_row = &mut dv_acc[j * d + off..j * d + off + dh];
                            for (dv, &gv) in dv_row.iter_mut().zip(g_row) {
                                *dv = w.mul_add(gv, *dv);
                            }
                        }
                    }
                    if needs_q {
                        let dq_row = &mut dq_acc[i * d + off..i * d + off + dh];
                        for (jj, &j) in keep.iter().enumerate() {
                            let k_row = &k_data[j * d + off..j * d + off + dh];
                            let w = ds[jj];
                            for (dv, &kv) in dq_row.iter_mut().zip(k_row) {
                                *dv = w.mul_add(kv, *dv);
                            }
                        }
                    }
                    if needs_k {
                        let q_row = &q_data[i * d + off..i * d + off + dh];
                        for (jj, &j) in keep.iter().enumerate() {
                            let w = ds[jj];
                            let dk_row = &mut dk_acc[j * d + off..j * d + off + dh];
                            for (dv, &qv) in dk_row.iter_mut().zip(q_row) {
                                *dv = w.mul_add(qv, *dv);
                            }
                        }
                    }
                }
            }
            if needs_q {
                for (dv, &gv) in ensure_grad(nodes, *q).iter_mut().zip(&dq_acc) {
                    *dv += gv;
                }
            }
            if needs_k {
                for (dv, &gv) in ensure_grad(nodes, *k).iter_mut().zip(&dk_acc) {
                    *dv += gv;
                }
            }
            if needs_v {
                for (dv, &gv) in ensure_grad(nodes, *v).iter_mut().zip(&dv_acc) {
                    *dv += gv;
                }
            }
        }
        Op::MeanAll { x } => {
            if nodes[x.0].needs_grad {
                let n = nodes[x.0].data.len();
                let w = g[0] / lit::<F>(n as f64);
                for dv in ensure_grad(nodes, *x) {
                    *dv += w;
                }
            }
        }
        Op::L1 { a, b, w } => {
            let w = g[0] * *w;
            if nodes[a.0].needs_grad {
                let b_data = std::mem::take(&mut nodes[b.0].data);
                let a_data = std::mem::take(&mut nodes[a.0].data);
                for ((dv, &av), &bv) in ensure_grad(nodes, *a).iter_mut().zip(&a_data).zip(&b_data) {
                    *dv = w.mul_add((av - bv).signum_or_zero(), *dv);
                }
                nodes[a.0].data = a_data;
                nodes[b.0].data = b_data;
            }
            if nodes[b.0].needs_grad {
                let b_data = std::mem::take(&mut nodes[b.0].data);
                let a_data = std::mem::take(&mut nodes[a.0].data);
                for ((dv, &av), &bv) in ensure_grad(nodes, *b).iter_mut().zip(&a_data).zip(&b_data) {
                    *dv = (-w).mul_add((av - bv).signum_or_zero(), *dv);
                }
                nodes[a.0].data = a_data;
                nodes[b.0].data = b_data;
            }
        }
        Op::MseMean { a, b } => {
            let n = nodes[a.0].data.len();
            let w = (g[0] + g[0]) / lit::<F>(n as f64);
            if nodes[a.0].needs_grad {
                let b_data = std::mem::take(&mut nodes[b.0].data);
                let a_data = std::mem::take(&mut nodes[a.0].data);
                for ((dv, &av), &bv) in ensure_grad(nodes, *a).iter_mut().zip(&a_data).zip(&b_data) {
                    *dv = w.mul_add(av - bv, *dv);
                }
                nodes[a.0].data = a_data;
                nodes[b.0].data = b_data;
            }
            if nodes[b.0].needs_grad {
                let b_data = std::mem::take(&mut nodes[b.0].data);
                let a_data = std::mem::take(&mut nodes[a.0].data);
                for ((dv, &av), &bv) in ensure_grad(nodes, *b).iter_mut().zip(&a_data).zip(&b_data) {
                    *dv = (-w).mul_add(av - bv, *dv);
                }
                nodes[a.0].data = a_data;
                nodes[b.0].data = b_data;
            }
        }
        Op::CrossEntropy { logits, target } => {
            if nodes[logits.0].needs_grad {
                let row = std::mem::take(&mut nodes[logits.0].data);
                let mut probs = Vec::with_capacity(row.len());
                softmax_row(&row, &mut probs);
                let gv = g[0];
                let dl = ensure_grad(nodes, *logits);
                for (j, dv) in dl.iter_mut().enumerate() {
                    let ind = if j == *target { F::one() } else { F::zero() };
                    *dv = gv.mul_add(probs[j] - ind, *dv);
                }
                nodes[logits.0].data = row;
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> Self;
}

impl<F: Scalar> SignumOrZero for F {
    #[inline]
    fn signum_or_zero(self) -> Self {
        if self > F::zero() {
            F::one()
        } else if self < F::zero() {
            -F::one()
        } else {
            F::zero()
        }
    }
}

/// `out += a * b` for row-major `a: [m,k]`, `b: [k,n]`.
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c = a_ip.mul_add(bv, *c);
            }
        }
    }
}

#[inline]
fn gelu_fwd<F: Scalar>(x: F) -> F {
    let c = lit::<F>(0.7978845608028654); // sqrt(2/pi)
    let k = lit::<F>(0.044715);
    let u = c * (x + k * x * x * x);
    lit::<F>(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_bwd<F: Scalar>(x: F) -> F {
    let c = lit::<F>(0.7978845608028654);
    let k = lit::<F>(0.044715);
    let half = lit::<F>(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (F::one() + lit::<F>(3.0) * k * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * du
}

fn softmax_row<F: Scalar>(row: &[F], out: &mut Vec<F>) {
    let start = out.len();
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for &v in row {
        let e = (v - max).exp();
        out.push(e);
        sum += e;
    }
    let inv = sum.recip();
    for v in &mut out[start..] {
        *v = *v * inv;
    }
}

fn softmax_into<F: Scalar>(row: &[F], out: &mut [F]) {
    let mut max = row[0];
    for &v in &row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = sum.recip();
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

fn row_mean_var<F: Scalar>(row: &[F]) -> (F, F) {
    let n = lit::<F>(row.len() as f64);
    let mut s = F::zero();
    for &v in row {
        s += v;
    }
    let mean = s / n;
    let mut var = F::zero();
    for &v in row {
        let d = v - mean;
        var = d.mul_add(d, var);
    }
    (mean, var / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_uniform_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0], vec![1, 3]);
        let y = tape.softmax(x);
        for &v in tape.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0], vec![2, 3]);
        let y = tape.softmax(x);
        for row in tape.data(y).chunks_exact(3) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn l1_of_identical_tensors_is_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![0.3, -0.7, 2.0], vec![1, 3]);
        let b = tape.constant(vec![0.3, -0.7, 2.0], vec![1, 3]);
        let l1 = tape.l1_dist(a, b);
        assert_eq!(tape.scalar(l1), 0.0);
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![3, 3]);
        let m = tape.constant(vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.5, 7.0, 0.0, 1.0], vec![3, 3]);
        let out = tape.matmul(eye, m);
        assert_eq!(tape.data(out), tape.data(m));
    }

    #[test]
    fn square_gradient_at_three_is_six() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3.0], vec![1, 1], true);
        let sq = tape.mul(x, x);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn l1_gradient_is_sign_per_element() {
        // x > c everywhere, so d(sum |x - c|)/dx = +1 per element.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![2.0, 3.0, 4.0], vec![1, 3], true);
        let c = tape.constant(vec![1.0, 1.0, 1.0], vec![1, 3]);
        let loss = tape.l1_dist(x, c);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shared_subexpression_gradients_accumulate() {
        // f = mean(x + x) => df/dx = 2/n per element, both paths summed.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let y = tape.add(x, x);
        let loss = tape.mean_all(y);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(vec![3.0], vec![1, 1], true);
        let sq = tape.mul(x, x);
        let loss = tape.mean_all(sq);
        tape.backward(loss);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[12.0]);
    }

    #[test]
    fn layer_norm_rows_standardized_before_affine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(vec![0.1, 0.9, 0.4, 0.7, -1.0, 2.0, 0.0, 0.5], vec![2, 4]);
        let g = tape.constant(vec![1.0; 4], vec![4]);
        let b = tape.constant(vec![0.0; 4], vec![4]);
        let y = tape.layer_norm(x, g, b, 1e-5);
        for row in tape.data(y).chunks_exact(4) {
            let mean: f32 = row.iter().sum::<f32>() / 4.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 4.0;
            assert!(mean.abs() < 1e-5, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]);
        let b = tape.constant(vec![0.0; 8], vec![4, 2]);
        tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "backward: root must be scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(vec![1.0, 2.0], vec![1, 2], true);
        let b = tape.add(a, a);
        tape.backward(b);
    }

    #[test]
    fn masked_attention_ignores_excluded_keys_bitwise() {
        let build = |junk: f32| {
            let mut tape = Tape::<f32>::new();
            let q = tape.constant(vec![0.2, -0.1, 0.4, 0.3], vec![1, 4]);
            let mut kv = vec![0.5, 0.1, -0.2, 0.8, 0.0, 0.3, 0.7, -0.5];
            kv.extend([junk, junk, junk, junk]); // excluded key row
            let k = tape.constant(kv.clone(), vec![3, 4]);
            let v = tape.constant(kv, vec![3, 4]);
            let keep = vec![true, true, false];
            let out = tape.attention(q, k, v, 2, Some(&keep));
            tape.data(out).to_vec()
        };
        assert_eq!(build(0.0), build(1e30));
    }

    #[test]
    fn attention_over_identical_keys_averages_values() {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(vec![1.0, 2.0], vec![1, 2]);
        let k = tape.constant(vec![0.3, 0.4, 0.3, 0.4], vec![2, 2]);
        let v = tape.constant(vec![1.0, 5.0, 3.0, 7.0], vec![2, 2]);
        let out = tape.attention(q, k, v, 1, None);
        assert!((tape.data(out)[0] - 2.0).abs() < 1e-6);
        assert!((tape.data(out)[1] - 6.0).abs() < 1e-6);
    }
}
