//! Minimal reverse-mode automatic differentiation tape.
//!
//! Operations are recorded in creation order; `backward` runs a reverse
//! sweep over the nodes reachable from a root. Graphs can be kept alive
//! across repeated backward passes (`retain_graph`) or destroyed
//! explicitly, with live-node accounting so schedulers can audit that
//! they leak nothing.

use std::collections::HashMap;

use thiserror::Error;

/// Handle to a tensor owned by a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward traversed dead node (tensor #{0})")]
    DeadNode(usize),
    #[error("non-scalar backward root (tensor #{0}) requires a seed gradient")]
    MissingSeed(usize),
    #[error("seed gradient has {seed} elements, root has {root}")]
    SeedLen { seed: usize, root: usize },
    #[error("tensor #{0} is not graph-attached")]
    NotAttached(usize),
    #[error("tensor #{0} does not require grad")]
    NoGrad(usize),
}

pub type TapeResult<T> = Result<T, TapeError>;

/// Live/peak node counts and backward-pass counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TapeStats {
    pub live_node_count: usize,
    pub peak_live_node_count: usize,
    pub backward_pass_count: usize,
}

#[derive(Debug, Clone)]
enum Op {
    /// [m,k] x [k,n] -> [m,n]
    MatMul,
    /// `x w + scale * (x a) b`; the intermediate `x a` is saved.
    LoraMatMul { scale: f64, xa: Vec<f64> },
    /// [m,n] -> [n,m]
    Transpose,
    Add,
    Mul,
    Scale(f64),
    Tanh,
    RowSoftmax,
    /// Row gather from a [rows, d] table.
    Embedding { indices: Vec<usize> },
    /// Concatenation along rows (axis 0) or columns (axis 1).
    Concat { axis: usize, extents: Vec<usize> },
    Slice { axis: usize, start: usize },
    Mean,
    /// Mean next-token cross-entropy over rows of a logits matrix.
    /// Softmax probabilities are saved for the backward rule.
    CrossEntropyLogits { targets: Vec<usize>, probs: Vec<f64> },
    SumSquares,
    /// Row-wise normalization (no affine). Saves per-row 1/std.
    LayerNorm { inv_std: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<TensorId>,
    alive: bool,
    /// Pinned nodes survive non-retaining backwards; only an explicit
    /// `free_graph` destroys them. Used for subgraphs shared by many
    /// later steps (e.g. cached decoder KV projections).
    pinned: bool,
}

#[derive(Debug)]
struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
    node: Option<Node>,
}

impl TensorData {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1]
        } else {
            1
        }
    }
}

const LN_EPS: f64 = 1e-8;

#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<TensorData>,
    stats: TapeStats,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> TapeStats {
        self.stats
    }

    pub fn leaf(&mut self, values: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> TensorId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            values.len(),
            numel,
            "leaf values length {} does not match shape {:?}",
            values.len(),
            shape
        );
        self.push(TensorData {
            shape,
            values,
            requires_grad,
            grad: None,
            node: None,
        })
    }

    pub fn constant(&mut self, values: Vec<f64>, shape: Vec<usize>) -> TensorId {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![1])
    }

    pub fn values(&self, t: TensorId) -> &[f64] {
        &self.tensors[t.0].values
    }

    pub fn shape(&self, t: TensorId) -> &[usize] {
        &self.tensors[t.0].shape
    }

    pub fn grad(&self, t: TensorId) -> Option<&[f64]> {
        self.tensors[t.0].grad.as_deref()
    }

    pub fn clear_grad(&mut self, t: TensorId) {
        self.tensors[t.0].grad = None;
    }

    pub fn take_grad(&mut self, t: TensorId) -> Option<Vec<f64>> {
        self.tensors[t.0].grad.take()
    }

    pub fn is_graph_attached(&self, t: TensorId) -> bool {
        self.tensors[t.0].node.is_some()
    }

    pub fn is_alive(&self, t: TensorId) -> bool {
        self.tensors[t.0]
            .node
            .as_ref()
            .map(|n| n.alive)
            .unwrap_or(false)
    }

    fn push(&mut self, data: TensorData) -> TensorId {
        let has_node = data.node.is_some();
        self.tensors.push(data);
        if has_node {
            self.stats.live_node_count += 1;
            self.stats.peak_live_node_count = self
                .stats
                .peak_live_node_count
                .max(self.stats.live_node_count);
        }
        TensorId(self.tensors.len() - 1)
    }

    fn record(
        &mut self,
        op: Op,
        parents: Vec<TensorId>,
        values: Vec<f64>,
        shape: Vec<usize>,
    ) -> TensorId {
        self.push(TensorData {
            shape,
            values,
            requires_grad: false,
            grad: None,
            node: Some(Node {
                op,
                parents,
                alive: true,
                pinned: false,
            }),
        })
    }

    // ── primitives ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        let (ta, tb) = (&self.tensors[a.0], &self.tensors[b.0]);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&ta.values, &tb.values, &mut out, m, k, n, false);
        Ok(self.record(Op::MatMul, vec![a, b], out, vec![m, n]))
    }

    /// Fused low-rank-adapted projection: `x w + scale * (x a) b`.
    /// One node for the whole adapter path; the backward rule produces
    /// all four parent gradients without materializing a d×d delta.
    pub fn lora_matmul(
        &mut self,
        x: TensorId,
        w: TensorId,
        a: TensorId,
        b: TensorId,
        scale: f64,
    ) -> TapeResult<TensorId> {
        let (tx, tw, ta, tb) = (
            &self.tensors[x.0],
            &self.tensors[w.0],
            &self.tensors[a.0],
            &self.tensors[b.0],
        );
        let (m, k) = (tx.rows(), tx.cols());
        let (n, r) = (tw.cols(), ta.cols());
        if tw.rows() != k || ta.rows() != k || tb.rows() != r || tb.cols() != n {
            return Err(TapeError::ShapeMismatch {
                op: "lora_matmul",
                lhs: tx.shape.clone(),
                rhs: tw.shape.clone(),
            });
        }
        let mut xa = vec![0.0; m * r];
        matmul_into(&tx.values, &ta.values, &mut xa, m, k, r, false);
        let mut out = vec![0.0; m * n];
        matmul_into(&tx.values, &tw.values, &mut out, m, k, n, false);
        let mut low = vec![0.0; m * n];
        matmul_into(&xa, &tb.values, &mut low, m, r, n, false);
        for (o, l) in out.iter_mut().zip(&low) {
            *o += scale * l;
        }
        Ok(self.record(Op::LoraMatMul { scale, xa }, vec![x, w, a, b], out, vec![m, n]))
    }

    pub fn transpose(&mut self, a: TensorId) -> TapeResult<TensorId> {
        let ta = &self.tensors[a.0];
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ta.values[i * n + j];
            }
        }
        Ok(self.record(Op::Transpose, vec![a], out, vec![n, m]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.zip("add", a, b, Op::Add, |x, y| x + y)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TapeResult<TensorId> {
        self.zip("mul", a, b, Op::Mul, |x, y| x * y)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> TapeResult<TensorId> {
        let (ta, tb) = (&self.tensors[a.0], &self.tensors[b.0]);
        if ta.shape != tb.shape {
            return Err(TapeError::ShapeMismatch {
                op: name,
                lhs: ta.shape.clone(),
                rhs: tb.shape.clone(),
            });
        }
        let out = ta
            .values
            .iter()
            .zip(&tb.values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape.clone();
        Ok(self.record(op, vec![a, b], out, shape))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let ta = &self.tensors[a.0];
        let out = ta.values.iter().map(|&x| c * x).collect();
        let shape = ta.shape.clone();
        self.record(Op::Scale(c), vec![a], out, shape)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let ta = &self.tensors[a.0];
        let out = ta.values.iter().map(|&x| x.tanh()).collect();
        let shape = ta.shape.clone();
        self.record(Op::Tanh, vec![a], out, shape)
    }

    pub fn row_softmax(&mut self, a: TensorId) -> TensorId {
        let ta = &self.tensors[a.0];
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &ta.values[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        self.record(Op::RowSoftmax, vec![a], out, vec![m, n])
    }

    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> TapeResult<TensorId> {
        let tt = &self.tensors[table.0];
        let (rows, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TapeError::Invalid {
                op: "embedding",
                msg: format!("index {bad} out of range for table with {rows} rows"),
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tt.values[i * d..(i + 1) * d]);
        }
        Ok(self.record(
            Op::Embedding {
                indices: indices.to_vec(),
            },
            vec![table],
            out,
            vec![indices.len(), d],
        ))
    }

    /// Concatenate along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TapeResult<TensorId> {
        if parts.is_empty() {
            return Err(TapeError::Invalid {
                op: "concat",
                msg: "empty input list".into(),
            });
        }
        let first = &self.tensors[parts[0].0];
        let (r0, c0) = (first.rows(), first.cols());
        match axis {
            0 => {
                let mut extents = Vec::with_capacity(parts.len());
                let mut out = Vec::new();
                for &p in parts {
                    let tp = &self.tensors[p.0];
                    if tp.cols() != c0 {
                        return Err(TapeError::ShapeMismatch {
                            op: "concat(rows)",
                            lhs: first.shape.clone(),
                            rhs: tp.shape.clone(),
                        });
                    }
                    extents.push(tp.rows());
                    out.extend_from_slice(&tp.values);
                }
                let rows = extents.iter().sum();
                Ok(self.record(
                    Op::Concat { axis: 0, extents },
                    parts.to_vec(),
                    out,
                    vec![rows, c0],
                ))
            }
            1 => {
                let mut extents = Vec::with_capacity(parts.len());
                for &p in parts {
                    let tp = &self.tensors[p.0];
                    if tp.rows() != r0 {
                        return Err(TapeError::ShapeMismatch {
                            op: "concat(cols)",
                            lhs: first.shape.clone(),
                            rhs: tp.shape.clone(),
                        });
                    }
                    extents.push(tp.cols());
                }
                let cols: usize = extents.iter().sum();
                let mut out = vec![0.0; r0 * cols];
                let mut off = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let tp = &self.tensors[p.0];
                    let c = extents[pi];
                    for i in 0..r0 {
                        out[i * cols + off..i * cols + off + c]
                            .copy_from_slice(&tp.values[i * c..(i + 1) * c]);
                    }
                    off += c;
                }
                Ok(self.record(
                    Op::Concat { axis: 1, extents },
                    parts.to_vec(),
                    out,
                    vec![r0, cols],
                ))
            }
            _ => Err(TapeError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range"),
            }),
        }
    }

    /// Contiguous slice of `len` rows (axis 0) or columns (axis 1).
    pub fn slice(
        &mut self,
        a: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> TapeResult<TensorId> {
        let ta = &self.tensors[a.0];
        let (m, n) = (ta.rows(), ta.cols());
        let extent = if axis == 0 { m } else { n };
        if axis > 1 || start + len > extent {
            return Err(TapeError::Invalid {
                op: "slice",
                msg: format!(
                    "range {start}..{} on axis {axis} of shape {:?}",
                    start + len,
                    ta.shape
                ),
            });
        }
        let (out, shape) = if axis == 0 {
            (ta.values[start * n..(start + len) * n].to_vec(), vec![len, n])
        } else {
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&ta.values[i * n + start..i * n + start + len]);
            }
            (out, vec![m, len])
        };
        Ok(self.record(Op::Slice { axis, start }, vec![a], out, shape))
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let ta = &self.tensors[a.0];
        let m = ta.values.iter().sum::<f64>() / ta.values.len() as f64;
        self.record(Op::Mean, vec![a], vec![m], vec![1])
    }

    pub fn sum_squares(&mut self, a: TensorId) -> TensorId {
        let ta = &self.tensors[a.0];
        let s = ta.values.iter().map(|&x| x * x).sum::<f64>();
        self.record(Op::SumSquares, vec![a], vec![s], vec![1])
    }

    /// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> TapeResult<TensorId> {
        let tl = &self.tensors[logits.0];
        let (m, n) = (tl.rows(), tl.cols());
        if targets.len() != m {
            return Err(TapeError::Invalid {
                op: "cross_entropy_logits",
                msg: format!("{} targets for {m} logit rows", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TapeError::Invalid {
                op: "cross_entropy_logits",
                msg: format!("target {bad} out of range for {n} classes"),
            });
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for i in 0..m {
            let row = &tl.values[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                probs[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                probs[i * n + j] /= sum;
            }
            loss += sum.ln() + max - row[targets[i]];
        }
        loss /= m as f64;
        Ok(self.record(
            Op::CrossEntropyLogits {
                targets: targets.to_vec(),
                probs,
            },
            vec![logits],
            vec![loss],
            vec![1],
        ))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: TensorId) -> TensorId {
        let ta = &self.tensors[a.0];
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; m * n];
        let mut inv_stds = vec![0.0; m];
        for i in 0..m {
            let row = &ta.values[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_stds[i] = inv;
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv;
            }
        }
        self.record(Op::LayerNorm { inv_std: inv_stds }, vec![a], out, vec![m, n])
    }

    // ── graph lifecycle ─────────────────────────────────────────────

    /// New leaf sharing `t`'s values, with the graph link severed.
    pub fn detach(&mut self, t: TensorId) -> TensorId {
        let values = self.tensors[t.0].values.clone();
        let shape = self.tensors[t.0].shape.clone();
        self.leaf(values, shape, true)
    }

    /// `leaf.grad <- leaf.grad * factor + saved` (missing grad reads as zero).
    pub fn grad_scale_add(
        &mut self,
        leaf: TensorId,
        factor: f64,
        saved: Option<&[f64]>,
    ) -> TapeResult<()> {
        let td = &mut self.tensors[leaf.0];
        if !td.requires_grad {
            return Err(TapeError::NoGrad(leaf.0));
        }
        if let Some(s) = saved {
            if s.len() != td.values.len() {
                return Err(TapeError::SeedLen {
                    seed: s.len(),
                    root: td.values.len(),
                });
            }
        }
        let numel = td.values.len();
        let grad = td.grad.get_or_insert_with(|| vec![0.0; numel]);
        for (i, g) in grad.iter_mut().enumerate() {
            *g = *g * factor + saved.map(|s| s[i]).unwrap_or(0.0);
        }
        Ok(())
    }

    /// Reverse sweep from `root`. Gradients accumulate into every
    /// `requires_grad` leaf reachable from the root. With
    /// `retain_graph == false` the traversed nodes are destroyed.
    pub fn backward(
        &mut self,
        root: TensorId,
        seed: Option<&[f64]>,
        retain_graph: bool,
    ) -> TapeResult<()> {
        {
            let tr = &self.tensors[root.0];
            match &tr.node {
                None => return Err(TapeError::NotAttached(root.0)),
                Some(n) if !n.alive => return Err(TapeError::DeadNode(root.0)),
                _ => {}
            }
        }
        let numel = self.tensors[root.0].values.len();
        let seed = match seed {
            Some(s) => {
                if s.len() != numel {
                    return Err(TapeError::SeedLen {
                        seed: s.len(),
                        root: numel,
                    });
                }
                s.to_vec()
            }
            None => {
                if numel != 1 {
                    return Err(TapeError::MissingSeed(root.0));
                }
                vec![1.0]
            }
        };

        let order = self.reachable(root, true)?;
        let mut adjoint: HashMap<usize, Vec<f64>> = HashMap::new();
        adjoint.insert(root.0, seed);

        // Creation order is topological, so a descending id sweep visits
        // every child before its parents.
        for &id in order.iter().rev() {
            let adj = match adjoint.remove(&id) {
                Some(a) => a,
                None => continue,
            };
            let td = &self.tensors[id];
            match &td.node {
                None => {
                    if td.requires_grad {
                        let numel = td.values.len();
                        let td = &mut self.tensors[id];
                        let grad = td.grad.get_or_insert_with(|| vec![0.0; numel]);
                        for (g, a) in grad.iter_mut().zip(&adj) {
                            *g += a;
                        }
                    }
                }
                Some(node) => {
                    let parents = node.parents.clone();
                    let contributions = self.backward_rule(id, &adj);
                    for (pid, contrib) in parents.iter().zip(contributions) {
                        let slot = adjoint
                            .entry(pid.0)
                            .or_insert_with(|| vec![0.0; self.tensors[pid.0].values.len()]);
                        for (s, c) in slot.iter_mut().zip(&contrib) {
                            *s += c;
                        }
                    }
                }
            }
        }

        self.stats.backward_pass_count += 1;
        if !retain_graph {
            self.kill(&order, false);
        }
        Ok(())
    }

    /// Keep the subgraph under `root` alive across non-retaining
    /// backwards until it is explicitly freed.
    pub fn pin_graph(&mut self, root: TensorId) {
        let order = self
            .reachable(root, false)
            .expect("pin traversal cannot fail");
        for id in order {
            if let Some(node) = self.tensors[id].node.as_mut() {
                node.pinned = true;
            }
        }
    }

    /// Destroy the graph reachable from `root`, pinned or not. Idempotent.
    pub fn free_graph(&mut self, root: TensorId) {
        if !self.is_alive(root) {
            return;
        }
        let order = self
            .reachable(root, false)
            .expect("free_graph traversal over alive nodes cannot fail");
        self.kill(&order, true);
    }

    fn kill(&mut self, ids: &[usize], force: bool) {
        for &id in ids {
            if let Some(node) = self.tensors[id].node.as_mut() {
                if node.alive && (force || !node.pinned) {
                    node.alive = false;
                    self.stats.live_node_count -= 1;
                }
            }
        }
    }

    /// Ids of graph-attached tensors reachable from `root`, ascending.
    /// With `strict`, traversal of a dead node is an error.
    fn reachable(&self, root: TensorId, strict: bool) -> TapeResult<Vec<usize>> {
        let mut seen = HashMap::new();
        let mut stack = vec![root.0];
        let mut out = Vec::new();
        while let Some(id) = stack.pop() {
            if seen.insert(id, ()).is_some() {
                continue;
            }
            match &self.tensors[id].node {
                None => {}
                Some(node) => {
                    if !node.alive {
                        if strict {
                            return Err(TapeError::DeadNode(id));
                        }
                        continue;
                    }
                    out.push(id);
                    for p in &node.parents {
                        if self.tensors[p.0].node.is_some() || self.tensors[p.0].requires_grad {
                            stack.push(p.0);
                        }
                    }
                }
            }
        }
        // Leaves with requires_grad also need adjoint slots in the sweep.
        let mut all: Vec<usize> = seen.keys().cloned().collect();
        all.sort_unstable();
        let _ = out;
        Ok(all)
    }

    /// Per-parent adjoint contributions for the node producing `id`.
    fn backward_rule(&self, id: usize, adj: &[f64]) -> Vec<Vec<f64>> {
        let td = &self.tensors[id];
        let node = td.node.as_ref().expect("backward_rule on leaf");
        match &node.op {
            Op::MatMul => {
                let a = &self.tensors[node.parents[0].0];
                let b = &self.tensors[node.parents[1].0];
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                // dA = dC * B^T
                let mut da = vec![0.0; m * k];
                matmul_into(adj, &b.values, &mut da, m, n, k, true);
                // dB = A^T * dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let aval = a.values[i * k + p];
                        if aval == 0.0 {
                            continue;
                        }
                        let dst = &mut db[p * n..(p + 1) * n];
                        let src = &adj[i * n..(i + 1) * n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += aval * s;
                        }
                    }
                }
                vec![da, db]
            }
            Op::LoraMatMul { scale, xa } => {
                let x = &self.tensors[node.parents[0].0];
                let w = &self.tensors[node.parents[1].0];
                let b = &self.tensors[node.parents[3].0];
                let (m, k) = (x.rows(), x.cols());
                let (n, r) = (w.cols(), b.rows());
                let a = &self.tensors[node.parents[2].0];
                // adj B^T reused for both dx's adapter term and da
                let mut adj_bt = vec![0.0; m * r];
                matmul_into(adj, &b.values, &mut adj_bt, m, n, r, true);
                let mut dx = vec![0.0; m * k];
                matmul_into(adj, &w.values, &mut dx, m, n, k, true);
                let mut dx_low = vec![0.0; m * k];
                matmul_into(&adj_bt, &a.values, &mut dx_low, m, r, k, true);
                for (d, l) in dx.iter_mut().zip(&dx_low) {
                    *d += scale * l;
                }
                let mut dw = vec![0.0; k * n];
                matmul_at_into(&x.values, adj, &mut dw, m, k, n);
                let mut da = vec![0.0; k * r];
                matmul_at_into(&x.values, &adj_bt, &mut da, m, k, r);
                for v in da.iter_mut() {
                    *v *= scale;
                }
                let mut db = vec![0.0; r * n];
                matmul_at_into(xa, adj, &mut db, m, r, n);
                for v in db.iter_mut() {
                    *v *= scale;
                }
                vec![dx, dw, da, db]
            }
            Op::Transpose => {
                let (m, n) = (td.rows(), td.cols());
                let mut dp = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dp[j * m + i] = adj[i * n + j];
                    }
                }
                vec![dp]
            }
            Op::Add => vec![adj.to_vec(), adj.to_vec()],
            Op::Mul => {
                let a = &self.tensors[node.parents[0].0];
                let b = &self.tensors[node.parents[1].0];
                vec![
                    adj.iter().zip(&b.values).map(|(&g, &y)| g * y).collect(),
                    adj.iter().zip(&a.values).map(|(&g, &x)| g * x).collect(),
                ]
            }
            Op::Scale(c) => vec![adj.iter().map(|&g| g * c).collect()],
            Op::Tanh => vec![adj
                .iter()
                .zip(&td.values)
                .map(|(&g, &y)| g * (1.0 - y * y))
                .collect()],
            Op::RowSoftmax => {
                let (m, n) = (td.rows(), td.cols());
                let mut dp = vec![0.0; m * n];
                for i in 0..m {
                    let y = &td.values[i * n..(i + 1) * n];
                    let g = &adj[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(g).map(|(&yj, &gj)| yj * gj).sum();
                    for j in 0..n {
                        dp[i * n + j] = y[j] * (g[j] - dot);
                    }
                }
                vec![dp]
            }
            Op::Embedding { indices } => {
                let table = &self.tensors[node.parents[0].0];
                let d = table.cols();
                let mut dp = vec![0.0; table.values.len()];
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut dp[idx * d..(idx + 1) * d];
                    let src = &adj[r * d..(r + 1) * d];
                    for (x, s) in dst.iter_mut().zip(src) {
                        *x += s;
                    }
                }
                vec![dp]
            }
            Op::Concat { axis, extents } => {
                let (m, n) = (td.rows(), td.cols());
                let mut out = Vec::with_capacity(extents.len());
                if *axis == 0 {
                    let mut off = 0;
                    for &r in extents {
                        out.push(adj[off * n..(off + r) * n].to_vec());
                        off += r;
                    }
                } else {
                    let mut off = 0;
                    for &c in extents {
                        let mut dp = Vec::with_capacity(m * c);
                        for i in 0..m {
                            dp.extend_from_slice(&adj[i * n + off..i * n + off + c]);
                        }
                        out.push(dp);
                        off += c;
                    }
                }
                out
            }
            Op::Slice { axis, start } => {
                let parent = &self.tensors[node.parents[0].0];
                let (pm, pn) = (parent.rows(), parent.cols());
                let mut dp = vec![0.0; pm * pn];
                if *axis == 0 {
                    let n = td.cols();
                    dp[start * n..start * n + adj.len()].copy_from_slice(adj);
                } else {
                    let len = td.cols();
                    for i in 0..pm {
                        dp[i * pn + start..i * pn + start + len]
                            .copy_from_slice(&adj[i * len..(i + 1) * len]);
                    }
                }
                vec![dp]
            }
            Op::Mean => {
                let parent = &self.tensors[node.parents[0].0];
                let g = adj[0] / parent.values.len() as f64;
                vec![vec![g; parent.values.len()]]
            }
            Op::SumSquares => {
                let parent = &self.tensors[node.parents[0].0];
                vec![parent.values.iter().map(|&x| 2.0 * x * adj[0]).collect()]
            }
            Op::CrossEntropyLogits { targets, probs } => {
                let m = targets.len();
                let n = probs.len() / m;
                let g = adj[0] / m as f64;
                let mut dp: Vec<f64> = probs.iter().map(|&p| p * g).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dp[i * n + t] -= g;
                }
                vec![dp]
            }
            Op::LayerNorm { inv_std } => {
                let (m, n) = (td.rows(), td.cols());
                let mut dp = vec![0.0; m * n];
                for i in 0..m {
                    let y = &td.values[i * n..(i + 1) * n];
                    let g = &adj[i * n..(i + 1) * n];
                    let g_mean = g.iter().sum::<f64>() / n as f64;
                    let gy_mean = g.iter().zip(y).map(|(&gj, &yj)| gj * yj).sum::<f64>() / n as f64;
                    for j in 0..n {
                        dp[i * n + j] = inv_std[i] * (g[j] - g_mean - y[j] * gy_mean);
                    }
                }
                vec![dp]
            }
        }
    }
}

/// out += A^T * B where A is m x k and B is m x n; out is k x n.
fn matmul_at_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dst = &mut out[p * n..(p + 1) * n];
            for (d, s) in dst.iter_mut().zip(brow) {
                *d += av * s;
            }
        }
    }
}

/// out += A * B (or A * B^T when `b_transposed`), A is m x k.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize, b_transposed: bool) {
    if b_transposed {
        // A: m x k, B: n x k, out: m x n
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                orow[j] += arow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<f64>();
            }
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_of(tape: &Tape, t: TensorId) -> Vec<f64> {
        tape.grad(t).expect("grad present").to_vec()
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1], true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, None, false).unwrap();
        assert_eq!(grad_of(&tape, x), vec![6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![3.0], vec![1], true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, None, true).unwrap();
        tape.backward(y, None, true).unwrap();
        assert_eq!(grad_of(&tape, x), vec![12.0]);
        assert_eq!(tape.stats().backward_pass_count, 2);
    }

    #[test]
    fn backward_after_free_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, None, false).unwrap();
        assert!(matches!(
            tape.backward(y, None, false),
            Err(TapeError::DeadNode(_))
        ));
    }

    #[test]
    fn free_graph_is_idempotent_and_restores_counts() {
        let mut tape = Tape::new();
        let baseline = tape.stats().live_node_count;
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true);
        let y = tape.tanh(x);
        let z = tape.sum_squares(y);
        assert_eq!(tape.stats().live_node_count, baseline + 2);
        tape.free_graph(z);
        assert_eq!(tape.stats().live_node_count, baseline);
        tape.free_graph(z);
        assert_eq!(tape.stats().live_node_count, baseline);
    }

    #[test]
    fn non_scalar_root_needs_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], vec![2], true);
        let y = tape.tanh(x);
        assert!(matches!(
            tape.backward(y, None, true),
            Err(TapeError::MissingSeed(_))
        ));
        tape.backward(y, Some(&[1.0, 1.0]), false).unwrap();
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn detach_severs_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![2.0], vec![1], true);
        let y = tape.mul(x, x).unwrap();
        let d = tape.detach(y);
        assert_eq!(tape.values(d), tape.values(y));
        let z = tape.mul(d, d).unwrap();
        tape.backward(z, None, false).unwrap();
        assert!(tape.grad(x).is_none());
        assert_eq!(grad_of(&tape, d), vec![8.0]);
    }

    #[test]
    fn grad_scale_add_rules() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0], vec![2], true);
        tape.grad_scale_add(x, 3.0, Some(&[1.0, 1.0])).unwrap();
        assert_eq!(grad_of(&tape, x), vec![1.0, 1.0]);
        let y = tape.leaf(vec![0.0, 0.0], vec![2], true);
        let g = tape.tanh(y); // give y a grad of [1,1] via seed
        tape.backward(g, Some(&[1.0, 2.0]), false).unwrap();
        tape.grad_scale_add(y, 2.0, Some(&[0.5, 0.5])).unwrap();
        assert_eq!(grad_of(&tape, y), vec![2.5, 4.5]);
        tape.grad_scale_add(y, 1.0, None).unwrap();
        assert_eq!(grad_of(&tape, y), vec![2.5, 4.5]);
    }

    #[test]
    fn shape_errors_name_the_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], vec![2, 3]);
        let b = tape.constant(vec![0.0; 6], vec![3, 2]);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn matmul_and_add_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0; 8], vec![2, 4]);
        let b = tape.constant(vec![1.0; 12], vec![4, 3]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 3]);
        assert!(tape.values(c).iter().all(|&v| v == 4.0));
        let z = tape.constant(vec![0.0; 6], vec![2, 3]);
        let s = tape.add(c, z).unwrap();
        assert_eq!(tape.shape(s), &[2, 3]);
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 4], vec![2, 2]);
        let y = tape.tanh(a);
        assert!(tape.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0], vec![2, 3]);
        let y = tape.row_softmax(a);
        for i in 0..2 {
            let s: f64 = tape.values(y)[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_matches_manual() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 0.0, 1.0, 0.0], vec![2, 2], true);
        let loss = tape.cross_entropy_logits(logits, &[0, 1]).unwrap();
        let expected = (2.0_f64.ln() + (1.0 + (-1.0_f64).exp()).ln() + 1.0) / 2.0;
        assert!((tape.values(loss)[0] - expected).abs() < 1e-12);
    }
}
