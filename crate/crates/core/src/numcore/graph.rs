//! Eagerly-evaluated computation graph (Wengert tape).
//!
//! Every operation computes its value immediately and records itself; calling
//! [`Graph::backward`] on a scalar node replays the trace in reverse and
//! accumulates vector-Jacobian products. Replays are bit-deterministic: the
//! trace order fixes the accumulation order.

use super::{layer_norm_row, softmax_kernel, NumError, NumResult, Tensor, CE_FLOOR};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    /// Multiply every element of `x` by the 1x1 node `s`.
    MulScalar { x: TensorId, s: TensorId },
    /// Broadcast-add a 1xD row over every row of `x`.
    AddRow { x: TensorId, row: TensorId },
    Matmul { a: TensorId, b: TensorId },
    /// a (n x k) times b (m x k) transposed -> n x m.
    MatmulNT { a: TensorId, b: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    SoftmaxRows { x: TensorId },
    /// Softmax over the single column of an n x 1 node.
    SoftmaxCol { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, stats: Vec<(f64, f64)> },
    ConcatRows { a: TensorId, b: TensorId },
    SliceRows { x: TensorId, start: usize, len: usize },
    EmbedLookup { table: TensorId, ids: Vec<usize> },
    MeanRows { x: TensorId },
    SumAll { x: TensorId },
    MaxAll { x: TensorId, argmax: usize },
    Conv1dSame { x: TensorId, taps: TensorId, bias: TensorId },
    CrossEntropy { dist: TensorId, target: usize },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for a node, if any gradient flowed to it.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Operation trace plus per-node values.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, values: Vec<f64>, needs: bool) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, values, needs_grad: needs });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> &Node {
        &self.nodes[id.0]
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register a tensor as a graph input. Leaves with `requires_grad` set
    /// receive gradients from [`Graph::backward`].
    pub fn input(&mut self, t: &Tensor) -> TensorId {
        self.push(Op::Input, t.rows(), t.cols(), t.values().to_vec(), t.requires_grad())
    }

    /// Constant (no-grad) input from raw parts.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> TensorId {
        assert_eq!(values.len(), rows * cols, "constant shape mismatch");
        self.push(Op::Input, rows, cols, values, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(1, 1, vec![v])
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.node(id).values
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.values.len(), 1, "scalar_value on non-scalar node");
        n.values[0]
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    /// Snapshot a node's value as a Tensor.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let n = self.node(id);
        Tensor::matrix(n.rows, n.cols, n.values.clone()).expect("graph nodes hold valid tensors")
    }

    // ── Elementwise and linear ops ───────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "add shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add { a, b }, r, c, v, needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "sub shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub { a, b }, r, c, v, needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(b), (r, c), "mul shape mismatch");
        let v = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul { a, b }, r, c, v, needs)
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let (r, cc) = self.shape(x);
        let v = self.value(x).iter().map(|e| e * c).collect();
        let needs = self.needs(x);
        self.push(Op::Scale { x, c }, r, cc, v, needs)
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> TensorId {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar needs a 1x1 scalar node");
        let sv = self.value(s)[0];
        let (r, c) = self.shape(x);
        let v = self.value(x).iter().map(|e| e * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        self.push(Op::MulScalar { x, s }, r, c, v, needs)
    }

    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "add_row shape mismatch");
        let rv = self.value(row).to_vec();
        let mut v = self.value(x).to_vec();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += rv[j];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        self.push(Op::AddRow { x, row }, r, c, v, needs)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let v = matmul_kernel(self.value(a), self.value(b), n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul { a, b }, n, m, v, needs)
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_nt inner dimension mismatch");
        let av = self.value(a);
        let bv = self.value(b);
        let mut v = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += av[i * k + p] * bv[j * k + p];
                }
                v[i * m + j] = s;
            }
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::MatmulNT { a, b }, n, m, v, needs)
    }

    // ── Nonlinearities ───────────────────────────────────────────────

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let v = self.value(x).iter().map(|e| e.max(0.0)).collect();
        let needs = self.needs(x);
        self.push(Op::Relu { x }, r, c, v, needs)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let v = self.value(x).iter().map(|e| sigmoid_scalar(*e)).collect();
        let needs = self.needs(x);
        self.push(Op::Sigmoid { x }, r, c, v, needs)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let v = self.value(x).iter().map(|e| e.tanh()).collect();
        let needs = self.needs(x);
        self.push(Op::Tanh { x }, r, c, v, needs)
    }

    /// Row-wise softmax; every output row sums to 1 within 1e-12.
    pub fn softmax_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            v.extend(softmax_kernel(&self.value(x)[i * c..(i + 1) * c]));
        }
        let needs = self.needs(x);
        self.push(Op::SoftmaxRows { x }, r, c, v, needs)
    }

    /// Softmax along the single column of an n x 1 node.
    pub fn softmax_col(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(c, 1, "softmax_col expects an n x 1 node");
        let v = softmax_kernel(self.value(x));
        let needs = self.needs(x);
        self.push(Op::SoftmaxCol { x }, r, 1, v, needs)
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> NumResult<TensorId> {
        let (r, d) = self.shape(x);
        if d < 2 {
            return Err(NumError::Dimension(format!("layer_norm needs d >= 2, got {d}")));
        }
        if self.shape(gamma) != (1, d) || self.shape(beta) != (1, d) {
            return Err(NumError::Dimension("layer_norm gamma/beta must be 1 x d".into()));
        }
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let mut v = Vec::with_capacity(r * d);
        let mut stats = Vec::with_capacity(r);
        for i in 0..r {
            let (normed, mean, std) = layer_norm_row(&self.value(x)[i * d..(i + 1) * d], eps)?;
            stats.push((mean, std));
            for (j, nv) in normed.iter().enumerate() {
                v.push(gv[j] * nv + bv[j]);
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, stats }, r, d, v, needs))
    }

    // ── Structural ops ───────────────────────────────────────────────

    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(c, cb, "concat_rows column mismatch");
        let mut v = self.value(a).to_vec();
        v.extend_from_slice(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatRows { a, b }, ra + rb, c, v, needs)
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(start + len <= r, "slice_rows out of range");
        assert!(len > 0, "slice_rows of zero rows");
        let v = self.value(x)[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        self.push(Op::SliceRows { x, start, len }, len, c, v, needs)
    }

    pub fn embed_lookup(&mut self, table: TensorId, ids: &[usize]) -> NumResult<TensorId> {
        if ids.is_empty() {
            return Err(NumError::Dimension("embed_lookup of empty id sequence".into()));
        }
        let (vocab, d) = self.shape(table);
        if let Some(bad) = ids.iter().find(|i| **i >= vocab) {
            return Err(NumError::Dimension(format!(
                "embed_lookup id {bad} out of range for vocab {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut v = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            v.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(Op::EmbedLookup { table, ids: ids.to_vec() }, ids.len(), d, v, needs))
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn mean_rows(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut v = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                v[j] += xv[i * c + j];
            }
        }
        for e in v.iter_mut() {
            *e /= r as f64;
        }
        let needs = self.needs(x);
        self.push(Op::MeanRows { x }, 1, c, v, needs)
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        self.push(Op::SumAll { x }, 1, 1, vec![s], needs)
    }

    /// Max over all elements; ties resolve to the first (row-major) maximum.
    pub fn max_all(&mut self, x: TensorId) -> TensorId {
        let xv = self.value(x);
        let mut argmax = 0;
        let mut best = xv[0];
        for (i, v) in xv.iter().enumerate().skip(1) {
            if *v > best {
                best = *v;
                argmax = i;
            }
        }
        let needs = self.needs(x);
        self.push(Op::MaxAll { x, argmax }, 1, 1, vec![best], needs)
    }

    /// Same-length 1-D convolution over an n x 1 sequence with symmetric
    /// zero padding. Kernel taps are a 1 x k node (k odd), bias is 1 x 1.
    pub fn conv1d_same(&mut self, x: TensorId, taps: TensorId, bias: TensorId) -> NumResult<TensorId> {
        let (n, c) = self.shape(x);
        if c != 1 {
            return Err(NumError::Dimension("conv1d_same expects an n x 1 sequence".into()));
        }
        let (tr, k) = self.shape(taps);
        if tr != 1 {
            return Err(NumError::Dimension("conv1d taps must be 1 x k".into()));
        }
        if k % 2 == 0 {
            return Err(NumError::Config(format!("conv1d kernel size must be odd, got {k}")));
        }
        if self.shape(bias) != (1, 1) {
            return Err(NumError::Dimension("conv1d bias must be 1 x 1".into()));
        }
        let xv = self.value(x);
        let tv = self.value(taps);
        let b = self.value(bias)[0];
        let half = k / 2;
        let mut v = vec![0.0; n];
        for i in 0..n {
            let mut s = b;
            for j in 0..k {
                let src = i as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < n {
                    s += tv[j] * xv[src as usize];
                }
            }
            v[i] = s;
        }
        let needs = self.needs(x) || self.needs(taps) || self.needs(bias);
        Ok(self.push(Op::Conv1dSame { x, taps, bias }, n, 1, v, needs))
    }

    /// -log(dist[target]) with the 1e-12 probability floor. `dist` is an
    /// n x 1 probability column.
    pub fn cross_entropy(&mut self, dist: TensorId, target: usize) -> NumResult<TensorId> {
        let (n, c) = self.shape(dist);
        if c != 1 {
            return Err(NumError::Dimension("cross_entropy expects an n x 1 distribution".into()));
        }
        if target >= n {
            return Err(NumError::Dimension(format!(
                "cross_entropy target {target} out of range for length {n}"
            )));
        }
        let p = self.value(dist)[target];
        let v = -(p.max(CE_FLOOR)).ln();
        let needs = self.needs(dist);
        Ok(self.push(Op::CrossEntropy { dist, target }, 1, 1, vec![v], needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss node. Returns gradients for
    /// every node that requires them; identical traces yield bit-identical
    /// gradients.
    pub fn backward(&self, loss: TensorId) -> NumResult<Gradients> {
        let ln = self.node(loss);
        if ln.values.len() != 1 {
            return Err(NumError::Dimension(format!(
                "backward needs a scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        if !ln.values[0].is_finite() {
            return Err(NumError::Numeric(format!("backward on non-finite loss {}", ln.values[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.backward_op(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.needs(id) {
            return;
        }
        let slot = &mut grads[id.0];
        match slot {
            Some(buf) => {
                for (b, d) in buf.iter_mut().zip(delta) {
                    *b += d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let da: Vec<f64> = g.iter().zip(bv).map(|(gv, b)| gv * b).collect();
                let db: Vec<f64> = g.iter().zip(av).map(|(gv, a)| gv * a).collect();
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s)[0];
                let xv = self.value(*x);
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g.iter().zip(xv).map(|(gv, x)| gv * x).sum();
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *s, &[ds]);
            }
            Op::AddRow { x, row } => {
                self.accumulate(grads, *x, g);
                let (r, c) = self.shape(*x);
                let mut dr = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dr[j] += g[i * c + j];
                    }
                }
                self.accumulate(grads, *row, &dr);
            }
            Op::Matmul { a, b } => {
                let (n, k) = self.shape(*a);
                let (_, m) = self.shape(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                // dA = G B^T
                let mut da = vec![0.0; n * k];
                for i in 0..n {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..m {
                            s += g[i * m + j] * bv[p * m + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                // dB = A^T G
                let mut db = vec![0.0; k * m];
                for p in 0..k {
                    for j in 0..m {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += av[i * k + p] * g[i * m + j];
                        }
                        db[p * m + j] = s;
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::MatmulNT { a, b } => {
                let (n, k) = self.shape(*a);
                let (m, _) = self.shape(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                // C = A B^T; dA = G B, dB = G^T A
                let da = matmul_kernel(g, bv, n, m, k);
                let mut db = vec![0.0; m * k];
                for j in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for i in 0..n {
                            s += g[i * m + j] * av[i * k + p];
                        }
                        db[j * k + p] = s;
                    }
                }
                self.accumulate(grads, *a, &da);
                self.accumulate(grads, *b, &db);
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let yv = &node.values;
                let dx: Vec<f64> = g.iter().zip(yv).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Tanh { x } => {
                let yv = &node.values;
                let dx: Vec<f64> = g.iter().zip(yv).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = (node.rows, node.cols);
                let yv = &node.values;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let row = &yv[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let dot: f64 = grow.iter().zip(row).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = row[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SoftmaxCol { x } => {
                let yv = &node.values;
                let dot: f64 = g.iter().zip(yv).map(|(a, b)| a * b).sum();
                let dx: Vec<f64> = yv.iter().zip(g).map(|(y, gv)| y * (gv - dot)).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let (r, d) = (node.rows, node.cols);
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; r * d];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for i in 0..r {
                    let (mean, std) = stats[i];
                    let xrow = &xv[i * d..(i + 1) * d];
                    let grow = &g[i * d..(i + 1) * d];
                    let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) / std).collect();
                    let gy: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| a * b).collect();
                    let mean_gy = gy.iter().sum::<f64>() / d as f64;
                    let mean_gy_xhat =
                        gy.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dx[i * d + j] = (gy[j] - mean_gy - xhat[j] * mean_gy_xhat) / std;
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *gamma, &dgamma);
                self.accumulate(grads, *beta, &dbeta);
            }
            Op::ConcatRows { a, b } => {
                let (ra, c) = self.shape(*a);
                let (rb, _) = self.shape(*b);
                self.accumulate(grads, *a, &g[..ra * c]);
                self.accumulate(grads, *b, &g[ra * c..(ra + rb) * c]);
            }
            Op::SliceRows { x, start, len } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                dx[start * c..(start + len) * c].copy_from_slice(g);
                self.accumulate(grads, *x, &dx);
            }
            Op::EmbedLookup { table, ids } => {
                let (vocab, d) = self.shape(*table);
                let mut dt = vec![0.0; vocab * d];
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[row * d + j];
                    }
                }
                self.accumulate(grads, *table, &dt);
            }
            Op::MeanRows { x } => {
                let (r, c) = self.shape(*x);
                let inv = 1.0 / r as f64;
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = g[j] * inv;
                    }
                }
                self.accumulate(grads, *x, &dx);
            }
            Op::SumAll { x } => {
                let (r, c) = self.shape(*x);
                let dx = vec![g[0]; r * c];
                self.accumulate(grads, *x, &dx);
            }
            Op::MaxAll { x, argmax } => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![0.0; r * c];
                dx[*argmax] = g[0];
                self.accumulate(grads, *x, &dx);
            }
            Op::Conv1dSame { x, taps, bias } => {
                let (n, _) = self.shape(*x);
                let (_, k) = self.shape(*taps);
                let half = (k / 2) as isize;
                let xv = self.value(*x);
                let tv = self.value(*taps);
                let mut dx = vec![0.0; n];
                let mut dt = vec![0.0; k];
                let mut db = 0.0;
                for i in 0..n {
                    db += g[i];
                    for j in 0..k {
                        let src = i as isize + j as isize - half;
                        if src >= 0 && (src as usize) < n {
                            dx[src as usize] += tv[j] * g[i];
                            dt[j] += g[i] * xv[src as usize];
                        }
                    }
                }
                self.accumulate(grads, *x, &dx);
                self.accumulate(grads, *taps, &dt);
                self.accumulate(grads, *bias, &[db]);
            }
            Op::CrossEntropy { dist, target } => {
                let (n, _) = self.shape(*dist);
                let p = self.value(*dist)[*target];
                let mut dd = vec![0.0; n];
                // Below the floor the loss is the constant -ln(floor).
                if p > CE_FLOOR {
                    dd[*target] = -g[0] / p;
                }
                self.accumulate(grads, *dist, &dd);
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

// ── Composite builders ───────────────────────────────────────────────

/// Per-head projection ids for one self-attention layer. Each head owns
/// query/key/value maps (d x d_head) and an output map (d_head x d); the
/// head outputs are summed, which equals the usual concat-then-project form.
pub struct AttentionIds {
    pub wq: Vec<TensorId>,
    pub wk: Vec<TensorId>,
    pub wv: Vec<TensorId>,
    pub wo: Vec<TensorId>,
}

/// Scaled dot-product multi-head self-attention over an l x d node.
/// Attention rows are probability distributions; scale is 1/sqrt(d/h).
pub fn multihead_self_attention(
    g: &mut Graph,
    z: TensorId,
    ids: &AttentionIds,
    heads: usize,
) -> NumResult<TensorId> {
    let (_, d) = g.shape(z);
    if heads == 0 || d % heads != 0 {
        return Err(NumError::Config(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    if ids.wq.len() != heads || ids.wk.len() != heads || ids.wv.len() != heads || ids.wo.len() != heads
    {
        return Err(NumError::Config("attention params do not match head count".into()));
    }
    let d_head = d / heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = None;
    for h in 0..heads {
        let q = g.matmul(z, ids.wq[h]);
        let k = g.matmul(z, ids.wk[h]);
        let v = g.matmul(z, ids.wv[h]);
        let scores = g.matmul_nt(q, k);
        let scaled = g.scale(scores, scale);
        let attn = g.softmax_rows(scaled);
        let ctx = g.matmul(attn, v);
        let proj = g.matmul(ctx, ids.wo[h]);
        out = Some(match out {
            None => proj,
            Some(acc) => g.add(acc, proj),
        });
    }
    Ok(out.expect("heads >= 1"))
}

/// Parameter ids for a single-layer LSTM cell of width d.
pub struct LstmIds {
    pub w_ii: TensorId,
    pub w_if: TensorId,
    pub w_ig: TensorId,
    pub w_io: TensorId,
    pub w_hi: TensorId,
    pub w_hf: TensorId,
    pub w_hg: TensorId,
    pub w_ho: TensorId,
    pub b_i: TensorId,
    pub b_f: TensorId,
    pub b_g: TensorId,
    pub b_o: TensorId,
}

/// Run a standard LSTM recurrence over the rows of an m x d node and
/// mean-pool the hidden states into a 1 x d sentence vector.
pub fn lstm_mean_pool(g: &mut Graph, ids: &LstmIds, x: TensorId) -> NumResult<TensorId> {
    let (m, d) = g.shape(x);
    if m == 0 {
        return Err(NumError::Dimension("lstm_mean_pool over zero steps".into()));
    }
    let mut h = g.constant(1, d, vec![0.0; d]);
    let mut c = g.constant(1, d, vec![0.0; d]);
    let mut pooled: Option<TensorId> = None;
    for t in 0..m {
        let xt = g.slice_rows(x, t, 1);
        let i = gate(g, xt, h, ids.w_ii, ids.w_hi, ids.b_i);
        let i = g.sigmoid(i);
        let f = gate(g, xt, h, ids.w_if, ids.w_hf, ids.b_f);
        let f = g.sigmoid(f);
        let gbar = gate(g, xt, h, ids.w_ig, ids.w_hg, ids.b_g);
        let gbar = g.tanh(gbar);
        let o = gate(g, xt, h, ids.w_io, ids.w_ho, ids.b_o);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ig = g.mul(i, gbar);
        c = g.add(fc, ig);
        let tc = g.tanh(c);
        h = g.mul(o, tc);
        pooled = Some(match pooled {
            None => h,
            Some(acc) => g.concat_rows(acc, h),
        });
    }
    let stacked = pooled.expect("m >= 1");
    Ok(g.mean_rows(stacked))
}

fn gate(
    g: &mut Graph,
    xt: TensorId,
    h: TensorId,
    w_x: TensorId,
    w_h: TensorId,
    b: TensorId,
) -> TensorId {
    let a = g.matmul(xt, w_x);
    let bh = g.matmul(h, w_h);
    let s = g.add(a, bh);
    g.add(s, b)
}
