//! Minimal reverse-mode automatic differentiation over row-major `f64`
//! matrices. Each training step records a fresh tape; backward walks the
//! nodes in reverse, accumulating gradients into every leaf that asked for
//! them.

const RMS_EPS: f64 = 1e-8;

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    /// `a (m×n) + b (1×n)` broadcast over rows.
    AddRowBroadcast(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Scale(TensorId, f64),
    /// `a * b` or `a * bᵀ` when `trans_b` is set.
    MatMul {
        a: TensorId,
        b: TensorId,
        trans_b: bool,
    },
    SliceCols {
        a: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    GatherRows {
        a: TensorId,
        rows: Vec<usize>,
    },
    /// Row-wise softmax; with `causal` set, entry `(i, j)` for `j > i` is
    /// masked out of the normalization and gets probability zero.
    SoftmaxRows {
        a: TensorId,
        causal: bool,
    },
    /// Per-row RMS normalization with a learned gain: `y = x / rms(x) * g`.
    RmsNorm {
        a: TensorId,
        gain: TensorId,
    },
    Tanh(TensorId),
    Abs(TensorId),
    /// Scalar (1×1) sum of all entries.
    SumAll(TensorId),
    /// Scalar mean of per-row cross-entropy against the target indices.
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<usize>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> TensorId {
        debug_assert_eq!(value.len(), rows * cols);
        let requires_grad = match &op {
            Op::Leaf => false, // set by leaf()
            Op::Add(a, b)
            | Op::AddRowBroadcast(a, b)
            | Op::Sub(a, b)
            | Op::MatMul { a, b, .. } => self.nodes[*a].requires_grad || self.nodes[*b].requires_grad,
            Op::Scale(a, _)
            | Op::SliceCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::SoftmaxRows { a, .. }
            | Op::Tanh(a)
            | Op::Abs(a)
            | Op::SumAll(a)
            | Op::CrossEntropyMean { logits: a, .. } => self.nodes[*a].requires_grad,
            Op::RmsNorm { a, gain } => {
                self.nodes[*a].requires_grad || self.nodes[*gain].requires_grad
            }
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => {
                parts.iter().any(|&p| self.nodes[p].requires_grad)
            }
        };
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, requires_grad: bool) -> TensorId {
        let id = self.push(rows, cols, value, Op::Leaf);
        self.nodes[id].requires_grad = requires_grad;
        id
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = self.shape(a);
        assert_eq!((ra, ca), self.shape(b), "add shape mismatch");
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x + y)
            .collect();
        self.push(ra, ca, v, Op::Add(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!((rb, cb), (1, ca), "broadcast shape mismatch");
        let bv = self.nodes[b].value.clone();
        let v: Vec<f64> = self.nodes[a]
            .value
            .chunks(ca)
            .flat_map(|row| row.iter().zip(&bv).map(|(x, y)| x + y).collect::<Vec<_>>())
            .collect();
        self.push(ra, ca, v, Op::AddRowBroadcast(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ra, ca) = self.shape(a);
        assert_eq!((ra, ca), self.shape(b), "sub shape mismatch");
        let v: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(x, y)| x - y)
            .collect();
        self.push(ra, ca, v, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let (ra, ca) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x * c).collect();
        self.push(ra, ca, v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.matmul_impl(a, b, false)
    }

    /// `a * bᵀ`.
    pub fn matmul_t(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: TensorId, b: TensorId, trans_b: bool) -> TensorId {
        let (m, k) = self.shape(a);
        let (rb, cb) = self.shape(b);
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        assert_eq!(k, kb, "matmul inner dim mismatch");
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        let mut v = vec![0.0; m * n];
        if trans_b {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += av[i * k + p] * bv[j * k + p];
                    }
                    v[i * n + j] = acc;
                }
            }
        } else {
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x != 0.0 {
                        let brow = &bv[p * n..(p + 1) * n];
                        let out = &mut v[i * n..(i + 1) * n];
                        for j in 0..n {
                            out[j] += x * brow[j];
                        }
                    }
                }
            }
        }
        self.push(m, n, v, Op::MatMul { a, b, trans_b })
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> TensorId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n, "slice out of range");
        let av = &self.nodes[a].value;
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&av[i * n + start..i * n + start + len]);
        }
        self.push(m, len, v, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        let m = self.shape(parts[0]).0;
        let total: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let (rp, cp) = self.shape(p);
                assert_eq!(rp, m, "concat_cols row mismatch");
                v.extend_from_slice(&self.nodes[p].value[i * cp..(i + 1) * cp]);
            }
        }
        self.push(m, total, v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        let n = self.shape(parts[0]).1;
        let total: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Vec::with_capacity(total * n);
        for &p in parts {
            assert_eq!(self.shape(p).1, n, "concat_rows col mismatch");
            v.extend_from_slice(&self.nodes[p].value);
        }
        self.push(total, n, v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> TensorId {
        let (m, n) = self.shape(a);
        let mut v = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather row out of range");
            v.extend_from_slice(&self.nodes[a].value[r * n..(r + 1) * n]);
        }
        self.push(rows.len(), n, v, Op::GatherRows { a, rows: rows.to_vec() })
    }

    pub fn softmax_rows(&mut self, a: TensorId, causal: bool) -> TensorId {
        let (m, n) = self.shape(a);
        let av = &self.nodes[a].value;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let lim = if causal { (i + 1).min(n) } else { n };
            let row = &av[i * n..i * n + lim];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..lim {
                let e = (row[j] - mx).exp();
                v[i * n + j] = e;
                sum += e;
            }
            for j in 0..lim {
                v[i * n + j] /= sum;
            }
        }
        self.push(m, n, v, Op::SoftmaxRows { a, causal })
    }

    pub fn rms_norm(&mut self, a: TensorId, gain: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        assert_eq!(self.shape(gain), (1, n), "gain shape mismatch");
        let gv = self.nodes[gain].value.clone();
        let av = &self.nodes[a].value;
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
            let r = (ms + RMS_EPS).sqrt();
            for j in 0..n {
                v[i * n + j] = row[j] / r * gv[j];
            }
        }
        self.push(m, n, v, Op::RmsNorm { a, gain })
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.tanh()).collect();
        self.push(m, n, v, Op::Tanh(a))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let (m, n) = self.shape(a);
        let v: Vec<f64> = self.nodes[a].value.iter().map(|x| x.abs()).collect();
        self.push(m, n, v, Op::Abs(a))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].value.iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a))
    }

    /// Mean cross-entropy of row `r` of `logits` against `targets[r]`.
    pub fn cross_entropy_mean(&mut self, logits: TensorId, targets: &[usize]) -> TensorId {
        let (m, n) = self.shape(logits);
        assert_eq!(m, targets.len(), "target count mismatch");
        let lv = &self.nodes[logits].value;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < n, "target out of vocab");
            let row = &lv[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        self.push(
            1,
            1,
            vec![total / m as f64],
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Runs backward from scalar `root` (seeded with `seed`) and returns
    /// per-node gradient buffers; non-grad nodes get empty buffers.
    pub fn backward(&self, root: TensorId, seed: f64) -> Vec<Vec<f64>> {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    vec![0.0; n.rows * n.cols]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !self.nodes[root].requires_grad {
            return grads;
        }
        grads[root][0] = seed;

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || grads[id].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            let (m, n) = (node.rows, node.cols);
            match &node.op {
                Op::Leaf => {
                    grads[id] = g;
                    continue;
                }
                Op::Add(a, b) => {
                    for (tgt, sign) in [(*a, 1.0), (*b, 1.0)] {
                        if self.nodes[tgt].requires_grad {
                            for (dst, src) in grads[tgt].iter_mut().zip(&g) {
                                *dst += sign * src;
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (tgt, sign) in [(*a, 1.0), (*b, -1.0)] {
                        if self.nodes[tgt].requires_grad {
                            for (dst, src) in grads[tgt].iter_mut().zip(&g) {
                                *dst += sign * src;
                            }
                        }
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    if self.nodes[*a].requires_grad {
                        for (dst, src) in grads[*a].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        for i in 0..m {
                            for j in 0..n {
                                grads[*b][j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[*a].requires_grad {
                        for (dst, src) in grads[*a].iter_mut().zip(&g) {
                            *dst += c * src;
                        }
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (_, k) = self.shape(*a);
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if !trans_b {
                        // y = a b ; da = g bᵀ ; db = aᵀ g
                        if self.nodes[*a].requires_grad {
                            let da = &mut grads[*a];
                            for i in 0..m {
                                for p in 0..k {
                                    let mut acc = 0.0;
                                    for j in 0..n {
                                        acc += g[i * n + j] * bv[p * n + j];
                                    }
                                    da[i * k + p] += acc;
                                }
                            }
                        }
                        if self.nodes[*b].requires_grad {
                            let db = &mut grads[*b];
                            for i in 0..m {
                                for p in 0..k {
                                    let x = av[i * k + p];
                                    if x != 0.0 {
                                        for j in 0..n {
                                            db[p * n + j] += x * g[i * n + j];
                                        }
                                    }
                                }
                            }
                        }
                    } else {
                        // y = a bᵀ with b: n×k ; da = g b ; db = gᵀ a
                        if self.nodes[*a].requires_grad {
                            let da = &mut grads[*a];
                            for i in 0..m {
                                for j in 0..n {
                                    let gij = g[i * n + j];
                                    if gij != 0.0 {
                                        for p in 0..k {
                                            da[i * k + p] += gij * bv[j * k + p];
                                        }
                                    }
                                }
                            }
                        }
                        if self.nodes[*b].requires_grad {
                            let db = &mut grads[*b];
                            for i in 0..m {
                                for j in 0..n {
                                    let gij = g[i * n + j];
                                    if gij != 0.0 {
                                        for p in 0..k {
                                            db[j * k + p] += gij * av[i * k + p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    if self.nodes[*a].requires_grad {
                        let na = self.shape(*a).1;
                        for i in 0..m {
                            for j in 0..n {
                                grads[*a][i * na + start + j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cp = self.shape(p).1;
                        if self.nodes[p].requires_grad {
                            for i in 0..m {
                                for j in 0..cp {
                                    grads[p][i * cp + j] += g[i * n + off + j];
                                }
                            }
                        }
                        off += cp;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let rp = self.shape(p).0;
                        if self.nodes[p].requires_grad {
                            for (dst, src) in grads[p]
                                .iter_mut()
                                .zip(&g[off * n..(off + rp) * n])
                            {
                                *dst += src;
                            }
                        }
                        off += rp;
                    }
                }
                Op::GatherRows { a, rows } => {
                    if self.nodes[*a].requires_grad {
                        for (i, &r) in rows.iter().enumerate() {
                            for j in 0..n {
                                grads[*a][r * n + j] += g[i * n + j];
                            }
                        }
                    }
                }
                Op::SoftmaxRows { a, causal } => {
                    if self.nodes[*a].requires_grad {
                        let y = &node.value;
                        for i in 0..m {
                            let lim = if *causal { (i + 1).min(n) } else { n };
                            let mut dot = 0.0;
                            for j in 0..lim {
                                dot += g[i * n + j] * y[i * n + j];
                            }
                            for j in 0..lim {
                                grads[*a][i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
                            }
                        }
                    }
                }
                Op::RmsNorm { a, gain } => {
                    let av = &self.nodes[*a].value;
                    let gv = &self.nodes[*gain].value;
                    for i in 0..m {
                        let row = &av[i * n..(i + 1) * n];
                        let ms = row.iter().map(|x| x * x).sum::<f64>() / n as f64;
                        let r = (ms + RMS_EPS).sqrt();
                        if self.nodes[*gain].requires_grad {
                            for j in 0..n {
                                grads[*gain][j] += g[i * n + j] * row[j] / r;
                            }
                        }
                        if self.nodes[*a].requires_grad {
                            let mut dot = 0.0;
                            for j in 0..n {
                                dot += g[i * n + j] * gv[j] * row[j];
                            }
                            let c = dot / (n as f64 * r * r * r);
                            for j in 0..n {
                                grads[*a][i * n + j] += g[i * n + j] * gv[j] / r - row[j] * c;
                            }
                        }
                    }
                }
                Op::Tanh(a) => {
                    if self.nodes[*a].requires_grad {
                        for (idx, (dst, src)) in grads[*a].iter_mut().zip(&g).enumerate() {
                            let y = node.value[idx];
                            *dst += src * (1.0 - y * y);
                        }
                    }
                }
                Op::Abs(a) => {
                    if self.nodes[*a].requires_grad {
                        let av = &self.nodes[*a].value;
                        for (idx, (dst, src)) in grads[*a].iter_mut().zip(&g).enumerate() {
                            *dst += src * av[idx].signum();
                        }
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[*a].requires_grad {
                        for dst in grads[*a].iter_mut() {
                            *dst += g[0];
                        }
                    }
                }
                Op::CrossEntropyMean { logits, targets } => {
                    if self.nodes[*logits].requires_grad {
                        let lv = &self.nodes[*logits].value;
                        let (ml, nl) = self.shape(*logits);
                        let w = g[0] / ml as f64;
                        for (i, &t) in targets.iter().enumerate() {
                            let row = &lv[i * nl..(i + 1) * nl];
                            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
                            for j in 0..nl {
                                let p = (row[j] - mx).exp() / sum;
                                let indicator = if j == t { 1.0 } else { 0.0 };
                                grads[*logits][i * nl + j] += w * (p - indicator);
                            }
                        }
                    }
                }
            }
            grads[id] = g;
        }
        grads
    }
}
