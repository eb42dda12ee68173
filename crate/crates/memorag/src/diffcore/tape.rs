//! Reverse-mode gradient accumulation over a recorded computation.
//!
//! Every primitive op appends a node holding its output value; `backward`
//! walks the node list in reverse and accumulates vector-Jacobian products.
//! A tape is confined to one thread; independent tapes may run in parallel.

use super::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive mask value for invisible attention positions.
pub const NEG_INF: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mul(Var, Var),
    /// A (m×k) · B (k×n)
    Matmul(Var, Var),
    /// A (m×k) · Bᵀ where B is (n×k)
    MatmulNt(Var, Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    LayerNormRows(Var),
    Gelu(Var),
    Relu(Var),
    MeanAll(Var),
    /// Mean over rows of −log softmax(logits)[target].
    CrossEntropyRows(Var, Vec<usize>),
    /// Row gather from a (V×d) matrix; grad is scatter-add.
    GatherRows(Var, Vec<usize>),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Vec<f64>,
    requires_grad: bool,
    /// Saved forward intermediates (softmax probs, layernorm stats, ...).
    saved: Vec<f64>,
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "expected scalar node");
        t.values[0]
    }

    fn push(&mut self, op: Op, value: Tensor, saved: Vec<f64>) -> Var {
        debug_assert!(value.values.iter().all(|x| x.is_finite()), "non-finite op output");
        let n = value.len();
        self.nodes.push(Node { op, value, grad: vec![0.0; n], requires_grad: true, saved });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradient is accumulated.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, Vec::new())
    }

    /// Frozen leaf: participates in the forward pass, accumulates no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t, Vec::new());
        self.nodes[v.0].requires_grad = false;
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let values = ta.values.iter().zip(&tb.values).map(|(x, y)| x + y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Add(a, b), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "sub shape mismatch");
        let values = ta.values.iter().zip(&tb.values).map(|(x, y)| x - y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Sub(a, b), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|x| x * c).collect();
        let shape = ta.shape.clone();
        self.push(Op::Scale(a, c), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let values = ta.values.iter().map(|x| x + c).collect();
        let shape = ta.shape.clone();
        self.push(Op::AddScalar(a), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape, tb.shape, "mul shape mismatch");
        let values = ta.values.iter().zip(&tb.values).map(|(x, y)| x * y).collect();
        let shape = ta.shape.clone();
        self.push(Op::Mul(a, b), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dim mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ta.values[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &tb.values[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(Op::Matmul(a, b), Tensor { shape: vec![m, n], values: out, grad: None }, Vec::new())
    }

    /// A · Bᵀ — used for attention scores (B holds keys row-wise).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dim mismatch");
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.values[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &tb.values[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += arow[p] * brow[p];
                }
                out[i * n + j] = s;
            }
        }
        self.push(Op::MatmulNt(a, b), Tensor { shape: vec![m, n], values: out, grad: None }, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.nodes[parts[0].0].value.cols();
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let t = &self.nodes[p.0].value;
            assert_eq!(t.cols(), cols, "concat_rows col mismatch");
            rows += t.rows();
            values.extend_from_slice(&t.values);
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor { shape: vec![rows, cols], values, grad: None },
            Vec::new(),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let cols = ta.cols();
        assert!(start <= end && end <= ta.rows(), "slice_rows out of range");
        let values = ta.values[start * cols..end * cols].to_vec();
        self.push(
            Op::SliceRows(a, start, end),
            Tensor { shape: vec![end - start, cols], values, grad: None },
            Vec::new(),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = (ta.rows(), ta.cols());
        assert!(start <= end && end <= cols, "slice_cols out of range");
        let w = end - start;
        let mut values = Vec::with_capacity(rows * w);
        for r in 0..rows {
            values.extend_from_slice(&ta.values[r * cols + start..r * cols + end]);
        }
        self.push(
            Op::SliceCols(a, start, end),
            Tensor { shape: vec![rows, w], values, grad: None },
            Vec::new(),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut values = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (idx, &p) in parts.iter().enumerate() {
                let t = &self.nodes[p.0].value;
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                let w = widths[idx];
                values.extend_from_slice(&t.values[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor { shape: vec![rows, total], values, grad: None },
            Vec::new(),
        )
    }

    /// Row-wise softmax, stabilized by max subtraction. Output saved for backward.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = (ta.rows(), ta.cols());
        assert!(cols > 0, "softmax over empty rows");
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &ta.values[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        let saved = out.clone();
        self.push(
            Op::SoftmaxRows(a),
            Tensor { shape: vec![rows, cols], values: out, grad: None },
            saved,
        )
    }

    /// Parameterless layer normalization per row.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; rows * cols];
        let mut saved = Vec::with_capacity(rows); // 1/sigma per row
        for r in 0..rows {
            let row = &ta.values[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv_sigma = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv_sigma;
            }
            saved.push(inv_sigma);
        }
        self.push(
            Op::LayerNormRows(a),
            Tensor { shape: vec![rows, cols], values: out, grad: None },
            saved,
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let values: Vec<f64> = ta.values.iter().map(|&x| gelu_fwd(x)).collect();
        let shape = ta.shape.clone();
        self.push(Op::Gelu(a), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let values: Vec<f64> = ta.values.iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape.clone();
        self.push(Op::Relu(a), Tensor { shape, values, grad: None }, Vec::new())
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let m = ta.values.iter().sum::<f64>() / ta.len() as f64;
        self.push(Op::MeanAll(a), Tensor::scalar(m), Vec::new())
    }

    /// Mean token NLL over rows of logits; one target id per row.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Var {
        let tl = &self.nodes[logits.0].value;
        let (rows, cols) = (tl.rows(), tl.cols());
        assert_eq!(rows, targets.len(), "one target per logit row");
        assert!(targets.iter().all(|&t| t < cols), "target out of range");
        let mut probs = vec![0.0; rows * cols];
        let mut nll = 0.0;
        for r in 0..rows {
            let row = &tl.values[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                probs[r * cols + j] /= sum;
            }
            nll -= probs[r * cols + targets[r]].ln();
        }
        let loss = nll / rows as f64;
        self.push(Op::CrossEntropyRows(logits, targets.to_vec()), Tensor::scalar(loss), probs)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = &self.nodes[table.0].value;
        let cols = tt.cols();
        assert!(ids.iter().all(|&i| i < tt.rows()), "gather id out of range");
        let mut values = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            values.extend_from_slice(&tt.values[i * cols..(i + 1) * cols]);
        }
        self.push(
            Op::GatherRows(table, ids.to_vec()),
            Tensor { shape: vec![ids.len(), cols], values, grad: None },
            Vec::new(),
        )
    }

    /// Reverse pass from a scalar root. Gradients accumulate into every node;
    /// frozen leaves keep zero grad.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        for n in &mut self.nodes {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.iter().all(|&g| g == 0.0) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    self.accumulate(a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    self.accumulate(b, &neg);
                }
                Op::Scale(a, c) => {
                    let g: Vec<f64> = self.nodes[i].grad.iter().map(|x| x * c).collect();
                    self.accumulate(a, &g);
                }
                Op::AddScalar(a) => {
                    let g = self.nodes[i].grad.clone();
                    self.accumulate(a, &g);
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[i].grad.clone();
                    let bv = self.nodes[b.0].value.values.clone();
                    let av = self.nodes[a.0].value.values.clone();
                    let ga: Vec<f64> = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::Matmul(a, b) => {
                    // dA = G · Bᵀ ; dB = Aᵀ · G
                    let g = self.nodes[i].grad.clone();
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.cols();
                    let av = self.nodes[a.0].value.values.clone();
                    let bv = self.nodes[b.0].value.values.clone();
                    let mut ga = vec![0.0; m * k];
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i2 * n + j] * bv[p * n + j];
                            }
                            ga[i2 * k + p] = s;
                        }
                    }
                    let mut gb = vec![0.0; k * n];
                    for p in 0..k {
                        for i2 in 0..m {
                            let a_ip = av[i2 * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += a_ip * g[i2 * n + j];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::MatmulNt(a, b) => {
                    // out = A · Bᵀ ; dA = G · B ; dB = Gᵀ · A
                    let g = self.nodes[i].grad.clone();
                    let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let n = self.nodes[b.0].value.rows();
                    let av = self.nodes[a.0].value.values.clone();
                    let bv = self.nodes[b.0].value.values.clone();
                    let mut ga = vec![0.0; m * k];
                    for i2 in 0..m {
                        for j in 0..n {
                            let gij = g[i2 * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i2 * k + p] += gij * bv[j * k + p];
                            }
                        }
                    }
                    let mut gb = vec![0.0; n * k];
                    for j in 0..n {
                        for i2 in 0..m {
                            let gij = g[i2 * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                gb[j * k + p] += gij * av[i2 * k + p];
                            }
                        }
                    }
                    self.accumulate(a, &ga);
                    self.accumulate(b, &gb);
                }
                Op::ConcatRows(parts) => {
                    let g = self.nodes[i].grad.clone();
                    let cols = self.nodes[i].value.cols();
                    let mut off = 0;
                    for p in parts {
                        let r = self.nodes[p.0].value.rows();
                        let slice = g[off * cols..(off + r) * cols].to_vec();
                        self.accumulate(p, &slice);
                        off += r;
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let g = self.nodes[i].grad.clone();
                    let cols = self.nodes[a.0].value.cols();
                    let mut ga = vec![0.0; self.nodes[a.0].value.len()];
                    ga[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    self.accumulate(a, &ga);
                }
                Op::SliceCols(a, start, end) => {
                    let g = self.nodes[i].grad.clone();
                    let (rows, cols) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let w = end - start;
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * cols + start + j] = g[r * w + j];
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::ConcatCols(parts) => {
                    let g = self.nodes[i].grad.clone();
                    let rows = self.nodes[i].value.rows();
                    let total = self.nodes[i].value.cols();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(p, &gp);
                        off += w;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let g = self.nodes[i].grad.clone();
                    let y = self.nodes[i].saved.clone();
                    let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a2, b2)| a2 * b2).sum();
                        for j in 0..cols {
                            ga[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::LayerNormRows(a) => {
                    let g = self.nodes[i].grad.clone();
                    let y = self.nodes[i].value.values.clone();
                    let inv_sigma = self.nodes[i].saved.clone();
                    let (rows, cols) = (self.nodes[i].value.rows(), self.nodes[i].value.cols());
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean_g: f64 = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy: f64 =
                            gr.iter().zip(yr).map(|(a2, b2)| a2 * b2).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            ga[r * cols + j] = inv_sigma[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    self.accumulate(a, &ga);
                }
                Op::Gelu(a) => {
                    let g = self.nodes[i].grad.clone();
                    let x = self.nodes[a.0].value.values.clone();
                    let ga: Vec<f64> =
                        g.iter().zip(&x).map(|(gi, &xi)| gi * gelu_bwd(xi)).collect();
                    self.accumulate(a, &ga);
                }
                Op::Relu(a) => {
                    let g = self.nodes[i].grad.clone();
                    let x = self.nodes[a.0].value.values.clone();
                    let ga: Vec<f64> =
                        g.iter().zip(&x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect();
                    self.accumulate(a, &ga);
                }
                Op::MeanAll(a) => {
                    let g = self.nodes[i].grad[0];
                    let n = self.nodes[a.0].value.len();
                    let ga = vec![g / n as f64; n];
                    self.accumulate(a, &ga);
                }
                Op::CrossEntropyRows(logits, targets) => {
                    let g = self.nodes[i].grad[0];
                    let probs = self.nodes[i].saved.clone();
                    let (rows, cols) =
                        (self.nodes[logits.0].value.rows(), self.nodes[logits.0].value.cols());
                    let mut gl = vec![0.0; rows * cols];
                    let scale = g / rows as f64;
                    for r in 0..rows {
                        for j in 0..cols {
                            let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                            gl[r * cols + j] = scale * (probs[r * cols + j] - onehot);
                        }
                    }
                    self.accumulate(logits, &gl);
                }
                Op::GatherRows(table, ids) => {
                    let g = self.nodes[i].grad.clone();
                    let cols = self.nodes[table.0].value.cols();
                    let mut gt = vec![0.0; self.nodes[table.0].value.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..cols {
                            gt[id * cols + j] += g[r * cols + j];
                        }
                    }
                    self.accumulate(table, &gt);
                }
            }
        }
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if matches!(node.op, Op::Leaf) && !node.requires_grad {
            return;
        }
        debug_assert_eq!(node.grad.len(), g.len());
        for (dst, src) in node.grad.iter_mut().zip(g) {
            *dst += src;
        }
    }
}

fn gelu_fwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
