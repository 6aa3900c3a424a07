use super::gemm::gemm;
use super::tensor::{ParamId, ParamStore};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { a: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Mse { a: Var, target: Vec<f64> },
    BceLogits { logits: Var, targets: Vec<f64> },
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SliceRows { a: Var, start: usize },
    MaxRows { a: Var, argmax: Vec<usize> },
    MeanRows(Var),
    Sum(Var),
    Reshape(Var),
    BlockAttention { q: Var, k: Var, v: Var, blocks: usize, heads: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Per-parameter gradient buffers produced by one or more backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(n_params: usize) -> Self {
        Self { grads: vec![None; n_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Elementwise sum; order of accumulation is the caller's responsibility.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(d, s)| *d += s),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= f);
        }
    }

    /// Writes into `store`: trainable parameters get their gradient (zeros if
    /// untouched); frozen ones keep none.
    pub fn write_to(&self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let n = t.len();
            let g = t.grad_mut().expect("trainable tensor has grad buffer");
            match self.grads.get(id.0).and_then(|g| g.as_ref()) {
                Some(src) => g.copy_from_slice(src),
                None => g.iter_mut().take(n).for_each(|v| *v = 0.0),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Records a forward pass. Single use: [`Tape::backward`] may run once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    loaded: Vec<(ParamId, Var)>,
    consumed: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "constant shape");
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// Leaf input whose gradient can be read back with [`Tape::grad`].
    pub fn input(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        assert_eq!(rows * cols, value.len(), "input shape");
        self.push(rows, cols, value, Op::Leaf, true)
    }

    /// Loads a parameter (once per tape) from the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.loaded.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let t = store.get(id);
        let (rows, cols) = t.matrix_dims().expect("parameter rank");
        let v = self.push(rows, cols, t.values().to_vec(), Op::Leaf, t.requires_grad());
        self.nodes[v.0].param = Some(id);
        self.loaded.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NumError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        NumError::Shape { op, lhs: vec![ar, ac], rhs: vec![br, bc] }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Matmul { a, b, trans_b: false }, ng))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.shape_err("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(m, n, out, Op::Matmul { a, b, trans_b: true }, ng))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.dims(a) != self.dims(b) {
            return Err(self.shape_err(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Sub(a, b), ng))
    }

    /// Matrix plus a broadcast row vector (the only broadcast supported).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if self.dims(row) != (1, c) {
            return Err(self.shape_err("add_row", a, row));
        }
        let bias = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let ng = self.ng(a) || self.ng(row);
        Ok(self.push(r, c, out, Op::AddRow { a, row }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(r, c, out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Scale(a, s), ng)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Gelu(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let (r, c) = self.dims(a);
        let ng = self.ng(a);
        self.push(r, c, out, Op::Sigmoid(a), ng)
    }

    /// Scaled dot-product attention run independently on `blocks` groups:
    /// rows `[b·lq, (b+1)·lq)` of `q` attend over rows `[b·lk, (b+1)·lk)` of
    /// `k` and `v`, with columns split into `heads`. Returns the concatenated
    /// head outputs (no output projection) and the weights laid out as
    /// block, head, query row, key.
    pub fn block_attention(&mut self, q: Var, k: Var, v: Var, blocks: usize, heads: usize) -> Result<(Var, Vec<f64>), NumError> {
        let (rq, d) = self.dims(q);
        let (rk, dk) = self.dims(k);
        if heads == 0 || d % heads != 0 {
            return Err(NumError::Heads { dim: d, heads });
        }
        if blocks == 0 || rq % blocks != 0 || rk % blocks != 0 || dk != d || self.dims(v) != (rk, d) {
            return Err(self.shape_err("block_attention", q, k));
        }
        let (lq, lk, dh) = (rq / blocks, rk / blocks, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; rq * d];
        let mut probs = vec![0.0; blocks * heads * lq * lk];
        let mut srow = vec![0.0; lk];
        for b in 0..blocks {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..lq {
                    let qi = &qv[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                    for (j, s) in srow.iter_mut().enumerate() {
                        let kj = &kv[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                        *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    if srow.iter().any(|x| x.is_nan()) {
                        return Err(NumError::NonFinite("block_attention"));
                    }
                    let p = softmax_row(&srow);
                    let base = ((b * heads + h) * lq + i) * lk;
                    probs[base..base + lk].copy_from_slice(&p);
                    let o = &mut out[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(b * lk + j) * d + c0..(b * lk + j) * d + c0 + dh];
                        o.iter_mut().zip(vj).for_each(|(o, x)| *o += pj * x);
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let weights = probs.clone();
        Ok((self.push(rq, d, out, Op::BlockAttention { q, k, v, blocks, heads, probs }, ng), weights))
    }

    // ---- normalization --------------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if self.value(a).iter().any(|x| x.is_nan()) {
            return Err(NumError::NonFinite("softmax"));
        }
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            out.extend(softmax_row(row));
        }
        let ng = self.ng(a);
        Ok(self.push(r, c, out, Op::Softmax(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) {
            return Err(self.shape_err("layer_norm gain", x, gain));
        }
        if self.dims(bias) != (1, c) {
            return Err(self.shape_err("layer_norm bias", x, bias));
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    // ---- losses ---------------------------------------------------------

    /// Mean over rows of `-log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumError> {
        let (r, c) = self.dims(logits);
        if targets.len() != r {
            return Err(NumError::Shape { op: "cross_entropy", lhs: vec![r, c], rhs: vec![targets.len()] });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NumError::Index { index: t, len: c });
        }
        if self.value(logits).iter().any(|x| !x.is_finite()) {
            return Err(NumError::NonFinite("cross_entropy"));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).chunks(c).zip(targets) {
            // Sum over all but the arg-max so confident rows keep precision.
            let am = (0..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            let m = row[am];
            let rest: f64 = row.iter().enumerate().filter(|&(j, _)| j != am).map(|(_, v)| (v - m).exp()).sum();
            let lse = m + rest.ln_1p();
            loss += rest.ln_1p() - (row[t] - m);
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let ng = self.ng(logits);
        Ok(self.push(
            1,
            1,
            vec![loss / r as f64],
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, a: Var, target: &[f64]) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if target.len() != r * c {
            return Err(NumError::Shape { op: "mse", lhs: vec![r, c], rhs: vec![target.len()] });
        }
        let n = (r * c) as f64;
        let loss = self.value(a).iter().zip(target).map(|(x, t)| (x - t) * (x - t)).sum::<f64>() / n;
        let ng = self.ng(a);
        Ok(self.push(1, 1, vec![loss], Op::Mse { a, target: target.to_vec() }, ng))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft targets in [0,1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, NumError> {
        let (r, c) = self.dims(logits);
        if targets.len() != r * c {
            return Err(NumError::Shape { op: "bce_with_logits", lhs: vec![r, c], rhs: vec![targets.len()] });
        }
        let n = (r * c) as f64;
        let loss = self
            .value(logits)
            .iter()
            .zip(targets)
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let ng = self.ng(logits);
        Ok(self.push(1, 1, vec![loss], Op::BceLogits { logits, targets: targets.to_vec() }, ng))
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates along columns; all parts must share a row count.
    pub fn hcat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let rows = self.dims(parts[0]).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.shape_err("hcat", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::HCat(parts.to_vec()), ng))
    }

    /// Concatenates along rows; all parts must share a column count.
    pub fn vcat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let cols = self.dims(parts[0]).1;
        for &p in parts {
            if self.dims(p).1 != cols {
                return Err(self.shape_err("vcat", parts[0], p));
            }
        }
        let rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(rows, cols, out, Op::VCat(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(NumError::Shape { op: "slice_cols", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let v = self.value(a);
        let out = (0..r).flat_map(|i| v[i * c + start..i * c + start + len].iter().copied()).collect();
        let ng = self.ng(a);
        Ok(self.push(r, len, out, Op::SliceCols { a, start }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(NumError::Shape { op: "slice_rows", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let out = self.value(a)[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(len, c, out, Op::SliceRows { a, start }, ng))
    }

    /// Column-wise max over rows (1×c). Ties go to the earliest row.
    pub fn max_rows(&mut self, a: Var) -> Var {
        let r = self.dims(a).0;
        self.max_pool_rows(a, r).expect("whole-matrix pool always divides")
    }

    /// Column-wise max over consecutive groups of `block` rows, giving
    /// (r/block)×c. Ties go to the earliest row of the group.
    pub fn max_pool_rows(&mut self, a: Var, block: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if block == 0 || r % block != 0 {
            return Err(NumError::Shape { op: "max_pool_rows", lhs: vec![r, c], rhs: vec![block] });
        }
        let v = self.value(a);
        let groups = r / block;
        let mut out = Vec::with_capacity(groups * c);
        let mut argmax = Vec::with_capacity(groups * c);
        for g in 0..groups {
            let base = g * block * c;
            for j in 0..c {
                let mut best = base + j;
                for i in 1..block {
                    let idx = base + i * c + j;
                    if v[idx] > v[best] {
                        best = idx;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(groups, c, out, Op::MaxRows { a, argmax }, ng))
    }

    /// Column-wise max over each inclusive row range `(first, last)`, one
    /// output row per range. Ties go to the earliest row.
    pub fn max_rows_ranges(&mut self, a: Var, ranges: &[(usize, usize)]) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if let Some(&(i, j)) = ranges.iter().find(|&&(i, j)| i > j || j >= r) {
            return Err(NumError::Shape { op: "max_rows_ranges", lhs: vec![r, c], rhs: vec![i, j] });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(ranges.len() * c);
        let mut argmax = Vec::with_capacity(ranges.len() * c);
        for &(i, j) in ranges {
            for col in 0..c {
                let mut best = i * c + col;
                for row in i + 1..=j {
                    if v[row * c + col] > v[best] {
                        best = row * c + col;
                    }
                }
                out.push(v[best]);
                argmax.push(best);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(ranges.len(), c, out, Op::MaxRows { a, argmax }, ng))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let v = self.value(a);
        let mut out = vec![0.0; c];
        for row in v.chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let ng = self.ng(a);
        self.push(1, c, out, Op::MeanRows(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(1, 1, vec![s], Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(NumError::Shape { op: "reshape", lhs: vec![r, c], rhs: vec![rows, cols] });
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(rows, cols, out, Op::Reshape(a), ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable node that needs one. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::TapeConsumed);
        }
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(NumError::NonScalarLoss(vec![r, c]));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else { continue };
            self.backprop_node(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    /// Moves a node's value out for borrowing next to `other`'s gradient;
    /// clones instead when both are the same node. Callers put it back.
    fn take_value(&mut self, v: Var, other: Var) -> Vec<f64> {
        if v == other {
            self.nodes[v.0].value.clone()
        } else {
            std::mem::take(&mut self.nodes[v.0].value)
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&mut self, i: usize, gy: &[f64]) {
        // The op is moved out so input values can be borrowed alongside grads.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b, trans_b } => {
                let (m, k) = self.dims(*a);
                let n = if *trans_b { self.dims(*b).0 } else { self.dims(*b).1 };
                if self.ng(*a) {
                    let bv = self.take_value(*b, *a);
                    let ga = self.acc(*a).unwrap();
                    // dA = dC·Bᵀ  (or dC·B when B was used transposed)
                    gemm(m, n, k, gy, false, &bv, !*trans_b, ga, true);
                    self.nodes[b.0].value = bv;
                }
                if self.ng(*b) {
                    let av = self.take_value(*a, *b);
                    let gb = self.acc(*b).unwrap();
                    if *trans_b {
                        // dB = dCᵀ·A  (n×k)
                        gemm(n, m, k, gy, true, &av, false, gb, true);
                    } else {
                        // dB = Aᵀ·dC  (k×n)
                        gemm(k, m, n, &av, true, gy, false, gb, true);
                    }
                    self.nodes[a.0].value = av;
                }
            }
            Op::Add(a, b) => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(*b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(*b) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g -= d);
                }
            }
            Op::AddRow { a, row } => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = self.acc(*row) {
                    for chunk in gy.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.take_value(*b, *a);
                    let g = self.acc(*a).unwrap();
                    g.iter_mut().zip(gy.iter().zip(&bv)).for_each(|(g, (d, y))| *g += d * y);
                    self.nodes[b.0].value = bv;
                }
                if self.ng(*b) {
                    let av = self.take_value(*a, *b);
                    let g = self.acc(*b).unwrap();
                    g.iter_mut().zip(gy.iter().zip(&av)).for_each(|(g, (d, x))| *g += d * x);
                    self.nodes[a.0].value = av;
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d * s);
                }
            }
            Op::Gelu(a) => {
                let xv = std::mem::take(&mut self.nodes[a.0].value);
                if let Some(g) = self.acc(*a) {
                    for ((g, d), &x) in g.iter_mut().zip(gy).zip(&xv) {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *g += d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                    }
                }
                self.nodes[a.0].value = xv;
            }
            Op::Relu(a) => {
                let xv = std::mem::take(&mut self.nodes[a.0].value);
                if let Some(g) = self.acc(*a) {
                    for ((g, d), &x) in g.iter_mut().zip(gy).zip(&xv) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                }
                self.nodes[a.0].value = xv;
            }
            Op::Sigmoid(a) => {
                let yv = self.nodes[i].value.clone();
                if let Some(g) = self.acc(*a) {
                    for ((g, d), y) in g.iter_mut().zip(gy).zip(&yv) {
                        *g += d * y * (1.0 - y);
                    }
                }
            }
            Op::BlockAttention { q, k, v, blocks, heads, probs } => {
                let (blocks, heads) = (*blocks, *heads);
                let (rq, d) = self.dims(*q);
                let rk = self.dims(*k).0;
                let (lq, lk, dh) = (rq / blocks, rk / blocks, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let qv = self.value(*q).to_vec();
                let kv = self.value(*k).to_vec();
                let vv = self.value(*v).to_vec();
                let mut gq = vec![0.0; rq * d];
                let mut gk = vec![0.0; rk * d];
                let mut gv = vec![0.0; rk * d];
                let mut dp = vec![0.0; lk];
                for b in 0..blocks {
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..lq {
                            let qr = (b * lq + i) * d + c0;
                            let go = &gy[qr..qr + dh];
                            let base = ((b * heads + h) * lq + i) * lk;
                            let p = &probs[base..base + lk];
                            for j in 0..lk {
                                let kr = (b * lk + j) * d + c0;
                                dp[j] = go.iter().zip(&vv[kr..kr + dh]).map(|(a, b)| a * b).sum();
                                gv[kr..kr + dh].iter_mut().zip(go).for_each(|(g, o)| *g += p[j] * o);
                            }
                            let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                            for j in 0..lk {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                let kr = (b * lk + j) * d + c0;
                                for c in 0..dh {
                                    gq[qr + c] += ds * kv[kr + c];
                                    gk[kr + c] += ds * qv[qr + c];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(acc) = self.acc(var) {
                        acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g);
                    }
                }
            }
            Op::Softmax(a) => {
                let yv = self.nodes[i].value.clone();
                if let Some(g) = self.acc(*a) {
                    for ((g, d), y) in g.chunks_mut(cols).zip(gy.chunks(cols)).zip(yv.chunks(cols)) {
                        let dot: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            g[j] += y[j] * (d[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gv = self.value(*gain).to_vec();
                if let Some(g) = self.acc(*gain) {
                    for (d, h) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            g[j] += d[j] * h[j];
                        }
                    }
                }
                if let Some(g) = self.acc(*bias) {
                    for d in gy.chunks(cols) {
                        g.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                    }
                }
                if let Some(g) = self.acc(*x) {
                    let n = cols as f64;
                    for r in 0..rows {
                        let d = &gy[r * cols..(r + 1) * cols];
                        let h = &xhat[r * cols..(r + 1) * cols];
                        let dh: Vec<f64> = d.iter().zip(&gv).map(|(d, g)| d * g).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            g[r * cols + j] += rstd[r] / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = self.dims(*logits).1;
                let scale = gy[0] / targets.len() as f64;
                if let Some(g) = self.acc(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { a, target } => {
                let av = std::mem::take(&mut self.nodes[a.0].value);
                let n = target.len() as f64;
                if let Some(g) = self.acc(*a) {
                    for ((g, x), t) in g.iter_mut().zip(&av).zip(target) {
                        *g += gy[0] * 2.0 * (x - t) / n;
                    }
                }
                self.nodes[a.0].value = av;
            }
            Op::BceLogits { logits, targets } => {
                let xv = std::mem::take(&mut self.nodes[logits.0].value);
                let n = targets.len() as f64;
                if let Some(g) = self.acc(*logits) {
                    for ((g, &x), t) in g.iter_mut().zip(&xv).zip(targets) {
                        *g += gy[0] * (sigmoid(x) - t) / n;
                    }
                }
                self.nodes[logits.0].value = xv;
            }
            Op::HCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(g) = self.acc(p) {
                        for r in 0..rows {
                            for j in 0..pc {
                                g[r * pc + j] += gy[r * cols + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::VCat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.node(p).value.len();
                    if let Some(g) = self.acc(p) {
                        g.iter_mut().zip(&gy[offset..offset + n]).for_each(|(g, d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::SliceCols { a, start } => {
                let ac = self.dims(*a).1;
                if let Some(g) = self.acc(*a) {
                    for r in 0..rows {
                        for j in 0..cols {
                            g[r * ac + start + j] += gy[r * cols + j];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if let Some(g) = self.acc(*a) {
                    let s = start * cols;
                    g[s..s + gy.len()].iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
            Op::MaxRows { a, argmax } => {
                if let Some(g) = self.acc(*a) {
                    for (&idx, d) in argmax.iter().zip(gy) {
                        g[idx] += d;
                    }
                }
            }
            Op::MeanRows(a) => {
                let ar = self.dims(*a).0;
                if let Some(g) = self.acc(*a) {
                    for chunk in g.chunks_mut(cols) {
                        chunk.iter_mut().zip(gy).for_each(|(g, d)| *g += d / ar as f64);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().for_each(|g| *g += gy[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(g) = self.acc(*a) {
                    g.iter_mut().zip(gy).for_each(|(g, d)| *g += d);
                }
            }
        }
        self.nodes[i].op = op;
    }

    /// Collects gradients of loaded parameters after [`Tape::backward`].
    pub fn param_grads(&self, n_params: usize) -> Gradients {
        let mut out = Gradients::empty(n_params);
        for &(id, v) in &self.loaded {
            if let Some(g) = self.grad(v) {
                out.grads[id.0] = Some(g.to_vec());
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    use crate::numgrad::gradcheck::input_grad_error as check_grads;

    #[test]
    fn matmul_identity_and_hand_cases() {
        let mut t = Tape::new();
        let i2 = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let m = t.constant(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let p = t.matmul(i2, m).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let a = t.constant(1, 2, vec![1.0, 2.0]);
        let b = t.constant(2, 1, vec![3.0, 4.0]);
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_vec(&mut rng, 12);
        let b = rand_vec(&mut rng, 8);
        let mut t = Tape::new();
        let va = t.constant(3, 4, a.clone());
        let vb = t.constant(4, 2, b.clone());
        let c = t.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a[i * 4 + k] * b[k * 2 + j];
                }
                assert!((t.value(c)[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(2, 3, vec![0.0; 6]);
        let b = t.constant(2, 3, vec![0.0; 6]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert_eq!(err, NumError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![0.0, 0.0, 0.0]);
        let y = t.softmax(x).unwrap();
        for v in t.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(1, 3, vec![1.0, 2.0, 3.0]);
        let y = t.softmax(x).unwrap();
        let s: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (k, v) in t.value(y).iter().enumerate() {
            assert!((v - ((k + 1) as f64).exp() / s).abs() < 1e-12);
        }
        let shifted = t.constant(1, 3, vec![101.0, 102.0, 103.0]);
        let ys = t.softmax(shifted).unwrap();
        for (a, b) in t.value(y).to_vec().iter().zip(t.value(ys)) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = t.constant(1, 2, vec![f64::NAN, 0.0]);
        assert!(t.softmax(bad).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let g = t.constant(1, 3, vec![1.0; 3]);
        let b = t.constant(1, 3, vec![0.0; 3]);
        let x = t.constant(1, 3, vec![5.0; 3]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(t.value(y).iter().all(|v| v.abs() < 1e-12));

        let g = t.constant(1, 2, vec![1.0; 2]);
        let b = t.constant(1, 2, vec![0.0; 2]);
        let x = t.constant(1, 2, vec![1.0, 3.0]);
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        // mean 2, var 1 -> (x-2)/sqrt(1+1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((t.value(y)[0] + expect).abs() < 1e-12);
        assert!((t.value(y)[1] - 1.0).abs() < 1e-4);

        let g0 = t.constant(1, 2, vec![0.0; 2]);
        let bb = t.constant(1, 2, vec![0.7, -0.2]);
        let y = t.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.7, -0.2]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut t = Tape::new();
        let x = t.input(1, 5, vec![0.3; 5]);
        let l = t.cross_entropy(x, &[2]).unwrap();
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
        t.backward(l).unwrap();
        let g = t.grad(x).unwrap();
        let want = [0.2, 0.2, -0.8, 0.2, 0.2];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut t = Tape::new();
        let x = t.constant(1, 2, vec![10.0, -10.0]);
        let l = t.cross_entropy(x, &[0]).unwrap();
        // -log(e^10/(e^10+e^-10)) = ln(1+e^-20)
        let want = (-20f64).exp().ln_1p();
        assert!((t.scalar(l) - want).abs() < 1e-18);
        assert!((t.scalar(l) - 2.06e-9).abs() < 1e-11);

        assert_eq!(t.cross_entropy(x, &[2]).unwrap_err(), NumError::Index { index: 2, len: 2 });
    }

    #[test]
    fn backward_contracts() {
        let mut t = Tape::new();
        let w = t.input(2, 3, vec![0.5; 6]);
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0; 6]);
        assert_eq!(t.backward(s).unwrap_err(), NumError::TapeConsumed);

        let mut t = Tape::new();
        let w = t.input(2, 1, vec![0.5; 2]);
        assert!(matches!(t.backward(w), Err(NumError::NonScalarLoss(_))));
    }

    #[test]
    fn finite_differences_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = (3, 4, rand_vec(&mut rng, 12));
        let b = (4, 2, rand_vec(&mut rng, 8));
        let c = (2, 4, rand_vec(&mut rng, 8));
        let row = (1, 4, rand_vec(&mut rng, 4));
        let tol = 1e-4;

        let e = check_grads(&[a.clone(), b.clone()], |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let s = t.mul(m, m).unwrap();
            t.sum(s)
        });
        assert!(e < tol, "matmul {e}");

        let e = check_grads(&[a.clone(), c.clone()], |t, v| {
            let m = t.matmul_t(v[0], v[1]).unwrap();
            let s = t.gelu(m);
            let s = t.mul(s, m).unwrap();
            t.sum(s)
        });
        assert!(e < tol, "matmul_t/gelu {e}");

        let e = check_grads(&[a.clone(), row.clone()], |t, v| {
            let m = t.add_row(v[0], v[1]).unwrap();
            let s = t.softmax(m).unwrap();
            let w = t.constant(3, 4, (0..12).map(|i| i as f64 * 0.1).collect());
            let s = t.mul(s, w).unwrap();
            t.sum(s)
        });
        assert!(e < tol, "add_row/softmax {e}");

        let g = (1, 4, rand_vec(&mut rng, 4));
        let e = check_grads(&[a.clone(), g, row.clone()], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            let w = t.constant(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect());
            let s = t.mul(y, w).unwrap();
            t.sum(s)
        });
        assert!(e < tol, "layer_norm {e}");

        let e = check_grads(std::slice::from_ref(&a), |t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap());
        assert!(e < tol, "cross_entropy {e}");

        let target: Vec<f64> = (0..12).map(|i| i as f64 / 12.0).collect();
        let e = check_grads(std::slice::from_ref(&a), |t, v| {
            let s = t.sigmoid(v[0]);
            t.mse(s, &target).unwrap()
        });
        assert!(e < tol, "sigmoid/mse {e}");

        let e = check_grads(std::slice::from_ref(&a), |t, v| t.bce_with_logits(v[0], &target).unwrap());
        assert!(e < tol, "bce {e}");

        let e = check_grads(&[a.clone(), c.clone()], |t, v| {
            let tr = t.reshape(v[1], 4, 2).unwrap();
            let h = t.hcat(&[v[0], v[0]]).unwrap();
            let s = t.slice_cols(h, 2, 4).unwrap();
            let vc = t.vcat(&[s, v[1]]).unwrap();
            let r = t.slice_rows(vc, 1, 3).unwrap();
            let mx = t.max_rows(r);
            let top = t.slice_rows(vc, 0, 4).unwrap();
            let mp = t.max_pool_rows(top, 2).unwrap();
            let mp = t.sum(mp);
            let mr = t.max_rows_ranges(vc, &[(0, 0), (1, 3), (2, 4), (0, 4)]).unwrap();
            let mr = t.mul(mr, mr).unwrap();
            let mr = t.sum(mr);
            let mp = t.add(mp, mr).unwrap();
            let mn = t.mean_rows(vc);
            let sc = t.scale(mn, 1.7);
            let d = t.sub(mx, sc).unwrap();
            let d = t.mul(d, d).unwrap();
            let rl = t.relu(tr);
            let s1 = t.sum(rl);
            let s2 = t.sum(d);
            let s1 = t.add(s1, mp).unwrap();
            t.add(s1, s2).unwrap()
        });
        assert!(e < tol, "structural ops {e}");

        // two blocks, two query rows against three keys each, two heads
        let q = (4, 4, rand_vec(&mut rng, 16));
        let k = (6, 4, rand_vec(&mut rng, 24));
        let v = (6, 4, rand_vec(&mut rng, 24));
        let w: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).cos()).collect();
        let e = check_grads(&[q, k, v], |t, vs| {
            let (o, _) = t.block_attention(vs[0], vs[1], vs[2], 2, 2).unwrap();
            let w = t.constant(4, 4, w.clone());
            let s = t.mul(o, w).unwrap();
            t.sum(s)
        });
        assert!(e < tol, "block_attention {e}");
    }

    #[test]
    fn block_attention_matches_per_block_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, v) = (rand_vec(&mut rng, 4 * 8), rand_vec(&mut rng, 6 * 8), rand_vec(&mut rng, 6 * 8));
        let mut t = Tape::new();
        let (vq, vk, vv) = (t.constant(4, 8, q.clone()), t.constant(6, 8, k.clone()), t.constant(6, 8, v.clone()));
        let (o, w) = t.block_attention(vq, vk, vv, 2, 2).unwrap();
        let fused = t.value(o).to_vec();
        let eye: Vec<f64> = (0..64).map(|i| if i % 9 == 0 { 1.0 } else { 0.0 }).collect();
        for b in 0..2 {
            let mut t2 = Tape::new();
            let bq = t2.constant(2, 8, q[b * 16..(b + 1) * 16].to_vec());
            let bk = t2.constant(3, 8, k[b * 24..(b + 1) * 24].to_vec());
            let bv = t2.constant(3, 8, v[b * 24..(b + 1) * 24].to_vec());
            let id = t2.constant(8, 8, eye.clone());
            let r = crate::numgrad::multi_head_attention(&mut t2, bq, bk, bv, 2, id, None).unwrap();
            for (x, y) in t2.value(r.out).iter().zip(&fused[b * 16..(b + 1) * 16]) {
                assert!((x - y).abs() < 1e-12);
            }
            for h in 0..2 {
                let base = (b * 2 + h) * 6;
                for (x, y) in r.weights[h].iter().zip(&w[base..base + 6]) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn max_pool_groups_rows() {
        let mut t = Tape::new();
        let a = t.constant(4, 2, vec![1.0, 5.0, 3.0, 2.0, -1.0, 0.0, -2.0, 0.0]);
        let p = t.max_pool_rows(a, 2).unwrap();
        assert_eq!(t.dims(p), (2, 2));
        assert_eq!(t.value(p), &[3.0, 5.0, -1.0, 0.0]);
        assert!(t.max_pool_rows(a, 3).is_err());
        assert!(t.max_pool_rows(a, 0).is_err());
        let m = t.max_rows_ranges(a, &[(0, 1), (1, 3), (2, 2)]).unwrap();
        assert_eq!(t.value(m), &[3.0, 5.0, 3.0, 2.0, -1.0, 0.0]);
        assert!(t.max_rows_ranges(a, &[(2, 1)]).is_err());
        assert!(t.max_rows_ranges(a, &[(0, 4)]).is_err());
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let c = t.constant(1, 2, vec![1.0, 2.0]);
        let w = t.input(1, 2, vec![3.0, 4.0]);
        let p = t.mul(c, w).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(w).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.constant(2, 3, vec![0.1, -0.4, 2.0, 0.3, 0.3, -1.0]);
            let y = t.softmax(x).unwrap();
            let z = t.gelu(y);
            t.value(z).to_vec()
        };
        assert_eq!(run(), run());
    }
}
