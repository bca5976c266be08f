//! Reverse-mode autodiff over 2-D arrays.
//!
//! Every forward op appends a node to a linear tape; [`Graph::backward`]
//! replays the tape in reverse and accumulates exact analytic gradients.
//! Vectors are `1 x n` rows.

use std::rc::Rc;

use super::tensor::{ParamId, ParamStore, Real, Tensor};
use crate::error::{DfmedError, Result};

/// Index of a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddColRow(Var, Var),
    Affine(Var, F),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Elu(Var, F),
    LeakyRelu(Var, F),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    MeanRows(Var),
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Rc<[usize]>),
    CrossEntropy { logits: Var, targets: Rc<[usize]>, probs: Vec<F> },
    BceLogits { logits: Var, labels: Vec<F>, probs: Vec<F> },
}

#[derive(Debug)]
struct Node<F> {
    value: Vec<F>,
    rows: usize,
    cols: usize,
    op: Op<F>,
}

/// A single-use computation tape.
pub struct Graph<'p, F: Real> {
    nodes: Vec<Node<F>>,
    params: &'p ParamStore<F>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by one backward pass, keyed by parameter.
pub struct Gradients<F> {
    pub params: Vec<(ParamId, Vec<F>)>,
    nodes: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss w.r.t. any tape node (None if it did not reach it).
    pub fn of(&self, v: Var) -> Option<&[F]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

// ── kernels ─────────────────────────────────────────────────────────

/// c += a[m,k] * b[k,n]
fn gemm_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// c += a[m,k]^T * b[m,n]  (c is k x n)
fn gemm_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[inline]
fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Graph { nodes: Vec::with_capacity(1024), params, param_vars: vec![None; params.len()] }
    }

    fn push(&mut self, value: Vec<F>, rows: usize, cols: usize, op: Op<F>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { value, rows, cols, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].rows
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].cols
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.value.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn constant(&mut self, data: Vec<F>, rows: usize, cols: usize) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(DfmedError::shape(
                "constant",
                format!("[{rows}, {cols}] needs {} values, got {}", rows * cols, data.len()),
            ));
        }
        Ok(self.push(data, rows, cols, Op::Leaf))
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.push(vec![F::zero(); rows * cols], rows, cols, Op::Leaf)
    }

    pub fn tensor(&mut self, t: &Tensor<F>) -> Var {
        let (r, c) = t.dims2();
        self.push(t.data.clone(), r, c, Op::Leaf)
    }

    /// Loads a parameter onto the tape (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let (r, c) = t.dims2();
        let v = self.push(t.data.clone(), r, c, Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(DfmedError::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, m, n, Op::MatMul(a, b)))
    }

    /// a * b^T
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(DfmedError::shape("matmul_t", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let bt = transpose(self.value(b), n, k);
        let mut out = vec![F::zero(); m * n];
        gemm_acc(self.value(a), &bt, &mut out, m, k, n);
        Ok(self.push(out, m, n, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = transpose(self.value(a), r, c);
        self.push(out, c, r, Op::Transpose(a))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(DfmedError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(out, r, c, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.push(out, r, c, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(out, r, c, Op::Mul(a, b)))
    }

    /// a[m,n] + row[1,n] broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(DfmedError::shape("add_row", format!("[{m}, {n}] + {:?}", self.shape(row))));
        }
        let rv = self.value(row);
        let mut out = self.value(a).to_vec();
        for chunk in out.chunks_mut(n.max(1)) {
            add_into(chunk, rv);
        }
        Ok(self.push(out, m, n, Op::AddRow(a, row)))
    }

    /// out[i,j] = col[i] + row[j]
    pub fn add_col_row(&mut self, col: Var, row: Var) -> Result<Var> {
        let (m, c1) = self.shape(col);
        let (r1, n) = self.shape(row);
        if c1 != 1 || r1 != 1 {
            return Err(DfmedError::shape("add_col_row", format!("[{m}, {c1}] + [{r1}, {n}]")));
        }
        let cv = self.value(col);
        let rv = self.value(row);
        let mut out = Vec::with_capacity(m * n);
        for &ci in cv {
            out.extend(rv.iter().map(|&rj| ci + rj));
        }
        Ok(self.push(out, m, n, Op::AddColRow(col, row)))
    }

    /// scale * a + shift
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (r, c) = self.shape(a);
        let (s, t) = (F::of(scale), F::of(shift));
        let out = self.value(a).iter().map(|&x| s * x + t).collect();
        self.push(out, r, c, Op::Affine(a, s))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.affine(a, s, 0.0)
    }

    // ── activations ─────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(out, r, c, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        self.push(out, r, c, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| if x < F::zero() { F::zero() } else { x }).collect();
        self.push(out, r, c, Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        let (r, c) = self.shape(a);
        let al = F::of(alpha);
        let out = self
            .value(a)
            .iter()
            .map(|&x| if x > F::zero() { x } else { al * (x.exp() - F::one()) })
            .collect();
        self.push(out, r, c, Op::Elu(a, al))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let (r, c) = self.shape(a);
        let s = F::of(slope);
        let out = self.value(a).iter().map(|&x| if x > F::zero() { x } else { s * x }).collect();
        self.push(out, r, c, Op::LeakyRelu(a, s))
    }

    /// Row-wise softmax. `mask[i*cols+j] == false` excludes an entry; fully
    /// masked rows come out as zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(DfmedError::shape("softmax", format!("mask {} vs [{r}, {c}]", m.len())));
            }
        }
        let x = self.value(a);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                continue;
            }
            let mut z = F::zero();
            let orow = &mut out[i * c..(i + 1) * c];
            for (j, &v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (v - mx).exp();
                    orow[j] = e;
                    z = z + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        Ok(self.push(out, r, c, Op::Softmax(a)))
    }

    /// Per-row layer normalisation with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(DfmedError::shape("layer_norm", format!("[{r}, {c}] with gain {:?}", self.shape(gain))));
        }
        let eps = F::of(1e-5);
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let cf = F::of(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut rstd = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(out, r, c, Op::LayerNorm { x, gain, bias, xhat, rstd }))
    }

    // ── reductions & reshaping ─────────────────────────────────────

    /// Mean over rows: [m,n] -> [1,n].
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if m == 0 {
            return Err(DfmedError::shape("mean_rows", "mean over zero rows"));
        }
        let mut out = vec![F::zero(); n];
        for row in self.value(a).chunks(n.max(1)) {
            add_into(&mut out, row);
        }
        let inv = F::one() / F::of(m as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        Ok(self.push(out, 1, n, Op::MeanRows(a)))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], 1, 1, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DfmedError::shape("concat_cols", "no inputs"));
        };
        let m = self.rows(first);
        if let Some(bad) = parts.iter().find(|&&p| self.rows(p) != m) {
            return Err(DfmedError::shape(
                "concat_cols",
                format!("row count {} vs {}", m, self.rows(*bad)),
            ));
        }
        let n: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let c = self.cols(p);
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(out, m, n, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DfmedError::shape("concat_rows", "no inputs"));
        };
        let n = self.cols(first);
        if let Some(bad) = parts.iter().find(|&&p| self.cols(p) != n) {
            return Err(DfmedError::shape(
                "concat_rows",
                format!("column count {} vs {}", n, self.cols(*bad)),
            ));
        }
        let m: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut out = Vec::with_capacity(m * n);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(out, m, n, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > n {
            return Err(DfmedError::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        Ok(self.push(out, m, len, Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start + len > m {
            return Err(DfmedError::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        Ok(self.push(out, len, n, Op::SliceRows(a, start)))
    }

    /// Row lookup with scatter-add backward (embedding tables, node selection).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(DfmedError::shape("gather_rows", format!("index {bad} out of {m} rows")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        Ok(self.push(out, idx.len(), n, Op::GatherRows(a, idx.into())))
    }

    // ── losses ──────────────────────────────────────────────────────

    /// Mean over rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if targets.len() != m || m == 0 {
            return Err(DfmedError::shape("cross_entropy", format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(DfmedError::shape("cross_entropy", format!("target {bad} >= {n} classes")));
        }
        let x = self.value(logits);
        let mut probs = vec![F::zero(); m * n];
        let mut loss = F::zero();
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let z: F = row.iter().map(|&v| (v - mx).exp()).sum();
            let lz = z.ln() + mx;
            for j in 0..n {
                probs[i * n + j] = (row[j] - lz).exp();
            }
            loss = loss + (lz - row[targets[i]]);
        }
        loss = loss / F::of(m as f64);
        Ok(self.push(vec![loss], 1, 1, Op::CrossEntropy { logits, targets: targets.into(), probs }))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against 0/1 labels.
    /// Logits are clamped to `[-30, 30]`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[F]) -> Result<Var> {
        let n = self.value(logits).len();
        if labels.len() != n || n == 0 {
            return Err(DfmedError::shape("bce", format!("{} labels for {n} logits", labels.len())));
        }
        let lim = F::of(30.0);
        let mut probs = Vec::with_capacity(n);
        let mut loss = F::zero();
        for (&x, &y) in self.value(logits).iter().zip(labels) {
            // NaN passes through so divergence stays visible
            let x = if x.f64().is_nan() { x } else { x.max(-lim).min(lim) };
            // log(1 + e^x) - y x, stable form
            let sp = x.max(F::zero()) + (-x.abs()).exp().ln_1p();
            loss = loss + sp - y * x;
            probs.push(sigmoid(x));
        }
        loss = loss / F::of(n as f64);
        Ok(self.push(vec![loss], 1, 1, Op::BceLogits { logits, labels: labels.to_vec(), probs }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.shape(loss) != (1, 1) {
            return Err(DfmedError::shape("backward", format!("loss shape {:?}", self.shape(loss))));
        }
        if !self.scalar(loss).is_finite() {
            return Err(DfmedError::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params = Vec::new();
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads[v.0] {
                    params.push((ParamId(pid), g.clone()));
                }
            }
        }
        Ok(Gradients { params, nodes: grads })
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let zero = F::zero();
        let one = F::one();
        fn acc<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
        }
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                // dA = dC B^T
                let bt = transpose(self.value(*b), k, n);
                let la = len_of(*a);
                gemm_acc(g, &bt, acc(grads, *a, la), m, n, k);
                // dB = A^T dC
                let lb = len_of(*b);
                gemm_tn_acc(self.value(*a), g, acc(grads, *b, lb), m, k, n);
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                // C = A B^T ; dA = dC B ; dB = dC^T A
                let la = len_of(*a);
                gemm_acc(g, self.value(*b), acc(grads, *a, la), m, n, k);
                let lb = len_of(*b);
                gemm_tn_acc(g, self.value(*a), acc(grads, *b, lb), m, n, k);
            }
            Op::Transpose(a) => {
                let t = transpose(g, node.rows, node.cols);
                let la = len_of(*a);
                add_into(acc(grads, *a, la), &t);
            }
            Op::Add(a, b) => {
                let l = g.len();
                add_into(acc(grads, *a, l), g);
                add_into(acc(grads, *b, l), g);
            }
            Op::Sub(a, b) => {
                let l = g.len();
                add_into(acc(grads, *a, l), g);
                for (d, &s) in acc(grads, *b, l).iter_mut().zip(g) {
                    *d = *d - s;
                }
            }
            Op::Mul(a, b) => {
                let l = g.len();
                let (av, bv) = (self.value(*a), self.value(*b));
                for ((d, &s), &y) in acc(grads, *a, l).iter_mut().zip(g).zip(bv) {
                    *d = *d + s * y;
                }
                for ((d, &s), &x) in acc(grads, *b, l).iter_mut().zip(g).zip(av) {
                    *d = *d + s * x;
                }
            }
            Op::AddRow(a, row) => {
                let l = g.len();
                add_into(acc(grads, *a, l), g);
                let n = node.cols;
                let dr = acc(grads, *row, n);
                for chunk in g.chunks(n.max(1)) {
                    add_into(dr, chunk);
                }
            }
            Op::AddColRow(col, row) => {
                let (m, n) = (node.rows, node.cols);
                {
                    let dc = acc(grads, *col, m);
                    for i in 0..m {
                        dc[i] = dc[i] + g[i * n..(i + 1) * n].iter().copied().sum::<F>();
                    }
                }
                let dr = acc(grads, *row, n);
                for chunk in g.chunks(n.max(1)) {
                    add_into(dr, chunk);
                }
            }
            Op::Affine(a, s) => {
                let l = g.len();
                for (d, &x) in acc(grads, *a, l).iter_mut().zip(g) {
                    *d = *d + *s * x;
                }
            }
            Op::Sigmoid(a) => {
                let l = g.len();
                for ((d, &s), &y) in acc(grads, *a, l).iter_mut().zip(g).zip(&node.value) {
                    *d = *d + s * y * (one - y);
                }
            }
            Op::Tanh(a) => {
                let l = g.len();
                for ((d, &s), &y) in acc(grads, *a, l).iter_mut().zip(g).zip(&node.value) {
                    *d = *d + s * (one - y * y);
                }
            }
            Op::Relu(a) => {
                let l = g.len();
                let av = self.value(*a);
                for ((d, &s), &x) in acc(grads, *a, l).iter_mut().zip(g).zip(av) {
                    if x > zero {
                        *d = *d + s;
                    }
                }
            }
            Op::Elu(a, alpha) => {
                let l = g.len();
                let av = self.value(*a);
                for (((d, &s), &x), &y) in acc(grads, *a, l).iter_mut().zip(g).zip(av).zip(&node.value) {
                    *d = *d + if x > zero { s } else { s * (y + *alpha) };
                }
            }
            Op::LeakyRelu(a, slope) => {
                let l = g.len();
                let av = self.value(*a);
                for ((d, &s), &x) in acc(grads, *a, l).iter_mut().zip(g).zip(av) {
                    *d = *d + if x > zero { s } else { s * *slope };
                }
            }
            Op::Softmax(a) => {
                let (r, c) = (node.rows, node.cols);
                let y = &node.value;
                let da = acc(grads, *a, r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..c {
                        da[i * c + j] = da[i * c + j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = (node.rows, node.cols);
                let gv = self.value(*gain).to_vec();
                {
                    let dg = acc(grads, *gain, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] = dg[j] + g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                {
                    let db = acc(grads, *bias, c);
                    for chunk in g.chunks(c.max(1)) {
                        add_into(db, chunk);
                    }
                }
                let cf = F::of(c as f64);
                let dx = acc(grads, *x, r * c);
                for i in 0..r {
                    let mut s1 = zero;
                    let mut s2 = zero;
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * xhat[i * c + j];
                    }
                    for j in 0..c {
                        let dh = g[i * c + j] * gv[j];
                        let v = rstd[i] / cf * (cf * dh - s1 - xhat[i * c + j] * s2);
                        dx[i * c + j] = dx[i * c + j] + v;
                    }
                }
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let inv = one / F::of(m as f64);
                let da = acc(grads, *a, m * n);
                for chunk in da.chunks_mut(n.max(1)) {
                    for (d, &s) in chunk.iter_mut().zip(g) {
                        *d = *d + s * inv;
                    }
                }
            }
            Op::SumAll(a) => {
                let l = len_of(*a);
                for d in acc(grads, *a, l).iter_mut() {
                    *d = *d + g[0];
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let n = node.cols;
                let mut off = 0;
                for &p in parts {
                    let c = self.cols(p);
                    let dp = acc(grads, p, m * c);
                    for i in 0..m {
                        add_into(&mut dp[i * c..(i + 1) * c], &g[i * n + off..i * n + off + c]);
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len_of(p);
                    add_into(acc(grads, p, l), &g[off..off + l]);
                    off += l;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let len = node.cols;
                let da = acc(grads, *a, m * n);
                for i in 0..m {
                    add_into(&mut da[i * n + start..i * n + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.shape(*a);
                let da = acc(grads, *a, m * n);
                add_into(&mut da[start * n..start * n + g.len()], g);
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.shape(*a);
                let da = acc(grads, *a, m * n);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut da[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (m, n) = self.shape(*logits);
                let scale = g[0] / F::of(m as f64);
                let dl = acc(grads, *logits, m * n);
                for i in 0..m {
                    for j in 0..n {
                        let y = if j == targets[i] { one } else { zero };
                        dl[i * n + j] = dl[i * n + j] + scale * (probs[i * n + j] - y);
                    }
                }
            }
            Op::BceLogits { logits, labels, probs } => {
                let n = labels.len();
                let scale = g[0] / F::of(n as f64);
                let lim = F::of(30.0);
                let xv = self.value(*logits);
                let dl = acc(grads, *logits, n);
                for j in 0..n {
                    // clamp blocks the gradient outside the linear range
                    if xv[j].abs() <= lim {
                        dl[j] = dl[j] + scale * (probs[j] - labels[j]);
                    }
                }
            }
        }
    }
}
