use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Gelu(usize),
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Embedding { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, count: usize },
    SliceRows { x: usize, start: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    ScatterAddRows { base: usize, delta: usize, rows: Vec<usize> },
    ConcatRows(Vec<usize>),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every operation's inputs precede
/// it. [`Tape::backward`] walks the record once, in reverse, and may only be
/// called once per tape.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

type Result<T> = std::result::Result<T, TensorError>;

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf that participates in differentiation when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_grad(None).expect("clearing grad cannot fail");
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a constant (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.index].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Gradient accumulated for `v` by [`Tape::backward`]; `None` when unreachable.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.index).and_then(|g| g.as_deref())
    }

    pub fn backward_done(&self) -> bool {
        self.backward_done
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self.id, index }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    fn mat(&self, i: usize, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[i].value.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::NotMatrix {
                op,
                shape: s.to_vec(),
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.mat(ai, "matmul")?;
        let (k2, n) = self.mat(bi, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", ai, bi));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(ai, bi), rg))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.mat(ai, "matmul_nt")?;
        let (n, k2) = self.mat(bi, "matmul_nt")?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", ai, bi));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(
            self.nodes[ai].value.data(),
            self.nodes[bi].value.data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(ai, bi), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.mat(ai, "transpose")?;
        let src = self.nodes[ai].value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(ai), rg))
    }

    fn mismatch(&self, op: &'static str, a: usize, b: usize) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            left: self.nodes[a].value.shape().to_vec(),
            right: self.nodes[b].value.shape().to_vec(),
        }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(self.mismatch("add", ai, bi));
        }
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(ai, bi), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(bias)?);
        let (m, n) = self.mat(ai, "add_bias")?;
        if self.nodes[bi].value.numel() != n {
            return Err(self.mismatch("add_bias", ai, bi));
        }
        let b = self.nodes[bi].value.data();
        let mut out = self.nodes[ai].value.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddBias(ai, bi), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        if self.nodes[ai].value.shape() != self.nodes[bi].value.shape() {
            return Err(self.mismatch("mul", ai, bi));
        }
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .zip(self.nodes[bi].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rg = self.rg(&[ai, bi]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(ai, bi), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai].value.data().iter().map(|x| x * c).collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(ai, c), rg))
    }

    /// Multiplies every entry of `a` by the single entry of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ai, si) = (self.check(a)?, self.check(s)?);
        if self.nodes[si].value.numel() != 1 {
            return Err(self.mismatch("scale_by", ai, si));
        }
        let c = self.nodes[si].value.item();
        let out: Vec<f64> = self.nodes[ai].value.data().iter().map(|x| c * x).collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rg = self.rg(&[ai, si]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleBy(ai, si), rg))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let out: Vec<f64> = self.nodes[ai]
            .value
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let shape = self.nodes[ai].value.shape().to_vec();
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu(ai), rg))
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.nodes[ai].value.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let x = self.nodes[ai].value.data();
        let mut out = vec![0.0; x.len()];
        if inner == 1 {
            for (xs, os) in x.chunks(n).zip(out.chunks_mut(n)) {
                kernels::softmax_slice(xs, os);
            }
        } else {
            let mut buf = vec![0.0; n];
            let mut res = vec![0.0; n];
            for o in 0..outer {
                for j in 0..inner {
                    for i in 0..n {
                        buf[i] = x[(o * n + i) * inner + j];
                    }
                    kernels::softmax_slice(&buf, &mut res);
                    for i in 0..n {
                        out[(o * n + i) * inner + j] = res[i];
                    }
                }
            }
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x: ai, axis }, rg))
    }

    /// Row-wise layer normalisation over the last dimension followed by `gain ⊙ x̂ + bias`.
    ///
    /// Rows with zero variance map to `bias` even when `eps == 0`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        if !(eps >= 0.0) {
            return Err(TensorError::InvalidEps(eps));
        }
        let (rows, d) = self.nodes[xi].value.dims2();
        if self.nodes[gi].value.numel() != d {
            return Err(self.mismatch("layer_norm", xi, gi));
        }
        if self.nodes[bi].value.numel() != d {
            return Err(self.mismatch("layer_norm", xi, bi));
        }
        let xs = self.nodes[xi].value.data();
        let g = self.nodes[gi].value.data();
        let b = self.nodes[bi].value.data();
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let (mean, rstd) = row_stats(row, eps);
            for j in 0..d {
                out[r * d + j] = g[j] * ((row[j] - mean) * rstd) + b[j];
            }
        }
        let shape = self.nodes[xi].value.shape().to_vec();
        let rg = self.rg(&[xi, gi, bi]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: xi,
                gain: gi,
                bias: bi,
                eps,
            },
            rg,
        ))
    }

    // ---- indexing -------------------------------------------------------

    /// Gathers rows of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let (v, d) = self.mat(ti, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0, d] });
        }
        let t = self.nodes[ti].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { index: id, bound: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[ti]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: ti,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    /// `None` targets are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let li = self.check(logits)?;
        let (n, v) = self.mat(li, "cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![n, v],
                right: vec![targets.len()],
            });
        }
        let x = self.nodes[li].value.data();
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(TensorError::IndexOutOfRange { index: t, bound: v });
            }
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::NoTargets);
        }
        let rg = self.rg(&[li]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits: li,
                targets: targets.to_vec(),
                count,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.mat(ai, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: r,
            });
        }
        let out = self.nodes[ai].value.data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[ai]);
        Ok(self.push(
            Tensor::new(vec![len, c], out)?,
            Op::SliceRows { x: ai, start },
            rg,
        ))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.mat(ai, "gather_rows")?;
        if rows.is_empty() {
            return Err(TensorError::InvalidShape { shape: vec![0, c] });
        }
        let src = self.nodes[ai].value.data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(TensorError::IndexOutOfRange { index: i, bound: r });
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x: ai,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Copy of `base` with row `rows[i]` incremented by row `i` of `delta`.
    /// Rows not listed are copied bit-for-bit.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, rows: &[usize]) -> Result<Var> {
        let (bi, di) = (self.check(base)?, self.check(delta)?);
        let (r, c) = self.mat(bi, "scatter_add_rows")?;
        let (dr, dc) = self.mat(di, "scatter_add_rows")?;
        if dc != c || dr != rows.len() {
            return Err(self.mismatch("scatter_add_rows", bi, di));
        }
        let mut out = self.nodes[bi].value.data().to_vec();
        let d = self.nodes[di].value.data();
        for (k, &row) in rows.iter().enumerate() {
            if row >= r {
                return Err(TensorError::IndexOutOfRange { index: row, bound: r });
            }
            for j in 0..c {
                out[row * c + j] += d[k * c + j];
            }
        }
        let rg = self.rg(&[bi, di]);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::ScatterAddRows {
                base: bi,
                delta: di,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(TensorError::InvalidShape { shape: vec![0] });
        };
        let (_, c) = self.mat(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &i in &ids {
            let (r, c2) = self.mat(i, "concat_rows")?;
            if c2 != c {
                return Err(self.mismatch("concat_rows", first, i));
            }
            rows += r;
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(ids), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let (r, c) = self.mat(ai, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                bound: c,
            });
        }
        let src = self.nodes[ai].value.data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[ai]);
        Ok(self.push(
            Tensor::new(vec![r, len], out)?,
            Op::SliceCols { x: ai, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<Vec<_>>>()?;
        let Some(&first) = ids.first() else {
            return Err(TensorError::InvalidShape { shape: vec![0] });
        };
        let (r, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(ids.len());
        for &i in &ids {
            let (r2, c) = self.mat(i, "concat_cols")?;
            if r2 != r {
                return Err(self.mismatch("concat_cols", first, i));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&i, &w) in ids.iter().zip(&widths) {
            let src = self.nodes[i].value.data();
            for row in 0..r {
                out[row * total + off..row * total + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(ids), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let t = self.nodes[ai].value.clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[ai]);
        Ok(self.push(t, Op::Reshape(ai), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.data().iter().sum();
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ai), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let v = &self.nodes[ai].value;
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[ai]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ai), rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates `d loss / d node` to every node reachable from `loss` that
    /// requires a gradient. Nodes outside that set keep `grad == None`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.nodes[li].value.shape();
        if self.nodes[li].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: shape.to_vec(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[li].requires_grad {
            grads[li] = Some(vec![1.0]);
        }
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let needs = |j: usize| nodes[j].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = out.dims2().1;
                if needs(*a) {
                    matmul_nt_acc(g, val(*b), m, n, k, acc(grads, *a, m * k));
                }
                if needs(*b) {
                    matmul_tn_acc(val(*a), g, m, k, n, acc(grads, *b, k * n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = nodes[*a].value.dims2();
                let n = out.dims2().1;
                if needs(*a) {
                    matmul_acc(g, val(*b), m, n, k, acc(grads, *a, m * k));
                }
                if needs(*b) {
                    matmul_tn_acc(g, val(*a), m, n, k, acc(grads, *b, n * k));
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = nodes[*a].value.dims2();
                    let ga = acc(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if needs(j) {
                        add_into(acc(grads, j, g.len()), g);
                    }
                }
            }
            Op::AddBias(a, b) => {
                if needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let n = nodes[*b].value.numel();
                    let gb = acc(grads, *b, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *o += gv * bv;
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
            }
            Op::ScaleBy(a, s) => {
                let c = nodes[*s].value.item();
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (o, &gv) in ga.iter_mut().zip(g) {
                        *o += gv * c;
                    }
                }
                if needs(*s) {
                    let d = kernels::dot(g, val(*a));
                    acc(grads, *s, 1)[0] += d;
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        *o += gv * kernels::gelu_grad(x);
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let (outer, n, inner) = axis_split(out.shape(), *axis);
                    let y = out.data();
                    let gx = acc(grads, *x, g.len());
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + j;
                            let s: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (rows, d) = nodes[*x].value.dims2();
                let xs = val(*x);
                let gn = val(*gain);
                let mut gx = needs(*x).then(|| vec![0.0; rows * d]);
                let mut gg = needs(*gain).then(|| vec![0.0; d]);
                let mut gbias = needs(*bias).then(|| vec![0.0; d]);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, rstd) = row_stats(row, *eps);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gn[j];
                    }
                    if let Some(gg) = gg.as_mut() {
                        for j in 0..d {
                            gg[j] += gr[j] * xhat[j];
                        }
                    }
                    if let Some(gb) = gbias.as_mut() {
                        add_into(gb, gr);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = kernels::dot(&dxhat, &xhat) / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(v) = gx {
                    add_into(acc(grads, *x, rows * d), &v);
                }
                if let Some(v) = gg {
                    add_into(acc(grads, *gain, d), &v);
                }
                if let Some(v) = gbias {
                    add_into(acc(grads, *bias, d), &v);
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let (v, d) = nodes[*table].value.dims2();
                    let gt = acc(grads, *table, v * d);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                if needs(*logits) {
                    let (n, v) = nodes[*logits].value.dims2();
                    let x = val(*logits);
                    let scale = g[0] / *count as f64;
                    let gl = acc(grads, *logits, n * v);
                    let mut p = vec![0.0; v];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        kernels::softmax_slice(&x[r * v..(r + 1) * v], &mut p);
                        p[t] -= 1.0;
                        for (o, &pv) in gl[r * v..(r + 1) * v].iter_mut().zip(&p) {
                            *o += scale * pv;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let (r, c) = nodes[*x].value.dims2();
                    let gx = acc(grads, *x, r * c);
                    add_into(&mut gx[start * c..start * c + g.len()], g);
                }
            }
            Op::GatherRows { x, rows } => {
                if needs(*x) {
                    let (r, c) = nodes[*x].value.dims2();
                    let gx = acc(grads, *x, r * c);
                    for (k, &row) in rows.iter().enumerate() {
                        add_into(&mut gx[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::ScatterAddRows { base, delta, rows } => {
                let c = out.dims2().1;
                if needs(*base) {
                    add_into(acc(grads, *base, g.len()), g);
                }
                if needs(*delta) {
                    let gd = acc(grads, *delta, rows.len() * c);
                    for (k, &row) in rows.iter().enumerate() {
                        add_into(&mut gd[k * c..(k + 1) * c], &g[row * c..(row + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.numel();
                    if needs(p) {
                        add_into(acc(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let (r, c) = nodes[*x].value.dims2();
                    let w = out.dims2().1;
                    let gx = acc(grads, *x, r * c);
                    for row in 0..r {
                        add_into(
                            &mut gx[row * c + start..row * c + start + w],
                            &g[row * w..(row + 1) * w],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.dims2().1;
                    if needs(p) {
                        let gp = acc(grads, p, r * w);
                        for row in 0..r {
                            add_into(
                                &mut gp[row * w..(row + 1) * w],
                                &g[row * total + off..row * total + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let n = nodes[*a].value.numel();
                    for o in acc(grads, *a, n) {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = nodes[*a].value.numel();
                    let s = g[0] / n as f64;
                    for o in acc(grads, *a, n) {
                        *o += s;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], j: usize, len: usize) -> &mut [f64] {
    grads[j].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
    let denom = var + eps;
    let rstd = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
    (mean, rstd)
}
