use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

#[derive(Debug)]
enum Op {
    Leaf { name: Option<String>, trainable: bool },
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Softmax(usize),
    CausalSoftmax(usize),
    LogSoftmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    Embedding(usize, Vec<usize>),
    Gather(usize, Vec<(usize, usize)>),
    Sum(usize),
    Mean(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients keyed by trainable leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Define-by-run record of primitive operations.
///
/// Every primitive checks its input shapes, evaluates eagerly, and appends a
/// node. [`Tape::backward`] walks the nodes in reverse recording order.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    names: BTreeMap<String, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.id)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Records a constant input (never receives a gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf {
                name: None,
                trainable: false,
            },
            requires_grad: false,
        });
        Var {
            id: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    /// Records a named parameter leaf. Only trainable leaves get gradients.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<Var> {
        if self.names.contains_key(name) {
            return Err(Error::invalid(format!("parameter `{name}` registered twice")));
        }
        if !value.is_finite() {
            return Err(Error::NumericOverflow { op: "param" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf {
                name: Some(name.to_string()),
                trainable,
            },
            requires_grad: trainable,
        });
        let id = self.nodes.len() - 1;
        self.names.insert(name.to_string(), id);
        Ok(Var { id, tape: self.id })
    }

    /// `[m,k] · [k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        self.push("matmul", out, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// `[m,k] · [n,k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let (m, k) = ta.dims2();
        let n = tb.shape()[0];
        let mut out = vec![0.0; m * n];
        kernels::mm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul_nt", out, Op::MatMulNT(ia, ib), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(ia, ib), &[ia, ib])
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (_, n) = ta.dims2();
        if ta.shape().len() != 2 || tb.shape() != [n] {
            return Err(mismatch("add_row", ta, tb));
        }
        let b = tb.data();
        let data = ta
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(ia, ib), &[ia, ib])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(ia, ib), &[ia, ib])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect())?;
        self.push("scale", out, Op::Scale(ia, c), &[ia])
    }

    /// Stacks matrices with equal column counts along the sequence (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_rows: no inputs"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = &self.nodes[ids[0]].value;
        let cols = first.dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.shape().len() != 2 || t.shape()[1] != cols {
                return Err(mismatch("concat_rows", first, t));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Op::ConcatRows(ids.clone()), &ids)
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = &self.nodes[ids[0]].value;
        let rows = first.dims2().0;
        let mut total = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.shape().len() != 2 || t.shape()[0] != rows {
                return Err(mismatch("concat_cols", first, t));
            }
            total += t.shape()[1];
        }
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &i in &ids {
            let t = &self.nodes[i].value;
            let c = t.shape()[1];
            for r in 0..rows {
                data[r * total + off..r * total + off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (m, n) = ta.dims2();
        if ta.shape().len() != 2 || start + len > m {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let out = Tensor::new(vec![len, n], ta.data()[start * n..(start + len) * n].to_vec())?;
        self.push("slice_rows", out, Op::SliceRows(ia, start), &[ia])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (m, n) = ta.dims2();
        if ta.shape().len() != 2 || start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: ta.shape().to_vec(),
                right: vec![start, len],
            });
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        self.push("slice_cols", out, Op::SliceCols(ia, start), &[ia])
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = row_softmax(&self.nodes[ia].value, false);
        self.push("softmax", out, Op::Softmax(ia), &[ia])
    }

    /// Row softmax of a square score matrix where row `i` only sees columns `<= i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        if ta.shape().len() != 2 || ta.shape()[0] != ta.shape()[1] {
            return Err(mismatch("causal_softmax", ta, ta));
        }
        let out = row_softmax(ta, true);
        self.push("causal_softmax", out, Op::CausalSoftmax(ia), &[ia])
    }

    /// Log-softmax over each row.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (_, n) = ta.dims2();
        let mut data = Vec::with_capacity(ta.len());
        for row in ta.data().chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|x| x - lse));
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("log_softmax", out, Op::LogSoftmax(ia), &[ia])
    }

    /// Normalizes each row to zero mean / unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let tx = &self.nodes[ix].value;
        let (m, n) = tx.dims2();
        let (tg, tb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if tx.shape().len() != 2 || tg.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut data = Vec::with_capacity(m * n);
        for row in tx.data().chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mu) * rs;
                xhat.push(h);
                data.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            &[ix, ig, ib],
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| gelu(x)).collect())?;
        self.push("gelu", out, Op::Gelu(ia), &[ia])
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let tt = &self.nodes[it].value;
        let (v, d) = tt.dims2();
        if tt.shape().len() != 2 {
            return Err(mismatch("embedding", tt, tt));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::ShapeMismatch {
                    op: "embedding",
                    left: tt.shape().to_vec(),
                    right: vec![id],
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding(it, ids.to_vec()), &[it])
    }

    /// Picks `a[r, c]` for each `(r, c)` into a vector.
    pub fn gather(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let (m, n) = ta.dims2();
        let mut data = Vec::with_capacity(coords.len());
        for &(r, c) in coords {
            if r >= m || c >= n {
                return Err(Error::ShapeMismatch {
                    op: "gather",
                    left: ta.shape().to_vec(),
                    right: vec![r, c],
                });
            }
            data.push(ta.at(r, c));
        }
        let out = Tensor::vector(data);
        self.push("gather", out, Op::Gather(ia, coords.to_vec()), &[ia])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(ia), &[ia])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|&x| sigmoid(x)).collect())?;
        self.push("sigmoid", out, Op::Sigmoid(ia), &[ia])
    }

    /// `log σ(x)`, evaluated without forming `σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let ta = &self.nodes[ia].value;
        let out = Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| log_sigmoid(x)).collect(),
        )?;
        self.push("log_sigmoid", out, Op::LogSigmoid(ia), &[ia])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns one entry per trainable leaf (zeros if the leaf does not reach
    /// the loss) and none for frozen leaves or constants.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        grads[li] = Some(vec![1.0]);
        let mut out = Gradients::new();

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(i, &g, &mut grads, &mut out);
        }
        for node in &self.nodes {
            if let Op::Leaf {
                name: Some(name),
                trainable: true,
            } = &node.op
            {
                out.entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        for (name, g) in &out {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for `{name}`")));
            }
        }
        Ok(out)
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], out: &mut Gradients) {
        let node = &self.nodes[i];
        let y = &node.value;
        let rg = |j: usize| self.nodes[j].requires_grad;

        macro_rules! acc {
            ($j:expr) => {{
                let j = $j;
                let len = self.nodes[j].value.len();
                grads[j].get_or_insert_with(|| vec![0.0; len])
            }};
        }

        match &node.op {
            Op::Leaf { name, trainable } => {
                if let (Some(name), true) = (name, trainable) {
                    out.insert(name.clone(), Tensor::new(y.shape().to_vec(), g.to_vec()).unwrap());
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = ta.dims2();
                let n = tb.dims2().1;
                if rg(*a) {
                    // dA = G · Bᵀ
                    kernels::mm_nt(g, tb.data(), acc!(*a), m, n, k);
                }
                if rg(*b) {
                    // dB = Aᵀ · G
                    kernels::mm_tn(ta.data(), g, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = ta.dims2();
                let n = tb.dims2().0;
                if rg(*a) {
                    // dA = G · B
                    kernels::mm(g, tb.data(), acc!(*a), m, n, k);
                }
                if rg(*b) {
                    // dB = Gᵀ · A
                    kernels::mm_tn(g, ta.data(), acc!(*b), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if rg(j) {
                        for (d, v) in acc!(j).iter_mut().zip(g) {
                            *d += v;
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                let n = self.nodes[*b].value.len();
                if rg(*a) {
                    for (d, v) in acc!(*a).iter_mut().zip(g) {
                        *d += v;
                    }
                }
                if rg(*b) {
                    let db = acc!(*b);
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if rg(*a) {
                    for ((d, v), w) in acc!(*a).iter_mut().zip(g).zip(tb.data()) {
                        *d += v * w;
                    }
                }
                if rg(*b) {
                    for ((d, v), w) in acc!(*b).iter_mut().zip(g).zip(ta.data()) {
                        *d += v * w;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (d, v) in acc!(*a).iter_mut().zip(g) {
                    *d += v * c;
                }
            }
            Op::ConcatRows(ids) => {
                let mut off = 0;
                for &j in ids {
                    let len = self.nodes[j].value.len();
                    if rg(j) {
                        for (d, v) in acc!(j).iter_mut().zip(&g[off..off + len]) {
                            *d += v;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(ids) => {
                let (rows, total) = y.dims2();
                let mut off = 0;
                for &j in ids {
                    let c = self.nodes[j].value.dims2().1;
                    if rg(j) {
                        let d = acc!(j);
                        for r in 0..rows {
                            for k in 0..c {
                                d[r * c + k] += g[r * total + off + k];
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows(a, start) => {
                let n = y.dims2().1;
                let d = acc!(*a);
                for (dv, v) in d[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *dv += v;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, len) = y.dims2();
                let n = self.nodes[*a].value.dims2().1;
                let d = acc!(*a);
                for r in 0..m {
                    for k in 0..len {
                        d[r * n + start + k] += g[r * len + k];
                    }
                }
            }
            Op::Softmax(a) | Op::CausalSoftmax(a) => {
                let n = y.dims2().1;
                let d = acc!(*a);
                for (r, (yrow, grow)) in y.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                    for k in 0..n {
                        d[r * n + k] += yrow[k] * (grow[k] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let n = y.dims2().1;
                let d = acc!(*a);
                for (r, (yrow, grow)) in y.data().chunks(n).zip(g.chunks(n)).enumerate() {
                    let gs: f64 = grow.iter().sum();
                    for k in 0..n {
                        d[r * n + k] += grow[k] - yrow[k].exp() * gs;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = y.dims2().1;
                let gam = self.nodes[*gamma].value.data();
                if rg(*gamma) {
                    let dg = acc!(*gamma);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for k in 0..n {
                            dg[k] += grow[k] * hrow[k];
                        }
                    }
                }
                if rg(*beta) {
                    let db = acc!(*beta);
                    for grow in g.chunks(n) {
                        for k in 0..n {
                            db[k] += grow[k];
                        }
                    }
                }
                if rg(*x) {
                    let dx = acc!(*x);
                    let mut dh = vec![0.0; n];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        for k in 0..n {
                            dh[k] = grow[k] * gam[k];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hrow).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for k in 0..n {
                            dx[r * n + k] += rstd[r] * (dh[k] - mean_dh - hrow[k] * mean_dhh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.nodes[*a].value.data();
                for ((d, v), &x) in acc!(*a).iter_mut().zip(g).zip(xs) {
                    *d += v * gelu_grad(x);
                }
            }
            Op::Embedding(t, ids) => {
                let dcols = y.dims2().1;
                let d = acc!(*t);
                for (r, &id) in ids.iter().enumerate() {
                    for k in 0..dcols {
                        d[id * dcols + k] += g[r * dcols + k];
                    }
                }
            }
            Op::Gather(a, coords) => {
                let n = self.nodes[*a].value.dims2().1;
                let d = acc!(*a);
                for (&(r, c), v) in coords.iter().zip(g) {
                    d[r * n + c] += v;
                }
            }
            Op::Sum(a) => {
                for dv in acc!(*a).iter_mut() {
                    *dv += g[0];
                }
            }
            Op::Mean(a) => {
                let len = self.nodes[*a].value.len() as f64;
                for dv in acc!(*a).iter_mut() {
                    *dv += g[0] / len;
                }
            }
            Op::Sigmoid(a) => {
                for ((d, v), s) in acc!(*a).iter_mut().zip(g).zip(y.data()) {
                    *d += v * s * (1.0 - s);
                }
            }
            Op::LogSigmoid(a) => {
                let xs = self.nodes[*a].value.data();
                for ((d, v), &x) in acc!(*a).iter_mut().zip(g).zip(xs) {
                    *d += v * sigmoid(-x);
                }
            }
        }
    }

    /// Like [`Tape::value`] but reports foreign handles as errors.
    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }
}

fn row_softmax(t: &Tensor, causal: bool) -> Tensor {
    let (_, n) = t.dims2();
    let mut data = Vec::with_capacity(t.len());
    for (r, row) in t.data().chunks(n).enumerate() {
        let visible = if causal { r + 1 } else { n };
        let mx = row[..visible].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row[..visible].iter().map(|x| (x - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.iter().map(|e| e / z));
        data.extend(std::iter::repeat_n(0.0, n - visible));
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_padded() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 2, vec![1., 0., 0., 1., 0., 0.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 4., 5.]);
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_and_log_softmax_anchors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 3, vec![0.0; 3]).unwrap());
        let s = tape.softmax(z).unwrap();
        for &p in tape.value(s).data() {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let z2 = tape.constant(Tensor::matrix(1, 2, vec![0.0; 2]).unwrap());
        let ls = tape.log_softmax(z2).unwrap();
        for &p in tape.value(ls).data() {
            assert!(close(p, -std::f64::consts::LN_2, 1e-15));
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(3, 3, vec![1.0; 9]).unwrap());
        let s = tape.causal_softmax(z).unwrap();
        let v = tape.value(s);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1., -2., 3., 0.5]), true).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g["x"].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_backward_at_zero() {
        let c = 3.5;
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::vector(vec![0.0]), true).unwrap();
        let s = tape.sigmoid(w).unwrap();
        let l = tape.scale(s, c).unwrap();
        let l = tape.sum(l).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(close(g["w"].item(), 0.25 * c, 1e-15));
    }

    #[test]
    fn frozen_leaves_get_no_entry() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        let b = tape.param("b", Tensor::vector(vec![3.0, 4.0]), false).unwrap();
        let u = tape.param("unused", Tensor::vector(vec![3.0]), true).unwrap();
        let _ = u;
        let p = tape.mul(a, b).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g["a"].data(), &[3.0, 4.0]);
        assert!(!g.contains_key("b"));
        assert_eq!(g["unused"].data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign() {
        let mut tape = Tape::new();
        let a = tape.param("a", Tensor::vector(vec![1.0, 2.0]), true).unwrap();
        assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
        let mut other = Tape::new();
        let b = other.constant(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(b), Err(Error::ForeignVar)));
    }

    #[test]
    fn overflow_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1e300]));
        assert!(matches!(
            tape.scale(a, 1e300),
            Err(Error::NumericOverflow { op: "scale" })
        ));
    }

    #[test]
    fn duplicate_param_rejected() {
        let mut tape = Tape::new();
        tape.param("w", Tensor::scalar(1.0), true).unwrap();
        assert!(tape.param("w", Tensor::scalar(1.0), true).is_err());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![-800.0, 0.0, 800.0]));
        let l = tape.log_sigmoid(a).unwrap();
        let v = tape.value(l).data();
        assert!(close(v[0], -800.0, 1e-12));
        assert!(close(v[1], -std::f64::consts::LN_2, 1e-15));
        assert!(close(v[2], 0.0, 1e-300));
    }
}
