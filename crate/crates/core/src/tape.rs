//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! A [`Tape`] records every primitive operation of one forward pass in
//! topological order (an operation's inputs always precede it). Calling
//! [`Tape::backward`] on a scalar loss replays the record once in reverse,
//! accumulating gradients additively, and returns the gradients of every
//! trainable parameter that was bound with [`Tape::param`]. The tape is
//! rebuilt from scratch on every forward pass and is not shareable across
//! threads; independent runs each own their own tape.
//!
//! All node values are row-major matrices; scalars are `1 x 1`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, Tensor};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Elementwise activation kinds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Negative slope is configurable; 0.01 by default.
    LeakyRelu { slope: f64 },
    /// x * sigmoid(x)
    Swish,
    /// tanh-form GELU (exactly differentiable, unlike the erf form)
    Gelu,
}

impl Activation {
    pub fn parse(kind: &str, slope: f64) -> Result<Activation> {
        match kind {
            "relu" => Ok(Activation::Relu),
            "leakyrelu" => Ok(Activation::LeakyRelu { slope }),
            "swish" => Ok(Activation::Swish),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown nonlinearity kind: {other}"))),
        }
    }

    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Swish => x * sigmoid(x),
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Swish => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            Activation::Gelu => {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            }
        }
    }
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum Op {
    Leaf,
    /// C[m,n] = A[m,k] B[k,n]
    Matmul { a: Var, b: Var },
    /// Y = X^T
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// elementwise product
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    /// bias row [1,n] added to every row of x [m,n]
    AddRowBroadcast { x: Var, bias: Var },
    /// per-row softmax; output saved in the node value
    SoftmaxRows { x: Var },
    /// per-row standardize then affine; saves (mean, inv_std) per row
    LayerNorm { x: Var, gain: Var, bias: Var },
    Activation { x: Var, kind: Activation },
    /// mean over rows of -log softmax(logits)[label]; saves the softmax
    CrossEntropy { logits: Var, labels: Vec<usize> },
    /// out row r = src row rows[r]; backward scatter-adds
    GatherRows { src: Var, rows: Vec<usize> },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    /// [m,n] -> [m,1]
    RowSum { x: Var },
    /// x[m,n] * col[m,1] broadcast across columns
    MulColBroadcast { x: Var, col: Var },
    /// [m,n] -> scalar
    SumAll { x: Var },
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// op-specific saved intermediates (layer norm row stats, CE softmax)
    saved: Vec<f64>,
}

struct BoundParam {
    name: String,
    var: Var,
    trainable: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<BoundParam>,
    bound_names: HashMap<String, usize>,
    /// per-parameter layer-norm eps is fixed tape-wide
    pub layer_norm_eps: f64,
}

/// Gradients of the trainable parameters bound to a tape, keyed by name.
pub struct GradMap {
    grads: HashMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn from_entries(entries: Vec<(String, Vec<f64>)>) -> GradMap {
        GradMap { grads: entries.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulate into the matching trainable tensors of a group.
    /// Tensors without a recorded gradient are left untouched (their `grad`
    /// stays absent unless a previous batch populated it).
    pub fn accumulate_into(&self, group: &mut dyn ParamGroup) -> Result<()> {
        let mut err = None;
        group.visit_mut(&mut |t| {
            if err.is_some() || !t.trainable {
                return;
            }
            if let Some(g) = self.grads.get(&t.name) {
                if let Err(e) = t.accumulate_grad(g) {
                    err = Some(e);
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            nodes: Vec::with_capacity(1024),
            params: Vec::new(),
            bound_names: HashMap::new(),
            layer_norm_eps: 1e-5,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, saved: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, data, saved });
        Var(self.nodes.len() - 1)
    }

    /// Bind a named tensor as a leaf. Each name may be bound once per tape.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        if self.bound_names.contains_key(&t.name) {
            return Err(Error::Usage(format!("tensor {} is already bound to this tape", t.name)));
        }
        let (rows, cols) = as_matrix(&t.shape);
        let var = self.push(Op::Leaf, rows, cols, t.data.clone(), Vec::new());
        self.bound_names.insert(t.name.clone(), var.0);
        self.params.push(BoundParam { name: t.name.clone(), var, trainable: t.trainable });
        Ok(var)
    }

    /// Anonymous constant leaf (attention masks, dropout masks, literals).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "constant of {} values cannot have shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(Op::Leaf, rows, cols, data, Vec::new()))
    }

    pub fn scalar_constant(&mut self, v: f64) -> Var {
        self.push(Op::Leaf, 1, 1, vec![v], Vec::new())
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::Usage(format!("expected scalar, found {}x{}", n.rows, n.cols)));
        }
        Ok(n.data[0])
    }

    // ---- primitive operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k1) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k1 != k2 {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", m, k1, k2, n)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k1, n, false);
        Ok(self.push(Op::Matmul { a, b }, m, n, out, Vec::new()))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let src = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose { x }, n, m, out, Vec::new()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add { a, b }, m, n, out, Vec::new()))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub { a, b }, m, n, out, Vec::new()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul { a, b }, m, n, out, Vec::new()))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|v| v * c).collect();
        Ok(self.push(Op::Scale { x, c }, m, n, out, Vec::new()))
    }

    /// `x [m,n] + bias [1,n]` broadcast over rows.
    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (bm, bn) = self.shape(bias);
        if bm != 1 || bn != n {
            return Err(Error::Shape(format!("row broadcast of {bm}x{bn} onto {m}x{n}")));
        }
        let xs = self.value(x);
        let bs = self.value(bias).to_vec();
        let mut out = xs.to_vec();
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] += bs[c];
            }
        }
        Ok(self.push(Op::AddRowBroadcast { x, bias }, m, n, out, Vec::new()))
    }

    /// Numerically stable per-row softmax. Rejects non-finite inputs.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n < 1 {
            return Err(Error::Shape("softmax over empty axis".into()));
        }
        let xs = self.value(x);
        if xs.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::Numeric("softmax input contains NaN or +inf".into()));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            softmax_row(&xs[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        Ok(self.push(Op::SoftmaxRows { x }, m, n, out, Vec::new()))
    }

    /// Standardize each row (population variance) then apply `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (gm, gn) = self.shape(gain);
        let (bm, bn) = self.shape(bias);
        if gm != 1 || bm != 1 || gn != n || bn != n {
            return Err(Error::Shape(format!(
                "layer_norm over {m}x{n} with gain {gm}x{gn} and bias {bm}x{bn}"
            )));
        }
        let eps = self.layer_norm_eps;
        let xs = self.value(x);
        let gs = self.value(gain).to_vec();
        let bs = self.value(bias).to_vec();
        let mut out = vec![0.0; m * n];
        let mut saved = vec![0.0; 2 * m];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            saved[2 * r] = mean;
            saved[2 * r + 1] = inv_std;
            for c in 0..n {
                out[r * n + c] = (row[c] - mean) * inv_std * gs[c] + bs[c];
            }
        }
        Ok(self.push(Op::LayerNorm { x, gain, bias }, m, n, out, saved))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let (m, n) = self.shape(x);
        let out = self.value(x).iter().map(|v| kind.apply(*v)).collect();
        Ok(self.push(Op::Activation { x, kind }, m, n, out, Vec::new()))
    }

    /// Mean negative log-softmax of the true class over the batch rows.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.shape(logits);
        if labels.len() != b {
            return Err(Error::Shape(format!("{} labels for {b} logit rows", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|l| **l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let xs = self.value(logits);
        let mut soft = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &xs[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let logsum = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss -= row[labels[r]] - logsum;
            softmax_row(row, &mut soft[r * c..(r + 1) * c]);
        }
        loss /= b as f64;
        Ok(self.push(Op::CrossEntropy { logits, labels: labels.to_vec() }, 1, 1, vec![loss], soft))
    }

    /// Out row `r` is `src` row `rows[r]`. Used for embedding lookup, for
    /// per-sequence row blocks and for pooling.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(src);
        if let Some(bad) = rows.iter().find(|r| **r >= m) {
            return Err(Error::Shape(format!("gather row {bad} out of range for {m} rows")));
        }
        let xs = self.value(src);
        let mut out = vec![0.0; rows.len() * n];
        for (i, &r) in rows.iter().enumerate() {
            out[i * n..(i + 1) * n].copy_from_slice(&xs[r * n..(r + 1) * n]);
        }
        Ok(self.push(Op::GatherRows { src, rows: rows.to_vec() }, rows.len(), n, out, Vec::new()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n {
            return Err(Error::Shape(format!("column slice {start}..{} of {m}x{n}", start + len)));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; m * len];
        for r in 0..m {
            out[r * len..(r + 1) * len].copy_from_slice(&xs[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start, len }, m, len, out, Vec::new()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero parts".into()));
        }
        let m = self.shape(parts[0]).0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = self.shape(*p);
            if pm != m {
                return Err(Error::Shape(format!("concat_cols rows {pm} vs {m}")));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut at = 0;
        for p in parts {
            let (_, pn) = self.shape(*p);
            let xs = self.value(*p);
            for r in 0..m {
                out[r * total + at..r * total + at + pn].copy_from_slice(&xs[r * pn..(r + 1) * pn]);
            }
            at += pn;
        }
        Ok(self.push(Op::ConcatCols { parts: parts.to_vec() }, m, total, out, Vec::new()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero parts".into()));
        }
        let n = self.shape(parts[0]).1;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = self.shape(*p);
            if pn != n {
                return Err(Error::Shape(format!("concat_rows cols {pn} vs {n}")));
            }
            total += pm;
        }
        let mut out = Vec::with_capacity(total * n);
        for p in parts {
            out.extend_from_slice(self.value(*p));
        }
        Ok(self.push(Op::ConcatRows { parts: parts.to_vec() }, total, n, out, Vec::new()))
    }

    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let xs = self.value(x);
        let out: Vec<f64> = (0..m).map(|r| xs[r * n..(r + 1) * n].iter().sum()).collect();
        Ok(self.push(Op::RowSum { x }, m, 1, out, Vec::new()))
    }

    /// `x [m,n] * col [m,1]`, the column broadcast across all columns.
    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (cm, cn) = self.shape(col);
        if cm != m || cn != 1 {
            return Err(Error::Shape(format!("column broadcast of {cm}x{cn} onto {m}x{n}")));
        }
        let xs = self.value(x);
        let cs = self.value(col).to_vec();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[r * n + c] = xs[r * n + c] * cs[r];
            }
        }
        Ok(self.push(Op::MulColBroadcast { x, col }, m, n, out, Vec::new()))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).iter().sum::<f64>();
        Ok(self.push(Op::SumAll { x }, 1, 1, vec![total], Vec::new()))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (am, an) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if (am, an) != (bm, bn) {
            return Err(Error::Shape(format!("{what} of {am}x{an} and {bm}x{bn}")));
        }
        Ok((am, an))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Returns the gradients of every
    /// trainable bound parameter reachable from the loss; non-trainable
    /// parameters are omitted. Gradients accumulate additively across every
    /// use of a value.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let ln = &self.nodes[loss.0];
        if ln.rows != 1 || ln.cols != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, found {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g); // keep for parameter extraction
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (m, k) = self.shape(*a);
                    let n = self.shape(*b).1;
                    // dA += g . B^T
                    {
                        let da = grad_buf(&mut grads, *a, m * k);
                        matmul_into_nt(&g, self.value(*b), da, m, n, k);
                    }
                    // dB += A^T . g
                    {
                        let db = grad_buf(&mut grads, *b, k * n);
                        matmul_into_tn(self.value(*a), &g, db, m, k, n);
                    }
                }
                Op::Transpose { x } => {
                    let (m, n) = self.shape(*x);
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[c * m + r];
                        }
                    }
                }
                Op::Add { a, b } => {
                    add_into(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(grad_buf(&mut grads, *b, g.len()), &g, 1.0);
                }
                Op::Sub { a, b } => {
                    add_into(grad_buf(&mut grads, *a, g.len()), &g, 1.0);
                    add_into(grad_buf(&mut grads, *b, g.len()), &g, -1.0);
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    {
                        let da = grad_buf(&mut grads, *a, g.len());
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    }
                    let db = grad_buf(&mut grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
                Op::Scale { x, c } => {
                    add_into(grad_buf(&mut grads, *x, g.len()), &g, *c);
                }
                Op::AddRowBroadcast { x, bias } => {
                    let (m, n) = (node.rows, node.cols);
                    add_into(grad_buf(&mut grads, *x, g.len()), &g, 1.0);
                    let db = grad_buf(&mut grads, *bias, n);
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let (m, n) = (node.rows, node.cols);
                    let s = &node.data;
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for r in 0..m {
                        let srow = &s[r * n..(r + 1) * n];
                        let grow = &g[r * n..(r + 1) * n];
                        let dot: f64 = srow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] += srow[c] * (grow[c] - dot);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (m, n) = (node.rows, node.cols);
                    let xs = self.value(*x);
                    let gs = self.value(*gain);
                    {
                        let dgain = grad_buf(&mut grads, *gain, n);
                        for r in 0..m {
                            let mean = node.saved[2 * r];
                            let inv_std = node.saved[2 * r + 1];
                            for c in 0..n {
                                let xhat = (xs[r * n + c] - mean) * inv_std;
                                dgain[c] += g[r * n + c] * xhat;
                            }
                        }
                    }
                    {
                        let dbias = grad_buf(&mut grads, *bias, n);
                        for r in 0..m {
                            for c in 0..n {
                                dbias[c] += g[r * n + c];
                            }
                        }
                    }
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for r in 0..m {
                        let mean = node.saved[2 * r];
                        let inv_std = node.saved[2 * r + 1];
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for c in 0..n {
                            let xhat = (xs[r * n + c] - mean) * inv_std;
                            let dxhat = g[r * n + c] * gs[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let inv_n = 1.0 / n as f64;
                        for c in 0..n {
                            let xhat = (xs[r * n + c] - mean) * inv_std;
                            let dxhat = g[r * n + c] * gs[c];
                            dx[r * n + c] +=
                                inv_std * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
                Op::Activation { x, kind } => {
                    let xv = self.value(*x);
                    let dx = grad_buf(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * kind.derivative(xv[j]);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let (b, c) = self.shape(*logits);
                    let gl = g[0] / b as f64;
                    let dx = grad_buf(&mut grads, *logits, b * c);
                    for r in 0..b {
                        for col in 0..c {
                            let onehot = if col == labels[r] { 1.0 } else { 0.0 };
                            dx[r * c + col] += gl * (node.saved[r * c + col] - onehot);
                        }
                    }
                }
                Op::GatherRows { src, rows } => {
                    let (m, n) = self.shape(*src);
                    let dsrc = grad_buf(&mut grads, *src, m * n);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            dsrc[r * n + c] += g[i * n + c];
                        }
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = self.shape(*x);
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..*len {
                            dx[r * n + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.cols;
                    let m = node.rows;
                    let mut at = 0;
                    for p in parts {
                        let (_, pn) = self.shape(*p);
                        let dp = grad_buf(&mut grads, *p, m * pn);
                        for r in 0..m {
                            for c in 0..pn {
                                dp[r * pn + c] += g[r * total + at + c];
                            }
                        }
                        at += pn;
                    }
                }
                Op::ConcatRows { parts } => {
                    let n = node.cols;
                    let mut at = 0;
                    for p in parts {
                        let (pm, _) = self.shape(*p);
                        let dp = grad_buf(&mut grads, *p, pm * n);
                        add_into(dp, &g[at * n..(at + pm) * n], 1.0);
                        at += pm;
                    }
                }
                Op::RowSum { x } => {
                    let (m, n) = self.shape(*x);
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for r in 0..m {
                        for c in 0..n {
                            dx[r * n + c] += g[r];
                        }
                    }
                }
                Op::MulColBroadcast { x, col } => {
                    let (m, n) = self.shape(*x);
                    let xs = self.value(*x);
                    let cs = self.value(*col);
                    {
                        let dx = grad_buf(&mut grads, *x, m * n);
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] += g[r * n + c] * cs[r];
                            }
                        }
                    }
                    let dcol = grad_buf(&mut grads, *col, m);
                    for r in 0..m {
                        let mut acc = 0.0;
                        for c in 0..n {
                            acc += g[r * n + c] * xs[r * n + c];
                        }
                        dcol[r] += acc;
                    }
                }
                Op::SumAll { x } => {
                    let (m, n) = self.shape(*x);
                    let dx = grad_buf(&mut grads, *x, m * n);
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
        }

        let mut out = HashMap::new();
        for p in &self.params {
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads[p.var.0].take() {
                out.insert(p.name.clone(), g);
            }
        }
        Ok(GradMap { grads: out })
    }
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// C (+)= A . B with A [m,k], B [k,n]; `accumulate` keeps existing C.
fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    if !accumulate {
        c.fill(0.0);
    }
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C += A . B^T with A [m,n], B [k,n] -> C [m,k]
fn matmul_into_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        for j in 0..k {
            let mut acc = 0.0;
            for p in 0..n {
                acc += a[i * n + p] * b[j * n + p];
            }
            c[i * k + j] += acc;
        }
    }
}

/// C += A^T . B with A [m,k], B [m,n] -> C [k,n]
fn matmul_into_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}
