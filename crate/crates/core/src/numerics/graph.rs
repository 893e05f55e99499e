use std::collections::BTreeMap;

use super::functional::log_sum_exp;
use super::kernels::{matmul, matmul_nt, matmul_tn};
use super::Tensor;
use crate::{Error, Result, Scalar};

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Layout of packed attention inputs: `batch * seq` rows of `heads * head_dim` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
enum Op<S> {
    Input,
    Param(usize),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var, width: usize },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    Gather { table: Var, ids: Vec<usize>, width: usize },
    Softmax { a: Var, width: usize },
    LogSoftmax { a: Var, width: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, width: usize, xhat: Vec<S>, rstd: Vec<f64> },
    Gelu { a: Var },
    Attention { q: Var, k: Var, v: Var, shape: AttentionShape, lengths: Vec<usize>, probs: Vec<S> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, width: usize, count: usize },
    Sum { a: Var },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Input | Op::Param(_) => vec![],
            Op::MatMul { a, b, .. } | Op::MatMulNt { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::AddRow { a, bias, .. } => vec![a, bias],
            Op::Transpose { a, .. }
            | Op::Scale { a, .. }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Gelu { a }
            | Op::Sum { a } => vec![a],
            Op::Gather { table, .. } => vec![table],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node<S> {
    value: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
}

/// Records operations on 2-D row-major values for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Graph::backward`]: gradients per node and per registered parameter.
#[derive(Debug)]
pub struct Gradients<S> {
    nodes: Vec<Option<Vec<S>>>,
    params: BTreeMap<usize, Vec<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, var: Var) -> Option<&[S]> {
        self.nodes.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: usize) -> Option<&[S]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &[S])> {
        self.params.iter().map(|(&id, g)| (id, g.as_slice()))
    }

    /// Adds parameter gradients into the grad slots of `params` (indexed by id).
    pub fn accumulate_into(&self, params: &mut [Tensor<S>]) -> Result<()> {
        for (&id, g) in &self.params {
            params
                .get_mut(id)
                .ok_or_else(|| Error::Graph(format!("no parameter with id {id}")))?
                .accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<S>, shape: Vec<usize>, op: Op<S>) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Input)
    }

    /// Trainable leaf whose gradient is reported under `id`.
    pub fn param(&mut self, t: &Tensor<S>, id: usize) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Param(id))
    }

    fn expect_rows(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{what} expects a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_rows(a, "matmul")?;
        let (k2, n) = self.expect_rows(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_rows(a, "matmul_nt")?;
        let (n, k2) = self.expect_rows(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let mut out = vec![S::zero(); m * n];
        matmul_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push(out, vec![m, n], Op::MatMulNt { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.expect_rows(a, "transpose")?;
        let x = self.value(a);
        let mut out = vec![S::zero(); x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        Ok(self.push(out, vec![cols, rows], Op::Transpose { a, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }))
    }

    /// Broadcasts `bias` (length = row width) over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, width) = self.expect_rows(a, "add_row")?;
        if self.value(bias).len() != width {
            return Err(Error::Shape(format!(
                "bias of length {} for rows of width {width}",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .chunks(width)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::AddRow { a, bias, width }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Scale { a, c })
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, width) = self.expect_rows(table, "gather")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for (position, &id) in ids.iter().enumerate() {
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    size: rows,
                });
            }
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        Ok(self.push(
            out,
            vec![ids.len(), width],
            Op::Gather {
                table,
                ids: ids.to_vec(),
                width,
            },
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, width) = self.expect_rows(a, "softmax")?;
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(width) {
            let (max, lse) = log_sum_exp(row);
            out.extend(row.iter().map(|&x| S::of((x.f64() - max - lse).exp())));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Softmax { a, width }))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, width) = self.expect_rows(a, "log_softmax")?;
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.value(a).chunks(width) {
            let (max, lse) = log_sum_exp(row);
            out.extend(row.iter().map(|&x| S::of(x.f64() - max - lse)));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::LogSoftmax { a, width }))
    }

    /// Row-wise normalization to zero mean and unit variance, then `x̂·gain + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (rows, width) = self.expect_rows(x, "layer_norm")?;
        if self.value(gain).len() != width || self.value(bias).len() != width {
            return Err(Error::Shape(format!("layer_norm affine params must have length {width}")));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(rows * width);
        let mut xhat = Vec::with_capacity(rows * width);
        let mut rstd = Vec::with_capacity(rows);
        for row in self.value(x).chunks(width) {
            let mean = row.iter().map(|v| v.f64()).sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / width as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = S::of((v.f64() - mean) * r);
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .iter()
            .map(|&x| {
                let x = x.f64();
                S::of(0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh()))
            })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, Op::Gelu { a })
    }

    /// Multi-head scaled dot-product attention with a causal mask and
    /// per-row key padding. Position `i` of row `b` attends to keys
    /// `0..=min(i, lengths[b] - 1)`; a row of length 0 yields zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        lengths: &[usize],
    ) -> Result<Var> {
        let (rows, width) = self.expect_rows(q, "attention")?;
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let AttentionShape { batch, seq, heads } = shape;
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::Shape(format!(
                "attention over {rows}x{width} with batch {batch}, seq {seq}, heads {heads}"
            )));
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l > seq) {
            return Err(Error::Shape(format!("attention lengths {lengths:?} for seq {seq}")));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut out = vec![S::zero(); rows * width];
        let mut scores = vec![0.0f64; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let keys = (i + 1).min(lengths[b]);
                    if keys == 0 {
                        continue;
                    }
                    let qi = &qv[(b * seq + i) * width + col..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores[..keys].iter_mut().enumerate() {
                        let kj = &kv[(b * seq + j) * width + col..][..dh];
                        let d: S = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                        *s = d.f64() * scale;
                        max = max.max(*s);
                    }
                    let denom: f64 = scores[..keys].iter().map(|s| (s - max).exp()).sum();
                    let p_row = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let o = &mut out[(b * seq + i) * width + col..][..dh];
                    for j in 0..keys {
                        let p = S::of((scores[j] - max).exp() / denom);
                        p_row[j] = p;
                        let vj = &vv[(b * seq + j) * width + col..][..dh];
                        for (oo, &x) in o.iter_mut().zip(vj) {
                            *oo += p * x;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            vec![rows, width],
            Op::Attention {
                q,
                k,
                v,
                shape,
                lengths: lengths.to_vec(),
                probs,
            },
        ))
    }

    /// Mean next-token negative log-likelihood over masked rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, width) = self.expect_rows(logits, "cross_entropy")?;
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape(format!(
                "{rows} logit rows but {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Param("cross-entropy mask selects no positions".into()));
        }
        let x = self.value(logits);
        let mut total = 0.0f64;
        for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
            if !on {
                continue;
            }
            if t >= width {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    position: r,
                    size: width,
                });
            }
            let row = &x[r * width..(r + 1) * width];
            let (max, lse) = log_sum_exp(row);
            total -= row[t].f64() - max - lse;
        }
        let loss = total / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        Ok(self.push(
            vec![S::of(loss)],
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                width,
                count,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().map(|x| x.f64()).sum();
        self.push(vec![S::of(total)], vec![1], Op::Sum { a })
    }

    /// Backpropagates from the scalar `loss`, returning fresh gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut params: BTreeMap<usize, Vec<S>> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            for input in node.op.inputs() {
                if input.0 >= i {
                    return Err(Error::Graph(format!(
                        "node {i} depends on later node {}",
                        input.0
                    )));
                }
            }
            self.propagate(node, &g, &mut grads);
            if let Op::Param(id) = node.op {
                match params.get_mut(&id) {
                    Some(acc) => add_into(acc, &g),
                    None => {
                        params.insert(id, g.clone());
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> &'g mut Vec<S> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            &Op::MatMul { a, b, m, k, n } => {
                matmul_nt(g, val(b), self.slot(grads, a), m, n, k);
                matmul_tn(val(a), g, self.slot(grads, b), m, k, n);
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                matmul(g, val(b), self.slot(grads, a), m, n, k);
                matmul_tn(g, val(a), self.slot(grads, b), m, n, k);
            }
            &Op::Transpose { a, rows, cols } => {
                let ga = self.slot(grads, a);
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            &Op::Add { a, b } => {
                add_into(self.slot(grads, a), g);
                add_into(self.slot(grads, b), g);
            }
            &Op::AddRow { a, bias, width } => {
                add_into(self.slot(grads, a), g);
                let mut sums = vec![0.0f64; width];
                for row in g.chunks(width) {
                    for (s, &x) in sums.iter_mut().zip(row) {
                        *s += x.f64();
                    }
                }
                for (d, s) in self.slot(grads, bias).iter_mut().zip(sums) {
                    *d += S::of(s);
                }
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (val(a), val(b));
                for ((d, &x), &y) in self.slot(grads, a).iter_mut().zip(g).zip(vb) {
                    *d += x * y;
                }
                for ((d, &x), &y) in self.slot(grads, b).iter_mut().zip(g).zip(va) {
                    *d += x * y;
                }
            }
            &Op::Scale { a, c } => {
                for (d, &x) in self.slot(grads, a).iter_mut().zip(g) {
                    *d += x * c;
                }
            }
            Op::Gather { table, ids, width } => {
                let gt = self.slot(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * width..(id + 1) * width], &g[r * width..(r + 1) * width]);
                }
            }
            &Op::Softmax { a, width } => {
                let ga = self.slot(grads, a);
                for ((y, dy), dx) in node
                    .value
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let dot: f64 = y.iter().zip(dy).map(|(p, d)| p.f64() * d.f64()).sum();
                    for j in 0..width {
                        dx[j] += S::of(y[j].f64() * (dy[j].f64() - dot));
                    }
                }
            }
            &Op::LogSoftmax { a, width } => {
                let ga = self.slot(grads, a);
                for ((y, dy), dx) in node
                    .value
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(ga.chunks_mut(width))
                {
                    let total: f64 = dy.iter().map(|d| d.f64()).sum();
                    for j in 0..width {
                        dx[j] += S::of(dy[j].f64() - y[j].f64().exp() * total);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                width,
                xhat,
                rstd,
            } => {
                let width = *width;
                let gv = val(*gain);
                let mut dgain = vec![0.0f64; width];
                let mut dbias = vec![0.0f64; width];
                {
                    let gx = self.slot(grads, *x);
                    let mut dxhat = vec![0.0f64; width];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let dy = &g[r * width..(r + 1) * width];
                        let xh = &xhat[r * width..(r + 1) * width];
                        let (mut m1, mut m2) = (0.0f64, 0.0f64);
                        for j in 0..width {
                            let d = dy[j].f64();
                            dgain[j] += d * xh[j].f64();
                            dbias[j] += d;
                            dxhat[j] = d * gv[j].f64();
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xh[j].f64();
                        }
                        m1 /= width as f64;
                        m2 /= width as f64;
                        let out = &mut gx[r * width..(r + 1) * width];
                        for j in 0..width {
                            out[j] += S::of(rs * (dxhat[j] - m1 - xh[j].f64() * m2));
                        }
                    }
                }
                for (d, s) in self.slot(grads, *gain).iter_mut().zip(dgain) {
                    *d += S::of(s);
                }
                for (d, s) in self.slot(grads, *bias).iter_mut().zip(dbias) {
                    *d += S::of(s);
                }
            }
            &Op::Gelu { a } => {
                let xs = val(a);
                for ((d, &dy), &x) in self.slot(grads, a).iter_mut().zip(g).zip(xs) {
                    let x = x.f64();
                    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                    let dt = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                    *d += S::of(dy.f64() * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dt));
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                lengths,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *shape, lengths, probs, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                width,
                count,
            } => {
                let width = *width;
                let x = val(*logits);
                let coeff = g[0].f64() / *count as f64;
                let gl = self.slot(grads, *logits);
                for (r, (&t, &on)) in targets.iter().zip(mask).enumerate() {
                    if !on {
                        continue;
                    }
                    let row = &x[r * width..(r + 1) * width];
                    let (max, lse) = log_sum_exp(row);
                    let out = &mut gl[r * width..(r + 1) * width];
                    for j in 0..width {
                        let p = (row[j].f64() - max - lse).exp();
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        out[j] += S::of(coeff * (p - onehot));
                    }
                }
            }
            &Op::Sum { a } => {
                let g0 = g[0];
                for d in self.slot(grads, a).iter_mut() {
                    *d += g0;
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[S],
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        lengths: &[usize],
        probs: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let AttentionShape { batch, seq, heads } = shape;
        let (qv, kv, vv) = (
            self.nodes[q.0].value.as_slice(),
            self.nodes[k.0].value.as_slice(),
            self.nodes[v.0].value.as_slice(),
        );
        let width = qv.len() / (batch * seq);
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut dq = vec![S::zero(); qv.len()];
        let mut dk = vec![S::zero(); kv.len()];
        let mut dv = vec![S::zero(); vv.len()];
        let mut dp = vec![0.0f64; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..seq {
                    let keys = (i + 1).min(lengths[b]);
                    if keys == 0 {
                        continue;
                    }
                    let row_i = (b * seq + i) * width + col;
                    let go = &g[row_i..row_i + dh];
                    let p_row = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut weighted = 0.0f64;
                    for j in 0..keys {
                        let row_j = (b * seq + j) * width + col;
                        let d: S = go.iter().zip(&vv[row_j..row_j + dh]).map(|(&x, &y)| x * y).sum();
                        dp[j] = d.f64();
                        weighted += p_row[j].f64() * dp[j];
                        let p = p_row[j];
                        for (o, &x) in dv[row_j..row_j + dh].iter_mut().zip(go) {
                            *o += p * x;
                        }
                    }
                    for j in 0..keys {
                        let ds = S::of(p_row[j].f64() * (dp[j] - weighted) * scale);
                        let row_j = (b * seq + j) * width + col;
                        for c in 0..dh {
                            dq[row_i + c] += ds * kv[row_j + c];
                            dk[row_j + c] += ds * qv[row_i + c];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            match grads[var.0].as_mut() {
                Some(acc) => add_into(acc, &d),
                None => grads[var.0] = Some(d),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    /// Central-difference derivative of `f` with respect to every element of `x`.
    fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.to_vec();
                p[i] += h;
                let up = f(&p);
                p[i] -= 2.0 * h;
                (up - f(&p)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "index {i}: {x} vs {y}");
        }
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        (0..n)
            .map(|i| (((i as u64 + 1) * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0)
            .collect()
    }

    /// Checks d(weighted sum of op output)/d(input) against finite differences.
    fn check_unary(shape: Vec<usize>, op: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let n: usize = shape.iter().product();
        let x0 = sample(n, 3);
        let w = sample(n * 4, 11);
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let xv = g.param(&t(shape.clone(), x.to_vec()), 0);
            let y = op(&mut g, xv);
            let yn = g.value(y).len();
            let wv = g.input(&t(g.shape(y).to_vec(), w[..yn].to_vec()));
            let prod = g.mul(y, wv).unwrap();
            let loss = g.sum(prod);
            let grads = g.backward(loss).unwrap();
            (g.value(loss)[0], grads.param(0).unwrap().to_vec())
        };
        let analytic = eval(&x0).1;
        let numeric = numeric_grad(&x0, |x| eval(x).0);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        check_unary(vec![3, 5], |g, x| g.softmax(x).unwrap());
        check_unary(vec![3, 5], |g, x| g.log_softmax(x).unwrap());
        check_unary(vec![4, 6], |g, x| g.gelu(x));
        check_unary(vec![4, 6], |g, x| g.transpose(x).unwrap());
        check_unary(vec![2, 3], |g, x| g.scale(x, 0.3));
        check_unary(vec![4, 6], |g, x| {
            let gain = g.input(&t(vec![6], sample(6, 5)));
            let bias = g.input(&t(vec![6], sample(6, 9)));
            g.layer_norm(x, gain, bias).unwrap()
        });
        check_unary(vec![5, 3], |g, x| {
            let w = g.input(&t(vec![3, 4], sample(12, 2)));
            g.matmul(x, w).unwrap()
        });
        check_unary(vec![3, 4], |g, x| {
            let w = g.input(&t(vec![5, 4], sample(20, 8)));
            g.matmul_nt(x, w).unwrap()
        });
        check_unary(vec![4, 3], |g, x| {
            let w = g.input(&t(vec![5, 3], sample(15, 8)));
            g.matmul_nt(w, x).unwrap()
        });
        check_unary(vec![6, 2], |g, x| g.gather(x, &[5, 0, 0, 3]).unwrap());
        check_unary(vec![3, 4], |g, x| {
            let b = g.input(&t(vec![4], sample(4, 1)));
            g.add_row(x, b).unwrap()
        });
        check_unary(vec![4], |g, x| {
            let b = g.input(&t(vec![3, 4], sample(12, 1)));
            g.add_row(b, x).unwrap()
        });
        check_unary(vec![3, 4], |g, x| g.mul(x, x).unwrap());
        check_unary(vec![3, 4], |g, x| g.add(x, x).unwrap());
    }

    #[test]
    fn attention_matches_finite_differences() {
        let shape = AttentionShape {
            batch: 2,
            seq: 4,
            heads: 2,
        };
        let lengths = [4, 2];
        for which in 0..3 {
            check_unary(vec![8, 6], |g, x| {
                let a = g.input(&t(vec![8, 6], sample(48, 21)));
                let b = g.input(&t(vec![8, 6], sample(48, 33)));
                let (q, k, v) = match which {
                    0 => (x, a, b),
                    1 => (a, x, b),
                    _ => (a, b, x),
                };
                g.attention(q, k, v, shape, &lengths).unwrap()
            });
        }
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let targets = [1, 4, 0];
        let mask = [true, false, true];
        check_unary(vec![3, 5], |g, x| g.cross_entropy(x, &targets, &mask).unwrap());
    }

    #[test]
    fn cross_entropy_grad_is_zero_on_unmasked_rows() {
        let mut g = Graph::new();
        let x = g.param(&t(vec![3, 4], sample(12, 4)), 0);
        let loss = g.cross_entropy(x, &[0, 1, 2], &[false, true, false]).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.param(0).unwrap();
        assert!(gx[..4].iter().chain(&gx[8..]).all(|&v| v == 0.0));
        assert!(gx[4..8].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn unused_parameter_has_no_gradient_and_linear_grad_is_exact() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), 0);
        let _unused = g.param(&t(vec![2], vec![1.0, 1.0]), 1);
        let x = g.input(&t(vec![3, 1], vec![0.5, -2.0, 3.0]));
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap(), &[0.5, -2.0, 3.0, 0.5, -2.0, 3.0]);
        assert!(grads.param(1).is_none());

        let mut params = vec![
            t(vec![2, 3], vec![0.0; 6]),
            t(vec![2], vec![0.0; 2]),
        ];
        grads.accumulate_into(&mut params).unwrap();
        grads.accumulate_into(&mut params).unwrap();
        assert_eq!(params[0].grad().unwrap(), &[1.0, -4.0, 6.0, 1.0, -4.0, 6.0]);
        assert!(params[1].grad().is_none());
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let mut g = Graph::new();
        let w = g.param(&t(vec![1, 2], vec![1.0, 2.0]), 0);
        let w2 = g.param(&t(vec![1, 2], vec![1.0, 2.0]), 0);
        let s = g.add(w, w2).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn attention_respects_causality_and_padding() {
        let shape = AttentionShape {
            batch: 1,
            seq: 3,
            heads: 1,
        };
        let mut g = Graph::<f64>::new();
        let q = g.input(&t(vec![3, 2], sample(6, 1)));
        let k = g.input(&t(vec![3, 2], sample(6, 2)));
        let v = g.input(&t(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let o = g.attention(q, k, v, shape, &[3]).unwrap();
        // first position only sees itself
        assert_eq!(&g.value(o)[..2], &[1.0, 2.0]);
        let o = g.attention(q, k, v, shape, &[1]).unwrap();
        // with length 1, every position sees only key 0
        assert_eq!(g.value(o), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let o = g.attention(q, k, v, shape, &[0]).unwrap();
        assert!(g.value(o).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..40).map(|i| (i as f32 * 1.37).sin() * 5.0 + i as f32).collect();
        let x = g.input(&Tensor::new(vec![4, 10], data).unwrap());
        let one = g.input(&Tensor::filled(vec![10], 1.0));
        let zero = g.input(&Tensor::zeros(vec![10]));
        let y = g.layer_norm(x, one, zero).unwrap();
        for row in g.value(y).chunks(10) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 10.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-3);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f32>::new();
        let a = g.input(&Tensor::zeros(vec![2, 3]));
        let b = g.input(&Tensor::zeros(vec![2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.gather(a, &[2]).is_err());
        assert!(g.cross_entropy(a, &[0, 0], &[false, false]).is_err());
        assert!(g.backward(a).is_err());
    }
}
