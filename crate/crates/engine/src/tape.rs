//! The recording tape.
//!
//! Every forward op evaluates eagerly, stores its result, and records what
//! its adjoint needs. [`Tape::backward`] walks the records once, newest
//! first, and returns the gradients of every parameter that was touched.

use crate::error::{EngineError, Result};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Predictions are clamped into `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

/// Vectors with an L2 norm below this have cosine similarity 0 and no gradient.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// A batch of sparse rows: row `r` owns entries `offsets[r]..offsets[r + 1]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseRows {
    offsets: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseRows {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (i, v) in entries {
            self.indices.push(i);
            self.values.push(v);
        }
        self.offsets.push(self.indices.len());
    }

    pub fn num_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of stored entries across all rows.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

/// Layout of a 1-d convolution input: each row holds `channels_in` channels
/// of `len` positions, channel-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub channels_in: usize,
    pub channels_out: usize,
    pub len: usize,
    /// Odd kernel width; inputs are zero padded by `width / 2` on each side.
    pub width: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MulColumn {
        x: NodeId,
        col: NodeId,
    },
    Column {
        x: NodeId,
        index: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    Conv1d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        spec: Conv1dSpec,
    },
    SparseEmbed {
        table: ParamId,
        rows: SparseRows,
        values: Option<NodeId>,
    },
    ExpDecay {
        theta: NodeId,
        index: Vec<usize>,
        delta_t: Vec<f64>,
    },
    CosineRows(NodeId, NodeId),
    Bce {
        pred: NodeId,
        labels: Vec<f64>,
    },
    Squared {
        pred: NodeId,
        targets: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param(_) => "param",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MulColumn { .. } => "mul_column",
            Op::Column { .. } => "column",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Sum(_) => "sum",
            Op::Conv1d { .. } => "conv1d",
            Op::SparseEmbed { .. } => "sparse_embed",
            Op::ExpDecay { .. } => "exp_decay",
            Op::CosineRows(..) => "cosine_rows",
            Op::Bce { .. } => "bce_loss",
            Op::Squared { .. } => "squared_loss",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(op: &str, detail: String) -> EngineError {
    EngineError::Shape(format!("{op}: {detail}"))
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(EngineError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Constant)
    }

    /// Brings a parameter onto the tape; its value is copied.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id))
    }

    /// `x · w + b`, with `b` a `1 x m` row broadcast over rows.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.val(x), self.val(w));
        if xv.cols() != wv.rows() {
            return Err(shape_err(
                "affine",
                format!("{:?} · {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = xv.matmul(wv);
        if let Some(b) = b {
            let bv = self.val(b);
            if bv.shape() != [1, out.cols()] {
                return Err(shape_err(
                    "affine",
                    format!("bias {:?} for output {:?}", bv.shape(), out.shape()),
                ));
            }
            for r in 0..out.rows() {
                for (o, &bb) in out.row_slice_mut(r).iter_mut().zip(bv.data()) {
                    *o += bb;
                }
            }
        }
        self.push(out, Op::Affine { x, w, b })
    }

    fn binary(
        &mut self,
        name: &str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let xv = self.val(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data)?;
        self.push(out, Op::Scale(x, factor))
    }

    /// Scales row `i` of `x` by `col[i]`.
    pub fn mul_column(&mut self, x: NodeId, col: NodeId) -> Result<NodeId> {
        let (xv, cv) = (self.val(x), self.val(col));
        if cv.shape() != [xv.rows(), 1] {
            return Err(shape_err(
                "mul_column",
                format!("{:?} by column {:?}", xv.shape(), cv.shape()),
            ));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let c = cv.get(r, 0);
            out.row_slice_mut(r).iter_mut().for_each(|v| *v *= c);
        }
        self.push(out, Op::MulColumn { x, col })
    }

    /// Column `index` of `x` as an `n x 1` tensor.
    pub fn column(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.val(x);
        if index >= xv.cols() {
            return Err(EngineError::IndexOutOfRange {
                what: "column",
                index,
                len: xv.cols(),
            });
        }
        let data = (0..xv.rows()).map(|r| xv.get(r, index)).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data)?;
        self.push(out, Op::Column { x, index })
    }

    fn unary(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.val(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        Tensor::from_vec(xv.rows(), xv.cols(), data).expect("same shape")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary(x, |v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary(x, stable_sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// `ln(1 + e^x)`, a smooth strictly positive map.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let out = self.unary(x, softplus);
        self.push(out, Op::Softplus(x))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.val(x).clone();
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(out, Op::Softmax(x))
    }

    /// Concatenates along columns; all parts share a row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(EngineError::InvalidArgument("concat of nothing".into()));
        };
        let rows = self.val(first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.val(p);
            if v.rows() != rows {
                return Err(shape_err(
                    "concat",
                    format!("{} rows vs {rows}", v.rows()),
                ));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.val(p).row_slice(r);
                out.row_slice_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Sum of all elements as a `1 x 1` tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.val(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Same-padded 1-d convolution (cross-correlation) over each row.
    ///
    /// `kernel` is `channels_out x (channels_in * width)`, `bias` is
    /// `1 x channels_out`; the output is `rows x (channels_out * len)`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
        spec: Conv1dSpec,
    ) -> Result<NodeId> {
        let Conv1dSpec {
            channels_in,
            channels_out,
            len,
            width,
        } = spec;
        if width % 2 == 0 {
            return Err(EngineError::InvalidArgument(format!(
                "conv1d kernel width must be odd, got {width}"
            )));
        }
        let (xv, kv, bv) = (self.val(x), self.val(kernel), self.val(bias));
        if xv.cols() != channels_in * len {
            return Err(shape_err(
                "conv1d",
                format!("input {:?} for {channels_in} channels of {len}", xv.shape()),
            ));
        }
        if kv.shape() != [channels_out, channels_in * width] {
            return Err(shape_err("conv1d", format!("kernel {:?}", kv.shape())));
        }
        if bv.shape() != [1, channels_out] {
            return Err(shape_err("conv1d", format!("bias {:?}", bv.shape())));
        }
        let pad = width / 2;
        let mut out = Tensor::zeros(xv.rows(), channels_out * len);
        for n in 0..xv.rows() {
            let xr = xv.row_slice(n);
            let or = out.row_slice_mut(n);
            for o in 0..channels_out {
                let kr = kv.row_slice(o);
                for t in 0..len {
                    let mut acc = bv.get(0, o);
                    for c in 0..channels_in {
                        for k in 0..width {
                            let pos = t + k;
                            if pos < pad || pos - pad >= len {
                                continue;
                            }
                            acc += kr[c * width + k] * xr[c * len + pos - pad];
                        }
                    }
                    or[o * len + t] = acc;
                }
            }
        }
        self.push(out, Op::Conv1d {
            x,
            kernel,
            bias,
            spec,
        })
    }

    /// Row `r` of the output is `Σ value · table[index]` over the entries of
    /// sparse row `r`.
    ///
    /// When `values` is given (an `nnz x 1` node) it replaces the constant
    /// values stored in `rows`, and receives gradients.
    pub fn sparse_embed(
        &mut self,
        table: ParamId,
        rows: SparseRows,
        values: Option<NodeId>,
    ) -> Result<NodeId> {
        let tv = self.params.value(table);
        for &i in rows.indices() {
            if i >= tv.rows() {
                return Err(EngineError::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    len: tv.rows(),
                });
            }
        }
        if let Some(v) = values {
            if self.val(v).shape() != [rows.nnz(), 1] {
                return Err(shape_err(
                    "sparse_embed",
                    format!("values {:?} for {} entries", self.val(v).shape(), rows.nnz()),
                ));
            }
        }
        let dim = tv.cols();
        let mut out = Tensor::zeros(rows.num_rows(), dim);
        let override_values = values.map(|v| self.val(v).data());
        for r in 0..rows.num_rows() {
            let base = rows.offsets[r];
            let or = out.row_slice_mut(r);
            for (e, (i, v)) in rows.row(r).enumerate() {
                let weight = override_values.map_or(v, |ov| ov[base + e]);
                for (o, t) in or.iter_mut().zip(tv.row_slice(i)) {
                    *o += weight * t;
                }
            }
        }
        self.push(out, Op::SparseEmbed {
            table,
            rows,
            values,
        })
    }

    /// `exp(-theta[index[e]] · delta_t[e])` for every entry, as an `n x 1`
    /// column. `theta` may be a row or a column.
    pub fn exp_decay(
        &mut self,
        theta: NodeId,
        index: Vec<usize>,
        delta_t: Vec<f64>,
    ) -> Result<NodeId> {
        if index.len() != delta_t.len() {
            return Err(shape_err(
                "exp_decay",
                format!("{} indices vs {} intervals", index.len(), delta_t.len()),
            ));
        }
        if let Some(dt) = delta_t.iter().find(|dt| !(**dt >= 0.0)) {
            return Err(EngineError::InvalidArgument(format!(
                "exp_decay: negative interval {dt}"
            )));
        }
        let tv = self.val(theta);
        let mut data = Vec::with_capacity(index.len());
        for (&i, &dt) in index.iter().zip(&delta_t) {
            if i >= tv.len() {
                return Err(EngineError::IndexOutOfRange {
                    what: "decay rates",
                    index: i,
                    len: tv.len(),
                });
            }
            data.push((-tv.data()[i] * dt).exp());
        }
        let out = Tensor::from_vec(index.len(), 1, data)?;
        self.push(out, Op::ExpDecay {
            theta,
            index,
            delta_t,
        })
    }

    /// Cosine similarity of matching rows, as an `n x 1` column.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(
                "cosine_rows",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = (0..av.rows())
            .map(|r| cosine(av.row_slice(r), bv.row_slice(r)))
            .collect();
        let out = Tensor::from_vec(av.rows(), 1, data)?;
        self.push(out, Op::CosineRows(a, b))
    }

    /// Summed negative log-likelihood of binary labels under `pred`.
    pub fn bce_loss(&mut self, pred: NodeId, labels: &[f64]) -> Result<NodeId> {
        let pv = self.val(pred);
        if pv.shape() != [labels.len(), 1] {
            return Err(shape_err(
                "bce_loss",
                format!("{:?} for {} labels", pv.shape(), labels.len()),
            ));
        }
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(labels) {
            if !(0.0..=1.0).contains(&p) {
                return Err(EngineError::InvalidArgument(format!(
                    "bce_loss: probability {p} outside [0, 1]"
                )));
            }
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        self.push(Tensor::scalar(total), Op::Bce {
            pred,
            labels: labels.to_vec(),
        })
    }

    /// `Σ (pred - target)²` over an `n x 1` prediction column.
    pub fn squared_loss(&mut self, pred: NodeId, targets: &[f64]) -> Result<NodeId> {
        let pv = self.val(pred);
        if pv.len() != targets.len() {
            return Err(shape_err(
                "squared_loss",
                format!("{:?} for {} targets", pv.shape(), targets.len()),
            ));
        }
        let total = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(Tensor::scalar(total), Op::Squared {
            pred,
            targets: targets.to_vec(),
        })
    }

    /// Multiplies by a fixed mask (already scaled by the keep probability).
    pub fn dropout(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let xv = self.val(x);
        if mask.len() != xv.len() {
            return Err(shape_err(
                "dropout",
                format!("mask of {} for {:?}", mask.len(), xv.shape()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data)?;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.val(loss).shape() != [1, 1] {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.val(loss).shape()),
            ));
        }
        let mut node_grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        node_grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads = Gradients::with_capacity(self.params.len());

        for idx in (0..=loss.0).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.adjoint(node, &dy, &mut node_grads, &mut grads);
        }
        Ok(grads)
    }

    fn adjoint(
        &self,
        node: &Node,
        dy: &Tensor,
        ng: &mut [Option<Tensor>],
        grads: &mut Gradients,
    ) {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                grads.slot(*id, y.rows(), y.cols()).add_assign(dy);
            }
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                accumulate(ng, *x, dy.matmul_t(wv));
                accumulate(ng, *w, xv.t_matmul(dy));
                if let Some(b) = b {
                    let mut db = Tensor::zeros(1, dy.cols());
                    for r in 0..dy.rows() {
                        for (d, g) in db.data_mut().iter_mut().zip(dy.row_slice(r)) {
                            *d += g;
                        }
                    }
                    accumulate(ng, *b, db);
                }
            }
            Op::Add(a, b) => {
                accumulate(ng, *a, dy.clone());
                accumulate(ng, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                accumulate(ng, *a, dy.clone());
                accumulate(ng, *b, map(dy, |g| -g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                accumulate(ng, *a, zip_map(dy, bv, |g, v| g * v));
                accumulate(ng, *b, zip_map(dy, av, |g, v| g * v));
            }
            Op::Scale(x, c) => accumulate(ng, *x, map(dy, |g| g * c)),
            Op::MulColumn { x, col } => {
                let (xv, cv) = (self.val(*x), self.val(*col));
                let mut dx = dy.clone();
                let mut dc = Tensor::zeros(cv.rows(), 1);
                for r in 0..dy.rows() {
                    let c = cv.get(r, 0);
                    dx.row_slice_mut(r).iter_mut().for_each(|g| *g *= c);
                    let s: f64 = dy
                        .row_slice(r)
                        .iter()
                        .zip(xv.row_slice(r))
                        .map(|(g, v)| g * v)
                        .sum();
                    dc.set(r, 0, s);
                }
                accumulate(ng, *x, dx);
                accumulate(ng, *col, dc);
            }
            Op::Column { x, index } => {
                let xv = self.val(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    dx.set(r, *index, dy.get(r, 0));
                }
                accumulate(ng, *x, dx);
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                accumulate(ng, *x, zip_map(dy, xv, |g, v| if v > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(x) => accumulate(ng, *x, zip_map(dy, y, |g, s| g * s * (1.0 - s))),
            Op::Softplus(x) => {
                let xv = self.val(*x);
                accumulate(ng, *x, zip_map(dy, xv, |g, v| g * stable_sigmoid(v)));
            }
            Op::Softmax(x) => {
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), dy.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (d, (s, g)) in dx.row_slice_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d = s * (g - dot);
                    }
                }
                accumulate(ng, *x, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.val(p).cols();
                    let mut dp = Tensor::zeros(dy.rows(), cols);
                    for r in 0..dy.rows() {
                        dp.row_slice_mut(r)
                            .copy_from_slice(&dy.row_slice(r)[offset..offset + cols]);
                    }
                    offset += cols;
                    accumulate(ng, p, dp);
                }
            }
            Op::Sum(x) => {
                let xv = self.val(*x);
                accumulate(ng, *x, Tensor::filled(xv.rows(), xv.cols(), dy.item()));
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                spec,
            } => {
                let (xv, kv) = (self.val(*x), self.val(*kernel));
                let Conv1dSpec {
                    channels_in,
                    channels_out,
                    len,
                    width,
                } = *spec;
                let pad = width / 2;
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                let mut dk = Tensor::zeros(kv.rows(), kv.cols());
                let mut db = Tensor::zeros(1, channels_out);
                for n in 0..xv.rows() {
                    let xr = xv.row_slice(n);
                    let gr = dy.row_slice(n);
                    for o in 0..channels_out {
                        let kr = kv.row_slice(o);
                        for t in 0..len {
                            let g = gr[o * len + t];
                            if g == 0.0 {
                                continue;
                            }
                            db.data_mut()[o] += g;
                            for c in 0..channels_in {
                                for k in 0..width {
                                    let pos = t + k;
                                    if pos < pad || pos - pad >= len {
                                        continue;
                                    }
                                    let xi = c * len + pos - pad;
                                    dk.data_mut()[o * channels_in * width + c * width + k] +=
                                        g * xr[xi];
                                    dx.data_mut()[n * xv.cols() + xi] += g * kr[c * width + k];
                                }
                            }
                        }
                    }
                }
                accumulate(ng, *x, dx);
                accumulate(ng, *kernel, dk);
                accumulate(ng, *bias, db);
            }
            Op::SparseEmbed {
                table,
                rows,
                values,
            } => {
                let tv = self.params.value(*table);
                let override_values = values.map(|v| self.val(v).data());
                let mut dvals = values.map(|_| Tensor::zeros(rows.nnz(), 1));
                let dt = grads.slot(*table, tv.rows(), tv.cols());
                let dim = tv.cols();
                for r in 0..rows.num_rows() {
                    let base = rows.offsets[r];
                    let gr = dy.row_slice(r);
                    for (e, (i, v)) in rows.row(r).enumerate() {
                        let weight = override_values.map_or(v, |ov| ov[base + e]);
                        let trow = &mut dt.data_mut()[i * dim..(i + 1) * dim];
                        for (d, g) in trow.iter_mut().zip(gr) {
                            *d += weight * g;
                        }
                        if let Some(dv) = dvals.as_mut() {
                            let s: f64 = gr.iter().zip(tv.row_slice(i)).map(|(g, t)| g * t).sum();
                            dv.data_mut()[base + e] += s;
                        }
                    }
                }
                if let (Some(v), Some(dv)) = (values, dvals) {
                    accumulate(ng, *v, dv);
                }
            }
            Op::ExpDecay {
                theta,
                index,
                delta_t,
            } => {
                let tv = self.val(*theta);
                let mut dtheta = Tensor::zeros(tv.rows(), tv.cols());
                for (e, (&i, &d)) in index.iter().zip(delta_t).enumerate() {
                    dtheta.data_mut()[i] -= dy.data()[e] * y.data()[e] * d;
                }
                accumulate(ng, *theta, dtheta);
            }
            Op::CosineRows(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let mut db = Tensor::zeros(bv.rows(), bv.cols());
                for r in 0..av.rows() {
                    let (ar, br) = (av.row_slice(r), bv.row_slice(r));
                    let na = norm(ar);
                    let nb = norm(br);
                    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
                        continue;
                    }
                    let c = y.get(r, 0);
                    let g = dy.get(r, 0);
                    let inv = 1.0 / (na * nb);
                    for (k, (&x, &z)) in ar.iter().zip(br).enumerate() {
                        da.data_mut()[r * av.cols() + k] += g * (z * inv - c * x / (na * na));
                        db.data_mut()[r * bv.cols() + k] += g * (x * inv - c * z / (nb * nb));
                    }
                }
                accumulate(ng, *a, da);
                accumulate(ng, *b, db);
            }
            Op::Bce { pred, labels } => {
                let pv = self.val(*pred);
                let g = dy.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &l)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            g * (-l / p + (1.0 - l) / (1.0 - p))
                        }
                    })
                    .collect();
                accumulate(ng, *pred, Tensor::from_vec(pv.rows(), pv.cols(), data).expect("shape"));
            }
            Op::Squared { pred, targets } => {
                let pv = self.val(*pred);
                let g = dy.item();
                let data = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| 2.0 * g * (p - t))
                    .collect();
                accumulate(ng, *pred, Tensor::from_vec(pv.rows(), pv.cols(), data).expect("shape"));
            }
            Op::Dropout { x, mask } => {
                let data = dy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(
                    ng,
                    *x,
                    Tensor::from_vec(dy.rows(), dy.cols(), data).expect("shape"),
                );
            }
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity with the norm floor applied.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < COSINE_NORM_FLOOR || nb < COSINE_NORM_FLOOR {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn accumulate(ng: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut ng[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
