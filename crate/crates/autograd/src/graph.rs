//! Define-by-run tape.
//!
//! Every forward op appends a node holding its output value. `backward`
//! walks the tape in reverse from a scalar output and accumulates
//! gradients for every node that depends on a leaf. Nodes created with
//! [`Graph::constant`] or [`Graph::detach`] never receive gradient.

use std::ops::Range;

use crate::error::EngineError;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    Unfold { x: Var, width: usize },
    MatMul { a: Var, b: Var },
    MatVec { m: Var, v: Var },
    VecMat { v: Var, m: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    AddRowBias { m: Var, bias: Var },
    Tanh { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    Log { a: Var },
    KlDiv { p: Var, q: Var },
    L2Norm { a: Var },
    Sum { a: Var },
    Pick { a: Var, index: usize },
    Stack { rows: Vec<Var> },
    Reshape { a: Var },
    /// `argmax[s * cols + k]` is the winning row of segment `s`, kernel `k`,
    /// or `None` for an empty segment.
    SegmentMaxPool { c: Var, argmax: Vec<Option<usize>>, gaps: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Gather { .. } => "gather",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Unfold { .. } => "unfold",
            Op::MatMul { .. } => "matmul",
            Op::MatVec { .. } => "matvec",
            Op::VecMat { .. } => "vecmat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddRowBias { .. } => "add_row_bias",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Log { .. } => "log",
            Op::KlDiv { .. } => "kl_div",
            Op::L2Norm { .. } => "l2_norm",
            Op::Sum { .. } => "sum",
            Op::Pick { .. } => "pick",
            Op::Stack { .. } => "stack",
            Op::Reshape { .. } => "reshape",
            Op::SegmentMaxPool { .. } => "segment_max_pool",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A tape of recorded tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, detail: String) -> EngineError {
    EngineError::ShapeMismatch { op, detail }
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

    /// Registers a differentiable leaf (parameter or tapped input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Alias of [`Graph::leaf`] for trainable parameters.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v`'s value into a constant; gradient stops here.
    pub fn detach(&mut self, v: Var) -> Result<Var, EngineError> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node(&self, v: Var) -> Result<&Node, EngineError> {
        self.nodes.get(v.0).ok_or(EngineError::UnknownNode { node: v.0 })
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var, EngineError> {
        if !value.all_finite() {
            return Err(EngineError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, vars: &[Var]) -> Result<(), EngineError> {
        for v in vars {
            self.node(*v)?;
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), EngineError> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 2 {
            return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn vector_len(&self, op: &'static str, v: Var) -> Result<usize, EngineError> {
        let t = &self.nodes[v.0].value;
        if t.rank() != 1 {
            return Err(mismatch(op, format!("expected a vector, got shape {:?}", t.shape())));
        }
        Ok(t.len())
    }

    /// Row lookup: `out[k] = table[ids[k]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, EngineError> {
        self.check(&[table])?;
        let (rows, cols) = self.matrix_dims("gather", table)?;
        if ids.is_empty() {
            return Err(mismatch("gather", "no ids".into()));
        }
        let t = &self.nodes[table.0].value;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(EngineError::IndexOutOfRange { op: "gather", index: id, extent: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        self.push(Op::Gather { table, ids: ids.to_vec() }, value, &[table])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, EngineError> {
        self.check(parts)?;
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "no inputs".into()));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push(self.matrix_dims("concat_cols", p)?);
        }
        let rows = dims[0].0;
        if dims.iter().any(|d| d.0 != rows) {
            return Err(mismatch("concat_cols", format!("row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        self.push(Op::ConcatCols { parts: parts.to_vec() }, value, parts)
    }

    /// Unfolds `x` (l × d) into its sliding windows (l × width·d). The input is
    /// zero-padded with `(width - 1) / 2` rows on each side, so row `t` holds
    /// rows `t - half ..= t + half` of `x`. `width` must be odd.
    pub fn unfold(&mut self, x: Var, width: usize) -> Result<Var, EngineError> {
        self.check(&[x])?;
        if width == 0 || width % 2 == 0 {
            return Err(mismatch("unfold", format!("window width {width} must be odd")));
        }
        let (l, d) = self.matrix_dims("unfold", x)?;
        let half = (width - 1) / 2;
        let src = self.nodes[x.0].value.data();
        let mut data = vec![0.0; l * width * d];
        for t in 0..l {
            for j in 0..width {
                let s = t + j;
                if s < half || s - half >= l {
                    continue;
                }
                let s = s - half;
                let dst = t * width * d + j * d;
                data[dst..dst + d].copy_from_slice(&src[s * d..(s + 1) * d]);
            }
        }
        let value = Tensor::new(vec![l, width * d], data)?;
        self.push(Op::Unfold { x, width }, value, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.check(&[a, b])?;
        let (n, k) = self.matrix_dims("matmul", a)?;
        let (k2, m) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", format!("({n}×{k}) · ({k2}×{m})")));
        }
        let ad = self.nodes[a.0].value.data();
        let bd = self.nodes[b.0].value.data();
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * m..(p + 1) * m];
                for (o, bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        self.push(Op::MatMul { a, b }, value, &[a, b])
    }

    /// Matrix (r × c) times vector (c) → vector (r).
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, EngineError> {
        self.check(&[m, v])?;
        let (r, c) = self.matrix_dims("matvec", m)?;
        let n = self.vector_len("matvec", v)?;
        if c != n {
            return Err(mismatch("matvec", format!("({r}×{c}) · ({n})")));
        }
        let mt = &self.nodes[m.0].value;
        let vd = self.nodes[v.0].value.data();
        let out: Vec<f64> =
            (0..r).map(|i| mt.row(i).iter().zip(vd).map(|(a, b)| a * b).sum()).collect();
        self.push(Op::MatVec { m, v }, Tensor::vector(out), &[m, v])
    }

    /// Vector (n) times matrix (n × c) → vector (c).
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var, EngineError> {
        self.check(&[v, m])?;
        let n = self.vector_len("vecmat", v)?;
        let (r, c) = self.matrix_dims("vecmat", m)?;
        if n != r {
            return Err(mismatch("vecmat", format!("({n}) · ({r}×{c})")));
        }
        let mt = &self.nodes[m.0].value;
        let vd = self.nodes[v.0].value.data();
        let mut out = vec![0.0; c];
        for (i, &w) in vd.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(mt.row(i)) {
                *o += w * x;
            }
        }
        self.push(Op::VecMat { v, m }, Tensor::vector(out), &[v, m])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), EngineError> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var, EngineError> {
        self.check(&[a, b])?;
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(op, value, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip_with(Op::Add { a, b }, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip_with(Op::Sub { a, b }, a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, EngineError> {
        self.zip_with(Op::Mul { a, b }, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = self.nodes[a.0].value.scaled(factor);
        self.push(Op::Scale { a, factor }, value, &[a])
    }

    /// Adds `bias` (c) to every row of `m` (r × c), or to a vector `m` (c).
    pub fn add_row_bias(&mut self, m: Var, bias: Var) -> Result<Var, EngineError> {
        self.check(&[m, bias])?;
        let c = self.vector_len("add_row_bias", bias)?;
        let mt = &self.nodes[m.0].value;
        if mt.cols() != c || mt.rank() > 2 {
            return Err(mismatch("add_row_bias", format!("{:?} + ({c})", mt.shape())));
        }
        let bd = self.nodes[bias.0].value.data();
        let mut value = mt.clone();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, b) in chunk.iter_mut().zip(bd) {
                *x += b;
            }
        }
        self.push(Op::AddRowBias { m, bias }, value, &[m, bias])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh { a }, value, &[a])
    }

    /// Softmax over all elements of `a` (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = softmax(&self.nodes[a.0].value);
        self.push(Op::Softmax { a }, value, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let t = &self.nodes[a.0].value;
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + t.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = t.map(|v| v - lse);
        self.push(Op::LogSoftmax { a }, value, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = self.nodes[a.0].value.map(f64::ln);
        self.push(Op::Log { a }, value, &[a])
    }

    /// `KL[p ‖ q] = Σ p_i (ln p_i − ln q_i)` with `0 · ln 0 = 0`.
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var, EngineError> {
        self.check(&[p, q])?;
        self.same_shape("kl_div", p, q)?;
        let (tp, tq) = (&self.nodes[p.0].value, &self.nodes[q.0].value);
        let kl = kl_divergence(tp.data(), tq.data());
        self.push(Op::KlDiv { p, q }, Tensor::scalar(kl), &[p, q])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = Tensor::scalar(self.nodes[a.0].value.l2_norm());
        self.push(Op::L2Norm { a }, value, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = Tensor::scalar(self.nodes[a.0].value.data().iter().sum());
        self.push(Op::Sum { a }, value, &[a])
    }

    /// Selects a single element by flat index.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let t = &self.nodes[a.0].value;
        if index >= t.len() {
            return Err(EngineError::IndexOutOfRange { op: "pick", index, extent: t.len() });
        }
        let value = Tensor::scalar(t.data()[index]);
        self.push(Op::Pick { a, index }, value, &[a])
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var, EngineError> {
        self.check(rows)?;
        if rows.is_empty() {
            return Err(mismatch("stack", "no rows".into()));
        }
        let c = self.vector_len("stack", rows[0])?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if self.vector_len("stack", r)? != c {
                return Err(mismatch("stack", "rows differ in length".into()));
            }
            data.extend_from_slice(self.nodes[r.0].value.data());
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        self.push(Op::Stack { rows: rows.to_vec() }, value, rows)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, EngineError> {
        self.check(&[a])?;
        let value = self.nodes[a.0].value.clone().reshaped(shape)?;
        self.push(Op::Reshape { a }, value, &[a])
    }

    /// Column-wise max over row ranges of `c` (rows × cols). Output is the
    /// flat vector `[seg0 cols.., seg1 cols.., ...]`. An empty range yields 0
    /// and passes no gradient. Ties resolve to the first row.
    pub fn segment_max_pool(&mut self, c: Var, segments: &[Range<usize>]) -> Result<Var, EngineError> {
        self.check(&[c])?;
        let (rows, cols) = self.matrix_dims("segment_max_pool", c)?;
        if segments.is_empty() {
            return Err(mismatch("segment_max_pool", "no segments".into()));
        }
        let t = &self.nodes[c.0].value;
        let mut out = vec![0.0; segments.len() * cols];
        let mut argmax = vec![None; segments.len() * cols];
        let mut gaps = vec![f64::INFINITY; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            if seg.end > rows {
                return Err(EngineError::IndexOutOfRange {
                    op: "segment_max_pool",
                    index: seg.end - 1,
                    extent: rows,
                });
            }
            if seg.is_empty() {
                continue;
            }
            for k in 0..cols {
                let mut best = seg.start;
                let mut best_v = t.at(best, k);
                let mut second = f64::NEG_INFINITY;
                for r in seg.start + 1..seg.end {
                    let v = t.at(r, k);
                    if v > best_v {
                        second = best_v;
                        best_v = v;
                        best = r;
                    } else if v > second {
                        second = v;
                    }
                }
                out[s * cols + k] = best_v;
                argmax[s * cols + k] = Some(best);
                gaps[s * cols + k] = best_v - second;
            }
        }
        let value = Tensor::vector(out);
        self.push(Op::SegmentMaxPool { c, argmax, gaps }, value, &[c])
    }

    /// Winning rows of every max-pool node on the tape, in recording order.
    pub fn pool_routing(&self) -> Vec<Option<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::SegmentMaxPool { argmax, .. } => Some(argmax.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Smallest gap between the winner and runner-up across all pools.
    pub fn min_pool_gap(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::SegmentMaxPool { gaps, .. } => Some(gaps.iter().copied()),
                _ => None,
            })
            .flatten()
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, EngineError> {
        let out = self.node(output)?;
        if !out.value.is_scalar() {
            return Err(EngineError::NotScalar { shape: out.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::filled(out.value.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let acc = slot(grads, *table, val(*table));
                    let cols = acc.cols();
                    for (k, &id) in ids.iter().enumerate() {
                        let src = &g.data()[k * cols..(k + 1) * cols];
                        for (a, b) in acc.row_mut(id).iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let acc = slot(grads, p, val(p));
                        for r in 0..acc.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + w];
                            for (a, b) in acc.row_mut(r).iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Unfold { x, width } => {
                if wants(*x) {
                    let acc = slot(grads, *x, val(*x));
                    let (l, d) = (acc.rows(), acc.cols());
                    let half = (width - 1) / 2;
                    let gd = g.data();
                    let ad = acc.data_mut();
                    for t in 0..l {
                        for j in 0..*width {
                            let s = t + j;
                            if s < half || s - half >= l {
                                continue;
                            }
                            let s = s - half;
                            let src = t * width * d + j * d;
                            for c in 0..d {
                                ad[s * d + c] += gd[src + c];
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let gd = g.data();
                if wants(*a) {
                    let bd = tb.data();
                    let acc = slot(grads, *a, ta).data_mut();
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            acc[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if wants(*b) {
                    let ad = ta.data();
                    let acc = slot(grads, *b, tb).data_mut();
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in acc[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                }
            }
            Op::MatVec { m, v } => {
                let (tm, tv) = (val(*m), val(*v));
                let gd = g.data();
                if wants(*m) {
                    let acc = slot(grads, *m, tm);
                    for (i, gi) in gd.iter().enumerate() {
                        for (a, x) in acc.row_mut(i).iter_mut().zip(tv.data()) {
                            *a += gi * x;
                        }
                    }
                }
                if wants(*v) {
                    let acc = slot(grads, *v, tv).data_mut();
                    for (i, gi) in gd.iter().enumerate() {
                        for (a, x) in acc.iter_mut().zip(tm.row(i)) {
                            *a += gi * x;
                        }
                    }
                }
            }
            Op::VecMat { v, m } => {
                let (tv, tm) = (val(*v), val(*m));
                let gd = g.data();
                if wants(*v) {
                    let acc = slot(grads, *v, tv).data_mut();
                    for (i, a) in acc.iter_mut().enumerate() {
                        *a += tm.row(i).iter().zip(gd).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if wants(*m) {
                    let acc = slot(grads, *m, tm);
                    for (i, w) in tv.data().iter().enumerate() {
                        for (a, gv) in acc.row_mut(i).iter_mut().zip(gd) {
                            *a += w * gv;
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if wants(v) {
                        slot(grads, v, val(v)).axpy(1.0, g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).axpy(1.0, g);
                }
                if wants(*b) {
                    slot(grads, *b, val(*b)).axpy(-1.0, g);
                }
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(*a) {
                    let acc = slot(grads, *a, ta).data_mut();
                    for ((o, gv), y) in acc.iter_mut().zip(g.data()).zip(tb.data()) {
                        *o += gv * y;
                    }
                }
                if wants(*b) {
                    let acc = slot(grads, *b, tb).data_mut();
                    for ((o, gv), x) in acc.iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv * x;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).axpy(*factor, g);
                }
            }
            Op::AddRowBias { m, bias } => {
                if wants(*m) {
                    slot(grads, *m, val(*m)).axpy(1.0, g);
                }
                if wants(*bias) {
                    let acc = slot(grads, *bias, val(*bias)).data_mut();
                    let c = acc.len();
                    for chunk in g.data().chunks(c) {
                        for (a, x) in acc.iter_mut().zip(chunk) {
                            *a += x;
                        }
                    }
                }
            }
            Op::Tanh { a } => {
                if wants(*a) {
                    let acc = slot(grads, *a, val(*a)).data_mut();
                    for ((o, gv), y) in acc.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Softmax { a } => {
                if wants(*a) {
                    let y = node.value.data();
                    let dot: f64 = g.data().iter().zip(y).map(|(x, p)| x * p).sum();
                    let acc = slot(grads, *a, val(*a)).data_mut();
                    for ((o, gv), p) in acc.iter_mut().zip(g.data()).zip(y) {
                        *o += p * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                if wants(*a) {
                    let total: f64 = g.data().iter().sum();
                    let acc = slot(grads, *a, val(*a)).data_mut();
                    for ((o, gv), ly) in acc.iter_mut().zip(g.data()).zip(node.value.data()) {
                        *o += gv - ly.exp() * total;
                    }
                }
            }
            Op::Log { a } => {
                if wants(*a) {
                    let ta = val(*a);
                    let acc = slot(grads, *a, ta).data_mut();
                    for ((o, gv), x) in acc.iter_mut().zip(g.data()).zip(ta.data()) {
                        *o += gv / x;
                    }
                }
            }
            Op::KlDiv { p, q } => {
                let (tp, tq) = (val(*p), val(*q));
                let go = g.item();
                if wants(*p) {
                    let acc = slot(grads, *p, tp).data_mut();
                    for ((o, pi), qi) in acc.iter_mut().zip(tp.data()).zip(tq.data()) {
                        if *pi > 0.0 {
                            *o += go * (pi.ln() - qi.ln() + 1.0);
                        }
                    }
                }
                if wants(*q) {
                    let acc = slot(grads, *q, tq).data_mut();
                    for ((o, pi), qi) in acc.iter_mut().zip(tp.data()).zip(tq.data()) {
                        if *pi > 0.0 {
                            *o -= go * pi / qi;
                        }
                    }
                }
            }
            Op::L2Norm { a } => {
                if wants(*a) {
                    let norm = node.value.item();
                    if norm > 0.0 {
                        let ta = val(*a);
                        slot(grads, *a, ta).axpy(g.item() / norm, ta);
                    }
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let go = g.item();
                    for o in slot(grads, *a, val(*a)).data_mut() {
                        *o += go;
                    }
                }
            }
            Op::Pick { a, index } => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).data_mut()[*index] += g.item();
                }
            }
            Op::Stack { rows } => {
                let c = g.cols();
                for (i, &r) in rows.iter().enumerate() {
                    if wants(r) {
                        let acc = slot(grads, r, val(r)).data_mut();
                        for (o, x) in acc.iter_mut().zip(&g.data()[i * c..(i + 1) * c]) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if wants(*a) {
                    slot(grads, *a, val(*a)).axpy(1.0, g);
                }
            }
            Op::SegmentMaxPool { c, argmax, .. } => {
                if wants(*c) {
                    let acc = slot(grads, *c, val(*c));
                    let cols = acc.cols();
                    let ad = acc.data_mut();
                    for (flat, winner) in argmax.iter().enumerate() {
                        if let Some(row) = winner {
                            ad[row * cols + flat % cols] += g.data()[flat];
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, like: &Tensor) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

/// Max-subtracted softmax over all elements.
pub fn softmax(t: &Tensor) -> Tensor {
    let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = t.map(|v| (v - max).exp());
    let total: f64 = exps.data().iter().sum();
    exps.scaled(1.0 / total)
}

/// `Σ p_i (ln p_i − ln q_i)`, skipping `p_i = 0` terms.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` lies on a
    /// differentiable path to the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, or zeros shaped like `like` when none flowed.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    /// Captures the gradient at an intermediate node.
    pub fn tap(&self, graph: &Graph, v: Var) -> GradTap {
        GradTap { node: v, grad: self.get_or_zeros(v, graph.value(v)) }
    }
}

/// Gradient captured at a designated intermediate value.
#[derive(Debug, Clone, PartialEq)]
pub struct GradTap {
    pub node: Var,
    pub grad: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(mat(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = g.constant(mat(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn tanh_of_zero_and_uniform_softmax() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 3]));
        let t = g.tanh(z).unwrap();
        assert!(g.value(t).data().iter().all(|&v| v == 0.0));
        let v = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(v).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_and_product_gradients() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y = g.leaf(Tensor::scalar(5.0));
        let p = g.mul(x, y).unwrap();
        let grads = g.backward(p).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(y).unwrap().item(), 2.0);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(EngineError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![0.0, 1.0]));
        assert_eq!(g.log(a).unwrap_err(), EngineError::NonFinite { op: "log" });
    }

    #[test]
    fn backward_rejects_non_scalar_and_unknown_nodes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(a), Err(EngineError::NotScalar { .. })));
        let empty = Graph::new();
        assert!(matches!(empty.backward(a), Err(EngineError::UnknownNode { .. })));
    }

    #[test]
    fn max_pool_ties_route_to_first_row() {
        let mut g = Graph::new();
        let c = g.leaf(mat(&[vec![1.0], vec![1.0], vec![0.5]]));
        let h = g.segment_max_pool(c, &[0..2, 2..3, 3..3]).unwrap();
        assert_eq!(g.value(h).data(), &[1.0, 0.5, 0.0]);
        let s = g.sum(h).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(c).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(g.pool_routing(), vec![Some(0), Some(2), None]);
    }

    #[test]
    fn detached_values_stop_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let d = g.detach(x).unwrap();
        let y = g.mul(x, d).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn kl_closed_form() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let q = g.constant(Tensor::vector(vec![0.5, 0.5]));
        let kl = g.kl_div(p, q).unwrap();
        assert!((g.value(kl).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn unfold_windows() {
        let mut g = Graph::new();
        let x = g.constant(mat(&[vec![1.0], vec![2.0], vec![3.0]]));
        let u = g.unfold(x, 3).unwrap();
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 2.0, 1.0, 2.0, 3.0, 2.0, 3.0, 0.0]);
        assert!(g.unfold(x, 2).is_err());
    }
}
