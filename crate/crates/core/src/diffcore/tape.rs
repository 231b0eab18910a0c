use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::math;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ragged lists of item ids, stored flat.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RaggedIds {
    offsets: Vec<usize>,
    items: Vec<usize>,
}

impl RaggedIds {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            items: Vec::new(),
        }
    }

    pub fn from_lists<L: AsRef<[usize]>>(lists: &[L]) -> Self {
        let mut out = Self::new();
        for l in lists {
            out.push(l.as_ref());
        }
        out
    }

    pub fn push(&mut self, list: &[usize]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.items.extend_from_slice(list);
        self.offsets.push(self.items.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.items[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[usize]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    fn max_item(&self) -> Option<usize> {
        self.items.iter().copied().max()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    LogAddExp(Var, Var),
    EmbedWindow {
        table: Var,
        ids: Vec<Option<usize>>,
        width: usize,
    },
    EmbedMean {
        table: Var,
        lists: RaggedIds,
    },
    SlateLogProb {
        query: Var,
        table: Var,
        slates: RaggedIds,
        picks: Vec<usize>,
        probs: Vec<f64>,
    },
    PlackettLuce {
        query: Var,
        table: Var,
        slates: RaggedIds,
        scores: Matrix,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::RowSum(..) => "row_sum",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows(..) => "gather_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::LogAddExp(..) => "log_add_exp",
            Op::EmbedWindow { .. } => "embed_window",
            Op::EmbedMean { .. } => "embed_mean",
            Op::SlateLogProb { .. } => "slate_log_prob",
            Op::PlackettLuce { .. } => "plackett_luce",
        }
    }
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Dynamically recorded computation graph for reverse-mode gradients.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every tape node that needed them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was not reached.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, value: Matrix, op: Op) -> Var {
        let n = self.needs(a);
        self.push(value, op, n)
    }

    fn binary(&mut self, a: Var, b: Var, value: Matrix, op: Op) -> Var {
        let n = self.needs(a) || self.needs(b);
        self.push(value, op, n)
    }

    fn same_shape(&self, a: Var, b: Var, what: &'static str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{what}: operand shapes differ"
        );
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// Adds a `1 × m` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a).add_row_broadcast(self.value(bias));
        self.binary(a, bias, v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.binary(a, b, v, Op::Div(a, b))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.unary(a, v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::tanh);
        self.unary(a, v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.unary(a, v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::exp);
        self.unary(a, v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::ln);
        self.unary(a, v, Op::Ln(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::softplus);
        self.unary(a, v, Op::Softplus(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.unary(a, v, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.unary(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = (m.rows() * m.cols()).max(1) as f64;
        let v = Matrix::scalar(m.sum() / n);
        self.unary(a, v, Op::Mean(a))
    }

    /// Per-row sums, `b × m → b × 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::column((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        self.unary(a, v, Op::RowSum(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.unary(a, v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        let n = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), n)
    }

    /// Row `i` of the result is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).gather_rows(&idx);
        self.unary(a, v, Op::GatherRows(a, idx))
    }

    /// Sums the rows of `a` into `n_segments` rows; row `r` goes to
    /// `segment[r]`. Segments with no rows are zero.
    pub fn segment_sum(&mut self, a: Var, segment: Vec<usize>, n_segments: usize) -> Var {
        let m = self.value(a);
        assert_eq!(segment.len(), m.rows(), "segment_sum: one segment id per row");
        let mut v = Matrix::zeros(n_segments, m.cols());
        for (r, &s) in segment.iter().enumerate() {
            for (o, x) in v.row_mut(s).iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        self.unary(a, v, Op::SegmentSum(a, segment))
    }

    /// Elementwise `ln(e^a + e^b)`.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "log_add_exp");
        let v = self.value(a).zip_map(self.value(b), math::log_add_exp);
        self.binary(a, b, v, Op::LogAddExp(a, b))
    }

    /// Concatenated embeddings of fixed-width id windows. `ids` holds
    /// `rows × width` entries; `None` is padding and embeds to zeros.
    pub fn embed_window(&mut self, table: Var, ids: Vec<Option<usize>>, width: usize) -> Var {
        let t = self.value(table);
        let d = t.cols();
        assert!(width > 0 && ids.len() % width == 0, "embed_window: ragged ids");
        let rows = ids.len() / width;
        let mut v = Matrix::zeros(rows, width * d);
        for r in 0..rows {
            let out = v.row_mut(r);
            for w in 0..width {
                if let Some(id) = ids[r * width + w] {
                    out[w * d..(w + 1) * d].copy_from_slice(t.row(id));
                }
            }
        }
        self.unary(table, v, Op::EmbedWindow { table, ids, width })
    }

    /// Mean embedding of each id list; empty lists give zeros.
    pub fn embed_mean(&mut self, table: Var, lists: RaggedIds) -> Var {
        let t = self.value(table);
        let d = t.cols();
        let mut v = Matrix::zeros(lists.len(), d);
        for (r, l) in lists.iter().enumerate() {
            if l.is_empty() {
                continue;
            }
            let inv = 1.0 / l.len() as f64;
            let out = v.row_mut(r);
            for &id in l {
                for (o, x) in out.iter_mut().zip(t.row(id)) {
                    *o += inv * x;
                }
            }
        }
        self.unary(table, v, Op::EmbedMean { table, lists })
    }

    /// Log-probability of `picks[r]` under a softmax over slate `r`, with
    /// item scores `⟨query_r, table[item]⟩`. Output is `b × 1`.
    pub fn slate_log_prob(
        &mut self,
        query: Var,
        table: Var,
        slates: RaggedIds,
        picks: Vec<usize>,
    ) -> Var {
        let q = self.value(query);
        let t = self.value(table);
        assert_eq!(slates.len(), q.rows(), "slate_log_prob: one slate per row");
        assert_eq!(picks.len(), q.rows(), "slate_log_prob: one pick per row");
        let mut out = Vec::with_capacity(q.rows());
        let mut probs = Vec::with_capacity(slates.items.len());
        for (r, slate) in slates.iter().enumerate() {
            let scores: Vec<f64> = slate.iter().map(|&i| math::dot(q.row(r), t.row(i))).collect();
            let lse = math::log_sum_exp(&scores);
            let pos = slate
                .iter()
                .position(|&i| i == picks[r])
                .expect("slate_log_prob: pick not in slate");
            out.push(scores[pos] - lse);
            probs.extend(scores.iter().map(|s| math::exp(s - lse)));
        }
        let n = self.needs(query) || self.needs(table);
        self.push(
            Matrix::column(out),
            Op::SlateLogProb {
                query,
                table,
                slates,
                picks,
                probs,
            },
            n,
        )
    }

    /// Plackett–Luce log-probability of each ordered slate, with catalog
    /// scores `query · tableᵀ`. Output is `b × 1`.
    pub fn plackett_luce_log_prob(&mut self, query: Var, table: Var, slates: RaggedIds) -> Var {
        let scores = self.value(query).matmul_t(self.value(table));
        assert_eq!(slates.len(), scores.rows(), "plackett_luce: one slate per row");
        let out: Vec<f64> = slates
            .iter()
            .enumerate()
            .map(|(r, s)| plackett_luce_log_prob_row(scores.row(r), s))
            .collect();
        let n = self.needs(query) || self.needs(table);
        self.push(
            Matrix::column(out),
            Op::PlackettLuce {
                query,
                table,
                slates,
                scores,
            },
            n,
        )
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::DimensionMismatch {
                what: "backward: loss must be 1 × 1",
                expected: 1,
                got: lv.rows() * lv.cols(),
            });
        }
        if !lv.is_finite() {
            let node = (0..=loss.0)
                .find(|&i| !self.nodes[i].value.is_finite())
                .unwrap_or(loss.0);
            return Err(Error::NonFinite {
                op: self.nodes[node].op.name(),
                node,
            });
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let mut gb = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x * y));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(av, |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |x, y| x / y));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let gy = g.zip_map(y, |x, q| -x * q);
                    self.accumulate(grads, *b, gy.zip_map(bv, |x, y| x / y));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |x, t| x * (1.0 - t * t))),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |x, v| if v > 0.0 { x } else { 0.0 }));
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |x, e| x * e)),
            Op::Ln(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |x, v| x / v));
            }
            Op::Softplus(a) => {
                let av = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(av, |x, v| x * math::sigmoid(v)));
            }
            Op::Clamp(a, lo, hi) => {
                let av = self.value(*a);
                let (lo, hi) = (*lo, *hi);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(av, |x, v| if v >= lo && v <= hi { x } else { 0.0 }),
                );
            }
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                let n = (r * c).max(1) as f64;
                self.accumulate(grads, *a, Matrix::filled(r, c, g.item() / n));
            }
            Op::RowSum(a) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.get(i, 0);
                    ga.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, w));
                    }
                    start += w;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SegmentSum(a, segment) => {
                self.accumulate(grads, *a, g.gather_rows(segment));
            }
            Op::LogAddExp(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let w = av.zip_map(y, |x, o| math::exp(x - o));
                    self.accumulate(grads, *a, g.zip_map(&w, |x, y| x * y));
                }
                if self.needs(*b) {
                    let w = bv.zip_map(y, |x, o| math::exp(x - o));
                    self.accumulate(grads, *b, g.zip_map(&w, |x, y| x * y));
                }
            }
            Op::EmbedWindow { table, ids, width } => {
                let (n, d) = self.value(*table).shape();
                let mut gt = Matrix::zeros(n, d);
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    for w in 0..*width {
                        if let Some(id) = ids[r * width + w] {
                            for (o, x) in gt.row_mut(id).iter_mut().zip(&gr[w * d..(w + 1) * d]) {
                                *o += x;
                            }
                        }
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::EmbedMean { table, lists } => {
                let (n, d) = self.value(*table).shape();
                let mut gt = Matrix::zeros(n, d);
                for (r, l) in lists.iter().enumerate() {
                    if l.is_empty() {
                        continue;
                    }
                    let inv = 1.0 / l.len() as f64;
                    for &id in l {
                        for (o, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *o += inv * x;
                        }
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SlateLogProb {
                query,
                table,
                slates,
                picks,
                probs,
            } => {
                let q = self.value(*query);
                let t = self.value(*table);
                let mut gq = Matrix::zeros(q.rows(), q.cols());
                let mut gt = Matrix::zeros(t.rows(), t.cols());
                let mut k = 0;
                for (r, slate) in slates.iter().enumerate() {
                    let gr = g.get(r, 0);
                    for &item in slate {
                        let ds = gr * (if item == picks[r] { 1.0 } else { 0.0 } - probs[k]);
                        k += 1;
                        if ds == 0.0 {
                            continue;
                        }
                        for (o, x) in gq.row_mut(r).iter_mut().zip(t.row(item)) {
                            *o += ds * x;
                        }
                        for (o, x) in gt.row_mut(item).iter_mut().zip(q.row(r)) {
                            *o += ds * x;
                        }
                    }
                }
                if self.needs(*query) {
                    self.accumulate(grads, *query, gq);
                }
                if self.needs(*table) {
                    self.accumulate(grads, *table, gt);
                }
            }
            Op::PlackettLuce {
                query,
                table,
                slates,
                scores,
            } => {
                let mut gs = Matrix::zeros(scores.rows(), scores.cols());
                for (r, slate) in slates.iter().enumerate() {
                    plackett_luce_score_grad(scores.row(r), slate, g.get(r, 0), gs.row_mut(r));
                }
                if self.needs(*query) {
                    self.accumulate(grads, *query, gs.matmul(self.value(*table)));
                }
                if self.needs(*table) {
                    self.accumulate(grads, *table, gs.t_matmul(self.value(*query)));
                }
            }
        }
    }

    /// Rejects ids that fall outside `table`.
    pub fn check_ids(&self, table: Var, ids: &RaggedIds) -> Result<()> {
        let n = self.value(table).rows();
        match ids.max_item() {
            Some(m) if m >= n => Err(Error::InvalidArgument(alloc::format!(
                "item id {m} outside table of {n} rows"
            ))),
            _ => Ok(()),
        }
    }
}

/// Σ_t [s(a_t) − ln Σ_{i ∈ remaining_t} e^{s(i)}] for one ordered slate.
pub fn plackett_luce_log_prob_row(scores: &[f64], slate: &[usize]) -> f64 {
    let mut remaining = vec![true; scores.len()];
    let mut total = 0.0;
    for &a in slate {
        let lse = masked_lse(scores, &remaining);
        total += scores[a] - lse;
        remaining[a] = false;
    }
    total
}

fn masked_lse(scores: &[f64], mask: &[bool]) -> f64 {
    let m = scores
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = scores
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&s, _)| math::exp(s - m))
        .sum();
    m + math::ln(s)
}

fn plackett_luce_score_grad(scores: &[f64], slate: &[usize], upstream: f64, out: &mut [f64]) {
    if upstream == 0.0 {
        return;
    }
    let mut remaining = vec![true; scores.len()];
    for &a in slate {
        let lse = masked_lse(scores, &remaining);
        for (i, o) in out.iter_mut().enumerate() {
            if remaining[i] {
                *o -= upstream * math::exp(scores[i] - lse);
            }
        }
        out[a] += upstream;
        remaining[a] = false;
    }
}
