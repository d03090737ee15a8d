//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward
//! value, and [`Graph::backward`] walks the tape in reverse accumulating
//! adjoints. Vectors are `1 × n` matrices and scalars are `1 × 1`.
//!
//! Batched attention uses a stacked-block convention: a matrix with `n·p`
//! rows is read as `n` consecutive `p`-row blocks.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis, Zip};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    NllMean { x: Var, targets: Vec<usize> },
    MeanAll(Var),
    SumAll(Var),
    Gather { x: Var, index: Vec<usize> },
    RowGroupMean { x: Var, groups: Vec<(usize, usize)> },
    BatchedMatMul { a: Var, b: Var, blocks: usize },
    BatchedMatMulNT { a: Var, b: Var, blocks: usize },
    ConvValid { x: Var, kernel: Var, channels: usize },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Adjoints for every node of a graph, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Trainable leaf. Gradients for all leaves sharing `name` are summed by
    /// [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: &Array2<f64>) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(y, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(y, Op::MatMulNT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) - self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Mul(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let y = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(y, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 × n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a single row");
        let y = self.value(a) * self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(y, Op::MulRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) * c;
        let rg = self.rg(&[a]);
        self.push(y, Op::Scale(a, c), rg)
    }

    /// Multiplies `a` by the `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let y = self.value(a) * sv;
        let rg = self.rg(&[a, s]);
        self.push(y, Op::MulScalar(a, s), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        let rg = self.rg(&[a]);
        self.push(y, Op::Exp(a), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(gelu);
        let rg = self.rg(&[a]);
        self.push(y, Op::Gelu(a), rg)
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut y = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push(y, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Scales each row to unit Euclidean norm. Zero rows produce NaN; callers
    /// are expected to reject them beforehand.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        let mut norms = Vec::with_capacity(x.nrows());
        for mut row in y.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        self.push(y, Op::NormalizeRows { x: a, norms }, rg)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let y = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(y, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|v| v - lse);
        }
        let rg = self.rg(&[a]);
        self.push(y, Op::LogSoftmax(a), rg)
    }

    /// `-(1/B) Σ_i x[i, targets[i]]`.
    pub fn nll_mean(&mut self, a: Var, targets: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.nrows(), targets.len());
        let b = targets.len() as f64;
        let s: f64 = targets.iter().enumerate().map(|(i, &t)| x[[i, t]]).sum();
        let y = Array2::from_elem((1, 1), -s / b);
        let rg = self.rg(&[a]);
        self.push(y, Op::NllMean { x: a, targets }, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let y = Array2::from_elem((1, 1), x.sum() / x.len() as f64);
        let rg = self.rg(&[a]);
        self.push(y, Op::MeanAll(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let y = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(y, Op::SumAll(a), rg)
    }

    /// Builds a `rows × cols` matrix whose `k`-th element (row-major) is the
    /// `index[k]`-th element (row-major) of `a`. Covers reshapes, transposes,
    /// slices and tiling.
    pub fn gather(&mut self, a: Var, rows: usize, cols: usize, index: Vec<usize>) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let src = self.value(a);
        let flat = src.as_slice().expect("graph values are standard layout");
        let data: Vec<f64> = index.iter().map(|&i| flat[i]).collect();
        let y = Array2::from_shape_vec((rows, cols), data).expect("gather shape");
        let rg = self.rg(&[a]);
        self.push(y, Op::Gather { x: a, index }, rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(r * c, rows * cols, "reshape size");
        self.gather(a, rows, cols, (0..rows * cols).collect())
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let index = (0..c)
            .flat_map(|j| (0..r).map(move |i| i * c + j))
            .collect();
        self.gather(a, c, r, index)
    }

    /// Copies rows `start..start + len`.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let c = self.shape(a).1;
        self.gather(a, len, c, (start * c..(start + len) * c).collect())
    }

    /// Each output row is the mean of the input rows `start..start + len`.
    pub fn row_group_mean(&mut self, a: Var, groups: Vec<(usize, usize)>) -> Var {
        let x = self.value(a);
        let mut y = Array2::zeros((groups.len(), x.ncols()));
        for (g, &(start, len)) in groups.iter().enumerate() {
            let mut out = y.row_mut(g);
            for r in start..start + len {
                out += &x.row(r);
            }
            out.mapv_inplace(|v| v / len as f64);
        }
        let rg = self.rg(&[a]);
        self.push(y, Op::RowGroupMean { x: a, groups }, rg)
    }

    /// Block `i` of the output is `A_i · B_i` for `blocks` stacked blocks.
    pub fn batched_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q, r) = (av.nrows() / blocks, bv.nrows() / blocks, bv.ncols());
        assert_eq!(av.ncols(), q, "batched_matmul inner dimension");
        let mut y = Array2::zeros((blocks * p, r));
        for i in 0..blocks {
            let ab = av.slice(ndarray::s![i * p..(i + 1) * p, ..]);
            let bb = bv.slice(ndarray::s![i * q..(i + 1) * q, ..]);
            y.slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
                .assign(&ab.dot(&bb));
        }
        let rg = self.rg(&[a, b]);
        self.push(y, Op::BatchedMatMul { a, b, blocks }, rg)
    }

    /// Block `i` of the output is `A_i · B_iᵀ`.
    pub fn batched_matmul_nt(&mut self, a: Var, b: Var, blocks: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (p, q) = (av.nrows() / blocks, bv.nrows() / blocks);
        assert_eq!(av.ncols(), bv.ncols(), "batched_matmul_nt width");
        let mut y = Array2::zeros((blocks * p, q));
        for i in 0..blocks {
            let ab = av.slice(ndarray::s![i * p..(i + 1) * p, ..]);
            let bb = bv.slice(ndarray::s![i * q..(i + 1) * q, ..]);
            y.slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
                .assign(&ab.dot(&bb.t()));
        }
        let rg = self.rg(&[a, b]);
        self.push(y, Op::BatchedMatMulNT { a, b, blocks }, rg)
    }

    /// Valid multichannel 1-D convolution. `x` stacks `B` inputs of
    /// `channels` rows each, `(B·C) × T`; `kernel` is `(C·K) × S` with row
    /// `c·K + k`. Output row `b·T1 + t` is
    /// `Σ_{c,k} x[b·C + c, t + k] · kernel[c·K + k, :]`, `T1 = T − K + 1`.
    pub fn conv_valid(&mut self, x: Var, channels: usize, kernel: Var) -> Var {
        let (xv, kv) = (self.value(x), self.value(kernel));
        assert_eq!(xv.nrows() % channels, 0, "conv_valid input rows");
        assert_eq!(kv.nrows() % channels, 0, "conv_valid kernel rows");
        let k = kv.nrows() / channels;
        assert!(k <= xv.ncols(), "conv_valid kernel longer than input");
        let b = xv.nrows() / channels;
        let t1 = xv.ncols() - k + 1;
        let mut y = Array2::zeros((b * t1, kv.ncols()));
        for bi in 0..b {
            let u = unfold(xv, bi, channels, k);
            y.slice_mut(ndarray::s![bi * t1..(bi + 1) * t1, ..])
                .assign(&u.dot(kv));
        }
        let rg = self.rg(&[x, kernel]);
        self.push(y, Op::ConvValid { x, kernel, channels }, rg)
    }

    /// Reverse sweep from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let y = &self.nodes[idx].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, d: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &d,
                slot => *slot = Some(d),
            }
        };
        let wants = |v: Var| self.nodes[v.0].requires_grad;

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(&val(*b).t()));
                }
                if wants(*b) {
                    acc(*b, val(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if wants(*a) {
                    acc(*a, g.dot(val(*b)));
                }
                if wants(*b) {
                    acc(*b, g.t().dot(val(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g * val(*b));
                }
                if wants(*b) {
                    acc(*b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, g.clone());
                if wants(*r) {
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if wants(*a) {
                    acc(*a, g * val(*r));
                }
                if wants(*r) {
                    acc(*r, (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, c) => acc(*a, g * *c),
            Op::MulScalar(a, s) => {
                let sv = val(*s)[[0, 0]];
                if wants(*a) {
                    acc(*a, g * sv);
                }
                if wants(*s) {
                    let d = (g * val(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), d));
                }
            }
            Op::Exp(a) => acc(*a, g * y),
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(gelu_grad);
                d *= g;
                acc(*a, d);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = y.ncols() as f64;
                let mut d = Array2::zeros(y.dim());
                for (r, mut out) in d.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.dot(&yr) / n;
                    Zip::from(&mut out)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gv, &yv| *o = inv_std[r] * (gv - mean_g - yv * mean_gy));
                }
                acc(*x, d);
            }
            Op::NormalizeRows { x, norms } => {
                let mut d = Array2::zeros(y.dim());
                for (r, mut out) in d.rows_mut().into_iter().enumerate() {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gy = gr.dot(&yr);
                    Zip::from(&mut out)
                        .and(&gr)
                        .and(&yr)
                        .for_each(|o, &gv, &yv| *o = (gv - yv * gy) / norms[r]);
                }
                acc(*x, d);
            }
            Op::Softmax(a) => {
                let mut d = g * y;
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let s = g.row(r).dot(&y.row(r));
                    Zip::from(&mut row)
                        .and(&y.row(r))
                        .for_each(|o, &yv| *o -= yv * s);
                }
                acc(*a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    let s = g.row(r).sum();
                    Zip::from(&mut row)
                        .and(&y.row(r))
                        .for_each(|o, &yv| *o -= yv.exp() * s);
                }
                acc(*a, d);
            }
            Op::NllMean { x, targets } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut d = Array2::zeros(val(*x).dim());
                for (i, &t) in targets.iter().enumerate() {
                    d[[i, t]] -= scale;
                }
                acc(*x, d);
            }
            Op::MeanAll(a) => {
                let v = val(*a);
                acc(*a, Array2::from_elem(v.dim(), g[[0, 0]] / v.len() as f64));
            }
            Op::SumAll(a) => acc(*a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
            Op::Gather { x, index } => {
                let src = val(*x);
                let mut d = Array2::<f64>::zeros(src.dim());
                {
                    let flat = d.as_slice_mut().expect("standard layout");
                    let gs = g.as_slice().expect("standard layout");
                    for (k, &i) in index.iter().enumerate() {
                        flat[i] += gs[k];
                    }
                }
                acc(*x, d);
            }
            Op::RowGroupMean { x, groups } => {
                let mut d = Array2::zeros(val(*x).dim());
                for (gi, &(start, len)) in groups.iter().enumerate() {
                    let share = g.row(gi).mapv(|v| v / len as f64);
                    for r in start..start + len {
                        let mut row = d.row_mut(r);
                        row += &share;
                    }
                }
                acc(*x, d);
            }
            Op::BatchedMatMul { a, b, blocks } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (av.nrows() / blocks, bv.nrows() / blocks);
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for i in 0..*blocks {
                    let gb = g.slice(ndarray::s![i * p..(i + 1) * p, ..]);
                    let ab = av.slice(ndarray::s![i * p..(i + 1) * p, ..]);
                    let bb = bv.slice(ndarray::s![i * q..(i + 1) * q, ..]);
                    da.slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
                        .assign(&gb.dot(&bb.t()));
                    db.slice_mut(ndarray::s![i * q..(i + 1) * q, ..])
                        .assign(&ab.t().dot(&gb));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::BatchedMatMulNT { a, b, blocks } => {
                let (av, bv) = (val(*a), val(*b));
                let (p, q) = (av.nrows() / blocks, bv.nrows() / blocks);
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for i in 0..*blocks {
                    let gb = g.slice(ndarray::s![i * p..(i + 1) * p, ..]);
                    let ab = av.slice(ndarray::s![i * p..(i + 1) * p, ..]);
                    let bb = bv.slice(ndarray::s![i * q..(i + 1) * q, ..]);
                    da.slice_mut(ndarray::s![i * p..(i + 1) * p, ..])
                        .assign(&gb.dot(&bb));
                    db.slice_mut(ndarray::s![i * q..(i + 1) * q, ..])
                        .assign(&gb.t().dot(&ab));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::ConvValid { x, kernel, channels } => {
                let (xv, kv) = (val(*x), val(*kernel));
                let c = *channels;
                let k = kv.nrows() / c;
                let b = xv.nrows() / c;
                let t1 = xv.ncols() - k + 1;
                if wants(*kernel) {
                    let mut dk = Array2::zeros(kv.dim());
                    for bi in 0..b {
                        let u = unfold(xv, bi, c, k);
                        dk += &u.t().dot(&g.slice(ndarray::s![bi * t1..(bi + 1) * t1, ..]));
                    }
                    acc(*kernel, dk);
                }
                if wants(*x) {
                    let mut dx = Array2::zeros(xv.dim());
                    for bi in 0..b {
                        let du = g.slice(ndarray::s![bi * t1..(bi + 1) * t1, ..]).dot(&kv.t());
                        for ci in 0..c {
                            for t in 0..t1 {
                                for kk in 0..k {
                                    dx[[bi * c + ci, t + kk]] += du[[t, ci * k + kk]];
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                }
            }
        }
    }

    /// Gradients of every named parameter leaf, summed over repeated uses.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Array2<f64>> {
        let mut out: BTreeMap<String, Array2<f64>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(name) = &node.param else { continue };
            let g = grads.grads[i]
                .clone()
                .unwrap_or_else(|| Array2::zeros(node.value.dim()));
            match out.get_mut(name) {
                Some(existing) => *existing += &g,
                None => {
                    out.insert(name.clone(), g);
                }
            }
        }
        out
    }
}

/// `T1 × (C·K)` patch matrix of input `b`.
fn unfold(x: &Array2<f64>, b: usize, channels: usize, k: usize) -> Array2<f64> {
    let t1 = x.ncols() - k + 1;
    let mut u = Array2::zeros((t1, channels * k));
    for c in 0..channels {
        let row = x.row(b * channels + c);
        for t in 0..t1 {
            for kk in 0..k {
                u[[t, c * k + kk]] = row[t + kk];
            }
        }
    }
    u
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}
