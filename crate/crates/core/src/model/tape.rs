//! A minimal reverse-mode differentiation tape over dense row-major
//! matrices. Parameters enter the tape as views of a flat vector and their
//! gradients are accumulated back into a flat vector of the same layout.

use crate::error::{RdarError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix shape mismatch");
        Matrix { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn add_assign(&mut self, o: &Matrix) {
        debug_assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a · b`
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(b.row(p)) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`, through an explicit transpose so the inner loop vectorizes.
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let mut bt = Matrix::zeros(b.cols, b.rows);
    for r in 0..b.rows {
        for (c, &v) in b.row(r).iter().enumerate() {
            bt.data[c * b.rows + r] = v;
        }
    }
    matmul(a, &bt)
}

/// `aᵀ · b`
fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    let mut out = Matrix::zeros(a.cols, b.cols);
    for p in 0..a.rows {
        let br = b.row(p);
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    /// `a + b` with `b` a single row broadcast over the rows of `a`.
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Tanh(NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    /// Mean over rows; zero rows give a zero row of `cols` columns.
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(NodeId, NodeId),
    SliceRows(NodeId, usize),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
    /// Whether any parameter lies upstream.
    needs_grad: bool,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    param_len: usize,
}

impl Tape {
    pub fn new(param_len: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(64),
            param_len,
        }
    }

    pub fn param_len(&self) -> usize {
        self.param_len
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let g = |i: &NodeId| self.nodes[*i].needs_grad;
        let needs_grad = match &op {
            Op::Input => false,
            Op::Param { .. } => true,
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::ConcatCols(a, b) => {
                g(a) || g(b)
            }
            Op::Tanh(a) | Op::Scale(a, _) | Op::SoftmaxRows(a) | Op::MeanRows(a) | Op::SliceRows(a, _) => g(a),
            Op::ConcatRows(parts) => parts.iter().any(g),
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn input(&mut self, m: Matrix) -> NodeId {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> NodeId {
        let data = params[offset..offset + rows * cols].to_vec();
        self.push(Matrix::from_vec(rows, cols, data), Op::Param { offset })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(bias));
        assert!(bv.rows == 1 && bv.cols == av.cols, "bias shape");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, b) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut v = Matrix::zeros(1, av.cols);
        if av.rows > 0 {
            for r in 0..av.rows {
                for (o, x) in v.data.iter_mut().zip(av.row(r)) {
                    *o += x;
                }
            }
            let n = av.rows as f64;
            v.data.iter_mut().for_each(|x| *x /= n);
        }
        self.push(v, Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols, cols, "concat_rows width");
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat_cols height");
        let mut v = Matrix::zeros(av.rows, av.cols + bv.cols);
        for r in 0..av.rows {
            let row = v.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let av = self.value(a);
        let v = Matrix::from_vec(hi - lo, av.cols, av.data[lo * av.cols..hi * av.cols].to_vec());
        self.push(v, Op::SliceRows(a, lo))
    }

    /// Fails with a numeric error naming `layer` if node `id` holds a
    /// non-finite value.
    pub fn check(&self, id: NodeId, layer: &str) -> Result<()> {
        if self.value(id).is_finite() {
            Ok(())
        } else {
            Err(RdarError::numeric(layer))
        }
    }

    /// Back-propagates the given output gradients and returns the gradient
    /// with respect to the flat parameter vector.
    pub fn backward(&self, seeds: &[(NodeId, Matrix)]) -> Vec<f64> {
        let mut out = vec![0.0; self.param_len];
        self.backward_into(seeds, &mut out);
        out
    }

    /// As [`Tape::backward`], accumulating into `out`.
    pub fn backward_into(&self, seeds: &[(NodeId, Matrix)], out: &mut [f64]) {
        assert_eq!(out.len(), self.param_len, "gradient buffer length");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        let acc = |grads: &mut Vec<Option<Matrix>>, id: NodeId, g: Matrix| match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        for (id, g) in seeds {
            acc(&mut grads, *id, g.clone());
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (o, x) in out[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *o += x;
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[*a].needs_grad {
                        let ga = matmul_bt(&g, self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.nodes[*b].needs_grad {
                        let gb = matmul_at(self.value(*a), &g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_at(&g, self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let mut gb = Matrix::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, x) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&node.value.data) {
                        *x *= 1.0 - y * y;
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Scale(a, c) => {
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x *= c);
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for (o, (p, q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    if av.rows > 0 {
                        let n = av.rows as f64;
                        for r in 0..av.rows {
                            for (o, x) in ga.row_mut(r).iter_mut().zip(&g.data) {
                                *o = x / n;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let part = Matrix::from_vec(
                            rows,
                            g.cols,
                            g.data[start * g.cols..(start + rows) * g.cols].to_vec(),
                        );
                        acc(&mut grads, p, part);
                        start += rows;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(*a).cols;
                    let mut ga = Matrix::zeros(g.rows, ca);
                    let mut gb = Matrix::zeros(g.rows, g.cols - ca);
                    for r in 0..g.rows {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SliceRows(a, lo) => {
                    let av = self.value(*a);
                    let mut ga = Matrix::zeros(av.rows, av.cols);
                    ga.data[lo * av.cols..lo * av.cols + g.data.len()].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
            }
        }
    }
}
