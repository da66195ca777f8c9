//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation eagerly (values are computed at insertion
//! time) and `backward` walks the node list in reverse, accumulating gradients
//! for the leaves that requested them. Node ids are strictly increasing, so the
//! insertion order is already a topological order.
//!
//! Leaves come in two kinds: `param` (gradient accumulated) and `constant`
//! (no gradient ever computed, and no backward work spent on paths that only
//! reach constants - frozen encoder weights ride through for free).
//!
//! The op set is exactly what the encoder forward pass, the contrastive loss,
//! the guided-attention ensemble, and the policy heads need - nothing more.

use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// a @ b
    MatMul(usize, usize),
    /// a @ b.T
    MatMulNT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    /// elementwise product
    Mul(usize, usize),
    /// elementwise quotient
    Div(usize, usize),
    /// broadcast-add a 1xC row to every row of a
    AddRow(usize, usize),
    /// broadcast-multiply every row of a by a 1xC row
    MulRow(usize, usize),
    /// broadcast-multiply row i of a by col[i] (col is Rx1)
    MulCol(usize, usize),
    /// multiply a by a 1x1 scalar node
    MulScalar(usize, usize),
    ScaleConst(usize, f64),
    AddConst(usize),
    Neg(usize),
    ConcatRows(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
    ConcatCols(Vec<usize>),
    SoftmaxRows(usize),
    LogSumExpRows(usize),
    LayerNormRows(usize, f64),
    Tanh(usize),
    Gelu(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    /// mean over rows r0..r1, result 1xC
    MeanRows(usize, usize, usize),
    SumAll(usize),
    /// flattened dot product, result 1x1
    Dot(usize, usize),
    /// rowwise dot products, result Rx1
    RowDot(usize, usize),
    /// pick a[i, idx[i]] per row, result Rx1
    RowGather(usize, Vec<usize>),
    /// elementwise clamp; gradient passes only strictly inside the interval
    Clamp(usize, f64, f64),
    /// elementwise min of two tensors; ties route the gradient to the first
    MinElem(usize, usize),
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    let t = GELU_C * (x + GELU_A * x * x * x);
    let th = t.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn hadamard(a: &Mat, b: &Mat) -> Mat {
    Mat::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!((m.rows, m.cols), (1, 1));
        m.data[0]
    }

    #[inline]
    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulNT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatRows(a, b)
            | Op::Dot(a, b)
            | Op::RowDot(a, b) => self.needs(*a) || self.needs(*b),
            Op::ConcatCols(xs) => xs.iter().any(|&x| self.needs(x)),
            Op::ScaleConst(a, _)
            | Op::AddConst(a)
            | Op::Neg(a)
            | Op::SliceRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::SoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::LayerNormRows(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Sqrt(a)
            | Op::MeanRows(a, _, _)
            | Op::SumAll(a)
            | Op::RowGather(a, _)
            | Op::Clamp(a, _, _) => self.needs(*a),
            Op::MinElem(a, b) => self.needs(*a) || self.needs(*b),
        };
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient will be accumulated.
    pub fn param(&mut self, value: Mat) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].needs_grad = true;
        v
    }

    /// Leaf treated as a constant; backward never visits it.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul_nt(&self.nodes[b.0].value);
        self.push(Op::MatMulNT(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "add shape");
        let mut v = x.clone();
        v.add_assign(y);
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "sub shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p - q).collect();
        self.push(Op::Sub(a.0, b.0), Mat::from_vec(x.rows, x.cols, data))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "mul shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        self.push(Op::Mul(a.0, b.0), Mat::from_vec(x.rows, x.cols, data))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "div shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p / q).collect();
        self.push(Op::Div(a.0, b.0), Mat::from_vec(x.rows, x.cols, data))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, x.cols);
        let mut v = x.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                *v.at_mut(i, j) += r.data[j];
            }
        }
        self.push(Op::AddRow(a.0, row.0), v)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert_eq!(r.rows, 1);
        assert_eq!(r.cols, x.cols);
        let mut v = x.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                *v.at_mut(i, j) *= r.data[j];
            }
        }
        self.push(Op::MulRow(a.0, row.0), v)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        assert_eq!(c.cols, 1);
        assert_eq!(c.rows, x.rows);
        let mut v = x.clone();
        for i in 0..v.rows {
            for j in 0..v.cols {
                *v.at_mut(i, j) *= c.data[i];
            }
        }
        self.push(Op::MulCol(a.0, col.0), v)
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar_value(s);
        let v = self.nodes[a.0].value.scale(sv);
        self.push(Op::MulScalar(a.0, s.0), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.scale(k);
        self.push(Op::ScaleConst(a.0, k), v)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + k);
        self.push(Op::AddConst(a.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.scale(-1.0);
        self.push(Op::Neg(a.0), v)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.cols, y.cols, "concat_rows cols");
        let mut data = Vec::with_capacity(x.data.len() + y.data.len());
        data.extend_from_slice(&x.data);
        data.extend_from_slice(&y.data);
        let v = Mat::from_vec(x.rows + y.rows, x.cols, data);
        self.push(Op::ConcatRows(a.0, b.0), v)
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(r0 <= r1 && r1 <= x.rows);
        let data = x.data[r0 * x.cols..r1 * x.cols].to_vec();
        let v = Mat::from_vec(r1 - r0, x.cols, data);
        self.push(Op::SliceRows(a.0, r0, r1), v)
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(c0 <= c1 && c1 <= x.cols);
        let mut v = Mat::zeros(x.rows, c1 - c0);
        for i in 0..x.rows {
            for j in c0..c1 {
                *v.at_mut(i, j - c0) = x.at(i, j);
            }
        }
        self.push(Op::SliceCols(a.0, c0, c1), v)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0].0].value.rows;
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let x = &self.nodes[p.0].value;
            assert_eq!(x.rows, rows, "concat_cols rows");
            for i in 0..rows {
                for j in 0..x.cols {
                    *v.at_mut(i, off + j) = x.at(i, j);
                }
            }
            off += x.cols;
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros(x.rows, x.cols);
        for i in 0..x.rows {
            let row = crate::tensor::softmax(x.row(i));
            v.data[i * x.cols..(i + 1) * x.cols].copy_from_slice(&row);
        }
        self.push(Op::SoftmaxRows(a.0), v)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros(x.rows, 1);
        for i in 0..x.rows {
            let row = x.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&t| (t - m).exp()).sum();
            v.data[i] = m + s.ln();
        }
        self.push(Op::LogSumExpRows(a.0), v)
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = Mat::zeros(x.rows, x.cols);
        let n = x.cols as f64;
        for i in 0..x.rows {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..x.cols {
                v.data[i * x.cols + j] = (row[j] - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a.0, eps), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::tanh);
        self.push(Op::Tanh(a.0), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(gelu);
        self.push(Op::Gelu(a.0), v)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::exp);
        self.push(Op::Exp(a.0), v)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::ln);
        self.push(Op::Ln(a.0), v)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(f64::sqrt);
        self.push(Op::Sqrt(a.0), v)
    }

    pub fn mean_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let x = &self.nodes[a.0].value;
        assert!(r0 < r1 && r1 <= x.rows, "mean_rows range");
        let mut v = Mat::zeros(1, x.cols);
        for i in r0..r1 {
            for j in 0..x.cols {
                v.data[j] += x.at(i, j);
            }
        }
        let inv = 1.0 / (r1 - r0) as f64;
        for d in &mut v.data {
            *d *= inv;
        }
        self.push(Op::MeanRows(a.0, r0, r1), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        self.push(Op::SumAll(a.0), Mat::scalar(s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(x.data.len(), y.data.len(), "dot length");
        let s = crate::tensor::dot(&x.data, &y.data);
        self.push(Op::Dot(a.0, b.0), Mat::scalar(s))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "row_dot shape");
        let mut v = Mat::zeros(x.rows, 1);
        for i in 0..x.rows {
            v.data[i] = crate::tensor::dot(x.row(i), y.row(i));
        }
        self.push(Op::RowDot(a.0, b.0), v)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(a.0, lo, hi), v)
    }

    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(x.same_shape(y), "min_elem shape");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p.min(*q)).collect();
        self.push(Op::MinElem(a.0, b.0), Mat::from_vec(x.rows, x.cols, data))
    }

    pub fn row_gather(&mut self, a: Var, idxs: &[usize]) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(idxs.len(), x.rows, "row_gather length");
        let mut v = Mat::zeros(x.rows, 1);
        for (i, &j) in idxs.iter().enumerate() {
            assert!(j < x.cols);
            v.data[i] = x.at(i, j);
        }
        self.push(Op::RowGather(a.0, idxs.to_vec()), v)
    }

    /// Cosine similarity of two equal-shape vectors as a 1x1 node.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let ab = self.dot(a, b);
        let aa = self.dot(a, a);
        let bb = self.dot(b, b);
        let na = self.sqrt(aa);
        let nb = self.sqrt(bb);
        let denom = self.mul(na, nb);
        self.div(ab, denom)
    }

    /// Gradients of `loss` (1x1) with respect to every `param` leaf.
    pub fn backward(&self, loss: Var) -> Grads {
        let m = self.value(loss);
        assert_eq!((m.rows, m.cols), (1, 1), "backward target must be scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Grads { grads };
        }
        grads[loss.0] = Some(Mat::scalar(1.0));

        for id in (0..=loss.0).rev() {
            if !self.needs(id) {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue; // param leaf keeps its accumulated gradient
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul_nt(&self.nodes[*b].value);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.nodes[*a].value.matmul_tn(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNT(a, b) => {
                    if self.needs(*a) {
                        let ga = g.matmul(&self.nodes[*b].value);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.matmul_tn(&self.nodes[*a].value);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, hadamard(&g, &self.nodes[*b].value));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, hadamard(&g, &self.nodes[*a].value));
                    }
                }
                Op::Div(a, b) => {
                    let bv = &self.nodes[*b].value;
                    if self.needs(*a) {
                        let ga = Mat::from_vec(
                            g.rows,
                            g.cols,
                            g.data.iter().zip(&bv.data).map(|(gi, bi)| gi / bi).collect(),
                        );
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let av = &self.nodes[*a].value;
                        let gb = Mat::from_vec(
                            g.rows,
                            g.cols,
                            g.data
                                .iter()
                                .zip(&av.data)
                                .zip(&bv.data)
                                .map(|((gi, ai), bi)| -gi * ai / (bi * bi))
                                .collect(),
                        );
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(a, r) => {
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, g.clone());
                    }
                    if self.needs(*r) {
                        let mut gr = Mat::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for j in 0..g.cols {
                                gr.data[j] += g.at(i, j);
                            }
                        }
                        self.acc(&mut grads, *r, gr);
                    }
                }
                Op::MulRow(a, r) => {
                    let rv = &self.nodes[*r].value;
                    let av = &self.nodes[*a].value;
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        for i in 0..g.rows {
                            for j in 0..g.cols {
                                *ga.at_mut(i, j) *= rv.data[j];
                            }
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*r) {
                        let mut gr = Mat::zeros(1, g.cols);
                        for i in 0..g.rows {
                            for j in 0..g.cols {
                                gr.data[j] += g.at(i, j) * av.at(i, j);
                            }
                        }
                        self.acc(&mut grads, *r, gr);
                    }
                }
                Op::MulCol(a, c) => {
                    let cv = &self.nodes[*c].value;
                    let av = &self.nodes[*a].value;
                    if self.needs(*a) {
                        let mut ga = g.clone();
                        for i in 0..g.rows {
                            for j in 0..g.cols {
                                *ga.at_mut(i, j) *= cv.data[i];
                            }
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*c) {
                        let mut gc = Mat::zeros(g.rows, 1);
                        for i in 0..g.rows {
                            let mut acc = 0.0;
                            for j in 0..g.cols {
                                acc += g.at(i, j) * av.at(i, j);
                            }
                            gc.data[i] = acc;
                        }
                        self.acc(&mut grads, *c, gc);
                    }
                }
                Op::MulScalar(a, s) => {
                    if self.needs(*a) {
                        let sv = self.nodes[*s].value.data[0];
                        self.acc(&mut grads, *a, g.scale(sv));
                    }
                    if self.needs(*s) {
                        let av = &self.nodes[*a].value;
                        let gs = crate::tensor::dot(&g.data, &av.data);
                        self.acc(&mut grads, *s, Mat::scalar(gs));
                    }
                }
                Op::ScaleConst(a, k) => self.acc(&mut grads, *a, g.scale(*k)),
                Op::AddConst(a) => self.acc(&mut grads, *a, g),
                Op::Neg(a) => self.acc(&mut grads, *a, g.scale(-1.0)),
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[*a].value.rows;
                    let cols = g.cols;
                    if self.needs(*a) {
                        let ga = Mat::from_vec(ra, cols, g.data[..ra * cols].to_vec());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb =
                            Mat::from_vec(g.rows - ra, cols, g.data[ra * cols..].to_vec());
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::SliceRows(a, r0, _r1) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            *ga.at_mut(r0 + i, j) = g.at(i, j);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, c0, _c1) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            *ga.at_mut(i, c0 + j) = g.at(i, j);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let cols = self.nodes[p].value.cols;
                        if self.needs(p) {
                            let mut gp = Mat::zeros(g.rows, cols);
                            for i in 0..g.rows {
                                for j in 0..cols {
                                    *gp.at_mut(i, j) = g.at(i, off + j);
                                }
                            }
                            self.acc(&mut grads, p, gp);
                        }
                        off += cols;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[id].value;
                    let mut ga = Mat::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let s = crate::tensor::dot(gr, yr);
                        for j in 0..y.cols {
                            *ga.at_mut(i, j) = yr[j] * (gr[j] - s);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LogSumExpRows(a) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let sm = crate::tensor::softmax(x.row(i));
                        for j in 0..x.cols {
                            *ga.at_mut(i, j) = g.data[i] * sm[j];
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[id].value;
                    let n = x.cols as f64;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for i in 0..x.rows {
                        let row = x.row(i);
                        let mean = row.iter().sum::<f64>() / n;
                        let var =
                            row.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gr = g.row(i);
                        let yr = y.row(i);
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = crate::tensor::dot(gr, yr) / n;
                        for j in 0..x.cols {
                            *ga.at_mut(i, j) = inv * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&y.data)
                            .map(|(gi, yi)| gi * (1.0 - yi * yi))
                            .collect(),
                    );
                    self.acc(&mut grads, *a, ga);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(gi, xi)| gi * gelu_deriv(*xi))
                            .collect(),
                    );
                    self.acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[id].value;
                    self.acc(&mut grads, *a, hadamard(&g, y));
                }
                Op::Ln(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(&x.data).map(|(gi, xi)| gi / xi).collect(),
                    );
                    self.acc(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &self.nodes[id].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&y.data)
                            .map(|(gi, yi)| gi / (2.0 * yi))
                            .collect(),
                    );
                    self.acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a, r0, r1) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    let inv = 1.0 / (r1 - r0) as f64;
                    for i in *r0..*r1 {
                        for j in 0..x.cols {
                            *ga.at_mut(i, j) = g.data[j] * inv;
                        }
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = Mat::from_vec(x.rows, x.cols, vec![g.data[0]; x.data.len()]);
                    self.acc(&mut grads, *a, ga);
                }
                Op::Dot(a, b) => {
                    let s = g.data[0];
                    if self.needs(*a) {
                        self.acc(&mut grads, *a, self.nodes[*b].value.scale(s));
                    }
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, self.nodes[*a].value.scale(s));
                    }
                }
                Op::RowDot(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if self.needs(*a) {
                        let mut ga = Mat::zeros(av.rows, av.cols);
                        for i in 0..av.rows {
                            let gi = g.data[i];
                            for j in 0..av.cols {
                                *ga.at_mut(i, j) = gi * bv.at(i, j);
                            }
                        }
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let mut gb = Mat::zeros(av.rows, av.cols);
                        for i in 0..av.rows {
                            let gi = g.data[i];
                            for j in 0..av.cols {
                                *gb.at_mut(i, j) = gi * av.at(i, j);
                            }
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::RowGather(a, idxs) => {
                    let x = &self.nodes[*a].value;
                    let mut ga = Mat::zeros(x.rows, x.cols);
                    for (i, &j) in idxs.iter().enumerate() {
                        *ga.at_mut(i, j) = g.data[i];
                    }
                    self.acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[*a].value;
                    let ga = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data
                            .iter()
                            .zip(&x.data)
                            .map(|(gi, xi)| if *xi > *lo && *xi < *hi { *gi } else { 0.0 })
                            .collect(),
                    );
                    self.acc(&mut grads, *a, ga);
                }
                Op::MinElem(a, b) => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    if self.needs(*a) {
                        let ga = Mat::from_vec(
                            g.rows,
                            g.cols,
                            g.data
                                .iter()
                                .zip(av.data.iter().zip(&bv.data))
                                .map(|(gi, (x, y))| if x <= y { *gi } else { 0.0 })
                                .collect(),
                        );
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = Mat::from_vec(
                            g.rows,
                            g.cols,
                            g.data
                                .iter()
                                .zip(av.data.iter().zip(&bv.data))
                                .map(|(gi, (x, y))| if x > y { *gi } else { 0.0 })
                                .collect(),
                        );
                        self.acc(&mut grads, *b, gb);
                    }
                }
            }
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat>], id: usize, g: Mat) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient for a node; zero matrix of `like`'s shape when none flowed.
    pub fn get(&self, v: Var, like: &Mat) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Mat::zeros(like.rows, like.cols),
        }
    }

    pub fn try_get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central finite differences on a scalar-valued builder.
    pub(crate) fn finite_diff(build: impl Fn(&Mat) -> f64, x: &Mat, h: f64) -> Mat {
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            g.data[i] = (build(&xp) - build(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(analytic: &Mat, numeric: &Mat, rel: f64) {
        for (a, n) in analytic.data.iter().zip(&numeric.data) {
            let denom = a.abs().max(n.abs());
            if denom < 1e-4 {
                assert!((a - n).abs() < 1e-6, "abs mismatch {a} vs {n}");
            } else {
                assert!((a - n).abs() / denom < rel, "rel mismatch {a} vs {n}");
            }
        }
    }

    #[test]
    fn grad_matmul_chain() {
        let x0 = Mat::from_vec(2, 3, vec![0.3, -0.2, 0.7, 1.1, 0.05, -0.4]);
        let w = Mat::from_vec(3, 2, vec![0.5, -0.3, 0.2, 0.9, -0.7, 0.1]);
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let wv = t.constant(w.clone());
            let y = t.matmul(xv, wv);
            let y2 = t.tanh(y);
            let s = t.sum_all(y2);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let wv = t.constant(w.clone());
        let y = t.matmul(xv, wv);
        let y2 = t.tanh(y);
        let s = t.sum_all(y2);
        let grads = t.backward(s);
        let analytic = grads.get(xv, &x0);
        let numeric = finite_diff(f, &x0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        let x0 = Mat::from_vec(2, 4, vec![0.3, -1.2, 0.7, 0.1, 0.9, 0.2, -0.5, 1.4]);
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let ln = t.layer_norm_rows(xv, 1e-5);
            let ge = t.gelu(ln);
            let sm = t.softmax_rows(ge);
            let lg = t.ln(sm);
            let s = t.sum_all(lg);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let ln = t.layer_norm_rows(xv, 1e-5);
        let ge = t.gelu(ln);
        let sm = t.softmax_rows(ge);
        let lg = t.ln(sm);
        let s = t.sum_all(lg);
        let grads = t.backward(s);
        let analytic = grads.get(xv, &x0);
        let numeric = finite_diff(f, &x0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-5);
    }

    #[test]
    fn grad_cosine_and_scalar_ops() {
        let a0 = Mat::row_vector(vec![0.4, -0.7, 1.2, 0.3]);
        let b = Mat::row_vector(vec![1.0, 0.5, -0.2, 0.8]);
        let f = |a: &Mat| {
            let mut t = Tape::new();
            let av = t.param(a.clone());
            let bv = t.constant(b.clone());
            let c = t.cosine(av, bv);
            let e = t.exp(c);
            t.scalar_value(e)
        };
        let mut t = Tape::new();
        let av = t.param(a0.clone());
        let bv = t.constant(b.clone());
        let c = t.cosine(av, bv);
        let e = t.exp(c);
        let grads = t.backward(e);
        let analytic = grads.get(av, &a0);
        let numeric = finite_diff(f, &a0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn grad_concat_slice_rowops() {
        let a0 = Mat::from_vec(2, 3, vec![0.2, 0.8, -0.1, 0.5, -0.9, 0.3]);
        let col = Mat::from_vec(4, 1, vec![0.3, 1.2, -0.5, 0.8]);
        let f = |a: &Mat| {
            let mut t = Tape::new();
            let av = t.param(a.clone());
            let bv = t.constant(Mat::from_vec(2, 3, vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.25]));
            let cat = t.concat_rows(av, bv);
            let cv = t.constant(col.clone());
            let scaled = t.mul_col(cat, cv);
            let sl = t.slice_cols(scaled, 1, 3);
            let rd = t.row_dot(sl, sl);
            let s = t.sum_all(rd);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let av = t.param(a0.clone());
        let bv = t.constant(Mat::from_vec(2, 3, vec![1.0, 0.0, 2.0, -1.0, 0.5, 0.25]));
        let cat = t.concat_rows(av, bv);
        let cv = t.constant(col.clone());
        let scaled = t.mul_col(cat, cv);
        let sl = t.slice_cols(scaled, 1, 3);
        let rd = t.row_dot(sl, sl);
        let s = t.sum_all(rd);
        let grads = t.backward(s);
        let analytic = grads.get(av, &a0);
        let numeric = finite_diff(f, &a0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn grad_logsumexp_gather() {
        let x0 = Mat::from_vec(
            3,
            4,
            vec![0.1, 0.9, -0.3, 0.4, 1.2, -0.8, 0.0, 0.6, -0.2, 0.3, 0.5, -1.0],
        );
        let idxs = vec![2usize, 0, 3];
        let f = |x: &Mat| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let lse = t.logsumexp_rows(xv);
            let picked = t.row_gather(xv, &idxs);
            let nll = t.sub(lse, picked);
            let s = t.sum_all(nll);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let xv = t.param(x0.clone());
        let lse = t.logsumexp_rows(xv);
        let picked = t.row_gather(xv, &idxs);
        let nll = t.sub(lse, picked);
        let s = t.sum_all(nll);
        let grads = t.backward(s);
        let analytic = grads.get(xv, &x0);
        let numeric = finite_diff(f, &x0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(Mat::row_vector(vec![1.0, 2.0]));
        let b = t.constant(Mat::row_vector(vec![3.0, 4.0]));
        let d = t.dot(a, b);
        let grads = t.backward(d);
        assert!(grads.try_get(a).is_some());
        assert!(grads.try_get(b).is_none());
    }

    #[test]
    fn grad_mul_scalar_softmax_combo() {
        // softmax over stacked scalars, then weighted sum - the ensemble shape.
        let w0 = Mat::row_vector(vec![0.3, -0.5, 0.9]);
        let zs = [
            Mat::row_vector(vec![1.0, 0.0]),
            Mat::row_vector(vec![0.0, 1.0]),
            Mat::row_vector(vec![0.5, 0.5]),
        ];
        let f = |w: &Mat| {
            let mut t = Tape::new();
            let wv = t.param(w.clone());
            let om = t.softmax_rows(wv);
            let mut acc = t.constant(Mat::row_vector(vec![0.0, 0.0]));
            for (i, z) in zs.iter().enumerate() {
                let zi = t.constant(z.clone());
                let wi = t.slice_cols(om, i, i + 1);
                let term = t.mul_scalar(zi, wi);
                acc = t.add(acc, term);
            }
            let sq = t.mul(acc, acc);
            let s = t.sum_all(sq);
            t.scalar_value(s)
        };
        let mut t = Tape::new();
        let wv = t.param(w0.clone());
        let om = t.softmax_rows(wv);
        let mut acc = t.constant(Mat::row_vector(vec![0.0, 0.0]));
        for (i, z) in zs.iter().enumerate() {
            let zi = t.constant(z.clone());
            let wi = t.slice_cols(om, i, i + 1);
            let term = t.mul_scalar(zi, wi);
            acc = t.add(acc, term);
        }
        let sq = t.mul(acc, acc);
        let s = t.sum_all(sq);
        let grads = t.backward(s);
        let analytic = grads.get(wv, &w0);
        let numeric = finite_diff(f, &w0, 1e-5);
        assert_grad_close(&analytic, &numeric, 1e-6);
    }
}
