//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value and enough of its inputs
//! to run the adjoint later. [`Tape::backward`] walks the nodes in reverse and
//! accumulates `∂loss/∂node` for every node that feeds the loss. Parameters
//! enter as leaves tagged with their store index so the caller can collect
//! per-parameter gradients afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    ScaleRows(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Affine(Var, f64),
    SliceCols(Var, usize),
    CrossEntropy(Var, usize),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "sub shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::Sub(a, b))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width");
        let r = r.row(0).to_vec();
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                *x += b;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.rows(), y.rows(), "concat_cols rows");
        let cols = x.cols() + y.cols();
        let mut v = Matrix::zeros(x.rows(), cols);
        for i in 0..x.rows() {
            let row = v.row_mut(i);
            row[..x.cols()].copy_from_slice(x.row(i));
            row[x.cols()..].copy_from_slice(y.row(i));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols(), y.cols(), "concat_rows cols");
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let v = Matrix::from_vec(x.rows() + y.rows(), x.cols(), data).expect("shape");
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let v = self.value(a).select_rows(&idx);
        self.push(v, Op::GatherRows(a, idx))
    }

    /// Scatter-adds row `k` of `a` into output row `segments[k]`.
    pub fn segment_sum(&mut self, a: Var, segments: Vec<usize>, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), segments.len(), "segment_sum ids");
        let mut v = Matrix::zeros(n, x.cols());
        for (k, &s) in segments.iter().enumerate() {
            for (o, x) in v.row_mut(s).iter_mut().zip(x.row(k)) {
                *o += x;
            }
        }
        self.push(v, Op::SegmentSum(a, segments))
    }

    /// Softmax of a column vector taken separately within each segment.
    pub fn segment_softmax(&mut self, a: Var, segments: Vec<usize>) -> Var {
        let x = self.value(a);
        assert_eq!(x.cols(), 1, "segment_softmax expects a column");
        assert_eq!(x.rows(), segments.len(), "segment_softmax ids");
        let n = segments.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n];
        for (k, &s) in segments.iter().enumerate() {
            max[s] = max[s].max(x.data()[k]);
        }
        let mut exp: Vec<f64> = segments
            .iter()
            .enumerate()
            .map(|(k, &s)| libm::exp(x.data()[k] - max[s]))
            .collect();
        let mut sum = vec![0.0; n];
        for (k, &s) in segments.iter().enumerate() {
            sum[s] += exp[k];
        }
        for (k, &s) in segments.iter().enumerate() {
            exp[k] /= sum[s];
        }
        let v = Matrix::column(&exp);
        self.push(v, Op::SegmentSoftmax(a, segments))
    }

    /// Multiplies row `k` of `a` by the scalar `w[k]` (`w` is a column).
    pub fn scale_rows(&mut self, a: Var, w: Var) -> Var {
        let (x, s) = (self.value(a), self.value(w));
        assert_eq!(s.cols(), 1, "scale_rows weights must be a column");
        assert_eq!(x.rows(), s.rows(), "scale_rows rows");
        let mut v = x.clone();
        for k in 0..v.rows() {
            let f = s.data()[k];
            for e in v.row_mut(k) {
                *e *= f;
            }
        }
        self.push(v, Op::ScaleRows(a, w))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(libm::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x + beta);
        self.push(v, Op::Affine(a, alpha))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        self.affine(a, alpha, 0.0)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols range");
        let mut v = Matrix::zeros(x.rows(), len);
        for i in 0..x.rows() {
            v.row_mut(i).copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    /// Softmax cross-entropy of a logit vector (any `n × 1` or `1 × n`
    /// shape) against class `target`. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let x = self.value(logits).data();
        assert!(target < x.len(), "cross_entropy target out of range");
        let v = log_sum_exp(x) - x[target];
        self.push(Matrix::scalar(v), Op::CrossEntropy(logits, target))
    }

    /// `Σ wᵢ · termᵢ` over equally shaped terms.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        assert!(!terms.is_empty(), "weighted_sum of nothing");
        let (r, c) = self.value(terms[0].0).shape();
        let mut v = Matrix::zeros(r, c);
        for &(t, w) in &terms {
            let x = self.value(t);
            assert_eq!(x.shape(), (r, c), "weighted_sum shape");
            for (o, x) in v.data_mut().iter_mut().zip(x.data()) {
                *o += w * x;
            }
        }
        self.push(v, Op::WeightedSum(terms))
    }

    /// Seeds `∂root/∂root = 1` (root must be `1 × 1`) and propagates adjoints.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        self.backward_with(root, Matrix::scalar(1.0))
    }

    pub fn backward_with(&self, root: Var, seed: Matrix) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b));
                let db = self.value(*a).t_matmul(g);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, hadamard(g, self.value(*b)));
                accumulate(grads, *b, hadamard(g, self.value(*a)));
            }
            Op::AddRow(a, row) => {
                let mut dr = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in dr.row_mut(0).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, dr);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut da = Matrix::zeros(g.rows(), ca);
                let mut db = Matrix::zeros(g.rows(), cb);
                for r in 0..g.rows() {
                    da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::ConcatRows(a, b) => {
                let (ra, c) = self.value(*a).shape();
                let split = ra * c;
                let da = Matrix::from_vec(ra, c, g.data()[..split].to_vec()).expect("shape");
                let db = Matrix::from_vec(g.rows() - ra, c, g.data()[split..].to_vec())
                    .expect("shape");
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, x) in da.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += x;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SegmentSum(a, segments) => {
                let da = g.select_rows(segments);
                accumulate(grads, *a, da);
            }
            Op::SegmentSoftmax(a, segments) => {
                let y = node.value.data();
                let n = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n];
                for (k, &s) in segments.iter().enumerate() {
                    dot[s] += y[k] * g.data()[k];
                }
                let d: Vec<f64> = segments
                    .iter()
                    .enumerate()
                    .map(|(k, &s)| y[k] * (g.data()[k] - dot[s]))
                    .collect();
                accumulate(grads, *a, Matrix::column(&d));
            }
            Op::ScaleRows(a, w) => {
                let x = self.value(*a);
                let s = self.value(*w);
                let mut da = g.clone();
                let mut dw = Matrix::zeros(s.rows(), 1);
                for k in 0..x.rows() {
                    let f = s.data()[k];
                    for e in da.row_mut(k) {
                        *e *= f;
                    }
                    dw.data_mut()[k] = x.row(k).iter().zip(g.row(k)).map(|(p, q)| p * q).sum();
                }
                accumulate(grads, *a, da);
                accumulate(grads, *w, dw);
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { slope * g })
                    .collect();
                accumulate(grads, *a, Matrix::from_vec(x.rows(), x.cols(), data).expect("shape"));
            }
            Op::Sigmoid(a) => {
                let d = zip_map(&node.value, g, |y, g| g * y * (1.0 - y));
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = zip_map(&node.value, g, |y, g| g * (1.0 - y * y));
                accumulate(grads, *a, d);
            }
            Op::Affine(a, alpha) => {
                accumulate(grads, *a, g.map(|x| alpha * x));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.value(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, da);
            }
            Op::CrossEntropy(logits, target) => {
                let x = self.value(*logits);
                let p = softmax(x.data());
                let scale = g.data()[0];
                let data = p
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| scale * (p - if k == *target { 1.0 } else { 0.0 }))
                    .collect();
                accumulate(grads, *logits, Matrix::from_vec(x.rows(), x.cols(), data).expect("shape"));
            }
            Op::WeightedSum(terms) => {
                for &(t, w) in terms {
                    accumulate(grads, t, g.map(|x| w * x));
                }
            }
        }
    }

    /// Parameter-store index of a leaf created by [`Tape::param`].
    pub fn param_id(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("shape")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(x.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| libm::exp(v - lse)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x` against the tape gradient of the
    /// same function, element by element.
    fn check(x: Matrix, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = f(&mut tape, v);
        let grads = tape.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let h = 1e-6;
        for k in 0..x.data().len() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[k] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let o = f(&mut t, v);
                t.value(o).data()[0]
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[k];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                "element {k}: analytic {a} numeric {numeric}"
            );
        }
    }

    fn sample(rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols)
            .map(|i| ((i * 37 + 11) % 17) as f64 / 7.0 - 1.1)
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn sum_all(t: &mut Tape, v: Var) -> Var {
        let (r, c) = t.value(v).shape();
        let ones_r = t.constant(Matrix::filled(1, r, 1.0));
        let ones_c = t.constant(Matrix::filled(c, 1, 1.0));
        let a = t.matmul(ones_r, v);
        t.matmul(a, ones_c)
    }

    #[test]
    fn matmul_and_elementwise() {
        let w = sample(3, 2);
        check(sample(4, 3), move |t, x| {
            let w = t.constant(w.clone());
            let y = t.matmul(x, w);
            let s = t.sigmoid(y);
            let th = t.tanh(y);
            let p = t.mul(s, th);
            let q = t.sub(p, y);
            let l = t.leaky_relu(q, 0.2);
            sum_all(t, l)
        });
    }

    #[test]
    fn segment_ops() {
        check(sample(6, 1), |t, x| {
            let seg = vec![0, 1, 0, 2, 1, 0];
            let a = t.segment_softmax(x, seg.clone());
            let rows = t.constant(sample(6, 3));
            let m = t.scale_rows(rows, a);
            let m2 = t.scale_rows(m, x);
            let s = t.segment_sum(m2, seg, 3);
            let w = t.constant(sample(3, 3));
            let s = t.mul(s, w);
            sum_all(t, s)
        });
    }

    #[test]
    fn structural_ops() {
        check(sample(3, 4), |t, x| {
            let g = t.gather_rows(x, vec![2, 0, 2]);
            let a = t.slice_cols(g, 1, 2);
            let b = t.concat_cols(a, g);
            let c = t.concat_rows(b, b);
            let bias = t.slice_cols(x, 0, 3);
            let bias = t.gather_rows(bias, vec![1]);
            let bias = t.concat_cols(bias, bias);
            let d = t.add_row(c, bias);
            let e = t.affine(d, -0.5, 2.0);
            let sq = t.mul(e, e);
            sum_all(t, sq)
        });
    }

    #[test]
    fn cross_entropy_and_weighted_sum() {
        check(sample(5, 1), |t, x| {
            let a = t.cross_entropy(x, 3);
            let b = t.cross_entropy(x, 0);
            t.weighted_sum(vec![(a, 1.0), (b, 0.25)])
        });
    }

    #[test]
    fn segment_softmax_normalizes() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(&[1.0, 2.0, -3.0, 0.5]));
        let y = t.segment_softmax(x, vec![1, 1, 0, 1]);
        let y = t.value(y).data();
        assert_eq!(y[2], 1.0);
        assert!((y[0] + y[1] + y[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_n() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(4, 1));
        let l = t.cross_entropy(x, 2);
        assert!((t.value(l).data()[0] - libm::log(4.0)).abs() < 1e-15);
    }
}
