//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are either
//! constants or trainable inputs; only nodes downstream of a trainable leaf
//! receive gradients.

use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Square(Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    RowSum(Var),
    MulCol(Var, Var),
    Mean(Var),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => g.add_assign(&delta),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.cols, vb.rows, "matmul: {:?} x {:?}", va.shape(), vb.shape());
        let mut out = Mat::zeros(va.rows, vb.cols);
        gemm(va, false, vb, false, &mut out, 0.0);
        let g = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul(a, b), g)
    }

    /// `a + bias`, with `bias` a single row broadcast over all rows of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!((vb.rows, vb.cols), (1, va.cols), "add_row: bias shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        let g = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddRow(a, bias), g)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = va.zip_map(vb, f);
        let g = self.needs(a) || self.needs(b);
        self.push(out, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let g = self.needs(a);
        self.push(out, op, g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::hcat(&mats);
        let g = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat(parts.to_vec()), g)
    }

    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice_cols(start, end);
        let g = self.needs(a);
        self.push(out, Op::Slice(a, start, end), g)
    }

    /// Sum of each row, producing a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows).map(|r| va.row(r).iter().sum()).collect();
        let out = Mat::from_vec(va.rows, 1, data);
        let g = self.needs(a);
        self.push(out, Op::RowSum(a), g)
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!((vc.rows, vc.cols), (va.rows, 1), "mul_col: column shape");
        let mut out = va.clone();
        for r in 0..out.rows {
            let w = vc.data[r];
            for v in out.row_mut(r) {
                *v *= w;
            }
        }
        let g = self.needs(a) || self.needs(col);
        self.push(out, Op::MulCol(a, col), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let m = va.data.iter().sum::<f64>() / va.data.len().max(1) as f64;
        let g = self.needs(a);
        self.push(Mat::from_vec(1, 1, vec![m]), Op::Mean(a), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum::<f64>();
        let g = self.needs(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::Sum(a), g)
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "backward from a non-scalar");
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(dy);
                }
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let vb = self.value(*b);
                        let mut da = Mat::zeros(dy.rows, vb.rows);
                        gemm(&dy, false, vb, true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.needs(*b) {
                        let va = self.value(*a);
                        let mut db = Mat::zeros(va.cols, dy.cols);
                        gemm(va, true, &dy, false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Mat::zeros(1, dy.cols);
                        for r in 0..dy.rows {
                            for (o, v) in db.data.iter_mut().zip(dy.row(r)) {
                                *o += v;
                            }
                        }
                        accumulate(&mut grads[bias.0], db);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], dy.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], dy.map(|v| -v));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], dy.zip_map(self.value(*b), |g, v| g * v));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads[b.0], dy.zip_map(self.value(*a), |g, v| g * v));
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[a.0], dy.map(|g| c * g));
                }
                Op::Sigmoid(a) => {
                    accumulate(&mut grads[a.0], dy.zip_map(y, |g, s| g * s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    accumulate(&mut grads[a.0], dy.zip_map(y, |g, t| g * (1.0 - t * t)));
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    let x = self.value(*a);
                    accumulate(
                        &mut grads[a.0],
                        dy.zip_map(x, |g, v| if v > 0.0 { g } else { slope * g }),
                    );
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], dy.zip_map(x, |g, v| g * sigmoid(v)));
                }
                Op::Square(a) => {
                    let x = self.value(*a);
                    accumulate(&mut grads[a.0], dy.zip_map(x, |g, v| 2.0 * g * v));
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        if self.needs(*p) {
                            accumulate(&mut grads[p.0], dy.slice_cols(off, off + w));
                        }
                        off += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let va = self.value(*a);
                    let slot = grads[a.0].get_or_insert_with(|| Mat::zeros(va.rows, va.cols));
                    for r in 0..dy.rows {
                        for (o, v) in slot.row_mut(r)[*start..*end].iter_mut().zip(dy.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::RowSum(a) => {
                    let va = self.value(*a);
                    let mut da = Mat::zeros(va.rows, va.cols);
                    for r in 0..va.rows {
                        let g = dy.data[r];
                        da.row_mut(r).iter_mut().for_each(|v| *v = g);
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::MulCol(a, col) => {
                    let (va, vc) = (self.value(*a), self.value(*col));
                    if self.needs(*col) {
                        let data = (0..va.rows)
                            .map(|r| dy.row(r).iter().zip(va.row(r)).map(|(g, x)| g * x).sum())
                            .collect();
                        accumulate(&mut grads[col.0], Mat::from_vec(va.rows, 1, data));
                    }
                    if self.needs(*a) {
                        let mut da = dy;
                        for r in 0..da.rows {
                            let w = vc.data[r];
                            da.row_mut(r).iter_mut().for_each(|v| *v *= w);
                        }
                        accumulate(&mut grads[a.0], da);
                    }
                }
                Op::Mean(a) => {
                    let va = self.value(*a);
                    let g = dy.scalar() / va.len().max(1) as f64;
                    accumulate(&mut grads[a.0], Mat::filled(va.rows, va.cols, g));
                }
                Op::Sum(a) => {
                    let va = self.value(*a);
                    accumulate(&mut grads[a.0], Mat::filled(va.rows, va.cols, dy.scalar()));
                }
            }
        }
        Grads { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` with respect to its first input.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = vals.iter().map(|m| t.input(m.clone())).collect();
            let out = build(&mut t, &vs);
            t.value(out).scalar()
        };
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|m| t.input(m.clone())).collect();
        let out = build(&mut t, &vs);
        let grads = t.backward(out);
        for (k, v) in vs.iter().enumerate() {
            let analytic = grads.get(*v).cloned().unwrap_or_else(|| Mat::zeros(inputs[k].rows, inputs[k].cols));
            for i in 0..inputs[k].len() {
                let h = 1e-6;
                let mut p = inputs.clone();
                p[k].data[i] += h;
                let mut m = inputs.clone();
                m[k].data[i] -= h;
                let numeric = (eval(&p) - eval(&m)) / (2.0 * h);
                let a = analytic.data[i];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {k}[{i}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, seed: f64) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i as f64 + seed) * 1.37).sin()).collect())
    }

    #[test]
    fn matmul_add_row_grads() {
        check(vec![m(3, 4, 0.1), m(4, 2, 0.7), m(1, 2, 0.3)], |t, v| {
            let y = t.matmul(v[0], v[1]);
            let y = t.add_row(y, v[2]);
            let y = t.tanh(y);
            t.sum(y)
        });
    }

    #[test]
    fn elementwise_grads() {
        check(vec![m(2, 3, 0.2), m(2, 3, 1.1)], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.mul(a, v[1]);
            let c = t.sub(b, v[0]);
            let d = t.softplus(c);
            let e = t.square(d);
            let f = t.leaky_relu(e, 0.2);
            let g = t.add(f, v[1]);
            let g = t.scale(g, 0.5);
            t.mean(g)
        });
    }

    #[test]
    fn structural_grads() {
        check(vec![m(3, 2, 0.5), m(3, 3, 0.9), m(3, 1, 0.4)], |t, v| {
            let c = t.concat(&[v[0], v[1]]);
            let s = t.slice(c, 1, 4);
            let s2 = t.slice(c, 0, 3);
            let p = t.mul(s, s2);
            let w = t.mul_col(p, v[2]);
            let r = t.row_sum(w);
            let r = t.square(r);
            t.sum(r)
        });
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(m(2, 2, 0.0));
        let b = t.input(m(2, 2, 1.0));
        let c = t.mul(a, b);
        let s = t.sum(c);
        let g = t.backward(s);
        assert!(g.get(a).is_none());
        assert_eq!(g.get(b).unwrap(), t.value(a));
    }

    #[test]
    fn softplus_is_stable() {
        let mut t = Tape::new();
        let a = t.input(Mat::from_vec(1, 3, vec![-800.0, 0.0, 800.0]));
        let s = t.softplus(a);
        let v = t.value(s).clone();
        assert_eq!(v.data[0], 0.0);
        assert!((v.data[1] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(v.data[2], 800.0);
        let sum = t.sum(s);
        assert!(t.backward(sum).get(a).unwrap().is_finite());
    }
}
