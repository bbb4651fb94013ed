//! Matrix-valued reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of a forward pass over `f64`
//! matrices. Parameters are borrowed from the caller and referenced by
//! index, so building a tape never copies model weights. [`Tape::backward`]
//! walks the records in reverse and returns one gradient per parameter.

use crate::bessel;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use std::hash::{Hash, Hasher};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    /// a scaled by a 1x1 variable
    MulScalar(Var, Var),
    /// a divided by a 1x1 variable
    DivScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Cos(Var),
    Recip(Var),
    /// elementwise max(a, c)
    MaxConst(Var, f64),
    Atan2(Var, Var),
    LogI0(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    BroadcastRows(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    MaxPoolRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    /// Per-row standardization; stores 1/sqrt(var + eps) per row.
    LayerNormRows(Var, Vec<f64>),
    SumAll(Var),
    /// log Σ_j w_j exp(a_j) over a column, with constant weights.
    WeightedLogSumExp(Var, Vec<f64>),
}

enum Value {
    Owned(Array2<f64>),
    Param(usize),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Array2<f64>]) -> Self {
        Self { params, nodes: Vec::with_capacity(512) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(i) => &self.params[*i],
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// The single entry of a 1x1 value.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Const, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, index: usize) -> Var {
        assert!(index < self.params.len(), "parameter {index} out of range");
        self.nodes.push(Node { value: Value::Param(index), op: Op::Param(index), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    /// Adds a 1 x c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row), &[a, row])
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) * k;
        self.push(v, Op::MulScalar(a, s), &[a, s])
    }

    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a) / k;
        self.push(v, Op::DivScalar(a, s), &[a, s])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddConst(a), &[a])
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(a).mapv(f);
        self.push(v, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, relu, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, f64::recip, Op::Recip(a))
    }

    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x.max(c), Op::MaxConst(a, c))
    }

    pub fn log_i0(&mut self, a: Var) -> Var {
        self.unary(a, bessel::log_i0, Op::LogI0(a))
    }

    pub fn atan2(&mut self, y: Var, x: Var) -> Var {
        let mut v = self.value(y).clone();
        v.zip_mut_with(self.value(x), |yv, &xv| *yv = yv.atan2(xv));
        self.push(v, Op::Atan2(y, x), &[y, x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start, len), &[a])
    }

    /// Repeats a 1 x c row `n` times.
    pub fn broadcast_rows(&mut self, row: Var, n: usize) -> Var {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1);
        let v = r.broadcast((n, r.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::BroadcastRows(row), &[row])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), index);
        self.push(v, Op::GatherRows(a, index.to_vec()), &[a])
    }

    /// Sums row k of `a` into output row `index[k]`; the output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), index.len());
        let mut v = Array2::zeros((n, src.ncols()));
        for (k, &dst) in index.iter().enumerate() {
            let mut row = v.row_mut(dst);
            row += &src.row(k);
        }
        self.push(v, Op::ScatterAddRows(a, index.to_vec()), &[a])
    }

    /// Column-wise maximum over rows (1 x c). Ties pick the lowest row.
    pub fn max_pool_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let (n, c) = src.dim();
        assert!(n > 0);
        let mut arg = vec![0usize; c];
        let mut v = Array2::zeros((1, c));
        for j in 0..c {
            let mut best = src[[0, j]];
            for i in 1..n {
                if src[[i, j]] > best {
                    best = src[[i, j]];
                    arg[j] = i;
                }
            }
            v[[0, j]] = best;
        }
        self.push(v, Op::MaxPoolRows(a, arg), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let c = v.ncols() as f64;
        let mut inv_std = Vec::with_capacity(v.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / c;
            row -= mean;
            let var = row.fold(0.0, |acc, &x| acc + x * x) / c;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        self.push(v, Op::LayerNormRows(a, inv_std), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn weighted_log_sum_exp(&mut self, col: Var, weights: &[f64]) -> Var {
        let a = self.value(col);
        assert_eq!(a.dim(), (weights.len(), 1));
        let m = a
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .fold(f64::NEG_INFINITY, |acc, (&x, _)| acc.max(x));
        let total: f64 = a
            .iter()
            .zip(weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(&x, &w)| w * (x - m).exp())
            .sum();
        let v = Array2::from_elem((1, 1), m + total.ln());
        self.push(v, Op::WeightedLogSumExp(col, weights.to_vec()), &[col])
    }

    /// Hash of every branch decision taken in the forward pass (ReLU signs,
    /// clamps, max-pool winners). Two evaluations with equal signatures lie
    /// on the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).iter() {
                        (x > 0.0).hash(&mut h);
                    }
                }
                Op::MaxConst(a, c) => {
                    for &x in self.value(*a).iter() {
                        (x > *c).hash(&mut h);
                    }
                }
                Op::MaxPoolRows(_, arg) => arg.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Gradients of the 1x1 `output` with respect to every parameter.
    pub fn backward(&self, output: Var) -> Vec<Array2<f64>> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut param_grads: Vec<Array2<f64>> =
            self.params.iter().map(|p| Array2::zeros(p.dim())).collect();
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones((1, 1)));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let out = self.value(Var(i));
            let acc = |v: Var, delta: Array2<f64>, grads: &mut Vec<Option<Array2<f64>>>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Const => {}
                Op::Param(p) => param_grads[*p] += &g,
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.dot(&bv.t()), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, av.t().dot(&g), &mut grads);
                    }
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].needs_grad {
                        acc(*a, g.dot(bv), &mut grads);
                    }
                    if self.nodes[b.0].needs_grad {
                        acc(*b, g.t().dot(av), &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, -g, &mut grads);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * self.value(*b), &mut grads);
                    acc(*b, &g * self.value(*a), &mut grads);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    acc(*a, &g / bv, &mut grads);
                    acc(*b, -(&g * out) / bv, &mut grads);
                }
                Op::AddRow(a, row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    acc(*row, (&g * av).sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                    acc(*a, &g * self.value(*row), &mut grads);
                }
                Op::MulScalar(a, s) => {
                    let k = self.scalar(*s);
                    let ds = (&g * self.value(*a)).sum();
                    acc(*s, Array2::from_elem((1, 1), ds), &mut grads);
                    acc(*a, g * k, &mut grads);
                }
                Op::DivScalar(a, s) => {
                    let k = self.scalar(*s);
                    let ds = -(&g * out).sum() / k;
                    acc(*s, Array2::from_elem((1, 1), ds), &mut grads);
                    acc(*a, g / k, &mut grads);
                }
                Op::Scale(a, k) => acc(*a, g * *k, &mut grads),
                Op::AddConst(a) => acc(*a, g, &mut grads),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= 0.0 {
                            *gv = 0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::Softplus(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| *gv *= sigmoid(x));
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => acc(*a, g * out, &mut grads),
                Op::Log(a) => acc(*a, g / self.value(*a), &mut grads),
                Op::Cos(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| *gv *= -x.sin());
                    acc(*a, d, &mut grads);
                }
                Op::Recip(a) => {
                    let mut d = g;
                    d.zip_mut_with(out, |gv, &y| *gv *= -y * y);
                    acc(*a, d, &mut grads);
                }
                Op::MaxConst(a, c) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| {
                        if x <= *c {
                            *gv = 0.0
                        }
                    });
                    acc(*a, d, &mut grads);
                }
                Op::LogI0(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |gv, &x| *gv *= bessel::i1_over_i0(x));
                    acc(*a, d, &mut grads);
                }
                Op::Atan2(y, x) => {
                    let (yv, xv) = (self.value(*y), self.value(*x));
                    let mut r2 = yv * yv;
                    r2 += &(xv * xv);
                    acc(*y, &g * xv / &r2, &mut grads);
                    acc(*x, -(&g * yv) / &r2, &mut grads);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(p, g.slice(s![.., start..start + w]).to_owned(), &mut grads);
                        start += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    acc(*a, d, &mut grads);
                }
                Op::BroadcastRows(row) => {
                    acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)), &mut grads);
                }
                Op::GatherRows(a, index) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (k, &src) in index.iter().enumerate() {
                        let mut row = d.row_mut(src);
                        row += &g.row(k);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ScatterAddRows(a, index) => {
                    acc(*a, g.select(Axis(0), index), &mut grads);
                }
                Op::MaxPoolRows(a, arg) => {
                    let mut d = Array2::zeros(self.shape(*a));
                    for (j, &i) in arg.iter().enumerate() {
                        d[[i, j]] = g[[0, j]];
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    // dx = y * (g - sum(g * y))
                    let mut d = &g * out;
                    let dots = d.sum_axis(Axis(1));
                    for (mut row, (yrow, dot)) in d.rows_mut().into_iter().zip(out.rows().into_iter().zip(dots.iter())) {
                        row.zip_mut_with(&yrow, |dv, &y| *dv -= y * dot);
                    }
                    acc(*a, d, &mut grads);
                }
                Op::LayerNormRows(a, inv_std) => {
                    // dx = inv_std * (g - mean(g) - y * mean(g * y))
                    let c = g.ncols() as f64;
                    let mut d = g.clone();
                    for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                        let yrow = out.row(r);
                        let grow = g.row(r);
                        let mean_g = grow.sum() / c;
                        let mean_gy = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum::<f64>() / c;
                        let is = inv_std[r];
                        for (k, dv) in row.iter_mut().enumerate() {
                            *dv = is * (grow[k] - mean_g - yrow[k] * mean_gy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SumAll(a) => {
                    let k = g[[0, 0]];
                    acc(*a, Array2::from_elem(self.shape(*a), k), &mut grads);
                }
                Op::WeightedLogSumExp(col, weights) => {
                    let k = g[[0, 0]];
                    let lse = out[[0, 0]];
                    let av = self.value(*col);
                    let mut d = Array2::zeros(av.dim());
                    for (j, &w) in weights.iter().enumerate() {
                        if w > 0.0 {
                            d[[j, 0]] = k * w * (av[[j, 0]] - lse).exp();
                        }
                    }
                    acc(*col, d, &mut grads);
                }
            }
        }
        param_grads
    }
}
