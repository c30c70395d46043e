//! Tape-based reverse-mode automatic differentiation over `f64` matrices.
//!
//! All values are `Array2<f64>`; scalars are 1x1 and row/column vectors are
//! 1xD / Nx1. Operations record their backward pass on a [`Tape`]; calling
//! [`Tape::backward`] on a 1x1 loss node returns the gradient of that loss
//! with respect to every leaf.
//!
//! The tape is append-only, so node indices are already a topological order
//! and the backward sweep is a single reverse pass.

use std::cell::RefCell;
use std::ops::Range;
use std::rc::Rc;

use ndarray::{concatenate, s, Array2, Axis};

type BackFn = Box<dyn Fn(&Array2<f64>, &[bool]) -> Vec<Option<Array2<f64>>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackFn>,
}

/// Recording tape. Create one per forward pass (or per truncation window).
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Sparse 0/1 matrix stored as an edge list, for neighbor sums at scale
/// where a dense adjacency would be wasteful.
#[derive(Clone, Debug)]
pub struct SparseMat {
    pub rows: usize,
    pub cols: usize,
    /// (row, col) positions holding 1.
    pub entries: Vec<(usize, usize)>,
}

impl SparseMat {
    /// y = S . x  (rows x cols) . (cols x d)
    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((self.rows, d));
        for &(i, j) in &self.entries {
            let src = x.row(j).to_owned();
            let mut dst = out.row_mut(i);
            dst += &src;
        }
        out
    }

    /// y = S^T . x
    fn apply_t(&self, x: &Array2<f64>) -> Array2<f64> {
        let d = x.ncols();
        let mut out = Array2::zeros((self.cols, d));
        for &(i, j) in &self.entries {
            let src = x.row(i).to_owned();
            let mut dst = out.row_mut(j);
            dst += &src;
        }
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        value: Array2<f64>,
        parents: Vec<usize>,
        needs_grad: bool,
        backward: Option<BackFn>,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            value,
            parents,
            needs_grad,
            backward: if needs_grad { backward } else { None },
        });
        Var { tape: self, idx }
    }

    /// A differentiable input (parameter).
    pub fn leaf(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, vec![], true, None)
    }

    /// A non-differentiable input (data, masks).
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, vec![], false, None)
    }

    fn value_of(&self, idx: usize) -> Array2<f64> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn dim_of(&self, idx: usize) -> (usize, usize) {
        self.nodes.borrow()[idx].value.dim()
    }

    fn needs_grad(&self, idx: usize) -> bool {
        self.nodes.borrow()[idx].needs_grad
    }

    /// Reverse sweep from a 1x1 loss node. Returns per-node gradients.
    pub fn backward(&self, loss: Var<'_>) -> Grads {
        assert!(std::ptr::eq(loss.tape, self), "loss var from another tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.idx].value.dim(), (1, 1), "loss must be 1x1");
        let mut slots: Vec<Option<Array2<f64>>> = (0..nodes.len()).map(|_| None).collect();
        slots[loss.idx] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.idx).rev() {
            if slots[idx].is_none() || !nodes[idx].needs_grad {
                continue;
            }
            let Some(back) = &nodes[idx].backward else {
                continue;
            };
            let need: Vec<bool> = nodes[idx]
                .parents
                .iter()
                .map(|&p| nodes[p].needs_grad)
                .collect();
            let g = slots[idx].as_ref().unwrap();
            let contribs = back(g, &need);
            debug_assert_eq!(contribs.len(), nodes[idx].parents.len());
            for (&p, c) in nodes[idx].parents.iter().zip(contribs) {
                if let Some(c) = c {
                    debug_assert_eq!(c.dim(), nodes[p].value.dim());
                    match &mut slots[p] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
        }
        Grads { slots }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var<'_>) -> Array2<f64> {
        match &self.slots[v.idx] {
            Some(g) => g.clone(),
            None => Array2::zeros(v.tape.dim_of(v.idx)),
        }
    }
}

fn same_tape<'t>(a: Var<'t>, b: Var<'t>) {
    assert!(std::ptr::eq(a.tape, b.tape), "vars from different tapes");
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.value_of(self.idx)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.tape.dim_of(self.idx)
    }

    fn unary(
        &self,
        value: Array2<f64>,
        backward: impl Fn(&Array2<f64>) -> Array2<f64> + 'static,
    ) -> Var<'t> {
        let needs = self.tape.needs_grad(self.idx);
        self.tape.push(
            value,
            vec![self.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![if need[0] { Some(backward(g)) } else { None }]
            })),
        )
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        assert_eq!(self.dim(), other.dim(), "add: shape mismatch");
        let value = self.value() + &other.value();
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.clone()),
                ]
            })),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        assert_eq!(self.dim(), other.dim(), "sub: shape mismatch");
        let value = self.value() - &other.value();
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| g.clone()), need[1].then(|| -g)]
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        assert_eq!(self.dim(), other.dim(), "mul: shape mismatch");
        let a = self.value();
        let b = other.value();
        let value = &a * &b;
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![need[0].then(|| g * &b), need[1].then(|| g * &a)]
            })),
        )
    }

    /// Elementwise quotient.
    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        assert_eq!(self.dim(), other.dim(), "div: shape mismatch");
        let a = self.value();
        let b = other.value();
        let value = &a / &b;
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g / &b),
                    need[1].then(|| -(g * &a) / (&b * &b)),
                ]
            })),
        )
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        same_tape(*self, other);
        let a = self.value();
        let b = other.value();
        assert_eq!(a.ncols(), b.nrows(), "matmul: inner dims differ");
        let value = a.dot(&b);
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(other.idx);
        self.tape.push(
            value,
            vec![self.idx, other.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.dot(&b.t())),
                    need[1].then(|| a.t().dot(g)),
                ]
            })),
        )
    }

    /// Product with a constant sparse 0/1 matrix on the left: `S . self`.
    pub fn sparse_premul(&self, mat: &SparseMat) -> Var<'t> {
        assert_eq!(mat.cols, self.dim().0, "sparse_premul: shape mismatch");
        let mat = Rc::new(mat.clone());
        let value = mat.apply(&self.value());
        let m = Rc::clone(&mat);
        self.unary(value, move |g| m.apply_t(g))
    }

    pub fn t(&self) -> Var<'t> {
        let value = self.value().t().to_owned();
        self.unary(value, |g| g.t().to_owned())
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = self.value() * c;
        self.unary(value, move |g| g * c)
    }

    /// Add a constant to every entry.
    pub fn shift(&self, c: f64) -> Var<'t> {
        let value = self.value() + c;
        self.unary(value, |g| g.clone())
    }

    /// Broadcast-add a 1xD row (bias) to an NxD matrix.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        same_tape(*self, row);
        let (_, d) = self.dim();
        assert_eq!(row.dim(), (1, d), "add_row: bias must be 1xD");
        let value = &self.value() + &row.value();
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(row.idx);
        self.tape.push(
            value,
            vec![self.idx, row.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g.clone()),
                    need[1].then(|| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ]
            })),
        )
    }

    /// Broadcast-multiply by a 1x1 scalar variable.
    pub fn mul_scalar(&self, scalar: Var<'t>) -> Var<'t> {
        same_tape(*self, scalar);
        assert_eq!(scalar.dim(), (1, 1), "mul_scalar: scalar must be 1x1");
        let x = self.value();
        let s = scalar.value()[[0, 0]];
        let value = &x * s;
        let needs = self.tape.needs_grad(self.idx) || self.tape.needs_grad(scalar.idx);
        self.tape.push(
            value,
            vec![self.idx, scalar.idx],
            needs,
            Some(Box::new(move |g, need| {
                vec![
                    need[0].then(|| g * s),
                    need[1].then(|| {
                        let mut out = Array2::zeros((1, 1));
                        out[[0, 0]] = (g * &x).sum();
                        out
                    }),
                ]
            })),
        )
    }

    /// Tile a 1xD row into NxD.
    pub fn repeat_rows(&self, n: usize) -> Var<'t> {
        let (r, d) = self.dim();
        assert_eq!(r, 1, "repeat_rows: input must be 1xD");
        let row = self.value();
        let mut value = Array2::zeros((n, d));
        for mut out in value.rows_mut() {
            out.assign(&row.row(0));
        }
        self.unary(value, |g| g.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }

    /// Tile an Nx1 column into NxK.
    pub fn repeat_cols(&self, k: usize) -> Var<'t> {
        let (n, c) = self.dim();
        assert_eq!(c, 1, "repeat_cols: input must be Nx1");
        let col = self.value();
        let mut value = Array2::zeros((n, k));
        for mut out in value.columns_mut() {
            out.assign(&col.column(0));
        }
        self.unary(value, |g| g.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Var<'t> {
        let (n, d) = self.dim();
        assert!(range.end <= d, "slice_cols: out of bounds");
        let value = self
            .value()
            .slice(s![.., range.start..range.end])
            .to_owned();
        let r = range.clone();
        self.unary(value, move |g| {
            let mut out = Array2::zeros((n, d));
            out.slice_mut(s![.., r.start..r.end]).assign(g);
            out
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        let x = self.value();
        let value = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        self.unary(value, move |g| {
            let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { slope });
            g * &mask
        })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let value = self.value().mapv(sigmoid_scalar);
        let y = value.clone();
        self.unary(value, move |g| g * &(&y * &y.mapv(|v| 1.0 - v)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let value = self.value().mapv(f64::tanh);
        let y = value.clone();
        self.unary(value, move |g| g * &y.mapv(|v| 1.0 - v * v))
    }

    pub fn exp(&self) -> Var<'t> {
        let value = self.value().mapv(f64::exp);
        let y = value.clone();
        self.unary(value, move |g| g * &y)
    }

    pub fn ln(&self) -> Var<'t> {
        let x = self.value();
        let value = x.mapv(f64::ln);
        self.unary(value, move |g| g / &x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        let value = self.value().mapv(f64::sqrt);
        let y = value.clone();
        self.unary(value, move |g| g / &(&y * 2.0))
    }

    /// Numerically stable `ln(1 + e^x)`; gradient is the logistic function.
    pub fn softplus(&self) -> Var<'t> {
        let x = self.value();
        let value = x.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        self.unary(value, move |g| g * &x.mapv(sigmoid_scalar))
    }

    /// Integer power, n >= 1.
    pub fn powi(&self, n: i32) -> Var<'t> {
        assert!(n >= 1, "powi: exponent must be >= 1");
        let x = self.value();
        let value = x.mapv(|v| v.powi(n));
        self.unary(value, move |g| {
            g * &x.mapv(|v| f64::from(n) * v.powi(n - 1))
        })
    }

    /// Clamp with pass-through gradient strictly inside the range.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.value();
        let value = x.mapv(|v| v.clamp(lo, hi));
        self.unary(value, move |g| {
            let mask = x.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
            g * &mask
        })
    }

    pub fn sum_all(&self) -> Var<'t> {
        let dim = self.dim();
        let total = self.value().sum();
        let mut value = Array2::zeros((1, 1));
        value[[0, 0]] = total;
        self.unary(value, move |g| Array2::from_elem(dim, g[[0, 0]]))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let (n, d) = self.dim();
        let len = (n * d) as f64;
        self.sum_all().scale(1.0 / len)
    }

    /// Row sums: NxD -> Nx1.
    pub fn sum_rows(&self) -> Var<'t> {
        let (_, d) = self.dim();
        let value = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(value, move |g| {
            let n = g.nrows();
            let mut out = Array2::zeros((n, d));
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.fill(g[[i, 0]]);
            }
            out
        })
    }

    /// Column sums: NxD -> 1xD.
    pub fn sum_cols(&self) -> Var<'t> {
        let (n, _) = self.dim();
        let value = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(value, move |g| {
            let d = g.ncols();
            let mut out = Array2::zeros((n, d));
            for (j, mut col) in out.columns_mut().into_iter().enumerate() {
                col.fill(g[[0, j]]);
            }
            out
        })
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        let value = softmax_rows_value(&self.value());
        let y = value.clone();
        self.unary(value, move |g| {
            let weighted = g * &y;
            let row_dot = weighted.sum_axis(Axis(1)).insert_axis(Axis(1));
            &y * &(g - &row_dot)
        })
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        let x = self.value();
        let sm = softmax_rows_value(&x);
        let value = &x - &log_sum_exp_rows_value(&x);
        self.unary(value, move |g| {
            let row_sum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            g - &(&sm * &row_sum)
        })
    }

    /// Row-wise log-sum-exp: NxK -> Nx1.
    pub fn logsumexp_rows(&self) -> Var<'t> {
        let x = self.value();
        let value = log_sum_exp_rows_value(&x);
        let sm = softmax_rows_value(&x);
        self.unary(value, move |g| {
            let k = sm.ncols();
            let mut out = sm.clone();
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row *= g[[i, 0]];
            }
            debug_assert_eq!(out.ncols(), k);
            out
        })
    }

    /// Row-wise softmax restricted to entries where `mask` is nonzero;
    /// masked entries are exactly 0 in the output. Rows that are entirely
    /// masked come out as all zeros.
    pub fn masked_softmax_rows(&self, mask: &Array2<f64>) -> Var<'t> {
        let x = self.value();
        assert_eq!(x.dim(), mask.dim(), "masked_softmax: shape mismatch");
        let (n, k) = x.dim();
        let mut value = Array2::zeros((n, k));
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                if mask[[i, j]] != 0.0 {
                    mx = mx.max(x[[i, j]]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut denom = 0.0;
            for j in 0..k {
                if mask[[i, j]] != 0.0 {
                    let e = (x[[i, j]] - mx).exp();
                    value[[i, j]] = e;
                    denom += e;
                }
            }
            for j in 0..k {
                value[[i, j]] /= denom;
            }
        }
        let y = value.clone();
        self.unary(value, move |g| {
            let weighted = g * &y;
            let row_dot = weighted.sum_axis(Axis(1)).insert_axis(Axis(1));
            &y * &(g - &row_dot)
        })
    }
}

/// Column-wise concatenation of same-height matrices.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols: empty input");
    let tape = parts[0].tape;
    for p in parts {
        same_tape(parts[0], *p);
    }
    let values: Vec<Array2<f64>> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].nrows();
    for v in &values {
        assert_eq!(v.nrows(), n, "concat_cols: row count mismatch");
    }
    let views: Vec<_> = values.iter().map(|v| v.view()).collect();
    let value = concatenate(Axis(1), &views).expect("concat_cols");
    let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
    let needs = parts.iter().any(|p| tape.needs_grad(p.idx));
    tape.push(
        value,
        parts.iter().map(|p| p.idx).collect(),
        needs,
        Some(Box::new(move |g, need| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for (w, &needed) in widths.iter().zip(need) {
                let slice = g.slice(s![.., start..start + w]).to_owned();
                out.push(needed.then_some(slice));
                start += w;
            }
            out
        })),
    )
}

pub(crate) fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn log_sum_exp_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut out = Array2::zeros((n, 1));
    for (i, row) in x.rows().into_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        out[[i, 0]] = mx + sum.ln();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.5..1.5))
    }

    /// Central finite differences of `f` w.r.t. each entry of the input at
    /// position `which` among `inputs`.
    fn finite_diff(
        inputs: &[Array2<f64>],
        which: usize,
        f: &dyn Fn(&[Array2<f64>]) -> f64,
    ) -> Array2<f64> {
        let h = 1e-6;
        let mut grads = Array2::zeros(inputs[which].dim());
        for idx in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            {
                let slice = plus[which].as_slice_mut().unwrap();
                slice[idx] += h;
            }
            {
                let slice = minus[which].as_slice_mut().unwrap();
                slice[idx] -= h;
            }
            let df = (f(&plus) - f(&minus)) / (2.0 * h);
            grads.as_slice_mut().unwrap()[idx] = df;
        }
        grads
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64, what: &str) {
        assert_eq!(a.dim(), b.dim(), "{what}: shape");
        for (x, y) in a.iter().zip(b.iter()) {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom < tol,
                "{what}: {x} vs {y} (tol {tol})"
            );
        }
    }

    /// Check the tape gradient of a scalar-valued builder against finite
    /// differences for every input.
    fn grad_check(inputs: &[Array2<f64>], build: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&tape, &vars);
        let grads = tape.backward(loss);
        let eval = |xs: &[Array2<f64>]| -> f64 {
            let t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
            build(&t, &vs).value()[[0, 0]]
        };
        for which in 0..inputs.len() {
            let fd = finite_diff(inputs, which, &eval);
            let an = grads.get(vars[which]);
            assert_close(&an, &fd, 1e-5, &format!("input {which}"));
        }
    }

    #[test]
    fn add_mul_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 3, 4);
        let w = random_matrix(&mut rng, 4, 2);
        grad_check(&[a, b, w], &|_t, vs| {
            vs[0].add(vs[1]).mul(vs[0]).matmul(vs[2]).sum_all()
        });
    }

    #[test]
    fn sub_div_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 2, 3).mapv(|v| v + 3.0); // away from 0
        grad_check(&[a, b], &|_t, vs| vs[0].sub(vs[1]).div(vs[1]).sum_all());
    }

    #[test]
    fn activation_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 4, 3);
        grad_check(&[x.clone()], &|_t, vs| vs[0].sigmoid().sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].tanh().sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].leaky_relu(0.01).sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].exp().sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].softplus().sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].powi(3).sum_all());
        let pos = x.mapv(|v| v.abs() + 0.5);
        grad_check(&[pos.clone()], &|_t, vs| vs[0].ln().sum_all());
        grad_check(&[pos], &|_t, vs| vs[0].sqrt().sum_all());
    }

    #[test]
    fn broadcast_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_matrix(&mut rng, 5, 3);
        let b = random_matrix(&mut rng, 1, 3);
        let s = random_matrix(&mut rng, 1, 1);
        let c = random_matrix(&mut rng, 5, 1);
        grad_check(&[x.clone(), b], &|_t, vs| vs[0].add_row(vs[1]).powi(2).sum_all());
        grad_check(&[x.clone(), s], &|_t, vs| vs[0].mul_scalar(vs[1]).powi(2).sum_all());
        grad_check(&[c], &|_t, vs| vs[0].repeat_cols(4).powi(2).sum_all());
        let row = random_matrix(&mut rng, 1, 3);
        grad_check(&[row], &|_t, vs| vs[0].repeat_rows(6).powi(2).sum_all());
    }

    #[test]
    fn reduction_and_softmax_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_matrix(&mut rng, 4, 5);
        grad_check(&[x.clone()], &|_t, vs| vs[0].sum_rows().powi(2).sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].sum_cols().powi(2).sum_all());
        grad_check(&[x.clone()], &|_t, vs| vs[0].softmax_rows().powi(2).sum_all());
        grad_check(&[x.clone()], &|_t, vs| {
            vs[0].log_softmax_rows().powi(2).sum_all()
        });
        grad_check(&[x.clone()], &|_t, vs| {
            vs[0].logsumexp_rows().powi(2).sum_all()
        });
        grad_check(&[x], &|_t, vs| vs[0].mean_all());
    }

    #[test]
    fn masked_softmax_matches_dense_when_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_matrix(&mut rng, 4, 4);
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let full = Array2::ones((4, 4));
        let a = v.masked_softmax_rows(&full).value();
        let b = v.softmax_rows().value();
        assert_close(&a, &b, 1e-12, "masked vs dense");
    }

    #[test]
    fn masked_softmax_grads_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_matrix(&mut rng, 4, 4);
        let mut mask = Array2::ones((4, 4));
        mask[[0, 1]] = 0.0;
        mask[[2, 0]] = 0.0;
        mask[[2, 3]] = 0.0;
        let m = mask.clone();
        grad_check(&[x.clone()], &|_t, vs| {
            vs[0].masked_softmax_rows(&m).powi(2).sum_all()
        });
        let tape = Tape::new();
        let y = tape.leaf(x).masked_softmax_rows(&mask).value();
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[2, 0]], 0.0);
        for i in 0..4 {
            let s: f64 = y.row(i).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_slice_transpose_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 3, 2);
        let b = random_matrix(&mut rng, 3, 4);
        grad_check(&[a.clone(), b.clone()], &|_t, vs| {
            concat_cols(&[vs[0], vs[1]]).powi(2).sum_all()
        });
        grad_check(&[b.clone()], &|_t, vs| vs[0].slice_cols(1..3).powi(2).sum_all());
        grad_check(&[a], &|_t, vs| vs[0].t().matmul(vs[0]).sum_all());
        grad_check(&[b], &|_t, vs| vs[0].clamp(-0.7, 0.9).powi(2).sum_all());
    }

    #[test]
    fn sparse_premul_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_matrix(&mut rng, 5, 3);
        let mut dense = Array2::zeros((4, 5));
        let entries = vec![(0, 1), (0, 4), (2, 2), (3, 0), (3, 4)];
        for &(i, j) in &entries {
            dense[[i, j]] = 1.0;
        }
        let sparse = SparseMat {
            rows: 4,
            cols: 5,
            entries,
        };
        let tape = Tape::new();
        let v = tape.leaf(x.clone());
        let via_sparse = v.sparse_premul(&sparse).value();
        assert_close(&via_sparse, &dense.dot(&x), 1e-12, "sparse forward");
        let sp = sparse.clone();
        grad_check(&[x], &|_t, vs| vs[0].sparse_premul(&sp).powi(2).sum_all());
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        // y = x + x; dy/dx = 2
        let tape = Tape::new();
        let x = tape.leaf(array![[3.0]]);
        let y = x.add(x);
        let grads = tape.backward(y);
        assert_eq!(grads.get(x)[[0, 0]], 2.0);
    }

    #[test]
    fn constants_get_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let c = tape.constant(array![[5.0]]);
        let y = x.mul(c).sum_all();
        let grads = tape.backward(y);
        assert_eq!(grads.get(x)[[0, 0]], 5.0);
        assert_eq!(grads.get(c)[[0, 0]], 0.0);
    }

    #[test]
    fn unused_leaf_has_zero_grad() {
        let tape = Tape::new();
        let x = tape.leaf(array![[2.0]]);
        let unused = tape.leaf(array![[7.0, 1.0]]);
        let y = x.powi(2).sum_all();
        let grads = tape.backward(y);
        assert_eq!(grads.get(unused), Array2::zeros((1, 2)));
        assert_eq!(grads.get(x)[[0, 0]], 4.0);
    }
}
