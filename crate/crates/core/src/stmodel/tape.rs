//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records one forward evaluation as a list of nodes, each
//! holding its value and the operation that produced it. [`Tape::backward`]
//! walks the list in reverse, accumulating adjoints, and returns the
//! gradient for every parameter leaf that was recorded.

use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use thiserror::Error;

use super::loss::{aggregate_moments, pair_nll, pair_nll_grad};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("tape was already consumed by a backward pass")]
    Consumed,
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalar { rows: usize, cols: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Sparse matrix with fixed coefficients, stored row by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub cols: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows.len(), x.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(i);
            for &(j, c) in row {
                dst.scaled_add(c, &x.row(j));
            }
        }
        out
    }

    fn apply_transposed(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.cols, g.ncols()));
        for (i, row) in self.rows.iter().enumerate() {
            let src = g.row(i);
            for &(j, c) in row {
                out.row_mut(j).scaled_add(c, &src);
            }
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(Vec::is_empty)
    }
}

/// One weak label: the rows (of the `mu`/`sigma` columns) summed into an
/// aggregate, and the observed total.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub rows: Vec<usize>,
    pub observed: f64,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ScaleRows(Var, Arc<Vec<f64>>),
    AddScalar(Var),
    Sum(Var),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatCols(Vec<Var>),
    Sparse(Var, Arc<SparseRows>),
    /// Mean negative log-likelihood of the bags given per-row mean and std.
    BagNll(Var, Var, Arc<Vec<Bag>>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf; `slot` identifies it in the gradient output.
    pub fn param(&mut self, slot: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(slot))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a[n×d] + row[1×d]`, broadcasting the row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + &self.value(row).row(0);
        self.push(v, Op::AddRow(a, row))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(stable_softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Side of the kink every recorded ReLU and clamp input lies on:
    /// `1`/`0` for active/inactive ReLU units, `-1`/`0`/`1` for below, inside
    /// and above a clamp range.
    pub fn activation_pattern(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(a) => out.extend(self.value(a).iter().map(|&x| i8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => out.extend(self.value(a).iter().map(|&x| {
                    if x < lo {
                        -1
                    } else if x > hi {
                        1
                    } else {
                        0
                    }
                })),
                _ => {}
            }
        }
        out
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Multiplies row `i` by the constant `scale[i]`.
    pub fn scale_rows(&mut self, a: Var, scale: Arc<Vec<f64>>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, &s) in v.axis_iter_mut(Axis(0)).zip(scale.iter()) {
            row *= s;
        }
        self.push(v, Op::ScaleRows(a, scale))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Var {
        let v = self.value(a).select(Axis(0), &index);
        self.push(v, Op::GatherRows(a, index))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Fixed sparse linear map `A · x`.
    pub fn sparse(&mut self, a: Var, mix: Arc<SparseRows>) -> Var {
        let v = mix.apply(self.value(a));
        self.push(v, Op::Sparse(a, mix))
    }

    /// Mean per-bag NLL; `mu` and `sigma` are column vectors indexed by the
    /// rows named in each bag. An empty bag list yields 0.
    pub fn bag_nll(&mut self, mu: Var, sigma: Var, bags: Arc<Vec<Bag>>) -> Var {
        let (m, s) = (self.value(mu), self.value(sigma));
        let total: f64 = bags
            .iter()
            .map(|bag| {
                let (mu_t, sigma_t) = aggregate_moments(bag.rows.iter().map(|&r| (m[[r, 0]], s[[r, 0]])));
                pair_nll(mu_t, sigma_t, bag.observed)
            })
            .sum();
        let mean = if bags.is_empty() { 0.0 } else { total / bags.len() as f64 };
        self.push(Array2::from_elem((1, 1), mean), Op::BagNll(mu, sigma, bags))
    }

    /// Reverse pass from the scalar `output`. Returns the adjoint of every
    /// parameter slot that appears on the tape, keyed by slot.
    pub fn backward(&mut self, output: Var) -> Result<Vec<(usize, Array2<f64>)>, TapeError> {
        if self.consumed {
            return Err(TapeError::Consumed);
        }
        let shape = self.value(output).dim();
        if shape != (1, 1) {
            return Err(TapeError::NonScalar {
                rows: shape.0,
                cols: shape.1,
            });
        }
        self.consumed = true;

        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[output.0] = Some(Array2::ones((1, 1)));
        let mut grads = Vec::new();

        fn acc(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(slot) => grads.push((*slot, g)),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj[a.0], ga);
                    acc(&mut adj[b.0], gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj[b.0], g.clone());
                    acc(&mut adj[a.0], g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj[row.0], gr);
                    acc(&mut adj[a.0], g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut adj[a.0], ga);
                    acc(&mut adj[b.0], gb);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| {
                            if x <= 0.0 {
                                *gi = 0.0
                            }
                        });
                    acc(&mut adj[a.0], ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| *gi *= sigmoid(x));
                    acc(&mut adj[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = g * &node.value;
                    acc(&mut adj[a.0], ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gi, &x| {
                            if x < *lo || x > *hi {
                                *gi = 0.0
                            }
                        });
                    acc(&mut adj[a.0], ga);
                }
                Op::ScaleRows(a, scale) => {
                    let mut ga = g;
                    for (mut row, &s) in ga.axis_iter_mut(Axis(0)).zip(scale.iter()) {
                        row *= s;
                    }
                    acc(&mut adj[a.0], ga);
                }
                Op::AddScalar(a) => acc(&mut adj[a.0], g),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    acc(&mut adj[a.0], ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in index.iter().enumerate() {
                        ga.row_mut(r).scaled_add(1.0, &g.row(k));
                    }
                    acc(&mut adj[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.value(*p).ncols();
                        let gp = g.slice(ndarray::s![.., start..start + width]).to_owned();
                        acc(&mut adj[p.0], gp);
                        start += width;
                    }
                }
                Op::Sparse(a, mix) => {
                    acc(&mut adj[a.0], mix.apply_transposed(&g));
                }
                Op::BagNll(mu, sigma, bags) => {
                    let upstream = g[[0, 0]];
                    let (m, s) = (self.value(*mu), self.value(*sigma));
                    let mut gm = Array2::zeros(m.dim());
                    let mut gs = Array2::zeros(s.dim());
                    if !bags.is_empty() {
                        let scale = upstream / bags.len() as f64;
                        for bag in bags.iter() {
                            let (mu_t, sigma_t) =
                                aggregate_moments(bag.rows.iter().map(|&r| (m[[r, 0]], s[[r, 0]])));
                            let (d_mu, d_sigma) = pair_nll_grad(mu_t, sigma_t, bag.observed);
                            // d sigma_T / d sigma_i = sigma_i / sigma_T
                            for &r in &bag.rows {
                                gm[[r, 0]] += scale * d_mu;
                                gs[[r, 0]] += scale * d_sigma * s[[r, 0]] / sigma_t;
                            }
                        }
                    }
                    acc(&mut adj[mu.0], gm);
                    acc(&mut adj[sigma.0], gs);
                }
            }
        }
        // Release forward buffers; the tape cannot be replayed.
        self.nodes.clear();
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let w = t.param(0, array![[3.0]]);
        let sq = t.mul(w, w);
        let loss = t.sum(sq);
        assert_eq!(t.scalar(loss), 9.0);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].0, 0);
        assert_eq!(g[0].1[[0, 0]], 6.0);
    }

    #[test]
    fn second_backward_fails() {
        let mut t = Tape::new();
        let w = t.param(0, array![[1.0]]);
        let loss = t.sum(w);
        t.backward(loss).unwrap();
        assert_eq!(t.backward(loss), Err(TapeError::Consumed));
    }

    #[test]
    fn non_scalar_rejected() {
        let mut t = Tape::new();
        let w = t.param(0, array![[1.0, 2.0]]);
        assert!(matches!(t.backward(w), Err(TapeError::NonScalar { rows: 1, cols: 2 })));
    }

    #[test]
    fn nll_stationary_in_mean_at_zero_residual() {
        let mut t = Tape::new();
        let mu = t.param(0, array![[100.0], [200.0]]);
        let sigma = t.param(1, array![[3.0], [4.0]]);
        let bags = Arc::new(vec![Bag {
            rows: vec![0, 1],
            observed: 300.0,
        }]);
        let loss = t.bag_nll(mu, sigma, bags);
        let grads = t.backward(loss).unwrap();
        let gmu = &grads.iter().find(|(s, _)| *s == 0).unwrap().1;
        assert_eq!(gmu[[0, 0]], 0.0);
        assert_eq!(gmu[[1, 0]], 0.0);
    }

    #[test]
    fn matmul_and_broadcast_gradients() {
        // loss = sum(relu(x W + b)); analytic check by hand.
        let mut t = Tape::new();
        let x = t.constant(array![[1.0, 2.0], [-1.0, 0.5]]);
        let w = t.param(0, array![[1.0, -1.0], [0.5, 2.0]]);
        let b = t.param(1, array![[0.1, -0.2]]);
        let xw = t.matmul(x, w);
        let z = t.add_row(xw, b);
        let r = t.relu(z);
        let loss = t.sum(r);
        // z = [[2.1, 2.8], [-0.65, 1.8]] → active mask [[1,1],[0,1]]
        assert!((t.scalar(loss) - (2.1 + 2.8 + 1.8)).abs() < 1e-12);
        let grads = t.backward(loss).unwrap();
        let gw = &grads.iter().find(|(s, _)| *s == 0).unwrap().1;
        let gb = &grads.iter().find(|(s, _)| *s == 1).unwrap().1;
        // dW = x^T · mask
        assert_eq!(gw, &array![[1.0, 0.0], [2.0, 2.5]]);
        assert_eq!(gb, &array![[1.0, 2.0]]);
    }

    #[test]
    fn sparse_map_transposes() {
        let mix = Arc::new(SparseRows {
            cols: 3,
            rows: vec![vec![(1, 0.5), (2, 0.5)], vec![], vec![(0, 1.0)]],
        });
        let mut t = Tape::new();
        let h = t.param(0, array![[1.0], [2.0], [4.0]]);
        let m = t.sparse(h, mix);
        assert_eq!(t.value(m), &array![[3.0], [0.0], [1.0]]);
        let loss = t.sum(m);
        let g = t.backward(loss).unwrap();
        assert_eq!(g[0].1, array![[1.0], [0.5], [0.5]]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(stable_softplus(800.0), 800.0);
        assert!(stable_softplus(-800.0) >= 0.0);
        assert!((stable_softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
