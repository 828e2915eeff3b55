//! Reverse-mode autodiff on a flat tape of `(batch, features)` arrays.
//!
//! Every value is an `Array2<f64>`; scalars are `(1, 1)`. Operations are
//! recorded define-by-run, and [`Tape::grad`] walks the tape backwards,
//! building the adjoint computation *as new tape nodes*. Because the
//! backward pass is itself made of tape operations, gradients can be
//! differentiated again — the energy gradient penalty takes the parameter
//! gradient of an input gradient, and that just works here.
//!
//! ```
//! use ddaebm::tape::Tape;
//! use ndarray::array;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(array![[3.0]]);
//! let y = tape.square(x); // y = x^2
//! let g = tape.grad(y, &[x])[0].unwrap(); // dy/dx = 2x
//! assert_eq!(tape.value(g)[[0, 0]], 6.0);
//! let g2 = tape.grad(g, &[x])[0].unwrap(); // d2y/dx2 = 2
//! assert_eq!(tape.value(g2)[[0, 0]], 2.0);
//! ```

use std::rc::Rc;

use ndarray::{s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// a @ b
    MatMul(Var, Var),
    /// a @ b^T
    MatMulNT(Var, Var),
    /// a^T @ b
    MatMulTN(Var, Var),
    /// (n,m) + (1,m)
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// Elementwise multiply by a constant; the constant may be full shape,
    /// a column (n,1), a row (1,m), or a scalar (1,1). Shared so backward
    /// visits never copy the payload.
    MulConst(Var, Rc<Array2<f64>>),
    /// Elementwise add a constant with the same broadcast rules.
    AddConst(Var),
    Relu(Var),
    /// min(0, x)
    NegPart(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Recip(Var),
    /// (n,m) -> (n,1)
    SumCols(Var),
    /// (n,m) -> (1,m)
    SumRows(Var),
    /// (1,m) -> (n,m)
    BroadcastRow(Var),
    /// (n,1) -> (n,m)
    BroadcastCol(Var),
    /// Concatenate along the feature axis.
    ConcatCols(Var, Var),
    /// Columns [lo, hi) of the parent.
    SliceCols(Var, usize),
    /// Place the parent's columns at offset `lo` in a zero matrix.
    PadCols(Var, usize),
    /// x * s with s a (1,1) variable (learnable scalar, e.g. PReLU slope).
    MulScalarVar(Var, Var),
}

/// Elementwise `x op c` where `c` broadcasts from (n,1), (1,m), (1,1), or
/// full shape; `add` selects addition over multiplication.
fn broadcast_apply(x: &Array2<f64>, c: &Array2<f64>, add: bool) -> Array2<f64> {
    let (n, m) = x.dim();
    let (cn, cm) = c.dim();
    assert!(
        (cn == n || cn == 1) && (cm == m || cm == 1),
        "broadcast mismatch: value {:?} vs constant {:?}",
        x.dim(),
        c.dim()
    );
    let mut out = x.clone();
    match (cn == n, cm == m) {
        (true, true) => {
            if add {
                out += c;
            } else {
                out *= c;
            }
        }
        (true, false) => {
            // (n,1) column: one scalar per row.
            for (mut row, cv) in out.rows_mut().into_iter().zip(c.column(0)) {
                if add {
                    row += *cv;
                } else {
                    row *= *cv;
                }
            }
        }
        (false, true) => {
            let crow = c.row(0);
            for mut row in out.rows_mut() {
                if add {
                    row += &crow;
                } else {
                    row *= &crow;
                }
            }
        }
        (false, false) => {
            let cv = c[(0, 0)];
            if add {
                out += cv;
            } else {
                out *= cv;
            }
        }
    }
    out
}

/// Flat autodiff tape. Create one per training phase and drop it afterwards;
/// node values live for the life of the tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar read; panics unless `v` is (1,1).
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[(0, 0)]
    }

    // ── node constructors ─────────────────────────────────────────────

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf with the same value as `v` but cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let val = self.value(v).clone();
        self.leaf(val)
    }

    pub fn zeros(&mut self, shape: (usize, usize)) -> Var {
        self.leaf(Array2::zeros(shape))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape");
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape");
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape");
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.t().dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMulTN(a, b))
    }

    /// (n,m) + (1,m): bias addition.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let m = self.shape(a).1;
        assert_eq!(self.shape(row), (1, m), "add_row shape");
        let r = self.nodes[row.0].value.row(0).to_owned();
        let mut v = self.nodes[a.0].value.clone();
        for mut line in v.rows_mut() {
            line += &r;
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a))
    }

    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        self.mul_const_rc(a, Rc::new(c))
    }

    fn mul_const_rc(&mut self, a: Var, c: Rc<Array2<f64>>) -> Var {
        let v = broadcast_apply(&self.nodes[a.0].value, &c, false);
        self.push(v, Op::MulConst(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let v = broadcast_apply(&self.nodes[a.0].value, &c, true);
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn neg_part(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.min(0.0));
        self.push(v, Op::NegPart(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let n = src.nrows();
        let v = src.sum_axis(Axis(1)).into_shape_with_order((n, 1)).expect("sum_cols shape");
        self.push(v, Op::SumCols(a))
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let m = src.ncols();
        let v = src.sum_axis(Axis(0)).into_shape_with_order((1, m)).expect("sum_rows shape");
        self.push(v, Op::SumRows(a))
    }

    /// Mean over the batch axis; (n,m) -> (1,m).
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.shape(a).0;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum of all entries; -> (1,1).
    pub fn sum_all(&mut self, a: Var) -> Var {
        let c = self.sum_cols(a);
        self.sum_rows(c)
    }

    /// Mean of all entries; -> (1,1).
    pub fn mean_all(&mut self, a: Var) -> Var {
        let (n, m) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (n * m) as f64)
    }

    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let (an, m) = self.shape(a);
        assert_eq!(an, 1, "broadcast_row expects a (1,m) node");
        let row = self.nodes[a.0].value.row(0).to_owned();
        let mut v = Array2::zeros((n, m));
        for mut line in v.rows_mut() {
            line.assign(&row);
        }
        self.push(v, Op::BroadcastRow(a))
    }

    pub fn broadcast_col(&mut self, a: Var, m: usize) -> Var {
        let (n, am) = self.shape(a);
        assert_eq!(am, 1, "broadcast_col expects a (n,1) node");
        let src = &self.nodes[a.0].value;
        let mut v = Array2::zeros((n, m));
        for (mut row, sv) in v.rows_mut().into_iter().zip(src.column(0)) {
            row.fill(*sv);
        }
        self.push(v, Op::BroadcastCol(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (n, ma) = self.shape(a);
        let (nb, mb) = self.shape(b);
        assert_eq!(n, nb, "concat_cols batch");
        let mut v = Array2::zeros((n, ma + mb));
        v.slice_mut(s![.., ..ma]).assign(&self.nodes[a.0].value);
        v.slice_mut(s![.., ma..]).assign(&self.nodes[b.0].value);
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Var {
        let v = self.nodes[a.0].value.slice(s![.., lo..hi]).to_owned();
        self.push(v, Op::SliceCols(a, lo))
    }

    pub fn pad_cols(&mut self, a: Var, lo: usize, total: usize) -> Var {
        let (n, m) = self.shape(a);
        let mut v = Array2::zeros((n, total));
        v.slice_mut(s![.., lo..lo + m]).assign(&self.nodes[a.0].value);
        self.push(v, Op::PadCols(a, lo))
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1), "mul_scalar_var expects a (1,1) scalar");
        let c = self.nodes[s.0].value[(0, 0)];
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::MulScalarVar(a, s))
    }

    // ── reverse pass ──────────────────────────────────────────────────

    /// Gradient of the scalar `loss` with respect to each `wrt` node.
    ///
    /// `None` means no path connects the node to the loss (the gradient is
    /// identically zero). Adjoints are recorded as ordinary tape nodes, so
    /// any returned gradient can itself be differentiated by a later call.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Vec<Option<Var>> {
        assert_eq!(self.shape(loss), (1, 1), "grad expects a scalar loss");
        let horizon = loss.0;
        let mut adjoint: Vec<Option<Var>> = vec![None; horizon + 1];
        adjoint[horizon] = Some(self.leaf(Array2::ones((1, 1))));

        for i in (0..=horizon).rev() {
            let g = match adjoint[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            let contribs: Vec<(Var, Var)> = match op {
                Op::Leaf => vec![],
                Op::Add(a, b) => vec![(a, g), (b, g)],
                Op::Sub(a, b) => {
                    let ng = self.neg(g);
                    vec![(a, g), (b, ng)]
                }
                Op::Mul(a, b) => {
                    let da = self.mul(g, b);
                    let db = self.mul(g, a);
                    vec![(a, da), (b, db)]
                }
                Op::MatMul(a, b) => {
                    let da = self.matmul_nt(g, b);
                    let db = self.matmul_tn(a, g);
                    vec![(a, da), (b, db)]
                }
                Op::MatMulNT(a, b) => {
                    let da = self.matmul(g, b);
                    let db = self.matmul_tn(g, a);
                    vec![(a, da), (b, db)]
                }
                Op::MatMulTN(a, b) => {
                    let da = self.matmul_nt(b, g);
                    let db = self.matmul(a, g);
                    vec![(a, da), (b, db)]
                }
                Op::AddRow(a, row) => {
                    let dr = self.sum_rows(g);
                    vec![(a, g), (row, dr)]
                }
                Op::Scale(a, c) => {
                    let da = self.scale(g, c);
                    vec![(a, da)]
                }
                Op::AddScalar(a) => vec![(a, g)],
                Op::MulConst(a, c) => {
                    let da = self.mul_const_rc(g, c);
                    vec![(a, da)]
                }
                Op::AddConst(a) => vec![(a, g)],
                Op::Relu(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    let da = self.mul_const_rc(g, Rc::new(mask));
                    vec![(a, da)]
                }
                Op::NegPart(a) => {
                    let mask = self.nodes[a.0].value.mapv(|x| if x < 0.0 { 1.0 } else { 0.0 });
                    let da = self.mul_const_rc(g, Rc::new(mask));
                    vec![(a, da)]
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let da = self.mul(g, two_a);
                    vec![(a, da)]
                }
                Op::Sqrt(a) => {
                    let out = Var(i);
                    let inv = self.recip(out);
                    let half_inv = self.scale(inv, 0.5);
                    let da = self.mul(g, half_inv);
                    vec![(a, da)]
                }
                Op::Exp(a) => {
                    let out = Var(i);
                    let da = self.mul(g, out);
                    vec![(a, da)]
                }
                Op::Recip(a) => {
                    let out = Var(i);
                    let sq = self.square(out);
                    let prod = self.mul(g, sq);
                    let da = self.neg(prod);
                    vec![(a, da)]
                }
                Op::SumCols(a) => {
                    let m = self.shape(a).1;
                    let da = self.broadcast_col(g, m);
                    vec![(a, da)]
                }
                Op::SumRows(a) => {
                    let n = self.shape(a).0;
                    let da = self.broadcast_row(g, n);
                    vec![(a, da)]
                }
                Op::BroadcastRow(a) => {
                    let da = self.sum_rows(g);
                    vec![(a, da)]
                }
                Op::BroadcastCol(a) => {
                    let da = self.sum_cols(g);
                    vec![(a, da)]
                }
                Op::ConcatCols(a, b) => {
                    let ma = self.shape(a).1;
                    let mb = self.shape(b).1;
                    let da = self.slice_cols(g, 0, ma);
                    let db = self.slice_cols(g, ma, ma + mb);
                    vec![(a, da), (b, db)]
                }
                Op::SliceCols(a, lo) => {
                    let total = self.shape(a).1;
                    let da = self.pad_cols(g, lo, total);
                    vec![(a, da)]
                }
                Op::PadCols(a, lo) => {
                    let m = self.shape(a).1;
                    let da = self.slice_cols(g, lo, lo + m);
                    vec![(a, da)]
                }
                Op::MulScalarVar(a, sv) => {
                    let da = self.mul_scalar_var(g, sv);
                    let prod = self.mul(g, a);
                    let ds = self.sum_all(prod);
                    vec![(a, da), (sv, ds)]
                }
            };
            for (parent, contrib) in contribs {
                adjoint[parent.0] = Some(match adjoint[parent.0] {
                    Some(acc) => self.add(acc, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter().map(|w| if w.0 <= horizon { adjoint[w.0] } else { None }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: (usize, usize)) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| {
            rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
        })
    }

    /// Scalar-valued graph exercising most of the op set.
    fn build_graph(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let r = tape.relu(h);
        let np = tape.neg_part(h);
        let np = tape.scale(np, 0.3);
        let h = tape.add(r, np);
        let small = tape.scale(h, 0.1);
        let e = tape.exp(small);
        let sq = tape.square(h);
        let mix = tape.add(e, sq);
        let col = tape.sum_cols(mix);
        let colsq = tape.square(col);
        let shifted = tape.add_scalar(colsq, 1.0);
        let sc = tape.sqrt(shifted);
        tape.mean_all(sc)
    }

    fn numeric_grad(
        f: &dyn Fn(&Array2<f64>) -> f64,
        at: &Array2<f64>,
        step: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(at.dim());
        for i in 0..at.nrows() {
            for j in 0..at.ncols() {
                let mut p = at.clone();
                let mut m = at.clone();
                p[(i, j)] += step;
                m[(i, j)] -= step;
                g[(i, j)] = (f(&p) - f(&m)) / (2.0 * step);
            }
        }
        g
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let x0 = randn(&mut rng, (4, 3));
        let w0 = randn(&mut rng, (3, 5));
        let b0 = randn(&mut rng, (1, 5));

        let eval = |xv: &Array2<f64>, wv: &Array2<f64>, bv: &Array2<f64>| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone());
            let w = tape.leaf(wv.clone());
            let b = tape.leaf(bv.clone());
            let y = build_graph(&mut tape, x, w, b);
            tape.scalar(y)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let b = tape.leaf(b0.clone());
        let y = build_graph(&mut tape, x, w, b);
        let grads = tape.grad(y, &[x, w, b]);

        let checks: Vec<(Array2<f64>, Array2<f64>)> = vec![
            (
                tape.value(grads[0].unwrap()).clone(),
                numeric_grad(&|v| eval(v, &w0, &b0), &x0, 1e-6),
            ),
            (
                tape.value(grads[1].unwrap()).clone(),
                numeric_grad(&|v| eval(&x0, v, &b0), &w0, 1e-6),
            ),
            (
                tape.value(grads[2].unwrap()).clone(),
                numeric_grad(&|v| eval(&x0, &w0, v), &b0, 1e-6),
            ),
        ];
        for (analytic, numeric) in checks {
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let denom = n.abs().max(1e-6);
                assert!(
                    ((a - n) / denom).abs() < 1e-5,
                    "analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn second_order_quadratic() {
        // f(x) = sum(0.5 * (x - c)^2); grad = x - c; grad of ||grad||^2 = 2(x - c).
        let c = array![[0.5, -1.0, 2.0]];
        let x0 = array![[1.0, 1.0, 1.0]];
        let neg_c = c.mapv(|v| -v);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let diff = tape.add_const(x, neg_c);
        let sq = tape.square(diff);
        let half = tape.scale(sq, 0.5);
        let f = tape.sum_all(half);
        let gx = tape.grad(f, &[x])[0].unwrap();
        assert_eq!(tape.value(gx), &(&x0 - &c));

        let gsq = tape.square(gx);
        let penalty = tape.sum_all(gsq);
        let gp = tape.grad(penalty, &[x])[0].unwrap();
        assert_eq!(tape.value(gp), &((&x0 - &c) * 2.0));
    }

    #[test]
    fn second_order_through_nonlinear_graph() {
        // Hessian-vector structure through matmul + relu + square, checked
        // against finite differences of the analytic first gradient.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w0 = randn(&mut rng, (3, 4));
        let x0 = randn(&mut rng, (2, 3));

        // penalty(w) = || d/dx f(x, w) ||^2 evaluated at x0.
        let penalty = |wv: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let w = tape.leaf(wv.clone());
            let h = tape.matmul(x, w);
            let r = tape.relu(h);
            let sq = tape.square(r);
            let f = tape.sum_all(sq);
            let gx = tape.grad(f, &[x])[0].unwrap();
            let gsq = tape.square(gx);
            let p = tape.sum_all(gsq);
            tape.scalar(p)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let w = tape.leaf(w0.clone());
        let h = tape.matmul(x, w);
        let r = tape.relu(h);
        let sq = tape.square(r);
        let f = tape.sum_all(sq);
        let gx = tape.grad(f, &[x])[0].unwrap();
        let gsq = tape.square(gx);
        let p = tape.sum_all(gsq);
        let gw = tape.grad(p, &[w])[0].unwrap();

        let numeric = numeric_grad(&penalty, &w0, 1e-6);
        for (a, n) in tape.value(gw).iter().zip(numeric.iter()) {
            let denom = n.abs().max(1e-4);
            assert!(((a - n) / denom).abs() < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn concat_slice_roundtrip_grads() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[5.0], [6.0]]);
        let cat = tape.concat_cols(a, b);
        let right = tape.slice_cols(cat, 2, 3);
        let sq = tape.square(right);
        let loss = tape.sum_all(sq);
        let grads = tape.grad(loss, &[a, b]);
        // `a` reaches the loss through the concat node, but only the sliced
        // columns carry signal, so its gradient is numerically zero.
        assert_eq!(tape.value(grads[0].unwrap()), &Array2::<f64>::zeros((2, 2)));
        assert_eq!(tape.value(grads[1].unwrap()), &array![[10.0], [12.0]]);
    }

    #[test]
    fn disconnected_returns_none() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0]]);
        let b = tape.leaf(array![[2.0]]);
        let y = tape.square(a);
        let grads = tape.grad(y, &[a, b]);
        assert!(grads[0].is_some());
        assert!(grads[1].is_none());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[3.0]]);
        let d = tape.detach(a);
        let y = tape.square(d);
        assert!(tape.grad(y, &[a])[0].is_none());
    }
}
