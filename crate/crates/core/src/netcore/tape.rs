//! Reverse-mode differentiation over a fixed set of batched primitives.
//!
//! Every node holds a 2-D array. Rows are batch entries (source-target pairs,
//! faces or query points); columns are channels or vector components. The
//! model graph is static, so a closed primitive set with hand-written
//! adjoints is enough; each adjoint is checked against central differences in
//! the test suite.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::invariants::{self, ZERO_NORM};
use crate::kernel::envelope_scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Affine { x: Var, w: Var, b: Var },
    Silu(Var),
    Pade { num: Var, den: Var, n: i32, d: i32 },
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    TileRows(Var),
    RepeatRows { x: Var, reps: usize },
    PairAggregate { x: Var, w: Var },
    SmoothlogNorm(Var),
    LegendrePairs { a: Var, b: Var },
    Envelope(Var),
    UnitVec(Var),
    AxisBasis(Var),
    Reject { u: Var, dir: Var },
    Contract { z: Var, offset: usize, bases: Vec<Var> },
    HuberSum { e: Var, weights: Array2<f64>, delta: f64 },
    VecHuberSum { e: Var, weights: Vec<f64>, delta: f64 },
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Affine { .. } => "affine",
            Op::Silu(_) => "silu",
            Op::Pade { .. } => "pade",
            Op::SliceCols { .. } => "slice_cols",
            Op::SliceRows { .. } => "slice_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::TileRows(_) => "tile_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::PairAggregate { .. } => "pair_aggregate",
            Op::SmoothlogNorm(_) => "smoothlog_norm",
            Op::LegendrePairs { .. } => "legendre_pairs",
            Op::Envelope(_) => "envelope",
            Op::UnitVec(_) => "unit_vec",
            Op::AxisBasis(_) => "axis_basis",
            Op::Reject { .. } => "reject",
            Op::Contract { .. } => "contract",
            Op::HuberSum { .. } => "huber_sum",
            Op::VecHuberSum { .. } => "vec_huber_sum",
            Op::SumAll(_) => "sum_all",
        }
    }
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records primitive applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<(usize, &'static str)>,
}

/// Adjoints of every node after [`Tape::backward`].
pub struct Adjoints {
    grads: Vec<Option<Array2<f64>>>,
    params: Vec<(usize, usize)>,
}

impl Adjoints {
    /// Adjoint of a parameter leaf; intermediate adjoints are released
    /// during the sweep.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// `(parameter index, node)` pairs registered through [`Tape::param`].
    pub(crate) fn param_nodes(&self) -> &[(usize, usize)] {
        &self.params
    }

    pub(crate) fn take(&mut self, node: usize) -> Option<Array2<f64>> {
        self.grads[node].take()
    }
}

fn check_rows(a: &Array2<f64>, b: &Array2<f64>, what: &str) {
    assert_eq!(a.nrows(), b.nrows(), "{what}: row count mismatch");
}

/// Sums `g` down to `shape` along broadcast axes.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
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
fn signed_pow(x: f64, n: i32) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().powi(n)
    }
}

#[inline]
pub(crate) fn huber_scalar(e: f64, delta: f64) -> f64 {
    let a = e.abs();
    if a <= delta {
        0.5 * e * e
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn row(a: &Array2<f64>, i: usize) -> &[f64] {
    a.row(i).to_slice().expect("standard layout")
}

fn std_layout(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.non_finite.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.non_finite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value: std_layout(value),
            op,
            needs_grad,
        });
        Var(id)
    }

    /// First node whose forward value contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// A constant input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: Array2<f64>) -> Var {
        self.push(value, Op::Param(index), true)
    }

    fn binary(&mut self, a: Var, b: Var, op: fn(f64, f64) -> f64) -> Array2<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        let shape = (va.nrows().max(vb.nrows()), va.ncols().max(vb.ncols()));
        let va = va.broadcast(shape).expect("broadcastable lhs");
        let vb = vb.broadcast(shape).expect("broadcastable rhs");
        Zip::from(&va).and(&vb).map_collect(|&x, &y| op(x, y))
    }

    /// Elementwise `a + b`; a row vector, column vector or `[1, 1]` operand
    /// broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    /// `x W + b` with `x: [n, k]`, `W: [k, m]`, `b: [1, m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut v = self.value(x).dot(self.value(w));
        v += self.value(b);
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(v, Op::Affine { x, w, b }, ng)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|x| x * sigmoid(x));
        let ng = self.needs(x);
        self.push(v, Op::Silu(x), ng)
    }

    /// `sgn(u) |u|^n / (1 + |v|^d)`, elementwise.
    pub fn pade(&mut self, num: Var, den: Var, n: u32, d: u32) -> Var {
        let (n, d) = (n as i32, d as i32);
        let v = Zip::from(self.value(num))
            .and(self.value(den))
            .map_collect(|&u, &w| signed_pow(u, n) / (1.0 + w.abs().powi(d)));
        let ng = self.needs(num) || self.needs(den);
        self.push(v, Op::Pade { num, den, n, d }, ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        let ng = self.needs(x);
        self.push(v, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("equal row counts");
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `i` is input row `i % n`: `[S, k] -> [T*S, k]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        let views: Vec<ArrayView2<f64>> = (0..times).map(|_| xv.view()).collect();
        let v = if times == 0 {
            Array2::zeros((0, xv.ncols()))
        } else {
            ndarray::concatenate(Axis(0), &views).expect("same shape")
        };
        let ng = self.needs(x);
        self.push(v, Op::TileRows(x), ng)
    }

    /// Output row `i` is input row `i / reps`: `[T, k] -> [T*reps, k]`.
    pub fn repeat_rows(&mut self, x: Var, reps: usize) -> Var {
        let xv = self.value(x);
        let mut v = Array2::zeros((xv.nrows() * reps, xv.ncols()));
        for (i, r) in xv.rows().into_iter().enumerate() {
            v.slice_mut(s![i * reps..(i + 1) * reps, ..]).assign(&r.broadcast((reps, r.len())).unwrap());
        }
        let ng = self.needs(x);
        self.push(v, Op::RepeatRows { x, reps }, ng)
    }

    /// `out[t] = Σ_s w[s] x[t*S + s]` with `x: [T*S, m]`, `w: [S, 1]`.
    /// Summation is compensated, in source order.
    pub fn pair_aggregate(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let n_src = wv.nrows();
        assert_eq!(wv.ncols(), 1, "pair_aggregate weights must be a column");
        let n_tgt = if n_src == 0 { 0 } else { xv.nrows() / n_src };
        assert_eq!(n_tgt * n_src, xv.nrows(), "pair rows must be T*S");
        let m = xv.ncols();
        let mut v = Array2::zeros((n_tgt, m));
        let mut acc = vec![crate::sum::Neumaier::default(); m];
        for t in 0..n_tgt {
            acc.iter_mut().for_each(|a| *a = Default::default());
            for s in 0..n_src {
                let ws = wv[[s, 0]];
                for (a, &x) in acc.iter_mut().zip(row(xv, t * n_src + s)) {
                    a.add(ws * x);
                }
            }
            for (o, a) in v.row_mut(t).iter_mut().zip(&acc) {
                *o = a.value();
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(v, Op::PairAggregate { x, w }, ng)
    }

    /// `smoothlog(|v|)` per row: `[n, d] -> [n, 1]`.
    pub fn smoothlog_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_shape_fn((xv.nrows(), 1), |(i, _)| {
            invariants::magnitude_feature(row(xv, i), None)
        });
        let ng = self.needs(x);
        self.push(v, Op::SmoothlogNorm(x), ng)
    }

    /// Legendre pair features `smoothlog(|a||b|) P_i(cos θ)`, `i = 1..=order`:
    /// `[n, d] x [n, d] -> [n, order]`.
    pub fn legendre_pairs(&mut self, a: Var, b: Var, order: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        check_rows(av, bv, "legendre_pairs");
        let mut v = Array2::zeros((av.nrows(), order));
        for i in 0..av.nrows() {
            let out = v.row_mut(i).into_slice().expect("standard layout");
            invariants::pair_features(row(av, i), row(bv, i), out);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::LegendrePairs { a, b }, ng)
    }

    /// Far-field envelope of each row of `r`, with `d = ncols(r)`.
    pub fn envelope(&mut self, r: Var) -> Var {
        let rv = self.value(r);
        let dim = rv.ncols();
        let v = Array2::from_shape_fn((rv.nrows(), 1), |(i, _)| {
            envelope_scalar(invariants::dot(row(rv, i), row(rv, i)), dim).0
        });
        let ng = self.needs(r);
        self.push(v, Op::Envelope(r), ng)
    }

    /// Row-wise unit vector, zero where the norm vanishes.
    pub fn unit_vec(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut r in v.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n < ZERO_NORM {
                r.fill(0.0);
            } else {
                r /= n;
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::UnitVec(x), ng)
    }

    /// `smoothlog(|v|) v / |v|` per row.
    pub fn axis_basis(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for mut r in v.rows_mut() {
            let n = r.dot(&r).sqrt();
            if n < ZERO_NORM {
                r.fill(0.0);
            } else {
                r *= invariants::smoothlog_unchecked(n) / n;
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::AxisBasis(x), ng)
    }

    /// `-(u - (u.r) r)` per row: the negated component of `u` orthogonal to
    /// the (unit or zero) direction `r`.
    pub fn reject(&mut self, u: Var, dir: Var) -> Var {
        let (uv, rv) = (self.value(u), self.value(dir));
        check_rows(uv, rv, "reject");
        let mut v = Array2::zeros(uv.dim());
        for i in 0..uv.nrows() {
            let (ui, ri) = (row(uv, i), row(rv, i));
            let ur = invariants::dot(ui, ri);
            for (k, o) in v.row_mut(i).iter_mut().enumerate() {
                *o = -ui[k] + ur * ri[k];
            }
        }
        let ng = self.needs(u) || self.needs(dir);
        self.push(v, Op::Reject { u, dir }, ng)
    }

    /// `out[p] = Σ_j z[p, offset + j] * bases[j][p]`.
    pub fn contract(&mut self, z: Var, offset: usize, bases: &[Var]) -> Var {
        let zv = self.value(z);
        let dim = self.value(bases[0]).ncols();
        let mut v = Array2::zeros((zv.nrows(), dim));
        for (j, &b) in bases.iter().enumerate() {
            let bv = self.value(b);
            let c = zv.column(offset + j);
            Zip::from(v.rows_mut()).and(bv.rows()).and(&c).for_each(|mut o, br, &cj| {
                o.scaled_add(cj, &br);
            });
        }
        let ng = self.needs(z) || bases.iter().any(|&b| self.needs(b));
        self.push(
            v,
            Op::Contract {
                z,
                offset,
                bases: bases.to_vec(),
            },
            ng,
        )
    }

    /// `Σ weights ⊙ huber(e)` as a `[1, 1]` node.
    pub fn huber_sum(&mut self, e: Var, weights: Array2<f64>, delta: f64) -> Var {
        let ev = self.value(e);
        assert_eq!(ev.dim(), weights.dim(), "huber weights shape");
        let total = crate::sum::neumaier(
            ev.iter()
                .zip(weights.iter())
                .map(|(&x, &w)| if w == 0.0 { 0.0 } else { w * huber_scalar(x, delta) }),
        );
        let ng = self.needs(e);
        self.push(Array2::from_elem((1, 1), total), Op::HuberSum { e, weights, delta }, ng)
    }

    /// `Σ_p w_p huber(|e_p|)` over rows of a vector batch, as `[1, 1]`.
    pub fn vec_huber_sum(&mut self, e: Var, weights: Vec<f64>, delta: f64) -> Var {
        let ev = self.value(e);
        assert_eq!(ev.nrows(), weights.len(), "vector huber weights length");
        let total = crate::sum::neumaier((0..ev.nrows()).map(|i| {
            if weights[i] == 0.0 {
                0.0
            } else {
                weights[i] * huber_scalar(invariants::norm(row(ev, i)), delta)
            }
        }));
        let ng = self.needs(e);
        self.push(Array2::from_elem((1, 1), total), Op::VecHuberSum { e, weights, delta }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = crate::sum::neumaier(self.value(x).iter().copied());
        let ng = self.needs(x);
        self.push(Array2::from_elem((1, 1), total), Op::SumAll(x), ng)
    }

    /// Reverse sweep from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Result<Adjoints> {
        self.check_finite()?;
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Array2::ones((1, 1)));
        let mut params = Vec::new();
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(p) = node.op {
                params.push((p, id));
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if !g.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: id,
                });
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(Adjoints { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, id: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(g.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, reduce_to(g.clone(), self.shape(*a)));
                self.accumulate(grads, *b, reduce_to(-g, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let ga = g * self.value(*b);
                    self.accumulate(grads, *a, reduce_to(ga, self.shape(*a)));
                }
                if self.needs(*b) {
                    let gb = g * self.value(*a);
                    self.accumulate(grads, *b, reduce_to(gb, self.shape(*b)));
                }
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::Exp(a) => self.accumulate(grads, *a, g * &node.value),
            Op::Affine { x, w, b } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, g.dot(&self.value(*w).t()));
                }
                if self.needs(*w) {
                    self.accumulate(grads, *w, self.value(*x).t().dot(g));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Silu(x) => {
                let gx = Zip::from(g).and(self.value(*x)).map_collect(|&g, &x| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Pade { num, den, n, d } => {
                let (n, d) = (*n, *d);
                let (uv, wv) = (self.value(*num), self.value(*den));
                if self.needs(*num) {
                    let gu = Zip::from(g).and(uv).and(wv).map_collect(|&g, &u, &w| {
                        g * f64::from(n) * u.abs().powi(n - 1) / (1.0 + w.abs().powi(d))
                    });
                    self.accumulate(grads, *num, gu);
                }
                if self.needs(*den) {
                    let gw = Zip::from(g).and(uv).and(wv).map_collect(|&g, &u, &w| {
                        if w == 0.0 {
                            return 0.0;
                        }
                        let q = 1.0 + w.abs().powi(d);
                        -g * signed_pow(u, n) * f64::from(d) * w.abs().powi(d - 1) * w.signum() / (q * q)
                    });
                    self.accumulate(grads, *den, gw);
                }
            }
            Op::SliceCols { x, start } => {
                let mut gx = Array2::zeros(self.shape(*x));
                gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let mut gx = Array2::zeros(self.shape(*x));
                gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice(s![.., c..c + w]).to_owned());
                    }
                    c += w;
                }
            }
            Op::TileRows(x) => {
                let n = self.shape(*x).0;
                let mut gx = Array2::zeros(self.shape(*x));
                if n > 0 {
                    for chunk in g.axis_chunks_iter(Axis(0), n) {
                        gx += &chunk;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::RepeatRows { x, reps } => {
                let mut gx = Array2::zeros(self.shape(*x));
                for (i, chunk) in g.axis_chunks_iter(Axis(0), (*reps).max(1)).enumerate() {
                    if i < gx.nrows() {
                        gx.row_mut(i).assign(&chunk.sum_axis(Axis(0)));
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::PairAggregate { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let n_src = wv.nrows();
                let n_tgt = g.nrows();
                if self.needs(*x) {
                    let mut gx = Array2::zeros(xv.dim());
                    for t in 0..n_tgt {
                        for s in 0..n_src {
                            gx.row_mut(t * n_src + s).scaled_add(wv[[s, 0]], &g.row(t));
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*w) {
                    let mut gw = Array2::zeros((n_src, 1));
                    for t in 0..n_tgt {
                        let gt = g.row(t);
                        for s in 0..n_src {
                            gw[[s, 0]] += gt.dot(&xv.row(t * n_src + s));
                        }
                    }
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::SmoothlogNorm(x) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let out = gx.row_mut(i).into_slice().unwrap();
                    invariants::magnitude_feature(row(xv, i), Some((g[[i, 0]], out)));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LegendrePairs { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Array2::zeros(av.dim());
                let mut gb = Array2::zeros(bv.dim());
                for i in 0..av.nrows() {
                    invariants::pair_features_backward(
                        row(av, i),
                        row(bv, i),
                        row(g, i),
                        ga.row_mut(i).into_slice().unwrap(),
                        gb.row_mut(i).into_slice().unwrap(),
                    );
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Envelope(r) => {
                let rv = self.value(*r);
                let dim = rv.ncols();
                let mut gr = Array2::zeros(rv.dim());
                for i in 0..rv.nrows() {
                    let ri = row(rv, i);
                    let (_, dq) = envelope_scalar(invariants::dot(ri, ri), dim);
                    let k = 2.0 * g[[i, 0]] * dq;
                    for (o, x) in gr.row_mut(i).iter_mut().zip(ri) {
                        *o = k * x;
                    }
                }
                self.accumulate(grads, *r, gr);
            }
            Op::UnitVec(x) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let xi = row(xv, i);
                    let n = invariants::norm(xi);
                    if n < ZERO_NORM {
                        continue;
                    }
                    let gi = row(g, i);
                    let gu = invariants::dot(gi, xi) / n;
                    for (k, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = (gi[k] - gu * xi[k] / n) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AxisBasis(x) => {
                let xv = self.value(*x);
                let mut gx = Array2::zeros(xv.dim());
                for i in 0..xv.nrows() {
                    let xi = row(xv, i);
                    let n = invariants::norm(xi);
                    if n < ZERO_NORM {
                        continue;
                    }
                    let gi = row(g, i);
                    let q = invariants::dot(gi, xi);
                    let s = invariants::smoothlog_unchecked(n);
                    let ds = invariants::smoothlog_derivative(n);
                    let k_v = q * (ds / (n * n) - s / (n * n * n));
                    let k_g = s / n;
                    for (k, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = k_v * xi[k] + k_g * gi[k];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reject { u, dir } => {
                let (uv, rv) = (self.value(*u), self.value(*dir));
                let mut gu = Array2::zeros(uv.dim());
                let mut gr = Array2::zeros(rv.dim());
                for i in 0..uv.nrows() {
                    let (ui, ri, gi) = (row(uv, i), row(rv, i), row(g, i));
                    let gr_dot = invariants::dot(gi, ri);
                    let ur = invariants::dot(ui, ri);
                    for k in 0..ui.len() {
                        gu[[i, k]] = -gi[k] + gr_dot * ri[k];
                        gr[[i, k]] = ui[k] * gr_dot + ur * gi[k];
                    }
                }
                self.accumulate(grads, *u, gu);
                self.accumulate(grads, *dir, gr);
            }
            Op::Contract { z, offset, bases } => {
                let zv = self.value(*z);
                if self.needs(*z) {
                    let mut gz = Array2::zeros(zv.dim());
                    for (j, &b) in bases.iter().enumerate() {
                        let bv = self.value(b);
                        let mut col = gz.column_mut(offset + j);
                        Zip::from(&mut col).and(g.rows()).and(bv.rows()).for_each(|o, gr, br| {
                            *o = gr.dot(&br);
                        });
                    }
                    self.accumulate(grads, *z, gz);
                }
                for (j, &b) in bases.iter().enumerate() {
                    if self.needs(b) {
                        let c = zv.column(offset + j);
                        let gb = g * &c.insert_axis(Axis(1));
                        self.accumulate(grads, b, gb);
                    }
                }
            }
            Op::HuberSum { e, weights, delta } => {
                let g0 = g[[0, 0]];
                let ge = Zip::from(self.value(*e))
                    .and(weights)
                    .map_collect(|&x, &w| g0 * w * x.clamp(-*delta, *delta));
                self.accumulate(grads, *e, ge);
            }
            Op::VecHuberSum { e, weights, delta } => {
                let g0 = g[[0, 0]];
                let ev = self.value(*e);
                let mut ge = Array2::zeros(ev.dim());
                for i in 0..ev.nrows() {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let ei = row(ev, i);
                    let n = invariants::norm(ei);
                    let k = if n <= *delta { 1.0 } else { *delta / n };
                    for (o, x) in ge.row_mut(i).iter_mut().zip(ei) {
                        *o = g0 * weights[i] * k * x;
                    }
                }
                self.accumulate(grads, *e, ge);
            }
            Op::SumAll(x) => {
                let gx = Array2::from_elem(self.shape(*x), g[[0, 0]]);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}
