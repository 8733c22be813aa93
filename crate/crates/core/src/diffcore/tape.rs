//! Reverse-mode tape over dense f64 matrices.
//!
//! A `Graph` owns nodes created by its op methods; values are computed
//! eagerly on creation and `backward` replays the tape in reverse. Leaf nodes
//! share their storage via `Arc`, so model parameters are not copied into
//! each per-sample graph.

use std::rc::Rc;
use std::sync::Arc;

use ndarray::{Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    /// a + v broadcast: v is (r,1), added to every column of a.
    AddCol(Var, Var),
    /// a + v broadcast: v is (1,c), added to every row of a.
    AddRow(Var, Var),
    /// a * v broadcast: v is (r,1).
    MulCol(Var, Var),
    /// a * v broadcast: v is (1,c).
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Neg(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    ClampMin(Var, f64),
    /// Per-row sum over columns: (r,c) -> (r,1).
    RowSum(Var),
    /// Per-column sum over rows: (r,c) -> (1,c).
    ColSum(Var),
    /// Per-row mean over columns: (r,c) -> (r,1).
    RowMean(Var),
    SumAll(Var),
    /// Per-row log-sum-exp over columns: (r,c) -> (r,1).
    RowLse(Var),
    /// Per-column log-sum-exp over rows: (r,c) -> (1,c).
    ColLse(Var),
    Transpose(Var),
    ConcatRows(Var, Var),
    /// Sum of squared column differences over a directed edge list; the
    /// input is (d, n) with one column per vertex.
    EdgeSqSum(Var, Arc<Vec<[usize; 2]>>),
}

struct Node {
    value: Arc<Array2<f64>>,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. All ops panic on shape mismatch; the shapes are fixed
/// by the architecture configs, so a mismatch is a construction bug.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_shared(&mut self, value: Arc<Array2<f64>>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Extract a 1x1 node as a scalar.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        assert_eq!(a.dim(), (1, 1), "scalar() on non-1x1 node");
        a[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable/differentiated leaf (owned copy).
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing existing storage, typically a model parameter.
    pub fn param_shared(&mut self, value: Arc<Array2<f64>>, needs_grad: bool) -> Var {
        self.push_shared(value, Op::Leaf, needs_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let v = self.value(a) + self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let v = self.value(a) - self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let v = self.value(a) * self.value(b);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, rb, "matmul: inner dimensions {ra}x{ca} . {rb}x{cb}");
        let v = self.value(a).dot(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    pub fn add_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "add_col: expected ({r},1) vector");
        let v = self.value(a) + self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(v, Op::AddCol(a, col), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row: expected (1,{c}) vector");
        let v = self.value(a) + self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col: expected ({r},1) vector");
        let v = self.value(a) * self.value(col);
        let ng = self.needs(a) || self.needs(col);
        self.push(v, Op::MulCol(a, col), ng)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (_, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "mul_row: expected (1,{c}) vector");
        let v = self.value(a) * self.value(row);
        let ng = self.needs(a) || self.needs(row);
        self.push(v, Op::MulRow(a, row), ng)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        let ng = self.needs(a);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x + k);
        let ng = self.needs(a);
        self.push(v, Op::AddConst(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let ng = self.needs(a);
        self.push(v, Op::Exp(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let ng = self.needs(a);
        self.push(v, Op::Sqrt(a), ng)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::recip);
        let ng = self.needs(a);
        self.push(v, Op::Recip(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let ng = self.needs(a);
        self.push(v, Op::Neg(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).mapv(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.needs(a);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.needs(a);
        self.push(v, Op::Sigmoid(a), ng)
    }

    pub fn clamp_min(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x.max(k));
        let ng = self.needs(a);
        self.push(v, Op::ClampMin(a, k), ng)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.needs(a);
        self.push(v, Op::RowSum(a), ng)
    }

    pub fn col_sum(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.needs(a);
        self.push(v, Op::ColSum(a), ng)
    }

    pub fn row_mean(&mut self, a: Var) -> Var {
        let (_, c) = self.shape(a);
        assert!(c > 0, "row_mean over empty axis");
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1)) / c as f64;
        let ng = self.needs(a);
        self.push(v, Op::RowMean(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let ng = self.needs(a);
        self.push(v, Op::SumAll(a), ng)
    }

    pub fn row_lse(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, _) = x.dim();
        let mut out = Array2::zeros((r, 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            out[(i, 0)] = lse(row.iter().copied());
        }
        let ng = self.needs(a);
        self.push(out, Op::RowLse(a), ng)
    }

    pub fn col_lse(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (_, c) = x.dim();
        let mut out = Array2::zeros((1, c));
        for (j, col) in x.columns().into_iter().enumerate() {
            out[(0, j)] = lse(col.iter().copied());
        }
        let ng = self.needs(a);
        self.push(out, Op::ColLse(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        let ng = self.needs(a);
        self.push(v, Op::Transpose(a), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ca, cb, "concat_rows: column mismatch");
        let mut v = Array2::zeros((ra + rb, ca));
        v.slice_mut(ndarray::s![..ra, ..]).assign(self.value(a));
        v.slice_mut(ndarray::s![ra.., ..]).assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::ConcatRows(a, b), ng)
    }

    /// Sum of squared differences between columns over a directed edge list:
    /// sum over (u,v) of |x[:,u] - x[:,v]|^2, as a 1x1 node.
    pub fn edge_sq_sum(&mut self, a: Var, edges: Arc<Vec<[usize; 2]>>) -> Var {
        let x = self.value(a);
        let (_, n) = x.dim();
        let mut total = 0.0;
        for &[u, v] in edges.iter() {
            assert!(u < n && v < n, "edge index out of range");
            let d = &x.column(u) - &x.column(v);
            total += d.iter().map(|e| e * e).sum::<f64>();
        }
        let ng = self.needs(a);
        self.push(Array2::from_elem((1, 1), total), Op::EdgeSqSum(a, edges), ng)
    }

    /// Reverse pass from a 1x1 node. Gradients are retained for leaf nodes
    /// only; interior gradients are consumed as the pass walks the tape.
    /// Pass-through contributions share storage and copy on write, so long
    /// residual chains do not duplicate their gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Rc<Array2<f64>>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Rc::new(Array2::from_elem((1, 1), 1.0)));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g_rc: &Rc<Array2<f64>>, grads: &mut [Option<Rc<Array2<f64>>>]) {
        let g: &Array2<f64> = g_rc;
        let val = |v: Var| -> &Array2<f64> { &self.nodes[v.0].value };
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum_shared(grads, *a, g_rc);
                self.accum_shared(grads, *b, g_rc);
            }
            Op::Sub(a, b) => {
                self.accum_shared(grads, *a, g_rc);
                self.accum(grads, *b, || g.mapv(|x| -x));
            }
            Op::Mul(a, b) => {
                self.accum(grads, *a, || g * val(*b));
                self.accum(grads, *b, || g * val(*a));
            }
            Op::MatMul(a, b) => {
                self.accum(grads, *a, || g.dot(&val(*b).t()));
                self.accum(grads, *b, || val(*a).t().dot(g));
            }
            Op::AddCol(a, col) => {
                self.accum_shared(grads, *a, g_rc);
                self.accum(grads, *col, || g.sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::AddRow(a, row) => {
                self.accum_shared(grads, *a, g_rc);
                self.accum(grads, *row, || g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::MulCol(a, col) => {
                self.accum(grads, *a, || g * val(*col));
                self.accum(grads, *col, || (g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
            }
            Op::MulRow(a, row) => {
                self.accum(grads, *a, || g * val(*row));
                self.accum(grads, *row, || (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => self.accum(grads, *a, || g.mapv(|x| x * k)),
            Op::AddConst(a) => self.accum_shared(grads, *a, g_rc),
            Op::Exp(a) => self.accum(grads, *a, || g * out.as_ref()),
            Op::Sqrt(a) => self.accum(grads, *a, || g * &out.mapv(|y| 0.5 / y)),
            Op::Recip(a) => self.accum(grads, *a, || g * &out.mapv(|y| -y * y)),
            Op::Neg(a) => self.accum(grads, *a, || g.mapv(|x| -x)),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                self.accum(grads, *a, || {
                    let mut d = g.clone();
                    d.zip_mut_with(val(*a), |gi, &x| {
                        if x < 0.0 {
                            *gi *= slope;
                        }
                    });
                    d
                });
            }
            Op::Sigmoid(a) => self.accum(grads, *a, || g * &out.mapv(|y| y * (1.0 - y))),
            Op::ClampMin(a, k) => {
                let k = *k;
                self.accum(grads, *a, || {
                    let mut d = g.clone();
                    d.zip_mut_with(val(*a), |gi, &x| {
                        if x <= k {
                            *gi = 0.0;
                        }
                    });
                    d
                });
            }
            Op::RowSum(a) => {
                let (_, c) = val(*a).dim();
                self.accum(grads, *a, || {
                    g.broadcast((g.dim().0, c)).unwrap().to_owned()
                });
            }
            Op::ColSum(a) => {
                let (r, _) = val(*a).dim();
                self.accum(grads, *a, || g.broadcast((r, g.dim().1)).unwrap().to_owned());
            }
            Op::RowMean(a) => {
                let (_, c) = val(*a).dim();
                self.accum(grads, *a, || {
                    let scaled = g.mapv(|x| x / c as f64);
                    scaled.broadcast((g.dim().0, c)).unwrap().to_owned()
                });
            }
            Op::SumAll(a) => {
                let s = g[(0, 0)];
                let dim = val(*a).dim();
                self.accum(grads, *a, || Array2::from_elem(dim, s));
            }
            Op::RowLse(a) => {
                // d/dx lse(x) = softmax(x), using the saved output for stability.
                self.accum(grads, *a, || {
                    let x = val(*a);
                    let mut d = x.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let m = out[(i, 0)];
                        let gi = g[(i, 0)];
                        row.mapv_inplace(|v| gi * (v - m).exp());
                    }
                    d
                });
            }
            Op::ColLse(a) => {
                self.accum(grads, *a, || {
                    let x = val(*a);
                    let mut d = x.clone();
                    for (j, mut col) in d.columns_mut().into_iter().enumerate() {
                        let m = out[(0, j)];
                        let gj = g[(0, j)];
                        col.mapv_inplace(|v| gj * (v - m).exp());
                    }
                    d
                });
            }
            Op::Transpose(a) => self.accum(grads, *a, || g.t().to_owned()),
            Op::ConcatRows(a, b) => {
                let ra = val(*a).dim().0;
                self.accum(grads, *a, || g.slice(ndarray::s![..ra, ..]).to_owned());
                self.accum(grads, *b, || g.slice(ndarray::s![ra.., ..]).to_owned());
            }
            Op::EdgeSqSum(a, edges) => {
                let s = g[(0, 0)];
                self.accum(grads, *a, || {
                    let x = val(*a);
                    let mut d = Array2::zeros(x.dim());
                    for &[u, v] in edges.iter() {
                        let diff = (&x.column(u) - &x.column(v)).mapv(|e| 2.0 * s * e);
                        let mut cu = d.column_mut(u);
                        cu += &diff;
                        let mut cv = d.column_mut(v);
                        cv -= &diff;
                    }
                    d
                });
            }
        }
    }

    fn accum<F: FnOnce() -> Array2<f64>>(
        &self,
        grads: &mut [Option<Rc<Array2<f64>>>],
        v: Var,
        f: F,
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let contrib = f();
        match &mut grads[v.0] {
            Some(g) => *Rc::make_mut(g) += &contrib,
            slot @ None => *slot = Some(Rc::new(contrib)),
        }
    }

    fn accum_shared(&self, grads: &mut [Option<Rc<Array2<f64>>>], v: Var, g: &Rc<Array2<f64>>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(slot) => *Rc::make_mut(slot) += g.as_ref(),
            slot @ None => *slot = Some(Rc::clone(g)),
        }
    }
}

/// Leaf gradients from a [`Graph::backward`] pass.
pub struct Gradients {
    grads: Vec<Option<Rc<Array2<f64>>>>,
}

impl Gradients {
    /// Gradient for a leaf `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for a leaf `v`, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.grads[v.0].as_deref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }

    /// Move the gradient for a leaf `v` out, if any.
    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads[v.0]
            .take()
            .map(|rc| Rc::try_unwrap(rc).unwrap_or_else(|rc| rc.as_ref().clone()))
    }
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = values.map(|x| (x - m).exp()).sum();
    m + s.ln()
}
