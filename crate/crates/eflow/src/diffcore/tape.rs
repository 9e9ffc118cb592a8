use std::cell::RefCell;

use crate::diffcore::matrix::{lu_decompose, lu_solve, mat_inverse, sym_eigen, Matrix};
use crate::error::{Error, Result};

/// Clamp inside the Euclidean-norm backward rule; the gradient at
/// coincident points is defined as zero.
pub const EPS_NORM: f64 = 1e-12;
/// Guard for sqrt and fractional powers at zero.
pub const EPS_SQRT: f64 = 1e-12;
/// Clamp for logit inversion of sigmoid outputs.
pub const EPS_SIG: f64 = 1e-6;
/// atanh inputs are clamped to |x| <= 1 - ATANH_CLAMP.
pub const ATANH_CLAMP: f64 = 1e-9;
/// Default negative slope for leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Pointwise nonlinearity used by flow layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    /// True when inversion becomes unstable for saturated outputs, which
    /// is what the activity penalty regularizes.
    pub fn saturating(self) -> bool {
        matches!(self, Activation::Tanh | Activation::Sigmoid)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Max(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Abs(usize),
    Square(usize),
    Sqrt(usize),
    Powf(usize, f64),
    Exp(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    ColMean(usize),
    L2NormRows(usize),
    L1NormRows(usize),
    GatherRows(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    AddBias(usize, usize),
    AddScalar(usize, usize),
    SolveRight(usize, usize),
    LogAbsDet(usize),
    LeakyReluInv(usize, f64),
    Logit(usize),
    Atanh(usize),
    LogActDeriv(usize, Activation),
    TraceSqrtProduct(usize, Matrix),
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    op: Op,
}

/// Wengert tape over dense matrices. One tape lives for one training
/// step; nodes are appended in topological order and replayed in
/// reverse by `backward`.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<Vec<usize>>,
}

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), params: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, values: Vec<f64>, op: Op) -> Var<'_> {
        debug_assert_eq!(values.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { rows, cols, values, op });
        Var { tape: self, id, rows, cols }
    }

    /// Record an immutable value. No gradient is accumulated for it.
    pub fn constant(&self, m: &Matrix) -> Result<Var<'_>> {
        m.require_finite("constant")?;
        Ok(self.push(m.rows(), m.cols(), m.data().to_vec(), Op::Leaf))
    }

    /// Record a trainable parameter leaf.
    pub fn param(&self, m: &Matrix) -> Result<Var<'_>> {
        m.require_finite("parameter")?;
        let v = self.push(m.rows(), m.cols(), m.data().to_vec(), Op::Leaf);
        self.params.borrow_mut().push(v.id);
        Ok(v)
    }

    pub fn scalar_constant(&self, v: f64) -> Result<Var<'_>> {
        self.constant(&Matrix::from_vec(1, 1, vec![v])?)
    }

    fn values_of(&self, id: usize) -> Vec<f64> {
        self.nodes.borrow()[id].values.clone()
    }

    fn matrix_of(&self, id: usize) -> Matrix {
        let nodes = self.nodes.borrow();
        let n = &nodes[id];
        Matrix::from_vec(n.rows, n.cols, n.values.clone()).expect("tape node shape")
    }

    /// Reverse sweep from a scalar root. Returns per-node adjoints; the
    /// root's own gradient is 1.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        if root.rows != 1 || root.cols != 1 {
            return Err(Error::Contract(format!(
                "backward root must be 1x1, got {}x{}",
                root.rows, root.cols
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            self.accumulate(&nodes, &mut grads, node, &g)?;
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| (n.rows, n.cols)).collect();
        Ok(Gradients { grads, shapes, params: self.params.borrow().clone() })
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate(
        &self,
        nodes: &[Node],
        grads: &mut [Option<Vec<f64>>],
        node: &Node,
        g: &[f64],
    ) -> Result<()> {
        fn add_to(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
            let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].values.len()]);
            f(slot);
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (&nodes[*a], &nodes[*b]);
                let gm = Matrix::from_vec(node.rows, node.cols, g.to_vec())?;
                let amat = Matrix::from_vec(am.rows, am.cols, am.values.clone())?;
                let bmat = Matrix::from_vec(bm.rows, bm.cols, bm.values.clone())?;
                let ga = gm.matmul(&bmat.transpose())?;
                let gb = amat.transpose().matmul(&gm)?;
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(ga.data()) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for (x, y) in s.iter_mut().zip(gb.data()) {
                        *x += y;
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (node.rows, node.cols);
                add_to(grads, nodes, *a, |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::Sub(a, b) => {
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[*a].values.clone();
                let bv = nodes[*b].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Max(a, b) => {
                let av = nodes[*a].values.clone();
                let bv = nodes[*b].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        if av[i] >= bv[i] {
                            s[i] += g[i];
                        }
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for i in 0..s.len() {
                        if av[i] < bv[i] {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += c * y;
                    }
                });
            }
            Op::AddConst(a) => {
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::LeakyRelu(a, alpha) => {
                let av = nodes[*a].values.clone();
                let alpha = *alpha;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * if av[i] > 0.0 { 1.0 } else { alpha };
                    }
                });
            }
            Op::Tanh(a) => {
                let out = &node.values;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.values;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Abs(a) => {
                let av = nodes[*a].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        let sign = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        s[i] += g[i] * sign;
                    }
                });
            }
            Op::Square(a) => {
                let av = nodes[*a].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 2.0 * av[i];
                    }
                });
            }
            Op::Sqrt(a) => {
                let av = nodes[*a].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * 0.5 / av[i].max(EPS_SQRT).sqrt();
                    }
                });
            }
            Op::Powf(a, e) => {
                let av = nodes[*a].values.clone();
                let e = *e;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * e * av[i].max(EPS_SQRT).powf(e - 1.0);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &node.values;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * out[i];
                    }
                });
            }
            Op::Recip(a) => {
                let out = &node.values;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] -= g[i] * out[i] * out[i];
                    }
                });
            }
            Op::Sum(a) => {
                add_to(grads, nodes, *a, |s| {
                    for x in s.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Mean(a) => {
                let n = nodes[*a].values.len() as f64;
                add_to(grads, nodes, *a, |s| {
                    for x in s.iter_mut() {
                        *x += g[0] / n;
                    }
                });
            }
            Op::RowSum(a) => {
                let cols = nodes[*a].cols;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..nodes[*a].rows {
                        for j in 0..cols {
                            s[i * cols + j] += g[i];
                        }
                    }
                });
            }
            Op::ColMean(a) => {
                let (rows, cols) = (nodes[*a].rows, nodes[*a].cols);
                add_to(grads, nodes, *a, |s| {
                    for i in 0..rows {
                        for j in 0..cols {
                            s[i * cols + j] += g[j] / rows as f64;
                        }
                    }
                });
            }
            Op::L2NormRows(a) => {
                let av = nodes[*a].values.clone();
                let cols = nodes[*a].cols;
                let norms = &node.values;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..norms.len() {
                        let denom = norms[i].max(EPS_NORM);
                        for j in 0..cols {
                            s[i * cols + j] += g[i] * av[i * cols + j] / denom;
                        }
                    }
                });
            }
            Op::L1NormRows(a) => {
                let av = nodes[*a].values.clone();
                let cols = nodes[*a].cols;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..nodes[*a].rows {
                        for j in 0..cols {
                            let v = av[i * cols + j];
                            let sign = if v > 0.0 {
                                1.0
                            } else if v < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            s[i * cols + j] += g[i] * sign;
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = nodes[*a].cols;
                add_to(grads, nodes, *a, |s| {
                    for (out_row, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            s[src * cols + j] += g[out_row * cols + j];
                        }
                    }
                });
            }
            Op::SliceCols(a, start, len) => {
                let cols = nodes[*a].cols;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..node.rows {
                        for j in 0..*len {
                            s[i * cols + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::AddBias(a, b) => {
                let cols = node.cols;
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    for i in 0..node.rows {
                        for j in 0..cols {
                            s[j] += g[i * cols + j];
                        }
                    }
                });
            }
            Op::AddScalar(a, b) => {
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *b, |s| {
                    s[0] += g.iter().sum::<f64>();
                });
            }
            Op::SolveRight(a, r) => {
                // X = R·A⁻¹ ; grad_R = G·A⁻ᵀ, grad_A = −Xᵀ·grad_R.
                let amat = self_matrix(nodes, *a);
                let gmat = Matrix::from_vec(node.rows, node.cols, g.to_vec())?;
                let grad_r = crate::diffcore::matrix::mat_solve(&amat, &gmat.transpose())?.transpose();
                let x = Matrix::from_vec(node.rows, node.cols, node.values.clone())?;
                let grad_a = x.transpose().matmul(&grad_r)?.scale(-1.0);
                add_to(grads, nodes, *r, |s| {
                    for (x, y) in s.iter_mut().zip(grad_r.data()) {
                        *x += y;
                    }
                });
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(grad_a.data()) {
                        *x += y;
                    }
                });
            }
            Op::LogAbsDet(a) => {
                let amat = self_matrix(nodes, *a);
                let inv_t = mat_inverse(&amat)?.transpose();
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(inv_t.data()) {
                        *x += g[0] * y;
                    }
                });
            }
            Op::LeakyReluInv(a, alpha) => {
                let av = nodes[*a].values.clone();
                let alpha = *alpha;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * if av[i] >= 0.0 { 1.0 } else { 1.0 / alpha };
                    }
                });
            }
            Op::Logit(a) => {
                let av = nodes[*a].values.clone();
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        let v = av[i];
                        if v > EPS_SIG && v < 1.0 - EPS_SIG {
                            s[i] += g[i] / (v * (1.0 - v));
                        }
                    }
                });
            }
            Op::Atanh(a) => {
                let av = nodes[*a].values.clone();
                let lim = 1.0 - ATANH_CLAMP;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        let v = av[i];
                        if v.abs() < lim {
                            s[i] += g[i] / (1.0 - v * v);
                        }
                    }
                });
            }
            Op::LogActDeriv(a, act) => {
                let av = nodes[*a].values.clone();
                let act = *act;
                add_to(grads, nodes, *a, |s| {
                    for i in 0..s.len() {
                        let v = av[i];
                        let d = match act {
                            Activation::Identity | Activation::LeakyRelu => 0.0,
                            Activation::Tanh => {
                                if v.abs() < 1.0 - ATANH_CLAMP {
                                    -2.0 * v / (1.0 - v * v)
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => {
                                if v > EPS_SIG && v < 1.0 - EPS_SIG {
                                    (1.0 - 2.0 * v) / (v * (1.0 - v))
                                } else {
                                    0.0
                                }
                            }
                        };
                        s[i] += g[i] * d;
                    }
                });
            }
            Op::TraceSqrtProduct(a, g_half) => {
                let amat = self_matrix(nodes, *a);
                let m = g_half.matmul(&amat)?.matmul(g_half)?;
                let sym = m.add(&m.transpose())?.scale(0.5);
                let (vals, vecs) = sym_eigen(&sym)?;
                let n = sym.rows();
                // d tr(M^{1/2}) = tr(½ M^{-1/2} dM) with dM = G½ dA G½.
                let mut half_inv_sqrt = Matrix::zeros(n, n);
                for (k, &lam) in vals.iter().enumerate() {
                    let w = 0.5 / lam.max(EPS_SQRT).sqrt();
                    for i in 0..n {
                        for j in 0..n {
                            let v = half_inv_sqrt.get(i, j) + w * vecs.get(i, k) * vecs.get(j, k);
                            half_inv_sqrt.set(i, j, v);
                        }
                    }
                }
                let grad_a = g_half.matmul(&half_inv_sqrt)?.matmul(g_half)?;
                add_to(grads, nodes, *a, |s| {
                    for (x, y) in s.iter_mut().zip(grad_a.data()) {
                        *x += g[0] * y;
                    }
                });
            }
        }
        Ok(())
    }
}

fn self_matrix(nodes: &[Node], id: usize) -> Matrix {
    let n = &nodes[id];
    Matrix::from_vec(n.rows, n.cols, n.values.clone()).expect("tape node shape")
}

/// Adjoints produced by a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to any recorded tensor; zero if the root
    /// does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Matrix {
        let (r, c) = self.shapes[v.id];
        match &self.grads[v.id] {
            Some(g) => Matrix::from_vec(r, c, g.clone()).expect("gradient shape"),
            None => Matrix::zeros(r, c),
        }
    }

    /// Gradients of every recorded parameter, in registration order.
    pub fn param_gradients(&self) -> Vec<Matrix> {
        self.params
            .iter()
            .map(|&id| {
                let (r, c) = self.shapes[id];
                match &self.grads[id] {
                    Some(g) => Matrix::from_vec(r, c, g.clone()).expect("gradient shape"),
                    None => Matrix::zeros(r, c),
                }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

impl<'t> Var<'t> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Matrix {
        self.tape.matrix_of(self.id)
    }

    pub fn scalar(&self) -> Result<f64> {
        if self.rows != 1 || self.cols != 1 {
            return Err(Error::Contract(format!("scalar() on {}x{} tensor", self.rows, self.cols)));
        }
        Ok(self.tape.values_of(self.id)[0])
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "{what} on {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn unary(&self, values: Vec<f64>, op: Op) -> Var<'t> {
        self.tape.push(self.rows, self.cols, values, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let a = self.value();
        let b = other.value();
        let out = a.matmul(&b)?;
        Ok(self.tape.push(self.rows, other.cols, out.data().to_vec(), Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(&self) -> Var<'t> {
        let t = self.value().transpose();
        self.tape.push(self.cols, self.rows, t.data().to_vec(), Op::Transpose(self.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "add")?;
        let v = self.value().add(&other.value())?;
        Ok(self.unary(v.data().to_vec(), Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "sub")?;
        let v = self.value().sub(&other.value())?;
        Ok(self.unary(v.data().to_vec(), Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "mul")?;
        let v = self.value().zip_with(&other.value(), |a, b| a * b)?;
        Ok(self.unary(v.data().to_vec(), Op::Mul(self.id, other.id)))
    }

    pub fn max(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_shape(&other, "max")?;
        let v = self.value().zip_with(&other.value(), f64::max)?;
        Ok(self.unary(v.data().to_vec(), Op::Max(self.id, other.id)))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().scale(c);
        self.unary(v.data().to_vec(), Op::Scale(self.id, c))
    }

    pub fn add_const(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.unary(v.data().to_vec(), Op::AddConst(self.id))
    }

    pub fn leaky_relu(&self, alpha: f64) -> Result<Var<'t>> {
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("leaky_relu slope must be positive, got {alpha}")));
        }
        let v = self.value().map(|x| if x > 0.0 { x } else { alpha * x });
        Ok(self.unary(v.data().to_vec(), Op::LeakyRelu(self.id, alpha)))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v.data().to_vec(), Op::Tanh(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v.data().to_vec(), Op::Sigmoid(self.id))
    }

    pub fn abs(&self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v.data().to_vec(), Op::Abs(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.value().map(|x| x * x);
        self.unary(v.data().to_vec(), Op::Square(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(EPS_SQRT).sqrt());
        self.unary(v.data().to_vec(), Op::Sqrt(self.id))
    }

    pub fn powf(&self, e: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0).powf(e));
        self.unary(v.data().to_vec(), Op::Powf(self.id, e))
    }

    pub fn exp(&self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v.data().to_vec(), Op::Exp(self.id))
    }

    /// Elementwise 1/x. Entries too close to zero are rejected.
    pub fn recip(&self) -> Result<Var<'t>> {
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(vs.len());
        for &v in &vs {
            if v.abs() < 1e-300 {
                return Err(Error::Domain("reciprocal of zero".into()));
            }
            out.push(1.0 / v);
        }
        Ok(self.unary(out, Op::Recip(self.id)))
    }

    pub fn apply_activation(&self, act: Activation, alpha: f64) -> Result<Var<'t>> {
        match act {
            Activation::Identity => Ok(*self),
            Activation::LeakyRelu => self.leaky_relu(alpha),
            Activation::Tanh => Ok(self.tanh()),
            Activation::Sigmoid => Ok(self.sigmoid()),
        }
    }

    fn nonempty(&self, what: &str) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Domain(format!("{what} on empty tensor")));
        }
        Ok(())
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        self.nonempty("sum")?;
        let s: f64 = self.tape.values_of(self.id).iter().sum();
        Ok(self.tape.push(1, 1, vec![s], Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.nonempty("mean")?;
        let vs = self.tape.values_of(self.id);
        let s: f64 = vs.iter().sum::<f64>() / vs.len() as f64;
        Ok(self.tape.push(1, 1, vec![s], Op::Mean(self.id)))
    }

    pub fn row_sum(&self) -> Result<Var<'t>> {
        self.nonempty("row_sum")?;
        let vs = self.tape.values_of(self.id);
        let out: Vec<f64> = (0..self.rows)
            .map(|i| vs[i * self.cols..(i + 1) * self.cols].iter().sum())
            .collect();
        Ok(self.tape.push(self.rows, 1, out, Op::RowSum(self.id)))
    }

    pub fn col_mean(&self) -> Result<Var<'t>> {
        self.nonempty("col_mean")?;
        let vs = self.tape.values_of(self.id);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j] += vs[i * self.cols + j];
            }
        }
        for v in out.iter_mut() {
            *v /= self.rows as f64;
        }
        Ok(self.tape.push(1, self.cols, out, Op::ColMean(self.id)))
    }

    pub fn l2_norm_rows(&self) -> Result<Var<'t>> {
        self.nonempty("l2_norm_rows")?;
        let vs = self.tape.values_of(self.id);
        let out: Vec<f64> = (0..self.rows)
            .map(|i| {
                vs[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(self.tape.push(self.rows, 1, out, Op::L2NormRows(self.id)))
    }

    pub fn l1_norm_rows(&self) -> Result<Var<'t>> {
        self.nonempty("l1_norm_rows")?;
        let vs = self.tape.values_of(self.id);
        let out: Vec<f64> = (0..self.rows)
            .map(|i| vs[i * self.cols..(i + 1) * self.cols].iter().map(|v| v.abs()).sum())
            .collect();
        Ok(self.tape.push(self.rows, 1, out, Op::L1NormRows(self.id)))
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t>> {
        for &i in idx {
            if i >= self.rows {
                return Err(Error::Dimension(format!("gather index {i} out of {} rows", self.rows)));
            }
        }
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(&vs[i * self.cols..(i + 1) * self.cols]);
        }
        Ok(self.tape.push(idx.len(), self.cols, out, Op::GatherRows(self.id, idx.to_vec())))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        if start + len > self.cols {
            return Err(Error::Dimension(format!(
                "slice_cols [{start}, {}) out of {} columns",
                start + len,
                self.cols
            )));
        }
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            out.extend_from_slice(&vs[i * self.cols + start..i * self.cols + start + len]);
        }
        Ok(self.tape.push(self.rows, len, out, Op::SliceCols(self.id, start, len)))
    }

    /// Broadcast-add a 1×d bias row to every row.
    pub fn add_bias(&self, bias: Var<'t>) -> Result<Var<'t>> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Dimension(format!(
                "add_bias {}x{} with bias {}x{}",
                self.rows, self.cols, bias.rows, bias.cols
            )));
        }
        let vs = self.tape.values_of(self.id);
        let bs = self.tape.values_of(bias.id);
        let mut out = Vec::with_capacity(vs.len());
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.push(vs[i * self.cols + j] + bs[j]);
            }
        }
        Ok(self.unary(out, Op::AddBias(self.id, bias.id)))
    }

    /// Broadcast-add a 1×1 scalar tensor to every entry.
    pub fn add_scalar(&self, s: Var<'t>) -> Result<Var<'t>> {
        if s.rows != 1 || s.cols != 1 {
            return Err(Error::Contract(format!("add_scalar with {}x{} operand", s.rows, s.cols)));
        }
        let sv = self.tape.values_of(s.id)[0];
        let vs = self.tape.values_of(self.id);
        let out: Vec<f64> = vs.iter().map(|v| v + sv).collect();
        Ok(self.unary(out, Op::AddScalar(self.id, s.id)))
    }

    /// Self is the right-hand side R; returns R·A⁻¹.
    pub fn solve_right(&self, a: Var<'t>) -> Result<Var<'t>> {
        if a.rows != a.cols || a.rows != self.cols {
            return Err(Error::Dimension(format!(
                "solve_right {}x{} against {}x{}",
                self.rows, self.cols, a.rows, a.cols
            )));
        }
        let amat = a.value();
        // R·A⁻¹ = (A⁻ᵀ·Rᵀ)ᵀ, via one factorization of Aᵀ.
        let f = lu_decompose(&amat.transpose())?;
        let xt = lu_solve(&f, &self.value().transpose())?;
        let x = xt.transpose();
        Ok(self.tape.push(self.rows, self.cols, x.data().to_vec(), Op::SolveRight(a.id, self.id)))
    }

    pub fn log_abs_det(&self) -> Result<Var<'t>> {
        if self.rows != self.cols {
            return Err(Error::Dimension(format!("log_abs_det on {}x{}", self.rows, self.cols)));
        }
        let f = lu_decompose(&self.value())?;
        Ok(self.tape.push(1, 1, vec![f.log_abs_det()], Op::LogAbsDet(self.id)))
    }

    pub fn leaky_relu_inv(&self, alpha: f64) -> Result<Var<'t>> {
        if alpha <= 0.0 {
            return Err(Error::Domain(format!("leaky_relu slope must be positive, got {alpha}")));
        }
        let v = self.value().map(|x| if x >= 0.0 { x } else { x / alpha });
        Ok(self.unary(v.data().to_vec(), Op::LeakyReluInv(self.id, alpha)))
    }

    /// Inverse sigmoid. Inputs must lie in [0,1]; values inside are
    /// clamped to [EPS_SIG, 1−EPS_SIG] before the logit.
    pub fn logit(&self) -> Result<Var<'t>> {
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(vs.len());
        for &v in &vs {
            if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                return Err(Error::Domain(format!("sigmoid inverse input {v} outside [0, 1]")));
            }
            let u = v.clamp(EPS_SIG, 1.0 - EPS_SIG);
            out.push((u / (1.0 - u)).ln());
        }
        Ok(self.unary(out, Op::Logit(self.id)))
    }

    /// Inverse tanh with clamping near ±1.
    pub fn atanh(&self) -> Result<Var<'t>> {
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(vs.len());
        for &v in &vs {
            if v.abs() > 1.0 + 1e-12 {
                return Err(Error::Domain(format!("tanh inverse input {v} outside [-1, 1]")));
            }
            let u = v.clamp(-(1.0 - ATANH_CLAMP), 1.0 - ATANH_CLAMP);
            out.push(u.atanh());
        }
        Ok(self.unary(out, Op::Atanh(self.id)))
    }

    pub fn inverse_activation(&self, act: Activation, alpha: f64) -> Result<Var<'t>> {
        match act {
            Activation::Identity => Ok(*self),
            Activation::LeakyRelu => self.leaky_relu_inv(alpha),
            Activation::Tanh => self.atanh(),
            Activation::Sigmoid => self.logit(),
        }
    }

    /// log|act′(a)| expressed as a function of the activation output.
    pub fn log_act_deriv(&self, act: Activation, alpha: f64) -> Result<Var<'t>> {
        let vs = self.tape.values_of(self.id);
        let mut out = Vec::with_capacity(vs.len());
        for &v in &vs {
            let d = match act {
                Activation::Identity => 0.0,
                Activation::LeakyRelu => {
                    if v >= 0.0 {
                        0.0
                    } else {
                        alpha.ln()
                    }
                }
                Activation::Tanh => {
                    let u = v.clamp(-(1.0 - ATANH_CLAMP), 1.0 - ATANH_CLAMP);
                    (1.0 - u * u).ln()
                }
                Activation::Sigmoid => {
                    let u = v.clamp(EPS_SIG, 1.0 - EPS_SIG);
                    u.ln() + (1.0 - u).ln()
                }
            };
            out.push(d);
        }
        Ok(self.unary(out, Op::LogActDeriv(self.id, act)))
    }

    /// tr((G^{1/2}·A·G^{1/2})^{1/2}) for a constant symmetric PSD factor
    /// G^{1/2}. Used by the Fréchet objective where only one covariance
    /// carries gradients.
    pub fn trace_sqrt_product(&self, g_half: &Matrix) -> Result<Var<'t>> {
        if self.rows != self.cols || g_half.rows() != self.rows || g_half.cols() != self.rows {
            return Err(Error::Dimension(format!(
                "trace_sqrt_product on {}x{} with factor {}x{}",
                self.rows,
                self.cols,
                g_half.rows(),
                g_half.cols()
            )));
        }
        let a = self.value();
        let m = g_half.matmul(&a)?.matmul(g_half)?;
        let sym = m.add(&m.transpose())?.scale(0.5);
        let (vals, _) = sym_eigen(&sym)?;
        let mut tr = 0.0;
        for &lam in &vals {
            if lam < -1e-8 {
                return Err(Error::Numeric(format!(
                    "trace_sqrt_product met eigenvalue {lam:.3e} below tolerance"
                )));
            }
            tr += lam.max(0.0).sqrt();
        }
        Ok(self
            .tape
            .push(1, 1, vec![tr], Op::TraceSqrtProduct(self.id, g_half.clone())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>, at: f64) -> (f64, f64) {
        let tape = Tape::new();
        let x = tape.param(&Matrix::from_vec(1, 1, vec![at]).unwrap()).unwrap();
        let y = build(&tape, x).unwrap();
        let g = tape.backward(y).unwrap();
        (y.scalar().unwrap(), g.wrt(x).get(0, 0))
    }

    #[test]
    fn leaky_relu_negative_side() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::from_vec(1, 1, vec![-1.0]).unwrap()).unwrap();
        let y = x.leaky_relu(0.01).unwrap();
        assert_eq!(y.scalar().unwrap(), -0.01);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::from_vec(1, 1, vec![0.0]).unwrap()).unwrap();
        assert_eq!(x.sigmoid().scalar().unwrap(), 0.5);
    }

    #[test]
    fn abs_backward_sign() {
        let (v, g) = scalar_grad(|_, x| Ok(x.abs()), -3.0);
        assert_eq!(v, 3.0);
        assert_eq!(g, -1.0);
    }

    #[test]
    fn square_backward() {
        let (v, g) = scalar_grad(|_, x| Ok(x.square()), 3.0);
        assert_eq!(v, 9.0);
        assert_eq!(g, 6.0);
    }

    #[test]
    fn l2_norm_rows_hand_value() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::from_vec(1, 2, vec![3.0, 4.0]).unwrap()).unwrap();
        let n = x.l2_norm_rows().unwrap();
        assert_eq!(n.value().data(), &[5.0]);
    }

    #[test]
    fn l2_norm_zero_row_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&Matrix::from_vec(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let n = x.l2_norm_rows().unwrap().sum().unwrap();
        assert_eq!(n.scalar().unwrap(), 0.0);
        let g = tape.backward(n).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn sum_of_zeros() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(x.sum().unwrap().scalar().unwrap(), 0.0);
    }

    #[test]
    fn backward_linear_map_gradient() {
        // root = sum(W·x) → grad_W = x broadcast per row.
        let tape = Tape::new();
        let w = tape.param(&Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let x = tape.constant(&Matrix::from_vec(2, 1, vec![5.0, 7.0]).unwrap()).unwrap();
        let root = w.matmul(x).unwrap().sum().unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(w).data(), &[5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn backward_constant_root_empty_param_map() {
        let tape = Tape::new();
        let c = tape.scalar_constant(2.5).unwrap();
        let g = tape.backward(c).unwrap();
        assert_eq!(g.param_count(), 0);
        assert!(g.param_gradients().is_empty());
        // Gradient of the root with respect to itself is 1.
        assert_eq!(g.wrt(c).get(0, 0), 1.0);
    }

    #[test]
    fn backward_norm_of_coincident_points_is_zero() {
        let tape = Tape::new();
        let p = tape.param(&Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let q = tape.constant(&Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let root = p.sub(q).unwrap().l2_norm_rows().unwrap().sum().unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_non_scalar_root_rejected() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_records_both_parent_gradients() {
        let tape = Tape::new();
        let a = tape.param(&Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.param(&Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
        let y = a.matmul(b).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(a).data(), &[3.0, 4.0]);
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_rows_scatter_adds() {
        let tape = Tape::new();
        let x = tape.param(&Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = x.gather_rows(&[0, 0, 2]).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn solve_right_inverts_linear_system() {
        let tape = Tape::new();
        let a = tape.constant(&Matrix::from_vec(2, 2, vec![2.0, 0.0, 1.0, 4.0]).unwrap()).unwrap();
        let r = tape.constant(&Matrix::from_vec(1, 2, vec![2.0, 4.0]).unwrap()).unwrap();
        let x = r.solve_right(a).unwrap();
        let back = x.value().matmul(&a.value()).unwrap();
        assert!(back.sub(&r.value()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn log_abs_det_identity() {
        let tape = Tape::new();
        let a = tape.constant(&Matrix::identity(3)).unwrap();
        assert_eq!(a.log_abs_det().unwrap().scalar().unwrap(), 0.0);
    }

    #[test]
    fn zero_width_matmul_gives_zeros() {
        let tape = Tape::new();
        let a = tape.constant(&Matrix::zeros(3, 0)).unwrap();
        let b = tape.constant(&Matrix::zeros(0, 2)).unwrap();
        let y = a.matmul(b).unwrap();
        assert_eq!(y.value().data(), &[0.0; 6]);
    }

    #[test]
    fn logit_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(&Matrix::from_vec(1, 1, vec![1.2]).unwrap()).unwrap();
        assert!(matches!(x.logit(), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let tape = Tape::new();
            let w = tape
                .param(&Matrix::from_vec(2, 2, vec![0.3, -0.7, 1.1, 0.2]).unwrap())
                .unwrap();
            let x = tape.constant(&Matrix::from_vec(3, 2, vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap()).unwrap();
            let y = x.matmul(w).unwrap().tanh().square().mean().unwrap();
            let g = tape.backward(y).unwrap();
            g.wrt(w).data().to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
