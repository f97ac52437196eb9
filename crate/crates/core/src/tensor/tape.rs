use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed B-spline support for a grid-to-particle transfer: for each
/// particle, the lower corner of its 3x3x3 node block and the node rows.
#[derive(Debug, Clone)]
pub struct G2pStencil {
    pub delta: f64,
    pub base: Vec<[i64; 3]>,
    pub rows: Vec<[usize; 27]>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Square(usize),
    Sqrt(usize),
    Sum(usize),
    Mean(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    SegmentMean(usize, Vec<Vec<usize>>),
    ColMax(usize, Vec<usize>),
    ColMidrange(usize, Vec<(usize, usize)>),
    PosEnc(usize, usize),
    G2p(usize, usize, Box<G2pStencil>),
    GroundEdit(usize, Vec<bool>, f64),
    SelectRows(Vec<bool>, usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Every value is a row-major matrix; scalars are 1x1.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

pub const GROUND_EPS: f64 = 1e-10;

/// Quadratic B-spline kernel, support 1.5 cells.
pub fn bspline_weight(u: f64) -> f64 {
    let a = u.abs();
    if a <= 0.5 {
        0.75 - a * a
    } else if a <= 1.5 {
        0.5 * (1.5 - a) * (1.5 - a)
    } else {
        0.0
    }
}

pub fn bspline_dweight(u: f64) -> f64 {
    let a = u.abs();
    if a <= 0.5 {
        -2.0 * u
    } else if a <= 1.5 {
        -(1.5 - a) * u.signum()
    } else {
        0.0
    }
}

fn gemm(m: usize, k: usize, n: usize, a: (&[f64], isize, isize), b: (&[f64], isize, isize), c: &mut [f64]) {
    // c (m x n, row-major) += a (m x k) * b (k x n), arbitrary strides.
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
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

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&v| self.nodes[v].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor { shape: vec![n.rows, n.cols], data: n.value.clone(), requires_grad: false, grad: None }
    }

    pub fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::Shape { op: "leaf", left: vec![rows, cols], right: vec![data.len()] });
        }
        Ok(self.push(rows, cols, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Record a tensor as a leaf, tracking gradients if it asks for them.
    pub fn tensor(&mut self, t: &Tensor) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.data.clone(), Op::Leaf, t.requires_grad)
    }

    fn shape_err(&self, op: &'static str, a: usize, b: usize) -> Error {
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        Error::Shape { op, left: vec![na.rows, na.cols], right: vec![nb.rows, nb.cols] }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.shape_err("matmul", a.0, b.0));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&self.nodes[a.0].value, k as isize, 1),
            (&self.nodes[b.0].value, n as isize, 1),
            &mut out,
        );
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), ng))
    }

    fn zip(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a.0, b.0));
        }
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| f(*x, *y)).collect();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// `a + row`, broadcasting a 1 x c row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(self.shape_err("add_row", a.0, row.0));
        }
        let rv = &self.nodes[row.0].value;
        let out = self.nodes[a.0].value.chunks(c.max(1)).flat_map(|x| x.iter().zip(rv).map(|(p, q)| p + q)).collect();
        let ng = self.ng(&[a.0, row.0]);
        Ok(self.push(r, c, out, Op::AddRow(a.0, row.0), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        let ng = self.ng(&[a.0]);
        self.push(r, c, out, Op::Scale(a.0, k), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.shape(a);
        let out = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let ng = self.ng(&[a.0]);
        self.push(r, c, out, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(&[a.0]);
        self.push(1, 1, vec![s], Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let ng = self.ng(&[a.0]);
        self.push(1, 1, vec![s], Op::Mean(a.0), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).0 != rows) {
            return Err(self.shape_err("concat_cols", parts[0].0, bad.0));
        }
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let n = &self.nodes[p.0];
                out.extend_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&idx);
        Ok(self.push(rows, cols, out, Op::ConcatCols(idx), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        if let Some(bad) = parts.iter().find(|p| self.shape(**p).1 != cols) {
            return Err(self.shape_err("concat_rows", parts[0].0, bad.0));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
            rows += self.nodes[p.0].rows;
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let ng = self.ng(&idx);
        Ok(self.push(rows, cols, out, Op::ConcatRows(idx), ng))
    }

    /// Output row `i` is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::Shape { op: "gather_rows", left: vec![r, c], right: vec![bad] });
        }
        let v = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(index.len(), c, out, Op::GatherRows(a.0, index), ng))
    }

    /// Row `i` of `a` is added into output row `index[i]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, out_rows: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if index.len() != r || index.iter().any(|&i| i >= out_rows) {
            return Err(Error::Shape { op: "scatter_add_rows", left: vec![r, c], right: vec![index.len(), out_rows] });
        }
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; out_rows * c];
        for (src, &dst) in index.iter().enumerate() {
            for j in 0..c {
                out[dst * c + j] += v[src * c + j];
            }
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(out_rows, c, out, Op::ScatterAddRows(a.0, index), ng))
    }

    /// Output row `g` is the mean of rows `groups[g]` of `a`; empty groups
    /// give a zero row.
    pub fn segment_mean(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if let Some(&bad) = groups.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::Shape { op: "segment_mean", left: vec![r, c], right: vec![bad] });
        }
        let v = &self.nodes[a.0].value;
        let mut out = vec![0.0; groups.len() * c];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let o = &mut out[g * c..(g + 1) * c];
            for &i in members {
                for (x, y) in o.iter_mut().zip(&v[i * c..(i + 1) * c]) {
                    *x += y;
                }
            }
            let inv = 1.0 / members.len() as f64;
            o.iter_mut().for_each(|x| *x *= inv);
        }
        let ng = self.ng(&[a.0]);
        Ok(self.push(groups.len(), c, out, Op::SegmentMean(a.0, groups), ng))
    }

    /// Column-wise maximum over rows (1 x c); ties go to the lowest row.
    pub fn col_max(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Contract("col_max of an empty matrix".into()));
        }
        let v = &self.nodes[a.0].value;
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                if v[i * c + j] > v[arg[j] * c + j] {
                    arg[j] = i;
                }
            }
        }
        let out = arg.iter().enumerate().map(|(j, &i)| v[i * c + j]).collect();
        let ng = self.ng(&[a.0]);
        Ok(self.push(1, c, out, Op::ColMax(a.0, arg), ng))
    }

    /// Per column `(min + max) / 2`, i.e. the bounding-box center.
    pub fn col_midrange(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r == 0 {
            return Err(Error::Contract("col_midrange of an empty matrix".into()));
        }
        let v = &self.nodes[a.0].value;
        let mut arg = vec![(0usize, 0usize); c];
        for i in 1..r {
            for j in 0..c {
                if v[i * c + j] < v[arg[j].0 * c + j] {
                    arg[j].0 = i;
                }
                if v[i * c + j] > v[arg[j].1 * c + j] {
                    arg[j].1 = i;
                }
            }
        }
        let out = arg.iter().enumerate().map(|(j, &(lo, hi))| 0.5 * (v[lo * c + j] + v[hi * c + j])).collect();
        let ng = self.ng(&[a.0]);
        Ok(self.push(1, c, out, Op::ColMidrange(a.0, arg), ng))
    }

    /// Sinusoidal encoding of each row of an n x 3 matrix: per axis, per
    /// frequency `k < freqs`, `(sin(2^k pi x), cos(2^k pi x))`.
    pub fn posenc(&mut self, a: Var, freqs: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        let out = posenc_rows(&self.nodes[a.0].value, c, freqs);
        let ng = self.ng(&[a.0]);
        Ok(self.push(r, c * 2 * freqs, out, Op::PosEnc(a.0, freqs), ng))
    }

    /// B-spline grid-to-particle transfer of `grid` (M x 3 node values) to
    /// particles at `positions` (n x 3, grid frame).
    pub fn g2p(&mut self, grid: Var, positions: Var, stencil: G2pStencil) -> Result<Var> {
        let (m, gc) = self.shape(grid);
        let (n, pc) = self.shape(positions);
        if pc != 3 || stencil.rows.len() != n || stencil.base.len() != n {
            return Err(self.shape_err("g2p", grid.0, positions.0));
        }
        if stencil.rows.iter().flatten().any(|&i| i >= m) {
            return Err(Error::Shape { op: "g2p", left: vec![m, gc], right: vec![n, pc] });
        }
        let gv = &self.nodes[grid.0].value;
        let pv = &self.nodes[positions.0].value;
        let mut out = vec![0.0; n * gc];
        for p in 0..n {
            let (w, _) = stencil_weights(&pv[p * 3..p * 3 + 3], &stencil.base[p], stencil.delta);
            for (s, &row) in stencil.rows[p].iter().enumerate() {
                for j in 0..gc {
                    out[p * gc + j] += w[s] * gv[row * gc + j];
                }
            }
        }
        let ng = self.ng(&[grid.0, positions.0]);
        Ok(self.push(n, gc, out, Op::G2p(grid.0, positions.0, Box::new(stencil)), ng))
    }

    /// Ground contact: rows flagged by `contact` with downward z velocity
    /// lose it, and their tangential part is damped by Coulomb friction.
    pub fn ground_edit(&mut self, v: Var, contact: Vec<bool>, mu: f64) -> Result<Var> {
        let (r, c) = self.shape(v);
        if c != 3 || contact.len() != r {
            return Err(Error::Shape { op: "ground_edit", left: vec![r, c], right: vec![contact.len(), 3] });
        }
        let mut out = self.nodes[v.0].value.clone();
        for (i, &hit) in contact.iter().enumerate() {
            if hit {
                ground_row(&mut out[i * 3..i * 3 + 3], mu);
            }
        }
        let ng = self.ng(&[v.0]);
        Ok(self.push(r, c, out, Op::GroundEdit(v.0, contact, mu), ng))
    }

    /// Row `i` comes from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) || mask.len() != self.shape(a).0 {
            return Err(self.shape_err("select_rows", a.0, b.0));
        }
        let (r, c) = self.shape(a);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Vec::with_capacity(r * c);
        for (i, &m) in mask.iter().enumerate() {
            out.extend_from_slice(if m { &av[i * c..(i + 1) * c] } else { &bv[i * c..(i + 1) * c] });
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(r, c, out, Op::SelectRows(mask, a.0, b.0), ng))
    }

    /// Reverse sweep from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.rows * root.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.needs_grad {
                self.propagate(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let n = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    // dA += dC * B^T
                    gemm(m, n, k, (g, n as isize, 1), (val(*b), 1, n as isize), ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB += A^T * dC
                    gemm(k, m, n, (val(*a), 1, k as isize), (g, n as isize, 1), gb);
                }
            }
            Op::Add(a, b) => {
                for (t, s) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(gt) = self.acc(grads, t) {
                        gt.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (t, s) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(gt) = self.acc(grads, t) {
                        gt.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(val(*b))).for_each(|(x, (y, w))| *x += y * w);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g.iter().zip(val(*a))).for_each(|(x, (y, w))| *x += y * w);
                }
            }
            Op::AddRow(a, row) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(c.max(1)) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += k * y);
                }
            }
            Op::Relu(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, v))| {
                        if *v > 0.0 {
                            *x += y
                        }
                    });
                }
            }
            Op::Sin(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, v))| *x += y * v.cos());
                }
            }
            Op::Cos(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, v))| *x -= y * v.sin());
                }
            }
            Op::Square(a) => {
                let av = val(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(av)).for_each(|(x, (y, v))| *x += 2.0 * y * v);
                }
            }
            Op::Sqrt(a) => {
                let out = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g.iter().zip(out)).for_each(|(x, (y, s))| *x += 0.5 * y / s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len().max(1) as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::ConcatCols(parts) => {
                let cols = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..node.rows {
                            for j in 0..pc {
                                gp[r * pc + j] += g[r * cols + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::GatherRows(a, index) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &i) in index.iter().enumerate() {
                        for j in 0..c {
                            ga[i * c + j] += g[o * c + j];
                        }
                    }
                }
            }
            Op::ScatterAddRows(a, index) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (src, &dst) in index.iter().enumerate() {
                        for j in 0..c {
                            ga[src * c + j] += g[dst * c + j];
                        }
                    }
                }
            }
            Op::SegmentMean(a, groups) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for j in 0..c {
                                ga[i * c + j] += inv * g[o * c + j];
                            }
                        }
                    }
                }
            }
            Op::ColMax(a, arg) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &i) in arg.iter().enumerate() {
                        ga[i * c + j] += g[j];
                    }
                }
            }
            Op::ColMidrange(a, arg) => {
                let c = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for (j, &(lo, hi)) in arg.iter().enumerate() {
                        ga[lo * c + j] += 0.5 * g[j];
                        ga[hi * c + j] += 0.5 * g[j];
                    }
                }
            }
            Op::PosEnc(a, freqs) => {
                let (r, c) = (self.nodes[*a].rows, self.nodes[*a].cols);
                let av = val(*a);
                let width = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for ax in 0..c {
                            let x = av[i * c + ax];
                            let mut acc = 0.0;
                            for k in 0..*freqs {
                                let w = (1u64 << k) as f64 * std::f64::consts::PI;
                                let base = i * width + ax * 2 * freqs + 2 * k;
                                acc += w * (g[base] * (w * x).cos() - g[base + 1] * (w * x).sin());
                            }
                            ga[i * c + ax] += acc;
                        }
                    }
                }
            }
            Op::G2p(grid, pos, st) => {
                let gc = node.cols;
                let pv = val(*pos).to_vec();
                let gv = val(*grid).to_vec();
                if let Some(gg) = self.acc(grads, *grid) {
                    for p in 0..node.rows {
                        let (w, _) = stencil_weights(&pv[p * 3..p * 3 + 3], &st.base[p], st.delta);
                        for (s, &row) in st.rows[p].iter().enumerate() {
                            for j in 0..gc {
                                gg[row * gc + j] += w[s] * g[p * gc + j];
                            }
                        }
                    }
                }
                if let Some(gp) = self.acc(grads, *pos) {
                    for p in 0..node.rows {
                        let (_, dw) = stencil_weights(&pv[p * 3..p * 3 + 3], &st.base[p], st.delta);
                        for (s, &row) in st.rows[p].iter().enumerate() {
                            let dot: f64 = (0..gc).map(|j| g[p * gc + j] * gv[row * gc + j]).sum();
                            for ax in 0..3 {
                                gp[p * 3 + ax] += dot * dw[s][ax];
                            }
                        }
                    }
                }
            }
            Op::GroundEdit(v, contact, mu) => {
                let vv = val(*v).to_vec();
                if let Some(gv) = self.acc(grads, *v) {
                    for i in 0..node.rows {
                        let (row, gi) = (&vv[i * 3..i * 3 + 3], &g[i * 3..i * 3 + 3]);
                        let out = &mut gv[i * 3..i * 3 + 3];
                        if !contact[i] || row[2] >= 0.0 {
                            out.iter_mut().zip(gi).for_each(|(x, y)| *x += y);
                            continue;
                        }
                        let a = -row[2];
                        let t = (row[0] * row[0] + row[1] * row[1]).sqrt();
                        let f = 1.0 - mu * a / (t + GROUND_EPS);
                        if f <= 0.0 {
                            continue;
                        }
                        let gt_dot_vt = gi[0] * row[0] + gi[1] * row[1];
                        let radial = if t > 0.0 { gt_dot_vt * mu * a / ((t + GROUND_EPS).powi(2) * t) } else { 0.0 };
                        out[0] += f * gi[0] + radial * row[0];
                        out[1] += f * gi[1] + radial * row[1];
                        out[2] += gt_dot_vt * mu / (t + GROUND_EPS);
                    }
                }
            }
            Op::SelectRows(mask, a, b) => {
                let c = node.cols;
                for (t, want) in [(*a, true), (*b, false)] {
                    if let Some(gt) = self.acc(grads, t) {
                        for (i, &m) in mask.iter().enumerate() {
                            if m == want {
                                for j in 0..c {
                                    gt[i * c + j] += g[i * c + j];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Apply the ground contact law to one velocity row in place.
pub fn ground_row(v: &mut [f64], mu: f64) {
    if v[2] >= 0.0 {
        return;
    }
    let a = -v[2];
    let t = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let f = (1.0 - mu * a / (t + GROUND_EPS)).max(0.0);
    v[0] *= f;
    v[1] *= f;
    v[2] = 0.0;
}

pub fn posenc_rows(x: &[f64], cols: usize, freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * 2 * freqs);
    for row in x.chunks(cols.max(1)) {
        for &v in row {
            for k in 0..freqs {
                let w = (1u64 << k) as f64 * std::f64::consts::PI;
                out.push((w * v).sin());
                out.push((w * v).cos());
            }
        }
    }
    out
}

/// Weights and their position gradients over a particle's 27 stencil nodes,
/// ordered x-major then y then z.
pub fn stencil_weights(p: &[f64], base: &[i64; 3], delta: f64) -> ([f64; 27], [[f64; 3]; 27]) {
    let mut w1 = [[0.0; 3]; 3];
    let mut d1 = [[0.0; 3]; 3];
    for ax in 0..3 {
        for o in 0..3 {
            let u = p[ax] / delta - (base[ax] + o as i64) as f64;
            w1[ax][o] = bspline_weight(u);
            d1[ax][o] = bspline_dweight(u) / delta;
        }
    }
    let mut w = [0.0; 27];
    let mut dw = [[0.0; 3]; 27];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let s = i * 9 + j * 3 + k;
                w[s] = w1[0][i] * w1[1][j] * w1[2][k];
                dw[s] = [
                    d1[0][i] * w1[1][j] * w1[2][k],
                    w1[0][i] * d1[1][j] * w1[2][k],
                    w1[0][i] * w1[1][j] * d1[2][k],
                ];
            }
        }
    }
    (w, dw)
}
