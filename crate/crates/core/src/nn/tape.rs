//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the backward pass. Inputs always precede the node that consumes them, so a
//! single reverse sweep over the node list visits the graph in reverse
//! topological order.

use rayon::prelude::*;

use super::tensor::{matmul, matmul_at, matmul_bt, softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{project, project_jacobian, rot6d_to_matrix, rot6d_vjp, CameraParams, Point2, Point3, Rotation6D};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Bound on |cos θ| used when differentiating the geodesic angle, keeping the
/// arccos slope finite at coincident rotations.
pub const ACOS_GRAD_LIMIT: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    AddRowsCyclic(Var, Var),
    AffineRowsCyclic {
        x: Var,
        scale: Tensor,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GramSchmidt(Var),
    Geodesic {
        pred: Var,
        target: Tensor,
    },
    Reprojection {
        params: Var,
        /// d(squared error)/d(params) per (row, fiducial), 21 values each.
        grads: Vec<f64>,
        n_fid: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRowsCyclic(a, b) => {
                vec![*a, *b]
            }
            Scale(a, _) | Square(a) | Sqrt(a) | Sum(a) | Mean(a) | Gelu(a) | Reshape(a) | GramSchmidt(a) => {
                vec![*a]
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            AffineRowsCyclic { x, .. } | SliceCols { x, .. } => vec![*x],
            ConcatCols(xs) => xs.clone(),
            Geodesic { pred, .. } => vec![*pred],
            Reprojection { params, .. } => vec![*params],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch(format!("{op}: {a:?} vs {b:?}"))
}

fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[.., k] · w[k, n]`
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[0] {
            return Err(mismatch("matmul", xv.shape(), wv.shape()));
        }
        let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(shape, matmul(xv.data(), wv.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(mismatch("add_bias", xv.shape(), bv.shape()));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b)))
    }

    /// `x · w + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect())
            .expect("map preserves shape")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale(a, c))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x * x);
        self.push(t, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| gelu(x).0);
        self.push(t, Op::Gelu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Normalises each row over its last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = vec![0.0; xv.len()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product self-attention over `tokens` rows per
    /// batch element. `q`, `k`, `v` are `[batch·tokens, d]`; no masking.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.rows() != batch * tokens || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", qv.shape(), kv.shape()));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let base = b * tokens * d;
                let mut out = vec![0.0; tokens * d];
                let mut probs = vec![0.0; heads * tokens * tokens];
                for h in 0..heads {
                    let p = &mut probs[h * tokens * tokens..(h + 1) * tokens * tokens];
                    for i in 0..tokens {
                        for j in 0..tokens {
                            let mut s = 0.0;
                            for c in 0..dh {
                                s += qd[base + i * d + h * dh + c] * kd[base + j * d + h * dh + c];
                            }
                            p[i * tokens + j] = s * scale;
                        }
                    }
                    softmax_rows(p, tokens);
                    for i in 0..tokens {
                        for j in 0..tokens {
                            let w = p[i * tokens + j];
                            for c in 0..dh {
                                out[i * d + h * dh + c] += w * vd[base + j * d + h * dh + c];
                            }
                        }
                    }
                }
                (out, probs)
            })
            .collect();
        let mut out = Vec::with_capacity(batch * tokens * d);
        let mut probs = Vec::with_capacity(batch * heads * tokens * tokens);
        for (o, p) in per_batch {
            out.extend(o);
            probs.extend(p);
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities `[batch, heads, tokens, tokens]` recorded by an attention node.
    pub fn attention_probs(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Adds row `r mod P` of `c[P, n]` to row `r` of `x`.
    pub fn add_rows_cyclic(&mut self, x: Var, c: Var) -> Result<Var> {
        let (xv, cv) = (self.value(x), self.value(c));
        let n = xv.cols();
        if cv.cols() != n || cv.rows() == 0 || xv.rows() % cv.rows() != 0 {
            return Err(mismatch("add_rows_cyclic", xv.shape(), cv.shape()));
        }
        let p = cv.rows();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let cr = &cv.data()[(r % p) * n..(r % p + 1) * n];
            for (o, a) in row.iter_mut().zip(cr) {
                *o += a;
            }
        }
        Ok(self.push(out, Op::AddRowsCyclic(x, c)))
    }

    /// `x ⊙ scale + offset` with constant `[P, n]` tables cycled over rows.
    pub fn affine_rows_cyclic(&mut self, x: Var, scale: &Tensor, offset: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if scale.shape() != offset.shape() || scale.cols() != n || scale.rows() == 0 || xv.rows() % scale.rows() != 0 {
            return Err(mismatch("affine_rows_cyclic", xv.shape(), scale.shape()));
        }
        let p = scale.rows();
        let mut out = xv.clone();
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let base = (r % p) * n;
            for (j, o) in row.iter_mut().enumerate() {
                *o = *o * scale.data()[base + j] + offset.data()[base + j];
            }
        }
        Ok(self.push(
            out,
            Op::AffineRowsCyclic {
                x,
                scale: scale.clone(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if start + len > n {
            return Err(Error::ShapeMismatch(format!("slice {start}..{} of {n} columns", start + len)));
        }
        let data: Vec<f64> = xv.data().chunks(n).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let out = Tensor::new(vec![xv.rows(), len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(first) = xs.first() else {
            return Err(Error::ShapeMismatch("concat of zero tensors".into()));
        };
        let rows = self.value(*first).rows();
        if xs.iter().any(|v| self.value(*v).rows() != rows) {
            return Err(Error::ShapeMismatch("concat_cols: row counts differ".into()));
        }
        let total: usize = xs.iter().map(|v| self.value(*v).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in xs {
                let t = self.value(*v);
                let c = t.cols();
                data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(out, Op::ConcatCols(xs.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Expands each `[6]` row into a row-major rotation matrix `[9]`.
    pub fn gram_schmidt(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.cols() != 6 {
            return Err(mismatch("gram_schmidt", xv.shape(), &[6]));
        }
        let mut data = Vec::with_capacity(xv.rows() * 9);
        for row in xv.data().chunks(6) {
            let r6 = Rotation6D(row.try_into().unwrap());
            let m = rot6d_to_matrix(&r6)?;
            for i in 0..3 {
                for j in 0..3 {
                    data.push(m[(i, j)]);
                }
            }
        }
        let out = Tensor::new(vec![xv.rows(), 9], data)?;
        Ok(self.push(out, Op::GramSchmidt(x)))
    }

    /// Per-row geodesic angle between predicted `[R, 9]` rotations and constant targets.
    pub fn geodesic(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.cols() != 9 || pv.shape() != target.shape() {
            return Err(mismatch("geodesic", pv.shape(), target.shape()));
        }
        let data = pv
            .data()
            .chunks(9)
            .zip(target.data().chunks(9))
            .map(|(a, b)| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                ((dot - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
            })
            .collect();
        let out = Tensor::new(vec![pv.rows()], data)?;
        Ok(self.push(
            out,
            Op::Geodesic {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// Squared pixel error `[R, N_fid]` between projections under predicted
    /// camera parameters `[R, 21]` and constant target pixels.
    ///
    /// Points behind a predicted camera contribute `penalty²` with zero gradient.
    pub fn reprojection(&mut self, params: Var, fiducials: &[Point3], target: &[Point2], penalty: f64) -> Result<Var> {
        let pv = self.value(params);
        let n_fid = fiducials.len();
        if pv.cols() != 21 || target.len() != pv.rows() * n_fid {
            return Err(mismatch("reprojection", pv.shape(), &[target.len()]));
        }
        let rows: Vec<(Vec<f64>, Vec<f64>)> = pv
            .data()
            .par_chunks(21)
            .enumerate()
            .map(|(r, row)| {
                let cam = CameraParams::from_slice(row);
                let mut errs = Vec::with_capacity(n_fid);
                let mut grads = vec![0.0; n_fid * 21];
                for (f, p) in fiducials.iter().enumerate() {
                    let obs = target[r * n_fid + f];
                    match (project(p, &cam), project_jacobian(p, &cam)) {
                        (Ok(px), Ok(jac)) if px.x.is_finite() && px.y.is_finite() => {
                            let e = px - obs;
                            errs.push(e.norm_squared());
                            for c in 0..21 {
                                grads[f * 21 + c] = 2.0 * (e.x * jac[(0, c)] + e.y * jac[(1, c)]);
                            }
                        }
                        _ => errs.push(penalty * penalty),
                    }
                }
                (errs, grads)
            })
            .collect();
        let mut errs = Vec::with_capacity(pv.rows() * n_fid);
        let mut grads = Vec::with_capacity(pv.rows() * n_fid * 21);
        for (e, g) in rows {
            errs.extend(e);
            grads.extend(g);
        }
        let out = Tensor::new(vec![pv.rows(), n_fid], errs)?;
        Ok(self.push(out, Op::Reprojection { params, grads, n_fid }))
    }

    /// Backpropagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward root must be scalar, got {:?}", rv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for input in node.op.inputs() {
                if input.0 >= idx {
                    return Err(Error::GraphCycle { node: idx, input: input.0 });
                }
            }
            let contributions = self.local_grads(node, &g)?;
            for (input, delta) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(existing) => {
                        for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                            *e += d;
                        }
                    }
                    slot => *slot = Some(delta),
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        let gd = g.data();
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k, n) = (xv.rows(), xv.cols(), wv.shape()[1]);
                let mut out = Vec::new();
                if self.wants(*x) {
                    out.push((*x, like(*x, matmul_bt(gd, wv.data(), m, n, k))?));
                }
                if self.wants(*w) {
                    out.push((*w, like(*w, matmul_at(xv.data(), gd, m, k, n))?));
                }
                out
            }
            Op::AddBias(x, b) => {
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (a, v) in gb.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![(*x, g.clone()), (*b, like(*b, gb)?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, like(*b, gd.iter().map(|v| -v).collect())?)],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, like(*a, gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect())?),
                    (*b, like(*b, gd.iter().zip(av.data()).map(|(g, x)| g * x).collect())?),
                ]
            }
            Op::Scale(a, c) => vec![(*a, like(*a, gd.iter().map(|v| v * c).collect())?)],
            Op::Square(a) => {
                let av = self.value(*a);
                vec![(*a, like(*a, gd.iter().zip(av.data()).map(|(g, x)| 2.0 * g * x).collect())?)]
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                vec![(
                    *a,
                    like(
                        *a,
                        gd.iter()
                            .zip(y.data())
                            .map(|(g, y)| if *g == 0.0 { 0.0 } else { g / (2.0 * y.max(f64::MIN_POSITIVE)) })
                            .collect(),
                    )?,
                )]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(self.value(*a).shape(), gd[0]))],
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                vec![(*a, Tensor::full(self.value(*a).shape(), gd[0] / n))]
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                vec![(*a, like(*a, gd.iter().zip(av.data()).map(|(g, x)| g * gelu(*x).1).collect())?)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = g.cols();
                let gamma_v = self.value(*gamma).data();
                let mut gx = vec![0.0; gd.len()];
                let mut gg = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &gd[r * n..(r + 1) * n];
                    let hr = &xhat[r * n..(r + 1) * n];
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gamma_v[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                    }
                    mean_dh /= n as f64;
                    mean_dh_h /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gamma_v[j];
                        gx[r * n + j] = is * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                vec![(*x, like(*x, gx)?), (*gamma, like(*gamma, gg)?), (*beta, like(*beta, gb)?)]
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let (t, hs) = (*tokens, *heads);
                let d = g.cols();
                let dh = d / hs;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let per_batch: Vec<[Vec<f64>; 3]> = (0..*batch)
                    .into_par_iter()
                    .map(|b| {
                        let base = b * t * d;
                        let mut gq = vec![0.0; t * d];
                        let mut gk = vec![0.0; t * d];
                        let mut gv = vec![0.0; t * d];
                        for h in 0..hs {
                            let p = &probs[(b * hs + h) * t * t..(b * hs + h + 1) * t * t];
                            let col = |i: usize, c: usize| i * d + h * dh + c;
                            // dP = dO Vᵀ ; dV = Pᵀ dO
                            let mut dp = vec![0.0; t * t];
                            for i in 0..t {
                                for j in 0..t {
                                    let mut s = 0.0;
                                    for c in 0..dh {
                                        s += gd[base + col(i, c)] * vd[base + col(j, c)];
                                        gv[col(j, c)] += p[i * t + j] * gd[base + col(i, c)];
                                    }
                                    dp[i * t + j] = s;
                                }
                            }
                            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
                            for i in 0..t {
                                let row = i * t..(i + 1) * t;
                                let dot: f64 = dp[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                                for j in 0..t {
                                    let ds = p[i * t + j] * (dp[i * t + j] - dot) * scale;
                                    for c in 0..dh {
                                        gq[col(i, c)] += ds * kd[base + col(j, c)];
                                        gk[col(j, c)] += ds * qd[base + col(i, c)];
                                    }
                                }
                            }
                        }
                        [gq, gk, gv]
                    })
                    .collect();
                let mut gq = Vec::with_capacity(gd.len());
                let mut gk = Vec::with_capacity(gd.len());
                let mut gv = Vec::with_capacity(gd.len());
                for [a, b, c] in per_batch {
                    gq.extend(a);
                    gk.extend(b);
                    gv.extend(c);
                }
                vec![(*q, like(*q, gq)?), (*k, like(*k, gk)?), (*v, like(*v, gv)?)]
            }
            Op::AddRowsCyclic(x, c) => {
                let cv = self.value(*c);
                let (p, n) = (cv.rows(), cv.cols());
                let mut gc = vec![0.0; cv.len()];
                for (r, row) in gd.chunks(n).enumerate() {
                    for (a, v) in gc[(r % p) * n..(r % p + 1) * n].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                vec![(*x, g.clone()), (*c, like(*c, gc)?)]
            }
            Op::AffineRowsCyclic { x, scale } => {
                let (p, n) = (scale.rows(), scale.cols());
                let gx = gd
                    .chunks(n)
                    .enumerate()
                    .flat_map(|(r, row)| {
                        let s = &scale.data()[(r % p) * n..(r % p + 1) * n];
                        row.iter().zip(s).map(|(g, s)| g * s).collect::<Vec<_>>()
                    })
                    .collect();
                vec![(*x, like(*x, gx)?)]
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (n, len) = (xv.cols(), g.cols());
                let mut gx = vec![0.0; xv.len()];
                for (r, row) in gd.chunks(len).enumerate() {
                    gx[r * n + start..r * n + start + len].copy_from_slice(row);
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::ConcatCols(xs) => {
                let total = g.cols();
                let mut offset = 0;
                let mut out = Vec::with_capacity(xs.len());
                for v in xs {
                    let c = self.value(*v).cols();
                    let data = gd.chunks(total).flat_map(|row| row[offset..offset + c].iter().copied()).collect();
                    out.push((*v, like(*v, data)?));
                    offset += c;
                }
                out
            }
            Op::Reshape(x) => vec![(*x, like(*x, gd.to_vec())?)],
            Op::GramSchmidt(x) => {
                let xv = self.value(*x);
                let mut gx = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks(6).zip(gd.chunks(9)) {
                    let r6 = Rotation6D(row.try_into().unwrap());
                    gx.extend(rot6d_vjp(&r6, grow.try_into().unwrap())?);
                }
                vec![(*x, like(*x, gx)?)]
            }
            Op::Geodesic { pred, target } => {
                let pv = self.value(*pred);
                let mut gp = Vec::with_capacity(pv.len());
                for ((a, b), gr) in pv.data().chunks(9).zip(target.data().chunks(9)).zip(gd) {
                    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                    let c = ((dot - 1.0) / 2.0).clamp(-ACOS_GRAD_LIMIT, ACOS_GRAD_LIMIT);
                    let dtheta_dc = -1.0 / (1.0 - c * c).sqrt();
                    gp.extend(b.iter().map(|y| gr * dtheta_dc * 0.5 * y));
                }
                vec![(*pred, like(*pred, gp)?)]
            }
            Op::Reprojection { params, grads, n_fid } => {
                let pv = self.value(*params);
                let mut gp = vec![0.0; pv.len()];
                for r in 0..pv.rows() {
                    for f in 0..*n_fid {
                        let w = gd[r * n_fid + f];
                        let src = &grads[(r * n_fid + f) * 21..(r * n_fid + f + 1) * 21];
                        for (o, s) in gp[r * 21..(r + 1) * 21].iter_mut().zip(src) {
                            *o += w * s;
                        }
                    }
                }
                vec![(*params, like(*params, gp)?)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extrinsics, Intrinsics};
    use crate::seed;

    type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

    /// Analytic gradient of `sum(w ⊙ f(inputs))` against central differences.
    fn check(build: &Build, inputs: &[Tensor], h: f64, tol: f64) {
        let eval = |inputs: &[Tensor], grads: bool| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &vars).unwrap();
            let w = Tensor::from_fn(tape.value(out).shape(), |i| 0.3 + ((i * 7919) % 13) as f64 / 13.0);
            let wv = tape.constant(w);
            let prod = tape.mul(out, wv).unwrap();
            let loss = tape.sum(prod);
            let value = tape.value(loss).item();
            if !grads {
                return (value, vec![]);
            }
            let g = tape.backward(loss).unwrap();
            let gs = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| g.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            (value, gs)
        };
        let (_, analytic) = eval(inputs, true);
        for (which, input) in inputs.iter().enumerate() {
            let mut numeric = vec![0.0; input.len()];
            for i in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[i] -= h;
                numeric[i] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            }
            let a = analytic[which].data();
            let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale: f64 = numeric.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-3);
            assert!(diff / scale < tol, "input {which}: rel err {} (analytic {a:?}, numeric {numeric:?})", diff / scale);
        }
    }

    fn randn(shape: &[usize], s: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut seed::rng(s))
    }

    const H: f64 = 1e-6;
    const TOL: f64 = 1e-6;

    #[test]
    fn elementwise_gradients() {
        let a = randn(&[3, 4], 1);
        let b = randn(&[3, 4], 2);
        check(&|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()], H, TOL);
        check(&|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()], H, TOL);
        check(&|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()], H, TOL);
        check(&|t, v| Ok(t.scale(v[0], -2.5)), &[a.clone()], H, TOL);
        check(&|t, v| Ok(t.square(v[0])), &[a.clone()], H, TOL);
        check(&|t, v| Ok(t.gelu(v[0])), &[a.clone()], H, TOL);
        let pos = Tensor::from_fn(&[5], |i| 0.5 + i as f64);
        check(&|t, v| Ok(t.sqrt(v[0])), &[pos], H, TOL);
        check(&|t, v| Ok(t.sum(v[0])), &[a.clone()], H, TOL);
        check(&|t, v| Ok(t.mean(v[0])), &[a], H, TOL);
    }

    #[test]
    fn linear_gradients() {
        let x = randn(&[4, 3], 3);
        let w = randn(&[3, 5], 4);
        let b = randn(&[5], 5);
        check(&|t, v| t.linear(v[0], v[1], v[2]), &[x, w, b], H, TOL);
        let x3 = randn(&[2, 3, 3], 6);
        check(&|t, v| t.matmul(v[0], v[1]), &[x3, randn(&[3, 2], 7)], H, TOL);
    }

    #[test]
    fn layer_norm_gradients() {
        let x = randn(&[4, 6], 8);
        let g = randn(&[6], 9);
        let b = randn(&[6], 10);
        check(&|t, v| t.layer_norm(v[0], v[1], v[2]), &[x, g, b], H, TOL);
    }

    #[test]
    fn attention_gradients() {
        let (batch, tokens, d, heads) = (2, 3, 4, 2);
        let q = randn(&[batch * tokens, d], 11);
        let k = randn(&[batch * tokens, d], 12);
        let v = randn(&[batch * tokens, d], 13);
        check(&move |t, x| t.attention(x[0], x[1], x[2], batch, tokens, heads), &[q, k, v], H, TOL);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let q = tape.leaf(randn(&[12, 8], 14));
        let k = tape.leaf(randn(&[12, 8], 15));
        let v = tape.leaf(randn(&[12, 8], 16));
        let out = tape.attention(q, k, v, 3, 4, 2).unwrap();
        let probs = tape.attention_probs(out).unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_equal_logits_are_uniform() {
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(&[5, 4]));
        let k = tape.leaf(randn(&[5, 4], 17));
        let v = tape.leaf(randn(&[5, 4], 18));
        let out = tape.attention(q, k, v, 1, 5, 1).unwrap();
        for p in tape.attention_probs(out).unwrap() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn structural_gradients() {
        let x = randn(&[6, 4], 19);
        let c = randn(&[3, 4], 20);
        check(&|t, v| t.add_rows_cyclic(v[0], v[1]), &[x.clone(), c], H, TOL);
        let (s, o) = (randn(&[2, 4], 21), randn(&[2, 4], 22));
        check(&move |t, v| t.affine_rows_cyclic(v[0], &s, &o), &[x.clone()], H, TOL);
        check(&|t, v| t.slice_cols(v[0], 1, 2), &[x.clone()], H, TOL);
        let y = randn(&[6, 2], 23);
        check(&|t, v| t.concat_cols(&[v[0], v[1], v[0]]), &[x.clone(), y], H, TOL);
        check(&|t, v| t.reshape(v[0], &[3, 8]), &[x], H, TOL);
    }

    #[test]
    fn rotation_gradients() {
        let r6 = randn(&[4, 6], 24);
        check(&|t, v| t.gram_schmidt(v[0]), &[r6.clone()], H, TOL);
        let mut tape = Tape::new();
        let c = tape.constant(randn(&[4, 6], 25));
        let target_var = tape.gram_schmidt(c).unwrap();
        let target = tape.value(target_var).clone();
        check(
            &move |t, v| {
                let r = t.gram_schmidt(v[0])?;
                t.geodesic(r, &target)
            },
            &[r6],
            H,
            TOL,
        );
    }

    fn camera(seed_: u64) -> CameraParams {
        let mut rng = seed::rng(seed_);
        let r6 = Rotation6D(std::array::from_fn(|i| [1.0, 0.0, 0.0, 0.0, 1.0, 0.0][i] + 0.1 * rand::Rng::random::<f64>(&mut rng)));
        CameraParams {
            extrinsics: Extrinsics {
                r: rot6d_to_matrix(&r6).unwrap(),
                t: nalgebra::Vector3::new(0.05, -0.02, 1.5),
            },
            intrinsics: Intrinsics {
                fx: 1000.0,
                fy: 1020.0,
                cx: 510.0,
                cy: 505.0,
                k1: 0.02,
                k2: -0.01,
                k3: 0.005,
                p1: 0.001,
                p2: -0.002,
            },
        }
    }

    #[test]
    fn reprojection_gradient() {
        let fiducials: Vec<Point3> = (0..5).map(|i| Point3::new(0.05 * i as f64 - 0.1, 0.03 * i as f64, 0.02)).collect();
        let truth = camera(1);
        let target: Vec<Point2> = [truth.clone(), truth.clone()]
            .iter()
            .flat_map(|c| fiducials.iter().map(|p| project(p, c).unwrap()).collect::<Vec<_>>())
            .collect();
        let pred: Vec<f64> = [camera(2), camera(3)].iter().flat_map(|c| c.to_array()).collect();
        let params = Tensor::new(vec![2, 21], pred).unwrap();
        // pixel-level errors are O(10), so scale the step to the parameter magnitudes
        check(&move |t, v| t.reprojection(v[0], &fiducials, &target, 1e4), &[params], 1e-5, 1e-5);
    }

    #[test]
    fn reprojection_behind_camera_penalised() {
        let cam = camera(4);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(vec![1, 21], cam.to_array().to_vec()).unwrap());
        let behind = [Point3::new(0.0, 0.0, -10.0)];
        let out = tape.reprojection(p, &behind, &[Point2::new(0.0, 0.0)], 100.0).unwrap();
        assert_eq!(tape.value(out).data(), &[1e4]);
        let loss = tape.sum(out);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(p).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_formula_gradients() {
        // loss = sum(w ⊙ x) → dL/dw = x
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = tape.leaf(Tensor::new(vec![1, 3], vec![0.1, 0.2, 0.3]).unwrap());
        let xc = tape.constant(x.clone());
        let prod = tape.mul(w, xc).unwrap();
        let loss = tape.sum(prod);
        assert_eq!(tape.backward(loss).unwrap().get(w).unwrap().data(), x.data());

        // loss = ‖W x‖² → dL/dW = 2 (W x) xᵀ, with x as a row vector: y = x W
        let mut tape = Tape::new();
        let wt = randn(&[3, 2], 30);
        let w = tape.leaf(wt.clone());
        let xc = tape.constant(x.clone());
        let y = tape.matmul(xc, w).unwrap();
        let sq = tape.square(y);
        let loss = tape.sum(sq);
        let yv = tape.value(y).data().to_vec();
        let g = tape.backward(loss).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let want = 2.0 * yv[j] * x.data()[i];
                assert!((g.get(w).unwrap().data()[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_deterministic_and_constants_have_no_grad() {
        let build = || {
            let mut tape = Tape::new();
            let a = tape.leaf(randn(&[3, 3], 40));
            let c = tape.constant(randn(&[3, 3], 41));
            let m = tape.matmul(a, c).unwrap();
            let s = tape.square(m);
            let l = tape.mean(s);
            let g = tape.backward(l).unwrap();
            (g.get(a).unwrap().clone(), g.get(c).is_none())
        };
        let (g1, none1) = build();
        let (g2, _) = build();
        assert_eq!(g1, g2);
        assert!(none1);
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.add(a, b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(tape.matmul(a, a), Err(Error::ShapeMismatch(_))));
        assert!(tape.backward(a).is_err());
    }
}
