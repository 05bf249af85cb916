//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation in creation order, which is also a
//! topological order of the graph. [`grad`] walks it backwards once.

use std::cell::{Ref, RefCell};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    /// `lhs + rhs`; `rhs` may be a bias row broadcast over the rows of `lhs`.
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Square(usize),
    /// Concatenation along the last axis.
    Concat(Vec<usize>),
    /// Columns `start..end` of the last axis.
    Slice { src: usize, start: usize, end: usize },
    Clip { src: usize, lo: f64, hi: f64 },
    /// Piecewise constant, so it never carries gradient.
    Sign,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Clip { .. } => "clip",
            Op::Sign => "sign",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Operation recorder. Single-threaded; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
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

    /// A differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Op::Leaf, value, false)
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }
}

impl<'t> Var<'t> {
    /// The tape this node was recorded on.
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = f(&self.value());
        let rg = self.tape.requires(&[self.id]);
        self.tape.push(op, value, rg)
    }

    /// Matrix product of two rank-2 nodes.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), &mut out, false);
        drop((a, b));
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self
            .tape
            .push(Op::MatMul(self.id, rhs.id), Tensor::from_parts(vec![m, n], out), rg))
    }

    fn elementwise(
        &self,
        rhs: &Var<'t>,
        ctx: &'static str,
        allow_bias: bool,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.check_same_tape(rhs);
        let (a, b) = (self.value(), rhs.value());
        if a.shape() == b.shape() {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(a.shape().to_vec(), data));
        }
        if allow_bias && b.rank() == 1 && a.rank() == 2 && a.shape()[1] == b.len() {
            let c = b.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            return Ok(Tensor::from_parts(a.shape().to_vec(), data));
        }
        Err(Error::shape(ctx, a.shape(), b.shape()))
    }

    /// Elementwise sum. A rank-1 `rhs` whose length equals the column count of a
    /// rank-2 `self` is added to every row.
    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "add", true, |x, y| x + y)?;
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self.tape.push(Op::Add(self.id, rhs.id), v, rg))
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "sub", false, |x, y| x - y)?;
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self.tape.push(Op::Sub(self.id, rhs.id), v, rg))
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let v = self.elementwise(rhs, "mul", false, |x, y| x * y)?;
        let rg = self.tape.requires(&[self.id, rhs.id]);
        Ok(self.tape.push(Op::Mul(self.id, rhs.id), v, rg))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|x| c * x))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |t| t.map(|x| x.max(0.0)))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|x| x * x))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.sum()))
    }

    pub fn mean(&self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(t.sum() / t.len().max(1) as f64)
        })
    }

    /// Clamps into `[lo, hi]`. Backward passes gradient through inside the
    /// interval and zeroes it outside.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clip { src: self.id, lo, hi }, |t| t.map(|x| x.clamp(lo, hi)))
    }

    /// Elementwise sign (0 at 0). Zero gradient.
    pub fn sign(&self) -> Var<'t> {
        let v = self.value().map(sign);
        self.tape.push(Op::Sign, v, false)
    }

    /// Columns `start..end` of the last axis.
    pub fn slice(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = {
            let t = self.value();
            let c = t.last_dim();
            if start > end || end > c || t.rank() == 0 {
                return Err(Error::Contract(format!(
                    "slice {start}..{end} out of range for shape {:?}",
                    t.shape()
                )));
            }
            let mut shape = t.shape().to_vec();
            *shape.last_mut().unwrap() = end - start;
            let data = (0..t.rows())
                .flat_map(|r| t.row_slice(r)[start..end].iter().copied())
                .collect();
            Tensor::from_parts(shape, data)
        };
        let rg = self.tape.requires(&[self.id]);
        Ok(self.tape.push(
            Op::Slice {
                src: self.id,
                start,
                end,
            },
            v,
            rg,
        ))
    }

    /// Squared l2 distance to `rhs`, as a scalar node.
    pub fn dist_sq(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.sub(rhs)?.square().sum())
    }
}

/// Concatenates nodes along the last axis. All parts must agree on the leading
/// dimensions.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero parts".into()))?;
    let tape = first.tape;
    let value = {
        let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|p| p.value()).collect();
        let lead = &vals[0].shape()[..vals[0].rank().saturating_sub(1)];
        for v in &vals {
            if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                return Err(Error::shape("concat", vals[0].shape(), v.shape()));
            }
        }
        let rows = vals[0].rows();
        let width: usize = vals.iter().map(|v| v.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in &vals {
                data.extend_from_slice(v.row_slice(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        Tensor::from_parts(shape, data)
    };
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = tape.requires(&ids);
    Ok(tape.push(Op::Concat(ids), value, rg))
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `c (+)= a * b` for row-major `a: [m, k]`, `b: [k, n]` given as
/// `(row_stride, col_stride)` pairs.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    // SAFETY: the asserted lengths cover every index dgemm touches for these
    // dimensions and strides.
    assert!(a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Gradient of the scalar `loss` with respect to each of `wrt`.
///
/// Nodes with no path to `loss` (or created with [`Tape::constant`]) receive a
/// zero tensor of their own shape.
pub fn grad<'t>(loss: &Var<'t>, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
    let tape = loss.tape;
    let nodes = tape.nodes.borrow();
    if nodes[loss.id].value.len() != 1 {
        return Err(Error::Contract(format!(
            "grad requires a scalar loss, got shape {:?}",
            nodes[loss.id].value.shape()
        )));
    }
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
    grads[loss.id] = Some(vec![1.0]);
    let wanted: std::collections::HashSet<usize> = wrt.iter().map(|w| w.id).collect();

    for id in (0..=loss.id).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let g = if wanted.contains(&id) {
            match grads[id].clone() {
                Some(g) => g,
                None => continue,
            }
        } else {
            match grads[id].take() {
                Some(g) => g,
                None => continue,
            }
        };
        let need = |i: usize| nodes[i].requires_grad;
        let mut out: Vec<(usize, Vec<f64>)> = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, (n, 1), bv.data(), (1, n), &mut da, false);
                    out.push((*a, da));
                }
                if need(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), (1, k), &g, (n, 1), &mut db, false);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sgn = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if need(*b) {
                    let blen = nodes[*b].value.len();
                    let db = if blen == g.len() {
                        g.iter().map(|x| sgn * x).collect()
                    } else {
                        let mut db = vec![0.0; blen];
                        for (i, x) in g.iter().enumerate() {
                            db[i % blen] += sgn * x;
                        }
                        db
                    };
                    out.push((*b, db));
                }
                if need(*a) {
                    out.push((*a, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                if need(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()));
                }
                if need(*b) {
                    out.push((*b, g.iter().zip(av).map(|(x, y)| x * y).collect()));
                }
            }
            Op::Scale(a, c) => {
                out.push((*a, g.iter().map(|x| c * x).collect()));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                out.push((
                    *a,
                    g.iter().zip(y).map(|(x, y)| x * (1.0 - y * y)).collect(),
                ));
            }
            Op::Relu(a) => {
                let xv = nodes[*a].value.data();
                out.push((
                    *a,
                    g.iter().zip(xv).map(|(d, x)| if *x > 0.0 { *d } else { 0.0 }).collect(),
                ));
            }
            Op::Sum(a) => {
                let n = nodes[*a].value.len();
                out.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = nodes[*a].value.len();
                out.push((*a, vec![g[0] / n.max(1) as f64; n]));
            }
            Op::Square(a) => {
                let xv = nodes[*a].value.data();
                out.push((
                    *a,
                    g.iter().zip(xv).map(|(d, x)| 2.0 * d * x).collect(),
                ));
            }
            Op::Concat(parts) => {
                let width = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p].value.last_dim();
                    if need(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * width + offset..r * width + offset + w]);
                        }
                        out.push((p, dp));
                    }
                    offset += w;
                }
            }
            Op::Slice { src, start, end } => {
                let sv = &nodes[*src].value;
                let c = sv.last_dim();
                let w = end - start;
                let mut ds = vec![0.0; sv.len()];
                for r in 0..sv.rows() {
                    ds[r * c + start..r * c + end].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                out.push((*src, ds));
            }
            Op::Clip { src, lo, hi } => {
                let xv = nodes[*src].value.data();
                out.push((
                    *src,
                    g.iter()
                        .zip(xv)
                        .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sign => {}
        }
        for (target, contribution) in out {
            if contribution.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteOp { op: node.op.kind() });
            }
            accumulate(&mut grads[target], contribution);
        }
    }

    wrt.iter()
        .map(|w| {
            assert!(std::ptr::eq(w.tape, tape), "wrt var from a different tape");
            let shape = nodes[w.id].value.shape().to_vec();
            match grads.get(w.id).and_then(Option::as_ref) {
                Some(g) => Ok(Tensor::from_parts(shape, g.clone())),
                None => Ok(Tensor::zeros(&shape)),
            }
        })
        .collect()
}
