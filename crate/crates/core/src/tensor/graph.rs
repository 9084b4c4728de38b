//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is recorded during one forward pass. Every operation appends a
//! node holding its value and the inputs it was computed from, so node order is
//! a topological order and [`Graph::backward`] is a single reverse sweep.
//!
//! Binary elementwise operations broadcast over equal-rank shapes where each
//! axis either matches or has extent 1 on one side.

use std::collections::HashMap;
use std::rc::Rc;

use super::dense::{ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear map with a known adjoint, usable as a graph operation.
///
/// The gradient of `apply` is `adjoint`, so implementors must make the two
/// exact transposes of each other under the real inner product.
pub trait LinearMap {
    fn in_shape(&self) -> &[usize];
    fn out_shape(&self) -> &[usize];
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, y: &[f64]) -> Vec<f64>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv2d(Var, Var),
    SoftmaxRows(Var),
    LeakyRelu(Var, f64),
    Sqrt(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    SumAxes(Var),
    Linear(Rc<dyn LinearMap>, Var),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// One gradient tensor per parameter of `ps`, zero where a parameter did
    /// not participate in the recorded computation.
    pub fn for_params(&self, ps: &ParamSet) -> Vec<Tensor> {
        ps.ids()
            .map(|id| {
                let shape = ps.get(id).shape();
                match self.params.get(&id).and_then(|v| self.wrt(*v)) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "broadcast needs equal rank, got {a:?} and {b:?}"
        )));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::Dimension(format!("cannot broadcast {a:?} with {b:?}"))),
        })
        .collect()
}

/// For every flat index of `out`, the flat index of the broadcast input.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    if out == input {
        return (0..numel(out)).collect();
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for ax in (0..rank).rev() {
        strides[ax] = if input[ax] == 1 { 0 } else { acc };
        acc *= input[ax];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Valid row/column range `[lo, hi)` of outputs reading `offset` (-1, 0, +1)
/// away with zero padding.
fn conv_range(offset: isize, extent: usize) -> (usize, usize) {
    match offset {
        -1 => (1, extent),
        1 => (0, extent - 1),
        _ => (0, extent),
    }
}

/// Same-size 3x3 cross-correlation with zero padding of one.
fn conv2d_raw(
    input: &[f64],
    kernel: &[f64],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; c_out * hw];
    for o in 0..c_out {
        let dst = &mut out[o * hw..(o + 1) * hw];
        for i in 0..c_in {
            let src = &input[i * hw..(i + 1) * hw];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = conv_range(dy, h);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let wgt = kernel[((o * c_in + i) * 3 + ky) * 3 + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let (x0, x1) = conv_range(dx, w);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let d = &mut dst[y * w + x0..y * w + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let s = &src[sy * w + s0..sy * w + s0 + (x1 - x0)];
                        for (dv, &sv) in d.iter_mut().zip(s) {
                            *dv += wgt * sv;
                        }
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Leaf that follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Leaf bound to a trainable parameter. Repeated calls for the same id
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&mut self, ps: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = ps.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb)?;
        let ma = broadcast_map(&out, &sa);
        let mb = broadcast_map(&out, &sb);
        let va = self.value(a);
        let vb = self.value(b);
        let value = ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, value, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, value, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu(a, slope))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = transpose_raw(self.value(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], value, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape(a)
            )));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// 3x3 same-size cross-correlation: `input` is `[c_in, h, w]`, `kernel`
    /// is `[c_out, c_in, 3, 3]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 3 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2d expects [c,h,w] and [o,c,3,3], got {si:?} and {sk:?}"
            )));
        }
        if si[0] != sk[1] {
            return Err(Error::Dimension(format!(
                "conv2d input has {} channels, kernel expects {}",
                si[0], sk[1]
            )));
        }
        let (c_in, h, w, c_out) = (si[0], si[1], si[2], sk[0]);
        let value = conv2d_raw(self.value(input), self.value(kernel), c_in, c_out, h, w);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(vec![c_out, h, w], value, Op::Conv2d(input, kernel), rg))
    }

    /// Row-wise softmax of a `[r, c]` node with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Dimension(format!("softmax_rows needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![r, c], out, Op::SoftmaxRows(a), rg))
    }

    /// Sum of all entries as a `[1]` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Sum over `axes`, keeping them with extent 1.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= shape.len()) {
            return Err(Error::Dimension(format!("axes {axes:?} out of range for {shape:?}")));
        }
        let mut out_shape = shape.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let map = broadcast_map(&shape, &out_shape);
        let mut out = vec![0.0; numel(&out_shape)];
        for (&j, &v) in map.iter().zip(self.value(a)) {
            out[j] += v;
        }
        let rg = self.rg(a);
        Ok(self.push(out_shape, out, Op::SumAxes(a), rg))
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let count: usize = axes.iter().map(|&ax| self.shape(a).get(ax).copied().unwrap_or(1)).product();
        let s = self.sum_axes(a, axes)?;
        Ok(self.scale(s, 1.0 / count as f64))
    }

    pub fn apply_linear(&mut self, map: Rc<dyn LinearMap>, x: Var) -> Result<Var> {
        if self.shape(x) != map.in_shape() {
            return Err(Error::Dimension(format!(
                "linear map expects {:?}, got {:?}",
                map.in_shape(),
                self.shape(x)
            )));
        }
        let value = map.apply(self.value(x));
        let shape = map.out_shape().to_vec();
        debug_assert_eq!(value.len(), numel(&shape));
        let rg = self.rg(x);
        Ok(self.push(shape, value, Op::Linear(map, x), rg))
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_shape = &node.shape;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !self.rg(v) {
                        continue;
                    }
                    let map = broadcast_map(out_shape, self.shape(v));
                    accumulate(&mut grads[v.0], self.value(v).len(), |acc| {
                        for (&j, &gv) in map.iter().zip(g) {
                            acc[j] += s * gv;
                        }
                    });
                }
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let ma = broadcast_map(out_shape, self.shape(a));
                let mb = broadcast_map(out_shape, self.shape(b));
                let (va, vb) = (self.value(a), self.value(b));
                let is_div = matches!(node.op, Op::Div(..));
                if self.rg(a) {
                    accumulate(&mut grads[a.0], va.len(), |acc| {
                        for ((&i, &j), &gv) in ma.iter().zip(&mb).zip(g) {
                            acc[i] += if is_div { gv / vb[j] } else { gv * vb[j] };
                        }
                    });
                }
                if self.rg(b) {
                    accumulate(&mut grads[b.0], vb.len(), |acc| {
                        for ((&i, &j), &gv) in ma.iter().zip(&mb).zip(g) {
                            acc[j] += if is_div {
                                -gv * va[i] / (vb[j] * vb[j])
                            } else {
                                gv * va[i]
                            };
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for (d, &gv) in acc.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for (d, &gv) in acc.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for ((d, &gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        *d += if xv > 0.0 { gv } else { slope * gv };
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for ((d, &gv), &yv) in acc.iter_mut().zip(g).zip(y) {
                        *d += 0.5 * gv / yv;
                    }
                });
            }
            Op::Abs(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for ((d, &gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        *d += gv * if xv > 0.0 {
                            1.0
                        } else if xv < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a);
                accumulate(&mut grads[a.0], g.len(), |acc| {
                    for ((d, &gv), &xv) in acc.iter_mut().zip(g).zip(x) {
                        *d += 2.0 * xv * gv;
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                accumulate(&mut grads[a.0], n, |acc| {
                    for d in acc.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::SumAxes(a) => {
                let map = broadcast_map(self.shape(*a), out_shape);
                accumulate(&mut grads[a.0], map.len(), |acc| {
                    for (d, &j) in acc.iter_mut().zip(&map) {
                        *d += g[j];
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let bt = transpose_raw(self.value(b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    accumulate(&mut grads[a.0], m * k, |acc| {
                        acc.iter_mut().zip(&da).for_each(|(d, v)| *d += v);
                    });
                }
                if self.rg(b) {
                    let at = transpose_raw(self.value(a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    accumulate(&mut grads[b.0], k * n, |acc| {
                        acc.iter_mut().zip(&db).for_each(|(d, v)| *d += v);
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let gt = transpose_raw(g, c, r);
                accumulate(&mut grads[a.0], r * c, |acc| {
                    acc.iter_mut().zip(&gt).for_each(|(d, v)| *d += v);
                });
            }
            Op::Conv2d(input, kernel) => {
                self.conv2d_backward(*input, *kernel, g, grads);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let y = &node.value;
                accumulate(&mut grads[a.0], r * c, |acc| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            acc[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Linear(map, x) => {
                let dx = map.adjoint(g);
                accumulate(&mut grads[x.0], dx.len(), |acc| {
                    acc.iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
                });
            }
        }
    }

    fn conv2d_backward(&self, input: Var, kernel: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let si = self.shape(input);
        let (c_in, h, w) = (si[0], si[1], si[2]);
        let c_out = self.shape(kernel)[0];
        let hw = h * w;
        let x = self.value(input);
        let k = self.value(kernel);
        if self.rg(input) {
            accumulate(&mut grads[input.0], c_in * hw, |acc| {
                for o in 0..c_out {
                    let go = &g[o * hw..(o + 1) * hw];
                    for i in 0..c_in {
                        let dst = &mut acc[i * hw..(i + 1) * hw];
                        for ky in 0..3 {
                            let dy = ky as isize - 1;
                            let (y0, y1) = conv_range(dy, h);
                            for kx in 0..3 {
                                let dx = kx as isize - 1;
                                let wgt = k[((o * c_in + i) * 3 + ky) * 3 + kx];
                                if wgt == 0.0 {
                                    continue;
                                }
                                let (x0, x1) = conv_range(dx, w);
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let s0 = (x0 as isize + dx) as usize;
                                    let src = &go[y * w + x0..y * w + x1];
                                    let d = &mut dst[sy * w + s0..sy * w + s0 + (x1 - x0)];
                                    for (dv, &gv) in d.iter_mut().zip(src) {
                                        *dv += wgt * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        if self.rg(kernel) {
            accumulate(&mut grads[kernel.0], c_out * c_in * 9, |acc| {
                for o in 0..c_out {
                    let go = &g[o * hw..(o + 1) * hw];
                    for i in 0..c_in {
                        let xi = &x[i * hw..(i + 1) * hw];
                        for ky in 0..3 {
                            let dy = ky as isize - 1;
                            let (y0, y1) = conv_range(dy, h);
                            for kx in 0..3 {
                                let dx = kx as isize - 1;
                                let (x0, x1) = conv_range(dx, w);
                                let mut s = 0.0;
                                for y in y0..y1 {
                                    let sy = (y as isize + dy) as usize;
                                    let s0 = (x0 as isize + dx) as usize;
                                    let gr = &go[y * w + x0..y * w + x1];
                                    let xr = &xi[sy * w + s0..sy * w + s0 + (x1 - x0)];
                                    s += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                                }
                                acc[((o * c_in + i) * 3 + ky) * 3 + kx] += s;
                            }
                        }
                    }
                }
            });
        }
    }
}
