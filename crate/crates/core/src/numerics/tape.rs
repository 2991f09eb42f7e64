use std::collections::HashMap;
use std::sync::Arc;

use super::kernels::{self, ConvGeom, LayerNormGrads};
use super::{GradBuffer, ParamId, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A parameter store bound for one forward pass. `track = false` turns the
/// parameters into constants, so nothing upstream of them receives gradient.
#[derive(Clone, Copy, Debug)]
pub struct Params<'a, R> {
    pub store: &'a ParamStore<R>,
    pub track: bool,
}

impl<'a, R> Params<'a, R> {
    pub fn tracked(store: &'a ParamStore<R>) -> Self {
        Params { store, track: true }
    }

    pub fn frozen(store: &'a ParamStore<R>) -> Self {
        Params { store, track: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary<R> {
    Relu,
    LeakyRelu(R),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
    Abs,
    Neg,
    Scale(R),
    AddScalar(R),
    Clamp(R, R),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    Unary(Unary<R>, Var),
    AddBias { x: Var, bias: Var },
    AddChannelBias { x: Var, bias: Var },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: Vec<(R, R)> },
    Conv { x: Var, w: Var, geom: ConvGeom },
    IndexRows { x: Var, index: Vec<usize> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Reshape(Var),
}

struct Node<R> {
    value: Arc<Tensor<R>>,
    op: Op<R>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Every op appends a node holding its forward value. `backward` walks the
/// nodes in reverse and accumulates into the `grad` slot of each leaf created
/// with `requires_grad`; repeated calls add up until [`Tape::zero_grad`].
pub struct Tape<R = f64> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Tensor<R>>>,
    bound: HashMap<(u64, ParamId), Var>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
        }
    }
}

fn binary_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(Error::dim(op, a, b))
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push_shared(&mut self, value: Arc<Tensor<R>>, op: Op<R>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        // Nothing upstream can receive gradient, so the node is a constant.
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        self.push_shared(Arc::new(value), op, inputs)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = requires_grad;
        v
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: R) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Bind a stored parameter as a leaf; repeated calls return the same var.
    pub fn param(&mut self, p: Params<'_, R>, id: ParamId) -> Var {
        let key = (p.store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push_shared(p.store.shared(id), Op::Leaf, &[]);
        self.nodes[v.0].needs_grad = p.track;
        self.bound.insert(key, v);
        v
    }

    /// Gradients of every bound parameter of `store`, after `backward`.
    pub fn param_grads(&self, store: &ParamStore<R>) -> GradBuffer<R> {
        let mut out = GradBuffer::new(store.len());
        for (&(uid, id), &v) in &self.bound {
            if uid == store.uid() {
                if let Some(g) = self.grad(v) {
                    out.accumulate(id, g);
                }
            }
        }
        out
    }

    // ----- ops -------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            R::zero(),
            &mut out,
            (n as isize, 1),
        );
        let t = Tensor::new([m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new([c, r], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let shape = binary_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let f = |x: R, y: R| match op {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let out: Vec<R> = (0..n)
            .map(|i| f(va[if va.len() == 1 { 0 } else { i }], vb[if vb.len() == 1 { 0 } else { i }]))
            .collect();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary<R>, a: Var) -> Var {
        let t = self.value(a).map(|x| match op {
            Unary::Relu => x.max(R::zero()),
            Unary::LeakyRelu(s) => {
                if x > R::zero() {
                    x
                } else {
                    x * s
                }
            }
            Unary::Sigmoid => R::one() / (R::one() + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Abs => x.abs(),
            Unary::Neg => -x,
            Unary::Scale(c) => x * c,
            Unary::AddScalar(c) => x + c,
            Unary::Clamp(lo, hi) => x.max(lo).min(hi),
        });
        self.push(t, Op::Unary(op, a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(R::of_f64(slope)), a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(R::of_f64(c)), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::AddScalar(R::of_f64(c)), a)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(R::of_f64(lo), R::of_f64(hi)), a)
    }

    /// `x + bias` with `bias` repeated along every leading axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let n = *sx.last().unwrap_or(&1);
        if sb != [n] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let mut t = (*self.nodes[x.0].value).clone();
        for row in t.data_mut().chunks_exact_mut(n) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
        Ok(self.push(t, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// `x + bias` with one bias per slice of the first axis (conv channels).
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.first().unwrap_or(&1);
        if sb != [c] {
            return Err(Error::dim("add_channel_bias", sx, sb));
        }
        let b = self.value(bias).data();
        let mut t = (*self.nodes[x.0].value).clone();
        let per = t.numel() / c.max(1);
        for (chunk, &bb) in t.data_mut().chunks_exact_mut(per.max(1)).zip(b) {
            for v in chunk {
                *v += bb;
            }
        }
        Ok(self.push(t, Op::AddChannelBias { x, bias }, &[x, bias]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / R::of_usize(v.numel()));
        self.push(t, Op::Mean(a), &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = *v.shape().last().unwrap_or(&1);
        let t = Tensor::new(v.shape().to_vec(), kernels::softmax_rows(v.data(), d)).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Normalize over the last axis, then scale by `gamma` and shift by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x);
        let d = *sx.last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", sx, self.shape(p)));
            }
        }
        let xv = self.value(x);
        let stats = kernels::row_stats(xv.data(), d, R::of_f64(eps));
        let y = kernels::layer_norm_forward(xv.data(), self.value(gamma).data(), self.value(beta).data(), &stats);
        let t = Tensor::new(xv.shape().to_vec(), y)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    /// 1-d cross-correlation: `x[C_in, T]`, `w[C_out, C_in, K]` to `[C_out, T']`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (xs, ws) = match (sx, sw) {
            ([c, t], [o, i, k]) => ((*c, 1, *t), (*o, *i, 1, *k)),
            _ => return Err(Error::dim("conv1d", sx, sw)),
        };
        let geom = ConvGeom::new("conv1d", xs, ws, (1, stride), (1, 1), (0, padding))?;
        let y = geom.forward(self.value(x).data(), self.value(w).data());
        let t = Tensor::new([geom.c_out, geom.out_t], y)?;
        Ok(self.push(t, Op::Conv { x, w, geom }, &[x, w]))
    }

    /// Dilated 2-d cross-correlation: `x[C_in, F, T]`, `w[C_out, C_in, Kf, Kt]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: (usize, usize),
        dilation: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (xs, ws) = match (sx, sw) {
            ([c, f, t], [o, i, kf, kt]) => ((*c, *f, *t), (*o, *i, *kf, *kt)),
            _ => return Err(Error::dim("conv2d", sx, sw)),
        };
        let geom = ConvGeom::new("conv2d", xs, ws, stride, dilation, padding)?;
        let y = geom.forward(self.value(x).data(), self.value(w).data());
        let t = Tensor::new([geom.c_out, geom.out_f, geom.out_t], y)?;
        Ok(self.push(t, Op::Conv { x, w, geom }, &[x, w]))
    }

    /// Gather slices of the first axis; indices may repeat or be omitted.
    pub fn index_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let v = self.value(x);
        let rows = *v.shape().first().unwrap_or(&1);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Lookup(format!("row index {bad} out of range for {rows} rows")));
        }
        let width = v.numel() / rows.max(1);
        let mut out = Vec::with_capacity(index.len() * width);
        for &i in &index {
            out.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::IndexRows { x, index }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = *v.shape().first().unwrap_or(&0);
        if start + len > rows || len == 0 {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of range for {rows} rows",
                start + len
            )));
        }
        let width = v.numel() / rows;
        let out = v.data()[start * width..(start + len) * width].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = v.dims2()?;
        if start + len > c || len == 0 {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of range for {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v.data()[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new([r, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new([r, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ----- backward --------------------------------------------------------

    /// Back-propagate from a scalar `loss` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if self.grads.len() < self.nodes.len() {
            self.grads.resize(self.nodes.len(), None);
        }
        let mut work: Vec<Option<Vec<R>>> = vec![None; loss.0 + 1];
        work[loss.0] = Some(vec![R::one()]);
        let Tape { nodes, grads, .. } = self;
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match &mut grads[i] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
                continue;
            }
            backprop(nodes, i, &g, &mut work);
        }
        Ok(())
    }
}

/// Zero-initialized gradient slot for `v`, or `None` if `v` takes no gradient.
fn slot<'a, R: Real>(nodes: &[Node<R>], work: &'a mut [Option<Vec<R>>], v: Var) -> Option<&'a mut [R]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(work[v.0].get_or_insert_with(|| vec![R::zero(); n]).as_mut_slice())
}

/// Two distinct gradient slots at once.
fn slot2<'a, R: Real>(
    nodes: &[Node<R>],
    work: &'a mut [Option<Vec<R>>],
    a: Var,
    b: Var,
) -> (Option<&'a mut [R]>, Option<&'a mut [R]>) {
    assert_ne!(a, b);
    for v in [a, b] {
        if nodes[v.0].needs_grad && work[v.0].is_none() {
            work[v.0] = Some(vec![R::zero(); nodes[v.0].value.numel()]);
        }
    }
    let (lo, hi, swap) = if a.0 < b.0 { (a.0, b.0, false) } else { (b.0, a.0, true) };
    let (left, right) = work.split_at_mut(hi);
    let first = if nodes[lo].needs_grad { left[lo].as_deref_mut() } else { None };
    let second = if nodes[hi].needs_grad { right[0].as_deref_mut() } else { None };
    if swap {
        (second, first)
    } else {
        (first, second)
    }
}

fn backprop<R: Real>(nodes: &[Node<R>], i: usize, g: &[R], work: &mut [Option<Vec<R>>]) {
    let node = &nodes[i];
    let val = |v: Var| -> &Tensor<R> { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2().expect("matrix");
            let n = val(*b).shape()[1];
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(da) = slot(nodes, work, *a) {
                // da += g . b^T
                R::gemm(m, n, k, R::one(), g, (n as isize, 1), bv, (1, n as isize), R::one(), da, (k as isize, 1));
            }
            if *a == *b {
                // x . x : second operand shares the slot already updated above
                let mut db = vec![R::zero(); k * n];
                R::gemm(k, m, n, R::one(), av, (1, k as isize), g, (n as isize, 1), R::zero(), &mut db, (n as isize, 1));
                if let Some(s) = slot(nodes, work, *b) {
                    s.iter_mut().zip(&db).for_each(|(x, y)| *x += *y);
                }
            } else if let Some(db) = slot(nodes, work, *b) {
                // db += a^T . g
                R::gemm(k, m, n, R::one(), av, (1, k as isize), g, (n as isize, 1), R::one(), db, (n as isize, 1));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = val(*a).dims2().expect("matrix");
            if let Some(da) = slot(nodes, work, *a) {
                for p in 0..r {
                    for q in 0..c {
                        da[p * c + q] += g[q * r + p];
                    }
                }
            }
        }
        Op::Binary(op, a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let n = g.len();
            let pick = |d: &[R], j: usize| d[if d.len() == 1 { 0 } else { j }];
            let mut ga = vec![R::zero(); av.len()];
            let mut gb = vec![R::zero(); bv.len()];
            for j in 0..n {
                let (da, db) = match op {
                    Binary::Add => (g[j], g[j]),
                    Binary::Sub => (g[j], -g[j]),
                    Binary::Mul => (g[j] * pick(bv, j), g[j] * pick(av, j)),
                };
                ga[if av.len() == 1 { 0 } else { j }] += da;
                gb[if bv.len() == 1 { 0 } else { j }] += db;
            }
            for (v, gv) in [(*a, ga), (*b, gb)] {
                if let Some(s) = slot(nodes, work, v) {
                    s.iter_mut().zip(&gv).for_each(|(x, y)| *x += *y);
                }
            }
        }
        Op::Unary(op, a) => {
            let x = val(*a).data();
            let y = node.value.data();
            if let Some(da) = slot(nodes, work, *a) {
                for j in 0..g.len() {
                    let d = match *op {
                        Unary::Relu => {
                            if x[j] > R::zero() {
                                R::one()
                            } else {
                                R::zero()
                            }
                        }
                        Unary::LeakyRelu(s) => {
                            if x[j] > R::zero() {
                                R::one()
                            } else {
                                s
                            }
                        }
                        Unary::Sigmoid => y[j] * (R::one() - y[j]),
                        Unary::Tanh => R::one() - y[j] * y[j],
                        Unary::Exp => y[j],
                        Unary::Log => R::one() / x[j],
                        Unary::Square => (R::one() + R::one()) * x[j],
                        Unary::Abs => {
                            if x[j] > R::zero() {
                                R::one()
                            } else if x[j] < R::zero() {
                                -R::one()
                            } else {
                                R::zero()
                            }
                        }
                        Unary::Neg => -R::one(),
                        Unary::Scale(c) => c,
                        Unary::AddScalar(_) => R::one(),
                        Unary::Clamp(lo, hi) => {
                            if x[j] >= lo && x[j] <= hi {
                                R::one()
                            } else {
                                R::zero()
                            }
                        }
                    };
                    da[j] += g[j] * d;
                }
            }
        }
        Op::AddBias { x, bias } => {
            let n = val(*bias).numel();
            let (dx, db) = slot2(nodes, work, *x, *bias);
            if let Some(dx) = dx {
                dx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
            if let Some(db) = db {
                for row in g.chunks_exact(n) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
                }
            }
        }
        Op::AddChannelBias { x, bias } => {
            let c = val(*bias).numel();
            let per = g.len() / c;
            let (dx, db) = slot2(nodes, work, *x, *bias);
            if let Some(dx) = dx {
                dx.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
            if let Some(db) = db {
                for (d, chunk) in db.iter_mut().zip(g.chunks_exact(per)) {
                    *d += chunk.iter().copied().sum::<R>();
                }
            }
        }
        Op::Sum(a) => {
            if let Some(da) = slot(nodes, work, *a) {
                da.iter_mut().for_each(|v| *v += g[0]);
            }
        }
        Op::Mean(a) => {
            if let Some(da) = slot(nodes, work, *a) {
                let s = g[0] / R::of_usize(da.len());
                da.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Softmax(a) => {
            let d = *node.value.shape().last().unwrap_or(&1);
            if let Some(da) = slot(nodes, work, *a) {
                kernels::softmax_rows_backward(node.value.data(), g, d, da);
            }
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            // gamma and beta are distinct leaves from x by construction
            let gam = val(*gamma).data();
            let xv = val(*x).data();
            let mut dgamma = nodes[gamma.0].needs_grad.then(|| vec![R::zero(); gam.len()]);
            let mut dbeta = nodes[beta.0].needs_grad.then(|| vec![R::zero(); gam.len()]);
            let dx = slot(nodes, work, *x);
            kernels::layer_norm_backward(
                xv,
                gam,
                stats,
                g,
                LayerNormGrads {
                    dx,
                    dgamma: dgamma.as_deref_mut(),
                    dbeta: dbeta.as_deref_mut(),
                },
            );
            for (v, d) in [(*gamma, dgamma), (*beta, dbeta)] {
                if let (Some(d), Some(s)) = (d, slot(nodes, work, v)) {
                    s.iter_mut().zip(&d).for_each(|(a, b)| *a += *b);
                }
            }
        }
        Op::Conv { x, w, geom } => {
            let (xv, wv) = (val(*x).data(), val(*w).data());
            let (dx, dw) = slot2(nodes, work, *x, *w);
            geom.backward(xv, wv, g, dx, dw);
        }
        Op::IndexRows { x, index } => {
            let rows = val(*x).shape()[0];
            let width = val(*x).numel() / rows;
            if let Some(dx) = slot(nodes, work, *x) {
                for (k, &r) in index.iter().enumerate() {
                    let src = &g[k * width..(k + 1) * width];
                    dx[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += *b);
                }
            }
        }
        Op::SliceRows { x, start } => {
            let rows = val(*x).shape()[0];
            let width = val(*x).numel() / rows;
            if let Some(dx) = slot(nodes, work, *x) {
                dx[start * width..start * width + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += *b);
            }
        }
        Op::SliceCols { x, start } => {
            let (r, c) = val(*x).dims2().expect("matrix");
            let len = g.len() / r;
            if let Some(dx) = slot(nodes, work, *x) {
                for i in 0..r {
                    for j in 0..len {
                        dx[i * c + start + j] += g[i * len + j];
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let (r, total) = node.value.dims2().expect("matrix");
            let mut off = 0;
            for &p in parts {
                let w = val(p).shape()[1];
                if let Some(dp) = slot(nodes, work, p) {
                    for i in 0..r {
                        for j in 0..w {
                            dp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Reshape(a) => {
            if let Some(da) = slot(nodes, work, *a) {
                da.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
        }
    }
}
