use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{matrix_dims, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Constant,
    Variable,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    AssembleRows(Vec<Var>, Vec<Option<(usize, usize)>>),
    Softmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    LayerNorm { x: Var, xhat: Vec<T>, rstd: Vec<T> },
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Pick(Var, Vec<(usize, usize)>),
    MaxRows(Var, Vec<usize>),
    Reshape(Var),
}

struct Node<T> {
    /// `None` for parameters, whose values live in the store.
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Computation tape for one forward pass. Parameters are borrowed from a
/// [`ParamStore`]; every other value is owned by the tape.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// A tape with no parameter store; only constants and variables.
    pub fn new() -> Self {
        Graph {
            params: None,
            param_vars: Vec::new(),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Graph {
            params: Some(params),
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(256),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter node implies a store").get(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.value(v).data()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> T {
        self.data(v)[0]
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        matrix_dims(self.shape(v))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient, readable through [`Graph::grad`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Variable,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; created once per tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
            return v;
        }
        assert!(
            self.params.is_some_and(|p| id.0 < p.len()),
            "parameter {id:?} not in this graph's store"
        );
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, &[s]));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.require_2d("matmul", a)?;
        let (k2, m) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", &[self.shape(a), self.shape(b)]));
        }
        let mut out = vec![T::zero(); n * m];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..n {
                let row = &mut out[i * m..(i + 1) * m];
                for p in 0..k {
                    let x = ad[i * k + p];
                    if x == T::zero() {
                        continue;
                    }
                    let brow = &bd[p * m..(p + 1) * m];
                    for (o, &y) in row.iter_mut().zip(brow) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, m], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (_, m) = self.dims(a);
        let r = self.value(row);
        if r.len() != m || self.shape(a).is_empty() {
            return Err(Error::shape(op, &[self.shape(a), self.shape(row)]));
        }
        let rd = r.data();
        let data = self
            .data(a)
            .chunks(m)
            .flat_map(|chunk| chunk.iter().zip(rd).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    /// `a + row` with `row` broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    /// `a * row` elementwise with `row` broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect()).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", &[]));
        }
        let mut n = None;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_2d("concat_cols", p)?;
            if *n.get_or_insert(r) != r {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat_cols", &shapes));
            }
            widths.push(c);
        }
        let n = n.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", &[]));
        }
        let mut m = None;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.require_2d("concat_rows", p)?;
            if *m.get_or_insert(c) != c {
                let shapes: Vec<&[usize]> = parts.iter().map(|&p| self.shape(p)).collect();
                return Err(Error::shape("concat_rows", &shapes));
            }
            rows += r;
        }
        let m = m.unwrap_or(0);
        let mut out = Vec::with_capacity(rows * m);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, m], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (n, m) = self.require_2d("slice_cols", a)?;
        if start + len > m {
            return Err(Error::Shape {
                op: "slice_cols",
                shapes: format!("{:?} cols {start}..{}", self.shape(a), start + len),
            });
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&d[i * m + start..i * m + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push(t, Op::SliceCols(a, start), &[a]))
    }

    /// Rows of a matrix by index; doubles as embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.require_2d("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape {
                op: "gather_rows",
                shapes: format!("{:?} row {bad}", self.shape(a)),
            });
        }
        let d = self.data(a);
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            out.extend_from_slice(&d[i * m..(i + 1) * m]);
        }
        let t = Tensor::new(vec![idx.len(), m], out)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Builds a `map.len() x width` matrix whose row `i` is row `r` of
    /// `parts[p]` when `map[i] == Some((p, r))`, and zeros otherwise.
    pub fn assemble_rows(&mut self, parts: &[Var], map: &[Option<(usize, usize)>], width: usize) -> Result<Var> {
        for &p in parts {
            let (_, c) = self.require_2d("assemble_rows", p)?;
            if c != width {
                return Err(Error::Shape {
                    op: "assemble_rows",
                    shapes: format!("{:?} vs width {width}", self.shape(p)),
                });
            }
        }
        let mut out = vec![T::zero(); map.len() * width];
        for (i, slot) in map.iter().enumerate() {
            if let Some((p, r)) = *slot {
                let part = *parts.get(p).ok_or_else(|| Error::Shape {
                    op: "assemble_rows",
                    shapes: format!("part {p} of {}", parts.len()),
                })?;
                let (rows, _) = self.dims(part);
                if r >= rows {
                    return Err(Error::Shape {
                        op: "assemble_rows",
                        shapes: format!("{:?} row {r}", self.shape(part)),
                    });
                }
                out[i * width..(i + 1) * width].copy_from_slice(&self.data(part)[r * width..(r + 1) * width]);
            }
        }
        let t = Tensor::new(vec![map.len(), width], out)?;
        Ok(self.push(t, Op::AssembleRows(parts.to_vec(), map.to_vec()), parts))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, m) = self.dims(a);
        let v = self.value(a);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let (_, m) = self.dims(a);
        let v = self.value(a);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(m.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::LogSoftmax(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, T::tanh);
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, |x| x.max(T::zero()));
        self.push(t, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let t = self.map_unary(a, |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(t, Op::Gelu(a), &[a])
    }

    /// ln(1 + e^x), computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, softplus);
        self.push(t, Op::Softplus(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, T::ln);
        self.push(t, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map_unary(a, T::exp);
        self.push(t, Op::Exp(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let (n, m) = self.dims(a);
        let eps = T::of(eps);
        let v = self.value(a);
        let mf = T::of(m as f64);
        let mut xhat = v.data().to_vec();
        let mut rstd = Vec::with_capacity(n);
        for row in xhat.chunks_mut(m.max(1)) {
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / mf;
            let r = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let t = Tensor::new(v.shape().to_vec(), xhat.clone()).expect("same shape");
        self.push(t, Op::LayerNorm { x: a, xhat, rstd }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::of(d.len().max(1) as f64);
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.require_2d("transpose", a)?;
        let d = self.data(a);
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = d[i * m + j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Elements at `(row, col)` positions, as a vector.
    pub fn pick(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var> {
        let (n, m) = self.require_2d("pick", a)?;
        if let Some(&(r, c)) = at.iter().find(|&&(r, c)| r >= n || c >= m) {
            return Err(Error::Shape {
                op: "pick",
                shapes: format!("{:?} at ({r}, {c})", self.shape(a)),
            });
        }
        let d = self.data(a);
        let out = at.iter().map(|&(r, c)| d[r * m + c]).collect();
        let t = Tensor::new(vec![at.len()], out)?;
        Ok(self.push(t, Op::Pick(a, at.to_vec()), &[a]))
    }

    /// Column-wise maximum over rows, `[n, m] -> [1, m]`; the first row
    /// wins ties.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.require_2d("max_rows", a)?;
        if n == 0 {
            return Err(Error::shape("max_rows", &[self.shape(a)]));
        }
        let d = self.data(a);
        let mut arg = vec![0usize; m];
        let mut out = d[..m].to_vec();
        for i in 1..n {
            for j in 0..m {
                if d[i * m + j] > out[j] {
                    out[j] = d[i * m + j];
                    arg[j] = i;
                }
            }
        }
        let t = Tensor::new(vec![1, m], out)?;
        Ok(self.push(t, Op::MaxRows(a, arg), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.len() {
            return Err(Error::shape("reshape", &[v.shape(), &shape]));
        }
        let t = Tensor::new(shape, v.data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// `x W + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let w = self.param(w);
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    /// Gradient of the last [`Graph::backward`] call at `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar loss. Returns gradients for every
    /// parameter on this tape; gradients of variables are kept on the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                shapes: format!("non-scalar loss {:?}", self.shape(loss)),
            });
        }
        let n_params = self.params.map_or(0, |p| p.len());
        let mut out = Gradients::empty(n_params);
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(i, &gy, &mut grads, &mut out)?;
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(out)
    }

    fn backprop_node(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.as_ref();
        // Adds into the gradient buffer of `v`, allocating zeros on first use.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Constant | Op::Variable => {}
            Op::Param(id) => out.accumulate(*id, gy),
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let (_, m) = self.dims(*b);
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        let grow = &gy[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let mut s = T::zero();
                            for (&g, &x) in grow.iter().zip(brow) {
                                s = s + g * x;
                            }
                            ga[r * k + p] = ga[r * k + p] + s;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        let grow = &gy[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = ad[r * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for (o, &g) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o = *o + x * g;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| {
                    for (o, &x) in g.iter_mut().zip(gy) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                acc(*a, &mut |g| {
                    for ((o, &x), &w) in g.iter_mut().zip(gy).zip(bd) {
                        *o = *o + x * w;
                    }
                });
                acc(*b, &mut |g| {
                    for ((o, &x), &w) in g.iter_mut().zip(gy).zip(ad) {
                        *o = *o + x * w;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let m = self.value(*row).len();
                acc(*a, &mut |g| add_into(g, gy));
                acc(*row, &mut |g| {
                    for chunk in gy.chunks(m) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let m = self.value(*row).len();
                let (ad, rd) = (self.data(*a), self.data(*row));
                acc(*a, &mut |g| {
                    for (gc, yc) in g.chunks_mut(m).zip(gy.chunks(m)) {
                        for ((o, &x), &w) in gc.iter_mut().zip(yc).zip(rd) {
                            *o = *o + x * w;
                        }
                    }
                });
                acc(*row, &mut |g| {
                    for (yc, ac) in gy.chunks(m).zip(ad.chunks(m)) {
                        for ((o, &x), &w) in g.iter_mut().zip(yc).zip(ac) {
                            *o = *o + x * w;
                        }
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                for (o, &x) in g.iter_mut().zip(gy) {
                    *o = *o + x * *c;
                }
            }),
            Op::ConcatCols(parts) => {
                let total: usize = self.dims(Var(i)).1;
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.dims(p);
                    acc(p, &mut |g| {
                        for r in 0..n {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &gy[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |g| add_into(g, &gy[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (n, m) = self.dims(*a);
                let w = self.dims(Var(i)).1;
                acc(*a, &mut |g| {
                    for r in 0..n {
                        add_into(&mut g[r * m + start..r * m + start + w], &gy[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let m = self.dims(*a).1;
                acc(*a, &mut |g| {
                    for (k, &r) in idx.iter().enumerate() {
                        add_into(&mut g[r * m..(r + 1) * m], &gy[k * m..(k + 1) * m]);
                    }
                });
            }
            Op::AssembleRows(parts, map) => {
                let w = self.dims(Var(i)).1;
                for (pi, &p) in parts.iter().enumerate() {
                    acc(p, &mut |g| {
                        for (row, slot) in map.iter().enumerate() {
                            if let Some((q, r)) = *slot {
                                if q == pi {
                                    add_into(&mut g[r * w..(r + 1) * w], &gy[row * w..(row + 1) * w]);
                                }
                            }
                        }
                    });
                }
            }
            Op::Softmax(a) => {
                let y = y.expect("owned").data();
                let m = self.dims(*a).1.max(1);
                acc(*a, &mut |g| {
                    for ((gc, yc), dc) in g.chunks_mut(m).zip(y.chunks(m)).zip(gy.chunks(m)) {
                        let dot = yc.iter().zip(dc).map(|(&p, &d)| p * d).sum::<T>();
                        for ((o, &p), &d) in gc.iter_mut().zip(yc).zip(dc) {
                            *o = *o + p * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let y = y.expect("owned").data();
                let m = self.dims(*a).1.max(1);
                acc(*a, &mut |g| {
                    for ((gc, yc), dc) in g.chunks_mut(m).zip(y.chunks(m)).zip(gy.chunks(m)) {
                        let s = dc.iter().copied().sum::<T>();
                        for ((o, &ly), &d) in gc.iter_mut().zip(yc).zip(dc) {
                            *o = *o + d - ly.exp() * s;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = y.expect("owned").data();
                acc(*a, &mut |g| {
                    for ((o, &d), &s) in g.iter_mut().zip(gy).zip(y) {
                        *o = *o + d * s * (T::one() - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = y.expect("owned").data();
                acc(*a, &mut |g| {
                    for ((o, &d), &t) in g.iter_mut().zip(gy).zip(y) {
                        *o = *o + d * (T::one() - t * t);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                acc(*a, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        if v > T::zero() {
                            *o = *o + d;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
                let three = T::of(3.0);
                acc(*a, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * v * v);
                        *o = *o + d * (half * (T::one() + t) + half * v * dt);
                    }
                });
            }
            Op::Softplus(a) => {
                let x = self.data(*a);
                acc(*a, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        *o = *o + d * sigmoid(v);
                    }
                });
            }
            Op::Log(a) => {
                let x = self.data(*a);
                acc(*a, &mut |g| {
                    for ((o, &d), &v) in g.iter_mut().zip(gy).zip(x) {
                        *o = *o + d / v;
                    }
                });
            }
            Op::Exp(a) => {
                let y = y.expect("owned").data();
                acc(*a, &mut |g| {
                    for ((o, &d), &e) in g.iter_mut().zip(gy).zip(y) {
                        *o = *o + d * e;
                    }
                });
            }
            Op::LayerNorm { x, xhat, rstd } => {
                let m = self.dims(*x).1.max(1);
                let mf = T::of(m as f64);
                acc(*x, &mut |g| {
                    for (((gc, xc), dc), &r) in g.chunks_mut(m).zip(xhat.chunks(m)).zip(gy.chunks(m)).zip(rstd) {
                        let mean_d = dc.iter().copied().sum::<T>() / mf;
                        let mean_dx = dc.iter().zip(xc).map(|(&d, &h)| d * h).sum::<T>() / mf;
                        for ((o, &d), &h) in gc.iter_mut().zip(dc).zip(xc) {
                            *o = *o + r * (d - mean_d - h * mean_dx);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |g| {
                for o in g.iter_mut() {
                    *o = *o + gy[0];
                }
            }),
            Op::Mean(a) => {
                let len = self.value(*a).len().max(1);
                let d = gy[0] / T::of(len as f64);
                acc(*a, &mut |g| {
                    for o in g.iter_mut() {
                        *o = *o + d;
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = self.dims(*a);
                acc(*a, &mut |g| {
                    for r in 0..n {
                        for c in 0..m {
                            g[r * m + c] = g[r * m + c] + gy[c * n + r];
                        }
                    }
                });
            }
            Op::Pick(a, at) => {
                let m = self.dims(*a).1;
                acc(*a, &mut |g| {
                    for (k, &(r, c)) in at.iter().enumerate() {
                        g[r * m + c] = g[r * m + c] + gy[k];
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let m = self.dims(*a).1;
                acc(*a, &mut |g| {
                    for (c, &r) in arg.iter().enumerate() {
                        g[r * m + c] = g[r * m + c] + gy[c];
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |g| add_into(g, gy)),
        }
        Ok(())
    }
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s = s + *x;
    }
    for x in row.iter_mut() {
        *x = *x / s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 40.0]));
        let y = g.softmax(x);
        for row in g.data(y).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_shape_error_names_op() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_moments() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -1.0, 0.5, 0.25, 7.0]));
        let y = g.layer_norm(x, 0.0);
        for row in g.data(y).chunks(4) {
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut g = Graph::<f64>::new();
        let xs = [0.5, -1.0, 2.0];
        let ys = [3.0, 4.0, -0.25];
        let x = g.variable(t(&[1, 3], &xs));
        let y = g.constant(t(&[3, 1], &ys));
        let d = g.matmul(x, y).unwrap();
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &ys);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::zeros(vec![2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_params_read_as_zero() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", t(&[2], &[1.0, 2.0])).unwrap();
        let b = store.add("b", t(&[2], &[3.0, 4.0])).unwrap();
        let mut g = Graph::with_params(&store);
        let av = g.param(a);
        let s = g.sum(av);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.dense(a, 2), vec![1.0, 1.0]);
        assert_eq!(grads.dense(b, 2), vec![0.0, 0.0]);
    }

    #[test]
    fn max_rows_picks_first_on_ties() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3, 2], &[1.0, 5.0, 1.0, 7.0, 0.0, 7.0]));
        let m = g.max_rows(x).unwrap();
        assert_eq!(g.data(m), &[1.0, 7.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0_f64), 1000.0);
        assert!(softplus(-1000.0_f64) >= 0.0);
        assert!((softplus(0.0_f64) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
