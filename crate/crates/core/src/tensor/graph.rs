use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op maps onto the left one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `[n]` or `[1, n]` against lhs `[m, n]`.
    Row(usize),
    /// rhs is `[m, 1]` against lhs `[m, n]`.
    Col(usize),
    Scalar,
}

impl Bcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        let rn: usize = rhs.iter().product();
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        if rn == 1 {
            return Ok(Bcast::Scalar);
        }
        if let [m, n] = *lhs {
            match *rhs {
                [r] if r == n => return Ok(Bcast::Row(n)),
                [1, r] if r == n => return Ok(Bcast::Row(n)),
                [r, 1] if r == m => return Ok(Bcast::Col(n)),
                _ => {}
            }
        }
        Err(Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Row(n) => i % n,
            Bcast::Col(n) => i / n,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Sigmoid,
    Relu,
    Exp,
    Log,
    Square,
    Sqrt,
    LogSigmoid,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var, Bcast),
    Unary(Unary, Var),
    Scale(Var, T),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    SumCols(Var),
    MeanRows(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CausalConv {
        x: Var,
        w: Var,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Maximum(Var, Var),
    PairwiseSqDist(Var),
    FaultyIdentity(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Bookkeeping from one backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardStats {
    /// Nodes whose adjoint was propagated (each at most once).
    pub visited: usize,
    /// Nodes reachable from the loss that require gradients.
    pub reachable: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    pub stats: BackwardStats,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `v`; zero tensor when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

/// Append-only computation tape. Creation order is a topological order, so
/// the backward pass is a single reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (-x.abs()).exp().ln_1p()
}

fn add_into<T: Real>(dst: &mut Option<Vec<T>>, src: Vec<T>) {
    match dst {
        Some(d) => {
            for (a, b) in d.iter_mut().zip(src) {
                *a = *a + b;
            }
        }
        None => *dst = Some(src),
    }
}

/// Outer/axis/inner split of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b, _) | Op::MatMul(a, b) | Op::Maximum(a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumCols(x)
            | Op::MeanRows(x)
            | Op::PairwiseSqDist(x)
            | Op::FaultyIdentity(x, _) => vec![*x],
            Op::Slice { x, .. } | Op::Softmax(x) => vec![*x],
            Op::Concat(xs, _) => xs.clone(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CausalConv { x, w } => vec![*x, *w],
            Op::Gather { table, .. } => vec![*table],
        }
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::invalid(
                op,
                format!("expected a 2-D operand, got shape {s:?}"),
            )),
        }
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let bc = Bcast::resolve(name, self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[bc.index(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push(name, value, Op::Binary(kind, a, b, bc))
    }

    /// `a + b`; `b` may be a row vector, column vector or scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise maximum. The gradient flows only to the selected operand;
    /// ties select `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op: "maximum",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| if x >= y { x } else { y })
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        self.push("maximum", value, Op::Maximum(a, b))
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let name = match kind {
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::LogSigmoid => "log_sigmoid",
        };
        let value = self.value(x).map(|v| match kind {
            Unary::Sigmoid => sigmoid(v),
            Unary::Relu => v.max(T::zero()),
            Unary::Exp => v.exp(),
            Unary::Log => v.ln(),
            Unary::Square => v * v,
            Unary::Sqrt => v.sqrt(),
            Unary::LogSigmoid => log_sigmoid(v),
        });
        self.push(name, value, Op::Unary(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// Square root; the adjoint at exactly 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    /// `ln σ(x)` in the overflow-free form `min(x,0) − ln(1+e^{−|x|})`.
    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::LogSigmoid, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -T::one())
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("offset", value, Op::Offset(x))
    }

    // ---- linear algebra and layout -----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.dims2("transpose", x)?;
        let value = self.value(x).transpose()?;
        self.push("transpose", value, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for shape {base:?}"),
            ));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut shape = base.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let v = self.value(x);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&shape, data)?;
        self.push("concat", value, Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            ));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, data)?;
        self.push("slice", value, Op::Slice { x, axis, start })
    }

    /// Row lookup `table[idx[i]]`; doubles as a row permutation (e.g. time flip).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2("gather_rows", table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {v} rows"),
            ));
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let value = Tensor::new(&[idx.len(), d], data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let s: T = v.data().iter().copied().sum();
        let m = s / T::of_f64(v.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x))
    }

    /// `[m, n] -> [m, 1]` row sums.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("sum_cols", x)?;
        let v = self.value(x);
        let data = (0..m).map(|i| v.data()[i * n..(i + 1) * n].iter().copied().sum()).collect();
        let value = Tensor::new(&[m, 1], data)?;
        self.push("sum_cols", value, Op::SumCols(x))
    }

    /// `[m, n] -> [1, n]` column means.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", x)?;
        if m == 0 {
            return Err(Error::invalid("mean_rows", "no rows"));
        }
        let v = self.value(x).data();
        let mut acc = vec![T::zero(); n];
        for i in 0..m {
            for (a, &b) in acc.iter_mut().zip(&v[i * n..(i + 1) * n]) {
                *a = *a + b;
            }
        }
        let inv = T::one() / T::of_f64(m as f64);
        let data = acc.into_iter().map(|a| a * inv).collect();
        let value = Tensor::new(&[1, n], data)?;
        self.push("mean_rows", value, Op::MeanRows(x))
    }

    // ---- normalisation ------------------------------------------------------

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the rest are exactly zero.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (m, n) = self.dims2("softmax", x)?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            let hi = if causal { (i + 1).min(n) } else { n };
            let row = &src[i * n..i * n + hi];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let out = &mut data[i * n..i * n + hi];
            let mut z = T::zero();
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                z = z + *o;
            }
            for o in out.iter_mut() {
                *o = *o / z;
            }
        }
        let value = Tensor::new(&[m, n], data)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta` of
    /// shape `[n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::of_f64(n as f64);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(&[m, n], out)?;
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    // ---- model-specific primitives -----------------------------------------

    /// Depthwise causal convolution along time with zero left padding:
    /// `y[t, d] = Σ_i w[i, d] · x[t − i, d]`. `w` is `[k, D]` (per channel) or
    /// `[k, 1]` (one profile shared by all channels).
    pub fn causal_conv(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t_len, d) = self.dims2("causal_conv", x)?;
        let (k, wd) = self.dims2("causal_conv", w)?;
        if wd != d && wd != 1 {
            return Err(Error::Shape {
                op: "causal_conv",
                lhs: vec![t_len, d],
                rhs: vec![k, wd],
            });
        }
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = vec![T::zero(); t_len * d];
        for t in 0..t_len {
            for i in 0..k.min(t + 1) {
                let src = &xs[(t - i) * d..(t - i + 1) * d];
                let dst = &mut out[t * d..(t + 1) * d];
                if wd == 1 {
                    let wi = ws[i];
                    for c in 0..d {
                        dst[c] = dst[c] + wi * src[c];
                    }
                } else {
                    let wr = &ws[i * d..(i + 1) * d];
                    for c in 0..d {
                        dst[c] = dst[c] + wr[c] * src[c];
                    }
                }
            }
        }
        let value = Tensor::new(&[t_len, d], out)?;
        self.push("causal_conv", value, Op::CausalConv { x, w })
    }

    /// All-pairs squared Euclidean distances between rows: `[n, d] -> [n, n]`.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2("pairwise_sq_dist", x)?;
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let mut s = T::zero();
                for c in 0..d {
                    let diff = xs[i * d + c] - xs[j * d + c];
                    s = s + diff * diff;
                }
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        let value = Tensor::new(&[n, n], out)?;
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist(x))
    }

    /// Identity whose adjoint is scaled by `factor`. Exists only so gradient
    /// checking can be shown to catch a wrong backward rule.
    #[doc(hidden)]
    pub fn faulty_identity(&mut self, x: Var, factor: T) -> Result<Var> {
        let value = self.value(x).clone();
        self.push("faulty_identity", value, Op::FaultyIdentity(x, factor))
    }

    // ---- composites ---------------------------------------------------------

    /// `x · w + b` with `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.ndim() > 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        let mut stats = BackwardStats::default();

        let mut reachable = vec![false; n];
        reachable[loss.0] = self.nodes[loss.0].requires_grad;
        for i in (0..n).rev() {
            if reachable[i] {
                stats.reachable += 1;
                for v in self.inputs(&self.nodes[i].op) {
                    if self.nodes[v.0].requires_grad {
                        reachable[v.0] = true;
                    }
                }
            }
        }

        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            stats.visited += 1;
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            stats,
        })
    }

    /// `d loss / d p` for each `p`; unreachable parameters get zeros.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        let g = self.backward(loss)?;
        Ok(params.iter().map(|&p| g.get(p)).collect())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b, bc) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.wants(*a) {
                    let da: Vec<T> = g
                        .iter()
                        .enumerate()
                        .map(|(k, &gk)| match kind {
                            Binary::Add | Binary::Sub => gk,
                            Binary::Mul => gk * bv[bc.index(k)],
                            Binary::Div => gk / bv[bc.index(k)],
                        })
                        .collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for (k, &gk) in g.iter().enumerate() {
                        let j = bc.index(k);
                        let d = match kind {
                            Binary::Add => gk,
                            Binary::Sub => -gk,
                            Binary::Mul => gk * av[k],
                            Binary::Div => -gk * av[k] / (bv[j] * bv[j]),
                        };
                        db[j] = db[j] + d;
                    }
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Unary(kind, x) => {
                if self.wants(*x) {
                    let xv = self.value(*x).data();
                    let dx = g
                        .iter()
                        .zip(xv)
                        .zip(y)
                        .map(|((&gk, &xk), &yk)| match kind {
                            Unary::Sigmoid => gk * yk * (T::one() - yk),
                            Unary::Relu => {
                                if xk > T::zero() {
                                    gk
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Exp => gk * yk,
                            Unary::Log => gk / xk,
                            Unary::Square => gk * (xk + xk),
                            Unary::Sqrt => {
                                if yk > T::zero() {
                                    gk / (yk + yk)
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::LogSigmoid => gk * sigmoid(-xk),
                        })
                        .collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::FaultyIdentity(x, c) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Offset(x) | Op::Reshape(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.to_vec());
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b).data(),
                        1,
                        n as isize,
                        T::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(*a).data(),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        T::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2()?;
                    // g is [n, m]
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..n {
                        for c in 0..m {
                            dx[c * n + r] = g[r * m + c];
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let size = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut dx = Vec::with_capacity(outer * size * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            dx.extend_from_slice(&g[base..base + size * inner]);
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    offset += size;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let shape = self.shape(*x);
                    let (outer, size, inner) = split_axis(shape, *axis);
                    let len = node.value.shape()[*axis];
                    let mut dx = vec![T::zero(); outer * size * inner];
                    for o in 0..outer {
                        let dst = o * size * inner + start * inner;
                        let src = o * len * inner;
                        dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Gather { table, idx } => {
                if self.wants(*table) {
                    let (v, d) = self.value(*table).dims2()?;
                    let mut dt = vec![T::zero(); v * d];
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..d {
                            dt[src * d + c] = dt[src * d + c] + g[r * d + c];
                        }
                    }
                    add_into(&mut grads[table.0], dt);
                }
            }
            Op::Sum(x) => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], vec![g[0]; self.value(*x).len()]);
                }
            }
            Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    let v = g[0] / T::of_f64(len as f64);
                    add_into(&mut grads[x.0], vec![v; len]);
                }
            }
            Op::SumCols(x) => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2()?;
                    let dx = (0..m * n).map(|k| g[k / n]).collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::MeanRows(x) => {
                if self.wants(*x) {
                    let (m, n) = self.value(*x).dims2()?;
                    let inv = T::one() / T::of_f64(m as f64);
                    let dx = (0..m * n).map(|k| g[k % n] * inv).collect();
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let (m, n) = node.value.dims2()?;
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..n {
                            dx[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2()?;
                let gm = self.value(*gamma).data();
                if self.wants(*x) {
                    let nf = T::of_f64(n as f64);
                    let mut dx = vec![T::zero(); m * n];
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[c];
                        }
                        s1 = s1 / nf;
                        s2 = s2 / nf;
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            dx[r * n + c] = rstd[r] * (dh - s1 - hr[c] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*gamma) {
                    let mut dg = vec![T::zero(); n];
                    for k in 0..m * n {
                        dg[k % n] = dg[k % n] + g[k] * xhat[k];
                    }
                    add_into(&mut grads[gamma.0], dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::zero(); n];
                    for k in 0..m * n {
                        db[k % n] = db[k % n] + g[k];
                    }
                    add_into(&mut grads[beta.0], db);
                }
            }
            Op::CausalConv { x, w } => {
                let (t_len, d) = node.value.dims2()?;
                let (k, wd) = self.value(*w).dims2()?;
                let xs = self.value(*x).data();
                let ws = self.value(*w).data();
                let widx = |i: usize, c: usize| if wd == 1 { i } else { i * d + c };
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); t_len * d];
                    for t in 0..t_len {
                        for i in 0..k.min(t + 1) {
                            for c in 0..d {
                                let s = (t - i) * d + c;
                                dx[s] = dx[s] + ws[widx(i, c)] * g[t * d + c];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * wd];
                    for t in 0..t_len {
                        for i in 0..k.min(t + 1) {
                            for c in 0..d {
                                let j = widx(i, c);
                                dw[j] = dw[j] + g[t * d + c] * xs[(t - i) * d + c];
                            }
                        }
                    }
                    add_into(&mut grads[w.0], dw);
                }
            }
            Op::Maximum(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let pick_a: Vec<bool> = av.iter().zip(bv).map(|(x, y)| x >= y).collect();
                if self.wants(*a) {
                    let da = g
                        .iter()
                        .zip(&pick_a)
                        .map(|(&v, &p)| if p { v } else { T::zero() })
                        .collect();
                    add_into(&mut grads[a.0], da);
                }
                if self.wants(*b) {
                    let db = g
                        .iter()
                        .zip(&pick_a)
                        .map(|(&v, &p)| if p { T::zero() } else { v })
                        .collect();
                    add_into(&mut grads[b.0], db);
                }
            }
            Op::PairwiseSqDist(x) => {
                if self.wants(*x) {
                    let (n, d) = self.value(*x).dims2()?;
                    let xs = self.value(*x).data();
                    let mut dx = vec![T::zero(); n * d];
                    let two = T::of_f64(2.0);
                    for i in 0..n {
                        for j in (i + 1)..n {
                            let coeff = two * (g[i * n + j] + g[j * n + i]);
                            if coeff == T::zero() {
                                continue;
                            }
                            for c in 0..d {
                                let diff = coeff * (xs[i * d + c] - xs[j * d + c]);
                                dx[i * d + c] = dx[i * d + c] + diff;
                                dx[j * d + c] = dx[j * d + c] - diff;
                            }
                        }
                    }
                    add_into(&mut grads[x.0], dx);
                }
            }
        }
        Ok(())
    }
}
