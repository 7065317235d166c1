use super::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    L1,
    SquaredL2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    All,
    Dim(usize),
}

/// How the second operand of a binary op lines up with the first.
#[derive(Debug, Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs repeated over the leading dimensions of lhs
    Rhs,
    /// lhs repeated over the leading dimensions of rhs
    Lhs,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Div(Var, Var, Broadcast),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    MatMul(Var, Var),
    Transpose(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Reduce(Var, ReduceKind, Axis),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// saved per-row inverse standard deviation
    LayerNorm(Var, Vec<T>),
    Fourier(Var, usize),
    View(Var, usize),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of executed operations. Nodes are only ever appended, so
/// every op's inputs precede it and the reverse pass is a reverse scan.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    let suffix = |small: &[usize], big: &[usize]| {
        small.len() < big.len() && big[big.len() - small.len()..] == *small
    };
    if a == b {
        Ok(Broadcast::Same)
    } else if suffix(b, a) {
        Ok(Broadcast::Rhs)
    } else if suffix(a, b) {
        Ok(Broadcast::Lhs)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn matmul_raw<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw<T: Real>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Subgradient of `|x|`, zero at the kink.
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn reduce_dims(shape: &[usize], axis: Axis) -> Result<(usize, usize, usize, Vec<usize>)> {
    match axis {
        Axis::All => Ok((1, shape.iter().product(), 1, Vec::new())),
        Axis::Dim(d) if d < shape.len() => {
            let outer = shape[..d].iter().product();
            let inner = shape[d + 1..].iter().product();
            let mut out = shape.to_vec();
            out.remove(d);
            Ok((outer, shape[d], inner, out))
        }
        Axis::Dim(d) => Err(TensorError::InvalidAxis {
            axis: d,
            shape: shape.to_vec(),
        }),
    }
}

/// Sin/cos features of each coordinate at octave frequencies `2^k * pi`.
/// Input `m x d`, output `m x (2 * d * freqs)`; per coordinate the sin
/// block precedes the cos block.
pub(crate) fn fourier_features<T: Real>(x: &[T], m: usize, d: usize, freqs: usize) -> Vec<T> {
    let width = 2 * d * freqs;
    let mut out = vec![T::zero(); m * width];
    for i in 0..m {
        for c in 0..d {
            let v = x[i * d + c];
            for k in 0..freqs {
                let w = T::lit(std::f64::consts::PI * (1u64 << k) as f64);
                let base = i * width + c * 2 * freqs;
                out[base + k] = (w * v).sin();
                out[base + freqs + k] = (w * v).cos();
            }
        }
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Leaf treated as a fixed input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        // Ops over constants only become constants themselves.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(Tensor { shape, data }, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(Var, Var, Broadcast) -> Op<T>,
    ) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let bc = broadcast(name, av.shape(), bv.shape())?;
        let (shape, data) = match bc {
            Broadcast::Same => (
                av.shape().to_vec(),
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::Rhs => {
                let m = bv.numel();
                (
                    av.shape().to_vec(),
                    av.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, bv.data()[i % m]))
                        .collect(),
                )
            }
            Broadcast::Lhs => {
                let m = av.numel();
                (
                    bv.shape().to_vec(),
                    bv.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(av.data()[i % m], y))
                        .collect(),
                )
            }
        };
        Ok(self.push(shape, data, make(a, b, bc), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let shape = t.shape.clone();
        self.push(shape, t.data, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.push(vec![m, n], data, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2()?;
        let data = transpose_raw(av.data(), m, n);
        Ok(self.push(vec![n, m], data, Op::Transpose(a), &[a]))
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if !av.is_finite() {
            return Err(TensorError::NonFinite("row_softmax"));
        }
        let (m, n) = av.dims2()?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let mut total = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            for x in row.iter_mut() {
                *x = *x / total;
            }
        }
        Ok(self.push(vec![m, n], data, Op::RowSoftmax(a), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        if !av.is_finite() {
            return Err(TensorError::NonFinite("log_softmax"));
        }
        let (m, n) = av.dims2()?;
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n.max(1)).take(m) {
            let max = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        Ok(self.push(vec![m, n], data, Op::LogSoftmax(a), &[a]))
    }

    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: Axis) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (outer, len, inner, out_shape) = reduce_dims(av.shape(), axis)?;
        if kind == ReduceKind::Mean && len == 0 {
            return Err(TensorError::EmptyReduction);
        }
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let x = av.data()[(o * len + k) * inner + i];
                    out[o * inner + i] += match kind {
                        ReduceKind::Sum | ReduceKind::Mean => x,
                        ReduceKind::L1 => x.abs(),
                        ReduceKind::SquaredL2 => x * x,
                    };
                }
            }
        }
        if kind == ReduceKind::Mean {
            let n = T::lit(len as f64);
            out.iter_mut().for_each(|x| *x = *x / n);
        }
        Ok(self.push(out_shape, out, Op::Reduce(a, kind, axis), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.reduce(ReduceKind::Sum, a, Axis::All)
            .expect("full sum is always valid")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, a, Axis::All)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2()?;
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(TensorError::IndexOutOfRange { index: r, len: m });
            }
            data.extend_from_slice(&av.data()[r * n..(r + 1) * n]);
        }
        Ok(self.push(
            vec![rows.len(), n],
            data,
            Op::GatherRows(a, rows.to_vec()),
            &[a],
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2()?;
        if start + len > n {
            return Err(TensorError::IndexOutOfRange {
                index: start + len,
                len: n,
            });
        }
        let data = (0..m)
            .flat_map(|i| av.data()[i * n + start..i * n + start + len].iter().copied())
            .collect();
        Ok(self.push(vec![m, len], data, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => self.nodes[p.0].value.dims2()?.0,
            None => return Err(TensorError::Invalid("concat of nothing".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.nodes[p.0].value.dims2()?;
            if r != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![r],
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![m, total], data, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Normalizes every row to zero mean and unit variance. Affine scale
    /// and shift are left to the caller.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, n) = av.dims2()?;
        let nf = T::lit(n as f64);
        let mut data = av.data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in data.chunks_mut(n.max(1)).take(m) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        Ok(self.push(vec![m, n], data, Op::LayerNorm(a, inv_std), &[a]))
    }

    /// Fourier positional features, see [`fourier_features`].
    pub fn fourier(&mut self, a: Var, freqs: usize) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let (m, d) = av.dims2()?;
        let data = fourier_features(av.data(), m, d, freqs);
        Ok(self.push(vec![m, 2 * d * freqs], data, Op::Fourier(a, freqs), &[a]))
    }

    /// Contiguous run of `a`'s flat values starting at `offset`, reshaped.
    pub fn view(&mut self, a: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if offset + n > av.numel() {
            return Err(TensorError::IndexOutOfRange {
                index: offset + n,
                len: av.numel(),
            });
        }
        let data = av.data()[offset..offset + n].to_vec();
        Ok(self.push(shape.to_vec(), data, Op::View(a, offset), &[a]))
    }

    /// Accumulates gradients of the scalar `output` with respect to every
    /// node that requires them.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        let out = &self.nodes[output.0].value;
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(vec![T::one()]);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        repeated: bool,
        g: &[T],
        scale: impl Fn(usize) -> T,
    ) {
        self.accumulate(grads, v, |slot| {
            let m = slot.len();
            if repeated {
                for (i, &gi) in g.iter().enumerate() {
                    slot[i % m] += gi * scale(i);
                }
            } else {
                for (i, (s, &gi)) in slot.iter_mut().zip(g).enumerate() {
                    *s += gi * scale(i);
                }
            }
        });
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let val = |v: Var| self.nodes[v.0].value.data();
        let at = |v: Var, i: usize| {
            let d = self.nodes[v.0].value.data();
            d[i % d.len()]
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b, bc) => {
                self.accumulate_broadcast(grads, a, matches!(bc, Broadcast::Lhs), g, |_| T::one());
                self.accumulate_broadcast(grads, b, matches!(bc, Broadcast::Rhs), g, |_| T::one());
            }
            &Op::Sub(a, b, bc) => {
                self.accumulate_broadcast(grads, a, matches!(bc, Broadcast::Lhs), g, |_| T::one());
                self.accumulate_broadcast(grads, b, matches!(bc, Broadcast::Rhs), g, |_| -T::one());
            }
            &Op::Mul(a, b, bc) => {
                self.accumulate_broadcast(grads, a, matches!(bc, Broadcast::Lhs), g, |i| at(b, i));
                self.accumulate_broadcast(grads, b, matches!(bc, Broadcast::Rhs), g, |i| at(a, i));
            }
            &Op::Div(a, b, bc) => {
                self.accumulate_broadcast(grads, a, matches!(bc, Broadcast::Lhs), g, |i| {
                    T::one() / at(b, i)
                });
                self.accumulate_broadcast(grads, b, matches!(bc, Broadcast::Rhs), g, |i| {
                    let d = at(b, i);
                    -at(a, i) / (d * d)
                });
            }
            &Op::Scale(a, c) => self.accumulate_broadcast(grads, a, false, g, |_| c),
            &Op::AddScalar(a) => self.accumulate_broadcast(grads, a, false, g, |_| T::one()),
            &Op::Relu(a) => self.accumulate_broadcast(grads, a, false, g, |i| {
                if val(a)[i] > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }),
            &Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate_broadcast(grads, a, false, g, |i| y[i] * (T::one() - y[i]));
            }
            &Op::Softplus(a) => {
                self.accumulate_broadcast(grads, a, false, g, |i| sigmoid(val(a)[i]));
            }
            &Op::Abs(a) => self.accumulate_broadcast(grads, a, false, g, |i| sign(val(a)[i])),
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.nodes[a.0].requires_grad {
                    // dA = G * B^T
                    let bt = transpose_raw(val(b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(grads, a, |s| s.iter_mut().zip(&da).for_each(|(s, &d)| *s += d));
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T * G
                    let at_ = transpose_raw(val(a), m, k);
                    let db = matmul_raw(&at_, g, k, m, n);
                    self.accumulate(grads, b, |s| s.iter_mut().zip(&db).for_each(|(s, &d)| *s += d));
                }
            }
            &Op::Transpose(a) => {
                let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                let ga = transpose_raw(g, n, m);
                self.accumulate(grads, a, |s| s.iter_mut().zip(&ga).for_each(|(s, &d)| *s += d));
            }
            &Op::RowSoftmax(a) => {
                let y = node.value.data();
                let n = node.value.shape()[1].max(1);
                self.accumulate(grads, a, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: T = yrow.iter().zip(grow).map(|(&y, &g)| y * g).sum();
                        for ((s, &y), &g) in srow.iter_mut().zip(yrow).zip(grow) {
                            *s += y * (g - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let y = node.value.data();
                let n = node.value.shape()[1].max(1);
                self.accumulate(grads, a, |s| {
                    for ((srow, yrow), grow) in s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let total: T = grow.iter().copied().sum();
                        for ((s, &y), &g) in srow.iter_mut().zip(yrow).zip(grow) {
                            *s += g - y.exp() * total;
                        }
                    }
                });
            }
            &Op::Reduce(a, kind, axis) => {
                let shape = self.shape(a).to_vec();
                let (outer, len, inner, _) = reduce_dims(&shape, axis).expect("validated in forward");
                let x = val(a);
                let mean_scale = T::one() / T::lit(len.max(1) as f64);
                self.accumulate(grads, a, |s| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                let j = (o * len + k) * inner + i;
                                let go = g[o * inner + i];
                                s[j] += go * match kind {
                                    ReduceKind::Sum => T::one(),
                                    ReduceKind::Mean => mean_scale,
                                    ReduceKind::L1 => sign(x[j]),
                                    ReduceKind::SquaredL2 => x[j] + x[j],
                                };
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let a = *a;
                let n = self.shape(a)[1];
                self.accumulate(grads, a, |s| {
                    for (r, grow) in rows.iter().zip(g.chunks(n.max(1))) {
                        for (s, &gv) in s[r * n..(r + 1) * n].iter_mut().zip(grow) {
                            *s += gv;
                        }
                    }
                });
            }
            &Op::SliceCols(a, start) => {
                let n = self.shape(a)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, a, |s| {
                    for (i, grow) in g.chunks(len.max(1)).enumerate() {
                        for (c, &gv) in grow.iter().enumerate() {
                            s[i * n + start + c] += gv;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.accumulate(grads, p, |s| {
                        for (i, srow) in s.chunks_mut(w.max(1)).enumerate() {
                            for (c, sv) in srow.iter_mut().enumerate() {
                                *sv += g[i * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::LayerNorm(a, inv_std) => {
                let a = *a;
                let y = node.value.data();
                let n = node.value.shape()[1].max(1);
                let nf = T::lit(n as f64);
                self.accumulate(grads, a, |s| {
                    for (r, ((srow, yrow), grow)) in
                        s.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)).enumerate()
                    {
                        let gm = grow.iter().copied().sum::<T>() / nf;
                        let gy = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum::<T>() / nf;
                        for ((s, &y), &g) in srow.iter_mut().zip(yrow).zip(grow) {
                            *s += inv_std[r] * (g - gm - y * gy);
                        }
                    }
                });
            }
            &Op::View(a, offset) => {
                self.accumulate(grads, a, |s| {
                    s[offset..offset + g.len()].iter_mut().zip(g).for_each(|(s, &d)| *s += d)
                });
            }
            &Op::Fourier(a, freqs) => {
                let d = self.shape(a)[1];
                let width = node.value.shape()[1];
                let y = node.value.data();
                self.accumulate(grads, a, |s| {
                    for (i, sv) in s.iter_mut().enumerate() {
                        let (row, c) = (i / d, i % d);
                        let base = row * width + c * 2 * freqs;
                        for k in 0..freqs {
                            let w = T::lit(std::f64::consts::PI * (1u64 << k) as f64);
                            // d sin(wx) = w cos(wx), d cos(wx) = -w sin(wx)
                            *sv += w * (g[base + k] * y[base + freqs + k] - g[base + freqs + k] * y[base + k]);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sigmoid_and_relu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = tape.sigmoid(x);
        let r = tape.relu(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn add_backward_is_ones() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn non_broadcastable_shapes_are_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.0; 6]));
        let b = tape.constant(t(&[2], &[0.0; 2]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![2]
            }
        );
    }

    #[test]
    fn leading_dim_broadcast_sums_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bias = tape.param(t(&[2], &[10.0, 20.0]));
        let c = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(bias).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let c = tape.constant(t(&[2, 1], &[2.0, 5.0]));
        let p = tape.matmul(r, c).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);

        assert!(matches!(
            tape.matmul(r, r),
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn softmax_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 3], &[0.0, 0.0, 0.0, 1000.0, 0.0, -1000.0]));
        let s = tape.row_softmax(x).unwrap();
        let v = tape.value(s).data();
        for &p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(v[3], 1.0);
        assert!(v[4] < 1e-300 && v[4] >= 0.0);

        let bad = tape.constant(t(&[1, 2], &[f64::NAN, 0.0]));
        assert_eq!(tape.row_softmax(bad), Err(TensorError::NonFinite("row_softmax")));
    }

    #[test]
    fn reductions() {
        let mut tape = Tape::new();
        let v = tape.constant(t(&[3], &[1.0, -2.0, 3.0]));
        let l1 = tape.reduce(ReduceKind::L1, v, Axis::All).unwrap();
        assert_eq!(tape.value(l1).item().unwrap(), 6.0);
        let w = tape.constant(t(&[2], &[3.0, 4.0]));
        let l2 = tape.reduce(ReduceKind::SquaredL2, w, Axis::All).unwrap();
        assert_eq!(tape.value(l2).item().unwrap(), 25.0);
        let m = tape.constant(t(&[2, 2], &[2.0, 4.0, 6.0, 8.0]));
        let mean = tape.mean(m).unwrap();
        assert_eq!(tape.value(mean).item().unwrap(), 5.0);
        let cols = tape.reduce(ReduceKind::Sum, m, Axis::Dim(0)).unwrap();
        assert_eq!(tape.value(cols).data(), &[8.0, 12.0]);
        let rows = tape.reduce(ReduceKind::Mean, m, Axis::Dim(1)).unwrap();
        assert_eq!(tape.value(rows).data(), &[3.0, 7.0]);

        let empty = tape.constant(t(&[0, 2], &[]));
        assert_eq!(
            tape.reduce(ReduceKind::Mean, empty, Axis::All),
            Err(TensorError::EmptyReduction)
        );
        assert!(matches!(
            tape.reduce(ReduceKind::Sum, m, Axis::Dim(2)),
            Err(TensorError::InvalidAxis { axis: 2, .. })
        ));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(tape.backward(a).unwrap_err(), TensorError::NotScalar(vec![2]));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[5.0, 6.0]));
        let p = tape.mul(a, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[5.0, 6.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.constant(Tensor::from_f64(&[2, 3], &[0.3, -1.2, 2.5, 0.7, 0.1, -0.4]).unwrap());
            let b = tape.constant(Tensor::from_f64(&[3, 2], &[1.1, 0.2, -0.3, 0.9, 0.5, 0.5]).unwrap());
            let p = tape.matmul(a, b).unwrap();
            let s = tape.row_softmax(p).unwrap();
            tape.value(s).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
