//! Dense row-major tensors and a reverse-mode differentiation tape.
//!
//! Every operation is recorded on a [`Tape`] and addressed through a [`Var`]
//! handle. Values live on the tape; [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid topological order because a node
//! can only reference nodes recorded before it.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating point element type. `f32` is used for training, `f64` for
/// gradient checking.
pub trait Real:
    Float + FromPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_span(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                check_span(a.0.len(), m, k, a.1, a.2);
                check_span(b.0.len(), k, n, b.1, b.2);
                check_span(c.0.len(), m, n, c.1, c.2);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: all three operands were bounds-checked against their
                // slices above; `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Shaped, row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::from_fn(shape, |_| T::zero())
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::from_fn(shape, |_| T::one())
    }

    pub fn scalar(x: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
        }
    }

    /// Builds a 2-d tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Element `(i, j)` of a 2-d tensor.
    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.shape[1] + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.shape[self.shape.len() - 1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[self.shape.len() - 1]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.cols()).map(<[T]>::to_vec).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(self.data[i * c + j]);
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &rhs.shape));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            (&self.data, k as isize, 1),
            (&rhs.data, n as isize, 1),
            T::zero(),
            (&mut out, n as isize, 1),
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::InvalidArgument(format!(
                "{op} expects a 2-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numerically stable softmax along `axis`. `mask[i] == false` removes a
/// position; it receives exactly zero weight.
pub fn softmax_values<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    mask: Option<&[bool]>,
) -> Result<Tensor<T>> {
    let (outer, n, inner) = axis_split(&x.shape, axis)?;
    if let Some(m) = mask {
        if m.len() != x.numel() {
            return Err(Error::shape("softmax mask", &x.shape, &[m.len()]));
        }
    }
    let allowed = |idx: usize| mask.is_none_or(|m| m[idx]);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * n + k) * inner + i;
            let mut max = T::neg_infinity();
            for k in 0..n {
                if allowed(at(k)) && x.data[at(k)] > max {
                    max = x.data[at(k)];
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::FullyMasked { row: o * inner + i });
            }
            let mut total = T::zero();
            for k in 0..n {
                if allowed(at(k)) {
                    let e = (x.data[at(k)] - max).exp();
                    out[at(k)] = e;
                    total = total + e;
                }
            }
            for k in 0..n {
                out[at(k)] = out[at(k)] / total;
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { src: usize, axis: usize, start: usize },
    Sum(usize),
    Mean(usize),
    Sqrt(usize),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Softmax { src: usize, axis: usize },
    LayerNorm { src: usize, inv_std: Vec<T> },
    Dropout { src: usize, mask: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is a single-threaded unit of work. It is `Send`, so independent
/// tapes can be built on different threads.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::StaleTape);
        }
        Ok(v.index)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Smallest `|x|` over every ReLU input recorded so far, or `None` when the
    /// tape has no ReLU.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(src) => Some(&self.nodes[src].value),
                _ => None,
            })
            .flat_map(|v| v.data().iter().map(|x| x.as_f64().abs()))
            .reduce(f64::min)
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        Ok(self.push(Op::MatMul(ia, ib), out))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape != vb.shape {
            return Err(Error::shape(op, &va.shape, &vb.shape));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((
            ia,
            ib,
            Tensor {
                shape: va.shape.clone(),
                data,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(Op::Add(ia, ib), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(Op::Sub(ia, ib), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, out) = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul(ia, ib), out))
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(row)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let n = va.cols();
        if vb.numel() != n || vb.rank() != 1 {
            return Err(Error::shape(op, &va.shape, &vb.shape));
        }
        let data = va
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data[i % n]))
            .collect();
        Ok((
            ia,
            ib,
            Tensor {
                shape: va.shape.clone(),
                data,
            },
        ))
    }

    /// Adds a `[n]` vector to every row of `a` (last axis of length `n`).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib, out) = self.row_broadcast(a, bias, "add_row", |x, y| x + y)?;
        Ok(self.push(Op::AddRow(ia, ib), out))
    }

    /// Multiplies every row of `a` elementwise by a `[n]` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (ia, ib, out) = self.row_broadcast(a, gain, "mul_row", |x, y| x * y)?;
        Ok(self.push(Op::MulRow(ia, ib), out))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map_value(ia, |x| x * k);
        Ok(self.push(Op::Scale(ia, k), out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.transpose()?;
        Ok(self.push(Op::Transpose(ia), out))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let ids = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let base = self.nodes[self.idx(first)?].value.shape.clone();
        axis_split(&base, axis)?;
        let mut total = 0;
        for &i in &ids {
            let s = &self.nodes[i].value.shape;
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &ids {
                let v = &self.nodes[i].value;
                let chunk = v.shape[axis] * inner;
                data.extend_from_slice(&v.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(Op::Concat { parts: ids, axis }, Tensor { shape, data }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let (outer, n, inner) = axis_split(&v.shape, axis)?;
        if len == 0 || start + len > n {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) out of range for axis {axis} of {:?}",
                start + len,
                v.shape
            )));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            data.extend_from_slice(&v.data[from..from + len * inner]);
        }
        let mut shape = v.shape.clone();
        shape[axis] = len;
        Ok(self.push(
            Op::Slice {
                src: ia,
                axis,
                start,
            },
            Tensor { shape, data },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data.iter().copied().sum();
        Ok(self.push(Op::Sum(ia), Tensor::scalar(s)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let s: T = v.data.iter().copied().sum();
        let m = s / T::lit(v.numel() as f64);
        Ok(self.push(Op::Mean(ia), Tensor::scalar(m)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.data.iter().any(|&x| x < T::zero()) {
            return Err(Error::NonFinite("sqrt of a negative value".into()));
        }
        let out = self.map_value(ia, Float::sqrt);
        Ok(self.push(Op::Sqrt(ia), out))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map_value(ia, Float::tanh);
        Ok(self.push(Op::Tanh(ia), out))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map_value(ia, sigmoid);
        Ok(self.push(Op::Sigmoid(ia), out))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.map_value(ia, |x| x.max(T::zero()));
        Ok(self.push(Op::Relu(ia), out))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.masked_softmax(a, axis, None)
    }

    /// Softmax where `mask[i] == false` positions get exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = softmax_values(&self.nodes[ia].value, axis, mask)?;
        Ok(self.push(Op::Softmax { src: ia, axis }, out))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance. The
    /// affine part of layer normalization is applied separately.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = &self.nodes[ia].value;
        let n = v.cols();
        let nf = T::lit(n as f64);
        let mut data = Vec::with_capacity(v.numel());
        let mut inv_std = Vec::with_capacity(v.numel() / n);
        for row in v.data.chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            inv_std.push(r);
            data.extend(row.iter().map(|&x| (x - mean) * r));
        }
        let shape = v.shape.clone();
        Ok(self.push(Op::LayerNorm { src: ia, inv_std }, Tensor { shape, data }))
    }

    /// Inverted dropout. Identity when `training` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1)")));
        }
        let ia = self.idx(a)?;
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let v = &self.nodes[ia].value;
        let mask: Vec<T> = (0..v.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let data = v.data.iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = v.shape.clone();
        Ok(self.push(Op::Dropout { src: ia, mask }, Tensor { shape, data }))
    }

    fn map_value(&self, i: usize, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = &self.nodes[i].value;
        Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let r = self.idx(root)?;
        let root_value = &self.nodes[r].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(r + 1);
        grads.resize_with(r + 1, || None);
        grads[r] = Some(vec![T::one()]);

        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let shapes = self.nodes[..=r].iter().map(|n| n.value.shape.clone()).collect();
        Ok(Gradients {
            tape: self.id,
            shapes,
            grads,
        })
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (va.shape[0], va.shape[1], vb.shape[1]);
                let (ki, ni) = (k as isize, n as isize);
                // dA = dC * B^T
                let ga = slot(grads, a, m * k);
                T::gemm(m, n, k, T::one(), (g, ni, 1), (&vb.data, 1, ni), T::one(), (ga, ki, 1));
                // dB = A^T * dC
                let gb = slot(grads, b, k * n);
                T::gemm(k, m, n, T::one(), (&va.data, 1, ki), (g, ni, 1), T::one(), (gb, ni, 1));
            }
            &Op::Add(a, b) => {
                accumulate(slot(grads, a, g.len()), g.iter().copied());
                accumulate(slot(grads, b, g.len()), g.iter().copied());
            }
            &Op::Sub(a, b) => {
                accumulate(slot(grads, a, g.len()), g.iter().copied());
                accumulate(slot(grads, b, g.len()), g.iter().map(|&x| -x));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value.data, &self.nodes[b].value.data);
                accumulate(slot(grads, a, g.len()), g.iter().zip(vb).map(|(&d, &x)| d * x));
                accumulate(slot(grads, b, g.len()), g.iter().zip(va).map(|(&d, &x)| d * x));
            }
            &Op::AddRow(a, b) => {
                accumulate(slot(grads, a, g.len()), g.iter().copied());
                let n = self.nodes[b].value.numel();
                let gb = slot(grads, b, n);
                for row in g.chunks(n) {
                    accumulate(gb, row.iter().copied());
                }
            }
            &Op::MulRow(a, b) => {
                let vb = &self.nodes[b].value.data;
                let va = &self.nodes[a].value.data;
                let n = vb.len();
                accumulate(
                    slot(grads, a, g.len()),
                    g.iter().enumerate().map(|(j, &d)| d * vb[j % n]),
                );
                let gb = slot(grads, b, n);
                for (j, (&d, &x)) in g.iter().zip(va).enumerate() {
                    gb[j % n] = gb[j % n] + d * x;
                }
            }
            &Op::Scale(a, k) => {
                accumulate(slot(grads, a, g.len()), g.iter().map(|&d| d * k));
            }
            &Op::Transpose(a) => {
                let (r, c) = (y.shape[0], y.shape[1]);
                // y is [r, c]; the source is [c, r].
                let ga = slot(grads, a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = ga[j * r + i] + g[i * c + j];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let outer: usize = y.shape[..axis].iter().product();
                let inner: usize = y.shape[axis + 1..].iter().product();
                let row = y.shape[axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.nodes[p].value.shape[axis] * inner;
                    let gp = slot(grads, p, outer * chunk);
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + chunk];
                        accumulate(&mut gp[o * chunk..(o + 1) * chunk], src.iter().copied());
                    }
                    offset += chunk;
                }
            }
            &Op::Slice { src, axis, start } => {
                let shape = &self.nodes[src].value.shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let n = shape[axis];
                let len = y.shape[axis];
                let gs = slot(grads, src, outer * n * inner);
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    let from = o * len * inner;
                    accumulate(&mut gs[to..to + len * inner], g[from..from + len * inner].iter().copied());
                }
            }
            &Op::Sum(a) => {
                let n = self.nodes[a].value.numel();
                accumulate(slot(grads, a, n), std::iter::repeat_n(g[0], n));
            }
            &Op::Mean(a) => {
                let n = self.nodes[a].value.numel();
                let d = g[0] / T::lit(n as f64);
                accumulate(slot(grads, a, n), std::iter::repeat_n(d, n));
            }
            &Op::Sqrt(a) => {
                let two = T::lit(2.0);
                accumulate(
                    slot(grads, a, g.len()),
                    g.iter().zip(&y.data).map(|(&d, &s)| d / (two * s)),
                );
            }
            &Op::Tanh(a) => {
                accumulate(
                    slot(grads, a, g.len()),
                    g.iter().zip(&y.data).map(|(&d, &t)| d * (T::one() - t * t)),
                );
            }
            &Op::Sigmoid(a) => {
                accumulate(
                    slot(grads, a, g.len()),
                    g.iter().zip(&y.data).map(|(&d, &s)| d * s * (T::one() - s)),
                );
            }
            &Op::Relu(a) => {
                let x = &self.nodes[a].value.data;
                accumulate(
                    slot(grads, a, g.len()),
                    g.iter().zip(x).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }),
                );
            }
            &Op::Softmax { src, axis } => {
                let (outer, n, inner) = axis_split(&y.shape, axis).expect("validated in forward");
                let gs = slot(grads, src, y.numel());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| y.data[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            let j = at(k);
                            gs[j] = gs[j] + y.data[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let n = y.cols();
                let nf = T::lit(n as f64);
                let gs = slot(grads, *src, y.numel());
                for (r, &inv) in inv_std.iter().enumerate() {
                    let yr = &y.data[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let mean_g = gr.iter().copied().sum::<T>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        let d = inv * (gr[j] - mean_g - yr[j] * mean_gy);
                        gs[r * n + j] = gs[r * n + j] + d;
                    }
                }
            }
            Op::Dropout { src, mask } => {
                accumulate(
                    slot(grads, *src, g.len()),
                    g.iter().zip(mask).map(|(&d, &m)| d * m),
                );
            }
        }
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

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, n: usize) -> &mut [T] {
    grads[i].get_or_insert_with(|| vec![T::zero(); n])
}

fn accumulate<T: Real>(dst: &mut [T], src: impl Iterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients of a backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the root w.r.t. `v`; zeros when `v` does not influence it.
    pub fn get(&self, v: Var) -> Result<Tensor<T>> {
        if v.tape != self.tape {
            return Err(Error::StaleTape);
        }
        if v.index >= self.shapes.len() {
            // Recorded after the root: cannot influence it.
            return Err(Error::InvalidArgument(
                "variable was recorded after the backward root".into(),
            ));
        }
        let shape = self.shapes[v.index].clone();
        Ok(match &self.grads[v.index] {
            Some(g) => Tensor {
                shape,
                data: g.clone(),
            },
            None => Tensor::zeros(shape),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a), tape.leaf(b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_known_values() {
        let x = t(&[1, 3], &[0.0, 1.0, 2.0]);
        let s = softmax_values(&x, 1, None).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn sum_of_square_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[1], &[3.0]));
        let sq = tape.mul(w, w).unwrap();
        let root = tape.sum(sq).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_unused_leaf_is_zero() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2, 3], &[1.0, -2.0, 0.5, 4.0, 0.0, 9.0]));
        let unused = tape.leaf(t(&[2], &[1.0, 1.0]));
        let root = tape.sum(w).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[1.0; 6]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn stale_var_is_rejected() {
        let mut first = Tape::<f64>::new();
        let v = first.leaf(t(&[1], &[1.0]));
        let mut second = Tape::<f64>::new();
        let w = second.leaf(t(&[1], &[1.0]));
        assert!(matches!(second.add(v, w), Err(Error::StaleTape)));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_and_rejects_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let mask = [true, false, true, true];
        let s = tape.masked_softmax(x, 1, Some(&mask)).unwrap();
        let v = tape.value(s);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(0, 0), 1.0);
        let dead = [false, false, true, true];
        assert!(matches!(
            tape.masked_softmax(x, 1, Some(&dead)),
            Err(Error::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn dropout_is_identity_in_eval_and_inverted_in_training() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::ones(vec![50, 4]));
        let e = tape.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(tape.value(e).data(), tape.value(x).data());
        let d = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn reused_tensor_accumulates_gradient() {
        // y = sum(x * x + x) → dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let root = tape.sum(s).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(
            rows in 1usize..6, cols in 1usize..6,
            vals in prop::collection::vec(-20.0f64..20.0, 36),
        ) {
            let x = Tensor::from_fn(vec![rows, cols], |i| vals[i]);
            let s = softmax_values(&x, 1, None).unwrap();
            for r in 0..rows {
                let row = s.row(r);
                prop_assert!(row.iter().all(|&p| p >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn concat_then_slice_is_identity(
            r1 in 1usize..5, r2 in 1usize..5, cols in 1usize..5, axis in 0usize..2, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (sa, sb) = if axis == 0 {
                (vec![r1, cols], vec![r2, cols])
            } else {
                (vec![cols, r1], vec![cols, r2])
            };
            let a = Tensor::from_fn(sa, |_| rng.random::<f64>());
            let b = Tensor::from_fn(sb, |_| rng.random::<f64>());
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let c = tape.concat(&[va, vb], axis).unwrap();
            let left = tape.slice(c, axis, 0, r1).unwrap();
            let right = tape.slice(c, axis, r1, r2).unwrap();
            prop_assert_eq!(tape.value(left), &a);
            prop_assert_eq!(tape.value(right), &b);
        }

        #[test]
        fn transpose_twice_is_identity(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::from_fn(vec![rows, cols], |_| rng.random());
            prop_assert_eq!(a.transpose().unwrap().transpose().unwrap(), a);
        }
    }
}
