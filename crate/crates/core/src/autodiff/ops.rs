use super::{numel, Op, Result, Tensor, TensorError};
use crate::Scalar;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// (rows, last-axis length) view of a tensor with rank >= 1.
pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    (if cols == 0 { 0 } else { numel(shape) / cols }, cols)
}

impl<T: Scalar> Tensor<T> {
    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect()
    }

    fn map(&self, f: impl Fn(T) -> T) -> Vec<T> {
        self.data().iter().map(|&x| f(x)).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), other.clone())))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), other.clone())))
    }

    /// Element-wise product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), other.clone())))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        same_shape("div", self, other)?;
        let data = self.zip_with(other, |a, b| a / b);
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Div(self.clone(), other.clone())))
    }

    pub fn add_scalar(&self, c: T) -> Self {
        Self::from_op(self.map(|x| x + c), self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, c: T) -> Self {
        Self::from_op(self.map(|x| x * c), self.shape().to_vec(), Op::MulScalar(self.clone(), c))
    }

    pub fn neg(&self) -> Self {
        self.mul_scalar(-T::one())
    }

    pub fn recip(&self) -> Self {
        Self::from_op(self.map(|x| T::one() / x), self.shape().to_vec(), Op::Recip(self.clone()))
    }

    pub fn exp(&self) -> Self {
        Self::from_op(self.map(T::exp), self.shape().to_vec(), Op::Exp(self.clone()))
    }

    pub fn log(&self) -> Self {
        Self::from_op(self.map(T::ln), self.shape().to_vec(), Op::Log(self.clone()))
    }

    pub fn sigmoid(&self) -> Self {
        let data = self.map(crate::privacy::sigmoid);
        Self::from_op(data, self.shape().to_vec(), Op::Sigmoid(self.clone()))
    }

    pub fn tanh(&self) -> Self {
        Self::from_op(self.map(T::tanh), self.shape().to_vec(), Op::Tanh(self.clone()))
    }

    pub fn relu(&self) -> Self {
        let data = self.map(|x| x.max(T::zero()));
        Self::from_op(data, self.shape().to_vec(), Op::Relu(self.clone()))
    }

    /// Clamp into `[lo, hi]`; the gradient passes only inside the interval.
    pub fn clamp(&self, lo: T, hi: T) -> Self {
        let data = self.map(|x| x.max(lo).min(hi));
        Self::from_op(data, self.shape().to_vec(), Op::Clamp(self.clone(), lo, hi))
    }

    /// `[..., m, k] @ [k, n] -> [..., m, n]`; leading axes are treated as rows.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.shape().len() < 2 || other.shape().len() != 2 {
            return Err(mismatch());
        }
        let (rows, k) = rows_cols(self.shape());
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(mismatch());
        }
        let mut data = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            self.data(),
            (k as isize, 1),
            other.data(),
            (n as isize, 1),
            T::zero(),
            &mut data,
            (n as isize, 1),
        );
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(Self::from_op(data, shape, Op::MatMul(self.clone(), other.clone())))
    }

    /// Batched product `[b, m, k] @ [b, k, n] -> [b, m, n]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (b, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![T::zero(); b * m * n];
        for i in 0..b {
            T::gemm(
                m,
                k,
                n,
                &self.data()[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &other.data()[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut data[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        Ok(Self::from_op(data, vec![b, m, n], Op::Bmm(self.clone(), other.clone())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(invalid("transpose", shape, "rank below 2"));
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let data = transpose_blocks(self.data(), batch, m, n);
        let mut out = shape.to_vec();
        out.swap(r - 2, r - 1);
        Ok(Self::from_op(data, out, Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", &[], "no inputs"))?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(invalid("concat", first.shape(), format!("axis {axis} out of range")));
        }
        for p in &parts[1..] {
            let ok = p.shape().len() == rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Self::from_op(data, shape, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                shape,
                format!("axis {axis} range {start}..{} out of bounds", start + len),
            ));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * extent * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut out = shape.to_vec();
        out[axis] = len;
        Ok(Self::from_op(data, out, Op::Slice(self.clone(), axis, start)))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Self> {
        if self.shape().is_empty() {
            return Err(invalid("softmax", self.shape(), "rank 0"));
        }
        let (rows, cols) = rows_cols(self.shape());
        let mut data = self.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut data[r * cols..(r + 1) * cols]);
        }
        Ok(Self::from_op(data, self.shape().to_vec(), Op::Softmax(self.clone())))
    }

    /// Zero-mean, unit-variance normalization over the last axis.
    pub fn layer_normalize(&self, eps: T) -> Result<Self> {
        if self.shape().is_empty() {
            return Err(invalid("layer_normalize", self.shape(), "rank 0"));
        }
        let (rows, cols) = rows_cols(self.shape());
        let n = T::of(cols as f64);
        let mut data = vec![T::zero(); self.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &self.data()[r * cols..(r + 1) * cols];
            let mean = x.iter().copied().sum::<T>() / n;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for (o, &v) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * s;
            }
            inv_std.push(s);
        }
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::LayerNorm(self.clone(), inv_std),
        ))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum::<T>();
        Self::from_op(vec![s], Vec::new(), Op::Sum(self.clone()))
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&self) -> Self {
        let s = self.data().iter().copied().sum::<T>() / T::of(self.numel() as f64);
        Self::from_op(vec![s], Vec::new(), Op::Mean(self.clone()))
    }

    /// Sums out `axis`.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(invalid("sum_axis", shape, format!("axis {axis} out of range")));
        }
        let (outer, extent, inner) = split_axis(shape, axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..extent {
                let src = &self.data()[(o * extent + a) * inner..(o * extent + a + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out = shape.to_vec();
        out.remove(axis);
        Ok(Self::from_op(data, out, Op::SumAxis(self.clone(), axis)))
    }

    /// Averages out `axis`.
    pub fn mean_axis(&self, axis: usize) -> Result<Self> {
        let extent = *self
            .shape()
            .get(axis)
            .ok_or_else(|| invalid("mean_axis", self.shape(), format!("axis {axis} out of range")))?;
        Ok(self.sum_axis(axis)?.mul_scalar(T::one() / T::of(extent as f64)))
    }

    /// Stacks `n` copies along a new leading axis.
    pub fn repeat(&self, n: usize) -> Self {
        let mut data = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            data.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        Self::from_op(data, shape, Op::Repeat(self.clone()))
    }

    /// Mean negative log-softmax of the true class over rows of `[n, c]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let shape = self.shape();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let mut probs = self.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::InvalidLabel {
                    row,
                    label,
                    classes: c,
                });
            }
            let x = &self.data()[row * c..(row + 1) * c];
            let m = x.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total += lse - x[label];
            softmax_in_place(&mut probs[row * c..(row + 1) * c]);
        }
        let loss = total / T::of(n as f64);
        Ok(Self::from_op(
            vec![loss],
            Vec::new(),
            Op::CrossEntropy(self.clone(), probs, labels.to_vec()),
        ))
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

pub(crate) fn transpose_blocks<T: Scalar>(src: &[T], batch: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let s = &src[b * m * n..(b + 1) * m * n];
        let d = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}
