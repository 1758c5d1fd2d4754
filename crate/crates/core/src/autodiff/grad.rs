//! Backward rules, one per recorded operation.

use super::ops::{rows_cols, split_axis};
use super::{Op, Tensor};
use crate::Scalar;

/// Adds `f(i)` into the gradient of `t`, if `t` takes part in differentiation.
fn accumulate<T: Scalar>(t: &Tensor<T>, f: impl Fn(usize) -> T) {
    if !t.requires_grad() {
        return;
    }
    let mut g = t.grad_mut();
    for (i, gi) in g.iter_mut().enumerate() {
        *gi += f(i);
    }
}

pub(super) fn propagate<T: Scalar>(op: &Op<T>, out: &Tensor<T>, g: &[T]) {
    let y = out.data();
    match op {
        Op::Add(a, b) => {
            accumulate(a, |i| g[i]);
            accumulate(b, |i| g[i]);
        }
        Op::Sub(a, b) => {
            accumulate(a, |i| g[i]);
            accumulate(b, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (da, db) = (a.data(), b.data());
            accumulate(a, |i| g[i] * db[i]);
            accumulate(b, |i| g[i] * da[i]);
        }
        Op::Div(a, b) => {
            let db = b.data();
            accumulate(a, |i| g[i] / db[i]);
            accumulate(b, |i| -g[i] * y[i] / db[i]);
        }
        Op::AddScalar(a) => accumulate(a, |i| g[i]),
        Op::MulScalar(a, c) => accumulate(a, |i| g[i] * *c),
        Op::Recip(a) => accumulate(a, |i| -g[i] * y[i] * y[i]),
        Op::Exp(a) => accumulate(a, |i| g[i] * y[i]),
        Op::Log(a) => {
            let x = a.data();
            accumulate(a, |i| g[i] / x[i]);
        }
        Op::Sigmoid(a) => accumulate(a, |i| g[i] * y[i] * (T::one() - y[i])),
        Op::Tanh(a) => accumulate(a, |i| g[i] * (T::one() - y[i] * y[i])),
        Op::Relu(a) => {
            let x = a.data();
            accumulate(a, |i| if x[i] > T::zero() { g[i] } else { T::zero() });
        }
        Op::Clamp(a, lo, hi) => {
            let x = a.data();
            accumulate(a, |i| {
                if x[i] >= *lo && x[i] <= *hi {
                    g[i]
                } else {
                    T::zero()
                }
            });
        }
        Op::MatMul(a, b) => {
            let (rows, k) = rows_cols(a.shape());
            let n = b.shape()[1];
            if a.requires_grad() {
                // dA = G @ B^T
                T::gemm(
                    rows,
                    n,
                    k,
                    g,
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    T::one(),
                    &mut a.grad_mut(),
                    (k as isize, 1),
                );
            }
            if b.requires_grad() {
                // dB = A^T @ G
                T::gemm(
                    k,
                    rows,
                    n,
                    a.data(),
                    (1, k as isize),
                    g,
                    (n as isize, 1),
                    T::one(),
                    &mut b.grad_mut(),
                    (n as isize, 1),
                );
            }
        }
        Op::Bmm(a, b) => {
            let (bt, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
            let n = b.shape()[2];
            if a.requires_grad() {
                let mut ga = a.grad_mut();
                for i in 0..bt {
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        &b.data()[i * k * n..(i + 1) * k * n],
                        (1, n as isize),
                        T::one(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                }
            }
            if b.requires_grad() {
                let mut gb = b.grad_mut();
                for i in 0..bt {
                    T::gemm(
                        k,
                        m,
                        n,
                        &a.data()[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        &g[i * m * n..(i + 1) * m * n],
                        (n as isize, 1),
                        T::one(),
                        &mut gb[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                    );
                }
            }
        }
        Op::Transpose(a) => {
            // out has the last two axes of `a` swapped; swap them back.
            let s = out.shape();
            let r = s.len();
            let batch = super::numel(&s[..r - 2]);
            let back = super::ops::transpose_blocks(g, batch, s[r - 2], s[r - 1]);
            accumulate(a, |i| back[i]);
        }
        Op::Reshape(a) => accumulate(a, |i| g[i]),
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = p.shape()[*axis];
                if p.requires_grad() {
                    let mut gp = p.grad_mut();
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                        for (d, &s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src)
                        {
                            *d += s;
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice(a, axis, start) => {
            if a.requires_grad() {
                let (outer, extent, inner) = split_axis(a.shape(), *axis);
                let len = out.shape()[*axis];
                let mut ga = a.grad_mut();
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    for (d, &s) in ga[base..base + len * inner]
                        .iter_mut()
                        .zip(&g[o * len * inner..(o + 1) * len * inner])
                    {
                        *d += s;
                    }
                }
            }
        }
        Op::Softmax(a) => {
            if a.requires_grad() {
                let (rows, cols) = rows_cols(out.shape());
                let mut ga = a.grad_mut();
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in ga[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - dot);
                    }
                }
            }
        }
        Op::LayerNorm(a, inv_std) => {
            if a.requires_grad() {
                let (rows, cols) = rows_cols(out.shape());
                let n = T::of(cols as f64);
                let mut ga = a.grad_mut();
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    let s = inv_std[r];
                    for ((d, &yi), &gi) in ga[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d += s * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
        }
        Op::Sum(a) => accumulate(a, |_| g[0]),
        Op::Mean(a) => {
            let scale = g[0] / T::of(a.numel() as f64);
            accumulate(a, |_| scale);
        }
        Op::SumAxis(a, axis) => {
            let (_, extent, inner) = split_axis(a.shape(), *axis);
            accumulate(a, |i| {
                let o = i / (extent * inner);
                let j = i % inner;
                g[o * inner + j]
            });
        }
        Op::Repeat(a) => {
            let m = a.numel();
            if a.requires_grad() && m > 0 {
                let mut ga = a.grad_mut();
                for chunk in g.chunks(m) {
                    for (d, &s) in ga.iter_mut().zip(chunk) {
                        *d += s;
                    }
                }
            }
        }
        Op::CrossEntropy(a, probs, labels) => {
            let (n, c) = (a.shape()[0], a.shape()[1]);
            let scale = g[0] / T::of(n as f64);
            accumulate(a, |i| {
                let (row, col) = (i / c, i % c);
                let target = if labels[row] == col { T::one() } else { T::zero() };
                scale * (probs[i] - target)
            });
        }
    }
}
