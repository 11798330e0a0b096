use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::ZERO; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }
}

// Accumulation order is fixed by the code below: eight interleaved partial
// sums combined pairwise at the end. Vectorization cannot change it because
// every lane is an independent accumulator.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn add_into<T: Real>(x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// `y[r] = b + x[r] · W` for each row, with `W` stored `[n_in, n_out]`.
pub fn matmul_rows<T: Real>(
    x: &[T],
    rows: usize,
    w: &[T],
    b: Option<&[T]>,
    n_in: usize,
    n_out: usize,
) -> Vec<T> {
    debug_assert_eq!(x.len(), rows * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    let mut y = vec![T::ZERO; rows * n_out];
    for (xr, yr) in x.chunks_exact(n_in).zip(y.chunks_exact_mut(n_out)) {
        if let Some(b) = b {
            yr.copy_from_slice(b);
        }
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, &w[i * n_out..(i + 1) * n_out], yr);
        }
    }
    y
}

/// Accumulates `dW += xᵀ·dy` and `db += Σ dy`; returns `dx = dy·Wᵀ` when asked.
#[allow(clippy::too_many_arguments)]
pub fn matmul_rows_backward<T: Real>(
    x: &[T],
    dy: &[T],
    rows: usize,
    w: &[T],
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    debug_assert_eq!(dy.len(), rows * n_out);
    for (xr, dyr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
        for (i, &xi) in xr.iter().enumerate() {
            axpy(xi, dyr, &mut dw[i * n_out..(i + 1) * n_out]);
        }
    }
    if let Some(db) = db {
        for dyr in dy.chunks_exact(n_out) {
            add_into(dyr, db);
        }
    }
    want_dx.then(|| {
        let mut dx = vec![T::ZERO; rows * n_in];
        for (dxr, dyr) in dx.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            for (i, d) in dxr.iter_mut().enumerate() {
                *d = dot(dyr, &w[i * n_out..(i + 1) * n_out]);
            }
        }
        dx
    })
}

/// Row-wise softmax. Exponentials in `T`, normalizer accumulated in f64.
pub fn softmax_rows<T: Real>(logits: &[T], width: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; logits.len()];
    for (lr, or) in logits.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let mut m = lr[0];
        for &v in &lr[1..] {
            m = m.max(v);
        }
        let mut sum = 0f64;
        for (o, &v) in or.iter_mut().zip(lr) {
            *o = (v - m).exp();
            sum += o.to_f64();
        }
        let inv = 1.0 / sum;
        for o in or.iter_mut() {
            *o = T::from_f64(o.to_f64() * inv);
        }
    }
    out
}

/// Vector-Jacobian product of softmax: `dx = p ⊙ (dy − ⟨p, dy⟩)`.
pub fn softmax_rows_backward<T: Real>(probs: &[T], dy: &[T], width: usize) -> Vec<T> {
    let mut dx = vec![T::ZERO; probs.len()];
    for ((pr, dyr), dxr) in probs
        .chunks_exact(width)
        .zip(dy.chunks_exact(width))
        .zip(dx.chunks_exact_mut(width))
    {
        let s = dot(pr, dyr);
        for ((d, &p), &g) in dxr.iter_mut().zip(pr).zip(dyr) {
            *d = p * (g - s);
        }
    }
    dx
}
