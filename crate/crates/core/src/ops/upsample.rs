//! Separable (bi/tri)linear upsampling by an integer factor, half-pixel
//! (align-corners = false) convention.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Two-tap interpolation stencil for one output coordinate.
fn taps(out_idx: usize, factor: usize, in_len: usize) -> (usize, usize, f64) {
    let src = (out_idx as f64 + 0.5) / factor as f64 - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    let frac = src - i0 as f64;
    (i0, i1, frac)
}

/// Resample one axis of a row-major tensor `[outer, len, inner]`.
fn resample_axis<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize, factor: usize) -> Vec<T> {
    let out_len = len * factor;
    let mut y = vec![T::zero(); outer * out_len * inner];
    for j in 0..out_len {
        let (i0, i1, frac) = taps(j, factor, len);
        let (w0, w1) = (T::of(1.0 - frac), T::of(frac));
        for o in 0..outer {
            let s0 = &x[(o * len + i0) * inner..(o * len + i0 + 1) * inner];
            let s1 = &x[(o * len + i1) * inner..(o * len + i1 + 1) * inner];
            let d = &mut y[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
            for ((d, &a), &b) in d.iter_mut().zip(s0).zip(s1) {
                *d = w0 * a + w1 * b;
            }
        }
    }
    y
}

/// Transpose of [`resample_axis`].
fn resample_axis_transpose<T: Scalar>(g: &[T], outer: usize, len: usize, inner: usize, factor: usize) -> Vec<T> {
    let out_len = len * factor;
    let mut dx = vec![T::zero(); outer * len * inner];
    for j in 0..out_len {
        let (i0, i1, frac) = taps(j, factor, len);
        let (w0, w1) = (T::of(1.0 - frac), T::of(frac));
        for o in 0..outer {
            let src = &g[(o * out_len + j) * inner..(o * out_len + j + 1) * inner];
            for (k, &v) in src.iter().enumerate() {
                dx[(o * len + i0) * inner + k] += w0 * v;
                dx[(o * len + i1) * inner + k] += w1 * v;
            }
        }
    }
    dx
}

fn check(input_shape: &[usize], factor: usize) -> Result<usize> {
    let nd = input_shape.len().saturating_sub(2);
    if !(2..=3).contains(&nd) {
        return Err(Error::invalid_shape(
            "upsample_linear_nd",
            format!("expected 2 or 3 spatial axes, got shape {input_shape:?}"),
        ));
    }
    if factor == 0 {
        return Err(Error::InvalidArgument("upsample factor must be >= 1".into()));
    }
    Ok(nd)
}

pub fn upsample_linear_nd<T: Scalar>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let nd = check(input.shape(), factor)?;
    if factor == 1 {
        return Ok(input.clone());
    }
    let mut shape = input.shape().to_vec();
    let mut data = input.data().to_vec();
    for ax in 2..2 + nd {
        let outer: usize = shape[..ax].iter().product();
        let inner: usize = shape[ax + 1..].iter().product();
        data = resample_axis(&data, outer, shape[ax], inner, factor);
        shape[ax] *= factor;
    }
    Tensor::new(shape, data)
}

pub fn upsample_linear_nd_backward<T: Scalar>(
    input_shape: &[usize],
    factor: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let nd = check(input_shape, factor)?;
    let mut want = input_shape.to_vec();
    for e in &mut want[2..] {
        *e *= factor;
    }
    if grad_out.shape() != want.as_slice() {
        return Err(Error::shape("upsample backward", grad_out.shape(), &want));
    }
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let mut shape = want;
    let mut data = grad_out.data().to_vec();
    for ax in (2..2 + nd).rev() {
        let len = shape[ax] / factor;
        let outer: usize = shape[..ax].iter().product();
        let inner: usize = shape[ax + 1..].iter().product();
        data = resample_axis_transpose(&data, outer, len, inner, factor);
        shape[ax] = len;
    }
    Tensor::new(shape, data)
}
