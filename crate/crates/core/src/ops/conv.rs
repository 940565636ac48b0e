//! N-d convolution (N ∈ {2, 3}) lowered to GEMM through an im2col buffer.
//!
//! 2D tensors are processed as 3D tensors with a unit leading spatial axis and
//! a unit kernel along it, so one code path serves both ranks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{pad3, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Zero padding chosen so that `out = ceil(in / stride)`.
    #[default]
    Same,
    /// No padding; `out = (in - k) / stride + 1`.
    Valid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad_lo: [usize; 3],
    output: [usize; 3],
    out_shape: Vec<usize>,
}

impl ConvGeometry {
    pub(crate) fn new(input: &[usize], kernel: &[usize], stride: &[usize], padding: Padding) -> Result<Self> {
        let nd = input.len().saturating_sub(2);
        if !(2..=3).contains(&nd) {
            return Err(Error::invalid_shape(
                "conv_nd",
                format!("expected 2 or 3 spatial axes, input shape {input:?}"),
            ));
        }
        if kernel.len() != nd + 2 {
            return Err(Error::shape("conv_nd", input, kernel));
        }
        if kernel[1] != input[1] {
            return Err(Error::InvalidShape {
                op: "conv_nd",
                reason: format!(
                    "input {input:?} has {} channels but kernel {kernel:?} expects {}",
                    input[1], kernel[1]
                ),
            });
        }
        let stride = expand_axes("conv_nd", stride, nd)?;
        let in3 = pad3(&input[2..]);
        let k3 = pad3(&kernel[2..]);
        let s3 = pad3(&stride);
        let mut pad_lo = [0; 3];
        let mut out3 = [1; 3];
        for ax in 0..3 {
            let (i, k, s) = (in3[ax], k3[ax], s3[ax]);
            match padding {
                Padding::Same => {
                    let o = i.div_ceil(s);
                    let total = ((o - 1) * s + k).saturating_sub(i);
                    pad_lo[ax] = total / 2;
                    out3[ax] = o;
                }
                Padding::Valid => {
                    if k > i {
                        return Err(Error::InvalidShape {
                            op: "conv_nd",
                            reason: format!("kernel {kernel:?} exceeds input {input:?} with valid padding"),
                        });
                    }
                    out3[ax] = (i - k) / s + 1;
                }
            }
        }
        let mut out_shape = vec![input[0], kernel[0]];
        out_shape.extend_from_slice(&out3[3 - nd..]);
        Ok(ConvGeometry {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            input: in3,
            kernel: k3,
            stride: s3,
            pad_lo,
            output: out3,
            out_shape,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Input coordinate range along one axis for kernel tap `tap`:
    /// returns (first output index whose source is in-bounds, one past the last).
    fn valid_range(&self, ax: usize, tap: usize) -> (usize, usize) {
        let (i, s, p, o) = (
            self.input[ax] as isize,
            self.stride[ax] as isize,
            self.pad_lo[ax] as isize,
            self.output[ax] as isize,
        );
        let off = tap as isize - p;
        // need 0 <= o*s + off < i
        let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
        let hi = if i - off <= 0 {
            0
        } else {
            ((i - off - 1) / s + 1).min(o)
        };
        (lo.max(0) as usize, hi.max(lo.max(0)) as usize)
    }

    /// Output lines (runs along the last axis) per block, so that one block
    /// of the unfolded input stays cache-resident.
    fn lines_per_block(&self) -> usize {
        const TARGET: usize = 1 << 18;
        let per_line = self.rows() * self.output[2];
        (TARGET / per_line.max(1)).clamp(1, self.output[0] * self.output[1])
    }

    /// In-plane unit stride with equal input and output widths: consecutive
    /// output lines then read one contiguous input span per kernel tap.
    fn contiguous_rows(&self) -> bool {
        self.stride[1] == 1 && self.stride[2] == 1 && self.input[2] == self.output[2]
    }

    /// Visit every (kernel row, output z, output y range) of the block
    /// `l0..l1`, restricted to in-bounds taps. The callback receives the
    /// column-buffer row, the offset of the first line within the block, the
    /// line count, the input offset of the first line's start, and the tap's
    /// valid x range.
    fn for_each_run(&self, l0: usize, l1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize)) {
        let [_, oh, _] = self.output;
        let [id, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, _] = self.stride;
        let [pd, ph, _] = self.pad_lo;
        let mut row = 0;
        for c in 0..self.cin {
            let cbase = c * id * ih * iw;
            for a in 0..kd {
                let (d0, d1) = self.valid_range(0, a);
                for b in 0..kh {
                    let (h0, h1) = self.valid_range(1, b);
                    for e in 0..kw {
                        let (w0, w1) = self.valid_range(2, e);
                        if w0 < w1 {
                            let z_first = l0 / oh;
                            let z_last = (l1 - 1) / oh;
                            for zo in z_first.max(d0)..(z_last + 1).min(d1) {
                                let ya = (l0.max(zo * oh) - zo * oh).max(h0);
                                let yb = (l1.min((zo + 1) * oh) - zo * oh).min(h1);
                                if ya >= yb {
                                    continue;
                                }
                                let zi = zo * sd + a - pd;
                                let yi = ya * sh + b - ph;
                                f(row, zo * oh + ya - l0, yb - ya, cbase + (zi * ih + yi) * iw, e, w0, w1);
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    /// Unfold output lines `l0..l1` into `col`, laid out `[rows, (l1-l0)·ow]`.
    fn im2col<T: Scalar>(&self, x: &[T], l0: usize, l1: usize, col: &mut [T]) {
        let [_, _, ow] = self.output;
        let [_, _, iw] = self.input;
        let [_, sh, sw] = self.stride;
        let pw = self.pad_lo[2];
        let width = (l1 - l0) * ow;
        let col = &mut col[..self.rows() * width];
        col.fill(T::zero());
        let contiguous = self.contiguous_rows();
        self.for_each_run(l0, l1, |row, line, count, src0, e, w0, w1| {
            let dst = &mut col[row * width + line * ow..row * width + (line + count) * ow];
            if contiguous {
                // span from the first valid element of the first line to the
                // last valid element of the last line
                let start = w0;
                let end = (count - 1) * ow + w1;
                let s0 = src0 + w0 + e - pw;
                dst[start..end].copy_from_slice(&x[s0..s0 + (end - start)]);
                for t in 0..count {
                    let line = &mut dst[t * ow..(t + 1) * ow];
                    line[..w0].fill(T::zero());
                    line[w1..].fill(T::zero());
                }
            } else {
                for t in 0..count {
                    let src = &x[src0 + t * sh * iw..];
                    let drow = &mut dst[t * ow..(t + 1) * ow];
                    for xo in w0..w1 {
                        drow[xo] = src[xo * sw + e - pw];
                    }
                }
            }
        });
    }

    /// Adjoint of [`Self::im2col`]: scatter-add a block back into `dx`.
    /// Entries of `col` that correspond to padding are overwritten with zero.
    fn col2im<T: Scalar>(&self, col: &mut [T], l0: usize, l1: usize, dx: &mut [T]) {
        let [_, _, ow] = self.output;
        let [_, _, iw] = self.input;
        let [_, sh, sw] = self.stride;
        let pw = self.pad_lo[2];
        let width = (l1 - l0) * ow;
        let contiguous = self.contiguous_rows();
        self.for_each_run(l0, l1, |row, line, count, src0, e, w0, w1| {
            let src = &mut col[row * width + line * ow..row * width + (line + count) * ow];
            if contiguous {
                for t in 0..count {
                    let line = &mut src[t * ow..(t + 1) * ow];
                    line[..w0].fill(T::zero());
                    line[w1..].fill(T::zero());
                }
                let start = w0;
                let end = (count - 1) * ow + w1;
                let d0 = src0 + w0 + e - pw;
                for (d, &v) in dx[d0..d0 + (end - start)].iter_mut().zip(&src[start..end]) {
                    *d += v;
                }
            } else {
                for t in 0..count {
                    let base = src0 + t * sh * iw;
                    let srow = &src[t * ow..(t + 1) * ow];
                    for xo in w0..w1 {
                        dx[base + xo * sw + e - pw] += srow[xo];
                    }
                }
            }
        });
    }
}

pub(crate) fn expand_axes(op: &'static str, v: &[usize], nd: usize) -> Result<Vec<usize>> {
    let out = match v.len() {
        1 => vec![v[0]; nd],
        n if n == nd => v.to_vec(),
        _ => {
            return Err(Error::invalid_shape(
                op,
                format!("expected 1 or {nd} per-axis values, got {v:?}"),
            ))
        }
    };
    if out.iter().any(|&s| s == 0) {
        return Err(Error::invalid_shape(op, format!("zero extent in {v:?}")));
    }
    Ok(out)
}

/// Gradients of a convolution with respect to each of its operands.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Forward convolution. `kernel` is `[out_channels, in_channels, k...]`.
pub fn conv_nd<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&[T]>,
    stride: &[usize],
    padding: Padding,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(Error::shape("conv_nd bias", &[b.len()], &[g.cout]));
        }
    }
    let (rows, plen, ilen) = (g.rows(), g.out_len(), g.in_len());
    let mut out = vec![T::zero(); g.batch * g.cout * plen];
    let lines = g.output[0] * g.output[1];
    let ow = g.output[2];
    let block = g.lines_per_block();
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * block * ow]
    };
    for n in 0..g.batch {
        let x = &input.data()[n * g.cin * ilen..(n + 1) * g.cin * ilen];
        let y = &mut out[n * g.cout * plen..(n + 1) * g.cout * plen];
        if let Some(b) = bias {
            for (co, chunk) in y.chunks_mut(plen).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        if g.is_pointwise() {
            T::gemm(g.cout, rows, plen, T::one(), kernel.data(), false, x, false, beta, y);
            continue;
        }
        for l0 in (0..lines).step_by(block) {
            let l1 = (l0 + block).min(lines);
            let width = (l1 - l0) * ow;
            g.im2col(x, l0, l1, &mut col);
            T::gemm_strided(
                g.cout,
                rows,
                width,
                T::one(),
                kernel.data(),
                (rows, 1),
                &col,
                (width, 1),
                beta,
                &mut y[l0 * ow..],
                (plen, 1),
            );
        }
    }
    Tensor::new(g.out_shape.clone(), out)?.ensure_finite("conv_nd")
}

/// Lane-parallel dot product; independent accumulators let it vectorize.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let split = a.len() / LANES * LANES;
    for (x, y) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = acc.iter().copied().sum::<T>();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        s += *x * *y;
    }
    s
}

/// Backward convolution given the upstream gradient `grad_out`.
pub fn conv_nd_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: &[usize],
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.out_shape.as_slice() {
        return Err(Error::shape("conv_nd backward", grad_out.shape(), &g.out_shape));
    }
    let (rows, plen, ilen) = (g.rows(), g.out_len(), g.in_len());
    let mut dx = vec![T::zero(); input.numel()];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.cout];
    let lines = g.output[0] * g.output[1];
    let ow = g.output[2];
    let block = g.lines_per_block();
    let buf = if g.is_pointwise() { 0 } else { rows * block * ow };
    let mut col = vec![T::zero(); buf];
    let mut dcol = vec![T::zero(); buf];
    for n in 0..g.batch {
        let x = &input.data()[n * g.cin * ilen..(n + 1) * g.cin * ilen];
        let dy = &grad_out.data()[n * g.cout * plen..(n + 1) * g.cout * plen];
        for (co, chunk) in dy.chunks(plen).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let dxn = &mut dx[n * g.cin * ilen..(n + 1) * g.cin * ilen];
        if g.is_pointwise() {
            T::gemm(g.cout, plen, rows, T::one(), dy, false, x, true, T::one(), &mut dw);
            T::gemm(
                rows,
                g.cout,
                plen,
                T::one(),
                kernel.data(),
                true,
                dy,
                false,
                T::one(),
                dxn,
            );
            continue;
        }
        for l0 in (0..lines).step_by(block) {
            let l1 = (l0 + block).min(lines);
            let width = (l1 - l0) * ow;
            let dyb = &dy[l0 * ow..];
            g.im2col(x, l0, l1, &mut col);
            // dW[co][r] += dY_block[co] · col_block[r]; small cout makes a
            // packed GEMM bandwidth-bound here
            for r in 0..rows {
                let c = &col[r * width..(r + 1) * width];
                for co in 0..g.cout {
                    dw[co * rows + r] += dot(c, &dyb[co * plen..co * plen + width]);
                }
            }
            // dcol = Wᵀ · dY_block
            T::gemm_strided(
                rows,
                g.cout,
                width,
                T::one(),
                kernel.data(),
                (1, rows),
                dyb,
                (plen, 1),
                T::zero(),
                &mut dcol,
                (width, 1),
            );
            g.col2im(&mut dcol, l0, l1, dxn);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), dx)?.ensure_finite("conv_nd backward")?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?.ensure_finite("conv_nd backward")?,
        bias: db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct-loop reference convolution, independent of im2col.
    fn conv_reference(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        stride: [usize; 3],
        pad: [usize; 3],
        out: [usize; 3],
    ) -> Vec<f64> {
        let [id, ih, iw] = x.spatial3();
        let [kd, kh, kw] = w.spatial3();
        let (b, ci, co) = (x.batch(), x.channels(), w.shape()[0]);
        let mut y = vec![0.0; b * co * out.iter().product::<usize>()];
        let mut idx = 0;
        for n in 0..b {
            for o in 0..co {
                for z in 0..out[0] {
                    for yy in 0..out[1] {
                        for xx in 0..out[2] {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let zi = (z * stride[0] + a) as isize - pad[0] as isize;
                                            let yi = (yy * stride[1] + bb) as isize - pad[1] as isize;
                                            let xi = (xx * stride[2] + e) as isize - pad[2] as isize;
                                            if zi < 0 || yi < 0 || xi < 0 {
                                                continue;
                                            }
                                            let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
                                            if zi >= id || yi >= ih || xi >= iw {
                                                continue;
                                            }
                                            let xv = x.data()[(((n * ci + c) * id + zi) * ih + yi) * iw + xi];
                                            let wv = w.data()[(((o * ci + c) * kd + a) * kh + bb) * kw + e];
                                            acc += xv * wv;
                                        }
                                    }
                                }
                            }
                            y[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        y
    }

    fn lcg_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn identity_kernel_same_padding() {
        let x = lcg_tensor(&[1, 1, 4, 5], 1);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv_nd(&x, &w, Some(&[0.0]), &[1], Padding::Same).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_on_constant_input() {
        let x = Tensor::full(&[1, 1, 6, 6], 2.0f64);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv_nd(&x, &w, Some(&[0.0]), &[1], Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 18.0));
    }

    #[test]
    fn matches_reference_loops() {
        for (shape, kshape, stride, padding) in [
            (vec![2, 3, 5, 6, 4], vec![4, 3, 3, 3, 3], vec![1], Padding::Same),
            (vec![1, 2, 7, 5], vec![3, 2, 3, 3], vec![2], Padding::Same),
            (vec![1, 2, 7, 6, 5], vec![2, 2, 3, 1, 3], vec![2, 1, 1], Padding::Valid),
            (vec![2, 2, 4, 4], vec![3, 2, 1, 1], vec![1], Padding::Same),
        ] {
            let x = lcg_tensor(&shape, 3);
            let w = lcg_tensor(&kshape, 5);
            let y = conv_nd(&x, &w, None, &stride, padding).unwrap();
            let g = ConvGeometry::new(&shape, &kshape, &stride, padding).unwrap();
            let want = conv_reference(&x, &w, g.stride, g.pad_lo, g.output);
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_padding_preserves_extent_and_strides_round_up() {
        let g = ConvGeometry::new(&[1, 1, 70, 70, 70], &[1, 1, 3, 3, 3], &[2], Padding::Same).unwrap();
        assert_eq!(g.output, [35, 35, 35]);
        let g = ConvGeometry::new(&[1, 1, 9, 9], &[1, 1, 3, 3], &[2], Padding::Same).unwrap();
        assert_eq!(g.output, [1, 5, 5]);
    }

    #[test]
    fn channel_mismatch_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros(&[2, 2, 3, 3]);
        let msg = conv_nd(&x, &w, None, &[1], Padding::Same).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 4, 4]") && msg.contains("[2, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn valid_padding_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let w = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(conv_nd(&x, &w, None, &[1], Padding::Valid).is_err());
    }
}
