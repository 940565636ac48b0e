use crate::error::{Error, Result};
use crate::ops::conv::expand_axes;
use crate::scalar::Scalar;
use crate::tensor::{pad3, Tensor};

/// Max pooling output together with the flat input index each output element
/// was taken from.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// Max pooling over 2 or 3 spatial axes with truncating window arithmetic:
/// `out = (in - window) / stride + 1`. Ties resolve to the first element in
/// scan order.
pub fn maxpool_nd<T: Scalar>(input: &Tensor<T>, window: &[usize], stride: &[usize]) -> Result<Pooled<T>> {
    let nd = input.spatial_rank();
    if !(2..=3).contains(&nd) {
        return Err(Error::invalid_shape(
            "maxpool_nd",
            format!("expected 2 or 3 spatial axes, got shape {:?}", input.shape()),
        ));
    }
    let window = expand_axes("maxpool_nd", window, nd)?;
    let stride = expand_axes("maxpool_nd", stride, nd)?;
    let in3 = input.spatial3();
    let w3 = pad3(&window);
    let s3 = pad3(&stride);
    let mut out3 = [1; 3];
    for ax in 0..3 {
        if w3[ax] > in3[ax] {
            return Err(Error::InvalidShape {
                op: "maxpool_nd",
                reason: format!("window {window:?} larger than spatial extent {:?}", input.spatial()),
            });
        }
        out3[ax] = (in3[ax] - w3[ax]) / s3[ax] + 1;
    }
    let [id, ih, iw] = in3;
    let [od, oh, ow] = out3;
    let planes = input.batch() * input.channels();
    let mut out = Vec::with_capacity(planes * od * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    let x = input.data();
    for p in 0..planes {
        let base = p * id * ih * iw;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for a in 0..w3[0] {
                        for b in 0..w3[1] {
                            let row = base + ((z * s3[0] + a) * ih + y * s3[1] + b) * iw + xx * s3[2];
                            for e in 0..w3[2] {
                                let v = x[row + e];
                                if v > best || best_idx == usize::MAX {
                                    best = v;
                                    best_idx = row + e;
                                }
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let mut shape = vec![input.batch(), input.channels()];
    shape.extend_from_slice(&out3[3 - nd..]);
    Ok(Pooled {
        output: Tensor::new(shape, out)?,
        argmax,
    })
}

/// Routes each output gradient to the input position that produced the max.
pub fn maxpool_nd_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != grad_out.numel() {
        return Err(Error::shape("maxpool_nd backward", &[argmax.len()], grad_out.shape()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}
