use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Concatenate `[batch, channel, spatial...]` tensors along the channel axis.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels of zero tensors".into()))?;
    if first.shape().len() < 2 {
        return Err(Error::invalid_shape("concat_channels", "missing channel axis"));
    }
    for t in &inputs[1..] {
        if t.shape().len() != first.shape().len() || t.batch() != first.batch() || t.spatial() != first.spatial() {
            return Err(Error::shape("concat_channels", first.shape(), t.shape()));
        }
    }
    let batch = first.batch();
    let plane: usize = first.spatial().iter().product();
    let channels: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut data = Vec::with_capacity(batch * channels * plane);
    for n in 0..batch {
        for t in inputs {
            let block = t.channels() * plane;
            data.extend_from_slice(&t.data()[n * block..(n + 1) * block]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = channels;
    Tensor::new(shape, data)
}

/// Channels `[start, start + len)` of `input`.
pub fn slice_channels<T: Scalar>(input: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    if input.shape().len() < 2 || len == 0 || start + len > input.channels() {
        return Err(Error::invalid_shape(
            "slice_channels",
            format!(
                "channels [{start}, {}) out of range for shape {:?}",
                start + len,
                input.shape()
            ),
        ));
    }
    let plane: usize = input.spatial().iter().product();
    let c = input.channels();
    let mut data = Vec::with_capacity(input.batch() * len * plane);
    for n in 0..input.batch() {
        let off = (n * c + start) * plane;
        data.extend_from_slice(&input.data()[off..off + len * plane]);
    }
    let mut shape = input.shape().to_vec();
    shape[1] = len;
    Tensor::new(shape, data)
}

/// Add `grad` (shaped like a channel slice) into the matching block of `dst`.
pub(crate) fn scatter_channels<T: Scalar>(dst: &mut Tensor<T>, start: usize, grad: &Tensor<T>) {
    let plane: usize = dst.spatial().iter().product();
    let (c, len) = (dst.channels(), grad.channels());
    let batch = dst.batch();
    let d = dst.data_mut();
    for n in 0..batch {
        let off = (n * c + start) * plane;
        let src = &grad.data()[n * len * plane..(n + 1) * len * plane];
        for (a, &b) in d[off..off + len * plane].iter_mut().zip(src) {
            *a += b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_input_is_identity() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f32);
        assert_eq!(concat_channels(&[&a]).unwrap(), a);
    }

    #[test]
    fn image_plus_features_channel_count() {
        let img = Tensor::<f32>::zeros(&[1, 3, 4, 4, 4]);
        let feats = Tensor::<f32>::zeros(&[1, 12, 4, 4, 4]);
        let out = concat_channels(&[&img, &feats]).unwrap();
        assert_eq!(out.shape(), &[1, 15, 4, 4, 4]);
    }

    #[test]
    fn concat_then_slice_recovers_inputs() {
        let a = Tensor::from_fn(&[2, 1, 3, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 3, 2], |i| -(i as f64));
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(slice_channels(&c, 0, 1).unwrap(), a);
        assert_eq!(slice_channels(&c, 1, 2).unwrap(), b);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let a = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 1, 4, 5]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }
}
