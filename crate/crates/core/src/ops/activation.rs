use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient is passed only where the input was strictly positive.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape as input")
}

/// Softmax over the channel axis at every spatial position, max-stabilized.
pub fn softmax_channels<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape().len() < 2 {
        return Err(Error::invalid_shape("softmax_channels", "missing channel axis"));
    }
    let (b, c) = (input.batch(), input.channels());
    let plane: usize = input.spatial().iter().product();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        let base = n * c * plane;
        for p in 0..plane {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(x[base + ch * plane + p]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * plane + p] - m).exp();
                out[base + ch * plane + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= z;
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)?.ensure_finite("softmax_channels")
}

/// Vector-Jacobian product of softmax given its output `probs`.
pub fn softmax_channels_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (probs.batch(), probs.channels());
    let plane: usize = probs.spatial().iter().product();
    let (p, g) = (probs.data(), grad_out.data());
    let mut dx = vec![T::zero(); p.len()];
    for n in 0..b {
        let base = n * c * plane;
        for q in 0..plane {
            let mut dot = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + q;
                dot += p[i] * g[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + q;
                dx[i] = p[i] * (g[i] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), dx).expect("same shape as probs")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_cases() {
        let neg = Tensor::from_fn(&[1, 1, 2, 2], |i| -(i as f32) - 0.5);
        assert!(relu(&neg).data().iter().all(|&v| v == 0.0));
        let pos = Tensor::from_fn(&[1, 1, 2, 2], |i| i as f32 + 0.5);
        assert_eq!(relu(&pos), pos);
        let zero = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        assert_eq!(relu_backward(&zero, &Tensor::full(&[1, 1, 1, 1], 1.0)).data(), &[0.0]);
    }

    #[test]
    fn equal_logits_give_uniform_probabilities() {
        let x = Tensor::full(&[1, 4, 2, 2], 0.7f64);
        let p = softmax_channels(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let x = Tensor::new(vec![1, 4, 1, 1], vec![1000.0f32, 0.0, 0.0, 0.0]).unwrap();
        let p = softmax_channels(&x).unwrap();
        assert!((p.data()[0] - 1.0).abs() < 1e-6);
        assert!(p.all_finite());
    }
}
