//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the tape
//! order is already a topological order; [`Graph::backward`] walks it once in
//! reverse.

use crate::error::{Error, Result};
use crate::loss;
use crate::ops::{self, BatchStats, NormMode, Padding, RunningStats};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: Vec<usize>,
        padding: Padding,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Slice {
        input: Var,
        start: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        x_hat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    Softmax {
        input: Var,
    },
    WeightedCe {
        probs: Var,
        labels: Vec<u8>,
        weights: Vec<f64>,
    },
    Sum {
        input: Var,
    },
    Combine {
        terms: Vec<(Var, T)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar root with respect to every node of the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `v`, or `None` when the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a leaf (input data or parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: &[usize],
        padding: Padding,
    ) -> Result<Var> {
        let b = bias.map(|b| self.value(b).data().to_vec());
        let y = ops::conv_nd(self.value(input), self.value(kernel), b.as_deref(), stride, padding)?;
        self.push(
            y,
            Op::Conv {
                input,
                kernel,
                bias,
                stride: stride.to_vec(),
                padding,
            },
            "conv_nd",
        )
    }

    pub fn maxpool(&mut self, input: Var, window: &[usize], stride: &[usize]) -> Result<Var> {
        let p = ops::maxpool_nd(self.value(input), window, stride)?;
        self.push(
            p.output,
            Op::MaxPool {
                input,
                argmax: p.argmax,
            },
            "maxpool_nd",
        )
    }

    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let y = ops::upsample_linear_nd(self.value(input), factor)?;
        self.push(y, Op::Upsample { input, factor }, "upsample_linear_nd")
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
        let y = ops::concat_channels(&values)?;
        self.push(
            y,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            "concat_channels",
        )
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(input), start, len)?;
        self.push(y, Op::Slice { input, start }, "slice_channels")
    }

    /// Batch normalization. In training mode the batch statistics are
    /// returned so the caller can fold them into its running statistics.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: &RunningStats<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let n = ops::batchnorm_forward(
            self.value(input),
            self.value(gamma).data(),
            self.value(beta).data(),
            mode,
            running,
        )?;
        let v = self.push(
            n.output,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                x_hat: n.x_hat,
                inv_std: n.inv_std,
            },
            "batchnorm",
        )?;
        Ok((v, n.stats))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let y = ops::relu(self.value(input));
        self.push(y, Op::Relu { input }, "relu")
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let y = ops::softmax_channels(self.value(input))?;
        self.push(y, Op::Softmax { input }, "softmax_channels")
    }

    /// Scalar weighted cross-entropy of `probs` (softmax output).
    pub fn weighted_cross_entropy(
        &mut self,
        probs: Var,
        labels: Vec<u8>,
        weights: Vec<f64>,
        normalizer: loss::Normalizer,
    ) -> Result<Var> {
        let l = loss::weighted_cross_entropy(self.value(probs), &labels, &weights, normalizer)?;
        self.push(
            Tensor::scalar(T::of(l)),
            Op::WeightedCe { probs, labels, weights },
            "weighted_cross_entropy",
        )
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, "sum")
    }

    /// `Σ c_i · x_i` over scalar nodes.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = T::zero();
        let mut stored = Vec::with_capacity(terms.len());
        for &(v, c) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::invalid_shape(
                    "combine",
                    format!("expected scalar terms, got shape {:?}", t.shape()),
                ));
            }
            acc += T::of(c) * t.item();
            stored.push((v, T::of(c)));
        }
        self.push(Tensor::scalar(acc), Op::Combine { terms: stored }, "combine")
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::invalid_shape(
                "backward",
                format!("root must be a scalar, got {:?}", self.value(root).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let g = ops::conv_nd_backward(self.value(*input), self.value(*kernel), &gy, stride, *padding)?;
                    accumulate(&mut grads, *input, g.input);
                    accumulate(&mut grads, *kernel, g.kernel);
                    if let Some(b) = bias {
                        let shape = self.value(*b).shape().to_vec();
                        accumulate(&mut grads, *b, Tensor::new(shape, g.bias)?);
                    }
                }
                Op::MaxPool { input, argmax } => {
                    let g = ops::maxpool_nd_backward(self.value(*input).shape(), argmax, &gy)?;
                    accumulate(&mut grads, *input, g);
                }
                Op::Upsample { input, factor } => {
                    let g = ops::upsample_linear_nd_backward(self.value(*input).shape(), *factor, &gy)?;
                    accumulate(&mut grads, *input, g);
                }
                Op::Concat { inputs } => {
                    let mut start = 0;
                    for &v in inputs {
                        let c = self.value(v).channels();
                        accumulate(&mut grads, v, ops::slice_channels(&gy, start, c)?);
                        start += c;
                    }
                }
                Op::Slice { input, start } => {
                    let mut g = Tensor::zeros(self.value(*input).shape());
                    ops::scatter_channels(&mut g, *start, &gy);
                    accumulate(&mut grads, *input, g);
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mode,
                    x_hat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let (dx, dg, db) = ops::batchnorm_backward(x_hat, inv_std, gam.data(), *mode, &gy)?;
                    let pshape = gam.shape().to_vec();
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, Tensor::new(pshape.clone(), dg)?);
                    accumulate(&mut grads, *beta, Tensor::new(pshape, db)?);
                }
                Op::Relu { input } => {
                    let g = ops::relu_backward(self.value(*input), &gy);
                    accumulate(&mut grads, *input, g);
                }
                Op::Softmax { input } => {
                    let g = ops::softmax_channels_backward(&node.value, &gy);
                    accumulate(&mut grads, *input, g);
                }
                Op::WeightedCe { probs, labels, weights } => {
                    let g = loss::weighted_cross_entropy_backward(self.value(*probs), labels, weights, gy.item())?;
                    accumulate(&mut grads, *probs, g);
                }
                Op::Sum { input } => {
                    let g = Tensor::full(self.value(*input).shape(), gy.item());
                    accumulate(&mut grads, *input, g);
                }
                Op::Combine { terms } => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v, Tensor::scalar(c * gy.item()));
                    }
                }
            }
            // only leaves keep their gradient; intermediates are released
        }
        for g in grads.iter().flatten() {
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "backward" });
            }
        }
        Ok(Gradients { grads })
    }
}
