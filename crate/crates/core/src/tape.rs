//! Reverse-mode autodiff over a flat record of operations.
//!
//! Values live in one append-only arena; an operation validates its operands,
//! runs the forward kernel eagerly, and records what the backward pass will
//! need. Because parameters are inserted once and referenced by id, a weight
//! used at several sites (shared encoders/decoders) accumulates gradient from
//! every use automatically.

use std::sync::Arc;

use crate::error::TensorError;
use crate::ops;
use crate::tensor::{IndexMap, IntTensor, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

enum Node<S: Scalar> {
    Leaf,
    Conv2d {
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        input: ValueId,
        indices: Arc<IndexMap>,
    },
    MaxUnpool2d {
        input: ValueId,
        indices: Arc<IndexMap>,
    },
    Relu {
        input: ValueId,
    },
    Tanh {
        input: ValueId,
    },
    Add {
        lhs: ValueId,
        rhs: ValueId,
    },
    Mul {
        lhs: ValueId,
        rhs: ValueId,
    },
    Scale {
        input: ValueId,
        factor: S,
    },
    ConcatChannels {
        lhs: ValueId,
        rhs: ValueId,
        lhs_channels: usize,
        rhs_channels: usize,
    },
    SumAll {
        input: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        labels: Arc<IntTensor>,
        probs: Tensor<S>,
        valid: usize,
    },
}

struct Entry<S: Scalar> {
    value: Tensor<S>,
    node: Node<S>,
    trainable: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. this value, if any flowed to it.
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Removes and returns the gradient, avoiding a clone.
    pub fn take(&mut self, id: ValueId) -> Option<Tensor<S>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

pub struct Tape<S: Scalar> {
    entries: Vec<Entry<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, node: Node<S>, trainable: bool) -> ValueId {
        self.entries.push(Entry {
            value,
            node,
            trainable,
        });
        ValueId(self.entries.len() - 1)
    }

    fn entry(&self, id: ValueId) -> Result<&Entry<S>, TensorError> {
        self.entries.get(id.0).ok_or(TensorError::NotOnTape {
            id: id.0,
            len: self.entries.len(),
        })
    }

    /// Tensor held by `id`.
    pub fn value(&self, id: ValueId) -> Result<&Tensor<S>, TensorError> {
        Ok(&self.entry(id)?.value)
    }

    /// Records a non-trainable input.
    pub fn constant(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Node::Leaf, false)
    }

    /// Records a trainable leaf (a model parameter).
    pub fn parameter(&mut self, value: Tensor<S>) -> ValueId {
        self.push(value, Node::Leaf, true)
    }

    pub fn conv2d(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        padding: usize,
    ) -> Result<ValueId, TensorError> {
        let bias_t = match bias {
            Some(b) => Some(&self.entry(b)?.value),
            None => None,
        };
        let out = ops::conv2d_forward(
            &self.entry(input)?.value,
            &self.entry(weight)?.value,
            bias_t,
            stride,
            padding,
        )?;
        Ok(self.push(
            out,
            Node::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            false,
        ))
    }

    /// Returns the pooled value and the argmax map for later unpooling.
    pub fn max_pool2d(&mut self, input: ValueId) -> Result<(ValueId, Arc<IndexMap>), TensorError> {
        let (out, idx) = ops::max_pool2d_forward(&self.entry(input)?.value)?;
        let idx = Arc::new(idx);
        let id = self.push(
            out,
            Node::MaxPool2d {
                input,
                indices: Arc::clone(&idx),
            },
            false,
        );
        Ok((id, idx))
    }

    pub fn max_unpool2d(
        &mut self,
        input: ValueId,
        indices: &Arc<IndexMap>,
    ) -> Result<ValueId, TensorError> {
        let out = ops::max_unpool2d_forward(&self.entry(input)?.value, indices)?;
        Ok(self.push(
            out,
            Node::MaxUnpool2d {
                input,
                indices: Arc::clone(indices),
            },
            false,
        ))
    }

    pub fn relu(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::relu(&self.entry(input)?.value);
        Ok(self.push(out, Node::Relu { input }, false))
    }

    pub fn tanh(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::tanh_op(&self.entry(input)?.value);
        Ok(self.push(out, Node::Tanh { input }, false))
    }

    pub fn add(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::add(&self.entry(lhs)?.value, &self.entry(rhs)?.value)?;
        Ok(self.push(out, Node::Add { lhs, rhs }, false))
    }

    pub fn mul(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::mul(&self.entry(lhs)?.value, &self.entry(rhs)?.value)?;
        Ok(self.push(out, Node::Mul { lhs, rhs }, false))
    }

    pub fn scale(&mut self, input: ValueId, factor: S) -> Result<ValueId, TensorError> {
        let out = ops::scale(&self.entry(input)?.value, factor);
        Ok(self.push(out, Node::Scale { input, factor }, false))
    }

    pub fn concat_channels(&mut self, lhs: ValueId, rhs: ValueId) -> Result<ValueId, TensorError> {
        let a = &self.entry(lhs)?.value;
        let b = &self.entry(rhs)?.value;
        let (_, ca, _, _) = a.dims4("concat_channels lhs")?;
        let (_, cb, _, _) = b.dims4("concat_channels rhs")?;
        let out = ops::concat_channels(a, b)?;
        Ok(self.push(
            out,
            Node::ConcatChannels {
                lhs,
                rhs,
                lhs_channels: ca,
                rhs_channels: cb,
            },
            false,
        ))
    }

    pub fn sum_all(&mut self, input: ValueId) -> Result<ValueId, TensorError> {
        let out = ops::sum_all(&self.entry(input)?.value);
        Ok(self.push(out, Node::SumAll { input }, false))
    }

    /// Mean cross entropy over non-void pixels. Also returns the count of
    /// pixels that actually contributed.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: ValueId,
        labels: &IntTensor,
    ) -> Result<(ValueId, usize), TensorError> {
        let res = ops::softmax_cross_entropy_forward(&self.entry(logits)?.value, labels)?;
        let valid = res.valid;
        let id = self.push(
            res.loss,
            Node::SoftmaxCrossEntropy {
                logits,
                labels: Arc::new(labels.clone()),
                probs: res.probs,
                valid,
            },
            false,
        );
        Ok((id, valid))
    }

    /// Reverse pass from a scalar `loss`. Returns a gradient for every value
    /// gradient flowed to; each gradient has the shape of its value.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>, TensorError> {
        let loss_entry = self.entry(loss)?;
        if loss_entry.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                numel: loss_entry.value.numel(),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        // Entries were appended in evaluation order, so a reverse sweep sees
        // every consumer before its producer; grads[i] is final when i is
        // reached.
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            match &self.entries[i].node {
                Node::Leaf => {}
                Node::Conv2d {
                    input,
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let (gin, gw) = ops::conv2d_backward(
                        &self.entries[input.0].value,
                        &self.entries[weight.0].value,
                        &gout,
                        *stride,
                        *padding,
                    )?;
                    accumulate(&mut grads, *input, gin)?;
                    accumulate(&mut grads, *weight, gw)?;
                    if let Some(b) = bias {
                        accumulate(&mut grads, *b, ops::conv2d_backward_bias(&gout)?)?;
                    }
                }
                Node::MaxPool2d { input, indices } => {
                    accumulate(&mut grads, *input, ops::max_pool2d_backward(indices, &gout)?)?;
                }
                Node::MaxUnpool2d { input, indices } => {
                    accumulate(
                        &mut grads,
                        *input,
                        ops::max_unpool2d_backward(indices, &gout)?,
                    )?;
                }
                Node::Relu { input } => {
                    accumulate(
                        &mut grads,
                        *input,
                        ops::relu_backward(&self.entries[input.0].value, &gout)?,
                    )?;
                }
                Node::Tanh { input } => {
                    accumulate(
                        &mut grads,
                        *input,
                        ops::tanh_backward(&self.entries[i].value, &gout)?,
                    )?;
                }
                Node::Add { lhs, rhs } => {
                    accumulate(&mut grads, *lhs, gout.clone())?;
                    accumulate(&mut grads, *rhs, gout.clone())?;
                }
                Node::Mul { lhs, rhs } => {
                    let ga = ops::mul(&gout, &self.entries[rhs.0].value)?;
                    let gb = ops::mul(&gout, &self.entries[lhs.0].value)?;
                    accumulate(&mut grads, *lhs, ga)?;
                    accumulate(&mut grads, *rhs, gb)?;
                }
                Node::Scale { input, factor } => {
                    accumulate(&mut grads, *input, ops::scale(&gout, *factor))?;
                }
                Node::ConcatChannels {
                    lhs,
                    rhs,
                    lhs_channels,
                    rhs_channels,
                } => {
                    let (ga, gb) = ops::split_channels(&gout, *lhs_channels, *rhs_channels)?;
                    accumulate(&mut grads, *lhs, ga)?;
                    accumulate(&mut grads, *rhs, gb)?;
                }
                Node::SumAll { input } => {
                    let g = gout.item()?;
                    let shape = self.entries[input.0].value.shape().to_vec();
                    accumulate(&mut grads, *input, Tensor::full(&shape, g))?;
                }
                Node::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                    valid,
                } => {
                    let g = ops::softmax_cross_entropy_backward(
                        probs,
                        labels,
                        *valid,
                        gout.item()?,
                    )?;
                    accumulate(&mut grads, *logits, g)?;
                }
            }
            grads[i] = Some(gout);
        }

        debug_assert!(self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .all(|(i, e)| match &grads[i] {
                Some(g) => g.shape() == e.value.shape(),
                None => true, // unreachable from the loss: no gradient owed
            }));
        Ok(Gradients { grads })
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Tensor<S>>],
    id: ValueId,
    delta: Tensor<S>,
) -> Result<(), TensorError> {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
