//! Recorded forward pass with reverse-mode differentiation.
//!
//! The tape owns every intermediate activation. Ops reference parameters by
//! id; parameter values must not change between the recorded forward and the
//! corresponding `backward` call (single-writer contract).

use super::ops::*;
use super::{Element, Gradients, ParamId, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Index of a value recorded on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Train,
    Eval,
}

enum Op<T> {
    Input {
        wants_grad: bool,
    },
    Conv2d {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    Relu {
        input: NodeId,
    },
    BatchNorm2d {
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        mode: TrainMode,
        ctx: Option<BnCtx<T>>,
    },
    ChannelConcat {
        a: NodeId,
        b: NodeId,
        ca: usize,
        cb: usize,
    },
    SoftmaxChannels {
        input: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
}

/// Momentum of the batch-norm running-statistics update.
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    /// Register an external input (no gradient tracked).
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input { wants_grad: false })
    }

    /// Register an external input whose gradient should be reported.
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Input { wants_grad: true })
    }

    pub fn conv2d(
        &mut self,
        params: &ParamSet<T>,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let out = conv2d_forward(
            &self.values[input.0],
            params.get(weight),
            bias.map(|b| params.get(b)),
            &geom,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        params: &ParamSet<T>,
        input: NodeId,
        weight: ParamId,
        bias: Option<ParamId>,
        geom: ConvGeometry,
    ) -> Result<NodeId> {
        let out = conv_transpose2d_forward(
            &self.values[input.0],
            params.get(weight),
            bias.map(|b| params.get(b)),
            &geom,
        )?;
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    pub fn maxpool2d(&mut self, input: NodeId, geom: ConvGeometry) -> Result<NodeId> {
        let (out, argmax) = maxpool2d_forward(&self.values[input.0], &geom)?;
        Ok(self.push(out, Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = relu_forward(&self.values[input.0]);
        self.push(out, Op::Relu { input })
    }

    /// Batch norm with batch statistics; updates the running statistics in
    /// `params` in place with momentum [`BN_MOMENTUM`].
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_train(
        &mut self,
        params: &mut ParamSet<T>,
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<NodeId> {
        let x = &self.values[input.0];
        let (out, ctx, mean, var) =
            batchnorm2d_forward_train(x, params.get(gamma), params.get(beta))?;
        let mom = T::from_f64(BN_MOMENTUM);
        let one_m = T::one() - mom;
        {
            let rm = params.get_mut(running_mean);
            for (r, m) in rm.data_mut().iter_mut().zip(mean.iter()) {
                *r = one_m * *r + mom * *m;
            }
        }
        {
            let rv = params.get_mut(running_var);
            for (r, v) in rv.data_mut().iter_mut().zip(var.iter()) {
                *r = one_m * *r + mom * *v;
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                mode: TrainMode::Train,
                ctx: Some(ctx),
            },
        ))
    }

    /// Batch norm with stored running statistics (inference mode).
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d_eval(
        &mut self,
        params: &ParamSet<T>,
        input: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<NodeId> {
        let out = batchnorm2d_forward_eval(
            &self.values[input.0],
            params.get(gamma),
            params.get(beta),
            params.get(running_mean),
            params.get(running_var),
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                mode: TrainMode::Eval,
                ctx: None,
            },
        ))
    }

    pub fn channel_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = channel_concat_forward(&self.values[a.0], &self.values[b.0])?;
        let ca = self.values[a.0].shape()[1];
        let cb = self.values[b.0].shape()[1];
        Ok(self.push(out, Op::ChannelConcat { a, b, ca, cb }))
    }

    pub fn softmax_channels(&mut self, input: NodeId) -> Result<NodeId> {
        let out = softmax_channels_forward(&self.values[input.0])?;
        Ok(self.push(out, Op::SoftmaxChannels { input }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = add_forward(&self.values[a.0], &self.values[b.0])?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Reverse-mode sweep from `output` seeded with `output_gradient`.
    ///
    /// Every parameter receives a gradient tensor of its own shape;
    /// parameters not touched by the recorded ops get zeros.
    pub fn backward(
        &self,
        output: NodeId,
        output_gradient: Tensor<T>,
        params: &ParamSet<T>,
    ) -> Result<Gradients<T>> {
        if self.values.is_empty() {
            return Err(Error::InvalidArgument(
                "backward on an empty tape (no forward recorded)".into(),
            ));
        }
        if output.0 >= self.values.len() {
            return Err(Error::InvalidArgument("backward: unknown output node".into()));
        }
        self.values[output.0]
            .require_same_shape(&output_gradient, "backward output gradient")?;

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.values.len()];
        grads[output.0] = Some(output_gradient);
        let mut out = Gradients::zeros_like(params);

        for i in (0..=output.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            match &self.ops[i] {
                Op::Input { wants_grad } => {
                    if *wants_grad {
                        out.by_input.insert(i, grad);
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (gi, gw, gb) = conv2d_backward(
                        &self.values[input.0],
                        params.get(*weight),
                        geom,
                        &grad,
                    )?;
                    accumulate(&mut grads, *input, gi)?;
                    out.accumulate_param(*weight, &gw)?;
                    if let Some(bias) = bias {
                        out.accumulate_param(*bias, &gb)?;
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (gi, gw, gb) = conv_transpose2d_backward(
                        &self.values[input.0],
                        params.get(*weight),
                        geom,
                        &grad,
                    )?;
                    accumulate(&mut grads, *input, gi)?;
                    out.accumulate_param(*weight, &gw)?;
                    if let Some(bias) = bias {
                        out.accumulate_param(*bias, &gb)?;
                    }
                }
                Op::MaxPool2d { input, argmax } => {
                    let gi =
                        maxpool2d_backward(self.values[input.0].shape(), argmax, &grad)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Relu { input } => {
                    let gi = relu_backward(&self.values[input.0], &grad)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::BatchNorm2d {
                    input,
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    mode,
                    ctx,
                } => {
                    let (gi, gg, gb) = match mode {
                        TrainMode::Train => batchnorm2d_backward_train(
                            &self.values[input.0],
                            params.get(*gamma),
                            ctx.as_ref().expect("train-mode bn saved ctx"),
                            &grad,
                        )?,
                        TrainMode::Eval => batchnorm2d_backward_eval(
                            &self.values[input.0],
                            params.get(*gamma),
                            params.get(*running_mean),
                            params.get(*running_var),
                            &grad,
                        )?,
                    };
                    accumulate(&mut grads, *input, gi)?;
                    out.accumulate_param(*gamma, &gg)?;
                    out.accumulate_param(*beta, &gb)?;
                }
                Op::ChannelConcat { a, b, ca, cb } => {
                    let (ga, gb) = channel_concat_backward(*ca, *cb, &grad)?;
                    accumulate(&mut grads, *a, ga)?;
                    accumulate(&mut grads, *b, gb)?;
                }
                Op::SoftmaxChannels { input } => {
                    let gi = softmax_channels_backward(&self.values[i], &grad)?;
                    accumulate(&mut grads, *input, gi)?;
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, grad.clone())?;
                    accumulate(&mut grads, *b, grad)?;
                }
            }
        }
        Ok(out)
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<T: Element>(
    grads: &mut [Option<Tensor<T>>],
    node: NodeId,
    grad: Tensor<T>,
) -> Result<()> {
    match &mut grads[node.0] {
        Some(existing) => existing.axpy(T::one(), &grad),
        slot @ None => {
            *slot = Some(grad);
            Ok(())
        }
    }
}
