//! Layer descriptions and the stateless single-layer forward entry point.

use super::ops::*;
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d,
    ConvTranspose2d,
    MaxPool2d,
    Relu,
    BatchNorm2d,
    ChannelConcat,
    SoftmaxChannels,
}

/// Static description of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Cardinality of a grouped convolution; 1 everywhere else.
    pub groups: usize,
}

impl LayerSpec {
    pub fn conv2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::Conv2d,
            kernel: (kernel, kernel),
            stride,
            padding,
            in_channels,
            out_channels,
            groups,
        }
    }

    pub fn conv_transpose2d(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        LayerSpec {
            kind: LayerKind::ConvTranspose2d,
            kernel: (kernel, kernel),
            stride,
            padding,
            in_channels,
            out_channels,
            groups: 1,
        }
    }

    pub fn maxpool2d(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kind: LayerKind::MaxPool2d,
            kernel: (kernel, kernel),
            stride,
            padding,
            in_channels: channels,
            out_channels: channels,
            groups: 1,
        }
    }

    pub fn pointwise(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            kernel: (1, 1),
            stride: 1,
            padding: 0,
            in_channels: channels,
            out_channels: channels,
            groups: 1,
        }
    }

    pub fn geometry(&self) -> ConvGeometry {
        ConvGeometry::new(self.kernel, self.stride, self.padding, self.groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidArgument(format!(
                "groups {} must divide in_channels {} and out_channels {}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::InvalidArgument("kernel must be positive".into()));
        }
        Ok(())
    }

    /// Expected weight shape for parameterized kinds.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d => Some(vec![
                self.out_channels,
                self.in_channels / self.groups,
                self.kernel.0,
                self.kernel.1,
            ]),
            LayerKind::ConvTranspose2d => Some(vec![
                self.in_channels,
                self.out_channels / self.groups,
                self.kernel.0,
                self.kernel.1,
            ]),
            _ => None,
        }
    }
}

/// Parameter references for [`layer_forward`].
pub enum LayerParams<'a, T> {
    None,
    Conv {
        weight: &'a Tensor<T>,
        bias: Option<&'a Tensor<T>>,
    },
    BatchNorm {
        gamma: &'a Tensor<T>,
        beta: &'a Tensor<T>,
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
    },
}

/// Run a single layer statelessly. `inputs` carries one tensor for every
/// kind except `ChannelConcat`, which takes two. Batch norm runs with its
/// stored running statistics here; batch-statistics mode lives on the tape.
pub fn layer_forward<T: Element>(
    spec: &LayerSpec,
    inputs: &[&Tensor<T>],
    params: &LayerParams<'_, T>,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let expect_inputs = if spec.kind == LayerKind::ChannelConcat {
        2
    } else {
        1
    };
    if inputs.len() != expect_inputs {
        return Err(Error::InvalidArgument(format!(
            "{:?} expects {} input(s), got {}",
            spec.kind,
            expect_inputs,
            inputs.len()
        )));
    }
    for t in inputs {
        t.require_finite("layer input")?;
    }

    let out = match (spec.kind, params) {
        (LayerKind::Conv2d, LayerParams::Conv { weight, bias }) => {
            check_channels(inputs[0], spec.in_channels)?;
            conv2d_forward(inputs[0], weight, *bias, &spec.geometry())?
        }
        (LayerKind::ConvTranspose2d, LayerParams::Conv { weight, bias }) => {
            check_channels(inputs[0], spec.in_channels)?;
            conv_transpose2d_forward(inputs[0], weight, *bias, &spec.geometry())?
        }
        (LayerKind::MaxPool2d, LayerParams::None) => {
            maxpool2d_forward(inputs[0], &spec.geometry())?.0
        }
        (LayerKind::Relu, LayerParams::None) => relu_forward(inputs[0]),
        (
            LayerKind::BatchNorm2d,
            LayerParams::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
        ) => batchnorm2d_forward_eval(inputs[0], gamma, beta, running_mean, running_var)?,
        (LayerKind::ChannelConcat, LayerParams::None) => {
            channel_concat_forward(inputs[0], inputs[1])?
        }
        (LayerKind::SoftmaxChannels, LayerParams::None) => {
            softmax_channels_forward(inputs[0])?
        }
        (kind, _) => {
            return Err(Error::InvalidArgument(format!(
                "parameter set does not match layer kind {kind:?}"
            )))
        }
    };
    out.require_finite("layer output")?;
    Ok(out)
}

fn check_channels<T: Element>(t: &Tensor<T>, expect: usize) -> Result<()> {
    let (_, c, _, _) = t.dims4()?;
    if c != expect {
        return Err(Error::ShapeMismatch(format!(
            "input has {c} channels, layer expects {expect}"
        )));
    }
    Ok(())
}
