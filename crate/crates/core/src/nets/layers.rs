//! Parameterised primitives: convolution, batch norm, conv sets, linear.

use super::graph::{ConvGeom, Graph, Var};
use super::params::{BufferId, ParamBuilder, ParamId};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Square kernel with "same" padding for odd `kernel` at stride 1.
    pub fn new(
        vb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        let cin_g = in_channels / groups;
        let weight = vb.kaiming("weight", &[out_channels, cin_g, kernel, kernel], cin_g * kernel * kernel);
        let bias = bias.then(|| vb.constant("bias", &[out_channels], 0.0));
        Self {
            weight,
            bias,
            geom: ConvGeom {
                stride,
                padding: dilation * (kernel - 1) / 2,
                dilation,
                groups,
            },
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.geom)
    }

    /// Effective receptive field of one application: `(k − 1)·d + 1`.
    pub fn receptive_field(&self) -> usize {
        (self.kernel - 1) * self.geom.dilation + 1
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new(vb: &mut ParamBuilder<'_>, channels: usize) -> Self {
        Self::with_gamma(vb, channels, 1.0)
    }

    pub fn with_gamma(vb: &mut ParamBuilder<'_>, channels: usize, gamma: f64) -> Self {
        Self {
            gamma: vb.constant("gamma", &[channels], gamma),
            beta: vb.constant("beta", &[channels], 0.0),
            running_mean: vb.buffer("running_mean", &[channels], 0.0),
            running_var: vb.buffer("running_var", &[channels], 1.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.batch_norm(x, gamma, beta, self.running_mean, self.running_var)
    }
}

/// Convolution, batch normalisation, ReLU.
#[derive(Debug, Clone)]
pub struct ConvSet {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvSet {
    pub fn new(
        vb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        Self {
            conv: Conv2d::new(&mut vb.pp("conv"), in_channels, out_channels, kernel, stride, dilation, 1, false),
            bn: BatchNorm2d::new(&mut vb.pp("bn"), out_channels),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, x)?;
        let y = self.bn.forward(g, y)?;
        Ok(g.relu(y))
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(vb: &mut ParamBuilder<'_>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: vb.kaiming("weight", &[fan_out, fan_in], fan_in),
            bias: vb.constant("bias", &[fan_out], 0.0),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}
