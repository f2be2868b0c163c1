//! Composite blocks shared by the classifiers and the segmenter.

use super::graph::{Graph, Var};
use super::layers::{BatchNorm2d, Conv2d, ConvSet, Linear};
use super::params::ParamBuilder;
use crate::error::{PecadError, Result};

/// `y = x′ + F(x)` where `F` is two dilated 3×3 conv/BN/ReLU stacks and `x′`
/// is `x` or a strided 1×1 projection when the channel count or stride changes.
#[derive(Debug, Clone)]
pub struct DilatedResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl DilatedResidualBlock {
    pub fn new(
        vb: &mut ParamBuilder<'_>,
        in_channels: usize,
        out_channels: usize,
        dilation: usize,
        stride: usize,
    ) -> Result<Self> {
        if dilation == 0 || stride == 0 {
            return Err(PecadError::Config("dilation and stride must be >= 1".into()));
        }
        let conv1 = Conv2d::new(&mut vb.pp("conv1"), in_channels, out_channels, 3, stride, dilation, 1, false);
        let bn1 = BatchNorm2d::new(&mut vb.pp("bn1"), out_channels);
        let conv2 = Conv2d::new(&mut vb.pp("conv2"), out_channels, out_channels, 3, 1, dilation, 1, false);
        let bn2 = BatchNorm2d::new(&mut vb.pp("bn2"), out_channels);
        let projection = (in_channels != out_channels || stride != 1).then(|| {
            (
                Conv2d::new(&mut vb.pp("proj"), in_channels, out_channels, 1, stride, 1, 1, false),
                BatchNorm2d::new(&mut vb.pp("proj_bn"), out_channels),
            )
        });
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.in_channels {
            return Err(PecadError::Shape(format!(
                "residual block expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let f = self.conv1.forward(g, x)?;
        let f = self.bn1.forward(g, f)?;
        let f = g.relu(f);
        let f = self.conv2.forward(g, f)?;
        let f = self.bn2.forward(g, f)?;
        let f = g.relu(f);
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                bn.forward(g, s)?
            }
            None => x,
        };
        g.add(shortcut, f)
    }
}

/// Channel split for a mixed depthwise layer: equal groups, remainder to the first.
pub fn mixed_channel_groups(channels: usize, n_groups: usize) -> Vec<usize> {
    let base = channels / n_groups;
    let mut sizes = vec![base; n_groups];
    sizes[0] += channels - base * n_groups;
    sizes
}

/// Depthwise convolution where each channel group uses its own kernel size.
#[derive(Debug, Clone)]
pub struct MixedDepthwiseConv {
    pub groups: Vec<(usize, usize, Conv2d)>,
    pub channels: usize,
}

impl MixedDepthwiseConv {
    pub fn new(vb: &mut ParamBuilder<'_>, channels: usize, kernel_sizes: &[usize], stride: usize) -> Result<Self> {
        if kernel_sizes.is_empty() {
            return Err(PecadError::Config("mixed depthwise needs at least one kernel size".into()));
        }
        if let Some(k) = kernel_sizes.iter().find(|k| *k % 2 == 0) {
            return Err(PecadError::Config(format!("mixed depthwise kernel size {k} is even")));
        }
        if channels < kernel_sizes.len() {
            return Err(PecadError::Config(format!(
                "{channels} channels cannot be split into {} kernel groups",
                kernel_sizes.len()
            )));
        }
        let mut start = 0;
        let mut groups = Vec::with_capacity(kernel_sizes.len());
        for (i, (&k, len)) in kernel_sizes
            .iter()
            .zip(mixed_channel_groups(channels, kernel_sizes.len()))
            .enumerate()
        {
            let conv = Conv2d::new(&mut vb.pp(&format!("k{i}")), len, len, k, stride, 1, len, false);
            groups.push((start, len, conv));
            start += len;
        }
        Ok(Self { groups, channels })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?.1;
        if c != self.channels {
            return Err(PecadError::Shape(format!(
                "mixed depthwise expects {} channels, got {c}",
                self.channels
            )));
        }
        if self.groups.len() == 1 {
            return self.groups[0].2.forward(g, x);
        }
        let mut outs = Vec::with_capacity(self.groups.len());
        for (start, len, conv) in &self.groups {
            let part = g.slice_channels(x, *start, *len)?;
            outs.push(conv.forward(g, part)?);
        }
        g.concat(&outs)
    }
}

/// Squeeze-and-excitation: pooled channel statistics through a bottleneck
/// MLP and a sigmoid gate that rescales each channel.
#[derive(Debug, Clone)]
pub struct SeLayer {
    pub fc1: Linear,
    pub fc2: Linear,
    pub channels: usize,
}

impl SeLayer {
    pub fn new(vb: &mut ParamBuilder<'_>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || reduction > channels {
            return Err(PecadError::Config(format!(
                "SE reduction {reduction} invalid for {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(&mut vb.pp("fc1"), channels, hidden),
            fc2: Linear::new(&mut vb.pp("fc2"), hidden, channels),
            channels,
        })
    }

    pub fn gate(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.global_avg_pool(x)?;
        let s = self.fc1.forward(g, s)?;
        let s = g.relu(s);
        let s = self.fc2.forward(g, s)?;
        Ok(g.sigmoid(s))
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gate = self.gate(g, x)?;
        g.scale_channels(x, gate)
    }
}

/// Joint pyramid upsampling over the two deepest encoder maps.
#[derive(Debug, Clone)]
pub struct Jpu {
    pub branches: Vec<ConvSet>,
    pub width: usize,
}

impl Jpu {
    pub fn new(
        vb: &mut ParamBuilder<'_>,
        down3_channels: usize,
        down4_channels: usize,
        width: usize,
        dilations: &[usize],
    ) -> Result<Self> {
        if dilations.is_empty() || dilations.contains(&0) {
            return Err(PecadError::Config("JPU dilations must be non-empty and >= 1".into()));
        }
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| ConvSet::new(&mut vb.pp(&format!("branch{i}")), down3_channels + down4_channels, width, 3, 1, d))
            .collect();
        Ok(Self { branches, width })
    }

    pub fn out_channels(&self) -> usize {
        self.width * self.branches.len()
    }

    pub fn forward(&self, g: &mut Graph<'_>, down3: Var, down4: Var) -> Result<Var> {
        let (_, _, h3, w3) = g.value(down3).dims4()?;
        let (_, _, h4, w4) = g.value(down4).dims4()?;
        if h4 * 2 != h3 || w4 * 2 != w3 {
            return Err(PecadError::Shape(format!(
                "JPU needs down4 at half of down3: {h3}x{w3} vs {h4}x{w4}"
            )));
        }
        let up = g.upsample_bilinear(down4, h3, w3)?;
        let joint = g.concat(&[down3, up])?;
        let mut outs = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            outs.push(branch.forward(g, joint)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        g.concat(&outs)
    }
}

/// Plain convolutional attention branch ending in a one-channel sigmoid map.
#[derive(Debug, Clone)]
pub struct ANet {
    pub hidden: Vec<ConvSet>,
    pub out: Conv2d,
}

impl ANet {
    pub fn new(vb: &mut ParamBuilder<'_>, in_channels: usize, width: usize, layers: usize) -> Result<Self> {
        if layers < 2 {
            return Err(PecadError::Config("attention branch needs at least 2 layers".into()));
        }
        let hidden = (0..layers - 1)
            .map(|i| {
                let cin = if i == 0 { in_channels } else { width };
                ConvSet::new(&mut vb.pp(&format!("layer{i}")), cin, width, 3, 1, 1)
            })
            .collect();
        let out = Conv2d::new(&mut vb.pp("out"), width, 1, 3, 1, 1, 1, true);
        Ok(Self { hidden, out })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(g, h)?;
        }
        let logits = self.out.forward(g, h)?;
        Ok(g.sigmoid(logits))
    }
}

/// Multiply every feature channel by the one-channel attention map.
pub fn attention_combine(g: &mut Graph<'_>, features: Var, attention: Var) -> Result<Var> {
    g.gate_spatial(features, attention)
}
