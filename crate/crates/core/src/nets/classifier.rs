//! Slice-level PE classifiers: dilated residual network and MixNet.

use super::blocks::{DilatedResidualBlock, MixedDepthwiseConv};
use super::config::{Arch, ClassifierConfig, TensorSpec};
use super::graph::{Graph, Var};
use super::layers::{BatchNorm2d, Conv2d, ConvSet, Linear};
use super::params::{seeded_rng, ParamBuilder, ParamStore};
use super::Network;
use crate::error::{PecadError, Result};

#[derive(Debug, Clone)]
pub struct DrnBody {
    pub stem: ConvSet,
    pub blocks: Vec<DilatedResidualBlock>,
    pub head: Linear,
}

impl DrnBody {
    fn new(vb: &mut ParamBuilder<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let stem_c = cfg.scaled(cfg.stem_channels);
        let stem = ConvSet::new(&mut vb.pp("stem"), cfg.input.channels, stem_c, 3, 2, 1);
        let mut blocks = Vec::new();
        let mut in_c = stem_c;
        for (stage, ((&width, &n_blocks), (&dilation, stride))) in cfg
            .stage_channels
            .iter()
            .zip(&cfg.stage_blocks)
            .zip(cfg.dilation_schedule.iter().zip(cfg.drn_strides()))
            .enumerate()
        {
            let out_c = cfg.scaled(width);
            for b in 0..n_blocks {
                let s = if b == 0 { stride } else { 1 };
                blocks.push(DilatedResidualBlock::new(
                    &mut vb.pp(&format!("stage{stage}.block{b}")),
                    in_c,
                    out_c,
                    dilation,
                    s,
                )?);
                in_c = out_c;
            }
        }
        let head = Linear::new(&mut vb.pp("head"), in_c, 1);
        Ok(Self { stem, blocks, head })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, pooled)
    }
}

/// Expand 1×1 → mixed depthwise → project 1×1, residual when shapes allow.
#[derive(Debug, Clone)]
pub struct InvertedBottleneck {
    pub expand: Option<ConvSet>,
    pub mixed: MixedDepthwiseConv,
    pub mixed_bn: BatchNorm2d,
    pub project: Conv2d,
    pub project_bn: BatchNorm2d,
    pub residual: bool,
}

impl InvertedBottleneck {
    fn new(
        vb: &mut ParamBuilder<'_>,
        in_c: usize,
        out_c: usize,
        expansion: usize,
        stride: usize,
        kernels: &[usize],
    ) -> Result<Self> {
        let mid = in_c * expansion;
        let expand = (expansion != 1).then(|| ConvSet::new(&mut vb.pp("expand"), in_c, mid, 1, 1, 1));
        let mixed = MixedDepthwiseConv::new(&mut vb.pp("mixed"), mid, kernels, stride)?;
        let mixed_bn = BatchNorm2d::new(&mut vb.pp("mixed_bn"), mid);
        let project = Conv2d::new(&mut vb.pp("project"), mid, out_c, 1, 1, 1, 1, false);
        let residual = stride == 1 && in_c == out_c;
        // residual blocks start as the identity
        let gamma = if residual { 0.0 } else { 1.0 };
        let project_bn = BatchNorm2d::with_gamma(&mut vb.pp("project_bn"), out_c, gamma);
        Ok(Self {
            expand,
            mixed,
            mixed_bn,
            project,
            project_bn,
            residual,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = match &self.expand {
            Some(e) => e.forward(g, x)?,
            None => x,
        };
        h = self.mixed.forward(g, h)?;
        h = self.mixed_bn.forward(g, h)?;
        h = g.relu(h);
        h = self.project.forward(g, h)?;
        h = self.project_bn.forward(g, h)?;
        if self.residual {
            h = g.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub struct MixNetBody {
    pub stem: ConvSet,
    pub blocks: Vec<InvertedBottleneck>,
    pub head_conv: ConvSet,
    pub head: Linear,
}

impl MixNetBody {
    fn new(vb: &mut ParamBuilder<'_>, cfg: &ClassifierConfig) -> Result<Self> {
        let stem_c = cfg.scaled(cfg.stem_channels);
        let stem = ConvSet::new(&mut vb.pp("stem"), cfg.input.channels, stem_c, 3, 2, 1);
        let mut blocks = Vec::new();
        let mut in_c = stem_c;
        for (si, stage) in cfg.mix_stages.iter().enumerate() {
            let out_c = cfg.scaled(stage.channels);
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                blocks.push(InvertedBottleneck::new(
                    &mut vb.pp(&format!("stage{si}.block{b}")),
                    in_c,
                    out_c,
                    stage.expansion,
                    stride,
                    &cfg.kernel_size_groups,
                )?);
                in_c = out_c;
            }
        }
        let head_c = cfg.head_channels;
        let head_conv = ConvSet::new(&mut vb.pp("head_conv"), in_c, head_c, 1, 1, 1);
        let head = Linear::new(&mut vb.pp("head"), head_c, 1);
        Ok(Self {
            stem,
            blocks,
            head_conv,
            head,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
        }
        h = self.head_conv.forward(g, h)?;
        let pooled = g.global_avg_pool(h)?;
        self.head.forward(g, pooled)
    }
}

#[derive(Debug, Clone)]
pub enum ClassifierBody {
    Drn(DrnBody),
    MixNet(MixNetBody),
}

/// A classifier emitting one PE probability per image.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ClassifierConfig,
    body: ClassifierBody,
    store: ParamStore,
}

impl Classifier {
    pub fn build(config: &ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut vb = ParamBuilder::new(&mut store, &mut rng);
        let body = match config.arch {
            Arch::Drn => ClassifierBody::Drn(DrnBody::new(&mut vb.pp("drn"), config)?),
            Arch::Mixnet => ClassifierBody::MixNet(MixNetBody::new(&mut vb.pp("mixnet"), config)?),
        };
        Ok(Self {
            config: config.clone(),
            body,
            store,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn body(&self) -> &ClassifierBody {
        &self.body
    }

    /// Pre-sigmoid logits `[n, 1]`.
    pub fn logits(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let spec = self.config.input;
        if (c, h, w) != (spec.channels, spec.height, spec.width) {
            return Err(PecadError::Shape(format!(
                "classifier expects {}x{}x{}, got {c}x{h}x{w}",
                spec.channels, spec.height, spec.width
            )));
        }
        match &self.body {
            ClassifierBody::Drn(b) => b.forward(g, x),
            ClassifierBody::MixNet(b) => b.forward(g, x),
        }
    }
}

impl Network for Classifier {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let logits = self.logits(g, x)?;
        Ok(g.sigmoid(logits))
    }

    fn input_spec(&self) -> TensorSpec {
        self.config.input
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }

    fn kind(&self) -> &'static str {
        match self.config.arch {
            Arch::Drn => "drn",
            Arch::Mixnet => "mixnet",
        }
    }
}
