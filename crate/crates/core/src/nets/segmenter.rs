//! Attention-gated residual encoder-decoder for lesion masks.
//!
//! The encoder branch runs four stages of two conv sets plus SE followed by a
//! stride-2 conv set, fuses Down3/Down4 with JPU, then decodes through three
//! bilinear ×2 stages (skips from Down2, Down1 and the full-resolution
//! features of the first stage). A separate plain-conv
//! branch predicts a spatial attention map that gates the decoder output
//! before the 1×1 head.

use super::blocks::{attention_combine, ANet, Jpu, SeLayer};
use super::config::{check_divisible, SegmenterConfig, TensorSpec};
use super::graph::{Graph, Var};
use super::layers::{Conv2d, ConvSet};
use super::params::{seeded_rng, ParamBuilder, ParamStore};
use super::Network;
use crate::error::{PecadError, Result};

/// Initial foreground probability encoded in the head bias; lesions are rare.
pub const FOREGROUND_PRIOR: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct DownStage {
    pub set1: ConvSet,
    pub set2: ConvSet,
    pub se: SeLayer,
    pub downsample: ConvSet,
}

impl DownStage {
    fn new(vb: &mut ParamBuilder<'_>, in_c: usize, out_c: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            set1: ConvSet::new(&mut vb.pp("set1"), in_c, out_c, 3, 1, 1),
            set2: ConvSet::new(&mut vb.pp("set2"), out_c, out_c, 3, 1, 1),
            se: SeLayer::new(&mut vb.pp("se"), out_c, reduction)?,
            downsample: ConvSet::new(&mut vb.pp("down"), out_c, out_c, 3, 2, 1),
        })
    }

    /// `(features before downsampling, downsampled output)`.
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let h = self.set1.forward(g, x)?;
        let h = self.set2.forward(g, h)?;
        let h = self.se.forward(g, h)?;
        Ok((h, self.downsample.forward(g, h)?))
    }
}

/// Intermediate maps of one forward pass, exposed for inspection and tests.
#[derive(Debug, Clone, Copy)]
pub struct SegmenterTaps {
    pub down: [Var; 4],
    /// Full-resolution features of the first stage, before its downsampling.
    pub full_res: Var,
    pub jpu: Var,
    pub rux_features: Var,
    pub attention: Var,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    config: SegmenterConfig,
    store: ParamStore,
    pub down: Vec<DownStage>,
    pub jpu: Jpu,
    pub up: Vec<ConvSet>,
    pub anet: ANet,
    pub head: Conv2d,
}

impl Segmenter {
    pub fn build(config: &SegmenterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let mut vb = ParamBuilder::new(&mut store, &mut rng);
        let c = config.encoder_channels;
        let mut down = Vec::with_capacity(4);
        let mut in_c = config.input.channels;
        for (i, &out_c) in c.iter().enumerate() {
            down.push(DownStage::new(&mut vb.pp(&format!("down{}", i + 1)), in_c, out_c, config.se_reduction)?);
            in_c = out_c;
        }
        let jpu = Jpu::new(&mut vb.pp("jpu"), c[2], c[3], config.jpu_width, &config.jpu_dilations)?;
        let up = vec![
            ConvSet::new(&mut vb.pp("up1"), jpu.out_channels() + c[1], c[1], 3, 1, 1),
            ConvSet::new(&mut vb.pp("up2"), c[1] + c[0], c[0], 3, 1, 1),
            ConvSet::new(&mut vb.pp("up3"), 2 * c[0], c[0], 3, 1, 1),
        ];
        let anet = ANet::new(
            &mut vb.pp("anet"),
            config.input.channels,
            config.attention_width,
            config.attention_layers,
        )?;
        let head = Conv2d::new(&mut vb.pp("head"), c[0], 1, 1, 1, 1, 1, true);
        if let Some(b) = head.bias {
            store.param_mut(b).data_mut()[0] = -((1.0 - FOREGROUND_PRIOR) / FOREGROUND_PRIOR).ln();
        }
        Ok(Self {
            config: config.clone(),
            store,
            down,
            jpu,
            up,
            anet,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    /// Runs both branches without combining them.
    pub fn taps(&self, g: &mut Graph<'_>, x: Var) -> Result<SegmenterTaps> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.config.input.channels {
            return Err(PecadError::Shape(format!(
                "segmenter expects {} input channels, got {c}",
                self.config.input.channels
            )));
        }
        check_divisible(h, w)?;
        let (full_res, d1) = self.down[0].forward(g, x)?;
        let (_, d2) = self.down[1].forward(g, d1)?;
        let (_, d3) = self.down[2].forward(g, d2)?;
        let (_, d4) = self.down[3].forward(g, d3)?;
        let j = self.jpu.forward(g, d3, d4)?;

        let u = g.upsample_bilinear(j, h / 4, w / 4)?;
        let u = g.concat(&[u, d2])?;
        let u = self.up[0].forward(g, u)?;
        let u = g.upsample_bilinear(u, h / 2, w / 2)?;
        let u = g.concat(&[u, d1])?;
        let u = self.up[1].forward(g, u)?;
        let u = g.upsample_bilinear(u, h, w)?;
        let u = g.concat(&[u, full_res])?;
        let rux = self.up[2].forward(g, u)?;

        let attention = self.anet.forward(g, x)?;
        Ok(SegmenterTaps {
            down: [d1, d2, d3, d4],
            full_res,
            jpu: j,
            rux_features: rux,
            attention,
        })
    }

    /// Probability map of the encoder-decoder branch alone (no attention gate).
    pub fn forward_rux_only(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let taps = self.taps(g, x)?;
        let logits = self.head.forward(g, taps.rux_features)?;
        Ok(g.sigmoid(logits))
    }
}

impl Network for Segmenter {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let taps = self.taps(g, x)?;
        let gated = attention_combine(g, taps.rux_features, taps.attention)?;
        let logits = self.head.forward(g, gated)?;
        Ok(g.sigmoid(logits))
    }

    fn input_spec(&self) -> TensorSpec {
        self.config.input
    }

    fn config_json(&self) -> serde_json::Value {
        serde_json::to_value(&self.config).expect("config serialises")
    }

    fn kind(&self) -> &'static str {
        "segmenter"
    }
}
