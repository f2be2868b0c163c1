//! Networks and the differentiable tensor machinery they run on.

pub mod blocks;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod graph;
pub mod layers;
pub mod params;
pub mod segmenter;
pub mod tensor;

pub use blocks::{attention_combine, mixed_channel_groups, ANet, DilatedResidualBlock, Jpu, MixedDepthwiseConv, SeLayer};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use classifier::Classifier;
pub use config::{Arch, ClassifierConfig, MixStage, Scale, SegmenterConfig, TensorSpec};
pub use graph::{ConvGeom, Gradients, Graph, Var};
pub use params::{ParamBuilder, ParamId, ParamStore};
pub use segmenter::Segmenter;
pub use tensor::Tensor;

use crate::digest;
use crate::error::Result;

/// Common surface of every trainable model.
pub trait Network {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Probabilities: `[n, 1]` for classifiers, `[n, 1, h, w]` for the segmenter.
    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var>;
    fn input_spec(&self) -> TensorSpec;
    fn config_json(&self) -> serde_json::Value;
    fn kind(&self) -> &'static str;

    fn config_hash(&self) -> String {
        digest::canonical_hash(&self.config_json())
    }

    /// Inference-mode forward pass on a `[n, c, h, w]` batch.
    fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.store(), false);
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, x)?;
        Ok(g.value(y).clone())
    }

    fn param_count(&self) -> usize {
        self.store().param_count()
    }
}
