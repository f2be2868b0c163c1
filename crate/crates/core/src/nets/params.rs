//! Named parameter and buffer storage shared by every network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

/// Trainable parameters plus non-trainable buffers (batch-norm running statistics).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Tensor>,
    param_names: Vec<String>,
    buffers: Vec<Tensor>,
    buffer_names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: String, value: Tensor) -> ParamId {
        self.params.push(value);
        self.param_names.push(name);
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: String, value: Tensor) -> BufferId {
        self.buffers.push(value);
        self.buffer_names.push(name);
        BufferId(self.buffers.len() - 1)
    }

    pub fn param(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.param_names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrite values (not layout) from another store built with the same architecture.
    pub fn load_values(&mut self, other: &ParamStore) -> bool {
        let same_layout = self.param_names == other.param_names
            && self.buffer_names == other.buffer_names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape())
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.shape() == b.shape());
        if same_layout {
            self.params.clone_from(&other.params);
            self.buffers.clone_from(&other.buffers);
        }
        same_layout
    }

    pub(crate) fn from_parts(
        param_names: Vec<String>,
        params: Vec<Tensor>,
        buffer_names: Vec<String>,
        buffers: Vec<Tensor>,
    ) -> Self {
        Self {
            params,
            param_names,
            buffers,
            buffer_names,
        }
    }
}

/// Hierarchical builder that registers parameters with seeded initialisation,
/// in the spirit of a var-builder with `pp` prefixes.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// He-normal initialisation with the given fan-in.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal.sample(self.rng)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product matches");
        let name = self.full_name(name);
        self.store.add_param(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let name = self.full_name(name);
        self.store.add_param(name, Tensor::full(shape, value))
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> BufferId {
        let name = self.full_name(name);
        self.store.add_buffer(name, Tensor::full(shape, value))
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
