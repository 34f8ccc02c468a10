use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;

/// Index of a trainable tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Named, persistent tensors shared by every graph built during training.
///
/// Non-trainable entries (buffers) are checkpointed but skipped by the
/// optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    fn push(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    /// Mutable access; copies the tensor only if a live graph still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        assert_eq!(value.shape(), self.value(id).shape());
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of scalar parameters in trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// `true` when names, shapes and every value bit agree.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Tensor of i.i.d. normal draws.
pub fn normal_tensor<R: Rng>(rng: &mut R, rows: usize, cols: usize, mean: f64, std: f64) -> Tensor {
    if std == 0.0 {
        return Tensor::full(rows, cols, mean);
    }
    let dist = Normal::new(mean, std).expect("finite std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// He (Kaiming) normal init for a `fan_in × fan_out` weight matrix.
pub fn he_normal<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    normal_tensor(rng, fan_in, fan_out, 0.0, (2.0 / fan_in as f64).sqrt())
}

/// Glorot (Xavier) uniform init.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::new(
        fan_in,
        fan_out,
        (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect(),
    )
}
