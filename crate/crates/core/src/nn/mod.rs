//! Parameter storage and the forward-pass context shared by every network.
//!
//! Networks are plain descriptions (layer geometry plus parameter names); the
//! values live in a [`ParamSet`] handed to each forward pass. A forward pass is
//! therefore a pure function of its input and the parameter set, and training
//! state is just a few cloneable maps.

mod layers;

use std::cell::RefCell;
use std::collections::BTreeMap;

use bag_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub use layers::{instance_normalize, Conv2d, ConvTranspose2d, Norm, NormKind, NORM_EPS};

use crate::error::{BagError, Result};

/// Named tensors in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| BagError::Structural(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Digest over names, shapes and exact bit patterns of every value.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Bitwise equality of names, shapes and values.
    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((ka, a), (kb, b))| {
                ka == kb
                    && a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Same names and shapes (values may differ).
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Zero-valued set with the same layout.
    pub fn zeros_like(&self) -> ParamSet {
        let tensors = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        ParamSet { tensors }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }
}

/// Registers freshly initialized parameters while a network is being built.
pub struct ParamInit {
    pub params: ParamSet,
    pub buffers: ParamSet,
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            params: ParamSet::new(),
            buffers: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Zero-mean normal weights with variance `gain^2 / fan_in`.
    pub fn scaled_normal(&mut self, name: &str, shape: &[usize], fan_in: usize, gain: f64) -> String {
        let std = gain / (fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite positive std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.params.insert(name, Tensor::parameter(data, shape));
        name.to_string()
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> String {
        let n: usize = shape.iter().product();
        self.params.insert(name, Tensor::parameter(vec![value; n], shape));
        name.to_string()
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> String {
        self.buffers.insert(name, Tensor::full(shape, value));
        name.to_string()
    }

    pub fn finish(self) -> (ParamSet, ParamSet) {
        (self.params, self.buffers)
    }
}

/// Gain for ReLU stacks.
pub const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// Gain for leaky ReLU with the given negative slope.
pub fn leaky_relu_gain(slope: f64) -> f64 {
    (2.0 / (1.0 + slope * slope)).sqrt()
}

/// Everything a forward pass reads, plus the running-statistic updates it
/// produces in training mode.
pub struct Fwd<'a> {
    params: &'a ParamSet,
    buffers: &'a ParamSet,
    training: bool,
    updates: RefCell<Vec<(String, Tensor)>>,
}

impl<'a> Fwd<'a> {
    pub fn new(params: &'a ParamSet, buffers: &'a ParamSet, training: bool) -> Self {
        Self {
            params,
            buffers,
            training,
            updates: RefCell::new(Vec::new()),
        }
    }

    pub fn eval(params: &'a ParamSet, buffers: &'a ParamSet) -> Self {
        Self::new(params, buffers, false)
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, name: &str) -> Result<&'a Tensor> {
        self.params.require(name)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.buffers.require(name)
    }

    pub(crate) fn record_buffer(&self, name: &str, value: Tensor) {
        self.updates.borrow_mut().push((name.to_string(), value));
    }

    /// Buffer set with this pass's recorded updates applied.
    pub fn updated_buffers(&self) -> ParamSet {
        let mut out = self.buffers.clone();
        for (name, value) in self.updates.borrow().iter() {
            out.insert(name.clone(), value.clone());
        }
        out
    }
}
