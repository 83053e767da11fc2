use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

/// A trainable array with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffTensor {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

impl DiffTensor {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of parameters plus named non-trainable buffers
/// (running statistics, power-iteration vectors).
#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    params: Vec<DiffTensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            uid: NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(DiffTensor::new(name, value));
        ParamId(self.params.len() - 1)
    }

    /// Kaiming-uniform (fan-in, ReLU gain): `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn add_kaiming<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn get(&self, id: ParamId) -> &DiffTensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DiffTensor {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[DiffTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [DiffTensor] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(DiffTensor::zero_grad);
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.params.iter_mut().for_each(|p| p.requires_grad = flag);
    }

    pub fn set_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.is_finite() && p.grad.is_finite())
            && self.buffers.values().all(Tensor::is_finite)
    }
}
