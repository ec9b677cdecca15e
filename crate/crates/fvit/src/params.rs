//! Registry of trainable tensors.
//!
//! Layers hold `ParamId` handles instead of tensors; the store owns the
//! values, their names (which become checkpoint keys) and their weight-decay
//! eligibility. Creation order is deterministic, and everything downstream
//! (optimizer moments, checkpoints, gradient reports) keys off that order.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies. Norm scales/offsets, biases
    /// and Gabor scalars are exempt.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Cast every entry through f64 (used to run f32 models in f64 for
    /// finite-difference work).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    decay: e.decay,
                })
                .collect(),
        }
    }
}

/// Weight initialization used across the model.
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) clipped to two standard deviations by resampling.
    TruncNormal {
        std: f64,
    },
    /// Normal scaled by sqrt(2 / fan_out) for spatial convolutions.
    FanOutNormal {
        fan_out: usize,
    },
}

impl Init {
    pub fn sample<T: Scalar>(&self, shape: &[usize], rng: &mut ChaCha12Rng) -> Tensor<T> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::TruncNormal { std } => {
                Tensor::from_fn(shape, |_| T::from_f64(trunc_normal(rng) * std))
            }
            Init::FanOutNormal { fan_out } => {
                let std = (2.0 / *fan_out as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64(normal(rng) * std))
            }
        }
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple and seedable.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn trunc_normal(rng: &mut ChaCha12Rng) -> f64 {
    loop {
        let v = normal(rng);
        if v.abs() <= 2.0 {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn store_preserves_order_and_names() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("w1", Tensor::zeros(&[2, 2]), true);
        let b = store.add("b1", Tensor::zeros(&[2]), false);
        assert_eq!(store.entry(a).name, "w1");
        assert!(!store.entry(b).decay);
        assert_eq!(store.find("b1"), Some(b));
        assert_eq!(store.num_scalars(), 6);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let t: Tensor<f32> = Init::TruncNormal { std: 0.02 }.sample(&[1000], &mut rng);
        assert!(t.data().iter().all(|v| v.abs() <= 0.04 + 1e-6));
        let mut rng2 = ChaCha12Rng::seed_from_u64(1);
        let t2: Tensor<f32> = Init::TruncNormal { std: 0.02 }.sample(&[1000], &mut rng2);
        assert_eq!(t.data(), t2.data());
    }
}
