//! Primitive layers: thin parameter-holding wrappers over tape ops.
//!
//! Layers own `ParamId` handles into a [`ParamStore`]; a [`Forward`] pass
//! binds those parameters onto the tape on first use.

use rand_chacha::ChaCha12Rng;

use crate::ops::{self, ConvSpec};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::Result;

/// Everything a layer needs to run one recorded forward pass.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub training: bool,
    pub rng: &'a mut ChaCha12Rng,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn bind(&mut self, id: ParamId) -> VarId {
        self.tape.bind(self.store, id)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        init: Init,
    ) -> Self {
        let shape = [
            out_channels,
            in_channels / spec.groups,
            kernel,
            kernel,
        ];
        let weight = store.add(format!("{name}.weight"), init.sample(&shape, rng), true);
        let bias = store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::zeros(&[out_channels]),
            false,
        );
        Conv2d {
            weight,
            bias,
            spec,
            in_channels,
            out_channels,
            kernel,
        }
    }

    /// Standard policy: fan-out-scaled normal for spatial kernels,
    /// truncated normal for 1x1 mixing kernels.
    pub fn default_init(out_channels: usize, kernel: usize, groups: usize) -> Init {
        if kernel > 1 {
            Init::FanOutNormal {
                fan_out: out_channels * kernel * kernel / groups,
            }
        } else {
            Init::TruncNormal { std: 0.02 }
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let w = f.bind(self.weight);
        let b = f.bind(self.bias);
        ops::conv2d(f.tape, x, w, Some(b), self.spec)
    }

    /// Multiply-accumulate count for one forward pass at the given output
    /// spatial size.
    pub fn macs(&self, out_h: usize, out_w: usize) -> u64 {
        let per_pos = self.out_channels * (self.in_channels / self.spec.groups)
            * self.kernel
            * self.kernel;
        per_pos as u64 * (out_h * out_w) as u64
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            crate::tensor::Tensor::full(&[channels], T::one()),
            false,
        );
        let beta = store.add(
            format!("{name}.beta"),
            crate::tensor::Tensor::zeros(&[channels]),
            false,
        );
        LayerNorm {
            gamma,
            beta,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let g = f.bind(self.gamma);
        let b = f.bind(self.beta);
        ops::layer_norm(f.tape, x, g, b, self.eps)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            Init::TruncNormal { std: 0.02 }.sample(&[out_features, in_features], rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            crate::tensor::Tensor::zeros(&[out_features]),
            false,
        );
        Linear {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let w = f.bind(self.weight);
        let b = f.bind(self.bias);
        ops::linear(f.tape, x, w, b)
    }

    pub fn macs(&self, rows: u64) -> u64 {
        rows * (self.in_features * self.out_features) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn conv_layer_registers_weight_and_bias() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let conv = Conv2d::init(
            &mut store,
            &mut rng,
            "stem.conv0",
            3,
            8,
            3,
            ConvSpec::new(2, 1, 1),
            Conv2d::default_init(8, 3, 1),
        );
        assert_eq!(store.entry(conv.weight).name, "stem.conv0.weight");
        assert!(store.entry(conv.weight).decay);
        assert!(!store.entry(conv.bias).decay);
        assert_eq!(store.num_scalars(), 8 * 3 * 9 + 8);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f32>::zeros(&[1, 3, 8, 8]));
        let mut f = Forward {
            tape: &mut tape,
            store: &store,
            training: false,
            rng: &mut rng,
        };
        let y = conv.forward(&mut f, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 8, 4, 4]);
    }

    #[test]
    fn conv_macs_closed_form() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let conv = Conv2d::init(
            &mut store,
            &mut rng,
            "c",
            4,
            4,
            1,
            ConvSpec::pointwise(),
            Init::Zeros,
        );
        // 1x1 conv, C_in = C_out = 4, 8x8 map: 2 * 4 * 4 * 64 = 8192 FLOPs
        assert_eq!(2 * conv.macs(8, 8), 8192);
    }
}
