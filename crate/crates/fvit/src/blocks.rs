//! Composite layers: convolutional positional embedding, the learnable
//! Gabor token mixer, the dual-path feed-forward network, and the residual
//! block that stacks them.
//!
//! The block computes
//!
//! ```text
//! x = cpe(x_in) + x_in
//! y = drop_path(lgf(norm(x))) + x
//! z = drop_path(ffn(norm(y))) + y
//! ```
//!
//! with stochastic depth applied to the mixer and feed-forward branches
//! only.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::gabor::{init_gabor_bank, softplus_inverse, LambdaGradMode};
use crate::nn::{Conv2d, Forward, LayerNorm};
use crate::ops::{self, ConvSpec};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::VarId;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Residual depthwise 3x3 positional embedding.
#[derive(Debug, Clone)]
pub struct Cpe {
    pub dw: Conv2d,
}

impl Cpe {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        let dw = Conv2d::init(
            store,
            rng,
            name,
            channels,
            channels,
            3,
            ConvSpec::new(1, 1, channels),
            Conv2d::default_init(channels, 3, channels),
        );
        Cpe { dw }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let conv = self.dw.forward(f, x)?;
        ops::add(f.tape, conv, x)
    }
}

/// Token mixer: a depthwise convolution whose per-channel kernels are
/// generated from five trainable Gabor scalars, followed by a learned 1x1
/// channel mix. One parameter set per channel keeps the mixing cost linear
/// in the token count.
#[derive(Debug, Clone)]
pub struct LgfLayer {
    pub lambda_raw: ParamId,
    pub theta: ParamId,
    pub psi: ParamId,
    pub gamma_raw: ParamId,
    pub sigma_raw: ParamId,
    pub kernel_size: usize,
    pub padding: usize,
    pub mix: Conv2d,
    pub channels: usize,
    /// Which wavelength derivative the backward pass uses; the misprinted
    /// variant exists only for the executable-erratum check.
    pub lambda_grad_mode: LambdaGradMode,
}

impl LgfLayer {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        if kernel_size == 0 || kernel_size % 2 == 0 {
            return Err(Error::Parameter(format!(
                "gabor kernel size must be odd and positive, got {kernel_size}"
            )));
        }
        let bank = init_gabor_bank::<T>(channels, kernel_size, rng.gen());
        let vec_of = |f: &dyn Fn(usize) -> T| -> Tensor<T> {
            Tensor::from_fn(&[channels], |c| f(c))
        };
        // lambda/gamma/sigma live pre-softplus so gradient steps cannot
        // push them out of their positive domain.
        let lambda_raw = store.add(
            format!("{name}.lambda_raw"),
            vec_of(&|c| softplus_inverse(bank[c].lambda)),
            false,
        );
        let theta = store.add(format!("{name}.theta"), vec_of(&|c| bank[c].theta), false);
        let psi = store.add(format!("{name}.psi"), vec_of(&|c| bank[c].psi), false);
        let gamma_raw = store.add(
            format!("{name}.gamma_raw"),
            vec_of(&|c| softplus_inverse(bank[c].gamma)),
            false,
        );
        let sigma_raw = store.add(
            format!("{name}.sigma_raw"),
            vec_of(&|c| softplus_inverse(bank[c].sigma)),
            false,
        );
        let mix = Conv2d::init(
            store,
            rng,
            &format!("{name}.mix"),
            channels,
            channels,
            1,
            ConvSpec::pointwise(),
            Init::TruncNormal { std: 0.02 },
        );
        Ok(LgfLayer {
            lambda_raw,
            theta,
            psi,
            gamma_raw,
            sigma_raw,
            kernel_size,
            padding: (kernel_size - 1) / 2,
            mix,
            channels,
            lambda_grad_mode: LambdaGradMode::Corrected,
        })
    }

    /// The depthwise Gabor stage alone, without the channel mix.
    pub fn forward_depthwise<T: Scalar>(
        &self,
        f: &mut Forward<'_, T>,
        x: VarId,
    ) -> Result<VarId> {
        let l = f.bind(self.lambda_raw);
        let t = f.bind(self.theta);
        let p = f.bind(self.psi);
        let g = f.bind(self.gamma_raw);
        let s = f.bind(self.sigma_raw);
        ops::gabor_dwconv(
            f.tape,
            x,
            l,
            t,
            p,
            g,
            s,
            self.kernel_size,
            self.padding,
            self.lambda_grad_mode,
        )
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let mixed = self.forward_depthwise(f, x)?;
        self.mix.forward(f, mixed)
    }
}

/// Dual-path feed-forward network.
///
/// Channels split into two equal groups. Each path expands with a 1x1
/// convolution, applies a depthwise 3x3 and projects back to its half
/// width; the projected output of path one is cross-projected and injected
/// into path two's input, giving the cascaded information flow. Outputs
/// are concatenated back to the full width.
#[derive(Debug, Clone)]
pub struct Dpffn {
    pub expand1: Conv2d,
    pub expand2: Conv2d,
    pub dw1: Conv2d,
    pub dw2: Conv2d,
    pub cross: Conv2d,
    pub proj1: Conv2d,
    pub proj2: Conv2d,
    pub channels: usize,
    pub hidden: usize,
}

impl Dpffn {
    /// Hidden width per path for a given expansion ratio.
    pub fn hidden_per_path(channels: usize, expansion: f64) -> usize {
        ((channels as f64 * expansion).round() as usize) / 2
    }

    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        expansion: f64,
    ) -> Result<Self> {
        if channels % 2 != 0 {
            return Err(Error::Config(format!(
                "dual-path split needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        let hidden = Self::hidden_per_path(channels, expansion);
        if hidden == 0 {
            return Err(Error::Config(format!(
                "expansion {expansion} gives an empty hidden width at C={channels}"
            )));
        }
        let pw = |store: &mut ParamStore<T>, rng: &mut ChaCha12Rng, n: String, ci, co| {
            Conv2d::init(
                store,
                rng,
                &n,
                ci,
                co,
                1,
                ConvSpec::pointwise(),
                Init::TruncNormal { std: 0.02 },
            )
        };
        let expand1 = pw(store, rng, format!("{name}.expand1"), half, hidden);
        let dw1 = Conv2d::init(
            store,
            rng,
            &format!("{name}.dw1"),
            hidden,
            hidden,
            3,
            ConvSpec::new(1, 1, hidden),
            Conv2d::default_init(hidden, 3, hidden),
        );
        let proj1 = pw(store, rng, format!("{name}.proj1"), hidden, half);
        let cross = pw(store, rng, format!("{name}.cross"), half, half);
        let expand2 = pw(store, rng, format!("{name}.expand2"), half, hidden);
        let dw2 = Conv2d::init(
            store,
            rng,
            &format!("{name}.dw2"),
            hidden,
            hidden,
            3,
            ConvSpec::new(1, 1, hidden),
            Conv2d::default_init(hidden, 3, hidden),
        );
        let proj2 = pw(store, rng, format!("{name}.proj2"), hidden, half);
        Ok(Dpffn {
            expand1,
            expand2,
            dw1,
            dw2,
            cross,
            proj1,
            proj2,
            channels,
            hidden,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let c = f.tape.value(x).shape()[1];
        if c != self.channels {
            return Err(Error::Dimension(format!(
                "dual-path input channel axis C={} does not match layer C={}",
                c, self.channels
            )));
        }
        let half = c / 2;
        let x1 = ops::narrow_channels(f.tape, x, 0, half)?;
        let x2 = ops::narrow_channels(f.tape, x, half, half)?;

        let h1 = self.expand1.forward(f, x1)?;
        let h1 = ops::gelu(f.tape, h1);
        let h1 = self.dw1.forward(f, h1)?;
        let h1 = ops::gelu(f.tape, h1);
        let y1 = self.proj1.forward(f, h1)?;

        let carried = self.cross.forward(f, y1)?;
        let x2 = ops::add(f.tape, x2, carried)?;
        let h2 = self.expand2.forward(f, x2)?;
        let h2 = ops::gelu(f.tape, h2);
        let h2 = self.dw2.forward(f, h2)?;
        let h2 = ops::gelu(f.tape, h2);
        let y2 = self.proj2.forward(f, h2)?;

        ops::concat_channels(f.tape, y1, y2)
    }

    /// Closed-form parameter count of the seven weight tensors plus biases.
    pub fn param_count_formula(channels: usize, expansion: f64) -> usize {
        let half = channels / 2;
        let h = Self::hidden_per_path(channels, expansion);
        let expands = 2 * (half * h + h);
        let dws = 2 * (9 * h + h);
        let cross = half * half + half;
        let projs = 2 * (h * half + half);
        expands + dws + cross + projs
    }
}

/// Plain two-layer 1x1 feed-forward control used by the ablation command.
#[derive(Debug, Clone)]
pub struct PlainFfn {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
    pub hidden: usize,
}

impl PlainFfn {
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        hidden: usize,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("ffn hidden width must be positive".into()));
        }
        let fc1 = Conv2d::init(
            store,
            rng,
            &format!("{name}.fc1"),
            channels,
            hidden,
            1,
            ConvSpec::pointwise(),
            Init::TruncNormal { std: 0.02 },
        );
        let fc2 = Conv2d::init(
            store,
            rng,
            &format!("{name}.fc2"),
            hidden,
            channels,
            1,
            ConvSpec::pointwise(),
            Init::TruncNormal { std: 0.02 },
        );
        Ok(PlainFfn { fc1, fc2, hidden })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        let h = self.fc1.forward(f, x)?;
        let h = ops::gelu(f.tape, h);
        self.fc2.forward(f, h)
    }

    pub fn param_count_formula(channels: usize, hidden: usize) -> usize {
        channels * hidden + hidden + hidden * channels + channels
    }
}

#[derive(Debug, Clone)]
pub enum Ffn {
    Dual(Dpffn),
    Plain(PlainFfn),
}

impl Ffn {
    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        match self {
            Ffn::Dual(d) => d.forward(f, x),
            Ffn::Plain(p) => p.forward(f, x),
        }
    }
}

/// How the plain-FFN control chooses its hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlainWidth {
    /// Same per-path hidden budget as the dual-path network: round(rC)/2.
    HalfExpansion,
    /// Width solved so the control's parameter count matches the dual-path
    /// network's within 1%.
    MatchDualParams,
}

/// Which feed-forward variant blocks are built with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnKind {
    Dual,
    Plain { width: PlainWidth },
}

/// Hidden width used by a plain-FFN control at the given geometry.
pub fn plain_ffn_width(channels: usize, expansion: f64, width: PlainWidth) -> usize {
    match width {
        PlainWidth::HalfExpansion => Dpffn::hidden_per_path(channels, expansion),
        PlainWidth::MatchDualParams => {
            let target = Dpffn::param_count_formula(channels, expansion) as f64;
            (((target - channels as f64) / (2 * channels + 1) as f64).round() as usize).max(1)
        }
    }
}

#[derive(Debug, Clone)]
pub struct BfvBlock {
    pub cpe: Cpe,
    pub norm1: LayerNorm,
    pub lgf: LgfLayer,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
    pub drop_path: f64,
}

impl BfvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        kernel_size: usize,
        expansion: f64,
        drop_path: f64,
        ffn_kind: FfnKind,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&drop_path) {
            return Err(Error::Config(format!(
                "drop path rate must be in [0, 1), got {drop_path}"
            )));
        }
        let cpe = Cpe::init(store, rng, &format!("{name}.cpe"), channels);
        let norm1 = LayerNorm::init(store, &format!("{name}.norm1"), channels);
        let lgf = LgfLayer::init(store, rng, &format!("{name}.lgf"), channels, kernel_size)?;
        let norm2 = LayerNorm::init(store, &format!("{name}.norm2"), channels);
        let ffn = match ffn_kind {
            FfnKind::Dual => Ffn::Dual(Dpffn::init(
                store,
                rng,
                &format!("{name}.dpffn"),
                channels,
                expansion,
            )?),
            FfnKind::Plain { width } => Ffn::Plain(PlainFfn::init(
                store,
                rng,
                &format!("{name}.ffn"),
                channels,
                plain_ffn_width(channels, expansion, width),
            )?),
        };
        Ok(BfvBlock {
            cpe,
            norm1,
            lgf,
            norm2,
            ffn,
            drop_path,
        })
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x_in: VarId) -> Result<VarId> {
        let x = self.cpe.forward(f, x_in)?;

        let normed = self.norm1.forward(f, x)?;
        let mixed = self.lgf.forward(f, normed)?;
        let mixed = self.apply_drop_path(f, mixed)?;
        let y = ops::add(f.tape, mixed, x)?;

        let normed = self.norm2.forward(f, y)?;
        let fused = self.ffn.forward(f, normed)?;
        let fused = self.apply_drop_path(f, fused)?;
        ops::add(f.tape, fused, y)
    }

    fn apply_drop_path<T: Scalar>(&self, f: &mut Forward<'_, T>, x: VarId) -> Result<VarId> {
        ops::drop_path(f.tape, x, self.drop_path, f.training, f.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;

    fn forward_ctx<'a, T: Scalar>(
        tape: &'a mut Tape<T>,
        store: &'a ParamStore<T>,
        training: bool,
        rng: &'a mut ChaCha12Rng,
    ) -> Forward<'a, T> {
        Forward {
            tape,
            store,
            training,
            rng,
        }
    }

    fn rand_map(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_param(store: &mut ParamStore<f64>, id: ParamId) {
        let t = store.value(id).clone().map(|_| 0.0);
        *store.value_mut(id) = t;
    }

    #[test]
    fn cpe_with_zero_weights_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let cpe = Cpe::init(&mut store, &mut rng, "cpe", 4);
        zero_param(&mut store, cpe.dw.weight);
        let mut tape = Tape::new();
        let xt = rand_map(&mut rng, &[2, 4, 5, 5]);
        let x = tape.leaf(xt.clone());
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = cpe.forward(&mut f, x).unwrap();
        assert_eq!(tape.value(y).data(), xt.data());
    }

    #[test]
    fn cpe_constant_field_scales_interior_by_kernel_sum() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cpe = Cpe::init(&mut store, &mut rng, "cpe", 2);
        let s: f64 = store.value(cpe.dw.weight).data()[..9].iter().sum();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 6, 6], 3.0));
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = cpe.forward(&mut f, x).unwrap();
        // interior pixels of channel 0: input * (1 + s)
        let v = tape.value(y).at4(0, 0, 3, 3);
        assert!((v - 3.0 * (1.0 + s)).abs() < 1e-12);
    }

    #[test]
    fn cpe_matches_explicit_composition() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let cpe = Cpe::init(&mut store, &mut rng, "cpe", 3);
        let xt = rand_map(&mut rng, &[2, 3, 4, 4]);

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let got = cpe.forward(&mut f, x).unwrap();
        let got = tape.value(got).clone();

        // independent composition through raw ops
        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(xt);
        let w = tape2.leaf(store.value(cpe.dw.weight).clone());
        let b = tape2.leaf(store.value(cpe.dw.bias).clone());
        let conv = ops::conv2d(&mut tape2, x2, w, Some(b), ConvSpec::new(1, 1, 3)).unwrap();
        let expect = ops::add(&mut tape2, conv, x2).unwrap();
        assert_eq!(got.data(), tape2.value(expect).data());
    }

    #[test]
    fn lgf_with_unit_kernels_and_identity_mix_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let lgf = LgfLayer::init(&mut store, &mut rng, "lgf", 3, 1).unwrap();
        // psi = 0 makes every 1x1 kernel cos(0) = 1
        *store.value_mut(lgf.psi) = Tensor::zeros(&[3]);
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        *store.value_mut(lgf.mix.weight) = eye;
        let mut tape = Tape::new();
        let xt = rand_map(&mut rng, &[2, 3, 4, 4]);
        let x = tape.leaf(xt.clone());
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = lgf.forward(&mut f, x).unwrap();
        assert!(max_abs_diff(tape.value(y), &xt) < 1e-12);
    }

    #[test]
    fn lgf_impulse_response_reproduces_the_kernel() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let k = 5;
        let lgf = LgfLayer::init(&mut store, &mut rng, "lgf", 1, k).unwrap();
        *store.value_mut(lgf.psi) = Tensor::zeros(&[1]);
        *store.value_mut(lgf.mix.weight) = Tensor::full(&[1, 1, 1, 1], 1.0);

        let mut delta = Tensor::zeros(&[1, 1, k, k]);
        let half = (k - 1) / 2;
        delta.data_mut()[half * k + half] = 1.0;
        let mut tape = Tape::new();
        let x = tape.leaf(delta);
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = lgf.forward(&mut f, x).unwrap();

        let p = crate::gabor::GaborParams {
            lambda: crate::gabor::softplus(store.value(lgf.lambda_raw).data()[0]),
            theta: store.value(lgf.theta).data()[0],
            psi: 0.0,
            gamma: crate::gabor::softplus(store.value(lgf.gamma_raw).data()[0]),
            sigma: crate::gabor::softplus(store.value(lgf.sigma_raw).data()[0]),
        };
        let kern = crate::gabor::build_kernel(k, &p).unwrap();
        // cross-correlation point-reflects the kernel; psi = 0 makes it
        // symmetric, so the response equals the kernel itself.
        let out = tape.value(y);
        for i in 0..k * k {
            assert!((out.data()[i] - kern.data()[i]).abs() < 1e-12, "entry {i}");
        }
    }

    #[test]
    fn lgf_parameter_gradients_match_differences() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let c = 3;
        let lgf = LgfLayer::init(&mut store, &mut rng, "lgf", c, 3).unwrap();
        let xt = rand_map(&mut rng, &[1, c, 6, 6]);
        let proj = rand_map(&mut rng, &[1, c, 6, 6]);

        let run = |store: &ParamStore<f64>| -> (f64, Vec<(ParamId, Tensor<f64>)>) {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let mut f = forward_ctx(&mut tape, store, false, &mut rng);
            let y = lgf.forward(&mut f, x).unwrap();
            let p = tape.leaf(proj.clone());
            let weighted = ops::mul(&mut tape, y, p).unwrap();
            let loss = ops::sum(&mut tape, weighted);
            let l = tape.value(loss).data()[0];
            let grads = tape.backward(loss).unwrap();
            let got = tape
                .bound_params()
                .iter()
                .map(|&(pid, var)| (pid, grads.var(var).cloned().unwrap()))
                .collect();
            (l, got)
        };
        let (_, grads) = run(&store);
        let h = 1e-6;
        for (pid, g) in grads {
            for i in 0..g.numel() {
                let mut plus = store.clone();
                plus.value_mut(pid).data_mut()[i] += h;
                let mut minus = store.clone();
                minus.value_mut(pid).data_mut()[i] -= h;
                let fd = (run(&plus).0 - run(&minus).0) / (2.0 * h);
                let a = g.data()[i];
                assert!(
                    (a - fd).abs() / a.abs().max(fd.abs()).max(1.0) < 1e-6,
                    "{} [{i}]: analytic {a} vs fd {fd}",
                    store.entry(pid).name
                );
            }
        }
    }

    #[test]
    fn dpffn_zero_weights_give_zero_output() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let ffn = Dpffn::init(&mut store, &mut rng, "ffn", 4, 3.0).unwrap();
        for conv in [
            &ffn.expand1,
            &ffn.expand2,
            &ffn.dw1,
            &ffn.dw2,
            &ffn.cross,
            &ffn.proj1,
            &ffn.proj2,
        ] {
            zero_param(&mut store, conv.weight);
        }
        let mut tape = Tape::new();
        let x = tape.leaf(rand_map(&mut rng, &[1, 4, 3, 3]));
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = ffn.forward(&mut f, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dpffn_rejects_odd_channels() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        assert!(matches!(
            Dpffn::init(&mut store, &mut rng, "ffn", 5, 3.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zeroed_cross_projection_decouples_the_paths() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let ffn = Dpffn::init(&mut store, &mut rng, "ffn", 6, 3.0).unwrap();
        zero_param(&mut store, ffn.cross.weight);
        zero_param(&mut store, ffn.cross.bias);

        let base = rand_map(&mut rng, &[1, 6, 4, 4]);
        let mut perturbed = base.clone();
        // touch only the first half of the channels
        perturbed.data_mut()[0] += 0.5;
        let run = |xt: &Tensor<f64>| {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
            let y = ffn.forward(&mut f, x).unwrap();
            tape.value(y).clone()
        };
        let ya = run(&base);
        let yb = run(&perturbed);
        let plane = 16;
        // first-half outputs move, second-half outputs are bitwise equal
        let first_moved = (0..3 * plane).any(|i| ya.data()[i] != yb.data()[i]);
        assert!(first_moved);
        for i in 3 * plane..6 * plane {
            assert_eq!(ya.data()[i], yb.data()[i], "second path leaked at {i}");
        }
    }

    #[test]
    fn dpffn_parameter_count_matches_closed_form() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let before = store.num_scalars();
        let _ffn = Dpffn::init(&mut store, &mut rng, "ffn", 80, 3.0).unwrap();
        let got = store.num_scalars() - before;
        assert_eq!(got, Dpffn::param_count_formula(80, 3.0));
        // spelled out: 2*(40*120+120) + 2*(10*120) + (40*40+40) + 2*(120*40+40)
        assert_eq!(got, 9840 + 2400 + 1640 + 9680);
    }

    #[test]
    fn block_is_identity_when_branches_are_dead() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let block =
            BfvBlock::init(&mut store, &mut rng, "b", 4, 1, 3.0, 0.0, FfnKind::Dual).unwrap();
        zero_param(&mut store, block.cpe.dw.weight);
        let Ffn::Dual(d) = &block.ffn else { unreachable!() };
        zero_param(&mut store, d.proj1.weight);
        zero_param(&mut store, d.proj1.bias);
        zero_param(&mut store, d.proj2.weight);
        zero_param(&mut store, d.proj2.bias);
        zero_param(&mut store, block.lgf.mix.weight);
        *store.value_mut(block.lgf.psi) = Tensor::zeros(&[4]);

        let mut tape = Tape::new();
        let xt = rand_map(&mut rng, &[2, 4, 5, 5]);
        let x = tape.leaf(xt.clone());
        let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
        let y = block.forward(&mut f, x).unwrap();
        assert!(max_abs_diff(tape.value(y), &xt) < 1e-12);
    }

    #[test]
    fn full_drop_rate_leaves_only_the_cpe_residual() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let mut block =
            BfvBlock::init(&mut store, &mut rng, "b", 4, 3, 3.0, 0.0, FfnKind::Dual).unwrap();
        block.drop_path = 1.0; // allowed only on a hand-built block, as here
        let xt = rand_map(&mut rng, &[2, 4, 5, 5]);

        let mut tape = Tape::new();
        let x = tape.leaf(xt.clone());
        let mut f = forward_ctx(&mut tape, &store, true, &mut rng);
        let y = block.forward(&mut f, x).unwrap();
        let got = tape.value(y).clone();

        let mut tape2 = Tape::new();
        let x2 = tape2.leaf(xt);
        let mut rng2 = ChaCha12Rng::seed_from_u64(12);
        let mut f2 = forward_ctx(&mut tape2, &store, false, &mut rng2);
        let cpe_only = block.cpe.forward(&mut f2, x2).unwrap();
        assert!(max_abs_diff(&got, tape2.value(cpe_only)) < 1e-12);
    }

    #[test]
    fn shapes_are_preserved_for_every_stage_geometry() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for &(k, c) in &[(7usize, 8usize), (5, 8), (3, 8), (3, 12)] {
            let mut store = ParamStore::<f64>::new();
            let block =
                BfvBlock::init(&mut store, &mut rng, "b", c, k, 3.5, 0.05, FfnKind::Dual)
                    .unwrap();
            assert_eq!(block.lgf.padding, (k - 1) / 2);
            let mut tape = Tape::new();
            let x = tape.leaf(rand_map(&mut rng, &[2, c, 6, 6]));
            let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
            let y = block.forward(&mut f, x).unwrap();
            assert_eq!(tape.value(y).shape(), &[2, c, 6, 6]);
        }
    }

    #[test]
    fn depthwise_gabor_stage_is_translation_equivariant_inside() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let lgf = LgfLayer::init(&mut store, &mut rng, "lgf", 2, 3).unwrap();
        let (h, w) = (8, 8);
        let base = rand_map(&mut rng, &[1, 2, h, w]);
        // shift right by one pixel
        let mut shifted = Tensor::zeros(&[1, 2, h, w]);
        for c in 0..2 {
            for y in 0..h {
                for x in 1..w {
                    let v = base.at4(0, c, y, x - 1);
                    shifted.data_mut()[((c * h) + y) * w + x] = v;
                }
            }
        }
        let run = |xt: &Tensor<f64>| {
            let mut rng = ChaCha12Rng::seed_from_u64(0);
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
            let y = lgf.forward_depthwise(&mut f, x).unwrap();
            tape.value(y).clone()
        };
        let ya = run(&base);
        let yb = run(&shifted);
        // interior (away from the one-pixel boundary ring) shifts identically
        for c in 0..2 {
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    let a = ya.at4(0, c, y, x - 1);
                    let b = yb.at4(0, c, y, x);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let block =
            BfvBlock::init(&mut store, &mut rng, "b", 6, 3, 4.0, 0.05, FfnKind::Dual).unwrap();
        let xt = rand_map(&mut rng, &[2, 6, 5, 5]);
        let run = || {
            let mut rng = ChaCha12Rng::seed_from_u64(9);
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let mut f = forward_ctx(&mut tape, &store, false, &mut rng);
            let y = block.forward(&mut f, x).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
