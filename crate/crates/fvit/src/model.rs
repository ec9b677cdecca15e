//! Backbone assembly: conv stem, four stages of blocks joined by 2x2
//! stride-2 merge convolutions, and the projection + classifier head, all
//! described by a declarative [`ModelConfig`].

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::blocks::{BfvBlock, Dpffn, FfnKind};
use crate::nn::{Conv2d, Forward, LayerNorm, Linear};
use crate::ops::{self, ConvSpec};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// One pyramid stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub kernel: usize,
    pub padding: usize,
    pub expansion: f64,
    pub drop_path: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stages: [StageConfig; 4],
    pub projection: usize,
    pub num_classes: usize,
    pub input_resolution: usize,
    pub ffn: FfnKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
    /// Desk-scale model for 32x32 inputs.
    Micro,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Variant::Tiny),
            "small" => Ok(Variant::Small),
            "base" => Ok(Variant::Base),
            "large" => Ok(Variant::Large),
            "micro" => Ok(Variant::Micro),
            other => Err(Error::Usage(format!(
                "unknown variant '{other}' (expected tiny|small|base|large|micro)"
            ))),
        }
    }
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::Small => "small",
            Variant::Base => "base",
            Variant::Large => "large",
            Variant::Micro => "micro",
        }
    }
}

const KERNELS: [usize; 4] = [7, 5, 3, 3];
const PADDINGS: [usize; 4] = [3, 2, 1, 1];
const EXPANSIONS: [f64; 4] = [3.0, 3.5, 4.0, 4.0];
const DROP_PATH: f64 = 0.05;

/// Published reference totals per variant: parameter count and
/// multiply-accumulate count at 224^2 (the reference tables follow the
/// MAC-counting convention, as their baseline rows show).
pub struct ReferenceTotals {
    pub params: f64,
    pub macs: f64,
}

pub fn reference_totals(v: Variant) -> Option<ReferenceTotals> {
    let (params, macs) = match v {
        Variant::Tiny => (11.28e6, 1.94e9),
        Variant::Small => (23.59e6, 3.98e9),
        Variant::Base => (43.15e6, 7.21e9),
        Variant::Large => (60.15e6, 10.18e9),
        Variant::Micro => return None,
    };
    Some(ReferenceTotals { params, macs })
}

/// Exact preset tables for the four published variants.
pub fn preset(variant: Variant) -> ModelConfig {
    let (stem, depths): (usize, [usize; 4]) = match variant {
        Variant::Tiny => (40, [3, 3, 12, 3]),
        Variant::Small => (44, [4, 4, 20, 4]),
        Variant::Base => (48, [5, 5, 28, 5]),
        Variant::Large => (52, [5, 5, 36, 5]),
        Variant::Micro => (16, [1, 1, 2, 1]),
    };
    let mut stages = [StageConfig {
        depth: 0,
        channels: 0,
        kernel: 0,
        padding: 0,
        expansion: 0.0,
        drop_path: DROP_PATH,
    }; 4];
    for i in 0..4 {
        stages[i] = StageConfig {
            depth: depths[i],
            channels: stem * (2 << i),
            kernel: KERNELS[i],
            padding: PADDINGS[i],
            expansion: EXPANSIONS[i],
            drop_path: DROP_PATH,
        };
    }
    ModelConfig {
        stem_channels: stem,
        stages,
        projection: 1280,
        num_classes: 1000,
        input_resolution: if variant == Variant::Micro { 32 } else { 224 },
        ffn: FfnKind::Dual,
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_resolution % 32 != 0 || self.input_resolution == 0 {
            return Err(Error::Config(format!(
                "input resolution must be a positive multiple of 32, got {}",
                self.input_resolution
            )));
        }
        let mut prev = self.stem_channels;
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth < 1 {
                return Err(Error::Config(format!("stage {i} depth must be >= 1")));
            }
            if s.channels % 2 != 0 {
                return Err(Error::Config(format!(
                    "stage {i} channels must be even, got {}",
                    s.channels
                )));
            }
            if s.channels != prev * 2 {
                return Err(Error::Config(format!(
                    "stage {i} channels {} must double the preceding width {}",
                    s.channels, prev
                )));
            }
            if s.padding != (s.kernel - 1) / 2 {
                return Err(Error::Config(format!(
                    "stage {i} padding {} must be (kernel-1)/2 = {}",
                    s.padding,
                    (s.kernel - 1) / 2
                )));
            }
            if !(0.0..1.0).contains(&s.drop_path) {
                return Err(Error::Config(format!(
                    "stage {i} drop path {} outside [0, 1)",
                    s.drop_path
                )));
            }
            prev = s.channels;
        }
        Ok(())
    }

    /// Spatial side length of each stage's output for a given input side.
    pub fn stage_sizes(&self, resolution: usize) -> [usize; 4] {
        let mut r = resolution / 2; // stem stride
        let mut out = [0; 4];
        for (i, o) in out.iter_mut().enumerate() {
            r /= 2; // merge stride
            *o = r;
            let _ = i;
        }
        out
    }

    /// Strict FLOP accounting: every convolution/linear multiply-accumulate
    /// counts as two FLOPs, plus a fixed 20-op cost per Gabor kernel entry
    /// generated each forward pass.
    pub fn count_flops(&self, resolution: usize) -> Result<FlopReport> {
        if resolution % 32 != 0 || resolution == 0 {
            return Err(Error::Config(format!(
                "resolution must be a positive multiple of 32, got {resolution}"
            )));
        }
        let mut rows = Vec::new();
        let s = self.stem_channels as u64;
        let half = (resolution / 2) as u64;
        let stem_macs = (27 * s + 2 * 9 * s * s) * half * half;
        rows.push(FlopRow {
            name: "stem".into(),
            flops: 2 * stem_macs,
        });
        let mut prev = self.stem_channels as u64;
        let mut res = resolution / 2;
        let mut gen_total = 0u64;
        for (i, st) in self.stages.iter().enumerate() {
            res /= 2;
            let hw = (res * res) as u64;
            let c = st.channels as u64;
            let k = st.kernel as u64;
            let d = st.depth as u64;
            let merge_macs = 4 * prev * c * hw;
            let h = Dpffn::hidden_per_path(st.channels, st.expansion) as u64;
            let ffn_macs = match self.ffn {
                FfnKind::Dual => 2 * (c / 2) * h * hw      // expands
                    + 2 * 9 * h * hw                        // depthwise
                    + (c / 2) * (c / 2) * hw                // cross projection
                    + 2 * h * (c / 2) * hw, // projections
                FfnKind::Plain { width } => {
                    let hp =
                        crate::blocks::plain_ffn_width(st.channels, st.expansion, width) as u64;
                    2 * c * hp * hw
                }
            };
            let block_macs = 9 * c * hw       // positional embedding
                + k * k * c * hw              // depthwise gabor
                + c * c * hw                  // channel mix
                + ffn_macs;
            let gen = 20 * k * k * c;
            gen_total += d * gen;
            rows.push(FlopRow {
                name: format!("stage{}", i + 1),
                flops: 2 * (merge_macs + d * block_macs) + d * gen,
            });
            prev = c;
        }
        let hw4 = {
            let r = resolution / 32;
            (r * r) as u64
        };
        let head_macs = prev * self.projection as u64 * hw4
            + self.projection as u64 * self.num_classes as u64;
        rows.push(FlopRow {
            name: "head".into(),
            flops: 2 * head_macs,
        });
        let total = rows.iter().map(|r| r.flops).sum();
        Ok(FlopReport {
            rows,
            total_flops: total,
            kernel_gen_flops: gen_total,
        })
    }
}

pub struct FlopRow {
    pub name: String,
    pub flops: u64,
}

pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    pub total_flops: u64,
    pub kernel_gen_flops: u64,
}

impl FlopReport {
    /// Multiply-accumulate count (the convention of the reference tables).
    pub fn macs(&self) -> u64 {
        self.total_flops / 2
    }
}

struct StemLayer {
    conv: Conv2d,
    norm: LayerNorm,
}

pub struct Stage {
    merge: Conv2d,
    norm: LayerNorm,
    pub blocks: Vec<BfvBlock>,
}

struct Head {
    proj: Conv2d,
    norm: LayerNorm,
    fc: Linear,
}

pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    stem: Vec<StemLayer>,
    pub stages: Vec<Stage>,
    head: Head,
}

impl<T: Scalar> Model<T> {
    /// Deterministically initialize a model from its configuration.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let s = config.stem_channels;

        let mut stem = Vec::new();
        for i in 0..3 {
            let (in_c, stride) = if i == 0 { (3, 2) } else { (s, 1) };
            let conv = Conv2d::init(
                &mut store,
                &mut rng,
                &format!("stem.conv{i}"),
                in_c,
                s,
                3,
                ConvSpec::new(stride, 1, 1),
                Conv2d::default_init(s, 3, 1),
            );
            let norm = LayerNorm::init(&mut store, &format!("stem.norm{i}"), s);
            stem.push(StemLayer { conv, norm });
        }

        let mut stages = Vec::new();
        let mut prev = s;
        for (i, sc) in config.stages.iter().enumerate() {
            let merge = Conv2d::init(
                &mut store,
                &mut rng,
                &format!("stage{i}.merge"),
                prev,
                sc.channels,
                2,
                ConvSpec::new(2, 0, 1),
                Conv2d::default_init(sc.channels, 2, 1),
            );
            let norm = LayerNorm::init(&mut store, &format!("stage{i}.merge_norm"), sc.channels);
            let mut blocks = Vec::new();
            for b in 0..sc.depth {
                blocks.push(BfvBlock::init(
                    &mut store,
                    &mut rng,
                    &format!("stage{i}.block{b}"),
                    sc.channels,
                    sc.kernel,
                    sc.expansion,
                    sc.drop_path,
                    config.ffn,
                )?);
            }
            stages.push(Stage {
                merge,
                norm,
                blocks,
            });
            prev = sc.channels;
        }

        let proj = Conv2d::init(
            &mut store,
            &mut rng,
            "head.proj",
            prev,
            config.projection,
            1,
            ConvSpec::pointwise(),
            crate::params::Init::TruncNormal { std: 0.02 },
        );
        let norm = LayerNorm::init(&mut store, "head.norm", config.projection);
        let fc = Linear::init(
            &mut store,
            &mut rng,
            "head.fc",
            config.projection,
            config.num_classes,
        );
        Ok(Model {
            config,
            store,
            stem,
            stages,
            head: Head { proj, norm, fc },
        })
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        x.expect_ndim(4, "model input")?;
        if x.shape()[1] != 3 {
            return Err(Error::Dimension(format!(
                "model input channel axis must be 3, got {}",
                x.shape()[1]
            )));
        }
        for (axis, dim) in [("H", x.shape()[2]), ("W", x.shape()[3])] {
            if dim % 32 != 0 || dim == 0 {
                return Err(Error::Dimension(format!(
                    "input axis {axis}={dim} must be a positive multiple of 32"
                )));
            }
        }
        Ok(())
    }

    /// Run the backbone, returning the logits variable and each stage's
    /// output variable (for inspection).
    pub fn forward_stages(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        training: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<(VarId, Vec<VarId>)> {
        self.check_input(images)?;
        let mut f = Forward {
            tape,
            store: &self.store,
            training,
            rng,
        };
        let mut x = f.tape.leaf(images.clone());
        for layer in &self.stem {
            x = layer.conv.forward(&mut f, x)?;
            x = layer.norm.forward(&mut f, x)?;
            x = ops::gelu(f.tape, x);
        }
        let mut stage_outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.merge.forward(&mut f, x)?;
            x = stage.norm.forward(&mut f, x)?;
            for block in &stage.blocks {
                x = block.forward(&mut f, x)?;
            }
            stage_outputs.push(x);
        }
        let x = self.head.proj.forward(&mut f, x)?;
        let x = ops::global_avg_pool(f.tape, x)?;
        let x = self.head.norm.forward(&mut f, x)?;
        let logits = self.head.fc.forward(&mut f, x)?;
        Ok((logits, stage_outputs))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        images: &Tensor<T>,
        training: bool,
        rng: &mut ChaCha12Rng,
    ) -> Result<VarId> {
        Ok(self.forward_stages(tape, images, training, rng)?.0)
    }

    /// Total trainable scalar count, Gabor parameters included.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Trainable scalars belonging to the five Gabor parameter groups.
    pub fn gabor_scalar_count(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, e)| {
                ["lambda_raw", "theta", "psi", "gamma_raw", "sigma_raw"]
                    .iter()
                    .any(|suffix| e.name.ends_with(suffix))
            })
            .map(|(_, e)| e.value.numel())
            .sum()
    }

    pub fn count_flops(&self, resolution: usize) -> Result<FlopReport> {
        self.config.count_flops(resolution)
    }
}
