//! MetaFormer-style hierarchical encoder producing the four-level feature
//! pyramid `F1..F4` at strides 4, 8, 16 and 32.
//!
//! Each stage is a downsampling stem followed by blocks of
//! `x + mixer(norm(x))` and `x + mlp(norm(x))`. The token mixer is a
//! depthwise-separable convolution in the early stages and multi-head
//! self-attention in the late stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv2d, Init};
use crate::params::{init_rng, Ctx, ParamStore};
use crate::tensor::{ConvGeometry, Real, Tape, Var};

pub const MLP_RATIO: usize = 4;
pub const SEPCONV_EXPANSION: usize = 2;
pub const SEPCONV_KERNEL: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixerKind {
    Conv,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// `(height, width)` of the input image in pixels.
    pub input_size: (usize, usize),
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    pub mixers: [MixerKind; 4],
    pub attention_heads: usize,
}

impl EncoderConfig {
    /// 352×352 input with 64/128/320/512 channels and one block per stage.
    pub fn full_scale() -> Self {
        Self {
            input_size: (352, 352),
            stage_channels: [64, 128, 320, 512],
            blocks_per_stage: [1, 1, 1, 1],
            mixers: [
                MixerKind::Conv,
                MixerKind::Conv,
                MixerKind::Attention,
                MixerKind::Attention,
            ],
            attention_heads: 2,
        }
    }

    /// 64×64 input with 8/16/40/64 channels.
    pub fn desk() -> Self {
        Self {
            input_size: (64, 64),
            stage_channels: [8, 16, 40, 64],
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return Err(Error::config(format!(
                "input size {h}x{w} must be positive multiples of 32"
            )));
        }
        if self.stage_channels[0] == 0 || self.stage_channels.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config(format!(
                "stage channels {:?} must be positive and strictly increasing",
                self.stage_channels
            )));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::config("every stage needs at least one block"));
        }
        for (c, m) in self.stage_channels.iter().zip(&self.mixers) {
            if *m == MixerKind::Attention
                && (self.attention_heads == 0 || c % self.attention_heads != 0)
            {
                return Err(Error::config(format!(
                    "{c} channels not divisible into {} attention heads",
                    self.attention_heads
                )));
            }
        }
        Ok(())
    }

    /// Spatial extent of level `i` (1-based): `H / 2^(i+1)`.
    pub fn level_size(&self, level: usize) -> (usize, usize) {
        let f = 1 << (level + 1);
        (self.input_size.0 / f, self.input_size.1 / f)
    }
}

/// The four encoder outputs, highest resolution first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    /// Level `i`, 1-based to match `F1..F4`.
    pub fn level(&self, i: usize) -> Var {
        self.levels[i - 1]
    }

    pub fn shapes<T: Real>(&self, tape: &Tape<T>) -> [Vec<usize>; 4] {
        self.levels.map(|v| tape.shape(v).to_vec())
    }

    /// Checks the `N × C_i × H/2^(i+1) × W/2^(i+1)` contract.
    pub fn check_contract<T: Real>(
        &self,
        tape: &Tape<T>,
        config: &EncoderConfig,
        batch: usize,
    ) -> Result<()> {
        for (i, shape) in self.shapes(tape).iter().enumerate() {
            let (h, w) = config.level_size(i + 1);
            let want = [batch, config.stage_channels[i], h, w];
            if shape.as_slice() != want {
                return Err(Error::shape(format!(
                    "F{} has shape {shape:?}, expected {want:?}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Mixer {
    SepConv {
        pw1: Conv2d,
        dw: Conv2d,
        pw2: Conv2d,
    },
    Attention {
        qkv: Conv2d,
        proj: Conv2d,
        heads: usize,
    },
}

impl Mixer {
    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match self {
            Mixer::SepConv { pw1, dw, pw2 } => {
                let y = pw1.forward(ctx, x)?;
                let y = ctx.tape.gelu(y);
                let y = dw.forward(ctx, y)?;
                pw2.forward(ctx, y)
            }
            Mixer::Attention { qkv, proj, heads } => {
                let (n, c, h, w) = ctx.tape.value(x).dims4()?;
                let (len, d) = (h * w, c / heads);
                let qkv = qkv.forward(ctx, x)?;
                let mut split = |k: usize| -> Result<Var> {
                    let part = ctx.tape.narrow(qkv, 1, k * c, c)?;
                    ctx.tape.reshape(part, &[n * heads, d, len])
                };
                let (q, k, v) = (split(0)?, split(1)?, split(2)?);
                let qt = ctx.tape.transpose_last2(q)?;
                let scores = ctx.tape.matmul(qt, k)?;
                let scores = ctx.tape.scale(scores, T::of(1.0 / (d as f64).sqrt()));
                let attn = ctx.tape.softmax(scores, 2)?;
                let attn_t = ctx.tape.transpose_last2(attn)?;
                let out = ctx.tape.matmul(v, attn_t)?;
                let out = ctx.tape.reshape(out, &[n, c, h, w])?;
                proj.forward(ctx, out)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct MetaBlock {
    norm1: ChannelNorm,
    mixer: Mixer,
    norm2: ChannelNorm,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl MetaBlock {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        kind: MixerKind,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mixer = match kind {
            MixerKind::Conv => {
                let e = SEPCONV_EXPANSION * c;
                Mixer::SepConv {
                    pw1: pointwise(store, &format!("{name}.mixer.pw1"), c, e, rng),
                    dw: conv(
                        store,
                        &format!("{name}.mixer.dw"),
                        [e, e, SEPCONV_KERNEL],
                        ConvGeometry::new(1, SEPCONV_KERNEL / 2, 1).grouped(e),
                        true,
                        rng,
                    ),
                    pw2: pointwise(store, &format!("{name}.mixer.pw2"), e, c, rng),
                }
            }
            MixerKind::Attention => Mixer::Attention {
                qkv: conv(
                    store,
                    &format!("{name}.mixer.qkv"),
                    [c, 3 * c, 1],
                    ConvGeometry::default(),
                    false,
                    rng,
                ),
                proj: pointwise(store, &format!("{name}.mixer.proj"), c, c, rng),
                heads,
            },
        };
        Self {
            norm1: ChannelNorm::new(store, &format!("{name}.norm1"), c),
            mixer,
            norm2: ChannelNorm::new(store, &format!("{name}.norm2"), c),
            fc1: pointwise(store, &format!("{name}.mlp.fc1"), c, MLP_RATIO * c, rng),
            fc2: pointwise(store, &format!("{name}.mlp.fc2"), MLP_RATIO * c, c, rng),
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm1.forward(ctx, x)?;
        let y = self.mixer.forward(ctx, y)?;
        let x = ctx.tape.add(x, y)?;
        let y = self.norm2.forward(ctx, x)?;
        let y = self.fc1.forward(ctx, y)?;
        let y = ctx.tape.gelu(y);
        let y = self.fc2.forward(ctx, y)?;
        ctx.tape.add(x, y)
    }
}

fn conv<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    dims: [usize; 3],
    geom: ConvGeometry,
    bias: bool,
    rng: &mut R,
) -> Conv2d {
    Conv2d::with_init(store, name, dims, geom, bias, Init::TruncNormal, rng)
}

fn pointwise<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    name: &str,
    i: usize,
    o: usize,
    rng: &mut R,
) -> Conv2d {
    conv(store, name, [i, o, 1], ConvGeometry::default(), true, rng)
}

#[derive(Clone, Debug)]
struct Stage {
    pre_norm: Option<ChannelNorm>,
    downsample: Conv2d,
    post_norm: Option<ChannelNorm>,
    blocks: Vec<MetaBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Stage>,
}

impl Encoder {
    /// Registers all encoder parameters under `encoder.stage{i}.*`.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut in_c = 3;
        for i in 0..4 {
            let c = config.stage_channels[i];
            let name = format!("encoder.stage{}", i + 1);
            let (pre_norm, downsample, post_norm) = if i == 0 {
                let stem = conv(
                    store,
                    &format!("{name}.downsample.conv"),
                    [in_c, c, 7],
                    ConvGeometry::new(4, 2, 1),
                    true,
                    rng,
                );
                (
                    None,
                    stem,
                    Some(ChannelNorm::new(
                        store,
                        &format!("{name}.downsample.norm"),
                        c,
                    )),
                )
            } else {
                let norm = ChannelNorm::new(store, &format!("{name}.downsample.norm"), in_c);
                let down = conv(
                    store,
                    &format!("{name}.downsample.conv"),
                    [in_c, c, 3],
                    ConvGeometry::new(2, 1, 1),
                    true,
                    rng,
                );
                (Some(norm), down, None)
            };
            let blocks = (0..config.blocks_per_stage[i])
                .map(|j| {
                    MetaBlock::new(
                        store,
                        &format!("{name}.block{j}"),
                        c,
                        config.mixers[i],
                        config.attention_heads,
                        rng,
                    )
                })
                .collect();
            stages.push(Stage {
                pre_norm,
                downsample,
                post_norm,
                blocks,
            });
            in_c = c;
        }
        Ok(Self {
            config: config.clone(),
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Runs the backbone on an `N×3×H×W` image.
    pub fn extract_features<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: Var,
    ) -> Result<FeaturePyramid> {
        let (n, c, h, w) = ctx.tape.value(image).dims4()?;
        if c != 3 || (h, w) != self.config.input_size {
            return Err(Error::shape(format!(
                "encoder expects N×3×{}×{} input, got {:?}",
                self.config.input_size.0,
                self.config.input_size.1,
                ctx.tape.shape(image)
            )));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            if let Some(norm) = &stage.pre_norm {
                x = norm.forward(ctx, x)?;
            }
            x = stage.downsample.forward(ctx, x)?;
            if let Some(norm) = &stage.post_norm {
                x = norm.forward(ctx, x)?;
            }
            for block in &stage.blocks {
                x = block.forward(ctx, x)?;
            }
            levels.push(x);
        }
        let pyramid = FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
        };
        pyramid.check_contract(ctx.tape, &self.config, n)?;
        Ok(pyramid)
    }
}

/// Standalone encoder with its own parameter store, initialized from `seed`.
pub fn build_encoder<T: Real>(
    config: &EncoderConfig,
    seed: u64,
) -> Result<(Encoder, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = init_rng(seed, 0);
    let encoder = Encoder::new(&mut store, config, &mut rng)?;
    Ok((encoder, store))
}
