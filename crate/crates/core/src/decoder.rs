//! Local-to-global spatial fusion (LGSF) and multi-scale feature aggregation
//! (MSFA), producing the initial global map from pyramid levels 2–4.

use rand::Rng;

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnRelu};
use crate::params::{Ctx, ParamStore};
use crate::tensor::{ConvGeometry, Real, Var};

pub const DILATION_RATES: [usize; 4] = [1, 2, 4, 8];
pub const SA_KERNEL: usize = 7;

/// One LGSF block; channel-preserving.
#[derive(Clone, Debug)]
pub struct LgsfBlock {
    pub channels: usize,
    pub branches: Vec<ConvBnRelu>,
    pub reduce: Conv2d,
    pub sa_conv: Conv2d,
    pub global_conv: Conv2d,
    pub mlp1: Conv2d,
    pub mlp2: Conv2d,
    pub fuse: Conv2d,
}

impl LgsfBlock {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        c: usize,
        rng: &mut R,
    ) -> Self {
        let branches = DILATION_RATES
            .iter()
            .map(|&r| {
                ConvBnRelu::new(
                    store,
                    &format!("{name}.local.d{r}"),
                    c,
                    c,
                    3,
                    ConvGeometry::new(1, r, r),
                    rng,
                )
            })
            .collect();
        Self {
            channels: c,
            branches,
            reduce: Conv2d::pointwise(store, &format!("{name}.local.reduce"), 4 * c, c, rng),
            sa_conv: Conv2d::new(
                store,
                &format!("{name}.local.sa"),
                2,
                1,
                SA_KERNEL,
                ConvGeometry::new(1, SA_KERNEL / 2, 1),
                true,
                rng,
            ),
            global_conv: Conv2d::pointwise(store, &format!("{name}.global.conv"), c, c, rng),
            mlp1: Conv2d::pointwise(store, &format!("{name}.global.mlp1"), c, c, rng),
            mlp2: Conv2d::pointwise(store, &format!("{name}.global.mlp2"), c, c, rng),
            fuse: Conv2d::new(
                store,
                &format!("{name}.fuse"),
                c,
                c,
                3,
                ConvGeometry::new(1, 1, 1),
                true,
                rng,
            ),
        }
    }

    fn check<T: Real>(&self, ctx: &Ctx<'_, T>, f: Var) -> Result<()> {
        let (_, c, _, _) = ctx.tape.value(f).dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "LGSF block built for {} channels, got {c}",
                self.channels
            )));
        }
        Ok(())
    }

    /// Sigmoid map from a convolution over channel-wise max and mean.
    pub fn spatial_attention<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mx = ctx.tape.channel_max(x)?;
        let mean = ctx.tape.channel_mean(x)?;
        let pooled = ctx.tape.concat(&[mx, mean], 1)?;
        let logits = self.sa_conv.forward(ctx, pooled)?;
        Ok(ctx.tape.sigmoid(logits))
    }

    /// Four dilated branches, concatenated, reduced to `C`, then modulated
    /// by spatial attention.
    pub fn local<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        self.check(ctx, f)?;
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward(ctx, f))
            .collect::<Result<Vec<_>>>()?;
        let cat = ctx.tape.concat(&outs, 1)?;
        let reduced = self.reduce.forward(ctx, cat)?;
        let sa = self.spatial_attention(ctx, reduced)?;
        let sa = ctx.tape.repeat_channels(sa, self.channels)?;
        ctx.tape.mul(reduced, sa)
    }

    /// Non-local gate: softmax over pixels of a 1×1 projection weights `F`,
    /// an MLP over channels turns that context into a sigmoid gate on `F`.
    pub fn global<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        self.check(ctx, f)?;
        let gate = self.global_gate(ctx, f)?;
        ctx.tape.mul(f, gate)
    }

    /// The sigmoid gate applied by [`LgsfBlock::global`].
    pub fn global_gate<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let (n, c, h, w) = ctx.tape.value(f).dims4()?;
        let z = self.global_conv.forward(ctx, f)?;
        let z = ctx.tape.reshape(z, &[n, c, h * w])?;
        let zt = ctx.tape.transpose_last2(z)?;
        let weights = ctx.tape.softmax(zt, 1)?;
        let weights = ctx.tape.transpose_last2(weights)?;
        let weights = ctx.tape.reshape(weights, &[n, c, h, w])?;
        let context = ctx.tape.mul(f, weights)?;
        let hidden = self.mlp1.forward(ctx, context)?;
        let hidden = ctx.tape.relu(hidden);
        let logits = self.mlp2.forward(ctx, hidden)?;
        Ok(ctx.tape.sigmoid(logits))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        let local = self.local(ctx, f)?;
        let global = self.global(ctx, f)?;
        let sum = ctx.tape.add(local, global)?;
        self.fuse.forward(ctx, sum)
    }
}

/// Per-level refinement: LGSF, or a plain 3×3 convolution when ablated.
#[derive(Clone, Debug)]
pub enum LevelRefiner {
    Lgsf(Box<LgsfBlock>),
    Plain(Conv2d),
}

impl LevelRefiner {
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f: Var) -> Result<Var> {
        match self {
            LevelRefiner::Lgsf(b) => b.forward(ctx, f),
            LevelRefiner::Plain(conv) => conv.forward(ctx, f),
        }
    }
}

/// Upsample, concatenate, two conv–BN–ReLU stages, 1-channel head, sigmoid.
#[derive(Clone, Debug)]
pub struct Msfa {
    pub in_channels: [usize; 3],
    pub cbr1: ConvBnRelu,
    pub cbr2: ConvBnRelu,
    pub head: Conv2d,
}

impl Msfa {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: [usize; 3],
        width: usize,
        rng: &mut R,
    ) -> Self {
        let total = in_channels.iter().sum();
        let g = ConvGeometry::new(1, 1, 1);
        Self {
            in_channels,
            cbr1: ConvBnRelu::new(store, &format!("{name}.cbr1"), total, width, 3, g, rng),
            cbr2: ConvBnRelu::new(store, &format!("{name}.cbr2"), width, width, 3, g, rng),
            head: Conv2d::pointwise(store, &format!("{name}.head"), width, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, f2: Var, f3: Var, f4: Var) -> Result<Var> {
        let (n, _, h, w) = ctx.tape.value(f2).dims4()?;
        for (v, div) in [(f3, 2), (f4, 4)] {
            let (n2, _, h2, w2) = ctx.tape.value(v).dims4()?;
            if n2 != n || h2 * div != h || w2 * div != w {
                return Err(Error::shape(format!(
                    "MSFA input {:?} is not 1/{div} of {:?}",
                    ctx.tape.shape(v),
                    ctx.tape.shape(f2)
                )));
            }
        }
        let up3 = ctx.tape.resize_bilinear(f3, h, w)?;
        let up4 = ctx.tape.resize_bilinear(f4, h, w)?;
        let cat = ctx.tape.concat(&[f2, up3, up4], 1)?;
        let c = ctx.tape.shape(cat)[1];
        if c != self.in_channels.iter().sum::<usize>() {
            return Err(Error::shape(format!(
                "MSFA built for {:?} channels, got {c} total",
                self.in_channels
            )));
        }
        let y = self.cbr1.forward(ctx, cat)?;
        let y = self.cbr2.forward(ctx, y)?;
        let logits = self.head.forward(ctx, y)?;
        Ok(ctx.tape.sigmoid(logits))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub refiners: Vec<LevelRefiner>,
    pub msfa: Msfa,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    /// Refined levels 2, 3, 4.
    pub refined: [Var; 3],
    /// Initial global map at level-2 resolution, values in `[0, 1]`.
    pub m_initial: Var,
}

impl Decoder {
    /// `channels` are the widths of pyramid levels 2–4.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        channels: [usize; 3],
        msfa_width: usize,
        use_lgsf: bool,
        rng: &mut R,
    ) -> Self {
        let refiners = channels
            .iter()
            .zip(2..)
            .map(|(&c, level)| {
                if use_lgsf {
                    LevelRefiner::Lgsf(Box::new(LgsfBlock::new(
                        store,
                        &format!("decoder.lgsf{level}"),
                        c,
                        rng,
                    )))
                } else {
                    LevelRefiner::Plain(Conv2d::new(
                        store,
                        &format!("decoder.plain{level}"),
                        c,
                        c,
                        3,
                        ConvGeometry::new(1, 1, 1),
                        true,
                        rng,
                    ))
                }
            })
            .collect();
        let msfa = Msfa::new(store, "decoder.msfa", channels, msfa_width, rng);
        Self { refiners, msfa }
    }

    /// `M_initial = MSFA(lgsf(F2), lgsf(F3), lgsf(F4))`; `F1` is not used.
    pub fn decode_initial<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pyramid: &FeaturePyramid,
    ) -> Result<DecoderOutput> {
        let mut refined = [pyramid.level(2); 3];
        for (i, r) in self.refiners.iter().enumerate() {
            refined[i] = r.forward(ctx, pyramid.level(i + 2))?;
        }
        let m_initial = self.msfa.forward(ctx, refined[0], refined[1], refined[2])?;
        Ok(DecoderOutput { refined, m_initial })
    }
}
