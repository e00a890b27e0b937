//! Parameterized layers shared by the encoder, decoder and SES module.

use rand::Rng;

use crate::error::Result;
use crate::params::{BufferId, Ctx, ParamId, ParamStore};
use crate::tensor::{ConvGeometry, NormMode, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Truncated normal, std [`INIT_STD`], zero bias.
    TruncNormal,
    /// Uniform in `±1/√fan_in` for weight and bias.
    FanIn,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
}

impl Conv2d {
    /// Fan-in initialized convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geom: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_init(
            store,
            name,
            [in_c, out_c, kernel],
            geom,
            bias,
            Init::FanIn,
            rng,
        )
    }

    /// `dims` is `[in, out, kernel]`.
    pub fn with_init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: [usize; 3],
        geom: ConvGeometry,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let [in_c, out_c, k] = dims;
        let shape = [out_c, in_c / geom.groups, k, k];
        let bound = 1.0 / ((in_c / geom.groups * k * k) as f64).sqrt();
        let w = match init {
            Init::TruncNormal => Tensor::trunc_normal(&shape, INIT_STD, rng),
            Init::FanIn => Tensor::rand_uniform(&shape, -bound, bound, rng),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| {
            let b = match init {
                Init::TruncNormal => Tensor::zeros(&[out_c]),
                Init::FanIn => Tensor::rand_uniform(&[out_c], -bound, bound, rng),
            };
            store.add(format!("{name}.bias"), b)
        });
        Self { weight, bias, geom }
    }

    /// Fan-in initialized 1×1 convolution with bias.
    pub fn pointwise<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            in_c,
            out_c,
            1,
            ConvGeometry::default(),
            true,
            rng,
        )
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.training() {
            let (y, stats) = ctx
                .tape
                .batch_norm(x, gamma, beta, NormMode::Train, T::of(BN_EPS))?;
            let stats = stats.expect("training-mode batch norm reports statistics");
            let m = T::of(BN_MOMENTUM);
            let keep = T::one() - m;
            for (r, &s) in ctx
                .store
                .buffer_mut(self.running_mean)
                .data_mut()
                .iter_mut()
                .zip(&stats.mean)
            {
                *r = keep * *r + m * s;
            }
            for (r, &s) in ctx
                .store
                .buffer_mut(self.running_var)
                .data_mut()
                .iter_mut()
                .zip(&stats.var)
            {
                *r = keep * *r + m * s;
            }
            Ok(y)
        } else {
            let mean = ctx.store.buffer(self.running_mean).data().to_vec();
            let var = ctx.store.buffer(self.running_var).data().to_vec();
            let mode = NormMode::Eval {
                mean: &mean,
                var: &var,
            };
            Ok(ctx.tape.batch_norm(x, gamma, beta, mode, T::of(BN_EPS))?.0)
        }
    }
}

/// Layer normalization over channels at every pixel.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), Tensor::ones(&[channels])),
            beta: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        ctx.tape.layer_norm_channels(x, g, b, T::of(LN_EPS))
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Clone, Debug)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        geom: ConvGeometry,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_c,
                out_c,
                kernel,
                geom,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_c),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.tape.relu(y))
    }
}
