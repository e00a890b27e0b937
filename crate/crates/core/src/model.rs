//! The full segmentation network: encoder, LGSF decoder, and SES module,
//! with the ablation switches.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::params::{init_rng, Bindings, Ctx, Mode, ParamStore};
use crate::ses::{PartitionConfig, Ses, SesOutput};
use crate::tensor::checkpoint::TensorArchive;
use crate::tensor::{ConvGeometry, Real, Tape, Tensor, Var};

pub const CONFIG_TENSOR: &str = "meta.model_config";

/// Per-channel statistics of ImageNet RGB, used to standardize inputs.
pub const INPUT_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const INPUT_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(x − mean_c) / std_c` on an `N×3×H×W` image in `[0, 1]`.
pub fn normalize_input<T: Real>(tape: &mut Tape<T>, image: Var) -> Result<Var> {
    let shape = tape.shape(image);
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape(format!(
            "expected an N×3×H×W image, got {shape:?}"
        )));
    }
    let w = Tensor::new(
        &[3, 1, 1, 1],
        INPUT_STD.iter().map(|&s| T::of(1.0 / s)).collect(),
    )?;
    let b = Tensor::new(
        &[3],
        INPUT_MEAN
            .iter()
            .zip(INPUT_STD)
            .map(|(&m, s)| T::of(-m / s))
            .collect(),
    )?;
    let (w, b) = (tape.constant(w), tape.constant(b));
    tape.conv2d(image, w, Some(b), ConvGeometry::default().grouped(3))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub disable_ses: bool,
    pub disable_lgsf: bool,
    /// Free-form backbone tag carried into reports.
    pub backbone_name: String,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            disable_ses: false,
            disable_lgsf: false,
            backbone_name: "caformer-style".into(),
        }
    }
}

impl AblationFlags {
    pub fn tag(&self) -> String {
        match (self.disable_ses, self.disable_lgsf) {
            (false, false) => format!("{}/full", self.backbone_name),
            (true, false) => format!("{}/w-o-ses", self.backbone_name),
            (false, true) => format!("{}/w-o-lgsf", self.backbone_name),
            (true, true) => format!("{}/w-o-ses-lgsf", self.backbone_name),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Width of the convolution stages inside every MSFA head.
    pub msfa_channels: usize,
    #[serde(default)]
    pub partition: PartitionConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            msfa_channels: 16,
            partition: PartitionConfig::default(),
            ablation: AblationFlags::default(),
        }
    }

    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::full_scale(),
            msfa_channels: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.partition.validate()?;
        if self.msfa_channels == 0 {
            return Err(Error::config("msfa_channels must be positive"));
        }
        let (h, w) = self.map_size();
        if h % self.partition.patch_size != 0 || w % self.partition.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide the {h}x{w} initial map",
                self.partition.patch_size
            )));
        }
        Ok(())
    }

    /// Resolution of `M_initial`, `M1`, `M2`, `M`: one eighth of the input.
    pub fn map_size(&self) -> (usize, usize) {
        self.encoder.level_size(2)
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub pyramid: FeaturePyramid,
    pub decoder: DecoderOutput,
    pub ses: Option<SesOutput>,
}

impl ForwardOutput {
    /// The final map: `M`, or `M_initial` when SES is ablated.
    pub fn prediction(&self) -> Var {
        self.ses.as_ref().map_or(self.decoder.m_initial, |s| s.m)
    }

    /// Maps under deep supervision, in the order `M_initial, M1, M2, M`.
    pub fn supervised_maps(&self) -> Vec<Var> {
        let mut maps = vec![self.decoder.m_initial];
        if let Some(s) = &self.ses {
            maps.extend([s.m1, s.m2, s.m]);
        }
        maps
    }
}

#[derive(Clone, Debug)]
pub struct PolypSes<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Encoder,
    decoder: Decoder,
    ses: Option<Ses>,
}

impl<T: Real> PolypSes<T> {
    /// Builds the network with seeded initialization; the encoder, decoder
    /// and SES draw from separate streams.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config.encoder, &mut init_rng(seed, 0))?;
        let c = config.encoder.stage_channels;
        let decoder = Decoder::new(
            &mut store,
            [c[1], c[2], c[3]],
            config.msfa_channels,
            !config.ablation.disable_lgsf,
            &mut init_rng(seed, 1),
        );
        let ses = (!config.ablation.disable_ses).then(|| {
            Ses::new(
                &mut store,
                c,
                config.msfa_channels,
                config.partition,
                &mut init_rng(seed, 2),
            )
        });
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            ses,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn ses(&self) -> Option<&Ses> {
        self.ses.as_ref()
    }

    /// Records one forward pass of an `N×3×H×W` image batch on `tape`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        image: Var,
        mode: Mode,
    ) -> Result<(ForwardOutput, Bindings)> {
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let out = Self::forward_ctx(
            &self.encoder,
            &self.decoder,
            self.ses.as_ref(),
            &mut ctx,
            image,
        )?;
        Ok((out, ctx.into_bindings()))
    }

    /// Forward pass inside a caller-provided context.
    pub fn forward_in(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<ForwardOutput> {
        Self::forward_ctx(&self.encoder, &self.decoder, self.ses.as_ref(), ctx, image)
    }

    fn forward_ctx(
        encoder: &Encoder,
        decoder: &Decoder,
        ses: Option<&Ses>,
        ctx: &mut Ctx<'_, T>,
        image: Var,
    ) -> Result<ForwardOutput> {
        let x = normalize_input(ctx.tape, image)?;
        let pyramid = encoder.extract_features(ctx, x)?;
        let dec = decoder.decode_initial(ctx, &pyramid)?;
        let ses = ses
            .map(|s| s.enrich_and_decode(ctx, &pyramid, dec.m_initial))
            .transpose()?;
        Ok(ForwardOutput {
            pyramid,
            decoder: dec,
            ses,
        })
    }

    /// Eval-mode prediction map (`N×1×H/8×W/8`).
    pub fn predict(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images.clone());
        let (out, _) = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.prediction()).clone())
    }

    /// Parameters, buffers and the serialized model configuration.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        a.push(CONFIG_TENSOR, config_to_tensor(&self.config)?)?;
        self.store.append_to(&mut a)?;
        Ok(a)
    }

    /// Rebuilds a model from an archive written by [`PolypSes::to_archive`].
    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let t = archive
            .get(CONFIG_TENSOR)
            .ok_or_else(|| Error::Checkpoint(format!("{CONFIG_TENSOR} missing from checkpoint")))?;
        let config = config_from_tensor(t)?;
        let mut model = Self::new(config, 0)
            .map_err(|e| Error::Checkpoint(format!("stored config invalid: {e}")))?;
        model.store.load_archive(archive)?;
        Ok(model)
    }
}

fn config_to_tensor(config: &ModelConfig) -> Result<Tensor<f32>> {
    json_to_tensor(config)
}

fn config_from_tensor(t: &Tensor<f32>) -> Result<ModelConfig> {
    json_from_tensor(t)
}

/// JSON bytes of `value`, one byte per `f32` element.
pub(crate) fn json_to_tensor<S: Serialize>(value: &S) -> Result<Tensor<f32>> {
    let json = serde_json::to_vec(value).map_err(|e| Error::config(e.to_string()))?;
    Tensor::new(&[json.len()], json.into_iter().map(f32::from).collect())
}

pub(crate) fn json_from_tensor<D: serde::de::DeserializeOwned>(t: &Tensor<f32>) -> Result<D> {
    let bytes = t
        .data()
        .iter()
        .map(|&v| {
            (v.fract() == 0.0 && (0.0..=255.0).contains(&v))
                .then_some(v as u8)
                .ok_or_else(|| Error::Checkpoint("config tensor holds non-byte values".into()))
        })
        .collect::<Result<Vec<u8>>>()?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Checkpoint(format!("stored config unreadable: {e}")))
}
