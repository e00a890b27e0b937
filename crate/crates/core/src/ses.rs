//! Self-enriched semantics: split the initial map into ambiguous (S1) and
//! solid (S2) patch regions, query each with `F1` through cross-layer
//! attention, push the result into levels 2–4 through chained attention
//! gates, and decode `M1`, `M2` and the fused map `M`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::Msfa;
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    /// Patch side, in pixels of the initial map.
    pub patch_size: usize,
    pub tau_lo: f64,
    pub tau_hi: f64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            tau_lo: 0.1,
            tau_hi: 0.8,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Geometry("patch size must be positive".into()));
        }
        if !(0.0 < self.tau_lo && self.tau_lo < self.tau_hi && self.tau_hi < 1.0) {
            return Err(Error::config(format!(
                "thresholds must satisfy 0 < tau_lo < tau_hi < 1, got {} and {}",
                self.tau_lo, self.tau_hi
            )));
        }
        Ok(())
    }

    /// Label for a patch with mean value `mu`.
    pub fn classify(&self, mu: f64) -> PatchLabel {
        if mu >= self.tau_hi {
            PatchLabel::Solid
        } else if mu >= self.tau_lo {
            PatchLabel::Ambiguous
        } else {
            PatchLabel::Background
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchLabel {
    Background,
    /// S1: values spread between 0 and 1.
    Ambiguous,
    /// S2: values close to 1.
    Solid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    S1,
    S2,
}

impl Region {
    pub const BOTH: [Region; 2] = [Region::S1, Region::S2];

    pub fn label(self) -> PatchLabel {
        match self {
            Region::S1 => PatchLabel::Ambiguous,
            Region::S2 => PatchLabel::Solid,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Region::S1 => "s1",
            Region::S2 => "s2",
        }
    }
}

/// Patch-grid labelling of an `N×1×h×w` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SemanticPartition {
    pub patch_size: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// `batch × (h/p) × (w/p)` labels, row-major.
    pub patch_grid: Vec<PatchLabel>,
    pub s1_mask: Vec<bool>,
    pub s2_mask: Vec<bool>,
}

impl SemanticPartition {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn mask(&self, region: Region) -> &[bool] {
        match region {
            Region::S1 => &self.s1_mask,
            Region::S2 => &self.s2_mask,
        }
    }

    /// `N×1×h×w` tensor of 0/1 values.
    pub fn mask_tensor<T: Real>(&self, region: Region) -> Tensor<T> {
        let data = self
            .mask(region)
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        Tensor::new(&[self.batch, 1, self.height, self.width], data)
            .expect("mask matches its own extents")
    }

    pub fn count(&self, label: PatchLabel) -> usize {
        self.patch_grid.iter().filter(|&&l| l == label).count()
    }
}

/// Labels every `patch_size` square of `map` by its mean value: S2 at or
/// above `tau_hi`, S1 in `[tau_lo, tau_hi)`, background below `tau_lo`.
pub fn partition_semantics<T: Real>(
    map: &Tensor<T>,
    config: &PartitionConfig,
) -> Result<SemanticPartition> {
    config.validate()?;
    let (n, c, h, w) = map.dims4()?;
    if c != 1 {
        return Err(Error::shape(format!(
            "partition needs a 1-channel map, got {c} channels"
        )));
    }
    let p = config.patch_size;
    if h % p != 0 || w % p != 0 {
        return Err(Error::Geometry(format!(
            "patch size {p} does not divide {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let d = map.data();
    let mut patch_grid = Vec::with_capacity(n * gh * gw);
    let mut s1_mask = vec![false; n * h * w];
    let mut s2_mask = vec![false; n * h * w];
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut sum = 0.0f64;
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        sum += d[(b * h + y) * w + x].to_f64();
                    }
                }
                let label = config.classify(sum / (p * p) as f64);
                patch_grid.push(label);
                let target = match label {
                    PatchLabel::Ambiguous => &mut s1_mask,
                    PatchLabel::Solid => &mut s2_mask,
                    PatchLabel::Background => continue,
                };
                for y in gy * p..(gy + 1) * p {
                    for x in gx * p..(gx + 1) * p {
                        target[(b * h + y) * w + x] = true;
                    }
                }
            }
        }
    }
    Ok(SemanticPartition {
        patch_size: p,
        batch: n,
        height: h,
        width: w,
        patch_grid,
        s1_mask,
        s2_mask,
    })
}

/// Downsamples `x` to `h×w`: average pooling for integer factors, bilinear
/// otherwise.
fn shrink_to<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let (_, _, xh, xw) = ctx.tape.value(x).dims4()?;
    if (xh, xw) == (h, w) {
        return Ok(x);
    }
    if xh % h == 0 && xw % w == 0 && xh / h == xw / w {
        let f = xh / h;
        return ctx.tape.avg_pool2d(x, f, f, 0, true);
    }
    ctx.tape.resize_bilinear(x, h, w)
}

/// Scaled dot-product attention from pooled `F1` queries to the masked
/// positions of the initial-map-weighted `F1`.
#[derive(Clone, Debug)]
pub struct CrossLayerAttention {
    pub width: usize,
    pub wq: Conv2d,
    pub wk: Conv2d,
    pub wv: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `N × C1 × h × w`.
    pub output: Var,
    /// `N × (h·w) × (h·w)`, queries by keys.
    pub weights: Var,
}

impl CrossLayerAttention {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        f1_channels: usize,
        rng: &mut R,
    ) -> Self {
        let c = f1_channels;
        Self {
            width: c,
            wq: Conv2d::pointwise(store, &format!("{name}.q"), c, c, rng),
            wk: Conv2d::pointwise(store, &format!("{name}.k"), c, c, rng),
            wv: Conv2d::pointwise(store, &format!("{name}.v"), c, c, rng),
        }
    }

    /// `region_mask` holds `N·h·w` flags at the initial-map resolution. An
    /// empty mask yields an all-zero output.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        f1: Var,
        m_initial: Var,
        region_mask: &[bool],
    ) -> Result<AttentionOutput> {
        let (n, c, fh, fw) = ctx.tape.value(f1).dims4()?;
        let (mn, mc, h, w) = ctx.tape.value(m_initial).dims4()?;
        if mn != n || mc != 1 || fh != 2 * h || fw != 2 * w {
            return Err(Error::shape(format!(
                "cross-layer attention: F1 {:?} must be twice the resolution of the map {:?}",
                ctx.tape.shape(f1),
                ctx.tape.shape(m_initial)
            )));
        }
        if c != self.width {
            return Err(Error::shape(format!(
                "cross-layer attention built for {} channels, got {c}",
                self.width
            )));
        }
        if region_mask.len() != n * h * w {
            return Err(Error::shape(format!(
                "region mask has {} entries, expected {}",
                region_mask.len(),
                n * h * w
            )));
        }
        let len = h * w;
        let pooled = ctx.tape.avg_pool2d(f1, 2, 2, 0, true)?;
        let m = ctx.tape.repeat_channels(m_initial, c)?;
        let weighted = ctx.tape.mul(pooled, m)?;
        let q = self.wq.forward(ctx, pooled)?;
        let k = self.wk.forward(ctx, weighted)?;
        let v = self.wv.forward(ctx, weighted)?;
        let q = ctx.tape.reshape(q, &[n, c, len])?;
        let k = ctx.tape.reshape(k, &[n, c, len])?;
        let v = ctx.tape.reshape(v, &[n, c, len])?;
        let qt = ctx.tape.transpose_last2(q)?;
        let scores = ctx.tape.matmul(qt, k)?;
        let scores = ctx.tape.scale(scores, T::of(1.0 / (c as f64).sqrt()));
        let weights = ctx.tape.masked_softmax(scores, region_mask)?;
        let wt = ctx.tape.transpose_last2(weights)?;
        let out = ctx.tape.matmul(v, wt)?;
        let output = ctx.tape.reshape(out, &[n, c, h, w])?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Additive attention gate: `skip ⊙ σ(ψ(ReLU(θ(skip) + φ(gating))))`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub theta: Conv2d,
    pub phi: Conv2d,
    pub psi: Conv2d,
}

#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub output: Var,
    /// `N×1×H×W` coefficients in `(0, 1)`.
    pub alpha: Var,
}

impl AttentionGate {
    /// `psi` starts at zero so every coefficient is 0.5 at initialization.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        skip_channels: usize,
        gating_channels: usize,
        inter: usize,
        rng: &mut R,
    ) -> Self {
        let theta = Conv2d::pointwise(store, &format!("{name}.theta"), skip_channels, inter, rng);
        let phi = Conv2d::pointwise(store, &format!("{name}.phi"), gating_channels, inter, rng);
        let psi = Conv2d::pointwise(store, &format!("{name}.psi"), inter, 1, rng);
        store
            .param_mut(psi.weight)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = T::zero());
        if let Some(b) = psi.bias {
            store
                .param_mut(b)
                .value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::zero());
        }
        Self { theta, phi, psi }
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        gating: Var,
        skip: Var,
    ) -> Result<GateOutput> {
        let (n, c, h, w) = ctx.tape.value(skip).dims4()?;
        let (gn, _, gh, gw) = ctx.tape.value(gating).dims4()?;
        if gn != n {
            return Err(Error::shape(format!(
                "gating batch {gn} differs from skip batch {n}"
            )));
        }
        let gating = if (gh, gw) == (h, w) {
            gating
        } else {
            ctx.tape.resize_bilinear(gating, h, w)?
        };
        let tx = self.theta.forward(ctx, skip)?;
        let pg = self.phi.forward(ctx, gating)?;
        let s = ctx.tape.add(tx, pg)?;
        let s = ctx.tape.relu(s);
        let logits = self.psi.forward(ctx, s)?;
        let alpha = ctx.tape.sigmoid(logits);
        let a = ctx.tape.repeat_channels(alpha, c)?;
        let output = ctx.tape.mul(skip, a)?;
        Ok(GateOutput { output, alpha })
    }
}

/// One enrichment path (S1 or S2).
#[derive(Clone, Debug)]
pub struct SesPath {
    pub ca: CrossLayerAttention,
    pub gates: Vec<AttentionGate>,
    /// Projections of the previous enriched level into the gating width,
    /// for levels 3 and 4.
    pub bridges: Vec<Conv2d>,
    pub msfa: Msfa,
}

impl SesPath {
    fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: [usize; 4],
        msfa_width: usize,
        rng: &mut R,
    ) -> Self {
        let c1 = channels[0];
        let ca = CrossLayerAttention::new(store, &format!("{name}.ca"), c1, rng);
        let mut gates = Vec::new();
        let mut bridges = Vec::new();
        for level in 2..=4 {
            let prefix = format!("{name}.ag{level}");
            gates.push(AttentionGate::new(
                store,
                &prefix,
                channels[level - 1],
                c1,
                c1,
                rng,
            ));
            if level > 2 {
                bridges.push(Conv2d::pointwise(
                    store,
                    &format!("{prefix}.bridge"),
                    channels[level - 2],
                    c1,
                    rng,
                ));
            }
        }
        let msfa = Msfa::new(
            store,
            &format!("{name}.msfa"),
            [channels[1], channels[2], channels[3]],
            msfa_width,
            rng,
        );
        Self {
            ca,
            gates,
            bridges,
            msfa,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Ses {
    pub config: PartitionConfig,
    pub paths: Vec<SesPath>,
    pub fuse: Conv2d,
}

#[derive(Clone, Debug)]
pub struct SesOutput {
    pub partition: SemanticPartition,
    /// Cross-layer attention outputs for S1 and S2.
    pub queries: [Var; 2],
    /// Enriched levels 2–4 for S1 and S2.
    pub enriched: [[Var; 3]; 2],
    pub m1: Var,
    pub m2: Var,
    pub m: Var,
}

impl Ses {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        channels: [usize; 4],
        msfa_width: usize,
        config: PartitionConfig,
        rng: &mut R,
    ) -> Self {
        let paths = Region::BOTH
            .iter()
            .map(|r| {
                SesPath::new(
                    store,
                    &format!("ses.{}", r.tag()),
                    channels,
                    msfa_width,
                    rng,
                )
            })
            .collect();
        let fuse = Conv2d::pointwise(store, "ses.fuse", 2, 1, rng);
        Self {
            config,
            paths,
            fuse,
        }
    }

    pub fn enrich_and_decode<T: Real>(
        &self,
        ctx: &mut Ctx<'_, T>,
        pyramid: &FeaturePyramid,
        m_initial: Var,
    ) -> Result<SesOutput> {
        let partition = partition_semantics(ctx.tape.value(m_initial), &self.config)?;
        ctx.tape
            .note_kink(partition.patch_grid.iter().map(|&l| l as u64));
        let f1 = pyramid.level(1);
        let mut queries = [m_initial; 2];
        let mut enriched = [[m_initial; 3]; 2];
        let mut maps = [m_initial; 2];
        for (k, (path, region)) in self.paths.iter().zip(Region::BOTH).enumerate() {
            let q = path
                .ca
                .forward(ctx, f1, m_initial, partition.mask(region))?
                .output;
            queries[k] = q;
            let mut prev: Option<Var> = None;
            for (i, gate) in path.gates.iter().enumerate() {
                let skip = pyramid.level(i + 2);
                let (_, _, h, w) = ctx.tape.value(skip).dims4()?;
                let mut gating = shrink_to(ctx, q, h, w)?;
                if let Some(p) = prev {
                    let down = shrink_to(ctx, p, h, w)?;
                    let bridged = path.bridges[i - 1].forward(ctx, down)?;
                    gating = ctx.tape.add(gating, bridged)?;
                }
                let rich = gate.forward(ctx, gating, skip)?.output;
                enriched[k][i] = rich;
                prev = Some(rich);
            }
            maps[k] = path
                .msfa
                .forward(ctx, enriched[k][0], enriched[k][1], enriched[k][2])?;
        }
        let cat = ctx.tape.concat(&maps, 1)?;
        let logits = self.fuse.forward(ctx, cat)?;
        let m = ctx.tape.sigmoid(logits);
        Ok(SesOutput {
            partition,
            queries,
            enriched,
            m1: maps[0],
            m2: maps[1],
            m,
        })
    }
}
