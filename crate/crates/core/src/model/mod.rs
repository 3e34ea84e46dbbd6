//! Height-regression network: residual encoder, pyramid-pooling decoder and
//! the fusion variants built on top of it.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

/// Total encoder downsampling factor.
pub const OUTPUT_STRIDE: usize = 16;
/// Pyramid-pooling bin grids.
pub const PSP_BINS: [usize; 4] = [1, 2, 3, 6];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{mode} model requires a {modality} input")]
    MissingModality {
        mode: FusionMode,
        modality: &'static str,
    },
    #[error("{mode} model does not take a {modality} input")]
    SuperfluousModality {
        mode: FusionMode,
        modality: &'static str,
    },
    #[error("{modality} input has {got} channels, expected {expected}")]
    ChannelCount {
        modality: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("input extents {0:?} must be NCHW with H and W divisible by 16")]
    InputShape(Vec<usize>),
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("operation needs a {expected} model, got {got}")]
    WrongMode { expected: FusionMode, got: FusionMode },
    #[error("parameter set does not match the architecture: {0}")]
    ParamMismatch(String),
    #[error("unknown fusion mode `{0}`")]
    UnknownMode(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt checkpoint: {detail}")]
    Corrupt { path: PathBuf, detail: String },
    #[error("{path}: checkpoint format version {found}, this build reads {expected}")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    RgbOnly,
    SarOnly,
    /// RGB and SAR stacked into a 4-channel input.
    Early,
    /// Separate RGB and SAR encoders up to stage 2, concatenated features after.
    Intermediate,
    /// Two independent single-modality models whose outputs are averaged.
    Late,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::RgbOnly,
        FusionMode::SarOnly,
        FusionMode::Early,
        FusionMode::Intermediate,
        FusionMode::Late,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::RgbOnly => "rgb_only",
            FusionMode::SarOnly => "sar_only",
            FusionMode::Early => "early",
            FusionMode::Intermediate => "intermediate",
            FusionMode::Late => "late",
        }
    }

    pub fn needs_rgb(self) -> bool {
        self != FusionMode::SarOnly
    }

    pub fn needs_sar(self) -> bool {
        self != FusionMode::RgbOnly
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModelError::UnknownMode(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FusionVariant {
    pub mode: FusionMode,
    pub skip_connections: bool,
}

impl FusionVariant {
    pub fn new(mode: FusionMode, skip_connections: bool) -> Self {
        Self {
            mode,
            skip_connections,
        }
    }
}

/// Channel widths and block counts of the encoder.
///
/// Stage widths are `base_width · [1, 2, 4, 8]`; the stem has `base_width`
/// channels, each pyramid branch `2·base_width` and the decoder fusion conv
/// `4·base_width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ArchScale {
    pub base_width: usize,
    pub blocks: [usize; 4],
}

impl ArchScale {
    /// Widths `[16, 32, 64, 128]`, two residual blocks per stage.
    pub fn desk() -> Self {
        Self {
            base_width: 16,
            blocks: [2; 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 {
            return Err(ModelError::InvalidArch("base_width must be positive".into()));
        }
        if self.blocks.contains(&0) {
            return Err(ModelError::InvalidArch(format!(
                "every stage needs at least one block, got {:?}",
                self.blocks
            )));
        }
        Ok(())
    }

    pub fn stage_widths(&self) -> [usize; 4] {
        let b = self.base_width;
        [b, 2 * b, 4 * b, 8 * b]
    }

    pub fn psp_width(&self) -> usize {
        2 * self.base_width
    }

    pub fn decoder_width(&self) -> usize {
        4 * self.base_width
    }
}

impl Default for ArchScale {
    fn default() -> Self {
        Self::desk()
    }
}

/// First-conv adaptation for the 4th (SAR) input channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    Zeros,
    MeanRgb,
}

/// Widens an `O×3×k×k` stem weight to `O×4×k×k`.
pub fn adapt_first_conv(weight: &Tensor, mode: InitMode) -> Result<Tensor> {
    let s = weight.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(ModelError::ChannelCount {
            modality: "stem weight",
            expected: 3,
            got: s.get(1).copied().unwrap_or(0),
        });
    }
    let (o, kk) = (s[0], s[2] * s[3]);
    let src = weight.data();
    let mut out = Vec::with_capacity(o * 4 * kk);
    for oi in 0..o {
        let base = oi * 3 * kk;
        out.extend_from_slice(&src[base..base + 3 * kk]);
        for j in 0..kk {
            out.push(match mode {
                InitMode::Zeros => 0.0,
                InitMode::MeanRgb => {
                    (src[base + j] + src[base + kk + j] + src[base + 2 * kk + j]) / 3.0
                }
            });
        }
    }
    Ok(Tensor::new([o, 4, s[2], s[3]], out)?)
}

/// Elementwise `(a + b) / 2`.
pub fn late_fuse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.average(b)?)
}

/// Parameter layout for one encoder trunk, stem through `last_stage`.
struct LayerSpec {
    name: String,
    out: usize,
    inp: usize,
    k: usize,
}

fn conv_spec(specs: &mut Vec<LayerSpec>, name: String, inp: usize, out: usize, k: usize) {
    specs.push(LayerSpec { name, out, inp, k });
}

fn stage_specs(
    specs: &mut Vec<LayerSpec>,
    prefix: &str,
    arch: &ArchScale,
    stage: usize,
    in_ch: usize,
) -> usize {
    let w = arch.stage_widths()[stage];
    let mut c = in_ch;
    for b in 0..arch.blocks[stage] {
        let p = format!("{prefix}layer{}.{b}", stage + 1);
        conv_spec(specs, format!("{p}.conv1"), c, w, 3);
        conv_spec(specs, format!("{p}.conv2"), w, w, 3);
        if c != w || (b == 0 && stage_stride(stage) != 1) {
            conv_spec(specs, format!("{p}.down"), c, w, 1);
        }
        c = w;
    }
    w
}

/// Stage 1 follows a 2×2 max pool; stages 2 and 3 halve resolution; stage 4
/// keeps it.
fn stage_stride(stage: usize) -> usize {
    match stage {
        1 | 2 => 2,
        _ => 1,
    }
}

fn layer_specs(variant: FusionVariant, arch: &ArchScale) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let trunk = |specs: &mut Vec<LayerSpec>, prefix: &str, in_ch: usize| {
        conv_spec(specs, format!("{prefix}stem"), in_ch, arch.base_width, 3);
        let c = stage_specs(specs, prefix, arch, 0, arch.base_width);
        stage_specs(specs, prefix, arch, 1, c)
    };
    let (c2, branches) = match variant.mode {
        FusionMode::RgbOnly => (trunk(&mut specs, "", 3), 1),
        FusionMode::SarOnly => (trunk(&mut specs, "", 1), 1),
        FusionMode::Early => (trunk(&mut specs, "", 4), 1),
        FusionMode::Intermediate => {
            let a = trunk(&mut specs, "rgb.", 3);
            let b = trunk(&mut specs, "sar.", 1);
            (a + b, 2)
        }
        FusionMode::Late => unreachable!("late models are built from two branches"),
    };
    let c3 = stage_specs(&mut specs, "", arch, 2, c2);
    let c4 = stage_specs(&mut specs, "", arch, 3, c3);
    for i in 0..PSP_BINS.len() {
        conv_spec(&mut specs, format!("psp.{i}"), c4, arch.psp_width(), 1);
    }
    let cat = c4 + PSP_BINS.len() * arch.psp_width();
    conv_spec(&mut specs, "fuse".into(), cat, arch.decoder_width(), 1);
    conv_spec(&mut specs, "head".into(), arch.decoder_width(), 1, 3);
    if variant.skip_connections {
        let w = arch.stage_widths();
        conv_spec(&mut specs, "skip1".into(), branches * w[0], 1, 1);
        conv_spec(&mut specs, "skip2".into(), branches * w[1], 1, 1);
    }
    specs
}

fn init_params(specs: &[LayerSpec], seed: u64) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    for s in specs {
        let fan_in = s.inp * s.k * s.k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Tensor::from_fn([s.out, s.inp, s.k, s.k], |_| rng.gen_range(-bound..bound));
        params.insert(format!("{}.weight", s.name), w)?;
        params.insert(format!("{}.bias", s.name), Tensor::zeros([s.out]))?;
    }
    Ok(params)
}

/// Seeds of the two branches of a late-fusion model.
fn late_seeds(seed: u64) -> (u64, u64) {
    (seed, seed.wrapping_add(0x9E37_79B9_7F4A_7C15))
}

/// Graph nodes produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Full-resolution height map, `N×1×H×W`.
    pub output: Var,
    /// Decoder head output before the final upsample, `N×1×H/16×W/16`.
    pub coarse: Var,
    /// Per-branch outputs of a late-fusion model (RGB, SAR); empty otherwise.
    pub branches: Vec<Var>,
}

/// A network in one fusion variant together with its parameters.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    variant: FusionVariant,
    arch: ArchScale,
    params: ParamStore,
    /// SAR input mean and std recorded at training time.
    sar_norm: Option<(f64, f64)>,
}

pub fn build_model(variant: FusionVariant, arch: ArchScale, seed: u64) -> Result<ModelGraph> {
    arch.validate()?;
    if variant.mode == FusionMode::Late {
        let (sa, sb) = late_seeds(seed);
        let a = build_model(FusionVariant::new(FusionMode::RgbOnly, variant.skip_connections), arch, sa)?;
        let b = build_model(FusionVariant::new(FusionMode::SarOnly, variant.skip_connections), arch, sb)?;
        return ModelGraph::late_from_branches(&a, &b);
    }
    Ok(ModelGraph {
        variant,
        arch,
        params: init_params(&layer_specs(variant, &arch), seed)?,
        sar_norm: None,
    })
}

fn expected_shapes(variant: FusionVariant, arch: &ArchScale) -> Vec<(String, Vec<usize>)> {
    let flat = |v: FusionVariant| {
        layer_specs(v, arch).into_iter().flat_map(|s| {
            [
                (format!("{}.weight", s.name), vec![s.out, s.inp, s.k, s.k]),
                (format!("{}.bias", s.name), vec![s.out]),
            ]
        })
    };
    if variant.mode == FusionMode::Late {
        let skip = variant.skip_connections;
        flat(FusionVariant::new(FusionMode::RgbOnly, skip))
            .map(|(n, s)| (format!("rgb.{n}"), s))
            .chain(
                flat(FusionVariant::new(FusionMode::SarOnly, skip)).map(|(n, s)| (format!("sar.{n}"), s)),
            )
            .collect()
    } else {
        flat(variant).collect()
    }
}

impl ModelGraph {
    /// Wraps an existing parameter set, checking names, order and shapes
    /// against the architecture.
    pub fn from_params(variant: FusionVariant, arch: ArchScale, params: ParamStore) -> Result<Self> {
        arch.validate()?;
        let expected = expected_shapes(variant, &arch);
        if expected.len() != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), (pn, pt)) in expected.iter().zip(params.iter()) {
            if name != pn || shape.as_slice() != pt.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "expected {name} {shape:?}, found {pn} {:?}",
                    pt.shape()
                )));
            }
        }
        Ok(Self {
            variant,
            arch,
            params,
            sar_norm: None,
        })
    }

    /// Combines an RGB-only and a SAR-only model into a late-fusion model.
    pub fn late_from_branches(rgb: &ModelGraph, sar: &ModelGraph) -> Result<Self> {
        for (m, want) in [(rgb, FusionMode::RgbOnly), (sar, FusionMode::SarOnly)] {
            if m.variant.mode != want {
                return Err(ModelError::WrongMode {
                    expected: want,
                    got: m.variant.mode,
                });
            }
        }
        if rgb.arch != sar.arch || rgb.variant.skip_connections != sar.variant.skip_connections {
            return Err(ModelError::ParamMismatch(
                "late-fusion branches differ in architecture".into(),
            ));
        }
        let mut params = ParamStore::new();
        for (prefix, m) in [("rgb.", rgb), ("sar.", sar)] {
            for (n, t) in m.params.iter() {
                params.insert(format!("{prefix}{n}"), t.clone())?;
            }
        }
        Ok(Self {
            variant: FusionVariant::new(FusionMode::Late, rgb.variant.skip_connections),
            arch: rgb.arch,
            params,
            sar_norm: sar.sar_norm,
        })
    }

    /// Splits a late-fusion model into its RGB-only and SAR-only branches.
    pub fn late_branches(&self) -> Result<(ModelGraph, ModelGraph)> {
        if self.variant.mode != FusionMode::Late {
            return Err(ModelError::WrongMode {
                expected: FusionMode::Late,
                got: self.variant.mode,
            });
        }
        let skip = self.variant.skip_connections;
        let split = |prefix: &str, mode| -> Result<ModelGraph> {
            let mut p = ParamStore::new();
            for (n, t) in self.params.iter() {
                if let Some(rest) = n.strip_prefix(prefix) {
                    p.insert(rest, t.clone())?;
                }
            }
            ModelGraph::from_params(FusionVariant::new(mode, skip), self.arch, p)
        };
        let mut sar = split("sar.", FusionMode::SarOnly)?;
        sar.sar_norm = self.sar_norm;
        Ok((split("rgb.", FusionMode::RgbOnly)?, sar))
    }

    pub fn variant(&self) -> FusionVariant {
        self.variant
    }

    pub fn arch(&self) -> ArchScale {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn sar_normalization(&self) -> Option<(f64, f64)> {
        self.sar_norm
    }

    /// Records the mean and std used to normalize SAR inputs.
    pub fn set_sar_normalization(&mut self, mean: f64, std: f64) -> Result<()> {
        if !(mean.is_finite() && std.is_finite() && std > 0.0) {
            return Err(ModelError::InvalidArch(format!(
                "SAR normalization needs finite mean and positive std, got {mean}, {std}"
            )));
        }
        self.sar_norm = Some((mean, std));
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn check_input(
        &self,
        g: &Graph,
        v: Option<Var>,
        modality: &'static str,
        needed: bool,
        channels: usize,
    ) -> Result<Option<Var>> {
        let mode = self.variant.mode;
        match (v, needed) {
            (None, true) => Err(ModelError::MissingModality { mode, modality }),
            (Some(_), false) => Err(ModelError::SuperfluousModality { mode, modality }),
            (None, false) => Ok(None),
            (Some(v), true) => {
                let s = g.shape(v);
                if s.len() != 4 || s[2] % OUTPUT_STRIDE != 0 || s[3] % OUTPUT_STRIDE != 0 || s[2] == 0 || s[3] == 0 {
                    return Err(ModelError::InputShape(s.to_vec()));
                }
                if s[1] != channels {
                    return Err(ModelError::ChannelCount {
                        modality,
                        expected: channels,
                        got: s[1],
                    });
                }
                Ok(Some(v))
            }
        }
    }

    /// Records a forward pass on `g` using parameter nodes `vars` (from
    /// [`ParamStore::attach`]). Inputs are normalized `N×C×H×W` tensors with
    /// H and W divisible by 16.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        vars: &IndexMap<String, Var>,
        rgb: Option<Var>,
        sar: Option<Var>,
    ) -> Result<ForwardOutput> {
        let mode = self.variant.mode;
        let rgb = self.check_input(g, rgb, "rgb", mode.needs_rgb(), 3)?;
        let sar = self.check_input(g, sar, "sar", mode.needs_sar(), 1)?;
        if let (Some(a), Some(b)) = (rgb, sar) {
            if g.shape(a)[2..] != g.shape(b)[2..] || g.shape(a)[0] != g.shape(b)[0] {
                return Err(ModelError::InputShape(g.shape(b).to_vec()));
            }
        }
        let mut net = Net {
            g,
            vars,
            arch: &self.arch,
        };
        match mode {
            FusionMode::RgbOnly | FusionMode::SarOnly => {
                let x = rgb.or(sar).expect("checked above");
                net.single("", x, self.variant.skip_connections)
            }
            FusionMode::Early => {
                let x = net.g.concat(&[rgb.unwrap(), sar.unwrap()], 1)?;
                net.single("", x, self.variant.skip_connections)
            }
            FusionMode::Intermediate => {
                let (h, w) = spatial(net.g, rgb.unwrap());
                let (a1, a2) = net.trunk("rgb.", rgb.unwrap())?;
                let (b1, b2) = net.trunk("sar.", sar.unwrap())?;
                let f1 = net.g.concat(&[a1, b1], 1)?;
                let f2 = net.g.concat(&[a2, b2], 1)?;
                net.tail(f1, f2, h, w, self.variant.skip_connections)
            }
            FusionMode::Late => {
                let skip = self.variant.skip_connections;
                let a = net.single("rgb.", rgb.unwrap(), skip)?.output;
                let b = net.single("sar.", sar.unwrap(), skip)?.output;
                let s = net.g.add(a, b)?;
                let output = net.g.scale(s, 0.5);
                Ok(ForwardOutput {
                    output,
                    coarse: output,
                    branches: vec![a, b],
                })
            }
        }
    }

    /// Inference forward pass returning the `N×1×H×W` height map.
    pub fn forward(&self, rgb: Option<&Tensor>, sar: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_full(rgb, sar)?.0)
    }

    /// Like [`ModelGraph::forward`] but also returns the coarse map (for
    /// late fusion, the averaged full-resolution output stands in).
    pub fn forward_full(&self, rgb: Option<&Tensor>, sar: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let vars: IndexMap<String, Var> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), g.constant(t.clone())))
            .collect();
        let r = rgb.map(|t| g.constant(t.clone()));
        let s = sar.map(|t| g.constant(t.clone()));
        let out = self.forward_graph(&mut g, &vars, r, s)?;
        Ok((g.value(out.output).clone(), g.value(out.coarse).clone()))
    }

    /// Forward pass of an intermediate-fusion model.
    pub fn forward_intermediate(&self, rgb: &Tensor, sar: &Tensor) -> Result<Tensor> {
        if self.variant.mode != FusionMode::Intermediate {
            return Err(ModelError::WrongMode {
                expected: FusionMode::Intermediate,
                got: self.variant.mode,
            });
        }
        self.forward(Some(rgb), Some(sar))
    }
}

fn spatial(g: &Graph, v: Var) -> (usize, usize) {
    let s = g.shape(v);
    (s[2], s[3])
}

struct Net<'a> {
    g: &'a mut Graph,
    vars: &'a IndexMap<String, Var>,
    arch: &'a ArchScale,
}

impl Net<'_> {
    fn param(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::ParamMismatch(format!("missing parameter {name}")))
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = self.param(&format!("{name}.weight"))?;
        let b = self.param(&format!("{name}.bias"))?;
        let pad = self.g.shape(w)[2] / 2;
        Ok(self.g.conv2d(x, w, Some(b), stride, pad)?)
    }

    fn block(&mut self, name: &str, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv(&format!("{name}.conv1"), x, stride)?;
        let y = self.g.relu(y);
        let y = self.conv(&format!("{name}.conv2"), y, 1)?;
        let down = format!("{name}.down");
        let short = if self.vars.contains_key(&format!("{down}.weight")) {
            self.conv(&down, x, stride)?
        } else {
            x
        };
        let s = self.g.add(y, short)?;
        Ok(self.g.relu(s))
    }

    fn stage(&mut self, prefix: &str, stage: usize, mut x: Var) -> Result<Var> {
        for b in 0..self.arch.blocks[stage] {
            let stride = if b == 0 { stage_stride(stage) } else { 1 };
            x = self.block(&format!("{prefix}layer{}.{b}", stage + 1), x, stride)?;
        }
        Ok(x)
    }

    /// Stem through stage 2; returns the stage-1 and stage-2 features.
    fn trunk(&mut self, prefix: &str, x: Var) -> Result<(Var, Var)> {
        let x = self.conv(&format!("{prefix}stem"), x, 2)?;
        let x = self.g.relu(x);
        let x = self.g.max_pool2d(x, 2, 2)?;
        let f1 = self.stage(prefix, 0, x)?;
        let f2 = self.stage(prefix, 1, f1)?;
        Ok((f1, f2))
    }

    fn single(&mut self, prefix: &str, x: Var, skip: bool) -> Result<ForwardOutput> {
        let (h, w) = spatial(self.g, x);
        let (f1, f2) = self.trunk(prefix, x)?;
        self.tail_prefixed(prefix, f1, f2, h, w, skip)
    }

    fn tail(&mut self, f1: Var, f2: Var, h: usize, w: usize, skip: bool) -> Result<ForwardOutput> {
        self.tail_prefixed("", f1, f2, h, w, skip)
    }

    /// Stages 3–4, pyramid pooling decoder, upsample and skip projections.
    fn tail_prefixed(
        &mut self,
        prefix: &str,
        f1: Var,
        f2: Var,
        h: usize,
        w: usize,
        skip: bool,
    ) -> Result<ForwardOutput> {
        let f3 = self.stage(prefix, 2, f2)?;
        let f4 = self.stage(prefix, 3, f3)?;
        let (ch, cw) = spatial(self.g, f4);
        let mut parts = vec![f4];
        for (i, &bins) in PSP_BINS.iter().enumerate() {
            let p = self.g.adaptive_avg_pool2d(f4, bins.min(ch), bins.min(cw))?;
            let p = self.conv(&format!("{prefix}psp.{i}"), p, 1)?;
            let p = self.g.relu(p);
            parts.push(self.g.bilinear_upsample(p, ch, cw)?);
        }
        let cat = self.g.concat(&parts, 1)?;
        let d = self.conv(&format!("{prefix}fuse"), cat, 1)?;
        let d = self.g.relu(d);
        let coarse = self.conv(&format!("{prefix}head"), d, 1)?;
        let mut output = self.g.bilinear_upsample(coarse, h, w)?;
        if skip {
            for (name, f) in [("skip1", f1), ("skip2", f2)] {
                let p = self.conv(&format!("{prefix}{name}"), f, 1)?;
                let p = self.g.bilinear_upsample(p, h, w)?;
                output = self.g.add(output, p)?;
            }
        }
        Ok(ForwardOutput {
            output,
            coarse,
            branches: Vec::new(),
        })
    }
}
