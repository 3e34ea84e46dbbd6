//! Raster tiles, the TIFF interchange subset, and band normalization.

mod tiff;

pub use tiff::{read_tiff, write_tiff};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported TIFF feature: {feature}")]
    Unsupported { path: PathBuf, feature: String },
    #[error("{path}: truncated TIFF ({detail})")]
    Truncated { path: PathBuf, detail: String },
    #[error("{path}: malformed TIFF ({detail})")]
    Malformed { path: PathBuf, detail: String },
    #[error("invalid tile: {0}")]
    InvalidTile(String),
    #[error("band count mismatch: expected {expected}, got {got}")]
    BandMismatch { expected: usize, got: usize },
    #[error("spatial mismatch: {0:?} vs {1:?}")]
    SpatialMismatch(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, RasterError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    U8,
    U16,
    F32,
}

impl SampleFormat {
    pub fn bits(self) -> u16 {
        match self {
            SampleFormat::U8 => 8,
            SampleFormat::U16 => 16,
            SampleFormat::F32 => 32,
        }
    }
}

/// Band-sequential sample storage.
#[derive(Clone, Debug, PartialEq)]
pub enum Samples {
    U8(Vec<u8>),
    U16(Vec<u16>),
    F32(Vec<f32>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::U8(v) => v.len(),
            Samples::U16(v) => v.len(),
            Samples::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn format(&self) -> SampleFormat {
        match self {
            Samples::U8(_) => SampleFormat::U8,
            Samples::U16(_) => SampleFormat::U16,
            Samples::F32(_) => SampleFormat::F32,
        }
    }

    fn get(&self, i: usize) -> f64 {
        match self {
            Samples::U8(v) => v[i] as f64,
            Samples::U16(v) => v[i] as f64,
            Samples::F32(v) => v[i] as f64,
        }
    }
}

/// An image of `bands` planes, each `width × height` samples in row-major
/// order. Carries no georeferencing.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterTile {
    name: String,
    width: usize,
    height: usize,
    bands: usize,
    samples: Samples,
}

/// Names become file stems, so they must be plain path components.
fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name != "."
        && name != ".."
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(RasterError::InvalidTile(format!(
            "tile name {name:?} is not filesystem-safe"
        )))
    }
}

impl RasterTile {
    pub fn new(
        name: impl Into<String>,
        width: usize,
        height: usize,
        bands: usize,
        samples: Samples,
    ) -> Result<Self> {
        let name = name.into();
        check_name(&name)?;
        if width == 0 || height == 0 || !(1..=4).contains(&bands) {
            return Err(RasterError::InvalidTile(format!(
                "{name}: {width}x{height} with {bands} bands"
            )));
        }
        if samples.len() != width * height * bands {
            return Err(RasterError::InvalidTile(format!(
                "{name}: expected {} samples, got {}",
                width * height * bands,
                samples.len()
            )));
        }
        Ok(Self {
            name,
            width,
            height,
            bands,
            samples,
        })
    }

    /// Single-band 32-bit float tile, the format used for height maps.
    pub fn from_f32_plane(
        name: impl Into<String>,
        width: usize,
        height: usize,
        plane: Vec<f32>,
    ) -> Result<Self> {
        Self::new(name, width, height, 1, Samples::F32(plane))
    }

    /// Converts a `1×1×H×W` (or `H×W`) tensor into a float height tile.
    pub fn from_height_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, 1, h, w] | [h, w] => (*h, *w),
            s => {
                return Err(RasterError::InvalidTile(format!(
                    "height map must be 1x1xHxW, got {s:?}"
                )))
            }
        };
        let plane = t.data().iter().map(|v| *v as f32).collect();
        Self::from_f32_plane(name, w, h, plane)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) -> Result<()> {
        let name = name.into();
        check_name(&name)?;
        self.name = name;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn sample_format(&self) -> SampleFormat {
        self.samples.format()
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn sample(&self, band: usize, row: usize, col: usize) -> f64 {
        self.samples
            .get((band * self.height + row) * self.width + col)
    }

    /// One band widened to `f64`.
    pub fn plane(&self, band: usize) -> Vec<f64> {
        let n = self.width * self.height;
        (band * n..(band + 1) * n)
            .map(|i| self.samples.get(i))
            .collect()
    }

    /// Replaces negative samples with zero (nodata handling for height tiles).
    pub fn clamp_negative(&mut self) {
        match &mut self.samples {
            Samples::F32(v) => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Samples::U8(_) | Samples::U16(_) => {}
        }
    }

    /// All bands as a `1×B×H×W` tensor of raw sample values.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height * self.bands;
        Tensor::new(
            [1, self.bands, self.height, self.width],
            (0..n).map(|i| self.samples.get(i)).collect(),
        )
        .expect("tile invariant: sample count matches extents")
    }
}

/// Per-band affine normalization `(x − mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationSpec {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl NormalizationSpec {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(RasterError::BandMismatch {
                expected: mean.len(),
                got: std.len(),
            });
        }
        if std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(RasterError::InvalidTile(format!(
                "normalization std must be positive, got {std:?}"
            )));
        }
        Ok(Self { mean, std })
    }

    /// ImageNet channel statistics on the 0–255 scale.
    pub fn imagenet_rgb() -> Self {
        Self {
            mean: vec![123.675, 116.28, 103.53],
            std: vec![58.395, 57.12, 57.375],
        }
    }

    /// Per-band mean and population standard deviation over a set of tiles.
    pub fn from_tiles<'a>(tiles: impl IntoIterator<Item = &'a RasterTile>) -> Result<Self> {
        let mut sums: Vec<(f64, f64, usize)> = Vec::new();
        for t in tiles {
            if sums.is_empty() {
                sums = vec![(0.0, 0.0, 0); t.bands()];
            } else if sums.len() != t.bands() {
                return Err(RasterError::BandMismatch {
                    expected: sums.len(),
                    got: t.bands(),
                });
            }
            for (b, acc) in sums.iter_mut().enumerate() {
                for v in t.plane(b) {
                    acc.0 += v;
                    acc.1 += v * v;
                    acc.2 += 1;
                }
            }
        }
        if sums.is_empty() {
            return Err(RasterError::InvalidTile("no tiles to compute statistics".into()));
        }
        let mean: Vec<f64> = sums.iter().map(|(s, _, n)| s / *n as f64).collect();
        let std = sums
            .iter()
            .zip(&mean)
            .map(|((_, sq, n), m)| (sq / *n as f64 - m * m).max(0.0).sqrt().max(1e-12))
            .collect();
        Self::new(mean, std)
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn bands(&self) -> usize {
        self.mean.len()
    }
}

/// `(sample − mean[b]) / std[b]` for every band, as a `1×B×H×W` tensor.
pub fn normalize(tile: &RasterTile, spec: &NormalizationSpec) -> Result<Tensor> {
    if spec.bands() != tile.bands() {
        return Err(RasterError::BandMismatch {
            expected: spec.bands(),
            got: tile.bands(),
        });
    }
    let mut t = tile.to_tensor();
    let plane = tile.width() * tile.height();
    for (b, chunk) in t.data_mut().chunks_mut(plane).enumerate() {
        let (m, s) = (spec.mean[b], spec.std[b]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(t)
}

/// Inverse of [`normalize`] on a `1×B×H×W` tensor.
pub fn denormalize(t: &Tensor, spec: &NormalizationSpec) -> Result<Tensor> {
    let [_, c, h, w] = match t.shape() {
        [n, c, h, w] => [*n, *c, *h, *w],
        s => return Err(RasterError::SpatialMismatch(s.to_vec(), vec![1, spec.bands()])),
    };
    if c != spec.bands() {
        return Err(RasterError::BandMismatch {
            expected: spec.bands(),
            got: c,
        });
    }
    let mut out = t.clone();
    for (i, chunk) in out.data_mut().chunks_mut(h * w).enumerate() {
        let b = i % c;
        let (m, s) = (spec.mean[b], spec.std[b]);
        chunk.iter_mut().for_each(|v| *v = *v * s + m);
    }
    Ok(out)
}

/// Stacks RGB and SAR inputs channel-wise in the order `[R, G, B, SAR]`.
pub fn stack_early_fusion(rgb: &Tensor, sar: &Tensor) -> Result<Tensor> {
    let (rs, ss) = (rgb.shape(), sar.shape());
    let ok = rs.len() == 4 && ss.len() == 4 && rs[1] == 3 && ss[1] == 1 && rs[0] == ss[0];
    if !ok || rs[2..] != ss[2..] {
        return Err(RasterError::SpatialMismatch(rs.to_vec(), ss.to_vec()));
    }
    Ok(Tensor::concat(&[rgb, sar], 1)?)
}
