//! Procedural scenes with aligned RGB, SAR, nDSM and building masks.

mod dataset;

pub use dataset::{load_dataset, write_dataset, SceneSample, DSM_DIR, INSTANCES_FILE, RGB_DIR, SAR_DIR};

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use thiserror::Error;

use crate::metrics::{InstanceRecord, MetricsError, Rle};
use crate::raster::{RasterError, RasterTile, Samples};

/// Category id given to every building instance.
pub const BUILDING_CATEGORY: u64 = 1;
/// Mean ground colour (R, G, B) and the half-width of its per-pixel noise.
pub const GROUND_RGB: [f64; 3] = [70.0, 120.0, 60.0];
pub const GROUND_NOISE: f64 = 20.0;
/// Roof grey level is `ROOF_BASE + ROOF_SLOPE · (h + u)` with
/// `u ~ U(−j, j)` drawn once per building, `j` being
/// [`SceneSpec::roof_jitter`].
pub const ROOF_BASE: f64 = 70.0;
pub const ROOF_SLOPE: f64 = 2.5;
pub const ROOF_NOISE: f64 = 12.0;
/// Noise-free SAR intensity: `SAR_GROUND` off-building,
/// `SAR_GROUND + SAR_BUILDING + SAR_PER_METER · h` on buildings.
pub const SAR_GROUND: f64 = 0.05;
pub const SAR_BUILDING: f64 = 0.1;
pub const SAR_PER_METER: f64 = 0.01;
const PLACEMENT_TRIES: usize = 200;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error(
        "placed only {placed} of {requested} buildings on a {size}x{size} scene after \
         {tries} tries each; lower n_buildings or raise size"
    )]
    Placement {
        placed: usize,
        requested: usize,
        size: usize,
        tries: usize,
    },
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    /// Side length in pixels; a multiple of 16.
    pub size: usize,
    pub n_buildings: usize,
    /// Building heights in meters, `[min, max]`.
    pub height_range: (f64, f64),
    pub speckle_looks: u32,
    /// Half-width in meters of the per-building error in how roof
    /// brightness encodes height. Larger values make RGB less informative
    /// about height while SAR is unaffected.
    pub roof_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            size: 64,
            n_buildings: 4,
            height_range: (3.0, 60.0),
            speckle_looks: 4,
            roof_jitter: 8.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 16 != 0 {
            return Err(SynthError::InvalidSpec(format!(
                "size {} is not a positive multiple of 16",
                self.size
            )));
        }
        let (lo, hi) = self.height_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "height range [{lo}, {hi}] must be positive and ordered"
            )));
        }
        if !(self.roof_jitter >= 0.0 && self.roof_jitter.is_finite()) {
            return Err(SynthError::InvalidSpec(format!(
                "roof_jitter must be a nonnegative number, got {}",
                self.roof_jitter
            )));
        }
        if self.speckle_looks == 0 {
            return Err(SynthError::InvalidSpec("speckle_looks must be positive".into()));
        }
        Ok(())
    }
}

/// Axis-aligned footprint `(x, y, w, h)`.
type Rect = (usize, usize, usize, usize);

/// True when the rectangles are at least one pixel apart.
fn separated(a: Rect, b: Rect) -> bool {
    a.0 + a.2 < b.0 || b.0 + b.2 < a.0 || a.1 + a.3 < b.1 || b.1 + b.3 < a.1
}

fn place(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> Result<Vec<Rect>> {
    let size = spec.size;
    let lo = (size / 6).max(1);
    let hi = (size / 3).max(lo);
    let mut placed: Vec<Rect> = Vec::with_capacity(spec.n_buildings);
    for _ in 0..spec.n_buildings {
        let found = (0..PLACEMENT_TRIES).find_map(|_| {
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let r = (rng.gen_range(0..=size - w), rng.gen_range(0..=size - h), w, h);
            placed.iter().all(|&p| separated(p, r)).then_some(r)
        });
        match found {
            Some(r) => placed.push(r),
            None => {
                return Err(SynthError::Placement {
                    placed: placed.len(),
                    requested: spec.n_buildings,
                    size,
                    tries: PLACEMENT_TRIES,
                })
            }
        }
    }
    Ok(placed)
}

/// Noise-free SAR intensity for an nDSM plane.
pub fn clean_sar(ndsm: &[f64]) -> Vec<f64> {
    ndsm.iter()
        .map(|&h| {
            if h > 0.0 {
                SAR_GROUND + SAR_BUILDING + SAR_PER_METER * h
            } else {
                SAR_GROUND
            }
        })
        .collect()
}

/// Generates one scene named `name`.
pub fn generate_scene_named(spec: &SceneSpec, name: &str, image_id: u64) -> Result<SceneSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.size;
    let n = size * size;
    let rects = place(&mut rng, spec)?;
    let (hmin, hmax) = spec.height_range;
    let heights: Vec<f32> = rects
        .iter()
        .map(|_| {
            if hmax > hmin {
                rng.gen_range(hmin..hmax) as f32
            } else {
                hmin as f32
            }
        })
        .collect();

    let mut ndsm = vec![0f32; n];
    let mut instances = Vec::with_capacity(rects.len());
    for (&(x, y, w, h), &hv) in rects.iter().zip(&heights) {
        let mut mask = vec![false; n];
        for r in y..y + h {
            for c in x..x + w {
                ndsm[r * size + c] = hv;
                mask[r * size + c] = true;
            }
        }
        instances.push(InstanceRecord {
            image_id,
            category_id: BUILDING_CATEGORY,
            mask: Rle::from_mask(size, size, &mask)?,
            score: None,
        });
    }

    let mut rgb = vec![0f64; 3 * n];
    for (b, plane) in rgb.chunks_mut(n).enumerate() {
        for v in plane {
            *v = GROUND_RGB[b] + rng.gen_range(-GROUND_NOISE..GROUND_NOISE);
        }
    }
    for (&(x, y, w, h), &hv) in rects.iter().zip(&heights) {
        let u = if spec.roof_jitter > 0.0 {
            rng.gen_range(-spec.roof_jitter..spec.roof_jitter)
        } else {
            0.0
        };
        let g = ROOF_BASE + ROOF_SLOPE * (hv as f64 + u);
        let roof = [g, g, 1.05 * g];
        for (b, plane) in rgb.chunks_mut(n).enumerate() {
            for r in y..y + h {
                for c in x..x + w {
                    plane[r * size + c] = roof[b] + rng.gen_range(-ROOF_NOISE..ROOF_NOISE);
                }
            }
        }
    }
    let rgb: Vec<u8> = rgb.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();

    let looks = spec.speckle_looks as f64;
    let speckle = Gamma::new(looks, 1.0 / looks).expect("looks is positive");
    let ndsm64: Vec<f64> = ndsm.iter().map(|&v| v as f64).collect();
    let sar: Vec<f32> = clean_sar(&ndsm64)
        .into_iter()
        .map(|c| (c * speckle.sample(&mut rng)) as f32)
        .collect();

    Ok(SceneSample {
        name: name.to_string(),
        rgb: RasterTile::new(name, size, size, 3, Samples::U8(rgb))?,
        sar: Some(RasterTile::from_f32_plane(name, size, size, sar)?),
        ndsm: Some(RasterTile::from_f32_plane(name, size, size, ndsm)?),
        instances,
    })
}

/// Generates one scene named `scene_<seed>` with image id 0.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample> {
    generate_scene_named(spec, &format!("scene_{}", spec.seed), 0)
}

/// `n_scenes` scenes named `scene_0000`, `scene_0001`, … with image ids equal
/// to their index. Per-scene seeds are drawn from `seed`; the template's own
/// seed is ignored.
pub fn generate_dataset(template: &SceneSpec, n_scenes: usize, seed: u64) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_scenes)
        .map(|i| {
            let spec = SceneSpec {
                seed: rng.gen(),
                ..template.clone()
            };
            generate_scene_named(&spec, &format!("scene_{i:04}"), i as u64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane(t: &RasterTile) -> Vec<f64> {
        t.plane(0)
    }

    #[test]
    fn empty_scene() {
        let s = generate_scene(&SceneSpec {
            n_buildings: 0,
            ..Default::default()
        })
        .unwrap();
        assert!(plane(s.ndsm.as_ref().unwrap()).iter().all(|&v| v == 0.0));
        assert!(s.instances.is_empty());
    }

    #[test]
    fn same_seed_same_scene() {
        let spec = SceneSpec {
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn masks_cover_buildings_exactly() {
        for seed in 0..5 {
            let s = generate_scene(&SceneSpec {
                seed,
                n_buildings: 5,
                ..Default::default()
            })
            .unwrap();
            let nd = plane(s.ndsm.as_ref().unwrap());
            let area: usize = s.instances.iter().map(|i| i.mask.area()).sum();
            assert_eq!(area, nd.iter().filter(|&&v| v > 0.0).count());
            let mut cover = vec![0u8; nd.len()];
            for inst in &s.instances {
                for (c, m) in cover.iter_mut().zip(inst.mask.decode()) {
                    *c += m as u8;
                }
            }
            assert!(cover.iter().zip(&nd).all(|(&c, &h)| c == (h > 0.0) as u8));
        }
    }

    #[test]
    fn heights_in_range() {
        let s = generate_scene(&SceneSpec {
            seed: 3,
            n_buildings: 6,
            ..Default::default()
        })
        .unwrap();
        for v in plane(s.ndsm.as_ref().unwrap()) {
            assert!(v == 0.0 || (3.0..=60.0).contains(&v));
        }
    }

    #[test]
    fn overcrowded_scene_fails_with_density_message() {
        let err = generate_scene(&SceneSpec {
            size: 16,
            n_buildings: 40,
            ..Default::default()
        })
        .unwrap_err();
        assert!(matches!(err, SynthError::Placement { requested: 40, .. }));
        assert!(err.to_string().contains("lower n_buildings"));
    }

    #[test]
    fn invalid_specs() {
        let bad = [
            SceneSpec { size: 60, ..Default::default() },
            SceneSpec { height_range: (0.0, 5.0), ..Default::default() },
            SceneSpec { height_range: (9.0, 5.0), ..Default::default() },
            SceneSpec { speckle_looks: 0, ..Default::default() },
        ];
        for s in bad {
            assert!(matches!(generate_scene(&s), Err(SynthError::InvalidSpec(_))));
        }
    }

    #[test]
    fn clean_sar_is_brighter_on_buildings() {
        let c = clean_sar(&[0.0, 3.0, 60.0]);
        assert!(c[1] > c[0] && c[2] > c[1]);
    }
}
