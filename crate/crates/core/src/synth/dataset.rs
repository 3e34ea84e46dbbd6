//! On-disk dataset layout: `rgb/`, `sar/` and `dsm/` tile directories plus
//! one instance JSON per split.

use std::fs;
use std::path::Path;

use super::{Result, SynthError};
use crate::metrics::{read_coco_json, write_coco_json, InstanceRecord};
use crate::raster::{read_tiff, write_tiff, RasterTile};

pub const RGB_DIR: &str = "rgb";
pub const SAR_DIR: &str = "sar";
pub const DSM_DIR: &str = "dsm";
pub const INSTANCES_FILE: &str = "instances.json";

/// One scene. The RGB tile's name identifies the scene; SAR and nDSM are
/// optional so prediction inputs can omit the target.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub name: String,
    pub rgb: RasterTile,
    pub sar: Option<RasterTile>,
    /// Heights in meters, nonnegative.
    pub ndsm: Option<RasterTile>,
    /// Ground-truth building instances (no scores).
    pub instances: Vec<InstanceRecord>,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes every sample's tiles as `<dir>/{rgb,sar,dsm}/<name>.tif` and all
/// instances to `<dir>/instances.json`.
pub fn write_dataset(samples: &[SceneSample], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in [RGB_DIR, SAR_DIR, DSM_DIR] {
        mkdir(&dir.join(sub))?;
    }
    let mut records = Vec::new();
    for s in samples {
        let file = format!("{}.tif", s.name);
        write_tiff(&s.rgb, dir.join(RGB_DIR).join(&file))?;
        if let Some(sar) = &s.sar {
            write_tiff(sar, dir.join(SAR_DIR).join(&file))?;
        }
        if let Some(nd) = &s.ndsm {
            write_tiff(nd, dir.join(DSM_DIR).join(&file))?;
        }
        records.extend(s.instances.iter().cloned());
    }
    write_coco_json(&records, dir.join(INSTANCES_FILE))?;
    Ok(())
}

/// Sorted stems of the `.tif` files in `dir`.
pub(crate) fn tif_stems(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|source| SynthError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut names = Vec::new();
    for e in entries {
        let p = e
            .map_err(|source| SynthError::Io {
                path: dir.to_path_buf(),
                source,
            })?
            .path();
        if p.extension().is_some_and(|x| x == "tif" || x == "tiff") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(stem.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

fn read_optional(dir: &Path, sub: &str, name: &str, rgb: &RasterTile) -> Result<Option<RasterTile>> {
    let path = dir.join(sub).join(format!("{name}.tif"));
    if !path.exists() {
        return Ok(None);
    }
    let t = read_tiff(&path)?;
    if t.bands() != 1 {
        return Err(SynthError::Data(format!(
            "{}: expected 1 band, found {}",
            path.display(),
            t.bands()
        )));
    }
    if (t.width(), t.height()) != (rgb.width(), rgb.height()) {
        return Err(SynthError::Data(format!(
            "{}: {}x{} does not match the RGB tile's {}x{}",
            path.display(),
            t.width(),
            t.height(),
            rgb.width(),
            rgb.height()
        )));
    }
    Ok(Some(t))
}

/// Loads a split written by [`write_dataset`]. Scenes are ordered by name;
/// instance records are attached by image id, which is the scene's index in
/// that order. nDSM values below zero are clamped to zero.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<SceneSample>> {
    let dir = dir.as_ref();
    let names = tif_stems(&dir.join(RGB_DIR))?;
    if names.is_empty() {
        return Err(SynthError::Data(format!(
            "{}: no RGB tiles",
            dir.join(RGB_DIR).display()
        )));
    }
    let mut samples = Vec::with_capacity(names.len());
    for name in names {
        let rgb = read_tiff(dir.join(RGB_DIR).join(format!("{name}.tif")))?;
        if rgb.bands() != 3 {
            return Err(SynthError::Data(format!(
                "RGB tile {name} has {} bands",
                rgb.bands()
            )));
        }
        let sar = read_optional(dir, SAR_DIR, &name, &rgb)?;
        let mut ndsm = read_optional(dir, DSM_DIR, &name, &rgb)?;
        if let Some(nd) = &mut ndsm {
            nd.clamp_negative();
        }
        samples.push(SceneSample {
            name,
            rgb,
            sar,
            ndsm,
            instances: Vec::new(),
        });
    }
    let json = dir.join(INSTANCES_FILE);
    if json.exists() {
        for rec in read_coco_json(&json)? {
            let n = samples.len();
            let s = samples.get_mut(rec.image_id as usize).ok_or_else(|| {
                SynthError::Data(format!(
                    "{}: image_id {} but only {n} scenes",
                    json.display(),
                    rec.image_id
                ))
            })?;
            s.instances.push(rec);
        }
    }
    Ok(samples)
}
