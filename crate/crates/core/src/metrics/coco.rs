//! COCO-style instance JSON (uncompressed RLE segmentations only).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::mask::{InstanceRecord, Rle};
use super::{MetricsError, Result};

#[derive(Serialize, Deserialize)]
struct RleJson {
    /// `[height, width]`
    size: [usize; 2],
    counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    image_id: u64,
    category_id: u64,
    segmentation: RleJson,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    score: Option<f64>,
}

pub fn parse_coco_json(text: &str) -> Result<Vec<InstanceRecord>> {
    let raw: Vec<RecordJson> = serde_json::from_str(text)?;
    raw.into_iter()
        .map(|r| {
            let [h, w] = r.segmentation.size;
            Ok(InstanceRecord {
                image_id: r.image_id,
                category_id: r.category_id,
                mask: Rle::new(h, w, r.segmentation.counts)?,
                score: r.score,
            })
        })
        .collect()
}

pub fn to_coco_json(records: &[InstanceRecord]) -> String {
    let raw: Vec<RecordJson> = records
        .iter()
        .map(|r| RecordJson {
            image_id: r.image_id,
            category_id: r.category_id,
            segmentation: RleJson {
                size: [r.mask.height(), r.mask.width()],
                counts: r.mask.counts().to_vec(),
            },
            score: r.score,
        })
        .collect();
    serde_json::to_string_pretty(&raw).expect("records serialize")
}

pub fn read_coco_json(path: impl AsRef<Path>) -> Result<Vec<InstanceRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_coco_json(&text).map_err(|e| match e {
        MetricsError::Json(err) => MetricsError::Malformed {
            path: path.to_path_buf(),
            detail: err.to_string(),
        },
        other => other,
    })
}

pub fn write_coco_json(records: &[InstanceRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    super::write_atomic(path, to_coco_json(records).as_bytes())
}
