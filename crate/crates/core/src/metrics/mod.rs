//! Evaluation: height accuracy, instance-mask AP50 and the combined score.

mod coco;
mod height;
mod mask;

pub use coco::{parse_coco_json, read_coco_json, to_coco_json, write_coco_json};
pub use height::{
    delta1, mae, r2, rmse, Delta1, HeightMetricsReport, DEFAULT_FLOOR_EPS, DELTA1_THRESHOLD,
};
pub use mask::{ap50, mask_iou, ApReport, CategoryCurve, InstanceRecord, Match, Rle};

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} predicted vs {1} reference samples")]
    ShapeMismatch(usize, usize),
    #[error("no samples to evaluate")]
    Empty,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("r2 is undefined: reference heights have zero variance")]
    UndefinedVariance,
    #[error("mask dimensions differ: {a:?} vs {b:?}")]
    MaskDims { a: (usize, usize), b: (usize, usize) },
    #[error("IoU undefined: both masks are empty")]
    EmptyUnion,
    #[error("RLE counts sum to {got}, mask has {expected} pixels")]
    RleLength { expected: usize, got: usize },
    #[error("prediction {index} has score {score} outside [0, 1]")]
    ScoreRange { index: usize, score: f64 },
    #[error("prediction {0} has no score")]
    MissingScore(usize),
    #[error("no ground-truth instances")]
    NoGroundTruth,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Malformed { path: PathBuf, detail: String },
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Mean of mask AP50 and height δ1, both fractions in `[0, 1]`.
pub fn combined_score(ap50: f64, delta1: f64) -> Result<f64> {
    for (name, v) in [("ap50", ap50), ("delta1", delta1)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(MetricsError::InvalidArgument(format!(
                "{name} = {v} is outside [0, 1]"
            )));
        }
    }
    Ok((ap50 + delta1) / 2.0)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let io = |source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    };
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

/// Evaluation summary written as `key: value` lines.
///
/// Every report carries the same six keys in a fixed order; metrics that a
/// given evaluation did not produce are written as `NA`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub delta1: Option<f64>,
    pub rmse: Option<f64>,
    pub mae: Option<f64>,
    pub r2: Option<f64>,
    pub ap50: Option<f64>,
    pub combined_score: Option<f64>,
}

pub const REPORT_KEYS: [&str; 6] = ["delta1", "rmse", "mae", "r2", "ap50", "combined_score"];

impl EvalReport {
    pub fn from_height(h: &HeightMetricsReport) -> Self {
        Self {
            delta1: Some(h.delta1),
            rmse: Some(h.rmse),
            mae: Some(h.mae),
            r2: Some(h.r2),
            ..Self::default()
        }
    }

    /// Height metrics over pooled pixels. R² is left out (`NA`) when the
    /// reference heights are constant.
    pub fn height(pred: &[f64], gt: &[f64]) -> Result<Self> {
        let d = delta1(pred, gt, DELTA1_THRESHOLD, DEFAULT_FLOOR_EPS)?;
        let r2 = match r2(pred, gt) {
            Ok(v) => Some(v),
            Err(MetricsError::UndefinedVariance) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            delta1: Some(d.fraction),
            rmse: Some(rmse(pred, gt)?),
            mae: Some(mae(pred, gt)?),
            r2,
            ..Self::default()
        })
    }

    pub fn from_ap(ap50: f64) -> Self {
        Self {
            ap50: Some(ap50),
            ..Self::default()
        }
    }

    /// Takes height metrics from `height` and AP50 from `masks`, and fills in
    /// the combined score.
    pub fn merge(height: &EvalReport, masks: &EvalReport) -> Result<Self> {
        let ap50 = masks
            .ap50
            .ok_or_else(|| MetricsError::InvalidArgument("mask report has no ap50".into()))?;
        let delta1 = height
            .delta1
            .ok_or_else(|| MetricsError::InvalidArgument("height report has no delta1".into()))?;
        Ok(Self {
            delta1: Some(delta1),
            rmse: height.rmse,
            mae: height.mae,
            r2: height.r2,
            ap50: Some(ap50),
            combined_score: Some(combined_score(ap50, delta1)?),
        })
    }

    fn values(&self) -> [Option<f64>; 6] {
        [
            self.delta1,
            self.rmse,
            self.mae,
            self.r2,
            self.ap50,
            self.combined_score,
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            match v {
                Some(x) => s.push_str(&format!("{k}: {x}\n")),
                None => s.push_str(&format!("{k}: NA\n")),
            }
        }
        s
    }

    /// JSON object with the same keys and order as the text form; missing
    /// values are `null`.
    pub fn to_json(&self) -> String {
        let fields: Vec<String> = REPORT_KEYS
            .iter()
            .zip(self.values())
            .map(|(k, v)| {
                let v = v.map_or(serde_json::Value::Null, serde_json::Value::from);
                format!("  \"{k}\": {v}")
            })
            .collect();
        format!("{{\n{}\n}}\n", fields.join(",\n"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 6] = [None; 6];
        let mut seen = [false; 6];
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let bad = || MetricsError::InvalidArgument(format!("report line {}: {line:?}", lineno + 1));
            let (k, v) = line.split_once(':').ok_or_else(bad)?;
            let idx = REPORT_KEYS.iter().position(|x| *x == k.trim()).ok_or_else(bad)?;
            let v = v.trim();
            vals[idx] = if v == "NA" {
                None
            } else {
                Some(v.parse().map_err(|_| bad())?)
            };
            seen[idx] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(MetricsError::InvalidArgument(format!(
                "report is missing key `{}`",
                REPORT_KEYS[i]
            )));
        }
        let [delta1, rmse, mae, r2, ap50, combined_score] = vals;
        Ok(Self {
            delta1,
            rmse,
            mae,
            r2,
            ap50,
            combined_score,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text).map_err(|e| MetricsError::Malformed {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_text().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combined_score_examples() {
        assert_eq!(combined_score(1.0, 1.0).unwrap(), 1.0);
        assert!((combined_score(0.491, 0.0).unwrap() - 0.2455).abs() < 1e-12);
        assert!((combined_score(0.50, 0.306).unwrap() - 0.403).abs() < 1e-12);
        assert!(combined_score(1.2, 0.0).is_err());
        assert!(combined_score(0.5, -0.1).is_err());
    }

    #[test]
    fn report_has_six_keys_in_order() {
        let r = EvalReport {
            delta1: Some(0.75),
            ap50: Some(0.5),
            ..Default::default()
        };
        let text = r.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(':').next().unwrap()).collect();
        assert_eq!(keys, REPORT_KEYS);
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(json["delta1"], 0.75);
        assert!(json["rmse"].is_null());
        let order: Vec<usize> = REPORT_KEYS.iter().map(|k| r.to_json().find(k).unwrap()).collect();
        assert!(order.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn report_parse_rejects_missing_keys() {
        assert!(EvalReport::parse("delta1: 0.5\n").is_err());
        assert!(EvalReport::parse("bogus: 1\n").is_err());
    }

    #[test]
    fn constant_reference_gives_na_r2() {
        let r = EvalReport::height(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!((r.delta1, r.rmse, r.r2), (Some(1.0), Some(0.0), None));
        assert!(r.to_text().contains("r2: NA\n"));
    }

    #[test]
    fn merge_computes_combined() {
        let h = EvalReport {
            delta1: Some(0.306),
            rmse: Some(12.7),
            ..Default::default()
        };
        let m = EvalReport::from_ap(0.5);
        let c = EvalReport::merge(&h, &m).unwrap();
        assert!((c.combined_score.unwrap() - 0.403).abs() < 1e-12);
        assert_eq!(c.rmse, Some(12.7));
    }
}
