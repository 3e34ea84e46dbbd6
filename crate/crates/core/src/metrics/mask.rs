//! Run-length masks, mask IoU and COCO-style AP at IoU 0.5.

use std::collections::BTreeMap;

use super::{MetricsError, Result};

pub const AP_IOU_THRESHOLD: f64 = 0.5;
const RECALL_POINTS: usize = 101;

/// Binary mask as alternating background/foreground run lengths over
/// row-major pixels, starting with a (possibly empty) background run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rle {
    height: usize,
    width: usize,
    counts: Vec<u32>,
}

impl Rle {
    pub fn new(height: usize, width: usize, counts: Vec<u32>) -> Result<Self> {
        let total: u64 = counts.iter().map(|c| *c as u64).sum();
        if total != (height * width) as u64 {
            return Err(MetricsError::RleLength {
                expected: height * width,
                got: total as usize,
            });
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn from_mask(height: usize, width: usize, mask: &[bool]) -> Result<Self> {
        if mask.len() != height * width {
            return Err(MetricsError::RleLength {
                expected: height * width,
                got: mask.len(),
            });
        }
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &m in mask {
            if m != current {
                counts.push(run);
                run = 0;
                current = m;
            }
            run += 1;
        }
        counts.push(run);
        Ok(Self {
            height,
            width,
            counts,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height * self.width);
        for (i, c) in self.counts.iter().enumerate() {
            out.extend(std::iter::repeat(i % 2 == 1).take(*c as usize));
        }
        out
    }

    /// Foreground pixel count.
    pub fn area(&self) -> usize {
        self.counts.iter().skip(1).step_by(2).map(|c| *c as usize).sum()
    }

    /// Foreground intervals `[start, end)` in flat pixel indices.
    fn intervals(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let mut pos = 0usize;
        self.counts.iter().enumerate().filter_map(move |(i, c)| {
            let start = pos;
            pos += *c as usize;
            (i % 2 == 1 && *c > 0).then_some((start, pos))
        })
    }
}

/// One ground-truth or predicted instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub mask: Rle,
    /// Confidence; present on predictions only.
    pub score: Option<f64>,
}

/// `|A ∩ B| / |A ∪ B|` computed on the run-length form.
pub fn mask_iou(a: &Rle, b: &Rle) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricsError::MaskDims {
            a: (a.height, a.width),
            b: (b.height, b.width),
        });
    }
    let mut inter = 0usize;
    let mut bi = b.intervals().peekable();
    for (s, e) in a.intervals() {
        while let Some(&(bs, be)) = bi.peek() {
            if be <= s {
                bi.next();
                continue;
            }
            if bs >= e {
                break;
            }
            inter += e.min(be) - s.max(bs);
            if be <= e {
                bi.next();
            } else {
                break;
            }
        }
    }
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Err(MetricsError::EmptyUnion);
    }
    Ok(inter as f64 / union as f64)
}

/// Prediction `pred` (index into the prediction list) and the GT it matched.
#[derive(Clone, Debug, PartialEq)]
pub struct Match {
    pub pred: usize,
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryCurve {
    pub category_id: u64,
    pub n_gt: usize,
    pub ap: f64,
    /// Precision and recall after each prediction in the score-sorted sweep.
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApReport {
    /// Mean AP over categories that have ground truth.
    pub ap50: f64,
    pub categories: Vec<CategoryCurve>,
    /// Greedy matches per image, in the order predictions were considered.
    pub matches: BTreeMap<u64, Vec<Match>>,
}

/// COCO-style AP at IoU 0.5 over instance masks.
///
/// Predictions are ranked by descending score; equal scores keep their input
/// order. Within each image a prediction takes the unmatched ground truth of
/// highest IoU (first on ties) if that IoU is at least 0.5. Precision is made
/// monotone and sampled at the 101 recall points `0.00, 0.01, …, 1.00`.
pub fn ap50(predictions: &[InstanceRecord], ground_truths: &[InstanceRecord]) -> Result<ApReport> {
    for (i, p) in predictions.iter().enumerate() {
        match p.score {
            Some(s) if (0.0..=1.0).contains(&s) => {}
            Some(s) => return Err(MetricsError::ScoreRange { index: i, score: s }),
            None => return Err(MetricsError::MissingScore(i)),
        }
    }
    if ground_truths.is_empty() {
        return Err(MetricsError::NoGroundTruth);
    }

    let mut order: Vec<usize> = (0..predictions.len()).collect();
    // stable: ties stay in insertion order
    order.sort_by(|&a, &b| {
        let (sa, sb) = (predictions[a].score.unwrap(), predictions[b].score.unwrap());
        sb.partial_cmp(&sa).expect("scores are finite")
    });

    // per-prediction outcome: the matched GT and its IoU
    let mut outcome: Vec<Option<(usize, f64)>> = vec![None; predictions.len()];
    let mut matches: BTreeMap<u64, Vec<Match>> = BTreeMap::new();
    let mut gt_taken = vec![false; ground_truths.len()];
    let mut gt_by_key: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for (i, g) in ground_truths.iter().enumerate() {
        gt_by_key.entry((g.image_id, g.category_id)).or_default().push(i);
    }
    for &pi in &order {
        let p = &predictions[pi];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_key.get(&(p.image_id, p.category_id)) {
            for &gi in cands {
                if gt_taken[gi] {
                    continue;
                }
                let iou = match mask_iou(&p.mask, &ground_truths[gi].mask) {
                    Err(MetricsError::EmptyUnion) => 0.0,
                    r => r?,
                };
                if iou >= AP_IOU_THRESHOLD && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
        }
        if let Some((gi, _)) = best {
            gt_taken[gi] = true;
        }
        outcome[pi] = best;
        matches.entry(p.image_id).or_default().push(Match {
            pred: pi,
            gt: best.map(|(g, _)| g),
            iou: best.map_or(0.0, |(_, v)| v),
        });
    }

    let mut n_gt: BTreeMap<u64, usize> = BTreeMap::new();
    for g in ground_truths {
        *n_gt.entry(g.category_id).or_default() += 1;
    }
    let mut categories = Vec::with_capacity(n_gt.len());
    for (&cat, &total) in &n_gt {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut precision = Vec::new();
        let mut recall = Vec::new();
        for &pi in order.iter().filter(|&&pi| predictions[pi].category_id == cat) {
            if outcome[pi].is_some() {
                tp += 1;
            } else {
                fp += 1;
            }
            precision.push(tp as f64 / (tp + fp) as f64);
            recall.push(tp as f64 / total as f64);
        }
        let ap = interpolated_ap(&precision, &recall);
        categories.push(CategoryCurve {
            category_id: cat,
            n_gt: total,
            ap,
            precision,
            recall,
        });
    }
    let ap50 = categories.iter().map(|c| c.ap).sum::<f64>() / categories.len() as f64;
    Ok(ApReport {
        ap50,
        categories,
        matches,
    })
}

/// 101-point interpolated AP from a precision/recall sweep.
fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..RECALL_POINTS {
        let r = k as f64 / (RECALL_POINTS - 1) as f64;
        // first sweep position whose recall reaches r
        let idx = recall.partition_point(|&x| x < r);
        if idx < envelope.len() {
            total += envelope[idx];
        }
    }
    total / RECALL_POINTS as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Rle {
        let m: Vec<bool> = (0..h * w)
            .map(|i| {
                let (r, c) = (i / w, i % w);
                (r0..r1).contains(&r) && (c0..c1).contains(&c)
            })
            .collect();
        Rle::from_mask(h, w, &m).unwrap()
    }

    fn rec(image: u64, mask: Rle, score: Option<f64>) -> InstanceRecord {
        InstanceRecord {
            image_id: image,
            category_id: 1,
            mask,
            score,
        }
    }

    #[test]
    fn rle_roundtrip_and_area() {
        let m = [true, true, false, true, false, false];
        let r = Rle::from_mask(2, 3, &m).unwrap();
        assert_eq!(r.counts(), &[0, 2, 1, 1, 2]);
        assert_eq!(r.decode(), m);
        assert_eq!(r.area(), 3);
        assert!(Rle::new(2, 3, vec![1, 2]).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        let a = rect(10, 10, 0, 10, 0, 5);
        let b = rect(10, 10, 0, 5, 0, 10);
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = rect(10, 10, 0, 10, 5, 10);
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        let empty = rect(10, 10, 0, 0, 0, 0);
        assert!(matches!(mask_iou(&empty, &empty), Err(MetricsError::EmptyUnion)));
        let other = rect(5, 20, 0, 1, 0, 1);
        assert!(matches!(mask_iou(&a, &other), Err(MetricsError::MaskDims { .. })));
    }

    #[test]
    fn iou_matches_pixel_count() {
        let a = rect(9, 7, 1, 6, 2, 7);
        let b = rect(9, 7, 3, 9, 0, 4);
        let (da, db) = (a.decode(), b.decode());
        let inter = da.iter().zip(&db).filter(|(x, y)| **x && **y).count();
        let union = da.iter().zip(&db).filter(|(x, y)| **x || **y).count();
        assert_eq!(mask_iou(&a, &b).unwrap(), inter as f64 / union as f64);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = vec![rec(1, rect(8, 8, 1, 4, 1, 4), None)];
        let pred = vec![rec(1, rect(8, 8, 1, 4, 1, 4), Some(0.9))];
        assert_eq!(ap50(&pred, &gt).unwrap().ap50, 1.0);
        assert_eq!(ap50(&[], &gt).unwrap().ap50, 0.0);
    }

    #[test]
    fn score_validation() {
        let gt = vec![rec(1, rect(4, 4, 0, 2, 0, 2), None)];
        let bad = vec![rec(1, rect(4, 4, 0, 2, 0, 2), Some(1.5))];
        assert!(matches!(ap50(&bad, &gt), Err(MetricsError::ScoreRange { .. })));
        let missing = vec![rec(1, rect(4, 4, 0, 2, 0, 2), None)];
        assert!(matches!(ap50(&missing, &gt), Err(MetricsError::MissingScore(0))));
    }

    #[test]
    fn low_ranked_false_positive_keeps_full_ap() {
        let gt = vec![rec(1, rect(8, 8, 0, 4, 0, 4), None)];
        let pred = vec![
            rec(1, rect(8, 8, 0, 4, 0, 4), Some(0.9)),
            rec(1, rect(8, 8, 5, 8, 5, 8), Some(0.2)),
        ];
        let r = ap50(&pred, &gt).unwrap();
        assert_eq!(r.ap50, 1.0);
        assert_eq!(r.categories[0].precision, vec![1.0, 0.5]);
        assert_eq!(r.matches[&1][1].gt, None);
    }

    #[test]
    fn high_ranked_false_positive_halves_precision() {
        let gt = vec![rec(1, rect(8, 8, 0, 4, 0, 4), None)];
        let pred = vec![
            rec(1, rect(8, 8, 5, 8, 5, 8), Some(0.9)),
            rec(1, rect(8, 8, 0, 4, 0, 4), Some(0.2)),
        ];
        // the precision envelope is 0.5 at every recall point
        assert_eq!(ap50(&pred, &gt).unwrap().ap50, 0.5);
    }
}
