//! Detection metrics: average precision at an IoU threshold, precision/recall
//! curves, AP by object-size bin, and a false-positive taxonomy.
//!
//! Detections and ground truth are passed per image: `dets[i]` and `gts[i]`
//! belong to the same image.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{detection_order, iou, ClassId, Detection, GroundTruthObject};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotonised precision/recall curve.
    #[default]
    AllPoint,
    /// Mean of the interpolated precision at recall 0, 0.1, ..., 1.
    Voc11,
    /// Sum of precision times recall increment, without the envelope.
    Uninterpolated,
}

/// Outcome of greedy matching for one ranked detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub image: usize,
    pub detection: Detection,
    /// Position of the matched ground truth in `gts[image]`, if any.
    pub matched: Option<usize>,
}

/// Ranks all detections of `cls` by [`detection_order`] (ties across images
/// go to the lower image position) and matches each to the same-class ground
/// truth of highest IoU in its image. A ground truth is matched at most once;
/// a detection whose best ground truth is already taken stays unmatched.
pub fn match_class(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    cls: ClassId,
    iou_thr: f64,
) -> Vec<RankedDetection> {
    let mut ranked: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| ds.iter().filter(|d| d.cls == cls).map(move |d| (i, *d)))
        .collect();
    ranked.sort_by(|a, b| match detection_order(&a.1, &b.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .into_iter()
        .map(|(image, d)| {
            let mut best: Option<(usize, f64)> = None;
            if let Some(img_gts) = gts.get(image) {
                for (g, gt) in img_gts.iter().enumerate().filter(|(_, g)| g.cls == cls) {
                    let v = iou(&d.bbox, &gt.bbox);
                    if best.is_none_or(|(_, bv)| v > bv) {
                        best = Some((g, v));
                    }
                }
            }
            let matched = match best {
                Some((g, v)) if v >= iou_thr && !taken[image][g] => {
                    taken[image][g] = true;
                    Some(g)
                }
                _ => None,
            };
            RankedDetection {
                image,
                detection: d,
                matched,
            }
        })
        .collect()
}

fn count_class(gts: &[Vec<GroundTruthObject>], cls: ClassId) -> usize {
    gts.iter().flatten().filter(|g| g.cls == cls).count()
}

/// AP from a ranked TP/FP sequence. `num_gt` must be positive.
pub fn ap_from_ranking(is_tp: &[bool], num_gt: usize, interp: Interpolation) -> f64 {
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for &t in is_tp {
        if t {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    let area = |prec: &[f64]| {
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (r, p) in recall.iter().zip(prec) {
            if *r > prev_r {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
        }
        ap
    };
    match interp {
        Interpolation::Uninterpolated => area(&precision),
        Interpolation::AllPoint => {
            // precision envelope from the right, then sum over recall steps
            let mut env = precision.clone();
            for i in (0..env.len().saturating_sub(1)).rev() {
                env[i] = env[i].max(env[i + 1]);
            }
            area(&env)
        }
        Interpolation::Voc11 => {
            (0..=10)
                .map(|k| {
                    let t = k as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t - 1e-12)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

/// AP of one class, or `None` when the class has no ground truth.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    cls: ClassId,
    iou_thr: f64,
    interp: Interpolation,
) -> Option<f64> {
    let num_gt = count_class(gts, cls);
    if num_gt == 0 {
        return None;
    }
    let flags: Vec<bool> = match_class(dets, gts, cls, iou_thr)
        .iter()
        .map(|r| r.matched.is_some())
        .collect();
    Some(ap_from_ranking(&flags, num_gt, interp))
}

/// Unweighted mean over defined APs; `None` when no class is defined.
pub fn mean_ap(aps: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub cls: ClassId,
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub per_class: Vec<ClassAp>,
    /// Mean over classes with ground truth; 0 when none has any.
    pub map: f64,
}

/// Per-class AP for classes `1..=num_classes` plus their mean.
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    iou_thr: f64,
    interp: Interpolation,
) -> EvalSummary {
    let per_class: Vec<ClassAp> = (1..=num_classes)
        .map(|cls| ClassAp {
            cls,
            ap: average_precision(dets, gts, cls, iou_thr, interp),
            num_gt: count_class(gts, cls),
            num_det: dets.iter().flatten().filter(|d| d.cls == cls).count(),
        })
        .collect();
    let map = mean_ap(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>()).unwrap_or(0.0);
    EvalSummary { per_class, map }
}

/// Shorthand for the mAP of [`evaluate`].
pub fn map_at(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    interp: Interpolation,
) -> f64 {
    evaluate(dets, gts, num_classes, 0.5, interp).map
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    /// Score of the lowest-ranked detection included.
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub cls: ClassId,
    pub points: Vec<PrPoint>,
}

/// One point per ranked detection, i.e. per score threshold. Recall is 0
/// throughout when the class has no ground truth.
pub fn pr_curve(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    cls: ClassId,
    iou_thr: f64,
) -> PrCurve {
    let num_gt = count_class(gts, cls);
    let (mut tp, mut n) = (0usize, 0usize);
    let points = match_class(dets, gts, cls, iou_thr)
        .iter()
        .map(|r| {
            n += 1;
            if r.matched.is_some() {
                tp += 1;
            }
            PrPoint {
                threshold: r.detection.score,
                precision: tp as f64 / n as f64,
                recall: if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 },
            }
        })
        .collect();
    PrCurve { cls, points }
}

pub const SIZE_BIN_NAMES: [&str; 5] = ["XS", "S", "M", "L", "XL"];
const SIZE_PERCENTILES: [f64; 4] = [10.0, 30.0, 70.0, 90.0];

/// Five area bins split at the 10th, 30th, 70th and 90th percentile of the
/// ground-truth box areas (nearest-rank). Bin `k` holds areas in
/// `(edge[k-1], edge[k]]`; the first bin is closed below, the last open above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SizeBinning {
    pub edges: [f64; 4],
}

impl SizeBinning {
    pub fn from_areas(areas: &[f64]) -> Result<Self> {
        if areas.is_empty() {
            return Err(Error::Empty("ground-truth areas"));
        }
        if areas.len() < SIZE_BIN_NAMES.len() * 2 {
            log::warn!(
                "only {} ground-truth boxes for size binning; bins collapse to the available quantiles",
                areas.len()
            );
        }
        let mut sorted = areas.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let mut edges = [0.0; 4];
        for (e, p) in edges.iter_mut().zip(SIZE_PERCENTILES) {
            let rank = ((p / 100.0) * n as f64).ceil() as usize;
            *e = sorted[rank.clamp(1, n) - 1];
        }
        Ok(SizeBinning { edges })
    }

    pub fn bin(&self, area: f64) -> usize {
        self.edges.iter().position(|&e| area <= e).unwrap_or(4)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBinResult {
    pub name: String,
    /// Inclusive upper area edge; `None` for the last bin.
    pub upper_edge: Option<f64>,
    pub num_gt: usize,
    pub per_class: Vec<Option<f64>>,
    pub map: Option<f64>,
}

/// AP per size bin. Matching runs once over all ground truth; within a bin a
/// detection matched to a ground truth of another bin is ignored, and an
/// unmatched detection counts as a false positive only if its own area falls
/// in the bin.
pub fn size_breakdown(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    iou_thr: f64,
    interp: Interpolation,
) -> Result<(SizeBinning, Vec<SizeBinResult>)> {
    let areas: Vec<f64> = gts.iter().flatten().map(|g| g.bbox.area()).collect();
    let binning = SizeBinning::from_areas(&areas)?;
    let matches: Vec<Vec<RankedDetection>> = (1..=num_classes)
        .map(|c| match_class(dets, gts, c, iou_thr))
        .collect();
    let results = (0..5)
        .map(|b| {
            let in_bin = |g: &GroundTruthObject| binning.bin(g.bbox.area()) == b;
            let per_class: Vec<Option<f64>> = (1..=num_classes)
                .map(|c| {
                    let num_gt = gts.iter().flatten().filter(|g| g.cls == c && in_bin(g)).count();
                    if num_gt == 0 {
                        return None;
                    }
                    let flags: Vec<bool> = matches[c - 1]
                        .iter()
                        .filter_map(|r| match r.matched {
                            Some(g) => in_bin(&gts[r.image][g]).then_some(true),
                            None => (binning.bin(r.detection.bbox.area()) == b).then_some(false),
                        })
                        .collect();
                    Some(ap_from_ranking(&flags, num_gt, interp))
                })
                .collect();
            SizeBinResult {
                name: SIZE_BIN_NAMES[b].to_string(),
                upper_edge: binning.edges.get(b).copied(),
                num_gt: gts.iter().flatten().filter(|g| in_bin(g)).count(),
                map: mean_ap(&per_class),
                per_class,
            }
        })
        .collect();
    Ok((binning, results))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FpCategory {
    Loc,
    Sim,
    #[serde(rename = "BG")]
    Bg,
    Oth,
}

impl FpCategory {
    pub const ALL: [FpCategory; 4] = [FpCategory::Loc, FpCategory::Sim, FpCategory::Bg, FpCategory::Oth];

    pub fn name(self) -> &'static str {
        match self {
            FpCategory::Loc => "Loc",
            FpCategory::Sim => "Sim",
            FpCategory::Bg => "BG",
            FpCategory::Oth => "Oth",
        }
    }
}

pub const FP_LOW_IOU: f64 = 0.1;

/// Category of an unmatched detection from its overlaps with the image's
/// ground truth. Returns the category, the best IoU with any ground truth and
/// that ground truth's position.
pub fn classify_false_positive(
    det: &Detection,
    gts: &[GroundTruthObject],
    iou_thr: f64,
) -> (FpCategory, f64, Option<usize>) {
    let (mut same, mut other) = (0.0f64, 0.0f64);
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let v = iou(&det.bbox, &gt.bbox);
        if gt.cls == det.cls {
            same = same.max(v);
        } else {
            other = other.max(v);
        }
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((g, v));
        }
    }
    let any = same.max(other);
    let cat = if (FP_LOW_IOU..iou_thr).contains(&same) {
        FpCategory::Loc
    } else if other >= FP_LOW_IOU && same < FP_LOW_IOU {
        FpCategory::Sim
    } else if any < FP_LOW_IOU {
        FpCategory::Bg
    } else {
        FpCategory::Oth
    };
    (cat, any, best.map(|(g, _)| g))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpRecord {
    pub image: usize,
    pub detection: Detection,
    pub category: FpCategory,
    pub best_iou: f64,
    /// `object_index` of the most-overlapped ground truth.
    pub overlapped_gt: Option<usize>,
}

/// Categorises every detection left unmatched by the AP matching.
pub fn categorize_false_positives(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    iou_thr: f64,
) -> Vec<FpRecord> {
    let mut out = Vec::new();
    for c in 1..=num_classes {
        for r in match_class(dets, gts, c, iou_thr) {
            if r.matched.is_some() {
                continue;
            }
            let img_gts = gts.get(r.image).map(Vec::as_slice).unwrap_or(&[]);
            let (category, best_iou, g) = classify_false_positive(&r.detection, img_gts, iou_thr);
            out.push(FpRecord {
                image: r.image,
                detection: r.detection,
                category,
                best_iou,
                overlapped_gt: g.map(|g| img_gts[g].object_index),
            });
        }
    }
    out
}

/// False positives per category among detections scoring at least
/// `min_score`, in [`FpCategory::ALL`] order.
pub fn fp_counts(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    min_score: f64,
) -> [usize; 4] {
    let kept: Vec<Vec<Detection>> = dets
        .iter()
        .map(|ds| ds.iter().filter(|d| d.score >= min_score).copied().collect())
        .collect();
    let mut counts = [0usize; 4];
    for r in categorize_false_positives(&kept, gts, num_classes, 0.5) {
        counts[FpCategory::ALL.iter().position(|&c| c == r.category).unwrap()] += 1;
    }
    counts
}
