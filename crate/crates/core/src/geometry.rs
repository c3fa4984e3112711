//! Axis-aligned box arithmetic, default-box matching, the detected-object
//! indicator and per-class non-maximum suppression.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Object class identifier. `0` is reserved for background and never
/// appears on a [`GroundTruthObject`] or a [`Detection`].
pub type ClassId = usize;

/// Center-size box in image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, Error> {
        let b = Box { cx, cy, w, h };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox { cx, cy, w, h })
        }
    }

    /// Builds a box from corner coordinates.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, Error> {
        Self::new(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
    }

    pub fn is_valid(&self) -> bool {
        self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.w > 0.0
            && self.h > 0.0
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    fn key(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }
}

/// One annotated object. `object_index` is unique within a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub cls: ClassId,
    #[serde(flatten)]
    pub bbox: Box,
    pub object_index: usize,
}

/// One predicted object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cls: ClassId,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: Box,
}

/// Outcome of matching one default box against the ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchAssignment {
    pub sample_index: usize,
    /// Position of the matched object in the `gts` slice handed to
    /// [`match_default_boxes`]; `None` for negatives.
    pub matched: Option<usize>,
}

impl MatchAssignment {
    pub fn is_positive(&self) -> bool {
        self.matched.is_some()
    }
}

/// Intersection over union in continuous coordinates.
pub fn iou(a: &Box, b: &Box) -> f64 {
    if a == b {
        return 1.0;
    }
    let iw = a.x1().min(b.x1()) - a.x0().max(b.x0());
    let ih = a.y1().min(b.y1()) - a.y0().max(b.y0());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Assigns every default box to its highest-IoU ground truth when that IoU
/// reaches `threshold`. Ties go to the lowest `object_index`.
pub fn match_default_boxes(
    defaults: &[Box],
    gts: &[GroundTruthObject],
    threshold: f64,
) -> Vec<MatchAssignment> {
    defaults
        .iter()
        .enumerate()
        .map(|(sample_index, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                let v = iou(d, &gt.bbox);
                best = match best {
                    None => Some((g, v)),
                    Some((bg, bv)) => {
                        if v > bv || (v == bv && gt.object_index < gts[bg].object_index) {
                            Some((g, v))
                        } else {
                            Some((bg, bv))
                        }
                    }
                };
            }
            let matched = best.filter(|&(_, v)| v >= threshold).map(|(g, _)| g);
            MatchAssignment {
                sample_index,
                matched,
            }
        })
        .collect()
}

/// True iff some detection of the same class overlaps `gt` with IoU ≥ `theta`.
///
/// This is the negation of the boosting indicator: `I(b_j) = 0` exactly when
/// this returns `true`.
pub fn object_detected(gt: &GroundTruthObject, detections: &[Detection], theta: f64) -> bool {
    detections
        .iter()
        .any(|d| d.cls == gt.cls && iou(&gt.bbox, &d.bbox) >= theta)
}

/// Total order used by [`nms`]: descending score, then ascending
/// `(cx, cy, w, h)`.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| {
        let (ka, kb) = (a.bbox.key(), b.bbox.key());
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Greedy per-class non-maximum suppression.
///
/// Survivors are returned in [`detection_order`]. A detection is dropped when
/// a kept detection of the same class overlaps it with IoU ≥ `iou_thr`.
pub fn nms(detections: &[Detection], iou_thr: f64) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut suppressed = vec![false; sorted.len()];
    let mut keep = Vec::new();
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        let cur = sorted[i];
        keep.push(cur);
        for j in (i + 1)..sorted.len() {
            if !suppressed[j]
                && sorted[j].cls == cur.cls
                && iou(&cur.bbox, &sorted[j].bbox) >= iou_thr
            {
                suppressed[j] = true;
            }
        }
    }
    keep
}
