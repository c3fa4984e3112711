//! Selective ensembling: pairwise Q statistics over detected/missed
//! outcomes, greedy diverse selection, diversity-and-accuracy member weights,
//! and fusion by re-scoring, union and per-class NMS.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{map_at, Interpolation};
use crate::geometry::{nms, object_detected, Detection, GroundTruthObject};

/// Joint detected (1) / missed (0) outcomes of two detectors. `n10` counts
/// objects the first detector finds and the second misses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub n11: usize,
    pub n00: usize,
    pub n01: usize,
    pub n10: usize,
}

impl PairCounts {
    pub fn total(&self) -> usize {
        self.n11 + self.n00 + self.n01 + self.n10
    }

    pub fn swapped(&self) -> PairCounts {
        PairCounts {
            n01: self.n10,
            n10: self.n01,
            ..*self
        }
    }
}

/// Per-object detected flags in annotation order.
pub fn detected_flags(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    theta: f64,
) -> Vec<bool> {
    gts.iter()
        .enumerate()
        .flat_map(|(i, img)| {
            let d = dets.get(i).map(Vec::as_slice).unwrap_or(&[]);
            img.iter().map(move |g| object_detected(g, d, theta))
        })
        .collect()
}

pub fn pair_counts_from_flags(a: &[bool], b: &[bool]) -> PairCounts {
    assert_eq!(a.len(), b.len(), "flag vectors must cover the same objects");
    let mut c = PairCounts::default();
    for (&x, &y) in a.iter().zip(b) {
        match (x, y) {
            (true, true) => c.n11 += 1,
            (false, false) => c.n00 += 1,
            (false, true) => c.n01 += 1,
            (true, false) => c.n10 += 1,
        }
    }
    c
}

pub fn pair_counts(
    det_a: &[Vec<Detection>],
    det_b: &[Vec<Detection>],
    gts: &[Vec<GroundTruthObject>],
    theta: f64,
) -> PairCounts {
    pair_counts_from_flags(&detected_flags(det_a, gts, theta), &detected_flags(det_b, gts, theta))
}

/// `(n11 n00 - n01 n10) / (n11 n00 + n01 n10)`, or 0 when the denominator
/// vanishes.
pub fn q_statistic(c: &PairCounts) -> f64 {
    let same = (c.n11 * c.n00) as f64;
    let diff = (c.n01 * c.n10) as f64;
    let den = same + diff;
    if den == 0.0 {
        0.0
    } else {
        (same - diff) / den
    }
}

/// Maps Q in `[-1, 1]` to a diversity in `[0, 1]`: `0.5 (1 - q)`.
pub fn normalize_q(q: f64) -> f64 {
    0.5 * (1.0 - q)
}

/// Symmetric Q matrix with unit diagonal.
pub fn q_matrix(flags: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let n = flags.len();
    let mut q = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = q_statistic(&pair_counts_from_flags(&flags[i], &flags[j]));
            q[i][j] = v;
            q[j][i] = v;
        }
    }
    q
}

/// Mean normalised Q against the other members; `[1]` for a singleton.
pub fn diversity_weights(q: &[Vec<f64>]) -> Vec<f64> {
    let n = q.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|m| {
            (0..n)
                .filter(|&k| k != m)
                .map(|k| normalize_q(q[m][k]))
                .sum::<f64>()
                / (n - 1) as f64
        })
        .collect()
}

/// `lambda_i = div_i alpha_i M / sum(div alpha)`, with negative detector
/// weights treated as 0. Falls back to all-ones when every product is zero;
/// the flag reports the fallback.
pub fn final_weights(div: &[f64], alpha: &[f64]) -> (Vec<f64>, bool) {
    assert_eq!(div.len(), alpha.len(), "one diversity per detector weight");
    let prods: Vec<f64> = div.iter().zip(alpha).map(|(d, a)| d * a.max(0.0)).collect();
    let sum: f64 = prods.iter().sum();
    let m = div.len() as f64;
    if sum > 0.0 {
        (prods.iter().map(|p| p * m / sum).collect(), false)
    } else {
        log::warn!("all diversity-weighted detector weights are zero; using uniform member weights");
        (vec![1.0; div.len()], true)
    }
}

/// Re-scores each member's detections by its weight (clipped to `[0, 1]`),
/// takes the union per image and applies per-class NMS.
pub fn fuse_detections(members: &[&[Vec<Detection>]], lambda: &[f64], nms_thr: f64) -> Vec<Vec<Detection>> {
    assert_eq!(members.len(), lambda.len(), "one weight per member");
    let images = members.iter().map(|m| m.len()).max().unwrap_or(0);
    (0..images)
        .map(|i| {
            let mut all = Vec::new();
            for (m, &l) in members.iter().zip(lambda) {
                if let Some(ds) = m.get(i) {
                    all.extend(ds.iter().map(|d| Detection {
                        score: (d.score * l).clamp(0.0, 1.0),
                        ..*d
                    }));
                }
            }
            nms(&all, nms_thr)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionDirection {
    /// Add the candidate with the largest summed diversity to the members.
    #[default]
    MaxDiversity,
    /// Add the candidate with the largest summed Q, i.e. the most similar.
    MaxQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    /// Cap on the ensemble size; `None` means the number of candidates.
    pub max_size: Option<usize>,
    /// Consecutive non-improving additions tolerated before stopping.
    pub patience: usize,
    pub direction: SelectionDirection,
    pub iou_theta: f64,
    pub nms_threshold: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            max_size: None,
            patience: 1,
            direction: SelectionDirection::MaxDiversity,
            iou_theta: 0.5,
            nms_threshold: 0.45,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_size == Some(0) {
            return Err(Error::config("ensemble max_size must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("ensemble patience must be >= 1"));
        }
        for (name, v) in [("iou_theta", self.iou_theta), ("nms_threshold", self.nms_threshold)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(format!("ensemble {name} must lie in (0, 1)")));
            }
        }
        Ok(())
    }
}

/// A detector offered for selection with its validation detections.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub id: usize,
    pub alpha: f64,
    pub val_map: f64,
    pub val_dets: &'a [Vec<Detection>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub candidate: usize,
    /// Diversity score of the proposal; `None` for the seed member.
    pub score: Option<f64>,
    pub fused_val_map: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSet {
    /// Candidate ids in selection order.
    pub members: Vec<usize>,
    pub alpha: Vec<f64>,
    pub q_matrix: Vec<Vec<f64>>,
    pub div: Vec<f64>,
    pub lambda: Vec<f64>,
    pub uniform_fallback: bool,
    pub fused_val_map: f64,
    pub trace: Vec<SelectionStep>,
}

impl EnsembleSet {
    /// Weights and statistics for a fixed member list.
    pub fn from_members(ids: Vec<usize>, alpha: Vec<f64>, flags: &[Vec<bool>]) -> EnsembleSet {
        let q = q_matrix(flags);
        let div = diversity_weights(&q);
        let (lambda, uniform_fallback) = final_weights(&div, &alpha);
        EnsembleSet {
            members: ids,
            alpha,
            q_matrix: q,
            div,
            lambda,
            uniform_fallback,
            fused_val_map: f64::NAN,
            trace: Vec::new(),
        }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }
}

/// Greedy selection seeded with the best validation detector (ties go to the
/// lower id). Each round proposes the non-member maximising the summed
/// normalised Q (or summed Q under [`SelectionDirection::MaxQ`]) against the
/// current members, evaluates the fused validation mAP, and keeps the best
/// prefix once `patience` proposals in a row fail to improve it.
pub fn greedy_select(
    candidates: &[Candidate<'_>],
    val_gts: &[Vec<GroundTruthObject>],
    num_classes: usize,
    interp: Interpolation,
    cfg: &EnsembleConfig,
) -> Result<EnsembleSet> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::Empty("ensemble candidates"));
    }
    let cap = cfg.max_size.unwrap_or(candidates.len()).min(candidates.len());
    let flags: Vec<Vec<bool>> = candidates
        .iter()
        .map(|c| detected_flags(c.val_dets, val_gts, cfg.iou_theta))
        .collect();
    let q = q_matrix(&flags);

    let build = |idx: &[usize]| -> EnsembleSet {
        let sub: Vec<Vec<bool>> = idx.iter().map(|&i| flags[i].clone()).collect();
        let mut set = EnsembleSet::from_members(
            idx.iter().map(|&i| candidates[i].id).collect(),
            idx.iter().map(|&i| candidates[i].alpha).collect(),
            &sub,
        );
        let dets: Vec<&[Vec<Detection>]> = idx.iter().map(|&i| candidates[i].val_dets).collect();
        set.fused_val_map = map_at(
            &fuse_detections(&dets, &set.lambda, cfg.nms_threshold),
            val_gts,
            num_classes,
            interp,
        );
        set
    };

    let by_id = |a: usize, b: usize| candidates[a].id.cmp(&candidates[b].id);
    let seed = (0..candidates.len())
        .reduce(|best, i| {
            let (vb, vi) = (candidates[best].val_map, candidates[i].val_map);
            if vi > vb || (vi == vb && by_id(i, best).is_lt()) {
                i
            } else {
                best
            }
        })
        .expect("non-empty");

    let mut chosen = vec![seed];
    let mut best = build(&chosen);
    let mut best_len = 1;
    let mut trace = vec![SelectionStep {
        candidate: candidates[seed].id,
        score: None,
        fused_val_map: best.fused_val_map,
        accepted: true,
    }];
    let mut misses = 0;
    while chosen.len() < cap {
        let score = |m: usize| -> f64 {
            chosen
                .iter()
                .map(|&n| match cfg.direction {
                    SelectionDirection::MaxDiversity => normalize_q(q[m][n]),
                    SelectionDirection::MaxQ => q[m][n],
                })
                .sum()
        };
        let next = (0..candidates.len())
            .filter(|i| !chosen.contains(i))
            .map(|i| (i, score(i)))
            .reduce(|a, b| {
                if b.1 > a.1 || (b.1 == a.1 && by_id(b.0, a.0).is_lt()) {
                    b
                } else {
                    a
                }
            });
        let Some((m, s)) = next else { break };
        chosen.push(m);
        let trial = build(&chosen);
        let improved = trial.fused_val_map > best.fused_val_map;
        trace.push(SelectionStep {
            candidate: candidates[m].id,
            score: Some(s),
            fused_val_map: trial.fused_val_map,
            accepted: improved,
        });
        if improved {
            best = trial;
            best_len = chosen.len();
            misses = 0;
        } else {
            misses += 1;
            if misses >= cfg.patience {
                break;
            }
        }
    }
    debug_assert_eq!(best.members.len(), best_len);
    best.trace = trace;
    Ok(best)
}
