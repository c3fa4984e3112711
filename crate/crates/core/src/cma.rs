//! Curriculum multi-class boosting over detectors.
//!
//! A noise-eliminating stage trains `m1` detectors, each time shrinking the
//! relative weight of objects the last detector missed. The detector with the
//! best validation mAP becomes the clean detector. Object weights are then
//! reset to uniform and a noise-learning stage trains `m2` detectors
//! warm-started from the clean one, this time growing the weight of missed
//! objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{object_detected, Detection, GroundTruthObject};

/// Lower clamp for the error rate; the upper clamp is `1 - ERROR_CLAMP`.
pub const ERROR_CLAMP: f64 = 1e-6;

/// Probability vector over ground-truth objects, stored in ascending
/// `object_index` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectWeightVector {
    pub object_indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub iteration: usize,
}

impl ObjectWeightVector {
    /// Uniform `1/N` over the given objects.
    pub fn uniform(mut object_indices: Vec<usize>) -> Result<Self> {
        if object_indices.is_empty() {
            return Err(Error::Empty("training objects"));
        }
        object_indices.sort_unstable();
        if object_indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("object indices must be unique"));
        }
        let n = object_indices.len();
        Ok(ObjectWeightVector {
            object_indices,
            weights: vec![1.0 / n as f64; n],
            iteration: 1,
        })
    }

    /// Uniform weights over every object of a per-image annotation list.
    pub fn for_annotations(gts: &[Vec<GroundTruthObject>]) -> Result<Self> {
        Self::uniform(gts.iter().flatten().map(|g| g.object_index).collect())
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn position(&self, object_index: usize) -> Option<usize> {
        self.object_indices.binary_search(&object_index).ok()
    }

    pub fn weight(&self, object_index: usize) -> Option<f64> {
        self.position(object_index).map(|p| self.weights[p])
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}

pub fn init_object_weights(n: usize) -> Result<ObjectWeightVector> {
    ObjectWeightVector::uniform((0..n).collect())
}

/// Loss weight of a default box matched to object `object_index`: `N * w_j`.
pub fn positive_sample_weight(w: &ObjectWeightVector, object_index: usize) -> Result<f64> {
    w.weight(object_index)
        .map(|x| w.len() as f64 * x)
        .ok_or_else(|| Error::config(format!("unknown object index {object_index}")))
}

/// Missed-object flags (`I(b_j) = 1`) aligned with the slots of `w`.
pub fn undetected_flags(
    w: &ObjectWeightVector,
    gts: &[Vec<GroundTruthObject>],
    dets: &[Vec<Detection>],
    theta: f64,
) -> Result<Vec<bool>> {
    if gts.len() != dets.len() {
        return Err(Error::Shape(format!(
            "{} annotation lists but {} detection lists",
            gts.len(),
            dets.len()
        )));
    }
    let mut flags = vec![true; w.len()];
    let mut seen = 0;
    for (g_img, d_img) in gts.iter().zip(dets) {
        for g in g_img {
            let p = w
                .position(g.object_index)
                .ok_or_else(|| Error::config(format!("unknown object index {}", g.object_index)))?;
            flags[p] = !object_detected(g, d_img, theta);
            seen += 1;
        }
    }
    if seen != w.len() {
        return Err(Error::Shape(format!("{seen} objects annotated, {} weighted", w.len())));
    }
    Ok(flags)
}

/// Weighted fraction of missed objects.
pub fn error_rate(w: &ObjectWeightVector, undetected: &[bool]) -> f64 {
    let missed: f64 = w
        .weights
        .iter()
        .zip(undetected)
        .filter(|(_, &u)| u)
        .map(|(x, _)| x)
        .sum();
    missed / w.sum()
}

pub fn clamp_error(e: f64) -> f64 {
    e.clamp(ERROR_CLAMP, 1.0 - ERROR_CLAMP)
}

/// `log((1-E)/E) + log(C-1)` with `E` clamped away from 0 and 1.
pub fn detector_alpha(e: f64, num_classes: usize) -> Result<f64> {
    if num_classes < 2 {
        return Err(Error::config("boosting needs at least two object classes"));
    }
    let e = clamp_error(e);
    Ok(((1.0 - e) / e).ln() + ((num_classes - 1) as f64).ln())
}

fn reweight(w: &ObjectWeightVector, undetected: &[bool], alpha: f64, boost_missed: bool) -> ObjectWeightVector {
    assert_eq!(undetected.len(), w.len(), "indicator length must match the weight vector");
    let raw: Vec<f64> = w
        .weights
        .iter()
        .zip(undetected)
        .map(|(&x, &u)| if u == boost_missed { x * alpha.exp() } else { x })
        .collect();
    let z: f64 = raw.iter().sum();
    ObjectWeightVector {
        object_indices: w.object_indices.clone(),
        weights: raw.iter().map(|x| x / z).collect(),
        iteration: w.iteration + 1,
    }
}

/// Multiplies detected objects by `e^alpha` and renormalises.
pub fn necma_update(w: &ObjectWeightVector, undetected: &[bool], alpha: f64) -> ObjectWeightVector {
    reweight(w, undetected, alpha, false)
}

/// Multiplies missed objects by `e^alpha` and renormalises.
pub fn nlcma_update(w: &ObjectWeightVector, undetected: &[bool], alpha: f64) -> ObjectWeightVector {
    reweight(w, undetected, alpha, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Necma,
    Nlcma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleanSelection {
    /// Highest validation mAP among the first-stage detectors.
    #[default]
    BestValidation,
    /// The last first-stage detector.
    LastNecma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CmaConfig {
    pub m1: usize,
    pub m2: usize,
    pub iou_theta: f64,
    pub num_classes: usize,
    pub clean_selection: CleanSelection,
}

impl Default for CmaConfig {
    fn default() -> Self {
        CmaConfig {
            m1: 5,
            m2: 7,
            iou_theta: 0.5,
            num_classes: 3,
            clean_selection: CleanSelection::BestValidation,
        }
    }
}

impl CmaConfig {
    /// `m1 = 0` is accepted when `m2 >= 1`: every detector then trains from
    /// scratch under missed-object boosting, which is plain multi-class
    /// AdaBoost.
    pub fn validate(&self) -> Result<()> {
        if self.m1 + self.m2 == 0 {
            return Err(Error::config("m1 + m2 must be >= 1"));
        }
        if !(self.iou_theta > 0.0 && self.iou_theta < 1.0) {
            return Err(Error::config("iou_theta must lie in (0, 1)"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("boosting needs at least two object classes"));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.m1 + self.m2
    }

    /// Stage of 1-based iteration `m`.
    pub fn stage(&self, m: usize) -> Stage {
        if m <= self.m1 {
            Stage::Necma
        } else {
            Stage::Nlcma
        }
    }
}

/// One trained detector and its boosting statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorRecord<P> {
    pub params: P,
    pub iteration: usize,
    pub stage: Stage,
    pub error_rate: f64,
    pub alpha: f64,
    pub val_map: f64,
    /// Object weights the detector was trained with.
    pub weights: ObjectWeightVector,
    /// Missed-object flags on the training set, aligned with `weights`.
    pub undetected: Vec<bool>,
}

impl<P> DetectorRecord<P> {
    /// Weights handed to the next iteration of the same stage.
    pub fn next_weights(&self) -> ObjectWeightVector {
        match self.stage {
            Stage::Necma => necma_update(&self.weights, &self.undetected, self.alpha),
            Stage::Nlcma => nlcma_update(&self.weights, &self.undetected, self.alpha),
        }
    }
}

/// What the orchestrator asks of a trainer for one iteration.
pub struct TrainRequest<'a, P> {
    pub iteration: usize,
    pub stage: Stage,
    pub weights: &'a ObjectWeightVector,
    pub warm_start: Option<&'a P>,
}

pub trait Trainer {
    type Params: Clone;

    fn train(&mut self, req: TrainRequest<'_, Self::Params>) -> Result<Self::Params>;

    /// Detections on every training image, in annotation order.
    fn train_detections(&mut self, params: &Self::Params) -> Result<Vec<Vec<Detection>>>;

    fn validation_map(&mut self, params: &Self::Params) -> Result<f64>;
}

/// Index into `records` of the clean detector, if the first stage ran.
pub fn select_clean<P>(records: &[DetectorRecord<P>], rule: CleanSelection) -> Option<usize> {
    let necma = records.iter().enumerate().filter(|(_, r)| r.stage == Stage::Necma);
    match rule {
        CleanSelection::LastNecma => necma.last().map(|(i, _)| i),
        // first maximum wins, i.e. the earliest iteration
        CleanSelection::BestValidation => necma
            .fold(None, |best: Option<(usize, f64)>, (i, r)| match best {
                Some((_, v)) if v >= r.val_map => best,
                _ => Some((i, r.val_map)),
            })
            .map(|(i, _)| i),
    }
}

/// Runs both stages.
///
/// `resumed` holds records of already completed iterations (in order);
/// training continues after the last of them. `observer` sees every new
/// record as soon as it exists, so a later trainer failure leaves the
/// completed iterations persisted.
pub fn run_cma<T: Trainer>(
    train_gts: &[Vec<GroundTruthObject>],
    cfg: &CmaConfig,
    trainer: &mut T,
    resumed: Vec<DetectorRecord<T::Params>>,
    mut observer: impl FnMut(&DetectorRecord<T::Params>) -> Result<()>,
) -> Result<Vec<DetectorRecord<T::Params>>> {
    cfg.validate()?;
    let initial = ObjectWeightVector::for_annotations(train_gts)?;
    if resumed.len() > cfg.total() {
        return Err(Error::config(format!(
            "{} records to resume from but only {} iterations configured",
            resumed.len(),
            cfg.total()
        )));
    }
    for (k, r) in resumed.iter().enumerate() {
        if r.iteration != k + 1 || r.stage != cfg.stage(k + 1) {
            return Err(Error::config(format!(
                "resumed record {k} is iteration {} ({:?}), expected {} ({:?})",
                r.iteration,
                r.stage,
                k + 1,
                cfg.stage(k + 1)
            )));
        }
    }
    let mut records = resumed;
    for m in records.len() + 1..=cfg.total() {
        let stage = cfg.stage(m);
        let weights = if m == 1 || m == cfg.m1 + 1 {
            ObjectWeightVector {
                iteration: m,
                ..initial.clone()
            }
        } else {
            records[m - 2].next_weights()
        };
        let clean = if stage == Stage::Nlcma {
            select_clean(&records, cfg.clean_selection)
        } else {
            None
        };
        if m == cfg.m1 + 1 {
            if let Some(c) = clean {
                log::info!("clean detector: iteration {}", records[c].iteration);
            }
        }
        let fail = |e: Error| Error::Trainer {
            iteration: m,
            reason: e.to_string(),
        };
        let params = trainer
            .train(TrainRequest {
                iteration: m,
                stage,
                weights: &weights,
                warm_start: clean.map(|c| &records[c].params),
            })
            .map_err(fail)?;
        let dets = trainer.train_detections(&params).map_err(fail)?;
        let undetected = undetected_flags(&weights, train_gts, &dets, cfg.iou_theta)?;
        let e = error_rate(&weights, &undetected);
        let alpha = detector_alpha(e, cfg.num_classes)?;
        if alpha < 0.0 {
            log::warn!("iteration {m}: negative detector weight {alpha:.4} (error rate {e:.4})");
        }
        let val_map = trainer.validation_map(&params).map_err(fail)?;
        log::info!(
            "iteration {m} {stage:?}: error_rate={e:.6} alpha={alpha:.6} val_map={val_map:.6}"
        );
        let record = DetectorRecord {
            params,
            iteration: m,
            stage,
            error_rate: e,
            alpha,
            val_map,
            weights,
            undetected,
        };
        observer(&record)?;
        records.push(record);
    }
    Ok(records)
}
