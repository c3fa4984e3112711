//! Sample-weighted detection loss: a weighted softmax cross-entropy over all
//! selected default boxes plus a weighted smooth-L1 regression over the
//! positives, each normalised by its sample count.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to predicted probabilities before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Classification weight.
    pub alpha1: f64,
    /// Regression weight.
    pub alpha2: f64,
    /// Number of object classes, background excluded.
    pub num_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::new(3)
    }
}

impl LossConfig {
    pub fn new(num_classes: usize) -> Self {
        LossConfig {
            alpha1: 1.0,
            alpha2: 1.0,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0 && self.alpha1 + self.alpha2 > 0.0) {
            return Err(Error::config("loss weights must be >= 0 with a positive sum"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be >= 1"));
        }
        Ok(())
    }
}

/// Training samples for one loss evaluation.
///
/// `loc_preds` and `gt_loc` hold one row per positive sample, in the order the
/// positives appear in `positive_mask`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub logits: Tensor,
    pub loc_preds: Tensor,
    pub gt_cls: Tensor,
    pub gt_loc: Tensor,
    pub weights: Vec<f64>,
    pub positive_mask: Vec<bool>,
}

impl SampleBatch {
    pub fn num_samples(&self) -> usize {
        self.weights.len()
    }

    pub fn num_positives(&self) -> usize {
        self.positive_mask.iter().filter(|&&p| p).count()
    }

    /// Row of the regression tensors belonging to each positive sample.
    fn positive_rows(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positive_mask
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .enumerate()
            .map(|(row, (i, _))| (i, row))
    }

    pub fn validate(&self, cfg: &LossConfig) -> Result<()> {
        let n = self.weights.len();
        let k = cfg.num_classes + 1;
        let np = self.num_positives();
        if self.positive_mask.len() != n {
            return Err(Error::Shape("positive_mask length differs from weights".into()));
        }
        if self.logits.shape() != [n, k] || self.gt_cls.shape() != [n, k] {
            return Err(Error::Shape(format!(
                "expected logits/gt_cls of shape [{n}, {k}], got {:?} / {:?}",
                self.logits.shape(),
                self.gt_cls.shape()
            )));
        }
        if self.loc_preds.shape() != [np, 4] || self.gt_loc.shape() != [np, 4] {
            return Err(Error::Shape(format!(
                "expected regression tensors of shape [{np}, 4], got {:?} / {:?}",
                self.loc_preds.shape(),
                self.gt_loc.shape()
            )));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("sample weights must be finite and non-negative"));
        }
        for i in 0..n {
            let s: f64 = self.gt_cls.row(i).iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Shape(format!("gt_cls row {i} sums to {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub cls_term: f64,
    pub reg_term: f64,
    /// Set when the batch has no positive sample; the regression term is
    /// then reported as zero and left out of `total`.
    pub no_positives: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// d total / d logits, shape `[N, C+1]`.
    pub logits: Tensor,
    /// d total / d loc_preds, shape `[N_pos, 4]`.
    pub loc: Tensor,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// `log(max(softmax(logits)[c], PROB_FLOOR))` without forming the
/// probability first.
pub fn log_softmax_at(logits: &[f64], c: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    (logits[c] - lse).max(PROB_FLOOR.ln())
}

pub fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Derivative of [`smooth_l1`]; the kink at |x| = 1 takes the clamped value.
pub fn smooth_l1_grad(x: f64) -> f64 {
    x.clamp(-1.0, 1.0)
}

/// Raw weighted classification and regression sums.
fn raw_terms(batch: &SampleBatch) -> (f64, f64) {
    let mut cls = 0.0;
    for (i, &w) in batch.weights.iter().enumerate() {
        let z = batch.logits.row(i);
        for (c, &g) in batch.gt_cls.row(i).iter().enumerate() {
            if g != 0.0 {
                cls -= w * g * log_softmax_at(z, c);
            }
        }
    }
    let mut reg = 0.0;
    for (i, row) in batch.positive_rows() {
        let w = batch.weights[i];
        for (p, g) in batch.loc_preds.row(row).iter().zip(batch.gt_loc.row(row)) {
            reg += w * smooth_l1(p - g);
        }
    }
    (cls, reg)
}

pub fn detection_loss(batch: &SampleBatch, cfg: &LossConfig) -> Result<LossValue> {
    batch.validate(cfg)?;
    let n = batch.num_samples();
    let np = batch.num_positives();
    let (cls_term, reg_term) = raw_terms(batch);
    let mut total = 0.0;
    if n > 0 {
        total += cfg.alpha1 / n as f64 * cls_term;
    }
    if np > 0 {
        total += cfg.alpha2 / np as f64 * reg_term;
    }
    Ok(LossValue {
        total,
        cls_term,
        reg_term: if np > 0 { reg_term } else { 0.0 },
        no_positives: np == 0,
    })
}

pub fn detection_loss_grad(batch: &SampleBatch, cfg: &LossConfig) -> Result<LossGrad> {
    batch.validate(cfg)?;
    let n = batch.num_samples();
    let np = batch.num_positives();
    let k = cfg.num_classes + 1;
    let mut g_logits = Tensor::zeros(&[n, k]);
    let cls_scale = if n > 0 { cfg.alpha1 / n as f64 } else { 0.0 };
    for i in 0..n {
        let w = batch.weights[i];
        let p = softmax(batch.logits.row(i));
        let y = batch.gt_cls.row(i);
        let row = g_logits.row_mut(i);
        for c in 0..k {
            row[c] = cls_scale * w * (p[c] - y[c]);
        }
    }
    let mut g_loc = Tensor::zeros(&[np, 4]);
    if np > 0 {
        let reg_scale = cfg.alpha2 / np as f64;
        for (i, r) in batch.positive_rows() {
            let w = batch.weights[i];
            let diffs: Vec<f64> = batch
                .loc_preds
                .row(r)
                .iter()
                .zip(batch.gt_loc.row(r))
                .map(|(p, g)| p - g)
                .collect();
            let row = g_loc.row_mut(r);
            for l in 0..4 {
                row[l] = reg_scale * w * smooth_l1_grad(diffs[l]);
            }
        }
    }
    Ok(LossGrad {
        logits: g_logits,
        loc: g_loc,
    })
}

/// Selects negatives by descending background cross-entropy, keeping at most
/// `ratio` negatives per positive (and at least `ratio` when there are no
/// positives, so object-free images still teach background).
///
/// `bg_loss[i]` is `-log p_background` for sample `i`. Returns the mask of
/// samples to keep: all positives plus the chosen negatives. Ties are broken
/// by the lower sample index.
pub fn hard_negative_mask(bg_loss: &[f64], positive: &[bool], ratio: usize) -> Vec<bool> {
    let num_pos = positive.iter().filter(|&&p| p).count();
    let budget = ratio * num_pos.max(1);
    let mut negatives: Vec<usize> = (0..bg_loss.len()).filter(|&i| !positive[i]).collect();
    negatives.sort_by(|&a, &b| match bg_loss[b].total_cmp(&bg_loss[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    let mut keep = positive.to_vec();
    for &i in negatives.iter().take(budget) {
        keep[i] = true;
    }
    keep
}
