//! Detector training under per-object weights, batched inference, fused
//! ensemble inference, and the end-to-end noisy-label experiment.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cma::{
    positive_sample_weight, run_cma, select_clean, CmaConfig, DetectorRecord, ObjectWeightVector,
    Stage, TrainRequest, Trainer,
};
use crate::config::{derive_seed, sha256_hex, RunConfig};
use crate::ensemble::{fuse_detections, greedy_select, Candidate, EnsembleSet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, fp_counts, FpCategory, Interpolation};
use crate::geometry::{match_default_boxes, Detection, GroundTruthObject};
use crate::loss::{detection_loss_grad, hard_negative_mask, log_softmax_at, LossConfig, SampleBatch};
use crate::synthdata::{generate_splits, Dataset, NoiseModel, Splits};
use crate::tensor::Tensor;
use crate::tinynet::{
    adam_step, backward, decode_detections, encode, forward, forward_cached, AdamConfig, AdamState,
    DecodeConfig, NetConfig, NetworkParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs for detectors trained from a fresh initialisation.
    pub epochs: usize,
    /// Epochs for detectors warm-started from the clean detector.
    pub warm_epochs: usize,
    /// Images per optimiser step.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Fraction of a detector's epochs after which the learning rate is
    /// multiplied by `lr_drop_factor`.
    pub lr_drop_at: f64,
    pub lr_drop_factor: f64,
    /// IoU a default box needs with its best ground truth to be positive.
    pub match_threshold: f64,
    /// Negatives kept per positive by hard negative mining; 0 disables mining.
    pub negative_ratio: usize,
    /// Random horizontal flips of training images.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 32,
            warm_epochs: 10,
            batch_size: 8,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            lr_drop_at: 0.75,
            lr_drop_factor: 0.1,
            match_threshold: 0.5,
            negative_ratio: 3,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if !(self.match_threshold > 0.0 && self.match_threshold < 1.0) {
            return Err(Error::config("train.match_threshold must lie in (0, 1)"));
        }
        if !((0.0..=1.0).contains(&self.lr_drop_at) && self.lr_drop_factor > 0.0) {
            return Err(Error::config("train.lr_drop_at must lie in [0, 1] and lr_drop_factor be positive"));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("invalid Adam hyper-parameters"));
        }
        Ok(())
    }
}

/// Fixed training targets of one image (or its mirror).
#[derive(Debug, Clone)]
struct Prepared {
    image: Tensor,
    /// Class per default box, 0 for background.
    cls: Vec<usize>,
    /// Matched `object_index` per default box.
    object: Vec<Option<usize>>,
    /// Regression target per default box; meaningful for positives only.
    offsets: Vec<[f64; 4]>,
}

fn mirror(image: &Tensor) -> Tensor {
    let s = image.shape().to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    Tensor::from_vec(&s, out).expect("same shape")
}

fn prepare(image: Tensor, gts: &[GroundTruthObject], net: &NetConfig, layout_boxes: &[crate::geometry::Box], thr: f64) -> Prepared {
    let assign = match_default_boxes(layout_boxes, gts, thr);
    let mut cls = vec![0; assign.len()];
    let mut object = vec![None; assign.len()];
    let mut offsets = vec![[0.0; 4]; assign.len()];
    for a in &assign {
        if let Some(g) = a.matched {
            let gt = &gts[g];
            cls[a.sample_index] = gt.cls;
            object[a.sample_index] = Some(gt.object_index);
            offsets[a.sample_index] = encode(&gt.bbox, &layout_boxes[a.sample_index], net.anchors.variances);
        }
    }
    Prepared {
        image,
        cls,
        object,
        offsets,
    }
}

fn mirrored_gts(gts: &[GroundTruthObject], size: f64) -> Vec<GroundTruthObject> {
    gts.iter()
        .map(|g| GroundTruthObject {
            bbox: crate::geometry::Box {
                cx: size - g.bbox.cx,
                ..g.bbox
            },
            ..*g
        })
        .collect()
}

/// Trains detectors on a fixed training set under per-object weights.
pub struct DetectorTrainer<'a> {
    net: NetConfig,
    loss: LossConfig,
    train_cfg: TrainConfig,
    decode: DecodeConfig,
    interp: Interpolation,
    seed: u64,
    /// `[original, mirrored]` per training image.
    prepared: Vec<[Prepared; 2]>,
    train_images: Vec<Tensor>,
    val_images: Vec<Tensor>,
    val_gts: &'a [Vec<GroundTruthObject>],
}

impl<'a> DetectorTrainer<'a> {
    pub fn new(cfg: &RunConfig, train: &Dataset, val: &'a Dataset) -> Result<Self> {
        let layout = cfg.net.validate()?;
        let defaults = crate::tinynet::default_boxes(&cfg.net.anchors, layout.grid, layout.full);
        let size = cfg.net.image_size as f64;
        let prepared = train
            .images
            .iter()
            .zip(&train.annotations)
            .map(|(img, gts)| {
                let t = img.to_tensor();
                let m = mirror(&t);
                [
                    prepare(t, gts, &cfg.net, &defaults, cfg.train.match_threshold),
                    prepare(m, &mirrored_gts(gts, size), &cfg.net, &defaults, cfg.train.match_threshold),
                ]
            })
            .collect();
        Ok(DetectorTrainer {
            net: cfg.net.clone(),
            loss: cfg.loss,
            train_cfg: cfg.train,
            decode: cfg.decode,
            interp: cfg.eval.interpolation,
            seed: cfg.seed,
            prepared,
            train_images: train.images.iter().map(|i| i.to_tensor()).collect(),
            val_images: val.images.iter().map(|i| i.to_tensor()).collect(),
            val_gts: &val.annotations,
        })
    }

    /// One optimiser step over `batch`; returns the batch loss.
    fn step(
        &self,
        params: &mut NetworkParams,
        adam: &mut AdamState,
        adam_cfg: &AdamConfig,
        batch: &[&Prepared],
        weights: &ObjectWeightVector,
    ) -> Result<f64> {
        let k = self.net.num_classes + 1;
        let mut caches = Vec::with_capacity(batch.len());
        let mut logits = Vec::new();
        let mut gt_cls = Vec::new();
        let mut loc_preds = Vec::new();
        let mut gt_loc = Vec::new();
        let mut sample_w = Vec::new();
        let mut pos_mask = Vec::new();
        // selected rows per image, for scattering gradients back
        let mut rows: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
        for p in batch {
            let (head, cache) = forward_cached(params, &p.image)?;
            let positive: Vec<bool> = p.cls.iter().map(|&c| c != 0).collect();
            let keep = if self.train_cfg.negative_ratio == 0 {
                vec![true; positive.len()]
            } else {
                let bg_loss: Vec<f64> = (0..positive.len())
                    .map(|i| -log_softmax_at(head.cls_logits.row(i), 0))
                    .collect();
                hard_negative_mask(&bg_loss, &positive, self.train_cfg.negative_ratio)
            };
            let mut sel = Vec::new();
            for i in (0..keep.len()).filter(|&i| keep[i]) {
                sel.push(i);
                logits.extend_from_slice(head.cls_logits.row(i));
                let mut onehot = vec![0.0; k];
                onehot[p.cls[i]] = 1.0;
                gt_cls.extend(onehot);
                pos_mask.push(positive[i]);
                match p.object[i] {
                    Some(j) => {
                        sample_w.push(positive_sample_weight(weights, j)?);
                        loc_preds.extend_from_slice(head.loc_offsets.row(i));
                        gt_loc.extend_from_slice(&p.offsets[i]);
                    }
                    None => sample_w.push(1.0),
                }
            }
            rows.push(sel);
            caches.push((head, cache));
        }
        let n = sample_w.len();
        let np = pos_mask.iter().filter(|&&b| b).count();
        let sb = SampleBatch {
            logits: Tensor::from_vec(&[n, k], logits)?,
            loc_preds: Tensor::from_vec(&[np, 4], loc_preds)?,
            gt_cls: Tensor::from_vec(&[n, k], gt_cls)?,
            gt_loc: Tensor::from_vec(&[np, 4], gt_loc)?,
            weights: sample_w,
            positive_mask: pos_mask,
        };
        let value = crate::loss::detection_loss(&sb, &self.loss)?;
        let grad = detection_loss_grad(&sb, &self.loss)?;

        let mut total: Option<Vec<Tensor>> = None;
        let (mut r, mut pr) = (0, 0);
        for ((head, cache), sel) in caches.iter().zip(&rows) {
            let boxes = head.cls_logits.shape()[0];
            let mut g_cls = Tensor::zeros(&[boxes, k]);
            let mut g_loc = Tensor::zeros(&[boxes, 4]);
            for &i in sel {
                g_cls.row_mut(i).copy_from_slice(grad.logits.row(r));
                if sb.positive_mask[r] {
                    g_loc.row_mut(i).copy_from_slice(grad.loc.row(pr));
                    pr += 1;
                }
                r += 1;
            }
            let g = backward(params, cache, &g_cls, &g_loc)?;
            match total.as_mut() {
                None => total = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let grads = total.expect("non-empty batch");
        adam_step(&mut params.tensors, &grads, adam, adam_cfg);
        if !params.tensors.iter().all(Tensor::all_finite) {
            return Err(Error::Trainer {
                iteration: 0,
                reason: "parameters became non-finite".into(),
            });
        }
        Ok(value.total)
    }

    /// Trains one detector. `tag` separates the shuffling streams of
    /// different detectors.
    pub fn fit(
        &self,
        weights: &ObjectWeightVector,
        warm_start: Option<&NetworkParams>,
        epochs: usize,
        tag: u64,
    ) -> Result<NetworkParams> {
        self.fit_with(weights, warm_start, epochs, tag, |_, _, _| {})
    }

    /// [`Self::fit`] with a callback receiving the epoch, its mean loss and
    /// the parameters after it.
    pub fn fit_with(
        &self,
        weights: &ObjectWeightVector,
        warm_start: Option<&NetworkParams>,
        epochs: usize,
        tag: u64,
        mut on_epoch: impl FnMut(usize, f64, &NetworkParams),
    ) -> Result<NetworkParams> {
        let mut params = match warm_start {
            Some(p) => p.clone(),
            None => NetworkParams::init(self.net.clone(), derive_seed(self.seed, "init", 0))?,
        };
        let mut adam = AdamState::new(&params.tensors);
        let mut order: Vec<usize> = (0..self.prepared.len()).collect();
        let drop_epoch = (self.train_cfg.lr_drop_at * epochs as f64).round() as usize;
        for epoch in 0..epochs {
            let mut adam_cfg = self.train_cfg.adam;
            if epoch >= drop_epoch {
                adam_cfg.lr *= self.train_cfg.lr_drop_factor;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                derive_seed(self.seed, "shuffle", tag),
                "epoch",
                epoch as u64,
            ));
            order.sort_unstable();
            order.shuffle(&mut rng);
            let flips: Vec<usize> = order
                .iter()
                .map(|_| if self.train_cfg.hflip { rand::Rng::gen_range(&mut rng, 0..2) } else { 0 })
                .collect();
            let mut loss_sum = 0.0;
            let mut steps = 0;
            for (chunk, fchunk) in order
                .chunks(self.train_cfg.batch_size)
                .zip(flips.chunks(self.train_cfg.batch_size))
            {
                let batch: Vec<&Prepared> = chunk
                    .iter()
                    .zip(fchunk)
                    .map(|(&i, &f)| &self.prepared[i][f])
                    .collect();
                loss_sum += self.step(&mut params, &mut adam, &adam_cfg, &batch, weights)?;
                steps += 1;
            }
            let mean = loss_sum / steps as f64;
            log::debug!("detector {tag} epoch {epoch}: mean loss {mean:.5}");
            on_epoch(epoch, mean, &params);
        }
        Ok(params)
    }
}

impl Trainer for DetectorTrainer<'_> {
    type Params = NetworkParams;

    fn train(&mut self, req: TrainRequest<'_, NetworkParams>) -> Result<NetworkParams> {
        let epochs = if req.warm_start.is_some() {
            self.train_cfg.warm_epochs
        } else {
            self.train_cfg.epochs
        };
        self.fit(req.weights, req.warm_start, epochs, req.iteration as u64)
    }

    fn train_detections(&mut self, params: &NetworkParams) -> Result<Vec<Vec<Detection>>> {
        detect_all(params, &self.train_images, &self.decode)
    }

    fn validation_map(&mut self, params: &NetworkParams) -> Result<f64> {
        let dets = detect_all(params, &self.val_images, &self.decode)?;
        Ok(evaluate(&dets, self.val_gts, self.net.num_classes, 0.5, self.interp).map)
    }
}

/// Runs one detector over every image; parallel across images.
pub fn detect_all(params: &NetworkParams, images: &[Tensor], decode: &DecodeConfig) -> Result<Vec<Vec<Detection>>> {
    let variances = params.config.anchors.variances;
    images
        .par_iter()
        .map(|img| forward(params, img).map(|h| decode_detections(&h, variances, decode)))
        .collect()
}

/// Runs every member, re-scores by `lambda`, and fuses per image.
pub fn fused_inference(
    members: &[&NetworkParams],
    lambda: &[f64],
    images: &[Tensor],
    decode: &DecodeConfig,
    nms_thr: f64,
) -> Result<Vec<Vec<Detection>>> {
    let per_member = members
        .iter()
        .map(|p| detect_all(p, images, decode))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[Vec<Detection>]> = per_member.iter().map(Vec::as_slice).collect();
    Ok(fuse_detections(&refs, lambda, nms_thr))
}

/// Noise model with its seed tied to the run seed.
pub fn effective_noise(cfg: &RunConfig) -> NoiseModel {
    NoiseModel {
        seed: derive_seed(cfg.seed, "noise", cfg.data.noise.seed),
        ..cfg.data.noise
    }
}

pub fn make_splits(cfg: &RunConfig) -> Result<Splits> {
    generate_splits(
        &cfg.data.scene,
        &effective_noise(cfg),
        [cfg.data.train, cfg.data.val, cfg.data.test],
        cfg.seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub stage: Stage,
    pub error_rate: f64,
    pub alpha: f64,
    pub val_map: f64,
    pub test_map: f64,
    /// False positives per category on the test set at the operating score,
    /// in `Loc, Sim, BG, Oth` order.
    pub test_fp: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetrics {
    pub members: Vec<usize>,
    pub lambda: Vec<f64>,
    pub div: Vec<f64>,
    pub q_matrix: Vec<Vec<f64>>,
    pub uniform_fallback: bool,
    pub val_map: f64,
    pub test_map: f64,
    pub test_fp: [usize; 4],
}

/// The four ordinal trend checks of the noisy-label experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrendChecks {
    /// Clean detector's test mAP is at least the first detector's.
    pub clean_beats_first: bool,
    /// Best second-stage detector's test mAP is at least the clean detector's.
    pub nlcma_beats_clean: bool,
    /// Ensemble test mAP is at least the best single detector's.
    pub ensemble_beats_best_single: bool,
    /// Clean detector makes no more background false positives than the first.
    pub clean_fewer_bg_fp: bool,
}

impl TrendChecks {
    pub fn all(&self) -> bool {
        self.clean_beats_first && self.nlcma_beats_clean && self.ensemble_beats_best_single && self.clean_fewer_bg_fp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_digest: String,
    pub seed: u64,
    pub noise: NoiseSummary,
    pub iterations: Vec<IterationMetrics>,
    pub clean_iteration: Option<usize>,
    pub best_nlcma_iteration: Option<usize>,
    pub best_single_iteration: usize,
    pub ensemble: Option<EnsembleMetrics>,
    pub checks: Option<TrendChecks>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub train_objects: usize,
    pub spurious: usize,
    pub dropped: usize,
    pub flipped: usize,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn iteration(&self, m: usize) -> &IterationMetrics {
        &self.iterations[m - 1]
    }
}

const BG: usize = 2;

fn argmax_by<T>(items: &[T], key: impl Fn(&T) -> f64) -> Option<usize> {
    // first maximum wins
    items
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, x)| match best {
            Some((_, v)) if v >= key(x) => best,
            _ => Some((i, key(x))),
        })
        .map(|(i, _)| i)
}

/// Everything trained by [`run_experiment`], for callers that need more than
/// the report.
pub struct ExperimentArtifacts {
    pub splits: Splits,
    pub records: Vec<DetectorRecord<NetworkParams>>,
    pub ensemble: Option<EnsembleSet>,
    pub report: ExperimentReport,
}

/// Generates data, runs both boosting stages, selects the ensemble from the
/// second-stage detectors and scores everything on the clean test set.
///
/// The clean detector is chosen on validation data; "best" single detectors
/// in the trend checks are judged by test mAP.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentArtifacts> {
    cfg.validate()?;
    let splits = make_splits(cfg)?;
    let mut trainer = DetectorTrainer::new(cfg, &splits.train, &splits.val)?;
    let records = run_cma(&splits.train.annotations, &cfg.cma, &mut trainer, vec![], |_| Ok(()))?;
    finish_experiment(cfg, splits, records)
}

/// Greedy ensemble selection over the second-stage records, scored on the
/// validation set. `None` when there are no second-stage records.
pub fn select_ensemble(
    cfg: &RunConfig,
    records: &[DetectorRecord<NetworkParams>],
    val_images: &[Tensor],
    val_gts: &[Vec<GroundTruthObject>],
) -> Result<Option<EnsembleSet>> {
    let nlcma: Vec<&DetectorRecord<NetworkParams>> = records.iter().filter(|r| r.stage == Stage::Nlcma).collect();
    if nlcma.is_empty() {
        return Ok(None);
    }
    let val_dets = nlcma
        .iter()
        .map(|r| detect_all(&r.params, val_images, &cfg.decode))
        .collect::<Result<Vec<_>>>()?;
    let cands: Vec<Candidate<'_>> = nlcma
        .iter()
        .zip(&val_dets)
        .map(|(r, d)| Candidate {
            id: r.iteration,
            alpha: r.alpha,
            val_map: r.val_map,
            val_dets: d,
        })
        .collect();
    greedy_select(&cands, val_gts, cfg.net.num_classes, cfg.eval.interpolation, &cfg.ensemble).map(Some)
}

/// Scores trained records; shared by [`run_experiment`] and resumable runs.
pub fn finish_experiment(
    cfg: &RunConfig,
    splits: Splits,
    records: Vec<DetectorRecord<NetworkParams>>,
) -> Result<ExperimentArtifacts> {
    let c = cfg.net.num_classes;
    let interp = cfg.eval.interpolation;
    let val_images: Vec<Tensor> = splits.val.images.iter().map(|i| i.to_tensor()).collect();
    let test_images: Vec<Tensor> = splits.test.images.iter().map(|i| i.to_tensor()).collect();
    let test_gts = &splits.test.annotations;

    let mut iterations = Vec::with_capacity(records.len());
    let mut test_dets = Vec::with_capacity(records.len());
    for r in &records {
        let d = detect_all(&r.params, &test_images, &cfg.decode)?;
        iterations.push(IterationMetrics {
            iteration: r.iteration,
            stage: r.stage,
            error_rate: r.error_rate,
            alpha: r.alpha,
            val_map: r.val_map,
            test_map: evaluate(&d, test_gts, c, cfg.eval.iou_threshold, interp).map,
            test_fp: fp_counts(&d, test_gts, c, cfg.eval.operating_score),
        });
        test_dets.push(d);
    }
    let clean = select_clean(&records, cfg.cma.clean_selection);
    let nlcma: Vec<usize> = (0..records.len()).filter(|&i| records[i].stage == Stage::Nlcma).collect();
    let best_nlcma = argmax_by(&nlcma, |&i| iterations[i].test_map).map(|k| nlcma[k]);
    let best_single = argmax_by(&iterations, |m| m.test_map).expect("at least one detector");

    let ensemble = select_ensemble(cfg, &records, &val_images, &splits.val.annotations)?;
    let mut ens_metrics = None;
    if let Some(set) = &ensemble {
        let member_dets: Vec<&[Vec<Detection>]> = set
            .members
            .iter()
            .map(|&it| test_dets[it - 1].as_slice())
            .collect();
        let fused = fuse_detections(&member_dets, &set.lambda, cfg.ensemble.nms_threshold);
        ens_metrics = Some(EnsembleMetrics {
            members: set.members.clone(),
            lambda: set.lambda.clone(),
            div: set.div.clone(),
            q_matrix: set.q_matrix.clone(),
            uniform_fallback: set.uniform_fallback,
            val_map: set.fused_val_map,
            test_map: evaluate(&fused, test_gts, c, cfg.eval.iou_threshold, interp).map,
            test_fp: fp_counts(&fused, test_gts, c, cfg.eval.operating_score),
        });
    }

    let checks = match (clean, best_nlcma, &ens_metrics) {
        (Some(cl), Some(bn), Some(e)) => {
            let first = &iterations[0];
            let cm = &iterations[cl];
            Some(TrendChecks {
                clean_beats_first: cm.test_map >= first.test_map,
                nlcma_beats_clean: iterations[bn].test_map >= cm.test_map,
                ensemble_beats_best_single: e.test_map >= iterations[best_single].test_map,
                clean_fewer_bg_fp: cm.test_fp[BG] <= first.test_fp[BG],
            })
        }
        _ => None,
    };
    debug_assert_eq!(FpCategory::ALL[BG], FpCategory::Bg);

    let ledger = &splits.ledger;
    use crate::synthdata::Corruption;
    let noise = NoiseSummary {
        train_objects: splits.train_clean.iter().map(Vec::len).sum(),
        spurious: ledger.count(|c| matches!(c, Corruption::Spurious { .. })),
        dropped: ledger.count(|c| matches!(c, Corruption::Dropped { .. })),
        flipped: ledger.count(|c| matches!(c, Corruption::Flipped { .. })),
    };
    let report = ExperimentReport {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        noise,
        iterations,
        clean_iteration: clean.map(|i| records[i].iteration),
        best_nlcma_iteration: best_nlcma.map(|i| records[i].iteration),
        best_single_iteration: records[best_single].iteration,
        ensemble: ens_metrics,
        checks,
    };
    Ok(ExperimentArtifacts {
        splits,
        records,
        ensemble,
        report,
    })
}

/// Configuration of the noisy-label trend experiment for one seed.
pub fn experiment_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        cma: CmaConfig::default(),
        ..RunConfig::default()
    }
}
