use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use cmadet::config::RunConfig;
use cmadet::eval::{categorize_false_positives, evaluate, pr_curve, size_breakdown, ClassAp, FpCategory, SizeBinResult};
use cmadet::io::{
    self, align, detection_rows, group_by_image, load_records, load_split, read_json, write_json,
    DatasetManifest, EnsembleManifest, EnsembleMember, MANIFEST,
};
use cmadet::pipeline::{effective_noise, finish_experiment, fused_inference, make_splits, select_ensemble, DetectorTrainer};
use cmadet::{Error, Tensor};

const CONFIG_FILE: &str = "config.toml";
const RUN_FILE: &str = "run.json";

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, cfg.to_toml()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

pub fn gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let splits = make_splits(cfg)?;
    let digest = cfg.digest();
    let manifest = io::write_dataset(out, &splits, &cfg.data.scene, &effective_noise(cfg), cfg.seed, &digest)?;
    write_config(out, cfg)?;
    log::info!(
        "wrote {} images to {} (corruptions: {})",
        manifest.images.len(),
        out.display(),
        manifest.noise_ledger.entries.len()
    );
    Ok(())
}

/// Links a run directory to its dataset.
#[derive(Debug, Serialize, Deserialize)]
struct RunInfo {
    config_digest: String,
    dataset: PathBuf,
}

#[derive(Debug, Serialize)]
struct IterationSummary {
    iteration: usize,
    stage: cmadet::cma::Stage,
    error_rate: f64,
    alpha: f64,
    val_map: f64,
}

#[derive(Debug, Serialize)]
struct RunSummary {
    config_digest: String,
    iterations: Vec<IterationSummary>,
}

fn load_dataset_manifest(dir: &Path, cfg: &RunConfig) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = read_json(&dir.join(MANIFEST))?;
    if manifest.spec.num_classes != cfg.net.num_classes || manifest.spec.image_size != cfg.net.image_size {
        return Err(Error::config(format!(
            "dataset has {} classes at {}px but the network expects {} classes at {}px",
            manifest.spec.num_classes, manifest.spec.image_size, cfg.net.num_classes, cfg.net.image_size
        ))
        .into());
    }
    Ok(manifest)
}

pub fn train(config: Option<&Path>, seed: Option<u64>, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let saved = out.join(CONFIG_FILE);
    let cfg = match config {
        None if resume && saved.exists() => load_config(Some(&saved), seed)?,
        _ => load_config(config, seed)?,
    };
    let digest = cfg.digest();
    let resumed = if resume { load_records(out, &digest)? } else { Vec::new() };
    if !resume && io::iteration_dir(out, 1).exists() {
        return Err(Error::config(format!("{} already holds a run; pass --resume to continue it", out.display())).into());
    }
    let manifest = load_dataset_manifest(data, &cfg)?;
    let train = load_split(data, &manifest, "train")?;
    let val = load_split(data, &manifest, "val")?;
    write_config(out, &cfg)?;
    let dataset = fs::canonicalize(data).map_err(|e| Error::io(data, e))?;
    write_json(
        &out.join(RUN_FILE),
        &RunInfo {
            config_digest: digest.clone(),
            dataset,
        },
    )?;
    if !resumed.is_empty() {
        log::info!("resuming after iteration {}", resumed.len());
    }
    let mut trainer = DetectorTrainer::new(&cfg, &train, &val)?;
    let records = cmadet::cma::run_cma(&train.annotations, &cfg.cma, &mut trainer, resumed, |r| {
        log::info!(
            "iteration {} stage={:?} E={:.6} alpha={:.6} val_map={:.6}",
            r.iteration,
            r.stage,
            r.error_rate,
            r.alpha,
            r.val_map
        );
        io::save_record(out, r, None, &digest)
    })?;
    let summary = RunSummary {
        config_digest: digest,
        iterations: records
            .iter()
            .map(|r| IterationSummary {
                iteration: r.iteration,
                stage: r.stage,
                error_rate: r.error_rate,
                alpha: r.alpha,
                val_map: r.val_map,
            })
            .collect(),
    };
    write_json(&out.join("metrics.json"), &summary)?;
    Ok(())
}

fn relative_or_absolute(target: &Path, base: &Path) -> Result<String> {
    let t = fs::canonicalize(target).map_err(|e| Error::io(target, e))?;
    let b = fs::canonicalize(base).map_err(|e| Error::io(base, e))?;
    let p = t.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(t);
    Ok(p.to_string_lossy().into_owned())
}

pub fn select(run: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(Some(&run.join(CONFIG_FILE)), None)?;
    let digest = cfg.digest();
    let info: RunInfo = read_json(&run.join(RUN_FILE))?;
    if info.config_digest != digest {
        return Err(Error::config(format!("{} does not match {}", RUN_FILE, CONFIG_FILE)).into());
    }
    let records = load_records(run, &digest)?;
    let manifest = load_dataset_manifest(&info.dataset, &cfg)?;
    let val = load_split(&info.dataset, &manifest, "val")?;
    let val_images: Vec<Tensor> = val.images.iter().map(|i| i.to_tensor()).collect();
    let set = select_ensemble(&cfg, &records, &val_images, &val.annotations)?
        .ok_or(Error::Empty("second-stage records in the run directory"))?;
    if set.uniform_fallback {
        log::warn!("every member has zero diversity-accuracy product; using uniform lambda");
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| run.join("ensemble.json"));
    let out_dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let members = set
        .members
        .iter()
        .enumerate()
        .map(|(k, &it)| {
            Ok(EnsembleMember {
                iteration: it,
                snapshot: relative_or_absolute(&io::iteration_dir(run, it).join("model.bin"), out_dir)?,
                alpha: set.alpha[k],
                div: set.div[k],
                lambda: set.lambda[k],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "selected iterations {:?} lambda={:?} fused_val_map={:.6}",
        set.members,
        set.lambda,
        set.fused_val_map
    );
    write_json(
        &out,
        &EnsembleManifest {
            config_digest: digest,
            members,
            q_matrix: set.q_matrix,
            uniform_fallback: set.uniform_fallback,
            fused_val_map: set.fused_val_map,
            trace: set.trace,
            decode: cfg.decode,
            nms_threshold: cfg.ensemble.nms_threshold,
        },
    )?;
    Ok(())
}

pub fn infer(ensemble: &Path, images: &Path, out: &Path) -> Result<()> {
    let manifest: EnsembleManifest = read_json(ensemble)?;
    let dir = ensemble.parent().unwrap_or(Path::new("."));
    let params = manifest.load_members(dir)?;
    let imgs = io::read_image_dir(images)?;
    let ids: Vec<usize> = imgs.iter().map(|i| i.id).collect();
    let tensors: Vec<Tensor> = imgs.iter().map(|i| i.to_tensor()).collect();
    let refs: Vec<&_> = params.iter().collect();
    let dets = fused_inference(&refs, &manifest.lambda(), &tensors, &manifest.decode, manifest.nms_threshold)?;
    let rows = detection_rows(&ids, &dets);
    log::info!("{} detections on {} images", rows.len(), ids.len());
    io::write_detections(out, &manifest.config_digest, rows)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    config_digest: String,
    iou_threshold: f64,
    interpolation: cmadet::eval::Interpolation,
    map: f64,
    per_class: Vec<ClassAp>,
    size_bins: Option<Vec<SizeBinResult>>,
    /// False positives per category over all detections.
    false_positives: std::collections::BTreeMap<String, usize>,
}

pub fn eval(cfg: &RunConfig, detections: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let det_rows = io::read_detections(detections)?;
    let ann_rows = io::read_annotations(annotations)?;
    let ids: Vec<usize> = det_rows
        .iter()
        .map(|r| r.image_id)
        .chain(ann_rows.iter().map(|r| r.image_id))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (did, dl) = group_by_image(det_rows.iter().map(|r| (r.image_id, r.detection)));
    let (gid, gl) = group_by_image(ann_rows.iter().map(|r| (r.image_id, r.object)));
    let dets = align(&ids, &did, &dl);
    let gts = align(&ids, &gid, &gl);
    if let Some(bad) = dets.iter().flatten().map(|d| d.cls).chain(gts.iter().flatten().map(|g| g.cls)).find(|&c| c == 0 || c > cfg.net.num_classes) {
        return Err(Error::config(format!("class id {bad} outside 1..={}", cfg.net.num_classes)).into());
    }
    let c = cfg.net.num_classes;
    let thr = cfg.eval.iou_threshold;
    let interp = cfg.eval.interpolation;
    let digest = cfg.digest();
    let summary = evaluate(&dets, &gts, c, thr, interp);

    for cls in 1..=c {
        let curve = pr_curve(&dets, &gts, cls, thr);
        let name = io::class_name(cls);
        io::write_report_file(out, &format!("pr_{name}.csv"), &io::pr_csv(&curve, &digest))?;
        io::write_report_file(out, &format!("pr_{name}.svg"), &io::pr_svg(&curve, &name, &digest))?;
    }
    let size_bins = match size_breakdown(&dets, &gts, c, thr, interp) {
        Ok((_, bins)) => {
            io::write_report_file(out, "sizebins.csv", &io::sizebins_csv(&bins, c, &digest))?;
            Some(bins)
        }
        Err(e) => {
            log::warn!("size breakdown skipped: {e}");
            None
        }
    };
    let fps = categorize_false_positives(&dets, &gts, c, thr);
    io::write_report_file(out, "fp.csv", &io::fp_csv(&fps, &ids, &digest))?;
    let false_positives = FpCategory::ALL
        .iter()
        .map(|cat| (cat.name().to_string(), fps.iter().filter(|r| r.category == *cat).count()))
        .collect();

    let report = EvalReport {
        config_digest: digest,
        iou_threshold: thr,
        interpolation: interp,
        map: summary.map,
        per_class: summary.per_class,
        size_bins,
        false_positives,
    };
    write_json(&out.join("metrics.json"), &report)?;
    println!("{}", serde_json::json!({ "map": report.map }));
    Ok(())
}

pub fn experiment(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_config(out, cfg)?;
    let splits = make_splits(cfg)?;
    let mut trainer = DetectorTrainer::new(cfg, &splits.train, &splits.val)?;
    let records = cmadet::cma::run_cma(&splits.train.annotations, &cfg.cma, &mut trainer, vec![], |r| {
        log::info!(
            "iteration {} stage={:?} E={:.6} alpha={:.6} val_map={:.6}",
            r.iteration,
            r.stage,
            r.error_rate,
            r.alpha,
            r.val_map
        );
        Ok(())
    })?;
    drop(trainer);
    let art = finish_experiment(cfg, splits, records)?;
    let path = out.join("report.json");
    fs::write(&path, art.report.to_json()).map_err(|e| Error::io(&path, e))?;
    log::info!("report digest {}", art.report.digest());
    println!("{}", serde_json::to_string(&art.report.checks).context("serialising checks")?);
    Ok(())
}
