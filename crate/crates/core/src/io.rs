//! On-disk formats: detection and annotation JSON, PGM images, the dataset
//! manifest, per-iteration run directories, the ensemble manifest, and CSV /
//! SVG reports.
//!
//! Every JSON document is an object carrying `config_digest` next to its
//! payload. Detection and annotation readers also accept a bare JSON array.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::cma::{DetectorRecord, ObjectWeightVector, Stage};
use crate::error::{Error, Result};
use crate::eval::{FpRecord, PrCurve, SizeBinResult};
use crate::geometry::{ClassId, Detection, GroundTruthObject};
use crate::synthdata::{Dataset, Image, NoiseLedger, NoiseModel, SceneSpec, Splits};
use crate::tinynet::{snapshot, DecodeConfig, NetworkParams};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub image_id: usize,
    #[serde(flatten)]
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRow {
    pub image_id: usize,
    #[serde(flatten)]
    pub object: GroundTruthObject,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub config_digest: String,
    pub detections: Vec<DetectionRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub config_digest: String,
    pub annotations: Vec<AnnotationRow>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Either<W, R> {
    Wrapped(W),
    Bare(Vec<R>),
}

fn check_detection(path: &Path, d: &Detection) -> Result<()> {
    if !d.bbox.is_valid() || !(0.0..=1.0).contains(&d.score) || d.cls == 0 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("invalid detection {d:?}"),
        });
    }
    Ok(())
}

/// Flattens per-image detections; `image_ids[i]` names image `i`.
pub fn detection_rows(image_ids: &[usize], dets: &[Vec<Detection>]) -> Vec<DetectionRow> {
    image_ids
        .iter()
        .zip(dets)
        .flat_map(|(&id, ds)| ds.iter().map(move |&d| DetectionRow { image_id: id, detection: d }))
        .collect()
}

pub fn annotation_rows(image_ids: &[usize], gts: &[Vec<GroundTruthObject>]) -> Vec<AnnotationRow> {
    image_ids
        .iter()
        .zip(gts)
        .flat_map(|(&id, gs)| gs.iter().map(move |&g| AnnotationRow { image_id: id, object: g }))
        .collect()
}

/// Groups rows by image id, ascending. Returns the ids and per-image lists.
pub fn group_by_image<T: Copy>(rows: impl IntoIterator<Item = (usize, T)>) -> (Vec<usize>, Vec<Vec<T>>) {
    let mut map: BTreeMap<usize, Vec<T>> = BTreeMap::new();
    for (id, x) in rows {
        map.entry(id).or_default().push(x);
    }
    map.into_iter().unzip()
}

/// Re-aligns grouped rows to `image_ids`; images without rows get empty lists.
pub fn align<T: Clone>(image_ids: &[usize], ids: &[usize], lists: &[Vec<T>]) -> Vec<Vec<T>> {
    let pos: BTreeMap<usize, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    image_ids
        .iter()
        .map(|id| pos.get(id).map(|&p| lists[p].clone()).unwrap_or_default())
        .collect()
}

pub fn write_detections(path: &Path, digest: &str, rows: Vec<DetectionRow>) -> Result<()> {
    write_json(
        path,
        &DetectionFile {
            config_digest: digest.to_string(),
            detections: rows,
        },
    )
}

pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    let rows = match read_json::<Either<DetectionFile, DetectionRow>>(path)? {
        Either::Wrapped(f) => f.detections,
        Either::Bare(v) => v,
    };
    for r in &rows {
        check_detection(path, &r.detection)?;
    }
    Ok(rows)
}

pub fn write_annotations(path: &Path, digest: &str, rows: Vec<AnnotationRow>) -> Result<()> {
    write_json(
        path,
        &AnnotationFile {
            config_digest: digest.to_string(),
            annotations: rows,
        },
    )
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let rows = match read_json::<Either<AnnotationFile, AnnotationRow>>(path)? {
        Either::Wrapped(f) => f.annotations,
        Either::Bare(v) => v,
    };
    for r in &rows {
        if !r.object.bbox.is_valid() || r.object.cls == 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("invalid annotation {:?}", r.object),
            });
        }
    }
    Ok(rows)
}

/// Binary (P5) 8-bit PGM.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.pixels);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path, id: usize) -> Result<Image> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    // header: magic, width, height, maxval, separated by whitespace, comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < buf.len() && (buf[i].is_ascii_whitespace() || buf[i] == b'#') {
            if buf[i] == b'#' {
                while i < buf.len() && buf[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < buf.len() && !buf[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&buf[start..i]).map_err(|_| bad("non-ASCII header"))?.to_string());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &buf[(i + 1).min(buf.len())..];
    if data.len() != w * h {
        return Err(bad("pixel data length does not match the header"));
    }
    Ok(Image {
        id,
        width: w,
        height: h,
        pixels: data.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub split: String,
    /// Relative to the manifest directory.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_digest: String,
    pub seed: u64,
    pub spec: SceneSpec,
    pub noise: NoiseModel,
    pub images: Vec<ImageEntry>,
    /// Annotation file per split name (`train`, `train_clean`, `val`, `test`),
    /// relative to the manifest directory.
    pub annotations: BTreeMap<String, String>,
    pub noise_ledger: NoiseLedger,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes images, annotation files and the manifest under `dir`.
pub fn write_dataset(dir: &Path, splits: &Splits, spec: &SceneSpec, noise: &NoiseModel, seed: u64, digest: &str) -> Result<DatasetManifest> {
    let mut images = Vec::new();
    let mut annotations = BTreeMap::new();
    let parts: [(&str, &Dataset, Option<&[Vec<GroundTruthObject>]>); 3] = [
        ("train", &splits.train, Some(&splits.train_clean)),
        ("val", &splits.val, None),
        ("test", &splits.test, None),
    ];
    for (name, ds, clean) in parts {
        for img in &ds.images {
            let rel = format!("images/{name}/{:05}.pgm", img.id);
            write_pgm(&dir.join(&rel), img)?;
            images.push(ImageEntry {
                id: img.id,
                split: name.to_string(),
                path: rel,
            });
        }
        let ids: Vec<usize> = ds.images.iter().map(|i| i.id).collect();
        let file = format!("{name}_annotations.json");
        write_annotations(&dir.join(&file), digest, annotation_rows(&ids, &ds.annotations))?;
        annotations.insert(name.to_string(), file);
        if let Some(clean) = clean {
            let file = format!("{name}_clean_annotations.json");
            write_annotations(&dir.join(&file), digest, annotation_rows(&ids, clean))?;
            annotations.insert(format!("{name}_clean"), file);
        }
    }
    let manifest = DatasetManifest {
        config_digest: digest.to_string(),
        seed,
        spec: spec.clone(),
        noise: *noise,
        images,
        annotations,
        noise_ledger: splits.ledger.clone(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Loads one split of a dataset written by [`write_dataset`]. `split` may be
/// `train`, `train_clean`, `val` or `test`.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: &str) -> Result<Dataset> {
    let image_split = split.strip_suffix("_clean").unwrap_or(split);
    let ann_file = manifest.annotations.get(split).ok_or_else(|| Error::Format {
        path: dir.join(MANIFEST),
        reason: format!("no annotations for split {split:?}"),
    })?;
    let entries: Vec<&ImageEntry> = manifest.images.iter().filter(|e| e.split == image_split).collect();
    let images = entries
        .iter()
        .map(|e| read_pgm(&dir.join(&e.path), e.id))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<usize> = images.iter().map(|i| i.id).collect();
    let rows = read_annotations(&dir.join(ann_file))?;
    let (gid, lists) = group_by_image(rows.iter().map(|r| (r.image_id, r.object)));
    Ok(Dataset {
        annotations: align(&ids, &gid, &lists),
        images,
    })
}

/// Reads every `*.pgm` in a directory, sorted by file name. Image ids are
/// parsed from numeric file stems, else assigned by position.
pub fn read_image_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    paths.sort();
    paths
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .unwrap_or(k);
            read_pgm(p, id)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationFile {
    pub config_digest: String,
    pub iteration: usize,
    pub stage: Stage,
    pub error_rate: f64,
    pub alpha: f64,
    pub val_map: f64,
    pub undetected: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightFile {
    pub config_digest: String,
    pub iteration: usize,
    pub object_indices: Vec<usize>,
    pub weights: Vec<f64>,
}

pub fn iteration_dir(run_dir: &Path, m: usize) -> PathBuf {
    run_dir.join(format!("iter_{m:02}"))
}

/// Persists one record: `model.bin`, `weights.json`, `metrics.json` and,
/// when given, the training-set `detections.json`.
pub fn save_record(
    run_dir: &Path,
    record: &DetectorRecord<NetworkParams>,
    train_dets: Option<Vec<DetectionRow>>,
    digest: &str,
) -> Result<()> {
    let dir = iteration_dir(run_dir, record.iteration);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(rows) = train_dets {
        write_detections(&dir.join("detections.json"), digest, rows)?;
    }
    write_json(
        &dir.join("weights.json"),
        &WeightFile {
            config_digest: digest.to_string(),
            iteration: record.iteration,
            object_indices: record.weights.object_indices.clone(),
            weights: record.weights.weights.clone(),
        },
    )?;
    snapshot::save(&record.params, &dir.join("model.bin"))?;
    // written last: its presence marks the iteration as complete
    write_json(
        &dir.join("metrics.json"),
        &IterationFile {
            config_digest: digest.to_string(),
            iteration: record.iteration,
            stage: record.stage,
            error_rate: record.error_rate,
            alpha: record.alpha,
            val_map: record.val_map,
            undetected: record.undetected.clone(),
        },
    )
}

/// Loads the completed iterations `1..=k` of a run directory, stopping at
/// the first iteration without `metrics.json`. Records written under a
/// different config digest are rejected.
pub fn load_records(run_dir: &Path, digest: &str) -> Result<Vec<DetectorRecord<NetworkParams>>> {
    let mut out = Vec::new();
    for m in 1.. {
        let dir = iteration_dir(run_dir, m);
        let metrics_path = dir.join("metrics.json");
        if !metrics_path.exists() {
            break;
        }
        let it: IterationFile = read_json(&metrics_path)?;
        let w: WeightFile = read_json(&dir.join("weights.json"))?;
        if it.config_digest != digest || w.config_digest != digest {
            return Err(Error::config(format!(
                "{} was produced by a different configuration",
                dir.display()
            )));
        }
        out.push(DetectorRecord {
            params: snapshot::load(&dir.join("model.bin"))?,
            iteration: it.iteration,
            stage: it.stage,
            error_rate: it.error_rate,
            alpha: it.alpha,
            val_map: it.val_map,
            weights: ObjectWeightVector {
                object_indices: w.object_indices,
                weights: w.weights,
                iteration: it.iteration,
            },
            undetected: it.undetected,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub iteration: usize,
    /// Relative to the manifest directory.
    pub snapshot: String,
    pub alpha: f64,
    pub div: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub config_digest: String,
    pub members: Vec<EnsembleMember>,
    pub q_matrix: Vec<Vec<f64>>,
    pub uniform_fallback: bool,
    pub fused_val_map: f64,
    pub trace: Vec<crate::ensemble::SelectionStep>,
    pub decode: DecodeConfig,
    pub nms_threshold: f64,
}

impl EnsembleManifest {
    pub fn load_members(&self, manifest_dir: &Path) -> Result<Vec<NetworkParams>> {
        self.members
            .iter()
            .map(|m| snapshot::load(&manifest_dir.join(&m.snapshot)))
            .collect()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.lambda).collect()
    }
}

fn digest_line(prefix: &str, digest: &str) -> String {
    format!("{prefix} config_digest={digest}\n")
}

/// `threshold,precision,recall` rows, one per ranked detection.
pub fn pr_csv(curve: &PrCurve, digest: &str) -> String {
    let mut s = digest_line("#", digest);
    s.push_str("threshold,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.threshold, p.precision, p.recall);
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn sizebins_csv(bins: &[SizeBinResult], num_classes: usize, digest: &str) -> String {
    let mut s = digest_line("#", digest);
    s.push_str("bin,upper_edge,num_gt,map");
    for c in 1..=num_classes {
        let _ = write!(s, ",ap_{c}");
    }
    s.push('\n');
    for b in bins {
        let _ = write!(s, "{},{},{},{}", b.name, opt(b.upper_edge), b.num_gt, opt(b.map));
        for ap in &b.per_class {
            let _ = write!(s, ",{}", opt(*ap));
        }
        s.push('\n');
    }
    s
}

pub fn fp_csv(records: &[FpRecord], image_ids: &[usize], digest: &str) -> String {
    let mut s = digest_line("#", digest);
    s.push_str("image_id,cls,score,cx,cy,w,h,category,best_iou,overlapped_object\n");
    for r in records {
        let d = &r.detection;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            image_ids.get(r.image).copied().unwrap_or(r.image),
            d.cls,
            d.score,
            d.bbox.cx,
            d.bbox.cy,
            d.bbox.w,
            d.bbox.h,
            r.category.name(),
            r.best_iou,
            r.overlapped_gt.map(|g| g.to_string()).unwrap_or_default()
        );
    }
    s
}

/// Precision/recall plot as a standalone SVG.
pub fn pr_svg(curve: &PrCurve, label: &str, digest: &str) -> String {
    let (w, h, m) = (320.0, 240.0, 30.0);
    let x = |r: f64| m + r * (w - 2.0 * m);
    let y = |p: f64| h - m - p * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<!-- config_digest={digest} -->\n"
    );
    let _ = writeln!(
        s,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        w - 2.0 * m,
        h - 2.0 * m
    );
    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|p| format!("{:.2},{:.2}", x(p.recall), y(p.precision)))
        .collect();
    if !pts.is_empty() {
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{}\"/>",
            pts.join(" ")
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">recall</text>", w / 2.0, h - 8.0);
    let _ = writeln!(s, "<text x=\"10\" y=\"{}\" font-size=\"11\" transform=\"rotate(-90 10 {})\" text-anchor=\"middle\">precision</text>", h / 2.0, h / 2.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"18\" font-size=\"12\" text-anchor=\"middle\">{label}</text>", w / 2.0);
    s.push_str("</svg>\n");
    s
}

pub fn write_report_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    write_text(&dir.join(name), contents)
}

pub fn class_name(cls: ClassId) -> String {
    crate::synthdata::CLASS_NAMES
        .get(cls.wrapping_sub(1))
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{cls}"))
}
