//! Deterministic synthetic scenes (discs, squares and triangles on a
//! cluttered background) and an annotation-noise model that adds spurious
//! background boxes, deletes true annotations and flips classes.
//!
//! Every image draws from its own generator seeded with
//! `derive_seed(seed, "scene", image_id)`; noise for an image draws from
//! `derive_seed(noise.seed, "noise", image_id)`. See [`crate::config::derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::geometry::{iou, Box, ClassId, GroundTruthObject};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["disc", "square", "triangle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object side as a fraction of the image size.
    pub size_min: f64,
    pub size_max: f64,
    /// Amplitude of the smooth background clutter.
    pub texture: f64,
    /// Standard deviation of per-pixel sensor noise.
    pub pixel_noise: f64,
    /// Intensity gap between objects and the local background.
    pub contrast: f64,
    pub blur_sigma: f64,
    pub brightness_jitter: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            num_classes: 3,
            objects_min: 1,
            objects_max: 3,
            size_min: 0.18,
            size_max: 0.34,
            texture: 0.25,
            pixel_noise: 0.03,
            contrast: 0.35,
            blur_sigma: 0.6,
            brightness_jitter: 0.1,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::config("image_size must be >= 8"));
        }
        if self.num_classes == 0 || self.num_classes > CLASS_NAMES.len() {
            return Err(Error::config(format!(
                "num_classes must be in 1..={}",
                CLASS_NAMES.len()
            )));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min exceeds objects_max"));
        }
        if !(self.size_min > 0.0 && self.size_min <= self.size_max && self.size_max < 1.0) {
            return Err(Error::config("object sizes must satisfy 0 < size_min <= size_max < 1"));
        }
        for (name, v) in [
            ("texture", self.texture),
            ("pixel_noise", self.pixel_noise),
            ("contrast", self.contrast),
            ("blur_sigma", self.blur_sigma),
            ("brightness_jitter", self.brightness_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub spurious_rate: f64,
    pub drop_rate: f64,
    pub flip_rate: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            spurious_rate: 0.2,
            drop_rate: 0.1,
            flip_rate: 0.05,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn clean() -> Self {
        NoiseModel {
            spurious_rate: 0.0,
            drop_rate: 0.0,
            flip_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("spurious_rate", self.spurious_rate),
            ("drop_rate", self.drop_rate),
            ("flip_rate", self.flip_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {r}")));
            }
        }
        Ok(())
    }
}

/// An 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub id: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    /// `[1, h, w]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            &[1, self.height, self.width],
            self.pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        )
        .expect("pixel count matches dimensions")
    }
}

/// Images with one annotation list per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub annotations: Vec<Vec<GroundTruthObject>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_objects(&self) -> usize {
        self.annotations.iter().map(Vec::len).sum()
    }

    pub fn with_annotations(&self, annotations: Vec<Vec<GroundTruthObject>>) -> Dataset {
        Dataset {
            images: self.images.clone(),
            annotations,
        }
    }
}

fn inside_shape(cls: ClassId, b: &Box, x: f64, y: f64) -> bool {
    let (u, v) = ((x - b.cx) / (0.5 * b.w), (y - b.cy) / (0.5 * b.h));
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    match cls {
        1 => u * u + v * v <= 1.0,
        2 => true,
        // apex at the top centre, base along the bottom edge
        _ => u.abs() <= (v + 1.0) / 2.0,
    }
}

fn gaussian_blur(img: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let n = size as isize;
    let mut tmp = vec![0.0; img.len()];
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let xx = (x + k as isize - radius).clamp(0, n - 1);
                acc += t * img[(y * n + xx) as usize];
            }
            tmp[(y * n + x) as usize] = acc;
        }
    }
    for y in 0..n {
        for x in 0..n {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                let yy = (y + k as isize - radius).clamp(0, n - 1);
                acc += t * tmp[(yy * n + x) as usize];
            }
            img[(y * n + x) as usize] = acc;
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Samples a square box of object size fully inside the image.
fn sample_box(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Box {
    let s = spec.image_size as f64;
    let side = rng.gen_range(spec.size_min..=spec.size_max) * s;
    let cx = rng.gen_range(0.5 * side..=s - 0.5 * side);
    let cy = rng.gen_range(0.5 * side..=s - 0.5 * side);
    Box {
        cx,
        cy,
        w: side,
        h: side,
    }
}

/// Renders one scene. Objects never overlap each other.
fn render_scene(spec: &SceneSpec, image_id: usize, seed: u64) -> (Image, Vec<(ClassId, Box)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "scene", image_id as u64));
    let n = spec.image_size;
    let nf = n as f64;
    let base = 0.35 + spec.brightness_jitter * rng.gen_range(-1.0..1.0);
    let mut img = vec![base; n * n];

    // smooth clutter: a handful of random gaussian blobs of either sign
    let blobs = rng.gen_range(4..=8);
    for _ in 0..blobs {
        let (bx, by) = (rng.gen_range(0.0..nf), rng.gen_range(0.0..nf));
        let r = rng.gen_range(0.04..0.15) * nf;
        let amp = spec.texture * rng.gen_range(-1.0..1.0);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 + 0.5 - bx).powi(2) + (y as f64 + 0.5 - by).powi(2);
                img[y * n + x] += amp * (-d2 / (2.0 * r * r)).exp();
            }
        }
    }

    let count = if spec.objects_max == 0 {
        0
    } else {
        rng.gen_range(spec.objects_min..=spec.objects_max)
    };
    let mut objects: Vec<(ClassId, Box)> = Vec::new();
    let mut attempts = 0;
    while objects.len() < count && attempts < 200 {
        attempts += 1;
        let b = sample_box(spec, &mut rng);
        // keep a one-pixel gap between objects
        let grown = Box {
            w: b.w + 2.0,
            h: b.h + 2.0,
            ..b
        };
        if objects.iter().any(|(_, o)| iou(&grown, o) > 0.0) {
            continue;
        }
        let cls = rng.gen_range(1..=spec.num_classes);
        objects.push((cls, b));
    }

    for &(cls, b) in &objects {
        let sign = if rng.gen_bool(0.75) { 1.0 } else { -1.0 };
        let level = sign * spec.contrast * rng.gen_range(0.8..1.2);
        let (x0, x1) = (b.x0().floor().max(0.0) as usize, (b.x1().ceil() as usize).min(n));
        let (y0, y1) = (b.y0().floor().max(0.0) as usize, (b.y1().ceil() as usize).min(n));
        for y in y0..y1 {
            for x in x0..x1 {
                // 3x3 supersampled coverage
                let mut cover = 0.0;
                for sy in 0..3 {
                    for sx in 0..3 {
                        let px = x as f64 + (sx as f64 + 0.5) / 3.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 3.0;
                        if inside_shape(cls, &b, px, py) {
                            cover += 1.0 / 9.0;
                        }
                    }
                }
                img[y * n + x] += cover * level;
            }
        }
    }

    gaussian_blur(&mut img, n, spec.blur_sigma);
    let pixels = img
        .iter()
        .map(|&v| {
            let v = v + spec.pixel_noise * standard_normal(&mut rng);
            (v.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    (
        Image {
            id: image_id,
            width: n,
            height: n,
            pixels,
        },
        objects,
    )
}

/// Generates `count` images with ids starting at `first_image_id`; object
/// indices are assigned sequentially from `first_object_index`.
pub fn generate_dataset(
    spec: &SceneSpec,
    count: usize,
    seed: u64,
    first_image_id: usize,
    first_object_index: usize,
) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::config("dataset size must be >= 1"));
    }
    let mut next = first_object_index;
    let mut images = Vec::with_capacity(count);
    let mut annotations = Vec::with_capacity(count);
    for k in 0..count {
        let (img, objs) = render_scene(spec, first_image_id + k, seed);
        let anns = objs
            .into_iter()
            .map(|(cls, bbox)| {
                let g = GroundTruthObject {
                    cls,
                    bbox,
                    object_index: next,
                };
                next += 1;
                g
            })
            .collect();
        images.push(img);
        annotations.push(anns);
    }
    Ok(Dataset {
        images,
        annotations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Corruption {
    /// A background box labelled as an object was added.
    Spurious { image_id: usize, object: GroundTruthObject },
    /// A true object lost its annotation.
    Dropped { image_id: usize, object: GroundTruthObject },
    /// A true object's class was replaced.
    Flipped {
        image_id: usize,
        object_index: usize,
        original_cls: ClassId,
        noisy_cls: ClassId,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseLedger {
    pub entries: Vec<Corruption>,
}

impl NoiseLedger {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, pred: impl Fn(&Corruption) -> bool) -> usize {
        self.entries.iter().filter(|c| pred(c)).count()
    }

    /// Object indices of the spurious annotations.
    pub fn spurious_indices(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter_map(|c| match c {
                Corruption::Spurious { object, .. } => Some(object.object_index),
                _ => None,
            })
            .collect()
    }
}

/// Applies drop, flip and spurious corruption in that order, independently
/// per object (drop, flip) or per image (spurious). New spurious objects get
/// indices from `next_object_index` upwards.
pub fn inject_noise(
    data: &Dataset,
    spec: &SceneSpec,
    model: &NoiseModel,
    next_object_index: usize,
) -> Result<(Vec<Vec<GroundTruthObject>>, NoiseLedger)> {
    model.validate()?;
    let mut ledger = NoiseLedger::default();
    let mut next = next_object_index;
    let mut out = Vec::with_capacity(data.len());
    for (img, anns) in data.images.iter().zip(&data.annotations) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.seed, "noise", img.id as u64));
        let mut kept = Vec::with_capacity(anns.len() + 1);
        for g in anns {
            if rng.gen_bool(model.drop_rate) {
                ledger.entries.push(Corruption::Dropped {
                    image_id: img.id,
                    object: *g,
                });
                continue;
            }
            let mut g = *g;
            if spec.num_classes > 1 && rng.gen_bool(model.flip_rate) {
                let mut c = rng.gen_range(1..spec.num_classes);
                if c >= g.cls {
                    c += 1;
                }
                ledger.entries.push(Corruption::Flipped {
                    image_id: img.id,
                    object_index: g.object_index,
                    original_cls: g.cls,
                    noisy_cls: c,
                });
                g.cls = c;
            }
            kept.push(g);
        }
        if rng.gen_bool(model.spurious_rate) {
            let mut placed = None;
            for _ in 0..500 {
                let b = sample_box(spec, &mut rng);
                if anns.iter().all(|g| iou(&b, &g.bbox) <= 0.3) {
                    placed = Some(b);
                    break;
                }
            }
            // fall back to the box with the least overlap seen in a fixed sweep
            let b = placed.unwrap_or_else(|| least_overlapping_box(spec, anns));
            let g = GroundTruthObject {
                cls: rng.gen_range(1..=spec.num_classes),
                bbox: b,
                object_index: next,
            };
            next += 1;
            ledger.entries.push(Corruption::Spurious {
                image_id: img.id,
                object: g,
            });
            kept.push(g);
        }
        out.push(kept);
    }
    Ok((out, ledger))
}

fn least_overlapping_box(spec: &SceneSpec, anns: &[GroundTruthObject]) -> Box {
    let s = spec.image_size as f64;
    let side = spec.size_min * s;
    let mut best = (f64::INFINITY, Box { cx: 0.5 * side, cy: 0.5 * side, w: side, h: side });
    let steps = 16;
    for i in 0..=steps {
        for j in 0..=steps {
            let b = Box {
                cx: 0.5 * side + (s - side) * i as f64 / steps as f64,
                cy: 0.5 * side + (s - side) * j as f64 / steps as f64,
                w: side,
                h: side,
            };
            let worst = anns.iter().map(|g| iou(&b, &g.bbox)).fold(0.0, f64::max);
            if worst < best.0 {
                best = (worst, b);
            }
        }
    }
    best.1
}

/// Undoes every ledger entry, recovering the clean annotation lists.
pub fn restore_clean(
    data: &Dataset,
    noisy: &[Vec<GroundTruthObject>],
    ledger: &NoiseLedger,
) -> Vec<Vec<GroundTruthObject>> {
    let pos: std::collections::HashMap<usize, usize> =
        data.images.iter().enumerate().map(|(i, img)| (img.id, i)).collect();
    let mut out: Vec<Vec<GroundTruthObject>> = noisy.to_vec();
    for e in &ledger.entries {
        match e {
            Corruption::Spurious { image_id, object } => {
                if let Some(&i) = pos.get(image_id) {
                    out[i].retain(|g| g.object_index != object.object_index);
                }
            }
            Corruption::Dropped { image_id, object } => {
                if let Some(&i) = pos.get(image_id) {
                    out[i].push(*object);
                }
            }
            Corruption::Flipped {
                image_id,
                object_index,
                original_cls,
                ..
            } => {
                if let Some(&i) = pos.get(image_id) {
                    for g in out[i].iter_mut().filter(|g| g.object_index == *object_index) {
                        g.cls = *original_cls;
                    }
                }
            }
        }
    }
    for anns in &mut out {
        anns.sort_by_key(|g| g.object_index);
    }
    out
}

/// Train, validation and test sets. Noise is injected into the training
/// annotations only; the clean training labels stay recoverable via the
/// ledger.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub train_clean: Vec<Vec<GroundTruthObject>>,
    pub val: Dataset,
    pub test: Dataset,
    pub ledger: NoiseLedger,
}

pub fn generate_splits(
    spec: &SceneSpec,
    noise: &NoiseModel,
    counts: [usize; 3],
    seed: u64,
) -> Result<Splits> {
    noise.validate()?;
    let clean_train = generate_dataset(spec, counts[0], seed, 0, 0)?;
    let mut next = clean_train.num_objects();
    let val = generate_dataset(spec, counts[1], seed, counts[0], next)?;
    next += val.num_objects();
    let test = generate_dataset(spec, counts[2], seed, counts[0] + counts[1], next)?;
    next += test.num_objects();
    let (noisy, ledger) = inject_noise(&clean_train, spec, noise, next)?;
    Ok(Splits {
        train_clean: clean_train.annotations.clone(),
        train: clean_train.with_annotations(noisy),
        val,
        test,
        ledger,
    })
}
