//! Synthetic shape datasets.
//!
//! Classification images hold a single shape (five shape kinds at two sizes);
//! segmentation scenes hold one to four overlapping shapes with per-pixel
//! labels. Both are drawn from the same colour and noise model so one backbone
//! serves both tasks.

use std::path::Path;

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::params::standard_normal;
use crate::pipeline::model::write_atomic;

/// Shape kinds. Segmentation label `k + 1` marks kind `k`; 0 is background.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Cross, Shape::Ring];

impl Shape {
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
            Shape::Cross => {
                let arm = (r / 3.0).max(0.75);
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
        }
    }
}

/// Images with one integer label each.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Images with one integer label per pixel (`labels` is `N*H*W`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationSet {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One minibatch: images plus one label per output position.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
}

/// Common access for both dataset kinds.
pub trait LabeledSet {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn images(&self) -> &Array4<f64>;
    fn labels(&self) -> &[usize];
    fn num_classes(&self) -> usize;
    /// Labels per image.
    fn labels_per_item(&self) -> usize;

    fn batch(&self, indices: &[usize]) -> Batch {
        let images = self.images().select(ndarray::Axis(0), indices);
        let per = self.labels_per_item();
        let labels = indices
            .iter()
            .flat_map(|&i| self.labels()[i * per..(i + 1) * per].iter().copied())
            .collect();
        Batch { images, labels }
    }

    /// Shuffled minibatches for one epoch; the order is a function of `seed` only.
    fn epoch_batches(&self, batch_size: usize, seed: u64) -> Vec<Batch> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// Sequential minibatches, unshuffled.
    fn sequential_batches(&self, batch_size: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }
}

impl LabeledSet for ClassificationSet {
    fn len(&self) -> usize {
        self.labels.len()
    }
    fn images(&self) -> &Array4<f64> {
        &self.images
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn labels_per_item(&self) -> usize {
        1
    }
}

impl LabeledSet for SegmentationSet {
    fn len(&self) -> usize {
        self.images.dim().0
    }
    fn images(&self) -> &Array4<f64> {
        &self.images
    }
    fn labels(&self) -> &[usize] {
        &self.labels
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn labels_per_item(&self) -> usize {
        let (_, _, h, w) = self.images.dim();
        h * w
    }
}

/// Train and validation splits for both tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDatasets {
    pub cls_train: ClassificationSet,
    pub cls_val: ClassificationSet,
    pub seg_train: SegmentationSet,
    pub seg_val: SegmentationSet,
    pub seed: u64,
}

impl SynthDatasets {
    /// SHA-256 over every image value and label of all four splits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |images: &Array4<f64>, labels: &[usize]| {
            for d in images.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in images.iter() {
                h.update(v.to_le_bytes());
            }
            for l in labels {
                h.update((*l as u64).to_le_bytes());
            }
        };
        feed(&self.cls_train.images, &self.cls_train.labels);
        feed(&self.cls_val.images, &self.cls_val.labels);
        feed(&self.seg_train.images, &self.seg_train.labels);
        feed(&self.seg_val.images, &self.seg_val.labels);
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> DataManifest {
        let shape = self.cls_train.images.shape();
        DataManifest {
            seed: self.seed,
            cls_train: self.cls_train.len(),
            cls_val: self.cls_val.len(),
            seg_train: self.seg_train.len(),
            seg_val: self.seg_val.len(),
            num_classes: self.cls_train.num_classes,
            seg_classes: self.seg_train.num_classes,
            channels: shape[1],
            image_size: shape[2],
            fingerprint: self.fingerprint(),
        }
    }
}

/// Description of a generated dataset; stages regenerate from the seed and
/// compare fingerprints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub cls_train: usize,
    pub cls_val: usize,
    pub seg_train: usize,
    pub seg_val: usize,
    pub num_classes: usize,
    pub seg_classes: usize,
    pub channels: usize,
    pub image_size: usize,
    pub fingerprint: String,
}

impl DataManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Binary PPM of image `n` (first three channels, values clamped to [-0.5, 0.5]).
pub fn image_ppm(images: &Array4<f64>, n: usize) -> Vec<u8> {
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h {
        for j in 0..w {
            for k in 0..3 {
                let v = images[[n, k.min(c - 1), i, j]].clamp(-0.5, 0.5) + 0.5;
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Binary PGM of a label map with labels spread over the grey range.
pub fn labels_pgm(labels: &[usize], size: usize, classes: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    let step = 255 / classes.saturating_sub(1).max(1);
    out.extend(labels.iter().map(|&l| (l * step).min(255) as u8));
    out
}

/// Writes the first `count` segmentation images with their masks, and the
/// first `count` classification images, into `dir`.
pub fn write_previews(data: &SynthDatasets, dir: &Path, count: usize) -> Result<Vec<std::path::PathBuf>> {
    let mut written = Vec::new();
    let seg = &data.seg_train;
    let size = seg.images.shape()[2];
    for n in 0..count.min(seg.len()) {
        let img = dir.join(format!("seg-{n:02}.ppm"));
        write_atomic(&img, &image_ppm(&seg.images, n))?;
        let hw = size * size;
        let mask = dir.join(format!("seg-{n:02}-mask.pgm"));
        write_atomic(&mask, &labels_pgm(&seg.labels[n * hw..(n + 1) * hw], size, seg.num_classes))?;
        written.extend([img, mask]);
    }
    let cls = &data.cls_train;
    for n in 0..count.min(cls.len()) {
        let img = dir.join(format!("cls-{n:02}-label{}.ppm", cls.labels[n]));
        write_atomic(&img, &image_ppm(&cls.images, n))?;
        written.push(img);
    }
    Ok(written)
}

struct Canvas {
    channels: usize,
    size: usize,
}

impl Canvas {
    /// Background colour plus pixel noise, written into image `n`.
    fn background(&self, img: &mut Array4<f64>, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let base: Vec<f64> = (0..self.channels).map(|_| rng.gen_range(0.0..0.4)).collect();
        for c in 0..self.channels {
            for i in 0..self.size {
                for j in 0..self.size {
                    img[[n, c, i, j]] = base[c] + 0.08 * standard_normal(rng) - 0.5;
                }
            }
        }
        base
    }

    fn shape_colour(&self, base: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        base.iter()
            .map(|b| {
                let delta = rng.gen_range(0.3..0.6);
                if *b + delta <= 1.0 && rng.gen_bool(0.75) {
                    b + delta
                } else {
                    (b - delta).max(-0.2)
                }
            })
            .collect()
    }

    /// Paints a shape and returns the covered pixel mask.
    #[allow(clippy::too_many_arguments)]
    fn paint(
        &self,
        img: &mut Array4<f64>,
        n: usize,
        shape: Shape,
        cx: f64,
        cy: f64,
        r: f64,
        colour: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Vec<bool> {
        let mut mask = vec![false; self.size * self.size];
        for i in 0..self.size {
            for j in 0..self.size {
                let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
                if shape.contains(x - cx, y - cy, r) {
                    mask[i * self.size + j] = true;
                    for (c, col) in colour.iter().enumerate() {
                        img[[n, c, i, j]] = col + 0.08 * standard_normal(rng) - 0.5;
                    }
                }
            }
        }
        mask
    }
}

fn split_rng(seed: u64, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt)
}

fn classification_set(
    n: usize,
    model: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> ClassificationSet {
    let canvas = Canvas {
        channels: model.in_channels,
        size: model.image_size,
    };
    let s = model.image_size as f64;
    let k = model.num_classes;
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    let mut images = Array4::zeros((n, model.in_channels, model.image_size, model.image_size));
    for (idx, &label) in labels.iter().enumerate() {
        let shape = SHAPES[label % SHAPES.len()];
        let large = (label / SHAPES.len()) % 2 == 1;
        let r = if large {
            rng.gen_range(0.28..0.38) * s
        } else {
            rng.gen_range(0.15..0.21) * s
        };
        let lo = r.min(s / 2.0);
        let hi = (s - r).max(lo + 1e-9);
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(lo..hi);
        let base = canvas.background(&mut images, idx, rng);
        let colour = canvas.shape_colour(&base, rng);
        canvas.paint(&mut images, idx, shape, cx, cy, r, &colour, rng);
    }
    ClassificationSet {
        images,
        labels,
        num_classes: k,
    }
}

fn segmentation_set(n: usize, model: &ModelConfig, rng: &mut ChaCha8Rng) -> SegmentationSet {
    let canvas = Canvas {
        channels: model.in_channels,
        size: model.image_size,
    };
    let s = model.image_size as f64;
    let kinds = model.seg_classes - 1;
    let hw = model.image_size * model.image_size;
    let mut images = Array4::zeros((n, model.in_channels, model.image_size, model.image_size));
    let mut labels = vec![0usize; n * hw];
    for idx in 0..n {
        let base = canvas.background(&mut images, idx, rng);
        let count = rng.gen_range(1..=4);
        for _ in 0..count {
            let kind = rng.gen_range(0..kinds);
            let r = rng.gen_range(0.15..0.34) * s;
            let cx = rng.gen_range(0.1 * s..0.9 * s);
            let cy = rng.gen_range(0.1 * s..0.9 * s);
            let colour = canvas.shape_colour(&base, rng);
            let mask = canvas.paint(&mut images, idx, SHAPES[kind % SHAPES.len()], cx, cy, r, &colour, rng);
            for (p, covered) in mask.iter().enumerate() {
                if *covered {
                    labels[idx * hw + p] = kind + 1;
                }
            }
        }
    }
    SegmentationSet {
        images,
        labels,
        num_classes: model.seg_classes,
    }
}

/// Deterministically generates all four splits from `seed`.
pub fn generate_datasets(seed: u64, sizes: &DataConfig, model: &ModelConfig) -> Result<SynthDatasets> {
    if sizes.cls_train == 0 || sizes.cls_val == 0 || sizes.seg_train == 0 || sizes.seg_val == 0 {
        return Err(Error::Config("dataset sizes must be positive".into()));
    }
    if model.num_classes > 2 * SHAPES.len() || model.num_classes < 2 {
        return Err(Error::Config(format!(
            "the generator supports 2..={} classification classes",
            2 * SHAPES.len()
        )));
    }
    if model.seg_classes < 2 || model.seg_classes > SHAPES.len() + 1 {
        return Err(Error::Config(format!(
            "the generator supports 2..={} segmentation classes",
            SHAPES.len() + 1
        )));
    }
    Ok(SynthDatasets {
        cls_train: classification_set(sizes.cls_train, model, &mut split_rng(seed, 1)),
        cls_val: classification_set(sizes.cls_val, model, &mut split_rng(seed, 2)),
        seg_train: segmentation_set(sizes.seg_train, model, &mut split_rng(seed, 3)),
        seg_val: segmentation_set(sizes.seg_val, model, &mut split_rng(seed, 4)),
        seed,
    })
}
