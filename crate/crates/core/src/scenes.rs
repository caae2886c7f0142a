//! Deterministic synthetic detection corpora and their COCO-style persistence.
//!
//! Every shape is placed on integer pixel coordinates and rasterized by
//! pixel-centre sampling, so the annotated box is exactly the rendered extent.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxops::BoxCxCyWH;
use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 6] = ["circle", "square", "triangle", "ring", "cross", "bar"];

/// Base colour per class; jitter perturbs each channel around it.
const CLASS_COLORS: [[f32; 3]; 6] = [
    [0.90, 0.20, 0.20],
    [0.20, 0.85, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.15],
    [0.85, 0.25, 0.85],
    [0.15, 0.85, 0.90],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_size: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub occlusion: bool,
    pub noise: f32,
    pub jitter: f32,
    pub min_object_px: usize,
    pub max_object_px: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            classes: 6,
            min_objects: 2,
            max_objects: 12,
            occlusion: true,
            noise: 0.06,
            jitter: 0.08,
            min_object_px: 6,
            max_object_px: 22,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("scene spec: {m}")));
        if self.image_size < 32 {
            return bad("image size must be at least 32");
        }
        if !(1 <= self.min_objects && self.min_objects <= self.max_objects && self.max_objects <= 20) {
            return bad("need 1 <= min_objects <= max_objects <= 20");
        }
        if self.classes < 2 || self.classes > CLASS_NAMES.len() {
            return bad("class count must be in 2..=6");
        }
        if self.min_object_px < 4 || self.min_object_px > self.max_object_px || self.max_object_px > self.image_size {
            return bad("object size range");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.jitter) {
            return bad("noise and jitter must be in [0, 1]");
        }
        Ok(())
    }
}

/// Square RGB image stored as 8-bit channels; `get` yields values in [0, 1].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneImage {
    pub id: u64,
    pub size: usize,
    pub data: Vec<u8>,
}

impl SceneImage {
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.size + x) * 3 + c] as f32 / 255.0
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f32; 3] {
        [self.get(x, y, 0), self.get(x, y, 1), self.get(x, y, 2)]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.size as u32, self.size as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Dataset(format!("{}: {e}", path.display()));
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&self.data).map_err(png_err)?;
        w.finish().map_err(png_err)
    }

    pub fn load_png(path: &Path, id: u64) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let dec_err = |e: png::DecodingError| Error::Dataset(format!("{}: {e}", path.display()));
        let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(dec_err)?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf).map_err(dec_err)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight || info.width != info.height {
            return Err(Error::Dataset(format!(
                "{}: expected square 8-bit RGB image",
                path.display()
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Self {
            id,
            size: info.width as usize,
            data: buf,
        })
    }
}

/// One annotation in COCO layout: `bbox` is `[x, y, w, h]` in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f32>,
}

impl Annotation {
    pub fn to_box(&self, image_size: usize) -> BoxCxCyWH {
        let s = image_size as f32;
        let [x, y, w, h] = self.bbox;
        BoxCxCyWH::new((x + 0.5 * w) / s, (y + 0.5 * h) / s, w / s, h / s)
    }

    pub fn pixel_bbox(b: BoxCxCyWH, image_size: usize) -> [f32; 4] {
        let s = image_size as f32;
        [(b.cx - 0.5 * b.w) * s, (b.cy - 0.5 * b.h) * s, b.w * s, b.h * s]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestInfo {
    pub dataset_id: String,
    pub split: String,
    pub seed: u64,
    pub image_size: usize,
    /// Directory holding the image files; relative paths resolve against
    /// the manifest's own directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub info: ManifestInfo,
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

/// Per-image ground truth in normalized coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub objects: Vec<(usize, BoxCxCyWH)>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for im in &self.images {
            if !ids.insert(im.id) {
                return Err(Error::Dataset(format!("duplicate image id {}", im.id)));
            }
        }
        let cats: HashSet<usize> = self.categories.iter().map(|c| c.id).collect();
        let s = self.info.image_size as f32;
        for a in &self.annotations {
            if !ids.contains(&a.image_id) {
                return Err(Error::Dataset(format!(
                    "annotation {} references missing image id {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Dataset(format!(
                    "annotation {} has unknown category {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            let tol = 1e-3;
            let ok = a.bbox.iter().all(|v| v.is_finite())
                && w > 0.0
                && h > 0.0
                && x >= -tol
                && y >= -tol
                && x + w <= s + tol
                && y + h <= s + tol;
            if !ok {
                return Err(Error::Dataset(format!(
                    "annotation {} has out-of-range box {:?} for {}px images",
                    a.id, a.bbox, self.info.image_size
                )));
            }
        }
        Ok(())
    }

    /// Ground truth (or pseudo-labels) grouped per image, in image order.
    /// Within an image, annotations keep their stored order.
    pub fn ground_truth(&self) -> Vec<GroundTruthSet> {
        let index: HashMap<u64, usize> = self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let mut out = vec![GroundTruthSet { objects: Vec::new() }; self.images.len()];
        for a in &self.annotations {
            if let Some(&i) = index.get(&a.image_id) {
                out[i].objects.push((a.category_id, a.to_box(self.info.image_size)));
            }
        }
        out
    }

    /// Annotation scores grouped per image (1.0 where absent).
    pub fn scores(&self) -> Vec<Vec<f32>> {
        let index: HashMap<u64, usize> = self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            if let Some(&i) = index.get(&a.image_id) {
                out[i].push(a.score.unwrap_or(1.0));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let bytes = serde_json::to_vec_pretty(self)?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Dataset(format!("{}: malformed manifest: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    fn image_dir(&self, manifest_path: &Path) -> PathBuf {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        match &self.info.image_root {
            Some(root) if root.is_absolute() => root.clone(),
            Some(root) => base.join(root),
            None => base.to_path_buf(),
        }
    }
}

/// A manifest together with its decoded images, index-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<SceneImage>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.manifest.info.image_size
    }

    /// Writes `manifest.json` and one PNG per image under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join("images");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (rec, img) in self.manifest.images.iter().zip(&self.images) {
            img.save_png(&dir.join(&rec.file_name))?;
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let dir = manifest.image_dir(manifest_path);
        let images = manifest
            .images
            .iter()
            .map(|rec| {
                let img = SceneImage::load_png(&dir.join(&rec.file_name), rec.id)?;
                if img.size != manifest.info.image_size {
                    return Err(Error::Dataset(format!(
                        "image {} is {}px, manifest says {}px",
                        rec.id, img.size, manifest.info.image_size
                    )));
                }
                Ok(img)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, images })
    }

    /// Same images with a different annotation set (e.g. pseudo-labels).
    pub fn with_annotations(&self, manifest: DatasetManifest) -> Result<Self> {
        let same = manifest.images.len() == self.manifest.images.len()
            && manifest.images.iter().zip(&self.manifest.images).all(|(a, b)| a.id == b.id);
        if !same {
            return Err(Error::Dataset("annotation manifest does not match corpus images".into()));
        }
        Ok(Self {
            manifest,
            images: self.images.clone(),
        })
    }

    pub fn subsample(&self, fraction: f64, seed: u64) -> Result<Self> {
        let manifest = subsample_dataset(&self.manifest, fraction, seed)?;
        let keep: HashSet<u64> = manifest.images.iter().map(|r| r.id).collect();
        let images = self.images.iter().filter(|im| keep.contains(&im.id)).cloned().collect();
        Ok(Self { manifest, images })
    }
}

/// SplitMix64 finalizer; derives independent per-item seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A shape placed on integer pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub class: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PlacedShape {
    /// Pixel-centre membership test.
    pub fn contains(&self, px: usize, py: usize) -> bool {
        if px < self.x0 || py < self.y0 || px >= self.x0 + self.w || py >= self.y0 + self.h {
            return false;
        }
        let u = (px - self.x0) as f32 + 0.5;
        let v = (py - self.y0) as f32 + 0.5;
        let (w, h) = (self.w as f32, self.h as f32);
        match CLASS_NAMES[self.class] {
            "circle" | "ring" => {
                let r = 0.5 * w;
                let d2 = (u - r).powi(2) + (v - r).powi(2);
                let inner = if self.class == 3 { 0.25 * r * r } else { -1.0 };
                d2 <= r * r && d2 > inner
            }
            // right isosceles, legs on the left and bottom edges
            "triangle" => u <= v,
            "cross" => {
                let t = w / 3.0;
                (u > t && u < 2.0 * t) || (v > h / 3.0 && v < 2.0 * h / 3.0)
            }
            _ => true,
        }
    }

    pub fn pixel_bbox(&self) -> [f32; 4] {
        [self.x0 as f32, self.y0 as f32, self.w as f32, self.h as f32]
    }
}

fn shape_dims(class: usize, side: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    match CLASS_NAMES[class] {
        "circle" | "ring" => {
            let s = side - side % 2;
            (s, s)
        }
        "cross" => {
            let t = ((side as f32 / 3.0).round() as usize).max(2);
            (3 * t, 3 * t)
        }
        "bar" => {
            let short = (side / 3).max(2);
            if rng.gen_bool(0.5) {
                (side, short)
            } else {
                (short, side)
            }
        }
        _ => (side, side),
    }
}

fn overlap_fraction(a: &PlacedShape, b: &PlacedShape) -> f32 {
    let ix = (a.x0 + a.w).min(b.x0 + b.w) as i64 - a.x0.max(b.x0) as i64;
    let iy = (a.y0 + a.h).min(b.y0 + b.h) as i64 - a.y0.max(b.y0) as i64;
    if ix <= 0 || iy <= 0 {
        return 0.0;
    }
    let inter = (ix * iy) as f32;
    inter / ((a.w * a.h).min(b.w * b.h) as f32)
}

/// Renders one scene; returns the image and its placed shapes in paint order.
pub fn render_scene(spec: &SceneSpec, seed: u64, id: u64) -> (SceneImage, Vec<PlacedShape>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.image_size;
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.gen_range(0..spec.classes);
        let side = rng.gen_range(spec.min_object_px..=spec.max_object_px);
        let (w, h) = shape_dims(class, side, &mut rng);
        let (w, h) = (w.min(n), h.min(n));
        let mut placed = None;
        for _ in 0..100 {
            let cand = PlacedShape {
                class,
                x0: rng.gen_range(0..=n - w),
                y0: rng.gen_range(0..=n - h),
                w,
                h,
            };
            let limit = if spec.occlusion { 0.5 } else { 0.0 };
            if shapes.iter().all(|s| overlap_fraction(s, &cand) <= limit) {
                placed = Some(cand);
                break;
            }
            placed.get_or_insert(cand);
        }
        shapes.push(placed.expect("at least one candidate"));
    }

    let mut px = vec![0f32; n * n * 3];
    let bg: f32 = rng.gen_range(0.15..0.45);
    let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    for p in px.chunks_mut(3) {
        for c in 0..3 {
            let noise = if spec.noise > 0.0 { rng.gen_range(-spec.noise..spec.noise) } else { 0.0 };
            p[c] = bg + tint[c] + noise;
        }
    }
    for s in &shapes {
        let base = CLASS_COLORS[s.class];
        let color: Vec<f32> = base
            .iter()
            .map(|&b| if spec.jitter > 0.0 { b + rng.gen_range(-spec.jitter..spec.jitter) } else { b })
            .collect();
        for y in s.y0..s.y0 + s.h {
            for x in s.x0..s.x0 + s.w {
                if s.contains(x, y) {
                    px[(y * n + x) * 3..(y * n + x) * 3 + 3].copy_from_slice(&color);
                }
            }
        }
    }
    let data = px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    (SceneImage { id, size: n, data }, shapes)
}

/// Builds a corpus in memory; image `i` depends only on `(seed, i)`.
pub fn generate(spec: &SceneSpec, count: usize, seed: u64, dataset_id: &str, split: &str) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Invalid("dataset needs at least one image".into()));
    }
    let mut images = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    let mut annotations = Vec::new();
    for i in 0..count {
        let id = i as u64;
        let (img, shapes) = render_scene(spec, mix_seed(seed, id), id);
        records.push(ImageRecord {
            id,
            file_name: format!("images/{id:06}.png"),
            width: spec.image_size,
            height: spec.image_size,
        });
        for s in shapes {
            annotations.push(Annotation {
                id: annotations.len() as u64,
                image_id: id,
                category_id: s.class,
                bbox: s.pixel_bbox(),
                score: None,
            });
        }
        images.push(img);
    }
    let manifest = DatasetManifest {
        info: ManifestInfo {
            dataset_id: dataset_id.to_string(),
            split: split.to_string(),
            seed,
            image_size: spec.image_size,
            image_root: None,
            scene: Some(spec.clone()),
        },
        images: records,
        annotations,
        categories: category_table(spec.classes),
    };
    Ok(Dataset { manifest, images })
}

pub fn category_table(classes: usize) -> Vec<Category> {
    CLASS_NAMES[..classes]
        .iter()
        .enumerate()
        .map(|(id, n)| Category {
            id,
            name: n.to_string(),
        })
        .collect()
}

/// Generates a corpus and writes it under `dir`.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    let split = dir.file_name().and_then(|s| s.to_str()).unwrap_or("data");
    let ds = generate(spec, count, seed, split, split)?;
    ds.save(dir)?;
    Ok(ds)
}

/// Keeps `⌊fraction·N⌋` images chosen by a seeded shuffle, in original order.
pub fn subsample_dataset(manifest: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = manifest.images.len();
    let keep_n = (fraction * n as f64).floor() as usize;
    if keep_n == 0 {
        return Err(Error::Invalid(format!("fraction {fraction} of {n} images keeps nothing")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if keep_n < n {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut chosen: Vec<usize> = order[..keep_n].to_vec();
    chosen.sort_unstable();
    let images: Vec<ImageRecord> = chosen.iter().map(|&i| manifest.images[i].clone()).collect();
    let ids: HashSet<u64> = images.iter().map(|r| r.id).collect();
    let mut out = manifest.clone();
    out.annotations.retain(|a| ids.contains(&a.image_id));
    out.images = images;
    Ok(out)
}
