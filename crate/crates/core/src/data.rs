//! Procedural source/target shape datasets, their on-disk format, loading
//! and batch composition.
//!
//! Layout of a dataset root:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/images/NNNNNN.png
//! <root>/<split>/annotations.jsonl
//! ```
//!
//! Target images reach the trainer as [`UnlabeledImage`], which carries no
//! annotation fields; the unlabeled loader never opens `annotations.jsonl`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::boxops::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::par::{self, Exec};

pub const FORMAT_VERSION: u32 = 1;
pub const SOURCE_SPLIT: &str = "source";
pub const TARGET_TRAIN_SPLIT: &str = "target_train";
pub const TARGET_TEST_SPLIT: &str = "target_test";

/// Minimum object area as a fraction of the image.
pub const MIN_OBJECT_AREA: f64 = 0.005;

/// Object classes; ids 1..=3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Disc = 1,
    Square = 2,
    Triangle = 3,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 3] = [ShapeClass::Disc, ShapeClass::Square, ShapeClass::Triangle];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(id: usize) -> &'static str {
        match id {
            1 => "disc",
            2 => "square",
            3 => "triangle",
            _ => "background",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Hatched,
}

/// Rendering style of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Background base brightness range, 0..1.
    pub background: (f64, f64),
    /// Object fill brightness range, 0..1.
    pub foreground: (f64, f64),
    /// Saturation of object colors, 0..1.
    pub saturation: f64,
    /// Hue rotation applied to object colors, in turns.
    pub hue_shift: f64,
    pub texture: Texture,
    /// Outline width in pixels, 0 for none.
    pub outline: usize,
    /// Expected number of clutter strokes per image.
    pub clutter: f64,
    /// Std of additive Gaussian pixel noise, in 0..1 units.
    pub noise: f64,
}

impl DomainStyle {
    pub fn source_default() -> Self {
        DomainStyle {
            background: (0.05, 0.3),
            foreground: (0.6, 1.0),
            saturation: 0.8,
            hue_shift: 0.0,
            texture: Texture::Flat,
            outline: 0,
            clutter: 1.0,
            noise: 0.02,
        }
    }

    pub fn target_default() -> Self {
        DomainStyle {
            texture: Texture::Hatched,
            outline: 1,
            clutter: 4.0,
            noise: 0.05,
            ..DomainStyle::source_default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShiftConfig {
    pub source: DomainStyle,
    pub target: DomainStyle,
}

impl Default for DomainShiftConfig {
    fn default() -> Self {
        DomainShiftConfig {
            source: DomainStyle::source_default(),
            target: DomainStyle::target_default(),
        }
    }
}

impl DomainShiftConfig {
    /// Both domains rendered with the source style.
    pub fn zero_shift() -> Self {
        DomainShiftConfig {
            source: DomainStyle::source_default(),
            target: DomainStyle::source_default(),
        }
    }

    pub fn is_shifted(&self) -> bool {
        self.source != self.target
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitCounts {
    pub source: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            source: 500,
            target_train: 200,
            target_test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: u64,
    pub image_size: usize,
    pub counts: SplitCounts,
    pub shift: DomainShiftConfig,
    /// Objects per image.
    pub objects: (usize, usize),
    /// Object side length range as a fraction of the image.
    pub object_size: (f64, f64),
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 7,
            image_size: 64,
            counts: SplitCounts::default(),
            shift: DomainShiftConfig::default(),
            objects: (1, 4),
            object_size: (0.14, 0.42),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub image_size: usize,
    pub num_classes: usize,
    pub counts: SplitCounts,
    pub shift: DomainShiftConfig,
    pub objects: (usize, usize),
    pub object_size: (f64, f64),
}

/// One object placed in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: ShapeClass,
    pub bbox: BBox,
}

/// Everything needed to render one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub objects: Vec<SceneObject>,
    pub render_seed: u64,
}

/// Annotation record, one JSON line per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub objects: Vec<AnnotatedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    pub class_id: usize,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

fn mix(mut x: u64) -> u64 {
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for one image, derived from the dataset seed, split and index.
pub fn image_seed(seed: u64, split: &str, index: usize) -> u64 {
    let split_tag = split.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    mix(mix(seed ^ split_tag).wrapping_add(index as u64))
}

/// Sample object placements for one image.
pub fn sample_scene(cfg: &GenerateConfig, rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.gen_range(cfg.objects.0..=cfg.objects.1.max(cfg.objects.0));
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    let mut attempts = 0;
    while objects.len() < n && attempts < 200 {
        attempts += 1;
        let side = rng.gen_range(cfg.object_size.0..cfg.object_size.1);
        let aspect: f64 = rng.gen_range(0.8..1.25);
        let w = (side * aspect.sqrt()).min(0.95);
        let h = (side / aspect.sqrt()).min(0.95);
        let x = rng.gen_range(0.01..(0.99 - w));
        let y = rng.gen_range(0.01..(0.99 - h));
        let bbox = BBox {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
        };
        if bbox.area() < MIN_OBJECT_AREA || objects.iter().any(|o| o.bbox.iou(&bbox) > 0.05) {
            continue;
        }
        let class = *ShapeClass::ALL.choose(rng).unwrap();
        objects.push(SceneObject { class, bbox });
    }
    if objects.is_empty() {
        // guaranteed placement on an empty canvas
        objects.push(SceneObject {
            class: ShapeClass::Square,
            bbox: BBox {
                x_min: 0.3,
                y_min: 0.3,
                x_max: 0.6,
                y_max: 0.6,
            },
        });
    }
    SceneSpec {
        image_size: cfg.image_size,
        objects,
        render_seed: rng.gen(),
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Inside test in pixel units, with the shape shrunk by `inset` pixels.
fn inside(class: ShapeClass, b: &BBox, size: f64, px: f64, py: f64, inset: f64) -> bool {
    let x0 = b.x_min * size + inset;
    let x1 = b.x_max * size - inset;
    let y0 = b.y_min * size + inset;
    let y1 = b.y_max * size - inset;
    if x1 <= x0 || y1 <= y0 {
        return false;
    }
    match class {
        ShapeClass::Square => px >= x0 && px < x1 && py >= y0 && py < y1,
        ShapeClass::Disc => {
            let cx = 0.5 * (x0 + x1);
            let cy = 0.5 * (y0 + y1);
            let rx = 0.5 * (x1 - x0);
            let ry = 0.5 * (y1 - y0);
            let dx = (px - cx) / rx;
            let dy = (py - cy) / ry;
            dx * dx + dy * dy <= 1.0
        }
        ShapeClass::Triangle => {
            // apex at top center, base along the bottom edge
            if py < y0 || py >= y1 {
                return false;
            }
            let frac = (py - y0) / (y1 - y0);
            let half = 0.5 * (x1 - x0) * frac;
            let cx = 0.5 * (x0 + x1);
            px >= cx - half && px <= cx + half
        }
    }
}

/// Render a scene in the given style. Deterministic in `(spec, style)`.
pub fn render(spec: &SceneSpec, style: &DomainStyle) -> RgbImage {
    let size = spec.image_size;
    let sz = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.render_seed);
    let mut img = vec![[0.0f64; 3]; size * size];

    // background: vertical gradient around a random tint
    let base = rng.gen_range(style.background.0..style.background.1);
    let tint_h: f64 = rng.gen();
    let tint = hsv_to_rgb(tint_h, 0.25, 1.0);
    let slope = rng.gen_range(-0.15..0.15);
    for y in 0..size {
        let v = (base + slope * (y as f64 / sz - 0.5)).clamp(0.0, 1.0);
        for x in 0..size {
            img[y * size + x] = [v * tint[0], v * tint[1], v * tint[2]];
        }
    }

    // clutter strokes: lines, crosses and small rings
    let normal = Normal::new(style.clutter, style.clutter.sqrt().max(1e-9)).unwrap();
    let strokes = normal.sample(&mut rng).round().max(0.0) as usize;
    for _ in 0..strokes {
        let v = rng.gen_range(style.foreground.0..style.foreground.1);
        let col = hsv_to_rgb(rng.gen(), style.saturation * 0.6, v);
        let kind = rng.gen_range(0..3);
        let cx = rng.gen_range(0.0..sz);
        let cy = rng.gen_range(0.0..sz);
        let len = rng.gen_range(0.1..0.35) * sz;
        match kind {
            0 | 1 => {
                let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let arms = if kind == 0 { 1 } else { 2 };
                for a in 0..arms {
                    let th = ang + a as f64 * std::f64::consts::FRAC_PI_2;
                    let steps = (len * 2.0) as usize;
                    for s in 0..=steps {
                        let t = s as f64 / steps.max(1) as f64 - 0.5;
                        let px = (cx + t * len * th.cos()).round() as isize;
                        let py = (cy + t * len * th.sin()).round() as isize;
                        if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                            img[py as usize * size + px as usize] = col;
                        }
                    }
                }
            }
            _ => {
                let r = len * 0.3;
                for y in 0..size {
                    for x in 0..size {
                        let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                        if (d - r).abs() < 0.6 {
                            img[y * size + x] = col;
                        }
                    }
                }
            }
        }
    }

    // objects
    for obj in &spec.objects {
        let v = rng.gen_range(style.foreground.0..style.foreground.1);
        let hue = rng.gen::<f64>() + style.hue_shift;
        let fill = hsv_to_rgb(hue, style.saturation, v);
        let alt = hsv_to_rgb(hue, style.saturation, (v * 0.45).min(1.0));
        let edge = if base > 0.5 { [0.05, 0.05, 0.05] } else { [0.95, 0.95, 0.95] };
        let period = rng.gen_range(3..6) as isize;
        let b = &obj.bbox;
        let (xa, xb) = ((b.x_min * sz).floor() as usize, ((b.x_max * sz).ceil() as usize).min(size));
        let (ya, yb) = ((b.y_min * sz).floor() as usize, ((b.y_max * sz).ceil() as usize).min(size));
        for y in ya..yb {
            for x in xa..xb {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if !inside(obj.class, b, sz, px, py, 0.0) {
                    continue;
                }
                let on_edge = style.outline > 0 && !inside(obj.class, b, sz, px, py, style.outline as f64);
                img[y * size + x] = if on_edge {
                    edge
                } else {
                    match style.texture {
                        Texture::Flat => fill,
                        Texture::Hatched => {
                            if ((x as isize + y as isize) / period) % 2 == 0 {
                                fill
                            } else {
                                alt
                            }
                        }
                    }
                };
            }
        }
    }

    let noise = Normal::new(0.0, style.noise.max(1e-12)).unwrap();
    let mut out = RgbImage::new(size as u32, size as u32);
    for (i, px) in img.iter().enumerate() {
        let mut c = [0u8; 3];
        for k in 0..3 {
            let v = if style.noise > 0.0 { px[k] + noise.sample(&mut rng) } else { px[k] };
            c[k] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        out.put_pixel((i % size) as u32, (i / size) as u32, Rgb(c));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Render all three splits to disk under `root`.
pub fn generate_domain_pair(root: &Path, cfg: &GenerateConfig, exec: Exec) -> Result<Manifest> {
    let c = cfg.counts;
    if c.source == 0 || c.target_train == 0 || c.target_test == 0 {
        return Err(Error::InvalidConfig("every split needs at least one image".into()));
    }
    let splits = [
        (SOURCE_SPLIT, c.source, &cfg.shift.source),
        (TARGET_TRAIN_SPLIT, c.target_train, &cfg.shift.target),
        (TARGET_TEST_SPLIT, c.target_test, &cfg.shift.target),
    ];
    for (split, count, style) in splits {
        let dir = root.join(split).join("images");
        create_dir(&dir)?;
        let records: Vec<AnnotationRecord> = par::map_range(exec, count, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(image_seed(cfg.seed, split, i));
            let spec = sample_scene(cfg, &mut rng);
            let img = render(&spec, style);
            let file = format!("{i:06}.png");
            img.save(dir.join(&file))?;
            Ok(AnnotationRecord {
                file,
                width: cfg.image_size,
                height: cfg.image_size,
                objects: spec
                    .objects
                    .iter()
                    .map(|o| AnnotatedObject {
                        class_id: o.class.id(),
                        x_min: o.bbox.x_min,
                        y_min: o.bbox.y_min,
                        x_max: o.bbox.x_max,
                        y_max: o.bbox.y_max,
                    })
                    .collect(),
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let mut lines = Vec::new();
        for r in &records {
            serde_json::to_writer(&mut lines, r)?;
            lines.push(b'\n');
        }
        write_file(&root.join(split).join("annotations.jsonl"), &lines)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        image_size: cfg.image_size,
        num_classes: ShapeClass::ALL.len(),
        counts: c,
        shift: cfg.shift.clone(),
        objects: cfg.objects,
        object_size: cfg.object_size,
    };
    write_file(&root.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported format version {}", m.format_version)));
    }
    Ok(m)
}

/// CHW tensor in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = vec![0.0; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            t[c * w * h + y as usize * w + x as usize] = p.0[c] as f64 / 127.5 - 1.0;
        }
    }
    t
}

fn load_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Vec<f64>,
    pub objects: Vec<GroundTruth>,
}

/// Trainer-facing target image: pixels only.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledImage {
    pub id: String,
    pub pixels: Vec<f64>,
}

pub fn read_annotations(root: &Path, split: &str) -> Result<Vec<AnnotationRecord>> {
    let path = root.join(split).join("annotations.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Load a split with its labels. Degenerate or out-of-range boxes are rejected.
pub fn load_labeled(root: &Path, split: &str, exec: Exec) -> Result<Vec<LabeledImage>> {
    let records = read_annotations(root, split)?;
    let dir = root.join(split).join("images");
    par::map(exec, &records, |_, r| {
        let mut objects = Vec::with_capacity(r.objects.len());
        for o in &r.objects {
            let b = BBox::new(o.x_min, o.y_min, o.x_max, o.y_max)?;
            if b.is_degenerate() || b.x_min < 0.0 || b.y_min < 0.0 || b.x_max > 1.0 || b.y_max > 1.0 {
                return Err(Error::InvalidBox(format!("{} in {}: {b:?}", r.file, split)));
            }
            if o.class_id == 0 {
                return Err(Error::InvalidInput(format!("background class on object in {}", r.file)));
            }
            objects.push(GroundTruth {
                bbox: b,
                class_id: o.class_id,
            });
        }
        Ok(LabeledImage {
            id: r.file.clone(),
            pixels: image_to_tensor(&load_png(&dir.join(&r.file))?),
            objects,
        })
    })
    .into_iter()
    .collect()
}

/// Load a split's images only, in file-name order.
pub fn load_unlabeled(root: &Path, split: &str, exec: Exec) -> Result<Vec<UnlabeledImage>> {
    let dir = root.join(split).join("images");
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    par::map(exec, &files, |_, p| {
        Ok(UnlabeledImage {
            id: p.file_name().unwrap().to_string_lossy().into_owned(),
            pixels: image_to_tensor(&load_png(p)?),
        })
    })
    .into_iter()
    .collect()
}

/// SHA-256 over every file below `root`, in sorted path order.
pub fn directory_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub flip_prob: f64,
    /// Smallest crop side as a fraction of the image.
    pub min_crop: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            flip_prob: 0.5,
            min_crop: 0.75,
            brightness: 0.1,
            contrast: 0.15,
        }
    }
}

/// Random crop (resampled back to full size), horizontal flip and
/// brightness/contrast jitter. Boxes are transformed along with the pixels;
/// boxes keeping less than half their area are dropped.
pub fn augment(
    pixels: &[f64],
    boxes: &[GroundTruth],
    size: usize,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<GroundTruth>) {
    if !cfg.enabled {
        return (pixels.to_vec(), boxes.to_vec());
    }
    let channels = pixels.len() / (size * size);
    let s = rng.gen_range(cfg.min_crop.min(1.0)..=1.0);
    let ox = rng.gen_range(0.0..=(1.0 - s));
    let oy = rng.gen_range(0.0..=(1.0 - s));
    let flip = rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let gain = 1.0 + rng.gen_range(-cfg.contrast..=cfg.contrast);
    let shift = rng.gen_range(-cfg.brightness..=cfg.brightness);

    let mut out = vec![0.0; pixels.len()];
    let sz = size as f64;
    for y in 0..size {
        let sy = (((oy + (y as f64 + 0.5) / sz * s) * sz) as usize).min(size - 1);
        for x in 0..size {
            let xx = if flip { size - 1 - x } else { x };
            let sx = (((ox + (xx as f64 + 0.5) / sz * s) * sz) as usize).min(size - 1);
            for c in 0..channels {
                let v = pixels[c * size * size + sy * size + sx];
                out[c * size * size + y * size + x] = (v * gain + shift).clamp(-1.0, 1.0);
            }
        }
    }
    let mut kept = Vec::new();
    for g in boxes {
        let b = &g.bbox;
        let mut nb = BBox {
            x_min: (b.x_min - ox) / s,
            y_min: (b.y_min - oy) / s,
            x_max: (b.x_max - ox) / s,
            y_max: (b.y_max - oy) / s,
        };
        let full = nb.area();
        nb = nb.clip_unit();
        if nb.is_degenerate() || nb.area() < 0.5 * full || nb.area() < MIN_OBJECT_AREA {
            continue;
        }
        if flip {
            nb = BBox {
                x_min: 1.0 - nb.x_max,
                y_min: nb.y_min,
                x_max: 1.0 - nb.x_min,
                y_max: nb.y_max,
            };
        }
        kept.push(GroundTruth {
            bbox: nb,
            class_id: g.class_id,
        });
    }
    (out, kept)
}

/// Source half of a batch: pixels with their (augmented) labels.
#[derive(Debug, Clone)]
pub struct SourceItem {
    pub index: usize,
    pub pixels: Vec<f64>,
    pub objects: Vec<GroundTruth>,
}

/// Target half of a batch: pixels only.
#[derive(Debug, Clone)]
pub struct TargetItem {
    pub index: usize,
    pub pixels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DomainBatch {
    pub source: Vec<SourceItem>,
    pub target: Vec<TargetItem>,
}

/// Epoch-wise sampling without replacement; a fresh permutation is drawn
/// whenever a stream runs out.
#[derive(Debug, Clone)]
struct Stream {
    len: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl Stream {
    fn new(len: usize) -> Self {
        Stream {
            len,
            order: Vec::new(),
            pos: 0,
            epoch: 0,
        }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng, name: &str) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos >= self.order.len() {
                if !self.order.is_empty() && k > self.len {
                    log::debug!("{name}: batch half {k} exceeds split size {}, wrapping around", self.len);
                }
                self.order = (0..self.len).collect();
                self.order.shuffle(rng);
                self.pos = 0;
                self.epoch += 1;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Draws paired source/target batches with identical augmentation law.
#[derive(Debug, Clone)]
pub struct BatchComposer {
    rng: ChaCha8Rng,
    source: Stream,
    target: Stream,
    pub augment: AugmentConfig,
    pub image_size: usize,
}

impl BatchComposer {
    pub fn new(source_len: usize, target_len: usize, image_size: usize, augment: AugmentConfig, seed: u64) -> Result<Self> {
        if source_len == 0 && target_len == 0 {
            return Err(Error::InvalidInput("both splits are empty".into()));
        }
        Ok(BatchComposer {
            rng: ChaCha8Rng::seed_from_u64(mix(seed ^ 0xBA7C)),
            source: Stream::new(source_len),
            target: Stream::new(target_len),
            augment,
            image_size,
        })
    }

    pub fn source_epoch(&self) -> usize {
        self.source.epoch
    }

    pub fn target_epoch(&self) -> usize {
        self.target.epoch
    }

    /// `source_half` labeled and `target_half` unlabeled images.
    pub fn compose(
        &mut self,
        source: &[LabeledImage],
        target: &[UnlabeledImage],
        source_half: usize,
        target_half: usize,
    ) -> Result<DomainBatch> {
        if (source_half > 0 && source.is_empty()) || (target_half > 0 && target.is_empty()) {
            return Err(Error::InvalidInput("cannot draw from an empty split".into()));
        }
        let si = self.source.take(source_half, &mut self.rng, "source");
        let ti = self.target.take(target_half, &mut self.rng, "target");
        let size = self.image_size;
        let src = si
            .into_iter()
            .map(|i| {
                let (pixels, objects) = augment(&source[i].pixels, &source[i].objects, size, &self.augment, &mut self.rng);
                SourceItem { index: i, pixels, objects }
            })
            .collect();
        let tgt = ti
            .into_iter()
            .map(|i| {
                let (pixels, _) = augment(&target[i].pixels, &[], size, &self.augment, &mut self.rng);
                TargetItem { index: i, pixels }
            })
            .collect();
        Ok(DomainBatch { source: src, target: tgt })
    }
}

/// Per-image mean intensity.
pub fn mean_intensities(images: &[Vec<f64>]) -> Vec<f64> {
    images
        .iter()
        .map(|p| p.iter().sum::<f64>() / p.len() as f64)
        .collect()
}

/// Per-class object counts of a labeled split.
pub fn class_histogram(images: &[LabeledImage]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for img in images {
        for o in &img.objects {
            *h.entry(o.class_id).or_insert(0) += 1;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(seed: u64) -> GenerateConfig {
        GenerateConfig {
            seed,
            counts: SplitCounts {
                source: 12,
                target_train: 6,
                target_test: 5,
            },
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_counts_match() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = small_cfg(3);
        generate_domain_pair(a.path(), &cfg, Exec::Parallel).unwrap();
        generate_domain_pair(b.path(), &cfg, Exec::Sequential).unwrap();
        assert_eq!(directory_hash(a.path()).unwrap(), directory_hash(b.path()).unwrap());
        for (split, n) in [(SOURCE_SPLIT, 12), (TARGET_TRAIN_SPLIT, 6), (TARGET_TEST_SPLIT, 5)] {
            let files = fs::read_dir(a.path().join(split).join("images")).unwrap().count();
            assert_eq!(files, n);
            assert_eq!(read_annotations(a.path(), split).unwrap().len(), n);
        }
        let m = read_manifest(a.path()).unwrap();
        assert_eq!(m.counts.source, 12);
    }

    #[test]
    fn every_image_has_valid_objects() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain_pair(dir.path(), &small_cfg(5), Exec::Parallel).unwrap();
        let src = load_labeled(dir.path(), SOURCE_SPLIT, Exec::Parallel).unwrap();
        for img in &src {
            assert!(!img.objects.is_empty() && img.objects.len() <= 4);
            for o in &img.objects {
                o.bbox.validate().unwrap();
                assert!(o.bbox.area() >= MIN_OBJECT_AREA);
                assert!(o.bbox.x_min >= 0.0 && o.bbox.x_max <= 1.0);
                assert!((1..=3).contains(&o.class_id));
            }
            assert_eq!(img.pixels.len(), 3 * 64 * 64);
        }
    }

    #[test]
    fn zero_count_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(1);
        cfg.counts.target_test = 0;
        assert!(generate_domain_pair(dir.path(), &cfg, Exec::Sequential).is_err());
    }

    #[test]
    fn degenerate_boxes_are_rejected_at_load() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain_pair(dir.path(), &small_cfg(2), Exec::Sequential).unwrap();
        let path = dir.path().join(SOURCE_SPLIT).join("annotations.jsonl");
        let mut recs = read_annotations(dir.path(), SOURCE_SPLIT).unwrap();
        recs[0].objects[0].x_max = recs[0].objects[0].x_min;
        let body: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        fs::write(&path, body).unwrap();
        assert!(matches!(
            load_labeled(dir.path(), SOURCE_SPLIT, Exec::Sequential),
            Err(Error::InvalidBox(_))
        ));
    }

    #[test]
    fn unlabeled_loader_ignores_annotations() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain_pair(dir.path(), &small_cfg(4), Exec::Sequential).unwrap();
        let before = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Sequential).unwrap();
        fs::remove_file(dir.path().join(TARGET_TRAIN_SPLIT).join("annotations.jsonl")).unwrap();
        let after = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Sequential).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn domains_differ_in_pixel_statistics() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(9);
        cfg.counts = SplitCounts {
            source: 40,
            target_train: 40,
            target_test: 1,
        };
        generate_domain_pair(dir.path(), &cfg, Exec::Parallel).unwrap();
        let s: Vec<Vec<f64>> = load_unlabeled(dir.path(), SOURCE_SPLIT, Exec::Parallel)
            .unwrap()
            .into_iter()
            .map(|i| i.pixels)
            .collect();
        let t: Vec<Vec<f64>> = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Parallel)
            .unwrap()
            .into_iter()
            .map(|i| i.pixels)
            .collect();
        let stats = |v: &[f64]| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
            (m, (var / n).sqrt())
        };
        let (ms, ses) = stats(&mean_intensities(&s));
        let (mt, set) = stats(&mean_intensities(&t));
        assert!((ms - mt).abs() > ses.max(set), "{ms} vs {mt}");
    }

    #[test]
    fn batches_are_paired_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain_pair(dir.path(), &small_cfg(6), Exec::Parallel).unwrap();
        let src = load_labeled(dir.path(), SOURCE_SPLIT, Exec::Parallel).unwrap();
        let tgt = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Parallel).unwrap();
        let mut a = BatchComposer::new(src.len(), tgt.len(), 64, AugmentConfig::default(), 11).unwrap();
        let mut b = BatchComposer::new(src.len(), tgt.len(), 64, AugmentConfig::default(), 11).unwrap();
        for _ in 0..3 {
            let x = a.compose(&src, &tgt, 4, 4).unwrap();
            let y = b.compose(&src, &tgt, 4, 4).unwrap();
            assert_eq!(x.source.len() + x.target.len(), 8);
            assert_eq!(x.source.iter().map(|s| s.index).collect::<Vec<_>>(), y.source.iter().map(|s| s.index).collect::<Vec<_>>());
            assert_eq!(x.target[0].pixels, y.target[0].pixels);
        }
        // half size larger than the split wraps around
        let big = a.compose(&src, &tgt, 4, 16).unwrap();
        assert_eq!(big.target.len(), 16);
    }

    #[test]
    fn sixteen_plus_sixteen() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_cfg(8);
        cfg.counts = SplitCounts { source: 20, target_train: 20, target_test: 1 };
        generate_domain_pair(dir.path(), &cfg, Exec::Parallel).unwrap();
        let src = load_labeled(dir.path(), SOURCE_SPLIT, Exec::Parallel).unwrap();
        let tgt = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Parallel).unwrap();
        let mut c = BatchComposer::new(src.len(), tgt.len(), 64, AugmentConfig::default(), 1).unwrap();
        let batch = c.compose(&src, &tgt, 16, 16).unwrap();
        assert_eq!((batch.source.len(), batch.target.len()), (16, 16));
        let mut seen: Vec<usize> = batch.source.iter().map(|s| s.index).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        generate_domain_pair(dir.path(), &small_cfg(10), Exec::Sequential).unwrap();
        let src = load_labeled(dir.path(), SOURCE_SPLIT, Exec::Sequential).unwrap();
        let tgt = load_unlabeled(dir.path(), TARGET_TRAIN_SPLIT, Exec::Sequential).unwrap();
        let aug = AugmentConfig { enabled: false, ..Default::default() };
        let mut c = BatchComposer::new(src.len(), tgt.len(), 64, aug, 1).unwrap();
        let batch = c.compose(&src, &tgt, 2, 2).unwrap();
        for s in &batch.source {
            assert_eq!(s.pixels, src[s.index].pixels);
            assert_eq!(s.objects, src[s.index].objects);
        }
        for t in &batch.target {
            assert_eq!(t.pixels, tgt[t.index].pixels);
        }
    }

    #[test]
    fn augmented_boxes_stay_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = vec![GroundTruth {
            bbox: BBox::new(0.1, 0.2, 0.4, 0.5).unwrap(),
            class_id: 2,
        }];
        let px = vec![0.0; 3 * 64 * 64];
        for _ in 0..200 {
            let (_, b) = augment(&px, &gt, 64, &AugmentConfig::default(), &mut rng);
            for g in b {
                g.bbox.validate().unwrap();
                assert!(g.bbox.x_min >= 0.0 && g.bbox.x_max <= 1.0 && !g.bbox.is_degenerate());
            }
        }
    }
}
