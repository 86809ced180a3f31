//! Procedural street-scene toy dataset: layered scenes rendered as RGB PNGs
//! with grayscale class-index label PNGs, plus the matching loader.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::segnet::Sample;
use crate::types::{clip_quantize_value, Image, LabelMask};

use super::HarnessError;

pub const CLASS_ROAD: u8 = 0;
pub const CLASS_SIDEWALK: u8 = 1;
pub const CLASS_BUILDING: u8 = 2;
pub const CLASS_SKY: u8 = 3;
pub const CLASS_CAR: u8 = 4;
pub const CLASS_PEDESTRIAN: u8 = 5;
pub const CLASS_POLE: u8 = 6;
pub const CLASS_VEGETATION: u8 = 7;
pub const N_CLASSES: usize = 8;

pub const CLASS_NAMES: [&str; N_CLASSES] =
    ["road", "sidewalk", "building", "sky", "car", "pedestrian", "pole", "vegetation"];

/// Base color per class, used both to render scenes and to draw mask panels.
/// The colors sit deliberately close together (pairwise distances of a few
/// tens of gray values) so that norm-bounded perturbations have leverage
/// while clean scenes remain separable.
pub const PALETTE: [[u8; 3]; N_CLASSES] = [
    [128, 128, 128], // road
    [152, 146, 130], // sidewalk
    [148, 118, 116], // building
    [138, 158, 182], // sky
    [104, 108, 158], // car
    [170, 112, 120], // pedestrian
    [162, 162, 118], // pole
    [114, 152, 114], // vegetation
];

#[derive(Clone, Debug)]
pub struct ToyDatasetSpec {
    pub train_count: usize,
    pub val_count: usize,
    pub height: usize,
    pub width: usize,
    /// Std of the per-pixel Gaussian pixel noise.
    pub noise_sigma: f64,
    /// Max absolute per-object color jitter.
    pub object_jitter: f64,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            train_count: 64,
            val_count: 64,
            height: 64,
            width: 128,
            noise_sigma: 2.0,
            object_jitter: 6.0,
            seed: 7,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Render one scene. Every image contains all eight classes so per-class
/// attack scenarios (car/pedestrian removal) always have material to work on.
pub fn render_scene(spec: &ToyDatasetSpec, rng: &mut ChaCha8Rng) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let mut labels = vec![CLASS_SKY; h * w];
    let mut colors = vec![[0.0f64; 3]; h * w];

    let jitter = |rng: &mut ChaCha8Rng, spec: &ToyDatasetSpec| -> [f64; 3] {
        [
            rng.gen_range(-spec.object_jitter..=spec.object_jitter),
            rng.gen_range(-spec.object_jitter..=spec.object_jitter),
            rng.gen_range(-spec.object_jitter..=spec.object_jitter),
        ]
    };
    let paint_rect =
        |labels: &mut [u8], colors: &mut [[f64; 3]], y0: usize, y1: usize, x0: usize, x1: usize, class: u8, j: [f64; 3]| {
            let base = PALETTE[class as usize];
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    labels[y * w + x] = class;
                    for ch in 0..3 {
                        colors[y * w + x][ch] = base[ch] as f64 + j[ch];
                    }
                }
            }
        };

    // sky fills everything above the horizon initially
    let horizon = rng.gen_range(22..30usize);
    let sky_j = jitter(rng, spec);
    paint_rect(&mut labels, &mut colors, 0, horizon, 0, w, CLASS_SKY, sky_j);

    // buildings: blocks standing on the horizon
    for _ in 0..rng.gen_range(3..=5) {
        let bw = rng.gen_range(14..32usize);
        let x0 = rng.gen_range(0..w - bw);
        let top = rng.gen_range(3..horizon - 4);
        let j = jitter(rng, spec);
        paint_rect(&mut labels, &mut colors, top, horizon, x0, x0 + bw, CLASS_BUILDING, j);
    }

    // ground: sidewalk band below the horizon, road trapezoid on top of it
    let gj = jitter(rng, spec);
    paint_rect(&mut labels, &mut colors, horizon, h, 0, w, CLASS_SIDEWALK, gj);
    let cx = rng.gen_range(w / 2 - 10..w / 2 + 10) as f64;
    let top_half = rng.gen_range(18.0..30.0);
    let bot_half = rng.gen_range(48.0..62.0);
    let rj = jitter(rng, spec);
    for y in horizon..h {
        let t = (y - horizon) as f64 / (h - horizon) as f64;
        let half = top_half + t * (bot_half - top_half);
        let x0 = (cx - half).max(0.0) as usize;
        let x1 = (cx + half).min(w as f64) as usize;
        paint_rect(&mut labels, &mut colors, y, y + 1, x0, x1, CLASS_ROAD, rj);
    }

    // vegetation: blobs hugging the horizon line
    for _ in 0..rng.gen_range(2..=3) {
        let vx = rng.gen_range(0..w - 12);
        let vy = horizon.saturating_sub(rng.gen_range(3..8));
        let vw = rng.gen_range(8..14usize);
        let vh = rng.gen_range(5..9usize);
        let j = jitter(rng, spec);
        paint_rect(&mut labels, &mut colors, vy, vy + vh, vx, vx + vw, CLASS_VEGETATION, j);
    }

    // poles: thin vertical lines crossing the horizon
    for _ in 0..rng.gen_range(2..=3) {
        let px = rng.gen_range(2..w - 3);
        let top = horizon.saturating_sub(rng.gen_range(8..14));
        let bot = (horizon + rng.gen_range(8..16)).min(h);
        let j = jitter(rng, spec);
        paint_rect(&mut labels, &mut colors, top, bot, px, px + 2, CLASS_POLE, j);
    }

    // cars on the road
    for _ in 0..rng.gen_range(2..=3) {
        let ch_ = rng.gen_range(7..11usize);
        let cw = rng.gen_range(13..19usize);
        let bottom = rng.gen_range(horizon + 12..h - 2);
        let x0 = rng.gen_range(w / 4..3 * w / 4 - cw);
        let j = jitter(rng, spec);
        paint_rect(&mut labels, &mut colors, bottom - ch_, bottom, x0, x0 + cw, CLASS_CAR, j);
    }

    // pedestrians on the sidewalk edges
    for _ in 0..rng.gen_range(2..=3) {
        let ph = rng.gen_range(9..14usize);
        let pw = rng.gen_range(3..5usize);
        let bottom = rng.gen_range(horizon + 8..h - 2);
        let left_side = rng.gen_bool(0.5);
        let x0 = if left_side { rng.gen_range(0..w / 5) } else { rng.gen_range(4 * w / 5..w - pw) };
        let j = jitter(rng, spec);
        paint_rect(&mut labels, &mut colors, bottom - ph, bottom, x0, x0 + pw, CLASS_PEDESTRIAN, j);
    }

    // pixel noise and quantization
    let mut data = Vec::with_capacity(h * w * 3);
    for px in &colors[..] {
        for &v in px {
            data.push(clip_quantize_value(v + spec.noise_sigma * standard_normal(rng)));
        }
    }
    Sample { image: Image::new(h, w, 3, data), labels: LabelMask::new(h, w, labels) }
}

fn split_rng(spec: &ToyDatasetSpec, split: &str, index: usize) -> ChaCha8Rng {
    // disjoint deterministic streams per (seed, split, index)
    let tag: u64 = match split {
        "train" => 0x7472,
        _ => 0x76616c,
    };
    ChaCha8Rng::seed_from_u64(
        spec.seed.wrapping_mul(0x9E3779B97F4A7C15) ^ (tag << 32) ^ index as u64,
    )
}

pub fn generate_scene(spec: &ToyDatasetSpec, split: &str, index: usize) -> Sample {
    render_scene(spec, &mut split_rng(spec, split, index))
}

/// Write the dataset as train/ and val/ directories of *_img.png (RGB) and
/// *_lbl.png (grayscale class indices). Deterministic per seed.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec, dir: &Path) -> Result<(), HarnessError> {
    for (split, count) in [("train", spec.train_count), ("val", spec.val_count)] {
        let sub = dir.join(split);
        fs::create_dir_all(&sub)?;
        for i in 0..count {
            let sample = generate_scene(spec, split, i);
            let stem = format!("{i:04}");
            save_sample(&sample, &sub, &stem)?;
        }
    }
    Ok(())
}

fn save_sample(sample: &Sample, dir: &Path, stem: &str) -> Result<(), HarnessError> {
    let (h, w) = (sample.image.height as u32, sample.image.width as u32);
    let rgb = RgbImage::from_raw(w, h, sample.image.data().to_vec())
        .expect("image buffer size matches dimensions");
    rgb.save(dir.join(format!("{stem}_img.png")))?;
    let lbl = GrayImage::from_raw(w, h, sample.labels.classes().to_vec())
        .expect("label buffer size matches dimensions");
    lbl.save(dir.join(format!("{stem}_lbl.png")))?;
    Ok(())
}

/// In-memory train/val splits loaded from a generated dataset directory.
#[derive(Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, HarnessError> {
    Ok(Dataset { train: load_split(&dir.join("train"))?, val: load_split(&dir.join("val"))? })
}

pub fn load_split(dir: &Path) -> Result<Vec<Sample>, HarnessError> {
    let mut imgs: BTreeMap<String, Image> = BTreeMap::new();
    let mut lbls: BTreeMap<String, LabelMask> = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = match path.file_name().and_then(|n| n.to_str()) {
            Some(n) if n.ends_with(".png") => n.to_string(),
            _ => continue,
        };
        let decoded = image::open(&path)
            .map_err(|e| HarnessError::Data(format!("{name}: {e}")))?;
        if let Some(stem) = name.strip_suffix("_img.png") {
            let rgb = match decoded {
                DynamicImage::ImageRgb8(i) => i,
                DynamicImage::ImageRgb16(_) | DynamicImage::ImageLuma16(_) => {
                    return Err(HarnessError::Data(format!("{name}: 16-bit PNG unsupported")))
                }
                other => other.to_rgb8(),
            };
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            imgs.insert(stem.to_string(), Image::new(h, w, 3, rgb.into_raw()));
        } else if let Some(stem) = name.strip_suffix("_lbl.png") {
            let gray = match decoded {
                DynamicImage::ImageLuma8(i) => i,
                DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => {
                    return Err(HarnessError::Data(format!("{name}: 16-bit PNG unsupported")))
                }
                other => other.to_luma8(),
            };
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            lbls.insert(stem.to_string(), LabelMask::new(h, w, gray.into_raw()));
        }
    }
    let mut samples = Vec::with_capacity(imgs.len());
    for (stem, image) in imgs {
        let labels = lbls
            .remove(&stem)
            .ok_or_else(|| HarnessError::Data(format!("missing label mask for '{stem}'")))?;
        samples.push(Sample { image, labels });
    }
    if let Some(stem) = lbls.keys().next() {
        return Err(HarnessError::Data(format!("missing image for '{stem}'")));
    }
    Ok(samples)
}

/// Render a label mask in palette colors (for report panels).
pub fn render_mask(mask: &LabelMask) -> Image {
    let mut data = Vec::with_capacity(mask.height * mask.width * 3);
    for &c in mask.classes() {
        let color = PALETTE.get(c as usize).copied().unwrap_or([0, 0, 0]);
        data.extend_from_slice(&color);
    }
    Image::new(mask.height, mask.width, 3, data)
}

pub fn save_png(image: &Image, path: &Path) -> Result<(), HarnessError> {
    let rgb = RgbImage::from_raw(image.width as u32, image.height as u32, image.data().to_vec())
        .expect("buffer size matches dimensions");
    rgb.save(path)?;
    Ok(())
}
