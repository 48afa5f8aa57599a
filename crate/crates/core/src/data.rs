//! Dataset ingestion: JSON-lines manifests, PNG images, MNIST IDX files and a
//! procedural digit generator for offline runs.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{DynamicImage, GrayImage, ImageBuffer, Luma};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{ImageTensor, PixelRange};
use crate::error::{GamError, Result};
use crate::metrics::{BBox, EvalItem, GroundTruthRegion};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LabelValue {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for LabelValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelValue::Index(i) => write!(f, "{i}"),
            LabelValue::Name(s) => f.write_str(s),
        }
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<LabelValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[usize; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair_with: Option<String>,
}

/// Reads a JSON-lines manifest. Relative paths are resolved against the
/// manifest's directory; blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| GamError::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    let mut ids = std::collections::HashSet::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: ManifestEntry = serde_json::from_str(line).map_err(|e| GamError::Format {
            format: "manifest",
            reason: format!("line {}: {e}", line_no + 1),
        })?;
        if !ids.insert(entry.id.clone()) {
            return Err(GamError::Format {
                format: "manifest",
                reason: format!("line {}: duplicate id `{}`", line_no + 1, entry.id),
            });
        }
        if entry.image_path.is_relative() {
            entry.image_path = base.join(&entry.image_path);
        }
        if let Some(m) = entry.mask_path.as_mut().filter(|m| m.is_relative()) {
            *m = base.join(&*m);
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&serde_json::to_string(e)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| GamError::io(path, e))
}

/// How decoded pixels become model input: resize to `height × width`,
/// convert to `channels`, scale to `[0, 1]`, then `(v − mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub resize_filter: String,
}

impl Preprocessing {
    /// Scale to `[0, 1]` with no further normalisation.
    pub fn unit_range(shape: [usize; 3]) -> Self {
        Preprocessing {
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            mean: vec![0.0; shape[0]],
            std: vec![1.0; shape[0]],
            resize_filter: "triangle".into(),
        }
    }

    /// Undoes the normalisation for display; values clamp to `[0, 1]`.
    pub fn display(&self, x: &ImageTensor) -> Array3<f64> {
        let mut out = x.data().clone();
        if x.range() == PixelRange::Normalized {
            for (c, mut ch) in out.outer_iter_mut().enumerate() {
                let (m, s) = (self.mean.get(c).copied().unwrap_or(0.0), self.std.get(c).copied().unwrap_or(1.0));
                ch.mapv_inplace(|v| v * s + m);
            }
        }
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
        out
    }

    pub fn apply(&self, img: &DynamicImage) -> Result<ImageTensor> {
        let (h, w) = (self.height as u32, self.width as u32);
        let resized = if img.width() == w && img.height() == h {
            img.clone()
        } else {
            img.resize_exact(w, h, FilterType::Triangle)
        };
        let data = match self.channels {
            1 => {
                let g = resized.to_luma8();
                Array3::from_shape_fn((1, self.height, self.width), |(_, r, c)| {
                    f64::from(g.get_pixel(c as u32, r as u32).0[0]) / 255.0
                })
            }
            3 => {
                let rgb = resized.to_rgb8();
                Array3::from_shape_fn((3, self.height, self.width), |(k, r, c)| {
                    f64::from(rgb.get_pixel(c as u32, r as u32).0[k]) / 255.0
                })
            }
            other => return Err(GamError::UnsupportedModel(format!("{other}-channel input"))),
        };
        let mut data = data;
        for (c, mut ch) in data.outer_iter_mut().enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            ch.mapv_inplace(|v| (v - m) / s);
        }
        ImageTensor::new(data, PixelRange::Normalized)
    }
}

pub fn load_image(path: &Path, pre: &Preprocessing) -> Result<(ImageTensor, (usize, usize))> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => GamError::io(path, io),
        other => GamError::Image(other),
    })?;
    let original = (img.height() as usize, img.width() as usize);
    Ok((pre.apply(&img)?, original))
}

/// Rescales a box from an `original` (rows, cols) image to the model input.
pub fn rescale_bbox(b: [usize; 4], original: (usize, usize), pre: &Preprocessing) -> Result<GroundTruthRegion> {
    let sx = pre.width as f64 / original.1 as f64;
    let sy = pre.height as f64 / original.0 as f64;
    let lo = |v: usize, s: f64| ((v as f64) * s).floor() as usize;
    let hi = |v: usize, s: f64, cap: usize| (((v as f64) * s).ceil() as usize).min(cap);
    let scaled = BBox::new(lo(b[0], sx), lo(b[1], sy), hi(b[2], sx, pre.width), hi(b[3], sy, pre.height));
    GroundTruthRegion::bbox((pre.height, pre.width), scaled)
}

pub fn load_mask(path: &Path, pre: &Preprocessing) -> Result<GroundTruthRegion> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => GamError::io(path, io),
        other => GamError::Image(other),
    })?;
    let g = img
        .resize_exact(pre.width as u32, pre.height as u32, FilterType::Nearest)
        .to_luma8();
    Ok(GroundTruthRegion::mask(Array2::from_shape_fn((pre.height, pre.width), |(r, c)| {
        g.get_pixel(c as u32, r as u32).0[0] >= 128
    })))
}

/// Resolves a manifest label to a class index with `resolve`.
pub fn load_items(
    entries: &[ManifestEntry],
    pre: &Preprocessing,
    resolve: &dyn Fn(&LabelValue) -> Result<usize>,
) -> Vec<(String, Result<EvalItem>)> {
    entries
        .iter()
        .map(|e| {
            let item = (|| {
                let (image, original) = load_image(&e.image_path, pre)?;
                let region = match (&e.bbox, &e.mask_path) {
                    (_, Some(mask)) => Some(load_mask(mask, pre)?),
                    (Some(b), None) => Some(rescale_bbox(*b, original, pre)?),
                    (None, None) => None,
                };
                Ok(EvalItem {
                    id: e.id.clone(),
                    image,
                    label: e.label.as_ref().map(resolve).transpose()?,
                    region,
                    pair_with: e.pair_with.clone(),
                })
            })();
            (e.id.clone(), item)
        })
        .collect()
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| GamError::Format {
            format: "idx",
            reason: format!("truncated {what}"),
        })
}

/// Parses an IDX3 image file into `[1, rows, cols]` tensors in `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Array3<f64>>> {
    if read_be_u32(bytes, 0, "header")? != 0x0803 {
        return Err(GamError::Format {
            format: "idx",
            reason: "not an unsigned-byte rank-3 file".into(),
        });
    }
    let count = read_be_u32(bytes, 4, "header")? as usize;
    let rows = read_be_u32(bytes, 8, "header")? as usize;
    let cols = read_be_u32(bytes, 12, "header")? as usize;
    let body = &bytes[16..];
    if body.len() != count * rows * cols {
        return Err(GamError::Format {
            format: "idx",
            reason: format!("expected {} pixel bytes, found {}", count * rows * cols, body.len()),
        });
    }
    Ok(body
        .chunks_exact(rows * cols)
        .map(|img| Array3::from_shape_fn((1, rows, cols), |(_, r, c)| f64::from(img[r * cols + c]) / 255.0))
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    if read_be_u32(bytes, 0, "header")? != 0x0801 {
        return Err(GamError::Format {
            format: "idx",
            reason: "not an unsigned-byte rank-1 file".into(),
        });
    }
    let count = read_be_u32(bytes, 4, "header")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(GamError::Format {
            format: "idx",
            reason: format!("expected {count} labels, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Loads `train-images-idx3-ubyte` / `train-labels-idx1-ubyte` from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Vec<Array3<f64>>, Vec<usize>)> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read(&p).map_err(|e| GamError::io(p, e))
    };
    let images = parse_idx_images(&read("train-images-idx3-ubyte")?)?;
    let labels = parse_idx_labels(&read("train-labels-idx1-ubyte")?)?;
    if images.len() != labels.len() {
        return Err(GamError::Format {
            format: "idx",
            reason: format!("{} images but {} labels", images.len(), labels.len()),
        });
    }
    Ok((images, labels))
}

type Segment = ((f64, f64), (f64, f64));

// Stroke skeletons on a unit box, (x, y) with y pointing down.
const GLYPHS: [&[Segment]; 10] = [
    &[
        ((0.2, 0.1), (0.8, 0.1)),
        ((0.8, 0.1), (0.8, 0.9)),
        ((0.8, 0.9), (0.2, 0.9)),
        ((0.2, 0.9), (0.2, 0.1)),
    ],
    &[((0.35, 0.25), (0.55, 0.1)), ((0.55, 0.1), (0.55, 0.9)), ((0.35, 0.9), (0.75, 0.9))],
    &[
        ((0.2, 0.1), (0.8, 0.1)),
        ((0.8, 0.1), (0.8, 0.5)),
        ((0.8, 0.5), (0.2, 0.9)),
        ((0.2, 0.9), (0.8, 0.9)),
    ],
    &[
        ((0.2, 0.1), (0.8, 0.1)),
        ((0.8, 0.1), (0.8, 0.9)),
        ((0.35, 0.5), (0.8, 0.5)),
        ((0.2, 0.9), (0.8, 0.9)),
    ],
    &[((0.2, 0.1), (0.2, 0.55)), ((0.2, 0.55), (0.8, 0.55)), ((0.65, 0.1), (0.65, 0.9))],
    &[
        ((0.8, 0.1), (0.2, 0.1)),
        ((0.2, 0.1), (0.2, 0.5)),
        ((0.2, 0.5), (0.8, 0.5)),
        ((0.8, 0.5), (0.8, 0.9)),
        ((0.8, 0.9), (0.2, 0.9)),
    ],
    &[
        ((0.7, 0.1), (0.2, 0.5)),
        ((0.2, 0.5), (0.2, 0.9)),
        ((0.2, 0.9), (0.8, 0.9)),
        ((0.8, 0.9), (0.8, 0.55)),
        ((0.8, 0.55), (0.2, 0.55)),
    ],
    &[((0.2, 0.1), (0.8, 0.1)), ((0.8, 0.1), (0.4, 0.9))],
    &[
        ((0.2, 0.1), (0.8, 0.1)),
        ((0.8, 0.1), (0.8, 0.9)),
        ((0.8, 0.9), (0.2, 0.9)),
        ((0.2, 0.9), (0.2, 0.1)),
        ((0.2, 0.5), (0.8, 0.5)),
    ],
    &[
        ((0.8, 0.45), (0.2, 0.45)),
        ((0.2, 0.45), (0.2, 0.1)),
        ((0.2, 0.1), (0.8, 0.1)),
        ((0.8, 0.1), (0.8, 0.9)),
        ((0.8, 0.9), (0.3, 0.9)),
    ],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// A procedurally drawn digit with random placement, size, slant, stroke
/// width and background noise.
#[derive(Clone, Debug)]
pub struct SyntheticDigit {
    pub image: Array3<f64>,
    pub label: usize,
    /// Tight box around the ink.
    pub bbox: BBox,
}

/// `count` digits of `size × size`, labels cycling through 0..9.
pub fn synthetic_digits(count: usize, size: usize, seed: u64) -> Vec<SyntheticDigit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let label = i % 10;
            let scale = rng.gen_range(0.45..0.75) * size as f64;
            let cx = rng.gen_range(0.3..0.7) * size as f64;
            let cy = rng.gen_range(0.3..0.7) * size as f64;
            let angle: f64 = rng.gen_range(-0.25..0.25);
            let shear: f64 = rng.gen_range(-0.2..0.2);
            let width = rng.gen_range(0.06..0.11);
            let (sin, cos) = angle.sin_cos();
            let mut image = Array3::zeros((1, size, size));
            for r in 0..size {
                for c in 0..size {
                    // Pixel centre back into glyph coordinates.
                    let (x, y) = ((c as f64 + 0.5 - cx) / scale, (r as f64 + 0.5 - cy) / scale);
                    let (x, y) = (cos * x + sin * y, -sin * x + cos * y);
                    let p = (x - shear * y + 0.5, y + 0.5);
                    let d = GLYPHS[label]
                        .iter()
                        .map(|&(a, b)| segment_distance(p, a, b))
                        .fold(f64::INFINITY, f64::min);
                    let ink = (1.0 - (d - width) / 0.04).clamp(0.0, 1.0);
                    image[(0, r, c)] = ink;
                }
            }
            let bbox = bbox_of_ink(&image, 0.5).unwrap_or(BBox::new(0, 0, size, size));
            for v in image.iter_mut() {
                *v = (*v + rng.gen_range(0.0..0.15)).min(1.0);
            }
            SyntheticDigit { image, label, bbox }
        })
        .collect()
}

fn bbox_of_ink(image: &Array3<f64>, level: f64) -> Option<BBox> {
    let plane = image.index_axis(ndarray::Axis(0), 0).mapv(|v| v >= level);
    crate::metrics::bbox_from_mask(&plane)
}

pub fn to_gray_png(plane: &Array2<f64>) -> GrayImage {
    let (h, w) = plane.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |c, r| {
        Luma([(plane[(r as usize, c as usize)].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes `digits` as PNG files plus `manifest.jsonl` into `dir`.
pub fn write_digit_dataset(dir: &Path, digits: &[SyntheticDigit]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| GamError::io(dir, e))?;
    let mut entries = Vec::with_capacity(digits.len());
    for (i, d) in digits.iter().enumerate() {
        let name = format!("digit_{i:05}.png");
        let path = dir.join(&name);
        to_gray_png(&d.image.index_axis(ndarray::Axis(0), 0).to_owned()).save(&path)?;
        entries.push(ManifestEntry {
            id: format!("d{i:05}"),
            image_path: PathBuf::from(name),
            label: Some(LabelValue::Index(d.label)),
            bbox: Some(d.bbox.as_array()),
            mask_path: None,
            pair_with: None,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}
