//! Saliency artifacts: the `SMAP/1` raw map format and colour overlays.
//!
//! `SMAP/1` layout, all little-endian:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `SMAP` |
//! | 2 | version, `u16` = 1 |
//! | 1 | method: 0 gam, 1 gc, 2 gcpp |
//! | 1 | degenerate flag |
//! | 4 | `u0` rows, `u32` |
//! | 4 | `v0` columns, `u32` |
//! | 4 | `n` layers, `u32` |
//! | 8 | score, `f64` |
//!
//! followed by `u0 · v0` row-major `f32` values.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};

use crate::error::{GamError, Result};
use crate::saliency::{Method, SaliencyMap};

pub const SMAP_MAGIC: &[u8; 4] = b"SMAP";
pub const SMAP_VERSION: u16 = 1;
pub const SMAP_HEADER_LEN: usize = 28;

fn method_code(m: Method) -> u8 {
    match m {
        Method::Gam => 0,
        Method::Gc => 1,
        Method::Gcpp => 2,
    }
}

pub fn encode_smap(map: &SaliencyMap, score: f64) -> Vec<u8> {
    let (u0, v0) = map.shape();
    let mut out = Vec::with_capacity(SMAP_HEADER_LEN + 4 * u0 * v0);
    out.extend_from_slice(SMAP_MAGIC);
    out.extend_from_slice(&SMAP_VERSION.to_le_bytes());
    out.push(method_code(map.method));
    out.push(u8::from(map.degenerate));
    out.extend_from_slice(&(u0 as u32).to_le_bytes());
    out.extend_from_slice(&(v0 as u32).to_le_bytes());
    out.extend_from_slice(&(map.n_layers as u32).to_le_bytes());
    out.extend_from_slice(&score.to_le_bytes());
    for &v in map.grid.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn bad(reason: impl Into<String>) -> GamError {
    GamError::Format {
        format: "SMAP",
        reason: reason.into(),
    }
}

/// Decodes a `SMAP/1` buffer into the map (at `f32` precision) and its score.
pub fn decode_smap(bytes: &[u8]) -> Result<(SaliencyMap, f64)> {
    if bytes.len() < SMAP_HEADER_LEN || &bytes[..4] != SMAP_MAGIC {
        return Err(bad("missing SMAP header"));
    }
    let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes")) as usize;
    let version = u16_at(4);
    if version != SMAP_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let method = match bytes[6] {
        0 => Method::Gam,
        1 => Method::Gc,
        2 => Method::Gcpp,
        other => return Err(bad(format!("unknown method code {other}"))),
    };
    let degenerate = match bytes[7] {
        0 => false,
        1 => true,
        other => return Err(bad(format!("invalid degenerate flag {other}"))),
    };
    let (u0, v0, n) = (u32_at(8), u32_at(12), u32_at(16));
    let score = f64::from_le_bytes(bytes[20..28].try_into().expect("eight bytes"));
    let body = &bytes[SMAP_HEADER_LEN..];
    if body.len() != 4 * u0 * v0 {
        return Err(bad(format!("expected {} body bytes, found {}", 4 * u0 * v0, body.len())));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("four bytes"))))
        .collect();
    let grid = Array2::from_shape_vec((u0, v0), values).map_err(|e| bad(e.to_string()))?;
    Ok((
        SaliencyMap {
            grid,
            method,
            n_layers: n,
            degenerate,
        },
        score,
    ))
}

pub fn write_smap(path: &Path, map: &SaliencyMap, score: f64) -> Result<()> {
    std::fs::write(path, encode_smap(map, score)).map_err(|e| GamError::io(path, e))
}

pub fn read_smap(path: &Path) -> Result<(SaliencyMap, f64)> {
    decode_smap(&std::fs::read(path).map_err(|e| GamError::io(path, e))?)
}

/// Perceptually uniform colormaps.
pub const COLORMAPS: &[&str] = &["viridis", "magma", "inferno", "plasma", "cividis"];

pub fn colormap(name: &str) -> Result<colorous::Gradient> {
    Ok(match name {
        "viridis" => colorous::VIRIDIS,
        "magma" => colorous::MAGMA,
        "inferno" => colorous::INFERNO,
        "plasma" => colorous::PLASMA,
        "cividis" => colorous::CIVIDIS,
        other => {
            return Err(GamError::Config(format!(
                "unknown colormap `{other}` (known: {})",
                COLORMAPS.join(", ")
            )))
        }
    })
}

/// Blends `image` (channels × rows × cols in `[0, 1]`, one or three channels)
/// with the colour-mapped saliency at opacity `alpha`.
pub fn overlay(image: &Array3<f64>, map: &SaliencyMap, alpha: f64, colormap_name: &str) -> Result<RgbImage> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(GamError::InvalidValue(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    let (c, h, w) = image.dim();
    if (h, w) != map.shape() {
        return Err(GamError::Shape(format!("image is {:?}, map is {:?}", (h, w), map.shape())));
    }
    if c != 1 && c != 3 {
        return Err(GamError::Shape(format!("cannot display a {c}-channel image")));
    }
    let gradient = colormap(colormap_name)?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (r, k) = (y as usize, x as usize);
        let colour = gradient.eval_continuous(map.grid[(r, k)].clamp(0.0, 1.0));
        let heat = [colour.r, colour.g, colour.b];
        Rgb(std::array::from_fn(|i| {
            let base = image[(if c == 1 { 0 } else { i }, r, k)].clamp(0.0, 1.0) * 255.0;
            ((1.0 - alpha) * base + alpha * f64::from(heat[i])).round() as u8
        }))
    }))
}

/// Places `panels` left to right with a `gap`-pixel white separator.
pub fn side_by_side(panels: &[RgbImage], gap: u32) -> RgbImage {
    let width = panels.iter().map(|p| p.width()).sum::<u32>() + gap * panels.len().saturating_sub(1) as u32;
    let height = panels.iter().map(|p| p.height()).max().unwrap_or(0);
    let mut out = RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]));
    let mut x0 = 0;
    for p in panels {
        image::imageops::replace(&mut out, p, i64::from(x0), 0);
        x0 += p.width() + gap;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> SaliencyMap {
        SaliencyMap {
            grid: array![[0.0, 0.25, 1.0], [0.5, 0.75, 0.125]],
            method: Method::Gcpp,
            n_layers: 2,
            degenerate: false,
        }
    }

    #[test]
    fn smap_header_layout() {
        let bytes = encode_smap(&sample(), 3.5);
        assert_eq!(bytes.len(), SMAP_HEADER_LEN + 6 * 4);
        assert_eq!(&bytes[..4], b"SMAP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 2);
        assert_eq!(bytes[7], 0);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[3, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[2, 0, 0, 0]);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 3.5);
        assert_eq!(f32::from_le_bytes(bytes[28 + 8..28 + 12].try_into().unwrap()), 1.0);
    }

    #[test]
    fn smap_round_trip_and_rejects() {
        let bytes = encode_smap(&sample(), -1.25);
        let (map, score) = decode_smap(&bytes).unwrap();
        assert_eq!(map, sample());
        assert_eq!(score, -1.25);
        assert!(decode_smap(&bytes[..30]).is_err());
        let mut wrong = bytes.clone();
        wrong[4] = 2;
        assert!(decode_smap(&wrong).is_err());
        wrong = bytes;
        wrong[0] = b'X';
        assert!(decode_smap(&wrong).is_err());
    }

    #[test]
    fn overlay_blends() {
        let img = Array3::from_elem((1, 2, 3), 0.5);
        let full = overlay(&img, &sample(), 1.0, "viridis").unwrap();
        let c = colorous::VIRIDIS.eval_continuous(1.0);
        assert_eq!(full.get_pixel(2, 0).0, [c.r, c.g, c.b]);
        let none = overlay(&img, &sample(), 0.0, "magma").unwrap();
        assert!(none.pixels().all(|p| p.0 == [128, 128, 128]));
        assert!(overlay(&img, &sample(), 1.5, "viridis").is_err());
        assert!(overlay(&img, &sample(), 0.5, "jet").is_err());
        let joined = side_by_side(&[full.clone(), none], 2);
        assert_eq!(joined.dimensions(), (8, 2));
    }
}
