use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::saliency::SaliencyMap;

/// Axis-aligned box in pixel coordinates, `x` = column, `y` = row,
/// inclusive minimum and exclusive maximum.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn area(&self) -> usize {
        self.x_max.saturating_sub(self.x_min) * self.y_max.saturating_sub(self.y_min)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// A reference or predicted region on a `rows × cols` image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GroundTruthRegion {
    Bbox { shape: (usize, usize), bbox: BBox },
    Mask { mask: Array2<bool> },
}

impl GroundTruthRegion {
    pub fn bbox(shape: (usize, usize), bbox: BBox) -> Result<Self> {
        if bbox.x_min >= bbox.x_max || bbox.y_min >= bbox.y_max {
            return Err(GamError::InvalidValue(format!("box {:?} has no area", bbox.as_array())));
        }
        if bbox.y_max > shape.0 || bbox.x_max > shape.1 {
            return Err(GamError::InvalidValue(format!(
                "box {:?} exceeds a {}x{} image",
                bbox.as_array(),
                shape.0,
                shape.1
            )));
        }
        Ok(GroundTruthRegion::Bbox { shape, bbox })
    }

    pub fn mask(mask: Array2<bool>) -> Self {
        GroundTruthRegion::Mask { mask }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            GroundTruthRegion::Bbox { shape, .. } => *shape,
            GroundTruthRegion::Mask { mask } => mask.dim(),
        }
    }

    pub fn area(&self) -> usize {
        match self {
            GroundTruthRegion::Bbox { bbox, .. } => bbox.area(),
            GroundTruthRegion::Mask { mask } => mask.iter().filter(|&&b| b).count(),
        }
    }

    pub fn is_bbox(&self) -> bool {
        matches!(self, GroundTruthRegion::Bbox { .. })
    }

    pub fn rasterize(&self) -> Array2<bool> {
        match self {
            GroundTruthRegion::Bbox { shape, bbox } => Array2::from_shape_fn(*shape, |(r, c)| {
                (bbox.y_min..bbox.y_max).contains(&r) && (bbox.x_min..bbox.x_max).contains(&c)
            }),
            GroundTruthRegion::Mask { mask } => mask.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRule {
    /// Keep only the largest 4-connected component.
    #[default]
    LargestComponent,
    AllPixels,
}

impl RegionRule {
    /// Largest component for box ground truth, every pixel for masks.
    pub fn for_region(region: &GroundTruthRegion) -> Self {
        if region.is_bbox() {
            RegionRule::LargestComponent
        } else {
            RegionRule::AllPixels
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinarizationConfig {
    pub threshold: f64,
    pub region_rule: RegionRule,
}

impl BinarizationConfig {
    pub fn new(threshold: f64, region_rule: RegionRule) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(GamError::InvalidValue(format!("threshold must lie in [0, 1], got {threshold}")));
        }
        Ok(BinarizationConfig { threshold, region_rule })
    }
}

/// `{0.01, 0.02, …, 0.99}`.
pub const THRESHOLD_GRID: usize = 99;

fn grid_threshold(i: usize) -> f64 {
    i as f64 / 100.0
}

/// Pixels with `m ≥ θ`, optionally reduced to the largest 4-connected
/// component (the first one in raster order on ties).
pub fn binarize(m: &SaliencyMap, cfg: &BinarizationConfig) -> Array2<bool> {
    let mask = m.grid.mapv(|v| v >= cfg.threshold);
    match cfg.region_rule {
        RegionRule::AllPixels => mask,
        RegionRule::LargestComponent => largest_component(&mask),
    }
}

fn largest_component(mask: &Array2<bool>) -> Array2<bool> {
    let (rows, cols) = mask.dim();
    let mut label = Array2::<usize>::zeros((rows, cols));
    let mut best = (0usize, 0usize);
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..rows * cols {
        let (r0, c0) = (start / cols, start % cols);
        if !mask[(r0, c0)] || label[(r0, c0)] != 0 {
            continue;
        }
        next += 1;
        label[(r0, c0)] = next;
        stack.push((r0, c0));
        let mut size = 0;
        while let Some((r, c)) = stack.pop() {
            size += 1;
            let neighbours = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in neighbours {
                if nr < rows && nc < cols && mask[(nr, nc)] && label[(nr, nc)] == 0 {
                    label[(nr, nc)] = next;
                    stack.push((nr, nc));
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    label.mapv(|l| l != 0 && l == best.0)
}

/// Tightest box around the set pixels.
pub fn bbox_from_mask(mask: &Array2<bool>) -> Option<BBox> {
    let mut found: Option<BBox> = None;
    for ((r, c), _) in mask.indexed_iter().filter(|(_, &b)| b) {
        let b = found.get_or_insert(BBox::new(c, r, c + 1, r + 1));
        b.x_min = b.x_min.min(c);
        b.y_min = b.y_min.min(r);
        b.x_max = b.x_max.max(c + 1);
        b.y_max = b.y_max.max(r + 1);
    }
    found
}

/// `|a ∩ b| / |a ∪ b|`, zero when both are empty.
pub fn iou(a: &GroundTruthRegion, b: &GroundTruthRegion) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(GamError::Shape(format!("regions on {:?} and {:?} images", a.shape(), b.shape())));
    }
    let (ma, mb) = (a.rasterize(), b.rasterize());
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in ma.iter().zip(mb.iter()) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

/// The region a map predicts against `truth`: the box around the binarized
/// mask for box ground truth, the mask itself otherwise. `None` when
/// nothing survives binarization.
pub fn predicted_region(m: &SaliencyMap, cfg: &BinarizationConfig, truth: &GroundTruthRegion) -> Option<GroundTruthRegion> {
    let mask = binarize(m, cfg);
    match truth {
        GroundTruthRegion::Bbox { shape, .. } => bbox_from_mask(&mask).map(|bbox| GroundTruthRegion::Bbox { shape: *shape, bbox }),
        GroundTruthRegion::Mask { .. } => mask.iter().any(|&b| b).then_some(GroundTruthRegion::Mask { mask }),
    }
}

/// IoU of the region predicted by `m` with `truth`; an empty prediction
/// scores 0.
pub fn localization_iou(m: &SaliencyMap, truth: &GroundTruthRegion, cfg: &BinarizationConfig) -> Result<f64> {
    if m.shape() != truth.shape() {
        return Err(GamError::Shape(format!(
            "map is {:?}, ground truth is {:?}",
            m.shape(),
            truth.shape()
        )));
    }
    match predicted_region(m, cfg, truth) {
        Some(pred) => iou(&pred, truth),
        None => Ok(0.0),
    }
}

/// Grid search over `θ ∈ {0.01, …, 0.99}` for the best mean holdout IoU.
/// Ties go to the smaller threshold.
pub fn select_threshold(holdout: &[(SaliencyMap, GroundTruthRegion)], rule: RegionRule) -> Result<BinarizationConfig> {
    if holdout.is_empty() {
        return Err(GamError::EmptyInput("threshold holdout"));
    }
    let mut best: Option<(f64, f64)> = None;
    for i in 1..=THRESHOLD_GRID {
        let cfg = BinarizationConfig {
            threshold: grid_threshold(i),
            region_rule: rule,
        };
        let mut total = 0.0;
        for (m, truth) in holdout {
            total += localization_iou(m, truth, &cfg)?;
        }
        let mean = total / holdout.len() as f64;
        if best.is_none_or(|(_, b)| mean > b) {
            best = Some((cfg.threshold, mean));
        }
    }
    let (threshold, _) = best.expect("non-empty grid");
    Ok(BinarizationConfig {
        threshold,
        region_rule: rule,
    })
}

/// Linearly interpolated percentile (`p` in percent) of `values`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(GamError::EmptyInput("percentile sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(GamError::InvalidValue(format!("percentile must lie in [0, 100], got {p}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Indices whose area lies strictly below the `p`-th percentile of `areas`.
pub fn small_object_indices(areas: &[f64], p: f64) -> Result<Vec<usize>> {
    if areas.is_empty() {
        return Err(GamError::EmptyInput("dataset"));
    }
    if !(p > 0.0 && p < 100.0) {
        return Err(GamError::InvalidValue(format!("percentile must lie in (0, 100), got {p}")));
    }
    let cut = percentile(areas, p)?;
    Ok((0..areas.len()).filter(|&i| areas[i] < cut).collect())
}

/// Items whose ground-truth area lies strictly below the `p`-th percentile of
/// all areas in `dataset`.
pub fn small_object_subset<T: Clone>(dataset: &[(T, GroundTruthRegion)], p: f64) -> Result<Vec<(T, GroundTruthRegion)>> {
    let areas: Vec<f64> = dataset.iter().map(|(_, r)| r.area() as f64).collect();
    Ok(small_object_indices(&areas, p)?.into_iter().map(|i| dataset[i].clone()).collect())
}
