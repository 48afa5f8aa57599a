//! Objective evaluation: average drop (ADP), increase in confidence (PIC),
//! IoU localisation with held-out thresholds and small-object subsets.

mod eval;
mod region;

use serde::{Deserialize, Serialize};

use crate::backend::ImageTensor;
use crate::error::{GamError, Result};
use crate::saliency::SaliencyMap;

pub use eval::{
    evaluate, evaluate_run, improvement, sample_pairs, EvalConfig, EvalItem, EvalReport, Improvement, MetricKind, ReportRow, RunResult,
    SubsetMetrics, ThresholdMode,
};
pub use region::{
    bbox_from_mask, binarize, iou, localization_iou, percentile, predicted_region, select_threshold, small_object_indices,
    small_object_subset, BBox, BinarizationConfig, GroundTruthRegion, RegionRule, THRESHOLD_GRID,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Similarity,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Similarity => "similarity",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = GamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "similarity" => Ok(Task::Similarity),
            other => Err(GamError::Config(format!("unknown task `{other}`"))),
        }
    }
}

/// Confidence on the original image (`y`) and on its explanation map (`o`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub id: String,
    pub y: f64,
    pub o: f64,
    pub task: Task,
}

fn check_records(records: &[EvalRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(GamError::EmptyInput("evaluation records"));
    }
    if let Some(r) = records.iter().find(|r| !r.y.is_finite() || !r.o.is_finite()) {
        return Err(GamError::InvalidRecord {
            id: r.id.clone(),
            reason: "confidence is not finite".into(),
        });
    }
    Ok(())
}

/// `ADP = (100/N) Σ max(0, Y − O) / Y`. Lower is better.
pub fn adp(records: &[EvalRecord]) -> Result<f64> {
    check_records(records)?;
    if let Some(r) = records.iter().find(|r| r.y <= 0.0) {
        return Err(GamError::InvalidRecord {
            id: r.id.clone(),
            reason: format!("original confidence {} is not positive", r.y),
        });
    }
    let total: f64 = records.iter().map(|r| (r.y - r.o).max(0.0) / r.y).sum();
    Ok(100.0 * total / records.len() as f64)
}

/// `PIC = (100/N) Σ 1(Y < O)`. Higher is better.
pub fn pic(records: &[EvalRecord]) -> Result<f64> {
    check_records(records)?;
    let hits = records.iter().filter(|r| r.y < r.o).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// `x ∘ m` applied to every channel.
pub fn explanation_map(x: &ImageTensor, m: &SaliencyMap) -> Result<ImageTensor> {
    if x.spatial() != m.shape() {
        return Err(GamError::Shape(format!("image is {:?}, map is {:?}", x.spatial(), m.shape())));
    }
    let mut data = x.data().clone();
    for mut channel in data.outer_iter_mut() {
        channel *= &m.grid;
    }
    ImageTensor::new(data, x.range())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::PixelRange;
    use crate::saliency::Method;
    use ndarray::{Array2, Array3};

    fn records(y: &[f64], o: &[f64]) -> Vec<EvalRecord> {
        y.iter()
            .zip(o)
            .enumerate()
            .map(|(i, (&y, &o))| EvalRecord {
                id: i.to_string(),
                y,
                o,
                task: Task::Classification,
            })
            .collect()
    }

    #[test]
    fn adp_fixtures() {
        assert_eq!(adp(&records(&[10.0], &[5.0])).unwrap(), 50.0);
        assert_eq!(adp(&records(&[1.0, 2.0], &[1.5, 2.0])).unwrap(), 0.0);
        assert_eq!(adp(&records(&[10.0, 20.0], &[5.0, 30.0])).unwrap(), 25.0);
        assert!(matches!(adp(&records(&[0.0], &[1.0])), Err(GamError::InvalidRecord { .. })));
        assert!(matches!(adp(&records(&[-1.0], &[1.0])), Err(GamError::InvalidRecord { .. })));
        assert!(matches!(adp(&[]), Err(GamError::EmptyInput(_))));
    }

    #[test]
    fn pic_fixtures() {
        assert_eq!(pic(&records(&[1.0, 2.0], &[1.5, 2.5])).unwrap(), 100.0);
        assert_eq!(pic(&records(&[1.0, 2.0], &[1.0, 2.0])).unwrap(), 0.0);
        assert_eq!(pic(&records(&[1.0; 4], &[2.0, 0.0, 3.0, 1.0])).unwrap(), 50.0);
    }

    fn map(grid: Array2<f64>) -> SaliencyMap {
        SaliencyMap {
            grid,
            method: Method::Gam,
            n_layers: 1,
            degenerate: false,
        }
    }

    #[test]
    fn explanation_map_cases() {
        let x = ImageTensor::new(
            Array3::from_shape_fn((2, 3, 4), |(c, r, k)| (c * 12 + r * 4 + k) as f64 + 1.0),
            PixelRange::Raw,
        )
        .unwrap();
        assert_eq!(explanation_map(&x, &map(Array2::ones((3, 4)))).unwrap(), x);
        assert!(explanation_map(&x, &map(Array2::zeros((3, 4))))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let half = Array2::from_shape_fn((3, 4), |(_, k)| if k < 2 { 1.0 } else { 0.0 });
        let out = explanation_map(&x, &map(half)).unwrap();
        for ((_, _, k), &v) in out.data().indexed_iter() {
            assert_eq!(v == 0.0, k >= 2);
        }
        assert!(matches!(explanation_map(&x, &map(Array2::ones((4, 3)))), Err(GamError::Shape(_))));
    }
}
