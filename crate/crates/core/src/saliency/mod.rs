//! Gradient Activation Maps and the Grad-CAM / Grad-CAM++ baselines.
//!
//! Every method turns one layer's activations `h` and gradients `g` into a
//! `u0 × v0` map in `[0, 1]`. Multi-layer maps average the per-layer maps of
//! the last `n` layers.

mod grid;
mod methods;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backend::{CaptureBackend, ImageTensor, LayerId};
use crate::error::{GamError, Result};
use crate::scoring::ScoreSpec;

pub use grid::{normalize_minmax, relu_clamp, resize_bicubic};
pub use methods::{gam_aggregate, gam_layer_map, grad_cam, grad_campp, GcppCoefficients, GradDecomposition};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gam,
    Gc,
    Gcpp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gam, Method::Gc, Method::Gcpp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gam => "gam",
            Method::Gc => "gc",
            Method::Gcpp => "gcpp",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = GamError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gam" => Ok(Method::Gam),
            "gc" | "gradcam" | "grad-cam" => Ok(Method::Gc),
            "gcpp" | "gc++" | "gradcam++" | "grad-cam++" => Ok(Method::Gcpp),
            other => Err(GamError::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// A `u0 × v0` saliency grid with values in `[0, 1]`.
///
/// Single-layer maps that are not degenerate attain exactly 0 and 1.
/// Aggregated maps are plain means and need not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub grid: Array2<f64>,
    pub method: Method,
    pub n_layers: usize,
    pub degenerate: bool,
}

impl SaliencyMap {
    pub fn shape(&self) -> (usize, usize) {
        self.grid.dim()
    }

    pub(crate) fn from_raw(raw: &Array2<f64>, target: (usize, usize), method: Method) -> Self {
        let (grid, degenerate) = normalize_minmax(&resize_bicubic(raw, target));
        SaliencyMap {
            grid,
            method,
            n_layers: 1,
            degenerate,
        }
    }
}

/// Result of [`explain_detailed`]: the final map plus what produced it.
#[derive(Clone, Debug)]
pub struct Explanation {
    pub map: SaliencyMap,
    pub layer_maps: Vec<SaliencyMap>,
    pub layers: Vec<LayerId>,
    pub score: f64,
    /// Grad-CAM++ only: `exp(s)` is not representable in 64 bits.
    pub overflow: bool,
}

/// The last `n` eligible layers of `model`.
pub fn last_layers<B: CaptureBackend + ?Sized>(model: &B, n: usize) -> Result<Vec<LayerId>> {
    let layers = model.list_layers()?;
    if n == 0 || n > layers.len() {
        return Err(GamError::Config(format!("n must be in 1..={}, got {n}", layers.len())));
    }
    Ok(layers[layers.len() - n..].to_vec())
}

pub fn explain<B: CaptureBackend + ?Sized>(model: &B, x: &ImageTensor, score: &ScoreSpec, method: Method, n: usize) -> Result<SaliencyMap> {
    Ok(explain_detailed(model, x, score, method, n)?.map)
}

/// Captures the last `n` layers, builds one map per layer with `method` and
/// averages them.
pub fn explain_detailed<B: CaptureBackend + ?Sized>(
    model: &B,
    x: &ImageTensor,
    score: &ScoreSpec,
    method: Method,
    n: usize,
) -> Result<Explanation> {
    let layers = last_layers(model, n)?;
    let capture = model.capture(x, score, &layers)?;
    let target = x.spatial();
    let mut overflow = false;
    let layer_maps = capture
        .activations
        .iter()
        .zip(capture.gradients.iter())
        .map(|((_, h), (_, g))| match method {
            Method::Gam => gam_layer_map(h, g, target),
            Method::Gc => grad_cam(h, g, target).map(|(m, _)| m),
            Method::Gcpp => grad_campp(h, g, capture.score, target).map(|(m, _, o)| {
                overflow |= o;
                m
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let map = gam_aggregate(&layer_maps)?;
    Ok(Explanation {
        map,
        layer_maps,
        layers,
        score: capture.score,
        overflow,
    })
}
