//! Activation and gradient capture.
//!
//! [`CaptureBackend`] is the contract a differentiation engine has to meet:
//! enumerate the eligible block outputs, record their activations `h^l_x`,
//! and return the exact gradients `g^l_x = ∂s/∂h^l_x` of a score. The bundled
//! engine is [`Network`], a small 64-bit CNN with hand-written reverse mode.
//! [`finite_difference_oracle`] re-runs the network suffix from a layer and is
//! independent of the reverse-mode path.

pub mod arch;
mod network;
mod ops;
pub mod train;

use ndarray::{Array1, Array3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::scoring::ScoreSpec;

pub(crate) use network::argmax;
pub use network::{Block, EmbeddingPoint, Linear, Network, Pooling, SpatialOp, Trace};
pub use ops::{Conv2d, DenseUnit};
pub use train::{accuracy, train, TrainConfig, TrainReport};

/// How the pixel values of an [`ImageTensor`] were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelRange {
    /// Values as decoded from the file.
    Raw,
    /// Values after the model's preprocessing.
    Normalized,
}

/// An input image `x` laid out as channels × height × width.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
    range: PixelRange,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>, range: PixelRange) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(GamError::Shape(format!("image has an empty axis: {c}x{h}x{w}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GamError::InvalidValue("image contains non-finite values".into()));
        }
        Ok(ImageTensor { data, range })
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn range(&self) -> PixelRange {
        self.range
    }

    pub fn shape(&self) -> [usize; 3] {
        let (c, h, w) = self.data.dim();
        [c, h, w]
    }

    /// Spatial size `(u0, v0)`.
    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// A block output eligible for saliency. `index` runs from 1 to `L`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub index: usize,
    pub name: String,
}

impl std::fmt::Display for LayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}#{}", self.name, self.index)
    }
}

/// The representation `f_x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Array1<f64>", into = "Array1<f64>")]
pub struct Embedding(Array1<f64>);

impl Embedding {
    pub fn new(vector: Array1<f64>) -> Result<Self> {
        if vector.is_empty() {
            return Err(GamError::EmptyInput("embedding"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(GamError::InvalidValue("embedding contains non-finite values".into()));
        }
        Ok(Embedding(vector))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_array(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.dot(&self.0).sqrt()
    }
}

impl TryFrom<Array1<f64>> for Embedding {
    type Error = GamError;

    fn try_from(value: Array1<f64>) -> Result<Self> {
        Embedding::new(value)
    }
}

impl From<Embedding> for Array1<f64> {
    fn from(value: Embedding) -> Self {
        value.0
    }
}

/// Per-layer grids keyed by [`LayerId`], sorted by ascending index.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    entries: Vec<(LayerId, Array3<f64>)>,
}

/// Activations `h^l_x`.
pub type ActivationStack = LayerStack;
/// Gradients `g^l_x`, shaped like the matching activations.
pub type GradientStack = LayerStack;

impl LayerStack {
    pub fn new(mut entries: Vec<(LayerId, Array3<f64>)>) -> Result<Self> {
        entries.sort_by_key(|(id, _)| id.index);
        if entries.windows(2).any(|w| w[0].0.index == w[1].0.index) {
            return Err(GamError::InvalidValue("duplicate layer in stack".into()));
        }
        for (id, grid) in &entries {
            if grid.iter().any(|v| !v.is_finite()) {
                return Err(GamError::NonFiniteGradient(id.to_string()));
            }
        }
        Ok(LayerStack { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LayerId, &Array3<f64>)> {
        self.entries.iter().map(|(id, g)| (id, g))
    }

    pub fn get(&self, layer: &LayerId) -> Option<&Array3<f64>> {
        self.entries.iter().find(|(id, _)| id == layer).map(|(_, g)| g)
    }

    pub fn layers(&self) -> Vec<LayerId> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }

    /// True when every grid has the same shape as its counterpart in `other`.
    pub fn shapes_match(&self, other: &LayerStack) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((a, ga), (b, gb))| a == b && ga.dim() == gb.dim())
    }
}

/// Everything one forward/backward pass produces for a single score.
#[derive(Clone, Debug)]
pub struct Capture {
    pub activations: ActivationStack,
    pub gradients: GradientStack,
    pub embedding: Embedding,
    pub score: f64,
}

/// A score evaluated from a block output onward, plus the on/off pattern of
/// every piecewise-linear unit it passed through.
#[derive(Clone, Debug, PartialEq)]
pub struct SuffixEval {
    pub score: f64,
    pub pattern: Vec<u32>,
}

pub trait CaptureBackend {
    /// Expected `[c0, u0, v0]` of the input.
    fn input_shape(&self) -> [usize; 3];

    /// Length `d` of the embedding `f_x`.
    fn embedding_dim(&self) -> usize;

    /// Eligible block outputs in network order; the last one is layer `L`.
    fn list_layers(&self) -> Result<Vec<LayerId>>;

    /// Declares whether the given block ends in a ReLU.
    fn relu_terminated(&self, layer: &LayerId) -> bool;

    fn forward_capture(&self, x: &ImageTensor, layers: &[LayerId]) -> Result<(ActivationStack, Embedding)>;

    fn backward_capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<GradientStack> {
        Ok(self.capture(x, score, layers)?.gradients)
    }

    /// Activations, gradients and score from a single pass.
    fn capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<Capture>;

    /// Re-runs only the part of the network after `layer`, fed with `h`.
    fn score_from_layer(&self, layer: &LayerId, h: &Array3<f64>, score: &ScoreSpec) -> Result<SuffixEval>;

    /// Softmax class probabilities, or `None` for models without a classifier.
    fn class_probabilities(&self, _x: &ImageTensor) -> Result<Option<Array1<f64>>> {
        Ok(None)
    }
}

/// One central-difference probe of `∂s/∂h` at `(channel, row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FdProbe {
    pub position: (usize, usize, usize),
    pub estimate: f64,
    /// True when no downstream ReLU or max-pool switched state within `±step`,
    /// which makes the central difference exact up to rounding.
    pub kink_free: bool,
}

/// Samples `probe_count` distinct entries of layer `layer` and estimates the
/// gradient of `score` there by central differences of the network suffix.
pub fn finite_difference_oracle<B: CaptureBackend + ?Sized>(
    model: &B,
    x: &ImageTensor,
    score: &ScoreSpec,
    layer: &LayerId,
    probe_count: usize,
    step: f64,
    seed: u64,
) -> Result<Vec<FdProbe>> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GamError::InvalidValue(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    if probe_count == 0 {
        return Err(GamError::InvalidValue("probe count must be positive".into()));
    }
    if !model.list_layers()?.contains(layer) {
        return Err(GamError::UnknownLayer(layer.to_string()));
    }
    let (acts, _) = model.forward_capture(x, std::slice::from_ref(layer))?;
    let base = acts.get(layer).ok_or_else(|| GamError::UnknownLayer(layer.to_string()))?;
    let (c, h, w) = base.dim();
    let total = c * h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flat: Vec<usize> = sample(&mut rng, total, probe_count.min(total)).into_vec();
    flat.sort_unstable();

    let centre = model.score_from_layer(layer, base, score)?;
    flat.into_iter()
        .map(|idx| {
            let position = (idx / (h * w), (idx / w) % h, idx % w);
            let mut probe = base.clone();
            probe[position] = base[position] + step;
            let plus = model.score_from_layer(layer, &probe, score)?;
            probe[position] = base[position] - step;
            let minus = model.score_from_layer(layer, &probe, score)?;
            Ok(FdProbe {
                position,
                estimate: (plus.score - minus.score) / (2.0 * step),
                kink_free: plus.pattern == centre.pattern && minus.pattern == centre.pattern,
            })
        })
        .collect()
}

/// Restricts the eligible layers of `inner` to the named blocks.
#[derive(Clone, Debug)]
pub struct LayerFilter<B> {
    inner: B,
    names: Vec<String>,
}

impl<B: CaptureBackend> LayerFilter<B> {
    pub fn new(inner: B, names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(GamError::Config("block list is empty".into()));
        }
        let known = inner.list_layers()?;
        if let Some(missing) = names.iter().find(|n| !known.iter().any(|l| &l.name == *n)) {
            return Err(GamError::UnknownLayer(missing.clone()));
        }
        Ok(LayerFilter { inner, names })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: CaptureBackend> CaptureBackend for LayerFilter<B> {
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    fn embedding_dim(&self) -> usize {
        self.inner.embedding_dim()
    }

    fn list_layers(&self) -> Result<Vec<LayerId>> {
        Ok(self
            .inner
            .list_layers()?
            .into_iter()
            .filter(|l| self.names.contains(&l.name))
            .collect())
    }

    fn relu_terminated(&self, layer: &LayerId) -> bool {
        self.inner.relu_terminated(layer)
    }

    fn forward_capture(&self, x: &ImageTensor, layers: &[LayerId]) -> Result<(ActivationStack, Embedding)> {
        self.inner.forward_capture(x, layers)
    }

    fn backward_capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<GradientStack> {
        self.inner.backward_capture(x, score, layers)
    }

    fn capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<Capture> {
        self.inner.capture(x, score, layers)
    }

    fn score_from_layer(&self, layer: &LayerId, h: &Array3<f64>, score: &ScoreSpec) -> Result<SuffixEval> {
        self.inner.score_from_layer(layer, h, score)
    }

    fn class_probabilities(&self, x: &ImageTensor) -> Result<Option<Array1<f64>>> {
        self.inner.class_probabilities(x)
    }
}

impl<B: CaptureBackend + ?Sized> CaptureBackend for &B {
    fn input_shape(&self) -> [usize; 3] {
        (**self).input_shape()
    }

    fn embedding_dim(&self) -> usize {
        (**self).embedding_dim()
    }

    fn list_layers(&self) -> Result<Vec<LayerId>> {
        (**self).list_layers()
    }

    fn relu_terminated(&self, layer: &LayerId) -> bool {
        (**self).relu_terminated(layer)
    }

    fn forward_capture(&self, x: &ImageTensor, layers: &[LayerId]) -> Result<(ActivationStack, Embedding)> {
        (**self).forward_capture(x, layers)
    }

    fn backward_capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<GradientStack> {
        (**self).backward_capture(x, score, layers)
    }

    fn capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<Capture> {
        (**self).capture(x, score, layers)
    }

    fn score_from_layer(&self, layer: &LayerId, h: &Array3<f64>, score: &ScoreSpec) -> Result<SuffixEval> {
        (**self).score_from_layer(layer, h, score)
    }

    fn class_probabilities(&self, x: &ImageTensor) -> Result<Option<Array1<f64>>> {
        (**self).class_probabilities(x)
    }
}
