//! The score `s` that every saliency method explains.
//!
//! One formulation covers both tasks: a class logit is `s(f_x, w_j)` against a
//! class weight vector, and a similarity is `s(f_x, f_y)` against the embedding
//! of a second image. Saliency is always taken with respect to this raw score,
//! never a softmax or sigmoid of it.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::backend::Embedding;
use crate::error::{GamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[serde(alias = "logit")]
    ClassLogit,
    Dot,
    Cosine,
}

impl std::str::FromStr for ScoreKind {
    type Err = GamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" | "class_logit" => Ok(ScoreKind::ClassLogit),
            "dot" => Ok(ScoreKind::Dot),
            "cosine" | "cos" => Ok(ScoreKind::Cosine),
            other => Err(GamError::InvalidScore(format!("unknown score kind `{other}`"))),
        }
    }
}

impl std::fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreKind::ClassLogit => "logit",
            ScoreKind::Dot => "dot",
            ScoreKind::Cosine => "cosine",
        })
    }
}

/// Explicit class weight vector `w_j` with its bias.
///
/// The bias shifts the reported score but has zero gradient with respect to
/// activations, so it never changes a saliency map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Array1<f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSpec {
    pub kind: ScoreKind,
    pub class_weights: Option<ClassWeights>,
    pub class_index: Option<usize>,
    pub reference: Option<Embedding>,
}

impl ScoreSpec {
    /// Logit of class `index`, resolved against the model's classifier head.
    pub fn class_index(index: usize) -> Self {
        ScoreSpec {
            kind: ScoreKind::ClassLogit,
            class_weights: None,
            class_index: Some(index),
            reference: None,
        }
    }

    pub fn class_weights(weights: Array1<f64>, bias: f64) -> Self {
        ScoreSpec {
            kind: ScoreKind::ClassLogit,
            class_weights: Some(ClassWeights { weights, bias }),
            class_index: None,
            reference: None,
        }
    }

    pub fn dot(reference: Embedding) -> Self {
        Self::similarity(ScoreKind::Dot, reference)
    }

    pub fn cosine(reference: Embedding) -> Self {
        Self::similarity(ScoreKind::Cosine, reference)
    }

    pub fn similarity(kind: ScoreKind, reference: Embedding) -> Self {
        ScoreSpec {
            kind,
            class_weights: None,
            class_index: None,
            reference: Some(reference),
        }
    }

    /// Checks the structural invariants; `dim` is the embedding length the
    /// score will be evaluated against.
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.kind {
            ScoreKind::ClassLogit => match (&self.class_weights, self.class_index) {
                (Some(w), None) => {
                    if w.weights.len() != dim {
                        return Err(GamError::InvalidScore(format!(
                            "class weights have length {}, embedding has {dim}",
                            w.weights.len()
                        )));
                    }
                    if !w.bias.is_finite() || w.weights.iter().any(|v| !v.is_finite()) {
                        return Err(GamError::InvalidScore("class weights not finite".into()));
                    }
                    Ok(())
                }
                (None, Some(_)) => Ok(()),
                _ => Err(GamError::InvalidScore(
                    "class logit needs exactly one of class weights or class index".into(),
                )),
            },
            ScoreKind::Dot | ScoreKind::Cosine => {
                let reference = self
                    .reference
                    .as_ref()
                    .ok_or_else(|| GamError::InvalidScore(format!("{} score needs a reference embedding", self.kind)))?;
                if reference.dim() != dim {
                    return Err(GamError::InvalidScore(format!(
                        "reference embedding has length {}, embedding has {dim}",
                        reference.dim()
                    )));
                }
                Ok(())
            }
        }
    }

    /// Replaces a class index by the matching row of a classifier head.
    pub fn resolve_class(&self, head_weights: &ndarray::Array2<f64>, head_bias: &Array1<f64>) -> Result<ScoreSpec> {
        match (self.kind, self.class_index) {
            (ScoreKind::ClassLogit, Some(j)) => {
                if j >= head_weights.nrows() {
                    return Err(GamError::UnknownClass(format!(
                        "index {j} outside {} classes",
                        head_weights.nrows()
                    )));
                }
                Ok(ScoreSpec::class_weights(head_weights.row(j).to_owned(), head_bias[j]))
            }
            _ => Ok(self.clone()),
        }
    }
}

/// Evaluates `s(f_x, ·)` for a resolved specification.
pub fn score(fx: &Embedding, spec: &ScoreSpec) -> Result<f64> {
    spec.validate(fx.dim())?;
    let value = match spec.kind {
        ScoreKind::ClassLogit => {
            let w = spec
                .class_weights
                .as_ref()
                .ok_or_else(|| GamError::InvalidScore("class index must be resolved against a model head first".into()))?;
            w.weights.dot(fx.as_array()) + w.bias
        }
        ScoreKind::Dot => fx.as_array().dot(reference(spec)?.as_array()),
        ScoreKind::Cosine => {
            let fy = reference(spec)?;
            let (nx, ny) = (fx.norm(), fy.norm());
            if nx == 0.0 || ny == 0.0 {
                return Err(GamError::DegenerateEmbedding("cosine score of a zero-norm embedding"));
            }
            fx.as_array().dot(fy.as_array()) / (nx * ny)
        }
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(GamError::NonFiniteScore(value))
    }
}

/// `∂s/∂f_x` via the chain rule through the score's primitive operations.
///
/// Cosine is differentiated as a dot product of the two unit vectors, with
/// the Jacobian of `f ↦ f/‖f‖` applied to the reference direction.
pub fn score_gradient(fx: &Embedding, spec: &ScoreSpec) -> Result<Array1<f64>> {
    spec.validate(fx.dim())?;
    match spec.kind {
        ScoreKind::ClassLogit => {
            let w = spec
                .class_weights
                .as_ref()
                .ok_or_else(|| GamError::InvalidScore("class index must be resolved against a model head first".into()))?;
            Ok(w.weights.clone())
        }
        ScoreKind::Dot => Ok(reference(spec)?.as_array().clone()),
        ScoreKind::Cosine => {
            let fy = reference(spec)?;
            let (nx, ny) = (fx.norm(), fy.norm());
            if nx == 0.0 || ny == 0.0 {
                return Err(GamError::DegenerateEmbedding("cosine score of a zero-norm embedding"));
            }
            let u = fx.as_array() / nx;
            let v = fy.as_array() / ny;
            let along = u.dot(&v);
            // (I - u u^T) v / ‖f_x‖
            Ok((&v - &(&u * along)) / nx)
        }
    }
}

/// Closed form of the cosine gradient:
/// `f_y/(‖f_x‖‖f_y‖) − s(f_x,f_y)·f_x/‖f_x‖²`.
///
/// Both terms are entrywise non-negative for non-negative embeddings, so the
/// difference can carry negative entries even though `s ≥ 0`.
pub fn cosine_gradient_analytic(fx: &Embedding, fy: &Embedding) -> Result<Array1<f64>> {
    if fx.dim() != fy.dim() {
        return Err(GamError::Shape(format!("embedding lengths {} and {}", fx.dim(), fy.dim())));
    }
    let (nx, ny) = (fx.norm(), fy.norm());
    if nx == 0.0 || ny == 0.0 {
        return Err(GamError::DegenerateEmbedding("cosine gradient of a zero-norm embedding"));
    }
    let s = fx.as_array().dot(fy.as_array()) / (nx * ny);
    let first = fy.as_array() / (nx * ny);
    let second = fx.as_array() * (s / (nx * nx));
    Ok(first - second)
}

/// Numerically stable softmax, used for classification confidences.
pub fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = logits.mapv(|v| (v - max).exp());
    let total = exp.sum();
    exp / total
}

fn reference(spec: &ScoreSpec) -> Result<&Embedding> {
    spec.reference
        .as_ref()
        .ok_or_else(|| GamError::InvalidScore("missing reference embedding".into()))
}
