//! Saliency maps for visual classification and similarity models.
//!
//! `gamkit` computes Gradient Activation Maps (GAM) together with the
//! Grad-CAM and Grad-CAM++ baselines over one score formulation: a class logit
//! `s(f_x, w_j)` or a similarity `s(f_x, f_y)` between two embeddings. Around
//! the maps it provides the usual evaluation machinery (average drop, increase
//! in confidence, IoU localisation with held-out thresholds) and the
//! parameter- and data-randomisation sanity checks.
//!
//! The bundled backend is a small 64-bit CNN engine with exact reverse-mode
//! gradients; any engine implementing [`backend::CaptureBackend`] can be
//! plugged in instead.

pub mod artifact;
pub mod backend;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod saliency;
pub mod sanity;
pub mod scoring;

pub use error::{GamError, Result};
