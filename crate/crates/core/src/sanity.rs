//! Parameter- and data-randomisation sanity checks.
//!
//! A method passes when its maps are stable across repeated runs on the same
//! model (`self_similarity > τ_self`) and change substantially once weights
//! or training labels are randomised (`cross_similarity < τ_cross`).
//! Similarity is the Spearman rank correlation of the flattened maps.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{arch, argmax, train, CaptureBackend, ImageTensor, Network, TrainConfig, TrainReport};
use crate::error::{GamError, Result};
use crate::saliency::{explain, Method, SaliencyMap};
use crate::scoring::ScoreSpec;

pub const MIN_IMAGES: usize = 20;
pub const MEMORIZATION_ACCURACY: f64 = 95.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityThresholds {
    pub tau_self: f64,
    pub tau_cross: f64,
}

impl Default for SanityThresholds {
    fn default() -> Self {
        SanityThresholds {
            tau_self: 0.99,
            tau_cross: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SanityTest {
    ParameterRandomization,
    DataRandomization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    pub test: SanityTest,
    pub method: Method,
    pub n: usize,
    pub images: usize,
    pub self_similarity: f64,
    pub cross_similarity: f64,
    pub pass: bool,
    pub thresholds: SanityThresholds,
    /// Per-image correlation between the intact and randomised maps.
    pub cross_per_image: Vec<f64>,
    /// Training summaries of the two models (data randomisation only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub training: Vec<TrainReport>,
}

impl SanityReport {
    fn new(test: SanityTest, method: Method, n: usize, self_per_image: &[f64], cross: Vec<f64>, thresholds: SanityThresholds) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let self_similarity = mean(self_per_image);
        let cross_similarity = mean(&cross);
        SanityReport {
            test,
            method,
            n,
            images: cross.len(),
            self_similarity,
            cross_similarity,
            pass: self_similarity > thresholds.tau_self && cross_similarity < thresholds.tau_cross,
            thresholds,
            cross_per_image: cross,
            training: Vec::new(),
        }
    }
}

/// Ranks starting at 1, ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    (cov / (va * vb).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation over all pixels. A degenerate map has no
/// ordering and correlates 0 with anything.
pub fn map_rank_correlation(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(GamError::Shape(format!("maps are {:?} and {:?}", a.shape(), b.shape())));
    }
    if a.degenerate || b.degenerate {
        return Ok(0.0);
    }
    let ra = average_ranks(&a.grid.iter().copied().collect::<Vec<_>>());
    let rb = average_ranks(&b.grid.iter().copied().collect::<Vec<_>>());
    Ok(pearson(&ra, &rb))
}

/// One class-logit score per image: the class `model` predicts.
pub fn predicted_class_scores(model: &Network, images: &[ImageTensor]) -> Result<Vec<ScoreSpec>> {
    images
        .par_iter()
        .map(|x| {
            let p = model
                .class_probabilities(x)?
                .ok_or_else(|| GamError::UnsupportedModel("sanity tests need a classifier head".into()))?;
            Ok(ScoreSpec::class_index(argmax(&p)))
        })
        .collect()
}

fn maps<B: CaptureBackend + Sync + ?Sized>(
    model: &B,
    images: &[ImageTensor],
    scores: &[ScoreSpec],
    method: Method,
    n: usize,
) -> Result<Vec<SaliencyMap>> {
    images
        .par_iter()
        .zip(scores)
        .map(|(x, s)| explain(model, x, s, method, n))
        .collect()
}

fn correlations(a: &[SaliencyMap], b: &[SaliencyMap]) -> Result<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| map_rank_correlation(x, y)).collect()
}

fn check_inputs(images: &[ImageTensor], scores: &[ScoreSpec]) -> Result<()> {
    if images.len() < MIN_IMAGES {
        return Err(GamError::InvalidValue(format!(
            "sanity tests need at least {MIN_IMAGES} images, got {}",
            images.len()
        )));
    }
    if images.len() != scores.len() {
        return Err(GamError::Shape(format!("{} images but {} scores", images.len(), scores.len())));
    }
    Ok(())
}

/// Correlates maps of `intact` (twice, for the self-similarity control)
/// with maps of `other` on the same images and scores.
#[allow(clippy::too_many_arguments)]
pub fn compare_models<A, B>(
    test: SanityTest,
    intact: &A,
    other: &B,
    images: &[ImageTensor],
    scores: &[ScoreSpec],
    method: Method,
    n: usize,
    thresholds: SanityThresholds,
) -> Result<SanityReport>
where
    A: CaptureBackend + Sync + ?Sized,
    B: CaptureBackend + Sync + ?Sized,
{
    check_inputs(images, scores)?;
    let first = maps(intact, images, scores, method, n)?;
    let second = maps(intact, images, scores, method, n)?;
    let changed = maps(other, images, scores, method, n)?;
    Ok(SanityReport::new(
        test,
        method,
        n,
        &correlations(&first, &second)?,
        correlations(&first, &changed)?,
        thresholds,
    ))
}

/// `model` with every layer re-initialised from `seed`.
pub fn randomized_copy(model: &Network, seed: u64) -> Network {
    let mut randomized = model.clone();
    arch::reinitialize(&mut randomized, seed);
    randomized
}

/// Compares maps of `model` with maps of the same architecture after every
/// layer is re-initialised from `random_seed`.
pub fn parameter_randomization_test(
    model: &Network,
    images: &[ImageTensor],
    scores: &[ScoreSpec],
    method: Method,
    n: usize,
    random_seed: u64,
    thresholds: SanityThresholds,
) -> Result<SanityReport> {
    check_inputs(images, scores)?;
    let randomized = randomized_copy(model, random_seed);
    compare_models(
        SanityTest::ParameterRandomization,
        model,
        &randomized,
        images,
        scores,
        method,
        n,
        thresholds,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelPermutation {
    /// Control: the labels stay as they are.
    Identity,
    Random {
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataRandomizationConfig {
    pub arch: String,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub permutation: LabelPermutation,
}

/// Trains `config.arch` twice from the same initialisation, on the true
/// labels and on permuted labels. Both runs must memorise their training set.
pub fn train_label_pair(
    config: &DataRandomizationConfig,
    train_images: &[Array3<f64>],
    train_labels: &[usize],
) -> Result<(Network, Network, Vec<TrainReport>)> {
    let permuted = match config.permutation {
        LabelPermutation::Identity => train_labels.to_vec(),
        LabelPermutation::Random { seed } => {
            let mut p = train_labels.to_vec();
            p.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            p
        }
    };
    let cfg = TrainConfig {
        target_accuracy: Some(
            config
                .train
                .target_accuracy
                .unwrap_or(MEMORIZATION_ACCURACY)
                .max(MEMORIZATION_ACCURACY),
        ),
        require_target: true,
        ..config.train.clone()
    };
    let mut truth = arch::build(&config.arch, config.init_seed)?;
    let mut shuffled = truth.clone();
    let truth_report = train(&mut truth, train_images, train_labels, &cfg)?;
    let shuffled_report = train(&mut shuffled, train_images, &permuted, &cfg)?;
    Ok((truth, shuffled, vec![truth_report, shuffled_report]))
}

/// [`train_label_pair`] followed by a comparison of the two models' maps.
#[allow(clippy::too_many_arguments)]
pub fn data_randomization_test(
    config: &DataRandomizationConfig,
    train_images: &[Array3<f64>],
    train_labels: &[usize],
    images: &[ImageTensor],
    scores: &[ScoreSpec],
    method: Method,
    n: usize,
    thresholds: SanityThresholds,
) -> Result<SanityReport> {
    check_inputs(images, scores)?;
    let (truth, shuffled, training) = train_label_pair(config, train_images, train_labels)?;
    let mut report = compare_models(
        SanityTest::DataRandomization,
        &truth,
        &shuffled,
        images,
        scores,
        method,
        n,
        thresholds,
    )?;
    report.training = training;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn map(grid: Array2<f64>) -> SaliencyMap {
        SaliencyMap {
            grid,
            method: Method::Gam,
            n_layers: 1,
            degenerate: false,
        }
    }

    #[test]
    fn correlation_fixtures() {
        let a = map(array![[0.0, 0.2], [0.9, 1.0]]);
        assert_eq!(map_rank_correlation(&a, &a).unwrap(), 1.0);
        let b = map(a.grid.mapv(|v| 1.0 - v));
        assert!((map_rank_correlation(&a, &b).unwrap() + 1.0).abs() < 1e-12);
        let zero = SaliencyMap {
            grid: Array2::zeros((2, 2)),
            method: Method::Gam,
            n_layers: 1,
            degenerate: true,
        };
        assert_eq!(map_rank_correlation(&a, &zero).unwrap(), 0.0);
        assert!(matches!(
            map_rank_correlation(&a, &map(Array2::zeros((1, 4)))),
            Err(GamError::Shape(_))
        ));
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn too_few_images_is_rejected() {
        let net = arch::build("toy", 0).unwrap();
        let images = vec![ImageTensor::new(Array3::zeros((1, 8, 8)), crate::backend::PixelRange::Normalized).unwrap(); 3];
        let scores = vec![ScoreSpec::class_index(0); 3];
        let r = parameter_randomization_test(&net, &images, &scores, Method::Gam, 1, 1, SanityThresholds::default());
        assert!(matches!(r, Err(GamError::InvalidValue(_))));
    }

    proptest! {
        #[test]
        fn correlation_is_symmetric_and_rank_based(data in proptest::collection::vec(0.0f64..1.0, 2 * 12)) {
            let a = map(Array2::from_shape_vec((3, 4), data[..12].to_vec()).unwrap());
            let b = map(Array2::from_shape_vec((3, 4), data[12..].to_vec()).unwrap());
            let ab = map_rank_correlation(&a, &b).unwrap();
            prop_assert!((ab - map_rank_correlation(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
            let warped = map(a.grid.mapv(|v| v.powi(3) * 0.5 + 0.1));
            prop_assert!((map_rank_correlation(&warped, &b).unwrap() - ab).abs() < 1e-12);
        }
    }
}
