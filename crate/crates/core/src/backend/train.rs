//! Minibatch Adam training for desk-scale classifiers.
//!
//! Gradients of a batch are computed in a fixed number of shards and summed in
//! shard order, so results do not depend on the thread count.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::network::{argmax, Network};
use crate::error::{GamError, Result};

const SHARDS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Stop once train accuracy (percent) reaches this value.
    pub target_accuracy: Option<f64>,
    /// Fail with `TrainingBudgetExceeded` when the target is missed.
    pub require_target: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            target_accuracy: None,
            require_target: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub train_accuracy: f64,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(size: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut Network, grads: &mut Network, scale: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut offset = 0;
        for (p, g) in net.params_mut().into_iter().zip(grads.params_mut()) {
            for (i, (w, gi)) in p.iter_mut().zip(g.iter()).enumerate() {
                let gi = gi * scale;
                let m = &mut self.m[offset + i];
                let v = &mut self.v[offset + i];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
            offset += p.len();
        }
    }
}

fn add_into(acc: &mut Network, other: &mut Network) {
    for (a, b) in acc.params_mut().into_iter().zip(other.params_mut()) {
        a.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += y);
    }
}

/// Percentage of `images` classified as their label.
pub fn accuracy(net: &Network, images: &[Array3<f64>], labels: &[usize]) -> Result<f64> {
    let correct = images
        .par_iter()
        .zip(labels)
        .map(|(x, &y)| net.logits(x).map(|l| usize::from(argmax(&l) == y)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .sum::<usize>();
    Ok(100.0 * correct as f64 / images.len().max(1) as f64)
}

pub fn train(net: &mut Network, images: &[Array3<f64>], labels: &[usize], cfg: &TrainConfig) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(GamError::EmptyInput("training set"));
    }
    if images.len() != labels.len() {
        return Err(GamError::Shape(format!("{} images but {} labels", images.len(), labels.len())));
    }
    let classes = net
        .class_count()
        .ok_or_else(|| GamError::UnsupportedModel("training needs a classifier head".into()))?;
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(GamError::UnknownClass(format!("label {bad} outside {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut adam = Adam::new(net.param_count(), cfg.learning_rate);
    let batch = cfg.batch_size.max(1);
    let mut report = TrainReport {
        epochs: 0,
        final_loss: f64::NAN,
        train_accuracy: 0.0,
    };
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let shard_len = chunk.len().div_ceil(SHARDS);
            let shards = chunk
                .par_chunks(shard_len)
                .map(|part| {
                    let mut g = net.zeros_like();
                    let mut loss = 0.0;
                    for &i in part {
                        loss += net.loss_and_grads(&images[i], labels[i], &mut g)?.0;
                    }
                    Ok((g, loss))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut iter = shards.into_iter();
            let (mut total, mut loss) = iter.next().expect("non-empty batch");
            for (mut g, l) in iter {
                add_into(&mut total, &mut g);
                loss += l;
            }
            epoch_loss += loss;
            adam.step(net, &mut total, 1.0 / chunk.len() as f64);
        }
        report.epochs = epoch;
        report.final_loss = epoch_loss / images.len() as f64;
        report.train_accuracy = accuracy(net, images, labels)?;
        log::debug!(
            "epoch {epoch}: loss {:.4}, train accuracy {:.1}%",
            report.final_loss,
            report.train_accuracy
        );
        if cfg.target_accuracy.is_some_and(|t| report.train_accuracy >= t) {
            return Ok(report);
        }
    }
    if let (Some(target), true) = (cfg.target_accuracy, cfg.require_target) {
        return Err(GamError::TrainingBudgetExceeded {
            target,
            reached: report.train_accuracy,
            epochs: cfg.max_epochs,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::arch;
    use rand::Rng;

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let label = i % 3;
            let img = Array3::from_shape_fn((1, 8, 8), |(_, r, c)| {
                let on = match label {
                    0 => r < 3,
                    1 => c < 3,
                    _ => r > 4 && c > 4,
                };
                f64::from(u8::from(on)) + rng.gen_range(0.0..0.2)
            });
            images.push(img);
            labels.push(label);
        }
        let mut net = arch::build("toy", 3).unwrap();
        let cfg = TrainConfig {
            max_epochs: 60,
            batch_size: 10,
            learning_rate: 0.01,
            target_accuracy: Some(100.0),
            require_target: true,
            seed: 4,
        };
        let report = train(&mut net, &images, &labels, &cfg).unwrap();
        assert_eq!(report.train_accuracy, 100.0);
    }

    #[test]
    fn training_is_deterministic() {
        let images: Vec<_> = (0..12).map(|i| Array3::from_elem((1, 8, 8), i as f64 / 12.0)).collect();
        let labels: Vec<_> = (0..12).map(|i| i % 3).collect();
        let cfg = TrainConfig {
            max_epochs: 2,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let mut a = arch::build("toy", 0).unwrap();
        let mut b = arch::build("toy", 0).unwrap();
        train(&mut a, &images, &labels, &cfg).unwrap();
        train(&mut b, &images, &labels, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missed_target_is_reported() {
        let images: Vec<_> = (0..6).map(|_| Array3::zeros((1, 8, 8))).collect();
        let labels = vec![0, 1, 2, 0, 1, 2];
        let cfg = TrainConfig {
            max_epochs: 1,
            target_accuracy: Some(95.0),
            require_target: true,
            ..TrainConfig::default()
        };
        let mut net = arch::build("toy", 0).unwrap();
        assert!(matches!(
            train(&mut net, &images, &labels, &cfg),
            Err(GamError::TrainingBudgetExceeded { .. })
        ));
    }
}
