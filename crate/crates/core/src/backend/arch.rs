//! Architecture adapter table.
//!
//! Each entry declares which block outputs count as saliency layers. Inner
//! convolutions are never enumerated on their own.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{Block, EmbeddingPoint, HiddenLayer, Linear, Network, Pooling, SpatialOp};
use super::ops::{Conv2d, DenseUnit};
use crate::error::{GamError, Result};

/// `(name, summary)` of every built-in architecture.
pub const ARCHITECTURES: &[(&str, &str)] = &[
    ("toy", "1x8x8 input, two conv blocks, global average pooling, 3 classes"),
    ("lenet", "1x28x28 input, LeNet-5 style: two conv+pool blocks, FC 120-84, 10 classes"),
    (
        "densenet-mini",
        "3x32x32 input, stem plus four dense blocks with transitions, 10 classes",
    ),
    ("mlp", "1x8x8 input, fully connected only (no saliency layers)"),
];

fn conv(cin: usize, cout: usize, k: usize, padding: usize) -> SpatialOp {
    SpatialOp::Conv(Conv2d::new(Array4::zeros((cout, cin, k, k)), Array1::zeros(cout), padding).expect("valid conv"))
}

fn dense(cin: usize, growth: usize) -> SpatialOp {
    let c = Conv2d::new(Array4::zeros((growth, cin, 3, 3)), Array1::zeros(growth), 1).expect("valid conv");
    SpatialOp::Dense(DenseUnit::new(c).expect("same padding"))
}

fn linear(input: usize, output: usize) -> Linear {
    Linear {
        weight: Array2::zeros((output, input)),
        bias: Array1::zeros(output),
    }
}

fn block(name: &str, ops: Vec<SpatialOp>) -> Block {
    Block {
        name: name.to_string(),
        ops,
    }
}

fn digit_labels() -> Vec<String> {
    (0..10).map(|d| d.to_string()).collect()
}

/// Builds `arch` with weights drawn from `seed`.
pub fn build(arch: &str, seed: u64) -> Result<Network> {
    let mut net = match arch {
        "toy" => Network {
            arch: arch.into(),
            input_shape: [1, 8, 8],
            blocks: vec![
                block("block1", vec![conv(1, 4, 3, 1), SpatialOp::Relu]),
                block("block2", vec![SpatialOp::MaxPool { size: 2 }, conv(4, 6, 3, 1), SpatialOp::Relu]),
            ],
            pooling: Pooling::GlobalAverage,
            hidden: vec![],
            classifier: Some(linear(6, 3)),
            labels: vec![],
            embedding_point: EmbeddingPoint::Penultimate,
        },
        "lenet" => Network {
            arch: arch.into(),
            input_shape: [1, 28, 28],
            blocks: vec![
                block("conv1", vec![conv(1, 6, 5, 0), SpatialOp::Relu, SpatialOp::MaxPool { size: 2 }]),
                block("conv2", vec![conv(6, 16, 5, 0), SpatialOp::Relu, SpatialOp::MaxPool { size: 2 }]),
            ],
            pooling: Pooling::Flatten,
            hidden: vec![
                HiddenLayer {
                    linear: linear(256, 120),
                    relu: true,
                },
                HiddenLayer {
                    linear: linear(120, 84),
                    relu: true,
                },
            ],
            classifier: Some(linear(84, 10)),
            labels: digit_labels(),
            embedding_point: EmbeddingPoint::Penultimate,
        },
        "densenet-mini" => {
            let g = 4;
            Network {
                arch: arch.into(),
                input_shape: [3, 32, 32],
                blocks: vec![
                    block("dense1", vec![conv(3, 8, 3, 1), SpatialOp::Relu, dense(8, g), dense(8 + g, g)]),
                    block(
                        "dense2",
                        vec![conv(16, 8, 1, 0), SpatialOp::AvgPool { size: 2 }, dense(8, g), dense(8 + g, g)],
                    ),
                    block(
                        "dense3",
                        vec![conv(16, 8, 1, 0), SpatialOp::AvgPool { size: 2 }, dense(8, g), dense(8 + g, g)],
                    ),
                    block(
                        "dense4",
                        vec![
                            conv(16, 8, 1, 0),
                            SpatialOp::AvgPool { size: 2 },
                            dense(8, g),
                            dense(8 + g, g),
                            SpatialOp::Relu,
                        ],
                    ),
                ],
                pooling: Pooling::GlobalAverage,
                hidden: vec![],
                classifier: Some(linear(16, 10)),
                labels: vec![],
                embedding_point: EmbeddingPoint::Penultimate,
            }
        }
        "mlp" => Network {
            arch: arch.into(),
            input_shape: [1, 8, 8],
            blocks: vec![],
            pooling: Pooling::Flatten,
            hidden: vec![HiddenLayer {
                linear: linear(64, 16),
                relu: true,
            }],
            classifier: Some(linear(16, 3)),
            labels: vec![],
            embedding_point: EmbeddingPoint::Penultimate,
        },
        other => {
            let known: Vec<&str> = ARCHITECTURES.iter().map(|(n, _)| *n).collect();
            return Err(GamError::UnsupportedModel(format!(
                "unknown architecture `{other}` (known: {})",
                known.join(", ")
            )));
        }
    };
    reinitialize(&mut net, seed);
    Ok(net)
}

/// Draws fresh weights for every layer: He-uniform weights and
/// `U(±1/√fan_in)` biases.
pub fn reinitialize(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = |weight: &mut [f64], bias: &mut [f64], fan_in: usize, rng: &mut ChaCha8Rng| {
        let wb = (6.0 / fan_in as f64).sqrt();
        let bb = 1.0 / (fan_in as f64).sqrt();
        weight.iter_mut().for_each(|w| *w = rng.gen_range(-wb..wb));
        bias.iter_mut().for_each(|b| *b = rng.gen_range(-bb..bb));
    };
    for op in net.blocks.iter_mut().flat_map(|b| b.ops.iter_mut()) {
        let c = match op {
            SpatialOp::Conv(c) => c,
            SpatialOp::Dense(d) => &mut d.conv,
            _ => continue,
        };
        let fan_in = c.in_channels() * c.kernel() * c.kernel();
        fill(
            c.weight.as_slice_mut().expect("standard layout"),
            c.bias.as_slice_mut().expect("standard layout"),
            fan_in,
            &mut rng,
        );
    }
    for l in net.hidden.iter_mut().map(|h| &mut h.linear).chain(net.classifier.as_mut()) {
        let fan_in = l.weight.ncols();
        fill(
            l.weight.as_slice_mut().expect("standard layout"),
            l.bias.as_slice_mut().expect("standard layout"),
            fan_in,
            &mut rng,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{CaptureBackend, ImageTensor, PixelRange};
    use ndarray::Array3;

    #[test]
    fn layer_tables() {
        let toy = build("toy", 0).unwrap();
        assert_eq!(toy.list_layers().unwrap().len(), 2);
        let lenet = build("lenet", 0).unwrap();
        let layers = lenet.list_layers().unwrap();
        assert_eq!(layers.iter().map(|l| l.index).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(layers[1].name, "conv2");
        assert!(matches!(build("mlp", 0).unwrap().list_layers(), Err(GamError::UnsupportedModel(_))));
        assert!(matches!(build("vgg", 0), Err(GamError::UnsupportedModel(_))));
    }

    #[test]
    fn densenet_blocks_shrink() {
        let net = build("densenet-mini", 1).unwrap();
        let layers = net.list_layers().unwrap();
        assert!(layers.len() >= 4);
        let x = ImageTensor::new(Array3::from_elem((3, 32, 32), 0.5), PixelRange::Normalized).unwrap();
        let (acts, emb) = net.forward_capture(&x, &layers).unwrap();
        let sizes: Vec<usize> = acts.iter().map(|(_, g)| g.dim().1 * g.dim().2).collect();
        let last = *sizes.last().unwrap();
        assert!(sizes[..sizes.len() - 1].iter().all(|&s| s > last));
        assert_eq!(emb.dim(), net.embedding_dim());
        assert!(net.relu_terminated(layers.last().unwrap()));
    }

    #[test]
    fn embedding_dims_match_forward() {
        for arch in ["toy", "lenet", "densenet-mini"] {
            let net = build(arch, 2).unwrap();
            let [c, h, w] = net.input_shape;
            let x = ImageTensor::new(Array3::from_elem((c, h, w), 0.1), PixelRange::Normalized).unwrap();
            let (_, emb) = net.forward_capture(&x, &[]).unwrap();
            assert_eq!(emb.dim(), net.embedding_dim(), "{arch}");
        }
    }

    #[test]
    fn seeds_are_reproducible() {
        assert_eq!(build("lenet", 7).unwrap(), build("lenet", 7).unwrap());
        assert_ne!(build("lenet", 7).unwrap(), build("lenet", 8).unwrap());
    }
}
