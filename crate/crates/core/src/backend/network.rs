use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::ops::{self, Conv2d, DenseUnit};
use super::{ActivationStack, Capture, CaptureBackend, Embedding, GradientStack, ImageTensor, LayerId, LayerStack, SuffixEval};
use crate::error::{GamError, Result};
use crate::scoring::{self, ScoreKind, ScoreSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SpatialOp {
    Conv(Conv2d),
    Relu,
    MaxPool { size: usize },
    AvgPool { size: usize },
    Dense(DenseUnit),
}

/// A named run of spatial ops whose output is one eligible saliency layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub ops: Vec<SpatialOp>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    GlobalAverage,
    Flatten,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    fn backward(&self, x: &Array1<f64>, grad_out: &Array1<f64>, grads: Option<&mut Linear>) -> Array1<f64> {
        if let Some(acc) = grads {
            for (mut row, &g) in acc.weight.outer_iter_mut().zip(grad_out) {
                row.scaled_add(g, x);
            }
            acc.bias += grad_out;
        }
        self.weight.t().dot(grad_out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub relu: bool,
}

/// Where `f_x` is read from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingPoint {
    /// Right after global pooling / flattening.
    Pooled,
    /// Output of the given fully connected layer (1-based).
    Hidden(usize),
    /// The classifier's input: the last hidden layer, or the pooled vector
    /// when there are no hidden layers.
    #[default]
    Penultimate,
}

/// A sequential CNN: spatial blocks, pooling, optional hidden FC layers and a
/// classifier head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: String,
    pub input_shape: [usize; 3],
    pub blocks: Vec<Block>,
    pub pooling: Pooling,
    pub hidden: Vec<HiddenLayer>,
    pub classifier: Option<Linear>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub embedding_point: EmbeddingPoint,
}

#[derive(Clone, Debug)]
enum OpCache {
    None,
    Relu,
    Argmax(Vec<u32>),
    DensePre(Array3<f64>),
}

/// Intermediate values of one forward pass, started at some block.
#[derive(Clone, Debug)]
pub struct Trace {
    start: usize,
    op_inputs: Vec<Vec<Array3<f64>>>,
    caches: Vec<Vec<OpCache>>,
    block_outputs: Vec<Array3<f64>>,
    pooled: Array1<f64>,
    hidden_pre: Vec<Array1<f64>>,
    hidden_out: Vec<Array1<f64>>,
    logits: Option<Array1<f64>>,
}

impl Trace {
    pub fn logits(&self) -> Option<&Array1<f64>> {
        self.logits.as_ref()
    }

    /// Output of block `index` (0-based, absolute).
    pub fn block_output(&self, index: usize) -> Option<&Array3<f64>> {
        index.checked_sub(self.start).and_then(|i| self.block_outputs.get(i))
    }

    /// On/off state of every ReLU and the winner of every max-pool window.
    pub fn pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (inputs, caches) in self.op_inputs.iter().zip(&self.caches) {
            for (x, cache) in inputs.iter().zip(caches) {
                match cache {
                    OpCache::Argmax(a) => out.extend_from_slice(a),
                    OpCache::DensePre(pre) => out.extend(pre.iter().map(|&v| u32::from(v > 0.0))),
                    OpCache::Relu => out.extend(x.iter().map(|&v| u32::from(v > 0.0))),
                    OpCache::None => {}
                }
            }
        }
        for pre in &self.hidden_pre {
            out.extend(pre.iter().map(|&v| u32::from(v > 0.0)));
        }
        out
    }
}

enum Seed {
    Representation { stage: usize, grad: Array1<f64> },
    Logits(Array1<f64>),
}

impl Network {
    pub fn class_count(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.weight.nrows())
    }

    /// Resolves a class label or numeric index.
    pub fn class_index(&self, label: &str) -> Result<usize> {
        let count = self
            .class_count()
            .ok_or_else(|| GamError::UnknownClass(format!("model `{}` has no classifier head", self.arch)))?;
        if let Some(i) = self.labels.iter().position(|l| l == label) {
            return Ok(i);
        }
        match label.parse::<usize>() {
            Ok(i) if i < count => Ok(i),
            _ => Err(GamError::UnknownClass(label.to_string())),
        }
    }

    fn embedding_stage(&self) -> usize {
        match self.embedding_point {
            EmbeddingPoint::Pooled => 0,
            EmbeddingPoint::Hidden(i) => i.min(self.hidden.len()),
            EmbeddingPoint::Penultimate => self.hidden.len(),
        }
    }

    /// Whether each block's output is guaranteed non-negative (ends in a ReLU,
    /// possibly followed by pooling or dense concatenation of non-negative maps).
    pub fn nonnegative_blocks(&self) -> Vec<bool> {
        let mut state = false;
        self.blocks
            .iter()
            .map(|b| {
                for op in &b.ops {
                    match op {
                        SpatialOp::Conv(_) => state = false,
                        SpatialOp::Relu => state = true,
                        SpatialOp::MaxPool { .. } | SpatialOp::AvgPool { .. } | SpatialOp::Dense(_) => {}
                    }
                }
                state
            })
            .collect()
    }

    fn representation<'a>(&self, trace: &'a Trace, stage: usize) -> &'a Array1<f64> {
        if stage == 0 {
            &trace.pooled
        } else {
            &trace.hidden_out[stage - 1]
        }
    }

    /// Runs blocks `start..` on `input`, then the head.
    pub fn run(&self, start: usize, input: Array3<f64>) -> Result<Trace> {
        let mut current = input.as_standard_layout().into_owned();
        let mut op_inputs = Vec::with_capacity(self.blocks.len() - start);
        let mut caches = Vec::with_capacity(self.blocks.len() - start);
        let mut block_outputs = Vec::with_capacity(self.blocks.len() - start);
        for block in &self.blocks[start..] {
            let mut inputs = Vec::with_capacity(block.ops.len());
            let mut block_caches = Vec::with_capacity(block.ops.len());
            for op in &block.ops {
                let (next, cache) = match op {
                    SpatialOp::Conv(conv) => {
                        if conv.in_channels() != current.dim().0 || conv.output_dims(current.dim().1, current.dim().2).is_none() {
                            return Err(GamError::Shape(format!(
                                "block `{}`: conv expects {} channels, got {:?}",
                                block.name,
                                conv.in_channels(),
                                current.dim()
                            )));
                        }
                        (conv.forward(&current), OpCache::None)
                    }
                    SpatialOp::Relu => (current.mapv(ops::relu), OpCache::Relu),
                    SpatialOp::MaxPool { size } => {
                        let (out, arg) = ops::max_pool(&current, *size);
                        (out, OpCache::Argmax(arg))
                    }
                    SpatialOp::AvgPool { size } => (ops::avg_pool(&current, *size), OpCache::None),
                    SpatialOp::Dense(unit) => {
                        if unit.conv.in_channels() != current.dim().0 {
                            return Err(GamError::Shape(format!("block `{}`: dense unit channel mismatch", block.name)));
                        }
                        let (out, pre) = unit.forward(&current);
                        (out, OpCache::DensePre(pre))
                    }
                };
                if next.is_empty() {
                    return Err(GamError::Shape(format!("block `{}` produced an empty map", block.name)));
                }
                inputs.push(std::mem::replace(&mut current, next));
                block_caches.push(cache);
            }
            op_inputs.push(inputs);
            caches.push(block_caches);
            block_outputs.push(current.clone());
        }
        let pooled = match self.pooling {
            Pooling::GlobalAverage => current
                .mean_axis(Axis(1))
                .and_then(|m| m.mean_axis(Axis(1)))
                .expect("non-empty map"),
            Pooling::Flatten => Array1::from_iter(current.iter().copied()),
        };
        let mut hidden_pre = Vec::with_capacity(self.hidden.len());
        let mut hidden_out = Vec::with_capacity(self.hidden.len());
        let mut rep = pooled.clone();
        for layer in &self.hidden {
            if layer.linear.weight.ncols() != rep.len() {
                return Err(GamError::Shape(format!(
                    "hidden layer expects {} inputs, got {}",
                    layer.linear.weight.ncols(),
                    rep.len()
                )));
            }
            let pre = layer.linear.forward(&rep);
            rep = if layer.relu { pre.mapv(ops::relu) } else { pre.clone() };
            hidden_pre.push(pre);
            hidden_out.push(rep.clone());
        }
        let logits = match &self.classifier {
            Some(head) if head.weight.ncols() == rep.len() => Some(head.forward(&rep)),
            Some(head) => {
                return Err(GamError::Shape(format!(
                    "classifier expects {} inputs, got {}",
                    head.weight.ncols(),
                    rep.len()
                )))
            }
            None => None,
        };
        Ok(Trace {
            start,
            op_inputs,
            caches,
            block_outputs,
            pooled,
            hidden_pre,
            hidden_out,
            logits,
        })
    }

    /// Full forward pass from an image.
    pub fn forward(&self, x: &ImageTensor) -> Result<Trace> {
        self.check_input(x)?;
        self.run(0, x.data().clone())
    }

    pub fn embedding_of(&self, trace: &Trace) -> Result<Embedding> {
        Embedding::new(self.representation(trace, self.embedding_stage()).clone())
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.input_shape {
            return Err(GamError::InputShape {
                expected: self.input_shape,
                actual: x.shape(),
            });
        }
        Ok(())
    }

    fn score_seed(&self, trace: &Trace, spec: &ScoreSpec) -> Result<(f64, Seed)> {
        if let (ScoreKind::ClassLogit, Some(j)) = (spec.kind, spec.class_index) {
            let logits = trace
                .logits
                .as_ref()
                .ok_or_else(|| GamError::UnknownClass(format!("model `{}` has no classifier head", self.arch)))?;
            if spec.class_weights.is_some() {
                return Err(GamError::InvalidScore("both class weights and class index given".into()));
            }
            if j >= logits.len() {
                return Err(GamError::UnknownClass(format!("index {j} outside {} classes", logits.len())));
            }
            let value = logits[j];
            if !value.is_finite() {
                return Err(GamError::NonFiniteScore(value));
            }
            let mut onehot = Array1::zeros(logits.len());
            onehot[j] = 1.0;
            return Ok((value, Seed::Logits(onehot)));
        }
        let stage = self.embedding_stage();
        let fx = Embedding::new(self.representation(trace, stage).clone()).map_err(|e| match e {
            GamError::InvalidValue(_) => GamError::NonFiniteScore(f64::NAN),
            other => other,
        })?;
        let value = scoring::score(&fx, spec)?;
        let grad = scoring::score_gradient(&fx, spec)?;
        Ok((value, Seed::Representation { stage, grad }))
    }

    // Reverse pass. Records the gradient at every block listed in `capture`
    // (absolute 0-based indices) and accumulates parameter gradients when asked.
    fn backprop(&self, trace: &Trace, seed: Seed, capture: &[usize], mut grads: Option<&mut Network>) -> Vec<(usize, Array3<f64>)> {
        let (mut stage, mut grad) = match seed {
            Seed::Representation { stage, grad } => (stage, grad),
            Seed::Logits(g) => {
                let head = self.classifier.as_ref().expect("logits imply a classifier");
                let input = self.representation(trace, self.hidden.len());
                let gin = head.backward(input, &g, grads.as_deref_mut().and_then(|n| n.classifier.as_mut()));
                (self.hidden.len(), gin)
            }
        };
        while stage > 0 {
            let layer = &self.hidden[stage - 1];
            if layer.relu {
                grad.zip_mut_with(&trace.hidden_pre[stage - 1], |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let input = self.representation(trace, stage - 1);
            grad = layer
                .linear
                .backward(input, &grad, grads.as_deref_mut().map(|n| &mut n.hidden[stage - 1].linear));
            stage -= 1;
        }
        let last = trace.block_outputs.last().expect("at least one block");
        let (c, h, w) = last.dim();
        let mut gmap = match self.pooling {
            Pooling::GlobalAverage => {
                let scale = 1.0 / (h * w) as f64;
                Array3::from_shape_fn((c, h, w), |(k, _, _)| grad[k] * scale)
            }
            Pooling::Flatten => Array3::from_shape_vec((c, h, w), grad.to_vec()).expect("flatten size"),
        };

        let lowest = capture.iter().copied().min();
        let mut captured = Vec::with_capacity(capture.len());
        for b in (trace.start..self.blocks.len()).rev() {
            if capture.contains(&b) {
                captured.push((b, gmap.clone()));
            }
            if grads.is_none() && lowest.is_none_or(|l| b <= l) {
                break;
            }
            let rel = b - trace.start;
            for (i, op) in self.blocks[b].ops.iter().enumerate().rev() {
                let x = &trace.op_inputs[rel][i];
                gmap = match (op, &trace.caches[rel][i]) {
                    (SpatialOp::Conv(conv), _) => {
                        let acc = grads.as_deref_mut().map(|n| match &mut n.blocks[b].ops[i] {
                            SpatialOp::Conv(c) => c,
                            _ => unreachable!("gradient network mirrors the model"),
                        });
                        conv.backward(x, &gmap, acc)
                    }
                    (SpatialOp::Relu, _) => {
                        let mut g = gmap;
                        g.zip_mut_with(x, |g, &z| {
                            if z <= 0.0 {
                                *g = 0.0
                            }
                        });
                        g
                    }
                    (SpatialOp::MaxPool { .. }, OpCache::Argmax(arg)) => ops::max_pool_backward(x.dim(), arg, &gmap),
                    (SpatialOp::AvgPool { size }, _) => ops::avg_pool_backward(x.dim(), *size, &gmap),
                    (SpatialOp::Dense(unit), OpCache::DensePre(pre)) => {
                        let acc = grads.as_deref_mut().map(|n| match &mut n.blocks[b].ops[i] {
                            SpatialOp::Dense(d) => d,
                            _ => unreachable!("gradient network mirrors the model"),
                        });
                        unit.backward(x, pre, &gmap, acc)
                    }
                    _ => unreachable!("cache matches op"),
                };
            }
        }
        captured.reverse();
        captured
    }

    fn block_indices(&self, layers: &[LayerId]) -> Result<Vec<usize>> {
        layers
            .iter()
            .map(|id| {
                let ok = id.index >= 1 && id.index <= self.blocks.len() && self.blocks[id.index - 1].name == id.name;
                if ok {
                    Ok(id.index - 1)
                } else {
                    Err(GamError::UnknownLayer(id.to_string()))
                }
            })
            .collect()
    }

    fn layer_id(&self, block: usize) -> LayerId {
        LayerId {
            index: block + 1,
            name: self.blocks[block].name.clone(),
        }
    }

    fn activation_stack(&self, trace: &Trace, blocks: &[usize]) -> Result<ActivationStack> {
        let nonneg = self.nonnegative_blocks();
        let entries = blocks
            .iter()
            .map(|&b| {
                let grid = trace.block_output(b).expect("traced from the input").clone();
                if nonneg[b] && grid.iter().any(|&v| v < 0.0) {
                    return Err(GamError::InvalidValue(format!(
                        "block `{}` is ReLU-terminated but has negative output",
                        self.blocks[b].name
                    )));
                }
                Ok((self.layer_id(b), grid))
            })
            .collect::<Result<Vec<_>>>()?;
        LayerStack::new(entries)
    }

    /// Softmax cross-entropy loss for one example; adds parameter gradients
    /// into `grads` and returns `(loss, predicted class)`.
    pub fn loss_and_grads(&self, x: &Array3<f64>, label: usize, grads: &mut Network) -> Result<(f64, usize)> {
        let trace = self.run(0, x.clone())?;
        let logits = trace
            .logits
            .as_ref()
            .ok_or_else(|| GamError::UnsupportedModel("training needs a classifier head".into()))?;
        let probs = scoring::softmax(logits);
        let predicted = argmax(logits);
        let loss = -probs[label].max(1e-300).ln();
        let mut g = probs;
        g[label] -= 1.0;
        self.backprop(&trace, Seed::Logits(g), &[], Some(grads));
        Ok((loss, predicted))
    }

    /// Class logits for an input grid.
    pub fn logits(&self, x: &Array3<f64>) -> Result<Array1<f64>> {
        self.run(0, x.clone())?
            .logits
            .ok_or_else(|| GamError::UnsupportedModel("model has no classifier head".into()))
    }

    /// Mutable views of every parameter tensor, in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.blocks {
            for op in &mut block.ops {
                let conv = match op {
                    SpatialOp::Conv(c) => c,
                    SpatialOp::Dense(d) => &mut d.conv,
                    _ => continue,
                };
                out.push(conv.weight.as_slice_mut().expect("standard layout"));
                out.push(conv.bias.as_slice_mut().expect("standard layout"));
            }
        }
        for layer in self.hidden.iter_mut().map(|h| &mut h.linear).chain(self.classifier.as_mut()) {
            out.push(layer.weight.as_slice_mut().expect("standard layout"));
            out.push(layer.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.clone().params_mut().iter().map(|s| s.len()).sum()
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Network {
        let mut net = self.clone();
        for slice in net.params_mut() {
            slice.fill(0.0);
        }
        net
    }
}

pub(crate) fn argmax(v: &Array1<f64>) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl CaptureBackend for Network {
    fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    fn embedding_dim(&self) -> usize {
        let stage = self.embedding_stage();
        if stage > 0 {
            return self.hidden[stage - 1].linear.weight.nrows();
        }
        let [mut c, mut h, mut w] = self.input_shape;
        for op in self.blocks.iter().flat_map(|b| &b.ops) {
            match op {
                SpatialOp::Conv(conv) => {
                    c = conv.out_channels();
                    (h, w) = conv.output_dims(h, w).unwrap_or((0, 0));
                }
                SpatialOp::Relu => {}
                SpatialOp::MaxPool { size } | SpatialOp::AvgPool { size } => (h, w) = (h / size, w / size),
                SpatialOp::Dense(unit) => c += unit.conv.out_channels(),
            }
        }
        match self.pooling {
            Pooling::GlobalAverage => c,
            Pooling::Flatten => c * h * w,
        }
    }

    fn list_layers(&self) -> Result<Vec<LayerId>> {
        if self.blocks.is_empty() {
            return Err(GamError::UnsupportedModel(format!(
                "model `{}` has no spatial feature maps",
                self.arch
            )));
        }
        Ok((0..self.blocks.len()).map(|b| self.layer_id(b)).collect())
    }

    fn relu_terminated(&self, layer: &LayerId) -> bool {
        layer.index >= 1 && self.nonnegative_blocks().get(layer.index - 1).copied().unwrap_or(false)
    }

    fn forward_capture(&self, x: &ImageTensor, layers: &[LayerId]) -> Result<(ActivationStack, Embedding)> {
        self.list_layers()?;
        let blocks = self.block_indices(layers)?;
        let trace = self.forward(x)?;
        Ok((self.activation_stack(&trace, &blocks)?, self.embedding_of(&trace)?))
    }

    fn capture(&self, x: &ImageTensor, score: &ScoreSpec, layers: &[LayerId]) -> Result<Capture> {
        self.list_layers()?;
        let blocks = self.block_indices(layers)?;
        let trace = self.forward(x)?;
        let (value, seed) = self.score_seed(&trace, score)?;
        let grads = self.backprop(&trace, seed, &blocks, None);
        let gradients = GradientStack::new(grads.into_iter().map(|(b, g)| (self.layer_id(b), g)).collect())?;
        Ok(Capture {
            activations: self.activation_stack(&trace, &blocks)?,
            gradients,
            embedding: self.embedding_of(&trace)?,
            score: value,
        })
    }

    fn score_from_layer(&self, layer: &LayerId, h: &Array3<f64>, score: &ScoreSpec) -> Result<SuffixEval> {
        let block = self.block_indices(std::slice::from_ref(layer))?[0];
        let trace = self.run(block + 1, h.clone())?;
        let (value, _) = self.score_seed(&trace, score)?;
        Ok(SuffixEval {
            score: value,
            pattern: trace.pattern(),
        })
    }

    fn class_probabilities(&self, x: &ImageTensor) -> Result<Option<Array1<f64>>> {
        let trace = self.forward(x)?;
        Ok(trace.logits.as_ref().map(scoring::softmax))
    }
}
