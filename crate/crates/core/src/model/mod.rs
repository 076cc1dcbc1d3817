//! Sequential models, injectable-layer enumeration and forward execution
//! with interception points.

mod builtin;
mod head;
mod io;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub use builtin::{builtin_model, builtin_models, BUILTIN_NAMES};
pub use head::{decode_detections, Detection};
pub use io::{load_model, model_from_bytes, model_to_bytes, save_model};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d,
    Conv3d,
    Linear,
    Relu,
    MaxPool2d,
    Softmax,
    Flatten,
}

impl LayerKind {
    pub const INJECTABLE: [LayerKind; 3] = [LayerKind::Conv2d, LayerKind::Conv3d, LayerKind::Linear];

    pub fn is_injectable(self) -> bool {
        matches!(self, LayerKind::Conv2d | LayerKind::Conv3d | LayerKind::Linear)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::Conv3d => "conv3d",
            LayerKind::Linear => "linear",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d => "maxpool2d",
            LayerKind::Softmax => "softmax",
            LayerKind::Flatten => "flatten",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamOp {
    Conv2d { stride: usize, padding: usize },
    Conv3d { stride: usize, padding: usize },
    Linear,
}

/// Clamp bounds applied to a layer's output right after its MAC stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRange {
    pub lo: f32,
    pub hi: f32,
}

/// An injectable layer: its weights and bias plus an optional output clamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayer {
    pub op: ParamOp,
    pub weights: Tensor,
    pub bias: Vec<f32>,
    pub clip: Option<ClipRange>,
}

impl ParamLayer {
    pub fn kind(&self) -> LayerKind {
        match self.op {
            ParamOp::Conv2d { .. } => LayerKind::Conv2d,
            ParamOp::Conv3d { .. } => LayerKind::Conv3d,
            ParamOp::Linear => LayerKind::Linear,
        }
    }

    /// Post-MAC output including bias, before clamp and activation.
    pub fn mac(&self, input: &Tensor) -> Result<Tensor> {
        match self.op {
            ParamOp::Conv2d { stride, padding } => {
                tensor::conv2d_forward(input, &self.weights, &self.bias, stride, padding)
            }
            ParamOp::Conv3d { stride, padding } => {
                tensor::conv3d_forward(input, &self.weights, &self.bias, stride, padding)
            }
            ParamOp::Linear => tensor::linear_forward(input, &self.weights, &self.bias),
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let w = self.weights.shape();
        let shape = match self.op {
            ParamOp::Conv2d { stride, padding } => tensor::conv2d_output_shape(input, w, stride, padding)?,
            ParamOp::Conv3d { stride, padding } => tensor::conv3d_output_shape(input, w, stride, padding)?,
            ParamOp::Linear => {
                let numel: usize = input.iter().product();
                if w.len() != 2 || w[1] != numel {
                    return Err(Error::Shape {
                        op: "linear",
                        left: input.to_vec(),
                        right: w.to_vec(),
                    });
                }
                vec![w[0]]
            }
        };
        if self.bias.len() != w[0] {
            return Err(Error::Shape {
                op: "bias",
                left: vec![w[0]],
                right: vec![self.bias.len()],
            });
        }
        Ok(shape)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Param(ParamLayer),
    Relu,
    MaxPool2d { kernel: usize, stride: usize },
    Softmax,
    Flatten,
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Param(p) => p.kind(),
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d { .. } => LayerKind::MaxPool2d,
            Layer::Softmax => LayerKind::Softmax,
            Layer::Flatten => LayerKind::Flatten,
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Param(p) => p.output_shape(input),
            Layer::Relu | Layer::Softmax => Ok(input.to_vec()),
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::MaxPool2d { kernel, stride } => {
                if input.len() != 3 || *kernel == 0 || *stride == 0 || input[1] < *kernel || input[2] < *kernel {
                    return Err(Error::Shape {
                        op: "maxpool2d",
                        left: input.to_vec(),
                        right: vec![*kernel, *stride],
                    });
                }
                Ok(vec![
                    input[0],
                    (input[1] - kernel) / stride + 1,
                    (input[2] - kernel) / stride + 1,
                ])
            }
        }
    }
}

/// What the final output tensor of a model means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Output is a logit vector of `classes` entries.
    Classification { classes: usize },
    /// Output is `boxes` rows of `(tx, ty, tw, th, score, class logits...)`.
    Detection { boxes: usize, classes: usize },
}

impl Task {
    fn output_len(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Detection { boxes, classes } => boxes * (5 + classes),
        }
    }

    pub fn is_detection(self) -> bool {
        matches!(self, Task::Detection { .. })
    }
}

/// Dimensions of one injectable layer.
///
/// `neuron_dims` is `(channel, depth, height, width)` of the output
/// activation with depth 1 outside conv3d; `weight_dims` is
/// `(out_ch, in_ch, k_depth, k_h, k_w)` with 1s filling unused axes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub index: usize,
    /// Position in the full layer list.
    pub position: usize,
    pub kind: LayerKind,
    pub neuron_dims: [usize; 4],
    pub weight_dims: [usize; 5],
    pub element_count_neurons: usize,
    pub element_count_weights: usize,
}

/// Decides which injectable layers a campaign may target.
pub trait LayerVerifier {
    fn accepts(&self, info: &LayerInfo) -> bool;
}

/// The standard verifier: a set of layer kinds plus an optional inclusive
/// range of injectable-layer indices.
#[derive(Debug, Clone)]
pub struct LayerFilter {
    pub kinds: BTreeSet<LayerKind>,
    pub range: Option<(usize, usize)>,
}

impl LayerVerifier for LayerFilter {
    fn accepts(&self, info: &LayerInfo) -> bool {
        self.kinds.contains(&info.kind)
            && self
                .range
                .is_none_or(|(lo, hi)| (lo..=hi).contains(&info.index))
    }
}

/// Interception points of a forward pass.
///
/// For every injectable layer `intercept` sees the post-MAC output (bias
/// added, before clamp and activation) and may modify it in place; `observe`
/// then sees the value the next operator will consume.
pub trait LayerTap {
    fn intercept(&mut self, _layer: usize, _output: &mut Tensor) -> Result<()> {
        Ok(())
    }
    fn observe(&mut self, _layer: usize, _output: &Tensor) {}
}

pub struct NoTap;

impl LayerTap for NoTap {}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    name: String,
    input_shape: Vec<usize>,
    task: Task,
    layers: Vec<Layer>,
    infos: Vec<LayerInfo>,
}

impl Model {
    /// Builds a model, checking that consecutive layer shapes fit together
    /// and that the final output matches `task`.
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, task: Task, layers: Vec<Layer>) -> Result<Self> {
        let name = name.into();
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Config(format!("model {name}: invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.clone();
        let mut infos = Vec::new();
        for (position, layer) in layers.iter().enumerate() {
            let out = layer.output_shape(&shape)?;
            if let Layer::Param(p) = layer {
                let neuron_dims = match out.len() {
                    1 => [out[0], 1, 1, 1],
                    3 => [out[0], 1, out[1], out[2]],
                    4 => [out[0], out[1], out[2], out[3]],
                    _ => unreachable!("param layers emit rank 1, 3 or 4"),
                };
                let w = p.weights.shape();
                let weight_dims = match p.op {
                    ParamOp::Conv2d { .. } => [w[0], w[1], 1, w[2], w[3]],
                    ParamOp::Conv3d { .. } => [w[0], w[1], w[2], w[3], w[4]],
                    ParamOp::Linear => [w[0], w[1], 1, 1, 1],
                };
                infos.push(LayerInfo {
                    index: infos.len(),
                    position,
                    kind: p.kind(),
                    neuron_dims,
                    weight_dims,
                    element_count_neurons: neuron_dims.iter().product(),
                    element_count_weights: weight_dims.iter().product(),
                });
            }
            shape = out;
        }
        let out_len: usize = shape.iter().product();
        if out_len != task.output_len() {
            return Err(Error::Config(format!(
                "model {name}: output has {out_len} elements, task {task:?} expects {}",
                task.output_len()
            )));
        }
        Ok(Model {
            name,
            input_shape,
            task,
            layers,
            infos,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// All injectable layers in order.
    pub fn layer_infos(&self) -> &[LayerInfo] {
        &self.infos
    }

    pub fn num_injectable(&self) -> usize {
        self.infos.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.param_layers().map(ParamLayer::parameter_count).sum()
    }

    pub fn param_layers(&self) -> impl Iterator<Item = &ParamLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Param(p) => Some(p),
            _ => None,
        })
    }

    /// The injectable layer with dense index `index`.
    pub fn param_layer(&self, index: usize) -> Option<&ParamLayer> {
        let pos = self.infos.get(index)?.position;
        match &self.layers[pos] {
            Layer::Param(p) => Some(p),
            _ => None,
        }
    }

    pub(crate) fn param_layer_mut(&mut self, index: usize) -> Option<&mut ParamLayer> {
        let pos = self.infos.get(index)?.position;
        match &mut self.layers[pos] {
            Layer::Param(p) => Some(p),
            _ => None,
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.forward_with(input, &mut NoTap)
    }

    pub fn forward_with(&self, input: &Tensor, tap: &mut dyn LayerTap) -> Result<Tensor> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::Shape {
                op: "model input",
                left: input.shape().to_vec(),
                right: self.input_shape.clone(),
            });
        }
        let mut x = input.clone();
        let mut index = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Param(p) => {
                    let mut out = p.mac(&x)?;
                    tap.intercept(index, &mut out)?;
                    if let Some(ClipRange { lo, hi }) = p.clip {
                        out = tensor::clamp(&out, lo, hi)?;
                    }
                    tap.observe(index, &out);
                    index += 1;
                    out
                }
                other => apply_aux(other, &x)?,
            };
        }
        Ok(x)
    }

    /// Runs the raw layers at `positions` with no interception. Used to
    /// evaluate a model in pieces.
    pub fn run_layers(&self, input: &Tensor, positions: Range<usize>) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers[positions] {
            x = match layer {
                Layer::Param(p) => {
                    let out = p.mac(&x)?;
                    match p.clip {
                        Some(ClipRange { lo, hi }) => tensor::clamp(&out, lo, hi)?,
                        None => out,
                    }
                }
                other => apply_aux(other, &x)?,
            };
        }
        Ok(x)
    }

    /// Returns a copy carrying `clips[i]` on injectable layer `i`.
    pub(crate) fn with_clips(&self, clips: &[ClipRange]) -> Result<Model> {
        if clips.len() != self.infos.len() {
            return Err(Error::Config(format!(
                "{} clip ranges for {} injectable layers",
                clips.len(),
                self.infos.len()
            )));
        }
        let mut m = self.clone();
        for (i, c) in clips.iter().enumerate() {
            if !(c.lo.is_finite() && c.hi.is_finite() && c.lo <= c.hi) {
                return Err(Error::Config(format!("layer {i}: invalid clip range [{}, {}]", c.lo, c.hi)));
            }
            m.param_layer_mut(i).expect("index in range").clip = Some(*c);
        }
        Ok(m)
    }

    /// 64-bit FNV-1a digest over every weight and bias bit pattern.
    pub fn weight_digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        for p in self.param_layers() {
            for v in p.weights.data().iter().chain(&p.bias) {
                h.write(&v.to_bits().to_le_bytes());
            }
        }
        h.finish()
    }
}

fn apply_aux(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    Ok(match layer {
        Layer::Relu => tensor::relu(x),
        Layer::MaxPool2d { kernel, stride } => tensor::maxpool2d(x, *kernel, *stride)?,
        Layer::Softmax => tensor::softmax(x),
        Layer::Flatten => tensor::flatten(x),
        Layer::Param(_) => unreachable!(),
    })
}

pub(crate) struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn enumerate_with(model: &Model, verifier: &dyn LayerVerifier) -> Vec<LayerInfo> {
    model
        .layer_infos()
        .iter()
        .filter(|info| verifier.accepts(info))
        .cloned()
        .collect()
}

/// Injectable layers matching `kinds` and the optional inclusive index
/// range. An empty selection is a validation error.
pub fn enumerate_injectable_layers(
    model: &Model,
    kinds: &BTreeSet<LayerKind>,
    layer_range: Option<(usize, usize)>,
) -> Result<Vec<LayerInfo>> {
    if let Some((lo, hi)) = layer_range {
        let count = model.num_injectable();
        if lo > hi || hi >= count {
            return Err(Error::validation(
                "layer_range",
                format!("[{lo}, {hi}] outside 0..{count} injectable layers of {}", model.name()),
            ));
        }
    }
    let filter = LayerFilter {
        kinds: kinds.clone(),
        range: layer_range,
    };
    let layers = enumerate_with(model, &filter);
    if layers.is_empty() {
        let key = if layer_range.is_some() { "layer_range" } else { "layer_kinds" };
        return Err(Error::validation(
            key,
            format!("no injectable layer of {} matches the filter", model.name()),
        ));
    }
    Ok(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_kinds() -> BTreeSet<LayerKind> {
        LayerKind::INJECTABLE.into_iter().collect()
    }

    #[test]
    fn enumerate_all_layers() {
        let m = builtin_model("tiny-cnn").unwrap();
        let infos = enumerate_injectable_layers(&m, &all_kinds(), None).unwrap();
        assert_eq!(infos.len(), 3);
        assert_eq!(infos.iter().map(|i| i.index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn enumerate_range_single_layer() {
        let m = builtin_model("tiny-cnn").unwrap();
        let infos = enumerate_injectable_layers(&m, &all_kinds(), Some((1, 1))).unwrap();
        assert_eq!(infos.len(), 1);
        assert_eq!(infos[0].index, 1);
    }

    #[test]
    fn enumerate_empty_is_validation_error() {
        let m = builtin_model("tiny-cnn").unwrap();
        let only3d: BTreeSet<_> = [LayerKind::Conv3d].into_iter().collect();
        let err = enumerate_injectable_layers(&m, &only3d, None).unwrap_err();
        assert!(matches!(err, Error::Validation { ref key, .. } if key == "layer_kinds"));

        let conv_only = builtin_model("tiny-3d").unwrap();
        let model = Model::new(
            "conv-only",
            vec![1, 4, 4],
            Task::Classification { classes: 4 },
            vec![Layer::Param(ParamLayer {
                op: ParamOp::Conv2d { stride: 1, padding: 0 },
                weights: Tensor::zeros(vec![1, 1, 3, 3]),
                bias: vec![0.0],
                clip: None,
            })],
        )
        .unwrap();
        let linear: BTreeSet<_> = [LayerKind::Linear].into_iter().collect();
        assert!(enumerate_injectable_layers(&model, &linear, None).is_err());
        assert!(enumerate_injectable_layers(&conv_only, &linear, Some((0, 0))).is_err());
        assert!(enumerate_injectable_layers(&m, &all_kinds(), Some((2, 3))).is_err());
    }

    #[test]
    fn enumeration_is_stable_and_counts_match_shapes() {
        let m = builtin_model("tiny-cnn").unwrap();
        assert_eq!(m.layer_infos(), builtin_model("tiny-cnn").unwrap().layer_infos());
        let input = Tensor::zeros(m.input_shape().to_vec());
        struct Sizes(Vec<usize>);
        impl LayerTap for Sizes {
            fn observe(&mut self, _layer: usize, output: &Tensor) {
                self.0.push(output.len());
            }
        }
        let mut sizes = Sizes(Vec::new());
        m.forward_with(&input, &mut sizes).unwrap();
        for (info, n) in m.layer_infos().iter().zip(&sizes.0) {
            assert_eq!(info.element_count_neurons, *n);
            let p = m.param_layer(info.index).unwrap();
            assert_eq!(info.element_count_weights, p.weights.len());
        }
    }

    #[test]
    fn construction_rejects_incompatible_layers() {
        let bad = Model::new(
            "bad",
            vec![3, 8, 8],
            Task::Classification { classes: 2 },
            vec![Layer::Param(ParamLayer {
                op: ParamOp::Linear,
                weights: Tensor::zeros(vec![2, 100]),
                bias: vec![0.0; 2],
                clip: None,
            })],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn custom_verifier() {
        struct WideOnly;
        impl LayerVerifier for WideOnly {
            fn accepts(&self, info: &LayerInfo) -> bool {
                info.element_count_weights > 1000
            }
        }
        let m = builtin_model("tiny-cnn").unwrap();
        let picked = enumerate_with(&m, &WideOnly);
        assert!(picked.iter().all(|i| i.element_count_weights > 1000));
        assert!(!picked.is_empty());
    }
}
