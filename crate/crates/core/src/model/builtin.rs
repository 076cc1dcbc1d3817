//! Desk-scale built-in models with seeded weights.
//!
//! Each model's weights come from [`FaultRng`](crate::rng::FaultRng) seeded
//! with the model name read as a big-endian `u64` (zero-padded to 8 bytes).
//! Layers draw in order: weights `U(-b, b)` with `b = sqrt(6 / fan_in)`,
//! then biases `U(-0.1, 0.1)`.
//!
//! | name       | input       | layers                                                        | params |
//! |------------|-------------|---------------------------------------------------------------|--------|
//! | `tiny-cnn` | 3x16x16     | conv2d 3->8 k3p1, relu, maxpool 2, conv2d 8->16 k3p1, relu, linear 1024->10 | 11642 |
//! | `tiny-3d`  | 2x4x6x6     | conv3d 2->3 k3p1, relu, linear 432->4                          | 1897   |
//! | `tiny-det` | 3x16x16     | conv2d 3->8 k3p1, relu, maxpool 2, conv2d 8->8 k3p1s2, relu, linear 128->40 (5 boxes, 3 classes) | 5968 |

use std::collections::BTreeMap;

use crate::model::{Layer, Model, ParamLayer, ParamOp, Task};
use crate::rng::FaultRng;
use crate::tensor::Tensor;

pub const BUILTIN_NAMES: [&str; 3] = ["tiny-cnn", "tiny-3d", "tiny-det"];

fn name_seed(name: &str) -> u64 {
    let mut bytes = [0u8; 8];
    for (dst, src) in bytes.iter_mut().zip(name.bytes()) {
        *dst = src;
    }
    u64::from_be_bytes(bytes)
}

struct Init(FaultRng);

impl Init {
    fn layer(&mut self, op: ParamOp, shape: Vec<usize>) -> Layer {
        let out = shape[0];
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let n: usize = shape.iter().product();
        let weights = (0..n).map(|_| self.0.range_f32(-bound, bound)).collect();
        let bias = (0..out).map(|_| self.0.range_f32(-0.1, 0.1)).collect();
        Layer::Param(ParamLayer {
            op,
            weights: Tensor::new(shape, weights).expect("shape matches data"),
            bias,
            clip: None,
        })
    }
}

const CONV_P1: ParamOp = ParamOp::Conv2d { stride: 1, padding: 1 };

fn tiny_cnn() -> Model {
    let mut init = Init(FaultRng::new(name_seed("tiny-cnn")));
    let layers = vec![
        init.layer(CONV_P1, vec![8, 3, 3, 3]),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 2, stride: 2 },
        init.layer(CONV_P1, vec![16, 8, 3, 3]),
        Layer::Relu,
        Layer::Flatten,
        init.layer(ParamOp::Linear, vec![10, 1024]),
    ];
    Model::new("tiny-cnn", vec![3, 16, 16], Task::Classification { classes: 10 }, layers)
        .expect("tiny-cnn is well-formed")
}

fn tiny_3d() -> Model {
    let mut init = Init(FaultRng::new(name_seed("tiny-3d")));
    let layers = vec![
        init.layer(ParamOp::Conv3d { stride: 1, padding: 1 }, vec![3, 2, 3, 3, 3]),
        Layer::Relu,
        Layer::Flatten,
        init.layer(ParamOp::Linear, vec![4, 432]),
    ];
    Model::new("tiny-3d", vec![2, 4, 6, 6], Task::Classification { classes: 4 }, layers)
        .expect("tiny-3d is well-formed")
}

fn tiny_det() -> Model {
    let mut init = Init(FaultRng::new(name_seed("tiny-det")));
    let layers = vec![
        init.layer(CONV_P1, vec![8, 3, 3, 3]),
        Layer::Relu,
        Layer::MaxPool2d { kernel: 2, stride: 2 },
        init.layer(ParamOp::Conv2d { stride: 2, padding: 1 }, vec![8, 8, 3, 3]),
        Layer::Relu,
        Layer::Flatten,
        init.layer(ParamOp::Linear, vec![40, 128]),
    ];
    Model::new(
        "tiny-det",
        vec![3, 16, 16],
        Task::Detection { boxes: 5, classes: 3 },
        layers,
    )
    .expect("tiny-det is well-formed")
}

pub fn builtin_model(name: &str) -> Option<Model> {
    match name {
        "tiny-cnn" => Some(tiny_cnn()),
        "tiny-3d" => Some(tiny_3d()),
        "tiny-det" => Some(tiny_det()),
        _ => None,
    }
}

pub fn builtin_models() -> BTreeMap<&'static str, Model> {
    BUILTIN_NAMES
        .iter()
        .map(|&n| (n, builtin_model(n).expect("listed builtin")))
        .collect()
}
