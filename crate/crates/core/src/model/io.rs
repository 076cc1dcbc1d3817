//! `ALFM` model files.
//!
//! All integers little-endian, floats as raw IEEE-754 bits:
//!
//! ```text
//! "ALFM" | version u16 = 1
//! name: len u32, utf-8 bytes
//! input shape: rank u8, dims u32 x rank
//! task u8: 0 = classification (classes u32), 1 = detection (boxes u32, classes u32)
//! layer count u32, then per layer a tag u8:
//!   0 conv2d / 1 conv3d: stride u32, padding u32, <params>
//!   2 linear: <params>
//!   3 relu | 4 maxpool2d (kernel u32, stride u32) | 5 softmax | 6 flatten
//! <params> = weight rank u8, dims u32 x rank, weights f32 x numel,
//!            bias len u32, bias f32 x len, clip u8 (0 | 1 followed by lo f32, hi f32)
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{ClipRange, Layer, Model, ParamLayer, ParamOp, Task};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ALFM";
const VERSION: u16 = 1;

fn write_params(w: &mut ByteWriter, p: &ParamLayer) {
    let shape = p.weights.shape();
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    for &v in p.weights.data() {
        w.f32(v);
    }
    w.u32(p.bias.len() as u32);
    for &v in &p.bias {
        w.f32(v);
    }
    match p.clip {
        None => w.u8(0),
        Some(ClipRange { lo, hi }) => {
            w.u8(1);
            w.f32(lo);
            w.f32(hi);
        }
    }
}

pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u32(model.name.len() as u32);
    w.bytes(model.name.as_bytes());
    w.u8(model.input_shape.len() as u8);
    for &d in &model.input_shape {
        w.u32(d as u32);
    }
    match model.task {
        Task::Classification { classes } => {
            w.u8(0);
            w.u32(classes as u32);
        }
        Task::Detection { boxes, classes } => {
            w.u8(1);
            w.u32(boxes as u32);
            w.u32(classes as u32);
        }
    }
    w.u32(model.layers.len() as u32);
    for layer in &model.layers {
        match layer {
            Layer::Param(p) => match p.op {
                ParamOp::Conv2d { stride, padding } | ParamOp::Conv3d { stride, padding } => {
                    w.u8(if matches!(p.op, ParamOp::Conv2d { .. }) { 0 } else { 1 });
                    w.u32(stride as u32);
                    w.u32(padding as u32);
                    write_params(&mut w, p);
                }
                ParamOp::Linear => {
                    w.u8(2);
                    write_params(&mut w, p);
                }
            },
            Layer::Relu => w.u8(3),
            Layer::MaxPool2d { kernel, stride } => {
                w.u8(4);
                w.u32(*kernel as u32);
                w.u32(*stride as u32);
            }
            Layer::Softmax => w.u8(5),
            Layer::Flatten => w.u8(6),
        }
    }
    w.buf
}

fn read_dims(r: &mut ByteReader<'_>) -> Result<Vec<usize>> {
    let rank = r.u8()? as usize;
    (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
}

fn read_f32s(r: &mut ByteReader<'_>, n: usize) -> Result<Vec<f32>> {
    if r.remaining() / 4 < n {
        return Err(r.error(format!("truncated: expected {n} floats")));
    }
    (0..n).map(|_| r.f32()).collect()
}

fn read_params(r: &mut ByteReader<'_>, op: ParamOp) -> Result<ParamLayer> {
    let at = r.offset();
    let shape = read_dims(r)?;
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.ok_or_else(|| r.error("weight shape overflows"))?;
    let data = read_f32s(r, numel)?;
    let weights = Tensor::new(shape, data).map_err(|e| Error::Parse {
        offset: at,
        reason: e.to_string(),
    })?;
    let n_bias = r.u32()? as usize;
    let bias = read_f32s(r, n_bias)?;
    let clip = match r.u8()? {
        0 => None,
        1 => Some(ClipRange {
            lo: r.f32()?,
            hi: r.f32()?,
        }),
        other => return Err(r.error(format!("invalid clip flag {other}"))),
    };
    Ok(ParamLayer { op, weights, bias, clip })
}

pub fn model_from_bytes(data: &[u8]) -> Result<Model> {
    let mut r = ByteReader::new(data);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "model file",
            found: version,
            expected: VERSION,
        });
    }
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| r.error("model name is not utf-8"))?
        .to_owned();
    let input_shape = read_dims(&mut r)?;
    let task = match r.u8()? {
        0 => Task::Classification {
            classes: r.u32()? as usize,
        },
        1 => Task::Detection {
            boxes: r.u32()? as usize,
            classes: r.u32()? as usize,
        },
        other => return Err(r.error(format!("unknown task tag {other}"))),
    };
    let count = r.u32()? as usize;
    let mut layers = Vec::new();
    for _ in 0..count {
        let tag_at = r.offset();
        let layer = match r.u8()? {
            tag @ (0 | 1) => {
                let stride = r.u32()? as usize;
                let padding = r.u32()? as usize;
                let op = if tag == 0 {
                    ParamOp::Conv2d { stride, padding }
                } else {
                    ParamOp::Conv3d { stride, padding }
                };
                Layer::Param(read_params(&mut r, op)?)
            }
            2 => Layer::Param(read_params(&mut r, ParamOp::Linear)?),
            3 => Layer::Relu,
            4 => Layer::MaxPool2d {
                kernel: r.u32()? as usize,
                stride: r.u32()? as usize,
            },
            5 => Layer::Softmax,
            6 => Layer::Flatten,
            other => {
                return Err(Error::Parse {
                    offset: tag_at,
                    reason: format!("unknown layer tag {other}"),
                })
            }
        };
        layers.push(layer);
    }
    if r.remaining() != 0 {
        return Err(r.error(format!("{} trailing bytes", r.remaining())));
    }
    let end = r.offset();
    Model::new(name, input_shape, task, layers).map_err(|e| Error::Parse {
        offset: end,
        reason: format!("inconsistent model: {e}"),
    })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_models;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (name, m) in builtin_models() {
            let path = dir.path().join(format!("{name}.alfm"));
            save_model(&m, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.weight_digest(), m.weight_digest());
            assert_eq!(back.layer_infos(), m.layer_infos());
            assert_eq!(model_to_bytes(&back), fs::read(&path).unwrap());
        }
    }

    #[test]
    fn clip_ranges_survive() {
        let m = crate::model::builtin_model("tiny-3d").unwrap();
        let clipped = m
            .with_clips(&[ClipRange { lo: -1.0, hi: 2.5 }, ClipRange { lo: 0.0, hi: 0.0 }])
            .unwrap();
        let back = model_from_bytes(&model_to_bytes(&clipped)).unwrap();
        assert_eq!(back, clipped);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = model_to_bytes(&crate::model::builtin_model("tiny-cnn").unwrap());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match model_from_bytes(&bytes[..cut]) {
                Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                other => panic!("cut {cut}: {other:?}"),
            }
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = model_to_bytes(&crate::model::builtin_model("tiny-3d").unwrap());
        bytes[4] = 9;
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Parse { offset: 0, .. })));
    }
}
