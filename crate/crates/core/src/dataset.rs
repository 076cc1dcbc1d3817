//! Input data with per-image metadata, deterministic synthetic sets and
//! COCO-style ground-truth export.
//!
//! Synthetic images are drawn from [`FaultRng`] seeded with the data set
//! seed: every element uniform in `[0, 1)`, in sample order. Detection
//! samples then draw 1 to 3 boxes (`index(3) + 1`); per box, the class
//! (`index(classes)`), then `x1 = index(w - 2)`, `y1 = index(h - 2)`,
//! `x2 = x1 + 2 + index(w - x1 - 2)`, `y2` likewise; pixels inside the box
//! get `+1.0` on every channel. Box corners are whole pixels, so they
//! survive COCO's `[x, y, width, height]` form exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::top_k;
use crate::model::{Model, Task};
use crate::rng::FaultRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    /// `(x1, y1, x2, y2)` in pixels.
    pub bbox: [f32; 4],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub image_id: u64,
    pub path: String,
    pub height: usize,
    pub width: usize,
    pub label: Option<usize>,
    pub boxes: Option<Vec<GtBox>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Classification,
    Detection,
}

#[derive(Debug, Clone)]
pub struct DatasetHandle {
    pub name: String,
    pub kind: DatasetKind,
    pub seed: u64,
    pub num_classes: usize,
    /// Off by default; when on, iteration follows a seeded permutation.
    pub shuffle: bool,
    samples: Vec<Sample>,
}

fn random_image(rng: &mut FaultRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.unit_f64() as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn virtual_path(name: &str, id: u64) -> String {
    format!("synthetic://{name}/{id:06}.img")
}

fn check_shape(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() < 3 || shape.contains(&0) {
        return Err(Error::Config(format!("image shape {shape:?} needs channels, height and width")));
    }
    Ok((shape[shape.len() - 2], shape[shape.len() - 1]))
}

impl DatasetHandle {
    pub fn new(name: impl Into<String>, kind: DatasetKind, num_classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut ids = std::collections::HashSet::new();
        for s in &samples {
            if !ids.insert(s.image_id) {
                return Err(Error::Config(format!("duplicate image_id {}", s.image_id)));
            }
            let shape = s.image.shape();
            if shape.len() < 2 || shape[shape.len() - 2] != s.height || shape[shape.len() - 1] != s.width {
                return Err(Error::Config(format!(
                    "image {}: height/width {}x{} disagree with tensor {shape:?}",
                    s.image_id, s.height, s.width
                )));
            }
        }
        Ok(DatasetHandle {
            name: name.into(),
            kind,
            seed: 0,
            num_classes,
            shuffle: false,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    #[cfg(test)]
    pub(crate) fn samples_mut(&mut self) -> &mut [Sample] {
        &mut self.samples
    }

    pub fn get(&self, image_id: u64) -> Option<&Sample> {
        self.samples.iter().find(|s| s.image_id == image_id)
    }

    /// Samples in iteration order.
    pub fn ordered(&self) -> Vec<&Sample> {
        let mut order: Vec<&Sample> = self.samples.iter().collect();
        if self.shuffle {
            let mut rng = FaultRng::new(self.seed ^ 0x5348_5546_464c_4521);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.index(i + 1));
            }
        }
        order
    }

    /// Consecutive batches in iteration order; the last may be partial.
    pub fn batches(&self, batch_size: usize) -> Batches<'_> {
        assert!(batch_size > 0, "batch size must be positive");
        Batches {
            order: self.ordered(),
            batch_size,
            next: 0,
        }
    }

    /// Sets every label to the model's fault-free top-1 class.
    pub fn label_with_model(&mut self, model: &Model) -> Result<()> {
        let Task::Classification { classes } = model.task() else {
            return Err(Error::Config(format!("{} is not a classification model", model.name())));
        };
        if classes != self.num_classes {
            return Err(Error::Config(format!(
                "data set has {} classes, model {} emits {classes}",
                self.num_classes,
                model.name()
            )));
        }
        for s in &mut self.samples {
            let logits = model.forward(&s.image)?;
            s.label = Some(top_k(logits.data(), 1)[0].0);
        }
        Ok(())
    }
}

pub struct Batches<'a> {
    order: Vec<&'a Sample>,
    batch_size: usize,
    next: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Vec<&'a Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.order[self.next..end].to_vec();
        self.next = end;
        Some(batch)
    }
}

pub fn batches(ds: &DatasetHandle, batch_size: usize) -> Batches<'_> {
    ds.batches(batch_size)
}

/// Unlabelled synthetic classification images of any rank-3+ shape.
pub fn synthetic_classification_for_shape(count: usize, shape: &[usize], num_classes: usize, seed: u64) -> Result<DatasetHandle> {
    let (height, width) = check_shape(shape)?;
    let name = format!("synthetic-cls-{seed}");
    let mut rng = FaultRng::new(seed);
    let samples = (0..count as u64)
        .map(|id| Sample {
            image: random_image(&mut rng, shape),
            image_id: id,
            path: virtual_path(&name, id),
            height,
            width,
            label: None,
            boxes: None,
        })
        .collect();
    let mut ds = DatasetHandle::new(name, DatasetKind::Classification, num_classes, samples)?;
    ds.seed = seed;
    Ok(ds)
}

/// `count` images of `channels x h x w`. Labels stay unset until
/// [`DatasetHandle::label_with_model`] runs the fault-free model over them.
pub fn synthetic_classification_dataset(
    count: usize,
    channels: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    synthetic_classification_for_shape(count, &[channels, h, w], num_classes, seed)
}

pub fn synthetic_detection_dataset(
    count: usize,
    channels: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    seed: u64,
) -> Result<DatasetHandle> {
    if h < 3 || w < 3 || num_classes == 0 {
        return Err(Error::Config("detection images need at least 3x3 pixels and one class".into()));
    }
    let name = format!("synthetic-det-{seed}");
    let mut rng = FaultRng::new(seed);
    let mut samples = Vec::with_capacity(count);
    for id in 0..count as u64 {
        let mut image = random_image(&mut rng, &[channels, h, w]);
        let n_boxes = rng.index(3) + 1;
        let mut boxes = Vec::with_capacity(n_boxes);
        for _ in 0..n_boxes {
            let class = rng.index(num_classes);
            let x1 = rng.index(w - 2);
            let y1 = rng.index(h - 2);
            let x2 = x1 + 2 + rng.index(w - x1 - 2);
            let y2 = y1 + 2 + rng.index(h - y1 - 2);
            let data = image.data_mut();
            for c in 0..channels {
                for y in y1..y2 {
                    for x in x1..x2 {
                        data[(c * h + y) * w + x] += 1.0;
                    }
                }
            }
            boxes.push(GtBox {
                bbox: [x1 as f32, y1 as f32, x2 as f32, y2 as f32],
                class,
            });
        }
        samples.push(Sample {
            image,
            image_id: id,
            path: virtual_path(&name, id),
            height: h,
            width: w,
            label: None,
            boxes: Some(boxes),
        });
    }
    let mut ds = DatasetHandle::new(name, DatasetKind::Detection, num_classes, samples)?;
    ds.seed = seed;
    Ok(ds)
}

/// Builds the synthetic set matching `model`'s input and task. Classification
/// sets come labelled by the model.
pub fn synthetic_for_model(model: &Model, count: usize, seed: u64) -> Result<DatasetHandle> {
    let shape = model.input_shape();
    match model.task() {
        Task::Classification { classes } => {
            let mut ds = synthetic_classification_for_shape(count, shape, classes, seed)?;
            ds.label_with_model(model)?;
            Ok(ds)
        }
        Task::Detection { classes, .. } => {
            if shape.len() != 3 {
                return Err(Error::Config(format!("detection input {shape:?} must be CxHxW")));
            }
            synthetic_detection_dataset(count, shape[0], shape[1], shape[2], classes, seed)
        }
    }
}

// COCO-style ground truth ---------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    /// `[x, y, width, height]`; absent for classification labels.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bbox: Option<[f32; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoGroundTruth {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

impl CocoGroundTruth {
    pub fn from_dataset(ds: &DatasetHandle) -> Self {
        let images = ds
            .samples
            .iter()
            .map(|s| CocoImage {
                id: s.image_id,
                file_name: s.path.clone(),
                height: s.height,
                width: s.width,
            })
            .collect();
        let mut annotations = Vec::new();
        for s in &ds.samples {
            if let Some(label) = s.label {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64,
                    image_id: s.image_id,
                    category_id: label,
                    bbox: None,
                });
            }
            for b in s.boxes.iter().flatten() {
                let [x1, y1, x2, y2] = b.bbox;
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64,
                    image_id: s.image_id,
                    category_id: b.class,
                    bbox: Some([x1, y1, x2 - x1, y2 - y1]),
                });
            }
        }
        let categories = (0..ds.num_classes)
            .map(|id| CocoCategory {
                id,
                name: format!("class_{id}"),
            })
            .collect();
        CocoGroundTruth {
            images,
            annotations,
            categories,
        }
    }
}

pub fn export_ground_truth_json(ds: &DatasetHandle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&CocoGroundTruth::from_dataset(ds)).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_ground_truth_json(path: impl AsRef<Path>) -> Result<CocoGroundTruth> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Results(format!("{}: {e}", path.display())))
}

// Descriptor ---------------------------------------------------------------

/// Everything needed to rebuild a synthetic data set bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub name: String,
    pub kind: DatasetKind,
    pub count: usize,
    pub shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub images: Vec<CocoImage>,
}

impl DatasetDescriptor {
    pub fn of(ds: &DatasetHandle) -> Self {
        DatasetDescriptor {
            name: ds.name.clone(),
            kind: ds.kind,
            count: ds.len(),
            shape: ds.samples.first().map(|s| s.image.shape().to_vec()).unwrap_or_default(),
            num_classes: ds.num_classes,
            seed: ds.seed,
            shuffle: ds.shuffle,
            images: CocoGroundTruth::from_dataset(ds).images,
        }
    }

    /// Regenerates the data set for `model` and checks it matches.
    pub fn build(&self, model: &Model) -> Result<DatasetHandle> {
        if self.shape != model.input_shape() {
            return Err(Error::Mismatch(format!(
                "data set shape {:?} does not fit model {} input {:?}",
                self.shape,
                model.name(),
                model.input_shape()
            )));
        }
        let mut ds = synthetic_for_model(model, self.count, self.seed)?;
        ds.shuffle = self.shuffle;
        if DatasetDescriptor::of(&ds) != *self {
            return Err(Error::Mismatch(format!("data set {} cannot be reproduced for model {}", self.name, model.name())));
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("serializable");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Results(format!("{}: {e}", path.display())))
    }
}
