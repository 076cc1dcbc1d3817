//! Per-layer monitoring, range profiling and clipper hardening.

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetHandle;
use crate::error::{Error, Result};
use crate::evaluation::Leg;
use crate::model::{ClipRange, LayerTap, Model};
use crate::tensor::Tensor;

/// `(nan, inf)`: whether the tensor holds any NaN, any infinity.
pub fn detect_nan_inf(t: &Tensor) -> (bool, bool) {
    let mut nan = false;
    let mut inf = false;
    for v in t.data() {
        nan |= v.is_nan();
        inf |= v.is_infinite();
    }
    (nan, inf)
}

/// One injectable layer's output during one inference of one leg.
#[derive(Debug, Clone, Copy)]
pub struct LayerEvent<'a> {
    pub leg: Leg,
    pub epoch: usize,
    pub batch_index: usize,
    pub image_id: u64,
    pub layer: usize,
    pub output: &'a Tensor,
}

/// Observes layer outputs. Monitors see tensors after the fault and any
/// clip were applied; they cannot change them.
pub trait Monitor: Send {
    fn observe(&mut self, event: &LayerEvent<'_>);
}

impl<F: FnMut(&LayerEvent<'_>) + Send> Monitor for F {
    fn observe(&mut self, event: &LayerEvent<'_>) {
        self(event)
    }
}

/// Per injectable layer, the smallest and largest output value seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeProfile {
    pub ranges: Vec<(f32, f32)>,
}

#[derive(Debug, Clone, Default)]
struct RangeAccumulator {
    ranges: Vec<Option<(f32, f32)>>,
}

impl RangeAccumulator {
    fn add(&mut self, layer: usize, t: &Tensor) {
        if self.ranges.len() <= layer {
            self.ranges.resize(layer + 1, None);
        }
        for &v in t.data().iter().filter(|v| !v.is_nan()) {
            let slot = &mut self.ranges[layer];
            *slot = Some(match *slot {
                None => (v, v),
                Some((lo, hi)) => (lo.min(v), hi.max(v)),
            });
        }
    }

    fn finish(self, layers: usize) -> Result<RangeProfile> {
        if self.ranges.len() != layers {
            return Err(Error::Config(format!("profile saw {} of {layers} layers", self.ranges.len())));
        }
        let ranges = self
            .ranges
            .into_iter()
            .enumerate()
            .map(|(i, r)| r.ok_or_else(|| Error::Config(format!("layer {i} produced no comparable values"))))
            .collect::<Result<_>>()?;
        Ok(RangeProfile { ranges })
    }
}

impl LayerTap for RangeAccumulator {
    fn observe(&mut self, layer: usize, output: &Tensor) {
        self.add(layer, output);
    }
}

/// Fault-free min/max of every injectable layer over the whole data set.
pub fn profile_ranges(model: &Model, ds: &DatasetHandle) -> Result<RangeProfile> {
    if ds.is_empty() {
        return Err(Error::Config("cannot profile an empty data set".into()));
    }
    let mut acc = RangeAccumulator::default();
    for s in ds.samples() {
        model.forward_with(&s.image, &mut acc)?;
    }
    acc.finish(model.num_injectable())
}

/// Monitor that builds a [`RangeProfile`] from the fault-free leg.
#[derive(Debug, Clone, Default)]
pub struct RangeMonitor {
    acc: RangeAccumulator,
}

impl RangeMonitor {
    pub fn profile(&self, layers: usize) -> Result<RangeProfile> {
        self.acc.clone().finish(layers)
    }
}

impl Monitor for RangeMonitor {
    fn observe(&mut self, event: &LayerEvent<'_>) {
        if event.leg == Leg::Orig {
            self.acc.add(event.layer, event.output);
        }
    }
}

/// Copy of `model` whose injectable-layer outputs are clamped to the
/// profiled ranges before activation. NaN clamps to the lower bound.
pub fn harden_with_clipper(model: &Model, profile: &RangeProfile) -> Result<Model> {
    let clips: Vec<ClipRange> = profile.ranges.iter().map(|&(lo, hi)| ClipRange { lo, hi }).collect();
    model.with_clips(&clips)
}

/// Tap used for every leg: tracks NaN/Inf and optionally keeps copies of
/// the layer outputs for monitors.
#[derive(Default)]
pub(crate) struct LegTap {
    pub nan: bool,
    pub inf: bool,
    pub capture: Option<Vec<(usize, Tensor)>>,
}

impl LegTap {
    pub fn new(capture: bool) -> Self {
        LegTap {
            nan: false,
            inf: false,
            capture: capture.then(Vec::new),
        }
    }

    pub fn check(&mut self, t: &Tensor) {
        let (n, i) = detect_nan_inf(t);
        self.nan |= n;
        self.inf |= i;
    }
}

impl LayerTap for LegTap {
    fn observe(&mut self, layer: usize, output: &Tensor) {
        self.check(output);
        if let Some(c) = &mut self.capture {
            c.push((layer, output.clone()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synthetic_classification_dataset, synthetic_for_model};
    use crate::injector::{apply_neuron_faults, ActiveFault};
    use crate::fault_gen::{FaultRecord, NeuronSite};
    use crate::model::builtin_model;
    use crate::scenario::RndMode;

    #[test]
    fn nan_inf_examples() {
        let t = |v: Vec<f32>| Tensor::from_vec(v);
        assert_eq!(detect_nan_inf(&t(vec![1.0, 2.0, 3.0])), (false, false));
        assert_eq!(detect_nan_inf(&t(vec![1.0, f32::NAN])), (true, false));
        assert_eq!(detect_nan_inf(&t(vec![f32::NEG_INFINITY, 0.0])), (false, true));
        assert_eq!(detect_nan_inf(&t(vec![f32::INFINITY, f32::NAN])), (true, true));
    }

    #[test]
    fn zero_input_profile_is_bias_propagation() {
        let m = builtin_model("tiny-cnn").unwrap();
        let mut ds = synthetic_classification_dataset(3, 3, 16, 16, 10, 0).unwrap();
        for s in ds.samples_mut() {
            s.image = Tensor::zeros(vec![3, 16, 16]);
        }
        let p = profile_ranges(&m, &ds).unwrap();
        // first conv sees only zero padding and zero pixels: every output is its bias
        let b = &m.param_layer(0).unwrap().bias;
        let lo = b.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = b.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(p.ranges[0], (lo, hi));
        for (lo, hi) in &p.ranges {
            assert!(lo <= hi);
        }
    }

    #[test]
    fn hardened_model_matches_on_profiling_set() {
        for name in ["tiny-cnn", "tiny-3d", "tiny-det"] {
            let m = builtin_model(name).unwrap();
            let ds = synthetic_for_model(&m, 16, 7).unwrap();
            let p = profile_ranges(&m, &ds).unwrap();
            assert_eq!(p, profile_ranges(&m, &ds).unwrap());
            let h = harden_with_clipper(&m, &p).unwrap();
            for s in ds.samples() {
                assert!(m.forward(&s.image).unwrap().bit_eq(&h.forward(&s.image).unwrap()));
            }
        }
    }

    #[test]
    fn clipper_contains_exponent_flip() {
        let m = builtin_model("tiny-cnn").unwrap();
        let ds = synthetic_for_model(&m, 8, 3).unwrap();
        let h = harden_with_clipper(&m, &profile_ranges(&m, &ds).unwrap()).unwrap();
        let img = &ds.samples()[0].image;
        // a value below 1 in magnitude: bit 30 makes it enormous
        let pre = m.run_layers(img, 0..1).unwrap();
        let idx = pre.data().iter().position(|v| v.abs() < 1.0 && *v != 0.0).unwrap();
        let site = NeuronSite {
            batch: 0,
            layer: 0,
            channel: idx / 256,
            depth: None,
            height: idx / 16 % 16,
            width: idx % 16,
        };
        let fault = [ActiveFault {
            column: 0,
            record: FaultRecord::neuron(site, 30.0),
        }];
        let mut tap = LegTap::new(false);
        let (out, applied) = apply_neuron_faults(&h, img, &fault, RndMode::BitFlip, &mut tap).unwrap();
        assert_eq!(applied.len(), 1);
        assert!(applied[0].corrupted.abs() > 1e30);
        tap.check(&out);
        assert!(!tap.nan && !tap.inf);
    }

    #[test]
    fn range_monitor_reproduces_profile() {
        let m = builtin_model("tiny-cnn").unwrap();
        let ds = synthetic_for_model(&m, 5, 2).unwrap();
        let mut mon = RangeMonitor::default();
        for s in ds.samples() {
            let mut tap = LegTap::new(true);
            m.forward_with(&s.image, &mut tap).unwrap();
            for (layer, t) in tap.capture.unwrap() {
                let ev = LayerEvent {
                    leg: Leg::Orig,
                    epoch: 0,
                    batch_index: 0,
                    image_id: s.image_id,
                    layer,
                    output: &t,
                };
                mon.observe(&ev);
            }
        }
        assert_eq!(mon.profile(m.num_injectable()).unwrap(), profile_ranges(&m, &ds).unwrap());
    }
}
