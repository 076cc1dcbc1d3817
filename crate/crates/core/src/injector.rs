//! Applying fault records to executions.
//!
//! Bits are numbered IEEE-754 style: bit 0 is the least significant mantissa
//! bit, bits 23..=30 are the exponent, bit 31 is the sign.
//!
//! Neuron faults replace an element of an injectable layer's output after
//! the bias is added and before clamp or activation. Weight faults mutate a
//! private copy of the model; the base model is never touched.
//!
//! A neuron fault whose batch row differs from the image's position in its
//! batch is not applied to that image.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault_gen::{FaultMatrix, FaultRecord, FaultValue, NeuronSite, WeightSite};
use crate::model::{LayerInfo, LayerKind, LayerTap, Model};
use crate::scenario::{FaultPersistence, InjPolicy, InjectionTarget, RndMode, ScenarioConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipDirection {
    ZeroToOne,
    OneToZero,
    NotApplicable,
}

impl FlipDirection {
    pub fn code(self) -> u8 {
        match self {
            FlipDirection::NotApplicable => 0,
            FlipDirection::ZeroToOne => 1,
            FlipDirection::OneToZero => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FlipDirection::NotApplicable),
            1 => Some(FlipDirection::ZeroToOne),
            2 => Some(FlipDirection::OneToZero),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlipDirection::ZeroToOne => "0->1",
            FlipDirection::OneToZero => "1->0",
            FlipDirection::NotApplicable => "-",
        }
    }
}

/// Flips bit `bit` (0 = mantissa LSB, 31 = sign) of `x`.
pub fn flip_bit(x: f32, bit: u8) -> (f32, FlipDirection) {
    assert!(bit < 32, "bit index {bit} out of range");
    let mask = 1u32 << bit;
    let bits = x.to_bits();
    let dir = if bits & mask == 0 {
        FlipDirection::ZeroToOne
    } else {
        FlipDirection::OneToZero
    };
    (f32::from_bits(bits ^ mask), dir)
}

/// One fault column taking part in an execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveFault {
    pub column: usize,
    pub record: FaultRecord,
}

/// A fault that was actually applied, with the value before and after.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedFault {
    pub column: usize,
    pub record: FaultRecord,
    pub original: f32,
    pub corrupted: f32,
    pub direction: FlipDirection,
}

fn corrupt(value: f32, fault: FaultValue) -> Option<(f32, FlipDirection)> {
    match fault {
        FaultValue::Bit(b) => Some(flip_bit(value, b)),
        FaultValue::Value(v) => Some((v, FlipDirection::NotApplicable)),
        FaultValue::Skip => None,
    }
}

fn location_error(column: usize, reason: impl Into<String>) -> Error {
    Error::FaultLocation {
        column,
        reason: reason.into(),
    }
}

fn layer_info(model: &Model, column: usize, layer: usize) -> Result<&LayerInfo> {
    model.layer_infos().get(layer).ok_or_else(|| {
        location_error(
            column,
            format!("layer {layer} out of range ({} injectable layers)", model.num_injectable()),
        )
    })
}

fn check_depth(column: usize, info: &LayerInfo, depth: Option<usize>, bound: usize) -> Result<usize> {
    match (info.kind == LayerKind::Conv3d, depth) {
        (true, Some(d)) if d < bound => Ok(d),
        (false, None) => Ok(0),
        _ => Err(location_error(
            column,
            format!("depth {depth:?} invalid for {} layer {}", info.kind, info.index),
        )),
    }
}

/// Flat index of a neuron site in its layer's output tensor.
fn neuron_index(model: &Model, column: usize, s: &NeuronSite) -> Result<usize> {
    let info = layer_info(model, column, s.layer)?;
    let [c, d, h, w] = info.neuron_dims;
    let depth = check_depth(column, info, s.depth, d)?;
    if s.channel >= c || s.height >= h || s.width >= w {
        return Err(location_error(
            column,
            format!(
                "neuron ({}, {}, {}) outside layer {} dims {:?}",
                s.channel, s.height, s.width, s.layer, info.neuron_dims
            ),
        ));
    }
    Ok(((s.channel * d + depth) * h + s.height) * w + s.width)
}

/// Flat index of a weight site in its layer's weight tensor.
fn weight_index(model: &Model, column: usize, s: &WeightSite) -> Result<usize> {
    let info = layer_info(model, column, s.layer)?;
    let [o, i, kd, kh, kw] = info.weight_dims;
    let depth = check_depth(column, info, s.k_depth, kd)?;
    if s.out_ch >= o || s.in_ch >= i || s.k_h >= kh || s.k_w >= kw {
        return Err(location_error(
            column,
            format!(
                "weight ({}, {}, {}, {}) outside layer {} dims {:?}",
                s.out_ch, s.in_ch, s.k_h, s.k_w, s.layer, info.weight_dims
            ),
        ));
    }
    Ok((((s.out_ch * i + s.in_ch) * kd + depth) * kh + s.k_h) * kw + s.k_w)
}

struct PlannedNeuron {
    fault: ActiveFault,
    layer: usize,
    batch: usize,
    index: usize,
    value: FaultValue,
}

/// Forward tap that corrupts neuron outputs in place and records what it
/// changed.
pub struct NeuronInjector {
    planned: Vec<PlannedNeuron>,
    applied: Vec<AppliedFault>,
}

impl NeuronInjector {
    /// Validates every fault against `model` up front; an out-of-bounds
    /// location fails here, naming its column.
    pub fn new(model: &Model, faults: &[ActiveFault], mode: RndMode) -> Result<Self> {
        let planned = faults
            .iter()
            .map(|f| {
                let site = f.record.neuron_site().map_err(|r| location_error(f.column, r))?;
                let value = f.record.fault_value(mode).map_err(|r| location_error(f.column, r))?;
                Ok(PlannedNeuron {
                    fault: *f,
                    layer: site.layer,
                    batch: site.batch,
                    index: neuron_index(model, f.column, &site)?,
                    value,
                })
            })
            .collect::<Result<_>>()?;
        Ok(NeuronInjector {
            planned,
            applied: Vec::new(),
        })
    }

    /// Keeps only faults whose batch row equals `position`.
    fn for_position(mut self, position: usize) -> Self {
        self.planned.retain(|p| p.batch == position);
        self
    }

    pub fn applied(&self) -> &[AppliedFault] {
        &self.applied
    }

    pub fn into_applied(self) -> Vec<AppliedFault> {
        self.applied
    }
}

impl LayerTap for NeuronInjector {
    fn intercept(&mut self, layer: usize, output: &mut Tensor) -> Result<()> {
        for p in self.planned.iter().filter(|p| p.layer == layer) {
            let Some(slot) = output.data_mut().get_mut(p.index) else {
                return Err(location_error(p.fault.column, "neuron index past end of output"));
            };
            let original = *slot;
            if let Some((corrupted, direction)) = corrupt(original, p.value) {
                *slot = corrupted;
                self.applied.push(AppliedFault {
                    column: p.fault.column,
                    record: p.fault.record,
                    original,
                    corrupted,
                    direction,
                });
            }
        }
        Ok(())
    }
}

/// Chains an injector in front of another tap: the injector intercepts
/// first and the outer tap observes the corrupted values.
pub(crate) struct Chain<'a> {
    pub first: &'a mut dyn LayerTap,
    pub second: &'a mut dyn LayerTap,
}

impl LayerTap for Chain<'_> {
    fn intercept(&mut self, layer: usize, output: &mut Tensor) -> Result<()> {
        self.first.intercept(layer, output)?;
        self.second.intercept(layer, output)
    }
    fn observe(&mut self, layer: usize, output: &Tensor) {
        self.first.observe(layer, output);
        self.second.observe(layer, output);
    }
}

/// One forward pass of `model` with the neuron faults applied in place.
pub fn apply_neuron_faults(
    model: &Model,
    input: &Tensor,
    faults: &[ActiveFault],
    mode: RndMode,
    tap: &mut dyn LayerTap,
) -> Result<(Tensor, Vec<AppliedFault>)> {
    let mut injector = NeuronInjector::new(model, faults, mode)?;
    let out = model.forward_with(
        input,
        &mut Chain {
            first: &mut injector,
            second: tap,
        },
    )?;
    Ok((out, injector.into_applied()))
}

#[derive(Debug, Clone)]
struct RestoreEntry {
    layer: usize,
    index: usize,
    original: f32,
}

/// A model copy with one fault group applied.
#[derive(Debug, Clone)]
pub struct CorruptedModel {
    model: Arc<Model>,
    target: InjectionTarget,
    mode: RndMode,
    persistence: FaultPersistence,
    faults: Vec<ActiveFault>,
    weight_log: Vec<AppliedFault>,
    restore: Vec<RestoreEntry>,
    /// Epoch this model belongs to.
    pub epoch: usize,
    /// Position of this model within its epoch (image, batch or 0).
    pub step: usize,
}

/// Copies `model` and writes the weight faults into the copy, in order.
pub fn apply_weight_faults(
    model: &Model,
    faults: &[ActiveFault],
    mode: RndMode,
    persistence: FaultPersistence,
) -> Result<CorruptedModel> {
    let mut copy = model.clone();
    let mut weight_log = Vec::new();
    let mut restore = Vec::new();
    for f in faults {
        let site = f.record.weight_site().map_err(|r| location_error(f.column, r))?;
        let value = f.record.fault_value(mode).map_err(|r| location_error(f.column, r))?;
        let index = weight_index(&copy, f.column, &site)?;
        let layer = copy.param_layer_mut(site.layer).expect("checked by weight_index");
        let slot = &mut layer.weights.data_mut()[index];
        let original = *slot;
        if let Some((corrupted, direction)) = corrupt(original, value) {
            *slot = corrupted;
            restore.push(RestoreEntry {
                layer: site.layer,
                index,
                original,
            });
            weight_log.push(AppliedFault {
                column: f.column,
                record: f.record,
                original,
                corrupted,
                direction,
            });
        }
    }
    Ok(CorruptedModel {
        model: Arc::new(copy),
        target: InjectionTarget::Weights,
        mode,
        persistence,
        faults: faults.to_vec(),
        weight_log,
        restore,
        epoch: 0,
        step: 0,
    })
}

impl CorruptedModel {
    fn for_neurons(model: Arc<Model>, faults: Vec<ActiveFault>, mode: RndMode, persistence: FaultPersistence) -> Result<Self> {
        NeuronInjector::new(&model, &faults, mode)?;
        Ok(CorruptedModel {
            model,
            target: InjectionTarget::Neurons,
            mode,
            persistence,
            faults,
            weight_log: Vec::new(),
            restore: Vec::new(),
            epoch: 0,
            step: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn target(&self) -> InjectionTarget {
        self.target
    }

    pub fn persistence(&self) -> FaultPersistence {
        self.persistence
    }

    /// Fault columns active in this model, in column order.
    pub fn faults(&self) -> &[ActiveFault] {
        &self.faults
    }

    /// Weight faults written into this copy.
    pub fn weight_log(&self) -> &[AppliedFault] {
        &self.weight_log
    }

    /// Runs one image at `position` within its batch. Returns the output and
    /// every fault applied during this inference.
    pub fn run(&self, input: &Tensor, position: usize, tap: &mut dyn LayerTap) -> Result<(Tensor, Vec<AppliedFault>)> {
        match self.target {
            InjectionTarget::Weights => {
                let out = self.model.forward_with(input, tap)?;
                Ok((out, self.weight_log.clone()))
            }
            InjectionTarget::Neurons => {
                let mut injector = NeuronInjector::new(&self.model, &self.faults, self.mode)?.for_position(position);
                let out = self.model.forward_with(
                    input,
                    &mut Chain {
                        first: &mut injector,
                        second: tap,
                    },
                )?;
                Ok((out, injector.into_applied()))
            }
        }
    }

    /// The same faults applied to a different base model with identical
    /// layer geometry (e.g. a hardened copy).
    pub fn rebase(&self, base: &Arc<Model>) -> Result<CorruptedModel> {
        let mut out = match self.target {
            InjectionTarget::Weights => apply_weight_faults(base, &self.faults, self.mode, self.persistence)?,
            InjectionTarget::Neurons => {
                CorruptedModel::for_neurons(Arc::clone(base), self.faults.clone(), self.mode, self.persistence)?
            }
        };
        out.epoch = self.epoch;
        out.step = self.step;
        Ok(out)
    }

    /// Undoes every weight fault and returns the restored model.
    pub fn restore(self) -> Model {
        let mut model = Arc::unwrap_or_clone(self.model);
        for e in self.restore.iter().rev() {
            let layer = model.param_layer_mut(e.layer).expect("layer existed when faulted");
            layer.weights.data_mut()[e.index] = e.original;
        }
        model
    }
}

/// Yields one [`CorruptedModel`] per policy scope: per image, per batch or
/// per epoch. Scope `k` consumes columns `k*c .. (k+1)*c`; under permanent
/// persistence all groups since the start of the epoch stay applied.
/// Returns `None` once the campaign's scopes are exhausted.
pub struct FaultIterator {
    base: Arc<Model>,
    matrix: Arc<FaultMatrix>,
    cfg: ScenarioConfig,
    steps_per_epoch: usize,
    next: usize,
}

impl FaultIterator {
    pub fn new(base: Arc<Model>, matrix: Arc<FaultMatrix>, cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        matrix.check_matches(cfg, &base)?;
        let steps_per_epoch = match cfg.inj_policy {
            InjPolicy::PerImage => cfg.dataset_size,
            InjPolicy::PerBatch => cfg.batches_per_epoch(),
            InjPolicy::PerEpoch => 1,
        } as usize;
        Ok(FaultIterator {
            base,
            matrix,
            cfg: cfg.clone(),
            steps_per_epoch,
            next: 0,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.num_runs as usize
    }

    /// The model for scope `step` of `epoch`, independent of the cursor.
    pub fn scope(&self, epoch: usize, step: usize) -> Result<CorruptedModel> {
        if epoch >= self.cfg.num_runs as usize || step >= self.steps_per_epoch {
            return Err(Error::EndOfFaults);
        }
        self.build(epoch * self.steps_per_epoch + step)
    }

    /// Like `next`, but reports exhaustion as [`Error::EndOfFaults`].
    pub fn advance(&mut self) -> Result<CorruptedModel> {
        self.next().unwrap_or(Err(Error::EndOfFaults))
    }

    fn build(&self, k: usize) -> Result<CorruptedModel> {
        let c = self.cfg.max_faults_per_image as usize;
        let epoch = k / self.steps_per_epoch;
        let step = k % self.steps_per_epoch;
        let first_group = match self.cfg.fault_persistence {
            FaultPersistence::Transient => k,
            FaultPersistence::Permanent => epoch * self.steps_per_epoch,
        };
        let faults: Vec<ActiveFault> = (first_group * c..(k + 1) * c)
            .map(|column| ActiveFault {
                column,
                record: self.matrix.columns[column],
            })
            .collect();
        let mode = self.cfg.rnd_mode;
        let persistence = self.cfg.fault_persistence;
        let mut cm = match self.cfg.injection_target {
            InjectionTarget::Weights => apply_weight_faults(&self.base, &faults, mode, persistence)?,
            InjectionTarget::Neurons => CorruptedModel::for_neurons(Arc::clone(&self.base), faults, mode, persistence)?,
        };
        cm.epoch = epoch;
        cm.step = step;
        Ok(cm)
    }
}

impl Iterator for FaultIterator {
    type Item = Result<CorruptedModel>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.total_steps() {
            return None;
        }
        let k = self.next;
        self.next += 1;
        Some(self.build(k))
    }
}

pub fn make_fault_iterator(model: Arc<Model>, matrix: Arc<FaultMatrix>, cfg: &ScenarioConfig) -> Result<FaultIterator> {
    FaultIterator::new(model, matrix, cfg)
}
