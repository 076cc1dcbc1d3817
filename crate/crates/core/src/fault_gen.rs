//! Fault matrix generation and the `ALFF` fault file.
//!
//! Every fault of a campaign is drawn before the first inference. Column `j`
//! holds one fault; columns `g*c .. (g+1)*c` form fault group `g`, the
//! faults applied together to one image (or batch, or epoch, depending on
//! the injection policy).
//!
//! Row layout for neuron faults: `batch, layer, channel, depth, height,
//! width, value`. For weight faults: `layer, out_ch, in_ch, k_depth, k_h,
//! k_w, value`. Depth is `-1` outside conv3d; linear layers use `0` for the
//! unused spatial coordinates. The value row holds the bit index (as an
//! integral float) for bit flips, the literal replacement value for random
//! values, and `0` for no-op runs.
//!
//! # Draw order
//!
//! One [`FaultRng`] seeded with the matrix seed produces, per fault:
//! 1. the layer: `unit_f64()` against the cumulative weights for
//!    size-proportional selection, or `index(L)` for uniform selection;
//! 2. neuron faults under a per-batch or per-epoch policy: the batch row,
//!    `index(batch_size)`; under per-image it is the image's position in its
//!    batch and is not drawn;
//! 3. the coordinates in row order, `index(dim)` each, skipping depth
//!    outside conv3d and the spatial axes of linear layers;
//! 4. if the location repeats one already in the group, steps 1 to 3 are
//!    redrawn;
//! 5. the value: `lo + index(hi - lo + 1)` for bit flips,
//!    `range_f32(min, max)` for random values, nothing for no-op.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::binio::{split_crc, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{enumerate_injectable_layers, LayerInfo, LayerKind, Model};
use crate::rng::FaultRng;
use crate::scenario::{InjPolicy, InjectionTarget, LayerWeighting, RndMode, ScenarioConfig};

const MAGIC: &[u8; 4] = b"ALFF";
const VERSION: u16 = 1;
const ROWS: u8 = 7;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 8 + 8;
const RECORD_LEN: usize = 7 * 8;

/// One column of the fault matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultRecord {
    pub coords: [i64; 6],
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NeuronSite {
    pub batch: usize,
    pub layer: usize,
    pub channel: usize,
    pub depth: Option<usize>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightSite {
    pub layer: usize,
    pub out_ch: usize,
    pub in_ch: usize,
    pub k_depth: Option<usize>,
    pub k_h: usize,
    pub k_w: usize,
}

/// A fault's value row interpreted under a corruption mode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaultValue {
    Bit(u8),
    Value(f32),
    Skip,
}

fn coord(v: i64, name: &str) -> std::result::Result<usize, String> {
    usize::try_from(v).map_err(|_| format!("negative {name} coordinate {v}"))
}

fn depth(v: i64) -> std::result::Result<Option<usize>, String> {
    match v {
        -1 => Ok(None),
        d => coord(d, "depth").map(Some),
    }
}

impl FaultRecord {
    pub fn neuron(site: NeuronSite, value: f64) -> Self {
        FaultRecord {
            coords: [
                site.batch as i64,
                site.layer as i64,
                site.channel as i64,
                site.depth.map_or(-1, |d| d as i64),
                site.height as i64,
                site.width as i64,
            ],
            value,
        }
    }

    pub fn weight(site: WeightSite, value: f64) -> Self {
        FaultRecord {
            coords: [
                site.layer as i64,
                site.out_ch as i64,
                site.in_ch as i64,
                site.k_depth.map_or(-1, |d| d as i64),
                site.k_h as i64,
                site.k_w as i64,
            ],
            value,
        }
    }

    pub fn neuron_site(&self) -> std::result::Result<NeuronSite, String> {
        let c = self.coords;
        Ok(NeuronSite {
            batch: coord(c[0], "batch")?,
            layer: coord(c[1], "layer")?,
            channel: coord(c[2], "channel")?,
            depth: depth(c[3])?,
            height: coord(c[4], "height")?,
            width: coord(c[5], "width")?,
        })
    }

    pub fn weight_site(&self) -> std::result::Result<WeightSite, String> {
        let c = self.coords;
        Ok(WeightSite {
            layer: coord(c[0], "layer")?,
            out_ch: coord(c[1], "out_ch")?,
            in_ch: coord(c[2], "in_ch")?,
            k_depth: depth(c[3])?,
            k_h: coord(c[4], "k_h")?,
            k_w: coord(c[5], "k_w")?,
        })
    }

    /// Injectable-layer index, whichever the target.
    pub fn layer(&self, target: InjectionTarget) -> i64 {
        match target {
            InjectionTarget::Neurons => self.coords[1],
            InjectionTarget::Weights => self.coords[0],
        }
    }

    pub fn fault_value(&self, mode: RndMode) -> std::result::Result<FaultValue, String> {
        match mode {
            RndMode::NoOp => Ok(FaultValue::Skip),
            RndMode::RandomValue => Ok(FaultValue::Value(self.value as f32)),
            RndMode::BitFlip => {
                let v = self.value;
                if v.fract() == 0.0 && (0.0..=31.0).contains(&v) {
                    Ok(FaultValue::Bit(v as u8))
                } else {
                    Err(format!("bit index {v} outside 0..=31"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultMatrix {
    pub target: InjectionTarget,
    pub seed: u64,
    pub scenario_hash: u64,
    pub columns: Vec<FaultRecord>,
}

impl FaultMatrix {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Refuses a matrix that was not generated for `cfg` on `model`.
    pub fn check_matches(&self, cfg: &ScenarioConfig, model: &Model) -> Result<()> {
        let expected = cfg.digest(model.name());
        if self.scenario_hash != expected {
            return Err(Error::Mismatch(format!(
                "fault matrix scenario hash {:#018x} does not match scenario on model {} ({expected:#018x})",
                self.scenario_hash,
                model.name()
            )));
        }
        if self.target != cfg.injection_target {
            return Err(Error::Mismatch(format!(
                "fault matrix targets {:?}, scenario targets {:?}",
                self.target, cfg.injection_target
            )));
        }
        let n = cfg.num_faults_required();
        if self.columns.len() as u64 != n {
            return Err(Error::Mismatch(format!(
                "fault matrix has {} columns, scenario needs {n}",
                self.columns.len()
            )));
        }
        Ok(())
    }
}

/// Size-proportional layer weights: each layer's element count over the total, using
/// activation counts for neuron targets and weight counts for weight targets.
pub fn layer_selection_weights(layers: &[LayerInfo], target: InjectionTarget) -> Vec<f64> {
    let count = |l: &LayerInfo| match target {
        InjectionTarget::Neurons => l.element_count_neurons,
        InjectionTarget::Weights => l.element_count_weights,
    } as f64;
    let total: f64 = layers.iter().map(count).sum();
    layers.iter().map(|l| count(l) / total).collect()
}

struct LayerPicker {
    cumulative: Option<Vec<f64>>,
    len: usize,
}

impl LayerPicker {
    fn new(layers: &[LayerInfo], cfg: &ScenarioConfig) -> Self {
        let cumulative = match cfg.layer_weighting {
            LayerWeighting::Uniform => None,
            LayerWeighting::SizeProportional => {
                let mut acc = 0.0;
                Some(
                    layer_selection_weights(layers, cfg.injection_target)
                        .into_iter()
                        .map(|w| {
                            acc += w;
                            acc
                        })
                        .collect(),
                )
            }
        };
        LayerPicker {
            cumulative,
            len: layers.len(),
        }
    }

    fn pick(&self, rng: &mut FaultRng) -> usize {
        match &self.cumulative {
            None => rng.index(self.len),
            Some(cum) => {
                let u = rng.unit_f64();
                cum.iter().position(|&c| u < c).unwrap_or(self.len - 1)
            }
        }
    }
}

fn draw_neuron(rng: &mut FaultRng, info: &LayerInfo, batch: usize) -> NeuronSite {
    let [c, d, h, w] = info.neuron_dims;
    let channel = rng.index(c);
    let depth = (info.kind == LayerKind::Conv3d).then(|| rng.index(d));
    let (height, width) = if info.kind == LayerKind::Linear {
        (0, 0)
    } else {
        (rng.index(h), rng.index(w))
    };
    NeuronSite {
        batch,
        layer: info.index,
        channel,
        depth,
        height,
        width,
    }
}

fn draw_weight(rng: &mut FaultRng, info: &LayerInfo) -> WeightSite {
    let [o, i, kd, kh, kw] = info.weight_dims;
    let out_ch = rng.index(o);
    let in_ch = rng.index(i);
    let k_depth = (info.kind == LayerKind::Conv3d).then(|| rng.index(kd));
    let (k_h, k_w) = if info.kind == LayerKind::Linear {
        (0, 0)
    } else {
        (rng.index(kh), rng.index(kw))
    };
    WeightSite {
        layer: info.index,
        out_ch,
        in_ch,
        k_depth,
        k_h,
        k_w,
    }
}

/// Pre-generates all `n = a*b*c` faults for `cfg` on `model`.
pub fn generate_fault_matrix(model: &Model, cfg: &ScenarioConfig, seed: u64) -> Result<FaultMatrix> {
    cfg.validate()?;
    let layers = enumerate_injectable_layers(model, &cfg.layer_kinds, cfg.layer_range)?;
    let target = cfg.injection_target;
    let c = cfg.max_faults_per_image;
    let batch_size = cfg.batch_size as usize;
    let drawn_batch = target == InjectionTarget::Neurons && cfg.inj_policy != InjPolicy::PerImage;

    let capacity: u128 = layers
        .iter()
        .map(|l| match target {
            InjectionTarget::Neurons => l.element_count_neurons as u128,
            InjectionTarget::Weights => l.element_count_weights as u128,
        })
        .sum::<u128>()
        * if drawn_batch { batch_size as u128 } else { 1 };
    if (c as u128) > capacity {
        return Err(Error::validation(
            "max_faults_per_image",
            format!("{c} distinct faults requested but only {capacity} locations are selectable"),
        ));
    }

    let n = cfg.num_faults_required();
    let groups = n / c;
    let picker = LayerPicker::new(&layers, cfg);
    let mut rng = FaultRng::new(seed);
    let mut columns = Vec::with_capacity(n as usize);
    let mut seen = HashSet::new();

    for g in 0..groups {
        seen.clear();
        let image_in_epoch = (g % cfg.dataset_size) as usize;
        for _ in 0..c {
            let record_coords = loop {
                let info = &layers[picker.pick(&mut rng)];
                let coords = match target {
                    InjectionTarget::Neurons => {
                        let batch = if drawn_batch {
                            rng.index(batch_size)
                        } else {
                            image_in_epoch % batch_size
                        };
                        FaultRecord::neuron(draw_neuron(&mut rng, info, batch), 0.0).coords
                    }
                    InjectionTarget::Weights => FaultRecord::weight(draw_weight(&mut rng, info), 0.0).coords,
                };
                if seen.insert(coords) {
                    break coords;
                }
            };
            let value = match cfg.rnd_mode {
                RndMode::BitFlip => {
                    let (lo, hi) = cfg.rnd_bit_range.expect("validated");
                    (lo as u64 + rng.below((hi - lo) as u64 + 1)) as f64
                }
                RndMode::RandomValue => {
                    let (lo, hi) = cfg.value_range.expect("validated");
                    rng.range_f32(lo, hi) as f64
                }
                RndMode::NoOp => 0.0,
            };
            columns.push(FaultRecord {
                coords: record_coords,
                value,
            });
        }
    }

    Ok(FaultMatrix {
        target,
        seed,
        scenario_hash: cfg.digest(model.name()),
        columns,
    })
}

pub fn fault_matrix_to_bytes(m: &FaultMatrix) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u8(match m.target {
        InjectionTarget::Neurons => 0,
        InjectionTarget::Weights => 1,
    });
    w.u8(ROWS);
    w.u64(m.columns.len() as u64);
    w.u64(m.seed);
    w.u64(m.scenario_hash);
    for rec in &m.columns {
        for &c in &rec.coords {
            w.i64(c);
        }
        w.f64(rec.value);
    }
    w.finish_with_crc()
}

pub fn fault_matrix_from_bytes(data: &[u8]) -> Result<FaultMatrix> {
    let mut r = ByteReader::new(data);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "fault file",
            found: version,
            expected: VERSION,
        });
    }
    let target = match r.u8()? {
        0 => InjectionTarget::Neurons,
        1 => InjectionTarget::Weights,
        other => return Err(r.error(format!("unknown target {other}"))),
    };
    let rows = r.u8()?;
    if rows != ROWS {
        return Err(r.error(format!("expected {ROWS} rows, found {rows}")));
    }
    let cols = r.u64()?;
    let seed = r.u64()?;
    let scenario_hash = r.u64()?;
    let expected_len = (cols as u128) * RECORD_LEN as u128 + (HEADER_LEN + 4) as u128;
    if (data.len() as u128) < expected_len {
        return Err(Error::Parse {
            offset: data.len(),
            reason: format!("truncated: {cols} columns need {expected_len} bytes, file has {}", data.len()),
        });
    }
    if (data.len() as u128) > expected_len {
        return Err(Error::Parse {
            offset: expected_len as usize,
            reason: "trailing bytes after checksum".into(),
        });
    }
    split_crc(data)?;
    let columns = (0..cols)
        .map(|_| {
            let mut coords = [0i64; 6];
            for c in &mut coords {
                *c = r.i64()?;
            }
            Ok(FaultRecord {
                coords,
                value: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FaultMatrix {
        target,
        seed,
        scenario_hash,
        columns,
    })
}

pub fn save_fault_matrix(m: &FaultMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, fault_matrix_to_bytes(m)).map_err(|e| Error::io(path, e))
}

pub fn load_fault_matrix(path: impl AsRef<Path>) -> Result<FaultMatrix> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    fault_matrix_from_bytes(&data)
}
