//! Campaign configuration: the scenario file.
//!
//! A scenario is a flat YAML mapping. Required keys: `dataset_size`,
//! `num_runs`, `max_faults_per_image`, `injection_target`, `rnd_mode`, plus
//! `rnd_bit_range` for `bitflip` and `value_range` for `random_value`.
//! Optional keys and their defaults:
//!
//! | key                 | default                      |
//! |---------------------|------------------------------|
//! | `layer_kinds`       | `[conv2d, conv3d, linear]`   |
//! | `layer_range`       | none (all layers)            |
//! | `layer_weighting`   | `size_proportional`          |
//! | `inj_policy`        | `per_image`                  |
//! | `fault_persistence` | `transient`                  |
//! | `batch_size`        | `1`                          |
//! | `seed`              | `0`                          |
//!
//! Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::error::{Error, Result};
use crate::model::{Fnv1a, LayerKind};

/// Environment variable overriding the fault seed.
pub const ENV_SEED: &str = "FAULTFORGE_SEED";
/// Environment variable overriding the output location.
pub const ENV_OUT: &str = "FAULTFORGE_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjectionTarget {
    Neurons,
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerWeighting {
    Uniform,
    SizeProportional,
}

/// How a fault corrupts its target value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RndMode {
    #[serde(rename = "bitflip")]
    BitFlip,
    RandomValue,
    /// Faults are generated but never applied; a control run.
    NoOp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InjPolicy {
    PerImage,
    PerBatch,
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultPersistence {
    Transient,
    Permanent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// `a`: images per epoch.
    pub dataset_size: u64,
    /// `b`: epochs.
    pub num_runs: u64,
    /// `c`: faults per image.
    pub max_faults_per_image: u64,
    pub injection_target: InjectionTarget,
    pub layer_kinds: BTreeSet<LayerKind>,
    pub layer_range: Option<(usize, usize)>,
    pub layer_weighting: LayerWeighting,
    pub rnd_mode: RndMode,
    pub rnd_bit_range: Option<(u8, u8)>,
    pub value_range: Option<(f32, f32)>,
    pub inj_policy: InjPolicy,
    pub fault_persistence: FaultPersistence,
    pub batch_size: u64,
    pub seed: u64,
}

const KNOWN_KEYS: [&str; 14] = [
    "dataset_size",
    "num_runs",
    "max_faults_per_image",
    "injection_target",
    "layer_kinds",
    "layer_range",
    "layer_weighting",
    "rnd_mode",
    "rnd_bit_range",
    "value_range",
    "inj_policy",
    "fault_persistence",
    "batch_size",
    "seed",
];

impl ScenarioConfig {
    /// A valid single-fault bit-flip scenario over all injectable layers.
    pub fn new(dataset_size: u64, num_runs: u64, max_faults_per_image: u64, target: InjectionTarget) -> Self {
        ScenarioConfig {
            dataset_size,
            num_runs,
            max_faults_per_image,
            injection_target: target,
            layer_kinds: LayerKind::INJECTABLE.into_iter().collect(),
            layer_range: None,
            layer_weighting: LayerWeighting::SizeProportional,
            rnd_mode: RndMode::BitFlip,
            rnd_bit_range: Some((0, 31)),
            value_range: None,
            inj_policy: InjPolicy::PerImage,
            fault_persistence: FaultPersistence::Transient,
            batch_size: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("dataset_size", self.dataset_size),
            ("num_runs", self.num_runs),
            ("max_faults_per_image", self.max_faults_per_image),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::validation(key, "must be a positive integer"));
            }
        }
        self.dataset_size
            .checked_mul(self.num_runs)
            .and_then(|ab| ab.checked_mul(self.max_faults_per_image))
            .ok_or_else(|| Error::validation("max_faults_per_image", "a*b*c overflows 64 bits"))?;
        if self.layer_kinds.is_empty() {
            return Err(Error::validation("layer_kinds", "must name at least one layer kind"));
        }
        if let Some(k) = self.layer_kinds.iter().find(|k| !k.is_injectable()) {
            return Err(Error::validation(
                "layer_kinds",
                format!("{k} is not injectable (conv2d, conv3d, linear)"),
            ));
        }
        if let Some((lo, hi)) = self.layer_range {
            if lo > hi {
                return Err(Error::validation("layer_range", format!("[{lo}, {hi}] is not ordered")));
            }
        }
        match self.rnd_bit_range {
            Some((lo, hi)) if lo > hi || hi > 31 => {
                return Err(Error::validation(
                    "rnd_bit_range",
                    format!("[{lo}, {hi}] must satisfy 0 <= lo <= hi <= 31"),
                ))
            }
            None if self.rnd_mode == RndMode::BitFlip => {
                return Err(Error::validation("rnd_bit_range", "required when rnd_mode is bitflip"))
            }
            _ => {}
        }
        match self.value_range {
            Some((lo, hi)) if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                return Err(Error::validation(
                    "value_range",
                    format!("[{lo}, {hi}] must be finite with min <= max"),
                ))
            }
            None if self.rnd_mode == RndMode::RandomValue => {
                return Err(Error::validation("value_range", "required when rnd_mode is random_value"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Canonical text form. Keys always appear in the same order.
    pub fn to_yaml(&self) -> String {
        let mut s = String::new();
        self.write_yaml(&mut s, true);
        s
    }

    fn write_yaml(&self, s: &mut String, with_seed: bool) {
        let _ = writeln!(s, "dataset_size: {}", self.dataset_size);
        let _ = writeln!(s, "num_runs: {}", self.num_runs);
        let _ = writeln!(s, "max_faults_per_image: {}", self.max_faults_per_image);
        let _ = writeln!(s, "injection_target: {}", unit_name(&self.injection_target));
        let kinds: Vec<_> = self.layer_kinds.iter().map(|k| k.as_str()).collect();
        let _ = writeln!(s, "layer_kinds: [{}]", kinds.join(", "));
        if let Some((lo, hi)) = self.layer_range {
            let _ = writeln!(s, "layer_range: [{lo}, {hi}]");
        }
        let _ = writeln!(s, "layer_weighting: {}", unit_name(&self.layer_weighting));
        let _ = writeln!(s, "rnd_mode: {}", unit_name(&self.rnd_mode));
        if let Some((lo, hi)) = self.rnd_bit_range {
            let _ = writeln!(s, "rnd_bit_range: [{lo}, {hi}]");
        }
        if let Some((lo, hi)) = self.value_range {
            let _ = writeln!(s, "value_range: [{}, {}]", float_text(lo), float_text(hi));
        }
        let _ = writeln!(s, "inj_policy: {}", unit_name(&self.inj_policy));
        let _ = writeln!(s, "fault_persistence: {}", unit_name(&self.fault_persistence));
        let _ = writeln!(s, "batch_size: {}", self.batch_size);
        if with_seed {
            let _ = writeln!(s, "seed: {}", self.seed);
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let doc: Value = serde_yaml::from_str(text).map_err(|e| Error::Validation {
            key: "<document>".into(),
            reason: e.to_string(),
        })?;
        let Value::Mapping(map) = doc else {
            return Err(Error::validation("<document>", "scenario must be a key-value mapping"));
        };
        for key in map.keys() {
            let name = key.as_str().unwrap_or("<non-string key>");
            if !KNOWN_KEYS.contains(&name) {
                return Err(Error::validation(name, "unknown key"));
            }
        }
        let defaults = ScenarioConfig::new(1, 1, 1, InjectionTarget::Neurons);
        let cfg = ScenarioConfig {
            dataset_size: required(&map, "dataset_size")?,
            num_runs: required(&map, "num_runs")?,
            max_faults_per_image: required(&map, "max_faults_per_image")?,
            injection_target: required(&map, "injection_target")?,
            layer_kinds: optional(&map, "layer_kinds")?.unwrap_or(defaults.layer_kinds),
            layer_range: optional(&map, "layer_range")?.map(|[lo, hi]: [usize; 2]| (lo, hi)),
            layer_weighting: optional(&map, "layer_weighting")?.unwrap_or(defaults.layer_weighting),
            rnd_mode: required(&map, "rnd_mode")?,
            rnd_bit_range: optional(&map, "rnd_bit_range")?.map(|[lo, hi]: [u8; 2]| (lo, hi)),
            value_range: optional(&map, "value_range")?.map(|[lo, hi]: [f32; 2]| (lo, hi)),
            inj_policy: optional(&map, "inj_policy")?.unwrap_or(defaults.inj_policy),
            fault_persistence: optional(&map, "fault_persistence")?.unwrap_or(defaults.fault_persistence),
            batch_size: optional(&map, "batch_size")?.unwrap_or(defaults.batch_size),
            seed: optional(&map, "seed")?.unwrap_or(defaults.seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `n = a * b * c`, the number of fault columns to pre-generate.
    pub fn num_faults_required(&self) -> u64 {
        self.dataset_size * self.num_runs * self.max_faults_per_image
    }

    /// Batches per epoch; the last one may be partial.
    pub fn batches_per_epoch(&self) -> u64 {
        self.dataset_size.div_ceil(self.batch_size)
    }

    /// 64-bit FNV-1a digest of the canonical scenario text without the seed,
    /// followed by `model: <name>`. Binds a fault matrix to the scenario
    /// and model it was generated for.
    pub fn digest(&self, model_name: &str) -> u64 {
        let mut s = String::new();
        self.write_yaml(&mut s, false);
        let _ = writeln!(s, "model: {model_name}");
        let mut h = Fnv1a::new();
        h.write(s.as_bytes());
        h.finish()
    }
}

pub fn num_faults_required(cfg: &ScenarioConfig) -> u64 {
    cfg.num_faults_required()
}

pub fn parse_scenario(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScenarioConfig::from_yaml(&text)
}

pub fn save_scenario(cfg: &ScenarioConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, cfg.to_yaml()).map_err(|e| Error::io(path, e))
}

fn field<T: DeserializeOwned>(map: &Mapping, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_yaml::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::validation(key, e.to_string())),
    }
}

fn required<T: DeserializeOwned>(map: &Mapping, key: &str) -> Result<T> {
    field(map, key)?.ok_or_else(|| Error::validation(key, "missing required key"))
}

fn optional<T: DeserializeOwned>(map: &Mapping, key: &str) -> Result<Option<T>> {
    field(map, key)
}

/// Shortest text that reads back to the same `f32` through an `f64`
/// parse, which is how YAML floats are loaded.
fn float_text(v: f32) -> String {
    let short = format!("{v:?}");
    match short.parse::<f64>() {
        Ok(back) if (back as f32).to_bits() == v.to_bits() => short,
        _ => format!("{:?}", v as f64),
    }
}

fn unit_name<T: Serialize>(v: &T) -> String {
    serde_yaml::to_string(v)
        .expect("unit variants serialize")
        .trim_end()
        .to_owned()
}
