//! One full campaign per value of a scenario axis.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::campaign::Session;
use crate::error::{Error, Result};
use crate::evaluation::Evaluation;
use crate::scenario::{InjectionTarget, RndMode, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// One injectable layer at a time (`layer_range = [v, v]`).
    Layer,
    /// One bit at a time (`rnd_bit_range = [v, v]`, bit-flip mode).
    BitPosition,
    /// `max_faults_per_image = v`.
    FaultsPerImage,
    /// Neurons or weights.
    Target,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Layer => "layer",
            SweepAxis::BitPosition => "bit",
            SweepAxis::FaultsPerImage => "faults-per-image",
            SweepAxis::Target => "target",
        }
    }

    fn dir_prefix(self) -> &'static str {
        match self {
            SweepAxis::Layer => "layer",
            SweepAxis::BitPosition => "bit",
            SweepAxis::FaultsPerImage => "faults",
            SweepAxis::Target => "target",
        }
    }

    /// Parses a comma-separated value list for this axis.
    pub fn parse_values(self, text: &str) -> Result<Vec<SweepValue>> {
        let values = text
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| match self {
                SweepAxis::Target => match s {
                    "neurons" => Ok(SweepValue::Target(InjectionTarget::Neurons)),
                    "weights" => Ok(SweepValue::Target(InjectionTarget::Weights)),
                    _ => Err(Error::Config(format!("target sweep value `{s}` is not neurons or weights"))),
                },
                _ => s
                    .parse()
                    .map(SweepValue::Number)
                    .map_err(|_| Error::Config(format!("{} sweep value `{s}` is not a non-negative integer", self.as_str()))),
            })
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        Ok(values)
    }

    fn apply(self, cfg: &mut ScenarioConfig, value: SweepValue) -> Result<()> {
        match (self, value) {
            (SweepAxis::Layer, SweepValue::Number(v)) => cfg.layer_range = Some((v as usize, v as usize)),
            (SweepAxis::BitPosition, SweepValue::Number(v)) => {
                let bit = u8::try_from(v).map_err(|_| Error::validation("rnd_bit_range", format!("bit {v} out of range")))?;
                cfg.rnd_mode = RndMode::BitFlip;
                cfg.rnd_bit_range = Some((bit, bit));
            }
            (SweepAxis::FaultsPerImage, SweepValue::Number(v)) => cfg.max_faults_per_image = v,
            (SweepAxis::Target, SweepValue::Target(t)) => cfg.injection_target = t,
            (axis, v) => return Err(Error::Config(format!("value {v} does not fit the {} axis", axis.as_str()))),
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SweepAxis::Layer, SweepAxis::BitPosition, SweepAxis::FaultsPerImage, SweepAxis::Target]
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}` (layer, bit, faults-per-image, target)")))
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepValue {
    Number(u64),
    Target(InjectionTarget),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Number(v) => write!(f, "{v}"),
            SweepValue::Target(InjectionTarget::Neurons) => f.write_str("neurons"),
            SweepValue::Target(InjectionTarget::Weights) => f.write_str("weights"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub axis: SweepAxis,
    pub value: SweepValue,
    pub dir: PathBuf,
    pub columns: usize,
    pub records: usize,
    pub evaluation: Evaluation,
}

/// For each value: derive a scenario from the session's current one,
/// regenerate faults, run a full campaign and write it to
/// `<out_root>/<axis>_<value>`, tagged in `meta/sweep.txt`. The session's
/// scenario is restored afterwards.
pub fn sweep(session: &mut Session, axis: SweepAxis, values: &[SweepValue], out_root: impl AsRef<Path>) -> Result<Vec<SweepPoint>> {
    let out_root = out_root.as_ref();
    let base = session.get_scenario().clone();
    let mut points = Vec::with_capacity(values.len());
    let result = (|| {
        for &value in values {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, value)?;
            session.set_scenario(cfg)?;
            let run = session.run()?;
            let dir = out_root.join(format!("{}_{value}", axis.dir_prefix()));
            run.write(&dir)?;
            let tag = dir.join("meta/sweep.txt");
            fs::write(&tag, format!("axis: {axis}\nvalue: {value}\n")).map_err(|e| Error::io(&tag, e))?;
            points.push(SweepPoint {
                axis,
                value,
                dir,
                columns: run.matrix.len(),
                records: run.records().len(),
                evaluation: run.evaluate()?,
            });
        }
        Ok(())
    })();
    session.set_scenario(base)?;
    result.map(|()| points)
}
