//! `ALFR` runset files: one record per applied fault per inference.
//!
//! Little-endian throughout:
//!
//! ```text
//! "ALFR" | version u16 = 1 | record count u64
//! record (64 bytes):
//!   epoch u32 | batch_index u32 | image_id u32 | fault_column u32
//!   location: 6 x i32 (the fault record's coordinate rows) | value f64
//!   original_value f32 | corrupted_value f32
//!   flip_direction u8 | nan u8 | inf u8 | 5 zero bytes
//! CRC32 u32 over everything after the magic
//! ```

use std::fs;
use std::path::Path;

use crate::binio::{split_crc, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::fault_gen::FaultRecord;
use crate::injector::FlipDirection;

const MAGIC: &[u8; 4] = b"ALFR";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 8;
pub const RECORD_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunsetRecord {
    pub epoch: u32,
    pub batch_index: u32,
    pub image_id: u32,
    pub fault_column: u32,
    pub location: FaultRecord,
    pub original_value: f32,
    pub corrupted_value: f32,
    pub flip_direction: FlipDirection,
    pub nan_detected: bool,
    pub inf_detected: bool,
}

impl RunsetRecord {
    pub fn sort_key(&self) -> (u32, u32, u32, u32) {
        (self.epoch, self.batch_index, self.image_id, self.fault_column)
    }

    /// Field-wise comparison with floats compared by bit pattern. Returns the
    /// name of the first differing field.
    pub fn first_difference(&self, other: &RunsetRecord) -> Option<&'static str> {
        let checks: [(&'static str, bool); 10] = [
            ("epoch", self.epoch == other.epoch),
            ("batch_index", self.batch_index == other.batch_index),
            ("image_id", self.image_id == other.image_id),
            ("fault_column", self.fault_column == other.fault_column),
            ("location", self.location.coords == other.location.coords && self.location.value.to_bits() == other.location.value.to_bits()),
            ("original_value", self.original_value.to_bits() == other.original_value.to_bits()),
            ("corrupted_value", self.corrupted_value.to_bits() == other.corrupted_value.to_bits()),
            ("flip_direction", self.flip_direction == other.flip_direction),
            ("nan_detected", self.nan_detected == other.nan_detected),
            ("inf_detected", self.inf_detected == other.inf_detected),
        ];
        checks.into_iter().find(|c| !c.1).map(|c| c.0)
    }
}

fn narrow(value: i64, what: &str) -> Result<i32> {
    i32::try_from(value).map_err(|_| Error::Config(format!("runset {what} {value} does not fit in 32 bits")))
}

fn narrow_u(value: u64, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Config(format!("runset {what} {value} does not fit in 32 bits")))
}

pub(crate) fn to_u32(value: usize, what: &str) -> Result<u32> {
    narrow_u(value as u64, what)
}

pub(crate) fn id_to_u32(value: u64) -> Result<u32> {
    narrow_u(value, "image_id")
}

pub fn runset_to_bytes(records: &[RunsetRecord]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u16(VERSION);
    w.u64(records.len() as u64);
    for r in records {
        w.u32(r.epoch);
        w.u32(r.batch_index);
        w.u32(r.image_id);
        w.u32(r.fault_column);
        for &c in &r.location.coords {
            w.i32(narrow(c, "coordinate")?);
        }
        w.f64(r.location.value);
        w.f32(r.original_value);
        w.f32(r.corrupted_value);
        w.u8(r.flip_direction.code());
        w.u8(r.nan_detected.into());
        w.u8(r.inf_detected.into());
        w.bytes(&[0; 5]);
    }
    Ok(w.finish_with_crc())
}

fn flag(r: &mut ByteReader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        other => Err(r.error(format!("invalid flag byte {other}"))),
    }
}

pub fn runset_from_bytes(data: &[u8]) -> Result<Vec<RunsetRecord>> {
    let mut r = ByteReader::new(data);
    r.expect_magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Version {
            what: "runset file",
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u64()?;
    let expected_len = count as u128 * RECORD_LEN as u128 + (HEADER_LEN + 4) as u128;
    if (data.len() as u128) < expected_len {
        return Err(Error::Parse {
            offset: data.len(),
            reason: format!("truncated: {count} records need {expected_len} bytes, file has {}", data.len()),
        });
    }
    if (data.len() as u128) > expected_len {
        return Err(Error::Parse {
            offset: expected_len as usize,
            reason: "trailing bytes after checksum".into(),
        });
    }
    split_crc(data)?;
    (0..count)
        .map(|_| {
            let epoch = r.u32()?;
            let batch_index = r.u32()?;
            let image_id = r.u32()?;
            let fault_column = r.u32()?;
            let mut coords = [0i64; 6];
            for c in &mut coords {
                *c = r.i32()?.into();
            }
            let value = r.f64()?;
            let original_value = r.f32()?;
            let corrupted_value = r.f32()?;
            let code = r.u8()?;
            let flip_direction = FlipDirection::from_code(code).ok_or_else(|| r.error(format!("invalid flip direction {code}")))?;
            let nan_detected = flag(&mut r)?;
            let inf_detected = flag(&mut r)?;
            if r.take(5)? != [0; 5] {
                return Err(r.error("reserved bytes are not zero"));
            }
            Ok(RunsetRecord {
                epoch,
                batch_index,
                image_id,
                fault_column,
                location: FaultRecord { coords, value },
                original_value,
                corrupted_value,
                flip_direction,
                nan_detected,
                inf_detected,
            })
        })
        .collect()
}

pub fn save_runset(records: &[RunsetRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, runset_to_bytes(records)?).map_err(|e| Error::io(path, e))
}

pub fn load_runset(path: impl AsRef<Path>) -> Result<Vec<RunsetRecord>> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    runset_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_record() -> impl Strategy<Value = RunsetRecord> {
        (
            (any::<u32>(), any::<u32>(), any::<u32>(), any::<u32>()),
            prop::array::uniform6(-1i64..1000),
            any::<f64>(),
            (any::<u32>(), any::<u32>()),
            0u8..3,
            any::<bool>(),
            any::<bool>(),
        )
            .prop_map(|((epoch, batch_index, image_id, fault_column), coords, value, (o, c), dir, nan, inf)| RunsetRecord {
                epoch,
                batch_index,
                image_id,
                fault_column,
                location: FaultRecord { coords, value },
                original_value: f32::from_bits(o),
                corrupted_value: f32::from_bits(c),
                flip_direction: FlipDirection::from_code(dir).unwrap(),
                nan_detected: nan,
                inf_detected: inf,
            })
    }

    proptest! {
        #[test]
        fn round_trip(records in prop::collection::vec(arb_record(), 0..20)) {
            let bytes = runset_to_bytes(&records).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + RECORD_LEN * records.len() + 4);
            let back = runset_from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for (a, b) in back.iter().zip(&records) {
                prop_assert_eq!(a.first_difference(b), None);
            }
        }
    }

    fn sample() -> Vec<RunsetRecord> {
        vec![RunsetRecord {
            epoch: 0,
            batch_index: 1,
            image_id: 2,
            fault_column: 3,
            location: FaultRecord {
                coords: [0, 1, 2, -1, 3, 4],
                value: 30.0,
            },
            original_value: 1.5,
            corrupted_value: f32::NAN,
            flip_direction: FlipDirection::ZeroToOne,
            nan_detected: true,
            inf_detected: false,
        }]
    }

    #[test]
    fn every_single_byte_flip_is_caught() {
        let bytes = runset_to_bytes(&sample()).unwrap();
        for i in 0..bytes.len() {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(runset_from_bytes(&b).is_err(), "flip at byte {i} went unnoticed");
        }
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let bytes = runset_to_bytes(&sample()).unwrap();
        assert!(matches!(runset_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Parse { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(runset_from_bytes(&long), Err(Error::Parse { .. })));
        let mut v = bytes;
        v[4] = 2;
        assert!(matches!(runset_from_bytes(&v), Err(Error::Version { found: 2, .. })));
    }

    #[test]
    fn oversized_coordinates_refused() {
        let mut r = sample();
        r[0].location.coords[2] = i64::from(i32::MAX) + 1;
        assert!(runset_to_bytes(&r).is_err());
    }
}
