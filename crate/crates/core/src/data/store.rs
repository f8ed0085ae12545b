//! Canonical on-disk dataset file, written once per run so that later
//! stages never re-randomize.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic               4 bytes  "MLDS"
//! version             u8       = 1
//! split               u8       0 = train, 1 = validation
//! count               u64
//! dim                 u32
//! num_classes         u32
//! corruption_fraction f64
//! count records:      id u64, true_label u32, effective_label u32, flag u8
//!                     (flag 0 = clean, 1 = label_corrupted, 2 = input_corrupted)
//! features            count * dim f32, row-major
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Corruption, LabeledDataset, Split};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"MLDS";
pub const DATASET_FORMAT_VERSION: u8 = 1;

pub fn write_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    encode(&mut w, ds).map_err(io)?;
    w.flush().map_err(io)
}

fn encode(w: &mut impl Write, ds: &LabeledDataset) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u8(DATASET_FORMAT_VERSION)?;
    w.write_u8(match ds.split() {
        Split::Train => 0,
        Split::Validation => 1,
    })?;
    w.write_u64::<LittleEndian>(ds.len() as u64)?;
    w.write_u32::<LittleEndian>(ds.dim() as u32)?;
    w.write_u32::<LittleEndian>(ds.num_classes() as u32)?;
    w.write_f64::<LittleEndian>(ds.corruption_fraction())?;
    for s in ds.iter() {
        w.write_u64::<LittleEndian>(s.id)?;
        w.write_u32::<LittleEndian>(s.true_label as u32)?;
        w.write_u32::<LittleEndian>(s.effective_label as u32)?;
        w.write_u8(s.corruption.code())?;
    }
    for &v in ds.features() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    decode(&mut r).map_err(|e| match e {
        DecodeError::Io(e) => Error::io(path, e),
        DecodeError::Format(reason) => Error::format("dataset file", reason),
        DecodeError::Invalid(e) => e,
    })
}

enum DecodeError {
    Io(std::io::Error),
    Format(String),
    Invalid(Error),
}

impl From<std::io::Error> for DecodeError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DecodeError::Format("unexpected end of file".into())
        } else {
            DecodeError::Io(e)
        }
    }
}

fn decode(r: &mut impl Read) -> std::result::Result<LabeledDataset, DecodeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(DecodeError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u8()?;
    if version != DATASET_FORMAT_VERSION {
        return Err(DecodeError::Format(format!("unsupported version {version}")));
    }
    let split = match r.read_u8()? {
        0 => Split::Train,
        1 => Split::Validation,
        other => return Err(DecodeError::Format(format!("bad split code {other}"))),
    };
    let count = r.read_u64::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let num_classes = r.read_u32::<LittleEndian>()? as usize;
    let fraction = r.read_f64::<LittleEndian>()?;

    let mut ids = Vec::with_capacity(count);
    let mut true_labels = Vec::with_capacity(count);
    let mut effective = Vec::with_capacity(count);
    let mut flags = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(r.read_u64::<LittleEndian>()?);
        true_labels.push(r.read_u32::<LittleEndian>()? as usize);
        effective.push(r.read_u32::<LittleEndian>()? as usize);
        let code = r.read_u8()?;
        flags.push(
            Corruption::from_code(code)
                .ok_or_else(|| DecodeError::Format(format!("bad corruption flag {code}")))?,
        );
    }
    let mut features = vec![0f32; count * dim];
    r.read_f32_into::<LittleEndian>(&mut features)?;

    let mut ds = LabeledDataset::from_clean(dim, num_classes, split, ids, features, true_labels)
        .map_err(DecodeError::Invalid)?;
    {
        let (_, eff, fl, frac) = ds.parts_mut();
        *eff = effective;
        *fl = flags;
        *frac = fraction;
    }
    ds.check_invariants().map_err(DecodeError::Invalid)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corrupt_labels;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(
            n in 0usize..20,
            dim in 1usize..6,
            seed in any::<u64>(),
            raw in proptest::collection::vec(any::<f32>(), 120),
        ) {
            let features: Vec<f32> = (0..n * dim).map(|k| raw[k % raw.len()]).collect();
            let ds = LabeledDataset::from_clean(
                dim, 3, Split::Train, (100..100 + n as u64).collect(), features,
                (0..n).map(|i| i % 3).collect(),
            ).unwrap();
            let ds = corrupt_labels(&ds, 0.5, seed).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.mlds");
            write_dataset(&path, &ds).unwrap();
            let back = read_dataset(&path).unwrap();
            prop_assert_eq!(back.len(), ds.len());
            prop_assert_eq!(back.ids(), ds.ids());
            prop_assert_eq!(back.effective_labels(), ds.effective_labels());
            prop_assert_eq!(back.corruption_flags(), ds.corruption_flags());
            let a: Vec<u32> = back.features().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = ds.features().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        std::fs::write(&path, b"NOPE\x01").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"MLDS\x01\x00\x05").unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Format { .. })));
    }
}
