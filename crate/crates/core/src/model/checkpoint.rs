//! Model checkpoint file.
//!
//! ```text
//! magic        4 bytes "MLPM"
//! version      u8 = 1
//! input_dim    u32 LE
//! hidden_width u32 LE
//! num_classes  u32 LE
//! seed         u64 LE
//! W1           hidden_width * input_dim f64 LE, row-major
//! b1           hidden_width f64 LE
//! W2           num_classes * hidden_width f64 LE, row-major
//! b2           num_classes f64 LE
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::MlpModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MLPM";
pub const CHECKPOINT_VERSION: u8 = 1;

pub fn write_checkpoint(path: &Path, model: &MlpModel) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    encode(&mut w, model).map_err(io)?;
    w.flush().map_err(io)
}

pub(crate) fn encode(w: &mut impl Write, m: &MlpModel) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u8(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(m.input_dim as u32)?;
    w.write_u32::<LittleEndian>(m.hidden_width as u32)?;
    w.write_u32::<LittleEndian>(m.num_classes as u32)?;
    w.write_u64::<LittleEndian>(m.seed)?;
    for block in [&m.w1, &m.b1, &m.w2, &m.b2] {
        for &v in block.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<MlpModel> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file)).map_err(|e| match e {
        Some(e) => Error::io(path, e),
        None => Error::format("model checkpoint", format!("{} is malformed", path.display())),
    })
}

/// `None` signals a format violation rather than an I/O failure.
pub(crate) fn decode(r: &mut impl Read) -> std::result::Result<MlpModel, Option<std::io::Error>> {
    let eof = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            None
        } else {
            Some(e)
        }
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof)?;
    if &magic != CHECKPOINT_MAGIC || r.read_u8().map_err(eof)? != CHECKPOINT_VERSION {
        return Err(None);
    }
    let input_dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let hidden = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let classes = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
    let seed = r.read_u64::<LittleEndian>().map_err(eof)?;
    let mut block = |n: usize| -> std::result::Result<Vec<f64>, Option<std::io::Error>> {
        let mut v = vec![0.0; n];
        r.read_f64_into::<LittleEndian>(&mut v).map_err(eof)?;
        Ok(v)
    };
    let w1 = block(hidden * input_dim)?;
    let b1 = block(hidden)?;
    let w2 = block(classes * hidden)?;
    let b2 = block(classes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(Some)? != 0 {
        return Err(None);
    }
    MlpModel::from_parts(input_dim, hidden, classes, seed, w1, b1, w2, b2).map_err(|_| None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            d in 1usize..9, h in 1usize..7, c in 1usize..5, seed in any::<u64>(),
        ) {
            let m = MlpModel::init(d, h, c, seed).unwrap();
            let mut bytes = Vec::new();
            encode(&mut bytes, &m).unwrap();
            let back = decode(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &m);
            let mut again = Vec::new();
            encode(&mut again, &back).unwrap();
            prop_assert_eq!(again, bytes);
        }
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mlpm");
        let m = MlpModel::init(5, 3, 2, 42).unwrap();
        write_checkpoint(&path, &m).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap(), m);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes.pop();
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}
