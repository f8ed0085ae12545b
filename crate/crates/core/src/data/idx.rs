use std::path::Path;

use byteorder::{BigEndian, ByteOrder};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

const NUM_CLASSES: usize = 10;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn header(path: &Path, bytes: &[u8], magic: u32, words: usize) -> Result<Vec<usize>> {
    let truncated = |expected| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let found = BigEndian::read_u32(&bytes[0..4]);
    if found != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found,
        });
    }
    if bytes.len() < 4 * words {
        return Err(truncated(4 * words));
    }
    Ok((1..words)
        .map(|w| BigEndian::read_u32(&bytes[4 * w..4 * w + 4]) as usize)
        .collect())
}

/// Parses an IDX3 image file. Returns `(count, rows * cols, pixels / 255)`.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let dims = header(path, bytes, IMAGE_MAGIC, 4)?;
    let (count, rows, cols) = (dims[0], dims[1], dims[2]);
    let dim = rows * cols;
    let expected = 16 + count * dim;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let pixels = bytes[16..expected]
        .iter()
        .map(|&b| f32::from(b) / 255.0)
        .collect();
    Ok((count, dim, pixels))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let dims = header(path, bytes, LABEL_MAGIC, 2)?;
    let count = dims[0];
    let expected = 8 + count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    Ok(bytes[8..expected].iter().map(|&b| usize::from(b)).collect())
}

/// Loads an IDX image/label file pair as a clean 10-class dataset whose
/// sample ids are the row positions in the files.
pub fn load_idx_dataset(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let image_bytes = read_file(images_path)?;
    let label_bytes = read_file(labels_path)?;
    let (count, dim, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let labels = parse_idx_labels(labels_path, &label_bytes)?;
    if labels.len() != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    LabeledDataset::from_clean(
        dim,
        NUM_CLASSES,
        Split::Train,
        (0..count as u64).collect(),
        pixels,
        labels,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn images(count: u32, rows: u32, cols: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGE_MAGIC, count, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn labels(payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(payload.len() as u32).to_be_bytes());
        v.extend_from_slice(payload);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn two_image_fixture_scales_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let payload = [0u8, 255, 17, 128, 3, 200, 99, 1];
        let ip = write(dir.path(), "img", &images(2, 2, 2, &payload));
        let lp = write(dir.path(), "lab", &labels(&[7, 2]));
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 4);
        assert_eq!(ds.num_classes(), 10);
        for (k, &b) in payload.iter().enumerate() {
            assert_eq!(ds.features()[k], f32::from(b) / 255.0);
        }
        assert_eq!(ds.true_labels(), &[7, 2]);
        assert_eq!(ds.effective_labels(), &[7, 2]);
        assert_eq!(ds.ids(), &[0, 1]);
        assert_eq!(ds.corrupted_count(), 0);
    }

    #[test]
    fn empty_pair_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ip = write(dir.path(), "img", &images(0, 28, 28, &[]));
        let lp = write(dir.path(), "lab", &labels(&[]));
        let ds = load_idx_dataset(&ip, &lp).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let good_img = write(dir.path(), "img", &images(1, 1, 2, &[1, 2]));
        let good_lab = write(dir.path(), "lab", &labels(&[3]));

        let swapped = load_idx_dataset(&good_lab, &good_img).unwrap_err();
        assert!(matches!(swapped, Error::BadMagic { found: LABEL_MAGIC, .. }));

        let short = write(dir.path(), "short", &images(2, 1, 2, &[1, 2, 3]));
        let err = load_idx_dataset(&short, &good_lab).unwrap_err();
        assert!(matches!(err, Error::Truncated { expected: 20, found: 19, .. }));

        let two_labels = write(dir.path(), "lab2", &labels(&[3, 4]));
        let err = load_idx_dataset(&good_img, &two_labels).unwrap_err();
        assert!(matches!(err, Error::CountMismatch { images: 1, labels: 2 }));

        let stub = write(dir.path(), "stub", &[0, 0, 8]);
        assert!(matches!(
            load_idx_dataset(&stub, &good_lab).unwrap_err(),
            Error::Truncated { .. }
        ));

        let bad_label = write(dir.path(), "lab3", &labels(&[12]));
        assert!(matches!(
            load_idx_dataset(&good_img, &bad_label).unwrap_err(),
            Error::LabelOutOfRange { label: 12, .. }
        ));
    }
}
