//! CIFAR-10 binary batches: 1 label byte followed by 3072 pixel bytes
//! (three 32x32 planes, R then G then B).

use std::path::Path;

use super::{read_file, DataError, Dataset};

pub const CIFAR_IMAGE_BYTES: usize = 3072;
pub const CIFAR_RECORD_BYTES: usize = CIFAR_IMAGE_BYTES + 1;
const CIFAR_CLASSES: usize = 10;

/// Appends the records of one binary batch to `features` / `labels`.
pub fn parse_cifar10(
    bytes: &[u8],
    features: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<(), DataError> {
    if bytes.len() % CIFAR_RECORD_BYTES != 0 {
        let whole = bytes.len() / CIFAR_RECORD_BYTES;
        return Err(DataError::TruncatedFile {
            expected: (whole + 1) * CIFAR_RECORD_BYTES,
            actual: bytes.len(),
        });
    }
    let start = labels.len();
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD_BYTES).enumerate() {
        let label = record[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(DataError::LabelOutOfRange {
                index: start + i,
                label,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        features.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset, DataError> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        parse_cifar10(&read_file(p.as_ref())?, &mut features, &mut labels)?;
    }
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    Dataset::new("cifar10", features, labels, CIFAR_IMAGE_BYTES, CIFAR_CLASSES)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_white_record() {
        let mut rec = vec![255u8; CIFAR_RECORD_BYTES];
        rec[0] = 9;
        let (mut f, mut l) = (Vec::new(), Vec::new());
        parse_cifar10(&rec, &mut f, &mut l).unwrap();
        assert_eq!(l, vec![9]);
        assert_eq!(f.len(), 3072);
        assert!(f.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn errors() {
        let (mut f, mut l) = (Vec::new(), Vec::new());
        assert!(matches!(
            parse_cifar10(&[0u8; CIFAR_RECORD_BYTES + 5], &mut f, &mut l),
            Err(DataError::TruncatedFile { .. })
        ));
        let mut rec = vec![0u8; 2 * CIFAR_RECORD_BYTES];
        rec[CIFAR_RECORD_BYTES] = 10;
        assert!(matches!(
            parse_cifar10(&rec, &mut f, &mut l),
            Err(DataError::LabelOutOfRange { index: 1, label: 10, .. })
        ));
    }

    #[test]
    fn loads_several_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for i in 0..3u8 {
            let mut bytes = vec![0u8; 2 * CIFAR_RECORD_BYTES];
            bytes[0] = i;
            bytes[CIFAR_RECORD_BYTES] = i + 1;
            let p = dir.path().join(format!("data_batch_{i}.bin"));
            std::fs::write(&p, bytes).unwrap();
            paths.push(p);
        }
        let d = load_cifar10_binary(&paths).unwrap();
        assert_eq!(d.len(), 6);
        assert_eq!(d.labels(), &[0, 1, 1, 2, 2, 3]);
        assert_eq!((d.dim(), d.classes()), (3072, 10));
        assert!(matches!(
            load_cifar10_binary(&[dir.path().join("missing.bin")]),
            Err(DataError::Io { .. })
        ));
    }
}
