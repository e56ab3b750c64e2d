use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Real, Result, Tensor};

use super::{Dataset, CHANNELS, CLASSES, SIDE};

/// One label byte followed by 32x32 R, G and B planes.
pub const RECORD_BYTES: usize = 1 + CHANNELS * SIDE * SIDE;

/// Parse one binary batch file.
pub fn read_batch_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_records(&bytes, path)
}

fn parse_records(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::TruncatedData {
            path: path.to_path_buf(),
            len: bytes.len() as u64,
            record: RECORD_BYTES,
        });
    }
    let n = bytes.len() / RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(RECORD_BYTES).enumerate() {
        if rec[0] as usize >= CLASSES {
            return Err(Error::BadLabel {
                path: path.to_path_buf(),
                record: i,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as Real / 255.0));
    }
    let images = Tensor::from_vec(&[n, CHANNELS, SIDE, SIDE], pixels)?;
    Dataset::new(images, labels)
}

/// Write a dataset in the binary batch layout, quantizing pixels to bytes.
pub fn write_batch_file(path: &Path, ds: &Dataset) -> Result<()> {
    if ds.image_shape() != [CHANNELS, SIDE, SIDE] {
        return Err(Error::ShapeMismatch(format!(
            "batch files hold 3x32x32 images, got {:?}",
            ds.image_shape()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * RECORD_BYTES);
    for (n, &label) in ds.labels().iter().enumerate() {
        out.push(label as u8);
        out.extend(
            ds.images()
                .item(n)
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn resolve_dir(path: &Path) -> PathBuf {
    let nested = path.join("cifar-10-batches-bin");
    if nested.is_dir() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// Load `data_batch_{1..5}.bin` (whichever exist) and `test_batch.bin` from
/// `path` or its `cifar-10-batches-bin` subdirectory.
pub fn load_cifar10(path: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve_dir(path);
    if !dir.is_dir() {
        return Err(Error::io(
            format!("CIFAR-10 directory {}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    let mut parts = Vec::new();
    for i in 1..=5 {
        let f = dir.join(format!("data_batch_{i}.bin"));
        if f.is_file() {
            parts.push(read_batch_file(&f)?);
        }
    }
    if parts.is_empty() {
        return Err(Error::io(
            format!("no data_batch_*.bin files in {}", dir.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "missing training batches"),
        ));
    }
    let test = read_batch_file(&dir.join("test_batch.bin"))?;
    Ok((concat(parts)?, test))
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    if parts.len() == 1 {
        return Ok(parts.into_iter().next().expect("one part"));
    }
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut pixels = Vec::with_capacity(n * (RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend_from_slice(p.labels());
        pixels.extend(p.images.into_data());
    }
    Dataset::new(Tensor::from_vec(&[n, CHANNELS, SIDE, SIDE], pixels)?, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..RECORD_BYTES - 1).map(fill));
        r
    }

    #[test]
    fn two_records() {
        let mut bytes = record(3, |i| (i % 256) as u8);
        bytes.extend(record(9, |_| 255));
        assert_eq!(bytes.len(), 6146);
        let ds = parse_records(&bytes, Path::new("mem")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels(), &[3, 9]);
        let first = ds.images().item(0);
        assert_eq!(first[0], 0.0);
        assert_eq!(first[255], 1.0);
        assert_eq!(first[1], 1.0 / 255.0);
        // green plane begins after 1024 red values
        assert_eq!(first[1024], (1024 % 256) as Real / 255.0);
        assert!(ds.images().item(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_and_bad_label() {
        let bytes = record(1, |_| 0);
        assert!(matches!(
            parse_records(&bytes[..3000], Path::new("t")),
            Err(Error::TruncatedData { len: 3000, .. })
        ));
        let mut two = record(1, |_| 0);
        two.extend(record(10, |_| 0));
        assert!(matches!(
            parse_records(&two, Path::new("t")),
            Err(Error::BadLabel {
                record: 1,
                label: 10,
                ..
            })
        ));
    }

    #[test]
    fn file_roundtrip_and_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let nested = dir.path().join("cifar-10-batches-bin");
        fs::create_dir(&nested).unwrap();
        let mut bytes = record(0, |i| (i * 7 % 256) as u8);
        bytes.extend(record(5, |i| (i * 3 % 256) as u8));
        fs::write(nested.join("data_batch_1.bin"), &bytes).unwrap();
        fs::write(nested.join("data_batch_2.bin"), &bytes[..RECORD_BYTES]).unwrap();
        fs::write(nested.join("test_batch.bin"), &bytes[RECORD_BYTES..]).unwrap();
        let (train, test) = load_cifar10(dir.path()).unwrap();
        assert_eq!(train.labels(), &[0, 5, 0]);
        assert_eq!(test.labels(), &[5]);

        let out = dir.path().join("copy.bin");
        write_batch_file(&out, &train).unwrap();
        let mut expect = bytes.clone();
        expect.extend_from_slice(&bytes[..RECORD_BYTES]);
        assert_eq!(fs::read(&out).unwrap(), expect);
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(
            load_cifar10(Path::new("/nonexistent/cifar")),
            Err(Error::Io { .. })
        ));
    }
}
