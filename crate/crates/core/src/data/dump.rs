use std::fs;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

use super::{corrupt_dataset, read_batch_file, write_batch_file};
use super::{CorruptionConstants, CorruptionKind, CorruptionSpec, Dataset, MAX_SEVERITY};

/// `<kind>_s<severity>.bin`, e.g. `fog_s3.bin`.
pub fn dump_file_name(spec: CorruptionSpec) -> String {
    format!("{}_s{}.bin", spec.kind, spec.severity)
}

/// Write one batch file per (kind, severity 1..=5). Pixels are quantized
/// to bytes, as in the binary dataset layout.
pub fn write_corruption_dump(
    dir: &Path,
    ds: &Dataset,
    kinds: &[CorruptionKind],
    seed: u64,
    consts: &CorruptionConstants,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut written = Vec::new();
    for &kind in kinds {
        for severity in 1..=MAX_SEVERITY {
            let spec = CorruptionSpec { kind, severity };
            let out = corrupt_dataset(ds, spec, seed, consts)?;
            let path = dir.join(dump_file_name(spec));
            write_batch_file(&path, &out)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Read the pre-generated file for `spec` from `dir`.
pub fn load_corruption_dump(dir: &Path, spec: CorruptionSpec) -> Result<Dataset> {
    read_batch_file(&dir.join(dump_file_name(spec)))
}
