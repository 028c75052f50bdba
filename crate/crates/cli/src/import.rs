//! Loading DQT1 tensor dumps by glob.

use std::path::PathBuf;

use dq_core::format::decode_tensor;
use dq_core::{DqError, NdTensor};

use crate::error::{CliError, CliResult, ImportError};

/// Loads every file matching `pattern`, in lexicographic path order. All
/// tensors must share one shape.
pub fn import_tensors(pattern: &str) -> CliResult<Vec<NdTensor>> {
    let mut paths: Vec<PathBuf> = glob::glob(pattern)
        .map_err(ImportError::from)?
        .filter_map(|p| p.ok())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(ImportError::NoMatches(pattern.to_string()).into());
    }
    let mut out: Vec<NdTensor> = Vec::with_capacity(paths.len());
    for path in &paths {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        let t = decode_tensor(&bytes).map_err(|source| {
            let path = path.clone();
            match source {
                DqError::BadMagic { .. } => ImportError::BadMagic { path, source },
                DqError::Truncated { .. } => ImportError::Truncated { path, source },
                _ => ImportError::Parse { path, source },
            }
        })?;
        if let Some(first) = out.first() {
            if first.shape() != t.shape() {
                return Err(ImportError::ShapeInconsistency {
                    first: paths[0].clone(),
                    first_shape: first.shape().to_vec(),
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                }
                .into());
            }
        }
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dq_core::format::{save_tensor, Dtype};

    fn pattern(dir: &tempfile::TempDir) -> String {
        format!("{}/*.dqt", dir.path().display())
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = NdTensor::from_fn(&[2, 3], |i| (i as f64).sin() / 7.0);
        save_tensor(dir.path().join("a.dqt"), &t, Dtype::F64).unwrap();
        let back = import_tensors(&pattern(&dir)).unwrap();
        assert_eq!(back, vec![t]);
    }

    #[test]
    fn errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            import_tensors(&pattern(&dir)),
            Err(CliError::Import(ImportError::NoMatches(_)))
        ));
        std::fs::write(dir.path().join("bad.dqt"), b"NOTATENSORFILE!!").unwrap();
        assert!(matches!(
            import_tensors(&pattern(&dir)),
            Err(CliError::Import(ImportError::BadMagic { .. }))
        ));
        let t = NdTensor::zeros(&[4]);
        let bytes = dq_core::format::encode_tensor(&t, Dtype::F32).unwrap();
        std::fs::write(dir.path().join("bad.dqt"), &bytes[..bytes.len() - 3]).unwrap();
        let err = import_tensors(&pattern(&dir)).unwrap_err();
        assert!(matches!(err, CliError::Import(ImportError::Truncated { .. })));
        assert!(err.to_string().contains("byte offset"));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn mixed_shapes_name_both() {
        let dir = tempfile::tempdir().unwrap();
        save_tensor(dir.path().join("a.dqt"), &NdTensor::zeros(&[2, 3]), Dtype::F32).unwrap();
        save_tensor(dir.path().join("b.dqt"), &NdTensor::zeros(&[3, 2]), Dtype::F32).unwrap();
        let msg = import_tensors(&pattern(&dir)).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }
}
