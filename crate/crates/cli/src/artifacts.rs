//! Atomic artifact writes and the shared text formats.
//!
//! Floats are written with 17 significant digits, which round-trips every
//! `f64`. Text artifacts start with `# key = value` lines holding the fully
//! resolved config and seed.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const PARAMS_MAGIC: &[u8; 4] = b"RMP1";

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// `# key = value` lines.
pub fn header(pairs: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

pub struct OutputDir {
    path: PathBuf,
}

impl OutputDir {
    pub fn create(path: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(path).map_err(|e| CliError::io(path.display(), e))?;
        Ok(Self {
            path: path.to_path_buf(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes to a temp file in the same directory, syncs, then renames over `name`.
    pub fn write(&self, name: &str, bytes: &[u8]) -> CliResult<PathBuf> {
        let target = self.path.join(name);
        let mut tmp = tempfile::NamedTempFile::new_in(&self.path)
            .map_err(|e| CliError::io(self.path.display(), e))?;
        tmp.write_all(bytes)
            .and_then(|_| tmp.as_file().sync_all())
            .map_err(|e| CliError::io(target.display(), e))?;
        tmp.persist(&target)
            .map_err(|e| CliError::io(target.display(), e.error))?;
        log::info!("wrote {}", target.display());
        Ok(target)
    }
}

/// `RMP1`, header length (u64 LE), UTF-8 header, value count (u64 LE), values (f64 LE).
pub fn encode_params(header_text: &str, values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 16 + header_text.len() + 8 * values.len());
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(header_text.len() as u64).to_le_bytes());
    out.extend_from_slice(header_text.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<(String, Vec<f64>), String> {
    let take_u64 = |at: usize| -> Result<u64, String> {
        bytes
            .get(at..at + 8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
            .ok_or_else(|| "truncated parameter blob".to_string())
    };
    if bytes.get(..4) != Some(PARAMS_MAGIC) {
        return Err("bad parameter blob magic".into());
    }
    let hlen = take_u64(4)? as usize;
    let header = bytes
        .get(12..12 + hlen)
        .ok_or("truncated parameter header")
        .and_then(|h| std::str::from_utf8(h).map_err(|_| "header is not UTF-8"))?
        .to_string();
    let count = take_u64(12 + hlen)? as usize;
    let start = 20 + hlen;
    let body = bytes.get(start..).unwrap_or(&[]);
    if body.len() != 8 * count {
        return Err(format!(
            "parameter blob holds {} bytes, expected {}",
            body.len(),
            8 * count
        ));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_lines() {
        let h = header(&[("seed".into(), "3".into()), ("a.b".into(), "\"x\"".into())]);
        assert_eq!(h, "# seed = 3\n# a.b = \"x\"\n");
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(&dir.path().join("nested")).unwrap();
        out.write("a.csv", b"one\n").unwrap();
        out.write("a.csv", b"two\n").unwrap();
        assert_eq!(std::fs::read(out.path().join("a.csv")).unwrap(), b"two\n");
        assert_eq!(std::fs::read_dir(out.path()).unwrap().count(), 1);
    }

    #[test]
    fn seventeen_significant_digits() {
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(-2.0), "-2.0000000000000000e0");
    }

    proptest! {
        #[test]
        fn floats_round_trip(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }

        #[test]
        fn params_blob_round_trips(values in prop::collection::vec(any::<f64>(), 0..20), h in ".{0,40}") {
            let (hh, vv) = decode_params(&encode_params(&h, &values)).unwrap();
            prop_assert_eq!(hh, h);
            prop_assert_eq!(
                vv.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
