//! Dataset ingestion: seeded synthetic generators, numeric CSV and IDX pairs.
//!
//! Synthetic data draws from the first `SplitMix64` fork of the run seed;
//! parameter initialisation uses the second.

use std::path::Path;

use riemod::linalg::dot;
use riemod::optimizer::Sample;
use riemod::rng::SplitMix64;

use crate::config::{DataKind, DataSection, Teacher};
use crate::error::{CliError, CliResult};

pub const DEFAULT_SYNTHETIC_SAMPLES: usize = 128;
pub const DEFAULT_SYNTHETIC_INPUT_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub input_dim: usize,
    pub output_dim: usize,
}

/// Independent streams for data and initial parameters.
pub fn seed_streams(seed: u64) -> (SplitMix64, SplitMix64) {
    let mut master = SplitMix64::new(seed);
    let data = master.fork();
    let init = master.fork();
    (data, init)
}

fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; classes];
    t[label] = 1.0;
    t
}

/// `x ~ N(0, s²I)`, `y = W x / √d` (or its sine) plus Gaussian noise.
pub fn synthetic_regression(
    rng: &mut SplitMix64,
    n: usize,
    d_in: usize,
    d_out: usize,
    noise: f64,
    input_scale: f64,
    teacher: Teacher,
) -> Vec<Sample> {
    let w: Vec<Vec<f64>> = (0..d_out).map(|_| rng.normal_vec(d_in)).collect();
    let root = (d_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = rng
                .normal_vec(d_in)
                .iter()
                .map(|v| input_scale * v)
                .collect();
            let y = w
                .iter()
                .map(|row| {
                    let z = dot(row, &x) / root;
                    let clean = match teacher {
                        Teacher::Linear => z,
                        Teacher::Sine => z.sin(),
                    };
                    clean + noise * rng.normal()
                })
                .collect();
            Sample::new(x, y)
        })
        .collect()
}

/// Labels are the argmax of a noisy random linear teacher, stored one-hot.
pub fn synthetic_classification(
    rng: &mut SplitMix64,
    n: usize,
    d_in: usize,
    classes: usize,
    noise: f64,
    input_scale: f64,
) -> Vec<Sample> {
    let w: Vec<Vec<f64>> = (0..classes).map(|_| rng.normal_vec(d_in)).collect();
    let root = (d_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let x: Vec<f64> = rng
                .normal_vec(d_in)
                .iter()
                .map(|v| input_scale * v)
                .collect();
            let mut best = (0, f64::NEG_INFINITY);
            for (c, row) in w.iter().enumerate() {
                let score = dot(row, &x) / root + noise * rng.normal();
                if score > best.1 {
                    best = (c, score);
                }
            }
            Sample::new(x, one_hot(best.0, classes))
        })
        .collect()
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path.display(), e))
}

fn require_file(path: Option<&Path>, key: &str) -> CliResult<std::path::PathBuf> {
    let p =
        path.ok_or_else(|| CliError::config(format!("{key} is required for this data.kind")))?;
    if !p.is_file() {
        return Err(CliError::config(format!(
            "{key}: file {} does not exist",
            p.display()
        )));
    }
    Ok(p.to_path_buf())
}

/// Numeric CSV with a header row. Regression: the last `output_dim` columns
/// are targets. Classification: the last column is an integer label.
pub fn parse_csv(
    bytes: &[u8],
    output_dim: usize,
    classification: bool,
    limit: Option<usize>,
) -> CliResult<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes);
    let mut out = Vec::new();
    let tail = if classification { 1 } else { output_dim };
    for (row, record) in reader.records().enumerate() {
        if limit.is_some_and(|l| out.len() >= l) {
            break;
        }
        let record = record.map_err(|e| CliError::config(format!("csv: {e}")))?;
        let values = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| CliError::config(format!("csv row {}: {e}", row + 1)))?;
        if values.len() <= tail {
            return Err(CliError::config(format!(
                "csv row {}: too few columns",
                row + 1
            )));
        }
        let (x, y) = values.split_at(values.len() - tail);
        let target = if classification {
            let label = y[0];
            if label.fract() != 0.0 || label < 0.0 || label >= output_dim as f64 {
                return Err(CliError::config(format!(
                    "csv row {}: label {label} outside 0..{output_dim}",
                    row + 1
                )));
            }
            one_hot(label as usize, output_dim)
        } else {
            y.to_vec()
        };
        out.push(Sample::new(x.to_vec(), target));
    }
    Ok(out)
}

/// An IDX array of unsigned bytes: big-endian `u32` dims after the
/// `00 00 08 ndim` magic.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, String> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err("bad IDX magic".into());
    }
    if bytes[2] != 0x08 {
        return Err(format!(
            "unsupported IDX element type 0x{:02x}; only unsigned bytes",
            bytes[2]
        ));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if ndim == 0 || bytes.len() < header {
        return Err("truncated IDX header".into());
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    if bytes.len() != header + count {
        return Err(format!(
            "IDX payload has {} bytes, dims {:?} need {count}",
            bytes.len() - header,
            dims
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Images scaled to `[0, 1]`, labels one-hot over `classes`.
pub fn idx_samples(
    images: &IdxArray,
    labels: &IdxArray,
    classes: usize,
    limit: Option<usize>,
) -> CliResult<Vec<Sample>> {
    if labels.dims.len() != 1 || images.dims.is_empty() || images.dims[0] != labels.dims[0] {
        return Err(CliError::config(format!(
            "IDX images {:?} and labels {:?} disagree",
            images.dims, labels.dims
        )));
    }
    let n = limit.map_or(labels.dims[0], |l| l.min(labels.dims[0]));
    let width: usize = images.dims[1..].iter().product();
    (0..n)
        .map(|i| {
            let label = labels.data[i] as usize;
            if label >= classes {
                return Err(CliError::config(format!(
                    "IDX label {label} at {i} outside 0..{classes}"
                )));
            }
            let x = images.data[i * width..(i + 1) * width]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Ok(Sample::new(x, one_hot(label, classes)))
        })
        .collect()
}

/// Loads the configured dataset and fills in the resolved dims and count.
pub fn load(section: &mut DataSection, rng: &mut SplitMix64) -> CliResult<Dataset> {
    if !(section.noise >= 0.0 && section.noise.is_finite())
        || !(section.input_scale > 0.0 && section.input_scale.is_finite())
    {
        return Err(CliError::config(
            "data.noise must be ≥ 0 and data.input_scale > 0",
        ));
    }
    if section.samples == Some(0) || section.input_dim == Some(0) || section.output_dim == Some(0) {
        return Err(CliError::config(
            "data.samples, data.input_dim and data.output_dim must be positive",
        ));
    }
    let samples = match section.kind {
        DataKind::SyntheticRegression | DataKind::SyntheticClassification => {
            let n = *section.samples.get_or_insert(DEFAULT_SYNTHETIC_SAMPLES);
            let d_in = *section.input_dim.get_or_insert(DEFAULT_SYNTHETIC_INPUT_DIM);
            if section.kind == DataKind::SyntheticRegression {
                let d_out = *section.output_dim.get_or_insert(1);
                synthetic_regression(
                    rng,
                    n,
                    d_in,
                    d_out,
                    section.noise,
                    section.input_scale,
                    section.teacher,
                )
            } else {
                let classes = *section.output_dim.get_or_insert(2);
                if classes < 2 {
                    return Err(CliError::config(
                        "classification needs at least two classes",
                    ));
                }
                synthetic_classification(rng, n, d_in, classes, section.noise, section.input_scale)
            }
        }
        DataKind::Csv => {
            let path = require_file(section.path.as_deref(), "data.path")?;
            let d_out = *section.output_dim.get_or_insert(1);
            parse_csv(
                &read_bytes(&path)?,
                d_out,
                section.classification,
                section.samples,
            )?
        }
        DataKind::Idx => {
            let images = require_file(section.images.as_deref(), "data.images")?;
            let labels = require_file(section.labels.as_deref(), "data.labels")?;
            let classes = *section.output_dim.get_or_insert(10);
            let parse = |p: &Path| {
                parse_idx(&read_bytes(p)?)
                    .map_err(|e| CliError::config(format!("{}: {e}", p.display())))
            };
            idx_samples(&parse(&images)?, &parse(&labels)?, classes, section.samples)?
        }
    };
    let first = samples
        .first()
        .ok_or_else(|| CliError::config("dataset is empty"))?;
    let (d_in, d_out) = (first.input.len(), first.target.len());
    if let Some(bad) = samples
        .iter()
        .position(|s| s.input.len() != d_in || s.target.len() != d_out)
    {
        return Err(CliError::config(format!(
            "sample {bad} has inconsistent dims"
        )));
    }
    if section.input_dim.is_some_and(|d| d != d_in) {
        return Err(CliError::config(format!(
            "data.input_dim = {} but the data has {d_in} inputs",
            section.input_dim.unwrap_or(0)
        )));
    }
    section.input_dim = Some(d_in);
    section.output_dim = Some(d_out);
    section.samples = Some(samples.len());
    Ok(Dataset {
        samples,
        input_dim: d_in,
        output_dim: d_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0, 0, 8, dims.len() as u8];
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn idx_round_trip() {
        let img = parse_idx(&idx_bytes(&[2, 2, 1], &[0, 255, 51, 102])).unwrap();
        assert_eq!(img.dims, vec![2, 2, 1]);
        let lab = parse_idx(&idx_bytes(&[2], &[1, 0])).unwrap();
        let s = idx_samples(&img, &lab, 3, None).unwrap();
        assert_eq!(s[0].input, vec![0.0, 1.0]);
        assert_eq!(s[1].input, vec![0.2, 0.4]);
        assert_eq!(s[0].target, vec![0.0, 1.0, 0.0]);
        assert_eq!(idx_samples(&img, &lab, 3, Some(1)).unwrap().len(), 1);
    }

    #[test]
    fn idx_rejects_malformed() {
        assert!(parse_idx(&[0, 0, 9, 1, 0, 0, 0, 1, 5]).is_err());
        assert!(parse_idx(&idx_bytes(&[3], &[1, 2])).is_err());
        assert!(parse_idx(&[1, 0, 8, 1]).is_err());
        let img = parse_idx(&idx_bytes(&[1, 1], &[0])).unwrap();
        let lab = parse_idx(&idx_bytes(&[1], &[7])).unwrap();
        assert!(idx_samples(&img, &lab, 5, None).is_err());
    }

    #[test]
    fn csv_regression_and_labels() {
        let s = parse_csv(b"a,b,y\n1,2,3\n4,5,6\n", 1, false, None).unwrap();
        assert_eq!(s[1], Sample::new(vec![4.0, 5.0], vec![6.0]));
        let c = parse_csv(b"a,label\n0.5,2\n", 3, true, None).unwrap();
        assert_eq!(c[0].target, vec![0.0, 0.0, 1.0]);
        assert!(parse_csv(b"a,label\n0.5,3\n", 3, true, None).is_err());
        assert!(parse_csv(b"a,y\n1,x\n", 1, false, None).is_err());
        assert_eq!(
            parse_csv(b"a,y\n1,2\n3,4\n", 1, false, Some(1))
                .unwrap()
                .len(),
            1
        );
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let gen = |seed| {
            let (mut rng, _) = seed_streams(seed);
            synthetic_regression(&mut rng, 5, 3, 2, 0.1, 1.0, Teacher::Sine)
        };
        assert_eq!(gen(4), gen(4));
        assert_ne!(gen(4), gen(5));
    }

    #[test]
    fn classification_targets_are_one_hot() {
        let (mut rng, _) = seed_streams(1);
        for s in synthetic_classification(&mut rng, 50, 3, 4, 0.2, 1.0) {
            assert_eq!(s.target.iter().sum::<f64>(), 1.0);
            assert!(s.target.iter().all(|&t| t == 0.0 || t == 1.0));
        }
    }

    #[test]
    fn missing_file_is_config_error() {
        let mut sec = DataSection {
            kind: DataKind::Csv,
            path: Some("/nonexistent/data.csv".into()),
            ..Default::default()
        };
        let (mut rng, _) = seed_streams(0);
        assert_eq!(load(&mut sec, &mut rng).unwrap_err().exit_code(), 2);
    }
}
