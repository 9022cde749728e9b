//! Pattern sources and artifact persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{ExperimentResult, RunRecord};
use crate::training::EpochRecord;
use crate::types::{MemoryMatrix, Trajectory, VariantSample};
use crate::variants::RngState;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// `n` patterns of dimension `d`, entries uniform on `[-1, 1]`.
    Synthetic { n: usize, d: usize },
    /// The first `take_n` images of an IDX3 image file, rescaled to `[-1, 1]`.
    MnistTrain { path: PathBuf, take_n: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Fixes synthetic patterns across runs; without it every run draws its own.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl DatasetSpec {
    pub fn synthetic(n: usize, d: usize) -> Self {
        Self {
            source: DataSource::Synthetic { n, d },
            seed: None,
        }
    }

    /// Resolves a relative image-file path against `root`.
    pub fn with_root(mut self, root: &Path) -> Self {
        if let DataSource::MnistTrain { path, .. } = &mut self.source {
            if path.is_relative() {
                *path = root.join(&*path);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.source {
            DataSource::Synthetic { n, d } if *n == 0 || *d == 0 => {
                Err(Error::Config("synthetic dataset needs n, d >= 1".into()))
            }
            DataSource::MnistTrain { take_n: 0, .. } => Err(Error::Config("take_n must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

pub fn synth_patterns(n: usize, d: usize, rng: RngState) -> Result<MemoryMatrix> {
    let mut r = rng.rng();
    let data = (0..n * d).map(|_| r.random_range(-1.0..=1.0)).collect();
    MemoryMatrix::new(d, n, data)
}

/// Maps a pixel byte onto `[-1, 1]`, with 0 -> -1 and 255 -> 1 exactly.
pub fn rescale_pixel(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: "file ends inside the header".into(),
        })
}

/// Parses an in-memory IDX3 image file and keeps the first `take_n` images.
pub fn parse_idx_images(bytes: &[u8], take_n: usize) -> Result<MemoryMatrix> {
    match be_u32(bytes, 0)? {
        IDX_IMAGE_MAGIC => {}
        IDX_LABEL_MAGIC => return Err(Error::LabelFile),
        other => {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic number 0x{other:08x}"),
            })
        }
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let d = rows * cols;
    if take_n > count {
        return Err(Error::Config(format!("requested {take_n} images but the file holds {count}")));
    }
    let needed = 16 + take_n * d;
    if bytes.len() < needed {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated pixel data: need {needed} bytes for {take_n} images"),
        });
    }
    let data = bytes[16..needed].iter().map(|&v| rescale_pixel(v)).collect();
    MemoryMatrix::new(d, take_n, data)
}

pub fn load_mnist(path: &Path, take_n: usize) -> Result<MemoryMatrix> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes, take_n)
}

/// Resolves the memory for a run; `rng` is only used by unseeded synthetic data.
pub fn load_dataset(spec: &DatasetSpec, rng: RngState) -> Result<MemoryMatrix> {
    spec.validate()?;
    match &spec.source {
        DataSource::Synthetic { n, d } => {
            let state = spec.seed.map_or(rng, |s| RngState::new(s, 0));
            synth_patterns(*n, *d, state)
        }
        DataSource::MnistTrain { path, take_n } => load_mnist(path, *take_n),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|source| Error::Json {
        path: path.into(),
        source,
    })
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Csv(format!("{}: {other:?}", path.display())),
    }
}

/// Writes serializable rows as CSV with a header taken from the field names.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

pub fn write_results_csv(path: &Path, results: &[ExperimentResult]) -> Result<()> {
    write_csv(path, results)
}

pub fn read_results_csv(path: &Path) -> Result<Vec<ExperimentResult>> {
    read_csv(path)
}

pub fn write_runs_csv(path: &Path, runs: &[RunRecord]) -> Result<()> {
    write_csv(path, runs)
}

pub fn write_training_log_csv(path: &Path, log: &[EpochRecord]) -> Result<()> {
    write_csv(path, log)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub energy: f64,
    pub step_norm: f64,
}

pub fn trajectory_rows(t: &Trajectory) -> Vec<TrajectoryRow> {
    t.energies
        .iter()
        .zip(t.step_norms())
        .enumerate()
        .map(|(iteration, (&energy, step_norm))| TrajectoryRow {
            iteration,
            energy,
            step_norm,
        })
        .collect()
}

pub fn write_trajectory_csv(path: &Path, t: &Trajectory) -> Result<()> {
    write_csv(path, &trajectory_rows(t))
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryRow>> {
    read_csv(path)
}

/// One row per sample: the origin index, then the query entries `x0..x{d-1}`.
pub fn write_samples_csv(path: &Path, samples: &[VariantSample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let d = samples.first().map_or(0, |s| s.query.len());
    let header = std::iter::once("origin".to_string()).chain((0..d).map(|i| format!("x{i}")));
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for s in samples {
        let row = std::iter::once(s.origin.to_string()).chain(s.query.iter().map(f64::to_string));
        w.write_record(row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [magic, count, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    #[test]
    fn pixel_endpoints() {
        assert_eq!(rescale_pixel(0), -1.0);
        assert_eq!(rescale_pixel(255), 1.0);
        assert!((rescale_pixel(127) + 0.00392).abs() < 1e-5);
    }

    #[test]
    fn parses_small_file() {
        let bytes = idx(IDX_IMAGE_MAGIC, 3, 1, 2, &[0, 255, 51, 204, 1, 2]);
        let m = parse_idx_images(&bytes, 2).unwrap();
        assert_eq!((m.d(), m.n()), (2, 2));
        assert_eq!(m.column(0), &[-1.0, 1.0]);
        assert_eq!(m.column(1), &[rescale_pixel(51), rescale_pixel(204)]);
    }

    #[test]
    fn rejects_bad_files() {
        let labels = idx(IDX_LABEL_MAGIC, 1, 1, 1, &[0]);
        assert!(matches!(parse_idx_images(&labels, 1), Err(Error::LabelFile)));
        let bad = idx(0x1234, 1, 1, 1, &[0]);
        assert!(matches!(parse_idx_images(&bad, 1), Err(Error::Format { offset: 0, .. })));
        let short = idx(IDX_IMAGE_MAGIC, 2, 2, 2, &[0; 5]);
        assert!(matches!(parse_idx_images(&short, 2), Err(Error::Format { offset: 21, .. })));
        assert!(matches!(parse_idx_images(&[0, 0, 8], 1), Err(Error::Format { .. })));
    }

    #[test]
    fn synthetic_is_seeded_and_bounded() {
        let a = synth_patterns(10, 3, RngState::new(4, 1)).unwrap();
        let b = synth_patterns(10, 3, RngState::new(4, 1)).unwrap();
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}
