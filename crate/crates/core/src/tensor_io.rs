//! Dense tensor container (`.dtns`) and multi-matrix job manifests.
//!
//! A `.dtns` file is a fixed 17-byte little-endian header followed by the
//! row-major `f32` payload:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"DTNS"`            |
//! | 4      | 2    | version (`u16`, currently 1) |
//! | 6      | 4    | rows (`u32`)               |
//! | 10     | 4    | cols (`u32`)               |
//! | 14     | 1    | dtype (`0` = `f32`)        |
//! | 15     | 2    | reserved, zero             |

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const TENSOR_MAGIC: [u8; 4] = *b"DTNS";
pub const TENSOR_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 17;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("manifest parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("missing file for entry `{entry}`: {path}")]
    MissingFile { entry: String, path: PathBuf },
    #[error("io error on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorHeader {
    pub version: u16,
    pub rows: u32,
    pub cols: u32,
    pub dtype: u8,
}

impl TensorHeader {
    pub fn payload_len(&self) -> usize {
        self.rows as usize * self.cols as usize * 4
    }

    fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&TENSOR_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.rows.to_le_bytes());
        out.extend_from_slice(&self.cols.to_le_bytes());
        out.push(self.dtype);
        out.extend_from_slice(&[0, 0]);
    }

    fn parse(bytes: &[u8]) -> Result<Self, TensorIoError> {
        if bytes.len() < HEADER_LEN {
            return Err(TensorIoError::MalformedHeader(format!(
                "need {HEADER_LEN} header bytes, got {}",
                bytes.len()
            )));
        }
        if bytes[0..4] != TENSOR_MAGIC {
            return Err(TensorIoError::MalformedHeader("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != TENSOR_VERSION {
            return Err(TensorIoError::MalformedHeader(format!(
                "unsupported version {version}"
            )));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap());
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap());
        let dtype = bytes[14];
        if dtype != DTYPE_F32 {
            return Err(TensorIoError::MalformedHeader(format!(
                "unsupported dtype code {dtype}"
            )));
        }
        if rows == 0 || cols == 0 {
            return Err(TensorIoError::MalformedHeader(format!(
                "empty shape {rows}x{cols}"
            )));
        }
        Ok(Self {
            version,
            rows,
            cols,
            dtype,
        })
    }
}

/// Row-major 2-D `f32` matrix. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorIoError> {
        if rows == 0 || cols == 0 {
            return Err(TensorIoError::ShapeMismatch(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if rows > u32::MAX as usize || cols > u32::MAX as usize {
            return Err(TensorIoError::ShapeMismatch(
                "dimension exceeds u32 range".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(TensorIoError::ShapeMismatch(format!(
                "{rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFiniteValue { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dimensions must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn header(&self) -> TensorHeader {
        TensorHeader {
            version: TENSOR_VERSION,
            rows: self.rows as u32,
            cols: self.cols as u32,
            dtype: DTYPE_F32,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        self.header().write_to(&mut out);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TensorIoError> {
        let header = TensorHeader::parse(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != header.payload_len() {
            return Err(TensorIoError::ShapeMismatch(format!(
                "header says {}x{} ({} bytes) but payload has {} bytes",
                header.rows,
                header.cols,
                header.payload_len(),
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(header.rows as usize, header.cols as usize, data)
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<DenseTensor, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| TensorIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    DenseTensor::from_bytes(&bytes)
}

pub fn save_tensor(tensor: &DenseTensor, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let io_err = |source| TensorIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&tensor.to_bytes()).map_err(io_err)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub weight_path: PathBuf,
    pub calib_paths: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelManifest {
    pub entries: Vec<ManifestEntry>,
}

impl ModelManifest {
    /// Parses `name<TAB>weight_path<TAB>calib[,calib...]` records. Blank
    /// lines and lines starting with `#` are skipped; relative paths are
    /// joined onto `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, TensorIoError> {
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(TensorIoError::ParseError {
                    line: line_no,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let name = fields[0].trim();
            if name.is_empty() {
                return Err(TensorIoError::ParseError {
                    line: line_no,
                    msg: "empty entry name".into(),
                });
            }
            let resolve = |p: &str| {
                let p = Path::new(p.trim());
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_dir.join(p)
                }
            };
            let calib_paths: Vec<PathBuf> = fields[2]
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(resolve)
                .collect();
            if calib_paths.is_empty() {
                return Err(TensorIoError::ParseError {
                    line: line_no,
                    msg: format!("entry `{name}` lists no calibration files"),
                });
            }
            entries.push(ManifestEntry {
                name: name.to_string(),
                weight_path: resolve(fields[1]),
                calib_paths,
            });
        }
        Ok(Self { entries })
    }

    /// Checks that every referenced file exists and that each calibration
    /// slab has one row per weight column.
    pub fn validate(&self) -> Result<(), TensorIoError> {
        for entry in &self.entries {
            let weight = load_entry_file(entry, &entry.weight_path)?;
            for calib_path in &entry.calib_paths {
                let calib = load_entry_file(entry, calib_path)?;
                if calib.rows() != weight.cols() {
                    return Err(TensorIoError::ShapeMismatch(format!(
                        "entry `{}`: calibration {} has {} rows, weight has {} columns",
                        entry.name,
                        calib_path.display(),
                        calib.rows(),
                        weight.cols()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Loads a file referenced by a manifest entry, reporting a missing file
/// against the entry name.
pub fn load_entry_file(entry: &ManifestEntry, path: &Path) -> Result<DenseTensor, TensorIoError> {
    if !path.exists() {
        return Err(TensorIoError::MissingFile {
            entry: entry.name.clone(),
            path: path.to_path_buf(),
        });
    }
    load_tensor(path)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<ModelManifest, TensorIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| TensorIoError::IoFailure {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    ModelManifest::parse(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_file(rows: u32, cols: u32, payload: &[f32]) -> Vec<u8> {
        let mut out = Vec::new();
        TensorHeader {
            version: TENSOR_VERSION,
            rows,
            cols,
            dtype: DTYPE_F32,
        }
        .write_to(&mut out);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn loads_row_major_layout() {
        let t = DenseTensor::from_bytes(&raw_file(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(t.row(0), &[1.0, 2.0]);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }

    #[test]
    fn short_payload_is_shape_mismatch() {
        let err = DenseTensor::from_bytes(&raw_file(2, 3, &[1.0, 2.0, 3.0, 4.0])).unwrap_err();
        assert!(matches!(err, TensorIoError::ShapeMismatch(_)));
    }

    #[test]
    fn nan_payload_rejected() {
        let err = DenseTensor::from_bytes(&raw_file(1, 2, &[1.0, f32::NAN])).unwrap_err();
        assert!(matches!(err, TensorIoError::NonFiniteValue { index: 1 }));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = raw_file(1, 1, &[1.0]);
        bytes[0] = b'X';
        assert!(matches!(
            DenseTensor::from_bytes(&bytes),
            Err(TensorIoError::MalformedHeader(_))
        ));
    }

    #[test]
    fn zero_rows_rejected_at_construction() {
        assert!(DenseTensor::new(0, 3, vec![]).is_err());
    }

    #[test]
    fn negative_zero_survives_round_trip() {
        let t = DenseTensor::new(1, 1, vec![-0.0]).unwrap();
        let back = DenseTensor::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\nq_proj\tw.dtns\tx0.dtns,x1.dtns\n\n";
        let m = ModelManifest::parse(text, Path::new("/base")).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].weight_path, PathBuf::from("/base/w.dtns"));
        assert_eq!(m.entries[0].calib_paths.len(), 2);

        let empty = ModelManifest::parse("# nothing\n", Path::new(".")).unwrap();
        assert!(empty.entries.is_empty());

        assert!(matches!(
            ModelManifest::parse("a\tb\n", Path::new(".")),
            Err(TensorIoError::ParseError { line: 1, .. })
        ));
    }
}
