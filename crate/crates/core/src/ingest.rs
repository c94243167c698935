//! Loading, validating, normalizing and persisting multi-feature datasets.
//!
//! Matrices are stored in the FMAT layout: the 8-byte magic
//! `FMAT\x00\x01\x00\x00`, a little-endian `u32` row count and `u32` column
//! count, then `rows * cols` little-endian `f64` values in row-major order.
//! CSV is accepted on import only.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;

pub const FMAT_MAGIC: [u8; 8] = *b"FMAT\x00\x01\x00\x00";
const HEADER_LEN: u64 = 16;

/// Items plus every feature representation of them.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub item_ids: Vec<String>,
    pub feature_sets: Vec<FeatureMatrix>,
    pub labels: Option<Vec<String>>,
    pub thumbnails: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        item_ids: Vec<String>,
        feature_sets: Vec<FeatureMatrix>,
        labels: Option<Vec<String>>,
        thumbnails: Option<Vec<String>>,
    ) -> Result<Self> {
        let n = item_ids.len();
        if n < 2 {
            return Err(Error::invalid(format!("dataset needs at least 2 items, got {n}")));
        }
        if feature_sets.is_empty() {
            return Err(Error::invalid("dataset needs at least one feature set"));
        }
        let mut seen = HashSet::new();
        for f in &feature_sets {
            validate_feature_name(&f.name)?;
            if !seen.insert(f.name.as_str()) {
                return Err(Error::DuplicateFeature(f.name.clone()));
            }
            if f.rows() != n {
                return Err(Error::RowCountMismatch {
                    name: f.name.clone(),
                    expected: n,
                    found: f.rows(),
                });
            }
        }
        for (what, list) in [("labels", &labels), ("thumbnails", &thumbnails)] {
            if let Some(list) = list {
                if list.len() != n {
                    return Err(Error::RowCountMismatch {
                        name: what.into(),
                        expected: n,
                        found: list.len(),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            item_ids,
            feature_sets,
            labels,
            thumbnails,
        })
    }

    pub fn n(&self) -> usize {
        self.item_ids.len()
    }

    pub fn p(&self) -> usize {
        self.feature_sets.len()
    }

    pub fn feature_names(&self) -> Vec<String> {
        self.feature_sets.iter().map(|f| f.name.clone()).collect()
    }

    pub fn is_normalized(&self) -> bool {
        self.feature_sets.iter().all(FeatureMatrix::is_normalized)
    }

    /// Unit-normalize every feature set.
    pub fn normalized(&self) -> Result<Dataset> {
        let feature_sets = self
            .feature_sets
            .iter()
            .map(|f| f.normalize_unit(Some(&self.item_ids)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            feature_sets,
            ..self.clone()
        })
    }

    /// Load a manifest and every file it references. Relative paths are
    /// resolved against the manifest's directory.
    pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let manifest = Manifest::read(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        manifest.load(base)
    }
}

/// Feature names double as artifact file-name components.
pub fn validate_feature_name(name: &str) -> Result<()> {
    if name.trim().is_empty() {
        return Err(Error::Manifest("feature set name must be non-empty".into()));
    }
    if name.contains(['/', '\\']) || name == "." || name == ".." {
        return Err(Error::Manifest(format!(
            "feature set name `{name}` must not contain path separators"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureEntry {
    pub name: String,
    pub path: PathBuf,
}

/// Dataset manifest. Written as TOML (or JSON when the file ends in
/// `.json`):
///
/// ```toml
/// name = "photos"
/// items = "items.txt"
/// labels = "labels.txt"
///
/// [[features]]
/// name = "color"
/// path = "color.fmat"
/// ```
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub items: PathBuf,
    pub features: Vec<FeatureEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnails: Option<PathBuf>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, is_json(path))
    }

    pub fn parse(text: &str, json: bool) -> Result<Manifest> {
        if json {
            serde_json::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
        } else {
            toml::from_str(text).map_err(|e| Error::Manifest(e.to_string()))
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = if is_json(path) {
            serde_json::to_string_pretty(self).map_err(|e| Error::Manifest(e.to_string()))?
        } else {
            toml::to_string(self).map_err(|e| Error::Manifest(e.to_string()))?
        };
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, base: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let item_ids = read_lines(&resolve(&self.items))?;
        let mut seen = HashSet::new();
        let mut features = Vec::with_capacity(self.features.len());
        for entry in &self.features {
            validate_feature_name(&entry.name)?;
            if !seen.insert(entry.name.clone()) {
                return Err(Error::DuplicateFeature(entry.name.clone()));
            }
            features.push(read_any_matrix(&resolve(&entry.path))?.with_name(entry.name.clone()));
        }
        let labels = self.labels.as_deref().map(|p| read_lines(&resolve(p))).transpose()?;
        let thumbnails = self.thumbnails.as_deref().map(|p| read_lines(&resolve(p))).transpose()?;
        Dataset::new(self.name.clone(), item_ids, features, labels, thumbnails)
    }
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// One entry per line; a single trailing newline is not an entry.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim_end_matches('\r').to_string()).collect())
}

pub fn write_lines<T: std::fmt::Display>(path: &Path, lines: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in lines {
        writeln!(w, "{l}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// FMAT or CSV, chosen by extension.
pub fn read_any_matrix(path: &Path) -> Result<FeatureMatrix> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_csv(&stem(path), &text)
    } else {
        read_matrix(path)
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "matrix".into())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&stem(path), &bytes)
}

pub fn write_matrix(f: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(f)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_matrix(f: &FeatureMatrix) -> Result<Vec<u8>> {
    let overflow = || Error::DimensionOverflow {
        rows: f.rows() as u64,
        cols: f.dims() as u64,
    };
    let rows = u32::try_from(f.rows()).map_err(|_| overflow())?;
    let cols = u32::try_from(f.dims()).map_err(|_| overflow())?;
    let mut out = Vec::with_capacity(HEADER_LEN as usize + f.values().len() * 8);
    out.extend_from_slice(&FMAT_MAGIC);
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in f.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_matrix(name: &str, bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < 8 || bytes[..8] != FMAT_MAGIC {
        return Err(Error::UnrecognizedFormat(format!("`{name}` does not start with FMAT magic")));
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as u64;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as u64;
    let overflow = Error::DimensionOverflow { rows, cols };
    let payload = rows
        .checked_mul(cols)
        .and_then(|c| c.checked_mul(8))
        .ok_or(overflow)?;
    let expected = HEADER_LEN + payload;
    let found = bytes.len() as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::UnrecognizedFormat(format!(
            "`{name}` has {} trailing bytes",
            found - expected
        )));
    }
    let values = bytes[HEADER_LEN as usize..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(name, rows as usize, cols as usize, values).map(FeatureMatrix::detect_normalized)
}

/// Headerless comma-separated numbers, one row per line.
pub fn parse_csv(name: &str, text: &str) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::UnrecognizedFormat(format!("`{name}` csv: {e}")))?;
        let row = record
            .iter()
            .map(|field| {
                field.parse::<f64>().map_err(|_| {
                    Error::UnrecognizedFormat(format!("`{name}` csv row {i}: `{field}` is not a number"))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    FeatureMatrix::from_rows(name, &rows)
}
