//! Dense row-major matrices and the [`Rows`] view shared by feature sets and
//! embeddings.

use crate::error::{Error, Result};

/// Unit-norm tolerance used for the `normalized` invariant.
pub const UNIT_TOLERANCE: f64 = 1e-9;

/// Read-only row access over a dense row-major matrix.
pub trait Rows: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn row(&self, i: usize) -> &[f64];
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One feature representation: `rows` items by `dims` descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub name: String,
    rows: usize,
    dims: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(name: impl Into<String>, rows: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected = rows
            .checked_mul(dims)
            .ok_or(Error::DimensionOverflow {
                rows: rows as u64,
                cols: dims as u64,
            })?;
        if values.len() != expected {
            return Err(Error::shape(format!(
                "`{name}`: {} values for a {rows} x {dims} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name,
                row: pos / dims.max(1),
                col: pos % dims.max(1),
            });
        }
        Ok(Self {
            name,
            rows,
            dims,
            values,
            normalized: false,
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let name = name.into();
        let dims = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dims) {
            return Err(Error::shape(format!(
                "`{name}`: row {bad} has {} columns, expected {dims}",
                rows[bad].len()
            )));
        }
        let values = rows.iter().flatten().copied().collect();
        Self::new(name, rows.len(), dims, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<FeatureMatrix> {
        let mut values = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for `{}` ({} rows)",
                    self.name, self.rows
                )));
            }
            values.extend_from_slice(self.row(i));
        }
        Ok(FeatureMatrix {
            name: self.name.clone(),
            rows: indices.len(),
            dims: self.dims,
            values,
            normalized: self.normalized,
        })
    }

    /// Divide every row by its Euclidean norm. Already-normalized matrices are
    /// returned unchanged. `item_ids`, when given, names the offending item in
    /// the zero-row error.
    pub fn normalize_unit(&self, item_ids: Option<&[String]>) -> Result<FeatureMatrix> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut values = self.values.clone();
        if self.dims > 0 {
            for (i, row) in values.chunks_mut(self.dims).enumerate() {
                let n = norm(row);
                if n == 0.0 {
                    let item = item_ids
                        .and_then(|ids| ids.get(i).cloned())
                        .unwrap_or_else(|| format!("#{i}"));
                    return Err(Error::ZeroNorm {
                        name: self.name.clone(),
                        item,
                    });
                }
                row.iter_mut().for_each(|v| *v /= n);
            }
        } else if self.rows > 0 {
            let item = item_ids
                .and_then(|ids| ids.first().cloned())
                .unwrap_or_else(|| "#0".into());
            return Err(Error::ZeroNorm {
                name: self.name.clone(),
                item,
            });
        }
        Ok(FeatureMatrix {
            name: self.name.clone(),
            rows: self.rows,
            dims: self.dims,
            values,
            normalized: true,
        })
    }

    /// Set the `normalized` flag if every row already has unit norm.
    pub fn detect_normalized(mut self) -> Self {
        self.normalized = self.rows > 0
            && self.dims > 0
            && (0..self.rows).all(|i| (norm(self.row(i)) - 1.0).abs() <= UNIT_TOLERANCE);
        self
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }
}

impl Rows for FeatureMatrix {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn n_cols(&self) -> usize {
        self.dims
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dims..(i + 1) * self.dims]
    }
}
