//! Out-of-sample projection through per-point orthogonal local affine maps.
//!
//! For a query `f`, every sample `s_k` gets weight `β_k = ‖s_k − f‖⁻²`. With
//! weighted centroids `s̃`, `r̃` and centered rows `A = S − s̃`, `B = R − r̃`,
//! the orthogonal `M` minimizing `‖D(AM − B)‖_F` (`D = diag(√β)`) is `U Vᵀ`
//! from the SVD `AᵀD²B = U Σ Vᵀ`, and the image is `(f − s̃) M + r̃`.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mapping::Embedding;
use crate::matrix::{squared_distance, FeatureMatrix, Rows};

/// Queries closer than this to a sample map straight onto that sample.
pub const EXACT_SAMPLE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionOptions {
    /// Restrict each local fit to the `k` nearest samples (`k ≥ m + 1`).
    /// `None` uses every sample.
    pub neighbors: Option<usize>,
}

/// The local transform fitted for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalAffine {
    /// `q × m`, orthonormal columns.
    pub transform: DMatrix<f64>,
    pub source_centroid: Vec<f64>,
    pub target_centroid: Vec<f64>,
}

impl LocalAffine {
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let q = self.transform.nrows();
        let m = self.transform.ncols();
        let mut out = self.target_centroid.clone();
        for a in 0..q {
            let x = padded(f, a) - self.source_centroid[a];
            if x == 0.0 {
                continue;
            }
            for (b, o) in out.iter_mut().enumerate().take(m) {
                *o += x * self.transform[(a, b)];
            }
        }
        out
    }

    /// `max |MᵀM − I|`.
    pub fn orthogonality_defect(&self) -> f64 {
        let gram = self.transform.transpose() * &self.transform;
        let m = gram.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }
}

/// Outcome of fitting one query.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalFit {
    /// The query coincides with sample `k`.
    Sample(usize),
    Affine(LocalAffine),
}

#[inline]
fn padded(row: &[f64], a: usize) -> f64 {
    row.get(a).copied().unwrap_or(0.0)
}

fn check_inputs(f: &[f64], samples: &impl Rows, r: &Embedding) -> Result<()> {
    if samples.n_rows() != r.rows() {
        return Err(Error::shape(format!(
            "{} samples but {} embedded rows",
            samples.n_rows(),
            r.rows()
        )));
    }
    if samples.n_rows() == 0 {
        return Err(Error::invalid("projection needs at least one sample"));
    }
    if f.len() != samples.n_cols() {
        return Err(Error::shape(format!(
            "query has {} dims, samples {}",
            f.len(),
            samples.n_cols()
        )));
    }
    Ok(())
}

/// Fit the orthogonal local affine map for query `f`.
pub fn fit_local(f: &[f64], samples: &impl Rows, r: &Embedding, opts: ProjectionOptions) -> Result<LocalFit> {
    check_inputs(f, samples, r)?;
    let n_samples = samples.n_rows();
    let m = r.m();
    // zero-pad features to m when the feature space is smaller than the target
    let q = samples.n_cols().max(m);

    let sq: Vec<f64> = (0..n_samples).map(|k| squared_distance(samples.row(k), f)).collect();
    if let Some(k) = (0..n_samples).find(|&k| sq[k].sqrt() < EXACT_SAMPLE_EPS) {
        return Ok(LocalFit::Sample(k));
    }

    let neighbors: Vec<usize> = match opts.neighbors {
        Some(k) if k < n_samples => {
            if k < m + 1 {
                return Err(Error::invalid(format!("neighbors = {k} must be at least m + 1 = {}", m + 1)));
            }
            let mut order: Vec<usize> = (0..n_samples).collect();
            order.sort_by(|&a, &b| sq[a].total_cmp(&sq[b]).then(a.cmp(&b)));
            order.truncate(k);
            order.sort_unstable();
            order
        }
        _ => (0..n_samples).collect(),
    };

    let mut beta_sum = 0.0;
    let mut s_centroid = vec![0.0; q];
    let mut r_centroid = vec![0.0; m];
    for &k in &neighbors {
        let beta = 1.0 / sq[k];
        beta_sum += beta;
        let s = samples.row(k);
        for (a, c) in s_centroid.iter_mut().enumerate() {
            *c += beta * padded(s, a);
        }
        for (c, v) in r_centroid.iter_mut().zip(r.row(k)) {
            *c += beta * v;
        }
    }
    s_centroid.iter_mut().for_each(|c| *c /= beta_sum);
    r_centroid.iter_mut().for_each(|c| *c /= beta_sum);

    // AᵀD²B = Σ_k β_k (s_k − s̃)ᵀ (r_k − r̃)
    let mut cross = DMatrix::<f64>::zeros(q, m);
    let mut a_row = vec![0.0; q];
    let mut b_row = vec![0.0; m];
    for &k in &neighbors {
        let beta = 1.0 / sq[k];
        let s = samples.row(k);
        for (a, v) in a_row.iter_mut().enumerate() {
            *v = padded(s, a) - s_centroid[a];
        }
        for (b, v) in b_row.iter_mut().enumerate() {
            *v = r.row(k)[b] - r_centroid[b];
        }
        for a in 0..q {
            let wa = beta * a_row[a];
            if wa == 0.0 {
                continue;
            }
            for b in 0..m {
                cross[(a, b)] += wa * b_row[b];
            }
        }
    }

    let svd = cross.svd(true, true);
    let mut u = svd.u.expect("left singular vectors requested");
    let mut v_t = svd.v_t.expect("right singular vectors requested");
    canonicalize_signs(&mut u, &mut v_t);
    let transform = u * v_t;

    Ok(LocalFit::Affine(LocalAffine {
        transform,
        source_centroid: s_centroid,
        target_centroid: r_centroid,
    }))
}

/// Flip each singular pair so the largest-magnitude entry of the left vector
/// is positive.
fn canonicalize_signs(u: &mut DMatrix<f64>, v_t: &mut DMatrix<f64>) {
    for c in 0..u.ncols() {
        let col = u.column(c);
        let mut pivot = 0;
        for a in 1..col.len() {
            if col[a].abs() > col[pivot].abs() {
                pivot = a;
            }
        }
        if col[pivot] < 0.0 {
            u.column_mut(c).neg_mut();
            v_t.row_mut(c).neg_mut();
        }
    }
}

/// Image of a single query point.
pub fn project_point(f: &[f64], samples: &impl Rows, r: &Embedding) -> Result<Vec<f64>> {
    project_point_with(f, samples, r, ProjectionOptions::default())
}

pub fn project_point_with(f: &[f64], samples: &impl Rows, r: &Embedding, opts: ProjectionOptions) -> Result<Vec<f64>> {
    Ok(match fit_local(f, samples, r, opts)? {
        LocalFit::Sample(k) => r.row(k).to_vec(),
        LocalFit::Affine(t) => t.apply(f),
    })
}

/// Project every row of `f` (rows processed in parallel).
pub fn project_all(f: &FeatureMatrix, samples: &FeatureMatrix, r: &Embedding) -> Result<Embedding> {
    project_all_with(f, samples, r, ProjectionOptions::default())
}

pub fn project_all_with(
    f: &FeatureMatrix,
    samples: &FeatureMatrix,
    r: &Embedding,
    opts: ProjectionOptions,
) -> Result<Embedding> {
    let rows: Vec<Vec<f64>> = (0..f.rows())
        .into_par_iter()
        .map(|i| project_point_with(f.row(i), samples, r, opts))
        .collect::<Result<_>>()?;
    let coords = rows.into_iter().flatten().collect();
    let mut out = Embedding::new(f.name.clone(), f.rows(), r.m(), coords)?;
    out.lambda_used = r.lambda_used;
    out.seed = r.seed;
    Ok(out)
}
