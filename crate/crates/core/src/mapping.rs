//! Aligned embedding of per-feature samples into a shared space.
//!
//! A reference layout is first fit to the average of the per-feature distance
//! matrices by pure stress minimization. Each feature sample is then embedded
//! minimizing `λ·E_st + (1−λ)·E_al`, where
//!
//! ```text
//! E_st = 1/s² Σ_i Σ_j (δ_ij − ‖r_i − r_j‖)²
//! E_al = 1/s² Σ_i Σ_j (‖r̄_i − r̄_j‖ − ‖r̄_i − r_j‖)²
//! ```
//!
//! with `r̄` the reference rows. Both are minimized by stochastic pairwise
//! updates: each epoch draws `ceil(√s)` pivots without replacement and moves
//! every other row against each pivot, with learning rate
//! `γ = γ₀ (1 − it/Ω)^κ`.

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{euclidean, FeatureMatrix, Rows};
use crate::rng;
use crate::sampling::{clusters_for, SampleSet};

/// Below this embedded distance the gradient direction is undefined.
pub const COINCIDENT_EPS: f64 = 1e-8;

/// Symmetric, zero-diagonal distances stored as the packed strict upper
/// triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    size: usize,
    packed: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_packed(size: usize, packed: Vec<f64>) -> Result<Self> {
        if packed.len() != size * size.saturating_sub(1) / 2 {
            return Err(Error::shape(format!(
                "{} packed entries for a {size} x {size} distance matrix",
                packed.len()
            )));
        }
        if packed.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::invalid("distances must be finite and non-negative"));
        }
        Ok(Self { size, packed })
    }

    /// Euclidean distances between all rows.
    pub fn from_rows(data: &impl Rows) -> Self {
        let s = data.n_rows();
        let mut packed = Vec::with_capacity(s * s.saturating_sub(1) / 2);
        for i in 0..s {
            for j in i + 1..s {
                packed.push(euclidean(data.row(i), data.row(j)));
            }
        }
        Self { size: s, packed }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn packed(&self) -> &[f64] {
        &self.packed
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        // i < j
        i * (2 * self.size - i - 1) / 2 + (j - i - 1)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        match i.cmp(&j) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.packed[self.offset(i, j)],
            std::cmp::Ordering::Greater => self.packed[self.offset(j, i)],
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let s = self.size;
        let mut out = vec![0.0; s * s];
        for i in 0..s {
            for j in 0..s {
                out[i * s + j] = self.get(i, j);
            }
        }
        out
    }

    /// Entrywise `Σ w_k Δ_k`.
    pub fn weighted_sum(deltas: &[&DistanceMatrix], weights: &[f64]) -> Result<DistanceMatrix> {
        let first = deltas.first().ok_or_else(|| Error::invalid("no distance matrices"))?;
        if weights.len() != deltas.len() {
            return Err(Error::shape(format!(
                "{} weights for {} distance matrices",
                weights.len(),
                deltas.len()
            )));
        }
        if let Some(bad) = deltas.iter().find(|d| d.size != first.size) {
            return Err(Error::shape(format!(
                "distance matrix of size {} does not match {}",
                bad.size, first.size
            )));
        }
        let mut packed = vec![0.0; first.packed.len()];
        for (d, &w) in deltas.iter().zip(weights) {
            for (acc, v) in packed.iter_mut().zip(&d.packed) {
                *acc += w * v;
            }
        }
        Ok(DistanceMatrix {
            size: first.size,
            packed,
        })
    }
}

pub fn distance_matrix(data: &impl Rows) -> DistanceMatrix {
    DistanceMatrix::from_rows(data)
}

/// `Δ̄ = (1/p) Σ Δ_i`.
pub fn average_distance_matrix(deltas: &[DistanceMatrix]) -> Result<DistanceMatrix> {
    let refs: Vec<&DistanceMatrix> = deltas.iter().collect();
    let w = vec![1.0 / deltas.len().max(1) as f64; deltas.len()];
    DistanceMatrix::weighted_sum(&refs, &w)
}

/// Points in the shared `m`-dimensional space, one row per sample (or item).
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    coords: Vec<f64>,
    rows: usize,
    m: usize,
    pub source: String,
    pub lambda_used: f64,
    pub seed: u64,
}

impl Embedding {
    pub fn new(source: impl Into<String>, rows: usize, m: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != rows * m {
            return Err(Error::shape(format!(
                "{} coordinates for a {rows} x {m} embedding",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("embedding coordinates must be finite"));
        }
        Ok(Self {
            coords,
            rows,
            m,
            source: source.into(),
            lambda_used: 1.0,
            seed: 0,
        })
    }

    pub fn from_feature_matrix(f: &FeatureMatrix) -> Result<Self> {
        Self::new(f.name.clone(), f.rows(), f.dims(), f.values().to_vec())
    }

    pub fn to_feature_matrix(&self) -> FeatureMatrix {
        FeatureMatrix::new(self.source.clone(), self.rows, self.m, self.coords.clone())
            .expect("embedding coordinates are finite")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Embedding> {
        let mut coords = Vec::with_capacity(indices.len() * self.m);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!("row {i} out of range ({} rows)", self.rows)));
            }
            coords.extend_from_slice(self.row(i));
        }
        Ok(Embedding {
            coords,
            rows: indices.len(),
            ..self.clone()
        })
    }

    fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.m..(i + 1) * self.m]
    }
}

impl Rows for Embedding {
    fn n_rows(&self) -> usize {
        self.rows
    }

    fn n_cols(&self) -> usize {
        self.m
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.coords[i * self.m..(i + 1) * self.m]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MappingOptions {
    pub lambda: f64,
    pub iterations: usize,
    pub gamma0: f64,
    pub kappa: f64,
    pub m: usize,
    pub seed: u64,
}

impl Default for MappingOptions {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            iterations: 500,
            gamma0: 0.1,
            kappa: 0.95,
            m: 2,
            seed: 0,
        }
    }
}

impl MappingOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be >= 1"));
        }
        if !(self.gamma0 > 0.0 && self.gamma0.is_finite()) {
            return Err(Error::invalid("gamma0 must be positive"));
        }
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(Error::invalid("kappa must be non-negative"));
        }
        if self.m < 1 {
            return Err(Error::invalid("target dimension m must be >= 1"));
        }
        Ok(())
    }

    /// `γ₀ (1 − it/Ω)^κ` for `it` in `0..Ω`.
    pub fn learning_rate(&self, it: usize) -> f64 {
        let frac = it as f64 / self.iterations as f64;
        self.gamma0 * (1.0 - frac).powf(self.kappa)
    }
}

/// How the target dimensionality is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DimensionMode {
    /// Largest estimated intrinsic dimension over the feature sets.
    MaxIntrinsic,
    /// Smallest estimated intrinsic dimension over the feature sets.
    MinIntrinsic,
    Fixed(usize),
}

/// Snapshot handed to progress observers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MappingProgress {
    /// 0 for the reference layout, `i + 1` for feature set `i`.
    pub stage: usize,
    pub iteration: usize,
    pub iterations: usize,
    pub stress: Option<f64>,
    pub alignment: Option<f64>,
}

/// Returns `false` to cancel the run.
pub type Observer<'a> = &'a (dyn Fn(MappingProgress) -> bool + Sync);

fn always_continue(_: MappingProgress) -> bool {
    true
}

/// Gradient w.r.t. `r_j` of `½(δ − ‖r_i − r_j‖)²`: `(δ − d)(r_i − r_j)/d`.
/// `None` when the two points coincide.
pub fn pair_stress_gradient(delta: f64, ri: &[f64], rj: &[f64], out: &mut [f64]) -> Option<f64> {
    pair_gradient(delta, ri, rj, out)
}

/// Gradient w.r.t. `r_j` of `½(‖r̄_i − r̄_j‖ − ‖r̄_i − r_j‖)²`.
pub fn pair_alignment_gradient(ref_delta: f64, ref_i: &[f64], rj: &[f64], out: &mut [f64]) -> Option<f64> {
    pair_gradient(ref_delta, ref_i, rj, out)
}

#[inline]
fn pair_gradient(target: f64, anchor: &[f64], moving: &[f64], out: &mut [f64]) -> Option<f64> {
    let d = euclidean(anchor, moving);
    let residual = target - d;
    if d < COINCIDENT_EPS {
        return None;
    }
    let scale = residual / d;
    for ((o, a), b) in out.iter_mut().zip(anchor).zip(moving) {
        *o = scale * (a - b);
    }
    Some(residual)
}

fn random_unit(rng: &mut rng::Rng, out: &mut [f64]) {
    loop {
        for o in out.iter_mut() {
            *o = rng.random_range(-1.0..1.0);
        }
        let n = out.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            out.iter_mut().for_each(|x| *x /= n);
            return;
        }
    }
}

/// Coincident-point fallback: random direction scaled by the residual.
fn fallback_gradient(residual: f64, rng: &mut rng::Rng, out: &mut [f64]) {
    random_unit(rng, out);
    out.iter_mut().for_each(|x| *x *= residual);
}

struct AlignTarget<'a> {
    reference: &'a Embedding,
    distances: &'a DistanceMatrix,
}

fn initial_layout(s: usize, m: usize, rng: &mut rng::Rng) -> Vec<f64> {
    (0..s * m).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn run_sgd(
    target: &DistanceMatrix,
    align: Option<AlignTarget<'_>>,
    opts: &MappingOptions,
    source: &str,
    stage: usize,
    observer: Observer<'_>,
) -> Result<Embedding> {
    let s = target.size();
    let m = opts.m;
    let lambda = if align.is_some() { opts.lambda } else { 1.0 };
    let mut rng = rng::seeded(opts.seed);
    let mut emb = Embedding::new(source, s, m, initial_layout(s, m, &mut rng))?;
    emb.lambda_used = lambda;
    emb.seed = opts.seed;

    let pivots = clusters_for(s).min(s);
    let report_every = (opts.iterations / 20).max(1);
    let mut g_st = vec![0.0; m];
    let mut g_al = vec![0.0; m];
    let mut pivot_row = vec![0.0; m];

    for it in 0..opts.iterations {
        let gamma = opts.learning_rate(it);
        let chosen = rand::seq::index::sample(&mut rng, s, pivots);
        for i in chosen.iter() {
            pivot_row.copy_from_slice(emb.row(i));
            for j in 0..s {
                if j == i {
                    // the stress term vanishes on the diagonal; the alignment term pulls r_i onto r̄_i
                    if let Some(a) = align.as_ref().filter(|_| lambda < 1.0) {
                        if pair_alignment_gradient(0.0, a.reference.row(i), emb.row(i), &mut g_al).is_some() {
                            let ri = emb.row_mut(i);
                            for d in 0..m {
                                ri[d] -= gamma * (1.0 - lambda) * g_al[d];
                            }
                        }
                    }
                    continue;
                }
                if lambda > 0.0 {
                    if pair_stress_gradient(target.get(i, j), &pivot_row, emb.row(j), &mut g_st).is_none() {
                        fallback_gradient(target.get(i, j), &mut rng, &mut g_st);
                    }
                } else {
                    g_st.fill(0.0);
                }
                match &align {
                    Some(a) if lambda < 1.0 => {
                        let ref_i = a.reference.row(i);
                        let dbar = a.distances.get(i, j);
                        if pair_alignment_gradient(dbar, ref_i, emb.row(j), &mut g_al).is_none() {
                            fallback_gradient(dbar, &mut rng, &mut g_al);
                        }
                    }
                    _ => g_al.fill(0.0),
                }
                let rj = emb.row_mut(j);
                for d in 0..m {
                    rj[d] -= gamma * (lambda * g_st[d] + (1.0 - lambda) * g_al[d]);
                }
            }
        }

        let last = it + 1 == opts.iterations;
        if last || (it + 1) % report_every == 0 {
            let progress = MappingProgress {
                stage,
                iteration: it + 1,
                iterations: opts.iterations,
                stress: Some(stress(target, &emb)?),
                alignment: align
                    .as_ref()
                    .map(|a| alignment_error(a.reference, &emb))
                    .transpose()?,
            };
            if !observer(progress) {
                return Err(Error::Cancelled);
            }
        }
    }
    if emb.coords.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("mapping diverged to non-finite coordinates"));
    }
    Ok(emb)
}

fn check_mappable(s: usize, opts: &MappingOptions) -> Result<()> {
    opts.validate()?;
    if s < 2 {
        return Err(Error::invalid(format!("mapping needs at least 2 points, got {s}")));
    }
    Ok(())
}

/// Pure stress layout of `Δ̄` (λ forced to 1).
pub fn map_reference(delta_bar: &DistanceMatrix, opts: &MappingOptions) -> Result<Embedding> {
    map_reference_with(delta_bar, opts, &always_continue)
}

pub fn map_reference_with(
    delta_bar: &DistanceMatrix,
    opts: &MappingOptions,
    observer: Observer<'_>,
) -> Result<Embedding> {
    let opts = MappingOptions { lambda: 1.0, ..*opts };
    check_mappable(delta_bar.size(), &opts)?;
    run_sgd(delta_bar, None, &opts, "reference", 0, observer)
}

/// Embed one feature sample against `reference` with trade-off `opts.lambda`.
pub fn map_aligned(f_sample: &FeatureMatrix, reference: &Embedding, opts: &MappingOptions) -> Result<Embedding> {
    let delta = distance_matrix(f_sample);
    let emb = map_aligned_distances(&delta, reference, opts, 0, &always_continue)?;
    Ok(Embedding {
        source: f_sample.name.clone(),
        ..emb
    })
}

pub fn map_aligned_distances(
    delta: &DistanceMatrix,
    reference: &Embedding,
    opts: &MappingOptions,
    stage: usize,
    observer: Observer<'_>,
) -> Result<Embedding> {
    check_mappable(delta.size(), opts)?;
    if reference.rows() != delta.size() || reference.m() != opts.m {
        return Err(Error::shape(format!(
            "reference is {} x {}, expected {} x {}",
            reference.rows(),
            reference.m(),
            delta.size(),
            opts.m
        )));
    }
    let ref_distances = distance_matrix(reference);
    let align = AlignTarget {
        reference,
        distances: &ref_distances,
    };
    run_sgd(delta, Some(align), opts, "aligned", stage, observer)
}

/// `1/s² Σ_i Σ_j (δ_ij − ‖r_i − r_j‖)²` over ordered pairs.
pub fn stress(delta: &DistanceMatrix, r: &Embedding) -> Result<f64> {
    let s = delta.size();
    if r.rows() != s {
        return Err(Error::shape(format!("embedding has {} rows, distances {s}", r.rows())));
    }
    let mut total = 0.0;
    for i in 0..s {
        for j in i + 1..s {
            let e = delta.get(i, j) - euclidean(r.row(i), r.row(j));
            total += e * e;
        }
    }
    Ok(2.0 * total / (s * s) as f64)
}

pub fn stress_of_features(f: &FeatureMatrix, r: &Embedding) -> Result<f64> {
    stress(&distance_matrix(f), r)
}

/// `1/s² Σ_i Σ_j (‖r̄_i − r̄_j‖ − ‖r̄_i − r_j‖)²`, diagonal included.
pub fn alignment_error(reference: &Embedding, r: &Embedding) -> Result<f64> {
    let s = reference.rows();
    if r.rows() != s || r.m() != reference.m() {
        return Err(Error::shape(format!(
            "embedding is {} x {}, reference {} x {}",
            r.rows(),
            r.m(),
            s,
            reference.m()
        )));
    }
    let mut total = 0.0;
    for i in 0..s {
        let ri = reference.row(i);
        for j in 0..s {
            let e = euclidean(ri, reference.row(j)) - euclidean(ri, r.row(j));
            total += e * e;
        }
    }
    Ok(total / (s * s) as f64)
}

/// Levina–Bickel maximum-likelihood intrinsic dimension, averaged over all
/// points and all `k` in `k_min..=k_max`. Points whose neighbor distances
/// contain zeros are skipped for that `k`; a point whose `k` neighbors are
/// all equidistant contributes the ambient dimension.
pub fn intrinsic_dim_mle(data: &impl Rows, k_min: usize, k_max: usize) -> Result<f64> {
    let n = data.n_rows();
    if k_min < 2 || k_min > k_max || k_max >= n {
        return Err(Error::invalid(format!(
            "invalid neighbor range {k_min}..={k_max} for {n} points"
        )));
    }
    let ambient = data.n_cols().max(1) as f64;
    let per_point: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|x| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&y| y != x)
                .map(|y| euclidean(data.row(x), data.row(y)))
                .collect();
            d.select_nth_unstable_by(k_max - 1, f64::total_cmp);
            let nearest = &mut d[..k_max];
            nearest.sort_unstable_by(f64::total_cmp);
            let mut sum = 0.0;
            let mut count = 0;
            for k in k_min..=k_max {
                let tk = nearest[k - 1];
                if nearest[0] <= 0.0 || tk <= 0.0 {
                    continue;
                }
                let mean_log: f64 = nearest[..k - 1].iter().map(|tj| (tk / tj).ln()).sum::<f64>() / (k - 1) as f64;
                // all k neighbors tied: the likelihood is unbounded, cap at the ambient dimension
                sum += if mean_log > 0.0 { 1.0 / mean_log } else { ambient };
                count += 1;
            }
            (sum, count)
        })
        .collect();
    let (sum, count) = per_point
        .iter()
        .fold((0.0, 0usize), |(s, c), (ps, pc)| (s + ps, c + pc));
    let skipped = n * (k_max - k_min + 1) - count;
    if skipped > 0 {
        log::warn!("intrinsic dimension: skipped {skipped} degenerate (point, k) pairs");
    }
    if count == 0 {
        return Err(Error::invalid("all neighbor distances are degenerate"));
    }
    Ok(sum / count as f64)
}

/// Neighbor range used for automatic dimension selection: the usual 10..=20,
/// clamped to what `n` points allow.
pub fn default_k_range(n: usize) -> Option<(usize, usize)> {
    if n < 3 {
        return None;
    }
    let k_max = 20.min(n - 1);
    let k_min = 10.min(k_max).max(2);
    Some((k_min, k_max))
}

/// Resolve `m` from the sample's feature sets.
pub fn resolve_dimension(sample: &SampleSet, mode: DimensionMode) -> Result<usize> {
    let estimates = || -> Result<Vec<f64>> {
        let (k_min, k_max) = default_k_range(sample.len())
            .ok_or_else(|| Error::invalid("too few sample points to estimate intrinsic dimension"))?;
        sample
            .per_feature_samples
            .iter()
            .map(|f| intrinsic_dim_mle(f, k_min, k_max))
            .collect()
    };
    let m = match mode {
        DimensionMode::Fixed(m) => m,
        DimensionMode::MaxIntrinsic => estimates()?.into_iter().fold(f64::MIN, f64::max).round() as usize,
        DimensionMode::MinIntrinsic => estimates()?.into_iter().fold(f64::MAX, f64::min).round() as usize,
    };
    if m == 0 && matches!(mode, DimensionMode::Fixed(_)) {
        return Err(Error::invalid("target dimension m must be >= 1"));
    }
    Ok(m.max(1))
}

/// Reference layout plus one aligned embedding per feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct MappedSample {
    pub reference: Embedding,
    pub aligned: Vec<Embedding>,
}

impl MappedSample {
    pub fn m(&self) -> usize {
        self.reference.m()
    }
}

/// Final energies of one aligned embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEnergies {
    pub feature: String,
    pub stress: f64,
    pub alignment: f64,
}

pub fn energies(sample: &SampleSet, mapped: &MappedSample) -> Result<Vec<FeatureEnergies>> {
    sample
        .per_feature_samples
        .iter()
        .zip(&mapped.aligned)
        .map(|(f, r)| {
            Ok(FeatureEnergies {
                feature: f.name.clone(),
                stress: stress_of_features(f, r)?,
                alignment: alignment_error(&mapped.reference, r)?,
            })
        })
        .collect()
}

pub fn map_all(sample: &SampleSet, opts: &MappingOptions) -> Result<MappedSample> {
    map_all_with(sample, opts, &always_continue)
}

/// Reference from `Δ̄` at λ = 1, then every feature aligned against it. The
/// per-feature runs execute in parallel with seeds derived from `opts.seed`.
pub fn map_all_with(sample: &SampleSet, opts: &MappingOptions, observer: Observer<'_>) -> Result<MappedSample> {
    opts.validate()?;
    let deltas: Vec<DistanceMatrix> = sample.per_feature_samples.par_iter().map(distance_matrix).collect();
    let delta_bar = average_distance_matrix(&deltas)?;
    let ref_opts = MappingOptions {
        seed: rng::derive(opts.seed, 0),
        ..*opts
    };
    let reference = map_reference_with(&delta_bar, &ref_opts, observer)?;
    let aligned = deltas
        .par_iter()
        .zip(&sample.per_feature_samples)
        .enumerate()
        .map(|(i, (delta, f))| {
            let o = MappingOptions {
                seed: rng::derive(opts.seed, i as u64 + 1),
                ..*opts
            };
            let emb = map_aligned_distances(delta, &reference, &o, i + 1, observer)?;
            Ok(Embedding {
                source: f.name.clone(),
                ..emb
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MappedSample { reference, aligned })
}
