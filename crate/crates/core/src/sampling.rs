//! Unified sample construction from per-feature k-means medoids.
//!
//! Each feature set is clustered independently with `k = ceil(sqrt(n))`, the
//! medoid of every cluster is taken as a representative, and the union of
//! all medoid indices is the sample. Every per-feature sample matrix is then
//! re-extracted on that shared index set, so row `j` of every `S_i` is the
//! same item.

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ingest::Dataset;
use crate::matrix::{euclidean, squared_distance, FeatureMatrix, Rows};
use crate::rng;

const MAX_ITERATIONS: usize = 100;
const INERTIA_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    /// Sorted, unique item positions.
    pub indices: Vec<usize>,
    /// `S_i` for every feature set, rows in `indices` order.
    pub per_feature_samples: Vec<FeatureMatrix>,
    pub seed: u64,
}

impl SampleSet {
    /// Extract every feature set on `indices` (sorted and deduplicated first).
    pub fn from_indices(dataset: &Dataset, mut indices: Vec<usize>, seed: u64) -> Result<SampleSet> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::invalid("sample must contain at least one item"));
        }
        let per_feature_samples = dataset
            .feature_sets
            .iter()
            .map(|f| f.select_rows(&indices))
            .collect::<Result<Vec<_>>>()?;
        Ok(SampleSet {
            indices,
            per_feature_samples,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn p(&self) -> usize {
        self.per_feature_samples.len()
    }
}

/// `ceil(sqrt(n))`, computed exactly in integers.
pub fn clusters_for(n: usize) -> usize {
    let mut k = (n as f64).sqrt() as usize;
    while k * k < n {
        k += 1;
    }
    while k > 0 && (k - 1) * (k - 1) >= n {
        k -= 1;
    }
    k
}

/// Lloyd's k-means with farthest-first seeding. Returns `k` non-empty member
/// lists; every item appears in exactly one.
pub fn kmeans(data: &impl Rows, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = data.n_rows();
    let dims = data.n_cols();
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k-means with k = {k} > n = {n}")));
    }

    let mut rng = rng::seeded(seed);
    let mut centers = farthest_first(data, k, rng.random_range(0..n));
    let mut assignment = vec![0usize; n];
    let mut previous_inertia = f64::INFINITY;

    for _ in 0..MAX_ITERATIONS {
        let mut inertia = 0.0;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let (c, d) = nearest_center(data.row(i), &centers, dims);
            *slot = c;
            inertia += d;
        }
        repair_empty(data, &mut assignment, &centers, k);

        let mut sums = vec![0.0; k * dims];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dims..(c + 1) * dims].iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            let cnt = counts[c] as f64;
            for d in 0..dims {
                centers[c * dims + d] = sums[c * dims + d] / cnt;
            }
        }

        let change = (previous_inertia - inertia).abs();
        if inertia == 0.0 || change <= INERTIA_TOLERANCE * previous_inertia {
            break;
        }
        previous_inertia = inertia;
    }

    let mut clusters = vec![Vec::new(); k];
    for (i, &c) in assignment.iter().enumerate() {
        clusters[c].push(i);
    }
    debug_assert!(clusters.iter().all(|c| !c.is_empty()));
    Ok(clusters)
}

fn farthest_first(data: &impl Rows, k: usize, first: usize) -> Vec<f64> {
    let n = data.n_rows();
    let dims = data.n_cols();
    let mut centers = Vec::with_capacity(k * dims);
    centers.extend_from_slice(data.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| squared_distance(data.row(i), data.row(first))).collect();
    for _ in 1..k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        centers.extend_from_slice(data.row(best));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(squared_distance(data.row(i), data.row(best)));
        }
    }
    centers
}

fn nearest_center(x: &[f64], centers: &[f64], dims: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dims.max(1)).enumerate() {
        let d = squared_distance(x, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Re-seed every empty cluster with the farthest member of the currently
/// largest cluster.
fn repair_empty(data: &impl Rows, assignment: &mut [usize], centers: &[f64], k: usize) {
    let dims = data.n_cols().max(1);
    loop {
        let mut counts = vec![0usize; k];
        for &c in assignment.iter() {
            counts[c] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let largest = (0..k).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
        let center = &centers[largest * dims..(largest + 1) * dims];
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &c) in assignment.iter().enumerate() {
            if c == largest {
                let d = squared_distance(data.row(i), center);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        assignment[far.expect("largest cluster is non-empty")] = empty;
    }
}

/// Member minimizing the summed Euclidean distance to all other members;
/// ties go to the smallest index.
pub fn medoid(data: &impl Rows, members: &[usize]) -> Result<usize> {
    if members.is_empty() {
        return Err(Error::invalid("medoid of an empty cluster"));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    for &a in members {
        let total: f64 = members.iter().map(|&b| euclidean(data.row(a), data.row(b))).sum();
        if total < best.1 || (total == best.1 && a < best.0) {
            best = (a, total);
        }
    }
    Ok(best.0)
}

/// Medoids of `ceil(sqrt(n))` k-means clusters for one feature set.
pub fn feature_medoids(f: &FeatureMatrix, seed: u64) -> Result<Vec<usize>> {
    let k = clusters_for(f.rows());
    kmeans(f, k, seed)?.iter().map(|members| medoid(f, members)).collect()
}

/// Union of every feature set's medoids. Feature sets are clustered in
/// parallel with the same seed, so identical feature sets yield identical
/// medoids.
pub fn unified_sample(dataset: &Dataset, seed: u64) -> Result<SampleSet> {
    let per_feature: Vec<Vec<usize>> = dataset
        .feature_sets
        .par_iter()
        .map(|f| feature_medoids(f, seed))
        .collect::<Result<_>>()?;
    let indices = per_feature.into_iter().flatten().collect();
    SampleSet::from_indices(dataset, indices, seed)
}

/// Uniform random sample of `size` items. Debug alternative to the medoid
/// sampler.
pub fn random_sample(dataset: &Dataset, size: usize, seed: u64) -> Result<SampleSet> {
    let n = dataset.n();
    if size == 0 || size > n {
        return Err(Error::invalid(format!("random sample size {size} not in 1..={n}")));
    }
    let mut rng = rng::seeded(seed);
    let indices = rand::seq::index::sample(&mut rng, n, size).into_vec();
    SampleSet::from_indices(dataset, indices, seed)
}
