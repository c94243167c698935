//! Clustering layer on top of fused embeddings: flat-kernel mean shift,
//! transition flows along a path of weight vectors, and average-linkage leaf
//! ordering for dissimilarity heatmaps.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{combine, WeightVector};
use crate::mapping::{DistanceMatrix, Embedding};
use crate::matrix::{euclidean, Rows};
use crate::metrics::quantile_sorted;
use crate::rng;

const SHIFT_TOLERANCE: f64 = 1e-5;
const SHIFT_MAX_ITERATIONS: usize = 300;
const BANDWIDTH_EXACT_LIMIT: usize = 2000;
pub const DEFAULT_QUANTILE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub labels: Vec<usize>,
    pub k: usize,
    pub bandwidth: f64,
    pub weight_vector: Option<WeightVector>,
}

impl Clustering {
    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn shift_to_mode(data: &impl Rows, start: &[f64], bandwidth: f64) -> (Vec<f64>, usize) {
    let dims = data.n_cols();
    let mut x = start.to_vec();
    let mut mean = vec![0.0; dims];
    let mut support = 0;
    for _ in 0..SHIFT_MAX_ITERATIONS {
        mean.fill(0.0);
        let mut count = 0usize;
        for i in 0..data.n_rows() {
            let p = data.row(i);
            if euclidean(p, &x) <= bandwidth {
                count += 1;
                for (m, v) in mean.iter_mut().zip(p) {
                    *m += v;
                }
            }
        }
        if count == 0 {
            break;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        support = count;
        let moved = euclidean(&mean, &x);
        x.copy_from_slice(&mean);
        if moved < SHIFT_TOLERANCE {
            break;
        }
    }
    (x, support)
}

/// Flat-kernel mean shift seeded from every point. Modes closer than
/// `bandwidth / 2` are merged (denser modes win), then each point takes the
/// label of its nearest surviving mode. Labels are numbered by first
/// appearance.
pub fn mean_shift(data: &impl Rows, bandwidth: f64) -> Result<Clustering> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let n = data.n_rows();
    if n == 0 {
        return Ok(Clustering {
            labels: vec![],
            k: 0,
            bandwidth,
            weight_vector: None,
        });
    }
    let modes: Vec<(Vec<f64>, usize)> = (0..n)
        .into_par_iter()
        .map(|i| shift_to_mode(data, data.row(i), bandwidth))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| modes[b].1.cmp(&modes[a].1).then(a.cmp(&b)));
    let mut kept: Vec<&[f64]> = Vec::new();
    for &i in &order {
        let m = &modes[i].0;
        if kept.iter().all(|k| euclidean(k, m) >= bandwidth / 2.0) {
            kept.push(m);
        }
    }

    let mut relabel: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let p = data.row(i);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, m) in kept.iter().enumerate() {
            let d = euclidean(p, m);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        let next = relabel.len();
        labels.push(*relabel.entry(best).or_insert(next));
    }
    Ok(Clustering {
        k: relabel.len(),
        labels,
        bandwidth,
        weight_vector: None,
    })
}

/// The `quantile` of all pairwise distances. Exact up to 2000 rows; beyond
/// that, computed on 2000 rows drawn with `seed`.
pub fn estimate_bandwidth(data: &impl Rows, quantile: f64, seed: u64) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::invalid(format!("quantile {quantile} outside (0, 1)")));
    }
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::invalid("bandwidth estimation needs at least 2 points"));
    }
    let rows: Vec<usize> = if n <= BANDWIDTH_EXACT_LIMIT {
        (0..n).collect()
    } else {
        let mut r = rand::seq::index::sample(&mut rng::seeded(seed), n, BANDWIDTH_EXACT_LIMIT).into_vec();
        r.sort_unstable();
        r
    };
    let mut d: Vec<f64> = rows
        .par_iter()
        .enumerate()
        .flat_map_iter(|(a, &i)| rows[a + 1..].iter().map(move |&j| (i, j)))
        .map(|(i, j)| euclidean(data.row(i), data.row(j)))
        .collect();
    d.sort_by(f64::total_cmp);
    let bw = quantile_sorted(&d, quantile);
    if bw <= 0.0 {
        return Err(Error::invalid("zero bandwidth: points are (nearly) identical"));
    }
    Ok(bw)
}

/// One ribbon between consecutive clusterings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub source: usize,
    pub target: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFlows {
    pub steps: Vec<Clustering>,
    /// Raw co-membership counts for each consecutive pair of steps.
    pub flows: Vec<Vec<Flow>>,
    pub threshold: f64,
}

impl TransitionFlows {
    /// Flows of step pair `step` that carry at least `threshold` of their
    /// source group.
    pub fn retained(&self, step: usize) -> Vec<Flow> {
        let sizes = self.steps[step].group_sizes();
        self.flows[step]
            .iter()
            .filter(|f| f.count as f64 >= self.threshold * sizes[f.source] as f64)
            .copied()
            .collect()
    }

    /// `step,source,target,count,retained` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,source,target,count,retained\n");
        for (step, flows) in self.flows.iter().enumerate() {
            let kept = self.retained(step);
            for f in flows {
                let _ = writeln!(out, "{step},{},{},{},{}", f.source, f.target, f.count, kept.contains(f) as u8);
            }
        }
        out
    }
}

/// Co-membership counts from `a` to `b`, sorted by (source, target).
pub fn flows_between(a: &Clustering, b: &Clustering) -> Result<Vec<Flow>> {
    if a.labels.len() != b.labels.len() {
        return Err(Error::shape(format!(
            "clusterings over {} and {} items",
            a.labels.len(),
            b.labels.len()
        )));
    }
    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&s, &t) in a.labels.iter().zip(&b.labels) {
        *counts.entry((s, t)).or_default() += 1;
    }
    Ok(counts
        .into_iter()
        .map(|((source, target), count)| Flow { source, target, count })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransitionOptions {
    pub steps: usize,
    pub threshold: f64,
    pub quantile: f64,
    /// Fixed bandwidth for every step; estimated per step when `None`.
    pub bandwidth: Option<f64>,
    pub seed: u64,
}

impl Default for TransitionOptions {
    fn default() -> Self {
        Self {
            steps: 9,
            threshold: 0.1,
            quantile: DEFAULT_QUANTILE,
            bandwidth: None,
            seed: 0,
        }
    }
}

/// Weights interpolated linearly from `start` to `end` in `steps` states.
/// Step `t` of the reversed path is bit-identical to step `steps − 1 − t`.
pub fn weight_path(start: &WeightVector, end: &WeightVector, steps: usize) -> Result<Vec<WeightVector>> {
    if steps < 2 {
        return Err(Error::invalid(format!("transition needs at least 2 steps, got {steps}")));
    }
    if start.len() != end.len() {
        return Err(Error::shape(format!("{} vs {} weights", start.len(), end.len())));
    }
    let last = (steps - 1) as f64;
    (0..steps)
        .map(|t| {
            let (u, v) = ((steps - 1 - t) as f64, t as f64);
            let alphas = start
                .alphas()
                .iter()
                .zip(end.alphas())
                .map(|(a, b)| (u * a + v * b) / last)
                .collect();
            WeightVector::new(alphas)
        })
        .collect()
}

/// Cluster the fused embedding of `views` under `w`.
pub fn cluster_fused(views: &[Embedding], w: &WeightVector, bandwidth: Option<f64>, quantile: f64, seed: u64) -> Result<Clustering> {
    let fused = combine(views, w)?;
    let bw = match bandwidth {
        Some(b) => b,
        None => estimate_bandwidth(&fused, quantile, seed)?,
    };
    let mut c = mean_shift(&fused, bw)?;
    c.weight_vector = Some(w.clone());
    Ok(c)
}

/// Cluster each state along the weight path and count the membership flows
/// between consecutive states.
pub fn transition_analysis(
    views: &[Embedding],
    start: &WeightVector,
    end: &WeightVector,
    opts: &TransitionOptions,
) -> Result<TransitionFlows> {
    if !(0.0..=1.0).contains(&opts.threshold) {
        return Err(Error::invalid(format!("threshold {} outside [0, 1]", opts.threshold)));
    }
    let path = weight_path(start, end, opts.steps)?;
    let steps: Vec<Clustering> = path
        .par_iter()
        .map(|w| cluster_fused(views, w, opts.bandwidth, opts.quantile, opts.seed))
        .collect::<Result<_>>()?;
    let flows = steps
        .windows(2)
        .map(|pair| flows_between(&pair[0], &pair[1]))
        .collect::<Result<_>>()?;
    Ok(TransitionFlows {
        steps,
        flows,
        threshold: opts.threshold,
    })
}

/// Binary merge tree over `n` leaves. Node ids below `n` are leaves; merge
/// `k` creates node `n + k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dendrogram {
    pub leaves: usize,
    /// `(left, right, height)`; `left` holds the smaller leaf index.
    pub merges: Vec<(usize, usize, f64)>,
}

impl Dendrogram {
    /// Leaves read depth-first, smaller-index child first.
    pub fn leaf_order(&self) -> Vec<usize> {
        if self.merges.is_empty() {
            return (0..self.leaves).collect();
        }
        let mut order = Vec::with_capacity(self.leaves);
        let mut stack = vec![self.leaves + self.merges.len() - 1];
        while let Some(id) = stack.pop() {
            if id < self.leaves {
                order.push(id);
            } else {
                let (left, right, _) = self.merges[id - self.leaves];
                stack.push(right);
                stack.push(left);
            }
        }
        order
    }

    /// Sorted leaf sets of every internal node, in merge order.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let mut members: Vec<Vec<usize>> = (0..self.leaves).map(|i| vec![i]).collect();
        for &(a, b, _) in &self.merges {
            let mut joined = [members[a].as_slice(), members[b].as_slice()].concat();
            joined.sort_unstable();
            members.push(joined);
        }
        members.split_off(self.leaves)
    }
}

/// Average-linkage agglomerative clustering. Merges pick the smallest
/// average distance, ties going to the lexicographically smallest pair of
/// cluster ids (a cluster's id is its smallest member).
pub fn linkage(d: &DistanceMatrix) -> Dendrogram {
    let n = d.size();
    if n <= 1 {
        return Dendrogram { leaves: n, merges: vec![] };
    }
    let mut dist = d.to_dense();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    // node id for the cluster currently living in each slot
    let mut node: Vec<usize> = (0..n).collect();
    let mut merges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);

    let nearest_of = |dist: &[f64], active: &[bool], i: usize| -> (usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..n {
            if j != i && active[j] && dist[i * n + j] < best.1 {
                best = (j, dist[i * n + j]);
            }
        }
        best
    };
    let mut nn: Vec<(usize, f64)> = (0..n).map(|i| nearest_of(&dist, &active, i)).collect();

    for _ in 0..n - 1 {
        let mut pick: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] {
                continue;
            }
            let (j, dij) = nn[i];
            let (a, b) = (i.min(j), i.max(j));
            let better = match pick {
                None => true,
                Some((pd, pa, pb)) => dij < pd || (dij == pd && (a, b) < (pa, pb)),
            };
            if better {
                pick = Some((dij, a, b));
            }
        }
        let (height, a, b) = pick.expect("at least two active clusters");

        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if active[k] && k != a && k != b {
                let v = (na * dist[a * n + k] + nb * dist[b * n + k]) / (na + nb);
                dist[a * n + k] = v;
                dist[k * n + a] = v;
            }
        }
        active[b] = false;
        size[a] += size[b];
        merges.push((node[a], node[b], height));
        node[a] = n + merges.len() - 1;

        for k in 0..n {
            if !active[k] {
                continue;
            }
            if k == a || nn[k].0 == a || nn[k].0 == b {
                nn[k] = nearest_of(&dist, &active, k);
            } else {
                let v = dist[k * n + a];
                if v < nn[k].1 || (v == nn[k].1 && a < nn[k].0) {
                    nn[k] = (a, v);
                }
            }
        }
    }

    Dendrogram { leaves: n, merges }
}

/// Leaf order of the average-linkage dendrogram.
pub fn linkage_order(d: &DistanceMatrix) -> Vec<usize> {
    linkage(d).leaf_order()
}

/// Heatmap payload: the leaf order and the reordered distance matrix
/// averaged down to at most `max_size × max_size` cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub order: Vec<usize>,
    pub size: usize,
    pub grid: Vec<Vec<f64>>,
}

pub fn heatmap(d: &DistanceMatrix, max_size: usize) -> Heatmap {
    let order = linkage_order(d);
    let n = order.len();
    let size = n.min(max_size.max(1));
    let bucket = |i: usize| i * size / n.max(1);
    let mut sums = vec![vec![0.0; size]; size];
    let mut counts = vec![vec![0usize; size]; size];
    for (a, &i) in order.iter().enumerate() {
        for (b, &j) in order.iter().enumerate() {
            sums[bucket(a)][bucket(b)] += d.get(i, j);
            counts[bucket(a)][bucket(b)] += 1;
        }
    }
    let grid = sums
        .into_iter()
        .zip(counts)
        .map(|(row, cnt)| row.into_iter().zip(cnt).map(|(s, c)| if c > 0 { s / c as f64 } else { 0.0 }).collect())
        .collect();
    Heatmap { order, size, grid }
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same items");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |c: u64| (c * c.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&c| pairs(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| pairs(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
