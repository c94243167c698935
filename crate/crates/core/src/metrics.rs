//! Evaluation: the nearest-neighbor measure, λ sweeps over the mapping
//! trade-off, and the fusion benchmark against the two baselines.

use std::fmt::Write as _;

use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{baseline_concat, combine, WeightVector};
use crate::ingest::Dataset;
use crate::mapping::{self, Embedding, MappedSample, MappingOptions};
use crate::matrix::{euclidean, FeatureMatrix, Rows};
use crate::projection::project_all;
use crate::rng;
use crate::sampling::SampleSet;

/// Distance from every row of `full` to its nearest row of `sample`.
pub fn nearest_sample_distances(full: &impl Rows, sample: &impl Rows) -> Result<Vec<f64>> {
    if sample.n_rows() == 0 {
        return Err(Error::invalid("nnm needs a non-empty sample"));
    }
    if full.n_cols() != sample.n_cols() {
        return Err(Error::shape(format!(
            "instances have {} dims, sample {}",
            full.n_cols(),
            sample.n_cols()
        )));
    }
    Ok((0..full.n_rows())
        .map(|i| {
            (0..sample.n_rows())
                .map(|k| euclidean(full.row(i), sample.row(k)))
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// `1 − mean_i D_i` with `D_i` the nearest-sample distance of instance `i`.
/// Inputs are expected to be unit-normalized per row; the raw value is
/// returned without clamping.
pub fn nnm(full: &impl Rows, sample: &impl Rows) -> Result<f64> {
    let d = nearest_sample_distances(full, sample)?;
    if d.is_empty() {
        return Err(Error::invalid("nnm needs at least one instance"));
    }
    Ok(1.0 - d.iter().sum::<f64>() / d.len() as f64)
}

/// Per-instance unit normalization of any row set.
pub fn unit_rows(data: &impl Rows, name: &str) -> Result<FeatureMatrix> {
    let values: Vec<f64> = (0..data.n_rows()).flat_map(|i| data.row(i).to_vec()).collect();
    FeatureMatrix::new(name, data.n_rows(), data.n_cols(), values)?.normalize_unit(None)
}

/// Uniform draw from the probability simplex (symmetric Dirichlet(1)).
pub fn random_simplex(p: usize, rng: &mut rng::Rng) -> WeightVector {
    let raw: Vec<f64> = (0..p).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = raw.iter().sum();
    let mut alphas: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // push rounding drift into the largest entry so the sum is 1 to within an ulp
    let drift = 1.0 - alphas.iter().sum::<f64>();
    let top = (0..p).max_by(|&a, &b| alphas[a].total_cmp(&alphas[b])).unwrap_or(0);
    alphas[top] += drift;
    WeightVector::new(alphas).expect("normalized exponential draws lie on the simplex")
}

/// Linear-interpolation quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty set");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            q25: quantile_sorted(&v, 0.25),
            median: quantile_sorted(&v, 0.5),
            q75: quantile_sorted(&v, 0.75),
        }
    }
}

/// Final energies at one λ, pooled over repeats and feature sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub runs: usize,
    pub stress: Summary,
    pub alignment: Summary,
}

/// Run `map_all` for every λ in `grid` and every repeat. Repeat `r` uses the
/// seed `derive(seed, r)` at every λ, so columns are comparable across λ.
pub fn lambda_sweep(
    sample: &SampleSet,
    base: &MappingOptions,
    grid: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if repeats == 0 {
        return Err(Error::invalid("lambda sweep needs at least one repeat"));
    }
    if let Some(bad) = grid.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("lambda {bad} outside [0, 1]")));
    }
    let jobs: Vec<(usize, usize)> = (0..grid.len()).flat_map(|g| (0..repeats).map(move |r| (g, r))).collect();
    let results: Vec<Vec<mapping::FeatureEnergies>> = jobs
        .par_iter()
        .map(|&(g, r)| {
            let opts = MappingOptions {
                lambda: grid[g],
                seed: rng::derive(seed, r as u64),
                ..*base
            };
            let mapped = mapping::map_all(sample, &opts)?;
            mapping::energies(sample, &mapped)
        })
        .collect::<Result<_>>()?;

    Ok(grid
        .iter()
        .enumerate()
        .map(|(g, &lambda)| {
            let energies: Vec<&mapping::FeatureEnergies> = jobs
                .iter()
                .zip(&results)
                .filter(|((jg, _), _)| *jg == g)
                .flat_map(|(_, e)| e.iter())
                .collect();
            let st: Vec<f64> = energies.iter().map(|e| e.stress).collect();
            let al: Vec<f64> = energies.iter().map(|e| e.alignment).collect();
            SweepRow {
                lambda,
                runs: repeats,
                stress: Summary::of(&st),
                alignment: Summary::of(&al),
            }
        })
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(
        "lambda,runs,stress_mean,stress_q25,stress_median,stress_q75,alignment_mean,alignment_q25,alignment_median,alignment_q75\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.lambda,
            r.runs,
            r.stress.mean,
            r.stress.q25,
            r.stress.median,
            r.stress.q75,
            r.alignment.mean,
            r.alignment.q25,
            r.alignment.median,
            r.alignment.q75
        );
    }
    out
}

/// Project every full feature set through its sample and aligned embedding.
pub fn project_dataset(dataset: &Dataset, sample: &SampleSet, mapped: &MappedSample) -> Result<Vec<Embedding>> {
    dataset
        .feature_sets
        .iter()
        .zip(&sample.per_feature_samples)
        .zip(&mapped.aligned)
        .map(|((f, s), r)| project_all(f, s, r))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub draw: usize,
    pub alphas: Vec<f64>,
    pub ours: f64,
    pub concat: f64,
    pub distance_fusion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub rows: Vec<BenchmarkRow>,
    pub mean_ours: f64,
    pub mean_concat: f64,
    pub mean_distance_fusion: f64,
}

impl BenchmarkReport {
    /// One row per draw, then a `mean` row. The distance-fusion column uses
    /// nearest-sample distances read from the fused distance matrix.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("draw,alphas,nnm_ours,nnm_concat,nnm_distance_fusion\n");
        for r in &self.rows {
            let alphas: Vec<String> = r.alphas.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{},{},{},{},{}", r.draw, alphas.join(";"), r.ours, r.concat, r.distance_fusion);
        }
        let _ = writeln!(
            out,
            "mean,,{},{},{}",
            self.mean_ours, self.mean_concat, self.mean_distance_fusion
        );
        out
    }
}

/// NNM of the three fusion strategies for one weight vector.
///
/// * ours: full fused embedding `Σ α_i V_i` against the fused sample
///   `Σ α_i R_i`, both unit-normalized per row;
/// * concat: `[α_i F_i]` against its own sample rows, unit-normalized;
/// * distance fusion: `D_i = min_k Σ α_l ‖F_l(i) − S_l(k)‖`.
pub fn nnm_triplet(
    dataset: &Dataset,
    sample: &SampleSet,
    mapped: &MappedSample,
    full: &[Embedding],
    w: &WeightVector,
) -> Result<(f64, f64, f64)> {
    let fused_full = unit_rows(&combine(full, w)?, "fused")?;
    let fused_sample = unit_rows(&combine(&mapped.aligned, w)?, "fused_sample")?;
    let ours = nnm(&fused_full, &fused_sample)?;

    let concat = unit_rows(&baseline_concat(&dataset.feature_sets, w)?, "concat")?;
    let concat_sample = concat.select_rows(&sample.indices)?;
    let concat_nnm = nnm(&concat, &concat_sample)?;

    let mut total = 0.0;
    for i in 0..dataset.n() {
        let mut best = f64::INFINITY;
        for k in 0..sample.len() {
            let d: f64 = dataset
                .feature_sets
                .iter()
                .zip(&sample.per_feature_samples)
                .zip(w.alphas())
                .map(|((f, s), a)| a * euclidean(f.row(i), s.row(k)))
                .sum();
            best = best.min(d);
        }
        total += best;
    }
    let distance_nnm = 1.0 - total / dataset.n() as f64;
    Ok((ours, concat_nnm, distance_nnm))
}

/// Mean NNM of ours and both baselines over `draws` Dirichlet(1) weights.
pub fn fusion_benchmark(
    dataset: &Dataset,
    sample: &SampleSet,
    mapped: &MappedSample,
    full: &[Embedding],
    draws: usize,
    seed: u64,
) -> Result<BenchmarkReport> {
    if draws == 0 {
        return Err(Error::invalid("benchmark needs at least one weight draw"));
    }
    if full.len() != dataset.p() || mapped.aligned.len() != dataset.p() {
        return Err(Error::shape("benchmark inputs do not cover every feature set"));
    }
    let mut rng = rng::seeded(seed);
    let weights: Vec<WeightVector> = (0..draws).map(|_| random_simplex(dataset.p(), &mut rng)).collect();
    let rows: Vec<BenchmarkRow> = weights
        .par_iter()
        .enumerate()
        .map(|(draw, w)| {
            let (ours, concat, distance_fusion) = nnm_triplet(dataset, sample, mapped, full, w)?;
            Ok(BenchmarkRow {
                draw,
                alphas: w.alphas().to_vec(),
                ours,
                concat,
                distance_fusion,
            })
        })
        .collect::<Result<_>>()?;
    let mean = |f: fn(&BenchmarkRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(BenchmarkReport {
        mean_ours: mean(|r| r.ours),
        mean_concat: mean(|r| r.concat),
        mean_distance_fusion: mean(|r| r.distance_fusion),
        rows,
    })
}
