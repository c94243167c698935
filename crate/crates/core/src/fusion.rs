//! Convex combination of aligned embeddings, the dial that steers the
//! weights, and the two classical baselines (weighted concatenation and
//! weighted distance fusion).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::{DistanceMatrix, Embedding};
use crate::matrix::{FeatureMatrix, Rows};

pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector {
    alphas: Vec<f64>,
}

impl WeightVector {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::invalid("weight vector must not be empty"));
        }
        if alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::invalid(format!("weights must be finite and >= 0: {alphas:?}")));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::invalid(format!("weights sum to {sum}, expected 1")));
        }
        Ok(Self { alphas })
    }

    pub fn uniform(p: usize) -> Self {
        Self {
            alphas: vec![1.0 / p as f64; p],
        }
    }

    /// All mass on feature `i`.
    pub fn vertex(p: usize, i: usize) -> Self {
        let mut alphas = vec![0.0; p];
        alphas[i] = 1.0;
        Self { alphas }
    }

    /// `(1 − t)·a + t·b`.
    pub fn lerp(a: &WeightVector, b: &WeightVector, t: f64) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::shape(format!("{} vs {} weights", a.len(), b.len())));
        }
        let alphas = a.alphas.iter().zip(&b.alphas).map(|(x, y)| (1.0 - t) * x + t * y).collect();
        Ok(Self { alphas })
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.alphas
    }
}

/// Anchors on the unit circle plus a dial inside the disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialState {
    pub anchors: Vec<[f64; 2]>,
    pub dial: [f64; 2],
}

const CIRCLE_TOLERANCE: f64 = 1e-6;

fn planar_norm(p: [f64; 2]) -> f64 {
    p[0].hypot(p[1])
}

fn planar_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl DialState {
    pub fn new(anchors: Vec<[f64; 2]>, dial: [f64; 2]) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::invalid("dial needs at least one anchor"));
        }
        for (i, a) in anchors.iter().enumerate() {
            if !(a[0].is_finite() && a[1].is_finite()) || (planar_norm(*a) - 1.0).abs() > CIRCLE_TOLERANCE {
                return Err(Error::invalid(format!("anchor {i} {a:?} is not on the unit circle")));
            }
            if anchors[..i].iter().any(|b| planar_distance(*a, *b) == 0.0) {
                return Err(Error::invalid(format!("anchor {i} duplicates an earlier anchor")));
            }
        }
        if !(dial[0].is_finite() && dial[1].is_finite()) || planar_norm(dial) > 1.0 + CIRCLE_TOLERANCE {
            return Err(Error::invalid(format!("dial {dial:?} lies outside the unit disk")));
        }
        Ok(Self { anchors, dial })
    }

    /// `p` anchors equally spaced counter-clockwise from 90°.
    pub fn default_anchors(p: usize) -> Vec<[f64; 2]> {
        (0..p)
            .map(|i| {
                let angle = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / p as f64;
                [angle.cos(), angle.sin()]
            })
            .collect()
    }

    pub fn with_default_anchors(p: usize, dial: [f64; 2]) -> Result<Self> {
        Self::new(Self::default_anchors(p), dial)
    }

    pub fn nearest_anchor(&self) -> usize {
        let mut best = 0;
        for i in 1..self.anchors.len() {
            if planar_distance(self.anchors[i], self.dial) < planar_distance(self.anchors[best], self.dial) {
                best = i;
            }
        }
        best
    }
}

/// `α_i ∝ 1/(1 + ‖anchor_i − dial‖)²`, normalized to sum to one.
///
/// Evaluated as `(x_max/x_i)² / Σ_j (x_max/x_j)²` with `x = 1 + distance`,
/// which keeps every term `≥ 1`.
pub fn dial_weights(d: &DialState) -> WeightVector {
    let spread: Vec<f64> = d.anchors.iter().map(|a| 1.0 + planar_distance(*a, d.dial)).collect();
    let widest = spread.iter().copied().fold(1.0, f64::max);
    let raw: Vec<f64> = spread.iter().map(|x| (widest / x).powi(2)).collect();
    let total: f64 = raw.iter().sum();
    WeightVector {
        alphas: raw.into_iter().map(|r| r / total).collect(),
    }
}

fn check_weights(p: usize, w: &WeightVector) -> Result<()> {
    if p == 0 {
        return Err(Error::invalid("nothing to combine"));
    }
    if w.len() != p {
        return Err(Error::shape(format!("{} weights for {p} inputs", w.len())));
    }
    Ok(())
}

/// Row-wise `Σ α_i E_i`.
pub fn combine(embeddings: &[Embedding], w: &WeightVector) -> Result<Embedding> {
    let refs: Vec<&Embedding> = embeddings.iter().collect();
    combine_refs(&refs, w)
}

pub fn combine_refs(embeddings: &[&Embedding], w: &WeightVector) -> Result<Embedding> {
    check_weights(embeddings.len(), w)?;
    let first = embeddings[0];
    if let Some(bad) = embeddings.iter().find(|e| e.rows() != first.rows() || e.m() != first.m()) {
        return Err(Error::shape(format!(
            "embedding {} x {} does not match {} x {}",
            bad.rows(),
            bad.m(),
            first.rows(),
            first.m()
        )));
    }
    let mut coords = vec![0.0; first.coords().len()];
    for (e, &a) in embeddings.iter().zip(w.alphas()) {
        if a == 0.0 {
            continue;
        }
        for (c, v) in coords.iter_mut().zip(e.coords()) {
            *c += a * v;
        }
    }
    let mut out = Embedding::new("fused", first.rows(), first.m(), coords)?;
    out.lambda_used = first.lambda_used;
    out.seed = first.seed;
    Ok(out)
}

/// `[α_1 F_1, …, α_p F_p]`.
pub fn baseline_concat(features: &[FeatureMatrix], w: &WeightVector) -> Result<FeatureMatrix> {
    check_weights(features.len(), w)?;
    let n = features[0].rows();
    if let Some(bad) = features.iter().find(|f| f.rows() != n) {
        return Err(Error::RowCountMismatch {
            name: bad.name.clone(),
            expected: n,
            found: bad.rows(),
        });
    }
    let dims: usize = features.iter().map(FeatureMatrix::dims).sum();
    let mut values = Vec::with_capacity(n * dims);
    for i in 0..n {
        for (f, &a) in features.iter().zip(w.alphas()) {
            values.extend(f.row(i).iter().map(|v| a * v));
        }
    }
    FeatureMatrix::new("concat", n, dims, values)
}

/// `Σ α_i Δ(F_i)`.
pub fn baseline_distance_fusion(deltas: &[DistanceMatrix], w: &WeightVector) -> Result<DistanceMatrix> {
    check_weights(deltas.len(), w)?;
    let refs: Vec<&DistanceMatrix> = deltas.iter().collect();
    DistanceMatrix::weighted_sum(&refs, w.alphas())
}
