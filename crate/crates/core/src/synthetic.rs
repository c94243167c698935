//! Seeded synthetic datasets with known structure, used by tests, benchmarks
//! and the CLI `demo` data.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::ingest::Dataset;
use crate::mapping::Embedding;
use crate::matrix::FeatureMatrix;
use crate::rng::{self, Rng};

fn gaussian(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn item_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("item{i:05}")).collect()
}

/// A `rows × cols` matrix with orthonormal columns (`rows ≥ cols`).
pub fn random_orthonormal(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| gaussian(rng));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..cols {
        if r[(c, c)] < 0.0 {
            q.column_mut(c).neg_mut();
        }
    }
    q
}

/// Several views of one smooth 2-D latent manifold. View `v` lifts the
/// latent coordinates through its own random frequencies into
/// `8 + 2v` dimensions of sinusoids, adds Gaussian noise of scale `noise`,
/// and is unit-normalized.
pub fn latent_views(n: usize, views: usize, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = rng::seeded(seed);
    let latent: Vec<[f64; 2]> = (0..n).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut sets = Vec::with_capacity(views);
    for v in 0..views {
        let pairs = 4 + v;
        let freq: Vec<[f64; 3]> = (0..pairs)
            .map(|_| [1.5 * gaussian(&mut rng), 1.5 * gaussian(&mut rng), rng.random_range(0.0..std::f64::consts::TAU)])
            .collect();
        let mut values = Vec::with_capacity(n * 2 * pairs);
        for t in &latent {
            for f in &freq {
                let phase = f[0] * t[0] + f[1] * t[1] + f[2];
                values.push(phase.sin() + noise * gaussian(&mut rng));
                values.push(phase.cos() + noise * gaussian(&mut rng));
            }
        }
        let ids = item_ids(n);
        let fm = FeatureMatrix::new(format!("view{v}"), n, 2 * pairs, values)?;
        sets.push(fm.normalize_unit(Some(&ids))?);
    }
    Dataset::new("latent", item_ids(n), sets, None, None)
}

/// Two views with independent ground-truth partitions into `groups`
/// classes each. View A clusters by attribute A, view B by attribute B.
pub struct OrthogonalPartitions {
    pub dataset: Dataset,
    pub attribute_a: Vec<usize>,
    pub attribute_b: Vec<usize>,
}

pub fn orthogonal_partitions(n: usize, groups: usize, noise: f64, seed: u64) -> Result<OrthogonalPartitions> {
    let mut rng = rng::seeded(seed);
    let attribute_a: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
    let attribute_b: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
    let dims = groups + 4;
    let make = |name: &str, attr: &[usize], rng: &mut Rng| -> Result<FeatureMatrix> {
        let centers = random_orthonormal(dims, groups, rng);
        let mut values = Vec::with_capacity(n * dims);
        for &g in attr {
            for d in 0..dims {
                values.push(centers[(d, g)] + noise * gaussian(rng));
            }
        }
        FeatureMatrix::new(name, n, dims, values)?.normalize_unit(None)
    };
    let a = make("view_a", &attribute_a, &mut rng)?;
    let b = make("view_b", &attribute_b, &mut rng)?;
    let labels = attribute_a.iter().zip(&attribute_b).map(|(x, y)| format!("a{x}-b{y}")).collect();
    Ok(OrthogonalPartitions {
        dataset: Dataset::new("partitions", item_ids(n), vec![a, b], Some(labels), None)?,
        attribute_a,
        attribute_b,
    })
}

/// Points in `[-1, 1]^dims` together with their image under a random rigid
/// motion `x ↦ x Q + t`.
pub struct RigidMotion {
    pub features: FeatureMatrix,
    pub image: Embedding,
    pub rotation: DMatrix<f64>,
    pub translation: Vec<f64>,
}

pub fn rigid_motion(n: usize, dims: usize, seed: u64) -> Result<RigidMotion> {
    let mut rng = rng::seeded(seed);
    let values: Vec<f64> = (0..n * dims).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rotation = random_orthonormal(dims, dims, &mut rng);
    let translation: Vec<f64> = (0..dims).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut coords = Vec::with_capacity(n * dims);
    for row in values.chunks(dims) {
        for b in 0..dims {
            let v: f64 = (0..dims).map(|a| row[a] * rotation[(a, b)]).sum();
            coords.push(v + translation[b]);
        }
    }
    Ok(RigidMotion {
        features: FeatureMatrix::new("rigid", n, dims, values)?,
        image: Embedding::new("rigid", n, dims, coords)?,
        rotation,
        translation,
    })
}

/// Isotropic Gaussian blobs, `per_blob` points around each center.
pub fn gaussian_blobs(centers: &[Vec<f64>], per_blob: usize, sigma: f64, seed: u64) -> Result<(FeatureMatrix, Vec<usize>)> {
    let mut rng = rng::seeded(seed);
    let dims = centers.first().map_or(0, Vec::len);
    let mut values = Vec::with_capacity(centers.len() * per_blob * dims);
    let mut labels = Vec::with_capacity(centers.len() * per_blob);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            values.extend(center.iter().map(|x| x + sigma * gaussian(&mut rng)));
            labels.push(c);
        }
    }
    Ok((FeatureMatrix::new("blobs", labels.len(), dims, values)?, labels))
}

fn embed(name: &str, local: &[Vec<f64>], ambient: usize, rng: &mut Rng) -> Result<FeatureMatrix> {
    let k = local.first().map_or(0, Vec::len);
    let frame = random_orthonormal(ambient, k, rng);
    let mut values = Vec::with_capacity(local.len() * ambient);
    for p in local {
        for a in 0..ambient {
            values.push((0..k).map(|j| p[j] * frame[(a, j)]).sum());
        }
    }
    FeatureMatrix::new(name, local.len(), ambient, values)
}

/// Uniform points on a unit segment, isometrically placed in `ambient` dims.
pub fn line_in(n: usize, ambient: usize, seed: u64) -> Result<FeatureMatrix> {
    let mut rng = rng::seeded(seed);
    let local: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
    embed("line", &local, ambient, &mut rng)
}

/// Uniform points in a unit disk, isometrically placed in `ambient` dims.
pub fn disk_in(n: usize, ambient: usize, seed: u64) -> Result<FeatureMatrix> {
    let mut rng = rng::seeded(seed);
    let local: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let r = rng.random::<f64>().sqrt();
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            vec![r * t.cos(), r * t.sin()]
        })
        .collect();
    embed("disk", &local, ambient, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Rows;

    #[test]
    fn orthonormal_columns() {
        let q = random_orthonormal(6, 3, &mut rng::seeded(1));
        let g = q.transpose() * &q;
        assert!((g - DMatrix::identity(3, 3)).abs().max() < 1e-12);
    }

    #[test]
    fn generators_are_seeded() {
        let a = latent_views(50, 2, 0.01, 3).unwrap();
        let b = latent_views(50, 2, 0.01, 3).unwrap();
        assert_eq!(a.feature_sets, b.feature_sets);
        assert!(a.is_normalized());
        let p = orthogonal_partitions(40, 3, 0.05, 9).unwrap();
        assert_eq!(p.dataset.p(), 2);
        assert!(p.attribute_a.iter().all(|&g| g < 3));
    }

    #[test]
    fn rigid_motion_preserves_distances() {
        let r = rigid_motion(20, 2, 4).unwrap();
        let d0 = crate::matrix::euclidean(r.features.row(0), r.features.row(1));
        let d1 = crate::matrix::euclidean(r.image.row(0), r.image.row(1));
        assert!((d0 - d1).abs() < 1e-12);
    }
}
