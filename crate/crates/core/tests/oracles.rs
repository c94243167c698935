//! Library results checked against naive reference implementations.

use fusionforge_core::analysis::{adjusted_rand_index, estimate_bandwidth, linkage_order};
use fusionforge_core::fusion::{baseline_concat, baseline_distance_fusion, combine};
use fusionforge_core::mapping::{alignment_error, average_distance_matrix, distance_matrix, stress};
use fusionforge_core::metrics::{nearest_sample_distances, nnm, random_simplex};
use fusionforge_core::rng::{self, Rng};
use fusionforge_core::sampling::kmeans;
use fusionforge_core::{DistanceMatrix, Embedding, FeatureMatrix, Rows, WeightVector};
use rand::Rng as _;

fn random_matrix(name: &str, rows: usize, cols: usize, rng: &mut Rng) -> FeatureMatrix {
    let values = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    FeatureMatrix::new(name, rows, cols, values).unwrap()
}

fn random_embedding(rows: usize, m: usize, rng: &mut Rng) -> Embedding {
    Embedding::from_feature_matrix(&random_matrix("e", rows, m, rng)).unwrap()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s.sqrt()
}

#[test]
fn kmeans_matches_exhaustive_two_partition() {
    let mut rng = rng::seeded(41);
    for trial in 0..20 {
        let left = rng.random_range(1..5);
        let right = rng.random_range(1..5);
        let mut rows = Vec::new();
        for _ in 0..left {
            rows.push(vec![rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]);
        }
        for _ in 0..right {
            rows.push(vec![10.0 + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)]);
        }
        let f = FeatureMatrix::from_rows("k", &rows).unwrap();
        let n = rows.len();

        let sse = |mask: u32| -> f64 {
            let mut total = 0.0;
            for side in [0, 1] {
                let members: Vec<usize> = (0..n).filter(|&i| ((mask >> i) & 1) as usize == side).collect();
                if members.is_empty() {
                    return f64::INFINITY;
                }
                let mut c = [0.0; 2];
                for &i in &members {
                    c[0] += rows[i][0] / members.len() as f64;
                    c[1] += rows[i][1] / members.len() as f64;
                }
                total += members.iter().map(|&i| dist(&rows[i], &c).powi(2)).sum::<f64>();
            }
            total
        };
        let best = (1..(1u32 << n) - 1).min_by(|&a, &b| sse(a).total_cmp(&sse(b))).unwrap();
        let mut expected: Vec<Vec<usize>> = vec![
            (0..n).filter(|&i| (best >> i) & 1 == 0).collect(),
            (0..n).filter(|&i| (best >> i) & 1 == 1).collect(),
        ];
        expected.sort();

        let mut got = kmeans(&f, 2, trial).unwrap();
        got.iter_mut().for_each(|c| c.sort_unstable());
        got.sort();
        assert_eq!(got, expected, "trial {trial}");
    }
}

#[test]
fn distance_matrix_matches_double_loop() {
    let mut rng = rng::seeded(2);
    let f = random_matrix("d", 12, 5, &mut rng).normalize_unit(None).unwrap();
    let d = distance_matrix(&f);
    for i in 0..12 {
        for j in 0..12 {
            assert_eq!(d.get(i, j), if i == j { 0.0 } else { dist(f.row(i), f.row(j)) });
        }
    }
}

#[test]
fn average_distance_matrix_matches_entrywise_mean() {
    let mut rng = rng::seeded(3);
    let mats: Vec<DistanceMatrix> = (0..3).map(|_| distance_matrix(&random_matrix("a", 7, 3, &mut rng))).collect();
    let avg = average_distance_matrix(&mats).unwrap();
    for i in 0..7 {
        for j in 0..7 {
            let mean = (mats[0].get(i, j) + mats[1].get(i, j) + mats[2].get(i, j)) / 3.0;
            assert!((avg.get(i, j) - mean).abs() < 1e-15);
        }
    }
}

#[test]
fn stress_matches_double_loop() {
    let mut rng = rng::seeded(4);
    for _ in 0..10 {
        let f = random_matrix("s", 5, 4, &mut rng);
        let r = random_embedding(5, 2, &mut rng);
        let mut total = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                total += (dist(f.row(i), f.row(j)) - dist(r.row(i), r.row(j))).powi(2);
            }
        }
        let expected = total / 25.0;
        let got = stress(&distance_matrix(&f), &r).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }
}

#[test]
fn alignment_matches_double_loop() {
    let mut rng = rng::seeded(5);
    for _ in 0..10 {
        let reference = random_embedding(6, 3, &mut rng);
        let r = random_embedding(6, 3, &mut rng);
        let mut total = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                total += (dist(reference.row(i), reference.row(j)) - dist(reference.row(i), r.row(j))).powi(2);
            }
        }
        let expected = total / 36.0;
        let got = alignment_error(&reference, &r).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected.max(1.0), "{got} vs {expected}");
    }
}

fn nnm_oracle(full: &FeatureMatrix, sample: &FeatureMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..full.rows() {
        let mut best = f64::INFINITY;
        for k in 0..sample.rows() {
            best = best.min(dist(full.row(i), sample.row(k)));
        }
        total += best;
    }
    1.0 - total / full.rows() as f64
}

#[test]
fn nnm_matches_nearest_neighbor_loop() {
    let mut rng = rng::seeded(6);
    for _ in 0..50 {
        let n = rng.random_range(2..40);
        let s = rng.random_range(1..=n);
        let dims = rng.random_range(1..6);
        let full = random_matrix("f", n, dims, &mut rng).normalize_unit(None).unwrap();
        let sample = random_matrix("s", s, dims, &mut rng).normalize_unit(None).unwrap();
        let got = nnm(&full, &sample).unwrap();
        assert!((got - nnm_oracle(&full, &sample)).abs() < 1e-12);
        let per_item = nearest_sample_distances(&full, &sample).unwrap();
        assert_eq!(per_item.len(), n);
    }
}

#[test]
fn nnm_of_sample_itself_is_one() {
    let mut rng = rng::seeded(7);
    let full = random_matrix("f", 30, 4, &mut rng).normalize_unit(None).unwrap();
    assert_eq!(nnm(&full, &full).unwrap(), 1.0);
}

#[test]
fn combine_matches_entrywise_sum() {
    let mut rng = rng::seeded(8);
    let embs: Vec<Embedding> = (0..3).map(|_| random_embedding(9, 2, &mut rng)).collect();
    let w = random_simplex(3, &mut rng);
    let fused = combine(&embs, &w).unwrap();
    for i in 0..9 {
        for d in 0..2 {
            let expected: f64 = (0..3).map(|k| w.alphas()[k] * embs[k].row(i)[d]).sum();
            assert!((fused.row(i)[d] - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn concat_matches_scale_then_concat() {
    let mut rng = rng::seeded(9);
    let feats = [random_matrix("a", 6, 2, &mut rng), random_matrix("b", 6, 3, &mut rng)];
    let w = WeightVector::new(vec![0.3, 0.7]).unwrap();
    let c = baseline_concat(&feats, &w).unwrap();
    assert_eq!(c.dims(), 5);
    for i in 0..6 {
        let mut expected: Vec<f64> = feats[0].row(i).iter().map(|x| 0.3 * x).collect();
        expected.extend(feats[1].row(i).iter().map(|x| 0.7 * x));
        assert_eq!(c.row(i), expected.as_slice());
    }
}

#[test]
fn distance_fusion_matches_entrywise_sum() {
    let mut rng = rng::seeded(10);
    let deltas: Vec<DistanceMatrix> = (0..3).map(|_| distance_matrix(&random_matrix("x", 8, 3, &mut rng))).collect();
    let w = random_simplex(3, &mut rng);
    let fused = baseline_distance_fusion(&deltas, &w).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let expected: f64 = (0..3).map(|k| w.alphas()[k] * deltas[k].get(i, j)).sum();
            assert!((fused.get(i, j) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn bandwidth_is_median_on_square_grid() {
    let mut rows = Vec::new();
    for x in 0..6 {
        for y in 0..6 {
            rows.push(vec![x as f64 / 5.0, y as f64 / 5.0]);
        }
    }
    let f = FeatureMatrix::from_rows("grid", &rows).unwrap();
    let mut all = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            all.push(dist(&rows[i], &rows[j]));
        }
    }
    all.sort_by(f64::total_cmp);
    let mid = (all.len() - 1) as f64 * 0.5;
    let (lo, hi) = (mid.floor() as usize, mid.ceil() as usize);
    let expected = all[lo] + (all[hi] - all[lo]) * (mid - lo as f64);
    assert!((estimate_bandwidth(&f, 0.5, 0).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn linkage_keeps_tight_pairs_adjacent() {
    // a=0 and b=2 are close, c=1 and d=3 are close, the pairs are far apart
    let f = FeatureMatrix::from_rows("p", &[vec![0.0], vec![10.0], vec![0.1], vec![10.2]]).unwrap();
    let order = linkage_order(&distance_matrix(&f));
    let pos = |x: usize| order.iter().position(|&o| o == x).unwrap();
    assert_eq!(pos(0).abs_diff(pos(2)), 1);
    assert_eq!(pos(1).abs_diff(pos(3)), 1);
    assert_eq!(order, vec![0, 2, 1, 3]);
}

fn brute_average_linkage(d: &DistanceMatrix) -> Vec<Vec<usize>> {
    // returns the sequence of merged clusters (as sorted member lists)
    let n = d.size();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut merges = Vec::new();
    while clusters.len() > 1 {
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += d.get(i, j);
                    }
                }
                let avg = s / (clusters[a].len() * clusters[b].len()) as f64;
                if avg < best.0 - 1e-12 {
                    best = (avg, a, b);
                }
            }
        }
        let b = clusters.remove(best.2);
        clusters[best.1].extend(b);
        clusters[best.1].sort_unstable();
        merges.push(clusters[best.1].clone());
    }
    merges
}

#[test]
fn linkage_merge_structure_matches_brute_force() {
    let mut rng = rng::seeded(12);
    for _ in 0..20 {
        let n = rng.random_range(2..12);
        let f = random_matrix("l", n, 2, &mut rng);
        let d = distance_matrix(&f);
        let order = linkage_order(&d);
        // every merged cluster of the brute-force dendrogram is contiguous in the leaf order
        for members in brute_average_linkage(&d) {
            let mut pos: Vec<usize> = members.iter().map(|&x| order.iter().position(|&o| o == x).unwrap()).collect();
            pos.sort_unstable();
            assert_eq!(pos.last().unwrap() - pos[0] + 1, pos.len(), "cluster {members:?} split in {order:?}");
        }
    }
}

#[test]
fn ari_matches_pair_counting() {
    let mut rng = rng::seeded(13);
    for _ in 0..20 {
        let n = rng.random_range(4..30);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let (mut same_both, mut same_a, mut same_b) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in i + 1..n {
                let (x, y) = (a[i] == a[j], b[i] == b[j]);
                same_both += (x && y) as u8 as f64;
                same_a += x as u8 as f64;
                same_b += y as u8 as f64;
            }
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let expected_index = same_a * same_b / pairs;
        let max_index = 0.5 * (same_a + same_b);
        if max_index == expected_index {
            continue;
        }
        let expected = (same_both - expected_index) / (max_index - expected_index);
        assert!((adjusted_rand_index(&a, &b) - expected).abs() < 1e-12);
    }
}
