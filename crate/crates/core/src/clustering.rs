//! k-means over discriminator features and label matching across rounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModeAssignment;
use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAX_ITER: usize = 300;
pub const TOLERANCE: f64 = 1e-6;

/// Result of one clustering round over the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringState {
    pub k: usize,
    /// `k x feature_dim`
    pub centroids: Mat,
    /// Cluster id of every training sample, in dataset order.
    pub cluster_ids: Vec<usize>,
    pub round: usize,
    pub seed: u64,
}

impl ClusteringState {
    pub fn assignment(&self, i: usize) -> ModeAssignment {
        ModeAssignment::new(self.cluster_ids[i], self.k, self.round).expect("cluster id < k")
    }

    pub fn assignments(&self) -> Vec<ModeAssignment> {
        (0..self.cluster_ids.len()).map(|i| self.assignment(i)).collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.k];
        for &id in &self.cluster_ids {
            c[id] += 1;
        }
        c
    }

    /// Nearest-centroid ids for new feature rows.
    pub fn assign(&self, features: &Mat) -> Result<Vec<usize>> {
        if features.rows > 0 && features.cols != self.centroids.cols {
            return Err(Error::Shape(format!(
                "features have {} columns, centroids {}",
                features.cols, self.centroids.cols
            )));
        }
        Ok(assign_nearest(&self.centroids, features))
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.rows != self.k || !self.centroids.is_finite() {
            return Err(Error::Data("clustering centroids malformed or non-finite".into()));
        }
        if let Some(&bad) = self.cluster_ids.iter().find(|&&c| c >= self.k) {
            return Err(Error::Data(format!("cluster id {bad} out of range for k={}", self.k)));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest centroid per row; ties go to the lower index.
pub fn assign_nearest(centroids: &Mat, features: &Mat) -> Vec<usize> {
    (0..features.rows)
        .map(|r| {
            let x = features.row(r);
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.rows {
                let d = sq_dist(x, centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn kmeans_pp(features: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let n = features.rows;
    let mut centroids = Mat::zeros(k, features.cols);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(features.row(i), centroids.row(0))).collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if d > 0.0 && acc > target {
                    pick = Some(i);
                    break;
                }
            }
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every remaining point coincides with a centroid
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(i), centroids.row(c)));
        }
    }
    centroids
}

/// k-means++ seeding followed by Lloyd iterations until no centroid moves
/// more than [`TOLERANCE`] or [`MAX_ITER`] iterations pass.
pub fn kmeans(features: &Mat, k: usize, seed: u64) -> Result<(Mat, Vec<usize>)> {
    let n = features.rows;
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("cannot form {k} clusters from {n} samples")));
    }
    if !features.is_finite() {
        return Err(Error::InvalidInput("non-finite feature values".into()));
    }
    let dim = features.cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(features, k, &mut rng);
    let mut labels = assign_nearest(&centroids, features);
    for _ in 0..MAX_ITER {
        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut moved: f64 = 0.0;
        let mut next = centroids.clone();
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed an empty cluster at the point worst served by its centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(features.row(a), centroids.row(labels[a]));
                        let db = sq_dist(features.row(b), centroids.row(labels[b]));
                        da.total_cmp(&db).then(b.cmp(&a))
                    })
                    .unwrap();
                next.row_mut(c).copy_from_slice(features.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (o, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s * inv;
                }
            }
            moved = moved.max(sq_dist(next.row(c), centroids.row(c)).sqrt());
        }
        centroids = next;
        let new_labels = assign_nearest(&centroids, features);
        let unchanged = new_labels == labels;
        labels = new_labels;
        if moved <= TOLERANCE && unchanged {
            break;
        }
    }
    Ok((centroids, labels))
}

pub fn cluster_features(features: &Mat, k: usize, seed: u64) -> Result<ClusteringState> {
    let (centroids, cluster_ids) = kmeans(features, k, seed)?;
    Ok(ClusteringState {
        k,
        centroids,
        cluster_ids,
        round: 0,
        seed,
    })
}

/// Greedy bijection from new cluster ids to old ones by ascending centroid
/// distance. `mapping[new] = old`.
pub fn match_centroids(old: &Mat, new: &Mat) -> Vec<usize> {
    let k = old.rows;
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            pairs.push((sq_dist(old.row(i), new.row(j)), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut mapping = vec![usize::MAX; k];
    let mut old_used = vec![false; k];
    for (_, i, j) in pairs {
        if mapping[j] == usize::MAX && !old_used[i] {
            mapping[j] = i;
            old_used[i] = true;
        }
    }
    mapping
}

/// Clusters `new_features` with the previous seed and relabels the result so
/// that each new cluster takes the id of the closest old centroid.
pub fn recluster_and_match(old: &ClusteringState, new_features: &Mat) -> Result<ClusteringState> {
    let fresh = cluster_features(new_features, old.k, old.seed)?;
    let mapping = if old.centroids.cols == fresh.centroids.cols {
        match_centroids(&old.centroids, &fresh.centroids)
    } else {
        (0..old.k).collect()
    };
    let mut centroids = Mat::zeros(old.k, fresh.centroids.cols);
    for (j, &i) in mapping.iter().enumerate() {
        centroids.row_mut(i).copy_from_slice(fresh.centroids.row(j));
    }
    Ok(ClusteringState {
        k: old.k,
        centroids,
        cluster_ids: fresh.cluster_ids.iter().map(|&j| mapping[j]).collect(),
        round: old.round + 1,
        seed: old.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    pub(crate) fn blobs(centers: &[Vec<f64>], per: usize, std: f64, seed: u64) -> (Mat, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, std).unwrap();
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..per {
                rows.push(center.iter().map(|&v| v + noise.sample(&mut rng)).collect::<Vec<_>>());
                truth.push(c);
            }
        }
        (Mat::from_rows(&rows), truth)
    }

    fn centers(k: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..k)
            .map(|c| (0..dim).map(|d| if d == c % dim { 10.0 * (1 + c / dim) as f64 } else { 0.0 }).collect())
            .collect()
    }

    #[test]
    fn recovers_separated_blobs() {
        let (x, truth) = blobs(&centers(4, 6), 50, 0.5, 3);
        let s = cluster_features(&x, 4, 9).unwrap();
        let ari = crate::synth::adjusted_rand_index(&s.cluster_ids, &truth);
        assert!(ari >= 0.99, "ari {ari}");
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let (x, _) = blobs(&centers(3, 3), 10, 1.0, 1);
        let s = cluster_features(&x, 1, 0).unwrap();
        assert!(s.cluster_ids.iter().all(|&c| c == 0));
        for d in 0..3 {
            let m: f64 = (0..x.rows).map(|r| x.get(r, d)).sum::<f64>() / x.rows as f64;
            assert!((s.centroids.get(0, d) - m).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let (x, _) = blobs(&centers(3, 3), 3, 1.0, 2);
        let s = cluster_features(&x, 9, 4).unwrap();
        let mut ids = s.cluster_ids.clone();
        ids.sort();
        assert_eq!(ids, (0..9).collect::<Vec<_>>());
        for (i, &c) in s.cluster_ids.iter().enumerate() {
            assert_eq!(sq_dist(x.row(i), s.centroids.row(c)), 0.0);
        }
    }

    #[test]
    fn too_few_samples() {
        let x = Mat::zeros(2, 3);
        assert!(matches!(cluster_features(&x, 3, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let (x, _) = blobs(&centers(5, 4), 20, 3.0, 5);
        assert_eq!(cluster_features(&x, 5, 17).unwrap(), cluster_features(&x, 5, 17).unwrap());
    }

    #[test]
    fn identical_features_keep_labels() {
        let (x, _) = blobs(&centers(5, 4), 20, 2.0, 6);
        let s0 = cluster_features(&x, 5, 1).unwrap();
        let s1 = recluster_and_match(&s0, &x).unwrap();
        assert_eq!(s1.cluster_ids, s0.cluster_ids);
        assert_eq!(s1.round, 1);
        let s2 = recluster_and_match(&s1, &x).unwrap();
        assert_eq!(s2.cluster_ids, s0.cluster_ids);
    }

    #[test]
    fn recovers_known_permutation() {
        let c = centers(4, 4);
        let (x, _) = blobs(&c, 30, 0.3, 8);
        let s0 = cluster_features(&x, 4, 2).unwrap();
        // move each blob onto the position of another blob
        let perm = [2usize, 0, 3, 1];
        let mut shifted = x.clone();
        for r in 0..x.rows {
            let old = s0.cluster_ids[r];
            let target = perm[old];
            for d in 0..x.cols {
                let v = x.get(r, d) - s0.centroids.get(old, d) + s0.centroids.get(target, d);
                shifted.set(r, d, v);
            }
        }
        let s1 = recluster_and_match(&s0, &shifted).unwrap();
        for r in 0..x.rows {
            assert_eq!(s1.cluster_ids[r], perm[s0.cluster_ids[r]]);
        }
    }

    #[test]
    fn matching_is_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for k in 1..20 {
            let a = Mat::from_vec(k, 3, (0..3 * k).map(|_| rng.random::<f64>()).collect());
            let b = Mat::from_vec(k, 3, (0..3 * k).map(|_| rng.random::<f64>()).collect());
            let mut m = match_centroids(&a, &b);
            m.sort();
            assert_eq!(m, (0..k).collect::<Vec<_>>());
        }
    }
}
