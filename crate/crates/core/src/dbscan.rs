//! Density-based clustering of the 2-D embedding.
//!
//! Classic DBSCAN with one twist for reproducibility: points are scanned in
//! a canonical order (lexicographic by coordinates, ties by key), so border
//! points always join the first cluster that reaches them and the whole
//! assignment is independent of input order.

use crate::error::{Error, Result};
use crate::math;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

/// DBSCAN parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl ClusterParams {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::Parameter("min_pts must be at least 1".into()));
        }
        Ok(ClusterParams { eps, min_pts })
    }

    /// Scale-adaptive default: eps = 0.5 x median distance to the 4th
    /// nearest neighbor, min_pts = 4.
    pub fn from_embedding(points: &[[f64; 2]]) -> Result<Self> {
        const K: usize = 4;
        if points.len() <= K {
            return Err(Error::InsufficientData { needed: K + 1, got: points.len() });
        }
        let mut knn = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let mut dists: Vec<f64> = points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(*p, *q))
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            knn.push(dists[K - 1]);
        }
        let eps = 0.5 * math::median(&knn);
        if !(eps > 0.0) {
            return Err(Error::Numeric(
                "degenerate embedding: median 4-NN distance is zero".into(),
            ));
        }
        Ok(ClusterParams { eps, min_pts: K })
    }
}

/// Label of one point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusterLabel {
    Cluster(usize),
    Noise,
}

impl ClusterLabel {
    /// Integer form used in dumps: cluster id, or -1 for noise.
    pub fn as_i64(self) -> i64 {
        match self {
            ClusterLabel::Cluster(id) => id as i64,
            ClusterLabel::Noise => -1,
        }
    }
}

/// The partition produced by one DBSCAN run, indexed like the input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub labels: Vec<ClusterLabel>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    /// Member indices of each cluster, in input order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_clusters];
        for (i, label) in self.labels.iter().enumerate() {
            if let ClusterLabel::Cluster(c) = label {
                out[*c].push(i);
            }
        }
        out
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| **l == ClusterLabel::Noise).count()
    }
}

#[inline]
fn dist(p: [f64; 2], q: [f64; 2]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    math::sqrt(dx * dx + dy * dy)
}

/// All indices within `eps` of point `p`, including `p` itself.
pub fn eps_neighborhood(p: usize, points: &[[f64; 2]], eps: f64) -> Vec<usize> {
    points
        .iter()
        .enumerate()
        .filter(|(_, q)| dist(points[p], **q) <= eps)
        .map(|(i, _)| i)
        .collect()
}

/// Runs DBSCAN with ties in the canonical scan order broken by input index.
pub fn dbscan(points: &[[f64; 2]], params: ClusterParams) -> ClusterAssignment {
    let keys: Vec<String> = (0..points.len()).map(|i| format!("{i:08}")).collect();
    let key_refs: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
    dbscan_keyed(points, &key_refs, params).expect("index keys are unique")
}

/// Runs DBSCAN scanning points in (x, y, key) order.
///
/// Keys (stock symbols in the pipeline) only matter for coincident points.
pub fn dbscan_keyed(
    points: &[[f64; 2]],
    keys: &[&str],
    params: ClusterParams,
) -> Result<ClusterAssignment> {
    if keys.len() != points.len() {
        return Err(Error::Shape(format!(
            "{} keys for {} points",
            keys.len(),
            points.len()
        )));
    }
    if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Validation("points must be finite".into()));
    }

    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        points[a][0]
            .partial_cmp(&points[b][0])
            .unwrap()
            .then(points[a][1].partial_cmp(&points[b][1]).unwrap())
            .then(keys[a].cmp(keys[b]))
    });

    const UNVISITED: i64 = -2;
    const NOISE: i64 = -1;
    let mut labels = vec![UNVISITED; n];
    let mut next_cluster = 0usize;

    for &seed in &order {
        if labels[seed] != UNVISITED {
            continue;
        }
        let neighborhood = eps_neighborhood(seed, points, params.eps);
        if neighborhood.len() < params.min_pts {
            labels[seed] = NOISE;
            continue;
        }
        let cluster = next_cluster as i64;
        next_cluster += 1;
        labels[seed] = cluster;
        // Expansion frontier in canonical order; border points keep the
        // first cluster that claims them.
        let mut frontier: Vec<usize> = sorted_by_scan(&neighborhood, points, keys);
        let mut cursor = 0;
        while cursor < frontier.len() {
            let q = frontier[cursor];
            cursor += 1;
            if labels[q] == NOISE {
                labels[q] = cluster;
            }
            if labels[q] != UNVISITED {
                continue;
            }
            labels[q] = cluster;
            let reach = eps_neighborhood(q, points, params.eps);
            if reach.len() >= params.min_pts {
                for r in sorted_by_scan(&reach, points, keys) {
                    if labels[r] == UNVISITED || labels[r] == NOISE {
                        frontier.push(r);
                    }
                }
            }
        }
    }

    let labels = labels
        .into_iter()
        .map(|l| if l == NOISE { ClusterLabel::Noise } else { ClusterLabel::Cluster(l as usize) })
        .collect();
    Ok(ClusterAssignment { labels, n_clusters: next_cluster })
}

fn sorted_by_scan(indices: &[usize], points: &[[f64; 2]], keys: &[&str]) -> Vec<usize> {
    let mut v = indices.to_vec();
    v.sort_by(|&a, &b| {
        points[a][0]
            .partial_cmp(&points[b][0])
            .unwrap()
            .then(points[a][1].partial_cmp(&points[b][1]).unwrap())
            .then(keys[a].cmp(keys[b]))
    });
    v
}

/// Member counts per cluster id.
pub fn cluster_sizes(assignment: &ClusterAssignment) -> Vec<usize> {
    let mut sizes = vec![0usize; assignment.n_clusters];
    for label in &assignment.labels {
        if let ClusterLabel::Cluster(c) = label {
            sizes[*c] += 1;
        }
    }
    sizes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    #[test]
    fn neighborhood_includes_self_and_respects_radius() {
        let pts = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
        assert_eq!(eps_neighborhood(0, &pts, 1.5), vec![0, 1]);
        assert_eq!(eps_neighborhood(0, &pts, 0.0001), vec![0]);
        assert_eq!(eps_neighborhood(0, &pts, 10.0), vec![0, 1, 2]);
    }

    #[test]
    fn empty_input_yields_empty_assignment() {
        let a = dbscan(&[], ClusterParams::new(1.0, 4).unwrap());
        assert_eq!(a.n_clusters, 0);
        assert!(a.labels.is_empty());
    }

    #[test]
    fn coincident_points_form_one_cluster() {
        let pts = vec![[2.0, -1.0]; 10];
        let a = dbscan(&pts, ClusterParams::new(0.1, 5).unwrap());
        assert_eq!(a.n_clusters, 1);
        assert_eq!(a.noise_count(), 0);
    }

    fn blob(rng: &mut rng::Stream, center: [f64; 2], radius: f64, n: usize) -> Vec<[f64; 2]> {
        (0..n)
            .map(|_| {
                [
                    center[0] + radius * (2.0 * rng.gen::<f64>() - 1.0),
                    center[1] + radius * (2.0 * rng.gen::<f64>() - 1.0),
                ]
            })
            .collect()
    }

    #[test]
    fn two_blobs_and_an_outlier() {
        let mut rng = rng::substream(41, "dbscan-blobs");
        let mut pts = blob(&mut rng, [0.0, 0.0], 0.1, 20);
        pts.extend(blob(&mut rng, [10.0, 0.0], 0.1, 20));
        pts.push([50.0, 50.0]);
        let a = dbscan(&pts, ClusterParams::new(0.5, 4).unwrap());
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.noise_count(), 1);
        assert_eq!(a.labels[40], ClusterLabel::Noise);
        let sizes = cluster_sizes(&a);
        assert_eq!(sizes.iter().sum::<usize>(), 40);
    }

    #[test]
    fn cluster_sizes_counts_members() {
        let a = ClusterAssignment {
            labels: vec![
                ClusterLabel::Cluster(0),
                ClusterLabel::Cluster(0),
                ClusterLabel::Cluster(1),
                ClusterLabel::Noise,
            ],
            n_clusters: 2,
        };
        assert_eq!(cluster_sizes(&a), vec![2, 1]);
        let all_noise =
            ClusterAssignment { labels: vec![ClusterLabel::Noise; 3], n_clusters: 0 };
        assert_eq!(cluster_sizes(&all_noise), Vec::<usize>::new());
    }

    /// Brute-force oracle: core points, density-connectivity closure over
    /// cores, then border attachment. Returns (core partition as sorted
    /// groups, per-point reachable cluster sets).
    fn closure_oracle(
        pts: &[[f64; 2]],
        params: ClusterParams,
    ) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let n = pts.len();
        let core: Vec<bool> =
            (0..n).map(|i| eps_neighborhood(i, pts, params.eps).len() >= params.min_pts).collect();
        // Union-find over core points within eps of each other.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], i: usize) -> usize {
            let mut root = i;
            while parent[root] != root {
                root = parent[root];
            }
            let mut cur = i;
            while parent[cur] != root {
                let next = parent[cur];
                parent[cur] = root;
                cur = next;
            }
            root
        }
        for i in 0..n {
            for j in i + 1..n {
                if core[i] && core[j] {
                    let d = {
                        let dx = pts[i][0] - pts[j][0];
                        let dy = pts[i][1] - pts[j][1];
                        (dx * dx + dy * dy).sqrt()
                    };
                    if d <= params.eps {
                        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                        parent[ri] = rj;
                    }
                }
            }
        }
        let mut groups: alloc::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for i in 0..n {
            if core[i] {
                let r = find(&mut parent, i);
                groups.entry(r).or_default().push(i);
            }
        }
        let core_groups: Vec<Vec<usize>> = groups.values().cloned().collect();
        // Which oracle groups can reach each point.
        let mut reachable = vec![Vec::new(); n];
        for (gid, group) in core_groups.iter().enumerate() {
            for i in 0..n {
                let hit = group.iter().any(|&c| {
                    let dx = pts[i][0] - pts[c][0];
                    let dy = pts[i][1] - pts[c][1];
                    (dx * dx + dy * dy).sqrt() <= params.eps
                });
                if hit {
                    reachable[i].push(gid);
                }
            }
        }
        (core_groups, reachable)
    }

    #[test]
    fn matches_density_connectivity_closure_on_random_data() {
        let mut rng = rng::substream(42, "dbscan-oracle");
        for _ in 0..10 {
            let n = rng.gen_range(5..80);
            let pts: Vec<[f64; 2]> =
                (0..n).map(|_| [rng.gen::<f64>() * 4.0, rng.gen::<f64>() * 4.0]).collect();
            let params = ClusterParams::new(0.4, 3).unwrap();
            let got = dbscan(&pts, params);
            let (core_groups, reachable) = closure_oracle(&pts, params);
            assert_eq!(got.n_clusters, core_groups.len());
            // Core partition must match exactly up to relabeling.
            let mut got_groups: Vec<Vec<usize>> = got
                .members()
                .into_iter()
                .map(|members| {
                    members
                        .into_iter()
                        .filter(|&i| eps_neighborhood(i, &pts, params.eps).len() >= params.min_pts)
                        .collect()
                })
                .collect();
            got_groups.sort();
            let mut want = core_groups.clone();
            want.sort();
            assert_eq!(got_groups, want);
            // Border points must belong to a cluster that reaches them;
            // noise points must be unreachable from every core.
            for (i, label) in got.labels.iter().enumerate() {
                match label {
                    ClusterLabel::Noise => assert!(reachable[i].is_empty()),
                    ClusterLabel::Cluster(_) => assert!(!reachable[i].is_empty()),
                }
            }
        }
    }

    #[test]
    fn permutation_of_input_preserves_partition() {
        let mut rng = rng::substream(43, "dbscan-perm");
        let n = 60;
        let pts: Vec<[f64; 2]> =
            (0..n).map(|_| [rng.gen::<f64>() * 3.0, rng.gen::<f64>() * 3.0]).collect();
        let keys: Vec<String> = (0..n).map(|i| format!("S{i:03}")).collect();
        let key_refs: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
        let params = ClusterParams::new(0.5, 4).unwrap();
        let base = dbscan_keyed(&pts, &key_refs, params).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let ppts: Vec<[f64; 2]> = perm.iter().map(|&i| pts[i]).collect();
        let pkeys: Vec<&str> = perm.iter().map(|&i| key_refs[i]).collect();
        let shuffled = dbscan_keyed(&ppts, &pkeys, params).unwrap();

        // Same label for the same key, identically numbered: the canonical
        // scan order makes even the numbering stable.
        for (new_idx, &old_idx) in perm.iter().enumerate() {
            assert_eq!(shuffled.labels[new_idx], base.labels[old_idx]);
        }
    }

    #[test]
    fn default_eps_matches_median_knn_oracle() {
        let mut rng = rng::substream(44, "dbscan-default");
        let mut pts = blob(&mut rng, [0.0, 0.0], 0.5, 30);
        pts.extend(blob(&mut rng, [100.0, 0.0], 0.5, 30));
        let params = ClusterParams::from_embedding(&pts).unwrap();
        assert_eq!(params.min_pts, 4);

        // Oracle: 4th-nearest distance by repeated min-extraction instead
        // of a sort, median by the midpoint rule.
        let mut fourth: Vec<f64> = Vec::new();
        for (i, p) in pts.iter().enumerate() {
            let mut rest: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist(*p, *q))
                .collect();
            let mut picked = 0.0;
            for _ in 0..4 {
                let (k, _) = rest
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                picked = rest.remove(k);
            }
            fourth.push(picked);
        }
        fourth.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = fourth.len() / 2;
        let med = (fourth[mid - 1] + fourth[mid]) / 2.0;
        assert_eq!(params.eps, 0.5 * med);
    }

    #[test]
    fn default_params_scale_with_embedding() {
        let mut rng = rng::substream(45, "dbscan-scale");
        let mut pts = blob(&mut rng, [0.0, 0.0], 0.5, 40);
        pts.extend(blob(&mut rng, [10.0, 0.0], 0.5, 40));
        let base = ClusterParams::from_embedding(&pts).unwrap();

        // Power-of-two scaling is exact in IEEE arithmetic, so eps must
        // scale by exactly the same factor and the partition must not move.
        let scaled: Vec<[f64; 2]> = pts.iter().map(|p| [p[0] * 32.0, p[1] * 32.0]).collect();
        let big = ClusterParams::from_embedding(&scaled).unwrap();
        assert_eq!(big.eps, base.eps * 32.0);
        assert_eq!(big.min_pts, base.min_pts);

        let a = dbscan(&pts, base);
        let b = dbscan(&scaled, big);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.n_clusters, b.n_clusters);
    }
}
