//! Embedding and clustering working together: well-separated feature
//! blobs must come out of t-SNE as well-separated planar groups that
//! DBSCAN recovers exactly.

use cadport_core::dbscan::{dbscan, ClusterLabel, ClusterParams};
use cadport_core::linalg::Matrix;
use cadport_core::rng;
use cadport_core::tsne::{fit_tsne, FeatureMatrix, TsneConfig};

const BLOBS: usize = 3;
const PER_BLOB: usize = 30;
const DIM: usize = 50;

/// Three Gaussian blobs of unit radius whose centers sit 10 radii apart
/// along distinct axes.
fn blob_features(seed: u64) -> FeatureMatrix {
    let mut stream = rng::substream(seed, "blob-features");
    let mut data = Matrix::zeros(BLOBS * PER_BLOB, DIM);
    for b in 0..BLOBS {
        for i in 0..PER_BLOB {
            let row = b * PER_BLOB + i;
            for j in 0..DIM {
                let center = if j == b { 10.0 } else { 0.0 };
                data.set(row, j, center + rng::normal(&mut stream));
            }
        }
    }
    let symbols = (0..BLOBS * PER_BLOB).map(|i| format!("S{i:03}")).collect();
    FeatureMatrix::new(symbols, data).unwrap()
}

#[test]
fn tsne_separates_blobs_for_exact_dbscan_recovery() {
    let features = blob_features(2024);
    let emb = fit_tsne(&features, &TsneConfig { seed: 7, ..TsneConfig::default() }).unwrap();

    // Radius: half the smallest gap between true-group centroids. Inside
    // that radius every blob stays connected while no two blobs touch.
    let mut centroids = [[0.0_f64; 2]; BLOBS];
    for (b, centroid) in centroids.iter_mut().enumerate() {
        for i in 0..PER_BLOB {
            let p = emb.points[b * PER_BLOB + i];
            centroid[0] += p[0] / PER_BLOB as f64;
            centroid[1] += p[1] / PER_BLOB as f64;
        }
    }
    let mut min_gap = f64::INFINITY;
    for a in 0..BLOBS {
        for b in (a + 1)..BLOBS {
            let dx = centroids[a][0] - centroids[b][0];
            let dy = centroids[a][1] - centroids[b][1];
            min_gap = min_gap.min((dx * dx + dy * dy).sqrt());
        }
    }
    assert!(min_gap.is_finite() && min_gap > 0.0);

    let params = ClusterParams::new(min_gap / 2.0, 4).unwrap();
    let assignment = dbscan(&emb.points, params);
    assert_eq!(assignment.n_clusters, BLOBS);
    assert_eq!(assignment.noise_count(), 0);

    // Exact recovery: every cluster is exactly one generating blob.
    for b in 0..BLOBS {
        let mut ids = std::collections::BTreeSet::new();
        for i in 0..PER_BLOB {
            match assignment.labels[b * PER_BLOB + i] {
                ClusterLabel::Cluster(c) => {
                    ids.insert(c);
                }
                ClusterLabel::Noise => panic!("blob {b} point {i} marked noise"),
            }
        }
        assert_eq!(ids.len(), 1, "blob {b} split across clusters {ids:?}");
    }
}
