//! Davies-Bouldin cluster validity index over 2D points.

use crate::scalar::Scalar;

/// Davies-Bouldin index for points grouped by `labels` into `k` clusters.
///
/// Per-cluster scatter is the mean Euclidean distance to the centroid;
/// separation is the distance between centroids. Lower is better.
/// Empty clusters are skipped; `k` must leave at least two non-empty ones.
pub fn davies_bouldin<S: Scalar>(points: &[(S, S)], labels: &[usize], k: usize) -> S {
    assert_eq!(points.len(), labels.len());
    let mut centroids = vec![(S::zero(), S::zero()); k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        centroids[l].0 += p.0;
        centroids[l].1 += p.1;
        counts[l] += 1;
    }
    let live: Vec<usize> = (0..k).filter(|&i| counts[i] > 0).collect();
    assert!(live.len() >= 2, "Davies-Bouldin needs at least two clusters");
    for &i in &live {
        let n = S::from_usize(counts[i]).unwrap();
        centroids[i].0 = centroids[i].0 / n;
        centroids[i].1 = centroids[i].1 / n;
    }
    let mut scatter = vec![S::zero(); k];
    for (p, &l) in points.iter().zip(labels) {
        let dx = p.0 - centroids[l].0;
        let dy = p.1 - centroids[l].1;
        scatter[l] += (dx * dx + dy * dy).sqrt();
    }
    for &i in &live {
        scatter[i] = scatter[i] / S::from_usize(counts[i]).unwrap();
    }
    let mut total = S::zero();
    for &i in &live {
        let mut worst = S::zero();
        for &j in &live {
            if i == j {
                continue;
            }
            let dx = centroids[i].0 - centroids[j].0;
            let dy = centroids[i].1 - centroids[j].1;
            let sep = (dx * dx + dy * dy).sqrt();
            let ratio = (scatter[i] + scatter[j]) / sep;
            if ratio > worst {
                worst = ratio;
            }
        }
        total += worst;
    }
    total / S::from_usize(live.len()).unwrap()
}

#[cfg(test)]
mod test {
    use super::*;

    #[test]
    fn hand_evaluated_two_cluster_case() {
        // sigma_i = 0.05 each, centroid distance = sqrt(0.5^2 + 0.6^2).
        let points = [(0.2, 0.2), (0.3, 0.2), (0.8, 0.8), (0.7, 0.8)];
        let labels = [0, 0, 1, 1];
        let db = davies_bouldin::<f64>(&points, &labels, 2);
        let sep = (0.5f64.powi(2) + 0.6f64.powi(2)).sqrt();
        let expected = 0.1 / sep;
        assert!((db - expected).abs() < 1e-12);
        assert!((1.0 / db - 7.81).abs() < 0.03);
        assert!(1.0 / db > 2.5);
    }
}
