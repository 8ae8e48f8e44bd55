//! Online clustering of cells by state and parameters.
//!
//! Cells are embedded as `(SoC, temperature, resistance)` points, z-scored
//! per axis, and grouped with k-means. The cluster count is chosen by the
//! gap statistic: the within-cluster dispersion of the data is compared
//! against uniform reference draws over the data's bounding box, and the
//! smallest count whose gap beats the next one (minus its sampling error)
//! wins. Every random choice is a seeded stream keyed by simulation step,
//! cluster count and replicate, so clustering is reproducible and the
//! reference replicates can run in parallel without reordering anything.

use crate::cell::{CellParams, CellState};
use crate::par;
use crate::rng::{self, DOMAIN_GAP_REFERENCE, DOMAIN_KMEANS_INIT};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const MAX_LLOYD_ITERS: usize = 100;
const DEGENERATE_STD: f64 = 1e-12;

/// Clustering knobs; `seed` is the run seed shared with the rest of the
/// simulation.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub k_max: usize,
    /// Reference replicates for the gap statistic.
    pub gap_refs: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            k_max: 20,
            gap_refs: 10,
            seed: 0,
        }
    }
}

/// A pack partition. `centroids_raw` lives in un-normalized feature space so
/// it can seed the next step's k-means under that step's scaling.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub k: usize,
    /// Cell index to cluster index.
    pub assignments: Vec<usize>,
    /// Cluster index to ascending member cell indices; never empty.
    pub members: Vec<Vec<usize>>,
    pub centroids_raw: Vec<[f64; 3]>,
}

/// Feature embedding used for clustering: SoC, temperature, resistance.
pub fn cell_features(params: &[CellParams], states: &[CellState]) -> Vec<[f64; 3]> {
    params
        .iter()
        .zip(states)
        .map(|(p, s)| [s.q, s.temp_k, p.resistance_ohm])
        .collect()
}

/// Per-axis z-scoring; a constant axis is zeroed so it cannot dominate the
/// metric with rounding noise.
fn normalize(points: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3], [f64; 3]) {
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for a in 0..3 {
            mean[a] += p[a];
        }
    }
    for a in 0..3 {
        mean[a] /= n;
    }
    let mut var = [0.0; 3];
    for p in points {
        for a in 0..3 {
            let d = p[a] - mean[a];
            var[a] += d * d;
        }
    }
    let mut std = [0.0; 3];
    for a in 0..3 {
        std[a] = (var[a] / n).sqrt();
    }
    let scaled = points
        .iter()
        .map(|p| {
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = if std[a] < DEGENERATE_STD {
                    0.0
                } else {
                    (p[a] - mean[a]) / std[a]
                };
            }
            out
        })
        .collect();
    (scaled, mean, std)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// Raw k-means state on already-normalized points.
#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    /// Sum of squared distances to assigned centroids.
    pub within_dispersion: f64,
    pub iterations: usize,
}

/// Distance-squared weighted seeding; falls back to uniform picks once every
/// point coincides with a chosen center.
fn kmeans_pp_init(points: &[[f64; 3]], k: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..n)]);
    let mut d2 = vec![f64::INFINITY; n];
    while centroids.len() < k {
        let last = centroids.last().unwrap();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(dist2(p, last));
        }
        let idx = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.gen_range(0..n),
        };
        centroids.push(points[idx]);
    }
    centroids
}

fn assign(points: &[[f64; 3]], centroids: &[[f64; 3]], out: &mut [usize]) {
    for (i, p) in points.iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = dist2(p, centroid);
            // Strict comparison keeps the lowest cluster index on ties.
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[i] = best;
    }
}

/// Moves the point farthest from its own centroid into cluster `empty`,
/// never breaking up a singleton. Ties resolve to the lowest cell index.
fn repair_empty(
    points: &[[f64; 3]],
    centroids: &mut [[f64; 3]],
    assignments: &mut [usize],
    counts: &mut [usize],
    empty: usize,
) {
    let mut donor = None;
    let mut donor_d = -1.0;
    for (i, p) in points.iter().enumerate() {
        if counts[assignments[i]] < 2 {
            continue;
        }
        let d = dist2(p, &centroids[assignments[i]]);
        if d > donor_d {
            donor_d = d;
            donor = Some(i);
        }
    }
    if let Some(i) = donor {
        counts[assignments[i]] -= 1;
        assignments[i] = empty;
        counts[empty] += 1;
        centroids[empty] = points[i];
    }
}

/// Lloyd iterations from a distance-weighted or warm init. `k` is clamped to
/// the point count; returned clusters are always nonempty.
pub fn kmeans(
    points: &[[f64; 3]],
    k: usize,
    rng: &mut ChaCha8Rng,
    warm: Option<&[[f64; 3]]>,
) -> KMeansResult {
    let n = points.len();
    assert!(n > 0, "kmeans needs at least one point");
    let k = k.max(1).min(n);

    let mut centroids = match warm {
        Some(w) if w.len() == k => w.to_vec(),
        _ => kmeans_pp_init(points, k, rng),
    };
    let mut assignments = vec![0usize; n];
    let mut prev = vec![usize::MAX; n];
    let mut iterations = 0;

    for iter in 0..MAX_LLOYD_ITERS {
        iterations = iter + 1;
        assign(points, &centroids, &mut assignments);

        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut repaired = false;
        for c in 0..k {
            if counts[c] == 0 {
                repair_empty(points, &mut centroids, &mut assignments, &mut counts, c);
                repaired = true;
            }
        }

        if !repaired && assignments == prev {
            break;
        }
        prev.copy_from_slice(&assignments);

        let mut sums = vec![[0.0; 3]; k];
        for (p, &a) in points.iter().zip(&assignments) {
            for axis in 0..3 {
                sums[a][axis] += p[axis];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for axis in 0..3 {
                    centroids[c][axis] = sums[c][axis] / counts[c] as f64;
                }
            }
        }
    }

    // The iteration cap can in principle leave a cluster empty on degenerate
    // duplicated-point inputs; force-fill so callers can rely on nonempty
    // clusters.
    let mut counts = vec![0usize; k];
    for &a in &assignments {
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] == 0 {
            repair_empty(points, &mut centroids, &mut assignments, &mut counts, c);
        }
    }

    let mut within = 0.0;
    for (p, &a) in points.iter().zip(&assignments) {
        within += dist2(p, &centroids[a]);
    }
    KMeansResult {
        assignments,
        centroids,
        within_dispersion: within,
        iterations,
    }
}

/// Gap-statistic outcome. `fired` is false when no count up to `k_max`
/// satisfied the criterion and the fallback `k = k_max` was returned.
#[derive(Debug, Clone)]
pub struct GapSelection {
    pub k: usize,
    pub fired: bool,
    /// `gaps[i]` is the gap at count `i + 1`, for the evaluated prefix.
    pub gaps: Vec<f64>,
    pub sds: Vec<f64>,
}

struct GapPoint {
    gap: f64,
    sd: f64,
}

fn log_dispersion(w: f64) -> f64 {
    w.max(1e-30).ln()
}

fn gap_point(
    points: &[[f64; 3]],
    bbox: &[(f64, f64); 3],
    k: usize,
    cfg: &ClusterConfig,
    step: u64,
) -> GapPoint {
    let n = points.len();
    let mut data_rng = rng::stream(cfg.seed, DOMAIN_KMEANS_INIT, &[step, k as u64, 0]);
    let data_log_w = log_dispersion(kmeans(points, k, &mut data_rng, None).within_dispersion);

    let b = cfg.gap_refs;
    let ref_log_w = par::map_indexed(b, |rep| {
        let mut draw_rng = rng::stream(
            cfg.seed,
            DOMAIN_GAP_REFERENCE,
            &[step, k as u64, rep as u64 + 1],
        );
        let reference: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                let mut p = [0.0; 3];
                for (axis, &(lo, hi)) in bbox.iter().enumerate() {
                    let u: f64 = draw_rng.gen();
                    p[axis] = lo + u * (hi - lo);
                }
                p
            })
            .collect();
        let mut fit_rng = rng::stream(
            cfg.seed,
            DOMAIN_KMEANS_INIT,
            &[step, k as u64, rep as u64 + 1],
        );
        log_dispersion(kmeans(&reference, k, &mut fit_rng, None).within_dispersion)
    });

    let mean = ref_log_w.iter().sum::<f64>() / b as f64;
    let var = ref_log_w.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / b as f64;
    let sd = var.sqrt() * (1.0 + 1.0 / b as f64).sqrt();
    GapPoint {
        gap: mean - data_log_w,
        sd,
    }
}

/// Picks the cluster count: the smallest `k` whose gap is at least the gap at
/// `k + 1` minus that point's sampling error. Counts are evaluated on demand,
/// so the usual small answers stay cheap.
pub fn select_k_gap(features: &[[f64; 3]], cfg: &ClusterConfig, step: u64) -> GapSelection {
    let n = features.len();
    let k_max = cfg.k_max.max(1).min(n);
    let (points, _, _) = normalize(features);

    let mut bbox = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for p in &points {
        for (axis, bounds) in bbox.iter_mut().enumerate() {
            bounds.0 = bounds.0.min(p[axis]);
            bounds.1 = bounds.1.max(p[axis]);
        }
    }

    let mut gaps = Vec::new();
    let mut sds = Vec::new();
    let push_point = |k: usize, gaps: &mut Vec<f64>, sds: &mut Vec<f64>| {
        let pt = gap_point(&points, &bbox, k, cfg, step);
        gaps.push(pt.gap);
        sds.push(pt.sd);
    };

    push_point(1, &mut gaps, &mut sds);
    for k in 1..k_max {
        push_point(k + 1, &mut gaps, &mut sds);
        if gaps[k - 1] >= gaps[k] - sds[k] {
            return GapSelection {
                k,
                fired: true,
                gaps,
                sds,
            };
        }
    }
    GapSelection {
        k: k_max,
        fired: k_max == 1,
        gaps,
        sds,
    }
}

/// Clusters the pack into exactly `k` groups (clamped to the cell count),
/// warm-starting from a previous partition when its count matches.
pub fn cluster_with_k(
    features: &[[f64; 3]],
    k: usize,
    cfg: &ClusterConfig,
    step: u64,
    warm: Option<&Clustering>,
) -> Clustering {
    let n = features.len();
    let k = k.max(1).min(n);
    let (points, mean, std) = normalize(features);

    let warm_centroids: Option<Vec<[f64; 3]>> = warm.filter(|w| w.k == k).map(|w| {
        w.centroids_raw
            .iter()
            .map(|c| {
                let mut out = [0.0; 3];
                for a in 0..3 {
                    out[a] = if std[a] < DEGENERATE_STD {
                        0.0
                    } else {
                        (c[a] - mean[a]) / std[a]
                    };
                }
                out
            })
            .collect()
    });

    let mut fit_rng = rng::stream(cfg.seed, DOMAIN_KMEANS_INIT, &[step, k as u64, u64::MAX]);
    let result = kmeans(&points, k, &mut fit_rng, warm_centroids.as_deref());

    let mut members = vec![Vec::new(); k];
    for (cell, &a) in result.assignments.iter().enumerate() {
        members[a].push(cell);
    }
    let centroids_raw = members
        .iter()
        .map(|m| {
            let mut c = [0.0; 3];
            for &cell in m {
                for a in 0..3 {
                    c[a] += features[cell][a];
                }
            }
            for v in &mut c {
                *v /= m.len() as f64;
            }
            c
        })
        .collect();

    Clustering {
        k,
        assignments: result.assignments,
        members,
        centroids_raw,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(
        center: [f64; 3],
        spread: [f64; 3],
        count: usize,
        rng: &mut ChaCha8Rng,
    ) -> Vec<[f64; 3]> {
        (0..count)
            .map(|_| {
                let mut p = center;
                for (v, s) in p.iter_mut().zip(spread) {
                    let u: f64 = rng.gen();
                    *v += s * (u - 0.5);
                }
                p
            })
            .collect()
    }

    // Noise scales with each axis span so blobs stay round after z-scoring.
    const SPREAD: [f64; 3] = [0.05, 2.0, 0.002];

    fn three_blobs() -> Vec<[f64; 3]> {
        let mut r = rng::stream(99, 7, &[]);
        let mut pts = blob([0.2, 300.0, 0.03], SPREAD, 40, &mut r);
        pts.extend(blob([0.8, 300.0, 0.03], SPREAD, 40, &mut r));
        pts.extend(blob([0.5, 320.0, 0.05], SPREAD, 40, &mut r));
        pts
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let pts = three_blobs();
        let (norm, _, _) = normalize(&pts);
        let mut r = rng::stream(1, DOMAIN_KMEANS_INIT, &[0, 3, 0]);
        let fit = kmeans(&norm, 3, &mut r, None);
        // Every blob must land in a single cluster.
        for chunk in fit.assignments.chunks(40) {
            assert!(chunk.iter().all(|&a| a == chunk[0]));
        }
        let labels: Vec<usize> = fit.assignments.chunks(40).map(|c| c[0]).collect();
        assert_eq!(
            {
                let mut l = labels.clone();
                l.sort_unstable();
                l
            },
            vec![0, 1, 2]
        );
        assert!(fit.within_dispersion < 10.0);
    }

    #[test]
    fn kmeans_is_reproducible() {
        let pts = three_blobs();
        let (norm, _, _) = normalize(&pts);
        let run = |seed| {
            let mut r = rng::stream(seed, DOMAIN_KMEANS_INIT, &[5, 4, 0]);
            kmeans(&norm, 4, &mut r, None)
        };
        let a = run(3);
        let b = run(3);
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }

    #[test]
    fn kmeans_never_returns_empty_clusters() {
        // Degenerate duplicated points with more clusters than distinct values.
        let pts = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let mut r = rng::stream(1, DOMAIN_KMEANS_INIT, &[0, 3, 0]);
        let fit = kmeans(&pts, 3, &mut r, None);
        let mut counts = [0usize; 3];
        for &a in &fit.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    }

    #[test]
    fn kmeans_clamps_k_to_point_count() {
        let pts = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let mut r = rng::stream(1, DOMAIN_KMEANS_INIT, &[0, 9, 0]);
        let fit = kmeans(&pts, 9, &mut r, None);
        assert_eq!(fit.centroids.len(), 2);
        assert_eq!(fit.within_dispersion, 0.0);
    }

    #[test]
    fn normalize_zeroes_constant_axes() {
        let pts = vec![[0.2, 300.0, 0.04], [0.4, 300.0, 0.02], [0.9, 300.0, 0.035]];
        let (norm, _, std) = normalize(&pts);
        assert!(std[1] < DEGENERATE_STD);
        assert!(norm.iter().all(|p| p[1] == 0.0));
        assert!(norm.iter().any(|p| p[0] != 0.0));
    }

    #[test]
    fn gap_selects_the_true_blob_count() {
        let cfg = ClusterConfig {
            k_max: 8,
            gap_refs: 10,
            seed: 11,
        };
        let sel = select_k_gap(&three_blobs(), &cfg, 0);
        assert_eq!(sel.k, 3);
        assert!(sel.fired);

        let mut r = rng::stream(4, 7, &[]);
        let mut two = blob([0.2, 300.0, 0.03], SPREAD, 50, &mut r);
        two.extend(blob([0.8, 320.0, 0.05], SPREAD, 50, &mut r));
        let sel2 = select_k_gap(&two, &cfg, 0);
        assert_eq!(sel2.k, 2);
    }

    #[test]
    fn gap_on_structureless_data_picks_one_cluster() {
        // A single uniform cloud has the same distribution as the reference
        // draws, so the criterion fires immediately.
        let mut r = rng::stream(21, 7, &[]);
        let pts = blob([0.5, 300.0, 0.04], [0.5, 20.0, 0.02], 200, &mut r);
        let cfg = ClusterConfig {
            k_max: 8,
            gap_refs: 10,
            seed: 13,
        };
        let sel = select_k_gap(&pts, &cfg, 0);
        assert_eq!(sel.k, 1);
    }

    #[test]
    fn cluster_with_k_builds_sorted_nonempty_members() {
        let pts = three_blobs();
        let cfg = ClusterConfig::default();
        let clustering = cluster_with_k(&pts, 5, &cfg, 0, None);
        assert_eq!(clustering.k, 5);
        let mut seen = vec![false; pts.len()];
        for m in &clustering.members {
            assert!(!m.is_empty());
            assert!(m.windows(2).all(|w| w[0] < w[1]));
            for &cell in m {
                assert!(!seen[cell]);
                seen[cell] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn warm_start_reuses_a_matching_partition() {
        let pts = three_blobs();
        let cfg = ClusterConfig::default();
        let first = cluster_with_k(&pts, 3, &cfg, 0, None);
        let second = cluster_with_k(&pts, 3, &cfg, 1, Some(&first));
        assert_eq!(first.assignments, second.assignments);
    }
}
