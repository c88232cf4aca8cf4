//! Mask-label affinities between prompt points and region-growing merge.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::medoid::medoid;
use crate::projection::visible_projection;
use crate::scene_model::{InstanceLabeling3D, Mask2D, PosedFrame, ScenePointCloud, Vec3};

/// Normalized histogram of mask labels around one point in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub point_id: usize,
    pub frame_id: u32,
    /// `(label, probability)` sorted by label; empty when the window was all background.
    pub probs: Vec<(u32, f64)>,
}

impl LabelDistribution {
    pub fn is_valid(&self) -> bool {
        !self.probs.is_empty()
    }

    pub fn get(&self, label: u32) -> f64 {
        self.probs
            .binary_search_by_key(&label, |e| e.0)
            .map_or(0.0, |k| self.probs[k].1)
    }
}

/// Histogram of nonzero labels in the `patch x patch` window centered at `(row, col)`.
pub fn label_distribution_at(
    point_id: usize,
    mask: &Mask2D,
    row: usize,
    col: usize,
    patch: usize,
) -> Result<LabelDistribution> {
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(Error::InvalidInput(format!(
            "patch size {patch} must be odd and positive"
        )));
    }
    let half = patch / 2;
    let (w, h) = (mask.labels.width(), mask.labels.height());
    let mut counts: BTreeMap<u32, u32> = BTreeMap::new();
    for r in row.saturating_sub(half)..(row + half + 1).min(h) {
        for c in col.saturating_sub(half)..(col + half + 1).min(w) {
            let l = *mask.labels.get(r, c);
            if l != 0 {
                *counts.entry(l).or_insert(0) += 1;
            }
        }
    }
    let total: u32 = counts.values().sum();
    Ok(LabelDistribution {
        point_id,
        frame_id: mask.frame_id,
        probs: counts.into_iter().map(|(l, n)| (l, n as f64 / total as f64)).collect(),
    })
}

/// Distribution at the projection of a visible point.
pub fn label_distribution(
    point_id: usize,
    position: &Vec3,
    frame: &PosedFrame,
    mask: &Mask2D,
    patch: usize,
    depth_tol: f64,
) -> Result<LabelDistribution> {
    if mask.frame_id != frame.frame_id {
        return Err(Error::InvalidInput("mask belongs to another frame".into()));
    }
    let proj = visible_projection(position, frame, depth_tol)
        .ok_or_else(|| Error::InvalidInput(format!("point {point_id} is not visible in frame {}", frame.frame_id)))?;
    let (row, col) = proj.pixel(frame.width(), frame.height());
    label_distribution_at(point_id, mask, row, col, patch)
}

/// Cosine similarity of two label histograms.
pub fn frame_affinity(di: &LabelDistribution, dj: &LabelDistribution) -> Result<f64> {
    if !di.is_valid() || !dj.is_valid() {
        return Err(Error::InvalidInput("affinity of an empty label distribution".into()));
    }
    if di.frame_id != dj.frame_id {
        return Err(Error::InvalidInput("label distributions from different frames".into()));
    }
    let norm = |d: &LabelDistribution| d.probs.iter().map(|(_, p)| p * p).sum::<f64>().sqrt();
    let dot: f64 = di.probs.iter().map(|(l, p)| p * dj.get(*l)).sum();
    Ok((dot / (norm(di) * norm(dj))).clamp(0.0, 1.0))
}

/// One frame's pairwise scores among co-visible prompt points: `(i, j, score, alpha)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAffinity {
    pub entries: Vec<(usize, usize, f64, f64)>,
}

/// Sparse symmetric affinity over prompt points; absent entries carry no evidence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "AffinityList", try_from = "AffinityList")]
pub struct AffinityMatrix {
    pub n: usize,
    /// Keyed by `(min, max)`: `(score, evidence)`.
    entries: BTreeMap<(usize, usize), (f64, u32)>,
}

impl AffinityMatrix {
    pub fn new(n: usize) -> Self {
        AffinityMatrix {
            n,
            entries: BTreeMap::new(),
        }
    }

    /// Set an off-diagonal entry (symmetric).
    pub fn insert(&mut self, i: usize, j: usize, score: f64, evidence: u32) {
        assert!(i < self.n && j < self.n && i != j, "entry ({i}, {j}) out of range");
        self.entries.insert((i.min(j), i.max(j)), (score, evidence));
    }

    /// `(score, evidence)`; the diagonal is `(1, 1)`.
    pub fn get(&self, i: usize, j: usize) -> Option<(f64, u32)> {
        if i == j {
            return (i < self.n).then_some((1.0, 1));
        }
        self.entries.get(&(i.min(j), i.max(j))).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Off-diagonal entries `(i, j, score, evidence)` with `i < j`.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64, u32)> + '_ {
        self.entries.iter().map(|(&(i, j), &(s, e))| (i, j, s, e))
    }
}

/// Serialized form of [`AffinityMatrix`]: `(i, j, score, evidence)` with `i < j`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct AffinityList {
    n: usize,
    entries: Vec<(usize, usize, f64, u32)>,
}

impl From<AffinityMatrix> for AffinityList {
    fn from(m: AffinityMatrix) -> Self {
        AffinityList {
            n: m.n,
            entries: m.iter().collect(),
        }
    }
}

impl TryFrom<AffinityList> for AffinityMatrix {
    type Error = String;

    fn try_from(l: AffinityList) -> std::result::Result<Self, String> {
        let mut m = AffinityMatrix::new(l.n);
        for (i, j, s, e) in l.entries {
            if i >= l.n || j >= l.n || i == j {
                return Err(format!("affinity entry ({i}, {j}) out of range for {} points", l.n));
            }
            m.insert(i, j, s, e);
        }
        Ok(m)
    }
}

/// `sum(alpha * A^m) / sum(alpha)` per pair over frames; pairs never
/// co-visible stay absent. Evidence counts frames with `alpha > 0`.
pub fn aggregate_affinity(n: usize, per_frame: &[FrameAffinity]) -> AffinityMatrix {
    let mut acc: BTreeMap<(usize, usize), (f64, f64, u32)> = BTreeMap::new();
    for frame in per_frame {
        for &(i, j, score, alpha) in &frame.entries {
            if i == j || alpha <= 0.0 {
                continue;
            }
            let e = acc.entry((i.min(j), i.max(j))).or_insert((0.0, 0.0, 0));
            e.0 += alpha * score;
            e.1 += alpha;
            e.2 += 1;
        }
    }
    let mut m = AffinityMatrix::new(n);
    for ((i, j), (num, den, count)) in acc {
        m.insert(i, j, num / den, count);
    }
    m
}

/// Evidence-weighted mean of `A(k, j)` over region members with an entry.
pub fn region_point_score(region: &[usize], j: usize, a: &AffinityMatrix) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for &k in region {
        if let Some((s, e)) = a.get(k, j) {
            num += e as f64 * s;
            den += e as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Region growing over prompt points. Unlabeled points seed new regions in
/// index order; a region expands breadth-first through `neighbors`, admitting
/// a point when its region-point score exceeds `tau`. Labels start at 1.
pub fn affinity_merge(a: &AffinityMatrix, neighbors: &[Vec<usize>], tau: f64) -> Vec<u32> {
    let n = a.n;
    let mut labels = vec![0u32; n];
    let mut next = 0u32;
    for seed in 0..n {
        if labels[seed] != 0 {
            continue;
        }
        next += 1;
        labels[seed] = next;
        let mut region = vec![seed];
        let mut queue = VecDeque::from([seed]);
        while let Some(i) = queue.pop_front() {
            for &j in neighbors.get(i).map(Vec::as_slice).unwrap_or(&[]) {
                if j >= n || labels[j] != 0 {
                    continue;
                }
                if region_point_score(&region, j, a).is_some_and(|s| s > tau) {
                    labels[j] = next;
                    region.push(j);
                    queue.push_back(j);
                }
            }
        }
    }
    labels
}

/// Each point's `k` nearest others (ties by index) plus every point it shares
/// affinity evidence with; sorted and deduplicated.
pub fn merge_neighbors(positions: &[Vec3], k: usize, a: &AffinityMatrix) -> Vec<Vec<usize>> {
    let n = positions.len();
    let mut out: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&x, &y| {
                let dx = (positions[x] - positions[i]).norm_squared();
                let dy = (positions[y] - positions[i]).norm_squared();
                dx.total_cmp(&dy).then(x.cmp(&y))
            });
            others.truncate(k);
            others
        })
        .collect();
    for (i, j, _, _) in a.iter() {
        out[i].push(j);
        out[j].push(i);
    }
    for v in out.iter_mut() {
        v.sort_unstable();
        v.dedup();
    }
    out
}

/// Assign scene points from per-pair point sets and pair region labels.
///
/// `sets[p]` are the points claimed by pair `p`, `region[p]` its region label
/// (0 drops the pair) and `anchors[p]` its representative 3D point. Points
/// claimed by several regions go to the region with the nearest anchor among
/// the claiming pairs (ties to the lower region label). Output labels are
/// compacted in order of the region labels.
pub fn propagate_labels(
    num_points: usize,
    sets: &[Vec<usize>],
    region: &[u32],
    anchors: &[Vec3],
    cloud: &ScenePointCloud,
) -> Result<InstanceLabeling3D> {
    Ok(InstanceLabeling3D::from_raw(&propagate_regions(
        num_points, sets, region, anchors, cloud,
    )?))
}

/// As [`propagate_labels`] but returns the winning region id per point, uncompacted.
pub fn propagate_regions(
    num_points: usize,
    sets: &[Vec<usize>],
    region: &[u32],
    anchors: &[Vec3],
    cloud: &ScenePointCloud,
) -> Result<Vec<u32>> {
    if sets.len() != region.len() || sets.len() != anchors.len() {
        return Err(Error::DimensionMismatch(
            "pair sets, regions and anchors differ in length".into(),
        ));
    }
    if cloud.len() != num_points {
        return Err(Error::DimensionMismatch("cloud size differs from label count".into()));
    }
    // Per point: (distance to claiming anchor, region).
    let mut best: Vec<Option<(f64, u32)>> = vec![None; num_points];
    for (p, set) in sets.iter().enumerate() {
        let r = region[p];
        if r == 0 {
            continue;
        }
        for &i in set {
            if i >= num_points {
                return Err(Error::InvalidInput(format!(
                    "pair {p} claims point {i} of {num_points}"
                )));
            }
            let d = (cloud.positions[i] - anchors[p]).norm();
            let cand = (d, r);
            best[i] = Some(match best[i] {
                None => cand,
                Some(cur) if cur.1 == r => (cur.0.min(d), r),
                Some(cur) => {
                    if d < cur.0 || (d == cur.0 && r < cur.1) {
                        cand
                    } else {
                        cur
                    }
                }
            });
        }
    }
    Ok(best.iter().map(|b| b.map_or(0, |(_, r)| r)).collect())
}

/// 3D medoid of a point subset.
pub fn set_medoid(cloud: &ScenePointCloud, set: &[usize]) -> Option<Vec3> {
    let pts: Vec<Vec3> = set.iter().map(|&i| cloud.positions[i]).collect();
    medoid(&pts).map(|k| pts[k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dist(probs: &[(u32, f64)]) -> LabelDistribution {
        LabelDistribution {
            point_id: 0,
            frame_id: 0,
            probs: probs.to_vec(),
        }
    }

    #[test]
    fn distribution_examples() {
        let mut labels = Grid::filled(5, 5, 0u32);
        labels.set(2, 2, 3);
        let mask = Mask2D { frame_id: 0, labels };
        assert_eq!(label_distribution_at(0, &mask, 2, 2, 1).unwrap().probs, vec![(3, 1.0)]);

        let mut labels = Grid::filled(5, 5, 0u32);
        let window = [2, 2, 2, 2, 2, 4, 4, 4, 4];
        for (k, l) in window.iter().enumerate() {
            labels.set(1 + k / 3, 1 + k % 3, *l);
        }
        let mask = Mask2D { frame_id: 0, labels };
        let d = label_distribution_at(0, &mask, 2, 2, 3).unwrap();
        assert_eq!(d.probs, vec![(2, 5.0 / 9.0), (4, 4.0 / 9.0)]);

        let mask = Mask2D {
            frame_id: 0,
            labels: Grid::filled(5, 5, 0),
        };
        assert!(!label_distribution_at(0, &mask, 2, 2, 5).unwrap().is_valid());
        assert!(label_distribution_at(0, &mask, 2, 2, 4).is_err());
    }

    #[test]
    fn affinity_examples() {
        let a = dist(&[(1, 1.0)]);
        assert_eq!(frame_affinity(&a, &a).unwrap(), 1.0);
        assert_eq!(frame_affinity(&a, &dist(&[(2, 1.0)])).unwrap(), 0.0);
        let b = dist(&[(1, 0.6), (2, 0.4)]);
        assert!((frame_affinity(&a, &b).unwrap() - 0.6 / (0.52f64).sqrt()).abs() < 1e-12);
        assert!(frame_affinity(&a, &dist(&[])).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let f = |s: f64| FrameAffinity {
            entries: vec![(0, 1, s, 1.0)],
        };
        let m = aggregate_affinity(3, &[f(1.0), f(1.0), f(1.0)]);
        assert_eq!(m.get(0, 1), Some((1.0, 3)));
        let m = aggregate_affinity(3, &[f(1.0), f(0.0)]);
        assert_eq!(m.get(1, 0), Some((0.5, 2)));
        assert_eq!(m.get(0, 2), None);
        assert_eq!(m.get(2, 2), Some((1.0, 1)));
    }

    #[test]
    fn region_score_examples() {
        let mut a = AffinityMatrix::new(3);
        a.insert(0, 2, 0.9, 2);
        a.insert(1, 2, 0.3, 1);
        assert_eq!(region_point_score(&[0], 2, &a), Some(0.9));
        assert!((region_point_score(&[0, 1], 2, &a).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(region_point_score(&[0], 1, &a), None);
    }

    fn full(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect()
    }

    #[test]
    fn merge_examples() {
        let mut a = AffinityMatrix::new(4);
        a.insert(0, 1, 0.9, 1);
        a.insert(1, 2, 0.9, 1);
        a.insert(2, 3, 0.1, 1);
        assert_eq!(affinity_merge(&a, &full(4), 0.5), vec![1, 1, 1, 2]);

        let mut ones = AffinityMatrix::new(5);
        let mut zeros = AffinityMatrix::new(5);
        for i in 0..5 {
            for j in i + 1..5 {
                ones.insert(i, j, 1.0, 1);
                zeros.insert(i, j, 0.0, 1);
            }
        }
        assert_eq!(affinity_merge(&ones, &full(5), 0.7), vec![1; 5]);
        assert_eq!(affinity_merge(&zeros, &full(5), 0.7), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn merge_is_invariant_to_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(2..9);
            let block: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let mut a = AffinityMatrix::new(n);
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random_bool(0.7) {
                        let s = if block[i] == block[j] {
                            rng.random_range(0.85..1.0)
                        } else {
                            rng.random_range(0.0..0.55)
                        };
                        a.insert(i, j, s, rng.random_range(1..4));
                    }
                }
            }
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let mut b = AffinityMatrix::new(n);
            for (i, j, s, e) in a.iter() {
                b.insert(perm[i], perm[j], s, e);
            }
            let la = affinity_merge(&a, &full(n), 0.7);
            let lb = affinity_merge(&b, &full(n), 0.7);
            for i in 0..n {
                for j in 0..n {
                    assert_eq!(la[i] == la[j], lb[perm[i]] == lb[perm[j]]);
                }
            }
        }
    }

    #[test]
    fn neighbors_include_evidence_pairs() {
        let pos: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let mut a = AffinityMatrix::new(5);
        a.insert(0, 4, 0.5, 1);
        let nb = merge_neighbors(&pos, 1, &a);
        assert_eq!(nb[0], vec![1, 4]);
        assert_eq!(nb[2], vec![1]);
        assert_eq!(nb[4], vec![0, 3]);
    }

    #[test]
    fn propagation_resolves_conflicts_by_anchor_distance() {
        let pos: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let cloud = ScenePointCloud::new(pos, None).unwrap();
        let sets = vec![vec![0, 1], vec![1, 2], vec![3]];
        let anchors = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
            Vec3::new(3.0, 0.0, 0.0),
        ];
        let l = propagate_labels(4, &sets, &[1, 2, 3], &anchors, &cloud).unwrap();
        assert_eq!(l.labels, vec![1, 1, 2, 3]);
        // Same region: union, no conflict.
        let l = propagate_labels(4, &sets, &[1, 1, 0], &anchors, &cloud).unwrap();
        assert_eq!(l.labels, vec![1, 1, 1, 0]);
    }
}
