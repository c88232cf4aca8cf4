//! Point-group / box reconciliation: forward matching of groups to boxes,
//! reverse matching of the boxes' contents back to groups, and the
//! filter-and-resize step that yields prompt pairs.

mod hungarian;

pub use hungarian::bipartite_match;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{BoxBranchOutput, PointBranchOutput};
use crate::scene_model::{Box3D, ScenePointCloud};

/// Boxes rebuilt around very few points still get this minimum extent (m).
pub const MIN_BOX_EXTENT: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Matched { group: usize, boxed: usize },
    Group { group: usize },
    Box { boxed: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub pair_id: u32,
    /// Sorted, distinct point indices.
    pub points: Vec<usize>,
    #[serde(rename = "box")]
    pub bbox: Box3D,
    pub score: f64,
    pub source: PairSource,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingMode {
    /// Groups and boxes prompt independently.
    None,
    /// Groups pick boxes; a pair is the matched box and its contents.
    Forward,
    /// Boxes pick groups by their contents; a pair is the group and the box.
    Reverse,
    #[default]
    Bidirectional,
}

impl MatchingMode {
    pub const ALL: [MatchingMode; 4] = [
        MatchingMode::None,
        MatchingMode::Forward,
        MatchingMode::Reverse,
        MatchingMode::Bidirectional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MatchingMode::None => "none",
            MatchingMode::Forward => "forward",
            MatchingMode::Reverse => "reverse",
            MatchingMode::Bidirectional => "bidirectional",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub mode: MatchingMode,
    /// Box margin as a fraction of the box diagonal.
    pub epsilon: f64,
    pub s_min: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig {
            mode: MatchingMode::Bidirectional,
            epsilon: 0.02,
            s_min: 0.3,
        }
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity with zero vectors mapped to 0 instead of an error.
fn cos_or_zero(a: &[f64], b: &[f64]) -> f64 {
    cosine_similarity(a, b).unwrap_or(0.0)
}

/// The box grown by `epsilon` times its diagonal on every face.
pub fn expanded_box(b: &Box3D, epsilon: f64) -> Box3D {
    b.expanded(epsilon * b.diagonal())
}

/// Indices of cloud points inside `b` grown by the relative margin.
pub fn box_contents(cloud: &ScenePointCloud, b: &Box3D, epsilon: f64) -> Vec<usize> {
    let e = expanded_box(b, epsilon);
    cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| e.contains(p))
        .map(|(i, _)| i)
        .collect()
}

/// AABB of the points grown by `epsilon` of its diagonal.
pub fn fitted_box(cloud: &ScenePointCloud, points: &[usize], epsilon: f64) -> Option<Box3D> {
    let b = Box3D::enclosing(points.iter().map(|&i| cloud.positions[i]))?;
    Some(expanded_box(&b, epsilon).with_min_extent(MIN_BOX_EXTENT))
}

fn sorted_unique(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v.dedup();
    v
}

fn check_inputs(cloud: &ScenePointCloud, pb: &PointBranchOutput, bb: &BoxBranchOutput) -> Result<()> {
    if pb.features.len() != pb.groups.len() || bb.features.len() != bb.boxes.len() {
        return Err(Error::DimensionMismatch(
            "features do not line up with groups or boxes".into(),
        ));
    }
    if let (Some(f), Some(g)) = (pb.features.first(), bb.features.first()) {
        if f.len() != g.len() {
            return Err(Error::DimensionMismatch(format!(
                "group features have {} dims, box features {}",
                f.len(),
                g.len()
            )));
        }
    }
    if pb.groups.iter().flatten().any(|&i| i >= cloud.len()) {
        return Err(Error::InvalidInput("point group index out of range".into()));
    }
    if pb.classes > 0 && pb.num_points() != cloud.len() {
        return Err(Error::DimensionMismatch("point logits do not cover the cloud".into()));
    }
    Ok(())
}

/// Turn the two prompt branches into prompt pairs according to `cfg.mode`.
///
/// Pair ids are assigned in emission order: matched pairs in box order, then
/// point-only pairs for groups left without a box.
pub fn bidirectional_match(
    cloud: &ScenePointCloud,
    pb: &PointBranchOutput,
    bb: &BoxBranchOutput,
    cfg: &MatchConfig,
) -> Result<Vec<PromptPair>> {
    check_inputs(cloud, pb, bb)?;
    let eps = cfg.epsilon;
    let sim: Vec<Vec<f64>> = pb
        .features
        .iter()
        .map(|f| bb.features.iter().map(|g| cos_or_zero(f, g)).collect())
        .collect();
    let best_for_group = |g: usize| sim[g].iter().copied().fold(f64::NEG_INFINITY, f64::max).max(-1.0);
    let best_for_box = |b: usize| sim.iter().map(|r| r[b]).fold(f64::NEG_INFINITY, f64::max).max(-1.0);

    let mut pairs: Vec<PromptPair> = Vec::new();
    let mut push = |points: Vec<usize>, bbox: Box3D, score: f64, source: PairSource| {
        let id = pairs.len() as u32;
        pairs.push(PromptPair {
            pair_id: id,
            points,
            bbox,
            score,
            source,
        });
    };

    if cfg.mode == MatchingMode::None {
        for (g, group) in pb.groups.iter().enumerate() {
            let points = sorted_unique(group.clone());
            if let Some(bbox) = fitted_box(cloud, &points, eps) {
                let score = if bb.boxes.is_empty() { 0.0 } else { best_for_group(g) };
                push(points, bbox, score, PairSource::Group { group: g });
            }
        }
        for (b, bbox) in bb.boxes.iter().enumerate() {
            let points = box_contents(cloud, bbox, eps);
            if !points.is_empty() {
                let score = if pb.groups.is_empty() { 0.0 } else { best_for_box(b) };
                push(points, *bbox, score, PairSource::Box { boxed: b });
            }
        }
        return Ok(pairs);
    }

    let forward = if pb.groups.is_empty() || bb.boxes.is_empty() {
        Vec::new()
    } else {
        bipartite_match(&sim)?
    };
    let mut group_has_box = vec![false; pb.groups.len()];
    for &(g, _) in &forward {
        group_has_box[g] = true;
    }

    match cfg.mode {
        MatchingMode::None => unreachable!(),
        MatchingMode::Forward => {
            let mut by_box = forward.clone();
            by_box.sort_by_key(|&(_, b)| b);
            for (g, b) in by_box {
                let points = box_contents(cloud, &bb.boxes[b], eps);
                let score = sim[g][b];
                if !points.is_empty() && score >= cfg.s_min {
                    push(points, bb.boxes[b], score, PairSource::Matched { group: g, boxed: b });
                }
            }
        }
        MatchingMode::Reverse | MatchingMode::Bidirectional => {
            // Forward sets: what each box holds, for the boxes that were matched
            // (reverse-only matching uses every box).
            let mut boxes: Vec<(usize, Option<usize>)> = if cfg.mode == MatchingMode::Reverse {
                (0..bb.boxes.len()).map(|b| (b, None)).collect()
            } else {
                forward.iter().map(|&(g, b)| (b, Some(g))).collect()
            };
            boxes.sort_by_key(|&(b, _)| b);
            if !boxes.is_empty() {
                let contents: Vec<Vec<usize>> = boxes
                    .iter()
                    .map(|&(b, _)| box_contents(cloud, &bb.boxes[b], eps))
                    .collect();
                let rev: Vec<Vec<f64>> = contents
                    .iter()
                    .map(|c| {
                        let f = pb.pooled(c);
                        pb.features.iter().map(|g| cos_or_zero(&f, g)).collect()
                    })
                    .collect();
                for (row, g2) in bipartite_match(&rev)? {
                    let (b, fwd) = boxes[row];
                    let r = rev[row][g2];
                    if cfg.mode == MatchingMode::Reverse {
                        let points = sorted_unique(pb.groups[g2].clone());
                        if r >= cfg.s_min {
                            push(points, bb.boxes[b], r, PairSource::Matched { group: g2, boxed: b });
                        }
                        continue;
                    }
                    let score = 0.5 * (sim[fwd.expect("bidirectional rows are forward matches")][b] + r);
                    let inside = expanded_box(&bb.boxes[b], eps);
                    let kept: Vec<usize> = sorted_unique(
                        pb.groups[g2]
                            .iter()
                            .copied()
                            .filter(|&i| inside.contains(&cloud.positions[i]))
                            .collect(),
                    );
                    if kept.is_empty() || score < cfg.s_min {
                        continue;
                    }
                    let bbox = fitted_box(cloud, &kept, eps).expect("non-empty");
                    push(kept, bbox, score, PairSource::Matched { group: g2, boxed: b });
                }
            }
        }
    }

    for (g, group) in pb.groups.iter().enumerate() {
        if group_has_box[g] {
            continue;
        }
        let points = sorted_unique(group.clone());
        let bbox = fitted_box(cloud, &points, eps).expect("groups are non-empty");
        let score = if bb.boxes.is_empty() { 0.0 } else { best_for_group(g) };
        push(points, bbox, score, PairSource::Group { group: g });
    }
    Ok(pairs)
}
