//! Seeded perturbations wrapped around prompt backends and segmenters.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::mix_seed;
use crate::error::{Error, Result};
use crate::prompts::{normalized, BoxBranchOutput, BoxPromptBackend, PointBranchOutput, PointPromptBackend};
use crate::refinement::morphology::{dilate, erode};
use crate::refinement::{FramePrompt, Segmenter};
use crate::scene_model::{BinaryMask, Box3D, PosedFrame, ScenePointCloud, Vec3};

/// Smallest box side after jitter, in metres.
const MIN_JITTER_SIZE: f64 = 0.05;
/// Search margin around a group's box for displacement targets, in metres.
const DISPLACE_MARGIN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Each point group is dropped with probability `m`.
    GroupDropout,
    /// A fraction `m` of each group's points is swapped for nearby foreign points.
    PointDisplacement,
    /// Gaussian noise with std `m` metres on box centers and sizes.
    BoxJitter,
    /// About `m` extra boxes at random places in the scene.
    SpuriousBoxes,
    /// Unconditioned masks are dilated by `m` pixels (fractional part is a coin flip).
    MaskDilation,
    /// Unconditioned masks are eroded by `m` pixels.
    MaskErosion,
    /// Background pixels inside the prompt box switch on with probability `m`.
    Speckle,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 7] = [
        NoiseKind::GroupDropout,
        NoiseKind::PointDisplacement,
        NoiseKind::BoxJitter,
        NoiseKind::SpuriousBoxes,
        NoiseKind::MaskDilation,
        NoiseKind::MaskErosion,
        NoiseKind::Speckle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::GroupDropout => "group_dropout",
            NoiseKind::PointDisplacement => "point_displacement",
            NoiseKind::BoxJitter => "box_jitter",
            NoiseKind::SpuriousBoxes => "spurious_boxes",
            NoiseKind::MaskDilation => "mask_dilation",
            NoiseKind::MaskErosion => "mask_erosion",
            NoiseKind::Speckle => "speckle",
        }
    }

    pub fn from_name(name: &str) -> Option<NoiseKind> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    fn is_probability(self) -> bool {
        matches!(
            self,
            NoiseKind::GroupDropout | NoiseKind::PointDisplacement | NoiseKind::Speckle
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(kind: NoiseKind, magnitude: f64, seed: u64) -> Result<Self> {
        if !magnitude.is_finite() || magnitude < 0.0 || (kind.is_probability() && magnitude > 1.0) {
            return Err(Error::Config(format!(
                "noise `{}` magnitude {magnitude} is out of range",
                kind.name()
            )));
        }
        Ok(NoiseModel { kind, magnitude, seed })
    }

    fn rng(&self, salt: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(self.seed, self.kind as u64), salt))
    }
}

/// Noise model by kind name.
pub fn noise_model(name: &str, magnitude: f64, seed: u64) -> Result<NoiseModel> {
    let kind = NoiseKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown noise kind `{name}`")))?;
    NoiseModel::new(kind, magnitude, seed)
}

/// Integer part plus a coin flip on the fractional part.
fn stochastic_round(m: f64, rng: &mut impl Rng) -> usize {
    let base = m.floor();
    base as usize + usize::from(rng.random_bool((m - base).clamp(0.0, 1.0)))
}

pub struct NoisyPointBackend {
    inner: Box<dyn PointPromptBackend>,
    models: Vec<NoiseModel>,
}

impl NoisyPointBackend {
    pub fn new(inner: Box<dyn PointPromptBackend>, models: Vec<NoiseModel>) -> Self {
        NoisyPointBackend { inner, models }
    }
}

fn displace(cloud: &ScenePointCloud, group: &[usize], frac: f64, rng: &mut impl Rng) -> Vec<usize> {
    let Some(b) = Box3D::enclosing(group.iter().map(|&i| cloud.positions[i])) else {
        return group.to_vec();
    };
    let reach = b.expanded(DISPLACE_MARGIN);
    let mut inside = vec![false; cloud.len()];
    group.iter().for_each(|&i| inside[i] = true);
    let foreign: Vec<usize> = (0..cloud.len())
        .filter(|&i| !inside[i] && reach.contains(&cloud.positions[i]))
        .collect();
    let swap = ((group.len() as f64 * frac).round() as usize).min(foreign.len());
    if swap == 0 {
        return group.to_vec();
    }
    let drop: std::collections::HashSet<usize> = rand::seq::index::sample(rng, group.len(), swap).into_iter().collect();
    let mut out: Vec<usize> = group
        .iter()
        .enumerate()
        .filter(|(k, _)| !drop.contains(k))
        .map(|(_, &i)| i)
        .collect();
    out.extend(
        rand::seq::index::sample(rng, foreign.len(), swap)
            .into_iter()
            .map(|k| foreign[k]),
    );
    out.sort_unstable();
    out
}

impl PointPromptBackend for NoisyPointBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<PointBranchOutput> {
        let mut out = self.inner.run(cloud)?;
        for m in &self.models {
            let mut rng = m.rng(0);
            match m.kind {
                NoiseKind::GroupDropout => {
                    let keep: Vec<bool> = out.groups.iter().map(|_| !rng.random_bool(m.magnitude)).collect();
                    let mut k = keep.iter();
                    out.groups.retain(|_| *k.next().unwrap());
                    let mut k = keep.iter();
                    out.features.retain(|_| *k.next().unwrap());
                }
                NoiseKind::PointDisplacement => {
                    let groups = std::mem::take(&mut out.groups);
                    out.groups = groups
                        .iter()
                        .map(|g| displace(cloud, g, m.magnitude, &mut rng))
                        .collect();
                    if out.classes > 0 && out.num_points() == cloud.len() {
                        out.features = out.groups.iter().map(|g| out.pooled(g)).collect();
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Recomputes a box descriptor after the box was perturbed.
pub type BoxFeatureFn = fn(&ScenePointCloud, &Box3D) -> Vec<f64>;

pub struct NoisyBoxBackend {
    inner: Box<dyn BoxPromptBackend>,
    models: Vec<NoiseModel>,
    features: Option<BoxFeatureFn>,
}

impl NoisyBoxBackend {
    pub fn new(inner: Box<dyn BoxPromptBackend>, models: Vec<NoiseModel>) -> Self {
        NoisyBoxBackend {
            inner,
            models,
            features: None,
        }
    }

    pub fn with_features(mut self, f: BoxFeatureFn) -> Self {
        self.features = Some(f);
        self
    }
}

impl BoxPromptBackend for NoisyBoxBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<BoxBranchOutput> {
        let mut out = self.inner.run(cloud)?;
        let dim = out.features.first().map_or(0, Vec::len);
        for m in &self.models {
            let mut rng = m.rng(0);
            match m.kind {
                NoiseKind::BoxJitter => {
                    let n = Normal::new(0.0, m.magnitude).map_err(|e| Error::Config(e.to_string()))?;
                    for (b, f) in out.boxes.iter_mut().zip(out.features.iter_mut()) {
                        let dc = Vec3::from_fn(|_, _| n.sample(&mut rng));
                        let ds = Vec3::from_fn(|_, _| n.sample(&mut rng));
                        b.center += dc;
                        b.size = (b.size + ds).map(|s| s.max(MIN_JITTER_SIZE));
                        if let Some(feat) = self.features {
                            *f = feat(cloud, b);
                        }
                    }
                }
                NoiseKind::SpuriousBoxes => {
                    let Some((lo, hi)) = cloud.aabb() else { continue };
                    let count = stochastic_round(m.magnitude, &mut rng);
                    for _ in 0..count {
                        let size = Vec3::from_fn(|_, _| rng.random_range(0.3..1.0));
                        let center = Vec3::from_fn(|k, _| {
                            let (a, z) = (lo[k], hi[k]);
                            if z > a {
                                rng.random_range(a..z)
                            } else {
                                a
                            }
                        });
                        let mut b = Box3D::new(center, size);
                        b.label_hint = Some(rng.random_range(0..3));
                        let f = match self.features {
                            Some(feat) => feat(cloud, &b),
                            None => normalized((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
                        };
                        out.boxes.push(b);
                        out.features.push(f);
                    }
                }
                _ => {}
            }
        }
        Ok(out)
    }
}

/// Perturbs masks produced without a prior; conditioned calls pass through so
/// that feedback can correct the damage.
pub struct NoisySegmenter {
    inner: Arc<dyn Segmenter>,
    models: Vec<NoiseModel>,
}

impl NoisySegmenter {
    pub fn new(inner: Arc<dyn Segmenter>, models: Vec<NoiseModel>) -> Self {
        NoisySegmenter { inner, models }
    }
}

impl Segmenter for NoisySegmenter {
    fn segment(&self, prompt: &FramePrompt, frame: &PosedFrame, prior: Option<&BinaryMask>) -> Result<BinaryMask> {
        let mut mask = self.inner.segment(prompt, frame, prior)?;
        if prior.is_some() {
            return Ok(mask);
        }
        let salt = ((prompt.frame_id as u64) << 32) | prompt.pair_id as u64;
        for m in &self.models {
            let mut rng = m.rng(salt);
            match m.kind {
                NoiseKind::MaskDilation => mask = dilate(&mask, stochastic_round(m.magnitude, &mut rng)),
                NoiseKind::MaskErosion => mask = erode(&mask, stochastic_round(m.magnitude, &mut rng)),
                NoiseKind::Speckle => {
                    let (r0, r1, c0, c1) = prompt.box2d.pixel_range(mask.width(), mask.height());
                    for r in r0..r1 {
                        for c in c0..c1 {
                            if !*mask.get(r, c) && rng.random_bool(m.magnitude) {
                                mask.set(r, c, true);
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(mask)
    }

    fn is_concurrent(&self) -> bool {
        self.inner.is_concurrent()
    }
}
