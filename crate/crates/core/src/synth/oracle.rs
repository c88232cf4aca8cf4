//! Ground-truth answering stand-ins for the prompt branches and the 2D segmenter.

use std::collections::HashMap;
use std::sync::Arc;

use super::noise::{NoiseKind, NoiseModel, NoisyBoxBackend, NoisyPointBackend, NoisySegmenter};
use super::GroundTruth;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::prompts::{
    normalized, BoxBranchOutput, BoxPromptBackend, DescriptorFrame, PointBranchOutput, PointPromptBackend,
    PromptBackendSpec, PromptRegistry,
};
use crate::refinement::morphology::boundary_distance;
use crate::refinement::{FramePrompt, Segmenter, SegmenterRegistry, SegmenterSpec};
use crate::scene_model::{BinaryMask, Box3D, PosedFrame, ScenePointCloud, Vec3};

use super::ShapeKind;

pub const ORACLE_KIND: &str = "oracle";

/// Pixels of slack around the prompt box before it clips the oracle mask.
const BOX_SLACK: f64 = 2.0;

fn descriptor_frame(cloud: &ScenePointCloud) -> DescriptorFrame {
    DescriptorFrame::for_cloud(cloud, ShapeKind::ALL.len())
}

fn instance_boxes(cloud: &ScenePointCloud, truth: &GroundTruth) -> Vec<Option<Box3D>> {
    truth
        .labels
        .instances()
        .iter()
        .map(|inst| Box3D::enclosing(inst.iter().map(|&i| cloud.positions[i])))
        .collect()
}

fn shape_of(truth: &GroundTruth, k: usize) -> Option<usize> {
    truth.shapes.get(k).map(|s| s.index())
}

/// Point branch answering with the ground-truth instances. Every point's
/// logit row is the geometry descriptor of its instance; clutter points get
/// the descriptor of a zero-size object at their own position.
pub struct OraclePointBackend {
    truth: Arc<GroundTruth>,
}

impl OraclePointBackend {
    pub fn new(truth: Arc<GroundTruth>) -> Self {
        OraclePointBackend { truth }
    }
}

impl PointPromptBackend for OraclePointBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<PointBranchOutput> {
        let truth = &self.truth;
        if truth.labels.len() != cloud.len() {
            return Err(Error::DimensionMismatch("ground truth does not cover the cloud".into()));
        }
        let frame = descriptor_frame(cloud);
        let boxes = instance_boxes(cloud, truth);
        let inst_desc: Vec<Vec<f64>> = boxes
            .iter()
            .enumerate()
            .map(|(k, b)| match b {
                Some(b) => frame.describe(&b.center, &b.size, shape_of(truth, k)),
                None => vec![0.0; frame.dim()],
            })
            .collect();
        let classes = frame.dim();
        let mut logits = Vec::with_capacity(cloud.len() * classes);
        for (i, &l) in truth.labels.labels.iter().enumerate() {
            if l == 0 {
                logits.extend(frame.describe(&cloud.positions[i], &Vec3::zeros(), None));
            } else {
                logits.extend_from_slice(&inst_desc[l as usize - 1]);
            }
        }
        let groups: Vec<Vec<usize>> = truth.labels.instances().into_iter().filter(|g| !g.is_empty()).collect();
        PointBranchOutput::from_logits(classes, logits, groups)
    }
}

/// Box branch answering with tight ground-truth AABBs; the descriptor of a
/// box is computed from the box itself, so perturbed boxes get perturbed
/// descriptors.
pub struct OracleBoxBackend {
    truth: Arc<GroundTruth>,
}

impl OracleBoxBackend {
    pub fn new(truth: Arc<GroundTruth>) -> Self {
        OracleBoxBackend { truth }
    }

    pub fn box_feature(cloud: &ScenePointCloud, b: &Box3D) -> Vec<f64> {
        let frame = descriptor_frame(cloud);
        normalized(frame.describe(&b.center, &b.size, b.label_hint.map(|h| h as usize)))
    }
}

impl BoxPromptBackend for OracleBoxBackend {
    fn run(&self, cloud: &ScenePointCloud) -> Result<BoxBranchOutput> {
        if self.truth.labels.len() != cloud.len() {
            return Err(Error::DimensionMismatch("ground truth does not cover the cloud".into()));
        }
        let boxes: Vec<Box3D> = instance_boxes(cloud, &self.truth)
            .into_iter()
            .enumerate()
            .filter_map(|(k, b)| {
                b.map(|b| Box3D {
                    label_hint: shape_of(&self.truth, k).map(|s| s as u32),
                    ..b.with_min_extent(crate::matching::MIN_BOX_EXTENT)
                })
            })
            .collect();
        let features = boxes.iter().map(|b| Self::box_feature(cloud, b)).collect();
        Ok(BoxBranchOutput { boxes, features })
    }
}

/// Segmenter answering with the ground-truth region under the prompt pixel,
/// clipped to the prompt box.
///
/// Given a prior mask it moves toward that region: half of the wrong pixels
/// (deepest first, by distance to the region boundary) are corrected per call.
/// With `drift > 0` each conditioned call also loses that fraction of the
/// region's one-pixel boundary band, and lost band pixels are not restored,
/// so repeated feedback slowly erodes the mask.
pub struct OracleSegmenter {
    truth: Arc<GroundTruth>,
    frame_index: HashMap<u32, usize>,
    drift: f64,
    seed: u64,
}

impl OracleSegmenter {
    /// `frame_ids[k]` is the frame whose id image is `truth.id_images[k]`.
    pub fn new(truth: Arc<GroundTruth>, frame_ids: &[u32], drift: f64, seed: u64) -> Result<Self> {
        if truth.id_images.len() != frame_ids.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} id images for {} frames",
                truth.id_images.len(),
                frame_ids.len()
            )));
        }
        Ok(OracleSegmenter {
            frame_index: frame_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect(),
            truth,
            drift,
            seed,
        })
    }

    /// The clean answer: the prompted instance's pixels inside the (slackened) box.
    pub fn target(&self, prompt: &FramePrompt, frame: &PosedFrame) -> Result<BinaryMask> {
        let k = *self
            .frame_index
            .get(&frame.frame_id)
            .ok_or_else(|| Error::backend(ORACLE_KIND, format!("no id image for frame {}", frame.frame_id)))?;
        let ids = &self.truth.id_images[k];
        if ids.width() != frame.width() || ids.height() != frame.height() {
            return Err(Error::DimensionMismatch("id image does not match the frame".into()));
        }
        let (row, col) = prompt.row_col();
        if row >= ids.height() || col >= ids.width() {
            return Err(Error::InvalidInput("prompt pixel outside the frame".into()));
        }
        let id = *ids.get(row, col);
        let b = prompt.box2d;
        let (u0, v0) = (b.u - BOX_SLACK, b.v - BOX_SLACK);
        let (u1, v1) = (b.u + b.w + BOX_SLACK, b.v + b.h + BOX_SLACK);
        Ok(Grid::from_fn(ids.width(), ids.height(), |r, c| {
            id != 0
                && *ids.get(r, c) == id
                && (c as f64) >= u0
                && (c as f64) <= u1
                && (r as f64) >= v0
                && (r as f64) <= v1
        }))
    }

    fn refine(&self, prompt: &FramePrompt, prior: &BinaryMask, target: &BinaryMask) -> BinaryMask {
        let dist = boundary_distance(target);
        let (w, h) = (target.width(), target.height());
        // The band is the region's outermost ring of pixels.
        let band = |i: usize| target.data()[i] && dist.data()[i] == 1;
        let mut wrong: Vec<(u32, usize)> = (0..w * h)
            .filter(|&i| {
                let (p, t) = (prior.data()[i], target.data()[i]);
                p != t && !(self.drift > 0.0 && !p && band(i))
            })
            .map(|i| (dist.data()[i], i))
            .collect();
        wrong.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        let fix = wrong.len().div_ceil(2);
        let mut out = prior.clone();
        for &(_, i) in &wrong[..fix] {
            out.data_mut()[i] = target.data()[i];
        }
        if self.drift > 0.0 {
            use rand::{Rng, SeedableRng};
            let key = prior.data().iter().filter(|v| **v).count() as u64;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(super::mix_seed(
                self.seed,
                ((prompt.frame_id as u64) << 40) ^ ((prompt.pair_id as u64) << 20) ^ key,
            ));
            for i in 0..w * h {
                if out.data()[i] && band(i) && rng.random_bool(self.drift.min(1.0)) {
                    out.data_mut()[i] = false;
                }
            }
        }
        out
    }
}

impl Segmenter for OracleSegmenter {
    fn segment(&self, prompt: &FramePrompt, frame: &PosedFrame, prior: Option<&BinaryMask>) -> Result<BinaryMask> {
        let target = self.target(prompt, frame)?;
        Ok(match prior {
            None => target,
            Some(p) => {
                if !p.same_shape(&target) {
                    return Err(Error::DimensionMismatch("prior mask does not match the frame".into()));
                }
                self.refine(prompt, p, &target)
            }
        })
    }
}

fn noise_from_params(spec: &PromptBackendSpec, kinds: &[NoiseKind], seed: u64) -> Result<Vec<NoiseModel>> {
    let mut out = Vec::new();
    for &kind in kinds {
        let m = spec.f64_param(kind.name(), 0.0)?;
        if m < 0.0 || !m.is_finite() {
            return Err(Error::Config(format!(
                "noise `{}` must be a non-negative number",
                kind.name()
            )));
        }
        if m > 0.0 {
            out.push(NoiseModel::new(kind, m, seed)?);
        }
    }
    Ok(out)
}

/// Register `"oracle"` point, box and segmenter backends answering from
/// `truth`. Backend parameters name noise kinds with their magnitudes
/// (e.g. `{"group_dropout": 0.15, "seed": 3}`).
pub fn register_oracles(
    prompts: &mut PromptRegistry,
    segmenters: &mut SegmenterRegistry,
    truth: Arc<GroundTruth>,
    frame_ids: Vec<u32>,
) {
    let t = truth.clone();
    prompts.register_point(ORACLE_KIND, move |spec| {
        let seed = spec.u64_param("seed", 0)?;
        let models = noise_from_params(spec, &[NoiseKind::GroupDropout, NoiseKind::PointDisplacement], seed)?;
        let inner: Box<dyn PointPromptBackend> = Box::new(OraclePointBackend::new(t.clone()));
        Ok(Box::new(NoisyPointBackend::new(inner, models)))
    });
    let t = truth.clone();
    prompts.register_box(ORACLE_KIND, move |spec| {
        let seed = spec.u64_param("seed", 0)?;
        let models = noise_from_params(spec, &[NoiseKind::BoxJitter, NoiseKind::SpuriousBoxes], seed)?;
        let inner: Box<dyn BoxPromptBackend> = Box::new(OracleBoxBackend::new(t.clone()));
        Ok(Box::new(
            NoisyBoxBackend::new(inner, models).with_features(OracleBoxBackend::box_feature),
        ))
    });
    segmenters.register(ORACLE_KIND, move |spec: &SegmenterSpec| {
        let seed = spec.u64_param("seed", 0)?;
        let drift = spec.f64_param("drift", 0.0)?;
        if !(0.0..=1.0).contains(&drift) {
            return Err(Error::Config("oracle `drift` must be in [0, 1]".into()));
        }
        let models = noise_from_params(
            spec,
            &[NoiseKind::MaskDilation, NoiseKind::MaskErosion, NoiseKind::Speckle],
            seed,
        )?;
        let inner: Arc<dyn Segmenter> = Arc::new(OracleSegmenter::new(truth.clone(), &frame_ids, drift, seed)?);
        Ok(if models.is_empty() {
            inner
        } else {
            Arc::new(NoisySegmenter::new(inner, models))
        })
    });
}
