//! Per-frame prompts, the promptable segmenter interface, and iterative
//! post-refinement of the produced masks.

mod exchange;
pub mod morphology;

pub use exchange::{ExchangeSegmenter, SegmentRequest, SegmentResponse};
pub use morphology::RleMask;

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::matching::PromptPair;
use crate::medoid::medoid;
use crate::projection::{project_box, visible_projection};
use crate::prompts::PromptBackendSpec;
use crate::scene_model::{BinaryMask, Box2D, Mask2D, PosedFrame, ScenePointCloud};

/// Segmenter selection uses the same shape as prompt backends.
pub type SegmenterSpec = PromptBackendSpec;

/// Fewer visible points than this and a pair is not prompted in a frame.
pub const DEFAULT_MIN_VISIBLE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePrompt {
    pub pair_id: u32,
    pub frame_id: u32,
    /// Representative pixel `(u, v)` = `(col, row)`.
    pub pixel: (u32, u32),
    pub box2d: Box2D,
}

impl FramePrompt {
    pub fn row_col(&self) -> (usize, usize) {
        (self.pixel.1 as usize, self.pixel.0 as usize)
    }
}

/// Prompt for `pair` in `frame` from the projections of its visible points.
///
/// `visible` yields `(u, v)` for every pair point that passes the depth test.
pub fn prompt_from_visible(
    pair: &PromptPair,
    frame: &PosedFrame,
    visible: &[[f64; 2]],
    min_visible: usize,
) -> Option<FramePrompt> {
    if visible.len() < min_visible.max(1) {
        return None;
    }
    let box2d = project_box(&pair.bbox, frame)?;
    let m = visible[medoid(visible)?];
    let col = (m[0].round() as i64).clamp(0, frame.width() as i64 - 1) as u32;
    let row = (m[1].round() as i64).clamp(0, frame.height() as i64 - 1) as u32;
    Some(FramePrompt {
        pair_id: pair.pair_id,
        frame_id: frame.frame_id,
        pixel: (col, row),
        box2d,
    })
}

/// Project a pair into a frame; `None` when fewer than `min_visible` of its
/// points pass the depth test or its box misses the image.
pub fn project_prompt_pair(
    pair: &PromptPair,
    cloud: &ScenePointCloud,
    frame: &PosedFrame,
    depth_tol: f64,
    min_visible: usize,
) -> Option<FramePrompt> {
    let visible: Vec<[f64; 2]> = pair
        .points
        .iter()
        .filter_map(|&i| visible_projection(&cloud.positions[i], frame, depth_tol))
        .map(|p| [p.u, p.v])
        .collect();
    prompt_from_visible(pair, frame, &visible, min_visible)
}

pub trait Segmenter: Send + Sync {
    /// Binary mask for the prompt, optionally conditioned on a previous mask.
    fn segment(&self, prompt: &FramePrompt, frame: &PosedFrame, prior: Option<&BinaryMask>) -> Result<BinaryMask>;

    /// Whether concurrent calls are safe; serial segmenters are called under a lock.
    fn is_concurrent(&self) -> bool {
        true
    }
}

/// Wraps a segmenter so calls are serialized when it asks for it.
pub struct SegmenterHandle {
    inner: Arc<dyn Segmenter>,
    lock: Option<Mutex<()>>,
}

impl SegmenterHandle {
    pub fn new(inner: Arc<dyn Segmenter>) -> Self {
        let lock = (!inner.is_concurrent()).then(|| Mutex::new(()));
        SegmenterHandle { inner, lock }
    }

    /// Calls the backend and checks the mask shape against the frame.
    pub fn segment(&self, prompt: &FramePrompt, frame: &PosedFrame, prior: Option<&BinaryMask>) -> Result<BinaryMask> {
        let _guard = self.lock.as_ref().map(|l| l.lock().unwrap_or_else(|e| e.into_inner()));
        let mask = self.inner.segment(prompt, frame, prior)?;
        if mask.width() != frame.width() || mask.height() != frame.height() {
            return Err(Error::DimensionMismatch(format!(
                "segmenter returned {}x{} for a {}x{} frame",
                mask.width(),
                mask.height(),
                frame.width(),
                frame.height()
            )));
        }
        Ok(mask)
    }
}

type SegmenterFactory = Arc<dyn Fn(&SegmenterSpec) -> Result<Arc<dyn Segmenter>> + Send + Sync>;

/// Maps segmenter kinds to constructors; `"exchange"` is always present.
#[derive(Clone)]
pub struct SegmenterRegistry {
    factories: BTreeMap<String, SegmenterFactory>,
}

impl Default for SegmenterRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl SegmenterRegistry {
    pub fn new() -> Self {
        let mut reg = SegmenterRegistry {
            factories: BTreeMap::new(),
        };
        reg.register("exchange", |spec| Ok(Arc::new(ExchangeSegmenter::from_spec(spec)?)));
        reg
    }

    pub fn register<F>(&mut self, kind: &str, factory: F)
    where
        F: Fn(&SegmenterSpec) -> Result<Arc<dyn Segmenter>> + Send + Sync + 'static,
    {
        self.factories.insert(kind.to_string(), Arc::new(factory));
    }

    pub fn has(&self, kind: &str) -> bool {
        self.factories.contains_key(kind)
    }

    pub fn build(&self, spec: &SegmenterSpec) -> Result<SegmenterHandle> {
        let factory = self
            .factories
            .get(&spec.kind)
            .ok_or_else(|| Error::UnknownBackend(spec.kind.clone()))?;
        Ok(SegmenterHandle::new(factory(spec)?))
    }
}

/// Single segmenter call through a registry.
pub fn segment(
    prompt: &FramePrompt,
    frame: &PosedFrame,
    prior: Option<&BinaryMask>,
    spec: &SegmenterSpec,
    registry: &SegmenterRegistry,
) -> Result<BinaryMask> {
    if prompt.frame_id != frame.frame_id {
        return Err(Error::InvalidInput(format!(
            "prompt for frame {} used on frame {}",
            prompt.frame_id, frame.frame_id
        )));
    }
    registry.build(spec)?.segment(prompt, frame, prior)
}

/// `|cur xor prev| / max(1, |prev|)`.
pub fn change_ratio(prev: &BinaryMask, cur: &BinaryMask) -> f64 {
    morphology::xor_count(prev, cur) as f64 / morphology::area(prev).max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStrategy {
    /// Refine until the change ratio is at most `theta`, at most `max_iter` times.
    Adaptive { theta: f64, max_iter: usize },
    /// Exactly `k` refinements after the initial mask.
    Fixed(usize),
}

impl Default for IterationStrategy {
    fn default() -> Self {
        IterationStrategy::Adaptive {
            theta: 0.05,
            max_iter: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Refined {
    pub mask: BinaryMask,
    /// Number of prior-conditioned calls made.
    pub iterations: usize,
    /// Change ratio after each refinement.
    pub deltas: Vec<f64>,
}

/// Initial segmentation followed by mask-conditioned refinement.
pub fn iterative_post_refinement(
    prompt: &FramePrompt,
    frame: &PosedFrame,
    segmenter: &SegmenterHandle,
    strategy: IterationStrategy,
) -> Result<Refined> {
    let mut mask = segmenter.segment(prompt, frame, None)?;
    let mut deltas = Vec::new();
    let (theta, max_iter) = match strategy {
        IterationStrategy::Adaptive { theta, max_iter } => (theta, max_iter.max(1)),
        IterationStrategy::Fixed(k) => (-1.0, k),
    };
    for _ in 0..max_iter {
        let next = segmenter.segment(prompt, frame, Some(&mask))?;
        let delta = change_ratio(&mask, &next);
        deltas.push(delta);
        mask = next;
        if delta <= theta {
            break;
        }
    }
    Ok(Refined {
        iterations: deltas.len(),
        mask,
        deltas,
    })
}

/// Combine per-pair masks of one frame into a label image (`pair_id + 1`).
/// Larger masks are painted first so smaller ones stay visible on top.
pub fn paint_masks(frame: &PosedFrame, masks: &[(u32, BinaryMask)]) -> Mask2D {
    let mut order: Vec<(usize, usize)> = masks
        .iter()
        .enumerate()
        .map(|(k, (_, m))| (morphology::area(m), k))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut labels = Grid::filled(frame.width(), frame.height(), 0u32);
    for (_, k) in order {
        let (id, m) = &masks[k];
        for (dst, &on) in labels.data_mut().iter_mut().zip(m.data()) {
            if on {
                *dst = id + 1;
            }
        }
    }
    Mask2D {
        frame_id: frame.frame_id,
        labels,
    }
}
