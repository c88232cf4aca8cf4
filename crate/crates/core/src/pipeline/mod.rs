//! End-to-end orchestration: prompts, matching, per-frame refinement,
//! affinity merging and label propagation, with stage checkpoints and timing.

mod ablation;
mod config;

pub use ablation::{run_ablation, AblationReport, AblationSuite, NoisePreset, SuiteCheck};
pub use config::{Components, PipelineConfig};

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalResult};
use crate::io::{read_json, write_json, InstanceRecord, LabelSidecar};
use crate::matching::{bidirectional_match, box_contents, PromptPair};
use crate::merging::{
    affinity_merge, aggregate_affinity, frame_affinity, label_distribution_at, merge_neighbors, propagate_regions,
    set_medoid, AffinityMatrix, FrameAffinity,
};
use crate::projection::visible_projection;
use crate::prompts::{box_branch, point_branch, BoxBranchOutput, PointBranchOutput, PromptBackendSpec, PromptRegistry};
use crate::refinement::{
    iterative_post_refinement, paint_masks, project_prompt_pair, FramePrompt, RleMask, SegmenterRegistry,
};
use crate::scene_model::{BinaryMask, InstanceLabeling3D, PosedFrame, ScenePointCloud, Vec3};
use crate::synth::{mix_seed, register_oracles, GroundTruth};

/// Backend registries used by a run.
#[derive(Clone, Default)]
pub struct Backends {
    pub prompts: PromptRegistry,
    pub segmenters: SegmenterRegistry,
}

impl Backends {
    /// Registries with the `"oracle"` kinds answering from `truth`.
    pub fn with_oracles(truth: Arc<GroundTruth>, frames: &[PosedFrame]) -> Self {
        let mut b = Backends::default();
        register_oracles(
            &mut b.prompts,
            &mut b.segmenters,
            truth,
            frames.iter().map(|f| f.frame_id).collect(),
        );
        b
    }
}

/// Stage outputs are written to `dir`; with `resume` set, existing ones are
/// loaded instead of recomputed.
#[derive(Clone, Debug)]
pub struct Checkpoints {
    pub dir: PathBuf,
    pub resume: bool,
}

impl Checkpoints {
    fn stage<T, F>(this: Option<&Self>, name: &'static str, compute: F) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Result<T>,
    {
        let Some(ck) = this else { return compute() };
        let path = ck.dir.join(format!("{name}.json"));
        if ck.resume && path.exists() {
            return read_json(&path, "checkpoint");
        }
        let value = compute()?;
        std::fs::create_dir_all(&ck.dir).map_err(|e| Error::io(&ck.dir, e))?;
        write_json(&path, &value, "checkpoint")?;
        Ok(value)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub stages: Vec<(String, f64)>,
    /// Wall-clock seconds for the whole run.
    pub total: f64,
}

impl StageTimings {
    fn record(&mut self, name: &str, d: Duration) {
        self.stages.push((name.to_string(), d.as_secs_f64()));
    }

    pub fn report(&self) -> String {
        let mut out = String::from("stage          seconds\n");
        for (name, s) in &self.stages {
            out.push_str(&format!("{name:<14} {s:>8.3}\n"));
        }
        let sum: f64 = self.stages.iter().map(|s| s.1).sum();
        out.push_str(&format!(
            "{:<14} {sum:>8.3}\n{:<14} {:>8.3}\n",
            "sum", "wall", self.total
        ));
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BranchOutputs {
    point: PointBranchOutput,
    boxes: BranchBoxes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
struct BranchBoxes(BoxBranchOutput);

/// Final masks of one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMasks {
    pub frame_id: u32,
    pub prompts: Vec<FramePrompt>,
    pub masks: Vec<RleMask>,
    /// Refinement calls per prompt.
    pub iterations: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Regions {
    /// Per pair; 0 when the pair was dropped.
    region: Vec<u32>,
    lifted: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub labels: InstanceLabeling3D,
    /// Confidence per instance, indexed by `label - 1`.
    pub scores: Vec<f64>,
    pub sidecar: LabelSidecar,
    pub pairs: Vec<PromptPair>,
    pub eval: Option<EvalResult>,
    pub timings: StageTimings,
}

fn seeded(spec: &PromptBackendSpec, seed: u64, salt: u64) -> PromptBackendSpec {
    let mut s = spec.clone();
    s.params
        .entry("seed".into())
        .or_insert_with(|| serde_json::Value::from(mix_seed(seed, salt)));
    s
}

/// Pixel index of each point in `frame`, or `u32::MAX` when not visible.
fn visibility(cloud: &ScenePointCloud, frame: &PosedFrame, depth_tol: f64) -> Vec<u32> {
    let w = frame.width();
    cloud
        .positions
        .iter()
        .map(|p| match visible_projection(p, frame, depth_tol) {
            Some(proj) => {
                let (r, c) = proj.pixel(w, frame.height());
                (r * w + c) as u32
            }
            None => u32::MAX,
        })
        .collect()
}

fn refine_frame(
    frame: &PosedFrame,
    cloud: &ScenePointCloud,
    pairs: &[PromptPair],
    cfg: &PipelineConfig,
    backends: &Backends,
) -> Result<FrameMasks> {
    let seg = backends.segmenters.build(&seeded(&cfg.segmenter, cfg.seed, 3))?;
    let strategy = cfg.iteration();
    let mut out = FrameMasks {
        frame_id: frame.frame_id,
        prompts: Vec::new(),
        masks: Vec::new(),
        iterations: Vec::new(),
    };
    for pair in pairs {
        let Some(prompt) = project_prompt_pair(pair, cloud, frame, cfg.depth_tol, cfg.min_visible) else {
            continue;
        };
        let refined = iterative_post_refinement(&prompt, frame, &seg, strategy)?;
        out.prompts.push(prompt);
        out.masks.push(RleMask::encode(&refined.mask));
        out.iterations.push(refined.iterations);
    }
    Ok(out)
}

fn frame_affinities(frame: &PosedFrame, fm: &FrameMasks, masks: &[BinaryMask], patch: usize) -> Result<FrameAffinity> {
    let painted = paint_masks(
        frame,
        &fm.prompts
            .iter()
            .zip(masks)
            .map(|(p, m)| (p.pair_id, m.clone()))
            .collect::<Vec<_>>(),
    );
    let mut dists = Vec::new();
    for p in &fm.prompts {
        let (row, col) = p.row_col();
        let d = label_distribution_at(p.pair_id as usize, &painted, row, col, patch)?;
        if d.is_valid() {
            dists.push(d);
        }
    }
    let mut entries = Vec::new();
    for a in 0..dists.len() {
        for b in a + 1..dists.len() {
            entries.push((
                dists[a].point_id,
                dists[b].point_id,
                frame_affinity(&dists[a], &dists[b])?,
                1.0,
            ));
        }
    }
    Ok(FrameAffinity { entries })
}

/// Points of `pair` that its masks cover in at least `vote` of the frames
/// where both are seen; candidates are the pair's points and its box contents,
/// and points never assessed keep their original membership.
fn lift_pair(
    pair: &PromptPair,
    cloud: &ScenePointCloud,
    views: &[(&[u32], BinaryMask)],
    epsilon: f64,
    vote: f64,
) -> Vec<usize> {
    let mut cand = box_contents(cloud, &pair.bbox, epsilon);
    cand.extend_from_slice(&pair.points);
    cand.sort_unstable();
    cand.dedup();
    cand.into_iter()
        .filter(|&i| {
            let (mut inside, mut total) = (0usize, 0usize);
            for (vis, mask) in views {
                let px = vis[i];
                if px != u32::MAX {
                    total += 1;
                    inside += usize::from(mask.data()[px as usize]);
                }
            }
            if total == 0 {
                pair.points.binary_search(&i).is_ok()
            } else {
                inside as f64 >= vote * total as f64
            }
        })
        .collect()
}

fn in_stage<T>(r: Result<T>, stage: &'static str) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Run every stage on a scene. `gt` enables evaluation.
pub fn run_pipeline(
    cloud: &ScenePointCloud,
    frames: &[PosedFrame],
    gt: Option<&InstanceLabeling3D>,
    cfg: &PipelineConfig,
    backends: &Backends,
    checkpoints: Option<&Checkpoints>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if let Some(g) = gt {
        if g.len() != cloud.len() {
            return Err(Error::DimensionMismatch("ground truth does not cover the cloud".into()));
        }
    }
    pool(cfg.threads)?.install(|| run_stages(cloud, frames, gt, cfg, backends, checkpoints))
}

fn run_stages(
    cloud: &ScenePointCloud,
    frames: &[PosedFrame],
    gt: Option<&InstanceLabeling3D>,
    cfg: &PipelineConfig,
    backends: &Backends,
    ck: Option<&Checkpoints>,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    let mut timings = StageTimings::default();
    let mut clock = Instant::now();
    let mut lap = |timings: &mut StageTimings, name: &str| {
        let now = Instant::now();
        log::debug!("stage {name}: {:.3} s", (now - clock).as_secs_f64());
        timings.record(name, now - clock);
        clock = now;
    };

    let branches = in_stage(
        Checkpoints::stage(ck, "prompts", || {
            let mut point_spec = seeded(&cfg.point_backend, cfg.seed, 1);
            if point_spec.params.get("multiview").and_then(|v| v.as_bool()) == Some(true) {
                let v = cfg.view_params();
                point_spec
                    .params
                    .entry("views".into())
                    .or_insert_with(|| serde_json::to_value(v).expect("view params serialize"));
            }
            let point = point_branch(cloud, &point_spec, &backends.prompts)?;
            let boxes = box_branch(cloud, &seeded(&cfg.box_backend, cfg.seed, 2), &backends.prompts)?;
            Ok(BranchOutputs {
                point,
                boxes: BranchBoxes(boxes),
            })
        }),
        "prompts",
    )?;
    lap(&mut timings, "prompts");

    let pairs: Vec<PromptPair> = in_stage(
        Checkpoints::stage(ck, "pairs", || {
            bidirectional_match(cloud, &branches.point, &branches.boxes.0, &cfg.match_config())
        }),
        "matching",
    )?;
    lap(&mut timings, "matching");

    let frame_masks: Vec<FrameMasks> = in_stage(
        Checkpoints::stage(ck, "masks", || {
            frames
                .par_iter()
                .map(|f| refine_frame(f, cloud, &pairs, cfg, backends))
                .collect::<Result<Vec<_>>>()
        }),
        "refinement",
    )?;
    let decoded: Vec<Vec<BinaryMask>> = in_stage(
        frame_masks
            .iter()
            .map(|fm| fm.masks.iter().map(RleMask::decode).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>(),
        "refinement",
    )?;
    lap(&mut timings, "refinement");

    let affinity: AffinityMatrix = in_stage(
        Checkpoints::stage(ck, "affinity", || {
            if !cfg.components.am {
                return Ok(AffinityMatrix::new(pairs.len()));
            }
            let per_frame = frames
                .par_iter()
                .zip(&frame_masks)
                .zip(&decoded)
                .map(|((f, fm), masks)| frame_affinities(f, fm, masks, cfg.patch))
                .collect::<Result<Vec<_>>>()?;
            Ok(aggregate_affinity(pairs.len(), &per_frame))
        }),
        "affinity",
    )?;
    lap(&mut timings, "affinity");

    let regions: Regions = in_stage(
        Checkpoints::stage(ck, "regions", || {
            let vis: Vec<Vec<u32>> = frames.par_iter().map(|f| visibility(cloud, f, cfg.depth_tol)).collect();
            let lifted: Vec<Vec<usize>> = pairs
                .par_iter()
                .enumerate()
                .map(|(p, pair)| {
                    let views: Vec<(&[u32], BinaryMask)> = frame_masks
                        .iter()
                        .enumerate()
                        .flat_map(|(f, fm)| {
                            fm.prompts
                                .iter()
                                .position(|pr| pr.pair_id as usize == p)
                                .map(|k| (vis[f].as_slice(), decoded[f][k].clone()))
                        })
                        .collect();
                    lift_pair(pair, cloud, &views, cfg.epsilon, cfg.lift_vote)
                })
                .collect();
            let mut region: Vec<u32> = if cfg.components.am {
                let anchors: Vec<Vec3> = pairs
                    .iter()
                    .map(|p| set_medoid(cloud, &p.points).unwrap_or(p.bbox.center))
                    .collect();
                let nb = merge_neighbors(&anchors, cfg.knn, &affinity);
                affinity_merge(&affinity, &nb, cfg.tau)
            } else {
                (1..=pairs.len() as u32).collect()
            };
            for (r, l) in region.iter_mut().zip(&lifted) {
                if l.is_empty() {
                    *r = 0;
                }
            }
            Ok(Regions { region, lifted })
        }),
        "merging",
    )?;
    lap(&mut timings, "merging");

    let anchors: Vec<Vec3> = regions
        .lifted
        .par_iter()
        .zip(&pairs)
        .map(|(l, p)| set_medoid(cloud, l).unwrap_or(p.bbox.center))
        .collect();
    let raw = in_stage(
        propagate_regions(cloud.len(), &regions.lifted, &regions.region, &anchors, cloud),
        "propagation",
    )?;
    let labels = InstanceLabeling3D::from_raw(&raw);
    // Compaction keeps the order of region ids, so the k-th surviving region is label k + 1.
    let mut present: Vec<u32> = raw.iter().copied().filter(|r| *r != 0).collect();
    present.sort_unstable();
    present.dedup();
    let mut instances = Vec::with_capacity(present.len());
    let sizes = {
        let mut s = vec![0usize; labels.num_instances as usize];
        labels
            .labels
            .iter()
            .filter(|l| **l > 0)
            .for_each(|l| s[*l as usize - 1] += 1);
        s
    };
    for (k, r) in present.iter().enumerate() {
        let members: Vec<usize> = (0..pairs.len()).filter(|&p| regions.region[p] == *r).collect();
        let score = members
            .iter()
            .map(|&p| pairs[p].score)
            .fold(f64::NEG_INFINITY, f64::max);
        instances.push(InstanceRecord {
            label: k as u32 + 1,
            num_points: sizes[k],
            score,
            pairs: members.iter().map(|&p| pairs[p].pair_id).collect(),
        });
    }
    let sidecar = LabelSidecar {
        num_points: cloud.len(),
        num_instances: labels.num_instances,
        instances,
    };
    let scores = sidecar.scores();
    lap(&mut timings, "propagation");

    let eval = match gt {
        Some(g) => Some(in_stage(evaluate(&labels, &scores, g), "evaluation")?),
        None => None,
    };
    lap(&mut timings, "evaluation");
    timings.total = start.elapsed().as_secs_f64();

    Ok(PipelineOutput {
        labels,
        scores,
        sidecar,
        pairs,
        eval,
        timings,
    })
}

/// Write `labels.bin`, `labels.json`, `colored.ply`, `report.txt` and, with
/// an evaluation, `eval.json` into `dir`.
pub fn write_outputs(dir: &Path, cloud: &ScenePointCloud, out: &PipelineOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::io::write_u32_file(&dir.join("labels.bin"), &out.labels.labels)?;
    crate::io::write_ply_file(
        &dir.join("colored.ply"),
        &crate::io::colorize(cloud, &out.labels)?,
        crate::io::PlyFormat::BinaryLittleEndian,
    )?;
    out.sidecar.write(&dir.join("labels.json"))?;
    let mut report = out.timings.report();
    if let Some(e) = &out.eval {
        write_json(&dir.join("eval.json"), e, "evaluation")?;
        report.push_str(&format!(
            "\n{}",
            crate::evaluation::format_table(&[("scene".to_string(), crate::evaluation::Summary::of(e))])
        ));
    }
    std::fs::write(dir.join("report.txt"), report).map_err(|e| Error::io(dir.join("report.txt"), e))
}
