//! Acceptance criteria, one line each. Run with
//! `cargo test -p sceneseg-core --test acceptance`; set `ACCEPTANCE_STRICT=1`
//! to turn any failing criterion into a nonzero exit.

use std::collections::{BTreeMap, HashSet};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sceneseg::evaluation::{average_precision, evaluate, ScoredInstance};
use sceneseg::grid::Grid;
use sceneseg::matching::bipartite_match;
use sceneseg::merging::{
    affinity_merge, aggregate_affinity, frame_affinity, AffinityMatrix, FrameAffinity, LabelDistribution,
};
use sceneseg::pipeline::*;
use sceneseg::refinement::{iterative_post_refinement, FramePrompt, IterationStrategy, Segmenter, SegmenterHandle};
use sceneseg::scene_model::{BinaryMask, Box2D, CameraExtrinsics, CameraIntrinsics, InstanceLabeling3D, PosedFrame};
use sceneseg::synth::*;

const MAP_GAP: f64 = 0.01;
const AFFINITY_TOL: f64 = 1e-12;
const AP_TOL: f64 = 1e-9;
const RUNTIME_BUDGET_S: f64 = 60.0;
const ABLATION_SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// 1

fn oracle_end_to_end() -> Outcome {
    let start = Instant::now();
    let mut worst = 1.0f64;
    let mut points = 0;
    for seed in 0..20u64 {
        let n = 5 + (seed % 6) as usize;
        let spec = SceneSpec {
            num_instances: n,
            points_per_instance: 40_000 / n,
            num_frames: 20,
            ..Default::default()
        };
        let s = generate_scene(&spec, seed).expect("scene");
        points += s.cloud.len();
        let backends = Backends::with_oracles(Arc::new(s.truth.clone()), &s.frames);
        let cfg = PipelineConfig {
            threads: 4,
            ..PipelineConfig::with_backends("oracle")
        };
        let out = run_pipeline(&s.cloud, &s.frames, Some(s.gt()), &cfg, &backends, None).expect("run");
        worst = worst.min(out.eval.expect("gt").map);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst == 1.0 && secs < RUNTIME_BUDGET_S,
        format!(
            "min mAP {worst:.4}, {:.0} points/scene, {secs:.1} s",
            points as f64 / 20.0
        ),
    )
}

// 2

fn threshold_components(a: &AffinityMatrix, tau: f64) -> Vec<usize> {
    let n = a.n;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for (i, j, s, _) in a.iter() {
        if s > tau {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            parent[ri.max(rj)] = ri.min(rj);
        }
    }
    (0..n).map(|i| find(&mut parent, i)).collect()
}

fn same_partition(a: &[u32], b: &[usize]) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter()
        .zip(b)
        .all(|(x, y)| *ab.entry(*x).or_insert(*y) == *y && *ba.entry(*y).or_insert(*x) == *x)
}

fn merge_equivalence() -> Outcome {
    let tau = 0.7;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut cases, mut mismatches) = (0, 0);
    for n in 1..=12usize {
        for _ in 0..500 {
            let blocks = rng.random_range(1..=n);
            let block: Vec<usize> = (0..n).map(|_| rng.random_range(0..blocks)).collect();
            let mut a = AffinityMatrix::new(n);
            for i in 0..n {
                for j in i + 1..n {
                    // Sparse but connected within blocks: chain edges are always present.
                    let chain = block[i] == block[j] && !(i + 1..j).any(|k| block[k] == block[i]);
                    if !chain && rng.random_bool(0.3) {
                        continue;
                    }
                    let s = if block[i] == block[j] {
                        rng.random_range(tau + 0.1..=1.0)
                    } else {
                        rng.random_range(0.0..tau - 0.1)
                    };
                    a.insert(i, j, s, rng.random_range(1..6));
                }
            }
            let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| j != i).collect()).collect();
            let got = affinity_merge(&a, &neighbors, tau);
            cases += 1;
            if !same_partition(&got, &threshold_components(&a, tau)) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in {cases} matrices"))
}

// 3

fn brute_force_assignment(sim: &[Vec<f64>]) -> f64 {
    let (r, c) = (sim.len(), sim[0].len());
    let (small, large) = (r.min(c), r.max(c));
    let at = |s: usize, l: usize| if r <= c { sim[s][l] } else { sim[l][s] };
    let mut best = f64::NEG_INFINITY;
    let mut used = vec![false; large];
    fn go(
        k: usize,
        small: usize,
        large: usize,
        used: &mut [bool],
        acc: f64,
        best: &mut f64,
        at: &dyn Fn(usize, usize) -> f64,
    ) {
        if k == small {
            *best = best.max(acc);
            return;
        }
        for l in 0..large {
            if !used[l] {
                used[l] = true;
                go(k + 1, small, large, used, acc + at(k, l), best, at);
                used[l] = false;
            }
        }
    }
    go(0, small, large, &mut used, 0.0, &mut best, &at);
    best
}

fn hungarian_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bad = 0;
    for _ in 0..1000 {
        let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
        // Integer-valued similarities keep every sum exact.
        let sim: Vec<Vec<f64>> = (0..r)
            .map(|_| (0..c).map(|_| rng.random_range(-100..=100) as f64).collect())
            .collect();
        let m = bipartite_match(&sim).expect("match");
        let total: f64 = m.iter().map(|&(i, j)| sim[i][j]).sum();
        let rows: HashSet<usize> = m.iter().map(|p| p.0).collect();
        let cols: HashSet<usize> = m.iter().map(|p| p.1).collect();
        if m.len() != r.min(c)
            || rows.len() != m.len()
            || cols.len() != m.len()
            || total != brute_force_assignment(&sim)
        {
            bad += 1;
        }
    }
    outcome(
        bad == 0,
        format!("{bad} of 1000 matrices differ from exhaustive search"),
    )
}

// 4

fn random_distribution(rng: &mut ChaCha8Rng, frame_id: u32) -> LabelDistribution {
    let mut probs: Vec<(u32, f64)> = Vec::new();
    for l in 1..=6u32 {
        if rng.random_bool(0.5) {
            probs.push((l, rng.random_range(0.01..1.0)));
        }
    }
    if probs.is_empty() {
        probs.push((rng.random_range(1..=6), 1.0));
    }
    let sum: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= sum);
    LabelDistribution {
        point_id: 0,
        frame_id,
        probs,
    }
}

fn affinity_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (di, dj) = (random_distribution(&mut rng, 0), random_distribution(&mut rng, 0));
        let dense = |d: &LabelDistribution| {
            let mut v = [0.0; 7];
            d.probs.iter().for_each(|(l, p)| v[*l as usize] = *p);
            v
        };
        let (a, b) = (dense(&di), dense(&dj));
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((frame_affinity(&di, &dj).expect("valid") - dot / (na * nb)).abs());
    }
    for _ in 0..1000 {
        let n = rng.random_range(2..6);
        let frames: Vec<FrameAffinity> = (0..rng.random_range(1..5))
            .map(|_| FrameAffinity {
                entries: (0..rng.random_range(0..6))
                    .map(|_| {
                        let i = rng.random_range(0..n);
                        let j = (i + rng.random_range(1..n)) % n;
                        (i, j, rng.random_range(0.0..1.0), rng.random_range(0.0..2.0))
                    })
                    .collect(),
            })
            .collect();
        let m = aggregate_affinity(n, &frames);
        for i in 0..n {
            for j in i + 1..n {
                let (mut num, mut den) = (0.0, 0.0);
                for f in &frames {
                    for &(a, b, s, alpha) in &f.entries {
                        if (a.min(b), a.max(b)) == (i, j) && alpha > 0.0 {
                            num += alpha * s;
                            den += alpha;
                        }
                    }
                }
                match m.get(i, j) {
                    Some((s, _)) if den > 0.0 => worst = worst.max((s - num / den).abs()),
                    None if den == 0.0 => {}
                    _ => worst = f64::INFINITY,
                }
            }
        }
    }
    outcome(worst <= AFFINITY_TOL, format!("max deviation {worst:.2e}"))
}

// 5

struct Oscillating {
    a: BinaryMask,
    b: BinaryMask,
    calls: Mutex<usize>,
}

impl Segmenter for Oscillating {
    fn segment(&self, _: &FramePrompt, _: &PosedFrame, _: Option<&BinaryMask>) -> sceneseg::Result<BinaryMask> {
        let mut c = self.calls.lock().unwrap();
        *c += 1;
        Ok(if *c % 2 == 1 { self.a.clone() } else { self.b.clone() })
    }
}

struct Scripted(Vec<BinaryMask>, Mutex<usize>);

impl Segmenter for Scripted {
    fn segment(&self, _: &FramePrompt, _: &PosedFrame, _: Option<&BinaryMask>) -> sceneseg::Result<BinaryMask> {
        let mut c = self.1.lock().unwrap();
        let m = self.0[(*c).min(self.0.len() - 1)].clone();
        *c += 1;
        Ok(m)
    }
}

fn first_n(n: usize) -> BinaryMask {
    let mut k = 0;
    Grid::from_fn(40, 40, |_, _| {
        k += 1;
        k <= n
    })
}

fn blank_frame() -> PosedFrame {
    PosedFrame {
        frame_id: 0,
        intrinsics: CameraIntrinsics {
            fx: 40.0,
            fy: 40.0,
            cx: 20.0,
            cy: 20.0,
            width: 40,
            height: 40,
        },
        extrinsics: CameraExtrinsics::identity(),
        depth: Grid::filled(40, 40, 1.0),
        color: None,
    }
}

fn refinement_contract() -> Outcome {
    let frame = blank_frame();
    let prompt = FramePrompt {
        pair_id: 0,
        frame_id: 0,
        pixel: (20, 20),
        box2d: Box2D {
            u: 0.0,
            v: 0.0,
            w: 40.0,
            h: 40.0,
        },
    };
    let mut ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let max_iter = rng.random_range(1..=20);
        let na = rng.random_range(50..400);
        // Far enough apart that every change exceeds theta.
        let nb = na + rng.random_range(na / 5 + 1..=na);
        let seg = SegmenterHandle::new(Arc::new(Oscillating {
            a: first_n(na),
            b: first_n(nb.min(1600)),
            calls: Mutex::new(0),
        }));
        let r = iterative_post_refinement(
            &prompt,
            &frame,
            &seg,
            IterationStrategy::Adaptive { theta: 0.05, max_iter },
        )
        .expect("refine");
        ok += (r.iterations == max_iter && r.deltas.iter().all(|d| *d > 0.05)) as usize;
    }
    let seg = SegmenterHandle::new(Arc::new(Scripted(
        vec![first_n(200), first_n(192), first_n(10)],
        Mutex::new(0),
    )));
    let r = iterative_post_refinement(
        &prompt,
        &frame,
        &seg,
        IterationStrategy::Adaptive {
            theta: 0.05,
            max_iter: 10,
        },
    )
    .expect("refine");
    let hand = r.iterations == 1 && r.deltas == vec![8.0 / 200.0];
    outcome(
        ok == 100 && hand,
        format!("{ok}/100 capped at max_iter, 200-px example stops after 1: {hand}"),
    )
}

// 6, 7, 8

fn ablation(suite: AblationSuite, preset: NoisePreset) -> AblationReport {
    let seeds: Vec<u64> = (0..ABLATION_SEEDS).collect();
    run_ablation(
        suite,
        &seeds,
        &PipelineConfig::with_backends("oracle"),
        &SceneSpec::default(),
        preset,
    )
    .expect("ablation")
}

fn row_summary(r: &AblationReport) -> String {
    r.rows
        .iter()
        .map(|(n, s)| format!("{n} {:.3}", s.map))
        .collect::<Vec<_>>()
        .join(", ")
}

fn matching_direction() -> Outcome {
    let r = ablation(AblationSuite::MatchingDirection, NoisePreset::Standard);
    let m = |n: &str| r.map_of(n).expect("row");
    let (n, f, rv, b) = (m("none"), m("forward"), m("reverse"), m("bidirectional"));
    outcome(f - n > MAP_GAP && rv - f > MAP_GAP && b - rv > MAP_GAP, row_summary(&r))
}

fn iteration_strategy() -> Outcome {
    let r = ablation(AblationSuite::IterationStrategy, NoisePreset::Boundary);
    let a = r.map_of("adaptive").expect("row");
    let pass = (0..=5).all(|k| a >= r.map_of(&format!("fixed-{k}")).expect("row"));
    outcome(pass, row_summary(&r))
}

fn components() -> Outcome {
    let r = ablation(AblationSuite::Components, NoisePreset::Standard);
    let m = |n: &str| r.map_of(n).expect("row");
    let base = m("baseline");
    let singles = ["BMP", "IPR", "AM"].iter().all(|c| m(c) > base);
    let all = m("BMP+IPR+AM");
    let max = r.rows.iter().all(|(_, s)| s.map <= all);
    outcome(singles && max, row_summary(&r))
}

// 9

fn iou(a: &[usize], b: &[usize]) -> f64 {
    let a: HashSet<usize> = a.iter().copied().collect();
    let b: HashSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        0.0
    } else {
        a.intersection(&b).count() as f64 / union as f64
    }
}

/// Interpolated precision summed over the recall steps `1/G, 2/G, ..., 1`.
fn staircase_oracle(preds: &[ScoredInstance], gts: &[Vec<usize>], t: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.partial_cmp(&preds[a].score).unwrap());
    let mut taken = vec![false; gts.len()];
    let mut points: Vec<(f64, f64)> = Vec::new();
    let mut tp = 0;
    for (k, &p) in order.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            let v = iou(&preds[p].points, gt);
            if !taken[g] && v >= t && best.is_none_or(|(bv, _)| v > bv) {
                best = Some((v, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (k + 1) as f64));
    }
    (1..=gts.len())
        .map(|i| {
            let level = i as f64 / gts.len() as f64;
            points
                .iter()
                .filter(|(r, _)| *r >= level - 1e-15)
                .map(|p| p.1)
                .fold(0.0, f64::max)
                / gts.len() as f64
        })
        .sum()
}

fn ap_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let universe = 30;
        let mut ids: Vec<usize> = (0..universe).collect();
        ids.shuffle(&mut rng);
        let ng = rng.random_range(1..=4);
        let gts: Vec<Vec<usize>> = ids.chunks(universe / ng).take(ng).map(|c| c.to_vec()).collect();
        let mut scores: Vec<f64> = (0..6).map(|k| k as f64 / 6.0 + rng.random_range(0.0..0.1)).collect();
        scores.shuffle(&mut rng);
        let np = rng.random_range(0..=6);
        let mut preds: Vec<ScoredInstance> = Vec::with_capacity(np);
        for score in scores.into_iter().take(np) {
            let mut points: Vec<usize> = (0..universe).filter(|_| rng.random_bool(0.3)).collect();
            // Bias half the predictions toward one ground-truth instance.
            if rng.random_bool(0.5) {
                let g = &gts[rng.random_range(0..gts.len())];
                let mut near: Vec<usize> = g.iter().copied().filter(|_| rng.random_bool(0.8)).collect();
                near.extend(points.iter().take(2));
                points = near;
            }
            preds.push(ScoredInstance { points, score });
        }
        for t in [0.25, 0.5, 0.75] {
            let got = average_precision(&preds, &gts, t).expect("ap");
            worst = worst.max((got - staircase_oracle(&preds, &gts, t)).abs());
        }
    }
    let gt = InstanceLabeling3D::from_raw(&(0..30).map(|i| i / 10 + 1).collect::<Vec<u32>>());
    let eroded = InstanceLabeling3D::from_raw(
        &(0..30)
            .map(|i| if i % 10 < 6 { i / 10 + 1 } else { 0 })
            .collect::<Vec<u32>>(),
    );
    let e = evaluate(&eroded, &[0.9, 0.8, 0.7], &gt).expect("eval");
    let construction = e.ap50 == 1.0 && (e.map - 0.3).abs() < AP_TOL;
    outcome(
        worst <= AP_TOL && construction,
        format!("max deviation {worst:.2e}; erosion AP50 {:.3} mAP {:.3}", e.ap50, e.map),
    )
}

// 10

fn thread_determinism() -> Outcome {
    let spec = SceneSpec {
        num_instances: 8,
        points_per_instance: 5000,
        ..Default::default()
    };
    let s = generate_scene(&spec, 10).expect("scene");
    let backends = Backends::with_oracles(Arc::new(s.truth.clone()), &s.frames);
    let cfg = NoisePreset::Standard.apply(&PipelineConfig {
        seed: 10,
        ..PipelineConfig::with_backends("oracle")
    });
    let tmp = tempfile::tempdir().expect("tempdir");
    let files: Vec<Vec<u8>> = [1, 4, 8]
        .into_iter()
        .map(|t| {
            let out = run_pipeline(
                &s.cloud,
                &s.frames,
                None,
                &PipelineConfig {
                    threads: t,
                    ..cfg.clone()
                },
                &backends,
                None,
            )
            .expect("run");
            let dir = tmp.path().join(format!("t{t}"));
            write_outputs(&dir, &s.cloud, &out).expect("write");
            std::fs::read(dir.join("labels.bin")).expect("read")
        })
        .collect();
    let same = files.iter().all(|f| *f == files[0]);
    outcome(same, format!("labels.bin at 1/4/8 threads identical: {same}"))
}

fn main() {
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 10] = [
        ("oracle end-to-end", oracle_end_to_end),
        ("merge equals threshold components", merge_equivalence),
        ("Hungarian optimality", hungarian_optimality),
        ("affinity numerics", affinity_numerics),
        ("refinement termination", refinement_contract),
        ("matching direction order", matching_direction),
        ("adaptive vs fixed iterations", iteration_strategy),
        ("component ablation", components),
        ("AP oracle", ap_oracle),
        ("thread determinism", thread_determinism),
    ];
    let mut failed = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        failed += !o.pass as usize;
        println!(
            "{:>2}. [{}] {name}: {} ({:.1} s)",
            k + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
