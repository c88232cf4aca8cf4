use std::sync::Arc;

use sceneseg::io::{read_u32_file, LabelSidecar};
use sceneseg::pipeline::*;
use sceneseg::synth::*;
use sceneseg::Error;

fn small_scene(seed: u64) -> SyntheticScene {
    let spec = SceneSpec {
        num_instances: 4,
        points_per_instance: 2500,
        num_frames: 10,
        ..Default::default()
    };
    generate_scene(&spec, seed).unwrap()
}

fn run(s: &SyntheticScene, cfg: &PipelineConfig, ck: Option<&Checkpoints>) -> sceneseg::Result<PipelineOutput> {
    let backends = Backends::with_oracles(Arc::new(s.truth.clone()), &s.frames);
    run_pipeline(&s.cloud, &s.frames, Some(s.gt()), cfg, &backends, ck)
}

#[test]
fn clean_oracles_segment_perfectly() {
    let s = small_scene(3);
    let out = run(&s, &PipelineConfig::with_backends("oracle"), None).unwrap();
    let e = out.eval.unwrap();
    assert_eq!(e.map, 1.0);
    assert_eq!(out.labels.num_instances, 4);
    assert_eq!(out.scores.len(), 4);
}

#[test]
fn labels_do_not_depend_on_thread_count() {
    let s = small_scene(5);
    let cfg = NoisePreset::Standard.apply(&PipelineConfig::with_backends("oracle"));
    let outs: Vec<PipelineOutput> = [1, 3, 8]
        .into_iter()
        .map(|t| {
            run(
                &s,
                &PipelineConfig {
                    threads: t,
                    ..cfg.clone()
                },
                None,
            )
            .unwrap()
        })
        .collect();
    for o in &outs[1..] {
        assert_eq!(o.labels, outs[0].labels);
        assert_eq!(o.scores, outs[0].scores);
    }
}

#[test]
fn resumed_run_equals_single_shot() {
    let s = small_scene(7);
    let cfg = NoisePreset::Standard.apply(&PipelineConfig::with_backends("oracle"));
    let single = run(&s, &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoints {
        dir: dir.path().to_path_buf(),
        resume: false,
    };
    let first = run(&s, &cfg, Some(&ck)).unwrap();
    assert_eq!(first.labels, single.labels);
    for name in ["prompts", "pairs", "masks", "affinity", "regions"] {
        assert!(dir.path().join(format!("{name}.json")).exists(), "{name}");
    }
    // Drop the later stages so they are recomputed from the loaded ones.
    std::fs::remove_file(dir.path().join("affinity.json")).unwrap();
    std::fs::remove_file(dir.path().join("regions.json")).unwrap();
    let resumed = run(&s, &cfg, Some(&Checkpoints { resume: true, ..ck })).unwrap();
    assert_eq!(resumed.labels, single.labels);
    assert_eq!(resumed.scores, single.scores);
    assert_eq!(resumed.pairs, single.pairs);
}

#[test]
fn stage_timings_account_for_the_run() {
    let s = small_scene(1);
    let start = std::time::Instant::now();
    let out = run(&s, &PipelineConfig::with_backends("oracle"), None).unwrap();
    let wall = start.elapsed().as_secs_f64();
    let t = &out.timings;
    let sum: f64 = t.stages.iter().map(|s| s.1).sum();
    assert!((sum - t.total).abs() <= 0.05 * t.total, "{sum} vs {}", t.total);
    assert!((t.total - wall).abs() <= 0.05 * wall, "{} vs {wall}", t.total);
    assert!(t.report().contains("refinement"));
}

#[test]
fn bad_config_is_rejected_before_any_work() {
    let s = small_scene(2);
    let dir = tempfile::tempdir().unwrap();
    let ck = Checkpoints {
        dir: dir.path().join("ck"),
        resume: false,
    };
    let cfg = PipelineConfig {
        theta: 1.5,
        ..PipelineConfig::with_backends("oracle")
    };
    assert!(matches!(run(&s, &cfg, Some(&ck)), Err(Error::Config(_))));
    assert!(!ck.dir.exists());
}

#[test]
fn backend_failures_name_their_stage() {
    let s = small_scene(2);
    let mut cfg = PipelineConfig::with_backends("oracle");
    cfg.box_backend.kind = "nonexistent".into();
    match run(&s, &cfg, None) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "prompts");
            assert!(matches!(*source, Error::UnknownBackend(_)));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn outputs_are_written() {
    let s = small_scene(4);
    let out = run(&s, &PipelineConfig::with_backends("oracle"), None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(dir.path(), &s.cloud, &out).unwrap();
    assert_eq!(
        read_u32_file(&dir.path().join("labels.bin")).unwrap(),
        out.labels.labels
    );
    let side = LabelSidecar::read(&dir.path().join("labels.json")).unwrap();
    assert_eq!(side.num_instances, out.labels.num_instances);
    let ply = sceneseg::io::read_ply_file(&dir.path().join("colored.ply")).unwrap();
    assert_eq!(ply.len(), s.cloud.len());
    assert!(ply.colors.is_some());
    assert!(dir.path().join("eval.json").exists());
    let report = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(report.contains("mAP"));
}

#[test]
fn ablation_rows_and_checks() {
    let spec = SceneSpec {
        num_instances: 3,
        points_per_instance: 1500,
        num_frames: 6,
        ..Default::default()
    };
    let base = PipelineConfig::with_backends("oracle");
    let r = run_ablation(AblationSuite::Components, &[0, 1], &base, &spec, NoisePreset::Clean).unwrap();
    assert_eq!(r.rows.len(), 8);
    assert!(r.map_of("BMP+IPR+AM").is_some());
    assert_eq!(r.per_seed[0].len(), 2);
    assert_eq!(r.checks.len(), 4);
    assert!(r.table().contains("all on is the maximum"));
    assert!(AblationSuite::from_name("bogus").is_err());
    assert!(run_ablation(AblationSuite::Components, &[], &base, &spec, NoisePreset::Clean).is_err());
}
