use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pool, run_stages, Backends, Components, PipelineConfig};
use crate::error::{Error, Result};
use crate::evaluation::{format_table, Summary};
use crate::matching::MatchingMode;
use crate::prompts::PromptBackendSpec;
use crate::synth::{generate_scene, SceneSpec, ORACLE_KIND};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationSuite {
    /// BMP / IPR / AM on-off grid.
    Components,
    /// None, forward, reverse and bidirectional matching.
    MatchingDirection,
    /// Fixed refinement counts 0..=5 against the adaptive stop.
    IterationStrategy,
    /// Adaptive stop at several change-ratio thresholds.
    ChangeRatio,
}

impl AblationSuite {
    pub const ALL: [AblationSuite; 4] = [
        AblationSuite::Components,
        AblationSuite::MatchingDirection,
        AblationSuite::IterationStrategy,
        AblationSuite::ChangeRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSuite::Components => "components",
            AblationSuite::MatchingDirection => "matching-direction",
            AblationSuite::IterationStrategy => "iteration-strategy",
            AblationSuite::ChangeRatio => "change-ratio",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown ablation suite `{name}`")))
    }

    /// Named variants of the base configuration.
    pub fn variants(self, base: &PipelineConfig) -> Vec<(String, PipelineConfig)> {
        let with = |f: &dyn Fn(&mut PipelineConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            AblationSuite::Components => Components::grid()
                .into_iter()
                .map(|comp| (comp.label(), with(&|c| c.components = comp)))
                .collect(),
            AblationSuite::MatchingDirection => MatchingMode::ALL
                .into_iter()
                .map(|m| {
                    (
                        m.name().to_string(),
                        with(&|c| {
                            c.components.bmp = true;
                            c.matching = m;
                        }),
                    )
                })
                .collect(),
            AblationSuite::IterationStrategy => {
                let mut v: Vec<(String, PipelineConfig)> = (0..=5)
                    .map(|k| {
                        (
                            format!("fixed-{k}"),
                            with(&|c| {
                                c.components.ipr = true;
                                c.fixed_iterations = Some(k);
                            }),
                        )
                    })
                    .collect();
                v.push((
                    "adaptive".into(),
                    with(&|c| {
                        c.components.ipr = true;
                        c.fixed_iterations = None;
                    }),
                ));
                v
            }
            AblationSuite::ChangeRatio => [1, 3, 5, 8, 10, 15]
                .into_iter()
                .map(|pct| {
                    (
                        format!("ratio-{pct}%"),
                        with(&|c| {
                            c.components.ipr = true;
                            c.fixed_iterations = None;
                            c.theta = pct as f64 / 100.0;
                        }),
                    )
                })
                .collect(),
        }
    }
}

/// Noise applied to the oracle backends during an ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePreset {
    Clean,
    /// Group dropout 0.15, box jitter 0.05 m, mask dilation 2 px.
    Standard,
    /// Mask boundary noise only, with feedback that degrades over many calls.
    Boundary,
}

impl NoisePreset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "clean" => Ok(NoisePreset::Clean),
            "standard" => Ok(NoisePreset::Standard),
            "boundary" => Ok(NoisePreset::Boundary),
            _ => Err(Error::Config(format!("unknown noise preset `{name}`"))),
        }
    }

    /// `(point, box, segmenter)` oracle parameters.
    pub fn params(self) -> [Vec<(&'static str, f64)>; 3] {
        match self {
            NoisePreset::Clean => [vec![], vec![], vec![]],
            NoisePreset::Standard => [
                vec![("group_dropout", 0.15)],
                vec![("box_jitter", 0.05)],
                vec![("mask_dilation", 2.0)],
            ],
            NoisePreset::Boundary => [vec![], vec![], vec![("mask_dilation", 2.0), ("drift", 0.25)]],
        }
    }

    /// The base configuration with oracle backends carrying this noise.
    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut cfg = base.clone();
        let [p, b, s] = self.params();
        let set = |spec: &mut PromptBackendSpec, params: Vec<(&str, f64)>| {
            spec.kind = ORACLE_KIND.to_string();
            for (k, v) in params {
                spec.params.insert(k.to_string(), serde_json::Value::from(v));
            }
        };
        set(&mut cfg.point_backend, p);
        set(&mut cfg.box_backend, b);
        set(&mut cfg.segmenter, s);
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: AblationSuite,
    pub seeds: Vec<u64>,
    /// Mean over seeds per variant.
    pub rows: Vec<(String, Summary)>,
    /// `per_seed[v][s]` for variant `v` and seed `s`.
    pub per_seed: Vec<Vec<Summary>>,
    pub checks: Vec<SuiteCheck>,
}

impl AblationReport {
    pub fn map_of(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1.map)
    }

    pub fn table(&self) -> String {
        let mut out = format_table(&self.rows);
        for c in &self.checks {
            out.push_str(&format!("{}: {}\n", c.name, if c.pass { "pass" } else { "FAIL" }));
        }
        out
    }

    fn checks_for(suite: AblationSuite, rows: &[(String, Summary)]) -> Vec<SuiteCheck> {
        let m = |name: &str| rows.iter().find(|r| r.0 == name).map_or(f64::NAN, |r| r.1.map);
        let check = |name: &str, pass: bool| SuiteCheck {
            name: name.to_string(),
            pass,
        };
        match suite {
            AblationSuite::Components => {
                let base = m("baseline");
                let all = m("BMP+IPR+AM");
                let mut v: Vec<SuiteCheck> = ["BMP", "IPR", "AM"]
                    .into_iter()
                    .map(|c| check(&format!("{c} alone > baseline"), m(c) > base))
                    .collect();
                v.push(check("all on is the maximum", rows.iter().all(|r| r.1.map <= all)));
                v
            }
            AblationSuite::MatchingDirection => {
                let (n, f, r, b) = (m("none"), m("forward"), m("reverse"), m("bidirectional"));
                vec![check(
                    "bidirectional > reverse > forward > none",
                    n < f && f < r && r < b,
                )]
            }
            AblationSuite::IterationStrategy => {
                let a = m("adaptive");
                let best = (0..=5)
                    .map(|k| m(&format!("fixed-{k}")))
                    .fold(f64::NEG_INFINITY, f64::max);
                vec![check("adaptive >= best fixed", a >= best)]
            }
            AblationSuite::ChangeRatio => Vec::new(),
        }
    }
}

/// Run every variant of `suite` on one synthetic scene per seed, with oracle
/// backends perturbed by `preset`. Scenes run in parallel on `base.threads`.
pub fn run_ablation(
    suite: AblationSuite,
    seeds: &[u64],
    base: &PipelineConfig,
    scene: &SceneSpec,
    preset: NoisePreset,
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("an ablation needs at least one seed".into()));
    }
    let noisy = preset.apply(base);
    noisy.validate()?;
    let variants = suite.variants(&noisy);
    for (_, v) in &variants {
        v.validate()?;
    }
    let per_scene: Vec<Vec<Summary>> = pool(base.threads)?.install(|| {
        seeds
            .par_iter()
            .map(|&seed| {
                let s = generate_scene(scene, seed)?;
                let backends = Backends::with_oracles(Arc::new(s.truth.clone()), &s.frames);
                variants
                    .iter()
                    .map(|(_, cfg)| {
                        let mut cfg = cfg.clone();
                        cfg.seed = seed;
                        let out = run_stages(&s.cloud, &s.frames, Some(s.gt()), &cfg, &backends, None)?;
                        Ok(Summary::of(out.eval.as_ref().expect("ground truth given")))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let per_seed: Vec<Vec<Summary>> = (0..variants.len())
        .map(|v| per_scene.iter().map(|s| s[v]).collect())
        .collect();
    let rows: Vec<(String, Summary)> = variants
        .iter()
        .zip(&per_seed)
        .map(|((name, _), s)| (name.clone(), Summary::mean(s)))
        .collect();
    Ok(AblationReport {
        suite,
        seeds: seeds.to_vec(),
        checks: AblationReport::checks_for(suite, &rows),
        rows,
        per_seed,
    })
}
