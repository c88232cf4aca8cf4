use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{MatchConfig, MatchingMode};
use crate::projection::ViewParams;
use crate::prompts::PromptBackendSpec;
use crate::refinement::{IterationStrategy, SegmenterSpec, DEFAULT_MIN_VISIBLE};

/// Which of the three stages run in their full form. With `bmp` off the
/// branches prompt independently, with `ipr` off the first mask is kept, and
/// with `am` off every prompt pair is its own instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub bmp: bool,
    pub ipr: bool,
    pub am: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components {
            bmp: true,
            ipr: true,
            am: true,
        }
    }
}

impl Components {
    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.bmp, "BMP"), (self.ipr, "IPR"), (self.am, "AM")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "baseline".into()
        } else {
            on.join("+")
        }
    }

    /// All eight on/off combinations, all-off first.
    pub fn grid() -> Vec<Components> {
        (0..8u8)
            .map(|m| Components {
                bmp: m & 1 != 0,
                ipr: m & 2 != 0,
                am: m & 4 != 0,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Mask change ratio that stops refinement.
    pub theta: f64,
    /// Merge threshold on region-point affinity.
    pub tau: f64,
    /// Label-histogram window side (odd).
    pub patch: usize,
    /// Depth agreement for visibility (m).
    pub depth_tol: f64,
    /// Box margin as a fraction of the box diagonal.
    pub epsilon: f64,
    /// Minimum matched similarity for a prompt pair.
    pub s_min: f64,
    /// Virtual views for the multi-view point branch.
    pub views: usize,
    /// Virtual view grid `[H, W, D]`.
    pub grid: [usize; 3],
    /// Shape scale of the virtual view grid.
    pub scale: f64,
    pub max_iter: usize,
    /// Overrides the adaptive stop with a fixed number of refinements.
    pub fixed_iterations: Option<usize>,
    /// Nearest prompt pairs considered as merge neighbors.
    pub knn: usize,
    /// Visible points a pair needs before it is prompted in a frame.
    pub min_visible: usize,
    /// Fraction of a point's assessed views whose mask must cover it.
    pub lift_vote: f64,
    pub matching: MatchingMode,
    pub components: Components,
    pub point_backend: PromptBackendSpec,
    pub box_backend: PromptBackendSpec,
    pub segmenter: SegmenterSpec,
    /// Worker threads; 0 uses the machine default.
    pub threads: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let v = ViewParams::default();
        PipelineConfig {
            theta: 0.05,
            tau: 0.7,
            patch: 5,
            depth_tol: 0.05,
            epsilon: 0.02,
            s_min: 0.3,
            views: v.num_views,
            grid: [v.height, v.width, v.depth_bins],
            scale: v.scale,
            max_iter: 10,
            fixed_iterations: None,
            knn: 8,
            min_visible: DEFAULT_MIN_VISIBLE,
            lift_vote: 0.5,
            matching: MatchingMode::Bidirectional,
            components: Components::default(),
            point_backend: PromptBackendSpec::new("exchange"),
            box_backend: PromptBackendSpec::new("exchange"),
            segmenter: SegmenterSpec::new("exchange"),
            threads: 0,
            seed: 0,
        }
    }
}

fn check(ok: bool, what: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(what.to_string()))
    }
}

impl PipelineConfig {
    /// Defaults with every backend set to `kind`.
    pub fn with_backends(kind: &str) -> Self {
        PipelineConfig {
            point_backend: PromptBackendSpec::new(kind),
            box_backend: PromptBackendSpec::new(kind),
            segmenter: SegmenterSpec::new(kind),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.theta > 0.0 && self.theta < 1.0, "theta must be in (0, 1)")?;
        check(self.tau > 0.0 && self.tau < 1.0, "tau must be in (0, 1)")?;
        check(self.patch % 2 == 1, "patch must be a positive odd integer")?;
        check(
            self.depth_tol > 0.0 && self.depth_tol.is_finite(),
            "depth_tol must be positive",
        )?;
        check((0.0..1.0).contains(&self.epsilon), "epsilon must be in [0, 1)")?;
        check((-1.0..=1.0).contains(&self.s_min), "s_min must be in [-1, 1]")?;
        check(self.views >= 1, "views must be at least 1")?;
        check(self.grid.iter().all(|g| *g >= 8), "grid dimensions must be at least 8")?;
        check(self.scale > 0.0 && self.scale <= 1.0, "scale must be in (0, 1]")?;
        check((1..=1000).contains(&self.max_iter), "max_iter must be in 1..=1000")?;
        check(
            self.fixed_iterations.is_none_or(|k| k <= 1000),
            "fixed_iterations must be at most 1000",
        )?;
        check(self.min_visible >= 1, "min_visible must be at least 1")?;
        check(
            self.lift_vote > 0.0 && self.lift_vote <= 1.0,
            "lift_vote must be in (0, 1]",
        )?;
        check(self.threads <= 1024, "threads must be at most 1024")?;
        for (name, spec) in [
            ("point_backend", &self.point_backend),
            ("box_backend", &self.box_backend),
            ("segmenter", &self.segmenter),
        ] {
            check(!spec.kind.is_empty(), &format!("{name} kind is empty"))?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// `.json` files are read as JSON, anything else as TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn iteration(&self) -> IterationStrategy {
        if !self.components.ipr {
            return IterationStrategy::Fixed(0);
        }
        match self.fixed_iterations {
            Some(k) => IterationStrategy::Fixed(k),
            None => IterationStrategy::Adaptive {
                theta: self.theta,
                max_iter: self.max_iter,
            },
        }
    }

    pub fn match_config(&self) -> MatchConfig {
        MatchConfig {
            mode: if self.components.bmp {
                self.matching
            } else {
                MatchingMode::None
            },
            epsilon: self.epsilon,
            s_min: self.s_min,
        }
    }

    pub fn view_params(&self) -> ViewParams {
        ViewParams {
            height: self.grid[0],
            width: self.grid[1],
            depth_bins: self.grid[2],
            scale: self.scale,
            num_views: self.views,
            ..ViewParams::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_round_trip() {
        let cfg = PipelineConfig::with_backends("oracle");
        cfg.validate().unwrap();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), cfg);
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(PipelineConfig::from_json_str(&json).unwrap(), cfg);
    }

    #[test]
    fn out_of_range_and_unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("theta = 1.5").is_err());
        assert!(PipelineConfig::from_toml_str("patch = 4").is_err());
        assert!(PipelineConfig::from_toml_str("scale = 0.0").is_err());
        assert!(PipelineConfig::from_toml_str("bogus = 1").is_err());
        assert!(PipelineConfig::from_toml_str("[components]\nxyz = true").is_err());
        let cfg =
            PipelineConfig::from_toml_str("tau = 0.5\n[segmenter]\nkind = \"oracle\"\nparams = { mask_dilation = 2 }")
                .unwrap();
        assert_eq!(cfg.tau, 0.5);
        assert_eq!(cfg.segmenter.f64_param("mask_dilation", 0.0).unwrap(), 2.0);
        assert_eq!(cfg.theta, 0.05);
    }

    #[test]
    fn component_grid_covers_all_combinations() {
        let g = Components::grid();
        assert_eq!(g.len(), 8);
        assert_eq!(g[0].label(), "baseline");
        assert_eq!(g[7].label(), "BMP+IPR+AM");
        let mut labels: Vec<String> = g.iter().map(Components::label).collect();
        labels.sort();
        labels.dedup();
        assert_eq!(labels.len(), 8);
    }

    #[test]
    fn disabled_stages_change_strategy_and_mode() {
        let mut cfg = PipelineConfig::default();
        cfg.components.ipr = false;
        cfg.components.bmp = false;
        assert_eq!(cfg.iteration(), IterationStrategy::Fixed(0));
        assert_eq!(cfg.match_config().mode, MatchingMode::None);
    }
}
