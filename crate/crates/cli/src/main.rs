use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sceneseg::evaluation::{evaluate, format_table, Summary};
use sceneseg::io::{
    colorize, load_scene_dir, read_labels, save_scene_dir, write_json, write_ply_file, LabelSidecar, PlyFormat,
};
use sceneseg::matching::MatchingMode;
use sceneseg::pipeline::{
    run_ablation, run_pipeline, write_outputs, AblationSuite, Backends, Checkpoints, NoisePreset, PipelineConfig,
};
use sceneseg::prompts::PromptBackendSpec;
use sceneseg::synth::{generate_scene, SceneSpec};
use sceneseg::Error;

#[derive(Parser)]
#[command(
    name = "sceneseg",
    version,
    about = "Training-free 3D instance segmentation from promptable 2D segmenters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory with ground truth.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        scene: SceneArgs,
    },
    /// Segment a scene directory.
    Run {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write stage checkpoints here.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Reuse checkpoints that already exist.
        #[arg(long, requires = "checkpoints")]
        resume: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run an ablation suite over seeded synthetic scenes.
    Ablate {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Number of scenes.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Seed of the first scene; the rest follow consecutively.
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long, value_enum, default_value_t = Preset::Standard)]
        preset: Preset,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a label file against ground-truth labels.
    Eval {
        #[arg(long)]
        labels: PathBuf,
        /// Sidecar with instance scores; defaults to labels.json next to the labels.
        #[arg(long)]
        sidecar: Option<PathBuf>,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Color a scene's points by instance label.
    ExportPly {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ascii: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Components,
    MatchingDirection,
    IterationStrategy,
    ChangeRatio,
}

impl From<Suite> for AblationSuite {
    fn from(s: Suite) -> Self {
        match s {
            Suite::Components => AblationSuite::Components,
            Suite::MatchingDirection => AblationSuite::MatchingDirection,
            Suite::IterationStrategy => AblationSuite::IterationStrategy,
            Suite::ChangeRatio => AblationSuite::ChangeRatio,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Clean,
    Standard,
    Boundary,
}

impl From<Preset> for NoisePreset {
    fn from(p: Preset) -> Self {
        match p {
            Preset::Clean => NoisePreset::Clean,
            Preset::Standard => NoisePreset::Standard,
            Preset::Boundary => NoisePreset::Boundary,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Matching {
    None,
    Forward,
    Reverse,
    Bidirectional,
}

impl From<Matching> for MatchingMode {
    fn from(m: Matching) -> Self {
        match m {
            Matching::None => MatchingMode::None,
            Matching::Forward => MatchingMode::Forward,
            Matching::Reverse => MatchingMode::Reverse,
            Matching::Bidirectional => MatchingMode::Bidirectional,
        }
    }
}

#[derive(Args)]
struct SceneArgs {
    #[arg(long, default_value_t = 6)]
    instances: usize,
    #[arg(long, default_value_t = 2000)]
    points_per_instance: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
}

impl SceneArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            num_instances: self.instances,
            points_per_instance: self.points_per_instance,
            num_frames: self.frames,
            ..Default::default()
        }
    }
}

/// A config file plus one flag per config field; flags win.
#[derive(Args, Default)]
struct ConfigArgs {
    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    depth_tol: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    s_min: Option<f64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    grid: Option<Vec<usize>>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    fixed_iterations: Option<usize>,
    #[arg(long)]
    knn: Option<usize>,
    #[arg(long)]
    min_visible: Option<usize>,
    #[arg(long)]
    lift_vote: Option<f64>,
    #[arg(long, value_enum)]
    matching: Option<Matching>,
    #[arg(long)]
    bmp: Option<bool>,
    #[arg(long)]
    ipr: Option<bool>,
    #[arg(long)]
    am: Option<bool>,
    /// Sets the kind of all three backends.
    #[arg(long)]
    backends: Option<String>,
    #[arg(long)]
    point_backend: Option<String>,
    #[arg(long)]
    box_backend: Option<String>,
    #[arg(long)]
    segmenter: Option<String>,
    /// Point backend parameter `key=value` (repeatable).
    #[arg(long = "point-param", value_name = "KEY=VALUE")]
    point_params: Vec<String>,
    #[arg(long = "box-param", value_name = "KEY=VALUE")]
    box_params: Vec<String>,
    #[arg(long = "segmenter-param", value_name = "KEY=VALUE")]
    segmenter_params: Vec<String>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn set_params(spec: &mut PromptBackendSpec, params: &[String]) -> Result<(), Error> {
    for kv in params {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected KEY=VALUE, got `{kv}`")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::from(v));
        spec.params.insert(k.to_string(), value);
    }
    Ok(())
}

impl ConfigArgs {
    fn resolve(&self, base: PipelineConfig) -> Result<PipelineConfig, Error> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => base,
        };
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })* };
        }
        set!(
            theta,
            tau,
            patch,
            depth_tol,
            epsilon,
            s_min,
            views,
            scale,
            max_iter,
            knn,
            min_visible,
            lift_vote,
            threads,
            seed
        );
        if let Some(g) = &self.grid {
            c.grid = [g[0], g[1], g[2]];
        }
        if self.fixed_iterations.is_some() {
            c.fixed_iterations = self.fixed_iterations;
        }
        if let Some(m) = self.matching {
            c.matching = m.into();
        }
        if let Some(v) = self.bmp {
            c.components.bmp = v;
        }
        if let Some(v) = self.ipr {
            c.components.ipr = v;
        }
        if let Some(v) = self.am {
            c.components.am = v;
        }
        if let Some(k) = &self.backends {
            c.point_backend.kind = k.clone();
            c.box_backend.kind = k.clone();
            c.segmenter.kind = k.clone();
        }
        if let Some(k) = &self.point_backend {
            c.point_backend.kind = k.clone();
        }
        if let Some(k) = &self.box_backend {
            c.box_backend.kind = k.clone();
        }
        if let Some(k) = &self.segmenter {
            c.segmenter.kind = k.clone();
        }
        set_params(&mut c.point_backend, &self.point_params)?;
        set_params(&mut c.box_backend, &self.box_params)?;
        set_params(&mut c.segmenter, &self.segmenter_params)?;
        c.validate()?;
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::Infeasible(_) => 2,
        Error::UnknownBackend(_) | Error::Backend { .. } => 3,
        Error::Io { .. } | Error::Format { .. } | Error::DimensionMismatch(_) | Error::InvalidInput(_) => 4,
        Error::Stage { .. } => unreachable!("root skips stage wrappers"),
    }
}

fn execute(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::Gen { out, seed, scene } => {
            let s = generate_scene(&scene.spec(), seed)?;
            save_scene_dir(&out, &s.cloud, &s.frames, Some(&s.truth))?;
            println!(
                "wrote {} points, {} frames to {}",
                s.cloud.len(),
                s.frames.len(),
                out.display()
            );
        }
        Command::Run {
            scene,
            out,
            checkpoints,
            resume,
            config,
        } => {
            let cfg = config.resolve(PipelineConfig::default())?;
            let data = load_scene_dir(&scene)?;
            let backends = match &data.truth {
                Some(t) => Backends::with_oracles(Arc::new(t.clone()), &data.frames),
                None => Backends::default(),
            };
            let ck = checkpoints.map(|dir| Checkpoints { dir, resume });
            info!("running on {} points, {} frames", data.cloud.len(), data.frames.len());
            let gt = data.truth.as_ref().map(|t| &t.labels);
            let result = run_pipeline(&data.cloud, &data.frames, gt, &cfg, &backends, ck.as_ref())?;
            write_outputs(&out, &data.cloud, &result)?;
            print!("{}", result.timings.report());
            if let Some(e) = &result.eval {
                print!("{}", format_table(&[("scene".to_string(), Summary::of(e))]));
            }
        }
        Command::Ablate {
            suite,
            seeds,
            first_seed,
            preset,
            json,
            scene,
            config,
        } => {
            let cfg = config.resolve(PipelineConfig::with_backends("oracle"))?;
            let seeds: Vec<u64> = (0..seeds).map(|s| first_seed + s).collect();
            let report = run_ablation(suite.into(), &seeds, &cfg, &scene.spec(), preset.into())?;
            print!("{}", report.table());
            if let Some(path) = json {
                write_json(&path, &report, "ablation report")?;
            }
        }
        Command::Eval {
            labels,
            sidecar,
            gt,
            json,
        } => {
            let pred = read_labels(&labels)?;
            let side_path = sidecar.unwrap_or_else(|| labels.with_file_name("labels.json"));
            let side = LabelSidecar::read(&side_path)?;
            let gt = read_labels(&gt)?;
            let result = evaluate(&pred, &side.scores(), &gt)?;
            print!("{}", format_table(&[(name_of(&labels), Summary::of(&result))]));
            if let Some(path) = json {
                write_json(&path, &result, "evaluation")?;
            }
        }
        Command::ExportPly {
            scene,
            labels,
            out,
            ascii,
        } => {
            let data = load_scene_dir(&scene)?;
            let labels = read_labels(&labels)?;
            let format = if ascii {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            write_ply_file(&out, &colorize(&data.cloud, &labels)?, format)?;
        }
    }
    Ok(())
}

fn name_of(path: &Path) -> String {
    path.file_name()
        .map_or("labels".into(), |n| n.to_string_lossy().into_owned())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
