use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mvface_core::commands::{
    cmd_eval, cmd_fit, cmd_render, cmd_synth, load_fit_config, save_landmark_indices, EvalArgs,
    Init, ModelSource, RenderArgs,
};
use mvface_core::fit::{Ablation, FitConfig};
use mvface_core::losses::Reduction;
use mvface_core::render::TextureRoute;
use mvface_core::scene::{SceneConfig, LIGHTING_FACTOR};

/// Multi-view morphable face fitting.
#[derive(Parser, Debug)]
#[command(name = "mvface", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic three-view scene.
    Synth(SynthCmd),
    /// Fit shape and poses to a scene. Exits 0 on convergence, 2 when the
    /// iteration limit is reached first, 1 on error.
    Fit(FitCmd),
    /// Render a shape with the procedural albedo.
    Render(RenderCmd),
    /// Align a predicted mesh to the truth and measure point-to-plane error.
    Eval(EvalCmd),
    /// Write a model's landmark vertex indices as JSON.
    Landmarks(LandmarksCmd),
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// Model file; a synthetic model is generated when absent.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Seed of the synthetic model.
    #[arg(long, default_value_t = 7)]
    model_seed: u64,
    #[arg(long, default_value_t = 1200)]
    vertices: usize,
    #[arg(long, default_value_t = 8)]
    id_dims: usize,
    #[arg(long, default_value_t = 4)]
    exp_dims: usize,
}

impl ModelArgs {
    fn source(&self) -> ModelSource {
        match &self.model {
            Some(p) => ModelSource::File(p.clone()),
            None => ModelSource::Synthetic {
                seed: self.model_seed,
                vertices: self.vertices,
                id_dims: self.id_dims,
                exp_dims: self.exp_dims,
            },
        }
    }
}

#[derive(Args, Debug)]
struct SynthCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Scene seed (shape, pose jitter, landmark noise).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    width: usize,
    #[arg(long, default_value_t = 224)]
    height: usize,
    /// Yaw of the outer views in degrees.
    #[arg(long, default_value_t = 30.0)]
    yaw: f64,
    /// Standard deviation of the pose-angle jitter in degrees.
    #[arg(long, default_value_t = 2.0)]
    jitter: f64,
    /// Standard deviation of the landmark noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    landmark_noise: f64,
    /// Brighten this view by the lighting factor.
    #[arg(long)]
    brighten_view: Option<usize>,
    #[arg(long, default_value_t = LIGHTING_FACTOR)]
    lighting_factor: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblationArg {
    LandmarkOnly,
    Photo,
    Align,
    Full,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Warmup,
    Truth,
    Perturbed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RouteArg {
    PerPixel,
    PerVertex,
}

#[derive(Args, Debug)]
struct FitCmd {
    /// Scene file written by `synth` or by hand.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON fit configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    ablation: Option<AblationArg>,
    #[arg(long, value_enum, default_value = "warmup")]
    init: InitArg,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    warmup_iterations: Option<usize>,
    /// Relative improvement that counts as progress.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Refreshes without improvement before stopping.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    flow_every: Option<usize>,
    /// Adam learning rate for coefficients and poses.
    #[arg(long)]
    lr: Option<f64>,
    /// Normalize losses by pixel and landmark counts (mean) or not (sum).
    #[arg(long, value_enum)]
    reduction: Option<ReductionArg>,
    #[arg(long, value_enum)]
    route: Option<RouteArg>,
    #[arg(long)]
    seed: Option<u64>,
}

impl FitCmd {
    fn config(&self) -> Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_fit_config(p)?,
            None => FitConfig::default(),
        };
        if let Some(a) = self.ablation {
            cfg.ablation = match a {
                AblationArg::LandmarkOnly => Ablation::LandmarkOnly,
                AblationArg::Photo => Ablation::Photo,
                AblationArg::Align => Ablation::Align,
                AblationArg::Full => Ablation::Full,
            };
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.warmup_iterations {
            cfg.warmup_iterations = v;
        }
        if let Some(v) = self.tolerance {
            cfg.tolerance = v;
        }
        if let Some(v) = self.patience {
            cfg.patience = v;
        }
        if let Some(v) = self.flow_every {
            cfg.flow_every = v;
        }
        if let Some(v) = self.lr {
            cfg.adam.lr_coef = v;
            cfg.adam.lr_pose = v;
        }
        if let Some(r) = self.reduction {
            cfg.reduction = match r {
                ReductionArg::Mean => Reduction::Mean,
                ReductionArg::Sum => Reduction::Sum,
            };
        }
        if let Some(r) = self.route {
            cfg.route = match r {
                RouteArg::PerPixel => TextureRoute::PerPixel,
                RouteArg::PerVertex => TextureRoute::PerVertex,
            };
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn init(&self) -> Init {
        match self.init {
            InitArg::Warmup => Init::Warmup,
            InitArg::Truth => Init::Truth,
            InitArg::Perturbed => Init::Perturbed,
        }
    }
}

#[derive(Args, Debug)]
struct RenderCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Parameter JSON; the mean shape is rendered when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Take the pose of this view from the parameters instead of the
    /// frontal canonical pose.
    #[arg(long)]
    view: Option<usize>,
    #[arg(long, default_value_t = 224)]
    width: usize,
    #[arg(long, default_value_t = 224)]
    height: usize,
    #[arg(long, default_value_t = 0)]
    albedo_seed: u64,
    /// Output image (.png or .ppm).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalCmd {
    /// Predicted mesh (OBJ).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth mesh (OBJ) with the same landmark vertices.
    #[arg(long)]
    truth: PathBuf,
    /// JSON array of landmark vertex indices.
    #[arg(long)]
    landmarks: PathBuf,
    /// Only score truth vertices within this distance of the landmark centroid.
    #[arg(long)]
    region_radius: Option<f64>,
    /// Also write heatmap.png with errors scaled to this maximum.
    #[arg(long)]
    heatmap_max: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct LandmarksCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Synth(c) => {
            let scene = SceneConfig {
                seed: c.seed,
                width: c.width,
                height: c.height,
                yaw_deg: c.yaw,
                jitter_deg: c.jitter,
                landmark_noise_px: c.landmark_noise,
                brighten: c.brighten_view.map(|v| (v, c.lighting_factor)),
                ..SceneConfig::default()
            };
            let path = cmd_synth(&c.model.source(), &scene, &c.out).context("synth failed")?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Fit(c) => {
            let cfg = c.config()?;
            let report = cmd_fit(&c.scene, &cfg, c.init(), &c.out).context("fit failed")?;
            log::info!(
                "fit: {} iterations, objective {:.6}",
                report.iterations,
                report.loss.total
            );
            if let Some(e) = &report.truth_error {
                log::info!("mean error against ground truth: {:.6}", e.mean);
            }
            if report.converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("fit: iteration limit reached before convergence");
                Ok(ExitCode::from(2))
            }
        }
        Command::Render(c) => {
            let args = RenderArgs {
                model: c.model.source(),
                params: c.params,
                view: c.view,
                width: c.width,
                height: c.height,
                albedo_seed: c.albedo_seed,
            };
            cmd_render(&args, &c.out).context("render failed")?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(c) => {
            let args = EvalArgs {
                pred: c.pred,
                truth: c.truth,
                landmarks: c.landmarks,
                region_radius: c.region_radius,
                heatmap_max: c.heatmap_max,
            };
            let summary = cmd_eval(&args, &c.out).context("eval failed")?;
            println!(
                "mean {:.6} median {:.6} max {:.6}",
                summary.mean, summary.median, summary.max
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Landmarks(c) => {
            let model = c.model.source().load()?;
            save_landmark_indices(&model, &c.out)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
