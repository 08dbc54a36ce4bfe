//! Bodies of the `synth`, `fit`, `render` and `eval` commands.
//!
//! Each command reads its inputs, runs one pipeline stage and writes its
//! artifacts into an output directory or file. Argument parsing lives in
//! the binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::eval::{error_heatmap, evaluate, AlignConfig, ErrorSummary};
use crate::fit::{fit, fit_from, fit_multiview, FitConfig, FitResult};
use crate::imaging::RgbImage;
use crate::losses::LossReport;
use crate::model::{assemble_shape, generate_synthetic_model, MorphableModel, ShapeParams};
use crate::obj::{load_obj, save_mesh};
use crate::scene::{
    canonical_pose, load_params, perturb, render_albedo, save_params, synthesize, write_scene,
    SceneConfig, SceneFile,
};

/// Where the morphable model comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSource {
    File(PathBuf),
    Synthetic {
        seed: u64,
        vertices: usize,
        id_dims: usize,
        exp_dims: usize,
    },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Synthetic {
            seed: 7,
            vertices: 1200,
            id_dims: 8,
            exp_dims: 4,
        }
    }
}

impl ModelSource {
    pub fn load(&self) -> Result<MorphableModel> {
        match self {
            ModelSource::File(p) => MorphableModel::load(p),
            ModelSource::Synthetic {
                seed,
                vertices,
                id_dims,
                exp_dims,
            } => generate_synthetic_model(*seed, *vertices, *id_dims, *exp_dims),
        }
    }
}

/// Writes a synthetic scene into `out_dir` and returns the scene file path.
///
/// The model is written first and re-read, so the scene is synthesized from
/// exactly the model a later fit will load.
pub fn cmd_synth(model: &ModelSource, scene: &SceneConfig, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("model.bin");
    model.load()?.save(&path)?;
    let model = MorphableModel::load(&path)?;
    let synthesized = synthesize(&model, scene)?;
    write_scene(&synthesized, &model, out_dir)
}

/// Starting point of a fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    /// Landmark-only warm start.
    #[default]
    Warmup,
    /// Ground truth; skips the warm start.
    Truth,
    /// Ground truth perturbed by 10% of each parameter's range, followed by
    /// landmark refinement.
    Perturbed,
}

impl std::str::FromStr for Init {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Init::Warmup),
            "truth" => Ok(Init::Truth),
            "perturbed" => Ok(Init::Perturbed),
            other => Err(Error::InvalidInput(format!(
                "unknown init '{other}' (expected warmup, truth or perturbed)"
            ))),
        }
    }
}

/// Summary written to `report.json` by [`cmd_fit`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub converged: bool,
    pub iterations: usize,
    pub ablation: String,
    pub init: Init,
    pub loss: LossReport,
    /// Point-to-plane error against the ground truth, when the scene has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_error: Option<ErrorSummary>,
}

/// Fits a scene and writes `params.json`, `mesh.obj`, `log.jsonl` and
/// `report.json` into `out_dir`.
pub fn cmd_fit(scene: &Path, cfg: &FitConfig, init: Init, out_dir: &Path) -> Result<FitReport> {
    let loaded = SceneFile::load_inputs(scene)?;
    let (model, views) = (&loaded.model, &loaded.views);
    let truth = || {
        loaded.truth.as_ref().ok_or_else(|| {
            Error::InvalidInput(format!("{}: scene has no ground truth", scene.display()))
        })
    };
    let result: FitResult = match init {
        Init::Warmup => fit(model, views, cfg)?,
        Init::Truth => fit_multiview(model, views, truth()?, cfg)?,
        Init::Perturbed => fit_from(model, views, &perturb(truth()?, model, 0.1, cfg.seed), cfg)?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mesh = assemble_shape(model, &result.params().shape)?;
    save_params(out_dir.join("params.json"), result.params())?;
    save_mesh(out_dir.join("mesh.obj"), &mesh, None)?;
    let log = out_dir.join("log.jsonl");
    std::fs::write(&log, result.log_jsonl()).map_err(|e| Error::io(&log, e))?;
    let truth_error = match &loaded.truth {
        Some(t) => {
            let truth_mesh = assemble_shape(model, &t.shape)?;
            let (_, map) = evaluate(
                &mesh,
                &truth_mesh,
                model.landmark_map(),
                None,
                &AlignConfig::default(),
            )?;
            Some(map.summary)
        }
        None => None,
    };
    let report = FitReport {
        converged: result.converged,
        iterations: result.state.iteration,
        ablation: cfg.ablation.name().to_string(),
        init,
        loss: result.report.clone(),
        truth_error,
    };
    write_json(&out_dir.join("report.json"), &report)?;
    Ok(report)
}

/// What [`cmd_render`] draws.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderArgs {
    pub model: ModelSource,
    /// Fitted or ground-truth parameters; the mean shape when absent.
    pub params: Option<PathBuf>,
    /// View whose pose is taken from `params`; the canonical frontal pose
    /// is used when absent.
    pub view: Option<usize>,
    pub width: usize,
    pub height: usize,
    pub albedo_seed: u64,
}

/// Renders a shape with the procedural albedo and saves it to `out`.
pub fn cmd_render(args: &RenderArgs, out: &Path) -> Result<RgbImage> {
    let model = args.model.load()?;
    let params = args.params.as_ref().map(load_params).transpose()?;
    let shape = params
        .as_ref()
        .map(|p| p.shape.clone())
        .unwrap_or_else(|| ShapeParams::for_model(&model));
    let pose = match args.view {
        Some(k) => {
            let p = params
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("--view needs a parameter file".into()))?;
            *p.poses.get(k).ok_or_else(|| {
                Error::InvalidInput(format!("view {k} out of range ({} poses)", p.poses.len()))
            })?
        }
        None => canonical_pose(
            args.width,
            args.height,
            SceneConfig::default().face_fraction,
            0.0,
        ),
    };
    let mesh = assemble_shape(&model, &shape)?;
    let image = render_albedo(
        &mesh,
        &model.mean_mesh(),
        &pose,
        args.width,
        args.height,
        args.albedo_seed,
    );
    image.save(out)?;
    Ok(image)
}

/// Inputs of [`cmd_eval`].
#[derive(Clone, Debug, PartialEq)]
pub struct EvalArgs {
    pub pred: PathBuf,
    pub truth: PathBuf,
    /// JSON array of landmark vertex indices used for the initial alignment.
    pub landmarks: PathBuf,
    /// Restricts the error to truth vertices within this distance of the
    /// landmark centroid.
    pub region_radius: Option<f64>,
    /// Writes `heatmap.png` at the frontal pose with this color range.
    pub heatmap_max: Option<f64>,
}

/// Aligns the predicted mesh to the truth and writes `errors.csv`,
/// `summary.json` and optionally `heatmap.png` into `out_dir`.
pub fn cmd_eval(args: &EvalArgs, out_dir: &Path) -> Result<ErrorSummary> {
    let pred = load_obj(&args.pred)?.into_mesh();
    let truth = load_obj(&args.truth)?.into_mesh();
    let landmarks: Vec<usize> = read_json(&args.landmarks)?;
    if let Some(&bad) = landmarks
        .iter()
        .find(|&&l| l >= truth.vertices.len().min(pred.vertices.len()))
    {
        return Err(Error::InvalidInput(format!(
            "{}: landmark vertex {bad} out of range",
            args.landmarks.display()
        )));
    }
    let (aligned, map) = evaluate(
        &pred,
        &truth,
        &landmarks,
        args.region_radius,
        &AlignConfig::default(),
    )?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    map.save(out_dir.join("errors.csv"), out_dir.join("summary.json"))?;
    if let Some(max) = args.heatmap_max {
        let pose: CameraPose = canonical_pose(224, 224, SceneConfig::default().face_fraction, 0.0);
        error_heatmap(&map, &aligned.mesh, &pose, 224, 224, max)?
            .save(out_dir.join("heatmap.png"))?;
    }
    Ok(map.summary)
}

/// Writes a model's landmark vertex indices as a JSON array.
pub fn save_landmark_indices(model: &MorphableModel, path: &Path) -> Result<()> {
    write_json(path, model.landmark_map().as_ref())
}

/// Reads a fit configuration file; missing fields take their defaults.
pub fn load_fit_config(path: &Path) -> Result<FitConfig> {
    read_json(path)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
