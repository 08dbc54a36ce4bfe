//! Synthetic multi-view scenes and the scene file.
//!
//! A scene samples shape coefficients from the model prior (truncated at
//! 2σ), places three cameras at yaw −30°, 0° and +30° with a small jitter,
//! and renders the shape with a procedural albedo that lives on the mean
//! template. Images are quantized to 8 bits; landmarks are the projected
//! landmark vertices, optionally with Gaussian noise.

use std::path::{Path, PathBuf};

use nalgebra::{DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::camera::{project_vertex, CameraPose};
use crate::error::{Error, Result};
use crate::imaging::{Rgb, RgbImage};
use crate::losses::{Observation, Params};
use crate::model::{assemble_shape, Mesh, MorphableModel, ShapeParams};
use crate::render::rasterize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Yaw of the outer views in degrees; the views are `[-yaw, 0, +yaw]`.
    pub yaw_deg: f64,
    /// Standard deviation of the per-angle jitter in degrees.
    pub jitter_deg: f64,
    /// Standard deviation of the translation jitter in pixels.
    pub translation_jitter_px: f64,
    /// Relative standard deviation of the scale jitter.
    pub scale_jitter: f64,
    /// Face width as a fraction of the image width.
    pub face_fraction: f64,
    /// Coefficients are drawn from `N(0, σ²)` truncated at this many σ.
    pub truncation: f64,
    /// Standard deviation of the landmark noise in pixels.
    pub landmark_noise_px: f64,
    /// Multiplies the intensity of one view: `(view, factor)`.
    pub brighten: Option<(usize, f64)>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            width: 224,
            height: 224,
            yaw_deg: 30.0,
            jitter_deg: 2.0,
            translation_jitter_px: 2.0,
            scale_jitter: 0.02,
            face_fraction: 0.7,
            truncation: 2.0,
            landmark_noise_px: 0.0,
            brighten: None,
        }
    }
}

/// Brightening factor used for lighting-change scenes.
pub const LIGHTING_FACTOR: f64 = 1.3;

#[derive(Clone, Debug)]
pub struct Scene {
    pub config: SceneConfig,
    pub truth: Params,
    pub truth_mesh: Mesh,
    pub views: Vec<Observation>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(ix: i64, iy: i64, iz: i64, seed: u64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64) ^ splitmix((iy as u64) ^ splitmix(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Trilinear value noise in `[0, 1]` with smoothstep blending.
fn value_noise(p: Vector3<f64>, seed: u64) -> f64 {
    let f = p.map(f64::floor);
    let t = (p - f).map(|u| u * u * (3.0 - 2.0 * u));
    let (x, y, z) = (f.x as i64, f.y as i64, f.z as i64);
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let w = (if dx == 1 { t.x } else { 1.0 - t.x })
                    * (if dy == 1 { t.y } else { 1.0 - t.y })
                    * (if dz == 1 { t.z } else { 1.0 - t.z });
                acc += w * lattice(x + dx, y + dy, z + dz, seed);
            }
        }
    }
    acc
}

/// Procedural albedo at a point of the mean template.
pub fn albedo(p: &Vector3<f64>, seed: u64) -> Rgb {
    let octaves = [(2.0, 0.5), (4.0, 0.3), (8.0, 0.2)];
    let n: f64 = octaves
        .iter()
        .enumerate()
        .map(|(k, &(freq, amp))| amp * value_noise(p * freq, seed.wrapping_add(k as u64)))
        .sum();
    let m = value_noise(p * 5.0 + Vector3::repeat(17.0), seed.wrapping_add(99));
    let shade = 0.45 + 0.7 * n;
    [
        (0.80 * shade + 0.10 * m).clamp(0.0, 1.0),
        (0.58 * shade).clamp(0.0, 1.0),
        (0.46 * shade + 0.12 * (1.0 - m)).clamp(0.0, 1.0),
    ]
}

fn background(x: usize, y: usize, w: usize, h: usize) -> Rgb {
    let u = x as f64 / w as f64;
    let v = y as f64 / h as f64;
    [0.12 + 0.10 * v, 0.16 + 0.06 * u, 0.22 + 0.08 * (1.0 - v)]
}

/// Renders `mesh` under `pose` with the procedural albedo looked up at the
/// corresponding point of `template` (same topology).
pub fn render_albedo(
    mesh: &Mesh,
    template: &Mesh,
    pose: &CameraPose,
    width: usize,
    height: usize,
    seed: u64,
) -> RgbImage {
    let raster = rasterize(mesh, pose, width, height);
    RgbImage::from_fn(width, height, |x, y| {
        let i = y * width + x;
        if !raster.is_covered(i) {
            return background(x, y, width, height);
        }
        let tri = mesh.triangles[raster.tri_id[i] as usize];
        let b = raster.bary[i];
        let p = template.vertices[tri[0]] * b[0]
            + template.vertices[tri[1]] * b[1]
            + template.vertices[tri[2]] * b[2];
        albedo(&p, seed)
    })
}

fn truncated_normal(rng: &mut ChaCha8Rng, sigma: f64, k: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= k {
            return z * sigma;
        }
    }
}

/// Canonical pose of a centered face filling `face_fraction` of the width.
pub fn canonical_pose(width: usize, height: usize, face_fraction: f64, yaw: f64) -> CameraPose {
    let f = face_fraction * width as f64 / 1.5;
    CameraPose::new(f, 0.0, yaw, 0.0, width as f64 / 2.0, height as f64 / 2.0)
}

pub fn synthesize(model: &MorphableModel, cfg: &SceneConfig) -> Result<Scene> {
    if cfg.width < 8 || cfg.height < 8 {
        return Err(Error::InvalidInput(
            "scene images must be at least 8×8".into(),
        ));
    }
    if !(cfg.truncation > 0.0) {
        return Err(Error::InvalidInput("truncation must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let id = DVector::from_fn(model.id_dims(), |i, _| {
        truncated_normal(&mut rng, model.id_sigma()[i], cfg.truncation)
    });
    let exp = DVector::from_fn(model.exp_dims(), |i, _| {
        truncated_normal(&mut rng, model.exp_sigma()[i], cfg.truncation)
    });
    let shape = ShapeParams { id, exp };
    let jitter = Normal::new(0.0, cfg.jitter_deg.to_radians().max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let tj = Normal::new(0.0, cfg.translation_jitter_px.max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let sj = Normal::new(0.0, cfg.scale_jitter.max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let poses: Vec<CameraPose> = [-cfg.yaw_deg, 0.0, cfg.yaw_deg]
        .iter()
        .map(|&yaw| {
            let base = canonical_pose(cfg.width, cfg.height, cfg.face_fraction, yaw.to_radians());
            CameraPose::new(
                base.f * (1.0 + sj.sample(&mut rng)),
                jitter.sample(&mut rng),
                base.beta + jitter.sample(&mut rng),
                jitter.sample(&mut rng),
                base.tx + tj.sample(&mut rng),
                base.ty + tj.sample(&mut rng),
            )
        })
        .collect();
    let mesh = assemble_shape(model, &shape)?;
    let template = model.mean_mesh();
    let texture_seed = rng.random::<u64>();
    let noise = Normal::new(0.0, cfg.landmark_noise_px.max(0.0))
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut views = Vec::with_capacity(poses.len());
    for (v, pose) in poses.iter().enumerate() {
        let mut image = render_albedo(&mesh, &template, pose, cfg.width, cfg.height, texture_seed);
        if let Some((view, factor)) = cfg.brighten {
            if view == v {
                image = image.scaled_intensity(factor);
            }
        }
        let landmarks = mesh
            .landmarks()
            .iter()
            .map(|p| {
                project_vertex(p, pose)
                    + Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng))
            })
            .collect();
        views.push(Observation {
            image: image.quantized(),
            landmarks,
        });
    }
    Ok(Scene {
        config: cfg.clone(),
        truth: Params { shape, poses },
        truth_mesh: mesh,
        views,
    })
}

/// Perturbs every parameter by up to `fraction` of its natural range, with
/// a uniformly random magnitude in `[fraction/2, fraction]` and random sign.
///
/// Ranges: 4σ for coefficients (the ±2σ prior), `f` for the scale, 0.5 rad
/// for angles and the half face width in pixels (`0.75 f`) for translations.
pub fn perturb(params: &Params, model: &MorphableModel, fraction: f64, seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = |range: f64| {
        let mag: f64 = rng.random_range(0.5..=1.0) * fraction * range;
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    };
    let mut out = params.clone();
    for (i, x) in out.shape.id.iter_mut().enumerate() {
        *x += delta(4.0 * model.id_sigma()[i]);
    }
    for (i, x) in out.shape.exp.iter_mut().enumerate() {
        *x += delta(4.0 * model.exp_sigma()[i]);
    }
    for p in &mut out.poses {
        let f = p.f;
        p.f += delta(f);
        p.alpha += delta(0.5);
        p.beta += delta(0.5);
        p.gamma += delta(0.5);
        p.tx += delta(0.75 * f);
        p.ty += delta(0.75 * f);
    }
    out
}

/// One view entry of a scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub image: PathBuf,
    pub landmarks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose: Option<CameraPose>,
}

/// Scene description on disk. Relative paths are resolved against the
/// directory of the scene file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub model: PathBuf,
    pub width: usize,
    pub height: usize,
    pub views: Vec<SceneView>,
    /// Ground-truth parameters (JSON).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<PathBuf>,
}

/// Everything a fit needs, loaded from a scene file.
#[derive(Clone, Debug)]
pub struct LoadedScene {
    pub file: SceneFile,
    pub model: MorphableModel,
    pub views: Vec<Observation>,
    pub truth: Option<Params>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Landmark file: JSON array of `[x, y]` pixel pairs.
pub fn load_landmarks(path: impl AsRef<Path>) -> Result<Vec<Vector2<f64>>> {
    let path = path.as_ref();
    let raw: Vec<[f64; 2]> = read_json(path)?;
    if raw.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Format {
            kind: "landmark",
            message: format!("{}: non-finite coordinate", path.display()),
        });
    }
    Ok(raw.into_iter().map(|[x, y]| Vector2::new(x, y)).collect())
}

pub fn save_landmarks(path: impl AsRef<Path>, landmarks: &[Vector2<f64>]) -> Result<()> {
    let raw: Vec<[f64; 2]> = landmarks.iter().map(|p| [p.x, p.y]).collect();
    write_json(path.as_ref(), &raw)
}

pub fn load_params(path: impl AsRef<Path>) -> Result<Params> {
    read_json(path.as_ref())
}

pub fn save_params(path: impl AsRef<Path>, params: &Params) -> Result<()> {
    write_json(path.as_ref(), params)
}

impl SceneFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file: SceneFile = read_json(path)?;
        if file.views.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "{}: a scene needs at least 2 views, got {}",
                path.display(),
                file.views.len()
            )));
        }
        Ok(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    /// Loads the model, images, landmarks and ground truth.
    pub fn load_inputs(path: impl AsRef<Path>) -> Result<LoadedScene> {
        let path = path.as_ref();
        let file = Self::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        let model = MorphableModel::load(resolve(&file.model))?;
        let mut views = Vec::with_capacity(file.views.len());
        for v in &file.views {
            let lpath = resolve(&v.landmarks);
            if !lpath.exists() {
                return Err(Error::io(
                    &lpath,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "landmark file not found"),
                ));
            }
            let landmarks = load_landmarks(&lpath)?;
            if landmarks.len() != model.landmark_count() {
                return Err(Error::Format {
                    kind: "landmark",
                    message: format!(
                        "{}: expected {} landmarks, got {}",
                        lpath.display(),
                        model.landmark_count(),
                        landmarks.len()
                    ),
                });
            }
            let image = RgbImage::load(resolve(&v.image))?;
            if image.dims() != (file.width, file.height) {
                return Err(Error::InvalidInput(format!(
                    "{}: image is {:?}, scene declares {}×{}",
                    v.image.display(),
                    image.dims(),
                    file.width,
                    file.height
                )));
            }
            views.push(Observation { image, landmarks });
        }
        let truth = file
            .truth
            .as_ref()
            .map(|t| load_params(resolve(t)))
            .transpose()?;
        Ok(LoadedScene {
            file,
            model,
            views,
            truth,
        })
    }
}

/// Writes model, images, landmarks, ground truth (params JSON and OBJ) and
/// `scene.json` into `dir`; returns the scene file path.
pub fn write_scene(
    scene: &Scene,
    model: &MorphableModel,
    dir: impl AsRef<Path>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    model.save(dir.join("model.bin"))?;
    let mut views = Vec::new();
    for (i, (v, pose)) in scene.views.iter().zip(&scene.truth.poses).enumerate() {
        let image = PathBuf::from(format!("view{i}.png"));
        let landmarks = PathBuf::from(format!("view{i}_landmarks.json"));
        v.image.save(dir.join(&image))?;
        save_landmarks(dir.join(&landmarks), &v.landmarks)?;
        views.push(SceneView {
            image,
            landmarks,
            pose: Some(*pose),
        });
    }
    save_params(dir.join("truth.json"), &scene.truth)?;
    crate::obj::save_mesh(dir.join("truth.obj"), &scene.truth_mesh, None)?;
    write_json(&dir.join("scene_config.json"), &scene.config)?;
    let file = SceneFile {
        model: PathBuf::from("model.bin"),
        width: scene.config.width,
        height: scene.config.height,
        views,
        truth: Some(PathBuf::from("truth.json")),
    };
    let path = dir.join("scene.json");
    file.save(&path)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic_model;

    fn small() -> (MorphableModel, SceneConfig) {
        (
            generate_synthetic_model(4, 600, 4, 2).unwrap(),
            SceneConfig {
                width: 64,
                height: 64,
                ..SceneConfig::default()
            },
        )
    }

    #[test]
    fn same_seed_same_scene() {
        let (model, cfg) = small();
        let a = synthesize(&model, &cfg).unwrap();
        let b = synthesize(&model, &cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x, y);
        }
        let c = synthesize(&model, &SceneConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn landmarks_are_projected_truth_vertices() {
        let (model, cfg) = small();
        let s = synthesize(&model, &cfg).unwrap();
        for (v, pose) in s.views.iter().zip(&s.truth.poses) {
            for (l, p) in v.landmarks.iter().zip(s.truth_mesh.landmarks()) {
                assert!((l - project_vertex(&p, pose)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn coefficients_respect_truncation() {
        let (model, cfg) = small();
        for seed in 0..20 {
            let s = synthesize(
                &model,
                &SceneConfig {
                    seed,
                    ..cfg.clone()
                },
            )
            .unwrap();
            for (i, x) in s.truth.shape.id.iter().enumerate() {
                assert!(x.abs() <= 2.0 * model.id_sigma()[i]);
            }
        }
    }

    #[test]
    fn brightening_scales_one_view() {
        let (model, cfg) = small();
        let plain = synthesize(&model, &cfg).unwrap();
        let lit = synthesize(
            &model,
            &SceneConfig {
                brighten: Some((0, LIGHTING_FACTOR)),
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(plain.views[1], lit.views[1]);
        let mean = |img: &RgbImage| img.pixels().iter().map(|p| p[0] + p[1] + p[2]).sum::<f64>();
        let ratio = mean(&lit.views[0].image) / mean(&plain.views[0].image);
        assert!(ratio > 1.2 && ratio < 1.31, "ratio {ratio}");
    }

    #[test]
    fn perturbation_sizes() {
        let (model, cfg) = small();
        let s = synthesize(&model, &cfg).unwrap();
        let p = perturb(&s.truth, &model, 0.1, 3);
        for (i, (a, b)) in p.shape.id.iter().zip(s.truth.shape.id.iter()).enumerate() {
            let d = (a - b).abs() / (4.0 * model.id_sigma()[i]);
            assert!((0.05 - 1e-12..=0.1 + 1e-12).contains(&d));
        }
        for (a, b) in p.poses.iter().zip(&s.truth.poses) {
            let d = (a.f - b.f).abs() / b.f;
            assert!((0.05 - 1e-12..=0.1 + 1e-12).contains(&d));
        }
        assert_eq!(perturb(&s.truth, &model, 0.0, 3), s.truth);
    }

    #[test]
    fn scene_file_round_trip() {
        let (model, cfg) = small();
        let s = synthesize(&model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(&s, &model, dir.path()).unwrap();
        let loaded = SceneFile::load_inputs(&path).unwrap();
        assert_eq!(loaded.truth.as_ref().unwrap(), &s.truth);
        for (a, b) in loaded.views.iter().zip(&s.views) {
            assert_eq!(a.image, b.image);
            for (x, y) in a.landmarks.iter().zip(&b.landmarks) {
                assert_eq!(x, y);
            }
        }
        assert!(loaded.model == MorphableModel::load(dir.path().join("model.bin")).unwrap());
    }

    #[test]
    fn missing_landmark_file_names_the_path() {
        let (model, cfg) = small();
        let s = synthesize(&model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = write_scene(&s, &model, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("view1_landmarks.json")).unwrap();
        let err = SceneFile::load_inputs(&path).unwrap_err().to_string();
        assert!(err.contains("view1_landmarks.json"), "{err}");
    }
}
