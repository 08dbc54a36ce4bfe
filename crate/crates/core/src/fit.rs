//! Landmark warm start and multi-view fitting.
//!
//! The fitter optimizes identity/expression coefficients and one pose per
//! view with Adam. Coefficients are optimized in σ-normalized space and
//! pose coordinates are scaled so that a unit step of any of them moves the
//! projection by a comparable number of pixels. The landmark warm start is
//! a small least-squares problem and uses Levenberg-Marquardt instead.
//!
//! Multi-view fitting freezes masks and flows in a [`Linearization`]. Flows
//! are re-estimated every `flow_every` iterations; masks are rebuilt at the
//! same points when the projected landmarks have drifted by at least
//! `mask_rebuild_px` (median) since the last build. Only refreshed values
//! are compared with each other: they drive the best-so-far tracking and
//! the stopping rule.
//!
//! A refresh that does not undercut the best refreshed value by more than
//! `tolerance` (relative) returns to the best parameters, resets the Adam
//! moments and halves the step size. The fit stops after `patience`
//! consecutive refreshes without improvement. Without image terms every
//! iteration is a refresh and no backtracking happens.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::{euler_from_rotation, project_vertex, CameraPose, PoseDerivatives};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::losses::{
    selfsup_total, Linearization, LossReport, LossWeights, Observation, ParamGradient, Params,
    Reduction, SelfSupConfig, ViewPair,
};
use crate::model::{MorphableModel, ShapeParams};
use crate::render::{rasterize, GuidedFilter, TextureRoute};

/// Which self-supervised terms are active besides the landmark term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    LandmarkOnly,
    Photo,
    Align,
    #[default]
    Full,
}

impl Ablation {
    /// `(photo, align)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            Ablation::LandmarkOnly => (false, false),
            Ablation::Photo => (true, false),
            Ablation::Align => (false, true),
            Ablation::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::LandmarkOnly => "landmark-only",
            Ablation::Photo => "photo",
            Ablation::Align => "align",
            Ablation::Full => "full",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "landmark-only" | "v1" => Ok(Ablation::LandmarkOnly),
            "photo" | "v2" => Ok(Ablation::Photo),
            "align" | "v3" => Ok(Ablation::Align),
            "full" | "v4" => Ok(Ablation::Full),
            other => Err(Error::InvalidInput(format!(
                "unknown ablation '{other}' (expected landmark-only, photo, align or full)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr_coef: f64,
    pub lr_pose: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rates decay geometrically to this fraction by the last
    /// iteration of a stage.
    pub final_lr_factor: f64,
    /// Image-width fraction a unit step of any pose coordinate moves the
    /// projected face by (approximately).
    pub pose_unit: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr_coef: 1e-2,
            lr_pose: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            final_lr_factor: 0.1,
            pose_unit: 1.0 / 32.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub warmup_iterations: usize,
    pub iterations: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub reduction: Reduction,
    /// Relative improvement of the best objective that counts as progress.
    pub tolerance: f64,
    /// Refreshes without improvement before a stage stops.
    pub patience: usize,
    /// Warm start stops once the landmark term falls below this value.
    pub warmup_threshold: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub flow_every: usize,
    pub mask_rebuild_px: f64,
    pub route: TextureRoute,
    pub flow: FlowConfig,
    pub filter: GuidedFilter,
    pub pairs: Option<Vec<ViewPair>>,
    pub cut_landmarks: Option<Vec<usize>>,
    pub reg_weight: f64,
    pub edge_band: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            warmup_iterations: 300,
            iterations: 300,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            tolerance: 1e-5,
            patience: 5,
            warmup_threshold: 0.0,
            seed: 0,
            ablation: Ablation::Full,
            flow_every: 3,
            mask_rebuild_px: 0.0,
            route: TextureRoute::PerPixel,
            flow: FlowConfig::robust(),
            filter: GuidedFilter::default(),
            pairs: None,
            cut_landmarks: None,
            reg_weight: 1e-6,
            edge_band: 4,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidInput("tolerance must be positive".into()));
        }
        if self.flow_every == 0 {
            return Err(Error::InvalidInput("flow_every must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidInput("patience must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr_coef > 0.0 && a.lr_pose > 0.0 && a.eps > 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.final_lr_factor > 0.0 && a.final_lr_factor <= 1.0)
            || !(a.pose_unit > 0.0 && a.pose_unit.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "invalid optimizer settings {a:?}"
            )));
        }
        self.weights.validate()?;
        self.flow.validate()
    }

    /// Self-supervised loss settings for the configured ablation.
    pub fn selfsup(&self) -> SelfSupConfig {
        let (use_photo, use_align) = self.ablation.flags();
        SelfSupConfig {
            weights: self.weights,
            reduction: self.reduction,
            route: self.route,
            pairs: self.pairs.clone(),
            filter: self.filter,
            flow: self.flow,
            fill_seed: self.seed,
            cut_landmarks: self.cut_landmarks.clone(),
            use_landmark: true,
            use_photo,
            use_align,
            reg_weight: self.reg_weight,
            edge_band: self.edge_band,
        }
    }

    fn landmark_only(&self) -> SelfSupConfig {
        SelfSupConfig {
            use_photo: false,
            use_align: false,
            ..self.selfsup()
        }
    }
}

/// Adam moments over the flat optimizer vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update of `x` given the gradient and per-coordinate step sizes.
    pub fn step(&mut self, x: &mut [f64], g: &[f64], lr: &[f64], cfg: &AdamConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            x[i] -= lr[i] * mh / (vh.sqrt() + cfg.eps);
        }
    }
}

/// Mutable optimizer state of one fitting session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitState {
    pub params: Params,
    pub iteration: usize,
    /// Total objective of every iteration, in order.
    pub history: Vec<f64>,
    pub moments: AdamState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Warmup,
    Multiview,
}

/// One line of the fit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub stage: Stage,
    pub iteration: usize,
    /// True when flows (and possibly masks) were re-estimated before this
    /// evaluation.
    pub refreshed: bool,
    pub masks_rebuilt: bool,
    #[serde(flatten)]
    pub report: LossReport,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Final state; `params` holds the best parameters found.
    pub state: FitState,
    /// Objective report at the returned parameters.
    pub report: LossReport,
    pub converged: bool,
    pub log: Vec<IterationLog>,
    /// Whether the 10-iteration moving average of `history` never rose.
    pub smoothed_monotone: bool,
}

impl FitResult {
    pub fn params(&self) -> &Params {
        &self.state.params
    }

    /// The log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for entry in &self.log {
            out.push_str(&serde_json::to_string(entry).expect("log entries serialize"));
            out.push('\n');
        }
        out
    }
}

/// Maps parameters to and from the optimizer vector.
///
/// Pose coordinates are `(ρ ln f, ρα, ρβ, ργ, tx, ty) / ts` with `ρ` a
/// quarter of the image width (a rough face radius in pixels) and `ts` the
/// configured pose unit in pixels.
struct OptSpace {
    id_sigma: DVector<f64>,
    exp_sigma: DVector<f64>,
    ts: f64,
    rho: f64,
}

impl OptSpace {
    fn new(model: &MorphableModel, views: &[Observation], cfg: &AdamConfig) -> Self {
        let w = views[0].image.width() as f64;
        OptSpace {
            id_sigma: model.id_sigma().clone(),
            exp_sigma: model.exp_sigma().clone(),
            ts: w * cfg.pose_unit,
            rho: w / 4.0,
        }
    }

    /// `∂(pose)/∂(opt)` per pose coordinate at `pose`.
    fn pose_chain(&self, pose: &CameraPose) -> [f64; 6] {
        let a = self.ts / self.rho;
        [pose.f * a, a, a, a, self.ts, self.ts]
    }

    fn to_opt(&self, p: &Params) -> Vec<f64> {
        let mut x: Vec<f64> = p
            .shape
            .id
            .component_div(&self.id_sigma)
            .iter()
            .copied()
            .collect();
        x.extend(p.shape.exp.component_div(&self.exp_sigma).iter());
        for pose in &p.poses {
            let k = self.rho / self.ts;
            x.extend([
                pose.f.ln() * k,
                pose.alpha * k,
                pose.beta * k,
                pose.gamma * k,
                pose.tx / self.ts,
                pose.ty / self.ts,
            ]);
        }
        x
    }

    fn to_params(&self, x: &[f64]) -> Params {
        let (ni, ne) = (self.id_sigma.len(), self.exp_sigma.len());
        let shape = ShapeParams {
            id: DVector::from_fn(ni, |i, _| x[i] * self.id_sigma[i]),
            exp: DVector::from_fn(ne, |i, _| x[ni + i] * self.exp_sigma[i]),
        };
        let poses = x[ni + ne..]
            .chunks(6)
            .map(|c| {
                let a = self.ts / self.rho;
                CameraPose::new(
                    (c[0] * a).exp(),
                    c[1] * a,
                    c[2] * a,
                    c[3] * a,
                    c[4] * self.ts,
                    c[5] * self.ts,
                )
            })
            .collect();
        Params { shape, poses }
    }

    fn gradient(&self, g: &ParamGradient, p: &Params) -> Vec<f64> {
        let mut out: Vec<f64> = g.id.component_mul(&self.id_sigma).iter().copied().collect();
        out.extend(g.exp.component_mul(&self.exp_sigma).iter());
        for (gp, pose) in g.poses.iter().zip(&p.poses) {
            let c = self.pose_chain(pose);
            out.extend((0..6).map(|i| gp[i] * c[i]));
        }
        out
    }

    fn learning_rates(&self, n: usize, cfg: &AdamConfig, scale: f64) -> Vec<f64> {
        let nc = self.id_sigma.len() + self.exp_sigma.len();
        (0..n)
            .map(|i| scale * if i < nc { cfg.lr_coef } else { cfg.lr_pose })
            .collect()
    }
}

fn lr_scale(cfg: &AdamConfig, iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        1.0
    } else {
        cfg.final_lr_factor
            .powf(iteration as f64 / (total - 1) as f64)
    }
}

fn check_finite(iteration: usize, report: &LossReport, params: &Params) -> Result<()> {
    let grad_ok = report.gradient.as_ref().is_none_or(|g| g.is_finite());
    if !report.total.is_finite() || !grad_ok || !params.is_finite() {
        let dump = serde_json::to_string(params).unwrap_or_default();
        return Err(Error::Diverged {
            iteration,
            reason: format!(
                "non-finite objective {} or gradient; parameters: {dump}",
                report.total
            ),
        });
    }
    Ok(())
}

fn smoothed_monotone(history: &[f64]) -> bool {
    const WINDOW: usize = 10;
    if history.len() <= WINDOW {
        return true;
    }
    let avg: Vec<f64> = history
        .windows(WINDOW)
        .map(|w| w.iter().sum::<f64>() / WINDOW as f64)
        .collect();
    avg.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12))
}

/// Scale, rotation and translation of a weak-perspective camera that maps
/// `points` onto `observed` in the least-squares sense.
///
/// An affine 2×3 map is solved first and then projected onto the nearest
/// scaled pair of orthonormal rows.
pub fn procrustes_pose(points: &[Vector3<f64>], observed: &[Vector2<f64>]) -> Result<CameraPose> {
    Error::check_dim("landmarks", points.len(), observed.len())?;
    if points.len() < 4 {
        return Err(Error::Degenerate(
            "at least 4 landmarks are needed for pose initialization".into(),
        ));
    }
    let n = points.len() as f64;
    let pc = points.iter().sum::<Vector3<f64>>() / n;
    let qc = observed.iter().sum::<Vector2<f64>>() / n;
    let mut spp = Matrix3::zeros();
    let mut sqp = Matrix2x3::zeros();
    let mut sqq = nalgebra::Matrix2::zeros();
    for (p, q) in points.iter().zip(observed) {
        let (dp, dq) = (p - pc, q - qc);
        spp += dp * dp.transpose();
        sqp += dq * dp.transpose();
        sqq += dq * dq.transpose();
    }
    let sv2 = sqq.symmetric_eigenvalues();
    let (lo, hi) = (sv2.min(), sv2.max());
    if !(hi > 0.0) || lo <= 1e-10 * hi {
        return Err(Error::Degenerate("observed landmarks are collinear".into()));
    }
    let sv3 = spp.symmetric_eigenvalues();
    if sv3.min() <= 1e-10 * sv3.max() {
        return Err(Error::Degenerate(
            "model landmarks are coplanar or collinear".into(),
        ));
    }
    let inv = spp
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("model landmarks are coplanar or collinear".into()))?;
    let a = sqp * inv;
    let svd = a.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let f = 0.5 * (svd.singular_values[0] + svd.singular_values[1]);
    let rows = u * vt;
    let r0 = Vector3::new(rows[(0, 0)], rows[(0, 1)], rows[(0, 2)]);
    let r1 = Vector3::new(rows[(1, 0)], rows[(1, 1)], rows[(1, 2)]);
    let r2 = r0.cross(&r1);
    let r = Matrix3::from_rows(&[r0.transpose(), r1.transpose(), r2.transpose()]);
    let (alpha, beta, gamma) = euler_from_rotation(&r);
    let t = qc - (r * pc).xy() * f;
    Ok(CameraPose::new(f, alpha, beta, gamma, t.x, t.y))
}

fn check_views(model: &MorphableModel, views: &[Observation]) -> Result<()> {
    if views.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "at least 2 views are required, got {}",
            views.len()
        )));
    }
    for v in views {
        Error::check_dim("landmarks", model.landmark_count(), v.landmarks.len())?;
    }
    Ok(())
}

/// Procrustes pose per view followed by landmark plus prior refinement.
pub fn warmup_landmark_fit(
    model: &MorphableModel,
    views: &[Observation],
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_views(model, views)?;
    let mean = model.mean_mesh().landmarks();
    let poses = views
        .iter()
        .map(|v| procrustes_pose(&mean, &v.landmarks))
        .collect::<Result<Vec<_>>>()?;
    let init = Params {
        shape: ShapeParams::for_model(model),
        poses,
    };
    refine_landmarks(model, views, &init, cfg)
}

/// Residuals and Jacobian of the landmark plus prior objective in
/// optimizer coordinates; the objective is `|r|²`.
fn landmark_system(
    model: &MorphableModel,
    views: &[Observation],
    space: &OptSpace,
    x: &[f64],
    cfg: &FitConfig,
    want_jacobian: bool,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let params = space.to_params(x);
    let mesh = crate::model::assemble_shape(model, &params.shape)?;
    let (w, h) = views[0].image.dims();
    let diag = ((w * w + h * h) as f64).sqrt();
    let l = model.landmark_count();
    let (ni, ne) = (model.id_dims(), model.exp_dims());
    let nc = ni + ne;
    let rows = 2 * l * views.len() + nc;
    let mut r = DVector::zeros(rows);
    let mut j = if want_jacobian {
        DMatrix::zeros(rows, x.len())
    } else {
        DMatrix::zeros(0, 0)
    };
    let scale = match cfg.reduction {
        Reduction::Mean => 1.0 / (l as f64 * diag * diag),
        Reduction::Sum => 1.0,
    };
    let s = (cfg.weights.landmark * scale).sqrt();
    for (v, (pose, obs)) in params.poses.iter().zip(views).enumerate() {
        let deriv = PoseDerivatives::new(pose);
        let jp = deriv.point_jacobian() * s;
        let off = nc + 6 * v;
        for (k, &vi) in mesh.landmark_map.iter().enumerate() {
            let vert = mesh.vertices[vi];
            let row = 2 * (l * v + k);
            let res = (project_vertex(&vert, pose) - obs.landmarks[k]) * s;
            r[row] = res.x;
            r[row + 1] = res.y;
            if !want_jacobian {
                continue;
            }
            let bi = jp * model.id_basis().rows(3 * vi, 3);
            let be = jp * model.exp_basis().rows(3 * vi, 3);
            for c in 0..ni {
                let sig = model.id_sigma()[c];
                j[(row, c)] = bi[(0, c)] * sig;
                j[(row + 1, c)] = bi[(1, c)] * sig;
            }
            for c in 0..ne {
                let sig = model.exp_sigma()[c];
                j[(row, ni + c)] = be[(0, c)] * sig;
                j[(row + 1, ni + c)] = be[(1, c)] * sig;
            }
            let jpose = deriv.jacobian(&vert) * s;
            let chain = space.pose_chain(pose);
            for c in 0..6 {
                j[(row, off + c)] = jpose[(0, c)] * chain[c];
                j[(row + 1, off + c)] = jpose[(1, c)] * chain[c];
            }
        }
    }
    let sr = cfg.reg_weight.sqrt();
    for c in 0..nc {
        r[2 * l * views.len() + c] = sr * x[c];
        if want_jacobian {
            j[(2 * l * views.len() + c, c)] = sr;
        }
    }
    Ok((r, j))
}

/// Levenberg-Marquardt on the landmark term plus prior, starting at `init`.
///
/// Every trial step counts as one iteration; rejected steps raise the
/// damping. The stage stops after `patience` trials without a relative
/// decrease above `tolerance`, or when the landmark term drops below
/// `warmup_threshold`.
pub fn refine_landmarks(
    model: &MorphableModel,
    views: &[Observation],
    init: &Params,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_views(model, views)?;
    Error::check_dim("poses", views.len(), init.poses.len())?;
    let ss = cfg.landmark_only();
    let lin = Linearization::build(model, init, views, &ss)?;
    let space = OptSpace::new(model, views, &cfg.adam);
    let mut x = space.to_opt(init);
    let mut params = init.clone();
    let (mut r, mut jac) = landmark_system(model, views, &space, &x, cfg, true)?;
    let mut cost = r.norm_squared();
    let mut mu = 1e-3;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut stall = 0;
    let mut converged = cfg.warmup_iterations == 0;
    let mut iteration = 0;
    let mut report = selfsup_total(model, &params, views, &lin, &ss, false)?;
    let mut changed = false;
    loop {
        if changed {
            report = selfsup_total(model, &params, views, &lin, &ss, false)?;
            changed = false;
        }
        check_finite(iteration, &report, &params)?;
        history.push(report.total);
        log.push(IterationLog {
            stage: Stage::Warmup,
            iteration,
            refreshed: false,
            masks_rebuilt: false,
            report: report.clone(),
        });
        if iteration >= cfg.warmup_iterations {
            break;
        }
        if report.terms.landmark.unwrap_or(0.0) < cfg.warmup_threshold || stall >= cfg.patience {
            converged = true;
            break;
        }
        iteration += 1;
        let a = jac.tr_mul(&jac);
        let g = jac.tr_mul(&r);
        let floor = a.diagonal().max() * 1e-12 + f64::MIN_POSITIVE;
        let mut damped = a.clone();
        for i in 0..x.len() {
            damped[(i, i)] += mu * a[(i, i)].max(floor);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&(-&g))) else {
            mu *= 10.0;
            stall += 1;
            continue;
        };
        let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let (rc, _) = landmark_system(model, views, &space, &cand, cfg, false)?;
        let cc = rc.norm_squared();
        if cc.is_finite() && cc < cost {
            let rel = (cost - cc) / cost.max(f64::MIN_POSITIVE);
            x = cand;
            params = space.to_params(&x);
            (r, jac) = landmark_system(model, views, &space, &x, cfg, true)?;
            cost = cc;
            mu = (mu / 3.0).max(1e-12);
            changed = true;
            stall = if rel > cfg.tolerance { 0 } else { stall + 1 };
        } else {
            mu *= 2.0;
            stall += 1;
        }
    }
    let smoothed = smoothed_monotone(&history);
    Ok(FitResult {
        state: FitState {
            params,
            iteration,
            history,
            moments: AdamState::new(0),
        },
        report,
        converged,
        log,
        smoothed_monotone: smoothed,
    })
}

/// Minimizes the self-supervised objective from `init`.
pub fn fit_multiview(
    model: &MorphableModel,
    views: &[Observation],
    init: &Params,
    cfg: &FitConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    check_views(model, views)?;
    Error::check_dim("poses", views.len(), init.poses.len())?;
    let ss = cfg.selfsup();
    ss.validate(views.len())?;
    let space = OptSpace::new(model, views, &cfg.adam);
    let mut x = space.to_opt(init);
    let mut adam = AdamState::new(x.len());
    let mut lin = Linearization::build(model, init, views, &ss)?;
    let image_terms = ss.use_photo || ss.use_align;
    let mut history = Vec::new();
    let mut log = Vec::new();
    let mut best: Option<(f64, Params, LossReport)> = None;
    let mut stall = 0;
    let mut backoff = 1.0;
    let mut converged = false;
    let mut iteration = 0;
    loop {
        let mut params = if iteration == 0 {
            init.clone()
        } else {
            space.to_params(&x)
        };
        let refreshed = iteration == 0 || !image_terms || iteration % cfg.flow_every == 0;
        let mut masks_rebuilt = iteration == 0;
        if iteration > 0 && image_terms && refreshed {
            if lin.landmark_drift(model, &params)? >= cfg.mask_rebuild_px {
                lin = Linearization::build(model, &params, views, &ss)?;
                masks_rebuilt = true;
            } else {
                lin.refresh_flows(model, &params, views, &ss)?;
            }
        }
        let mut report = selfsup_total(model, &params, views, &lin, &ss, true)?;
        check_finite(iteration, &report, &params)?;
        history.push(report.total);
        log.push(IterationLog {
            stage: Stage::Multiview,
            iteration,
            refreshed,
            masks_rebuilt,
            report: LossReport {
                gradient: None,
                term_gradients: Vec::new(),
                ..report.clone()
            },
        });
        if refreshed {
            let improved = best
                .as_ref()
                .is_none_or(|(b, _, _)| report.total < b * (1.0 - cfg.tolerance));
            if best.as_ref().is_none_or(|(b, _, _)| report.total < *b) {
                best = Some((report.total, params.clone(), report.clone()));
            }
            if improved {
                stall = 0;
            } else {
                stall += 1;
                if image_terms {
                    // Return to the best point with a smaller step.
                    let (_, bp, _) = best.as_ref().expect("set above");
                    params = bp.clone();
                    x = space.to_opt(&params);
                    adam = AdamState::new(x.len());
                    backoff *= 0.5;
                    lin = Linearization::build(model, &params, views, &ss)?;
                    report = selfsup_total(model, &params, views, &lin, &ss, true)?;
                }
            }
            if stall >= cfg.patience {
                converged = true;
                break;
            }
        }
        if iteration >= cfg.iterations {
            break;
        }
        let g = space.gradient(
            report.gradient.as_ref().expect("gradient requested"),
            &params,
        );
        let scale = backoff * lr_scale(&cfg.adam, iteration, cfg.iterations);
        let lr = space.learning_rates(x.len(), &cfg.adam, scale);
        adam.step(&mut x, &g, &lr, &cfg.adam);
        iteration += 1;
    }
    let (_, params, mut report) = best.expect("iteration 0 is always evaluated");
    report.gradient = None;
    report.term_gradients.clear();
    let smoothed = smoothed_monotone(&history);
    Ok(FitResult {
        state: FitState {
            params,
            iteration,
            history,
            moments: adam,
        },
        report,
        converged,
        log,
        smoothed_monotone: smoothed,
    })
}

/// Warm start followed by multi-view fitting.
pub fn fit(model: &MorphableModel, views: &[Observation], cfg: &FitConfig) -> Result<FitResult> {
    let warm = warmup_landmark_fit(model, views, cfg)?;
    chain(warm, model, views, cfg)
}

/// Landmark refinement from `init` followed by multi-view fitting.
pub fn fit_from(
    model: &MorphableModel,
    views: &[Observation],
    init: &Params,
    cfg: &FitConfig,
) -> Result<FitResult> {
    let warm = refine_landmarks(model, views, init, cfg)?;
    chain(warm, model, views, cfg)
}

fn chain(
    warm: FitResult,
    model: &MorphableModel,
    views: &[Observation],
    cfg: &FitConfig,
) -> Result<FitResult> {
    let mut out = fit_multiview(model, views, warm.params(), cfg)?;
    let mut log = warm.log;
    log.append(&mut out.log);
    out.log = log;
    Ok(out)
}

/// Central finite differences of the self-supervised objective, with masks
/// and flows frozen in `lin`.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleGradient {
    /// Flat layout of [`Params::to_vec`].
    pub values: Vec<f64>,
    /// False where a ±step changes which triangle covers some pixel of a
    /// rendered pair; finite differences are not meaningful there.
    pub stable: Vec<bool>,
}

/// Step per coordinate: `epsilon · max(|x|, 1)`.
pub fn gradient_oracle(
    model: &MorphableModel,
    views: &[Observation],
    params: &Params,
    lin: &Linearization,
    cfg: &SelfSupConfig,
    epsilon: f64,
) -> Result<OracleGradient> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput("epsilon must be positive".into()));
    }
    let x = params.to_vec();
    let (w, h) = views[0].image.dims();
    let image_terms = cfg.use_photo || cfg.use_align;
    let tri_ids = |p: &Params| -> Result<Vec<Vec<u32>>> {
        if !image_terms {
            return Ok(Vec::new());
        }
        let mesh = crate::model::assemble_shape(model, &p.shape)?;
        Ok(lin
            .pairs
            .iter()
            .flat_map(|pl| [pl.pair.src, pl.pair.dst])
            .map(|v| rasterize(&mesh, &p.poses[v], w, h).tri_id)
            .collect())
    };
    let base = tri_ids(params)?;
    let mut values = Vec::with_capacity(x.len());
    let mut stable = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let step = epsilon * x[k].abs().max(1.0);
        let mut a = x.clone();
        a[k] += step;
        let mut b = x.clone();
        b[k] -= step;
        let (pa, pb) = (params.from_vec(&a), params.from_vec(&b));
        let fa = selfsup_total(model, &pa, views, lin, cfg, false)?.total;
        let fb = selfsup_total(model, &pb, views, lin, cfg, false)?.total;
        values.push((fa - fb) / (2.0 * step));
        stable.push(tri_ids(&pa)? == base && tri_ids(&pb)? == base);
    }
    Ok(OracleGradient { values, stable })
}
