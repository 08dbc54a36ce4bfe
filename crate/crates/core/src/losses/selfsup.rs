//! Self-supervised multi-view objective.
//!
//! For every directed pair `(src, dst)` the source image is transferred
//! through the current shape into the destination view and compared with the
//! observed destination image (photometric and flow alignment terms). The
//! landmark term is summed over all views.
//!
//! Masks and flows are computed once per [`Linearization`] and held fixed
//! while the objective and its gradient are evaluated; the fitter decides
//! when to rebuild them.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::camera::{project_vertex, CameraPose};
use crate::error::{Error, Result};
use crate::flow::FlowConfig;
use crate::imaging::{Rgb, RgbImage};
use crate::model::{assemble_shape, Mesh, MorphableModel};
use crate::render::{
    default_cut_landmarks, observed_visibility_mask, occluded_side, rendered_visibility_mask,
    transfer, transfer_backward, GuidedFilter, MaskKind, Provenance, TextureRoute, VisibilityMask,
};

use super::align::AlignmentLinearization;
use super::landmark::landmark_loss;
use super::photo::photometric_loss;
use super::supervised::reg_loss;
use super::{LossReport, LossWeights, ParamGradient, Params, Reduction};

/// One input view: an image and its 2D landmarks in landmark-map order.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: RgbImage,
    pub landmarks: Vec<Vector2<f64>>,
}

/// Directed pair: the texture of `src` is rendered into view `dst`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewPair {
    pub src: usize,
    pub dst: usize,
}

/// Pairs between the middle view and every other view, both directions.
///
/// For views `[A, B, C]` this is A→B, C→B, B→A, B→C.
pub fn default_pairs(views: usize) -> Vec<ViewPair> {
    let mid = views / 2;
    let others: Vec<usize> = (0..views).filter(|&v| v != mid).collect();
    let into = others.iter().map(|&v| ViewPair { src: v, dst: mid });
    let out = others.iter().map(|&v| ViewPair { src: mid, dst: v });
    into.chain(out).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfSupConfig {
    pub weights: LossWeights,
    pub reduction: Reduction,
    pub route: TextureRoute,
    /// Directed pairs; `None` uses [`default_pairs`].
    pub pairs: Option<Vec<ViewPair>>,
    pub filter: GuidedFilter,
    pub flow: FlowConfig,
    pub fill_seed: u64,
    /// Landmarks of the mask cut polyline; defaults by landmark count.
    pub cut_landmarks: Option<Vec<usize>>,
    pub use_landmark: bool,
    pub use_photo: bool,
    pub use_align: bool,
    /// Weight of the coefficient prior `Σ (x/σ)²`; 0 leaves it out.
    pub reg_weight: f64,
    /// Pixels shaded beyond the silhouette of transferred images.
    pub edge_band: usize,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        SelfSupConfig {
            weights: LossWeights::default(),
            reduction: Reduction::Mean,
            route: TextureRoute::PerPixel,
            pairs: None,
            filter: GuidedFilter::default(),
            flow: FlowConfig::robust(),
            fill_seed: 0x5eed,
            cut_landmarks: None,
            use_landmark: true,
            use_photo: true,
            use_align: true,
            reg_weight: 0.0,
            edge_band: 4,
        }
    }
}

impl SelfSupConfig {
    pub fn validate(&self, views: usize) -> Result<()> {
        self.weights.validate()?;
        self.flow.validate()?;
        if !(self.reg_weight >= 0.0 && self.reg_weight.is_finite()) {
            return Err(Error::InvalidInput("reg weight must be nonnegative".into()));
        }
        for p in &self.pairs_for(views) {
            if p.src >= views || p.dst >= views || p.src == p.dst {
                return Err(Error::InvalidInput(format!(
                    "invalid view pair {}→{} for {views} views",
                    p.src, p.dst
                )));
            }
        }
        Ok(())
    }

    pub fn pairs_for(&self, views: usize) -> Vec<ViewPair> {
        self.pairs.clone().unwrap_or_else(|| default_pairs(views))
    }

    fn cut(&self, landmark_count: usize) -> Vec<usize> {
        self.cut_landmarks
            .clone()
            .unwrap_or_else(|| default_cut_landmarks(landmark_count))
    }
}

/// Frozen masks (and flows) of one pair.
#[derive(Clone, Debug)]
pub struct PairLinearization {
    pub pair: ViewPair,
    pub mask_obs: VisibilityMask,
    pub mask_rend: VisibilityMask,
    pub align: Option<AlignmentLinearization>,
}

/// Everything held fixed while the objective is evaluated.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub pairs: Vec<PairLinearization>,
    /// Projected landmarks of every view when the masks were built.
    pub anchors: Vec<Vec<Vector2<f64>>>,
}

fn image_dims(views: &[Observation]) -> Result<(usize, usize)> {
    let first = views
        .first()
        .ok_or_else(|| Error::InvalidInput("no views".into()))?;
    let dims = first.image.dims();
    if views.iter().any(|v| v.image.dims() != dims) {
        return Err(Error::InvalidInput(
            "all views must share one image size".into(),
        ));
    }
    Ok(dims)
}

fn check_inputs(model: &MorphableModel, params: &Params, views: &[Observation]) -> Result<()> {
    Error::check_dim("views", views.len(), params.poses.len())?;
    for v in views {
        Error::check_dim("landmarks", model.landmark_count(), v.landmarks.len())?;
    }
    Ok(())
}

fn project_landmarks(mesh: &Mesh, pose: &CameraPose) -> Vec<Vector2<f64>> {
    mesh.landmarks()
        .iter()
        .map(|v| project_vertex(v, pose))
        .collect()
}

impl Linearization {
    /// Builds masks at `params` and, when the alignment term is on, flows.
    pub fn build(
        model: &MorphableModel,
        params: &Params,
        views: &[Observation],
        cfg: &SelfSupConfig,
    ) -> Result<Self> {
        check_inputs(model, params, views)?;
        cfg.validate(views.len())?;
        let (w, h) = image_dims(views)?;
        let mesh = assemble_shape(model, &params.shape)?;
        let cut = cfg.cut(model.landmark_count());
        let mut pairs = Vec::new();
        let image_terms = cfg.use_photo || cfg.use_align;
        for &pair in cfg.pairs_for(views.len()).iter().filter(|_| image_terms) {
            let (ps, pd) = (params.poses[pair.src], params.poses[pair.dst]);
            let rendered = transfer(
                cfg.route,
                &views[pair.src].image,
                &mesh,
                &ps,
                &pd,
                w,
                h,
                cfg.edge_band,
            );
            let side = occluded_side(&ps, &pd);
            let valid = VisibilityMask::from_vec(w, h, rendered.valid.clone());
            let mask_rend = rendered_visibility_mask(&mesh, &pd, side, &cut, w, h)
                .intersection(&valid)
                .with_provenance(Provenance {
                    kind: MaskKind::Rendered,
                    source_view: pair.src,
                    target_view: pair.dst,
                    removed: side,
                });
            let coverage = VisibilityMask::from_vec(w, h, rendered.raster.coverage());
            let cut_pts: Vec<_> = cut.iter().map(|&l| views[pair.dst].landmarks[l]).collect();
            let mask_obs = observed_visibility_mask(
                &views[pair.dst].image,
                &coverage,
                &cut_pts,
                side,
                &cfg.filter,
            )
            .with_provenance(Provenance {
                kind: MaskKind::Observed,
                source_view: pair.src,
                target_view: pair.dst,
                removed: side,
            });
            let align = if cfg.use_align {
                Some(AlignmentLinearization::build(
                    &views[pair.dst].image,
                    &rendered.image,
                    &mask_obs,
                    &mask_rend,
                    cfg.fill_seed,
                    &cfg.flow,
                )?)
            } else {
                None
            };
            pairs.push(PairLinearization {
                pair,
                mask_obs,
                mask_rend,
                align,
            });
        }
        let anchors = params
            .poses
            .iter()
            .map(|p| project_landmarks(&mesh, p))
            .collect();
        Ok(Linearization { pairs, anchors })
    }

    /// Re-estimates the flows at `params`, keeping the masks.
    pub fn refresh_flows(
        &mut self,
        model: &MorphableModel,
        params: &Params,
        views: &[Observation],
        cfg: &SelfSupConfig,
    ) -> Result<()> {
        if !cfg.use_align {
            return Ok(());
        }
        let (w, h) = image_dims(views)?;
        let mesh = assemble_shape(model, &params.shape)?;
        for pl in &mut self.pairs {
            let (ps, pd) = (params.poses[pl.pair.src], params.poses[pl.pair.dst]);
            let rendered = transfer(
                cfg.route,
                &views[pl.pair.src].image,
                &mesh,
                &ps,
                &pd,
                w,
                h,
                cfg.edge_band,
            );
            pl.align = Some(AlignmentLinearization::build(
                &views[pl.pair.dst].image,
                &rendered.image,
                &pl.mask_obs,
                &pl.mask_rend,
                cfg.fill_seed,
                &cfg.flow,
            )?);
        }
        Ok(())
    }

    /// Median displacement (pixels) of projected landmarks since the build.
    pub fn landmark_drift(&self, model: &MorphableModel, params: &Params) -> Result<f64> {
        let mesh = assemble_shape(model, &params.shape)?;
        let mut d: Vec<f64> = params
            .poses
            .iter()
            .zip(&self.anchors)
            .flat_map(|(p, a)| {
                project_landmarks(&mesh, p)
                    .into_iter()
                    .zip(a.clone())
                    .map(|(x, y)| (x - y).norm())
                    .collect::<Vec<_>>()
            })
            .collect();
        if d.is_empty() {
            return Ok(0.0);
        }
        d.sort_by(f64::total_cmp);
        Ok(d[d.len() / 2])
    }
}

/// Chains pixel gradients of one pair into `grad` (vertex part in `flat`).
#[allow(clippy::too_many_arguments)]
fn backward_pair(
    cfg: &SelfSupConfig,
    views: &[Observation],
    mesh: &Mesh,
    params: &Params,
    pair: ViewPair,
    rendered: &crate::render::Rendered,
    d_pixels: &[Rgb],
    flat: &mut DVector<f64>,
    grad: &mut ParamGradient,
) {
    let (ps, pd) = (params.poses[pair.src], params.poses[pair.dst]);
    let g = transfer_backward(
        cfg.route,
        &views[pair.src].image,
        mesh,
        &ps,
        &pd,
        rendered,
        d_pixels,
    );
    for (i, v) in g.vertices.iter().enumerate() {
        flat[3 * i] += v.x;
        flat[3 * i + 1] += v.y;
        flat[3 * i + 2] += v.z;
    }
    for k in 0..6 {
        grad.poses[pair.src][k] += g.pose_src[k];
        grad.poses[pair.dst][k] += g.pose_dst[k];
    }
}

/// `λ5·landmark + λ6·photo + λ7·align` (plus the optional prior) at
/// `params`, with masks and flows taken from `lin`.
pub fn selfsup_total(
    model: &MorphableModel,
    params: &Params,
    views: &[Observation],
    lin: &Linearization,
    cfg: &SelfSupConfig,
    with_gradient: bool,
) -> Result<LossReport> {
    check_inputs(model, params, views)?;
    let (w, h) = image_dims(views)?;
    let diag = ((w * w + h * h) as f64).sqrt();
    let nviews = views.len();
    let mesh = assemble_shape(model, &params.shape)?;
    let mut report = LossReport::new();
    let wts = &cfg.weights;
    let mut total_grad = ParamGradient::for_model(model, nviews);

    if cfg.use_landmark {
        let mut value = 0.0;
        let mut g = ParamGradient::for_model(model, nviews);
        let mut flat = DVector::zeros(3 * model.vertex_count());
        for (v, (pose, obs)) in params.poses.iter().zip(views).enumerate() {
            let t = landmark_loss(&mesh, pose, &obs.landmarks, diag, cfg.reduction)?;
            value += t.value;
            for (vi, d) in &t.d_vertices {
                for c in 0..3 {
                    flat[3 * vi + c] += d[c];
                }
            }
            g.poses[v] = t.d_pose;
        }
        report.terms.landmark = Some(value);
        report.weights.landmark = Some(wts.landmark);
        if with_gradient {
            g.add_vertex_gradient(model, &flat);
            total_grad.add_scaled(&g, wts.landmark);
            report.term_gradients.push(("landmark", g));
        }
    }

    if cfg.reg_weight > 0.0 {
        let (value, gi, ge) = reg_loss(&params.shape, model)?;
        report.terms.reg = Some(value);
        report.weights.reg = Some(cfg.reg_weight);
        if with_gradient {
            let mut g = ParamGradient::for_model(model, nviews);
            g.id = gi;
            g.exp = ge;
            total_grad.add_scaled(&g, cfg.reg_weight);
            report.term_gradients.push(("reg", g));
        }
    }

    if cfg.use_photo || cfg.use_align {
        let mut photo = 0.0;
        let mut align = 0.0;
        let nv = 3 * model.vertex_count();
        let mut g_photo = ParamGradient::for_model(model, nviews);
        let mut g_align = ParamGradient::for_model(model, nviews);
        let mut flat_photo = DVector::zeros(nv);
        let mut flat_align = DVector::zeros(nv);
        for pl in &lin.pairs {
            let pair = pl.pair;
            let (ps, pd) = (params.poses[pair.src], params.poses[pair.dst]);
            let rendered = transfer(
                cfg.route,
                &views[pair.src].image,
                &mesh,
                &ps,
                &pd,
                w,
                h,
                cfg.edge_band,
            );
            if cfg.use_photo {
                let t = photometric_loss(
                    &views[pair.dst].image,
                    &rendered.image,
                    &pl.mask_obs,
                    &pl.mask_rend,
                    cfg.reduction,
                );
                photo += t.value;
                if let Some(warn) = t.warning {
                    report
                        .warnings
                        .push(format!("pair {}→{}: {warn}", pair.src, pair.dst));
                }
                if with_gradient {
                    backward_pair(
                        cfg,
                        views,
                        &mesh,
                        params,
                        pair,
                        &rendered,
                        &t.d_rendered,
                        &mut flat_photo,
                        &mut g_photo,
                    );
                }
            }
            if cfg.use_align {
                let al = pl.align.as_ref().ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "pair {}→{} has no flow linearization",
                        pair.src, pair.dst
                    ))
                })?;
                let t = al.evaluate(&rendered.image, cfg.reduction);
                align += t.value;
                if let Some(warn) = t.warning {
                    report
                        .warnings
                        .push(format!("pair {}→{}: {warn}", pair.src, pair.dst));
                }
                if with_gradient {
                    backward_pair(
                        cfg,
                        views,
                        &mesh,
                        params,
                        pair,
                        &rendered,
                        &t.d_rendered,
                        &mut flat_align,
                        &mut g_align,
                    );
                }
            }
        }
        if cfg.use_photo {
            report.terms.photo = Some(photo);
            report.weights.photo = Some(wts.photo);
            if with_gradient {
                g_photo.add_vertex_gradient(model, &flat_photo);
                total_grad.add_scaled(&g_photo, wts.photo);
                report.term_gradients.push(("photo", g_photo));
            }
        }
        if cfg.use_align {
            report.terms.align = Some(align);
            report.weights.align = Some(wts.align);
            if with_gradient {
                g_align.add_vertex_gradient(model, &flat_align);
                total_grad.add_scaled(&g_align, wts.align);
                report.term_gradients.push(("align", g_align));
            }
        }
    }

    report.total = report.weighted_sum();
    if with_gradient {
        report.gradient = Some(total_grad);
    }
    Ok(report)
}
