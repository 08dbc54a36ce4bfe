//! Texture sampling and cross-view projection.
//!
//! Two routes move colors from a source view into a destination view:
//!
//! * [`TextureRoute::PerVertex`]: every vertex fetches its color from the
//!   source image ([`sample_texture`]) and the mesh is rendered with
//!   barycentrically blended vertex colors ([`render_textured`]).
//! * [`TextureRoute::PerPixel`]: every destination pixel is mapped to its
//!   surface point through the raster buffers, the surface point is projected
//!   into the source view and the source image is sampled there
//!   ([`cross_project`]). Under weak perspective the projection is affine, so
//!   the source position is the same barycentric blend of the source
//!   projections of the triangle corners.
//!
//! Neither route handles occlusion in the source view; masks do.
//!
//! Backward passes hold the triangle id of every pixel fixed and
//! differentiate through the barycentric weights and the bilinear sample
//! positions.
//!
//! [`transfer`] can shade a band of pixels around the coverage by
//! extrapolating the nearest covered triangle (see
//! [`extend_footprint`](super::raster::extend_footprint)). Residuals near the
//! silhouette then change continuously with the parameters instead of
//! jumping to the background color.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};

use crate::camera::{project_mesh, CameraPose, PoseDerivatives, Projection};
use crate::imaging::{Rgb, RgbImage};
use crate::model::Mesh;

use super::raster::{extend_footprint, rasterize_projected, RasterBuffers};

/// Per-vertex colors with validity flags.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureMap {
    pub colors: Vec<Rgb>,
    pub valid: Vec<bool>,
}

impl TextureMap {
    pub fn uniform(vertices: usize, color: Rgb) -> Self {
        TextureMap {
            colors: vec![color; vertices],
            valid: vec![true; vertices],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureRoute {
    PerVertex,
    #[default]
    PerPixel,
}

/// A rendered view.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: RgbImage,
    pub raster: RasterBuffers,
    /// Shaded pixels: `raster` plus any extrapolated band.
    pub footprint: RasterBuffers,
    /// Covered pixels whose color comes only from valid texture.
    pub valid: Vec<bool>,
}

/// Whether a continuous position lies inside the image rectangle.
#[inline]
pub fn inside_image(p: &Vector2<f64>, width: usize, height: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= width as f64 && p.y <= height as f64
}

/// Fetches a color for every vertex from `image` at its projection under
/// `pose`. Vertices projecting outside the image are flagged invalid and
/// take the clamped border color.
pub fn sample_texture(image: &RgbImage, mesh: &Mesh, pose: &CameraPose) -> TextureMap {
    let proj = project_mesh(mesh, pose);
    let (w, h) = image.dims();
    let colors = proj.points.iter().map(|p| image.sample(*p)).collect();
    let valid = proj.points.iter().map(|p| inside_image(p, w, h)).collect();
    TextureMap { colors, valid }
}

/// Renders the mesh with blended vertex colors; uncovered pixels get
/// `background`.
pub fn render_textured(
    mesh: &Mesh,
    texture: &TextureMap,
    pose: &CameraPose,
    width: usize,
    height: usize,
    background: Rgb,
) -> Rendered {
    render_textured_banded(mesh, texture, pose, width, height, background, 0)
}

fn render_textured_banded(
    mesh: &Mesh,
    texture: &TextureMap,
    pose: &CameraPose,
    width: usize,
    height: usize,
    background: Rgb,
    band: usize,
) -> Rendered {
    assert_eq!(
        texture.colors.len(),
        mesh.vertices.len(),
        "texture length must equal V"
    );
    let proj = project_mesh(mesh, pose);
    let raster = rasterize_projected(&proj.points, &proj.depths, &mesh.triangles, width, height);
    let footprint = extend_footprint(&raster, &proj.points, &mesh.triangles, band);
    let mut image = RgbImage::new(width, height, background);
    let mut valid = vec![false; width * height];
    for idx in 0..width * height {
        let t = footprint.tri_id[idx];
        if t == super::BACKGROUND {
            continue;
        }
        let tri = mesh.triangles[t as usize];
        let b = footprint.bary[idx];
        let mut c = [0.0; 3];
        for k in 0..3 {
            let vc = texture.colors[tri[k]];
            for ch in 0..3 {
                c[ch] += b[k] * vc[ch];
            }
        }
        image.pixels_mut()[idx] = c;
        valid[idx] = raster.is_covered(idx) && tri.iter().all(|&v| texture.valid[v]);
    }
    Rendered {
        image,
        raster,
        footprint,
        valid,
    }
}

/// Renders `source` as seen through the shape from `pose_dst`, sampling the
/// source image per destination pixel. Uncovered pixels are black.
pub fn cross_project(
    source: &RgbImage,
    mesh: &Mesh,
    pose_src: &CameraPose,
    pose_dst: &CameraPose,
    width: usize,
    height: usize,
) -> Rendered {
    let src = project_mesh(mesh, pose_src);
    let dst = project_mesh(mesh, pose_dst);
    cross_project_projected(source, mesh, &src, &dst, width, height, 0)
}

pub(crate) fn cross_project_projected(
    source: &RgbImage,
    mesh: &Mesh,
    src: &Projection,
    dst: &Projection,
    width: usize,
    height: usize,
    band: usize,
) -> Rendered {
    let raster = rasterize_projected(&dst.points, &dst.depths, &mesh.triangles, width, height);
    let footprint = extend_footprint(&raster, &dst.points, &mesh.triangles, band);
    let mut image = RgbImage::new(width, height, [0.0; 3]);
    let mut valid = vec![false; width * height];
    let (sw, sh) = source.dims();
    for idx in 0..width * height {
        let t = footprint.tri_id[idx];
        if t == super::BACKGROUND {
            continue;
        }
        let tri = mesh.triangles[t as usize];
        let b = footprint.bary[idx];
        let s = src.points[tri[0]] * b[0] + src.points[tri[1]] * b[1] + src.points[tri[2]] * b[2];
        image.pixels_mut()[idx] = source.sample(s);
        valid[idx] = raster.is_covered(idx) && inside_image(&s, sw, sh);
    }
    Rendered {
        image,
        raster,
        footprint,
        valid,
    }
}

/// Transfers `source` from `pose_src` to `pose_dst` along `route`,
/// shading `band` extra pixels around the coverage.
#[allow(clippy::too_many_arguments)]
pub fn transfer(
    route: TextureRoute,
    source: &RgbImage,
    mesh: &Mesh,
    pose_src: &CameraPose,
    pose_dst: &CameraPose,
    width: usize,
    height: usize,
    band: usize,
) -> Rendered {
    match route {
        TextureRoute::PerPixel => {
            let src = project_mesh(mesh, pose_src);
            let dst = project_mesh(mesh, pose_dst);
            cross_project_projected(source, mesh, &src, &dst, width, height, band)
        }
        TextureRoute::PerVertex => {
            let tex = sample_texture(source, mesh, pose_src);
            render_textured_banded(mesh, &tex, pose_dst, width, height, [0.0; 3], band)
        }
    }
}

/// Gradient of a scalar w.r.t. vertex positions and both poses.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferGradient {
    pub vertices: Vec<Vector3<f64>>,
    pub pose_src: [f64; 6],
    pub pose_dst: [f64; 6],
}

impl TransferGradient {
    pub fn zeros(vertices: usize) -> Self {
        TransferGradient {
            vertices: vec![Vector3::zeros(); vertices],
            pose_src: [0.0; 6],
            pose_dst: [0.0; 6],
        }
    }
}

/// Inverse of `[[q0 q1 q2]; [1 1 1]]`, mapping `[p; 1]` to barycentrics.
fn bary_matrix_inverse(q: [Vector2<f64>; 3]) -> Option<Matrix3<f64>> {
    Matrix3::new(
        q[0].x, q[1].x, q[2].x, q[0].y, q[1].y, q[2].y, 1.0, 1.0, 1.0,
    )
    .try_inverse()
}

/// Backward pass of [`transfer`].
///
/// `d_pixels` is `∂L/∂(rendered pixel)` per pixel and channel; pixels with
/// zero gradient are skipped. `rendered` must be the forward output for the
/// same inputs.
pub fn transfer_backward(
    route: TextureRoute,
    source: &RgbImage,
    mesh: &Mesh,
    pose_src: &CameraPose,
    pose_dst: &CameraPose,
    rendered: &Rendered,
    d_pixels: &[Rgb],
) -> TransferGradient {
    let src = project_mesh(mesh, pose_src);
    let dst = project_mesh(mesh, pose_dst);
    let (d_src, d_dst) = match route {
        TextureRoute::PerPixel => per_pixel_backward(source, mesh, &src, &dst, rendered, d_pixels),
        TextureRoute::PerVertex => {
            per_vertex_backward(source, mesh, &src, &dst, rendered, d_pixels)
        }
    };
    chain_to_vertices(mesh, pose_src, pose_dst, &d_src, &d_dst)
}

/// Chains gradients w.r.t. projected positions into vertices and poses.
pub(crate) fn chain_to_vertices(
    mesh: &Mesh,
    pose_src: &CameraPose,
    pose_dst: &CameraPose,
    d_src: &[Vector2<f64>],
    d_dst: &[Vector2<f64>],
) -> TransferGradient {
    let ds = PoseDerivatives::new(pose_src);
    let dd = PoseDerivatives::new(pose_dst);
    let js = ds.point_jacobian();
    let jd = dd.point_jacobian();
    let mut out = TransferGradient::zeros(mesh.vertices.len());
    for (i, v) in mesh.vertices.iter().enumerate() {
        let (gs, gd) = (d_src[i], d_dst[i]);
        if gs != Vector2::zeros() {
            out.vertices[i] += js.transpose() * gs;
            ds.accumulate(v, &gs, &mut out.pose_src);
        }
        if gd != Vector2::zeros() {
            out.vertices[i] += jd.transpose() * gd;
            dd.accumulate(v, &gd, &mut out.pose_dst);
        }
    }
    out
}

/// Returns `(∂L/∂a_i, ∂L/∂q_i)` for source projections `a` and destination
/// projections `q`.
pub(crate) fn per_pixel_backward(
    source: &RgbImage,
    mesh: &Mesh,
    src: &Projection,
    dst: &Projection,
    rendered: &Rendered,
    d_pixels: &[Rgb],
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let n = mesh.vertices.len();
    let mut d_src = vec![Vector2::zeros(); n];
    let mut d_dst = vec![Vector2::zeros(); n];
    let raster = &rendered.footprint;
    for (idx, g) in d_pixels.iter().enumerate() {
        let t = raster.tri_id[idx];
        if t == super::BACKGROUND || *g == [0.0; 3] {
            continue;
        }
        let tri = mesh.triangles[t as usize];
        let b = raster.bary[idx];
        let a = [src.points[tri[0]], src.points[tri[1]], src.points[tri[2]]];
        let q = [dst.points[tri[0]], dst.points[tri[1]], dst.points[tri[2]]];
        let s = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let (_, grad) = source.sample_with_gradient(s);
        // ∂L/∂s = Σ_c g_c ∇I_c(s)
        let gs = Vector2::new(
            g[0] * grad[0][0] + g[1] * grad[0][1] + g[2] * grad[0][2],
            g[0] * grad[1][0] + g[1] * grad[1][1] + g[2] * grad[1][2],
        );
        let Some(minv) = bary_matrix_inverse(q) else {
            continue;
        };
        // s = N b, b = M⁻¹ [p; 1]; ∂s/∂q_i = -b_i A with A = (N M⁻¹)[:, 0..2].
        let nmat = nalgebra::Matrix2x3::from_columns(&a);
        let am: Matrix2<f64> = (nmat * minv).fixed_columns::<2>(0).into_owned();
        let back = am.transpose() * gs;
        for k in 0..3 {
            d_src[tri[k]] += gs * b[k];
            d_dst[tri[k]] -= back * b[k];
        }
    }
    (d_src, d_dst)
}

fn per_vertex_backward(
    source: &RgbImage,
    mesh: &Mesh,
    src: &Projection,
    dst: &Projection,
    rendered: &Rendered,
    d_pixels: &[Rgb],
) -> (Vec<Vector2<f64>>, Vec<Vector2<f64>>) {
    let n = mesh.vertices.len();
    let mut d_color = vec![[0.0f64; 3]; n];
    let mut d_dst = vec![Vector2::zeros(); n];
    let colors: Vec<Rgb> = src.points.iter().map(|p| source.sample(*p)).collect();
    let raster = &rendered.footprint;
    for (idx, g) in d_pixels.iter().enumerate() {
        let t = raster.tri_id[idx];
        if t == super::BACKGROUND || *g == [0.0; 3] {
            continue;
        }
        let tri = mesh.triangles[t as usize];
        let b = raster.bary[idx];
        for k in 0..3 {
            for c in 0..3 {
                d_color[tri[k]][c] += b[k] * g[c];
            }
        }
        let q = [dst.points[tri[0]], dst.points[tri[1]], dst.points[tri[2]]];
        let Some(minv) = bary_matrix_inverse(q) else {
            continue;
        };
        // color = C b; ∂color/∂q_i = -b_i K with K = (C M⁻¹)[:, 0..2].
        let cmat = Matrix3::from_columns(&[
            Vector3::from(colors[tri[0]]),
            Vector3::from(colors[tri[1]]),
            Vector3::from(colors[tri[2]]),
        ]);
        let k2 = (cmat * minv).fixed_columns::<2>(0).into_owned();
        let back = k2.transpose() * Vector3::from(*g);
        for k in 0..3 {
            d_dst[tri[k]] -= back * b[k];
        }
    }
    let d_src = src
        .points
        .iter()
        .zip(&d_color)
        .map(|(p, dc)| {
            if *dc == [0.0; 3] {
                return Vector2::zeros();
            }
            let (_, grad) = source.sample_with_gradient(*p);
            Vector2::new(
                dc[0] * grad[0][0] + dc[1] * grad[0][1] + dc[2] * grad[0][2],
                dc[0] * grad[1][0] + dc[1] * grad[1][1] + dc[2] * grad[1][2],
            )
        })
        .collect();
    (d_src, d_dst)
}

/// Maps a destination pixel center to its source-image position, if covered.
pub fn source_position(
    raster: &RasterBuffers,
    mesh: &Mesh,
    src: &Projection,
    x: usize,
    y: usize,
) -> Option<Vector2<f64>> {
    let idx = y * raster.width + x;
    let t = raster.tri_id[idx];
    if t == super::BACKGROUND {
        return None;
    }
    let tri = mesh.triangles[t as usize];
    let b = raster.bary[idx];
    Some(src.points[tri[0]] * b[0] + src.points[tri[1]] * b[1] + src.points[tri[2]] * b[2])
}
