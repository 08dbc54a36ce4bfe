//! Visibility masks.
//!
//! A rendered mask is the raster coverage of the shape in the destination
//! view with the half that may be hidden from the source view removed. An
//! observed mask starts from a coverage estimate, is snapped to image edges by
//! a guided filter and is then cut the same way using 2D landmarks.
//!
//! The cut follows a polyline through the projected (or detected) positions of
//! a few landmarks running down the nose. The polyline is sorted by `y` and
//! extended vertically above its first and below its last point. Pixels whose
//! centers lie strictly on the removed side are dropped.

use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, RgbImage};
use crate::model::{Mesh, TEMPLATE_NOSE_BRIDGE, TEMPLATE_NOSE_TIP};

use super::raster::{pixel_center, rasterize};

/// Image side removed by a cut.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Rendered,
    Observed,
    Coverage,
}

/// Where a mask came from: its kind, the view whose texture is compared and
/// the view whose image plane it lives in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: MaskKind,
    pub source_view: usize,
    pub target_view: usize,
    pub removed: Option<Side>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisibilityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
    pub provenance: Option<Provenance>,
}

impl VisibilityMask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        VisibilityMask {
            width,
            height,
            data: vec![fill; width * height],
            provenance: None,
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size mismatch");
        VisibilityMask {
            width,
            height,
            data,
            provenance: None,
        }
    }

    pub fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = Some(p);
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.data[idx]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn zip_with(&self, other: &VisibilityMask, f: impl Fn(bool, bool) -> bool) -> VisibilityMask {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "mask size mismatch"
        );
        VisibilityMask {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            provenance: None,
        }
    }

    pub fn union(&self, other: &VisibilityMask) -> VisibilityMask {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &VisibilityMask) -> VisibilityMask {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn is_subset_of(&self, other: &VisibilityMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Intersection over union; two empty masks have IoU 1.
    pub fn iou(&self, other: &VisibilityMask) -> f64 {
        let inter = self.intersection(other).count();
        let uni = self.union(other).count();
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_vec(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
    }

    /// Saves as an 8-bit grayscale PNG with values 0 and 255.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let img = image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) {
                255
            } else {
                0
            }])
        });
        img.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }
}

/// Landmarks defining the cut polyline for a model with `landmark_count`
/// landmarks: the nose line of the 17-point template or of the 68-point
/// convention. Other layouts must supply their own indices.
pub fn default_cut_landmarks(landmark_count: usize) -> Vec<usize> {
    match landmark_count {
        17 => vec![TEMPLATE_NOSE_BRIDGE, TEMPLATE_NOSE_TIP],
        68 => vec![27, 28, 29, 30],
        _ => Vec::new(),
    }
}

/// Side of the destination image that may be hidden from the source camera.
///
/// The source camera direction is expressed in the destination camera frame;
/// the half of the face on the opposite side of the nose is removed. Returns
/// `None` when the two cameras share the same horizontal direction.
pub fn occluded_side(pose_src: &CameraPose, pose_dst: &CameraPose) -> Option<Side> {
    let d = pose_dst.rotation() * pose_src.rotation().transpose() * nalgebra::Vector3::z();
    if d.x > 1e-3 {
        Some(Side::Left)
    } else if d.x < -1e-3 {
        Some(Side::Right)
    } else {
        None
    }
}

/// `x` of the cut polyline at height `y`.
fn polyline_x(sorted: &[Vector2<f64>], y: f64) -> f64 {
    let first = sorted[0];
    let last = sorted[sorted.len() - 1];
    if y <= first.y {
        return first.x;
    }
    if y >= last.y {
        return last.x;
    }
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if y >= a.y && y <= b.y {
            let dy = b.y - a.y;
            if dy <= 0.0 {
                return a.x;
            }
            return a.x + (b.x - a.x) * (y - a.y) / dy;
        }
    }
    last.x
}

/// Removes the pixels strictly on `side` of the polyline through `points`.
pub fn cut_side(mask: &mut VisibilityMask, points: &[Vector2<f64>], side: Side) {
    if points.is_empty() {
        return;
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.y.total_cmp(&b.y));
    for y in 0..mask.height {
        let xc = polyline_x(&sorted, y as f64 + 0.5);
        for x in 0..mask.width {
            let px = pixel_center(x, y).x;
            let remove = match side {
                Side::Left => px < xc,
                Side::Right => px > xc,
            };
            if remove {
                mask.set(x, y, false);
            }
        }
    }
}

/// Coverage of the mesh at `pose`.
pub fn coverage_mask(
    mesh: &Mesh,
    pose: &CameraPose,
    width: usize,
    height: usize,
) -> VisibilityMask {
    VisibilityMask::from_vec(
        width,
        height,
        rasterize(mesh, pose, width, height).coverage(),
    )
}

/// Coverage at `pose_dst` minus the `side` half, cut along the projected
/// `cut_landmarks` (indices into the mesh landmark map).
pub fn rendered_visibility_mask(
    mesh: &Mesh,
    pose_dst: &CameraPose,
    side: Option<Side>,
    cut_landmarks: &[usize],
    width: usize,
    height: usize,
) -> VisibilityMask {
    let mut mask = coverage_mask(mesh, pose_dst, width, height);
    if let Some(side) = side {
        let pts: Vec<_> = cut_landmarks
            .iter()
            .map(|&l| crate::camera::project_vertex(&mesh.vertices[mesh.landmark_map[l]], pose_dst))
            .collect();
        cut_side(&mut mask, &pts, side);
    }
    mask
}

/// Guided-filter settings for observed masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidedFilter {
    pub radius: usize,
    pub eps: f64,
}

impl Default for GuidedFilter {
    fn default() -> Self {
        GuidedFilter {
            radius: 4,
            eps: 1e-3,
        }
    }
}

impl GuidedFilter {
    /// Edge-preserving smoothing of `input` guided by `guide`.
    pub fn apply(&self, guide: &GrayImage, input: &GrayImage) -> GrayImage {
        let r = self.radius;
        let n = guide.data().len();
        let mean_i = guide.box_mean(r);
        let mean_p = input.box_mean(r);
        let ii = GrayImage::from_vec(
            guide.width(),
            guide.height(),
            guide.data().iter().map(|v| v * v).collect(),
        );
        let ip = GrayImage::from_vec(
            guide.width(),
            guide.height(),
            guide
                .data()
                .iter()
                .zip(input.data())
                .map(|(a, b)| a * b)
                .collect(),
        );
        let corr_i = ii.box_mean(r);
        let corr_ip = ip.box_mean(r);
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for k in 0..n {
            let var = corr_i.data()[k] - mean_i.data()[k] * mean_i.data()[k];
            let cov = corr_ip.data()[k] - mean_i.data()[k] * mean_p.data()[k];
            a[k] = cov / (var.max(0.0) + self.eps);
            b[k] = mean_p.data()[k] - a[k] * mean_i.data()[k];
        }
        let mean_a = GrayImage::from_vec(guide.width(), guide.height(), a).box_mean(r);
        let mean_b = GrayImage::from_vec(guide.width(), guide.height(), b).box_mean(r);
        GrayImage::from_vec(
            guide.width(),
            guide.height(),
            (0..n)
                .map(|k| mean_a.data()[k] * guide.data()[k] + mean_b.data()[k])
                .collect(),
        )
    }
}

/// Snaps `coverage` to the edges of `image` and cuts the `side` half along
/// the polyline through `cut_points` (2D landmark positions).
pub fn observed_visibility_mask(
    image: &RgbImage,
    coverage: &VisibilityMask,
    cut_points: &[Vector2<f64>],
    side: Option<Side>,
    filter: &GuidedFilter,
) -> VisibilityMask {
    assert_eq!(
        image.dims(),
        (coverage.width(), coverage.height()),
        "mask size mismatch"
    );
    let q = filter.apply(&image.to_gray(), &coverage.to_gray());
    let mut mask = VisibilityMask::from_vec(
        coverage.width(),
        coverage.height(),
        q.data().iter().map(|&v| v >= 0.5).collect(),
    );
    if let Some(side) = side {
        cut_side(&mut mask, cut_points, side);
    }
    mask
}
