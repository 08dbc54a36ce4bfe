//! Z-buffered triangle rasterization.
//!
//! A pixel is covered by a triangle when its center lies inside the projected
//! triangle or on its boundary. Only front-facing triangles are drawn: in the
//! y-down image frame these have a positive signed area
//! `(q1 - q0) × (q2 - q0)`. Barycentric weights are computed in the 2D image
//! plane. Larger depth wins; exactly equal depths go to the lower triangle
//! index.

use nalgebra::Vector2;

use crate::camera::{project_mesh, CameraPose};
use crate::model::{Mesh, Triangle};

/// Triangle id of uncovered pixels.
pub const BACKGROUND: u32 = u32::MAX;

/// Signed areas at or below this are treated as degenerate.
pub const MIN_AREA: f64 = 1e-12;

/// Per-pixel rasterization output, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterBuffers {
    pub width: usize,
    pub height: usize,
    pub tri_id: Vec<u32>,
    pub bary: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
}

impl RasterBuffers {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        RasterBuffers {
            width,
            height,
            tri_id: vec![BACKGROUND; n],
            bary: vec![[0.0; 3]; n],
            depth: vec![f64::NEG_INFINITY; n],
        }
    }

    pub fn is_covered(&self, idx: usize) -> bool {
        self.tri_id[idx] != BACKGROUND
    }

    pub fn covered_count(&self) -> usize {
        self.tri_id.iter().filter(|&&t| t != BACKGROUND).count()
    }

    /// Coverage as a per-pixel boolean vector.
    pub fn coverage(&self) -> Vec<bool> {
        self.tri_id.iter().map(|&t| t != BACKGROUND).collect()
    }
}

/// Center of pixel `(x, y)`.
#[inline]
pub fn pixel_center(x: usize, y: usize) -> Vector2<f64> {
    Vector2::new(x as f64 + 0.5, y as f64 + 0.5)
}

#[inline]
pub(crate) fn edge(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

/// Signed area (times two) of a projected triangle.
#[inline]
pub fn signed_area(q0: &Vector2<f64>, q1: &Vector2<f64>, q2: &Vector2<f64>) -> f64 {
    edge(q0, q1, q2)
}

/// Projects and rasterizes a mesh.
pub fn rasterize(mesh: &Mesh, pose: &CameraPose, width: usize, height: usize) -> RasterBuffers {
    let proj = project_mesh(mesh, pose);
    rasterize_projected(&proj.points, &proj.depths, &mesh.triangles, width, height)
}

/// Rasterizes already projected vertices.
pub fn rasterize_projected(
    points: &[Vector2<f64>],
    depths: &[f64],
    triangles: &[Triangle],
    width: usize,
    height: usize,
) -> RasterBuffers {
    let mut buf = RasterBuffers::empty(width, height);
    for (t, tri) in triangles.iter().enumerate() {
        let (q0, q1, q2) = (points[tri[0]], points[tri[1]], points[tri[2]]);
        let area = signed_area(&q0, &q1, &q2);
        if !(area > MIN_AREA) || !area.is_finite() {
            continue;
        }
        let (d0, d1, d2) = (depths[tri[0]], depths[tri[1]], depths[tri[2]]);
        let min_x = q0.x.min(q1.x).min(q2.x);
        let max_x = q0.x.max(q1.x).max(q2.x);
        let min_y = q0.y.min(q1.y).min(q2.y);
        let max_y = q0.y.max(q1.y).max(q2.y);
        // Pixel x is a candidate when min_x <= x + 0.5 <= max_x.
        let x0 = (min_x - 0.5).ceil().max(0.0);
        let x1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (min_y - 0.5).ceil().max(0.0);
        let y1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for y in y0 as usize..=y1 as usize {
            for x in x0 as usize..=x1 as usize {
                let p = pixel_center(x, y);
                let w0 = edge(&q1, &q2, &p);
                let w1 = edge(&q2, &q0, &p);
                let w2 = edge(&q0, &q1, &p);
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let b = [w0 / area, w1 / area, w2 / area];
                let z = b[0] * d0 + b[1] * d1 + b[2] * d2;
                let idx = y * width + x;
                // Triangles arrive in index order, so a strict test keeps the
                // lower index on ties.
                if z > buf.depth[idx] {
                    buf.depth[idx] = z;
                    buf.tri_id[idx] = t as u32;
                    buf.bary[idx] = b;
                }
            }
        }
    }
    buf
}

/// Copy of `raster` in which uncovered pixels up to `band` pixels
/// (chessboard distance) from the coverage take the triangle of a nearest
/// covered pixel, with barycentrics extrapolated to their centers.
///
/// Ties go to the first neighbor in row-major scan order, so the result is
/// deterministic. Depths of extended pixels stay at `-∞`.
pub fn extend_footprint(
    raster: &RasterBuffers,
    points: &[Vector2<f64>],
    triangles: &[Triangle],
    band: usize,
) -> RasterBuffers {
    let mut out = raster.clone();
    if band == 0 {
        return out;
    }
    let (w, h) = (raster.width, raster.height);
    let mut dist: Vec<usize> = raster
        .tri_id
        .iter()
        .map(|&t| if t == BACKGROUND { usize::MAX } else { 0 })
        .collect();
    for layer in 1..=band {
        let mut assigned = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let idx = y * w + x;
                if dist[idx] != usize::MAX {
                    continue;
                }
                let mut found = None;
                'search: for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let n = ny * w + nx;
                        if dist[n] == layer - 1 {
                            found = Some(out.tri_id[n]);
                            break 'search;
                        }
                    }
                }
                if let Some(t) = found {
                    assigned.push((idx, t));
                }
            }
        }
        if assigned.is_empty() {
            break;
        }
        for (idx, t) in assigned {
            dist[idx] = layer;
            let tri = triangles[t as usize];
            let (q0, q1, q2) = (points[tri[0]], points[tri[1]], points[tri[2]]);
            let area = signed_area(&q0, &q1, &q2);
            let p = pixel_center(idx % w, idx / w);
            out.tri_id[idx] = t;
            out.bary[idx] = [
                edge(&q1, &q2, &p) / area,
                edge(&q2, &q0, &p) / area,
                edge(&q0, &q1, &p) / area,
            ];
        }
    }
    out
}
