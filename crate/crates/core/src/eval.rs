//! Shape error between a fitted mesh and a ground-truth mesh.
//!
//! [`rigid_align`] brings the prediction onto the truth with a closed-form
//! similarity over landmark correspondences and refines it with
//! point-to-plane ICP. [`point_to_plane_error`] then measures, for every
//! predicted vertex, the distance to the closest point of the truth surface:
//! the distance to the plane of the nearest triangle when the foot of the
//! perpendicular lies inside it, the distance to its boundary otherwise.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::imaging::{Rgb, RgbImage};
use crate::model::Mesh;
use crate::render::{render_textured, TextureMap};

/// `x ↦ s R x + t`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Similarity {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_mesh(&self, mesh: &Mesh) -> Mesh {
        mesh.map_vertices(|v| self.apply(v))
    }

    /// `self ∘ first`
    pub fn compose(&self, first: &Similarity) -> Similarity {
        Similarity {
            scale: self.scale * first.scale,
            rotation: self.rotation * first.rotation,
            translation: self.rotation * first.translation * self.scale + self.translation,
        }
    }
}

/// Least-squares similarity mapping `src[i]` onto `dst[i]`.
pub fn umeyama(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<Similarity> {
    Error::check_dim("correspondences", src.len(), dst.len())?;
    if src.len() < 3 {
        return Err(Error::Degenerate(
            "at least 3 correspondences are needed".into(),
        ));
    }
    let n = src.len() as f64;
    let ms = src.iter().sum::<Vector3<f64>>() / n;
    let md = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    let mut spread = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        let (a, b) = (s - ms, d - md);
        cov += b * a.transpose();
        var += a.norm_squared();
        spread += a * a.transpose();
    }
    cov /= n;
    var /= n;
    let ev = spread.symmetric_eigenvalues();
    let mut sorted = [ev[0], ev[1], ev[2]];
    sorted.sort_by(f64::total_cmp);
    if !(sorted[2] > 0.0) || sorted[1] <= 1e-12 * sorted[2] {
        return Err(Error::Degenerate(
            "correspondence points are collinear".into(),
        ));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * vt;
    let trace: f64 = (0..3).map(|i| svd.singular_values[i] * d[(i, i)]).sum();
    let scale = trace / var;
    let translation = md - rotation * ms * scale;
    Ok(Similarity {
        scale,
        rotation,
        translation,
    })
}

/// Closest point of triangle `abc` to `p`.
pub fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Vector3<f64> {
    let ab = b - a;
    let ac = c - a;
    if ab.cross(&ac).norm_squared() == 0.0 {
        // Degenerate triangle: nearest of the three edges.
        let edges = [(a, b), (b, c), (c, a)];
        return edges
            .iter()
            .map(|(s, e)| closest_point_on_segment(p, s, e))
            .min_by(|x, y| (x - p).norm_squared().total_cmp(&(y - p).norm_squared()))
            .expect("three edges");
    }
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

fn closest_point_on_segment(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> Vector3<f64> {
    let ab = b - a;
    let l = ab.norm_squared();
    if l == 0.0 {
        return *a;
    }
    a + ab * ((p - a).dot(&ab) / l).clamp(0.0, 1.0)
}

/// Nearest surface point: triangle index, closest point and distance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nearest {
    pub triangle: usize,
    pub point: Vector3<f64>,
    pub distance: f64,
}

fn triangle_distance(mesh: &Mesh, t: usize, p: &Vector3<f64>) -> (Vector3<f64>, f64) {
    let [i, j, k] = mesh.triangles[t];
    let q = closest_point_on_triangle(p, &mesh.vertices[i], &mesh.vertices[j], &mesh.vertices[k]);
    (q, (p - q).norm())
}

fn better(cand: (usize, Vector3<f64>, f64), best: &Option<Nearest>) -> bool {
    match best {
        None => true,
        Some(b) => cand.2 < b.distance || (cand.2 == b.distance && cand.0 < b.triangle),
    }
}

/// Exhaustive nearest-triangle search, ties going to the lower index.
pub fn nearest_exhaustive(mesh: &Mesh, p: &Vector3<f64>) -> Option<Nearest> {
    let mut best: Option<Nearest> = None;
    for t in 0..mesh.triangles.len() {
        let (q, d) = triangle_distance(mesh, t, p);
        if better((t, q, d), &best) {
            best = Some(Nearest {
                triangle: t,
                point: q,
                distance: d,
            });
        }
    }
    best
}

/// Uniform grid over triangle bounding boxes.
pub struct TriangleGrid<'a> {
    mesh: &'a Mesh,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl<'a> TriangleGrid<'a> {
    pub fn new(mesh: &'a Mesh) -> Result<Self> {
        if mesh.triangles.is_empty() {
            return Err(Error::InvalidInput("truth mesh has no triangles".into()));
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for tri in mesh.triangles.iter() {
            for &v in tri {
                lo = lo.inf(&mesh.vertices[v]);
                hi = hi.sup(&mesh.vertices[v]);
            }
        }
        if !(lo.iter().chain(hi.iter()).all(|x| x.is_finite())) {
            return Err(Error::InvalidInput(
                "truth mesh has non-finite vertices".into(),
            ));
        }
        let ext = hi - lo;
        let span = ext.max().max(1e-12);
        // Roughly two triangles per cell on a surface.
        let target = (mesh.triangles.len() as f64 / 2.0).sqrt().clamp(1.0, 128.0);
        let cell = span / target;
        let dims = [0, 1, 2].map(|a| ((ext[a] / cell).floor() as usize + 1).min(256));
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let mut grid = TriangleGrid {
            mesh,
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (t, tri) in mesh.triangles.iter().enumerate() {
            let mut tlo = Vector3::repeat(f64::INFINITY);
            let mut thi = Vector3::repeat(f64::NEG_INFINITY);
            for &v in tri {
                tlo = tlo.inf(&mesh.vertices[v]);
                thi = thi.sup(&mesh.vertices[v]);
            }
            let a = grid.cell_of(&tlo);
            let b = grid.cell_of(&thi);
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        cells[grid.index([x, y, z])].push(t as u32);
                    }
                }
            }
        }
        grid.cells = cells;
        Ok(grid)
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        [0, 1, 2].map(|a| {
            let c = ((p[a] - self.origin[a]) / self.cell).floor();
            if c.is_nan() || c < 0.0 {
                0
            } else {
                (c as usize).min(self.dims[a] - 1)
            }
        })
    }

    fn index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Same result as [`nearest_exhaustive`].
    pub fn nearest(&self, p: &Vector3<f64>) -> Nearest {
        let c = self.cell_of(p);
        let mut best: Option<Nearest> = None;
        let mut seen = vec![false; self.mesh.triangles.len()];
        let max_ring = *self.dims.iter().max().expect("3 dims");
        for r in 0..=max_ring {
            let lo = [0, 1, 2].map(|a| c[a].saturating_sub(r));
            let hi = [0, 1, 2].map(|a| (c[a] + r).min(self.dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let on_shell = [x, y, z].iter().zip(c).any(|(&i, ci)| i.abs_diff(ci) == r);
                        if !on_shell {
                            continue;
                        }
                        for &t in &self.cells[self.index([x, y, z])] {
                            let t = t as usize;
                            if std::mem::replace(&mut seen[t], true) {
                                continue;
                            }
                            let (q, d) = triangle_distance(self.mesh, t, p);
                            if better((t, q, d), &best) {
                                best = Some(Nearest {
                                    triangle: t,
                                    point: q,
                                    distance: d,
                                });
                            }
                        }
                    }
                }
            }
            // Lower bound on the distance to any cell outside the visited box.
            let mut bound = f64::INFINITY;
            for a in 0..3 {
                if lo[a] > 0 {
                    let edge = self.origin[a] + lo[a] as f64 * self.cell;
                    bound = bound.min((p[a] - edge).max(0.0));
                }
                if hi[a] + 1 < self.dims[a] {
                    let edge = self.origin[a] + (hi[a] + 1) as f64 * self.cell;
                    bound = bound.min((edge - p[a]).max(0.0));
                }
            }
            if let Some(b) = &best {
                // Strict: a triangle at exactly `bound` could win a tie.
                if b.distance < bound {
                    break;
                }
            }
            if bound.is_infinite() {
                break;
            }
        }
        best.expect("non-empty mesh")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub median: f64,
    pub p90: f64,
    pub p95: f64,
}

impl ErrorSummary {
    pub fn from_errors(errors: &[f64]) -> Self {
        if errors.is_empty() {
            return ErrorSummary {
                count: 0,
                mean: 0.0,
                std: 0.0,
                max: 0.0,
                median: 0.0,
                p90: 0.0,
                p95: 0.0,
            };
        }
        let n = errors.len() as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let std = (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
        let mut sorted = errors.to_vec();
        sorted.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            let pos = q * (sorted.len() - 1) as f64;
            let (i, frac) = (pos.floor() as usize, pos.fract());
            if i + 1 < sorted.len() {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            }
        };
        ErrorSummary {
            count: errors.len(),
            mean,
            std,
            max: sorted[sorted.len() - 1],
            median: pct(0.5),
            p90: pct(0.9),
            p95: pct(0.95),
        }
    }
}

/// Per-vertex errors (model units) of the evaluated predicted vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorMap {
    pub vertex_ids: Vec<usize>,
    pub errors: Vec<f64>,
    pub summary: ErrorSummary,
}

impl ErrorMap {
    fn new(vertex_ids: Vec<usize>, errors: Vec<f64>) -> Self {
        let summary = ErrorSummary::from_errors(&errors);
        ErrorMap {
            vertex_ids,
            errors,
            summary,
        }
    }

    pub fn mean(&self) -> f64 {
        self.summary.mean
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("vertex_id,error\n");
        for (v, e) in self.vertex_ids.iter().zip(&self.errors) {
            s.push_str(&format!("{v},{e}\n"));
        }
        s
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary).expect("summary serializes")
    }

    /// Writes `<stem>.csv` and `<stem>.json` next to each other.
    pub fn save(&self, csv: impl AsRef<Path>, json: impl AsRef<Path>) -> Result<()> {
        let (csv, json) = (csv.as_ref(), json.as_ref());
        std::fs::write(csv, self.to_csv()).map_err(|e| Error::io(csv, e))?;
        let mut f = std::fs::File::create(json).map_err(|e| Error::io(json, e))?;
        writeln!(f, "{}", self.summary_json()).map_err(|e| Error::io(json, e))
    }
}

fn check_mesh(mesh: &Mesh, what: &str) -> Result<()> {
    if mesh
        .vertices
        .iter()
        .any(|v| !v.iter().all(|x| x.is_finite()))
    {
        return Err(Error::InvalidInput(format!(
            "{what} mesh has non-finite vertices"
        )));
    }
    Ok(())
}

/// Distance of every predicted vertex to the truth surface.
pub fn point_to_plane_error(pred: &Mesh, truth: &Mesh) -> Result<ErrorMap> {
    point_to_plane_error_within(pred, truth, None)
}

/// As [`point_to_plane_error`], restricted to predicted vertices within
/// `region = (center, radius)` when given.
pub fn point_to_plane_error_within(
    pred: &Mesh,
    truth: &Mesh,
    region: Option<(Vector3<f64>, f64)>,
) -> Result<ErrorMap> {
    check_mesh(pred, "predicted")?;
    check_mesh(truth, "truth")?;
    let grid = TriangleGrid::new(truth)?;
    let (ids, errors): (Vec<usize>, Vec<f64>) = pred
        .vertices
        .iter()
        .enumerate()
        .filter(|(_, v)| region.is_none_or(|(c, r)| (*v - c).norm() <= r))
        .map(|(i, v)| (i, grid.nearest(v).distance))
        .unzip();
    Ok(ErrorMap::new(ids, errors))
}

/// Exhaustive O(V·T) version of [`point_to_plane_error`].
pub fn point_to_plane_error_exhaustive(pred: &Mesh, truth: &Mesh) -> Result<ErrorMap> {
    if truth.triangles.is_empty() {
        return Err(Error::InvalidInput("truth mesh has no triangles".into()));
    }
    let errors = pred
        .vertices
        .iter()
        .map(|v| nearest_exhaustive(truth, v).expect("non-empty").distance)
        .collect();
    Ok(ErrorMap::new((0..pred.vertices.len()).collect(), errors))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub icp_iterations: usize,
    /// Relative RMS improvement below which ICP stops.
    pub icp_tolerance: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            icp_iterations: 20,
            icp_tolerance: 1e-9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub transform: Similarity,
    pub mesh: Mesh,
    pub icp_iterations: usize,
    pub rms: f64,
}

fn small_rotation(w: &Vector3<f64>) -> Matrix3<f64> {
    nalgebra::Rotation3::new(*w).into_inner()
}

fn plane_rms(mesh: &Mesh, grid: &TriangleGrid) -> f64 {
    let s: f64 = mesh
        .vertices
        .iter()
        .map(|v| grid.nearest(v).distance.powi(2))
        .sum();
    (s / mesh.vertices.len().max(1) as f64).sqrt()
}

/// Similarity aligning `source` onto `target`: closed form over
/// `landmarks` (vertex indices valid in both meshes), then point-to-plane ICP.
pub fn rigid_align(
    source: &Mesh,
    target: &Mesh,
    landmarks: &[usize],
    cfg: &AlignConfig,
) -> Result<Alignment> {
    check_mesh(source, "source")?;
    check_mesh(target, "target")?;
    for &l in landmarks {
        if l >= source.vertices.len() || l >= target.vertices.len() {
            return Err(Error::InvalidInput(format!(
                "landmark vertex {l} out of range"
            )));
        }
    }
    let src: Vec<_> = landmarks.iter().map(|&l| source.vertices[l]).collect();
    let dst: Vec<_> = landmarks.iter().map(|&l| target.vertices[l]).collect();
    let mut transform = umeyama(&src, &dst)?;
    let grid = TriangleGrid::new(target)?;
    let mut mesh = transform.apply_mesh(source);
    let mut rms = plane_rms(&mesh, &grid);
    let mut done = 0;
    for _ in 0..cfg.icp_iterations {
        if rms == 0.0 {
            break;
        }
        // Linearized step x ↦ (1 + ds) x + ω × x + dt, unknowns (ω, dt, ds).
        let c = mesh.vertices.iter().sum::<Vector3<f64>>() / mesh.vertices.len() as f64;
        let mut ata = SMatrix::<f64, 7, 7>::zeros();
        let mut atb = SVector::<f64, 7>::zeros();
        for v in &mesh.vertices {
            let near = grid.nearest(v);
            let [i, j, k] = target.triangles[near.triangle];
            let (a, b, cc) = (target.vertices[i], target.vertices[j], target.vertices[k]);
            let n = (b - a).cross(&(cc - a));
            let n = if n.norm() > 0.0 {
                n.normalize()
            } else if near.distance > 0.0 {
                (v - near.point) / near.distance
            } else {
                continue;
            };
            let x = v - c;
            let row = SVector::<f64, 7>::from_column_slice(&[
                x.cross(&n).x,
                x.cross(&n).y,
                x.cross(&n).z,
                n.x,
                n.y,
                n.z,
                n.dot(&x),
            ]);
            let r = n.dot(&(v - near.point));
            ata += row * row.transpose();
            atb -= row * r;
        }
        let Some(sol) = ata.cholesky().map(|ch| ch.solve(&atb)) else {
            break;
        };
        let w = Vector3::new(sol[0], sol[1], sol[2]);
        let step = Similarity {
            scale: 1.0 + sol[6],
            rotation: small_rotation(&w),
            translation: Vector3::new(sol[3], sol[4], sol[5]) + c
                - small_rotation(&w) * c * (1.0 + sol[6]),
        };
        let candidate = step.compose(&transform);
        let cand_mesh = candidate.apply_mesh(source);
        let cand_rms = plane_rms(&cand_mesh, &grid);
        if !(cand_rms < rms) {
            break;
        }
        let gain = (rms - cand_rms) / rms;
        transform = candidate;
        mesh = cand_mesh;
        rms = cand_rms;
        done += 1;
        if gain < cfg.icp_tolerance {
            break;
        }
    }
    Ok(Alignment {
        transform,
        mesh,
        icp_iterations: done,
        rms,
    })
}

/// Aligns `pred` onto `truth` and measures the error, optionally within
/// `region_radius` of the truth landmarks' centroid.
pub fn evaluate(
    pred: &Mesh,
    truth: &Mesh,
    landmarks: &[usize],
    region_radius: Option<f64>,
    cfg: &AlignConfig,
) -> Result<(Alignment, ErrorMap)> {
    let aligned = rigid_align(pred, truth, landmarks, cfg)?;
    let region = region_radius.map(|r| {
        let c = landmarks
            .iter()
            .map(|&l| truth.vertices[l])
            .sum::<Vector3<f64>>()
            / landmarks.len().max(1) as f64;
        (c, r)
    });
    let map = point_to_plane_error_within(&aligned.mesh, truth, region)?;
    Ok((aligned, map))
}

/// Blue → cyan → green → yellow → red at `t` = 0, ¼, ½, ¾, 1 with linear
/// blending in between; `t` is clamped to `[0, 1]`.
pub fn colormap(t: f64) -> Rgb {
    const STOPS: [Rgb; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let pos = t * 4.0;
    let i = (pos.floor() as usize).min(3);
    let f = pos - i as f64;
    let (a, b) = (STOPS[i], STOPS[i + 1]);
    [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * f)
}

/// Renders `mesh` colored by `map` over `[0, max_error]` on white.
/// Vertices outside the map are gray.
pub fn error_heatmap(
    map: &ErrorMap,
    mesh: &Mesh,
    pose: &CameraPose,
    width: usize,
    height: usize,
    max_error: f64,
) -> Result<RgbImage> {
    if !(max_error > 0.0) {
        return Err(Error::InvalidInput(
            "heatmap maximum must be positive".into(),
        ));
    }
    let mut colors = vec![[0.6; 3]; mesh.vertices.len()];
    for (&v, &e) in map.vertex_ids.iter().zip(&map.errors) {
        if v >= colors.len() {
            return Err(Error::InvalidInput(format!(
                "error map vertex {v} out of range"
            )));
        }
        colors[v] = colormap(e / max_error);
    }
    let tex = TextureMap {
        valid: vec![true; colors.len()],
        colors,
    };
    Ok(render_textured(mesh, &tex, pose, width, height, [1.0; 3]).image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::generate_synthetic_model;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_square() -> Mesh {
        Mesh::from_parts(
            vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(1.0, 1.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
    }

    fn random_mesh(rng: &mut ChaCha8Rng, verts: usize, tris: usize) -> Mesh {
        let v = (0..verts)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.5..0.5),
                )
            })
            .collect();
        let t = (0..tris)
            .map(|_| {
                [
                    rng.random_range(0..verts),
                    rng.random_range(0..verts),
                    rng.random_range(0..verts),
                ]
            })
            .collect();
        Mesh::from_parts(v, t)
    }

    fn random_similarity(rng: &mut ChaCha8Rng) -> Similarity {
        let w = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Similarity {
            scale: rng.random_range(0.5..2.0),
            rotation: small_rotation(&w),
            translation: Vector3::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ),
        }
    }

    #[test]
    fn point_above_square_closed_form() {
        let pred = Mesh::from_parts(vec![Vector3::new(0.5, 0.5, 0.3)], vec![]);
        let m = point_to_plane_error(&pred, &unit_square()).unwrap();
        assert!((m.errors[0] - 0.3).abs() < 1e-15);
        // Foot outside: distance to the nearest edge point.
        let pred = Mesh::from_parts(vec![Vector3::new(1.3, 0.5, 0.4)], vec![]);
        let m = point_to_plane_error(&pred, &unit_square()).unwrap();
        assert!((m.errors[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn identical_meshes_have_zero_error() {
        let model = generate_synthetic_model(1, 500, 3, 2).unwrap();
        let mesh = model.mean_mesh();
        let m = point_to_plane_error(&mesh, &mesh).unwrap();
        assert_eq!(m.summary.max, 0.0);
        assert_eq!(m.summary.mean, 0.0);
    }

    #[test]
    fn empty_truth_is_rejected() {
        let pred = unit_square();
        let empty = Mesh::from_parts(vec![Vector3::zeros()], vec![]);
        assert!(point_to_plane_error(&pred, &empty).is_err());
    }

    #[test]
    fn grid_equals_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let truth = random_mesh(&mut rng, 30, 40);
            let pred = random_mesh(&mut rng, 60, 1);
            let a = point_to_plane_error(&pred, &truth).unwrap();
            let b = point_to_plane_error_exhaustive(&pred, &truth).unwrap();
            assert_eq!(a.errors, b.errors);
        }
    }

    #[test]
    fn umeyama_recovers_similarity_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = generate_synthetic_model(1, 500, 3, 2).unwrap();
        let src = model.mean_mesh();
        let t = random_similarity(&mut rng);
        let dst = t.apply_mesh(&src);
        let a = rigid_align(&src, &dst, &src.landmark_map, &AlignConfig::default()).unwrap();
        assert!((a.transform.scale - t.scale).abs() < 1e-9);
        assert!((a.transform.rotation - t.rotation).norm() < 1e-9);
        let worst = a
            .mesh
            .vertices
            .iter()
            .zip(&dst.vertices)
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6);
    }

    #[test]
    fn identity_case_gives_identity() {
        let model = generate_synthetic_model(1, 500, 3, 2).unwrap();
        let m = model.mean_mesh();
        let a = rigid_align(&m, &m, &m.landmark_map, &AlignConfig::default()).unwrap();
        assert!((a.transform.scale - 1.0).abs() < 1e-12);
        assert!((a.transform.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(a.transform.translation.norm() < 1e-12);
    }

    #[test]
    fn noisy_round_trip_recovers_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = generate_synthetic_model(1, 800, 3, 2).unwrap();
        let src = model.mean_mesh();
        let t = random_similarity(&mut rng);
        let noise: Vec<Vector3<f64>> = (0..src.vertices.len())
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                )
            })
            .collect();
        let mut noisy = src.clone();
        for (v, n) in noisy.vertices.iter_mut().zip(&noise) {
            *v += n;
        }
        let dst = t.apply_mesh(&noisy);
        let a = rigid_align(&src, &dst, &src.landmark_map, &AlignConfig::default()).unwrap();
        assert!((a.transform.scale / t.scale - 1.0).abs() < 0.02);
    }

    #[test]
    fn collinear_landmarks_fail() {
        let m = Mesh::from_parts(
            (0..5).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect(),
            vec![[0, 1, 2]],
        );
        assert!(matches!(
            rigid_align(&m, &m, &[0, 1, 2, 3], &AlignConfig::default()),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn colormap_contract() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap(7.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap(0.125), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn heatmap_uniform_errors() {
        let model = generate_synthetic_model(1, 500, 3, 2).unwrap();
        let mesh = model.mean_mesh();
        let pose = CameraPose::new(20.0, 0.0, 0.0, 0.0, 24.0, 24.0);
        for (e, expect) in [
            (0.0, colormap(0.0)),
            (2.0, colormap(1.0)),
            (1.0, colormap(0.5)),
        ] {
            let map = ErrorMap::new(
                (0..mesh.vertices.len()).collect(),
                vec![e; mesh.vertices.len()],
            );
            let img = error_heatmap(&map, &mesh, &pose, 48, 48, 2.0).unwrap();
            let raster = crate::render::rasterize(&mesh, &pose, 48, 48);
            for i in 0..48 * 48 {
                let px = img.pixels()[i];
                let want = if raster.is_covered(i) {
                    expect
                } else {
                    [1.0; 3]
                };
                for c in 0..3 {
                    assert!((px[c] - want[c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn summary_is_consistent() {
        let m = ErrorMap::new(vec![0, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.summary.mean, 2.5);
        assert_eq!(m.summary.max, 4.0);
        assert_eq!(m.summary.median, 2.5);
        assert!((m.summary.std - 1.25f64.sqrt()).abs() < 1e-15);
        assert!(m.to_csv().starts_with("vertex_id,error\n0,1\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn errors_commute_with_similarities(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let truth = random_mesh(&mut rng, 20, 25);
            let pred = random_mesh(&mut rng, 30, 1);
            let t = random_similarity(&mut rng);
            let base = point_to_plane_error(&pred, &truth).unwrap();
            let moved = point_to_plane_error(&t.apply_mesh(&pred), &t.apply_mesh(&truth)).unwrap();
            for (a, b) in base.errors.iter().zip(&moved.errors) {
                prop_assert!((a * t.scale - b).abs() < 1e-9);
            }
            let rigid = Similarity { scale: 1.0, ..t };
            let moved = point_to_plane_error(&rigid.apply_mesh(&pred), &rigid.apply_mesh(&truth)).unwrap();
            for (a, b) in base.errors.iter().zip(&moved.errors) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
