//! Linear morphable face model.
//!
//! A shape is `mean + id_basis * x_id + exp_basis * x_exp`, stored as a flat
//! vector of `3V` coordinates laid out `[x0, y0, z0, x1, y1, z1, ...]`.
//!
//! Model frame: `x` points to the image right, `y` to the image bottom and `z`
//! towards the camera in the canonical frontal view.
//!
//! # Model file layout
//!
//! All values little-endian.
//!
//! | field            | type        | count          |
//! |------------------|-------------|----------------|
//! | magic `b"MVFM"`  | bytes       | 4              |
//! | version (= 1)    | u32         | 1              |
//! | V, D_id, D_exp   | u32         | 3              |
//! | T (triangles), L | u32         | 2              |
//! | mean shape       | f32         | 3V             |
//! | identity basis   | f32         | 3V * D_id (column-major) |
//! | expression basis | f32         | 3V * D_exp (column-major) |
//! | identity sigmas  | f32         | D_id           |
//! | expression sigmas| f32         | D_exp          |
//! | triangles        | i32         | 3T             |
//! | landmark map     | i32         | L              |

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Triangle = [usize; 3];

/// Parametric face model. Immutable once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphableModel {
    mean_shape: DVector<f64>,
    id_basis: DMatrix<f64>,
    exp_basis: DMatrix<f64>,
    triangles: Arc<Vec<Triangle>>,
    landmark_map: Arc<Vec<usize>>,
    id_sigma: DVector<f64>,
    exp_sigma: DVector<f64>,
}

/// Identity and expression coefficients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    #[serde(with = "plain_vector")]
    pub id: DVector<f64>,
    #[serde(with = "plain_vector")]
    pub exp: DVector<f64>,
}

/// Serializes a `DVector` as a plain JSON array.
pub(crate) mod plain_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

/// A posed-free face mesh: vertex positions in model units plus the model's
/// topology and landmark correspondences.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
    pub triangles: Arc<Vec<Triangle>>,
    pub landmark_map: Arc<Vec<usize>>,
}

impl ShapeParams {
    pub fn zeros(id_dims: usize, exp_dims: usize) -> Self {
        ShapeParams {
            id: DVector::zeros(id_dims),
            exp: DVector::zeros(exp_dims),
        }
    }

    pub fn for_model(model: &MorphableModel) -> Self {
        Self::zeros(model.id_dims(), model.exp_dims())
    }

    pub fn is_finite(&self) -> bool {
        self.id.iter().chain(self.exp.iter()).all(|v| v.is_finite())
    }
}

impl MorphableModel {
    /// Builds a model, checking every structural invariant.
    pub fn new(
        mean_shape: DVector<f64>,
        id_basis: DMatrix<f64>,
        exp_basis: DMatrix<f64>,
        triangles: Vec<Triangle>,
        landmark_map: Vec<usize>,
        id_sigma: DVector<f64>,
        exp_sigma: DVector<f64>,
    ) -> Result<Self> {
        let n = mean_shape.len();
        if n == 0 || !n.is_multiple_of(3) {
            return Err(Error::InvalidInput(format!(
                "mean shape length {n} is not a positive multiple of 3"
            )));
        }
        let v = n / 3;
        Error::check_dim("identity basis rows", n, id_basis.nrows())?;
        Error::check_dim("expression basis rows", n, exp_basis.nrows())?;
        Error::check_dim("identity sigmas", id_basis.ncols(), id_sigma.len())?;
        Error::check_dim("expression sigmas", exp_basis.ncols(), exp_sigma.len())?;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= v)) {
            return Err(Error::InvalidInput(format!(
                "triangle {t:?} references a vertex outside 0..{v}"
            )));
        }
        if let Some(&l) = landmark_map.iter().find(|&&l| l >= v) {
            return Err(Error::InvalidInput(format!(
                "landmark vertex {l} outside 0..{v}"
            )));
        }
        if id_sigma
            .iter()
            .chain(exp_sigma.iter())
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(Error::InvalidInput(
                "regularization sigmas must be finite and strictly positive".into(),
            ));
        }
        let all_finite = mean_shape
            .iter()
            .chain(id_basis.iter())
            .chain(exp_basis.iter())
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::InvalidInput(
                "model arrays contain non-finite values".into(),
            ));
        }
        Ok(MorphableModel {
            mean_shape,
            id_basis,
            exp_basis,
            triangles: Arc::new(triangles),
            landmark_map: Arc::new(landmark_map),
            id_sigma,
            exp_sigma,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn id_dims(&self) -> usize {
        self.id_basis.ncols()
    }

    pub fn exp_dims(&self) -> usize {
        self.exp_basis.ncols()
    }

    pub fn landmark_count(&self) -> usize {
        self.landmark_map.len()
    }

    pub fn mean_shape(&self) -> &DVector<f64> {
        &self.mean_shape
    }

    pub fn id_basis(&self) -> &DMatrix<f64> {
        &self.id_basis
    }

    pub fn exp_basis(&self) -> &DMatrix<f64> {
        &self.exp_basis
    }

    pub fn id_sigma(&self) -> &DVector<f64> {
        &self.id_sigma
    }

    pub fn exp_sigma(&self) -> &DVector<f64> {
        &self.exp_sigma
    }

    pub fn triangles(&self) -> &Arc<Vec<Triangle>> {
        &self.triangles
    }

    pub fn landmark_map(&self) -> &Arc<Vec<usize>> {
        &self.landmark_map
    }

    /// The mean shape as a mesh.
    pub fn mean_mesh(&self) -> Mesh {
        self.mesh_from_flat(&self.mean_shape)
    }

    fn mesh_from_flat(&self, flat: &DVector<f64>) -> Mesh {
        Mesh {
            vertices: flat
                .as_slice()
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
            triangles: Arc::clone(&self.triangles),
            landmark_map: Arc::clone(&self.landmark_map),
        }
    }

    /// Maps a per-vertex gradient (flattened `3V`) onto the coefficients:
    /// returns `(id_basisᵀ g, exp_basisᵀ g)`.
    pub fn project_vertex_gradient(
        &self,
        flat_grad: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        (
            self.id_basis.tr_mul(flat_grad),
            self.exp_basis.tr_mul(flat_grad),
        )
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        let v = self.vertex_count();
        w.write_all(MODEL_MAGIC)?;
        for n in [
            MODEL_VERSION,
            v as u32,
            self.id_dims() as u32,
            self.exp_dims() as u32,
            self.triangles.len() as u32,
            self.landmark_map.len() as u32,
        ] {
            w.write_all(&n.to_le_bytes())?;
        }
        let floats = self
            .mean_shape
            .iter()
            .chain(self.id_basis.iter())
            .chain(self.exp_basis.iter())
            .chain(self.id_sigma.iter())
            .chain(self.exp_sigma.iter());
        for &x in floats {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
        for &i in self
            .triangles
            .iter()
            .flatten()
            .chain(self.landmark_map.iter())
        {
            w.write_all(&(i as i32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let fmt = |message: String| Error::Format {
            kind: "model",
            message,
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|e| fmt(format!("header: {e}")))?;
        if &magic != MODEL_MAGIC {
            return Err(fmt("bad magic".into()));
        }
        let read_u32 = |r: &mut dyn Read| -> Result<u32> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|e| fmt(format!("header: {e}")))?;
            Ok(u32::from_le_bytes(b))
        };
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(fmt(format!("unsupported version {version}")));
        }
        let v = read_u32(&mut r)? as usize;
        let d_id = read_u32(&mut r)? as usize;
        let d_exp = read_u32(&mut r)? as usize;
        let t = read_u32(&mut r)? as usize;
        let l = read_u32(&mut r)? as usize;

        let n = 3 * v;
        let float_count = n + n * d_id + n * d_exp + d_id + d_exp;
        let mut buf = vec![0u8; 4 * float_count];
        r.read_exact(&mut buf)
            .map_err(|e| fmt(format!("float arrays: {e}")))?;
        let floats: Vec<f64> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let mut ints = vec![0u8; 4 * (3 * t + l)];
        r.read_exact(&mut ints)
            .map_err(|e| fmt(format!("index arrays: {e}")))?;
        let ints: Vec<i32> = ints
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if ints.iter().any(|&i| i < 0) {
            return Err(fmt("negative index".into()));
        }

        let mut off = 0;
        let mut take = |len: usize| {
            let s = &floats[off..off + len];
            off += len;
            s
        };
        let mean = DVector::from_column_slice(take(n));
        let id_basis = DMatrix::from_column_slice(n, d_id, take(n * d_id));
        let exp_basis = DMatrix::from_column_slice(n, d_exp, take(n * d_exp));
        let id_sigma = DVector::from_column_slice(take(d_id));
        let exp_sigma = DVector::from_column_slice(take(d_exp));
        let triangles = ints[..3 * t]
            .chunks_exact(3)
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect();
        let landmarks = ints[3 * t..].iter().map(|&i| i as usize).collect();
        MorphableModel::new(
            mean, id_basis, exp_basis, triangles, landmarks, id_sigma, exp_sigma,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

const MODEL_MAGIC: &[u8; 4] = b"MVFM";
const MODEL_VERSION: u32 = 1;

/// Shape assembly: `mean + E_id x_id + E_exp x_exp`, reshaped to vertices.
pub fn assemble_shape(model: &MorphableModel, params: &ShapeParams) -> Result<Mesh> {
    Error::check_dim("identity coefficients", model.id_dims(), params.id.len())?;
    Error::check_dim(
        "expression coefficients",
        model.exp_dims(),
        params.exp.len(),
    )?;
    if !params.is_finite() {
        return Err(Error::InvalidInput(
            "shape coefficients must be finite".into(),
        ));
    }
    let mut flat = model.mean_shape.clone();
    flat.gemv(1.0, &model.id_basis, &params.id, 1.0);
    flat.gemv(1.0, &model.exp_basis, &params.exp, 1.0);
    Ok(model.mesh_from_flat(&flat))
}

/// Gathers the landmark vertices of a mesh, in landmark order.
pub fn landmark_positions(mesh: &Mesh) -> Vec<Vector3<f64>> {
    mesh.landmark_map
        .iter()
        .map(|&i| mesh.vertices[i])
        .collect()
}

impl Mesh {
    /// Builds a mesh from explicit parts (no landmark correspondences).
    pub fn from_parts(vertices: Vec<Vector3<f64>>, triangles: Vec<Triangle>) -> Self {
        Mesh {
            vertices,
            triangles: Arc::new(triangles),
            landmark_map: Arc::new(Vec::new()),
        }
    }

    pub fn landmarks(&self) -> Vec<Vector3<f64>> {
        landmark_positions(self)
    }

    pub fn flatten(&self) -> DVector<f64> {
        DVector::from_iterator(
            3 * self.vertices.len(),
            self.vertices.iter().flat_map(|v| [v.x, v.y, v.z]),
        )
    }

    /// Returns a copy with every vertex mapped through `f`.
    pub fn map_vertices(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Mesh {
        Mesh {
            vertices: self.vertices.iter().map(f).collect(),
            triangles: Arc::clone(&self.triangles),
            landmark_map: Arc::clone(&self.landmark_map),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic model

/// Smallest vertex budget that still separates all template landmarks.
pub const MIN_SYNTHETIC_VERTICES: usize = 300;

/// Canonical landmark positions of the 17-point template, in the unit-disk
/// face coordinates used by the generator (`y` grows towards the chin).
///
/// Order: jaw (5, image left to right), left brow outer/inner, right brow
/// inner/outer, nose bridge, nose tip, left eye outer/inner, right eye
/// inner/outer, mouth left/right.
pub const TEMPLATE_LANDMARKS: [(f64, f64); 17] = [
    (-0.80, 0.30),
    (-0.55, 0.70),
    (0.00, 0.92),
    (0.55, 0.70),
    (0.80, 0.30),
    (-0.50, -0.36),
    (-0.16, -0.36),
    (0.16, -0.36),
    (0.50, -0.36),
    (0.00, -0.20),
    (0.00, 0.16),
    (-0.46, -0.16),
    (-0.20, -0.16),
    (0.20, -0.16),
    (0.46, -0.16),
    (-0.26, 0.50),
    (0.26, 0.50),
];

/// Index of the nose bridge in the 17-point template.
pub const TEMPLATE_NOSE_BRIDGE: usize = 9;
/// Index of the nose tip in the 17-point template.
pub const TEMPLATE_NOSE_TIP: usize = 10;

const FACE_HALF_WIDTH: f64 = 0.75;
const FACE_HALF_HEIGHT: f64 = 0.95;
const FACE_DEPTH: f64 = 0.55;
const CAP_CUT: f64 = 0.92;

fn gauss2(x: f64, y: f64, cx: f64, cy: f64, sx: f64, sy: f64) -> f64 {
    let dx = (x - cx) / sx;
    let dy = (y - cy) / sy;
    (-0.5 * (dx * dx + dy * dy)).exp()
}

/// Depth of the face template at unit-disk coordinates `(x, y)`.
fn template_depth(x: f64, y: f64) -> f64 {
    let r2 = (x * x + y * y).min(1.0);
    let rim = (1.0 - CAP_CUT * CAP_CUT).sqrt();
    let cap = ((1.0 - CAP_CUT * CAP_CUT * r2).sqrt() - rim) / (1.0 - rim);
    let mut z = FACE_DEPTH * cap;
    // nose ridge and tip
    z += 0.12 * gauss2(x, y, 0.0, -0.04, 0.08, 0.20);
    z += 0.15 * gauss2(x, y, 0.0, 0.15, 0.10, 0.08);
    // brows, eye sockets, lips, chin
    z += 0.06 * gauss2(x, y, -0.33, -0.34, 0.17, 0.06);
    z += 0.06 * gauss2(x, y, 0.33, -0.34, 0.17, 0.06);
    z -= 0.07 * gauss2(x, y, -0.33, -0.16, 0.13, 0.08);
    z -= 0.07 * gauss2(x, y, 0.33, -0.16, 0.13, 0.08);
    z += 0.04 * gauss2(x, y, 0.0, 0.50, 0.20, 0.05);
    z += 0.05 * gauss2(x, y, 0.0, 0.80, 0.20, 0.10);
    z
}

/// Square `[-1,1]²` to unit disk.
fn square_to_disk(s: f64, t: f64) -> (f64, f64) {
    (
        s * (1.0 - 0.5 * t * t).sqrt(),
        t * (1.0 - 0.5 * s * s).sqrt(),
    )
}

struct TemplateGrid {
    /// Unit-disk coordinates per vertex.
    disk: Vec<(f64, f64)>,
    triangles: Vec<Triangle>,
}

/// Lays out exactly `v` vertices on a grid: full rows plus one centered
/// partial row at the chin when `v` is not a multiple of the row width.
fn template_grid(v: usize) -> TemplateGrid {
    let cols = ((v as f64 * 0.8).sqrt().round() as usize).max(2);
    let full_rows = v / cols;
    let rem = v % cols;
    let rows = full_rows + usize::from(rem > 0);
    let offset = (cols - rem) / 2;

    let s_of = |c: usize| -1.0 + 2.0 * c as f64 / (cols - 1) as f64;
    let t_of = |r: usize| -1.0 + 2.0 * r as f64 / (rows - 1) as f64;

    let mut disk = Vec::with_capacity(v);
    for r in 0..full_rows {
        for c in 0..cols {
            disk.push(square_to_disk(s_of(c), t_of(r)));
        }
    }
    for j in 0..rem {
        disk.push(square_to_disk(s_of(offset + j), t_of(full_rows)));
    }

    // Winding chosen so that triangles have positive signed area in (x, y)
    // with y pointing down, i.e. they face +z.
    let idx = |r: usize, c: usize| r * cols + c;
    let mut triangles = Vec::new();
    for r in 0..full_rows.saturating_sub(1) {
        for c in 0..cols - 1 {
            let (a, b, cc, d) = (idx(r, c), idx(r, c + 1), idx(r + 1, c), idx(r + 1, c + 1));
            triangles.push([a, b, d]);
            triangles.push([a, d, cc]);
        }
    }
    if rem > 1 {
        let base = full_rows * cols;
        for j in 0..rem - 1 {
            let a = idx(full_rows - 1, offset + j);
            let b = idx(full_rows - 1, offset + j + 1);
            let cc = base + j;
            let d = base + j + 1;
            triangles.push([a, b, d]);
            triangles.push([a, d, cc]);
        }
    }
    TemplateGrid { disk, triangles }
}

/// Generates a deterministic procedural morphable model.
///
/// The mean shape is an ellipsoidal cap with nose, brow, lip and chin relief.
/// Basis columns are smooth random displacement fields (expression fields are
/// localized around brows and mouth) with the similarity motions of the mean
/// shape projected out, jointly orthogonalized and scaled to unit per-vertex
/// RMS. Sigmas decay geometrically.
pub fn generate_synthetic_model(
    seed: u64,
    vertices: usize,
    id_dims: usize,
    exp_dims: usize,
) -> Result<MorphableModel> {
    if vertices < MIN_SYNTHETIC_VERTICES {
        return Err(Error::InvalidInput(format!(
            "synthetic template needs at least {MIN_SYNTHETIC_VERTICES} vertices, got {vertices}"
        )));
    }
    if id_dims == 0 || exp_dims == 0 {
        return Err(Error::InvalidInput(
            "identity and expression dimensions must be at least 1".into(),
        ));
    }
    let n = 3 * vertices;
    if id_dims + exp_dims + 7 > n {
        return Err(Error::InvalidInput(format!(
            "{} basis columns do not fit in {n} coordinates",
            id_dims + exp_dims
        )));
    }

    let grid = template_grid(vertices);
    let mut mean = DVector::zeros(n);
    for (i, &(x, y)) in grid.disk.iter().enumerate() {
        mean[3 * i] = FACE_HALF_WIDTH * x;
        mean[3 * i + 1] = FACE_HALF_HEIGHT * y;
        mean[3 * i + 2] = template_depth(x, y);
    }

    let mut landmarks = Vec::with_capacity(TEMPLATE_LANDMARKS.len());
    for &(lx, ly) in TEMPLATE_LANDMARKS.iter() {
        let nearest = grid
            .disk
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| (i, (x - lx).powi(2) + (y - ly).powi(2)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(i, _)| i)
            .expect("non-empty grid");
        if landmarks.contains(&nearest) {
            return Err(Error::InvalidInput(format!(
                "{vertices} vertices are too few to separate the template landmarks"
            )));
        }
        landmarks.push(nearest);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(id_dims + exp_dims);
    for k in 0..id_dims + exp_dims {
        let expression = k >= id_dims;
        columns.push(random_field(&mut rng, &grid.disk, expression));
    }

    let similarity = similarity_directions(&mean);
    for col in columns.iter_mut() {
        for d in &similarity {
            let p = d.dot(col);
            col.axpy(-p, d, 1.0);
        }
    }
    orthogonalize(&mut columns)?;
    let target_norm = (vertices as f64).sqrt();
    for col in columns.iter_mut() {
        *col *= target_norm;
    }

    let id_basis = DMatrix::from_columns(&columns[..id_dims]);
    let exp_basis = DMatrix::from_columns(&columns[id_dims..]);
    let id_sigma = DVector::from_fn(id_dims, |i, _| 0.06 * 0.85f64.powi(i as i32));
    let exp_sigma = DVector::from_fn(exp_dims, |i, _| 0.04 * 0.8f64.powi(i as i32));

    MorphableModel::new(
        mean,
        id_basis,
        exp_basis,
        grid.triangles,
        landmarks,
        id_sigma,
        exp_sigma,
    )
}

/// A smooth random displacement field over the template.
fn random_field(rng: &mut ChaCha8Rng, disk: &[(f64, f64)], expression: bool) -> DVector<f64> {
    const ORDER: usize = 4;
    let mut coef = [[[0.0f64; ORDER]; ORDER]; 3];
    for (axis, plane) in coef.iter_mut().enumerate() {
        let axis_weight = if axis == 2 { 1.0 } else { 0.5 };
        for (k, row) in plane.iter_mut().enumerate() {
            for (l, c) in row.iter_mut().enumerate() {
                let g: f64 = rng.sample(StandardNormal);
                *c = axis_weight * g / (1.0 + (k + l) as f64);
            }
        }
    }
    let mut out = DVector::zeros(3 * disk.len());
    for (i, &(x, y)) in disk.iter().enumerate() {
        let region = if expression {
            gauss2(x, y, 0.0, 0.55, 0.40, 0.22) + gauss2(x, y, 0.0, -0.34, 0.55, 0.16)
        } else {
            1.0
        };
        let cx: [f64; ORDER] =
            std::array::from_fn(|k| (k as f64 * std::f64::consts::FRAC_PI_2 * (x + 1.0)).cos());
        let cy: [f64; ORDER] =
            std::array::from_fn(|l| (l as f64 * std::f64::consts::FRAC_PI_2 * (y + 1.0)).cos());
        for axis in 0..3 {
            let mut acc = 0.0;
            for k in 0..ORDER {
                for l in 0..ORDER {
                    acc += coef[axis][k][l] * cx[k] * cy[l];
                }
            }
            out[3 * i + axis] = region * acc;
        }
    }
    out
}

/// Orthonormal basis of the infinitesimal similarity motions of `mean`:
/// three translations, three rotations and one scaling.
fn similarity_directions(mean: &DVector<f64>) -> Vec<DVector<f64>> {
    let v = mean.len() / 3;
    let mut centroid = Vector3::zeros();
    for c in mean.as_slice().chunks_exact(3) {
        centroid += Vector3::new(c[0], c[1], c[2]);
    }
    centroid /= v as f64;
    let mut dirs = Vec::with_capacity(7);
    for axis in 0..3 {
        let mut d = DVector::zeros(3 * v);
        for i in 0..v {
            d[3 * i + axis] = 1.0;
        }
        dirs.push(d);
    }
    for axis in 0..3 {
        let w = Vector3::ith(axis, 1.0);
        let mut d = DVector::zeros(3 * v);
        for i in 0..v {
            let p = Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]) - centroid;
            let m = w.cross(&p);
            d.fixed_rows_mut::<3>(3 * i).copy_from(&m);
        }
        dirs.push(d);
    }
    let mut scale = DVector::zeros(3 * v);
    for i in 0..v {
        let p = Vector3::new(mean[3 * i], mean[3 * i + 1], mean[3 * i + 2]) - centroid;
        scale.fixed_rows_mut::<3>(3 * i).copy_from(&p);
    }
    dirs.push(scale);
    orthogonalize(&mut dirs).expect("similarity motions of a 3D template are independent");
    dirs
}

/// Modified Gram-Schmidt, applied twice, normalizing to unit length.
fn orthogonalize(cols: &mut [DVector<f64>]) -> Result<()> {
    for _ in 0..2 {
        for i in 0..cols.len() {
            let (done, rest) = cols.split_at_mut(i);
            let c = &mut rest[0];
            for q in done.iter() {
                let p = q.dot(c);
                c.axpy(-p, q, 1.0);
            }
            let norm = c.norm();
            if norm < 1e-9 {
                return Err(Error::Degenerate(
                    "basis fields are linearly dependent".into(),
                ));
            }
            *c /= norm;
        }
    }
    Ok(())
}
