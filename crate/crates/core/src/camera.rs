//! Weak-perspective camera.
//!
//! `Pr(v, P) = f · [R v]_xy + t` with `R = Rz(γ) · Ry(β) · Rx(α)`, the
//! standard right-hand-rule elementary rotations. Image coordinates have
//! their origin at the top-left corner with `y` pointing down; the center of
//! pixel `(i, j)` is at `(i + 0.5, j + 0.5)`. The camera depth of a vertex is
//! `[R v]_z`; larger depth means closer to the camera.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mesh;

/// Pose of one view: scale `f` (pixels per model unit), Euler angles in
/// radians and a 2D translation in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub f: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tx: f64,
    pub ty: f64,
}

impl CameraPose {
    pub const PARAM_COUNT: usize = 6;

    pub fn new(f: f64, alpha: f64, beta: f64, gamma: f64, tx: f64, ty: f64) -> Self {
        CameraPose {
            f,
            alpha,
            beta,
            gamma,
            tx,
            ty,
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    /// `[f, alpha, beta, gamma, tx, ty]`
    pub fn to_array(&self) -> [f64; 6] {
        [self.f, self.alpha, self.beta, self.gamma, self.tx, self.ty]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_from_euler(self.alpha, self.beta, self.gamma)
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.tx, self.ty)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.to_array();
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pose {self:?}")));
        }
        if self.f <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "pose scale must be positive, got {}",
                self.f
            )));
        }
        let pi = std::f64::consts::PI;
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|&x| x <= -pi || x > pi)
        {
            return Err(Error::InvalidInput(format!(
                "pose angles outside (-pi, pi]: {self:?}"
            )));
        }
        Ok(())
    }

    /// Wraps the angles into `(-π, π]`.
    pub fn wrapped(mut self) -> Self {
        self.alpha = wrap_angle(self.alpha);
        self.beta = wrap_angle(self.beta);
        self.gamma = wrap_angle(self.gamma);
        self
    }

    /// `f · R[0..2]`: derivative of the projection w.r.t. the 3D point.
    pub fn point_jacobian(&self) -> Matrix2x3<f64> {
        self.rotation().fixed_rows::<2>(0) * self.f
    }
}

pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut w = a.rem_euclid(TAU);
    if w > PI {
        w -= TAU;
    }
    w
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn d_rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn d_rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn d_rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(gamma) * Ry(beta) * Rx(alpha)`.
pub fn rotation_from_euler(alpha: f64, beta: f64, gamma: f64) -> Matrix3<f64> {
    rot_z(gamma) * rot_y(beta) * rot_x(alpha)
}

/// Inverse of [`rotation_from_euler`] away from gimbal lock (`|beta| = π/2`).
pub fn euler_from_rotation(r: &Matrix3<f64>) -> (f64, f64, f64) {
    let beta = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let alpha = r[(2, 1)].atan2(r[(2, 2)]);
    let gamma = r[(1, 0)].atan2(r[(0, 0)]);
    (alpha, beta, gamma)
}

pub fn project_vertex(v: &Vector3<f64>, pose: &CameraPose) -> Vector2<f64> {
    let rv = pose.rotation() * v;
    Vector2::new(pose.f * rv.x + pose.tx, pose.f * rv.y + pose.ty)
}

/// Projected positions and camera depths of every vertex of a mesh.
#[derive(Clone, Debug)]
pub struct Projection {
    pub points: Vec<Vector2<f64>>,
    pub depths: Vec<f64>,
}

pub fn project_mesh(mesh: &Mesh, pose: &CameraPose) -> Projection {
    project_points(&mesh.vertices, pose)
}

pub fn project_points(vertices: &[Vector3<f64>], pose: &CameraPose) -> Projection {
    let r = pose.rotation();
    let t = pose.translation();
    let mut points = Vec::with_capacity(vertices.len());
    let mut depths = Vec::with_capacity(vertices.len());
    for v in vertices {
        let rv = r * v;
        points.push(rv.xy() * pose.f + t);
        depths.push(rv.z);
    }
    Projection { points, depths }
}

/// Precomputed rotation and its Euler derivatives, for batched Jacobians.
#[derive(Clone, Debug)]
pub struct PoseDerivatives {
    pose: CameraPose,
    r: Matrix3<f64>,
    dr: [Matrix3<f64>; 3],
}

impl PoseDerivatives {
    pub fn new(pose: &CameraPose) -> Self {
        let (rx, ry, rz) = (rot_x(pose.alpha), rot_y(pose.beta), rot_z(pose.gamma));
        let dra = rz * ry * d_rot_x(pose.alpha);
        let drb = rz * d_rot_y(pose.beta) * rx;
        let drg = d_rot_z(pose.gamma) * ry * rx;
        PoseDerivatives {
            pose: *pose,
            r: rz * ry * rx,
            dr: [dra, drb, drg],
        }
    }

    /// `∂Pr/∂[f, α, β, γ, tx, ty]` at point `v`.
    pub fn jacobian(&self, v: &Vector3<f64>) -> Matrix2x6<f64> {
        let f = self.pose.f;
        let rv = self.r * v;
        let mut j = Matrix2x6::zeros();
        j[(0, 0)] = rv.x;
        j[(1, 0)] = rv.y;
        for (k, d) in self.dr.iter().enumerate() {
            let dv = d * v;
            j[(0, k + 1)] = f * dv.x;
            j[(1, k + 1)] = f * dv.y;
        }
        j[(0, 4)] = 1.0;
        j[(1, 5)] = 1.0;
        j
    }

    /// Accumulates `Jᵀ g` (the pose gradient contribution of one point).
    pub fn accumulate(&self, v: &Vector3<f64>, g: &Vector2<f64>, out: &mut [f64; 6]) {
        let f = self.pose.f;
        let rv = self.r * v;
        out[0] += rv.x * g.x + rv.y * g.y;
        for (k, d) in self.dr.iter().enumerate() {
            let dv = d * v;
            out[k + 1] += f * (dv.x * g.x + dv.y * g.y);
        }
        out[4] += g.x;
        out[5] += g.y;
    }

    pub fn point_jacobian(&self) -> Matrix2x3<f64> {
        self.r.fixed_rows::<2>(0) * self.pose.f
    }
}

pub fn pose_jacobian(v: &Vector3<f64>, pose: &CameraPose) -> Matrix2x6<f64> {
    PoseDerivatives::new(pose).jacobian(v)
}

/// Unit vector pointing from the object towards the camera of `pose`,
/// expressed in model coordinates.
pub fn view_direction(pose: &CameraPose) -> Vector3<f64> {
    pose.rotation().transpose() * Vector3::z()
}
