//! 2D landmark alignment.

use nalgebra::{Vector2, Vector3};

use crate::camera::{CameraPose, PoseDerivatives};
use crate::error::{Error, Result};
use crate::model::Mesh;

use super::Reduction;

/// Landmark loss value and its gradient w.r.t. landmark vertices and pose.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkTerm {
    pub value: f64,
    /// `(vertex index, ∂L/∂vertex)` for every landmark, in landmark order.
    pub d_vertices: Vec<(usize, Vector3<f64>)>,
    pub d_pose: [f64; 6],
}

/// Squared 2D distance between projected landmark vertices and `observed`.
///
/// `Mean`: `Σ |r|² / (L · diag²)`; `Sum`: `Σ |r|²` in pixels².
pub fn landmark_loss(
    mesh: &Mesh,
    pose: &CameraPose,
    observed: &[Vector2<f64>],
    diag: f64,
    reduction: Reduction,
) -> Result<LandmarkTerm> {
    let l = mesh.landmark_map.len();
    Error::check_dim("landmarks", l, observed.len())?;
    if l == 0 {
        return Ok(LandmarkTerm {
            value: 0.0,
            d_vertices: Vec::new(),
            d_pose: [0.0; 6],
        });
    }
    let scale = match reduction {
        Reduction::Mean => 1.0 / (l as f64 * diag * diag),
        Reduction::Sum => 1.0,
    };
    let deriv = PoseDerivatives::new(pose);
    let jp = deriv.point_jacobian();
    let r = pose.rotation();
    let t = pose.translation();
    let mut value = 0.0;
    let mut d_vertices = Vec::with_capacity(l);
    let mut d_pose = [0.0; 6];
    for (k, &vi) in mesh.landmark_map.iter().enumerate() {
        let v = mesh.vertices[vi];
        let p = (r * v).xy() * pose.f + t;
        let res = p - observed[k];
        value += res.norm_squared() * scale;
        let g = res * (2.0 * scale);
        d_vertices.push((vi, jp.transpose() * g));
        deriv.accumulate(&v, &g, &mut d_pose);
    }
    Ok(LandmarkTerm {
        value,
        d_vertices,
        d_pose,
    })
}
