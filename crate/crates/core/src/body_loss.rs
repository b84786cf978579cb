//! Contact and penetration terms with analytic vertex gradients, and the
//! penetration / contact-distance evaluation metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::mesh::{MeshError, TriMesh, Vec3};
use crate::sdf::{signed_distance, BodySpec, SdfError};

#[derive(Debug, Error)]
pub enum BodyLossError {
    #[error("contact loss needs at least one contact point")]
    NoContacts,
    #[error("object has no vertices")]
    NoVertices,
    #[error("invalid body loss parameters: {0}")]
    Params(String),
    #[error(transparent)]
    Sdf(#[from] SdfError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BodyLossParams {
    pub lambda_contact: f64,
    pub lambda_penetration: f64,
    /// Signed distances below this count as penetrating.
    pub threshold: f64,
}

impl Default for BodyLossParams {
    fn default() -> Self {
        BodyLossParams {
            lambda_contact: 1.0,
            lambda_penetration: 10.0,
            threshold: 0.0,
        }
    }
}

impl BodyLossParams {
    pub fn validate(&self) -> Result<(), BodyLossError> {
        if !(self.lambda_contact >= 0.0 && self.lambda_penetration >= 0.0) {
            return Err(BodyLossError::Params("weights must be non-negative".into()));
        }
        if !self.threshold.is_finite() {
            return Err(BodyLossError::Params("threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to each object vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<Vec3>,
}

fn nearest_vertex(vertices: &[Vec3], p: &Vec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, v) in vertices.iter().enumerate() {
        let d = (v - p).norm_squared();
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Mean squared distance from each contact point to its nearest object
/// vertex. Only that vertex receives gradient.
pub fn contact_loss(vertices: &[Vec3], contacts: &[Vec3]) -> Result<LossGrad, BodyLossError> {
    if contacts.is_empty() {
        return Err(BodyLossError::NoContacts);
    }
    if vertices.is_empty() {
        return Err(BodyLossError::NoVertices);
    }
    let scale = 1.0 / contacts.len() as f64;
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    let mut loss = 0.0;
    for c in contacts {
        let (i, d) = nearest_vertex(vertices, c);
        loss += d;
        grad[i] += 2.0 * scale * (vertices[i] - c);
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad,
    })
}

/// Signed distance of each vertex to the body with its spatial gradient.
pub fn vertex_signed_distances(vertices: &[Vec3], body: &BodySpec) -> Result<Vec<(f64, Vec3)>, SdfError> {
    signed_distance(body, vertices)
        .into_iter()
        .map(|r| r.map(|s| (s.distance, s.gradient)))
        .collect()
}

fn penetration_from(distances: &[(f64, Vec3)], threshold: f64) -> LossGrad {
    let mut loss = 0.0;
    let grad = distances
        .iter()
        .map(|&(d, g)| {
            if d < threshold {
                loss += d * d;
                2.0 * d * g
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    LossGrad { loss, grad }
}

/// `sum over vertices with d < threshold of d^2`.
pub fn penetration_loss(vertices: &[Vec3], body: &BodySpec, threshold: f64) -> Result<LossGrad, BodyLossError> {
    let distances = vertex_signed_distances(vertices, body)?;
    Ok(penetration_from(&distances, threshold))
}

/// Weighted body loss with its unweighted components.
#[derive(Debug, Clone, PartialEq)]
pub struct BodyLoss {
    pub total: f64,
    /// Unweighted contact term (0 when its weight is 0).
    pub contact: f64,
    /// Unweighted penetration term (0 when its weight is 0).
    pub penetration: f64,
    pub grad: Vec<Vec3>,
    /// Per-vertex signed distances, when the penetration term needed them.
    pub signed_distances: Option<Vec<f64>>,
}

pub fn body_loss(vertices: &[Vec3], body: &BodySpec, params: &BodyLossParams) -> Result<BodyLoss, BodyLossError> {
    params.validate()?;
    let mut out = BodyLoss {
        total: 0.0,
        contact: 0.0,
        penetration: 0.0,
        grad: vec![Vec3::zeros(); vertices.len()],
        signed_distances: None,
    };
    if params.lambda_contact > 0.0 {
        let c = contact_loss(vertices, body.contacts())?;
        out.contact = c.loss;
        out.total += params.lambda_contact * c.loss;
        for (g, d) in out.grad.iter_mut().zip(&c.grad) {
            *g += params.lambda_contact * d;
        }
    }
    if params.lambda_penetration > 0.0 {
        let distances = vertex_signed_distances(vertices, body)?;
        let p = penetration_from(&distances, params.threshold);
        out.penetration = p.loss;
        out.total += params.lambda_penetration * p.loss;
        for (g, d) in out.grad.iter_mut().zip(&p.grad) {
            *g += params.lambda_penetration * d;
        }
        out.signed_distances = Some(distances.iter().map(|&(d, _)| d).collect());
    }
    Ok(out)
}

/// Fit metrics of an object against a body.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// Sum of squared depths of vertices inside the body.
    pub dp: f64,
    /// Mean squared distance from contact points to their nearest object
    /// vertex (0 without contacts).
    pub dc: f64,
    pub signed_distances: Vec<f64>,
    pub vertex_count: usize,
}

pub fn penetration_score(signed_distances: &[f64]) -> f64 {
    signed_distances.iter().filter(|d| **d < 0.0).fold(0.0, |acc, d| acc + d * d)
}

pub fn contact_score(vertices: &[Vec3], contacts: &[Vec3]) -> f64 {
    if contacts.is_empty() || vertices.is_empty() {
        return 0.0;
    }
    contacts.iter().map(|c| nearest_vertex(vertices, c).1).sum::<f64>() / contacts.len() as f64
}

pub fn eval_metrics(object: &TriMesh, body: &BodySpec) -> Result<Metrics, BodyLossError> {
    let signed: Vec<f64> = vertex_signed_distances(object.vertices(), body)?
        .into_iter()
        .map(|(d, _)| d)
        .collect();
    Ok(Metrics {
        dp: penetration_score(&signed),
        dc: contact_score(object.vertices(), body.contacts()),
        vertex_count: object.num_vertices(),
        signed_distances: signed,
    })
}

/// Penetration map sidecar: one signed distance per line, in vertex order.
pub fn penetration_map_string(signed_distances: &[f64]) -> String {
    let mut out = String::with_capacity(24 * signed_distances.len());
    for d in signed_distances {
        let _ = writeln!(out, "{d}");
    }
    out
}

pub fn write_penetration_map(path: impl AsRef<Path>, signed_distances: &[f64]) -> Result<(), MeshError> {
    let path = path.as_ref();
    fs::write(path, penetration_map_string(signed_distances)).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}
