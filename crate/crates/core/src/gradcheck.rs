//! Central finite-difference checks of the full chain (loss -> vertices ->
//! Jacobian field) on the bundled 20-face icosahedron, one suite per loss
//! term plus the weighted sum.

use std::sync::Arc;

use nalgebra::Matrix3;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body_loss::BodyLossParams;
use crate::fixtures;
use crate::guidance::{CameraSet, GuidanceLoss, GuidanceTarget, GuidanceWeights, ResamplePolicy};
use crate::jacobian::{assemble_system, JacobianField};
use crate::mesh::{build_gradient_operator, TriMesh, Vec3};
use crate::optimize::{total_loss_and_grad, Objective, ObjectiveConfig, OptimizeError};
use crate::sdf::{build_body, contacts_from_indices, BodySpec};

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

/// Agreement between the analytic gradient and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct TermCheck {
    pub name: String,
    /// Largest `|a - n| / max(|n|, 1e-3 * max|n|, 1e-10)` over all entries.
    pub max_rel_error: f64,
    pub entries: usize,
    /// Largest finite-difference magnitude, to show the term is active.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub terms: Vec<TermCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.terms.iter().all(|t| t.max_rel_error < tolerance)
    }
}

/// Relative error of one analytic entry against its finite difference.
pub fn relative_error(analytic: f64, numeric: f64, numeric_scale: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-3 * numeric_scale).max(1e-10)
}

/// The object, body, guidance and starting field used by the suites.
pub struct GradcheckScene {
    pub object: TriMesh,
    pub body: BodySpec,
    pub guidance: TriMesh,
    pub cameras: CameraSet,
    pub sigma: f64,
    pub field: JacobianField,
}

/// Icosahedron object half sunk into a cylinder limb, an icosphere guidance
/// mesh, two views, and a random field near identity so every term is
/// smooth at the evaluation point.
pub fn default_scene(seed: u64) -> GradcheckScene {
    let object = fixtures::translated(&fixtures::icosahedron(), Vec3::new(0.9, 0.1, 0.05));
    let limb = fixtures::cylinder(0.5, 1.0, 12, 4);
    let contacts = contacts_from_indices(&limb, &[24, 26, 28]).expect("ring indices are valid");
    let body = build_body(limb, contacts).expect("limb is a valid body");
    let guidance = fixtures::translated(&fixtures::icosphere(1, 0.8), Vec3::new(1.0, 0.0, 0.0));
    let cameras = CameraSet::framing(&[&object, &guidance], 48).expect("non-empty meshes");
    let sigma = 1.5 * cameras.cameras[0].pixel_size();
    let cameras = CameraSet::new(cameras.cameras.into_iter().take(2).collect()).expect("distinct views");

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = JacobianField {
        matrices: (0..object.num_faces())
            .map(|_| Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1)))
            .collect(),
    };
    GradcheckScene {
        object,
        body,
        guidance,
        cameras,
        sigma,
        field,
    }
}

fn zero_config() -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_semantic: 0.0,
        body: BodyLossParams {
            lambda_contact: 0.0,
            lambda_penetration: 0.0,
            threshold: 0.0,
        },
        alpha: 0.0,
        guidance: GuidanceWeights { chamfer: 0.0, image: 0.0 },
        samples: 256,
        resample: false,
        ..Default::default()
    }
}

/// Configurations for each single term and the default-weighted sum.
pub fn term_configs() -> Vec<(&'static str, ObjectiveConfig)> {
    let z = zero_config();
    let mut chamfer = z.clone();
    chamfer.lambda_semantic = 1.0;
    chamfer.guidance.chamfer = 1.0;
    let mut image = z.clone();
    image.lambda_semantic = 1.0;
    image.guidance.image = 1.0;
    let mut contact = z.clone();
    contact.body.lambda_contact = 1.0;
    let mut penetration = z.clone();
    penetration.body.lambda_penetration = 1.0;
    let mut regularizer = z.clone();
    regularizer.alpha = 1.0;
    let total = ObjectiveConfig {
        guidance: GuidanceWeights { chamfer: 1.0, image: 1.0 },
        ..ObjectiveConfig {
            samples: z.samples,
            resample: false,
            ..Default::default()
        }
    };
    vec![
        ("chamfer", chamfer),
        ("silhouette", image),
        ("contact", contact),
        ("penetration", penetration),
        ("regularizer", regularizer),
        ("weighted sum", total),
    ]
}

/// Checks one configuration: every entry of the 9m field gradient against a
/// central difference with step `h`.
pub fn check_term(scene: &GradcheckScene, name: &str, cfg: &ObjectiveConfig, h: f64) -> Result<TermCheck, OptimizeError> {
    let op = Arc::new(build_gradient_operator(&scene.object)?);
    let system = assemble_system(&scene.object, op, 0)?;
    let cfg = ObjectiveConfig {
        cameras: Some(scene.cameras.clone()),
        sigma: scene.sigma,
        ..cfg.clone()
    };
    let target = GuidanceTarget {
        mesh: Some(scene.guidance.clone()),
        silhouettes: None,
        sample_count: cfg.samples,
        resample: ResamplePolicy::Fixed { seed: cfg.seed },
    };
    let guidance = if cfg.lambda_semantic > 0.0 {
        GuidanceLoss::from_target(&target, &cfg.guidance, cfg.cameras.as_ref(), cfg.sigma)?
    } else {
        GuidanceLoss::new()
    };
    let objective = Objective {
        template: &scene.object,
        system: &system,
        body: Some(&scene.body),
        guidance: &guidance,
        config: &cfg,
    };
    let analytic = total_loss_and_grad(&objective, &scene.field, 1)?.grad;
    let m = scene.field.len();
    let numeric: Vec<f64> = (0..9 * m)
        .map(|e| {
            let (face, k) = (e / 9, e % 9);
            let mut plus = scene.field.clone();
            plus.matrices[face][k] += h;
            let mut minus = scene.field.clone();
            minus.matrices[face][k] -= h;
            let fp = total_loss_and_grad(&objective, &plus, 1)?.total;
            let fm = total_loss_and_grad(&objective, &minus, 1)?.total;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect::<Result<_, OptimizeError>>()?;
    let scale = numeric.iter().fold(0.0_f64, |a, n| a.max(n.abs()));
    let max_rel_error = numeric
        .iter()
        .enumerate()
        .map(|(e, &n)| relative_error(analytic[e / 9][e % 9], n, scale))
        .fold(0.0, f64::max);
    Ok(TermCheck {
        name: name.to_string(),
        max_rel_error,
        entries: 9 * m,
        scale,
    })
}

pub fn run_gradcheck(seed: u64, h: f64) -> Result<GradcheckReport, OptimizeError> {
    let scene = default_scene(seed);
    let terms = term_configs()
        .iter()
        .map(|(name, cfg)| check_term(&scene, name, cfg, h))
        .collect::<Result<_, _>>()?;
    Ok(GradcheckReport { terms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floors_small_entries() {
        assert_eq!(relative_error(1.0, 1.0, 1.0), 0.0);
        assert!((relative_error(1.01, 1.0, 1.0) - 0.01).abs() < 1e-12);
        assert!((relative_error(1e-6, 0.0, 1.0) - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn scene_terms_are_active() {
        let scene = default_scene(1);
        assert_eq!(scene.object.num_faces(), 20);
        let sd = crate::body_loss::vertex_signed_distances(scene.object.vertices(), &scene.body).unwrap();
        assert!(sd.iter().any(|(d, _)| *d < 0.0));
        assert!(sd.iter().any(|(d, _)| *d > 0.0));
    }
}
