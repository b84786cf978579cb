//! Bundled experiment recipes: the with/without body-loss ablation and the
//! joint versus two-stage comparison on a ring worn around a limb, and the
//! sphere-to-cube evolution run.

use crate::body_loss::{eval_metrics, BodyLossParams};
use crate::fixtures;
use crate::guidance::{mesh_chamfer, GuidanceTarget};
use crate::mesh::TriMesh;
use crate::optimize::{run_optimization, run_two_stage, ObjectiveConfig, OptimizeError, RunOutput, SecondStageStart};
use crate::sdf::{build_body, contacts_from_indices, BodySpec};

/// Samples used when measuring Chamfer distance to the guidance mesh.
pub const METRIC_SAMPLES: usize = 8192;
pub const METRIC_SEED: u64 = 0x00c0_ffee;

pub const LIMB_RADIUS: f64 = 0.5;
const LIMB_SEGMENTS: usize = 32;
const LIMB_RINGS: usize = 8;
const RING_SEGMENTS: usize = 32;
const TUBE_SEGMENTS: usize = 16;

/// A ring around a cylindrical limb.
///
/// The template is a fat torus resting on the limb along its inner equator.
/// The guidance torus touches the limb at the four contact points and sinks
/// up to 0.05 into it between them. Template vertex 8 (inner equator at
/// angle zero) coincides with a contact point and with the guidance mesh,
/// and is pinned.
pub struct LimbScene {
    pub template: TriMesh,
    pub guidance: TriMesh,
    pub body: BodySpec,
    pub pin: usize,
}

pub fn limb_scene() -> LimbScene {
    let limb = fixtures::cylinder(LIMB_RADIUS, 1.0, LIMB_SEGMENTS, LIMB_RINGS);
    let ring = fixtures::cylinder_ring(LIMB_SEGMENTS, LIMB_RINGS / 2);
    let contact_ids: Vec<usize> = ring.iter().step_by(LIMB_SEGMENTS / 4).copied().collect();
    let contacts = contacts_from_indices(&limb, &contact_ids).expect("ring indices are valid");
    let body = build_body(limb, contacts).expect("limb is a valid body");

    let template = fixtures::torus(0.7, 0.2, RING_SEGMENTS, TUBE_SEGMENTS);
    let guidance = fixtures::torus_with(RING_SEGMENTS, TUBE_SEGMENTS, |theta| {
        let dip = (2.0 * theta).sin().powi(2);
        (0.65 - 0.05 * dip, 0.15)
    });
    LimbScene {
        template,
        guidance,
        body,
        pin: TUBE_SEGMENTS / 2,
    }
}

/// Optimizer settings for the limb recipes, trading iterations for a
/// larger step so each run takes seconds.
pub fn limb_config() -> ObjectiveConfig {
    ObjectiveConfig {
        lambda_semantic: 1.0,
        body: BodyLossParams::default(),
        alpha: 1e-5,
        samples: 2048,
        iterations: 1000,
        learning_rate: 2e-3,
        pin: Some(TUBE_SEGMENTS / 2),
        seed: 7,
        ..Default::default()
    }
}

/// Final measurements of one run against the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitSummary {
    pub dp: f64,
    pub dc: f64,
    pub guidance_cd: f64,
}

pub fn summarize(mesh: &TriMesh, scene: &LimbScene) -> Result<FitSummary, OptimizeError> {
    let m = eval_metrics(mesh, &scene.body)?;
    Ok(FitSummary {
        dp: m.dp,
        dc: m.dc,
        guidance_cd: mesh_chamfer(mesh, &scene.guidance, METRIC_SAMPLES, METRIC_SEED)?,
    })
}

fn without_body(cfg: &ObjectiveConfig) -> ObjectiveConfig {
    ObjectiveConfig {
        body: BodyLossParams {
            lambda_contact: 0.0,
            lambda_penetration: 0.0,
            ..cfg.body
        },
        ..cfg.clone()
    }
}

pub struct AblationResult {
    pub with_body: FitSummary,
    pub without_body: FitSummary,
    pub with_run: RunOutput,
    pub without_run: RunOutput,
}

/// The same guided run with and without the contact and penetration terms.
pub fn body_loss_ablation(scene: &LimbScene, cfg: &ObjectiveConfig) -> Result<AblationResult, OptimizeError> {
    let target = GuidanceTarget::from_mesh(scene.guidance.clone(), cfg.samples, cfg.seed);
    let with_run = run_optimization(&scene.template, Some(&scene.body), &target, cfg)?;
    let without_run = run_optimization(&scene.template, Some(&scene.body), &target, &without_body(cfg))?;
    Ok(AblationResult {
        with_body: summarize(&with_run.mesh, scene)?,
        without_body: summarize(&without_run.mesh, scene)?,
        with_run,
        without_run,
    })
}

pub struct ComparisonResult {
    pub joint: FitSummary,
    pub semantic_only: FitSummary,
    pub two_stage: FitSummary,
    pub guidance: FitSummary,
}

/// The two-stage baseline: semantics only, then body refinement of the result.
pub fn two_stage_baseline(scene: &LimbScene, cfg: &ObjectiveConfig) -> Result<(FitSummary, RunOutput), OptimizeError> {
    let target = GuidanceTarget::from_mesh(scene.guidance.clone(), cfg.samples, cfg.seed);
    let run = run_two_stage(&scene.template, &scene.body, &target, cfg, SecondStageStart::SemanticResult)?;
    Ok((summarize(&run.mesh, scene)?, run))
}

/// Joint optimization against the semantics-only run and the two-stage
/// baseline.
pub fn joint_vs_two_stage(scene: &LimbScene, cfg: &ObjectiveConfig) -> Result<ComparisonResult, OptimizeError> {
    let ablation = body_loss_ablation(scene, cfg)?;
    let (two_stage, _) = two_stage_baseline(scene, cfg)?;
    Ok(ComparisonResult {
        joint: ablation.with_body,
        semantic_only: ablation.without_body,
        two_stage,
        guidance: summarize(&scene.guidance, scene)?,
    })
}

/// A sphere template and a cube guidance mesh. The cube is sized so that the
/// pinned sphere vertex (the one nearest the +x axis) lies on its +x face.
pub struct SphereCubeScene {
    pub template: TriMesh,
    pub guidance: TriMesh,
    pub pin: usize,
}

pub fn sphere_cube_scene() -> SphereCubeScene {
    let template = fixtures::icosphere(3, 0.5);
    let pin = template
        .vertices()
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| (a.x / a.norm()).total_cmp(&(b.x / b.norm())))
        .map(|(i, _)| i)
        .expect("sphere has vertices");
    let half = template.vertices()[pin].x;
    SphereCubeScene {
        template,
        guidance: fixtures::cube(half, 6),
        pin,
    }
}

pub fn sphere_cube_config() -> ObjectiveConfig {
    ObjectiveConfig {
        body: BodyLossParams {
            lambda_contact: 0.0,
            lambda_penetration: 0.0,
            threshold: 0.0,
        },
        alpha: 1e-6,
        samples: 2048,
        iterations: 1000,
        learning_rate: 1e-3,
        seed: 11,
        ..Default::default()
    }
}

pub fn sphere_to_cube(scene: &SphereCubeScene, cfg: &ObjectiveConfig) -> Result<RunOutput, OptimizeError> {
    let target = GuidanceTarget::from_mesh(scene.guidance.clone(), cfg.samples, cfg.seed);
    let cfg = ObjectiveConfig {
        pin: Some(scene.pin),
        ..cfg.clone()
    };
    run_optimization(&scene.template, None, &target, &cfg)
}
