//! The optimization loop over the Jacobian field: Poisson solve, guidance
//! and body losses on the solved vertices, adjoint back to the field, and an
//! Adam update. Also the two-stage baseline (semantics first, body second).

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::Matrix3;
use thiserror::Error;

use crate::body_loss::{body_loss, contact_score, penetration_score, vertex_signed_distances, BodyLossError, BodyLossParams};
use crate::guidance::{CameraSet, GuidanceError, GuidanceLoss, GuidanceTarget, GuidanceWeights, ResamplePolicy};
use crate::jacobian::{
    assemble_system, backprop_to_jacobians, default_pin, field_regularizer, solve_deformation, JacobianField,
    PoissonSystem, SolverError,
};
use crate::mesh::{build_gradient_operator, write_mesh, MeshError, TriMesh, Vec3};
use crate::sdf::BodySpec;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {term} at iteration {iteration}")]
    NonFinite { iteration: usize, term: String },
    #[error("semantic term: {0}")]
    Guidance(#[from] GuidanceError),
    #[error("body term: {0}")]
    Body(#[from] BodyLossError),
    #[error("poisson solve: {0}")]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    pub lambda_semantic: f64,
    pub body: BodyLossParams,
    pub alpha: f64,
    pub guidance: GuidanceWeights,
    /// Required when the image weight is positive.
    pub cameras: Option<CameraSet>,
    /// Silhouette softness in model units.
    pub sigma: f64,
    pub samples: usize,
    /// Draw fresh Chamfer samples every iteration.
    pub resample: bool,
    pub iterations: usize,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    /// Snapshot period in iterations; 0 disables snapshots.
    pub snapshot_every: usize,
    pub snapshot_dir: Option<PathBuf>,
    pub seed: u64,
    /// Pinned template vertex; defaults to the vertex nearest the contact centroid.
    pub pin: Option<usize>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda_semantic: 1.0,
            body: BodyLossParams::default(),
            alpha: 0.05,
            guidance: GuidanceWeights::default(),
            cameras: None,
            sigma: 0.01,
            samples: 4096,
            resample: true,
            iterations: 1000,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            snapshot_every: 0,
            snapshot_dir: None,
            seed: 0,
            pin: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: String| Err(OptimizeError::Config(m));
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, w) in [
            ("lambda_semantic", self.lambda_semantic),
            ("alpha", self.alpha),
            ("chamfer weight", self.guidance.chamfer),
            ("image weight", self.guidance.image),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be non-negative, got {w}"));
            }
        }
        self.body.validate()?;
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.lambda_semantic > 0.0 && self.guidance.chamfer > 0.0 && self.samples == 0 {
            return bad("chamfer guidance needs at least one sample".into());
        }
        if self.lambda_semantic > 0.0 && self.guidance.image > 0.0 && self.cameras.is_none() {
            return bad("image guidance needs cameras".into());
        }
        Ok(())
    }

    fn resample_policy(&self) -> ResamplePolicy {
        if self.resample {
            ResamplePolicy::PerIteration { seed: self.seed }
        } else {
            ResamplePolicy::Fixed { seed: self.seed }
        }
    }

    fn uses_body(&self) -> bool {
        self.body.lambda_contact > 0.0 || self.body.lambda_penetration > 0.0
    }
}

/// Loss terms at one iteration. The four weighted terms sum to `total`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub total: f64,
    pub semantic: f64,
    pub contact: f64,
    pub penetration: f64,
    pub regularizer: f64,
    /// Penetration and contact metrics of the current mesh, when a body is given.
    pub dp: Option<f64>,
    pub dc: Option<f64>,
    pub vertices: Vec<Vec3>,
    pub grad: Vec<Matrix3<f64>>,
}

/// Everything one evaluation needs besides the field.
pub struct Objective<'a> {
    pub template: &'a TriMesh,
    pub system: &'a PoissonSystem,
    pub body: Option<&'a BodySpec>,
    pub guidance: &'a GuidanceLoss,
    pub config: &'a ObjectiveConfig,
}

fn first_non_finite(terms: &[(&str, f64)]) -> Option<String> {
    terms.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n.to_string())
}

/// Weighted objective and its gradient on the Jacobian field.
pub fn total_loss_and_grad(obj: &Objective<'_>, field: &JacobianField, iteration: usize) -> Result<Evaluation, OptimizeError> {
    let cfg = obj.config;
    let state = solve_deformation(obj.system, field)?;
    let mesh = obj.template.with_positions(state.vertices)?;
    let n = mesh.num_vertices();

    let use_semantic = cfg.lambda_semantic > 0.0 && !obj.guidance.is_empty();
    let (guided, bodied) = rayon::join(
        || -> Result<_, OptimizeError> {
            if !use_semantic {
                return Ok(None);
            }
            Ok(Some(crate::guidance::guidance_loss(&mesh, obj.guidance, iteration as u64)?))
        },
        || -> Result<_, OptimizeError> {
            let Some(body) = obj.body else {
                return Ok(None);
            };
            let loss = if cfg.uses_body() {
                Some(body_loss(mesh.vertices(), body, &cfg.body)?)
            } else {
                None
            };
            let distances = match loss.as_ref().and_then(|l| l.signed_distances.clone()) {
                Some(d) => d,
                None => vertex_signed_distances(mesh.vertices(), body)
                    .map_err(BodyLossError::from)?
                    .into_iter()
                    .map(|(d, _)| d)
                    .collect(),
            };
            let dp = penetration_score(&distances);
            let dc = contact_score(mesh.vertices(), body.contacts());
            Ok(Some((loss, dp, dc)))
        },
    );
    let (guided, bodied) = (guided?, bodied?);
    if cfg.uses_body() && obj.body.is_none() {
        return Err(OptimizeError::Config("body weights are positive but no body was given".into()));
    }

    let mut grad_vertices = vec![Vec3::zeros(); n];
    let mut semantic = 0.0;
    if let Some(g) = &guided {
        semantic = cfg.lambda_semantic * g.total;
        for (acc, d) in grad_vertices.iter_mut().zip(&g.grad) {
            *acc += cfg.lambda_semantic * d;
        }
    }
    let (mut contact, mut penetration, mut dp, mut dc) = (0.0, 0.0, None, None);
    if let Some((loss, p, c)) = &bodied {
        dp = Some(*p);
        dc = Some(*c);
        if let Some(l) = loss {
            contact = cfg.body.lambda_contact * l.contact;
            penetration = cfg.body.lambda_penetration * l.penetration;
            for (acc, d) in grad_vertices.iter_mut().zip(&l.grad) {
                *acc += d;
            }
        }
    }
    let (reg, reg_grad) = field_regularizer(field);
    let regularizer = cfg.alpha * reg;
    let total = semantic + contact + penetration + regularizer;

    if let Some(term) = first_non_finite(&[
        ("semantic loss", semantic),
        ("contact loss", contact),
        ("penetration loss", penetration),
        ("regularizer", regularizer),
    ]) {
        return Err(OptimizeError::NonFinite { iteration, term });
    }

    let mut grad = backprop_to_jacobians(obj.system, &grad_vertices)?;
    for (g, r) in grad.iter_mut().zip(&reg_grad) {
        *g += cfg.alpha * r;
    }
    if grad.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(OptimizeError::NonFinite {
            iteration,
            term: "gradient".into(),
        });
    }
    Ok(Evaluation {
        total,
        semantic,
        contact,
        penetration,
        regularizer,
        dp,
        dc,
        vertices: mesh.vertices().to_vec(),
        grad,
    })
}

/// First and second moment estimates for every field entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix3<f64>>,
    pub v: Vec<Matrix3<f64>>,
    pub step: u32,
}

impl AdamState {
    pub fn new(faces: usize) -> Self {
        AdamState {
            m: vec![Matrix3::zeros(); faces],
            v: vec![Matrix3::zeros(); faces],
            step: 0,
        }
    }
}

pub fn adam_step(
    field: &mut JacobianField,
    grad: &[Matrix3<f64>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), OptimizeError> {
    if grad.len() != field.len() || state.m.len() != field.len() {
        return Err(OptimizeError::Solver(SolverError::Dimension {
            expected: field.len(),
            actual: grad.len(),
        }));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((j, g), (m, v)) in field
        .matrices
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..9 {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            j[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Joint,
    Semantic,
    Body,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::Joint => "joint",
            Stage::Semantic => "semantic",
            Stage::Body => "body",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordRow {
    pub stage: Stage,
    /// 1-based, restarting with each stage.
    pub iteration: usize,
    pub total: f64,
    pub semantic: f64,
    pub contact: f64,
    pub penetration: f64,
    pub regularizer: f64,
    pub dp: Option<f64>,
    pub dc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub stage: Stage,
    pub iteration: usize,
    pub path: PathBuf,
}

/// Per-iteration trace of a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
    pub snapshots: Vec<Snapshot>,
    /// Seconds spent in each iteration, parallel to `rows`.
    pub wall_clock: Vec<f64>,
}

pub const RECORD_HEADER: &str = "stage,iteration,total,semantic,contact,penetration,regularizer,dp,dc";

impl RunRecord {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Loss columns only, so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from(RECORD_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.stage.label(),
                r.iteration,
                r.total,
                r.semantic,
                r.contact,
                r.penetration,
                r.regularizer,
                opt(r.dp),
                opt(r.dc)
            );
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("stage,iteration,seconds\n");
        for (r, t) in self.rows.iter().zip(&self.wall_clock) {
            let _ = writeln!(out, "{},{},{:.6}", r.stage.label(), r.iteration, t);
        }
        out
    }

    fn extend(&mut self, other: RunRecord) {
        self.rows.extend(other.rows);
        self.snapshots.extend(other.snapshots);
        self.wall_clock.extend(other.wall_clock);
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mesh: TriMesh,
    pub field: JacobianField,
    pub record: RunRecord,
}

fn run_stage(
    template: &TriMesh,
    body: Option<&BodySpec>,
    guidance: &GuidanceLoss,
    cfg: &ObjectiveConfig,
    stage: Stage,
    pin: usize,
) -> Result<RunOutput, OptimizeError> {
    let op = Arc::new(build_gradient_operator(template)?);
    let system = assemble_system(template, op, pin)?;
    let objective = Objective {
        template,
        system: &system,
        body,
        guidance,
        config: cfg,
    };
    let mut field = JacobianField::identity(template.num_faces());
    let mut adam = AdamState::new(field.len());
    let mut record = RunRecord::default();
    if let Some(dir) = cfg.snapshot_dir.as_ref().filter(|_| cfg.snapshot_every > 0) {
        fs::create_dir_all(dir).map_err(|source| MeshError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    for iteration in 1..=cfg.iterations {
        let started = Instant::now();
        let eval = total_loss_and_grad(&objective, &field, iteration)?;
        if cfg.snapshot_every > 0 && iteration % cfg.snapshot_every == 0 {
            if let Some(dir) = &cfg.snapshot_dir {
                let path = dir.join(format!("{}_{:06}.obj", stage.label(), iteration));
                write_mesh(&template.with_positions(eval.vertices.clone())?, &path)?;
                record.snapshots.push(Snapshot { stage, iteration, path });
            }
        }
        adam_step(&mut field, &eval.grad, &mut adam, cfg.learning_rate, cfg.betas, cfg.epsilon)?;
        if !field.is_finite() {
            return Err(OptimizeError::NonFinite {
                iteration,
                term: "jacobian field".into(),
            });
        }
        record.rows.push(RecordRow {
            stage,
            iteration,
            total: eval.total,
            semantic: eval.semantic,
            contact: eval.contact,
            penetration: eval.penetration,
            regularizer: eval.regularizer,
            dp: eval.dp,
            dc: eval.dc,
        });
        record.wall_clock.push(started.elapsed().as_secs_f64());
    }
    let state = solve_deformation(&system, &field)?;
    Ok(RunOutput {
        mesh: template.with_positions(state.vertices)?,
        field,
        record,
    })
}

fn build_guidance(target: &GuidanceTarget, cfg: &ObjectiveConfig) -> Result<GuidanceLoss, OptimizeError> {
    if cfg.lambda_semantic == 0.0 {
        return Ok(GuidanceLoss::new());
    }
    let target = GuidanceTarget {
        sample_count: cfg.samples,
        resample: cfg.resample_policy(),
        ..target.clone()
    };
    Ok(GuidanceLoss::from_target(&target, &cfg.guidance, cfg.cameras.as_ref(), cfg.sigma)?)
}

fn pin_for(template: &TriMesh, body: Option<&BodySpec>, pin: Option<usize>) -> usize {
    pin.unwrap_or_else(|| default_pin(template, body.map(|b| b.contacts()).unwrap_or(&[])))
}

/// Joint optimization of guidance, body and regularizer terms.
pub fn run_optimization(
    template: &TriMesh,
    body: Option<&BodySpec>,
    target: &GuidanceTarget,
    cfg: &ObjectiveConfig,
) -> Result<RunOutput, OptimizeError> {
    cfg.validate()?;
    if cfg.uses_body() && body.is_none() {
        return Err(OptimizeError::Config("body weights are positive but no body was given".into()));
    }
    let guidance = build_guidance(target, cfg)?;
    run_stage(template, body, &guidance, cfg, Stage::Joint, pin_for(template, body, cfg.pin))
}

/// Where the body-only stage of the two-stage baseline starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SecondStageStart {
    /// The result of the semantics-only stage.
    #[default]
    SemanticResult,
    /// The guidance mesh itself; the semantics-only stage is skipped.
    GuidanceMesh,
}

/// Baseline: semantics only, then body terms only on the result. Both
/// stages run `cfg.iterations` iterations and keep the regularizer.
pub fn run_two_stage(
    template: &TriMesh,
    body: &BodySpec,
    target: &GuidanceTarget,
    cfg: &ObjectiveConfig,
    start: SecondStageStart,
) -> Result<RunOutput, OptimizeError> {
    cfg.validate()?;
    let guidance_mesh = target
        .mesh
        .as_ref()
        .ok_or_else(|| OptimizeError::Config("two-stage runs need a guidance mesh".into()))?;
    let mut record = RunRecord::default();
    let (refine_from, pin) = match start {
        SecondStageStart::SemanticResult => {
            let semantic_cfg = ObjectiveConfig {
                body: BodyLossParams {
                    lambda_contact: 0.0,
                    lambda_penetration: 0.0,
                    ..cfg.body
                },
                ..cfg.clone()
            };
            let guidance = build_guidance(target, &semantic_cfg)?;
            let pin = pin_for(template, Some(body), cfg.pin);
            let first = run_stage(template, Some(body), &guidance, &semantic_cfg, Stage::Semantic, pin)?;
            record.extend(first.record);
            (first.mesh, pin)
        }
        SecondStageStart::GuidanceMesh => {
            let pin = default_pin(guidance_mesh, body.contacts());
            (guidance_mesh.clone(), pin)
        }
    };
    let body_cfg = ObjectiveConfig {
        lambda_semantic: 0.0,
        ..cfg.clone()
    };
    let second = run_stage(&refine_from, Some(body), &GuidanceLoss::new(), &body_cfg, Stage::Body, pin)?;
    record.extend(second.record);
    Ok(RunOutput {
        mesh: second.mesh,
        field: second.field,
        record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::guidance::{mesh_chamfer, GuidanceTerm, GuidanceContext, TermValue};
    use crate::sdf::{build_body, contacts_from_indices};

    fn no_target() -> GuidanceTarget {
        GuidanceTarget {
            mesh: None,
            silhouettes: None,
            sample_count: 0,
            resample: ResamplePolicy::Fixed { seed: 0 },
        }
    }

    fn limb() -> BodySpec {
        let cyl = fixtures::cylinder(0.5, 1.0, 16, 4);
        let contacts = contacts_from_indices(&cyl, &fixtures::cylinder_ring(16, 2)).unwrap();
        build_body(cyl, contacts).unwrap()
    }

    #[test]
    fn only_regularizer_at_identity_is_zero() {
        let mesh = fixtures::icosahedron();
        let op = Arc::new(build_gradient_operator(&mesh).unwrap());
        let system = assemble_system(&mesh, op, 0).unwrap();
        let cfg = ObjectiveConfig {
            lambda_semantic: 0.0,
            body: BodyLossParams {
                lambda_contact: 0.0,
                lambda_penetration: 0.0,
                threshold: 0.0,
            },
            ..Default::default()
        };
        let guidance = GuidanceLoss::new();
        let obj = Objective {
            template: &mesh,
            system: &system,
            body: None,
            guidance: &guidance,
            config: &cfg,
        };
        let e = total_loss_and_grad(&obj, &JacobianField::identity(20), 1).unwrap();
        assert_eq!(e.total, 0.0);
        assert!(e.grad.iter().all(|g| g.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn logged_terms_sum_to_total() {
        let mesh = fixtures::translated(&fixtures::icosphere(1, 0.6), Vec3::new(0.3, 0.0, 0.0));
        let body = limb();
        let target = GuidanceTarget::from_mesh(fixtures::cube(0.5, 2), 256, 1);
        let cfg = ObjectiveConfig {
            iterations: 5,
            samples: 256,
            alpha: 0.01,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = run_optimization(&mesh, Some(&body), &target, &cfg).unwrap();
        assert_eq!(out.record.len(), 5);
        for r in &out.record.rows {
            let sum = r.semantic + r.contact + r.penetration + r.regularizer;
            assert!((sum - r.total).abs() <= 1e-12 * r.total.abs().max(1.0));
            assert!(r.dp.is_some() && r.dc.is_some());
        }
        assert_eq!(out.mesh.faces(), mesh.faces());
    }

    #[test]
    fn adam_zero_gradient_keeps_field() {
        let mut field = JacobianField::identity(3);
        field.matrices[1][(0, 2)] = 0.3;
        let before = field.clone();
        let mut state = AdamState::new(3);
        adam_step(&mut field, &vec![Matrix3::zeros(); 3], &mut state, 0.01, (0.9, 0.999), 1e-8).unwrap();
        assert_eq!(field, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut field = JacobianField::identity(1);
        let mut g = Matrix3::zeros();
        g[(0, 0)] = 0.5;
        g[(1, 2)] = -2.0;
        g[(2, 1)] = 1e-9;
        let mut state = AdamState::new(1);
        adam_step(&mut field, &[g], &mut state, 0.01, (0.9, 0.999), 1e-8).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for k in 0..9 {
            let expected = Matrix3::<f64>::identity()[k] - 0.01 * g[k] / (g[k].abs() + 1e-8);
            assert!((field.matrices[0][k] - expected).abs() < 1e-15, "entry {k}");
        }
        assert!((field.matrices[0][(2, 1)] - (-0.01 * 1e-9 / (1e-9 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn runs_are_bit_identical() {
        let mesh = fixtures::icosphere(1, 0.5);
        let target = GuidanceTarget::from_mesh(fixtures::cube(0.4, 2), 512, 3);
        let cfg = ObjectiveConfig {
            iterations: 20,
            samples: 512,
            learning_rate: 1e-2,
            alpha: 1e-3,
            body: BodyLossParams {
                lambda_contact: 0.0,
                lambda_penetration: 0.0,
                threshold: 0.0,
            },
            ..Default::default()
        };
        let a = run_optimization(&mesh, None, &target, &cfg).unwrap();
        let b = run_optimization(&mesh, None, &target, &cfg).unwrap();
        assert_eq!(a.field, b.field);
        assert_eq!(a.record.to_csv(), b.record.to_csv());
        assert!(a.record.rows[0].dp.is_none());
    }

    #[test]
    fn self_target_stays_near_identity() {
        let mesh = fixtures::icosphere(2, 0.5);
        let target = GuidanceTarget::from_mesh(mesh.clone(), 2048, 9);
        let cfg = ObjectiveConfig {
            iterations: 100,
            samples: 2048,
            body: BodyLossParams {
                lambda_contact: 0.0,
                lambda_penetration: 0.0,
                threshold: 0.0,
            },
            ..Default::default()
        };
        let out = run_optimization(&mesh, None, &target, &cfg).unwrap();
        let initial = mesh_chamfer(&mesh, &mesh, 8192, 1).unwrap();
        let fin = mesh_chamfer(&out.mesh, &mesh, 8192, 1).unwrap();
        assert!(fin <= initial * 1.05 + 1e-5, "{initial} -> {fin}");
        let (reg, _) = field_regularizer(&out.field);
        assert!(reg / (mesh.num_faces() as f64) < 1e-2, "{reg}");
    }

    #[test]
    fn non_finite_loss_is_attributed() {
        struct Broken;
        impl GuidanceTerm for Broken {
            fn name(&self) -> &str {
                "broken"
            }
            fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<TermValue, GuidanceError> {
                Ok(TermValue {
                    loss: if ctx.iteration >= 3 { f64::NAN } else { 1.0 },
                    grad: vec![Vec3::zeros(); ctx.mesh.num_vertices()],
                })
            }
        }
        let mesh = fixtures::icosahedron();
        let mut guidance = GuidanceLoss::new();
        guidance.register(1.0, Box::new(Broken));
        let cfg = ObjectiveConfig {
            iterations: 10,
            body: BodyLossParams {
                lambda_contact: 0.0,
                lambda_penetration: 0.0,
                threshold: 0.0,
            },
            ..Default::default()
        };
        let err = run_stage(&mesh, None, &guidance, &cfg, Stage::Joint, 0).unwrap_err();
        match err {
            OptimizeError::NonFinite { iteration, term } => {
                assert_eq!(iteration, 3);
                assert_eq!(term, "semantic loss");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(ObjectiveConfig::default().validate().is_ok());
        assert!(ObjectiveConfig { iterations: 0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(ObjectiveConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        let mut image = ObjectiveConfig::default();
        image.guidance.image = 1.0;
        assert!(image.validate().is_err());
        let mesh = fixtures::icosahedron();
        assert!(matches!(
            run_optimization(&mesh, None, &no_target(), &ObjectiveConfig::default()),
            Err(OptimizeError::Config(_))
        ));
    }

    #[test]
    fn two_stage_zeroes_stage_weights() {
        let mesh = fixtures::translated(&fixtures::torus(0.6, 0.15, 12, 6), Vec3::new(0.0, 0.0, 0.0));
        let body = limb();
        let target = GuidanceTarget::from_mesh(fixtures::torus(0.62, 0.15, 12, 6), 256, 4);
        let cfg = ObjectiveConfig {
            iterations: 4,
            samples: 256,
            pin: Some(0),
            ..Default::default()
        };
        let out = run_two_stage(&mesh, &body, &target, &cfg, SecondStageStart::SemanticResult).unwrap();
        assert_eq!(out.record.len(), 8);
        for r in &out.record.rows[..4] {
            assert_eq!(r.stage, Stage::Semantic);
            assert_eq!((r.contact, r.penetration), (0.0, 0.0));
        }
        for r in &out.record.rows[4..] {
            assert_eq!(r.stage, Stage::Body);
            assert_eq!(r.semantic, 0.0);
        }
        let from_guidance = run_two_stage(&mesh, &body, &target, &cfg, SecondStageStart::GuidanceMesh).unwrap();
        assert_eq!(from_guidance.record.len(), 4);
    }
}
