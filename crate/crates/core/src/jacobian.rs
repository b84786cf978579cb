//! Per-face Jacobian fields and the area-weighted Poisson solve that turns
//! them into vertex positions, together with its adjoint.
//!
//! The system matrix `A = G^T M G` depends only on the rest mesh, so it is
//! factorized once. One vertex is pinned to remove the translation
//! nullspace; the remaining block is symmetric positive definite for a
//! connected mesh.

use std::collections::VecDeque;
use std::sync::Arc;

use nalgebra::{DMatrix, Matrix3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use thiserror::Error;

use crate::mesh::{FaceGradientOperator, TriMesh, Vec3};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("pinned vertex {pinned} out of range for {count} vertices")]
    PinOutOfRange { pinned: usize, count: usize },
    #[error("mesh is disconnected: {components} components; smallest has {smallest_size} vertices (e.g. {smallest_vertices:?})")]
    Disconnected {
        components: usize,
        smallest_size: usize,
        smallest_vertices: Vec<usize>,
    },
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },
    #[error("operator and mesh disagree on topology")]
    Topology,
}

/// One 3x3 matrix per face.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianField {
    pub matrices: Vec<Matrix3<f64>>,
}

impl JacobianField {
    pub fn identity(faces: usize) -> Self {
        JacobianField {
            matrices: vec![Matrix3::identity(); faces],
        }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

pub fn init_identity_field(mesh: &TriMesh) -> JacobianField {
    JacobianField::identity(mesh.num_faces())
}

/// Prefactorized Poisson system for one rest mesh.
pub struct PoissonSystem {
    op: Arc<FaceGradientOperator>,
    laplacian: CscMatrix<f64>,
    reduced: CscMatrix<f64>,
    factor: CscCholesky<f64>,
    /// Reduced (permuted) row of each free vertex; `usize::MAX` for the pin.
    slot: Vec<usize>,
    /// Vertex held by each reduced row.
    vertex_of_slot: Vec<usize>,
    pinned: usize,
    pinned_position: Vec3,
}

impl std::fmt::Debug for PoissonSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PoissonSystem")
            .field("vertices", &self.slot.len())
            .field("faces", &self.op.num_faces())
            .field("pinned", &self.pinned)
            .finish()
    }
}

/// Vertices recovered from a Jacobian field.
#[derive(Debug, Clone)]
pub struct DeformationState {
    pub vertices: Vec<Vec3>,
    pub field: JacobianField,
}

/// Vertex adjacency from face edges (sorted, deduplicated).
fn adjacency(faces: &[[usize; 3]], n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for f in faces {
        for k in 0..3 {
            let (a, b) = (f[k], f[(k + 1) % 3]);
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Reverse Cuthill-McKee ordering of the free vertices (bandwidth reduction
/// keeps Cholesky fill small).
fn rcm_order(adj: &[Vec<usize>], skip: usize) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    visited[skip] = true;
    let mut order = Vec::with_capacity(n);
    let mut by_degree: Vec<usize> = (0..n).filter(|&v| v != skip).collect();
    by_degree.sort_by_key(|&v| (adj[v].len(), v));
    for &start in &by_degree {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&u| !visited[u]).collect();
            next.sort_by_key(|&u| (adj[u].len(), u));
            for u in next {
                visited[u] = true;
                queue.push_back(u);
            }
        }
    }
    order.reverse();
    order
}

/// Pin choice: the template vertex nearest the centroid of the contact
/// points, or vertex 0 without contacts.
pub fn default_pin(mesh: &TriMesh, contacts: &[Vec3]) -> usize {
    if contacts.is_empty() {
        return 0;
    }
    let centroid = contacts.iter().sum::<Vec3>() / contacts.len() as f64;
    mesh.vertices()
        .iter()
        .enumerate()
        .min_by(|(_, a), (_, b)| (*a - centroid).norm_squared().total_cmp(&(*b - centroid).norm_squared()))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

pub fn assemble_system(
    mesh: &TriMesh,
    op: Arc<FaceGradientOperator>,
    pinned: usize,
) -> Result<PoissonSystem, SolverError> {
    let n = mesh.num_vertices();
    if pinned >= n {
        return Err(SolverError::PinOutOfRange { pinned, count: n });
    }
    if op.num_vertices() != n || op.faces() != mesh.faces() {
        return Err(SolverError::Topology);
    }
    let comps = mesh.connected_components();
    if comps.len() > 1 {
        let smallest = comps.last().expect("at least two components");
        return Err(SolverError::Disconnected {
            components: comps.len(),
            smallest_size: smallest.len(),
            smallest_vertices: smallest.iter().take(8).copied().collect(),
        });
    }

    let mut coo = CooMatrix::new(n, n);
    for (fi, f) in op.faces().iter().enumerate() {
        let area = op.areas()[fi];
        let g = op.hat_gradients(fi);
        for k in 0..3 {
            for l in 0..3 {
                coo.push(f[k], f[l], area * g[k].dot(&g[l]));
            }
        }
    }
    let laplacian = CscMatrix::from(&coo);

    let adj = adjacency(op.faces(), n);
    let vertex_of_slot = rcm_order(&adj, pinned);
    let mut slot = vec![usize::MAX; n];
    for (s, &v) in vertex_of_slot.iter().enumerate() {
        slot[v] = s;
    }
    let mut reduced_coo = CooMatrix::new(n - 1, n - 1);
    for (row, col, &val) in laplacian.triplet_iter() {
        if row != pinned && col != pinned {
            reduced_coo.push(slot[row], slot[col], val);
        }
    }
    let reduced = CscMatrix::from(&reduced_coo);
    let factor = CscCholesky::factor(&reduced).map_err(|e| SolverError::Factorization(format!("{e:?}")))?;

    Ok(PoissonSystem {
        op,
        laplacian,
        reduced,
        factor,
        slot,
        vertex_of_slot,
        pinned,
        pinned_position: mesh.vertices()[pinned],
    })
}

impl PoissonSystem {
    pub fn operator(&self) -> &FaceGradientOperator {
        &self.op
    }

    pub fn num_vertices(&self) -> usize {
        self.slot.len()
    }

    pub fn num_faces(&self) -> usize {
        self.op.num_faces()
    }

    pub fn pinned(&self) -> usize {
        self.pinned
    }

    pub fn pinned_position(&self) -> Vec3 {
        self.pinned_position
    }

    /// `G^T M G` over all vertices.
    pub fn laplacian(&self) -> &CscMatrix<f64> {
        &self.laplacian
    }

    /// The factorized block (free vertices, permuted).
    pub fn reduced_matrix(&self) -> &CscMatrix<f64> {
        &self.reduced
    }

    /// Solves the factorized block for an `(n-1) x k` right-hand side.
    pub fn solve_reduced(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(rhs)
    }

    /// Right-hand side `G^T M j(field)`, one row per vertex.
    fn rhs(&self, field: &JacobianField) -> Vec<Vec3> {
        let mut b = vec![Vec3::zeros(); self.num_vertices()];
        for (fi, f) in self.op.faces().iter().enumerate() {
            let area = self.op.areas()[fi];
            let g = self.op.hat_gradients(fi);
            let j = &field.matrices[fi];
            for k in 0..3 {
                b[f[k]] += area * (j * g[k]);
            }
        }
        b
    }

    /// Area-weighted Poisson objective of `positions` against `field`.
    pub fn objective(&self, field: &JacobianField, positions: &[Vec3]) -> f64 {
        (0..self.num_faces())
            .map(|fi| {
                let grad = self.op.tangent_jacobian(fi, positions);
                let normal = self.op.rest_normals()[fi];
                // the rest normal column is unreachable by any deformation
                let target = field.matrices[fi] * (Matrix3::identity() - normal * normal.transpose());
                self.op.areas()[fi] * (grad - target).norm_squared()
            })
            .sum()
    }
}

pub fn solve_deformation(system: &PoissonSystem, field: &JacobianField) -> Result<DeformationState, SolverError> {
    if field.len() != system.num_faces() {
        return Err(SolverError::Dimension {
            expected: system.num_faces(),
            actual: field.len(),
        });
    }
    let n = system.num_vertices();
    let b = system.rhs(field);
    let mut rhs = DMatrix::zeros(n - 1, 3);
    for (s, &v) in system.vertex_of_slot.iter().enumerate() {
        for c in 0..3 {
            rhs[(s, c)] = b[v][c];
        }
    }
    // move the pinned column to the right-hand side
    let pin = system.pinned;
    let col = system.laplacian.col(pin);
    for (&row, &val) in col.row_indices().iter().zip(col.values()) {
        if row != pin {
            for c in 0..3 {
                rhs[(system.slot[row], c)] -= val * system.pinned_position[c];
            }
        }
    }
    let x = system.solve_reduced(&rhs);
    let mut vertices = vec![system.pinned_position; n];
    for (s, &v) in system.vertex_of_slot.iter().enumerate() {
        vertices[v] = Vec3::new(x[(s, 0)], x[(s, 1)], x[(s, 2)]);
    }
    Ok(DeformationState {
        vertices,
        field: field.clone(),
    })
}

/// Pulls a gradient on the solved vertices back to the Jacobian field with
/// one adjoint solve. The pinned vertex does not depend on the field, so its
/// incoming gradient is dropped.
pub fn backprop_to_jacobians(system: &PoissonSystem, grad_vertices: &[Vec3]) -> Result<Vec<Matrix3<f64>>, SolverError> {
    let n = system.num_vertices();
    if grad_vertices.len() != n {
        return Err(SolverError::Dimension {
            expected: n,
            actual: grad_vertices.len(),
        });
    }
    let mut rhs = DMatrix::zeros(n - 1, 3);
    for (s, &v) in system.vertex_of_slot.iter().enumerate() {
        for c in 0..3 {
            rhs[(s, c)] = grad_vertices[v][c];
        }
    }
    let y = system.solve_reduced(&rhs);
    let mut adjoint = vec![Vec3::zeros(); n];
    for (s, &v) in system.vertex_of_slot.iter().enumerate() {
        adjoint[v] = Vec3::new(y[(s, 0)], y[(s, 1)], y[(s, 2)]);
    }
    Ok(system
        .op
        .faces()
        .iter()
        .enumerate()
        .map(|(fi, f)| {
            let area = system.op.areas()[fi];
            let g = system.op.hat_gradients(fi);
            (0..3).fold(Matrix3::zeros(), |acc, k| acc + area * adjoint[f[k]] * g[k].transpose())
        })
        .collect())
}

/// `sum_i ||J_i - I||_F` and its (sub)gradient; zero gradient at `J_i = I`.
pub fn field_regularizer(field: &JacobianField) -> (f64, Vec<Matrix3<f64>>) {
    let mut loss = 0.0;
    let grads = field
        .matrices
        .iter()
        .map(|j| {
            let d = j - Matrix3::identity();
            let norm = d.norm();
            loss += norm;
            if norm > 0.0 {
                d / norm
            } else {
                Matrix3::zeros()
            }
        })
        .collect();
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::mesh::build_gradient_operator;
    use nalgebra::{DVector, Rotation3};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn system_for(mesh: &TriMesh, pin: usize) -> PoissonSystem {
        let op = Arc::new(build_gradient_operator(mesh).unwrap());
        assemble_system(mesh, op, pin).unwrap()
    }

    fn max_diff_after_alignment(a: &[Vec3], b: &[Vec3]) -> f64 {
        let shift = a.iter().zip(b).map(|(p, q)| p - q).sum::<Vec3>() / a.len() as f64;
        a.iter().zip(b).map(|(p, q)| (p - q - shift).amax()).fold(0.0, f64::max)
    }

    fn random_field(m: usize, scale: f64, seed: u64) -> JacobianField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        JacobianField {
            matrices: (0..m)
                .map(|_| Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-scale..scale)))
                .collect(),
        }
    }

    #[test]
    fn identity_field_reproduces_rest_shape() {
        let mesh = fixtures::icosphere(2, 1.0);
        let sys = system_for(&mesh, 3);
        let state = solve_deformation(&sys, &init_identity_field(&mesh)).unwrap();
        let diff = state.vertices.iter().zip(mesh.vertices()).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "{diff}");
        assert_eq!(field_regularizer(&state.field).0, 0.0);
    }

    #[test]
    fn constant_fields_are_recovered() {
        let mesh = fixtures::icosphere(2, 1.0);
        let sys = system_for(&mesh, 0);
        let r = Rotation3::from_euler_angles(0.7, 0.2, -0.4).into_inner();
        for c in [r, 2.0 * Matrix3::identity()] {
            let field = JacobianField {
                matrices: vec![c; mesh.num_faces()],
            };
            let state = solve_deformation(&sys, &field).unwrap();
            let expected: Vec<Vec3> = mesh.vertices().iter().map(|v| c * v).collect();
            assert!(max_diff_after_alignment(&state.vertices, &expected) < 1e-8);
        }
    }

    #[test]
    fn factorization_residual_is_small() {
        let mesh = fixtures::icosphere(3, 1.0);
        let sys = system_for(&mesh, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = DMatrix::from_fn(mesh.num_vertices() - 1, 3, |_, _| rng.random_range(-1.0..1.0));
        let x = sys.solve_reduced(&b);
        for c in 0..3 {
            let xc = DVector::from_iterator(x.nrows(), x.column(c).iter().copied());
            let bc = DVector::from_iterator(b.nrows(), b.column(c).iter().copied());
            let r = sys.reduced_matrix() * &xc - &bc;
            assert!(r.norm() / bc.norm() <= 1e-10);
        }
    }

    #[test]
    fn laplacian_is_symmetric() {
        let mesh = fixtures::torus(1.0, 0.3, 12, 6);
        let sys = system_for(&mesh, 0);
        let dense = DMatrix::from(sys.laplacian());
        assert!((&dense - dense.transpose()).amax() <= 1e-12);
    }

    #[test]
    fn disconnected_mesh_is_rejected() {
        let mut verts = fixtures::icosahedron().vertices().to_vec();
        let mut faces = fixtures::icosahedron().faces().to_vec();
        verts.extend(fixtures::icosahedron().vertices().iter().take(3).map(|v| v + Vec3::new(4.0, 0.0, 0.0)));
        faces.push([12, 13, 14]);
        let mesh = TriMesh::new(verts, faces).unwrap();
        let op = Arc::new(build_gradient_operator(&mesh).unwrap());
        match assemble_system(&mesh, op, 0).unwrap_err() {
            SolverError::Disconnected { smallest_size, smallest_vertices, .. } => {
                assert_eq!(smallest_size, 3);
                assert_eq!(smallest_vertices, vec![12, 13, 14]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn pin_out_of_range() {
        let mesh = fixtures::icosahedron();
        let op = Arc::new(build_gradient_operator(&mesh).unwrap());
        assert!(matches!(assemble_system(&mesh, op, 12), Err(SolverError::PinOutOfRange { .. })));
    }

    #[test]
    fn solution_beats_perturbations() {
        let mesh = fixtures::icosphere(1, 1.0);
        let sys = system_for(&mesh, 0);
        let field = random_field(mesh.num_faces(), 0.4, 2);
        let state = solve_deformation(&sys, &field).unwrap();
        let best = sys.objective(&field, &state.vertices);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let perturbed: Vec<Vec3> = state
                .vertices
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    if i == sys.pinned() {
                        *v
                    } else {
                        v + Vec3::from_fn(|_, _| rng.random_range(-1e-3..1e-3))
                    }
                })
                .collect();
            assert!(sys.objective(&field, &perturbed) >= best);
        }
    }

    #[test]
    fn resolving_measured_jacobians_is_idempotent() {
        let mesh = fixtures::torus(1.0, 0.35, 12, 8);
        let sys = system_for(&mesh, 4);
        let first = solve_deformation(&sys, &random_field(mesh.num_faces(), 0.3, 8)).unwrap();
        let measured = JacobianField {
            matrices: sys.operator().face_jacobians(&first.vertices),
        };
        let second = solve_deformation(&sys, &measured).unwrap();
        let diff = first.vertices.iter().zip(&second.vertices).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn pin_changes_only_translation() {
        let mesh = fixtures::icosphere(1, 1.0);
        let field = random_field(mesh.num_faces(), 0.3, 4);
        let a = solve_deformation(&system_for(&mesh, 0), &field).unwrap();
        let b = solve_deformation(&system_for(&mesh, 29), &field).unwrap();
        assert!(max_diff_after_alignment(&a.vertices, &b.vertices) < 1e-8);
    }

    #[test]
    fn zero_gradient_backprops_to_zero() {
        let mesh = fixtures::icosahedron();
        let sys = system_for(&mesh, 0);
        let g = backprop_to_jacobians(&sys, &vec![Vec3::zeros(); 12]).unwrap();
        assert!(g.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mesh = fixtures::icosahedron();
        let sys = system_for(&mesh, 0);
        let field = random_field(mesh.num_faces(), 0.2, 6);
        let loss = |f: &JacobianField| -> f64 {
            solve_deformation(&sys, f).unwrap().vertices.iter().map(|v| v.norm_squared()).sum()
        };
        let state = solve_deformation(&sys, &field).unwrap();
        let dv: Vec<Vec3> = state.vertices.iter().map(|v| 2.0 * v).collect();
        let g = backprop_to_jacobians(&sys, &dv).unwrap();
        let h = 1e-5;
        let scale = g.iter().map(|m| m.amax()).fold(0.0, f64::max);
        for fi in 0..field.len() {
            for e in 0..9 {
                let mut plus = field.clone();
                plus.matrices[fi][e] += h;
                let mut minus = field.clone();
                minus.matrices[fi][e] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (fd - g[fi][e]).abs() / fd.abs().max(1e-3 * scale);
                assert!(err < 1e-4, "face {fi} entry {e}: {fd} vs {}", g[fi][e]);
            }
        }
    }

    #[test]
    fn adjoint_is_linear() {
        let mesh = fixtures::icosahedron();
        let sys = system_for(&mesh, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a: Vec<Vec3> = (0..12).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<Vec3> = (0..12).map(|_| Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let sum: Vec<Vec3> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (ga, gb, gs) = (
            backprop_to_jacobians(&sys, &a).unwrap(),
            backprop_to_jacobians(&sys, &b).unwrap(),
            backprop_to_jacobians(&sys, &sum).unwrap(),
        );
        for i in 0..ga.len() {
            assert!((ga[i] + gb[i] - gs[i]).amax() < 1e-12);
        }
    }

    #[test]
    fn regularizer_values_and_gradient() {
        let mut field = JacobianField::identity(5);
        let (l0, g0) = field_regularizer(&field);
        assert_eq!(l0, 0.0);
        assert!(g0.iter().all(|m| m.amax() == 0.0));
        field.matrices[2] = 2.0 * Matrix3::identity();
        assert!((field_regularizer(&field).0 - 3f64.sqrt()).abs() < 1e-15);

        let field = random_field(6, 0.5, 21);
        let (_, g) = field_regularizer(&field);
        let h = 1e-6;
        for fi in 0..6 {
            for e in 0..9 {
                let mut p = field.clone();
                p.matrices[fi][e] += h;
                let mut m = field.clone();
                m.matrices[fi][e] -= h;
                let fd = (field_regularizer(&p).0 - field_regularizer(&m).0) / (2.0 * h);
                assert!((fd - g[fi][e]).abs() / fd.abs().max(1e-3) < 1e-4);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mesh = fixtures::icosahedron();
        let sys = system_for(&mesh, 0);
        assert!(solve_deformation(&sys, &JacobianField::identity(3)).is_err());
    }
}
