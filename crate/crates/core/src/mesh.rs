//! Indexed triangle meshes, OBJ I/O, the per-face gradient operator and
//! area-weighted surface sampling.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

/// Faces with twice-area (cross product norm) at or below this are degenerate.
pub const AREA_EPSILON: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("face {face} references vertex {index}, but the mesh has {count} vertices")]
    IndexOutOfRange {
        face: usize,
        index: usize,
        count: usize,
    },
    #[error("degenerate faces: {0:?}")]
    DegenerateFaces(Vec<usize>),
    #[error("mesh has no faces")]
    Empty,
    #[error("expected {expected} vertex positions, got {actual}")]
    VertexCount { expected: usize, actual: usize },
}

/// Indexed triangle mesh.
///
/// Construction through [`TriMesh::new`] validates indices and rejects
/// degenerate faces. Deformed copies made with [`TriMesh::with_positions`]
/// keep the topology and skip the area check.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if let Some(&index) = f.iter().find(|&&i| i >= n) {
                return Err(MeshError::IndexOutOfRange {
                    face: fi,
                    index,
                    count: n,
                });
            }
        }
        let mesh = TriMesh { vertices, faces };
        let degenerate: Vec<usize> = (0..mesh.faces.len())
            .filter(|&fi| {
                let [a, b, c] = mesh.faces[fi];
                a == b || b == c || a == c || mesh.double_area(fi) <= AREA_EPSILON
            })
            .collect();
        if !degenerate.is_empty() {
            return Err(MeshError::DegenerateFaces(degenerate));
        }
        Ok(mesh)
    }

    /// Same topology, new positions.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self, MeshError> {
        if positions.len() != self.vertices.len() {
            return Err(MeshError::VertexCount {
                expected: self.vertices.len(),
                actual: positions.len(),
            });
        }
        Ok(TriMesh {
            vertices: positions,
            faces: self.faces.clone(),
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    fn double_area(&self, face: usize) -> f64 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a)).norm()
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * self.double_area(face)
    }

    /// Unit normal following the counter-clockwise winding.
    pub fn face_normal(&self, face: usize) -> Vec3 {
        let [a, b, c] = self.corners(face);
        (b - a).cross(&(c - a)).normalize()
    }

    pub fn total_area(&self) -> f64 {
        (0..self.num_faces()).map(|f| self.face_area(f)).sum()
    }

    /// Area-weighted centroid of the surface.
    pub fn area_centroid(&self) -> Vec3 {
        let mut acc = Vec3::zeros();
        let mut total = 0.0;
        for f in 0..self.num_faces() {
            let [a, b, c] = self.corners(f);
            let area = self.face_area(f);
            acc += area * (a + b + c) / 3.0;
            total += area;
        }
        acc / total
    }

    pub fn bounding_box(&self) -> Option<(Vec3, Vec3)> {
        let first = *self.vertices.first()?;
        Some(self.vertices.iter().fold((first, first), |(lo, hi), v| {
            (lo.inf(v), hi.sup(v))
        }))
    }

    /// Vertex sets of the face-connected components, largest first.
    /// Vertices not referenced by any face form singleton components.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.num_vertices();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for f in &self.faces {
            for k in 1..3 {
                let ra = find(&mut parent, f[0]);
                let rb = find(&mut parent, f[k]);
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for v in 0..n {
            let r = find(&mut parent, v);
            groups.entry(r).or_default().push(v);
        }
        let mut comps: Vec<Vec<usize>> = groups.into_values().collect();
        comps.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        comps
    }
}

/// Parses the OBJ subset used throughout: `v` and `f` records, 1-based or
/// negative (relative) indices, polygons fan-triangulated.
pub fn parse_obj(text: &str) -> Result<TriMesh, MeshError> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let coords: Vec<f64> = tokens
                    .take(3)
                    .map(|t| {
                        t.parse::<f64>().map_err(|_| MeshError::Parse {
                            line,
                            message: format!("invalid coordinate `{t}`"),
                        })
                    })
                    .collect::<Result<_, _>>()?;
                if coords.len() != 3 {
                    return Err(MeshError::Parse {
                        line,
                        message: "vertex record needs three coordinates".into(),
                    });
                }
                if coords.iter().any(|c| !c.is_finite()) {
                    return Err(MeshError::Parse {
                        line,
                        message: "non-finite coordinate".into(),
                    });
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tokens
                    .map(|t| resolve_index(t, vertices.len(), line))
                    .collect::<Result<_, _>>()?;
                if idx.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        message: "face record needs at least three indices".into(),
                    });
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, faces)
}

fn resolve_index(token: &str, count: usize, line: usize) -> Result<usize, MeshError> {
    let head = token.split('/').next().unwrap_or("");
    let raw: i64 = head.parse().map_err(|_| MeshError::Parse {
        line,
        message: format!("invalid face index `{token}`"),
    })?;
    let resolved = if raw > 0 {
        raw - 1
    } else if raw < 0 {
        count as i64 + raw
    } else {
        return Err(MeshError::Parse {
            line,
            message: "face index 0 is invalid (OBJ indices are 1-based)".into(),
        });
    };
    if resolved < 0 || resolved as usize >= count {
        return Err(MeshError::Parse {
            line,
            message: format!("face index {raw} out of range ({count} vertices so far)"),
        });
    }
    Ok(resolved as usize)
}

/// Reads only the `v` records of an OBJ file (used for contact point sets).
pub fn parse_obj_points(text: &str) -> Result<Vec<Vec3>, MeshError> {
    let mut points = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut tokens = content.split_whitespace();
        if tokens.next() != Some("v") {
            continue;
        }
        let coords: Result<Vec<f64>, _> = tokens.take(3).map(str::parse::<f64>).collect();
        match coords {
            Ok(c) if c.len() == 3 => points.push(Vec3::new(c[0], c[1], c[2])),
            _ => {
                return Err(MeshError::Parse {
                    line: lineno + 1,
                    message: "invalid vertex record".into(),
                })
            }
        }
    }
    Ok(points)
}

fn read_text(path: &Path) -> Result<String, MeshError> {
    fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<TriMesh, MeshError> {
    parse_obj(&read_text(path.as_ref())?)
}

pub fn load_points(path: impl AsRef<Path>) -> Result<Vec<Vec3>, MeshError> {
    parse_obj_points(&read_text(path.as_ref())?)
}

/// OBJ text for a mesh. Coordinates use the shortest representation that
/// parses back to the same `f64`, so output is exact and deterministic.
pub fn to_obj_string(mesh: &TriMesh) -> String {
    let mut out = String::with_capacity(32 * (mesh.num_vertices() + mesh.num_faces()));
    for v in mesh.vertices() {
        let _ = writeln!(out, "v {} {} {}", v.x, v.y, v.z);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn write_mesh(mesh: &TriMesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    fs::write(path, to_obj_string(mesh)).map_err(|source| MeshError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Per-face intrinsic gradient of piecewise-linear functions.
///
/// For face `i` with corners `k`, `grads[i][k]` is the gradient of the hat
/// function of that corner. Stacking the three gradient components of every
/// face gives the global `3m x n` matrix `G`.
#[derive(Debug, Clone)]
pub struct FaceGradientOperator {
    faces: Vec<[usize; 3]>,
    num_vertices: usize,
    areas: Vec<f64>,
    normals: Vec<Vec3>,
    grads: Vec<[Vec3; 3]>,
}

pub fn build_gradient_operator(mesh: &TriMesh) -> Result<FaceGradientOperator, MeshError> {
    let mut areas = Vec::with_capacity(mesh.num_faces());
    let mut normals = Vec::with_capacity(mesh.num_faces());
    let mut grads = Vec::with_capacity(mesh.num_faces());
    let mut degenerate = Vec::new();
    for f in 0..mesh.num_faces() {
        let [a, b, c] = mesh.corners(f);
        let cross = (b - a).cross(&(c - a));
        let double_area = cross.norm();
        if double_area <= AREA_EPSILON {
            degenerate.push(f);
            continue;
        }
        let n = cross / double_area;
        // grad(phi_k) = n x (opposite edge, counter-clockwise) / (2A)
        grads.push([
            n.cross(&(c - b)) / double_area,
            n.cross(&(a - c)) / double_area,
            n.cross(&(b - a)) / double_area,
        ]);
        areas.push(0.5 * double_area);
        normals.push(n);
    }
    if !degenerate.is_empty() {
        return Err(MeshError::DegenerateFaces(degenerate));
    }
    Ok(FaceGradientOperator {
        faces: mesh.faces().to_vec(),
        num_vertices: mesh.num_vertices(),
        areas,
        normals,
        grads,
    })
}

impl FaceGradientOperator {
    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        self.num_vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn areas(&self) -> &[f64] {
        &self.areas
    }

    pub fn rest_normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn hat_gradients(&self, face: usize) -> &[Vec3; 3] {
        &self.grads[face]
    }

    /// Tangential Jacobian of a deformation on one face: entry `(c, a)` is
    /// the derivative of output coordinate `c` along rest direction `a`.
    /// Annihilates the rest normal.
    pub fn tangent_jacobian(&self, face: usize, positions: &[Vec3]) -> Matrix3<f64> {
        let f = self.faces[face];
        let g = &self.grads[face];
        (0..3).fold(Matrix3::zeros(), |acc, k| {
            acc + positions[f[k]] * g[k].transpose()
        })
    }

    /// Full 3x3 Jacobian per face. The tangential part comes from the
    /// gradient operator; the rest normal is mapped to the deformed unit
    /// normal scaled by the square root of the area ratio, so rest positions
    /// give `I`, a rotation `R` gives `R` and a uniform scale `s` gives `sI`.
    pub fn face_jacobians(&self, positions: &[Vec3]) -> Vec<Matrix3<f64>> {
        (0..self.num_faces())
            .map(|fi| {
                let f = self.faces[fi];
                let (a, b, c) = (positions[f[0]], positions[f[1]], positions[f[2]]);
                let cross = (b - a).cross(&(c - a));
                let double_area = cross.norm();
                let normal_image = if double_area > 0.0 {
                    cross / double_area * (0.5 * double_area / self.areas[fi]).sqrt()
                } else {
                    Vec3::zeros()
                };
                self.tangent_jacobian(fi, positions) + normal_image * self.normals[fi].transpose()
            })
            .collect()
    }

    /// Global sparse `G` (`3m x n`), row `3i + a` holding direction `a` of face `i`.
    pub fn matrix(&self) -> CscMatrix<f64> {
        let mut coo = CooMatrix::new(3 * self.num_faces(), self.num_vertices);
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                for a in 0..3 {
                    coo.push(3 * fi + a, f[k], self.grads[fi][k][a]);
                }
            }
        }
        CscMatrix::from(&coo)
    }
}

/// Points on a surface with the face and barycentric coordinates that
/// produced them, so they can be re-evaluated on deformed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSampleSet {
    pub points: Vec<Vec3>,
    pub faces: Vec<usize>,
    pub barycentric: Vec<[f64; 3]>,
    pub seed: u64,
}

impl SurfaceSampleSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same provenance evaluated on another set of vertex positions.
    pub fn reposition(&self, mesh: &TriMesh) -> SurfaceSampleSet {
        let points = self
            .faces
            .iter()
            .zip(&self.barycentric)
            .map(|(&f, b)| {
                let [p0, p1, p2] = mesh.corners(f);
                b[0] * p0 + b[1] * p1 + b[2] * p2
            })
            .collect();
        SurfaceSampleSet {
            points,
            faces: self.faces.clone(),
            barycentric: self.barycentric.clone(),
            seed: self.seed,
        }
    }

    /// Pulls per-point gradients back to the mesh vertices.
    pub fn scatter_to_vertices(&self, mesh: &TriMesh, point_grads: &[Vec3]) -> Vec<Vec3> {
        let mut out = vec![Vec3::zeros(); mesh.num_vertices()];
        for ((&f, b), g) in self.faces.iter().zip(&self.barycentric).zip(point_grads) {
            let face = mesh.faces()[f];
            for k in 0..3 {
                out[face[k]] += b[k] * g;
            }
        }
        out
    }
}

/// Area-weighted uniform samples, deterministic in `seed`.
pub fn sample_surface(mesh: &TriMesh, count: usize, seed: u64) -> Result<SurfaceSampleSet, MeshError> {
    let mut cdf = Vec::with_capacity(mesh.num_faces());
    let mut total = 0.0;
    for f in 0..mesh.num_faces() {
        total += mesh.face_area(f);
        cdf.push(total);
    }
    if mesh.is_empty() || total <= 0.0 || count == 0 {
        return Err(MeshError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(count);
    let mut faces = Vec::with_capacity(count);
    let mut barycentric = Vec::with_capacity(count);
    for _ in 0..count {
        let target = rng.random::<f64>() * total;
        let f = cdf.partition_point(|&c| c <= target).min(cdf.len() - 1);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        let b = [1.0 - r1, r1 * (1.0 - r2), r1 * r2];
        let [p0, p1, p2] = mesh.corners(f);
        points.push(b[0] * p0 + b[1] * p1 + b[2] * p2);
        faces.push(f);
        barycentric.push(b);
    }
    Ok(SurfaceSampleSet {
        points,
        faces,
        barycentric,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use nalgebra::Rotation3;

    const TWO_TRIANGLES: &str = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3\nf 1 3 4\n";

    #[test]
    fn parses_counts() {
        let m = parse_obj(TWO_TRIANGLES).unwrap();
        assert_eq!((m.num_vertices(), m.num_faces()), (4, 2));
    }

    #[test]
    fn quad_is_fan_split() {
        let m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn zero_index_is_parse_error() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n").unwrap_err();
        assert!(matches!(err, MeshError::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn slashes_comments_and_negative_indices() {
        let m = parse_obj("# tri\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0 # c\nf -3/1/1 -2//1 -1\n").unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn degenerate_faces_are_listed() {
        let err = parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 4\nf 1 2 3\nf 1 1 4\n").unwrap_err();
        match err {
            MeshError::DegenerateFaces(f) => assert_eq!(f, vec![1, 2]),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn rest_positions_give_identity() {
        let mesh = fixtures::icosphere(2, 1.0);
        let op = build_gradient_operator(&mesh).unwrap();
        for j in op.face_jacobians(mesh.vertices()) {
            assert!((j - Matrix3::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn scaled_positions_give_scaled_identity() {
        let mesh = fixtures::torus(1.0, 0.3, 16, 8);
        let op = build_gradient_operator(&mesh).unwrap();
        let doubled: Vec<Vec3> = mesh.vertices().iter().map(|v| 2.0 * v).collect();
        for j in op.face_jacobians(&doubled) {
            assert!((j - Matrix3::<f64>::identity() * 2.0).norm() < 1e-10);
        }
    }

    #[test]
    fn rotated_positions_give_rotation() {
        let mesh = fixtures::icosphere(1, 1.0);
        let op = build_gradient_operator(&mesh).unwrap();
        let r = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
        let rotated: Vec<Vec3> = mesh.vertices().iter().map(|v| r * v).collect();
        for j in op.face_jacobians(&rotated) {
            assert!((j - r).norm() < 1e-10);
        }
    }

    #[test]
    fn constants_have_zero_gradient() {
        let mesh = fixtures::icosahedron();
        let op = build_gradient_operator(&mesh).unwrap();
        let g = op.matrix();
        let ones = nalgebra::DVector::from_element(mesh.num_vertices(), 1.0);
        let out = &g * &ones;
        assert!(out.amax() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_on_surface() {
        let mesh = fixtures::icosphere(1, 1.0);
        let a = sample_surface(&mesh, 64, 7).unwrap();
        let b = sample_surface(&mesh, 64, 7).unwrap();
        assert_eq!(a, b);
        let one = sample_surface(&mesh, 1, 3).unwrap();
        let [p0, p1, p2] = mesh.corners(one.faces[0]);
        let n = (p1 - p0).cross(&(p2 - p0));
        assert!((one.points[0] - p0).dot(&n).abs() < 1e-12);
        assert!(one.barycentric[0].iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn unit_square_sample_mean() {
        let mesh = parse_obj(TWO_TRIANGLES).unwrap();
        let s = sample_surface(&mesh, 10_000, 11).unwrap();
        let mean = s.points.iter().sum::<Vec3>() / s.len() as f64;
        assert!((mean - Vec3::new(0.5, 0.5, 0.0)).norm() < 0.02);
    }

    #[test]
    fn sampling_empty_mesh_fails() {
        let mesh = TriMesh::new(vec![], vec![]).unwrap();
        assert!(matches!(sample_surface(&mesh, 4, 0), Err(MeshError::Empty)));
    }

    #[test]
    fn write_into_missing_dir_fails() {
        let mesh = fixtures::icosahedron();
        let err = write_mesh(&mesh, "/nonexistent-dir/xyz/out.obj").unwrap_err();
        assert!(matches!(err, MeshError::Io { .. }));
    }

    #[test]
    fn obj_round_trip_and_stable_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = fixtures::torus(1.0, 0.25, 12, 6);
        let (a, b) = (dir.path().join("a.obj"), dir.path().join("b.obj"));
        write_mesh(&mesh, &a).unwrap();
        write_mesh(&mesh, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let back = load_mesh(&a).unwrap();
        assert_eq!(back.faces(), mesh.faces());
        let diff = back
            .vertices()
            .iter()
            .zip(mesh.vertices())
            .map(|(p, q)| (p - q).amax())
            .fold(0.0_f64, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn components_are_found() {
        let mut verts = fixtures::icosahedron().vertices().to_vec();
        let mut faces = fixtures::icosahedron().faces().to_vec();
        let offset = verts.len();
        verts.extend([Vec3::new(5.0, 0.0, 0.0), Vec3::new(6.0, 0.0, 0.0), Vec3::new(5.0, 1.0, 0.0)]);
        faces.push([offset, offset + 1, offset + 2]);
        let mesh = TriMesh::new(verts, faces).unwrap();
        let comps = mesh.connected_components();
        assert_eq!(comps.len(), 2);
        assert_eq!(comps[1], vec![12, 13, 14]);
    }
}
