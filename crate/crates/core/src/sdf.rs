//! Closest-point and signed-distance queries against a body mesh.
//!
//! Closest faces come from an axis-aligned bounding-volume hierarchy. The
//! sign comes from the generalized winding number, which tolerates small
//! holes; a ray-parity test is provided as an independent inside/outside
//! route.

use std::f64::consts::PI;

use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{MeshError, TriMesh, Vec3};

/// Two candidate faces whose squared distances differ by less than this
/// (relative) are considered tied; the lower face index wins.
const TIE_TOLERANCE: f64 = 1e-12;
/// Winding numbers within this band of 0.5 cannot be classified.
const WINDING_AMBIGUITY: f64 = 0.25;
/// Points this close to the surface get distance ~0 regardless of sign.
const SURFACE_EPSILON: f64 = 1e-9;
const LEAF_SIZE: usize = 4;

#[derive(Debug, Error)]
pub enum SdfError {
    #[error("body mesh is empty")]
    EmptyBody,
    #[error("contact index {index} out of range for body with {count} vertices")]
    ContactIndex { index: usize, count: usize },
    #[error("sign undecidable at query point {index}: winding number {winding:.4}")]
    SignUndecidable { index: usize, winding: f64 },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    min: Vec3,
    max: Vec3,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            min: Vec3::repeat(f64::INFINITY),
            max: Vec3::repeat(f64::NEG_INFINITY),
        }
    }

    fn grow(&mut self, p: &Vec3) {
        self.min = self.min.inf(p);
        self.max = self.max.sup(p);
    }

    fn distance_sq(&self, p: &Vec3) -> f64 {
        let d = (self.min - p).sup(&(p - self.max)).sup(&Vec3::zeros());
        d.norm_squared()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { bounds: Aabb, start: usize, end: usize },
    Inner { bounds: Aabb, left: usize, right: usize },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Median-split AABB tree over the faces of a mesh.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    order: Vec<usize>,
}

/// Closest surface point to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestHit {
    pub face: usize,
    pub point: Vec3,
    pub distance_sq: f64,
}

fn better(candidate: &ClosestHit, best: &ClosestHit) -> bool {
    let tol = TIE_TOLERANCE * (1.0 + best.distance_sq);
    if candidate.distance_sq < best.distance_sq - tol {
        true
    } else if candidate.distance_sq <= best.distance_sq + tol {
        candidate.face < best.face
    } else {
        false
    }
}

impl Bvh {
    pub fn build(mesh: &TriMesh) -> Self {
        let centroids: Vec<Vec3> = (0..mesh.num_faces())
            .map(|f| {
                let [a, b, c] = mesh.corners(f);
                (a + b + c) / 3.0
            })
            .collect();
        let mut bvh = Bvh {
            nodes: Vec::new(),
            order: (0..mesh.num_faces()).collect(),
        };
        if mesh.num_faces() > 0 {
            bvh.build_node(mesh, &centroids, 0, mesh.num_faces());
        }
        bvh
    }

    fn build_node(&mut self, mesh: &TriMesh, centroids: &[Vec3], start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        let mut cbounds = Aabb::empty();
        for &f in &self.order[start..end] {
            for p in mesh.corners(f) {
                bounds.grow(&p);
            }
            cbounds.grow(&centroids[f]);
        }
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { bounds, start, end });
            return id;
        }
        self.nodes.push(Node::Leaf { bounds, start, end });
        let axis = (cbounds.max - cbounds.min).imax();
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            centroids[a][axis]
                .total_cmp(&centroids[b][axis])
                .then(a.cmp(&b))
        });
        let left = self.build_node(mesh, centroids, start, mid);
        let right = self.build_node(mesh, centroids, mid, end);
        self.nodes[id] = Node::Inner { bounds, left, right };
        id
    }

    /// Closest face to `p`, ties broken by lowest face index.
    pub fn closest(&self, mesh: &TriMesh, p: &Vec3) -> Option<ClosestHit> {
        let mut best: Option<ClosestHit> = None;
        let mut stack = vec![0usize];
        if self.nodes.is_empty() {
            return None;
        }
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if let Some(b) = &best {
                let tol = TIE_TOLERANCE * (1.0 + b.distance_sq);
                if node.bounds().distance_sq(p) > b.distance_sq + tol {
                    continue;
                }
            }
            match *node {
                Node::Leaf { start, end, .. } => {
                    for &f in &self.order[start..end] {
                        let [a, b, c] = mesh.corners(f);
                        let q = closest_point_on_triangle(p, &a, &b, &c);
                        let hit = ClosestHit {
                            face: f,
                            point: q,
                            distance_sq: (p - q).norm_squared(),
                        };
                        if best.as_ref().is_none_or(|b| better(&hit, b)) {
                            best = Some(hit);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    let dl = self.nodes[left].bounds().distance_sq(p);
                    let dr = self.nodes[right].bounds().distance_sq(p);
                    if dl <= dr {
                        stack.push(right);
                        stack.push(left);
                    } else {
                        stack.push(left);
                        stack.push(right);
                    }
                }
            }
        }
        best
    }
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
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
        return a + ab * (d1 / (d1 - d3));
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return a + ac * (d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        return b + (c - b) * ((d4 - d3) / ((d4 - d3) + (d5 - d6)));
    }
    let denom = 1.0 / (va + vb + vc);
    a + ab * (vb * denom) + ac * (vc * denom)
}

/// Solid angle of triangle `abc` seen from `p`, signed by orientation.
fn solid_angle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let (x, y, z) = (a - p, b - p, c - p);
    let (lx, ly, lz) = (x.norm(), y.norm(), z.norm());
    let num = x.dot(&y.cross(&z));
    let den = lx * ly * lz + x.dot(&y) * lz + y.dot(&z) * lx + z.dot(&x) * ly;
    2.0 * num.atan2(den)
}

/// Body mesh, designated contact points and acceleration structure.
#[derive(Debug, Clone)]
pub struct BodySpec {
    body: TriMesh,
    contacts: Vec<Vec3>,
    bvh: Bvh,
}

/// Signed distance at one query point. `gradient` is the derivative of
/// `distance` with respect to the query position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistance {
    pub distance: f64,
    pub gradient: Vec3,
    pub closest: ClosestHit,
    pub winding: f64,
}

pub fn build_body(body: TriMesh, contacts: Vec<Vec3>) -> Result<BodySpec, SdfError> {
    if body.is_empty() {
        return Err(SdfError::EmptyBody);
    }
    let bvh = Bvh::build(&body);
    Ok(BodySpec { body, contacts, bvh })
}

/// Resolves body-vertex indices to contact positions.
pub fn contacts_from_indices(body: &TriMesh, indices: &[usize]) -> Result<Vec<Vec3>, SdfError> {
    indices
        .iter()
        .map(|&i| {
            body.vertices().get(i).copied().ok_or(SdfError::ContactIndex {
                index: i,
                count: body.num_vertices(),
            })
        })
        .collect()
}

impl BodySpec {
    pub fn body(&self) -> &TriMesh {
        &self.body
    }

    pub fn contacts(&self) -> &[Vec3] {
        &self.contacts
    }

    pub fn closest(&self, p: &Vec3) -> ClosestHit {
        self.bvh.closest(&self.body, p).expect("body is non-empty")
    }

    /// Generalized winding number: ~1 inside a closed outward mesh, ~0 outside.
    pub fn winding_number(&self, p: &Vec3) -> f64 {
        (0..self.body.num_faces())
            .map(|f| {
                let [a, b, c] = self.body.corners(f);
                solid_angle(p, &a, &b, &c)
            })
            .sum::<f64>()
            / (4.0 * PI)
    }

    /// Inside test by counting crossings of a fixed ray.
    pub fn ray_parity_inside(&self, p: &Vec3) -> bool {
        let dir = Vec3::new(0.5773, 0.5774, 0.5775).normalize() + Vec3::new(1e-3, -2e-3, 7e-4);
        let mut crossings = 0;
        for f in 0..self.body.num_faces() {
            let [a, b, c] = self.body.corners(f);
            if ray_hits_triangle(p, &dir, &a, &b, &c) {
                crossings += 1;
            }
        }
        crossings % 2 == 1
    }

    pub fn query(&self, index: usize, p: &Vec3) -> Result<SignedDistance, SdfError> {
        let closest = self.closest(p);
        let unsigned = closest.distance_sq.sqrt();
        let winding = self.winding_number(p);
        let near_surface = unsigned <= SURFACE_EPSILON;
        if !near_surface && (winding - 0.5).abs() < WINDING_AMBIGUITY {
            return Err(SdfError::SignUndecidable { index, winding });
        }
        let sign = if winding > 0.5 { -1.0 } else { 1.0 };
        let gradient = if unsigned > 0.0 && !near_surface {
            sign * (p - closest.point) / unsigned
        } else {
            self.body.face_normal(closest.face)
        };
        Ok(SignedDistance {
            distance: sign * unsigned,
            gradient,
            closest,
            winding,
        })
    }
}

fn ray_hits_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> bool {
    let e1 = b - a;
    let e2 = c - a;
    let h = dir.cross(&e2);
    let det = e1.dot(&h);
    if det.abs() < 1e-14 {
        return false;
    }
    let inv = 1.0 / det;
    let s = origin - a;
    let u = inv * s.dot(&h);
    if !(0.0..=1.0).contains(&u) {
        return false;
    }
    let q = s.cross(&e1);
    let v = inv * dir.dot(&q);
    if v < 0.0 || u + v > 1.0 {
        return false;
    }
    inv * e2.dot(&q) > 0.0
}

/// Signed distance of every point; negative inside the body.
pub fn signed_distance(spec: &BodySpec, points: &[Vec3]) -> Vec<Result<SignedDistance, SdfError>> {
    points
        .par_iter()
        .enumerate()
        .map(|(i, p)| spec.query(i, p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_closest(mesh: &TriMesh, p: &Vec3) -> ClosestHit {
        let mut best: Option<ClosestHit> = None;
        for f in 0..mesh.num_faces() {
            let [a, b, c] = mesh.corners(f);
            let q = closest_point_on_triangle(p, &a, &b, &c);
            let hit = ClosestHit {
                face: f,
                point: q,
                distance_sq: (p - q).norm_squared(),
            };
            if best.as_ref().is_none_or(|b| better(&hit, b)) {
                best = Some(hit);
            }
        }
        best.unwrap()
    }

    fn random_points(n: usize, scale: f64, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect()
    }

    #[test]
    fn contact_count_is_kept() {
        let body = fixtures::icosahedron();
        let contacts = body.vertices().to_vec();
        let spec = build_body(body, contacts).unwrap();
        assert_eq!(spec.contacts().len(), 12);
        let empty = build_body(fixtures::icosahedron(), vec![]).unwrap();
        assert!(empty.contacts().is_empty());
    }

    #[test]
    fn empty_body_is_rejected() {
        let err = build_body(TriMesh::new(vec![], vec![]).unwrap(), vec![]).unwrap_err();
        assert!(matches!(err, SdfError::EmptyBody));
    }

    #[test]
    fn bvh_matches_brute_force() {
        let spec = build_body(fixtures::icosphere(3, 1.0), vec![]).unwrap();
        for p in random_points(100, 2.0, 5) {
            let fast = spec.closest(&p);
            let slow = brute_closest(spec.body(), &p);
            assert_eq!(fast.face, slow.face);
            assert!((fast.distance_sq.sqrt() - slow.distance_sq.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_distances() {
        let spec = build_body(fixtures::icosphere(5, 1.0), vec![]).unwrap();
        let out = spec.query(0, &Vec3::new(2.0, 0.0, 0.0)).unwrap();
        assert!((out.distance - 1.0).abs() < 1e-3);
        assert!((out.gradient - Vec3::x()).norm() < 1e-3);
        let inside = spec.query(0, &Vec3::zeros()).unwrap();
        assert!((inside.distance + 1.0).abs() < 1e-3);
        let v = spec.body().vertices()[17];
        let on = spec.query(0, &v).unwrap();
        assert!(on.distance.abs() < 1e-9);
    }

    #[test]
    fn winding_agrees_with_ray_parity() {
        let spec = build_body(fixtures::torus(1.0, 0.4, 24, 12), vec![]).unwrap();
        let points = random_points(2000, 1.6, 9);
        let mut disagree = 0;
        for p in &points {
            let by_winding = spec.winding_number(p) > 0.5;
            if by_winding != spec.ray_parity_inside(p) && spec.closest(p).distance_sq.sqrt() > 1e-9 {
                disagree += 1;
            }
        }
        assert!(disagree as f64 <= 0.001 * points.len() as f64, "{disagree}");
    }

    #[test]
    fn open_mesh_reports_undecidable_sign() {
        let quad = TriMesh::new(
            vec![
                Vec3::new(-1.0, -1.0, 0.0),
                Vec3::new(1.0, -1.0, 0.0),
                Vec3::new(1.0, 1.0, 0.0),
                Vec3::new(-1.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        let spec = build_body(quad, vec![]).unwrap();
        let out = signed_distance(&spec, &[Vec3::new(0.0, 0.0, -0.01), Vec3::new(0.0, 0.0, 50.0)]);
        assert!(matches!(out[0], Err(SdfError::SignUndecidable { index: 0, .. })));
        assert!(out[1].as_ref().unwrap().distance > 49.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let spec = build_body(fixtures::cylinder(0.6, 1.0, 24, 4), vec![]).unwrap();
        let h = 1e-5;
        for p in [Vec3::new(0.9, 0.1, 0.2), Vec3::new(0.2, 0.1, 0.3), Vec3::new(0.1, -0.2, 1.4)] {
            let g = spec.query(0, &p).unwrap().gradient;
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                let fd = (spec.query(0, &(p + e)).unwrap().distance - spec.query(0, &(p - e)).unwrap().distance) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-3, "{p:?} axis {a}: {fd} vs {}", g[a]);
            }
        }
    }

    #[test]
    fn contact_indices_resolve() {
        let body = fixtures::icosahedron();
        let pts = contacts_from_indices(&body, &[0, 3]).unwrap();
        assert_eq!(pts[1], body.vertices()[3]);
        assert!(contacts_from_indices(&body, &[12]).is_err());
    }
}
