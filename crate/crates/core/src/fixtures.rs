//! Procedural meshes used by tests, the gradient checker and the bundled
//! experiment recipes. All are closed, outward-oriented and connected.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::mesh::{TriMesh, Vec3};

/// Regular icosahedron on the unit sphere (12 vertices, 20 faces).
pub fn icosahedron() -> TriMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let vertices = raw
        .iter()
        .map(|p| Vec3::new(p[0], p[1], p[2]).normalize())
        .collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    TriMesh::new(vertices, faces).expect("icosahedron is valid")
}

/// Subdivided icosahedron projected to a sphere of `radius` at the origin.
/// Face count is `20 * 4^subdivisions`.
pub fn icosphere(subdivisions: u32, radius: f64) -> TriMesh {
    let base = icosahedron();
    let mut vertices = base.vertices().to_vec();
    let mut faces = base.faces().to_vec();
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vec3>| {
            *midpoints.entry((a.min(b), a.max(b))).or_insert_with(|| {
                vertices.push(((vertices[a] + vertices[b]) * 0.5).normalize());
                vertices.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = vertices.into_iter().map(|v| v * radius).collect();
    TriMesh::new(vertices, faces).expect("icosphere is valid")
}

/// Torus around the z axis: `major` ring radius, `minor` tube radius,
/// `ring_segments` around the axis and `tube_segments` around the tube.
/// Vertex `i * tube_segments + j` sits at ring angle `2*pi*i/ring_segments`
/// and tube angle `2*pi*j/tube_segments` (j = 0 is the outer equator).
pub fn torus(major: f64, minor: f64, ring_segments: usize, tube_segments: usize) -> TriMesh {
    torus_with(ring_segments, tube_segments, |_| (major, minor))
}

/// Torus whose ring and tube radii may vary with the ring angle.
pub fn torus_with(
    ring_segments: usize,
    tube_segments: usize,
    radii: impl Fn(f64) -> (f64, f64),
) -> TriMesh {
    let mut vertices = Vec::with_capacity(ring_segments * tube_segments);
    for i in 0..ring_segments {
        let theta = 2.0 * PI * i as f64 / ring_segments as f64;
        let (major, minor) = radii(theta);
        for j in 0..tube_segments {
            let phi = 2.0 * PI * j as f64 / tube_segments as f64;
            let rho = major + minor * phi.cos();
            vertices.push(Vec3::new(rho * theta.cos(), rho * theta.sin(), minor * phi.sin()));
        }
    }
    let idx = |i: usize, j: usize| (i % ring_segments) * tube_segments + (j % tube_segments);
    let mut faces = Vec::with_capacity(2 * ring_segments * tube_segments);
    for i in 0..ring_segments {
        for j in 0..tube_segments {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    TriMesh::new(vertices, faces).expect("torus is valid")
}

/// Surface of the cube `[-half, half]^3` with `divisions` quads per edge.
pub fn cube(half: f64, divisions: usize) -> TriMesh {
    let s = divisions as i64;
    let mut index: HashMap<[i64; 3], usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    // (origin, u, v) in lattice units, with u x v pointing outward
    let sides: [([i64; 3], [i64; 3], [i64; 3]); 6] = [
        ([s, 0, 0], [0, 1, 0], [0, 0, 1]),
        ([0, 0, 0], [0, 0, 1], [0, 1, 0]),
        ([0, s, 0], [0, 0, 1], [1, 0, 0]),
        ([0, 0, 0], [1, 0, 0], [0, 0, 1]),
        ([0, 0, s], [1, 0, 0], [0, 1, 0]),
        ([0, 0, 0], [0, 1, 0], [1, 0, 0]),
    ];
    let mut vid = |p: [i64; 3], vertices: &mut Vec<Vec3>| {
        *index.entry(p).or_insert_with(|| {
            let to = |c: i64| -half + 2.0 * half * c as f64 / s as f64;
            vertices.push(Vec3::new(to(p[0]), to(p[1]), to(p[2])));
            vertices.len() - 1
        })
    };
    for (o, u, v) in sides {
        let at = |i: i64, j: i64| [o[0] + i * u[0] + j * v[0], o[1] + i * u[1] + j * v[1], o[2] + i * u[2] + j * v[2]];
        for i in 0..s {
            for j in 0..s {
                let a = vid(at(i, j), &mut vertices);
                let b = vid(at(i + 1, j), &mut vertices);
                let c = vid(at(i + 1, j + 1), &mut vertices);
                let d = vid(at(i, j + 1), &mut vertices);
                faces.push([a, b, c]);
                faces.push([a, c, d]);
            }
        }
    }
    TriMesh::new(vertices, faces).expect("cube is valid")
}

/// Closed cylinder along z with `segments` around and `rings` bands between
/// `-half_height` and `half_height`. Side vertex `k * segments + i` sits at
/// angle `2*pi*i/segments` and height index `k`; the two cap centres come last.
pub fn cylinder(radius: f64, half_height: f64, segments: usize, rings: usize) -> TriMesh {
    let mut vertices = Vec::with_capacity(segments * (rings + 1) + 2);
    for k in 0..=rings {
        let z = -half_height + 2.0 * half_height * k as f64 / rings as f64;
        for i in 0..segments {
            let theta = 2.0 * PI * i as f64 / segments as f64;
            vertices.push(Vec3::new(radius * theta.cos(), radius * theta.sin(), z));
        }
    }
    let bottom = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, -half_height));
    let top = vertices.len();
    vertices.push(Vec3::new(0.0, 0.0, half_height));
    let idx = |k: usize, i: usize| k * segments + (i % segments);
    let mut faces = Vec::new();
    for k in 0..rings {
        for i in 0..segments {
            let (a, b, c, d) = (idx(k, i), idx(k, i + 1), idx(k + 1, i + 1), idx(k + 1, i));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for i in 0..segments {
        faces.push([bottom, idx(0, i + 1), idx(0, i)]);
        faces.push([top, idx(rings, i), idx(rings, i + 1)]);
    }
    TriMesh::new(vertices, faces).expect("cylinder is valid")
}

/// Indices of the cylinder's side vertices on height ring `k`.
pub fn cylinder_ring(segments: usize, k: usize) -> Vec<usize> {
    (0..segments).map(|i| k * segments + i).collect()
}

/// Sphere "head" body with a marked contact band: vertices whose height
/// lies within `band` of `ring_height` (both in units of the radius).
pub fn head_with_contact_ring(subdivisions: u32, radius: f64, ring_height: f64, band: f64) -> (TriMesh, Vec<usize>) {
    let mesh = icosphere(subdivisions, radius);
    let contacts = mesh
        .vertices()
        .iter()
        .enumerate()
        .filter(|(_, v)| (v.z / radius - ring_height).abs() <= band)
        .map(|(i, _)| i)
        .collect();
    (mesh, contacts)
}

pub fn translated(mesh: &TriMesh, offset: Vec3) -> TriMesh {
    let moved = mesh.vertices().iter().map(|v| v + offset).collect();
    mesh.with_positions(moved).expect("same vertex count")
}
