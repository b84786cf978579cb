//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use bodyfit::mesh::{TriMesh, Vec3};

pub fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let one_way = |x: &[Vec3], y: &[Vec3]| {
        let mut sum = 0.0;
        for p in x {
            let mut best = f64::INFINITY;
            for q in y {
                best = best.min((p - q).norm_squared());
            }
            sum += best;
        }
        sum / x.len() as f64
    };
    one_way(a, b) + one_way(b, a)
}

/// Mean over contacts of the squared distance to the nearest vertex.
pub fn brute_contact(vertices: &[Vec3], contacts: &[Vec3]) -> f64 {
    let mut sum = 0.0;
    for c in contacts {
        let mut best = f64::INFINITY;
        for v in vertices {
            best = best.min((v - c).norm_squared());
        }
        sum += best;
    }
    sum / contacts.len() as f64
}

fn segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

/// Distance to a triangle: plane distance when the projection falls inside,
/// otherwise the nearest edge.
pub fn triangle_distance(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    let n = (b - a).cross(&(c - a));
    let nn = n.norm_squared();
    let proj = p - n * ((p - a).dot(&n) / nn);
    let u = (b - proj).cross(&(c - proj)).dot(&n) / nn;
    let v = (c - proj).cross(&(a - proj)).dot(&n) / nn;
    let w = 1.0 - u - v;
    if u >= 0.0 && v >= 0.0 && w >= 0.0 {
        (p - proj).norm()
    } else {
        segment_distance(p, a, b).min(segment_distance(p, b, c)).min(segment_distance(p, c, a))
    }
}

/// Generalized winding number as the normalized sum of signed solid angles.
pub fn winding(mesh: &TriMesh, p: &Vec3) -> f64 {
    let mut total = 0.0;
    for f in 0..mesh.num_faces() {
        let [a, b, c] = mesh.corners(f);
        let (a, b, c) = (a - p, b - p, c - p);
        let (la, lb, lc) = (a.norm(), b.norm(), c.norm());
        let num = a.dot(&b.cross(&c));
        let den = la * lb * lc + a.dot(&b) * lc + b.dot(&c) * la + c.dot(&a) * lb;
        total += 2.0 * num.atan2(den);
    }
    total / (4.0 * std::f64::consts::PI)
}

pub fn brute_signed_distance(body: &TriMesh, p: &Vec3) -> f64 {
    let mut d = f64::INFINITY;
    for f in 0..body.num_faces() {
        let [a, b, c] = body.corners(f);
        d = d.min(triangle_distance(p, &a, &b, &c));
    }
    if winding(body, p) > 0.5 {
        -d
    } else {
        d
    }
}

pub fn brute_penetration(vertices: &[Vec3], body: &TriMesh, threshold: f64) -> f64 {
    let mut sum = 0.0;
    for v in vertices {
        let d = brute_signed_distance(body, v);
        if d < threshold {
            sum += d * d;
        }
    }
    sum
}
