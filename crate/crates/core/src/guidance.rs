//! Geometric guidance terms: two-sided Chamfer distance between surface
//! samples, a soft silhouette rasterizer for orthographic views, and the L1
//! loss between silhouette sets. All provide vertex gradients.
//!
//! Terms are registered in a [`GuidanceLoss`] so further guidance signals
//! (for example an embedding similarity) can be added without touching the
//! optimizer.

use std::fs;
use std::path::Path;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::Vector2;
use rayon::prelude::*;
use thiserror::Error;

use crate::mesh::{sample_surface, MeshError, SurfaceSampleSet, TriMesh, Vec3};

type Vec2 = Vector2<f64>;

/// Sigmoid arguments below `-CUTOFF` are treated as zero coverage.
const CUTOFF: f64 = 30.0;

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("point set is empty")]
    EmptySet,
    #[error("degenerate camera: {0}")]
    Camera(String),
    #[error("softness must be positive, got {0}")]
    Sigma(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("guidance target has neither a guidance mesh nor silhouettes")]
    NoTarget,
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

// ---------------------------------------------------------------- chamfer

#[derive(Debug, Clone, PartialEq)]
pub struct ChamferValue {
    pub loss: f64,
    /// Gradient with respect to every source point.
    pub source_grad: Vec<Vec3>,
}

fn kd_tree(points: &[Vec3]) -> Result<ImmutableKdTree<f64, 3>, GuidanceError> {
    let raw: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
    ImmutableKdTree::new_from_slice(&raw).map_err(|e| GuidanceError::Shape(format!("{e:?}")))
}

fn nearest(tree: &ImmutableKdTree<f64, 3>, p: &Vec3) -> usize {
    tree.query(&[p.x, p.y, p.z])
        .nearest_one::<SquaredEuclidean<f64>>()
        .execute()
        .item as usize
}

/// `mean_p min_q |p-q|^2 + mean_q min_p |q-p|^2` with the gradient on `source`.
pub fn chamfer_points(source: &[Vec3], target: &[Vec3]) -> Result<ChamferValue, GuidanceError> {
    if source.is_empty() || target.is_empty() {
        return Err(GuidanceError::EmptySet);
    }
    let target_tree = kd_tree(target)?;
    let source_tree = kd_tree(source)?;
    let (ns, nt) = (source.len() as f64, target.len() as f64);

    let forward: Vec<usize> = source.par_iter().map(|p| nearest(&target_tree, p)).collect();
    let backward: Vec<usize> = target.par_iter().map(|q| nearest(&source_tree, q)).collect();

    let mut grad = vec![Vec3::zeros(); source.len()];
    let mut forward_sum = 0.0;
    for (i, &j) in forward.iter().enumerate() {
        let d = source[i] - target[j];
        forward_sum += d.norm_squared();
        grad[i] += 2.0 / ns * d;
    }
    let mut backward_sum = 0.0;
    for (j, &i) in backward.iter().enumerate() {
        let d = source[i] - target[j];
        backward_sum += d.norm_squared();
        grad[i] += 2.0 / nt * d;
    }
    Ok(ChamferValue {
        loss: forward_sum / ns + backward_sum / nt,
        source_grad: grad,
    })
}

pub fn chamfer_loss(source: &SurfaceSampleSet, target: &SurfaceSampleSet) -> Result<ChamferValue, GuidanceError> {
    chamfer_points(&source.points, &target.points)
}

/// Chamfer distance between two meshes on `samples` surface samples each,
/// drawn with fixed seeds derived from `seed`.
pub fn mesh_chamfer(a: &TriMesh, b: &TriMesh, samples: usize, seed: u64) -> Result<f64, GuidanceError> {
    let sa = sample_surface(a, samples, splitmix(seed))?;
    let sb = sample_surface(b, samples, splitmix(seed ^ 0x5bd1_e995))?;
    Ok(chamfer_loss(&sa, &sb)?.loss)
}

// ---------------------------------------------------------------- cameras

/// Orthographic camera looking along `direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub direction: Vec3,
    pub up: Vec3,
    pub center: Vec3,
    pub half_extent: f64,
    pub resolution: usize,
    right: Vec3,
    image_up: Vec3,
}

impl Camera {
    pub fn new(direction: Vec3, up: Vec3, center: Vec3, half_extent: f64, resolution: usize) -> Result<Self, GuidanceError> {
        let dn = direction.norm();
        if !(dn > 0.0) || !dn.is_finite() {
            return Err(GuidanceError::Camera("zero view direction".into()));
        }
        let direction = direction / dn;
        let side = direction.cross(&up);
        if side.norm() <= 1e-12 * up.norm().max(1.0) {
            return Err(GuidanceError::Camera("up vector is parallel to the view direction".into()));
        }
        if !(half_extent > 0.0) {
            return Err(GuidanceError::Camera(format!("half extent must be positive, got {half_extent}")));
        }
        if resolution < 16 {
            return Err(GuidanceError::Camera(format!("resolution must be at least 16, got {resolution}")));
        }
        let right = side.normalize();
        let image_up = right.cross(&direction);
        Ok(Camera {
            direction,
            up,
            center,
            half_extent,
            resolution,
            right,
            image_up,
        })
    }

    /// Image-plane coordinates (model units) of a 3D point.
    pub fn project(&self, p: &Vec3) -> Vec2 {
        let d = p - self.center;
        Vec2::new(d.dot(&self.right), d.dot(&self.image_up))
    }

    /// Image-plane coordinates of the centre of pixel (`col`, `row`).
    pub fn pixel_center(&self, col: usize, row: usize) -> Vec2 {
        let step = 2.0 * self.half_extent / self.resolution as f64;
        Vec2::new(
            -self.half_extent + (col as f64 + 0.5) * step,
            self.half_extent - (row as f64 + 0.5) * step,
        )
    }

    pub fn pixel_size(&self) -> f64 {
        2.0 * self.half_extent / self.resolution as f64
    }

    fn lift(&self, g: &Vec2) -> Vec3 {
        g.x * self.right + g.y * self.image_up
    }

    fn col_range(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let step = self.pixel_size();
        let first = ((lo + self.half_extent) / step - 0.5).ceil().max(0.0);
        let last = ((hi + self.half_extent) / step - 0.5).floor().min(self.resolution as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }

    fn row_range(&self, lo: f64, hi: f64) -> Option<(usize, usize)> {
        let step = self.pixel_size();
        let first = ((self.half_extent - hi) / step - 0.5).ceil().max(0.0);
        let last = ((self.half_extent - lo) / step - 0.5).floor().min(self.resolution as f64 - 1.0);
        (first <= last).then_some((first as usize, last as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSet {
    pub cameras: Vec<Camera>,
}

impl CameraSet {
    pub fn new(cameras: Vec<Camera>) -> Result<Self, GuidanceError> {
        if cameras.is_empty() {
            return Err(GuidanceError::Camera("at least one camera is required".into()));
        }
        for i in 0..cameras.len() {
            for j in 0..i {
                if (cameras[i].direction - cameras[j].direction).norm() < 1e-9 {
                    return Err(GuidanceError::Camera(format!("cameras {j} and {i} share a view direction")));
                }
            }
        }
        Ok(CameraSet { cameras })
    }

    /// Eight views along the cube diagonals `(+-1, +-1, +-1)/sqrt(3)`.
    pub fn default_views(center: Vec3, half_extent: f64, resolution: usize) -> Result<Self, GuidanceError> {
        let mut cameras = Vec::with_capacity(8);
        for sx in [1.0, -1.0] {
            for sy in [1.0, -1.0] {
                for sz in [1.0, -1.0] {
                    let dir = Vec3::new(sx, sy, sz).normalize();
                    cameras.push(Camera::new(dir, Vec3::z(), center, half_extent, resolution)?);
                }
            }
        }
        CameraSet::new(cameras)
    }

    /// Default views framing all `meshes`: centred on their joint bounding
    /// box, half extent 1.2x the joint bounding radius.
    pub fn framing(meshes: &[&TriMesh], resolution: usize) -> Result<Self, GuidanceError> {
        let (center, half) = frame_meshes(meshes).ok_or(GuidanceError::EmptySet)?;
        CameraSet::default_views(center, half, resolution)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }
}

/// Frame centre (joint bounding-box centre) and half extent (1.2x the
/// largest vertex distance from it) covering all `meshes`.
pub fn frame_meshes(meshes: &[&TriMesh]) -> Option<(Vec3, f64)> {
    let mut bounds: Option<(Vec3, Vec3)> = None;
    for m in meshes {
        if let Some((lo, hi)) = m.bounding_box() {
            bounds = Some(match bounds {
                None => (lo, hi),
                Some((a, b)) => (a.inf(&lo), b.sup(&hi)),
            });
        }
    }
    let (lo, hi) = bounds?;
    let center = (lo + hi) / 2.0;
    let radius = meshes
        .iter()
        .flat_map(|m| m.vertices().iter())
        .map(|v| (v - center).norm())
        .fold(0.0, f64::max);
    Some((center, 1.2 * radius.max(1e-9)))
}

// ---------------------------------------------------------------- images

/// Square coverage image, row-major from the top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SilhouetteImage {
    pub resolution: usize,
    pub data: Vec<f64>,
    pub camera: usize,
}

impl SilhouetteImage {
    pub fn filled(resolution: usize, value: f64, camera: usize) -> Self {
        SilhouetteImage {
            resolution,
            data: vec![value; resolution * resolution],
            camera,
        }
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.resolution + col]
    }

    /// Fraction of pixels whose coverage is at least `threshold`.
    pub fn covered_fraction(&self, threshold: f64) -> f64 {
        self.data.iter().filter(|&&v| v >= threshold).count() as f64 / self.data.len() as f64
    }

    /// Binary 8-bit PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.resolution, self.resolution).into_bytes();
        out.extend(self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<(), GuidanceError> {
        let path = path.as_ref();
        fs::write(path, self.to_pgm()).map_err(|source| {
            GuidanceError::Mesh(MeshError::Io {
                path: path.to_path_buf(),
                source,
            })
        })
    }

    /// Parses P2 (ASCII) or P5 (binary) PGM with any maxval below 65536.
    pub fn from_pgm(bytes: &[u8], camera: usize) -> Result<Self, GuidanceError> {
        let bad = |m: &str| GuidanceError::Image(m.to_string());
        let mut pos = 0;
        let mut header = Vec::new();
        while header.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated PGM header"));
            }
            header.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
        }
        let binary = match header[0].as_str() {
            "P5" => true,
            "P2" => false,
            other => return Err(bad(&format!("unsupported magic {other}"))),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("invalid PGM header number"));
        let (w, h, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if w != h {
            return Err(bad("silhouettes must be square"));
        }
        if maxval == 0 || maxval > 65535 {
            return Err(bad("invalid maxval"));
        }
        let count = w * h;
        let values: Vec<f64> = if binary {
            let body = &bytes[(pos + 1).min(bytes.len())..];
            if maxval < 256 {
                if body.len() < count {
                    return Err(bad("truncated PGM data"));
                }
                body[..count].iter().map(|&b| b as f64 / maxval as f64).collect()
            } else {
                if body.len() < 2 * count {
                    return Err(bad("truncated PGM data"));
                }
                body.chunks_exact(2)
                    .take(count)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / maxval as f64)
                    .collect()
            }
        } else {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: Result<Vec<f64>, _> = text
                .split_whitespace()
                .take(count)
                .map(|t| t.parse::<f64>().map(|v| v / maxval as f64))
                .collect();
            let vals = vals.map_err(|_| bad("invalid PGM sample"))?;
            if vals.len() < count {
                return Err(bad("truncated PGM data"));
            }
            vals
        };
        Ok(SilhouetteImage {
            resolution: w,
            data: values,
            camera,
        })
    }

    /// Loads a grayscale silhouette from a PGM or PNG file.
    pub fn load(path: impl AsRef<Path>, camera: usize) -> Result<Self, GuidanceError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| {
            GuidanceError::Mesh(MeshError::Io {
                path: path.to_path_buf(),
                source,
            })
        })?;
        if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
            return Self::from_pgm(&bytes, camera);
        }
        let img = image::load_from_memory(&bytes)
            .map_err(|e| GuidanceError::Image(e.to_string()))?
            .to_luma16();
        let (w, h) = img.dimensions();
        if w != h {
            return Err(GuidanceError::Image("silhouettes must be square".into()));
        }
        Ok(SilhouetteImage {
            resolution: w as usize,
            data: img.pixels().map(|p| p.0[0] as f64 / 65535.0).collect(),
            camera,
        })
    }
}

// ---------------------------------------------------------------- rasterizer

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn cross2(a: &Vec2, b: &Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed distance from `p` to a 2D triangle (positive inside) and its
/// gradient with respect to the three corners.
fn triangle_signed_distance(p: &Vec2, tri: &[Vec2; 3]) -> (f64, [Vec2; 3]) {
    let area2 = cross2(&(tri[1] - tri[0]), &(tri[2] - tri[0]));
    let mut inside = area2 != 0.0;
    let mut best = (f64::INFINITY, 0usize, 0.0, Vec2::zeros());
    for e in 0..3 {
        let (a, b) = (tri[e], tri[(e + 1) % 3]);
        let ab = b - a;
        if inside && cross2(&ab, &(p - a)) * area2 <= 0.0 {
            inside = false;
        }
        let len2 = ab.norm_squared();
        let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let diff = p - (a + t * ab);
        let d = diff.norm();
        if d < best.0 {
            best = (d, e, t, diff);
        }
    }
    let (d, e, t, diff) = best;
    let mut grads = [Vec2::zeros(); 3];
    if d > 0.0 {
        let u = diff / d;
        let sign = if inside { 1.0 } else { -1.0 };
        grads[e] = -sign * (1.0 - t) * u;
        grads[(e + 1) % 3] = -sign * t * u;
    }
    (if inside { d } else { -d }, grads)
}

/// A rendered soft silhouette plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct SilhouetteRender {
    pub image: SilhouetteImage,
    pub camera: Camera,
    pub sigma: f64,
    /// Product of `(1 - s_j)` over triangles, per pixel.
    complement: Vec<f64>,
    /// Triangles whose cutoff box touches each row.
    row_bins: Vec<Vec<usize>>,
    projected: Vec<Vec2>,
}

fn bin_rows(mesh: &TriMesh, camera: &Camera, projected: &[Vec2], margin: f64) -> Vec<Vec<usize>> {
    let mut bins = vec![Vec::new(); camera.resolution];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let ys = [projected[f[0]].y, projected[f[1]].y, projected[f[2]].y];
        let lo = ys.iter().copied().fold(f64::INFINITY, f64::min) - margin;
        let hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max) + margin;
        if let Some((r0, r1)) = camera.row_range(lo, hi) {
            for bin in &mut bins[r0..=r1] {
                bin.push(fi);
            }
        }
    }
    bins
}

fn face_columns(camera: &Camera, tri: &[Vec2; 3], margin: f64) -> Option<(usize, usize)> {
    let lo = tri.iter().map(|p| p.x).fold(f64::INFINITY, f64::min) - margin;
    let hi = tri.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max) + margin;
    camera.col_range(lo, hi)
}

/// Soft silhouette: each pixel's coverage is `1 - prod_j (1 - sigmoid(d_j / sigma))`
/// over triangles `j`, where `d_j` is the 2D signed distance from the pixel
/// centre to the projected triangle (positive inside). `sigma` is in model
/// units.
pub fn render_silhouette(mesh: &TriMesh, camera: &Camera, sigma: f64) -> Result<SilhouetteRender, GuidanceError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GuidanceError::Sigma(sigma));
    }
    let res = camera.resolution;
    let projected: Vec<Vec2> = mesh.vertices().iter().map(|v| camera.project(v)).collect();
    let margin = CUTOFF * sigma;
    let row_bins = bin_rows(mesh, camera, &projected, margin);
    let rows: Vec<Vec<f64>> = row_bins
        .par_iter()
        .enumerate()
        .map(|(row, faces)| {
            let mut keep = vec![1.0; res];
            for &fi in faces {
                let f = mesh.faces()[fi];
                let tri = [projected[f[0]], projected[f[1]], projected[f[2]]];
                let Some((c0, c1)) = face_columns(camera, &tri, margin) else {
                    continue;
                };
                for (col, k) in keep.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                    let (sd, _) = triangle_signed_distance(&camera.pixel_center(col, row), &tri);
                    let x = sd / sigma;
                    if x > -CUTOFF {
                        *k *= sigmoid(-x);
                    }
                }
            }
            keep
        })
        .collect();
    let complement: Vec<f64> = rows.into_iter().flatten().collect();
    let data = complement.iter().map(|k| 1.0 - k).collect();
    Ok(SilhouetteRender {
        image: SilhouetteImage {
            resolution: res,
            data,
            camera: 0,
        },
        camera: camera.clone(),
        sigma,
        complement,
        row_bins,
        projected,
    })
}

impl SilhouetteRender {
    /// Vertex gradient of a scalar loss given its gradient on every pixel.
    pub fn backward(&self, mesh: &TriMesh, pixel_grad: &[f64]) -> Result<Vec<Vec3>, GuidanceError> {
        let res = self.camera.resolution;
        if pixel_grad.len() != res * res {
            return Err(GuidanceError::Shape(format!(
                "pixel gradient has {} entries, image has {}",
                pixel_grad.len(),
                res * res
            )));
        }
        let margin = CUTOFF * self.sigma;
        let partials: Vec<Vec<(usize, [Vec2; 3])>> = self
            .row_bins
            .par_iter()
            .enumerate()
            .map(|(row, faces)| {
                let mut out = Vec::new();
                for &fi in faces {
                    let f = mesh.faces()[fi];
                    let tri = [self.projected[f[0]], self.projected[f[1]], self.projected[f[2]]];
                    let Some((c0, c1)) = face_columns(&self.camera, &tri, margin) else {
                        continue;
                    };
                    let mut acc = [Vec2::zeros(); 3];
                    let mut touched = false;
                    for col in c0..=c1 {
                        let idx = row * res + col;
                        let upstream = pixel_grad[idx];
                        if upstream == 0.0 {
                            continue;
                        }
                        let (sd, g) = triangle_signed_distance(&self.camera.pixel_center(col, row), &tri);
                        let x = sd / self.sigma;
                        if x <= -CUTOFF {
                            continue;
                        }
                        // d coverage / d sd = prod_{k != j}(1 - s_k) * s_j (1 - s_j) / sigma
                        let scale = upstream * self.complement[idx] * sigmoid(x) / self.sigma;
                        for k in 0..3 {
                            acc[k] += scale * g[k];
                        }
                        touched = true;
                    }
                    if touched {
                        out.push((fi, acc));
                    }
                }
                out
            })
            .collect();
        let mut grad = vec![Vec3::zeros(); mesh.num_vertices()];
        for row in partials {
            for (fi, acc) in row {
                let f = mesh.faces()[fi];
                for k in 0..3 {
                    grad[f[k]] += self.camera.lift(&acc[k]);
                }
            }
        }
        Ok(grad)
    }
}

/// Renders every camera of the set.
pub fn render_views(mesh: &TriMesh, cameras: &CameraSet, sigma: f64) -> Result<Vec<SilhouetteRender>, GuidanceError> {
    cameras
        .cameras
        .iter()
        .enumerate()
        .map(|(k, cam)| {
            let mut r = render_silhouette(mesh, cam, sigma)?;
            r.image.camera = k;
            Ok(r)
        })
        .collect()
}

fn check_shapes(images: &[&SilhouetteImage], targets: &[SilhouetteImage]) -> Result<(), GuidanceError> {
    if images.len() != targets.len() || images.is_empty() {
        return Err(GuidanceError::Shape(format!("{} renders vs {} targets", images.len(), targets.len())));
    }
    for (k, (a, b)) in images.iter().zip(targets).enumerate() {
        if a.resolution != b.resolution || a.data.len() != b.data.len() {
            return Err(GuidanceError::Shape(format!(
                "view {k}: resolution {} vs {}",
                a.resolution, b.resolution
            )));
        }
    }
    Ok(())
}

/// Mean over views of the per-pixel mean absolute difference.
pub fn image_l1_value(images: &[SilhouetteImage], targets: &[SilhouetteImage]) -> Result<f64, GuidanceError> {
    let refs: Vec<&SilhouetteImage> = images.iter().collect();
    check_shapes(&refs, targets)?;
    let k = images.len() as f64;
    Ok(images
        .iter()
        .zip(targets)
        .map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64)
        .sum::<f64>()
        / k)
}

/// L1 silhouette loss and its vertex gradient through the rasterizer.
pub fn image_l1_loss(
    renders: &[SilhouetteRender],
    targets: &[SilhouetteImage],
    mesh: &TriMesh,
) -> Result<(f64, Vec<Vec3>), GuidanceError> {
    let refs: Vec<&SilhouetteImage> = renders.iter().map(|r| &r.image).collect();
    check_shapes(&refs, targets)?;
    let k = renders.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); mesh.num_vertices()];
    for (render, target) in renders.iter().zip(targets) {
        let pixels = render.image.data.len() as f64;
        let mut pixel_grad = Vec::with_capacity(render.image.data.len());
        let mut view_sum = 0.0;
        for (x, y) in render.image.data.iter().zip(&target.data) {
            let d = x - y;
            view_sum += d.abs();
            pixel_grad.push(if d > 0.0 {
                1.0 / (k * pixels)
            } else if d < 0.0 {
                -1.0 / (k * pixels)
            } else {
                0.0
            });
        }
        loss += view_sum / pixels;
        for (g, d) in grad.iter_mut().zip(render.backward(mesh, &pixel_grad)?) {
            *g += d;
        }
    }
    Ok((loss / k, grad))
}

// ---------------------------------------------------------------- registry

/// How Chamfer samples are drawn across iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResamplePolicy {
    /// Fresh samples every iteration, seeded from `seed` and the iteration index.
    PerIteration { seed: u64 },
    /// The same seed every iteration.
    Fixed { seed: u64 },
}

impl ResamplePolicy {
    /// Seed for one iteration and stream (0 = deformed object, 1 = target).
    pub fn seed_for(&self, iteration: u64, stream: u64) -> u64 {
        let base = match *self {
            ResamplePolicy::PerIteration { seed } => splitmix(seed ^ splitmix(iteration)),
            ResamplePolicy::Fixed { seed } => seed,
        };
        splitmix(base.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct GuidanceTarget {
    pub mesh: Option<TriMesh>,
    pub silhouettes: Option<Vec<SilhouetteImage>>,
    pub sample_count: usize,
    pub resample: ResamplePolicy,
}

impl GuidanceTarget {
    pub fn from_mesh(mesh: TriMesh, sample_count: usize, seed: u64) -> Self {
        GuidanceTarget {
            mesh: Some(mesh),
            silhouettes: None,
            sample_count,
            resample: ResamplePolicy::PerIteration { seed },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GuidanceWeights {
    pub chamfer: f64,
    pub image: f64,
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        GuidanceWeights { chamfer: 1.0, image: 0.0 }
    }
}

/// What a guidance term sees: the current deformed mesh and the iteration.
pub struct GuidanceContext<'a> {
    pub mesh: &'a TriMesh,
    pub iteration: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermValue {
    pub loss: f64,
    pub grad: Vec<Vec3>,
}

/// A differentiable guidance signal on the deformed mesh.
pub trait GuidanceTerm: Send + Sync {
    fn name(&self) -> &str;
    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<TermValue, GuidanceError>;
}

/// Two-sided Chamfer distance to a guidance mesh, on fresh surface samples.
pub struct ChamferTerm {
    target: TriMesh,
    samples: usize,
    policy: ResamplePolicy,
}

impl ChamferTerm {
    pub fn new(target: TriMesh, samples: usize, policy: ResamplePolicy) -> Self {
        ChamferTerm { target, samples, policy }
    }
}

impl GuidanceTerm for ChamferTerm {
    fn name(&self) -> &str {
        "chamfer"
    }

    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<TermValue, GuidanceError> {
        let source = sample_surface(ctx.mesh, self.samples, self.policy.seed_for(ctx.iteration, 0))?;
        let target = sample_surface(&self.target, self.samples, self.policy.seed_for(ctx.iteration, 1))?;
        let value = chamfer_loss(&source, &target)?;
        Ok(TermValue {
            loss: value.loss,
            grad: source.scatter_to_vertices(ctx.mesh, &value.source_grad),
        })
    }
}

/// Multi-view L1 silhouette loss against fixed target images.
pub struct SilhouetteTerm {
    cameras: CameraSet,
    sigma: f64,
    targets: Vec<SilhouetteImage>,
}

impl SilhouetteTerm {
    pub fn new(cameras: CameraSet, sigma: f64, targets: Vec<SilhouetteImage>) -> Result<Self, GuidanceError> {
        if targets.len() != cameras.len() {
            return Err(GuidanceError::Shape(format!("{} targets for {} cameras", targets.len(), cameras.len())));
        }
        for (t, c) in targets.iter().zip(&cameras.cameras) {
            if t.resolution != c.resolution {
                return Err(GuidanceError::Shape("target resolution differs from camera".into()));
            }
        }
        Ok(SilhouetteTerm { cameras, sigma, targets })
    }

    /// Targets rendered from a guidance mesh with the same cameras and softness.
    pub fn from_mesh(cameras: CameraSet, sigma: f64, guidance: &TriMesh) -> Result<Self, GuidanceError> {
        let targets = render_views(guidance, &cameras, sigma)?.into_iter().map(|r| r.image).collect();
        SilhouetteTerm::new(cameras, sigma, targets)
    }

    pub fn cameras(&self) -> &CameraSet {
        &self.cameras
    }

    pub fn targets(&self) -> &[SilhouetteImage] {
        &self.targets
    }
}

impl GuidanceTerm for SilhouetteTerm {
    fn name(&self) -> &str {
        "silhouette"
    }

    fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<TermValue, GuidanceError> {
        let renders = render_views(ctx.mesh, &self.cameras, self.sigma)?;
        let (loss, grad) = image_l1_loss(&renders, &self.targets, ctx.mesh)?;
        Ok(TermValue { loss, grad })
    }
}

struct WeightedTerm {
    weight: f64,
    term: Box<dyn GuidanceTerm>,
}

/// Weighted sum of registered guidance terms.
#[derive(Default)]
pub struct GuidanceLoss {
    terms: Vec<WeightedTerm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceValue {
    pub total: f64,
    /// `(name, unweighted value)` of each evaluated term.
    pub terms: Vec<(String, f64)>,
    pub grad: Vec<Vec3>,
}

impl GuidanceLoss {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, weight: f64, term: Box<dyn GuidanceTerm>) -> &mut Self {
        self.terms.push(WeightedTerm { weight, term });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.term.name().to_string()).collect()
    }

    /// Builds the Chamfer and silhouette terms for a target. A term is only
    /// registered when its weight is positive. `cameras` is required for a
    /// positive image weight.
    pub fn from_target(
        target: &GuidanceTarget,
        weights: &GuidanceWeights,
        cameras: Option<&CameraSet>,
        sigma: f64,
    ) -> Result<Self, GuidanceError> {
        let mut loss = GuidanceLoss::new();
        if weights.chamfer > 0.0 {
            let mesh = target.mesh.clone().ok_or(GuidanceError::NoTarget)?;
            loss.register(weights.chamfer, Box::new(ChamferTerm::new(mesh, target.sample_count, target.resample)));
        }
        if weights.image > 0.0 {
            let cameras = cameras
                .cloned()
                .ok_or_else(|| GuidanceError::Camera("image guidance needs cameras".into()))?;
            let term = match (&target.silhouettes, &target.mesh) {
                (Some(images), _) => SilhouetteTerm::new(cameras, sigma, images.clone())?,
                (None, Some(mesh)) => SilhouetteTerm::from_mesh(cameras, sigma, mesh)?,
                (None, None) => return Err(GuidanceError::NoTarget),
            };
            loss.register(weights.image, Box::new(term));
        }
        Ok(loss)
    }

    pub fn evaluate(&self, ctx: &GuidanceContext<'_>) -> Result<GuidanceValue, GuidanceError> {
        let mut value = GuidanceValue {
            total: 0.0,
            terms: Vec::with_capacity(self.terms.len()),
            grad: vec![Vec3::zeros(); ctx.mesh.num_vertices()],
        };
        for t in self.terms.iter().filter(|t| t.weight > 0.0) {
            let tv = t.term.evaluate(ctx)?;
            value.total += t.weight * tv.loss;
            for (g, d) in value.grad.iter_mut().zip(&tv.grad) {
                *g += t.weight * d;
            }
            value.terms.push((t.term.name().to_string(), tv.loss));
        }
        Ok(value)
    }
}

/// Guidance loss of a deformed mesh at one iteration.
pub fn guidance_loss(deformed: &TriMesh, loss: &GuidanceLoss, iteration: u64) -> Result<GuidanceValue, GuidanceError> {
    loss.evaluate(&GuidanceContext {
        mesh: deformed,
        iteration,
    })
}
