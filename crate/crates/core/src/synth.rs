//! Synthetic test instances: simple meshes, analytic warps, noise and
//! partial-overlap crops.

use nalgebra::Vector2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Surface;
use crate::Vec3;

/// Default depth-buffer resolution (pixels per side).
pub const DEFAULT_CROP_RESOLUTION: usize = 512;

/// Flat `nx × ny` grid spanning `[0, lx] × [0, ly]` in the `z = 0` plane.
pub fn strip(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Surface> {
    if nx < 2 || ny < 2 {
        return Err(Error::InvalidInput(format!("strip needs at least 2 x 2 vertices, got {nx} x {ny}")));
    }
    let mut points = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            points.push(Vec3::new(
                lx * i as f64 / (nx - 1) as f64,
                ly * j as f64 / (ny - 1) as f64,
                0.0,
            ));
        }
    }
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            faces.push([a, a + 1, a + nx + 1]);
            faces.push([a, a + nx + 1, a + nx]);
        }
    }
    Surface::from_mesh(points, faces)
}

/// UV sphere with `rings` latitude bands and `segments` longitude slices.
pub fn uv_sphere(rings: usize, segments: usize, radius: f64) -> Result<Surface> {
    if rings < 2 || segments < 3 {
        return Err(Error::InvalidInput("sphere needs rings >= 2 and segments >= 3".into()));
    }
    let mut points = vec![Vec3::new(0.0, 0.0, radius)];
    for r in 1..rings {
        let theta = std::f64::consts::PI * r as f64 / rings as f64;
        for s in 0..segments {
            let phi = std::f64::consts::TAU * s as f64 / segments as f64;
            points.push(radius * Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()));
        }
    }
    let south = points.len();
    points.push(Vec3::new(0.0, 0.0, -radius));
    let ring = |r: usize, s: usize| 1 + (r - 1) * segments + s % segments;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(1, s), ring(1, s + 1)]);
        faces.push([south, ring(rings - 1, s + 1), ring(rings - 1, s)]);
    }
    for r in 1..rings - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(r, s), ring(r, s + 1), ring(r + 1, s), ring(r + 1, s + 1));
            faces.push([a, c, d]);
            faces.push([a, d, b]);
        }
    }
    Surface::from_mesh(points, faces)
}

/// Displaces `z` by `amplitude · sin(2π x / wavelength)`.
pub fn sinusoidal_warp(surface: &Surface, amplitude: f64, wavelength: f64) -> Surface {
    let k = std::f64::consts::TAU / wavelength;
    surface.with_points(
        surface
            .points()
            .iter()
            .map(|p| Vec3::new(p.x, p.y, p.z + amplitude * (k * p.x).sin()))
            .collect(),
    )
}

pub fn translate(surface: &Surface, offset: &Vec3) -> Surface {
    surface.with_points(surface.points().iter().map(|p| p + offset).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// Every vertex is perturbed.
    Dense,
    /// A uniformly sampled fraction of the vertices is perturbed.
    Sparse,
}

/// I.i.d. Gaussian noise of standard deviation `sigma` on each axis.
/// `fraction` is only used in sparse mode.
pub fn add_noise(surface: &Surface, mode: NoiseMode, sigma: f64, fraction: f64, seed: u64) -> Result<Surface> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidInput(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidInput(format!("noise fraction must lie in [0, 1], got {fraction}")));
    }
    let mut points = surface.points().to_vec();
    if sigma == 0.0 {
        return Ok(surface.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let perturb = |p: &mut Vec3, rng: &mut ChaCha8Rng| {
        *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    };
    match mode {
        NoiseMode::Dense => {
            for p in &mut points {
                perturb(p, &mut rng);
            }
        }
        NoiseMode::Sparse => {
            let count = (fraction * points.len() as f64).round() as usize;
            let mut chosen = sample(&mut rng, points.len(), count).into_vec();
            chosen.sort_unstable();
            for i in chosen {
                perturb(&mut points[i], &mut rng);
            }
        }
    }
    Ok(surface.with_points(points))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Orthographic z-buffer; a face is kept if it wins at least one pixel.
    DepthBuffer { resolution: usize },
    /// Keep faces whose normal points against the view direction.
    BackFace,
}

impl Default for CropMode {
    fn default() -> Self {
        CropMode::DepthBuffer {
            resolution: DEFAULT_CROP_RESOLUTION,
        }
    }
}

/// A sub-surface together with its relation to the input.
#[derive(Debug, Clone)]
pub struct Crop {
    pub surface: Surface,
    /// Input vertex index of each retained vertex.
    pub retained: Vec<usize>,
    /// Per input vertex: retained or not.
    pub vertex_mask: Vec<bool>,
    /// Per input face: retained or not.
    pub face_mask: Vec<bool>,
}

fn faces_of(surface: &Surface) -> Result<&[[usize; 3]]> {
    surface
        .faces()
        .filter(|f| !f.is_empty())
        .ok_or_else(|| Error::InvalidInput("cropping needs a triangle mesh".into()))
}

fn sub_surface(surface: &Surface, face_mask: Vec<bool>) -> Result<Crop> {
    let faces = faces_of(surface)?;
    let mut remap = vec![usize::MAX; surface.len()];
    let mut retained = Vec::new();
    let mut kept_faces = Vec::new();
    for (f, keep) in faces.iter().zip(&face_mask) {
        if !keep {
            continue;
        }
        let mut nf = [0; 3];
        for (k, &v) in f.iter().enumerate() {
            if remap[v] == usize::MAX {
                remap[v] = retained.len();
                retained.push(v);
            }
            nf[k] = remap[v];
        }
        kept_faces.push(nf);
    }
    if retained.is_empty() {
        return Err(Error::Empty("crop retained no faces"));
    }
    let points = retained.iter().map(|&i| surface.points()[i]).collect();
    let vertex_mask = remap.iter().map(|&r| r != usize::MAX).collect();
    Ok(Crop {
        surface: Surface::from_mesh(points, kept_faces)?,
        retained,
        vertex_mask,
        face_mask,
    })
}

/// Part of the mesh visible from `view` (the direction the camera looks along).
pub fn partial_overlap_crop(surface: &Surface, view: &Vec3, mode: CropMode) -> Result<Crop> {
    let faces = faces_of(surface)?;
    let norm = view.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::InvalidInput("view direction must be a nonzero finite vector".into()));
    }
    let d = view / norm;
    let pts = surface.points();
    let mask = match mode {
        CropMode::BackFace => faces
            .iter()
            .map(|f| (pts[f[1]] - pts[f[0]]).cross(&(pts[f[2]] - pts[f[0]])).dot(&d) < 0.0)
            .collect(),
        CropMode::DepthBuffer { resolution } => {
            if resolution == 0 {
                return Err(Error::InvalidInput("depth buffer resolution must be positive".into()));
            }
            depth_buffer_visibility(pts, faces, &d, resolution)
        }
    };
    sub_surface(surface, mask)
}

fn depth_buffer_visibility(points: &[Vec3], faces: &[[usize; 3]], d: &Vec3, res: usize) -> Vec<bool> {
    let helper = if d.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = d.cross(&helper).normalize();
    let w = d.cross(&u);
    let proj: Vec<(Vector2<f64>, f64)> = points
        .iter()
        .map(|p| (Vector2::new(u.dot(p), w.dot(p)), d.dot(p)))
        .collect();
    let (mut lo, mut hi) = (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY));
    for (q, _) in &proj {
        lo = lo.inf(q);
        hi = hi.sup(q);
    }
    let extent = (hi - lo).max().max(f64::MIN_POSITIVE);
    let pixel = extent / res as f64;
    let to_px = |q: &Vector2<f64>| (q - lo) / pixel;

    let mut depth = vec![f64::INFINITY; res * res];
    let mut owner = vec![usize::MAX; res * res];
    for (fi, f) in faces.iter().enumerate() {
        let a = to_px(&proj[f[0]].0);
        let b = to_px(&proj[f[1]].0);
        let c = to_px(&proj[f[2]].0);
        let area = (b - a).perp(&(c - a));
        if area == 0.0 {
            continue;
        }
        let (za, zb, zc) = (proj[f[0]].1, proj[f[1]].1, proj[f[2]].1);
        let x0 = a.x.min(b.x).min(c.x).floor().max(0.0) as usize;
        let x1 = (a.x.max(b.x).max(c.x).ceil() as usize).min(res - 1);
        let y0 = a.y.min(b.y).min(c.y).floor().max(0.0) as usize;
        let y1 = (a.y.max(b.y).max(c.y).ceil() as usize).min(res - 1);
        for py in y0..=y1 {
            for px in x0..=x1 {
                let s = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
                let l0 = (c - b).perp(&(s - b)) / area;
                let l1 = (a - c).perp(&(s - c)) / area;
                let l2 = 1.0 - l0 - l1;
                if l0 < 0.0 || l1 < 0.0 || l2 < 0.0 {
                    continue;
                }
                let z = l0 * za + l1 * zb + l2 * zc;
                let k = py * res + px;
                if z < depth[k] {
                    depth[k] = z;
                    owner[k] = fi;
                }
            }
        }
    }
    let mut mask = vec![false; faces.len()];
    for o in owner {
        if o != usize::MAX {
            mask[o] = true;
        }
    }
    mask
}

/// Keeps the faces whose vertices all lie on the low side of a plane normal
/// to `direction`, placed so that roughly `keep_fraction` of the vertices
/// survive.
pub fn half_space_crop(surface: &Surface, direction: &Vec3, keep_fraction: f64) -> Result<Crop> {
    let faces = faces_of(surface)?;
    let norm = direction.norm();
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::InvalidInput("crop direction must be a nonzero finite vector".into()));
    }
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("keep fraction must lie in (0, 1], got {keep_fraction}")));
    }
    let d = direction / norm;
    let mut heights: Vec<f64> = surface.points().iter().map(|p| d.dot(p)).collect();
    let by_vertex = heights.clone();
    heights.sort_by(f64::total_cmp);
    let k = ((keep_fraction * heights.len() as f64).ceil() as usize).clamp(1, heights.len());
    let cut = heights[k - 1];
    let mask = faces
        .iter()
        .map(|f| f.iter().all(|&v| by_vertex[v] <= cut))
        .collect();
    sub_surface(surface, mask)
}
