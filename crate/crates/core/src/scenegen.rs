//! Synthetic labeled scenes and their ground-truth views.
//!
//! Scenes are unions of boxes and spheres with one class id each. An analytic
//! ray caster renders RGB (flat albedo), optical-axis depth and semantics for
//! any pinhole camera, and a codebook encoder turns semantic images into
//! per-pixel open-set feature maps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{Aabb, Pose, Vec3};
use crate::rng;
use crate::viewsel::lookat;

/// Distances below this along a ray are treated as the ray origin itself.
const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum Shape {
    /// Axis-aligned box; `size` holds the full edge lengths.
    Box { center: Vec3, size: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

impl Shape {
    pub fn bounds(&self) -> Aabb {
        match *self {
            Shape::Box { center, size } => Aabb::new(center - size * 0.5, center + size * 0.5),
            Shape::Sphere { center, radius } => {
                Aabb::new(center - Vec3::splat(radius), center + Vec3::splat(radius))
            }
        }
    }

    pub fn contains(&self, p: Vec3) -> bool {
        match *self {
            Shape::Box { .. } => self.bounds().contains(p),
            Shape::Sphere { center, radius } => (p - center).norm_squared() <= radius * radius,
        }
    }

    pub fn surface_area(&self) -> f64 {
        match *self {
            Shape::Box { size, .. } => 2.0 * (size.x * size.y + size.y * size.z + size.x * size.z),
            Shape::Sphere { radius, .. } => 4.0 * PI * radius * radius,
        }
    }

    /// Nearest intersection with positive ray parameter.
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<f64> {
        match *self {
            Shape::Box { .. } => {
                let (t0, t1) = self.bounds().intersect(origin, dir)?;
                if t0 > HIT_EPSILON {
                    Some(t0)
                } else if t1 > HIT_EPSILON {
                    Some(t1)
                } else {
                    None
                }
            }
            Shape::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = libm::sqrt(disc);
                let t0 = (-b - sq) / a;
                let t1 = (-b + sq) / a;
                if t0 > HIT_EPSILON {
                    Some(t0)
                } else if t1 > HIT_EPSILON {
                    Some(t1)
                } else {
                    None
                }
            }
        }
    }

    /// Uniform point on the surface.
    pub fn sample_surface<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match *self {
            Shape::Sphere { center, radius } => center + rng::unit_vector(rng) * radius,
            Shape::Box { center, size } => {
                let areas = [size.y * size.z, size.x * size.z, size.x * size.y];
                let total = areas[0] + areas[1] + areas[2];
                let pick = rng.random::<f64>() * total;
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let side = if rng.random::<bool>() { 0.5 } else { -0.5 };
                let mut local = [
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                    rng.random::<f64>() - 0.5,
                ];
                local[axis] = side;
                center + Vec3::from(local).mul_elem(size)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Primitive {
    #[cfg_attr(feature = "serde", serde(flatten))]
    pub shape: Shape,
    pub class_id: i32,
    pub albedo: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct SceneSpec {
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !self.bbox.is_valid() {
            return bad("bbox must have min < max on every axis".into());
        }
        if self.primitives.is_empty() {
            return bad("at least one primitive is required".into());
        }
        if !in_unit_cube(&self.background_color) {
            return bad("background color outside [0,1]".into());
        }
        let mut max_class = -1;
        for (i, p) in self.primitives.iter().enumerate() {
            match p.shape {
                Shape::Box { center, size } => {
                    if !center.is_finite() || !(size.x > 0.0 && size.y > 0.0 && size.z > 0.0) {
                        return bad(format!("primitive {i}: box size must be strictly positive"));
                    }
                }
                Shape::Sphere { center, radius } => {
                    if !center.is_finite() || !(radius > 0.0) || !radius.is_finite() {
                        return bad(format!("primitive {i}: sphere radius must be strictly positive"));
                    }
                }
            }
            if p.class_id < 0 {
                return bad(format!("primitive {i}: negative class id"));
            }
            if !in_unit_cube(&p.albedo) {
                return bad(format!("primitive {i}: albedo outside [0,1]"));
            }
            if !self.bbox.contains_box(&p.shape.bounds()) {
                return bad(format!("primitive {i} extends outside the scene bbox"));
            }
            max_class = max_class.max(p.class_id);
        }
        for c in 0..=max_class {
            if !self.primitives.iter().any(|p| p.class_id == c) {
                return bad(format!("class ids must be contiguous from 0; {c} is missing"));
            }
        }
        Ok(())
    }
}

fn in_unit_cube(c: &[f64; 3]) -> bool {
    c.iter().all(|v| (0.0..=1.0).contains(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bbox: Aabb,
    pub primitives: Vec<Primitive>,
    pub background_color: [f64; 3],
    pub seed: u64,
    pub n_classes: usize,
    /// Non-fatal findings such as overlapping primitives.
    pub warnings: Vec<String>,
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut warnings = Vec::new();
    for i in 0..spec.primitives.len() {
        for j in i + 1..spec.primitives.len() {
            let (a, b) = (spec.primitives[i].shape.bounds(), spec.primitives[j].shape.bounds());
            let overlap = (0..3).all(|k| a.min[k] < b.max[k] && b.min[k] < a.max[k]);
            if overlap {
                warnings.push(format!("primitives {i} and {j} overlap"));
            }
        }
    }
    let n_classes = spec.primitives.iter().map(|p| p.class_id).max().unwrap_or(0) as usize + 1;
    Ok(Scene {
        bbox: spec.bbox,
        primitives: spec.primitives.clone(),
        background_color: spec.background_color,
        seed: spec.seed,
        n_classes,
        warnings,
    })
}

impl Scene {
    pub fn centroid(&self) -> Vec3 {
        self.bbox.center()
    }

    /// True when `p` lies inside (or on) any solid primitive.
    pub fn is_occupied(&self, p: Vec3) -> bool {
        self.primitives.iter().any(|prim| prim.shape.contains(p))
    }

    pub fn class_surface_areas(&self) -> Vec<f64> {
        let mut areas = vec![0.0; self.n_classes];
        for p in &self.primitives {
            areas[p.class_id as usize] += p.shape.surface_area();
        }
        areas
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub class_id: i32,
    pub albedo: [f64; 3],
    pub primitive: usize,
}

/// Nearest primitive hit along the ray, `None` for a miss (background).
pub fn trace_ray(scene: &Scene, origin: Vec3, direction: Vec3) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives.iter().enumerate() {
        if let Some(t) = p.shape.intersect(origin, direction) {
            if best.is_none_or(|b| t < b.distance) {
                best = Some(Hit {
                    distance: t,
                    class_id: p.class_id,
                    albedo: p.albedo,
                    primitive: i,
                });
            }
        }
    }
    best
}

/// Pinhole intrinsics. Integer pixel coordinates are pixel centers, so
/// pixel `(row, col)` sits at image coordinates `(v, u) = (row, col)`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Symmetric intrinsics for a horizontal field of view in radians.
    pub fn from_fov(width: usize, height: usize, hfov: f64) -> Self {
        let fx = (width as f64 * 0.5) / libm::tan(hfov * 0.5);
        Intrinsics {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(Error::InvalidCamera("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidCamera("principal point outside the image".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// A projected world point: continuous image coordinates plus depth along the
/// optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Camera {
    pub fn new(pose: Pose, intrinsics: Intrinsics) -> Result<Self> {
        let cam = Camera { pose, intrinsics };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !self.pose.is_rigid(1e-6) {
            return Err(Error::InvalidCamera("pose rotation must be orthonormal with det +1".into()));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn position(&self) -> Vec3 {
        self.pose.position()
    }

    /// Unit world-space direction through the center of pixel `(row, col)`.
    pub fn pixel_direction(&self, row: f64, col: f64) -> Vec3 {
        let k = &self.intrinsics;
        let local = Vec3::new((col - k.cx) / k.fx, -(row - k.cy) / k.fy, -1.0);
        self.pose.rotate(local).normalized()
    }

    pub fn project(&self, p: Vec3) -> Option<Projection> {
        let local = self.pose.inverse_transform_point(p);
        let depth = -local.z;
        if depth <= 0.0 {
            return None;
        }
        let k = &self.intrinsics;
        Some(Projection {
            u: k.cx + k.fx * local.x / depth,
            v: k.cy - k.fy * local.y / depth,
            depth,
        })
    }

    /// Nearest pixel `(row, col)` of a projection, if inside the image.
    pub fn pixel_of(&self, proj: &Projection) -> Option<(usize, usize)> {
        let (r, c) = (libm::round(proj.v), libm::round(proj.u));
        if r < 0.0 || c < 0.0 || r >= self.height() as f64 || c >= self.width() as f64 {
            None
        } else {
            Some((r as usize, c as usize))
        }
    }
}

/// Row-major image plane.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Image<T> {
    pub fn get(&self, row: usize, col: usize) -> &T {
        &self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }
}

/// Per-pixel `dim`-channel features, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        FeatureMap {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let start = (row * self.width + col) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidConfig("feature map dim must be positive".into()));
        }
        if self.data.len() != self.width * self.height * self.dim {
            return Err(Error::LengthMismatch {
                expected: self.width * self.height * self.dim,
                actual: self.data.len(),
            });
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(())
    }
}

/// One ground-truth training view.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedFrame {
    pub camera: Camera,
    pub rgb: Image<[f64; 3]>,
    /// Depth along the optical axis; 0 means no return.
    pub depth: Image<f64>,
    /// Class id per pixel, -1 for background.
    pub semantics: Image<i32>,
    pub features: Option<FeatureMap>,
}

impl PosedFrame {
    pub fn width(&self) -> usize {
        self.camera.width()
    }

    pub fn height(&self) -> usize {
        self.camera.height()
    }

    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let (w, h) = (self.width(), self.height());
        let planes = [
            (self.rgb.width, self.rgb.height, self.rgb.data.len()),
            (self.depth.width, self.depth.height, self.depth.data.len()),
            (self.semantics.width, self.semantics.height, self.semantics.data.len()),
        ];
        for (pw, ph, len) in planes {
            if pw != w || ph != h || len != w * h {
                return Err(Error::LengthMismatch {
                    expected: w * h,
                    actual: len,
                });
            }
        }
        if let Some(f) = &self.features {
            if f.width != w || f.height != h {
                return Err(Error::LengthMismatch {
                    expected: w * h,
                    actual: f.width * f.height,
                });
            }
            f.validate()?;
        }
        if self.depth.data.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::NonFinite("depth plane".into()));
        }
        Ok(())
    }
}

/// Render ground-truth frames (no features) with the analytic ray caster.
pub fn render_views(scene: &Scene, cameras: &[Camera]) -> Vec<PosedFrame> {
    cameras.iter().map(|cam| render_view(scene, cam)).collect()
}

pub fn render_view(scene: &Scene, camera: &Camera) -> PosedFrame {
    let (w, h) = (camera.width(), camera.height());
    let mut rgb = Image::filled(w, h, scene.background_color);
    let mut depth = Image::filled(w, h, 0.0);
    let mut semantics = Image::filled(w, h, -1);
    let origin = camera.position();
    let forward = camera.pose.forward();
    for row in 0..h {
        for col in 0..w {
            let dir = camera.pixel_direction(row as f64, col as f64);
            if let Some(hit) = trace_ray(scene, origin, dir) {
                rgb.set(row, col, hit.albedo);
                depth.set(row, col, hit.distance * dir.dot(forward));
                semantics.set(row, col, hit.class_id);
            }
        }
    }
    PosedFrame {
        camera: *camera,
        rgb,
        depth,
        semantics,
        features: None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)
)]
pub enum TrajectoryKind {
    /// Horizontal circle around the scene centroid, all views looking at it.
    Orbit { radius: f64, height: f64 },
    /// Uniform positions in free space inside the bbox, looking at uniform
    /// random points of the bbox.
    RandomInterior,
}

const TRAJECTORY_RETRIES: usize = 1000;

/// World up used for every generated pose.
pub const WORLD_UP: Vec3 = Vec3::Z;

pub fn make_trajectory(
    scene: &Scene,
    n_views: usize,
    kind: TrajectoryKind,
    intrinsics: Intrinsics,
    seed: u64,
) -> Result<Vec<Camera>> {
    if n_views == 0 {
        return Err(Error::InvalidConfig("n_views must be at least 1".into()));
    }
    intrinsics.validate()?;
    let centroid = scene.centroid();
    let mut cameras = Vec::with_capacity(n_views);
    match kind {
        TrajectoryKind::Orbit { radius, height } => {
            if !(radius > 0.0) {
                return Err(Error::InvalidConfig("orbit radius must be positive".into()));
            }
            for k in 0..n_views {
                let theta = 2.0 * PI * k as f64 / n_views as f64;
                let eye = centroid + Vec3::new(radius * libm::cos(theta), radius * libm::sin(theta), height);
                if scene.is_occupied(eye) {
                    return Err(Error::NoFreePosition(1));
                }
                cameras.push(Camera::new(lookat(eye, centroid, WORLD_UP)?, intrinsics)?);
            }
        }
        TrajectoryKind::RandomInterior => {
            let mut rng = rng::stream(seed, "trajectory", 0);
            for _ in 0..n_views {
                let mut placed = None;
                for _ in 0..TRAJECTORY_RETRIES {
                    let eye = uniform_in_box(&scene.bbox, &mut rng);
                    if scene.is_occupied(eye) {
                        continue;
                    }
                    let target = uniform_in_box(&scene.bbox, &mut rng);
                    if (target - eye).norm() < 1e-3 * scene.bbox.diagonal() {
                        continue;
                    }
                    placed = Some(lookat(eye, target, WORLD_UP)?);
                    break;
                }
                let pose = placed.ok_or(Error::NoFreePosition(TRAJECTORY_RETRIES))?;
                cameras.push(Camera::new(pose, intrinsics)?);
            }
        }
    }
    Ok(cameras)
}

pub(crate) fn uniform_in_box<R: Rng + ?Sized>(b: &Aabb, rng: &mut R) -> Vec3 {
    let s = b.size();
    b.min + Vec3::new(rng.random::<f64>() * s.x, rng.random::<f64>() * s.y, rng.random::<f64>() * s.z)
}

/// Unit-norm embedding per class plus one for background.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub embeddings: Vec<Vec<f64>>,
    pub background: Vec<f64>,
}

/// Maximum pairwise cosine between generated codebook entries.
pub const CODEBOOK_MAX_COSINE: f64 = 0.5;

impl Codebook {
    /// Random unit vectors, rejecting candidates whose cosine with any
    /// accepted entry reaches [`CODEBOOK_MAX_COSINE`]. The background entry is
    /// drawn last.
    pub fn generate(n_classes: usize, dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 || n_classes == 0 {
            return Err(Error::InvalidConfig("codebook needs dim > 0 and at least one class".into()));
        }
        let mut rng = rng::stream(seed, "codebook", 0);
        let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(n_classes + 1);
        let mut attempts = 0usize;
        while accepted.len() < n_classes + 1 {
            attempts += 1;
            if attempts > 100_000 {
                return Err(Error::InvalidConfig(format!(
                    "cannot place {} separated embeddings in dimension {dim}",
                    n_classes + 1
                )));
            }
            let cand = random_unit(dim, &mut rng);
            let separated = accepted
                .iter()
                .all(|e| crate::math::dot(e, &cand) < CODEBOOK_MAX_COSINE);
            if separated {
                accepted.push(cand);
            }
        }
        let background = accepted.pop().unwrap_or_default();
        Ok(Codebook {
            dim,
            embeddings: accepted,
            background,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.embeddings.len()
    }

    /// Embedding of a class id; -1 maps to the background entry.
    pub fn embedding(&self, class_id: i32) -> Option<&[f64]> {
        match class_id {
            -1 => Some(&self.background),
            c if c >= 0 => self.embeddings.get(c as usize).map(Vec::as_slice),
            _ => None,
        }
    }
}

pub(crate) fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng::normal(rng)).collect();
        let n = crate::math::l2_norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Stand-in for a pixel-aligned vision-language encoder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(deny_unknown_fields)
)]
pub struct NoiseModel {
    /// Per-channel Gaussian std added before renormalization.
    pub sigma: f64,
    /// Class-specific overrides of `sigma`.
    #[cfg_attr(feature = "serde", serde(default))]
    pub class_sigma: Vec<(i32, f64)>,
    /// Pixels closer than this to the image edge become random unit vectors.
    pub border_corrupt: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn clean() -> Self {
        NoiseModel {
            sigma: 0.0,
            class_sigma: Vec::new(),
            border_corrupt: 0,
            seed: 0,
        }
    }

    fn sigma_for(&self, class_id: i32) -> f64 {
        self.class_sigma
            .iter()
            .find(|(c, _)| *c == class_id)
            .map_or(self.sigma, |(_, s)| *s)
    }
}

pub fn encode_features(semantics: &Image<i32>, codebook: &Codebook, noise: &NoiseModel) -> Result<FeatureMap> {
    let (w, h, dim) = (semantics.width, semantics.height, codebook.dim);
    let mut out = FeatureMap::zeros(w, h, dim);
    let mut rng = rng::stream(noise.seed, "encoder", 0);
    let b = noise.border_corrupt;
    let mut buf = vec![0.0f64; dim];
    for row in 0..h {
        for col in 0..w {
            let class = *semantics.get(row, col);
            let emb = codebook.embedding(class).ok_or(Error::UnknownClass(class))?;
            let on_border = row < b || col < b || row + b >= h || col + b >= w;
            if on_border {
                let v = random_unit(dim, &mut rng);
                buf.copy_from_slice(&v);
            } else {
                let sigma = noise.sigma_for(class);
                for (o, e) in buf.iter_mut().zip(emb) {
                    *o = if sigma > 0.0 { e + sigma * rng::normal(&mut rng) } else { *e };
                }
                let n = crate::math::l2_norm(&buf);
                if n > 1e-12 {
                    buf.iter_mut().for_each(|x| *x /= n);
                } else {
                    buf.copy_from_slice(emb);
                }
            }
            for (o, v) in out.pixel_mut(row, col).iter_mut().zip(&buf) {
                *o = *v as f32;
            }
        }
    }
    Ok(out)
}

/// Attach stub features to ground-truth frames. Each frame gets its own noise
/// stream derived from `noise.seed` and the frame index.
pub fn encode_frames(frames: &mut [PosedFrame], codebook: &Codebook, noise: &NoiseModel) -> Result<()> {
    for (i, frame) in frames.iter_mut().enumerate() {
        let mut n = noise.clone();
        n.seed = rng::stream_seed(noise.seed, "frame-noise", i as u64);
        frame.features = Some(encode_features(&frame.semantics, codebook, &n)?);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPointCloud {
    pub positions: Vec<Vec3>,
    pub class_ids: Vec<i32>,
    pub colors: Option<Vec<[f64; 3]>>,
}

impl LabeledPointCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; n_classes];
        for &c in &self.class_ids {
            if c >= 0 && (c as usize) < n_classes {
                counts[c as usize] += 1;
            }
        }
        counts
    }
}

/// Area-weighted uniform samples on primitive surfaces.
pub fn sample_point_cloud(scene: &Scene, n: usize, seed: u64) -> Result<LabeledPointCloud> {
    if n == 0 {
        return Err(Error::InvalidConfig("point count must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "point-cloud", 0);
    let areas: Vec<f64> = scene.primitives.iter().map(|p| p.shape.surface_area()).collect();
    let total: f64 = areas.iter().sum();
    let mut positions = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.random::<f64>() * total;
        let mut idx = areas.len() - 1;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a {
                idx = i;
                break;
            }
            pick -= a;
        }
        let prim = &scene.primitives[idx];
        positions.push(prim.shape.sample_surface(&mut rng));
        class_ids.push(prim.class_id);
        colors.push(prim.albedo);
    }
    Ok(LabeledPointCloud {
        positions,
        class_ids,
        colors: Some(colors),
    })
}
