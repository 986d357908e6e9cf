//! Volumetric rendering of color, depth and open-set features.
//!
//! Quadrature: `w_k = T_k (1 - exp(-σ_k δ_k))` with
//! `T_k = exp(-Σ_{j<k} σ_j δ_j)`. Color composites over the background,
//! features do not, and depth is the opacity-normalized expected termination
//! distance.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{FieldGrads, FieldParams, FieldUpstream, SampleCache};
use crate::math::{Aabb, Vec3};
use crate::rng;
use crate::scenegen::{Camera, FeatureMap, Image};

/// Floor of the opacity used to normalize depth.
pub const DEPTH_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRef {
    pub frame: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
    pub pixel: Option<PixelRef>,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, near: f64, far: f64) -> Result<Ray> {
        if (direction.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("ray direction must be unit length".into()));
        }
        if !(near >= 0.0 && near < far) {
            return Err(Error::InvalidConfig("ray bounds must satisfy 0 <= near < far".into()));
        }
        Ok(Ray {
            origin,
            direction,
            near,
            far,
            pixel: None,
        })
    }

    /// Ray clipped to `bbox`. Rays that miss the box span `[0, diagonal]` and
    /// simply integrate empty space.
    pub fn through_box(origin: Vec3, direction: Vec3, bbox: &Aabb) -> Ray {
        let (near, far) = match bbox.intersect(origin, direction) {
            Some((t0, t1)) if t1 > 0.0 && t1 > t0.max(0.0) => (t0.max(0.0), t1),
            _ => (0.0, bbox.diagonal()),
        };
        Ray {
            origin,
            direction,
            near,
            far,
            pixel: None,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderConfig {
    pub n_samples: usize,
    pub stratified: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_samples: 128,
            stratified: false,
        }
    }
}

/// Rays through pixel centers, clipped to the field box.
pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)], bbox: &Aabb) -> Result<Vec<Ray>> {
    let (w, h) = (camera.width(), camera.height());
    pixels
        .iter()
        .map(|&(row, col)| {
            if row >= h || col >= w {
                return Err(Error::PixelOutOfBounds {
                    row,
                    col,
                    width: w,
                    height: h,
                });
            }
            let dir = camera.pixel_direction(row as f64, col as f64);
            let mut ray = Ray::through_box(camera.position(), dir, bbox);
            ray.pixel = Some(PixelRef { frame: 0, row, col });
            Ok(ray)
        })
        .collect()
}

/// Sample distances and interval lengths along a ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// `n` equal bins over `[near, far]`; one uniform draw per bin when
/// stratified, bin centers otherwise. The last interval is one bin width.
pub fn sample_along_ray<R: Rng + ?Sized>(ray: &Ray, n_samples: usize, stratified: bool, rng: &mut R) -> Samples {
    let mut s = Samples::default();
    sample_along_ray_into(ray, n_samples.max(2), stratified, rng, &mut s);
    s
}

pub(crate) fn sample_along_ray_into<R: Rng + ?Sized>(
    ray: &Ray,
    n: usize,
    stratified: bool,
    rng: &mut R,
    out: &mut Samples,
) {
    let width = (ray.far - ray.near) / n as f64;
    out.t.clear();
    out.delta.clear();
    for k in 0..n {
        let u = if stratified { rng.random::<f64>() } else { 0.5 };
        out.t.push(ray.near + (k as f64 + u) * width);
    }
    for k in 0..n {
        out.delta.push(if k + 1 < n { out.t[k + 1] - out.t[k] } else { width });
    }
}

/// Per-sample field values along a ray. `feature` is `len * dim`, sample-major.
#[derive(Debug, Clone, Copy)]
pub struct SampleValues<'a> {
    pub sigma: &'a [f64],
    pub color: &'a [[f64; 3]],
    pub feature: &'a [f64],
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedRay {
    pub color: [f64; 3],
    /// Expected termination distance along the ray.
    pub depth: f64,
    pub feature: Vec<f64>,
    pub weights: Vec<f64>,
    /// Transmittance `T_k` in front of every sample, plus the exit value.
    pub transmittance: Vec<f64>,
    pub opacity: f64,
}

pub fn composite(values: &SampleValues<'_>, samples: &Samples, background: [f64; 3]) -> RenderedRay {
    let n = samples.len();
    let dim = values.dim;
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = Vec::with_capacity(n + 1);
    let mut color = [0.0; 3];
    let mut feature = vec![0.0; dim];
    let mut depth_num = 0.0;
    let mut optical = 0.0;
    transmittance.push(1.0);
    for k in 0..n {
        let t_k = libm::exp(-optical);
        let tau = values.sigma[k] * samples.delta[k];
        optical += tau;
        let t_next = libm::exp(-optical);
        let w = t_k * -libm::expm1(-tau);
        weights.push(w);
        transmittance.push(t_next);
        for c in 0..3 {
            color[c] += w * values.color[k][c];
        }
        for (f, o) in feature.iter_mut().zip(&values.feature[k * dim..(k + 1) * dim]) {
            *f += w * o;
        }
        depth_num += w * samples.t[k];
    }
    let opacity: f64 = weights.iter().sum();
    for c in 0..3 {
        color[c] += (1.0 - opacity) * background[c];
    }
    RenderedRay {
        color,
        depth: depth_num / opacity.max(DEPTH_EPSILON),
        feature,
        weights,
        transmittance,
        opacity,
    }
}

/// Derivatives of a loss with respect to one rendered ray.
#[derive(Debug, Clone, Copy)]
pub struct CompositeUpstream<'a> {
    pub color: [f64; 3],
    pub depth: f64,
    pub feature: &'a [f64],
}

/// Per-sample gradients produced by [`composite_backward`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleGrads {
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub feature: Vec<f64>,
}

/// Backward pass of [`composite`].
///
/// The feature branch is cut at the compositing weights: feature upstream
/// reaches the per-sample features only and never the densities.
pub fn composite_backward(
    values: &SampleValues<'_>,
    samples: &Samples,
    background: [f64; 3],
    rendered: &RenderedRay,
    upstream: &CompositeUpstream<'_>,
    out: &mut SampleGrads,
) {
    let n = samples.len();
    let dim = values.dim;
    out.sigma.clear();
    out.sigma.resize(n, 0.0);
    out.color.clear();
    out.color.resize(n, [0.0; 3]);
    out.feature.clear();
    out.feature.resize(n * dim, 0.0);

    let opacity = rendered.opacity;
    let normalized = opacity > DEPTH_EPSILON;
    // q_k: derivative of the loss with respect to w_k (color and depth paths)
    let q = |k: usize| -> f64 {
        let c = &values.color[k];
        let mut v = 0.0;
        for ch in 0..3 {
            v += upstream.color[ch] * (c[ch] - background[ch]);
        }
        if normalized {
            v += upstream.depth * (samples.t[k] - rendered.depth) / opacity;
        } else {
            v += upstream.depth * samples.t[k] / DEPTH_EPSILON;
        }
        v
    };
    let mut tail = 0.0;
    for k in (0..n).rev() {
        let qk = q(k);
        let w = rendered.weights[k];
        out.sigma[k] = samples.delta[k] * (rendered.transmittance[k + 1] * qk - tail);
        tail += w * qk;
        for ch in 0..3 {
            out.color[k][ch] = w * upstream.color[ch];
        }
        if upstream.feature.iter().any(|v| *v != 0.0) {
            for (g, u) in out.feature[k * dim..(k + 1) * dim].iter_mut().zip(upstream.feature) {
                *g = w * u;
            }
        }
    }
}

/// Reusable buffers for rendering one ray through a field.
#[derive(Debug, Default)]
pub struct RayScratch {
    pub samples: Samples,
    pub sigma: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub feature: Vec<f64>,
    pub caches: Vec<SampleCache>,
    pub grads: SampleGrads,
}

/// Sample, query and composite one ray, keeping intermediates in `scratch`.
pub fn render_ray<R: Rng + ?Sized>(
    params: &FieldParams,
    ray: &Ray,
    config: &RenderConfig,
    rng: &mut R,
    scratch: &mut RayScratch,
) -> RenderedRay {
    let dim = params.feature_dim();
    let n = config.n_samples.max(2);
    sample_along_ray_into(ray, n, config.stratified, rng, &mut scratch.samples);
    scratch.sigma.clear();
    scratch.color.clear();
    scratch.caches.clear();
    scratch.feature.clear();
    scratch.feature.resize(n * dim, 0.0);
    for k in 0..n {
        let x = ray.at(scratch.samples.t[k]);
        let cache = params.eval(x, &mut scratch.feature[k * dim..(k + 1) * dim]);
        scratch.sigma.push(cache.sigma);
        scratch.color.push(cache.color);
        scratch.caches.push(cache);
    }
    let values = SampleValues {
        sigma: &scratch.sigma,
        color: &scratch.color,
        feature: &scratch.feature,
        dim,
    };
    composite(&values, &scratch.samples, params.background)
}

/// Backpropagate ray-level upstream derivatives into field gradients. Must
/// follow a [`render_ray`] call with the same `scratch`.
pub fn render_ray_backward(
    params: &FieldParams,
    ray: &Ray,
    rendered: &RenderedRay,
    upstream: &CompositeUpstream<'_>,
    scratch: &mut RayScratch,
    grads: &mut FieldGrads,
) {
    let dim = params.feature_dim();
    let values = SampleValues {
        sigma: &scratch.sigma,
        color: &scratch.color,
        feature: &scratch.feature,
        dim,
    };
    composite_backward(&values, &scratch.samples, params.background, rendered, upstream, &mut scratch.grads);
    for k in 0..scratch.samples.len() {
        let x = ray.at(scratch.samples.t[k]);
        let up = FieldUpstream {
            sigma: scratch.grads.sigma[k],
            color: scratch.grads.color[k],
            feature: &scratch.grads.feature[k * dim..(k + 1) * dim],
        };
        params.backward(x, &scratch.caches[k], &up, grads);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderPlanes {
    pub color: bool,
    pub depth: bool,
    pub feature: bool,
}

impl RenderPlanes {
    pub const ALL: RenderPlanes = RenderPlanes {
        color: true,
        depth: true,
        feature: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub color: Option<Image<[f64; 3]>>,
    /// Depth along the optical axis, comparable with ground-truth depth images.
    pub depth: Option<Image<f64>>,
    pub feature: Option<FeatureMap>,
    pub opacity: Image<f64>,
}

pub fn render_image(
    params: &FieldParams,
    camera: &Camera,
    config: &RenderConfig,
    planes: RenderPlanes,
    seed: u64,
) -> RenderedImage {
    let (w, h) = (camera.width(), camera.height());
    let dim = params.feature_dim();
    let mut color = planes.color.then(|| Image::filled(w, h, [0.0; 3]));
    let mut depth = planes.depth.then(|| Image::filled(w, h, 0.0));
    let mut feature = planes.feature.then(|| FeatureMap::zeros(w, h, dim));
    let mut opacity = Image::filled(w, h, 0.0);
    let mut rng = rng::stream(seed, "render-image", 0);
    let mut scratch = RayScratch::default();
    let forward = camera.pose.forward();
    for row in 0..h {
        for col in 0..w {
            let dir = camera.pixel_direction(row as f64, col as f64);
            let ray = Ray::through_box(camera.position(), dir, &params.bbox);
            let r = render_ray(params, &ray, config, &mut rng, &mut scratch);
            if let Some(img) = color.as_mut() {
                img.set(row, col, r.color);
            }
            if let Some(img) = depth.as_mut() {
                img.set(row, col, r.depth * dir.dot(forward));
            }
            if let Some(fm) = feature.as_mut() {
                for (o, v) in fm.pixel_mut(row, col).iter_mut().zip(&r.feature) {
                    *o = *v as f32;
                }
            }
            opacity.set(row, col, r.opacity);
        }
    }
    RenderedImage {
        color,
        depth,
        feature,
        opacity,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(n: usize, near: f64, far: f64) -> Samples {
        let ray = Ray::new(Vec3::ZERO, Vec3::Z, near, far).unwrap();
        sample_along_ray(&ray, n, false, &mut rng::stream(0, "t", 0))
    }

    #[test]
    fn bin_centers_and_deltas() {
        let s = fixed(4, 0.0, 4.0);
        assert_eq!(s.t, vec![0.5, 1.5, 2.5, 3.5]);
        assert_eq!(s.delta, vec![1.0; 4]);
    }

    #[test]
    fn transparent_ray_shows_background() {
        let s = fixed(8, 1.0, 3.0);
        let sigma = vec![0.0; 8];
        let color = vec![[0.3, 0.6, 0.9]; 8];
        let feature = vec![1.0; 16];
        let r = composite(
            &SampleValues {
                sigma: &sigma,
                color: &color,
                feature: &feature,
                dim: 2,
            },
            &s,
            [0.2, 0.4, 0.6],
        );
        assert!(r.weights.iter().all(|w| *w == 0.0));
        assert_eq!(r.color, [0.2, 0.4, 0.6]);
        assert_eq!(r.feature, vec![0.0, 0.0]);
        assert_eq!(r.opacity, 0.0);
    }

    #[test]
    fn opaque_sample_takes_all_weight() {
        let s = fixed(4, 0.0, 4.0);
        let sigma = vec![0.0, 50.0, 0.0, 0.0];
        let color = vec![[1.0, 0.0, 0.0]; 4];
        let feature = vec![0.0; 4];
        let r = composite(
            &SampleValues {
                sigma: &sigma,
                color: &color,
                feature: &feature,
                dim: 1,
            },
            &s,
            [0.0; 3],
        );
        assert!((r.weights[1] - (1.0 - libm::exp(-50.0))).abs() < 1e-15);
        assert!((r.depth - 1.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_bounds_pixel_is_rejected() {
        use crate::scenegen::Intrinsics;
        let cam = Camera::new(crate::math::Pose::IDENTITY, Intrinsics::from_fov(8, 6, 1.0)).unwrap();
        let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
        assert!(generate_rays(&cam, &[(6, 0)], &bbox).is_err());
        assert_eq!(generate_rays(&cam, &[(5, 7)], &bbox).unwrap().len(), 1);
    }
}
