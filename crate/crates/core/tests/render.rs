mod common;

use common::{rng, small_frames};
use openfield_core::benchmark::sphere_cameras;
use openfield_core::field::{init_params, FieldConfig};
use openfield_core::render::{
    composite, generate_rays, render_image, sample_along_ray, Ray, RenderConfig, RenderPlanes, SampleValues, Samples,
};
use openfield_core::scenegen::{
    encode_frames, generate_scene, render_views, Camera, Codebook, Intrinsics, NoiseModel, Primitive, SceneSpec, Shape,
};
use openfield_core::train::{train, TrainConfig};
use openfield_core::viewsel::lookat;
use openfield_core::{Aabb, Vec3};
use rand::Rng;

fn camera(eye: Vec3, target: Vec3, w: usize, h: usize) -> Camera {
    Camera::new(lookat(eye, target, Vec3::Z).unwrap(), Intrinsics::from_fov(w, h, 1.0)).unwrap()
}

#[test]
fn principal_ray_follows_the_optical_axis() {
    let cam = camera(Vec3::new(2.0, 1.0, 0.5), Vec3::ZERO, 9, 7);
    let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
    let rays = generate_rays(&cam, &[(3, 4)], &bbox).unwrap();
    assert!((rays[0].direction - cam.pose.forward()).norm() < 1e-12);
    let all: Vec<(usize, usize)> = (0..7).flat_map(|r| (0..9).map(move |c| (r, c))).collect();
    for ray in generate_rays(&cam, &all, &bbox).unwrap() {
        assert!((ray.direction.norm() - 1.0).abs() < 1e-12);
        assert!(ray.near < ray.far);
    }
}

#[test]
fn rays_reproject_onto_their_pixels_at_ground_truth_depth() {
    let (frames, _) = small_frames(4, 4, 32, 24);
    for f in &frames {
        let pixels: Vec<(usize, usize)> = (0..24).flat_map(|r| (0..32).map(move |c| (r, c))).collect();
        let bbox = Aabb::new(Vec3::new(-1.0, -1.0, -0.4), Vec3::new(1.0, 1.0, 1.2));
        for ray in generate_rays(&f.camera, &pixels, &bbox).unwrap() {
            let px = ray.pixel.unwrap();
            let z = *f.depth.get(px.row, px.col);
            if z == 0.0 {
                continue;
            }
            let t = z / ray.direction.dot(f.camera.pose.forward());
            let p = f.camera.project(ray.origin + ray.direction * t).unwrap();
            assert!((p.u - px.col as f64).abs() < 1e-6 && (p.v - px.row as f64).abs() < 1e-6);
            assert!((p.depth - z).abs() < 1e-9);
        }
    }
}

#[test]
fn sample_spacing() {
    let ray = Ray::new(Vec3::ZERO, Vec3::X, 0.0, 4.0).unwrap();
    let s = sample_along_ray(&ray, 4, false, &mut rng(0));
    assert_eq!(s.t, vec![0.5, 1.5, 2.5, 3.5]);
    assert_eq!(s.delta, vec![1.0; 4]);
    let ray = Ray::new(Vec3::ZERO, Vec3::X, 0.3, 2.9).unwrap();
    let s = sample_along_ray(&ray, 13, false, &mut rng(0));
    assert!((s.delta.iter().sum::<f64>() - 2.6).abs() < 1e-12);
}

#[test]
fn stratified_samples_stay_in_their_bins() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let near = r.random_range(0.0..2.0);
        let far = near + r.random_range(0.1..5.0);
        let ray = Ray::new(Vec3::ZERO, Vec3::Y, near, far).unwrap();
        let n = r.random_range(2..40);
        let s = sample_along_ray(&ray, n, true, &mut r);
        let w = (far - near) / n as f64;
        for (k, t) in s.t.iter().enumerate() {
            let lo = near + k as f64 * w;
            assert!(*t >= lo - 1e-12 && *t <= lo + w + 1e-12);
        }
        assert!(s.delta.iter().all(|d| *d > 0.0));
        assert!((s.delta.iter().sum::<f64>() - (far - near)).abs() <= w + 1e-12);
    }
}

/// Error-free addition: returns `(s, e)` with `s + e == a + b` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Weights from a double-double running optical depth and the product form
/// of the transmittance.
fn precise_weights(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let (mut hi, mut lo) = (0.0f64, 0.0f64);
    let mut out = Vec::with_capacity(sigma.len());
    for (s, d) in sigma.iter().zip(delta) {
        let t_k = (-hi).exp() * (-lo).exp();
        let tau = s * d;
        out.push(t_k * -(-tau).exp_m1());
        let (h, e) = two_sum(hi, tau);
        hi = h;
        lo += e;
    }
    out
}

struct RandomRay {
    samples: Samples,
    sigma: Vec<f64>,
    color: Vec<[f64; 3]>,
    feature: Vec<f64>,
}

fn random_ray(r: &mut impl Rng, dim: usize) -> RandomRay {
    let n = r.random_range(2..64);
    let near = r.random_range(0.0..1.0);
    let far = near + r.random_range(0.5..4.0);
    let ray = Ray::new(Vec3::ZERO, Vec3::Z, near, far).unwrap();
    let samples = sample_along_ray(&ray, n, true, r);
    let sigma = (0..n)
        .map(|_| if r.random_bool(0.3) { 0.0 } else { r.random_range(0.0..20.0) })
        .collect();
    let color = (0..n).map(|_| [r.random(), r.random(), r.random()]).collect();
    let feature = (0..n * dim).map(|_| r.random_range(-1.0..1.0)).collect();
    RandomRay {
        samples,
        sigma,
        color,
        feature,
    }
}

fn values<'a>(rr: &'a RandomRay, dim: usize) -> SampleValues<'a> {
    SampleValues {
        sigma: &rr.sigma,
        color: &rr.color,
        feature: &rr.feature,
        dim,
    }
}

#[test]
fn transparent_and_opaque_limits() {
    let ray = Ray::new(Vec3::ZERO, Vec3::Z, 0.0, 4.0).unwrap();
    let s = sample_along_ray(&ray, 4, false, &mut rng(0));
    let color = vec![[0.9, 0.1, 0.4]; 4];
    let feature = vec![1.0; 8];
    let clear = composite(
        &SampleValues {
            sigma: &[0.0; 4],
            color: &color,
            feature: &feature,
            dim: 2,
        },
        &s,
        [0.3, 0.3, 0.3],
    );
    assert_eq!((clear.color, clear.feature.clone(), clear.opacity), ([0.3; 3], vec![0.0; 2], 0.0));
    let wall = composite(
        &SampleValues {
            sigma: &[0.0, 0.0, 50.0, 0.0],
            color: &color,
            feature: &feature,
            dim: 2,
        },
        &s,
        [0.3, 0.3, 0.3],
    );
    assert!((wall.weights[2] - (1.0 - (-50.0f64).exp())).abs() < 1e-15);
    assert!((wall.depth - 2.5).abs() < 1e-12);
}

#[test]
fn weights_match_high_precision_quadrature() {
    let mut r = rng(2);
    for _ in 0..2000 {
        let rr = random_ray(&mut r, 1);
        let out = composite(&values(&rr, 1), &rr.samples, [0.0; 3]);
        for (a, b) in out.weights.iter().zip(precise_weights(&rr.sigma, &rr.samples.delta)) {
            assert!((a - b).abs() < 1e-13, "{a} vs {b}");
        }
    }
}

#[test]
fn quadrature_invariants_on_random_rays() {
    let mut r = rng(3);
    let dim = 3;
    for _ in 0..10_000 {
        let rr = random_ray(&mut r, dim);
        let out = composite(&values(&rr, dim), &rr.samples, [0.2, 0.5, 0.7]);
        assert!(out.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(out.opacity <= 1.0 + 1e-15);
        assert!(out.transmittance.windows(2).all(|t| t[1] <= t[0]));

        // split every sample into two half-width samples with the same values
        let mut t = Vec::new();
        let mut delta = Vec::new();
        let mut sigma = Vec::new();
        let mut color = Vec::new();
        let mut feature = Vec::new();
        for k in 0..rr.samples.len() {
            let d = rr.samples.delta[k] * 0.5;
            for half in 0..2 {
                t.push(rr.samples.t[k] + half as f64 * d);
                delta.push(d);
                sigma.push(rr.sigma[k]);
                color.push(rr.color[k]);
                feature.extend_from_slice(&rr.feature[k * dim..(k + 1) * dim]);
            }
        }
        let split = composite(
            &SampleValues {
                sigma: &sigma,
                color: &color,
                feature: &feature,
                dim,
            },
            &Samples { t, delta },
            [0.2, 0.5, 0.7],
        );
        for c in 0..3 {
            assert!((split.color[c] - out.color[c]).abs() < 1e-10);
        }
        assert!((split.opacity - out.opacity).abs() < 1e-10);
        for (a, b) in split.feature.iter().zip(&out.feature) {
            assert!((a - b).abs() < 1e-10);
        }

        let scaled: Vec<f64> = rr.feature.iter().map(|v| v * 4.0).collect();
        let lin = composite(
            &SampleValues {
                sigma: &rr.sigma,
                color: &rr.color,
                feature: &scaled,
                dim,
            },
            &rr.samples,
            [0.2, 0.5, 0.7],
        );
        for (a, b) in lin.feature.iter().zip(&out.feature) {
            assert_eq!(*a, 4.0 * b);
        }
    }
}

#[test]
fn untrained_field_renders_nearly_transparent_and_deterministically() {
    let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
    let params = init_params(&FieldConfig::uniform(bbox, 8, 4), 0).unwrap();
    let cam = camera(Vec3::new(2.5, 0.0, 0.0), Vec3::ZERO, 16, 12);
    let cfg = RenderConfig {
        n_samples: 32,
        stratified: false,
    };
    let a = render_image(&params, &cam, &cfg, RenderPlanes::ALL, 0);
    assert!(a.opacity.data.iter().all(|o| *o < 0.05));
    assert_eq!(a, render_image(&params, &cam, &cfg, RenderPlanes::ALL, 99));
}

#[test]
fn fitted_box_depth_is_within_two_voxels() {
    let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
    let spec = SceneSpec {
        bbox,
        primitives: vec![Primitive {
            shape: Shape::Box {
                center: Vec3::ZERO,
                size: Vec3::splat(0.8),
            },
            class_id: 0,
            albedo: [0.8, 0.3, 0.2],
        }],
        background_color: [0.0; 3],
        seed: 0,
    };
    let scene = generate_scene(&spec).unwrap();
    let k = Intrinsics::from_fov(32, 24, 1.0);
    let cams = sphere_cameras(Vec3::ZERO, 2.5, 24, k).unwrap();
    let mut frames = render_views(&scene, &cams);
    encode_frames(&mut frames, &Codebook::generate(1, 4, 0).unwrap(), &NoiseModel::clean()).unwrap();
    let cfg = TrainConfig {
        iterations: 300,
        batch_rays: 512,
        learning_rate: 0.1,
        lambda_depth: 1.0,
        n_samples: 64,
        border_margin: 2,
        ..TrainConfig::default()
    };
    let field = FieldConfig::uniform(bbox, 24, 4);
    let (params, _) = train(&frames, &field, &cfg).unwrap();
    let cam = camera(Vec3::new(0.3, -2.5, 0.2), Vec3::ZERO, 33, 25);
    let img = render_image(
        &params,
        &cam,
        &RenderConfig {
            n_samples: 128,
            stratified: false,
        },
        RenderPlanes::ALL,
        0,
    );
    let gt = render_views(&scene, &[cam]);
    let (d, g) = (*img.depth.unwrap().get(12, 16), *gt[0].depth.get(12, 16));
    assert!((d - g).abs() < 2.0 * params.voxel_size(), "{d} vs {g}");
}
