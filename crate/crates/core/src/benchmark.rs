//! Reference scenes and small end-to-end runs used by the acceptance suite
//! and the `ablate` command.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::eval::{
    assign_labels, build_query_set, class_labels, score, segment_render_project, segment_sample, EmbeddingSource,
    EmptyClassRule, SegmentationResult,
};
use crate::field::FieldConfig;
use crate::fusion::{error_and_correlation, fuse, ErrorDiagnostic, FusionConfig};
use crate::math::{Aabb, Vec3};
use crate::render::RenderConfig;
use crate::rng;
use crate::scenegen::{
    encode_frames, generate_scene, make_trajectory, render_views, sample_point_cloud, Camera, Codebook, Intrinsics,
    NoiseModel, Primitive, SceneSpec, Shape, TrajectoryKind, WORLD_UP,
};
use crate::train::{train, TrainConfig};
use crate::viewsel::lookat;

fn prim(shape: Shape, class_id: i32, albedo: [f64; 3]) -> Primitive {
    Primitive { shape, class_id, albedo }
}

fn sphere(x: f64, y: f64, z: f64, radius: f64) -> Shape {
    Shape::Sphere {
        center: Vec3::new(x, y, z),
        radius,
    }
}

fn cuboid(center: [f64; 3], size: [f64; 3]) -> Shape {
    Shape::Box {
        center: center.into(),
        size: size.into(),
    }
}

/// `n` cameras on a Fibonacci sphere around `center`, all looking at it.
pub fn sphere_cameras(center: Vec3, radius: f64, n: usize, intrinsics: Intrinsics) -> Result<Vec<Camera>> {
    let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
    (0..n)
        .map(|k| {
            let z = 1.0 - 2.0 * (k as f64 + 0.5) / n as f64;
            let r = libm::sqrt(1.0 - z * z);
            let theta = golden * k as f64;
            let eye = center + Vec3::new(r * libm::cos(theta), r * libm::sin(theta), z) * radius;
            Camera::new(lookat(eye, center, WORLD_UP)?, intrinsics)
        })
        .collect()
}

/// Three floating, mutually unoccluding objects of three classes.
pub fn three_class_scene() -> SceneSpec {
    SceneSpec {
        bbox: Aabb {
            min: Vec3::new(-1.0, -1.0, -0.4),
            max: Vec3::new(1.0, 1.0, 1.2),
        },
        primitives: vec![
            prim(sphere(0.45, 0.0, 0.4, 0.3), 0, [0.6, 0.6, 0.5]),
            prim(sphere(-0.4, 0.35, 0.4, 0.3), 1, [0.8, 0.2, 0.2]),
            prim(cuboid([-0.2, -0.45, 0.4], [0.45, 0.45, 0.45]), 2, [0.2, 0.3, 0.8]),
        ],
        background_color: [0.0; 3],
        seed: 0,
    }
}

/// Six objects; even classes get clean features, odd classes noisy ones.
pub fn heterogeneous_noise_scene() -> SceneSpec {
    SceneSpec {
        bbox: Aabb {
            min: Vec3::new(-1.5, -1.5, -0.5),
            max: Vec3::new(1.5, 1.5, 1.5),
        },
        primitives: vec![
            prim(sphere(0.8, 0.0, 0.5, 0.3), 0, [0.7, 0.7, 0.6]),
            prim(sphere(0.4, 0.7, 0.5, 0.3), 1, [0.8, 0.2, 0.2]),
            prim(cuboid([-0.4, 0.7, 0.5], [0.45, 0.45, 0.45]), 2, [0.2, 0.3, 0.8]),
            prim(sphere(-0.8, 0.0, 0.5, 0.3), 3, [0.2, 0.7, 0.3]),
            prim(cuboid([-0.4, -0.7, 0.5], [0.45, 0.45, 0.45]), 4, [0.8, 0.8, 0.2]),
            prim(sphere(0.4, -0.7, 0.5, 0.3), 5, [0.6, 0.3, 0.7]),
        ],
        background_color: [0.0; 3],
        seed: 0,
    }
}

pub const CLEAN_SIGMA: f64 = 0.02;
pub const NOISY_SIGMA: f64 = 0.3;

/// Reference occlusion scene: an open-topped enclosure (class 0) hides a
/// small object (class 1) from cameras orbiting below the wall tops; three
/// more objects stand outside.
pub fn occlusion_scene() -> SceneSpec {
    let (cx, cy) = (0.6, 0.6);
    let (half, t, h) = (0.35, 0.06, 0.6);
    let wall = |c: [f64; 3], s: [f64; 3]| prim(cuboid(c, s), 0, [0.75, 0.7, 0.6]);
    SceneSpec {
        bbox: Aabb {
            min: Vec3::new(-1.5, -1.5, -0.3),
            max: Vec3::new(1.5, 1.5, 1.2),
        },
        primitives: vec![
            wall([cx + half, cy, h / 2.0], [t, 2.0 * half + t, h]),
            wall([cx - half, cy, h / 2.0], [t, 2.0 * half + t, h]),
            wall([cx, cy + half, h / 2.0], [2.0 * half - t - 1e-3, t, h]),
            wall([cx, cy - half, h / 2.0], [2.0 * half - t - 1e-3, t, h]),
            prim(sphere(cx, cy, 0.2, 0.18), 1, [0.9, 0.3, 0.1]),
            prim(sphere(-0.6, 0.4, 0.25, 0.25), 2, [0.2, 0.4, 0.9]),
            prim(cuboid([-0.4, -0.7, 0.2], [0.4, 0.4, 0.4]), 3, [0.3, 0.8, 0.3]),
            prim(cuboid([0.7, -0.6, 0.15], [0.5, 0.3, 0.3]), 4, [0.8, 0.8, 0.2]),
        ],
        background_color: [0.0; 3],
        seed: 0,
    }
}

/// Original trajectory for [`occlusion_scene`]: a horizontal orbit whose
/// height keeps the enclosure interior out of sight.
pub fn occlusion_trajectory() -> TrajectoryKind {
    TrajectoryKind::Orbit {
        radius: 2.6,
        height: 0.0,
    }
}

pub fn benchmark_intrinsics() -> Intrinsics {
    Intrinsics::from_fov(64, 48, 1.0)
}

/// Correlation of fused-feature uncertainty with fused-feature error on
/// [`heterogeneous_noise_scene`], using ground-truth depth.
pub fn run_correlation(seed: u64, n_views: usize, n_points: usize, dim: usize) -> Result<ErrorDiagnostic> {
    let scene = generate_scene(&heterogeneous_noise_scene())?;
    let center = scene.centroid();
    let cameras = sphere_cameras(center, 3.0, n_views, benchmark_intrinsics())?;
    let mut frames = render_views(&scene, &cameras);
    let codebook = Codebook::generate(scene.n_classes, dim, rng::stream_seed(seed, "codebook", 0))?;
    let noise = NoiseModel {
        sigma: CLEAN_SIGMA,
        class_sigma: (0..scene.n_classes as i32)
            .map(|c| (c, if c % 2 == 0 { CLEAN_SIGMA } else { NOISY_SIGMA }))
            .collect(),
        border_corrupt: 0,
        seed: rng::stream_seed(seed, "noise", 0),
    };
    encode_frames(&mut frames, &codebook, &noise)?;
    let cloud = sample_point_cloud(&scene, n_points, rng::stream_seed(seed, "cloud", 0))?;
    let stats = fuse(&cloud, &frames, &FusionConfig::default())?;
    error_and_correlation(&stats, &cloud, &codebook)
}

/// Zero-noise end-to-end segmentation of [`three_class_scene`] from cameras
/// that jointly see every surface. Returns (sample, render-and-project).
pub fn run_three_class(seed: u64, iterations: usize) -> Result<(SegmentationResult, SegmentationResult)> {
    let scene = generate_scene(&three_class_scene())?;
    let dim = 16;
    let cameras = sphere_cameras(Vec3::new(0.0, 0.0, 0.4), 2.5, 40, benchmark_intrinsics())?;
    let mut frames = render_views(&scene, &cameras);
    let codebook = Codebook::generate(scene.n_classes, dim, rng::stream_seed(seed, "codebook", 0))?;
    encode_frames(&mut frames, &codebook, &NoiseModel::clean())?;
    let train_cfg = TrainConfig {
        iterations,
        learning_rate: 0.1,
        batch_rays: 512,
        n_samples: 64,
        seed: rng::stream_seed(seed, "train", 0),
        ..TrainConfig::default()
    };
    let (params, _) = train(&frames, &FieldConfig::uniform(scene.bbox, 32, dim), &train_cfg)?;
    let cloud = sample_point_cloud(&scene, 3000, rng::stream_seed(seed, "cloud", 0))?;
    let labels = class_labels(scene.n_classes);
    let (queries, _) = build_query_set(
        &labels,
        &cloud.class_counts(scene.n_classes),
        EmbeddingSource::Codebook(&codebook),
    )?;
    let sampled = segment_sample(&params, &cloud);
    let a = assign_labels(&sampled.features, &queries);
    let s = score(&a.labels, &cloud.class_ids, &queries, EmptyClassRule::Exclude)?;
    let render = RenderConfig {
        n_samples: 64,
        stratified: false,
    };
    let projected = segment_render_project(&params, &cameras, &cloud, 0.05, &render)?;
    let a = assign_labels(&projected.features, &queries);
    let rp = score(&a.labels, &cloud.class_ids, &queries, EmptyClassRule::Exclude)?;
    Ok((s, rp))
}

/// Cameras of the original occlusion trajectory.
pub fn occlusion_cameras(n_views: usize) -> Result<Vec<Camera>> {
    let scene = generate_scene(&occlusion_scene())?;
    make_trajectory(&scene, n_views, occlusion_trajectory(), benchmark_intrinsics(), 0)
}
