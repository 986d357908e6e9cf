#![allow(dead_code)]

use openfield_core::benchmark::{sphere_cameras, three_class_scene};
use openfield_core::field::{FieldConfig, FieldParams, Grid};
use openfield_core::rng::{self, StreamRng};
use openfield_core::scenegen::{encode_frames, generate_scene, render_views, Codebook, Intrinsics, NoiseModel, PosedFrame};
use openfield_core::{Aabb, Vec3};
use rand::Rng;

pub fn rng(seed: u64) -> StreamRng {
    rng::stream(seed, "tests", 0)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn unit_box() -> Aabb {
    Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0))
}

fn fill(grid: &mut Grid, lo: f64, hi: f64, r: &mut StreamRng) {
    for v in grid.data.iter_mut() {
        *v = r.random_range(lo..hi);
    }
}

/// Field with random raw values; the feature lattice has its own resolution.
pub fn random_params(res: [usize; 3], feature_res: [usize; 3], dim: usize, seed: u64) -> FieldParams {
    let mut r = rng(seed);
    let mut density = Grid::filled(res, 1, 0.0);
    let mut color = Grid::filled(res, 3, 0.0);
    let mut feature = Grid::filled(feature_res, dim, 0.0);
    fill(&mut density, -2.0, 2.0, &mut r);
    fill(&mut color, -2.0, 2.0, &mut r);
    fill(&mut feature, -1.0, 1.0, &mut r);
    FieldParams {
        bbox: unit_box(),
        density,
        color,
        feature,
        background: [0.1, 0.2, 0.3],
    }
}

pub fn random_point(bbox: &Aabb, r: &mut StreamRng) -> Vec3 {
    let s = bbox.size();
    bbox.min + Vec3::new(r.random::<f64>() * s.x, r.random::<f64>() * s.y, r.random::<f64>() * s.z)
}

/// Small clean-feature frames of the three-class scene.
pub fn small_frames(n_views: usize, dim: usize, width: usize, height: usize) -> (Vec<PosedFrame>, Codebook) {
    let scene = generate_scene(&three_class_scene()).unwrap();
    let cams = sphere_cameras(Vec3::new(0.0, 0.0, 0.4), 2.5, n_views, Intrinsics::from_fov(width, height, 1.0)).unwrap();
    let mut frames = render_views(&scene, &cams);
    let codebook = Codebook::generate(scene.n_classes, dim, 7).unwrap();
    encode_frames(&mut frames, &codebook, &NoiseModel::clean()).unwrap();
    (frames, codebook)
}

pub fn field_config(bbox: Aabb, res: usize, dim: usize) -> FieldConfig {
    FieldConfig::uniform(bbox, res, dim)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
