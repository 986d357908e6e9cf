mod common;

use common::{random_point, rng, small_frames, unit_box};
use openfield_core::benchmark::three_class_scene;
use openfield_core::field::{init_params, FieldConfig, FieldParams};
use openfield_core::fusion::{fuse, FusionConfig};
use openfield_core::rng::unit_vector;
use openfield_core::scenegen::{
    generate_scene, sample_point_cloud, Camera, Codebook, Intrinsics, NoiseModel, WORLD_UP,
};
use openfield_core::viewsel::{
    evaluate_position, lookat, normalize_uncertainty, propose_views, realize_views, sample_targets, Rejection,
    ViewSelConfig,
};
use openfield_core::Vec3;
use rand::Rng;

#[test]
fn lookat_frames_are_rigid_and_centre_the_target() {
    let mut r = rng(0);
    let k = Intrinsics::from_fov(65, 49, 1.0);
    for _ in 0..500 {
        let eye = random_point(&unit_box(), &mut r) * 3.0;
        let target = random_point(&unit_box(), &mut r);
        let pose = lookat(eye, target, WORLD_UP).unwrap();
        assert!(pose.is_rigid(1e-12));
        assert!((pose.determinant() - 1.0).abs() < 1e-12);
        assert!((pose.forward() - (target - eye).normalized()).norm() < 1e-12);
        assert!(pose.right().dot(WORLD_UP).abs() < 1e-12);
        let q = Camera::new(pose, k).unwrap().project(target).unwrap();
        assert!((q.u - 32.0).abs() < 1e-9 && (q.v - 24.0).abs() < 1e-9);
        assert!((q.depth - (target - eye).norm()).abs() < 1e-12);
    }
    let straight_up = lookat(Vec3::ZERO, Vec3::new(0.0, 0.0, 2.0), WORLD_UP).unwrap();
    assert!(straight_up.is_rigid(1e-12));
}

#[test]
fn rank_normalization_ignores_monotone_transforms() {
    let mut r = rng(1);
    let log_u: Vec<f64> = (0..200).map(|_| r.random_range(-20.0..5.0)).collect();
    let valid: Vec<bool> = (0..200).map(|i| i % 7 != 0).collect();
    let a = normalize_uncertainty(&log_u, &valid).unwrap();
    let shifted: Vec<f64> = log_u.iter().map(|v| 3.0 * v.exp() + 1.0).collect();
    assert_eq!(a, normalize_uncertainty(&shifted, &valid).unwrap());
    assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    let mut ranks: Vec<f64> = a.iter().zip(&valid).filter(|(_, ok)| **ok).map(|(v, _)| *v).collect();
    ranks.sort_by(f64::total_cmp);
    let n = ranks.len() - 1;
    assert!(ranks.iter().enumerate().all(|(i, v)| (v - i as f64 / n as f64).abs() < 1e-15));
}

#[test]
fn accepted_frequencies_follow_normalized_uncertainty() {
    let u = [0.1, 0.4, 1.0, 0.0, 0.5];
    let n = 40_000;
    let draw = sample_targets(&u, n, &mut rng(2));
    assert!(!draw.exhausted);
    let total: f64 = u.iter().sum();
    let mut counts = [0usize; 5];
    for &i in &draw.indices {
        counts[i] += 1;
    }
    for (c, w) in counts.iter().zip(u) {
        let p = w / total;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((*c as f64 - n as f64 * p).abs() <= 3.0 * sd + 1e-9, "{c} vs {}", n as f64 * p);
    }
}

/// Unit-box field that is empty except for a dense ball of radius 0.3 at the
/// origin.
fn blob_field() -> FieldParams {
    let mut p = init_params(&FieldConfig::uniform(unit_box(), 33, 2), 0).unwrap();
    let grid = p.density.clone();
    for k in 0..33 {
        for j in 0..33 {
            for i in 0..33 {
                if p.node_position(&grid, i, j, k).norm() < 0.3 {
                    p.density.node_mut(i, j, k)[0] = 50.0;
                }
            }
        }
    }
    p
}

#[test]
fn rejection_reasons() {
    let p = blob_field();
    let cfg = ViewSelConfig::default();
    let target = Vec3::new(0.9, 0.0, 0.0);
    assert_eq!(evaluate_position(&p, Vec3::ZERO, target, &cfg), Rejection::InsideGeometry);
    assert_eq!(evaluate_position(&p, Vec3::new(-0.9, 0.0, 0.0), target, &cfg), Rejection::OccludedTarget);
    assert_eq!(evaluate_position(&p, Vec3::new(0.9, 0.9, 0.0), target, &cfg), Rejection::None);
    let lenient = ViewSelConfig {
        check_transmittance: false,
        ..cfg
    };
    assert_eq!(evaluate_position(&p, Vec3::new(-0.9, 0.0, 0.0), target, &lenient), Rejection::None);
}

#[test]
fn raising_the_density_threshold_never_adds_rejections() {
    let p = blob_field();
    let mut r = rng(3);
    let target = Vec3::new(0.0, 0.0, 0.8);
    for _ in 0..500 {
        let x = random_point(&unit_box(), &mut r);
        let mut last_inside = true;
        for threshold in [0.5, 2.0, 10.0, 40.0] {
            let cfg = ViewSelConfig {
                density_threshold: threshold,
                ..ViewSelConfig::default()
            };
            let inside = evaluate_position(&p, x, target, &cfg) == Rejection::InsideGeometry;
            assert!(last_inside || !inside);
            last_inside = inside;
        }
    }
}

#[test]
fn proposals_are_deterministic_and_consistent() {
    let scene = generate_scene(&three_class_scene()).unwrap();
    let (frames, book) = small_frames(12, 3, 32, 24);
    let mut frames = frames;
    let noise = NoiseModel {
        sigma: 0.2,
        seed: 1,
        ..NoiseModel::clean()
    };
    openfield_core::scenegen::encode_frames(&mut frames, &book, &noise).unwrap();
    let cloud = sample_point_cloud(&scene, 400, 1).unwrap();
    let stats = fuse(&cloud, &frames, &FusionConfig::default()).unwrap();
    let params = init_params(&FieldConfig::uniform(scene.bbox, 16, 3), 0).unwrap();
    let cfg = ViewSelConfig {
        n_proposals: 12,
        ..ViewSelConfig::for_bbox(&scene.bbox)
    };
    let a = propose_views(&params, &cloud, &stats, &cfg).unwrap();
    assert_eq!(a, propose_views(&params, &cloud, &stats, &cfg).unwrap());
    assert_eq!(a.len(), 12);
    for v in &a {
        assert_eq!(v.target, cloud.positions[v.source_point]);
        assert!(stats[v.source_point].count >= 2);
        assert!(((v.position - v.target).norm() - cfg.offset_distance).abs() < 6.0 * cfg.position_noise_std);
        assert_eq!(v.rejection, evaluate_position(&params, v.position, v.target, &cfg));
        assert_eq!(v.accepted, v.rejection == Rejection::None);
        assert!((v.pose.forward() - (v.target - v.position).normalized()).norm() < 1e-12);
    }

    let k = Intrinsics::from_fov(16, 12, 1.0);
    assert!(realize_views(&scene, &[], &book, &noise, k).unwrap().is_empty());
    let realized = realize_views(&scene, &a, &book, &noise, k).unwrap();
    assert_eq!(realized.len(), a.iter().filter(|v| v.accepted).count());
    for f in &realized {
        f.validate().unwrap();
        assert_eq!(f.features.as_ref().unwrap().dim, 3);
    }
}

#[test]
fn realized_views_see_their_targets() {
    let scene = generate_scene(&three_class_scene()).unwrap();
    let book = Codebook::generate(scene.n_classes, 4, 0).unwrap();
    let params = init_params(&FieldConfig::uniform(scene.bbox, 8, 4), 0).unwrap();
    let cloud = sample_point_cloud(&scene, 50, 5).unwrap();
    let mut r = rng(4);
    let proposals: Vec<_> = (0..20)
        .map(|i| {
            let target = cloud.positions[i];
            let position = target + unit_vector(&mut r) * 0.05;
            let pose = lookat(position, target, WORLD_UP).unwrap();
            openfield_core::viewsel::ViewProposal {
                target,
                position,
                pose,
                source_point: i,
                accepted: evaluate_position(&params, position, target, &ViewSelConfig::default()) == Rejection::None,
                rejection: Rejection::None,
            }
        })
        .collect();
    let frames = realize_views(&scene, &proposals, &book, &NoiseModel::clean(), Intrinsics::from_fov(9, 9, 0.5)).unwrap();
    assert_eq!(frames.len(), 20);
    for (f, p) in frames.iter().zip(&proposals) {
        let centre = *f.depth.get(4, 4);
        if !scene.is_occupied(p.position) {
            assert!(centre > 0.0 && centre <= 0.05 + 1e-9);
        }
    }
}
