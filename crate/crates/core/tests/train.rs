mod common;

use common::{random_params, rel_err, rng, small_frames};
use openfield_core::benchmark::sphere_cameras;
use openfield_core::field::{FieldConfig, FieldGrads, FieldParams, Grid};
use openfield_core::render::{render_image, RenderConfig, RenderPlanes};
use openfield_core::scenegen::{
    encode_frames, generate_scene, render_views, Camera, Codebook, Image, Intrinsics, NoiseModel, PosedFrame,
    Primitive, SceneSpec, Shape,
};
use openfield_core::train::{
    evaluate_batch, frame_ray, huber, loss_depth, loss_open, loss_rgb, sample_ray_batch, train, AdamState, LossTerms,
    TrainConfig, TrainRay, Trainer,
};
use openfield_core::{Aabb, Pose, Vec3};
use rand::Rng;

fn blank_frame(width: usize, height: usize) -> PosedFrame {
    let camera = Camera::new(Pose::IDENTITY, Intrinsics::from_fov(width, height, 1.0)).unwrap();
    PosedFrame {
        camera,
        rgb: Image::filled(width, height, [0.5; 3]),
        depth: Image::filled(width, height, 1.0),
        semantics: Image::filled(width, height, 0),
        features: None,
    }
}

#[test]
fn margin_sampler_never_touches_the_border() {
    let frames = vec![blank_frame(640, 360), blank_frame(640, 360)];
    let cfg = TrainConfig {
        border_margin: 10,
        batch_rays: 10_000,
        ..TrainConfig::default()
    };
    let bbox = common::unit_box();
    let mut r = rng(0);
    for _ in 0..10 {
        for tr in sample_ray_batch(&frames, &cfg, &mut r, &bbox).unwrap() {
            let px = tr.ray.pixel.unwrap();
            assert!((10..350).contains(&px.row) && (10..630).contains(&px.col));
            assert!(tr.target.feature.is_none());
        }
    }
    let tiny = vec![blank_frame(20, 12)];
    assert!(sample_ray_batch(&tiny, &cfg, &mut r, &bbox).is_err());
}

#[test]
fn zero_margin_sampling_is_uniform() {
    let frames = vec![blank_frame(8, 6), blank_frame(8, 6)];
    let cfg = TrainConfig {
        border_margin: 0,
        batch_rays: 100_000,
        ..TrainConfig::default()
    };
    let batch = sample_ray_batch(&frames, &cfg, &mut rng(1), &common::unit_box()).unwrap();
    let mut counts = vec![0usize; 96];
    for tr in &batch {
        let p = tr.ray.pixel.unwrap();
        counts[p.frame * 48 + p.row * 8 + p.col] += 1;
    }
    let expected = 100_000.0 / 96.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 95 degrees of freedom; 0.999 quantile is about 144
    assert!(chi2 < 144.0, "chi2 = {chi2}");
}

#[test]
fn rgb_loss_matches_scalar_loop() {
    let mut r = rng(2);
    let rendered: Vec<[f64; 3]> = (0..500).map(|_| [r.random(), r.random(), r.random()]).collect();
    let target: Vec<[f64; 3]> = (0..500).map(|_| [r.random(), r.random(), r.random()]).collect();
    let mut sum = 0.0;
    for i in 0..500 {
        for c in 0..3 {
            sum += (target[i][c] - rendered[i][c]).powi(2);
        }
    }
    assert!((loss_rgb(&rendered, &target) - sum / 500.0).abs() < 1e-12);
    assert_eq!(loss_rgb(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]), 1.0);
}

#[test]
fn depth_and_open_losses() {
    let beta = 0.1;
    assert_eq!(huber(0.0, beta), 0.0);
    assert!((huber(beta, beta) - 0.5 * beta).abs() < 1e-15);
    assert!((huber(2.0 * beta, beta) - 1.5 * beta).abs() < 1e-15);
    let (l, n) = loss_depth(&[1.0, 2.0, 3.0], &[Some(1.0), None, Some(3.2)], beta);
    assert_eq!(n, 2);
    assert!((l - 0.5 * huber(0.2, beta)).abs() < 1e-15);

    let o = vec![0.2, -0.7, 0.4, 0.1];
    assert!((loss_open(&[o.clone()], &[Some(o.clone())]).value + 1.0).abs() < 1e-15);
    let five: Vec<f64> = o.iter().map(|v| 5.0 * v).collect();
    assert!((loss_open(&[five], &[Some(o.clone())]).value + 1.0).abs() < 1e-15);
    let perp = vec![0.7, 0.2, 0.0, 0.0];
    assert!(loss_open(&[perp], &[Some(o)]).value.abs() < 1e-15);
}

fn grid_mut(p: &mut FieldParams, which: usize) -> &mut Grid {
    match which {
        0 => &mut p.density,
        1 => &mut p.color,
        _ => &mut p.feature,
    }
}

fn fd_setup() -> (FieldParams, Vec<TrainRay>, TrainConfig) {
    let (frames, _) = small_frames(3, 4, 24, 18);
    let params = random_params([6, 6, 6], [5, 5, 5], 4, 31);
    let cfg = TrainConfig {
        border_margin: 2,
        batch_rays: 48,
        n_samples: 16,
        stratified: false,
        lambda_open: 0.7,
        lambda_depth: 0.3,
        ..TrainConfig::default()
    };
    let batch = sample_ray_batch(&frames, &cfg, &mut rng(3), &params.bbox).unwrap();
    (params, batch, cfg)
}

/// Central-difference check of each loss term on random touched lattice
/// values. The open-set oracle perturbs only feature lattices: its
/// compositing weights are held fixed, so density receives nothing from it.
#[test]
fn loss_gradients_match_finite_differences() {
    let (params, batch, cfg) = fd_setup();
    let terms = [
        LossTerms {
            rgb: true,
            depth: false,
            open: false,
        },
        LossTerms {
            rgb: false,
            depth: true,
            open: false,
        },
        LossTerms::OPEN_ONLY,
    ];
    let h = 1e-4;
    let mut r = rng(4);
    for t in terms {
        let mut g = FieldGrads::zeros_like(&params);
        evaluate_batch(&params, &batch, &cfg, t, 0, Some(&mut g));
        if t.open {
            assert!(g.density.data.iter().all(|v| *v == 0.0));
            assert!(g.color.data.iter().all(|v| *v == 0.0));
        }
        let mut touched = Vec::new();
        for which in 0..3 {
            let grid = [&g.density, &g.color, &g.feature][which];
            touched.extend((0..grid.data.len()).filter(|&i| grid.data[i].abs() > 1e-7).map(|i| (which, i)));
        }
        assert!(touched.len() >= 20);
        for _ in 0..25 {
            let (which, idx) = touched[r.random_range(0..touched.len())];
            let weight = if t.rgb { 1.0 } else if t.depth { cfg.lambda_depth } else { cfg.lambda_open };
            let loss = |p: &FieldParams| {
                let l = evaluate_batch(p, &batch, &cfg, t, 0, None);
                weight * (l.l_rgb + l.l_depth + l.l_open)
            };
            let mut plus = params.clone();
            let mut minus = params.clone();
            grid_mut(&mut plus, which).data[idx] += h;
            grid_mut(&mut minus, which).data[idx] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = [&g.density, &g.color, &g.feature][which].data[idx];
            assert!(rel_err(a, fd, 1e-6) < 1e-3, "{t:?} grid {which} idx {idx}: {a} vs {fd}");
        }
    }
}

#[test]
fn disabled_open_weight_leaves_features_untouched() {
    let (params, batch, cfg) = fd_setup();
    let cfg = TrainConfig {
        lambda_open: 0.0,
        ..cfg
    };
    let mut g = FieldGrads::zeros_like(&params);
    evaluate_batch(&params, &batch, &cfg, LossTerms::ALL, 0, Some(&mut g));
    assert!(g.feature.data.iter().all(|v| *v == 0.0));
    assert!(g.density.data.iter().any(|v| *v != 0.0));
}

#[test]
fn feature_only_step_leaves_density_and_color_bit_identical() {
    let (frames, _) = small_frames(3, 4, 24, 18);
    let params = random_params([6, 6, 6], [5, 5, 5], 4, 32);
    let cfg = TrainConfig {
        border_margin: 2,
        batch_rays: 128,
        n_samples: 16,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(params.clone(), cfg).unwrap();
    trainer.terms = LossTerms::OPEN_ONLY;
    let loss = trainer.step(&frames).unwrap();
    assert!(loss.n_open > 0 && loss.n_rgb == 0);
    assert_eq!(trainer.params.density.data, params.density.data);
    assert_eq!(trainer.params.color.data, params.color.data);
    assert_ne!(trainer.params.feature.data, params.feature.data);
}

#[test]
fn zero_gradient_adam_step_is_a_no_op() {
    let mut params = random_params([4, 4, 4], [4, 4, 4], 3, 33);
    let before = params.clone();
    let mut adam = AdamState::new(&params);
    let zero = FieldGrads::zeros_like(&params);
    for _ in 0..3 {
        adam.update(&mut params, &zero, &TrainConfig::default());
    }
    assert_eq!(params, before);
}

fn one_box_frames() -> (Vec<PosedFrame>, Aabb) {
    let bbox = Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0));
    let scene = generate_scene(&SceneSpec {
        bbox,
        primitives: vec![Primitive {
            shape: Shape::Box {
                center: Vec3::new(0.1, 0.0, -0.1),
                size: Vec3::new(0.8, 0.6, 0.7),
            },
            class_id: 0,
            albedo: [0.2, 0.7, 0.4],
        }],
        background_color: [0.0; 3],
        seed: 0,
    })
    .unwrap();
    let cams = sphere_cameras(Vec3::ZERO, 2.5, 16, Intrinsics::from_fov(32, 24, 1.0)).unwrap();
    let mut frames = render_views(&scene, &cams);
    encode_frames(&mut frames, &Codebook::generate(1, 4, 1).unwrap(), &NoiseModel::clean()).unwrap();
    (frames, bbox)
}

fn fit_config(lambda_depth: f64) -> TrainConfig {
    TrainConfig {
        iterations: 200,
        batch_rays: 256,
        learning_rate: 0.1,
        n_samples: 48,
        border_margin: 2,
        lambda_depth,
        ..TrainConfig::default()
    }
}

fn depth_mae(params: &FieldParams, frames: &[PosedFrame]) -> f64 {
    let (mut sum, mut n) = (0.0, 0);
    let cfg = RenderConfig {
        n_samples: 64,
        stratified: false,
    };
    for f in frames {
        let img = render_image(params, &f.camera, &cfg, RenderPlanes::ALL, 0);
        let depth = img.depth.unwrap();
        for (d, g) in depth.data.iter().zip(&f.depth.data) {
            if *g > 0.0 {
                sum += (d - g).abs();
                n += 1;
            }
        }
    }
    sum / n as f64
}

#[test]
fn fitting_one_box_reduces_loss_and_logs_exact_totals() {
    let (frames, bbox) = one_box_frames();
    let cfg = fit_config(0.1);
    let field = FieldConfig::uniform(bbox, 16, 4);
    let (a, log) = train(&frames, &field, &cfg).unwrap();
    for l in &log {
        let total = l.l_rgb + cfg.lambda_open * l.l_open + cfg.lambda_depth * l.l_depth;
        assert!((l.total - total).abs() < 1e-12);
        assert!(l.l_rgb >= 0.0 && (-1.0..=1.0).contains(&l.l_open));
    }
    let tail = log[log.len() - 10..].iter().map(|l| l.l_rgb).sum::<f64>() / 10.0;
    assert!(tail < 0.1 * log[0].l_rgb, "{tail} vs {}", log[0].l_rgb);
    let (b, _) = train(&frames, &field, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn depth_supervision_does_not_hurt_depth() {
    let (frames, bbox) = one_box_frames();
    let field = FieldConfig::uniform(bbox, 16, 4);
    let (with, _) = train(&frames, &field, &fit_config(0.1)).unwrap();
    let (without, _) = train(&frames, &field, &fit_config(0.0)).unwrap();
    let (a, b) = (depth_mae(&with, &frames[..4]), depth_mae(&without, &frames[..4]));
    assert!(a <= b, "{a} vs {b}");
}

#[test]
fn frame_rays_read_distance_targets() {
    let (frames, _) = small_frames(2, 4, 24, 18);
    let f = &frames[0];
    let tr = frame_ray(f, 0, 9, 12, &common::unit_box());
    let z = *f.depth.get(9, 12);
    assert!(z > 0.0);
    let cos = tr.ray.direction.dot(f.camera.pose.forward());
    assert!((tr.target.depth.unwrap() * cos - z).abs() < 1e-12);
    assert_eq!(tr.target.feature.as_ref().unwrap().len(), 4);
}
