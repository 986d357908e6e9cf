use openfield_core::eval::{assign_labels, score, split_subsets, EmptyClassRule, QuerySet, Subset};
use openfield_core::fusion::{finalize, welford_update, Estimator, PointStats};
use openfield_core::render::{composite, SampleValues, Samples};
use openfield_core::train::{huber, huber_grad, neg_cosine_with_grad};
use openfield_core::viewsel::{lookat, normalize_uncertainty};
use openfield_core::Vec3;
use proptest::prelude::*;

fn vec3() -> impl Strategy<Value = Vec3> {
    (-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn unit_rows(k: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0..1.0f64, dim), k).prop_filter_map("zero row", |rows| {
        rows.into_iter()
            .map(|r| {
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                (n > 1e-3).then(|| r.into_iter().map(|v| v / n).collect())
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn quadrature_weights_are_a_sub_probability(
        sigma in prop::collection::vec(0.0..200.0f64, 1..64),
        step in 1e-4..0.2f64,
    ) {
        let n = sigma.len();
        let samples = Samples {
            t: (0..n).map(|k| (k as f64 + 0.5) * step).collect(),
            delta: vec![step; n],
        };
        let color = vec![[0.3, 0.6, 0.9]; n];
        let feature = vec![1.0; n];
        let r = composite(&SampleValues { sigma: &sigma, color: &color, feature: &feature, dim: 1 }, &samples, [0.0; 3]);
        prop_assert!(r.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        prop_assert!(r.weights.iter().sum::<f64>() <= 1.0 + 1e-12);
        prop_assert!(r.transmittance.windows(2).all(|p| p[1] <= p[0]));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.opacity));
    }

    #[test]
    fn welford_agrees_with_two_pass(
        xs in prop::collection::vec(prop::collection::vec(-100.0..100.0f64, 3), 2..200),
    ) {
        let mut s = PointStats::new(3);
        for x in &xs {
            welford_update(&mut s, x);
        }
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..3).map(|i| xs.iter().map(|x| x[i]).sum::<f64>() / n).collect();
        let f = finalize(&s, Estimator::Population);
        for i in 0..3 {
            prop_assert!((s.mean[i] - mean[i]).abs() < 1e-9);
            for j in 0..3 {
                let c = xs.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum::<f64>() / n;
                prop_assert!((f.covariance[i * 3 + j] - c).abs() < 1e-9 * (1.0 + c.abs()));
            }
        }
        prop_assert!(f.uncertainty() >= 0.0);
    }

    #[test]
    fn rank_normalization_is_bounded_and_order_preserving(
        vals in prop::collection::vec(-700.0..700.0f64, 1..100),
    ) {
        let valid = vec![true; vals.len()];
        let u = normalize_uncertainty(&vals, &valid).unwrap();
        prop_assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
        for i in 0..vals.len() {
            for j in 0..vals.len() {
                if vals[i] < vals[j] {
                    prop_assert!(u[i] < u[j]);
                }
            }
        }
    }

    #[test]
    fn lookat_is_rigid(eye in vec3(), target in vec3()) {
        prop_assume!((target - eye).norm() > 1e-3);
        let pose = lookat(eye, target, Vec3::Z).unwrap();
        prop_assert!(pose.is_rigid(1e-9));
        prop_assert!((pose.forward() - (target - eye).normalized()).norm() < 1e-9);
    }

    #[test]
    fn assignment_ignores_positive_feature_scale(
        queries in unit_rows(5, 6),
        feats in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 6), 1..50),
        scale in 1e-3..1e3f64,
    ) {
        let q = QuerySet {
            labels: (0..5).map(|k| k.to_string()).collect(),
            embeddings: queries,
            subsets: vec![Subset::Head; 5],
        };
        let scaled: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().map(|v| v * scale).collect()).collect();
        prop_assert_eq!(assign_labels(&feats, &q).labels, assign_labels(&scaled, &q).labels);
    }

    #[test]
    fn subsets_partition_labels_evenly(counts in prop::collection::vec(0usize..1000, 0..120)) {
        let s = split_subsets(&counts);
        let sizes: Vec<usize> = [Subset::Head, Subset::Common, Subset::Tail]
            .iter()
            .map(|k| s.iter().filter(|x| *x == k).count())
            .collect();
        prop_assert_eq!(sizes.iter().sum::<usize>(), counts.len());
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert!(sizes[0] >= sizes[1] && sizes[1] >= sizes[2]);
    }

    #[test]
    fn metrics_stay_in_unit_interval(
        pairs in prop::collection::vec((0usize..4, -1i32..4), 1..300),
    ) {
        let q = QuerySet {
            labels: (0..4).map(|k| k.to_string()).collect(),
            embeddings: vec![vec![1.0]; 4],
            subsets: split_subsets(&[4, 3, 2, 1]),
        };
        let (pred, gt): (Vec<usize>, Vec<i32>) = pairs.into_iter().unzip();
        for rule in [EmptyClassRule::Exclude, EmptyClassRule::IncludeAsZero] {
            let r = score(&pred, &gt, &q, rule).unwrap();
            for m in [r.miou_all, r.macc_all, r.miou_head, r.miou_common, r.miou_tail, r.macc_tail] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn huber_is_continuous_and_its_gradient_bounded(e in -5.0..5.0f64, beta in 0.01..2.0f64) {
        prop_assert!(huber(e, beta) >= 0.0);
        prop_assert!(huber_grad(e, beta).abs() <= 1.0);
        let h = 1e-6;
        let fd = (huber(e + h, beta) - huber(e - h, beta)) / (2.0 * h);
        prop_assert!((fd - huber_grad(e, beta)).abs() < 1e-3);
    }

    #[test]
    fn cosine_gradient_is_orthogonal_to_the_rendered_feature(
        a in prop::collection::vec(-1.0..1.0f64, 5),
        b in prop::collection::vec(-1.0..1.0f64, 5),
    ) {
        let mut g = vec![0.0; 5];
        if let Some(v) = neg_cosine_with_grad(&a, &b, &mut g) {
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&v));
            let radial: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
            prop_assert!(radial.abs() < 1e-9);
        }
    }
}
