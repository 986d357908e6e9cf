//! Ablation harness: sampled vs render-and-project features, depth
//! supervision, proposed novel views, and a random-camera control.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::eval::{
    assign_labels, build_query_set, class_labels, score, segment_render_project, segment_sample, EmbeddingSource,
    EmptyClassRule, QuerySet, SegmentInputs, SegmentationResult,
};
use crate::field::{FieldConfig, FieldParams};
use crate::fusion::{fuse, FusionConfig};
use crate::render::RenderConfig;
use crate::rng;
use crate::scenegen::{
    encode_features, generate_scene, make_trajectory, render_views, sample_point_cloud, uniform_in_box,
    Camera, Codebook, Intrinsics, LabeledPointCloud, NoiseModel, PosedFrame, Scene, SceneSpec, TrajectoryKind,
    WORLD_UP,
};
use crate::train::{train, TrainConfig};
use crate::viewsel::{lookat, propose_views, realize_views, ViewSelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Sampled,
    RenderProject,
    DepthSupervision,
    NovelViews,
    RandomViews,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Sampled,
        Variant::RenderProject,
        Variant::DepthSupervision,
        Variant::NovelViews,
        Variant::RandomViews,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sampled => "1_sampled",
            Variant::RenderProject => "2_render_project",
            Variant::DepthSupervision => "3_depth_supervision",
            Variant::NovelViews => "4_novel_views",
            Variant::RandomViews => "random_views",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct AblationConfig {
    pub scene: SceneSpec,
    pub n_views: usize,
    pub trajectory: TrajectoryKind,
    pub intrinsics: Intrinsics,
    pub feature_dim: usize,
    pub grid_res: usize,
    pub n_points: usize,
    pub noise: NoiseModel,
    /// Training settings of the depth-supervised variants; the first two
    /// variants use the same settings with `lambda_depth = 0`.
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub viewsel: ViewSelConfig,
    /// Samples per ray when rendering features for evaluation.
    pub eval_samples: usize,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let scene = crate::benchmark::occlusion_scene();
        let viewsel = ViewSelConfig::for_bbox(&scene.bbox);
        AblationConfig {
            n_views: 60,
            trajectory: crate::benchmark::occlusion_trajectory(),
            intrinsics: crate::benchmark::benchmark_intrinsics(),
            feature_dim: 16,
            grid_res: 32,
            n_points: 4000,
            noise: NoiseModel {
                sigma: 0.3,
                class_sigma: Vec::new(),
                border_corrupt: 4,
                seed: 0,
            },
            train: TrainConfig {
                iterations: 300,
                batch_rays: 512,
                learning_rate: 0.1,
                n_samples: 64,
                border_margin: 4,
                ..TrainConfig::default()
            },
            fusion: FusionConfig::default(),
            viewsel,
            eval_samples: 64,
            repetitions: 3,
            seed: 0,
            scene,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.intrinsics.validate()?;
        self.train.validate()?;
        self.viewsel.validate()?;
        if self.repetitions == 0 || self.n_views == 0 || self.n_points == 0 {
            return Err(Error::InvalidConfig(
                "repetitions, n_views and n_points must be positive".into(),
            ));
        }
        if self.feature_dim == 0 || self.grid_res < 2 || self.eval_samples < 2 {
            return Err(Error::InvalidConfig("feature_dim, grid_res or eval_samples too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub variant: Variant,
    /// One entry per repetition.
    pub miou: Vec<f64>,
    pub macc: Vec<f64>,
    /// Per repetition, per class; `None` for classes absent from both
    /// prediction and ground truth.
    pub class_iou: Vec<Vec<Option<f64>>>,
}

impl VariantScores {
    pub fn mean_miou(&self) -> f64 {
        mean(&self.miou)
    }

    pub fn mean_macc(&self) -> f64 {
        mean(&self.macc)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    /// In [`Variant::ALL`] order.
    pub variants: Vec<VariantScores>,
    /// Accepted proposals per repetition; the random control adds as many
    /// cameras.
    pub accepted_views: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Minimum mIoU gain of novel views over depth supervision, in points.
pub const NOVEL_VIEW_MARGIN: f64 = 2.0;

impl AblationReport {
    pub fn scores(&self, v: Variant) -> &VariantScores {
        self.variants.iter().find(|s| s.variant == v).expect("every variant is reported")
    }

    /// ① ≤ ② ≤ ③ ≤ ④ on mean mIoU.
    pub fn ordering_holds(&self) -> bool {
        let m: Vec<f64> = Variant::ALL[..4].iter().map(|v| self.scores(*v).mean_miou()).collect();
        m.windows(2).all(|w| w[0] <= w[1])
    }

    /// ④ − ③ in mIoU points.
    pub fn novel_view_gain(&self) -> f64 {
        100.0 * (self.scores(Variant::NovelViews).mean_miou() - self.scores(Variant::DepthSupervision).mean_miou())
    }

    pub fn random_below_depth(&self) -> bool {
        self.scores(Variant::RandomViews).mean_miou() < self.scores(Variant::DepthSupervision).mean_miou()
    }
}

/// Random control cameras: positions uniform in the scene box, with no check
/// against solid geometry, each looking at a uniform point of the box.
pub fn random_cameras(scene: &Scene, n: usize, intrinsics: Intrinsics, seed: u64) -> Result<Vec<Camera>> {
    let mut r = rng::stream(seed, "random-cameras", 0);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let eye = uniform_in_box(&scene.bbox, &mut r);
        let target = uniform_in_box(&scene.bbox, &mut r);
        if (target - eye).norm() < 1e-3 * scene.bbox.diagonal() {
            continue;
        }
        out.push(Camera::new(lookat(eye, target, WORLD_UP)?, intrinsics)?);
    }
    Ok(out)
}

struct Rep<'a> {
    cfg: &'a AblationConfig,
    scene: &'a Scene,
    cloud: LabeledPointCloud,
    queries: QuerySet,
    field: FieldConfig,
    render: RenderConfig,
}

impl Rep<'_> {
    fn fit(&self, frames: &[PosedFrame], lambda_depth: f64, seed: u64) -> Result<FieldParams> {
        let cfg = TrainConfig {
            lambda_depth,
            seed,
            ..self.cfg.train.clone()
        };
        Ok(train(frames, &self.field, &cfg)?.0)
    }

    fn miou(&self, inputs: &SegmentInputs) -> Result<SegmentationResult> {
        let a = assign_labels(&inputs.features, &self.queries);
        score(&a.labels, &self.cloud.class_ids, &self.queries, EmptyClassRule::Exclude)
    }

    fn render_project(&self, params: &FieldParams, cameras: &[Camera]) -> Result<SegmentationResult> {
        let inputs = segment_render_project(params, cameras, &self.cloud, self.cfg.fusion.depth_tolerance, &self.render)?;
        self.miou(&inputs)
    }

    fn encode(&self, mut frames: Vec<PosedFrame>, codebook: &Codebook, seed: u64) -> Result<Vec<PosedFrame>> {
        for (i, f) in frames.iter_mut().enumerate() {
            let noise = NoiseModel {
                seed: rng::stream_seed(seed, "frame-noise", i as u64),
                ..self.cfg.noise.clone()
            };
            f.features = Some(encode_features(&f.semantics, codebook, &noise)?);
        }
        Ok(frames)
    }
}

/// Run every variant for every repetition. All variants of one repetition
/// share the scene, point cloud, codebook and original frames.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let scene = generate_scene(&cfg.scene)?;
    let cameras = make_trajectory(&scene, cfg.n_views, cfg.trajectory, cfg.intrinsics, cfg.seed)?;
    let mut variants: Vec<VariantScores> = Variant::ALL
        .iter()
        .map(|&variant| VariantScores {
            variant,
            miou: Vec::new(),
            macc: Vec::new(),
            class_iou: Vec::new(),
        })
        .collect();
    let mut accepted_views = Vec::with_capacity(cfg.repetitions);
    let mut warnings = scene.warnings.clone();
    let labels = class_labels(scene.n_classes);
    for rep in 0..cfg.repetitions {
        let seed = rng::stream_seed(cfg.seed, "ablation-rep", rep as u64);
        let codebook = Codebook::generate(scene.n_classes, cfg.feature_dim, rng::stream_seed(seed, "codebook", 0))?;
        let cloud = sample_point_cloud(&scene, cfg.n_points, rng::stream_seed(seed, "cloud", 0))?;
        let (queries, _) = build_query_set(
            &labels,
            &cloud.class_counts(scene.n_classes),
            EmbeddingSource::Codebook(&codebook),
        )?;
        let r = Rep {
            cfg,
            scene: &scene,
            queries,
            cloud,
            field: FieldConfig::uniform(scene.bbox, cfg.grid_res, cfg.feature_dim),
            render: RenderConfig {
                n_samples: cfg.eval_samples,
                stratified: false,
            },
        };
        let frames = r.encode(render_views(&scene, &cameras), &codebook, rng::stream_seed(seed, "noise", 0))?;
        let mut push = |v: Variant, r: SegmentationResult| {
            let s = &mut variants[Variant::ALL.iter().position(|x| *x == v).unwrap_or(0)];
            s.miou.push(r.miou_all);
            s.macc.push(r.macc_all);
            s.class_iou.push(r.per_class_iou);
        };

        let train_seed = rng::stream_seed(seed, "train", 0);
        let rgb_only = r.fit(&frames, 0.0, train_seed)?;
        push(Variant::Sampled, r.miou(&segment_sample(&rgb_only, &r.cloud))?);
        push(Variant::RenderProject, r.render_project(&rgb_only, &cameras)?);
        drop(rgb_only);

        let with_depth = r.fit(&frames, cfg.train.lambda_depth, train_seed)?;
        push(Variant::DepthSupervision, r.render_project(&with_depth, &cameras)?);

        let stats = fuse(&r.cloud, &frames, &cfg.fusion)?;
        let viewsel = ViewSelConfig {
            seed: rng::stream_seed(seed, "viewsel", 0),
            ..cfg.viewsel.clone()
        };
        let proposals = propose_views(&with_depth, &r.cloud, &stats, &viewsel)?;
        drop(with_depth);
        let novel_noise = NoiseModel {
            seed: rng::stream_seed(seed, "novel-noise", 0),
            ..cfg.noise.clone()
        };
        let novel = realize_views(r.scene, &proposals, &codebook, &novel_noise, cfg.intrinsics)?;
        let n_novel = novel.len();
        accepted_views.push(n_novel);
        if n_novel == 0 {
            warnings.push(alloc::format!("repetition {rep}: no proposal was accepted"));
        }
        let mut eval_cams = cameras.clone();
        eval_cams.extend(novel.iter().map(|f| f.camera));
        let mut augmented = frames.clone();
        augmented.extend(novel);
        let params = r.fit(&augmented, cfg.train.lambda_depth, train_seed)?;
        push(Variant::NovelViews, r.render_project(&params, &eval_cams)?);

        let rand_cams = random_cameras(r.scene, n_novel, cfg.intrinsics, rng::stream_seed(seed, "random", 0))?;
        let rand_frames = r.encode(
            render_views(r.scene, &rand_cams),
            &codebook,
            rng::stream_seed(seed, "random-noise", 0),
        )?;
        let mut eval_cams = cameras.clone();
        eval_cams.extend(rand_cams.iter().copied());
        let mut augmented = frames;
        augmented.extend(rand_frames);
        let params = r.fit(&augmented, cfg.train.lambda_depth, train_seed)?;
        push(Variant::RandomViews, r.render_project(&params, &eval_cams)?);
    }
    Ok(AblationReport {
        variants,
        accepted_views,
        warnings,
    })
}
