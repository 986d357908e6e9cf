//! Pipeline configuration: one JSON document with a section per command.
//! Unknown keys anywhere are rejected.

use std::path::{Path, PathBuf};

use openfield_core::ablation::AblationConfig;
use openfield_core::eval::{EmptyClassRule, RelevancyScale};
use openfield_core::fusion::{Estimator, FusionConfig};
use openfield_core::rng::stream_seed;
use openfield_core::scenegen::{Intrinsics, NoiseModel, SceneSpec, TrajectoryKind};
use openfield_core::train::TrainConfig;
use openfield_core::viewsel::ViewSelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::formats::Dtype;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_frames: usize,
    pub trajectory: TrajectoryKind,
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in radians.
    pub hfov: f64,
    pub feature_dim: usize,
    pub feature_dtype: Dtype,
    pub n_points: usize,
    /// Stub-encoder noise; its seed is derived from the global seed.
    pub noise: NoiseModel,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_frames: 200,
            trajectory: TrajectoryKind::Orbit {
                radius: 2.6,
                height: 0.0,
            },
            width: 64,
            height: 48,
            hfov: 1.0,
            feature_dim: 16,
            feature_dtype: Dtype::F16,
            n_points: 4000,
            noise: NoiseModel {
                sigma: 0.3,
                class_sigma: Vec::new(),
                border_corrupt: 4,
                seed: 0,
            },
        }
    }
}

impl GenerateConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_fov(self.width, self.height, self.hfov)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub resolution: usize,
    /// Write an OFLD checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            resolution: 32,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub depth_tolerance: f64,
    pub estimator: Estimator,
    /// Append each point's covariance to the stats file (D ≤ 32 only).
    pub dump_covariance: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        let d = FusionConfig::default();
        FusionSection {
            depth_tolerance: d.depth_tolerance,
            estimator: d.estimator,
            dump_covariance: false,
        }
    }
}

impl FusionSection {
    pub fn core(&self) -> FusionConfig {
        FusionConfig {
            depth_tolerance: self.depth_tolerance,
            estimator: self.estimator,
        }
    }
}

/// How realized novel views are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposeSection {
    /// Retrain the field from scratch on original plus novel frames.
    pub train_on_novel: bool,
    /// Re-fuse point statistics over original plus novel frames.
    pub refuse: bool,
}

impl Default for ProposeSection {
    fn default() -> Self {
        ProposeSection {
            train_on_novel: true,
            refuse: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Sample,
    #[default]
    RenderProject,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Sample => "sample",
            EvalMode::RenderProject => "render_project",
        }
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sample" => Ok(EvalMode::Sample),
            "render_project" => Ok(EvalMode::RenderProject),
            _ => Err(format!("unknown mode `{s}` (expected sample or render_project)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mode: EvalMode,
    /// Query labels; defaults to one `class_<k>` label per scene class.
    pub labels: Option<Vec<String>>,
    /// JSON file `{"labels": [...], "embeddings": [[...], ...]}` supplying
    /// the query rows; defaults to the generated codebook.
    pub embeddings: Option<PathBuf>,
    pub empty_classes: EmptyClassRule,
    pub render_samples: usize,
    pub depth_tolerance: f64,
    /// Camera indices (into the original trajectory) rendered by `query`.
    pub query_cameras: Vec<usize>,
    pub relevancy_threshold: f64,
    pub relevancy_scale: RelevancyScale,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            mode: EvalMode::RenderProject,
            labels: None,
            embeddings: None,
            empty_classes: EmptyClassRule::Exclude,
            render_samples: 64,
            depth_tolerance: FusionConfig::default().depth_tolerance,
            query_cameras: vec![0],
            relevancy_threshold: 0.5,
            relevancy_scale: RelevancyScale::MinMax,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Scene spec JSON; relative paths resolve against the config file.
    pub scene: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    /// Omit wall-clock fields so repeated runs write byte-identical files.
    pub deterministic: bool,
    pub generate: GenerateConfig,
    pub field: FieldSection,
    /// Module seeds inside sections are ignored; every stream derives from
    /// the global seed.
    pub train: TrainConfig,
    pub fusion: FusionSection,
    pub viewsel: Option<ViewSelConfig>,
    pub propose: ProposeSection,
    pub eval: EvalSection,
    /// Ablation settings; its scene is replaced by `scene` when that is set.
    pub ablate: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            scene: None,
            out: PathBuf::from("out"),
            seed: 0,
            deterministic: false,
            generate: GenerateConfig::default(),
            field: FieldSection::default(),
            train: TrainConfig {
                iterations: 300,
                batch_rays: 512,
                learning_rate: 0.1,
                n_samples: 64,
                border_margin: 4,
                ..TrainConfig::default()
            },
            fusion: FusionSection::default(),
            viewsel: None,
            propose: ProposeSection::default(),
            eval: EvalSection::default(),
            ablate: AblationConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Parse a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|source| CliError::Config {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(s) = cfg.scene.as_mut() {
            resolve(s);
        }
        if let Some(e) = cfg.eval.embeddings.as_mut() {
            resolve(e);
        }
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    /// Fail early on unreadable inputs and invalid sections.
    pub fn validate(&self) -> Result<()> {
        for p in self.scene.iter().chain(self.eval.embeddings.iter()) {
            if !p.is_file() {
                return Err(CliError::Invalid(format!("referenced file {} does not exist", p.display())));
            }
        }
        self.train.validate()?;
        self.generate.intrinsics().validate()?;
        if self.generate.n_frames == 0 || self.generate.n_points == 0 || self.generate.feature_dim == 0 {
            return Err(CliError::Invalid("generate: n_frames, n_points and feature_dim must be positive".into()));
        }
        if self.field.resolution < 2 {
            return Err(CliError::Invalid("field.resolution must be at least 2".into()));
        }
        if self.eval.render_samples < 2 {
            return Err(CliError::Invalid("eval.render_samples must be at least 2".into()));
        }
        if let Some(v) = &self.viewsel {
            v.validate()?;
        }
        Ok(())
    }

    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let path = self
            .scene
            .as_ref()
            .ok_or_else(|| CliError::Invalid("config does not name a scene spec".into()))?;
        read_scene_spec(path)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: stream_seed(self.seed, "train", 0),
            ..self.train.clone()
        }
    }

    pub fn noise(&self) -> NoiseModel {
        NoiseModel {
            seed: stream_seed(self.seed, "noise", 0),
            ..self.generate.noise.clone()
        }
    }

    pub fn viewsel_config(&self, spec: &SceneSpec) -> ViewSelConfig {
        let base = self.viewsel.clone().unwrap_or_else(|| ViewSelConfig::for_bbox(&spec.bbox));
        ViewSelConfig {
            seed: stream_seed(self.seed, "viewsel", 0),
            ..base
        }
    }
}

pub fn read_scene_spec(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    serde_json::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })
}
