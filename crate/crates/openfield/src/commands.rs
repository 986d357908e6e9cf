//! Pipeline commands. Each reads its inputs from the run directory, checks
//! them against the manifest, writes its outputs and records their hashes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use openfield_core::ablation::{run_ablation, AblationReport, Variant, NOVEL_VIEW_MARGIN};
use openfield_core::eval::{
    assign_labels, build_query_set, class_labels, relevancy_map, score, segment_render_project, segment_sample,
    EmbeddingSource, QuerySet,
};
use openfield_core::field::{init_params, FieldConfig, FieldParams};
use openfield_core::fusion::{error_and_correlation, fuse};
use openfield_core::render::RenderConfig;
use openfield_core::rng::stream_seed;
use openfield_core::scenegen::{
    encode_frames, generate_scene, make_trajectory, render_views, sample_point_cloud, Camera, Codebook,
    LabeledPointCloud, NoiseModel, PosedFrame, Scene, SceneSpec,
};
use openfield_core::train::{LossBreakdown, Trainer};
use openfield_core::viewsel::{propose_views, realize_views};
use serde::Deserialize;

use crate::config::{read_scene_spec, EvalMode, PipelineConfig};
use crate::error::{CliError, Result};
use crate::formats::{self, csv_err, fmt_f, Dtype};
use crate::manifest::{Manifest, Stage};

pub const SCENE_FILE: &str = "scene.json";
pub const FRAMES_DIR: &str = "frames";
pub const NOVEL_DIR: &str = "novel";
pub const POSES_FILE: &str = "poses.txt";
pub const CLOUD_FILE: &str = "cloud.ply";
pub const CODEBOOK_FILE: &str = "codebook.ofmp";
pub const FIELD_FILE: &str = "field.ofld";
pub const NOVEL_FIELD_FILE: &str = "field_novel.ofld";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const NOVEL_TRAIN_LOG: &str = "train_log_novel.csv";
pub const STATS_FILE: &str = "stats.bin";
pub const REFUSED_STATS_FILE: &str = "stats_refused.bin";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const PROPOSALS_FILE: &str = "proposals.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const ABLATION_CHECKS_FILE: &str = "ablation_checks.csv";

pub fn results_file(mode: EvalMode) -> String {
    format!("results_{}.csv", mode.as_str())
}

pub fn predictions_file(mode: EvalMode) -> String {
    format!("predictions_{}.ply", mode.as_str())
}

/// Human-readable lines describing what a command did.
pub type Report = Vec<String>;

fn record(cfg: &PipelineConfig, stage: Stage, files: &[PathBuf]) -> Result<()> {
    let mut m = Manifest::load(&cfg.out)?;
    m.record(&cfg.out, stage, cfg.seed, files, !cfg.deterministic)?;
    m.save(&cfg.out)
}

fn frame_paths(dir: &Path, i: usize) -> [PathBuf; 4] {
    ["rgb.ppm", "depth.ofmp", "semantics.ofmp", "features.ofmp"].map(|s| dir.join(format!("{i:04}_{s}")))
}

pub fn write_frames(dir: &Path, frames: &[PosedFrame], dtype: Dtype) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let mut written = vec![dir.join(POSES_FILE)];
    let cameras: Vec<Camera> = frames.iter().map(|f| f.camera).collect();
    formats::write_poses(&written[0], &cameras)?;
    for (i, f) in frames.iter().enumerate() {
        let [rgb, depth, sem, feat] = frame_paths(dir, i);
        formats::write_ppm(&rgb, &f.rgb)?;
        formats::write_depth(&depth, &f.depth)?;
        formats::write_semantics(&sem, &f.semantics)?;
        let features = f
            .features
            .as_ref()
            .ok_or_else(|| CliError::Invalid(format!("frame {i} has no feature map")))?;
        formats::write_feature_map(&feat, features, dtype)?;
        written.extend([rgb, depth, sem, feat]);
    }
    Ok(written)
}

pub fn read_frames(dir: &Path) -> Result<Vec<PosedFrame>> {
    let cameras = formats::read_poses(&dir.join(POSES_FILE))?;
    let mut frames = Vec::with_capacity(cameras.len());
    for (i, camera) in cameras.into_iter().enumerate() {
        let [rgb, depth, sem, feat] = frame_paths(dir, i);
        let frame = PosedFrame {
            camera,
            rgb: formats::read_ppm(&rgb)?,
            depth: formats::read_depth(&depth)?,
            semantics: formats::read_semantics(&sem)?,
            features: Some(formats::read_feature_map(&feat)?),
        };
        frame.validate()?;
        frames.push(frame);
    }
    Ok(frames)
}

/// Codebook as an OFMP map of `n_classes + 1` rows, background last.
pub fn write_codebook(path: &Path, cb: &Codebook) -> Result<()> {
    let rows: Vec<f32> = cb
        .embeddings
        .iter()
        .chain(std::iter::once(&cb.background))
        .flatten()
        .map(|v| *v as f32)
        .collect();
    formats::write_ofmp(path, cb.embeddings.len() + 1, 1, cb.dim, Dtype::F32, &rows)
}

pub fn read_codebook(path: &Path) -> Result<Codebook> {
    let m = formats::read_ofmp(path)?;
    if m.height != 1 || m.width < 2 {
        return Err(CliError::format(path, "codebook must be a single row of at least 2 entries"));
    }
    let mut rows: Vec<Vec<f64>> = m
        .data
        .chunks_exact(m.dim)
        .map(|r| r.iter().map(|v| f64::from(*v)).collect())
        .collect();
    let background = rows.pop().unwrap_or_default();
    Ok(Codebook {
        dim: m.dim,
        embeddings: rows,
        background,
    })
}

struct Upstream {
    scene: Scene,
    spec: SceneSpec,
}

fn load_scene(dir: &Path) -> Result<Upstream> {
    let spec = read_scene_spec(&dir.join(SCENE_FILE))?;
    Ok(Upstream {
        scene: generate_scene(&spec)?,
        spec,
    })
}

pub fn cmd_generate(cfg: &PipelineConfig) -> Result<Report> {
    let spec = cfg.scene_spec()?;
    let scene = generate_scene(&spec)?;
    let g = &cfg.generate;
    let cameras = make_trajectory(
        &scene,
        g.n_frames,
        g.trajectory,
        g.intrinsics(),
        stream_seed(cfg.seed, "trajectory", 0),
    )?;
    let mut frames = render_views(&scene, &cameras);
    let codebook = Codebook::generate(scene.n_classes, g.feature_dim, stream_seed(cfg.seed, "codebook", 0))?;
    encode_frames(&mut frames, &codebook, &cfg.noise())?;
    let cloud = sample_point_cloud(&scene, g.n_points, stream_seed(cfg.seed, "cloud", 0))?;

    let dir = &cfg.out;
    std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let scene_path = dir.join(SCENE_FILE);
    let json = serde_json::to_string_pretty(&spec).map_err(|source| CliError::Config {
        path: scene_path.clone(),
        source,
    })?;
    std::fs::write(&scene_path, json + "\n").map_err(CliError::io(&scene_path))?;
    let mut files = vec![scene_path];
    files.extend(write_frames(&dir.join(FRAMES_DIR), &frames, g.feature_dtype)?);
    files.push(dir.join(CLOUD_FILE));
    formats::write_ply(&dir.join(CLOUD_FILE), &cloud)?;
    files.push(dir.join(CODEBOOK_FILE));
    write_codebook(&dir.join(CODEBOOK_FILE), &codebook)?;
    record(cfg, Stage::Generate, &files)?;
    let mut report = vec![format!(
        "generated {} frames, {} points, {} classes in {}",
        frames.len(),
        cloud.len(),
        scene.n_classes,
        dir.display()
    )];
    report.extend(scene.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(report)
}

fn write_train_log(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut w = formats::csv_writer(path)?;
    w.write_record(["iter", "l_rgb", "l_depth", "l_open", "total"])
        .map_err(csv_err(path))?;
    for (i, l) in log.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f(l.l_rgb), fmt_f(l.l_depth), fmt_f(l.l_open), fmt_f(l.total)])
            .map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

/// Train a fresh field, checkpointing every `checkpoint_every` iterations.
fn fit(
    cfg: &PipelineConfig,
    up: &Upstream,
    frames: &[PosedFrame],
    dim: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<(FieldParams, Vec<LossBreakdown>, Vec<PathBuf>)> {
    let field_cfg = FieldConfig {
        background: up.spec.background_color,
        ..FieldConfig::uniform(up.scene.bbox, cfg.field.resolution, dim)
    };
    let train_cfg = cfg.train_config();
    let params = init_params(&field_cfg, stream_seed(train_cfg.seed, "field", 0))?;
    let mut trainer = Trainer::new(params, train_cfg)?;
    let mut log = Vec::with_capacity(cfg.train.iterations);
    let mut checkpoints = Vec::new();
    for it in 1..=cfg.train.iterations {
        log.push(trainer.step(frames)?);
        if let Some(dir) = checkpoint_dir {
            if cfg.field.checkpoint_every > 0 && it % cfg.field.checkpoint_every == 0 {
                let path = dir.join(format!("iter_{it:06}.ofld"));
                formats::write_checkpoint(&path, &trainer.params)?;
                checkpoints.push(path);
            }
        }
    }
    if !trainer.params.is_finite() {
        return Err(openfield_core::Error::NonFinite("field parameters after training".into()).into());
    }
    Ok((trainer.params, log, checkpoints))
}

fn feature_dim(frames: &[PosedFrame]) -> Result<usize> {
    frames
        .iter()
        .find_map(|f| f.features.as_ref().map(|m| m.dim))
        .ok_or_else(|| CliError::Invalid("frames carry no feature maps".into()))
}

pub fn cmd_train(cfg: &PipelineConfig) -> Result<Report> {
    let dir = &cfg.out;
    Manifest::load(dir)?.require(dir, Stage::Train)?;
    let up = load_scene(dir)?;
    let frames = read_frames(&dir.join(FRAMES_DIR))?;
    let started = Instant::now();
    let (params, log, mut files) = fit(cfg, &up, &frames, feature_dim(&frames)?, Some(&dir.join("checkpoints")))?;
    formats::write_checkpoint(&dir.join(FIELD_FILE), &params)?;
    write_train_log(&dir.join(TRAIN_LOG), &log)?;
    files.extend([dir.join(FIELD_FILE), dir.join(TRAIN_LOG)]);
    record(cfg, Stage::Train, &files)?;
    let last = log.last().map_or(f64::NAN, |l| l.total);
    let mut report = vec![format!("trained {} iterations, final loss {}", log.len(), fmt_f(last))];
    if !cfg.deterministic {
        report.push(format!("elapsed {:.1}s", started.elapsed().as_secs_f64()));
    }
    Ok(report)
}

fn write_correlation(path: &Path, cloud: &LabeledPointCloud, stats: &[openfield_core::fusion::PointStats], cb: &Codebook) -> Result<Vec<String>> {
    let undetermined = stats.iter().filter(|s| s.undetermined).count();
    let mut rows: Vec<(String, String)> = vec![
        ("points".into(), cloud.len().to_string()),
        ("undetermined".into(), undetermined.to_string()),
    ];
    match error_and_correlation(stats, cloud, cb) {
        Ok(d) => rows.extend([
            ("n_valid".into(), d.n_valid.to_string()),
            ("pearson_log_u".into(), fmt_f(d.pearson_r)),
            ("pearson_u".into(), fmt_f(d.pearson_r_linear)),
            ("spearman".into(), fmt_f(d.spearman_r)),
        ]),
        Err(openfield_core::Error::UndefinedCorrelation(n)) => {
            rows.push(("n_valid".into(), n.to_string()));
        }
        Err(e) => return Err(e.into()),
    }
    let mut w = formats::csv_writer(path)?;
    w.write_record(["metric", "value"]).map_err(csv_err(path))?;
    for (k, v) in &rows {
        w.write_record([k, v]).map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))?;
    Ok(rows.into_iter().map(|(k, v)| format!("{k}: {v}")).collect())
}

pub fn cmd_fuse(cfg: &PipelineConfig) -> Result<Report> {
    let dir = &cfg.out;
    Manifest::load(dir)?.require(dir, Stage::Fuse)?;
    let frames = read_frames(&dir.join(FRAMES_DIR))?;
    let cloud = formats::read_ply(&dir.join(CLOUD_FILE))?;
    let codebook = read_codebook(&dir.join(CODEBOOK_FILE))?;
    let stats = fuse(&cloud, &frames, &cfg.fusion.core())?;
    formats::write_stats(&dir.join(STATS_FILE), &stats, cfg.fusion.dump_covariance, cfg.fusion.estimator)?;
    let report = write_correlation(&dir.join(CORRELATION_FILE), &cloud, &stats, &codebook)?;
    record(cfg, Stage::Fuse, &[dir.join(STATS_FILE), dir.join(CORRELATION_FILE)])?;
    Ok(report)
}

fn write_proposals(path: &Path, proposals: &[openfield_core::viewsel::ViewProposal]) -> Result<()> {
    let mut w = formats::csv_writer(path)?;
    let mut header: Vec<String> = ["target_x", "target_y", "target_z", "position_x", "position_y", "position_z"]
        .map(String::from)
        .to_vec();
    header.extend(["accepted".into(), "rejection".into(), "source_point".into()]);
    header.extend((0..16).map(|i| format!("pose_{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for p in proposals {
        let mut row: Vec<String> = [p.target, p.position]
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .map(fmt_f)
            .collect();
        row.extend([
            u8::from(p.accepted).to_string(),
            p.rejection.as_str().into(),
            p.source_point.to_string(),
        ]);
        row.extend(p.pose.to_matrix().iter().map(|v| fmt_f(*v)));
        w.write_record(&row).map_err(csv_err(path))?;
    }
    w.flush().map_err(CliError::io(path))
}

pub fn cmd_propose(cfg: &PipelineConfig) -> Result<Report> {
    let dir = &cfg.out;
    Manifest::load(dir)?.require(dir, Stage::Propose)?;
    let up = load_scene(dir)?;
    let frames = read_frames(&dir.join(FRAMES_DIR))?;
    let cloud = formats::read_ply(&dir.join(CLOUD_FILE))?;
    let codebook = read_codebook(&dir.join(CODEBOOK_FILE))?;
    let params = formats::read_checkpoint(&dir.join(FIELD_FILE), up.spec.background_color)?;
    let stats = formats::stats_from_stored(&formats::read_stats(&dir.join(STATS_FILE))?);
    let viewsel = cfg.viewsel_config(&up.spec);
    let proposals = propose_views(&params, &cloud, &stats, &viewsel)?;
    write_proposals(&dir.join(PROPOSALS_FILE), &proposals)?;
    let noise = NoiseModel {
        seed: stream_seed(cfg.seed, "novel-noise", 0),
        ..cfg.generate.noise.clone()
    };
    let intrinsics = frames[0].camera.intrinsics;
    let novel = realize_views(&up.scene, &proposals, &codebook, &noise, intrinsics)?;
    let mut files = vec![dir.join(PROPOSALS_FILE)];
    let novel_dir = dir.join(NOVEL_DIR);
    if novel_dir.exists() {
        std::fs::remove_dir_all(&novel_dir).map_err(CliError::io(&novel_dir))?;
    }
    files.extend(write_frames(&novel_dir, &novel, cfg.generate.feature_dtype)?);
    let accepted = novel.len();
    let mut report = vec![format!("{} proposals, {accepted} accepted", proposals.len())];
    let mut all = frames;
    all.extend(novel);
    if cfg.propose.train_on_novel {
        let (params, log, _) = fit(cfg, &up, &all, codebook.dim, None)?;
        formats::write_checkpoint(&dir.join(NOVEL_FIELD_FILE), &params)?;
        write_train_log(&dir.join(NOVEL_TRAIN_LOG), &log)?;
        files.extend([dir.join(NOVEL_FIELD_FILE), dir.join(NOVEL_TRAIN_LOG)]);
        report.push(format!("retrained on {} frames", all.len()));
    }
    if cfg.propose.refuse {
        let stats = fuse(&cloud, &all, &cfg.fusion.core())?;
        let path = dir.join(REFUSED_STATS_FILE);
        formats::write_stats(&path, &stats, cfg.fusion.dump_covariance, cfg.fusion.estimator)?;
        files.push(path);
        report.push(format!(
            "re-fused: {} undetermined points remain",
            stats.iter().filter(|s| s.undetermined).count()
        ));
    }
    record(cfg, Stage::Propose, &files)?;
    Ok(report)
}

/// Field and cameras used for evaluation: the field retrained with novel
/// views when `propose` produced one, else the base field.
fn eval_field(cfg: &PipelineConfig, manifest: &Manifest, up: &Upstream) -> Result<(FieldParams, Vec<Camera>, &'static str)> {
    let dir = &cfg.out;
    let mut cameras = formats::read_poses(&dir.join(FRAMES_DIR).join(POSES_FILE))?;
    let novel = manifest
        .stage(Stage::Propose)
        .is_some_and(|r| r.files.contains_key(NOVEL_FIELD_FILE));
    if novel {
        manifest.verify(dir, Stage::Propose)?;
        cameras.extend(formats::read_poses(&dir.join(NOVEL_DIR).join(POSES_FILE))?);
        let params = formats::read_checkpoint(&dir.join(NOVEL_FIELD_FILE), up.spec.background_color)?;
        Ok((params, cameras, NOVEL_FIELD_FILE))
    } else {
        let params = formats::read_checkpoint(&dir.join(FIELD_FILE), up.spec.background_color)?;
        Ok((params, cameras, FIELD_FILE))
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingFile {
    labels: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

fn read_embedding_file(path: &Path) -> Result<EmbeddingFile> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let f: EmbeddingFile = serde_json::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    if f.labels.len() != f.embeddings.len() {
        return Err(CliError::format(path, "labels and embeddings differ in length"));
    }
    Ok(f)
}

/// Query set for evaluation; label `k` is scored against class id `k`.
fn queries(cfg: &PipelineConfig, cloud: &LabeledPointCloud, codebook: &Codebook, n_classes: usize) -> Result<(QuerySet, Vec<String>)> {
    let labels = cfg.eval.labels.clone().unwrap_or_else(|| class_labels(n_classes));
    let counts = cloud.class_counts(labels.len());
    match &cfg.eval.embeddings {
        Some(path) => {
            let f = read_embedding_file(path)?;
            Ok(build_query_set(
                &labels,
                &counts,
                EmbeddingSource::External {
                    labels: &f.labels,
                    rows: &f.embeddings,
                },
            )?)
        }
        None => Ok(build_query_set(&labels, &counts, EmbeddingSource::Codebook(codebook))?),
    }
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<Report> {
    let dir = &cfg.out;
    let manifest = Manifest::load(dir)?;
    manifest.require(dir, Stage::Eval)?;
    let up = load_scene(dir)?;
    let cloud = formats::read_ply(&dir.join(CLOUD_FILE))?;
    let codebook = read_codebook(&dir.join(CODEBOOK_FILE))?;
    let (params, cameras, field_name) = eval_field(cfg, &manifest, &up)?;
    let (qs, mut report) = queries(cfg, &cloud, &codebook, up.scene.n_classes)?;
    let mode = cfg.eval.mode;
    let inputs = match mode {
        EvalMode::Sample => segment_sample(&params, &cloud),
        EvalMode::RenderProject => {
            let render = RenderConfig {
                n_samples: cfg.eval.render_samples,
                stratified: false,
            };
            segment_render_project(&params, &cameras, &cloud, cfg.eval.depth_tolerance, &render)?
        }
    };
    let assignment = assign_labels(&inputs.features, &qs);
    let result = score(&assignment.labels, &cloud.class_ids, &qs, cfg.eval.empty_classes)?;

    let path = dir.join(results_file(mode));
    let mut w = formats::csv_writer(&path)?;
    w.write_record(["label", "iou", "acc", "subset"]).map_err(csv_err(&path))?;
    let opt = |v: Option<f64>| v.map_or_else(String::new, fmt_f);
    for (k, label) in qs.labels.iter().enumerate() {
        w.write_record([
            label.clone(),
            opt(result.per_class_iou[k]),
            opt(result.per_class_acc[k]),
            qs.subsets[k].as_str().into(),
        ])
        .map_err(csv_err(&path))?;
    }
    for (name, iou, acc, subset) in [
        ("mean", result.miou_all, result.macc_all, "all"),
        ("mean", result.miou_head, result.macc_head, "head"),
        ("mean", result.miou_common, result.macc_common, "common"),
        ("mean", result.miou_tail, result.macc_tail, "tail"),
    ] {
        w.write_record([name.into(), fmt_f(iou), fmt_f(acc), subset.to_string()])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(CliError::io(&path))?;

    let predicted = LabeledPointCloud {
        positions: cloud.positions.clone(),
        class_ids: assignment.labels.iter().map(|&l| l as i32).collect(),
        colors: cloud.colors.clone(),
    };
    let ply = dir.join(predictions_file(mode));
    formats::write_ply(&ply, &predicted)?;
    record(cfg, Stage::Eval, &[path, ply])?;
    let count = |v: &[bool]| v.iter().filter(|x| **x).count();
    report.push(format!(
        "{} mode on {field_name}: mIoU {} mAcc {}",
        mode.as_str(),
        fmt_f(result.miou_all),
        fmt_f(result.macc_all)
    ));
    report.push(format!(
        "{} points fell back to sampling, {} low-opacity, {} zero-norm features",
        count(&inputs.fallback),
        count(&inputs.low_opacity),
        count(&assignment.zero_norm)
    ));
    Ok(report)
}

/// What `query` looks for.
pub enum QueryTarget {
    Label(String),
    /// JSON file holding either a bare vector or the labels/embeddings form.
    EmbeddingFile { label: String, path: PathBuf },
}

fn query_vector(cfg: &PipelineConfig, target: &QueryTarget, codebook: &Codebook) -> Result<(String, Vec<f64>)> {
    let (label, rows) = match target {
        QueryTarget::Label(label) => {
            let labels = vec![label.clone()];
            let (qs, _) = match &cfg.eval.embeddings {
                Some(path) => {
                    let f = read_embedding_file(path)?;
                    build_query_set(
                        &labels,
                        &[0],
                        EmbeddingSource::External {
                            labels: &f.labels,
                            rows: &f.embeddings,
                        },
                    )?
                }
                None => build_query_set(&labels, &[0], EmbeddingSource::Codebook(codebook))?,
            };
            (label.clone(), qs.embeddings)
        }
        QueryTarget::EmbeddingFile { label, path } => {
            let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
            let row = match serde_json::from_str::<Vec<f64>>(&text) {
                Ok(v) => v,
                Err(_) => {
                    let f = read_embedding_file(path)?;
                    let i = f
                        .labels
                        .iter()
                        .position(|l| l == label)
                        .ok_or_else(|| openfield_core::Error::MissingLabel(label.clone()))?;
                    f.embeddings[i].clone()
                }
            };
            let (qs, _) = build_query_set(
                std::slice::from_ref(label),
                &[0],
                EmbeddingSource::External {
                    labels: std::slice::from_ref(label),
                    rows: std::slice::from_ref(&row),
                },
            )?;
            (label.clone(), qs.embeddings)
        }
    };
    if rows[0].len() != codebook.dim {
        return Err(CliError::Invalid(format!(
            "query embedding has dimension {}, field features have {}",
            rows[0].len(),
            codebook.dim
        )));
    }
    Ok((label, rows.into_iter().next().unwrap_or_default()))
}

pub fn cmd_query(cfg: &PipelineConfig, target: &QueryTarget, camera_ids: Option<&[usize]>) -> Result<Report> {
    let dir = &cfg.out;
    let manifest = Manifest::load(dir)?;
    manifest.require(dir, Stage::Query)?;
    let up = load_scene(dir)?;
    let codebook = read_codebook(&dir.join(CODEBOOK_FILE))?;
    let (params, cameras, _) = eval_field(cfg, &manifest, &up)?;
    let (label, q) = query_vector(cfg, target, &codebook)?;
    let ids = camera_ids.unwrap_or(&cfg.eval.query_cameras);
    let render = RenderConfig {
        n_samples: cfg.eval.render_samples,
        stratified: false,
    };
    let safe: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    let mut files = Vec::new();
    let mut report = Vec::new();
    for &id in ids {
        let cam = cameras
            .get(id)
            .ok_or_else(|| CliError::Invalid(format!("camera {id} out of range (have {})", cameras.len())))?;
        let map = relevancy_map(&params, cam, &q, cfg.eval.relevancy_threshold, cfg.eval.relevancy_scale, &render);
        let path = dir.join("query").join(format!("{safe}_cam{id:04}.ppm"));
        formats::write_ppm(&path, &map.image)?;
        if map.degenerate {
            report.push(format!("camera {id}: constant relevancy, map set to 0.5"));
        }
        files.push(path);
    }
    record(cfg, Stage::Query, &files)?;
    report.push(format!("wrote {} heatmaps for `{label}`", files.len()));
    Ok(report)
}

pub fn ablation_config(cfg: &PipelineConfig) -> Result<openfield_core::ablation::AblationConfig> {
    let mut a = cfg.ablate.clone();
    if cfg.scene.is_some() {
        a.scene = cfg.scene_spec()?;
    }
    a.seed = cfg.seed;
    Ok(a)
}

pub fn write_ablation(dir: &Path, report: &AblationReport, elapsed: Option<f64>) -> Result<Vec<PathBuf>> {
    let path = dir.join(ABLATION_FILE);
    let mut w = formats::csv_writer(&path)?;
    w.write_record(["variant", "mean_miou", "mean_macc", "miou_per_rep", "macc_per_rep"])
        .map_err(csv_err(&path))?;
    let join = |v: &[f64]| v.iter().map(|x| fmt_f(*x)).collect::<Vec<_>>().join(";");
    for s in &report.variants {
        w.write_record([
            s.variant.name().into(),
            fmt_f(s.mean_miou()),
            fmt_f(s.mean_macc()),
            join(&s.miou),
            join(&s.macc),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(CliError::io(&path))?;

    let checks = dir.join(ABLATION_CHECKS_FILE);
    let mut w = formats::csv_writer(&checks)?;
    let pass = |b: bool| if b { "pass" } else { "fail" }.to_string();
    let ordering: Vec<String> = Variant::ALL[..4]
        .iter()
        .map(|v| fmt_f(report.scores(*v).mean_miou()))
        .collect();
    let gain = report.novel_view_gain();
    let mut rows = vec![
        ["ordering_1_le_2_le_3_le_4".to_string(), ordering.join("<="), pass(report.ordering_holds())],
        ["novel_view_gain_points".into(), fmt_f(gain), pass(gain >= NOVEL_VIEW_MARGIN)],
        [
            "random_below_depth".into(),
            format!(
                "{}<{}",
                fmt_f(report.scores(Variant::RandomViews).mean_miou()),
                fmt_f(report.scores(Variant::DepthSupervision).mean_miou())
            ),
            pass(report.random_below_depth()),
        ],
        [
            "accepted_views".into(),
            report.accepted_views.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            String::new(),
        ],
    ];
    if let Some(t) = elapsed {
        rows.push(["runtime_seconds".into(), format!("{t:.1}"), String::new()]);
    }
    w.write_record(["check", "value", "result"]).map_err(csv_err(&checks))?;
    for r in &rows {
        w.write_record(r).map_err(csv_err(&checks))?;
    }
    w.flush().map_err(CliError::io(&checks))?;
    Ok(vec![path, checks])
}

pub fn cmd_ablate(cfg: &PipelineConfig) -> Result<Report> {
    let a = ablation_config(cfg)?;
    let started = Instant::now();
    let report = run_ablation(&a)?;
    let elapsed = (!cfg.deterministic).then(|| started.elapsed().as_secs_f64());
    std::fs::create_dir_all(&cfg.out).map_err(CliError::io(&cfg.out))?;
    let files = write_ablation(&cfg.out, &report, elapsed)?;
    record(cfg, Stage::Ablate, &files)?;
    let mut lines = vec![format!("{:<22} {:>9} {:>9}", "variant", "mIoU", "mAcc")];
    for s in &report.variants {
        lines.push(format!(
            "{:<22} {:>9.4} {:>9.4}",
            s.variant.name(),
            s.mean_miou(),
            s.mean_macc()
        ));
    }
    let flag = |b: bool| if b { "pass" } else { "FAIL" };
    lines.push(format!("ordering 1<=2<=3<=4: {}", flag(report.ordering_holds())));
    lines.push(format!(
        "novel-view gain {:.2} points (>= {NOVEL_VIEW_MARGIN}): {}",
        report.novel_view_gain(),
        flag(report.novel_view_gain() >= NOVEL_VIEW_MARGIN)
    ));
    lines.push(format!("random views below depth variant: {}", flag(report.random_below_depth())));
    lines.extend(report.warnings.iter().map(|w| format!("warning: {w}")));
    Ok(lines)
}
