//! Distillation of posed RGB-D frames and feature maps into a field.
//!
//! Total loss per step: `L = L_rgb + λ_open L_open + λ_depth L_depth` where
//! `L_rgb` is the mean squared color error, `L_depth` the mean Huber error of
//! the rendered expected depth, and `L_open` the mean negative cosine between
//! rendered and target features. The open-set loss never reaches the density
//! grid: its derivative is cut at the compositing weights.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{init_params, FieldConfig, FieldGrads, FieldParams, Grid};
use crate::math::{dot, l2_norm};
use crate::render::{render_ray, render_ray_backward, CompositeUpstream, PixelRef, Ray, RayScratch, RenderConfig};
use crate::rng::{self, StreamRng};
use crate::scenegen::PosedFrame;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct TrainConfig {
    pub lambda_open: f64,
    pub lambda_depth: f64,
    /// Rays are never sampled this close to the image border.
    pub border_margin: usize,
    pub batch_rays: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub huber_beta: f64,
    pub n_samples: usize,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_open: 1.0,
            lambda_depth: 0.1,
            border_margin: 10,
            batch_rays: 1024,
            iterations: 1500,
            learning_rate: 1e-2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            huber_beta: 0.1,
            n_samples: 128,
            stratified: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_rays == 0 {
            return bad("batch_rays must be at least 1");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.huber_beta > 0.0) {
            return bad("huber_beta must be positive");
        }
        if !(self.lambda_open >= 0.0 && self.lambda_depth >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.n_samples < 2 {
            return bad("n_samples must be at least 2");
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            n_samples: self.n_samples,
            stratified: self.stratified,
        }
    }
}

/// Which loss terms take part in a step. Disabled terms report zero and use
/// no rays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub rgb: bool,
    pub depth: bool,
    pub open: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        rgb: true,
        depth: true,
        open: true,
    };
    pub const OPEN_ONLY: LossTerms = LossTerms {
        rgb: false,
        depth: false,
        open: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct RayTarget {
    pub color: [f64; 3],
    /// Ground-truth distance along the ray (not optical-axis depth).
    pub depth: Option<f64>,
    pub feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub target: RayTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub l_rgb: f64,
    pub l_depth: f64,
    pub l_open: f64,
    pub total: f64,
    pub n_rgb: usize,
    pub n_depth: usize,
    pub n_open: usize,
    /// Feature rays skipped because a vector had (near) zero norm.
    pub n_starved: usize,
}

/// Draw `batch_rays` pixels uniformly over all frames, excluding the border
/// margin, and read their targets.
pub fn sample_ray_batch<R: Rng + ?Sized>(
    frames: &[PosedFrame],
    config: &TrainConfig,
    rng: &mut R,
    bbox: &crate::math::Aabb,
) -> Result<Vec<TrainRay>> {
    if frames.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    let m = config.border_margin;
    let mut prefix = Vec::with_capacity(frames.len());
    let mut total = 0usize;
    for f in frames {
        let (w, h) = (f.width(), f.height());
        if w <= 2 * m || h <= 2 * m {
            return Err(Error::DegenerateImage {
                width: w,
                height: h,
                margin: m,
            });
        }
        total += (w - 2 * m) * (h - 2 * m);
        prefix.push(total);
    }
    let mut batch = Vec::with_capacity(config.batch_rays);
    for _ in 0..config.batch_rays {
        let idx = rng.random_range(0..total);
        let fi = prefix.partition_point(|&p| p <= idx);
        let local = idx - if fi == 0 { 0 } else { prefix[fi - 1] };
        let frame = &frames[fi];
        let inner_w = frame.width() - 2 * m;
        let (row, col) = (m + local / inner_w, m + local % inner_w);
        batch.push(frame_ray(frame, fi, row, col, bbox));
    }
    Ok(batch)
}

/// Training ray and target for one pixel of a frame.
pub fn frame_ray(frame: &PosedFrame, frame_index: usize, row: usize, col: usize, bbox: &crate::math::Aabb) -> TrainRay {
    let cam = &frame.camera;
    let dir = cam.pixel_direction(row as f64, col as f64);
    let mut ray = Ray::through_box(cam.position(), dir, bbox);
    ray.pixel = Some(PixelRef {
        frame: frame_index,
        row,
        col,
    });
    let z = *frame.depth.get(row, col);
    let cos = dir.dot(cam.pose.forward());
    let depth = (z > 0.0 && cos > 0.0).then(|| z / cos);
    let feature = frame
        .features
        .as_ref()
        .map(|fm| fm.pixel(row, col).iter().map(|v| f64::from(*v)).collect());
    TrainRay {
        ray,
        target: RayTarget {
            color: *frame.rgb.get(row, col),
            depth,
            feature,
        },
    }
}

/// Mean squared color error over rays.
pub fn loss_rgb(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> f64 {
    if rendered.is_empty() {
        return 0.0;
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(a, b)| (0..3).map(|c| (b[c] - a[c]) * (b[c] - a[c])).sum::<f64>())
        .sum();
    sum / rendered.len() as f64
}

/// Smooth L1: `0.5 e²/β` inside the knee, `|e| - β/2` outside.
pub fn huber(e: f64, beta: f64) -> f64 {
    if e.abs() <= beta {
        0.5 * e * e / beta
    } else {
        e.abs() - 0.5 * beta
    }
}

/// `d huber / d e`.
pub fn huber_grad(e: f64, beta: f64) -> f64 {
    if e.abs() <= beta {
        e / beta
    } else {
        e.signum()
    }
}

/// Mean Huber depth error over rays with a depth target, and their count.
pub fn loss_depth(rendered: &[f64], target: &[Option<f64>], beta: f64) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0;
    for (d_hat, d) in rendered.iter().zip(target) {
        if let Some(d) = d {
            sum += huber(d - d_hat, beta);
            n += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { 0.0 }, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OpenLoss {
    pub value: f64,
    pub n_used: usize,
    pub n_starved: usize,
}

/// Below this norm a feature vector has no direction.
pub const FEATURE_NORM_FLOOR: f64 = 1e-12;

/// `-cos(o, ô)` and its gradient with respect to `ô`, or `None` when either
/// vector is starved.
pub fn neg_cosine_with_grad(rendered: &[f64], target: &[f64], grad: &mut [f64]) -> Option<f64> {
    let (nr, nt) = (l2_norm(rendered), l2_norm(target));
    if nr < FEATURE_NORM_FLOOR || nt < FEATURE_NORM_FLOOR {
        grad.iter_mut().for_each(|g| *g = 0.0);
        return None;
    }
    let cos = dot(rendered, target) / (nr * nt);
    for ((g, r), t) in grad.iter_mut().zip(rendered).zip(target) {
        *g = -(t / nt - cos * r / nr) / nr;
    }
    Some(-cos)
}

/// Mean negative cosine similarity over rays with a feature target. Starved
/// rays contribute zero but stay in the mean.
pub fn loss_open(rendered: &[Vec<f64>], target: &[Option<Vec<f64>>]) -> OpenLoss {
    let mut out = OpenLoss::default();
    let mut sum = 0.0;
    for (r, t) in rendered.iter().zip(target) {
        let Some(t) = t else { continue };
        out.n_used += 1;
        let mut scratch = alloc::vec![0.0; r.len()];
        match neg_cosine_with_grad(r, t, &mut scratch) {
            Some(v) => sum += v,
            None => out.n_starved += 1,
        }
    }
    if out.n_used > 0 {
        out.value = sum / out.n_used as f64;
    }
    out
}

/// Forward pass over a fixed batch and, when `grads` is given, the gradient of
/// the total loss. Stratified offsets come from per-ray streams of `seed`, so
/// repeated calls see identical samples.
pub fn evaluate_batch(
    params: &FieldParams,
    batch: &[TrainRay],
    config: &TrainConfig,
    terms: LossTerms,
    seed: u64,
    mut grads: Option<&mut FieldGrads>,
) -> LossBreakdown {
    let render_cfg = config.render_config();
    let dim = params.feature_dim();
    let n_rgb = if terms.rgb { batch.len() } else { 0 };
    let n_depth = if terms.depth {
        batch.iter().filter(|r| r.target.depth.is_some()).count()
    } else {
        0
    };
    let n_open = if terms.open {
        batch.iter().filter(|r| r.target.feature.is_some()).count()
    } else {
        0
    };
    let mut out = LossBreakdown {
        n_rgb,
        n_depth,
        n_open,
        ..LossBreakdown::default()
    };
    let mut scratch = RayScratch::default();
    let mut feat_grad = alloc::vec![0.0; dim];
    let mut feat_up = alloc::vec![0.0; dim];
    for (i, tr) in batch.iter().enumerate() {
        let mut rng = rng::stream(seed, "batch-samples", i as u64);
        let r = render_ray(params, &tr.ray, &render_cfg, &mut rng, &mut scratch);
        let mut up_color = [0.0; 3];
        let mut up_depth = 0.0;
        feat_up.iter_mut().for_each(|v| *v = 0.0);
        if n_rgb > 0 {
            let mut sq = 0.0;
            for c in 0..3 {
                let d = r.color[c] - tr.target.color[c];
                sq += d * d;
                up_color[c] = 2.0 * d / n_rgb as f64;
            }
            out.l_rgb += sq / n_rgb as f64;
        }
        if n_depth > 0 {
            if let Some(d) = tr.target.depth {
                let e = d - r.depth;
                out.l_depth += huber(e, config.huber_beta) / n_depth as f64;
                up_depth = -config.lambda_depth * huber_grad(e, config.huber_beta) / n_depth as f64;
            }
        }
        if n_open > 0 {
            if let Some(t) = &tr.target.feature {
                match neg_cosine_with_grad(&r.feature, t, &mut feat_grad) {
                    Some(v) => {
                        out.l_open += v / n_open as f64;
                        for (u, g) in feat_up.iter_mut().zip(&feat_grad) {
                            *u = config.lambda_open * g / n_open as f64;
                        }
                    }
                    None => out.n_starved += 1,
                }
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            let up = CompositeUpstream {
                color: up_color,
                depth: up_depth,
                feature: &feat_up,
            };
            render_ray_backward(params, &tr.ray, &r, &up, &mut scratch, g);
        }
    }
    out.total = out.l_rgb + config.lambda_open * out.l_open + config.lambda_depth * out.l_depth;
    out
}

/// Adam over every lattice value of the field.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: FieldGrads,
    pub v: FieldGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &FieldParams) -> Self {
        AdamState {
            m: FieldGrads::zeros_like(params),
            v: FieldGrads::zeros_like(params),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut FieldParams, grads: &FieldGrads, config: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let bc1 = 1.0 - libm::pow(b1, f64::from(t));
        let bc2 = 1.0 - libm::pow(b2, f64::from(t));
        let lr = config.learning_rate;
        let eps = config.adam_eps;
        let groups: [(&mut Grid, &Grid, &mut Grid, &mut Grid); 3] = [
            (&mut params.density, &grads.density, &mut self.m.density, &mut self.v.density),
            (&mut params.color, &grads.color, &mut self.m.color, &mut self.v.color),
            (&mut params.feature, &grads.feature, &mut self.m.feature, &mut self.v.feature),
        ];
        for (p, g, m, v) in groups {
            for (((p, g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.data.iter_mut()).zip(v.data.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
    }
}

/// Step-by-step optimizer; callers that checkpoint drive it directly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: FieldParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub terms: LossTerms,
    pub iteration: usize,
    rng: StreamRng,
    grads: FieldGrads,
}

impl Trainer {
    pub fn new(params: FieldParams, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: AdamState::new(&params),
            grads: FieldGrads::zeros_like(&params),
            rng: rng::stream(config.seed, "train-batches", 0),
            params,
            config,
            terms: LossTerms::ALL,
            iteration: 0,
        })
    }

    /// One batch, one gradient, one Adam update.
    pub fn step(&mut self, frames: &[PosedFrame]) -> Result<LossBreakdown> {
        let batch = sample_ray_batch(frames, &self.config, &mut self.rng, &self.params.bbox)?;
        self.step_on(&batch)
    }

    pub fn step_on(&mut self, batch: &[TrainRay]) -> Result<LossBreakdown> {
        self.grads.clear();
        let seed = rng::stream_seed(self.config.seed, "train-strata", self.iteration as u64);
        let loss = evaluate_batch(&self.params, batch, &self.config, self.terms, seed, Some(&mut self.grads));
        if !self.grads.is_finite() || !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("gradient at iteration {}", self.iteration)));
        }
        self.adam.update(&mut self.params, &self.grads, &self.config);
        self.iteration += 1;
        Ok(loss)
    }

    pub fn last_grads(&self) -> &FieldGrads {
        &self.grads
    }
}

/// Single optimization step on freshly sampled rays.
pub fn backward_step(
    params: &mut FieldParams,
    adam: &mut AdamState,
    frames: &[PosedFrame],
    config: &TrainConfig,
    terms: LossTerms,
    rng: &mut StreamRng,
) -> Result<LossBreakdown> {
    let batch = sample_ray_batch(frames, config, rng, &params.bbox)?;
    let mut grads = FieldGrads::zeros_like(params);
    let seed = rng.random::<u64>();
    let loss = evaluate_batch(params, &batch, config, terms, seed, Some(&mut grads));
    if !grads.is_finite() || !loss.total.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    adam.update(params, &grads, config);
    Ok(loss)
}

/// Fit a fresh field to the frames; returns the field and the per-iteration
/// loss log.
pub fn train(
    frames: &[PosedFrame],
    field: &FieldConfig,
    config: &TrainConfig,
) -> Result<(FieldParams, Vec<LossBreakdown>)> {
    if frames.is_empty() {
        return Err(Error::Empty("training frames"));
    }
    let params = init_params(field, rng::stream_seed(config.seed, "field", 0))?;
    let mut trainer = Trainer::new(params, config.clone())?;
    let mut log = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        log.push(trainer.step(frames)?);
    }
    Ok((trainer.params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_loss_cases() {
        assert_eq!(loss_rgb(&[[0.2, 0.3, 0.4]], &[[0.2, 0.3, 0.4]]), 0.0);
        assert_eq!(loss_rgb(&[[0.0, 0.0, 0.0]], &[[1.0, 0.0, 0.0]]), 1.0);
    }

    #[test]
    fn huber_knee() {
        let beta = 0.1;
        assert_eq!(huber(0.0, beta), 0.0);
        assert!((huber(beta, beta) - 0.5 * beta).abs() < 1e-15);
        assert!((huber(2.0 * beta, beta) - 1.5 * beta).abs() < 1e-15);
        assert!((huber(-2.0 * beta, beta) - 1.5 * beta).abs() < 1e-15);
    }

    #[test]
    fn open_loss_cases() {
        let o = alloc::vec![0.3, -0.4, 1.2];
        let aligned = loss_open(&[o.clone()], &[Some(o.clone())]);
        assert!((aligned.value + 1.0).abs() < 1e-15);
        let scaled = loss_open(&[o.iter().map(|v| 5.0 * v).collect()], &[Some(o.clone())]);
        assert!((scaled.value + 1.0).abs() < 1e-15);
        let ortho = loss_open(&[alloc::vec![1.0, 0.0, 0.0]], &[Some(alloc::vec![0.0, 2.0, 0.0])]);
        assert_eq!(ortho.value, 0.0);
        let starved = loss_open(&[alloc::vec![0.0; 3]], &[Some(o)]);
        assert_eq!((starved.value, starved.n_used, starved.n_starved), (0.0, 1, 1));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            huber_beta: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
