//! Uncertainty-driven novel view proposals.
//!
//! Targets are drawn with acceptance probability equal to their normalized
//! uncertainty; each camera sits a fixed offset (plus noise) from its target
//! and looks at it. The trained field vetoes cameras placed inside geometry
//! and, optionally, cameras whose line of sight to the target is blocked.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::fusion::PointStats;
use crate::math::{Aabb, Pose, Vec3};
use crate::rng;
use crate::scenegen::{encode_features, render_view, Camera, Codebook, Intrinsics, LabeledPointCloud, NoiseModel, PosedFrame, Scene};

/// Camera pose at `eye` looking at `target`. The camera's -z axis points at
/// the target, +x is `forward × up_hint` and +y completes a right-handed
/// frame. When `up_hint` is (nearly) parallel to the viewing direction, world
/// +y is used instead, or +x if that is parallel too.
pub fn lookat(eye: Vec3, target: Vec3, up_hint: Vec3) -> Result<Pose> {
    let to = target - eye;
    let dist = to.norm();
    if !(dist > 1e-9) {
        return Err(Error::DegenerateLookAt);
    }
    let forward = to / dist;
    let mut right = forward.cross(up_hint.normalized());
    if right.norm() < 1e-6 {
        let fallback = if forward.dot(Vec3::Y).abs() < 0.9 { Vec3::Y } else { Vec3::X };
        right = forward.cross(fallback);
    }
    let right = right.normalized();
    let up = right.cross(forward);
    Ok(Pose::from_axes(right, up, -forward, eye))
}

/// Empirical-rank normalization to `[0, 1]`. Valid points are ranked by
/// `log_u` with ties broken by index; invalid points get 1.
pub fn normalize_uncertainty(log_u: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if log_u.is_empty() {
        return Err(Error::Empty("uncertainty values"));
    }
    if valid.len() != log_u.len() {
        return Err(Error::LengthMismatch {
            expected: log_u.len(),
            actual: valid.len(),
        });
    }
    let mut order: Vec<usize> = (0..log_u.len()).filter(|&i| valid[i]).collect();
    order.sort_by(|&a, &b| log_u[a].total_cmp(&log_u[b]).then(a.cmp(&b)));
    let mut out = alloc::vec![1.0; log_u.len()];
    let n = order.len();
    if n > 1 {
        for (rank, &i) in order.iter().enumerate() {
            out[i] = rank as f64 / (n - 1) as f64;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetDraw {
    pub indices: Vec<usize>,
    /// The draw cap ran out before `n_wanted` targets were accepted.
    pub exhausted: bool,
}

/// Rejection sampling: draw a uniform point and `x ~ U[0,1]`, keep the point
/// when `x < u_norm`. At most `100 * n_wanted` draws.
pub fn sample_targets<R: Rng + ?Sized>(u_norm: &[f64], n_wanted: usize, rng: &mut R) -> TargetDraw {
    let mut indices = Vec::with_capacity(n_wanted);
    if u_norm.is_empty() || n_wanted == 0 {
        return TargetDraw {
            indices,
            exhausted: n_wanted > 0,
        };
    }
    let cap = 100 * n_wanted;
    let mut draws = 0;
    while indices.len() < n_wanted && draws < cap {
        draws += 1;
        let i = rng.random_range(0..u_norm.len());
        let x: f64 = rng.random();
        if x < u_norm[i] {
            indices.push(i);
        }
    }
    TargetDraw {
        exhausted: indices.len() < n_wanted,
        indices,
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct ViewSelConfig {
    pub offset_distance: f64,
    pub position_noise_std: f64,
    pub n_proposals: usize,
    /// Cameras where the field density exceeds this are inside geometry.
    pub density_threshold: f64,
    /// Minimum transmittance from camera to target.
    pub transmittance_threshold: f64,
    pub up_hint: Vec3,
    /// Disable to apply only the camera-position density test.
    pub check_transmittance: bool,
    /// Length of the segment end, next to the target surface, that the
    /// transmittance test skips.
    pub target_clearance: f64,
    pub segment_steps: usize,
    pub seed: u64,
}

impl Default for ViewSelConfig {
    fn default() -> Self {
        ViewSelConfig {
            offset_distance: 0.5,
            position_noise_std: 0.05,
            n_proposals: 16,
            density_threshold: 5.0,
            transmittance_threshold: 0.5,
            up_hint: Vec3::Z,
            check_transmittance: true,
            target_clearance: 0.15,
            segment_steps: 64,
            seed: 0,
        }
    }
}

impl ViewSelConfig {
    /// Offset 15% and noise 2% of the box diagonal.
    pub fn for_bbox(bbox: &Aabb) -> Self {
        let diag = bbox.diagonal();
        ViewSelConfig {
            offset_distance: 0.15 * diag,
            position_noise_std: 0.02 * diag,
            ..ViewSelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.offset_distance > 0.0) {
            return Err(Error::InvalidConfig("offset_distance must be positive".into()));
        }
        if !(self.density_threshold > 0.0) || !(self.transmittance_threshold > 0.0 && self.transmittance_threshold < 1.0) {
            return Err(Error::InvalidConfig("view selection thresholds out of range".into()));
        }
        if self.segment_steps == 0 {
            return Err(Error::InvalidConfig("segment_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    None,
    InsideGeometry,
    OccludedTarget,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::None => "none",
            Rejection::InsideGeometry => "inside_geometry",
            Rejection::OccludedTarget => "occluded_target",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewProposal {
    pub target: Vec3,
    pub position: Vec3,
    pub pose: Pose,
    pub source_point: usize,
    pub accepted: bool,
    pub rejection: Rejection,
}

/// Field transmittance from `from` towards `to`, stopping `clearance` short
/// of `to`.
pub fn segment_transmittance(params: &FieldParams, from: Vec3, to: Vec3, clearance: f64, steps: usize) -> f64 {
    let span = to - from;
    let len = span.norm() - clearance;
    if len <= 0.0 {
        return 1.0;
    }
    let dir = span.normalized();
    let dt = len / steps as f64;
    let optical: f64 = (0..steps)
        .map(|k| params.density_at(from + dir * ((k as f64 + 0.5) * dt)) * dt)
        .sum();
    libm::exp(-optical)
}

/// Judge a camera at `position` looking at `target`.
pub fn evaluate_position(params: &FieldParams, position: Vec3, target: Vec3, config: &ViewSelConfig) -> Rejection {
    if params.density_at(position) > config.density_threshold {
        return Rejection::InsideGeometry;
    }
    if config.check_transmittance {
        let t = segment_transmittance(params, position, target, config.target_clearance, config.segment_steps);
        if t < config.transmittance_threshold {
            return Rejection::OccludedTarget;
        }
    }
    Rejection::None
}

/// Propose camera poses around high-uncertainty points.
pub fn propose_views(
    params: &FieldParams,
    cloud: &LabeledPointCloud,
    stats: &[PointStats],
    config: &ViewSelConfig,
) -> Result<Vec<ViewProposal>> {
    config.validate()?;
    if stats.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            actual: stats.len(),
        });
    }
    let log_u: Vec<f64> = stats.iter().map(|s| s.log_uncertainty).collect();
    let valid: Vec<bool> = stats.iter().map(|s| s.count >= 2 && !s.undetermined).collect();
    let u_norm = normalize_uncertainty(&log_u, &valid)?;
    let draw = sample_targets(&u_norm, config.n_proposals, &mut rng::stream(config.seed, "view-targets", 0));
    let mut out = Vec::with_capacity(draw.indices.len());
    for (k, &idx) in draw.indices.iter().enumerate() {
        let mut r = rng::stream(config.seed, "view-proposal", k as u64);
        let target = cloud.positions[idx];
        let noise = Vec3::new(rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)) * config.position_noise_std;
        let position = target + rng::unit_vector(&mut r) * config.offset_distance + noise;
        let rejection = evaluate_position(params, position, target, config);
        let pose = lookat(position, target, config.up_hint)?;
        out.push(ViewProposal {
            target,
            position,
            pose,
            source_point: idx,
            accepted: rejection == Rejection::None,
            rejection,
        });
    }
    Ok(out)
}

/// Render ground truth at each accepted proposal and encode stub features.
/// Noise streams derive from `noise.seed` and the proposal index.
pub fn realize_views(
    scene: &Scene,
    proposals: &[ViewProposal],
    codebook: &Codebook,
    noise: &NoiseModel,
    intrinsics: Intrinsics,
) -> Result<Vec<PosedFrame>> {
    let mut frames = Vec::new();
    for (i, p) in proposals.iter().enumerate().filter(|(_, p)| p.accepted) {
        let camera = Camera::new(p.pose, intrinsics)?;
        let mut frame = render_view(scene, &camera);
        let mut n = noise.clone();
        n.seed = rng::stream_seed(noise.seed, "novel-view-noise", i as u64);
        frame.features = Some(encode_features(&frame.semantics, codebook, &n)?);
        frames.push(frame);
    }
    Ok(frames)
}
