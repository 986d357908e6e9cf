//! Multi-view feature fusion and per-point uncertainty.
//!
//! Every feature map is projected onto a point cloud. Each point keeps a
//! streaming (Welford) mean and co-moment matrix of the features it receives;
//! its uncertainty is the generalized variance `det Σ`, stored as a log.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::psd_log_det;
use crate::math::Vec3;
use crate::scenegen::{Codebook, LabeledPointCloud, PosedFrame};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Visibility {
    Visible { row: usize, col: usize, depth: f64 },
    Occluded,
    OutOfView,
}

/// Nearest-pixel projection with a depth-consistency occlusion test against
/// the frame's depth plane.
pub fn project_point(p: Vec3, frame: &PosedFrame, depth_tolerance: f64) -> Visibility {
    project_with_depth(p, &frame.camera, |r, c| *frame.depth.get(r, c), depth_tolerance)
}

pub(crate) fn project_with_depth(
    p: Vec3,
    camera: &crate::scenegen::Camera,
    depth_at: impl Fn(usize, usize) -> f64,
    depth_tolerance: f64,
) -> Visibility {
    let Some(proj) = camera.project(p) else {
        return Visibility::OutOfView;
    };
    let Some((row, col)) = camera.pixel_of(&proj) else {
        return Visibility::OutOfView;
    };
    let observed = depth_at(row, col);
    if observed > 0.0 && (proj.depth - observed).abs() <= depth_tolerance {
        Visibility::Visible {
            row,
            col,
            depth: proj.depth,
        }
    } else {
        Visibility::Occluded
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum Estimator {
    /// Divide the co-moment by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

/// Streaming per-point feature statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PointStats {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Row-major `D x D` co-moment `Σ (x - μ)(x - μ)ᵀ`.
    pub m2: Vec<f64>,
    /// `ln det Σ` once finalized: `-inf` for a singular covariance, `+inf`
    /// for points with fewer than two observations.
    pub log_uncertainty: f64,
    /// Set when `count < 2` and the uncertainty is the maximal sentinel.
    pub undetermined: bool,
}

impl PointStats {
    pub fn new(dim: usize) -> Self {
        PointStats {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
            log_uncertainty: f64::INFINITY,
            undetermined: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `det Σ`; may underflow to 0 for large `D`.
    pub fn uncertainty(&self) -> f64 {
        libm::exp(self.log_uncertainty)
    }

    pub fn is_determined(&self) -> bool {
        !self.undetermined
    }
}

pub fn welford_update(stats: &mut PointStats, x: &[f64]) {
    let d = stats.dim();
    stats.count += 1;
    let n = stats.count as f64;
    let mut delta_old = vec![0.0; d];
    for i in 0..d {
        delta_old[i] = x[i] - stats.mean[i];
        stats.mean[i] += delta_old[i] / n;
    }
    for i in 0..d {
        let delta_new = x[i] - stats.mean[i];
        for j in 0..d {
            stats.m2[j * d + i] += delta_old[j] * delta_new;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finalized {
    pub covariance: Vec<f64>,
    pub log_uncertainty: f64,
    pub undetermined: bool,
}

impl Finalized {
    pub fn uncertainty(&self) -> f64 {
        libm::exp(self.log_uncertainty)
    }
}

/// Symmetrized covariance and its PSD-clamped log-determinant. Fewer than two
/// observations yield the `+inf` sentinel.
pub fn finalize(stats: &PointStats, estimator: Estimator) -> Finalized {
    let d = stats.dim();
    if stats.count < 2 {
        return Finalized {
            covariance: vec![0.0; d * d],
            log_uncertainty: f64::INFINITY,
            undetermined: true,
        };
    }
    let denom = match estimator {
        Estimator::Population => stats.count as f64,
        Estimator::Sample => (stats.count - 1) as f64,
    };
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            cov[i * d + j] = 0.5 * (stats.m2[i * d + j] + stats.m2[j * d + i]) / denom;
        }
    }
    let log_u = psd_log_det(&cov, d);
    Finalized {
        covariance: cov,
        log_uncertainty: log_u,
        undetermined: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(default, deny_unknown_fields)
)]
pub struct FusionConfig {
    /// Maximum |projected depth - observed depth| for a point to count as seen.
    pub depth_tolerance: f64,
    pub estimator: Estimator,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            depth_tolerance: 0.05,
            estimator: Estimator::Population,
        }
    }
}

/// Accumulate every visible frame feature into per-point statistics and
/// finalize them.
pub fn fuse(cloud: &LabeledPointCloud, frames: &[PosedFrame], config: &FusionConfig) -> Result<Vec<PointStats>> {
    let Some(dim) = frames.iter().find_map(|f| f.features.as_ref().map(|m| m.dim)) else {
        return Err(Error::Empty("frames with feature maps"));
    };
    let mut stats: Vec<PointStats> = (0..cloud.len()).map(|_| PointStats::new(dim)).collect();
    accumulate(&mut stats, cloud, frames, config)?;
    finalize_all(&mut stats, config.estimator);
    Ok(stats)
}

/// Add observations from `frames` to existing accumulators (no finalize).
pub fn accumulate(
    stats: &mut [PointStats],
    cloud: &LabeledPointCloud,
    frames: &[PosedFrame],
    config: &FusionConfig,
) -> Result<()> {
    let mut x = Vec::new();
    for frame in frames {
        let fm = frame
            .features
            .as_ref()
            .ok_or(Error::Empty("feature map on a fusion frame"))?;
        if fm.dim != stats.first().map_or(fm.dim, PointStats::dim) {
            return Err(Error::LengthMismatch {
                expected: stats[0].dim(),
                actual: fm.dim,
            });
        }
        for (s, p) in stats.iter_mut().zip(&cloud.positions) {
            if let Visibility::Visible { row, col, .. } = project_point(*p, frame, config.depth_tolerance) {
                x.clear();
                x.extend(fm.pixel(row, col).iter().map(|v| f64::from(*v)));
                welford_update(s, &x);
            }
        }
    }
    Ok(())
}

pub fn finalize_all(stats: &mut [PointStats], estimator: Estimator) {
    for s in stats.iter_mut() {
        let f = finalize(s, estimator);
        s.log_uncertainty = f.log_uncertainty;
        s.undetermined = f.undetermined;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDiagnostic {
    /// `‖o_gt - μ‖₂` per point.
    pub errors: Vec<f64>,
    pub gt_embeddings: Vec<Vec<f64>>,
    /// Pearson correlation of `(ln u, ε)` over valid points.
    pub pearson_r: f64,
    /// Pearson correlation of `(u, ε)` on the linear scale.
    pub pearson_r_linear: f64,
    /// Rank correlation; identical for `u` and `ln u`.
    pub spearman_r: f64,
    /// Points with at least two observations and a non-singular covariance.
    pub n_valid: usize,
}

pub fn error_and_correlation(
    stats: &[PointStats],
    cloud: &LabeledPointCloud,
    codebook: &Codebook,
) -> Result<ErrorDiagnostic> {
    if stats.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            expected: cloud.len(),
            actual: stats.len(),
        });
    }
    let mut errors = Vec::with_capacity(stats.len());
    let mut gt_embeddings = Vec::with_capacity(stats.len());
    let (mut log_u, mut lin_u, mut eps) = (Vec::new(), Vec::new(), Vec::new());
    for (s, &class) in stats.iter().zip(&cloud.class_ids) {
        let gt = codebook.embedding(class).ok_or(Error::UnknownClass(class))?;
        let e = libm::sqrt(gt.iter().zip(&s.mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>());
        errors.push(e);
        gt_embeddings.push(gt.to_vec());
        if s.count >= 2 && s.log_uncertainty.is_finite() {
            log_u.push(s.log_uncertainty);
            lin_u.push(s.uncertainty());
            eps.push(e);
        }
    }
    let n_valid = eps.len();
    let undefined = || Error::UndefinedCorrelation(n_valid);
    let pearson_r = pearson(&log_u, &eps).ok_or_else(undefined)?;
    Ok(ErrorDiagnostic {
        errors,
        gt_embeddings,
        pearson_r,
        pearson_r_linear: pearson(&lin_u, &eps).unwrap_or(0.0),
        spearman_r: spearman(&log_u, &eps).ok_or_else(undefined)?,
        n_valid,
    })
}

/// Pearson correlation; `None` with fewer than two points or zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for k in i..=j {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn textbook_stream() {
        let mut s = PointStats::new(1);
        for x in [1.0, 2.0, 3.0] {
            welford_update(&mut s, &[x]);
        }
        assert_eq!(s.mean, vec![2.0]);
        assert!((s.m2[0] / 2.0 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_stream_has_zero_uncertainty() {
        let mut s = PointStats::new(3);
        for _ in 0..5 {
            welford_update(&mut s, &[0.1, -0.7, 0.3]);
        }
        assert!(s.m2.iter().all(|v| v.abs() < 1e-12));
        let f = finalize(&s, Estimator::Population);
        assert_eq!(f.uncertainty(), 0.0);
    }

    #[test]
    fn too_few_observations_is_sentinel() {
        let mut s = PointStats::new(2);
        welford_update(&mut s, &[1.0, 2.0]);
        let f = finalize(&s, Estimator::Sample);
        assert!(f.undetermined);
        assert_eq!(f.log_uncertainty, f64::INFINITY);
    }

    #[test]
    fn diagonal_covariance_determinant() {
        // population covariance diag(4, 9) from four points
        let mut s = PointStats::new(2);
        for p in [[2.0, 3.0], [-2.0, -3.0], [2.0, -3.0], [-2.0, 3.0]] {
            welford_update(&mut s, &p);
        }
        let f = finalize(&s, Estimator::Population);
        assert!((f.uncertainty() - 36.0).abs() < 1e-9);
    }

    #[test]
    fn perfectly_linear_pairs() {
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((r - 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0], &[1.0]).is_none());
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![1.5, 0.0, 1.5]);
    }
}
