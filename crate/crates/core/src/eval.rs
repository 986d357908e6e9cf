//! Open-vocabulary segmentation of point clouds and its scoring.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::fusion::{project_with_depth, Visibility};
use crate::math::{cosine, dot, l2_norm};
use crate::render::{render_image, RenderConfig, RenderPlanes};
use crate::scenegen::{Camera, Codebook, Image, LabeledPointCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subset {
    Head,
    Common,
    Tail,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Head => "head",
            Subset::Common => "common",
            Subset::Tail => "tail",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub labels: Vec<String>,
    /// Unit-norm rows, one per label.
    pub embeddings: Vec<Vec<f64>>,
    pub subsets: Vec<Subset>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Where query embeddings come from.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingSource<'a> {
    /// Labels `class_<k>` map to codebook entry `k`.
    Codebook(&'a Codebook),
    /// Externally computed rows (e.g. text-encoder outputs), matched by label.
    External { labels: &'a [String], rows: &'a [Vec<f64>] },
}

pub fn class_label(class_id: usize) -> String {
    format!("class_{class_id}")
}

/// Split label indices into head/common/tail by descending count. Sizes are
/// `n/3` each with the remainder going to head first, then common; ties keep
/// label order.
pub fn split_subsets(counts: &[usize]) -> Vec<Subset> {
    let n = counts.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let base = n / 3;
    let rem = n % 3;
    let head = base + usize::from(rem >= 1);
    let common = base + usize::from(rem >= 2);
    let mut out = vec![Subset::Tail; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < head {
            Subset::Head
        } else if rank < head + common {
            Subset::Common
        } else {
            Subset::Tail
        };
    }
    out
}

/// Build the query set; returns it with any warnings (renormalized rows).
pub fn build_query_set(
    labels: &[String],
    gt_counts: &[usize],
    source: EmbeddingSource<'_>,
) -> Result<(QuerySet, Vec<String>)> {
    if labels.is_empty() {
        return Err(Error::Empty("query labels"));
    }
    if gt_counts.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            actual: gt_counts.len(),
        });
    }
    let mut warnings = Vec::new();
    let mut embeddings = Vec::with_capacity(labels.len());
    for label in labels {
        let row: Vec<f64> = match source {
            EmbeddingSource::Codebook(cb) => label
                .strip_prefix("class_")
                .and_then(|k| k.parse::<usize>().ok())
                .and_then(|k| cb.embeddings.get(k))
                .cloned()
                .ok_or_else(|| Error::MissingLabel(label.clone()))?,
            EmbeddingSource::External { labels: ext, rows } => ext
                .iter()
                .position(|l| l == label)
                .and_then(|i| rows.get(i))
                .cloned()
                .ok_or_else(|| Error::MissingLabel(label.clone()))?,
        };
        let n = l2_norm(&row);
        if n < 1e-12 || !n.is_finite() {
            return Err(Error::NonFinite(format!("embedding of {label}")));
        }
        if (n - 1.0).abs() > 1e-6 {
            warnings.push(format!("embedding of {label} had norm {n:.6}; renormalized"));
        }
        embeddings.push(row.into_iter().map(|v| v / n).collect());
    }
    Ok((
        QuerySet {
            labels: labels.to_vec(),
            embeddings,
            subsets: split_subsets(gt_counts),
        },
        warnings,
    ))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<usize>,
    /// Zero-norm features assigned the fallback class 0.
    pub zero_norm: Vec<bool>,
}

/// Argmax of cosine similarity; ties go to the lowest index.
pub fn assign_labels(features: &[Vec<f64>], queries: &QuerySet) -> Assignment {
    let mut labels = Vec::with_capacity(features.len());
    let mut zero_norm = Vec::with_capacity(features.len());
    for f in features {
        let n = l2_norm(f);
        if n < 1e-12 {
            labels.push(0);
            zero_norm.push(true);
            continue;
        }
        let mut best = 0;
        let mut best_s = f64::NEG_INFINITY;
        for (k, q) in queries.embeddings.iter().enumerate() {
            let s = dot(f, q) / n;
            if s > best_s {
                best = k;
                best_s = s;
            }
        }
        labels.push(best);
        zero_norm.push(false);
    }
    Assignment { labels, zero_norm }
}

/// Per-point features before label assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentInputs {
    pub features: Vec<Vec<f64>>,
    /// Render-and-project only: the point was seen by no camera and was
    /// sampled from the field instead.
    pub fallback: Vec<bool>,
    /// Field is nearly transparent at the point.
    pub low_opacity: Vec<bool>,
}

/// Local opacity over one voxel below which a sampled point is flagged.
pub const LOW_OPACITY: f64 = 0.05;

/// Features queried directly from the field at each point.
pub fn segment_sample(params: &FieldParams, cloud: &LabeledPointCloud) -> SegmentInputs {
    let voxel = params.voxel_size();
    let mut features = Vec::with_capacity(cloud.len());
    let mut low_opacity = Vec::with_capacity(cloud.len());
    for p in &cloud.positions {
        let out = params.query(*p);
        low_opacity.push(1.0 - libm::exp(-out.sigma * voxel) < LOW_OPACITY);
        features.push(out.feature);
    }
    SegmentInputs {
        fallback: vec![false; cloud.len()],
        features,
        low_opacity,
    }
}

/// Render feature and depth images at every camera, project each point into
/// them (depth test against the rendered depth) and average the rendered
/// features it receives. Unseen points fall back to direct sampling.
pub fn segment_render_project(
    params: &FieldParams,
    cameras: &[Camera],
    cloud: &LabeledPointCloud,
    depth_tolerance: f64,
    render: &RenderConfig,
) -> Result<SegmentInputs> {
    if cameras.is_empty() {
        return Err(Error::Empty("render-and-project cameras"));
    }
    let dim = params.feature_dim();
    let mut sums = vec![vec![0.0; dim]; cloud.len()];
    let mut counts = vec![0usize; cloud.len()];
    let planes = RenderPlanes {
        color: false,
        depth: true,
        feature: true,
    };
    for (ci, cam) in cameras.iter().enumerate() {
        let img = render_image(params, cam, render, planes, ci as u64);
        let (Some(depth), Some(feat)) = (img.depth, img.feature) else {
            continue;
        };
        for (i, p) in cloud.positions.iter().enumerate() {
            if let Visibility::Visible { row, col, .. } =
                project_with_depth(*p, cam, |r, c| *depth.get(r, c), depth_tolerance)
            {
                for (s, v) in sums[i].iter_mut().zip(feat.pixel(row, col)) {
                    *s += f64::from(*v);
                }
                counts[i] += 1;
            }
        }
    }
    let sampled = segment_sample(params, cloud);
    let mut out = SegmentInputs {
        features: Vec::with_capacity(cloud.len()),
        fallback: Vec::with_capacity(cloud.len()),
        low_opacity: sampled.low_opacity.clone(),
    };
    for (i, sum) in sums.into_iter().enumerate() {
        if counts[i] == 0 {
            out.features.push(sampled.features[i].clone());
            out.fallback.push(true);
        } else {
            out.features.push(sum.into_iter().map(|s| s / counts[i] as f64).collect());
            out.fallback.push(false);
        }
    }
    Ok(out)
}

/// How classes with neither ground truth nor predictions enter the means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum EmptyClassRule {
    #[default]
    Exclude,
    IncludeAsZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationResult {
    pub predicted: Vec<usize>,
    /// `None` where the class has no ground truth and no predictions.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` where the class has no ground truth.
    pub per_class_acc: Vec<Option<f64>>,
    pub miou_all: f64,
    pub macc_all: f64,
    pub miou_head: f64,
    pub miou_common: f64,
    pub miou_tail: f64,
    pub macc_head: f64,
    pub macc_common: f64,
    pub macc_tail: f64,
}

/// Confusion-matrix metrics: `IoU = TP/(TP+FP+FN)`, `Acc = TP/(TP+FN)`.
/// Ground-truth ids outside the query set are ignored.
pub fn score(
    predicted: &[usize],
    gt: &[i32],
    queries: &QuerySet,
    rule: EmptyClassRule,
) -> Result<SegmentationResult> {
    if predicted.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            actual: predicted.len(),
        });
    }
    let k = queries.len();
    let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (&p, &g) in predicted.iter().zip(gt) {
        if g < 0 || g as usize >= k {
            continue;
        }
        let g = g as usize;
        if p == g {
            tp[g] += 1;
        } else {
            fn_[g] += 1;
            if p < k {
                fp[p] += 1;
            }
        }
    }
    let mut iou = Vec::with_capacity(k);
    let mut acc = Vec::with_capacity(k);
    for c in 0..k {
        let denom = tp[c] + fp[c] + fn_[c];
        iou.push((denom > 0).then(|| tp[c] as f64 / denom as f64));
        let gt_n = tp[c] + fn_[c];
        acc.push((gt_n > 0).then(|| tp[c] as f64 / gt_n as f64));
    }
    let mean = |vals: &[Option<f64>], subset: Option<Subset>| -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (c, v) in vals.iter().enumerate() {
            if subset.is_some_and(|s| queries.subsets[c] != s) {
                continue;
            }
            match (v, rule) {
                (Some(x), _) => {
                    sum += x;
                    n += 1;
                }
                (None, EmptyClassRule::IncludeAsZero) => n += 1,
                (None, EmptyClassRule::Exclude) => {}
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    };
    Ok(SegmentationResult {
        predicted: predicted.to_vec(),
        miou_all: mean(&iou, None),
        macc_all: mean(&acc, None),
        miou_head: mean(&iou, Some(Subset::Head)),
        miou_common: mean(&iou, Some(Subset::Common)),
        miou_tail: mean(&iou, Some(Subset::Tail)),
        macc_head: mean(&acc, Some(Subset::Head)),
        macc_common: mean(&acc, Some(Subset::Common)),
        macc_tail: mean(&acc, Some(Subset::Tail)),
        per_class_iou: iou,
        per_class_acc: acc,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum RelevancyScale {
    /// Per-image min-max of the cosine similarity.
    #[default]
    MinMax,
    /// Cosine similarity used as is.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevancyMap {
    /// RGB in `[0,1]`.
    pub image: Image<[f64; 3]>,
    /// Normalized similarity per pixel.
    pub values: Image<f64>,
    /// Min equals max, so every value was set to 0.5.
    pub degenerate: bool,
}

/// Blue (low) through green to red (high) for `t` in `[0,1]`.
pub fn relevancy_ramp(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    if t < 0.5 {
        let s = t * 2.0;
        [0.0, s, 1.0 - s]
    } else {
        let s = (t - 0.5) * 2.0;
        [s, 1.0 - s, 0.0]
    }
}

/// Relevancy heatmap of one query. Pixels whose normalized similarity is not
/// above `threshold` show the rendered color in grayscale.
pub fn relevancy_map(
    params: &FieldParams,
    camera: &Camera,
    query: &[f64],
    threshold: f64,
    scale: RelevancyScale,
    render: &RenderConfig,
) -> RelevancyMap {
    let planes = RenderPlanes {
        color: true,
        depth: false,
        feature: true,
    };
    let img = render_image(params, camera, render, planes, 0);
    let (w, h) = (camera.width(), camera.height());
    let color = img.color.unwrap_or_else(|| Image::filled(w, h, [0.0; 3]));
    let feat = img.feature.unwrap_or_else(|| crate::scenegen::FeatureMap::zeros(w, h, query.len()));
    let mut raw = Image::filled(w, h, 0.0);
    let mut buf = vec![0.0; feat.dim];
    for row in 0..h {
        for col in 0..w {
            for (b, v) in buf.iter_mut().zip(feat.pixel(row, col)) {
                *b = f64::from(*v);
            }
            raw.set(row, col, cosine(&buf, query).unwrap_or(0.0));
        }
    }
    let (lo, hi) = raw
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mut degenerate = false;
    let values = match scale {
        RelevancyScale::Raw => raw,
        RelevancyScale::MinMax => {
            let range = hi - lo;
            if !(range > 1e-12) {
                degenerate = true;
                Image::filled(w, h, 0.5)
            } else {
                Image {
                    width: w,
                    height: h,
                    data: raw.data.iter().map(|v| (v - lo) / range).collect(),
                }
            }
        }
    };
    let mut image = Image::filled(w, h, [0.0; 3]);
    for i in 0..w * h {
        let v = values.data[i];
        image.data[i] = if v > threshold && threshold < 1.0 {
            relevancy_ramp((v - threshold) / (1.0 - threshold))
        } else {
            let c = color.data[i];
            let g = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
            [g, g, g]
        };
    }
    RelevancyMap {
        image,
        values,
        degenerate,
    }
}

/// Labels `class_0 .. class_{n-1}`.
pub fn class_labels(n: usize) -> Vec<String> {
    (0..n).map(class_label).collect()
}

impl core::fmt::Display for Subset {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_queries() -> QuerySet {
        QuerySet {
            labels: class_labels(2),
            embeddings: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            subsets: vec![Subset::Head, Subset::Common],
        }
    }

    #[test]
    fn hand_confusion_matrix() {
        let r = score(&[0, 1, 1, 1], &[0, 0, 1, 1], &two_class_queries(), EmptyClassRule::Exclude).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou_all - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let q = two_class_queries();
        let perfect = score(&[0, 1, 1], &[0, 1, 1], &q, EmptyClassRule::Exclude).unwrap();
        assert_eq!((perfect.miou_all, perfect.macc_all), (1.0, 1.0));
        let disjoint = score(&[1, 0], &[0, 1], &q, EmptyClassRule::Exclude).unwrap();
        assert_eq!(disjoint.miou_all, 0.0);
        assert!(score(&[0], &[0, 1], &q, EmptyClassRule::Exclude).is_err());
    }

    #[test]
    fn subset_split_rule() {
        let s = split_subsets(&[100, 90, 5, 4, 2, 1]);
        use Subset::*;
        assert_eq!(s, vec![Head, Head, Common, Common, Tail, Tail]);
        let s51 = split_subsets(&(0..51).collect::<Vec<_>>());
        for sub in [Head, Common, Tail] {
            assert_eq!(s51.iter().filter(|x| **x == sub).count(), 17);
        }
    }

    #[test]
    fn assignment_is_scale_invariant() {
        let q = two_class_queries();
        let a = assign_labels(&[vec![0.2, 0.9], vec![2.0, 9.0], vec![0.0, 0.0]], &q);
        assert_eq!(a.labels, vec![1, 1, 0]);
        assert_eq!(a.zero_norm, vec![false, false, true]);
    }

    #[test]
    fn ramp_endpoints() {
        assert_eq!(relevancy_ramp(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(relevancy_ramp(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(relevancy_ramp(1.0), [1.0, 0.0, 0.0]);
    }
}
