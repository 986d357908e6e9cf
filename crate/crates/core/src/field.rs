//! Voxel-grid radiance field with an open-set feature channel.
//!
//! Three lattices span the scene box: raw density logits, raw color logits and
//! raw features. A query trilinearly interpolates each lattice at the point,
//! then applies `softplus` to density, `sigmoid` to color and nothing to
//! features. Gradients are closed-form. The view direction does not enter the
//! field (Lambertian); [`FieldParams::query_dir`] accepts and ignores it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{sigmoid, softplus, softplus_inverse, Aabb, Vec3};
use crate::rng;

/// Dense lattice, x fastest, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub res: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn filled(res: [usize; 3], channels: usize, value: f64) -> Self {
        Grid {
            res,
            channels,
            data: vec![value; res[0] * res[1] * res[2] * channels],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.res[0] * self.res[1] * self.res[2]
    }

    /// Offset of the first channel of node `(i, j, k)`.
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        ((k * self.res[1] + j) * self.res[0] + i) * self.channels
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> &[f64] {
        let o = self.offset(i, j, k);
        &self.data[o..o + self.channels]
    }

    pub fn node_mut(&mut self, i: usize, j: usize, k: usize) -> &mut [f64] {
        let o = self.offset(i, j, k);
        &mut self.data[o..o + self.channels]
    }

    /// Spacing between lattice nodes along each axis.
    pub fn spacing(&self, bbox: &Aabb) -> Vec3 {
        let s = bbox.size();
        Vec3::new(
            s.x / (self.res[0] - 1) as f64,
            s.y / (self.res[1] - 1) as f64,
            s.z / (self.res[2] - 1) as f64,
        )
    }

    fn zeros_like(&self) -> Grid {
        Grid::filled(self.res, self.channels, 0.0)
    }
}

/// The eight lattice nodes around a point and their trilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corners {
    /// Node offsets divided by the channel count (node indices).
    pub nodes: [usize; 8],
    pub weights: [f64; 8],
}

impl Corners {
    fn locate(bbox: &Aabb, res: [usize; 3], x: Vec3) -> Option<Corners> {
        if !bbox.contains(x) {
            return None;
        }
        let size = bbox.size();
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let u = (x[a] - bbox.min[a]) / size[a] * (res[a] - 1) as f64;
            let i = (libm::floor(u) as usize).min(res[a] - 2);
            cell[a] = i;
            frac[a] = u - i as f64;
        }
        let mut nodes = [0usize; 8];
        let mut weights = [0.0f64; 8];
        for (c, (n, w)) in nodes.iter_mut().zip(weights.iter_mut()).enumerate() {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            *n = ((cell[2] + dz) * res[1] + cell[1] + dy) * res[0] + cell[0] + dx;
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            *w = wx * wy * wz;
        }
        Some(Corners { nodes, weights })
    }

    fn interpolate(&self, grid: &Grid, out: &mut [f64]) {
        let ch = grid.channels;
        out.iter_mut().for_each(|v| *v = 0.0);
        for (n, w) in self.nodes.iter().zip(&self.weights) {
            let base = n * ch;
            for (o, v) in out.iter_mut().zip(&grid.data[base..base + ch]) {
                *o += w * v;
            }
        }
    }

    fn scatter(&self, grid: &mut Grid, upstream: &[f64]) {
        let ch = grid.channels;
        for (n, w) in self.nodes.iter().zip(&self.weights) {
            let base = n * ch;
            for (g, u) in grid.data[base..base + ch].iter_mut().zip(upstream) {
                *g += w * u;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldConfig {
    pub bbox: Aabb,
    pub density_res: [usize; 3],
    pub color_res: [usize; 3],
    pub feature_res: [usize; 3],
    pub feature_dim: usize,
    /// Color reported for queries outside the box.
    pub background: [f64; 3],
    /// Density of a freshly initialized field.
    pub init_density: f64,
    pub feature_init_std: f64,
}

impl FieldConfig {
    pub fn uniform(bbox: Aabb, res: usize, feature_dim: usize) -> Self {
        FieldConfig {
            bbox,
            density_res: [res; 3],
            color_res: [res; 3],
            feature_res: [res; 3],
            feature_dim,
            background: [0.0; 3],
            init_density: 0.01,
            feature_init_std: 1e-2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::InvalidConfig("field bbox must have min < max".into()));
        }
        for res in [self.density_res, self.color_res, self.feature_res] {
            if res.iter().any(|&r| r < 2) {
                return Err(Error::InvalidConfig("grid resolution must be at least 2 per axis".into()));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if !(self.init_density > 0.0) {
            return Err(Error::InvalidConfig("init_density must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable field parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub bbox: Aabb,
    pub density: Grid,
    pub color: Grid,
    pub feature: Grid,
    pub background: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldOutput {
    pub sigma: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

/// Per-query intermediates reused by the backward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCache {
    dc: Option<Corners>,
    f: Option<Corners>,
    raw_density: f64,
    raw_color: [f64; 3],
    pub sigma: f64,
    pub color: [f64; 3],
}

/// Upstream derivatives of a scalar loss with respect to one query's outputs.
#[derive(Debug, Clone, Copy)]
pub struct FieldUpstream<'a> {
    pub sigma: f64,
    pub color: [f64; 3],
    pub feature: &'a [f64],
}

/// Gradient buffer shaped like [`FieldParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub density: Grid,
    pub color: Grid,
    pub feature: Grid,
}

impl FieldGrads {
    pub fn zeros_like(params: &FieldParams) -> Self {
        FieldGrads {
            density: params.density.zeros_like(),
            color: params.color.zeros_like(),
            feature: params.feature.zeros_like(),
        }
    }

    pub fn clear(&mut self) {
        for g in [&mut self.density, &mut self.color, &mut self.feature] {
            g.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        [&self.density, &self.color, &self.feature]
            .iter()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for g in [&mut self.density, &mut self.color, &mut self.feature] {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        for (a, b) in [
            (&mut self.density, &other.density),
            (&mut self.color, &other.color),
            (&mut self.feature, &other.feature),
        ] {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
    }
}

pub fn init_params(config: &FieldConfig, seed: u64) -> Result<FieldParams> {
    config.validate()?;
    let mut feature = Grid::filled(config.feature_res, config.feature_dim, 0.0);
    let mut rng = rng::stream(seed, "field-init", 0);
    for v in feature.data.iter_mut() {
        *v = config.feature_init_std * rng::normal(&mut rng);
    }
    Ok(FieldParams {
        bbox: config.bbox,
        density: Grid::filled(config.density_res, 1, softplus_inverse(config.init_density)),
        color: Grid::filled(config.color_res, 3, 0.0),
        feature,
        background: config.background,
    })
}

impl FieldParams {
    pub fn feature_dim(&self) -> usize {
        self.feature.channels
    }

    /// Mean lattice spacing of the density grid.
    pub fn voxel_size(&self) -> f64 {
        let s = self.density.spacing(&self.bbox);
        (s.x + s.y + s.z) / 3.0
    }

    pub fn is_finite(&self) -> bool {
        [&self.density, &self.color, &self.feature]
            .iter()
            .all(|g| g.data.iter().all(|v| v.is_finite()))
    }

    pub fn query(&self, x: Vec3) -> FieldOutput {
        let mut feature = vec![0.0; self.feature_dim()];
        let c = self.eval(x, &mut feature);
        FieldOutput {
            sigma: c.sigma,
            color: c.color,
            feature,
        }
    }

    /// Query with a viewing direction, which has no effect.
    pub fn query_dir(&self, x: Vec3, _direction: Vec3) -> FieldOutput {
        self.query(x)
    }

    /// Density only; cheaper than a full query.
    pub fn density_at(&self, x: Vec3) -> f64 {
        match Corners::locate(&self.bbox, self.density.res, x) {
            None => 0.0,
            Some(c) => {
                let mut raw = [0.0];
                c.interpolate(&self.density, &mut raw);
                softplus(raw[0])
            }
        }
    }

    /// Query writing the feature into `feature`; returns the cache needed by
    /// [`FieldParams::backward`].
    pub fn eval(&self, x: Vec3, feature: &mut [f64]) -> SampleCache {
        let dc = Corners::locate(&self.bbox, self.density.res, x);
        let f = if self.feature.res == self.density.res {
            dc
        } else {
            Corners::locate(&self.bbox, self.feature.res, x)
        };
        let Some(dcorn) = dc else {
            feature.iter_mut().for_each(|v| *v = 0.0);
            return SampleCache {
                dc: None,
                f: None,
                raw_density: 0.0,
                raw_color: [0.0; 3],
                sigma: 0.0,
                color: self.background,
            };
        };
        let mut raw_density = [0.0];
        dcorn.interpolate(&self.density, &mut raw_density);
        let ccorn = if self.color.res == self.density.res {
            dcorn
        } else {
            Corners::locate(&self.bbox, self.color.res, x).unwrap_or(dcorn)
        };
        let mut raw_color = [0.0; 3];
        ccorn.interpolate(&self.color, &mut raw_color);
        if let Some(fc) = f {
            fc.interpolate(&self.feature, feature);
        }
        SampleCache {
            dc: Some(dcorn),
            f,
            raw_density: raw_density[0],
            raw_color,
            sigma: softplus(raw_density[0]),
            color: raw_color.map(sigmoid),
        }
    }

    /// Chain rule through the activations and trilinear weights, accumulating
    /// into `grads`.
    pub fn backward(&self, x: Vec3, cache: &SampleCache, upstream: &FieldUpstream<'_>, grads: &mut FieldGrads) {
        let Some(dcorn) = cache.dc else {
            return;
        };
        let d_raw_density = upstream.sigma * sigmoid(cache.raw_density);
        if d_raw_density != 0.0 {
            dcorn.scatter(&mut grads.density, &[d_raw_density]);
        }
        let mut d_raw_color = [0.0; 3];
        for c in 0..3 {
            let s = cache.color[c];
            d_raw_color[c] = upstream.color[c] * s * (1.0 - s);
        }
        if d_raw_color.iter().any(|v| *v != 0.0) {
            let ccorn = if self.color.res == self.density.res {
                dcorn
            } else {
                Corners::locate(&self.bbox, self.color.res, x).unwrap_or(dcorn)
            };
            ccorn.scatter(&mut grads.color, &d_raw_color);
        }
        if let Some(fc) = cache.f {
            if upstream.feature.iter().any(|v| *v != 0.0) {
                fc.scatter(&mut grads.feature, upstream.feature);
            }
        }
    }

    pub fn query_backward(&self, x: Vec3, upstream: &FieldUpstream<'_>, grads: &mut FieldGrads) {
        let mut scratch = vec![0.0; self.feature_dim()];
        let cache = self.eval(x, &mut scratch);
        self.backward(x, &cache, upstream, grads);
    }

    /// World position of lattice node `(i, j, k)` of `grid`.
    pub fn node_position(&self, grid: &Grid, i: usize, j: usize, k: usize) -> Vec3 {
        let s = grid.spacing(&self.bbox);
        self.bbox.min + Vec3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn params(seed: u64) -> FieldParams {
        let cfg = FieldConfig {
            feature_res: [3, 4, 5],
            ..FieldConfig::uniform(Aabb::new(Vec3::splat(-1.0), Vec3::new(1.0, 2.0, 1.5)), 4, 3)
        };
        let mut p = init_params(&cfg, seed).unwrap();
        let mut r = rng::stream(seed, "test", 0);
        for g in [&mut p.density, &mut p.color, &mut p.feature] {
            g.data.iter_mut().for_each(|v| *v = r.random::<f64>() * 4.0 - 2.0);
        }
        p
    }

    #[test]
    fn fresh_field_is_near_transparent_gray() {
        let cfg = FieldConfig::uniform(Aabb::new(Vec3::splat(-1.0), Vec3::splat(1.0)), 5, 4);
        let p = init_params(&cfg, 3).unwrap();
        let out = p.query(Vec3::new(0.1, -0.3, 0.7));
        assert!((out.sigma - 0.01).abs() < 1e-6);
        assert_eq!(out.color, [0.5, 0.5, 0.5]);
        assert_eq!(p, init_params(&cfg, 3).unwrap());
    }

    #[test]
    fn node_query_returns_node_activations() {
        let p = params(1);
        let x = p.node_position(&p.density, 2, 1, 3);
        let out = p.query(x);
        assert!((out.sigma - softplus(p.density.node(2, 1, 3)[0])).abs() < 1e-12);
        for c in 0..3 {
            assert!((out.color[c] - sigmoid(p.color.node(2, 1, 3)[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_midpoint_interpolates_logits() {
        let p = params(2);
        let a = p.node_position(&p.density, 1, 1, 1);
        let b = p.node_position(&p.density, 2, 1, 1);
        let (ra, rb) = (p.density.node(1, 1, 1)[0], p.density.node(2, 1, 1)[0]);
        let out = p.query((a + b) * 0.5);
        assert!((out.sigma - softplus(0.5 * (ra + rb))).abs() < 1e-12);
    }

    #[test]
    fn outside_box_is_transparent() {
        let p = params(3);
        let out = p.query(Vec3::new(5.0, 0.0, 0.0));
        assert_eq!(out.sigma, 0.0);
        assert_eq!(out.color, p.background);
        assert!(out.feature.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = params(4);
        let mut g = FieldGrads::zeros_like(&p);
        let zero = vec![0.0; p.feature_dim()];
        p.query_backward(
            Vec3::new(0.2, 0.4, 0.1),
            &FieldUpstream {
                sigma: 0.0,
                color: [0.0; 3],
                feature: &zero,
            },
            &mut g,
        );
        assert_eq!(g, FieldGrads::zeros_like(&p));
    }

    #[test]
    fn sigma_corner_gradient_is_weight_times_softplus_slope() {
        let p = params(5);
        let x = Vec3::new(0.13, 0.77, -0.21);
        let corners = Corners::locate(&p.bbox, p.density.res, x).unwrap();
        let mut raw = [0.0];
        corners.interpolate(&p.density, &mut raw);
        let mut g = FieldGrads::zeros_like(&p);
        let zero = vec![0.0; p.feature_dim()];
        p.query_backward(
            x,
            &FieldUpstream {
                sigma: 1.0,
                color: [0.0; 3],
                feature: &zero,
            },
            &mut g,
        );
        for (n, w) in corners.nodes.iter().zip(&corners.weights) {
            assert!((g.density.data[*n] - w * sigmoid(raw[0])).abs() < 1e-14);
        }
    }
}
