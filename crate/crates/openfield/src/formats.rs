//! Binary and text formats for frames, fields, statistics and reports.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;
use openfield_core::field::{FieldParams, Grid};
use openfield_core::fusion::{finalize, Estimator, PointStats};
use openfield_core::math::{Aabb, Pose, Vec3};
use openfield_core::scenegen::{Camera, FeatureMap, Image, Intrinsics, LabeledPointCloud};

use crate::error::{CliError, Result};

pub const OFMP_MAGIC: &[u8; 4] = b"OFMP";
pub const OFLD_MAGIC: &[u8; 4] = b"OFLD";
pub const STATS_MAGIC: &[u8; 4] = b"OFST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F16,
    F32,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F16 => 0,
            Dtype::F32 => 1,
        }
    }
}

/// Decoded OFMP payload, values widened to f32.
#[derive(Debug, Clone, PartialEq)]
pub struct Ofmp {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub dtype: Dtype,
    pub data: Vec<f32>,
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(CliError::io(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(CliError::io(path))?))
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(CliError::io(path))?))
}

fn u32_of(v: usize, path: &Path) -> Result<u32> {
    u32::try_from(v).map_err(|_| CliError::format(path, "dimension exceeds u32"))
}

pub fn encode_ofmp(width: usize, height: usize, dim: usize, dtype: Dtype, values: &[f32]) -> Vec<u8> {
    debug_assert_eq!(values.len(), width * height * dim);
    let mut out = Vec::with_capacity(20 + values.len() * 4);
    out.extend_from_slice(OFMP_MAGIC);
    for v in [FORMAT_VERSION, width as u32, height as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[dtype.code(), 0, 0, 0]);
    for v in values {
        match dtype {
            Dtype::F16 => out.extend_from_slice(&f16::from_f32(*v).to_le_bytes()),
            Dtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_ofmp(bytes: &[u8], path: &Path) -> Result<Ofmp> {
    let bad = |m: &str| CliError::format(path, m);
    if bytes.len() < 24 || &bytes[..4] != OFMP_MAGIC {
        return Err(bad("not an OFMP file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != FORMAT_VERSION as usize {
        return Err(bad("unsupported OFMP version"));
    }
    let (width, height, dim) = (word(1), word(2), word(3));
    let dtype = match bytes[20] {
        0 => Dtype::F16,
        1 => Dtype::F32,
        _ => return Err(bad("unknown OFMP dtype")),
    };
    let n = width * height * dim;
    let body = &bytes[24..];
    let data: Vec<f32> = match dtype {
        Dtype::F16 if body.len() == 2 * n => body
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::F32 if body.len() == 4 * n => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => return Err(bad("OFMP payload length does not match header")),
    };
    Ok(Ofmp {
        width,
        height,
        dim,
        dtype,
        data,
    })
}

pub fn write_ofmp(path: &Path, width: usize, height: usize, dim: usize, dtype: Dtype, values: &[f32]) -> Result<()> {
    u32_of(width.max(height).max(dim), path)?;
    let mut w = create(path)?;
    w.write_all(&encode_ofmp(width, height, dim, dtype, values))
        .and_then(|_| w.flush())
        .map_err(CliError::io(path))
}

pub fn read_ofmp(path: &Path) -> Result<Ofmp> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode_ofmp(&bytes, path)
}

pub fn write_feature_map(path: &Path, map: &FeatureMap, dtype: Dtype) -> Result<()> {
    write_ofmp(path, map.width, map.height, map.dim, dtype, &map.data)
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let m = read_ofmp(path)?;
    Ok(FeatureMap {
        width: m.width,
        height: m.height,
        dim: m.dim,
        data: m.data,
    })
}

/// Depth planes are always stored as f32.
pub fn write_depth(path: &Path, depth: &Image<f64>) -> Result<()> {
    let v: Vec<f32> = depth.data.iter().map(|d| *d as f32).collect();
    write_ofmp(path, depth.width, depth.height, 1, Dtype::F32, &v)
}

pub fn read_depth(path: &Path) -> Result<Image<f64>> {
    let m = read_ofmp(path)?;
    if m.dim != 1 {
        return Err(CliError::format(path, "depth plane must have dim 1"));
    }
    Ok(Image {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|v| f64::from(*v)).collect(),
    })
}

/// Class ids as f32 (exact for any realistic class count).
pub fn write_semantics(path: &Path, sem: &Image<i32>) -> Result<()> {
    let v: Vec<f32> = sem.data.iter().map(|c| *c as f32).collect();
    write_ofmp(path, sem.width, sem.height, 1, Dtype::F32, &v)
}

pub fn read_semantics(path: &Path) -> Result<Image<i32>> {
    let m = read_ofmp(path)?;
    if m.dim != 1 {
        return Err(CliError::format(path, "semantics plane must have dim 1"));
    }
    Ok(Image {
        width: m.width,
        height: m.height,
        data: m.data.iter().map(|v| *v as i32).collect(),
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(path: &Path, img: &Image<[f64; 3]>) -> Result<()> {
    let mut w = create(path)?;
    let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    bytes.extend(img.data.iter().flat_map(|c| c.map(quantize)));
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn read_ppm(path: &Path) -> Result<Image<[f64; 3]>> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let bad = || CliError::format(path, "malformed P6 PPM");
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?.to_string());
    }
    i += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let width: usize = fields[1].parse().map_err(|_| bad())?;
    let height: usize = fields[2].parse().map_err(|_| bad())?;
    let body = bytes.get(i..).ok_or_else(bad)?;
    if body.len() != width * height * 3 {
        return Err(bad());
    }
    Ok(Image {
        width,
        height,
        data: body
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]].map(|v| f64::from(v) / 255.0))
            .collect(),
    })
}

pub fn write_ply(path: &Path, cloud: &LabeledPointCloud) -> Result<()> {
    let mut w = create(path)?;
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    s.push_str(&format!("element vertex {}\n", cloud.len()));
    for p in ["x", "y", "z"] {
        s.push_str(&format!("property float {p}\n"));
    }
    s.push_str("property int class_id\n");
    for p in ["red", "green", "blue"] {
        s.push_str(&format!("property uchar {p}\n"));
    }
    s.push_str("end_header\n");
    for (i, p) in cloud.positions.iter().enumerate() {
        let c = cloud.colors.as_ref().map_or([0.5; 3], |c| c[i]).map(quantize);
        s.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            p.x as f32, p.y as f32, p.z as f32, cloud.class_ids[i], c[0], c[1], c[2]
        ));
    }
    w.write_all(s.as_bytes()).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn read_ply(path: &Path) -> Result<LabeledPointCloud> {
    let r = open(path)?;
    let bad = |m: &str| CliError::format(path, m);
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(CliError::io(path))
    };
    if next()?.trim() != "ply" || next()?.trim() != "format ascii 1.0" {
        return Err(bad("expected an ASCII PLY header"));
    }
    let mut n = None;
    let mut props = Vec::new();
    loop {
        let line = next()?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["element", "vertex", count] => n = Some(count.parse::<usize>().map_err(|_| bad("bad vertex count"))?),
            ["property", _, name] => props.push(name.to_string()),
            ["comment", ..] | [] => {}
            _ => return Err(bad("unsupported header line")),
        }
    }
    let expected = ["x", "y", "z", "class_id", "red", "green", "blue"];
    if props != expected {
        return Err(bad("properties must be x y z class_id red green blue"));
    }
    let n = n.ok_or_else(|| bad("missing vertex element"))?;
    let mut cloud = LabeledPointCloud {
        positions: Vec::with_capacity(n),
        class_ids: Vec::with_capacity(n),
        colors: Some(Vec::with_capacity(n)),
    };
    for _ in 0..n {
        let line = next()?;
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(bad("vertex line must have 7 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        cloud.positions.push(Vec3::new(num(f[0])?, num(f[1])?, num(f[2])?));
        cloud.class_ids.push(f[3].parse().map_err(|_| bad("bad class id"))?);
        if let Some(c) = cloud.colors.as_mut() {
            c.push([num(f[4])? / 255.0, num(f[5])? / 255.0, num(f[6])? / 255.0]);
        }
    }
    Ok(cloud)
}

pub fn write_poses(path: &Path, cameras: &[Camera]) -> Result<()> {
    let mut w = create(path)?;
    let mut s = String::new();
    for cam in cameras {
        let m = cam.pose.to_matrix();
        let k = &cam.intrinsics;
        let row: Vec<String> = m
            .iter()
            .chain(&[k.fx, k.fy, k.cx, k.cy])
            .map(|v| format!("{v:e}"))
            .chain([k.width.to_string(), k.height.to_string()])
            .collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    w.write_all(s.as_bytes()).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn read_poses(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| CliError::format(path, format!("line {}: {m}", ln + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 22 {
            return Err(bad("expected 22 values"));
        }
        let v: Vec<f64> = f[..20]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad number"))?;
        let m: [f64; 16] = v[..16].try_into().expect("16 values");
        let intrinsics = Intrinsics {
            fx: v[16],
            fy: v[17],
            cx: v[18],
            cy: v[19],
            width: f[20].parse().map_err(|_| bad("bad width"))?,
            height: f[21].parse().map_err(|_| bad("bad height"))?,
        };
        out.push(Camera::new(Pose::from_matrix(&m), intrinsics)?);
    }
    Ok(out)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

/// OFLD checkpoint. The background color is not part of the format; the
/// caller supplies it on load.
pub fn encode_checkpoint(params: &FieldParams) -> Vec<u8> {
    let grids = [&params.density, &params.color, &params.feature];
    let mut out = Vec::new();
    out.extend_from_slice(OFLD_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    for v in [params.bbox.min, params.bbox.max].iter().flat_map(|p| [p.x, p.y, p.z]) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for g in grids {
        for r in g.res {
            put_u32(&mut out, r);
        }
        put_u32(&mut out, g.channels);
    }
    for g in grids {
        for v in &g.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() < n {
            return Err(CliError::format(self.path, "truncated checkpoint"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8], background: [f64; 3], path: &Path) -> Result<FieldParams> {
    let bad = |m: &str| CliError::format(path, m);
    let mut cur = Cursor { bytes, path };
    if cur.take(4)? != OFLD_MAGIC {
        return Err(bad("not an OFLD checkpoint"));
    }
    if cur.u32()? != FORMAT_VERSION as usize {
        return Err(bad("unsupported checkpoint version"));
    }
    let mut b = [0.0; 6];
    for v in b.iter_mut() {
        *v = cur.f64()?;
    }
    let mut shapes = Vec::new();
    for _ in 0..3 {
        let res = [cur.u32()?, cur.u32()?, cur.u32()?];
        shapes.push((res, cur.u32()?));
    }
    let mut grids = Vec::new();
    for (res, channels) in shapes {
        let mut g = Grid::filled(res, channels, 0.0);
        let raw = cur.take(4 * g.data.len())?;
        for (v, c) in g.data.iter_mut().zip(raw.chunks_exact(4)) {
            *v = f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        grids.push(g);
    }
    if !cur.bytes.is_empty() {
        return Err(bad("trailing bytes after checkpoint"));
    }
    let feature = grids.pop().expect("three grids");
    let color = grids.pop().expect("three grids");
    let density = grids.pop().expect("three grids");
    if density.channels != 1 || color.channels != 3 {
        return Err(bad("density must have 1 channel and color 3"));
    }
    Ok(FieldParams {
        bbox: Aabb {
            min: Vec3::new(b[0], b[1], b[2]),
            max: Vec3::new(b[3], b[4], b[5]),
        },
        density,
        color,
        feature,
        background,
    })
}

pub fn write_checkpoint(path: &Path, params: &FieldParams) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(&encode_checkpoint(params))
        .and_then(|_| w.flush())
        .map_err(CliError::io(path))
}

pub fn read_checkpoint(path: &Path, background: [f64; 3]) -> Result<FieldParams> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    decode_checkpoint(&bytes, background, path)
}

/// One fused point as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredStats {
    pub count: u32,
    pub mean: Vec<f32>,
    pub log_uncertainty: f32,
    pub covariance: Option<Vec<f32>>,
}

pub const MAX_COVARIANCE_DIM: usize = 32;

/// Header `OFST`, u32 version, u32 points, u32 dim, u8 has-covariance, 3 pad
/// bytes; then per point u32 count, f32 mean[D], f32 log_u and, when
/// present, the D×D covariance.
pub fn write_stats(path: &Path, stats: &[PointStats], dump_covariance: bool, estimator: Estimator) -> Result<()> {
    let dim = stats.first().map_or(0, PointStats::dim);
    if dump_covariance && dim > MAX_COVARIANCE_DIM {
        return Err(CliError::Invalid(format!(
            "covariance dump is limited to D <= {MAX_COVARIANCE_DIM}, got {dim}"
        )));
    }
    let mut out = Vec::new();
    out.extend_from_slice(STATS_MAGIC);
    put_u32(&mut out, FORMAT_VERSION as usize);
    put_u32(&mut out, stats.len());
    put_u32(&mut out, dim);
    out.extend_from_slice(&[u8::from(dump_covariance), 0, 0, 0]);
    for s in stats {
        out.extend_from_slice(&(s.count.min(u64::from(u32::MAX)) as u32).to_le_bytes());
        for m in &s.mean {
            out.extend_from_slice(&(*m as f32).to_le_bytes());
        }
        out.extend_from_slice(&(s.log_uncertainty as f32).to_le_bytes());
        if dump_covariance {
            for c in finalize(s, estimator).covariance {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
    }
    let mut w = create(path)?;
    w.write_all(&out).and_then(|_| w.flush()).map_err(CliError::io(path))
}

pub fn read_stats(path: &Path) -> Result<Vec<StoredStats>> {
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(CliError::io(path))?;
    let bad = || CliError::format(path, "malformed stats file");
    if bytes.len() < 20 || &bytes[..4] != STATS_MAGIC {
        return Err(bad());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != FORMAT_VERSION {
        return Err(bad());
    }
    let (n, dim, has_cov) = (word(8) as usize, word(12) as usize, bytes[16] != 0);
    let record = 4 * (2 + dim + if has_cov { dim * dim } else { 0 });
    if bytes.len() != 20 + n * record {
        return Err(bad());
    }
    let mut out = Vec::with_capacity(n);
    for p in 0..n {
        let base = 20 + p * record;
        let mean = (0..dim).map(|k| f32_at(base + 4 + 4 * k)).collect();
        let lu = base + 4 + 4 * dim;
        out.push(StoredStats {
            count: word(base),
            mean,
            log_uncertainty: f32_at(lu),
            covariance: has_cov.then(|| (0..dim * dim).map(|k| f32_at(lu + 4 + 4 * k)).collect()),
        });
    }
    Ok(out)
}

/// Rebuild in-memory statistics (without second moments) from disk.
pub fn stats_from_stored(stored: &[StoredStats]) -> Vec<PointStats> {
    stored
        .iter()
        .map(|s| {
            let mut p = PointStats::new(s.mean.len());
            p.count = u64::from(s.count);
            p.mean = s.mean.iter().map(|v| f64::from(*v)).collect();
            p.log_uncertainty = f64::from(s.log_uncertainty);
            p.undetermined = s.count < 2;
            p
        })
        .collect()
}

pub fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

pub(crate) fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::format(path, e.to_string())
}

/// Fixed-precision float for reproducible text output.
pub fn fmt_f(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.6}")
    }
}
