//! Gray-level co-occurrence matrices and the 13 Haralick descriptors.
//!
//! Each segment is quantized per band with its own min-max range, then four
//! symmetric distance-1 GLCMs (0°, 45°, 90°, 135°) are accumulated over
//! pixel pairs lying entirely inside the segment. A band contributes a
//! direction-major block of 4 × 13 values (or 13 with `direction_mean`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Exec;
use crate::raster::MultibandRaster;
use crate::segset::{Label, SegmentRecord};

pub const N_FEATURES: usize = 13;

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "angular_second_moment",
    "contrast",
    "correlation",
    "sum_of_squares_variance",
    "inverse_difference_moment",
    "sum_average",
    "sum_variance",
    "sum_entropy",
    "entropy",
    "difference_variance",
    "difference_entropy",
    "info_measure_correlation_1",
    "info_measure_correlation_2",
];

#[derive(Debug, Error)]
pub enum TextureError {
    #[error("no in-segment pixel pair for direction {0:?}")]
    NoPairs(Direction),
    #[error("quantization needs at least 2 levels, got {0}")]
    Levels(usize),
    #[error("empty segment")]
    EmptySegment,
    #[error("segment {segment_id} of region {region_id}: no raster for region")]
    MissingRaster { region_id: u32, segment_id: u32 },
    #[error("pixel ({0}, {1}) outside raster")]
    OutOfBounds(u32, u32),
    #[error("unknown channel {0}")]
    UnknownChannel(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    D0,
    D45,
    D90,
    D135,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::D0,
        Direction::D45,
        Direction::D90,
        Direction::D135,
    ];

    /// Pixel offset (dx, dy) with y growing downwards.
    pub fn offset(self) -> (i64, i64) {
        match self {
            Direction::D0 => (1, 0),
            Direction::D45 => (1, -1),
            Direction::D90 => (0, -1),
            Direction::D135 => (-1, -1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    pub levels: usize,
    pub direction_mean: bool,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self {
            levels: 64,
            direction_mean: false,
        }
    }
}

impl TextureConfig {
    pub fn block_len(&self) -> usize {
        if self.direction_mean {
            N_FEATURES
        } else {
            N_FEATURES * Direction::ALL.len()
        }
    }
}

/// Linear min-max quantization into `[0, levels)`. A constant input maps to 0.
pub fn quantize(values: &[f64], levels: usize) -> Result<Vec<u16>, TextureError> {
    if levels < 2 || levels > u16::MAX as usize + 1 {
        return Err(TextureError::Levels(levels));
    }
    if values.is_empty() {
        return Err(TextureError::EmptySegment);
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let top = (levels - 1) as f64;
    Ok(values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * levels as f64).floor().min(top) as u16
            } else {
                0
            }
        })
        .collect())
}

/// Quantized levels of one band over a segment, laid out on its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedSegment {
    pub levels: usize,
    pub width: usize,
    pub height: usize,
    /// `None` marks bbox cells outside the segment.
    pub cells: Vec<Option<u16>>,
}

impl QuantizedSegment {
    /// Builds from `(x, y, level)` triples in any order.
    pub fn from_pixels(levels: usize, pixels: &[(u32, u32, u16)]) -> Result<Self, TextureError> {
        if pixels.is_empty() {
            return Err(TextureError::EmptySegment);
        }
        let x0 = pixels.iter().map(|p| p.0).min().unwrap();
        let x1 = pixels.iter().map(|p| p.0).max().unwrap();
        let y0 = pixels.iter().map(|p| p.1).min().unwrap();
        let y1 = pixels.iter().map(|p| p.1).max().unwrap();
        let width = (x1 - x0 + 1) as usize;
        let height = (y1 - y0 + 1) as usize;
        let mut cells = vec![None; width * height];
        for &(x, y, l) in pixels {
            cells[(y - y0) as usize * width + (x - x0) as usize] = Some(l);
        }
        Ok(Self {
            levels,
            width,
            height,
            cells,
        })
    }

    /// A fully populated rectangular patch.
    pub fn from_grid(levels: usize, width: usize, grid: &[u16]) -> Self {
        Self {
            levels,
            width,
            height: grid.len() / width,
            cells: grid.iter().map(|&l| Some(l)).collect(),
        }
    }

    pub fn quantize_band(
        raster: &MultibandRaster,
        band: usize,
        pixels: &[(u32, u32)],
        levels: usize,
    ) -> Result<Self, TextureError> {
        for &(x, y) in pixels {
            if x as usize >= raster.width() || y as usize >= raster.height() {
                return Err(TextureError::OutOfBounds(x, y));
            }
        }
        let values: Vec<f64> = pixels
            .iter()
            .map(|&(x, y)| raster.get(band, x as usize, y as usize) as f64)
            .collect();
        let q = quantize(&values, levels)?;
        let triples: Vec<_> = pixels.iter().zip(q).map(|(&(x, y), l)| (x, y, l)).collect();
        Self::from_pixels(levels, &triples)
    }

    fn at(&self, x: i64, y: i64) -> Option<u16> {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return None;
        }
        self.cells[y as usize * self.width + x as usize]
    }
}

/// Normalized symmetric co-occurrence matrix, row-major `levels × levels`.
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    pub levels: usize,
    pub matrix: Vec<f64>,
    pub direction: Direction,
    pub distance: usize,
}

impl Glcm {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.levels + j]
    }

    /// Wraps an already normalized symmetric matrix.
    pub fn from_normalized(levels: usize, matrix: Vec<f64>) -> Self {
        assert_eq!(matrix.len(), levels * levels);
        Self {
            levels,
            matrix,
            direction: Direction::D0,
            distance: 1,
        }
    }
}

pub fn glcm(
    q: &QuantizedSegment,
    direction: Direction,
    distance: usize,
) -> Result<Glcm, TextureError> {
    let g = q.levels;
    let (dx, dy) = direction.offset();
    let (dx, dy) = (dx * distance as i64, dy * distance as i64);
    let mut counts = vec![0u64; g * g];
    let mut pairs = 0u64;
    for y in 0..q.height as i64 {
        for x in 0..q.width as i64 {
            let (Some(a), Some(b)) = (q.at(x, y), q.at(x + dx, y + dy)) else {
                continue;
            };
            let (a, b) = (a as usize, b as usize);
            counts[a * g + b] += 1;
            counts[b * g + a] += 1;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(TextureError::NoPairs(direction));
    }
    let total = (2 * pairs) as f64;
    Ok(Glcm {
        levels: g,
        matrix: counts.into_iter().map(|c| c as f64 / total).collect(),
        direction,
        distance,
    })
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.log2()
    } else {
        0.0
    }
}

/// The 13 Haralick features in [`FEATURE_NAMES`] order. Logarithms are base 2.
pub fn haralick13(g: &Glcm) -> [f64; N_FEATURES] {
    let n = g.levels;
    let p = &g.matrix;
    let mut px = vec![0.0; n];
    let mut py = vec![0.0; n];
    let mut psum = vec![0.0; 2 * n - 1];
    let mut pdiff = vec![0.0; n];
    let (mut asm, mut idm, mut hxy, mut sum_ij) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let v = p[i * n + j];
            if v == 0.0 {
                continue;
            }
            px[i] += v;
            py[j] += v;
            psum[i + j] += v;
            pdiff[i.abs_diff(j)] += v;
            asm += v * v;
            let d = i as f64 - j as f64;
            idm += v / (1.0 + d * d);
            hxy -= plogp(v);
            sum_ij += (i * j) as f64 * v;
        }
    }
    let mean = |m: &[f64]| m.iter().enumerate().map(|(k, v)| k as f64 * v).sum::<f64>();
    let var = |m: &[f64], mu: f64| {
        m.iter()
            .enumerate()
            .map(|(k, v)| (k as f64 - mu).powi(2) * v)
            .sum::<f64>()
    };
    let entropy = |m: &[f64]| -m.iter().map(|&v| plogp(v)).sum::<f64>();
    let (mux, muy) = (mean(&px), mean(&py));
    let (varx, vary) = (var(&px, mux), var(&py, muy));
    let contrast = pdiff
        .iter()
        .enumerate()
        .map(|(k, v)| (k * k) as f64 * v)
        .sum::<f64>();
    let sd = (varx * vary).sqrt();
    let correlation = if sd > 1e-15 {
        (sum_ij - mux * muy) / sd
    } else {
        0.0
    };
    let sum_avg = mean(&psum);
    let sum_var = var(&psum, sum_avg);
    let sum_ent = entropy(&psum);
    let diff_var = var(&pdiff, mean(&pdiff));
    let diff_ent = entropy(&pdiff);
    let (hx, hy) = (entropy(&px), entropy(&py));
    let (mut hxy1, mut hxy2) = (0.0, 0.0);
    for i in 0..n {
        if px[i] == 0.0 {
            continue;
        }
        for j in 0..n {
            let q = px[i] * py[j];
            if q == 0.0 {
                continue;
            }
            let lq = q.log2();
            hxy1 -= p[i * n + j] * lq;
            hxy2 -= q * lq;
        }
    }
    let hmax = hx.max(hy);
    let imc1 = if hmax > 0.0 { (hxy - hxy1) / hmax } else { 0.0 };
    let imc2 = (1.0 - (-2.0 * (hxy2 - hxy)).exp2()).max(0.0).sqrt();
    [
        asm,
        contrast,
        correlation,
        varx,
        idm,
        sum_avg,
        sum_var,
        sum_ent,
        hxy,
        diff_var,
        diff_ent,
        imc1,
        imc2,
    ]
}

/// Features of one band over one segment; directions without pairs give zeros.
pub fn band_block(
    raster: &MultibandRaster,
    band: usize,
    pixels: &[(u32, u32)],
    cfg: &TextureConfig,
) -> Result<Vec<f64>, TextureError> {
    let q = QuantizedSegment::quantize_band(raster, band, pixels, cfg.levels)?;
    let mut per_dir = Vec::with_capacity(4);
    for d in Direction::ALL {
        match glcm(&q, d, 1) {
            Ok(g) => per_dir.push(Some(haralick13(&g))),
            Err(TextureError::NoPairs(_)) => per_dir.push(None),
            Err(e) => return Err(e),
        }
    }
    if cfg.direction_mean {
        let valid: Vec<_> = per_dir.iter().flatten().collect();
        let mut out = vec![0.0; N_FEATURES];
        if !valid.is_empty() {
            for f in &valid {
                for (o, v) in out.iter_mut().zip(f.iter()) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= valid.len() as f64);
        }
        Ok(out)
    } else {
        Ok(per_dir
            .into_iter()
            .flat_map(|f| f.unwrap_or([0.0; N_FEATURES]))
            .collect())
    }
}

/// Per-segment descriptor: one block per channel, aligned with the owning
/// table's channel list.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub region_id: u32,
    pub segment_id: u32,
    pub label: Label,
    pub blocks: Vec<Vec<f64>>,
}

pub fn segment_features(
    raster: &MultibandRaster,
    seg: &SegmentRecord,
    cfg: &TextureConfig,
) -> Result<FeatureVector, TextureError> {
    let blocks = (0..raster.bands())
        .map(|b| band_block(raster, b, &seg.pixels, cfg))
        .collect::<Result<_, _>>()?;
    Ok(FeatureVector {
        region_id: seg.region_id,
        segment_id: seg.segment_id,
        label: seg.majority_label,
        blocks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub channels: Vec<String>,
    pub block_len: usize,
    pub rows: Vec<FeatureVector>,
}

impl FeatureTable {
    pub fn channel_index(&self, name: &str) -> Result<usize, TextureError> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| TextureError::UnknownChannel(name.into()))
    }

    /// Concatenated blocks of the given channels, per row.
    pub fn design_matrix(&self, channels: &[usize]) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                channels
                    .iter()
                    .flat_map(|&c| r.blocks[c].iter().copied())
                    .collect()
            })
            .collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn subset(&self, rows: Vec<FeatureVector>) -> Self {
        Self {
            channels: self.channels.clone(),
            block_len: self.block_len,
            rows,
        }
    }
}

/// Features for every record against its region's raster.
pub fn extract_features(
    exec: Exec,
    rasters: &BTreeMap<u32, MultibandRaster>,
    records: &[SegmentRecord],
    cfg: &TextureConfig,
) -> Result<FeatureTable, TextureError> {
    let channels = rasters
        .values()
        .next()
        .map(|r| r.band_names().to_vec())
        .unwrap_or_default();
    let rows = exec.try_map(records, |seg| {
        let r = rasters
            .get(&seg.region_id)
            .ok_or(TextureError::MissingRaster {
                region_id: seg.region_id,
                segment_id: seg.segment_id,
            })?;
        segment_features(r, seg, cfg)
    })?;
    Ok(FeatureTable {
        channels,
        block_len: cfg.block_len(),
        rows,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    segment_id: u32,
    region_id: u32,
    label: Label,
    features: BTreeMap<String, Vec<f64>>,
}

pub fn write_features_jsonl(path: &Path, table: &FeatureTable) -> Result<(), TextureError> {
    let io = |source| TextureError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in &table.rows {
        let line = FeatureLine {
            segment_id: r.segment_id,
            region_id: r.region_id,
            label: r.label,
            features: table
                .channels
                .iter()
                .cloned()
                .zip(r.blocks.iter().cloned())
                .collect(),
        };
        serde_json::to_writer(&mut f, &line).expect("feature row serializes");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Reads a JSON-lines table; `channels` fixes the block order.
pub fn read_features_jsonl(path: &Path, channels: &[String]) -> Result<FeatureTable, TextureError> {
    let io = |source| TextureError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut rows = Vec::new();
    let mut block_len = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| TextureError::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", i + 1),
        };
        let mut l: FeatureLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let mut blocks = Vec::with_capacity(channels.len());
        for c in channels {
            let b = l
                .features
                .remove(c)
                .ok_or_else(|| bad(format!("missing channel {c}")))?;
            if *block_len.get_or_insert(b.len()) != b.len() {
                return Err(bad("inconsistent block length".into()));
            }
            blocks.push(b);
        }
        rows.push(FeatureVector {
            region_id: l.region_id,
            segment_id: l.segment_id,
            label: l.label,
            blocks,
        });
    }
    Ok(FeatureTable {
        channels: channels.to_vec(),
        block_len: block_len.unwrap_or(0),
        rows,
    })
}

const BINARY_MAGIC: &[u8; 8] = b"BSFEAT01";

/// Compact binary table: magic, u32 row/channel/block counts, channel names
/// (u32 length + UTF-8), then per row u32 region, u32 segment, u8 label and
/// `channels × block_len` float32 values. All integers little-endian.
pub fn write_features_binary(path: &Path, table: &FeatureTable) -> Result<(), TextureError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(BINARY_MAGIC);
    for v in [table.rows.len(), table.channels.len(), table.block_len] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for c in &table.channels {
        buf.extend_from_slice(&(c.len() as u32).to_le_bytes());
        buf.extend_from_slice(c.as_bytes());
    }
    for r in &table.rows {
        buf.extend_from_slice(&r.region_id.to_le_bytes());
        buf.extend_from_slice(&r.segment_id.to_le_bytes());
        buf.push(r.label.is_positive() as u8);
        for v in r.blocks.iter().flatten() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|source| TextureError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn read_features_binary(path: &Path) -> Result<FeatureTable, TextureError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| TextureError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let bad = |reason: &str| TextureError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let truncated = || bad("truncated");
    let mut rd = ByteReader {
        bytes: &bytes,
        pos: 0,
    };
    if rd.take(8).ok_or_else(truncated)? != BINARY_MAGIC {
        return Err(bad("bad magic"));
    }
    let n_rows = rd.u32().ok_or_else(truncated)? as usize;
    let n_ch = rd.u32().ok_or_else(truncated)? as usize;
    let block_len = rd.u32().ok_or_else(truncated)? as usize;
    let mut channels = Vec::with_capacity(n_ch);
    for _ in 0..n_ch {
        let len = rd.u32().ok_or_else(truncated)? as usize;
        let raw = rd.take(len).ok_or_else(truncated)?;
        let s = std::str::from_utf8(raw).map_err(|_| bad("channel name not UTF-8"))?;
        channels.push(s.to_owned());
    }
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let region_id = rd.u32().ok_or_else(truncated)?;
        let segment_id = rd.u32().ok_or_else(truncated)?;
        let label = match rd.take(1).ok_or_else(truncated)?[0] {
            0 => Label::Forest,
            1 => Label::NonForest,
            _ => return Err(bad("bad label byte")),
        };
        let mut blocks = Vec::with_capacity(n_ch);
        for _ in 0..n_ch {
            let raw = rd.take(4 * block_len).ok_or_else(truncated)?;
            blocks.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                    .collect(),
            );
        }
        rows.push(FeatureVector {
            region_id,
            segment_id,
            label,
            blocks,
        });
    }
    Ok(FeatureTable {
        channels,
        block_len,
        rows,
    })
}
