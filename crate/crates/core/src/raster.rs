//! Multiband raster model, on-disk format, and derived composites.
//!
//! A raster directory holds a `meta.json` descriptor plus one raw plane per
//! band, named `band_1.f32` … `band_<B>.f32`. Each plane is little-endian
//! IEEE-754 float32 in row-major order. Label masks are binary PGM (P5,
//! maxval 255) with 0 = forest, 1 = non-forest, 255 = ignore.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Landsat-8 OLI bands B1..B7 in storage order.
pub const LANDSAT_BANDS: [&str; 7] = ["B1", "B2", "B3", "B4", "B5", "B6", "B7"];
/// Zero-based index of B4 (red).
pub const RED: usize = 3;
/// Zero-based index of B5 (near infrared).
pub const NIR: usize = 4;

pub const FOREST: u8 = 0;
pub const NON_FOREST: u8 = 1;
pub const IGNORE: u8 = 255;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed meta.json at {path}: {reason}")]
    Meta { path: PathBuf, reason: String },
    #[error("missing band file for band {0}")]
    MissingBand(usize),
    #[error("{path}: expected {expected} bytes, found {found}")]
    SizeMismatch {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at byte offset {offset}")]
    NonFinite { path: PathBuf, offset: usize },
    #[error("invalid dimensions: {0}")]
    Dimensions(String),
    #[error("band index {index} out of range for {bands}-band raster")]
    BandOutOfRange { index: usize, bands: usize },
    #[error("degenerate covariance: {0}")]
    Degenerate(String),
    #[error("invalid mask: {0}")]
    Mask(String),
}

pub type Result<T> = std::result::Result<T, RasterError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RasterError + '_ {
    move |source| RasterError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// B-band float image stored band-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandRaster {
    width: usize,
    height: usize,
    band_names: Vec<String>,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RasterMeta {
    width: usize,
    height: usize,
    bands: usize,
    band_names: Vec<String>,
    dtype: String,
}

impl MultibandRaster {
    pub fn new(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(RasterError::Dimensions(format!("{width}x{height}")));
        }
        if band_names.is_empty() {
            return Err(RasterError::Dimensions("zero bands".into()));
        }
        let expected = band_names.len() * width * height;
        if data.len() != expected {
            return Err(RasterError::Dimensions(format!(
                "data length {} != {} bands x {}x{}",
                data.len(),
                band_names.len(),
                width,
                height
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(RasterError::NonFinite {
                path: PathBuf::from("<memory>"),
                offset: i * 4,
            });
        }
        Ok(Self {
            width,
            height,
            band_names,
            data,
        })
    }

    /// Builds a raster from per-band planes.
    pub fn from_bands(
        width: usize,
        height: usize,
        band_names: Vec<String>,
        planes: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if planes.len() != band_names.len() {
            return Err(RasterError::Dimensions(format!(
                "{} planes for {} band names",
                planes.len(),
                band_names.len()
            )));
        }
        let data = planes.into_iter().flatten().collect();
        Self::new(width, height, band_names, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn bands(&self) -> usize {
        self.band_names.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.band_names
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn band(&self, b: usize) -> &[f32] {
        let n = self.n_pixels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, x: usize, y: usize) -> f32 {
        self.data[b * self.n_pixels() + y * self.width + x]
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        load_raster(dir)
    }

    /// Writes `meta.json` and one `band_<i>.f32` plane per band into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let meta = RasterMeta {
            width: self.width,
            height: self.height,
            bands: self.bands(),
            band_names: self.band_names.clone(),
            dtype: "f32le".into(),
        };
        let meta_path = dir.join("meta.json");
        let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
        fs::write(&meta_path, json).map_err(io_err(&meta_path))?;
        for b in 0..self.bands() {
            let path = dir.join(format!("band_{}.f32", b + 1));
            let mut bytes = Vec::with_capacity(self.n_pixels() * 4);
            for v in self.band(b) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            fs::write(&path, bytes).map_err(io_err(&path))?;
        }
        Ok(())
    }
}

pub fn load_raster(dir: impl AsRef<Path>) -> Result<MultibandRaster> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let meta: RasterMeta = serde_json::from_str(&text).map_err(|e| RasterError::Meta {
        path: meta_path.clone(),
        reason: e.to_string(),
    })?;
    if meta.dtype != "f32le" {
        return Err(RasterError::Meta {
            path: meta_path,
            reason: format!("unsupported dtype {:?}", meta.dtype),
        });
    }
    if meta.band_names.len() != meta.bands {
        return Err(RasterError::Meta {
            path: meta_path,
            reason: format!(
                "bands = {} but {} band names",
                meta.bands,
                meta.band_names.len()
            ),
        });
    }
    let plane = meta.width * meta.height;
    let mut data = Vec::with_capacity(plane * meta.bands);
    for b in 1..=meta.bands {
        let path = dir.join(format!("band_{b}.f32"));
        if !path.exists() {
            return Err(RasterError::MissingBand(b));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        if bytes.len() != plane * 4 {
            return Err(RasterError::SizeMismatch {
                path,
                expected: plane * 4,
                found: bytes.len(),
            });
        }
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(RasterError::NonFinite {
                    path,
                    offset: i * 4,
                });
            }
            data.push(v);
        }
    }
    MultibandRaster::new(meta.width, meta.height, meta.band_names, data)
}

/// Output band `i` is input band `idx[i]`.
pub fn select_bands(r: &MultibandRaster, idx: &[usize]) -> Result<MultibandRaster> {
    if idx.is_empty() {
        return Err(RasterError::Dimensions("empty band selection".into()));
    }
    let mut names = Vec::with_capacity(idx.len());
    let mut data = Vec::with_capacity(idx.len() * r.n_pixels());
    for &i in idx {
        if i >= r.bands() {
            return Err(RasterError::BandOutOfRange {
                index: i,
                bands: r.bands(),
            });
        }
        names.push(r.band_names[i].clone());
        data.extend_from_slice(r.band(i));
    }
    MultibandRaster::new(r.width, r.height, names, data)
}

/// Principal axes of the pixelwise band covariance.
#[derive(Debug, Clone)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// Row `c` holds the unit loading vector of component `c`.
    pub components: Vec<Vec<f64>>,
}

/// Relative eigenvalue floor under which a component is treated as rank-deficient.
const RANK_TOL: f64 = 1e-10;

impl Pca {
    pub fn fit(r: &MultibandRaster) -> Result<Self> {
        let b = r.bands();
        let n = r.n_pixels();
        let mut mean = vec![0.0f64; b];
        for (k, m) in mean.iter_mut().enumerate() {
            *m = r.band(k).iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        }
        let mut cov = DMatrix::<f64>::zeros(b, b);
        for p in 0..n {
            for i in 0..b {
                let di = r.band(i)[p] as f64 - mean[i];
                for j in i..b {
                    let dj = r.band(j)[p] as f64 - mean[j];
                    cov[(i, j)] += di * dj;
                }
            }
        }
        let denom = (n.max(2) - 1) as f64;
        for i in 0..b {
            for j in i..b {
                let v = cov[(i, j)] / denom;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        if eigenvalues[0] <= 0.0 {
            return Err(RasterError::Degenerate(
                "all pixel vectors identical".into(),
            ));
        }
        let components = order
            .iter()
            .map(|&c| {
                let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
                // Sign rule: largest-magnitude loading is positive.
                let lead =
                    v.iter()
                        .copied()
                        .fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
                if lead < 0.0 {
                    v.iter_mut().for_each(|x| *x = -*x);
                }
                v
            })
            .collect();
        Ok(Self {
            mean,
            eigenvalues,
            components,
        })
    }

    /// Number of components whose eigenvalue is above the rank floor.
    pub fn rank(&self) -> usize {
        let top = self.eigenvalues[0];
        self.eigenvalues
            .iter()
            .take_while(|&&e| e > RANK_TOL * top)
            .count()
    }

    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().sum();
        self.eigenvalues.iter().map(|e| e / total).collect()
    }

    /// Component scores per pixel: `scores[c][p]`.
    pub fn project(&self, r: &MultibandRaster, n: usize) -> Vec<Vec<f64>> {
        let np = r.n_pixels();
        (0..n)
            .map(|c| {
                let w = &self.components[c];
                (0..np)
                    .map(|p| {
                        w.iter()
                            .enumerate()
                            .map(|(k, wk)| wk * (r.band(k)[p] as f64 - self.mean[k]))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    /// Inverse of [`Pca::project`]; returns `values[band][pixel]`.
    pub fn reconstruct(&self, scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let b = self.mean.len();
        let np = scores.first().map_or(0, Vec::len);
        (0..b)
            .map(|k| {
                (0..np)
                    .map(|p| {
                        self.mean[k]
                            + scores
                                .iter()
                                .enumerate()
                                .map(|(c, s)| self.components[c][k] * s[p])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Min-max rescale into [0,1]; a constant plane maps to 0.
pub fn rescale_unit(values: &[f64]) -> Vec<f32> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Projects onto the top-`n` principal components, each rescaled to [0,1].
pub fn pca_composite(r: &MultibandRaster, n: usize) -> Result<MultibandRaster> {
    if n == 0 || n > r.bands() {
        return Err(RasterError::Dimensions(format!(
            "cannot take {n} components of a {}-band raster",
            r.bands()
        )));
    }
    let pca = Pca::fit(r)?;
    let rank = pca.rank();
    if n > rank {
        return Err(RasterError::Degenerate(format!(
            "requested {n} components but covariance rank is {rank}"
        )));
    }
    let scores = pca.project(r, n);
    let planes = scores.iter().map(|s| rescale_unit(s)).collect();
    let names = (1..=n).map(|c| format!("PC{c}")).collect();
    MultibandRaster::from_bands(r.width, r.height, names, planes)
}

fn ndvi_values(r: &MultibandRaster, nir: usize, red: usize) -> Result<Vec<f64>> {
    for &i in &[nir, red] {
        if i >= r.bands() {
            return Err(RasterError::BandOutOfRange {
                index: i,
                bands: r.bands(),
            });
        }
    }
    if nir == red {
        return Err(RasterError::Dimensions("NIR and red must differ".into()));
    }
    Ok(r.band(nir)
        .iter()
        .zip(r.band(red))
        .map(|(&n, &d)| {
            let (n, d) = (n as f64, d as f64);
            let s = n + d;
            if s == 0.0 {
                0.0
            } else {
                (n - d) / s
            }
        })
        .collect())
}

/// Per-pixel (NIR − RED)/(NIR + RED), with a zero denominator mapped to 0.
pub fn ndvi(r: &MultibandRaster, nir: usize, red: usize) -> Result<MultibandRaster> {
    let v = ndvi_values(r, nir, red)?;
    MultibandRaster::new(
        r.width,
        r.height,
        vec!["NDVI".into()],
        v.into_iter().map(|x| x as f32).collect(),
    )
}

/// A channel of a composition: a source band or a derived channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Band(usize),
    /// One-based principal component.
    Pc(usize),
    Ndvi,
}

impl Channel {
    pub fn name(&self, source: &MultibandRaster) -> String {
        match self {
            Channel::Band(i) => source
                .band_names()
                .get(*i)
                .cloned()
                .unwrap_or_else(|| format!("B{}", i + 1)),
            Channel::Pc(c) => format!("PC{c}"),
            Channel::Ndvi => "NDVI".into(),
        }
    }
}

/// A stack of source bands and derived channels.
#[derive(Debug, Clone)]
pub struct BandComposite {
    pub source_bands: Vec<Channel>,
    pub raster: MultibandRaster,
}

/// Stacks the requested channels. PCs are rescaled to [0,1] like
/// [`pca_composite`]; NDVI is min-max rescaled to [0,1] before stacking.
pub fn compose(r: &MultibandRaster, channels: &[Channel]) -> Result<BandComposite> {
    if channels.is_empty() {
        return Err(RasterError::Dimensions("empty composition".into()));
    }
    let max_pc = channels
        .iter()
        .filter_map(|c| match c {
            Channel::Pc(k) => Some(*k),
            _ => None,
        })
        .max()
        .unwrap_or(0);
    let pcs = if max_pc > 0 {
        Some(pca_composite(r, max_pc)?)
    } else {
        None
    };
    let mut planes = Vec::with_capacity(channels.len());
    let mut names = Vec::with_capacity(channels.len());
    for ch in channels {
        let plane = match *ch {
            Channel::Band(i) => {
                if i >= r.bands() {
                    return Err(RasterError::BandOutOfRange {
                        index: i,
                        bands: r.bands(),
                    });
                }
                r.band(i).to_vec()
            }
            Channel::Pc(k) => {
                if k == 0 {
                    return Err(RasterError::Dimensions("PC index is one-based".into()));
                }
                pcs.as_ref().expect("pcs computed").band(k - 1).to_vec()
            }
            Channel::Ndvi => rescale_unit(&ndvi_values(r, NIR, RED)?),
        };
        planes.push(plane);
        names.push(ch.name(r));
    }
    Ok(BandComposite {
        source_bands: channels.to_vec(),
        raster: MultibandRaster::from_bands(r.width, r.height, names, planes)?,
    })
}

/// Writes one band as an 8-bit binary PGM, min-max stretched.
pub fn export_pgm(r: &MultibandRaster, band: usize, path: impl AsRef<Path>) -> Result<()> {
    if band >= r.bands() {
        return Err(RasterError::BandOutOfRange {
            index: band,
            bands: r.bands(),
        });
    }
    let vals: Vec<f64> = r.band(band).iter().map(|&v| v as f64).collect();
    let bytes = rescale_unit(&vals)
        .into_iter()
        .map(|v| (v * 255.0).round() as u8)
        .collect();
    write_pgm(path.as_ref(), r.width, r.height, bytes)
}

/// Per-pixel ground truth: 0 = forest, 1 = non-forest, 255 = ignore.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(RasterError::Mask(format!(
                "{} labels for {}x{}",
                labels.len(),
                width,
                height
            )));
        }
        if let Some(v) = labels
            .iter()
            .find(|&&v| v != FOREST && v != NON_FOREST && v != IGNORE)
        {
            return Err(RasterError::Mask(format!("illegal label value {v}")));
        }
        Ok(Self {
            width,
            height,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let (w, h, bytes) = read_pgm(path.as_ref())?;
        Self::new(w, h, bytes)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        write_pgm(path.as_ref(), self.width, self.height, self.labels.clone())
    }
}

pub(crate) fn write_pgm(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write!(f, "P5\n{width} {height}\n255\n").map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub(crate) fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    write!(f, "P6\n{width} {height}\n255\n").map_err(io_err(path))?;
    let flat: Vec<u8> = rgb.iter().flatten().copied().collect();
    f.write_all(&flat).map_err(io_err(path))?;
    Ok(())
}

fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut rd = BufReader::new(f);
    let bad = |reason: &str| RasterError::Mask(format!("{}: {reason}", path.display()));
    let mut tokens = Vec::new();
    // Header: magic, width, height, maxval, with optional `#` comments.
    while tokens.len() < 4 {
        let mut line = String::new();
        if rd.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        tokens.extend(content.split_whitespace().map(str::to_owned));
    }
    if tokens.len() > 4 {
        return Err(bad("unexpected data on header line"));
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let mut bytes = Vec::new();
    rd.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() != w * h {
        return Err(RasterError::SizeMismatch {
            path: path.to_path_buf(),
            expected: w * h,
            found: bytes.len(),
        });
    }
    Ok((w, h, bytes))
}
