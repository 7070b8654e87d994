//! Synthetic seven-band scenes with forest / non-forest ground truth.
//!
//! Every band carries a unit-variance texture field scaled by
//! `texture_amplitude`. Forest texture is spatially smooth (box-blurred
//! noise); "rough" texture mixes in white noise with weight `contrast`.
//! Non-forest areas are a union of elliptical blobs. Each blob is expressed
//! (rough, and brighter by `level_gap`) in exactly one signal band, with blobs
//! dealt out evenly across the signal bands, so every signal band sees a
//! disjoint share of the non-forest area and only their union covers it. On
//! the remaining bands the rough areas follow an independent decoy blob
//! layout: same texture statistics, no class information.
//!
//! Corpus layout:
//!
//! ```text
//! <root>/corpus.json
//! <root>/region_<id>/raster/{meta.json, band_1.f32, ...}
//! <root>/region_<id>/mask.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMask, MultibandRaster, RasterError, FOREST, LANDSAT_BANDS, NON_FOREST};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub regions: u32,
    /// Band names (B1..B7) whose texture depends on the class.
    pub signal_bands: Vec<String>,
    /// White-noise weight of rough texture, in (0, 1].
    pub contrast: f64,
    /// Non-forest blobs per region.
    pub blob_count: usize,
    pub blob_radius: (f64, f64),
    pub texture_amplitude: f64,
    /// Brightness of non-forest over forest on signal bands.
    pub level_gap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            regions: 4,
            signal_bands: vec!["B1".into(), "B3".into(), "B4".into()],
            contrast: 0.5,
            blob_count: 16,
            blob_radius: (12.0, 26.0),
            texture_amplitude: 0.05,
            level_gap: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<Vec<usize>, SynthError> {
        if self.width < 64 || self.height < 64 {
            return Err(SynthError::Spec("image must be at least 64x64".into()));
        }
        if self.regions == 0 {
            return Err(SynthError::Spec("need at least one region".into()));
        }
        if self.signal_bands.is_empty() {
            return Err(SynthError::Spec("signal_bands must be nonempty".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(SynthError::Spec("contrast must be in (0, 1]".into()));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && hi >= lo) {
            return Err(SynthError::Spec(
                "blob_radius must satisfy 0 < min <= max".into(),
            ));
        }
        self.signal_bands
            .iter()
            .map(|b| {
                LANDSAT_BANDS
                    .iter()
                    .position(|n| n == b)
                    .ok_or_else(|| SynthError::Spec(format!("unknown band {b}")))
            })
            .collect()
    }
}

/// One generated region.
#[derive(Debug, Clone)]
pub struct SyntheticRegion {
    pub region_id: u32,
    pub raster: MultibandRaster,
    pub mask: LabelMask,
}

/// Per-pixel index of the last blob covering it.
fn blob_map<R: Rng>(
    w: usize,
    h: usize,
    count: usize,
    radius: (f64, f64),
    rng: &mut R,
) -> Vec<Option<usize>> {
    let mut m = vec![None; w * h];
    for blob in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let r = if radius.1 > radius.0 {
            rng.random_range(radius.0..radius.1)
        } else {
            radius.0
        };
        // Mildly elliptical blobs.
        let sx = rng.random_range(0.7..1.3);
        let sy = 1.0 / sx;
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / (r * sx);
                let dy = (y as f64 - cy) / (r * sy);
                if dx * dx + dy * dy <= 1.0 {
                    m[y * w + x] = Some(blob);
                }
            }
        }
    }
    m
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn box_blur(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = (lo..=hi).map(|k| src[y * w + k]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            out[y * w + x] = (lo..=hi).map(|k| tmp[k * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd.max(1e-12));
}

fn smooth_field<R: Rng>(w: usize, h: usize, rng: &mut R) -> Vec<f64> {
    let white: Vec<f64> = (0..w * h).map(|_| gaussian(rng)).collect();
    let mut f = box_blur(&box_blur(&white, w, h, 2), w, h, 2);
    standardize(&mut f);
    f
}

pub fn generate_region(
    spec: &SyntheticSpec,
    region_id: u32,
) -> Result<SyntheticRegion, SynthError> {
    let signal = spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (u64::from(region_id) << 32 | 0x5eed));
    let blobs = blob_map(w, h, spec.blob_count, spec.blob_radius, &mut rng);
    let truth: Vec<bool> = blobs.iter().map(Option::is_some).collect();
    let mut owner: Vec<usize> = (0..spec.blob_count)
        .map(|j| signal[j % signal.len()])
        .collect();
    owner.shuffle(&mut rng);
    let c = spec.contrast;
    let norm = ((1.0 - c).powi(2) + c * c).sqrt();
    let mut planes = Vec::with_capacity(LANDSAT_BANDS.len());
    for b in 0..LANDSAT_BANDS.len() {
        let is_signal = signal.contains(&b);
        let (rough, bright): (Vec<bool>, Vec<bool>) = if is_signal {
            let e: Vec<bool> = blobs
                .iter()
                .map(|o| o.is_some_and(|j| owner[j] == b))
                .collect();
            (e.clone(), e)
        } else {
            let decoy = blob_map(w, h, spec.blob_count, spec.blob_radius, &mut rng);
            (
                decoy.iter().map(Option::is_some).collect(),
                vec![false; w * h],
            )
        };
        let smooth = smooth_field(w, h, &mut rng);
        let base = 0.2 + 0.05 * b as f64;
        let plane = (0..w * h)
            .map(|p| {
                let white = gaussian(&mut rng);
                let tex = if rough[p] {
                    ((1.0 - c) * smooth[p] + c * white) / norm
                } else {
                    smooth[p]
                };
                let level = if bright[p] {
                    base + spec.level_gap
                } else {
                    base
                };
                (level + spec.texture_amplitude * tex) as f32
            })
            .collect();
        planes.push(plane);
    }
    let names = LANDSAT_BANDS.iter().map(|s| s.to_string()).collect();
    let raster = MultibandRaster::from_bands(w, h, names, planes)?;
    let labels = truth
        .iter()
        .map(|&t| if t { NON_FOREST } else { FOREST })
        .collect();
    Ok(SyntheticRegion {
        region_id,
        raster,
        mask: LabelMask::new(w, h, labels)?,
    })
}

#[derive(Debug, Serialize)]
struct CorpusEcho<'a> {
    spec: &'a SyntheticSpec,
    regions: Vec<RegionEcho>,
}

#[derive(Debug, Serialize)]
struct RegionEcho {
    region_id: u32,
    forest_pixels: usize,
    non_forest_pixels: usize,
}

pub fn region_dir(root: &Path, region_id: u32) -> PathBuf {
    root.join(format!("region_{region_id}"))
}

/// Writes every region plus a `corpus.json` echo of the generator settings.
pub fn write_corpus(spec: &SyntheticSpec, root: &Path) -> Result<Vec<u32>, SynthError> {
    spec.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(root).map_err(io(root))?;
    let mut echo = CorpusEcho {
        spec,
        regions: Vec::new(),
    };
    let mut ids = Vec::new();
    for region_id in 1..=spec.regions {
        let reg = generate_region(spec, region_id)?;
        let dir = region_dir(root, region_id);
        reg.raster.save(dir.join("raster"))?;
        reg.mask.save_pgm(dir.join("mask.pgm"))?;
        let nf = reg
            .mask
            .labels()
            .iter()
            .filter(|&&v| v == NON_FOREST)
            .count();
        echo.regions.push(RegionEcho {
            region_id,
            forest_pixels: reg.mask.labels().len() - nf,
            non_forest_pixels: nf,
        });
        ids.push(region_id);
    }
    let p = root.join("corpus.json");
    fs::write(
        &p,
        serde_json::to_string_pretty(&echo).expect("echo serializes"),
    )
    .map_err(io(&p))?;
    Ok(ids)
}

/// Region ids found as `region_<id>` directories under `root`, ascending.
pub fn discover_regions(root: &Path) -> Result<Vec<u32>, SynthError> {
    let entries = fs::read_dir(root).map_err(|source| SynthError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut ids: Vec<u32> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()?
                .strip_prefix("region_")?
                .parse()
                .ok()
        })
        .collect();
    ids.sort_unstable();
    Ok(ids)
}
