//! SLIC superpixels over a 3-band composite in CIELAB + xy space.

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::MultibandRaster;

#[derive(Debug, Error)]
pub enum SlicError {
    #[error("expected a 3-band composite, got {0} bands")]
    BandCount(usize),
    #[error("k = {k} exceeds pixel count {n}")]
    TooManySegments { k: usize, n: usize },
    #[error("invalid SLIC config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed superpixel map at {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicConfig {
    /// Desired number of superpixels.
    pub k: usize,
    /// Compactness weight.
    pub m: f64,
    pub max_iter: usize,
    /// Components smaller than this fraction of N/k are absorbed.
    pub min_region_frac: f64,
}

impl Default for SlicConfig {
    fn default() -> Self {
        Self {
            k: 100,
            m: 10.0,
            max_iter: 10,
            min_region_frac: 0.25,
        }
    }
}

impl SlicConfig {
    /// `k = round(n_pixels / mean_area)`, at least 1.
    pub fn with_mean_area(mut self, n_pixels: usize, mean_area: f64) -> Self {
        self.k = ((n_pixels as f64 / mean_area).round() as usize).max(1);
        self
    }

    pub fn validate(&self) -> Result<(), SlicError> {
        if self.k < 1 {
            return Err(SlicError::Config("k must be >= 1".into()));
        }
        if !(self.m > 0.0) {
            return Err(SlicError::Config("m must be > 0".into()));
        }
        if self.max_iter < 1 {
            return Err(SlicError::Config("max_iter must be >= 1".into()));
        }
        if !(self.min_region_frac > 0.0 && self.min_region_frac < 1.0) {
            return Err(SlicError::Config("min_region_frac must be in (0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub n_segments: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MapMeta {
    width: usize,
    height: usize,
    n_segments: usize,
}

impl SuperpixelMap {
    pub fn label(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0usize; self.n_segments];
        for &l in &self.labels {
            a[l as usize] += 1;
        }
        a
    }

    /// Pixel coordinates per segment, each list in row-major order.
    pub fn segment_pixels(&self) -> Vec<Vec<(u32, u32)>> {
        let mut out = vec![Vec::new(); self.n_segments];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l as usize].push(((i % self.width) as u32, (i / self.width) as u32));
        }
        out
    }

    /// Writes `labels.u32` and `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SlicError> {
        let dir = dir.as_ref();
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| SlicError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let meta = MapMeta {
            width: self.width,
            height: self.height,
            n_segments: self.n_segments,
        };
        let p = dir.join("meta.json");
        fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta")).map_err(io(&p))?;
        let bytes: Vec<u8> = self.labels.iter().flat_map(|l| l.to_le_bytes()).collect();
        let p = dir.join("labels.u32");
        fs::write(&p, bytes).map_err(io(&p))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, SlicError> {
        let dir = dir.as_ref();
        let meta_path = dir.join("meta.json");
        let text = fs::read_to_string(&meta_path).map_err(|source| SlicError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let meta: MapMeta = serde_json::from_str(&text).map_err(|e| SlicError::Format {
            path: meta_path.clone(),
            reason: e.to_string(),
        })?;
        let p = dir.join("labels.u32");
        let bytes = fs::read(&p).map_err(|source| SlicError::Io {
            path: p.clone(),
            source,
        })?;
        let bad = |reason: String| SlicError::Format {
            path: p.clone(),
            reason,
        };
        if bytes.len() != meta.width * meta.height * 4 {
            return Err(bad(format!(
                "expected {} bytes",
                meta.width * meta.height * 4
            )));
        }
        let labels: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(l) = labels.iter().find(|&&l| l as usize >= meta.n_segments) {
            return Err(bad(format!("label {l} >= n_segments {}", meta.n_segments)));
        }
        Ok(Self {
            width: meta.width,
            height: meta.height,
            labels,
            n_segments: meta.n_segments,
        })
    }
}

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// sRGB (D65) to CIELAB for one pixel with channels in [0,1].
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| srgb_to_linear(c.clamp(0.0, 1.0)));
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let (fx, fy, fz) = (lab_f(x / 0.95047), lab_f(y / 1.00000), lab_f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Treats the composite as sRGB and converts every pixel to (L, a, b).
pub fn to_lab(composite: &MultibandRaster) -> Result<MultibandRaster, SlicError> {
    if composite.bands() != 3 {
        return Err(SlicError::BandCount(composite.bands()));
    }
    let n = composite.n_pixels();
    let mut planes = vec![vec![0f32; n]; 3];
    for p in 0..n {
        let rgb = [0, 1, 2].map(|b| composite.band(b)[p] as f64);
        let lab = srgb_to_lab(rgb);
        for c in 0..3 {
            planes[c][p] = lab[c] as f32;
        }
    }
    Ok(MultibandRaster::from_bands(
        composite.width(),
        composite.height(),
        vec!["L".into(), "a".into(), "b".into()],
        planes,
    )
    .expect("lab raster dimensions match source"))
}

fn sobel_l(lab: &MultibandRaster) -> Vec<f64> {
    let (w, h) = (lab.width(), lab.height());
    let l = lab.band(0);
    let at = |x: isize, y: isize| -> f64 {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        l[yc * w + xc] as f64
    };
    let mut g = vec![0.0; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x - 1, y)
                - at(x - 1, y + 1);
            let gy = at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)
                - at(x - 1, y - 1)
                - 2.0 * at(x, y - 1)
                - at(x + 1, y - 1);
            g[y as usize * w + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    g
}

#[derive(Clone, Copy)]
struct Center {
    lab: [f64; 3],
    x: f64,
    y: f64,
}

/// Local k-means in (L,a,b,x,y) followed by connectivity enforcement.
pub fn slic_segment(lab: &MultibandRaster, cfg: &SlicConfig) -> Result<SuperpixelMap, SlicError> {
    cfg.validate()?;
    if lab.bands() != 3 {
        return Err(SlicError::BandCount(lab.bands()));
    }
    let (w, h) = (lab.width(), lab.height());
    let n = w * h;
    if cfg.k > n {
        return Err(SlicError::TooManySegments { k: cfg.k, n });
    }
    let s = (n as f64 / cfg.k as f64).sqrt();
    let spatial = (cfg.m / s).powi(2);
    let pix = |p: usize| -> [f64; 3] { [0, 1, 2].map(|c| lab.band(c)[p] as f64) };

    let nx = ((w as f64 / s).round() as usize).clamp(1, w);
    let ny = ((h as f64 / s).round() as usize).clamp(1, h);
    let (step_x, step_y) = (w as f64 / nx as f64, h as f64 / ny as f64);
    let grad = sobel_l(lab);
    let mut centers = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let gx = (((i as f64 + 0.5) * step_x) as usize).min(w - 1);
            let gy = (((j as f64 + 0.5) * step_y) as usize).min(h - 1);
            let (mut bx, mut by) = (gx, gy);
            let mut best = grad[gy * w + gx];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (x, y) = (gx as isize + dx, gy as isize + dy);
                    if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
                        continue;
                    }
                    let g = grad[y as usize * w + x as usize];
                    if g < best {
                        best = g;
                        bx = x as usize;
                        by = y as usize;
                    }
                }
            }
            centers.push(Center {
                lab: pix(by * w + bx),
                x: bx as f64,
                y: by as f64,
            });
        }
    }

    let mut labels = vec![u32::MAX; n];
    let mut dist = vec![f64::INFINITY; n];
    let d2 = |c: &Center, p: usize| -> f64 {
        let v = pix(p);
        let dl = (0..3).map(|k| (v[k] - c.lab[k]).powi(2)).sum::<f64>();
        let (x, y) = ((p % w) as f64, (p / w) as f64);
        dl + spatial * ((x - c.x).powi(2) + (y - c.y).powi(2))
    };
    for _ in 0..cfg.max_iter {
        labels.iter_mut().for_each(|l| *l = u32::MAX);
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (ci, c) in centers.iter().enumerate() {
            let x0 = (c.x - s).floor().max(0.0) as usize;
            let x1 = ((c.x + s).ceil() as usize).min(w - 1);
            let y0 = (c.y - s).floor().max(0.0) as usize;
            let y1 = ((c.y + s).ceil() as usize).min(h - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let p = y * w + x;
                    let d = d2(c, p);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        // Pixels outside every window fall back to the globally nearest center.
        for p in 0..n {
            if labels[p] == u32::MAX {
                let (ci, _) = centers
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (i, d2(c, p)))
                    .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
                labels[p] = ci as u32;
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for p in 0..n {
            let v = pix(p);
            let acc = &mut sums[labels[p] as usize];
            acc[0] += v[0];
            acc[1] += v[1];
            acc[2] += v[2];
            acc[3] += (p % w) as f64;
            acc[4] += (p / w) as f64;
            acc[5] += 1.0;
        }
        let mut moved = 0.0f64;
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] == 0.0 {
                continue;
            }
            let nxp = acc[3] / acc[5];
            let nyp = acc[4] / acc[5];
            moved = moved.max(((nxp - c.x).powi(2) + (nyp - c.y).powi(2)).sqrt());
            *c = Center {
                lab: [acc[0] / acc[5], acc[1] / acc[5], acc[2] / acc[5]],
                x: nxp,
                y: nyp,
            };
        }
        if moved < 1e-3 * s {
            break;
        }
    }
    let raw = SuperpixelMap {
        width: w,
        height: h,
        labels,
        n_segments: centers.len(),
    };
    Ok(enforce_connectivity(&raw, cfg))
}

struct Components {
    id: Vec<usize>,
    size: Vec<usize>,
}

fn components(map: &SuperpixelMap) -> Components {
    let (w, h) = (map.width, map.height);
    let mut id = vec![usize::MAX; w * h];
    let mut size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if id[start] != usize::MAX {
            continue;
        }
        let c = size.len();
        let lab = map.labels[start];
        id[start] = c;
        queue.push_back(start);
        let mut count = 0;
        while let Some(p) = queue.pop_front() {
            count += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if id[q] == usize::MAX && map.labels[q] == lab {
                    id[q] = c;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        size.push(count);
    }
    Components { id, size }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Splits every label into its 4-connected components, absorbs components
/// smaller than `min_region_frac · N/k` into their largest neighbor, and
/// renumbers labels in scan order.
pub fn enforce_connectivity(map: &SuperpixelMap, cfg: &SlicConfig) -> SuperpixelMap {
    let (w, h) = (map.width, map.height);
    let n = w * h;
    let threshold = cfg.min_region_frac * n as f64 / cfg.k.max(1) as f64;
    let comps = components(map);
    let nc = comps.size.len();
    let mut parent: Vec<usize> = (0..nc).collect();
    let mut size = comps.size.clone();
    loop {
        let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nc];
        for p in 0..n {
            let a = find(&mut parent, comps.id[p]);
            let (x, y) = (p % w, p / w);
            for q in [(x + 1 < w).then(|| p + 1), (y + 1 < h).then(|| p + w)]
                .into_iter()
                .flatten()
            {
                let b = find(&mut parent, comps.id[q]);
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
        let mut merged = false;
        for c in 0..nc {
            if find(&mut parent, c) != c || size[c] as f64 >= threshold {
                continue;
            }
            let mut best: Option<(usize, usize)> = None;
            for &nb in &adj[c] {
                let r = find(&mut parent, nb);
                if r == c {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bs, br)) => size[r] > bs || (size[r] == bs && r < br),
                };
                if better {
                    best = Some((size[r], r));
                }
            }
            if let Some((_, target)) = best {
                parent[c] = target;
                size[target] += size[c];
                merged = true;
            }
        }
        if !merged {
            break;
        }
    }
    let mut relabel = vec![u32::MAX; nc];
    let mut next = 0u32;
    let mut labels = vec![0u32; n];
    for p in 0..n {
        let r = find(&mut parent, comps.id[p]);
        if relabel[r] == u32::MAX {
            relabel[r] = next;
            next += 1;
        }
        labels[p] = relabel[r];
    }
    SuperpixelMap {
        width: w,
        height: h,
        labels,
        n_segments: next as usize,
    }
}

/// True when every label's pixel set is one 4-connected component.
pub fn is_connected(map: &SuperpixelMap) -> bool {
    components(map).size.len() == map.n_segments
}
