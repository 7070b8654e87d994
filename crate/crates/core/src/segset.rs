//! Labeled segment dataset: homogeneity rate, filtering, and region splits.
//!
//! # JSON-lines format
//!
//! One object per segment:
//!
//! ```text
//! {"region_id":1,"segment_id":4,"area":97,"majority_label":"forest",
//!  "hor":0.93,"bbox":[x0,y0,x1,y1],"pixel_run_lengths":[3,5,2,...]}
//! ```
//!
//! `bbox` is inclusive. `pixel_run_lengths` encodes the membership bitmap
//! of the bbox in row-major order as alternating runs, starting with a run
//! of non-member pixels (possibly zero).

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{LabelMask, IGNORE, NON_FOREST};
use crate::slic::SuperpixelMap;

#[derive(Debug, Error)]
pub enum SegmentError {
    #[error("empty pixel list")]
    EmptySegment,
    #[error("pixel ({0}, {1}) is labeled ignore")]
    IgnorePixel(u32, u32),
    #[error("map is {map_w}x{map_h} but mask is {mask_w}x{mask_h}")]
    DimensionMismatch {
        map_w: usize,
        map_h: usize,
        mask_w: usize,
        mask_h: usize,
    },
    #[error("region {0} is not assigned to any split")]
    UnassignedRegion(u32),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

/// Binary class; non-forest (deforestation) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Forest,
    NonForest,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::NonForest
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Forest => Label::NonForest,
            Label::NonForest => Label::Forest,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Forest => "forest",
            Label::NonForest => "non-forest",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub region_id: u32,
    pub segment_id: u32,
    pub pixels: Vec<(u32, u32)>,
    pub majority_label: Label,
    pub hor: f64,
}

impl SegmentRecord {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// HoR = max(NFP, NNP) / (NFP + NNP). A tie maps to forest.
pub fn compute_hor(pixels: &[(u32, u32)], mask: &LabelMask) -> Result<(f64, Label), SegmentError> {
    if pixels.is_empty() {
        return Err(SegmentError::EmptySegment);
    }
    let (mut nfp, mut nnp) = (0usize, 0usize);
    for &(x, y) in pixels {
        match mask.get(x as usize, y as usize) {
            IGNORE => return Err(SegmentError::IgnorePixel(x, y)),
            NON_FOREST => nnp += 1,
            _ => nfp += 1,
        }
    }
    Ok(hor_from_counts(nfp, nnp))
}

pub fn hor_from_counts(nfp: usize, nnp: usize) -> (f64, Label) {
    let majority = if nnp > nfp {
        Label::NonForest
    } else {
        Label::Forest
    };
    (nfp.max(nnp) as f64 / (nfp + nnp) as f64, majority)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentFilter {
    pub min_hor: f64,
    pub min_area: usize,
}

impl Default for SegmentFilter {
    fn default() -> Self {
        Self {
            min_hor: 0.70,
            min_area: 70,
        }
    }
}

impl SegmentFilter {
    /// Both thresholds inclusive.
    pub fn accepts(&self, hor: f64, area: usize) -> bool {
        hor >= self.min_hor && area >= self.min_area
    }
}

/// One record per superpixel that has no ignore pixel and passes the filter.
pub fn build_segments(
    region_id: u32,
    map: &SuperpixelMap,
    mask: &LabelMask,
    filter: &SegmentFilter,
) -> Result<Vec<SegmentRecord>, SegmentError> {
    if map.width != mask.width() || map.height != mask.height() {
        return Err(SegmentError::DimensionMismatch {
            map_w: map.width,
            map_h: map.height,
            mask_w: mask.width(),
            mask_h: mask.height(),
        });
    }
    let mut out = Vec::new();
    for (segment_id, pixels) in map.segment_pixels().into_iter().enumerate() {
        if pixels.is_empty() || pixels.len() < filter.min_area {
            continue;
        }
        let (hor, majority_label) = match compute_hor(&pixels, mask) {
            Ok(v) => v,
            Err(SegmentError::IgnorePixel(..)) => continue,
            Err(e) => return Err(e),
        };
        if filter.accepts(hor, pixels.len()) {
            out.push(SegmentRecord {
                region_id,
                segment_id: segment_id as u32,
                pixels,
                majority_label,
                hor,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSplit {
    pub train: BTreeSet<u32>,
    pub validation: BTreeSet<u32>,
    pub test: BTreeSet<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Validation,
    Test,
}

impl DatasetSplit {
    /// Regions 3, 4 test; 8 validation; the rest train.
    pub fn nine_region_default() -> Self {
        Self {
            train: [1, 2, 5, 6, 7, 9].into(),
            validation: [8].into(),
            test: [3, 4].into(),
        }
    }

    pub fn validate(&self) -> Result<(), SegmentError> {
        for (name, set) in [
            ("train", &self.train),
            ("validation", &self.validation),
            ("test", &self.test),
        ] {
            if set.is_empty() {
                return Err(SegmentError::InvalidSplit(format!("{name} set is empty")));
            }
        }
        let overlap = self
            .train
            .intersection(&self.validation)
            .chain(self.train.intersection(&self.test))
            .chain(self.validation.intersection(&self.test))
            .next();
        if let Some(r) = overlap {
            return Err(SegmentError::InvalidSplit(format!(
                "region {r} appears in two sets"
            )));
        }
        Ok(())
    }

    pub fn tag_of(&self, region: u32) -> Option<SplitTag> {
        if self.train.contains(&region) {
            Some(SplitTag::Train)
        } else if self.validation.contains(&region) {
            Some(SplitTag::Validation)
        } else if self.test.contains(&region) {
            Some(SplitTag::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub forest: usize,
    pub non_forest: usize,
}

impl ClassCounts {
    pub fn add(&mut self, l: Label) {
        match l {
            Label::Forest => self.forest += 1,
            Label::NonForest => self.non_forest += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.forest + self.non_forest
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitRecords<T> {
    pub train: Vec<T>,
    pub validation: Vec<T>,
    pub test: Vec<T>,
}

impl<T> SplitRecords<T> {
    pub fn get(&self, tag: SplitTag) -> &[T] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Validation => &self.validation,
            SplitTag::Test => &self.test,
        }
    }
}

/// Partitions items by region, preserving input order.
pub fn split_by_region<T: Clone>(
    items: &[T],
    region_of: impl Fn(&T) -> u32,
    split: &DatasetSplit,
) -> Result<SplitRecords<T>, SegmentError> {
    split.validate()?;
    let mut out = SplitRecords {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for it in items {
        let r = region_of(it);
        match split.tag_of(r).ok_or(SegmentError::UnassignedRegion(r))? {
            SplitTag::Train => out.train.push(it.clone()),
            SplitTag::Validation => out.validation.push(it.clone()),
            SplitTag::Test => out.test.push(it.clone()),
        }
    }
    Ok(out)
}

/// Splits records and reports per-class counts for each split.
pub fn split_records(
    records: &[SegmentRecord],
    split: &DatasetSplit,
) -> Result<(SplitRecords<SegmentRecord>, [ClassCounts; 3]), SegmentError> {
    let parts = split_by_region(records, |r| r.region_id, split)?;
    let count = |v: &[SegmentRecord]| {
        let mut c = ClassCounts::default();
        v.iter().for_each(|r| c.add(r.majority_label));
        c
    };
    let counts = [
        count(&parts.train),
        count(&parts.validation),
        count(&parts.test),
    ];
    Ok((parts, counts))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentLine {
    region_id: u32,
    segment_id: u32,
    area: usize,
    majority_label: Label,
    hor: f64,
    bbox: [u32; 4],
    pixel_run_lengths: Vec<u32>,
}

fn encode_runs(pixels: &[(u32, u32)]) -> ([u32; 4], Vec<u32>) {
    let x0 = pixels.iter().map(|p| p.0).min().unwrap_or(0);
    let x1 = pixels.iter().map(|p| p.0).max().unwrap_or(0);
    let y0 = pixels.iter().map(|p| p.1).min().unwrap_or(0);
    let y1 = pixels.iter().map(|p| p.1).max().unwrap_or(0);
    let bw = (x1 - x0 + 1) as usize;
    let bh = (y1 - y0 + 1) as usize;
    let mut bits = vec![false; bw * bh];
    for &(x, y) in pixels {
        bits[(y - y0) as usize * bw + (x - x0) as usize] = true;
    }
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0u32;
    for b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    runs.push(len);
    ([x0, y0, x1, y1], runs)
}

fn decode_runs(bbox: [u32; 4], runs: &[u32]) -> Result<Vec<(u32, u32)>, String> {
    let [x0, y0, x1, y1] = bbox;
    if x1 < x0 || y1 < y0 {
        return Err("inverted bbox".into());
    }
    let bw = x1 - x0 + 1;
    let total = bw as u64 * (y1 - y0 + 1) as u64;
    if runs.iter().map(|&r| r as u64).sum::<u64>() != total {
        return Err("run lengths do not cover bbox".into());
    }
    let mut out = Vec::new();
    let mut pos = 0u32;
    for (i, &r) in runs.iter().enumerate() {
        if i % 2 == 1 {
            for k in pos..pos + r {
                out.push((x0 + k % bw, y0 + k / bw));
            }
        }
        pos += r;
    }
    Ok(out)
}

pub fn write_segments_jsonl(path: &Path, records: &[SegmentRecord]) -> Result<(), SegmentError> {
    let io = |source| SegmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for r in records {
        let (bbox, pixel_run_lengths) = encode_runs(&r.pixels);
        let line = SegmentLine {
            region_id: r.region_id,
            segment_id: r.segment_id,
            area: r.area(),
            majority_label: r.majority_label,
            hor: r.hor,
            bbox,
            pixel_run_lengths,
        };
        serde_json::to_writer(&mut f, &line).expect("segment serializes");
        f.write_all(b"\n").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_segments_jsonl(path: &Path) -> Result<Vec<SegmentRecord>, SegmentError> {
    let io = |source| SegmentError::Io {
        path: path.to_path_buf(),
        source,
    };
    let f = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| SegmentError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let l: SegmentLine = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let pixels = decode_runs(l.bbox, &l.pixel_run_lengths).map_err(parse_err)?;
        if pixels.len() != l.area {
            return Err(parse_err(format!(
                "area {} but runs encode {} pixels",
                l.area,
                pixels.len()
            )));
        }
        out.push(SegmentRecord {
            region_id: l.region_id,
            segment_id: l.segment_id,
            pixels,
            majority_label: l.majority_label,
            hor: l.hor,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::FOREST;
    use proptest::prelude::*;

    fn mask_with(nfp: usize, nnp: usize) -> (LabelMask, Vec<(u32, u32)>) {
        let n = nfp + nnp;
        let mut labels = vec![FOREST; nfp];
        labels.extend(std::iter::repeat_n(NON_FOREST, nnp));
        let pixels = (0..n as u32).map(|x| (x, 0)).collect();
        (LabelMask::new(n, 1, labels).unwrap(), pixels)
    }

    #[test]
    fn hor_examples() {
        let (m, p) = mask_with(70, 30);
        assert_eq!(compute_hor(&p, &m).unwrap(), (0.70, Label::Forest));
        let (m, p) = mask_with(50, 50);
        assert_eq!(compute_hor(&p, &m).unwrap(), (0.5, Label::Forest));
        let (m, p) = mask_with(0, 120);
        assert_eq!(compute_hor(&p, &m).unwrap(), (1.0, Label::NonForest));
        assert!(matches!(
            compute_hor(&[], &m),
            Err(SegmentError::EmptySegment)
        ));
    }

    /// Segment 0 occupies the first `area` pixels of a single row; the rest
    /// of the row is segment 1 and is marked ignore.
    fn single_segment(area: usize, majority: usize) -> (SuperpixelMap, LabelMask) {
        let w = area + 1;
        let mut labels = vec![0u32; area];
        labels.push(1);
        let mut m = vec![FOREST; majority];
        m.extend(std::iter::repeat_n(NON_FOREST, area - majority));
        m.push(IGNORE);
        (
            SuperpixelMap {
                width: w,
                height: 1,
                labels,
                n_segments: 2,
            },
            LabelMask::new(w, 1, m).unwrap(),
        )
    }

    #[test]
    fn filter_boundaries() {
        let f = SegmentFilter::default();
        let (map, mask) = single_segment(69, 69);
        assert!(build_segments(1, &map, &mask, &f).unwrap().is_empty());
        let (map, mask) = single_segment(70, 49);
        let recs = build_segments(1, &map, &mask, &f).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].hor, 0.70);
    }

    #[test]
    fn ignore_pixel_drops_segment() {
        let (map, mut_mask) = single_segment(100, 100);
        let mut labels = mut_mask.labels().to_vec();
        labels[10] = IGNORE;
        let mask = LabelMask::new(map.width, 1, labels).unwrap();
        assert!(build_segments(1, &map, &mask, &SegmentFilter::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (map, _) = single_segment(10, 10);
        let mask = LabelMask::new(3, 3, vec![0; 9]).unwrap();
        assert!(matches!(
            build_segments(1, &map, &mask, &SegmentFilter::default()),
            Err(SegmentError::DimensionMismatch { .. })
        ));
    }

    fn rec(region: u32, id: u32) -> SegmentRecord {
        SegmentRecord {
            region_id: region,
            segment_id: id,
            pixels: vec![(0, 0)],
            majority_label: Label::Forest,
            hor: 1.0,
        }
    }

    #[test]
    fn split_single_region_and_unassigned() {
        let split = DatasetSplit {
            train: [1].into(),
            validation: [2].into(),
            test: [3].into(),
        };
        let recs = vec![rec(1, 0), rec(1, 1)];
        let (parts, counts) = split_records(&recs, &split).unwrap();
        assert_eq!(parts.train.len(), 2);
        assert_eq!(counts[0].forest, 2);
        let nine = DatasetSplit::nine_region_default();
        assert!(matches!(
            split_records(&[rec(10, 0)], &nine),
            Err(SegmentError::UnassignedRegion(10))
        ));
    }

    #[test]
    fn overlapping_split_rejected() {
        let split = DatasetSplit {
            train: [1, 2].into(),
            validation: [2].into(),
            test: [3].into(),
        };
        assert!(split.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let recs = vec![
            SegmentRecord {
                region_id: 2,
                segment_id: 5,
                pixels: vec![(3, 1), (4, 1), (3, 2), (5, 2), (4, 3)],
                majority_label: Label::NonForest,
                hor: 0.8,
            },
            rec(1, 0),
        ];
        write_segments_jsonl(&p, &recs).unwrap();
        assert_eq!(read_segments_jsonl(&p).unwrap(), recs);
    }

    proptest! {
        #[test]
        fn filters_are_monotone(
            labels in proptest::collection::vec(0u32..6, 200),
            truth in proptest::collection::vec(0u8..2, 200),
            h1 in 0.5f64..1.0, dh in 0.0f64..0.5, a1 in 1usize..40, da in 0usize..40,
        ) {
            let map = crate::slic::enforce_connectivity(
                &SuperpixelMap { width: 20, height: 10, labels, n_segments: 6 },
                &crate::slic::SlicConfig { k: 6, min_region_frac: 0.01, ..Default::default() },
            );
            let mask = LabelMask::new(20, 10, truth).unwrap();
            let loose = SegmentFilter { min_hor: h1, min_area: a1 };
            let strict = SegmentFilter { min_hor: h1 + dh, min_area: a1 + da };
            let a = build_segments(1, &map, &mask, &loose).unwrap();
            let b = build_segments(1, &map, &mask, &strict).unwrap();
            prop_assert!(b.len() <= a.len());
            for r in &b {
                prop_assert!(a.iter().any(|x| x.segment_id == r.segment_id));
                let (hor, _) = compute_hor(&r.pixels, &mask).unwrap();
                prop_assert!(hor >= strict.min_hor && r.area() >= strict.min_area);
            }
        }
    }
}
