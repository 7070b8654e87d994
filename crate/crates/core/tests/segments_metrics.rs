use std::collections::BTreeSet;

use bandsel::metrics::{
    confusion, confusion_from_labels, error_visualization, ConfusionCounts, MetricError,
};
use bandsel::pipeline::{relative_gain, score_masks, PipelineError};
use bandsel::raster::{LabelMask, FOREST, IGNORE, NON_FOREST};
use bandsel::segset::{
    build_segments, hor_from_counts, read_segments_jsonl, split_by_region, write_segments_jsonl,
    DatasetSplit, Label, SegmentFilter, SegmentRecord,
};
use bandsel::slic::SuperpixelMap;
use bandsel::svm::{balanced_accuracy, predict, train, SvmConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn split_partitions_items(
        regions in proptest::collection::vec(1u32..10, 0..60),
        perm in Just((1u32..10).collect::<Vec<_>>()).prop_shuffle(),
        a in 1usize..7,
        b in 1usize..7,
    ) {
        let (a, b) = (a.min(b), a.max(b).min(8));
        prop_assume!(a < b);
        let set = |s: &[u32]| s.iter().copied().collect::<BTreeSet<_>>();
        let split = DatasetSplit {
            train: set(&perm[..a]),
            validation: set(&perm[a..b]),
            test: set(&perm[b..]),
        };
        let items: Vec<(usize, u32)> = regions.iter().copied().enumerate().collect();
        let parts = split_by_region(&items, |i| i.1, &split).unwrap();
        prop_assert_eq!(parts.train.len() + parts.validation.len() + parts.test.len(), items.len());
        prop_assert!(parts.train.iter().all(|i| split.train.contains(&i.1)));
        prop_assert!(parts.validation.iter().all(|i| split.validation.contains(&i.1)));
        prop_assert!(parts.test.iter().all(|i| split.test.contains(&i.1)));
        prop_assert!(parts.train.windows(2).all(|w| w[0].0 < w[1].0));
    }

    #[test]
    fn hor_is_majority_share(nfp in 0usize..500, nnp in 0usize..500) {
        prop_assume!(nfp + nnp > 0);
        let (h, l) = hor_from_counts(nfp, nnp);
        prop_assert!((0.5..=1.0).contains(&h));
        prop_assert_eq!(h, nfp.max(nnp) as f64 / (nfp + nnp) as f64);
        prop_assert_eq!(l == Label::NonForest, nnp > nfp);
    }
}

#[test]
fn overlapping_split_is_rejected() {
    let split = DatasetSplit {
        train: [1, 2].into(),
        validation: [2].into(),
        test: [3].into(),
    };
    assert!(split_by_region(&[1u32], |r| *r, &split).is_err());
    let ok = DatasetSplit {
        train: [1].into(),
        validation: [2].into(),
        test: [3].into(),
    };
    assert!(split_by_region(&[7u32], |r| *r, &ok).is_err());
}

#[test]
fn segments_filter_and_roundtrip() {
    // Three vertical stripes of 10x10: pure forest, 75/25 mixed, contains ignore.
    let (w, h) = (30, 10);
    let labels: Vec<u32> = (0..w * h).map(|p| ((p % w) / 10) as u32).collect();
    let map = SuperpixelMap {
        width: w,
        height: h,
        labels,
        n_segments: 3,
    };
    let mask: Vec<u8> = (0..w * h)
        .map(|p| match ((p % w) / 10, p / w) {
            (0, _) => FOREST,
            (1, y) if y < 3 => FOREST,
            (1, _) => NON_FOREST,
            (_, 0) => IGNORE,
            _ => NON_FOREST,
        })
        .collect();
    let mask = LabelMask::new(w, h, mask).unwrap();
    let recs = build_segments(5, &map, &mask, &SegmentFilter::default()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(
        (recs[0].segment_id, recs[0].majority_label, recs[0].hor),
        (0, Label::Forest, 1.0)
    );
    assert_eq!(
        (recs[1].segment_id, recs[1].majority_label, recs[1].hor),
        (1, Label::NonForest, 0.7)
    );
    let strict = SegmentFilter {
        min_hor: 0.71,
        min_area: 70,
    };
    assert_eq!(build_segments(5, &map, &mask, &strict).unwrap().len(), 1);
    let big = SegmentFilter {
        min_hor: 0.7,
        min_area: 101,
    };
    assert!(build_segments(5, &map, &mask, &big).unwrap().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    write_segments_jsonl(&path, &recs).unwrap();
    let back: Vec<SegmentRecord> = read_segments_jsonl(&path).unwrap();
    assert_eq!(back, recs);
}

#[test]
fn metric_hand_example() {
    // Non-forest is the positive class.
    let truth = LabelMask::new(4, 4, vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let pred = LabelMask::new(4, 4, vec![1, 1, 1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
    let c = confusion(&pred, &truth).unwrap();
    assert_eq!(c, ConfusionCounts::new(3, 1, 11, 1));
    assert_eq!(c.iou().unwrap(), 0.6);
    assert_eq!(c.precision().unwrap(), 0.75);
    assert_eq!(c.recall().unwrap(), 0.75);
    assert_eq!(c.f1().unwrap(), 0.75);
    assert_eq!(c.accuracy().unwrap(), 14.0 / 16.0);
    let rgb = error_visualization(&pred, &truth).unwrap();
    assert_eq!(rgb[3], [255, 0, 0]);
    assert_eq!(rgb[4], [0, 0, 255]);
    assert_eq!(rgb[0], [255, 255, 255]);
    assert_eq!(rgb[5], [0, 0, 0]);
}

#[test]
fn undefined_metrics_are_errors() {
    let c = ConfusionCounts::new(0, 0, 5, 0);
    assert!(matches!(
        c.precision(),
        Err(MetricError::ZeroDenominator { .. })
    ));
    assert!(c.recall().is_err() && c.f1().is_err() && c.iou().is_err());
    assert_eq!(c.accuracy().unwrap(), 1.0);
    let s = c.summary();
    assert_eq!(s.precision, None);
    assert!(s.undefined.contains(&"iou".to_string()));
    let ignore = LabelMask::new(1, 1, vec![IGNORE]).unwrap();
    let ok = LabelMask::new(1, 1, vec![FOREST]).unwrap();
    assert!(matches!(
        confusion(&ignore, &ok),
        Err(MetricError::IgnoreInPrediction(0))
    ));
    let wide = LabelMask::new(2, 1, vec![0, 0]).unwrap();
    assert!(confusion(&wide, &ok).is_err());
}

proptest! {
    #[test]
    fn metric_identities(tp in 0u64..1000, fp in 0u64..1000, tn in 0u64..1000, fn_ in 0u64..1000) {
        let c = ConfusionCounts::new(tp, fp, tn, fn_);
        if let (Ok(p), Ok(r), Ok(f)) = (c.precision(), c.recall(), c.f1()) {
            if p + r > 0.0 {
                prop_assert!((f - 2.0 * p * r / (p + r)).abs() < 1e-12);
            }
        }
        if let (Ok(f), Ok(j)) = (c.f1(), c.iou()) {
            prop_assert!((j - f / (2.0 - f)).abs() < 1e-12);
        }
        let truth: Vec<Label> = std::iter::repeat_n(Label::NonForest, (tp + fn_) as usize)
            .chain(std::iter::repeat_n(Label::Forest, (fp + tn) as usize))
            .collect();
        let pred: Vec<Label> = std::iter::repeat_n(Label::NonForest, tp as usize)
            .chain(std::iter::repeat_n(Label::Forest, fn_ as usize))
            .chain(std::iter::repeat_n(Label::NonForest, fp as usize))
            .chain(std::iter::repeat_n(Label::Forest, tn as usize))
            .collect();
        prop_assert_eq!(confusion_from_labels(&truth, &pred).unwrap(), c);
    }
}

fn write_masks(dir: &std::path::Path, name: &str, w: usize, h: usize, labels: Vec<u8>) {
    LabelMask::new(w, h, labels)
        .unwrap()
        .save_pgm(dir.join(name))
        .unwrap();
}

#[test]
fn score_masks_identity_inverted_and_unpaired() {
    let root = tempfile::tempdir().unwrap();
    let (pred, truth, out) = (
        root.path().join("pred"),
        root.path().join("truth"),
        root.path().join("out"),
    );
    let labels: Vec<u8> = (0..64).map(|p| (p % 3 == 0) as u8).collect();
    write_masks(&truth, "a.pgm", 8, 8, labels.clone());
    write_masks(&pred, "a.pgm", 8, 8, labels.clone());
    let s = score_masks(&pred, &truth, &out).unwrap();
    assert_eq!(s.total.metrics.iou, Some(1.0));
    let ppm = std::fs::read(out.join("errors/a.ppm")).unwrap();
    let body = &ppm[ppm.len() - 64 * 3..];
    assert!(body
        .chunks(3)
        .all(|px| px == [0, 0, 0] || px == [255, 255, 255]));

    write_masks(&pred, "a.pgm", 8, 8, labels.iter().map(|v| 1 - v).collect());
    let s = score_masks(&pred, &truth, &out).unwrap();
    assert_eq!(s.total.metrics.iou, Some(0.0));
    assert!(out.join("scores.json").is_file() && out.join("scores.txt").is_file());

    write_masks(&pred, "b.pgm", 8, 8, labels);
    assert!(
        matches!(score_masks(&pred, &truth, &out), Err(PipelineError::Unpaired(n)) if n.contains("b.pgm"))
    );
}

#[test]
fn relative_gain_examples() {
    let best = 87.08;
    for (base, want) in [(84.66, 2.86), (82.07, 6.10), (73.87, 17.88)] {
        let g = relative_gain(best, base).unwrap();
        assert!((g - want).abs() < 0.005, "{g} vs {want}");
    }
    assert_eq!(relative_gain(0.9, 0.0), None);
}

#[test]
fn svm_separates_shifted_gaussians() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut gauss = || {
        let (u, v): (f64, f64) = (rng.random_range(1e-12..1.0), rng.random());
        (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
    };
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..400 {
        let l = if i % 4 == 0 {
            Label::NonForest
        } else {
            Label::Forest
        };
        let shift = if l == Label::NonForest { 3.0 } else { 0.0 };
        x.push(vec![gauss() + shift, gauss() - shift, gauss()]);
        y.push(l);
    }
    let m = train(&x, &y, &SvmConfig::default()).unwrap();
    let ba = balanced_accuracy(&y, &predict(&m, &x).unwrap()).unwrap();
    assert!(ba > 0.95, "{ba}");
    assert!(m.loss_trace.last().unwrap() < m.loss_trace.first().unwrap());
    assert_eq!(train(&x, &y, &SvmConfig::default()).unwrap(), m);
}
