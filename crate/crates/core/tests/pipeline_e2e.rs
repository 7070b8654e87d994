use std::fs;
use std::path::Path;

use bandsel::pipeline::{run_pipeline, Context, PipelineError, RunConfig, Stage};
use bandsel::synth::write_corpus;
use bandsel::Exec;

fn small(root: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        corpus: root.join("corpus"),
        out: root.join("run"),
        ..RunConfig::default()
    };
    cfg.synthetic.width = 128;
    cfg.synthetic.height = 128;
    cfg.synthetic.blob_count = 6;
    cfg.umda.seeds = vec![1, 2];
    cfg.umda.generations = 4;
    cfg.texture.levels = 16;
    cfg
}

fn mtime(p: &Path) -> std::time::SystemTime {
    fs::metadata(p).unwrap().modified().unwrap()
}

/// The report is rebuilt every run; every stage before it is cached.
fn cached(ctx: &Context) -> bool {
    Stage::ALL[..Stage::ALL.len() - 1]
        .iter()
        .all(|&s| ctx.is_fresh(s))
}

#[test]
fn resume_skips_fresh_stages_and_refuses_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    write_corpus(&cfg.synthetic, &cfg.corpus).unwrap();
    let ctx = Context::new(cfg.clone(), Exec::Sequential).unwrap();
    let first = run_pipeline(&ctx).unwrap();
    assert!(cached(&ctx));
    assert_eq!(first.seeds.len(), 2);
    assert!(cfg.out.join("report.txt").is_file());

    // Everything is current, so nothing reads the feature data again.
    let features = cfg.out.join("features/manifest.json");
    let stamp = mtime(&features);
    let data: Vec<_> = fs::read_dir(cfg.out.join("features"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p != &features)
        .collect();
    let saved: Vec<_> = data
        .iter()
        .map(|p| (p.clone(), fs::read(p).unwrap()))
        .collect();
    data.iter().for_each(|p| fs::remove_file(p).unwrap());
    let second = run_pipeline(&ctx).unwrap();
    assert_eq!(second, first);
    saved.iter().for_each(|(p, b)| fs::write(p, b).unwrap());

    // A classifier change invalidates selection onward but not features.
    let mut changed = cfg.clone();
    changed.svm.lambda *= 10.0;
    let ctx2 = Context::new(changed, Exec::Sequential).unwrap();
    assert!(ctx2.is_fresh(Stage::Features) && !ctx2.is_fresh(Stage::SelectBands));
    match ctx2.run_stage(Stage::Evaluate) {
        Err(PipelineError::StaleInput { stage, .. }) => assert_eq!(stage, Stage::Evaluate),
        other => panic!("expected StaleInput, got {other:?}"),
    }
    run_pipeline(&ctx2).unwrap();
    assert_eq!(mtime(&features), stamp);
    assert!(cached(&ctx2));
    assert!(!ctx.is_fresh(Stage::SelectBands));
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    write_corpus(&cfg.synthetic, &cfg.corpus).unwrap();
    let seq = run_pipeline(&Context::new(cfg.clone(), Exec::Sequential).unwrap()).unwrap();
    let par_cfg = RunConfig {
        out: dir.path().join("run_par"),
        ..cfg
    };
    let par = run_pipeline(&Context::new(par_cfg, Exec::Parallel).unwrap()).unwrap();
    assert_eq!(seq, par);
}

#[test]
fn missing_inputs_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let ctx = Context::new(cfg, Exec::Sequential).unwrap();
    match run_pipeline(&ctx) {
        Err(PipelineError::MissingInput { stage, .. }) => assert_eq!(stage, Stage::Composite),
        other => panic!("expected MissingInput, got {other:?}"),
    }
    match ctx.run_stage(Stage::Superpixels) {
        Err(PipelineError::MissingInput { stage, .. }) => assert_eq!(stage, Stage::Superpixels),
        other => panic!("expected MissingInput, got {other:?}"),
    }
}

#[test]
fn single_signal_band_alone_classifies_well() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.synthetic.signal_bands = vec!["B4".into()];
    write_corpus(&cfg.synthetic, &cfg.corpus).unwrap();
    let ctx = Context::new(cfg, Exec::Parallel).unwrap();
    for st in [
        Stage::Composite,
        Stage::Superpixels,
        Stage::Segments,
        Stage::Features,
    ] {
        ctx.run_stage(st).unwrap();
    }
    let tables = ctx.load_split_features(Stage::Evaluate).unwrap();
    let r = ctx
        .evaluate_composition(&tables, "B4", &["B4".into()])
        .unwrap();
    assert!(
        r.validation.balanced_accuracy >= 0.9,
        "{}",
        r.validation.balanced_accuracy
    );
    let noise = ctx
        .evaluate_composition(&tables, "noise", &["B2".into(), "B5".into()])
        .unwrap();
    assert!(noise.validation.balanced_accuracy < r.validation.balanced_accuracy);
}
