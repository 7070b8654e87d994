//! Stage orchestration: corpus -> PCA composite -> superpixels -> segments ->
//! features -> UMDA band selection -> ranking -> composition comparison.
//!
//! Every stage writes a manifest carrying the hash of the full run config and
//! a stage hash covering only the settings the stage (and its inputs) depend
//! on. A stage whose manifest hash already matches is skipped by
//! [`run_pipeline`]; a stage reading an input whose hash disagrees with the
//! current config fails instead of mixing artifacts.
//!
//! Layout under the output root:
//!
//! ```text
//! composite/{manifest.json, region_<id>/...}
//! superpixels/{manifest.json, region_<id>/...}
//! segments/{manifest.json, segments.jsonl}
//! features/{manifest.json, features.jsonl}
//! umda/{manifest.json, seed_<s>.json, fitness_cache.json}
//! ranking/{ranking.json, ranking.txt}
//! evaluation/{compositions.json, compositions.txt}
//! report.json, report.txt
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Exec;
use crate::metrics::{confusion, error_visualization, ConfusionCounts, MetricSummary};
use crate::raster::{
    compose, load_raster, write_ppm, Channel, LabelMask, MultibandRaster, Pca, LANDSAT_BANDS,
};
use crate::segset::{
    build_segments, read_segments_jsonl, split_by_region, split_records, write_segments_jsonl,
    ClassCounts, DatasetSplit, SegmentFilter, SplitTag,
};
use crate::slic::{slic_segment, to_lab, SlicConfig, SuperpixelMap};
use crate::svm::{evaluate_channels, FitnessEvaluator, FitnessValue, SvmConfig};
use crate::synth::{region_dir, SyntheticSpec};
use crate::texture::{
    extract_features, read_features_jsonl, write_features_jsonl, FeatureTable, TextureConfig,
};
use crate::umda::{
    self, rank_bands, ranking_table, BandRanking, Genome, PooledIndividual, RunResult, UmdaConfig,
};

pub const CONFIG_VERSION: u32 = 1;

/// Principal components in the SLIC composite (read as sRGB).
pub const PCA_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Composite,
    Superpixels,
    Segments,
    Features,
    SelectBands,
    RankBands,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Composite,
        Stage::Superpixels,
        Stage::Segments,
        Stage::Features,
        Stage::SelectBands,
        Stage::RankBands,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Composite => "composite",
            Stage::Superpixels => "superpixels",
            Stage::Segments => "build-segments",
            Stage::Features => "extract-features",
            Stage::SelectBands => "select-bands",
            Stage::RankBands => "rank-bands",
            Stage::Evaluate => "evaluate-composition",
            Stage::Report => "report",
        }
    }

    /// Config sections this stage's output depends on, upstream included.
    fn sections(self) -> &'static [&'static str] {
        const ALL: [&str; 7] = [
            "slic",
            "segments",
            "texture",
            "split",
            "svm",
            "umda",
            "compositions",
        ];
        match self {
            Stage::Composite => &[],
            Stage::Superpixels => &ALL[..1],
            Stage::Segments => &ALL[..2],
            Stage::Features => &ALL[..3],
            Stage::SelectBands | Stage::RankBands => &ALL[..6],
            Stage::Evaluate | Stage::Report => &ALL,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("[{stage}] {message}")]
    Stage { stage: Stage, message: String },
    #[error("[{stage}] {} was produced by a different configuration (stage hash {found}, expected {expected}); rerun the upstream stage", path.display())]
    StaleInput {
        stage: Stage,
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("[{stage}] missing input {}: run the upstream stage first", path.display())]
    MissingInput { stage: Stage, path: PathBuf },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unpaired mask files: {0}")]
    Unpaired(String),
    #[error("mask {name}: {message}")]
    Mask { name: String, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn in_stage<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlicParams {
    /// `k = round(region pixels / mean_area)`.
    pub mean_area: f64,
    pub m: f64,
    pub max_iter: usize,
    pub min_region_frac: f64,
}

impl Default for SlicParams {
    fn default() -> Self {
        let d = SlicConfig::default();
        Self {
            mean_area: 350.0,
            m: d.m,
            max_iter: d.max_iter,
            min_region_frac: d.min_region_frac,
        }
    }
}

impl SlicParams {
    pub fn for_pixels(&self, n_pixels: usize) -> SlicConfig {
        SlicConfig {
            k: 1,
            m: self.m,
            max_iter: self.max_iter,
            min_region_frac: self.min_region_frac,
        }
        .with_mean_area(n_pixels, self.mean_area)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UmdaParams {
    pub population: usize,
    pub parents: usize,
    pub generations: usize,
    pub margins: bool,
    pub seeds: Vec<u64>,
    /// Pool size for the frequency ranking.
    pub top_k: usize,
    /// Also score all 127 band subsets for comparison.
    pub exhaustive: bool,
}

impl Default for UmdaParams {
    fn default() -> Self {
        Self {
            population: 10,
            parents: 5,
            generations: 10,
            margins: false,
            seeds: vec![1, 10, 20, 30, 42],
            top_k: 22,
            exhaustive: false,
        }
    }
}

impl UmdaParams {
    pub fn for_seed(&self, seed: u64) -> UmdaConfig {
        UmdaConfig {
            genome_len: LANDSAT_BANDS.len(),
            population: self.population,
            parents: self.parents,
            generations: self.generations,
            margins: self.margins,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompositionSpec {
    pub name: String,
    pub channels: Vec<String>,
}

impl CompositionSpec {
    fn new(name: &str, channels: &[&str]) -> Self {
        Self {
            name: name.into(),
            channels: channels.iter().map(|c| c.to_string()).collect(),
        }
    }
}

fn synthetic_split() -> DatasetSplit {
    DatasetSplit {
        train: [1, 2].into(),
        validation: [3].into(),
        test: [4].into(),
    }
}

/// Declarative run configuration. Paths are not part of the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub synthetic: SyntheticSpec,
    pub slic: SlicParams,
    pub segments: SegmentFilter,
    pub texture: TextureConfig,
    pub svm: SvmConfig,
    pub umda: UmdaParams,
    pub split: DatasetSplit,
    /// Baselines compared against the best individual.
    pub compositions: Vec<CompositionSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            corpus: "corpus".into(),
            out: "run".into(),
            synthetic: SyntheticSpec::default(),
            slic: SlicParams::default(),
            segments: SegmentFilter::default(),
            texture: TextureConfig::default(),
            svm: SvmConfig::default(),
            umda: UmdaParams::default(),
            split: synthetic_split(),
            compositions: vec![
                CompositionSpec::new("RGB", &["B4", "B3", "B2"]),
                CompositionSpec::new("PCA", &["PC1", "PC2", "PC3"]),
                CompositionSpec::new(
                    "All+NDVI",
                    &["B1", "B2", "B3", "B4", "B5", "B6", "B7", "NDVI"],
                ),
            ],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Feature channels: the seven bands, the principal components, NDVI.
    pub fn feature_channels(&self) -> Vec<Channel> {
        (0..LANDSAT_BANDS.len())
            .map(Channel::Band)
            .chain((1..=PCA_COMPONENTS).map(Channel::Pc))
            .chain([Channel::Ndvi])
            .collect()
    }

    pub fn feature_channel_names(&self) -> Vec<String> {
        LANDSAT_BANDS
            .iter()
            .map(|s| s.to_string())
            .chain((1..=PCA_COMPONENTS).map(|c| format!("PC{c}")))
            .chain(["NDVI".to_string()])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        if !(self.slic.mean_area >= 1.0) {
            return bad("slic.mean_area must be >= 1".into());
        }
        self.slic
            .for_pixels(1 << 16)
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        if !(0.5..=1.0).contains(&self.segments.min_hor) {
            return bad("segments.min_hor must be in [0.5, 1]".into());
        }
        if self.texture.levels < 2 || self.texture.levels > 1 << 12 {
            return bad("texture.levels must be in [2, 4096]".into());
        }
        if !(self.svm.lambda > 0.0) || self.svm.epochs == 0 {
            return bad("svm.lambda must be > 0 and svm.epochs >= 1".into());
        }
        if self.umda.seeds.is_empty() {
            return bad("umda.seeds must be nonempty".into());
        }
        if self.umda.top_k == 0 {
            return bad("umda.top_k must be >= 1".into());
        }
        self.umda
            .for_seed(0)
            .validate()
            .or_else(|e| bad(e.to_string()))?;
        self.split.validate().or_else(|e| bad(e.to_string()))?;
        let known = self.feature_channel_names();
        for c in &self.compositions {
            if c.channels.is_empty() {
                return bad(format!("composition {} has no channels", c.name));
            }
            if let Some(u) = c.channels.iter().find(|ch| !known.contains(ch)) {
                return bad(format!("composition {}: unknown channel {u}", c.name));
            }
        }
        Ok(())
    }

    fn section_json(&self) -> serde_json::Map<String, serde_json::Value> {
        match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("config is a struct"),
        }
    }

    fn hash_sections(&self, keys: &[&str]) -> String {
        let all = self.section_json();
        let mut picked = serde_json::Map::new();
        picked.insert("version".into(), self.version.into());
        for k in keys {
            picked.insert(k.to_string(), all[*k].clone());
        }
        let bytes = serde_json::to_vec(&picked).expect("json serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Hash of every computational setting (paths and the synthetic spec excluded).
    pub fn config_hash(&self) -> String {
        self.hash_sections(Stage::Report.sections())
    }

    pub fn stage_hash(&self, stage: Stage) -> String {
        self.hash_sections(stage.sections())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest<T> {
    stage: String,
    config_hash: String,
    stage_hash: String,
    details: T,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    fs::write(path, s).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Aligned plain-text table; the first row is the header.
pub fn text_table(rows: &[Vec<String>]) -> String {
    let ncol = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> = (0..ncol)
        .map(|c| {
            rows.iter()
                .map(|r| r.get(c).map_or(0, |s| s.chars().count()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let cells: Vec<String> = (0..ncol)
            .map(|c| {
                let s = r.get(c).map_or("", |s| s.as_str());
                let w = widths[c];
                if c == 0 {
                    format!("{s:<w$}")
                } else {
                    format!("{s:>w$}")
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * ncol.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undef".into(), |x| format!("{x:.4}"))
}

/// Config plus execution policy for one run.
pub struct Context {
    pub cfg: RunConfig,
    pub exec: Exec,
}

impl Context {
    pub fn new(cfg: RunConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, exec })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn manifest_path(stage: Stage) -> &'static str {
        match stage {
            Stage::Composite => "composite/manifest.json",
            Stage::Superpixels => "superpixels/manifest.json",
            Stage::Segments => "segments/manifest.json",
            Stage::Features => "features/manifest.json",
            Stage::SelectBands => "umda/manifest.json",
            Stage::RankBands => "ranking/ranking.json",
            Stage::Evaluate => "evaluation/compositions.json",
            Stage::Report => "report.json",
        }
    }

    fn regions(&self) -> Vec<u32> {
        let s = &self.cfg.split;
        let mut v: Vec<u32> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .copied()
            .collect();
        v.sort_unstable();
        v
    }

    fn write_manifest<T: Serialize>(&self, stage: Stage, details: T) -> Result<()> {
        write_json(
            &self.out(Self::manifest_path(stage)),
            &Manifest {
                stage: stage.name().into(),
                config_hash: self.cfg.config_hash(),
                stage_hash: self.cfg.stage_hash(stage),
                details,
            },
        )
    }

    /// Reads `producer`'s manifest on behalf of `consumer`, checking its hash.
    fn read_manifest<T: DeserializeOwned>(&self, producer: Stage, consumer: Stage) -> Result<T> {
        let path = self.out(Self::manifest_path(producer));
        if !path.exists() {
            return Err(PipelineError::MissingInput {
                stage: consumer,
                path,
            });
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest<T> = serde_json::from_str(&text).map_err(in_stage(consumer))?;
        let expected = self.cfg.stage_hash(producer);
        if m.stage_hash != expected {
            return Err(PipelineError::StaleInput {
                stage: consumer,
                path,
                found: m.stage_hash,
                expected,
            });
        }
        Ok(m.details)
    }

    /// True when `stage`'s manifest exists and matches the current config.
    pub fn is_fresh(&self, stage: Stage) -> bool {
        #[derive(Deserialize)]
        struct Head {
            stage_hash: String,
        }
        let path = self.out(Self::manifest_path(stage));
        fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str::<Head>(&t).ok())
            .is_some_and(|h| h.stage_hash == self.cfg.stage_hash(stage))
    }

    fn load_source(&self, region: u32, stage: Stage) -> Result<MultibandRaster> {
        let dir = region_dir(&self.cfg.corpus, region).join("raster");
        if !dir.join("meta.json").exists() {
            return Err(PipelineError::MissingInput { stage, path: dir });
        }
        load_raster(&dir).map_err(in_stage(stage))
    }

    fn load_mask(&self, region: u32, stage: Stage) -> Result<LabelMask> {
        let path = region_dir(&self.cfg.corpus, region).join("mask.pgm");
        if !path.exists() {
            return Err(PipelineError::MissingInput { stage, path });
        }
        LabelMask::load_pgm(&path).map_err(in_stage(stage))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        info!("stage {stage}: running");
        match stage {
            Stage::Composite => self.stage_composite(),
            Stage::Superpixels => self.stage_superpixels(),
            Stage::Segments => self.stage_segments(),
            Stage::Features => self.stage_features(),
            Stage::SelectBands => self.stage_select_bands(),
            Stage::RankBands => self.stage_rank_bands(),
            Stage::Evaluate => self.stage_evaluate(),
            Stage::Report => self.stage_report().map(|_| ()),
        }
    }

    // (a) PCA composite per region.
    fn stage_composite(&self) -> Result<()> {
        let st = Stage::Composite;
        let n = PCA_COMPONENTS;
        let pcs: Vec<Channel> = (1..=n).map(Channel::Pc).collect();
        let infos = self.exec.try_map(&self.regions(), |&region| {
            let src = self.load_source(region, st)?;
            let pca = Pca::fit(&src).map_err(in_stage(st))?;
            let comp = compose(&src, &pcs).map_err(in_stage(st))?;
            comp.raster
                .save(self.out(&format!("composite/region_{region}")))
                .map_err(in_stage(st))?;
            Ok::<_, PipelineError>((
                region,
                CompositeInfo {
                    explained_variance_ratio: pca.explained_variance_ratio()[..n].to_vec(),
                },
            ))
        })?;
        self.write_manifest(st, infos.into_iter().collect::<BTreeMap<_, _>>())
    }

    // (b) SLIC superpixels on the composite.
    fn stage_superpixels(&self) -> Result<()> {
        let st = Stage::Superpixels;
        self.read_manifest::<BTreeMap<u32, CompositeInfo>>(Stage::Composite, st)?;
        let infos = self.exec.try_map(&self.regions(), |&region| {
            let comp = load_raster(self.out(&format!("composite/region_{region}")))
                .map_err(in_stage(st))?;
            let cfg = self.cfg.slic.for_pixels(comp.n_pixels());
            let map =
                slic_segment(&to_lab(&comp).map_err(in_stage(st))?, &cfg).map_err(in_stage(st))?;
            map.save(self.out(&format!("superpixels/region_{region}")))
                .map_err(in_stage(st))?;
            Ok::<_, PipelineError>((
                region,
                SuperpixelInfo {
                    k: cfg.k,
                    n_segments: map.n_segments,
                },
            ))
        })?;
        self.write_manifest(st, infos.into_iter().collect::<BTreeMap<_, _>>())
    }

    // (c) HoR / area filtering against the ground truth.
    fn stage_segments(&self) -> Result<()> {
        let st = Stage::Segments;
        self.read_manifest::<BTreeMap<u32, SuperpixelInfo>>(Stage::Superpixels, st)?;
        let per_region = self.exec.try_map(&self.regions(), |&region| {
            let map = SuperpixelMap::load(self.out(&format!("superpixels/region_{region}")))
                .map_err(in_stage(st))?;
            let mask = self.load_mask(region, st)?;
            let recs =
                build_segments(region, &map, &mask, &self.cfg.segments).map_err(in_stage(st))?;
            Ok::<_, PipelineError>((map.n_segments, recs))
        })?;
        let mut regions = BTreeMap::new();
        let mut records = Vec::new();
        for (&region, (n, recs)) in self.regions().iter().zip(per_region) {
            let mut c = ClassCounts::default();
            recs.iter().for_each(|r| c.add(r.majority_label));
            regions.insert(
                region,
                RegionSegments {
                    superpixels: n,
                    kept: recs.len(),
                    classes: c,
                },
            );
            records.extend(recs);
        }
        let (_, counts) = split_records(&records, &self.cfg.split).map_err(in_stage(st))?;
        for (tag, c) in ["train", "validation", "test"].iter().zip(&counts) {
            if c.forest == 0 || c.non_forest == 0 {
                return Err(PipelineError::Stage {
                    stage: st,
                    message: format!("{tag} split lacks one class ({c:?})"),
                });
            }
        }
        write_segments_jsonl(&self.out("segments/segments.jsonl"), &records)
            .map_err(in_stage(st))?;
        self.write_manifest(
            st,
            SegmentsInfo {
                regions,
                splits: SplitCounts {
                    train: counts[0],
                    validation: counts[1],
                    test: counts[2],
                },
            },
        )
    }

    // (d) Haralick features for every channel.
    fn stage_features(&self) -> Result<()> {
        let st = Stage::Features;
        self.read_manifest::<SegmentsInfo>(Stage::Segments, st)?;
        let records =
            read_segments_jsonl(&self.out("segments/segments.jsonl")).map_err(in_stage(st))?;
        let channels = self.cfg.feature_channels();
        let stacks = self.exec.try_map(&self.regions(), |&region| {
            let src = self.load_source(region, st)?;
            let c = compose(&src, &channels).map_err(in_stage(st))?;
            Ok::<_, PipelineError>((region, c.raster))
        })?;
        let rasters: BTreeMap<u32, MultibandRaster> = stacks.into_iter().collect();
        let table = extract_features(self.exec, &rasters, &records, &self.cfg.texture)
            .map_err(in_stage(st))?;
        write_features_jsonl(&self.out("features/features.jsonl"), &table).map_err(in_stage(st))?;
        self.write_manifest(
            st,
            FeaturesInfo {
                channels: table.channels.clone(),
                block_len: table.block_len,
                rows: table.rows.len(),
            },
        )
    }

    /// Features split by region, as checked by the consuming stage.
    pub fn load_split_features(&self, consumer: Stage) -> Result<SplitTables> {
        let info: FeaturesInfo = self.read_manifest(Stage::Features, consumer)?;
        let table = read_features_jsonl(&self.out("features/features.jsonl"), &info.channels)
            .map_err(in_stage(consumer))?;
        let parts = split_by_region(&table.rows, |r| r.region_id, &self.cfg.split)
            .map_err(in_stage(consumer))?;
        Ok(SplitTables {
            train: table.subset(parts.train),
            validation: table.subset(parts.validation),
            test: table.subset(parts.test),
        })
    }

    pub fn fitness_evaluator(&self, tables: &SplitTables) -> FitnessEvaluator {
        FitnessEvaluator::new(
            tables.train.clone(),
            tables.validation.clone(),
            SplitTag::Validation,
            self.cfg.svm,
        )
    }

    // (e)-(f) UMDA band selection for each seed.
    fn stage_select_bands(&self) -> Result<()> {
        let st = Stage::SelectBands;
        let tables = self.load_split_features(st)?;
        let evaluator = self.fitness_evaluator(&tables);
        let cache_path = self.out("umda/fitness_cache.json");
        if let Ok(text) = fs::read_to_string(&cache_path) {
            if let Ok(c) = serde_json::from_str::<Manifest<BTreeMap<String, FitnessValue>>>(&text) {
                if c.stage_hash == self.cfg.stage_hash(st) {
                    evaluator.preload(c.details);
                }
            }
        }
        let mut seeds = Vec::new();
        for &seed in &self.cfg.umda.seeds {
            let res = umda::run(&self.cfg.umda.for_seed(seed), self.exec, |g| {
                evaluator.fitness(g).map(|f| f.balanced_accuracy)
            })
            .map_err(in_stage(st))?;
            info!(
                "seed {seed}: best {} balanced accuracy {:.4} after {} evaluations",
                res.best.genome,
                res.best.fitness.unwrap_or(0.0),
                res.evaluations
            );
            write_json(&self.out(&format!("umda/seed_{seed}.json")), &res)?;
            seeds.push(SeedSummary {
                seed,
                best: res.best.genome.clone(),
                fitness: res.best.fitness.unwrap_or(0.0),
                evaluations: res.evaluations,
            });
        }
        let exhaustive = if self.cfg.umda.exhaustive {
            let all = exhaustive_search(&evaluator, self.exec, LANDSAT_BANDS.len())
                .map_err(in_stage(st))?;
            write_json(&self.out("umda/exhaustive.json"), &all)?;
            Some(all.len())
        } else {
            None
        };
        write_json(
            &cache_path,
            &Manifest {
                stage: st.name().into(),
                config_hash: self.cfg.config_hash(),
                stage_hash: self.cfg.stage_hash(st),
                details: evaluator.cache_snapshot(),
            },
        )?;
        self.write_manifest(st, SelectInfo { seeds, exhaustive })
    }

    pub fn load_runs(&self, consumer: Stage) -> Result<Vec<RunResult>> {
        let info: SelectInfo = self.read_manifest(Stage::SelectBands, consumer)?;
        info.seeds
            .iter()
            .map(|s| {
                let p = self.out(&format!("umda/seed_{}.json", s.seed));
                let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                serde_json::from_str(&text).map_err(in_stage(consumer))
            })
            .collect()
    }

    // (g) Frequency ranking over the pooled final populations.
    fn stage_rank_bands(&self) -> Result<()> {
        let st = Stage::RankBands;
        let runs = self.load_runs(st)?;
        let names: Vec<String> = LANDSAT_BANDS.iter().map(|s| s.to_string()).collect();
        let (ranking, pool) =
            rank_bands(&runs, self.cfg.umda.top_k, &names).map_err(in_stage(st))?;
        write_text(
            &self.out("ranking/ranking.txt"),
            &ranking_table(&ranking, &pool),
        )?;
        self.write_manifest(st, RankingInfo { ranking, pool })
    }

    /// Trains on the train split with `channels` and scores validation and test.
    pub fn evaluate_composition(
        &self,
        tables: &SplitTables,
        name: &str,
        channels: &[String],
    ) -> Result<CompositionResult> {
        let st = Stage::Evaluate;
        let idx = channels
            .iter()
            .map(|c| tables.train.channel_index(c))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(in_stage(st))?;
        let score = |eval: &FeatureTable, tag| {
            evaluate_channels(&tables.train, eval, tag, &idx, &self.cfg.svm).map_err(in_stage(st))
        };
        Ok(CompositionResult {
            name: name.into(),
            channels: channels.to_vec(),
            validation: score(&tables.validation, SplitTag::Validation)?,
            test: score(&tables.test, SplitTag::Test)?,
        })
    }

    // Best individual against the configured baseline compositions.
    fn stage_evaluate(&self) -> Result<()> {
        let st = Stage::Evaluate;
        let runs = self.load_runs(st)?;
        let tables = self.load_split_features(st)?;
        let best = overall_best(&runs).ok_or_else(|| PipelineError::Stage {
            stage: st,
            message: "no evaluated individual".into(),
        })?;
        let best_channels: Vec<String> = best
            .selected()
            .iter()
            .map(|&i| LANDSAT_BANDS[i].to_string())
            .collect();
        let mut specs = vec![CompositionSpec {
            name: "Best".into(),
            channels: best_channels,
        }];
        specs.extend(self.cfg.compositions.iter().cloned());
        let results = self.exec.try_map(&specs, |c| {
            self.evaluate_composition(&tables, &c.name, &c.channels)
        })?;
        write_text(
            &self.out("evaluation/compositions.txt"),
            &composition_table(&results),
        )?;
        self.write_manifest(
            st,
            EvaluationInfo {
                best: best.clone(),
                compositions: results,
            },
        )
    }

    fn stage_report(&self) -> Result<Report> {
        let st = Stage::Report;
        let segs: SegmentsInfo = self.read_manifest(Stage::Segments, st)?;
        let sel: SelectInfo = self.read_manifest(Stage::SelectBands, st)?;
        let rank: RankingInfo = self.read_manifest(Stage::RankBands, st)?;
        let eval: EvaluationInfo = self.read_manifest(Stage::Evaluate, st)?;
        let (best, baselines) = eval
            .compositions
            .split_first()
            .expect("evaluation holds the best composition first");
        let comparisons = baselines
            .iter()
            .map(|b| Comparison {
                baseline: b.name.clone(),
                best_test_balanced_accuracy: best.test.balanced_accuracy,
                baseline_test_balanced_accuracy: b.test.balanced_accuracy,
                relative_gain_percent: relative_gain(
                    best.test.balanced_accuracy,
                    b.test.balanced_accuracy,
                ),
            })
            .collect();
        let bands = rank
            .ranking
            .band_names
            .iter()
            .enumerate()
            .map(|(i, name)| BandRow {
                band: name.clone(),
                count: rank.ranking.counts[i],
                frequency: rank.ranking.frequencies[i],
                rank: rank.ranking.ranks[i],
            })
            .collect();
        let report = Report {
            config_hash: self.cfg.config_hash(),
            dataset: segs.splits,
            seeds: sel.seeds,
            pool_size: rank.ranking.pool_size,
            bands,
            best: eval.best,
            compositions: eval.compositions.clone(),
            comparisons,
        };
        write_json(&self.out("report.json"), &report)?;
        write_text(&self.out("report.txt"), &report.to_text())?;
        Ok(report)
    }
}

/// Relative gain in percent of `best` over `base`; `None` when `base` is 0.
pub fn relative_gain(best: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| (best - base) / base * 100.0)
}

/// Best over all runs: fitness desc, then fewer bands, then genome order.
pub fn overall_best(runs: &[RunResult]) -> Option<Genome> {
    runs.iter()
        .filter_map(|r| Some((r.best.fitness?, &r.best.genome)))
        .min_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.count_ones().cmp(&b.1.count_ones()))
                .then(a.1.cmp(b.1))
        })
        .map(|(_, g)| g.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredGenome {
    pub genome: Genome,
    pub fitness: FitnessValue,
}

/// Fitness of every nonempty genome of length `n`, best first.
pub fn exhaustive_search(
    evaluator: &FitnessEvaluator,
    exec: Exec,
    n: usize,
) -> std::result::Result<Vec<ScoredGenome>, crate::svm::SvmError> {
    let genomes = Genome::enumerate_nonempty(n);
    let mut out = exec.try_map(&genomes, |g| {
        evaluator.fitness(g).map(|fitness| ScoredGenome {
            genome: g.clone(),
            fitness,
        })
    })?;
    out.sort_by(|a, b| {
        b.fitness
            .balanced_accuracy
            .total_cmp(&a.fitness.balanced_accuracy)
            .then(a.genome.count_ones().cmp(&b.genome.count_ones()))
            .then(a.genome.cmp(&b.genome))
    });
    Ok(out)
}

pub struct SplitTables {
    pub train: FeatureTable,
    pub validation: FeatureTable,
    pub test: FeatureTable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompositeInfo {
    explained_variance_ratio: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SuperpixelInfo {
    k: usize,
    n_segments: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegionSegments {
    superpixels: usize,
    kept: usize,
    classes: ClassCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: ClassCounts,
    pub validation: ClassCounts,
    pub test: ClassCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SegmentsInfo {
    regions: BTreeMap<u32, RegionSegments>,
    splits: SplitCounts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FeaturesInfo {
    channels: Vec<String>,
    block_len: usize,
    rows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub best: Genome,
    pub fitness: f64,
    /// Distinct genomes evaluated by this run.
    pub evaluations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SelectInfo {
    seeds: Vec<SeedSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exhaustive: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RankingInfo {
    ranking: BandRanking,
    pool: Vec<PooledIndividual>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub name: String,
    pub channels: Vec<String>,
    pub validation: FitnessValue,
    pub test: FitnessValue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvaluationInfo {
    best: Genome,
    compositions: Vec<CompositionResult>,
}

fn composition_table(results: &[CompositionResult]) -> String {
    let mut rows = vec![vec![
        "Composition".to_string(),
        "Channels".into(),
        "Val BA".into(),
        "Test BA".into(),
        "Test R(forest)".into(),
        "Test R(non-forest)".into(),
    ]];
    for r in results {
        rows.push(vec![
            r.name.clone(),
            r.channels.join(","),
            format!("{:.4}", r.validation.balanced_accuracy),
            format!("{:.4}", r.test.balanced_accuracy),
            format!("{:.4}", r.test.recall_forest),
            format!("{:.4}", r.test.recall_non_forest),
        ]);
    }
    text_table(&rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRow {
    pub band: String,
    pub count: usize,
    pub frequency: f64,
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub best_test_balanced_accuracy: f64,
    pub baseline_test_balanced_accuracy: f64,
    pub relative_gain_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub dataset: SplitCounts,
    pub seeds: Vec<SeedSummary>,
    pub pool_size: usize,
    pub bands: Vec<BandRow>,
    pub best: Genome,
    pub compositions: Vec<CompositionResult>,
    pub comparisons: Vec<Comparison>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let mut s = format!("config {}\n\n", self.config_hash);
        let d = &self.dataset;
        let mut rows = vec![vec![
            "Split".to_string(),
            "Forest".into(),
            "Non-forest".into(),
        ]];
        for (name, c) in [
            ("train", d.train),
            ("validation", d.validation),
            ("test", d.test),
        ] {
            rows.push(vec![
                name.into(),
                c.forest.to_string(),
                c.non_forest.to_string(),
            ]);
        }
        s.push_str(&text_table(&rows));
        s.push('\n');
        let mut rows = vec![vec![
            "Seed".to_string(),
            "Best".into(),
            "Val BA".into(),
            "Evaluations".into(),
        ]];
        for r in &self.seeds {
            rows.push(vec![
                r.seed.to_string(),
                r.best.to_string(),
                format!("{:.4}", r.fitness),
                r.evaluations.to_string(),
            ]);
        }
        s.push_str(&text_table(&rows));
        s.push('\n');
        let mut rows = vec![vec![
            "Band".to_string(),
            "Count".into(),
            "Frequency".into(),
            "Rank".into(),
        ]];
        for b in &self.bands {
            rows.push(vec![
                b.band.clone(),
                format!("{}/{}", b.count, self.pool_size),
                format!("{:.1}%", 100.0 * b.frequency),
                b.rank.map_or("-".into(), |r| r.to_string()),
            ]);
        }
        s.push_str(&text_table(&rows));
        s.push('\n');
        s.push_str(&composition_table(&self.compositions));
        s.push('\n');
        let mut rows = vec![vec!["Best vs".to_string(), "Gain %".into()]];
        for c in &self.comparisons {
            rows.push(vec![
                c.baseline.clone(),
                c.relative_gain_percent
                    .map_or("undef".into(), |g| format!("{g:+.2}")),
            ]);
        }
        s.push_str(&text_table(&rows));
        s
    }
}

/// Runs every stage in order, skipping stages whose artifacts are current.
pub fn run_pipeline(ctx: &Context) -> Result<Report> {
    let region = ctx.regions()[0];
    let probe = region_dir(&ctx.cfg.corpus, region).join("raster");
    if !probe.exists() {
        return Err(PipelineError::MissingInput {
            stage: Stage::Composite,
            path: probe,
        });
    }
    for stage in &Stage::ALL[..Stage::ALL.len() - 1] {
        if ctx.is_fresh(*stage) {
            info!("stage {stage}: up to date");
        } else {
            ctx.run_stage(*stage)?;
        }
    }
    ctx.stage_report()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub name: String,
    pub counts: ConfusionCounts,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskScores {
    pub images: Vec<ImageScore>,
    /// Metrics over the summed counts.
    pub total: ImageScore,
    /// Per-image metrics averaged where defined.
    pub macro_mean: MetricSummary,
}

impl MaskScores {
    pub fn to_text(&self) -> String {
        let mut rows = vec![vec![
            "Image".to_string(),
            "TP".into(),
            "FP".into(),
            "TN".into(),
            "FN".into(),
            "Precision".into(),
            "Recall".into(),
            "F1".into(),
            "Accuracy".into(),
            "IoU".into(),
        ]];
        let row = |s: &ImageScore| {
            let m = &s.metrics;
            vec![
                s.name.clone(),
                s.counts.tp.to_string(),
                s.counts.fp.to_string(),
                s.counts.tn.to_string(),
                s.counts.fn_.to_string(),
                fmt_opt(m.precision),
                fmt_opt(m.recall),
                fmt_opt(m.f1),
                fmt_opt(m.accuracy),
                fmt_opt(m.iou),
            ]
        };
        rows.extend(self.images.iter().map(row));
        rows.push(row(&self.total));
        let m = &self.macro_mean;
        rows.push(vec![
            "macro mean".into(),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            fmt_opt(m.precision),
            fmt_opt(m.recall),
            fmt_opt(m.f1),
            fmt_opt(m.accuracy),
            fmt_opt(m.iou),
        ]);
        text_table(&rows)
    }
}

fn pgm_names(dir: &Path) -> Result<Vec<String>> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .filter(|n| n.ends_with(".pgm"))
        .collect();
    v.sort();
    Ok(v)
}

/// Scores every `*.pgm` prediction against the same-named truth mask and
/// writes `scores.json`, `scores.txt` and `errors/<name>.ppm` under `out`.
pub fn score_masks(pred_dir: &Path, truth_dir: &Path, out: &Path) -> Result<MaskScores> {
    let preds = pgm_names(pred_dir)?;
    let truths = pgm_names(truth_dir)?;
    let unpaired: Vec<&String> = preds
        .iter()
        .filter(|n| !truths.contains(n))
        .chain(truths.iter().filter(|n| !preds.contains(n)))
        .collect();
    if !unpaired.is_empty() {
        let names: Vec<&str> = unpaired.iter().map(|s| s.as_str()).collect();
        return Err(PipelineError::Unpaired(names.join(", ")));
    }
    let mut images = Vec::with_capacity(preds.len());
    let mut total = ConfusionCounts::default();
    for name in &preds {
        let mask_err = |e: &dyn fmt::Display| PipelineError::Mask {
            name: name.clone(),
            message: e.to_string(),
        };
        let p = LabelMask::load_pgm(pred_dir.join(name)).map_err(|e| mask_err(&e))?;
        let t = LabelMask::load_pgm(truth_dir.join(name)).map_err(|e| mask_err(&e))?;
        let counts = confusion(&p, &t).map_err(|e| mask_err(&e))?;
        let rgb = error_visualization(&p, &t).map_err(|e| mask_err(&e))?;
        let stem = name.trim_end_matches(".pgm");
        write_ppm(
            &out.join("errors").join(format!("{stem}.ppm")),
            p.width(),
            p.height(),
            &rgb,
        )
        .map_err(|e| mask_err(&e))?;
        total = total.merge(&counts);
        images.push(ImageScore {
            name: name.clone(),
            counts,
            metrics: counts.summary(),
        });
    }
    let macro_mean =
        MetricSummary::macro_mean(&images.iter().map(|i| i.metrics.clone()).collect::<Vec<_>>());
    let scores = MaskScores {
        images,
        total: ImageScore {
            name: "total".into(),
            counts: total,
            metrics: total.summary(),
        },
        macro_mean,
    };
    write_json(&out.join("scores.json"), &scores)?;
    write_text(&out.join("scores.txt"), &scores.to_text())?;
    Ok(scores)
}
