//! Linear SVM trained by subgradient descent on the class-weighted hinge
//! loss, and the balanced-accuracy fitness used to score band subsets.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segset::{Label, SplitTag};
use crate::texture::{FeatureTable, TextureError};
use crate::umda::Genome;

#[derive(Debug, Error)]
pub enum SvmError {
    #[error("training data holds a single class")]
    SingleClass,
    #[error("no training rows")]
    Empty,
    #[error("dimension mismatch: model has {expected} weights, row has {found}")]
    Dimension { expected: usize, found: usize },
    #[error("length mismatch: {0} labels vs {1} predictions")]
    Length(usize, usize),
    #[error("genome length {genome} exceeds {channels} band channels")]
    GenomeLength { genome: usize, channels: usize },
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Per-feature z-scoring fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self, SvmError> {
        let first = rows.first().ok_or(SvmError::Empty)?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for k in 0..d {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Weight class c by n / (2 n_c); otherwise every example weighs 1.
    pub class_weighted: bool,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 30,
            seed: 42,
            class_weighted: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Weights for (forest, non-forest).
    pub class_weights: [f64; 2],
    pub config: SvmConfig,
    /// Regularized objective before training, then after each epoch.
    pub loss_trace: Vec<f64>,
}

fn sign(l: Label) -> f64 {
    if l.is_positive() {
        1.0
    } else {
        -1.0
    }
}

fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

fn objective(w: &[f64], b: f64, x: &[Vec<f64>], y: &[Label], cw: &[f64; 2], lambda: f64) -> f64 {
    let reg = 0.5 * lambda * (dot(w, w) + b * b);
    let hinge: f64 = x
        .iter()
        .zip(y)
        .map(|(xi, &yi)| {
            let c = cw[yi.is_positive() as usize];
            c * (1.0 - sign(yi) * (dot(w, xi) + b)).max(0.0)
        })
        .sum();
    reg + hinge / x.len() as f64
}

/// Stochastic subgradient descent with step 1/(λt). The bias is carried as
/// an extra regularized coordinate on a constant-1 feature.
pub fn train(x: &[Vec<f64>], y: &[Label], cfg: &SvmConfig) -> Result<SvmModel, SvmError> {
    if x.is_empty() {
        return Err(SvmError::Empty);
    }
    if x.len() != y.len() {
        return Err(SvmError::Length(y.len(), x.len()));
    }
    let d = x[0].len();
    if let Some(r) = x.iter().find(|r| r.len() != d) {
        return Err(SvmError::Dimension {
            expected: d,
            found: r.len(),
        });
    }
    let n = x.len();
    let n_pos = y.iter().filter(|l| l.is_positive()).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SvmError::SingleClass);
    }
    let class_weights = if cfg.class_weighted {
        [
            n as f64 / (2.0 * n_neg as f64),
            n as f64 / (2.0 * n_pos as f64),
        ]
    } else {
        [1.0, 1.0]
    };
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut trace = vec![objective(&w, b, x, y, &class_weights, cfg.lambda)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut t = 0u64;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (cfg.lambda * t as f64);
            let yi = sign(y[i]);
            let margin = yi * (dot(&w, &x[i]) + b);
            let shrink = 1.0 - 1.0 / t as f64;
            w.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
            if margin < 1.0 {
                let step = eta * class_weights[y[i].is_positive() as usize] * yi;
                for (wk, xk) in w.iter_mut().zip(&x[i]) {
                    *wk += step * xk;
                }
                b += step;
            }
        }
        trace.push(objective(&w, b, x, y, &class_weights, cfg.lambda));
    }
    Ok(SvmModel {
        weights: w,
        bias: b,
        class_weights,
        config: *cfg,
        loss_trace: trace,
    })
}

impl SvmModel {
    pub fn decision(&self, x: &[f64]) -> Result<f64, SvmError> {
        if x.len() != self.weights.len() {
            return Err(SvmError::Dimension {
                expected: self.weights.len(),
                found: x.len(),
            });
        }
        Ok(dot(&self.weights, x) + self.bias)
    }
}

/// sign(w·x + b); an exact zero is non-forest.
pub fn predict(model: &SvmModel, x: &[Vec<f64>]) -> Result<Vec<Label>, SvmError> {
    x.iter()
        .map(|r| {
            model.decision(r).map(|s| {
                if s >= 0.0 {
                    Label::NonForest
                } else {
                    Label::Forest
                }
            })
        })
        .collect()
}

/// Recalls of (forest, non-forest).
pub fn class_recalls(y_true: &[Label], y_pred: &[Label]) -> Result<[f64; 2], SvmError> {
    if y_true.len() != y_pred.len() {
        return Err(SvmError::Length(y_true.len(), y_pred.len()));
    }
    let mut hit = [0usize; 2];
    let mut tot = [0usize; 2];
    for (t, p) in y_true.iter().zip(y_pred) {
        let k = t.is_positive() as usize;
        tot[k] += 1;
        hit[k] += (t == p) as usize;
    }
    if tot[0] == 0 || tot[1] == 0 {
        return Err(SvmError::SingleClass);
    }
    Ok([hit[0] as f64 / tot[0] as f64, hit[1] as f64 / tot[1] as f64])
}

pub fn balanced_accuracy(y_true: &[Label], y_pred: &[Label]) -> Result<f64, SvmError> {
    let [rf, rn] = class_recalls(y_true, y_pred)?;
    Ok((rf + rn) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue {
    pub balanced_accuracy: f64,
    pub recall_forest: f64,
    pub recall_non_forest: f64,
    pub split: SplitTag,
    /// Set when the genome selects no band; the score is then 0.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_genome: bool,
}

/// Standardizer plus model, persisted together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub standardizer: Standardizer,
    #[serde(flatten)]
    pub model: SvmModel,
}

impl Classifier {
    pub fn fit(x: &[Vec<f64>], y: &[Label], cfg: &SvmConfig) -> Result<Self, SvmError> {
        let standardizer = Standardizer::fit(x)?;
        let model = train(&standardizer.transform(x), y, cfg)?;
        Ok(Self {
            standardizer,
            model,
        })
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<Label>, SvmError> {
        predict(&self.model, &self.standardizer.transform(x))
    }

    pub fn save(&self, path: &Path) -> Result<(), SvmError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SvmError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Trains on `train` with the given channel blocks and scores `eval`.
pub fn evaluate_channels(
    train: &FeatureTable,
    eval: &FeatureTable,
    eval_split: SplitTag,
    channels: &[usize],
    cfg: &SvmConfig,
) -> Result<FitnessValue, SvmError> {
    let clf = Classifier::fit(&train.design_matrix(channels), &train.labels(), cfg)?;
    let pred = clf.predict(&eval.design_matrix(channels))?;
    let [rf, rn] = class_recalls(&eval.labels(), &pred)?;
    Ok(FitnessValue {
        balanced_accuracy: (rf + rn) / 2.0,
        recall_forest: rf,
        recall_non_forest: rn,
        split: eval_split,
        empty_genome: false,
    })
}

/// Memoized genome fitness over fixed train/eval feature tables. Gene `i`
/// selects channel `i` of the tables (B1..B7 first).
pub struct FitnessEvaluator {
    train: FeatureTable,
    eval: FeatureTable,
    eval_split: SplitTag,
    cfg: SvmConfig,
    cache: Mutex<BTreeMap<String, FitnessValue>>,
    trainings: AtomicUsize,
}

impl FitnessEvaluator {
    pub fn new(
        train: FeatureTable,
        eval: FeatureTable,
        eval_split: SplitTag,
        cfg: SvmConfig,
    ) -> Self {
        Self {
            train,
            eval,
            eval_split,
            cfg,
            cache: Mutex::new(BTreeMap::new()),
            trainings: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &SvmConfig {
        &self.cfg
    }

    pub fn fitness(&self, genome: &Genome) -> Result<FitnessValue, SvmError> {
        if genome.len() > self.train.channels.len() {
            return Err(SvmError::GenomeLength {
                genome: genome.len(),
                channels: self.train.channels.len(),
            });
        }
        if genome.count_ones() == 0 {
            return Ok(FitnessValue {
                balanced_accuracy: 0.0,
                recall_forest: 0.0,
                recall_non_forest: 0.0,
                split: self.eval_split,
                empty_genome: true,
            });
        }
        let key = genome.to_string();
        if let Some(v) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let v = evaluate_channels(
            &self.train,
            &self.eval,
            self.eval_split,
            &genome.selected(),
            &self.cfg,
        )?;
        self.trainings.fetch_add(1, Ordering::Relaxed);
        self.cache.lock().expect("cache lock").insert(key, v);
        Ok(v)
    }

    /// Number of SVM trainings performed (cache misses).
    pub fn trainings(&self) -> usize {
        self.trainings.load(Ordering::Relaxed)
    }

    pub fn cache_snapshot(&self) -> BTreeMap<String, FitnessValue> {
        self.cache.lock().expect("cache lock").clone()
    }

    pub fn preload(&self, entries: BTreeMap<String, FitnessValue>) {
        self.cache.lock().expect("cache lock").extend(entries);
    }

    pub fn save_cache(&self, path: &Path) -> Result<(), SvmError> {
        fs::write(path, serde_json::to_string_pretty(&self.cache_snapshot())?)?;
        Ok(())
    }

    pub fn load_cache(path: &Path) -> Result<BTreeMap<String, FitnessValue>, SvmError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}
