//! Univariate Marginal Distribution Algorithm over band-inclusion bit strings,
//! plus multi-seed pooling and frequency-based band ranking.
//!
//! Each generation evaluates the population, keeps the best μ individuals as
//! parents, re-estimates the marginals from them, and samples λ − μ children.
//! The next population is the union of parents and children, so the best
//! fitness seen never decreases.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::exec::Exec;

#[derive(Debug, Error)]
pub enum UmdaError {
    #[error("empty parent set")]
    NoParents,
    #[error("genome lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("individual {0} has not been evaluated")]
    Unevaluated(String),
    #[error("invalid UMDA config: {0}")]
    Config(String),
    #[error("generation {generation}: fitness oracle failed on {genome}: {message}")]
    Oracle {
        generation: usize,
        genome: String,
        message: String,
    },
    #[error("empty individual pool")]
    EmptyPool,
    #[error("invalid genome string {0:?}")]
    Parse(String),
}

/// Bit string; gene `i` set means band `i` is included.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Genome(Vec<bool>);

impl Genome {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn from_indices(n: usize, idx: &[usize]) -> Self {
        let mut bits = vec![false; n];
        for &i in idx {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    /// Indices of set genes, ascending.
    pub fn selected(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// Every non-empty genome of length `n`, in increasing binary order.
    pub fn enumerate_nonempty(n: usize) -> Vec<Genome> {
        (1u64..(1 << n))
            .map(|m| Genome((0..n).map(|i| m >> (n - 1 - i) & 1 == 1).collect()))
            .collect()
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

impl FromStr for Genome {
    type Err = UmdaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(UmdaError::Parse(s.into())),
            })
            .collect::<Result<_, _>>()
            .map(Genome)
    }
}

impl Serialize for Genome {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Genome {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub genome: Genome,
    pub fitness: Option<f64>,
}

impl Individual {
    pub fn new(genome: Genome) -> Self {
        Self {
            genome,
            fitness: None,
        }
    }
}

/// Independent Bernoulli marginals, optionally clamped to [1/n, 1 − 1/n].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub p: Vec<f64>,
    pub margins: bool,
}

impl MarginalModel {
    pub fn uniform(n: usize, margins: bool) -> Self {
        Self {
            p: vec![0.5; n],
            margins,
        }
    }

    pub fn bounds(&self) -> (f64, f64) {
        let n = self.p.len() as f64;
        (1.0 / n, 1.0 - 1.0 / n)
    }

    /// Pr(x | p) = ∏ p(i)^x_i (1 − p(i))^(1 − x_i).
    pub fn probability(&self, x: &Genome) -> f64 {
        self.p
            .iter()
            .zip(x.bits())
            .map(|(&p, &b)| if b { p } else { 1.0 - p })
            .product()
    }
}

/// Draws each gene independently with probability `p(i)` of being set.
pub fn sample<R: Rng + ?Sized>(model: &MarginalModel, rng: &mut R) -> Genome {
    Genome(model.p.iter().map(|&p| rng.random::<f64>() < p).collect())
}

const RESAMPLE_LIMIT: usize = 100;

/// Samples until a genome with at least one set gene appears; after
/// [`RESAMPLE_LIMIT`] failures one uniformly chosen gene is forced on.
pub fn sample_nonempty<R: Rng + ?Sized>(model: &MarginalModel, rng: &mut R) -> Genome {
    for _ in 0..RESAMPLE_LIMIT {
        let g = sample(model, rng);
        if g.count_ones() > 0 {
            return g;
        }
    }
    let mut g = Genome(vec![false; model.p.len()]);
    let i = rng.random_range(0..model.p.len());
    g.0[i] = true;
    g
}

/// p(i) = share of parents with gene i set, clamped when margins are on.
pub fn update_marginals(parents: &[Individual], margins: bool) -> Result<MarginalModel, UmdaError> {
    let first = parents.first().ok_or(UmdaError::NoParents)?;
    let n = first.genome.len();
    let mut counts = vec![0usize; n];
    for ind in parents {
        if ind.genome.len() != n {
            return Err(UmdaError::LengthMismatch(n, ind.genome.len()));
        }
        for (c, &b) in counts.iter_mut().zip(ind.genome.bits()) {
            *c += b as usize;
        }
    }
    let mut model = MarginalModel {
        p: counts
            .into_iter()
            .map(|c| c as f64 / parents.len() as f64)
            .collect(),
        margins,
    };
    if margins {
        let (lo, hi) = model.bounds();
        model.p.iter_mut().for_each(|p| *p = p.clamp(lo, hi));
    }
    Ok(model)
}

/// Best-first order: fitness descending, then fewer set genes, then genome.
fn rank_order(a: &Individual, b: &Individual) -> std::cmp::Ordering {
    let fa = a.fitness.unwrap_or(f64::NEG_INFINITY);
    let fb = b.fitness.unwrap_or(f64::NEG_INFINITY);
    fb.total_cmp(&fa)
        .then(a.genome.count_ones().cmp(&b.genome.count_ones()))
        .then(a.genome.cmp(&b.genome))
}

pub fn select_parents(population: &[Individual], mu: usize) -> Result<Vec<Individual>, UmdaError> {
    if let Some(ind) = population.iter().find(|i| i.fitness.is_none()) {
        return Err(UmdaError::Unevaluated(ind.genome.to_string()));
    }
    if mu == 0 || mu > population.len() {
        return Err(UmdaError::Config(format!(
            "cannot select {mu} parents from {}",
            population.len()
        )));
    }
    let mut sorted = population.to_vec();
    sorted.sort_by(rank_order);
    sorted.truncate(mu);
    Ok(sorted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UmdaConfig {
    pub genome_len: usize,
    /// λ
    pub population: usize,
    /// μ
    pub parents: usize,
    pub generations: usize,
    pub margins: bool,
    pub seed: u64,
}

impl Default for UmdaConfig {
    fn default() -> Self {
        Self {
            genome_len: 7,
            population: 10,
            parents: 5,
            generations: 10,
            margins: false,
            seed: 1,
        }
    }
}

impl UmdaConfig {
    pub fn offspring(&self) -> usize {
        self.population - self.parents
    }

    pub fn validate(&self) -> Result<(), UmdaError> {
        if self.genome_len == 0 {
            return Err(UmdaError::Config("genome_len must be >= 1".into()));
        }
        if self.parents == 0 || self.parents > self.population {
            return Err(UmdaError::Config("need 1 <= parents <= population".into()));
        }
        if self.generations == 0 {
            return Err(UmdaError::Config("generations must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub population: Vec<Individual>,
    /// Marginals re-estimated from this generation's parents.
    pub marginals: Vec<f64>,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub fresh_evaluations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub generations: Vec<GenerationRecord>,
    pub best: Individual,
    pub evaluations: usize,
}

impl RunResult {
    pub fn final_population(&self) -> &[Individual] {
        &self
            .generations
            .last()
            .expect("at least one generation")
            .population
    }

    pub fn best_trace(&self) -> Vec<f64> {
        self.generations.iter().map(|g| g.best_fitness).collect()
    }
}

/// Runs UMDA against `oracle`. Each distinct genome is evaluated at most once
/// per run; evaluations inside a generation go through `exec`.
pub fn run<F, E>(cfg: &UmdaConfig, exec: Exec, oracle: F) -> Result<RunResult, UmdaError>
where
    F: Fn(&Genome) -> Result<f64, E> + Sync + Send,
    E: fmt::Display + Send,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p0 = MarginalModel::uniform(cfg.genome_len, cfg.margins);
    let mut population: Vec<Individual> = (0..cfg.population)
        .map(|_| Individual::new(sample_nonempty(&p0, &mut rng)))
        .collect();
    let mut seen: HashMap<Genome, f64> = HashMap::new();
    let mut records = Vec::with_capacity(cfg.generations);
    let mut evaluations = 0;
    for generation in 0..cfg.generations {
        let mut fresh: Vec<Genome> = Vec::new();
        for ind in &population {
            if ind.fitness.is_none()
                && !seen.contains_key(&ind.genome)
                && !fresh.contains(&ind.genome)
            {
                fresh.push(ind.genome.clone());
            }
        }
        let scores = exec.map(&fresh, |g| oracle(g).map_err(|e| e.to_string()));
        for (g, s) in fresh.iter().zip(scores) {
            let v = s.map_err(|message| UmdaError::Oracle {
                generation,
                genome: g.to_string(),
                message,
            })?;
            seen.insert(g.clone(), v);
        }
        evaluations += fresh.len();
        for ind in &mut population {
            if ind.fitness.is_none() {
                ind.fitness = Some(seen[&ind.genome]);
            }
        }
        let parents = select_parents(&population, cfg.parents)?;
        let model = update_marginals(&parents, cfg.margins)?;
        let fits: Vec<f64> = population.iter().map(|i| i.fitness.unwrap()).collect();
        records.push(GenerationRecord {
            generation,
            population: population.clone(),
            marginals: model.p.clone(),
            best_fitness: fits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_fitness: fits.iter().sum::<f64>() / fits.len() as f64,
            fresh_evaluations: fresh.len(),
        });
        if generation + 1 == cfg.generations {
            break;
        }
        let children =
            (0..cfg.offspring()).map(|_| Individual::new(sample_nonempty(&model, &mut rng)));
        population = parents.into_iter().chain(children).collect();
    }
    let best = records
        .iter()
        .flat_map(|r| r.population.iter())
        .min_by(|a, b| rank_order(a, b))
        .cloned()
        .expect("non-empty population");
    Ok(RunResult {
        seed: cfg.seed,
        generations: records,
        best,
        evaluations,
    })
}

/// An individual drawn from one seed's final population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledIndividual {
    pub seed: u64,
    pub genome: Genome,
    pub fitness: f64,
}

/// Distinct final-population genomes of every run, best first; keeps the
/// top `top_k` plus anything tied with the `top_k`-th fitness.
pub fn pool_top(results: &[RunResult], top_k: usize) -> Result<Vec<PooledIndividual>, UmdaError> {
    let mut pool = Vec::new();
    for (run_idx, r) in results.iter().enumerate() {
        let mut distinct: BTreeMap<Genome, f64> = BTreeMap::new();
        for ind in r.final_population() {
            let f = ind
                .fitness
                .ok_or_else(|| UmdaError::Unevaluated(ind.genome.to_string()))?;
            distinct.insert(ind.genome.clone(), f);
        }
        for (genome, fitness) in distinct {
            pool.push((
                run_idx,
                PooledIndividual {
                    seed: r.seed,
                    genome,
                    fitness,
                },
            ));
        }
    }
    if pool.is_empty() || top_k == 0 {
        return Err(UmdaError::EmptyPool);
    }
    pool.sort_by(|(ra, a), (rb, b)| {
        b.fitness
            .total_cmp(&a.fitness)
            .then(a.genome.count_ones().cmp(&b.genome.count_ones()))
            .then(a.genome.cmp(&b.genome))
            .then(ra.cmp(rb))
    });
    let cut = top_k.min(pool.len());
    let threshold = pool[cut - 1].1.fitness;
    Ok(pool
        .into_iter()
        .enumerate()
        .take_while(|(i, (_, p))| *i < cut || p.fitness >= threshold)
        .map(|(_, (_, p))| p)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandRanking {
    pub band_names: Vec<String>,
    pub counts: Vec<usize>,
    pub pool_size: usize,
    pub frequencies: Vec<f64>,
    /// Competition rank (ties share the better rank); `None` for bands never selected.
    pub ranks: Vec<Option<usize>>,
}

/// Relative frequency of each band over `pool` and its descending-frequency rank.
pub fn band_frequencies(pool: &[Genome], band_names: &[String]) -> Result<BandRanking, UmdaError> {
    let n = band_names.len();
    if pool.is_empty() {
        return Err(UmdaError::EmptyPool);
    }
    let mut counts = vec![0usize; n];
    for g in pool {
        if g.len() != n {
            return Err(UmdaError::LengthMismatch(n, g.len()));
        }
        for (c, &b) in counts.iter_mut().zip(g.bits()) {
            *c += b as usize;
        }
    }
    let frequencies = counts
        .iter()
        .map(|&c| c as f64 / pool.len() as f64)
        .collect();
    let ranks = counts
        .iter()
        .map(|&c| (c > 0).then(|| 1 + counts.iter().filter(|&&o| o > c).count()))
        .collect();
    Ok(BandRanking {
        band_names: band_names.to_vec(),
        counts,
        pool_size: pool.len(),
        frequencies,
        ranks,
    })
}

/// Pools the runs' final populations and ranks bands by frequency.
pub fn rank_bands(
    results: &[RunResult],
    top_k: usize,
    band_names: &[String],
) -> Result<(BandRanking, Vec<PooledIndividual>), UmdaError> {
    let pool = pool_top(results, top_k)?;
    let genomes: Vec<Genome> = pool.iter().map(|p| p.genome.clone()).collect();
    Ok((band_frequencies(&genomes, band_names)?, pool))
}

fn ordinal(r: usize) -> String {
    let suffix = match (r % 10, r % 100) {
        (1, x) if x != 11 => "st",
        (2, x) if x != 12 => "nd",
        (3, x) if x != 13 => "rd",
        _ => "th",
    };
    format!("{r}{suffix}")
}

/// Plain-text table: one row per pooled individual with `x` marking
/// included bands, followed by frequency and ranking rows.
pub fn ranking_table(ranking: &BandRanking, pool: &[PooledIndividual]) -> String {
    let mut header = vec!["Seed".to_string(), "#".to_string()];
    header.extend(ranking.band_names.iter().cloned());
    header.push("Balanced".into());
    let mut rows = vec![header];
    for (i, p) in pool.iter().enumerate() {
        let mut row = vec![p.seed.to_string(), (i + 1).to_string()];
        row.extend(
            p.genome
                .bits()
                .iter()
                .map(|&b| if b { "x".to_string() } else { String::new() }),
        );
        row.push(format!("{:.2}", 100.0 * p.fitness));
        rows.push(row);
    }
    let mut freq = vec!["Frequency".to_string(), "-".to_string()];
    freq.extend(
        ranking
            .frequencies
            .iter()
            .map(|f| format!("{:.1}%", 100.0 * f)),
    );
    freq.push("-".into());
    let mut rank = vec!["Ranking".to_string(), "-".to_string()];
    rank.extend(
        ranking
            .ranks
            .iter()
            .map(|r| r.map_or_else(|| "-".to_string(), ordinal)),
    );
    rank.push("-".into());
    rows.push(freq);
    rows.push(rank);
    let ncol = rows[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        if i == 1 || i == rows.len() - 2 {
            let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
            out.push_str(&rule.join("-+-"));
            out.push('\n');
        }
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        out.push_str(cells.join(" | ").trim_end());
        out.push('\n');
    }
    out
}
