use bandsel::umda::{
    self, band_frequencies, pool_top, sample, update_marginals, Genome, Individual, MarginalModel,
    UmdaConfig,
};
use bandsel::Exec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn per_gene_rates_within_three_sigma() {
    let p = vec![0.9, 0.1, 0.5, 0.25, 0.75, 0.0, 1.0];
    let model = MarginalModel {
        p: p.clone(),
        margins: false,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let n = 20_000;
    let mut ones = vec![0usize; p.len()];
    for _ in 0..n {
        for (c, &b) in ones.iter_mut().zip(sample(&model, &mut rng).bits()) {
            *c += b as usize;
        }
    }
    for (i, &pi) in p.iter().enumerate() {
        let rate = ones[i] as f64 / n as f64;
        let sigma = (pi * (1.0 - pi) / n as f64).sqrt();
        assert!(
            (rate - pi).abs() <= 3.0 * sigma + 1e-12,
            "gene {i}: {rate} vs {pi}"
        );
    }
}

#[test]
fn update_counts_parent_shares() {
    let parents: Vec<Individual> = ["1100", "1010", "1001", "1111"]
        .iter()
        .map(|s| Individual {
            genome: s.parse().unwrap(),
            fitness: Some(1.0),
        })
        .collect();
    let m = update_marginals(&parents, false).unwrap();
    assert_eq!(m.p, vec![1.0, 0.5, 0.5, 0.5]);
    let m = update_marginals(&parents, true).unwrap();
    assert_eq!(m.p, vec![0.75, 0.5, 0.5, 0.5]);
}

fn mixed_fitness(g: &Genome) -> Result<f64, String> {
    let b = g.bits();
    Ok(b.iter()
        .enumerate()
        .map(|(i, &x)| if x { (i as f64 * 1.7).sin() } else { 0.0 })
        .sum())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn runs_respect_invariants(
        n in 2usize..10,
        lambda in 2usize..16,
        mu_frac in 0.1f64..1.0,
        gens in 1usize..12,
        margins in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mu = ((lambda as f64 * mu_frac).ceil() as usize).clamp(1, lambda);
        let cfg = UmdaConfig { genome_len: n, population: lambda, parents: mu, generations: gens, margins, seed };
        let r = umda::run(&cfg, Exec::Sequential, mixed_fitness).unwrap();
        let bound = (lambda + (gens - 1) * (lambda - mu)).min((1 << n) - 1);
        prop_assert!(r.evaluations <= bound, "{} > {}", r.evaluations, bound);
        prop_assert_eq!(r.evaluations, r.generations.iter().map(|g| g.fresh_evaluations).sum::<usize>());
        prop_assert_eq!(r.generations.len(), gens);
        let trace = r.best_trace();
        prop_assert!(trace.windows(2).all(|w| w[1] >= w[0]));
        prop_assert_eq!(r.best.fitness, Some(*trace.last().unwrap()));
        for g in &r.generations {
            prop_assert_eq!(g.population.len(), lambda);
            prop_assert!(g.population.iter().all(|i| i.genome.count_ones() > 0));
            if margins {
                let (lo, hi) = (1.0 / n as f64, 1.0 - 1.0 / n as f64);
                prop_assert!(g.marginals.iter().all(|&p| p >= lo - 1e-12 && p <= hi + 1e-12));
            }
        }
        let par = umda::run(&cfg, Exec::Parallel, mixed_fitness).unwrap();
        prop_assert_eq!(par, r);
    }
}

#[test]
fn constant_fitness_gives_flat_trace() {
    let cfg = UmdaConfig {
        genome_len: 7,
        population: 10,
        parents: 5,
        generations: 10,
        margins: false,
        seed: 3,
    };
    let r = umda::run(&cfg, Exec::Sequential, |_g: &Genome| Ok::<_, String>(0.5)).unwrap();
    assert!(r.best_trace().iter().all(|&b| b == 0.5));
    assert!(r.generations.iter().all(|g| g.mean_fitness == 0.5));
}

#[test]
fn oracle_errors_carry_generation_and_genome() {
    let cfg = UmdaConfig::default();
    let err = umda::run(&cfg, Exec::Sequential, |_g: &Genome| Err::<f64, _>("boom")).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("boom"), "{msg}");
}

#[test]
fn pooling_keeps_ties_at_the_cut() {
    let run = |seed, fits: &[(&str, f64)]| {
        let pop: Vec<Individual> = fits
            .iter()
            .map(|(g, f)| Individual {
                genome: g.parse().unwrap(),
                fitness: Some(*f),
            })
            .collect();
        umda::RunResult {
            seed,
            generations: vec![umda::GenerationRecord {
                generation: 0,
                population: pop.clone(),
                marginals: vec![0.5; 3],
                best_fitness: 0.0,
                mean_fitness: 0.0,
                fresh_evaluations: pop.len(),
            }],
            best: pop[0].clone(),
            evaluations: pop.len(),
        }
    };
    let runs = [
        run(1, &[("100", 0.9), ("100", 0.9), ("110", 0.8)]),
        run(2, &[("011", 0.8), ("001", 0.7)]),
    ];
    let pool = pool_top(&runs, 2).unwrap();
    // Duplicates within a run collapse; the 0.8 tie at the cut keeps both.
    assert_eq!(pool.len(), 3);
    assert_eq!(pool[0].genome, "100".parse().unwrap());
    let genomes: Vec<Genome> = pool.iter().map(|p| p.genome.clone()).collect();
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = band_frequencies(&genomes, &names).unwrap();
    assert_eq!(r.counts, vec![2, 2, 1]);
    assert_eq!(r.ranks, vec![Some(1), Some(1), Some(3)]);
}
