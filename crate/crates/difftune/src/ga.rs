//! The metaheuristic search loop: population management, tournament
//! selection, uniform-exchange crossover, mutation, elitism, and
//! termination, driving a fitness function toward maximal binary
//! difference.
//!
//! All randomness flows from the single 64-bit seed through a
//! counter-based generator (ChaCha). Fitness evaluation draws no
//! randomness, so evaluations of distinct chromosomes may run in
//! parallel without affecting the draw sequence, and the generator's
//! word position checkpointed at each generation boundary is enough to
//! resume a session bit-identically.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fitness::EvalStatus;
use crate::flagspace::{random_chromosome, repair, Chromosome, ConstraintSet, FlagSpace, FlagspaceError};
use crate::store::{IterationRecord, ResumeState, Store, StoreError};

#[derive(Debug, Error)]
pub enum GaError {
    #[error("invalid GA configuration: {0}")]
    Config(String),
    #[error("structural error: {0}")]
    Structural(String),
    #[error(transparent)]
    Flagspace(#[from] FlagspaceError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("fitness evaluation aborted (partial results persisted): {0}")]
    Abort(String),
}

/// The four tuned search parameters plus population bookkeeping and the
/// session seed.
#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population_size: usize,
    /// Per-gene flip probability.
    pub mutation_rate: f64,
    /// Probability that a mating pair undergoes crossover at all.
    pub crossover_rate: f64,
    /// Minimum number of genes flipped when an individual mutates.
    pub must_mutate_count: usize,
    /// Per-position exchange probability once crossover fires.
    pub crossover_strength: f64,
    pub elite_count: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            mutation_rate: 0.05,
            crossover_rate: 0.8,
            must_mutate_count: 1,
            crossover_strength: 0.5,
            elite_count: 1,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(GaError::Config(format!("{name} = {v} is not a probability")))
            }
        };
        prob("mutation_rate", self.mutation_rate)?;
        prob("crossover_rate", self.crossover_rate)?;
        prob("crossover_strength", self.crossover_strength)?;
        if self.population_size == 0 {
            return Err(GaError::Config("population_size must be positive".into()));
        }
        if self.elite_count >= self.population_size {
            return Err(GaError::Config(format!(
                "elite_count {} must be smaller than population_size {}",
                self.elite_count, self.population_size
            )));
        }
        Ok(())
    }

    pub fn validate_for_space(&self, gene_count: usize) -> Result<(), GaError> {
        self.validate()?;
        if self.must_mutate_count > gene_count {
            return Err(GaError::Config(format!(
                "must_mutate_count {} exceeds gene count {gene_count}",
                self.must_mutate_count
            )));
        }
        Ok(())
    }
}

/// Plateau rule: stop when the best score's relative growth over a
/// window of generations falls below a threshold (0.35% by default).
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauRule {
    pub threshold: f64,
    pub window: usize,
}

pub const DEFAULT_PLATEAU_THRESHOLD: f64 = 0.0035;
pub const DEFAULT_PLATEAU_WINDOW: usize = 10;
const PLATEAU_EPSILON: f64 = 1e-9;

impl Default for PlateauRule {
    fn default() -> Self {
        Self { threshold: DEFAULT_PLATEAU_THRESHOLD, window: DEFAULT_PLATEAU_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminationCriteria {
    /// Stop once this many generation indices have been reached.
    pub max_iterations: Option<u64>,
    pub max_wall_clock: Option<Duration>,
    pub plateau: Option<PlateauRule>,
}

impl Default for TerminationCriteria {
    fn default() -> Self {
        Self { max_iterations: None, max_wall_clock: None, plateau: Some(PlateauRule::default()) }
    }
}

impl TerminationCriteria {
    pub fn validate(&self) -> Result<(), GaError> {
        if self.max_iterations.is_none() && self.max_wall_clock.is_none() && self.plateau.is_none() {
            return Err(GaError::Config("at least one termination criterion must be enabled".into()));
        }
        if let Some(p) = &self.plateau {
            if p.window == 0 {
                return Err(GaError::Config("plateau window must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Which termination criterion fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    WallClock,
    Plateau,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::WallClock => "wall_clock",
            StopReason::Plateau => "plateau",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "max_iterations" => Some(StopReason::MaxIterations),
            "wall_clock" => Some(StopReason::WallClock),
            "plateau" => Some(StopReason::Plateau),
            _ => None,
        }
    }
}

/// One generation's ledger entry: the best-so-far score is monotone by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub index: u64,
    pub best_fitness: f64,
    pub best_chromosome: Chromosome,
    /// Chromosomes newly evaluated this generation (cache misses).
    pub evaluated_count: u64,
}

/// An evaluated population member. `eval_seq` is the log sequence number
/// of the record that first scored this chromosome; ties on fitness are
/// broken toward the earlier evaluation.
#[derive(Debug, Clone)]
pub struct Individual {
    pub chromosome: Chromosome,
    pub fitness: f64,
    pub eval_seq: u64,
}

/// Uniform-exchange crossover. With probability `crossover_rate` each gene
/// position (plus the base level as one extra position) swaps between the
/// parents independently with probability `crossover_strength`; otherwise
/// the parents are returned unchanged. Offspring are not yet repaired.
pub fn crossover<R: Rng>(
    parent_a: &Chromosome,
    parent_b: &Chromosome,
    config: &GaConfig,
    rng: &mut R,
) -> Result<(Chromosome, Chromosome), GaError> {
    if parent_a.genes.len() != parent_b.genes.len() {
        return Err(GaError::Structural(format!(
            "gene length mismatch: {} vs {}",
            parent_a.genes.len(),
            parent_b.genes.len()
        )));
    }
    let mut a = parent_a.clone();
    let mut b = parent_b.clone();
    if rng.gen_bool(config.crossover_rate) {
        for i in 0..a.genes.len() {
            if rng.gen_bool(config.crossover_strength) {
                std::mem::swap(&mut a.genes[i], &mut b.genes[i]);
            }
        }
        if rng.gen_bool(config.crossover_strength) {
            std::mem::swap(&mut a.base_level, &mut b.base_level);
        }
    }
    Ok((a, b))
}

/// Flips each gene independently with probability `mutation_rate`, then
/// flips additional distinct positions until at least `must_mutate_count`
/// genes differ. The base level is reassigned uniformly with probability
/// `mutation_rate`.
pub fn mutate<R: Rng>(
    individual: &Chromosome,
    base_level_count: usize,
    config: &GaConfig,
    rng: &mut R,
) -> Chromosome {
    let mut c = individual.clone();
    let mut flipped = vec![false; c.genes.len()];
    let mut flip_count = 0usize;
    for i in 0..c.genes.len() {
        if rng.gen_bool(config.mutation_rate) {
            c.genes[i] = !c.genes[i];
            flipped[i] = true;
            flip_count += 1;
        }
    }
    while flip_count < config.must_mutate_count {
        let i = rng.gen_range(0..c.genes.len());
        if !flipped[i] {
            c.genes[i] = !c.genes[i];
            flipped[i] = true;
            flip_count += 1;
        }
    }
    if base_level_count > 1 && rng.gen_bool(config.mutation_rate) {
        c.base_level = rng.gen_range(0..base_level_count);
    }
    c
}

fn fitter<'a>(x: &'a Individual, y: &'a Individual) -> &'a Individual {
    if y.fitness > x.fitness || (y.fitness == x.fitness && y.eval_seq < x.eval_seq) {
        y
    } else {
        x
    }
}

/// Tournament selection of size 2, run independently for each parent:
/// two uniform draws, the fitter wins, ties go to the earlier-evaluated
/// individual.
pub fn select_parents<'a, R: Rng>(
    population: &'a [Individual],
    rng: &mut R,
) -> (&'a Individual, &'a Individual) {
    let mut pick = |rng: &mut R| {
        let x = &population[rng.gen_range(0..population.len())];
        let y = &population[rng.gen_range(0..population.len())];
        fitter(x, y)
    };
    let first = pick(rng);
    let second = pick(rng);
    (first, second)
}

/// Evaluates the stop criteria in order: generation budget, wall clock,
/// plateau. The plateau rule compares the best score against the best
/// from `window` generations ago, relative to that earlier value.
pub fn check_termination(
    history: &[GenerationSummary],
    criteria: &TerminationCriteria,
    elapsed: Duration,
) -> Option<StopReason> {
    let last = history.last()?;
    if let Some(max) = criteria.max_iterations {
        if last.index >= max {
            return Some(StopReason::MaxIterations);
        }
    }
    if let Some(max) = criteria.max_wall_clock {
        if elapsed >= max {
            return Some(StopReason::WallClock);
        }
    }
    if let Some(p) = &criteria.plateau {
        if history.len() > p.window {
            let earlier = history[history.len() - 1 - p.window].best_fitness;
            let growth = (last.best_fitness - earlier) / earlier.max(PLATEAU_EPSILON);
            if growth < p.threshold {
                return Some(StopReason::Plateau);
            }
        }
    }
    None
}

/// The per-chromosome evaluation result handed back by a fitness
/// function. A deterministic fitness function (the hermetic backend)
/// must also report a deterministic duration for session logs to be
/// bit-reproducible.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub status: EvalStatus,
    pub binary_digest: Option<[u8; 32]>,
    pub fitness: f64,
    pub duration: Duration,
}

/// The fitness contract: chromosome in, score or compile-failure marker
/// out. `Err` signals an infrastructure failure (not a compile failure)
/// and aborts the session. Must be safe for concurrent invocation.
pub trait FitnessFn: Sync {
    fn evaluate(&self, chromosome: &Chromosome) -> Result<Evaluation, String>;
}

impl<F> FitnessFn for F
where
    F: Fn(&Chromosome) -> Result<Evaluation, String> + Sync,
{
    fn evaluate(&self, chromosome: &Chromosome) -> Result<Evaluation, String> {
        self(chromosome)
    }
}

/// Result of a completed tuning session.
#[derive(Debug)]
pub struct RunOutcome {
    pub reason: StopReason,
    /// Every record that achieved the final best fitness, in evaluation
    /// order. Which one to report is the caller's choice.
    pub best_records: Vec<IterationRecord>,
    pub history: Vec<GenerationSummary>,
}

/// Executes the generational loop against a store-backed session.
///
/// Offspring are admitted through constraint repair, chromosomes already
/// scored in the session are never re-evaluated, the `elite_count` best
/// individuals carry forward unchanged, and every generation appends a
/// checkpoint record so a killed session resumes bit-identically.
pub fn run<F: FitnessFn>(
    space: &FlagSpace,
    constraints: &ConstraintSet,
    fitness: &F,
    config: &GaConfig,
    criteria: &TerminationCriteria,
    store: &mut Store,
    resume: Option<ResumeState>,
    jobs: usize,
) -> Result<RunOutcome, GaError> {
    config.validate_for_space(space.gene_count())?;
    criteria.validate()?;
    let jobs = jobs.max(1);
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut history: Vec<GenerationSummary> = Vec::new();
    let mut population: Vec<Individual> = Vec::new();

    if let Some(state) = resume {
        if let Some(reason) = state.finished {
            return Ok(RunOutcome {
                reason,
                best_records: collect_best(store, &state.history),
                history: state.history,
            });
        }
        if !state.history.is_empty() {
            rng.set_word_pos(state.rng_word_pos);
            population = rebuild_population(store, &state.population)?;
            history = state.history;
        }
    }

    if history.is_empty() {
        let mut initial = Vec::with_capacity(config.population_size);
        for _ in 0..config.population_size {
            initial.push(random_chromosome(space, constraints, &mut rng)?);
        }
        let (individuals, evaluated) = evaluate_generation(store, fitness, 0, &initial, jobs)?;
        population = individuals;
        let summary = summarize(0, None, &population, evaluated);
        store.append_generation(&summary, rng.get_word_pos(), &chromosomes_of(&population))?;
        history.push(summary);
    }

    loop {
        if let Some(reason) = check_termination(&history, criteria, started.elapsed()) {
            store.append_finish(reason)?;
            return Ok(RunOutcome {
                reason,
                best_records: collect_best(store, &history),
                history,
            });
        }
        let gen = history.last().expect("history non-empty").index + 1;
        let offspring = next_generation(&population, space, constraints, config, &mut rng)?;
        let (individuals, evaluated) = evaluate_generation(store, fitness, gen, &offspring, jobs)?;
        population = individuals;
        let summary = summarize(gen, history.last(), &population, evaluated);
        store.append_generation(&summary, rng.get_word_pos(), &chromosomes_of(&population))?;
        history.push(summary);
    }
}

fn chromosomes_of(population: &[Individual]) -> Vec<Chromosome> {
    population.iter().map(|i| i.chromosome.clone()).collect()
}

fn rebuild_population(store: &Store, chromosomes: &[Chromosome]) -> Result<Vec<Individual>, GaError> {
    chromosomes
        .iter()
        .map(|c| {
            let entry = store.lookup(c).ok_or_else(|| {
                GaError::Structural(format!(
                    "population snapshot references unevaluated chromosome {}",
                    c.short_digest()
                ))
            })?;
            Ok(Individual { chromosome: c.clone(), fitness: entry.fitness, eval_seq: entry.seq })
        })
        .collect()
}

fn summarize(
    index: u64,
    previous: Option<&GenerationSummary>,
    population: &[Individual],
    evaluated_count: u64,
) -> GenerationSummary {
    let gen_best = population
        .iter()
        .min_by(|a, b| {
            b.fitness
                .partial_cmp(&a.fitness)
                .unwrap()
                .then(a.eval_seq.cmp(&b.eval_seq))
        })
        .expect("population non-empty");
    match previous {
        Some(prev) if prev.best_fitness >= gen_best.fitness => GenerationSummary {
            index,
            best_fitness: prev.best_fitness,
            best_chromosome: prev.best_chromosome.clone(),
            evaluated_count,
        },
        _ => GenerationSummary {
            index,
            best_fitness: gen_best.fitness,
            best_chromosome: gen_best.chromosome.clone(),
            evaluated_count,
        },
    }
}

fn next_generation<R: Rng>(
    population: &[Individual],
    space: &FlagSpace,
    constraints: &ConstraintSet,
    config: &GaConfig,
    rng: &mut R,
) -> Result<Vec<Chromosome>, GaError> {
    let mut elites: Vec<&Individual> = population.iter().collect();
    elites.sort_by(|a, b| {
        b.fitness
            .partial_cmp(&a.fitness)
            .unwrap()
            .then(a.eval_seq.cmp(&b.eval_seq))
    });
    let mut next: Vec<Chromosome> = elites
        .iter()
        .take(config.elite_count)
        .map(|i| i.chromosome.clone())
        .collect();

    while next.len() < config.population_size {
        let (pa, pb) = select_parents(population, rng);
        let (ca, cb) = crossover(&pa.chromosome, &pb.chromosome, config, rng)?;
        let ma = mutate(&ca, space.base_levels().len(), config, rng);
        next.push(repair(&ma, constraints)?);
        if next.len() < config.population_size {
            let mb = mutate(&cb, space.base_levels().len(), config, rng);
            next.push(repair(&mb, constraints)?);
        }
    }
    Ok(next)
}

/// Scores one generation: deduplicates against the session cache,
/// evaluates the misses (in parallel when `jobs > 1`), and appends one
/// record per new evaluation in first-occurrence order.
fn evaluate_generation<F: FitnessFn>(
    store: &mut Store,
    fitness: &F,
    generation: u64,
    chromosomes: &[Chromosome],
    jobs: usize,
) -> Result<(Vec<Individual>, u64), GaError> {
    let mut pending: Vec<Chromosome> = Vec::new();
    for c in chromosomes {
        if store.lookup(c).is_none() && !pending.contains(c) {
            pending.push(c.clone());
        }
    }

    let results: Vec<Result<Evaluation, String>> = if jobs <= 1 || pending.len() <= 1 {
        pending.iter().map(|c| fitness.evaluate(c)).collect()
    } else {
        parallel_evaluate(fitness, &pending, jobs)
    };

    // records for evaluations preceding any failure are persisted
    let mut failure: Option<String> = None;
    for (chromosome, result) in pending.iter().zip(results) {
        match result {
            Ok(eval) => {
                let record = IterationRecord {
                    seq: store.next_seq(),
                    generation,
                    chromosome: chromosome.clone(),
                    status: eval.status,
                    binary_digest: eval.binary_digest,
                    fitness: eval.fitness,
                    duration: eval.duration,
                };
                store.append_iteration(&record)?;
            }
            Err(msg) => {
                failure = Some(msg);
                break;
            }
        }
    }
    if let Some(msg) = failure {
        return Err(GaError::Abort(msg));
    }

    let evaluated = pending.len() as u64;
    let individuals = chromosomes
        .iter()
        .map(|c| {
            let entry = store.lookup(c).expect("every admitted chromosome is cached");
            Individual { chromosome: c.clone(), fitness: entry.fitness, eval_seq: entry.seq }
        })
        .collect();
    Ok((individuals, evaluated))
}

fn parallel_evaluate<F: FitnessFn>(
    fitness: &F,
    pending: &[Chromosome],
    jobs: usize,
) -> Vec<Result<Evaluation, String>> {
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(pending.len()) {
            let tx = tx.clone();
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= pending.len() {
                    break;
                }
                let result = fitness.evaluate(&pending[i]);
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut results: Vec<Option<Result<Evaluation, String>>> = (0..pending.len()).map(|_| None).collect();
        for (i, result) in rx {
            results[i] = Some(result);
        }
        results.into_iter().map(|r| r.expect("every index evaluated")).collect()
    })
}

fn collect_best(store: &Store, history: &[GenerationSummary]) -> Vec<IterationRecord> {
    let Some(last) = history.last() else { return Vec::new() };
    store
        .iteration_records()
        .iter()
        .filter(|r| r.fitness == last.best_fitness)
        .cloned()
        .collect()
}
