//! Evolutionary search over metric graphs, plus a random-search baseline.
//!
//! A generation draws `ceil(gamma * N)` parents uniformly with replacement,
//! mutates each once, deduplicates the offspring against each other and the
//! population, evaluates them, and keeps the top `N` of parents and
//! offspring.

mod fitness;
mod mutation;

use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use fitness::{FitnessEvaluator, FitnessStrategy, SearchStats};
pub use mutation::{
    delete_node, insert_above, mutate, mutate_deletion, mutate_insertion, mutate_replacement, replace_operator, MutationKind,
    Mutated, MUTATION_RETRIES,
};

use crate::dataset::{InteractionDataset, Split};
use crate::equivalence::{dedup, dedup_against, EquivalenceConfig, ProbeSet};
use crate::error::{ConfigError, Error};
use crate::graph::{print_expr, random_generate, GenerationConfig, MetricGraph};
use crate::ranking::{evaluate, EvalReport};
use crate::rng;
use crate::surrogate::{SurrogateDataset, SurrogateModel};
use crate::train::{train_full, TrainConfig};

/// Stream labels for [`rng::derive_seed`].
const STREAM_INIT: u64 = 1;
const STREAM_GENERATION: u64 = 2;
const STREAM_MUTATION: u64 = 3;
const STREAM_PROBES: u64 = 4;
const STREAM_RANDOM_SEARCH: u64 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitnessKind {
    EarlyStop,
    Surrogate,
    Full,
}

impl FitnessKind {
    pub fn name(self) -> &'static str {
        match self {
            FitnessKind::EarlyStop => "es",
            FitnessKind::Surrogate => "sur",
            FitnessKind::Full => "full",
        }
    }
}

/// How a candidate came to be.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    /// Sampled by the generator (initial population or random search).
    Random,
    /// A mutated copy of `parent`.
    Mutation { parent: usize, kind: MutationKind, noop: bool },
    /// Sampled to replace an offspring equivalent to an existing metric.
    Replacement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub id: usize,
    #[serde(with = "graph_text")]
    pub graph: MetricGraph,
    /// `None` until evaluated; degenerate candidates hold `-inf`.
    pub fitness: Option<f64>,
    pub fitness_kind: Option<FitnessKind>,
    pub generation: usize,
    pub origin: Origin,
    /// Training epochs spent evaluating this candidate.
    pub epochs: usize,
}

impl CandidateRecord {
    pub fn new(id: usize, graph: MetricGraph, generation: usize, origin: Origin) -> Self {
        CandidateRecord {
            id,
            graph,
            fitness: None,
            fitness_kind: None,
            generation,
            origin,
            epochs: 0,
        }
    }

    pub fn expression(&self) -> String {
        print_expr(&self.graph)
    }

    /// Fitness for ordering: unevaluated and NaN count as `-inf`.
    pub fn score(&self) -> f64 {
        match self.fitness {
            Some(f) if !f.is_nan() => f,
            _ => f64::NEG_INFINITY,
        }
    }
}

mod graph_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::graph::{parse_expr, print_expr, MetricGraph};

    pub fn serialize<S: Serializer>(g: &MetricGraph, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&print_expr(g))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<MetricGraph, D::Error> {
        let text = String::deserialize(d)?;
        parse_expr(&text).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionConfig {
    pub population: usize,
    pub generations: usize,
    /// Mutation ratio: offspring per generation is `ceil(gamma * population)`.
    pub gamma: f64,
    pub strategy: FitnessStrategy,
    pub seed: u64,
    /// Worker threads for candidate evaluation; 0 uses all cores.
    pub parallelism: usize,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            population: 50,
            generations: 100,
            gamma: 0.7,
            strategy: FitnessStrategy::EarlyStop { epochs: 10 },
            seed: 0,
            parallelism: 0,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.population < 2 {
            return Err(ConfigError::new("population must be at least 2"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::new(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        self.strategy.validate()
    }

    pub fn offspring_count(&self) -> usize {
        (self.gamma * self.population as f64 - 1e-9).ceil() as usize
    }

    /// Candidate evaluations a full run performs: `N + T * ceil(gamma N)`.
    pub fn budget(&self) -> usize {
        self.population + self.generations * self.offspring_count()
    }
}

/// Everything a search needs besides the dataset.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SearchSettings {
    pub evolution: EvolutionConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub equivalence: EquivalenceConfig,
}

impl SearchSettings {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.evolution.validate()?;
        self.generation.validate()?;
        self.train.validate()?;
        self.equivalence.validate()
    }
}

/// Population after selection in one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSnapshot {
    pub generation: usize,
    pub population: Vec<CandidateRecord>,
    pub best_fitness: f64,
    /// Cumulative evaluations and epochs at the end of this generation.
    pub evaluations: usize,
    pub epochs: usize,
}

/// Full-training result for the final best candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalEvaluation {
    /// Best validation NDCG during full training.
    pub fitness: f64,
    pub valid: EvalReport,
    pub test: EvalReport,
    pub epochs: usize,
    pub best_epoch: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: CandidateRecord,
    /// `None` if the best candidate could not be trained.
    pub final_eval: Option<FinalEvaluation>,
    pub history: Vec<GenerationSnapshot>,
    pub stats: SearchStats,
    pub wall_secs: f64,
    /// Surrogate model and its training log, for the surrogate strategy.
    #[serde(skip)]
    pub surrogate: Option<SurrogateModel>,
    #[serde(skip)]
    pub surrogate_data: SurrogateDataset,
}

impl SearchResult {
    fn assemble(
        best: CandidateRecord,
        history: Vec<GenerationSnapshot>,
        evaluator: FitnessEvaluator<'_>,
        ds: &InteractionDataset,
        train: &TrainConfig,
        start: Instant,
    ) -> SearchResult {
        let final_eval = final_evaluation(&best.graph, ds, train);
        let (stats, surrogate, surrogate_data) = evaluator.into_parts();
        SearchResult {
            best,
            final_eval,
            history,
            stats,
            wall_secs: start.elapsed().as_secs_f64(),
            surrogate,
            surrogate_data,
        }
    }
}

impl SearchResult {
    /// The last population, best first.
    pub fn final_population(&self) -> &[CandidateRecord] {
        &self.history.last().expect("at least one snapshot").population
    }
}

/// Orders candidates best first: higher fitness, then older generation, then
/// lower id.
pub fn candidate_order(a: &CandidateRecord, b: &CandidateRecord) -> std::cmp::Ordering {
    b.score()
        .total_cmp(&a.score())
        .then(a.generation.cmp(&b.generation))
        .then(a.id.cmp(&b.id))
}

/// Keeps the `n` best of `pool`, best first.
pub fn select_top_n(mut pool: Vec<CandidateRecord>, n: usize) -> Vec<CandidateRecord> {
    pool.sort_by(candidate_order);
    pool.truncate(n);
    pool
}

/// `n` random graphs with no equivalent pair; replaced or dropped duplicates
/// are topped up with further draws.
pub fn init_population<R: Rng + ?Sized>(
    n: usize,
    gen: &GenerationConfig,
    probes: &ProbeSet,
    eq: &EquivalenceConfig,
    rng: &mut R,
) -> Result<Vec<MetricGraph>, ConfigError> {
    gen.validate()?;
    let first = (0..n).map(|_| random_generate(gen, rng)).collect::<Result<Vec<_>, _>>()?;
    let mut graphs = dedup(first, probes, eq, gen, rng).graphs;
    for _ in 0..eq.max_rounds.max(1) * 10 {
        if graphs.len() >= n {
            return Ok(graphs);
        }
        let extra = (graphs.len()..n)
            .map(|_| random_generate(gen, rng))
            .collect::<Result<Vec<_>, _>>()?;
        graphs.extend(dedup_against(&graphs, extra, probes, eq, gen, rng).graphs);
    }
    if graphs.len() < n {
        return Err(ConfigError::new(format!(
            "could only find {} mutually distinct metrics for a population of {n}",
            graphs.len()
        )));
    }
    Ok(graphs)
}

/// Mutated offspring of `population`, deduplicated against it and each
/// other. Ids start at `next_id`.
#[allow(clippy::too_many_arguments)]
pub fn generate_offspring<R: Rng + ?Sized>(
    population: &[CandidateRecord],
    count: usize,
    generation: usize,
    next_id: usize,
    settings: &SearchSettings,
    probes: &ProbeSet,
    rng: &mut R,
) -> Vec<CandidateRecord> {
    let gen = &settings.generation;
    let mut origins = Vec::with_capacity(count);
    let mut graphs = Vec::with_capacity(count);
    for k in 0..count {
        let parent = population.choose(rng).expect("non-empty population");
        let kind = *MutationKind::ALL.choose(rng).unwrap();
        // Each offspring mutates with its own index-derived stream.
        let mut mrng = rng::stream(
            settings.evolution.seed,
            &[STREAM_MUTATION, generation as u64, k as u64],
        );
        let m = mutate(kind, &parent.graph, gen, &mut mrng);
        origins.push(Origin::Mutation {
            parent: parent.id,
            kind,
            noop: m.noop,
        });
        graphs.push(m.graph);
    }
    let fixed: Vec<MetricGraph> = population.iter().map(|r| r.graph.clone()).collect();
    let deduped = dedup_against(&fixed, graphs, probes, &settings.equivalence, gen, rng);
    let mut out = Vec::with_capacity(deduped.graphs.len());
    for ((graph, fresh), k) in deduped.graphs.into_iter().zip(deduped.fresh).zip(deduped.index) {
        let origin = if fresh { Origin::Replacement } else { origins[k] };
        out.push(CandidateRecord::new(next_id + out.len(), graph, generation, origin));
    }
    out
}

/// Full training of `graph` with validation and test reports; `None` if
/// training is degenerate.
pub fn final_evaluation(graph: &MetricGraph, ds: &InteractionDataset, train: &TrainConfig) -> Option<FinalEvaluation> {
    let full = train_full(graph, ds, train).ok()?;
    let test = evaluate(graph, &full.embeddings, ds, Split::Test, train.top_k);
    Some(FinalEvaluation {
        fitness: full.valid.ndcg,
        valid: full.valid,
        test,
        epochs: full.epochs_run,
        best_epoch: full.best_epoch,
    })
}

fn snapshot(generation: usize, population: &[CandidateRecord], evaluator: &FitnessEvaluator<'_>) -> GenerationSnapshot {
    GenerationSnapshot {
        generation,
        population: population.to_vec(),
        best_fitness: population.first().map(CandidateRecord::score).unwrap_or(f64::NEG_INFINITY),
        evaluations: evaluator.stats().evaluations,
        epochs: evaluator.stats().epochs,
    }
}

/// Runs the evolutionary search and fully re-trains the final best.
pub fn run_search(ds: &InteractionDataset, settings: &SearchSettings) -> Result<SearchResult, Error> {
    run_search_with(ds, settings, |_| {})
}

/// [`run_search`] with a callback after every generation (for progress
/// output or incremental persistence).
pub fn run_search_with(
    ds: &InteractionDataset,
    settings: &SearchSettings,
    mut on_generation: impl FnMut(&GenerationSnapshot),
) -> Result<SearchResult, Error> {
    settings.validate()?;
    let start = Instant::now();
    let evo = &settings.evolution;
    let seed = evo.seed;
    let eq = &settings.equivalence;
    let probes = ProbeSet::generate(eq.probes, eq.probe_dim, rng::derive_seed(seed, &[STREAM_PROBES]));
    let mut evaluator = FitnessEvaluator::new(ds, settings)?;

    let mut init_rng = rng::stream(seed, &[STREAM_INIT]);
    let graphs = init_population(evo.population, &settings.generation, &probes, eq, &mut init_rng)?;
    let mut population: Vec<CandidateRecord> = graphs
        .into_iter()
        .enumerate()
        .map(|(id, g)| CandidateRecord::new(id, g, 0, Origin::Random))
        .collect();
    let mut next_id = population.len();
    evaluator.evaluate(&mut population)?;
    population.sort_by(candidate_order);
    let mut history = vec![snapshot(0, &population, &evaluator)];
    on_generation(&history[0]);

    let count = evo.offspring_count();
    for t in 1..=evo.generations {
        let mut grng = rng::stream(seed, &[STREAM_GENERATION, t as u64]);
        let mut offspring = generate_offspring(&population, count, t, next_id, settings, &probes, &mut grng);
        next_id += offspring.len();
        evaluator.evaluate(&mut offspring)?;
        population.extend(offspring);
        population = select_top_n(population, evo.population);
        history.push(snapshot(t, &population, &evaluator));
        on_generation(history.last().unwrap());
    }

    let best = population[0].clone();
    Ok(SearchResult::assemble(best, history, evaluator, ds, &settings.train, start))
}

/// Evaluates `budget` independently generated graphs with the configured
/// fitness strategy and fully re-trains the best.
pub fn random_search(ds: &InteractionDataset, budget: usize, settings: &SearchSettings) -> Result<SearchResult, Error> {
    if budget == 0 {
        return Err(ConfigError::new("random-search budget must be at least 1").into());
    }
    settings.validate()?;
    let start = Instant::now();
    let mut evaluator = FitnessEvaluator::new(ds, settings)?;
    let mut rng = rng::stream(settings.evolution.seed, &[STREAM_RANDOM_SEARCH]);
    let mut candidates = (0..budget)
        .map(|id| {
            random_generate(&settings.generation, &mut rng).map(|g| CandidateRecord::new(id, g, 0, Origin::Random))
        })
        .collect::<Result<Vec<_>, _>>()?;
    evaluator.evaluate(&mut candidates)?;
    candidates.sort_by(candidate_order);
    let best = candidates[0].clone();
    let history = vec![snapshot(0, &candidates, &evaluator)];
    Ok(SearchResult::assemble(best, history, evaluator, ds, &settings.train, start))
}
