//! Candidate fitness: validation NDCG after truncated or full training, or a
//! surrogate prediction.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{candidate_order, CandidateRecord, FitnessKind, SearchSettings};
use crate::dataset::{InteractionDataset, Split};
use crate::error::{ConfigError, Error, TrainError};
use crate::graph::{print_expr, MetricGraph};
use crate::ranking::evaluate;
use crate::surrogate::{SurrogateConfig, SurrogateDataset, SurrogateModel};
use crate::train::{train, train_full, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FitnessStrategy {
    /// Validation NDCG after `epochs` of training.
    EarlyStop { epochs: usize },
    /// Best validation NDCG of a full training run.
    Full,
    /// Surrogate predictions after a fully trained warmup set.
    Surrogate(SurrogateConfig),
}

impl FitnessStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            FitnessStrategy::EarlyStop { .. } => "es",
            FitnessStrategy::Full => "full",
            FitnessStrategy::Surrogate(_) => "sur",
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            FitnessStrategy::Surrogate(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }
}

/// Evaluation counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Candidates that received a fitness value.
    pub evaluations: usize,
    /// Training runs actually performed (cache misses).
    pub trainings: usize,
    pub full_trainings: usize,
    pub predictions: usize,
    pub cache_hits: usize,
    pub degenerate: usize,
    /// Training epochs consumed across all candidate evaluations.
    pub epochs: usize,
    pub surrogate_fits: usize,
    /// Surrogate MSE after its most recent fit.
    pub surrogate_mse: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Mode {
    EarlyStop(usize),
    Full,
}

#[derive(Clone, Copy, Debug)]
struct Outcome {
    fitness: f64,
    kind: FitnessKind,
    epochs: usize,
}

/// Scores candidates under a [`FitnessStrategy`]. Training results are
/// cached by expression, so a metric is never trained twice in one search.
pub struct FitnessEvaluator<'a> {
    ds: &'a InteractionDataset,
    train: TrainConfig,
    strategy: FitnessStrategy,
    constant_pool: Vec<f64>,
    pool: rayon::ThreadPool,
    cache: HashMap<(String, Mode), Outcome>,
    surrogate: Option<SurrogateModel>,
    dsur: SurrogateDataset,
    stats: SearchStats,
}

impl<'a> FitnessEvaluator<'a> {
    pub fn new(ds: &'a InteractionDataset, settings: &SearchSettings) -> Result<Self, Error> {
        settings.train.validate()?;
        settings.evolution.strategy.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.evolution.parallelism)
            .build()
            .map_err(|e| ConfigError::new(format!("thread pool: {e}")))?;
        Ok(FitnessEvaluator {
            ds,
            train: settings.train.clone(),
            strategy: settings.evolution.strategy.clone(),
            constant_pool: settings.generation.constant_pool.clone(),
            pool,
            cache: HashMap::new(),
            surrogate: None,
            dsur: SurrogateDataset::default(),
            stats: SearchStats::default(),
        })
    }

    pub fn stats(&self) -> &SearchStats {
        &self.stats
    }

    pub fn into_stats(self) -> SearchStats {
        self.stats
    }

    pub fn surrogate(&self) -> Option<&SurrogateModel> {
        self.surrogate.as_ref()
    }

    /// The logged `(graph, full fitness)` pairs the surrogate trains on.
    pub fn surrogate_data(&self) -> &SurrogateDataset {
        &self.dsur
    }

    pub fn into_parts(self) -> (SearchStats, Option<SurrogateModel>, SurrogateDataset) {
        (self.stats, self.surrogate, self.dsur)
    }

    /// Assigns a fitness to every record.
    pub fn evaluate(&mut self, records: &mut [CandidateRecord]) -> Result<(), Error> {
        match self.strategy.clone() {
            FitnessStrategy::EarlyStop { epochs } => {
                let all: Vec<usize> = (0..records.len()).collect();
                self.train_batch(records, &all, Mode::EarlyStop(epochs))
            }
            FitnessStrategy::Full => {
                let all: Vec<usize> = (0..records.len()).collect();
                self.train_batch(records, &all, Mode::Full)
            }
            FitnessStrategy::Surrogate(cfg) => self.evaluate_surrogate(records, &cfg),
        }
    }

    fn evaluate_surrogate(&mut self, records: &mut [CandidateRecord], cfg: &SurrogateConfig) -> Result<(), Error> {
        let mut next = 0;
        // Warmup: train fully until the log holds `warmup` finite entries.
        while self.surrogate.is_none() && next < records.len() {
            let need = cfg.warmup - self.dsur.len();
            let batch: Vec<usize> = (next..records.len().min(next + need)).collect();
            next += batch.len();
            self.train_batch(records, &batch, Mode::Full)?;
            for &i in &batch {
                self.log(&records[i])?;
            }
            if self.dsur.len() >= cfg.warmup {
                let mut model = SurrogateModel::from_config(&self.constant_pool, cfg);
                let trace = model.train(&self.dsur, cfg.epochs, cfg.learning_rate, cfg.optimizer)?;
                self.stats.surrogate_mse = trace.last().copied();
                self.stats.surrogate_fits += 1;
                self.surrogate = Some(model);
            }
        }
        if next == records.len() {
            return Ok(());
        }
        let model = self.surrogate.as_ref().expect("fitted after warmup");
        for r in &mut records[next..] {
            let y = model.predict(&r.graph)?;
            r.fitness = Some(if y.is_finite() { y } else { f64::NEG_INFINITY });
            r.fitness_kind = Some(FitnessKind::Surrogate);
            r.epochs = 0;
            self.stats.predictions += 1;
            self.stats.evaluations += 1;
        }
        if !cfg.online {
            return Ok(());
        }
        // Online schedule: the most promising prediction is verified by full
        // training, joins the log, and the surrogate is refreshed.
        let best = (next..records.len())
            .min_by(|&a, &b| candidate_order(&records[a], &records[b]))
            .expect("non-empty");
        self.train_batch(records, &[best], Mode::Full)?;
        self.stats.evaluations -= 1;
        self.log(&records[best])?;
        let model = self.surrogate.as_mut().unwrap();
        let trace = model.train(&self.dsur, cfg.refresh_epochs, cfg.learning_rate, cfg.optimizer)?;
        self.stats.surrogate_mse = trace.last().copied();
        self.stats.surrogate_fits += 1;
        Ok(())
    }

    fn log(&mut self, record: &CandidateRecord) -> Result<(), Error> {
        let vocab = crate::surrogate::Vocabulary::new(&self.constant_pool);
        self.dsur.push(&record.graph, record.score(), &vocab)?;
        Ok(())
    }

    /// Trains the records at `idxs` (in parallel, skipping cached
    /// expressions) and stores the results.
    fn train_batch(&mut self, records: &mut [CandidateRecord], idxs: &[usize], mode: Mode) -> Result<(), Error> {
        let keys: Vec<(String, Mode)> = idxs.iter().map(|&i| (print_expr(&records[i].graph), mode)).collect();
        let mut todo: Vec<(&(String, Mode), &MetricGraph)> = Vec::new();
        for (key, &i) in keys.iter().zip(idxs) {
            if !self.cache.contains_key(key) && !todo.iter().any(|(k, _)| *k == key) {
                todo.push((key, &records[i].graph));
            }
        }
        let (ds, cfg) = (self.ds, &self.train);
        let results: Vec<Result<Outcome, TrainError>> = self
            .pool
            .install(|| todo.par_iter().map(|(_, g)| run_training(g, ds, cfg, mode)).collect());
        let mut fresh = Vec::with_capacity(todo.len());
        for ((key, _), result) in todo.iter().zip(results) {
            let outcome = result?;
            self.stats.trainings += 1;
            self.stats.epochs += outcome.epochs;
            if mode == Mode::Full {
                self.stats.full_trainings += 1;
            }
            if !outcome.fitness.is_finite() {
                self.stats.degenerate += 1;
            }
            self.cache.insert((*key).clone(), outcome);
            fresh.push((*key).clone());
        }
        for (key, &i) in keys.iter().zip(idxs) {
            let outcome = self.cache[key];
            let first_use = match fresh.iter().position(|k| k == key) {
                Some(p) => {
                    fresh.swap_remove(p);
                    true
                }
                None => false,
            };
            if !first_use {
                self.stats.cache_hits += 1;
            }
            let r = &mut records[i];
            r.fitness = Some(outcome.fitness);
            r.fitness_kind = Some(outcome.kind);
            r.epochs = if first_use { outcome.epochs } else { 0 };
            self.stats.evaluations += 1;
        }
        Ok(())
    }
}

/// Degenerate training maps to `-inf`; data and configuration problems are
/// real errors.
fn run_training(graph: &MetricGraph, ds: &InteractionDataset, cfg: &TrainConfig, mode: Mode) -> Result<Outcome, TrainError> {
    let degenerate = |epochs, kind| Outcome {
        fitness: f64::NEG_INFINITY,
        kind,
        epochs,
    };
    match mode {
        Mode::EarlyStop(epochs) => match train(graph, ds, cfg, Some(epochs)) {
            Ok(out) => Ok(Outcome {
                fitness: evaluate(graph, &out.embeddings, ds, Split::Valid, cfg.top_k).ndcg,
                kind: FitnessKind::EarlyStop,
                epochs,
            }),
            Err(TrainError::DegenerateCandidate { epoch, .. }) => Ok(degenerate(epoch, FitnessKind::EarlyStop)),
            Err(TrainError::Eval(_)) => Ok(degenerate(0, FitnessKind::EarlyStop)),
            Err(e) => Err(e),
        },
        Mode::Full => match train_full(graph, ds, cfg) {
            Ok(out) => Ok(Outcome {
                fitness: out.valid.ndcg,
                kind: FitnessKind::Full,
                epochs: out.epochs_run,
            }),
            Err(TrainError::DegenerateCandidate { epoch, .. }) => Ok(degenerate(epoch, FitnessKind::Full)),
            Err(TrainError::Eval(_)) => Ok(degenerate(0, FitnessKind::Full)),
            Err(e) => Err(e),
        },
    }
}
