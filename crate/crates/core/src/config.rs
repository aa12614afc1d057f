//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key, so the
//! echo parses back to an identical configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::dataset::{load_adjacency, InteractionDataset};
use crate::equivalence::EquivalenceConfig;
use crate::error::{ConfigError, Error};
use crate::evolution::{EvolutionConfig, FitnessStrategy, SearchSettings};
use crate::graph::GenerationConfig;
use crate::surrogate::{SurrogateConfig, SurrogateOptimizer};
use crate::train::{OptimizerKind, TrainConfig};

/// Which search to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StrategyKind {
    EarlyStop,
    Full,
    Surrogate,
    Random,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::EarlyStop => "es",
            StrategyKind::Full => "full",
            StrategyKind::Surrogate => "sur",
            StrategyKind::Random => "random",
        }
    }

    pub fn from_name(s: &str) -> Option<StrategyKind> {
        [
            StrategyKind::EarlyStop,
            StrategyKind::Full,
            StrategyKind::Surrogate,
            StrategyKind::Random,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub valid_path: Option<PathBuf>,
    /// Used to carve validation from train when `valid_path` is unset.
    pub valid_fraction: f64,
    /// Parent directory for run directories; empty defers to the environment.
    pub output_root: Option<PathBuf>,
    pub seed: u64,
    pub parallelism: usize,

    pub strategy: StrategyKind,
    pub population: usize,
    pub generations: usize,
    pub gamma: f64,
    pub stop_epochs: usize,
    /// Random-search budget; 0 means `population + generations * ceil(gamma * population)`.
    pub random_budget: usize,

    pub max_depth: usize,
    pub constant_pool: Vec<f64>,

    pub dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub init_scale: f64,
    pub optimizer: OptimizerKind,
    pub full_epochs: usize,
    pub patience: usize,
    pub top_k: usize,
    pub epsilon: f64,

    pub mec_delta: f64,
    pub mec_probes: usize,
    pub mec_probe_dim: usize,
    pub mec_max_rounds: usize,

    pub sur_embed_dim: usize,
    pub sur_hidden: usize,
    pub sur_learning_rate: f64,
    pub sur_optimizer: SurrogateOptimizer,
    pub sur_epochs: usize,
    pub sur_refresh_epochs: usize,
    pub sur_warmup: usize,
    pub sur_online: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let evo = EvolutionConfig::default();
        let gen = GenerationConfig::default();
        let train = TrainConfig::default();
        let eq = EquivalenceConfig::default();
        let sur = SurrogateConfig::default();
        RunConfig {
            train_path: None,
            test_path: None,
            valid_path: None,
            valid_fraction: 0.1,
            output_root: None,
            seed: 0,
            parallelism: 1,
            strategy: StrategyKind::EarlyStop,
            population: evo.population,
            generations: evo.generations,
            gamma: evo.gamma,
            stop_epochs: 10,
            random_budget: 0,
            max_depth: gen.max_depth,
            constant_pool: gen.constant_pool,
            dim: train.dim,
            learning_rate: train.learning_rate,
            weight_decay: train.weight_decay,
            batch_size: train.batch_size,
            init_scale: train.init_scale,
            optimizer: train.optimizer,
            full_epochs: train.full_epochs,
            patience: train.patience,
            top_k: train.top_k,
            epsilon: train.epsilon,
            mec_delta: eq.delta,
            mec_probes: eq.probes,
            mec_probe_dim: eq.probe_dim,
            mec_max_rounds: eq.max_rounds,
            sur_embed_dim: sur.embed_dim,
            sur_hidden: sur.hidden,
            sur_learning_rate: sur.learning_rate,
            sur_optimizer: sur.optimizer,
            sur_epochs: sur.epochs,
            sur_refresh_epochs: sur.refresh_epochs,
            sur_warmup: sur.warmup,
            sur_online: sur.online,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value
        .parse()
        .map_err(|_| ConfigError::new(format!("invalid value {value:?} for {key}")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| ConfigError::new(format!("line {}: {}", n + 1, e.message)))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| ConfigError::new(format!("override {assignment:?} is not key=value")))?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "train_path" => self.train_path = parse_path(value),
            "test_path" => self.test_path = parse_path(value),
            "valid_path" => self.valid_path = parse_path(value),
            "valid_fraction" => self.valid_fraction = parse_num(key, value)?,
            "output_root" => self.output_root = parse_path(value),
            "seed" => self.seed = parse_num(key, value)?,
            "parallelism" => self.parallelism = parse_num(key, value)?,
            "strategy" => {
                self.strategy = StrategyKind::from_name(value)
                    .ok_or_else(|| ConfigError::new(format!("unknown strategy {value:?} (es, full, sur, random)")))?
            }
            "population" => self.population = parse_num(key, value)?,
            "generations" => self.generations = parse_num(key, value)?,
            "gamma" => self.gamma = parse_num(key, value)?,
            "stop_epochs" => self.stop_epochs = parse_num(key, value)?,
            "random_budget" => self.random_budget = parse_num(key, value)?,
            "max_depth" => self.max_depth = parse_num(key, value)?,
            "constant_pool" => {
                self.constant_pool = value
                    .split(',')
                    .map(|v| parse_num(key, v.trim()))
                    .collect::<Result<_, _>>()?
            }
            "dim" => self.dim = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "init_scale" => self.init_scale = parse_num(key, value)?,
            "optimizer" => {
                self.optimizer = match value {
                    "adam" => OptimizerKind::Adam,
                    "sgd" => OptimizerKind::Sgd,
                    _ => return Err(ConfigError::new(format!("unknown optimizer {value:?} (adam, sgd)"))),
                }
            }
            "full_epochs" => self.full_epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "top_k" => self.top_k = parse_num(key, value)?,
            "epsilon" => self.epsilon = parse_num(key, value)?,
            "mec_delta" => self.mec_delta = parse_num(key, value)?,
            "mec_probes" => self.mec_probes = parse_num(key, value)?,
            "mec_probe_dim" => self.mec_probe_dim = parse_num(key, value)?,
            "mec_max_rounds" => self.mec_max_rounds = parse_num(key, value)?,
            "sur_embed_dim" => self.sur_embed_dim = parse_num(key, value)?,
            "sur_hidden" => self.sur_hidden = parse_num(key, value)?,
            "sur_learning_rate" => self.sur_learning_rate = parse_num(key, value)?,
            "sur_optimizer" => {
                self.sur_optimizer = match value {
                    "adam" => SurrogateOptimizer::Adam,
                    "gd" => SurrogateOptimizer::Gd,
                    _ => return Err(ConfigError::new(format!("unknown surrogate optimizer {value:?} (adam, gd)"))),
                }
            }
            "sur_epochs" => self.sur_epochs = parse_num(key, value)?,
            "sur_refresh_epochs" => self.sur_refresh_epochs = parse_num(key, value)?,
            "sur_warmup" => self.sur_warmup = parse_num(key, value)?,
            "sur_online" => self.sur_online = parse_num(key, value)?,
            _ => return Err(ConfigError::new(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let pool: Vec<String> = self.constant_pool.iter().map(|c| c.to_string()).collect();
        vec![
            ("train_path", show_path(&self.train_path)),
            ("test_path", show_path(&self.test_path)),
            ("valid_path", show_path(&self.valid_path)),
            ("valid_fraction", self.valid_fraction.to_string()),
            ("output_root", show_path(&self.output_root)),
            ("seed", self.seed.to_string()),
            ("parallelism", self.parallelism.to_string()),
            ("strategy", self.strategy.name().to_string()),
            ("population", self.population.to_string()),
            ("generations", self.generations.to_string()),
            ("gamma", self.gamma.to_string()),
            ("stop_epochs", self.stop_epochs.to_string()),
            ("random_budget", self.random_budget.to_string()),
            ("max_depth", self.max_depth.to_string()),
            ("constant_pool", pool.join(",")),
            ("dim", self.dim.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("init_scale", self.init_scale.to_string()),
            (
                "optimizer",
                match self.optimizer {
                    OptimizerKind::Adam => "adam",
                    OptimizerKind::Sgd => "sgd",
                }
                .to_string(),
            ),
            ("full_epochs", self.full_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("top_k", self.top_k.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("mec_delta", self.mec_delta.to_string()),
            ("mec_probes", self.mec_probes.to_string()),
            ("mec_probe_dim", self.mec_probe_dim.to_string()),
            ("mec_max_rounds", self.mec_max_rounds.to_string()),
            ("sur_embed_dim", self.sur_embed_dim.to_string()),
            ("sur_hidden", self.sur_hidden.to_string()),
            ("sur_learning_rate", self.sur_learning_rate.to_string()),
            (
                "sur_optimizer",
                match self.sur_optimizer {
                    SurrogateOptimizer::Adam => "adam",
                    SurrogateOptimizer::Gd => "gd",
                }
                .to_string(),
            ),
            ("sur_epochs", self.sur_epochs.to_string()),
            ("sur_refresh_epochs", self.sur_refresh_epochs.to_string()),
            ("sur_warmup", self.sur_warmup.to_string()),
            ("sur_online", self.sur_online.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn surrogate(&self) -> SurrogateConfig {
        SurrogateConfig {
            embed_dim: self.sur_embed_dim,
            hidden: self.sur_hidden,
            learning_rate: self.sur_learning_rate,
            optimizer: self.sur_optimizer,
            epochs: self.sur_epochs,
            refresh_epochs: self.sur_refresh_epochs,
            warmup: self.sur_warmup,
            online: self.sur_online,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.full_epochs.max(1),
            init_scale: self.init_scale,
            optimizer: self.optimizer,
            seed: self.seed,
            full_epochs: self.full_epochs,
            patience: self.patience,
            top_k: self.top_k,
            epsilon: self.epsilon,
        }
    }

    /// Search settings; random search uses the early-stopping fitness.
    pub fn settings(&self) -> SearchSettings {
        let strategy = match self.strategy {
            StrategyKind::EarlyStop | StrategyKind::Random => FitnessStrategy::EarlyStop {
                epochs: self.stop_epochs,
            },
            StrategyKind::Full => FitnessStrategy::Full,
            StrategyKind::Surrogate => FitnessStrategy::Surrogate(self.surrogate()),
        };
        SearchSettings {
            evolution: EvolutionConfig {
                population: self.population,
                generations: self.generations,
                gamma: self.gamma,
                strategy,
                seed: self.seed,
                parallelism: self.parallelism,
            },
            generation: GenerationConfig {
                max_depth: self.max_depth,
                constant_pool: self.constant_pool.clone(),
                seed: self.seed,
            },
            train: self.train(),
            equivalence: EquivalenceConfig {
                delta: self.mec_delta,
                probes: self.mec_probes,
                probe_dim: self.mec_probe_dim,
                max_rounds: self.mec_max_rounds,
            },
        }
    }

    pub fn random_budget(&self) -> usize {
        if self.random_budget > 0 {
            self.random_budget
        } else {
            self.settings().evolution.budget()
        }
    }

    /// Loads the configured dataset. Without a validation file, validation
    /// is carved from train with `valid_fraction`.
    pub fn load_dataset(&self) -> Result<InteractionDataset, Error> {
        let train = self.train_path.as_ref().ok_or_else(|| ConfigError::new("train_path is not set"))?;
        let test = self.test_path.as_ref().ok_or_else(|| ConfigError::new("test_path is not set"))?;
        let ds = load_adjacency(train, test, self.valid_path.as_deref())?;
        if self.valid_path.is_some() {
            Ok(ds)
        } else {
            Ok(ds.split_validation(self.valid_fraction, self.seed))
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(ConfigError::new("valid_fraction must be in (0, 1)"));
        }
        self.settings().validate()
    }
}
