//! Probe-based metric equivalence.
//!
//! Two metrics are equivalent when their scores on a fixed set of random
//! embedding pairs all agree within an absolute tolerance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::eval::{forward, EvalWorkspace};
use crate::graph::{random_generate, GenerationConfig, MetricGraph};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub delta: f64,
    pub probes: usize,
    pub probe_dim: usize,
    /// Replacement rounds in [`dedup`] before leftovers are dropped.
    pub max_rounds: usize,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        EquivalenceConfig {
            delta: 1e-6,
            probes: 64,
            probe_dim: 8,
            max_rounds: 10,
        }
    }
}

impl EquivalenceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.delta > 0.0) {
            return Err(ConfigError::new("mec_delta must be positive"));
        }
        if self.probes == 0 || self.probe_dim == 0 {
            return Err(ConfigError::new("mec_probes and mec_dim must be at least 1"));
        }
        Ok(())
    }
}

/// Fixed embedding pairs shared by every equivalence decision in a run.
#[derive(Clone, Debug)]
pub struct ProbeSet {
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    dim: usize,
    seed: u64,
}

impl ProbeSet {
    /// Draws `count` pairs of i.i.d. standard normal `dim`-vectors.
    pub fn generate(count: usize, dim: usize, seed: u64) -> ProbeSet {
        assert!(count >= 1 && dim >= 1);
        let mut rng = rng::stream(seed, &[0x9b0e]);
        let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let pairs = (0..count).map(|_| (draw(), draw())).collect();
        ProbeSet { pairs, dim, seed }
    }

    pub fn from_pairs(pairs: Vec<(Vec<f64>, Vec<f64>)>) -> ProbeSet {
        assert!(!pairs.is_empty());
        let dim = pairs[0].0.len();
        assert!(pairs.iter().all(|(u, v)| u.len() == dim && v.len() == dim));
        ProbeSet { pairs, dim, seed: 0 }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    /// Set when any probe score was non-finite or evaluation failed.
    pub non_finite: bool,
}

pub fn score_vector(graph: &MetricGraph, probes: &ProbeSet) -> ScoreVector {
    let mut ws = EvalWorkspace::new(probes.dim);
    let mut non_finite = false;
    let scores = probes
        .pairs
        .iter()
        .map(|(u, v)| match forward(graph, u, v, &mut ws) {
            Ok(s) => s,
            Err(_) => {
                non_finite = true;
                f64::NAN
            }
        })
        .collect();
    ScoreVector { scores, non_finite }
}

/// Tolerance test on precomputed score vectors. Flagged vectors are never
/// equivalent to anything, themselves included.
pub fn scores_equivalent(a: &ScoreVector, b: &ScoreVector, delta: f64) -> bool {
    !a.non_finite
        && !b.non_finite
        && a.scores.iter().zip(&b.scores).all(|(x, y)| (x - y).abs() < delta)
}

pub fn equivalent(a: &MetricGraph, b: &MetricGraph, probes: &ProbeSet, config: &EquivalenceConfig) -> bool {
    scores_equivalent(&score_vector(a, probes), &score_vector(b, probes), config.delta)
}

/// Outcome of a deduplication pass.
#[derive(Clone, Debug)]
pub struct Dedup {
    pub graphs: Vec<MetricGraph>,
    /// Whether each entry of `graphs` was freshly generated.
    pub fresh: Vec<bool>,
    /// Position of each entry of `graphs` in the input.
    pub index: Vec<usize>,
    /// Replacements made across all rounds.
    pub replaced: usize,
    /// Graphs dropped after the round budget ran out.
    pub dropped: usize,
}

/// Removes equivalent pairs from `population`, replacing one member of each
/// pair (chosen uniformly) by a fresh random graph. Non-finite graphs are
/// replaced too. After `config.max_rounds` rounds, any remaining offenders
/// are dropped.
pub fn dedup<R: Rng + ?Sized>(
    population: Vec<MetricGraph>,
    probes: &ProbeSet,
    config: &EquivalenceConfig,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Dedup {
    dedup_against(&[], population, probes, config, gen, rng)
}

/// Like [`dedup`], but `fixed` members are never replaced: any candidate
/// equivalent to one of them is itself replaced.
pub fn dedup_against<R: Rng + ?Sized>(
    fixed: &[MetricGraph],
    candidates: Vec<MetricGraph>,
    probes: &ProbeSet,
    config: &EquivalenceConfig,
    gen: &GenerationConfig,
    rng: &mut R,
) -> Dedup {
    let fixed_scores: Vec<ScoreVector> = fixed.iter().map(|g| score_vector(g, probes)).collect();
    let mut graphs = candidates;
    let mut fresh = vec![false; graphs.len()];
    let mut index: Vec<usize> = (0..graphs.len()).collect();
    let mut scores: Vec<ScoreVector> = graphs.iter().map(|g| score_vector(g, probes)).collect();
    let mut replaced = 0;

    for _ in 0..config.max_rounds {
        let doomed = find_doomed(&fixed_scores, &scores, config.delta, rng);
        if doomed.is_empty() {
            return Dedup {
                graphs,
                fresh,
                index,
                replaced,
                dropped: 0,
            };
        }
        for idx in doomed {
            graphs[idx] = random_generate(gen, rng).expect("validated generation config");
            scores[idx] = score_vector(&graphs[idx], probes);
            fresh[idx] = true;
            replaced += 1;
        }
    }

    let mut doomed = find_doomed(&fixed_scores, &scores, config.delta, rng);
    doomed.sort_unstable();
    let dropped = doomed.len();
    for idx in doomed.into_iter().rev() {
        graphs.remove(idx);
        fresh.remove(idx);
        index.remove(idx);
    }
    Dedup {
        graphs,
        fresh,
        index,
        replaced,
        dropped,
    }
}

/// Indices to replace this round. Candidates are scanned in order against
/// the fixed set and the kept set; for an equivalent kept pair, a coin flip
/// decides which of the two goes.
fn find_doomed<R: Rng + ?Sized>(
    fixed: &[ScoreVector],
    scores: &[ScoreVector],
    delta: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    let mut doomed = Vec::new();
    for (i, s) in scores.iter().enumerate() {
        if s.non_finite || fixed.iter().any(|f| scores_equivalent(f, s, delta)) {
            doomed.push(i);
            continue;
        }
        match kept.iter().position(|&k| scores_equivalent(&scores[k], s, delta)) {
            None => kept.push(i),
            Some(pos) => {
                if rng.random_bool(0.5) {
                    doomed.push(kept[pos]);
                    kept[pos] = i;
                } else {
                    doomed.push(i);
                }
            }
        }
    }
    doomed
}
