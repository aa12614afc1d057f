use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Expr, LeafKind, MetricGraph, Operator, MAX_DEPTH_LIMIT};
use crate::error::ConfigError;

/// Probability that a vector slot above the last layer becomes a leaf.
pub const LEAF_PROBABILITY: f64 = 0.3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_depth: usize,
    /// Values a `smul` constant is drawn from.
    pub constant_pool: Vec<f64>,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_depth: 3,
            constant_pool: vec![-1.0, 0.5, 2.0],
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_depth < 1 || self.max_depth > MAX_DEPTH_LIMIT {
            return Err(ConfigError::new(format!(
                "max_depth must be in 1..={MAX_DEPTH_LIMIT}, got {}",
                self.max_depth
            )));
        }
        if self.constant_pool.is_empty() {
            return Err(ConfigError::new("constant_pool must not be empty"));
        }
        if self.constant_pool.iter().any(|&c| c == 0.0 || !c.is_finite()) {
            return Err(ConfigError::new(
                "constant_pool entries must be finite and non-zero",
            ));
        }
        Ok(())
    }

    /// Draws an operator from `templates`, filling in a `smul` constant.
    pub fn sample_operator<R: Rng + ?Sized>(&self, templates: &[Operator], rng: &mut R) -> Operator {
        let op = *templates.choose(rng).expect("non-empty operator set");
        self.instantiate(op, rng)
    }

    pub fn instantiate<R: Rng + ?Sized>(&self, op: Operator, rng: &mut R) -> Operator {
        match op {
            Operator::Scale(_) => Operator::Scale(*self.constant_pool.choose(rng).unwrap()),
            other => other,
        }
    }
}

/// Uniform draw from `{u, v, 1}`, used for fresh leaves during mutation.
pub fn sample_leaf<R: Rng + ?Sized>(rng: &mut R) -> LeafKind {
    *LeafKind::ALL.choose(rng).unwrap()
}

/// Generates a random valid metric graph.
///
/// The root is drawn from scalar-output operators, vector slots grow
/// operators until the depth limit (becoming leaves early with
/// [`LEAF_PROBABILITY`]), and leaves are drawn from `{u, v, 1}` without
/// replacement until both `u` and `v` have appeared.
pub fn random_generate<R: Rng + ?Sized>(
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<MetricGraph, ConfigError> {
    config.validate()?;
    loop {
        let root_ops: Vec<Operator> = if config.max_depth == 1 {
            Operator::SCALAR_OUTPUT
                .into_iter()
                .filter(|op| op.arity() == 2)
                .collect()
        } else {
            Operator::SCALAR_OUTPUT.to_vec()
        };
        let root = config.sample_operator(&root_ops, rng);
        let children = (0..root.arity())
            .map(|_| grow_vector(config, 1, rng))
            .collect();
        let mut expr = Expr::Op(root, children);
        let slots = count_leaves(&expr);
        // A single leaf cannot carry both u and v.
        if slots < 2 {
            continue;
        }
        let leaves = draw_leaves(slots, rng);
        let mut next = leaves.into_iter();
        assign_leaves(&mut expr, &mut next);
        let graph = MetricGraph::from_expr(&expr, config.max_depth);
        debug_assert!(graph.is_valid(), "{graph}");
        return Ok(graph);
    }
}

fn grow_vector<R: Rng + ?Sized>(config: &GenerationConfig, depth: usize, rng: &mut R) -> Expr {
    if depth >= config.max_depth || rng.random_bool(LEAF_PROBABILITY) {
        return Expr::Leaf(LeafKind::Ones);
    }
    let op = config.sample_operator(&Operator::VECTOR_OUTPUT, rng);
    let children = (0..op.arity())
        .map(|_| grow_vector(config, depth + 1, rng))
        .collect();
    Expr::Op(op, children)
}

fn count_leaves(expr: &Expr) -> usize {
    match expr {
        Expr::Leaf(_) => 1,
        Expr::Op(_, c) => c.iter().map(count_leaves).sum(),
    }
}

fn assign_leaves(expr: &mut Expr, leaves: &mut impl Iterator<Item = LeafKind>) {
    match expr {
        Expr::Leaf(l) => *l = leaves.next().expect("one leaf per slot"),
        Expr::Op(_, children) => {
            for c in children {
                assign_leaves(c, leaves);
            }
        }
    }
}

/// Leaf draws without replacement from `{u, v, 1}`, refilling the pool when
/// it runs dry. While coverage is incomplete and the remaining slots are only
/// just enough for the missing embeddings, the ones-vector is held back.
fn draw_leaves<R: Rng + ?Sized>(slots: usize, rng: &mut R) -> Vec<LeafKind> {
    let mut pool = LeafKind::ALL.to_vec();
    let mut covered = false;
    let mut out = Vec::with_capacity(slots);
    for k in 0..slots {
        let missing = if covered {
            0
        } else {
            pool.iter().filter(|l| **l != LeafKind::Ones).count()
        };
        let candidates: Vec<LeafKind> = if slots - k <= missing {
            pool.iter().copied().filter(|l| *l != LeafKind::Ones).collect()
        } else {
            pool.clone()
        };
        let leaf = *candidates.choose(rng).unwrap();
        pool.retain(|l| *l != leaf);
        out.push(leaf);
        if !pool.contains(&LeafKind::User) && !pool.contains(&LeafKind::Item) {
            covered = true;
        }
        if pool.is_empty() {
            pool = LeafKind::ALL.to_vec();
        }
    }
    out
}
