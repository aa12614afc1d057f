//! Insertion, deletion and replacement mutations.
//!
//! Each random mutation retries up to [`MUTATION_RETRIES`] times over node
//! and operator choices and returns the input unchanged, flagged as a no-op,
//! if no attempt produced a valid graph.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{sample_leaf, Expr, GenerationConfig, LeafKind, MetricGraph, NodeId, NodeKind, Operator};

pub const MUTATION_RETRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MutationKind {
    Insertion,
    Deletion,
    Replacement,
}

impl MutationKind {
    pub const ALL: [MutationKind; 3] = [MutationKind::Insertion, MutationKind::Deletion, MutationKind::Replacement];

    pub fn name(self) -> &'static str {
        match self {
            MutationKind::Insertion => "insertion",
            MutationKind::Deletion => "deletion",
            MutationKind::Replacement => "replacement",
        }
    }

    pub fn from_name(name: &str) -> Option<MutationKind> {
        MutationKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mutated {
    pub graph: MetricGraph,
    /// True when every attempt failed and `graph` is the unchanged input.
    pub noop: bool,
}

impl Mutated {
    fn noop(graph: &MetricGraph) -> Mutated {
        Mutated {
            graph: graph.clone(),
            noop: true,
        }
    }
}

pub fn mutate<R: Rng + ?Sized>(kind: MutationKind, graph: &MetricGraph, gen: &GenerationConfig, rng: &mut R) -> Mutated {
    match kind {
        MutationKind::Insertion => mutate_insertion(graph, gen, rng),
        MutationKind::Deletion => mutate_deletion(graph, rng),
        MutationKind::Replacement => mutate_replacement(graph, gen, rng),
    }
}

fn rebuild(graph: &MetricGraph, edit: impl FnOnce(&mut Expr)) -> MetricGraph {
    let mut expr = graph.to_expr();
    edit(&mut expr);
    MetricGraph::from_expr(&expr, graph.max_depth())
}

/// Places `op` between `node` and its parent. For a binary `op` the second
/// operand is the leaf `extra`; `extra_first` puts it before `node`.
pub fn insert_above(
    graph: &MetricGraph,
    node: NodeId,
    op: Operator,
    extra: Option<LeafKind>,
    extra_first: bool,
) -> MetricGraph {
    assert!(node > 0 && node < graph.len(), "insertion target must be a non-root node");
    rebuild(graph, |expr| {
        let slot = expr.node_mut(node).expect("node in range");
        let old = std::mem::replace(slot, Expr::ones());
        let children = match (op.arity(), extra) {
            (1, _) => vec![old],
            (2, Some(leaf)) if extra_first => vec![Expr::Leaf(leaf), old],
            (2, Some(leaf)) => vec![old, Expr::Leaf(leaf)],
            _ => panic!("binary insertion needs an extra leaf"),
        };
        *slot = Expr::Op(op, children);
    })
}

/// Replaces operator `node` with its child number `keep`.
pub fn delete_node(graph: &MetricGraph, node: NodeId, keep: usize) -> MetricGraph {
    rebuild(graph, |expr| {
        let slot = expr.node_mut(node).expect("node in range");
        let Expr::Op(_, children) = std::mem::replace(slot, Expr::ones()) else {
            panic!("deletion target must be an operator");
        };
        *slot = children.into_iter().nth(keep).expect("child in range");
    })
}

/// Swaps the operator at `node` for `op`. When `op` needs one more operand
/// the leaf `extra` is appended; when it needs one fewer, child `drop` is
/// removed.
pub fn replace_operator(
    graph: &MetricGraph,
    node: NodeId,
    op: Operator,
    extra: Option<LeafKind>,
    drop: Option<usize>,
) -> MetricGraph {
    rebuild(graph, |expr| {
        let Some(Expr::Op(old, children)) = expr.node_mut(node) else {
            panic!("replacement target must be an operator");
        };
        *old = op;
        while children.len() > op.arity() {
            children.remove(drop.unwrap_or(children.len() - 1).min(children.len() - 1));
        }
        while children.len() < op.arity() {
            children.push(Expr::Leaf(extra.expect("arity raise needs an extra leaf")));
        }
    })
}

/// Operators that can take a `child`-kind input and fill a slot expecting
/// `slot`-kind output.
fn compatible(child: NodeKind, slot_output: crate::graph::ValueKind) -> Vec<Operator> {
    Operator::SCALAR_OUTPUT
        .into_iter()
        .chain(Operator::VECTOR_OUTPUT)
        .filter(|op| op.input_kind() == child.output_kind() && op.output_kind() == slot_output)
        .collect()
}

pub fn mutate_insertion<R: Rng + ?Sized>(graph: &MetricGraph, gen: &GenerationConfig, rng: &mut R) -> Mutated {
    if graph.len() < 2 {
        return Mutated::noop(graph);
    }
    // Only nodes whose subtree can sink one level without breaking the depth
    // limit are candidates.
    let (depths, heights) = (graph.depths(), graph.heights());
    let room: Vec<usize> = (1..graph.len())
        .filter(|&n| depths[n] + heights[n] < graph.max_depth())
        .collect();
    if room.is_empty() {
        return Mutated::noop(graph);
    }
    let parents = graph.parents();
    for _ in 0..MUTATION_RETRIES {
        let node = *room.choose(rng).unwrap();
        let parent = parents[node].expect("non-root node has a parent");
        let NodeKind::Op(parent_op) = graph.node(parent).kind else {
            unreachable!("parents are operators")
        };
        let ops = compatible(graph.node(node).kind, parent_op.input_kind());
        let Some(&template) = ops.choose(rng) else {
            continue;
        };
        let op = gen.instantiate(template, rng);
        let (extra, first) = if op.arity() == 2 {
            (Some(sample_leaf(rng)), rng.random_bool(0.5))
        } else {
            (None, false)
        };
        let out = insert_above(graph, node, op, extra, first);
        if out.is_valid() {
            return Mutated { graph: out, noop: false };
        }
    }
    Mutated::noop(graph)
}

pub fn mutate_deletion<R: Rng + ?Sized>(graph: &MetricGraph, rng: &mut R) -> Mutated {
    let intermediate = graph.intermediate_nodes();
    if intermediate.is_empty() {
        return Mutated::noop(graph);
    }
    let parents = graph.parents();
    for _ in 0..MUTATION_RETRIES {
        let node = *intermediate.choose(rng).unwrap();
        let parent = parents[node].expect("intermediate node has a parent");
        let NodeKind::Op(parent_op) = graph.node(parent).kind else {
            unreachable!("parents are operators")
        };
        let fits: Vec<usize> = graph
            .node(node)
            .children
            .iter()
            .enumerate()
            .filter(|(_, &c)| graph.node(c).kind.output_kind() == parent_op.input_kind())
            .map(|(k, _)| k)
            .collect();
        let Some(&keep) = fits.choose(rng) else {
            continue;
        };
        let out = delete_node(graph, node, keep);
        if out.is_valid() {
            return Mutated { graph: out, noop: false };
        }
    }
    Mutated::noop(graph)
}

pub fn mutate_replacement<R: Rng + ?Sized>(graph: &MetricGraph, gen: &GenerationConfig, rng: &mut R) -> Mutated {
    let targets: Vec<NodeId> = (1..graph.len())
        .filter(|&id| matches!(graph.node(id).kind, NodeKind::Op(_)))
        .collect();
    if targets.is_empty() {
        return Mutated::noop(graph);
    }
    for _ in 0..MUTATION_RETRIES {
        let node = *targets.choose(rng).unwrap();
        let NodeKind::Op(old) = graph.node(node).kind else {
            unreachable!()
        };
        let templates: Vec<Operator> = Operator::SCALAR_OUTPUT
            .into_iter()
            .chain(Operator::VECTOR_OUTPUT)
            .filter(|op| op.output_kind() == old.output_kind() && op.input_kind() == old.input_kind())
            .collect();
        let op = gen.sample_operator(&templates, rng);
        if op == old {
            continue;
        }
        let extra = (op.arity() > old.arity()).then(|| sample_leaf(rng));
        let drop = (op.arity() < old.arity()).then(|| rng.random_range(0..old.arity()));
        let out = replace_operator(graph, node, op, extra, drop);
        if out.is_valid() {
            return Mutated { graph: out, noop: false };
        }
    }
    Mutated::noop(graph)
}
