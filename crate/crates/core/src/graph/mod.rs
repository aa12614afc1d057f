//! Typed computational graphs for similarity metrics.
//!
//! A metric is an expression tree over the user embedding `u`, the item
//! embedding `v` and the all-ones vector. Every operator consumes vectors;
//! the root must produce a scalar. Nodes are stored in pre-order, so node `0`
//! is the root and every subtree occupies a contiguous id range.

mod generate;
mod grammar;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use generate::{random_generate, sample_leaf, GenerationConfig, LEAF_PROBABILITY};
pub use grammar::{parse_expr, parse_expr_with_depth, print_expr, ParseError};

/// Largest `max_depth` accepted anywhere in the crate.
pub const MAX_DEPTH_LIMIT: usize = 6;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueKind {
    Scalar,
    Vector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LeafKind {
    /// User embedding `u`.
    User,
    /// Item embedding `v`.
    Item,
    /// The all-ones vector.
    Ones,
}

impl LeafKind {
    pub const ALL: [LeafKind; 3] = [LeafKind::User, LeafKind::Item, LeafKind::Ones];

    pub fn symbol(self) -> &'static str {
        match self {
            LeafKind::User => "u",
            LeafKind::Item => "v",
            LeafKind::Ones => "ones",
        }
    }
}

/// The operator space. `Scale` carries its constant, fixed at creation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Operator {
    Add,
    Sub,
    InnerProduct,
    Cosine,
    Hadamard,
    L1Distance,
    L2Distance,
    /// `proj(a, b) = ((a . b) / ||a||_2) a`.
    Projection,
    L1Norm,
    L2Norm,
    Normalize,
    Scale(f64),
    Negate,
    /// Elementwise sum; the one extension beyond the base operator table.
    Sum,
}

impl Operator {
    /// Scalar-output operators, i.e. those allowed at the root.
    pub const SCALAR_OUTPUT: [Operator; 7] = [
        Operator::InnerProduct,
        Operator::Cosine,
        Operator::L1Distance,
        Operator::L2Distance,
        Operator::L1Norm,
        Operator::L2Norm,
        Operator::Sum,
    ];

    /// Vector-output operators. The `Scale` entry is a template; its constant
    /// is replaced when sampled.
    pub const VECTOR_OUTPUT: [Operator; 7] = [
        Operator::Add,
        Operator::Sub,
        Operator::Hadamard,
        Operator::Projection,
        Operator::Normalize,
        Operator::Scale(1.0),
        Operator::Negate,
    ];

    pub fn arity(self) -> usize {
        use Operator::*;
        match self {
            Add | Sub | InnerProduct | Cosine | Hadamard | L1Distance | L2Distance | Projection => 2,
            L1Norm | L2Norm | Normalize | Scale(_) | Negate | Sum => 1,
        }
    }

    pub fn output_kind(self) -> ValueKind {
        use Operator::*;
        match self {
            InnerProduct | Cosine | L1Distance | L2Distance | L1Norm | L2Norm | Sum => {
                ValueKind::Scalar
            }
            Add | Sub | Hadamard | Projection | Normalize | Scale(_) | Negate => ValueKind::Vector,
        }
    }

    /// Every operator consumes vectors only.
    pub fn input_kind(self) -> ValueKind {
        ValueKind::Vector
    }

    /// Function name in the expression grammar.
    pub fn name(self) -> &'static str {
        use Operator::*;
        match self {
            Add => "add",
            Sub => "sub",
            InnerProduct => "dot",
            Cosine => "cos",
            Hadamard => "had",
            L1Distance => "l1d",
            L2Distance => "l2d",
            Projection => "proj",
            L1Norm => "l1n",
            L2Norm => "l2n",
            Normalize => "norm",
            Scale(_) => "smul",
            Negate => "neg",
            Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        use Operator::*;
        Some(match name {
            "add" => Add,
            "sub" => Sub,
            "dot" => InnerProduct,
            "cos" => Cosine,
            "had" => Hadamard,
            "l1d" => L1Distance,
            "l2d" => L2Distance,
            "proj" => Projection,
            "l1n" => L1Norm,
            "l2n" => L2Norm,
            "norm" => Normalize,
            "smul" => Scale(1.0),
            "neg" => Negate,
            "sum" => Sum,
            _ => return None,
        })
    }

    /// True when both operators are the same variant, ignoring constants.
    pub fn same_kind(self, other: Operator) -> bool {
        std::mem::discriminant(&self) == std::mem::discriminant(&other)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NodeKind {
    Leaf(LeafKind),
    Op(Operator),
}

impl NodeKind {
    pub fn output_kind(self) -> ValueKind {
        match self {
            NodeKind::Leaf(_) => ValueKind::Vector,
            NodeKind::Op(op) => op.output_kind(),
        }
    }

    pub fn arity(self) -> usize {
        match self {
            NodeKind::Leaf(_) => 0,
            NodeKind::Op(op) => op.arity(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
}

/// Owned recursive form, used for construction and structural edits.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Leaf(LeafKind),
    Op(Operator, Vec<Expr>),
}

impl Expr {
    pub fn u() -> Expr {
        Expr::Leaf(LeafKind::User)
    }

    pub fn v() -> Expr {
        Expr::Leaf(LeafKind::Item)
    }

    pub fn ones() -> Expr {
        Expr::Leaf(LeafKind::Ones)
    }

    pub fn unary(op: Operator, a: Expr) -> Expr {
        Expr::Op(op, vec![a])
    }

    pub fn binary(op: Operator, a: Expr, b: Expr) -> Expr {
        Expr::Op(op, vec![a, b])
    }

    pub fn kind(&self) -> NodeKind {
        match self {
            Expr::Leaf(l) => NodeKind::Leaf(*l),
            Expr::Op(op, _) => NodeKind::Op(*op),
        }
    }

    pub fn children(&self) -> &[Expr] {
        match self {
            Expr::Leaf(_) => &[],
            Expr::Op(_, c) => c,
        }
    }

    /// Number of nodes in the subtree.
    pub fn size(&self) -> usize {
        1 + self.children().iter().map(Expr::size).sum::<usize>()
    }

    /// Height of the subtree; a leaf has height 0.
    pub fn height(&self) -> usize {
        self.children().iter().map(|c| c.height() + 1).max().unwrap_or(0)
    }

    /// Mutable access to the node with pre-order index `id`.
    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut Expr> {
        if id == 0 {
            return Some(self);
        }
        let mut offset = 1;
        if let Expr::Op(_, children) = self {
            for child in children.iter_mut() {
                let size = child.size();
                if id < offset + size {
                    return child.node_mut(id - offset);
                }
                offset += size;
            }
        }
        None
    }

    fn flatten_into(&self, nodes: &mut Vec<Node>) -> NodeId {
        let id = nodes.len();
        nodes.push(Node {
            kind: self.kind(),
            children: Vec::new(),
        });
        let children: Vec<NodeId> = self
            .children()
            .iter()
            .map(|c| c.flatten_into(nodes))
            .collect();
        nodes[id].children = children;
        id
    }
}

/// Which invariant a graph violates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Arity,
    ChildKind,
    RootNotScalar,
    DepthExceeded,
    MissingUser,
    MissingItem,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Rule::Arity => "child count does not match operator arity",
            Rule::ChildKind => "child output kind does not match operator input kind",
            Rule::RootNotScalar => "root output is not a scalar",
            Rule::DepthExceeded => "node deeper than max_depth",
            Rule::MissingUser => "no user-embedding leaf",
            Rule::MissingItem => "no item-embedding leaf",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, thiserror::Error)]
#[error("invalid metric graph at node {node}: {rule}")]
pub struct Violation {
    pub rule: Rule,
    pub node: NodeId,
}

/// A candidate similarity metric.
///
/// Equality is structural over the node list; `max_depth` is a generation
/// limit and does not take part in it.
#[derive(Clone, Debug)]
pub struct MetricGraph {
    nodes: Vec<Node>,
    max_depth: usize,
}

impl PartialEq for MetricGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
    }
}

impl MetricGraph {
    /// Flattens `expr` without validating it.
    pub fn from_expr(expr: &Expr, max_depth: usize) -> MetricGraph {
        let mut nodes = Vec::with_capacity(expr.size());
        expr.flatten_into(&mut nodes);
        MetricGraph { nodes, max_depth }
    }

    pub fn to_expr(&self) -> Expr {
        self.expr_at(0)
    }

    fn expr_at(&self, id: NodeId) -> Expr {
        let node = &self.nodes[id];
        match node.kind {
            NodeKind::Leaf(l) => Expr::Leaf(l),
            NodeKind::Op(op) => Expr::Op(op, node.children.iter().map(|&c| self.expr_at(c)).collect()),
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn with_max_depth(mut self, max_depth: usize) -> MetricGraph {
        self.max_depth = max_depth;
        self
    }

    /// Parent of every node; `None` for the root.
    pub fn parents(&self) -> Vec<Option<NodeId>> {
        let mut parents = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                parents[c] = Some(id);
            }
        }
        parents
    }

    pub fn depths(&self) -> Vec<usize> {
        let mut depths = vec![0; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            for &c in &node.children {
                depths[c] = depths[id] + 1;
            }
        }
        depths
    }

    /// Height of the subtree rooted at each node.
    pub fn heights(&self) -> Vec<usize> {
        let mut heights = vec![0; self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            heights[id] = self.nodes[id]
                .children
                .iter()
                .map(|&c| heights[c] + 1)
                .max()
                .unwrap_or(0);
        }
        heights
    }

    pub fn depth(&self) -> usize {
        self.depths().into_iter().max().unwrap_or(0)
    }

    pub fn count_leaf(&self, leaf: LeafKind) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.kind == NodeKind::Leaf(leaf))
            .count()
    }

    /// Intermediate nodes: neither the root nor a leaf.
    pub fn intermediate_nodes(&self) -> Vec<NodeId> {
        (1..self.nodes.len())
            .filter(|&id| matches!(self.nodes[id].kind, NodeKind::Op(_)))
            .collect()
    }

    /// Checks every graph invariant and reports the first one violated.
    pub fn validate(&self) -> Result<(), Violation> {
        let depths = self.depths();
        for (id, node) in self.nodes.iter().enumerate() {
            if node.children.len() != node.kind.arity() {
                return Err(Violation { rule: Rule::Arity, node: id });
            }
            if let NodeKind::Op(op) = node.kind {
                if node
                    .children
                    .iter()
                    .any(|&c| self.nodes[c].kind.output_kind() != op.input_kind())
                {
                    return Err(Violation { rule: Rule::ChildKind, node: id });
                }
            }
        }
        if self.nodes[0].kind.output_kind() != ValueKind::Scalar {
            return Err(Violation { rule: Rule::RootNotScalar, node: 0 });
        }
        if let Some(id) = depths.iter().position(|&d| d > self.max_depth) {
            return Err(Violation { rule: Rule::DepthExceeded, node: id });
        }
        if self.count_leaf(LeafKind::User) == 0 {
            return Err(Violation { rule: Rule::MissingUser, node: 0 });
        }
        if self.count_leaf(LeafKind::Item) == 0 {
            return Err(Violation { rule: Rule::MissingItem, node: 0 });
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

impl fmt::Display for MetricGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&print_expr(self))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(expr: Expr) -> MetricGraph {
        MetricGraph::from_expr(&expr, 3)
    }

    #[test]
    fn operator_table_arity_and_output() {
        for op in Operator::SCALAR_OUTPUT {
            assert_eq!(op.output_kind(), ValueKind::Scalar);
        }
        for op in Operator::VECTOR_OUTPUT {
            assert_eq!(op.output_kind(), ValueKind::Vector);
        }
        let binary = [
            Operator::Add,
            Operator::Sub,
            Operator::InnerProduct,
            Operator::Cosine,
            Operator::Hadamard,
            Operator::L1Distance,
            Operator::L2Distance,
            Operator::Projection,
        ];
        for op in binary {
            assert_eq!(op.arity(), 2, "{op:?}");
        }
        assert_eq!(Operator::Sum.arity(), 1);
        assert_eq!(Operator::Scale(2.0).arity(), 1);
    }

    #[test]
    fn names_round_trip() {
        for op in Operator::SCALAR_OUTPUT.into_iter().chain(Operator::VECTOR_OUTPUT) {
            assert!(Operator::from_name(op.name()).unwrap().same_kind(op));
        }
    }

    #[test]
    fn minimal_metric_is_valid() {
        let dot = g(Expr::binary(Operator::InnerProduct, Expr::u(), Expr::v()));
        assert_eq!(dot.validate(), Ok(()));
    }

    #[test]
    fn vector_root_rejected() {
        let add = g(Expr::binary(Operator::Add, Expr::u(), Expr::v()));
        assert_eq!(
            add.validate(),
            Err(Violation { rule: Rule::RootNotScalar, node: 0 })
        );
    }

    #[test]
    fn missing_item_leaf_rejected() {
        let graph = g(Expr::binary(Operator::InnerProduct, Expr::u(), Expr::ones()));
        assert_eq!(graph.validate().unwrap_err().rule, Rule::MissingItem);
    }

    #[test]
    fn scalar_child_rejected() {
        let inner = Expr::binary(Operator::InnerProduct, Expr::u(), Expr::v());
        let graph = g(Expr::unary(Operator::L2Norm, inner));
        assert_eq!(
            graph.validate(),
            Err(Violation { rule: Rule::ChildKind, node: 0 })
        );
    }

    #[test]
    fn depth_limit_enforced() {
        let deep = Expr::binary(
            Operator::InnerProduct,
            Expr::unary(Operator::Negate, Expr::unary(Operator::Negate, Expr::u())),
            Expr::v(),
        );
        let graph = MetricGraph::from_expr(&deep, 2);
        assert_eq!(
            graph.validate(),
            Err(Violation { rule: Rule::DepthExceeded, node: 3 })
        );
        assert!(graph.with_max_depth(3).is_valid());
    }

    #[test]
    fn preorder_layout_and_round_trip() {
        let expr = Expr::binary(
            Operator::InnerProduct,
            Expr::unary(Operator::Normalize, Expr::u()),
            Expr::v(),
        );
        let graph = g(expr.clone());
        assert_eq!(graph.len(), 4);
        assert_eq!(graph.node(0).children, vec![1, 3]);
        assert_eq!(graph.parents(), vec![None, Some(0), Some(1), Some(0)]);
        assert_eq!(graph.depths(), vec![0, 1, 2, 1]);
        assert_eq!(graph.heights(), vec![2, 1, 0, 0]);
        assert_eq!(graph.intermediate_nodes(), vec![1]);
        assert_eq!(graph.to_expr(), expr);
    }

    #[test]
    fn expr_node_mut_addresses_preorder() {
        let mut expr = Expr::binary(
            Operator::InnerProduct,
            Expr::unary(Operator::Normalize, Expr::u()),
            Expr::v(),
        );
        assert_eq!(expr.node_mut(2).cloned(), Some(Expr::u()));
        assert_eq!(expr.node_mut(3).cloned(), Some(Expr::v()));
        assert!(expr.node_mut(4).is_none());
    }
}
