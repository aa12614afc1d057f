//! Forward evaluation and reverse-mode gradients of metric graphs.
//!
//! Node values live in a flat workspace, one `d`-wide slot per node (scalars
//! use the first entry). Because nodes are stored in pre-order, children
//! always have larger ids than their parent: the forward pass walks ids in
//! reverse and the backward pass walks them forward.

use crate::error::EvalError;
use crate::graph::{LeafKind, MetricGraph, NodeKind, Operator, Rule, ValueKind, Violation};

pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Per-caller scratch space for [`forward`] and [`backward`].
#[derive(Clone, Debug)]
pub struct EvalWorkspace {
    dim: usize,
    epsilon: f64,
    nodes: usize,
    values: Vec<f64>,
    adjoints: Vec<f64>,
}

impl EvalWorkspace {
    pub fn new(dim: usize) -> Self {
        Self::with_epsilon(dim, DEFAULT_EPSILON)
    }

    pub fn with_epsilon(dim: usize, epsilon: f64) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive");
        EvalWorkspace {
            dim,
            epsilon,
            nodes: 0,
            values: Vec::new(),
            adjoints: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn prepare(&mut self, nodes: usize, dim: usize) {
        self.dim = dim;
        self.nodes = nodes;
        let len = nodes * dim;
        if self.values.len() < len {
            self.values.resize(len, 0.0);
            self.adjoints.resize(len, 0.0);
        }
    }

    /// Forward value of node `id` from the last pass.
    pub fn value(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }
}

fn check_types(graph: &MetricGraph) -> Result<(), Violation> {
    for (id, node) in graph.nodes().iter().enumerate() {
        if node.children.len() != node.kind.arity() {
            return Err(Violation { rule: Rule::Arity, node: id });
        }
        if node
            .children
            .iter()
            .any(|&c| graph.node(c).kind.output_kind() != ValueKind::Vector)
        {
            return Err(Violation { rule: Rule::ChildKind, node: id });
        }
    }
    if graph.node(0).kind.output_kind() != ValueKind::Scalar {
        return Err(Violation { rule: Rule::RootNotScalar, node: 0 });
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Evaluates `SM(u, v)`.
pub fn forward(
    graph: &MetricGraph,
    u: &[f64],
    v: &[f64],
    ws: &mut EvalWorkspace,
) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::DimensionMismatch {
            user: u.len(),
            item: v.len(),
        });
    }
    check_types(graph)?;
    let d = u.len();
    let eps = ws.epsilon;
    ws.prepare(graph.len(), d);
    let values = &mut ws.values;
    for id in (0..graph.len()).rev() {
        let node = graph.node(id);
        let (head, tail) = values.split_at_mut((id + 1) * d);
        let out = &mut head[id * d..];
        let child = |k: usize| {
            let c = node.children[k] - id - 1;
            &tail[c * d..(c + 1) * d]
        };
        match node.kind {
            NodeKind::Leaf(LeafKind::User) => out.copy_from_slice(u),
            NodeKind::Leaf(LeafKind::Item) => out.copy_from_slice(v),
            NodeKind::Leaf(LeafKind::Ones) => out.fill(1.0),
            NodeKind::Op(op) => apply(op, node.children.len(), child, out, eps),
        }
        let scalar = node.kind.output_kind() == ValueKind::Scalar;
        let produced = if scalar { &out[..1] } else { &out[..] };
        if produced.iter().any(|x| !x.is_finite()) {
            return Err(EvalError::NonFinite { node: id });
        }
    }
    Ok(values[0])
}

fn apply<'a>(op: Operator, arity: usize, child: impl Fn(usize) -> &'a [f64], out: &mut [f64], eps: f64) {
    let a = child(0);
    let b = if arity == 2 { child(1) } else { a };
    match op {
        Operator::Add => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = x + y),
        Operator::Sub => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = x - y),
        Operator::Hadamard => out.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (x, y))| *o = x * y),
        Operator::InnerProduct => out[0] = dot(a, b),
        Operator::Cosine => out[0] = dot(a, b) / (norm(a).max(eps) * norm(b).max(eps)),
        Operator::L1Distance => out[0] = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Operator::L2Distance => {
            out[0] = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
        }
        Operator::Projection => {
            let t = dot(a, b) / norm(a).max(eps);
            out.iter_mut().zip(a).for_each(|(o, x)| *o = t * x);
        }
        Operator::L1Norm => out[0] = a.iter().map(|x| x.abs()).sum(),
        Operator::L2Norm => out[0] = norm(a),
        Operator::Normalize => {
            let n = norm(a).max(eps);
            out.iter_mut().zip(a).for_each(|(o, x)| *o = x / n);
        }
        Operator::Scale(c) => out.iter_mut().zip(a).for_each(|(o, x)| *o = c * x),
        Operator::Negate => out.iter_mut().zip(a).for_each(|(o, x)| *o = -x),
        Operator::Sum => out[0] = a.iter().sum(),
    }
}

/// Gradients of `SM(u, v)` with respect to `u` and `v`, written into
/// `grad_u` and `grad_v`. Runs the forward pass first.
pub fn backward_into(
    graph: &MetricGraph,
    u: &[f64],
    v: &[f64],
    ws: &mut EvalWorkspace,
    grad_u: &mut [f64],
    grad_v: &mut [f64],
) -> Result<f64, EvalError> {
    let score = forward(graph, u, v, ws)?;
    let d = u.len();
    let eps = ws.epsilon;
    let n = graph.len();
    let values = &ws.values;
    let adjoints = &mut ws.adjoints;
    adjoints[..n * d].fill(0.0);
    adjoints[0] = 1.0;
    grad_u.fill(0.0);
    grad_v.fill(0.0);
    for id in 0..n {
        let node = graph.node(id);
        let (head, tail) = adjoints.split_at_mut((id + 1) * d);
        let g = &head[id * d..];
        let val = |k: usize| {
            let c = node.children[k];
            &values[c * d..(c + 1) * d]
        };
        match node.kind {
            NodeKind::Leaf(LeafKind::User) => add_into(grad_u, g),
            NodeKind::Leaf(LeafKind::Item) => add_into(grad_v, g),
            NodeKind::Leaf(LeafKind::Ones) => {}
            NodeKind::Op(op) => {
                let a = val(0);
                let b = if node.children.len() == 2 { val(1) } else { a };
                let off_a = (node.children[0] - id - 1) * d;
                if node.children.len() == 2 {
                    let off_b = (node.children[1] - id - 1) * d;
                    // Children are disjoint subtrees, so their slots never overlap.
                    let (ga, gb) = two_slots(tail, off_a, off_b, d);
                    binary_adjoint(op, g, a, b, ga, gb, eps);
                } else {
                    unary_adjoint(op, g, a, &mut tail[off_a..off_a + d], eps);
                }
            }
        }
    }
    Ok(score)
}

/// Convenience wrapper returning freshly allocated gradients.
pub fn backward(
    graph: &MetricGraph,
    u: &[f64],
    v: &[f64],
    ws: &mut EvalWorkspace,
) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
    let mut gu = vec![0.0; u.len()];
    let mut gv = vec![0.0; v.len()];
    backward_into(graph, u, v, ws, &mut gu, &mut gv)?;
    Ok((gu, gv))
}

fn two_slots(buf: &mut [f64], a: usize, b: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a + d <= b || b + d <= a);
    if a < b {
        let (lo, hi) = buf.split_at_mut(b);
        (&mut lo[a..a + d], &mut hi[..d])
    } else {
        let (lo, hi) = buf.split_at_mut(a);
        let (gb, ga) = (&mut lo[b..b + d], &mut hi[..d]);
        (ga, gb)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn binary_adjoint(
    op: Operator,
    g: &[f64],
    a: &[f64],
    b: &[f64],
    ga: &mut [f64],
    gb: &mut [f64],
    eps: f64,
) {
    let s = g[0];
    match op {
        Operator::Add => {
            add_into(ga, g);
            add_into(gb, g);
        }
        Operator::Sub => {
            add_into(ga, g);
            gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
        }
        Operator::Hadamard => {
            for k in 0..g.len() {
                ga[k] += g[k] * b[k];
                gb[k] += g[k] * a[k];
            }
        }
        Operator::InnerProduct => {
            for k in 0..a.len() {
                ga[k] += s * b[k];
                gb[k] += s * a[k];
            }
        }
        Operator::Cosine => {
            let (ra, rb) = (norm(a), norm(b));
            let (na, nb) = (ra.max(eps), rb.max(eps));
            let ab = dot(a, b);
            let scale = s / (na * nb);
            let ca = if ra > eps { ab / (na * na) } else { 0.0 };
            let cb = if rb > eps { ab / (nb * nb) } else { 0.0 };
            for k in 0..a.len() {
                ga[k] += scale * (b[k] - ca * a[k]);
                gb[k] += scale * (a[k] - cb * b[k]);
            }
        }
        Operator::L1Distance => {
            for k in 0..a.len() {
                let t = s * sign(a[k] - b[k]);
                ga[k] += t;
                gb[k] -= t;
            }
        }
        Operator::L2Distance => {
            let r = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let scale = s / r.max(eps);
            for k in 0..a.len() {
                let t = scale * (a[k] - b[k]);
                ga[k] += t;
                gb[k] -= t;
            }
        }
        Operator::Projection => {
            let ra = norm(a);
            let na = ra.max(eps);
            let ab = dot(a, b);
            let t = ab / na;
            let ga_dot = dot(g, a);
            let corr = if ra > eps { ab / (na * na * na) } else { 0.0 };
            for k in 0..a.len() {
                ga[k] += t * g[k] + ga_dot * (b[k] / na - corr * a[k]);
                gb[k] += ga_dot * a[k] / na;
            }
        }
        _ => unreachable!("{op:?} is not binary"),
    }
}

fn unary_adjoint(op: Operator, g: &[f64], a: &[f64], ga: &mut [f64], eps: f64) {
    let s = g[0];
    match op {
        Operator::L1Norm => ga.iter_mut().zip(a).for_each(|(x, y)| *x += s * sign(*y)),
        Operator::L2Norm => {
            let scale = s / norm(a).max(eps);
            ga.iter_mut().zip(a).for_each(|(x, y)| *x += scale * y);
        }
        Operator::Normalize => {
            let r = norm(a);
            let n = r.max(eps);
            let corr = if r > eps { dot(a, g) / (n * n * n) } else { 0.0 };
            for k in 0..a.len() {
                ga[k] += g[k] / n - corr * a[k];
            }
        }
        Operator::Scale(c) => ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y),
        Operator::Negate => ga.iter_mut().zip(g).for_each(|(x, y)| *x -= y),
        Operator::Sum => ga.iter_mut().for_each(|x| *x += s),
        _ => unreachable!("{op:?} is not unary"),
    }
}

/// Row-wise [`forward`] over row-major `n x dim` matrices.
pub fn forward_batch(
    graph: &MetricGraph,
    users: &[f64],
    items: &[f64],
    dim: usize,
    ws: &mut EvalWorkspace,
) -> Result<Vec<f64>, EvalError> {
    if users.len() != items.len() || dim == 0 || users.len() % dim != 0 {
        return Err(EvalError::DimensionMismatch {
            user: users.len(),
            item: items.len(),
        });
    }
    users
        .chunks_exact(dim)
        .zip(items.chunks_exact(dim))
        .map(|(u, v)| forward(graph, u, v, ws))
        .collect()
}
