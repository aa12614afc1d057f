//! Sequence-to-one fitness regressor.
//!
//! A metric graph is linearized into operator/leaf tokens in pre-order,
//! embedded, fed through a single-layer LSTM, and the hidden states are
//! averaged over time and mapped to a fitness estimate by an affine head.
//! Training minimizes the mean squared error against logged fitness values
//! full-batch, with Adam (the default) or plain gradient descent.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, ConfigError, Error, SurrogateError};
use crate::graph::{print_expr, Expr, LeafKind, MetricGraph, NodeKind, Operator};
use crate::rng;

pub type Token = usize;

pub const START: Token = 0;
pub const END: Token = 1;

/// Token set: start, end, one per operator (one per constant for `smul`),
/// one per leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    kinds: Vec<Option<NodeKind>>,
}

impl Vocabulary {
    pub fn new(constant_pool: &[f64]) -> Self {
        let mut kinds = vec![None, None];
        for op in Operator::SCALAR_OUTPUT.into_iter().chain(Operator::VECTOR_OUTPUT) {
            match op {
                Operator::Scale(_) => {
                    kinds.extend(constant_pool.iter().map(|&c| Some(NodeKind::Op(Operator::Scale(c)))))
                }
                other => kinds.push(Some(NodeKind::Op(other))),
            }
        }
        kinds.extend(LeafKind::ALL.iter().map(|&l| Some(NodeKind::Leaf(l))));
        Vocabulary { kinds }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn token(&self, kind: NodeKind) -> Result<Token, SurrogateError> {
        self.kinds
            .iter()
            .position(|k| *k == Some(kind))
            .ok_or_else(|| SurrogateError::UnknownToken(node_name(kind)))
    }

    pub fn kind(&self, token: Token) -> Option<NodeKind> {
        self.kinds.get(token).copied().flatten()
    }

    pub fn name(&self, token: Token) -> String {
        match token {
            START => "<start>".into(),
            END => "<end>".into(),
            t => self.kind(t).map(node_name).unwrap_or_else(|| format!("<{t}>")),
        }
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.len()).map(|t| self.name(t)).collect()
    }
}

fn node_name(kind: NodeKind) -> String {
    match kind {
        NodeKind::Leaf(l) => l.symbol().to_string(),
        NodeKind::Op(Operator::Scale(c)) => format!("smul:{c}"),
        NodeKind::Op(op) => op.name().to_string(),
    }
}

/// Pre-order token sequence wrapped in start/end tokens.
pub fn graph_to_sequence(graph: &MetricGraph, vocab: &Vocabulary) -> Result<Vec<Token>, SurrogateError> {
    let mut seq = Vec::with_capacity(graph.len() + 2);
    seq.push(START);
    for node in graph.nodes() {
        seq.push(vocab.token(node.kind)?);
    }
    seq.push(END);
    Ok(seq)
}

/// Inverse of [`graph_to_sequence`]; arity is implied by each token.
pub fn decode_sequence(seq: &[Token], vocab: &Vocabulary, max_depth: usize) -> Result<MetricGraph, SurrogateError> {
    fn build(tokens: &mut std::slice::Iter<'_, Token>, vocab: &Vocabulary) -> Result<Expr, SurrogateError> {
        let t = *tokens.next().ok_or(SurrogateError::MalformedSequence)?;
        match vocab.kind(t).ok_or(SurrogateError::MalformedSequence)? {
            NodeKind::Leaf(l) => Ok(Expr::Leaf(l)),
            NodeKind::Op(op) => {
                let children = (0..op.arity())
                    .map(|_| build(tokens, vocab))
                    .collect::<Result<_, _>>()?;
                Ok(Expr::Op(op, children))
            }
        }
    }
    match seq {
        [START, body @ .., END] => {
            let mut tokens = body.iter();
            let expr = build(&mut tokens, vocab)?;
            if tokens.next().is_some() {
                return Err(SurrogateError::MalformedSequence);
            }
            Ok(MetricGraph::from_expr(&expr, max_depth))
        }
        _ => Err(SurrogateError::MalformedSequence),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateOptimizer {
    Gd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub optimizer: SurrogateOptimizer,
    /// Epochs for the first fit after warmup.
    pub epochs: usize,
    /// Epochs for each later refresh.
    pub refresh_epochs: usize,
    /// Fully evaluated candidates collected before the surrogate predicts.
    pub warmup: usize,
    /// Refresh the surrogate every generation; otherwise train once.
    pub online: bool,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            embed_dim: 16,
            hidden: 32,
            learning_rate: 1e-2,
            optimizer: SurrogateOptimizer::Adam,
            epochs: 300,
            refresh_epochs: 50,
            warmup: 50,
            online: true,
            seed: 0,
        }
    }
}

impl SurrogateConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.embed_dim == 0 || self.hidden == 0 {
            return Err(ConfigError::new("surrogate dimensions must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(ConfigError::new("surrogate learning rate must be positive"));
        }
        if self.warmup < 2 {
            return Err(ConfigError::new("surrogate warmup must be at least 2"));
        }
        Ok(())
    }
}

/// Logged `(graph, fitness)` pairs; non-finite fitness is never stored.
#[derive(Clone, Debug, Default)]
pub struct SurrogateDataset {
    pub graphs: Vec<MetricGraph>,
    pub sequences: Vec<Vec<Token>>,
    pub fitness: Vec<f64>,
}

impl SurrogateDataset {
    pub fn len(&self) -> usize {
        self.fitness.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fitness.is_empty()
    }

    /// Returns false (and stores nothing) for non-finite fitness.
    pub fn push(&mut self, graph: &MetricGraph, fitness: f64, vocab: &Vocabulary) -> Result<bool, SurrogateError> {
        if !fitness.is_finite() {
            return Ok(false);
        }
        self.sequences.push(graph_to_sequence(graph, vocab)?);
        self.graphs.push(graph.clone());
        self.fitness.push(fitness);
        Ok(true)
    }

    /// One `expression<TAB>fitness` line per pair.
    pub fn write_log(&self, path: &Path) -> Result<(), Error> {
        let mut text = String::new();
        for (g, y) in self.graphs.iter().zip(&self.fitness) {
            text.push_str(&format!("{}\t{y}\n", print_expr(g)));
        }
        fs::write(path, text).map_err(io_err(path))
    }
}

/// Parameter layout inside the flat vector.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Layout {
    vocab: usize,
    e: usize,
    h: usize,
}

impl Layout {
    fn emb(&self) -> usize {
        0
    }
    fn w(&self) -> usize {
        self.vocab * self.e
    }
    /// Row width of the gate matrix: `[x; h_prev]`.
    fn cols(&self) -> usize {
        self.e + self.h
    }
    fn b(&self) -> usize {
        self.w() + 4 * self.h * self.cols()
    }
    fn head_w(&self) -> usize {
        self.b() + 4 * self.h
    }
    fn head_b(&self) -> usize {
        self.head_w() + self.h
    }
    fn total(&self) -> usize {
        self.head_b() + 1
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    vocabulary: Vec<String>,
    constant_pool: Vec<f64>,
    embed_dim: usize,
    hidden: usize,
    target_mean: f64,
    target_scale: f64,
    fitted: bool,
    n_params: usize,
    params_file: String,
}

/// LSTM regressor. Gate order in the stacked matrix is input, forget, cell,
/// output.
#[derive(Clone, Debug)]
pub struct SurrogateModel {
    vocab: Vocabulary,
    constant_pool: Vec<f64>,
    layout: Layout,
    params: Vec<f64>,
    /// Targets are standardized with these once, at the first fit.
    target_mean: f64,
    target_scale: f64,
    fitted: bool,
    adam_m: Vec<f64>,
    adam_v: Vec<f64>,
    adam_t: i32,
}

/// Per-step activations kept for backpropagation.
struct Tape {
    xs: Vec<Token>,
    /// h_0..h_T, each of size h.
    hs: Vec<f64>,
    /// c_0..c_T.
    cs: Vec<f64>,
    /// Gate activations per step: i, f, g, o (4h).
    gates: Vec<f64>,
}

/// Mean of `h_1..h_T`.
fn mean_hidden(hs: &[f64], h: usize, steps: usize) -> Vec<f64> {
    let mut out = vec![0.0; h];
    for t in 1..=steps {
        out.iter_mut().zip(&hs[t * h..(t + 1) * h]).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= steps.max(1) as f64);
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SurrogateModel {
    pub fn new(constant_pool: &[f64], embed_dim: usize, hidden: usize, seed: u64) -> Self {
        let vocab = Vocabulary::new(constant_pool);
        let layout = Layout {
            vocab: vocab.len(),
            e: embed_dim,
            h: hidden,
        };
        let mut params = vec![0.0; layout.total()];
        let mut rng = rng::stream(seed, &[0x5a7]);
        for p in &mut params[layout.emb()..layout.w()] {
            *p = rng.random_range(-0.5..0.5);
        }
        let s = 1.0 / (hidden as f64).sqrt();
        for p in &mut params[layout.w()..layout.b()] {
            *p = rng.random_range(-s..s);
        }
        // Forget-gate bias 1; the head stays zero so an untrained model
        // predicts 0.
        for p in &mut params[layout.b() + hidden..layout.b() + 2 * hidden] {
            *p = 1.0;
        }
        let n = params.len();
        SurrogateModel {
            vocab,
            constant_pool: constant_pool.to_vec(),
            layout,
            params,
            target_mean: 0.0,
            target_scale: 1.0,
            fitted: false,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            adam_t: 0,
        }
    }

    pub fn from_config(constant_pool: &[f64], config: &SurrogateConfig) -> Self {
        SurrogateModel::new(constant_pool, config.embed_dim, config.hidden, config.seed)
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted
    }

    fn check(&self, seq: &[Token]) -> Result<(), SurrogateError> {
        match seq.iter().find(|&&t| t >= self.vocab.len()) {
            Some(t) => Err(SurrogateError::UnknownToken(format!("<{t}>"))),
            None => Ok(()),
        }
    }

    fn run(&self, params: &[f64], seq: &[Token]) -> (f64, Tape) {
        let Layout { e, h, .. } = self.layout;
        let cols = self.layout.cols();
        let steps = seq.len();
        let mut tape = Tape {
            xs: seq.to_vec(),
            hs: vec![0.0; (steps + 1) * h],
            cs: vec![0.0; (steps + 1) * h],
            gates: vec![0.0; steps * 4 * h],
        };
        let w = &params[self.layout.w()..self.layout.b()];
        let b = &params[self.layout.b()..self.layout.head_w()];
        let mut input = vec![0.0; cols];
        for (t, &tok) in seq.iter().enumerate() {
            input[..e].copy_from_slice(&params[tok * e..(tok + 1) * e]);
            input[e..].copy_from_slice(&tape.hs[t * h..(t + 1) * h]);
            let gates = &mut tape.gates[t * 4 * h..(t + 1) * 4 * h];
            for r in 0..4 * h {
                let row = &w[r * cols..(r + 1) * cols];
                let z = b[r] + row.iter().zip(&input).map(|(a, x)| a * x).sum::<f64>();
                gates[r] = if (2 * h..3 * h).contains(&r) { z.tanh() } else { sigmoid(z) };
            }
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let c = f * tape.cs[t * h + k] + i * g;
                tape.cs[(t + 1) * h + k] = c;
                tape.hs[(t + 1) * h + k] = o * c.tanh();
            }
        }
        let hw = &params[self.layout.head_w()..self.layout.head_b()];
        let pooled = mean_hidden(&tape.hs, h, steps);
        let y = params[self.layout.head_b()] + hw.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
        (y, tape)
    }

    /// Adds `dy * d(raw output)/d(params)` into `grad`.
    fn backprop(&self, params: &[f64], tape: &Tape, dy: f64, grad: &mut [f64]) {
        let Layout { e, h, .. } = self.layout;
        let cols = self.layout.cols();
        let steps = tape.xs.len();
        let (hw0, hb) = (self.layout.head_w(), self.layout.head_b());
        grad[hb] += dy;
        let pooled = mean_hidden(&tape.hs, h, steps);
        // Every h_t (t >= 1) feeds the pooled readout directly.
        let direct: Vec<f64> = (0..h).map(|k| dy * params[hw0 + k] / steps as f64).collect();
        for k in 0..h {
            grad[hw0 + k] += dy * pooled[k];
        }
        let mut dh = direct.clone();
        let mut dc = vec![0.0; h];
        let mut dz = vec![0.0; 4 * h];
        let mut input = vec![0.0; cols];
        let w0 = self.layout.w();
        let b0 = self.layout.b();
        for t in (0..steps).rev() {
            let gates = &tape.gates[t * 4 * h..(t + 1) * 4 * h];
            for k in 0..h {
                let (i, f, g, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                let tc = tape.cs[(t + 1) * h + k].tanh();
                dc[k] += dh[k] * o * (1.0 - tc * tc);
                dz[3 * h + k] = dh[k] * tc * o * (1.0 - o);
                dz[k] = dc[k] * g * i * (1.0 - i);
                dz[h + k] = dc[k] * tape.cs[t * h + k] * f * (1.0 - f);
                dz[2 * h + k] = dc[k] * i * (1.0 - g * g);
                dc[k] *= f;
            }
            let tok = tape.xs[t];
            input[..e].copy_from_slice(&params[tok * e..(tok + 1) * e]);
            input[e..].copy_from_slice(&tape.hs[t * h..(t + 1) * h]);
            dh.fill(0.0);
            for r in 0..4 * h {
                let g = dz[r];
                if g == 0.0 {
                    continue;
                }
                grad[b0 + r] += g;
                let row = w0 + r * cols;
                for c in 0..cols {
                    grad[row + c] += g * input[c];
                }
                for c in 0..e {
                    grad[tok * e + c] += g * params[row + c];
                }
                for k in 0..h {
                    dh[k] += g * params[row + e + k];
                }
            }
            dh.iter_mut().zip(&direct).for_each(|(d, x)| *d += x);
        }
    }

    /// Fitness estimate for a token sequence.
    pub fn predict_sequence(&self, seq: &[Token]) -> Result<f64, SurrogateError> {
        self.check(seq)?;
        let (y, _) = self.run(&self.params, seq);
        Ok(self.target_mean + self.target_scale * y)
    }

    pub fn predict(&self, graph: &MetricGraph) -> Result<f64, SurrogateError> {
        self.predict_sequence(&graph_to_sequence(graph, &self.vocab)?)
    }

    /// Mean squared error of predictions against `targets`, in target units.
    pub fn mse(&self, sequences: &[Vec<Token>], targets: &[f64]) -> Result<f64, SurrogateError> {
        let mut total = 0.0;
        for (s, y) in sequences.iter().zip(targets) {
            let r = self.predict_sequence(s)? - y;
            total += r * r;
        }
        Ok(total / targets.len() as f64)
    }

    /// Standardized-space MSE and its gradient with respect to `params`.
    fn loss_and_grad(&self, params: &[f64], sequences: &[Vec<Token>], targets: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let n = targets.len() as f64;
        let mut loss = 0.0;
        for (s, y) in sequences.iter().zip(targets) {
            let (raw, tape) = self.run(params, s);
            let r = raw - (y - self.target_mean) / self.target_scale;
            loss += r * r / n;
            self.backprop(params, &tape, 2.0 * r / n, &mut grad);
        }
        (loss, grad)
    }

    /// Full-batch training; returns the MSE (in target units) measured at the
    /// start of each epoch, followed by the MSE after the last update.
    pub fn train(
        &mut self,
        data: &SurrogateDataset,
        epochs: usize,
        learning_rate: f64,
        optimizer: SurrogateOptimizer,
    ) -> Result<Vec<f64>, SurrogateError> {
        if data.len() < 2 {
            return Err(SurrogateError::TooFewSamples(data.len()));
        }
        for s in &data.sequences {
            self.check(s)?;
        }
        if !self.fitted {
            let n = data.len() as f64;
            let mean = data.fitness.iter().sum::<f64>() / n;
            let var = data.fitness.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
            self.target_mean = mean;
            self.target_scale = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            self.fitted = true;
        }
        let unit = self.target_scale * self.target_scale;
        let mut trace = Vec::with_capacity(epochs + 1);
        for _ in 0..epochs {
            let (loss, grad) = self.loss_and_grad(&self.params, &data.sequences, &data.fitness);
            trace.push(loss * unit);
            self.apply(&grad, learning_rate, optimizer);
        }
        let (loss, _) = self.loss_and_grad(&self.params, &data.sequences, &data.fitness);
        trace.push(loss * unit);
        Ok(trace)
    }

    fn apply(&mut self, grad: &[f64], lr: f64, optimizer: SurrogateOptimizer) {
        match optimizer {
            SurrogateOptimizer::Gd => {
                for (p, g) in self.params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            SurrogateOptimizer::Adam => {
                let (b1, b2, eps) = (0.9, 0.999, 1e-8);
                self.adam_t += 1;
                let c1 = 1.0 - f64::powi(b1, self.adam_t);
                let c2 = 1.0 - f64::powi(b2, self.adam_t);
                for k in 0..self.params.len() {
                    self.adam_m[k] = b1 * self.adam_m[k] + (1.0 - b1) * grad[k];
                    self.adam_v[k] = b2 * self.adam_v[k] + (1.0 - b2) * grad[k] * grad[k];
                    self.params[k] -= lr * (self.adam_m[k] / c1) / ((self.adam_v[k] / c2).sqrt() + eps);
                }
            }
        }
    }

    /// Writes `<stem>.json` (vocabulary, sizes, normalization) and
    /// `<stem>.bin` (parameters as little-endian `f64`).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), Error> {
        let bin = format!("{stem}.bin");
        let header = CheckpointHeader {
            vocabulary: self.vocab.names(),
            constant_pool: self.constant_pool.clone(),
            embed_dim: self.layout.e,
            hidden: self.layout.h,
            target_mean: self.target_mean,
            target_scale: self.target_scale,
            fitted: self.fitted,
            n_params: self.params.len(),
            params_file: bin.clone(),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let json = serde_json::to_string_pretty(&header).expect("header serializes");
        fs::write(&json_path, json).map_err(io_err(&json_path))?;
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        let bin_path = dir.join(bin);
        fs::write(&bin_path, bytes).map_err(io_err(&bin_path))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, Error> {
        let json_path = dir.join(format!("{stem}.json"));
        let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| SurrogateError::Checkpoint(e.to_string()))?;
        let mut model = SurrogateModel::new(&header.constant_pool, header.embed_dim, header.hidden, 0);
        if model.vocab.names() != header.vocabulary || model.params.len() != header.n_params {
            return Err(SurrogateError::Checkpoint("vocabulary or size mismatch".into()).into());
        }
        let bin_path = dir.join(&header.params_file);
        let bytes = fs::read(&bin_path).map_err(io_err(&bin_path))?;
        if bytes.len() != 8 * header.n_params {
            return Err(SurrogateError::Checkpoint(format!("{} has {} bytes", bin_path.display(), bytes.len())).into());
        }
        for (p, c) in model.params.iter_mut().zip(bytes.chunks_exact(8)) {
            *p = f64::from_le_bytes(c.try_into().unwrap());
        }
        model.target_mean = header.target_mean;
        model.target_scale = header.target_scale;
        model.fitted = header.fitted;
        Ok(model)
    }
}

/// Spearman rank correlation, with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut out = vec![0.0; x.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && x[idx[end]] == x[idx[start]] {
            end += 1;
        }
        let rank = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = rank;
        }
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{parse_expr, random_generate, GenerationConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&[-1.0, 0.5, 2.0])
    }

    fn names(seq: &[Token]) -> Vec<String> {
        let v = vocab();
        seq.iter().map(|&t| v.name(t)).collect()
    }

    #[test]
    fn pre_order_sequences() {
        let v = vocab();
        let seq = graph_to_sequence(&parse_expr("dot(u,v)").unwrap(), &v).unwrap();
        assert_eq!(names(&seq), ["<start>", "dot", "u", "v", "<end>"]);
        let seq = graph_to_sequence(&parse_expr("dot(norm(u),v)").unwrap(), &v).unwrap();
        assert_eq!(names(&seq), ["<start>", "dot", "norm", "u", "v", "<end>"]);
    }

    #[test]
    fn vocabulary_is_a_bijection() {
        let v = vocab();
        let names = v.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        // 7 scalar ops, 7 vector ops with smul split 3 ways, 3 leaves, 2 markers.
        assert_eq!(v.len(), 7 + 6 + 3 + 3 + 2);
        for t in 2..v.len() {
            assert_eq!(v.token(v.kind(t).unwrap()).unwrap(), t);
        }
    }

    #[test]
    fn unknown_constant_is_rejected() {
        let g = parse_expr("dot(smul(3,u),v)").unwrap();
        assert!(matches!(graph_to_sequence(&g, &vocab()), Err(SurrogateError::UnknownToken(_))));
        let model = SurrogateModel::new(&[2.0], 4, 4, 0);
        assert!(matches!(model.predict_sequence(&[0, 999, 1]), Err(SurrogateError::UnknownToken(_))));
    }

    #[test]
    fn sequences_decode_to_the_same_graph() {
        let v = vocab();
        let cfg = GenerationConfig { max_depth: 5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let g = random_generate(&cfg, &mut rng).unwrap();
            let seq = graph_to_sequence(&g, &v).unwrap();
            assert_eq!(decode_sequence(&seq, &v, 5).unwrap(), g);
        }
        assert!(decode_sequence(&[START, 2, END], &v, 5).is_err());
        assert!(decode_sequence(&[2, END], &v, 5).is_err());
    }

    #[test]
    fn untrained_model_predicts_zero() {
        let model = SurrogateModel::new(&[-1.0, 0.5, 2.0], 16, 32, 3);
        for e in ["dot(u,v)", "cos(add(u,ones),v)", "l2d(norm(u),smul(2,v))"] {
            let g = parse_expr(e).unwrap();
            assert_eq!(model.predict(&g).unwrap(), 0.0);
            assert_eq!(model.predict(&g).unwrap(), model.predict(&g).unwrap());
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut model = SurrogateModel::new(&[2.0], 3, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Give the head non-zero weights so every path carries gradient.
        let (hw, end) = (model.layout.head_w(), model.layout.total());
        for p in &mut model.params[hw..end] {
            *p = rng.random_range(-1.0..1.0);
        }
        model.target_mean = 0.1;
        model.target_scale = 0.7;
        let vocab_len = model.vocab.len();
        let sequences: Vec<Vec<Token>> = (0..3)
            .map(|_| {
                let len = rng.random_range(2..=8);
                (0..len).map(|_| rng.random_range(0..vocab_len)).collect()
            })
            .collect();
        let targets = [0.3, -0.2, 0.8];
        let (_, grad) = model.loss_and_grad(&model.params, &sequences, &targets);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for k in 0..model.params.len() {
            let mut plus = model.params.clone();
            plus[k] += h;
            let mut minus = model.params.clone();
            minus[k] -= h;
            let fd = (model.loss_and_grad(&plus, &sequences, &targets).0
                - model.loss_and_grad(&minus, &sequences, &targets).0)
                / (2.0 * h);
            let scale = fd.abs().max(grad[k].abs());
            if scale > 1e-7 {
                worst = worst.max((fd - grad[k]).abs() / scale);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn mse_matches_hand_computation() {
        let mut model = SurrogateModel::new(&[2.0], 4, 4, 1);
        let hb = model.layout.head_b();
        model.params[hb] = 0.25;
        let v = model.vocab.clone();
        let seqs: Vec<Vec<Token>> = ["dot(u,v)", "cos(u,v)", "l1d(u,v)"]
            .iter()
            .map(|e| graph_to_sequence(&parse_expr(e).unwrap(), &v).unwrap())
            .collect();
        let targets = [0.1, 0.4, -0.3];
        let preds: Vec<f64> = seqs.iter().map(|s| model.predict_sequence(s).unwrap()).collect();
        let hand = preds.iter().zip(&targets).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / 3.0;
        assert!((model.mse(&seqs, &targets).unwrap() - hand).abs() < 1e-12);
    }

    fn dataset(pairs: &[(&str, f64)], v: &Vocabulary) -> SurrogateDataset {
        let mut d = SurrogateDataset::default();
        for (e, y) in pairs {
            d.push(&parse_expr(e).unwrap(), *y, v).unwrap();
        }
        d
    }

    #[test]
    fn too_few_samples() {
        let mut model = SurrogateModel::new(&[2.0], 4, 4, 1);
        let d = dataset(&[("dot(u,v)", 0.5)], &model.vocab.clone());
        assert!(matches!(
            model.train(&d, 10, 1e-3, SurrogateOptimizer::Gd),
            Err(SurrogateError::TooFewSamples(1))
        ));
    }

    #[test]
    fn non_finite_fitness_is_not_logged() {
        let v = vocab();
        let mut d = SurrogateDataset::default();
        assert!(!d.push(&parse_expr("dot(u,v)").unwrap(), f64::NEG_INFINITY, &v).unwrap());
        assert!(d.is_empty());
    }

    #[test]
    fn identical_sequences_converge() {
        let mut model = SurrogateModel::new(&[-1.0, 0.5, 2.0], 16, 32, 5);
        let v = model.vocab.clone();
        let d = dataset(&[("dot(u,v)", 0.5); 4], &v);
        model.train(&d, 200, 1e-3, SurrogateOptimizer::Gd).unwrap();
        let p = model.predict(&parse_expr("dot(u,v)").unwrap()).unwrap();
        assert!((p - 0.5).abs() < 0.01, "{p}");
    }

    #[test]
    fn gd_trace_is_non_increasing() {
        let mut model = SurrogateModel::new(&[-1.0, 0.5, 2.0], 16, 32, 5);
        let v = model.vocab.clone();
        let cfg = GenerationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut d = SurrogateDataset::default();
        for _ in 0..30 {
            let g = random_generate(&cfg, &mut rng).unwrap();
            let y = 0.1 * g.len() as f64 + rng.random_range(0.0..0.05);
            d.push(&g, y, &v).unwrap();
        }
        let trace = model.train(&d, 100, 1e-3, SurrogateOptimizer::Gd).unwrap();
        assert_eq!(trace.len(), 101);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
        }
        assert!(trace[100] < trace[0]);
    }

    #[test]
    fn learns_a_structural_signal() {
        let mut model = SurrogateModel::new(&[-1.0, 0.5, 2.0], 16, 32, 5);
        let v = model.vocab.clone();
        let cfg = GenerationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut d = SurrogateDataset::default();
        let mut held = Vec::new();
        for k in 0..200 {
            let g = random_generate(&cfg, &mut rng).unwrap();
            // Fitness rises with the number of item leaves.
            let y = 0.1 * g.count_leaf(LeafKind::Item) as f64 + rng.random_range(0.0..0.05);
            if k < 150 {
                d.push(&g, y, &v).unwrap();
            } else {
                held.push((g, y));
            }
        }
        model.train(&d, 300, 1e-2, SurrogateOptimizer::Adam).unwrap();
        let preds: Vec<f64> = held.iter().map(|(g, _)| model.predict(g).unwrap()).collect();
        let truth: Vec<f64> = held.iter().map(|(_, y)| *y).collect();
        assert!(spearman(&preds, &truth) > 0.3, "{}", spearman(&preds, &truth));
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]), 0.0);
        // Average ranks for ties: ranks a = [0, 1.5, 1.5], b = [0, 1, 2].
        let r = spearman(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert!((r - 0.75f64.sqrt()).abs() < 1e-12, "{r}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = SurrogateModel::new(&[-1.0, 0.5, 2.0], 4, 5, 2);
        let v = model.vocab.clone();
        let d = dataset(&[("dot(u,v)", 0.2), ("cos(u,v)", 0.4), ("l2d(u,v)", 0.1)], &v);
        model.train(&d, 5, 1e-2, SurrogateOptimizer::Adam).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), "surrogate").unwrap();
        d.write_log(&dir.path().join("dsur.tsv")).unwrap();
        let back = SurrogateModel::load(dir.path(), "surrogate").unwrap();
        assert_eq!(back.params(), model.params());
        let g = parse_expr("cos(u,v)").unwrap();
        assert_eq!(back.predict(&g).unwrap(), model.predict(&g).unwrap());
        let log = fs::read_to_string(dir.path().join("dsur.tsv")).unwrap();
        assert_eq!(log.lines().next().unwrap(), "dot(u,v)\t0.2");
    }
}
