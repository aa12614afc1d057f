//! Matrix-factorization encoder trained with BPR loss through an arbitrary
//! metric graph.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{InteractionDataset, ItemId, Split, Triplet, TripletSampler, UserId};
use crate::error::{io_err, ConfigError, Error, EvalError, TrainError};
use crate::eval::{backward_into, forward, EvalWorkspace};
use crate::graph::MetricGraph;
use crate::ranking::{evaluate, EvalReport};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub init_scale: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Epoch cap for full training.
    pub full_epochs: usize,
    /// Full training stops after this many epochs without a validation gain.
    pub patience: usize,
    /// Cutoff for the fitness NDCG.
    pub top_k: usize,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dim: 64,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            batch_size: 1024,
            epochs: 10,
            init_scale: 0.1,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            full_epochs: 100,
            patience: 10,
            top_k: 20,
            epsilon: crate::eval::DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ConfigError::new("learning_rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(ConfigError::new("epochs must be at least 1"));
        }
        if self.dim == 0 || self.batch_size == 0 || self.top_k == 0 {
            return Err(ConfigError::new("dim, batch_size and top_k must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(ConfigError::new("epsilon must be positive"));
        }
        if !(self.init_scale >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(ConfigError::new("init_scale and weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// The narrow encoder seam: embeddings for users and items, plus a way to
/// apply gradients with respect to them.
pub trait Encoder {
    fn dim(&self) -> usize;
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    fn user(&self, u: UserId) -> &[f64];
    fn item(&self, i: ItemId) -> &[f64];
    fn apply_gradients(&mut self, grads: &SparseGrads, opt: &mut Optimizer);
}

/// User (`P`) and item (`Q`) embedding tables, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    n_users: usize,
    n_items: usize,
    dim: usize,
    users: Vec<f64>,
    items: Vec<f64>,
}

impl EmbeddingTable {
    /// Entries i.i.d. `N(0, init_scale^2)`, deterministic per seed.
    pub fn init(n_users: usize, n_items: usize, config: &TrainConfig) -> Self {
        let d = config.dim;
        let mut rng = rng::stream(config.seed, &[0xe4b]);
        let mut draw = |n: usize| -> Vec<f64> {
            if config.init_scale == 0.0 {
                return vec![0.0; n * d];
            }
            let normal = Normal::new(0.0, config.init_scale).expect("finite scale");
            (0..n * d).map(|_| normal.sample(&mut rng)).collect()
        };
        let users = draw(n_users);
        let items = draw(n_items);
        EmbeddingTable {
            n_users,
            n_items,
            dim: d,
            users,
            items,
        }
    }

    pub fn from_parts(n_users: usize, n_items: usize, dim: usize, users: Vec<f64>, items: Vec<f64>) -> Self {
        assert_eq!(users.len(), n_users * dim);
        assert_eq!(items.len(), n_items * dim);
        EmbeddingTable {
            n_users,
            n_items,
            dim,
            users,
            items,
        }
    }

    pub fn users(&self) -> &[f64] {
        &self.users
    }

    pub fn items(&self) -> &[f64] {
        &self.items
    }

    pub fn is_finite(&self) -> bool {
        self.users.iter().chain(&self.items).all(|x| x.is_finite())
    }

    /// Binary dump: `n_users`, `n_items`, `dim` as little-endian `u64`, then
    /// `P` and `Q` as row-major little-endian `f64`.
    pub fn write_checkpoint(&self, path: &Path) -> Result<(), Error> {
        let mut buf = Vec::with_capacity(24 + 8 * (self.users.len() + self.items.len()));
        for n in [self.n_users, self.n_items, self.dim] {
            buf.extend_from_slice(&(n as u64).to_le_bytes());
        }
        for x in self.users.iter().chain(&self.items) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&buf).map_err(io_err(path))
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self, Error> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(io_err(path))?;
        let bad = || Error::Config(ConfigError::new(format!("malformed checkpoint {}", path.display())));
        if buf.len() < 24 {
            return Err(bad());
        }
        let word = |k: usize| u64::from_le_bytes(buf[8 * k..8 * k + 8].try_into().unwrap()) as usize;
        let (n_users, n_items, dim) = (word(0), word(1), word(2));
        let total = (n_users + n_items)
            .checked_mul(dim)
            .filter(|t| buf.len() == 24 + 8 * t)
            .ok_or_else(bad)?;
        let floats: Vec<f64> = buf[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        debug_assert_eq!(floats.len(), total);
        let items = floats[n_users * dim..].to_vec();
        let mut users = floats;
        users.truncate(n_users * dim);
        Ok(EmbeddingTable::from_parts(n_users, n_items, dim, users, items))
    }
}

impl Encoder for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn n_users(&self) -> usize {
        self.n_users
    }

    fn n_items(&self) -> usize {
        self.n_items
    }

    fn user(&self, u: UserId) -> &[f64] {
        let d = self.dim;
        &self.users[u as usize * d..(u as usize + 1) * d]
    }

    fn item(&self, i: ItemId) -> &[f64] {
        let d = self.dim;
        &self.items[i as usize * d..(i as usize + 1) * d]
    }

    fn apply_gradients(&mut self, grads: &SparseGrads, opt: &mut Optimizer) {
        opt.begin_step();
        let d = self.dim;
        for &u in &grads.touched_users {
            let r = u as usize * d..(u as usize + 1) * d;
            opt.update(r.clone(), &mut self.users[r.clone()], &grads.users[r]);
        }
        let offset = self.n_users * d;
        for &i in &grads.touched_items {
            let r = i as usize * d..(i as usize + 1) * d;
            let state = offset + r.start..offset + r.end;
            opt.update(state, &mut self.items[r.clone()], &grads.items[r]);
        }
    }
}

/// Dense gradient buffers with a record of which rows are non-zero.
#[derive(Clone, Debug)]
pub struct SparseGrads {
    dim: usize,
    pub users: Vec<f64>,
    pub items: Vec<f64>,
    pub touched_users: Vec<UserId>,
    pub touched_items: Vec<ItemId>,
    user_flag: Vec<bool>,
    item_flag: Vec<bool>,
}

impl SparseGrads {
    pub fn new(n_users: usize, n_items: usize, dim: usize) -> Self {
        SparseGrads {
            dim,
            users: vec![0.0; n_users * dim],
            items: vec![0.0; n_items * dim],
            touched_users: Vec::new(),
            touched_items: Vec::new(),
            user_flag: vec![false; n_users],
            item_flag: vec![false; n_items],
        }
    }

    pub fn clear(&mut self) {
        let d = self.dim;
        for &u in &self.touched_users {
            self.users[u as usize * d..(u as usize + 1) * d].fill(0.0);
            self.user_flag[u as usize] = false;
        }
        for &i in &self.touched_items {
            self.items[i as usize * d..(i as usize + 1) * d].fill(0.0);
            self.item_flag[i as usize] = false;
        }
        self.touched_users.clear();
        self.touched_items.clear();
    }

    pub fn user_row(&mut self, u: UserId) -> &mut [f64] {
        if !self.user_flag[u as usize] {
            self.user_flag[u as usize] = true;
            self.touched_users.push(u);
        }
        let d = self.dim;
        &mut self.users[u as usize * d..(u as usize + 1) * d]
    }

    pub fn item_row(&mut self, i: ItemId) -> &mut [f64] {
        if !self.item_flag[i as usize] {
            self.item_flag[i as usize] = true;
            self.touched_items.push(i);
        }
        let d = self.dim;
        &mut self.items[i as usize * d..(i as usize + 1) * d]
    }

    fn is_finite(&self) -> bool {
        let d = self.dim;
        self.touched_users
            .iter()
            .all(|&u| self.users[u as usize * d..(u as usize + 1) * d].iter().all(|x| x.is_finite()))
            && self
                .touched_items
                .iter()
                .all(|&i| self.items[i as usize * d..(i as usize + 1) * d].iter().all(|x| x.is_finite()))
    }
}

/// SGD or Adam over a flat parameter vector; only rows passed to
/// [`Optimizer::update`] move.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { n_params } else { 0 };
        Optimizer {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; state],
            v: vec![0.0; state],
        }
    }

    pub fn for_table(table: &EmbeddingTable, config: &TrainConfig) -> Self {
        Optimizer::new(
            config.optimizer,
            config.learning_rate,
            (table.n_users + table.n_items) * table.dim,
        )
    }

    fn begin_step(&mut self) {
        self.step += 1;
    }

    fn update(&mut self, state: std::ops::Range<usize>, params: &mut [f64], grads: &[f64]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - self.beta1.powi(self.step);
                let c2 = 1.0 - self.beta2.powi(self.step);
                let m = &mut self.m[state.clone()];
                let v = &mut self.v[state];
                for k in 0..params.len() {
                    let g = grads[k];
                    m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                    v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                    params[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// `-ln sigmoid(x)`, computed without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sq_norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum()
}

/// Negative mean BPR log-likelihood plus
/// `weight_decay * mean(|p_u|^2 + |q_i|^2 + |q_j|^2)`.
pub fn bpr_loss<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    triplets: &[Triplet],
    weight_decay: f64,
    ws: &mut EvalWorkspace,
) -> Result<f64, EvalError> {
    let mut total = 0.0;
    for t in triplets {
        let (p, qi, qj) = (emb.user(t.user), emb.item(t.pos), emb.item(t.neg));
        let diff = forward(metric, p, qi, ws)? - forward(metric, p, qj, ws)?;
        total += neg_log_sigmoid(diff) + weight_decay * (sq_norm(p) + sq_norm(qi) + sq_norm(qj));
    }
    Ok(total / triplets.len() as f64)
}

/// Per-step scratch.
pub struct StepBuffers {
    ws: EvalWorkspace,
    grads: SparseGrads,
    gu_pos: Vec<f64>,
    gv_pos: Vec<f64>,
    gu_neg: Vec<f64>,
    gv_neg: Vec<f64>,
}

impl StepBuffers {
    pub fn new<E: Encoder + ?Sized>(emb: &E, epsilon: f64) -> Self {
        let d = emb.dim();
        StepBuffers {
            ws: EvalWorkspace::with_epsilon(d, epsilon),
            grads: SparseGrads::new(emb.n_users(), emb.n_items(), d),
            gu_pos: vec![0.0; d],
            gv_pos: vec![0.0; d],
            gu_neg: vec![0.0; d],
            gv_neg: vec![0.0; d],
        }
    }

    pub fn grads(&self) -> &SparseGrads {
        &self.grads
    }
}

/// Loss and its gradient over `batch`, left in `buf.grads`.
pub fn batch_gradients<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &E,
    batch: &[Triplet],
    weight_decay: f64,
    buf: &mut StepBuffers,
) -> Result<f64, EvalError> {
    buf.grads.clear();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        let (p, qi, qj) = (emb.user(t.user), emb.item(t.pos), emb.item(t.neg));
        let s_pos = backward_into(metric, p, qi, &mut buf.ws, &mut buf.gu_pos, &mut buf.gv_pos)?;
        let s_neg = backward_into(metric, p, qj, &mut buf.ws, &mut buf.gu_neg, &mut buf.gv_neg)?;
        let diff = s_pos - s_neg;
        total += neg_log_sigmoid(diff) + weight_decay * (sq_norm(p) + sq_norm(qi) + sq_norm(qj));
        // d/dDelta of -ln sigmoid(Delta) is -sigmoid(-Delta).
        let w = sigmoid(-diff) * scale;
        let decay = 2.0 * weight_decay * scale;
        let row = buf.grads.user_row(t.user);
        for k in 0..row.len() {
            row[k] += w * (buf.gu_neg[k] - buf.gu_pos[k]) + decay * p[k];
        }
        let row = buf.grads.item_row(t.pos);
        for k in 0..row.len() {
            row[k] += -w * buf.gv_pos[k] + decay * qi[k];
        }
        let row = buf.grads.item_row(t.neg);
        for k in 0..row.len() {
            row[k] += w * buf.gv_neg[k] + decay * qj[k];
        }
    }
    let loss = total * scale;
    if !loss.is_finite() || !buf.grads.is_finite() {
        return Err(EvalError::NonFinite { node: 0 });
    }
    Ok(loss)
}

/// One optimizer update over the rows touched by `batch`. On a non-finite
/// loss or gradient nothing is updated.
pub fn train_step<E: Encoder + ?Sized>(
    metric: &MetricGraph,
    emb: &mut E,
    batch: &[Triplet],
    config: &TrainConfig,
    opt: &mut Optimizer,
    buf: &mut StepBuffers,
) -> Result<f64, EvalError> {
    assert!(!batch.is_empty(), "empty batch");
    let loss = batch_gradients(metric, emb, batch, config.weight_decay, buf)?;
    emb.apply_gradients(&buf.grads, opt);
    Ok(loss)
}

/// Trained embeddings and per-epoch mean loss.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub embeddings: EmbeddingTable,
    pub losses: Vec<f64>,
}

/// Persistent training state, so callers can interleave epochs with
/// evaluation.
pub struct Trainer<'a> {
    metric: &'a MetricGraph,
    config: &'a TrainConfig,
    sampler: TripletSampler<'a>,
    pub embeddings: EmbeddingTable,
    opt: Optimizer,
    buf: StepBuffers,
    batch: Vec<Triplet>,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(metric: &'a MetricGraph, ds: &'a InteractionDataset, config: &'a TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let embeddings = EmbeddingTable::init(ds.n_users(), ds.n_items(), config);
        let opt = Optimizer::for_table(&embeddings, config);
        let buf = StepBuffers::new(&embeddings, config.epsilon);
        Ok(Trainer {
            metric,
            config,
            sampler: TripletSampler::new(ds, rng::derive_seed(config.seed, &[0xb9]) ),
            embeddings,
            opt,
            buf,
            batch: Vec::with_capacity(config.batch_size),
            epoch: 0,
        })
    }

    /// Runs one epoch of `ceil(|train| / batch)` steps; returns the mean loss
    /// over finite batches.
    pub fn epoch(&mut self) -> Result<f64, TrainError> {
        let steps = self.sampler.n_edges().div_ceil(self.config.batch_size);
        let mut non_finite = 0;
        let mut total = 0.0;
        for _ in 0..steps {
            self.sampler.sample_into(self.config.batch_size, &mut self.batch)?;
            match train_step(self.metric, &mut self.embeddings, &self.batch, self.config, &mut self.opt, &mut self.buf) {
                Ok(loss) => total += loss,
                Err(EvalError::NonFinite { .. }) => non_finite += 1,
                Err(e) => return Err(e.into()),
            }
        }
        self.epoch += 1;
        if 2 * non_finite > steps || !self.embeddings.is_finite() {
            return Err(TrainError::DegenerateCandidate {
                epoch: self.epoch,
                non_finite,
                batches: steps,
            });
        }
        Ok(total / (steps - non_finite).max(1) as f64)
    }
}

/// Trains for `epochs` (or `config.epochs`).
pub fn train(
    metric: &MetricGraph,
    ds: &InteractionDataset,
    config: &TrainConfig,
    epochs: Option<usize>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = Trainer::new(metric, ds, config)?;
    let losses = (0..epochs.unwrap_or(config.epochs))
        .map(|_| trainer.epoch())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TrainOutcome {
        embeddings: trainer.embeddings,
        losses,
    })
}

/// Result of training to convergence on validation NDCG.
#[derive(Clone, Debug)]
pub struct FullOutcome {
    /// Embeddings from the best validation epoch.
    pub embeddings: EmbeddingTable,
    pub valid: EvalReport,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub losses: Vec<f64>,
}

/// Trains up to `config.full_epochs`, stopping after `config.patience`
/// epochs without validation NDCG improvement.
pub fn train_full(metric: &MetricGraph, ds: &InteractionDataset, config: &TrainConfig) -> Result<FullOutcome, TrainError> {
    let mut trainer = Trainer::new(metric, ds, config)?;
    let mut best = FullOutcome {
        valid: evaluate(metric, &trainer.embeddings, ds, Split::Valid, config.top_k),
        embeddings: trainer.embeddings.clone(),
        best_epoch: 0,
        epochs_run: 0,
        losses: Vec::new(),
    };
    let mut since_best = 0;
    for epoch in 1..=config.full_epochs {
        let loss = trainer.epoch()?;
        best.losses.push(loss);
        best.epochs_run = epoch;
        let report = evaluate(metric, &trainer.embeddings, ds, Split::Valid, config.top_k);
        if report.ndcg > best.valid.ndcg {
            best.valid = report;
            best.embeddings = trainer.embeddings.clone();
            best.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(best)
}
