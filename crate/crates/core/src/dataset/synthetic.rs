//! Planted-metric synthetic datasets.
//!
//! Users and items get random embeddings; each user's positives are the top
//! items under a known metric, optionally perturbed by uniform noise. The
//! planted embeddings and metric are returned as ground truth.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{InteractionDataset, ItemId};
use crate::error::{ConfigError, Error};
use crate::eval::{forward, EvalWorkspace};
use crate::graph::{print_expr, MetricGraph};
use crate::rng;

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    /// Planted embedding dimension.
    pub dim: usize,
    pub metric: MetricGraph,
    /// Positives per user.
    pub per_user: usize,
    /// Probability that a positive is swapped for a uniform random item.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_users == 0 || self.n_items == 0 || self.dim == 0 {
            return Err(ConfigError::new("users, items and dim must be positive"));
        }
        if self.per_user == 0 || self.per_user >= self.n_items {
            return Err(ConfigError::new(format!(
                "interactions per user must satisfy 0 < m < n_items (m = {}, n_items = {})",
                self.per_user, self.n_items
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(ConfigError::new("noise must be in [0, 1)"));
        }
        if let Err(v) = self.metric.validate() {
            return Err(ConfigError::new(format!("planted metric: {v}")));
        }
        Ok(())
    }
}

/// Ground truth behind a synthetic dataset.
#[derive(Clone, Debug)]
pub struct PlantedTruth {
    pub metric: MetricGraph,
    pub dim: usize,
    /// Row-major `n_users x dim`.
    pub users: Vec<f64>,
    /// Row-major `n_items x dim`.
    pub items: Vec<f64>,
    pub seed: u64,
    /// Noise-free top-`m` items per user, in rank order.
    pub top: Vec<Vec<ItemId>>,
}

impl PlantedTruth {
    /// Writes the planted-truth sidecar: metric expression and seed.
    pub fn write_sidecar(&self, spec: &SyntheticSpec, path: &Path) -> Result<(), Error> {
        let text = format!(
            "metric = {}\nseed = {}\ndim = {}\nusers = {}\nitems = {}\nper_user = {}\nnoise = {}\n",
            print_expr(&self.metric),
            self.seed,
            self.dim,
            spec.n_users,
            spec.n_items,
            spec.per_user,
            spec.noise
        );
        fs::write(path, text).map_err(crate::error::io_err(path))
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(InteractionDataset, PlantedTruth), Error> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, &[0x5e7]);
    let d = spec.dim;
    let mut draw = |n: usize| -> Vec<f64> { (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let users = draw(spec.n_users);
    let items = draw(spec.n_items);

    let mut ws = EvalWorkspace::new(d);
    let mut top = Vec::with_capacity(spec.n_users);
    let mut scored: Vec<(f64, ItemId)> = Vec::with_capacity(spec.n_items);
    for u in 0..spec.n_users {
        let pu = &users[u * d..(u + 1) * d];
        scored.clear();
        for i in 0..spec.n_items {
            let s = forward(&spec.metric, pu, &items[i * d..(i + 1) * d], &mut ws)?;
            scored.push((s, i as ItemId));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        top.push(scored[..spec.per_user].iter().map(|&(_, i)| i).collect::<Vec<_>>());
    }

    let mut train = Vec::with_capacity(spec.n_users);
    let mut valid = Vec::with_capacity(spec.n_users);
    let mut test = Vec::with_capacity(spec.n_users);
    for row in &top {
        let mut positives = row.clone();
        for k in 0..positives.len() {
            if spec.noise > 0.0 && rng.random_bool(spec.noise) {
                // Uniform over items not already positive, so m stays exact.
                let replacement = loop {
                    let j = rng.random_range(0..spec.n_items as ItemId);
                    if !positives.contains(&j) {
                        break j;
                    }
                };
                positives[k] = replacement;
            }
        }
        positives.shuffle(&mut rng);
        let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
        for item in positives {
            let r: f64 = rng.random();
            if r < 0.8 {
                tr.push(item);
            } else if r < 0.9 {
                va.push(item);
            } else {
                te.push(item);
            }
        }
        if tr.is_empty() {
            let moved = va.pop().or_else(|| te.pop()).expect("m >= 1");
            tr.push(moved);
        }
        train.push(tr);
        valid.push(va);
        test.push(te);
    }
    let ds = InteractionDataset::from_splits(spec.n_users, spec.n_items, train, valid, test)?;
    let truth = PlantedTruth {
        metric: spec.metric.clone(),
        dim: d,
        users,
        items,
        seed: spec.seed,
        top,
    };
    Ok((ds, truth))
}
