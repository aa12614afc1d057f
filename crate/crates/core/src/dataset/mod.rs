//! Implicit-feedback interaction data.
//!
//! Files use the adjacency-list text format common to graph recommenders:
//! one line per user, whitespace-separated integers, the first being the user
//! id and the rest item ids.

mod synthetic;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::DataError;
use crate::rng::{self, Stream};

pub use synthetic::{generate_synthetic, PlantedTruth, SyntheticSpec};

pub type UserId = u32;
pub type ItemId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Users, items, and disjoint per-user train/valid/test positive lists.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    n_users: usize,
    n_items: usize,
    train: Vec<Vec<ItemId>>,
    valid: Vec<Vec<ItemId>>,
    test: Vec<Vec<ItemId>>,
}

impl InteractionDataset {
    /// Builds a dataset from per-user lists. Lists are sorted and
    /// deduplicated; held-out entries of users without training items are
    /// discarded. Out-of-range ids and overlapping splits are errors.
    pub fn from_splits(
        n_users: usize,
        n_items: usize,
        train: Vec<Vec<ItemId>>,
        valid: Vec<Vec<ItemId>>,
        test: Vec<Vec<ItemId>>,
    ) -> Result<Self, DataError> {
        let normalize = |mut lists: Vec<Vec<ItemId>>, name: &str| -> Result<Vec<Vec<ItemId>>, DataError> {
            if lists.len() > n_users {
                return Err(DataError::Invariant(format!("{name}: more user rows than n_users")));
            }
            lists.resize(n_users, Vec::new());
            for (u, items) in lists.iter_mut().enumerate() {
                items.sort_unstable();
                items.dedup();
                if let Some(&bad) = items.iter().find(|&&i| i as usize >= n_items) {
                    return Err(DataError::Invariant(format!(
                        "{name}: user {u} has item {bad} >= n_items {n_items}"
                    )));
                }
            }
            Ok(lists)
        };
        let train = normalize(train, "train")?;
        let mut valid = normalize(valid, "valid")?;
        let mut test = normalize(test, "test")?;
        for u in 0..n_users {
            if train[u].is_empty() {
                valid[u].clear();
                test[u].clear();
            }
            let overlap = |a: &[ItemId], b: &[ItemId]| a.iter().any(|i| b.binary_search(i).is_ok());
            if overlap(&train[u], &valid[u]) || overlap(&train[u], &test[u]) || overlap(&valid[u], &test[u]) {
                return Err(DataError::Invariant(format!("splits overlap for user {u}")));
            }
        }
        let ds = InteractionDataset {
            n_users,
            n_items,
            train,
            valid,
            test,
        };
        if ds.n_interactions(Split::Train) == 0 {
            return Err(DataError::EmptyDataset);
        }
        Ok(ds)
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn split(&self, split: Split) -> &[Vec<ItemId>] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn positives(&self, split: Split, user: UserId) -> &[ItemId] {
        &self.split(split)[user as usize]
    }

    pub fn n_interactions(&self, split: Split) -> usize {
        self.split(split).iter().map(Vec::len).sum()
    }

    /// Whether `item` is a positive of `user` in any split.
    pub fn is_positive(&self, user: UserId, item: ItemId) -> bool {
        let u = user as usize;
        [&self.train[u], &self.valid[u], &self.test[u]]
            .iter()
            .any(|l| l.binary_search(&item).is_ok())
    }

    /// Carves `ceil(fraction * |train_u|)` random training items per user into
    /// the validation split, always leaving at least one training item.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> InteractionDataset {
        assert!(fraction > 0.0 && fraction < 1.0, "fraction must be in (0, 1)");
        let mut rng = rng::stream(seed, &[0x5a1d]);
        let mut train = self.train.clone();
        let mut valid = self.valid.clone();
        for u in 0..self.n_users {
            let items = &mut train[u];
            let n = items.len();
            if n == 0 {
                continue;
            }
            let moved = ((fraction * n as f64).ceil() as usize).min(n - 1);
            items.shuffle(&mut rng);
            valid[u].extend(items.drain(..moved));
            items.sort_unstable();
            valid[u].sort_unstable();
        }
        InteractionDataset {
            n_users: self.n_users,
            n_items: self.n_items,
            train,
            valid,
            test: self.test.clone(),
        }
    }

    /// Writes `train.txt`, `valid.txt` and `test.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for split in [Split::Train, Split::Valid, Split::Test] {
            write_adjacency(&dir.join(format!("{}.txt", split.name())), self.split(split))?;
        }
        Ok(())
    }
}

pub fn write_adjacency(path: &Path, lists: &[Vec<ItemId>]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    for (u, items) in lists.iter().enumerate() {
        write!(out, "{u}").map_err(io)?;
        for i in items {
            write!(out, " {i}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Parses one adjacency file into `(user, items)` rows.
pub fn read_adjacency(path: &Path) -> Result<Vec<(UserId, Vec<ItemId>)>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut ids = Vec::new();
        for tok in line.split_whitespace() {
            let id = tok.parse::<u32>().map_err(|_| DataError::Format {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected a non-negative integer, found {tok:?}"),
            })?;
            ids.push(id);
        }
        if let Some((&user, items)) = ids.split_first() {
            rows.push((user, items.to_vec()));
        }
    }
    Ok(rows)
}

/// Loads train/test adjacency files, plus an optional validation file.
/// Counts are inferred as the largest id seen plus one.
pub fn load_adjacency(
    train: &Path,
    test: &Path,
    valid: Option<&Path>,
) -> Result<InteractionDataset, DataError> {
    let train_rows = read_adjacency(train)?;
    let test_rows = read_adjacency(test)?;
    let valid_rows = valid.map(read_adjacency).transpose()?.unwrap_or_default();
    let all = || train_rows.iter().chain(&test_rows).chain(&valid_rows);
    if all().all(|(_, items)| items.is_empty()) {
        return Err(DataError::EmptyDataset);
    }
    let n_users = all().map(|(u, _)| *u as usize + 1).max().unwrap_or(0);
    let n_items = all()
        .flat_map(|(_, items)| items.iter().map(|&i| i as usize + 1))
        .max()
        .unwrap_or(0);
    let gather = |rows: &[(UserId, Vec<ItemId>)]| {
        let mut lists = vec![Vec::new(); n_users];
        for (u, items) in rows {
            lists[*u as usize].extend_from_slice(items);
        }
        lists
    };
    InteractionDataset::from_splits(
        n_users,
        n_items,
        gather(&train_rows),
        gather(&valid_rows),
        gather(&test_rows),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub user: UserId,
    pub pos: ItemId,
    pub neg: ItemId,
}

/// Maximum consecutive rejected negatives before giving up on a user.
pub const MAX_NEGATIVE_REJECTIONS: usize = 1000;

/// Edge-uniform BPR triplet sampler with rejection-sampled negatives.
pub struct TripletSampler<'a> {
    ds: &'a InteractionDataset,
    edges: Vec<(UserId, ItemId)>,
    rng: Stream,
}

impl<'a> TripletSampler<'a> {
    pub fn new(ds: &'a InteractionDataset, seed: u64) -> Self {
        let edges = ds
            .train
            .iter()
            .enumerate()
            .flat_map(|(u, items)| items.iter().map(move |&i| (u as UserId, i)))
            .collect();
        TripletSampler {
            ds,
            edges,
            rng: rng::stream(seed, &[0x7419]),
        }
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn sample(&mut self, batch_size: usize) -> Result<Vec<Triplet>, DataError> {
        let mut out = Vec::with_capacity(batch_size);
        self.sample_into(batch_size, &mut out)?;
        Ok(out)
    }

    pub fn sample_into(&mut self, batch_size: usize, out: &mut Vec<Triplet>) -> Result<(), DataError> {
        assert!(!self.edges.is_empty(), "train split is empty");
        out.clear();
        let n_items = self.ds.n_items as ItemId;
        for _ in 0..batch_size {
            let (user, pos) = self.edges[self.rng.random_range(0..self.edges.len())];
            let mut tries = 0;
            let neg = loop {
                let j = self.rng.random_range(0..n_items);
                if !self.ds.is_positive(user, j) {
                    break j;
                }
                tries += 1;
                if tries >= MAX_NEGATIVE_REJECTIONS {
                    return Err(DataError::SamplerStall { user });
                }
            };
            out.push(Triplet { user, pos, neg });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        fs::File::create(&path).unwrap().write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn parses_adjacency_lines() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "train.txt", "0 1 2 3\n1 0\n5\n");
        let test = write(dir.path(), "test.txt", "0 4\n");
        let ds = load_adjacency(&train, &test, None).unwrap();
        assert_eq!(ds.positives(Split::Train, 0), &[1, 2, 3]);
        assert_eq!(ds.positives(Split::Train, 5), &[] as &[u32]);
        assert_eq!(ds.positives(Split::Test, 0), &[4]);
        assert_eq!((ds.n_users(), ds.n_items()), (6, 5));
    }

    #[test]
    fn bad_token_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "train.txt", "0 1\n1 2\n2 x\n");
        let test = write(dir.path(), "test.txt", "0 3\n");
        match load_adjacency(&train, &test, None) {
            Err(DataError::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let train = write(dir.path(), "train.txt", "0\n1\n");
        let test = write(dir.path(), "test.txt", "");
        assert!(matches!(load_adjacency(&train, &test, None), Err(DataError::EmptyDataset)));
        let missing = dir.path().join("nope.txt");
        assert!(matches!(load_adjacency(&missing, &test, None), Err(DataError::Io { .. })));
    }

    #[test]
    fn cold_test_users_excluded() {
        let ds = InteractionDataset::from_splits(2, 4, vec![vec![0], vec![]], vec![], vec![vec![1], vec![2]]).unwrap();
        assert_eq!(ds.positives(Split::Test, 1), &[] as &[u32]);
        assert_eq!(ds.positives(Split::Test, 0), &[1]);
    }

    #[test]
    fn overlap_and_range_rejected() {
        assert!(InteractionDataset::from_splits(1, 3, vec![vec![0]], vec![], vec![vec![0]]).is_err());
        assert!(InteractionDataset::from_splits(1, 3, vec![vec![3]], vec![], vec![]).is_err());
    }

    #[test]
    fn validation_split_ceiling_and_floor() {
        let ds = InteractionDataset::from_splits(
            2,
            20,
            vec![(0..10).collect(), vec![7]],
            vec![],
            vec![vec![15], vec![]],
        )
        .unwrap();
        let split = ds.split_validation(0.1, 3);
        assert_eq!(split.positives(Split::Valid, 0).len(), 1);
        assert_eq!(split.positives(Split::Train, 0).len(), 9);
        assert_eq!(split.positives(Split::Valid, 1).len(), 0);
        assert_eq!(split.positives(Split::Train, 1), &[7]);
        assert_eq!(split, ds.split_validation(0.1, 3));
        let moved = split.positives(Split::Valid, 0)[0];
        assert!(!split.positives(Split::Train, 0).contains(&moved));
    }

    #[test]
    fn forced_triplet() {
        let ds = InteractionDataset::from_splits(1, 2, vec![vec![0]], vec![], vec![]).unwrap();
        let mut sampler = TripletSampler::new(&ds, 0);
        for t in sampler.sample(100).unwrap() {
            assert_eq!(t, Triplet { user: 0, pos: 0, neg: 1 });
        }
    }

    #[test]
    fn full_row_stalls() {
        let ds = InteractionDataset::from_splits(1, 2, vec![vec![0, 1]], vec![], vec![]).unwrap();
        let mut sampler = TripletSampler::new(&ds, 0);
        assert!(matches!(sampler.sample(1), Err(DataError::SamplerStall { user: 0 })));
    }

    #[test]
    fn user_frequency_follows_degree() {
        let ds = InteractionDataset::from_splits(
            2,
            50,
            vec![vec![0, 1, 2], vec![10, 11, 12, 13, 14, 15, 16, 17, 18]],
            vec![],
            vec![],
        )
        .unwrap();
        let mut sampler = TripletSampler::new(&ds, 9);
        let batch = sampler.sample(10_000).unwrap();
        let first = batch.iter().filter(|t| t.user == 0).count() as f64 / 10_000.0;
        assert!((first - 0.25).abs() < 0.05 * 0.25, "{first}");
        for t in &batch {
            assert!(ds.positives(Split::Train, t.user).contains(&t.pos));
            assert!(!ds.is_positive(t.user, t.neg));
        }
    }

    #[test]
    fn save_then_load_round_trip() {
        let ds = InteractionDataset::from_splits(
            3,
            6,
            vec![vec![0, 1], vec![2], vec![3, 4]],
            vec![vec![5], vec![], vec![]],
            vec![vec![2], vec![0], vec![]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = load_adjacency(
            &dir.path().join("train.txt"),
            &dir.path().join("test.txt"),
            Some(&dir.path().join("valid.txt")),
        )
        .unwrap();
        assert_eq!(back, ds);
    }
}
