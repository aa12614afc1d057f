use metricgen::config::RunConfig;
use metricgen::dataset::{generate_synthetic, load_adjacency, InteractionDataset, Split, SyntheticSpec};
use metricgen::evolution::{run_search, FitnessKind};
use metricgen::ranking::evaluate;
use metricgen::train::{train, EmbeddingTable, TrainConfig};
use metricgen::parse_expr;

fn planted(noise: f64) -> InteractionDataset {
    let spec = SyntheticSpec {
        n_users: 300,
        n_items: 100,
        dim: 8,
        metric: parse_expr("dot(u,v)").unwrap(),
        per_user: 10,
        noise,
        seed: 5,
    };
    generate_synthetic(&spec).unwrap().0
}

fn small_train() -> TrainConfig {
    TrainConfig {
        dim: 8,
        learning_rate: 0.05,
        batch_size: 256,
        full_epochs: 30,
        patience: 30,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn trained_dot_beats_random_embeddings_on_planted_data() {
    let ds = planted(0.0);
    let cfg = small_train();
    let dot = parse_expr("dot(u,v)").unwrap();
    let out = train(&dot, &ds, &cfg, Some(30)).unwrap();
    let trained = evaluate(&dot, &out.embeddings, &ds, Split::Valid, 20).ndcg;
    let random = evaluate(&dot, &EmbeddingTable::init(ds.n_users(), ds.n_items(), &cfg), &ds, Split::Valid, 20).ndcg;
    assert!(trained >= 3.0 * random, "trained {trained:.4} vs random {random:.4}");
    assert!(out.losses.windows(2).filter(|w| w[1] > w[0]).count() < out.losses.len() / 2);
}

#[test]
fn training_is_deterministic() {
    let ds = planted(0.1);
    let g = parse_expr("cos(u,v)").unwrap();
    let a = train(&g, &ds, &small_train(), Some(3)).unwrap();
    let b = train(&g, &ds, &small_train(), Some(3)).unwrap();
    assert_eq!(a.embeddings, b.embeddings);
    assert_eq!(a.losses, b.losses);
}

#[test]
fn saved_dataset_loads_back() {
    let ds = planted(0.1);
    let dir = tempfile::tempdir().unwrap();
    ds.save(dir.path()).unwrap();
    let back = load_adjacency(&dir.path().join("train.txt"), &dir.path().join("test.txt"), Some(&dir.path().join("valid.txt"))).unwrap();
    for split in [Split::Train, Split::Valid, Split::Test] {
        assert_eq!(back.split(split), ds.split(split));
    }
}

#[test]
fn small_search_keeps_its_best() {
    let ds = planted(0.1);
    let cfg = RunConfig::parse(
        "population = 6\ngenerations = 3\nstop_epochs = 2\nfull_epochs = 5\ndim = 8\nbatch_size = 256\nlearning_rate = 0.05\nseed = 4\n",
    )
    .unwrap();
    let result = run_search(&ds, &cfg.settings()).unwrap();
    assert_eq!(result.history.len(), 4);
    for snap in &result.history {
        assert_eq!(snap.population.len(), 6);
        assert!(snap.population.iter().all(|r| r.graph.validate().is_ok()));
    }
    // Fitness values are cached, so the elite never gets worse.
    let best: Vec<f64> = result.history.iter().map(|s| s.best_fitness).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
    assert_eq!(result.best.fitness_kind, Some(FitnessKind::EarlyStop));
    assert!(result.final_eval.is_some());
    assert_eq!(result.stats.evaluations, 6 + 3 * 5);
}
