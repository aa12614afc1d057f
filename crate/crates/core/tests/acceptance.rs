//! Acceptance gate: ten end-to-end checks, one PASS/FAIL line each.
//!
//! Set `ACCEPTANCE_ONLY=5,7` to run a subset while iterating.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metricgen::config::{RunConfig, StrategyKind};
use metricgen::dataset::{generate_synthetic, InteractionDataset, Split, SyntheticSpec};
use metricgen::equivalence::{equivalent, EquivalenceConfig, ProbeSet};
use metricgen::eval::{backward, forward, EvalWorkspace};
use metricgen::evolution::{
    final_evaluation, init_population, mutate, random_search, run_search, MutationKind, SearchResult,
};
use metricgen::graph::{parse_expr_with_depth, random_generate, GenerationConfig};
use metricgen::ranking::{metrics_at_k, rank_scores, top_k, evaluate};
use metricgen::surrogate::{spearman, SurrogateConfig, SurrogateDataset, SurrogateModel, SurrogateOptimizer};
use metricgen::train::{train, train_full, TrainConfig};
use metricgen::{parse_expr, print_expr, rundir, MetricGraph};

// Tolerances and limits.
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
/// One-sided differences further apart than this mark a kink.
const KINK_GAP: f64 = 1e-3;
const METRICS_TOL: f64 = 1e-12;
/// Unmasked items per ranking instance.
const MAX_RANKED: usize = 8;
const NOOP_RATE_MAX: f64 = 0.20;
/// Depth limits of the fuzzed mutation corpus: the default and deeper.
const MUTATION_DEPTHS: std::ops::RangeInclusive<usize> = 3..=6;
const RECOVERY_RATIO: f64 = 0.9;
const ES_SPEEDUP_MIN: f64 = 3.0;
const ES_FITNESS_REL_TOL: f64 = 0.10;
const BOOTSTRAP_RESAMPLES: usize = 2000;
/// Unseen metrics scored by the surrogate.
const HELD_OUT: usize = 300;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn planted() -> InteractionDataset {
    let spec = SyntheticSpec {
        n_users: 1000,
        n_items: 200,
        dim: 16,
        metric: parse_expr("dot(u,v)").unwrap(),
        per_user: 20,
        noise: 0.1,
        seed: 1,
    };
    generate_synthetic(&spec).unwrap().0
}

/// Search configuration shared by the planted-data criteria.
fn planted_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.population = 20;
    cfg.generations = 20;
    cfg.gamma = 0.7;
    cfg.stop_epochs = 5;
    cfg.dim = 16;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 256;
    cfg.full_epochs = 100;
    cfg.patience = 10;
    cfg.parallelism = 1;
    cfg
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect()
}

// 1. Analytic gradients against central differences.
fn gradient_oracle() -> Outcome {
    let d = 8;
    let gen = GenerationConfig { max_depth: 4, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ws = EvalWorkspace::new(d);
    let (mut graphs, mut coords, mut kinks, mut worst) = (0, 0, 0, 0.0f64);
    let mut attempts = 0;
    while graphs < 100 && attempts < 10_000 {
        attempts += 1;
        let g = random_generate(&gen, &mut rng).unwrap();
        let u = normal_vec(&mut rng, d);
        let v = normal_vec(&mut rng, d);
        let Ok((gu, gv)) = backward(&g, &u, &v, &mut ws) else { continue };
        let mut f = |u: &[f64], v: &[f64]| forward(&g, u, v, &mut ws).unwrap_or(f64::NAN);
        let f0 = f(&u, &v);
        let mut check = |which: usize, k: usize, analytic: f64| {
            let shifted = |delta: f64| {
                let (mut a, mut b) = (u.clone(), v.clone());
                if which == 0 {
                    a[k] += delta
                } else {
                    b[k] += delta
                }
                (a, b)
            };
            let (up, vp) = shifted(FD_STEP);
            let (um, vm) = shifted(-FD_STEP);
            let (fp, fm) = (f(&up, &vp), f(&um, &vm));
            if !(fp.is_finite() && fm.is_finite()) {
                kinks += 1;
                return;
            }
            let fwd = (fp - f0) / FD_STEP;
            let bwd = (f0 - fm) / FD_STEP;
            if (fwd - bwd).abs() > KINK_GAP * (1.0 + fwd.abs().max(bwd.abs())) {
                kinks += 1;
                return;
            }
            let central = (fp - fm) / (2.0 * FD_STEP);
            let rel = (analytic - central).abs() / 1f64.max(central.abs());
            worst = worst.max(rel);
            coords += 1;
        };
        for k in 0..d {
            check(0, k, gu[k]);
            check(1, k, gv[k]);
        }
        graphs += 1;
    }
    outcome(
        graphs >= 100 && worst < FD_REL_TOL,
        format!("{graphs} graphs, {coords} coordinates, {kinks} skipped at kinks, worst relative error {worst:.2e}"),
    )
}

/// Rankings consistent with descending score, ties to the lower id, found
/// by enumerating every permutation.
fn brute_force_metrics(scores: &[f64], candidates: &[u32], relevant: &[u32], k: usize) -> (f64, f64) {
    let n = candidates.len();
    let mut perm: Vec<u32> = candidates.to_vec();
    let mut c = vec![0usize; n];
    let dcg = |p: &[u32]| -> f64 {
        p.iter()
            .take(k)
            .enumerate()
            .filter(|(_, i)| relevant.contains(i))
            .map(|(r, _)| 1.0 / ((r + 2) as f64).log2())
            .sum()
    };
    let sorted = |p: &[u32]| {
        p.windows(2).all(|w| {
            let (a, b) = (scores[w[0] as usize], scores[w[1] as usize]);
            a > b || (a == b && w[0] < w[1])
        })
    };
    let mut best_dcg = dcg(&perm);
    let mut ranking: Option<Vec<u32>> = sorted(&perm).then(|| perm.clone());
    // Heap's algorithm.
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best_dcg = best_dcg.max(dcg(&perm));
            if sorted(&perm) {
                assert!(ranking.is_none(), "two consistent rankings");
                ranking = Some(perm.clone());
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    let ranking = ranking.expect("one consistent ranking");
    let hits = ranking.iter().take(k).filter(|i| relevant.contains(i)).count();
    (hits as f64 / relevant.len() as f64, dcg(&ranking) / best_dcg)
}

// 2. Recall/NDCG against exhaustive enumeration.
fn metrics_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=10usize);
        // Few distinct values, so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..4) as f64 * 0.5).collect();
        let mut ids: Vec<u32> = (0..n as u32).collect();
        ids.shuffle(&mut rng);
        let n_relevant = rng.random_range(1..=n.min(MAX_RANKED));
        let mut relevant: Vec<u32> = ids[..n_relevant].to_vec();
        relevant.sort_unstable();
        // Mask some irrelevant items, and enough of them to keep the
        // enumeration at most MAX_RANKED! permutations.
        let others = &ids[n_relevant..];
        let forced = n.saturating_sub(MAX_RANKED);
        let mut mask: Vec<u32> = others
            .iter()
            .enumerate()
            .filter(|&(j, _)| j < forced || rng.random_bool(0.3))
            .map(|(_, &i)| i)
            .collect();
        mask.sort_unstable();
        let candidates: Vec<u32> = (0..n as u32).filter(|i| mask.binary_search(i).is_err()).collect();
        let k = rng.random_range(1..=12usize);
        let ranked = rank_scores(&scores, &mask);
        assert_eq!(top_k(&scores, &[&mask], k), ranked[..k.min(ranked.len())]);
        let (recall, ndcg) = metrics_at_k(&ranked, &relevant, k).unwrap();
        let (r0, n0) = brute_force_metrics(&scores, &candidates, &relevant, k);
        worst = worst.max((recall - r0).abs()).max((ndcg - n0).abs());
    }
    outcome(worst <= METRICS_TOL, format!("1000 instances, worst deviation {worst:.1e}"))
}

// 3. Equivalence identities.
fn equivalence_identities() -> Outcome {
    let eq = EquivalenceConfig { delta: 1e-6, probes: 64, ..Default::default() };
    let probes = ProbeSet::generate(eq.probes, eq.probe_dim, 33);
    let same = |a: &str, b: &str| equivalent(&parse_expr(a).unwrap(), &parse_expr(b).unwrap(), &probes, &eq);
    let cos = same("cos(u,v)", "dot(norm(u),norm(v))");
    let had = same("dot(u,v)", "sum(had(u,v))");
    let l2d = same("dot(u,v)", "l2d(u,v)");
    outcome(
        cos && had && !l2d,
        format!("cos~dot(norm,norm) {cos}, dot~sum(had) {had}, dot~l2d {l2d}"),
    )
}

// 4. Mutations keep graphs valid; no-ops are rare.
fn mutation_soundness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in MutationKind::ALL {
        let (mut invalid, mut noops) = (0, 0);
        for _ in 0..10_000 {
            let gen = GenerationConfig { max_depth: rng.random_range(MUTATION_DEPTHS), ..Default::default() };
            let g = random_generate(&gen, &mut rng).unwrap();
            let m = mutate(kind, &g, &gen, &mut rng);
            if m.noop {
                noops += 1;
                if m.graph != g {
                    invalid += 1;
                }
            } else if m.graph.validate().is_err() {
                invalid += 1;
            }
        }
        let rate = noops as f64 / 10_000.0;
        pass &= invalid == 0 && rate < NOOP_RATE_MAX;
        parts.push(format!("{} invalid {invalid} no-op {:.1}%", kind.name(), 100.0 * rate));
    }
    // Reported only: at depth 3 alone many trees are full and admit no insertion.
    let gen = GenerationConfig::default();
    let full = (0..10_000)
        .filter(|_| {
            let g = random_generate(&gen, &mut rng).unwrap();
            mutate(MutationKind::Insertion, &g, &gen, &mut rng).noop
        })
        .count();
    parts.push(format!("(depth 3 only: insertion no-op {:.1}%)", full as f64 / 100.0));
    outcome(pass, parts.join(", "))
}

struct SearchRuns {
    evolution: Vec<SearchResult>,
    random: Vec<SearchResult>,
    dot_test: Vec<f64>,
}

fn planted_runs(ds: &InteractionDataset) -> SearchRuns {
    let mut runs = SearchRuns { evolution: Vec::new(), random: Vec::new(), dot_test: Vec::new() };
    let dot = parse_expr("dot(u,v)").unwrap();
    for seed in 0..5 {
        let cfg = planted_config(seed);
        runs.evolution.push(run_search(ds, &cfg.settings()).unwrap());
        let mut rand_cfg = cfg.clone();
        rand_cfg.strategy = StrategyKind::Random;
        runs.random.push(random_search(ds, rand_cfg.random_budget(), &rand_cfg.settings()).unwrap());
        if seed < 3 {
            let fe = final_evaluation(&dot, ds, &cfg.train()).unwrap();
            runs.dot_test.push(fe.test.ndcg);
        }
    }
    runs
}

// 5. The search recovers a metric as good as the planted one.
fn planted_recovery(runs: &SearchRuns) -> Outcome {
    let ratios: Vec<f64> = runs.evolution[..3]
        .iter()
        .zip(&runs.dot_test)
        .map(|(r, dot)| r.final_eval.as_ref().map(|f| f.test.ndcg).unwrap_or(0.0) / dot)
        .collect();
    let m = median(&ratios);
    let best: Vec<String> = runs.evolution[..3].iter().map(|r| r.best.expression()).collect();
    outcome(
        m >= RECOVERY_RATIO,
        format!(
            "median test NDCG ratio {m:.3} (per seed {:?}, dot {:?}), best {best:?}",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            runs.dot_test.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>()
        ),
    )
}

// 6. Evolution is at least as good as random search at equal budget.
fn strategy_ordering(runs: &SearchRuns) -> Outcome {
    let evo: Vec<f64> = runs.evolution.iter().map(|r| r.best.score()).collect();
    let rnd: Vec<f64> = runs.random.iter().map(|r| r.best.score()).collect();
    let budgets: Vec<usize> = runs.random.iter().map(|r| r.stats.evaluations).collect();
    let (me, mr) = (median(&evo), median(&rnd));
    outcome(
        me >= mr,
        format!("median best ES fitness evolution {me:.4} vs random {mr:.4} (budget {})", budgets[0]),
    )
}

// 7. Early stopping is much cheaper than full training at similar quality.
fn early_stopping_speedup(ds: &InteractionDataset) -> Outcome {
    let mut cfg = planted_config(0);
    cfg.population = 10;
    cfg.generations = 5;
    cfg.full_epochs = 50;
    let time = |strategy| {
        let mut c = cfg.clone();
        c.strategy = strategy;
        let start = Instant::now();
        let r = run_search(ds, &c.settings()).unwrap();
        (start.elapsed().as_secs_f64(), r)
    };
    let (t_es, es) = time(StrategyKind::EarlyStop);
    let (t_full, full) = time(StrategyKind::Full);
    let f_es = es.final_eval.as_ref().map(|f| f.fitness).unwrap_or(0.0);
    let f_full = full.final_eval.as_ref().map(|f| f.fitness).unwrap_or(0.0);
    let speedup = t_full / t_es;
    let rel = (f_es - f_full).abs() / f_full;
    outcome(
        speedup >= ES_SPEEDUP_MIN && rel <= ES_FITNESS_REL_TOL,
        format!(
            "speed-up {speedup:.1}x ({t_es:.1}s vs {t_full:.1}s), fully trained best fitness {f_es:.4} vs {f_full:.4} ({:.1}% apart)",
            100.0 * rel
        ),
    )
}

/// 2.5th percentile of the bootstrap distribution of Spearman's rho.
fn bootstrap_lower(pred: &[f64], truth: &[f64], rng: &mut ChaCha8Rng) -> f64 {
    let n = pred.len();
    let mut rhos: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|_| {
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let a: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let b: Vec<f64> = idx.iter().map(|&i| truth[i]).collect();
            spearman(&a, &b)
        })
        .filter(|r| r.is_finite())
        .collect();
    rhos.sort_by(f64::total_cmp);
    rhos[(0.025 * rhos.len() as f64) as usize]
}

// 8. The surrogate ranks unseen metrics better than chance.
fn surrogate_sanity(ds: &InteractionDataset) -> Outcome {
    let mut cfg = planted_config(0);
    cfg.full_epochs = 50;
    let settings = cfg.settings();
    let train_cfg: TrainConfig = cfg.train();
    let sur_cfg = SurrogateConfig::default();
    let probes = ProbeSet::generate(64, 8, 88);
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let graphs = init_population(sur_cfg.warmup + HELD_OUT, &settings.generation, &probes, &settings.equivalence, &mut rng).unwrap();
    let (warm, held) = graphs.split_at(sur_cfg.warmup);

    let mut log = SurrogateDataset::default();
    let model_vocab = SurrogateModel::from_config(&settings.generation.constant_pool, &sur_cfg);
    for g in warm {
        let fitness = train_full(g, ds, &train_cfg).map(|o| o.valid.ndcg).unwrap_or(f64::NEG_INFINITY);
        log.push(g, fitness, model_vocab.vocabulary()).unwrap();
    }
    let mut model = model_vocab;
    model.train(&log, sur_cfg.epochs, sur_cfg.learning_rate, sur_cfg.optimizer).unwrap();

    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for g in held {
        if let Ok(out) = train(g, ds, &train_cfg, Some(5)) {
            let y = evaluate(g, &out.embeddings, ds, Split::Valid, train_cfg.top_k).ndcg;
            pred.push(model.predict(g).unwrap());
            truth.push(y);
        }
    }
    let rho = spearman(&pred, &truth);
    let lower = bootstrap_lower(&pred, &truth, &mut rng);

    let mut gd = SurrogateModel::from_config(&settings.generation.constant_pool, &sur_cfg);
    let trace = gd.train(&log, 200, 1e-3, SurrogateOptimizer::Gd).unwrap();
    let monotone = trace.windows(2).all(|w| w[1] <= w[0]);
    outcome(
        rho > 0.0 && lower > 0.0 && monotone,
        format!(
            "{} logged, {} held out, Spearman {rho:.3} (95% lower bound {lower:.3}), GD loss non-increasing {monotone} ({:.6} -> {:.6})",
            log.len(),
            pred.len(),
            trace[0],
            trace[trace.len() - 1]
        ),
    )
}

// 9. Repeated runs write byte-identical best-metric and fitness files.
fn determinism(ds: &InteractionDataset) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut differing = Vec::new();
    for strategy in [StrategyKind::EarlyStop, StrategyKind::Surrogate, StrategyKind::Random] {
        let mut cfg = planted_config(9);
        cfg.strategy = strategy;
        cfg.population = 8;
        cfg.generations = 3;
        cfg.full_epochs = 10;
        cfg.sur_warmup = 6;
        cfg.sur_epochs = 50;
        let mut files = Vec::new();
        for rep in 0..2 {
            let dir = tmp.path().join(format!("{}-{rep}", strategy.name()));
            let settings = cfg.settings();
            let result = if strategy == StrategyKind::Random {
                random_search(ds, cfg.random_budget(), &settings).unwrap()
            } else {
                run_search(ds, &settings).unwrap()
            };
            rundir::write_run(&dir, &cfg, &result).unwrap();
            let read = |f: &str| std::fs::read(dir.join(f)).unwrap();
            files.push((read(rundir::BEST_FILE), read(rundir::FITNESS_FILE)));
        }
        if files[0] != files[1] {
            differing.push(strategy.name());
        }
    }
    outcome(differing.is_empty(), format!("es, sur, random repeated; differing: {differing:?}"))
}

// 10. parse(print(g)) == g.
fn grammar_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut failures = 0;
    let mut distinct = HashSet::new();
    for k in 0..10_000 {
        let gen = GenerationConfig { max_depth: 1 + k % 6, ..Default::default() };
        let g: MetricGraph = random_generate(&gen, &mut rng).unwrap();
        let text = print_expr(&g);
        match parse_expr_with_depth(&text, g.max_depth()) {
            Ok(back) if back == g => {}
            _ => failures += 1,
        }
        distinct.insert(text);
    }
    outcome(failures == 0, format!("10000 graphs ({} distinct), {failures} failures", distinct.len()))
}

#[test]
fn acceptance_criteria() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().map_or(true, |o| o.contains(&k));
    let needs_data = [5, 6, 7, 8, 9].iter().any(|&k| wanted(k));
    let ds = needs_data.then(planted);
    let start = Instant::now();
    let runs = (wanted(5) || wanted(6)).then(|| planted_runs(ds.as_ref().unwrap()));
    // Criteria 5 and 6 share these runs; each is charged the full cost.
    let shared_secs = start.elapsed().as_secs_f64();

    // (criterion, name, runtime limit in seconds)
    let table: [(usize, &str, f64); 10] = [
        (1, "gradient oracle", 30.0),
        (2, "metrics oracle", 10.0),
        (3, "equivalence identities", 1.0),
        (4, "mutation soundness", 30.0),
        (5, "planted-metric recovery", 900.0),
        (6, "evolution >= random search", 1800.0),
        (7, "early-stopping speed-up", f64::INFINITY),
        (8, "surrogate sanity", f64::INFINITY),
        (9, "determinism", f64::INFINITY),
        (10, "grammar round-trip", 10.0),
    ];
    let mut failed = Vec::new();
    for (k, name, limit) in table {
        if !wanted(k) {
            continue;
        }
        let start = Instant::now();
        let o = match k {
            1 => gradient_oracle(),
            2 => metrics_oracle(),
            3 => equivalence_identities(),
            4 => mutation_soundness(),
            5 => planted_recovery(runs.as_ref().unwrap()),
            6 => strategy_ordering(runs.as_ref().unwrap()),
            7 => early_stopping_speedup(ds.as_ref().unwrap()),
            8 => surrogate_sanity(ds.as_ref().unwrap()),
            9 => determinism(ds.as_ref().unwrap()),
            _ => grammar_round_trip(),
        };
        let secs = start.elapsed().as_secs_f64() + if k == 5 || k == 6 { shared_secs } else { 0.0 };
        let pass = o.pass && secs < limit;
        // Straight to the stderr handle so the line survives output capture.
        let _ = writeln!(
            std::io::stderr(),
            "[{}] {k:>2} {name}: {} [{secs:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !pass {
            failed.push(k);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
