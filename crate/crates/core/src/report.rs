//! Run summaries and their text rendering.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::evolution::{SearchResult, SearchStats};

/// JSON has no infinities: degenerate fitness is written as `null` and read
/// back as `-inf`.
mod fitness_json {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub generation: usize,
    #[serde(with = "fitness_json")]
    pub best_fitness: f64,
    pub evaluations: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopMetric {
    pub expression: String,
    #[serde(with = "fitness_json")]
    pub fitness: f64,
    pub kind: String,
}

/// Machine-readable digest of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub seed: u64,
    pub best_expression: String,
    /// Fitness used during search (approximate unless the strategy is full).
    #[serde(with = "fitness_json")]
    pub search_fitness: f64,
    /// Validation NDCG after full training of the best metric.
    pub final_fitness: Option<f64>,
    pub valid_recall: Option<f64>,
    pub test_recall: Option<f64>,
    pub test_ndcg: Option<f64>,
    pub final_epochs: Option<usize>,
    pub trace: Vec<TracePoint>,
    pub top: Vec<TopMetric>,
    pub stats: SearchStats,
    pub wall_secs: f64,
}

fn fmt_f(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "-inf".to_string()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f).unwrap_or_else(|| "n/a".to_string())
}

impl RunSummary {
    pub fn from_result(result: &SearchResult, strategy: &str, seed: u64) -> RunSummary {
        let fe = result.final_eval.as_ref();
        RunSummary {
            strategy: strategy.to_string(),
            seed,
            best_expression: result.best.expression(),
            search_fitness: result.best.score(),
            final_fitness: fe.map(|f| f.fitness),
            valid_recall: fe.map(|f| f.valid.recall),
            test_recall: fe.map(|f| f.test.recall),
            test_ndcg: fe.map(|f| f.test.ndcg),
            final_epochs: fe.map(|f| f.epochs),
            trace: result
                .history
                .iter()
                .map(|s| TracePoint {
                    generation: s.generation,
                    best_fitness: s.best_fitness,
                    evaluations: s.evaluations,
                    epochs: s.epochs,
                })
                .collect(),
            top: result
                .final_population()
                .iter()
                .take(3)
                .map(|r| TopMetric {
                    expression: r.expression(),
                    fitness: r.score(),
                    kind: r.fitness_kind.map(|k| k.name()).unwrap_or("none").to_string(),
                })
                .collect(),
            stats: result.stats.clone(),
            wall_secs: result.wall_secs,
        }
    }

    /// Fitness trace, top metrics and speed accounting.
    pub fn render(&self) -> String {
        let mut out = String::new();
        writeln!(out, "strategy {}  seed {}", self.strategy, self.seed).unwrap();
        writeln!(out, "best metric: {}", self.best_expression).unwrap();
        writeln!(
            out,
            "search fitness {}  full-training NDCG@K valid {}  test {}  test recall {}",
            fmt_f(self.search_fitness),
            fmt_opt(self.final_fitness),
            fmt_opt(self.test_ndcg),
            fmt_opt(self.test_recall)
        )
        .unwrap();
        writeln!(out, "\nbest fitness per generation").unwrap();
        writeln!(out, "{:>5}  {:>8}  {:>6}  {:>8}", "gen", "fitness", "evals", "epochs").unwrap();
        for p in &self.trace {
            writeln!(
                out,
                "{:>5}  {:>8}  {:>6}  {:>8}",
                p.generation,
                fmt_f(p.best_fitness),
                p.evaluations,
                p.epochs
            )
            .unwrap();
        }
        writeln!(out, "\ntop metrics").unwrap();
        for (k, m) in self.top.iter().enumerate() {
            writeln!(out, "{}. {}  ({} {})", k + 1, m.expression, m.kind, fmt_f(m.fitness)).unwrap();
        }
        let s = &self.stats;
        writeln!(out, "\nspeed").unwrap();
        writeln!(out, "candidates evaluated {}", s.evaluations).unwrap();
        writeln!(
            out,
            "trainings {} (full {})  cache hits {}  surrogate predictions {}",
            s.trainings, s.full_trainings, s.cache_hits, s.predictions
        )
        .unwrap();
        writeln!(out, "epochs consumed {}  degenerate {}", s.epochs, s.degenerate).unwrap();
        writeln!(out, "wall time {:.2}s", self.wall_secs).unwrap();
        out
    }
}

/// Side-by-side budget and fitness table for two runs.
pub fn render_compare(a: &RunSummary, b: &RunSummary) -> String {
    let rows: Vec<(&str, String, String)> = vec![
        ("strategy", a.strategy.clone(), b.strategy.clone()),
        ("best metric", a.best_expression.clone(), b.best_expression.clone()),
        ("search fitness", fmt_f(a.search_fitness), fmt_f(b.search_fitness)),
        ("final valid NDCG", fmt_opt(a.final_fitness), fmt_opt(b.final_fitness)),
        ("test NDCG", fmt_opt(a.test_ndcg), fmt_opt(b.test_ndcg)),
        ("evaluations", a.stats.evaluations.to_string(), b.stats.evaluations.to_string()),
        ("trainings", a.stats.trainings.to_string(), b.stats.trainings.to_string()),
        ("epochs", a.stats.epochs.to_string(), b.stats.epochs.to_string()),
        ("wall secs", format!("{:.2}", a.wall_secs), format!("{:.2}", b.wall_secs)),
    ];
    let w1 = rows.iter().map(|r| r.0.len()).max().unwrap();
    let w2 = rows.iter().map(|r| r.1.len()).max().unwrap().max(1);
    let mut out = String::new();
    for (label, x, y) in rows {
        writeln!(out, "{label:<w1$}  {x:<w2$}  {y}").unwrap();
    }
    let speedup = if b.wall_secs > 0.0 && a.wall_secs > 0.0 {
        format!("{:.2}x", b.wall_secs / a.wall_secs)
    } else {
        "n/a".to_string()
    };
    writeln!(out, "{:<w1$}  {speedup} (second / first)", "speed-up").unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(strategy: &str, top: usize, wall: f64) -> RunSummary {
        RunSummary {
            strategy: strategy.into(),
            seed: 1,
            best_expression: "dot(u,v)".into(),
            search_fitness: 0.25,
            final_fitness: Some(0.3),
            valid_recall: Some(0.4),
            test_recall: Some(0.5),
            test_ndcg: Some(0.35),
            final_epochs: Some(20),
            trace: vec![
                TracePoint { generation: 0, best_fitness: 0.2, evaluations: 4, epochs: 20 },
                TracePoint { generation: 1, best_fitness: 0.25, evaluations: 8, epochs: 40 },
            ],
            top: (0..top)
                .map(|k| TopMetric { expression: format!("m{k}"), fitness: 0.1, kind: "es".into() })
                .collect(),
            stats: SearchStats { evaluations: 8, epochs: 40, ..Default::default() },
            wall_secs: wall,
        }
    }

    #[test]
    fn render_lists_top_metrics_and_trace() {
        let text = summary("es", 3, 1.0).render();
        assert!(text.contains("1. m0") && text.contains("3. m2") && !text.contains("4. "));
        assert!(text.contains("epochs consumed 40"));
        assert!(text.contains("    1    0.2500       8        40"), "{text}");
    }

    #[test]
    fn compare_reports_speed_up() {
        let text = render_compare(&summary("es", 3, 1.0), &summary("full", 3, 4.0));
        assert!(text.contains("4.00x"));
        assert!(text.lines().next().unwrap().contains("es") && text.lines().next().unwrap().contains("full"));
    }

    #[test]
    fn summary_json_round_trip() {
        let mut s = summary("sur", 2, 0.5);
        s.top[1].fitness = f64::NEG_INFINITY;
        let back: RunSummary = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }
}
