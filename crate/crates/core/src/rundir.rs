//! Run directories: everything a finished search leaves on disk.
//!
//! A directory is complete once `COMPLETE` exists; it is written last, so an
//! interrupted run is recognisable.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{io_err, Error, Result};
use crate::evolution::{CandidateRecord, Origin, SearchResult};
use crate::report::RunSummary;

pub const CONFIG_FILE: &str = "config.cfg";
pub const POPULATION_FILE: &str = "population.tsv";
pub const BEST_FILE: &str = "best.sm";
pub const FITNESS_FILE: &str = "best_fitness.txt";
pub const FINAL_REPORT_FILE: &str = "final_report.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SURROGATE_STEM: &str = "surrogate";
pub const SURROGATE_LOG_FILE: &str = "dsur.tsv";
pub const COMPLETE_MARKER: &str = "COMPLETE";

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(path))
}

/// `{}` on f64 prints the shortest string that parses back to the same value.
fn exact(x: f64) -> String {
    format!("{x}")
}

fn origin_fields(origin: &Origin) -> (String, String) {
    match origin {
        Origin::Random => ("random".into(), "-".into()),
        Origin::Replacement => ("replacement".into(), "-".into()),
        Origin::Mutation { parent, kind, noop } => {
            let tag = if *noop { format!("{}-noop", kind.name()) } else { kind.name().to_string() };
            (tag, parent.to_string())
        }
    }
}

fn population_row(out: &mut String, generation: usize, rank: usize, r: &CandidateRecord) {
    let (origin, parent) = origin_fields(&r.origin);
    writeln!(
        out,
        "{generation}\t{rank}\t{}\t{}\t{}\t{}\t{}\t{origin}\t{parent}\t{}",
        r.id,
        r.expression(),
        r.fitness.map(exact).unwrap_or_else(|| "-".into()),
        r.fitness_kind.map(|k| k.name()).unwrap_or("-"),
        r.generation,
        r.epochs
    )
    .unwrap();
}

/// Per-generation population listing, best first within each generation.
pub fn population_table(result: &SearchResult) -> String {
    let mut out = String::from("generation\trank\tid\texpression\tfitness\tkind\tborn\torigin\tparent\tepochs\n");
    for snap in &result.history {
        for (rank, r) in snap.population.iter().enumerate() {
            population_row(&mut out, snap.generation, rank + 1, r);
        }
    }
    out
}

/// Best-candidate fitness values. Contains no timing, so identical runs
/// produce identical files.
pub fn fitness_text(result: &SearchResult) -> String {
    let mut out = String::new();
    writeln!(out, "search\t{}\t{}", exact(result.best.score()), result.best.fitness_kind.map(|k| k.name()).unwrap_or("-")).unwrap();
    match &result.final_eval {
        Some(f) => writeln!(out, "final\t{}", exact(f.fitness)).unwrap(),
        None => writeln!(out, "final\t-").unwrap(),
    }
    out
}

fn final_report_text(result: &SearchResult) -> String {
    let mut out = String::new();
    writeln!(out, "expression\t{}", result.best.expression()).unwrap();
    match &result.final_eval {
        Some(f) => {
            writeln!(out, "valid_fitness\t{}", exact(f.fitness)).unwrap();
            writeln!(out, "valid_recall@{}\t{}", f.valid.k, exact(f.valid.recall)).unwrap();
            writeln!(out, "valid_ndcg@{}\t{}", f.valid.k, exact(f.valid.ndcg)).unwrap();
            writeln!(out, "test_recall@{}\t{}", f.test.k, exact(f.test.recall)).unwrap();
            writeln!(out, "test_ndcg@{}\t{}", f.test.k, exact(f.test.ndcg)).unwrap();
            writeln!(out, "epochs\t{}", f.epochs).unwrap();
            writeln!(out, "best_epoch\t{}", f.best_epoch).unwrap();
        }
        None => writeln!(out, "status\tdegenerate").unwrap(),
    }
    out
}

/// Writes the whole run directory and returns its summary.
pub fn write_run(dir: &Path, config: &RunConfig, result: &SearchResult) -> Result<RunSummary> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let marker = dir.join(COMPLETE_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(io_err(&marker))?;
    }
    write(dir, CONFIG_FILE, &config.to_text())?;
    write(dir, POPULATION_FILE, &population_table(result))?;
    write(dir, BEST_FILE, &format!("{}\n", result.best.expression()))?;
    write(dir, FITNESS_FILE, &fitness_text(result))?;
    write(dir, FINAL_REPORT_FILE, &final_report_text(result))?;
    let summary = RunSummary::from_result(result, config.strategy.name(), config.seed);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write(dir, SUMMARY_FILE, &json)?;
    if let Some(model) = &result.surrogate {
        model.save(dir, SURROGATE_STEM)?;
    }
    if !result.surrogate_data.is_empty() {
        result.surrogate_data.write_log(&dir.join(SURROGATE_LOG_FILE))?;
    }
    write(dir, COMPLETE_MARKER, "")?;
    Ok(summary)
}

pub fn is_complete(dir: &Path) -> bool {
    dir.join(COMPLETE_MARKER).is_file()
}

/// Reads the summary of a completed run.
pub fn load_summary(dir: &Path) -> Result<RunSummary> {
    if !is_complete(dir) {
        return Err(Error::IncompleteRun(dir.to_path_buf()));
    }
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| Error::Io {
        path,
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
    })
}

/// Reads the stored best expression.
pub fn load_best(dir: &Path) -> Result<String> {
    let path = dir.join(BEST_FILE);
    Ok(fs::read_to_string(&path).map_err(io_err(&path))?.trim().to_string())
}

/// Reads the stored config echo.
pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(RunConfig::parse(&text)?)
}
