use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellResult, ExperimentSpec, Method, ResultTable};
use crate::error::Result;
use crate::training::{mean, Scenario};

pub const SUMMARY_FORMAT: &str = "pathrank-summary";
pub const SUMMARY_VERSION: u32 = 1;

/// One evaluated episode; a line of `paths.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRecord {
    pub method: Method,
    pub scenario: Scenario,
    pub length: usize,
    pub seed: u64,
    pub episode_index: usize,
    pub episode_hash: String,
    pub path: Vec<usize>,
    pub effect: f64,
    pub feedback: Vec<f64>,
}

/// Cached outcome of one finished cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub result: CellResult,
    pub paths: Vec<PathRecord>,
}

/// Writes through a temporary file so an interrupted run never leaves a
/// half-written cell behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(super) fn write_cell_file(path: &Path, file: &CellFile) -> Result<()> {
    write_atomic(path, &serde_json::to_vec(file)?)
}

pub fn read_cell_file(path: &Path) -> Result<CellFile> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

#[derive(Serialize)]
struct Aggregate {
    method: Method,
    scenario: Scenario,
    length: usize,
    seeds_ok: usize,
    seeds_failed: usize,
    /// Mean of the per-seed means over successful seeds.
    mean_et: Option<f64>,
    /// Spread of the per-seed means.
    std_et: Option<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    format: &'static str,
    version: u32,
    cell_hash: &'a str,
    spec: &'a ExperimentSpec,
    cells: &'a [CellResult],
    aggregates: Vec<Aggregate>,
}

fn aggregates(table: &ResultTable) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Method, Scenario, usize), Vec<&CellResult>> = BTreeMap::new();
    for c in &table.cells {
        groups.entry((c.method, c.scenario, c.length)).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|((method, scenario, length), cells)| {
            let means: Vec<f64> = cells.iter().filter_map(|c| c.mean_et).collect();
            let m = (!means.is_empty()).then(|| mean(&means));
            Aggregate {
                method,
                scenario,
                length,
                seeds_ok: means.len(),
                seeds_failed: cells.len() - means.len(),
                mean_et: m,
                std_et: m.map(|m| (means.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / means.len() as f64).sqrt()),
            }
        })
        .collect()
}

/// Writes `results.csv`, `summary.json` and `paths.jsonl` into `out`.
pub fn write_reports(
    out: &Path,
    spec: &ExperimentSpec,
    table: &ResultTable,
    paths: &BTreeMap<String, Vec<PathRecord>>,
) -> Result<()> {
    std::fs::create_dir_all(out)?;

    let mut csv = csv::Writer::from_writer(Vec::new());
    for c in &table.cells {
        csv.serialize(c)?;
    }
    let bytes = csv.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(&out.join("results.csv"), &bytes)?;

    let summary = Summary {
        format: SUMMARY_FORMAT,
        version: SUMMARY_VERSION,
        cell_hash: &table.cell_hash,
        spec,
        cells: &table.cells,
        aggregates: aggregates(table),
    };
    write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;

    let mut lines = Vec::new();
    for c in &table.cells {
        for p in paths.get(&c.key()).into_iter().flatten() {
            serde_json::to_writer(&mut lines, p)?;
            lines.write_all(b"\n")?;
        }
    }
    write_atomic(&out.join("paths.jsonl"), &lines)
}
