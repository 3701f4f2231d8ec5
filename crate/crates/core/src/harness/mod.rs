//! Experiment grids: every method is scored on the same held-out episodes
//! for each (scenario, path length, seed) cell.

mod config;
mod report;

pub use config::{ExperimentSection, ExperimentSpec, Method, WorldSection};
pub use report::{read_cell_file, write_reports, CellFile, PathRecord, SUMMARY_FORMAT, SUMMARY_VERSION};

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{mpc_policy, random_policy, rule_based_policy};
use crate::episode::{episodes_hash, Episode};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ModelConfig};
use crate::rng::{domain, stream_rng};
use crate::simulator::{enumerate_effects, OptimalPath, Simulator, World};
use crate::training::{evaluate_greedy, mean, train, write_records_csv, Scenario, Split, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed,
}

/// One (method, scenario, length, seed) entry of a result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub scenario: Scenario,
    pub length: usize,
    pub seed: u64,
    pub status: CellStatus,
    pub mean_et: Option<f64>,
    /// Population standard deviation over episodes.
    pub std_et: Option<f64>,
    pub episodes: usize,
    pub episodes_hash: String,
    pub error: Option<String>,
}

impl CellResult {
    pub fn key(&self) -> String {
        cell_key(self.method, self.scenario, self.length, self.seed)
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

pub fn cell_key(method: Method, scenario: Scenario, length: usize, seed: u64) -> String {
    format!("{}-p{}-n{}-s{}", method.name(), scenario.index(), length, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub cell_hash: String,
    pub cells: Vec<CellResult>,
}

impl ResultTable {
    pub fn cell(&self, method: Method, scenario: Scenario, length: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.scenario == scenario && c.length == length && c.seed == seed)
    }

    /// Mean learning effect of one successful cell.
    pub fn mean_et(&self, method: Method, scenario: Scenario, length: usize, seed: u64) -> Option<f64> {
        self.cell(method, scenario, length, seed).and_then(|c| c.mean_et)
    }

    /// Mean over seeds of the per-seed means; `None` if any seed failed.
    pub fn seed_mean(&self, method: Method, scenario: Scenario, length: usize) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method && c.scenario == scenario && c.length == length)
            .map(|c| c.mean_et)
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| mean(&vals))
    }

    pub fn failed(&self) -> impl Iterator<Item = &CellResult> {
        self.cells.iter().filter(|c| !c.is_ok())
    }
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic".into()
    }
}

/// Artifacts a trained cell leaves behind besides its scores.
struct Trained {
    config: ModelConfig,
    params: crate::model::ModelParams,
    records: Vec<crate::training::TrainRecord>,
}

struct Evaluated {
    paths: Vec<PathRecord>,
    trained: Option<Trained>,
}

fn evaluate_method(
    spec: &ExperimentSpec,
    method: Method,
    world: &World,
    train_cfg: &TrainConfig,
    episodes: &[Episode],
) -> Result<Evaluated> {
    let seed = train_cfg.seed;
    let (results, trained) = if let Some((encoder, nokt)) = method.learned() {
        let model_config = ModelConfig {
            encoder,
            ..spec.model.clone()
        };
        let cfg = TrainConfig {
            beta: if nokt { 0.0 } else { train_cfg.beta },
            ..train_cfg.clone()
        };
        let out = train(world, model_config, &cfg)?;
        let results = evaluate_greedy(&out.model, world, episodes, seed)?;
        let trained = Trained {
            config: out.model.config,
            params: out.model.params,
            records: out.records,
        };
        (results, Some(trained))
    } else {
        let mut results = Vec::with_capacity(episodes.len());
        for (i, ep) in episodes.iter().enumerate() {
            let mut rng = stream_rng(seed, domain::BASELINE, i as u64);
            let out = match method {
                Method::Random => random_policy(ep, &mut rng)?,
                Method::Rule => rule_based_policy(ep, world, spec.experiment.rule_order)?,
                Method::Mpc => mpc_policy(ep, world, spec.experiment.mpc_rollouts, &mut rng)?,
                _ => unreachable!("learned methods handled above"),
            };
            let mut sim_rng = stream_rng(seed, domain::EVAL_SIM, i as u64);
            let o = world.run_path(&ep.history, &out.path, &ep.targets, &mut sim_rng)?;
            results.push(crate::training::EvalResult {
                path: out.path,
                effect: o.effect,
                feedback: o.feedback,
            });
        }
        (results, None)
    };
    let paths = results
        .into_iter()
        .zip(episodes)
        .enumerate()
        .map(|(i, (r, ep))| PathRecord {
            method,
            scenario: train_cfg.scenario,
            length: train_cfg.path_length,
            seed,
            episode_index: i,
            episode_hash: episodes_hash(std::slice::from_ref(ep)),
            path: r.path,
            effect: r.effect,
            feedback: r.feedback,
        })
        .collect();
    Ok(Evaluated { paths, trained })
}

fn cell_dir(out: &Path, hash: &str) -> PathBuf {
    out.join("cells").join(hash)
}

/// Runs the grid. With `out`, finished cells are cached under
/// `out/cells/<hash>/` (a rerun skips them) and the reports are written.
/// `observer` sees each cell as it completes.
pub fn run_experiment_with(
    spec: &ExperimentSpec,
    out: Option<&Path>,
    mut observer: impl FnMut(&CellResult),
) -> Result<ResultTable> {
    spec.validate()?;
    let hash = spec.cell_hash()?;
    let x = &spec.experiment;
    let cache = out.map(|o| cell_dir(o, &hash));
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir)?;
    }
    let mut cells = Vec::new();
    let mut all_paths: BTreeMap<String, Vec<PathRecord>> = BTreeMap::new();

    for &seed in &x.seeds {
        for &scenario in &x.scenarios {
            for &length in &x.lengths {
                // Built on first use: a fully cached group needs neither.
                let mut shared: Option<std::result::Result<(World, Vec<Episode>), String>> = None;
                for &method in &x.methods {
                    let key = cell_key(method, scenario, length, seed);
                    if let Some(dir) = &cache {
                        if let Ok(file) = read_cell_file(&dir.join(format!("{key}.json"))) {
                            if file.result.is_ok() {
                                observer(&file.result);
                                all_paths.insert(key, file.paths);
                                cells.push(file.result);
                                continue;
                            }
                        }
                    }
                    let train_cfg = spec.cell_train_config(scenario, length, seed);
                    let group = shared.get_or_insert_with(|| {
                        let built = (|| {
                            let world = spec.world.build(seed)?;
                            let sampler = train_cfg.sampler(world.num_concepts())?;
                            let eps = sampler.batch(&world, Split::Eval, 0, x.eval_episodes)?;
                            Ok::<_, Error>((world, eps))
                        })();
                        built.map_err(|e| e.to_string())
                    });
                    let failed = |error: String, hash: String| CellResult {
                        method,
                        scenario,
                        length,
                        seed,
                        status: CellStatus::Failed,
                        mean_et: None,
                        std_et: None,
                        episodes: 0,
                        episodes_hash: hash,
                        error: Some(error),
                    };
                    let (world, episodes) = match group {
                        Ok((w, e)) => (&*w, &e[..]),
                        Err(msg) => {
                            let r = failed(msg.clone(), String::new());
                            observer(&r);
                            cells.push(r);
                            continue;
                        }
                    };
                    let ep_hash = episodes_hash(episodes);
                    let outcome = match catch_unwind(AssertUnwindSafe(|| {
                        evaluate_method(spec, method, world, &train_cfg, episodes)
                    })) {
                        Ok(r) => r.map_err(|e| e.to_string()),
                        Err(p) => Err(format!("panicked: {}", panic_message(p))),
                    };
                    let result = match outcome {
                        Ok(ev) => {
                            let effects: Vec<f64> = ev.paths.iter().map(|p| p.effect).collect();
                            let m = mean(&effects);
                            let s = std_dev(&effects);
                            let result = if m.is_finite() && s.is_finite() {
                                CellResult {
                                    method,
                                    scenario,
                                    length,
                                    seed,
                                    status: CellStatus::Ok,
                                    mean_et: Some(m),
                                    std_et: Some(s),
                                    episodes: effects.len(),
                                    episodes_hash: ep_hash,
                                    error: None,
                                }
                            } else {
                                failed("non-finite learning effect".into(), ep_hash)
                            };
                            if let (Some(dir), true) = (&cache, result.is_ok()) {
                                if let Some(t) = &ev.trained {
                                    save_checkpoint(&dir.join(format!("{key}.ckpt.json")), &t.config, &t.params)?;
                                    write_records_csv(&dir.join(format!("{key}.train.csv")), &t.records)?;
                                }
                                report::write_cell_file(
                                    &dir.join(format!("{key}.json")),
                                    &CellFile {
                                        result: result.clone(),
                                        paths: ev.paths.clone(),
                                    },
                                )?;
                            }
                            all_paths.insert(key, ev.paths);
                            result
                        }
                        Err(e) => failed(e, ep_hash),
                    };
                    observer(&result);
                    cells.push(result);
                }
            }
        }
    }
    let table = ResultTable { cell_hash: hash, cells };
    if let Some(o) = out {
        write_reports(o, spec, &table, &all_paths)?;
    }
    Ok(table)
}

pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ResultTable> {
    run_experiment_with(spec, out, |_| {})
}

/// The encoder-variant by auxiliary-loss grid: six trained methods on the
/// spec's scenarios, lengths and seeds.
pub fn ablation_grid(spec: &ExperimentSpec, out: Option<&Path>) -> Result<ResultTable> {
    let mut spec = spec.clone();
    spec.experiment.methods = Method::ABLATION.to_vec();
    run_experiment(&spec, out)
}

/// Every ordered path of an episode with its learning effect, best first;
/// equal effects keep lexicographic order.
pub fn oracle_table<S: Simulator>(sim: &S, episode: &Episode, cap: u64) -> Result<Vec<OptimalPath>> {
    let mut all = enumerate_effects(sim, &episode.history, &episode.candidates, episode.path_len, &episode.targets, cap)?;
    all.sort_by(|a, b| b.effect.total_cmp(&a.effect));
    Ok(all)
}
