use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pathrank::gradcheck::{check_objective, check_ops, ObjectiveCheck, DEFAULT_EPS};
use pathrank::harness::{ablation_grid, oracle_table, run_experiment_with, CellResult, ExperimentSpec, ResultTable};
use pathrank::model::{load_checkpoint, save_checkpoint, Model};
use pathrank::simulator::{Simulator, DEFAULT_ENUMERATION_CAP};
use pathrank::training::{evaluate_greedy, mean, write_records_csv, Split};
use pathrank::{Error, Result};

/// Relative error the gradient checks must stay under.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "pathrank", version, about = "Learning-path recommendation experiments")]
struct Cli {
    /// TOML file with [model], [train], [world] and [experiment] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the training seed (and the experiment seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and save its checkpoint and training log.
    Train,
    /// Score a checkpoint greedily on the held-out episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the method grid of the [experiment] section.
    Compare,
    /// Run the encoder-variant by auxiliary-loss grid.
    Ablate,
    /// Enumerate every path of a few episodes with its learning effect.
    Oracle {
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Candidate set size (defaults to the [train] setting).
        #[arg(long)]
        candidates: Option<usize>,
        /// Path length (defaults to the [train] setting).
        #[arg(long)]
        length: Option<usize>,
    },
    /// Finite-difference check of the core ops and the full objective.
    Gradcheck,
}

fn load_spec(cli: &Cli) -> Result<ExperimentSpec> {
    let mut spec = match &cli.config {
        Some(path) => ExperimentSpec::load(path)?,
        None => ExperimentSpec::default(),
    };
    spec.model.num_concepts = spec.world.num_concepts;
    if let Some(seed) = cli.seed {
        spec.train.seed = seed;
        spec.experiment.seeds = vec![seed];
    }
    Ok(spec)
}

fn out_dir(cli: &Cli, default: &str) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn cmd_train(cli: &Cli) -> Result<()> {
    let spec = load_spec(cli)?;
    spec.model.validate()?;
    let out = out_dir(cli, "runs/train")?;
    let world = spec.world.build(spec.train.seed)?;
    let outcome = pathrank::training::train_model(
        &world,
        Model::new(
            spec.model.clone(),
            &mut pathrank::rng::stream_rng(spec.train.seed, pathrank::rng::domain::INIT, 0),
        )?,
        &spec.train,
        |r| {
            let greedy = r.greedy_et.map(|g| format!(" greedy_ET {g:.4}")).unwrap_or_default();
            eprintln!("epoch {:>4}  sampled_ET {:.4}{greedy}  lr {:.2e}", r.epoch, r.mean_sampled_et, r.lr);
        },
    )?;
    save_checkpoint(&out.join("checkpoint.json"), &outcome.model.config, &outcome.model.params)?;
    write_records_csv(&out.join("train_log.csv"), &outcome.records)?;
    write_json(&out.join("train_summary.json"), &outcome.summary)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary)?);
    Ok(())
}

fn cmd_eval(cli: &Cli, checkpoint: &Path) -> Result<()> {
    let spec = load_spec(cli)?;
    let (config, params) = load_checkpoint(checkpoint)?;
    if config.num_concepts != spec.world.num_concepts {
        return Err(Error::Validation(format!(
            "checkpoint covers {} concepts but the world has {}",
            config.num_concepts, spec.world.num_concepts
        )));
    }
    let model = Model { config, params };
    let world = spec.world.build(spec.train.seed)?;
    let sampler = spec.train.sampler(world.num_concepts())?;
    let episodes = sampler.batch(&world, Split::Eval, 0, spec.experiment.eval_episodes)?;
    let results = evaluate_greedy(&model, &world, &episodes, spec.train.seed)?;
    let effects: Vec<f64> = results.iter().map(|r| r.effect).collect();
    let m = mean(&effects);
    let std = (effects.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / effects.len().max(1) as f64).sqrt();
    let metrics = serde_json::json!({
        "checkpoint": checkpoint,
        "episodes": effects.len(),
        "episodes_hash": pathrank::episode::episodes_hash(&episodes),
        "mean_et": m,
        "std_et": std,
    });
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir)?;
        write_json(&dir.join("eval.json"), &metrics)?;
    }
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    Ok(())
}

fn print_cell(c: &CellResult) {
    match (c.mean_et, c.std_et) {
        (Some(m), Some(s)) => eprintln!("{:<12} p={} n={:<3} seed={:<3} E_T {m:.4} ± {s:.4}", c.method.name(), c.scenario.index(), c.length, c.seed),
        _ => eprintln!(
            "{:<12} p={} n={:<3} seed={:<3} FAILED: {}",
            c.method.name(),
            c.scenario.index(),
            c.length,
            c.seed,
            c.error.as_deref().unwrap_or("")
        ),
    }
}

fn print_table(spec: &ExperimentSpec, table: &ResultTable, out: &Path) {
    println!("{:<12} {:>3} {:>4} {:>10}", "method", "p", "n", "mean E_T");
    let methods: std::collections::BTreeSet<_> = table.cells.iter().map(|c| c.method).collect();
    for &p in &spec.experiment.scenarios {
        for &n in &spec.experiment.lengths {
            for &m in &methods {
                let v = table
                    .seed_mean(m, p, n)
                    .map(|v| format!("{v:.4}"))
                    .unwrap_or_else(|| "failed".into());
                println!("{:<12} {:>3} {:>4} {:>10}", m.name(), p.index(), n, v);
            }
        }
    }
    println!("reports written to {}", out.display());
}

fn cmd_compare(cli: &Cli, ablate: bool) -> Result<bool> {
    let spec = load_spec(cli)?;
    let out = out_dir(cli, if ablate { "runs/ablate" } else { "runs/compare" })?;
    let table = if ablate {
        ablation_grid(&spec, Some(&out))?
    } else {
        run_experiment_with(&spec, Some(&out), print_cell)?
    };
    if ablate {
        table.cells.iter().for_each(print_cell);
    }
    print_table(&spec, &table, &out);
    Ok(table.failed().count() == 0)
}

fn cmd_oracle(cli: &Cli, episodes: usize, candidates: Option<usize>, length: Option<usize>) -> Result<()> {
    let mut spec = load_spec(cli)?;
    if let Some(m) = candidates {
        spec.train.candidate_size = Some(m);
    }
    if let Some(n) = length {
        spec.train.path_length = n;
    }
    let world = spec.world.build(spec.train.seed)?;
    let sampler = spec.train.sampler(world.num_concepts())?;
    for (i, ep) in sampler.batch(&world, Split::Eval, 0, episodes)?.iter().enumerate() {
        let rows = oracle_table(&world, ep, DEFAULT_ENUMERATION_CAP)?;
        println!(
            "episode {i}: candidates {:?} targets {:?} history {} items, {} paths",
            ep.candidates,
            ep.targets,
            ep.history.len(),
            rows.len()
        );
        for (rank, r) in rows.iter().enumerate() {
            println!("{:>6}  {:?}  {:.6}", rank + 1, r.path, r.effect);
        }
    }
    Ok(())
}

fn cmd_gradcheck(cli: &Cli) -> Result<bool> {
    let seed = cli.seed.unwrap_or(0);
    let mut worst = 0.0f64;
    for (name, r) in check_ops(seed, DEFAULT_EPS)? {
        println!("{name:<16} max rel. err {:.3e}  max abs. err {:.3e}", r.max_rel_error, r.max_abs_error);
        worst = worst.max(r.max_rel_error);
    }
    let setup = ObjectiveCheck { seed, ..ObjectiveCheck::default() };
    let r = check_objective(&setup, DEFAULT_EPS)?;
    println!(
        "{:<16} max rel. err {:.3e}  max abs. err {:.3e}  ({} entries)",
        "full objective", r.max_rel_error, r.max_abs_error, r.entries_checked
    );
    worst = worst.max(r.max_rel_error);
    let ok = worst < GRADCHECK_TOLERANCE;
    println!("max rel. err {worst:.3e} {} {GRADCHECK_TOLERANCE:.0e}", if ok { "<" } else { ">=" });
    Ok(ok)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Train => cmd_train(cli).map(|_| true),
        Command::Eval { checkpoint } => cmd_eval(cli, checkpoint).map(|_| true),
        Command::Compare => cmd_compare(cli, false),
        Command::Ablate => cmd_compare(cli, true),
        Command::Oracle {
            episodes,
            candidates,
            length,
        } => cmd_oracle(cli, *episodes, *candidates, *length).map(|_| true),
        Command::Gradcheck => cmd_gradcheck(cli),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Diverged { dump, .. } = &e {
                eprintln!("{dump}");
            }
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
