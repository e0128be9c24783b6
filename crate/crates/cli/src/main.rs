use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bevplan_core::anchors::{load_anchors, save_anchors};
use bevplan_core::microworld::{load_scenarios, save_scenarios};
use bevplan_core::pipeline::{
    evaluate_set, fit_vocabulary, generate_dataset, load_results, render_report, save_results,
    split_by_parity, summarize, train, Ablation, RunConfig, Selector,
};
use bevplan_core::{ParamStore, Result};

/// Deterministic generate-then-select driving planner on a synthetic
/// bird's-eye-view micro-world.
#[derive(Parser)]
#[command(name = "bevplan", version)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the relevant seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path; overrides the configured artifact path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic scenario dataset.
    GenData,
    /// Fit the trajectory anchor vocabulary from expert trajectories.
    FitAnchors,
    /// Train the generator, then the evaluator, and write a checkpoint.
    Train,
    /// Run candidate selection on the held-out split and write results.
    Evaluate {
        #[arg(long, value_parser = parse_selector, default_value = "vloe")]
        selector: Selector,
    },
    /// Render the results file as a metrics table.
    Report,
}

fn parse_selector(s: &str) -> Result<Selector> {
    s.parse()
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData => cfg.seeds.data = seed,
            _ => cfg.seeds.model = seed,
        }
    }
    Ok(cfg)
}

fn out_path<'a>(cli: &'a Cli, configured: &'a str) -> &'a Path {
    cli.out.as_deref().unwrap_or_else(|| Path::new(configured))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            let scenarios = generate_dataset(&cfg, cfg.data.count, cfg.seeds.data)?;
            let path = out_path(cli, &cfg.paths.scenarios);
            save_scenarios(path, &scenarios)?;
            println!("wrote {} scenarios to {}", scenarios.len(), path.display());
        }
        Command::FitAnchors => {
            let scenarios = load_scenarios(Path::new(&cfg.paths.scenarios))?;
            let vocab = fit_vocabulary(&cfg, &scenarios)?;
            let path = out_path(cli, &cfg.paths.anchors);
            save_anchors(path, &vocab)?;
            println!("fitted {} anchors to {}", vocab.anchors.len(), path.display());
        }
        Command::Train => {
            let scenarios = load_scenarios(Path::new(&cfg.paths.scenarios))?;
            let vocab = load_anchors(Path::new(&cfg.paths.anchors))?;
            let (train_set, _) = split_by_parity(&scenarios);
            let mut store = ParamStore::new(cfg.seeds.model);
            let log = train(&cfg, &mut store, &vocab, &train_set)?;
            let path = out_path(cli, &cfg.paths.checkpoint);
            store.save(path)?;
            let first = log.generator_losses.first().copied().unwrap_or(0.0);
            let last = log.generator_losses.last().copied().unwrap_or(0.0);
            println!(
                "trained on {} scenarios ({} + {} steps, generator loss {first:.4} -> {last:.4}); checkpoint at {}",
                train_set.len(),
                log.generator_losses.len(),
                log.score_losses.len(),
                path.display()
            );
        }
        Command::Evaluate { selector } => {
            let scenarios = load_scenarios(Path::new(&cfg.paths.scenarios))?;
            let vocab = load_anchors(Path::new(&cfg.paths.anchors))?;
            let mut store = ParamStore::load(Path::new(&cfg.paths.checkpoint))?;
            let (_, eval_set) = split_by_parity(&scenarios);
            let results =
                evaluate_set(&cfg, &mut store, &vocab, &eval_set, *selector, Ablation::default())?;
            let path = out_path(cli, &cfg.paths.results);
            save_results(path, &results)?;
            let summary = summarize(&results);
            println!(
                "evaluated {} episodes with selector {selector}: mean pdms {:.4}, mean regret {:.4}; results at {}",
                summary.episodes,
                summary.mean_pdms,
                summary.mean_regret,
                path.display()
            );
        }
        Command::Report => {
            let (episodes, _) = load_results(Path::new(&cfg.paths.results))?;
            let text = render_report(&summarize(&episodes));
            match &cli.out {
                Some(path) => {
                    std::fs::write(path, &text)?;
                    println!("wrote report to {}", path.display());
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(u8::try_from(err.category_code()).unwrap_or(1))
        }
    }
}
