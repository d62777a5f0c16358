use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use steadynet::ansatz::{AnsatzMode, VariationalAnsatz};
use steadynet::dynamics::{read_dataset, write_dataset};
use steadynet::experiments::{
    generate_network, reconstruct, run_pipeline, run_sweep, simulate, ExperimentConfig, ReconSpec, RepeatSeeds,
};
use steadynet::metrics::{EvalReport, DEFAULT_THRESHOLD};
use steadynet::networks::Structure;
use steadynet::{Error, Result};

#[derive(Parser)]
#[command(name = "steadynet", version, about = "Reconstruct oscillator networks from steady states")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's repeat count.
    #[arg(long, global = true)]
    repeats: Option<usize>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the ground-truth network of repeat 0.
    Generate,
    /// Collect the observed steady-state dataset of repeat 0.
    Simulate {
        /// Network file; generated from the config when omitted.
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Train an ansatz on a dataset file; reads no network.
    Reconstruct {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Score a checkpoint against a network file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
    },
    /// Run every repeat of the config end to end.
    Pipeline,
    /// Run the config's sweep section.
    Sweep,
}

enum Outcome {
    Done,
    Partial,
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config { .. } => e,
        other => Error::Config { path: String::new(), msg: other.to_string() },
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config { path: String::new(), msg: "--config is required".into() })?;
    let mut cfg = ExperimentConfig::load(path).map_err(config_error)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(r) = cli.repeats {
        cfg.repeats = r;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| Error::Config { path: String::new(), msg: "--out is required".into() })?;
    std::fs::create_dir_all(dir)?;
    Ok(dir)
}

fn say(cli: &Cli, msg: impl AsRef<str>) {
    if !cli.quiet {
        println!("{}", msg.as_ref());
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.cmd {
        Cmd::Generate => {
            let cfg = load_config(cli)?;
            let seeds = RepeatSeeds::new(cfg.seed, 0);
            let net = generate_network(&cfg.network, seeds.network)?;
            let path = out_dir(cli)?.join("network.json");
            net.save(&path)?;
            say(cli, format!("wrote {}", path.display()));
            Ok(Outcome::Done)
        }
        Cmd::Simulate { network } => {
            let cfg = load_config(cli)?;
            let seeds = RepeatSeeds::new(cfg.seed, 0);
            let truth = match network {
                Some(p) => Structure::load(p)?,
                None => generate_network(&cfg.network, seeds.network)?,
            };
            let ds = simulate(&cfg, &truth, &seeds)?;
            let observed = steadynet::experiments::observe_records(&cfg, &ds.records, &seeds)?;
            let dir = out_dir(cli)?;
            std::fs::write(dir.join("dataset.jsonl"), write_dataset(&observed)?)?;
            std::fs::write(dir.join("collect_stats.json"), serde_json::to_string_pretty(&ds.stats)? + "\n")?;
            say(cli, format!("accepted {} of {} trials", ds.records.len(), ds.stats.attempts));
            Ok(if ds.is_complete(cfg.dataset.m) { Outcome::Done } else { Outcome::Partial })
        }
        Cmd::Reconstruct { dataset } => {
            let path = cli.config.as_deref().ok_or_else(|| Error::Config { path: String::new(), msg: "--config is required".into() })?;
            let text = std::fs::read_to_string(path).map_err(|e| config_error(e.into()))?;
            let mut spec = ReconSpec::from_json(&text)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let records = read_dataset(&std::fs::read_to_string(dataset)?)?;
            let seeds = RepeatSeeds::new(spec.seed, 0);
            let out = reconstruct(&spec.model, &records, &spec.ansatz, &spec.optimizer, &seeds)?;
            let dir = out_dir(cli)?;
            std::fs::write(dir.join("checkpoint.json"), serde_json::to_string(&out.ansatz.to_checkpoint())? + "\n")?;
            std::fs::write(dir.join("trace.csv"), out.trace.to_csv())?;
            out.ansatz.to_adjacency().save(&dir.join("estimate.json"))?;
            say(
                cli,
                format!("{} iterations, final full loss {:e}", out.trace.iterations, out.trace.final_full_loss),
            );
            out.into_result().map(|_| Outcome::Done)
        }
        Cmd::Evaluate { checkpoint, truth, threshold } => {
            let ck = serde_json::from_str(&std::fs::read_to_string(checkpoint)?)?;
            let ansatz = VariationalAnsatz::from_checkpoint(&ck)?;
            let truth = Structure::load(truth)?;
            let mode = ansatz.mode();
            let report = EvalReport::evaluate(
                &truth,
                &ansatz.to_adjacency(),
                mode.candidate_kind(),
                *threshold,
                mode == AnsatzMode::Weighted,
            )?;
            let json = report.to_json()?;
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("metrics.json"), json.clone() + "\n")?;
            }
            say(cli, json);
            Ok(Outcome::Done)
        }
        Cmd::Pipeline => {
            let cfg = load_config(cli)?;
            let res = run_pipeline(&cfg)?;
            let a = &res.aggregate;
            say(
                cli,
                format!(
                    "{} repeats: {} ok, {} failed, {} successful; AUC {:.4} ± {:.4}",
                    a.repeats, a.ok, a.failed, a.successes, a.auc.mean, a.auc.std
                ),
            );
            Ok(if res.is_partial() { Outcome::Partial } else { Outcome::Done })
        }
        Cmd::Sweep => {
            let cfg = load_config(cli)?;
            let out = run_sweep(&cfg)?;
            say(cli, out.to_csv().trim_end());
            Ok(if out.is_partial() { Outcome::Partial } else { Outcome::Done })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "warn" }))
        .init();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config { .. }) { 1 } else { 2 })
        }
    }
}
