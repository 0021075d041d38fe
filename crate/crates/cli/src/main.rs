use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use conceptlab::checkpoint::Checkpoint;
use conceptlab::experiment::{build_policy, prepare_for, sweep, train_run, RunConfig, SWEEP_LAMBDAS};
use conceptlab::service::{bind_address, serve, AppState, ServiceConfig};
use conceptlab::verify;
use conceptlab_core::data::{save_dataset, DatasetSpec};
use conceptlab_core::eval::{auic, run_curve, write_curves_csv, CurveOptions, Metric};
use conceptlab_core::policy::{bc_train, grid_search_coop, BcConfig, CoopConfig, PolicyKind};
use conceptlab_core::train::write_epoch_log;
use conceptlab_tensor::RngStream;

#[derive(Parser)]
#[command(name = "conceptlab", version, about = "Train, evaluate and serve intervenable concept models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset from a JSON spec and write it to a directory.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the model described by a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Select λ_roll by validation AUIC.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Where to save the selected checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
    /// Intervention curve of a checkpoint under a policy, on the test split.
    Curve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Intervene with the complement of the true concepts.
        #[arg(long)]
        adversarial: bool,
        #[arg(long, default_value = "accuracy")]
        metric: String,
        #[arg(long, requires = "coop_beta")]
        coop_alpha: Option<f64>,
        #[arg(long, requires = "coop_alpha")]
        coop_beta: Option<f64>,
        #[arg(long)]
        max_groups: Option<usize>,
    },
    /// Grid search CooP's α and β on the validation split.
    CoopGrid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON file with every grid entry.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a behavioural clone of Skyline and store it in a checkpoint.
    BcTrain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Start the HTTP intervention-session service.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides CONCEPTLAB_BIND.
        #[arg(long)]
        bind: Option<String>,
        #[arg(long, default_value = "learned_psi")]
        policy: String,
        /// Append-only session log, replayed on start.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Attach ground truth to sessions created from dataset samples.
        #[arg(long)]
        demo: bool,
    },
    /// Run the invariant checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn parse_metric(s: &str) -> Result<Metric> {
    Ok(match s {
        "accuracy" => Metric::Accuracy,
        "auc" => Metric::Auc,
        other => bail!("unknown metric {other:?} (expected accuracy or auc)"),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec: DatasetSpec = read_json(&spec)?;
            let data = spec.build()?;
            save_dataset(&out, &data)?;
            println!("wrote {} train and {} test samples to {}", data.train.len(), data.test.len(), out.display());
        }
        Command::Train { config, out, log } => {
            let run = RunConfig::from_json(&std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?)?;
            let (ck, report, _) = train_run(&run)?;
            ck.save(&out)?;
            if let Some(log) = log {
                write_epoch_log(&log, &report.log)?;
            }
            println!(
                "best epoch {} (val loss {:.6}), test accuracy {:.4}",
                report.best_epoch, report.best_val_loss, ck.meta.final_metrics["test_task_accuracy"]
            );
        }
        Command::Sweep { config, out, lambdas } => {
            let run = RunConfig::from_json(&std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?)?;
            let lambdas = lambdas.unwrap_or_else(|| SWEEP_LAMBDAS.to_vec());
            let (result, ck) = sweep(&run, &lambdas)?;
            for e in &result.entries {
                println!("lambda_roll {} val_auic {:.6}", e.lambda_roll, e.val_auic);
            }
            println!("selected lambda_roll {} auic {:.6}", result.selected_lambda_roll, result.selected_auic);
            if let Some(out) = out {
                ck.save(&out)?;
            }
        }
        Command::Curve {
            checkpoint,
            policy,
            seed,
            out,
            adversarial,
            metric,
            coop_alpha,
            coop_beta,
            max_groups,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let kind = PolicyKind::from_str(&policy)?;
            let prep = prepare_for(&ck)?;
            let coop = match (coop_alpha, coop_beta) {
                (Some(a), Some(b)) => Some(CoopConfig::new(a, b)?),
                _ => None,
            };
            let pol = build_policy(kind, &ck, &prep.val, &prep.train, coop, seed)?;
            let opts = CurveOptions {
                adversarial,
                max_groups,
                metric: parse_metric(&metric)?,
                model_id: ck.meta.config_hash.clone(),
            };
            let curve = run_curve(&ck.model, &prep.data.test, &pol, seed, &opts)?;
            write_curves_csv(&out, &[&curve])?;
            println!("{} auic {:.6}", curve.policy, auic(&curve));
        }
        Command::CoopGrid { checkpoint, seed, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let prep = prepare_for(&ck)?;
            let grid = grid_search_coop(&ck.model, &prep.val, seed)?;
            println!("alpha {} beta {}", grid.best.alpha, grid.best.beta);
            if let Some(out) = out {
                std::fs::write(&out, serde_json::to_string_pretty(&grid)?)?;
            }
        }
        Command::BcTrain { checkpoint, out, seed } => {
            let mut ck = load_checkpoint(&checkpoint)?;
            let prep = prepare_for(&ck)?;
            let mut rng = RngStream::new(seed).split_named("bc");
            let (bc, report) = bc_train(&ck.model, &prep.train, &BcConfig::default(), &mut rng)?;
            println!("{}", serde_json::to_string(&report)?);
            ck.bc = Some(bc);
            ck.save(&out)?;
        }
        Command::Serve {
            checkpoint,
            bind,
            policy,
            log,
            demo,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let kind = PolicyKind::from_str(&policy)?;
            let prep = prepare_for(&ck).ok();
            let pol = match &prep {
                Some(p) => build_policy(kind, &ck, &p.val, &p.train, None, 0)?,
                None => match kind {
                    PolicyKind::Cva | PolicyKind::Cvi | PolicyKind::Coop => {
                        bail!("{policy} needs the checkpoint's dataset to fit its parameters")
                    }
                    _ => build_policy(kind, &ck, &empty_split(&ck), &empty_split(&ck), None, 0)?,
                },
            };
            let cfg = ServiceConfig {
                policy: pol,
                data: prep.map(|p| p.data.test),
                demo,
                log_path: log,
            };
            let (state, replayed) = AppState::open(ck.model, cfg)?;
            if !replayed.is_empty() {
                eprintln!("replayed {} logged requests", replayed.len());
            }
            let addr = bind_address(bind.as_deref());
            tokio::runtime::Runtime::new()?.block_on(serve(state, &addr))?;
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                bail!("{failed} check(s) failed");
            }
        }
    }
    Ok(())
}

fn empty_split(ck: &Checkpoint) -> conceptlab_core::data::Split {
    let cfg = ck.model.config();
    conceptlab_core::data::Split::new(cfg.n_inputs, cfg.n_classes, cfg.groups.clone(), vec![], vec![], vec![])
        .expect("empty split is valid")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
