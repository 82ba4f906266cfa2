use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tscnc::attacks::Attack;
use tscnc::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use tscnc::data::{load_dataset, Dataset};
use tscnc::linalg::Kappa;
use tscnc::metrics::{check_sparsity_bound, condition_report, LipschitzNorm};
use tscnc::pruning::prune_report;
use tscnc::report::write_metrics;
use tscnc::trainer::{evaluate, prune_network, run_tscnc, TrainConfig};
use tscnc::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "tscnc",
    version,
    about = "Sparse adversarial training with a condition-number constraint"
)]
struct Cli {
    /// Overrides the seed from the config or checkpoint.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for evaluation and metric estimation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Warm up, prune and fine-tune; writes a checkpoint and per-epoch metrics.
    Train {
        /// JSON training config; unspecified fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Computes masks for a dense checkpoint and writes the pruned checkpoint.
    Prune {
        /// JSON config; defaults to the one stored in the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Clean and robust accuracy on a test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated attacks, e.g. `fgsm,pgd:eps=8/255:alpha=2/255:steps=10`.
        #[arg(
            long = "attacks",
            alias = "attack",
            value_delimiter = ',',
            default_values_t = ["fgsm".to_string(), "pgd".to_string()]
        )]
        attacks: Vec<String>,
        #[command(flatten)]
        data: DataArgs,
        /// Also write the results as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-layer condition numbers, sparsity and the Lipschitz/condition bound.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Radius of the ball the Lipschitz constant is estimated over.
        #[arg(long, default_value_t = 0.1)]
        radius: f64,
        #[arg(long, value_enum, default_value_t = Norm::L2)]
        norm: Norm,
        /// Random points drawn per estimate.
        #[arg(long, default_value_t = 200)]
        draws: usize,
        /// Number of test points to check the bound at.
        #[arg(long, default_value_t = 1)]
        points: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset id; defaults to the one in the checkpoint's config.
    #[arg(long)]
    data: Option<String>,
    /// Use only the first N test samples (0 = all).
    #[arg(long, default_value_t = 0)]
    samples: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Norm {
    L1,
    L2,
}

impl From<Norm> for LipschitzNorm {
    fn from(n: Norm) -> Self {
        match n {
            Norm::L1 => LipschitzNorm::L1,
            Norm::L2 => LipschitzNorm::L2,
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Validation(_)) => EXIT_CONFIG,
        Some(Error::Format { .. } | Error::Io { .. } | Error::Dimension(_)) => EXIT_DATA,
        Some(Error::Divergence { .. }) => EXIT_DIVERGED,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .parse_default_env()
        .format_timestamp(None)
        .init();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
    {
        warn!("could not size the thread pool: {e}");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { config, out } => train(cli, config.as_deref(), out),
        Command::Prune {
            config,
            checkpoint,
            out,
        } => prune(cli, config.as_deref(), checkpoint, out),
        Command::Evaluate {
            checkpoint,
            attacks,
            data,
            json,
        } => evaluate_cmd(cli, checkpoint, attacks, data, json.as_deref()),
        Command::Inspect {
            checkpoint,
            data,
            radius,
            norm,
            draws,
            points,
            json,
        } => inspect(
            cli,
            checkpoint,
            data,
            *radius,
            (*norm).into(),
            *draws,
            *points,
            json.as_deref(),
        ),
    }
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(TrainConfig::from_json(&text)?)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(cli: &Cli, config: Option<&Path>, out: &Path) -> Result<()> {
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.dataset, cfg.seed)?;
    info!(
        "{}: {} train / {} test samples",
        cfg.dataset,
        train.len(),
        test.len()
    );
    create_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let outcome = match run_tscnc(&cfg, &train, &test, None) {
        Ok(o) => o,
        Err(Error::Divergence {
            epoch,
            message,
            record,
        }) => {
            write_metrics(std::slice::from_ref(&*record), out.join("metrics"))?;
            return Err(Error::Divergence {
                epoch,
                message,
                record,
            }
            .into());
        }
        Err(e) => return Err(e.into()),
    };
    write_metrics(&outcome.records, out.join("metrics"))?;
    write_json(&out.join("prune_report.json"), &outcome.prune)?;
    let ckpt = Checkpoint {
        architecture: cfg.architecture.clone(),
        net: outcome.net,
        state: Some(outcome.state),
        epoch: cfg.epochs,
        config: Some(cfg),
    };
    save_checkpoint(out.join("model.ckpt"), &ckpt)?;
    if let Some(last) = outcome.records.last() {
        println!(
            "epoch {}: clean {:.4}, sparsity {:.4}, kappa_max {}",
            last.epoch,
            last.clean_acc,
            last.sparsity,
            fmt_kappa(last.kappa_max)
        );
        for a in &last.robust_acc {
            println!("  {}: {:.4}", a.attack, a.accuracy);
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn prune(cli: &Cli, config: Option<&Path>, checkpoint: &Path, out: &Path) -> Result<()> {
    let mut ckpt = load_checkpoint(checkpoint)?;
    let mut cfg = match config {
        Some(p) => read_config(p)?,
        None => ckpt
            .config
            .clone()
            .ok_or_else(|| Error::Config("checkpoint has no config; pass --config".into()))?,
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (train, _) = load_dataset(&cfg.dataset, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let report = prune_network(&mut ckpt.net, &cfg, &train, &mut rng)?;
    ckpt.state = None;
    ckpt.config = Some(cfg);
    create_dir(out)?;
    save_checkpoint(out.join("model.ckpt"), &ckpt)?;
    write_json(&out.join("prune_report.json"), &report)?;
    println!(
        "pruned {} of {} weights ({:.4})",
        report.pruned, report.total, report.global_ratio
    );
    for l in &report.layers {
        println!(
            "  layer {:>2}: {:>7} / {:<7} {:.4}",
            l.layer, l.pruned, l.total, l.ratio
        );
    }
    Ok(())
}

fn test_split(ckpt: &Checkpoint, args: &DataArgs, seed: u64) -> Result<Dataset> {
    let id = match (&args.data, &ckpt.config) {
        (Some(id), _) => id.clone(),
        (None, Some(c)) => c.dataset.clone(),
        (None, None) => bail!(Error::Config(
            "checkpoint has no config; pass --data".into()
        )),
    };
    let (_, test) = load_dataset(&id, seed)?;
    if test.sample_shape() != ckpt.net.input_shape() || test.classes > ckpt.net.classes() {
        bail!(Error::Dimension(format!(
            "dataset {id} (shape {:?}, {} classes) does not fit the network (shape {:?}, {} classes)",
            test.sample_shape(),
            test.classes,
            ckpt.net.input_shape(),
            ckpt.net.classes()
        )));
    }
    Ok(if args.samples > 0 {
        test.head(args.samples)
    } else {
        test
    })
}

fn fmt_kappa(k: Kappa) -> String {
    match k.finite() {
        Some(v) => format!("{v:.4}"),
        None => "inf".into(),
    }
}

fn seed_for(cli: &Cli, ckpt: &Checkpoint) -> u64 {
    cli.seed
        .or(ckpt.config.as_ref().map(|c| c.seed))
        .unwrap_or(0)
}

fn evaluate_cmd(
    cli: &Cli,
    checkpoint: &Path,
    attacks: &[String],
    data: &DataArgs,
    json: Option<&Path>,
) -> Result<()> {
    let attacks = attacks
        .iter()
        .map(|s| s.parse::<Attack>())
        .collect::<tscnc::Result<Vec<_>>>()?;
    let ckpt = load_checkpoint(checkpoint)?;
    let seed = seed_for(cli, &ckpt);
    let test = test_split(&ckpt, data, seed)?;
    let eval = evaluate(&ckpt.net, &test, &attacks, seed)?;
    println!("{:<12} {:>8}", "attack", "accuracy");
    println!("{:<12} {:>8.4}", "clean", eval.clean_acc);
    for a in &eval.robust_acc {
        println!("{:<12} {:>8.4}", a.attack, a.accuracy);
    }
    if let Some(p) = json {
        write_json(
            p,
            &serde_json::json!({
                "samples": test.len(),
                "attacks": attacks.iter().map(ToString::to_string).collect::<Vec<_>>(),
                "result": eval,
            }),
        )?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn inspect(
    cli: &Cli,
    checkpoint: &Path,
    data: &DataArgs,
    radius: f64,
    norm: LipschitzNorm,
    draws: usize,
    points: usize,
    json: Option<&Path>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let net = &ckpt.net;
    let cond = condition_report(net)?;
    let sparsity = prune_report(net);
    println!("architecture {} (epoch {})", ckpt.architecture, ckpt.epoch);
    println!(
        "{:>5} {:>12} {:>12} {:>12} {:>6} {:>8}",
        "layer", "sigma_max", "sigma_min", "kappa", "rank", "pruned"
    );
    for l in &cond.layers {
        let pruned = sparsity
            .layers
            .iter()
            .find(|p| p.layer == l.layer)
            .map_or(0.0, |p| p.ratio);
        println!(
            "{:>5} {:>12.6} {:>12.6e} {:>12} {:>6} {:>8.4}",
            l.layer,
            l.sigma_max,
            l.sigma_min,
            fmt_kappa(l.kappa),
            l.rank,
            pruned
        );
    }
    println!(
        "kappa_max {}  sparsity {:.4}",
        fmt_kappa(cond.max_kappa),
        sparsity.global_ratio
    );

    let mut checks = Vec::new();
    let have_data = data.data.is_some() || ckpt.config.is_some();
    if points > 0 && have_data {
        let seed = seed_for(cli, &ckpt);
        let test = test_split(&ckpt, data, seed)?;
        for i in 0..points.min(test.len()) {
            let (x, _) = test.batch(&[i])?;
            let logits = net.logits(&x)?;
            let mut order: Vec<usize> = (0..net.classes()).collect();
            order.sort_by(|&a, &b| logits.row(0)[b].total_cmp(&logits.row(0)[a]));
            let Some(&k) = order.get(1) else { break };
            let r = check_sparsity_bound(net, &x, k, radius, norm, draws, seed ^ i as u64)?;
            println!(
                "point {i}: L_hat {:.6}, c1 {:.6}, c2 {:.6}, L/(2||W||) <= kappa on all layers: {}",
                r.lipschitz, r.c1, r.c2, r.holds
            );
            for l in r.layers.iter().filter(|l| !l.holds) {
                println!(
                    "  layer {} violates: {:.6} > {}",
                    l.layer,
                    l.lhs,
                    fmt_kappa(l.kappa)
                );
            }
            checks.push(r);
        }
    } else if points > 0 {
        warn!("no dataset known for this checkpoint; skipping the bound check (pass --data)");
    }
    if let Some(p) = json {
        write_json(
            p,
            &serde_json::json!({
                "architecture": ckpt.architecture,
                "epoch": ckpt.epoch,
                "condition": cond,
                "sparsity": sparsity,
                "bound_checks": checks,
            }),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;

    #[test]
    fn error_kinds_map_to_exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into()).into()), EXIT_CONFIG);
        assert_eq!(
            exit_code(
                &Error::Format {
                    offset: 3,
                    message: "x".into()
                }
                .into()
            ),
            EXIT_DATA
        );
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
