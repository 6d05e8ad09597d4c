//! Command-line driver: training runs, verification reports, and the
//! fixed-versus-adaptive pseudo-time sweep.

mod config;
mod metrics;
mod verify_cmd;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use ptpinn_core::trainer::{self, TrainOutcome};

#[derive(Parser)]
#[command(name = "ptpinn", version, about = "PINN training with adaptive pseudo-time stepping")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics, checkpoints, and a manifest.
    Train(TrainArgs),
    /// Numerical verification reports (theorem2, fig5, gradients, jets).
    Verify(verify_cmd::VerifyArgs),
    /// Fixed-tau grid plus the adaptive variant, with a comparison table.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML config file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<String>,
    /// baseline | fixed-pts | adaptive-pts
    #[arg(long)]
    method: Option<String>,
    /// Pseudo-time step for --method fixed-pts.
    #[arg(long)]
    tau: Option<f64>,
    /// resample | frozen
    #[arg(long)]
    sampling: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// pirate | mlp
    #[arg(long)]
    arch: Option<String>,
    /// soap | adam
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    problem: String,
    /// Pseudo-time step grid (defaults to 0.01 0.1 1 10 100).
    #[arg(long, num_args = 1..)]
    taus: Option<Vec<f64>>,
    /// Seeds to average over.
    #[arg(long, num_args = 1.., default_values_t = [0u64])]
    seeds: Vec<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long, default_value = "runs/sweep")]
    out: PathBuf,
    /// Also run the adaptive variant per seed.
    #[arg(long, default_value_t = true)]
    adaptive: bool,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args).map(|_| ()),
        Cmd::Verify(args) => verify_cmd::run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn resolve_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &args.problem {
        cfg.problem = v.clone();
    }
    if let Some(v) = &args.method {
        cfg.method = v.clone();
    }
    if args.tau.is_some() {
        cfg.tau = args.tau;
    }
    if let Some(v) = &args.sampling {
        cfg.sampling = v.clone();
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.iters {
        cfg.iters = v;
    }
    if let Some(v) = args.width {
        cfg.width = v;
    }
    if let Some(v) = args.blocks {
        cfg.blocks = v;
    }
    if let Some(v) = &args.arch {
        cfg.arch = v.clone();
    }
    if let Some(v) = &args.optimizer {
        cfg.optimizer = v.clone();
    }
    // Steady problems have no causal weighting.
    if let Ok(spec) = ptpinn_core::ProblemSpec::by_name(&cfg.problem) {
        if !spec.supports_causal() {
            cfg.causal = false;
        }
    }
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<TrainOutcome> {
    let cfg = resolve_config(&args)?;
    let train_cfg = cfg.to_train_config()?;
    let out_dir = args.out.clone().unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{}-{}-seed{}",
            cfg.problem, cfg.method, cfg.seed
        ))
    });
    std::fs::create_dir_all(&out_dir)?;

    let outcome = trainer::train_with(&train_cfg, None, Some(&out_dir))?;
    metrics::write_metrics_file(&outcome.history, &out_dir.join("metrics.csv"))?;
    metrics::write_manifest_file(&cfg, &outcome.history, &out_dir.join("manifest.toml"))?;

    let last = outcome.history.records.last();
    println!(
        "run complete: {} iters, final total loss {}",
        outcome.history.records.len(),
        last.map_or(f64::NAN, |r| r.total)
    );
    if let Some(&(it, err)) = outcome.history.errors.last() {
        println!("relative L2 error at iter {it}: {err:.4e}");
    }
    println!("artifacts in {}", out_dir.display());
    Ok(outcome)
}

struct SweepCell {
    label: String,
    tau: Option<f64>,
    losses: Vec<f64>,
    errors: Vec<f64>,
}

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<()> {
    let taus = args
        .taus
        .clone()
        .unwrap_or_else(|| vec![0.01, 0.1, 1.0, 10.0, 100.0]);
    std::fs::create_dir_all(&args.out)?;

    let mut cells: Vec<SweepCell> = Vec::new();
    let mut run_variant = |label: String, method: String, tau: Option<f64>| -> anyhow::Result<SweepCell> {
        let mut losses = Vec::new();
        let mut errors = Vec::new();
        for &seed in &args.seeds {
            let train_args = TrainArgs {
                config: None,
                problem: Some(args.problem.clone()),
                method: Some(method.clone()),
                tau,
                sampling: None,
                seed: Some(seed),
                iters: args.iters,
                width: args.width,
                blocks: args.blocks,
                arch: None,
                optimizer: None,
                out: Some(args.out.join(format!("{label}-seed{seed}"))),
            };
            let outcome = cmd_train(train_args)?;
            let final_loss = outcome
                .history
                .records
                .last()
                .map_or(f64::NAN, |r| r.total);
            let final_err = outcome
                .history
                .errors
                .last()
                .map_or(f64::NAN, |&(_, e)| e);
            losses.push(final_loss);
            errors.push(final_err);
        }
        Ok(SweepCell {
            label,
            tau,
            losses,
            errors,
        })
    };

    for &tau in &taus {
        let cell = run_variant(format!("fixed-tau{tau}"), "fixed-pts".into(), Some(tau))?;
        cells.push(cell);
    }
    if args.adaptive {
        let cell = run_variant("adaptive".into(), "adaptive-pts".into(), None)?;
        cells.push(cell);
    }

    // Comparison table; mean +- std over seeds.
    let stats = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let mut table = String::new();
    table.push_str(&format!(
        "{:<16} {:>14} {:>10} {:>14} {:>10}\n",
        "variant", "loss(mean)", "loss(std)", "rel_l2(mean)", "rel_l2(std)"
    ));
    let mut csv = String::from("variant,tau,loss_mean,loss_std,rel_l2_mean,rel_l2_std\n");
    for cell in &cells {
        let (lm, ls) = stats(&cell.losses);
        let (em, es) = stats(&cell.errors);
        table.push_str(&format!(
            "{:<16} {:>14.6e} {:>10.2e} {:>14.6e} {:>10.2e}\n",
            cell.label, lm, ls, em, es
        ));
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            cell.label,
            cell.tau.map_or(String::new(), |t| t.to_string()),
            lm,
            ls,
            em,
            es
        ));
    }

    // Over the fixed grid: does picking tau by loss pick the best error?
    let fixed: Vec<&SweepCell> = cells.iter().filter(|c| c.tau.is_some()).collect();
    if fixed.len() >= 2 {
        let argmin = |key: &dyn Fn(&SweepCell) -> f64| {
            fixed
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| key(a).partial_cmp(&key(b)).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        };
        let by_loss = argmin(&|c: &SweepCell| stats(&c.losses).0);
        let by_err = argmin(&|c: &SweepCell| stats(&c.errors).0);
        if by_loss != by_err {
            table.push_str(
                "\nnote: the training loss is not a reliable criterion for tuning tau here\n",
            );
            table.push_str(&format!(
                "      (argmin by loss: {}, argmin by error: {})\n",
                fixed[by_loss].label, fixed[by_err].label
            ));
        }
    }

    print!("{table}");
    std::fs::write(args.out.join("sweep.txt"), &table)?;
    std::fs::write(args.out.join("sweep.csv"), &csv)?;
    println!("sweep artifacts in {}", args.out.display());
    Ok(())
}
