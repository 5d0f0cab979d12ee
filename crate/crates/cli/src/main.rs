use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use snip_core::checkpoint;
use snip_core::divergence::DivergenceWeights;
use snip_core::eval::evaluate_estimates;
use snip_core::rng::{purpose, RngStream};
use snip_core::stats::{snapshot, StatsBundle};
use snip_core::train::{eval_batch, plan, train, write_run_report, RunConfig};

#[derive(Parser)]
#[command(name = "snip", version, about = "Adaptive FP8/FP4 mixed-precision training planner and simulator")]
struct Cli {
    /// Overrides the seed of any loaded run config.
    #[arg(long, env = "SNIP_SEED", global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fake-quantized training with periodic policy planning.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (defaults to the config's `out_dir`, then `run/` next to the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistics passes on a checkpoint; writes a stats bundle.
    SnapshotStats {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config (defaults to `config.json` beside the checkpoint).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Divergence analysis and ILP on a stats bundle; writes a policy.
    Plan {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long = "et")]
        e_t: f64,
        #[arg(long, default_value_t = 1)]
        groups: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the divergence report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        w_l: f64,
        #[arg(long, default_value_t = 1.0)]
        w_w: f64,
        #[arg(long)]
        use_forward_profile: bool,
        #[arg(long, default_value_t = 30.0)]
        time_limit_secs: f64,
    },
    /// Estimated versus measured per-layer divergence on a checkpoint.
    EvalEstimates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Catalog option applied to each layer (defaults to all-FP4).
        #[arg(long)]
        option: Option<usize>,
        /// Also write the correlations and rows as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Loss curve, policy heatmap and summary for a run directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg = RunConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Config for a checkpoint: explicit, beside the checkpoint, or derived from
/// the checkpoint metadata.
fn checkpoint_config(ckpt: &Path, explicit: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    if let Some(p) = explicit {
        return load_config(p, seed);
    }
    if let Some(p) = ckpt.parent().map(|d| d.join("config.json")).filter(|p| p.exists()) {
        return load_config(&p, seed);
    }
    let meta = checkpoint::load_meta(ckpt)?;
    let mut cfg = RunConfig::toy(0.0, meta.step, meta.config.seed);
    cfg.model = meta.config;
    cfg.adamw = meta.adamw;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let dir = out
                .or_else(|| cfg.out_dir.as_ref().map(|d| base.join(d)))
                .unwrap_or_else(|| base.join("run"));
            info!("training {} steps into {}", cfg.steps, dir.display());
            let outcome = train(&cfg, Some(&dir))?;
            println!(
                "steps {} final loss {:.6} smoothed {:.6} cycles {}",
                outcome.log.steps.len(),
                outcome.log.steps.last().map(|s| s.loss).unwrap_or(f64::NAN),
                outcome.smoothed_loss(cfg.smooth_window),
                outcome.log.cycles.len()
            );
        }
        Command::SnapshotStats { checkpoint: ckpt, out, config } => {
            let cfg = checkpoint_config(&ckpt, config.as_deref(), cli.seed)?;
            let (model, opt, meta) = checkpoint::load_with_optimizer(&ckpt)?;
            let batch = eval_batch(&cfg)?;
            let rng = RngStream::new(cfg.seed).derive_path(&[purpose::PLAN, meta.step]);
            let bundle = snapshot(&model, &opt, &batch, &cfg.catalog(), meta.step, cfg.eps_rel, &rng)?;
            write(&out, &bundle.to_json()?)?;
            println!("bundle {} layers, baseline loss {:.6}", bundle.layers.len(), bundle.baseline_loss);
        }
        Command::Plan {
            bundle,
            e_t,
            groups,
            out,
            report,
            w_l,
            w_w,
            use_forward_profile,
            time_limit_secs,
        } => {
            if !(time_limit_secs > 0.0) {
                bail!("time limit must be positive");
            }
            let text = fs::read_to_string(&bundle).with_context(|| format!("reading {}", bundle.display()))?;
            let b = StatsBundle::from_json(&text)?;
            let weights = DivergenceWeights {
                w_l,
                w_w,
                use_forward_profile,
            };
            let p = plan(&b, e_t, groups, weights, Duration::from_secs_f64(time_limit_secs))?;
            write(&out, &p.policy.to_json()?)?;
            if let Some(r) = report {
                write(&r, &p.report.to_json()?)?;
            }
            println!(
                "total_q {:e} fp4 fraction {:.6} optimal {}",
                p.solution.total_q, p.solution.total_e, p.solution.optimal
            );
        }
        Command::EvalEstimates {
            checkpoint: ckpt,
            out,
            config,
            option,
            json,
        } => {
            let cfg = checkpoint_config(&ckpt, config.as_deref(), cli.seed)?;
            let (model, opt, _) = checkpoint::load_with_optimizer(&ckpt)?;
            let catalog = cfg.catalog();
            let option = match option {
                Some(o) => o,
                None => catalog.all_fp4().context("catalog lacks an all-FP4 option")?,
            };
            let batch = eval_batch(&cfg)?;
            let rng = RngStream::new(cfg.seed).derive(purpose::EVAL);
            let (report, _) = evaluate_estimates(&model, &opt, &batch, &catalog, option, cfg.eps_rel, &rng)?;
            write(&out, &report.to_csv()?)?;
            if let Some(j) = json {
                write(&j, &serde_json::to_string_pretty(&report)?)?;
            }
            let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "option {} ({}) dL spearman {} pearson {} | dW spearman {} pearson {}",
                option,
                report.label,
                f(report.spearman_dl),
                f(report.pearson_dl),
                f(report.spearman_dw),
                f(report.pearson_dw)
            );
        }
        Command::Report { dir } => {
            let s = write_run_report(&dir)?;
            if !s.missing.is_empty() {
                eprintln!("warning: partial report, missing {}", s.missing.join(", "));
            }
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
