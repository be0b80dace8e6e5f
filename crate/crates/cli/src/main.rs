use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use uqdqn::agent::write_atomic;
use uqdqn::harness::{
    emit_plot_data, reevaluate, run_experiment, run_grid, ExperimentConfig, FigureKind, GridSpec, RunManifest,
    MANIFEST_FILE, OUTPUT_ROOT_VAR, WORKERS_VAR,
};
use uqdqn::heads::Head;
use uqdqn::metrics::{asymptotic_diagnostics, probe_states, DELTA_GRID};

#[derive(Parser)]
#[command(name = "uqdqn", version, about = "Uncertainty-aware DQN experiments")]
struct Cli {
    /// Directory that receives run directories.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR, default_value = "runs")]
    output_root: PathBuf,
    /// Seeds trained in parallel (default: available cores).
    #[arg(long, global = true, env = WORKERS_VAR)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, checkpoint and evaluate every seed of an experiment config.
    Train {
        config: PathBuf,
        /// Run only these seeds instead of the config's list.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
    },
    /// Re-evaluate the stored checkpoints of a finished run.
    Eval {
        /// Run directory or its manifest.json.
        manifest: PathBuf,
        /// Run the perturbation grid on every checkpoint.
        #[arg(long)]
        perturb_all: bool,
    },
    /// Write one CSV per figure panel.
    PlotData {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        figure: FigureKind,
        #[arg(long, default_value = "plot-data")]
        out: PathBuf,
        /// Steps per bin for uncertainty curves.
        #[arg(long, default_value_t = 100)]
        bin: usize,
    },
    /// Far-from-data checks on the final checkpoint of every seed.
    Diagnose {
        manifest: PathBuf,
        /// Number of in-distribution probe states.
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Learning-rate sweep.
    Grid { spec: PathBuf },
}

fn load_manifest(path: &Path) -> Result<RunManifest> {
    let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    RunManifest::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn summarize(m: &RunManifest) -> Result<()> {
    println!("{} ({}): {}", m.name, m.config_hash, m.root.display());
    for rec in &m.seeds {
        if rec.completed() {
            let r = m.final_report(rec)?;
            println!(
                "  seed {}: final reward {:.1} ± {:.1}, AUC-ROC {:.3}, AUC-PR {:.3}",
                rec.seed, r.id_reward_mean, r.id_reward_sem, r.auc_roc, r.auc_pr
            );
        } else {
            println!("  seed {}: {:?}", rec.seed, rec.status);
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let workers = match cli.workers {
        Some(0) => bail!("{WORKERS_VAR} must be positive"),
        Some(n) => n,
        None => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    match cli.command {
        Command::Train { config, seeds } => {
            let mut c = ExperimentConfig::load(&config)?;
            if !seeds.is_empty() {
                c.seeds = seeds;
                c.validate()?;
            }
            log::info!("training {} on {} seed(s)", c.name, c.seeds.len());
            let m = run_experiment(&c, &cli.output_root, workers)?;
            summarize(&m)?;
            if m.completed().count() < m.seeds.len() {
                bail!("{} of {} seeds failed", m.seeds.len() - m.completed().count(), m.seeds.len());
            }
        }
        Command::Eval { manifest, perturb_all } => {
            let m = load_manifest(&manifest)?;
            let reports = reevaluate(&m, perturb_all)?;
            log::info!("re-evaluated {} checkpoints", reports.len());
            summarize(&m)?;
        }
        Command::PlotData { manifests, figure, out, bin } => {
            let ms = manifests.iter().map(|p| load_manifest(p)).collect::<Result<Vec<_>>>()?;
            for p in emit_plot_data(&ms, figure, bin, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Diagnose { manifest, probes } => {
            let m = load_manifest(&manifest)?;
            let mut all_pass = true;
            for rec in m.completed() {
                let ck = m.final_checkpoint(rec)?;
                let head = uqdqn::heads::AnyHead::restore(&ck.snapshot, 1)?;
                let p = probe_states(&head, m.env, probes, rec.seed)?;
                let rep = asymptotic_diagnostics(&head, &p, &DELTA_GRID)?;
                let path = m.path(&format!("seed-{}/diagnostics.json", rec.seed));
                write_atomic(&path, &serde_json::to_vec_pretty(&rep)?)?;
                match (&rep.summary, &rep.notice) {
                    (Some(s), _) => {
                        all_pass &= rep.passed();
                        println!(
                            "seed {}: {} latent norms monotone in {:.0}% of probes, limit {} (var gap {:?}, evidence ratio {:?})",
                            rec.seed,
                            head.kind().name(),
                            100.0 * s.monotone_share,
                            if s.limit_pass { "reached" } else { "not reached" },
                            s.dkl_max_var_gap,
                            s.postnet_max_ratio
                        );
                    }
                    (None, Some(n)) => println!("seed {}: {n}", rec.seed),
                    (None, None) => {}
                }
            }
            if !all_pass {
                bail!("asymptotic checks failed");
            }
        }
        Command::Grid { spec } => {
            let g = GridSpec::load(&spec)?;
            for m in run_grid(&g, &cli.output_root, workers)? {
                summarize(&m)?;
            }
        }
    }
    Ok(())
}
