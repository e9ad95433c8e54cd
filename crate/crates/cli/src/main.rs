use std::path::{Path, PathBuf};
use std::process::{Child, Command};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use twostep_core::bilevel::BilevelState;
use twostep_core::first_step::LabelingFunctionState;
use twostep_core::harness::config::RunMode;
use twostep_core::harness::run::{
    read_json, run_sensitivity, sensitivity_configs, METRICS_FILE, RESULT_FILE, STEP1_CHECKPOINT, STEP2_CHECKPOINT,
};
use twostep_core::harness::{
    evaluate, load_checkpoint, plot_curves, retain_metrics, run_ablation, run_experiment_with, run_seed, run_step1, run_step2,
    ExperimentConfig, MetricsWriter, PlotKind, SeedResult, DEFAULT_CONFIG_TOML, SENSITIVITY_LAMBDAS,
    SENSITIVITY_MARGINS,
};

#[derive(Parser)]
#[command(name = "twostep", version, about = "Two-step multi-source domain adaptation experiments")]
struct Cli {
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the annotated default config.
    InitConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the labeling function only.
    Step1(ConfigArgs),
    /// Train the target model from an existing first-step checkpoint.
    Step2(ConfigArgs),
    /// Both steps for every seed, then the summary.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run one seed and skip the summary (used by `sweep`).
        #[arg(long, hide = true)]
        worker: bool,
    },
    /// Evaluate a saved model on the target test set.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "final")]
        stage: Stage,
    },
    /// Multi-seed, ablation or sensitivity sweep in separate processes.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "seeds")]
        kind: SweepKind,
        /// Concurrent worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        margins: Option<Vec<f64>>,
    },
    /// Render SVG curves from a run or experiment directory.
    Plot {
        dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "losses,threshold,accuracy")]
        which: Vec<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Stage {
    First,
    Final,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepKind {
    Seeds,
    Ablation,
    Sensitivity,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set lambda=0.01`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run only this seed.
    #[arg(long, env = "TWOSTEP_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "TWOSTEP_OUTPUT_ROOT")]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// Continue from existing checkpoints.
    #[arg(long)]
    resume: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seeds=[{s}]"));
        }
        if let Some(d) = &self.output_dir {
            overrides.push(format!("output_dir={}", toml_string(&d.to_string_lossy())));
        }
        if let Some(n) = &self.name {
            overrides.push(format!("name={}", toml_string(n)));
        }
        if let Some(m) = &self.mode {
            overrides.push(format!("mode={}", toml_string(m)));
        }
        if let Some(l) = self.lambda {
            overrides.push(format!("lambda={l:?}"));
        }
        if let Some(m) = self.margin {
            overrides.push(format!("margin={m:?}"));
        }
        let cfg = match &self.config {
            Some(p) => ExperimentConfig::load_with_overrides(p, &overrides),
            None => ExperimentConfig::default().with_overrides(&overrides),
        };
        Ok(cfg?)
    }
}

fn toml_string(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

static LOG_LEVEL: OnceLock<String> = OnceLock::new();

fn main() {
    let cli = Cli::parse();
    LOG_LEVEL.get_or_init(|| std::env::var("RUST_LOG").unwrap_or_else(|_| cli.log_level.clone()));
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(&cli.log_level)).init();
    if let Err(e) = dispatch(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::InitConfig { out } => match out {
            Some(p) => std::fs::write(&p, DEFAULT_CONFIG_TOML).with_context(|| format!("writing {}", p.display()))?,
            None => print!("{DEFAULT_CONFIG_TOML}"),
        },
        Cmd::Step1(args) => {
            let cfg = args.resolve()?;
            for &seed in &cfg.seeds {
                let dir = cfg.seed_dir(seed);
                std::fs::create_dir_all(&dir)?;
                let ds = cfg.load_dataset(seed)?;
                let path = dir.join(METRICS_FILE);
                if !args.resume {
                    retain_metrics(&path, |_| false)?;
                }
                let mut m = MetricsWriter::open(&path)?;
                let st = run_step1(&cfg, seed, &ds, &dir, args.resume, &mut m)?;
                println!("seed {seed}: first step done after {} steps ({})", st.step, dir.display());
            }
        }
        Cmd::Step2(args) => {
            let cfg = args.resolve()?;
            if cfg.mode == RunMode::None {
                bail!("mode `none` has no second step");
            }
            for &seed in &cfg.seeds {
                let dir = cfg.seed_dir(seed);
                let labeling: LabelingFunctionState =
                    load_checkpoint(&dir.join(STEP1_CHECKPOINT), Some(&cfg.run_hash(seed)))
                        .context("no usable first-step checkpoint; run `step1` first")?;
                let ds = cfg.load_dataset(seed)?;
                let path = dir.join(METRICS_FILE);
                if !args.resume {
                    retain_metrics(&path, |r| r.phase == "step1")?;
                }
                let mut m = MetricsWriter::open(&path)?;
                let st = run_step2(&cfg, seed, &ds, labeling, &dir, args.resume, &mut m)?;
                println!(
                    "seed {seed}: second step done, {} outer steps, bilevel from epoch {:?}",
                    st.outer_steps, st.bilevel_started
                );
            }
        }
        Cmd::Run { cfg: args, worker } => {
            let cfg = args.resolve()?;
            if worker {
                for &seed in &cfg.seeds {
                    run_seed(&cfg, seed, args.resume)?;
                }
            } else {
                let resume = args.resume;
                let summary = run_experiment_with(&cfg, &mut |c, s| run_seed(c, s, resume))?;
                print!("{}", summary.render_table());
            }
        }
        Cmd::Eval { cfg: args, stage } => {
            let cfg = args.resolve()?;
            for &seed in &cfg.seeds {
                let dir = cfg.seed_dir(seed);
                let ds = cfg.load_dataset(seed)?;
                let test = ds
                    .target_test()
                    .or_else(|| ds.target_train_eval_set())
                    .context("target domain has no evaluation labels")?;
                let hash = cfg.run_hash(seed);
                let step2 = dir.join(STEP2_CHECKPOINT);
                let (label, ev) = match stage {
                    Stage::Final if step2.exists() => {
                        let st: BilevelState = load_checkpoint(&step2, Some(&hash))?;
                        ("second_step", evaluate(&st.target.net, &st.target.psi, &test)?)
                    }
                    _ => {
                        let st: LabelingFunctionState = load_checkpoint(&dir.join(STEP1_CHECKPOINT), Some(&hash))?;
                        ("first_step", evaluate(&st.net, &st.theta, &test)?)
                    }
                };
                let out = dir.join(format!("confusion_{label}.json"));
                std::fs::write(&out, serde_json::to_vec_pretty(&ev)?)?;
                println!("seed {seed} {label}: accuracy {:.4} ({})", ev.accuracy, out.display());
            }
        }
        Cmd::Sweep {
            cfg: args,
            kind,
            jobs,
            lambdas,
            margins,
        } => sweep(&args, kind, jobs.max(1), lambdas, margins)?,
        Cmd::Plot { dir, which } => {
            for w in which {
                let kind: PlotKind = w.parse()?;
                for p in plot_curves(&dir, kind)? {
                    println!("{}", p.display());
                }
            }
        }
    }
    Ok(())
}

/// Writes `cfg` as a standalone file for worker processes.
fn write_resolved(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.experiment_dir();
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("resolved.toml");
    std::fs::write(&path, cfg.to_toml_string()?)?;
    Ok(path)
}

fn spawn_worker(config: &Path, seed: u64, resume: bool) -> Result<Child> {
    let exe = std::env::current_exe()?;
    let mut cmd = Command::new(exe);
    if let Some(level) = LOG_LEVEL.get() {
        cmd.env("RUST_LOG", level);
    }
    cmd.args(["run", "--worker", "--config"]).arg(config).args(["--seed", &seed.to_string()]);
    if resume {
        cmd.arg("--resume");
    }
    Ok(cmd.spawn()?)
}

/// Runs every `(config, seed)` job in its own process, at most `jobs` at a
/// time.
fn run_workers(configs: &[ExperimentConfig], jobs: usize, resume: bool) -> Result<()> {
    let mut queue = Vec::new();
    for cfg in configs {
        let path = write_resolved(cfg)?;
        for &s in &cfg.seeds {
            queue.push((path.clone(), s));
        }
    }
    queue.reverse();
    let mut running: Vec<(Child, PathBuf, u64)> = Vec::new();
    let mut failures = Vec::new();
    while !queue.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some((path, seed)) = queue.pop() else { break };
            info!("starting {} seed {seed}", path.display());
            running.push((spawn_worker(&path, seed, resume)?, path, seed));
        }
        let (mut child, path, seed) = running.remove(0);
        let status = child.wait()?;
        if !status.success() {
            failures.push(format!("{} seed {seed}", path.display()));
        }
    }
    if !failures.is_empty() {
        bail!("worker runs failed: {}", failures.join("; "));
    }
    Ok(())
}

fn collect_result(cfg: &ExperimentConfig, seed: u64) -> twostep_core::Result<SeedResult> {
    read_json(&cfg.seed_dir(seed).join(RESULT_FILE))
}

fn sweep(
    args: &ConfigArgs,
    kind: SweepKind,
    jobs: usize,
    lambdas: Option<Vec<f64>>,
    margins: Option<Vec<f64>>,
) -> Result<()> {
    let base = args.resolve()?;
    match kind {
        SweepKind::Seeds => {
            run_workers(std::slice::from_ref(&base), jobs, args.resume)?;
            let summary = run_experiment_with(&base, &mut collect_result)?;
            print!("{}", summary.render_table());
        }
        SweepKind::Ablation => {
            run_workers(&base.ablation(), jobs, args.resume)?;
            let table = run_ablation(&base, &mut collect_result)?;
            print!("{}", table.render());
        }
        SweepKind::Sensitivity => {
            let lambdas = lambdas.unwrap_or_else(|| SENSITIVITY_LAMBDAS.to_vec());
            let margins = margins.unwrap_or_else(|| SENSITIVITY_MARGINS.to_vec());
            let configs: Vec<ExperimentConfig> = sensitivity_configs(&base, &lambdas, &margins)
                .into_iter()
                .map(|(_, _, c)| c)
                .collect();
            run_workers(&configs, jobs, args.resume)?;
            let report = run_sensitivity(&base, &lambdas, &margins, &mut collect_result)?;
            for p in &report.points {
                println!("{} = {}: {}", p.param, p.value, p.target.display_percent());
            }
            for param in ["lambda", "margin"] {
                if let Some(s) = report.spread(param) {
                    println!("{param} spread: {:.2} points", 100.0 * s);
                }
            }
        }
    }
    Ok(())
}
