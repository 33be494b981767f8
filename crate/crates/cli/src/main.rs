use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use moddiff_core::checkpoint::{compose_modules, load_checkpoint, HybridManifest, Module};
use moddiff_core::eval::{evaluate_series, mean, EvalReport, DEFAULT_EPISODES};
use moddiff_core::pipelines::RunManifest;
use moddiff_core::stats::{
    curve_metrics_with, levene_test, mann_whitney_u, reduction_pct, variance_stats, VarianceStats,
};
use moddiff_core::{generate_dataset, train, Error, HybridAgent, OfflineDataset, Regimen, Tier, ToyEnv, TrainConfig};
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "moddiff", version, about = "Modular diffusion policies for offline RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset from a toy environment.
    GenData(GenDataArgs),
    /// Run a training regimen from a TOML config.
    Train(TrainArgs),
    /// Pair a guidance checkpoint with a policy checkpoint.
    Compose(ComposeArgs),
    /// Evaluate a run, a composed agent or a single policy checkpoint.
    Eval(EvalArgs),
    /// Compare evaluation reports, or reduce published variance metrics.
    Stats(StatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    env: String,
    #[arg(long)]
    tier: Tier,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    guidance: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Path of the hybrid manifest to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Run manifest, hybrid manifest, or policy checkpoint.
    #[arg(long)]
    agent: PathBuf,
    /// Defaults to the run's env for run manifests.
    #[arg(long)]
    env: Option<String>,
    #[arg(long, default_value_t = DEFAULT_EPISODES)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    /// Evaluation reports; the first is the baseline.
    #[arg(long, num_args = 1.., required_unless_present = "metrics", conflicts_with = "metrics")]
    reports: Vec<PathBuf>,
    /// TOML file of precomputed variance metrics, one `[[group]]` per row,
    /// baseline first.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    early_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    User(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericFailure(_) => Failure::Numeric(e.to_string()),
            other => Failure::User(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::User(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!("\n{}", Cli::command().render_usage());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Compose(a) => compose(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let env = ToyEnv::by_name(&a.env)?;
    let ds = generate_dataset(&env, a.tier, a.n, a.seed)?;
    ds.check_coherent()?;
    ds.save(&a.out)?;
    let returns: Vec<f64> = ds.episode_returns().into_iter().map(|r| env.normalized_return(r)).collect();
    println!(
        "wrote {} transitions ({} episodes, tier {}) to {}",
        ds.len(),
        returns.len(),
        a.tier,
        a.out.display()
    );
    println!(
        "normalized episode return: mean {:.2}, min {:.2}, max {:.2}",
        mean(&returns),
        returns.iter().copied().fold(f64::INFINITY, f64::min),
        returns.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    );
    Ok(())
}

fn load_dataset(cfg: &TrainConfig) -> Result<OfflineDataset, Failure> {
    let env = cfg.env()?;
    Ok(match &cfg.dataset {
        Some(path) => OfflineDataset::load_for_env(path, &env)?,
        None => generate_dataset(&env, cfg.dataset_tier, cfg.dataset_size, cfg.dataset_seed)?,
    })
}

fn run_train(a: TrainArgs) -> CmdResult {
    let cfg = TrainConfig::load(&a.config)?;
    let out_dir = a
        .out
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Failure::User("no output directory: set `output_dir` or pass --out".into()))?;
    let ds = load_dataset(&cfg)?;
    println!(
        "training {} / {} for {} steps on {} transitions",
        cfg.algorithm,
        cfg.regimen.label(),
        cfg.total_steps,
        ds.len()
    );
    let run = train(&cfg, &ds)?;
    if cfg.regimen.pretrains_guidance() && cfg.regimen != Regimen::GfdtUnfrozen {
        let first = Module::Guidance(run.checkpoints[0].guidance.clone()).payload_bytes();
        let frozen = run
            .checkpoints
            .iter()
            .all(|c| Module::Guidance(c.guidance.clone()).payload_bytes() == first);
        if !frozen {
            return Err(Failure::Numeric("guidance changed during stage two".into()));
        }
        println!("guidance frozen: payload identical across {} checkpoints", run.checkpoints.len());
    }
    let manifest = run.write_to(&out_dir)?;
    if let Some(last) = run.losses.last() {
        println!(
            "final losses: l_diff {:.4}, l_q {:.4}, l_actor {:.4}",
            last.l_diff, last.l_q, last.l_actor
        );
    }
    println!(
        "wrote {} checkpoints and manifest to {} (config {})",
        manifest.checkpoints.len(),
        out_dir.display(),
        manifest.config_hash
    );
    Ok(())
}

/// Path of `target` as seen from directory `base`, when it lies below it.
fn relative_to(target: &Path, base: &Path) -> PathBuf {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (t, b) = (abs(target), abs(base));
    t.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(t)
}

fn compose(a: ComposeArgs) -> CmdResult {
    let g = load_checkpoint(&a.guidance)?;
    let p = load_checkpoint(&a.policy)?;
    compose_modules(&g, &p, a.lambda)?;
    let base = a.out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let manifest = HybridManifest {
        guidance: relative_to(&a.guidance, base).to_string_lossy().into_owned(),
        policy: relative_to(&a.policy, base).to_string_lossy().into_owned(),
        lambda: a.lambda,
        guidance_hash: g.content_hash(),
        policy_hash: p.content_hash(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Failure::User(e.to_string()))?;
    std::fs::write(&a.out, text)?;
    println!(
        "composed {:?} guidance with {:?} policy (lambda {}) into {}",
        g.kind(),
        p.kind(),
        a.lambda,
        a.out.display()
    );
    Ok(())
}

/// Agents to evaluate, with their checkpoint steps, plus a config hash and
/// seeds for the report metadata.
struct Loaded {
    agents: Vec<(u64, HybridAgent)>,
    env: Option<String>,
    config_hash: String,
    seeds: Vec<u64>,
}

fn load_agents(path: &Path) -> Result<Loaded, Failure> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if path.extension().is_some_and(|e| e == "ckpt") {
        let module = load_checkpoint(path)?;
        let step = module.training_step();
        let hash = module.content_hash();
        let seed = module.seed();
        let policy = module.into_policy()?;
        return Ok(Loaded {
            agents: vec![(step, HybridAgent::new(policy, None, 0.0)?)],
            env: None,
            config_hash: hash,
            seeds: vec![seed],
        });
    }
    let text = std::fs::read_to_string(path)?;
    if let Ok(run) = toml::from_str::<RunManifest>(&text) {
        let seeds = vec![run.config.guidance_seed, run.config.policy_seed];
        return Ok(Loaded {
            agents: run.load_agents(dir)?,
            env: Some(run.config.env_name.clone()),
            config_hash: run.config_hash.clone(),
            seeds,
        });
    }
    let hybrid: HybridManifest = toml::from_str(&text)
        .map_err(|e| Failure::User(format!("{}: neither a run nor a hybrid manifest ({e})", path.display())))?;
    let agent = hybrid.load_agent(dir)?;
    let step = agent.policy.training_steps();
    let seeds = vec![agent.policy.seed()];
    Ok(Loaded {
        agents: vec![(step, agent)],
        env: None,
        config_hash: format!("{}+{}", hybrid.guidance_hash, hybrid.policy_hash),
        seeds,
    })
}

fn eval(a: EvalArgs) -> CmdResult {
    let loaded = load_agents(&a.agent)?;
    let env_name = a
        .env
        .or(loaded.env)
        .ok_or_else(|| Failure::User("--env is required for this agent".into()))?;
    let env = ToyEnv::by_name(&env_name)?;
    let label = a.label.unwrap_or_else(|| a.agent.display().to_string());
    let report = evaluate_series(
        &loaded.agents,
        &env,
        a.episodes,
        a.seed,
        &label,
        &loaded.config_hash,
        loaded.seeds,
    )?;
    report.save(&a.out)?;
    for r in &report.records {
        println!("step {:>8}  mean {:>8.2}  var {:>10.3}", r.step, r.mean, r.variance);
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsFile {
    group: Vec<MetricsGroup>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricsGroup {
    label: String,
    median_var: f64,
    iqr: f64,
    max_var: f64,
    cv: f64,
}

fn cell(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn reductions(test: [f64; 4], base: [f64; 4]) -> [Option<f64>; 4] {
    std::array::from_fn(|i| reduction_pct(test[i], base[i]).ok())
}

fn stats(a: StatsArgs) -> CmdResult {
    if let Some(path) = &a.metrics {
        return stats_from_metrics(path, &a.out);
    }
    let reports = a
        .reports
        .iter()
        .map(EvalReport::load)
        .collect::<Result<Vec<_>, _>>()?;
    let base = &reports[0];
    let var_stats = |r: &EvalReport| -> Result<VarianceStats, Failure> { Ok(variance_stats(&r.variances())?) };
    let summary = |v: &VarianceStats| [v.median_var, v.iqr, v.max_var, v.cv];
    let base_vars = var_stats(base)?;
    let base_final = &base
        .records
        .last()
        .ok_or_else(|| Failure::User("baseline report has no checkpoints".into()))?
        .returns;
    let mut csv = String::from(
        "label,final_mean,peak_gain_pct,auc_gain_pct,early_gain,median_var,iqr,max_var,cv,\
         median_var_reduction_pct,iqr_reduction_pct,max_var_reduction_pct,cv_reduction_pct,\
         mwu_u,mwu_p,levene_f,levene_p\n",
    );
    for r in &reports {
        if r.steps() != base.steps() {
            return Err(Failure::User(format!("report `{}` uses a different checkpoint grid", r.meta.label)));
        }
        let curve = curve_metrics_with(&r.means(), &base.means(), a.early_fraction)?;
        let v = var_stats(r)?;
        let red = reductions(summary(&v), summary(&base_vars));
        let last = &r.records.last().expect("same grid as baseline").returns;
        let mwu = mann_whitney_u(last, base_final).ok();
        let lev = levene_test(&[last.clone(), base_final.clone()]).ok();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.meta.label,
            cell(r.means().last().copied()),
            cell(Some(curve.peak_gain_pct)),
            cell(Some(curve.auc_gain_pct)),
            cell(Some(curve.early_gain)),
            cell(Some(v.median_var)),
            cell(Some(v.iqr)),
            cell(Some(v.max_var)),
            cell(Some(v.cv)),
            cell(red[0]),
            cell(red[1]),
            cell(red[2]),
            cell(red[3]),
            cell(mwu.map(|m| m.u)),
            cell(mwu.map(|m| m.p)),
            cell(lev.map(|l| l.f)),
            cell(lev.map(|l| l.p)),
        ));
        println!(
            "{:<24} final {:>7.2}  auc gain {:>7.2}%  iqr {:>9.4} ({} vs baseline)",
            r.meta.label,
            r.means().last().copied().unwrap_or(f64::NAN),
            curve.auc_gain_pct,
            v.iqr,
            red[1].map(|x| format!("{x:.1}% reduction")).unwrap_or_else(|| "n/a".into())
        );
    }
    std::fs::write(&a.out, csv)?;
    Ok(())
}

fn stats_from_metrics(path: &Path, out: &Path) -> CmdResult {
    let text = std::fs::read_to_string(path)?;
    let file: MetricsFile = toml::from_str(&text).map_err(|e| Failure::User(e.to_string()))?;
    let base = file
        .group
        .first()
        .ok_or_else(|| Failure::User("metrics file lists no groups".into()))?;
    let row = |g: &MetricsGroup| [g.median_var, g.iqr, g.max_var, g.cv];
    let mut csv = String::from(
        "label,median_var,iqr,max_var,cv,median_var_reduction_pct,iqr_reduction_pct,max_var_reduction_pct,cv_reduction_pct\n",
    );
    for g in &file.group {
        let red = reductions(row(g), row(base));
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            g.label,
            g.median_var,
            g.iqr,
            g.max_var,
            g.cv,
            cell(red[0]),
            cell(red[1]),
            cell(red[2]),
            cell(red[3])
        ));
        let shown: Vec<String> = red.iter().map(|r| r.map(|x| format!("{x:.1}%")).unwrap_or_default()).collect();
        println!("{:<24} reductions (median, iqr, max, cv): {}", g.label, shown.join(", "));
    }
    std::fs::write(out, csv)?;
    Ok(())
}
