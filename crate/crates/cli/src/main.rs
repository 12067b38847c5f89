//! `frob`: train, evaluate and sweep few-shot OoD detectors from a TOML config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use rayon::prelude::*;

use frob::audit::gradient_audit;
use frob::config::split_override;
use frob::datasets::{save_labeled_csv, save_pool_csv};
use frob::harness::{
    emit_report, evaluate_tests, execute_occ_run, execute_run, execute_run_with_model, load_data,
    plan_ablation, plan_occ, plan_sweep, write_meta, ExperimentConfig, ExperimentData, OccResult,
    Outcome, RunMeta, RunResult, RunSpec, SweepResult,
};
use frob::models::{Mlp, MlpClassifier};
use frob::scoring::{evaluate_ood, write_score_dump};
use frob::{Error, Result};

#[derive(Parser)]
#[command(name = "frob", version, about = "Few-shot OoD detection with a learned low-confidence boundary")]
struct Cli {
    /// More log output on standard error (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set sweep.counts=8,4,0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Output directory; defaults to the config's `output` key.
    #[arg(long, env = "FROB_OUT")]
    out: Option<PathBuf>,

    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one pipeline in the configured mode and evaluate it.
    Train(Common),
    /// Evaluate a saved classifier on the configured test sets.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Classifier checkpoint; defaults to `<out>/model/classifier.txt`.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Few-shot sweep over `sweep.counts` for each of `sweep.modes`.
    Sweep(Common),
    /// Every mode of `ablation.modes` at the configured few-shot count.
    Ablate(Common),
    /// One-class evaluation, one run per normal class.
    Occ(Common),
    /// Write every configured dataset as CSV.
    GenData(Common),
    /// Check loss gradients against central finite differences.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        rel_tol: f64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Status = std::result::Result<(), Failure>;

fn load_config(common: &Common, required: bool) -> std::result::Result<ExperimentConfig, Failure> {
    let overrides = common
        .overrides
        .iter()
        .map(|s| split_override(s))
        .collect::<Result<Vec<_>>>()?;
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
            Ok(ExperimentConfig::load(Some(&text), &overrides)?)
        }
        None if required => Err(Failure::Config("--config is required for this command".into())),
        None => Ok(ExperimentConfig::load(None, &overrides)?),
    }
}

fn out_dir(common: &Common, config: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.output))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Session {
    config: ExperimentConfig,
    out: PathBuf,
    jobs: usize,
    meta: RunMeta,
}

impl Session {
    fn start(common: &Common, required: bool) -> std::result::Result<Self, Failure> {
        let config = load_config(common, required)?;
        if common.jobs == 0 {
            return Err(Failure::Config("--jobs must be ≥ 1".into()));
        }
        let out = out_dir(common, &config);
        std::fs::create_dir_all(&out)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
        std::fs::write(out.join("config.toml"), config.to_toml()?)
            .map_err(|e| Failure::Runtime(format!("cannot write config copy: {e}")))?;
        info!("config fingerprint={} out={}", config.fingerprint(), out.display());
        Ok(Session {
            meta: RunMeta {
                started_unix: unix_now(),
                jobs: common.jobs,
                version: env!("CARGO_PKG_VERSION").to_string(),
                ..RunMeta::default()
            },
            config,
            out,
            jobs: common.jobs,
        })
    }

    /// Runs `specs` on `jobs` threads, returning results in plan order.
    fn run_all<F>(&mut self, specs: &[RunSpec], run: F) -> std::result::Result<Vec<RunResult>, Failure>
    where
        F: Fn(&RunSpec) -> RunResult + Sync,
    {
        let timed = |spec: &RunSpec| {
            info!("run={} mode={} few_shots={} seed={} start", spec.run_id, spec.mode, spec.few_shots, spec.seed);
            let t = Instant::now();
            let result = run(spec);
            let secs = t.elapsed().as_secs_f64();
            log_run(&result);
            (result, secs)
        };
        let pairs: Vec<(RunResult, f64)> = if self.jobs == 1 {
            specs.iter().map(timed).collect()
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(self.jobs)
                .build()
                .map_err(|e| Failure::Runtime(format!("thread pool: {e}")))?
                .install(|| specs.par_iter().map(timed).collect())
        };
        Ok(pairs
            .into_iter()
            .map(|(r, secs)| {
                self.meta.seconds.insert(r.run_id.clone(), secs);
                r
            })
            .collect())
    }

    fn finish(mut self, outcome: &Outcome) -> Status {
        let written = emit_report(outcome, &self.out)?;
        self.meta.finished_unix = unix_now();
        write_meta(&self.meta, &self.out)?;
        info!("wrote {} files under {}", written.len() + 1, self.out.display());
        let failed: Vec<&str> = outcome
            .runs()
            .into_iter()
            .filter(|r| r.error.is_some())
            .map(|r| r.run_id.as_str())
            .collect();
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Failure::Runtime(format!("failed runs: {}", failed.join(", "))))
        }
    }
}

fn log_run(run: &RunResult) {
    match &run.error {
        Some(e) => error!("run={} failed: {e}", run.run_id),
        None => {
            for m in &run.metrics {
                info!(
                    "run={} test_set={} auroc={:.4} aauroc={:.4} gauroc={:.4}",
                    run.run_id, m.test_set, m.metrics.auroc, m.metrics.aauroc, m.metrics.gauroc
                );
            }
        }
    }
}

fn data_for(config: &ExperimentConfig) -> std::result::Result<ExperimentData, Failure> {
    let data = load_data(config)?;
    info!(
        "data normals={} in_test={} few_shot_pool={} test_sets={}",
        data.normals.len(),
        data.in_test.len(),
        data.few_shot_pool.len(),
        data.tests.len()
    );
    Ok(data)
}

fn train(common: &Common) -> Status {
    let mut session = Session::start(common, true)?;
    let config = session.config.clone();
    let data = data_for(&config)?;
    let spec = RunSpec::new(config.mode, config.few_shots, config.seed);
    info!("run={} mode={} few_shots={} seed={} start", spec.run_id, spec.mode, spec.few_shots, spec.seed);
    let t = Instant::now();
    let (run, output) = execute_run_with_model(&config, &data, &spec);
    session.meta.seconds.insert(run.run_id.clone(), t.elapsed().as_secs_f64());
    log_run(&run);
    if let Some(output) = output {
        let dir = session.out.join("model");
        std::fs::create_dir_all(&dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
        output.classifier.net().save(&dir.join("classifier.txt"))?;
        if let Some(g) = &output.generator {
            g.net().save(&dir.join("generator.txt"))?;
        }
        if let Some(pool) = &output.boundary_pool {
            save_pool_csv(pool, &session.out.join("boundary_pool.csv"))?;
        }
    }
    session.finish(&Outcome::Train { run })
}

fn eval(common: &Common, model: Option<&Path>) -> Status {
    let mut session = Session::start(common, true)?;
    let config = session.config.clone();
    let data = data_for(&config)?;
    let path = model
        .map(Path::to_path_buf)
        .unwrap_or_else(|| session.out.join("model").join("classifier.txt"));
    let classifier = MlpClassifier::new(Mlp::load(&path)?);
    if classifier.input_dim() != data.normals.dim() {
        return Err(Failure::Config(format!(
            "model {} expects dimension {}, data has {}",
            path.display(),
            classifier.input_dim(),
            data.normals.dim()
        )));
    }
    let budget = frob::scoring::RobustnessBudget {
        seed: config.seed,
        ..config.budget.clone()
    };
    let scores = session.out.join("scores");
    std::fs::create_dir_all(&scores).map_err(|e| Failure::Runtime(format!("{}: {e}", scores.display())))?;
    for (name, set) in &data.tests {
        let evaluation = evaluate_ood(&classifier, data.in_test.inputs(), set, &budget)?;
        write_score_dump(&scores.join(format!("{name}.csv")), &evaluation)?;
    }
    let spec = RunSpec {
        run_id: format!("eval-s{}", config.seed),
        ..RunSpec::new(config.mode, config.few_shots, config.seed)
    };
    let fingerprint = config.fingerprint();
    let runs = session.run_all(std::slice::from_ref(&spec), |s| {
        let metrics = evaluate_tests(&classifier, data.in_test.inputs(), &data.tests, &budget, &fingerprint);
        let (metrics, error) = match metrics {
            Ok(m) => (m, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        RunResult {
            run_id: s.run_id.clone(),
            mode: s.mode,
            few_shots: s.few_shots,
            seed: s.seed,
            fingerprint: fingerprint.clone(),
            class: None,
            metrics,
            traces: Vec::new(),
            boundary_pool: None,
            error,
        }
    })?;
    let run = runs.into_iter().next().expect("one run");
    session.finish(&Outcome::Eval { run })
}

fn sweep(common: &Common) -> Status {
    let mut session = Session::start(common, true)?;
    let config = session.config.clone();
    let data = data_for(&config)?;
    let mut sweeps = Vec::new();
    for &mode in &config.sweep.modes {
        let specs = plan_sweep(&config, mode, &config.sweep.counts);
        let entries = session.run_all(&specs, |s| execute_run(&config, &data, s))?;
        let result = SweepResult::assemble(&config, mode, entries);
        for (name, bp) in &result.break_points {
            match bp {
                Some(c) => info!("mode={mode} test_set={name} break_point={c}"),
                None => info!("mode={mode} test_set={name} break_point=none"),
            }
        }
        sweeps.push(result);
    }
    session.finish(&Outcome::Sweep { sweeps })
}

fn ablate(common: &Common) -> Status {
    let mut session = Session::start(common, true)?;
    let config = session.config.clone();
    let data = data_for(&config)?;
    let runs = session.run_all(&plan_ablation(&config), |s| execute_run(&config, &data, s))?;
    session.finish(&Outcome::Ablation { runs })
}

fn occ(common: &Common) -> Status {
    let mut session = Session::start(common, true)?;
    let config = session.config.clone();
    let data = data_for(&config)?;
    if data.normals.num_classes() < 2 {
        return Err(Failure::Config(
            "datasets.normal: one-class evaluation needs at least two classes".into(),
        ));
    }
    let runs = session.run_all(&plan_occ(&config, &data), |s| execute_occ_run(&config, &data, s))?;
    let result = OccResult::assemble(&config, runs);
    info!("occ mean_auroc={:.4}", result.mean_auroc);
    session.finish(&Outcome::Occ(result))
}

fn gen_data(common: &Common) -> Status {
    let session = Session::start(common, false)?;
    let data = data_for(&session.config)?;
    let out = &session.out;
    save_labeled_csv(&data.normals, &out.join("normal.csv"))?;
    save_labeled_csv(&data.in_test, &out.join("in_test.csv"))?;
    save_pool_csv(&data.few_shot_pool, &out.join("few_shot_pool.csv"))?;
    if let Some(pool) = &data.outlier {
        save_pool_csv(pool, &out.join("outlier.csv"))?;
    }
    let tests = out.join("tests");
    std::fs::create_dir_all(&tests).map_err(|e| Failure::Runtime(format!("{}: {e}", tests.display())))?;
    for (name, set) in &data.tests {
        let pool = frob::losses::OutlierPool::from_tensor(set, frob::losses::PoolSource::OutlierDataset)?;
        save_pool_csv(&pool, &tests.join(format!("{name}.csv")))?;
    }
    info!("wrote datasets under {}", out.display());
    Ok(())
}

fn grad_check(instances: usize, seed: u64, h: f64, rel_tol: f64) -> Status {
    if !(h > 0.0) || !(rel_tol > 0.0) {
        return Err(Failure::Config("--h and --rel-tol must be positive".into()));
    }
    let audits = gradient_audit(seed, instances, h, rel_tol)?;
    let mut worst_abs: f64 = 0.0;
    let mut worst_rel: f64 = 0.0;
    let mut ok = true;
    for a in &audits {
        println!(
            "{:28} {} max_abs={:.3e} max_rel={:.3e} instances={}",
            a.component,
            if a.passed { "ok  " } else { "FAIL" },
            a.max_abs_discrepancy,
            a.max_rel_discrepancy,
            a.instances
        );
        for f in &a.failures {
            warn!("{}: {f}", a.component);
        }
        worst_abs = worst_abs.max(a.max_abs_discrepancy);
        worst_rel = worst_rel.max(a.max_rel_discrepancy);
        ok &= a.passed;
    }
    println!("max_abs_discrepancy={worst_abs:.3e} max_rel_discrepancy={worst_rel:.3e} rel_tol={rel_tol:e}");
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Info,
        1 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("FROB_LOG")
        .target(env_logger::Target::Stderr)
        .init();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval { common, model } => eval(common, model.as_deref()),
        Command::Sweep(c) => sweep(c),
        Command::Ablate(c) => ablate(c),
        Command::Occ(c) => occ(c),
        Command::GenData(c) => gen_data(c),
        Command::GradCheck {
            instances,
            seed,
            h,
            rel_tol,
        } => grad_check(*instances, *seed, *h, *rel_tol),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            error!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            ExitCode::from(1)
        }
    }
}
