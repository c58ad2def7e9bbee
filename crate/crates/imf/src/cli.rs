//! Command-line entry point.
//!
//! Every command writes into its `--out` directory only and finishes with a
//! `manifest.json` listing the arguments, the digest of the scenario source
//! and the digest of every file written.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use imf_core::agents::{AgentSpec, LowerSystems, LowerTrainConfig};
use imf_core::experiments::{run_scenario, scenario_sweeps, ModelRef, Scenario, SweepSpec};
use imf_core::supervisor::{check_gradients, isolated_gradient_checks, SupervisorModel, TrainConfig};
use imf_core::utility::{Direction, Expectation, IntentSet, KpiKind, Service};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_model, load_policies, save_model, save_policies};
use crate::gateway::{self, AppState, ModelBundle, Registry};
use crate::manifest::{digest_file, sha256_hex, Manifest};
use crate::pipeline::{scenario_lower, train_lower_for, train_supervisors, ModelKind, Trained};
use crate::report;
use crate::scenario::{self, load_scenario};
use crate::Error;

pub const LOWER_FILE: &str = "lower.imfq";
pub const BUNDLE_FILE: &str = "bundle.json";

#[derive(Debug, Parser)]
#[command(name = "imf", version, about = "Adaptive intent management: train, evaluate, sweep and serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every lower agent of a slice profile.
    TrainLower(TrainLowerArgs),
    /// Train the proposed supervisor (and the baseline with --baseline) for a scenario.
    TrainSupervisor(TrainSupervisorArgs),
    /// Evaluate models on a scenario: IAE table, KPI traces and plots.
    Evaluate(RunArgs),
    /// Priority sweeps of a scenario: one IAE table and plot per swept expectation.
    Sweep(RunArgs),
    /// Finite-difference gradient check of every network block, on its own and
    /// inside a recorded training episode.
    Gradcheck(GradcheckArgs),
    /// Serve live sessions over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainLowerArgs {
    #[arg(long, default_value = "scarce")]
    pub profile: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Q-learning episodes per agent.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct TrainingArgs {
    /// Built-in scenario name or path to a scenario file.
    #[arg(long)]
    pub scenario: String,
    /// Replace the scenario's slice profile.
    #[arg(long)]
    pub profile: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Supervisor training episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Q-learning episodes per lower agent, when they are trained here.
    #[arg(long)]
    pub lower_episodes: Option<usize>,
    /// Also train (or load) the baseline supervisor without the DUN.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Args)]
pub struct TrainSupervisorArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Training episode length.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Policy table from `train-lower`; trained here when absent.
    #[arg(long)]
    pub lower: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Evaluation episode length.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Output directory of `train-supervisor`; models are trained here when absent.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Model seeds 0..N.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Entries sampled per tensor.
    #[arg(long, default_value_t = 256)]
    pub samples: usize,
    #[arg(long, default_value = "scarce")]
    pub profile: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Output directories of `train-supervisor --baseline`; repeatable.
    #[arg(long)]
    pub models: Vec<PathBuf>,
    /// Extra scenario files; the built-in scenarios are always available.
    #[arg(long)]
    pub scenario: Vec<String>,
    /// Train missing models at startup with this many supervisor episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Which profile and agents a models directory was trained for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleInfo {
    pub scenario: String,
    pub profile: String,
    pub agents: Vec<String>,
    pub models: Vec<ModelKind>,
}

fn model_file(kind: ModelKind) -> String {
    format!("{}.imfc", kind.label())
}

fn prepare_out(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn kinds(baseline: bool) -> Vec<ModelKind> {
    if baseline {
        vec![ModelKind::Proposed, ModelKind::Baseline]
    } else {
        vec![ModelKind::Proposed]
    }
}

fn lower_config(episodes: Option<usize>) -> LowerTrainConfig {
    let mut c = LowerTrainConfig::default();
    if let Some(e) = episodes {
        c.episodes = e;
    }
    c
}

fn train_config(episodes: Option<usize>, horizon: Option<usize>, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(e) = episodes {
        c.episodes = e;
    }
    if let Some(h) = horizon {
        c.horizon = h;
    }
    c
}

struct Loaded {
    scenario: Scenario,
    source: String,
}

fn load(args: &TrainingArgs, horizon: Option<usize>) -> Result<Loaded, Error> {
    let (mut scenario, source) = load_scenario(&args.scenario)?;
    if let Some(p) = &args.profile {
        crate::pipeline::profile_config(p)?;
        scenario.profile = p.clone();
    }
    if let Some(h) = horizon {
        if h == 0 {
            return Err(Error::Invalid("--horizon must be >= 1".into()));
        }
        scenario.horizon = h;
    }
    Ok(Loaded { scenario, source })
}

struct Models {
    lower: LowerSystems,
    trained: Vec<(ModelKind, SupervisorModel)>,
}

fn train_models(
    args: &TrainingArgs,
    scenario: &Scenario,
    lower_all: Option<LowerSystems>,
    horizon: Option<usize>,
) -> Result<(Models, Vec<Trained>), Error> {
    let all = match lower_all {
        Some(l) => l,
        None => train_lower_for(&scenario.profile, lower_config(args.lower_episodes), args.seed)?,
    };
    let lower = scenario_lower(scenario, &all)?;
    let trained = train_supervisors(scenario, &lower, train_config(args.episodes, horizon, args.seed), &kinds(args.baseline))?;
    let models = Models { lower, trained: trained.iter().map(|t| (t.kind, t.model.clone())).collect() };
    Ok((models, trained))
}

fn load_models(dir: &Path, scenario: &Scenario, baseline: bool, m: &mut Manifest) -> Result<Models, Error> {
    let info: BundleInfo = serde_json::from_str(&fs::read_to_string(dir.join(BUNDLE_FILE))?)?;
    let lower_path = dir.join(LOWER_FILE);
    let all = load_policies(&lower_path)?;
    m.inputs.push(digest_file(&lower_path, &lower_path.display().to_string())?);
    let lower = scenario_lower(scenario, &all)?;
    if info.profile != scenario.profile {
        return Err(Error::Invalid(format!(
            "models in {} were trained on profile `{}`, scenario uses `{}`",
            dir.display(),
            info.profile,
            scenario.profile
        )));
    }
    let mut trained = Vec::new();
    for kind in kinds(baseline) {
        let path = dir.join(model_file(kind));
        let model = load_model(&path)?;
        m.inputs.push(digest_file(&path, &path.display().to_string())?);
        let ids = |v: &[AgentSpec]| v.iter().map(|a| a.id.clone()).collect::<Vec<_>>();
        if ids(model.agents()) != ids(&lower.specs) {
            return Err(Error::Invalid(format!("{} commands other agents than the scenario needs", path.display())));
        }
        trained.push((kind, model));
    }
    Ok(Models { lower, trained })
}

fn obtain_models(args: &RunArgs, scenario: &Scenario, m: &mut Manifest) -> Result<Models, Error> {
    match &args.models {
        Some(dir) => load_models(dir, scenario, args.training.baseline, m),
        None => Ok(train_models(&args.training, scenario, None, None)?.0),
    }
}

fn refs(models: &Models) -> Vec<ModelRef<'_>> {
    models.trained.iter().map(|(k, model)| ModelRef { label: k.label(), model, lower: &models.lower }).collect()
}

fn finish(m: &mut Manifest, out: &Path, files: &[String]) -> Result<(), Error> {
    m.add_outputs(out, files)?;
    m.write(out)
}

fn argv_tail(argv: &[String]) -> Vec<String> {
    argv.iter().skip(1).cloned().collect()
}

pub fn train_lower_cmd(a: &TrainLowerArgs, argv: &[String]) -> Result<(), Error> {
    prepare_out(&a.out)?;
    let lower = train_lower_for(&a.profile, lower_config(a.episodes), a.seed)?;
    save_policies(&a.out.join(LOWER_FILE), &lower)?;
    let mut m = Manifest::new("train-lower", argv_tail(argv), a.seed);
    finish(&mut m, &a.out, &[LOWER_FILE.into()])
}

pub fn train_supervisor_cmd(a: &TrainSupervisorArgs, argv: &[String]) -> Result<(), Error> {
    let l = load(&a.training, None)?;
    prepare_out(&a.out)?;
    let mut m = Manifest::new("train-supervisor", argv_tail(argv), a.training.seed);
    m.config_sha256 = Some(sha256_hex(l.source.as_bytes()));
    let lower_all = match &a.lower {
        Some(p) => {
            m.inputs.push(digest_file(p, &p.display().to_string())?);
            Some(load_policies(p)?)
        }
        None => None,
    };
    let lower_all = match lower_all {
        Some(l) => l,
        None => train_lower_for(&l.scenario.profile, lower_config(a.training.lower_episodes), a.training.seed)?,
    };
    let (models, trained) = train_models(&a.training, &l.scenario, Some(lower_all.clone()), a.horizon)?;

    let mut files = vec![LOWER_FILE.to_string()];
    save_policies(&a.out.join(LOWER_FILE), &lower_all)?;
    for t in &trained {
        let name = model_file(t.kind);
        save_model(&a.out.join(&name), &t.model)?;
        files.push(name);
        let log_name = format!("train-{}.csv", t.kind.label());
        report::write_train_log_csv(&a.out.join(&log_name), &t.log)?;
        files.push(log_name);
    }
    let info = BundleInfo {
        scenario: l.scenario.name.clone(),
        profile: l.scenario.profile.clone(),
        agents: models.lower.specs.iter().map(|s| s.id.clone()).collect(),
        models: trained.iter().map(|t| t.kind).collect(),
    };
    fs::write(a.out.join(BUNDLE_FILE), serde_json::to_string_pretty(&info)? + "\n")?;
    fs::write(a.out.join("scenario.toml"), &l.source)?;
    files.push(BUNDLE_FILE.into());
    files.push("scenario.toml".into());
    finish(&mut m, &a.out, &files)
}

pub fn evaluate_cmd(a: &RunArgs, argv: &[String]) -> Result<(), Error> {
    let l = load(&a.training, a.horizon)?;
    prepare_out(&a.out)?;
    let mut m = Manifest::new("evaluate", argv_tail(argv), a.training.seed);
    m.config_sha256 = Some(sha256_hex(l.source.as_bytes()));
    let models = obtain_models(a, &l.scenario, &mut m)?;
    let reports = run_scenario(&l.scenario, &refs(&models))?;

    let rows: Vec<_> = reports.iter().flat_map(|r| report::report_rows(&l.scenario.intents, r)).collect();
    report::write_iae_csv(&a.out.join("iae.csv"), &rows)?;
    report::write_traces_csv(&a.out.join("traces.csv"), &reports)?;
    let mut files = vec!["iae.csv".to_string(), "traces.csv".to_string()];
    files.extend(report::plot_traces(&a.out, &l.scenario, &reports)?);
    fs::write(a.out.join("scenario.toml"), &l.source)?;
    files.push("scenario.toml".into());
    finish(&mut m, &a.out, &files)
}

pub fn sweep_cmd(a: &RunArgs, argv: &[String]) -> Result<(), Error> {
    let mut l = load(&a.training, a.horizon)?;
    prepare_out(&a.out)?;
    let mut m = Manifest::new("sweep", argv_tail(argv), a.training.seed);
    m.config_sha256 = Some(sha256_hex(l.source.as_bytes()));
    if l.scenario.sweep.is_none() {
        l.scenario.sweep = Some(SweepSpec::new(l.scenario.intents.iter().map(|e| e.id.clone()).collect()));
    }
    let models = obtain_models(a, &l.scenario, &mut m)?;
    let table = scenario_sweeps(&l.scenario, &refs(&models))?;
    let mut files = Vec::new();
    for id in &l.scenario.sweep.as_ref().expect("sweep set above").expectations {
        let name = format!("sweep-{id}.csv");
        report::write_iae_csv(&a.out.join(&name), &report::sweep_rows(&table, id.as_str()))?;
        files.push(name);
        files.push(report::plot_sweep(&a.out, &l.scenario.name, &table, id.as_str())?);
    }
    fs::write(a.out.join("scenario.toml"), &l.source)?;
    files.push("scenario.toml".into());
    finish(&mut m, &a.out, &files)
}

#[derive(Serialize)]
struct GradRow<'a> {
    seed: u64,
    mode: &'a str,
    block: &'a str,
    max_rel_error: f64,
    worst_param: &'a str,
    checked: usize,
    passed: bool,
}

/// Returns whether every block passed.
pub fn gradcheck_cmd(a: &GradcheckArgs, argv: &[String]) -> Result<bool, Error> {
    prepare_out(&a.out)?;
    let cfg = crate::pipeline::profile_config(&a.profile)?;
    let intents = IntentSet::new(vec![
        Expectation::new("cv-qoe", Service::Cv, KpiKind::Qoe, 3.0, Direction::AtLeast),
        Expectation::new("urllc-pl", Service::Urllc, KpiKind::PacketLoss, 2.0, Direction::AtMost),
        Expectation::new("miot-pl", Service::Miot, KpiKind::PacketLoss, 4.0, Direction::AtMost),
    ])?;
    let specs = AgentSpec::roster(&cfg, &intents);
    let lower = LowerSystems::untrained(&cfg, specs.clone());
    let mut all_passed = true;
    let mut w = csv::Writer::from_path(a.out.join("gradcheck.csv"))?;
    for seed in 0..a.seeds {
        let model = SupervisorModel::proposed(specs.clone(), seed);
        let tc = TrainConfig { horizon: 3, seed, ..TrainConfig::default() };
        let isolated = isolated_gradient_checks(&model, seed, Some(a.samples))?.into_iter().map(|r| ("isolated", r));
        let episode = check_gradients(&model, &cfg, &intents, &lower, &tc, Some(a.samples))?.into_iter().map(|r| ("episode", r));
        for (mode, (block, r)) in isolated.chain(episode) {
            all_passed &= r.passed;
            println!(
                "seed {seed} {mode:8} {block:12} max rel error {:.3e} over {} entries: {}",
                r.max_rel_error,
                r.checked,
                if r.passed { "pass" } else { "FAIL" }
            );
            w.serialize(GradRow {
                seed,
                mode,
                block,
                max_rel_error: r.max_rel_error,
                worst_param: &r.worst_param,
                checked: r.checked,
                passed: r.passed,
            })?;
        }
    }
    w.flush()?;
    let mut m = Manifest::new("gradcheck", argv_tail(argv), 0);
    finish(&mut m, &a.out, &["gradcheck.csv".into()])?;
    Ok(all_passed)
}

/// Scenarios and model bundles for the gateway: bundles from `--models`
/// directories first, then training for any scenario still uncovered.
pub fn serve_state(a: &ServeArgs) -> Result<Arc<AppState>, Error> {
    let mut scenarios = Vec::new();
    for (name, _) in scenario::BUILTIN {
        scenarios.push(load_scenario(name)?.0);
    }
    for s in &a.scenario {
        scenarios.push(load_scenario(s)?.0);
    }
    let mut registry = Registry::default();
    for dir in &a.models {
        let info: BundleInfo = serde_json::from_str(&fs::read_to_string(dir.join(BUNDLE_FILE))?)?;
        let all = load_policies(&dir.join(LOWER_FILE))?;
        let proposed = load_model(&dir.join(model_file(ModelKind::Proposed)))?;
        let baseline = load_model(&dir.join(model_file(ModelKind::Baseline)))?;
        let lower = all
            .select(&info.agents.iter().map(String::as_str).collect::<Vec<_>>())
            .ok_or_else(|| Error::Invalid(format!("{} lacks agents listed in its bundle", dir.display())))?;
        registry.insert(ModelBundle { profile: info.profile, lower, proposed, baseline });
    }
    if let Some(episodes) = a.episodes {
        for s in &scenarios {
            if registry.resolve(s).is_some() {
                continue;
            }
            tracing::info!(scenario = %s.name, episodes, "training models");
            let all = train_lower_for(&s.profile, LowerTrainConfig::default(), a.seed)?;
            let lower = scenario_lower(s, &all)?;
            let tc = train_config(Some(episodes), None, a.seed);
            let mut t = train_supervisors(s, &lower, tc, &[ModelKind::Proposed, ModelKind::Baseline])?;
            let baseline = t.pop().expect("two models").model;
            let proposed = t.pop().expect("two models").model;
            registry.insert(ModelBundle { profile: s.profile.clone(), lower, proposed, baseline });
        }
    }
    if registry.is_empty() {
        return Err(Error::Invalid("no models: pass --models DIR or --episodes N".into()));
    }
    Ok(AppState::new(scenarios, registry))
}

/// Runs a parsed command; the process exit code.
pub fn dispatch(cli: Cli, argv: &[String]) -> i32 {
    let result = match &cli.command {
        Command::TrainLower(a) => train_lower_cmd(a, argv).map(|_| true),
        Command::TrainSupervisor(a) => train_supervisor_cmd(a, argv).map(|_| true),
        Command::Evaluate(a) => evaluate_cmd(a, argv).map(|_| true),
        Command::Sweep(a) => sweep_cmd(a, argv).map(|_| true),
        Command::Gradcheck(a) => gradcheck_cmd(a, argv),
        Command::Serve(a) => serve_state(a).and_then(|state| {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(gateway::serve(&a.addr, state))?;
            Ok(true)
        }),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => {
            eprintln!("imf: gradient check failed");
            1
        }
        Err(e) => {
            eprintln!("imf: {e}");
            2
        }
    }
}
