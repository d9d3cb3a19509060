//! Subcommands of the `mtorl` binary, exposed as functions for tests.

pub mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mtorl_core::allocation::{
    explicit_policy, implicit_policy, merge_policies, rank_users, ChannelPolicy, ChannelStats, UserRanking,
};
use mtorl_core::data::{
    prepare_dataset, read_journeys, write_journey_log, write_profiles, Journey, PreparedData,
};
use mtorl_core::model::{Checkpoint, Model};
use mtorl_core::simulator::{
    generate_journeys, run_procedure, Agent, Environment, EnvironmentConfig, RunReport,
};
use mtorl_core::training::{evaluate, fit, EpochRecord, EvalReport, RewardLoss};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

/// Independent random stream `k` derived from the run seed.
pub fn derive_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

const LOGGING_STREAM: u64 = 1;
const SIMULATION_STREAM: u64 = 2;

const TRACE_COLUMNS: [&str; 8] = [
    "round",
    "phase",
    "user",
    "channel",
    "gain",
    "cost",
    "remaining_budget",
    "penalized_reward",
];

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = path
        .as_deref()
        .with_context(|| format!("`{key}` must be set (use --set {key}=PATH)"))?;
    if !p.exists() {
        bail!("{key}: {} does not exist", p.display());
    }
    Ok(p)
}

fn load_journeys(cfg: &RunConfig) -> Result<Vec<Journey>> {
    let log = required(&cfg.data.journeys, "data.journeys")?;
    let profiles = match &cfg.data.profiles {
        Some(_) => Some(required(&cfg.data.profiles, "data.profiles")?),
        None => None,
    };
    let (journeys, stats) = read_journeys(log, profiles)?;
    if stats.malformed > 0 {
        log::warn!(
            "{} of {} log lines malformed and skipped",
            stats.malformed,
            stats.lines
        );
    }
    Ok(journeys)
}

#[derive(Clone, Debug)]
pub struct GenDataOutput {
    pub journeys: PathBuf,
    pub profiles: PathBuf,
    pub environment: PathBuf,
}

/// Logged journeys from the configured environment under the logging policy.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<GenDataOutput> {
    create_out(out)?;
    let env_cfg = cfg.generated_environment()?;
    let mut env = Environment::new(env_cfg.clone())?;
    let journeys = generate_journeys(&mut env, &cfg.logging, derive_seed(cfg.seed, LOGGING_STREAM))?;
    let paths = GenDataOutput {
        journeys: out.join("journeys.jsonl"),
        profiles: out.join("profiles.jsonl"),
        environment: out.join("environment.json"),
    };
    let mut w = BufWriter::new(File::create(&paths.journeys)?);
    write_journey_log(&journeys, &mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&paths.profiles)?);
    write_profiles(&journeys, &mut w)?;
    w.flush()?;
    write_json(&paths.environment, &env_cfg)?;
    cfg.write(out)?;
    log::info!(
        "wrote {} journeys to {}",
        journeys.len(),
        paths.journeys.display()
    );
    Ok(paths)
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub report: EvalReport,
}

fn prepare(cfg: &RunConfig) -> Result<PreparedData> {
    let journeys = load_journeys(cfg)?;
    let data = prepare_dataset(&journeys, &cfg.sequence, &cfg.reward, cfg.seed)?;
    log::info!(
        "{} train / {} validation / {} test samples ({} journeys discarded, {} rejected)",
        data.split.train.len(),
        data.split.validation.len(),
        data.split.test.len(),
        data.discarded_journeys,
        data.rejected_journeys
    );
    Ok(data)
}

/// Trains on the train split; writes the checkpoint, per-epoch history and
/// the test-split evaluation.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutput> {
    create_out(out)?;
    let data = prepare(cfg)?;
    let model = Model::init(cfg.model.clone(), cfg.seed)?;
    let reward_loss = RewardLoss::from(cfg.reward.mode);
    let result = fit(
        model,
        &data.split.train,
        &data.split.validation,
        reward_loss,
        &cfg.train_config(),
    )?;
    let ckpt = Checkpoint {
        model: result.model,
        sequence: Some(cfg.sequence.clone()),
        reward: Some(data.reward_spec),
    };
    let checkpoint = out.join("checkpoint.json");
    ckpt.save(&checkpoint)?;

    let mut w = csv::Writer::from_path(out.join("history.csv"))?;
    for rec in &result.history {
        w.serialize(rec)?;
    }
    w.flush()?;

    let report = evaluate(&ckpt.model, &data.split.test, reward_loss, cfg.training.averaging)?;
    write_json(&out.join("eval_report.json"), &report)?;
    cfg.write(out)?;
    Ok(TrainOutput {
        checkpoint,
        history: result.history,
        best_epoch: result.best_epoch,
        report,
    })
}

/// One reward prediction at a logged step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    pub channel: usize,
    pub pred: f64,
}

fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<Checkpoint> {
    Checkpoint::load_compatible(path, &cfg.model).with_context(|| {
        format!(
            "checkpoint {} does not match the configured model",
            path.display()
        )
    })
}

/// Test-split evaluation of a checkpoint; also writes per-step reward
/// predictions usable by `allocate`.
pub fn cmd_evaluate(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<EvalReport> {
    create_out(out)?;
    let ckpt = load_checkpoint(cfg, checkpoint)?;
    let journeys = load_journeys(cfg)?;
    let sequence = ckpt.sequence.clone().unwrap_or_else(|| cfg.sequence.clone());
    let spec = ckpt.reward.clone().unwrap_or_else(|| cfg.reward.clone());
    let data = prepare_dataset(&journeys, &sequence, &spec, cfg.seed)?;
    let reward_loss = RewardLoss::from(spec.mode);
    let report = evaluate(&ckpt.model, &data.split.test, reward_loss, cfg.training.averaging)?;
    write_json(&out.join("eval_report.json"), &report)?;

    let mut w = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    for s in &data.split.test {
        let fwd = ckpt.model.forward(s)?;
        for t in (0..s.len()).filter(|&t| s.valid_mask[t]) {
            let rec = PredictionRecord {
                user_id: s.user_id.clone(),
                channel: s.action_labels[t],
                pred: fwd.reward_at(t),
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    cfg.write(out)?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Model,
    Random,
    Greedy,
}

/// Runs the budgeted procedure; writes the report and a per-exposure trace.
pub fn cmd_simulate(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    policy: PolicyKind,
    out: &Path,
) -> Result<RunReport> {
    create_out(out)?;
    let mut env_cfg = cfg.environment_config()?;
    env_cfg.seed = derive_seed(cfg.seed, SIMULATION_STREAM);
    let mut env = Environment::new(env_cfg.clone())?;
    let ckpt = match (policy, checkpoint) {
        (PolicyKind::Model, Some(p)) => Some(load_checkpoint(cfg, p)?),
        (PolicyKind::Model, None) => bail!("--checkpoint is required for the model policy"),
        _ => None,
    };
    let agent = match policy {
        PolicyKind::Model => Agent::from_checkpoint(ckpt.as_ref().expect("checked above"))?,
        PolicyKind::Random => Agent::Random,
        PolicyKind::Greedy => Agent::GreedyCtr(logged_ctr(cfg, &env_cfg)?),
    };
    let report = run_procedure(agent, &mut env, &cfg.procedure)?;
    write_json(&out.join("run_report.json"), &report)?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(out.join("trace.csv"))?;
    w.write_record(TRACE_COLUMNS)?;
    for row in &report.trace {
        w.serialize(row)?;
    }
    w.flush()?;
    cfg.write(out)?;
    Ok(report)
}

/// Global per-channel CTR of the logged data (uniform when no log is configured).
fn logged_ctr(cfg: &RunConfig, env: &EnvironmentConfig) -> Result<Vec<f64>> {
    if cfg.data.journeys.is_none() {
        log::warn!("greedy baseline without data.journeys; every channel gets the same CTR");
        return Ok(vec![1.0; env.channels()]);
    }
    let journeys = load_journeys(cfg)?;
    Ok(ChannelStats::from_journeys(&journeys, env.channels())?.ctr())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationReport {
    pub tau: f64,
    pub alpha: f64,
    pub stats: ChannelStats,
    pub explicit: ChannelPolicy,
    pub implicit: Option<ChannelPolicy>,
    pub merged: ChannelPolicy,
    /// By aggregated predicted reward, or by logged positive rate without predictions.
    pub ranking: UserRanking,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed prediction", path.display(), i + 1))?;
        if !rec.pred.is_finite() {
            bail!("{}:{}: non-finite prediction", path.display(), i + 1);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Explicit, implicit and merged channel policies plus the top-N user ranking.
pub fn cmd_allocate(cfg: &RunConfig, out: &Path) -> Result<AllocationReport> {
    create_out(out)?;
    let journeys = load_journeys(cfg)?;
    let m = cfg.sequence.channels;
    let a = &cfg.allocation;
    let stats = ChannelStats::from_journeys(&journeys, m)?;
    let explicit = explicit_policy(&stats)?;

    let predictions = match &cfg.data.predictions {
        Some(_) => Some(read_predictions(required(
            &cfg.data.predictions,
            "data.predictions",
        )?)?),
        None => None,
    };
    if predictions.is_none() && a.alpha > 0.0 {
        bail!(
            "allocation.alpha = {} needs the implicit policy, which is unavailable without \
             reward predictions; set data.predictions or allocation.alpha=0",
            a.alpha
        );
    }

    let (implicit, scores) = match &predictions {
        Some(preds) => {
            let mut by_channel = vec![Vec::new(); m];
            let mut by_user: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for p in preds {
                by_channel
                    .get_mut(p.channel)
                    .with_context(|| format!("prediction for channel {} but only {m} channels", p.channel))?
                    .push(p.pred);
                by_user.entry(p.user_id.clone()).or_default().push(p.pred);
            }
            let scores = by_user
                .into_iter()
                .filter_map(|(u, v)| a.aggregation.apply(&v).map(|s| (u, s)))
                .collect();
            (Some(implicit_policy(&by_channel, a.tau)?), scores)
        }
        None => {
            let scores = journeys
                .iter()
                .map(|j| {
                    let hits = j.observations.iter().filter(|o| o.gain > 0.0).count();
                    (
                        j.user_id.clone(),
                        hits as f64 / j.observations.len().max(1) as f64,
                    )
                })
                .collect::<BTreeMap<_, _>>();
            (None, scores)
        }
    };
    let merged = match &implicit {
        Some(imp) => merge_policies(&explicit, imp, a.alpha)?,
        None => explicit.clone(),
    };
    let report = AllocationReport {
        tau: a.tau,
        alpha: a.alpha,
        stats,
        explicit,
        implicit,
        merged,
        ranking: rank_users(&scores, a.top_n)?,
    };
    write_json(&out.join("allocation.json"), &report)?;
    cfg.write(out)?;
    Ok(report)
}
