use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::env::{Environment, EnvironmentConfig};
use crate::allocation::{rank_users, ChannelPolicy, ScoreAggregation};
use crate::data::{query_sample, Observation, RewardSpec, SequenceConfig, DEFAULT_PENALTY_STRENGTH};
use crate::error::{Error, Result};
use crate::model::{select_action, Checkpoint, Model, SelectionMode};

/// Journey memory length for agents without a model.
pub const DEFAULT_MEMORY_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProcedureConfig {
    /// Total budget `W`.
    pub budget: f64,
    /// Cap `K` on exploitation exposures.
    pub max_rounds: usize,
    /// Users served per round.
    pub top_n: usize,
    /// Weight `η` of the model policy in the per-user average.
    pub eta: f64,
    /// Exposures per user in the exploration phase.
    pub exploration_rounds: usize,
    pub selection: SelectionMode,
    /// `P_initial`; uniform when absent.
    pub initial_policy: Option<Vec<f64>>,
    /// `s` in `g − s·w`; the model's training value when absent.
    pub penalty_strength: Option<f64>,
    pub score_aggregation: ScoreAggregation,
    pub seed: u64,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        Self {
            budget: 200.0,
            max_rounds: 1000,
            top_n: 20,
            eta: 0.5,
            exploration_rounds: 1,
            selection: SelectionMode::Deterministic,
            initial_policy: None,
            penalty_strength: None,
            score_aggregation: ScoreAggregation::Last,
            seed: 0,
        }
    }
}

impl ProcedureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget.is_finite() && self.budget >= 0.0) {
            return Err(Error::Config(format!(
                "procedure.budget must be ≥ 0, got {}",
                self.budget
            )));
        }
        if self.max_rounds == 0 {
            return Err(Error::Config("procedure.max_rounds must be ≥ 1".into()));
        }
        if self.top_n == 0 {
            return Err(Error::Config("procedure.top_n must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!(
                "procedure.eta must be in [0, 1], got {}",
                self.eta
            )));
        }
        if let Some(s) = self.penalty_strength {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config("procedure.penalty_strength must be ≥ 0".into()));
            }
        }
        if let Some(p) = &self.initial_policy {
            ChannelPolicy::new(p.clone())
                .map_err(|e| Error::Config(format!("procedure.initial_policy: {e}")))?;
        }
        Ok(())
    }
}

/// Model plus the data settings needed to build its inputs.
#[derive(Clone, Copy, Debug)]
pub struct ModelAgent<'a> {
    pub model: &'a Model,
    pub sequence: &'a SequenceConfig,
    pub reward: &'a RewardSpec,
}

/// Who picks channels and ranks users.
#[derive(Clone, Debug)]
pub enum Agent<'a> {
    Model(ModelAgent<'a>),
    /// Uniform channel, random ranking.
    Random,
    /// Always the channel with the best logged global CTR, random ranking.
    GreedyCtr(Vec<f64>),
}

impl<'a> Agent<'a> {
    pub fn from_checkpoint(ckpt: &'a Checkpoint) -> Result<Self> {
        let (Some(sequence), Some(reward)) = (&ckpt.sequence, &ckpt.reward) else {
            return Err(Error::Checkpoint(
                "checkpoint lacks the sequence and reward settings needed for inference".into(),
            ));
        };
        Ok(Agent::Model(ModelAgent {
            model: &ckpt.model,
            sequence,
            reward,
        }))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Agent::Model(_) => "model",
            Agent::Random => "random",
            Agent::GreedyCtr(_) => "greedy_ctr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exploration,
    Exploitation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// `K` exploitation exposures were made.
    RoundLimit,
    /// Nothing left to spend.
    BudgetExhausted,
    /// The next exposure would overdraw the budget.
    InfeasibleExposure,
}

/// One exposure in the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 0 during exploration.
    pub round: usize,
    pub phase: Phase,
    pub user: String,
    pub channel: usize,
    pub gain: f64,
    pub cost: f64,
    pub remaining_budget: f64,
    pub penalized_reward: f64,
}

/// Memories and accounting of a run in progress.
#[derive(Clone, Debug)]
pub struct RunState {
    pub memories: Vec<VecDeque<Observation>>,
    pub policies: Vec<ChannelPolicy>,
    pub scores: Vec<f64>,
    /// Context of each user's next exposure.
    pub pending: Vec<Vec<f64>>,
    pub capacity: usize,
    pub cumulative_cost: f64,
    pub cumulative_gain: f64,
    pub cumulative_penalized: f64,
    /// Exploitation exposures so far (`k`).
    pub exposures: usize,
    pub rounds: usize,
    pub exploration_truncated: bool,
    pub stop: Option<StopReason>,
    pub trace: Vec<TraceRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: String,
    pub budget: f64,
    pub penalty_strength: f64,
    pub cumulative_penalized_reward: f64,
    pub cumulative_gain: f64,
    pub cumulative_cost: f64,
    pub exploration_exposures: usize,
    pub exploitation_exposures: usize,
    pub rounds: usize,
    pub stop_reason: Option<StopReason>,
    pub exploration_truncated: bool,
    pub trace: Vec<TraceRow>,
}

/// The budgeted online advertising procedure.
pub struct Procedure<'a> {
    agent: Agent<'a>,
    env: &'a mut Environment,
    config: ProcedureConfig,
    initial: ChannelPolicy,
    penalty: f64,
    rng: ChaCha8Rng,
    state: RunState,
}

impl<'a> Procedure<'a> {
    pub fn new(agent: Agent<'a>, env: &'a mut Environment, config: ProcedureConfig) -> Result<Self> {
        config.validate()?;
        let env_cfg = env.config();
        let m = env_cfg.channels();
        let users = env_cfg.users();
        let initial = match &config.initial_policy {
            Some(p) => ChannelPolicy::new(p.clone())?,
            None => ChannelPolicy::uniform(m),
        };
        if initial.len() != m {
            return Err(Error::Config(format!(
                "procedure.initial_policy has {} channels, environment has {m}",
                initial.len()
            )));
        }
        let capacity = match &agent {
            Agent::Model(a) => {
                check_compatible(a, env_cfg)?;
                a.sequence.seq_len
            }
            Agent::GreedyCtr(ctr) if ctr.len() != m => {
                return Err(Error::Config(format!(
                    "greedy baseline has {} CTRs, environment has {m} channels",
                    ctr.len()
                )));
            }
            _ => DEFAULT_MEMORY_LEN,
        };
        let penalty = config.penalty_strength.unwrap_or(match &agent {
            Agent::Model(a) => a.reward.penalty_strength,
            _ => DEFAULT_PENALTY_STRENGTH,
        });
        let state = RunState {
            memories: vec![VecDeque::with_capacity(capacity); users],
            policies: vec![initial.clone(); users],
            scores: vec![0.0; users],
            pending: Vec::new(),
            capacity,
            cumulative_cost: 0.0,
            cumulative_gain: 0.0,
            cumulative_penalized: 0.0,
            exposures: 0,
            rounds: 0,
            exploration_truncated: false,
            stop: None,
            trace: Vec::new(),
        };
        let mut proc = Self {
            agent,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            initial,
            penalty,
            env,
            state,
        };
        proc.state.pending = (0..users).map(|u| proc.env.context(u)).collect();
        Ok(proc)
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn initial_policy(&self) -> &ChannelPolicy {
        &self.initial
    }

    pub fn remaining_budget(&self) -> f64 {
        (self.config.budget - self.state.cumulative_cost).max(0.0)
    }

    fn finished(&self) -> bool {
        self.state.stop.is_some()
    }

    /// Fills every journey memory with exposures drawn from `P_initial`, then
    /// infers policies and scores. A budget shortfall truncates the phase.
    pub fn explore(&mut self) -> Result<()> {
        let users = self.env.config().users();
        'outer: for _ in 0..self.config.exploration_rounds {
            for u in 0..users {
                let channel = select_action(&self.initial.probs, SelectionMode::Stochastic, &mut self.rng)?;
                if !self.expose(u, channel, Phase::Exploration, 0)? {
                    self.state.exploration_truncated = true;
                    log::warn!(
                        "budget exhausted during exploration after {} exposures",
                        self.state.trace.len()
                    );
                    break 'outer;
                }
            }
        }
        for u in 0..users {
            self.infer(u)?;
        }
        if self.state.exploration_truncated {
            self.state.stop = Some(StopReason::BudgetExhausted);
        }
        Ok(())
    }

    /// One round: rank users, serve the top `N`. Returns false once the run is over.
    pub fn exploit_round(&mut self) -> Result<bool> {
        if self.finished() {
            return Ok(false);
        }
        if self.state.exposures >= self.config.max_rounds {
            self.state.stop = Some(StopReason::RoundLimit);
            return Ok(false);
        }
        if self.remaining_budget() <= 0.0 {
            self.state.stop = Some(StopReason::BudgetExhausted);
            return Ok(false);
        }
        self.env.advance_round();
        self.state.rounds += 1;
        let round = self.state.rounds;

        if !matches!(self.agent, Agent::Model(_)) {
            for s in &mut self.state.scores {
                *s = self.rng.random();
            }
        }
        let scores: BTreeMap<String, f64> = self
            .state
            .scores
            .iter()
            .enumerate()
            .map(|(u, &s)| (EnvironmentConfig::user_id(u), s))
            .collect();
        let ranking = rank_users(&scores, self.config.top_n)?;

        for ranked in ranking {
            let u = user_index(&ranked.user_id)?;
            let channel = match &self.agent {
                Agent::Model(_) => select_action(
                    &self.state.policies[u].probs,
                    self.config.selection,
                    &mut self.rng,
                )?,
                Agent::Random => self.rng.random_range(0..self.initial.len()),
                Agent::GreedyCtr(ctr) => argmax(ctr),
            };
            if !self.expose(u, channel, Phase::Exploitation, round)? {
                self.state.stop = Some(StopReason::InfeasibleExposure);
                return Ok(false);
            }
            self.state.exposures += 1;
            self.infer(u)?;
            let eta = self.config.eta;
            let blended = self.state.policies[u]
                .probs
                .iter()
                .zip(&self.initial.probs)
                .map(|(p, q)| eta * p + (1.0 - eta) * q)
                .collect();
            self.state.policies[u] = ChannelPolicy { probs: blended };

            if self.state.exposures >= self.config.max_rounds {
                self.state.stop = Some(StopReason::RoundLimit);
                return Ok(false);
            }
            if self.remaining_budget() <= 0.0 {
                self.state.stop = Some(StopReason::BudgetExhausted);
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Charges one exposure if it fits the budget; false when it would overdraw.
    fn expose(&mut self, u: usize, channel: usize, phase: Phase, round: usize) -> Result<bool> {
        let cost = self.env.config().costs[channel];
        if self.state.cumulative_cost + cost > self.config.budget {
            return Ok(false);
        }
        let touch = std::mem::replace(&mut self.state.pending[u], self.env.context(u));
        let obs = self.env.step(u, channel, touch)?;
        let penalized = obs.gain - self.penalty * obs.cost;
        let st = &mut self.state;
        st.cumulative_cost += obs.cost;
        st.cumulative_gain += obs.gain;
        st.cumulative_penalized += penalized;
        st.trace.push(TraceRow {
            round,
            phase,
            user: EnvironmentConfig::user_id(u),
            channel,
            gain: obs.gain,
            cost: obs.cost,
            remaining_budget: (self.config.budget - st.cumulative_cost).max(0.0),
            penalized_reward: penalized,
        });
        let memory = &mut st.memories[u];
        if memory.len() == st.capacity {
            memory.pop_front();
        }
        memory.push_back(obs);
        Ok(true)
    }

    /// Refreshes `P_u` (raw model output) and `R_u` from the user's memory.
    fn infer(&mut self, u: usize) -> Result<()> {
        let Agent::Model(agent) = &self.agent else {
            return Ok(());
        };
        let user_id = EnvironmentConfig::user_id(u);
        let history: Vec<Observation> = self.state.memories[u].iter().cloned().collect();
        let sample = query_sample(
            &user_id,
            &history,
            &self.state.pending[u],
            self.env.profile(u),
            agent.sequence,
            agent.reward,
        )?;
        let out = agent.model.forward(&sample)?;
        let last = sample.len() - 1;
        let probs = out.action_probs.row_values(last);
        let preds: Vec<f64> = (0..sample.len())
            .filter(|&t| sample.valid_mask[t])
            .map(|t| out.reward_at(t))
            .collect();
        let score = self.config.score_aggregation.apply(&preds).unwrap_or(0.0);
        if !score.is_finite() || probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("model inference for user {user_id}")));
        }
        self.state.policies[u] = ChannelPolicy::new(probs.to_vec())?;
        self.state.scores[u] = score;
        Ok(())
    }

    pub fn into_report(self) -> RunReport {
        let st = self.state;
        let exploration = st.trace.iter().filter(|r| r.phase == Phase::Exploration).count();
        RunReport {
            policy: self.agent.name().into(),
            budget: self.config.budget,
            penalty_strength: self.penalty,
            cumulative_penalized_reward: st.cumulative_penalized,
            cumulative_gain: st.cumulative_gain,
            cumulative_cost: st.cumulative_cost,
            exploration_exposures: exploration,
            exploitation_exposures: st.exposures,
            rounds: st.rounds,
            stop_reason: st.stop,
            exploration_truncated: st.exploration_truncated,
            trace: st.trace,
        }
    }
}

/// Exploration followed by exploitation rounds until `K` or the budget runs out.
pub fn run_procedure(agent: Agent<'_>, env: &mut Environment, config: &ProcedureConfig) -> Result<RunReport> {
    let mut proc = Procedure::new(agent, env, config.clone())?;
    proc.explore()?;
    while proc.exploit_round()? {}
    Ok(proc.into_report())
}

fn check_compatible(agent: &ModelAgent<'_>, env: &EnvironmentConfig) -> Result<()> {
    let seq = agent.sequence;
    let static_dim = env.profiles[0].len();
    if seq.channels != env.channels() || seq.touch_dim != env.touch_dim || seq.static_dim != static_dim {
        return Err(Error::Shape(format!(
            "model expects {} channels, {} touch and {} static features; environment has {}, {} and {static_dim}",
            seq.channels,
            seq.touch_dim,
            seq.static_dim,
            env.channels(),
            env.touch_dim
        )));
    }
    if agent.model.config.channels != seq.channels || agent.model.config.seq_len != seq.seq_len {
        return Err(Error::Shape(
            "model config disagrees with its sequence settings".into(),
        ));
    }
    Ok(())
}

fn user_index(id: &str) -> Result<usize> {
    id.strip_prefix('u')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data(format!("unknown user id {id}")))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = j;
        }
    }
    best
}
