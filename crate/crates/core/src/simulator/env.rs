use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Journey, Observation};
use crate::error::{Error, Result};

/// Ground truth of the synthetic advertising environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentConfig {
    /// Base conversion probability per user and channel.
    pub conversion: Vec<Vec<f64>>,
    /// Cost `w_j` of one exposure on each channel.
    pub costs: Vec<f64>,
    /// Gain credited on conversion.
    pub gain: f64,
    /// Per-round multiplicative drift magnitude; 0 disables drift.
    #[serde(default)]
    pub drift: f64,
    /// Width of the per-exposure context vector.
    pub touch_dim: usize,
    /// Static profile per user.
    pub profiles: Vec<Vec<f64>>,
    pub seed: u64,
}

impl EnvironmentConfig {
    pub fn users(&self) -> usize {
        self.conversion.len()
    }

    pub fn channels(&self) -> usize {
        self.costs.len()
    }

    pub fn user_id(u: usize) -> String {
        format!("u{u:04}")
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.channels();
        if m == 0 || self.users() == 0 {
            return Err(Error::Config(
                "environment needs at least one user and channel".into(),
            ));
        }
        if self.costs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("environment.costs must be positive".into()));
        }
        for (u, row) in self.conversion.iter().enumerate() {
            if row.len() != m || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Config(format!(
                    "environment.conversion[{u}] must hold {m} probabilities in [0, 1]"
                )));
            }
        }
        if self.profiles.len() != self.users() {
            return Err(Error::Config(
                "environment.profiles needs one entry per user".into(),
            ));
        }
        let width = self.profiles[0].len();
        if self.profiles.iter().any(|p| p.len() != width) {
            return Err(Error::Config("environment.profiles must share one width".into()));
        }
        if !(self.gain.is_finite() && self.gain >= 0.0) || !(self.drift >= 0.0) {
            return Err(Error::Config("environment.gain and drift must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Each user converts well (`high`) on one dominant channel and poorly
/// (`low`) elsewhere. Profiles are a noisy one-hot of the dominant channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeparableEnv {
    pub users: usize,
    pub channels: usize,
    pub high: f64,
    pub low: f64,
    pub cost: f64,
    pub gain: f64,
    pub drift: f64,
    pub touch_dim: usize,
    pub profile_noise: f64,
    pub seed: u64,
}

impl Default for SeparableEnv {
    fn default() -> Self {
        Self {
            users: 200,
            channels: 3,
            high: 0.8,
            low: 0.1,
            cost: 0.2,
            gain: 1.0,
            drift: 0.0,
            touch_dim: 2,
            profile_noise: 0.1,
            seed: 0,
        }
    }
}

impl SeparableEnv {
    pub fn build(&self) -> Result<EnvironmentConfig> {
        if self.channels == 0 || self.users == 0 {
            return Err(Error::Config(
                "environment needs at least one user and channel".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise =
            Normal::new(0.0, self.profile_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut conversion = Vec::with_capacity(self.users);
        let mut profiles = Vec::with_capacity(self.users);
        for _ in 0..self.users {
            let dominant = rng.random_range(0..self.channels);
            conversion.push(
                (0..self.channels)
                    .map(|j| if j == dominant { self.high } else { self.low })
                    .collect(),
            );
            profiles.push(
                (0..self.channels)
                    .map(|j| f64::from(j == dominant) + noise.sample(&mut rng))
                    .collect(),
            );
        }
        let cfg = EnvironmentConfig {
            conversion,
            costs: vec![self.cost; self.channels],
            gain: self.gain,
            drift: self.drift,
            touch_dim: self.touch_dim,
            profiles,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Live environment: drifting probabilities and a seeded outcome stream.
#[derive(Clone, Debug)]
pub struct Environment {
    config: EnvironmentConfig,
    probs: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    clock: i64,
}

impl Environment {
    pub fn new(config: EnvironmentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            probs: config.conversion.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            clock: 0,
            config,
        })
    }

    pub fn config(&self) -> &EnvironmentConfig {
        &self.config
    }

    /// Current (drifted) conversion probability.
    pub fn probability(&self, user: usize, channel: usize) -> f64 {
        self.probs[user][channel]
    }

    pub fn profile(&self, user: usize) -> &[f64] {
        &self.config.profiles[user]
    }

    /// Context features of a user's next exposure, drawn before the channel is chosen.
    pub fn context(&mut self, _user: usize) -> Vec<f64> {
        (0..self.config.touch_dim)
            .map(|_| self.rng.random_range(-1.0..1.0))
            .collect()
    }

    /// Applies one round of multiplicative drift, clipped to `[0, 1]`.
    pub fn advance_round(&mut self) {
        if self.config.drift == 0.0 {
            return;
        }
        let drift = self.config.drift;
        for row in &mut self.probs {
            for p in row.iter_mut() {
                let factor = 1.0 + drift * self.rng.random_range(-1.0..1.0);
                *p = (*p * factor).clamp(0.0, 1.0);
            }
        }
    }

    /// One exposure: draws the conversion and charges the channel cost.
    pub fn step(&mut self, user: usize, channel: usize, touch: Vec<f64>) -> Result<Observation> {
        if user >= self.config.users() || channel >= self.config.channels() {
            return Err(Error::Data(format!("invalid user {user} or channel {channel}")));
        }
        let converted = self.rng.random::<f64>() < self.probs[user][channel];
        self.clock += 1;
        Ok(Observation::new(
            channel,
            touch,
            if converted { self.config.gain } else { 0.0 },
            self.config.costs[channel],
            self.clock,
        ))
    }
}

/// Logging policy used to generate offline training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoggingPolicy {
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of exposing the user's best channel; otherwise uniform.
    pub best_channel_rate: f64,
}

impl Default for LoggingPolicy {
    fn default() -> Self {
        Self {
            min_len: 10,
            max_len: 30,
            best_channel_rate: 0.6,
        }
    }
}

/// One logged journey per user.
pub fn generate_journeys(env: &mut Environment, policy: &LoggingPolicy, seed: u64) -> Result<Vec<Journey>> {
    if policy.min_len == 0 || policy.max_len < policy.min_len {
        return Err(Error::Config("logging lengths need 1 ≤ min_len ≤ max_len".into()));
    }
    if !(0.0..=1.0).contains(&policy.best_channel_rate) {
        return Err(Error::Config("best_channel_rate must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = env.config().channels();
    let mut journeys = Vec::with_capacity(env.config().users());
    for u in 0..env.config().users() {
        let best = (0..m)
            .max_by(|&a, &b| {
                env.probability(u, a)
                    .total_cmp(&env.probability(u, b))
                    .then(b.cmp(&a))
            })
            .unwrap_or(0);
        let len = rng.random_range(policy.min_len..=policy.max_len);
        let mut observations = Vec::with_capacity(len);
        for _ in 0..len {
            let channel = if rng.random::<f64>() < policy.best_channel_rate {
                best
            } else {
                rng.random_range(0..m)
            };
            let touch = env.context(u);
            observations.push(env.step(u, channel, touch)?);
        }
        journeys.push(Journey {
            user_id: EnvironmentConfig::user_id(u),
            static_features: env.profile(u).to_vec(),
            observations,
        });
    }
    Ok(journeys)
}
