//! Deep Q-network agent over the three-action table `[p_min, 0, p_max]`:
//! replay buffer, target network, epsilon-greedy exploration, and the
//! training / greedy evaluation loops.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battery_env::{discretize_actions, EnvObservation, Environment, TraceRow};
use crate::error::{invalid, Error, Result};
use crate::neural::{Activation, DenseNet, Optimizer, OptimizerKind};

pub const ACTION_COUNT: usize = 3;

/// Maps observations to network inputs: SOC unchanged, current price and
/// forecasts min-max scaled with the training-split price range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub price_min: f64,
    pub price_max: f64,
}

impl StateEncoder {
    pub fn new(price_min: f64, price_max: f64) -> Result<Self> {
        if !(price_min.is_finite() && price_max.is_finite() && price_max >= price_min) {
            return Err(invalid("state encoder needs a finite price range"));
        }
        Ok(Self {
            price_min,
            price_max,
        })
    }

    /// Range of `prices`, typically the training split.
    pub fn fit(prices: &[f64]) -> Result<Self> {
        let lo = prices.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = prices.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self::new(lo, hi)
    }

    pub fn identity() -> Self {
        Self {
            price_min: -1.0,
            price_max: 1.0,
        }
    }

    fn scale(&self, price: f64) -> f64 {
        if self.price_max > self.price_min {
            2.0 * (price - self.price_min) / (self.price_max - self.price_min) - 1.0
        } else {
            0.0
        }
    }

    pub fn encode(&self, obs: &EnvObservation) -> Vec<f64> {
        let mut v = Vec::with_capacity(obs.width());
        v.push(obs.soc);
        v.push(self.scale(obs.current_price));
        v.extend(obs.forecasts.iter().map(|&p| self.scale(p)));
        v
    }
}

/// `(state, action, reward, next state, done)`; `reward` in currency.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity ring of transitions; the oldest entry is overwritten
/// once full.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be at least 1"));
        }
        Ok(Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            cursor: 0,
        })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stored transitions, oldest first.
    pub fn iter_chronological(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity {
            0
        } else {
            self.cursor
        };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform sample without replacement; `None` while underfilled.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<Vec<&Transition>> {
        if batch == 0 || self.items.len() < batch {
            return None;
        }
        Some(
            index::sample(rng, self.items.len(), batch)
                .into_iter()
                .map(|i| &self.items[i])
                .collect(),
        )
    }
}

/// Linear decay from `start` to `end` over `decay_steps`, then constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub decay_steps: u64,
}

impl EpsilonSchedule {
    pub fn new(start: f64, end: f64, decay_steps: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) || end > start {
            return Err(invalid("epsilon schedule needs 0 <= end <= start <= 1"));
        }
        Ok(Self {
            start,
            end,
            decay_steps,
        })
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.decay_steps == 0 || step >= self.decay_steps {
            return self.end;
        }
        let frac = step as f64 / self.decay_steps as f64;
        self.start + (self.end - self.start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    /// Environment steps between target-network copies.
    pub sync_interval: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Share of all training steps over which epsilon decays.
    pub epsilon_decay_fraction: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Rewards are multiplied by this factor inside the Bellman targets.
    pub reward_scale: f64,
    /// Transitions collected before the first gradient step.
    pub learning_starts: usize,
    pub train_frequency: u64,
    pub grad_clip: Option<f64>,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            learning_rate: 1e-3,
            buffer_capacity: 100_000,
            batch_size: 64,
            sync_interval: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.2,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            reward_scale: 0.01,
            learning_starts: 1_000,
            train_frequency: 1,
            grad_clip: Some(10.0),
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.sync_interval == 0 || self.train_frequency == 0 {
            return Err(invalid(
                "batch size, sync interval and train frequency must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.epsilon_decay_fraction) {
            return Err(invalid("epsilon_decay_fraction must lie in [0, 1]"));
        }
        if self.reward_scale.is_nan() || self.reward_scale <= 0.0 {
            return Err(invalid("reward_scale must be positive"));
        }
        EpsilonSchedule::new(self.epsilon_start, self.epsilon_end, 0)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DqnAgent {
    pub q_net: DenseNet,
    pub target_net: DenseNet,
    pub gamma: f64,
    pub schedule: EpsilonSchedule,
    pub buffer: ReplayBuffer,
    pub sync_interval: u64,
    pub encoder: StateEncoder,
    pub config: DqnConfig,
    optimizer: Optimizer,
    steps: u64,
}

impl DqnAgent {
    pub fn new(
        state_width: usize,
        config: DqnConfig,
        schedule: EpsilonSchedule,
        encoder: StateEncoder,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut widths = vec![state_width];
        widths.extend_from_slice(&config.hidden);
        widths.push(ACTION_COUNT);
        let mut acts = vec![config.activation; config.hidden.len()];
        acts.push(Activation::Identity);
        let q_net = DenseNet::init(&widths, &acts, seed)?;
        Ok(Self {
            target_net: q_net.clone(),
            q_net,
            gamma: config.gamma,
            schedule,
            buffer: ReplayBuffer::new(config.buffer_capacity)?,
            sync_interval: config.sync_interval,
            encoder,
            optimizer: Optimizer::new(OptimizerKind::Adam, config.learning_rate)?,
            config,
            steps: 0,
        })
    }

    /// Replaces the Q-network (and target) with given parameters.
    pub fn with_network(mut self, net: DenseNet) -> Result<Self> {
        if net.output_width() != ACTION_COUNT || net.input_width() != self.q_net.input_width() {
            return Err(invalid("network shape does not match the agent"));
        }
        self.target_net = net.clone();
        self.q_net = net;
        Ok(self)
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn q_values(&self, state: &[f64]) -> Vec<f64> {
        self.q_net.forward_unchecked(state)
    }

    pub fn greedy_action(&self, state: &[f64]) -> usize {
        argmax(&self.q_values(state))
    }

    /// Greedy with probability `1 - epsilon`, uniform otherwise.
    pub fn select_action<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        epsilon: f64,
        rng: &mut R,
    ) -> usize {
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            rng.random_range(0..ACTION_COUNT)
        } else {
            self.greedy_action(state)
        }
    }

    /// `scale * r + gamma * max_a' Q_target(s', a')`, or `scale * r` at terminals.
    pub fn bellman_targets(&self, batch: &[&Transition]) -> Vec<f64> {
        batch
            .iter()
            .map(|t| {
                let r = self.config.reward_scale * t.reward;
                if t.done || self.gamma == 0.0 {
                    r
                } else {
                    let next = self.target_net.forward_unchecked(&t.next_state);
                    r + self.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect()
    }

    /// Gradient step on the Q-network from a given batch.
    pub fn learn_from(&mut self, batch: &[&Transition]) -> Result<f64> {
        let targets = self.bellman_targets(batch);
        let inputs: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let (mut grads, loss) = self.q_net.backward_selected(&inputs, &actions, &targets)?;
        if let Some(clip) = self.config.grad_clip {
            grads.clip_norm(clip);
        }
        self.optimizer.step(&mut self.q_net, &grads);
        Ok(loss)
    }

    /// Samples a batch and takes one optimizer step. `None` while the
    /// buffer holds fewer transitions than a batch.
    pub fn train_step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        let Some(batch) = self.buffer.sample(self.config.batch_size, rng) else {
            return Ok(None);
        };
        let batch: Vec<Transition> = batch.into_iter().cloned().collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        self.learn_from(&refs).map(Some)
    }

    pub fn sync_target(&mut self) {
        self.target_net = self.q_net.clone();
    }

    /// One environment interaction during training.
    fn observe<R: Rng + ?Sized>(&mut self, transition: Transition, rng: &mut R) -> Result<()> {
        self.buffer.push(transition);
        self.steps += 1;
        if self.steps.is_multiple_of(self.config.train_frequency)
            && self.buffer.len() >= self.config.learning_starts.max(self.config.batch_size)
        {
            self.train_step(rng)?;
        }
        if self.steps.is_multiple_of(self.sync_interval) {
            self.sync_target();
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trained agent and its per-episode accumulated (undiscounted) reward.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: DqnAgent,
    pub history: Vec<f64>,
}

/// Runs `episodes` training episodes on environments produced by `make_env`.
pub fn train_agent<E, F>(
    make_env: F,
    config: &DqnConfig,
    encoder: StateEncoder,
    episodes: usize,
    seed: u64,
) -> Result<TrainOutcome>
where
    E: Environment,
    F: Fn() -> Result<E>,
{
    if episodes == 0 {
        return Err(invalid("training needs at least one episode"));
    }
    let mut env = make_env()?;
    let total_steps = (episodes * env.episode_len()) as u64;
    let decay = (config.epsilon_decay_fraction * total_steps as f64).round() as u64;
    let schedule = EpsilonSchedule::new(config.epsilon_start, config.epsilon_end, decay)?;
    let mut agent = DqnAgent::new(
        env.observation_width(),
        config.clone(),
        schedule,
        encoder,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let actions = discretize_actions(env.params());
    let mut history = Vec::with_capacity(episodes);

    for episode in 0..episodes {
        if episode > 0 {
            env = make_env()?;
        }
        let mut state = agent.encoder.encode(&env.reset()?);
        let mut total = 0.0;
        loop {
            let eps = agent.schedule.value(agent.steps);
            let a = agent.select_action(&state, eps, &mut rng);
            let out = env.step(actions[a])?;
            total += out.reward;
            let next = agent.encoder.encode(&out.observation);
            agent.observe(
                Transition {
                    state: std::mem::replace(&mut state, next.clone()),
                    action: a,
                    reward: out.reward,
                    next_state: next,
                    done: out.done,
                },
                &mut rng,
            )?;
            if out.done {
                break;
            }
        }
        log::debug!("episode {episode}: reward {total:.2}");
        history.push(total);
    }
    Ok(TrainOutcome { agent, history })
}

/// Greedy rollout result.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reward: f64,
    /// Steps where the corrected action was non-zero.
    pub activity_count: usize,
    pub trace: Vec<TraceRow>,
}

/// Runs one full episode with `epsilon = 0`. The agent is not modified.
pub fn evaluate_policy<E: Environment>(agent: &DqnAgent, env: &mut E) -> Result<Evaluation> {
    let actions = discretize_actions(env.params());
    run_greedy(env, |obs| {
        actions[agent.greedy_action(&agent.encoder.encode(obs))]
    })
}

/// Rolls out a deterministic policy over one episode, recording a trace.
pub fn run_greedy<E, P>(env: &mut E, mut policy: P) -> Result<Evaluation>
where
    E: Environment,
    P: FnMut(&EnvObservation) -> f64,
{
    let mut obs = env.reset()?;
    let mut eval = Evaluation {
        reward: 0.0,
        activity_count: 0,
        trace: Vec::with_capacity(env.episode_len()),
    };
    for step in 0.. {
        let record = *env
            .current_record()
            .ok_or_else(|| Error::State("environment ended before reporting done".into()))?;
        let action = policy(&obs);
        let out = env.step(action)?;
        eval.reward += out.reward;
        if out.corrected_action != 0.0 {
            eval.activity_count += 1;
        }
        eval.trace.push(TraceRow::new(step, &record, action, &out));
        if out.done {
            break;
        }
        obs = out.observation;
    }
    Ok(eval)
}

/// Mean and population standard deviation of each column across runs.
pub fn mean_std_curves(histories: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = histories.iter().map(Vec::len).min().unwrap_or(0);
    let n = histories.len() as f64;
    (0..len)
        .map(|i| {
            let mean = histories.iter().map(|h| h[i]).sum::<f64>() / n;
            let var = histories.iter().map(|h| (h[i] - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt())
        })
        .unzip()
}
