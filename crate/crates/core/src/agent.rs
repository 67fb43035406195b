//! Twin-delayed actor-critic training with a circular replay buffer.
//!
//! The same loop runs the DDPG ablations: [`AgentMode`] switches off the second
//! critic, target-policy smoothing and delayed actor updates, and swaps the
//! attention actor for a feed-forward one.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvError, FollowEpisode, StateWindow, TerminalCause, WINDOW};
use crate::eval::{self, EvalError};
use crate::nets::{window_features, Actor, AttentionActor, Critic, FeedForwardActor, NetError, TargetSet};
use crate::numerics::{load_params, save_params, Adam, Graph, Matrix, NumericsError, ParamSet, Scalar};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training episodes")]
    NoEpisodes,
    #[error("numerical failure at update {iteration} ({stage}): {source}")]
    Numerical {
        iteration: u64,
        stage: &'static str,
        source: NumericsError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl AgentError {
    /// True for failures caused by non-finite values during training.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            AgentError::Numerical { .. }
                | AgentError::Numerics(NumericsError::NonFiniteValue { .. } | NumericsError::NonFiniteGradient { .. })
        )
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    /// Attention actor, twin critics, smoothing noise, delayed updates.
    #[default]
    Atd3,
    /// Feed-forward actor on the newest observation, single critic.
    Ddpg,
    /// Feed-forward actor on the whole window, single critic.
    DdpgRt,
}

impl AgentMode {
    pub fn name(self) -> &'static str {
        match self {
            AgentMode::Atd3 => "atd3",
            AgentMode::Ddpg => "ddpg",
            AgentMode::DdpgRt => "ddpg-rt",
        }
    }

    pub fn critic_count(self) -> usize {
        if self == AgentMode::Atd3 {
            2
        } else {
            1
        }
    }

    pub fn smoothing(self) -> bool {
        self == AgentMode::Atd3
    }

    pub fn input_steps(self) -> usize {
        if self == AgentMode::Ddpg {
            1
        } else {
            WINDOW
        }
    }
}

impl std::str::FromStr for AgentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "atd3" => Ok(AgentMode::Atd3),
            "ddpg" => Ok(AgentMode::Ddpg),
            "ddpg-rt" => Ok(AgentMode::DdpgRt),
            other => Err(format!("unknown mode {other:?} (expected atd3, ddpg or ddpg-rt)")),
        }
    }
}

/// Training hyperparameters. Every field has a default, so `{}` is a complete config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: AgentMode,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Exploration noise std as a fraction of `a_max`.
    pub exploration_std: f64,
    /// Target smoothing noise std and clip, fractions of `a_max`.
    pub smoothing_std: f64,
    pub smoothing_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub cycles_per_epoch: usize,
    /// Environment steps generated per cycle.
    pub steps_per_cycle: usize,
    /// One gradient update after every `update_every` environment steps.
    pub update_every: usize,
    pub policy_delay: usize,
    pub buffer_capacity: usize,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub a_max: f64,
    pub seed: u64,
    /// Record elapsed seconds in the log. Off by default so logs are reproducible.
    pub log_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: AgentMode::Atd3,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            gamma: 0.99,
            tau: 1e-3,
            exploration_std: 0.1,
            smoothing_std: 0.2,
            smoothing_clip: 0.5,
            batch_size: 200,
            epochs: 60,
            cycles_per_epoch: 60,
            steps_per_cycle: 200,
            update_every: 1,
            policy_delay: 2,
            buffer_capacity: 100_000,
            actor_hidden: 100,
            critic_hidden: 100,
            a_max: env::A_MAX,
            seed: 0,
            log_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("gamma", self.gamma),
            ("tau", self.tau),
            ("a_max", self.a_max),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(AgentError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("exploration_std", self.exploration_std),
            ("smoothing_std", self.smoothing_std),
            ("smoothing_clip", self.smoothing_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AgentError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.gamma > 1.0 || self.tau > 1.0 {
            return Err(AgentError::Config("gamma and tau must not exceed 1".into()));
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
            ("cycles_per_epoch", self.cycles_per_epoch),
            ("steps_per_cycle", self.steps_per_cycle),
            ("update_every", self.update_every),
            ("policy_delay", self.policy_delay),
            ("actor_hidden", self.actor_hidden),
            ("critic_hidden", self.critic_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(AgentError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.buffer_capacity < self.batch_size {
            return Err(AgentError::Config(format!(
                "buffer_capacity {} is smaller than batch_size {}",
                self.buffer_capacity, self.batch_size
            )));
        }
        Ok(())
    }

    /// Actor updates happen every `delay` iterations; always 1 outside ATD3.
    pub fn effective_delay(&self) -> usize {
        if self.mode == AgentMode::Atd3 {
            self.policy_delay
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: StateWindow,
    pub a: f64,
    pub r: f64,
    pub s_next: StateWindow,
    pub terminal: bool,
}

/// Fixed-capacity FIFO of transitions with uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            inserted: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total number of transitions ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Stores `t`, evicting the oldest transition when full.
    pub fn push(&mut self, t: Transition) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
        self.inserted += 1;
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        assert!(!self.items.is_empty(), "sampling from an empty replay buffer");
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCounters {
    pub iterations: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub target_updates: u64,
}

/// Running check that every attention row produced sums to one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionAudit {
    pub rows: u64,
    pub violations: u64,
    pub max_deviation: f64,
}

impl AttentionAudit {
    pub const TOLERANCE: f64 = 1e-9;

    pub fn record_row(&mut self, row: &[f64]) {
        let dev = (row.iter().sum::<f64>() - 1.0).abs();
        self.rows += 1;
        if !(dev <= Self::TOLERANCE) {
            self.violations += 1;
        }
        if dev > self.max_deviation || dev.is_nan() {
            self.max_deviation = dev;
        }
    }

    pub fn record_matrix<T: Scalar>(&mut self, m: &Matrix<T>) {
        for r in 0..m.rows() {
            let row: Vec<f64> = m.row(r).iter().map(|v| v.to_f64_lossy()).collect();
            self.record_row(&row);
        }
    }

    pub fn merge(&mut self, other: &AttentionAudit) {
        self.rows += other.rows;
        self.violations += other.violations;
        self.max_deviation = self.max_deviation.max(other.max_deviation);
    }
}

/// Result of one call to [`Agent::update`].
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateReport {
    pub critic_losses: Vec<f64>,
    pub actor_objective: Option<f64>,
}

/// Actor, critics, their targets and optimizers.
#[derive(Clone, Debug)]
pub struct Agent<T> {
    config: TrainConfig,
    actor: Actor<T>,
    critics: Vec<Critic<T>>,
    targets: TargetSet<T>,
    actor_opt: Adam<T>,
    critic_opts: Vec<Adam<T>>,
    counters: UpdateCounters,
    audit: AttentionAudit,
}

fn numerical(iteration: u64, stage: &'static str) -> impl FnOnce(NumericsError) -> AgentError {
    move |source| AgentError::Numerical {
        iteration,
        stage,
        source,
    }
}

fn net_numerical(iteration: u64, stage: &'static str) -> impl FnOnce(NetError) -> AgentError {
    move |e| match e {
        NetError::Numerics(source) => AgentError::Numerical {
            iteration,
            stage,
            source,
        },
        other => AgentError::Net(other),
    }
}

impl<T: Scalar> Agent<T> {
    /// Fresh networks initialised from `rng`; targets start as exact copies.
    pub fn new<R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Self, AgentError> {
        config.validate()?;
        let a_max = T::lit(config.a_max);
        let actor = match config.mode {
            AgentMode::Atd3 => Actor::Attention(AttentionActor::new(config.actor_hidden, a_max, rng)),
            mode => Actor::FeedForward(FeedForwardActor::new(mode.input_steps(), config.actor_hidden, a_max, rng)),
        };
        let critics: Vec<Critic<T>> = (0..config.mode.critic_count())
            .map(|_| Critic::new(config.mode.input_steps(), config.critic_hidden, rng))
            .collect();
        Self::from_networks(config, actor, critics, None)
    }

    /// Assembles an agent from existing networks. Targets default to copies.
    pub fn from_networks(
        config: &TrainConfig,
        actor: Actor<T>,
        critics: Vec<Critic<T>>,
        targets: Option<TargetSet<T>>,
    ) -> Result<Self, AgentError> {
        config.validate()?;
        if critics.len() != config.mode.critic_count() {
            return Err(AgentError::Config(format!(
                "mode {} needs {} critics, got {}",
                config.mode.name(),
                config.mode.critic_count(),
                critics.len()
            )));
        }
        let targets = targets.unwrap_or_else(|| TargetSet::copy_of(&actor, &critics));
        let actor_opt = Adam::new(T::lit(config.actor_lr), actor.params().mats());
        let critic_opts = critics
            .iter()
            .map(|c| Adam::new(T::lit(config.critic_lr), c.params().mats()))
            .collect();
        Ok(Self {
            config: config.clone(),
            actor,
            critics,
            targets,
            actor_opt,
            critic_opts,
            counters: UpdateCounters::default(),
            audit: AttentionAudit::default(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn actor(&self) -> &Actor<T> {
        &self.actor
    }

    pub fn critics(&self) -> &[Critic<T>] {
        &self.critics
    }

    pub fn targets(&self) -> &TargetSet<T> {
        &self.targets
    }

    pub fn counters(&self) -> UpdateCounters {
        self.counters
    }

    pub fn attention_audit(&self) -> AttentionAudit {
        self.audit
    }

    pub fn audit_mut(&mut self) -> &mut AttentionAudit {
        &mut self.audit
    }

    fn a_max(&self) -> T {
        T::lit(self.config.a_max)
    }

    /// Policy output plus Gaussian noise of std `sigma · a_max`, clipped to `±a_max`.
    pub fn select_action<R: Rng + ?Sized>(&mut self, state: &StateWindow, sigma: f64, rng: &mut R) -> Result<f64, AgentError> {
        let out = self.actor.act(state)?;
        if let Some(row) = &out.attention {
            self.audit.record_row(row);
        }
        Ok(add_exploration_noise(out.action, sigma, self.config.a_max, rng))
    }

    /// Bootstrap targets `y = r + γ·min_k Q'_k(s', ã')`, with `y = r` at terminals.
    pub fn compute_target<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> Result<Vec<T>, AgentError> {
        let it = self.counters.iterations;
        let next: Vec<&StateWindow> = batch.iter().map(|t| &t.s_next).collect();
        let (mut actions, attention) = self.targets.actor.act_batch(&next).map_err(net_numerical(it, "target actor"))?;
        if let Some(att) = &attention {
            self.audit.record_matrix(att);
        }
        let a_max = self.a_max();
        if self.config.mode.smoothing() {
            let std = self.config.smoothing_std;
            let clip = self.config.smoothing_clip;
            let normal = (std > 0.0).then(|| Normal::new(0.0, std).expect("finite std"));
            for a in &mut actions {
                let eps = normal.map_or(0.0, |n| n.sample(rng)).clamp(-clip, clip);
                *a = (*a + T::lit(eps * self.config.a_max)).max(-a_max).min(a_max);
            }
        }
        let q = self.target_q(&next, &actions).map_err(net_numerical(it, "target critics"))?;
        let gamma = T::lit(self.config.gamma);
        Ok(batch
            .iter()
            .zip(q)
            .map(|(t, q)| {
                let r = T::lit(t.r);
                if t.terminal {
                    r
                } else {
                    r + gamma * q
                }
            })
            .collect())
    }

    /// Elementwise minimum over the target critics at the given physical actions.
    pub fn target_q(&self, states: &[&StateWindow], actions: &[T]) -> Result<Vec<T>, NetError> {
        let mut g = Graph::new();
        let steps = self.targets.critics[0].input_steps();
        let x = g.constant(window_features(states, steps))?;
        let a_max = self.a_max();
        let a = g.constant(Matrix::new(actions.len(), 1, actions.iter().map(|&v| v / a_max).collect())?)?;
        let mut q = self.targets.critics[0].attach(&mut g, x, a, false)?.1;
        for c in &self.targets.critics[1..] {
            let qk = c.attach(&mut g, x, a, false)?.1;
            q = g.min(q, qk)?;
        }
        g.forward()?;
        Ok(g.value(q).expect("evaluated").data().to_vec())
    }

    /// One Adam step per critic on the mean squared error against `y`. Returns the losses.
    pub fn update_critics(&mut self, batch: &[&Transition], y: &[T]) -> Result<Vec<f64>, AgentError> {
        let it = self.counters.iterations;
        let states: Vec<&StateWindow> = batch.iter().map(|t| &t.s).collect();
        let a_max = self.a_max();
        let actions = Matrix::new(batch.len(), 1, batch.iter().map(|t| T::lit(t.a) / a_max).collect())?;
        let targets = Matrix::new(batch.len(), 1, y.to_vec())?;
        let mut losses = Vec::with_capacity(self.critics.len());
        for (critic, opt) in self.critics.iter_mut().zip(&mut self.critic_opts) {
            let mut g = Graph::new();
            let x = g.constant(window_features(&states, critic.input_steps()))?;
            let a = g.constant(actions.clone())?;
            let yt = g.constant(targets.clone()).map_err(numerical(it, "critic target"))?;
            let (p, q) = critic.attach(&mut g, x, a, true)?;
            let loss = g.mse(q, yt)?;
            g.forward().map_err(numerical(it, "critic forward"))?;
            let value = g.scalar(loss)?;
            let grads = g.backward(loss)?.collect(&p)?;
            opt.step(critic.params_mut().mats_mut(), &grads)
                .map_err(numerical(it, "critic step"))?;
            losses.push(value.to_f64_lossy());
        }
        self.counters.critic_updates += 1;
        Ok(losses)
    }

    /// One Adam ascent step on `mean Q_1(s, π(s))` with the critic frozen. Returns the objective.
    pub fn update_actor(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let it = self.counters.iterations;
        let states: Vec<&StateWindow> = batch.iter().map(|t| &t.s).collect();
        let mut g = Graph::new();
        let xa = g.constant(window_features(&states, self.actor.input_steps()))?;
        let (p, nodes) = self.actor.attach(&mut g, xa, true)?;
        let a_scaled = g.scale(nodes.action, T::one() / self.a_max())?;
        let xc = g.constant(window_features(&states, self.critics[0].input_steps()))?;
        let (_, q) = self.critics[0].attach(&mut g, xc, a_scaled, false)?;
        let objective = g.mean(q)?;
        let loss = g.scale(objective, -T::one())?;
        g.forward().map_err(numerical(it, "actor forward"))?;
        if let Some(att) = nodes.attention {
            self.audit.record_matrix(g.value(att).expect("evaluated"));
        }
        let value = g.scalar(objective)?;
        let grads = g.backward(loss)?.collect(&p)?;
        self.actor_opt
            .step(self.actor.params_mut().mats_mut(), &grads)
            .map_err(numerical(it, "actor step"))?;
        self.counters.actor_updates += 1;
        Ok(value.to_f64_lossy())
    }

    /// `target ← τ·main + (1 − τ)·target` for the actor and every critic.
    pub fn soft_update_targets(&mut self) -> Result<(), AgentError> {
        self.targets
            .soft_update(&self.actor, &self.critics, T::lit(self.config.tau))?;
        self.counters.target_updates += 1;
        Ok(())
    }

    /// One training iteration on a minibatch: critics always, actor and targets
    /// when the iteration counter is a multiple of the policy delay.
    pub fn update_on_batch<R: Rng + ?Sized>(&mut self, batch: &[&Transition], rng: &mut R) -> Result<UpdateReport, AgentError> {
        self.counters.iterations += 1;
        let y = self.compute_target(batch, rng)?;
        let critic_losses = self.update_critics(batch, &y)?;
        let actor_objective = if self.counters.iterations % self.config.effective_delay() as u64 == 0 {
            let obj = self.update_actor(batch)?;
            self.soft_update_targets()?;
            Some(obj)
        } else {
            None
        };
        Ok(UpdateReport {
            critic_losses,
            actor_objective,
        })
    }

    /// Samples a minibatch and runs [`Agent::update_on_batch`].
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, rng: &mut R) -> Result<UpdateReport, AgentError> {
        let batch = buffer.sample(self.config.batch_size, rng);
        self.update_on_batch(&batch, rng)
    }

    /// Every network in one set: actor names unchanged, then `critic{k}_*`,
    /// `targets_*` for the target actor and `targets_critic{k}_*`.
    pub fn checkpoint_params(&self) -> ParamSet<T> {
        let mut set = self.actor.params().clone();
        for (k, c) in self.critics.iter().enumerate() {
            append(&mut set, &c.params().prefixed(&format!("critic{}_", k + 1)));
        }
        append(&mut set, &self.targets.actor.params().prefixed("targets_"));
        for (k, c) in self.targets.critics.iter().enumerate() {
            append(&mut set, &c.params().prefixed(&format!("targets_critic{}_", k + 1)));
        }
        set
    }

    pub fn checkpoint_meta(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": self.config.mode,
            "a_max": self.config.a_max,
            "actor_params": self.actor.params().len(),
            "critics": self.critics.len(),
            "counters": self.counters,
        })
    }

    pub fn save_checkpoint(&self, bin: &Path, json: &Path) -> Result<(), AgentError> {
        save_params(&self.checkpoint_params(), self.checkpoint_meta(), bin, json)?;
        Ok(())
    }

    /// Restores networks from a checkpoint. Optimizer moments are not stored and restart at zero.
    pub fn load_checkpoint(config: &TrainConfig, bin: &Path, json: &Path) -> Result<Self, AgentError> {
        let (set, manifest) = load_params::<T>(bin, json)?;
        let (mode, a_max, n_actor, n_critics) = parse_meta(&manifest.meta)?;
        if mode != config.mode {
            return Err(AgentError::Checkpoint(format!(
                "checkpoint holds mode {}, config asks for {}",
                mode.name(),
                config.mode.name()
            )));
        }
        let mut rest = set.mats().to_vec().into_iter().zip(set.names().to_vec());
        let mut take = |n: usize, strip: &str| -> ParamSet<T> {
            let mut p = ParamSet::new();
            for (m, name) in rest.by_ref().take(n) {
                p.push(name.strip_prefix(strip).unwrap_or(&name).to_string(), m);
            }
            p
        };
        let build_actor = |p: ParamSet<T>| -> Result<Actor<T>, NetError> {
            Ok(match mode {
                AgentMode::Atd3 => Actor::Attention(AttentionActor::from_params(p, T::lit(a_max))?),
                _ => Actor::FeedForward(FeedForwardActor::from_params(p, T::lit(a_max))?),
            })
        };
        let actor = build_actor(take(n_actor, ""))?;
        let mut critics = Vec::new();
        for k in 1..=n_critics {
            critics.push(Critic::from_params(take(6, &format!("critic{k}_")))?);
        }
        let t_actor = build_actor(take(n_actor, "targets_"))?;
        let mut t_critics = Vec::new();
        for k in 1..=n_critics {
            t_critics.push(Critic::from_params(take(6, &format!("targets_critic{k}_")))?);
        }
        let mut cfg = config.clone();
        cfg.a_max = a_max;
        Self::from_networks(
            &cfg,
            actor,
            critics,
            Some(TargetSet {
                actor: t_actor,
                critics: t_critics,
            }),
        )
    }
}

fn append<T: Scalar>(set: &mut ParamSet<T>, other: &ParamSet<T>) {
    for (name, m) in other.iter() {
        set.push(name, m.clone());
    }
}

fn parse_meta(meta: &serde_json::Value) -> Result<(AgentMode, f64, usize, usize), AgentError> {
    let bad = |what: &str| AgentError::Checkpoint(format!("manifest meta lacks {what}"));
    let mode: AgentMode = serde_json::from_value(meta.get("mode").cloned().ok_or_else(|| bad("mode"))?)
        .map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    let a_max = meta.get("a_max").and_then(|v| v.as_f64()).ok_or_else(|| bad("a_max"))?;
    let n_actor = meta.get("actor_params").and_then(|v| v.as_u64()).ok_or_else(|| bad("actor_params"))? as usize;
    let n_critics = meta.get("critics").and_then(|v| v.as_u64()).ok_or_else(|| bad("critics"))? as usize;
    Ok((mode, a_max, n_actor, n_critics))
}

/// Loads only the actor from a checkpoint written by [`Agent::save_checkpoint`].
pub fn load_actor<T: Scalar>(bin: &Path, json: &Path) -> Result<Actor<T>, AgentError> {
    let (set, manifest) = load_params::<T>(bin, json)?;
    let (mode, a_max, n_actor, _) = parse_meta(&manifest.meta)?;
    let mut p = ParamSet::new();
    for (name, m) in set.iter().take(n_actor) {
        p.push(name, m.clone());
    }
    Ok(match mode {
        AgentMode::Atd3 => Actor::Attention(AttentionActor::from_params(p, T::lit(a_max))?),
        _ => Actor::FeedForward(FeedForwardActor::from_params(p, T::lit(a_max))?),
    })
}

/// `clip(action + N(0, (sigma·a_max)²), ±a_max)`; no draw is made when `sigma` is zero.
pub fn add_exploration_noise<R: Rng + ?Sized>(action: f64, sigma: f64, a_max: f64, rng: &mut R) -> f64 {
    let noise = if sigma > 0.0 {
        Normal::new(0.0, sigma * a_max).expect("finite std").sample(rng)
    } else {
        0.0
    };
    (action + noise).clamp(-a_max, a_max)
}

/// One row of the training log, written once per cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub cycle: usize,
    pub critic1_loss: Option<f64>,
    pub critic2_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    /// Set on the last cycle of each epoch when evaluation episodes were given.
    pub eval_rmspe: Option<f64>,
    pub wallclock_s: Option<f64>,
    pub iterations: u64,
    pub critic_updates: u64,
    pub actor_updates: u64,
    pub target_updates: u64,
}

pub const LOG_HEADER: [&str; 11] = [
    "epoch",
    "cycle",
    "critic1_loss",
    "critic2_loss",
    "actor_objective",
    "eval_rmspe",
    "wallclock_s",
    "iterations",
    "critic_updates",
    "actor_updates",
    "target_updates",
];

pub fn write_log_csv<W: Write>(rows: &[LogRow], writer: W) -> Result<(), AgentError> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(LOG_HEADER)?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.cycle.to_string(),
            opt(r.critic1_loss),
            opt(r.critic2_loss),
            opt(r.actor_objective),
            opt(r.eval_rmspe),
            r.wallclock_s.map(|x| format!("{x:.3}")).unwrap_or_default(),
            r.iterations.to_string(),
            r.critic_updates.to_string(),
            r.actor_updates.to_string(),
            r.target_updates.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Passed to the per-epoch callback of [`train`].
pub struct EpochReport<'a, T> {
    pub epoch: usize,
    pub agent: &'a Agent<T>,
    pub eval_rmspe: Option<f64>,
}

pub struct TrainOutcome<T> {
    pub agent: Agent<T>,
    pub log: Vec<LogRow>,
    pub buffer_len: usize,
    pub env_steps: u64,
    pub episodes_started: u64,
    pub collisions: u64,
}

#[derive(Default)]
struct Mean {
    sum: f64,
    n: usize,
}

impl Mean {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn take(&mut self) -> Option<f64> {
        let out = (self.n > 0).then(|| self.sum / self.n as f64);
        *self = Mean::default();
        out
    }
}

/// Deterministic pooled RMSPE of `actor` over `episodes`, counting attention rows in `audit`.
pub fn evaluate<T: Scalar>(actor: &Actor<T>, episodes: &[FollowEpisode], audit: &mut AttentionAudit) -> Result<f64, AgentError> {
    let mut traces = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let trace = eval::rollout(actor, ep)?;
        for row in &trace.attention {
            audit.record_row(row);
        }
        traces.push(trace);
    }
    Ok(eval::pooled_rmspe(&traces)?)
}

/// Runs the full training schedule.
///
/// Each environment step acts with exploration noise, stores the transition and,
/// once the buffer holds a batch, performs one update every `update_every` steps.
/// Episodes are drawn uniformly from `train` and restart on any terminal.
/// After every epoch the deterministic policy is scored on `eval` and
/// `on_epoch` is called.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    train: &[FollowEpisode],
    eval: &[FollowEpisode],
    mut on_epoch: impl FnMut(&EpochReport<T>) -> Result<(), AgentError>,
) -> Result<TrainOutcome<T>, AgentError> {
    config.validate()?;
    if train.is_empty() {
        return Err(AgentError::NoEpisodes);
    }
    for ep in train {
        if ep.len() < WINDOW + 1 {
            return Err(AgentError::Eval(EvalError::TooShort {
                id: ep.id.clone(),
                len: ep.len(),
                min: WINDOW + 1,
            }));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut agent = Agent::<T>::new(config, &mut rng)?;
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let started = Instant::now();
    let mut log = Vec::with_capacity(config.epochs * config.cycles_per_epoch);

    let mut episode = &train[rng.random_range(0..train.len())];
    let mut state = env::reset(episode)?;
    let mut env_steps = 0u64;
    let mut episodes_started = 1u64;
    let mut collisions = 0u64;

    for epoch in 1..=config.epochs {
        for cycle in 1..=config.cycles_per_epoch {
            let mut c1 = Mean::default();
            let mut c2 = Mean::default();
            let mut obj = Mean::default();
            for _ in 0..config.steps_per_cycle {
                let a = agent.select_action(&state, config.exploration_std, &mut rng)?;
                let out = env::step(&state, a, episode)?;
                buffer.push(Transition {
                    s: state.clone(),
                    a,
                    r: out.reward,
                    s_next: out.next.clone(),
                    terminal: out.terminal.is_some(),
                });
                env_steps += 1;
                if out.terminal.is_some() {
                    if out.terminal == Some(TerminalCause::Collision) {
                        collisions += 1;
                    }
                    episode = &train[rng.random_range(0..train.len())];
                    state = env::reset(episode)?;
                    episodes_started += 1;
                } else {
                    state = out.next;
                }
                if buffer.len() >= config.batch_size && env_steps % config.update_every as u64 == 0 {
                    let report = agent.update(&buffer, &mut rng)?;
                    c1.add(report.critic_losses[0]);
                    if let Some(&l) = report.critic_losses.get(1) {
                        c2.add(l);
                    }
                    if let Some(o) = report.actor_objective {
                        obj.add(o);
                    }
                }
            }
            let last = cycle == config.cycles_per_epoch;
            let eval_rmspe = if last && !eval.is_empty() {
                let mut audit = AttentionAudit::default();
                let r = evaluate(&agent.actor, eval, &mut audit)?;
                agent.audit.merge(&audit);
                Some(r)
            } else {
                None
            };
            let counters = agent.counters;
            log.push(LogRow {
                epoch,
                cycle,
                critic1_loss: c1.take(),
                critic2_loss: c2.take(),
                actor_objective: obj.take(),
                eval_rmspe,
                wallclock_s: config.log_wallclock.then(|| started.elapsed().as_secs_f64()),
                iterations: counters.iterations,
                critic_updates: counters.critic_updates,
                actor_updates: counters.actor_updates,
                target_updates: counters.target_updates,
            });
            if last {
                log::info!(
                    "{} epoch {epoch}/{}: eval rmspe {}, updates {}",
                    config.mode.name(),
                    config.epochs,
                    eval_rmspe.map_or("n/a".to_string(), |r| format!("{r:.3}%")),
                    counters.iterations
                );
                on_epoch(&EpochReport {
                    epoch,
                    agent: &agent,
                    eval_rmspe,
                })?;
            }
        }
    }
    Ok(TrainOutcome {
        agent,
        log,
        buffer_len: buffer.len(),
        env_steps,
        episodes_started,
        collisions,
    })
}
