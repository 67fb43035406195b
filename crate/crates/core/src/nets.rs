//! Actor and critic networks built on [`crate::numerics::Graph`].
//!
//! The attention actor encodes the window with a tanh recurrence, scores every
//! hidden state against the final one with a concatenation score, and maps the
//! attention-weighted context to a bounded acceleration. The feed-forward actor
//! backs the DDPG ablations. Critics are two-hidden-layer tanh MLPs over the
//! flattened window plus the action.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::env::{StateWindow, WINDOW};
use crate::numerics::{Graph, Matrix, NodeId, NumericsError, ParamSet, Scalar};

/// Fixed divisors applied to `[v_f, dv, gap]` before they enter any network.
pub const OBS_SCALE: [f64; 3] = [30.0, 10.0, 100.0];

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("expected input of {expected} columns, got {got}")]
    InputWidth { expected: usize, got: usize },
    #[error("parameter set does not match the architecture: {0}")]
    Layout(String),
    #[error("soft update rate {0} outside [0, 1]")]
    Tau(f64),
}

/// Scaled features of the newest `steps` observations of each window, one row per window.
pub fn window_features<T: Scalar>(states: &[&StateWindow], steps: usize) -> Matrix<T> {
    assert!(steps >= 1 && steps <= WINDOW);
    let cols = 3 * steps;
    let mut data = Vec::with_capacity(states.len() * cols);
    for s in states {
        for o in &s.observations()[WINDOW - steps..] {
            for (v, scale) in o.as_array().iter().zip(OBS_SCALE) {
                data.push(T::lit(v / scale));
            }
        }
    }
    Matrix::new(states.len(), cols, data).expect("row-major features")
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_fn(rows, cols, |_, _| T::lit(dist.sample(rng)))
}

fn check_layout<T: Scalar>(params: &ParamSet<T>, expected: &[(&str, (usize, usize))]) -> Result<(), NetError> {
    if params.len() != expected.len() {
        return Err(NetError::Layout(format!("{} matrices, expected {}", params.len(), expected.len())));
    }
    for ((name, m), (want_name, want_shape)) in params.iter().zip(expected) {
        if name != *want_name || m.shape() != *want_shape {
            return Err(NetError::Layout(format!(
                "{name} {:?}, expected {want_name} {want_shape:?}",
                m.shape()
            )));
        }
    }
    Ok(())
}

fn insert<T: Scalar>(g: &mut Graph<T>, params: &ParamSet<T>, trainable: bool) -> Result<Vec<NodeId>, NumericsError> {
    params
        .mats()
        .iter()
        .map(|m| if trainable { g.param(m.clone()) } else { g.constant(m.clone()) })
        .collect()
}

/// Output nodes of an actor inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct ActorNodes {
    /// `B×1` accelerations, m/s².
    pub action: NodeId,
    /// `B×WINDOW` attention weights, oldest step first, when the actor has them.
    pub attention: Option<NodeId>,
}

/// One actor evaluation on a single window.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorOutput {
    pub action: f64,
    pub attention: Option<[f64; WINDOW]>,
}

/// Recurrent encoder with concatenation attention and a tanh action head.
///
/// Parameters, in order: `U_E` (3×H), `W_E` (H×H), `W1_a` (2H×H), `W2_a` (H×1), `W_c` (H×1).
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionActor<T> {
    hidden: usize,
    a_max: T,
    params: ParamSet<T>,
}

impl<T: Scalar> AttentionActor<T> {
    pub fn new<R: Rng + ?Sized>(hidden: usize, a_max: T, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        for (name, (rows, cols)) in Self::layout(hidden) {
            params.push(name, uniform_init(rows, cols, rows, rng));
        }
        Self { hidden, a_max, params }
    }

    pub fn from_params(params: ParamSet<T>, a_max: T) -> Result<Self, NetError> {
        let hidden = params.mats().first().map(|m| m.cols()).unwrap_or(0);
        check_layout(&params, &Self::layout(hidden))?;
        Ok(Self { hidden, a_max, params })
    }

    fn layout(h: usize) -> Vec<(&'static str, (usize, usize))> {
        vec![
            ("U_E", (3, h)),
            ("W_E", (h, h)),
            ("W1_a", (2 * h, h)),
            ("W2_a", (h, 1)),
            ("W_c", (h, 1)),
        ]
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Adds the forward pass for a `B×3·WINDOW` input node, given this actor's parameter nodes.
    pub fn build(&self, g: &mut Graph<T>, p: &[NodeId], input: NodeId) -> Result<ActorNodes, NetError> {
        let (u_e, w_e, w1_a, w2_a, w_c) = (p[0], p[1], p[2], p[3], p[4]);
        let width = g.shape(input).1;
        if width != 3 * WINDOW {
            return Err(NetError::InputWidth {
                expected: 3 * WINDOW,
                got: width,
            });
        }
        let h = self.hidden;

        let mut states = Vec::with_capacity(WINDOW);
        for j in 0..WINDOW {
            let x_j = g.slice_cols(input, 3 * j, 3)?;
            let mut pre = g.matmul(x_j, u_e)?;
            if let Some(&prev) = states.last() {
                let rec = g.matmul(prev, w_e)?;
                pre = g.add(pre, rec)?;
            }
            states.push(g.tanh(pre)?);
        }
        let h_f = states[WINDOW - 1];

        // [h_f; h_j]·W1 = h_f·W1[..H] + h_j·W1[H..]
        let w1_query = g.slice_rows(w1_a, 0, h)?;
        let w1_key = g.slice_rows(w1_a, h, h)?;
        let query = g.matmul(h_f, w1_query)?;
        let mut scores = Vec::with_capacity(WINDOW);
        for &h_j in &states {
            let key = g.matmul(h_j, w1_key)?;
            let joint = g.add(query, key)?;
            let act = g.tanh(joint)?;
            scores.push(g.matmul(act, w2_a)?);
        }
        let scores = g.concat_cols(&scores)?;
        let beta = g.softmax_rows(scores)?;

        let mut context: Option<NodeId> = None;
        for (j, &h_j) in states.iter().enumerate() {
            let b_j = g.slice_cols(beta, j, 1)?;
            let term = g.scale_rows(h_j, b_j)?;
            context = Some(match context {
                Some(c) => g.add(c, term)?,
                None => term,
            });
        }
        let logit = g.matmul(context.expect("non-empty window"), w_c)?;
        let squashed = g.tanh(logit)?;
        let action = g.scale(squashed, self.a_max)?;
        Ok(ActorNodes {
            action,
            attention: Some(beta),
        })
    }
}

/// One-hidden-layer tanh actor over the newest `steps` observations.
///
/// Parameters: `W1` (3·steps×H), `b1` (1×H), `W2` (H×1), `b2` (1×1).
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardActor<T> {
    steps: usize,
    hidden: usize,
    a_max: T,
    params: ParamSet<T>,
}

impl<T: Scalar> FeedForwardActor<T> {
    pub fn new<R: Rng + ?Sized>(steps: usize, hidden: usize, a_max: T, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let input = 3 * steps;
        params.push("W1", uniform_init(input, hidden, input, rng));
        params.push("b1", uniform_init(1, hidden, input, rng));
        params.push("W2", uniform_init(hidden, 1, hidden, rng));
        params.push("b2", uniform_init(1, 1, hidden, rng));
        Self {
            steps,
            hidden,
            a_max,
            params,
        }
    }

    pub fn from_params(params: ParamSet<T>, a_max: T) -> Result<Self, NetError> {
        let (input, hidden) = params.mats().first().map(|m| m.shape()).unwrap_or((0, 0));
        if input == 0 || input % 3 != 0 || input / 3 > WINDOW {
            return Err(NetError::Layout(format!("input width {input}")));
        }
        check_layout(
            &params,
            &[("W1", (input, hidden)), ("b1", (1, hidden)), ("W2", (hidden, 1)), ("b2", (1, 1))],
        )?;
        Ok(Self {
            steps: input / 3,
            hidden,
            a_max,
            params,
        })
    }

    pub fn build(&self, g: &mut Graph<T>, p: &[NodeId], input: NodeId) -> Result<ActorNodes, NetError> {
        let width = g.shape(input).1;
        if width != 3 * self.steps {
            return Err(NetError::InputWidth {
                expected: 3 * self.steps,
                got: width,
            });
        }
        let z = g.matmul(input, p[0])?;
        let z = g.add(z, p[1])?;
        let hid = g.tanh(z)?;
        let out = g.matmul(hid, p[2])?;
        let out = g.add(out, p[3])?;
        let out = g.tanh(out)?;
        let action = g.scale(out, self.a_max)?;
        Ok(ActorNodes {
            action,
            attention: None,
        })
    }
}

/// Either actor architecture, behind one interface.
#[derive(Clone, Debug, PartialEq)]
pub enum Actor<T> {
    Attention(AttentionActor<T>),
    FeedForward(FeedForwardActor<T>),
}

impl<T: Scalar> Actor<T> {
    pub fn params(&self) -> &ParamSet<T> {
        match self {
            Actor::Attention(a) => &a.params,
            Actor::FeedForward(a) => &a.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        match self {
            Actor::Attention(a) => &mut a.params,
            Actor::FeedForward(a) => &mut a.params,
        }
    }

    pub fn a_max(&self) -> T {
        match self {
            Actor::Attention(a) => a.a_max,
            Actor::FeedForward(a) => a.a_max,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Actor::Attention(a) => a.hidden,
            Actor::FeedForward(a) => a.hidden,
        }
    }

    /// How many of the newest observations the actor reads.
    pub fn input_steps(&self) -> usize {
        match self {
            Actor::Attention(_) => WINDOW,
            Actor::FeedForward(a) => a.steps,
        }
    }

    pub fn has_attention(&self) -> bool {
        matches!(self, Actor::Attention(_))
    }

    /// Inserts the parameters (as trainable leaves or constants) and the forward pass.
    pub fn attach(&self, g: &mut Graph<T>, input: NodeId, trainable: bool) -> Result<(Vec<NodeId>, ActorNodes), NetError> {
        let p = insert(g, self.params(), trainable)?;
        let nodes = match self {
            Actor::Attention(a) => a.build(g, &p, input)?,
            Actor::FeedForward(a) => a.build(g, &p, input)?,
        };
        Ok((p, nodes))
    }

    /// Deterministic actions (and attention rows) for a batch of windows.
    pub fn act_batch(&self, states: &[&StateWindow]) -> Result<(Vec<T>, Option<Matrix<T>>), NetError> {
        let mut g = Graph::new();
        let x = g.constant(window_features(states, self.input_steps()))?;
        let (_, nodes) = self.attach(&mut g, x, false)?;
        g.forward()?;
        let actions = g.value(nodes.action).expect("evaluated").data().to_vec();
        let attention = nodes.attention.map(|b| g.value(b).expect("evaluated").clone());
        Ok((actions, attention))
    }

    pub fn act(&self, state: &StateWindow) -> Result<ActorOutput, NetError> {
        let (actions, attention) = self.act_batch(&[state])?;
        let attention = attention.map(|m| {
            let mut row = [0.0; WINDOW];
            for (o, v) in row.iter_mut().zip(m.data()) {
                *o = v.to_f64_lossy();
            }
            row
        });
        Ok(ActorOutput {
            action: actions[0].to_f64_lossy(),
            attention,
        })
    }
}

/// Q-network: `[features; action / a_max]` → tanh(100) → tanh(100) → scalar.
///
/// Parameters: `W1`, `b1`, `W2`, `b2`, `W3`, `b3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Critic<T> {
    steps: usize,
    hidden: usize,
    params: ParamSet<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(steps: usize, hidden: usize, rng: &mut R) -> Self {
        let input = 3 * steps + 1;
        let mut params = ParamSet::new();
        params.push("W1", uniform_init(input, hidden, input, rng));
        params.push("b1", uniform_init(1, hidden, input, rng));
        params.push("W2", uniform_init(hidden, hidden, hidden, rng));
        params.push("b2", uniform_init(1, hidden, hidden, rng));
        params.push("W3", uniform_init(hidden, 1, hidden, rng));
        params.push("b3", uniform_init(1, 1, hidden, rng));
        Self { steps, hidden, params }
    }

    pub fn from_params(params: ParamSet<T>) -> Result<Self, NetError> {
        let (input, hidden) = params.mats().first().map(|m| m.shape()).unwrap_or((0, 0));
        if input == 0 || (input - 1) % 3 != 0 {
            return Err(NetError::Layout(format!("critic input width {input}")));
        }
        check_layout(
            &params,
            &[
                ("W1", (input, hidden)),
                ("b1", (1, hidden)),
                ("W2", (hidden, hidden)),
                ("b2", (1, hidden)),
                ("W3", (hidden, 1)),
                ("b3", (1, 1)),
            ],
        )?;
        Ok(Self {
            steps: (input - 1) / 3,
            hidden,
            params,
        })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn input_steps(&self) -> usize {
        self.steps
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Forward pass on `features` (`B×3·steps`) and `action` (`B×1`, already divided by `a_max`).
    pub fn build(&self, g: &mut Graph<T>, p: &[NodeId], features: NodeId, action: NodeId) -> Result<NodeId, NetError> {
        let width = g.shape(features).1;
        if width != 3 * self.steps {
            return Err(NetError::InputWidth {
                expected: 3 * self.steps,
                got: width,
            });
        }
        let x = g.concat_cols(&[features, action])?;
        let z1 = g.matmul(x, p[0])?;
        let z1 = g.add(z1, p[1])?;
        let h1 = g.tanh(z1)?;
        let z2 = g.matmul(h1, p[2])?;
        let z2 = g.add(z2, p[3])?;
        let h2 = g.tanh(z2)?;
        let q = g.matmul(h2, p[4])?;
        Ok(g.add(q, p[5])?)
    }

    pub fn attach(
        &self,
        g: &mut Graph<T>,
        features: NodeId,
        action: NodeId,
        trainable: bool,
    ) -> Result<(Vec<NodeId>, NodeId), NetError> {
        let p = insert(g, &self.params, trainable)?;
        let q = self.build(g, &p, features, action)?;
        Ok((p, q))
    }

    /// Q values for a batch of windows and physical accelerations.
    pub fn q_batch(&self, states: &[&StateWindow], actions: &[T], a_max: T) -> Result<Vec<T>, NetError> {
        let mut g = Graph::new();
        let x = g.constant(window_features(states, self.steps))?;
        let a = g.constant(Matrix::new(actions.len(), 1, actions.iter().map(|&v| v / a_max).collect())?)?;
        let (_, q) = self.attach(&mut g, x, a, false)?;
        g.forward()?;
        Ok(g.value(q).expect("evaluated").data().to_vec())
    }
}

/// Slowly tracking copies of the actor and critics.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSet<T> {
    pub actor: Actor<T>,
    pub critics: Vec<Critic<T>>,
}

impl<T: Scalar> TargetSet<T> {
    /// Exact copies of the main networks.
    pub fn copy_of(actor: &Actor<T>, critics: &[Critic<T>]) -> Self {
        Self {
            actor: actor.clone(),
            critics: critics.to_vec(),
        }
    }

    /// `target ← tau·main + (1 − tau)·target` for every parameter.
    pub fn soft_update(&mut self, actor: &Actor<T>, critics: &[Critic<T>], tau: T) -> Result<(), NetError> {
        if !(tau >= T::zero() && tau <= T::one()) {
            return Err(NetError::Tau(tau.to_f64_lossy()));
        }
        if critics.len() != self.critics.len() {
            return Err(NetError::Layout(format!(
                "{} critics, targets hold {}",
                critics.len(),
                self.critics.len()
            )));
        }
        self.actor.params().same_layout(actor.params())?;
        for (t, m) in self.critics.iter().zip(critics) {
            t.params.same_layout(&m.params)?;
        }
        self.actor.params_mut().soft_update_from(actor.params(), tau)?;
        for (t, m) in self.critics.iter_mut().zip(critics) {
            t.params.soft_update_from(&m.params, tau)?;
        }
        Ok(())
    }
}
