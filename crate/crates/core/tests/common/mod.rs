#![allow(dead_code)]

use atd3_core::env::{Observation, StateWindow, WINDOW};
use rand::Rng;

/// A window of plausible car-following observations.
pub fn random_window<R: Rng>(rng: &mut R) -> StateWindow {
    let obs: Vec<Observation> = (0..WINDOW)
        .map(|_| {
            Observation::new(
                rng.random_range(0.0..30.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(2.0..100.0),
            )
        })
        .collect();
    StateWindow::new(&obs, WINDOW - 1).unwrap()
}

/// Median of a non-empty slice (upper median for even lengths is not needed: callers pass 3).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

use atd3_core::nets::{window_features, Actor, AttentionActor, Critic, FeedForwardActor};
use atd3_core::numerics::{grad_check, GradCheckReport, Graph, Matrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Gradient check of an attention actor with random weights and inputs. The
/// scalar root mixes the mean action with a random projection of the attention
/// rows, so both d(action)/dθ and dβ/dθ are exercised.
pub fn check_attention_actor(seed: u64, hidden: usize, batch: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = Actor::Attention(AttentionActor::<f64>::new(hidden, 3.0, &mut rng));
    check_actor(&actor, batch, &mut rng)
}

pub fn check_feedforward_actor(seed: u64, steps: usize, hidden: usize, batch: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let actor = Actor::FeedForward(FeedForwardActor::<f64>::new(steps, hidden, 3.0, &mut rng));
    check_actor(&actor, batch, &mut rng)
}

fn check_actor(actor: &Actor<f64>, batch: usize, rng: &mut ChaCha8Rng) -> GradCheckReport {
    let states: Vec<StateWindow> = (0..batch).map(|_| random_window(rng)).collect();
    let refs: Vec<&StateWindow> = states.iter().collect();
    let mut g = Graph::new();
    let x = g.constant(window_features(&refs, actor.input_steps())).unwrap();
    let (_, nodes) = actor.attach(&mut g, x, true).unwrap();
    let mut root = g.mean(nodes.action).unwrap();
    if let Some(beta) = nodes.attention {
        let w = g
            .constant(Matrix::from_fn(WINDOW, 1, |_, _| rng.random_range(-1.0..1.0)))
            .unwrap();
        let proj = g.matmul(beta, w).unwrap();
        let proj = g.mean(proj).unwrap();
        root = g.add(root, proj).unwrap();
    }
    grad_check(&mut g, root, FD_STEP).unwrap()
}

/// Gradient check of a critic with respect to its parameters and the action input.
pub fn check_critic(seed: u64, steps: usize, hidden: usize, batch: usize) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let critic = Critic::<f64>::new(steps, hidden, &mut rng);
    let states: Vec<StateWindow> = (0..batch).map(|_| random_window(&mut rng)).collect();
    let refs: Vec<&StateWindow> = states.iter().collect();
    let mut g = Graph::new();
    let x = g.constant(window_features(&refs, steps)).unwrap();
    let a = g
        .param(Matrix::from_fn(batch, 1, |_, _| rng.random_range(-1.0..1.0)))
        .unwrap();
    let (_, q) = critic.attach(&mut g, x, a, true).unwrap();
    let root = g.mean(q).unwrap();
    grad_check(&mut g, root, FD_STEP).unwrap()
}
