mod common;

use atd3_core::agent::{add_exploration_noise, train, Agent, AgentMode, ReplayBuffer, TrainConfig, Transition};
use atd3_core::data::{synthesize, ScenarioMix, SynthConfig};
use atd3_core::env::FollowEpisode;
use atd3_core::nets::{Actor, AttentionActor, Critic};
use atd3_core::numerics::{Adam, Graph, Matrix};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::random_window;

fn small(mode: AgentMode) -> TrainConfig {
    TrainConfig {
        mode,
        actor_hidden: 4,
        critic_hidden: 6,
        batch_size: 8,
        buffer_capacity: 1000,
        ..Default::default()
    }
}

fn random_batch(n: usize, seed: u64) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Transition {
            s: random_window(&mut rng),
            a: rand::Rng::random_range(&mut rng, -3.0..3.0),
            r: rand::Rng::random_range(&mut rng, 0.0..9.0),
            s_next: random_window(&mut rng),
            terminal: i % 5 == 4,
        })
        .collect()
}

#[test]
fn exploration_noise_mean() {
    // 10^4 draws of N(0, (0.1·a_max)²): the sample mean has std 0.1·a_max/100
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a_max = 3.0;
    let n = 10_000;
    let sum: f64 = (0..n).map(|_| add_exploration_noise(0.0, 0.1, a_max, &mut rng)).sum();
    let mean = sum / n as f64;
    assert!(mean.abs() < 3.0 * (0.1 * a_max) / 100.0, "mean {mean}");
}

#[test]
fn exploration_clips_at_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let a = add_exploration_noise(3.0, 0.5, 3.0, &mut rng);
        assert!(a <= 3.0 && a >= -3.0);
    }
    assert_eq!(add_exploration_noise(3.0, 0.0, 3.0, &mut rng), 3.0);
}

#[test]
fn scalar_critic_gradient_matches_hand_derivation() {
    // Q = θ·x, loss = (y − Q)², so dL/dθ = −2(y − Q)·x
    let (theta, x, y) = (0.7f64, 1.3, 2.5);
    let mut g = Graph::new();
    let p = g.param(Matrix::new(1, 1, vec![theta]).unwrap()).unwrap();
    let xc = g.constant(Matrix::new(1, 1, vec![x]).unwrap()).unwrap();
    let yc = g.constant(Matrix::new(1, 1, vec![y]).unwrap()).unwrap();
    let q = g.matmul(xc, p).unwrap();
    let loss = g.mse(q, yc).unwrap();
    g.forward().unwrap();
    let grad = g.backward(loss).unwrap().collect(&[p]).unwrap()[0].data()[0];
    let expected = -2.0 * (y - theta * x) * x;
    assert!((grad - expected).abs() < 1e-12, "{grad} vs {expected}");
}

#[test]
fn critic_at_target_is_unchanged() {
    let cfg = small(AgentMode::Atd3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let actor = Actor::Attention(AttentionActor::new(4, 3.0, &mut rng));
    let critic = Critic::<f64>::new(10, 6, &mut rng);
    let mut agent = Agent::from_networks(&cfg, actor, vec![critic.clone(), critic.clone()], None).unwrap();
    let batch = random_batch(8, 4);
    let refs: Vec<&Transition> = batch.iter().collect();
    let states: Vec<_> = batch.iter().map(|t| &t.s).collect();
    let actions: Vec<f64> = batch.iter().map(|t| t.a).collect();
    let y = critic.q_batch(&states, &actions, 3.0).unwrap();
    let losses = agent.update_critics(&refs, &y).unwrap();
    assert_eq!(losses, vec![0.0, 0.0]);
    assert_eq!(agent.critics()[0], critic);
    assert_eq!(agent.critics()[1], critic);
}

#[test]
fn independent_critics_have_different_losses() {
    let cfg = small(AgentMode::Atd3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut agent = Agent::<f64>::new(&cfg, &mut rng).unwrap();
    let batch = random_batch(8, 5);
    let refs: Vec<&Transition> = batch.iter().collect();
    let y: Vec<f64> = batch.iter().map(|t| t.r).collect();
    let losses = agent.update_critics(&refs, &y).unwrap();
    assert_ne!(losses[0], losses[1]);
}

#[test]
fn flat_critic_leaves_actor_unchanged() {
    let cfg = small(AgentMode::Atd3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let actor = Actor::Attention(AttentionActor::new(4, 3.0, &mut rng));
    let mut critic = Critic::<f64>::new(10, 6, &mut rng);
    // output weights zero: Q ≡ b3, independent of the action
    for v in critic.params_mut().mats_mut()[4].data_mut() {
        *v = 0.0;
    }
    let mut agent = Agent::from_networks(&cfg, actor.clone(), vec![critic.clone(), critic], None).unwrap();
    let batch = random_batch(8, 9);
    let refs: Vec<&Transition> = batch.iter().collect();
    agent.update_actor(&refs).unwrap();
    assert_eq!(agent.actor(), &actor);
}

#[test]
fn toy_actor_climbs_quadratic_critic() {
    // a = θ, Q(a) = −(a − a*)²; ascent on Q drives θ to a*
    let target = 1.7f64;
    let mut theta = vec![Matrix::new(1, 1, vec![-2.0f64]).unwrap()];
    let mut adam = Adam::new(0.05, &theta);
    let mut last_gap = f64::INFINITY;
    for step in 0..2000 {
        let mut g = Graph::new();
        let p = g.param(theta[0].clone()).unwrap();
        let t = g.constant(Matrix::new(1, 1, vec![target]).unwrap()).unwrap();
        let neg_q = g.mse(p, t).unwrap();
        g.forward().unwrap();
        let grads = g.backward(neg_q).unwrap().collect(&[p]).unwrap();
        adam.step(&mut theta, &grads).unwrap();
        let gap = (theta[0].data()[0] - target).abs();
        if step < 30 {
            assert!(gap < last_gap, "step {step}: {gap} >= {last_gap}");
        }
        last_gap = gap;
    }
    assert!(last_gap < 1e-3, "{last_gap}");
}

#[test]
fn buffer_fill_arithmetic() {
    let cycle = 200;
    let capacity = 100_000;
    let mut buf = ReplayBuffer::new(capacity);
    let t = random_batch(1, 0).pop().unwrap();
    for c in 1..=501usize {
        for _ in 0..cycle {
            buf.push(t.clone());
        }
        assert_eq!(buf.len(), (c * cycle).min(capacity));
        if c == 1 {
            assert_eq!(buf.len(), 200);
        }
    }
    assert_eq!(buf.len(), 100_000);
    assert_eq!(buf.inserted(), 100_200);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn buffer_keeps_newest(cap in 1usize..50, n in 0usize..200) {
        let mut buf = ReplayBuffer::new(cap);
        let base = random_batch(1, 0).pop().unwrap();
        for i in 0..n {
            buf.push(Transition { r: i as f64, ..base.clone() });
        }
        let kept: Vec<f64> = buf.iter().map(|t| t.r).collect();
        let expected: Vec<f64> = (n.saturating_sub(cap)..n).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn ddpg_targets_ignore_smoothing_rng(seed in any::<u64>(), rt in any::<bool>()) {
        let mode = if rt { AgentMode::DdpgRt } else { AgentMode::Ddpg };
        let cfg = small(mode);
        let mut agent = Agent::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = random_batch(6, seed ^ 1);
        let refs: Vec<&Transition> = batch.iter().collect();
        let a = agent.compute_target(&refs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = agent.compute_target(&refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(agent.critics().len(), 1);
        prop_assert!(!agent.actor().has_attention());
    }

    #[test]
    fn td3_targets_depend_on_smoothing_rng(seed in any::<u64>()) {
        let cfg = small(AgentMode::Atd3);
        let mut agent = Agent::<f64>::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let batch = random_batch(6, seed ^ 1);
        let refs: Vec<&Transition> = batch.iter().collect();
        let a = agent.compute_target(&refs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = agent.compute_target(&refs, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        prop_assert_ne!(a, b);
    }
}

fn tiny_episodes() -> Vec<FollowEpisode> {
    synthesize(4, &ScenarioMix::default(), 11, &SynthConfig::default())
        .unwrap()
        .into_iter()
        .map(|e| e.episode)
        .collect()
}

#[test]
fn training_is_deterministic() {
    let eps = tiny_episodes();
    for mode in [AgentMode::Atd3, AgentMode::Ddpg, AgentMode::DdpgRt] {
        let cfg = TrainConfig {
            epochs: 2,
            cycles_per_epoch: 2,
            steps_per_cycle: 20,
            seed: 7,
            ..small(mode)
        };
        let a = train::<f64>(&cfg, &eps, &eps[..1], |_| Ok(())).unwrap();
        let b = train::<f64>(&cfg, &eps, &eps[..1], |_| Ok(())).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.agent.checkpoint_params(), b.agent.checkpoint_params());
        let c = train::<f64>(&TrainConfig { seed: 8, ..cfg.clone() }, &eps, &eps[..1], |_| Ok(())).unwrap();
        assert_ne!(a.agent.checkpoint_params(), c.agent.checkpoint_params());
        if mode != AgentMode::Atd3 {
            assert!(a.log.iter().all(|r| r.critic2_loss.is_none()));
        }
    }
}

#[test]
fn training_counters_follow_schedule() {
    let eps = tiny_episodes();
    let cfg = TrainConfig {
        epochs: 1,
        cycles_per_epoch: 3,
        steps_per_cycle: 20,
        ..small(AgentMode::Atd3)
    };
    let out = train::<f64>(&cfg, &eps, &[], |_| Ok(())).unwrap();
    assert_eq!(out.env_steps, 60);
    // updates start once the buffer holds a batch (8 transitions)
    let c = out.agent.counters();
    assert_eq!(c.iterations, 60 - 7);
    assert_eq!(c.actor_updates, c.iterations / 2);
    assert_eq!(c.target_updates, c.actor_updates);
    assert_eq!(out.buffer_len, 60);
    assert_eq!(out.agent.attention_audit().violations, 0);
}
