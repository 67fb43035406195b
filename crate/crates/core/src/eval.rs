//! Closed-loop evaluation: rollouts, speed RMSPE, attention recency analysis
//! and the report files built from them.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{self, EnvError, FollowEpisode, StateWindow, TerminalCause, A_MAX, WINDOW};
use crate::nets::{Actor, NetError};
use crate::numerics::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("rmspe needs equal non-empty series, got {sim} and {obs}")]
    SeriesLength { sim: usize, obs: usize },
    #[error("observed speeds are all zero")]
    ZeroObserved,
    #[error("episode {id} has {len} steps; a rollout needs at least {min}")]
    TooShort { id: String, len: usize, min: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// An acceleration decision, with the attention row that produced it if any.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyAction {
    pub accel: f64,
    pub attention: Option<[f64; WINDOW]>,
}

impl PolicyAction {
    pub fn plain(accel: f64) -> Self {
        Self { accel, attention: None }
    }
}

/// Anything that maps the current window to an acceleration.
///
/// The episode is passed so that reference policies (replay, IDM) can read the
/// record; learned policies ignore it.
pub trait Policy {
    fn act(&self, state: &StateWindow, episode: &FollowEpisode) -> Result<PolicyAction, EvalError>;
}

impl<T: Scalar> Policy for Actor<T> {
    fn act(&self, state: &StateWindow, _episode: &FollowEpisode) -> Result<PolicyAction, EvalError> {
        let out = Actor::act(self, state)?;
        Ok(PolicyAction {
            accel: out.action.clamp(-A_MAX, A_MAX),
            attention: out.attention,
        })
    }
}

/// Replays the recorded follower accelerations.
#[derive(Clone, Copy, Debug, Default)]
pub struct ReplayPolicy;

impl Policy for ReplayPolicy {
    fn act(&self, state: &StateWindow, episode: &FollowEpisode) -> Result<PolicyAction, EvalError> {
        Ok(PolicyAction::plain(episode.recorded_accel(state.newest_index()).clamp(-A_MAX, A_MAX)))
    }
}

/// Commands the same acceleration at every step.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantPolicy(pub f64);

impl Policy for ConstantPolicy {
    fn act(&self, _state: &StateWindow, _episode: &FollowEpisode) -> Result<PolicyAction, EvalError> {
        Ok(PolicyAction::plain(self.0.clamp(-A_MAX, A_MAX)))
    }
}

/// Per-step record of one deterministic closed-loop simulation.
///
/// Row `k` holds the decision taken on the window whose newest step is
/// `decision_step[k]`, and the simulated and recorded values one step later.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutTrace {
    pub episode_id: String,
    pub decision_step: Vec<usize>,
    /// Relative speed of the newest observation at decision time.
    pub decision_dv: Vec<f64>,
    pub action: Vec<f64>,
    pub sim_speed: Vec<f64>,
    pub obs_speed: Vec<f64>,
    pub sim_gap: Vec<f64>,
    pub obs_gap: Vec<f64>,
    pub reward: Vec<f64>,
    /// One row per step when the policy exposes attention, else empty.
    pub attention: Vec<[f64; WINDOW]>,
    pub terminal: Option<TerminalCause>,
}

impl RolloutTrace {
    pub fn len(&self) -> usize {
        self.sim_speed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sim_speed.is_empty()
    }

    pub fn collided(&self) -> bool {
        self.terminal == Some(TerminalCause::Collision)
    }

    pub fn rmspe(&self) -> Result<f64, EvalError> {
        rmspe(&self.sim_speed, &self.obs_speed)
    }
}

/// Simulates `episode` from its first recorded window with no exploration noise.
/// A collision ends the trace early.
pub fn rollout(policy: &dyn Policy, episode: &FollowEpisode) -> Result<RolloutTrace, EvalError> {
    if episode.len() < WINDOW + 1 {
        return Err(EvalError::TooShort {
            id: episode.id.clone(),
            len: episode.len(),
            min: WINDOW + 1,
        });
    }
    let mut trace = RolloutTrace {
        episode_id: episode.id.clone(),
        ..Default::default()
    };
    let mut state = env::reset(episode)?;
    loop {
        let t = state.newest_index();
        let decision = policy.act(&state, episode)?;
        let out = env::step(&state, decision.accel, episode)?;
        trace.decision_step.push(t);
        trace.decision_dv.push(state.newest().dv);
        trace.action.push(decision.accel);
        if let Some(att) = decision.attention {
            trace.attention.push(att);
        }
        let newest = out.next.newest();
        trace.sim_speed.push(newest.v_f);
        trace.obs_speed.push(episode.fol_speed()[t + 1]);
        trace.sim_gap.push(newest.gap);
        trace.obs_gap.push(episode.gap(t + 1));
        trace.reward.push(out.reward);
        if out.terminal.is_some() {
            trace.terminal = out.terminal;
            break;
        }
        state = out.next;
    }
    Ok(trace)
}

/// Root mean square percentage error of speed as a ratio of sums:
/// `100 · sqrt(Σ(sim − obs)² / Σ obs²)`.
pub fn rmspe(sim: &[f64], obs: &[f64]) -> Result<f64, EvalError> {
    if sim.len() != obs.len() || sim.is_empty() {
        return Err(EvalError::SeriesLength {
            sim: sim.len(),
            obs: obs.len(),
        });
    }
    let num: f64 = sim.iter().zip(obs).map(|(s, o)| (s - o) * (s - o)).sum();
    let den: f64 = obs.iter().map(|o| o * o).sum();
    if den == 0.0 {
        return Err(EvalError::ZeroObserved);
    }
    Ok(100.0 * (num / den).sqrt())
}

/// RMSPE over the concatenation of all traces.
pub fn pooled_rmspe(traces: &[RolloutTrace]) -> Result<f64, EvalError> {
    let sim: Vec<f64> = traces.iter().flat_map(|t| t.sim_speed.iter().copied()).collect();
    let obs: Vec<f64> = traces.iter().flat_map(|t| t.obs_speed.iter().copied()).collect();
    rmspe(&sim, &obs)
}

/// Sum of the newest `k` weights of an attention row.
pub fn recency_mass(row: &[f64; WINDOW], k: usize) -> f64 {
    row[WINDOW - k.min(WINDOW)..].iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventConfig {
    /// Minimum drop of relative speed, m/s.
    pub dv_drop: f64,
    /// Look-back horizon, steps.
    pub horizon: usize,
}

impl Default for EventConfig {
    fn default() -> Self {
        Self { dv_drop: 1.5, horizon: 10 }
    }
}

/// Steps where relative speed fell by more than `dv_drop` within the preceding `horizon` steps.
pub fn detect_drops(dv: &[f64], cfg: &EventConfig) -> Vec<bool> {
    (0..dv.len())
        .map(|k| {
            let lo = k.saturating_sub(cfg.horizon);
            dv[lo..k].iter().any(|&prev| dv[k] - prev < -cfg.dv_drop)
        })
        .collect()
}

/// Maximal runs of flagged steps as inclusive `(start, end)` row indices.
pub fn flagged_windows(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s, k - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len() - 1));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventWindow {
    pub start_step: usize,
    pub end_step: usize,
    pub mean_r3: f64,
}

/// Attention statistics of one rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeAttention {
    pub episode_id: String,
    #[serde(skip)]
    pub steps: Vec<usize>,
    #[serde(skip)]
    pub beta: Vec<[f64; WINDOW]>,
    #[serde(skip)]
    pub r2: Vec<f64>,
    #[serde(skip)]
    pub r3: Vec<f64>,
    #[serde(skip)]
    pub r8: Vec<f64>,
    pub events: Vec<EventWindow>,
    pub mean_r3_inside: Option<f64>,
    pub mean_r3_outside: Option<f64>,
    pub mean_r8: f64,
}

impl EpisodeAttention {
    /// True when the episode has both event and non-event steps and attention is
    /// more concentrated on the newest three steps during events.
    pub fn recency_shift(&self) -> Option<bool> {
        Some(self.mean_r3_inside? > self.mean_r3_outside?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub config: EventConfig,
    pub episodes: Vec<EpisodeAttention>,
    /// Mean of `r8` over every analysed step.
    pub mean_r8: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Recency masses per step and the comparison of `r3` inside and outside detected
/// relative-speed drops. Traces without attention rows are skipped.
pub fn attention_summary(traces: &[RolloutTrace], cfg: &EventConfig) -> AttentionSummary {
    let mut episodes = Vec::new();
    for trace in traces.iter().filter(|t| !t.attention.is_empty()) {
        let n = trace.attention.len();
        let r2: Vec<f64> = trace.attention.iter().map(|b| recency_mass(b, 2)).collect();
        let r3: Vec<f64> = trace.attention.iter().map(|b| recency_mass(b, 3)).collect();
        let r8: Vec<f64> = trace.attention.iter().map(|b| recency_mass(b, 8)).collect();
        let flags = detect_drops(&trace.decision_dv[..n], cfg);
        let events = flagged_windows(&flags)
            .into_iter()
            .map(|(s, e)| EventWindow {
                start_step: trace.decision_step[s],
                end_step: trace.decision_step[e],
                mean_r3: mean(r3[s..=e].iter().copied()).unwrap_or(0.0),
            })
            .collect();
        let inside = mean(r3.iter().zip(&flags).filter(|(_, &f)| f).map(|(r, _)| *r));
        let outside = mean(r3.iter().zip(&flags).filter(|(_, &f)| !f).map(|(r, _)| *r));
        episodes.push(EpisodeAttention {
            episode_id: trace.episode_id.clone(),
            steps: trace.decision_step[..n].to_vec(),
            beta: trace.attention.clone(),
            mean_r8: mean(r8.iter().copied()).unwrap_or(0.0),
            r2,
            r3,
            r8,
            events,
            mean_r3_inside: inside,
            mean_r3_outside: outside,
        });
    }
    let mean_r8 = mean(episodes.iter().flat_map(|e| e.r8.iter().copied())).unwrap_or(0.0);
    AttentionSummary {
        config: *cfg,
        episodes,
        mean_r8,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub episode_id: String,
    pub rmspe_pct: f64,
    pub steps: usize,
    pub collided: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub policy: String,
    /// Pooled over every completed rollout; `None` if none completed.
    pub rmspe_pct: Option<f64>,
    pub per_episode: Vec<EpisodeScore>,
    /// Episodes whose rollout raised an error, excluded from the pooled value.
    pub failures: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, policy: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.policy == policy)
    }

    /// `policy,rmspe_pct`, one row per policy in input order.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["policy", "rmspe_pct"])?;
        for row in &self.rows {
            let v = row.rmspe_pct.map(|v| format!("{v:.4}")).unwrap_or_default();
            w.write_record([row.policy.as_str(), v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Per-episode breakdown: `policy,episode,rmspe_pct,steps,collided`.
    pub fn write_breakdown_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["policy", "episode", "rmspe_pct", "steps", "collided"])?;
        for row in &self.rows {
            for e in &row.per_episode {
                w.write_record([
                    row.policy.clone(),
                    e.episode_id.clone(),
                    format!("{:.4}", e.rmspe_pct),
                    e.steps.to_string(),
                    e.collided.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Plain-text table, ranked from lowest to highest error.
    pub fn render(&self) -> String {
        let mut rows: Vec<&ComparisonRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            b.rmspe_pct
                .unwrap_or(f64::INFINITY)
                .total_cmp(&a.rmspe_pct.unwrap_or(f64::INFINITY))
        });
        let mut out = String::from("NO.\tMethod\tRMSPE (%)\n");
        for (i, r) in rows.iter().enumerate() {
            let v = r.rmspe_pct.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
            let _ = writeln!(out, "{}\t{}\t{}", i + 1, r.policy, v);
        }
        out
    }
}

/// Evaluates every policy on every episode and pools speed errors per policy.
pub fn compare(policies: &[(String, &dyn Policy)], episodes: &[FollowEpisode]) -> Result<ComparisonTable, EvalError> {
    let mut rows = Vec::with_capacity(policies.len());
    for (name, policy) in policies {
        let mut traces = Vec::new();
        let mut per_episode = Vec::new();
        let mut failures = Vec::new();
        for ep in episodes {
            match rollout(*policy, ep).and_then(|t| t.rmspe().map(|r| (t, r))) {
                Ok((trace, r)) => {
                    per_episode.push(EpisodeScore {
                        episode_id: ep.id.clone(),
                        rmspe_pct: r,
                        steps: trace.len(),
                        collided: trace.collided(),
                    });
                    traces.push(trace);
                }
                Err(e) => {
                    log::warn!("policy {name} failed on episode {}: {e}", ep.id);
                    failures.push((ep.id.clone(), e.to_string()));
                }
            }
        }
        let rmspe_pct = if traces.is_empty() {
            None
        } else {
            Some(pooled_rmspe(&traces)?)
        };
        rows.push(ComparisonRow {
            policy: name.clone(),
            rmspe_pct,
            per_episode,
            failures,
        });
    }
    Ok(ComparisonTable { rows })
}

/// `step,sim_speed,obs_speed,sim_gap,obs_gap,action,reward`.
pub fn write_rollout_csv<W: Write>(trace: &RolloutTrace, writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "sim_speed", "obs_speed", "sim_gap", "obs_gap", "action", "reward"])?;
    for k in 0..trace.len() {
        w.write_record([
            (trace.decision_step[k] + 1).to_string(),
            trace.sim_speed[k].to_string(),
            trace.obs_speed[k].to_string(),
            trace.sim_gap[k].to_string(),
            trace.obs_gap[k].to_string(),
            trace.action[k].to_string(),
            trace.reward[k].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `step,beta_1..beta_10,r2,r3,r8`; `beta_1` is the oldest step of the window.
pub fn write_attention_csv<W: Write>(ep: &EpisodeAttention, writer: W) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["step".to_string()];
    header.extend((1..=WINDOW).map(|i| format!("beta_{i}")));
    header.extend(["r2", "r3", "r8"].map(String::from));
    w.write_record(&header)?;
    for k in 0..ep.beta.len() {
        let mut rec = vec![ep.steps[k].to_string()];
        rec.extend(ep.beta[k].iter().map(|b| b.to_string()));
        rec.extend([ep.r2[k], ep.r3[k], ep.r8[k]].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Event windows and per-episode `r3` comparisons as JSON.
pub fn write_events_json<W: Write>(summary: &AttentionSummary, writer: W) -> Result<(), EvalError> {
    serde_json::to_writer_pretty(writer, summary)?;
    Ok(())
}

fn polyline(xs: &[f64], ys: &[f64], x_range: (f64, f64), y_range: (f64, f64), w: f64, h: f64) -> String {
    let sx = |x: f64| 40.0 + (x - x_range.0) / (x_range.1 - x_range.0).max(1e-9) * (w - 60.0);
    let sy = |y: f64| h - 30.0 - (y - y_range.0) / (y_range.1 - y_range.0).max(1e-9) * (h - 50.0);
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.1},{:.1}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Line chart of simulated against recorded speed.
pub fn speed_svg(trace: &RolloutTrace) -> String {
    let (w, h) = (800.0, 300.0);
    let xs: Vec<f64> = trace.decision_step.iter().map(|&s| (s + 1) as f64).collect();
    let lo = trace.sim_speed.iter().chain(&trace.obs_speed).fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = trace.sim_speed.iter().chain(&trace.obs_speed).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let xr = (xs.first().copied().unwrap_or(0.0), xs.last().copied().unwrap_or(1.0));
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = write!(
        svg,
        r#"<text x="40" y="15" font-size="12">{} speed (m/s): recorded (black), simulated (red), {:.1}..{:.1}</text>"#,
        trace.episode_id, lo, hi
    );
    for (ys, colour) in [(&trace.obs_speed, "black"), (&trace.sim_speed, "red")] {
        let _ = write!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
            polyline(&xs, ys, xr, (lo, hi), w, h)
        );
    }
    svg.push_str("</svg>");
    svg
}

/// Heat map of attention weights, one column per step and one row per window position.
pub fn attention_svg(ep: &EpisodeAttention) -> String {
    let cell_w = 2.0;
    let cell_h = 16.0;
    let w = 40.0 + cell_w * ep.beta.len() as f64;
    let h = 30.0 + cell_h * WINDOW as f64;
    let max = ep.beta.iter().flatten().fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">"#);
    let _ = write!(
        svg,
        r#"<text x="4" y="14" font-size="12">{} attention (newest row at bottom)</text>"#,
        ep.episode_id
    );
    for (k, row) in ep.beta.iter().enumerate() {
        for (j, &b) in row.iter().enumerate() {
            let shade = (255.0 * (1.0 - b / max)).round() as u8;
            let _ = write!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{cell_w}" height="{cell_h}" fill="rgb(255,{shade},{shade})"/>"#,
                40.0 + cell_w * k as f64,
                20.0 + cell_h * j as f64
            );
        }
    }
    svg.push_str("</svg>");
    svg
}
