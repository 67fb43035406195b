//! Car-following environment: observation triple, 10-step state window,
//! point-mass kinematics, speed-error reward and episode stepping against a
//! recorded lead-vehicle trajectory.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of observations in a state window (1 s of reaction time).
pub const WINDOW: usize = 10;
/// Simulation step, seconds.
pub const DT: f64 = 0.1;
/// Physical bound on commanded acceleration, m/s².
pub const A_MAX: f64 = 3.0;
/// Reward added on the step that closes the gap.
pub const COLLISION_PENALTY: f64 = -10.0;
/// Relative speed errors below this are treated as exact.
pub const REWARD_ERROR_FLOOR: f64 = 1e-4;
/// Observed speeds below this use it as the denominator of the relative error.
pub const REWARD_SPEED_FLOOR: f64 = 0.1;

const ACTION_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode has {len} steps, at least {min} required")]
    EpisodeTooShort { len: usize, min: usize },
    #[error("step index {t} out of bounds for episode of {len} steps")]
    OutOfBounds { t: usize, len: usize },
    #[error("action {action} outside [-{max}, {max}]")]
    ActionOutOfBounds { action: f64, max: f64 },
    #[error("window must hold exactly {WINDOW} observations, got {0}")]
    WindowLength(usize),
    #[error("invalid episode: {0}")]
    InvalidEpisode(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One timestep as sensed by the follower.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Follower speed, m/s.
    pub v_f: f64,
    /// Lead speed minus follower speed, m/s.
    pub dv: f64,
    /// Spacing to the lead vehicle, m.
    pub gap: f64,
}

impl Observation {
    pub fn new(v_f: f64, dv: f64, gap: f64) -> Self {
        Self { v_f, dv, gap }
    }

    pub fn lead_speed(&self) -> f64 {
        self.v_f + self.dv
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.v_f, self.dv, self.gap]
    }
}

/// The last [`WINDOW`] observations, oldest first, plus the episode index of the newest.
#[derive(Clone, Debug, PartialEq)]
pub struct StateWindow {
    obs: [Observation; WINDOW],
    newest: usize,
}

impl StateWindow {
    pub fn new(obs: &[Observation], newest: usize) -> Result<Self, EnvError> {
        let obs: [Observation; WINDOW] = obs.try_into().map_err(|_| EnvError::WindowLength(obs.len()))?;
        Ok(Self { obs, newest })
    }

    pub fn observations(&self) -> &[Observation; WINDOW] {
        &self.obs
    }

    pub fn newest(&self) -> &Observation {
        &self.obs[WINDOW - 1]
    }

    /// Episode step index of the newest observation.
    pub fn newest_index(&self) -> usize {
        self.newest
    }

    /// Drops the oldest observation and appends `obs` as the newest.
    pub fn shifted(&self, obs: Observation) -> Self {
        let mut next = self.obs;
        next.rotate_left(1);
        next[WINDOW - 1] = obs;
        Self {
            obs: next,
            newest: self.newest + 1,
        }
    }

    /// Row-major `[v_f, dv, gap]` triples, oldest first.
    pub fn flatten(&self) -> [f64; 3 * WINDOW] {
        let mut out = [0.0; 3 * WINDOW];
        for (chunk, o) in out.chunks_exact_mut(3).zip(&self.obs) {
            chunk.copy_from_slice(&o.as_array());
        }
        out
    }
}

/// A time-aligned lead/follower recording at [`DT`] resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FollowEpisode {
    pub id: String,
    /// Follower vehicle id, used to keep splits disjoint.
    pub vehicle_id: u64,
    lead_speed: Vec<f64>,
    lead_pos: Vec<f64>,
    fol_speed: Vec<f64>,
    fol_pos: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeRow {
    t: f64,
    lead_speed: f64,
    lead_pos: f64,
    fol_speed: f64,
    fol_pos: f64,
}

impl FollowEpisode {
    /// Checks equal lengths, finiteness, nonnegative speeds and a positive recorded gap.
    pub fn new(
        id: impl Into<String>,
        vehicle_id: u64,
        lead_speed: Vec<f64>,
        lead_pos: Vec<f64>,
        fol_speed: Vec<f64>,
        fol_pos: Vec<f64>,
    ) -> Result<Self, EnvError> {
        let n = lead_speed.len();
        if n == 0 || lead_pos.len() != n || fol_speed.len() != n || fol_pos.len() != n {
            return Err(EnvError::InvalidEpisode(format!(
                "series lengths {}, {}, {}, {}",
                n,
                lead_pos.len(),
                fol_speed.len(),
                fol_pos.len()
            )));
        }
        for i in 0..n {
            let vals = [lead_speed[i], lead_pos[i], fol_speed[i], fol_pos[i]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(EnvError::InvalidEpisode(format!("non-finite value at step {i}")));
            }
            if lead_speed[i] < 0.0 || fol_speed[i] < 0.0 {
                return Err(EnvError::InvalidEpisode(format!("negative speed at step {i}")));
            }
            if lead_pos[i] - fol_pos[i] <= 0.0 {
                return Err(EnvError::InvalidEpisode(format!("non-positive gap at step {i}")));
            }
        }
        Ok(Self {
            id: id.into(),
            vehicle_id,
            lead_speed,
            lead_pos,
            fol_speed,
            fol_pos,
        })
    }

    pub fn len(&self) -> usize {
        self.lead_speed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lead_speed.is_empty()
    }

    pub fn lead_speed(&self) -> &[f64] {
        &self.lead_speed
    }

    pub fn lead_pos(&self) -> &[f64] {
        &self.lead_pos
    }

    pub fn fol_speed(&self) -> &[f64] {
        &self.fol_speed
    }

    pub fn fol_pos(&self) -> &[f64] {
        &self.fol_pos
    }

    pub fn gap(&self, t: usize) -> f64 {
        self.lead_pos[t] - self.fol_pos[t]
    }

    /// Recorded observation at step `t`.
    pub fn observation(&self, t: usize) -> Observation {
        Observation::new(self.fol_speed[t], self.lead_speed[t] - self.fol_speed[t], self.gap(t))
    }

    /// Forward difference of recorded follower speed, m/s².
    pub fn recorded_accel(&self, t: usize) -> f64 {
        (self.fol_speed[t + 1] - self.fol_speed[t]) / DT
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EnvError> {
        let mut w = csv::Writer::from_writer(writer);
        for i in 0..self.len() {
            w.serialize(EpisodeRow {
                t: (i as f64 * DT * 10.0).round() / 10.0,
                lead_speed: self.lead_speed[i],
                lead_pos: self.lead_pos[i],
                fol_speed: self.fol_speed[i],
                fol_pos: self.fol_pos[i],
            })?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the `t, lead_speed, lead_pos, fol_speed, fol_pos` format. Rows must be
    /// [`DT`] apart.
    pub fn read_csv<R: Read>(id: impl Into<String>, vehicle_id: u64, reader: R) -> Result<Self, EnvError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        for col in ["t", "lead_speed", "lead_pos", "fol_speed", "fol_pos"] {
            if !headers.iter().any(|h| h.trim() == col) {
                return Err(EnvError::InvalidEpisode(format!("missing column {col}")));
            }
        }
        let (mut ls, mut lp, mut fs, mut fp) = (vec![], vec![], vec![], vec![]);
        let mut prev_t: Option<f64> = None;
        for row in r.deserialize() {
            let row: EpisodeRow = row?;
            if let Some(p) = prev_t {
                if ((row.t - p) - DT).abs() > 1e-6 {
                    return Err(EnvError::InvalidEpisode(format!("row at t={} is not {DT} s after {p}", row.t)));
                }
            }
            prev_t = Some(row.t);
            ls.push(row.lead_speed);
            lp.push(row.lead_pos);
            fs.push(row.fol_speed);
            fp.push(row.fol_pos);
        }
        Self::new(id, vehicle_id, ls, lp, fs, fp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalCause {
    EndOfTrajectory,
    Collision,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: StateWindow,
    pub reward: f64,
    pub terminal: Option<TerminalCause>,
}

/// Point-mass update: speed integrates the acceleration (never below zero),
/// relative speed follows the new lead speed, and the gap integrates the
/// relative speed with the trapezoidal rule.
pub fn kinematic_update(obs: &Observation, accel: f64, lead_speed_next: f64, dt: f64) -> Observation {
    let v_f = (obs.v_f + accel * dt).max(0.0);
    let dv = lead_speed_next - v_f;
    let gap = obs.gap + 0.5 * (obs.dv + dv) * dt;
    Observation { v_f, dv, gap }
}

/// Negated log relative speed error, floored so that it is bounded above by
/// `-ln(REWARD_ERROR_FLOOR)`.
pub fn reward(v_sim: f64, v_obs: f64) -> f64 {
    let rel = (v_sim - v_obs).abs() / v_obs.max(REWARD_SPEED_FLOOR);
    -rel.max(REWARD_ERROR_FLOOR).ln()
}

/// Initial window: the first [`WINDOW`] recorded observations.
pub fn reset(episode: &FollowEpisode) -> Result<StateWindow, EnvError> {
    if episode.len() < WINDOW {
        return Err(EnvError::EpisodeTooShort {
            len: episode.len(),
            min: WINDOW,
        });
    }
    let obs: Vec<Observation> = (0..WINDOW).map(|t| episode.observation(t)).collect();
    StateWindow::new(&obs, WINDOW - 1)
}

/// True when no further step can be taken from this window.
pub fn is_exhausted(state: &StateWindow, episode: &FollowEpisode) -> bool {
    state.newest_index() + 1 >= episode.len()
}

/// Applies `action` to the newest observation using the recorded lead speed of the
/// next step, then shifts the window.
pub fn step(state: &StateWindow, action: f64, episode: &FollowEpisode) -> Result<StepOutcome, EnvError> {
    let t = state.newest_index();
    if t + 1 >= episode.len() {
        return Err(EnvError::OutOfBounds { t, len: episode.len() });
    }
    if !action.is_finite() || action.abs() > A_MAX + ACTION_SLACK {
        return Err(EnvError::ActionOutOfBounds { action, max: A_MAX });
    }
    let obs = kinematic_update(state.newest(), action, episode.lead_speed[t + 1], DT);
    let mut r = reward(obs.v_f, episode.fol_speed[t + 1]);
    let terminal = if obs.gap <= 0.0 {
        r += COLLISION_PENALTY;
        Some(TerminalCause::Collision)
    } else if t + 2 >= episode.len() {
        Some(TerminalCause::EndOfTrajectory)
    } else {
        None
    };
    Ok(StepOutcome {
        next: state.shifted(obs),
        reward: r,
        terminal,
    })
}
