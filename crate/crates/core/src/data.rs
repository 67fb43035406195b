//! Trajectory ingestion, leader/follower extraction, splitting, and a synthetic
//! episode generator driven by the IDM.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{desired_gap, idm_accel, IdmParams};
use crate::env::{EnvError, FollowEpisode, Observation, A_MAX, DT};

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("row {row}: {msg}")]
    Row { row: usize, msg: String },
    #[error("asked for {requested} training vehicles but only {available} are available")]
    InsufficientEpisodes { requested: usize, available: usize },
    #[error("invalid scenario mix: {0}")]
    Mix(String),
    #[error("could not generate a valid {scenario:?} episode {index} after {attempts} attempts")]
    Synthesis {
        scenario: Scenario,
        index: usize,
        attempts: usize,
    },
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthUnit {
    #[serde(rename = "ft")]
    Feet,
    #[serde(rename = "m")]
    Meters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpeedUnit {
    #[serde(rename = "ft/s")]
    FeetPerSecond,
    #[serde(rename = "m/s")]
    MetersPerSecond,
}

/// Units of a trajectory file, read from its sidecar JSON.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Units {
    pub length: LengthUnit,
    pub speed: SpeedUnit,
}

impl Units {
    /// Raw NGSIM files: feet and feet per second.
    pub const NGSIM: Units = Units {
        length: LengthUnit::Feet,
        speed: SpeedUnit::FeetPerSecond,
    };
    pub const METRIC: Units = Units {
        length: LengthUnit::Meters,
        speed: SpeedUnit::MetersPerSecond,
    };

    pub fn length_factor(&self) -> f64 {
        match self.length {
            LengthUnit::Feet => FEET_TO_METERS,
            LengthUnit::Meters => 1.0,
        }
    }

    pub fn speed_factor(&self) -> f64 {
        match self.speed {
            SpeedUnit::FeetPerSecond => FEET_TO_METERS,
            SpeedUnit::MetersPerSecond => 1.0,
        }
    }

    pub fn is_metric(&self) -> bool {
        *self == Units::METRIC
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(text)?)
    }
}

/// One row of a trajectory file, in metres and metres per second.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawVehicleRecord {
    pub vehicle_id: u64,
    pub frame: u64,
    pub lateral: f64,
    pub longitudinal: f64,
    pub speed: f64,
    pub lane: i64,
    /// 0 when there is no preceding vehicle.
    pub preceding: u64,
    /// Front-to-front spacing; `None` when the source gives 0 or nothing.
    pub spacing: Option<f64>,
}

/// Parsed trajectories in metric units, keyed by vehicle id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectories {
    pub vehicles: BTreeMap<u64, Vec<RawVehicleRecord>>,
    pub dropped: Vec<(u64, String)>,
}

pub const REQUIRED_COLUMNS: [&str; 8] = [
    "Vehicle_ID",
    "Frame_ID",
    "Local_X",
    "Local_Y",
    "v_Vel",
    "Lane_ID",
    "Preceding",
    "Space_Headway",
];

/// Reads a trajectory CSV, converting lengths and speeds to metric once.
///
/// Vehicles whose frames are duplicated or non-contiguous are dropped and listed
/// in [`Trajectories::dropped`].
pub fn parse_trajectories<R: Read>(reader: R, units: &Units) -> Result<Trajectories, DataError> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = r.headers()?.clone();
    let mut idx = [0usize; 8];
    for (slot, name) in idx.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))?;
    }
    let lf = units.length_factor();
    let sf = units.speed_factor();
    let mut grouped: BTreeMap<u64, Vec<RawVehicleRecord>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let field = |k: usize| -> Result<&str, DataError> {
            rec.get(idx[k]).ok_or_else(|| DataError::Row {
                row,
                msg: format!("missing {}", REQUIRED_COLUMNS[k]),
            })
        };
        let num = |k: usize| -> Result<f64, DataError> {
            let s = field(k)?;
            let v: f64 = s.parse().map_err(|_| DataError::Row {
                row,
                msg: format!("{} is not a number: {s:?}", REQUIRED_COLUMNS[k]),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(DataError::Row {
                    row,
                    msg: format!("{} is not finite", REQUIRED_COLUMNS[k]),
                })
            }
        };
        let int = |k: usize| -> Result<i64, DataError> {
            let v = num(k)?;
            if v.fract() != 0.0 {
                return Err(DataError::Row {
                    row,
                    msg: format!("{} is not an integer", REQUIRED_COLUMNS[k]),
                });
            }
            Ok(v as i64)
        };
        let vehicle_id = int(0)?;
        let frame = int(1)?;
        let preceding = int(6)?;
        if vehicle_id < 0 || frame < 0 || preceding < 0 {
            return Err(DataError::Row {
                row,
                msg: "negative identifier".into(),
            });
        }
        let spacing = num(7)?;
        grouped.entry(vehicle_id as u64).or_default().push(RawVehicleRecord {
            vehicle_id: vehicle_id as u64,
            frame: frame as u64,
            lateral: num(2)? * lf,
            longitudinal: num(3)? * lf,
            speed: num(4)? * sf,
            lane: int(5)?,
            preceding: preceding as u64,
            spacing: (spacing > 0.0).then_some(spacing * lf),
        });
    }
    let mut out = Trajectories::default();
    for (id, mut recs) in grouped {
        recs.sort_by_key(|r| r.frame);
        match recs.windows(2).find(|w| w[1].frame != w[0].frame + 1) {
            Some(w) => {
                let reason = if w[1].frame == w[0].frame {
                    format!("duplicate frame {}", w[0].frame)
                } else {
                    format!("frames jump from {} to {}", w[0].frame, w[1].frame)
                };
                log::warn!("dropping vehicle {id}: {reason}");
                out.dropped.push((id, reason));
            }
            None => {
                out.vehicles.insert(id, recs);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterCriteria {
    /// Gap must stay below this, m.
    pub max_gap: f64,
    /// Lateral offset between follower and leader must stay below this, m.
    pub max_lateral: f64,
    /// Spans must be strictly longer than this many steps.
    pub min_span_steps: usize,
    /// Spans are cut into episodes of this length from their start.
    pub episode_steps: usize,
    /// Shortest remainder kept as an episode of its own.
    pub min_remainder_steps: usize,
    pub constant_leader: bool,
}

impl Default for FilterCriteria {
    fn default() -> Self {
        Self {
            max_gap: 120.0,
            max_lateral: 2.5,
            min_span_steps: 150,
            episode_steps: 400,
            min_remainder_steps: 150,
            constant_leader: true,
        }
    }
}

/// Why candidate steps and spans were turned away.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectionStats {
    pub vehicles: usize,
    pub steps_without_leader: usize,
    pub steps_leader_unrecorded: usize,
    pub steps_gap: usize,
    pub steps_lateral: usize,
    pub leader_changes: usize,
    pub spans_too_short: usize,
    pub remainders_dropped: usize,
    pub episodes: usize,
}

/// Provenance of one episode, as stored in a dataset index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub id: String,
    pub file: String,
    pub vehicle_id: u64,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leader_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_frame: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idm: Option<IdmParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brake_start: Option<usize>,
}

impl EpisodeMeta {
    fn new(episode: &FollowEpisode) -> Self {
        Self {
            id: episode.id.clone(),
            file: format!("{}.csv", episode.id),
            vehicle_id: episode.vehicle_id,
            steps: episode.len(),
            leader_id: None,
            start_frame: None,
            scenario: None,
            idm: None,
            brake_start: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Extraction {
    pub episodes: Vec<FollowEpisode>,
    pub meta: Vec<EpisodeMeta>,
    pub stats: RejectionStats,
}

fn leader_record<'a>(traj: &'a Trajectories, leader: u64, frame: u64) -> Option<&'a RawVehicleRecord> {
    let recs = traj.vehicles.get(&leader)?;
    let first = recs.first()?.frame;
    recs.get(frame.checked_sub(first)? as usize)
}

fn step_gap(f: &RawVehicleRecord, l: &RawVehicleRecord) -> f64 {
    f.spacing.unwrap_or(l.longitudinal - f.longitudinal)
}

/// Cuts every qualifying leader/follower span into fixed-length episodes.
pub fn extract_follow_pairs(traj: &Trajectories, criteria: &FilterCriteria) -> Result<Extraction, DataError> {
    let mut stats = RejectionStats {
        vehicles: traj.vehicles.len(),
        ..Default::default()
    };
    let mut episodes = Vec::new();
    let mut meta = Vec::new();
    for (&fid, recs) in &traj.vehicles {
        // (start index, leader id) of the open span
        let mut open: Option<(usize, u64)> = None;
        let mut spans: Vec<(usize, usize, u64)> = Vec::new();
        for (k, f) in recs.iter().enumerate() {
            let ok = if f.preceding == 0 {
                stats.steps_without_leader += 1;
                false
            } else {
                match leader_record(traj, f.preceding, f.frame) {
                    None => {
                        stats.steps_leader_unrecorded += 1;
                        false
                    }
                    Some(l) => {
                        let gap = step_gap(f, l);
                        if !(gap > 0.0 && gap < criteria.max_gap) {
                            stats.steps_gap += 1;
                            false
                        } else if !((f.lateral - l.lateral).abs() < criteria.max_lateral) {
                            stats.steps_lateral += 1;
                            false
                        } else {
                            true
                        }
                    }
                }
            };
            match (ok, open) {
                (true, Some((start, leader))) if criteria.constant_leader && leader != f.preceding => {
                    stats.leader_changes += 1;
                    spans.push((start, k, leader));
                    open = Some((k, f.preceding));
                }
                (true, None) => open = Some((k, f.preceding)),
                (false, Some((start, leader))) => {
                    spans.push((start, k, leader));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some((start, leader)) = open {
            spans.push((start, recs.len(), leader));
        }
        for (start, end, leader) in spans {
            if end - start <= criteria.min_span_steps {
                stats.spans_too_short += 1;
                continue;
            }
            let mut s = start;
            while s < end {
                let e = (s + criteria.episode_steps).min(end);
                if e - s < criteria.episode_steps && e - s < criteria.min_remainder_steps {
                    stats.remainders_dropped += 1;
                    break;
                }
                let (ep, m) = build_episode(traj, fid, &recs[s..e])?;
                debug_assert_eq!(m.leader_id, Some(leader));
                episodes.push(ep);
                meta.push(m);
                s = e;
            }
        }
    }
    stats.episodes = episodes.len();
    log::info!(
        "extracted {} episodes from {} vehicles; rejected steps: no leader {}, leader unrecorded {}, gap {}, lateral {}; \
         leader changes {}, short spans {}, dropped remainders {}",
        stats.episodes,
        stats.vehicles,
        stats.steps_without_leader,
        stats.steps_leader_unrecorded,
        stats.steps_gap,
        stats.steps_lateral,
        stats.leader_changes,
        stats.spans_too_short,
        stats.remainders_dropped
    );
    Ok(Extraction { episodes, meta, stats })
}

fn build_episode(traj: &Trajectories, fid: u64, recs: &[RawVehicleRecord]) -> Result<(FollowEpisode, EpisodeMeta), DataError> {
    let leader = recs[0].preceding;
    let n = recs.len();
    let (mut ls, mut lp, mut fs, mut fp) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for f in recs {
        let l = leader_record(traj, f.preceding, f.frame).expect("validated step");
        ls.push(l.speed);
        fs.push(f.speed);
        fp.push(f.longitudinal);
        lp.push(f.longitudinal + step_gap(f, l));
    }
    let id = format!("v{fid}_f{}", recs[0].frame);
    let ep = FollowEpisode::new(id, fid, ls, lp, fs, fp)?;
    let mut meta = EpisodeMeta::new(&ep);
    meta.leader_id = Some(leader);
    meta.start_frame = Some(recs[0].frame);
    Ok((ep, meta))
}

/// Criteria violations visible from the episode alone: length and gap range.
pub fn check_episode(ep: &FollowEpisode, criteria: &FilterCriteria) -> Vec<String> {
    let mut out = Vec::new();
    if ep.len() < criteria.min_remainder_steps.min(criteria.episode_steps) {
        out.push(format!("{} steps is too short", ep.len()));
    }
    if ep.len() > criteria.episode_steps {
        out.push(format!("{} steps exceeds the episode length", ep.len()));
    }
    for t in 0..ep.len() {
        let g = ep.gap(t);
        if !(g > 0.0 && g < criteria.max_gap) {
            out.push(format!("gap {g:.3} at step {t}"));
            break;
        }
    }
    out
}

/// Re-derives every criterion for an extracted episode from the raw records.
pub fn check_against_records(
    ep: &FollowEpisode,
    meta: &EpisodeMeta,
    traj: &Trajectories,
    criteria: &FilterCriteria,
) -> Vec<String> {
    let mut out = check_episode(ep, criteria);
    let (Some(leader), Some(start)) = (meta.leader_id, meta.start_frame) else {
        out.push("missing leader or start frame".into());
        return out;
    };
    let Some(recs) = traj.vehicles.get(&meta.vehicle_id) else {
        out.push(format!("vehicle {} not in records", meta.vehicle_id));
        return out;
    };
    for t in 0..ep.len() {
        let frame = start + t as u64;
        let Some(f) = recs.iter().find(|r| r.frame == frame) else {
            out.push(format!("frame {frame} missing"));
            break;
        };
        if criteria.constant_leader && f.preceding != leader {
            out.push(format!("leader changes to {} at frame {frame}", f.preceding));
            break;
        }
        let Some(l) = traj.vehicles.get(&f.preceding).and_then(|v| v.iter().find(|r| r.frame == frame)) else {
            out.push(format!("leader unrecorded at frame {frame}"));
            break;
        };
        if !((f.lateral - l.lateral).abs() < criteria.max_lateral) {
            out.push(format!("lateral offset {:.3} at frame {frame}", (f.lateral - l.lateral).abs()));
            break;
        }
        if (ep.fol_speed()[t] - f.speed).abs() > 1e-9 || (ep.lead_speed()[t] - l.speed).abs() > 1e-9 {
            out.push(format!("speeds differ from records at frame {frame}"));
            break;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<FollowEpisode>,
    pub test: Vec<FollowEpisode>,
}

impl DatasetSplit {
    pub fn train_vehicles(&self) -> BTreeSet<u64> {
        self.train.iter().map(|e| e.vehicle_id).collect()
    }

    pub fn test_vehicles(&self) -> BTreeSet<u64> {
        self.test.iter().map(|e| e.vehicle_id).collect()
    }
}

/// Seeded split by follower vehicle: `train_vehicles` vehicles (with all their
/// episodes) go to training, the rest to test. Episode order is preserved.
pub fn split(episodes: &[FollowEpisode], train_vehicles: usize, seed: u64) -> Result<DatasetSplit, DataError> {
    let ids: Vec<u64> = episodes.iter().map(|e| e.vehicle_id).collect::<BTreeSet<_>>().into_iter().collect();
    if train_vehicles > ids.len() {
        return Err(DataError::InsufficientEpisodes {
            requested: train_vehicles,
            available: ids.len(),
        });
    }
    if train_vehicles == ids.len() {
        log::warn!("every vehicle assigned to training; the test split is empty");
    }
    let mut shuffled = ids;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_ids: BTreeSet<u64> = shuffled[..train_vehicles].iter().copied().collect();
    let (train, test) = episodes.iter().cloned().partition(|e| train_ids.contains(&e.vehicle_id));
    Ok(DatasetSplit { train, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Smooth,
    #[serde(rename = "stopgo")]
    StopGo,
    Brake,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Smooth, Scenario::StopGo, Scenario::Brake];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Smooth => "smooth",
            Scenario::StopGo => "stopgo",
            Scenario::Brake => "brake",
        }
    }
}

/// Relative weights of the three scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioMix {
    pub smooth: f64,
    pub stopgo: f64,
    pub brake: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            smooth: 0.5,
            stopgo: 0.3,
            brake: 0.2,
        }
    }
}

impl ScenarioMix {
    pub fn only(s: Scenario) -> Self {
        let mut m = Self {
            smooth: 0.0,
            stopgo: 0.0,
            brake: 0.0,
        };
        match s {
            Scenario::Smooth => m.smooth = 1.0,
            Scenario::StopGo => m.stopgo = 1.0,
            Scenario::Brake => m.brake = 1.0,
        }
        m
    }

    pub fn weights(&self) -> [f64; 3] {
        [self.smooth, self.stopgo, self.brake]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let w = self.weights();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Mix(format!("weights must be non-negative with a positive sum, got {w:?}")));
        }
        Ok(())
    }

    /// Episode counts per scenario summing to `n`.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let c = apportion(n, &self.weights());
        [c[0], c[1], c[2]]
    }
}

impl FromStr for ScenarioMix {
    type Err = DataError;

    /// `smooth=0.5,stopgo=0.3,brake=0.2`; omitted scenarios get weight 0.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut m = Self {
            smooth: 0.0,
            stopgo: 0.0,
            brake: 0.0,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| DataError::Mix(format!("expected name=weight, got {part:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| DataError::Mix(format!("weight for {k} is not a number")))?;
            match k.trim() {
                "smooth" => m.smooth = v,
                "stopgo" => m.stopgo = v,
                "brake" => m.brake = v,
                other => return Err(DataError::Mix(format!("unknown scenario {other:?}"))),
            }
        }
        m.validate()?;
        Ok(m)
    }
}

/// Largest-remainder apportionment of `n` items over `weights`. Ties in the
/// remainders go to the earlier entry.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return vec![0; weights.len()];
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Follower parameters before per-episode jitter.
    pub reference: IdmParams,
    /// Each parameter is multiplied by a uniform factor in `1 ± jitter`.
    pub jitter: f64,
    pub steps: usize,
    pub max_attempts: usize,
    pub brake_decel: f64,
    pub brake_steps: usize,
    pub max_gap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            reference: IdmParams::new(33.0, 1.5, 1.0, 1.5, 2.0).expect("valid reference"),
            jitter: 0.1,
            steps: 400,
            max_attempts: 100,
            brake_decel: 3.0,
            brake_steps: 20,
            max_gap: 120.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthEpisode {
    pub episode: FollowEpisode,
    pub scenario: Scenario,
    pub idm: IdmParams,
    pub brake_start: Option<usize>,
}

impl SynthEpisode {
    pub fn meta(&self) -> EpisodeMeta {
        let mut m = EpisodeMeta::new(&self.episode);
        m.scenario = Some(self.scenario);
        m.idm = Some(self.idm);
        m.brake_start = self.brake_start;
        m
    }
}

fn episode_rng(seed: u64, index: usize, attempt: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(index as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(attempt as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Sum of sinusoids `Σ a_i sin(2π t / p_i + φ_i)` with t in seconds.
struct Waves(Vec<(f64, f64, f64)>);

impl Waves {
    fn random<R: Rng>(rng: &mut R, count: usize, amp: (f64, f64), period: (f64, f64)) -> Self {
        Self(
            (0..count)
                .map(|_| {
                    (
                        rng.random_range(amp.0..amp.1),
                        rng.random_range(period.0..period.1),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect(),
        )
    }

    fn at(&self, t: f64) -> f64 {
        self.0
            .iter()
            .map(|(a, p, phi)| a * (std::f64::consts::TAU * t / p + phi).sin())
            .sum()
    }
}

fn lead_profile<R: Rng>(scenario: Scenario, cfg: &SynthConfig, rng: &mut R) -> (Vec<f64>, Option<usize>) {
    let n = cfg.steps;
    let time = |k: usize| k as f64 * DT;
    match scenario {
        Scenario::Smooth => {
            let base = rng.random_range(12.0..24.0);
            let waves = Waves::random(rng, 2, (0.4, 1.2), (12.0, 30.0));
            ((0..n).map(|k| (base + waves.at(time(k))).max(0.0)).collect(), None)
        }
        Scenario::StopGo => {
            let low = rng.random_range(1.0..4.0);
            let high = rng.random_range(10.0..16.0);
            let period = rng.random_range(25.0..45.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let ripple = Waves::random(rng, 1, (0.1, 0.4), (6.0, 12.0));
            let mid = 0.5 * (low + high);
            let amp = 0.5 * (high - low);
            (
                (0..n)
                    .map(|k| {
                        let t = time(k);
                        (mid - amp * (std::f64::consts::TAU * t / period + phase).cos() + ripple.at(t)).max(0.0)
                    })
                    .collect(),
                None,
            )
        }
        Scenario::Brake => {
            let base = rng.random_range(14.0..24.0);
            let waves = Waves::random(rng, 1, (0.2, 0.6), (15.0, 30.0));
            let start = rng.random_range(100..=n.saturating_sub(150).max(101));
            let hold = rng.random_range(10..=30);
            let recover = 1.0;
            let drop = cfg.brake_decel * cfg.brake_steps as f64 * DT;
            let mut offset = 0.0f64;
            let mut v = Vec::with_capacity(n);
            for k in 0..n {
                if k > start && k <= start + cfg.brake_steps {
                    offset += cfg.brake_decel * DT;
                } else if k > start + cfg.brake_steps + hold && offset > 0.0 {
                    offset = (offset - recover * DT).max(0.0);
                }
                let o = offset.min(drop);
                v.push((base + waves.at(time(k)) - o).max(0.0));
            }
            (v, Some(start))
        }
    }
}

fn jittered<R: Rng>(reference: &IdmParams, jitter: f64, rng: &mut R) -> IdmParams {
    let mut g = reference.genes();
    for v in &mut g {
        if jitter > 0.0 {
            *v *= rng.random_range(1.0 - jitter..=1.0 + jitter);
        }
    }
    IdmParams::from_genes(g)
}

/// One attempt at an episode; `None` if it violates a generator property.
fn try_generate<R: Rng>(scenario: Scenario, id: String, vehicle_id: u64, cfg: &SynthConfig, rng: &mut R) -> Option<SynthEpisode> {
    let idm = jittered(&cfg.reference, cfg.jitter, rng);
    let (lead_speed, brake_start) = lead_profile(scenario, cfg, rng);
    let n = lead_speed.len();
    let v0 = lead_speed[0];
    let ratio = (v0 / idm.v0).powi(4);
    if ratio >= 0.9 {
        return None;
    }
    let gap0 = desired_gap(&idm, v0, 0.0) / (1.0 - ratio).sqrt() * rng.random_range(0.95..1.1);

    let mut lead_pos = Vec::with_capacity(n);
    lead_pos.push(gap0);
    for k in 1..n {
        lead_pos.push(lead_pos[k - 1] + 0.5 * (lead_speed[k - 1] + lead_speed[k]) * DT);
    }
    let mut fol_speed = vec![v0];
    let mut fol_pos = vec![0.0];
    for k in 0..n - 1 {
        let (v, x) = (fol_speed[k], fol_pos[k]);
        let obs = Observation::new(v, lead_speed[k] - v, lead_pos[k] - x);
        let a = idm_accel(&idm, &obs).ok()?.clamp(-A_MAX, A_MAX);
        let v_next = (v + a * DT).max(0.0);
        fol_speed.push(v_next);
        fol_pos.push(x + 0.5 * (v + v_next) * DT);
    }
    for k in 0..n {
        let g = lead_pos[k] - fol_pos[k];
        if !(g > 0.0 && g < cfg.max_gap) {
            return None;
        }
    }
    let episode = FollowEpisode::new(id, vehicle_id, lead_speed, lead_pos, fol_speed, fol_pos).ok()?;
    match scenario {
        Scenario::Smooth => {
            if (0..n - 1).any(|t| episode.recorded_accel(t).abs() >= 1.5) {
                return None;
            }
        }
        Scenario::Brake => {
            let s = brake_start?;
            let end = (s + 2 * cfg.brake_steps + 10).min(n);
            let min_dv = (s..end)
                .map(|t| episode.lead_speed()[t] - episode.fol_speed()[t])
                .fold(f64::INFINITY, f64::min);
            if !(min_dv < -2.0) {
                return None;
            }
        }
        Scenario::StopGo => {}
    }
    Some(SynthEpisode {
        episode,
        scenario,
        idm,
        brake_start,
    })
}

/// Generates one episode of `scenario`, retrying with fresh randomness on a
/// collision, an out-of-range gap or a missed scenario property.
pub fn synthesize_one(scenario: Scenario, index: usize, seed: u64, cfg: &SynthConfig) -> Result<SynthEpisode, DataError> {
    for attempt in 0..cfg.max_attempts {
        let mut rng = episode_rng(seed, index, attempt);
        let id = format!("syn{index:04}");
        if let Some(ep) = try_generate(scenario, id, index as u64 + 1, cfg, &mut rng) {
            return Ok(ep);
        }
    }
    Err(DataError::Synthesis {
        scenario,
        index,
        attempts: cfg.max_attempts,
    })
}

/// `n` episodes apportioned over the mix, scenarios in the order smooth, stop-and-go, brake.
pub fn synthesize(n: usize, mix: &ScenarioMix, seed: u64, cfg: &SynthConfig) -> Result<Vec<SynthEpisode>, DataError> {
    mix.validate()?;
    let counts = mix.counts(n);
    let mut out = Vec::with_capacity(n);
    for (scenario, count) in Scenario::ALL.into_iter().zip(counts) {
        for _ in 0..count {
            out.push(synthesize_one(scenario, out.len(), seed, cfg)?);
        }
    }
    Ok(out)
}

/// Contents of `index.json` in a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub source: String,
    pub episodes: Vec<EpisodeMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejections: Option<RejectionStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped_vehicles: Vec<(u64, String)>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes one CSV per episode plus `index.json` into `dir`.
pub fn write_dataset(dir: &Path, index: &DatasetIndex, episodes: &[FollowEpisode]) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (meta, ep) in index.episodes.iter().zip(episodes) {
        let path = dir.join(&meta.file);
        let f = File::create(&path).map_err(|source| DataError::File {
            path: path.display().to_string(),
            source,
        })?;
        ep.write_csv(BufWriter::new(f))?;
    }
    let f = File::create(dir.join(INDEX_FILE))?;
    serde_json::to_writer_pretty(BufWriter::new(f), index)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<FollowEpisode>), DataError> {
    let index_path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&index_path).map_err(|source| DataError::File {
        path: index_path.display().to_string(),
        source,
    })?;
    let index: DatasetIndex = serde_json::from_str(&text)?;
    let mut episodes = Vec::with_capacity(index.episodes.len());
    for meta in &index.episodes {
        let path = dir.join(&meta.file);
        let f = File::open(&path).map_err(|source| DataError::File {
            path: path.display().to_string(),
            source,
        })?;
        episodes.push(FollowEpisode::read_csv(meta.id.clone(), meta.vehicle_id, BufReader::new(f))?);
    }
    Ok((index, episodes))
}

/// Index and episodes for a synthetic set.
pub fn synthetic_index(eps: &[SynthEpisode], seed: u64) -> DatasetIndex {
    DatasetIndex {
        source: format!("synthetic seed {seed}"),
        episodes: eps.iter().map(SynthEpisode::meta).collect(),
        rejections: None,
        dropped_vehicles: Vec::new(),
    }
}

/// Groups episodes by scenario using their index entries.
pub fn by_scenario<'a>(index: &DatasetIndex, episodes: &'a [FollowEpisode]) -> HashMap<Scenario, Vec<&'a FollowEpisode>> {
    let mut out: HashMap<Scenario, Vec<&FollowEpisode>> = HashMap::new();
    for (meta, ep) in index.episodes.iter().zip(episodes) {
        if let Some(s) = meta.scenario {
            out.entry(s).or_default().push(ep);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,Lane_ID,Preceding,Space_Headway";

    #[test]
    fn empty_file_parses() {
        let t = parse_trajectories(HEADER.as_bytes(), &Units::NGSIM).unwrap();
        assert!(t.vehicles.is_empty());
    }

    #[test]
    fn missing_column_named() {
        let err = parse_trajectories("Vehicle_ID,Frame_ID\n".as_bytes(), &Units::NGSIM).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "Local_X"));
    }

    #[test]
    fn converts_feet_once() {
        let csv = format!("{HEADER}\n1,1,0,0,32.8084,1,0,0\n");
        let t = parse_trajectories(csv.as_bytes(), &Units::NGSIM).unwrap();
        assert!((t.vehicles[&1][0].speed - 10.0).abs() < 1e-4);
        let t = parse_trajectories(csv.as_bytes(), &Units::METRIC).unwrap();
        assert_eq!(t.vehicles[&1][0].speed, 32.8084);
    }

    #[test]
    fn gaps_in_frames_drop_vehicle() {
        let csv = format!("{HEADER}\n1,1,0,0,10,1,0,0\n1,3,0,0,10,1,0,0\n2,1,0,0,10,1,0,0\n");
        let t = parse_trajectories(csv.as_bytes(), &Units::METRIC).unwrap();
        assert_eq!(t.vehicles.len(), 1);
        assert_eq!(t.dropped[0].0, 1);
    }

    #[test]
    fn units_sidecar() {
        assert_eq!(Units::from_json(r#"{"length":"ft","speed":"ft/s"}"#).unwrap(), Units::NGSIM);
        assert!(Units::from_json(r#"{"length":"yd","speed":"ft/s"}"#).is_err());
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion(20, &[0.5, 0.3, 0.2]), vec![10, 6, 4]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(0, &[1.0, 2.0]), vec![0, 0]);
        assert_eq!(apportion(7, &[0.0, 1.0, 0.0]), vec![0, 7, 0]);
    }

    #[test]
    fn mix_parsing() {
        let m: ScenarioMix = "smooth=0.5,stopgo=0.3,brake=0.2".parse().unwrap();
        assert_eq!(m.counts(20), [10, 6, 4]);
        let m: ScenarioMix = "brake=1".parse().unwrap();
        assert_eq!(m.counts(5), [0, 0, 5]);
        assert!("fast=1".parse::<ScenarioMix>().is_err());
        assert!("smooth=-1".parse::<ScenarioMix>().is_err());
        assert!("smooth".parse::<ScenarioMix>().is_err());
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let eps: Vec<FollowEpisode> = (0..12)
            .map(|i| {
                FollowEpisode::new(format!("e{i}"), (i / 2) as u64, vec![10.0; 20], vec![20.0; 20], vec![10.0; 20], vec![0.0; 20]).unwrap()
            })
            .collect();
        let s = split(&eps, 4, 3).unwrap();
        assert_eq!(s.train.len(), 8);
        assert_eq!(s.test.len(), 4);
        assert!(s.train_vehicles().is_disjoint(&s.test_vehicles()));
        assert_eq!(split(&eps, 4, 3).unwrap(), s);
        assert!(split(&eps, 7, 3).is_err());
        assert!(split(&eps, 6, 3).unwrap().test.is_empty());
    }

    #[test]
    fn synthetic_determinism_and_shape() {
        let cfg = SynthConfig::default();
        let a = synthesize(6, &ScenarioMix::default(), 11, &cfg).unwrap();
        let b = synthesize(6, &ScenarioMix::default(), 11, &cfg).unwrap();
        assert_eq!(a, b);
        for e in &a {
            assert_eq!(e.episode.len(), 400);
            assert!(check_episode(&e.episode, &FilterCriteria::default()).is_empty());
        }
    }
}
