//! Intelligent Driver Model and its genetic-algorithm calibration.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{FollowEpisode, Observation, StateWindow, A_MAX};
use crate::eval::{self, EvalError, Policy, PolicyAction};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("gap must be positive, got {0}")]
    NonPositiveGap(f64),
    #[error("invalid IDM parameters: {0}")]
    Params(String),
    #[error("invalid GA config: {0}")]
    Config(String),
    #[error("calibration needs at least one episode")]
    NoEpisodes,
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// IDM acceleration exponent.
pub const IDM_DELTA: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub t_h: f64,
    /// Maximum acceleration, m/s².
    pub a_m: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Jam distance, m.
    pub s0: f64,
    pub delta: f64,
}

impl IdmParams {
    pub fn new(v0: f64, t_h: f64, a_m: f64, b: f64, s0: f64) -> Result<Self, BaselineError> {
        let p = Self {
            v0,
            t_h,
            a_m,
            b,
            s0,
            delta: IDM_DELTA,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), BaselineError> {
        for (name, v) in self.named().into_iter().chain([("delta", self.delta)]) {
            if !(v.is_finite() && v > 0.0) {
                return Err(BaselineError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The five calibrated values, in gene order.
    pub fn genes(&self) -> [f64; 5] {
        [self.v0, self.t_h, self.a_m, self.b, self.s0]
    }

    pub fn from_genes(g: [f64; 5]) -> Self {
        Self {
            v0: g[0],
            t_h: g[1],
            a_m: g[2],
            b: g[3],
            s0: g[4],
            delta: IDM_DELTA,
        }
    }

    fn named(&self) -> [(&'static str, f64); 5] {
        [("v0", self.v0), ("t_h", self.t_h), ("a_m", self.a_m), ("b", self.b), ("s0", self.s0)]
    }
}

/// Closed search box for calibration, in gene order.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdmBounds {
    pub lower: [f64; 5],
    pub upper: [f64; 5],
}

impl Default for IdmBounds {
    fn default() -> Self {
        Self {
            lower: [1.0, 0.1, 0.1, 0.1, 0.1],
            upper: [42.0, 5.0, 6.0, 6.0, 10.0],
        }
    }
}

impl IdmBounds {
    pub fn contains(&self, p: &IdmParams) -> bool {
        p.genes()
            .iter()
            .enumerate()
            .all(|(i, &g)| g >= self.lower[i] && g <= self.upper[i])
    }

    fn clamp(&self, i: usize, v: f64) -> f64 {
        v.clamp(self.lower[i], self.upper[i])
    }

    fn range(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }
}

/// Desired dynamic gap `s*`, floored at `s0`.
pub fn desired_gap(p: &IdmParams, v: f64, dv: f64) -> f64 {
    let s = p.s0 + v * p.t_h + v * (-dv) / (2.0 * (p.a_m * p.b).sqrt());
    s.max(p.s0)
}

/// IDM acceleration for follower speed `v_f`, relative speed `dv = v_L − v_F` and gap.
pub fn idm_accel(p: &IdmParams, obs: &Observation) -> Result<f64, BaselineError> {
    if !(obs.gap > 0.0) {
        return Err(BaselineError::NonPositiveGap(obs.gap));
    }
    let s_star = desired_gap(p, obs.v_f, obs.dv);
    Ok(p.a_m * (1.0 - (obs.v_f / p.v0).powf(p.delta) - (s_star / obs.gap).powi(2)))
}

/// IDM as a closed-loop policy; accelerations are clipped to the actuator range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdmPolicy(pub IdmParams);

impl Policy for IdmPolicy {
    fn act(&self, state: &StateWindow, _episode: &FollowEpisode) -> Result<PolicyAction, EvalError> {
        // a non-positive gap cannot reach the policy: the environment terminates first
        let a = idm_accel(&self.0, state.newest()).unwrap_or(-A_MAX);
        Ok(PolicyAction::plain(a.clamp(-A_MAX, A_MAX)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    /// Probability that a child is produced by crossover rather than copied.
    pub crossover_rate: f64,
    /// Per-gene mutation probability.
    pub mutation_rate: f64,
    /// Mutation std as a fraction of each gene's bound range.
    pub mutation_scale: f64,
    pub elitism: usize,
    pub tournament: usize,
    /// Added to the fitness (percentage points) of individuals that collide.
    pub collision_penalty: f64,
    pub bounds: IdmBounds,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 50,
            generations: 100,
            crossover_rate: 0.9,
            mutation_rate: 0.2,
            mutation_scale: 0.1,
            elitism: 2,
            tournament: 3,
            collision_penalty: 100.0,
            bounds: IdmBounds::default(),
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if self.population < 2 {
            return Err(BaselineError::Config("population must be at least 2".into()));
        }
        if self.elitism > self.population {
            return Err(BaselineError::Config("elitism exceeds population".into()));
        }
        if self.tournament == 0 {
            return Err(BaselineError::Config("tournament size must be at least 1".into()));
        }
        for (name, v) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(BaselineError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.mutation_scale >= 0.0 && self.mutation_scale.is_finite()) {
            return Err(BaselineError::Config("mutation_scale must be non-negative".into()));
        }
        for i in 0..5 {
            if !(self.bounds.lower[i] > 0.0 && self.bounds.lower[i] <= self.bounds.upper[i]) {
                return Err(BaselineError::Config(format!("bad bounds for gene {i}")));
            }
        }
        Ok(())
    }
}

/// Pooled closed-loop speed RMSPE of `p`, plus the penalty if any episode collides.
pub fn fitness(p: &IdmParams, episodes: &[FollowEpisode], collision_penalty: f64) -> Result<f64, BaselineError> {
    let policy = IdmPolicy(*p);
    let mut traces = Vec::with_capacity(episodes.len());
    let mut collided = false;
    for ep in episodes {
        let t = eval::rollout(&policy, ep)?;
        collided |= t.collided();
        traces.push(t);
    }
    let r = eval::pooled_rmspe(&traces)?;
    Ok(if collided { r + collision_penalty } else { r })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: IdmParams,
    /// Fitness of `params`, percent (includes any collision penalty).
    pub rmspe_pct: f64,
    pub history: Vec<GenerationStats>,
}

impl Calibration {
    /// The six IDM fields plus the achieved RMSPE.
    pub fn write_json<W: Write>(&self, writer: W) -> Result<(), BaselineError> {
        let p = &self.params;
        let value = serde_json::json!({
            "v0": p.v0,
            "t_h": p.t_h,
            "a_m": p.a_m,
            "b": p.b,
            "s0": p.s0,
            "delta": p.delta,
            "rmspe_pct": self.rmspe_pct,
        });
        serde_json::to_writer_pretty(writer, &value)?;
        Ok(())
    }

    /// `generation,best,mean`.
    pub fn write_history_csv<W: Write>(&self, writer: W) -> Result<(), BaselineError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["generation", "best", "mean"])?;
        for g in &self.history {
            w.write_record([g.generation.to_string(), g.best.to_string(), g.mean.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads parameters written by [`Calibration::write_json`] or a bare [`IdmParams`] object.
pub fn read_params_json(text: &str) -> Result<IdmParams, BaselineError> {
    let v: serde_json::Value = serde_json::from_str(text)?;
    let field = |name: &str| {
        v.get(name)
            .and_then(|x| x.as_f64())
            .ok_or_else(|| BaselineError::Params(format!("missing numeric field {name}")))
    };
    let mut p = IdmParams::new(field("v0")?, field("t_h")?, field("a_m")?, field("b")?, field("s0")?)?;
    if let Some(d) = v.get("delta").and_then(|x| x.as_f64()) {
        p.delta = d;
        p.validate()?;
    }
    Ok(p)
}

fn random_individual<R: Rng + ?Sized>(bounds: &IdmBounds, rng: &mut R) -> [f64; 5] {
    let mut g = [0.0; 5];
    for (i, v) in g.iter_mut().enumerate() {
        *v = rng.random_range(bounds.lower[i]..=bounds.upper[i]);
    }
    g
}

/// Real-coded GA over the IDM parameters with a random initial population.
pub fn calibrate_ga(config: &GaConfig, episodes: &[FollowEpisode]) -> Result<Calibration, BaselineError> {
    calibrate_ga_from(config, episodes, &[])
}

/// As [`calibrate_ga`], seeding the population with `initial` (clamped to the
/// bounds) and filling the rest at random.
pub fn calibrate_ga_from(config: &GaConfig, episodes: &[FollowEpisode], initial: &[IdmParams]) -> Result<Calibration, BaselineError> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(BaselineError::NoEpisodes);
    }
    let bounds = &config.bounds;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pop: Vec<[f64; 5]> = initial
        .iter()
        .take(config.population)
        .map(|p| {
            let mut g = p.genes();
            for (i, v) in g.iter_mut().enumerate() {
                *v = bounds.clamp(i, *v);
            }
            g
        })
        .collect();
    while pop.len() < config.population {
        pop.push(random_individual(bounds, &mut rng));
    }
    let eval_all = |pop: &[[f64; 5]]| -> Result<Vec<f64>, BaselineError> {
        pop.iter()
            .map(|g| fitness(&IdmParams::from_genes(*g), episodes, config.collision_penalty))
            .collect()
    };
    let mut fit = eval_all(&pop)?;
    let mut history = Vec::with_capacity(config.generations + 1);
    let stats = |generation: usize, fit: &[f64]| GenerationStats {
        generation,
        best: fit.iter().copied().fold(f64::INFINITY, f64::min),
        mean: fit.iter().sum::<f64>() / fit.len() as f64,
    };
    history.push(stats(0, &fit));
    let normals: Vec<Normal<f64>> = (0..5)
        .map(|i| Normal::new(0.0, (config.mutation_scale * bounds.range(i)).max(0.0)).expect("finite std"))
        .collect();

    for generation in 1..=config.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]));
        let mut next: Vec<[f64; 5]> = order[..config.elitism].iter().map(|&i| pop[i]).collect();
        let mut next_fit: Vec<Option<f64>> = order[..config.elitism].iter().map(|&i| Some(fit[i])).collect();
        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            let mut best = rng.random_range(0..pop.len());
            for _ in 1..config.tournament {
                let c = rng.random_range(0..pop.len());
                if fit[c] < fit[best] {
                    best = c;
                }
            }
            best
        };
        while next.len() < config.population {
            let a = pop[tournament(&mut rng)];
            let b = pop[tournament(&mut rng)];
            let mut child = a;
            if rng.random::<f64>() < config.crossover_rate {
                for (i, c) in child.iter_mut().enumerate() {
                    if rng.random::<bool>() {
                        *c = b[i];
                    }
                }
            }
            let mut mutated = false;
            for (i, c) in child.iter_mut().enumerate() {
                if config.mutation_rate > 0.0 && rng.random::<f64>() < config.mutation_rate {
                    *c = bounds.clamp(i, *c + normals[i].sample(&mut rng));
                    mutated = true;
                }
            }
            // unchanged copies keep their parent's fitness
            let known = if !mutated && child == a {
                pop.iter().position(|g| *g == a).map(|i| fit[i])
            } else {
                None
            };
            next.push(child);
            next_fit.push(known);
        }
        fit = next
            .iter()
            .zip(&next_fit)
            .map(|(g, f)| match f {
                Some(v) => Ok(*v),
                None => fitness(&IdmParams::from_genes(*g), episodes, config.collision_penalty),
            })
            .collect::<Result<_, _>>()?;
        pop = next;
        history.push(stats(generation, &fit));
        if generation % 10 == 0 {
            log::info!("ga generation {generation}: best {:.4}%", history[generation].best);
        }
    }
    let best = (0..pop.len()).min_by(|&a, &b| fit[a].total_cmp(&fit[b])).expect("non-empty population");
    Ok(Calibration {
        params: IdmParams::from_genes(pop[best]),
        rmspe_pct: fit[best],
        history,
    })
}
