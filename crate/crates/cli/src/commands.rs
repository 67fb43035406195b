use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use atd3_core::agent::{self, load_actor, write_log_csv, AgentMode};
use atd3_core::baselines::{calibrate_ga, read_params_json, IdmPolicy};
use atd3_core::data::{
    check_against_records, extract_follow_pairs, parse_trajectories, read_dataset, split, synthesize, synthetic_index,
    write_dataset, DatasetIndex, DatasetSplit, Units, INDEX_FILE,
};
use atd3_core::env::FollowEpisode;
use atd3_core::eval::{
    attention_summary, attention_svg, compare as compare_policies, rollout, speed_svg, write_attention_csv,
    write_events_json, write_rollout_csv, ComparisonTable, Policy,
};
use atd3_core::nets::Actor;

use crate::{CliError, RunContext};

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

fn require<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf, CliError> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("{key} is required (set it in the config or pass the flag)")))
}

fn require_files(paths: &[&Path]) -> Result<(), CliError> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.is_file()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(CliError::Data(format!("missing input files: {}", missing.join(", "))))
    }
}

/// Episode file names are derived from ids; keep them filesystem-safe.
fn file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub fn ingest(ctx: &mut RunContext) -> Result<(), CliError> {
    let cfg = ctx.config.clone();
    let input = require(&cfg.input, "input")?;
    let units_path = cfg.units.clone().unwrap_or_else(|| input.with_extension("units.json"));
    require_files(&[input, &units_path])?;
    ctx.add_input(input);
    ctx.add_input(&units_path);
    let units = Units::from_json(&fs::read_to_string(&units_path)?)?;
    let reader = BufReader::new(File::open(input)?);
    let traj = parse_trajectories(reader, &units)?;
    let extraction = extract_follow_pairs(&traj, &cfg.filter)?;
    for (ep, meta) in extraction.episodes.iter().zip(&extraction.meta) {
        let problems = check_against_records(ep, meta, &traj, &cfg.filter);
        if !problems.is_empty() {
            return Err(CliError::Data(format!("episode {} fails validation: {}", ep.id, problems.join("; "))));
        }
    }
    let index = DatasetIndex {
        source: input.display().to_string(),
        episodes: extraction.meta.clone(),
        rejections: Some(extraction.stats),
        dropped_vehicles: traj.dropped.clone(),
    };
    write_dataset(&ctx.path("dataset"), &index, &extraction.episodes)?;
    log::info!("wrote {} episodes", extraction.episodes.len());
    Ok(())
}

pub fn synth(ctx: &mut RunContext) -> Result<(), CliError> {
    let cfg = &ctx.config;
    let eps = synthesize(cfg.episodes, &cfg.mix, cfg.seed, &cfg.synth)?;
    let index = synthetic_index(&eps, cfg.seed);
    let episodes: Vec<FollowEpisode> = eps.into_iter().map(|e| e.episode).collect();
    write_dataset(&ctx.path("dataset"), &index, &episodes)?;
    let counts = cfg.mix.counts(cfg.episodes);
    log::info!(
        "wrote {} episodes: smooth {}, stopgo {}, brake {}",
        episodes.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

struct Loaded {
    index: DatasetIndex,
    split: DatasetSplit,
}

fn load_split(ctx: &mut RunContext) -> Result<Loaded, CliError> {
    let dir = require(&ctx.config.dataset, "dataset")?.clone();
    require_files(&[&dir.join(INDEX_FILE)])?;
    let (index, episodes) = read_dataset(&dir)?;
    ctx.add_input(&dir.join(INDEX_FILE));
    for meta in &index.episodes {
        ctx.add_input(&dir.join(&meta.file));
    }
    let vehicles = episodes.iter().map(|e| e.vehicle_id).collect::<std::collections::BTreeSet<_>>().len();
    let train_vehicles = ctx
        .config
        .train_vehicles
        .unwrap_or_else(|| ((vehicles as f64) * 0.75).round() as usize);
    let split = split(&episodes, train_vehicles, ctx.config.split_seed)?;
    log::info!("split: {} training and {} test episodes", split.train.len(), split.test.len());
    Ok(Loaded { index, split })
}

pub fn calibrate(ctx: &mut RunContext) -> Result<(), CliError> {
    let loaded = load_split(ctx)?;
    let cfg = &ctx.config;
    let n = cfg.calibration_episodes.unwrap_or(loaded.split.train.len()).min(loaded.split.train.len());
    let result = calibrate_ga(&cfg.ga, &loaded.split.train[..n])?;
    log::info!("calibrated IDM: {:?}, rmspe {:.3}%", result.params, result.rmspe_pct);
    result.write_json(create(&ctx.path("idm.json"))?)?;
    result.write_history_csv(create(&ctx.path("ga_history.csv"))?)?;
    Ok(())
}

pub fn train(ctx: &mut RunContext) -> Result<(), CliError> {
    let loaded = load_split(ctx)?;
    let cfg = ctx.config.clone();
    let (pool, monitor) = if cfg.validation_vehicles > 0 {
        let ids = loaded.split.train_vehicles().len();
        if cfg.validation_vehicles >= ids {
            return Err(CliError::Config(format!(
                "validation_vehicles {} leaves no training vehicles out of {ids}",
                cfg.validation_vehicles
            )));
        }
        let inner = split(&loaded.split.train, ids - cfg.validation_vehicles, cfg.split_seed.wrapping_add(1))?;
        (inner.train, inner.test)
    } else {
        let k = cfg.monitor_episodes.min(loaded.split.train.len());
        (loaded.split.train.clone(), loaded.split.train[..k].to_vec())
    };
    let ckpt_dir = ctx.path("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let outcome = agent::train::<f64>(&cfg.train, &pool, &monitor, |report| {
        let stem = ckpt_dir.join(format!("epoch_{:03}", report.epoch));
        report
            .agent
            .save_checkpoint(&stem.with_extension("bin"), &stem.with_extension("json"))
    })?;
    write_log_csv(&outcome.log, create(&ctx.path("training_log.csv"))?)?;
    outcome
        .agent
        .save_checkpoint(&ctx.path("checkpoint.bin"), &ctx.path("checkpoint.json"))?;
    let audit = outcome.agent.attention_audit();
    let summary = serde_json::json!({
        "mode": cfg.train.mode,
        "counters": outcome.agent.counters(),
        "attention_audit": audit,
        "env_steps": outcome.env_steps,
        "episodes_started": outcome.episodes_started,
        "collisions": outcome.collisions,
        "buffer_len": outcome.buffer_len,
        "final_eval_rmspe": outcome.log.iter().rev().find_map(|r| r.eval_rmspe),
    });
    fs::write(ctx.path("train_summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    if audit.violations > 0 {
        return Err(CliError::Numerical(format!(
            "{} attention rows failed to sum to one (max deviation {:e})",
            audit.violations, audit.max_deviation
        )));
    }
    Ok(())
}

fn checkpoint_pair(path: &Path) -> (PathBuf, PathBuf) {
    if path.extension().is_some_and(|e| e == "json") {
        (path.with_extension("bin"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.with_extension("json"))
    }
}

fn load_policy(ctx: &mut RunContext, path: &Path) -> Result<(String, Actor<f64>), CliError> {
    let (bin, json) = checkpoint_pair(path);
    require_files(&[&bin, &json])?;
    ctx.add_input(&bin);
    ctx.add_input(&json);
    let actor = load_actor::<f64>(&bin, &json)?;
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", json.display())))?;
    let mode: AgentMode = manifest
        .pointer("/meta/mode")
        .cloned()
        .and_then(|v| serde_json::from_value(v).ok())
        .unwrap_or_default();
    Ok((mode.name().to_uppercase(), actor))
}

fn single_checkpoint(ctx: &mut RunContext) -> Result<(String, Actor<f64>), CliError> {
    match ctx.config.checkpoints.clone().as_slice() {
        [one] => load_policy(ctx, one),
        [] => Err(CliError::Config("checkpoint is required".into())),
        _ => Err(CliError::Config("exactly one checkpoint expected".into())),
    }
}

fn write_table(ctx: &RunContext, table: &ComparisonTable) -> Result<(), CliError> {
    table.write_csv(create(&ctx.path("table1.csv"))?)?;
    table.write_breakdown_csv(create(&ctx.path("breakdown.csv"))?)?;
    fs::write(ctx.path("table1.txt"), table.render())?;
    Ok(())
}

pub fn eval(ctx: &mut RunContext) -> Result<(), CliError> {
    let loaded = load_split(ctx)?;
    let (name, actor) = single_checkpoint(ctx)?;
    let test = &loaded.split.test;
    if test.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    let mut traces = Vec::with_capacity(test.len());
    for ep in test {
        let trace = rollout(&actor, ep)?;
        let stem = file_stem(&ep.id);
        write_rollout_csv(&trace, create(&ctx.path(&format!("rollout_{stem}.csv")))?)?;
        if ctx.config.svg {
            fs::write(ctx.path(&format!("speed_{stem}.svg")), speed_svg(&trace))?;
        }
        traces.push(trace);
    }
    let table = compare_policies(&[(name, &actor as &dyn Policy)], test)?;
    write_table(ctx, &table)?;
    if actor.has_attention() {
        write_attention(ctx, &traces)?;
    }
    Ok(())
}

fn write_attention(ctx: &RunContext, traces: &[atd3_core::eval::RolloutTrace]) -> Result<(), CliError> {
    let summary = attention_summary(traces, &ctx.config.events);
    for ep in &summary.episodes {
        let stem = file_stem(&ep.episode_id);
        write_attention_csv(ep, create(&ctx.path(&format!("attention_{stem}.csv")))?)?;
        if ctx.config.svg {
            fs::write(ctx.path(&format!("attention_{stem}.svg")), attention_svg(ep))?;
        }
    }
    write_events_json(&summary, create(&ctx.path("events.json"))?)?;
    let shifted = summary.episodes.iter().filter(|e| e.recency_shift() == Some(true)).count();
    let comparable = summary.episodes.iter().filter(|e| e.recency_shift().is_some()).count();
    log::info!(
        "attention: r3 higher inside events in {shifted}/{comparable} episodes; mean r8 {:.3}",
        summary.mean_r8
    );
    Ok(())
}

pub fn attention(ctx: &mut RunContext) -> Result<(), CliError> {
    let loaded = load_split(ctx)?;
    let (_, actor) = single_checkpoint(ctx)?;
    if !actor.has_attention() {
        return Err(CliError::Config("attention analysis needs an atd3 checkpoint".into()));
    }
    let mut traces = Vec::new();
    for ep in &loaded.split.test {
        traces.push(rollout(&actor, ep)?);
    }
    if traces.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    write_attention(ctx, &traces)?;
    let scenarios: Vec<serde_json::Value> = loaded
        .index
        .episodes
        .iter()
        .filter(|m| loaded.split.test.iter().any(|e| e.id == m.id))
        .map(|m| serde_json::json!({"episode": m.id, "scenario": m.scenario, "brake_start": m.brake_start}))
        .collect();
    fs::write(
        ctx.path("test_episodes.json"),
        serde_json::to_string_pretty(&scenarios).expect("json"),
    )?;
    Ok(())
}

pub fn compare(ctx: &mut RunContext) -> Result<(), CliError> {
    let loaded = load_split(ctx)?;
    let mut idm = None;
    if let Some(path) = ctx.config.idm.clone() {
        require_files(&[&path])?;
        ctx.add_input(&path);
        idm = Some(IdmPolicy(read_params_json(&fs::read_to_string(&path)?)?));
    }
    let mut actors = Vec::new();
    for path in ctx.config.checkpoints.clone() {
        actors.push(load_policy(ctx, &path)?);
    }
    let mut policies: Vec<(String, &dyn Policy)> = Vec::new();
    if let Some(p) = &idm {
        policies.push(("IDM".to_string(), p));
    }
    for (name, actor) in &actors {
        let taken = policies.iter().filter(|(n, _)| n == name || n.starts_with(&format!("{name}#"))).count();
        let label = if taken == 0 { name.clone() } else { format!("{name}#{}", taken + 1) };
        policies.push((label, actor));
    }
    if policies.is_empty() {
        return Err(CliError::Config("compare needs --idm and/or at least one --checkpoint".into()));
    }
    if loaded.split.test.is_empty() {
        return Err(CliError::Data("the test split is empty".into()));
    }
    let table = compare_policies(&policies, &loaded.split.test)?;
    print!("{}", table.render());
    write_table(ctx, &table)
}
