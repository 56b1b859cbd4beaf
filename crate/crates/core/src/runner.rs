//! The receding-horizon closed loop for one trial, and experiment
//! orchestration over conditions × repetitions.

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agents::{Agent, AgentError, AgentFactory, Decision};
use crate::domain::{
    validate_condition_set, AgentExchange, Exchange, HistoryEntry, KinematicCondition,
    Outcome, Plan, PromptContext, PromptVariant, RoadType, Side, SimParams, StepCounts, TrackGeometry,
    TrialRecord, VehicleState, TRIAL_SCHEMA,
};
use crate::error::ConfigError;
use crate::parser::fallback_plan;
use crate::prompting::hex;
use crate::simulator::{clamp_and_scale, merge_event, Simulation, Termination, WorldState};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("audit failed: manifest lists {manifest} trials but {file} holds {lines}")]
    Audit { manifest: usize, file: String, lines: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything about one trial except the agents.
#[derive(Debug, Clone)]
pub struct TrialSetup<'a> {
    pub condition: &'a KinematicCondition,
    pub params: &'a SimParams,
    pub track: &'a TrackGeometry,
    pub variant: PromptVariant,
    pub repetition: u32,
}

struct SideState {
    history: VecDeque<HistoryEntry>,
    plan: Option<Plan>,
}

fn context(
    world: &WorldState,
    side: Side,
    track: &TrackGeometry,
    params: &SimParams,
    state: &SideState,
) -> PromptContext {
    let ego = world.vehicle(side);
    let other = world.vehicle(side.other());
    let distance_to_merge = (ego.position < track.approach_length).then_some(track.approach_length - ego.position);
    PromptContext {
        time: world.time,
        ego_velocity: ego.velocity,
        other_velocity: other.velocity,
        relative_distance: ego.position - other.position,
        distance_to_merge,
        road_type: if distance_to_merge.is_some() {
            RoadType::Merge
        } else {
            RoadType::Straight
        },
        vehicle_length: params.vehicle_length,
        history: state.history.iter().copied().collect(),
        previous_plan_remainder: state.plan.as_ref().map(|p| p.remainder().to_vec()),
    }
}

/// SHA-256 over the canonical JSON of a context.
pub fn context_digest(ctx: &PromptContext) -> String {
    let json = serde_json::to_string(ctx).expect("context serializes");
    hex(&Sha256::digest(json.as_bytes()))
}

fn decide_both(
    left: &mut dyn Agent,
    right: &mut dyn Agent,
    ctx_left: &PromptContext,
    ctx_right: &PromptContext,
) -> (Result<Decision, AgentError>, Result<Decision, AgentError>) {
    #[cfg(feature = "parallel")]
    {
        rayon::join(|| left.decide(ctx_left), || right.decide(ctx_right))
    }
    #[cfg(not(feature = "parallel"))]
    {
        (left.decide(ctx_left), right.decide(ctx_right))
    }
}

/// Resolves a decision into the plan to execute from this tick.
fn adopt(decision: Decision, ctx: &PromptContext, state: &mut SideState, plan_len: usize, flagged: &mut bool) -> AgentExchange {
    let plan = match decision.response {
        Some(response) => response.plan,
        None => {
            let fb = fallback_plan(state.plan.as_ref(), plan_len);
            *flagged |= fb.flagged;
            fb.plan
        }
    };
    let exchange = AgentExchange {
        context_digest: context_digest(ctx),
        history_len: ctx.history.len(),
        remainder_len: ctx.previous_plan_remainder.as_ref().map(Vec::len),
        raw_response: decision.raw_text,
        status: decision.status,
        executed_plan: plan.values().to_vec(),
    };
    state.plan = Some(plan);
    exchange
}

/// Runs one closed-loop trial. Both agents are queried at t = 0 and then
/// every `actions_per_prompt` steps; between queries each executes the
/// next elements of its current plan.
pub fn run_trial(
    setup: &TrialSetup<'_>,
    left: &mut dyn Agent,
    right: &mut dyn Agent,
) -> Result<TrialRecord, ConfigError> {
    let TrialSetup {
        condition,
        params,
        track,
        variant,
        repetition,
    } = setup;
    let counts = params.derive_counts()?;
    track.validate()?;
    let (xl, xr) = condition.initial_positions(track)?;
    let world = WorldState::new(
        VehicleState::new(xl, condition.v0_left),
        VehicleState::new(xr, condition.v0_right),
        track,
    );
    let mut sim = Simulation::new(world, **track, params.dt);
    let mut steps = vec![sim.world().snapshot()];
    let mut exchanges = Vec::new();
    let mut sides = [
        SideState {
            history: VecDeque::with_capacity(counts.memory_steps),
            plan: None,
        },
        SideState {
            history: VecDeque::with_capacity(counts.memory_steps),
            plan: None,
        },
    ];
    let mut flagged = false;
    let mut abort_reason = None;
    let mut termination = sim.termination(params.vehicle_length, counts.max_steps);

    'ticks: while termination == Termination::Continue {
        let world = *sim.world();
        let ctx_l = context(&world, Side::Left, track, params, &sides[0]);
        let ctx_r = context(&world, Side::Right, track, params, &sides[1]);
        let (dl, dr) = decide_both(left, right, &ctx_l, &ctx_r);
        let (dl, dr) = match (dl, dr) {
            (Ok(l), Ok(r)) => (l, r),
            (Err(e), _) | (_, Err(e)) => {
                abort_reason = Some(e.to_string());
                break 'ticks;
            }
        };
        let [state_l, state_r] = &mut sides;
        let ex_l = adopt(dl, &ctx_l, state_l, counts.plan_len, &mut flagged);
        let ex_r = adopt(dr, &ctx_r, state_r, counts.plan_len, &mut flagged);
        exchanges.push(Exchange {
            time: world.time,
            left: ex_l,
            right: ex_r,
        });

        for _ in 0..counts.actions_per_prompt {
            let mut accel = [0.0; 2];
            for (a, state) in accel.iter_mut().zip(sides.iter_mut()) {
                let plan = state.plan.as_mut().expect("plan adopted this tick");
                *a = clamp_and_scale(plan.next_value(), params.a_max).expect("plans hold finite values");
            }
            let world = *sim.advance(accel[0], accel[1]);
            for (i, state) in sides.iter_mut().enumerate() {
                let other = if i == 0 { &world.right } else { &world.left };
                if state.history.len() == counts.memory_steps {
                    state.history.pop_front();
                }
                state.history.push_back(HistoryEntry {
                    time: world.time,
                    ego_acceleration: accel[i],
                    other_velocity: other.velocity,
                });
            }
            steps.push(world.snapshot());
            termination = sim.termination(params.vehicle_length, counts.max_steps);
            if termination != Termination::Continue {
                break 'ticks;
            }
        }
    }

    let event = merge_event(&steps, track.approach_length);
    let (outcome, gap_at_merge) = match (termination, &abort_reason) {
        (_, Some(_)) => (Outcome::NonFinished, None),
        (Termination::Collision, _) => (Outcome::Collision, None),
        (Termination::Finished, _) => {
            let ev = event.expect("a finished trial passed the merge point");
            let outcome = match ev.first {
                Side::Left => Outcome::LeftMergedFirst,
                Side::Right => Outcome::RightMergedFirst,
            };
            (outcome, Some(ev.gap))
        }
        _ => (Outcome::NonFinished, None),
    };

    Ok(TrialRecord {
        schema: TRIAL_SCHEMA.to_string(),
        condition: (*condition).clone(),
        prompt_variant: *variant,
        repetition: *repetition,
        agents: [left.label(), right.label()],
        steps,
        exchanges,
        outcome,
        gap_at_merge,
        merge_time: event.map(|e| e.time),
        flagged,
        abort_reason,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub conditions: Vec<KinematicCondition>,
    pub repetitions: u32,
    pub variant: PromptVariant,
    /// Agent descriptions per side (left, right), for the record.
    pub agents: [String; 2],
    pub params: SimParams,
    pub track: TrackGeometry,
    pub parallelism: usize,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<StepCounts, ConfigError> {
        if self.repetitions < 1 || self.parallelism < 1 {
            return Err(ConfigError::InvalidExperiment);
        }
        validate_condition_set(&self.conditions)?;
        self.track.validate()?;
        for c in &self.conditions {
            c.initial_positions(&self.track)?;
        }
        self.params.derive_counts()
    }

    pub fn trial_count(&self) -> usize {
        self.conditions.len() * self.repetitions as usize
    }
}

/// How trials are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Up to the given number of trials at once (requires the `parallel`
    /// feature; otherwise runs sequentially).
    Parallel(usize),
}

fn run_job(spec: &ExperimentSpec, factory: &dyn AgentFactory, ci: usize, rep: u32) -> TrialRecord {
    let condition = &spec.conditions[ci];
    let setup = TrialSetup {
        condition,
        params: &spec.params,
        track: &spec.track,
        variant: spec.variant,
        repetition: rep,
    };
    let agents = factory
        .build(Side::Left, condition, rep)
        .and_then(|l| factory.build(Side::Right, condition, rep).map(|r| (l, r)));
    let result = match agents {
        Ok((mut l, mut r)) => run_trial(&setup, l.as_mut(), r.as_mut()).map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    };
    result.unwrap_or_else(|reason| TrialRecord {
        schema: TRIAL_SCHEMA.to_string(),
        condition: condition.clone(),
        prompt_variant: spec.variant,
        repetition: rep,
        agents: spec.agents.clone(),
        steps: Vec::new(),
        exchanges: Vec::new(),
        outcome: Outcome::NonFinished,
        gap_at_merge: None,
        merge_time: None,
        flagged: false,
        abort_reason: Some(reason),
    })
}

/// Runs every (condition, repetition) pair and returns the records in
/// condition-major order regardless of scheduling.
pub fn run_trials(spec: &ExperimentSpec, factory: &dyn AgentFactory, execution: Execution) -> Vec<TrialRecord> {
    let jobs: Vec<(usize, u32)> = (0..spec.conditions.len())
        .flat_map(|ci| (0..spec.repetitions).map(move |rep| (ci, rep)))
        .collect();
    match execution {
        Execution::Sequential => jobs.iter().map(|&(ci, rep)| run_job(spec, factory, ci, rep)).collect(),
        Execution::Parallel(threads) => run_parallel(spec, factory, &jobs, threads),
    }
}

#[cfg(feature = "parallel")]
fn run_parallel(spec: &ExperimentSpec, factory: &dyn AgentFactory, jobs: &[(usize, u32)], threads: usize) -> Vec<TrialRecord> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| jobs.par_iter().map(|&(ci, rep)| run_job(spec, factory, ci, rep)).collect())
}

#[cfg(not(feature = "parallel"))]
fn run_parallel(spec: &ExperimentSpec, factory: &dyn AgentFactory, jobs: &[(usize, u32)], _threads: usize) -> Vec<TrialRecord> {
    jobs.iter().map(|&(ci, rep)| run_job(spec, factory, ci, rep)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStatus {
    pub condition: String,
    pub repetition: u32,
    pub outcome: Outcome,
    pub error: Option<String>,
}

/// Provenance written next to `trials.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub harness_version: String,
    pub spec: ExperimentSpec,
    pub template_version: String,
    pub template_hash: String,
    pub models: Vec<String>,
    pub transport: Option<String>,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub trial_count: usize,
    pub failures: usize,
    pub trials: Vec<TrialStatus>,
}

/// Extra provenance the caller knows about.
#[derive(Debug, Clone, Default)]
pub struct Provenance {
    pub template_version: String,
    pub template_hash: String,
    pub transport: Option<String>,
}

pub const TRIALS_FILE: &str = "trials.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// Runs the experiment and writes `trials.jsonl` and `manifest.json` into
/// `out_dir`. Failed trials are kept as aborted records and listed in the
/// manifest.
pub fn run_experiment(
    spec: &ExperimentSpec,
    factory: &dyn AgentFactory,
    provenance: &Provenance,
    out_dir: &Path,
) -> Result<RunManifest, RunError> {
    spec.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let started = unix_now();
    let execution = if spec.parallelism > 1 {
        Execution::Parallel(spec.parallelism)
    } else {
        Execution::Sequential
    };
    let records = run_trials(spec, factory, execution);
    let trials_path = out_dir.join(TRIALS_FILE);
    write_trials(&trials_path, &records)?;
    let trials: Vec<TrialStatus> = records
        .iter()
        .map(|r| TrialStatus {
            condition: r.condition.id.clone(),
            repetition: r.repetition,
            outcome: r.outcome,
            error: r.abort_reason.clone(),
        })
        .collect();
    let manifest = RunManifest {
        harness_version: env!("CARGO_PKG_VERSION").to_string(),
        spec: spec.clone(),
        template_version: provenance.template_version.clone(),
        template_hash: provenance.template_hash.clone(),
        models: factory.model_ids(),
        transport: provenance.transport.clone(),
        started_unix_s: started,
        finished_unix_s: unix_now(),
        trial_count: records.len(),
        failures: trials.iter().filter(|t| t.error.is_some()).count(),
        trials,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    audit_dataset(out_dir)?;
    Ok(manifest)
}

pub fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<(), RunError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("trial record serializes");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrialRecord = serde_json::from_str(&line).map_err(|e| RunError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if record.schema != TRIAL_SCHEMA {
            return Err(RunError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                reason: format!("unsupported schema {:?}", record.schema),
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest, RunError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| RunError::Parse {
        path,
        line: 0,
        reason: e.to_string(),
    })
}

/// Checks that the manifest's trial count matches the data file.
pub fn audit_dataset(dir: &Path) -> Result<(), RunError> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(TRIALS_FILE);
    let file = File::open(&path).map_err(io_err(&path))?;
    let lines = BufReader::new(file)
        .lines()
        .map_while(Result::ok)
        .filter(|l| !l.trim().is_empty())
        .count();
    if lines != manifest.trial_count || manifest.trials.len() != lines {
        return Err(RunError::Audit {
            manifest: manifest.trial_count,
            file: path.display().to_string(),
            lines,
        });
    }
    Ok(())
}
