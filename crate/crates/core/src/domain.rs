//! Shared value types: simulation parameters, track geometry, kinematic
//! conditions, vehicle states, plans and trial logs.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, PlanError};

/// Tolerance used when checking that a ratio of durations is integral.
const RATIO_EPS: f64 = 1e-9;

/// Schema tag written at the top level of every trial log line.
pub const TRIAL_SCHEMA: &str = "trial/1";

/// Timing, actuation and vehicle constants for the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// Integration step (s).
    pub dt: f64,
    /// Plan horizon T (s).
    pub plan_horizon: f64,
    /// Memory window T_m (s).
    pub memory_window: f64,
    /// Prompt rate f_p (Hz).
    pub prompt_rate: f64,
    /// Acceleration bound (m/s²).
    pub a_max: f64,
    /// Vehicle length used for collision checks (m).
    pub vehicle_length: f64,
    /// Sampling temperature passed to LLM providers.
    pub temperature: f64,
    /// Simulated-time budget after which a trial is non-finished (s).
    pub max_trial_duration: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            dt: 0.2,
            plan_horizon: 4.0,
            memory_window: 2.0,
            prompt_rate: 1.0,
            a_max: 2.5,
            vehicle_length: 4.5,
            temperature: 1.0,
            max_trial_duration: 120.0,
        }
    }
}

/// Integer step counts implied by a [`SimParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCounts {
    /// Plan length N = T / dt.
    pub plan_len: usize,
    /// Steps executed between consecutive queries, (1 / f_p) / dt.
    pub actions_per_prompt: usize,
    /// History entries kept in the memory window, T_m / dt.
    pub memory_steps: usize,
    /// Step budget, max_trial_duration / dt.
    pub max_steps: usize,
}

fn integral_ratio(num: f64, den: f64, pair: &'static str) -> Result<usize, ConfigError> {
    let ratio = num / den;
    let rounded = ratio.round();
    if !ratio.is_finite() || rounded < 1.0 || (ratio - rounded).abs() > RATIO_EPS * rounded.max(1.0)
    {
        return Err(ConfigError::NonIntegerRatio {
            pair,
            numerator: num,
            denominator: den,
        });
    }
    Ok(rounded as usize)
}

impl SimParams {
    /// Checks the scalar invariants and derives the integer step counts.
    pub fn derive_counts(&self) -> Result<StepCounts, ConfigError> {
        let positive = [
            ("dt", self.dt),
            ("plan_horizon", self.plan_horizon),
            ("memory_window", self.memory_window),
            ("prompt_rate", self.prompt_rate),
            ("a_max", self.a_max),
            ("vehicle_length", self.vehicle_length),
            ("max_trial_duration", self.max_trial_duration),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::NotPositive { field: name, value });
            }
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(ConfigError::NotPositive {
                field: "temperature",
                value: self.temperature,
            });
        }
        Ok(StepCounts {
            plan_len: integral_ratio(self.plan_horizon, self.dt, "plan_horizon/dt")?,
            actions_per_prompt: integral_ratio(1.0 / self.prompt_rate, self.dt, "(1/prompt_rate)/dt")?,
            memory_steps: integral_ratio(self.memory_window, self.dt, "memory_window/dt")?,
            max_steps: integral_ratio(self.max_trial_duration, self.dt, "max_trial_duration/dt")?,
        })
    }
}

/// Lengths of the inverse-Y track. Arc positions are measured from the
/// tunnel exit; both approach branches have the same length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackGeometry {
    pub approach_length: f64,
    pub merged_length: f64,
}

impl Default for TrackGeometry {
    fn default() -> Self {
        Self {
            approach_length: 50.0,
            merged_length: 50.0,
        }
    }
}

impl TrackGeometry {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (name, value) in [
            ("approach_length", self.approach_length),
            ("merged_length", self.merged_length),
        ] {
            if !(value.is_finite() && value > 0.0) {
                return Err(ConfigError::NotPositive { field: name, value });
            }
        }
        Ok(())
    }

    pub fn total_length(&self) -> f64 {
        self.approach_length + self.merged_length
    }
}

/// Which of the two vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Left => "left",
            Side::Right => "right",
        })
    }
}

/// One initial setup. `projected_headway` is the separation at the moment
/// the first vehicle would reach the merge point if both kept their initial
/// speeds; positive values and positive `relative_velocity` favour the left
/// vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicCondition {
    pub id: String,
    pub v0_left: f64,
    pub v0_right: f64,
    pub projected_headway: f64,
    pub relative_velocity: f64,
}

impl KinematicCondition {
    /// Builds a condition with `relative_velocity` derived from the speeds.
    pub fn new(id: impl Into<String>, v0_left: f64, v0_right: f64, projected_headway: f64) -> Self {
        Self {
            id: id.into(),
            v0_left,
            v0_right,
            projected_headway,
            relative_velocity: v0_left - v0_right,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.v0_left.is_finite() && self.v0_left > 0.0) {
            return Err(ConfigError::condition(&self.id, "v0_left must be positive"));
        }
        if !(self.v0_right.is_finite() && self.v0_right > 0.0) {
            return Err(ConfigError::condition(&self.id, "v0_right must be positive"));
        }
        if !self.projected_headway.is_finite() {
            return Err(ConfigError::condition(&self.id, "projected_headway must be finite"));
        }
        let expected = self.v0_left - self.v0_right;
        if !self.relative_velocity.is_finite() || (self.relative_velocity - expected).abs() > RATIO_EPS {
            return Err(ConfigError::condition(
                &self.id,
                format!(
                    "relative_velocity {} != v0_left - v0_right = {}",
                    self.relative_velocity, expected
                ),
            ));
        }
        Ok(())
    }

    /// Initial arc positions (left, right) on `track`. The vehicle that is
    /// behind at t = 0 starts at the tunnel exit.
    pub fn initial_positions(&self, track: &TrackGeometry) -> Result<(f64, f64), ConfigError> {
        self.validate()?;
        let a = track.approach_length;
        if self.projected_headway.abs() >= a {
            return Err(ConfigError::condition(
                &self.id,
                "|projected_headway| must be below the approach length",
            ));
        }
        // Place the vehicle favoured by h so it reaches the merge point with
        // the other exactly |h| behind, then shift so the rearmost is at 0.
        let (lead_v, trail_v, h) = if self.projected_headway >= 0.0 {
            (self.v0_left, self.v0_right, self.projected_headway)
        } else {
            (self.v0_right, self.v0_left, -self.projected_headway)
        };
        let lead_start_if_trail_at_zero = a - lead_v * (a - h) / trail_v;
        let (lead, trail) = if lead_start_if_trail_at_zero >= 0.0 {
            (lead_start_if_trail_at_zero, 0.0)
        } else {
            (0.0, a - h - trail_v * a / lead_v)
        };
        Ok(if self.projected_headway >= 0.0 {
            (lead, trail)
        } else {
            (trail, lead)
        })
    }
}

/// Stand-in condition set: Δv ∈ {−0.8, 0, +0.8} m/s around 10 m/s with
/// headways of ±2 and ±4 m. The fully symmetric (h = 0, Δv = 0) case is left
/// out so deterministic mirrored agents always have a tie-break.
pub fn default_conditions() -> Vec<KinematicCondition> {
    let rows: [(f64, f64); 11] = [
        (0.0, -4.0),
        (0.0, -2.0),
        (0.0, 2.0),
        (0.0, 4.0),
        (0.8, -4.0),
        (0.8, -2.0),
        (0.8, 0.0),
        (0.8, 2.0),
        (-0.8, -2.0),
        (-0.8, 0.0),
        (-0.8, 4.0),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, &(dv, h))| KinematicCondition::new(format!("C{}", i + 1), 10.0 + dv / 2.0, 10.0 - dv / 2.0, h))
        .collect()
}

pub fn validate_condition_set(conditions: &[KinematicCondition]) -> Result<(), ConfigError> {
    if conditions.is_empty() {
        return Err(ConfigError::EmptyConditionSet);
    }
    let mut seen = HashSet::new();
    for c in conditions {
        if !seen.insert(c.id.as_str()) {
            return Err(ConfigError::DuplicateCondition(c.id.clone()));
        }
        c.validate()?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Arc position along the own branch from the tunnel exit (m).
    pub position: f64,
    pub velocity: f64,
    /// Acceleration applied during the step that produced this state.
    pub acceleration: f64,
}

impl VehicleState {
    pub fn new(position: f64, velocity: f64) -> Self {
        Self {
            position,
            velocity,
            acceleration: 0.0,
        }
    }
}

/// A normalized acceleration plan with an execution cursor.
///
/// Every element is finite and within [−1, 1]; this is checked on
/// construction and deserialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPlan")]
pub struct Plan {
    values: Vec<f64>,
    cursor: usize,
}

#[derive(Deserialize)]
struct RawPlan {
    values: Vec<f64>,
    #[serde(default)]
    cursor: usize,
}

impl TryFrom<RawPlan> for Plan {
    type Error = PlanError;

    fn try_from(raw: RawPlan) -> Result<Self, Self::Error> {
        let mut plan = Plan::new(raw.values)?;
        if raw.cursor > plan.values.len() {
            return Err(PlanError::CursorOutOfRange {
                cursor: raw.cursor,
                len: plan.values.len(),
            });
        }
        plan.cursor = raw.cursor;
        Ok(plan)
    }
}

impl Plan {
    pub fn new(values: Vec<f64>) -> Result<Self, PlanError> {
        if values.is_empty() {
            return Err(PlanError::Empty);
        }
        for (index, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(PlanError::NonFinite { index });
            }
            if !(-1.0..=1.0).contains(&v) {
                return Err(PlanError::OutOfRange { index, value: v });
            }
        }
        Ok(Self { values, cursor: 0 })
    }

    /// Like [`Plan::new`] but also checks the length.
    pub fn with_len(values: Vec<f64>, len: usize) -> Result<Self, PlanError> {
        if values.len() != len {
            return Err(PlanError::WrongLength {
                expected: len,
                actual: values.len(),
            });
        }
        Self::new(values)
    }

    pub fn constant(value: f64, len: usize) -> Result<Self, PlanError> {
        Self::new(vec![value; len])
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
            cursor: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Unexecuted elements.
    pub fn remainder(&self) -> &[f64] {
        &self.values[self.cursor..]
    }

    /// Returns the next element and advances the cursor. Once the plan is
    /// consumed the final element is held.
    pub fn next_value(&mut self) -> f64 {
        match self.values.get(self.cursor) {
            Some(&v) => {
                self.cursor += 1;
                v
            }
            None => *self.values.last().expect("plan is never empty"),
        }
    }

    /// The unexecuted remainder as a fresh plan, padded to the original
    /// length by repeating the final element.
    pub fn shifted(&self) -> Plan {
        let last = *self.values.last().expect("plan is never empty");
        let mut values = self.remainder().to_vec();
        values.resize(self.values.len(), last);
        Plan { values, cursor: 0 }
    }
}

/// Tactical choice: merge first or yield.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TacticalToken {
    M,
    Y,
}

impl fmt::Display for TacticalToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TacticalToken::M => "M",
            TacticalToken::Y => "Y",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub tactical_token: Option<TacticalToken>,
    pub rationale: String,
    pub plan: Plan,
}

impl AgentResponse {
    pub fn from_plan(plan: Plan) -> Self {
        Self {
            tactical_token: None,
            rationale: String::new(),
            plan,
        }
    }
}

/// Road the ego vehicle is currently on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadType {
    Merge,
    Straight,
}

/// Prompt variant: the baseline or one of the seven single-factor ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptVariant {
    Baseline,
    A1,
    A2,
    A3,
    A4,
    A5,
    A6,
    A7,
}

impl PromptVariant {
    pub const ALL: [PromptVariant; 8] = [
        PromptVariant::Baseline,
        PromptVariant::A1,
        PromptVariant::A2,
        PromptVariant::A3,
        PromptVariant::A4,
        PromptVariant::A5,
        PromptVariant::A6,
        PromptVariant::A7,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PromptVariant::Baseline => "baseline",
            PromptVariant::A1 => "a1",
            PromptVariant::A2 => "a2",
            PromptVariant::A3 => "a3",
            PromptVariant::A4 => "a4",
            PromptVariant::A5 => "a5",
            PromptVariant::A6 => "a6",
            PromptVariant::A7 => "a7",
        }
    }

    /// Human-readable name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            PromptVariant::Baseline => "Baseline",
            PromptVariant::A1 => "A1 (-History)",
            PromptVariant::A2 => "A2 (-Prev. acc. plan)",
            PromptVariant::A3 => "A3 (-Safety)",
            PromptVariant::A4 => "A4 (-Human)",
            PromptVariant::A5 => "A5 (-Distance)",
            PromptVariant::A6 => "A6 (-Reassess)",
            PromptVariant::A7 => "A7 (-Tactical plan)",
        }
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PromptVariant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PromptVariant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| ConfigError::UnknownVariant(s.to_string()))
    }
}

/// One entry of the short-term history, seen from the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub time: f64,
    pub ego_acceleration: f64,
    pub other_velocity: f64,
}

/// The four agent inputs at a query tick, ego-centric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext {
    pub time: f64,
    pub ego_velocity: f64,
    pub other_velocity: f64,
    /// Ego arc position minus other arc position; positive when ego leads.
    pub relative_distance: f64,
    /// Present while the ego vehicle has not reached the merge point.
    pub distance_to_merge: Option<f64>,
    pub road_type: RoadType,
    pub vehicle_length: f64,
    pub history: Vec<HistoryEntry>,
    pub previous_plan_remainder: Option<Vec<f64>>,
}

/// How an agent's answer at one tick was obtained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "detail", rename_all = "kebab-case")]
pub enum ExchangeStatus {
    /// Plan produced by a deterministic agent.
    Deterministic,
    /// Model text parsed and validated.
    Valid,
    /// Model text failed validation; the previous plan was continued.
    Invalid(String),
    /// The transport failed after retries; the previous plan was continued.
    TransportError(String),
}

impl ExchangeStatus {
    pub fn used_fallback(&self) -> bool {
        matches!(self, ExchangeStatus::Invalid(_) | ExchangeStatus::TransportError(_))
    }
}

/// Compact record of what one agent saw and answered at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentExchange {
    /// SHA-256 of the canonical JSON encoding of the context.
    pub context_digest: String,
    pub history_len: usize,
    pub remainder_len: Option<usize>,
    pub raw_response: Option<String>,
    #[serde(flatten)]
    pub status: ExchangeStatus,
    /// Normalized plan that was executed from this tick.
    pub executed_plan: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub time: f64,
    pub left: AgentExchange,
    pub right: AgentExchange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSnapshot {
    pub time: f64,
    pub left: VehicleState,
    pub right: VehicleState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    LeftMergedFirst,
    RightMergedFirst,
    Collision,
    NonFinished,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::LeftMergedFirst => "left-merged-first",
            Outcome::RightMergedFirst => "right-merged-first",
            Outcome::Collision => "collision",
            Outcome::NonFinished => "non-finished",
        }
    }
}

impl FromStr for Outcome {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            Outcome::LeftMergedFirst,
            Outcome::RightMergedFirst,
            Outcome::Collision,
            Outcome::NonFinished,
        ]
        .into_iter()
        .find(|o| o.label() == s)
        .ok_or_else(|| format!("unknown outcome {s:?}"))
    }
}

/// Complete log of one trial; one line of `trials.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub schema: String,
    pub condition: KinematicCondition,
    pub prompt_variant: PromptVariant,
    pub repetition: u32,
    pub agents: [String; 2],
    pub steps: Vec<StepSnapshot>,
    pub exchanges: Vec<Exchange>,
    pub outcome: Outcome,
    pub gap_at_merge: Option<f64>,
    /// Time at which the first vehicle reached the merge point.
    pub merge_time: Option<f64>,
    /// Set when an agent had to coast because no valid plan ever existed.
    pub flagged: bool,
    /// Diagnostic when the trial was aborted by an agent contract violation.
    pub abort_reason: Option<String>,
}

impl TrialRecord {
    pub fn is_aborted(&self) -> bool {
        self.abort_reason.is_some()
    }

    /// Checks the structural invariants of a record.
    pub fn validate(&self, dt: f64) -> Result<(), String> {
        if self.schema != TRIAL_SCHEMA {
            return Err(format!("unexpected schema {:?}", self.schema));
        }
        for pair in self.steps.windows(2) {
            let delta = pair[1].time - pair[0].time;
            if (delta - dt).abs() > 1e-9 {
                return Err(format!("step times not spaced by dt at t={}", pair[0].time));
            }
        }
        match (self.outcome, self.gap_at_merge) {
            (Outcome::Collision, Some(_)) => return Err("collision with a gap_at_merge".into()),
            (Outcome::LeftMergedFirst | Outcome::RightMergedFirst, None) => {
                return Err("merge outcome without gap_at_merge".into())
            }
            (Outcome::LeftMergedFirst | Outcome::RightMergedFirst, Some(g)) if g.is_nan() || g < 0.0 => {
                return Err(format!("negative gap_at_merge {g}"))
            }
            _ => {}
        }
        Ok(())
    }
}
