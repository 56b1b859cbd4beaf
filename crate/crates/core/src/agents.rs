//! Driver agents: the contract from [`PromptContext`] to a plan, the
//! deterministic test agents and the LLM-backed agent.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    AgentResponse, ExchangeStatus, KinematicCondition, Plan, PromptContext, PromptVariant, RoadType, Side,
    SimParams, TacticalToken,
};
use crate::error::PlanError;
use crate::llm_client::{CompletionRequest, LlmClient};
use crate::parser::parse_response;
use crate::prompting::{build_prompt, expected_schema, PromptError, TemplateSet};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("script exhausted after {0} plans")]
    ScriptExhausted(usize),
    #[error("invalid plan: {0}")]
    Plan(#[from] PlanError),
    #[error("prompt: {0}")]
    Prompt(#[from] PromptError),
    #[error("invalid agent spec {spec:?}: {reason}")]
    Spec { spec: String, reason: String },
    #[error("reading script {path}: {reason}")]
    Script { path: PathBuf, reason: String },
    #[error("LLM agent requested but no LLM backend is configured")]
    NoBackend,
}

/// What an agent produced at one tick. `response` is `None` when the
/// runner must fall back to the previous plan.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub response: Option<AgentResponse>,
    pub raw_text: Option<String>,
    pub status: ExchangeStatus,
}

impl Decision {
    fn deterministic(response: AgentResponse) -> Self {
        Self {
            response: Some(response),
            raw_text: None,
            status: ExchangeStatus::Deterministic,
        }
    }
}

pub trait Agent: Send {
    fn decide(&mut self, ctx: &PromptContext) -> Result<Decision, AgentError>;

    fn label(&self) -> String;
}

/// Returns its k-th stored plan on the k-th call.
#[derive(Debug, Clone)]
pub struct ScriptedAgent {
    plans: Vec<Plan>,
    calls: usize,
}

impl ScriptedAgent {
    pub fn new(plans: Vec<Plan>) -> Self {
        Self { plans, calls: 0 }
    }
}

impl Agent for ScriptedAgent {
    fn decide(&mut self, _ctx: &PromptContext) -> Result<Decision, AgentError> {
        let plan = self
            .plans
            .get(self.calls)
            .cloned()
            .ok_or(AgentError::ScriptExhausted(self.plans.len()))?;
        self.calls += 1;
        Ok(Decision::deterministic(AgentResponse::from_plan(plan)))
    }

    fn label(&self) -> String {
        format!("scripted({} plans)", self.plans.len())
    }
}

#[derive(Debug, Clone)]
pub struct ConstantAgent {
    plan: Plan,
}

impl ConstantAgent {
    pub fn new(value: f64, plan_len: usize) -> Result<Self, AgentError> {
        Ok(Self {
            plan: Plan::constant(value, plan_len)?,
        })
    }
}

impl Agent for ConstantAgent {
    fn decide(&mut self, _ctx: &PromptContext) -> Result<Decision, AgentError> {
        Ok(Decision::deterministic(AgentResponse::from_plan(self.plan.clone())))
    }

    fn label(&self) -> String {
        format!("const({})", self.plan.values()[0])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeuristicParams {
    /// Arrival-time difference below which the later vehicle yields (s).
    pub arrival_threshold: f64,
    /// Normalized deceleration used while yielding or following.
    pub yield_decel: f64,
    /// Minimum time gap to the vehicle ahead once on the same lane (s).
    pub follow_time_gap: f64,
}

impl Default for HeuristicParams {
    fn default() -> Self {
        Self {
            arrival_threshold: 1.5,
            yield_decel: -0.4,
            follow_time_gap: 1.0,
        }
    }
}

/// Yields when both vehicles would reach the merge point at nearly the same
/// time and ego is the later one; otherwise holds speed. Exact ties go to
/// the faster vehicle, then to the one ahead.
#[derive(Debug, Clone)]
pub struct HeuristicYieldAgent {
    params: HeuristicParams,
    plan_len: usize,
}

fn arrival_time(distance: f64, speed: f64) -> f64 {
    if distance <= 0.0 {
        0.0
    } else if speed <= 1e-9 {
        f64::INFINITY
    } else {
        distance / speed
    }
}

impl HeuristicYieldAgent {
    pub fn new(params: HeuristicParams, plan_len: usize) -> Self {
        Self { params, plan_len }
    }

    fn choose(&self, ctx: &PromptContext) -> (f64, TacticalToken) {
        let ego_behind = ctx.relative_distance < 0.0;
        let other_dtm = ctx.distance_to_merge.map(|d| d + ctx.relative_distance);
        match (ctx.distance_to_merge, other_dtm) {
            (Some(dtm), Some(odtm)) if odtm > 0.0 => {
                let t_ego = arrival_time(dtm, ctx.ego_velocity);
                let t_other = arrival_time(odtm, ctx.other_velocity);
                let later = if t_ego != t_other {
                    t_ego > t_other
                } else if ctx.ego_velocity != ctx.other_velocity {
                    ctx.ego_velocity < ctx.other_velocity
                } else {
                    ego_behind
                };
                if later && (t_ego - t_other).abs() < self.params.arrival_threshold {
                    (self.params.yield_decel, TacticalToken::Y)
                } else {
                    (0.0, if later { TacticalToken::Y } else { TacticalToken::M })
                }
            }
            _ => {
                // Same lane (or the other car already merged): keep a time gap.
                let gap = -ctx.relative_distance - ctx.vehicle_length;
                let closing = ctx.ego_velocity > ctx.other_velocity;
                let tight = gap < self.params.follow_time_gap * ctx.ego_velocity;
                if ego_behind && closing && tight {
                    (self.params.yield_decel, TacticalToken::Y)
                } else {
                    (0.0, if ego_behind { TacticalToken::Y } else { TacticalToken::M })
                }
            }
        }
    }
}

impl Agent for HeuristicYieldAgent {
    fn decide(&mut self, ctx: &PromptContext) -> Result<Decision, AgentError> {
        let (u, token) = self.choose(ctx);
        Ok(Decision::deterministic(AgentResponse {
            tactical_token: (ctx.road_type == RoadType::Merge).then_some(token),
            rationale: String::new(),
            plan: Plan::constant(u, self.plan_len)?,
        }))
    }

    fn label(&self) -> String {
        "heuristic".into()
    }
}

/// Shared pieces the LLM-backed agents need.
#[derive(Clone)]
pub struct LlmBackend {
    pub client: Arc<LlmClient>,
    pub templates: Arc<TemplateSet>,
    pub max_output_tokens: u32,
}

/// Prompt → completion → parse. Invalid or failed answers surface as a
/// fallback decision rather than an error.
pub struct LlmAgent {
    backend: LlmBackend,
    model_id: String,
    variant: PromptVariant,
    params: SimParams,
    plan_len: usize,
    trace_prefix: String,
    calls: usize,
}

impl LlmAgent {
    pub fn new(
        backend: LlmBackend,
        model_id: impl Into<String>,
        variant: PromptVariant,
        params: SimParams,
        trace_prefix: impl Into<String>,
    ) -> Result<Self, AgentError> {
        let plan_len = params.derive_counts().map_err(PromptError::from)?.plan_len;
        Ok(Self {
            backend,
            model_id: model_id.into(),
            variant,
            params,
            plan_len,
            trace_prefix: trace_prefix.into(),
            calls: 0,
        })
    }
}

impl Agent for LlmAgent {
    fn decide(&mut self, ctx: &PromptContext) -> Result<Decision, AgentError> {
        let prompt = build_prompt(ctx, self.variant, &self.params, &self.backend.templates)?;
        let request = CompletionRequest {
            system_text: prompt.system,
            user_text: prompt.user,
            temperature: self.params.temperature,
            model_id: self.model_id.clone(),
            max_output_tokens: self.backend.max_output_tokens,
            trace_tag: format!("{}/q{}", self.trace_prefix, self.calls),
        };
        self.calls += 1;
        let completion = match self.backend.client.complete(&request) {
            Ok(c) => c,
            Err(err) => {
                tracing::warn!(agent = %self.trace_prefix, error = %err, "transport failure, falling back");
                return Ok(Decision {
                    response: None,
                    raw_text: None,
                    status: ExchangeStatus::TransportError(err.to_string()),
                });
            }
        };
        let schema = expected_schema(self.variant, ctx.road_type, self.plan_len);
        let outcome = parse_response(&completion.result.raw_text, &schema);
        Ok(match outcome.result {
            Ok(response) => Decision {
                response: Some(response),
                raw_text: Some(outcome.raw_text),
                status: ExchangeStatus::Valid,
            },
            Err(reason) => Decision {
                response: None,
                raw_text: Some(outcome.raw_text),
                status: ExchangeStatus::Invalid(reason.to_string()),
            },
        })
    }

    fn label(&self) -> String {
        format!("llm:{}", self.model_id)
    }
}

/// Agent selection as given on the command line or in a config file:
/// `scripted:<file>`, `const:<u>`, `heuristic` or `llm:<provider>/<model>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AgentKind {
    Scripted(PathBuf),
    Constant(f64),
    HeuristicYield,
    Llm { provider: String, model: String },
}

impl FromStr for AgentKind {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |reason: &str| AgentError::Spec {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("heuristic", None) => Ok(AgentKind::HeuristicYield),
            ("const", Some(u)) => {
                let v: f64 = u.parse().map_err(|_| bad("expected a number"))?;
                if !(-1.0..=1.0).contains(&v) {
                    return Err(bad("value must be within [-1, 1]"));
                }
                Ok(AgentKind::Constant(v))
            }
            ("scripted", Some(path)) if !path.is_empty() => Ok(AgentKind::Scripted(PathBuf::from(path))),
            ("llm", Some(rest)) => match rest.split_once('/') {
                Some((p, m)) if !p.is_empty() && !m.is_empty() => Ok(AgentKind::Llm {
                    provider: p.to_string(),
                    model: m.to_string(),
                }),
                _ => Err(bad("expected llm:<provider>/<model>")),
            },
            _ => Err(bad("expected scripted:<file>, const:<u>, heuristic or llm:<provider>/<model>")),
        }
    }
}

impl TryFrom<String> for AgentKind {
    type Error = AgentError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<AgentKind> for String {
    fn from(k: AgentKind) -> String {
        k.to_string()
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::Scripted(p) => write!(f, "scripted:{}", p.display()),
            AgentKind::Constant(u) => write!(f, "const:{u}"),
            AgentKind::HeuristicYield => f.write_str("heuristic"),
            AgentKind::Llm { provider, model } => write!(f, "llm:{provider}/{model}"),
        }
    }
}

/// Reads a JSON array of plans (each an array of normalized values).
pub fn load_script(path: &Path, plan_len: usize) -> Result<Vec<Plan>, AgentError> {
    let err = |reason: String| AgentError::Script {
        path: path.to_path_buf(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let raw: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    raw.into_iter()
        .map(|v| Plan::with_len(v, plan_len).map_err(AgentError::from))
        .collect()
}

/// Builds fresh agents for each trial.
pub trait AgentFactory: Sync {
    fn build(
        &self,
        side: Side,
        condition: &KinematicCondition,
        repetition: u32,
    ) -> Result<Box<dyn Agent>, AgentError>;

    /// Provider and model identifiers, for the run manifest.
    fn model_ids(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Factory from an [`AgentKind`] per side.
#[derive(Clone)]
pub struct AgentSetup {
    pub left: AgentKind,
    pub right: AgentKind,
    pub variant: PromptVariant,
    pub params: SimParams,
    pub heuristic: HeuristicParams,
    pub llm: Option<LlmBackend>,
}

impl AgentSetup {
    pub fn symmetric(kind: AgentKind, variant: PromptVariant, params: SimParams) -> Self {
        Self {
            left: kind.clone(),
            right: kind,
            variant,
            params,
            heuristic: HeuristicParams::default(),
            llm: None,
        }
    }
}

impl AgentFactory for AgentSetup {
    fn build(
        &self,
        side: Side,
        condition: &KinematicCondition,
        repetition: u32,
    ) -> Result<Box<dyn Agent>, AgentError> {
        let plan_len = self.params.derive_counts().map_err(PromptError::from)?.plan_len;
        let kind = match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        };
        Ok(match kind {
            AgentKind::Scripted(path) => Box::new(ScriptedAgent::new(load_script(path, plan_len)?)),
            AgentKind::Constant(u) => Box::new(ConstantAgent::new(*u, plan_len)?),
            AgentKind::HeuristicYield => Box::new(HeuristicYieldAgent::new(self.heuristic, plan_len)),
            AgentKind::Llm { model, .. } => {
                let backend = self.llm.clone().ok_or(AgentError::NoBackend)?;
                Box::new(LlmAgent::new(
                    backend,
                    model.clone(),
                    self.variant,
                    self.params,
                    format!("{}/{}/r{}/{}", self.variant, condition.id, repetition, side),
                )?)
            }
        })
    }

    fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = [&self.left, &self.right]
            .iter()
            .filter_map(|k| match k {
                AgentKind::Llm { provider, model } => Some(format!("{provider}/{model}")),
                _ => None,
            })
            .collect();
        ids.dedup();
        ids
    }
}
