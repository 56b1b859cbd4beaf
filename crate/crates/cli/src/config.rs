//! TOML run configuration. Precedence: command-line flag > config file >
//! built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mergesim_core::agents::{AgentKind, HeuristicParams};
use mergesim_core::domain::default_conditions;
use mergesim_core::{KinematicCondition, PromptVariant, SimParams, TrackGeometry};
use serde::{Deserialize, Serialize};

/// Name of the resolved configuration written next to every dataset.
pub const RESOLVED_CONFIG: &str = "run_config.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSettings {
    pub max_output_tokens: u32,
    /// Requests in flight across all trials.
    pub max_in_flight: usize,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self {
            max_output_tokens: 512,
            max_in_flight: 8,
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

/// A condition as written in a config file; `relative_velocity` may be
/// omitted and is then derived from the speeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionEntry {
    pub id: String,
    pub v0_left: f64,
    pub v0_right: f64,
    pub projected_headway: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_velocity: Option<f64>,
}

impl ConditionEntry {
    fn resolve(&self) -> KinematicCondition {
        let mut c = KinematicCondition::new(self.id.clone(), self.v0_left, self.v0_right, self.projected_headway);
        if let Some(dv) = self.relative_velocity {
            c.relative_velocity = dv;
        }
        c
    }
}

impl From<&KinematicCondition> for ConditionEntry {
    fn from(c: &KinematicCondition) -> Self {
        Self {
            id: c.id.clone(),
            v0_left: c.v0_left,
            v0_right: c.v0_right,
            projected_headway: c.projected_headway,
            relative_velocity: Some(c.relative_velocity),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub repetitions: Option<u32>,
    /// Agent for both sides unless `left_agent` / `right_agent` are set.
    pub agent: Option<String>,
    pub left_agent: Option<String>,
    pub right_agent: Option<String>,
    pub parallelism: Option<usize>,
    /// Directory holding the eleven prompt template files.
    pub templates: Option<PathBuf>,
    pub params: Option<SimParams>,
    pub track: Option<TrackGeometry>,
    pub heuristic: Option<HeuristicParams>,
    pub llm: Option<LlmSettings>,
    pub conditions: Option<Vec<ConditionEntry>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flag values that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub variant: Option<PromptVariant>,
    pub repetitions: Option<u32>,
    pub agent: Option<String>,
    pub left_agent: Option<String>,
    pub right_agent: Option<String>,
    pub parallelism: Option<usize>,
    pub templates: Option<PathBuf>,
}

/// Fully resolved simulate settings.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: PromptVariant,
    pub repetitions: u32,
    pub left_agent: AgentKind,
    pub right_agent: AgentKind,
    pub parallelism: usize,
    pub templates: Option<PathBuf>,
    pub params: SimParams,
    pub track: TrackGeometry,
    pub heuristic: HeuristicParams,
    pub llm: LlmSettings,
    pub conditions: Vec<KinematicCondition>,
}

fn agent(spec: &str) -> Result<AgentKind> {
    spec.parse::<AgentKind>().map_err(anyhow::Error::from)
}

impl RunConfig {
    pub fn resolve(file: FileConfig, flags: Overrides) -> Result<Self> {
        let variant = match (flags.variant, &file.variant) {
            (Some(v), _) => v,
            (None, Some(s)) => s.parse()?,
            (None, None) => PromptVariant::Baseline,
        };
        // side flag > --agent > side entry in file > file `agent` > heuristic
        let side = |flag: Option<String>, file_side: Option<String>| -> Result<AgentKind> {
            let chosen = flag
                .or_else(|| flags.agent.clone())
                .or(file_side)
                .or_else(|| file.agent.clone())
                .unwrap_or_else(|| "heuristic".to_string());
            agent(&chosen)
        };
        let left_agent = side(flags.left_agent.clone(), file.left_agent.clone())?;
        let right_agent = side(flags.right_agent.clone(), file.right_agent.clone())?;
        let conditions = match &file.conditions {
            Some(list) => list.iter().map(ConditionEntry::resolve).collect(),
            None => default_conditions(),
        };
        let cfg = Self {
            variant,
            repetitions: flags.repetitions.or(file.repetitions).unwrap_or(10),
            left_agent,
            right_agent,
            parallelism: flags.parallelism.or(file.parallelism).unwrap_or(1),
            templates: flags.templates.or(file.templates),
            params: file.params.unwrap_or_default(),
            track: file.track.unwrap_or_default(),
            heuristic: file.heuristic.unwrap_or_default(),
            llm: file.llm.unwrap_or_default(),
            conditions,
        };
        if cfg.repetitions == 0 {
            bail!("repetitions must be at least 1");
        }
        if cfg.parallelism == 0 {
            bail!("parallelism must be at least 1");
        }
        Ok(cfg)
    }

    /// The resolved settings in config-file form, so a run can be repeated.
    pub fn to_file_config(&self) -> FileConfig {
        FileConfig {
            variant: Some(self.variant.label().to_string()),
            repetitions: Some(self.repetitions),
            agent: None,
            left_agent: Some(self.left_agent.to_string()),
            right_agent: Some(self.right_agent.to_string()),
            parallelism: Some(self.parallelism),
            templates: self.templates.clone(),
            params: Some(self.params),
            track: Some(self.track),
            heuristic: Some(self.heuristic),
            llm: Some(self.llm),
            conditions: Some(self.conditions.iter().map(ConditionEntry::from).collect()),
        }
    }
}
