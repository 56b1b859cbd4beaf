//! Closed-loop simulation and evaluation harness for two driver agents
//! resolving a one-dimensional merging conflict.
//!
//! Agents (LLM-backed or deterministic) receive structured observations,
//! return fixed-horizon normalized acceleration plans, and execute the first
//! slice of each plan before re-planning. Trial logs feed behavioral
//! metrics, regression fits and report tables.

pub mod agents;
pub mod domain;
pub mod error;
pub mod llm_client;
pub mod metrics;
pub mod parser;
pub mod prompting;
pub mod report;
pub mod runner;
pub mod simulator;
pub mod stats;

pub use domain::{
    AgentResponse, KinematicCondition, Outcome, Plan, PromptContext, PromptVariant, RoadType, Side, SimParams,
    TrackGeometry, TrialRecord,
};
pub use error::{ConfigError, PlanError};
