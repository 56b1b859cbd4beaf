//! Structured prompt assembly from the six prompt components and their
//! single-factor ablations.
//!
//! Wording lives in plain-text template files (`templates/v1`) with
//! `{name}` placeholders. The first line of every component template is its
//! section marker; [`scan_components`] recovers which components a rendered
//! prompt contains.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{PromptContext, PromptVariant, RoadType, SimParams};

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("merge road context without distance_to_merge")]
    MissingDistanceToMerge,
    #[error("straight road context with a distance_to_merge")]
    UnexpectedDistanceToMerge,
    #[error("invalid simulation parameters: {0}")]
    Params(#[from] crate::error::ConfigError),
    #[error("template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

/// Prompt components, in rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    /// Observations and task context.
    C0,
    /// Short-term history.
    C1,
    /// Previous acceleration plan.
    C2,
    /// Behavioral constraints.
    C3,
    /// Tactical merge/yield decision.
    C4,
    /// Output schema.
    C5,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::C0,
        Component::C1,
        Component::C2,
        Component::C3,
        Component::C4,
        Component::C5,
    ];
}

/// Behavioral sub-instructions of C3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Guideline {
    Safety,
    HumanLike,
    Distance,
    Reassess,
}

impl Guideline {
    pub const ALL: [Guideline; 4] = [
        Guideline::Safety,
        Guideline::HumanLike,
        Guideline::Distance,
        Guideline::Reassess,
    ];

    fn removed_by(self) -> PromptVariant {
        match self {
            Guideline::Safety => PromptVariant::A3,
            Guideline::HumanLike => PromptVariant::A4,
            Guideline::Distance => PromptVariant::A5,
            Guideline::Reassess => PromptVariant::A6,
        }
    }
}

/// Which components `variant` includes for a given road type, assuming a
/// previous plan exists.
pub fn included_components(variant: PromptVariant, road: RoadType) -> [bool; 6] {
    [
        true,
        variant != PromptVariant::A1,
        variant != PromptVariant::A2,
        true,
        road == RoadType::Merge && variant != PromptVariant::A7,
        true,
    ]
}

pub fn included_guidelines(variant: PromptVariant) -> [bool; 4] {
    Guideline::ALL.map(|g| g.removed_by() != variant)
}

/// Expected shape of the agent's answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct OutputSchema {
    pub requires_token: bool,
    pub plan_len: usize,
}

pub fn expected_schema(variant: PromptVariant, road: RoadType, plan_len: usize) -> OutputSchema {
    OutputSchema {
        requires_token: included_components(variant, road)[4],
        plan_len,
    }
}

/// The versioned set of component templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub version: String,
    pub system: String,
    pub observations: String,
    pub history: String,
    pub previous_plan: String,
    pub guidelines_header: String,
    pub guidelines: [String; 4],
    pub tactical: String,
    pub output: String,
}

const TEMPLATE_FILES: [&str; 11] = [
    "system.txt",
    "c0_observations.txt",
    "c1_history.txt",
    "c2_previous_plan.txt",
    "c3_header.txt",
    "c3_safety.txt",
    "c3_human.txt",
    "c3_distance.txt",
    "c3_reassess.txt",
    "c4_tactical.txt",
    "c5_output.txt",
];

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    /// Templates compiled into the binary (`templates/v1`).
    pub fn builtin() -> Self {
        let files = [
            include_str!("../templates/v1/system.txt"),
            include_str!("../templates/v1/c0_observations.txt"),
            include_str!("../templates/v1/c1_history.txt"),
            include_str!("../templates/v1/c2_previous_plan.txt"),
            include_str!("../templates/v1/c3_header.txt"),
            include_str!("../templates/v1/c3_safety.txt"),
            include_str!("../templates/v1/c3_human.txt"),
            include_str!("../templates/v1/c3_distance.txt"),
            include_str!("../templates/v1/c3_reassess.txt"),
            include_str!("../templates/v1/c4_tactical.txt"),
            include_str!("../templates/v1/c5_output.txt"),
        ];
        Self::from_parts("v1", files.map(str::to_string))
    }

    /// Loads the eleven template files from `dir`; the directory name is
    /// used as the version label.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut parts: [String; 11] = Default::default();
        for (slot, name) in parts.iter_mut().zip(TEMPLATE_FILES) {
            *slot = fs::read_to_string(dir.join(name)).map_err(|source| PromptError::Io {
                name: name.to_string(),
                source,
            })?;
        }
        let version = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "custom".into());
        Ok(Self::from_parts(&version, parts))
    }

    fn from_parts(version: &str, parts: [String; 11]) -> Self {
        let [system, observations, history, previous_plan, guidelines_header, g0, g1, g2, g3, tactical, output] =
            parts.map(|s| s.trim_end().to_string());
        Self {
            version: version.to_string(),
            system,
            observations,
            history,
            previous_plan,
            guidelines_header,
            guidelines: [g0, g1, g2, g3],
            tactical,
            output,
        }
    }

    /// SHA-256 over all template names and contents.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        let parts = [
            &self.system,
            &self.observations,
            &self.history,
            &self.previous_plan,
            &self.guidelines_header,
            &self.guidelines[0],
            &self.guidelines[1],
            &self.guidelines[2],
            &self.guidelines[3],
            &self.tactical,
            &self.output,
        ];
        for (name, body) in TEMPLATE_FILES.iter().zip(parts) {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(body.as_bytes());
            h.update([0]);
        }
        hex(&h.finalize())
    }

    fn marker(text: &str) -> &str {
        text.lines().next().unwrap_or("")
    }

    fn component_marker(&self, c: Component) -> &str {
        Self::marker(match c {
            Component::C0 => &self.observations,
            Component::C1 => &self.history,
            Component::C2 => &self.previous_plan,
            Component::C3 => &self.guidelines_header,
            Component::C4 => &self.tactical,
            Component::C5 => &self.output,
        })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A rendered prompt: a fixed role text and the structured user message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub system: String,
    pub user: String,
}

fn fill(template: &str, values: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (key, value) in values {
        out = out.replace(&format!("{{{key}}}"), value);
    }
    out
}

fn num(x: f64) -> String {
    // Avoid rendering "-0.00".
    let s = format!("{x:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn num_list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|&v| num(v)).collect();
    format!("[{}]", items.join(", "))
}

pub fn build_prompt(
    ctx: &PromptContext,
    variant: PromptVariant,
    params: &SimParams,
    templates: &TemplateSet,
) -> Result<Prompt, PromptError> {
    match (ctx.road_type, ctx.distance_to_merge) {
        (RoadType::Merge, None) => return Err(PromptError::MissingDistanceToMerge),
        (RoadType::Straight, Some(_)) => return Err(PromptError::UnexpectedDistanceToMerge),
        _ => {}
    }
    let counts = params.derive_counts()?;
    let common = [
        ("dt", num(params.dt)),
        ("a_max", num(params.a_max)),
        ("plan_len", counts.plan_len.to_string()),
        ("memory_window", num(params.memory_window)),
        ("replan_period", num(1.0 / params.prompt_rate)),
    ];

    let mut sections: Vec<String> = Vec::with_capacity(6);

    let (road_type, road_description, dtm_line) = match ctx.distance_to_merge {
        Some(d) => (
            "merge",
            "Your lane merges with the other car's lane ahead.".to_string(),
            format!("\nDistance to the merge point: {} m.", num(d)),
        ),
        None => (
            "straight",
            "Both cars are on the same single lane after the merge point.".to_string(),
            String::new(),
        ),
    };
    let mut c0_values = vec![
        ("road_type", road_type.to_string()),
        ("road_description", road_description),
        ("vehicle_length", num(ctx.vehicle_length)),
        ("ego_velocity", num(ctx.ego_velocity)),
        ("other_velocity", num(ctx.other_velocity)),
        ("relative_distance", num(ctx.relative_distance)),
        ("distance_to_merge_line", dtm_line),
    ];
    c0_values.extend(common.iter().cloned());
    sections.push(fill(&templates.observations, &c0_values));

    if variant != PromptVariant::A1 {
        let lines = if ctx.history.is_empty() {
            "(no history yet)".to_string()
        } else {
            ctx.history
                .iter()
                .map(|e| {
                    format!(
                        "t{} s: your acceleration {} m/s^2, other car speed {} m/s",
                        signed(e.time - ctx.time),
                        num(e.ego_acceleration),
                        num(e.other_velocity)
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        let mut values = vec![("history_lines", lines)];
        values.extend(common.iter().cloned());
        sections.push(fill(&templates.history, &values));
    }

    if variant != PromptVariant::A2 {
        if let Some(remainder) = &ctx.previous_plan_remainder {
            let mut values = vec![("previous_plan", num_list(remainder))];
            values.extend(common.iter().cloned());
            sections.push(fill(&templates.previous_plan, &values));
        }
    }

    let mut c3 = fill(&templates.guidelines_header, &common);
    for (g, included) in templates.guidelines.iter().zip(included_guidelines(variant)) {
        if included {
            c3.push('\n');
            c3.push_str(&fill(g, &common));
        }
    }
    sections.push(c3);

    if included_components(variant, ctx.road_type)[4] {
        sections.push(fill(&templates.tactical, &common));
    }

    sections.push(fill(&templates.output, &common));

    Ok(Prompt {
        system: templates.system.clone(),
        user: sections.join("\n\n"),
    })
}

fn signed(x: f64) -> String {
    let s = num(x);
    if s.starts_with('-') {
        s
    } else {
        format!("+{s}")
    }
}

/// Which components and C3 sub-instructions appear in `text`, recovered by
/// scanning for section markers and guideline lines.
pub fn scan_components(text: &str, templates: &TemplateSet) -> ([bool; 6], [bool; 4]) {
    let lines: Vec<&str> = text.lines().collect();
    // Placeholders may appear in a marker line; match on the text before them.
    let has_line = |marker: &str| {
        let stem = marker.split('{').next().unwrap_or(marker);
        lines.iter().any(|l| l.starts_with(stem))
    };
    let components = Component::ALL.map(|c| has_line(templates.component_marker(c)));
    let guidelines = [0, 1, 2, 3].map(|i| has_line(TemplateSet::marker(&templates.guidelines[i])));
    (components, guidelines)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::HistoryEntry;

    fn merge_ctx() -> PromptContext {
        PromptContext {
            time: 3.0,
            ego_velocity: 10.0,
            other_velocity: 9.6,
            relative_distance: -2.5,
            distance_to_merge: Some(21.0),
            road_type: RoadType::Merge,
            vehicle_length: 4.5,
            history: (1..=10)
                .map(|i| HistoryEntry {
                    time: 1.0 + 0.2 * i as f64,
                    ego_acceleration: -0.5,
                    other_velocity: 9.6,
                })
                .collect(),
            previous_plan_remainder: Some(vec![0.1; 15]),
        }
    }

    fn render(ctx: &PromptContext, v: PromptVariant) -> String {
        build_prompt(ctx, v, &SimParams::default(), &TemplateSet::builtin())
            .unwrap()
            .user
    }

    #[test]
    fn baseline_contains_every_component() {
        let t = TemplateSet::builtin();
        let (c, g) = scan_components(&render(&merge_ctx(), PromptVariant::Baseline), &t);
        assert_eq!(c, [true; 6]);
        assert_eq!(g, [true; 4]);
    }

    #[test]
    fn a7_is_baseline_minus_tactical_section() {
        let ctx = merge_ctx();
        let base = render(&ctx, PromptVariant::Baseline);
        let a7 = render(&ctx, PromptVariant::A7);
        let t = TemplateSet::builtin();
        let tactical = format!("{}\n\n", t.tactical);
        assert_eq!(base.replacen(&tactical, "", 1), a7);
    }

    #[test]
    fn empty_history_is_stated() {
        let mut ctx = merge_ctx();
        ctx.history.clear();
        ctx.previous_plan_remainder = None;
        let text = render(&ctx, PromptVariant::Baseline);
        assert!(text.contains("(no history yet)"));
        let (c, _) = scan_components(&text, &TemplateSet::builtin());
        assert_eq!(c, [true, true, false, true, true, true]);
    }

    #[test]
    fn contradictory_context_rejected() {
        let mut ctx = merge_ctx();
        ctx.distance_to_merge = None;
        let err = build_prompt(&ctx, PromptVariant::Baseline, &SimParams::default(), &TemplateSet::builtin());
        assert!(matches!(err, Err(PromptError::MissingDistanceToMerge)));
    }

    #[test]
    fn schema_examples() {
        use PromptVariant::*;
        assert_eq!(expected_schema(Baseline, RoadType::Merge, 20), OutputSchema { requires_token: true, plan_len: 20 });
        assert_eq!(expected_schema(A7, RoadType::Merge, 20), OutputSchema { requires_token: false, plan_len: 20 });
        assert_eq!(expected_schema(Baseline, RoadType::Straight, 20), OutputSchema { requires_token: false, plan_len: 20 });
    }

    #[test]
    fn numbers_use_two_decimals() {
        let text = render(&merge_ctx(), PromptVariant::Baseline);
        assert!(text.contains("Your speed: 10.00 m/s."));
        assert!(text.contains("Distance to the merge point: 21.00 m."));
        assert!(text.contains("t-0.20 s: your acceleration -0.50 m/s^2"));
        assert!(!text.contains('{'), "unfilled placeholder in:\n{text}");
    }

    #[test]
    fn builtin_hash_is_stable_and_sensitive() {
        let a = TemplateSet::builtin();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.output.push('!');
        assert_ne!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn loads_from_directory() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates/v1");
        let t = TemplateSet::from_dir(&dir).unwrap();
        assert_eq!(t, TemplateSet::builtin());
    }
}
