//! Declarative assembly plans: schema, loading, validation and the bundled
//! 21-stage hard-drive plan.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{canonicalize_angle, Grasp, PartClass};

const BUILTIN_HDD_PLAN: &str = include_str!("../plans/hdd21.plan.json");

/// Current plan schema version.
pub const PLAN_SCHEMA_VERSION: u32 = 1;

/// Normalized rectangle, center + size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Region {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Region { cx, cy, w, h }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (x - self.cx).abs() <= self.w / 2.0 && (y - self.cy).abs() <= self.h / 2.0
    }

    fn in_range(&self) -> bool {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        unit(self.cx) && unit(self.cy) && unit(self.w) && unit(self.h) && self.w > 0.0 && self.h > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    PartPlacement,
    ScrewFastening,
    Verification,
    Completion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngleConstraint {
    pub expected_deg: f64,
    pub tol_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub id: String,
    pub ordinal: u32,
    pub kind: StageKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub part: Option<PartClass>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grasp: Option<Grasp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<Region>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_depth_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<AngleConstraint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub verify_parts: Vec<PartClass>,
    /// Free-form operator-facing description.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblyPlan {
    pub plan_id: String,
    pub version: u32,
    pub stages: Vec<StageSpec>,
    /// Hole regions in the close-range camera frame.
    pub holes: BTreeMap<String, Region>,
    /// Marks target regions and depths as fixture values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_note: Option<String>,
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("plan is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown field(s) in strict mode: {}", .0.join(", "))]
    UnknownFields(Vec<String>),
    #[error("unsupported plan version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PlanRule {
    EmptyPlan,
    DuplicateStageId,
    NonContiguousOrdinals,
    MissingPart,
    MissingGrasp,
    MissingTarget,
    MissingHoles,
    MissingVerifyTargets,
    UnexpectedAttributes,
    UnknownHole,
    RegionOutOfRange,
    AngleOutOfRange,
    DepthOutOfRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanDiagnostic {
    /// Offending stage, or `None` for plan-level findings.
    pub stage_id: Option<String>,
    pub rule: PlanRule,
    pub message: String,
}

impl fmt::Display for PlanDiagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.stage_id {
            Some(id) => write!(f, "[{:?}] stage {}: {}", self.rule, id, self.message),
            None => write!(f, "[{:?}] {}", self.rule, self.message),
        }
    }
}

impl AssemblyPlan {
    /// Parses a plan file. In strict mode any field the schema does not know is
    /// an error; otherwise unknown fields are ignored.
    pub fn from_json(text: &str, strict: bool) -> Result<Self, PlanError> {
        let mut unknown = Vec::new();
        let de = &mut serde_json::Deserializer::from_str(text);
        let plan: AssemblyPlan = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))?;
        if strict && !unknown.is_empty() {
            return Err(PlanError::UnknownFields(unknown));
        }
        if plan.version != PLAN_SCHEMA_VERSION {
            return Err(PlanError::Version(plan.version));
        }
        Ok(plan)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn stage(&self, ordinal: u32) -> Option<&StageSpec> {
        let idx = ordinal.checked_sub(1)? as usize;
        self.stages.get(idx).filter(|s| s.ordinal == ordinal)
    }

    pub fn len(&self) -> u32 {
        self.stages.len() as u32
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// The placement stage for `part` with the highest ordinal below `before`.
    pub fn placement_of(&self, part: PartClass, before: u32) -> Option<&StageSpec> {
        self.stages
            .iter()
            .rev()
            .find(|s| s.ordinal < before && s.kind == StageKind::PartPlacement && s.part == Some(part))
    }

    /// Parts placed by stages strictly before `ordinal`.
    pub fn installed_before(&self, ordinal: u32) -> BTreeSet<PartClass> {
        self.stages
            .iter()
            .filter(|s| s.ordinal < ordinal && s.kind == StageKind::PartPlacement)
            .filter_map(|s| s.part)
            .collect()
    }
}

fn diag(out: &mut Vec<PlanDiagnostic>, stage: Option<&StageSpec>, rule: PlanRule, message: impl Into<String>) {
    out.push(PlanDiagnostic {
        stage_id: stage.map(|s| s.id.clone()),
        rule,
        message: message.into(),
    });
}

/// Checks every structural invariant of a plan. An empty result means valid.
/// Diagnostics come out in a stable order: plan-level, then stage by stage.
pub fn validate_plan(plan: &AssemblyPlan) -> Vec<PlanDiagnostic> {
    let mut out = Vec::new();
    if plan.stages.is_empty() {
        diag(&mut out, None, PlanRule::EmptyPlan, "plan has no stages");
    }
    for (id, region) in &plan.holes {
        if !region.in_range() {
            diag(&mut out, None, PlanRule::RegionOutOfRange, format!("hole {id} region outside unit square"));
        }
    }

    let mut seen = BTreeSet::new();
    for (i, s) in plan.stages.iter().enumerate() {
        if !seen.insert(s.id.as_str()) {
            diag(&mut out, Some(s), PlanRule::DuplicateStageId, "stage id is not unique");
        }
        let expected = i as u32 + 1;
        if s.ordinal != expected {
            diag(
                &mut out,
                Some(s),
                PlanRule::NonContiguousOrdinals,
                format!("ordinal {} where {} was expected", s.ordinal, expected),
            );
        }

        match s.kind {
            StageKind::PartPlacement => {
                if s.part.is_none() {
                    diag(&mut out, Some(s), PlanRule::MissingPart, "placement stage needs a part");
                }
                if s.grasp.is_none() {
                    diag(&mut out, Some(s), PlanRule::MissingGrasp, "placement stage needs a grasp");
                }
                if s.target.is_none() {
                    diag(&mut out, Some(s), PlanRule::MissingTarget, "placement stage needs a target region");
                }
            }
            StageKind::ScrewFastening => {
                if s.holes.is_empty() {
                    diag(&mut out, Some(s), PlanRule::MissingHoles, "screw stage lists no holes");
                }
            }
            StageKind::Verification => {
                if s.verify_parts.is_empty() && s.holes.is_empty() {
                    diag(
                        &mut out,
                        Some(s),
                        PlanRule::MissingVerifyTargets,
                        "verification stage checks neither parts nor holes",
                    );
                }
            }
            StageKind::Completion => {
                let extra = s.part.is_some()
                    || s.grasp.is_some()
                    || s.target.is_some()
                    || s.expected_depth_mm.is_some()
                    || s.angle.is_some()
                    || !s.holes.is_empty()
                    || !s.verify_parts.is_empty();
                if extra {
                    diag(&mut out, Some(s), PlanRule::UnexpectedAttributes, "completion stage carries checks");
                }
            }
        }

        for h in &s.holes {
            if !plan.holes.contains_key(h) {
                diag(&mut out, Some(s), PlanRule::UnknownHole, format!("hole {h} not in hole map"));
            }
        }
        if let Some(t) = &s.target {
            if !t.in_range() {
                diag(&mut out, Some(s), PlanRule::RegionOutOfRange, "target region outside unit square");
            }
        }
        if let Some(a) = &s.angle {
            let canonical = canonicalize_angle(a.expected_deg).ok() == Some(a.expected_deg);
            if !canonical || !(a.tol_deg.is_finite() && a.tol_deg > 0.0) {
                diag(&mut out, Some(s), PlanRule::AngleOutOfRange, "angle must be in [0,360) with positive tolerance");
            }
        }
        if let Some(d) = s.expected_depth_mm {
            if !(d.is_finite() && d > 0.0) {
                diag(&mut out, Some(s), PlanRule::DepthOutOfRange, "expected depth must be positive");
            }
        }
    }
    out
}

/// The bundled 21-stage hard-drive plan.
pub fn builtin_hdd_plan() -> AssemblyPlan {
    AssemblyPlan::from_json(BUILTIN_HDD_PLAN, true).expect("bundled plan parses")
}

/// Raw text of the bundled plan file.
pub fn builtin_hdd_plan_json() -> &'static str {
    BUILTIN_HDD_PLAN
}
