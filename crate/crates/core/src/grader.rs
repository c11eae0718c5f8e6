//! WHO 2007 meningioma grading over per-criterion states.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CriterionKind;

/// What the AI pipeline suggests for a categorical criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suggestion {
    Present,
    Absent,
    Unconfirmed,
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusOverride {
    Found,
    NotFound,
    Uncertain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Subtype {
    #[default]
    Other,
    ClearCell,
    Chordoid,
    Papillary,
    Rhabdoid,
    FrankAnaplasia,
}

impl Subtype {
    pub const ALL: [Subtype; 6] = [
        Subtype::Other,
        Subtype::ClearCell,
        Subtype::Chordoid,
        Subtype::Papillary,
        Subtype::Rhabdoid,
        Subtype::FrankAnaplasia,
    ];

    pub fn grade(&self) -> Grade {
        match self {
            Subtype::Other => Grade::I,
            Subtype::ClearCell | Subtype::Chordoid => Grade::II,
            Subtype::Papillary | Subtype::Rhabdoid | Subtype::FrankAnaplasia => Grade::III,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Subtype::Other => "other",
            Subtype::ClearCell => "clear_cell",
            Subtype::Chordoid => "chordoid",
            Subtype::Papillary => "papillary",
            Subtype::Rhabdoid => "rhabdoid",
            Subtype::FrankAnaplasia => "frank_anaplasia",
        }
    }
}

impl std::str::FromStr for Subtype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Subtype::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown subtype `{s}`")))
    }
}

/// A user override. Which variants a criterion accepts is checked by [`validate_override`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OverrideValue {
    Status(StatusOverride),
    Subtype(Subtype),
    Percent(f64),
}

impl OverrideValue {
    /// Parses a JSON override value: a status word, a subtype name, or a number.
    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        match v {
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(OverrideValue::Percent)
                .ok_or_else(|| Error::Validation("override number is not finite".into())),
            serde_json::Value::String(s) => match s.as_str() {
                "found" => Ok(OverrideValue::Status(StatusOverride::Found)),
                "not_found" => Ok(OverrideValue::Status(StatusOverride::NotFound)),
                "uncertain" => Ok(OverrideValue::Status(StatusOverride::Uncertain)),
                other => other.parse().map(OverrideValue::Subtype),
            },
            other => Err(Error::Validation(format!("override value {other} is neither a word nor a number"))),
        }
    }
}

pub fn validate_override(criterion: CriterionKind, value: &OverrideValue) -> Result<()> {
    let ok = match (criterion, value) {
        (CriterionKind::MitoticCount, _) => {
            return Err(Error::Validation(
                "the mitotic count is adjusted through evidence actions and manual additions, not overrides".into(),
            ))
        }
        (CriterionKind::Ki67Index, OverrideValue::Percent(p)) => (0.0..=100.0).contains(p),
        (CriterionKind::Subtype, OverrideValue::Subtype(_)) => true,
        (CriterionKind::Ki67Index | CriterionKind::Subtype, _) => false,
        (_, OverrideValue::Status(_)) => true,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("{value:?} is not a valid override for {criterion}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectiveStatus {
    Present,
    Absent,
    Uncertain,
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Orange,
    Gray,
}

/// Color bar for a criterion: overrides are confirmations; AI findings turn red or
/// green only once every piece of their evidence has been reviewed.
pub fn display_color(ai: Suggestion, confirmed: bool, over: Option<StatusOverride>) -> Color {
    match over {
        Some(StatusOverride::Found) => Color::Red,
        Some(StatusOverride::NotFound) => Color::Green,
        Some(StatusOverride::Uncertain) => Color::Orange,
        None => match ai {
            Suggestion::NotApplicable => Color::Gray,
            Suggestion::Unconfirmed => Color::Orange,
            Suggestion::Present if confirmed => Color::Red,
            Suggestion::Absent if confirmed => Color::Green,
            Suggestion::Present | Suggestion::Absent => Color::Orange,
        },
    }
}

pub fn effective_status(ai: Suggestion, over: Option<StatusOverride>) -> EffectiveStatus {
    match over {
        Some(StatusOverride::Found) => EffectiveStatus::Present,
        Some(StatusOverride::NotFound) => EffectiveStatus::Absent,
        Some(StatusOverride::Uncertain) => EffectiveStatus::Uncertain,
        None => match ai {
            Suggestion::Present => EffectiveStatus::Present,
            Suggestion::Absent => EffectiveStatus::Absent,
            Suggestion::Unconfirmed => EffectiveStatus::Uncertain,
            Suggestion::NotApplicable => EffectiveStatus::NotApplicable,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionState {
    pub kind: CriterionKind,
    pub ai_suggestion: Suggestion,
    /// Mitotic count per 10 HPFs, or Ki-67 percent.
    #[serde(default)]
    pub value: Option<f64>,
    /// Every evidence item of this criterion has been reviewed.
    #[serde(default)]
    pub confirmed: bool,
    #[serde(default, rename = "override")]
    pub override_value: Option<OverrideValue>,
}

impl CriterionState {
    pub fn new(kind: CriterionKind, ai_suggestion: Suggestion) -> Self {
        CriterionState { kind, ai_suggestion, value: None, confirmed: false, override_value: None }
    }

    fn status_override(&self) -> Option<StatusOverride> {
        match self.override_value {
            Some(OverrideValue::Status(s)) => Some(s),
            _ => None,
        }
    }

    pub fn status(&self) -> EffectiveStatus {
        effective_status(self.ai_suggestion, self.status_override())
    }

    pub fn color(&self) -> Color {
        match (self.kind, self.override_value) {
            // Ki-67 has no abnormal cutoff: a reviewed or typed-in value is simply confirmed.
            (CriterionKind::Ki67Index, Some(OverrideValue::Percent(_))) => Color::Green,
            (CriterionKind::Ki67Index, _) if self.ai_suggestion == Suggestion::NotApplicable => Color::Gray,
            (CriterionKind::Ki67Index, _) if self.confirmed => Color::Green,
            (CriterionKind::Ki67Index, _) => Color::Orange,
            (CriterionKind::Subtype, Some(OverrideValue::Subtype(s))) => {
                if s == Subtype::Other {
                    Color::Green
                } else {
                    Color::Red
                }
            }
            _ => display_color(self.ai_suggestion, self.confirmed, self.status_override()),
        }
    }

    /// Value shown in the criteria list; overrides replace the AI number.
    pub fn display_value(&self) -> Option<CriterionValue> {
        match (self.kind, self.override_value) {
            (_, Some(OverrideValue::Percent(p))) => Some(CriterionValue::Number(p)),
            (CriterionKind::Subtype, Some(OverrideValue::Subtype(s))) => Some(CriterionValue::Text(s.as_str().into())),
            (CriterionKind::Subtype, _) => Some(CriterionValue::Text(Subtype::Other.as_str().into())),
            _ => self.value.map(CriterionValue::Number),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CriterionValue {
    Number(f64),
    Text(String),
}

/// The inputs of one grading decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriteriaSnapshot {
    pub mitotic: CriterionState,
    pub ki67: CriterionState,
    /// In [`CriterionKind::FEATURES`] order.
    pub features: Vec<CriterionState>,
    pub brain_invasion: CriterionState,
    pub subtype: CriterionState,
}

impl CriteriaSnapshot {
    /// A snapshot with nothing found: zero mitoses, every feature absent, subtype other.
    pub fn baseline() -> Self {
        let mut mitotic = CriterionState::new(CriterionKind::MitoticCount, Suggestion::Absent);
        mitotic.value = Some(0.0);
        CriteriaSnapshot {
            mitotic,
            ki67: CriterionState::new(CriterionKind::Ki67Index, Suggestion::NotApplicable),
            features: CriterionKind::FEATURES
                .iter()
                .map(|&k| CriterionState::new(k, Suggestion::Absent))
                .collect(),
            brain_invasion: CriterionState::new(CriterionKind::BrainInvasion, Suggestion::Absent),
            subtype: CriterionState::new(CriterionKind::Subtype, Suggestion::NotApplicable),
        }
    }

    pub fn mitotic_count(&self) -> u64 {
        self.mitotic.value.unwrap_or(0.0).max(0.0) as u64
    }

    pub fn subtype(&self) -> Subtype {
        match self.subtype.override_value {
            Some(OverrideValue::Subtype(s)) => s,
            _ => Subtype::Other,
        }
    }

    pub fn state(&self, kind: CriterionKind) -> &CriterionState {
        match kind {
            CriterionKind::MitoticCount => &self.mitotic,
            CriterionKind::Ki67Index => &self.ki67,
            CriterionKind::BrainInvasion => &self.brain_invasion,
            CriterionKind::Subtype => &self.subtype,
            k => self.features.iter().find(|s| s.kind == k).expect("snapshot holds all five features"),
        }
    }

    pub fn state_mut(&mut self, kind: CriterionKind) -> &mut CriterionState {
        match kind {
            CriterionKind::MitoticCount => &mut self.mitotic,
            CriterionKind::Ki67Index => &mut self.ki67,
            CriterionKind::BrainInvasion => &mut self.brain_invasion,
            CriterionKind::Subtype => &mut self.subtype,
            k => self.features.iter_mut().find(|s| s.kind == k).expect("snapshot holds all five features"),
        }
    }

    /// Sets a feature's AI suggestion; a test and binding convenience.
    pub fn with(mut self, kind: CriterionKind, ai: Suggestion) -> Self {
        self.state_mut(kind).ai_suggestion = ai;
        self
    }

    pub fn with_mitoses(mut self, n: u64) -> Self {
        self.mitotic.value = Some(n as f64);
        self.mitotic.ai_suggestion = if n >= 4 { Suggestion::Present } else { Suggestion::Absent };
        self
    }

    pub fn with_subtype(mut self, s: Subtype) -> Self {
        self.subtype.override_value = Some(OverrideValue::Subtype(s));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let kinds: Vec<CriterionKind> = self.features.iter().map(|s| s.kind).collect();
        if kinds != CriterionKind::FEATURES {
            return Err(Error::Validation("snapshot must hold the five features in order".into()));
        }
        if self.mitotic.kind != CriterionKind::MitoticCount
            || self.ki67.kind != CriterionKind::Ki67Index
            || self.brain_invasion.kind != CriterionKind::BrainInvasion
            || self.subtype.kind != CriterionKind::Subtype
        {
            return Err(Error::Validation("snapshot slots hold the wrong criteria".into()));
        }
        Ok(())
    }

    pub fn present_features(&self) -> Vec<CriterionKind> {
        self.features
            .iter()
            .filter(|s| s.status() == EffectiveStatus::Present)
            .map(|s| s.kind)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Grade {
    I,
    II,
    III,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiredRule {
    pub id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub kind: CriterionKind,
    pub status: EffectiveStatus,
    pub color: Color,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<CriterionValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeResult {
    pub grade: Grade,
    pub main_contributing: Option<CriterionKind>,
    pub fired_rules: Vec<FiredRule>,
    pub criteria: Vec<CriterionSummary>,
}

struct Rule {
    id: &'static str,
    grade: Grade,
    criterion: CriterionKind,
    text: String,
}

/// Satisfied rules in contribution precedence: mitoses, subtype, brain invasion, features.
fn fired(s: &CriteriaSnapshot) -> Vec<Rule> {
    let mut rules = Vec::new();
    let m = s.mitotic_count();
    if m >= 20 {
        rules.push(Rule {
            id: "mitoses_ge_20",
            grade: Grade::III,
            criterion: CriterionKind::MitoticCount,
            text: format!("{m} mitoses per 10 HPF (20 or more)"),
        });
    } else if m >= 4 {
        rules.push(Rule {
            id: "mitoses_4_to_19",
            grade: Grade::II,
            criterion: CriterionKind::MitoticCount,
            text: format!("{m} mitoses per 10 HPF (4 to 19)"),
        });
    }
    let sub = s.subtype();
    match sub.grade() {
        Grade::III => rules.push(Rule {
            id: "subtype_grade_iii",
            grade: Grade::III,
            criterion: CriterionKind::Subtype,
            text: format!("{} histological subtype", sub.as_str()),
        }),
        Grade::II => rules.push(Rule {
            id: "subtype_grade_ii",
            grade: Grade::II,
            criterion: CriterionKind::Subtype,
            text: format!("{} histological subtype", sub.as_str()),
        }),
        Grade::I => {}
    }
    if s.brain_invasion.status() == EffectiveStatus::Present {
        rules.push(Rule {
            id: "brain_invasion",
            grade: Grade::II,
            criterion: CriterionKind::BrainInvasion,
            text: "brain invasion observed".into(),
        });
    }
    let present = s.present_features();
    if present.len() >= 3 {
        let names: Vec<&str> = present.iter().map(|k| k.as_str()).collect();
        rules.push(Rule {
            id: "three_of_five_features",
            grade: Grade::II,
            criterion: present[0],
            text: format!("{} of 5 histological features present: {}", present.len(), names.join(", ")),
        });
    }
    rules
}

/// Grades a snapshot. Total and pure; Ki-67 never takes part.
pub fn compute_grade(s: &CriteriaSnapshot) -> GradeResult {
    let rules = fired(s);
    let grade = rules.iter().map(|r| r.grade).max().unwrap_or(Grade::I);
    let main_contributing = rules.iter().find(|r| r.grade == grade).map(|r| r.criterion);
    let mut criteria: Vec<CriterionSummary> = Vec::with_capacity(9);
    let mut push = |st: &CriterionState, status: EffectiveStatus| {
        criteria.push(CriterionSummary { kind: st.kind, status, color: st.color(), value: st.display_value() })
    };
    push(&s.mitotic, s.mitotic.status());
    push(&s.ki67, ki67_status(&s.ki67));
    for f in &s.features {
        push(f, f.status());
    }
    push(&s.brain_invasion, s.brain_invasion.status());
    let sub_status = if s.subtype() == Subtype::Other { EffectiveStatus::Absent } else { EffectiveStatus::Present };
    push(&s.subtype, sub_status);
    GradeResult {
        grade,
        main_contributing,
        fired_rules: rules.into_iter().map(|r| FiredRule { id: r.id.into(), text: r.text }).collect(),
        criteria,
    }
}

fn ki67_status(st: &CriterionState) -> EffectiveStatus {
    match st.override_value {
        Some(OverrideValue::Percent(_)) => EffectiveStatus::Present,
        _ => st.status(),
    }
}

/// Sets (or with `None`, clears) an override and regrades.
pub fn apply_override(
    snapshot: &CriteriaSnapshot,
    criterion: CriterionKind,
    value: Option<OverrideValue>,
) -> Result<(CriteriaSnapshot, GradeResult)> {
    if let Some(v) = &value {
        validate_override(criterion, v)?;
    } else if criterion == CriterionKind::MitoticCount {
        return Err(Error::Validation("the mitotic count has no override to clear".into()));
    }
    let mut next = snapshot.clone();
    next.state_mut(criterion).override_value = value;
    let g = compute_grade(&next);
    Ok((next, g))
}
