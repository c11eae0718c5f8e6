//! Case reports: the grading summary as JSON plus a plain-text rendering.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::aggregator::SampleKind;
use crate::error::{Error, Result};
use crate::grader::{Color, CriterionState, CriterionValue, FiredRule, Grade, OverrideValue, StatusOverride, Suggestion};
use crate::model::{CriterionKind, Rect, ReviewStatus, Stain};
use crate::pipeline::load_processed;
use crate::review::{derive, DerivedState, ProcessedCase, ReviewState};
use crate::session::SessionManager;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCriterion {
    pub kind: CriterionKind,
    /// `suggested-present`, `confirmed-absent`, `overridden-found`, `not-applicable`, ...
    pub status: String,
    pub color: Color,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<CriterionValue>,
    pub ai_suggestion: Suggestion,
    #[serde(default, rename = "override", skip_serializing_if = "Option::is_none")]
    pub override_value: Option<OverrideValue>,
    pub evidence_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRegion {
    pub criterion: CriterionKind,
    pub slide_id: String,
    pub kind: SampleKind,
    pub rect: Rect,
    pub value: f64,
    pub degenerate: bool,
    pub not_applicable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEvidence {
    pub evidence_id: String,
    pub criterion: CriterionKind,
    pub slide_id: String,
    pub rect: Rect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prob: Option<f64>,
    pub status: ReviewStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub case_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    /// Number of review actions folded into this report.
    pub seq: u64,
    pub grade: Grade,
    pub main_contributing: Option<CriterionKind>,
    pub fired_rules: Vec<FiredRule>,
    pub criteria: Vec<ReportCriterion>,
    pub regions: Vec<ReportRegion>,
    pub evidence: Vec<ReportEvidence>,
}

pub fn status_label(s: &CriterionState) -> String {
    match &s.override_value {
        Some(OverrideValue::Status(o)) => match o {
            StatusOverride::Found => "overridden-found",
            StatusOverride::NotFound => "overridden-not-found",
            StatusOverride::Uncertain => "overridden-uncertain",
        }
        .into(),
        Some(_) => "overridden".into(),
        None => match (s.ai_suggestion, s.confirmed) {
            (Suggestion::Present, true) => "confirmed-present",
            (Suggestion::Present, false) => "suggested-present",
            (Suggestion::Absent, true) => "confirmed-absent",
            (Suggestion::Absent, false) => "suggested-absent",
            (Suggestion::Unconfirmed, _) => "unconfirmed",
            (Suggestion::NotApplicable, _) => "not-applicable",
        }
        .into(),
    }
}

pub fn build_report(pc: &ProcessedCase, derived: &DerivedState, session_id: Option<&str>, seq: u64) -> Report {
    let criteria = derived
        .grade
        .criteria
        .iter()
        .map(|c| {
            let st = derived.snapshot.state(c.kind);
            ReportCriterion {
                kind: c.kind,
                status: status_label(st),
                color: c.color,
                value: c.value.clone(),
                ai_suggestion: st.ai_suggestion,
                override_value: st.override_value,
                evidence_count: derived.evidence_for(c.kind).len(),
            }
        })
        .collect();
    let regions = derived
        .regions
        .iter()
        .map(|r| ReportRegion {
            criterion: match pc.slide(&r.slide_id).map(|s| s.stain) {
                Some(Stain::Ki67) => CriterionKind::Ki67Index,
                _ => CriterionKind::MitoticCount,
            },
            slide_id: r.slide_id.clone(),
            kind: r.kind,
            rect: r.rect,
            value: r.value,
            degenerate: r.degenerate,
            not_applicable: r.not_applicable,
        })
        .collect();
    let evidence = derived
        .evidence
        .values()
        .flatten()
        .map(|e| ReportEvidence {
            evidence_id: e.evidence_id.clone(),
            criterion: e.criterion,
            slide_id: e.slide_id.clone(),
            rect: e.rect,
            prob: e.prob,
            status: e.status,
        })
        .collect();
    Report {
        case_id: pc.case_id.clone(),
        session_id: session_id.map(str::to_string),
        seq,
        grade: derived.grade.grade,
        main_contributing: derived.grade.main_contributing,
        fired_rules: derived.grade.fired_rules.clone(),
        criteria,
        regions,
        evidence,
    }
}

fn fmt_value(v: &Option<CriterionValue>) -> String {
    match v {
        Some(CriterionValue::Number(n)) => format!("{n}"),
        Some(CriterionValue::Text(t)) => t.clone(),
        None => "-".into(),
    }
}

pub fn render_text(r: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "Case {}", r.case_id);
    if let Some(sid) = &r.session_id {
        let _ = writeln!(s, "Session {sid} ({} actions)", r.seq);
    }
    let _ = writeln!(s, "Suggested grade: WHO {:?}", r.grade);
    let _ = writeln!(s, "Main contributing criterion: {}", r.main_contributing.map_or("none", |c| c.as_str()));
    for f in &r.fired_rules {
        let _ = writeln!(s, "  rule {}: {}", f.id, f.text);
    }
    let _ = writeln!(s, "\nCriteria:");
    for c in &r.criteria {
        let arrow = if Some(c.kind) == r.main_contributing { "->" } else { "  " };
        let _ = writeln!(
            s,
            "{arrow} {:<20} {:<22} {:<7} value={:<8} evidence={}",
            c.kind.as_str(),
            c.status,
            format!("{:?}", c.color).to_lowercase(),
            fmt_value(&c.value),
            c.evidence_count
        );
    }
    let _ = writeln!(s, "\nRegions:");
    for g in &r.regions {
        let _ = writeln!(
            s,
            "  {} {} {:?} {} value={}{}",
            g.slide_id,
            g.criterion.as_str(),
            g.kind,
            g.rect,
            g.value,
            if g.not_applicable { " (not applicable)" } else if g.degenerate { " (clipped)" } else { "" }
        );
    }
    let _ = writeln!(s, "\nEvidence:");
    for e in &r.evidence {
        let prob = e.prob.map_or(String::new(), |p| format!(" p={p:.3}"));
        let _ = writeln!(s, "  [{}] {} {} {}{prob} {:?}", e.criterion.tag(), e.evidence_id, e.slide_id, e.rect, e.status);
    }
    s
}

/// Builds the report of a processed case, folding in a session's actions when given,
/// and writes `report.json` and `report.txt` into `out`.
pub fn cmd_report(case_dir: &Path, session_dir: Option<&Path>, out: &Path) -> Result<Report> {
    let pc = load_processed(case_dir)?;
    let report = match session_dir {
        None => build_report(&pc, &derive(&pc, &ReviewState::default())?, None, 0),
        Some(dir) => {
            let sid = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Validation(format!("bad session directory {}", dir.display())))?;
            let root = dir.parent().unwrap_or(Path::new("."));
            let state = SessionManager::new(root)?.load(sid, Arc::new(pc.clone()))?;
            if state.case_id != pc.case_id {
                return Err(Error::Validation(format!(
                    "session {sid} belongs to case {} not {}",
                    state.case_id, pc.case_id
                )));
            }
            build_report(&pc, &state.derived, Some(sid), state.seq)
        }
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    let p = out.join("report.json");
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = out.join("report.txt");
    std::fs::write(&p, render_text(&report)).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}
