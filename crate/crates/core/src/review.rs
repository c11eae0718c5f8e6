//! Processed-case data and the derived review state.
//!
//! [`derive`] is the single function from (pipeline output, human input) to everything
//! the reviewer sees: criteria states, evidence lists, sampled regions and the grade.
//! Sessions fold their action log into a [`ReviewState`] and call it after every action.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aggregator::{
    brain_boundary_patches, build_count_grid, highest_focal_region, highest_ki67_region, highest_region,
    hypercellularity_hotspots, is_effective, recommend_small_cell, sample_evidence, CountGrid, EvidenceItem,
    EvidenceSource, Registration, RegionSample, SampleKind,
};
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::grader::{
    compute_grade, validate_override, CriteriaSnapshot, CriterionState, GradeResult, OverrideValue, Suggestion,
};
use crate::model::{CriterionKind, Detection, Rect, ReviewStatus, Stain};
use crate::tiler::PatchRef;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchCount {
    pub patch: PatchRef,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ki67Patch {
    pub patch: PatchRef,
    pub positive: u32,
    pub total: u32,
}

/// Per-slide pipeline output that does not change under review.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideAnalysis {
    pub slide_id: String,
    pub stain: Stain,
    pub mpp: f64,
    pub bounds: Rect,
    pub cell_px: u32,
    pub hpf_px: u32,
    /// Level-0 side of the base patch, used as the evidence context box.
    pub patch_px: u32,
    /// Nuclei count of every foreground base patch (H&E) or Ki-67 patch.
    #[serde(default)]
    pub nuclei: Vec<PatchCount>,
    /// Nuclei centroids binned per cell (all nuclei on Ki-67 slides).
    pub nuclei_grid: CountGrid,
    #[serde(default)]
    pub ki67: Vec<Ki67Patch>,
    #[serde(default)]
    pub ki67_positive_grid: Option<CountGrid>,
}

impl SlideAnalysis {
    fn registration(&self) -> Registration {
        Registration { context_px: self.patch_px, hpf_px: self.hpf_px }
    }

    fn counts(&self) -> Vec<(PatchRef, u32)> {
        self.nuclei.iter().map(|p| (p.patch.clone(), p.count)).collect()
    }
}

/// Everything the offline pipeline produces for a case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProcessedCase {
    pub case_id: String,
    /// Manifest the case was processed from; slide pyramids resolve against it.
    pub manifest_path: String,
    pub config: EngineConfig,
    pub slides: Vec<SlideAnalysis>,
    /// All thresholded, suppressed detections in canonical order.
    pub detections: Vec<Detection>,
}

impl ProcessedCase {
    pub fn slide(&self, slide_id: &str) -> Option<&SlideAnalysis> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn he_slides(&self) -> impl Iterator<Item = &SlideAnalysis> {
        self.slides.iter().filter(|s| s.stain == Stain::He)
    }

    pub fn ki67_slides(&self) -> impl Iterator<Item = &SlideAnalysis> {
        self.slides.iter().filter(|s| s.stain == Stain::Ki67)
    }
}

/// Human input accumulated by a session.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReviewState {
    pub statuses: BTreeMap<String, ReviewStatus>,
    pub overrides: BTreeMap<CriterionKind, OverrideValue>,
    pub manual: Vec<Detection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedState {
    pub case_id: String,
    pub snapshot: CriteriaSnapshot,
    pub grade: GradeResult,
    /// Highest and focal regions: mitoses per H&E slide, Ki-67 per Ki-67 slide.
    pub regions: Vec<RegionSample>,
    pub evidence: BTreeMap<CriterionKind, Vec<EvidenceItem>>,
}

impl DerivedState {
    pub fn evidence_for(&self, criterion: CriterionKind) -> &[EvidenceItem] {
        self.evidence.get(&criterion).map_or(&[], |v| v.as_slice())
    }

    pub fn find_evidence(&self, evidence_id: &str) -> Option<&EvidenceItem> {
        self.evidence.values().flatten().find(|e| e.evidence_id == evidence_id)
    }
}

/// Criteria whose findings are localized detections.
pub const DETECTION_CRITERIA: [CriterionKind; 4] = [
    CriterionKind::MitoticCount,
    CriterionKind::Necrosis,
    CriterionKind::ProminentNucleoli,
    CriterionKind::Sheeting,
];

/// Pipeline detections plus manual additions, with review statuses applied.
pub fn current_detections(pc: &ProcessedCase, rs: &ReviewState) -> Vec<Detection> {
    pc.detections
        .iter()
        .chain(rs.manual.iter())
        .map(|d| {
            let mut d = d.clone();
            if let Some(s) = rs.statuses.get(&d.detection_id) {
                d.status = *s;
            }
            d
        })
        .collect()
}

fn status_of(rs: &ReviewState, id: &str) -> ReviewStatus {
    rs.statuses.get(id).copied().unwrap_or_default()
}

fn confirmed(items: &[EvidenceItem]) -> bool {
    !items.is_empty() && items.iter().all(|e| e.status != ReviewStatus::Unreviewed)
}

fn by_prob_desc(a: &EvidenceItem, b: &EvidenceItem) -> std::cmp::Ordering {
    b.prob
        .unwrap_or(0.0)
        .total_cmp(&a.prob.unwrap_or(0.0))
        .then(b.value.unwrap_or(0.0).total_cmp(&a.value.unwrap_or(0.0)))
}

/// Samples evidence slide by slide and merges, keeping each slide's own order for ties.
fn merged(mut per_slide: Vec<Vec<EvidenceItem>>, cap: Option<usize>) -> Vec<EvidenceItem> {
    if per_slide.len() == 1 {
        let mut only = per_slide.pop().unwrap();
        if let Some(n) = cap {
            only.truncate(n);
        }
        return only;
    }
    let mut all: Vec<EvidenceItem> = per_slide.into_iter().flatten().collect();
    all.sort_by(by_prob_desc);
    if let Some(n) = cap {
        all.truncate(n);
    }
    all
}

/// Applies review statuses to patch-level evidence, which carries no detection.
fn with_statuses(mut items: Vec<EvidenceItem>, rs: &ReviewState) -> Vec<EvidenceItem> {
    for it in &mut items {
        if it.detection_id.is_none() {
            it.status = status_of(rs, &it.evidence_id);
        }
    }
    items
}

/// The reviewer-facing state for a processed case under the given human input.
pub fn derive(pc: &ProcessedCase, rs: &ReviewState) -> Result<DerivedState> {
    let cfg = &pc.config;
    let cu = cfg.count_uncertain;
    let dets = current_detections(pc, rs);
    let hpf_cells = cfg.cells_per_hpf;
    let mut snapshot = CriteriaSnapshot::baseline();
    let mut regions = Vec::new();
    let mut evidence: BTreeMap<CriterionKind, Vec<EvidenceItem>> = BTreeMap::new();

    // Mitoses: highest 10-HPF region per H&E slide, case value is the maximum.
    let mitoses: Vec<Detection> = dets.iter().filter(|d| d.criterion == CriterionKind::MitoticCount).cloned().collect();
    let mut count = 0f64;
    let mut mit_items = Vec::new();
    for s in pc.he_slides() {
        let g = build_count_grid(&s.slide_id, s.bounds, s.cell_px, &mitoses, cu);
        let region = highest_region(&g, hpf_cells).with_members(&mitoses, cu);
        let focal = highest_focal_region(&g, hpf_cells).with_members(&mitoses, cu);
        count = count.max(region.value);
        let slide_regions = [region, focal];
        let slide_dets: Vec<Detection> = mitoses.iter().filter(|d| d.slide_id == s.slide_id).cloned().collect();
        mit_items.push(sample_evidence(
            CriterionKind::MitoticCount,
            EvidenceSource::Regional { detections: &slide_dets, regions: &slide_regions },
            cfg.evidence_n,
            &s.registration(),
            cfg,
        ));
        regions.extend(slide_regions);
    }
    let mit_items = merged(mit_items, None);
    snapshot.mitotic.value = Some(count);
    snapshot.mitotic.ai_suggestion = if count >= 4.0 { Suggestion::Present } else { Suggestion::Absent };
    snapshot.mitotic.confirmed = confirmed(&mit_items);
    evidence.insert(CriterionKind::MitoticCount, mit_items);

    // Presence criteria: any effective detection.
    for crit in [CriterionKind::Necrosis, CriterionKind::ProminentNucleoli, CriterionKind::Sheeting] {
        let mut per_slide = Vec::new();
        let mut present = false;
        for s in pc.he_slides() {
            let ds: Vec<Detection> =
                dets.iter().filter(|d| d.criterion == crit && d.slide_id == s.slide_id).cloned().collect();
            present |= ds.iter().any(|d| is_effective(d.status, cu));
            per_slide.push(sample_evidence(
                crit,
                EvidenceSource::Presence { detections: &ds },
                cfg.evidence_n,
                &s.registration(),
                cfg,
            ));
        }
        let items = merged(per_slide, Some(cfg.evidence_n));
        let st = snapshot.state_mut(crit);
        st.ai_suggestion = if present { Suggestion::Present } else { Suggestion::Absent };
        st.confirmed = confirmed(&items);
        evidence.insert(crit, items);
    }

    // Nuclei-count criteria.
    let mut sc_items = Vec::new();
    let mut hyp_items = Vec::new();
    let mut bi_items = Vec::new();
    let mut any_foreground = false;
    for s in pc.he_slides() {
        let counts = s.counts();
        any_foreground |= !counts.is_empty();
        let reg = s.registration();
        let recs = recommend_small_cell(&counts, &cfg.thresholds);
        sc_items.push(with_statuses(
            sample_evidence(CriterionKind::SmallCell, EvidenceSource::Ranked { patches: &recs }, recs.len(), &reg, cfg),
            rs,
        ));
        let hot = hypercellularity_hotspots(&counts, cfg.hotspot_k);
        hyp_items.push(with_statuses(
            sample_evidence(CriterionKind::Hypercellularity, EvidenceSource::Ranked { patches: &hot }, hot.len(), &reg, cfg),
            rs,
        ));
        let boundary = brain_boundary_patches(&counts, &cfg.thresholds);
        bi_items.push(with_statuses(
            sample_evidence(CriterionKind::BrainInvasion, EvidenceSource::Ranked { patches: &boundary }, cfg.evidence_n, &reg, cfg),
            rs,
        ));
    }
    let sc_items = merged(sc_items, None);
    let hyp_items = merged(hyp_items, Some(cfg.hotspot_k));
    let bi_items = merged(bi_items, Some(cfg.evidence_n));

    let sc = snapshot.state_mut(CriterionKind::SmallCell);
    sc.ai_suggestion = if sc_items.iter().any(|e| is_effective(e.status, cu)) {
        Suggestion::Present
    } else {
        Suggestion::Absent
    };
    sc.confirmed = confirmed(&sc_items);
    let hyp = snapshot.state_mut(CriterionKind::Hypercellularity);
    hyp.ai_suggestion = if any_foreground { Suggestion::Unconfirmed } else { Suggestion::NotApplicable };
    hyp.confirmed = confirmed(&hyp_items);
    snapshot.brain_invasion.ai_suggestion = if bi_items.iter().any(|e| is_effective(e.status, cu)) {
        Suggestion::Unconfirmed
    } else {
        Suggestion::Absent
    };
    snapshot.brain_invasion.confirmed = confirmed(&bi_items);
    evidence.insert(CriterionKind::SmallCell, sc_items);
    evidence.insert(CriterionKind::Hypercellularity, hyp_items);
    evidence.insert(CriterionKind::BrainInvasion, bi_items);

    // Ki-67: hotspot (focal) index, the maximum over Ki-67 slides.
    let mut ki_value: Option<f64> = None;
    let mut ki_items = Vec::new();
    for s in pc.ki67_slides() {
        let Some(pos) = &s.ki67_positive_grid else { continue };
        let region = highest_ki67_region(pos, &s.nuclei_grid, SampleKind::Region10Hpf, hpf_cells, cfg.ki67_min_total)?;
        let focal = highest_ki67_region(pos, &s.nuclei_grid, SampleKind::Focal1Hpf, hpf_cells, cfg.ki67_min_total)?;
        if !focal.not_applicable {
            ki_value = Some(ki_value.map_or(focal.value, |v: f64| v.max(focal.value)));
        }
        let patches: Vec<(PatchRef, u32, u32)> =
            s.ki67.iter().map(|k| (k.patch.clone(), k.positive, k.total)).collect();
        let slide_regions = [region, focal];
        ki_items.push(with_statuses(
            sample_evidence(
                CriterionKind::Ki67Index,
                EvidenceSource::Ki67 { patches: &patches, regions: &slide_regions },
                cfg.evidence_n,
                &s.registration(),
                cfg,
            ),
            rs,
        ));
        regions.extend(slide_regions);
    }
    let ki_items = merged(ki_items, None);
    snapshot.ki67.value = ki_value;
    snapshot.ki67.ai_suggestion = if ki_value.is_some() { Suggestion::Present } else { Suggestion::NotApplicable };
    snapshot.ki67.confirmed = confirmed(&ki_items);
    evidence.insert(CriterionKind::Ki67Index, ki_items);

    for (crit, value) in &rs.overrides {
        validate_override(*crit, value)?;
        snapshot.state_mut(*crit).override_value = Some(*value);
    }
    let grade = compute_grade(&snapshot);
    Ok(DerivedState { case_id: pc.case_id.clone(), snapshot, grade, regions, evidence })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceVerb {
    Approve,
    Decline,
    Uncertain,
}

impl EvidenceVerb {
    pub fn status(&self) -> ReviewStatus {
        match self {
            EvidenceVerb::Approve => ReviewStatus::Approved,
            EvidenceVerb::Decline => ReviewStatus::Declined,
            EvidenceVerb::Uncertain => ReviewStatus::Uncertain,
        }
    }
}

/// A review action as submitted by a client; the service adds sequence, actor and time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum ActionBody {
    EvidenceAction {
        evidence_id: String,
        action: EvidenceVerb,
    },
    Override {
        criterion: String,
        value: serde_json::Value,
    },
    ClearOverride {
        criterion: String,
    },
    ManualAdd {
        slide_id: String,
        #[serde(default)]
        criterion: Option<String>,
        x: u32,
        y: u32,
        #[serde(default)]
        w: Option<u32>,
        #[serde(default)]
        h: Option<u32>,
    },
}

/// Side of a manually added box when the client gives none.
pub const MANUAL_BOX_PX: u32 = 64;

pub fn parse_criterion(s: &str) -> Result<CriterionKind> {
    if let Ok(k) = s.parse() {
        return Ok(k);
    }
    let flat: String = s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_lowercase();
    CriterionKind::ALL
        .into_iter()
        .find(|k| k.as_str().to_lowercase() == flat)
        .ok_or_else(|| Error::Validation(format!("unknown criterion `{s}`")))
}

/// Every evidence id an action may refer to.
pub fn known_evidence_ids(pc: &ProcessedCase, rs: &ReviewState, derived: &DerivedState) -> BTreeSet<String> {
    pc.detections
        .iter()
        .chain(rs.manual.iter())
        .map(|d| d.detection_id.clone())
        .chain(derived.evidence.values().flatten().map(|e| e.evidence_id.clone()))
        .collect()
}

/// Validates an action against the current state and returns the next review state.
/// On error nothing is changed.
pub fn apply_action(
    pc: &ProcessedCase,
    rs: &ReviewState,
    derived: &DerivedState,
    body: &ActionBody,
    seq: u64,
) -> Result<ReviewState> {
    let mut next = rs.clone();
    match body {
        ActionBody::EvidenceAction { evidence_id, action } => {
            if !known_evidence_ids(pc, rs, derived).contains(evidence_id) {
                return Err(Error::NotFound(format!("evidence `{evidence_id}`")));
            }
            next.statuses.insert(evidence_id.clone(), action.status());
        }
        ActionBody::Override { criterion, value } => {
            let crit = parse_criterion(criterion)?;
            let v = OverrideValue::from_json(value)?;
            validate_override(crit, &v)?;
            next.overrides.insert(crit, v);
        }
        ActionBody::ClearOverride { criterion } => {
            let crit = parse_criterion(criterion)?;
            if crit == CriterionKind::MitoticCount {
                return Err(Error::Validation("the mitotic count has no override to clear".into()));
            }
            next.overrides.remove(&crit);
        }
        ActionBody::ManualAdd { slide_id, criterion, x, y, w, h } => {
            let crit = criterion.as_deref().map(parse_criterion).transpose()?.unwrap_or(CriterionKind::MitoticCount);
            if !DETECTION_CRITERIA.contains(&crit) {
                return Err(Error::Validation(format!("{crit} findings cannot be added by hand")));
            }
            let slide = pc
                .slide(slide_id)
                .filter(|s| s.stain == Stain::He)
                .ok_or_else(|| Error::Validation(format!("no H&E slide `{slide_id}` in this case")))?;
            let bbox = Rect::new(*x, *y, w.unwrap_or(MANUAL_BOX_PX), h.unwrap_or(MANUAL_BOX_PX));
            bbox.validate()?;
            if !slide.bounds.contains(&bbox) {
                return Err(Error::Validation(format!("manual box {bbox} outside slide `{slide_id}`")));
            }
            next.manual.push(Detection {
                detection_id: format!("manual-{seq}"),
                slide_id: slide_id.clone(),
                criterion: crit,
                bbox,
                prob: 1.0,
                saliency_ref: None,
                status: ReviewStatus::Approved,
            });
        }
    }
    Ok(next)
}

/// Snapshot of one criterion for reports: its state plus evidence counts.
pub fn criterion_state<'a>(d: &'a DerivedState, kind: CriterionKind) -> &'a CriterionState {
    d.snapshot.state(kind)
}

/// Count grid behind a criterion's heatmap on one slide, under the current review state.
pub fn criterion_grid(pc: &ProcessedCase, rs: &ReviewState, slide_id: &str, criterion: CriterionKind) -> Result<CountGrid> {
    let s = pc.slide(slide_id).ok_or_else(|| Error::NotFound(format!("slide `{slide_id}`")))?;
    match criterion {
        CriterionKind::MitoticCount | CriterionKind::Necrosis | CriterionKind::ProminentNucleoli | CriterionKind::Sheeting => {
            let ds: Vec<Detection> = current_detections(pc, rs).into_iter().filter(|d| d.criterion == criterion).collect();
            Ok(build_count_grid(slide_id, s.bounds, s.cell_px, &ds, pc.config.count_uncertain))
        }
        CriterionKind::Hypercellularity | CriterionKind::SmallCell if s.stain == Stain::He => Ok(s.nuclei_grid.clone()),
        CriterionKind::Ki67Index => s
            .ki67_positive_grid
            .clone()
            .ok_or_else(|| Error::NotFound(format!("no Ki-67 grid on slide `{slide_id}`"))),
        _ => Err(Error::NotFound(format!("no heatmap for {criterion} on slide `{slide_id}`"))),
    }
}

/// Default slide for a criterion's heatmap: the first slide of the matching stain.
pub fn default_heatmap_slide(pc: &ProcessedCase, criterion: CriterionKind) -> Option<&SlideAnalysis> {
    if criterion == CriterionKind::Ki67Index {
        pc.ki67_slides().next()
    } else {
        pc.he_slides().next()
    }
}
