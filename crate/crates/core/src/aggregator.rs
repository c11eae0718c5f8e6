//! Spatial aggregation of detections and nuclei counts.
//!
//! Detections are binned by bbox center into a grid of square cells (HPF/5 by
//! default). Window queries go through a prefix-sum table, so every placement of the
//! 1-HPF focal window and the 2×5-HPF region window is scored in O(1).

use std::collections::HashMap;

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, ThresholdTable};
use crate::detectors::{classify_region_type, confidence_level, ki67_index, Confidence, RegionType};
use crate::error::{Error, Result};
use crate::model::{CriterionKind, Detection, Rect, ReviewStatus};
use crate::tiler::PatchRef;

/// A window in cell units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellRect {
    pub col: u32,
    pub row: u32,
    pub cols: u32,
    pub rows: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountGrid {
    pub slide_id: String,
    pub cell_px: u32,
    /// Level-0 area covered by the grid; cell (0,0) starts at its origin.
    pub origin: Rect,
    pub cols: u32,
    pub rows: u32,
    /// Row-major.
    pub cells: Vec<u64>,
}

impl CountGrid {
    pub fn zeros(slide_id: &str, origin: Rect, cell_px: u32) -> Self {
        let cols = origin.w.div_ceil(cell_px);
        let rows = origin.h.div_ceil(cell_px);
        CountGrid {
            slide_id: slide_id.to_string(),
            cell_px,
            origin,
            cols,
            rows,
            cells: vec![0; (cols * rows) as usize],
        }
    }

    /// Grid from explicit cell values, used by tests and the Python bindings.
    pub fn from_cells(rows: u32, cols: u32, cells: Vec<u64>, cell_px: u32) -> Result<Self> {
        if cells.len() != (rows * cols) as usize {
            return Err(Error::Validation(format!("{} cells for a {rows}x{cols} grid", cells.len())));
        }
        Ok(CountGrid {
            slide_id: String::new(),
            cell_px,
            origin: Rect::new(0, 0, (cols * cell_px).max(1), (rows * cell_px).max(1)),
            cols,
            rows,
            cells,
        })
    }

    pub fn get(&self, col: u32, row: u32) -> u64 {
        self.cells[(row * self.cols + col) as usize]
    }

    /// Adds `weight` to the cell containing the point; points outside the grid are ignored.
    pub fn add_point(&mut self, x: u32, y: u32, weight: u64) -> bool {
        if !self.origin.contains_point(x, y) {
            return false;
        }
        let col = (x - self.origin.x) / self.cell_px;
        let row = (y - self.origin.y) / self.cell_px;
        self.cells[(row * self.cols + col) as usize] += weight;
        true
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().sum()
    }

    pub fn cell_rect_to_px(&self, c: &CellRect) -> Rect {
        Rect::new(
            self.origin.x + c.col * self.cell_px,
            self.origin.y + c.row * self.cell_px,
            c.cols * self.cell_px,
            c.rows * self.cell_px,
        )
    }

    pub fn integral(&self) -> IntegralGrid {
        IntegralGrid::new(self)
    }
}

/// Whether a detection counts toward aggregates under the configured uncertain policy.
pub fn is_effective(status: ReviewStatus, count_uncertain: bool) -> bool {
    match status {
        ReviewStatus::Unreviewed | ReviewStatus::Approved => true,
        ReviewStatus::Uncertain => count_uncertain,
        ReviewStatus::Declined => false,
    }
}

/// Bins effective detections of one slide by bbox center.
pub fn build_count_grid(
    slide_id: &str,
    area: Rect,
    cell_px: u32,
    detections: &[Detection],
    count_uncertain: bool,
) -> CountGrid {
    let mut g = CountGrid::zeros(slide_id, area, cell_px);
    for d in detections {
        if d.slide_id == slide_id && is_effective(d.status, count_uncertain) {
            let (cx, cy) = d.bbox.center();
            g.add_point(cx, cy, 1);
        }
    }
    g
}

/// Bins weighted points (nuclei centroids, per-patch counts) into a grid.
pub fn build_weighted_grid(
    slide_id: &str,
    area: Rect,
    cell_px: u32,
    items: impl IntoIterator<Item = (u32, u32, u64)>,
) -> CountGrid {
    let mut g = CountGrid::zeros(slide_id, area, cell_px);
    for (x, y, w) in items {
        g.add_point(x, y, w);
    }
    g
}

/// Prefix sums with a zero row and column: `table[r][c]` = sum of cells above-left of (c, r).
#[derive(Clone, Debug, PartialEq)]
pub struct IntegralGrid {
    pub cols: u32,
    pub rows: u32,
    table: Vec<u64>,
}

impl IntegralGrid {
    pub fn new(g: &CountGrid) -> Self {
        let stride = (g.cols + 1) as usize;
        let mut table = vec![0u64; stride * (g.rows + 1) as usize];
        for r in 0..g.rows as usize {
            let mut row_sum = 0;
            for c in 0..g.cols as usize {
                row_sum += g.cells[r * g.cols as usize + c];
                table[(r + 1) * stride + c + 1] = table[r * stride + c + 1] + row_sum;
            }
        }
        IntegralGrid { cols: g.cols, rows: g.rows, table }
    }

    fn at(&self, col: u32, row: u32) -> u64 {
        self.table[(row * (self.cols + 1) + col) as usize]
    }

    pub fn window_sum(&self, w: &CellRect) -> Result<u64> {
        if w.cols == 0 || w.rows == 0 || w.col + w.cols > self.cols || w.row + w.rows > self.rows {
            return Err(Error::Range(format!("window {w:?} outside {}x{} grid", self.cols, self.rows)));
        }
        Ok(self.sum_unchecked(w.col, w.row, w.cols, w.rows))
    }

    fn sum_unchecked(&self, col: u32, row: u32, cols: u32, rows: u32) -> u64 {
        self.at(col + cols, row + rows) + self.at(col, row) - self.at(col + cols, row) - self.at(col, row + rows)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    #[serde(rename = "focal_1hpf")]
    Focal1Hpf,
    #[serde(rename = "region_10hpf")]
    Region10Hpf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSample {
    pub slide_id: String,
    pub kind: SampleKind,
    pub rect: Rect,
    pub cells: CellRect,
    /// Count for mitoses, percent for Ki-67 (0 when not applicable).
    pub value: f64,
    #[serde(default)]
    pub member_detections: Vec<String>,
    /// The window had to be clipped to a grid smaller than it.
    #[serde(default)]
    pub degenerate: bool,
    #[serde(default)]
    pub not_applicable: bool,
}

impl RegionSample {
    fn new(g: &CountGrid, kind: SampleKind, cells: CellRect, value: f64, degenerate: bool) -> Self {
        RegionSample {
            slide_id: g.slide_id.clone(),
            kind,
            rect: g.cell_rect_to_px(&cells),
            cells,
            value,
            member_detections: Vec::new(),
            degenerate,
            not_applicable: false,
        }
    }

    /// Records the effective detections whose centers fall inside the sample.
    pub fn with_members(mut self, detections: &[Detection], count_uncertain: bool) -> Self {
        self.member_detections = detections
            .iter()
            .filter(|d| d.slide_id == self.slide_id && is_effective(d.status, count_uncertain))
            .filter(|d| {
                let (cx, cy) = d.bbox.center();
                self.rect.contains_point(cx, cy)
            })
            .map(|d| d.detection_id.clone())
            .collect();
        self
    }
}

/// Window shapes as (rows, cols), clipped to the grid. Returns the shape and whether it was clipped.
fn clip_shape(g: &CountGrid, rows: u32, cols: u32) -> ((u32, u32), bool) {
    let r = rows.min(g.rows);
    let c = cols.min(g.cols);
    ((r, c), r != rows || c != cols)
}

/// Best window over the given shapes in scan order; a later window must be strictly
/// better to win, which yields the shape-then-row-major tie-break.
fn argmax_windows(
    g: &CountGrid,
    shapes: &[(u32, u32)],
    mut better: impl FnMut(&CellRect, Option<&CellRect>) -> bool,
) -> Option<CellRect> {
    let mut best: Option<CellRect> = None;
    for &(rows, cols) in shapes {
        if rows == 0 || cols == 0 || rows > g.rows || cols > g.cols {
            continue;
        }
        for row in 0..=g.rows - rows {
            for col in 0..=g.cols - cols {
                let w = CellRect { col, row, cols, rows };
                if better(&w, best.as_ref()) {
                    best = Some(w);
                }
            }
        }
    }
    best
}

fn highest_count(g: &CountGrid, kind: SampleKind, shapes: &[(u32, u32)]) -> RegionSample {
    let mut degenerate = false;
    let clipped: Vec<(u32, u32)> = shapes
        .iter()
        .map(|&(r, c)| {
            let (s, d) = clip_shape(g, r, c);
            degenerate |= d;
            s
        })
        .collect();
    if g.cols == 0 || g.rows == 0 {
        return RegionSample::new(g, kind, CellRect { col: 0, row: 0, cols: 0, rows: 0 }, 0.0, true);
    }
    let ig = g.integral();
    let mut best_sum = 0u64;
    let best = argmax_windows(g, &clipped, |w, cur| {
        let s = ig.sum_unchecked(w.col, w.row, w.cols, w.rows);
        if cur.is_none() || s > best_sum {
            best_sum = s;
            true
        } else {
            false
        }
    })
    .expect("non-empty grid has at least one clipped window");
    RegionSample::new(g, kind, best, best_sum as f64, degenerate)
}

/// The single HPF (`hpf_cells²` window, 1-cell stride) with the highest count.
pub fn highest_focal_region(g: &CountGrid, hpf_cells: u32) -> RegionSample {
    highest_count(g, SampleKind::Focal1Hpf, &[(hpf_cells, hpf_cells)])
}

/// The 2×5-HPF block with the highest count, searched in both orientations
/// (2 rows × 5 columns of HPFs first, then 5 × 2).
pub fn highest_region(g: &CountGrid, hpf_cells: u32) -> RegionSample {
    highest_count(
        g,
        SampleKind::Region10Hpf,
        &[(2 * hpf_cells, 5 * hpf_cells), (5 * hpf_cells, 2 * hpf_cells)],
    )
}

/// Window shapes `(rows, cols)` for a sample kind.
pub fn sample_shapes(kind: SampleKind, hpf_cells: u32) -> Vec<(u32, u32)> {
    match kind {
        SampleKind::Focal1Hpf => vec![(hpf_cells, hpf_cells)],
        SampleKind::Region10Hpf => vec![(2 * hpf_cells, 5 * hpf_cells), (5 * hpf_cells, 2 * hpf_cells)],
    }
}

/// Highest Ki-67 index over windows whose nuclei total reaches `min_total`.
/// Ratios are compared exactly by cross-multiplication.
pub fn highest_ki67_region(
    pos: &CountGrid,
    total: &CountGrid,
    kind: SampleKind,
    hpf_cells: u32,
    min_total: u64,
) -> Result<RegionSample> {
    if pos.cols != total.cols || pos.rows != total.rows {
        return Err(Error::Validation("Ki-67 grids are not congruent".into()));
    }
    let mut degenerate = false;
    let shapes: Vec<(u32, u32)> = sample_shapes(kind, hpf_cells)
        .into_iter()
        .map(|(r, c)| {
            let (s, d) = clip_shape(total, r, c);
            degenerate |= d;
            s
        })
        .collect();
    let (ip, it) = (pos.integral(), total.integral());
    let mut best_ratio = (0u64, 1u64);
    let best = argmax_windows(total, &shapes, |w, cur| {
        let t = it.sum_unchecked(w.col, w.row, w.cols, w.rows);
        if t < min_total || t == 0 {
            return false;
        }
        let p = ip.sum_unchecked(w.col, w.row, w.cols, w.rows);
        let wins = cur.is_none() || (p as u128) * (best_ratio.1 as u128) > (best_ratio.0 as u128) * (t as u128);
        if wins {
            best_ratio = (p, t);
        }
        wins
    });
    Ok(match best {
        Some(cells) => {
            let value = ki67_index(best_ratio.0, best_ratio.1 - best_ratio.0).percent().unwrap_or(0.0);
            RegionSample::new(total, kind, cells, value, degenerate)
        }
        None => {
            let mut s = RegionSample::new(total, kind, CellRect { col: 0, row: 0, cols: 0, rows: 0 }, 0.0, degenerate);
            s.not_applicable = true;
            s
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub cell_px: u32,
    pub origin: crate::detectors::Point,
    pub max_value: f64,
    pub criterion: CriterionKind,
}

/// One pixel per cell, linear `[0, max] → [0, 255]`.
pub fn render_heatmap(g: &CountGrid, criterion: CriterionKind) -> (GrayImage, HeatmapMeta) {
    let max = g.cells.iter().copied().max().unwrap_or(0);
    let img = GrayImage::from_fn(g.cols.max(1), g.rows.max(1), |x, y| {
        if max == 0 || x >= g.cols || y >= g.rows {
            Luma([0])
        } else {
            Luma([((g.get(x, y) as f64 * 255.0 / max as f64).round()) as u8])
        }
    });
    let meta = HeatmapMeta {
        cell_px: g.cell_px,
        origin: crate::detectors::Point { x: g.origin.x, y: g.origin.y },
        max_value: max as f64,
        criterion,
    };
    (img, meta)
}

fn by_count_then_row_major(a: &(PatchRef, u32), b: &(PatchRef, u32)) -> std::cmp::Ordering {
    b.1.cmp(&a.1)
        .then(a.0.rect.y.cmp(&b.0.rect.y))
        .then(a.0.rect.x.cmp(&b.0.rect.x))
        .then(a.0.slide_id.cmp(&b.0.slide_id))
}

/// Top-k patches by nuclei count, then only those above the small-cell minimum.
pub fn recommend_small_cell(counts: &[(PatchRef, u32)], table: &ThresholdTable) -> Vec<(PatchRef, u32)> {
    let mut sorted = counts.to_vec();
    sorted.sort_by(by_count_then_row_major);
    sorted.truncate(table.small_cell_top_k);
    sorted.retain(|(_, c)| *c > table.small_cell_min_nuclei);
    sorted
}

pub fn hypercellularity_hotspots(counts: &[(PatchRef, u32)], k: usize) -> Vec<(PatchRef, u32)> {
    let mut sorted = counts.to_vec();
    sorted.sort_by(by_count_then_row_major);
    sorted.truncate(k);
    sorted
}

/// Tumor patches that touch (8-adjacency) at least one brain patch, ranked by count.
pub fn brain_boundary_patches(counts: &[(PatchRef, u32)], table: &ThresholdTable) -> Vec<(PatchRef, u32)> {
    let types: HashMap<(&str, u32, u32), RegionType> = counts
        .iter()
        .map(|(p, c)| ((p.slide_id.as_str(), p.rect.x, p.rect.y), classify_region_type(*c, table)))
        .collect();
    let mut out: Vec<(PatchRef, u32)> = counts
        .iter()
        .filter(|(p, c)| {
            if classify_region_type(*c, table) != RegionType::Tumor {
                return false;
            }
            let (sx, sy) = (p.rect.w as i64, p.rect.h as i64);
            (-1i64..=1).any(|dy| {
                (-1i64..=1).any(|dx| {
                    let nx = p.rect.x as i64 + dx * sx;
                    let ny = p.rect.y as i64 + dy * sy;
                    (dx, dy) != (0, 0)
                        && nx >= 0
                        && ny >= 0
                        && types.get(&(p.slide_id.as_str(), nx as u32, ny as u32)) == Some(&RegionType::Brain)
                })
            })
        })
        .cloned()
        .collect();
    out.sort_by(by_count_then_row_major);
    out
}

/// One sampled piece of evidence, registered to the slide through three nested boxes:
/// `rect` (the finding) ⊂ `context_rect` (the patch shown as thumbnail) ⊂ `hpf_rect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvidenceItem {
    pub evidence_id: String,
    pub criterion: CriterionKind,
    pub slide_id: String,
    #[serde(default)]
    pub detection_id: Option<String>,
    pub rect: Rect,
    pub context_rect: Rect,
    pub hpf_rect: Rect,
    #[serde(default)]
    pub prob: Option<f64>,
    #[serde(default)]
    pub confidence: Option<Confidence>,
    /// Nuclei count or Ki-67 percent for patch-level evidence.
    #[serde(default)]
    pub value: Option<f64>,
    #[serde(default)]
    pub saliency_ref: Option<String>,
    pub status: ReviewStatus,
}

/// Square of side `side` centered on `inner`, shifted (not shrunk) to keep a non-negative origin.
fn centered_square(inner: &Rect, side: u32) -> Rect {
    let side = side.max(inner.w).max(inner.h);
    let (cx, cy) = (inner.x as i64 + inner.w as i64 / 2, inner.y as i64 + inner.h as i64 / 2);
    let x = (cx - side as i64 / 2).max(0).min(inner.x as i64) as u32;
    let y = (cy - side as i64 / 2).max(0).min(inner.y as i64) as u32;
    Rect::new(x, y, side, side)
}

/// Nested boxes for a finding: (context patch, HPF).
pub fn nested_boxes(rect: &Rect, context_px: u32, hpf_px: u32) -> (Rect, Rect) {
    let context = centered_square(rect, context_px);
    let hpf = centered_square(&context, hpf_px);
    (context, hpf)
}

/// Level-0 sizes used to register evidence on a slide.
#[derive(Clone, Copy, Debug)]
pub struct Registration {
    pub context_px: u32,
    pub hpf_px: u32,
}

pub fn patch_evidence_id(criterion: CriterionKind, patch: &PatchRef) -> String {
    format!("{}:{}:{}_{}", patch.slide_id, criterion.tag(), patch.rect.x, patch.rect.y)
}

fn detection_item(d: &Detection, reg: &Registration, cfg: &EngineConfig) -> EvidenceItem {
    let (context_rect, hpf_rect) = nested_boxes(&d.bbox, reg.context_px, reg.hpf_px);
    EvidenceItem {
        evidence_id: d.detection_id.clone(),
        criterion: d.criterion,
        slide_id: d.slide_id.clone(),
        detection_id: Some(d.detection_id.clone()),
        rect: d.bbox,
        context_rect,
        hpf_rect,
        prob: Some(d.prob),
        confidence: confidence_level(d.prob, d.criterion, cfg).ok(),
        value: None,
        saliency_ref: d.saliency_ref.clone(),
        status: d.status,
    }
}

fn patch_item(criterion: CriterionKind, p: &PatchRef, value: f64, reg: &Registration) -> EvidenceItem {
    let (context_rect, hpf_rect) = nested_boxes(&p.rect, reg.context_px, reg.hpf_px);
    EvidenceItem {
        evidence_id: patch_evidence_id(criterion, p),
        criterion,
        slide_id: p.slide_id.clone(),
        detection_id: None,
        rect: p.rect,
        context_rect,
        hpf_rect,
        prob: None,
        confidence: None,
        value: Some(value),
        saliency_ref: None,
        status: ReviewStatus::Unreviewed,
    }
}

/// Inputs to evidence sampling, by sampling rule.
pub enum EvidenceSource<'a> {
    /// Mitoses: every detection inside the highest region or the highest focal region.
    Regional { detections: &'a [Detection], regions: &'a [RegionSample] },
    /// Ki-67 patches `(patch, positive, total)` inside the sampled regions.
    Ki67 { patches: &'a [(PatchRef, u32, u32)], regions: &'a [RegionSample] },
    /// Presence criteria: detections ranked by probability.
    Presence { detections: &'a [Detection] },
    /// Patch recommendations already in rank order, with their nuclei counts.
    Ranked { patches: &'a [(PatchRef, u32)] },
}

fn prob_desc(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.prob
        .total_cmp(&a.prob)
        .then(a.bbox.y.cmp(&b.bbox.y))
        .then(a.bbox.x.cmp(&b.bbox.x))
        .then(a.detection_id.cmp(&b.detection_id))
}

/// Ordered evidence for one criterion. `n` caps presence and ranked lists; regional
/// evidence lists every member so that the count stays reviewable.
pub fn sample_evidence(
    criterion: CriterionKind,
    source: EvidenceSource<'_>,
    n: usize,
    reg: &Registration,
    cfg: &EngineConfig,
) -> Vec<EvidenceItem> {
    match source {
        EvidenceSource::Regional { detections, regions } => {
            let mut members: Vec<&Detection> = detections
                .iter()
                .filter(|d| {
                    let (cx, cy) = d.bbox.center();
                    regions
                        .iter()
                        .any(|r| !r.not_applicable && r.slide_id == d.slide_id && r.rect.contains_point(cx, cy))
                })
                .collect();
            members.sort_by(|a, b| prob_desc(a, b));
            members.into_iter().map(|d| detection_item(d, reg, cfg)).collect()
        }
        EvidenceSource::Ki67 { patches, regions } => {
            let mut inside: Vec<&(PatchRef, u32, u32)> = patches
                .iter()
                .filter(|(p, _, _)| {
                    let (cx, cy) = p.rect.center();
                    regions
                        .iter()
                        .any(|r| !r.not_applicable && r.slide_id == p.slide_id && r.rect.contains_point(cx, cy))
                })
                .collect();
            let pct = |&&(_, pos, tot): &&(PatchRef, u32, u32)| {
                ki67_index(pos as u64, (tot - pos) as u64).percent().unwrap_or(-1.0)
            };
            inside.sort_by(|a, b| {
                pct(b).total_cmp(&pct(a)).then(a.0.rect.y.cmp(&b.0.rect.y)).then(a.0.rect.x.cmp(&b.0.rect.x))
            });
            inside
                .into_iter()
                .map(|e| patch_item(criterion, &e.0, pct(&e).max(0.0), reg))
                .collect()
        }
        EvidenceSource::Presence { detections } => {
            let mut sorted: Vec<&Detection> = detections.iter().collect();
            sorted.sort_by(|a, b| prob_desc(a, b));
            sorted.into_iter().take(n).map(|d| detection_item(d, reg, cfg)).collect()
        }
        EvidenceSource::Ranked { patches } => patches
            .iter()
            .take(n)
            .map(|(p, c)| patch_item(criterion, p, *c as f64, reg))
            .collect(),
    }
}
