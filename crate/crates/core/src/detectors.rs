//! Per-criterion detection sources and the rules applied to their raw output.
//!
//! A detector is bound to a criterion through a [`DetectorBinding`]. Three kinds exist:
//! ground-truth annotations (oracle), cached external probabilities, and pixel heuristics
//! that only make sense on synthetic slides.

use std::cmp::Ordering;
use std::collections::{HashMap, VecDeque};
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::config::{EngineConfig, ThresholdTable};
use crate::error::{Error, Result};
use crate::model::{iou, CriterionKind, Detection, Rect};
use crate::tiler::PatchRef;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BindingKind {
    OracleAnnotation,
    ExternalScores,
    SyntheticHeuristic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorBinding {
    pub criterion: CriterionKind,
    pub kind: BindingKind,
    #[serde(default)]
    pub source_path: PathBuf,
}

/// Criteria that need their own detector. Small cell and brain invasion are
/// rule-based over the hypercellularity nuclei counts.
pub const BOUND_CRITERIA: [CriterionKind; 6] = [
    CriterionKind::MitoticCount,
    CriterionKind::Ki67Index,
    CriterionKind::Hypercellularity,
    CriterionKind::Necrosis,
    CriterionKind::ProminentNucleoli,
    CriterionKind::Sheeting,
];

/// Reads a bindings file (JSON array) and checks there is exactly one binding per bound
/// criterion. Relative source paths resolve against the file's directory.
pub fn load_bindings(path: &Path) -> Result<Vec<DetectorBinding>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut bindings: Vec<DetectorBinding> = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    for b in &mut bindings {
        if b.source_path.is_relative() && !b.source_path.as_os_str().is_empty() {
            b.source_path = base.join(&b.source_path);
        }
    }
    validate_bindings(&bindings)?;
    Ok(bindings)
}

pub fn validate_bindings(bindings: &[DetectorBinding]) -> Result<()> {
    for b in bindings {
        if !BOUND_CRITERIA.contains(&b.criterion) {
            return Err(Error::Validation(format!(
                "{} is derived from nuclei counts and takes no binding",
                b.criterion
            )));
        }
    }
    for c in BOUND_CRITERIA {
        match bindings.iter().filter(|b| b.criterion == c).count() {
            1 => {}
            0 => return Err(Error::Validation(format!("no binding for {c}"))),
            n => return Err(Error::Validation(format!("{n} bindings for {c}"))),
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Point {
    pub x: u32,
    pub y: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationObject {
    pub criterion: CriterionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<Rect>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Point>,
    #[serde(default)]
    pub label: String,
}

impl AnnotationObject {
    fn extent(&self) -> Option<Rect> {
        self.bbox.or_else(|| self.point.map(|p| Rect::new(p.x, p.y, 1, 1)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    pub slide_id: String,
    pub objects: Vec<AnnotationObject>,
}

/// Accepts a single annotation document or an array of them.
pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationDoc>> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(AnnotationDoc),
        Many(Vec<AnnotationDoc>),
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: OneOrMany = serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(match parsed {
        OneOrMany::One(d) => vec![d],
        OneOrMany::Many(v) => v,
    })
}

/// One line of an external score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub slide_id: String,
    pub criterion: CriterionKind,
    pub rect: Rect,
    pub prob: f64,
    #[serde(default)]
    pub saliency_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Saliency {
    Raster(GrayImage),
    Path(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawScore {
    pub patch: PatchRef,
    pub prob: f64,
    pub saliency: Option<Saliency>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleiResult {
    pub patch: PatchRef,
    pub count: u32,
    pub centroids: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub polarity: Option<Vec<Polarity>>,
}

impl NucleiResult {
    pub fn positives(&self) -> u32 {
        self.polarity
            .as_ref()
            .map_or(0, |p| p.iter().filter(|&&v| v == Polarity::Positive).count() as u32)
    }
}

enum Source {
    Oracle(HashMap<String, Vec<AnnotationObject>>),
    External(HashMap<(String, Rect), ScoreLine>),
    Heuristic,
}

/// A loaded detection source for one criterion.
pub struct Detector {
    pub binding: DetectorBinding,
    source: Source,
}

impl Detector {
    pub fn load(binding: &DetectorBinding) -> Result<Self> {
        let source = match binding.kind {
            BindingKind::OracleAnnotation => {
                let mut by_slide: HashMap<String, Vec<AnnotationObject>> = HashMap::new();
                for doc in load_annotations(&binding.source_path)? {
                    by_slide.entry(doc.slide_id).or_default().extend(
                        doc.objects.into_iter().filter(|o| o.criterion == binding.criterion),
                    );
                }
                Source::Oracle(by_slide)
            }
            BindingKind::ExternalScores => {
                let path = &binding.source_path;
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let mut map = HashMap::new();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let s: ScoreLine = serde_json::from_str(line).map_err(|e| Error::Schema {
                        path: path.clone(),
                        msg: format!("line {}: {e}", i + 1),
                    })?;
                    if !(0.0..=1.0).contains(&s.prob) {
                        return Err(Error::Schema {
                            path: path.clone(),
                            msg: format!("line {}: probability {} outside [0,1]", i + 1, s.prob),
                        });
                    }
                    if s.criterion == binding.criterion {
                        map.insert((s.slide_id.clone(), s.rect), s);
                    }
                }
                Source::External(map)
            }
            BindingKind::SyntheticHeuristic => Source::Heuristic,
        };
        Ok(Detector { binding: binding.clone(), source })
    }

    pub fn needs_pixels(&self) -> bool {
        matches!(self.source, Source::Heuristic)
    }

    /// Scores one patch. `pixels` is required only for heuristic detectors.
    pub fn score(&self, patch: &PatchRef, pixels: Option<&RgbImage>) -> Result<RawScore> {
        match &self.source {
            Source::Oracle(by_slide) => {
                let hit = by_slide
                    .get(&patch.slide_id)
                    .into_iter()
                    .flatten()
                    .filter_map(|o| o.extent())
                    .find(|r| r.intersects(&patch.rect));
                Ok(match hit {
                    Some(obj) => RawScore {
                        patch: patch.clone(),
                        prob: 1.0,
                        saliency: Some(Saliency::Raster(gaussian_saliency(&patch.rect, &obj))),
                    },
                    None => RawScore { patch: patch.clone(), prob: 0.0, saliency: None },
                })
            }
            Source::External(map) => {
                let line = map.get(&(patch.slide_id.clone(), patch.rect)).ok_or_else(|| Error::MissingScore {
                    slide_id: patch.slide_id.clone(),
                    criterion: self.binding.criterion.to_string(),
                    x: patch.rect.x,
                    y: patch.rect.y,
                    w: patch.rect.w,
                    h: patch.rect.h,
                })?;
                Ok(RawScore {
                    patch: patch.clone(),
                    prob: line.prob,
                    saliency: line.saliency_path.clone().map(Saliency::Path),
                })
            }
            Source::Heuristic => {
                let px = pixels.ok_or_else(|| Error::Contract("heuristic detector needs pixels".into()))?;
                let prob = match self.binding.criterion {
                    CriterionKind::MitoticCount => heuristic::dark_blob_score(px),
                    CriterionKind::Necrosis => heuristic::low_saturation_score(px),
                    c => return Err(Error::Unsupported(format!("no pixel heuristic for {c}"))),
                };
                Ok(RawScore { patch: patch.clone(), prob, saliency: None })
            }
        }
    }

    /// Nuclei count for a base patch; Ki-67 bindings also report polarity.
    pub fn count_nuclei(&self, patch: &PatchRef, pixels: Option<&RgbImage>) -> Result<NucleiResult> {
        let ki67 = self.binding.criterion == CriterionKind::Ki67Index;
        match &self.source {
            Source::Oracle(by_slide) => {
                let mut centroids = Vec::new();
                let mut polarity = Vec::new();
                for o in by_slide.get(&patch.slide_id).into_iter().flatten() {
                    let Some(r) = o.extent() else { continue };
                    let (cx, cy) = r.center();
                    if patch.rect.contains_point(cx, cy) {
                        centroids.push(Point { x: cx, y: cy });
                        polarity.push(if o.label.eq_ignore_ascii_case("positive") {
                            Polarity::Positive
                        } else {
                            Polarity::Negative
                        });
                    }
                }
                Ok(NucleiResult {
                    patch: patch.clone(),
                    count: centroids.len() as u32,
                    centroids,
                    polarity: ki67.then_some(polarity),
                })
            }
            Source::Heuristic => {
                let px = pixels.ok_or_else(|| Error::Contract("heuristic detector needs pixels".into()))?;
                let scale = patch.rect.w as f64 / px.width() as f64;
                let to_l0 = |(x, y): (f64, f64)| Point {
                    x: patch.rect.x + ((x * scale) as u32).min(patch.rect.w - 1),
                    y: patch.rect.y + ((y * scale) as u32).min(patch.rect.h - 1),
                };
                let mut found: Vec<(Point, Polarity)> = heuristic::blobs(px, heuristic::is_nucleus_blue)
                    .into_iter()
                    .map(|c| (to_l0(c), Polarity::Negative))
                    .collect();
                if ki67 {
                    found.extend(
                        heuristic::blobs(px, heuristic::is_nucleus_brown)
                            .into_iter()
                            .map(|c| (to_l0(c), Polarity::Positive)),
                    );
                    found.sort_by_key(|(p, _)| (p.y, p.x));
                }
                Ok(NucleiResult {
                    patch: patch.clone(),
                    count: found.len() as u32,
                    centroids: found.iter().map(|(p, _)| *p).collect(),
                    polarity: ki67.then(|| found.iter().map(|(_, q)| *q).collect()),
                })
            }
            Source::External(_) => Err(Error::Unsupported("external score files carry no nuclei counts".into())),
        }
    }
}

/// Gaussian bump over the patch, centered on the object, σ = object side / 6.
pub fn gaussian_saliency(patch: &Rect, object: &Rect) -> GrayImage {
    let sigma = (object.w.max(object.h) as f64 / 6.0).max(1.0);
    let cx = object.x as f64 + object.w as f64 / 2.0 - patch.x as f64;
    let cy = object.y as f64 + object.h as f64 / 2.0 - patch.y as f64;
    GrayImage::from_fn(patch.w, patch.h, |x, y| {
        let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
        Luma([(255.0 * (-d2 / (2.0 * sigma * sigma)).exp()).round() as u8])
    })
}

/// Pixel statistics standing in for trained models on synthetic slides. Not clinical.
pub mod heuristic {
    use super::*;

    fn luma(p: &image::Rgb<u8>) -> u32 {
        (299 * p[0] as u32 + 587 * p[1] as u32 + 114 * p[2] as u32) / 1000
    }

    /// Fraction of a compact dark blob's expected area that is present (capped at 1).
    pub fn dark_blob_score(px: &RgbImage) -> f64 {
        const BLOB_AREA: f64 = 200.0;
        let dark = px.pixels().filter(|p| luma(p) < 70).count() as f64;
        (dark / BLOB_AREA).min(1.0)
    }

    /// Share of tissue pixels that are pale and unsaturated, doubled and capped.
    pub fn low_saturation_score(px: &RgbImage) -> f64 {
        let mut tissue = 0u32;
        let mut gray = 0u32;
        for p in px.pixels() {
            if luma(p) >= 235 {
                continue;
            }
            tissue += 1;
            let (mx, mn) = (p[0].max(p[1]).max(p[2]), p[0].min(p[1]).min(p[2]));
            if mx - mn < 25 {
                gray += 1;
            }
        }
        if tissue == 0 {
            0.0
        } else {
            (2.0 * gray as f64 / tissue as f64).min(1.0)
        }
    }

    pub fn is_nucleus_blue(p: &image::Rgb<u8>) -> bool {
        p[2] as i32 - p[1] as i32 >= 60 && p[0] < 150
    }

    pub fn is_nucleus_brown(p: &image::Rgb<u8>) -> bool {
        p[0] as i32 - p[2] as i32 >= 80 && p[0] < 200
    }

    /// Centroids of 4-connected components of at least 8 pixels, in scan order.
    pub fn blobs(px: &RgbImage, mask: impl Fn(&image::Rgb<u8>) -> bool) -> Vec<(f64, f64)> {
        let (w, h) = px.dimensions();
        let mut seen = vec![false; (w * h) as usize];
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                if seen[i] || !mask(px.get_pixel(x, y)) {
                    continue;
                }
                seen[i] = true;
                queue.push_back((x, y));
                let (mut n, mut sx, mut sy) = (0u64, 0u64, 0u64);
                while let Some((cx, cy)) = queue.pop_front() {
                    n += 1;
                    sx += cx as u64;
                    sy += cy as u64;
                    let neighbors = [
                        (cx.wrapping_sub(1), cy),
                        (cx + 1, cy),
                        (cx, cy.wrapping_sub(1)),
                        (cx, cy + 1),
                    ];
                    for (nx, ny) in neighbors {
                        if nx < w && ny < h {
                            let j = (ny * w + nx) as usize;
                            if !seen[j] && mask(px.get_pixel(nx, ny)) {
                                seen[j] = true;
                                queue.push_back((nx, ny));
                            }
                        }
                    }
                }
                if n >= 8 {
                    out.push((sx as f64 / n as f64, sy as f64 / n as f64));
                }
            }
        }
        out
    }
}

/// Strict `prob > threshold` for classifier-decided criteria.
pub fn apply_threshold(criterion: CriterionKind, prob: f64, table: &ThresholdTable) -> Result<bool> {
    let t = table
        .probability(criterion)
        .ok_or_else(|| Error::Contract(format!("{criterion} has no probability threshold")))?;
    Ok(prob > t)
}

/// Canonical order: probability descending, then `(y, x, detection_id)`.
fn nms_order(a: &Detection, b: &Detection) -> Ordering {
    b.prob
        .total_cmp(&a.prob)
        .then(a.bbox.y.cmp(&b.bbox.y))
        .then(a.bbox.x.cmp(&b.bbox.x))
        .then(a.detection_id.cmp(&b.detection_id))
}

/// Greedy non-maximum suppression: keep the best box, drop every box whose IoU with a
/// kept box exceeds `iou_threshold`. Output is in canonical probability-descending order.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    detections.sort_by(nms_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(detections.len());
    for d in detections {
        if kept.iter().all(|k| iou(&k.bbox, &d.bbox) <= iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "percent", rename_all = "snake_case")]
pub enum Ki67Value {
    Percent(f64),
    NotApplicable,
}

impl Ki67Value {
    pub fn percent(&self) -> Option<f64> {
        match self {
            Ki67Value::Percent(p) => Some(*p),
            Ki67Value::NotApplicable => None,
        }
    }

    pub fn render(&self) -> String {
        match self {
            Ki67Value::Percent(p) => format!("{p:.1}%"),
            Ki67Value::NotApplicable => "n/a".into(),
        }
    }
}

/// `positive / (positive + negative) × 100`; not applicable when no nuclei were counted.
pub fn ki67_index(positive: u64, negative: u64) -> Ki67Value {
    let total = positive + negative;
    if total == 0 {
        Ki67Value::NotApplicable
    } else {
        Ki67Value::Percent(positive as f64 * 100.0 / total as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionType {
    Background,
    Brain,
    Tumor,
}

pub fn classify_region_type(nuclei_count: u32, table: &ThresholdTable) -> RegionType {
    if nuclei_count > table.tumor_min_nuclei {
        RegionType::Tumor
    } else if nuclei_count >= table.brain_range[0] && nuclei_count <= table.brain_range[1] {
        RegionType::Brain
    } else {
        RegionType::Background
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Confidence {
    High,
    Medium,
}

/// Medium between the detection threshold and `high_confidence`, High above. Criteria whose
/// threshold already reaches the High band report every detection as High.
pub fn confidence_level(prob: f64, criterion: CriterionKind, cfg: &EngineConfig) -> Result<Confidence> {
    let t = cfg
        .thresholds
        .probability(criterion)
        .ok_or_else(|| Error::Contract(format!("{criterion} has no probability threshold")))?;
    if prob <= t {
        return Err(Error::Contract(format!("{prob} is not a {criterion} detection (threshold {t})")));
    }
    Ok(if t >= cfg.high_confidence || prob >= cfg.high_confidence {
        Confidence::High
    } else {
        Confidence::Medium
    })
}
