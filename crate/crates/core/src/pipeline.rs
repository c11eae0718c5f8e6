//! Offline processing: tiles → detectors → thresholds/NMS → grids → initial grade.
//!
//! Patch work fans out over a dedicated thread pool; results are collected in patch
//! stream order, so outputs do not depend on the worker count.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, RgbImage};
use rayon::prelude::*;

use crate::aggregator::{build_weighted_grid, render_heatmap, CountGrid};
use crate::config::EngineConfig;
use crate::detectors::{
    apply_threshold, load_bindings, nms, validate_bindings, Detector, NucleiResult, Saliency,
};
use crate::error::{Error, Result};
use crate::model::{um_to_px, CriterionKind, Detection, Rect, ReviewStatus, Stain};
use crate::review::{
    criterion_grid, derive, DerivedState, Ki67Patch, PatchCount, ProcessedCase, ReviewState, SlideAnalysis,
};
use crate::tiler::{
    candidate_patches, encode_png_gray, is_background, open_case, resize_patch, sub_tiles, PatchFamily, PatchRef,
    PyramidSlide,
};

/// A detection before NMS, with its saliency raster if the detector produced one.
struct Candidate {
    det: Detection,
    saliency: Option<Saliency>,
}

struct BaseResult {
    nuclei: NucleiResult,
    candidates: Vec<Candidate>,
}

/// Saliency rasters of kept detections, keyed by the file name they are written under.
pub type SaliencyStore = Vec<(String, GrayImage)>;

pub struct ProcessOutput {
    pub processed: ProcessedCase,
    pub saliency: SaliencyStore,
}

fn at_patch(p: &PatchRef, e: Error) -> Error {
    Error::AtPatch { slide_id: p.slide_id.clone(), x: p.rect.x, y: p.rect.y, source: Box::new(e) }
}

/// Crop of `sub` out of the raster `img` that covers `parent` at some scale.
fn crop(img: &RgbImage, parent: &Rect, sub: &Rect) -> RgbImage {
    let s = img.width() as f64 / parent.w as f64;
    let x = ((sub.x - parent.x) as f64 * s).round() as u32;
    let y = ((sub.y - parent.y) as f64 * s).round() as u32;
    let w = ((sub.w as f64 * s).round() as u32).clamp(1, img.width() - x);
    let h = ((sub.h as f64 * s).round() as u32).clamp(1, img.height() - y);
    imageops::crop_imm(img, x, y, w, h).to_image()
}

fn saliency_file(detection_id: &str) -> String {
    let safe: String = detection_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
    format!("saliency/{safe}.png")
}

struct Detectors(HashMap<CriterionKind, Detector>);

impl Detectors {
    fn get(&self, c: CriterionKind) -> &Detector {
        &self.0[&c]
    }

    fn score_into(
        &self,
        criterion: CriterionKind,
        patch: &PatchRef,
        pixels: impl FnOnce() -> RgbImage,
        cfg: &EngineConfig,
        out: &mut Vec<Candidate>,
    ) -> Result<()> {
        let d = self.get(criterion);
        let px = d.needs_pixels().then(pixels);
        let raw = d.score(patch, px.as_ref())?;
        if apply_threshold(criterion, raw.prob, &cfg.thresholds)? {
            out.push(Candidate {
                det: Detection {
                    detection_id: Detection::canonical_id(&patch.slide_id, criterion, &patch.rect),
                    slide_id: patch.slide_id.clone(),
                    criterion,
                    bbox: patch.rect,
                    prob: raw.prob,
                    saliency_ref: None,
                    status: ReviewStatus::Unreviewed,
                },
                saliency: raw.saliency,
            });
        }
        Ok(())
    }
}

fn analyze_base(slide: &PyramidSlide, p: &PatchRef, dets: &Detectors, cfg: &EngineConfig) -> Result<Option<BaseResult>> {
    let img = slide.read_patch(p)?;
    if is_background(&img) {
        return Ok(None);
    }
    let mpp = slide.meta.mpp;
    let mut candidates = Vec::new();
    for sub in sub_tiles(p, PatchFamily::Mitosis, mpp)? {
        dets.score_into(CriterionKind::MitoticCount, &sub, || crop(&img, &p.rect, &sub.rect), cfg, &mut candidates)?;
    }
    for sub in sub_tiles(p, PatchFamily::Nucleoli, mpp)? {
        dets.score_into(CriterionKind::ProminentNucleoli, &sub, || crop(&img, &p.rect, &sub.rect), cfg, &mut candidates)?;
    }
    dets.score_into(CriterionKind::Necrosis, p, || img.clone(), cfg, &mut candidates)?;
    let nuclei = dets.get(CriterionKind::Hypercellularity).count_nuclei(p, Some(&img))?;
    Ok(Some(BaseResult { nuclei, candidates }))
}

fn analyze_sheeting(slide: &PyramidSlide, p: &PatchRef, dets: &Detectors, cfg: &EngineConfig) -> Result<Vec<Candidate>> {
    let img = slide.read_patch(p)?;
    let mut out = Vec::new();
    if is_background(&img) {
        return Ok(out);
    }
    let target = p.family.spec().resize_to.unwrap_or(img.width());
    let resized = resize_patch(&img, target)?;
    dets.score_into(CriterionKind::Sheeting, p, || resized, cfg, &mut out)?;
    Ok(out)
}

fn analyze_ki67(slide: &PyramidSlide, p: &PatchRef, dets: &Detectors) -> Result<Option<NucleiResult>> {
    let img = slide.read_patch(p)?;
    if is_background(&img) {
        return Ok(None);
    }
    dets.get(CriterionKind::Ki67Index).count_nuclei(p, Some(&img)).map(Some)
}

fn par_patches<T: Send>(
    pool: &rayon::ThreadPool,
    patches: &[PatchRef],
    f: impl Fn(&PatchRef) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    pool.install(|| patches.par_iter().map(|p| f(p).map_err(|e| at_patch(p, e))).collect())
}

/// Keeps NMS survivors per criterion and records their saliency rasters.
fn suppress(
    candidates: Vec<Candidate>,
    iou: f64,
    saliency: &mut SaliencyStore,
) -> Vec<Detection> {
    let mut rasters: HashMap<String, Saliency> = HashMap::new();
    let mut dets = Vec::new();
    for c in candidates {
        if let Some(s) = c.saliency {
            rasters.insert(c.det.detection_id.clone(), s);
        }
        dets.push(c.det);
    }
    let mut kept = nms(dets, iou);
    for d in &mut kept {
        match rasters.remove(&d.detection_id) {
            Some(Saliency::Raster(img)) => {
                let name = saliency_file(&d.detection_id);
                d.saliency_ref = Some(name.clone());
                saliency.push((name, img));
            }
            Some(Saliency::Path(p)) => d.saliency_ref = Some(p),
            None => {}
        }
    }
    kept
}

fn grid_geometry(cfg: &EngineConfig, mpp: f64) -> Result<(u32, u32)> {
    let hpf_px = um_to_px(cfg.hpf_um, mpp)?;
    let cell_px = um_to_px(cfg.cell_um(), mpp)?;
    if cell_px == 0 || cell_px * cfg.cells_per_hpf != hpf_px {
        return Err(Error::Validation(format!(
            "grid cell of {cell_px} px does not divide the {hpf_px}-px HPF into {} cells",
            cfg.cells_per_hpf
        )));
    }
    Ok((hpf_px, cell_px))
}

/// Runs the whole pipeline over a case. `workers` sizes the patch thread pool.
pub fn process_case(manifest_path: &Path, bindings_path: &Path, cfg: &EngineConfig, workers: usize) -> Result<ProcessOutput> {
    cfg.validate()?;
    let case = open_case(manifest_path)?;
    let bindings = load_bindings(bindings_path)?;
    validate_bindings(&bindings)?;
    let dets = Detectors(
        bindings
            .iter()
            .map(|b| Detector::load(b).map(|d| (b.criterion, d)))
            .collect::<Result<HashMap<_, _>>>()?,
    );
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Validation(format!("cannot start {workers} workers: {e}")))?;

    let mut slides = Vec::new();
    let mut detections = Vec::new();
    let mut saliency = SaliencyStore::new();
    for slide in &case.slides {
        let meta = &slide.meta;
        let (hpf_px, cell_px) = grid_geometry(cfg, meta.mpp)?;
        let bounds = meta.bounds();
        match meta.stain {
            Stain::He => {
                let base = candidate_patches(meta, PatchFamily::HeBase, &meta.nodes)?;
                let results = par_patches(&pool, &base, |p| analyze_base(slide, p, &dets, cfg))?;
                let sheet = candidate_patches(meta, PatchFamily::Sheeting, &meta.nodes)?;
                let sheet_results = par_patches(&pool, &sheet, |p| analyze_sheeting(slide, p, &dets, cfg))?;

                let mut candidates = Vec::new();
                let mut nuclei = Vec::new();
                for r in results.into_iter().flatten() {
                    candidates.extend(r.candidates);
                    nuclei.push(r.nuclei);
                }
                candidates.extend(sheet_results.into_iter().flatten());
                for crit in [
                    CriterionKind::MitoticCount,
                    CriterionKind::Necrosis,
                    CriterionKind::ProminentNucleoli,
                    CriterionKind::Sheeting,
                ] {
                    let (owned, rest): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.det.criterion == crit);
                    candidates = rest;
                    detections.extend(suppress(owned, cfg.nms_iou, &mut saliency));
                }
                let nuclei_grid = build_weighted_grid(
                    &meta.slide_id,
                    bounds,
                    cell_px,
                    nuclei.iter().flat_map(|n| n.centroids.iter().map(|c| (c.x, c.y, 1))),
                );
                slides.push(SlideAnalysis {
                    slide_id: meta.slide_id.clone(),
                    stain: Stain::He,
                    mpp: meta.mpp,
                    bounds,
                    cell_px,
                    hpf_px,
                    patch_px: PatchFamily::HeBase.spec().footprint(meta.mpp)?.0,
                    nuclei: nuclei.into_iter().map(|n| PatchCount { count: n.count, patch: n.patch }).collect(),
                    nuclei_grid,
                    ki67: Vec::new(),
                    ki67_positive_grid: None,
                });
            }
            Stain::Ki67 => {
                let patches = candidate_patches(meta, PatchFamily::Ki67, &meta.nodes)?;
                let results: Vec<NucleiResult> =
                    par_patches(&pool, &patches, |p| analyze_ki67(slide, p, &dets))?.into_iter().flatten().collect();
                let mut all = CountGrid::zeros(&meta.slide_id, bounds, cell_px);
                let mut pos = all.clone();
                for r in &results {
                    let pol = r.polarity.as_deref().unwrap_or(&[]);
                    for (i, c) in r.centroids.iter().enumerate() {
                        all.add_point(c.x, c.y, 1);
                        if pol.get(i) == Some(&crate::detectors::Polarity::Positive) {
                            pos.add_point(c.x, c.y, 1);
                        }
                    }
                }
                slides.push(SlideAnalysis {
                    slide_id: meta.slide_id.clone(),
                    stain: Stain::Ki67,
                    mpp: meta.mpp,
                    bounds,
                    cell_px,
                    hpf_px,
                    patch_px: PatchFamily::Ki67.spec().footprint(meta.mpp)?.0,
                    nuclei: results.iter().map(|r| PatchCount { patch: r.patch.clone(), count: r.count }).collect(),
                    nuclei_grid: all,
                    ki67: results
                        .iter()
                        .map(|r| Ki67Patch { patch: r.patch.clone(), positive: r.positives(), total: r.count })
                        .collect(),
                    ki67_positive_grid: Some(pos),
                });
            }
        }
    }

    let manifest_abs = std::fs::canonicalize(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    Ok(ProcessOutput {
        processed: ProcessedCase {
            case_id: case.manifest.case_id.clone(),
            manifest_path: manifest_abs.to_string_lossy().into_owned(),
            config: cfg.clone(),
            slides,
            detections,
        },
        saliency,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretty(value: &impl serde::Serialize) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Criteria that get a heatmap file per slide of the matching stain.
const HEATMAPS: [(Stain, CriterionKind); 6] = [
    (Stain::He, CriterionKind::MitoticCount),
    (Stain::He, CriterionKind::Necrosis),
    (Stain::He, CriterionKind::ProminentNucleoli),
    (Stain::He, CriterionKind::Sheeting),
    (Stain::He, CriterionKind::Hypercellularity),
    (Stain::Ki67, CriterionKind::Ki67Index),
];

pub fn heatmap_paths(out: &Path, slide_id: &str, criterion: CriterionKind) -> (PathBuf, PathBuf) {
    let stem = format!("{slide_id}_{}", criterion.tag());
    (out.join("heatmaps").join(format!("{stem}.png")), out.join("heatmaps").join(format!("{stem}.json")))
}

/// Writes every output file of a processed case and returns its initial derived state.
pub fn write_outputs(out: &Path, output: &ProcessOutput) -> Result<DerivedState> {
    let pc = &output.processed;
    for sub in ["saliency", "heatmaps"] {
        let d = out.join(sub);
        if d.exists() {
            std::fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut processed = serde_json::to_vec(pc)?;
    processed.push(b'\n');
    write(&out.join("processed.json"), &processed)?;
    let mut lines = Vec::new();
    for d in &pc.detections {
        lines.extend(serde_json::to_vec(d)?);
        lines.push(b'\n');
    }
    write(&out.join("detections.jsonl"), &lines)?;
    for (name, img) in &output.saliency {
        write(&out.join(name), &encode_png_gray(img)?)?;
    }
    let review = ReviewState::default();
    let derived = derive(pc, &review)?;
    write(&out.join("grade.json"), &pretty(&derived.grade)?)?;
    write(&out.join("regions.json"), &pretty(&derived.regions)?)?;
    write(&out.join("evidence.json"), &pretty(&derived.evidence)?)?;
    for s in &pc.slides {
        for (stain, crit) in HEATMAPS {
            if s.stain != stain {
                continue;
            }
            let grid = criterion_grid(pc, &review, &s.slide_id, crit)?;
            let (img, meta) = render_heatmap(&grid, crit);
            let (png, json) = heatmap_paths(out, &s.slide_id, crit);
            write(&png, &encode_png_gray(&img)?)?;
            write(&json, &pretty(&meta)?)?;
        }
    }
    Ok(derived)
}

/// `process` end to end: run, write, return the initial state.
pub fn cmd_process(
    manifest: &Path,
    bindings: &Path,
    out: &Path,
    cfg: &EngineConfig,
    workers: usize,
) -> Result<(ProcessedCase, DerivedState)> {
    let output = process_case(manifest, bindings, cfg, workers)?;
    let derived = write_outputs(out, &output)?;
    Ok((output.processed, derived))
}

pub fn load_processed(case_dir: &Path) -> Result<ProcessedCase> {
    let path = case_dir.join("processed.json");
    if !path.exists() {
        return Err(Error::Precondition(format!("case at {} has not been processed", case_dir.display())));
    }
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Schema { path, msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grader::Grade;
    use crate::synth::{synthesize, SynthParams};

    #[test]
    fn crop_scales() {
        let img = RgbImage::from_fn(512, 512, |x, y| image::Rgb([x as u8, y as u8, 0]));
        let c = crop(&img, &Rect::new(1000, 1000, 1024, 1024), &Rect::new(1240, 1000, 480, 480));
        assert_eq!(c.dimensions(), (240, 240));
        assert_eq!(c.get_pixel(0, 0).0, [120, 0, 0]);
    }

    #[test]
    fn four_mitoses_in_one_hpf() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthesize(&SynthParams { slide_px: 4096, mitoses: 4, ..Default::default() }, dir.path()).unwrap();
        let out = dir.path().join("out");
        let (pc, d) = cmd_process(&s.manifest_path, &s.bindings_path, &out, &EngineConfig::default(), 2).unwrap();
        let mit: Vec<_> = pc.detections.iter().filter(|d| d.criterion == CriterionKind::MitoticCount).collect();
        assert_eq!(mit.len(), 4);
        assert_eq!(d.regions[1].value, 4.0);
        assert_eq!(d.grade.grade, Grade::II);
        assert!(mit.iter().all(|m| out.join(m.saliency_ref.as_ref().unwrap()).exists()));
        assert!(out.join("heatmaps").join(format!("{}_mit.png", pc.slides[0].slide_id)).exists());
        assert_eq!(load_processed(&out).unwrap(), pc);
    }

    #[test]
    fn background_only_slide() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams { slide_px: 2048, tissue: Some(Rect::new(512, 512, 1, 1)), ..Default::default() };
        let s = synthesize(&p, dir.path()).unwrap();
        let (pc, d) = cmd_process(&s.manifest_path, &s.bindings_path, &dir.path().join("o"), &EngineConfig::default(), 1).unwrap();
        assert!(pc.detections.is_empty());
        assert!(pc.slides[0].nuclei.is_empty());
        assert_eq!(d.grade.grade, Grade::I);
    }

    #[test]
    fn unprocessed_case_is_a_precondition_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_processed(dir.path()), Err(Error::Precondition(_))));
    }
}
