//! Synthetic cases: a rendered slide pyramid plus the ground truth used to render it.
//!
//! Tissue is pink noise on white glass. Mitoses are dark ellipses, nuclei are small
//! blue discs (brown when Ki-67 positive), necrosis is a pale gray field. Every planted
//! object is also written to `annotations.json`, so oracle bindings reproduce it exactly.
//!
//! Mitoses are placed so that each one intersects exactly one 240-px mitosis tile of
//! its 512-px base patch: per axis the tile origins are 0/120/240, so objects kept
//! inside `[14,106)` or `[374,466)` are seen by a single tile. That gives four slots per
//! base patch, and all chosen slots lie in one cell-aligned HPF.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::EngineConfig;
use crate::detectors::{AnnotationDoc, AnnotationObject, BindingKind, DetectorBinding, Point, BOUND_CRITERIA};
use crate::error::{Error, Result};
use crate::model::{um_to_px, CaseManifest, CriterionKind, Pairing, Rect, SlideMeta, Stain};
use crate::tiler::{write_pyramid, TILE_SIZE};

pub const TISSUE: [u8; 3] = [225, 165, 195];
pub const MITOSIS: [u8; 3] = [40, 20, 60];
pub const NUCLEUS: [u8; 3] = [90, 60, 150];
pub const KI67_POSITIVE: [u8; 3] = [150, 90, 40];
pub const KI67_NEGATIVE: [u8; 3] = [70, 90, 170];
pub const NECROSIS: [u8; 3] = [160, 155, 158];
pub const NUCLEOLUS: [u8; 3] = [120, 30, 70];

const NUCLEUS_RADIUS: u32 = 4;
const NUCLEUS_SPACING: u32 = 40;
const MITOSIS_W: u32 = 24;
const MITOSIS_H: u32 = 16;
/// Blob centers inside a 512 patch that fall in single-coverage zones of the 240/120 tiling.
const MITOSIS_OFFSETS: [u32; 2] = [60, 420];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ki67Params {
    pub positive: u32,
    pub negative: u32,
}

impl Default for Ki67Params {
    fn default() -> Self {
        Ki67Params { positive: 150, negative: 350 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub case_id: String,
    pub seed: u64,
    /// Level-0 side of the square slide.
    pub slide_px: u32,
    pub mpp: f64,
    /// Tissue node; defaults to the slide minus a one-tile margin.
    pub node: Option<Rect>,
    /// Pink tissue area inside the node; defaults to the whole node.
    pub tissue: Option<Rect>,
    pub mitoses: u32,
    pub necrosis: u32,
    pub sheeting: u32,
    pub prominent_nucleoli: u32,
    pub small_cell_patches: u32,
    pub small_cell_nuclei: u32,
    /// Plant a tumor patch next to a brain-density patch.
    pub brain_invasion: bool,
    pub ki67: Option<Ki67Params>,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            case_id: "synth".into(),
            seed: 42,
            slide_px: 8192 + 2 * TILE_SIZE,
            mpp: 0.25,
            node: None,
            tissue: None,
            mitoses: 0,
            necrosis: 0,
            sheeting: 0,
            prominent_nucleoli: 0,
            small_cell_patches: 0,
            small_cell_nuclei: 130,
            brain_invasion: false,
            ki67: None,
        }
    }
}

impl SynthParams {
    pub fn node_rect(&self) -> Rect {
        self.node.unwrap_or_else(|| {
            let side = self.slide_px.saturating_sub(2 * TILE_SIZE).max(1);
            Rect::new(TILE_SIZE.min(self.slide_px - 1), TILE_SIZE.min(self.slide_px - 1), side, side)
        })
    }

    pub fn tissue_rect(&self) -> Rect {
        self.tissue.unwrap_or_else(|| self.node_rect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.slide_px == 0 || !(self.mpp > 0.0) {
            return Err(Error::Validation("slide size and mpp must be positive".into()));
        }
        let node = self.node_rect();
        node.validate()?;
        if !node.within(self.slide_px, self.slide_px) {
            return Err(Error::Validation(format!("node {node} outside a {}² slide", self.slide_px)));
        }
        if !node.contains(&self.tissue_rect()) {
            return Err(Error::Validation("tissue must lie inside the node".into()));
        }
        Ok(())
    }
}

/// One painted primitive.
#[derive(Clone, Copy, Debug)]
enum Shape {
    Ellipse,
    Block,
    Disc,
}

#[derive(Clone, Copy, Debug)]
struct Paint {
    shape: Shape,
    rect: Rect,
    color: [u8; 3],
}

impl Paint {
    fn covers(&self, x: u32, y: u32) -> bool {
        if !self.rect.contains_point(x, y) {
            return false;
        }
        match self.shape {
            Shape::Block => true,
            Shape::Ellipse | Shape::Disc => {
                let rx = self.rect.w as f64 / 2.0;
                let ry = self.rect.h as f64 / 2.0;
                let dx = (x as f64 + 0.5 - self.rect.x as f64 - rx) / rx;
                let dy = (y as f64 + 0.5 - self.rect.y as f64 - ry) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

fn hash_noise(x: u32, y: u32, seed: u64) -> i32 {
    let mut h = (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F) ^ seed;
    h ^= h >> 29;
    h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= h >> 32;
    (h % 13) as i32 - 6
}

struct Scene {
    seed: u64,
    tissue: Rect,
    paints: Vec<Paint>,
}

impl Scene {
    fn render(&self, rect: Rect) -> RgbImage {
        let local: Vec<&Paint> = self.paints.iter().filter(|p| p.rect.intersects(&rect)).collect();
        RgbImage::from_fn(rect.w, rect.h, |lx, ly| {
            let (x, y) = (rect.x + lx, rect.y + ly);
            if let Some(p) = local.iter().rev().find(|p| p.covers(x, y)) {
                return Rgb(p.color);
            }
            if self.tissue.contains_point(x, y) {
                let n = hash_noise(x, y, self.seed);
                Rgb(TISSUE.map(|c| (c as i32 + n).clamp(0, 255) as u8))
            } else {
                Rgb([255, 255, 255])
            }
        })
    }
}

/// Files written by [`synthesize`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub bindings_path: PathBuf,
    pub annotations_path: PathBuf,
    pub manifest: CaseManifest,
    /// Level-0 rect of the HPF holding the planted mitoses.
    pub mitosis_hpf: Option<Rect>,
}

/// Base patches (512 level-0 px at 0.25 µm/px) fully inside `area`, row-major.
fn base_patches(area: &Rect, side: u32) -> Vec<Rect> {
    crate::tiler::window_rects(area, side, side)
}

struct Planner {
    free: Vec<Rect>,
}

impl Planner {
    fn take(&mut self, n: usize, what: &str) -> Result<Vec<Rect>> {
        if self.free.len() < n {
            return Err(Error::Validation(format!("not enough free tissue patches for {n} {what}")));
        }
        Ok(self.free.drain(..n).collect())
    }
}

fn nucleus_grid(patch: &Rect, n: u32) -> Result<Vec<Point>> {
    let per_row = patch.w / NUCLEUS_SPACING;
    if n > per_row * (patch.h / NUCLEUS_SPACING) {
        return Err(Error::Validation(format!("{n} nuclei do not fit in a {}-px patch", patch.w)));
    }
    Ok((0..n)
        .map(|i| Point {
            x: patch.x + NUCLEUS_SPACING / 2 + (i % per_row) * NUCLEUS_SPACING,
            y: patch.y + NUCLEUS_SPACING / 2 + (i / per_row) * NUCLEUS_SPACING,
        })
        .collect())
}

fn disc(p: Point, color: [u8; 3]) -> Paint {
    let r = NUCLEUS_RADIUS;
    Paint { shape: Shape::Disc, rect: Rect::new(p.x - r, p.y - r, 2 * r, 2 * r), color }
}

/// Renders a synthetic case into `out`: manifest, pyramids, annotations and oracle bindings.
pub fn synthesize(params: &SynthParams, out: &Path) -> Result<SynthOutput> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cfg = EngineConfig::default();
    let patch_px = um_to_px(128.0, params.mpp)?;
    let hpf_px = um_to_px(cfg.hpf_um, params.mpp)?;
    let cell_px = um_to_px(cfg.cell_um(), params.mpp)?;
    let tissue = params.tissue_rect();
    let node = params.node_rect();
    let he_id = format!("{}-he", params.case_id);
    let mut paints = Vec::new();
    let mut objects = Vec::new();

    // Base patches on the pipeline's grid (anchored at the node origin) that sit in tissue.
    let mut patches: Vec<Rect> = base_patches(&node, patch_px).into_iter().filter(|r| tissue.contains(r)).collect();

    let mut mitosis_hpf = None;
    if params.mitoses > 0 {
        let hx = tissue.x.div_ceil(cell_px) * cell_px;
        let hy = tissue.y.div_ceil(cell_px) * cell_px;
        let hpf = Rect::new(hx, hy, hpf_px, hpf_px);
        let scale = patch_px as f64 / 512.0;
        let mut slots = Vec::new();
        for p in &patches {
            for oy in MITOSIS_OFFSETS {
                for ox in MITOSIS_OFFSETS {
                    // Center of the only 240-tile that sees this slot.
                    let tx = p.x + ((if ox < 256 { 120 } else { 360 }) as f64 * scale) as u32;
                    let ty = p.y + ((if oy < 256 { 120 } else { 360 }) as f64 * scale) as u32;
                    if hpf.contains_point(tx, ty) {
                        slots.push((*p, (ox as f64 * scale) as u32, (oy as f64 * scale) as u32));
                    }
                }
            }
        }
        if slots.len() < params.mitoses as usize {
            return Err(Error::Validation(format!(
                "only {} mitosis slots fit in one HPF of this tissue; asked for {}",
                slots.len(),
                params.mitoses
            )));
        }
        slots.shuffle(&mut rng);
        slots.truncate(params.mitoses as usize);
        slots.sort_by_key(|(p, ox, oy)| (p.y + oy, p.x + ox));
        for (p, ox, oy) in slots {
            let bbox = Rect::new(p.x + ox - MITOSIS_W / 2, p.y + oy - MITOSIS_H / 2, MITOSIS_W, MITOSIS_H);
            paints.push(Paint { shape: Shape::Ellipse, rect: bbox, color: MITOSIS });
            objects.push(AnnotationObject {
                criterion: CriterionKind::MitoticCount,
                bbox: Some(bbox),
                point: None,
                label: "mitosis".into(),
            });
        }
        // Keep other plants out of the mitosis HPF.
        patches.retain(|r| !r.intersects(&hpf));
        mitosis_hpf = Some(hpf);
    }

    let mut plan = Planner { free: patches };
    for p in plan.take(params.necrosis as usize, "necrosis fields")? {
        let bbox = Rect::new(p.x + p.w / 4, p.y + p.h / 4, p.w / 2, p.h / 2);
        paints.push(Paint { shape: Shape::Block, rect: bbox, color: NECROSIS });
        objects.push(AnnotationObject { criterion: CriterionKind::Necrosis, bbox: Some(bbox), point: None, label: "necrosis".into() });
    }
    for p in plan.take(params.prominent_nucleoli as usize, "prominent nucleoli")? {
        // Centered in the first 96-px nucleoli tile of the patch.
        let t = patch_px * 96 / 512;
        let bbox = Rect::new(p.x + t / 2 - 6, p.y + t / 2 - 6, 12, 12);
        paints.push(Paint { shape: Shape::Disc, rect: bbox, color: NUCLEOLUS });
        objects.push(AnnotationObject {
            criterion: CriterionKind::ProminentNucleoli,
            bbox: Some(bbox),
            point: None,
            label: "nucleolus".into(),
        });
    }
    // Sheeting is judged on 1024-px fields; mark the patch itself.
    for p in plan.take(params.sheeting as usize, "sheeting areas")? {
        let bbox = Rect::new(p.x + 16, p.y + 16, p.w - 32, p.h - 32);
        objects.push(AnnotationObject { criterion: CriterionKind::Sheeting, bbox: Some(bbox), point: None, label: "sheeting".into() });
    }
    let mut nuclei_patches: Vec<(Rect, u32)> = plan
        .take(params.small_cell_patches as usize, "small-cell patches")?
        .into_iter()
        .map(|p| (p, params.small_cell_nuclei))
        .collect();
    if params.brain_invasion {
        // Need a horizontally adjacent pair of free patches.
        let i = (0..plan.free.len().saturating_sub(1))
            .find(|&i| plan.free[i + 1].x == plan.free[i].x + patch_px && plan.free[i + 1].y == plan.free[i].y)
            .ok_or_else(|| Error::Validation("no adjacent patch pair left for brain invasion".into()))?;
        let pair: Vec<Rect> = plan.free.drain(i..i + 2).collect();
        nuclei_patches.push((pair[0], 80));
        nuclei_patches.push((pair[1], 30));
    }
    for (p, n) in nuclei_patches {
        for c in nucleus_grid(&p, n)? {
            paints.push(disc(c, NUCLEUS));
            objects.push(AnnotationObject { criterion: CriterionKind::Hypercellularity, bbox: None, point: Some(c), label: "nucleus".into() });
        }
    }

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scene = Scene { seed: params.seed, tissue, paints };
    let levels = write_pyramid(&out.join("he"), params.slide_px, params.slide_px, |r| scene.render(r))?;
    let mut slides = vec![SlideMeta {
        slide_id: he_id.clone(),
        stain: Stain::He,
        width_px: params.slide_px,
        height_px: params.slide_px,
        mpp: params.mpp,
        levels,
        pyramid_path: "he".into(),
        nodes: vec![node],
    }];
    let mut docs = vec![AnnotationDoc { slide_id: he_id.clone(), objects }];
    let mut pairing = Pairing { he: he_id, ki67: None };

    if let Some(k) = &params.ki67 {
        let ki_id = format!("{}-ki67", params.case_id);
        // One Ki-67 field of 1024 level-0 px (a 512 patch at 0.5 µm/px), mixed polarity.
        let field_px = um_to_px(256.0, params.mpp)?;
        let field = Rect::new(tissue.x, tissue.y, field_px.min(tissue.w), field_px.min(tissue.h));
        let mut polarity: Vec<bool> = (0..k.positive).map(|_| true).chain((0..k.negative).map(|_| false)).collect();
        polarity.shuffle(&mut rng);
        let centers = nucleus_grid(&field, k.positive + k.negative)?;
        let mut paints = Vec::new();
        let mut objects = Vec::new();
        for (c, pos) in centers.into_iter().zip(polarity) {
            paints.push(disc(c, if pos { KI67_POSITIVE } else { KI67_NEGATIVE }));
            objects.push(AnnotationObject {
                criterion: CriterionKind::Ki67Index,
                bbox: None,
                point: Some(c),
                label: if pos { "positive" } else { "negative" }.into(),
            });
        }
        let scene = Scene { seed: params.seed ^ 0x6b69, tissue, paints };
        let levels = write_pyramid(&out.join("ki67"), params.slide_px, params.slide_px, |r| scene.render(r))?;
        slides.push(SlideMeta {
            slide_id: ki_id.clone(),
            stain: Stain::Ki67,
            width_px: params.slide_px,
            height_px: params.slide_px,
            mpp: params.mpp,
            levels,
            pyramid_path: "ki67".into(),
            nodes: vec![node],
        });
        docs.push(AnnotationDoc { slide_id: ki_id.clone(), objects });
        pairing.ki67 = Some(ki_id);
    }

    let manifest = CaseManifest { case_id: params.case_id.clone(), slides, pairings: vec![pairing] };
    manifest.validate()?;
    let manifest_path = out.join("manifest.json");
    let annotations_path = out.join("annotations.json");
    let bindings_path = out.join("bindings.json");
    let bindings: Vec<DetectorBinding> = BOUND_CRITERIA
        .iter()
        .map(|&criterion| DetectorBinding {
            criterion,
            kind: BindingKind::OracleAnnotation,
            source_path: PathBuf::from("annotations.json"),
        })
        .collect();
    write_pretty(&manifest_path, &manifest)?;
    write_pretty(&annotations_path, &docs)?;
    write_pretty(&bindings_path, &bindings)?;
    write_pretty(&out.join("synth_params.json"), params)?;
    Ok(SynthOutput { manifest_path, bindings_path, annotations_path, manifest, mitosis_hpf })
}

fn write_pretty(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detectors::load_annotations;
    use crate::tiler::{is_background, open_case};

    fn small(k: u32) -> SynthParams {
        SynthParams { slide_px: 4096, mitoses: k, ..Default::default() }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        synthesize(&small(5), a.path()).unwrap();
        synthesize(&small(5), b.path()).unwrap();
        for f in ["manifest.json", "annotations.json", "he/level_0/2_2.png", "he/level_2/0_0.png"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let c = tempfile::tempdir().unwrap();
        synthesize(&SynthParams { seed: 7, ..small(5) }, c.path()).unwrap();
        assert_ne!(
            std::fs::read(a.path().join("annotations.json")).unwrap(),
            std::fs::read(c.path().join("annotations.json")).unwrap()
        );
    }

    #[test]
    fn plants_match_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let p = SynthParams {
            slide_px: 6144,
            mitoses: 20,
            necrosis: 2,
            small_cell_patches: 3,
            brain_invasion: true,
            ki67: Some(Ki67Params::default()),
            ..Default::default()
        };
        let out = synthesize(&p, dir.path()).unwrap();
        let docs = load_annotations(&out.annotations_path).unwrap();
        let he = &docs[0].objects;
        let hpf = out.mitosis_hpf.unwrap();
        let mit: Vec<_> = he.iter().filter(|o| o.criterion == CriterionKind::MitoticCount).collect();
        assert_eq!(mit.len(), 20);
        assert_eq!(he.iter().filter(|o| o.criterion == CriterionKind::Hypercellularity).count(), 3 * 130 + 110);
        assert_eq!(docs[1].objects.len(), 500);
        let case = open_case(&out.manifest_path).unwrap();
        let slide = &case.slides[0];
        let first = mit[0].bbox.unwrap();
        let patch = slide.read_region(&Rect::new(first.x, first.y, first.w, first.h), 0).unwrap();
        let (cx, cy) = (first.w / 2, first.h / 2);
        assert_eq!(patch.get_pixel(cx, cy).0, MITOSIS);
        assert!(hpf.w == 2000);
        assert!(!is_background(&slide.read_region(&Rect::new(1024, 1024, 512, 512), 0).unwrap()));
        assert!(is_background(&slide.read_region(&Rect::new(0, 0, 512, 512), 0).unwrap()));
    }

    #[test]
    fn too_many_mitoses_for_one_hpf() {
        let dir = tempfile::tempdir().unwrap();
        let err = synthesize(&SynthParams { slide_px: 2048, mitoses: 30, ..Default::default() }, dir.path());
        assert!(matches!(err, Err(Error::Validation(_))));
    }
}
