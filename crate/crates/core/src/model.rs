//! Shared domain types and geometry.
//!
//! Every rectangle is expressed in level-0 pixels of the slide that owns it.
//! Coarser pyramid levels are derived views and never stored.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl Rect {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Rect { x, y, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::InvalidMetadata(format!("empty rect {self}")));
        }
        Ok(())
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    /// Center rounded down to the pixel grid.
    pub fn center(&self) -> (u32, u32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn contains_point(&self, x: u32, y: u32) -> bool {
        x >= self.x && y >= self.y && (x as u64) < self.right() && (y as u64) < self.bottom()
    }

    pub fn contains(&self, other: &Rect) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }

    pub fn intersection_area(&self, other: &Rect) -> u64 {
        let x0 = self.x.max(other.x) as u64;
        let y0 = self.y.max(other.y) as u64;
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        if x1 <= x0 || y1 <= y0 {
            0
        } else {
            (x1 - x0) * (y1 - y0)
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.intersection_area(other) > 0
    }

    /// Bounds check against a `width × height` canvas.
    pub fn within(&self, width: u32, height: u32) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }
}

impl fmt::Display for Rect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{} {}x{})", self.x, self.y, self.w, self.h)
    }
}

/// Intersection over union; 0 for disjoint rects.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// Converts a physical length to level-0 pixels, rounding to nearest (ties away from zero).
pub fn um_to_px(length_um: f64, mpp: f64) -> Result<u32> {
    if !(mpp > 0.0) || !mpp.is_finite() {
        return Err(Error::InvalidMetadata(format!("mpp must be positive, got {mpp}")));
    }
    if !(length_um >= 0.0) || !length_um.is_finite() {
        return Err(Error::Validation(format!("length must be non-negative, got {length_um}")));
    }
    Ok((length_um / mpp).round() as u32)
}

/// Proportional H&E → Ki-67 coordinate mapping for a manifest-declared pairing.
pub fn map_he_to_ki67(rect: &Rect, he_mpp: f64, ki67_mpp: f64) -> Rect {
    let s = he_mpp / ki67_mpp;
    let scale = |v: u32| (v as f64 * s).round() as u32;
    Rect::new(scale(rect.x), scale(rect.y), scale(rect.w).max(1), scale(rect.h).max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stain {
    #[serde(rename = "HE")]
    He,
    #[serde(rename = "KI67")]
    Ki67,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CriterionKind {
    MitoticCount,
    Ki67Index,
    Hypercellularity,
    Necrosis,
    SmallCell,
    ProminentNucleoli,
    Sheeting,
    BrainInvasion,
    Subtype,
}

impl CriterionKind {
    pub const ALL: [CriterionKind; 9] = [
        CriterionKind::MitoticCount,
        CriterionKind::Ki67Index,
        CriterionKind::Hypercellularity,
        CriterionKind::Necrosis,
        CriterionKind::SmallCell,
        CriterionKind::ProminentNucleoli,
        CriterionKind::Sheeting,
        CriterionKind::BrainInvasion,
        CriterionKind::Subtype,
    ];

    /// The five histological features of the three-of-five rule, in display order.
    pub const FEATURES: [CriterionKind; 5] = [
        CriterionKind::Hypercellularity,
        CriterionKind::ProminentNucleoli,
        CriterionKind::Sheeting,
        CriterionKind::Necrosis,
        CriterionKind::SmallCell,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CriterionKind::MitoticCount => "MitoticCount",
            CriterionKind::Ki67Index => "Ki67Index",
            CriterionKind::Hypercellularity => "Hypercellularity",
            CriterionKind::Necrosis => "Necrosis",
            CriterionKind::SmallCell => "SmallCell",
            CriterionKind::ProminentNucleoli => "ProminentNucleoli",
            CriterionKind::Sheeting => "Sheeting",
            CriterionKind::BrainInvasion => "BrainInvasion",
            CriterionKind::Subtype => "Subtype",
        }
    }

    /// Short tag used inside detection and evidence identifiers.
    pub fn tag(&self) -> &'static str {
        match self {
            CriterionKind::MitoticCount => "mit",
            CriterionKind::Ki67Index => "ki67",
            CriterionKind::Hypercellularity => "hyp",
            CriterionKind::Necrosis => "nec",
            CriterionKind::SmallCell => "sc",
            CriterionKind::ProminentNucleoli => "pn",
            CriterionKind::Sheeting => "sh",
            CriterionKind::BrainInvasion => "bi",
            CriterionKind::Subtype => "sub",
        }
    }

    pub fn is_ai(&self) -> bool {
        !matches!(self, CriterionKind::Subtype)
    }
}

impl fmt::Display for CriterionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CriterionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CriterionKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str().eq_ignore_ascii_case(s) || k.tag() == s)
            .ok_or_else(|| Error::Validation(format!("unknown criterion {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewStatus {
    #[default]
    Unreviewed,
    Approved,
    Declined,
    Uncertain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detection_id: String,
    pub slide_id: String,
    pub criterion: CriterionKind,
    pub bbox: Rect,
    pub prob: f64,
    #[serde(default)]
    pub saliency_ref: Option<String>,
    #[serde(default)]
    pub status: ReviewStatus,
}

impl Detection {
    pub fn canonical_id(slide_id: &str, criterion: CriterionKind, rect: &Rect) -> String {
        format!("{slide_id}:{}:{}_{}_{}_{}", criterion.tag(), rect.x, rect.y, rect.w, rect.h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMeta {
    pub slide_id: String,
    pub stain: Stain,
    pub width_px: u32,
    pub height_px: u32,
    pub mpp: f64,
    pub levels: u32,
    pub pyramid_path: String,
    pub nodes: Vec<Rect>,
}

impl SlideMeta {
    pub fn validate(&self) -> Result<()> {
        if !(self.mpp > 0.0) {
            return Err(Error::InvalidMetadata(format!("slide {}: mpp must be > 0", self.slide_id)));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(Error::InvalidMetadata(format!("slide {}: empty dimensions", self.slide_id)));
        }
        if self.levels == 0 {
            return Err(Error::InvalidMetadata(format!("slide {}: levels must be ≥ 1", self.slide_id)));
        }
        for node in &self.nodes {
            node.validate()?;
            if !node.within(self.width_px, self.height_px) {
                return Err(Error::InvalidMetadata(format!(
                    "slide {}: node {node} exceeds {}x{}",
                    self.slide_id, self.width_px, self.height_px
                )));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width_px, self.height_px)
    }

    pub fn level_dims(&self, level: u32) -> (u32, u32) {
        level_dims(self.width_px, self.height_px, level)
    }
}

/// Dimensions of pyramid level `level`: `ceil(level0 / 2^level)`.
pub fn level_dims(width: u32, height: u32, level: u32) -> (u32, u32) {
    let d = 1u64 << level;
    (
        (width as u64).div_ceil(d).max(1) as u32,
        (height as u64).div_ceil(d).max(1) as u32,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub he: String,
    pub ki67: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseManifest {
    pub case_id: String,
    pub slides: Vec<SlideMeta>,
    #[serde(default)]
    pub pairings: Vec<Pairing>,
}

impl CaseManifest {
    pub fn validate(&self) -> Result<()> {
        if !self.slides.iter().any(|s| s.stain == Stain::He) {
            return Err(Error::Validation(format!("case {} has no H&E slide", self.case_id)));
        }
        for (i, s) in self.slides.iter().enumerate() {
            s.validate()?;
            if self.slides[..i].iter().any(|o| o.slide_id == s.slide_id) {
                return Err(Error::Validation(format!("duplicate slide id {}", s.slide_id)));
            }
        }
        for p in &self.pairings {
            match self.slide(&p.he) {
                Some(s) if s.stain == Stain::He => {}
                _ => return Err(Error::Validation(format!("pairing references unknown H&E slide {}", p.he))),
            }
            if let Some(k) = &p.ki67 {
                match self.slide(k) {
                    Some(s) if s.stain == Stain::Ki67 => {}
                    _ => return Err(Error::Validation(format!("pairing references unknown Ki-67 slide {k}"))),
                }
            }
        }
        Ok(())
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideMeta> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn slides_with(&self, stain: Stain) -> impl Iterator<Item = &SlideMeta> {
        self.slides.iter().filter(move |s| s.stain == stain)
    }

    /// Reads and validates a manifest file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: CaseManifest = serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn um_to_px_examples() {
        assert_eq!(um_to_px(500.0, 0.25).unwrap(), 2000);
        assert_eq!(um_to_px(500.0, 0.5).unwrap(), 1000);
        assert_eq!(um_to_px(0.0, 0.25).unwrap(), 0);
        assert_eq!(um_to_px(0.125, 0.25).unwrap(), 1);
        assert!(matches!(um_to_px(10.0, 0.0), Err(Error::InvalidMetadata(_))));
        assert!(matches!(um_to_px(10.0, -1.0), Err(Error::InvalidMetadata(_))));
    }

    #[test]
    fn iou_examples() {
        let a = Rect::new(0, 0, 240, 240);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &Rect::new(240, 0, 240, 240)), 0.0);
        let b = Rect::new(120, 120, 240, 240);
        assert!((iou(&a, &b) - 14400.0 / 100800.0).abs() < 1e-12);
        assert!((iou(&a, &Rect::new(120, 0, 240, 240)) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn criterion_names_round_trip() {
        for k in CriterionKind::ALL {
            assert_eq!(k.as_str().parse::<CriterionKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.as_str()));
        }
        assert_eq!(CriterionKind::ALL.iter().filter(|k| k.is_ai()).count(), 8);
    }

    #[test]
    fn manifest_validation() {
        let slide = |id: &str, stain| SlideMeta {
            slide_id: id.into(),
            stain,
            width_px: 1000,
            height_px: 1000,
            mpp: 0.25,
            levels: 1,
            pyramid_path: "x".into(),
            nodes: vec![Rect::new(0, 0, 1000, 1000)],
        };
        let mut m = CaseManifest {
            case_id: "c".into(),
            slides: vec![slide("a", Stain::He), slide("b", Stain::Ki67)],
            pairings: vec![Pairing { he: "a".into(), ki67: Some("b".into()) }],
        };
        m.validate().unwrap();
        m.slides[0].nodes[0] = Rect::new(10, 0, 1000, 1000);
        assert!(matches!(m.validate(), Err(Error::InvalidMetadata(_))));
        m.slides.remove(0);
        m.pairings.clear();
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn proportional_mapping() {
        let r = map_he_to_ki67(&Rect::new(2000, 4000, 512, 512), 0.25, 0.5);
        assert_eq!(r, Rect::new(1000, 2000, 256, 256));
    }

    fn rect() -> impl Strategy<Value = Rect> {
        (0u32..500, 0u32..500, 1u32..300, 1u32..300).prop_map(|(x, y, w, h)| Rect::new(x, y, w, h))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in rect(), b in rect()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn um_to_px_monotone(a in 0.0f64..1e5, b in 0.0f64..1e5, mpp in 0.05f64..4.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(um_to_px(lo, mpp).unwrap() <= um_to_px(hi, mpp).unwrap());
        }
    }
}
