//! Slide pyramids on disk and the per-criterion patch streams cut from them.
//!
//! Layout: `<pyramid_path>/level_{L}/{tx}_{ty}.png`, 512-px RGB tiles, each level
//! half the size of the one below (`ceil(level0 / 2^L)`), down to ≤1024 px on
//! the long side.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::png::{CompressionType, FilterType as PngFilter, PngEncoder};
use image::imageops::{self, FilterType};
use image::{ImageEncoder, Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{level_dims, um_to_px, CaseManifest, Rect, SlideMeta};

pub const TILE_SIZE: u32 = 512;
pub const BACKGROUND_MEAN: u64 = 240;

/// Number of levels needed to halve `width × height` down to ≤1024 px on the long side.
pub fn pyramid_levels(width: u32, height: u32) -> u32 {
    let long_side = |level| {
        let (w, h) = level_dims(width, height, level);
        w.max(h)
    };
    let mut levels = 1;
    while long_side(levels - 1) > 1024 {
        levels += 1;
    }
    levels
}

pub fn tile_path(root: &Path, level: u32, tx: u32, ty: u32) -> PathBuf {
    root.join(format!("level_{level}")).join(format!("{tx}_{ty}.png"))
}

fn tile_grid(width: u32, height: u32, level: u32) -> (u32, u32) {
    let (w, h) = level_dims(width, height, level);
    (w.div_ceil(TILE_SIZE), h.div_ceil(TILE_SIZE))
}

/// Lossless PNG bytes with fixed encoder settings, so identical rasters give identical files.
pub fn encode_png_rgb(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(Cursor::new(&mut buf), CompressionType::Fast, PngFilter::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)?;
    Ok(buf)
}

pub fn encode_png_gray(img: &image::GrayImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new_with_quality(Cursor::new(&mut buf), CompressionType::Fast, PngFilter::Sub)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::L8)?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes a full pyramid. `render` receives a level-0 tile rect and must return a raster of
/// exactly that size; upper levels are 2×2 box averages of the level below.
pub fn write_pyramid<F>(root: &Path, width: u32, height: u32, render: F) -> Result<u32>
where
    F: Fn(Rect) -> RgbImage + Sync,
{
    let levels = pyramid_levels(width, height);
    let (nx, ny) = tile_grid(width, height, 0);
    let addrs: Vec<(u32, u32)> = (0..ny).flat_map(|ty| (0..nx).map(move |tx| (tx, ty))).collect();
    addrs.par_iter().try_for_each(|&(tx, ty)| {
        let x = tx * TILE_SIZE;
        let y = ty * TILE_SIZE;
        let rect = Rect::new(x, y, TILE_SIZE.min(width - x), TILE_SIZE.min(height - y));
        let img = render(rect);
        debug_assert_eq!(img.dimensions(), (rect.w, rect.h));
        write_file(&tile_path(root, 0, tx, ty), &encode_png_rgb(&img)?)
    })?;
    for level in 1..levels {
        let (lw, lh) = level_dims(width, height, level);
        let (nx, ny) = tile_grid(width, height, level);
        let addrs: Vec<(u32, u32)> = (0..ny).flat_map(|ty| (0..nx).map(move |tx| (tx, ty))).collect();
        addrs.par_iter().try_for_each(|&(tx, ty)| {
            let x = tx * TILE_SIZE;
            let y = ty * TILE_SIZE;
            let (w, h) = (TILE_SIZE.min(lw - x), TILE_SIZE.min(lh - y));
            let (pw, ph) = level_dims(width, height, level - 1);
            let src_rect = Rect::new(2 * x, 2 * y, (2 * w).min(pw - 2 * x), (2 * h).min(ph - 2 * y));
            let src = assemble(root, pw, ph, level - 1, &src_rect)?;
            let img = halve(&src, w, h);
            write_file(&tile_path(root, level, tx, ty), &encode_png_rgb(&img)?)
        })?;
    }
    Ok(levels)
}

/// 2×2 box average with edge clipping, rounded to nearest.
fn halve(src: &RgbImage, w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| {
        let mut acc = [0u32; 3];
        let mut n = 0u32;
        for dy in 0..2 {
            for dx in 0..2 {
                let (sx, sy) = (2 * x + dx, 2 * y + dy);
                if sx < src.width() && sy < src.height() {
                    let p = src.get_pixel(sx, sy);
                    for c in 0..3 {
                        acc[c] += p[c] as u32;
                    }
                    n += 1;
                }
            }
        }
        Rgb([
            ((acc[0] + n / 2) / n) as u8,
            ((acc[1] + n / 2) / n) as u8,
            ((acc[2] + n / 2) / n) as u8,
        ])
    })
}

fn decode_tile(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)?.into_rgb8())
}

/// Copies `rect` (in level coordinates) out of the tiles of one level.
fn assemble(root: &Path, level_w: u32, level_h: u32, level: u32, rect: &Rect) -> Result<RgbImage> {
    if !rect.within(level_w, level_h) || rect.w == 0 || rect.h == 0 {
        return Err(Error::Range(format!("region {rect} outside level {level} ({level_w}x{level_h})")));
    }
    let mut out = RgbImage::new(rect.w, rect.h);
    let tx0 = rect.x / TILE_SIZE;
    let ty0 = rect.y / TILE_SIZE;
    let tx1 = ((rect.right() - 1) / TILE_SIZE as u64) as u32;
    let ty1 = ((rect.bottom() - 1) / TILE_SIZE as u64) as u32;
    for ty in ty0..=ty1 {
        for tx in tx0..=tx1 {
            let tile = decode_tile(&tile_path(root, level, tx, ty))?;
            let ox = tx * TILE_SIZE;
            let oy = ty * TILE_SIZE;
            let x0 = rect.x.max(ox);
            let y0 = rect.y.max(oy);
            let x1 = (rect.right() as u32).min(ox + tile.width());
            let y1 = (rect.bottom() as u32).min(oy + tile.height());
            let row_bytes = ((x1 - x0) * 3) as usize;
            for y in y0..y1 {
                let src_off = (((y - oy) * tile.width() + (x0 - ox)) * 3) as usize;
                let dst_off = (((y - rect.y) * rect.w + (x0 - rect.x)) * 3) as usize;
                out.as_mut()[dst_off..dst_off + row_bytes]
                    .copy_from_slice(&tile.as_raw()[src_off..src_off + row_bytes]);
            }
        }
    }
    Ok(out)
}

/// An opened slide pyramid.
#[derive(Clone, Debug)]
pub struct PyramidSlide {
    pub meta: SlideMeta,
    pub root: PathBuf,
}

impl PyramidSlide {
    /// Opens a pyramid, resolving a relative `pyramid_path` against `base_dir`, and checks
    /// that the stored tiles agree with the declared dimensions and level count.
    pub fn open(meta: SlideMeta, base_dir: &Path) -> Result<Self> {
        meta.validate()?;
        let root = base_dir.join(&meta.pyramid_path);
        let slide = PyramidSlide { meta, root };
        for level in 0..slide.meta.levels {
            let (lw, lh) = slide.meta.level_dims(level);
            let (nx, ny) = slide.tile_grid(level);
            let last = tile_path(&slide.root, level, nx - 1, ny - 1);
            if !last.exists() {
                return Err(Error::TileMismatch {
                    slide_id: slide.meta.slide_id.clone(),
                    msg: format!("missing tile {}", last.display()),
                });
            }
            let dims = image::image_dimensions(&last)?;
            let expect = (lw - (nx - 1) * TILE_SIZE, lh - (ny - 1) * TILE_SIZE);
            if dims != expect {
                return Err(Error::TileMismatch {
                    slide_id: slide.meta.slide_id.clone(),
                    msg: format!("level {level} edge tile is {dims:?}, expected {expect:?}"),
                });
            }
        }
        if slide.root.join(format!("level_{}", slide.meta.levels)).exists() {
            return Err(Error::TileMismatch {
                slide_id: slide.meta.slide_id.clone(),
                msg: format!("store has more than {} levels", slide.meta.levels),
            });
        }
        Ok(slide)
    }

    pub fn tile_grid(&self, level: u32) -> (u32, u32) {
        tile_grid(self.meta.width_px, self.meta.height_px, level)
    }

    fn check_address(&self, level: i64, tx: i64, ty: i64) -> Result<(u32, u32, u32)> {
        let not_found = || Error::NotFound(format!("tile {level}/{tx}/{ty} of slide {}", self.meta.slide_id));
        if level < 0 || tx < 0 || ty < 0 || level >= self.meta.levels as i64 {
            return Err(not_found());
        }
        let (nx, ny) = self.tile_grid(level as u32);
        if tx >= nx as i64 || ty >= ny as i64 {
            return Err(not_found());
        }
        Ok((level as u32, tx as u32, ty as u32))
    }

    /// Stored PNG bytes of one tile, unmodified.
    pub fn tile_bytes(&self, level: i64, tx: i64, ty: i64) -> Result<Vec<u8>> {
        let (level, tx, ty) = self.check_address(level, tx, ty)?;
        let path = tile_path(&self.root, level, tx, ty);
        std::fs::read(&path).map_err(|e| Error::io(path, e))
    }

    pub fn read_tile(&self, level: u32, tx: u32, ty: u32) -> Result<RgbImage> {
        let (level, tx, ty) = self.check_address(level as i64, tx as i64, ty as i64)?;
        decode_tile(&tile_path(&self.root, level, tx, ty))
    }

    /// Reads a level-0 rect at pyramid `level`. The output covers
    /// `[x >> L, ceil(right / 2^L))` on each axis.
    pub fn read_region(&self, rect: &Rect, level: u32) -> Result<RgbImage> {
        if level >= self.meta.levels {
            return Err(Error::Range(format!("level {level} ≥ {} levels", self.meta.levels)));
        }
        if rect.w == 0 || rect.h == 0 || !rect.within(self.meta.width_px, self.meta.height_px) {
            return Err(Error::Range(format!(
                "region {rect} outside slide {} ({}x{})",
                self.meta.slide_id, self.meta.width_px, self.meta.height_px
            )));
        }
        let d = 1u64 << level;
        let x0 = (rect.x as u64 / d) as u32;
        let y0 = (rect.y as u64 / d) as u32;
        let x1 = rect.right().div_ceil(d) as u32;
        let y1 = rect.bottom().div_ceil(d) as u32;
        let (lw, lh) = self.meta.level_dims(level);
        assemble(&self.root, lw, lh, level, &Rect::new(x0, y0, x1 - x0, y1 - y0))
    }

    /// Reads a patch at its family's resolution: the nearest pyramid level to the
    /// family's scale, resampled to the family's window side when the level does not match.
    pub fn read_patch(&self, patch: &PatchRef) -> Result<RgbImage> {
        let spec = patch.family.spec();
        let level = spec.read_level(&self.meta);
        let img = self.read_region(&patch.rect, level)?;
        if img.width() == spec.window_px && img.height() == spec.window_px {
            Ok(img)
        } else {
            Ok(imageops::resize(&img, spec.window_px, spec.window_px, FilterType::Triangle))
        }
    }
}

/// A manifest with all of its pyramids opened.
#[derive(Clone, Debug)]
pub struct Case {
    pub manifest: CaseManifest,
    pub base_dir: PathBuf,
    pub slides: Vec<PyramidSlide>,
}

impl Case {
    pub fn slide(&self, slide_id: &str) -> Option<&PyramidSlide> {
        self.slides.iter().find(|s| s.meta.slide_id == slide_id)
    }
}

pub fn open_case(manifest_path: &Path) -> Result<Case> {
    let manifest = CaseManifest::load(manifest_path)?;
    let base_dir = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let slides = manifest
        .slides
        .iter()
        .map(|m| PyramidSlide::open(m.clone(), &base_dir))
        .collect::<Result<Vec<_>>>()?;
    Ok(Case { manifest, base_dir, slides })
}

/// Mean over all channels and pixels strictly above 240.
pub fn is_background(patch: &RgbImage) -> bool {
    let raw = patch.as_raw();
    if raw.is_empty() {
        return false;
    }
    let sum: u64 = raw.iter().map(|&v| v as u64).sum();
    sum > BACKGROUND_MEAN * raw.len() as u64
}

/// Bilinear downsample of a square raster.
pub fn resize_patch(patch: &RgbImage, target_px: u32) -> Result<RgbImage> {
    if patch.width() != patch.height() {
        return Err(Error::Validation(format!("patch {}x{} is not square", patch.width(), patch.height())));
    }
    if target_px == 0 || target_px > patch.width() {
        return Err(Error::Unsupported(format!("resize {} → {target_px} is not a downsample", patch.width())));
    }
    if target_px == patch.width() {
        return Ok(patch.clone());
    }
    Ok(imageops::resize(patch, target_px, target_px, FilterType::Triangle))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub window_px: u32,
    pub stride_px: u32,
    pub resize_to: Option<u32>,
    /// Physical pixel size (µm/px) the window is defined at.
    pub scale_mpp: f64,
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window_px == 0 || self.stride_px == 0 || !(self.scale_mpp > 0.0) {
            return Err(Error::Validation(format!("invalid window spec {self:?}")));
        }
        Ok(())
    }

    /// Window side and stride in level-0 pixels of a slide with the given mpp.
    pub fn footprint(&self, mpp: f64) -> Result<(u32, u32)> {
        let win = um_to_px(self.window_px as f64 * self.scale_mpp, mpp)?;
        let stride = um_to_px(self.stride_px as f64 * self.scale_mpp, mpp)?;
        if win == 0 || stride == 0 {
            return Err(Error::InvalidMetadata(format!("window {self:?} vanishes at mpp {mpp}")));
        }
        Ok((win, stride))
    }

    /// Pyramid level whose resolution is closest to `scale_mpp`.
    pub fn read_level(&self, meta: &SlideMeta) -> u32 {
        let ratio = self.scale_mpp / meta.mpp;
        if ratio <= 1.0 {
            return 0;
        }
        (ratio.log2().round() as u32).min(meta.levels - 1)
    }
}

/// Which detector consumes a patch stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchFamily {
    /// 512 px at 0.25 µm/px: background filter, nuclei, necrosis.
    HeBase,
    /// 240 px tiles, stride 120, inside each base patch.
    Mitosis,
    /// 96 px tiles inside each base patch.
    Nucleoli,
    /// 512 px at 0.5 µm/px, resized to 224.
    Sheeting,
    /// 512 px at 0.5 µm/px on Ki-67 slides.
    Ki67,
}

impl PatchFamily {
    pub fn spec(&self) -> WindowSpec {
        match self {
            PatchFamily::HeBase => WindowSpec { window_px: 512, stride_px: 512, resize_to: None, scale_mpp: 0.25 },
            PatchFamily::Mitosis => WindowSpec { window_px: 240, stride_px: 120, resize_to: None, scale_mpp: 0.25 },
            PatchFamily::Nucleoli => WindowSpec { window_px: 96, stride_px: 96, resize_to: None, scale_mpp: 0.25 },
            PatchFamily::Sheeting => WindowSpec { window_px: 512, stride_px: 512, resize_to: Some(224), scale_mpp: 0.5 },
            PatchFamily::Ki67 => WindowSpec { window_px: 512, stride_px: 512, resize_to: None, scale_mpp: 0.5 },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub slide_id: String,
    pub rect: Rect,
    pub family: PatchFamily,
}

/// Row-major window origins fully inside `area`; windows that do not fit are skipped.
pub fn window_rects(area: &Rect, window: u32, stride: u32) -> Vec<Rect> {
    let fits = |len: u32| if len >= window { (len - window) / stride + 1 } else { 0 };
    let (nx, ny) = (fits(area.w), fits(area.h));
    let mut out = Vec::with_capacity((nx * ny) as usize);
    for j in 0..ny {
        for i in 0..nx {
            out.push(Rect::new(area.x + i * stride, area.y + j * stride, window, window));
        }
    }
    out
}

/// Geometric enumeration of a family's windows over the nodes, before background removal.
pub fn candidate_patches(meta: &SlideMeta, family: PatchFamily, nodes: &[Rect]) -> Result<Vec<PatchRef>> {
    let spec = family.spec();
    spec.validate()?;
    let (win, stride) = spec.footprint(meta.mpp)?;
    Ok(nodes
        .iter()
        .flat_map(|node| window_rects(node, win, stride))
        .map(|rect| PatchRef { slide_id: meta.slide_id.clone(), rect, family })
        .collect())
}

/// Sub-tiles of a base patch for a finer family (mitosis, nucleoli), tiled within the parent.
pub fn sub_tiles(parent: &PatchRef, family: PatchFamily, mpp: f64) -> Result<Vec<PatchRef>> {
    let (win, stride) = family.spec().footprint(mpp)?;
    Ok(window_rects(&parent.rect, win, stride)
        .into_iter()
        .map(|rect| PatchRef { slide_id: parent.slide_id.clone(), rect, family })
        .collect())
}

/// Deterministic patch stream over the nodes with background patches removed.
pub fn iter_patches(slide: &PyramidSlide, family: PatchFamily, nodes: &[Rect]) -> Result<Vec<PatchRef>> {
    let mut out = Vec::new();
    for p in candidate_patches(&slide.meta, family, nodes)? {
        if !is_background(&slide.read_region(&p.rect, family.spec().read_level(&slide.meta))?) {
            out.push(p);
        }
    }
    Ok(out)
}
