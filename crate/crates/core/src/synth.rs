//! Deterministic paired RGB/TIR clips with per-attribute degradations.
//!
//! Each clip renders one moving target in both modalities (a textured
//! rectangle in RGB, a hot ellipse in TIR) and applies exactly the
//! degradation of its attribute tag. Everything derives from the clip
//! seed, so regeneration is byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::branch::AttributeId;
use crate::digest::{derive_seed, json_digest};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Target side length range in pixels.
    pub target_min: f64,
    pub target_max: f64,
    /// Maximum target speed in pixels per frame.
    pub max_speed: f64,
    /// Bound on the distance between RGB and TIR box centers.
    pub alignment_jitter: f64,
    pub noise: f64,
    pub occlusion_coverage: f64,
    /// Fractions of the clip length `[start, end)`.
    pub occlusion_interval: [f64; 2],
    pub lr_factor: usize,
    pub ei_low: f64,
    pub ei_high: f64,
    pub ei_period: usize,
    pub tc_strength: f64,
    pub tc_interval: [f64; 2],
    pub distractors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 16,
            target_min: 10.0,
            target_max: 14.0,
            max_speed: 1.5,
            alignment_jitter: 1.0,
            noise: 6.0,
            occlusion_coverage: 0.5,
            occlusion_interval: [0.25, 0.75],
            lr_factor: 4,
            ei_low: 0.25,
            ei_high: 2.5,
            ei_period: 4,
            tc_strength: 0.9,
            tc_interval: [0.25, 1.0],
            distractors: 2,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("scene: {msg}")));
        if self.width < 16 || self.height < 16 {
            return bad("canvas must be at least 16x16");
        }
        if self.frames == 0 {
            return bad("frames must be >= 1");
        }
        let limit = self.width.min(self.height) as f64 / 2.0;
        if !(self.target_min > 1.0 && self.target_min <= self.target_max && self.target_max < limit) {
            return bad("target size range must satisfy 1 < min <= max < canvas/2");
        }
        if !(0.0..=8.0).contains(&self.max_speed) {
            return bad("max_speed must be in [0, 8]");
        }
        if !(0.0..=4.0).contains(&self.alignment_jitter) {
            return bad("alignment_jitter must be in [0, 4]");
        }
        if !(0.0..=32.0).contains(&self.noise) {
            return bad("noise must be in [0, 32]");
        }
        if !(0.0..=1.0).contains(&self.occlusion_coverage) {
            return bad("occlusion_coverage must be in [0, 1]");
        }
        for (name, [a, b]) in [("occlusion_interval", self.occlusion_interval), ("tc_interval", self.tc_interval)] {
            if !(0.0 <= a && a < b && b <= 1.0) {
                return Err(Error::Config(format!("scene: {name} must satisfy 0 <= start < end <= 1")));
            }
        }
        if !(2..=8).contains(&self.lr_factor) {
            return bad("lr_factor must be in [2, 8]");
        }
        if !(self.ei_low > 0.0 && self.ei_low <= 1.0 && self.ei_high >= 1.0 && self.ei_high <= 8.0) {
            return bad("illumination gains must satisfy 0 < low <= 1 <= high <= 8");
        }
        if self.ei_period == 0 {
            return bad("ei_period must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.tc_strength) {
            return bad("tc_strength must be in [0, 1]");
        }
        if !(1..=8).contains(&self.distractors) {
            return bad("distractors must be in [1, 8]");
        }
        Ok(())
    }

    fn frame_range(&self, interval: [f64; 2]) -> (usize, usize) {
        let n = self.frames as f64;
        let start = (interval[0] * n).floor() as usize;
        let end = ((interval[1] * n).ceil() as usize).clamp(start, self.frames);
        (start, end)
    }

    /// Frames `[start, end)` covered by the occluder.
    pub fn occlusion_frames(&self) -> (usize, usize) {
        self.frame_range(self.occlusion_interval)
    }

    pub fn crossover_frames(&self) -> (usize, usize) {
        self.frame_range(self.tc_interval)
    }
}

/// One applied transform, tagged with the frame it affected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Occluder { frame: usize, bbox: BBox },
    LowResolution { frame: usize, factor: usize },
    Illumination { frame: usize, gain: f64 },
    ThermalCrossover { frame: usize, mix: f64 },
    Distractor { frame: usize, bbox: BBox },
}

impl Degradation {
    pub fn frame(&self) -> usize {
        match *self {
            Degradation::Occluder { frame, .. }
            | Degradation::LowResolution { frame, .. }
            | Degradation::Illumination { frame, .. }
            | Degradation::ThermalCrossover { frame, .. }
            | Degradation::Distractor { frame, .. } => frame,
        }
    }

    /// The attribute this transform belongs to.
    pub fn attribute(&self) -> AttributeId {
        match self {
            Degradation::Occluder { .. } => AttributeId::OCC,
            Degradation::LowResolution { .. } => AttributeId::LR,
            Degradation::Illumination { .. } => AttributeId::EI,
            Degradation::ThermalCrossover { .. } => AttributeId::TC,
            Degradation::Distractor { .. } => AttributeId::SA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePair {
    pub rgb: Image,
    pub tir: Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStorage {
    #[default]
    Png,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipManifest {
    pub clip_id: String,
    pub attribute: AttributeId,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub gt_rgb: Vec<BBox>,
    pub gt_tir: Vec<BBox>,
    pub degradations: Vec<Degradation>,
    #[serde(default)]
    pub storage: FrameStorage,
    #[serde(skip)]
    pub frames: Vec<FramePair>,
}

impl ClipManifest {
    pub fn len(&self) -> usize {
        self.frames.len().max(self.gt_rgb.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_file(&self, index: usize, modality: &str) -> String {
        let ext = match self.storage {
            FrameStorage::Png => "png",
            FrameStorage::Raw => "raw",
        };
        format!("{modality}_{index:04}.{ext}")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(self)?)?;
        for (i, f) in self.frames.iter().enumerate() {
            for (img, m) in [(&f.rgb, "rgb"), (&f.tir, "tir")] {
                let path = dir.join(self.frame_file(i, m));
                match self.storage {
                    FrameStorage::Png => img.save_png(&path)?,
                    FrameStorage::Raw => fs::write(path, img.to_raw())?,
                }
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut clip: ClipManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut frames = Vec::with_capacity(clip.gt_rgb.len());
        for i in 0..clip.gt_rgb.len() {
            let load = |m: &str| -> Result<Image> {
                let path = dir.join(clip.frame_file(i, m));
                match clip.storage {
                    FrameStorage::Png => Image::load_png(&path),
                    FrameStorage::Raw => Image::from_raw(&fs::read(path)?),
                }
            };
            let rgb = load("rgb")?;
            let tir = load("tir")?;
            frames.push(FramePair { rgb, tir });
        }
        clip.frames = frames;
        clip.check()?;
        Ok(clip)
    }

    /// Structural invariants: equal lengths, valid boxes, single-attribute
    /// degradations.
    pub fn check(&self) -> Result<()> {
        let n = self.gt_rgb.len();
        if n == 0 || self.gt_tir.len() != n || (!self.frames.is_empty() && self.frames.len() != n) {
            return Err(Error::Data(format!("clip {}: inconsistent lengths", self.clip_id)));
        }
        for b in self.gt_rgb.iter().chain(&self.gt_tir) {
            b.validate()?;
        }
        if let Some(d) = self.degradations.iter().find(|d| d.attribute() != self.attribute) {
            return Err(Error::Data(format!(
                "clip {} tagged {} carries a {} degradation",
                self.clip_id,
                self.attribute,
                d.attribute()
            )));
        }
        Ok(())
    }

    /// Digest of metadata plus every frame's pixels.
    pub fn digest(&self) -> String {
        let mut bytes = serde_json::to_vec(self).expect("manifest json");
        for f in &self.frames {
            bytes.extend_from_slice(&f.rgb.to_raw());
            bytes.extend_from_slice(&f.tir.to_raw());
        }
        crate::digest::sha256_hex(&bytes)
    }
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Debug, Clone, Copy)]
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Mover {
    fn spawn(cfg: &SceneConfig, w: f64, h: f64, rng: &mut ChaCha8Rng) -> Self {
        let (mx, my) = (w / 2.0 + 2.0, h / 2.0 + 2.0);
        let cx = rng.random_range(mx..cfg.width as f64 - mx);
        let cy = rng.random_range(my..cfg.height as f64 - my);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let speed = if cfg.max_speed > 0.0 {
            rng.random_range(0.5 * cfg.max_speed..=cfg.max_speed)
        } else {
            0.0
        };
        Self {
            cx,
            cy,
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            w,
            h,
        }
    }

    fn bbox(&self) -> BBox {
        BBox {
            x: self.cx - self.w / 2.0,
            y: self.cy - self.h / 2.0,
            w: self.w,
            h: self.h,
        }
    }

    fn step(&mut self, cfg: &SceneConfig) {
        let (mx, my) = (self.w / 2.0 + 1.0, self.h / 2.0 + 1.0);
        let (xmax, ymax) = (cfg.width as f64 - mx, cfg.height as f64 - my);
        self.cx += self.vx;
        self.cy += self.vy;
        if self.cx < mx || self.cx > xmax {
            self.vx = -self.vx;
            self.cx = self.cx.clamp(mx, xmax);
        }
        if self.cy < my || self.cy > ymax {
            self.vy = -self.vy;
            self.cy = self.cy.clamp(my, ymax);
        }
    }
}

/// Fraction of pixel `[px, px+1] × [py, py+1]` covered by `b`.
fn rect_coverage(b: &BBox, px: usize, py: usize) -> f64 {
    let (x, y) = (px as f64, py as f64);
    let cx = ((x + 1.0).min(b.right()) - x.max(b.x)).max(0.0);
    let cy = ((y + 1.0).min(b.bottom()) - y.max(b.y)).max(0.0);
    cx * cy
}

/// Ellipse inscribed in `b`, 4×4 supersampled.
fn ellipse_coverage(b: &BBox, px: usize, py: usize) -> f64 {
    let (cx, cy) = b.center();
    let (rx, ry) = (b.w / 2.0, b.h / 2.0);
    let mut hits = 0;
    for sy in 0..4 {
        for sx in 0..4 {
            let x = px as f64 + (sx as f64 + 0.5) / 4.0;
            let y = py as f64 + (sy as f64 + 0.5) / 4.0;
            let (dx, dy) = ((x - cx) / rx, (y - cy) / ry);
            if dx * dx + dy * dy <= 1.0 {
                hits += 1;
            }
        }
    }
    hits as f64 / 16.0
}

fn pixel_span(b: &BBox, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let x0 = b.x.floor().max(0.0) as usize;
    let y0 = b.y.floor().max(0.0) as usize;
    let x1 = (b.right().ceil().max(0.0) as usize).min(width);
    let y1 = (b.bottom().ceil().max(0.0) as usize).min(height);
    (x0, y0, x1, y1)
}

/// Float canvas used while compositing one modality.
struct Canvas {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn blend(&mut self, x: usize, y: usize, color: &[f64], alpha: f64) {
        if alpha <= 0.0 {
            return;
        }
        for c in 0..self.channels {
            let v = &mut self.data[(y * self.width + x) * self.channels + c];
            *v = *v * (1.0 - alpha) + color[c] * alpha;
        }
    }

    fn fill_rect(&mut self, b: &BBox, color: &[f64]) {
        let (x0, y0, x1, y1) = pixel_span(b, self.width, self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.blend(x, y, color, rect_coverage(b, x, y));
            }
        }
    }

    fn fill_ellipse(&mut self, b: &BBox, color: &[f64]) {
        let (x0, y0, x1, y1) = pixel_span(b, self.width, self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.blend(x, y, color, ellipse_coverage(b, x, y));
            }
        }
    }

    /// Block-average by `factor`, then nearest-neighbour upsample.
    fn degrade_resolution(&mut self, factor: usize) {
        let (w, h, ch) = (self.width, self.height, self.channels);
        let src = self.data.clone();
        for by in (0..h).step_by(factor) {
            for bx in (0..w).step_by(factor) {
                let (ye, xe) = ((by + factor).min(h), (bx + factor).min(w));
                let n = ((ye - by) * (xe - bx)) as f64;
                for c in 0..ch {
                    let mut acc = 0.0;
                    for y in by..ye {
                        for x in bx..xe {
                            acc += src[(y * w + x) * ch + c];
                        }
                    }
                    for y in by..ye {
                        for x in bx..xe {
                            self.data[(y * w + x) * ch + c] = acc / n;
                        }
                    }
                }
            }
        }
    }

    fn into_image(self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }
}

const RGB_TARGET: [f64; 3] = [205.0, 70.0, 55.0];
const RGB_TARGET_CORE: [f64; 3] = [240.0, 200.0, 80.0];
const RGB_OCCLUDER: [f64; 3] = [95.0, 105.0, 100.0];
const TIR_BACKGROUND: f64 = 70.0;
const TIR_TARGET: f64 = 215.0;
const TIR_OCCLUDER: f64 = 45.0;

pub fn generate_clip(attribute: AttributeId, seed: u64, config: &SceneConfig) -> Result<ClipManifest> {
    generate_named_clip(&format!("{attribute}-{seed:016x}"), attribute, seed, config)
}

pub fn generate_named_clip(
    clip_id: &str,
    attribute: AttributeId,
    seed: u64,
    config: &SceneConfig,
) -> Result<ClipManifest> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);

    // Static textured backgrounds.
    let tint = [
        rng.random_range(70.0..120.0),
        rng.random_range(80.0..130.0),
        rng.random_range(70.0..120.0),
    ];
    let slope = rng.random_range(-0.4..0.4);
    let mut rgb_bg = vec![0.0; w * h * 3];
    let mut tir_bg = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let ramp = slope * (x as f64 - w as f64 / 2.0);
            for c in 0..3 {
                rgb_bg[(y * w + x) * 3 + c] = tint[c] + ramp + rng.random_range(-cfg.noise..=cfg.noise);
            }
            tir_bg[y * w + x] = TIR_BACKGROUND + rng.random_range(-cfg.noise..=cfg.noise);
        }
    }

    let tw = rng.random_range(cfg.target_min..=cfg.target_max);
    let th = rng.random_range(cfg.target_min..=cfg.target_max);
    let mut target = Mover::spawn(cfg, tw, th, &mut rng);
    let offset = {
        let r = rng.random_range(0.0..=cfg.alignment_jitter);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        (r * a.cos(), r * a.sin())
    };
    let mut distractors: Vec<Mover> = if attribute == AttributeId::SA {
        (0..cfg.distractors).map(|_| Mover::spawn(cfg, tw, th, &mut rng)).collect()
    } else {
        Vec::new()
    };

    let (occ0, occ1) = cfg.occlusion_frames();
    let (tc0, tc1) = cfg.crossover_frames();

    let mut frames = Vec::with_capacity(cfg.frames);
    let mut gt_rgb = Vec::with_capacity(cfg.frames);
    let mut gt_tir = Vec::with_capacity(cfg.frames);
    let mut degradations = Vec::new();

    for t in 0..cfg.frames {
        if t > 0 {
            target.step(cfg);
            for d in &mut distractors {
                d.step(cfg);
            }
        }
        let b_rgb = target.bbox();
        let b_tir = BBox {
            x: b_rgb.x + offset.0,
            y: b_rgb.y + offset.1,
            ..b_rgb
        };
        gt_rgb.push(b_rgb);
        gt_tir.push(b_tir);

        let mut rgb = Canvas { width: w, height: h, channels: 3, data: rgb_bg.clone() };
        let mut tir = Canvas { width: w, height: h, channels: 1, data: tir_bg.clone() };

        for d in &distractors {
            let b = d.bbox();
            draw_target(&mut rgb, &mut tir, &b, &BBox { x: b.x + offset.0, y: b.y + offset.1, ..b }, TIR_TARGET);
            degradations.push(Degradation::Distractor { frame: t, bbox: b });
        }

        let mut tir_level = TIR_TARGET;
        if attribute == AttributeId::TC && (tc0..tc1).contains(&t) {
            let mix = cfg.tc_strength;
            tir_level = TIR_TARGET + (TIR_BACKGROUND - TIR_TARGET) * mix;
            degradations.push(Degradation::ThermalCrossover { frame: t, mix });
        }
        draw_target(&mut rgb, &mut tir, &b_rgb, &b_tir, tir_level);

        if attribute == AttributeId::OCC && (occ0..occ1).contains(&t) {
            // Covers the left `coverage` fraction of the target, with a
            // one-pixel margin above and below.
            let occ = BBox {
                x: b_rgb.x - 1.0,
                y: b_rgb.y - 1.0,
                w: 1.0 + cfg.occlusion_coverage * b_rgb.w,
                h: b_rgb.h + 2.0,
            };
            rgb.fill_rect(&occ, &RGB_OCCLUDER);
            tir.fill_rect(&BBox { x: occ.x + offset.0, y: occ.y + offset.1, ..occ }, &[TIR_OCCLUDER]);
            degradations.push(Degradation::Occluder { frame: t, bbox: occ });
        }

        if attribute == AttributeId::EI {
            let gain = if (t / cfg.ei_period) % 2 == 0 { cfg.ei_high } else { cfg.ei_low };
            for v in &mut rgb.data {
                *v *= gain;
            }
            degradations.push(Degradation::Illumination { frame: t, gain });
        }

        if attribute == AttributeId::LR {
            rgb.degrade_resolution(cfg.lr_factor);
            tir.degrade_resolution(cfg.lr_factor);
            degradations.push(Degradation::LowResolution { frame: t, factor: cfg.lr_factor });
        }

        frames.push(FramePair { rgb: rgb.into_image(), tir: tir.into_image() });
    }

    let clip = ClipManifest {
        clip_id: clip_id.to_string(),
        attribute,
        seed,
        width: w,
        height: h,
        gt_rgb,
        gt_tir,
        degradations,
        storage: FrameStorage::Png,
        frames,
    };
    clip.check()?;
    Ok(clip)
}

fn draw_target(rgb: &mut Canvas, tir: &mut Canvas, b_rgb: &BBox, b_tir: &BBox, tir_level: f64) {
    rgb.fill_rect(b_rgb, &RGB_TARGET);
    let (cx, cy) = b_rgb.center();
    let core = BBox { x: cx - b_rgb.w / 4.0, y: cy - b_rgb.h / 4.0, w: b_rgb.w / 2.0, h: b_rgb.h / 2.0 };
    rgb.fill_rect(&core, &RGB_TARGET_CORE);
    tir.fill_ellipse(b_tir, &[tir_level]);
}

// ---------------------------------------------------------------------------
// Attribute subsets

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub attribute: AttributeId,
    pub seed: u64,
    pub frames: usize,
    /// Directory relative to the index file.
    pub path: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestIndex {
    pub version: u32,
    pub split: String,
    pub seed: u64,
    pub scene_digest: String,
    pub subsets: BTreeMap<AttributeId, Vec<String>>,
    /// Union of all subsets.
    pub all: Vec<String>,
    pub clips: BTreeMap<String, ClipEntry>,
}

impl ManifestIndex {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Clip ids of `split`, either `all` or an attribute name.
    pub fn split_ids(&self, split: &str) -> Result<Vec<String>> {
        if split == "all" {
            return Ok(self.all.clone());
        }
        let attr: AttributeId = split.parse()?;
        self.subsets
            .get(&attr)
            .cloned()
            .ok_or_else(|| Error::Data(format!("split '{split}' not in index")))
    }
}

/// An index together with its generated clips.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: ManifestIndex,
    pub clips: BTreeMap<String, ClipManifest>,
}

impl Dataset {
    pub fn split(&self, split: &str) -> Result<Vec<&ClipManifest>> {
        self.index
            .split_ids(split)?
            .iter()
            .map(|id| {
                self.clips
                    .get(id)
                    .ok_or_else(|| Error::Data(format!("clip {id} missing from dataset")))
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (id, clip) in &self.clips {
            clip.save(&dir.join(&self.index.clips[id].path))?;
        }
        fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&self.index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: ManifestIndex = serde_json::from_slice(&fs::read(dir.join("index.json"))?)?;
        let mut clips = BTreeMap::new();
        for (id, entry) in &index.clips {
            clips.insert(id.clone(), ClipManifest::load(&dir.join(&entry.path))?);
        }
        Ok(Self { index, clips })
    }
}

pub fn make_attribute_subsets(
    config: &SceneConfig,
    counts: &BTreeMap<AttributeId, usize>,
    seed: u64,
    split: &str,
) -> Result<Dataset> {
    config.validate()?;
    if let Some((a, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::Config(format!("count for {a} must be >= 1")));
    }
    let mut subsets = BTreeMap::new();
    let mut clips = BTreeMap::new();
    let mut entries = BTreeMap::new();
    let mut all = Vec::new();
    for attr in AttributeId::ALL {
        let Some(&n) = counts.get(&attr) else { continue };
        let mut ids = Vec::with_capacity(n);
        for k in 0..n {
            let id = format!("{split}-{attr}-{k:03}");
            let clip_seed = derive_seed(seed, &id);
            let clip = generate_named_clip(&id, attr, clip_seed, config)?;
            entries.insert(
                id.clone(),
                ClipEntry { attribute: attr, seed: clip_seed, frames: clip.len(), path: format!("clips/{id}") },
            );
            clips.insert(id.clone(), clip);
            ids.push(id.clone());
            all.push(id);
        }
        subsets.insert(attr, ids);
    }
    let index = ManifestIndex {
        version: 1,
        split: split.to_string(),
        seed,
        scene_digest: json_digest(config),
        subsets,
        all,
        clips: entries,
    };
    Ok(Dataset { index, clips })
}

/// Check subset disjointness, the `all` union, and that every clip's tag
/// and degradations match its subset key.
pub fn audit_dataset(ds: &Dataset) -> Result<()> {
    let mut seen = BTreeSet::new();
    for (attr, ids) in &ds.index.subsets {
        for id in ids {
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("clip {id} appears in more than one subset")));
            }
            let clip = ds
                .clips
                .get(id)
                .ok_or_else(|| Error::Data(format!("clip {id} missing")))?;
            if clip.attribute != *attr || ds.index.clips[id].attribute != *attr {
                return Err(Error::Data(format!("clip {id} tagged {} listed under {attr}", clip.attribute)));
            }
            clip.check()?;
            let expect_degradation = *attr != AttributeId::GEN;
            if expect_degradation == clip.degradations.is_empty() {
                return Err(Error::Data(format!("clip {id}: degradation metadata does not match {attr}")));
            }
        }
    }
    let union: BTreeSet<String> = ds.index.all.iter().cloned().collect();
    if union != seen || union.len() != ds.index.all.len() {
        return Err(Error::Data("'all' split is not the union of the subsets".into()));
    }
    Ok(())
}
