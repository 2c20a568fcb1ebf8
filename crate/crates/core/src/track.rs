//! Online tracking over a clip with a bounded training-frame memory.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::image::sample_region;
use crate::model::{FrameInput, Model, ModelConfig, Topology, INPUT_CHANNELS};
use crate::synth::{ClipManifest, FramePair};
use crate::tensor::Tensor;

/// Square search region in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Crop {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
    pub input_size: usize,
    pub stride: usize,
}

impl Crop {
    /// Region of `search_scale² ×` the box area, centered on the box.
    pub fn around(b: &BBox, cfg: &ModelConfig) -> Self {
        let (cx, cy) = b.center();
        Self::centered(cx, cy, cfg.search_scale * b.area().sqrt(), cfg)
    }

    pub fn centered(cx: f64, cy: f64, side: f64, cfg: &ModelConfig) -> Self {
        Self { cx, cy, side, input_size: cfg.input_size, stride: cfg.total_stride() }
    }

    /// Image pixels per feature-grid cell.
    pub fn cell(&self) -> f64 {
        self.side / self.input_size as f64 * self.stride as f64
    }

    fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn to_grid(&self, b: &BBox) -> BBox {
        let (ox, oy) = self.origin();
        let k = self.cell();
        BBox { x: (b.x - ox) / k, y: (b.y - oy) / k, w: b.w / k, h: b.h / k }
    }

    pub fn from_grid(&self, b: &BBox) -> BBox {
        let (ox, oy) = self.origin();
        let k = self.cell();
        BBox { x: ox + b.x * k, y: oy + b.y * k, w: b.w * k, h: b.h * k }
    }

    pub fn input(&self, frame: &FramePair) -> FrameInput {
        let s = self.input_size;
        FrameInput {
            rgb: sample_region(&frame.rgb, self.cx, self.cy, self.side, s, INPUT_CHANNELS),
            tir: sample_region(&frame.tir, self.cx, self.cy, self.side, s, INPUT_CHANNELS),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Maximum stored training frames, the annotated first frame included.
    pub memory_capacity: usize,
    /// Add a pseudo-labeled frame every this many confident frames.
    pub refresh_interval: usize,
    /// Peak score below which the target counts as lost.
    pub lost_floor: f64,
    /// Weight of the new size estimate; sizes are blended geometrically with
    /// the previous estimate. 1 keeps the raw prediction.
    pub size_update: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { memory_capacity: 3, refresh_interval: 1, lost_floor: 0.1, size_update: 1.0 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory_capacity == 0 || self.refresh_interval == 0 {
            return Err(Error::Config("tracker: capacity and refresh interval must be >= 1".into()));
        }
        if self.lost_floor.is_nan() {
            return Err(Error::Config("tracker: lost_floor is NaN".into()));
        }
        if !(self.size_update > 0.0 && self.size_update <= 1.0) {
            return Err(Error::Config(format!("tracker: size_update {} outside (0, 1]", self.size_update)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub frame: usize,
    /// Projected features `(1, D, H, W)`.
    pub features: Tensor,
    /// Label in feature-grid units.
    pub bbox: BBox,
}

/// First frame is kept for the whole sequence; the other slots hold the
/// most recent pseudo-labeled frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackState {
    pub estimate: BBox,
    anchor: MemoryEntry,
    recent: VecDeque<MemoryEntry>,
    capacity: usize,
    refresh_interval: usize,
    since_refresh: usize,
}

impl TrackState {
    pub fn new(init: MemoryEntry, estimate: BBox, cfg: &TrackerConfig) -> Self {
        Self {
            estimate,
            anchor: init,
            recent: VecDeque::new(),
            capacity: cfg.memory_capacity,
            refresh_interval: cfg.refresh_interval,
            since_refresh: 0,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.recent.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        std::iter::once(&self.anchor).chain(self.recent.iter())
    }

    pub fn push(&mut self, entry: MemoryEntry) {
        self.since_refresh += 1;
        if self.capacity < 2 || self.since_refresh < self.refresh_interval {
            return;
        }
        self.since_refresh = 0;
        if self.recent.len() + 1 >= self.capacity {
            self.recent.pop_front();
        }
        self.recent.push_back(entry);
    }
}

pub const FLAG_OK: u8 = 0;
pub const FLAG_LOST: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub clip_id: String,
    pub boxes: Vec<BBox>,
    pub flags: Vec<u8>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// One line per frame: `frame_index x y w h flag`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, (b, f)) in self.boxes.iter().zip(&self.flags).enumerate() {
            writeln!(s, "{i} {} {} {} {} {f}", b.x, b.y, b.w, b.h).unwrap();
        }
        s
    }

    pub fn from_text(clip_id: &str, text: &str) -> Result<Self> {
        let mut boxes = Vec::new();
        let mut flags = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || Error::Data(format!("{clip_id}: malformed trajectory line {}", n + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 6 || parts[0].parse::<usize>().map_err(|_| bad())? != n {
                return Err(bad());
            }
            let v: Vec<f64> = parts[1..5].iter().map(|p| p.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            boxes.push(BBox::new(v[0], v[1], v[2], v[3])?);
            flags.push(parts[5].parse().map_err(|_| bad())?);
        }
        Ok(Self { clip_id: clip_id.to_string(), boxes, flags })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(clip_id: &str, path: &Path) -> Result<Self> {
        Self::from_text(clip_id, &std::fs::read_to_string(path)?)
    }
}

/// Index and value of the largest entry; the first one wins ties.
fn argmax(v: &[f64]) -> (usize, f64) {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
}

/// Box in grid units decoded from the LTRB map at cell `k`.
pub fn decode_box(ltrb: &Tensor, k: usize) -> BBox {
    let [_, _, _, w] = ltrb.dims4();
    let (i, j) = (k / w, k % w);
    let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
    let (l, t, r, b) = (ltrb.at4(0, 0, i, j), ltrb.at4(0, 1, i, j), ltrb.at4(0, 2, i, j), ltrb.at4(0, 3, i, j));
    BBox { x: px - l, y: py - t, w: l + r, h: t + b }
}

fn features(model: &Model, input: &FrameInput, topology: Topology) -> Tensor {
    let g = Graph::new();
    model.features(&g, input, topology).value().as_ref().clone()
}

pub fn track_sequence(clip: &ClipManifest, model: &Model, topology: Topology, cfg: &TrackerConfig) -> Result<Trajectory> {
    cfg.validate()?;
    if clip.frames.is_empty() || clip.gt_rgb.is_empty() {
        return Err(Error::Data(format!("clip {} has no frames", clip.clip_id)));
    }
    let mcfg = &model.config;
    let (fw, fh) = (clip.width as f64, clip.height as f64);
    let init = clip.gt_rgb[0];
    init.validate()?;
    let crop = Crop::around(&init, mcfg);
    let entry = MemoryEntry { frame: 0, features: features(model, &crop.input(&clip.frames[0]), topology), bbox: crop.to_grid(&init) };
    let mut state = TrackState::new(entry, init, cfg);
    let mut boxes = vec![init];
    let mut flags = vec![FLAG_OK];

    for (t, frame) in clip.frames.iter().enumerate().skip(1) {
        let crop = Crop::around(&state.estimate, mcfg);
        let g = Graph::new();
        let test = model.features(&g, &crop.input(frame), topology);
        let train: Vec<_> = state.entries().map(|e| (g.constant(e.features.clone()), e.bbox)).collect();
        let pred = model.predict(&train, test);
        let score = pred.score.value();
        let (k, peak) = argmax(score.data());
        if !(peak >= cfg.lost_floor) {
            boxes.push(state.estimate);
            flags.push(FLAG_LOST);
            continue;
        }
        let grid_box = decode_box(&pred.ltrb.value(), k);
        let raw = crop.from_grid(&grid_box);
        let a = cfg.size_update;
        let prev = state.estimate;
        let (w, h) = (prev.w.powf(1.0 - a) * raw.w.powf(a), prev.h.powf(1.0 - a) * raw.h.powf(a));
        let (cx, cy) = raw.center();
        let est = BBox { x: cx - 0.5 * w, y: cy - 0.5 * h, w, h }.clip(fw, fh, 1.0);
        state.estimate = est;
        state.push(MemoryEntry { frame: t, features: test.value().as_ref().clone(), bbox: crop.to_grid(&est) });
        boxes.push(est);
        flags.push(FLAG_OK);
    }
    Ok(Trajectory { clip_id: clip.clip_id.clone(), boxes, flags })
}

/// Track every clip, in the given order.
pub fn track_clips(clips: &[&ClipManifest], model: &Model, topology: Topology, cfg: &TrackerConfig) -> Result<Vec<Trajectory>> {
    clips.iter().map(|c| track_sequence(c, model, topology, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branch::AttributeId;
    use crate::synth::{generate_clip, SceneConfig};

    #[test]
    fn crop_grid_roundtrip() {
        let cfg = ModelConfig::toy();
        let b = BBox::new(10.0, 12.0, 8.0, 12.5).unwrap();
        let crop = Crop::around(&b, &cfg);
        let g = crop.to_grid(&b);
        let back = crop.from_grid(&g);
        assert!((back.x - b.x).abs() < 1e-12 && (back.h - b.h).abs() < 1e-12);
        // The box is centered in the 8x8 grid.
        let (gx, gy) = g.center();
        assert!((gx - 4.0).abs() < 1e-12 && (gy - 4.0).abs() < 1e-12);
        // Search area is four times the box area.
        assert!((crop.side * crop.side - 4.0 * b.area()).abs() < 1e-9);
    }

    #[test]
    fn decode_inverts_ltrb_map() {
        let b = BBox::new(1.3, 2.2, 3.0, 2.5).unwrap();
        let m = crate::model::ltrb_map(8, 8, &b);
        let d = decode_box(&m, 3 * 8 + 2);
        assert!((d.x - b.x).abs() < 1e-12 && (d.w - b.w).abs() < 1e-12 && (d.h - b.h).abs() < 1e-12);
    }

    fn entry(frame: usize) -> MemoryEntry {
        MemoryEntry { frame, features: Tensor::zeros(&[1, 1, 1, 1]), bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap() }
    }

    #[test]
    fn memory_respects_capacity() {
        let cfg = TrackerConfig { memory_capacity: 2, ..TrackerConfig::default() };
        let mut s = TrackState::new(entry(0), BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), &cfg);
        for t in 1..10 {
            s.push(entry(t));
            assert!(s.len() <= 2);
        }
        let frames: Vec<usize> = s.entries().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 9]);
    }

    #[test]
    fn refresh_interval_skips_frames() {
        let cfg = TrackerConfig { memory_capacity: 4, refresh_interval: 3, ..TrackerConfig::default() };
        let mut s = TrackState::new(entry(0), BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(), &cfg);
        for t in 1..=9 {
            s.push(entry(t));
        }
        let frames: Vec<usize> = s.entries().map(|e| e.frame).collect();
        assert_eq!(frames, vec![0, 3, 6, 9]);
    }

    #[test]
    fn single_frame_is_passthrough() {
        let clip = generate_clip(AttributeId::GEN, 1, &SceneConfig { frames: 1, ..SceneConfig::default() }).unwrap();
        let model = Model::new(ModelConfig::toy(), 0).unwrap();
        let traj = track_sequence(&clip, &model, Topology::Full, &TrackerConfig::default()).unwrap();
        assert_eq!(traj.boxes, clip.gt_rgb);
        assert_eq!(traj.flags, vec![FLAG_OK]);
    }

    #[test]
    fn lost_target_repeats_previous_box() {
        let clip = generate_clip(AttributeId::GEN, 1, &SceneConfig { frames: 3, ..SceneConfig::default() }).unwrap();
        let model = Model::new(ModelConfig::toy(), 0).unwrap();
        let cfg = TrackerConfig { lost_floor: f64::INFINITY, ..TrackerConfig::default() };
        let traj = track_sequence(&clip, &model, Topology::Full, &cfg).unwrap();
        assert_eq!(traj.boxes, vec![clip.gt_rgb[0]; 3]);
        assert_eq!(traj.flags, vec![FLAG_OK, FLAG_LOST, FLAG_LOST]);
    }

    #[test]
    fn trajectory_text_roundtrip() {
        let t = Trajectory {
            clip_id: "c".into(),
            boxes: vec![BBox::new(0.1, 0.2, 3.0, 4.000000000000001).unwrap(), BBox::new(1.0, 2.0, 3.0, 4.0).unwrap()],
            flags: vec![0, 1],
        };
        let text = t.to_text();
        assert!(text.starts_with("0 0.1 0.2 3 4.000000000000001 0\n"));
        assert_eq!(Trajectory::from_text("c", &text).unwrap(), t);
        assert!(Trajectory::from_text("c", "0 1 2 3\n").is_err());
    }
}
