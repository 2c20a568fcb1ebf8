//! Per-frame router gates and intermediate feature maps of the DDF modules.

use std::collections::BTreeMap;

use crate::autograd::Graph;
use crate::branch::{AttributeId, GateRecord};
use crate::error::{Error, Result};
use crate::model::{Model, Topology};
use crate::synth::ClipManifest;
use crate::tensor::FeatureMap;
use crate::track::Crop;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    /// One row per frame for each traced branch.
    pub gates: BTreeMap<AttributeId, Vec<GateRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub frame: usize,
    pub layer: usize,
    /// `branch-<ATTR>`, `aggregated`, `enhanced-rgb` or `enhanced-tir`.
    pub name: String,
    pub map: FeatureMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipTrace {
    pub clip_id: String,
    pub layers: Vec<LayerTrace>,
    pub dumps: Vec<FeatureDump>,
}

/// Run the full model on search regions centered on the RGB ground truth of
/// every frame and record the gates of `branches` at each DDF layer.
/// Feature maps are kept for the frames in `dump_frames`.
pub fn trace_clip(model: &Model, clip: &ClipManifest, branches: &[AttributeId], dump_frames: &[usize]) -> Result<ClipTrace> {
    if model.ddf.is_empty() {
        return Err(Error::Config("model has no DDF layers to trace".into()));
    }
    if clip.frames.len() != clip.gt_rgb.len() || clip.frames.is_empty() {
        return Err(Error::Data(format!("clip {} has no loaded frames", clip.clip_id)));
    }
    let mut layers: Vec<LayerTrace> = model
        .ddf
        .iter()
        .map(|(l, _)| LayerTrace { layer: *l, gates: branches.iter().map(|&a| (a, Vec::new())).collect() })
        .collect();
    let mut dumps = Vec::new();
    for (t, (frame, gt)) in clip.frames.iter().zip(&clip.gt_rgb).enumerate() {
        let input = Crop::around(gt, &model.config).input(frame);
        let g = Graph::new();
        let out = model.backbone(g.constant(input.rgb), g.constant(input.tir), Topology::Full);
        let dump = dump_frames.contains(&t);
        for ((layer, ddf), lt) in out.ddf.iter().zip(&mut layers) {
            for (attr, vars) in &ddf.branches {
                if let Some(rows) = lt.gates.get_mut(attr) {
                    rows.push(GateRecord::from_vars(vars)[0]);
                }
                if dump {
                    let map = FeatureMap::new(vars.fused.value().as_ref().clone(), *layer)?;
                    dumps.push(FeatureDump { frame: t, layer: *layer, name: format!("branch-{attr}"), map });
                }
            }
            if dump {
                if let Some(ag) = &ddf.aggregated {
                    let map = FeatureMap::new(ag.value().as_ref().clone(), *layer)?;
                    dumps.push(FeatureDump { frame: t, layer: *layer, name: "aggregated".into(), map });
                }
                for (name, v) in [("enhanced-rgb", &ddf.rgb), ("enhanced-tir", &ddf.tir)] {
                    let map = FeatureMap::new(v.value().as_ref().clone(), *layer)?;
                    dumps.push(FeatureDump { frame: t, layer: *layer, name: name.into(), map });
                }
            }
        }
    }
    Ok(ClipTrace { clip_id: clip.clip_id.clone(), layers, dumps })
}

/// Mean gates before and after `boundary`.
pub fn segment_means(rows: &[GateRecord], boundary: usize) -> Result<([f64; 5], [f64; 5])> {
    if boundary == 0 || boundary >= rows.len() {
        return Err(Error::Data(format!("boundary {boundary} outside 1..{}", rows.len())));
    }
    let mean = |s: &[GateRecord]| {
        let mut m = [0.0; 5];
        for r in s {
            for (acc, v) in m.iter_mut().zip(r.as_array()) {
                *acc += v / s.len() as f64;
            }
        }
        m
    };
    Ok((mean(&rows[..boundary]), mean(&rows[boundary..])))
}
