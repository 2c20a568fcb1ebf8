//! DDF placement ablation: one model per layer set, trained jointly from
//! scratch for a fixed number of iterations and evaluated on held-out clips.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::digest::derive_seed;
use crate::error::{Error, Result};
use crate::eval::{dual_mode_report, ModeMax};
use crate::model::{Model, ModelConfig, Topology};
use crate::param::Module;
use crate::synth::ClipManifest;
use crate::track::{track_clips, TrackerConfig};
use crate::train::{fit_iterations, model_groups, TrainingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub layer_sets: Vec<Vec<usize>>,
    pub iterations: usize,
    pub lr: f64,
}

impl AblationConfig {
    pub fn toy() -> Self {
        Self {
            channels: vec![16, 16, 16],
            strides: vec![2, 2, 1],
            layer_sets: vec![vec![], vec![1], vec![1, 2], vec![1, 2, 3]],
            iterations: 40,
            lr: 3e-3,
        }
    }

    pub fn paper_default() -> Self {
        Self { channels: vec![16, 32, 64], iterations: 2000, lr: 1e-4, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sets.is_empty() || self.iterations == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("ablation: need layer sets, iterations >= 1 and lr > 0".into()));
        }
        Ok(())
    }

    /// Model config for one layer set, other fields taken from `base`.
    pub fn model_config(&self, base: &ModelConfig, layers: &[usize]) -> Result<ModelConfig> {
        let c = ModelConfig {
            channels: self.channels.clone(),
            strides: self.strides.clone(),
            ddf_layers: layers.to_vec(),
            ..base.clone()
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ddf_layers: Vec<usize>,
    pub parameters: usize,
    pub final_loss: f64,
    pub pr: f64,
    pub sr: f64,
    pub npr: f64,
}

pub fn label(layers: &[usize]) -> String {
    if layers.is_empty() {
        "baseline".into()
    } else {
        layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("+")
    }
}

#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    cfg: &AblationConfig,
    base: &ModelConfig,
    train: &[&ClipManifest],
    test: &[&ClipManifest],
    tc: &TrainingConfig,
    tracker: &TrackerConfig,
    threshold: f64,
    mode: ModeMax,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let test_map: BTreeMap<String, ClipManifest> = test.iter().map(|c| (c.clip_id.clone(), (*c).clone())).collect();
    let mut rows = Vec::new();
    for layers in &cfg.layer_sets {
        let tag = label(layers);
        let mut model = Model::new(cfg.model_config(base, layers)?, seed)?;
        let rates: BTreeMap<String, f64> = model_groups(&model).into_iter().map(|g| (g, cfg.lr)).collect();
        let hist = fit_iterations(&mut model, Topology::Full, &rates, 0.0, cfg.iterations, 1.0, train, tc, derive_seed(seed, "ablation"))?;
        let trajs = track_clips(test, &model, Topology::Full, tracker)?;
        let refs: Vec<_> = trajs.iter().collect();
        let r = dual_mode_report(&refs, &test_map, threshold, mode)?;
        log::info!("ablation {tag}: pr {:.3} sr {:.3} npr {:.3}", r.pr, r.sr, r.npr);
        rows.push(AblationRow {
            ddf_layers: layers.clone(),
            parameters: model.param_count(),
            final_loss: hist.last().map_or(f64::NAN, |s| s.loss),
            pr: r.pr,
            sr: r.sr,
            npr: r.npr,
        });
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "ddf_layers,parameters,final_loss,pr,sr,npr";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", label(&r.ddf_layers), r.parameters, r.final_loss, r.pr, r.sr, r.npr));
    }
    s
}
