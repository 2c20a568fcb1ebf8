//! Staged training: GEN branch, attribute branches one at a time, AFM,
//! then EFM with fine-tuning. Freezing is enforced per parameter group and
//! verified by hashing before and after each stage.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::AfmParams;
use crate::autograd::{Graph, Gradients};
use crate::bbox::BBox;
use crate::branch::AttributeId;
use crate::digest::derive_seed;
use crate::error::{Error, Result};
use crate::model::{tracking_loss, FrameInput, Model, ModelConfig, Topology};
use crate::param::Module;
use crate::synth::{ClipManifest, Dataset};
use crate::tensor::Tensor;
use crate::track::Crop;

// ---------------------------------------------------------------------------
// Parameter groups

/// Group of a parameter name: `backbone`, `predictor`, `branch.<ATTR>`,
/// `afm` or `efm`.
pub fn param_group(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or("");
    if head.starts_with("ddf") {
        match (parts.next(), parts.next()) {
            (Some("branch"), Some(attr)) => format!("branch.{attr}"),
            (Some("afm"), _) => "afm".into(),
            (Some(s), _) if s.starts_with("efm") => "efm".into(),
            (Some(s), _) => s.into(),
            _ => head.into(),
        }
    } else {
        head.into()
    }
}

pub fn model_groups(model: &Model) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    model.visit(&mut |p| {
        out.insert(param_group(p.name()));
    });
    out
}

/// SHA-256 over names and values of every parameter in each group.
pub fn group_hashes(model: &Model) -> BTreeMap<String, String> {
    let mut hashers: BTreeMap<String, Sha256> = BTreeMap::new();
    model.visit(&mut |p| {
        let h = hashers.entry(param_group(p.name())).or_default();
        h.update(p.name().as_bytes());
        h.update(p.value().canonical_bytes());
    });
    hashers.into_iter().map(|(k, h)| (k, hex::encode(h.finalize()))).collect()
}

/// Groups excluded from updates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask(pub BTreeSet<String>);

impl FreezeMask {
    /// Everything in `groups` that has no learning rate.
    pub fn complement(groups: &BTreeSet<String>, rates: &BTreeMap<String, f64>) -> Self {
        Self(groups.iter().filter(|g| !rates.contains_key(*g)).cloned().collect())
    }

    pub fn contains(&self, group: &str) -> bool {
        self.0.contains(group)
    }

    pub fn validate(&self, groups: &BTreeSet<String>) -> Result<()> {
        match self.0.iter().find(|g| !groups.contains(*g)) {
            Some(g) => Err(Error::Config(format!("freeze mask names unknown group '{g}'"))),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer

/// AdamW with decoupled weight decay. State exists only for parameters
/// whose group has a learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    rates: BTreeMap<String, f64>,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    scale: f64,
    state: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(rates: BTreeMap<String, f64>, weight_decay: f64) -> Self {
        Self { rates, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, scale: 1.0, state: BTreeMap::new() }
    }

    /// Multiplier applied to every learning rate.
    pub fn set_scale(&mut self, scale: f64) {
        self.scale = scale;
    }

    pub fn state_len(&self) -> usize {
        self.state.len()
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn step(&mut self, model: &mut impl Module, grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let rates = &self.rates;
        let scale = self.scale;
        let state = &mut self.state;
        model.visit_mut(&mut |p| {
            let Some(&lr) = rates.get(&param_group(p.name())) else { return };
            let lr = lr * scale;
            let Some(g) = grads.param(p.name()) else { return };
            let (m, v) = state
                .entry(p.name().to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let values = p.value_mut().data_mut();
            for (((w, &gi), mi), vi) in values.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                *w -= lr * (update + wd * *w);
            }
        });
    }
}

// ---------------------------------------------------------------------------
// Stages and configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Stage {
    /// Backbone and predictor warmup before the GEN branch.
    Warmup,
    Gen,
    Attr(AttributeId),
    Afm,
    Efm,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Warmup => f.write_str("0-WARMUP"),
            Stage::Gen => f.write_str("1-GEN"),
            Stage::Attr(a) => write!(f, "1-ATTR-{a}"),
            Stage::Afm => f.write_str("2"),
            Stage::Efm => f.write_str("3"),
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let u = s.trim().to_ascii_uppercase();
        match u.as_str() {
            "0" | "0-WARMUP" | "WARMUP" => Ok(Stage::Warmup),
            "1-GEN" | "GEN" | "1" => Ok(Stage::Gen),
            "2" | "AFM" => Ok(Stage::Afm),
            "3" | "EFM" => Ok(Stage::Efm),
            _ => {
                let attr = u
                    .strip_prefix("1-ATTR-")
                    .or_else(|| u.strip_prefix("ATTR-"))
                    .or_else(|| u.strip_prefix("ATTR:"))
                    .ok_or_else(|| Error::Config(format!("unknown stage '{s}'")))?;
                match attr.parse()? {
                    AttributeId::GEN => Err(Error::Config("attribute stage cannot target GEN".into())),
                    a => Ok(Stage::Attr(a)),
                }
            }
        }
    }
}

impl From<Stage> for String {
    fn from(s: Stage) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Stage {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Stage {
    pub fn topology(self) -> Topology {
        match self {
            Stage::Warmup => Topology::Baseline,
            Stage::Gen => Topology::Single(AttributeId::GEN),
            Stage::Attr(a) => Topology::Single(a),
            Stage::Afm => Topology::Aggregate,
            Stage::Efm => Topology::Full,
        }
    }

    pub fn default_split(self) -> String {
        match self {
            Stage::Attr(a) => a.to_string(),
            _ => "all".into(),
        }
    }
}

/// Learning-rate table keys are group names; `branch` in an attribute
/// stage means the branch being trained, and `*` covers every group not
/// listed explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: BTreeMap<String, f64>,
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default)]
    pub split: Option<String>,
}

impl StageConfig {
    fn new(lr: &[(&str, f64)], epochs: usize) -> Self {
        Self {
            lr: lr.iter().map(|&(k, v)| (k.to_string(), v)).collect(),
            weight_decay: 1e-4,
            epochs,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_empty() {
            return Err(Error::Config("stage learning-rate table is empty".into()));
        }
        if let Some((k, v)) = self.lr.iter().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("learning rate for '{k}' must be positive, got {v}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        Ok(())
    }

    /// Concrete `group → rate` for `stage` against the model's groups.
    pub fn resolve(&self, stage: Stage, groups: &BTreeSet<String>) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        let mut out = BTreeMap::new();
        for (k, &v) in &self.lr {
            if k == "*" {
                continue;
            }
            let key = match (k.as_str(), stage) {
                ("branch", Stage::Attr(a)) => format!("branch.{a}"),
                _ => k.clone(),
            };
            if !groups.contains(&key) {
                return Err(Error::Config(format!("stage {stage}: no parameter group '{key}' in the model")));
            }
            out.insert(key, v);
        }
        if let Some(&rest) = self.lr.get("*") {
            for g in groups {
                out.entry(g.clone()).or_insert(rest);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub warmup: StageConfig,
    pub gen: StageConfig,
    pub attr: StageConfig,
    pub afm: StageConfig,
    pub efm: StageConfig,
    pub samples_per_clip: usize,
    pub batch_size: usize,
    /// Largest frame distance between a training and a test frame.
    pub max_frame_gap: usize,
    /// Test-crop center jitter as a fraction of `sqrt(w * h)`.
    pub center_jitter: f64,
    /// Log-uniform test-crop scale jitter.
    pub scale_jitter: f64,
    /// Samples per clip for validation losses.
    pub validation_samples: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self::paper_default()
    }
}

impl TrainingConfig {
    pub fn paper_default() -> Self {
        Self {
            warmup: StageConfig::new(&[("backbone", 1e-4), ("predictor", 1e-4)], 10),
            gen: StageConfig::new(&[("branch.GEN", 1e-5), ("backbone", 5e-6), ("predictor", 5e-6)], 30),
            attr: StageConfig::new(&[("branch", 1e-5)], 30),
            afm: StageConfig::new(&[("afm", 1e-5)], 30),
            efm: StageConfig::new(&[("efm", 1e-5), ("*", 1e-6)], 60),
            samples_per_clip: 8,
            batch_size: 8,
            max_frame_gap: 8,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            validation_samples: 4,
        }
    }

    /// Rates scaled up by 100 with the same ratios; few epochs.
    pub fn toy() -> Self {
        Self {
            warmup: StageConfig::new(&[("backbone", 3e-3), ("predictor", 3e-3)], 12),
            gen: StageConfig::new(&[("branch.GEN", 1e-3), ("backbone", 5e-4), ("predictor", 5e-4)], 3),
            attr: StageConfig::new(&[("branch", 1e-3)], 8),
            afm: StageConfig::new(&[("afm", 1e-3)], 3),
            efm: StageConfig::new(&[("efm", 1e-3), ("*", 1e-4)], 3),
            samples_per_clip: 4,
            batch_size: 4,
            max_frame_gap: 6,
            center_jitter: 0.25,
            scale_jitter: 0.1,
            validation_samples: 4,
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageConfig {
        match stage {
            Stage::Warmup => &self.warmup,
            Stage::Gen => &self.gen,
            Stage::Attr(_) => &self.attr,
            Stage::Afm => &self.afm,
            Stage::Efm => &self.efm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for s in [&self.gen, &self.attr, &self.afm, &self.efm] {
            s.validate()?;
        }
        if self.warmup.epochs > 0 {
            self.warmup.validate()?;
        }
        if self.samples_per_clip == 0 || self.batch_size == 0 || self.validation_samples == 0 {
            return Err(Error::Config("samples_per_clip, batch_size and validation_samples must be >= 1".into()));
        }
        if !(self.center_jitter >= 0.0 && self.scale_jitter >= 0.0) {
            return Err(Error::Config("jitter must be nonnegative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Samples

/// One training pair drawn from a clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSpec {
    pub clip: usize,
    pub train_frame: usize,
    pub test_frame: usize,
    /// Test-crop center offset in units of `sqrt(w * h)`.
    pub jitter: (f64, f64),
    pub log_scale: f64,
}

pub struct PreparedSample {
    pub train: FrameInput,
    pub train_box: BBox,
    pub test: FrameInput,
    pub test_box: BBox,
}

pub fn draw_samples(clips: &[&ClipManifest], per_clip: usize, tc: &TrainingConfig, rng: &mut ChaCha8Rng) -> Vec<SampleSpec> {
    let mut out = Vec::with_capacity(clips.len() * per_clip);
    for (ci, clip) in clips.iter().enumerate() {
        let n = clip.len();
        for _ in 0..per_clip {
            let a = rng.random_range(0..n);
            let lo = a.saturating_sub(tc.max_frame_gap);
            let hi = (a + tc.max_frame_gap).min(n - 1);
            let b = rng.random_range(lo..=hi);
            let j = tc.center_jitter;
            let jitter = if j > 0.0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0.0, 0.0) };
            let s = tc.scale_jitter;
            let log_scale = if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
            out.push(SampleSpec { clip: ci, train_frame: a, test_frame: b, jitter, log_scale });
        }
    }
    out
}

pub fn prepare_sample(clip: &ClipManifest, spec: &SampleSpec, cfg: &ModelConfig) -> PreparedSample {
    let tb = clip.gt_rgb[spec.train_frame];
    let train_crop = Crop::around(&tb, cfg);
    let gb = clip.gt_rgb[spec.test_frame];
    let (cx, cy) = gb.center();
    let r = gb.area().sqrt();
    let test_crop = Crop::centered(
        cx + spec.jitter.0 * r,
        cy + spec.jitter.1 * r,
        cfg.search_scale * r * spec.log_scale.exp(),
        cfg,
    );
    PreparedSample {
        train: train_crop.input(&clip.frames[spec.train_frame]),
        train_box: train_crop.to_grid(&tb),
        test: test_crop.input(&clip.frames[spec.test_frame]),
        test_box: test_crop.to_grid(&gb),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Mean loss over a batch; returns gradients when `grad` is set.
fn batch_loss(model: &Model, topology: Topology, samples: &[PreparedSample], trainable: Option<Arc<BTreeSet<String>>>) -> (LossStats, Option<Gradients>) {
    let g = match &trainable {
        Some(set) => {
            let set = Arc::clone(set);
            Graph::with_trainable(move |name| set.contains(&param_group(name)))
        }
        None => Graph::with_trainable(|_| false),
    };
    let k = 1.0 / samples.len() as f64;
    let mut total: Option<crate::autograd::Var<'_>> = None;
    let mut stats = LossStats::default();
    for s in samples {
        let train = model.features(&g, &s.train, topology);
        let test = model.features(&g, &s.test, topology);
        let pred = model.predict(&[(train, s.train_box)], test);
        let l = tracking_loss(&pred, &s.test_box, model.config.sigma_factor);
        stats.cls += k * l.cls.value().data()[0];
        stats.reg += k * l.reg.value().data()[0];
        let scaled = l.total.scale(k);
        total = Some(match total {
            None => scaled,
            Some(t) => t.add(scaled),
        });
    }
    let total = total.expect("nonempty batch");
    stats.loss = total.value().data()[0];
    let grads = trainable.map(|_| g.backward(total));
    (stats, grads)
}

/// Mean loss over a fixed, seeded sample set.
pub fn validation_loss(model: &Model, topology: Topology, clips: &[&ClipManifest], tc: &TrainingConfig, seed: u64) -> Result<LossStats> {
    if clips.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = draw_samples(clips, tc.validation_samples, tc, &mut rng);
    let mut acc = LossStats::default();
    let chunks: Vec<&[SampleSpec]> = specs.chunks(tc.batch_size).collect();
    for chunk in &chunks {
        let prepared: Vec<_> = chunk.iter().map(|s| prepare_sample(clips[s.clip], s, &model.config)).collect();
        let (st, _) = batch_loss(model, topology, &prepared, None);
        let w = chunk.len() as f64 / specs.len() as f64;
        acc.loss += w * st.loss;
        acc.cls += w * st.cls;
        acc.reg += w * st.reg;
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub iterations: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Optimize the groups in `rates` for `epochs` passes over `clips`.
pub fn train_groups(
    model: &mut Model,
    stage: Stage,
    rates: &BTreeMap<String, f64>,
    weight_decay: f64,
    epochs: usize,
    clips: &[&ClipManifest],
    tc: &TrainingConfig,
    seed: u64,
) -> Result<Vec<EpochRecord>> {
    if clips.is_empty() {
        return Err(Error::Data(format!("stage {stage}: no training clips")));
    }
    let topology = stage.topology();
    let trainable = Arc::new(rates.keys().cloned().collect::<BTreeSet<_>>());
    let mut opt = AdamW::new(rates.clone(), weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &stage.to_string()));
    let mut records = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut specs = draw_samples(clips, tc.samples_per_clip, tc, &mut rng);
        specs.shuffle(&mut rng);
        let mut sum = LossStats::default();
        let mut iterations = 0;
        for chunk in specs.chunks(tc.batch_size) {
            let prepared: Vec<_> = chunk.iter().map(|s| prepare_sample(clips[s.clip], s, &model.config)).collect();
            let (st, grads) = batch_loss(model, topology, &prepared, Some(Arc::clone(&trainable)));
            if !st.loss.is_finite() {
                return Err(Error::NonFinite(format!("stage {stage} epoch {epoch}: loss {}", st.loss)));
            }
            opt.step(model, grads.as_ref().expect("gradients"));
            sum.loss += st.loss;
            sum.cls += st.cls;
            sum.reg += st.reg;
            iterations += 1;
        }
        let n = iterations as f64;
        records.push(EpochRecord { stage, epoch, iterations, loss: sum.loss / n, cls: sum.cls / n, reg: sum.reg / n });
        log::info!("stage {stage} epoch {epoch}: loss {:.6}", sum.loss / n);
    }
    Ok(records)
}

/// Per-iteration losses of a fixed-length run with the learning rate
/// decaying linearly to `final_lr_fraction` of its start value; used by
/// smoke runs and the ablation harness.
pub fn fit_iterations(
    model: &mut Model,
    topology: Topology,
    rates: &BTreeMap<String, f64>,
    weight_decay: f64,
    iterations: usize,
    final_lr_fraction: f64,
    clips: &[&ClipManifest],
    tc: &TrainingConfig,
    seed: u64,
) -> Result<Vec<LossStats>> {
    if clips.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let trainable = Arc::new(rates.keys().cloned().collect::<BTreeSet<_>>());
    let mut opt = AdamW::new(rates.clone(), weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queue: Vec<SampleSpec> = Vec::new();
    let mut out = Vec::with_capacity(iterations);
    for it in 0..iterations {
        if queue.len() < tc.batch_size {
            let mut more = draw_samples(clips, tc.samples_per_clip, tc, &mut rng);
            more.shuffle(&mut rng);
            queue.extend(more);
        }
        let batch: Vec<SampleSpec> = queue.drain(..tc.batch_size).collect();
        let prepared: Vec<_> = batch.iter().map(|s| prepare_sample(clips[s.clip], s, &model.config)).collect();
        let (st, grads) = batch_loss(model, topology, &prepared, Some(Arc::clone(&trainable)));
        if !st.loss.is_finite() {
            return Err(Error::NonFinite(format!("iteration {it}: loss {}", st.loss)));
        }
        opt.set_scale(1.0 - (1.0 - final_lr_fraction) * it as f64 / iterations as f64);
        opt.step(model, grads.as_ref().expect("gradients"));
        out.push(st);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoints and lineage

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub rates: BTreeMap<String, f64>,
    pub frozen: FreezeMask,
    pub epochs: Vec<EpochRecord>,
    pub hashes_before: BTreeMap<String, String>,
    pub hashes_after: BTreeMap<String, String>,
}

impl StageRecord {
    /// Groups whose hash changed during the stage.
    pub fn changed_groups(&self) -> BTreeSet<String> {
        self.hashes_after
            .iter()
            .filter(|(k, v)| self.hashes_before.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    pub lineage: Vec<StageRecord>,
    pub seed: u64,
    pub config_digest: String,
}

impl Checkpoint {
    pub fn from_model(model: &Model, lineage: Vec<StageRecord>, seed: u64, config_digest: &str) -> Self {
        Self {
            version: 1,
            model_config: model.config.clone(),
            params: model.named_params(),
            lineage,
            seed,
            config_digest: config_digest.to_string(),
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.model_config.clone(), self.seed)?;
        let expected = model.named_params();
        if expected.len() != self.params.len() || expected.keys().any(|k| !self.params.contains_key(k)) {
            return Err(Error::Param("checkpoint parameters do not match the model layout".into()));
        }
        model.load_params(&self.params)?;
        Ok(model)
    }

    pub fn stages(&self) -> Vec<Stage> {
        self.lineage.iter().map(|r| r.stage).collect()
    }

    /// Frozen groups of every stage, in order.
    pub fn freeze_history(&self) -> Vec<(Stage, FreezeMask)> {
        self.lineage.iter().map(|r| (r.stage, r.frozen.clone())).collect()
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(crate::digest::sha256_hex(&self.to_json()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Refuse a stage whose predecessors are missing from `lineage`.
pub fn check_lineage(stage: Stage, lineage: &[Stage]) -> Result<()> {
    let has = |s: Stage| lineage.contains(&s);
    let later = |s: &Stage| matches!(s, Stage::Afm | Stage::Efm);
    let err = |m: String| Err(Error::Lineage(format!("stage {stage}: {m}")));
    match stage {
        Stage::Warmup => {
            if !lineage.is_empty() {
                return err("warmup must start from a fresh model".into());
            }
        }
        Stage::Gen => {
            if lineage.iter().any(|s| *s != Stage::Warmup) {
                return err("GEN stage must start from a fresh or warmed-up model".into());
            }
        }
        Stage::Attr(a) => {
            if !has(Stage::Gen) {
                return err("requires a 1-GEN checkpoint".into());
            }
            if lineage.iter().any(later) {
                return err("stage 1 cannot follow stage 2 or 3".into());
            }
            if has(Stage::Attr(a)) {
                return err(format!("branch {a} already trained"));
            }
        }
        Stage::Afm => {
            let missing: Vec<String> = AttributeId::SPECIFIC
                .iter()
                .filter(|&&a| !has(Stage::Attr(a)))
                .map(|a| a.to_string())
                .collect();
            if !has(Stage::Gen) || !missing.is_empty() {
                return err(format!("requires a complete stage-1 checkpoint (missing GEN or {missing:?})"));
            }
            if lineage.iter().any(later) {
                return err("stage 2 already ran".into());
            }
        }
        Stage::Efm => {
            if !has(Stage::Afm) {
                return err("requires a stage-2 checkpoint".into());
            }
            if has(Stage::Efm) {
                return err("stage 3 already ran".into());
            }
        }
    }
    Ok(())
}

/// Shared inputs of every stage.
#[derive(Debug, Clone)]
pub struct TrainContext<'a> {
    pub training: &'a TrainingConfig,
    pub seed: u64,
    pub config_digest: String,
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub model: Model,
}

impl StageResult {
    pub fn epochs(&self) -> Vec<EpochRecord> {
        self.checkpoint.lineage.iter().flat_map(|r| r.epochs.clone()).collect()
    }
}

fn run_stage(model: &mut Model, stage: Stage, mut lineage: Vec<StageRecord>, data: &Dataset, ctx: &TrainContext<'_>) -> Result<Vec<StageRecord>> {
    let stages: Vec<Stage> = lineage.iter().map(|r| r.stage).collect();
    check_lineage(stage, &stages)?;
    let sc = ctx.training.stage(stage);
    let groups = model_groups(model);
    let rates = sc.resolve(stage, &groups)?;
    let frozen = FreezeMask::complement(&groups, &rates);
    frozen.validate(&groups)?;
    let split = sc.split.clone().unwrap_or_else(|| stage.default_split());
    let clips = data.split(&split)?;
    let before = group_hashes(model);
    let epochs = train_groups(model, stage, &rates, sc.weight_decay, sc.epochs, &clips, ctx.training, ctx.seed)?;
    let after = group_hashes(model);
    if let Some(g) = frozen.0.iter().find(|g| before.get(*g) != after.get(*g)) {
        return Err(Error::Param(format!("stage {stage}: frozen group {g} changed")));
    }
    lineage.push(StageRecord { stage, rates, frozen, epochs, hashes_before: before, hashes_after: after });
    Ok(lineage)
}

/// Warmup (if configured) and GEN-branch training from a fresh model.
pub fn run_stage1_gen(mut model: Model, data: &Dataset, ctx: &TrainContext<'_>) -> Result<StageResult> {
    ctx.training.validate()?;
    let mut lineage = Vec::new();
    if ctx.training.warmup.epochs > 0 {
        lineage = run_stage(&mut model, Stage::Warmup, lineage, data, ctx)?;
    }
    let lineage = run_stage(&mut model, Stage::Gen, lineage, data, ctx)?;
    let checkpoint = Checkpoint::from_model(&model, lineage, ctx.seed, &ctx.config_digest);
    Ok(StageResult { checkpoint, model })
}

fn resume(ckpt: &Checkpoint, ctx: &TrainContext<'_>) -> Result<Model> {
    ctx.training.validate()?;
    if ckpt.seed != ctx.seed {
        log::warn!("checkpoint seed {} differs from run seed {}", ckpt.seed, ctx.seed);
    }
    ckpt.to_model()
}

/// Train branch `k` alone; everything else stays bit-frozen.
pub fn run_stage1_attr(ckpt: &Checkpoint, k: AttributeId, data: &Dataset, ctx: &TrainContext<'_>) -> Result<StageResult> {
    if k == AttributeId::GEN {
        return Err(Error::Config("attribute stage cannot target GEN".into()));
    }
    check_lineage(Stage::Attr(k), &ckpt.stages())?;
    let mut model = resume(ckpt, ctx)?;
    let lineage = run_stage(&mut model, Stage::Attr(k), ckpt.lineage.clone(), data, ctx)?;
    let checkpoint = Checkpoint::from_model(&model, lineage, ckpt.seed, &ctx.config_digest);
    Ok(StageResult { checkpoint, model })
}

/// Re-initialize and train the AFM of every DDF module.
pub fn run_stage2_afm(ckpt: &Checkpoint, data: &Dataset, ctx: &TrainContext<'_>) -> Result<StageResult> {
    check_lineage(Stage::Afm, &ckpt.stages())?;
    let mut model = resume(ckpt, ctx)?;
    for (layer, m) in &mut model.ddf {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, &format!("ddf{layer}.afm.reinit")));
        m.afm = AfmParams::new(&format!("ddf{layer}.afm"), m.channels(), &mut rng)?;
    }
    let lineage = run_stage(&mut model, Stage::Afm, ckpt.lineage.clone(), data, ctx)?;
    let checkpoint = Checkpoint::from_model(&model, lineage, ckpt.seed, &ctx.config_digest);
    Ok(StageResult { checkpoint, model })
}

/// Train the EFMs and fine-tune everything else.
pub fn run_stage3_efm(ckpt: &Checkpoint, data: &Dataset, ctx: &TrainContext<'_>) -> Result<StageResult> {
    check_lineage(Stage::Efm, &ckpt.stages())?;
    let mut model = resume(ckpt, ctx)?;
    let lineage = run_stage(&mut model, Stage::Efm, ckpt.lineage.clone(), data, ctx)?;
    let checkpoint = Checkpoint::from_model(&model, lineage, ckpt.seed, &ctx.config_digest);
    Ok(StageResult { checkpoint, model })
}

/// Dispatch one stage. `ckpt` must be `None` exactly for the GEN stage.
pub fn run_stage_by_name(stage: Stage, model_config: &ModelConfig, ckpt: Option<&Checkpoint>, data: &Dataset, ctx: &TrainContext<'_>) -> Result<StageResult> {
    match (stage, ckpt) {
        (Stage::Gen, None) => run_stage1_gen(Model::new(model_config.clone(), ctx.seed)?, data, ctx),
        (Stage::Gen, Some(_)) => Err(Error::Lineage("stage 1-GEN starts from a fresh model".into())),
        (Stage::Warmup, _) => Err(Error::Config("warmup runs as part of 1-GEN".into())),
        (_, None) => Err(Error::Lineage(format!("stage {stage}: requires a checkpoint from the previous stage"))),
        (Stage::Attr(k), Some(c)) => run_stage1_attr(c, k, data, ctx),
        (Stage::Afm, Some(c)) => run_stage2_afm(c, data, ctx),
        (Stage::Efm, Some(c)) => run_stage3_efm(c, data, ctx),
    }
}

pub const LOG_HEADER: &str = "stage,epoch,iterations,loss,cls_loss,reg_loss";

/// Append epoch lines to a delimited log, writing the header once.
pub fn append_log(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    for r in records {
        writeln!(f, "{},{},{},{},{},{}", r.stage, r.epoch, r.iterations, r.loss, r.cls, r.reg)?;
    }
    Ok(())
}
