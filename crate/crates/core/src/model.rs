//! Two-stream backbone with hierarchical DDF modules, the transformer
//! target-model predictor and the target model itself.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{AfmParams, EfmParams};
use crate::autograd::{concat, Graph, Var};
use crate::bbox::BBox;
use crate::branch::{AttributeId, BranchParams, BranchVars};
use crate::digest::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::REDUCTION;
use crate::param::{Conv2d, Linear, Module, Param};
use crate::tensor::{FeatureMap, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Output channels per backbone layer.
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Side of the square search-region input.
    pub input_size: usize,
    /// 1-based backbone layers followed by a DDF module.
    pub ddf_layers: Vec<usize>,
    pub predictor_dim: usize,
    pub encoder_layers: usize,
    pub positional_encoding: bool,
    /// Gaussian label sigma as a fraction of the box diagonal.
    pub sigma_factor: f64,
    /// Search-region side relative to `sqrt(w * h)` of the box.
    pub search_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            strides: vec![2, 2, 1],
            input_size: 32,
            ddf_layers: vec![1, 2, 3],
            predictor_dim: 32,
            encoder_layers: 1,
            positional_encoding: true,
            sigma_factor: 0.25,
            search_scale: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn toy() -> Self {
        Self {
            channels: vec![16, 16],
            strides: vec![2, 2],
            input_size: 32,
            ddf_layers: vec![2],
            predictor_dim: 16,
            ..Self::default()
        }
    }

    pub fn layers(&self) -> usize {
        self.channels.len()
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn grid_size(&self) -> usize {
        self.input_size / self.total_stride()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.channels.is_empty() || self.channels.len() != self.strides.len() {
            return bad("channels and strides must be nonempty and of equal length".into());
        }
        if self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("channel counts and strides must be positive".into());
        }
        if self.input_size == 0 || self.input_size % self.total_stride() != 0 {
            return bad(format!("input_size {} not divisible by stride {}", self.input_size, self.total_stride()));
        }
        let mut seen = self.ddf_layers.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.ddf_layers.len() {
            return bad("ddf_layers contains duplicates".into());
        }
        for &l in &self.ddf_layers {
            if l == 0 || l > self.layers() {
                return bad(format!("ddf layer {l} outside 1..={}", self.layers()));
            }
            if self.channels[l - 1] % REDUCTION != 0 {
                return bad(format!("layer {l} channels must be a multiple of {REDUCTION}"));
            }
        }
        if self.predictor_dim == 0 || (self.positional_encoding && self.predictor_dim % 4 != 0) {
            return bad("predictor_dim must be positive and a multiple of 4 with positional encoding".into());
        }
        if !(self.sigma_factor > 0.0) || !(self.search_scale > 0.0) {
            return bad("sigma_factor and search_scale must be positive".into());
        }
        Ok(())
    }
}

/// Which parts of each DDF module sit in the forward path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    /// DDF modules skipped entirely.
    Baseline,
    /// One branch, its fused map added to both streams.
    Single(AttributeId),
    /// All branches through the AFM, aggregate added to both streams.
    Aggregate,
    /// Branches, AFM and EFM.
    Full,
}

// ---------------------------------------------------------------------------
// DDF module

#[derive(Debug, Clone, PartialEq)]
pub struct DdfModuleParams {
    /// Indexed by [`AttributeId::index`].
    pub branches: Vec<BranchParams>,
    pub afm: AfmParams,
    pub efm_rgb: EfmParams,
    pub efm_tir: EfmParams,
}

pub struct DdfVars<'g> {
    pub rgb: Var<'g>,
    pub tir: Var<'g>,
    pub branches: Vec<(AttributeId, BranchVars<'g>)>,
    pub aggregated: Option<Var<'g>>,
}

impl DdfModuleParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let branches = AttributeId::ALL
            .iter()
            .map(|&a| BranchParams::new(&format!("{prefix}.branch.{a}"), a, channels, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            branches,
            afm: AfmParams::new(&format!("{prefix}.afm"), channels, rng)?,
            efm_rgb: EfmParams::new(&format!("{prefix}.efm_rgb"), channels, rng),
            efm_tir: EfmParams::new(&format!("{prefix}.efm_tir"), channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.branches[0].channels()
    }

    pub fn branch(&self, a: AttributeId) -> &BranchParams {
        &self.branches[a.index()]
    }

    pub fn forward<'g>(&self, f_rgb: Var<'g>, f_tir: Var<'g>, topology: Topology) -> DdfVars<'g> {
        match topology {
            Topology::Baseline => DdfVars { rgb: f_rgb, tir: f_tir, branches: Vec::new(), aggregated: None },
            Topology::Single(a) => {
                let bv = self.branch(a).forward(f_rgb, f_tir);
                let fused = bv.fused;
                DdfVars {
                    rgb: f_rgb.add(fused),
                    tir: f_tir.add(fused),
                    branches: vec![(a, bv)],
                    aggregated: None,
                }
            }
            Topology::Aggregate | Topology::Full => {
                let branches: Vec<(AttributeId, BranchVars<'g>)> = self
                    .branches
                    .iter()
                    .map(|b| (b.attribute, b.forward(f_rgb, f_tir)))
                    .collect();
                let fused: Vec<Var<'g>> = branches.iter().map(|(_, v)| v.fused).collect();
                let f_ag = self.afm.forward(&fused);
                let (rgb, tir) = if topology == Topology::Full {
                    (self.efm_rgb.forward(f_rgb, f_ag), self.efm_tir.forward(f_tir, f_ag))
                } else {
                    (f_rgb.add(f_ag), f_tir.add(f_ag))
                };
                DdfVars { rgb, tir, branches, aggregated: Some(f_ag) }
            }
        }
    }
}

impl Module for DdfModuleParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.branches {
            b.visit(f);
        }
        self.afm.visit(f);
        self.efm_rgb.visit(f);
        self.efm_tir.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.branches {
            b.visit_mut(f);
        }
        self.afm.visit_mut(f);
        self.efm_rgb.visit_mut(f);
        self.efm_tir.visit_mut(f);
    }
}

fn check_pair(f_rgb: &FeatureMap, f_tir: &FeatureMap, channels: usize) -> Result<()> {
    if f_rgb.dims() != f_tir.dims() {
        return Err(Error::Shape(format!("rgb {:?} vs tir {:?}", f_rgb.dims(), f_tir.dims())));
    }
    if f_rgb.channels() != channels {
        return Err(Error::Shape(format!("expected {channels} channels, got {}", f_rgb.channels())));
    }
    Ok(())
}

/// Full DDF module: six branches, AFM, then per-modality EFM.
pub fn ddf_forward(f_rgb: &FeatureMap, f_tir: &FeatureMap, p: &DdfModuleParams) -> Result<(FeatureMap, FeatureMap)> {
    check_pair(f_rgb, f_tir, p.channels())?;
    let g = Graph::new();
    let out = p.forward(g.constant(f_rgb.tensor().clone()), g.constant(f_tir.tensor().clone()), Topology::Full);
    Ok((
        FeatureMap::new(out.rgb.value().as_ref().clone(), f_rgb.layer())?,
        FeatureMap::new(out.tir.value().as_ref().clone(), f_tir.layer())?,
    ))
}

// ---------------------------------------------------------------------------
// Predictor

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl Attention {
    fn new(prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: Linear::new(&format!("{prefix}.query"), dim, dim, rng),
            key: Linear::new(&format!("{prefix}.key"), dim, dim, rng),
            value: Linear::new(&format!("{prefix}.value"), dim, dim, rng),
            out: Linear::new(&format!("{prefix}.out"), dim, dim, rng),
        }
    }

    /// Single-head scaled dot-product attention. `q` is `(1, Nq, D)`,
    /// `kv` is `(1, Nk, D)`.
    pub fn forward<'g>(&self, q: Var<'g>, kv: Var<'g>) -> Var<'g> {
        let d = q.shape()[2] as f64;
        let qs = self.query.forward(q);
        let ks = self.key.forward(kv);
        let vs = self.value.forward(kv);
        let logits = qs.bmm(ks.permute(&[0, 2, 1])).scale(1.0 / d.sqrt());
        self.out.forward(logits.softmax(2).bmm(vs))
    }
}

impl Module for Attention {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.out.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attention: Attention,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl EncoderBlock {
    fn new(prefix: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            attention: Attention::new(&format!("{prefix}.attention"), dim, rng),
            ffn_in: Linear::new(&format!("{prefix}.ffn_in"), dim, 2 * dim, rng),
            ffn_out: Linear::new(&format!("{prefix}.ffn_out"), 2 * dim, dim, rng),
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        let x = x.add(self.attention.forward(x, x));
        x.add(self.ffn_out.forward(self.ffn_in.forward(x).relu()))
    }
}

impl Module for EncoderBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.attention.visit(f);
        self.ffn_in.visit(f);
        self.ffn_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.attention.visit_mut(f);
        self.ffn_in.visit_mut(f);
        self.ffn_out.visit_mut(f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorParams {
    /// Joint RGB⊕TIR feature to predictor width.
    pub proj: Conv2d,
    pub score_embed: Conv2d,
    pub ltrb_embed: Conv2d,
    pub test_token: Param,
    pub encoder: Vec<EncoderBlock>,
    pub query: Param,
    pub decoder: Attention,
    pub head: Linear,
    pub bbreg_hidden: Conv2d,
    pub bbreg_out: Conv2d,
    pub positional_encoding: bool,
}

/// Weights produced by the predictor, each of predictor width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetModelWeights {
    pub w_cls: Vec<f64>,
    pub w_bbreg: Vec<f64>,
}

pub struct PredictorVars<'g> {
    pub w_cls: Var<'g>,
    pub w_bbreg: Var<'g>,
    /// Encoder output of the test frame, `(1, D, H, W)`.
    pub test_feat: Var<'g>,
}

pub struct Prediction<'g> {
    /// `(1, 1, H, W)`.
    pub score: Var<'g>,
    /// `(1, 4, H, W)`, nonnegative.
    pub ltrb: Var<'g>,
}

impl PredictorParams {
    pub fn new(prefix: &str, in_channels: usize, dim: usize, encoder_layers: usize, positional_encoding: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut ltrb_embed = Conv2d::new(&format!("{prefix}.ltrb_embed"), 4, dim, 1, 1, rng);
        ltrb_embed.weight.value_mut().data_mut().iter_mut().for_each(|w| *w *= 0.25);
        Self {
            proj: Conv2d::new(&format!("{prefix}.proj"), in_channels, dim, 1, 1, rng),
            score_embed: Conv2d::new(&format!("{prefix}.score_embed"), 1, dim, 1, 1, rng),
            ltrb_embed,
            test_token: Param::normal(format!("{prefix}.test_token"), &[dim], 1, 1.0, rng),
            encoder: (0..encoder_layers)
                .map(|i| EncoderBlock::new(&format!("{prefix}.encoder{i}"), dim, rng))
                .collect(),
            query: Param::normal(format!("{prefix}.query"), &[1, 1, dim], 1, 1.0, rng),
            decoder: Attention::new(&format!("{prefix}.decoder"), dim, rng),
            head: Linear::new(&format!("{prefix}.head"), dim, 2 * dim, rng),
            bbreg_hidden: Conv2d::new(&format!("{prefix}.bbreg_hidden"), dim, dim, 3, 1, rng),
            bbreg_out: Conv2d::new(&format!("{prefix}.bbreg_out"), dim, 4, 3, 1, rng),
            positional_encoding,
        }
    }

    pub fn dim(&self) -> usize {
        self.proj.out_channels()
    }

    /// Add target-state embeddings. `bbox` is in feature-grid units; `None`
    /// marks a test frame.
    pub fn encode<'g>(&self, x: Var<'g>, bbox: Option<&BBox>, sigma_factor: f64) -> Var<'g> {
        let g = x.graph();
        let [_, d, h, w] = x.value().dims4();
        match bbox {
            Some(b) => {
                let score = g.constant(gaussian_label(h, w, b, sigma_factor));
                let ltrb = g.constant(ltrb_map(h, w, b));
                x.add(self.score_embed.forward(score)).add(self.ltrb_embed.forward(ltrb))
            }
            None => x.add(self.test_token.bind(g).reshape(&[1, d, 1, 1])),
        }
    }

    fn tokens<'g>(&self, x: Var<'g>) -> Var<'g> {
        let [_, d, h, w] = x.value().dims4();
        let t = x.reshape(&[1, d, h * w]).permute(&[0, 2, 1]);
        if self.positional_encoding {
            t.add(x.graph().constant(positional_encoding(h, w, d)))
        } else {
            t
        }
    }

    /// Encoder over all train and test tokens, then one learned query
    /// decodes the target-model weights.
    pub fn forward<'g>(&self, train: &[Var<'g>], test: Var<'g>) -> PredictorVars<'g> {
        assert!(!train.is_empty(), "predictor needs a training frame");
        let g = test.graph();
        let [_, d, h, w] = test.value().dims4();
        let mut seq: Vec<Var<'g>> = train.iter().map(|&t| self.tokens(t)).collect();
        seq.push(self.tokens(test));
        let mut x = concat(&seq, 1);
        for block in &self.encoder {
            x = block.forward(x);
        }
        let n = x.shape()[1];
        let test_feat = x
            .narrow(1, n - h * w, h * w)
            .permute(&[0, 2, 1])
            .reshape(&[1, d, h, w]);
        let q = self.query.bind(g);
        let w_t = q.add(self.decoder.forward(q, x));
        let both = self.head.forward(w_t).reshape(&[1, 2 * d]);
        PredictorVars {
            w_cls: both.narrow(1, 0, d),
            w_bbreg: both.narrow(1, d, d),
            test_feat,
        }
    }

    /// Score map and dense LTRB map from test features and weights.
    pub fn apply<'g>(&self, test_feat: Var<'g>, w_cls: Var<'g>, w_bbreg: Var<'g>) -> Prediction<'g> {
        let [_, d, h, w] = test_feat.value().dims4();
        let tokens = test_feat.reshape(&[1, d, h * w]).permute(&[0, 2, 1]);
        let score = tokens.bmm(w_cls.reshape(&[1, d, 1])).reshape(&[1, 1, h, w]);
        let modulated = test_feat.mul(w_bbreg.reshape(&[1, d, 1, 1]));
        let ltrb = self.bbreg_out.forward(self.bbreg_hidden.forward(modulated).relu()).exp();
        Prediction { score, ltrb }
    }
}

impl Module for PredictorParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.proj.visit(f);
        self.score_embed.visit(f);
        self.ltrb_embed.visit(f);
        f(&self.test_token);
        for b in &self.encoder {
            b.visit(f);
        }
        f(&self.query);
        self.decoder.visit(f);
        self.head.visit(f);
        self.bbreg_hidden.visit(f);
        self.bbreg_out.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.proj.visit_mut(f);
        self.score_embed.visit_mut(f);
        self.ltrb_embed.visit_mut(f);
        f(&mut self.test_token);
        for b in &mut self.encoder {
            b.visit_mut(f);
        }
        f(&mut self.query);
        self.decoder.visit_mut(f);
        self.head.visit_mut(f);
        self.bbreg_hidden.visit_mut(f);
        self.bbreg_out.visit_mut(f);
    }
}

/// Feature-grid cell centers sit at `(j + 0.5, i + 0.5)`.
fn cell_center(i: usize, j: usize) -> (f64, f64) {
    (j as f64 + 0.5, i as f64 + 0.5)
}

/// Gaussian centered on the box center, `sigma = factor * diagonal`.
pub fn gaussian_label(h: usize, w: usize, b: &BBox, sigma_factor: f64) -> Tensor {
    let (cx, cy) = b.center();
    let sigma = sigma_factor * (b.w * b.w + b.h * b.h).sqrt();
    Tensor::from_fn(&[1, 1, h, w], |k| {
        let (px, py) = cell_center(k / w, k % w);
        (-((px - cx).powi(2) + (py - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

/// Distances from each cell center to the left, top, right and bottom box
/// edges, shape `(1, 4, H, W)`.
pub fn ltrb_map(h: usize, w: usize, b: &BBox) -> Tensor {
    let mut t = Tensor::zeros(&[1, 4, h, w]);
    let data = t.data_mut();
    for i in 0..h {
        for j in 0..w {
            let (px, py) = cell_center(i, j);
            let v = [px - b.x, py - b.y, b.right() - px, b.bottom() - py];
            for (c, val) in v.into_iter().enumerate() {
                data[(c * h + i) * w + j] = val;
            }
        }
    }
    t
}

/// Cells whose center lies inside the box; falls back to the cell holding
/// the box center so the mask is never empty.
pub fn box_mask(h: usize, w: usize, b: &BBox) -> Tensor {
    let mut t = Tensor::from_fn(&[1, 1, h, w], |k| {
        let (px, py) = cell_center(k / w, k % w);
        let inside = px > b.x && px < b.right() && py > b.y && py < b.bottom();
        if inside {
            1.0
        } else {
            0.0
        }
    });
    if t.sum() == 0.0 {
        let (cx, cy) = b.center();
        let j = (cx.floor().max(0.0) as usize).min(w - 1);
        let i = (cy.floor().max(0.0) as usize).min(h - 1);
        t.data_mut()[i * w + j] = 1.0;
    }
    t
}

/// 2-D sinusoidal encoding, `(1, H*W, D)`: the first half of the channels
/// encode the column, the second half the row.
pub fn positional_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let freqs = half / 2;
    Tensor::from_fn(&[1, h * w, d], |k| {
        let (pos, c) = (k / d, k % d);
        let (coord, c) = if c < half { ((pos % w) as f64, c) } else { ((pos / w) as f64, c - half) };
        let f = 1.0 / 10000f64.powf((c % freqs.max(1)) as f64 / freqs.max(1) as f64);
        if c < freqs {
            (coord * f).sin()
        } else {
            (coord * f).cos()
        }
    })
}

// ---------------------------------------------------------------------------
// Full model

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub rgb: Vec<Conv2d>,
    pub tir: Vec<Conv2d>,
}

impl Module for BackboneParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.rgb.iter().chain(&self.tir).for_each(|c| c.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.rgb.iter_mut().chain(self.tir.iter_mut()).for_each(|c| c.visit_mut(f));
    }
}

/// Channels fed to each stream; gray TIR is replicated.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    /// `(layer, module)` in increasing layer order.
    pub ddf: Vec<(usize, DdfModuleParams)>,
    pub predictor: PredictorParams,
}

pub struct BackboneVars<'g> {
    /// Per-layer streams after any DDF module.
    pub layers: Vec<(Var<'g>, Var<'g>)>,
    pub ddf: Vec<(usize, DdfVars<'g>)>,
    /// Channel-wise concatenation of the final streams.
    pub joint: Var<'g>,
}

/// One search-region pair, each `(1, 3, S, S)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub rgb: Tensor,
    pub tir: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        // Independent streams so inserting DDF modules leaves the backbone
        // and predictor initialization unchanged.
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone"));
        let mut rgb = Vec::new();
        let mut tir = Vec::new();
        let mut prev = INPUT_CHANNELS;
        for (l, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            rgb.push(Conv2d::new(&format!("backbone.rgb.l{}", l + 1), prev, c, 3, s, &mut rng));
            tir.push(Conv2d::new(&format!("backbone.tir.l{}", l + 1), prev, c, 3, s, &mut rng));
            prev = c;
        }
        let mut layers = config.ddf_layers.clone();
        layers.sort_unstable();
        let ddf = layers
            .iter()
            .map(|&l| {
                let name = format!("ddf{l}");
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &name));
                Ok((l, DdfModuleParams::new(&name, config.channels[l - 1], &mut rng)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "predictor"));
        let predictor = PredictorParams::new(
            "predictor",
            2 * prev,
            config.predictor_dim,
            config.encoder_layers,
            config.positional_encoding,
            &mut rng,
        );
        Ok(Self { config, backbone: BackboneParams { rgb, tir }, ddf, predictor })
    }

    pub fn ddf_module(&self, layer: usize) -> Option<&DdfModuleParams> {
        self.ddf.iter().find(|(l, _)| *l == layer).map(|(_, m)| m)
    }

    pub fn backbone<'g>(&self, rgb: Var<'g>, tir: Var<'g>, topology: Topology) -> BackboneVars<'g> {
        let (mut r, mut t) = (rgb, tir);
        let mut layers = Vec::new();
        let mut ddf = Vec::new();
        for l in 0..self.config.layers() {
            r = self.backbone.rgb[l].forward(r).relu();
            t = self.backbone.tir[l].forward(t).relu();
            if let Some(m) = self.ddf_module(l + 1) {
                let out = m.forward(r, t, topology);
                r = out.rgb;
                t = out.tir;
                ddf.push((l + 1, out));
            }
            layers.push((r, t));
        }
        BackboneVars { layers, ddf, joint: concat(&[r, t], 1) }
    }

    /// Projected joint features `(1, D, H, W)` of one search region.
    pub fn features<'g>(&self, g: &'g Graph, input: &FrameInput, topology: Topology) -> Var<'g> {
        let bb = self.backbone(g.constant(input.rgb.clone()), g.constant(input.tir.clone()), topology);
        self.predictor.proj.forward(bb.joint)
    }

    /// Predictor plus target model. `train` pairs projected features with
    /// their boxes in grid units.
    pub fn predict<'g>(&self, train: &[(Var<'g>, BBox)], test: Var<'g>) -> Prediction<'g> {
        let sf = self.config.sigma_factor;
        let enc: Vec<Var<'g>> = train.iter().map(|(x, b)| self.predictor.encode(*x, Some(b), sf)).collect();
        let test_enc = self.predictor.encode(test, None, sf);
        let pv = self.predictor.forward(&enc, test_enc);
        self.predictor.apply(pv.test_feat, pv.w_cls, pv.w_bbreg)
    }
}

impl Module for Model {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.backbone.visit(f);
        for (_, m) in &self.ddf {
            m.visit(f);
        }
        self.predictor.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.backbone.visit_mut(f);
        for (_, m) in &mut self.ddf {
            m.visit_mut(f);
        }
        self.predictor.visit_mut(f);
    }
}

/// Per-layer `(f_rgb, f_tir)` after any configured DDF module.
pub fn backbone_forward(rgb: &Tensor, tir: &Tensor, model: &Model, topology: Topology) -> Result<Vec<(FeatureMap, FeatureMap)>> {
    if rgb.shape() != tir.shape() {
        return Err(Error::Shape(format!("rgb {:?} vs tir {:?}", rgb.shape(), tir.shape())));
    }
    if rgb.rank() != 4 || rgb.dim(1) != INPUT_CHANNELS {
        return Err(Error::Shape(format!("expected (B, {INPUT_CHANNELS}, H, W), got {:?}", rgb.shape())));
    }
    let g = Graph::new();
    let bb = model.backbone(g.constant(rgb.clone()), g.constant(tir.clone()), topology);
    bb.layers
        .iter()
        .enumerate()
        .map(|(l, (r, t))| {
            Ok((
                FeatureMap::new(r.value().as_ref().clone(), l + 1)?,
                FeatureMap::new(t.value().as_ref().clone(), l + 1)?,
            ))
        })
        .collect()
}

pub fn encode_target_state(x: &FeatureMap, bbox: &BBox, p: &PredictorParams, sigma_factor: f64) -> Result<FeatureMap> {
    bbox.validate()?;
    check_width(x, p)?;
    let g = Graph::new();
    let out = p.encode(g.constant(x.tensor().clone()), Some(bbox), sigma_factor);
    FeatureMap::new(out.value().as_ref().clone(), x.layer())
}

fn check_width(x: &FeatureMap, p: &PredictorParams) -> Result<()> {
    if x.channels() != p.dim() || x.batch() != 1 {
        return Err(Error::Shape(format!("expected (1, {}, H, W), got {:?}", p.dim(), x.dims())));
    }
    Ok(())
}

/// Target-model weights from encoded training maps and an encoded test map.
pub fn predictor_forward(train_feats: &[FeatureMap], test_feat: &FeatureMap, p: &PredictorParams) -> Result<TargetModelWeights> {
    if train_feats.is_empty() {
        return Err(Error::Empty("predictor needs at least one training frame".into()));
    }
    for f in train_feats.iter().chain(std::iter::once(test_feat)) {
        check_width(f, p)?;
        if f.dims()[2..] != test_feat.dims()[2..] {
            return Err(Error::Shape("training and test maps differ in size".into()));
        }
    }
    let g = Graph::new();
    let train: Vec<Var<'_>> = train_feats.iter().map(|f| g.constant(f.tensor().clone())).collect();
    let pv = p.forward(&train, g.constant(test_feat.tensor().clone()));
    let w_cls = pv.w_cls.value().data().to_vec();
    let w_bbreg = pv.w_bbreg.value().data().to_vec();
    Ok(TargetModelWeights { w_cls, w_bbreg })
}

/// `(score map, dense LTRB map)` for test features.
pub fn target_model_apply(test_feat: &FeatureMap, w: &TargetModelWeights, p: &PredictorParams) -> Result<(Tensor, Tensor)> {
    check_width(test_feat, p)?;
    if w.w_cls.len() != p.dim() || w.w_bbreg.len() != p.dim() {
        return Err(Error::Shape("target-model weights do not match predictor width".into()));
    }
    let g = Graph::new();
    let d = p.dim();
    let pred = p.apply(
        g.constant(test_feat.tensor().clone()),
        g.constant(Tensor::new(vec![1, d], w.w_cls.clone())?),
        g.constant(Tensor::new(vec![1, d], w.w_bbreg.clone())?),
    );
    let score = pred.score.value().as_ref().clone();
    let ltrb = pred.ltrb.value().as_ref().clone();
    Ok((score, ltrb))
}

// ---------------------------------------------------------------------------
// Loss

pub struct LossVars<'g> {
    pub total: Var<'g>,
    pub cls: Var<'g>,
    pub reg: Var<'g>,
}

/// Mean squared error of the score map against the Gaussian label plus L1
/// of the LTRB map inside the box, weighted 1:1.
pub fn tracking_loss<'g>(pred: &Prediction<'g>, target: &BBox, sigma_factor: f64) -> LossVars<'g> {
    let g = pred.score.graph();
    let [_, _, h, w] = pred.score.value().dims4();
    let label = g.constant(gaussian_label(h, w, target, sigma_factor));
    let cls = pred.score.sub(label).square().mean();
    let mask = box_mask(h, w, target);
    let count = mask.sum();
    let reg = pred
        .ltrb
        .sub(g.constant(ltrb_map(h, w, target)))
        .abs()
        .mul(g.constant(mask))
        .sum()
        .scale(1.0 / (4.0 * count));
    LossVars { total: cls.add(reg), cls, reg }
}
