//! Fusion units of a dynamic branch: spatial attention enhancement (SAE),
//! channel attention enhancement (CAE), the selective fusion unit (SFU)
//! and the gate-predicting router.
//!
//! Every unit has a graph-level `forward` working on [`Var`]s, used for
//! training and gradient checks, and a free function on [`FeatureMap`]s
//! that validates shapes and runs a throwaway graph.

use rand::Rng;

use crate::autograd::{concat, Graph, Var};
use crate::error::{Error, Result};
use crate::param::{Linear, Module, Param};
use crate::tensor::{FeatureMap, Tensor};

/// Reduction ratio used by routers, SFU paths and the AFM.
pub const REDUCTION: usize = 4;

/// Initial router output bias, so freshly built gates start open.
pub const ROUTER_BIAS_INIT: f64 = 0.5;

/// `GAP(f) ⊕ GMP(f)` as a `(B, 2C)` descriptor, average first.
pub fn pooled_descriptor(f: Var<'_>) -> Var<'_> {
    concat(&[f.global_avg_pool(), f.global_max_pool()], 1)
}

fn check_channels(what: &str, expected: usize, f: &FeatureMap) -> Result<()> {
    if f.channels() != expected {
        return Err(Error::Shape(format!(
            "{what} expects {expected} channels, feature map has {}",
            f.channels()
        )));
    }
    Ok(())
}

fn check_same_shape(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "modality shapes differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

/// Spatial attention: a 1×1 convolution `C → 1` followed by a sigmoid
/// yields a spatial mask that multiplies every channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub weight: Param,
    pub bias: Param,
}

impl SaeParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::normal(
                format!("{prefix}.weight"),
                &[1, channels, 1, 1],
                channels,
                1.0,
                rng,
            ),
            bias: Param::zeros(format!("{prefix}.bias"), &[1]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.value().dim(1)
    }

    /// The `(B, 1, H, W)` spatial mask.
    pub fn mask<'g>(&self, f: Var<'g>) -> Var<'g> {
        let g = f.graph();
        f.conv2d(self.weight.bind(g), Some(self.bias.bind(g)), 1, 0)
            .sigmoid()
    }

    pub fn forward<'g>(&self, f: Var<'g>) -> Var<'g> {
        self.mask(f).mul(f)
    }
}

impl Module for SaeParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn sae_forward(f: &FeatureMap, p: &SaeParams) -> Result<FeatureMap> {
    check_channels("SAE", p.channels(), f)?;
    let g = Graph::new();
    let out = p.forward(g.constant(f.tensor().clone()));
    FeatureMap::new((*out.value()).clone(), f.layer())
}

// ---------------------------------------------------------------------------

/// Channel attention: a linear map `2C → C` on the pooled descriptor,
/// sigmoid, then per-channel reweighting.
#[derive(Debug, Clone, PartialEq)]
pub struct CaeParams {
    pub mix: Linear,
}

impl CaeParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            mix: Linear::new(&format!("{prefix}.mix"), 2 * channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.mix.output_dim()
    }

    /// Per-channel weights `(B, C)`.
    pub fn weights<'g>(&self, f: Var<'g>) -> Var<'g> {
        self.mix.forward(pooled_descriptor(f)).sigmoid()
    }

    pub fn forward<'g>(&self, f: Var<'g>) -> Var<'g> {
        let [b, c, _, _] = f.value().dims4();
        self.weights(f).reshape(&[b, c, 1, 1]).mul(f)
    }
}

impl Module for CaeParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.mix.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.mix.visit_mut(f);
    }
}

pub fn cae_forward(f: &FeatureMap, p: &CaeParams) -> Result<FeatureMap> {
    check_channels("CAE", p.channels(), f)?;
    if p.mix.input_dim() != 2 * p.channels() {
        return Err(Error::Param("CAE mixing input must be 2C".into()));
    }
    let g = Graph::new();
    let out = p.forward(g.constant(f.tensor().clone()));
    FeatureMap::new((*out.value()).clone(), f.layer())
}

// ---------------------------------------------------------------------------

/// Selective fusion: a shared descriptor of `f_rgb + f_tir` feeds one
/// reduce→expand path per modality; a per-channel softmax across the two
/// modalities mixes them.
#[derive(Debug, Clone, PartialEq)]
pub struct SfuParams {
    pub rgb_reduce: Linear,
    pub rgb_expand: Linear,
    pub tir_reduce: Linear,
    pub tir_expand: Linear,
}

impl SfuParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % REDUCTION != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction {REDUCTION}"
            )));
        }
        let hidden = channels / REDUCTION;
        Ok(Self {
            rgb_reduce: Linear::new(&format!("{prefix}.rgb_reduce"), 2 * channels, hidden, rng),
            rgb_expand: Linear::new(&format!("{prefix}.rgb_expand"), hidden, channels, rng),
            tir_reduce: Linear::new(&format!("{prefix}.tir_reduce"), 2 * channels, hidden, rng),
            tir_expand: Linear::new(&format!("{prefix}.tir_expand"), hidden, channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.rgb_expand.output_dim()
    }

    /// Per-channel modality weights `(B, 2, C)`: index 0 RGB, 1 TIR.
    pub fn weights<'g>(&self, f_rgb: Var<'g>, f_tir: Var<'g>) -> Var<'g> {
        let [b, c, _, _] = f_rgb.value().dims4();
        let d = pooled_descriptor(f_rgb.add(f_tir));
        let rgb = self.rgb_expand.forward(self.rgb_reduce.forward(d).relu());
        let tir = self.tir_expand.forward(self.tir_reduce.forward(d).relu());
        concat(&[rgb.reshape(&[b, 1, c]), tir.reshape(&[b, 1, c])], 1).softmax(1)
    }

    pub fn forward<'g>(&self, f_rgb: Var<'g>, f_tir: Var<'g>) -> Var<'g> {
        let [b, c, _, _] = f_rgb.value().dims4();
        let w = self.weights(f_rgb, f_tir);
        let a = w.narrow(1, 0, 1).reshape(&[b, c, 1, 1]);
        let t = w.narrow(1, 1, 1).reshape(&[b, c, 1, 1]);
        a.mul(f_rgb).add(t.mul(f_tir))
    }
}

impl Module for SfuParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.rgb_reduce.visit(f);
        self.rgb_expand.visit(f);
        self.tir_reduce.visit(f);
        self.tir_expand.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.rgb_reduce.visit_mut(f);
        self.rgb_expand.visit_mut(f);
        self.tir_reduce.visit_mut(f);
        self.tir_expand.visit_mut(f);
    }
}

pub fn sfu_forward(f_rgb: &FeatureMap, f_tir: &FeatureMap, p: &SfuParams) -> Result<FeatureMap> {
    check_same_shape(f_rgb, f_tir)?;
    check_channels("SFU", p.channels(), f_rgb)?;
    let g = Graph::new();
    let out = p.forward(
        g.constant(f_rgb.tensor().clone()),
        g.constant(f_tir.tensor().clone()),
    );
    FeatureMap::new((*out.value()).clone(), f_rgb.layer())
}

/// The `(B, 2, C)` modality weights the SFU would apply.
pub fn sfu_weights(f_rgb: &FeatureMap, f_tir: &FeatureMap, p: &SfuParams) -> Result<Tensor> {
    check_same_shape(f_rgb, f_tir)?;
    check_channels("SFU", p.channels(), f_rgb)?;
    let g = Graph::new();
    let w = p.weights(
        g.constant(f_rgb.tensor().clone()),
        g.constant(f_tir.tensor().clone()),
    );
    Ok((*w.value()).clone())
}

// ---------------------------------------------------------------------------

/// Gate predictor `Relu(Tanh(MLP(GAP ⊕ GMP)))`. The MLP is two linear
/// layers with no activation in between.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub hidden: Linear,
    pub output: Linear,
}

impl RouterParams {
    /// `in_channels` is the channel count of the routed feature (2C for
    /// the concatenated RGB⊕TIR input), `gates` the number of gated
    /// sub-outputs.
    pub fn new(
        prefix: &str,
        in_channels: usize,
        hidden: usize,
        gates: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut output = Linear::new(&format!("{prefix}.output"), hidden.max(1), gates, rng);
        output.bias.value_mut().data_mut().fill(ROUTER_BIAS_INIT);
        Self {
            hidden: Linear::new(&format!("{prefix}.hidden"), 2 * in_channels, hidden.max(1), rng),
            output,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.hidden.input_dim() / 2
    }

    pub fn gates(&self) -> usize {
        self.output.output_dim()
    }

    /// Gate weights `(B, gates)`, every entry in `[0, 1)`.
    pub fn forward<'g>(&self, f: Var<'g>) -> Var<'g> {
        self.output
            .forward(self.hidden.forward(pooled_descriptor(f)))
            .gate()
    }
}

impl Module for RouterParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.hidden.visit(f);
        self.output.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.hidden.visit_mut(f);
        self.output.visit_mut(f);
    }
}

/// Per-sample gate weights, shape `(B, gates)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterSignal(Tensor);

impl RouterSignal {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Shape(format!("router signal must be 2-D, got {:?}", t.shape())));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..1.0).contains(*v)) {
            return Err(Error::Param(format!("router gate {v} outside [0, 1)")));
        }
        Ok(Self(t))
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn gates(&self) -> usize {
        self.0.dim(1)
    }

    pub fn get(&self, sample: usize, gate: usize) -> f64 {
        self.0.at2(sample, gate)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

pub fn router_forward(f: &FeatureMap, p: &RouterParams) -> Result<RouterSignal> {
    check_channels("router", p.in_channels(), f)?;
    let g = Graph::new();
    let s = p.forward(g.constant(f.tensor().clone()));
    RouterSignal::new((*s.value()).clone())
}
