//! Attribute-specific dynamic fusion branches.
//!
//! A branch runs one spatial-and-channel fusion unit (SCFU) per modality,
//! then a selective fusion unit across both, every unit scaled by its
//! router. A zero gate drops the unit: the SCFU becomes the identity and
//! the SFU contribution vanishes.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Graph, Var};
use crate::error::{Error, Result};
use crate::fusion::{RouterParams, SaeParams, CaeParams, SfuParams, REDUCTION};
use crate::param::{Module, Param};
use crate::tensor::FeatureMap;

/// Challenge attribute handled by a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AttributeId {
    /// Extreme illumination.
    EI,
    /// Thermal crossover.
    TC,
    /// Occlusion.
    OCC,
    /// Low resolution.
    LR,
    /// Similar appearance.
    SA,
    /// General, always present.
    GEN,
}

impl AttributeId {
    pub const ALL: [AttributeId; 6] = [
        AttributeId::EI,
        AttributeId::TC,
        AttributeId::OCC,
        AttributeId::LR,
        AttributeId::SA,
        AttributeId::GEN,
    ];

    /// The five challenge-specific attributes, in stage-1 training order.
    pub const SPECIFIC: [AttributeId; 5] = [
        AttributeId::EI,
        AttributeId::TC,
        AttributeId::OCC,
        AttributeId::LR,
        AttributeId::SA,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeId::EI => "EI",
            AttributeId::TC => "TC",
            AttributeId::OCC => "OCC",
            AttributeId::LR => "LR",
            AttributeId::SA => "SA",
            AttributeId::GEN => "GEN",
        }
    }

    pub fn index(self) -> usize {
        AttributeId::ALL.iter().position(|&a| a == self).unwrap()
    }
}

impl fmt::Display for AttributeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttributeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeId::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attribute '{s}'")))
    }
}

/// SAE + CAE with a two-gate router, applied residually to one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct ScfuParams {
    pub sae: SaeParams,
    pub cae: CaeParams,
    pub router: RouterParams,
}

impl ScfuParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            sae: SaeParams::new(&format!("{prefix}.sae"), channels, rng),
            cae: CaeParams::new(&format!("{prefix}.cae"), channels, rng),
            router: RouterParams::new(
                &format!("{prefix}.router"),
                channels,
                2 * channels / REDUCTION,
                2,
                rng,
            ),
        }
    }

    pub fn channels(&self) -> usize {
        self.sae.channels()
    }

    /// Returns the unit output and its `(B, 2)` gates `(w_sae, w_cae)`.
    pub fn forward<'g>(&self, f: Var<'g>) -> (Var<'g>, Var<'g>) {
        let b = f.value().dim(0);
        let gates = self.router.forward(f);
        let w_sae = gates.narrow(1, 0, 1).reshape(&[b, 1, 1, 1]);
        let w_cae = gates.narrow(1, 1, 1).reshape(&[b, 1, 1, 1]);
        let out = f
            .add(w_sae.mul(self.sae.forward(f)))
            .add(w_cae.mul(self.cae.forward(f)));
        (out, gates)
    }
}

impl Module for ScfuParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.sae.visit(f);
        self.cae.visit(f);
        self.router.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.sae.visit_mut(f);
        self.cae.visit_mut(f);
        self.router.visit_mut(f);
    }
}

pub fn scfu_forward(f: &FeatureMap, p: &ScfuParams) -> Result<(FeatureMap, Vec<(f64, f64)>)> {
    if f.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "SCFU expects {} channels, got {}",
            p.channels(),
            f.channels()
        )));
    }
    let g = Graph::new();
    let (out, gates) = p.forward(g.constant(f.tensor().clone()));
    let gv = gates.value();
    let pairs = (0..f.batch()).map(|b| (gv.at2(b, 0), gv.at2(b, 1))).collect();
    Ok((FeatureMap::new((*out.value()).clone(), f.layer())?, pairs))
}

/// One attribute branch: two SCFUs and a gated SFU.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub attribute: AttributeId,
    pub scfu_rgb: ScfuParams,
    pub scfu_tir: ScfuParams,
    pub sfu: SfuParams,
    pub sfu_router: RouterParams,
}

/// Graph-level branch result.
#[derive(Debug, Clone, Copy)]
pub struct BranchVars<'g> {
    pub fused: Var<'g>,
    pub rgb: Var<'g>,
    pub tir: Var<'g>,
    pub rgb_gates: Var<'g>,
    pub tir_gates: Var<'g>,
    pub sfu_gate: Var<'g>,
}

impl BranchParams {
    pub fn new(prefix: &str, attribute: AttributeId, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            attribute,
            scfu_rgb: ScfuParams::new(&format!("{prefix}.scfu_rgb"), channels, rng),
            scfu_tir: ScfuParams::new(&format!("{prefix}.scfu_tir"), channels, rng),
            sfu: SfuParams::new(&format!("{prefix}.sfu"), channels, rng)?,
            sfu_router: RouterParams::new(
                &format!("{prefix}.sfu_router"),
                2 * channels,
                2 * channels / REDUCTION,
                1,
                rng,
            ),
        })
    }

    pub fn channels(&self) -> usize {
        self.scfu_rgb.channels()
    }

    /// Zero every router so the branch is dormant.
    pub fn zero_routers(&mut self) {
        self.scfu_rgb.router.fill(0.0);
        self.scfu_tir.router.fill(0.0);
        self.sfu_router.fill(0.0);
    }

    pub fn forward<'g>(&self, f_rgb: Var<'g>, f_tir: Var<'g>) -> BranchVars<'g> {
        let b = f_rgb.value().dim(0);
        let (rgb, rgb_gates) = self.scfu_rgb.forward(f_rgb);
        let (tir, tir_gates) = self.scfu_tir.forward(f_tir);
        let sfu_gate = self.sfu_router.forward(concat(&[rgb, tir], 1));
        let fused = sfu_gate
            .reshape(&[b, 1, 1, 1])
            .mul(self.sfu.forward(rgb, tir));
        BranchVars {
            fused,
            rgb,
            tir,
            rgb_gates,
            tir_gates,
            sfu_gate,
        }
    }
}

impl Module for BranchParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.scfu_rgb.visit(f);
        self.scfu_tir.visit(f);
        self.sfu.visit(f);
        self.sfu_router.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.scfu_rgb.visit_mut(f);
        self.scfu_tir.visit_mut(f);
        self.sfu.visit_mut(f);
        self.sfu_router.visit_mut(f);
    }
}

/// The five router outputs of a branch for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub w_sae_rgb: f64,
    pub w_cae_rgb: f64,
    pub w_sae_tir: f64,
    pub w_cae_tir: f64,
    pub w_sfu: f64,
}

impl GateRecord {
    pub fn as_array(&self) -> [f64; 5] {
        [self.w_sae_rgb, self.w_cae_rgb, self.w_sae_tir, self.w_cae_tir, self.w_sfu]
    }

    pub fn from_vars(v: &BranchVars<'_>) -> Vec<GateRecord> {
        let (r, t, s) = (v.rgb_gates.value(), v.tir_gates.value(), v.sfu_gate.value());
        (0..r.dim(0))
            .map(|b| GateRecord {
                w_sae_rgb: r.at2(b, 0),
                w_cae_rgb: r.at2(b, 1),
                w_sae_tir: t.at2(b, 0),
                w_cae_tir: t.at2(b, 1),
                w_sfu: s.at2(b, 0),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutput {
    pub fused: FeatureMap,
    pub gates: Vec<GateRecord>,
}

pub fn branch_forward(f_rgb: &FeatureMap, f_tir: &FeatureMap, p: &BranchParams) -> Result<BranchOutput> {
    if f_rgb.dims() != f_tir.dims() {
        return Err(Error::Shape(format!(
            "modality shapes differ: {:?} vs {:?}",
            f_rgb.dims(),
            f_tir.dims()
        )));
    }
    if f_rgb.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "branch {} expects {} channels, got {}",
            p.attribute,
            p.channels(),
            f_rgb.channels()
        )));
    }
    let g = Graph::new();
    let v = p.forward(
        g.constant(f_rgb.tensor().clone()),
        g.constant(f_tir.tensor().clone()),
    );
    Ok(BranchOutput {
        fused: FeatureMap::new((*v.fused.value()).clone(), f_rgb.layer())?,
        gates: GateRecord::from_vars(&v),
    })
}

/// Gate table over a frame sequence, one row per frame (sample 0 of each).
pub fn branch_structure_trace(
    frames: &[(FeatureMap, FeatureMap)],
    p: &BranchParams,
) -> Result<Vec<GateRecord>> {
    if frames.is_empty() {
        return Err(Error::Empty("gate trace needs at least one frame".into()));
    }
    frames
        .iter()
        .map(|(r, t)| Ok(branch_forward(r, t, p)?.gates[0]))
        .collect()
}

pub const TRACE_HEADER: &str = "frame_index,w_sae_rgb,w_cae_rgb,w_sae_tir,w_cae_tir,w_sfu";

pub fn write_trace_csv(mut w: impl Write, rows: &[GateRecord]) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for (i, r) in rows.iter().enumerate() {
        let [a, b, c, d, e] = r.as_array();
        writeln!(w, "{i},{a},{b},{c},{d},{e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{cae_forward, router_forward, sae_forward, sfu_forward};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_map(shape: [usize; 4], seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let data = (0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect();
        FeatureMap::from_data(shape, data).unwrap()
    }

    fn branch(seed: u64) -> BranchParams {
        BranchParams::new("b", AttributeId::OCC, 4, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    /// SCFU built from the independently checked unit functions.
    fn scfu_oracle(f: &FeatureMap, p: &ScfuParams) -> (Tensor, f64, f64) {
        let s = router_forward(f, &p.router).unwrap();
        let (ws, wc) = (s.get(0, 0), s.get(0, 1));
        let sae = sae_forward(f, &p.sae).unwrap();
        let cae = cae_forward(f, &p.cae).unwrap();
        let mut out = f.tensor().clone();
        for ((o, a), c) in out.data_mut().iter_mut().zip(sae.tensor().data()).zip(cae.tensor().data()) {
            *o += ws * a + wc * c;
        }
        (out, ws, wc)
    }

    #[test]
    fn attribute_parsing() {
        assert_eq!("occ".parse::<AttributeId>().unwrap(), AttributeId::OCC);
        assert!("FM".parse::<AttributeId>().is_err());
        assert_eq!(AttributeId::ALL.len(), 6);
        assert_eq!(AttributeId::GEN.index(), 5);
    }

    #[test]
    fn zero_router_scfu_is_identity() {
        let mut p = ScfuParams::new("s", 4, &mut ChaCha8Rng::seed_from_u64(1));
        p.router.fill(0.0);
        let f = random_map([1, 4, 3, 3], 2);
        let (out, gates) = scfu_forward(&f, &p).unwrap();
        assert_eq!(gates, vec![(0.0, 0.0)]);
        assert_eq!(out.tensor(), f.tensor());
    }

    #[test]
    fn scfu_zero_input_is_zero() {
        let p = ScfuParams::new("s", 4, &mut ChaCha8Rng::seed_from_u64(1));
        let f = FeatureMap::from_data([1, 4, 3, 3], vec![0.0; 36]).unwrap();
        let (out, _) = scfu_forward(&f, &p).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scfu_matches_composition_oracle() {
        let p = ScfuParams::new("s", 4, &mut ChaCha8Rng::seed_from_u64(8));
        let f = random_map([1, 4, 3, 3], 9);
        let (out, gates) = scfu_forward(&f, &p).unwrap();
        let (want, ws, wc) = scfu_oracle(&f, &p);
        assert!(out.tensor().max_abs_diff(&want) <= 1e-12);
        assert_eq!(gates[0], (ws, wc));
    }

    #[test]
    fn dormant_branch_outputs_zero() {
        let mut p = branch(3);
        p.zero_routers();
        let out = branch_forward(&random_map([1, 4, 3, 3], 1), &random_map([1, 4, 3, 3], 2), &p).unwrap();
        assert!(out.fused.tensor().data().iter().all(|&v| v == 0.0));
        assert_eq!(out.gates[0].as_array(), [0.0; 5]);
    }

    #[test]
    fn branch_matches_composition_oracle() {
        let p = branch(17);
        let fr = random_map([1, 4, 3, 3], 18);
        let ft = random_map([1, 4, 3, 3], 19);
        let out = branch_forward(&fr, &ft, &p).unwrap();
        let (r, wsr, wcr) = scfu_oracle(&fr, &p.scfu_rgb);
        let (t, wst, wct) = scfu_oracle(&ft, &p.scfu_tir);
        let mut cat = r.data().to_vec();
        cat.extend_from_slice(t.data());
        let cat = FeatureMap::from_data([1, 8, 3, 3], cat).unwrap();
        let w = router_forward(&cat, &p.sfu_router).unwrap().get(0, 0);
        let rm = FeatureMap::new(r, 1).unwrap();
        let tm = FeatureMap::new(t, 1).unwrap();
        let want = sfu_forward(&rm, &tm, &p.sfu).unwrap().tensor().map(|v| w * v);
        assert!(out.fused.tensor().max_abs_diff(&want) <= 1e-12);
        assert_eq!(out.gates[0].as_array(), [wsr, wcr, wst, wct, w]);
    }

    #[test]
    fn saturated_sfu_router_with_symmetric_sfu_scales_input() {
        let mut p = branch(4);
        p.scfu_rgb.router.fill(0.0);
        p.scfu_tir.router.fill(0.0);
        // Route a huge constant through the SFU router so tanh saturates.
        p.sfu_router.fill(0.0);
        p.sfu_router.output.bias.value_mut().data_mut()[0] = 30.0;
        p.sfu.tir_reduce.weight = Param::new("x", p.sfu.rgb_reduce.weight.value().clone());
        p.sfu.tir_reduce.bias = Param::new("y", p.sfu.rgb_reduce.bias.value().clone());
        p.sfu.tir_expand.weight = Param::new("z", p.sfu.rgb_expand.weight.value().clone());
        p.sfu.tir_expand.bias = Param::new("u", p.sfu.rgb_expand.bias.value().clone());
        let f = random_map([1, 4, 3, 3], 5);
        let out = branch_forward(&f, &f, &p).unwrap();
        let w = out.gates[0].w_sfu;
        assert!(w < 1.0 && w > 1.0 - 1e-12);
        let want = f.tensor().map(|v| w * v);
        assert!(out.fused.tensor().max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn branch_rejects_shape_mismatch() {
        let p = branch(0);
        assert!(branch_forward(&random_map([1, 4, 3, 3], 0), &random_map([1, 4, 3, 2], 0), &p).is_err());
        assert!(branch_forward(&random_map([1, 3, 3, 3], 0), &random_map([1, 3, 3, 3], 0), &p).is_err());
    }

    #[test]
    fn trace_matches_per_frame_forward_and_is_deterministic() {
        let p = branch(6);
        assert!(branch_structure_trace(&[], &p).is_err());
        let frames: Vec<_> = (0..4)
            .map(|i| (random_map([1, 4, 3, 3], 100 + i), random_map([1, 4, 3, 3], 200 + i)))
            .collect();
        let rows = branch_structure_trace(&frames, &p).unwrap();
        assert_eq!(rows.len(), 4);
        for (row, (r, t)) in rows.iter().zip(&frames) {
            assert_eq!(*row, branch_forward(r, t, &p).unwrap().gates[0]);
        }
        let constant = vec![frames[0].clone(); 3];
        let rows = branch_structure_trace(&constant, &p).unwrap();
        assert!(rows.iter().all(|r| *r == rows[0]));
    }

    #[test]
    fn trace_csv_layout() {
        let rows = vec![GateRecord { w_sae_rgb: 0.5, w_cae_rgb: 0.0, w_sae_tir: 0.25, w_cae_tir: 0.125, w_sfu: 0.75 }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("{TRACE_HEADER}\n0,0.5,0,0.25,0.125,0.75\n"));
    }
}
