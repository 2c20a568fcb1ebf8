//! Adaptive aggregation of the six branch outputs (AFM) and the
//! lightweight enhancement that re-injects the aggregate into each
//! modality stream (EFM).

use rand::Rng;

use crate::autograd::{concat, Graph, Var};
use crate::branch::AttributeId;
use crate::error::{Error, Result};
use crate::fusion::REDUCTION;
use crate::param::{Conv2d, Linear, Module, Param};
use crate::tensor::{FeatureMap, Tensor};

pub const BRANCHES: usize = AttributeId::ALL.len();

/// Selective-kernel style aggregation: GAP of the branch sum, reduce,
/// expand to `6·C` logits, softmax over branches per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AfmParams {
    pub reduce: Linear,
    pub expand: Linear,
}

impl AfmParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % REDUCTION != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} not divisible by reduction {REDUCTION}"
            )));
        }
        let hidden = channels / REDUCTION;
        Ok(Self {
            reduce: Linear::new(&format!("{prefix}.reduce"), channels, hidden, rng),
            expand: Linear::new(&format!("{prefix}.expand"), hidden, BRANCHES * channels, rng),
        })
    }

    pub fn channels(&self) -> usize {
        self.reduce.input_dim()
    }

    /// Branch weights `(B, 6, C)`.
    pub fn weights<'g>(&self, branches: &[Var<'g>]) -> Var<'g> {
        let [b, c, _, _] = branches[0].value().dims4();
        let sum = branches[1..].iter().fold(branches[0], |acc, &f| acc.add(f));
        let d = sum.global_avg_pool();
        self.expand
            .forward(self.reduce.forward(d).relu())
            .reshape(&[b, BRANCHES, c])
            .softmax(1)
    }

    pub fn forward<'g>(&self, branches: &[Var<'g>]) -> Var<'g> {
        assert_eq!(branches.len(), BRANCHES);
        let [b, c, h, w] = branches[0].value().dims4();
        let weights = self.weights(branches).reshape(&[b, BRANCHES, c, 1, 1]);
        let stacked: Vec<Var<'g>> = branches
            .iter()
            .map(|f| f.reshape(&[b, 1, c, h, w]))
            .collect();
        concat(&stacked, 1)
            .mul(weights)
            .sum_axis(1)
            .reshape(&[b, c, h, w])
    }
}

impl Module for AfmParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.reduce.visit(f);
        self.expand.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.reduce.visit_mut(f);
        self.expand.visit_mut(f);
    }
}

fn check_branches(branch_feats: &[FeatureMap], p: &AfmParams) -> Result<()> {
    if branch_feats.len() != BRANCHES {
        return Err(Error::Shape(format!(
            "AFM needs {BRANCHES} branch maps, got {}",
            branch_feats.len()
        )));
    }
    let dims = branch_feats[0].dims();
    if branch_feats.iter().any(|f| f.dims() != dims) {
        return Err(Error::Shape("AFM branch maps differ in shape".into()));
    }
    if dims[1] != p.channels() {
        return Err(Error::Shape(format!(
            "AFM expects {} channels, got {}",
            p.channels(),
            dims[1]
        )));
    }
    Ok(())
}

pub fn afm_forward(branch_feats: &[FeatureMap], p: &AfmParams) -> Result<FeatureMap> {
    check_branches(branch_feats, p)?;
    let g = Graph::new();
    let vars: Vec<Var<'_>> = branch_feats.iter().map(|f| g.constant(f.tensor().clone())).collect();
    FeatureMap::new((*p.forward(&vars).value()).clone(), branch_feats[0].layer())
}

/// The `(B, 6, C)` branch weights the AFM would apply.
pub fn afm_weights(branch_feats: &[FeatureMap], p: &AfmParams) -> Result<Tensor> {
    check_branches(branch_feats, p)?;
    let g = Graph::new();
    let vars: Vec<Var<'_>> = branch_feats.iter().map(|f| g.constant(f.tensor().clone())).collect();
    Ok((*p.weights(&vars).value()).clone())
}

/// A 1×1 convolution followed by a 3×3 convolution, both `C → C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStack {
    pub point: Conv2d,
    pub spatial: Conv2d,
}

impl ConvStack {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            point: Conv2d::new(&format!("{prefix}.point"), channels, channels, 1, 1, rng),
            spatial: Conv2d::new(&format!("{prefix}.spatial"), channels, channels, 3, 1, rng),
        }
    }

    pub fn forward<'g>(&self, x: Var<'g>) -> Var<'g> {
        self.spatial.forward(self.point.forward(x))
    }
}

impl Module for ConvStack {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.point.visit(f);
        self.spatial.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.point.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

/// `f_m ⊙ σ(gate(f_ag)) + Relu(residual(f_ag))`, with independent gate and
/// residual stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct EfmParams {
    pub gate: ConvStack,
    pub residual: ConvStack,
}

impl EfmParams {
    pub fn new(prefix: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            gate: ConvStack::new(&format!("{prefix}.gate"), channels, rng),
            residual: ConvStack::new(&format!("{prefix}.residual"), channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.gate.point.in_channels()
    }

    pub fn forward<'g>(&self, f_m: Var<'g>, f_ag: Var<'g>) -> Var<'g> {
        f_m.mul(self.gate.forward(f_ag).sigmoid())
            .add(self.residual.forward(f_ag).relu())
    }
}

impl Module for EfmParams {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.gate.visit(f);
        self.residual.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.gate.visit_mut(f);
        self.residual.visit_mut(f);
    }
}

pub fn efm_forward(f_m: &FeatureMap, f_ag: &FeatureMap, p: &EfmParams) -> Result<FeatureMap> {
    if f_m.dims() != f_ag.dims() {
        return Err(Error::Shape(format!(
            "EFM inputs differ: {:?} vs {:?}",
            f_m.dims(),
            f_ag.dims()
        )));
    }
    if f_m.channels() != p.channels() {
        return Err(Error::Shape(format!(
            "EFM expects {} channels, got {}",
            p.channels(),
            f_m.channels()
        )));
    }
    let g = Graph::new();
    let out = p.forward(g.constant(f_m.tensor().clone()), g.constant(f_ag.tensor().clone()));
    FeatureMap::new((*out.value()).clone(), f_m.layer())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_map(shape: [usize; 4], seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let data = (0..shape.iter().product()).map(|_| n.sample(&mut rng)).collect();
        FeatureMap::from_data(shape, data).unwrap()
    }

    fn six(shape: [usize; 4], seed: u64) -> Vec<FeatureMap> {
        (0..6).map(|k| random_map(shape, seed + k)).collect()
    }

    /// Direct 2-D convolution with zero padding for one sample.
    fn conv(x: &FeatureMap, c: &Conv2d) -> Vec<f64> {
        let [_, cin, h, w] = x.dims();
        let wt = c.weight.value();
        let (cout, k) = (wt.dim(0), wt.dim(2));
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = c.bias.value().data()[o];
                    for i in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += wt.at4(o, i, ky, kx) * x.at(0, i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[(o * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn afm_on_identical_inputs_is_identity() {
        let f = random_map([1, 4, 3, 3], 1);
        let p = AfmParams::new("afm", 4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let out = afm_forward(&vec![f.clone(); 6], &p).unwrap();
        assert!(out.tensor().max_abs_diff(f.tensor()) <= 1e-15);
    }

    #[test]
    fn zeroed_afm_averages_branches() {
        let maps = six([1, 4, 2, 2], 10);
        let mut p = AfmParams::new("afm", 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.fill(0.0);
        let w = afm_weights(&maps, &p).unwrap();
        assert!(w.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-16));
        let out = afm_forward(&maps, &p).unwrap();
        for i in 0..16 {
            let mean: f64 = maps.iter().map(|m| m.tensor().data()[i]).sum::<f64>() / 6.0;
            assert!((out.tensor().data()[i] - mean).abs() <= 1e-15);
        }
    }

    #[test]
    fn afm_matches_scalar_oracle() {
        let maps = six([1, 4, 2, 2], 20);
        let p = AfmParams::new("afm", 4, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let out = afm_forward(&maps, &p).unwrap();
        let c = 4;
        let mut d = vec![0.0; c];
        for ch in 0..c {
            for m in &maps {
                for y in 0..2 {
                    for x in 0..2 {
                        d[ch] += m.at(0, ch, y, x) / 4.0;
                    }
                }
            }
        }
        let lin = |l: &Linear, x: &[f64]| -> Vec<f64> {
            (0..l.output_dim())
                .map(|r| l.bias.value().data()[r] + (0..l.input_dim()).map(|k| l.weight.value().at2(r, k) * x[k]).sum::<f64>())
                .collect()
        };
        let h: Vec<f64> = lin(&p.reduce, &d).into_iter().map(|v| v.max(0.0)).collect();
        let logits = lin(&p.expand, &h);
        for ch in 0..c {
            let l: Vec<f64> = (0..6).map(|k| logits[k * c + ch]).collect();
            let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
            for y in 0..2 {
                for x in 0..2 {
                    let want: f64 = (0..6).map(|k| (l[k] - m).exp() / z * maps[k].at(0, ch, y, x)).sum();
                    assert!((out.at(0, ch, y, x) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn afm_rejects_wrong_count_or_shape() {
        let p = AfmParams::new("afm", 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(afm_forward(&six([1, 4, 2, 2], 0)[..5], &p).is_err());
        let mut maps = six([1, 4, 2, 2], 0);
        maps[3] = random_map([1, 4, 3, 2], 9);
        assert!(afm_forward(&maps, &p).is_err());
    }

    #[test]
    fn zeroed_efm_halves_modality() {
        let mut p = EfmParams::new("efm", 3, &mut ChaCha8Rng::seed_from_u64(0));
        p.fill(0.0);
        let fm = random_map([1, 3, 4, 4], 1);
        let out = efm_forward(&fm, &random_map([1, 3, 4, 4], 2), &p).unwrap();
        for (o, i) in out.tensor().data().iter().zip(fm.tensor().data()) {
            assert_eq!(*o, 0.5 * i);
        }
    }

    #[test]
    fn efm_zero_modality_leaves_nonnegative_residual() {
        let p = EfmParams::new("efm", 3, &mut ChaCha8Rng::seed_from_u64(4));
        let zero = FeatureMap::from_data([1, 3, 4, 4], vec![0.0; 48]).unwrap();
        let out = efm_forward(&zero, &random_map([1, 3, 4, 4], 5), &p).unwrap();
        assert!(out.tensor().data().iter().all(|&v| v >= 0.0));
        assert!(out.tensor().data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn efm_matches_scalar_oracle() {
        let p = EfmParams::new("efm", 3, &mut ChaCha8Rng::seed_from_u64(30));
        let fm = random_map([1, 3, 4, 4], 31);
        let fag = random_map([1, 3, 4, 4], 32);
        let out = efm_forward(&fm, &fag, &p).unwrap();
        let stack = |s: &ConvStack| {
            let mid = FeatureMap::from_data([1, 3, 4, 4], conv(&fag, &s.point)).unwrap();
            conv(&mid, &s.spatial)
        };
        let gate = stack(&p.gate);
        let res = stack(&p.residual);
        for i in 0..48 {
            let want = fm.tensor().data()[i] / (1.0 + (-gate[i]).exp()) + res[i].max(0.0);
            assert!((out.tensor().data()[i] - want).abs() <= 1e-12, "{i}");
        }
    }

    #[test]
    fn efm_rejects_shape_mismatch() {
        let p = EfmParams::new("efm", 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(efm_forward(&random_map([1, 3, 4, 4], 0), &random_map([1, 3, 4, 3], 0), &p).is_err());
    }
}
