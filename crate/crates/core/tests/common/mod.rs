//! Oracles shared by the integration tests: a central finite-difference
//! gradient checker and brute-force metric implementations.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ddfnet::autograd::{Graph, Var};
use ddfnet::bbox::BBox;
use ddfnet::param::Module;
use ddfnet::Tensor;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than the floor are compared in absolute terms.
pub const UNIT_FLOOR: f64 = 1e-6;
/// Deeper graphs accumulate more rounding noise in the differences.
pub const MODEL_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_fn(shape, |_| n.sample(rng))
}

fn rel(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

#[derive(Debug, Clone, Default)]
pub struct FdResult {
    pub max_rel: f64,
    pub checked: usize,
    /// Location and values of the worst entry.
    pub worst: String,
}

impl FdResult {
    fn add(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let r = rel(analytic, numeric, floor);
        if r > self.max_rel {
            self.max_rel = r;
            self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", what());
        }
        self.checked += 1;
    }
}

/// Compare reverse-mode gradients of `sum(f(..) * R)` with central
/// differences, over every input entry and up to `per_param` entries of
/// each parameter tensor (`usize::MAX` for all). `R` is a fixed random
/// projection so that no output direction is privileged.
pub fn check_gradients<M: Module>(
    module: &mut M,
    inputs: &[Tensor],
    per_param: usize,
    floor: f64,
    seed: u64,
    f: impl for<'g> Fn(&M, &'g Graph, &[Var<'g>]) -> Var<'g>,
) -> FdResult {
    let mut r = rng(seed);
    let proj = {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let shape = f(module, &g, &vars).shape();
        randn(&shape, &mut r)
    };
    let loss = |m: &M, xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(m, &g, &vars);
        out.value().data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(module, &g, &vars);
    let grads = g.backward(out.mul(g.constant(proj.clone())).sum());

    let mut res = FdResult::default();
    let mut xs: Vec<Tensor> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).expect("input gradient").clone();
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + FD_STEP;
            let up = loss(module, &xs);
            xs[k].data_mut()[i] = orig - FD_STEP;
            let down = loss(module, &xs);
            xs[k].data_mut()[i] = orig;
            res.add(|| format!("input {k}[{i}]"), analytic.data()[i], (up - down) / (2.0 * FD_STEP), floor);
        }
    }

    let names: Vec<(String, usize)> = {
        let mut v = Vec::new();
        module.visit(&mut |p| v.push((p.name().to_string(), p.value().len())));
        v
    };
    for (name, len) in names {
        let analytic = grads.param(&name).cloned().unwrap_or_else(|| Tensor::zeros(&[len]));
        let picks: Vec<usize> = if per_param >= len {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..len)).collect()
        };
        for i in picks {
            let nudge = |m: &mut M, d: f64| {
                m.visit_mut(&mut |p| {
                    if p.name() == name {
                        p.value_mut().data_mut()[i] += d;
                    }
                })
            };
            nudge(module, FD_STEP);
            let up = loss(module, inputs);
            nudge(module, -2.0 * FD_STEP);
            let down = loss(module, inputs);
            nudge(module, FD_STEP);
            res.add(|| format!("{name}[{i}]"), analytic.data()[i], (up - down) / (2.0 * FD_STEP), floor);
        }
    }
    res
}

// ---------------------------------------------------------------------------
// Brute-force metrics

pub fn bf_center_error(p: &BBox, g: &BBox) -> f64 {
    let dx = (p.x + p.w / 2.0) - (g.x + g.w / 2.0);
    let dy = (p.y + p.h / 2.0) - (g.y + g.h / 2.0);
    (dx * dx + dy * dy).sqrt()
}

pub fn bf_iou(p: &BBox, g: &BBox) -> f64 {
    let iw = ((p.x + p.w).min(g.x + g.w) - p.x.max(g.x)).max(0.0);
    let ih = ((p.y + p.h).min(g.y + g.h) - p.y.max(g.y)).max(0.0);
    let inter = iw * ih;
    // Rounding can push identical boxes a few ulps above 1.
    (inter / (p.w * p.h + g.w * g.h - inter)).min(1.0)
}

pub fn bf_pr(pred: &[BBox], gt: &[BBox], tau: f64) -> f64 {
    let mut hit = 0usize;
    for i in 0..pred.len() {
        if bf_center_error(&pred[i], &gt[i]) <= tau {
            hit += 1;
        }
    }
    hit as f64 / pred.len() as f64
}

pub fn bf_sr(pred: &[BBox], gt: &[BBox]) -> f64 {
    let mut acc = 0.0;
    for k in 0..=20 {
        let t = k as f64 / 20.0;
        let mut hit = 0usize;
        for i in 0..pred.len() {
            if bf_iou(&pred[i], &gt[i]) > t {
                hit += 1;
            }
        }
        acc += hit as f64 / pred.len() as f64;
    }
    acc / 21.0
}

pub fn bf_npr(pred: &[BBox], gt: &[BBox]) -> f64 {
    let mut acc = 0.0;
    for k in 0..=50 {
        let t = k as f64 / 100.0;
        let mut hit = 0usize;
        for i in 0..pred.len() {
            let (p, g) = (&pred[i], &gt[i]);
            let dx = ((p.x + p.w / 2.0) - (g.x + g.w / 2.0)) / g.w;
            let dy = ((p.y + p.h / 2.0) - (g.y + g.h / 2.0)) / g.h;
            if (dx * dx + dy * dy).sqrt() < t {
                hit += 1;
            }
        }
        acc += hit as f64 / pred.len() as f64;
    }
    acc / 51.0
}

pub fn random_box(r: &mut ChaCha8Rng) -> BBox {
    BBox::new(r.random_range(0.0..100.0), r.random_range(0.0..100.0), r.random_range(1.0..40.0), r.random_range(1.0..40.0)).unwrap()
}

/// A prediction near `g`: sometimes exact, sometimes far off.
pub fn perturbed(g: &BBox, r: &mut ChaCha8Rng) -> BBox {
    match r.random_range(0..4) {
        0 => *g,
        1 => random_box(r),
        _ => BBox::new(
            g.x + r.random_range(-15.0..15.0),
            g.y + r.random_range(-15.0..15.0),
            (g.w * r.random_range(0.5..1.5)).max(0.5),
            (g.h * r.random_range(0.5..1.5)).max(0.5),
        )
        .unwrap(),
    }
}

/// `(pred, gt_rgb, gt_tir)` with 1..=40 frames.
pub fn random_case(r: &mut ChaCha8Rng) -> (Vec<BBox>, Vec<BBox>, Vec<BBox>) {
    let n = r.random_range(1..=40);
    let gt_rgb: Vec<BBox> = (0..n).map(|_| random_box(r)).collect();
    let gt_tir: Vec<BBox> = gt_rgb
        .iter()
        .map(|b| BBox::new(b.x + r.random_range(-2.0..2.0), b.y + r.random_range(-2.0..2.0), b.w, b.h).unwrap())
        .collect();
    let pred = gt_rgb.iter().map(|b| perturbed(b, r)).collect();
    (pred, gt_rgb, gt_tir)
}

// ---------------------------------------------------------------------------
// Metric case bundles

use ddfnet::branch::AttributeId;
use ddfnet::eval::{dual_mode_report, ModeMax};
use ddfnet::synth::ClipManifest;
use ddfnet::track::Trajectory;
use std::collections::BTreeMap;

pub fn manifest(id: &str, attribute: AttributeId, gt_rgb: Vec<BBox>, gt_tir: Vec<BBox>) -> ClipManifest {
    ClipManifest {
        clip_id: id.into(),
        attribute,
        seed: 0,
        width: 200,
        height: 200,
        gt_rgb,
        gt_tir,
        degradations: Vec::new(),
        storage: Default::default(),
        frames: Vec::new(),
    }
}

/// Worst absolute difference between the library and the brute-force
/// oracles over `cases` random multi-sequence cases.
pub fn metrics_oracle_gap(cases: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let tau = match case % 3 {
            0 => 20.0,
            1 => 5.0,
            _ => r.random_range(0.0..50.0),
        };
        let nseq = r.random_range(1..=3);
        let mut clips = BTreeMap::new();
        let mut trajs = Vec::new();
        let (mut all_p, mut all_rgb, mut all_tir) = (Vec::new(), Vec::new(), Vec::new());
        let mut per_seq = Vec::new();
        for s in 0..nseq {
            let (p, g1, g2) = random_case(&mut r);
            let id = format!("seq{s}");
            // Single-sequence oracles.
            let pr = bf_pr(&p, &g1, tau);
            worst = worst.max((ddfnet::eval::precision_rate(&p, &g1, tau).unwrap() - pr).abs());
            worst = worst.max((ddfnet::eval::success_rate_auc(&p, &g1).unwrap() - bf_sr(&p, &g1)).abs());
            worst = worst.max((ddfnet::eval::normalized_precision(&p, &g1).unwrap() - bf_npr(&p, &g1)).abs());
            let best = [
                bf_pr(&p, &g1, tau).max(bf_pr(&p, &g2, tau)),
                bf_sr(&p, &g1).max(bf_sr(&p, &g2)),
                bf_npr(&p, &g1).max(bf_npr(&p, &g2)),
            ];
            per_seq.push((p.len() as f64, best));
            trajs.push(Trajectory { clip_id: id.clone(), boxes: p.clone(), flags: vec![0; p.len()] });
            clips.insert(id.clone(), manifest(&id, AttributeId::GEN, g1.clone(), g2.clone()));
            all_p.extend(p);
            all_rgb.extend(g1);
            all_tir.extend(g2);
        }
        let refs: Vec<&Trajectory> = trajs.iter().collect();
        // Aggregate mode: max of the pooled reports.
        let agg = dual_mode_report(&refs, &clips, tau, ModeMax::Aggregate).unwrap();
        let want = [
            bf_pr(&all_p, &all_rgb, tau).max(bf_pr(&all_p, &all_tir, tau)),
            bf_sr(&all_p, &all_rgb).max(bf_sr(&all_p, &all_tir)),
            bf_npr(&all_p, &all_rgb).max(bf_npr(&all_p, &all_tir)),
        ];
        for (a, b) in agg.values().iter().zip(want) {
            worst = worst.max((a - b).abs());
        }
        // Per-sequence mode: frame-weighted mean of per-sequence maxima.
        let per = dual_mode_report(&refs, &clips, tau, ModeMax::PerSequence).unwrap();
        let total: f64 = per_seq.iter().map(|(n, _)| n).sum();
        for k in 0..3 {
            let want = per_seq.iter().map(|(n, v)| n * v[k]).sum::<f64>() / total;
            worst = worst.max((per.values()[k] - want).abs());
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Algebraic properties of the fusion units

use ddfnet::aggregation::{AfmParams, EfmParams};
use ddfnet::branch::{BranchParams, ScfuParams};
use ddfnet::fusion::{RouterParams, SfuParams};

pub struct PropertyCheck {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

fn graph_value(f: impl for<'g> FnOnce(&'g Graph) -> Var<'g>) -> Tensor {
    let g = Graph::new();
    f(&g).value().as_ref().clone()
}

/// Random feature batch with a log-uniform scale so that some draws
/// saturate the tanh inside the routers.
fn scaled_batch(b: usize, c: usize, r: &mut ChaCha8Rng) -> Tensor {
    let scale = 10f64.powf(r.random_range(-2.0..3.0));
    randn(&[b, c, 6, 6], r).map(|v| v * scale)
}

pub fn algebraic_checks() -> Vec<PropertyCheck> {
    const C: usize = 4;
    let mut r = rng(99);
    let mut out = Vec::new();

    // Router range over 10,000 draws (100 parameter sets × batch 100).
    let (mut lo, mut hi, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0usize);
    for k in 0..100 {
        let p = RouterParams::new(&format!("r{k}"), C, 2, 2, &mut r);
        let x = scaled_batch(100, C, &mut r);
        let gates = graph_value(|g| p.forward(g.constant(x.clone())));
        for &v in gates.data() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        n += gates.dim(0);
    }
    out.push(PropertyCheck {
        name: "router range [0,1)",
        ok: n == 10_000 && lo >= 0.0 && hi < 1.0,
        detail: format!("{n} draws, min {lo:e}, max 1-{:e}", 1.0 - hi),
    });

    // SFU modality weights and AFM branch weights on the simplex.
    let mut sfu_gap: f64 = 0.0;
    let mut afm_gap: f64 = 0.0;
    let mut negative = false;
    for k in 0..50 {
        let sfu = SfuParams::new(&format!("s{k}"), C, &mut r).unwrap();
        let (a, b) = (scaled_batch(8, C, &mut r), scaled_batch(8, C, &mut r));
        let w = graph_value(|g| sfu.weights(g.constant(a.clone()), g.constant(b.clone())));
        for bi in 0..8 {
            for c in 0..C {
                let (x, y) = (w.data()[bi * 2 * C + c], w.data()[bi * 2 * C + C + c]);
                negative |= x < 0.0 || y < 0.0;
                sfu_gap = sfu_gap.max((x + y - 1.0).abs());
            }
        }
        let afm = AfmParams::new(&format!("a{k}"), C, &mut r).unwrap();
        let feats: Vec<Tensor> = (0..6).map(|_| scaled_batch(8, C, &mut r)).collect();
        let w = graph_value(|g| {
            let v: Vec<Var> = feats.iter().map(|t| g.constant(t.clone())).collect();
            afm.weights(&v)
        });
        for bi in 0..8 {
            for c in 0..C {
                let s: f64 = (0..6).map(|j| w.data()[bi * 6 * C + j * C + c]).sum();
                negative |= (0..6).any(|j| w.data()[bi * 6 * C + j * C + c] < 0.0);
                afm_gap = afm_gap.max((s - 1.0).abs());
            }
        }
    }
    out.push(PropertyCheck {
        name: "SFU/AFM weights on the simplex",
        ok: !negative && sfu_gap <= 1e-12 && afm_gap <= 1e-12,
        detail: format!("max |sum-1| SFU {sfu_gap:e}, AFM {afm_gap:e}"),
    });

    // Zeroed routers: SCFU passes its input through, a branch goes dormant.
    let mut scfu_gap: f64 = 0.0;
    let mut branch_max: f64 = 0.0;
    for k in 0..20 {
        let mut s = ScfuParams::new(&format!("c{k}"), C, &mut r);
        s.router.fill(0.0);
        let x = scaled_batch(2, C, &mut r);
        let y = graph_value(|g| s.forward(g.constant(x.clone())).0);
        scfu_gap = scfu_gap.max(y.max_abs_diff(&x));
        let mut b = BranchParams::new(&format!("b{k}"), AttributeId::SA, C, &mut r).unwrap();
        b.zero_routers();
        let (u, v) = (scaled_batch(2, C, &mut r), scaled_batch(2, C, &mut r));
        let fused = graph_value(|g| b.forward(g.constant(u.clone()), g.constant(v.clone())).fused);
        branch_max = branch_max.max(fused.data().iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }
    out.push(PropertyCheck {
        name: "zero-gate transparency",
        ok: scfu_gap == 0.0 && branch_max == 0.0,
        detail: format!("SCFU max |out-in| {scfu_gap:e}, dormant branch max |out| {branch_max:e}"),
    });

    // AFM on six identical inputs returns that input.
    let mut idem: f64 = 0.0;
    for k in 0..20 {
        let afm = AfmParams::new(&format!("i{k}"), C, &mut r).unwrap();
        let x = scaled_batch(2, C, &mut r);
        let y = graph_value(|g| {
            let v = g.constant(x.clone());
            afm.forward(&[v, v, v, v, v, v])
        });
        idem = idem.max(y.max_abs_diff(&x) / x.data().iter().fold(1.0f64, |m, v| m.max(v.abs())));
    }
    out.push(PropertyCheck { name: "AFM idempotence", ok: idem <= 1e-12, detail: format!("max relative gap {idem:e}") });

    // EFM with all parameters zero: sigmoid(0) * f_m + relu(0) = 0.5 f_m.
    let mut efm_gap: f64 = 0.0;
    for k in 0..20 {
        let mut e = EfmParams::new(&format!("e{k}"), C, &mut r);
        e.fill(0.0);
        let (m, a) = (scaled_batch(2, C, &mut r), scaled_batch(2, C, &mut r));
        let y = graph_value(|g| e.forward(g.constant(m.clone()), g.constant(a.clone())));
        efm_gap = efm_gap.max(y.max_abs_diff(&m.map(|v| 0.5 * v)));
    }
    out.push(PropertyCheck { name: "EFM zero parameters", ok: efm_gap <= 1e-12, detail: format!("max |out-0.5 f_m| {efm_gap:e}") });
    out
}

// ---------------------------------------------------------------------------
// Gradient cases

use ddfnet::autograd::concat;
use ddfnet::fusion::{CaeParams, SaeParams};
use ddfnet::model::{tracking_loss, Model, ModelConfig, Topology};

pub const UNIT_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const GC: usize = 4;
const GSHAPE: [usize; 4] = [1, GC, 6, 6];

pub const GRADIENT_CASES: [&str; 9] = ["SAE", "CAE", "SFU", "router", "SCFU", "branch", "AFM", "EFM", "full model"];

fn maps(n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n).map(|_| randn(&GSHAPE, &mut r)).collect()
}

pub fn tiny_model() -> Model {
    let cfg = ModelConfig {
        channels: vec![4, 4],
        strides: vec![2, 2],
        input_size: 16,
        ddf_layers: vec![2],
        predictor_dim: 8,
        ..ModelConfig::toy()
    };
    Model::new(cfg, 25).unwrap()
}

fn model_loss<'g>(m: &Model, x: &[Var<'g>]) -> Var<'g> {
    let train_box = BBox::new(1.2, 0.9, 1.7, 2.1).unwrap();
    let test_box = BBox::new(1.5, 1.1, 1.6, 1.9).unwrap();
    let train = m.predictor.proj.forward(m.backbone(x[0], x[1], Topology::Full).joint);
    let test = m.predictor.proj.forward(m.backbone(x[2], x[3], Topology::Full).joint);
    let pred = m.predict(&[(train, train_box)], test);
    tracking_loss(&pred, &test_box, m.config.sigma_factor).total
}

/// Finite-difference check of one named case on random `(1, 4, 6, 6)`
/// inputs; returns the result and its tolerance.
pub fn gradient_case(name: &str) -> (FdResult, f64) {
    let all = usize::MAX;
    match name {
        "SAE" => {
            let mut p = SaeParams::new("sae", GC, &mut rng(1));
            (check_gradients(&mut p, &maps(1, 2), all, UNIT_FLOOR, 3, |m, _, x| m.forward(x[0])), UNIT_TOL)
        }
        "CAE" => {
            let mut p = CaeParams::new("cae", GC, &mut rng(4));
            (check_gradients(&mut p, &maps(1, 5), all, UNIT_FLOOR, 6, |m, _, x| m.forward(x[0])), UNIT_TOL)
        }
        "SFU" => {
            let mut p = SfuParams::new("sfu", GC, &mut rng(7)).unwrap();
            (check_gradients(&mut p, &maps(2, 8), all, UNIT_FLOOR, 9, |m, _, x| m.forward(x[0], x[1])), UNIT_TOL)
        }
        "router" => {
            let mut p = RouterParams::new("router", GC, 2, 2, &mut rng(10));
            (check_gradients(&mut p, &maps(1, 11), all, UNIT_FLOOR, 12, |m, _, x| m.forward(x[0])), UNIT_TOL)
        }
        "SCFU" => {
            let mut p = ScfuParams::new("scfu", GC, &mut rng(13));
            let r = check_gradients(&mut p, &maps(1, 14), all, UNIT_FLOOR, 15, |m, _, x| {
                let (out, gates) = m.forward(x[0]);
                concat(&[out.reshape(&[1, GC * 36]), gates], 1)
            });
            (r, UNIT_TOL)
        }
        "branch" => {
            let mut p = BranchParams::new("branch", AttributeId::OCC, GC, &mut rng(16)).unwrap();
            let r = check_gradients(&mut p, &maps(2, 17), all, UNIT_FLOOR, 18, |m, _, x| {
                let v = m.forward(x[0], x[1]);
                concat(&[v.fused, v.rgb, v.tir], 1)
            });
            (r, UNIT_TOL)
        }
        "AFM" => {
            let mut p = AfmParams::new("afm", GC, &mut rng(19)).unwrap();
            (check_gradients(&mut p, &maps(6, 20), all, UNIT_FLOOR, 21, |m, _, x| m.forward(x)), UNIT_TOL)
        }
        "EFM" => {
            let mut p = EfmParams::new("efm", GC, &mut rng(22));
            (check_gradients(&mut p, &maps(2, 23), all, UNIT_FLOOR, 24, |m, _, x| m.forward(x[0], x[1])), UNIT_TOL)
        }
        "full model" => {
            let mut m = tiny_model();
            let mut r = rng(26);
            let inputs: Vec<Tensor> = (0..4).map(|_| randn(&[1, 3, 16, 16], &mut r)).collect();
            (check_gradients(&mut m, &inputs, 3, MODEL_FLOOR, 27, |m, _, x| model_loss(m, x)), MODEL_TOL)
        }
        _ => panic!("unknown gradient case {name}"),
    }
}
