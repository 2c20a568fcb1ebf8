//! Precision, success and normalized-precision metrics, the two-mode
//! maximum and per-attribute reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::branch::AttributeId;
use crate::error::{Error, Result};
use crate::synth::ClipManifest;
use crate::track::Trajectory;

/// Default center-error threshold in pixels.
pub const DEFAULT_THRESHOLD: f64 = 20.0;
/// Threshold used for small-target benchmarks.
pub const SMALL_TARGET_THRESHOLD: f64 = 5.0;

pub fn center_error(pred: &BBox, gt: &BBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

pub fn overlap(pred: &BBox, gt: &BBox) -> f64 {
    pred.iou(gt).clamp(0.0, 1.0)
}

/// Center error with each axis divided by the ground-truth size.
pub fn normalized_center_error(pred: &BBox, gt: &BBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    ((px - gx) / gt.w).hypot((py - gy) / gt.h)
}

/// Pixel thresholds `0..=50` of the precision plot.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Overlap thresholds `0:0.05:1`.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) / 20.0).collect()
}

/// Normalized thresholds `0:0.01:0.5`.
pub fn npr_thresholds() -> Vec<f64> {
    (0..=50).map(|i| f64::from(i) / 100.0).collect()
}

fn check(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("trajectory has {} frames, ground truth {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    for b in pred.iter().chain(gt) {
        b.validate()?;
    }
    Ok(())
}

fn fraction(n: usize, total: usize) -> f64 {
    n as f64 / total as f64
}

/// Fraction of frames with center error `<= threshold`.
pub fn precision_rate(pred: &[BBox], gt: &[BBox], threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| center_error(p, g) <= threshold).count();
    Ok(fraction(hits, pred.len()))
}

/// Fraction of frames with overlap strictly above each threshold.
pub fn success_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let ov: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| overlap(p, g)).collect();
    Ok(success_thresholds()
        .iter()
        .map(|&t| fraction(ov.iter().filter(|&&o| o > t).count(), ov.len()))
        .collect())
}

pub fn success_rate_auc(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let c = success_curve(pred, gt)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

/// Fraction of frames with normalized error strictly below each threshold.
pub fn npr_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| normalized_center_error(p, g)).collect();
    Ok(npr_thresholds()
        .iter()
        .map(|&t| fraction(e.iter().filter(|&&v| v < t).count(), e.len()))
        .collect())
}

/// Normalized precision at a single threshold.
pub fn normalized_precision_at(pred: &[BBox], gt: &[BBox], threshold: f64) -> Result<f64> {
    check(pred, gt)?;
    let hits = pred.iter().zip(gt).filter(|(p, g)| normalized_center_error(p, g) < threshold).count();
    Ok(fraction(hits, pred.len()))
}

/// Area under the normalized precision curve.
pub fn normalized_precision(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    let c = npr_curve(pred, gt)?;
    Ok(c.iter().sum::<f64>() / c.len() as f64)
}

pub fn precision_curve(pred: &[BBox], gt: &[BBox]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let e: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| center_error(p, g)).collect();
    Ok(precision_thresholds()
        .iter()
        .map(|&t| fraction(e.iter().filter(|&&v| v <= t).count(), e.len()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub sequences: Vec<String>,
    pub frames: usize,
    pub threshold: f64,
    pub pr: f64,
    pub sr: f64,
    pub npr: f64,
    pub precision_curve: Vec<f64>,
    pub success_curve: Vec<f64>,
    pub npr_curve: Vec<f64>,
}

impl MetricReport {
    /// Frame-pooled metrics over `(sequence id, predictions, ground truth)`.
    pub fn pooled(seqs: &[(&str, &[BBox], &[BBox])], threshold: f64) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Empty("no sequences to evaluate".into()));
        }
        let mut pred = Vec::new();
        let mut gt = Vec::new();
        for (id, p, g) in seqs {
            check(p, g).map_err(|e| Error::Data(format!("{id}: {e}")))?;
            pred.extend_from_slice(p);
            gt.extend_from_slice(g);
        }
        let mut sequences: Vec<String> = seqs.iter().map(|(id, _, _)| id.to_string()).collect();
        sequences.sort();
        let success_curve = success_curve(&pred, &gt)?;
        let npr_curve = npr_curve(&pred, &gt)?;
        Ok(Self {
            sequences,
            frames: pred.len(),
            threshold,
            pr: precision_rate(&pred, &gt, threshold)?,
            sr: success_curve.iter().sum::<f64>() / success_curve.len() as f64,
            npr: npr_curve.iter().sum::<f64>() / npr_curve.len() as f64,
            precision_curve: precision_curve(&pred, &gt)?,
            success_curve,
            npr_curve,
        })
    }

    pub fn values(&self) -> [f64; 3] {
        [self.pr, self.sr, self.npr]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values()
            .iter()
            .chain(&self.precision_curve)
            .chain(&self.success_curve)
            .chain(&self.npr_curve)
            .all(|v| (0.0..=1.0).contains(v))
    }
}

fn elementwise_max(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x.max(*y)).collect()
}

/// Per-metric maximum of two single-mode reports over the same sequences.
pub fn max_over_modes(a: &MetricReport, b: &MetricReport) -> Result<MetricReport> {
    if a.sequences != b.sequences || a.frames != b.frames || a.threshold != b.threshold {
        return Err(Error::Data("reports cover different sequences or thresholds".into()));
    }
    Ok(MetricReport {
        sequences: a.sequences.clone(),
        frames: a.frames,
        threshold: a.threshold,
        pr: a.pr.max(b.pr),
        sr: a.sr.max(b.sr),
        npr: a.npr.max(b.npr),
        precision_curve: elementwise_max(&a.precision_curve, &b.precision_curve),
        success_curve: elementwise_max(&a.success_curve, &b.success_curve),
        npr_curve: elementwise_max(&a.npr_curve, &b.npr_curve),
    })
}

/// Where the two ground-truth modes are maximized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeMax {
    /// Maximum of the two pooled reports.
    #[default]
    Aggregate,
    /// Maximum per sequence, then frame-weighted pooling.
    PerSequence,
}

fn lookup<'a>(t: &Trajectory, clips: &'a BTreeMap<String, ClipManifest>) -> Result<&'a ClipManifest> {
    clips
        .get(&t.clip_id)
        .ok_or_else(|| Error::Data(format!("trajectory {} has no tagged clip manifest", t.clip_id)))
}

/// Report maximized over the RGB and TIR ground truths.
pub fn dual_mode_report(
    trajs: &[&Trajectory],
    clips: &BTreeMap<String, ClipManifest>,
    threshold: f64,
    mode: ModeMax,
) -> Result<MetricReport> {
    let mut rgb = Vec::new();
    let mut tir = Vec::new();
    for t in trajs {
        let c = lookup(t, clips)?;
        rgb.push((t.clip_id.as_str(), t.boxes.as_slice(), c.gt_rgb.as_slice()));
        tir.push((t.clip_id.as_str(), t.boxes.as_slice(), c.gt_tir.as_slice()));
    }
    match mode {
        ModeMax::Aggregate => max_over_modes(
            &MetricReport::pooled(&rgb, threshold)?,
            &MetricReport::pooled(&tir, threshold)?,
        ),
        ModeMax::PerSequence => {
            let mut per = Vec::with_capacity(rgb.len());
            for (r, t) in rgb.iter().zip(&tir) {
                per.push(max_over_modes(
                    &MetricReport::pooled(std::slice::from_ref(r), threshold)?,
                    &MetricReport::pooled(std::slice::from_ref(t), threshold)?,
                )?);
            }
            let total: usize = per.iter().map(|r| r.frames).sum();
            let avg = |f: &dyn Fn(&MetricReport) -> f64| per.iter().map(|r| f(r) * r.frames as f64).sum::<f64>() / total as f64;
            let avg_curve = |f: &dyn Fn(&MetricReport) -> &Vec<f64>| {
                let n = f(&per[0]).len();
                (0..n)
                    .map(|i| per.iter().map(|r| f(r)[i] * r.frames as f64).sum::<f64>() / total as f64)
                    .collect::<Vec<f64>>()
            };
            let mut sequences: Vec<String> = per.iter().flat_map(|r| r.sequences.clone()).collect();
            sequences.sort();
            Ok(MetricReport {
                sequences,
                frames: total,
                threshold,
                pr: avg(&|r| r.pr),
                sr: avg(&|r| r.sr),
                npr: avg(&|r| r.npr),
                precision_curve: avg_curve(&|r| &r.precision_curve),
                success_curve: avg_curve(&|r| &r.success_curve),
                npr_curve: avg_curve(&|r| &r.npr_curve),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub overall: MetricReport,
    /// Subsets with at least one sequence.
    pub per_attribute: BTreeMap<AttributeId, MetricReport>,
}

/// Overall and per-attribute dual-mode reports.
pub fn attribute_report(
    trajs: &[Trajectory],
    clips: &BTreeMap<String, ClipManifest>,
    threshold: f64,
    mode: ModeMax,
) -> Result<AttributeReport> {
    let all: Vec<&Trajectory> = trajs.iter().collect();
    let overall = dual_mode_report(&all, clips, threshold, mode)?;
    let mut per_attribute = BTreeMap::new();
    for attr in AttributeId::ALL {
        let subset: Vec<&Trajectory> = all
            .iter()
            .copied()
            .filter(|t| clips.get(&t.clip_id).map(|c| c.attribute) == Some(attr))
            .collect();
        if subset.is_empty() {
            log::warn!("attribute {attr}: no sequences, omitted from report");
            continue;
        }
        per_attribute.insert(attr, dual_mode_report(&subset, clips, threshold, mode)?);
    }
    Ok(AttributeReport { overall, per_attribute })
}

// ---------------------------------------------------------------------------
// Export

/// `curve,threshold,value` rows for all three curves.
pub fn curves_csv(r: &MetricReport) -> String {
    let mut s = String::from("curve,threshold,value\n");
    for (name, xs, ys) in [
        ("precision", precision_thresholds(), &r.precision_curve),
        ("success", success_thresholds(), &r.success_curve),
        ("normalized_precision", npr_thresholds(), &r.npr_curve),
    ] {
        for (x, y) in xs.iter().zip(ys) {
            writeln!(s, "{name},{x},{y}").unwrap();
        }
    }
    s
}

pub fn attribute_table_csv(r: &AttributeReport) -> String {
    let mut s = String::from("subset,sequences,frames,pr,sr,npr\n");
    let rows = std::iter::once(("ALL".to_string(), &r.overall))
        .chain(r.per_attribute.iter().map(|(a, m)| (a.to_string(), m)));
    for (name, m) in rows {
        writeln!(s, "{name},{},{},{},{},{}", m.sequences.len(), m.frames, m.pr, m.sr, m.npr).unwrap();
    }
    s
}

/// Line plot of `ys` against `xs` with axes in `[x0, x1] × [0, 1]`.
pub fn curve_svg(title: &str, x_label: &str, xs: &[f64], ys: &[f64]) -> String {
    let (w, h, m) = (420.0, 320.0, 40.0);
    let x_max = xs.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let px = |x: f64| m + (w - 2.0 * m) * x / x_max;
    let py = |y: f64| h - m - (h - 2.0 * m) * y;
    let points: Vec<String> = xs.iter().zip(ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2.0).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m).unwrap();
    writeln!(s, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, w / 2.0, h - 8.0).unwrap();
    writeln!(s, r#"<text x="8" y="{m}">1</text><text x="8" y="{}">0</text>"#, h - m).unwrap();
    writeln!(s, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, points.join(" ")).unwrap();
    s.push_str("</svg>\n");
    s
}

pub fn precision_plot(r: &MetricReport) -> String {
    curve_svg(&format!("Precision (PR@{} = {:.3})", r.threshold, r.pr), "center error threshold (px)", &precision_thresholds(), &r.precision_curve)
}

pub fn success_plot(r: &MetricReport) -> String {
    curve_svg(&format!("Success (AUC = {:.3})", r.sr), "overlap threshold", &success_thresholds(), &r.success_curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    #[test]
    fn anchors() {
        assert_eq!(center_error(&b(9.0, 9.0, 2.0, 2.0), &b(12.0, 13.0, 2.0, 2.0)), 5.0);
        assert_eq!(center_error(&b(1.0, 2.0, 3.0, 4.0), &b(1.0, 2.0, 3.0, 4.0)), 0.0);
        assert_eq!(overlap(&b(0.0, 0.0, 1.0, 1.0), &b(0.0, 0.0, 1.0, 1.0)), 1.0);
        assert_eq!(overlap(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 0.0, 1.0, 1.0)), 0.0);
        assert!((overlap(&b(0.0, 0.0, 1.0, 1.0), &b(0.5, 0.0, 1.0, 1.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn precision_counts() {
        // Center errors 5, 25, 10, 30 along x.
        let gt = vec![b(0.0, 0.0, 2.0, 2.0); 4];
        let pred: Vec<BBox> = [5.0, 25.0, 10.0, 30.0].iter().map(|&d| b(d, 0.0, 2.0, 2.0)).collect();
        assert_eq!(precision_rate(&pred, &gt, 20.0).unwrap(), 0.5);
        assert_eq!(precision_rate(&pred, &gt, 5.0).unwrap(), 0.25);
        assert!(precision_rate(&pred[..3], &gt, 20.0).is_err());
    }

    #[test]
    fn perfect_tracking_boundary_values() {
        let gt = vec![b(3.0, 4.0, 10.0, 6.0); 5];
        assert_eq!(success_rate_auc(&gt, &gt).unwrap(), 20.0 / 21.0);
        assert_eq!(normalized_precision(&gt, &gt).unwrap(), 50.0 / 51.0);
        assert_eq!(precision_rate(&gt, &gt, 0.0).unwrap(), 1.0);
        let far = vec![b(100.0, 100.0, 10.0, 6.0); 5];
        assert_eq!(success_rate_auc(&far, &gt).unwrap(), 0.0);
    }

    #[test]
    fn npr_scale_invariant() {
        let gt = vec![b(3.0, 4.0, 10.0, 6.0), b(5.0, 1.0, 8.0, 9.0)];
        let pred = vec![b(4.0, 4.5, 9.0, 6.0), b(5.5, 2.0, 8.0, 7.0)];
        let s = |v: &[BBox]| v.iter().map(|x| x.scaled(2.0)).collect::<Vec<_>>();
        assert_eq!(normalized_precision(&pred, &gt).unwrap(), normalized_precision(&s(&pred), &s(&gt)).unwrap());
    }

    #[test]
    fn max_over_modes_picks_larger() {
        let gt = vec![b(0.0, 0.0, 4.0, 4.0); 2];
        let p1 = [b(0.0, 0.0, 4.0, 4.0), b(30.0, 0.0, 4.0, 4.0)];
        let p2 = [b(1.0, 0.0, 4.0, 4.0), b(1.0, 0.0, 4.0, 4.0)];
        let r1 = MetricReport::pooled(&[("a", &p1, &gt)], 20.0).unwrap();
        let r2 = MetricReport::pooled(&[("a", &p2, &gt)], 20.0).unwrap();
        let m = max_over_modes(&r1, &r2).unwrap();
        assert_eq!(m.pr, 1.0);
        assert_eq!(m.sr, r1.sr.max(r2.sr));
        assert_eq!(max_over_modes(&r1, &r1).unwrap(), r1);
        let other = MetricReport::pooled(&[("b", &p2, &gt)], 20.0).unwrap();
        assert!(max_over_modes(&r1, &other).is_err());
    }

    #[test]
    fn degenerate_gt_is_an_error() {
        let bad = BBox { x: 0.0, y: 0.0, w: 0.0, h: 1.0 };
        let ok = b(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(normalized_precision(&[ok], &[bad]), Err(Error::BBox(_))));
    }

    #[test]
    fn svg_and_csv_shapes() {
        let gt = vec![b(0.0, 0.0, 4.0, 4.0)];
        let r = MetricReport::pooled(&[("a", &gt, &gt)], 20.0).unwrap();
        assert_eq!(curves_csv(&r).lines().count(), 1 + 51 + 21 + 51);
        assert!(precision_plot(&r).contains("<polyline"));
    }
}
