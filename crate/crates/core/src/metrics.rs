//! Saliency evaluation measures: MAE, max/mean F-measure, max/mean E-measure and S-measure.
//!
//! Maps are row-major `h×w` buffers; predictions lie in `[0,1]`, ground truth is binarised
//! at 0.5. Curves are sampled at the 256 thresholds `k/255`, a pixel counting as foreground
//! when `pred ≥ k/255`.
//!
//! Conventions:
//! * F-measure uses `β² = 0.3`; precision (recall) is 0 when its denominator is 0, and
//!   `F = 0` when `β²P + R = 0`. A frame whose ground truth is empty scores `F = 0` at every
//!   threshold and is counted in [`Aggregate::empty_gt_frames`].
//! * E-measure: if the ground truth and the binarised map are both all-ones or both all-zeros
//!   the score is 1, if one is all-ones and the other all-zeros it is 0; every other case
//!   uses the alignment formula with `ε = 1e-8`.
//! * S-measure: `α = 0.5`; object term `2x̄/(x̄² + 1 + σ + ε)` (sample standard deviation);
//!   region term splits at the rounded ground-truth centroid and averages block SSIMs by area.
//!   Empty ground truth gives `1 − mean(pred)`, full ground truth gives `mean(pred)`.
//! * Dataset aggregation averages the per-frame 256-point curves first and then takes the
//!   maximum / mean of the averaged curve.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;
pub const EPS: f64 = 1e-8;
pub const S_ALPHA: f64 = 0.5;

/// `k/255`.
pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

/// Number of thresholds `k/255` that are `≤ p`.
fn passes(p: f64) -> usize {
    if !(p >= 0.0) {
        return 0;
    }
    let mut k = ((p * 255.0).floor().clamp(0.0, 255.0)) as usize;
    while k < 255 && threshold(k + 1) <= p {
        k += 1;
    }
    while k > 0 && threshold(k) > p {
        k -= 1;
    }
    if threshold(k) <= p {
        k + 1
    } else {
        0
    }
}

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("metrics", format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Err(Error::shape("metrics", "empty map"));
    }
    Ok(())
}

fn is_fg(g: f64) -> bool {
    g >= 0.5
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Per-threshold confusion counts.
#[derive(Clone, Debug)]
struct Counts {
    /// tp[k]/fp[k]: foreground/background pixels with `pred ≥ k/255`.
    tp: Vec<u64>,
    fp: Vec<u64>,
    positives: u64,
    total: u64,
}

fn counts(pred: &[f64], gt: &[f64]) -> Counts {
    let mut fg_hist = [0u64; THRESHOLDS + 1];
    let mut bg_hist = [0u64; THRESHOLDS + 1];
    for (&p, &g) in pred.iter().zip(gt) {
        if is_fg(g) {
            fg_hist[passes(p)] += 1;
        } else {
            bg_hist[passes(p)] += 1;
        }
    }
    // pixels with passes(p) > k clear threshold k
    let mut tp = vec![0u64; THRESHOLDS];
    let mut fp = vec![0u64; THRESHOLDS];
    let (mut acc_t, mut acc_f) = (0u64, 0u64);
    for k in (0..THRESHOLDS).rev() {
        acc_t += fg_hist[k + 1];
        acc_f += bg_hist[k + 1];
        tp[k] = acc_t;
        fp[k] = acc_f;
    }
    let positives = fg_hist.iter().sum();
    Counts { tp, fp, positives, total: pred.len() as u64 }
}

fn f_score(tp: u64, fp: u64, positives: u64) -> f64 {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if positives == 0 { 0.0 } else { tp as f64 / positives as f64 };
    let den = BETA2 * precision + recall;
    if den == 0.0 {
        0.0
    } else {
        (1.0 + BETA2) * precision * recall / den
    }
}

/// 256-point curve with its summary statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub values: Vec<f64>,
}

impl Curve {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FCurve {
    pub curve: Curve,
    pub empty_gt: bool,
}

pub fn f_measure_curve(pred: &[f64], gt: &[f64]) -> Result<FCurve> {
    check(pred, gt)?;
    let c = counts(pred, gt);
    if c.positives == 0 {
        return Ok(FCurve { curve: Curve { values: vec![0.0; THRESHOLDS] }, empty_gt: true });
    }
    let values = (0..THRESHOLDS).map(|k| f_score(c.tp[k], c.fp[k], c.positives)).collect();
    Ok(FCurve { curve: Curve { values }, empty_gt: false })
}

/// F-measure at the adaptive threshold `min(2·mean(pred), 1)`.
pub fn adaptive_f_measure(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    let thr = (2.0 * pred.iter().sum::<f64>() / pred.len() as f64).min(1.0);
    let (mut tp, mut fp, mut pos) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let fg = is_fg(g);
        pos += fg as u64;
        if p >= thr {
            if fg {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    Ok(if pos == 0 { 0.0 } else { f_score(tp, fp, pos) })
}

/// F-measure of a single fixed binarisation threshold.
pub fn f_measure_at(pred: &[f64], gt: &[f64], thr: f64) -> Result<f64> {
    check(pred, gt)?;
    let (mut tp, mut fp, mut pos) = (0u64, 0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let fg = is_fg(g);
        pos += fg as u64;
        if p >= thr {
            tp += fg as u64;
            fp += !fg as u64;
        }
    }
    Ok(if pos == 0 { 0.0 } else { f_score(tp, fp, pos) })
}

fn enhanced_alignment(tp: u64, fp: u64, positives: u64, total: u64) -> f64 {
    let n = total as f64;
    let nb = tp + fp;
    let g_const = positives == 0 || positives == total;
    let b_const = nb == 0 || nb == total;
    if g_const && b_const {
        return if (positives == 0) == (nb == 0) { 1.0 } else { 0.0 };
    }
    let mu_g = positives as f64 / n;
    let mu_b = nb as f64 / n;
    let fn_ = positives - tp;
    let tn = total - positives - fp;
    let score = |g: f64, b: f64| {
        let (dg, db) = (g - mu_g, b - mu_b);
        let phi = 2.0 * dg * db / (dg * dg + db * db + EPS);
        (1.0 + phi) * (1.0 + phi) / 4.0
    };
    (tp as f64 * score(1.0, 1.0) + fp as f64 * score(0.0, 1.0) + fn_ as f64 * score(1.0, 0.0) + tn as f64 * score(0.0, 0.0)) / n
}

pub fn e_measure_curve(pred: &[f64], gt: &[f64]) -> Result<Curve> {
    check(pred, gt)?;
    let c = counts(pred, gt);
    let values = (0..THRESHOLDS).map(|k| enhanced_alignment(c.tp[k], c.fp[k], c.positives, c.total)).collect();
    Ok(Curve { values })
}

fn object_score(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let sigma = if n > 1 { (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    2.0 * mean / (mean * mean + 1.0 + sigma + EPS)
}

fn block_ssim(pred: &[f64], gt: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> f64 {
    let n = (rows.len() * cols.len()) as f64;
    let cells = || rows.clone().flat_map(|r| cols.clone().map(move |c| r * w + c));
    let x = cells().map(|i| pred[i]).sum::<f64>() / n;
    let y = cells().map(|i| gt[i]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for i in cells() {
        let (dx, dy) = (pred[i] - x, gt[i] - y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let d = n - 1.0 + EPS;
    let (sxx, syy, sxy) = (sxx / d, syy / d, sxy / d);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sxx + syy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn round_half_away(v: f64) -> usize {
    v.round() as usize
}

/// Structure measure of an `h×w` map.
pub fn s_measure(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<f64> {
    check(pred, gt)?;
    if h * w != pred.len() {
        return Err(Error::shape("s_measure", format!("{h}x{w} does not hold {} pixels", pred.len())));
    }
    let g: Vec<f64> = gt.iter().map(|&v| if is_fg(v) { 1.0 } else { 0.0 }).collect();
    let fg_count = g.iter().filter(|&&v| v == 1.0).count();
    let ratio = fg_count as f64 / g.len() as f64;
    let mean_pred = pred.iter().sum::<f64>() / pred.len() as f64;
    let q = if fg_count == 0 {
        1.0 - mean_pred
    } else if fg_count == g.len() {
        mean_pred
    } else {
        let o_fg = object_score(pred.iter().zip(&g).filter(|(_, &gv)| gv == 1.0).map(|(&p, _)| p));
        let o_bg = object_score(pred.iter().zip(&g).filter(|(_, &gv)| gv == 0.0).map(|(&p, _)| 1.0 - p));
        let object = ratio * o_fg + (1.0 - ratio) * o_bg;

        // 1-based centroid, as split point: rows [0,Y) / [Y,h), cols [0,X) / [X,w)
        let (mut sx, mut sy) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                if g[r * w + c] == 1.0 {
                    sx += (c + 1) as f64;
                    sy += (r + 1) as f64;
                }
            }
        }
        let cx = round_half_away(sx / fg_count as f64).min(w);
        let cy = round_half_away(sy / fg_count as f64).min(h);
        let area = (h * w) as f64;
        let mut region = 0.0;
        for (rows, cols) in [(0..cy, 0..cx), (0..cy, cx..w), (cy..h, 0..cx), (cy..h, cx..w)] {
            let n = rows.len() * cols.len();
            if n == 0 {
                continue;
            }
            region += n as f64 / area * block_ssim(pred, &g, w, rows, cols);
        }
        S_ALPHA * object + (1.0 - S_ALPHA) * region
    };
    Ok(q.clamp(0.0, 1.0))
}

/// Everything computed for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScores {
    pub mae: f64,
    pub f: FCurve,
    pub em: Curve,
    pub sm: f64,
    pub adaptive_f: f64,
}

pub fn score_frame(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<FrameScores> {
    Ok(FrameScores {
        mae: mae(pred, gt)?,
        f: f_measure_curve(pred, gt)?,
        em: e_measure_curve(pred, gt)?,
        sm: s_measure(pred, gt, h, w)?,
        adaptive_f: adaptive_f_measure(pred, gt)?,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeanFMode {
    /// Mean of the 256-threshold curve.
    #[default]
    Curve,
    /// Mean over frames of the adaptive-threshold F-measure.
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub max_f: f64,
    pub mean_f: f64,
    pub max_em: f64,
    pub mean_em: f64,
    pub sm: f64,
}

pub const REPORT_KEYS: [&str; 6] = ["mae", "max_f", "mean_f", "max_em", "mean_em", "sm"];

impl MetricReport {
    pub fn values(&self) -> [f64; 6] {
        [self.mae, self.max_f, self.mean_f, self.max_em, self.mean_em, self.sm]
    }

    /// `key = value` lines, six decimals, keys in [`REPORT_KEYS`] order.
    pub fn to_document(&self) -> String {
        let mut s = String::new();
        for (k, v) in REPORT_KEYS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {v:.6}");
        }
        s
    }

    pub fn parse_document(text: &str) -> Result<Self> {
        let mut vals = [None; 6];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Data(format!("report line without '=': {line}")))?;
            let idx = REPORT_KEYS.iter().position(|&r| r == k.trim()).ok_or_else(|| Error::Data(format!("unknown report key {}", k.trim())))?;
            vals[idx] = Some(v.trim().parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", k.trim())))?);
        }
        let get = |i: usize| vals[i].ok_or_else(|| Error::Data(format!("report is missing {}", REPORT_KEYS[i])));
        Ok(MetricReport { mae: get(0)?, max_f: get(1)?, mean_f: get(2)?, max_em: get(3)?, mean_em: get(4)?, sm: get(5)? })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>8} {:>8} {:>8}", "MAE", "max-F", "mean-F", "max-Em", "mean-Em", "Sm");
        let v = self.values();
        let _ = writeln!(s, "{:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}", v[0], v[1], v[2], v[3], v[4], v[5]);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub report: MetricReport,
    pub f_curve: Curve,
    pub em_curve: Curve,
    pub frames: usize,
    pub empty_gt_frames: usize,
}

/// Dataset-level report: curves are averaged across frames before taking max/mean.
pub fn aggregate(frames: &[FrameScores], mean_f: MeanFMode) -> Result<Aggregate> {
    if frames.is_empty() {
        return Err(Error::Domain("cannot aggregate zero frames".into()));
    }
    let n = frames.len() as f64;
    let mut f = vec![0.0; THRESHOLDS];
    let mut em = vec![0.0; THRESHOLDS];
    let (mut mae_sum, mut sm_sum, mut ada_sum) = (0.0, 0.0, 0.0);
    for fr in frames {
        for k in 0..THRESHOLDS {
            f[k] += fr.f.curve.values[k];
            em[k] += fr.em.values[k];
        }
        mae_sum += fr.mae;
        sm_sum += fr.sm;
        ada_sum += fr.adaptive_f;
    }
    let f_curve = Curve { values: f.into_iter().map(|v| v / n).collect() };
    let em_curve = Curve { values: em.into_iter().map(|v| v / n).collect() };
    let report = MetricReport {
        mae: mae_sum / n,
        max_f: f_curve.max(),
        mean_f: match mean_f {
            MeanFMode::Curve => f_curve.mean(),
            MeanFMode::Adaptive => ada_sum / n,
        },
        max_em: em_curve.max(),
        mean_em: em_curve.mean(),
        sm: sm_sum / n,
    };
    Ok(Aggregate { report, f_curve, em_curve, frames: frames.len(), empty_gt_frames: frames.iter().filter(|f| f.f.empty_gt).count() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn passes_counts_thresholds_at_or_below() {
        assert_eq!(passes(0.0), 1);
        assert_eq!(passes(1.0), 256);
        assert_eq!(passes(-0.1), 0);
        assert_eq!(passes(threshold(17)), 18);
        assert_eq!(passes(threshold(17) - 1e-12), 17);
        assert_eq!(passes(0.5), 128);
    }

    #[test]
    fn mae_examples() {
        let gt = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(mae(&gt, &gt).unwrap(), 0.0);
        assert_eq!(mae(&[0.5; 4], &gt).unwrap(), 0.5);
        assert_eq!(mae(&[0.0, 1.0, 1.0, 0.0], &gt).unwrap(), 1.0);
    }

    #[test]
    fn constant_one_prediction_has_closed_form_f() {
        let gt: Vec<f64> = (0..16).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        let f = f_measure_curve(&[1.0; 16], &gt).unwrap();
        let expect: f64 = 1.3 * 0.25 / (0.3 * 0.25 + 1.0);
        assert!((expect - 0.302_325_581_395_348_8).abs() < 1e-15);
        assert!(f.curve.values.iter().all(|v| (v - expect).abs() < 1e-15));
    }

    #[test]
    fn empty_gt_is_flagged() {
        let f = f_measure_curve(&[0.3; 4], &[0.0; 4]).unwrap();
        assert!(f.empty_gt && f.curve.max() == 0.0);
        let agg = aggregate(&[score_frame(&[0.3; 4], &[0.0; 4], 2, 2).unwrap()], MeanFMode::Curve).unwrap();
        assert_eq!(agg.empty_gt_frames, 1);
    }

    #[test]
    fn e_measure_degenerate_rules() {
        // both all-zero at high thresholds
        let em = e_measure_curve(&[0.0; 4], &[0.0; 4]).unwrap();
        assert_eq!(em.values[0], 0.0); // pred ≥ 0 → B all ones vs G all zeros
        assert_eq!(em.values[1], 1.0);
        let em = e_measure_curve(&[1.0; 4], &[1.0; 4]).unwrap();
        assert!(em.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn e_measure_perfect_and_inverted() {
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let inv: Vec<f64> = gt.iter().map(|g| 1.0 - g).collect();
        assert!((e_measure_curve(&gt, &gt).unwrap().max() - 1.0).abs() < 1e-7);
        let em = e_measure_curve(&inv, &gt).unwrap();
        assert!(em.values[200].abs() < 1e-7);
    }

    #[test]
    fn s_measure_examples() {
        let gt: Vec<f64> = (0..16).map(|i| if (i % 4) < 2 && i < 8 { 1.0 } else { 0.0 }).collect();
        assert!((s_measure(&gt, &gt, 4, 4).unwrap() - 1.0).abs() < 1e-6);
        assert!((s_measure(&[0.3; 16], &[0.0; 16], 4, 4).unwrap() - 0.7).abs() < 1e-12);
        assert!((s_measure(&[0.3; 16], &[1.0; 16], 4, 4).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_empty_input() {
        assert!(matches!(aggregate(&[], MeanFMode::Curve), Err(Error::Domain(_))));
    }

    #[test]
    fn report_document_round_trips() {
        let r = MetricReport { mae: 0.0323, max_f: 0.7444, mean_f: 0.7153, max_em: 0.9083, mean_em: 0.8773, sm: 0.8179 };
        let doc = r.to_document();
        assert!(doc.starts_with("mae = 0.032300\nmax_f = 0.744400\n"));
        assert_eq!(MetricReport::parse_document(&doc).unwrap(), r);
    }
}
