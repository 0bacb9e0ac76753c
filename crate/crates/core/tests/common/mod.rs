//! Brute-force reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::Rng;

pub const EPS: f64 = 1e-8;

pub fn random_pair(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let pred = (0..n).map(|_| rng.random::<f64>()).collect();
    let density = rng.random::<f64>();
    let gt = (0..n).map(|_| if rng.random::<f64>() < density { 1.0 } else { 0.0 }).collect();
    (pred, gt)
}

pub fn mae(pred: &[f64], gt: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..pred.len() {
        s += (pred[i] - gt[i]).abs();
    }
    s / pred.len() as f64
}

/// (tp, fp, fn, tn) at threshold `k/255` by direct enumeration.
pub fn confusion(pred: &[f64], gt: &[f64], k: usize) -> (u64, u64, u64, u64) {
    let t = k as f64 / 255.0;
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for i in 0..pred.len() {
        match (pred[i] >= t, gt[i] > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

pub fn f_curve(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let mut prev = (u64::MAX, u64::MAX);
    (0..256)
        .map(|k| {
            let (tp, fp, fn_, _) = confusion(pred, gt, k);
            assert!(tp <= prev.0 && fp <= prev.1, "counters must not increase with the threshold");
            prev = (tp, fp);
            if tp + fn_ == 0 {
                return 0.0;
            }
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = tp as f64 / (tp + fn_) as f64;
            if 0.3 * p + r == 0.0 {
                0.0
            } else {
                1.3 * p * r / (0.3 * p + r)
            }
        })
        .collect()
}

pub fn em_curve(pred: &[f64], gt: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    let g: Vec<f64> = gt.iter().map(|&v| if v > 0.5 { 1.0 } else { 0.0 }).collect();
    (0..256)
        .map(|k| {
            let t = k as f64 / 255.0;
            let b: Vec<f64> = pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect();
            let sg: f64 = g.iter().sum();
            let sb: f64 = b.iter().sum();
            let g_all = |s: f64, v: f64| s == v * n;
            if (g_all(sg, 0.0) && g_all(sb, 0.0)) || (g_all(sg, 1.0) && g_all(sb, 1.0)) {
                return 1.0;
            }
            if (g_all(sg, 0.0) && g_all(sb, 1.0)) || (g_all(sg, 1.0) && g_all(sb, 0.0)) {
                return 0.0;
            }
            let (mg, mb) = (sg / n, sb / n);
            let mut acc = 0.0;
            for i in 0..g.len() {
                let (a, c) = (g[i] - mg, b[i] - mb);
                let phi = 2.0 * a * c / (a * a + c * c + EPS);
                acc += (1.0 + phi).powi(2) / 4.0;
            }
            acc / n
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

fn obj(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let x = mean(v);
    2.0 * x / (x * x + 1.0 + std_dev(v) + EPS)
}

fn ssim(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (mean(x), mean(y));
    let sx = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sy = y.iter().map(|a| (a - my).powi(2)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * mx * my * sxy;
    let beta = (mx * mx + my * my) * (sx + sy);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Matrix-style structure measure written directly from the published definition.
pub fn s_measure(pred: &[f64], gt: &[f64], rows: usize, cols: usize) -> f64 {
    let at = |v: &[f64], r: usize, c: usize| v[r * cols + c];
    let y = mean(gt);
    let q = if y == 0.0 {
        1.0 - mean(pred)
    } else if y == 1.0 {
        mean(pred)
    } else {
        let fg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 1.0).map(|i| pred[i]).collect();
        let bg: Vec<f64> = (0..pred.len()).filter(|&i| gt[i] == 0.0).map(|i| 1.0 - pred[i]).collect();
        let so = y * obj(&fg) + (1.0 - y) * obj(&bg);

        let total: f64 = gt.iter().sum();
        let mut xs = 0.0;
        let mut ys = 0.0;
        for r in 1..=rows {
            for c in 1..=cols {
                xs += c as f64 * at(gt, r - 1, c - 1);
                ys += r as f64 * at(gt, r - 1, c - 1);
            }
        }
        let x = (xs / total).round() as usize;
        let yc = (ys / total).round() as usize;
        let block = |v: &[f64], r0: usize, r1: usize, c0: usize, c1: usize| {
            let mut out = Vec::new();
            for r in r0..r1 {
                for c in c0..c1 {
                    out.push(at(v, r, c));
                }
            }
            out
        };
        let area = (rows * cols) as f64;
        let mut sr = 0.0;
        for (r0, r1, c0, c1) in [(0, yc, 0, x), (0, yc, x, cols), (yc, rows, 0, x), (yc, rows, x, cols)] {
            let pb = block(pred, r0, r1, c0, c1);
            if pb.is_empty() {
                continue;
            }
            let gb = block(gt, r0, r1, c0, c1);
            sr += pb.len() as f64 / area * ssim(&pb, &gb);
        }
        0.5 * so + 0.5 * sr
    };
    q.clamp(0.0, 1.0)
}
