//! Matting metrics (SAD, MSE, gradient and connectivity error) and TT/TP reporting.
//!
//! Mattes are row-major `f64` slices in [0, 1]. SAD, Grad and Conn are
//! reported divided by 1000; MSE is reported multiplied by 1000.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Result};
use crate::trimap::{Trimap, UNKNOWN};

pub const GRAD_SIGMA: f64 = 1.4;
pub const CONN_STEP: f64 = 0.1;
pub const CONN_CUTOFF: f64 = 0.15;

/// Pixels a metric is summed over.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRegion {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    /// Set when the unknown region was empty and every pixel is used instead.
    pub fallback: bool,
}

impl EvalRegion {
    pub fn all(height: usize, width: usize) -> Self {
        EvalRegion {
            height,
            width,
            mask: vec![true; height * width],
            fallback: false,
        }
    }

    pub fn unknown(trimap: &Trimap) -> Self {
        let mask: Vec<bool> = trimap.classes().iter().map(|&c| c == UNKNOWN).collect();
        if mask.iter().any(|&m| m) {
            EvalRegion {
                height: trimap.height(),
                width: trimap.width(),
                mask,
                fallback: false,
            }
        } else {
            EvalRegion {
                fallback: true,
                ..Self::all(trimap.height(), trimap.width())
            }
        }
    }

    pub fn from_mask(height: usize, width: usize, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != height * width {
            return Err(arg_err!(
                "mask of {} values for {height}x{width}",
                mask.len()
            ));
        }
        if mask.iter().any(|&m| m) {
            Ok(EvalRegion {
                height,
                width,
                mask,
                fallback: false,
            })
        } else {
            Ok(EvalRegion {
                fallback: true,
                ..Self::all(height, width)
            })
        }
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn check(&self, pred: &[f64], gt: &[f64]) -> Result<()> {
        let n = self.height * self.width;
        if pred.len() != n || gt.len() != n {
            return Err(arg_err!(
                "pred ({}) and gt ({}) must both have {n} values",
                pred.len(),
                gt.len()
            ));
        }
        if let Some(v) = pred.iter().chain(gt).find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(arg_err!("matte value {v} outside [0, 1]"));
        }
        Ok(())
    }
}

pub fn sad(pred: &[f64], gt: &[f64], region: &EvalRegion) -> Result<f64> {
    region.check(pred, gt)?;
    let s: f64 = region
        .mask
        .iter()
        .zip(pred.iter().zip(gt))
        .filter(|(m, _)| **m)
        .map(|(_, (p, g))| (p - g).abs())
        .sum();
    Ok(s / 1000.0)
}

pub fn mse(pred: &[f64], gt: &[f64], region: &EvalRegion) -> Result<f64> {
    region.check(pred, gt)?;
    let s: f64 = region
        .mask
        .iter()
        .zip(pred.iter().zip(gt))
        .filter(|(m, _)| **m)
        .map(|(_, (p, g))| (p - g) * (p - g))
        .sum();
    Ok(s / region.count() as f64 * 1000.0)
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// 1-D smoothing and derivative taps of the separable Gaussian-gradient
/// filter, radius `ceil(3σ)`, jointly scaled to unit L2 norm.
pub fn gaussian_gradient_taps(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let r = (3.0 * sigma).ceil() as isize;
    let g: Vec<f64> = (-r..=r).map(|u| gauss(u as f64, sigma)).collect();
    let dg: Vec<f64> = (-r..=r)
        .map(|v| -(v as f64) * gauss(v as f64, sigma) / (sigma * sigma))
        .collect();
    let norm =
        (g.iter().map(|a| a * a).sum::<f64>() * dg.iter().map(|a| a * a).sum::<f64>()).sqrt();
    let g = g.iter().map(|a| a / norm.sqrt()).collect();
    let dg = dg.iter().map(|a| a / norm.sqrt()).collect();
    (g, dg)
}

/// Correlates rows with `kx` and columns with `ky` (replicate borders).
/// Taps at `±t` are summed as a pair so antisymmetric kernels cancel exactly.
fn separable(x: &[f64], h: usize, w: usize, kx: &[f64], ky: &[f64]) -> Vec<f64> {
    let r = kx.len() / 2;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let tap = |k: &[f64], at: &dyn Fn(isize) -> f64| {
        let mut acc = k[r] * at(0);
        for t in 1..=r {
            acc += k[r + t] * at(t as isize) + k[r - t] * at(-(t as isize));
        }
        acc
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = tap(kx, &|d| x[y * w + clamp(xx as isize + d, w)]);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            out[y * w + xx] = tap(ky, &|d| tmp[clamp(y as isize + d, h) * w + xx]);
        }
    }
    out
}

/// Gradient magnitude under the σ = 1.4 Gaussian-derivative filters.
pub fn gradient_magnitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (g, dg) = gaussian_gradient_taps(GRAD_SIGMA);
    let gx = separable(x, h, w, &dg, &g);
    let gy = separable(x, h, w, &g, &dg);
    gx.iter().zip(&gy).map(|(a, b)| a.hypot(*b)).collect()
}

pub fn grad_error(pred: &[f64], gt: &[f64], region: &EvalRegion) -> Result<f64> {
    region.check(pred, gt)?;
    let (h, w) = (region.height, region.width);
    let mp = gradient_magnitude(pred, h, w);
    let mg = gradient_magnitude(gt, h, w);
    let s: f64 = (0..h * w)
        .filter(|&i| region.mask[i])
        .map(|i| (mp[i] - mg[i]).powi(2))
        .sum();
    Ok(s / 1000.0)
}

/// Largest 4-connected component of `on`; ties go to the component whose
/// first pixel comes earliest in row-major order.
fn largest_component(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None; // (label, size)
    let mut stack = Vec::new();
    let mut next = 0;
    for start in 0..h * w {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if on[q] && label[q] == usize::MAX {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    match best {
        Some((l, _)) => label.iter().map(|&v| v == l).collect(),
        None => vec![false; h * w],
    }
}

/// Per-pixel level at which each pixel drops out of the largest connected
/// opaque component (thresholds `step, 2·step, …, 1`).
fn connectivity_levels(pred: &[f64], gt: &[f64], h: usize, w: usize, step: f64) -> Vec<f64> {
    let steps = (1.0 / step).round() as usize;
    let mut level = vec![-1.0; h * w];
    for i in 1..=steps {
        let theta = i as f64 * step;
        let both: Vec<bool> = pred
            .iter()
            .zip(gt)
            .map(|(p, g)| *p >= theta && *g >= theta)
            .collect();
        let omega = largest_component(&both, h, w);
        for p in 0..h * w {
            if level[p] == -1.0 && !omega[p] {
                level[p] = (i - 1) as f64 * step;
            }
        }
    }
    for l in &mut level {
        if *l == -1.0 {
            *l = 1.0;
        }
    }
    level
}

pub fn conn_error_with_step(
    pred: &[f64],
    gt: &[f64],
    region: &EvalRegion,
    step: f64,
) -> Result<f64> {
    region.check(pred, gt)?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(arg_err!("connectivity step {step} outside (0, 1]"));
    }
    let (h, w) = (region.height, region.width);
    let level = connectivity_levels(pred, gt, h, w, step);
    let phi = |a: f64, l: f64| {
        let d = a - l;
        1.0 - if d >= CONN_CUTOFF { d } else { 0.0 }
    };
    let s: f64 = (0..h * w)
        .filter(|&i| region.mask[i])
        .map(|i| (phi(pred[i], level[i]) - phi(gt[i], level[i])).abs())
        .sum();
    Ok(s / 1000.0)
}

pub fn conn_error(pred: &[f64], gt: &[f64], region: &EvalRegion) -> Result<f64> {
    conn_error_with_step(pred, gt, region, CONN_STEP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stratum {
    Tt,
    Tp,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::Tt => "TT",
            Stratum::Tp => "TP",
        }
    }
}

/// TT iff the known-foreground fraction of the trimap is below `threshold`.
pub fn classify(trimap: &Trimap, threshold: f64) -> Stratum {
    if trimap.foreground_fraction() < threshold {
        Stratum::Tt
    } else {
        Stratum::Tp
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

impl Metrics {
    pub fn compute(pred: &[f64], gt: &[f64], region: &EvalRegion) -> Result<Metrics> {
        Ok(Metrics {
            sad: sad(pred, gt, region)?,
            mse: mse(pred, gt, region)?,
            grad: grad_error(pred, gt, region)?,
            conn: conn_error(pred, gt, region)?,
        })
    }

    fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        let s = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            sad: s(|m| m.sad),
            mse: s(|m| m.mse),
            grad: s(|m| m.grad),
            conn: s(|m| m.conn),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub metrics: Metrics,
    pub stratum: Stratum,
    /// Metrics were taken over the whole image because nothing was unknown.
    pub region_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumMean {
    pub count: usize,
    pub mean: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub tt: Option<StratumMean>,
    pub tp: Option<StratumMean>,
    pub combined: Option<StratumMean>,
}

fn stratum_mean(items: &[Metrics]) -> Option<StratumMean> {
    (!items.is_empty()).then(|| StratumMean {
        count: items.len(),
        mean: Metrics::mean(items),
    })
}

/// Groups per-sample metrics into TT / TP / combined means.
pub fn tt_tp_report(
    samples: Vec<(String, Metrics, bool)>,
    trimaps: &[&Trimap],
    threshold: f64,
) -> Result<MetricReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(arg_err!("TT threshold {threshold} outside (0, 1)"));
    }
    if samples.len() != trimaps.len() {
        return Err(arg_err!(
            "{} samples but {} trimaps",
            samples.len(),
            trimaps.len()
        ));
    }
    let samples: Vec<SampleMetrics> = samples
        .into_iter()
        .zip(trimaps)
        .map(|((id, metrics, region_fallback), t)| SampleMetrics {
            id,
            metrics,
            stratum: classify(t, threshold),
            region_fallback,
        })
        .collect();
    Ok(MetricReport::from_samples(samples))
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>) -> Self {
        let pick = |s: Option<Stratum>| -> Vec<Metrics> {
            samples
                .iter()
                .filter(|m| s.is_none_or(|s| m.stratum == s))
                .map(|m| m.metrics)
                .collect()
        };
        MetricReport {
            tt: stratum_mean(&pick(Some(Stratum::Tt))),
            tp: stratum_mean(&pick(Some(Stratum::Tp))),
            combined: stratum_mean(&pick(None)),
            samples,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,sad,mse,grad,conn,stratum\n");
        for s in &self.samples {
            let m = &s.metrics;
            writeln!(
                out,
                "{},{},{},{},{},{}",
                s.id,
                m.sad,
                m.mse,
                m.grad,
                m.conn,
                s.stratum.as_str()
            )
            .unwrap();
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out =
            String::from("| subset | n | SAD | MSE | Grad | Conn |\n|---|---|---|---|---|---|\n");
        for (name, row) in [
            ("TT", &self.tt),
            ("TP", &self.tp),
            ("TT+TP", &self.combined),
        ] {
            match row {
                Some(r) => writeln!(
                    out,
                    "| {name} | {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                    r.count, r.mean.sad, r.mean.mse, r.mean.grad, r.mean.conn
                ),
                None => writeln!(out, "| {name} | 0 | - | - | - | - |"),
            }
            .unwrap();
        }
        let fallbacks = self.samples.iter().filter(|s| s.region_fallback).count();
        if fallbacks > 0 {
            writeln!(out, "\n{fallbacks} sample(s) had no unknown pixels and were scored over the whole image.").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trimap::{BACKGROUND, FOREGROUND};

    #[test]
    fn half_offset_on_ten_by_ten() {
        let r = EvalRegion::all(10, 10);
        let p = vec![0.75; 100];
        let g = vec![0.25; 100];
        assert_eq!(sad(&p, &g, &r).unwrap(), 0.05);
        assert_eq!(mse(&p, &g, &r).unwrap(), 250.0);
    }

    #[test]
    fn constants_have_no_gradient_error() {
        let r = EvalRegion::all(9, 7);
        assert_eq!(grad_error(&[0.3; 63], &[0.9; 63], &r).unwrap(), 0.0);
    }

    #[test]
    fn taps_have_unit_norm() {
        let (g, dg) = gaussian_gradient_taps(GRAD_SIGMA);
        assert_eq!(g.len(), 11);
        let n: f64 = g.iter().map(|a| a * a).sum::<f64>() * dg.iter().map(|a| a * a).sum::<f64>();
        assert!((n - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_blob_has_no_connectivity_error() {
        let mut a = vec![0.0; 64];
        for y in 2..6 {
            for x in 3..7 {
                a[y * 8 + x] = 1.0;
            }
        }
        let r = EvalRegion::all(8, 8);
        assert_eq!(conn_error(&a, &a, &r).unwrap(), 0.0);
    }

    #[test]
    fn empty_unknown_region_falls_back() {
        let t = Trimap::filled(4, 4, BACKGROUND).unwrap();
        let r = EvalRegion::unknown(&t);
        assert!(r.fallback);
        assert_eq!(r.count(), 16);
    }

    #[test]
    fn strata() {
        let unknown = Trimap::filled(4, 4, UNKNOWN).unwrap();
        assert_eq!(classify(&unknown, 1e-9), Stratum::Tt);
        let mut half = Trimap::filled(4, 4, BACKGROUND).unwrap();
        for y in 0..2 {
            for x in 0..4 {
                half.set_class(y, x, FOREGROUND).unwrap();
            }
        }
        assert_eq!(classify(&half, 0.05), Stratum::Tp);
    }

    #[test]
    fn combined_mean_is_weighted_strata_mean() {
        let unknown = Trimap::filled(4, 4, UNKNOWN).unwrap();
        let fg = Trimap::filled(4, 4, FOREGROUND).unwrap();
        let mut rows = Vec::new();
        let mut maps = Vec::new();
        for i in 0..10 {
            let v = i as f64;
            rows.push((
                format!("s{i}"),
                Metrics {
                    sad: v,
                    mse: 2.0 * v,
                    grad: 0.5,
                    conn: 8.0,
                },
                false,
            ));
            maps.push(if i < 3 { &unknown } else { &fg });
        }
        let rep = tt_tp_report(rows, &maps, 0.05).unwrap();
        let (tt, tp, all) = (
            rep.tt.clone().unwrap(),
            rep.tp.clone().unwrap(),
            rep.combined.clone().unwrap(),
        );
        assert_eq!((tt.count, tp.count), (3, 7));
        assert_eq!(tt.mean.sad, 1.0);
        assert_eq!(tp.mean.sad, 6.0);
        assert_eq!(all.mean.sad, 4.5);
        assert_eq!(all.mean.sad, (3.0 * tt.mean.sad + 7.0 * tp.mean.sad) / 10.0);
        assert!(rep.to_csv().lines().nth(1).unwrap().ends_with(",TT"));
        assert!(rep.to_markdown().contains("| TT+TP | 10 |"));
        assert!(tt_tp_report(vec![], &[], 1.0).is_err());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        let r = EvalRegion::all(1, 2);
        assert!(sad(&[0.0, 1.5], &[0.0, 0.0], &r).is_err());
        assert!(sad(&[0.0], &[0.0, 0.0], &r).is_err());
    }
}
