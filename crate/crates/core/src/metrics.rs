//! Overlap and surface-distance metrics, bootstrap intervals and the paired t-test.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phantom::Grid;

fn same_grid(a: &Grid<u8>, b: &Grid<u8>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("mask grids differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn counts(a: &Grid<u8>, b: &Grid<u8>) -> Result<(usize, usize, usize)> {
    same_grid(a, b)?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += (x != 0) as usize;
        nb += (y != 0) as usize;
        both += (x != 0 && y != 0) as usize;
    }
    Ok((na, nb, both))
}

/// `2|a∩b| / (|a|+|b|)`; 1 when both are empty.
pub fn dice(a: &Grid<u8>, b: &Grid<u8>) -> Result<f64> {
    let (na, nb, both) = counts(a, b)?;
    Ok(if na + nb == 0 { 1.0 } else { 2.0 * both as f64 / (na + nb) as f64 })
}

/// `|a∩b| / |a∪b|`; 1 when both are empty.
pub fn iou(a: &Grid<u8>, b: &Grid<u8>) -> Result<f64> {
    let (na, nb, both) = counts(a, b)?;
    let union = na + nb - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Hd95Convention {
    /// Percentile over both directed distance sets pooled together.
    #[default]
    Combined,
    /// Larger of the two directed percentiles.
    DirectedMax,
}

/// HD-95 in centimeters. `empty` marks a case where either mask had no voxels;
/// its `cm` is NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hd95 {
    pub cm: f64,
    pub empty: bool,
}

impl Hd95 {
    pub fn value(&self) -> Option<f64> {
        (!self.empty).then_some(self.cm)
    }
}

/// Mask voxels with a face neighbor outside the mask or the grid.
pub fn boundary(m: &Grid<u8>) -> Vec<[usize; 3]> {
    let [h, w, s] = m.dims();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..s {
                if m.get(i, j, k) == 0 {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == s;
                if edge
                    || m.get(i - 1, j, k) == 0
                    || m.get(i + 1, j, k) == 0
                    || m.get(i, j - 1, k) == 0
                    || m.get(i, j + 1, k) == 0
                    || m.get(i, j, k - 1) == 0
                    || m.get(i, j, k + 1) == 0
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Squared distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = step * step;
    let cross = |q: usize, p: usize| {
        let (qf, pf) = (q as f64, p as f64);
        ((f[q] + s2 * qf * qf) - (f[p] + s2 * pf * pf)) / (2.0 * s2 * (qf - pf))
    };
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        // z[i] is the left edge of the region where parabola v[i] is lowest
        let mut edge = f64::NEG_INFINITY;
        while let Some(&p) = v.last() {
            edge = cross(q, p);
            if edge > *z.last().unwrap() {
                break;
            }
            v.pop();
            z.pop();
            edge = f64::NEG_INFINITY;
        }
        v.push(q);
        z.push(edge);
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = (q as f64 - v[k] as f64) * step;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest site.
fn squared_distance_field(dims: [usize; 3], spacing: [f64; 3], sites: &[[usize; 3]]) -> Vec<f64> {
    let [h, w, s] = dims;
    let idx = |i: usize, j: usize, k: usize| (i * w + j) * s + k;
    let mut d = vec![f64::INFINITY; h * w * s];
    for &[i, j, k] in sites {
        d[idx(i, j, k)] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for a in 0..dims[oa] {
            for b in 0..dims[ob] {
                let at = |t: usize| {
                    let mut c = [0; 3];
                    c[axis] = t;
                    c[oa] = a;
                    c[ob] = b;
                    idx(c[0], c[1], c[2])
                };
                for t in 0..n {
                    line[t] = d[at(t)];
                }
                edt_line(&line, spacing[axis], &mut res, &mut v, &mut z);
                for t in 0..n {
                    d[at(t)] = res[t];
                }
            }
        }
    }
    d
}

/// Linear interpolation between order statistics; `q` in [0, 100].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th-percentile boundary distance in cm; spacing in mm per axis.
pub fn hd95(a: &Grid<u8>, b: &Grid<u8>, spacing: [f64; 3], convention: Hd95Convention) -> Result<Hd95> {
    same_grid(a, b)?;
    let (ba, bb) = (boundary(a), boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return Ok(Hd95 { cm: f64::NAN, empty: true });
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        let field = squared_distance_field(a.dims(), spacing, to);
        let mut d: Vec<f64> = from.iter().map(|&[i, j, k]| field[a.index(i, j, k)].sqrt()).collect();
        d.sort_by(f64::total_cmp);
        d
    };
    let (ab, ba_d) = (directed(&ba, &bb), directed(&bb, &ba));
    let mm = match convention {
        Hd95Convention::Combined => {
            let mut all = ab;
            all.extend(ba_d);
            all.sort_by(f64::total_cmp);
            percentile(&all, 95.0)
        }
        Hd95Convention::DirectedMax => percentile(&ab, 95.0).max(percentile(&ba_d, 95.0)),
    };
    Ok(Hd95 { cm: mm / 10.0, empty: false })
}

/// Sample mean with a percentile bootstrap interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

/// Resamples `values` with replacement `trials` times; the interval is the
/// central `level` mass of the resampled means.
pub fn bootstrap_ci(values: &[f64], trials: usize, level: f64, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::Contract("bootstrap needs at least one value".into()));
    }
    if trials == 0 || !(0.0..1.0).contains(&level) {
        return Err(Error::Contract(format!("bootstrap needs trials ≥ 1 and level in [0, 1), got {trials}, {level}")));
    }
    let n = values.len();
    // shifted by the first value so a constant sample averages to itself exactly
    let shift = values[0];
    let avg = |it: &mut dyn Iterator<Item = f64>| shift + it.map(|v| v - shift).sum::<f64>() / n as f64;
    let mean = avg(&mut values.iter().copied());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..trials).map(|_| avg(&mut (0..n).map(|_| values[rng.random_range(0..n)]))).collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0 * 100.0;
    // keep the point estimate inside its own interval when rounding would push it out
    Ok(Interval { mean, low: percentile(&means, tail).min(mean), high: percentile(&means, 100.0 - tail).max(mean) })
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let series = C[1..].iter().enumerate().fold(C[0], |acc, (i, c)| acc + c / (x + i as f64 + 1.0));
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + series.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        d = if d.abs() < TINY { TINY } else { d };
        c = 1.0 + aa / c;
        c = if c.abs() < TINY { TINY } else { c };
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-15 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided paired t-test on `x − y`: returns `(t, p)`.
pub fn paired_t_test(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Contract(format!("paired t-test needs equal lengths ≥ 2, got {} and {}", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return Err(Error::Degenerate("paired differences have zero variance".into()));
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let df = n - 1.0;
    let p = incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    Ok((t, p.clamp(0.0, 1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub iou: f64,
    pub hd95: Hd95,
}

impl CaseMetrics {
    pub fn compute(id: impl Into<String>, pred: &Grid<u8>, truth: &Grid<u8>) -> Result<Self> {
        let spacing = truth.spacing().map(f64::from);
        Ok(Self { id: id.into(), dice: dice(pred, truth)?, iou: iou(pred, truth)?, hd95: hd95(pred, truth, spacing, Hd95Convention::Combined)? })
    }
}

pub const BOOTSTRAP_TRIALS: usize = 1000;

/// Per-case rows plus bootstrap aggregates. HD-95 aggregates skip flagged cases.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub cases: Vec<CaseMetrics>,
    pub dice: Interval,
    pub iou: Interval,
    pub hd95_cm: Option<Interval>,
}

impl MetricReport {
    pub fn new(cases: Vec<CaseMetrics>, seed: u64) -> Result<Self> {
        let col = |f: &dyn Fn(&CaseMetrics) -> Option<f64>| cases.iter().filter_map(f).collect::<Vec<_>>();
        let dice = bootstrap_ci(&col(&|c| Some(c.dice)), BOOTSTRAP_TRIALS, 0.95, seed)?;
        let iou = bootstrap_ci(&col(&|c| Some(c.iou)), BOOTSTRAP_TRIALS, 0.95, seed)?;
        let hd = col(&|c| c.hd95.value());
        let hd95_cm = if hd.is_empty() { None } else { Some(bootstrap_ci(&hd, BOOTSTRAP_TRIALS, 0.95, seed)?) };
        Ok(Self { cases, dice, iou, hd95_cm })
    }

    pub fn empty_cases(&self) -> usize {
        self.cases.iter().filter(|c| c.hd95.empty).count()
    }

    /// `case_id dice iou hd95_cm` rows (`empty` when flagged), then `AGG` lines.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            let hd = c.hd95.value().map_or_else(|| "empty".to_string(), |v| format!("{v:.6}"));
            writeln!(out, "{} {:.6} {:.6} {hd}", c.id, c.dice, c.iou).unwrap();
        }
        let agg = |out: &mut String, name: &str, i: &Interval| {
            writeln!(out, "AGG {name} {:.6} {:.6} {:.6}", i.mean, i.low, i.high).unwrap();
        };
        agg(&mut out, "dice", &self.dice);
        agg(&mut out, "iou", &self.iou);
        match &self.hd95_cm {
            Some(i) => agg(&mut out, "hd95_cm", i),
            None => out.push_str("AGG hd95_cm empty empty empty\n"),
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}
