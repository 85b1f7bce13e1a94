//! Descriptive summaries: subgroup accuracies, sliding-window logit trends
//! and per-manifestation logit distributions.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::committee::round2;
use crate::dataset::Dataset;
use crate::error::{AuditError, Result};

pub const MIN_WINDOW: usize = 20;
pub const DEFAULT_WINDOW_FRAC: f64 = 0.1;
pub const DEFAULT_STRIDE_FRAC: f64 = 0.025;
pub const DENSITY_GRID: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    /// `abbr=value` pairs, or `all` without grouping.
    pub group: String,
    pub group_values: Vec<f64>,
    /// Percentages per class; `None` when the group has no sample of that class.
    pub accuracies: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    /// Unweighted mean over the present classes.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub group_by: Vec<String>,
    pub classes: Vec<String>,
    pub rows: Vec<AccuracyRow>,
}

/// Arithmetic mean rounded to two decimals.
pub fn mean_accuracy(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    Some(round2(values.iter().sum::<f64>() / values.len() as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-group, per-class accuracy of the argmax prediction.
pub fn subpopulation_accuracy(dataset: &Dataset, group_by: &[&str]) -> Result<AccuracyTable> {
    let columns: Vec<&[f64]> = group_by
        .iter()
        .map(|abbr| {
            dataset
                .property(abbr)
                .ok_or_else(|| AuditError::Schema(format!("unknown property `{abbr}`")))
        })
        .collect::<Result<_>>()?;
    let classes = dataset.num_classes();
    let mut keys: Vec<Vec<f64>> = (0..dataset.n())
        .map(|i| columns.iter().map(|c| c[i]).collect())
        .collect();
    keys.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    keys.dedup();

    let rows = keys
        .into_iter()
        .map(|key| {
            let mut correct = vec![0usize; classes];
            let mut counts = vec![0usize; classes];
            for i in 0..dataset.n() {
                if columns.iter().zip(&key).any(|(c, &k)| c[i] != k) {
                    continue;
                }
                let label = dataset.labels()[i];
                counts[label] += 1;
                if argmax(&dataset.logit_row(i)) == label {
                    correct[label] += 1;
                }
            }
            let accuracies: Vec<Option<f64>> = (0..classes)
                .map(|c| (counts[c] > 0).then(|| 100.0 * correct[c] as f64 / counts[c] as f64))
                .collect();
            let present: Vec<f64> = accuracies.iter().flatten().copied().collect();
            let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
            let group = if group_by.is_empty() {
                "all".to_string()
            } else {
                group_by
                    .iter()
                    .zip(&key)
                    .map(|(a, v)| format!("{a}={v}"))
                    .collect::<Vec<_>>()
                    .join(",")
            };
            AccuracyRow {
                group,
                group_values: key,
                accuracies,
                counts,
                mean,
            }
        })
        .collect();
    Ok(AccuracyTable {
        group_by: group_by.iter().map(|s| s.to_string()).collect(),
        classes: dataset.class_names().to_vec(),
        rows,
    })
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

impl AccuracyTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group".to_string()];
        header.extend(self.classes.iter().cloned());
        header.push("mean".into());
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![row.group.clone()];
            rec.extend(row.accuracies.iter().map(|a| fmt_pct(*a)));
            rec.push(fmt_pct(row.mean));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| AuditError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16}", "group");
        for c in &self.classes {
            let _ = write!(out, " {c:>10}");
        }
        let _ = writeln!(out, " {:>10}", "mean");
        for row in &self.rows {
            let _ = write!(out, "{:<16}", row.group);
            for a in &row.accuracies {
                let _ = write!(out, " {:>10}", fmt_pct(*a));
            }
            let _ = writeln!(out, " {:>10}", fmt_pct(row.mean));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCurve {
    pub window_centers: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    /// First position of each window in property-sorted order.
    pub window_starts: Vec<usize>,
    pub window_size: usize,
    pub stride: usize,
}

/// Window and stride for `n` samples: `max(20, ⌊w·n⌋)` and `max(1, ⌊s·n⌋)`.
pub fn window_geometry(n: usize, window_frac: f64, stride_frac: f64) -> (usize, usize) {
    let window = ((window_frac * n as f64).floor() as usize).max(MIN_WINDOW);
    let stride = ((stride_frac * n as f64).floor() as usize).max(1);
    (window, stride)
}

pub fn sliding_gaussian_trend(prop: &[f64], logit: &[f64], window_frac: f64, stride_frac: f64) -> Result<TrendCurve> {
    let (window, stride) = window_geometry(prop.len(), window_frac, stride_frac);
    sliding_gaussian_trend_with(prop, logit, window, stride)
}

/// Mean and population standard deviation of the logit in windows over the
/// property-sorted samples; the last window ends at the final sample.
pub fn sliding_gaussian_trend_with(prop: &[f64], logit: &[f64], window: usize, stride: usize) -> Result<TrendCurve> {
    if prop.len() != logit.len() {
        return Err(AuditError::Domain(format!(
            "length mismatch: {} property values, {} logits",
            prop.len(),
            logit.len()
        )));
    }
    if window == 0 || stride == 0 {
        return Err(AuditError::Domain("window and stride must be positive".into()));
    }
    let n = prop.len();
    if n < window {
        return Err(AuditError::InsufficientData(format!(
            "{n} samples, window needs {window}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| prop[a].total_cmp(&prop[b]));
    let mut starts: Vec<usize> = (0..=n - window).step_by(stride).collect();
    if starts.last() != Some(&(n - window)) {
        starts.push(n - window);
    }
    let mut curve = TrendCurve {
        window_centers: Vec::with_capacity(starts.len()),
        means: Vec::with_capacity(starts.len()),
        stds: Vec::with_capacity(starts.len()),
        window_starts: starts.clone(),
        window_size: window,
        stride,
    };
    let w = window as f64;
    for s in starts {
        let idx = &order[s..s + window];
        let center = idx.iter().map(|&i| prop[i]).sum::<f64>() / w;
        let mean = idx.iter().map(|&i| logit[i]).sum::<f64>() / w;
        let var = idx.iter().map(|&i| (logit[i] - mean).powi(2)).sum::<f64>() / w;
        curve.window_centers.push(center);
        curve.means.push(mean);
        curve.stds.push(var.sqrt());
    }
    Ok(curve)
}

impl TrendCurve {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["center", "mean", "std"])?;
        for i in 0..self.means.len() {
            w.write_record([
                self.window_centers[i].to_string(),
                self.means[i].to_string(),
                self.stds[i].to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| AuditError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub label: f64,
    pub count: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub bandwidth: f64,
    pub positions: Vec<f64>,
    pub densities: Vec<f64>,
}

/// Quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn silverman(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = if sorted.len() > 1 {
        (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
        .sum()
}

/// Quartiles and a Gaussian kernel density for the logits of each
/// manifestation (0 then 1) on a shared grid.
pub fn binary_group_summary(prop: &[f64], logit: &[f64]) -> Result<(GroupSummary, GroupSummary)> {
    if prop.len() != logit.len() {
        return Err(AuditError::Domain("length mismatch".into()));
    }
    if let Some(v) = prop.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(AuditError::Domain(format!("binary property holds {v}")));
    }
    let group = |label: f64| -> Result<Vec<f64>> {
        let mut g: Vec<f64> = prop
            .iter()
            .zip(logit)
            .filter(|(&p, _)| p == label)
            .map(|(_, &l)| l)
            .collect();
        if g.is_empty() {
            return Err(AuditError::InsufficientData(format!("no sample with manifestation {label}")));
        }
        g.sort_by(f64::total_cmp);
        Ok(g)
    };
    let groups = [group(0.0)?, group(1.0)?];
    let lo = logit.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logit.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fallback = if hi > lo { (hi - lo) * 1e-2 } else { 1.0 };
    let bandwidths: Vec<f64> = groups
        .iter()
        .map(|g| {
            let h = silverman(g);
            if h > 0.0 {
                h
            } else {
                fallback
            }
        })
        .collect();
    let pad = 3.0 * bandwidths.iter().copied().fold(0.0, f64::max);
    let (a, b) = (lo - pad, hi + pad);
    let positions: Vec<f64> = (0..DENSITY_GRID)
        .map(|i| a + (b - a) * i as f64 / (DENSITY_GRID - 1) as f64)
        .collect();
    let summarize = |label: f64, g: &[f64], h: f64| {
        let norm = 1.0 / (g.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        let mut densities: Vec<f64> = positions
            .iter()
            .map(|&x| norm * g.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>())
            .collect();
        let mass = trapezoid(&positions, &densities);
        if mass > 0.0 {
            densities.iter_mut().for_each(|d| *d /= mass);
        }
        GroupSummary {
            label,
            count: g.len(),
            q1: quantile(g, 0.25),
            median: quantile(g, 0.5),
            q3: quantile(g, 0.75),
            bandwidth: h,
            positions: positions.clone(),
            densities,
        }
    };
    Ok((
        summarize(0.0, &groups[0], bandwidths[0]),
        summarize(1.0, &groups[1], bandwidths[1]),
    ))
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    points
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect::<Vec<_>>()
        .join(" ")
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 30.0;

fn scale(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi > lo {
        a + (v - lo) / (hi - lo) * (b - a)
    } else {
        0.5 * (a + b)
    }
}

/// Mean line with a ±1 std band.
pub fn trend_svg(curve: &TrendCurve) -> String {
    let xs = &curve.window_centers;
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let upper: Vec<f64> = curve.means.iter().zip(&curve.stds).map(|(m, s)| m + s).collect();
    let lower: Vec<f64> = curve.means.iter().zip(&curve.stds).map(|(m, s)| m - s).collect();
    let y_lo = lower.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = upper.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let px = |x: f64| scale(x, x_lo, x_hi, MARGIN, SVG_W - MARGIN);
    let py = |y: f64| scale(y, y_lo, y_hi, SVG_H - MARGIN, MARGIN);
    let band = polyline(
        xs.iter()
            .zip(&upper)
            .map(|(&x, &y)| (px(x), py(y)))
            .chain(xs.iter().zip(&lower).rev().map(|(&x, &y)| (px(x), py(y)))),
    );
    let line = polyline(xs.iter().zip(&curve.means).map(|(&x, &y)| (px(x), py(y))));
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n\
         <polygon points=\"{band}\" fill=\"#9ecae1\" fill-opacity=\"0.5\"/>\n\
         <polyline points=\"{line}\" fill=\"none\" stroke=\"#08519c\" stroke-width=\"2\"/>\n\
         </svg>\n"
    )
}

/// Two mirrored density outlines side by side.
pub fn violin_svg(groups: &(GroupSummary, GroupSummary)) -> String {
    let pos = &groups.0.positions;
    let (y_lo, y_hi) = (pos[0], pos[pos.len() - 1]);
    let peak = groups
        .0
        .densities
        .iter()
        .chain(&groups.1.densities)
        .copied()
        .fold(0.0, f64::max);
    let half = (SVG_W - 2.0 * MARGIN) / 4.0;
    let mut body = String::new();
    for (k, g) in [&groups.0, &groups.1].into_iter().enumerate() {
        let cx = MARGIN + half * (2 * k + 1) as f64;
        let py = |y: f64| scale(y, y_lo, y_hi, SVG_H - MARGIN, MARGIN);
        let w = |d: f64| if peak > 0.0 { d / peak * half * 0.9 } else { 0.0 };
        let outline = polyline(
            g.positions
                .iter()
                .zip(&g.densities)
                .map(|(&y, &d)| (cx + w(d), py(y)))
                .chain(g.positions.iter().zip(&g.densities).rev().map(|(&y, &d)| (cx - w(d), py(y)))),
        );
        let _ = writeln!(
            body,
            "<polygon points=\"{outline}\" fill=\"#fdae6b\" stroke=\"#e6550d\"/>\n\
             <line x1=\"{cx:.2}\" x2=\"{cx:.2}\" y1=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"3\"/>\n\
             <circle cx=\"{cx:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"white\"/>\n\
             <text x=\"{cx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>",
            py(g.q1),
            py(g.q3),
            py(g.median),
            SVG_H - 8.0,
            g.label
        );
    }
    format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\">\n{body}</svg>\n")
}
