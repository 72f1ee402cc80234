//! Offline views over a metrics stream: plan-cache audit and loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use imp_core::agd::StepMetrics;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SignatureSummary {
    pub signature: String,
    pub builds: u64,
    pub first_build_step: Option<u64>,
    pub uses: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CacheSummary {
    pub steps: usize,
    pub distinct_signatures: usize,
    /// Builds flagged in step records.
    pub builds: u64,
    /// Counter reported by the last record.
    pub plan_builds_total: u64,
    pub signatures: Vec<SignatureSummary>,
    pub violations: Vec<String>,
}

impl CacheSummary {
    pub fn is_healthy(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn inspect_cache(metrics: &[StepMetrics]) -> CacheSummary {
    let mut by_sig: BTreeMap<&str, SignatureSummary> = BTreeMap::new();
    let mut violations = Vec::new();
    let mut builds = 0;
    let mut prev_total = None;
    for m in metrics {
        let mut built_here = 0;
        for p in &m.plans {
            let s = by_sig.entry(&p.signature).or_insert_with(|| SignatureSummary {
                signature: p.signature.clone(),
                builds: 0,
                first_build_step: None,
                uses: 0,
            });
            s.uses += 1;
            if p.built {
                s.builds += 1;
                built_here += 1;
                s.first_build_step.get_or_insert(m.step);
                if s.builds == 2 {
                    violations.push(format!("signature built more than once (again at step {}): {}", m.step, p.signature));
                }
            }
        }
        builds += built_here;
        if let Some(prev) = prev_total {
            if m.plan_builds_total != prev + built_here {
                violations.push(format!(
                    "step {}: build counter moved from {prev} to {} with {built_here} recorded builds",
                    m.step, m.plan_builds_total
                ));
            }
        }
        prev_total = Some(m.plan_builds_total);
    }
    CacheSummary {
        steps: metrics.len(),
        distinct_signatures: by_sig.len(),
        builds,
        plan_builds_total: metrics.last().map_or(0, |m| m.plan_builds_total),
        signatures: by_sig.into_values().collect(),
        violations,
    }
}

/// Exponential moving average seeded with the first value.
pub fn ema(values: &[f64], decay: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let next = match acc {
            None => v,
            Some(a) => decay * a + (1.0 - decay) * v,
        };
        acc = Some(next);
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PlotFiles {
    pub csv: PathBuf,
    pub svg: PathBuf,
    pub series: Vec<String>,
}

#[derive(Serialize)]
struct Row<'a> {
    step: u64,
    task: &'a str,
    loss: f64,
    loss_ema: f64,
    lr: f64,
}

/// Writes `curves.csv` (one row per step, EMA per task) and `curves.svg`.
pub fn plot(metrics: &[StepMetrics], dir: &Path, decay: f64) -> Result<PlotFiles> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut series: BTreeMap<&str, Vec<(u64, f64)>> = BTreeMap::new();
    for m in metrics {
        series.entry(&m.task).or_default().push((m.step, m.loss));
    }
    let smoothed: BTreeMap<&str, Vec<f64>> = series
        .iter()
        .map(|(k, v)| (*k, ema(&v.iter().map(|p| p.1).collect::<Vec<_>>(), decay)))
        .collect();
    let csv_path = dir.join("curves.csv");
    let mut w = csv::Writer::from_path(&csv_path).with_context(|| format!("creating {}", csv_path.display()))?;
    let mut cursor: BTreeMap<&str, usize> = BTreeMap::new();
    for m in metrics {
        let i = cursor.entry(&m.task).or_insert(0);
        w.serialize(Row {
            step: m.step,
            task: &m.task,
            loss: m.loss,
            loss_ema: smoothed[m.task.as_str()][*i],
            lr: m.lr,
        })?;
        *i += 1;
    }
    w.flush()?;
    let svg_path = dir.join("curves.svg");
    let lr: Vec<(u64, f64)> = metrics.iter().map(|m| (m.step, m.lr)).collect();
    let curves: Vec<(&str, Vec<(u64, f64)>)> = series
        .iter()
        .map(|(k, v)| (*k, v.iter().zip(&smoothed[k]).map(|(p, &e)| (p.0, e)).collect()))
        .collect();
    fs::write(&svg_path, render_svg(&curves, &lr)).with_context(|| format!("writing {}", svg_path.display()))?;
    Ok(PlotFiles {
        csv: csv_path,
        svg: svg_path,
        series: series.keys().map(|s| s.to_string()).collect(),
    })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn polyline(points: &[(u64, f64)], x0: f64, y0: f64, w: f64, h: f64, steps: (u64, u64), range: (f64, f64)) -> String {
    let sx = |s: u64| x0 + w * (s - steps.0) as f64 / (steps.1 - steps.0).max(1) as f64;
    let sy = |v: f64| {
        let span = if range.1 > range.0 { range.1 - range.0 } else { 1.0 };
        y0 + h - h * (v - range.0) / span
    };
    points
        .iter()
        .filter(|p| p.1.is_finite())
        .map(|&(s, v)| format!("{:.1},{:.1}", sx(s), sy(v)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn bounds(points: impl Iterator<Item = f64>) -> (f64, f64) {
    points
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn render_svg(curves: &[(&str, Vec<(u64, f64)>)], lr: &[(u64, f64)]) -> String {
    let (w, h) = (640.0, 200.0);
    let steps = (
        lr.first().map_or(0, |p| p.0),
        lr.last().map_or(1, |p| p.0),
    );
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="720" height="520" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<text x="40" y="20">loss (EMA)</text><text x="40" y="280">learning rate</text>"#);
    let _ = writeln!(svg, r##"<rect x="40" y="30" width="{w}" height="{h}" fill="none" stroke="#999"/>"##);
    let _ = writeln!(svg, r##"<rect x="40" y="290" width="{w}" height="{h}" fill="none" stroke="#999"/>"##);
    let loss_range = bounds(curves.iter().flat_map(|c| c.1.iter().map(|p| p.1)));
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" points="{}"/>"#,
            polyline(pts, 40.0, 30.0, w, h, steps, loss_range)
        );
        let _ = writeln!(svg, r#"<text x="{}" y="510" fill="{color}">{}</text>"#, 40 + 160 * i, escape(name));
    }
    let lr_range = bounds(lr.iter().map(|p| p.1));
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#333" points="{}"/>"##,
        polyline(lr, 40.0, 290.0, w, h, steps, (0.0, lr_range.1.max(0.0)))
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
