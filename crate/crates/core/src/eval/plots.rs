use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use super::benchmark::EvalReport;
use super::eer::roc_points;
use crate::error::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64, y: f64) -> (f64, f64) {
        let fx = if self.x.1 > self.x.0 { (x - self.x.0) / (self.x.1 - self.x.0) } else { 0.5 };
        let fy = if self.y.1 > self.y.0 { (y - self.y.0) / (self.y.1 - self.y.0) } else { 0.5 };
        (PAD + fx * (W - 2.0 * PAD), H - PAD - fy * (H - 2.0 * PAD))
    }
}

fn chart(title: &str, xlabel: &str, ylabel: &str, axes: &Axes, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
    let (x0, y0) = axes.px(axes.x.0, axes.y.0);
    let (x1, y1) = axes.px(axes.x.1, axes.y.1);
    let _ = writeln!(s, r#"<rect x="{x0:.1}" y="{y1:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>"#, W / 2.0, H - 10.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{ylabel}</text>"#, H / 2.0, H / 2.0);
    for (v, anchor) in [(axes.x.0, "start"), (axes.x.1, "end")] {
        let (px, _) = axes.px(v, axes.y.0);
        let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="{anchor}">{v:.3}</text>"#, y0 + 14.0);
    }
    for v in [axes.y.0, axes.y.1] {
        let (_, py) = axes.px(axes.x.0, v);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{py:.1}" text-anchor="end">{v:.3}</text>"#, x0 - 4.0);
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| axes.px(x, y)).map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" fill="{color}">{name}</text>"#, x0 + 8.0, y1 + 14.0 * (i as f64 + 1.0));
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(series: &[(String, Vec<(f64, f64)>)]) -> Axes {
    let all = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
    for &(a, b) in all {
        x = (x.0.min(a), x.1.max(a));
        y = (y.0.min(b), y.1.max(b));
    }
    Axes { x, y }
}

/// DET-style curves (FAR against FRR) for every stored trial set.
pub fn roc_svg(report: &EvalReport) -> Result<String> {
    let mut series = Vec::new();
    for (name, t) in &report.trials {
        series.push((name.clone(), roc_points(t)?.iter().map(|p| (p.far, p.frr)).collect()));
    }
    for (cond, cell) in &report.conversion {
        series.push((format!("conversion {cond} A"), roc_points(&cell.trials_a)?.iter().map(|p| (p.far, p.frr)).collect()));
        series.push((format!("conversion {cond} B"), roc_points(&cell.trials_b)?.iter().map(|p| (p.far, p.frr)).collect()));
    }
    Ok(chart("Operating points", "false acceptance rate", "false rejection rate", &Axes { x: (0.0, 1.0), y: (0.0, 1.0) }, &series))
}

/// Total loss per epoch and split from the stored training history.
pub fn loss_svg(report: &EvalReport) -> Option<String> {
    let mut by_split: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &report.loss_history {
        by_split.entry(r.split.as_str()).or_default().push((r.epoch as f64, r.loss.total));
    }
    if by_split.values().all(|v| v.is_empty()) {
        return None;
    }
    let series: Vec<(String, Vec<(f64, f64)>)> = by_split.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Some(chart("Training loss", "epoch", "total loss", &bounds(&series), &series))
}

/// Writes `roc.svg` and, when the report carries a history, `loss.svg`.
pub fn write_plots(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    let roc = dir.join("roc.svg");
    std::fs::write(&roc, roc_svg(report)?).map_err(|e| Error::io(&roc, e))?;
    out.push(roc);
    if let Some(svg) = loss_svg(report) {
        let p = dir.join("loss.svg");
        std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}
