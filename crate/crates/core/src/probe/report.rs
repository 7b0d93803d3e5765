use std::fmt::Write as _;
use std::path::Path;

use super::{ProbeReport, Series};
use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Writes `report.json`, `probes.csv`, `charts/returns.svg` and
/// `charts/r2.svg` under `dir`.
pub fn emit_report(dir: &Path, report: &ProbeReport) -> Result<()> {
    std::fs::create_dir_all(dir.join("charts"))?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;

    let mut csv = String::from("factor,block,r2\n");
    for p in &report.probes {
        let v = p.r2.map_or_else(|| "undefined".to_string(), |v| format!("{v}"));
        let _ = writeln!(csv, "{},{},{}", p.factor.name(), p.block.name(), v);
    }
    std::fs::write(dir.join("probes.csv"), csv)?;

    std::fs::write(
        dir.join("charts/returns.svg"),
        render_line_chart("return vs environment steps", &report.curves),
    )?;
    let bars: Vec<(String, Option<f64>)> = report
        .probes
        .iter()
        .map(|p| (format!("{}/{}", p.factor.name(), p.block.name()), p.r2))
        .collect();
    std::fs::write(dir.join("charts/r2.svg"), render_bar_chart("held-out R2 per factor and block", &bars))?;
    Ok(())
}

pub fn read_report(dir: &Path) -> Result<ProbeReport> {
    let path = dir.join("report.json");
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path,
        detail: e.to_string(),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = write!(
        out,
        r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
    );
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

/// One `<polyline>` per series, tagged with `data-metric`.
pub fn render_line_chart(title: &str, series: &[Series]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (xl, xh) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.env_steps)));
    let (yl, yh) = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.value)));
    let sx = |v: f64| MARGIN + (v - xl) / (xh - xl) * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| HEIGHT - MARGIN - (v - yl) / (yh - yl) * (HEIGHT - 2.0 * MARGIN);
    let _ = write!(
        out,
        r#"<text x="{MARGIN}" y="{}" font-size="10">{yl:.3}</text><text x="{MARGIN}" y="{}" font-size="10">{yh:.3}</text>"#,
        HEIGHT - MARGIN + 12.0,
        MARGIN - 4.0
    );
    let _ = write!(
        out,
        r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{xh:.0} env steps</text>"#,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 24.0
    );
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.env_steps.is_finite() && p.value.is_finite())
            .map(|p| format!("{:.2},{:.2}", sx(p.env_steps), sy(p.value)))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = write!(
            out,
            r#"<polyline data-metric="{}" fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            escape(&s.metric),
            pts.join(" ")
        );
        let _ = write!(
            out,
            r#"<text x="{}" y="{}" font-size="10" fill="{color}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            MARGIN + 14.0 * (i as f64 + 1.0),
            escape(&s.metric)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// One `<g data-metric>` per bar; undefined values get a label but no bar.
pub fn render_bar_chart(title: &str, bars: &[(String, Option<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let lo = bars.iter().filter_map(|b| b.1).fold(0.0_f64, f64::min).max(-1.0);
    let hi = 1.0;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sy = |v: f64| HEIGHT - MARGIN - (v - lo) / (hi - lo) * plot_h;
    let n = bars.len().max(1) as f64;
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = MARGIN + slot * i as f64 + slot * 0.15;
        let _ = write!(out, r#"<g data-metric="{}">"#, escape(label));
        match value {
            Some(v) => {
                let v = v.clamp(lo, hi);
                let (top, bottom) = (sy(v.max(0.0)), sy(v.min(0.0)));
                let _ = write!(
                    out,
                    r#"<rect x="{x:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                    slot * 0.7,
                    (bottom - top).max(0.0),
                    PALETTE[0]
                );
            }
            None => {
                let _ = write!(
                    out,
                    r#"<text x="{x:.2}" y="{:.2}" font-size="9">n/a</text>"#,
                    sy(0.0) - 2.0
                );
            }
        }
        let _ = write!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="8" transform="rotate(45 {:.2} {:.2})">{}</text></g>"#,
            x,
            HEIGHT - MARGIN + 10.0,
            x,
            HEIGHT - MARGIN + 10.0,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}
