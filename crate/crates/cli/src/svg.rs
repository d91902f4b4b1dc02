//! Minimal SVG charts drawn straight from CSV columns. Values are plotted as
//! read; nothing is aggregated.

use std::fmt::Write;

use anyhow::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ChartKind {
    Line,
    Bar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    /// `(x label, y)`; for line charts the x label must parse as a number.
    pub points: Vec<(String, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + step * 1e-9 {
        out.push(if t.abs() < step * 1e-9 { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

pub fn render(kind: ChartKind, title: &str, x_label: &str, series: &[Series]) -> Result<String> {
    if series.iter().all(|s| s.points.is_empty()) {
        bail!("nothing to plot");
    }
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).filter(|v| v.is_finite()).collect();
    if ys.is_empty() {
        bail!("no finite values to plot");
    }
    let mut y_lo = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let mut y_hi = ys.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if kind == ChartKind::Bar {
        y_lo = y_lo.min(0.0);
        y_hi = y_hi.max(0.0);
    }
    if y_hi - y_lo < 1e-12 {
        y_lo -= 0.5;
        y_hi += 0.5;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sy = |v: f64| TOP + ph * (1.0 - (v - y_lo) / (y_hi - y_lo));

    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#)?;
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title))?;
    for t in ticks(y_lo, y_hi) {
        let y = sy(t);
        writeln!(out, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#e0e0e0"/>"##, W - RIGHT)?;
        writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, fmt_tick(t))?;
    }
    writeln!(out, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, TOP + ph)?;
    writeln!(out, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, TOP + ph, W - RIGHT, TOP + ph)?;
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 12.0, escape(x_label))?;

    match kind {
        ChartKind::Line => {
            let parse = |s: &str| s.trim().parse::<f64>().ok();
            let mut xs = Vec::new();
            for s in series {
                for (x, _) in &s.points {
                    match parse(x) {
                        Some(v) => xs.push(v),
                        None => bail!("line chart needs a numeric x column, got `{x}`"),
                    }
                }
            }
            let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let mut x_hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if x_hi - x_lo < 1e-12 {
                x_hi = x_lo + 1.0;
            }
            let sx = |v: f64| LEFT + pw * (v - x_lo) / (x_hi - x_lo);
            for t in ticks(x_lo, x_hi) {
                writeln!(out, r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#, sx(t), TOP + ph + 16.0, fmt_tick(t))?;
            }
            for (i, s) in series.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                let pts: Vec<String> = s
                    .points
                    .iter()
                    .filter(|p| p.1.is_finite())
                    .map(|(x, y)| format!("{:.2},{:.2}", sx(parse(x).unwrap_or(0.0)), sy(*y)))
                    .collect();
                writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "))?;
            }
        }
        ChartKind::Bar => {
            let mut cats: Vec<&str> = Vec::new();
            for s in series {
                for (x, _) in &s.points {
                    if !cats.contains(&x.as_str()) {
                        cats.push(x);
                    }
                }
            }
            let slot = pw / cats.len() as f64;
            let bw = slot * 0.8 / series.len() as f64;
            for (c, name) in cats.iter().enumerate() {
                let cx = LEFT + slot * (c as f64 + 0.5);
                writeln!(out, r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#, TOP + ph + 16.0, escape(name))?;
            }
            for (i, s) in series.iter().enumerate() {
                let colour = PALETTE[i % PALETTE.len()];
                for (x, y) in s.points.iter().filter(|p| p.1.is_finite()) {
                    let c = cats.iter().position(|n| n == x).unwrap_or(0);
                    let x0 = LEFT + slot * c as f64 + slot * 0.1 + bw * i as f64;
                    let (a, b) = (sy(*y), sy(0.0));
                    writeln!(
                        out,
                        r#"<rect x="{x0:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="{colour}"/>"#,
                        a.min(b),
                        (a - b).abs()
                    )?;
                }
            }
        }
    }
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let y = TOP + 14.0 * i as f64;
        writeln!(out, r#"<rect x="{}" y="{:.2}" width="10" height="10" fill="{colour}"/>"#, W - RIGHT - 150.0, y)?;
        writeln!(out, r#"<text x="{}" y="{:.2}">{}</text>"#, W - RIGHT - 135.0, y + 9.0, escape(&s.label))?;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_steps_are_round() {
        assert_eq!(ticks(0.0, 1.0), vec![0.0, 0.2, 0.4, 0.6000000000000001, 0.8, 1.0]);
        assert_eq!(ticks(3.0, 47.0), vec![10.0, 20.0, 30.0, 40.0]);
    }

    #[test]
    fn renders_both_kinds() {
        let s = vec![Series { label: "a<b".into(), points: vec![("1".into(), 2.0), ("2".into(), 3.0)] }];
        let line = render(ChartKind::Line, "t", "x", &s).unwrap();
        assert!(line.starts_with("<svg") && line.contains("polyline") && line.contains("a&lt;b"));
        let bar = render(ChartKind::Bar, "t", "x", &s).unwrap();
        assert_eq!(bar.matches("<rect").count(), 1 + 2 + 1);
        let words = vec![Series { label: "a".into(), points: vec![("u00".into(), 1.0)] }];
        assert!(render(ChartKind::Line, "t", "x", &words).is_err());
        assert!(render(ChartKind::Bar, "t", "x", &[]).is_err());
    }
}
