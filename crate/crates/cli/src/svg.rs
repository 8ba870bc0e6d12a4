//! Static SVG rendering of barrier traces, planar paths, and input signals.

use anyhow::Result;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 840.0;
const HEIGHT: f64 = 520.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_series(series: &[Series]) -> Self {
        let mut frame = Frame {
            x_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_min: f64::INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for s in series {
            for &(x, y) in &s.points {
                frame.x_min = frame.x_min.min(x);
                frame.x_max = frame.x_max.max(x);
                frame.y_min = frame.y_min.min(y);
                frame.y_max = frame.y_max.max(y);
            }
        }
        if !frame.x_min.is_finite() {
            frame = Frame {
                x_min: 0.0,
                x_max: 1.0,
                y_min: 0.0,
                y_max: 1.0,
            };
        }
        if frame.x_max - frame.x_min < 1e-12 {
            frame.x_max = frame.x_min + 1.0;
        }
        if frame.y_max - frame.y_min < 1e-12 {
            frame.y_max = frame.y_min + 1.0;
        }
        let pad = 0.05 * (frame.y_max - frame.y_min);
        frame.y_min -= pad;
        frame.y_max += pad;
        frame
    }

    fn x(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open_svg(out: &mut String, title: &str) {
    let _ = write!(
        out,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{title}</text>
"##,
        WIDTH / 2.0
    );
}

fn axes(out: &mut String, frame: &Frame, x_label: &str, y_label: &str) {
    let x0 = frame.x(frame.x_min);
    let x1 = frame.x(frame.x_max);
    let y0 = frame.y(frame.y_min);
    let y1 = frame.y(frame.y_max);
    let _ = write!(
        out,
        r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444" stroke-width="1"/>
"##,
        x1 - x0,
        y0 - y1
    );
    for k in 0..=5 {
        let fx = frame.x_min + k as f64 / 5.0 * (frame.x_max - frame.x_min);
        let fy = frame.y_min + k as f64 / 5.0 * (frame.y_max - frame.y_min);
        let px = frame.x(fx);
        let py = frame.y(fy);
        let _ = write!(
            out,
            r##"<line x1="{px}" y1="{y0}" x2="{px}" y2="{}" stroke="#444"/>
<text x="{px}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{fx:.3}</text>
<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="#444"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{fy:.3}</text>
"##,
            y0 + 5.0,
            y0 + 20.0,
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0
        );
    }
    let _ = write!(
        out,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>
<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>
"##,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
}

fn polyline(out: &mut String, frame: &Frame, points: &[(f64, f64)], color: &str, opacity: f64) {
    let coords: Vec<String> = points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", frame.x(x), frame.y(y)))
        .collect();
    let _ = write!(
        out,
        r##"<polyline fill="none" stroke="{color}" stroke-width="1.4" stroke-opacity="{opacity:.3}" points="{}"/>
"##,
        coords.join(" ")
    );
}

fn legend(out: &mut String, labels: &[&str]) {
    for (k, label) in labels.iter().enumerate() {
        let y = 40.0 + 18.0 * k as f64;
        let color = PALETTE[k % PALETTE.len()];
        let _ = write!(
            out,
            r##"<rect x="{}" y="{}" width="12" height="12" fill="{color}"/>
<text x="{}" y="{}" font-family="sans-serif" font-size="12">{label}</text>
"##,
            WIDTH - MARGIN - 150.0,
            y - 10.0,
            WIDTH - MARGIN - 132.0,
            y
        );
    }
}

fn downsample(points: &[(f64, f64)], cap: usize) -> Vec<(f64, f64)> {
    if points.len() <= cap {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(cap);
    let mut out: Vec<(f64, f64)> = points.iter().step_by(stride).copied().collect();
    if out.last() != points.last() {
        out.push(*points.last().unwrap());
    }
    out
}

/// Time-series chart with a dashed zero line.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    path: &Path,
) -> Result<()> {
    let mut out = String::new();
    open_svg(&mut out, title);
    let frame = Frame::from_series(series);
    axes(&mut out, &frame, x_label, y_label);
    if frame.y_min < 0.0 && frame.y_max > 0.0 {
        let y = frame.y(0.0);
        let _ = write!(
            out,
            r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#999" stroke-dasharray="6,4"/>
"##,
            frame.x(frame.x_min),
            frame.x(frame.x_max)
        );
    }
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        polyline(&mut out, &frame, &downsample(&s.points, 2500), color, 1.0);
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}

/// Planar paths with opacity increasing along time.
pub fn path_chart(title: &str, series: &[Series], path: &Path) -> Result<()> {
    let mut out = String::new();
    open_svg(&mut out, title);
    let frame = Frame::from_series(series);
    axes(&mut out, &frame, "x [m]", "y [m]");
    let chunks = 40;
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let points = downsample(&s.points, 4000);
        let chunk_len = points.len().div_ceil(chunks).max(2);
        let mut start = 0;
        let mut chunk = 0;
        while start + 1 < points.len() {
            let end = (start + chunk_len).min(points.len() - 1);
            let opacity = 0.15 + 0.85 * (chunk as f64 + 1.0) / chunks as f64;
            polyline(&mut out, &frame, &points[start..=end], color, opacity);
            start = end;
            chunk += 1;
        }
        if let Some(&(x, y)) = points.last() {
            let _ = write!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>
"##,
                frame.x(x),
                frame.y(y)
            );
        }
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    legend(&mut out, &labels);
    out.push_str("</svg>\n");
    std::fs::write(path, out)?;
    Ok(())
}
