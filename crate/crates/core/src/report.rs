//! Plots of a search trace: probability-vs-step curves and a pie chart of a
//! policy. Output is plain CSV and standalone SVG.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::error::{arg, Result};
use crate::policy::Policy;
use crate::raster::TransformId;
use crate::search::PolicyTrace;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;
const LEGEND: f64 = 150.0;
const PIE_RADIUS: f64 = 160.0;

fn colour(i: usize, n: usize) -> String {
    format!("hsl({:.0},65%,45%)", 360.0 * i as f64 / n.max(1) as f64)
}

/// `step` followed by the slot-averaged probability of each transform.
pub fn probability_curves_csv(trace: &PolicyTrace) -> String {
    let mut out = String::from("step");
    for t in &trace.transforms {
        let _ = write!(out, ",{}", t.name());
    }
    out.push('\n');
    for (rec, probs) in trace.records.iter().zip(trace.mean_probs()) {
        let _ = write!(out, "{}", rec.step);
        for p in probs {
            let _ = write!(out, ",{p}");
        }
        out.push('\n');
    }
    out
}

/// Line plot of every transform's slot-averaged probability against the
/// outer step. Each record becomes one vertex (a marker when alone).
pub fn probability_curves_svg(trace: &PolicyTrace) -> String {
    let n = trace.transforms.len();
    let series = trace.mean_probs();
    let plot_w = WIDTH - 2.0 * MARGIN - LEGEND;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let y_max = series
        .iter()
        .flatten()
        .copied()
        .fold(1.0 / n.max(1) as f64, f64::max)
        .min(1.0)
        * 1.05;
    let steps = series.len();
    let x_of = |i: usize| {
        if steps <= 1 {
            MARGIN + plot_w / 2.0
        } else {
            MARGIN + plot_w * i as f64 / (steps - 1) as f64
        }
    };
    let y_of = |p: f64| MARGIN + plot_h * (1.0 - p / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="middle">outer step</text>"#,
        MARGIN + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{:.2}" font-size="12">probability (max {y_max:.3})</text>"#,
        MARGIN - 10.0
    );
    for (i, t) in trace.transforms.iter().enumerate() {
        let c = colour(i, n);
        if steps == 1 {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{c}"/>"#,
                x_of(0),
                y_of(series[0][i])
            );
        } else if steps > 1 {
            let pts: Vec<String> = series
                .iter()
                .enumerate()
                .map(|(s, p)| format!("{:.2},{:.2}", x_of(s), y_of(p[i])))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = MARGIN + 14.0 * i as f64 + 8.0;
        let lx = WIDTH - LEGEND - MARGIN / 2.0 + 10.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{c}"/><text x="{:.2}" y="{ly:.2}" font-size="11">{}</text>"#,
            ly - 9.0,
            lx + 14.0,
            t.name()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Geometry of one pie slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PieSlice {
    pub transform: TransformId,
    /// Radians, measured clockwise from 12 o'clock.
    pub start: f64,
    pub sweep: f64,
    /// Fraction of the full radius.
    pub radius: f64,
}

/// Slices for the given slot-averaged probabilities and magnitude bounds.
/// Parameter-free transforms are drawn at full radius.
pub fn pie_slices(
    transforms: &[TransformId],
    mean_probs: &[f64],
    mag_upper: &[f64],
) -> Result<Vec<PieSlice>> {
    if transforms.len() != mean_probs.len() || transforms.len() != mag_upper.len() {
        return arg("pie chart inputs differ in length");
    }
    let total: f64 = mean_probs.iter().sum();
    if !(total > 0.0) {
        return arg("probabilities must have positive mass");
    }
    let mut start = 0.0;
    Ok(transforms
        .iter()
        .zip(mean_probs)
        .zip(mag_upper)
        .map(|((&t, &p), &mu)| {
            let sweep = 2.0 * PI * p / total;
            let slice = PieSlice {
                transform: t,
                start,
                sweep,
                radius: if t.is_parameter_free() {
                    1.0
                } else {
                    mu.clamp(0.0, 1.0)
                },
            };
            start += sweep;
            slice
        })
        .collect())
}

pub fn policy_pie_slices(policy: &Policy) -> Result<Vec<PieSlice>> {
    pie_slices(
        policy.transforms(),
        &policy.mean_probs(),
        policy.mag_upper(),
    )
}

/// Pie chart of the policy in the last record of `trace`.
pub fn trace_pie_slices(trace: &PolicyTrace) -> Result<Vec<PieSlice>> {
    let last = trace
        .records
        .last()
        .ok_or_else(|| crate::Error::Argument("trace has no records".into()))?;
    let probs = trace.mean_probs().pop().unwrap_or_default();
    pie_slices(&trace.transforms, &probs, &last.mag_upper)
}

pub fn pie_chart_svg(slices: &[PieSlice]) -> String {
    let n = slices.len();
    let size = 2.0 * (PIE_RADIUS + MARGIN);
    let (cx, cy) = (PIE_RADIUS + MARGIN, PIE_RADIUS + MARGIN);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{size:.0}" viewBox="0 0 {:.0} {size:.0}">"#,
        size + LEGEND,
        size + LEGEND
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<circle cx="{cx}" cy="{cy}" r="{PIE_RADIUS}" fill="none" stroke="gray" stroke-dasharray="4 3"/>"#
    );
    let point = |angle: f64, r: f64| (cx + r * angle.sin(), cy - r * angle.cos());
    for (i, s) in slices.iter().enumerate() {
        let c = colour(i, n);
        let r = PIE_RADIUS * s.radius;
        if s.sweep >= 2.0 * PI - 1e-12 {
            let _ = writeln!(
                svg,
                r#"<circle cx="{cx}" cy="{cy}" r="{r:.3}" fill="{c}" stroke="white"/>"#
            );
        } else if s.sweep > 0.0 {
            let (x0, y0) = point(s.start, r);
            let (x1, y1) = point(s.start + s.sweep, r);
            let large = u8::from(s.sweep > PI);
            let _ = writeln!(
                svg,
                r#"<path d="M {cx} {cy} L {x0:.3} {y0:.3} A {r:.3} {r:.3} 0 {large} 1 {x1:.3} {y1:.3} Z" fill="{c}" stroke="white"/>"#
            );
        }
        let ly = MARGIN + 14.0 * i as f64;
        let lx = size + 4.0;
        let _ = writeln!(
            svg,
            r#"<rect x="{lx:.2}" y="{:.2}" width="10" height="10" fill="{c}"/><text x="{:.2}" y="{ly:.2}" font-size="11">{} {:.3}</text>"#,
            ly - 9.0,
            lx + 14.0,
            s.transform.name(),
            s.sweep / (2.0 * PI)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
