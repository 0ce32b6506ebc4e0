//! SVG rendering of a detection trace against ground truth: green bands for
//! labelled frames, the raw posterior as a dashed line, the smoothed posterior
//! as a solid line and PRS segments as bars under the axis.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::prs::{argmax, runs};
use crate::trace::Trace;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 260.0;
const LEFT: f64 = 40.0;
const RIGHT: f64 = 10.0;
const TOP: f64 = 20.0;
const PLOT_H: f64 = 180.0;
const BAR_Y: f64 = TOP + PLOT_H + 12.0;
const BAR_H: f64 = 10.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn polyline(values: &[f32], x: impl Fn(f64) -> f64, y: impl Fn(f64) -> f64) -> String {
    let mut pts = String::new();
    for (t, &v) in values.iter().enumerate() {
        if t > 0 {
            pts.push(' ');
        }
        let _ = write!(pts, "{:.2},{:.2}", x(t as f64 + 0.5), y(v as f64));
    }
    pts
}

/// Render `trace` over the ground-truth labels `gt`. `theta` draws the
/// grouping threshold as a horizontal guide.
pub fn render_svg(trace: &Trace, gt: &[u8], theta: f64) -> Result<String> {
    let t = trace.p.len();
    if gt.len() != t {
        return Err(Error::invalid(
            "plot",
            format!("trace has {t} frames but ground truth has {}", gt.len()),
        ));
    }
    if t == 0 {
        return Err(Error::invalid("plot", "trace is empty"));
    }
    trace.validate()?;
    let sx = (WIDTH - LEFT - RIGHT) / t as f64;
    let x = |f: f64| LEFT + f * sx;
    let y = |v: f64| TOP + (1.0 - v.clamp(0.0, 1.0)) * PLOT_H;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{} sweep {}</title>"#,
        escape(&trace.case_id),
        trace.sweep_id
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let gt_mask: Vec<bool> = gt.iter().map(|&v| v == 1).collect();
    let _ = writeln!(s, r##"<g class="ground-truth" fill="#2ca02c" fill-opacity="0.25">"##);
    for (a, b) in runs(&gt_mask) {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{TOP}" width="{:.2}" height="{PLOT_H}"/>"#,
            x(a as f64),
            (b - a + 1) as f64 * sx
        );
    }
    s.push_str("</g>\n");

    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="black"/>"#,
        y(0.0),
        x(t as f64)
    );
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#,
        y(0.0)
    );
    let _ = writeln!(
        s,
        r#"<line class="threshold" x1="{LEFT}" y1="{0:.2}" x2="{1:.2}" y2="{0:.2}" stroke="gray" stroke-dasharray="2,3"/>"#,
        y(theta),
        x(t as f64)
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="10" text-anchor="end">{v}</text>"#,
            LEFT - 4.0,
            y(v) + 3.0
        );
    }

    let _ = writeln!(
        s,
        r##"<polyline class="posterior" fill="none" stroke="#1f77b4" stroke-width="1.5" stroke-dasharray="5,3" points="{}"/>"##,
        polyline(&trace.p, x, y)
    );
    let _ = writeln!(
        s,
        r##"<polyline class="smoothed" fill="none" stroke="#d62728" stroke-width="1.5" points="{}"/>"##,
        polyline(&trace.p_smooth, x, y)
    );

    let _ = writeln!(s, r##"<g class="segments" fill="#ff7f0e">"##);
    for [a, b] in &trace.segments {
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{BAR_Y}" width="{:.2}" height="{BAR_H}"/>"#,
            x(*a as f64),
            (b - a + 1) as f64 * sx
        );
    }
    s.push_str("</g>\n");
    if trace.segments.is_empty() {
        let p: Vec<f64> = trace.p.iter().map(|&v| v as f64).collect();
        let peak = argmax(&p);
        let _ = writeln!(
            s,
            r##"<g class="fallback"><circle cx="{:.2}" cy="{:.2}" r="4" fill="none" stroke="#ff7f0e" stroke-width="2"/><text x="{:.2}" y="{:.2}" font-size="10">fallback</text></g>"##,
            x(peak as f64 + 0.5),
            BAR_Y + BAR_H / 2.0,
            x(peak as f64 + 0.5) + 6.0,
            BAR_Y + BAR_H
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(p: Vec<f32>, segments: Vec<[usize; 2]>) -> Trace {
        let t = p.len();
        let mut labels = vec![0u8; t];
        for [a, b] in &segments {
            labels[*a..=*b].fill(1);
        }
        Trace {
            case_id: "case_<1>".into(),
            sweep_id: 0,
            p_smooth: p.clone(),
            p,
            segments,
            labels,
        }
    }

    #[test]
    fn renders_bands_lines_and_segments() {
        let tr = trace(vec![0.1, 0.95, 0.97, 0.2, 0.1], vec![[1, 2]]);
        let svg = render_svg(&tr, &[0, 1, 1, 1, 0], 0.9).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("stroke-dasharray=\"5,3\""));
        assert!(svg.contains("case_&lt;1&gt;"));
        assert!(!svg.contains("fallback"));
    }

    #[test]
    fn empty_segments_get_a_fallback_marker() {
        let tr = trace(vec![0.1, 0.3, 0.2], vec![]);
        let svg = render_svg(&tr, &[0, 0, 0], 0.9).unwrap();
        assert!(svg.contains("class=\"fallback\""));
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let tr = trace(vec![0.1, 0.3, 0.2], vec![]);
        assert!(render_svg(&tr, &[0, 0], 0.9).is_err());
    }
}
