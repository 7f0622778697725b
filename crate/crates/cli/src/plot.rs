//! Minimal SVG line charts: accuracy against calibration data, and
//! validation accuracy against epoch per LOSO fold.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// Drawn thick and black.
    pub highlight: bool,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart with the y axis fixed to [0, 1].
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xmax = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(0.0f64, f64::max)
        .max(1.0);
    let sx = |x: f64| MARGIN + x / xmax * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - y.clamp(0.0, 1.0) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, esc(title)).unwrap();
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let (right, py, lx) = (W - MARGIN, sy(y), MARGIN - 6.0);
        writeln!(
            svg,
            r##"<line x1="{MARGIN}" x2="{right}" y1="{py:.1}" y2="{py:.1}" stroke="#ddd"/><text x="{lx}" y="{:.1}" text-anchor="end">{y:.1}</text>"##,
            py + 4.0
        )
        .unwrap();
    }
    let mut ticks: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    if ticks.len() > 12 {
        let step = ticks.len().div_ceil(12);
        ticks = ticks.into_iter().step_by(step).collect();
    }
    for x in ticks {
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            sx(x),
            H - MARGIN + 16.0
        )
        .unwrap();
    }
    writeln!(
        svg,
        r##"<line x1="{MARGIN}" x2="{}" y1="{1}" y2="{1}" stroke="#000"/><line x1="{MARGIN}" x2="{MARGIN}" y1="{MARGIN}" y2="{1}" stroke="#000"/>"##,
        W - MARGIN,
        H - MARGIN
    )
    .unwrap();
    writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 14.0, esc(x_label)).unwrap();
    writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        H / 2.0,
        esc(y_label)
    )
    .unwrap();

    for (i, s) in series.iter().enumerate() {
        let (color, width) = if s.highlight { ("#000", 3.0) } else { (PALETTE[i % PALETTE.len()], 1.5) };
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        for &(x, y) in &s.points {
            writeln!(svg, r#"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
        }
        let ly = MARGIN + 14.0 * i as f64;
        writeln!(
            svg,
            r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="{width}"/><text x="{2}" y="{3}">{4}</text>"#,
            W - MARGIN - 90.0,
            W - MARGIN - 74.0,
            W - MARGIN - 70.0,
            ly + 4.0,
            esc(&s.name)
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_has_one_polyline_per_series() {
        let s = |name: &str, hl| Series {
            name: name.into(),
            points: vec![(0.0, 0.2), (10.0, 0.5), (20.0, 0.7)],
            highlight: hl,
        };
        let svg = line_chart("t <1>", "x", "y", &[s("S01", false), s("mean", true)]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("t &lt;1&gt;"));
    }
}
