//! Minimal SVG error-bar charts.

use std::fmt::Write;

use lineadapt::stats::BootstrapSummary;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, BootstrapSummary)>,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean with CI whiskers per point, one colored line per series. With
/// `log_x` the x axis is log2-scaled.
pub fn error_bar_chart(title: &str, x_label: &str, log_x: bool, series: &[Series]) -> String {
    let tx = |x: f64| if log_x { x.max(1e-9).log2() } else { x };
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, s) in pts {
        x0 = x0.min(tx(*x));
        x1 = x1.max(tx(*x));
        y0 = y0.min(s.ci_low);
        y1 = y1.max(s.ci_high);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.08).max(1e-3);
    let (y0, y1) = (y0.min(0.0) - pad, y1 + pad);
    let px = |x: f64| LEFT + (tx(x) - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * (H - TOP - BOTTOM);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let (bx, by) = (W - RIGHT, H - BOTTOM);
    let _ = writeln!(s, r#"<path d="M{LEFT} {TOP} V{by} H{bx}" stroke="black" fill="none"/>"#);
    let _ = writeln!(s, r##"<line x1="{LEFT}" x2="{bx}" y1="{0:.1}" y2="{0:.1}" stroke="#bbb" stroke-dasharray="4 3"/>"##, py(0.0));
    for i in 0..=5 {
        let v = y0 + (y1 - y0) * i as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, LEFT - 6.0, py(v) + 4.0);
    }
    let mut xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    for x in &xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{x}</text>"#, px(*x), by + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (LEFT + bx) / 2.0, H - 10.0, escape(x_label));
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        // Small horizontal offsets keep overlapping whiskers apart.
        let dx = (i as f64 - (series.len() as f64 - 1.0) / 2.0) * 4.0;
        let path: Vec<String> = ser.points.iter().map(|(x, b)| format!("{:.1},{:.1}", px(*x) + dx, py(b.mean))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{c}" fill="none"/>"#, path.join(" "));
        for (x, b) in &ser.points {
            let cx = px(*x) + dx;
            let _ = writeln!(s, r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="{c}"/>"#, py(b.ci_low), py(b.ci_high));
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{:.1}" r="3" fill="{c}"/>"#, py(b.mean));
        }
        let ly = TOP + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{}" y="{}" width="12" height="12" fill="{c}"/>"#, bx + 16.0, ly);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, bx + 34.0, ly + 10.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}
